//! Encoder/decoder pair, Gaussian posteriors, and the regularized ELBO with a
//! total-correlation penalty.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Conv2d, ConvTranspose2d, Dense, Graph, Mlp, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::render::Image;
use crate::rng::RngStream;

/// Diagonal Gaussian posterior over one panel's latent code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl PosteriorGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::InvalidArgument(format!(
                "posterior mean has {} dims, log-variance {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior parameters".into()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `mean + exp(log_var / 2) * noise`.
pub fn reparameterize(p: &PosteriorGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.dim() {
        return Err(Error::InvalidArgument(format!(
            "noise has {} dims, posterior {}",
            noise.len(),
            p.dim()
        )));
    }
    Ok(p.mean
        .iter()
        .zip(&p.log_var)
        .zip(noise)
        .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
        .collect())
}

/// Per-dimension KL divergence to the standard normal prior.
pub fn kl_to_prior(p: &PosteriorGaussian) -> Vec<f64> {
    p.mean
        .iter()
        .zip(&p.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .collect()
}

/// `KL(N(m1, e^lv1) || N(m2, e^lv2))` for univariate Gaussians.
pub fn gaussian_kl(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    let d = m1 - m2;
    0.5 * (lv2 - lv1 + (lv1.exp() + d * d) / lv2.exp() - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Two hidden fully connected layers on flattened pixels.
    Dense { hidden: usize },
    /// Four 4x4 stride-2 convolutions (32, 32, 64, 64) and FC 256, mirrored
    /// by the decoder.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub architecture: Architecture,
}

#[derive(Clone, Debug)]
enum Encoder {
    Dense(Mlp),
    Conv { convs: Vec<Conv2d>, fc: Dense, out: Dense },
}

#[derive(Clone, Debug)]
enum Decoder {
    Dense(Mlp),
    Conv { fc: Dense, grow: Dense, ups: Vec<ConvTranspose2d> },
}

const CONV_CHANNELS: [usize; 4] = [32, 32, 64, 64];
const CONV_FC: usize = 256;

#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    encoder: Encoder,
    decoder: Decoder,
}

impl Vae {
    pub fn new(store: &mut ParamStore<f32>, config: VaeConfig, rng: &mut RngStream) -> Result<Self> {
        let VaeConfig {
            image_size: s,
            channels: ch,
            latent_dim: d,
            architecture,
        } = config;
        if d == 0 || ch == 0 || s == 0 {
            return Err(Error::InvalidArgument("vae dimensions must be positive".into()));
        }
        let pixels = s * s * ch;
        let (encoder, decoder) = match architecture {
            Architecture::Dense { hidden } => (
                Encoder::Dense(Mlp::new(store, "encoder", &[pixels, hidden, hidden, 2 * d], Activation::Relu, rng)?),
                Decoder::Dense(Mlp::new(store, "decoder", &[d, hidden, hidden, pixels], Activation::Relu, rng)?),
            ),
            Architecture::Conv => {
                if s % 16 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "conv architecture needs an image size divisible by 16, got {s}"
                    )));
                }
                let side = s / 16;
                let flat = side * side * CONV_CHANNELS[3];
                let mut convs = Vec::new();
                let mut cin = ch;
                for (i, &c) in CONV_CHANNELS.iter().enumerate() {
                    convs.push(Conv2d::new(store, &format!("encoder.conv{i}"), cin, c, rng)?);
                    cin = c;
                }
                let fc = Dense::new(store, "encoder.fc", flat, CONV_FC, rng)?;
                let out = Dense::new(store, "encoder.out", CONV_FC, 2 * d, rng)?;
                let dfc = Dense::new(store, "decoder.fc", d, CONV_FC, rng)?;
                let grow = Dense::new(store, "decoder.grow", CONV_FC, flat, rng)?;
                let outs = [CONV_CHANNELS[2], CONV_CHANNELS[1], CONV_CHANNELS[0], ch];
                let mut ups = Vec::new();
                let mut cin = CONV_CHANNELS[3];
                for (i, &c) in outs.iter().enumerate() {
                    ups.push(ConvTranspose2d::new(store, &format!("decoder.up{i}"), cin, c, rng)?);
                    cin = c;
                }
                (Encoder::Conv { convs, fc, out }, Decoder::Conv { fc: dfc, grow, ups })
            }
        };
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Flattened pixel count per image (channel-major).
    pub fn pixels(&self) -> usize {
        self.config.image_size * self.config.image_size * self.config.channels
    }

    /// Encodes `x [b, pixels]` into `(mean, log_var)`, each `[b, latent]`.
    pub fn encode_graph(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (b, p) = g.value(x).dims2();
        if p != self.pixels() {
            return Err(Error::InvalidArgument(format!(
                "encoder expects {} values per image, got {p}",
                self.pixels()
            )));
        }
        let h = match &self.encoder {
            Encoder::Dense(mlp) => mlp.forward(g, store, x)?,
            Encoder::Conv { convs, fc, out } => {
                let s = self.config.image_size;
                let mut h = g.reshape(x, &[b, self.config.channels, s, s])?;
                for conv in convs {
                    h = conv.forward(g, store, h)?;
                    h = g.relu(h);
                }
                let flat = g.value(h).len() / b;
                h = g.reshape(h, &[b, flat])?;
                h = fc.forward(g, store, h)?;
                h = g.relu(h);
                out.forward(g, store, h)?
            }
        };
        let d = self.latent_dim();
        Ok((g.slice_cols(h, 0, d)?, g.slice_cols(h, d, 2 * d)?))
    }

    /// Bernoulli logits `[b, pixels]` for latent codes `z [b, latent]`.
    pub fn decode_graph(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, z: NodeId) -> Result<NodeId> {
        let (b, d) = g.value(z).dims2();
        if d != self.latent_dim() {
            return Err(Error::InvalidArgument(format!(
                "decoder expects {} latent dims, got {d}",
                self.latent_dim()
            )));
        }
        match &self.decoder {
            Decoder::Dense(mlp) => mlp.forward(g, store, z),
            Decoder::Conv { fc, grow, ups } => {
                let mut h = fc.forward(g, store, z)?;
                h = g.relu(h);
                h = grow.forward(g, store, h)?;
                h = g.relu(h);
                let side = self.config.image_size / 16;
                h = g.reshape(h, &[b, CONV_CHANNELS[3], side, side])?;
                let last = ups.len() - 1;
                for (i, up) in ups.iter().enumerate() {
                    h = up.forward(g, store, h)?;
                    if i < last {
                        h = g.relu(h);
                    }
                }
                g.reshape(h, &[b, self.pixels()])
            }
        }
    }

    /// Posterior for each image (evaluation, no sampling).
    pub fn encode(&self, store: &ParamStore<f32>, images: &[Image]) -> Result<Vec<PosteriorGaussian>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.input(self.images_to_tensor(images)?);
        let (mu, lv) = self.encode_graph(&mut g, store, x)?;
        let d = self.latent_dim();
        (0..images.len())
            .map(|i| {
                PosteriorGaussian::new(
                    g.value(mu).row(i).iter().map(|&v| v as f64).collect(),
                    g.value(lv).row(i).iter().map(|&v| v as f64).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| {
                debug_assert!(v.iter().all(|p| p.dim() == d));
                v
            })
    }

    /// Bernoulli logits for each code.
    pub fn decode(&self, store: &ParamStore<f32>, codes: &[Vec<f64>]) -> Result<Vec<Vec<f32>>> {
        let d = self.latent_dim();
        let data: Vec<f32> = codes.iter().flat_map(|c| c.iter().map(|&v| v as f32)).collect();
        let mut g = Graph::new();
        let z = g.input(Tensor::from_vec(&[codes.len(), d], data)?);
        let out = self.decode_graph(&mut g, store, z)?;
        Ok((0..codes.len()).map(|i| g.value(out).row(i).to_vec()).collect())
    }

    /// Stacks images into `[b, pixels]` in channel-major order.
    pub fn images_to_tensor(&self, images: &[Image]) -> Result<Tensor<f32>> {
        let s = self.config.image_size;
        let ch = self.config.channels;
        let mut data = Vec::with_capacity(images.len() * self.pixels());
        for img in images {
            if img.width != s || img.height != s || img.channels != ch {
                return Err(Error::InvalidArgument(format!(
                    "image is {}x{}x{}, model expects {s}x{s}x{ch}",
                    img.width, img.height, img.channels
                )));
            }
            for c in 0..ch {
                data.extend(img.data.iter().skip(c).step_by(ch));
            }
        }
        Tensor::from_vec(&[images.len(), self.pixels()], data)
    }
}

/// `0.5 * (mu^2 + exp(lv) - lv - 1)` elementwise.
pub fn kl_graph(g: &mut Graph<f32>, mu: NodeId, lv: NodeId) -> Result<NodeId> {
    let m2 = g.square(mu);
    let v = g.exp(lv);
    let a = g.add(m2, v)?;
    let b = g.sub(a, lv)?;
    let c = g.add_scalar(b, -1.0);
    Ok(g.scale(c, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { hidden: 1000, layers: 6 }
    }
}

/// Classifier separating joint latent samples (class 0) from samples with
/// each dimension shuffled independently across the batch (class 1).
#[derive(Clone, Debug)]
pub struct Discriminator {
    mlp: Mlp,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore<f32>, latent_dim: usize, config: DiscriminatorConfig, rng: &mut RngStream) -> Result<Self> {
        let mut dims = vec![latent_dim];
        dims.extend(std::iter::repeat_n(config.hidden, config.layers));
        dims.push(2);
        Ok(Self {
            mlp: Mlp::new(store, "discriminator", &dims, Activation::LeakyRelu(0.01), rng)?,
        })
    }

    /// Zeroes the output layer so both logits are equal everywhere.
    pub fn zero_output(&self, store: &mut ParamStore<f32>) {
        let last = self.mlp.layers.last().expect("discriminator has layers");
        store.get_mut(last.weight).data_mut().fill(0.0);
        store.get_mut(last.bias).data_mut().fill(0.0);
    }

    pub fn logits(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, z: NodeId) -> Result<NodeId> {
        self.mlp.forward(g, store, z)
    }

    /// Density-ratio estimate: mean over the batch of `logit_joint - logit_product`.
    pub fn tc_graph(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, z: NodeId) -> Result<NodeId> {
        if g.value(z).dims2().0 < 2 {
            return Err(Error::InvalidArgument("total correlation needs a batch of at least 2".into()));
        }
        let l = self.logits(g, store, z)?;
        let a = g.slice_cols(l, 0, 1)?;
        let b = g.slice_cols(l, 1, 2)?;
        let d = g.sub(a, b)?;
        Ok(g.mean(d))
    }

    /// Cross-entropy of classifying `joint` as 0 and `permuted` as 1.
    pub fn loss_graph(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, joint: NodeId, permuted: NodeId) -> Result<NodeId> {
        let n = g.value(joint).dims2().0;
        let m = g.value(permuted).dims2().0;
        let lj = self.logits(g, store, joint)?;
        let lp = self.logits(g, store, permuted)?;
        let a = g.softmax_cross_entropy(lj, &vec![0; n])?;
        let b = g.softmax_cross_entropy(lp, &vec![1; m])?;
        let s = g.add(a, b)?;
        Ok(g.scale(s, 0.5))
    }
}

/// Shuffles each column of a `[rows, dim]` matrix independently.
pub fn permute_dims(z: &[f32], rows: usize, dim: usize, rng: &mut RngStream) -> Vec<f32> {
    let mut out = z.to_vec();
    let mut col: Vec<f32> = Vec::with_capacity(rows);
    for k in 0..dim {
        col.clear();
        col.extend((0..rows).map(|r| z[r * dim + k]));
        crate::rng::shuffle(&mut col, rng);
        for (r, &v) in col.iter().enumerate() {
            out[r * dim + k] = v;
        }
    }
    out
}

/// Minibatch estimate of total correlation treating the batch as the data
/// set: `mean_i [log q(z_i) - sum_d log q(z_id)]`.
pub fn tc_analytic_graph(g: &mut Graph<f32>, z: NodeId, mu: NodeId, lv: NodeId) -> Result<NodeId> {
    let (b, d) = g.value(z).dims2();
    if b < 2 {
        return Err(Error::InvalidArgument("total correlation needs a batch of at least 2".into()));
    }
    let dens = g.gaussian_pair_log_density(z, mu, lv)?;
    let joint_terms = g.sum_cols(dens);
    let joint = g.logsumexp_groups(joint_terms, b)?;
    let marg = g.logsumexp_groups(dens, b)?;
    let marg = g.sum_cols(marg);
    let diff = g.sub(joint, marg)?;
    let m = g.mean(diff);
    Ok(g.add_scalar(m, (d as f64 - 1.0) * (b as f64).ln()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcEstimator {
    #[default]
    Discriminator,
    MinibatchAnalytic,
}

/// Scalar summaries of one loss evaluation. `total = -recon + l1 * kl + l2 * tc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Bernoulli log-likelihood per panel (never positive).
    pub recon: f64,
    pub kl_per_dim: Vec<f64>,
    pub kl: f64,
    pub tc: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Graph nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub nll: NodeId,
    pub kl: NodeId,
    pub kl_elems: NodeId,
    pub tc: NodeId,
    pub total: NodeId,
    /// Sampled latent codes fed to the decoder.
    pub z: NodeId,
}

/// Inputs for [`vae_loss_graph`].
pub struct LossInputs<'a> {
    pub mean: NodeId,
    pub log_var: NodeId,
    /// Channel-major pixel targets, one row per panel.
    pub targets: Vec<f32>,
    pub noise: Vec<f32>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tc: TcSource<'a>,
}

pub enum TcSource<'a> {
    Discriminator(&'a Discriminator, &'a ParamStore<f32>),
    MinibatchAnalytic,
}

/// Builds the regularized ELBO. Reconstruction and KL are averaged over panels.
pub fn vae_loss_graph(g: &mut Graph<f32>, vae: &Vae, store: &ParamStore<f32>, inputs: LossInputs) -> Result<LossNodes> {
    let (panels, d) = g.value(inputs.mean).dims2();
    if d != vae.latent_dim() || g.shape(inputs.log_var) != g.shape(inputs.mean) {
        return Err(Error::InvalidArgument(format!(
            "latent tensors {:?}/{:?} do not match latent dim {}",
            g.shape(inputs.mean),
            g.shape(inputs.log_var),
            vae.latent_dim()
        )));
    }
    let z = g.reparameterize(inputs.mean, inputs.log_var, inputs.noise)?;
    let logits = vae.decode_graph(g, store, z)?;
    let nll = g.bernoulli_nll(logits, inputs.targets)?;
    let nll = g.scale(nll, 1.0 / panels as f64);
    let kl_elems = kl_graph(g, inputs.mean, inputs.log_var)?;
    let kl = g.sum(kl_elems);
    let kl = g.scale(kl, 1.0 / panels as f64);
    let tc = match inputs.tc {
        TcSource::Discriminator(disc, dstore) => disc.tc_graph(g, dstore, z)?,
        TcSource::MinibatchAnalytic => tc_analytic_graph(g, z, inputs.mean, inputs.log_var)?,
    };
    let a = g.scale(kl, inputs.lambda1);
    let b = g.scale(tc, inputs.lambda2);
    let reg = g.add(a, b)?;
    let total = g.add(nll, reg)?;
    Ok(LossNodes {
        nll,
        kl,
        kl_elems,
        tc,
        total,
        z,
    })
}

impl LossNodes {
    pub fn terms(&self, g: &Graph<f32>, lambda1: f64, lambda2: f64) -> LossTerms {
        let (rows, d) = g.value(self.kl_elems).dims2();
        let kv = g.value(self.kl_elems).data();
        let kl_per_dim = (0..d)
            .map(|k| (0..rows).map(|r| kv[r * d + k] as f64).sum::<f64>() / rows as f64)
            .collect();
        LossTerms {
            recon: -(g.value(self.nll).item() as f64),
            kl_per_dim,
            kl: g.value(self.kl).item() as f64,
            tc: g.value(self.tc).item() as f64,
            total: g.value(self.total).item() as f64,
            lambda1,
            lambda2,
        }
    }
}

/// Standard normal draws as `f32`.
pub fn standard_normal(n: usize, rng: &mut RngStream) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}
