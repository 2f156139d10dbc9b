use serde::{Deserialize, Serialize};

use super::config::{EncoderKind, ReconScope, TrainConfig};
use crate::autodiff::{Adam, AdamConfig, Graph, Mode, NodeId, ParamStore, RowMix, Tensor};
use crate::error::{Error, Result};
use crate::inference::{
    augment_active_mask, infer_active_mask, infer_rule_mask, mean_variances, LatentTensor, RollingReference,
    CONTEXT_PANELS, MIN_REFERENCE, PANELS,
};
use crate::oracle::oracle_encode;
use crate::par::{self, Exec};
use crate::puzzle::{generate_batch, RpmInstance, GRID};
use crate::reasoner::{features_graph, Reasoner};
use crate::render::{Image, Renderer};
use crate::rng::{streams, RngStream};
use crate::space::{FactorAssignment, FactorSpace};
use crate::vae::{
    permute_dims, standard_normal, Discriminator, LossInputs, PosteriorGaussian, TcEstimator, TcSource, Vae,
    VaeConfig,
};

/// Joint losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Spaces up to this size have every panel rendered once up front.
pub const CACHE_LIMIT: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warm,
    Joint,
}

/// One training step's scalars. `total = vae_total + reasoner_weight * ce`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
    pub tc: f64,
    pub ce: f64,
    pub acc: f64,
    pub vae_total: f64,
    pub total: f64,
    pub discriminator_loss: Option<f64>,
}

/// Encoder, decoder, reasoner, discriminator and optimizer state.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub space: FactorSpace,
    renderer: Renderer,
    cache: Option<Vec<Image>>,
    pub store: ParamStore<f32>,
    pub disc_store: ParamStore<f32>,
    pub vae: Option<Vae>,
    pub reasoner: Reasoner,
    pub disc: Option<Discriminator>,
    pub(crate) adam: Adam<f32>,
    pub(crate) disc_adam: Adam<f32>,
    pub(crate) reference: RollingReference,
    pub warm_steps_done: u64,
    pub joint_steps_done: u64,
    pub exec: Exec,
}

fn step_rng(seed: u64, family: u64, step: u64) -> RngStream {
    RngStream::new(seed, family).substream(step)
}

const DATA: u64 = 0;
const NOISE: u64 = 1;
const SHUFFLE: u64 = 2;
const DROPOUT: u64 = 3;

impl Model {
    /// Freshly initialised model. All randomness comes from the config seed.
    pub fn new(config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let space = FactorSpace::build(&config.space)?;
        let renderer = Renderer::new(&space)?;
        let init = RngStream::new(config.seed, streams::INIT);
        let dim = config.code_dim(&space);
        let mut store = ParamStore::new();
        let mut disc_store = ParamStore::new();
        let vae = match config.encoder {
            EncoderKind::Learned => Some(Vae::new(
                &mut store,
                VaeConfig {
                    image_size: config.image_size,
                    channels: renderer.channels(),
                    latent_dim: config.latent_dim,
                    architecture: config.architecture,
                },
                &mut init.substream(0),
            )?),
            EncoderKind::Oracle { .. } => None,
        };
        let reasoner = Reasoner::new(&mut store, dim, config.reasoner, &mut init.substream(1))?;
        let disc = match (config.encoder, config.tc_estimator) {
            (EncoderKind::Learned, TcEstimator::Discriminator) => Some(Discriminator::new(
                &mut disc_store,
                dim,
                config.discriminator,
                &mut init.substream(2),
            )?),
            _ => None,
        };
        let cache = (space.total_combinations() <= CACHE_LIMIT && vae.is_some())
            .then(|| {
                par::try_map_indexed(exec, space.total_combinations() as usize, |i| {
                    renderer.render(&space.assignment_at(i as u64)?, config.image_size)
                })
            })
            .transpose()?;
        let adam = Adam::new(config.adam, &store);
        let disc_adam = Adam::new(
            AdamConfig {
                lr: config.discriminator_lr,
                ..config.adam
            },
            &disc_store,
        );
        Ok(Self {
            config,
            space,
            renderer,
            cache,
            store,
            disc_store,
            vae,
            reasoner,
            disc,
            adam,
            disc_adam,
            reference: RollingReference::default(),
            warm_steps_done: 0,
            joint_steps_done: 0,
            exec,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.reasoner.input_width() / GRID
    }

    pub fn image(&self, a: &FactorAssignment) -> Result<Image> {
        match &self.cache {
            Some(c) => Ok(c[self.space.index_of(a)? as usize].clone()),
            None => self.renderer.render(a, self.config.image_size),
        }
    }

    fn images(&self, panels: &[&FactorAssignment]) -> Result<Vec<Image>> {
        par::try_map_indexed(self.exec, panels.len(), |i| self.image(panels[i]))
    }

    /// Posterior for each assignment: the encoder on its rendering, or the
    /// ground-truth code for an oracle model.
    pub fn encode(&self, panels: &[&FactorAssignment]) -> Result<Vec<PosteriorGaussian>> {
        match (&self.vae, self.config.encoder) {
            (Some(vae), _) => vae.encode(&self.store, &self.images(panels)?),
            (None, EncoderKind::Oracle { nuisance }) => {
                panels.iter().map(|a| oracle_encode(&self.space, a, nuisance)).collect()
            }
            (None, EncoderKind::Learned) => Err(Error::InvalidArgument("learned model without a vae".into())),
        }
    }

    /// Encoded posterior means of assignments, for the disentanglement metrics.
    pub fn codes(&self, panels: &[FactorAssignment]) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&FactorAssignment> = panels.iter().collect();
        Ok(self.encode(&refs)?.into_iter().map(|p| p.mean).collect())
    }

    /// Adds the encoder nodes for `panels`: `(mean, log_var, targets)`.
    fn encode_nodes(&self, g: &mut Graph<f32>, panels: &[&FactorAssignment]) -> Result<(NodeId, NodeId, Option<Tensor<f32>>)> {
        match &self.vae {
            Some(vae) => {
                let x = vae.images_to_tensor(&self.images(panels)?)?;
                let xi = g.input(x.clone());
                let (mu, lv) = vae.encode_graph(g, &self.store, xi)?;
                Ok((mu, lv, Some(x)))
            }
            None => {
                let post = self.encode(panels)?;
                let d = self.code_dim();
                let flat = |f: fn(&PosteriorGaussian) -> &Vec<f64>| -> Vec<f32> {
                    post.iter().flat_map(|p| f(p).iter().map(|&v| v as f32)).collect()
                };
                let mu = g.input(Tensor::from_vec(&[post.len(), d], flat(|p| &p.mean))?);
                let lv = g.input(Tensor::from_vec(&[post.len(), d], flat(|p| &p.log_var))?);
                Ok((mu, lv, None))
            }
        }
    }

    fn check_finite(&self, step: u64, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss });
        }
        Ok(())
    }

    /// Discriminator update on detached codes against their dimension-shuffled copy.
    fn discriminator_step(&mut self, z: &Tensor<f32>, rng: &mut RngStream) -> Result<Option<f64>> {
        let Some(disc) = &self.disc else {
            return Ok(None);
        };
        let (rows, dim) = z.dims2();
        let shuffled = permute_dims(z.data(), rows, dim, rng);
        let mut g = Graph::new();
        let joint = g.input(z.clone());
        let perm = g.input(Tensor::from_vec(&[rows, dim], shuffled)?);
        let loss = disc.loss_graph(&mut g, &self.disc_store, joint, perm)?;
        let grads = g.backward(loss)?;
        self.disc_adam.step(&mut self.disc_store, &grads)?;
        Ok(Some(g.value(loss).item() as f64))
    }

    /// One VAE-only step on i.i.d. single panels.
    pub fn warm_step(&mut self) -> Result<StepRecord> {
        let Some(vae) = &self.vae else {
            return Err(Error::InvalidArgument("oracle encoders have no warm start".into()));
        };
        let step = self.warm_steps_done;
        let base = step_rng(self.config.seed, streams::WARM_START, step);
        let mut data = base.substream(DATA);
        let panels: Vec<FactorAssignment> = (0..self.config.warm_batch_size)
            .map(|_| self.space.sample(&mut data))
            .collect();
        let refs: Vec<&FactorAssignment> = panels.iter().collect();
        let mut g = Graph::new();
        let (mu, lv, x) = self.encode_nodes(&mut g, &refs)?;
        let targets = x.map(Tensor::into_data).unwrap_or_default();
        let noise = standard_normal(panels.len() * vae.latent_dim(), &mut base.substream(NOISE));
        let tc = match &self.disc {
            Some(d) => TcSource::Discriminator(d, &self.disc_store),
            None => TcSource::MinibatchAnalytic,
        };
        let nodes = crate::vae::vae_loss_graph(
            &mut g,
            vae,
            &self.store,
            LossInputs {
                mean: mu,
                log_var: lv,
                targets,
                noise,
                lambda1: self.config.lambda1,
                lambda2: self.config.gamma,
                tc,
            },
        )?;
        let terms = nodes.terms(&g, self.config.lambda1, self.config.gamma);
        self.check_finite(step, terms.total)?;
        let grads = g.backward(nodes.total)?;
        self.adam.step(&mut self.store, &grads)?;
        let z = g.value(nodes.z).clone();
        let disc_loss = self.discriminator_step(&z, &mut base.substream(SHUFFLE))?;
        self.warm_steps_done += 1;
        Ok(StepRecord {
            phase: Phase::Warm,
            step,
            recon: terms.recon,
            kl: terms.kl,
            tc: terms.tc,
            ce: 0.0,
            acc: 0.0,
            vae_total: terms.total,
            total: terms.total,
            discriminator_loss: disc_loss,
        })
    }

    /// Active mask from the rolling reference, topped up to at least `rules` bits.
    fn active_mask(&mut self, means: &[Vec<f64>]) -> Result<Vec<bool>> {
        for m in means {
            self.reference.push(m.clone());
        }
        let reference = if self.reference.len() >= MIN_REFERENCE {
            self.reference.means()
        } else {
            means.to_vec()
        };
        let o_kn = infer_active_mask(&reference, self.config.epsilon)?;
        Ok(augment_active_mask(&o_kn, &mean_variances(&reference)?, self.config.rules))
    }

    /// One end-to-end step on a fresh batch of puzzles.
    pub fn joint_step(&mut self) -> Result<StepRecord> {
        let step = self.joint_steps_done;
        let b = self.config.batch_size;
        let puzzles = generate_batch(
            &self.space,
            self.config.rules,
            self.config.seed,
            streams::JOINT,
            step * b as u64,
            b,
            self.exec,
        )?;
        let base = step_rng(self.config.seed, streams::JOINT, step);
        let panels: Vec<&FactorAssignment> = puzzles
            .iter()
            .flat_map(|p| p.context().into_iter().chain(p.choices.iter()))
            .collect();
        let mut g = Graph::new();
        let (mu, lv, x) = self.encode_nodes(&mut g, &panels)?;
        let d = self.code_dim();
        let row_vals = |n: NodeId, r: usize| -> Vec<f64> { g.value(n).row(r).iter().map(|&v| v as f64).collect() };
        let posts: Vec<PosteriorGaussian> = (0..panels.len())
            .map(|r| PosteriorGaussian::new(row_vals(mu, r), row_vals(lv, r)))
            .collect::<Result<_>>()?;
        let means: Vec<Vec<f64>> = posts.iter().map(|p| p.mean.clone()).collect();
        let o_kn = self.active_mask(&means)?;
        let rule_masks: Vec<Vec<bool>> = posts
            .chunks(PANELS)
            .map(|c| {
                let latent = LatentTensor::from_panels(c.to_vec())?;
                Ok(infer_rule_mask(&latent, &o_kn, self.config.rules)?.0)
            })
            .collect::<Result<_>>()?;

        let mut vae_total = None;
        let mut terms = None;
        if let (Some(vae), Some(x)) = (&self.vae, &x) {
            let recon = recon_panels(&puzzles, self.config.recon_scope);
            let n = recon.len();
            let pick: RowMix<f32> = recon.iter().map(|r| vec![(r.panel, 1.0)]).collect();
            let third = 1.0 / GRID as f32;
            let avg: RowMix<f32> = recon
                .iter()
                .map(|r| r.row_members.iter().map(|&m| (m, third)).collect())
                .collect();
            let blend: Vec<f32> = recon
                .iter()
                .flat_map(|r| rule_masks[r.puzzle].iter().map(|&o| o as u8 as f32))
                .collect();
            let keep: Vec<f32> = blend.iter().map(|v| 1.0 - v).collect();
            let mu_pick = g.row_mix(mu, pick.clone())?;
            let mu_avg = g.row_mix(mu, avg)?;
            let lv_pick = g.row_mix(lv, pick)?;
            let a = g.mul_const(mu_pick, keep)?;
            let c = g.mul_const(mu_avg, blend)?;
            let mu_hat = g.add(a, c)?;
            let p = vae.pixels();
            let targets: Vec<f32> = recon
                .iter()
                .flat_map(|r| x.row(r.panel).iter().copied())
                .collect();
            debug_assert_eq!(targets.len(), n * p);
            let tc = match &self.disc {
                Some(disc) => TcSource::Discriminator(disc, &self.disc_store),
                None => TcSource::MinibatchAnalytic,
            };
            let nodes = crate::vae::vae_loss_graph(
                &mut g,
                vae,
                &self.store,
                LossInputs {
                    mean: mu_hat,
                    log_var: lv_pick,
                    targets,
                    noise: standard_normal(n * d, &mut base.substream(NOISE)),
                    lambda1: self.config.lambda1,
                    lambda2: self.config.gamma,
                    tc,
                },
            )?;
            terms = Some(nodes.terms(&g, self.config.lambda1, self.config.gamma));
            vae_total = Some(nodes);
        }

        let features = features_graph(&mut g, mu)?;
        let logits = self.reasoner.score_graph(
            &mut g,
            &self.store,
            features,
            Mode::Train,
            &mut base.substream(DROPOUT),
        )?;
        let answers: Vec<usize> = puzzles.iter().map(|p| p.answer_index).collect();
        let ce = g.softmax_cross_entropy(logits, &answers)?;
        let weighted = g.scale(ce, self.config.reasoner_weight);
        let total = match &vae_total {
            Some(nodes) => g.add(nodes.total, weighted)?,
            None => weighted,
        };
        let total_value = g.value(total).item() as f64;
        self.check_finite(step, total_value)?;
        let grads = g.backward(total)?;
        self.adam.step(&mut self.store, &grads)?;

        let lv_data = g.value(logits);
        let correct = answers
            .iter()
            .enumerate()
            .filter(|&(i, &a)| {
                let row: Vec<f64> = lv_data.row(i).iter().map(|&v| v as f64).collect();
                crate::reasoner::predict(&row) == a
            })
            .count();
        let disc_loss = match &vae_total {
            Some(nodes) => {
                let z = g.value(nodes.z).clone();
                self.discriminator_step(&z, &mut base.substream(SHUFFLE))?
            }
            None => None,
        };
        self.joint_steps_done += 1;
        let t = terms.as_ref();
        Ok(StepRecord {
            phase: Phase::Joint,
            step,
            recon: t.map_or(0.0, |t| t.recon),
            kl: t.map_or(0.0, |t| t.kl),
            tc: t.map_or(0.0, |t| t.tc),
            ce: g.value(ce).item() as f64,
            acc: correct as f64 / b as f64,
            vae_total: t.map_or(0.0, |t| t.total),
            total: total_value,
            discriminator_loss: disc_loss,
        })
    }

    /// Runs the remaining warm-start steps, passing records on the logging
    /// interval to `log`.
    pub fn warm_start(&mut self, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        if self.vae.is_none() {
            return Ok(());
        }
        while self.warm_steps_done < self.config.warm_start_steps {
            let rec = self.warm_step()?;
            if self.logs(rec.step, self.config.warm_start_steps) {
                log(&rec);
            }
        }
        Ok(())
    }

    /// Runs the remaining joint steps.
    pub fn train_joint(&mut self, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        while self.joint_steps_done < self.config.joint_steps {
            let rec = self.joint_step()?;
            if self.logs(rec.step, self.config.joint_steps) {
                log(&rec);
            }
        }
        Ok(())
    }

    fn logs(&self, step: u64, last: u64) -> bool {
        let every = self.config.log_every;
        every > 0 && (step % every == 0 || step + 1 == last)
    }
}

/// A panel reconstructed during joint training, with the panels of its row.
struct ReconPanel {
    puzzle: usize,
    panel: usize,
    row_members: [usize; GRID],
}

fn recon_panels(puzzles: &[RpmInstance], scope: ReconScope) -> Vec<ReconPanel> {
    let mut out = Vec::new();
    for (p, puzzle) in puzzles.iter().enumerate() {
        let o = p * PANELS;
        let answer = o + CONTEXT_PANELS + puzzle.answer_index;
        let row = |r: usize| -> [usize; GRID] {
            if r + 1 < GRID {
                [o + r * GRID, o + r * GRID + 1, o + r * GRID + 2]
            } else {
                [o + r * GRID, o + r * GRID + 1, answer]
            }
        };
        if scope == ReconScope::All {
            for i in 0..CONTEXT_PANELS {
                out.push(ReconPanel {
                    puzzle: p,
                    panel: o + i,
                    row_members: row(i / GRID),
                });
            }
        }
        out.push(ReconPanel {
            puzzle: p,
            panel: answer,
            row_members: row(GRID - 1),
        });
    }
    out
}

/// Warm start then joint training from a fresh model.
pub fn train(config: TrainConfig, exec: Exec, log: &mut dyn FnMut(&StepRecord)) -> Result<Model> {
    let mut model = Model::new(config, exec)?;
    model.warm_start(log)?;
    model.train_joint(log)?;
    Ok(model)
}
