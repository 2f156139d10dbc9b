//! Finite-difference harness and the op/layer cases it checks.

use rand::Rng;
use rpmlab::autodiff::{
    Activation, Conv2d, ConvTranspose2d, Dense, Graph, Mlp, Mode, NodeId, ParamId, ParamStore, Tensor,
};
use rpmlab::rng::RngStream;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Build<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId + 'a;

/// Max of |analytic - numeric| / max(1, |numeric|) over every parameter entry.
pub fn max_error(store: &mut ParamStore<f64>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + H;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let fp = gp.value(lp).item();
            store.get_mut(id).data_mut()[i] = orig - H;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let fm = gm.value(lm).item();
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn rand_vec(rng: &mut RngStream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn param(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> ParamId {
    let n = shape.iter().product();
    store.add(name, Tensor::from_vec(shape, rand_vec(rng, n, lo, hi)).unwrap()).unwrap()
}

/// Reduces any node to a scalar through fixed random weights.
pub fn project(g: &mut Graph<f64>, x: NodeId, w: &[f64]) -> NodeId {
    let y = g.mul_const(x, w.to_vec()).unwrap();
    g.sum(y)
}

pub fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub struct Case {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub build: Box<Build<'static>>,
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = RngStream::new(seed, 17);
    let mut out = Vec::new();
    let r = dim(&mut rng, 1, 8);
    let c = dim(&mut rng, 1, 8);
    let n = r * c;

    macro_rules! unary {
        ($name:expr, $lo:expr, $hi:expr, $f:expr) => {{
            let mut store = ParamStore::new();
            let x = param(&mut store, "x", &[r, c], &mut rng, $lo, $hi);
            let w = rand_vec(&mut rng, n, -1.0, 1.0);
            out.push(Case {
                name: $name,
                store,
                build: Box::new(move |g, s| {
                    let xn = g.param(s, x);
                    let f: fn(&mut Graph<f64>, NodeId) -> NodeId = $f;
                    let y = f(g, xn);
                    project(g, y, &w)
                }),
            });
        }};
    }
    unary!("relu", -1.0, 1.0, |g, x| g.relu(x));
    unary!("leaky_relu", -1.0, 1.0, |g, x| g.leaky_relu(x, 0.01));
    unary!("sigmoid", -3.0, 3.0, |g, x| g.sigmoid(x));
    unary!("exp", -2.0, 2.0, |g, x| g.exp(x));
    unary!("ln", 0.2, 3.0, |g, x| g.ln(x));
    unary!("sqrt", 0.2, 3.0, |g, x| g.sqrt(x));
    unary!("square", -2.0, 2.0, |g, x| g.square(x));
    unary!("scale", -2.0, 2.0, |g, x| g.scale(x, -1.7));
    unary!("add_scalar", -2.0, 2.0, |g, x| g.add_scalar(x, 0.3));
    unary!("sum_cols", -2.0, 2.0, |g, x| {
        let cols = g.shape(x)[1];
        let s = g.sum_cols(x);
        let ones = g.input(Tensor::full(&[1, cols], 1.0));
        let wide = g.linear(s, ones, None).unwrap();
        g.square(wide)
    });
    unary!("mean", -2.0, 2.0, |g, x| {
        let cols = g.shape(x)[1];
        let sq = g.square(x);
        let m = g.mean(sq);
        let m = g.reshape(m, &[1, 1]).unwrap();
        let ones = g.input(Tensor::full(&[1, cols], 1.0));
        let wide = g.linear(m, ones, None).unwrap();
        let row = g.row_mix(wide, vec![vec![(0, 1.0)]; g.shape(x)[0]]).unwrap();
        g.mul(row, x).unwrap()
    });

    // binary elementwise
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let mut store = ParamStore::new();
        let a = param(&mut store, "a", &[r, c], &mut rng, -2.0, 2.0);
        let b = param(&mut store, "b", &[r, c], &mut rng, -2.0, 2.0);
        let w = rand_vec(&mut rng, n, -1.0, 1.0);
        out.push(Case {
            name,
            store,
            build: Box::new(move |g, s| {
                let (an, bn) = (g.param(s, a), g.param(s, b));
                let y = match which {
                    0 => g.add(an, bn),
                    1 => g.sub(an, bn),
                    _ => g.mul(an, bn),
                }
                .unwrap();
                project(g, y, &w)
            }),
        });
    }

    // linear with and without bias
    {
        let (bn, k, m) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", &[bn, k], &mut rng, -1.0, 1.0);
        let wt = param(&mut store, "w", &[k, m], &mut rng, -1.0, 1.0);
        let b = param(&mut store, "b", &[m], &mut rng, -1.0, 1.0);
        let w = rand_vec(&mut rng, bn * m, -1.0, 1.0);
        out.push(Case {
            name: "linear",
            store,
            build: Box::new(move |g, s| {
                let (xn, wn, bnode) = (g.param(s, x), g.param(s, wt), g.param(s, b));
                let y = g.linear(xn, wn, Some(bnode)).unwrap();
                let y2 = g.linear(xn, wn, None).unwrap();
                let z = g.mul(y, y2).unwrap();
                project(g, z, &w)
            }),
        });
    }

    // dropout with a fixed mask stream
    {
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", &[r, c], &mut rng, -2.0, 2.0);
        let w = rand_vec(&mut rng, n, -1.0, 1.0);
        out.push(Case {
            name: "dropout",
            store,
            build: Box::new(move |g, s| {
                let xn = g.param(s, x);
                let sq = g.square(xn);
                let y = g.dropout(sq, 0.5, Mode::Train, &mut RngStream::new(seed, 99)).unwrap();
                project(g, y, &w)
            }),
        });
    }

    // reparameterize
    {
        let mut store = ParamStore::new();
        let mu = param(&mut store, "mu", &[r, c], &mut rng, -2.0, 2.0);
        let lv = param(&mut store, "lv", &[r, c], &mut rng, -2.0, 2.0);
        let eps = rand_vec(&mut rng, n, -2.0, 2.0);
        let w = rand_vec(&mut rng, n, -1.0, 1.0);
        out.push(Case {
            name: "reparameterize",
            store,
            build: Box::new(move |g, s| {
                let (m, l) = (g.param(s, mu), g.param(s, lv));
                let z = g.reparameterize(m, l, eps.clone()).unwrap();
                project(g, z, &w)
            }),
        });
    }

    // softmax cross-entropy and bernoulli nll
    {
        let mut store = ParamStore::new();
        let x = param(&mut store, "logits", &[r, c + 1], &mut rng, -3.0, 3.0);
        let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c + 1)).collect();
        let targets = rand_vec(&mut rng, r * (c + 1), 0.0, 1.0);
        out.push(Case {
            name: "softmax_ce+bernoulli_nll",
            store,
            build: Box::new(move |g, s| {
                let xn = g.param(s, x);
                let ce = g.softmax_cross_entropy(xn, &labels).unwrap();
                let nll = g.bernoulli_nll(xn, targets.clone()).unwrap();
                let ce3 = g.scale(ce, 3.0);
                g.add(ce3, nll).unwrap()
            }),
        });
    }

    // slicing, concatenation, row mixing
    {
        let mut store = ParamStore::new();
        let cc = c + 1;
        let x = param(&mut store, "x", &[r, cc], &mut rng, -2.0, 2.0);
        let y = param(&mut store, "y", &[r, 2], &mut rng, -2.0, 2.0);
        let start = rng.random_range(0..cc);
        let end = rng.random_range(start + 1..=cc);
        let rows_out = dim(&mut rng, 1, 6);
        let mix: Vec<Vec<(usize, f64)>> = (0..rows_out)
            .map(|_| {
                (0..dim(&mut rng, 1, 3))
                    .map(|_| (rng.random_range(0..r), rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let width = end - start + 2;
        let w = rand_vec(&mut rng, rows_out * width, -1.0, 1.0);
        out.push(Case {
            name: "slice/concat/row_mix",
            store,
            build: Box::new(move |g, s| {
                let (xn, yn) = (g.param(s, x), g.param(s, y));
                let sl = g.slice_cols(xn, start, end).unwrap();
                let sq = g.square(yn);
                let cat = g.concat_cols(&[sl, sq]).unwrap();
                let mixed = g.row_mix(cat, mix.clone()).unwrap();
                project(g, mixed, &w)
            }),
        });
    }

    // pairwise gaussian log density followed by grouped logsumexp
    {
        let b = dim(&mut rng, 2, 6);
        let d = dim(&mut rng, 1, 5);
        let mut store = ParamStore::new();
        let z = param(&mut store, "z", &[b, d], &mut rng, -2.0, 2.0);
        let mu = param(&mut store, "mu", &[b, d], &mut rng, -2.0, 2.0);
        let lv = param(&mut store, "lv", &[b, d], &mut rng, -1.0, 1.0);
        let w = rand_vec(&mut rng, b * d, -1.0, 1.0);
        out.push(Case {
            name: "gaussian_pair_log_density+logsumexp",
            store,
            build: Box::new(move |g, s| {
                let (zn, mn, ln) = (g.param(s, z), g.param(s, mu), g.param(s, lv));
                let dens = g.gaussian_pair_log_density(zn, mn, ln).unwrap();
                let lse = g.logsumexp_groups(dens, b).unwrap();
                project(g, lse, &w)
            }),
        });
    }

    // conv and transposed conv on small random images
    {
        let (bn, ch, oc) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let side = 2 * dim(&mut rng, 2, 4);
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", &[bn, ch, side, side], &mut rng, -1.0, 1.0);
        let conv = Conv2d::new(&mut store, "conv", ch, oc, &mut rng).unwrap();
        let up = ConvTranspose2d::new(&mut store, "up", oc, ch, &mut rng).unwrap();
        for id in [conv.bias, up.bias] {
            let len = store.get(id).len();
            store.get_mut(id).data_mut().copy_from_slice(&rand_vec(&mut rng, len, -0.5, 0.5));
        }
        let w = rand_vec(&mut rng, bn * ch * side * side, -1.0, 1.0);
        out.push(Case {
            name: "conv2d+conv_transpose2d",
            store,
            build: Box::new(move |g, s| {
                let xn = g.param(s, x);
                let h = conv.forward(g, s, xn).unwrap();
                let h = g.sigmoid(h);
                let y = up.forward(g, s, h).unwrap();
                project(g, y, &w)
            }),
        });
    }

    // dense layer and mlp stack
    {
        let (bn, i, hdim, o) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 8), dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", &[bn, i], &mut rng, -1.0, 1.0);
        let dense = Dense::new(&mut store, "dense", i, hdim, &mut rng).unwrap();
        let mlp = Mlp::new(&mut store, "mlp", &[hdim, hdim, o], Activation::LeakyRelu(0.01), &mut rng).unwrap();
        let w = rand_vec(&mut rng, bn * o, -1.0, 1.0);
        out.push(Case {
            name: "dense+mlp",
            store,
            build: Box::new(move |g, s| {
                let xn = g.param(s, x);
                let h = dense.forward(g, s, xn).unwrap();
                let h = g.sigmoid(h);
                let y = mlp.forward(g, s, h).unwrap();
                project(g, y, &w)
            }),
        });
    }

    out
}
