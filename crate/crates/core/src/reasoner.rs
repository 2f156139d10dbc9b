//! Row-dispersion features over candidate-completed rows and the scoring network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dense, Graph, Mode, NodeId, ParamStore, RowMix, Tensor};
use crate::error::{Error, Result};
use crate::inference::{CONTEXT_PANELS, PANELS};
use crate::puzzle::{GRID, NUM_CHOICES};
use crate::rng::RngStream;

/// Rows of candidate meta rows per puzzle: two context rows plus one per choice.
pub const META_ROWS: usize = GRID + NUM_CHOICES - 1;

/// Eight rows of three latent mean vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTensor {
    pub rows: Vec<[Vec<f64>; GRID]>,
}

/// Rows 0 and 1 are the context rows; row `2 + c` is the third row completed by choice `c`.
pub fn build_meta(context: &[Vec<f64>], choices: &[Vec<f64>]) -> Result<MetaTensor> {
    if context.len() != CONTEXT_PANELS || choices.len() != NUM_CHOICES {
        return Err(Error::InvalidArgument(format!(
            "meta tensor needs {CONTEXT_PANELS} context and {NUM_CHOICES} choice codes, got {} and {}",
            context.len(),
            choices.len()
        )));
    }
    let d = context[0].len();
    if context.iter().chain(choices).any(|v| v.len() != d) {
        return Err(Error::InvalidArgument("latent codes differ in dimension".into()));
    }
    let mut rows = vec![
        [context[0].clone(), context[1].clone(), context[2].clone()],
        [context[3].clone(), context[4].clone(), context[5].clone()],
    ];
    for c in choices {
        rows.push([context[6].clone(), context[7].clone(), c.clone()]);
    }
    Ok(MetaTensor { rows })
}

/// Population standard deviation of each dimension over the panels of a row.
/// Exactly zero wherever the row is constant.
pub fn row_std(row: &[Vec<f64>]) -> Vec<f64> {
    let n = row.len() as f64;
    let base = &row[0];
    (0..base.len())
        .map(|k| {
            let shift = row.iter().map(|v| v[k] - base[k]).sum::<f64>() / n;
            let var = row.iter().map(|v| (v[k] - base[k] - shift).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect()
}

impl MetaTensor {
    pub fn row_stds(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| row_std(r)).collect()
    }

    /// Per candidate: `[std(row0), std(row1), std(row of candidate)]` concatenated.
    pub fn candidate_features(&self) -> Vec<Vec<f64>> {
        let s = self.row_stds();
        (0..NUM_CHOICES)
            .map(|c| [s[0].as_slice(), s[1].as_slice(), s[2 + c].as_slice()].concat())
            .collect()
    }
}

/// Candidate features inside a graph. `means` holds 14 panel codes per puzzle
/// (8 context then 6 choices); the result has one row per (puzzle, candidate).
pub fn features_graph(g: &mut Graph<f32>, means: NodeId) -> Result<NodeId> {
    let (rows, _) = g.value(means).dims2();
    if rows % PANELS != 0 {
        return Err(Error::InvalidArgument(format!(
            "{rows} panel codes is not a whole number of puzzles"
        )));
    }
    let puzzles = rows / PANELS;
    let mut triples = Vec::with_capacity(puzzles * META_ROWS);
    for p in 0..puzzles {
        let o = p * PANELS;
        triples.push([o, o + 1, o + 2]);
        triples.push([o + 3, o + 4, o + 5]);
        for c in 0..NUM_CHOICES {
            triples.push([o + 6, o + 7, o + CONTEXT_PANELS + c]);
        }
    }
    // Offsets from the first panel, so constant rows give exact zeros.
    let diffs: RowMix<f32> = triples
        .iter()
        .flat_map(|t| [vec![(t[1], 1.0), (t[0], -1.0)], vec![(t[2], 1.0), (t[0], -1.0)]])
        .collect();
    let diffs = g.row_mix(means, diffs)?;
    let third = 1.0f32 / 3.0;
    let devs: RowMix<f32> = (0..triples.len())
        .flat_map(|r| {
            let (a, b) = (2 * r, 2 * r + 1);
            [
                vec![(a, -third), (b, -third)],
                vec![(a, 1.0 - third), (b, -third)],
                vec![(a, -third), (b, 1.0 - third)],
            ]
        })
        .collect();
    let devs = g.row_mix(diffs, devs)?;
    let sq = g.square(devs);
    let var: RowMix<f32> = (0..triples.len())
        .map(|r| (0..GRID).map(|j| (r * GRID + j, third)).collect())
        .collect();
    let var = g.row_mix(sq, var)?;
    let std = g.sqrt(var);
    let pick = |slot: &dyn Fn(usize, usize) -> usize| -> RowMix<f32> {
        (0..puzzles)
            .flat_map(|p| (0..NUM_CHOICES).map(move |c| (p, c)))
            .map(|(p, c)| vec![(p * META_ROWS + slot(p, c), 1.0)])
            .collect()
    };
    let r0 = g.row_mix(std, pick(&|_, _| 0))?;
    let r1 = g.row_mix(std, pick(&|_, _| 1))?;
    let rc = g.row_mix(std, pick(&|_, c| 2 + c))?;
    g.concat_cols(&[r0, r1, rc])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self { hidden: 512, dropout: 0.5 }
    }
}

/// Scores each candidate row from its dispersion features with shared weights.
#[derive(Clone, Debug)]
pub struct Reasoner {
    pub config: ReasonerConfig,
    layers: [Dense; 3],
    width: usize,
}

impl Reasoner {
    pub fn new(store: &mut ParamStore<f32>, latent_dim: usize, config: ReasonerConfig, rng: &mut RngStream) -> Result<Self> {
        let width = GRID * latent_dim;
        let h = config.hidden;
        Ok(Self {
            config,
            layers: [
                Dense::new(store, "reasoner.0", width, h, rng)?,
                Dense::new(store, "reasoner.1", h, h, rng)?,
                Dense::new(store, "reasoner.2", h, 1, rng)?,
            ],
            width,
        })
    }

    pub fn input_width(&self) -> usize {
        self.width
    }

    pub fn zero_output(&self, store: &mut ParamStore<f32>) {
        store.get_mut(self.layers[2].weight).data_mut().fill(0.0);
        store.get_mut(self.layers[2].bias).data_mut().fill(0.0);
    }

    /// `features [n * 6, width] -> logits [n, 6]`.
    pub fn score_graph(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore<f32>,
        features: NodeId,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        let (rows, w) = g.value(features).dims2();
        if w != self.width || rows % NUM_CHOICES != 0 {
            return Err(Error::InvalidArgument(format!(
                "reasoner expects rows of width {} in groups of {NUM_CHOICES}, got [{rows}, {w}]",
                self.width
            )));
        }
        let mut h = self.layers[0].forward(g, store, features)?;
        h = g.relu(h);
        h = self.layers[1].forward(g, store, h)?;
        h = g.relu(h);
        h = g.dropout(h, self.config.dropout, mode, rng)?;
        let out = self.layers[2].forward(g, store, h)?;
        g.reshape(out, &[rows / NUM_CHOICES, NUM_CHOICES])
    }

    /// Evaluation-mode logits for one puzzle's candidate features.
    pub fn score(&self, store: &ParamStore<f32>, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if features.len() != NUM_CHOICES {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_CHOICES} candidate feature rows, got {}",
                features.len()
            )));
        }
        let data: Vec<f32> = features.iter().flatten().map(|&v| v as f32).collect();
        let width = features[0].len();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[NUM_CHOICES, width], data)?);
        let out = self.score_graph(&mut g, store, x, Mode::Eval, &mut RngStream::new(0, 0))?;
        Ok(g.value(out).data().iter().map(|&v| v as f64).collect())
    }
}

/// Index of the highest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(logits)[answer]`.
pub fn reasoner_loss(logits: &[f64], answer: usize) -> Result<f64> {
    if answer >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: answer as u64,
            total: logits.len() as u64,
        });
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[answer])
}
