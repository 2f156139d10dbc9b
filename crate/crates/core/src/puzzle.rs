//! Raven-style matrix generation with constant-in-a-row rules.
//!
//! A puzzle is a 3x3 grid of factor assignments whose rule factors are
//! constant within every row (with distinct values across rows) while every
//! other factor is resampled per cell and never constant in both of the first
//! two rows. The last cell is hidden among five hard negatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::{self, RngStream};
use crate::space::{FactorAssignment, FactorSpace};

pub const GRID: usize = 3;
pub const NUM_CHOICES: usize = 6;
/// Cap on rejection-sampling rounds before a configuration is declared unsatisfiable.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    ConstantInRow,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Structure {
    /// `(relation, factor index)`, sorted by factor index.
    pub pairs: Vec<(Relation, usize)>,
}

impl Structure {
    pub fn constant_in_row(factors: &[usize]) -> Self {
        let mut pairs: Vec<_> = factors.iter().map(|&k| (Relation::ConstantInRow, k)).collect();
        pairs.sort_by_key(|p| p.1);
        Self { pairs }
    }

    pub fn factors(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.1)
    }

    pub fn contains(&self, factor: usize) -> bool {
        self.pairs.iter().any(|p| p.1 == factor)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn check(&self, space: &FactorSpace) -> std::result::Result<(), String> {
        let k = space.num_factors();
        if self.pairs.is_empty() || self.pairs.len() > k {
            return Err(format!("structure has {} rules for {} factors", self.pairs.len(), k));
        }
        let mut seen = vec![false; k];
        for &(_, f) in &self.pairs {
            if f >= k {
                return Err(format!("rule factor {f} out of range"));
            }
            if std::mem::replace(&mut seen[f], true) {
                return Err(format!("rule factor {f} repeated"));
            }
        }
        Ok(())
    }
}

/// Where a puzzle's randomness came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub stream_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpmInstance {
    pub structure: Structure,
    /// `grid[row][col]`; cell `[2][2]` is the answer and is withheld from solvers.
    pub grid: Vec<Vec<FactorAssignment>>,
    pub choices: Vec<FactorAssignment>,
    pub answer_index: usize,
    pub provenance: Provenance,
}

impl RpmInstance {
    /// The eight visible context panels in row-major order.
    pub fn context(&self) -> Vec<&FactorAssignment> {
        self.grid.iter().flatten().take(GRID * GRID - 1).collect()
    }

    pub fn answer(&self) -> &FactorAssignment {
        &self.grid[GRID - 1][GRID - 1]
    }
}

fn row_constant(row: &[&FactorAssignment], factor: usize) -> bool {
    row.iter().all(|a| a[factor] == row[0][factor])
}

/// True if `candidate` completes row 3 keeping every factor in `factors` constant.
pub fn completes_row(grid: &[Vec<FactorAssignment>], candidate: &FactorAssignment, factors: &[usize]) -> bool {
    let row = [&grid[2][0], &grid[2][1], candidate];
    factors.iter().all(|&k| row_constant(&row, k))
}

pub fn sample_structure(space: &FactorSpace, l: usize, rng: &mut RngStream) -> Result<Structure> {
    let k = space.num_factors();
    if l == 0 || l > k {
        return Err(Error::InvalidArgument(format!(
            "rule count {l} must be in 1..={k}"
        )));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    // partial Fisher-Yates: first l entries are a uniform l-subset
    for i in 0..l {
        let j = rng.random_range(i..k);
        idx.swap(i, j);
    }
    Ok(Structure::constant_in_row(&idx[..l]))
}

pub fn generate_matrix(
    space: &FactorSpace,
    structure: &Structure,
    rng: &mut RngStream,
) -> Result<Vec<Vec<FactorAssignment>>> {
    structure.check(space).map_err(Error::Generation)?;
    let cards = space.cardinalities();
    let k = cards.len();
    let mut cells = vec![vec![0usize; k]; GRID * GRID];
    for f in 0..k {
        if structure.contains(f) {
            if cards[f] < GRID {
                return Err(Error::Generation(format!(
                    "rule factor `{}` has {} values; {} distinct row values are required",
                    space.factors()[f].name,
                    cards[f],
                    GRID
                )));
            }
            let mut vals: Vec<usize> = (0..cards[f]).collect();
            for i in 0..GRID {
                let j = rng.random_range(i..cards[f]);
                vals.swap(i, j);
            }
            for (c, cell) in cells.iter_mut().enumerate() {
                cell[f] = vals[c / GRID];
            }
        } else {
            let mut rounds = 0;
            loop {
                for cell in cells.iter_mut() {
                    cell[f] = rng.random_range(0..cards[f]);
                }
                let const_row = |r: usize| (1..GRID).all(|c| cells[r * GRID + c][f] == cells[r * GRID][f]);
                if !(const_row(0) && const_row(1)) {
                    break;
                }
                rounds += 1;
                if rounds >= MAX_REJECTIONS {
                    return Err(Error::Generation(format!(
                        "distractor constraint for `{}` unsatisfied after {MAX_REJECTIONS} rounds",
                        space.factors()[f].name
                    )));
                }
            }
        }
    }
    Ok(cells
        .chunks(GRID)
        .map(|row| row.iter().cloned().map(FactorAssignment::new).collect())
        .collect())
}

/// Builds five hard negatives from the answer and inserts the answer at a
/// uniformly random position.
pub fn generate_choices(
    space: &FactorSpace,
    grid: &[Vec<FactorAssignment>],
    structure: &Structure,
    rng: &mut RngStream,
) -> Result<(Vec<FactorAssignment>, usize)> {
    let answer = grid[GRID - 1][GRID - 1].clone();
    let rule: Vec<usize> = structure.factors().collect();
    let cards = space.cardinalities();
    let mut negatives: Vec<FactorAssignment> = Vec::with_capacity(NUM_CHOICES - 1);
    let mut attempts = 0;
    while negatives.len() < NUM_CHOICES - 1 {
        let mut cand = answer.clone();
        loop {
            let f = rng.random_range(0..cards.len());
            cand.values[f] = rng.random_range(0..cards[f]);
            attempts += 1;
            if !completes_row(grid, &cand, &rule) && !negatives.contains(&cand) {
                break;
            }
            if attempts >= MAX_REJECTIONS * NUM_CHOICES {
                return Err(Error::Generation(format!(
                    "only {} distinct negatives found after {attempts} resamples",
                    negatives.len()
                )));
            }
        }
        negatives.push(cand);
    }
    let answer_index = rng.random_range(0..NUM_CHOICES);
    let mut choices = negatives;
    choices.insert(answer_index, answer);
    Ok((choices, answer_index))
}

/// One full puzzle from a dedicated stream.
pub fn generate_puzzle(space: &FactorSpace, l: usize, mut rng: RngStream) -> Result<RpmInstance> {
    let provenance = Provenance {
        master_seed: rng.master_seed(),
        stream_id: rng.stream_id(),
    };
    let structure = sample_structure(space, l, &mut rng)?;
    let grid = generate_matrix(space, &structure, &mut rng)?;
    let (choices, answer_index) = generate_choices(space, &grid, &structure, &mut rng)?;
    Ok(RpmInstance {
        structure,
        grid,
        choices,
        answer_index,
        provenance,
    })
}

/// Puzzles `start..start + count` of the family `(master_seed, family)`.
/// Puzzle `i` always comes from the same sub-stream, so any slice of the
/// family can be regenerated independently.
pub fn generate_batch(
    space: &FactorSpace,
    l: usize,
    master_seed: u64,
    family: u64,
    start: u64,
    count: usize,
    exec: Exec,
) -> Result<Vec<RpmInstance>> {
    let base = RngStream::new(master_seed, family);
    par::try_map_indexed(exec, count, |i| {
        generate_puzzle(space, l, base.substream(start + i as u64))
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub violation: Option<String>,
}

impl ValidityReport {
    fn fail(msg: impl Into<String>) -> Self {
        Self {
            valid: false,
            violation: Some(msg.into()),
        }
    }
}

/// Checks every puzzle invariant, reporting the first violated clause.
pub fn validate_puzzle(space: &FactorSpace, p: &RpmInstance) -> ValidityReport {
    match check_puzzle(space, p) {
        Ok(()) => ValidityReport {
            valid: true,
            violation: None,
        },
        Err(msg) => ValidityReport::fail(msg),
    }
}

fn check_puzzle(space: &FactorSpace, p: &RpmInstance) -> std::result::Result<(), String> {
    if p.grid.len() != GRID || p.grid.iter().any(|r| r.len() != GRID) {
        return Err("grid is not 3x3".into());
    }
    if p.choices.len() != NUM_CHOICES {
        return Err(format!("expected {NUM_CHOICES} choices, got {}", p.choices.len()));
    }
    if p.answer_index >= NUM_CHOICES {
        return Err(format!("answer index {} out of range", p.answer_index));
    }
    for a in p.grid.iter().flatten().chain(&p.choices) {
        space.validate(a).map_err(|e| e.to_string())?;
    }
    p.structure.check(space)?;
    let rule: Vec<usize> = p.structure.factors().collect();
    for r in 0..GRID - 1 {
        let row: Vec<&FactorAssignment> = p.grid[r].iter().collect();
        if let Some(&k) = rule.iter().find(|&&k| !row_constant(&row, k)) {
            return Err(format!("rule not satisfied in row {} (factor {k})", r + 1));
        }
    }
    if !completes_row(&p.grid, &p.choices[p.answer_index], &rule) {
        return Err("rule not satisfied in row 3".into());
    }
    if p.choices[p.answer_index] != p.grid[2][2] {
        return Err("choice at answer index differs from the hidden cell".into());
    }
    for &k in &rule {
        let (a, b, c) = (p.grid[0][0][k], p.grid[1][0][k], p.grid[2][0][k]);
        if a == b || b == c || a == c {
            return Err(format!("rule factor {k} repeats a value across rows"));
        }
    }
    for k in (0..space.num_factors()).filter(|k| !p.structure.contains(*k)) {
        let r0: Vec<&FactorAssignment> = p.grid[0].iter().collect();
        let r1: Vec<&FactorAssignment> = p.grid[1].iter().collect();
        if row_constant(&r0, k) && row_constant(&r1, k) {
            return Err(format!(
                "distractor constraint: non-rule factor {k} constant in rows 1 and 2"
            ));
        }
    }
    for i in 0..NUM_CHOICES {
        for j in i + 1..NUM_CHOICES {
            if p.choices[i] == p.choices[j] {
                return Err(format!("choices {i} and {j} are identical"));
            }
        }
    }
    let consistent = p
        .choices
        .iter()
        .filter(|c| completes_row(&p.grid, c, &rule))
        .count();
    if consistent != 1 {
        return Err(format!("{consistent} choices complete row 3; expected exactly 1"));
    }
    Ok(())
}

/// Shuffles choices with a permutation; used by equivariance tests and tools.
pub fn permute_choices(p: &RpmInstance, perm: &[usize]) -> RpmInstance {
    let mut q = p.clone();
    q.choices = perm.iter().map(|&i| p.choices[i].clone()).collect();
    q.answer_index = perm.iter().position(|&i| i == p.answer_index).unwrap();
    q
}

/// A random permutation of `0..n`.
pub fn random_permutation(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut v, rng);
    v
}
