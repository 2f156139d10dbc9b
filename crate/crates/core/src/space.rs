//! Quantized ground-truth factor spaces.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Categorical,
    Ordinal,
}

/// Which visual property a factor drives in the renderer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderRole {
    Shape,
    Size,
    PosX,
    PosY,
    ObjectColor,
    BackgroundColor,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorDef {
    pub name: String,
    pub cardinality: usize,
    pub kind: FactorKind,
    pub render_role: RenderRole,
}

impl FactorDef {
    pub fn new(name: &str, cardinality: usize, kind: FactorKind, render_role: RenderRole) -> Self {
        Self {
            name: name.to_string(),
            cardinality,
            kind,
            render_role,
        }
    }
}

/// Space configuration as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceConfig {
    Preset { preset: String },
    Explicit { factors: Vec<FactorDef> },
}

impl SpaceConfig {
    pub fn preset(name: &str) -> Self {
        SpaceConfig::Preset {
            preset: name.to_string(),
        }
    }
}

pub const PRESETS: [&str; 5] = [
    "dsprites-like",
    "mod-dsprites-like",
    "shapes3d-like",
    "toy2",
    "toy3",
];

/// An immutable, validated grid of quantized factors.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorSpace {
    factors: Vec<FactorDef>,
    total: u64,
}

/// One point of a [`FactorSpace`]: an index per factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactorAssignment {
    pub values: Vec<usize>,
}

impl FactorAssignment {
    pub fn new(values: Vec<usize>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl std::ops::Index<usize> for FactorAssignment {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.values[i]
    }
}

fn ordinal(name: &str, n: usize, role: RenderRole) -> FactorDef {
    FactorDef::new(name, n, FactorKind::Ordinal, role)
}

fn categorical(name: &str, n: usize, role: RenderRole) -> FactorDef {
    FactorDef::new(name, n, FactorKind::Categorical, role)
}

fn preset_factors(name: &str) -> Option<Vec<FactorDef>> {
    use RenderRole::*;
    let factors = match name {
        "dsprites-like" => vec![
            categorical("shape", 3, Shape),
            ordinal("size", 3, Size),
            ordinal("pos_x", 4, PosX),
            ordinal("pos_y", 4, PosY),
        ],
        "mod-dsprites-like" => vec![
            categorical("shape", 3, Shape),
            ordinal("size", 3, Size),
            ordinal("pos_x", 4, PosX),
            ordinal("pos_y", 4, PosY),
            categorical("object_color", 6, ObjectColor),
            categorical("background_color", 5, BackgroundColor),
        ],
        // Floor and wall hue share the background role in 2-D; the wall hue
        // and orientation are carried as invisible factors.
        "shapes3d-like" => vec![
            categorical("floor_hue", 10, BackgroundColor),
            categorical("wall_hue", 10, None),
            categorical("object_hue", 10, ObjectColor),
            ordinal("scale", 4, Size),
            categorical("shape", 4, Shape),
            ordinal("orientation", 4, None),
        ],
        "toy2" => vec![
            ordinal("size", 3, Size),
            categorical("object_color", 6, ObjectColor),
        ],
        "toy3" => vec![
            categorical("shape", 3, Shape),
            ordinal("size", 3, Size),
            categorical("object_color", 4, ObjectColor),
        ],
        _ => return Option::None,
    };
    Some(factors)
}

impl FactorSpace {
    /// Builds and validates a space from a preset name or explicit factor list.
    pub fn build(config: &SpaceConfig) -> Result<Self> {
        match config {
            SpaceConfig::Preset { preset } => {
                let factors =
                    preset_factors(preset).ok_or_else(|| Error::UnknownPreset(preset.clone()))?;
                Self::from_factors(factors)
            }
            SpaceConfig::Explicit { factors } => Self::from_factors(factors.clone()),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::build(&SpaceConfig::preset(name))
    }

    pub fn from_factors(factors: Vec<FactorDef>) -> Result<Self> {
        if factors.len() < 2 {
            return Err(Error::InvalidSpace(format!(
                "need at least 2 factors, got {}",
                factors.len()
            )));
        }
        let mut names = HashSet::new();
        let mut total: u64 = 1;
        for f in &factors {
            if f.cardinality < 2 {
                return Err(Error::InvalidSpace(format!(
                    "factor `{}` has cardinality {} (< 2)",
                    f.name, f.cardinality
                )));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate factor name `{}`", f.name)));
            }
            total = total.checked_mul(f.cardinality as u64).ok_or_else(|| {
                Error::InvalidSpace("number of combinations overflows u64".into())
            })?;
        }
        Ok(Self { factors, total })
    }

    pub fn factors(&self) -> &[FactorDef] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cardinality).collect()
    }

    pub fn total_combinations(&self) -> u64 {
        self.total
    }

    /// Index of the first factor with the given render role.
    pub fn factor_with_role(&self, role: RenderRole) -> Option<usize> {
        self.factors.iter().position(|f| f.render_role == role)
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn validate(&self, a: &FactorAssignment) -> Result<()> {
        if a.len() != self.factors.len() {
            return Err(Error::InvalidAssignment(format!(
                "expected {} values, got {}",
                self.factors.len(),
                a.len()
            )));
        }
        for (f, &v) in self.factors.iter().zip(&a.values) {
            if v >= f.cardinality {
                return Err(Error::InvalidAssignment(format!(
                    "factor `{}` value {} >= cardinality {}",
                    f.name, v, f.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Uniform draw over the grid.
    pub fn sample(&self, rng: &mut RngStream) -> FactorAssignment {
        FactorAssignment::new(
            self.factors
                .iter()
                .map(|f| rng.random_range(0..f.cardinality))
                .collect(),
        )
    }

    /// Row-major (last factor fastest) index of an assignment.
    pub fn index_of(&self, a: &FactorAssignment) -> Result<u64> {
        self.validate(a)?;
        Ok(self
            .factors
            .iter()
            .zip(&a.values)
            .fold(0u64, |acc, (f, &v)| acc * f.cardinality as u64 + v as u64))
    }

    pub fn assignment_at(&self, index: u64) -> Result<FactorAssignment> {
        if index >= self.total {
            return Err(Error::IndexOutOfRange {
                index,
                total: self.total,
            });
        }
        let mut rest = index;
        let mut values = vec![0; self.factors.len()];
        for (slot, f) in values.iter_mut().zip(&self.factors).rev() {
            let c = f.cardinality as u64;
            *slot = (rest % c) as usize;
            rest /= c;
        }
        Ok(FactorAssignment::new(values))
    }

    /// All assignments in index order.
    pub fn enumerate(&self) -> impl Iterator<Item = FactorAssignment> + '_ {
        (0..self.total).map(move |i| self.assignment_at(i).expect("index in range"))
    }
}

/// Convenience wrapper matching the operation names used across the crate.
pub fn sample_assignment(space: &FactorSpace, rng: &mut RngStream) -> FactorAssignment {
    space.sample(rng)
}

pub fn assignment_index(space: &FactorSpace, a: &FactorAssignment) -> Result<u64> {
    space.index_of(a)
}

pub fn index_to_assignment(space: &FactorSpace, index: u64) -> Result<FactorAssignment> {
    space.assignment_at(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_cardinalities() {
        let d = FactorSpace::preset("dsprites-like").unwrap();
        assert_eq!(d.cardinalities(), vec![3, 3, 4, 4]);
        assert_eq!(d.total_combinations(), 144);
        let t = FactorSpace::preset("toy2").unwrap();
        assert_eq!(t.cardinalities(), vec![3, 6]);
        let m = FactorSpace::preset("mod-dsprites-like").unwrap();
        assert_eq!(m.cardinalities(), vec![3, 3, 4, 4, 6, 5]);
        for p in PRESETS {
            assert_eq!(FactorSpace::preset(p).unwrap(), FactorSpace::preset(p).unwrap());
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            FactorSpace::preset("mnist"),
            Err(Error::UnknownPreset(_))
        ));
        let bad = vec![
            FactorDef::new("a", 1, FactorKind::Ordinal, RenderRole::Size),
            FactorDef::new("b", 3, FactorKind::Ordinal, RenderRole::PosX),
        ];
        assert!(matches!(
            FactorSpace::from_factors(bad),
            Err(Error::InvalidSpace(_))
        ));
        let dup = vec![
            FactorDef::new("a", 2, FactorKind::Ordinal, RenderRole::Size),
            FactorDef::new("a", 3, FactorKind::Ordinal, RenderRole::PosX),
        ];
        assert!(FactorSpace::from_factors(dup).is_err());
        let huge = (0..20)
            .map(|i| FactorDef::new(&format!("f{i}"), 1 << 10, FactorKind::Ordinal, RenderRole::None))
            .collect();
        assert!(FactorSpace::from_factors(huge).is_err());
    }

    #[test]
    fn config_json_forms() {
        let p: SpaceConfig = serde_json::from_str(r#"{"preset":"toy2"}"#).unwrap();
        assert_eq!(FactorSpace::build(&p).unwrap().num_factors(), 2);
        let e: SpaceConfig = serde_json::from_str(
            r#"{"factors":[{"name":"size","cardinality":3,"kind":"ordinal","render_role":"size"},
                           {"name":"hue","cardinality":4,"kind":"categorical","render_role":"object_color"}]}"#,
        )
        .unwrap();
        assert_eq!(FactorSpace::build(&e).unwrap().cardinalities(), vec![3, 4]);
    }

    #[test]
    fn toy2_indexing() {
        let t = FactorSpace::preset("toy2").unwrap();
        assert_eq!(t.index_of(&FactorAssignment::new(vec![0, 0])).unwrap(), 0);
        assert_eq!(t.index_of(&FactorAssignment::new(vec![2, 5])).unwrap(), 17);
        // enumeration oracle: nested loops in row-major order
        let mut i = 0u64;
        for s in 0..3 {
            for c in 0..6 {
                let a = FactorAssignment::new(vec![s, c]);
                assert_eq!(t.index_of(&a).unwrap(), i);
                assert_eq!(t.assignment_at(i).unwrap(), a);
                i += 1;
            }
        }
        assert!(matches!(
            t.assignment_at(18),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let d = FactorSpace::preset("dsprites-like").unwrap();
        let a = d.sample(&mut RngStream::at(42, 1, 8));
        let b = d.sample(&mut RngStream::at(42, 1, 8));
        assert_eq!(a, b);
        let mut rng = RngStream::new(3, 3);
        for _ in 0..1000 {
            let a = d.sample(&mut rng);
            d.validate(&a).unwrap();
        }
    }
}
