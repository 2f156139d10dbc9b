//! On-disk puzzle datasets: a manifest plus one JSON record per puzzle.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::puzzle::{generate_batch, Provenance, RpmInstance, Structure, GRID};
use crate::render::Renderer;
use crate::rng::streams;
use crate::space::{FactorAssignment, FactorSpace, SpaceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub space: SpaceConfig,
    pub count: usize,
    pub master_seed: u64,
    pub l: usize,
}

/// Public view of a puzzle: the last grid cell is `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuzzleRecord {
    pub grid: Vec<Option<FactorAssignment>>,
    pub choices: Vec<FactorAssignment>,
    pub answer_index: usize,
    pub structure: Structure,
    pub provenance: Provenance,
}

impl From<&RpmInstance> for PuzzleRecord {
    fn from(p: &RpmInstance) -> Self {
        let mut grid: Vec<Option<FactorAssignment>> = p.grid.iter().flatten().cloned().map(Some).collect();
        grid[GRID * GRID - 1] = None;
        Self {
            grid,
            choices: p.choices.clone(),
            answer_index: p.answer_index,
            structure: p.structure.clone(),
            provenance: p.provenance.clone(),
        }
    }
}

impl PuzzleRecord {
    /// Restores the full instance, filling the withheld cell from the answer choice.
    pub fn into_instance(self) -> Result<RpmInstance> {
        if self.grid.len() != GRID * GRID || self.answer_index >= self.choices.len() {
            return Err(Error::InvalidArgument("malformed puzzle record".into()));
        }
        let answer = self.choices[self.answer_index].clone();
        let cells: Vec<FactorAssignment> = self
            .grid
            .into_iter()
            .enumerate()
            .map(|(i, c)| match c {
                Some(a) => Ok(a),
                None if i == GRID * GRID - 1 => Ok(answer.clone()),
                None => Err(Error::InvalidArgument(format!("grid cell {i} is missing"))),
            })
            .collect::<Result<_>>()?;
        Ok(RpmInstance {
            structure: self.structure,
            grid: cells.chunks(GRID).map(|r| r.to_vec()).collect(),
            choices: self.choices,
            answer_index: self.answer_index,
            provenance: self.provenance,
        })
    }
}

fn record_name(i: usize) -> String {
    format!("puzzle_{i:05}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates and writes `count` puzzles. With `render`, each puzzle also gets a
/// directory of panel images at that size.
pub fn write_dataset(
    dir: &Path,
    space_config: &SpaceConfig,
    count: usize,
    master_seed: u64,
    l: usize,
    render: Option<usize>,
    exec: Exec,
) -> Result<Manifest> {
    let space = FactorSpace::build(space_config)?;
    let renderer = render.map(|_| Renderer::new(&space)).transpose()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let puzzles = generate_batch(&space, l, master_seed, streams::PUZZLES, 0, count, exec)?;
    par::try_map_indexed(exec, count, |i| {
        let p = &puzzles[i];
        write_json(&dir.join(format!("{}.json", record_name(i))), &PuzzleRecord::from(p))?;
        if let (Some(size), Some(r)) = (render, renderer.as_ref()) {
            let panel_dir = dir.join(record_name(i));
            fs::create_dir_all(&panel_dir).map_err(|e| Error::io(&panel_dir, e))?;
            for (idx, a) in p.context().into_iter().enumerate() {
                let path = panel_dir.join(format!("p{}{}.ppm", idx / GRID + 1, idx % GRID + 1));
                r.render(a, size)?.write_pnm(&path)?;
            }
            for (k, a) in p.choices.iter().enumerate() {
                r.render(a, size)?.write_pnm(&panel_dir.join(format!("c{k}.ppm")))?;
            }
        }
        Ok::<_, Error>(())
    })?;
    let manifest = Manifest {
        space: space_config.clone(),
        count,
        master_seed,
        l,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<RpmInstance>)> {
    let manifest = read_manifest(dir)?;
    let puzzles = (0..manifest.count)
        .map(|i| {
            let path: PathBuf = dir.join(format!("{}.json", record_name(i)));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str::<PuzzleRecord>(&text)?.into_instance()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, puzzles))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_render() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SpaceConfig::preset("toy2");
        let m = write_dataset(dir.path(), &cfg, 5, 7, 1, Some(16), Exec::Sequential).unwrap();
        assert_eq!(m.count, 5);
        let (m2, puzzles) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        let space = FactorSpace::build(&cfg).unwrap();
        let again = generate_batch(&space, 1, 7, streams::PUZZLES, 0, 5, Exec::Sequential).unwrap();
        assert_eq!(puzzles, again);
        let text = fs::read_to_string(dir.path().join("puzzle_00000.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["grid"][8].is_null());
        assert!(dir.path().join("puzzle_00004/p32.ppm").exists());
        assert!(dir.path().join("puzzle_00004/c5.ppm").exists());
        assert!(!dir.path().join("puzzle_00004/p33.ppm").exists());
    }
}
