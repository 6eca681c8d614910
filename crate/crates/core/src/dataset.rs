//! Train/validation/test splits, cross-validation folds and on-disk datasets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BrainError, Result};
use crate::synthetic::Subject;
use crate::volume::Volume4D;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub fold_index: usize,
    pub repeat: usize,
}

impl DatasetSplit {
    /// The split an id belongs to, if any.
    pub fn role(&self, id: &str) -> Option<&'static str> {
        let has = |v: &Vec<String>| v.iter().any(|x| x == id);
        if has(&self.train) {
            Some("train")
        } else if has(&self.val) {
            Some("val")
        } else if has(&self.test) {
            Some("test")
        } else {
            None
        }
    }
}

/// Shuffled 70/15/15 split with sizes `round(0.7 n)`, `round(0.15 n)` and the rest.
pub fn make_splits(ids: &[String], seed: u64) -> DatasetSplit {
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() as f64;
    let n_train = ((0.7 * n).round() as usize).min(order.len());
    let n_val = ((0.15 * n).round() as usize).min(order.len() - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    DatasetSplit {
        train: order,
        val,
        test,
        fold_index: 0,
        repeat: 0,
    }
}

/// Assigns each id (in the given order) to one of `folds` near-equal folds after a seeded shuffle.
pub fn fold_assignment(ids: &[String], folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold[i] = rank * folds / ids.len().max(1);
    }
    fold
}

/// Repeated k-fold cross-validation. Each fold is the test set once per
/// repeat; `round(0.15 n)` of the remaining ids form the validation set.
pub fn cv_splits(ids: &[String], folds: usize, repeats: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    if folds < 2 || folds > ids.len() {
        return Err(BrainError::Config(format!(
            "need 2 <= folds <= n_subjects, got folds = {folds} for {} subjects",
            ids.len()
        )));
    }
    if repeats == 0 {
        return Err(BrainError::Config("repeats must be at least 1".into()));
    }
    let n_val = (0.15 * ids.len() as f64).round() as usize;
    let mut out = Vec::with_capacity(folds * repeats);
    for r in 0..repeats {
        let assign = fold_assignment(ids, folds, seed.wrapping_add(r as u64));
        for f in 0..folds {
            let test: Vec<String> = ids
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == f)
                .map(|(id, _)| id.clone())
                .collect();
            let mut rest: Vec<String> = ids
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a != f)
                .map(|(id, _)| id.clone())
                .collect();
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(
                seed ^ ((r as u64) << 32 | f as u64).wrapping_mul(0x9E37_79B9),
            ));
            let train = rest.split_off(n_val.min(rest.len().saturating_sub(1)));
            out.push(DatasetSplit {
                train,
                val: rest,
                test,
                fold_index: f,
                repeat: r,
            });
        }
    }
    Ok(out)
}

/// Label sidecar stored next to each volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub sex: u8,
    pub cognition: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub split: String,
    pub fold: usize,
}

/// Writes volumes, sidecars and `manifest.csv` under `dir`. Returns the manifest path.
pub fn write_dataset(dir: &Path, subjects: &[Subject], split: &DatasetSplit, folds: &[usize]) -> Result<PathBuf> {
    let vol_dir = dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| BrainError::io(&vol_dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| BrainError::parse(&manifest, e.to_string()))?;
    for (s, &fold) in subjects.iter().zip(folds) {
        let rel = format!("volumes/{}.bvol", s.id);
        s.volume.save(&dir.join(&rel))?;
        let side = dir.join(format!("volumes/{}.json", s.id));
        let json = serde_json::to_string_pretty(&Sidecar {
            id: s.id.clone(),
            sex: s.sex,
            cognition: s.cognition,
        })
        .map_err(|e| BrainError::parse(&side, e.to_string()))?;
        std::fs::write(&side, json).map_err(|e| BrainError::io(&side, e))?;
        w.serialize(ManifestRow {
            id: s.id.clone(),
            path: rel,
            split: split.role(&s.id).unwrap_or("unused").to_string(),
            fold,
        })
        .map_err(|e| BrainError::parse(&manifest, e.to_string()))?;
    }
    w.flush().map_err(|e| BrainError::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => BrainError::io(path, io),
        other => BrainError::parse(path, format!("{other:?}")),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| BrainError::parse(path, e.to_string())))
        .collect()
}

/// A dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub subjects: Vec<Subject>,
    pub split: DatasetSplit,
    pub folds: Vec<usize>,
}

/// Loads a dataset written by [`write_dataset`], given its directory or manifest path.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let manifest = if path.is_dir() {
        path.join("manifest.csv")
    } else {
        path.to_path_buf()
    };
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rows = read_manifest(&manifest)?;
    if rows.is_empty() {
        return Err(BrainError::Data(format!("{}: manifest lists no subjects", manifest.display())));
    }
    let mut split = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        fold_index: 0,
        repeat: 0,
    };
    let mut subjects = Vec::with_capacity(rows.len());
    let mut folds = Vec::with_capacity(rows.len());
    for row in rows {
        let vol_path = root.join(&row.path);
        let volume = Volume4D::load(&vol_path)?;
        let side_path = vol_path.with_extension("json");
        let text = std::fs::read_to_string(&side_path).map_err(|e| BrainError::io(&side_path, e))?;
        let side: Sidecar =
            serde_json::from_str(&text).map_err(|e| BrainError::parse(&side_path, e.to_string()))?;
        if side.id != row.id {
            return Err(BrainError::parse(
                &side_path,
                format!("sidecar id '{}' does not match manifest id '{}'", side.id, row.id),
            ));
        }
        match row.split.as_str() {
            "train" => split.train.push(row.id.clone()),
            "val" => split.val.push(row.id.clone()),
            "test" => split.test.push(row.id.clone()),
            _ => {}
        }
        folds.push(row.fold);
        subjects.push(Subject {
            id: row.id,
            volume,
            sex: side.sex,
            cognition: side.cognition,
            cognition_raw: f64::NAN,
        });
    }
    Ok(LoadedDataset {
        subjects,
        split,
        folds,
    })
}
