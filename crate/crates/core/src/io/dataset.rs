use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_mask_pgm, read_pfm, write_mask_pgm, write_pfm};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sarmodel::{synthesize_scene, SceneConfig};

pub const MANIFEST_FILE: &str = "manifest.csv";

/// What to synthesize. `scene.seed` is ignored: scene `i` (counted across
/// train then test) is seeded with `derive_seed(seed, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train + self.test == 0 {
            return Err(Error::Config("dataset must contain at least one scene".into()));
        }
        self.scene.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// `<split>/scene_NNNNN`.
    pub scene_id: String,
    pub seed: u64,
    pub k_s: f64,
    pub sea_sigma: f64,
    pub contrast_ratio: f64,
    pub spill_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene_id: String,
    pub k_s: f64,
    /// `[1, 1, H, W]` speckled intensity.
    pub intensity: Tensor<f32>,
    /// `[1, 1, H, W]` binary ground truth.
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Vec<ManifestRow>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Side length shared by every scene.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.train.iter().chain(&self.test).next().map(|s| {
            let d = s.intensity.dims();
            (d[2], d[3])
        })
    }
}

fn split_dirs(root: &Path, split: &str) -> (PathBuf, PathBuf) {
    (root.join(split).join("images"), root.join(split).join("masks"))
}

/// Synthesizes every scene, writes images and masks, then the manifest.
/// The manifest is written last through a rename, so its presence marks a
/// complete dataset.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let mut rows = Vec::with_capacity(spec.train + spec.test);
    for (split, range) in [("train", 0..spec.train), ("test", spec.train..spec.train + spec.test)] {
        let (images, masks) = split_dirs(root, split);
        fs::create_dir_all(&images)?;
        fs::create_dir_all(&masks)?;
        for index in range {
            let seed = derive_seed(spec.seed, index as u64);
            let scene = synthesize_scene(&SceneConfig { seed, ..spec.scene.clone() })?;
            let name = format!("scene_{index:05}");
            write_pfm(&images.join(format!("{name}.pfm")), &scene.intensity)?;
            write_mask_pgm(&masks.join(format!("{name}.pgm")), &scene.mask)?;
            rows.push(ManifestRow {
                scene_id: format!("{split}/{name}"),
                seed,
                k_s: spec.scene.k_s,
                sea_sigma: spec.scene.sea_sigma,
                contrast_ratio: spec.scene.contrast_ratio,
                spill_fraction: spec.scene.spill_fraction,
            });
        }
    }
    let tmp = root.join(format!("{MANIFEST_FILE}.partial"));
    let mut w = csv::Writer::from_path(&tmp)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    drop(w);
    fs::rename(&tmp, &manifest_path)?;
    Ok(rows)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::IncompleteDataset {
            path: root.to_path_buf(),
            detail: format!("{MANIFEST_FILE} is missing; synthesis did not finish"),
        });
    }
    let manifest: Vec<ManifestRow> = csv::Reader::from_path(&manifest_path)?
        .deserialize()
        .collect::<Result<_, _>>()?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut dims: Option<Vec<usize>> = None;
    for row in &manifest {
        let (split, name) = row.scene_id.split_once('/').ok_or_else(|| Error::Format {
            kind: "manifest",
            path: manifest_path.clone(),
            detail: format!("scene_id `{}` has no split prefix", row.scene_id),
        })?;
        let target = match split {
            "train" => &mut train,
            "test" => &mut test,
            other => {
                return Err(Error::Format {
                    kind: "manifest",
                    path: manifest_path.clone(),
                    detail: format!("unknown split `{other}`"),
                })
            }
        };
        let (images, masks) = split_dirs(root, split);
        let (img_path, mask_path) = (images.join(format!("{name}.pfm")), masks.join(format!("{name}.pgm")));
        for p in [&img_path, &mask_path] {
            if !p.is_file() {
                return Err(Error::IncompleteDataset {
                    path: root.to_path_buf(),
                    detail: format!("{} listed in the manifest is missing", p.display()),
                });
            }
        }
        let intensity = read_pfm(&img_path)?;
        let mask = read_mask_pgm(&mask_path)?;
        if intensity.dims() != mask.dims() || dims.as_deref().is_some_and(|d| d != intensity.dims()) {
            return Err(Error::Format {
                kind: "dataset",
                path: img_path,
                detail: format!(
                    "image {:?} / mask {:?} disagree with the dataset size {:?}",
                    intensity.dims(),
                    mask.dims(),
                    dims
                ),
            });
        }
        dims = Some(intensity.dims().to_vec());
        target.push(Sample {
            scene_id: row.scene_id.clone(),
            k_s: row.k_s,
            intensity,
            mask,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        train,
        test,
    })
}
