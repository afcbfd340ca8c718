//! Synthetic dataset: phantoms, their radiograph pairs and slice lists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drr::{render_pair, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::geometry::{make_biplanar_rig, BiplanarRig, DEFAULT_FOCAL, DEFAULT_SOURCE_DIST};
use crate::rawio;
use crate::volume::{generate_phantom, PhantomSpec, Plane, SliceSpec, Volume};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::param(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub vol_dims: [usize; 3],
    pub source_dist: f64,
    pub focal: f64,
    pub drr_res: (usize, usize),
    pub drr_step: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 40,
            n_val: 5,
            n_test: 5,
            vol_dims: [64, 64, 64],
            source_dist: DEFAULT_SOURCE_DIST,
            focal: DEFAULT_FOCAL,
            drr_res: (64, 64),
            drr_step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn rig(&self) -> Result<BiplanarRig> {
        make_biplanar_rig(self.source_dist, self.focal)
    }
}

/// Phantom seed of volume `index` in `split`; distinct for every
/// `(split, index)` pair under one base seed.
pub fn phantom_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((tag << 40) | index as u64)
}

/// One phantom with its files (paths relative to the manifest directory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub split: Split,
    pub id: String,
    pub phantom_seed: u64,
    pub volume_path: PathBuf,
    pub pa_path: PathBuf,
    pub lat_path: PathBuf,
    pub slices: Vec<SliceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub rig: BiplanarRig,
    pub volumes: Vec<VolumeRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VolumeRecord> {
        self.volumes.iter().filter(move |v| v.split == split)
    }

    pub fn slice_count(&self, split: Split) -> usize {
        self.split(split).map(|v| v.slices.len()).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(&path, e))
    }

    /// Reads `manifest.json` from `dir` (or the file itself if `dir` is one).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::file(&file, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every volume of `split` with its radiographs.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<Sample>> {
        self.split(split).map(|r| Sample::load(root, r)).collect()
    }
}

/// Every slice of every plane at native resolution.
pub fn all_slices(vol: &Volume) -> Vec<SliceSpec> {
    let g = vol.geometry();
    Plane::ALL
        .iter()
        .flat_map(|&plane| (0..g.slice_count(plane)).map(move |i| SliceSpec::new(plane, i, g.slice_shape(plane))))
        .collect()
}

/// A volume in memory with its radiograph pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: VolumeRecord,
    pub volume: Volume,
    pub pa: Vec<f32>,
    pub lat: Vec<f32>,
}

impl Sample {
    pub fn load(root: &Path, record: &VolumeRecord) -> Result<Self> {
        let volume = Volume::load(&root.join(&record.volume_path))?;
        let (_, pa) = rawio::read_raw(&root.join(&record.pa_path))?;
        let (_, lat) = rawio::read_raw(&root.join(&record.lat_path))?;
        Ok(Sample {
            record: record.clone(),
            volume,
            pa,
            lat,
        })
    }
}

/// Generates phantoms, renders their radiographs into `dir` and writes the
/// manifest. Output depends only on `cfg`.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(Error::param("every split needs at least one volume"));
    }
    let rig = cfg.rig()?;
    for sub in ["volumes", "drr"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
    }
    let mut volumes = Vec::new();
    for split in Split::ALL {
        for i in 0..cfg.count(split) {
            let id = format!("{}_{i:03}", split.name());
            let seed = phantom_seed(cfg.seed, split, i);
            let vol = generate_phantom(&PhantomSpec::with_seed(seed), cfg.vol_dims)?;
            let (pa, lat) = render_pair(&vol, &rig, cfg.drr_res, cfg.drr_step)?;
            let record = VolumeRecord {
                split,
                id: id.clone(),
                phantom_seed: seed,
                volume_path: PathBuf::from("volumes").join(format!("{id}.raw")),
                pa_path: PathBuf::from("drr").join(format!("{id}_pa.raw")),
                lat_path: PathBuf::from("drr").join(format!("{id}_lat.raw")),
                slices: all_slices(&vol),
            };
            vol.save(&dir.join(&record.volume_path))?;
            pa.save_raw(&dir.join(&record.pa_path))?;
            lat.save_raw(&dir.join(&record.lat_path))?;
            volumes.push(record);
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        rig,
        volumes,
    };
    manifest.save(dir)?;
    Ok(manifest)
}
