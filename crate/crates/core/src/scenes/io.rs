//! On-disk dataset format.
//!
//! Arrays use a little-endian binary container:
//!
//! | bytes      | field                                   |
//! |------------|-----------------------------------------|
//! | 4          | magic `SSCT`                            |
//! | 2          | format version (`u16`, currently 1)     |
//! | 1          | dtype code: 1 = `u8`, 2 = `f64`         |
//! | 1          | rank `n`                                |
//! | 8 n        | shape, `u64` each                       |
//! | ...        | row-major payload                       |
//! | 4          | CRC-32 of every preceding byte          |
//!
//! A dataset root holds `manifest.json` and one directory per sample under
//! `samples/<id>/` containing `left_image`, `right_image`, `left_depth`,
//! `right_depth` and `labels` containers plus `meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{class_names, generate_scene_with_id, SceneParams, SceneSample, SolidBox};
use crate::camera::{CameraRig, DepthMap, VoxelGridSpec};
use crate::error::{Error, Result};
use crate::losses::VoxelLabels;
use crate::seed::derive_seed;

const TENSOR_MAGIC: &[u8; 4] = b"SSCT";
const TENSOR_VERSION: u16 = 1;
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        buf.push(match self.data {
            TensorData::U8(_) => 1,
            TensorData::F64(_) => 2,
        });
        buf.push(self.shape.len() as u8);
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => buf.extend_from_slice(v),
            TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::load("not a tensor container"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::load("tensor checksum mismatch"));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != TENSOR_VERSION {
            return Err(Error::load(format!("unsupported tensor container version {version}")));
        }
        let (dtype, rank) = (body[6], body[7] as usize);
        let shape_end = 8 + 8 * rank;
        let shape_bytes = body.get(8..shape_end).ok_or_else(|| Error::load("truncated shape"))?;
        let shape: Vec<usize> =
            shape_bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        let n: usize = shape.iter().product();
        let payload = &body[shape_end..];
        let data = match dtype {
            1 if payload.len() == n => TensorData::U8(payload.to_vec()),
            2 if payload.len() == 8 * n => {
                TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 | 2 => return Err(Error::load("payload length does not match shape")),
            other => return Err(Error::load(format!("unknown dtype code {other}"))),
        };
        Ok(StoredTensor { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    fn into_u8(self, shape: &[usize]) -> Result<Vec<u8>> {
        match self.data {
            TensorData::U8(v) if self.shape == shape => Ok(v),
            _ => Err(Error::load(format!("expected u8 tensor {shape:?}"))),
        }
    }

    fn into_f64(self, shape: &[usize]) -> Result<Vec<f64>> {
        match self.data {
            TensorData::F64(v) if self.shape == shape => Ok(v),
            _ => Err(Error::load(format!("expected f64 tensor {shape:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    version: u32,
    sample_id: String,
    n_classes: usize,
    rig: CameraRig,
    grid: VoxelGridSpec,
    solids: Vec<SolidBox>,
}

fn image_tensor(img: &RgbImage) -> StoredTensor {
    StoredTensor { shape: vec![img.height() as usize, img.width() as usize, 3], data: TensorData::U8(img.as_raw().clone()) }
}

fn depth_tensor(d: &DepthMap) -> StoredTensor {
    StoredTensor { shape: vec![d.height, d.width], data: TensorData::F64(d.data.clone()) }
}

/// Write a sample directory atomically: files go to a sibling temporary
/// directory which is then renamed into place.
pub fn write_sample(dir: &Path, sample: &SceneSample) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    image_tensor(&sample.left_image).write(&tmp.join("left_image.ssct"))?;
    image_tensor(&sample.right_image).write(&tmp.join("right_image.ssct"))?;
    depth_tensor(&sample.left_depth).write(&tmp.join("left_depth.ssct"))?;
    depth_tensor(&sample.right_depth).write(&tmp.join("right_depth.ssct"))?;
    StoredTensor { shape: sample.labels.dims().to_vec(), data: TensorData::U8(sample.labels.data().to_vec()) }
        .write(&tmp.join("labels.ssct"))?;
    let meta = SampleMeta {
        version: DATASET_VERSION,
        sample_id: sample.sample_id.clone(),
        n_classes: sample.labels.n_classes(),
        rig: sample.rig.clone(),
        grid: sample.grid.clone(),
        solids: sample.solids.clone(),
    };
    fs::write(tmp.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    let meta: SampleMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)
        .map_err(|e| Error::load(format!("{}: {e}", dir.display())))?;
    if meta.version != DATASET_VERSION {
        return Err(Error::load(format!("unsupported sample version {}", meta.version)));
    }
    let (w, h) = (meta.rig.left.width(), meta.rig.left.height());
    let img = |name: &str| -> Result<RgbImage> {
        let raw = StoredTensor::read(&dir.join(name))?.into_u8(&[h, w, 3])?;
        RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::load("image size"))
    };
    let depth = |name: &str| -> Result<DepthMap> { DepthMap::new(h, w, StoredTensor::read(&dir.join(name))?.into_f64(&[h, w])?) };
    let dims = meta.grid.dims();
    let labels = StoredTensor::read(&dir.join("labels.ssct"))?.into_u8(&dims)?;
    Ok(SceneSample {
        sample_id: meta.sample_id,
        left_image: img("left_image.ssct")?,
        right_image: img("right_image.ssct")?,
        left_depth: depth("left_depth.ssct")?,
        right_depth: depth("right_depth.ssct")?,
        labels: VoxelLabels::new(dims, meta.n_classes, labels)?,
        rig: meta.rig,
        grid: meta.grid,
        solids: meta.solids,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
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
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub params: SceneParams,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> &[String] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Split `total` scenes 4:1:1 into train, val and test.
    pub fn from_total(total: usize) -> Self {
        let val = total / 6;
        let test = total / 6;
        SplitCounts { train: total - val - test, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// A dataset directory with its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Generate every scene (in parallel; per-scene seeds are derived from
    /// the master seed and the scene index) and write the dataset to `root`.
    pub fn generate(root: &Path, seed: u64, counts: SplitCounts, params: &SceneParams) -> Result<Dataset> {
        fs::create_dir_all(root.join("samples"))?;
        let plan: Vec<(Split, usize)> = [(Split::Train, counts.train), (Split::Val, counts.val), (Split::Test, counts.test)]
            .into_iter()
            .flat_map(|(s, n)| std::iter::repeat_n(s, n))
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        let ids: Vec<String> = plan
            .par_iter()
            .map(|&(_, index)| {
                let id = format!("{index:05}");
                let sample = generate_scene_with_id(derive_seed(seed, "scene", index as u64), params, id.clone())?;
                write_sample(&root.join("samples").join(&id), &sample)?;
                Ok(id)
            })
            .collect::<Result<_>>()?;
        let mut splits: BTreeMap<Split, Vec<String>> = Split::ALL.into_iter().map(|s| (s, Vec::new())).collect();
        for ((split, _), id) in plan.into_iter().zip(ids) {
            splits.get_mut(&split).unwrap().push(id);
        }
        let manifest =
            Manifest { version: DATASET_VERSION, seed, params: params.clone(), class_names: class_names(params.n_classes), splits };
        fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::load(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::load(format!("{}: {e}", path.display())))?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::load(format!("unsupported dataset version {}", manifest.version)));
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    pub fn load(&self, id: &str) -> Result<SceneSample> {
        read_sample(&self.sample_dir(id))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SceneSample>> {
        self.manifest.ids(split).iter().map(|id| self.load(id)).collect()
    }

    /// Sample directories present on disk, sorted.
    pub fn sample_dirs_on_disk(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("samples"))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }
}
