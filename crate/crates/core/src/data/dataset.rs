//! On-disk datasets: `<dir>/manifest.tsv` plus `<dir>/samples/<id>_{img,mask}.pgm`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pgm::{read_image, read_mask, write_image, write_mask};
use super::{generate_phantom, Image, PhantomConfig};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const SAMPLES: &str = "samples";
const IMAGE_SUFFIX: &str = "_img.pgm";
const MASK_SUFFIX: &str = "_mask.pgm";
/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::InvalidConfig(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    /// Relative to the dataset directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// One image/mask pair in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

pub fn sample_id(index: usize) -> String {
    format!("phantom_{index:05}")
}

/// Writes `count` phantoms and the manifest. Re-running with the same
/// arguments reproduces the directory byte for byte.
pub fn generate_dataset(dir: &Path, cfg: &PhantomConfig, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    let samples = dir.join(SAMPLES);
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    for index in 0..count {
        let (image, mask) = generate_phantom(cfg, index as u64)?;
        let id = sample_id(index);
        write_image(&samples.join(format!("{id}{IMAGE_SUFFIX}")), &image)?;
        write_mask(&samples.join(format!("{id}{MASK_SUFFIX}")), &mask)?;
    }
    build_manifest(dir, cfg.seed)
}

/// Pairs every `samples/<id>_img.pgm` with its mask, assigns splits from
/// `seed`, and writes `manifest.tsv` sorted by id.
pub fn build_manifest(dir: &Path, seed: u64) -> Result<Dataset> {
    let samples = dir.join(SAMPLES);
    let mut pairs: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    if samples.exists() {
        let listing = fs::read_dir(&samples).map_err(|e| Error::io(&samples, e))?;
        for item in listing {
            let name = item.map_err(|e| Error::io(&samples, e))?.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name.strip_suffix(IMAGE_SUFFIX) {
                pairs.entry(id.to_string()).or_default().0 = true;
            } else if let Some(id) = name.strip_suffix(MASK_SUFFIX) {
                pairs.entry(id.to_string()).or_default().1 = true;
            }
        }
    }
    if let Some((id, _)) = pairs.iter().find(|(_, &(img, mask))| !(img && mask)) {
        return Err(Error::MissingPair(id.clone()));
    }
    let ids: Vec<String> = pairs.into_keys().collect();
    let splits = assign_splits(ids.len(), seed);
    let entries = ids
        .into_iter()
        .zip(splits)
        .map(|(id, split)| Entry {
            image: Path::new(SAMPLES).join(format!("{id}{IMAGE_SUFFIX}")),
            mask: Path::new(SAMPLES).join(format!("{id}{MASK_SUFFIX}")),
            id,
            split,
        })
        .collect();
    let ds = Dataset {
        root: dir.to_path_buf(),
        entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, ds.manifest_text()).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

/// `round(0.8 n)` training samples chosen by a seeded shuffle, indexed in
/// sorted-id order.
fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    splits
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, image, mask, split] = cols[..] else {
                return Err(Error::InvalidConfig(format!("{}:{}: expected 4 tab-separated fields", path.display(), n + 1)));
            };
            entries.push(Entry {
                id: id.to_string(),
                image: image.into(),
                mask: mask.into(),
                split: split.parse()?,
            });
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            entries,
        })
    }

    pub fn manifest_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.image.display(), e.mask.display(), e.split))
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Entry> {
        self.entries
            .iter()
            .filter(|e| split == Split::All || e.split == split)
            .collect()
    }

    pub fn read(&self, entry: &Entry) -> Result<Sample> {
        let image = read_image(&self.root.join(&entry.image))?;
        let mask = read_mask(&self.root.join(&entry.mask))?;
        if (image.height, image.width) != (mask.height(), mask.width()) {
            return Err(Error::shape(
                "sample",
                format!("{}: image {}x{} vs mask {}x{}", entry.id, image.height, image.width, mask.height(), mask.width()),
            ));
        }
        Ok(Sample {
            id: entry.id.clone(),
            image,
            mask,
        })
    }

    /// All samples of `split`, read into memory.
    pub fn read_split(&self, split: Split) -> Result<Vec<Sample>> {
        let entries = self.split(split);
        if entries.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        entries.into_iter().map(|e| self.read(e)).collect()
    }
}

/// Images `[B, 1, H, W]`, targets `[B, H, W]` in `{0, 1}`, and the masks.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub images: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub masks: Vec<Mask>,
    pub ids: Vec<String>,
}

impl SampleBatch {
    pub fn collate(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::EmptySplit("batch".into()))?;
        let (h, w) = (first.image.height, first.image.width);
        let mut images = Vec::with_capacity(samples.len() * h * w);
        let mut targets = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.image.height, s.image.width) != (h, w) {
                return Err(Error::shape("collate", format!("{} is {}x{}, expected {h}x{w}", s.id, s.image.height, s.image.width)));
            }
            images.extend_from_slice(&s.image.data);
            targets.extend(s.mask.data().iter().map(|&v| if v { 1.0f32 } else { 0.0 }));
        }
        let b = samples.len();
        Ok(SampleBatch {
            images: Tensor::from_vec(&[b, 1, h, w], images)?,
            targets: Tensor::from_vec(&[b, h, w], targets)?,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }
}

/// Shuffled visiting order for one pass over `n` samples; a pure function
/// of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Sample indices of batch `iteration` when epochs are concatenated and
/// cut into consecutive batches of `batch` (a batch may straddle epochs).
pub fn batch_indices(n: usize, batch: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let start = iteration * batch;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(n, seed, epoch as u64)));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
    }
    out
}
