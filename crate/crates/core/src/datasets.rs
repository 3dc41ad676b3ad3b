//! Datasets with in-memory and on-disk caching of the deterministic
//! pipeline prefix.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mvol;
use crate::nifti;
use crate::pipeline::{DataDict, Item, Pipeline};
use crate::rng::Rng;
use crate::volume::MetaVolume;

/// Where one item comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSource {
    /// A single NIfTI (or `.mvol`) file.
    Path(PathBuf),
    /// Named files loaded into a dictionary item.
    Dict(IndexMap<String, PathBuf>),
    /// Generated `{image, label}` pair.
    Synthetic {
        seed: u64,
        dims: Vec<usize>,
        objects: usize,
        noise: f64,
    },
}

fn is_mvol(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "mvol")
}

/// Reads `.mvol` files as MVOL and anything else as NIfTI-1.
pub fn load_volume(path: impl AsRef<Path>) -> Result<MetaVolume> {
    let path = path.as_ref();
    if is_mvol(path) {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        mvol::from_bytes(&bytes)
    } else {
        nifti::load(path)
    }
}

/// Writes by extension, mirroring [`load_volume`]. NIfTI output drops the
/// trace stack and metadata.
pub fn save_volume(v: &MetaVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_mvol(path) {
        fs::write(path, mvol::to_bytes(v)?).map_err(|e| Error::io(path, e))
    } else {
        nifti::save(v, path)
    }
}

impl ItemSource {
    pub fn load(&self) -> Result<Item> {
        Ok(match self {
            ItemSource::Path(p) => Item::Volume(load_volume(p)?),
            ItemSource::Dict(m) => Item::Dict(
                m.iter()
                    .map(|(k, p)| Ok((k.clone(), load_volume(p)?)))
                    .collect::<Result<DataDict>>()?,
            ),
            ItemSource::Synthetic {
                seed,
                dims,
                objects,
                noise,
            } => {
                let (image, label) = nifti::synth_volume(&mut Rng::new(*seed), dims, *objects, *noise)?;
                let mut d = DataDict::new();
                d.insert("image".into(), image);
                d.insert("label".into(), label);
                Item::Dict(d)
            }
        })
    }

    pub fn is_dict(&self) -> bool {
        !matches!(self, ItemSource::Path(_))
    }

    /// Canonical JSON bytes identifying this descriptor.
    pub fn descriptor_bytes(&self) -> Vec<u8> {
        canonical_json(&serde_json::to_value(self).expect("descriptor serialises")).into_bytes()
    }
}

/// Compact JSON with object keys sorted recursively.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sort(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(v).to_string()
}

/// Ordered list of item descriptors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataSource {
    pub items: Vec<ItemSource>,
}

impl DataSource {
    pub fn new(items: Vec<ItemSource>) -> Self {
        DataSource { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Scans `dir` for `.nii` files in name order. `img_X.nii` / `lbl_X.nii`
    /// pairs become `{image, label}` items; other files become single items.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".nii"))
            .collect();
        names.sort();
        let mut items = Vec::new();
        for n in &names {
            if let Some(stem) = n.strip_prefix("img_") {
                let lbl = format!("lbl_{stem}");
                if names.contains(&lbl) {
                    let mut m = IndexMap::new();
                    m.insert("image".to_string(), dir.join(n));
                    m.insert("label".to_string(), dir.join(&lbl));
                    items.push(ItemSource::Dict(m));
                    continue;
                }
            } else if let Some(stem) = n.strip_prefix("lbl_") {
                if names.contains(&format!("img_{stem}")) {
                    continue;
                }
            }
            items.push(ItemSource::Path(dir.join(n)));
        }
        Ok(DataSource { items })
    }
}

/// Execution counters, safe to read while a dataset is in use.
#[derive(Debug, Default)]
pub struct Counters {
    prefix: AtomicU64,
    suffix: AtomicU64,
    cache_warnings: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub prefix_executions: u64,
    pub suffix_executions: u64,
    pub cache_warnings: u64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            prefix_executions: self.prefix.load(Ordering::SeqCst),
            suffix_executions: self.suffix.load(Ordering::SeqCst),
            cache_warnings: self.cache_warnings.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        self.prefix.store(0, Ordering::SeqCst);
        self.suffix.store(0, Ordering::SeqCst);
        self.cache_warnings.store(0, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheMode {
    None,
    /// Memoise the prefix for the first `floor(rate * len)` items.
    Memory { cache_rate: f64 },
    /// Store prefix results as files under `dir`.
    Persistent { dir: PathBuf },
}

/// Items of a [`DataSource`] run through a [`Pipeline`].
pub struct Dataset {
    source: DataSource,
    pipeline: Pipeline,
    mode: CacheMode,
    counters: Counters,
    slots: Vec<Mutex<Option<Item>>>,
    prefix_json: String,
}

impl Dataset {
    pub fn new(source: DataSource, pipeline: Pipeline, mode: CacheMode) -> Result<Self> {
        let cached = match &mode {
            CacheMode::Memory { cache_rate } => {
                if !(0.0..=1.0).contains(cache_rate) {
                    return Err(Error::InvalidArgument(format!("cache_rate must be in [0, 1], got {cache_rate}")));
                }
                (cache_rate * source.len() as f64).floor() as usize
            }
            _ => 0,
        };
        let k = pipeline.deterministic_prefix_len();
        let prefix_json = canonical_json(&serde_json::to_value(pipeline.step_configs(0..k))?);
        Ok(Dataset {
            slots: (0..cached).map(|_| Mutex::new(None)).collect(),
            source,
            pipeline,
            mode,
            counters: Counters::default(),
            prefix_json,
        })
    }

    pub fn plain(source: DataSource, pipeline: Pipeline) -> Self {
        Dataset::new(source, pipeline, CacheMode::None).expect("plain dataset")
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    pub fn reset_counters(&self) {
        self.counters.reset()
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// SHA-256 over the descriptor bytes followed by the canonical JSON of
    /// the deterministic prefix steps.
    pub fn cache_key(&self, index: usize) -> Result<[u8; 32]> {
        let src = self.source.items.get(index).ok_or_else(|| self.out_of_range(index))?;
        let mut h = Sha256::new();
        h.update(src.descriptor_bytes());
        h.update(self.prefix_json.as_bytes());
        Ok(h.finalize().into())
    }

    pub fn cache_path(&self, index: usize) -> Result<Option<PathBuf>> {
        let CacheMode::Persistent { dir } = &self.mode else {
            return Ok(None);
        };
        let ext = if self.source.items[index].is_dict() { "mvold" } else { "mvol" };
        Ok(Some(dir.join(format!("{}.{ext}", hex::encode(self.cache_key(index)?)))))
    }

    fn out_of_range(&self, index: usize) -> Error {
        Error::InvalidArgument(format!("index {index} out of range for {} items", self.len()))
    }

    fn run_prefix(&self, index: usize) -> Result<Item> {
        let src = self.source.items.get(index).ok_or_else(|| self.out_of_range(index))?;
        let item = src.load()?;
        self.counters.prefix.fetch_add(1, Ordering::SeqCst);
        self.pipeline
            .apply_range(item, 0..self.pipeline.deterministic_prefix_len(), index as u64, 0)
    }

    fn prefix(&self, index: usize) -> Result<Item> {
        match &self.mode {
            CacheMode::None => self.run_prefix(index),
            CacheMode::Memory { .. } => match self.slots.get(index) {
                Some(slot) => {
                    let mut guard = slot.lock().unwrap_or_else(|e| e.into_inner());
                    if let Some(item) = guard.as_ref() {
                        return Ok(item.clone());
                    }
                    let item = self.run_prefix(index)?;
                    *guard = Some(item.clone());
                    Ok(item)
                }
                None => self.run_prefix(index),
            },
            CacheMode::Persistent { dir } => {
                let path = self.cache_path(index)?.expect("persistent mode");
                if path.exists() {
                    match read_entry(&path) {
                        Ok(item) => return Ok(item),
                        Err(_) => {
                            self.counters.cache_warnings.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                }
                let item = self.run_prefix(index)?;
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_entry(&path, &item)?;
                Ok(item)
            }
        }
    }

    /// Item `index` after the full pipeline, seeded by `(index, epoch)`.
    pub fn get(&self, index: usize, epoch: u64) -> Result<Item> {
        if index >= self.len() {
            return Err(self.out_of_range(index));
        }
        let item = self.prefix(index)?;
        self.counters.suffix.fetch_add(1, Ordering::SeqCst);
        let k = self.pipeline.deterministic_prefix_len();
        self.pipeline
            .apply_range(item, k..self.pipeline.len(), index as u64, epoch)
    }
}

fn read_entry(path: &Path) -> Result<Item> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "mvold") {
        Ok(Item::Dict(mvol::dict_from_bytes(&bytes)?.into_iter().collect()))
    } else {
        Ok(Item::Volume(mvol::from_bytes(&bytes)?))
    }
}

fn write_entry(path: &Path, item: &Item) -> Result<()> {
    let bytes = match item {
        Item::Volume(v) => mvol::to_bytes(v)?,
        Item::Dict(d) => mvol::dict_to_bytes(d.iter().map(|(k, v)| (k.as_str(), v)))?,
    };
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("entry");
    let tmp = path.with_file_name(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        SEQ.fetch_add(1, Ordering::SeqCst)
    ));
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
