//! Composition of transform steps over volumes and dictionaries, LIFO
//! inversion and test-time augmentation.

use std::collections::hash_map::RandomState;
use std::hash::{BuildHasher, Hasher};
use std::ops::Range;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Predictor;
use crate::rng::{derive_seed, mix64, Rng};
use crate::transforms::{invert_last, StepConfig, Transform};
use crate::volume::{MetaVolume, Tensor};

/// Named volumes that travel through a pipeline together.
pub type DataDict = IndexMap<String, MetaVolume>;

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Volume(MetaVolume),
    Dict(DataDict),
}

impl Item {
    pub fn volumes(&self) -> Vec<&MetaVolume> {
        match self {
            Item::Volume(v) => vec![v],
            Item::Dict(d) => d.values().collect(),
        }
    }

    pub fn into_volume(self) -> Result<MetaVolume> {
        match self {
            Item::Volume(v) => Ok(v),
            Item::Dict(_) => Err(Error::InvalidArgument("expected a volume, got a dictionary".into())),
        }
    }

    pub fn into_dict(self) -> Result<DataDict> {
        match self {
            Item::Dict(d) => Ok(d),
            Item::Volume(_) => Err(Error::InvalidArgument("expected a dictionary, got a volume".into())),
        }
    }

    pub fn get(&self, key: &str) -> Result<&MetaVolume> {
        match self {
            Item::Dict(d) => d.get(key).ok_or_else(|| Error::MissingKey(key.to_string())),
            Item::Volume(_) => Err(Error::MissingKey(key.to_string())),
        }
    }
}

impl From<MetaVolume> for Item {
    fn from(v: MetaVolume) -> Self {
        Item::Volume(v)
    }
}

impl From<DataDict> for Item {
    fn from(d: DataDict) -> Self {
        Item::Dict(d)
    }
}

static GLOBAL_SEED: Mutex<Option<u64>> = Mutex::new(None);

/// Sets the seed that later-built pipelines derive their base seed from;
/// `None` restores entropy seeding.
pub fn set_determinism(seed: Option<u64>) {
    *GLOBAL_SEED.lock().unwrap_or_else(|e| e.into_inner()) = seed;
}

/// Base seed for a pipeline built without an explicit seed.
pub fn default_base_seed() -> u64 {
    match *GLOBAL_SEED.lock().unwrap_or_else(|e| e.into_inner()) {
        Some(s) => derive_seed(s, &[]),
        None => entropy_seed(),
    }
}

fn entropy_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    h.write_u64(nanos);
    mix64(h.finish())
}

/// JSON pipeline description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub steps: Vec<StepConfig>,
}

/// A configured transform bound to dictionary keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Unique within the pipeline: the transform name, suffixed `_2`, `_3`,
    /// ... on repeats.
    pub name: String,
    pub config: StepConfig,
    pub transform: Transform,
}

impl Step {
    pub fn new(config: StepConfig) -> Result<Self> {
        let transform = Transform::from_step(&config)?;
        Ok(Step {
            name: config.name.clone(),
            config,
            transform,
        })
    }

    pub fn from_transform(transform: Transform) -> Self {
        let value = serde_json::to_value(&transform).expect("transform serialises");
        let config = StepConfig {
            name: transform.name(),
            args: value.get("args").cloned().unwrap_or_else(|| serde_json::json!({})),
            keys: vec![],
            label_keys: vec![],
        };
        Step {
            name: config.name.clone(),
            config,
            transform,
        }
    }

    pub fn keys(mut self, keys: &[&str]) -> Self {
        self.config.keys = keys.iter().map(|k| k.to_string()).collect();
        self
    }

    pub fn label_keys(mut self, keys: &[&str]) -> Self {
        self.config.label_keys = keys.iter().map(|k| k.to_string()).collect();
        self
    }

    pub fn random(&self) -> bool {
        self.transform.is_random()
    }

    pub fn invertible(&self) -> Result<bool> {
        self.transform.is_invertible()
    }

    /// Every step records itself on the trace stack.
    pub fn traced(&self) -> bool {
        true
    }

    /// Keys this step reads in a dictionary: `keys` then any extra
    /// `label_keys`; every key when both are empty.
    pub fn bound_keys(&self, d: &DataDict) -> Vec<String> {
        let mut out = self.config.keys.clone();
        for k in &self.config.label_keys {
            if !out.contains(k) {
                out.push(k.clone());
            }
        }
        if out.is_empty() {
            out = d.keys().cloned().collect();
        }
        out
    }

    fn run(&self, item: Item, rng: &mut Rng) -> Result<Item> {
        match item {
            Item::Volume(v) => {
                let resolved = self.transform.draw(rng, &v)?;
                Ok(Item::Volume(resolved.apply(&v, false)?))
            }
            Item::Dict(mut d) => {
                let keys = self.bound_keys(&d);
                if let Some(missing) = keys.iter().find(|k| !d.contains_key(*k)) {
                    return Err(Error::MissingKey(missing.clone()));
                }
                let Some(first) = keys.first() else {
                    return Ok(Item::Dict(d));
                };
                let resolved = self.transform.draw(rng, &d[first])?;
                for k in &keys {
                    let is_label = self.config.label_keys.contains(k);
                    let out = resolved.apply(&d[k], is_label)?;
                    d.insert(k.clone(), out);
                }
                Ok(Item::Dict(d))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub steps: Vec<Step>,
    pub base_seed: u64,
}

impl Pipeline {
    /// Builds a pipeline; `base_seed` defaults per [`set_determinism`].
    pub fn new(steps: Vec<Step>, base_seed: Option<u64>) -> Self {
        let mut steps = steps;
        let mut seen: IndexMap<String, usize> = IndexMap::new();
        for s in steps.iter_mut() {
            let n = seen.entry(s.config.name.clone()).or_insert(0);
            *n += 1;
            if *n > 1 {
                s.name = format!("{}_{}", s.config.name, n);
            }
        }
        Pipeline {
            steps,
            base_seed: base_seed.unwrap_or_else(default_base_seed),
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let steps = cfg.steps.iter().cloned().map(Step::new).collect::<Result<Vec<_>>>()?;
        Ok(Pipeline::new(steps, cfg.seed))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        Pipeline::from_config(&cfg)
    }

    pub fn from_transforms(ts: Vec<Transform>, base_seed: u64) -> Self {
        Pipeline::new(ts.into_iter().map(Step::from_transform).collect(), Some(base_seed))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Index of the first random step (`len()` if none).
    pub fn deterministic_prefix_len(&self) -> usize {
        self.steps.iter().position(Step::random).unwrap_or(self.steps.len())
    }

    pub fn step_configs(&self, range: Range<usize>) -> Vec<StepConfig> {
        self.steps[range].iter().map(|s| s.config.clone()).collect()
    }

    /// Seed for step `step` of item `index` in `epoch`.
    pub fn step_seed(&self, index: u64, epoch: u64, step: usize) -> u64 {
        derive_seed(self.base_seed, &[epoch, index, step as u64])
    }

    /// Applies every step in order.
    pub fn apply(&self, item: Item, index: u64, epoch: u64) -> Result<Item> {
        self.apply_range(item, 0..self.steps.len(), index, epoch)
    }

    /// Applies the steps in `range`; seeding depends only on the absolute
    /// step index, so split execution matches a single pass.
    pub fn apply_range(&self, mut item: Item, range: Range<usize>, index: u64, epoch: u64) -> Result<Item> {
        for s in range {
            let step = &self.steps[s];
            let mut rng = Rng::new(self.step_seed(index, epoch, s));
            item = step.run(item, &mut rng).map_err(|e| e.in_step(&step.name))?;
        }
        Ok(item)
    }

    pub fn apply_volume(&self, v: MetaVolume, index: u64, epoch: u64) -> Result<MetaVolume> {
        self.apply(Item::Volume(v), index, epoch)?.into_volume()
    }
}

/// Undoes the newest `depth` records of `v` (all when `None`).
pub fn invert_volume(mut v: MetaVolume, depth: Option<usize>) -> Result<MetaVolume> {
    match depth {
        None => {
            if v.applied.is_empty() {
                return Err(Error::EmptyTrace);
            }
            while !v.applied.is_empty() {
                v = invert_last(v)?;
            }
        }
        Some(n) => {
            if n > v.applied.len() {
                return Err(Error::EmptyTrace);
            }
            for _ in 0..n {
                v = invert_last(v)?;
            }
        }
    }
    Ok(v)
}

/// Inverts every volume of an item.
pub fn invert(item: Item, depth: Option<usize>) -> Result<Item> {
    Ok(match item {
        Item::Volume(v) => Item::Volume(invert_volume(v, depth)?),
        Item::Dict(d) => Item::Dict(
            d.into_iter()
                .map(|(k, v)| Ok((k, invert_volume(v, depth)?)))
                .collect::<Result<DataDict>>()?,
        ),
    })
}

/// Test-time augmentation: per run, augment, predict, invert the prediction
/// through the augmentation's trace. Returns voxelwise mean and population
/// standard deviation.
pub fn tta(
    p: &Pipeline,
    image: &MetaVolume,
    predictor: &dyn Predictor,
    n_runs: usize,
    rng: &mut Rng,
) -> Result<(MetaVolume, MetaVolume)> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("tta needs at least one run".into()));
    }
    for s in &p.steps {
        if !s.invertible()? {
            return Err(Error::NotInvertible(s.name.clone()));
        }
    }
    let mut sum: Vec<f64> = Vec::new();
    let mut sum_sq: Vec<f64> = Vec::new();
    let mut runs: Vec<Tensor> = Vec::with_capacity(n_runs);
    let mut template: Option<MetaVolume> = None;
    for _ in 0..n_runs {
        let epoch = rng.next_u64();
        let aug = p.apply_volume(image.clone(), 0, epoch)?;
        let added = aug.applied.len() - image.applied.len();
        let mut out = predictor.predict(std::slice::from_ref(&aug.array))?;
        if out.len() != 1 {
            return Err(Error::Predictor(format!("expected 1 output, got {}", out.len())));
        }
        let pred = out.remove(0);
        if pred.spatial_dims() != aug.spatial_dims() {
            return Err(Error::Predictor(format!(
                "prediction dims {:?} differ from input dims {:?}",
                pred.spatial_dims(),
                aug.spatial_dims()
            )));
        }
        let inv = invert_volume(aug.with_array(pred), Some(added))?;
        if sum.is_empty() {
            sum = vec![0.0; inv.array.data().len()];
            sum_sq = vec![0.0; inv.array.data().len()];
        } else if inv.array.shape() != runs[0].shape() {
            return Err(Error::Predictor("prediction shapes differ between runs".into()));
        }
        for ((s, q), &x) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(inv.array.data()) {
            *s += x as f64;
            *q += (x as f64) * (x as f64);
        }
        runs.push(inv.array.clone());
        template.get_or_insert(inv);
    }
    let template = template.expect("at least one run");
    let n = n_runs as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut var = vec![0.0f64; mean.len()];
    for r in &runs {
        for ((acc, &m), &x) in var.iter_mut().zip(&mean).zip(r.data()) {
            let d = x as f64 - m;
            *acc += d * d;
        }
    }
    let shape = template.array.shape().to_vec();
    let mean_t = Tensor::new(shape.clone(), mean.iter().map(|&m| m as f32).collect())?;
    let std_t = Tensor::new(shape, var.iter().map(|&v| (v / n).sqrt() as f32).collect())?;
    Ok((template.with_array(mean_t), template.with_array(std_t)))
}
