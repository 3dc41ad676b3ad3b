//! Sliding-window inference and a small event-driven evaluation engine.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{binarize, DiceMetric};
use crate::pipeline::{DataDict, Item, Pipeline};
use crate::volume::{increment, MetaValue, MetaVolume, Tensor};

/// Batch-in, batch-out model callback. Implementations must be pure and
/// return a fixed number of output channels.
pub trait Predictor: Sync {
    fn predict(&self, batch: &[Tensor]) -> Result<Vec<Tensor>>;
}

impl<F> Predictor for F
where
    F: Fn(&[Tensor]) -> Result<Vec<Tensor>> + Sync,
{
    fn predict(&self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        self(batch)
    }
}

/// Built-in predictors that need no model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StubPredictor {
    Identity,
    /// `1` where the first channel exceeds `t`, else `0`.
    Threshold(f32),
    /// Gaussian blur (sigma in voxels) followed by thresholding.
    BlurThreshold { sigma: f64, threshold: f32 },
}

impl FromStr for StubPredictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad predictor spec '{s}'"));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        if s == "identity" {
            return Ok(StubPredictor::Identity);
        }
        if let Some(t) = s.strip_prefix("threshold:") {
            return Ok(StubPredictor::Threshold(num(t)? as f32));
        }
        if let Some(rest) = s.strip_prefix("blur-threshold:") {
            let (sigma, t) = rest.split_once(',').ok_or_else(bad)?;
            let sigma = num(sigma)?;
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(bad());
            }
            return Ok(StubPredictor::BlurThreshold {
                sigma,
                threshold: num(t)? as f32,
            });
        }
        Err(bad())
    }
}

impl fmt::Display for StubPredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StubPredictor::Identity => write!(f, "identity"),
            StubPredictor::Threshold(t) => write!(f, "threshold:{t}"),
            StubPredictor::BlurThreshold { sigma, threshold } => write!(f, "blur-threshold:{sigma},{threshold}"),
        }
    }
}

impl StubPredictor {
    fn one(&self, t: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            StubPredictor::Identity => t.clone(),
            StubPredictor::Threshold(th) => threshold_first(t, th)?,
            StubPredictor::BlurThreshold { sigma, threshold } => threshold_first(&gaussian_blur(t, sigma)?, threshold)?,
        })
    }
}

impl Predictor for StubPredictor {
    fn predict(&self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        batch.iter().map(|t| self.one(t)).collect()
    }
}

fn threshold_first(t: &Tensor, th: f32) -> Result<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, t.channel(0).iter().map(|&x| if x > th { 1.0 } else { 0.0 }).collect())
}

/// Separable Gaussian blur with edge clamping; radius `ceil(3 sigma)`.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(t.clone());
    }
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let dims = t.spatial_dims().to_vec();
    let n = t.spatial_len();
    let mut out = t.clone();
    for c in 0..t.channels() {
        let mut cur: Vec<f64> = t.channel(c).iter().map(|&x| x as f64).collect();
        for axis in 0..dims.len() {
            let stride: usize = dims[axis + 1..].iter().product();
            let d = dims[axis] as i64;
            let mut next = vec![0.0; n];
            for (o, slot) in next.iter_mut().enumerate() {
                let i = ((o / stride) % dims[axis]) as i64;
                let base = o - i as usize * stride;
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (i + k as i64 - r).clamp(0, d - 1) as usize;
                    acc += w * cur[base + j * stride];
                }
                *slot = acc / norm;
            }
            cur = next;
        }
        for (dst, x) in out.channel_mut(c).iter_mut().zip(cur) {
            *dst = x as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    #[default]
    Constant,
    Gaussian,
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(BlendMode::Constant),
            "gaussian" => Ok(BlendMode::Gaussian),
            _ => Err(Error::InvalidArgument(format!("unknown blend mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    /// Window size per axis, clipped to the image.
    pub roi: Vec<usize>,
    pub overlap: f64,
    /// Sorted, deduplicated window starts per axis.
    pub starts: Vec<Vec<usize>>,
    /// Cartesian product of `starts`, first axis slowest.
    pub origins: Vec<Vec<usize>>,
}

fn check_overlap(overlap: f64) -> Result<()> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must be in [0, 1), got {overlap}")));
    }
    Ok(())
}

/// Window starts along one axis.
pub fn axis_starts(d: usize, roi: usize, overlap: f64) -> Vec<usize> {
    if d <= roi {
        return vec![0];
    }
    let interval = ((roi as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let n = (d - roi).div_ceil(interval) + 1;
    let mut starts: Vec<usize> = (0..n).map(|i| (i * interval).min(d - roi)).collect();
    starts.dedup();
    starts
}

pub fn plan_windows(dims: &[usize], roi: &[usize], overlap: f64) -> Result<WindowPlan> {
    check_overlap(overlap)?;
    if roi.len() != dims.len() || roi.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "roi {roi:?} must have {} positive entries",
            dims.len()
        )));
    }
    let starts: Vec<Vec<usize>> = dims
        .iter()
        .zip(roi)
        .map(|(&d, &r)| axis_starts(d, r, overlap))
        .collect();
    let counts: Vec<usize> = starts.iter().map(Vec::len).collect();
    let total: usize = counts.iter().product();
    let mut origins = Vec::with_capacity(total);
    let mut k = vec![0usize; dims.len()];
    for _ in 0..total {
        origins.push(k.iter().zip(&starts).map(|(&i, s)| s[i]).collect());
        increment(&mut k, &counts);
    }
    Ok(WindowPlan {
        roi: dims.iter().zip(roi).map(|(&d, &r)| r.min(d)).collect(),
        overlap,
        starts,
        origins,
    })
}

/// Per-window weights, peak 1. Gaussian maps use sigma = 0.125 roi per axis
/// and are floored at 1e-3.
pub fn importance_map(roi: &[usize], mode: BlendMode) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(roi);
    match mode {
        BlendMode::Constant => Tensor::filled(shape, 1.0),
        BlendMode::Gaussian => {
            let axes: Vec<Vec<f64>> = roi
                .iter()
                .map(|&r| {
                    let c = (r as f64 - 1.0) / 2.0;
                    let sigma = 0.125 * r as f64;
                    let g: Vec<f64> = (0..r).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
                    let peak = g.iter().cloned().fold(0.0, f64::max);
                    g.into_iter().map(|x| x / peak).collect()
                })
                .collect();
            Tensor::from_fn(shape, |_, idx| {
                let w: f64 = idx.iter().zip(&axes).map(|(&i, g)| g[i]).product();
                w.max(1e-3) as f32
            })
        }
    }
}

/// Sliding-window settings.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowParams {
    pub roi: Vec<usize>,
    pub overlap: f64,
    pub blend: BlendMode,
    pub batch_size: usize,
}

fn copy_window(src: &Tensor, origin: &[usize], roi: &[usize]) -> Result<Tensor> {
    let mut shape = vec![src.channels()];
    shape.extend_from_slice(roi);
    let mut idx = vec![0usize; roi.len()];
    Tensor::from_fn(shape, |c, w| {
        for (a, (&o, &i)) in origin.iter().zip(w).enumerate() {
            idx[a] = o + i;
        }
        src.get(c, &idx)
    })
}

fn zero_pad_to(t: &Tensor, dims: &[usize]) -> Result<Tensor> {
    if t.spatial_dims() == dims {
        return Ok(t.clone());
    }
    let mut shape = vec![t.channels()];
    shape.extend_from_slice(dims);
    let src = t.spatial_dims();
    Tensor::from_fn(shape, |c, idx| {
        if idx.iter().zip(src).all(|(&i, &d)| i < d) {
            t.get(c, idx)
        } else {
            0.0
        }
    })
}

/// Tiles `v` into overlapping windows, predicts batches of them and blends
/// the outputs with the importance map. Images smaller than the window are
/// zero-padded at the high end and cropped back afterwards.
pub fn sliding_window_infer(v: &MetaVolume, params: &WindowParams, predictor: &dyn Predictor) -> Result<MetaVolume> {
    let dims = v.spatial_dims().to_vec();
    if params.roi.len() != dims.len() {
        return Err(Error::InvalidArgument(format!(
            "roi {:?} does not match {} spatial dims",
            params.roi,
            dims.len()
        )));
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let padded: Vec<usize> = dims.iter().zip(&params.roi).map(|(&d, &r)| d.max(r)).collect();
    let src = zero_pad_to(&v.array, &padded)?;
    let plan = plan_windows(&padded, &params.roi, params.overlap)?;
    let imp = importance_map(&plan.roi, params.blend)?;
    let n_pad: usize = padded.iter().product();
    let mut weight = vec![0.0f64; n_pad];
    let mut sum: Vec<f64> = Vec::new();
    let mut out_channels = 0;
    for chunk in plan.origins.chunks(params.batch_size) {
        let batch = chunk
            .iter()
            .map(|o| copy_window(&src, o, &plan.roi))
            .collect::<Result<Vec<_>>>()?;
        let preds = predictor.predict(&batch)?;
        if preds.len() != batch.len() {
            return Err(Error::Predictor(format!(
                "predictor returned {} outputs for {} windows",
                preds.len(),
                batch.len()
            )));
        }
        for (origin, pred) in chunk.iter().zip(&preds) {
            if pred.spatial_dims() != &plan.roi[..] {
                return Err(Error::Predictor(format!(
                    "window output dims {:?} differ from roi {:?}",
                    pred.spatial_dims(),
                    plan.roi
                )));
            }
            if sum.is_empty() {
                out_channels = pred.channels();
                sum = vec![0.0; n_pad * out_channels];
            } else if pred.channels() != out_channels {
                return Err(Error::Predictor("predictor channel count changed between windows".into()));
            }
            accumulate(&mut sum, &mut weight, &padded, origin, pred, &imp);
        }
    }
    if weight.iter().any(|&w| w <= 0.0) {
        return Err(Error::InvalidArgument("window plan left voxels uncovered".into()));
    }
    let mut shape = vec![out_channels];
    shape.extend_from_slice(&dims);
    let out = Tensor::from_fn(shape, |c, idx| {
        let o = crate::volume::offset(&padded, idx);
        (sum[c * n_pad + o] / weight[o]) as f32
    })?;
    let mut res = v.with_array(out);
    if padded != dims {
        res.meta.insert(
            "sys.sliding_window_padded".into(),
            MetaValue::List(padded.iter().map(|&d| d as f64).collect()),
        );
    }
    Ok(res)
}

fn accumulate(sum: &mut [f64], weight: &mut [f64], dims: &[usize], origin: &[usize], pred: &Tensor, imp: &Tensor) {
    let roi = pred.spatial_dims();
    let n_pad: usize = dims.iter().product();
    let mut w = vec![0usize; roi.len()];
    let mut g = vec![0usize; roi.len()];
    let wins = imp.data();
    for (k, &iw) in wins.iter().enumerate() {
        for (a, (&o, &i)) in origin.iter().zip(&w).enumerate() {
            g[a] = o + i;
        }
        let go = crate::volume::offset(dims, &g);
        let iw = iw as f64;
        weight[go] += iw;
        for c in 0..pred.channels() {
            sum[c * n_pad + go] += iw * pred.channel(c)[k] as f64;
        }
        increment(&mut w, roi);
    }
}

/// Engine lifecycle events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Started,
    EpochStarted,
    IterationStarted,
    IterationCompleted,
    EpochCompleted,
    Completed,
    ExceptionRaised,
}

#[derive(Debug)]
pub struct EngineState<O> {
    /// Current epoch, 1-based once started.
    pub epoch: usize,
    /// Iterations started so far across all epochs.
    pub iteration: usize,
    pub output: Option<O>,
    /// Message of the error being handled during `ExceptionRaised`.
    pub error: Option<String>,
    /// Set by a handler to swallow the current error.
    pub exception_handled: bool,
}

pub trait Handler<O> {
    fn handle(&self, event: EventKind, state: &mut EngineState<O>);
}

impl<O, F: Fn(EventKind, &mut EngineState<O>)> Handler<O> for F {
    fn handle(&self, event: EventKind, state: &mut EngineState<O>) {
        self(event, state)
    }
}

/// Runs a step function over data, firing events to handlers in attachment
/// order.
pub struct Engine<'h, O> {
    handlers: Vec<Rc<dyn Handler<O> + 'h>>,
}

impl<O> Default for Engine<'_, O> {
    fn default() -> Self {
        Engine { handlers: Vec::new() }
    }
}

impl<'h, O> Engine<'h, O> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach(&mut self, h: Rc<dyn Handler<O> + 'h>) {
        self.handlers.push(h);
    }

    fn fire(&self, e: EventKind, state: &mut EngineState<O>) {
        for h in &self.handlers {
            h.handle(e, state);
        }
    }

    pub fn run<I>(
        &self,
        data: &[I],
        mut step: impl FnMut(&EngineState<O>, &I) -> Result<O>,
        max_epochs: usize,
    ) -> Result<EngineState<O>> {
        let mut state = EngineState {
            epoch: 0,
            iteration: 0,
            output: None,
            error: None,
            exception_handled: false,
        };
        self.fire(EventKind::Started, &mut state);
        for epoch in 1..=max_epochs {
            state.epoch = epoch;
            self.fire(EventKind::EpochStarted, &mut state);
            for item in data {
                state.iteration += 1;
                self.fire(EventKind::IterationStarted, &mut state);
                match step(&state, item) {
                    Ok(out) => {
                        state.output = Some(out);
                        self.fire(EventKind::IterationCompleted, &mut state);
                    }
                    Err(e) => {
                        state.error = Some(e.to_string());
                        state.exception_handled = false;
                        self.fire(EventKind::ExceptionRaised, &mut state);
                        if !state.exception_handled {
                            return Err(e);
                        }
                        state.error = None;
                    }
                }
            }
            self.fire(EventKind::EpochCompleted, &mut state);
        }
        self.fire(EventKind::Completed, &mut state);
        Ok(state)
    }
}

/// Runs sliding-window inference on every `{image, label}` item after the
/// pipeline and returns the mean Dice over defined (item, class) pairs.
/// Predictions and labels are binarised at 0.5.
pub fn evaluate(
    items: &[DataDict],
    pipeline: &Pipeline,
    predictor: &dyn Predictor,
    params: &WindowParams,
) -> Result<Option<f64>> {
    let metric = Rc::new(std::cell::RefCell::new(DiceMetric::default()));
    let failure: Rc<std::cell::RefCell<Option<Error>>> = Rc::default();
    let m = metric.clone();
    let f = failure.clone();
    let mut engine: Engine<(Tensor, Tensor)> = Engine::new();
    engine.attach(Rc::new(move |e: EventKind, s: &mut EngineState<(Tensor, Tensor)>| {
        if e == EventKind::IterationCompleted {
            if let Some((pred, label)) = &s.output {
                if let Err(err) = m.borrow_mut().update(pred, label) {
                    f.borrow_mut().get_or_insert(err);
                }
            }
        }
    }));
    let indexed: Vec<(usize, &DataDict)> = items.iter().enumerate().collect();
    engine.run(
        &indexed,
        |_, (i, d)| {
            let item = pipeline.apply(Item::Dict((*d).clone()), *i as u64, 0)?;
            let image = item.get("image")?;
            let label = item.get("label")?;
            let pred = sliding_window_infer(image, params, predictor)?;
            Ok((binarize(&pred.array, 0.5), binarize(&label.array, 0.5)))
        },
        1,
    )?;
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    let agg = metric.borrow().aggregate();
    Ok(agg)
}
