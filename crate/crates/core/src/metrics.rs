//! Segmentation metrics, losses, a registration regulariser and occlusion
//! sensitivity maps. Channels are classes throughout.

use crate::error::{Error, Result};
use crate::volume::{increment, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1e-5;
const FOCAL_CLAMP: f64 = 1e-7;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `1` where `x > t`, else `0`.
pub fn binarize(t: &Tensor, threshold: f32) -> Tensor {
    t.map(|x| if x > threshold { 1.0 } else { 0.0 })
}

/// Converts a single-channel integer label map into one-hot channels for
/// classes `1..=classes`.
pub fn one_hot(labels: &Tensor, classes: usize) -> Result<Tensor> {
    if labels.channels() != 1 {
        return Err(Error::Shape("one_hot needs a single-channel label map".into()));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("one_hot needs at least one class".into()));
    }
    let mut shape = labels.shape().to_vec();
    shape[0] = classes;
    Tensor::from_fn(shape, |c, idx| {
        if labels.get(0, idx).round() as i64 == c as i64 + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// Per-class voxel counts for binary masks (`> 0.5` is positive).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// `2 tp / (2 tp + fp + fn)`, `None` when the class is absent from both.
    pub fn dice(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<Vec<ConfusionCounts>> {
    same_shape(pred, truth)?;
    Ok((0..pred.channels())
        .map(|c| {
            let mut k = ConfusionCounts::default();
            for (&p, &g) in pred.channel(c).iter().zip(truth.channel(c)) {
                match (p > 0.5, g > 0.5) {
                    (true, true) => k.tp += 1,
                    (true, false) => k.fp += 1,
                    (false, true) => k.fn_ += 1,
                    _ => {}
                }
            }
            k
        })
        .collect())
}

/// Per-class Dice; `None` marks classes empty in both inputs.
pub fn dice_metric(pred: &Tensor, truth: &Tensor) -> Result<Vec<Option<f64>>> {
    Ok(confusion(pred, truth)?.iter().map(ConfusionCounts::dice).collect())
}

/// Mean of defined per-class scores, `None` if none are defined.
pub fn mean_defined(scores: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Running Dice over many items.
#[derive(Debug, Clone, Default)]
pub struct DiceMetric {
    scores: Vec<f64>,
}

impl DiceMetric {
    pub fn update(&mut self, pred: &Tensor, truth: &Tensor) -> Result<Vec<Option<f64>>> {
        let s = dice_metric(pred, truth)?;
        self.scores.extend(s.iter().flatten());
        Ok(s)
    }

    /// Mean over every defined (item, class) pair.
    pub fn aggregate(&self) -> Option<f64> {
        (!self.scores.is_empty()).then(|| self.scores.iter().sum::<f64>() / self.scores.len() as f64)
    }

    pub fn reset(&mut self) {
        self.scores.clear();
    }
}

struct Sums {
    pg: f64,
    p: f64,
    g: f64,
}

fn class_sums(pred: &Tensor, truth: &Tensor) -> Result<Vec<Sums>> {
    same_shape(pred, truth)?;
    Ok((0..pred.channels())
        .map(|c| {
            let mut s = Sums { pg: 0.0, p: 0.0, g: 0.0 };
            for (&p, &g) in pred.channel(c).iter().zip(truth.channel(c)) {
                let (p, g) = (p as f64, g as f64);
                s.pg += p * g;
                s.p += p;
                s.g += g;
            }
            s
        })
        .collect())
}

/// `1 - mean_c (2 Σpg + smooth) / (Σp + Σg + smooth)`.
pub fn dice_loss(pred: &Tensor, truth: &Tensor, smooth: f64) -> Result<f64> {
    let sums = class_sums(pred, truth)?;
    let mean = sums
        .iter()
        .map(|s| (2.0 * s.pg + smooth) / (s.p + s.g + smooth))
        .sum::<f64>()
        / sums.len() as f64;
    Ok(1.0 - mean)
}

/// Dice loss with class weights `1 / (Σg)²` (zero for absent classes).
pub fn generalized_dice_loss(pred: &Tensor, truth: &Tensor, smooth: f64) -> Result<f64> {
    let sums = class_sums(pred, truth)?;
    let (mut num, mut den) = (0.0, 0.0);
    for s in &sums {
        let w = if s.g > 0.0 { 1.0 / (s.g * s.g) } else { 0.0 };
        num += w * s.pg;
        den += w * (s.p + s.g);
    }
    Ok(1.0 - (2.0 * num + smooth) / (den + smooth))
}

/// `1 - mean_c (2tp + smooth) / (2tp + 2α fp + 2β fn + smooth)` with soft
/// counts; α = β = 0.5 reduces to [`dice_loss`].
pub fn tversky_loss(pred: &Tensor, truth: &Tensor, alpha: f64, beta: f64, smooth: f64) -> Result<f64> {
    let sums = class_sums(pred, truth)?;
    let mean = sums
        .iter()
        .map(|s| {
            let (tp, fp, fn_) = (s.pg, s.p - s.pg, s.g - s.pg);
            (2.0 * tp + smooth) / (2.0 * tp + 2.0 * alpha * fp + 2.0 * beta * fn_ + smooth)
        })
        .sum::<f64>()
        / sums.len() as f64;
    Ok(1.0 - mean)
}

/// Mean over elements of `-(1 - p_t)^γ ln p_t` with `p_t = g p + (1-g)(1-p)`
/// and `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(pred: &Tensor, truth: &Tensor, gamma: f64) -> Result<f64> {
    same_shape(pred, truth)?;
    let n = pred.data().len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &g)| {
            let p = (p as f64).clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
            let g = g as f64;
            let pt = g * p + (1.0 - g) * (1.0 - p);
            -(1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(total / n)
}

pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Mean over interior voxels of `Σ_components Σ_{i,j} (∂²u/∂x_i∂x_j)²`
/// using central differences at unit spacing (mixed terms counted twice).
/// `field` has one channel per spatial axis.
pub fn bending_energy(field: &Tensor) -> Result<f64> {
    let dims = field.spatial_dims().to_vec();
    let rank = dims.len();
    if field.channels() != rank {
        return Err(Error::Shape(format!(
            "displacement field needs {rank} channels, got {}",
            field.channels()
        )));
    }
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidArgument(format!(
            "bending energy needs >= 3 voxels per axis, got {dims:?}"
        )));
    }
    let strides: Vec<usize> = (0..rank).map(|a| dims[a + 1..].iter().product()).collect();
    let inner: Vec<usize> = dims.iter().map(|&d| d - 2).collect();
    let mut idx = vec![0usize; rank];
    let mut total = 0.0f64;
    let mut count = 0usize;
    loop {
        let o: usize = idx.iter().zip(&strides).map(|(&i, &s)| (i + 1) * s).sum();
        for c in 0..rank {
            let u = field.channel(c);
            let at = |off: isize| u[(o as isize + off) as usize] as f64;
            for i in 0..rank {
                let si = strides[i] as isize;
                let dii = at(si) - 2.0 * at(0) + at(-si);
                total += dii * dii;
                for j in i + 1..rank {
                    let sj = strides[j] as isize;
                    let dij = (at(si + sj) - at(si - sj) - at(sj - si) + at(-si - sj)) / 4.0;
                    total += 2.0 * dij * dij;
                }
            }
        }
        count += 1;
        if !increment(&mut idx, &inner) {
            break;
        }
    }
    Ok(total / count as f64)
}

/// Occlusion sensitivity: for boxes at every `stride` step, replace the box
/// with `fill` (the per-channel image mean when `None`) and record `score(occluded) - score(image)`
/// over the box's stride cell. Returns a single-channel map.
pub fn occlusion_sensitivity(
    image: &Tensor,
    predictor: impl Fn(&Tensor) -> Result<Vec<f64>>,
    class_index: usize,
    box_size: &[usize],
    stride: &[usize],
    fill: Option<f32>,
) -> Result<Tensor> {
    let dims = image.spatial_dims().to_vec();
    let rank = dims.len();
    if box_size.len() != rank || stride.len() != rank {
        return Err(Error::InvalidArgument(format!(
            "box and stride need {rank} entries"
        )));
    }
    if box_size.iter().zip(&dims).any(|(&b, &d)| b == 0 || b > d) || stride.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "box {box_size:?} / stride {stride:?} invalid for dims {dims:?}"
        )));
    }
    let score = |t: &Tensor| -> Result<f64> {
        let s = predictor(t)?;
        s.get(class_index).copied().ok_or_else(|| {
            Error::Predictor(format!("class {class_index} out of range for {} scores", s.len()))
        })
    };
    let base = score(image)?;
    let fill: Vec<f32> = (0..image.channels())
        .map(|c| {
            let ch = image.channel(c);
            fill.unwrap_or_else(|| (ch.iter().map(|&x| x as f64).sum::<f64>() / ch.len() as f64) as f32)
        })
        .collect();
    let cells: Vec<usize> = dims.iter().zip(stride).map(|(&d, &s)| d.div_ceil(s)).collect();
    let mut shape = vec![1];
    shape.extend_from_slice(&dims);
    let mut map = Tensor::zeros(shape)?;
    let mut k = vec![0usize; rank];
    loop {
        let origin: Vec<usize> = k.iter().zip(stride).map(|(&i, &s)| i * s).collect();
        let hi: Vec<usize> = origin
            .iter()
            .zip(box_size)
            .zip(&dims)
            .map(|((&o, &b), &d)| (o + b).min(d))
            .collect();
        let mut occluded = image.clone();
        let mut idx = vec![0usize; rank];
        loop {
            if idx.iter().zip(&origin).zip(&hi).all(|((&i, &lo), &h)| i >= lo && i < h) {
                for (c, &f) in fill.iter().enumerate() {
                    occluded.set(c, &idx, f);
                }
            }
            if !increment(&mut idx, &dims) {
                break;
            }
        }
        let delta = (score(&occluded)? - base) as f32;
        let cell_hi: Vec<usize> = origin
            .iter()
            .zip(stride)
            .zip(&dims)
            .map(|((&o, &s), &d)| (o + s).min(d))
            .collect();
        let cell: Vec<usize> = origin.iter().zip(&cell_hi).map(|(&o, &h)| h - o).collect();
        let mut j = vec![0usize; rank];
        loop {
            let p: Vec<usize> = origin.iter().zip(&j).map(|(&o, &i)| o + i).collect();
            map.set(0, &p, delta);
            if !increment(&mut j, &cell) {
                break;
            }
        }
        if !increment(&mut k, &cells) {
            break;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Tensor {
        let mut t = Tensor::zeros(vec![1, dims[0], dims[1], dims[2]]).unwrap();
        for p in on {
            t.set(0, p, 1.0);
        }
        t
    }

    #[test]
    fn dice_hand_values() {
        let a = mask([4, 4, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let b = mask([4, 4, 4], &[[0, 0, 2], [0, 0, 3], [1, 0, 0], [1, 0, 1]]);
        assert_eq!(dice_metric(&a, &b).unwrap(), vec![Some(0.5)]);
        assert_eq!(dice_metric(&a, &a).unwrap(), vec![Some(1.0)]);
        let empty = mask([4, 4, 4], &[]);
        assert_eq!(dice_metric(&empty, &empty).unwrap(), vec![None]);
        assert_eq!(dice_metric(&empty, &a).unwrap(), vec![Some(0.0)]);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(vec![1, 2, 2, 2]).unwrap();
        let b = Tensor::zeros(vec![1, 2, 2, 3]).unwrap();
        assert!(dice_metric(&a, &b).is_err());
        assert!(dice_loss(&a, &b, DEFAULT_SMOOTH).is_err());
        assert!(mse_loss(&a, &b).is_err());
    }

    #[test]
    fn dice_loss_extremes() {
        let a = mask([3, 3, 3], &[[1, 1, 1], [0, 1, 2]]);
        assert!(dice_loss(&a, &a, DEFAULT_SMOOTH).unwrap().abs() < 1e-5);
        let inv = a.map(|x| 1.0 - x);
        assert!((dice_loss(&inv, &a, DEFAULT_SMOOTH).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn generalized_dice_ignores_absent_classes() {
        let g = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // Only class 0 has weight; it is predicted perfectly.
        assert!(generalized_dice_loss(&p, &g, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn bending_energy_quadratic() {
        let u = Tensor::from_fn(vec![3, 5, 5, 5], |c, i| if c == 0 { (i[0] * i[0]) as f32 } else { 0.0 }).unwrap();
        assert_eq!(bending_energy(&u).unwrap(), 4.0);
        let small = Tensor::zeros(vec![3, 2, 5, 5]).unwrap();
        assert!(bending_energy(&small).is_err());
    }

    #[test]
    fn occlusion_single_cell() {
        let img = Tensor::filled(vec![1, 4, 4], 1.0).unwrap();
        let sum = |t: &Tensor| Ok(vec![t.data().iter().map(|&x| x as f64).sum()]);
        let m = occlusion_sensitivity(&img, sum, 0, &[2, 2], &[4, 4], None).unwrap();
        // Fill equals the mean, so a constant image is unchanged.
        assert!(m.data().iter().all(|&x| x == 0.0));
    }
}
