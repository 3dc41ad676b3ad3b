#![allow(dead_code)]

use medvox::geometry::{rotation_about, Affine};
use medvox::{MetaVolume, Rng, Tensor};

/// Distinct integer-valued voxels so any misplacement shows up.
pub fn index_volume(dims: &[usize]) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(dims);
    let mut k = 0.0;
    Tensor::from_fn(shape, |_, _| {
        k += 1.0;
        k
    })
    .unwrap()
}

/// Smooth ramp `sum_a (a + 1) * x_a`.
pub fn ramp(dims: &[usize]) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(dims);
    Tensor::from_fn(shape, |_, i| i.iter().enumerate().map(|(a, &x)| ((a + 1) * x) as f32).sum()).unwrap()
}

pub fn random_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_, _| rng.uniform() as f32).unwrap()
}

/// Oblique affine: rotation, anisotropic spacing and an offset.
pub fn oblique_affine(rng: &mut Rng) -> Affine {
    let r = rotation_about(2, rng.uniform_range(-1.0, 1.0));
    let s = [rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0)];
    let mut rows = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            rows[i][j] = r[i][j] * s[j];
        }
        rows[i][3] = rng.uniform_range(-50.0, 50.0);
    }
    rows[3][3] = 1.0;
    Affine(rows)
}

pub fn volume(array: Tensor, affine: Affine) -> MetaVolume {
    MetaVolume::new(array, affine).unwrap()
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
