mod common;

use common::*;
use medvox::geometry::{codes_to_string, Affine};
use medvox::interp::{InterpMode, Interpolation, PaddingMode};
use medvox::pipeline::invert_volume;
use medvox::spatial::{self, AffineParams, ElasticParams};
use medvox::{Error, MetaVolume, Rng, Tensor};
use proptest::prelude::*;

/// Every output voxel must hold the input value found at the same world
/// position.
fn assert_world_preserved(input: &MetaVolume, output: &MetaVolume) {
    let inv = input.affine.inverse().unwrap();
    let dims = output.spatial_dims().to_vec();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let w = output.affine.apply([i as f64, j as f64, k as f64]);
                let p = inv.apply(w);
                let q: Vec<i64> = p.iter().map(|x| x.round() as i64).collect();
                for (x, r) in p.iter().zip(&q) {
                    assert!((x - *r as f64).abs() < 1e-9, "non-integer source {p:?}");
                }
                let inside = q.iter().zip(input.spatial_dims()).all(|(&x, &d)| x >= 0 && (x as usize) < d);
                let got = output.array.get(0, &[i, j, k]);
                let want = if inside {
                    input.array.get(0, &[q[0] as usize, q[1] as usize, q[2] as usize])
                } else {
                    0.0
                };
                assert_eq!(got.to_bits(), want.to_bits(), "voxel {:?}", [i, j, k]);
            }
        }
    }
}

#[test]
fn orientation_preserves_world_positions() {
    let mut rng = Rng::new(11);
    for codes in ["RAS", "LPS", "SAR", "IPL", "ASL"] {
        let v = volume(index_volume(&[4, 5, 6]), oblique_affine(&mut rng));
        let out = spatial::orientation_to(&v, codes).unwrap();
        assert_eq!(codes_to_string(&out.affine.axis_codes().unwrap()), codes);
        assert_world_preserved(&v, &out);
    }
}

#[test]
fn flip_and_crop_preserve_world_positions() {
    let mut rng = Rng::new(12);
    let v = volume(index_volume(&[5, 4, 6]), oblique_affine(&mut rng));
    assert_world_preserved(&v, &spatial::flip(&v, &[0, 2]).unwrap());
    let c = spatial::crop_pad(&v, &[1, -2, 2], &[3, 7, 3], PaddingMode::Zeros).unwrap();
    assert_eq!(c.spatial_dims(), &[3, 7, 3]);
    assert_world_preserved(&v, &c);
}

#[test]
fn spacing_hits_target_and_keeps_origin() {
    let mut rng = Rng::new(13);
    let a = oblique_affine(&mut rng);
    let v = volume(ramp(&[8, 9, 10]), a);
    let out = spatial::spacing_to(&v, &[1.0, 1.25, 0.75], Interpolation::trilinear()).unwrap();
    let s = out.affine.spacing();
    for (got, want) in s.iter().zip([1.0, 1.25, 0.75]) {
        assert!((got - want).abs() < 1e-12);
    }
    let old = a.spacing();
    assert_eq!(out.spatial_dims(), &spatial::spacing_dims(&[8, 9, 10], &old, &[1.0, 1.25, 0.75])[..]);
    let o_in = v.affine.apply([0.0; 3]);
    let o_out = out.affine.apply([0.0; 3]);
    for a in 0..3 {
        assert!((o_in[a] - o_out[a]).abs() < 1e-12);
    }
}

#[test]
fn spacing_upsample_interpolates_linear_ramp() {
    let v = volume(ramp(&[6, 6, 6]), Affine::diag([2.0, 2.0, 2.0]));
    let out = spatial::spacing_to(&v, &[1.0, 1.0, 1.0], Interpolation::trilinear()).unwrap();
    assert_eq!(out.spatial_dims(), &[12, 12, 12]);
    // Inside the source hull the ramp is reproduced exactly.
    for i in 0..11 {
        for j in 0..11 {
            for k in 0..11 {
                let want = (i as f32 + 2.0 * j as f32 + 3.0 * k as f32) / 2.0;
                assert!((out.array.get(0, &[i, j, k]) - want).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn constant_volumes_are_fixed_points() {
    let v = volume(Tensor::filled(vec![2, 9, 8, 7], 3.5).unwrap(), Affine::identity());
    let border = Interpolation::new(InterpMode::Trilinear, PaddingMode::Border);
    let cubic = Interpolation::new(InterpMode::Tricubic, PaddingMode::Border);
    let outs = [
        spatial::rotate(&v, &[0.3, -0.2, 0.7], border).unwrap(),
        spatial::rotate(&v, &[0.3, -0.2, 0.7], cubic).unwrap(),
        spatial::zoom(&v, &[1.3, 0.7, 1.1], border).unwrap(),
        spatial::spacing_to(&v, &[0.7, 1.3, 2.0], border).unwrap(),
        spatial::affine_resample(
            &v,
            &AffineParams {
                rotation: vec![0.1, 0.2, 0.3],
                scale: vec![1.1, 0.9, 1.2],
                shear: vec![0.1, 0.0, -0.1],
                translation: vec![1.5, -2.0, 0.5],
            },
            border,
        )
        .unwrap(),
    ];
    for o in outs {
        assert!(o.array.data().iter().all(|&x| (x - 3.5).abs() < 1e-5));
    }
}

#[test]
fn nearest_keeps_label_sets() {
    let mut rng = Rng::new(14);
    let labels = Tensor::from_fn(vec![1, 10, 10, 10], |_, _| rng.below(4) as f32).unwrap();
    let v = volume(labels, Affine::diag([1.0, 1.2, 0.8]));
    let nn = Interpolation::new(InterpMode::Nearest, PaddingMode::Zeros);
    for out in [
        spatial::rotate(&v, &[0.4, 0.1, -0.3], nn).unwrap(),
        spatial::zoom(&v, &[1.4, 1.4, 0.8], nn).unwrap(),
        spatial::spacing_to(&v, &[0.7, 0.7, 0.7], nn).unwrap(),
    ] {
        assert!(out.array.data().iter().all(|&x| x == x.round() && (0.0..=3.0).contains(&x)));
    }
}

#[test]
fn rotation_by_quarter_turn_matches_permutation() {
    let v = volume(index_volume(&[6, 6, 6]), Affine::identity());
    let out = spatial::rotate(&v, &[std::f64::consts::FRAC_PI_2, 0.0, 0.0], Interpolation::trilinear()).unwrap();
    // A quarter turn in the (1, 2) plane maps voxels onto voxels.
    let mut matched = 0;
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..6 {
                let x = out.array.get(0, &[i, j, k]);
                let candidates = [v.array.get(0, &[i, k, 5 - j]), v.array.get(0, &[i, 5 - k, j])];
                if candidates.iter().any(|c| (c - x).abs() < 1e-3) {
                    matched += 1;
                }
            }
        }
    }
    assert_eq!(matched, 216);
}

#[test]
fn resample_inverse_restores_geometry_exactly() {
    let mut rng = Rng::new(15);
    let v = volume(ramp(&[12, 10, 11]), oblique_affine(&mut rng));
    let steps: Vec<MetaVolume> = vec![
        spatial::spacing_to(&v, &[0.9, 1.7, 1.1], Interpolation::trilinear()).unwrap(),
        spatial::rotate(&v, &[0.2, 0.1, -0.3], Interpolation::trilinear()).unwrap(),
        spatial::zoom(&v, &[1.2, 0.8, 1.0], Interpolation::trilinear()).unwrap(),
    ];
    for s in steps {
        let back = invert_volume(s, None).unwrap();
        assert_eq!(back.spatial_dims(), v.spatial_dims());
        assert_eq!(back.affine, v.affine);
        assert!(back.applied.is_empty());
    }
}

#[test]
fn spacing_round_trip_is_close_in_the_interior() {
    let v = volume(ramp(&[16, 16, 16]), Affine::diag([2.0, 2.0, 2.0]));
    let up = spatial::spacing_to(&v, &[1.0, 1.0, 1.0], Interpolation::trilinear()).unwrap();
    let crop = spatial::crop_pad(&up, &[2, 2, 2], &[26, 26, 26], PaddingMode::Zeros).unwrap();
    let back = invert_volume(crop, None).unwrap();
    assert_eq!(back.spatial_dims(), v.spatial_dims());
    assert_eq!(back.affine, v.affine);
    for i in 2..13 {
        for j in 2..13 {
            for k in 2..13 {
                let d = (back.array.get(0, &[i, j, k]) - v.array.get(0, &[i, j, k])).abs();
                assert!(d <= 1e-2, "{d} at {:?}", [i, j, k]);
            }
        }
    }
}

#[test]
fn elastic_gate_and_identity() {
    let v = volume(ramp(&[10, 10, 10]), Affine::identity());
    let p = ElasticParams {
        sigma_range: (3.0, 5.0),
        magnitude_range: (0.0, 0.0),
        prob: 1.0,
        rotate_range: 0.0,
        scale_range: 0.0,
        interp: Interpolation::trilinear(),
    };
    let out = spatial::rand_elastic_3d(&v, &mut Rng::new(1), &p).unwrap();
    assert!(out.array.max_abs_diff(&v.array) < 1e-5);
    assert!(out.applied[0].do_transform);
    assert!(matches!(invert_volume(out, None), Err(Error::NotInvertible(_))));

    let off = ElasticParams { prob: 0.0, magnitude_range: (2.0, 3.0), ..p };
    let out = spatial::rand_elastic_3d(&v, &mut Rng::new(1), &off).unwrap();
    assert!(out.array.bitwise_eq(&v.array));
    assert!(!out.applied[0].do_transform);
    // A skipped record inverts as a no-op.
    assert!(invert_volume(out, None).unwrap().array.bitwise_eq(&v.array));
}

#[test]
fn elastic_consumes_ten_draws() {
    let p = ElasticParams {
        sigma_range: (3.0, 5.0),
        magnitude_range: (1.0, 2.0),
        prob: 0.5,
        rotate_range: 0.1,
        scale_range: 0.1,
        interp: Interpolation::trilinear(),
    };
    for seed in 0..20 {
        let mut a = Rng::new(seed);
        let _ = spatial::ElasticDraw::draw(&mut a, &p);
        let mut b = Rng::new(seed);
        for _ in 0..10 {
            b.next_u64();
        }
        assert_eq!(a.state(), b.state());
    }
}

#[test]
fn warp_with_integer_field_shifts() {
    let v = volume(index_volume(&[6, 6, 6]), Affine::identity());
    let zero = Tensor::zeros(vec![3, 6, 6, 6]).unwrap();
    let same = spatial::warp(&v, &zero, Interpolation::trilinear()).unwrap();
    assert!(same.array.bitwise_eq(&v.array));
    let shift = Tensor::from_fn(vec![3, 6, 6, 6], |c, _| if c == 1 { 1.0 } else { 0.0 }).unwrap();
    let out = spatial::warp(&v, &shift, Interpolation::new(InterpMode::Trilinear, PaddingMode::Zeros)).unwrap();
    assert_eq!(out.array.get(0, &[2, 3, 4]), v.array.get(0, &[2, 4, 4]));
    assert_eq!(out.array.get(0, &[2, 5, 4]), 0.0);
    assert!(matches!(invert_volume(out, None), Err(Error::NotInvertible(_))));
}

fn small_volume() -> impl Strategy<Value = MetaVolume> {
    (2usize..7, 2usize..7, 2usize..7, any::<u64>()).prop_map(|(a, b, c, seed)| {
        let mut rng = Rng::new(seed);
        volume(index_volume(&[a, b, c]), oblique_affine(&mut rng))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_twice_is_identity(v in small_volume(), axes in proptest::collection::vec(0usize..3, 0..4)) {
        let once = spatial::flip(&v, &axes).unwrap();
        let twice = spatial::flip(&once, &axes).unwrap();
        prop_assert!(twice.array.bitwise_eq(&v.array));
        prop_assert!(twice.affine.max_abs_diff(&v.affine) < 1e-9);
    }

    #[test]
    fn crop_pad_inverse_restores_overlap(
        v in small_volume(),
        start in proptest::collection::vec(-3i64..4, 3),
        size in proptest::collection::vec(1usize..9, 3),
    ) {
        let out = spatial::crop_pad(&v, &start, &size, PaddingMode::Zeros).unwrap();
        let back = invert_volume(out, None).unwrap();
        prop_assert_eq!(back.spatial_dims(), v.spatial_dims());
        prop_assert_eq!(back.affine, v.affine);
        let dims = v.spatial_dims().to_vec();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let p = [i as i64, j as i64, k as i64];
                    let kept = (0..3).all(|a| p[a] >= start[a] && p[a] < start[a] + size[a] as i64);
                    let want = if kept { v.array.get(0, &[i, j, k]) } else { 0.0 };
                    prop_assert_eq!(back.array.get(0, &[i, j, k]), want);
                }
            }
        }
    }

    #[test]
    fn orientation_round_trip(v in small_volume(), pick in 0usize..48) {
        let axes = [['R', 'L'], ['A', 'P'], ['S', 'I']];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[pick % 6];
        let signs = pick / 6;
        let codes: String = (0..3).map(|k| axes[perm[k]][(signs >> k) & 1]).collect();
        let out = spatial::orientation_to(&v, &codes).unwrap();
        let back = invert_volume(out, None).unwrap();
        prop_assert!(back.array.bitwise_eq(&v.array));
        prop_assert_eq!(back.affine, v.affine);
    }
}
