mod common;
#[path = "golden/sample.rs"]
mod sample;

use std::path::PathBuf;

use common::*;
use medvox::{mvol, nifti, Error, Rng};
use sample::golden_volume;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Byte-exact regression for the container layout. Set `MEDVOX_BLESS=1` to
/// regenerate after an intentional format change.
#[test]
fn mvol_golden_bytes() {
    let path = golden_path("sample.mvol");
    let bytes = mvol::to_bytes(&golden_volume()).unwrap();
    if std::env::var_os("MEDVOX_BLESS").is_some() || !path.exists() {
        std::fs::write(&path, &bytes).unwrap();
    }
    let stored = std::fs::read(&path).unwrap();
    assert_eq!(stored, bytes, "MVOL encoding drifted from {}", path.display());
    let back = mvol::from_bytes(&stored).unwrap();
    assert_eq!(back, golden_volume());
    assert_eq!(&stored[..8], b"MVOL\x01\x01\x04\x00");
    assert_eq!(u64::from_le_bytes(stored[8..16].try_into().unwrap()), 2);
}

#[test]
fn mvol_truncation_at_every_length_is_an_error() {
    let bytes = mvol::to_bytes(&golden_volume()).unwrap();
    for n in 0..bytes.len() {
        assert!(mvol::from_bytes(&bytes[..n]).is_err(), "prefix of {n} bytes decoded");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(mvol::from_bytes(&bad), Err(Error::BadMagic { .. })));
}

#[test]
fn nifti_round_trip_on_oblique_volumes() {
    let mut rng = Rng::new(31);
    let dir = tempfile::tempdir().unwrap();
    for k in 0..10 {
        let c = 1 + k % 3;
        let dims = vec![c, 2 + rng.below(6) as usize, 2 + rng.below(6) as usize, 1 + rng.below(6) as usize];
        let v = volume(random_tensor(&mut rng, dims), oblique_affine(&mut rng));
        let path = dir.path().join(format!("v{k}.nii"));
        nifti::save(&v, &path).unwrap();
        let back = nifti::load(&path).unwrap();
        assert!(back.array.bitwise_eq(&v.array));
        let err = back
            .affine
            .to_rows()
            .iter()
            .zip(v.affine.to_rows())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // The on-disk sform is f32.
        assert!(err < 1e-4, "affine error {err}");
    }
}

#[test]
fn nifti_and_mvol_agree_on_voxels() {
    let mut rng = Rng::new(32);
    let (img, _) = nifti::synth_volume(&mut rng, &[9, 8, 10], 2, 0.1).unwrap();
    let via_nifti = nifti::decode(&nifti::encode(&img).unwrap()).unwrap();
    let via_mvol = mvol::from_bytes(&mvol::to_bytes(&img).unwrap()).unwrap();
    assert!(via_nifti.array.bitwise_eq(&via_mvol.array));
    assert_eq!(via_mvol, img);
    assert!(max_abs(via_nifti.array.data(), img.array.data()) == 0.0);
}
