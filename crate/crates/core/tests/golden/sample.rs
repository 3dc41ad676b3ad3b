//! Fixture behind `sample.mvol`; shared by the core I/O tests and the
//! acceptance target.

use medvox::geometry::Affine;
use medvox::{MetaValue, MetaVolume, Tensor, TraceRecord};

pub fn golden_volume() -> MetaVolume {
    let t = Tensor::from_fn(vec![2, 3, 2, 2], |c, i| (c * 100 + i[0] * 10 + i[1] * 2 + i[2]) as f32 * 0.5 - 3.25).unwrap();
    let mut rows = [[0.0; 4]; 4];
    rows[0] = [0.0, -1.5, 0.0, 12.0];
    rows[1] = [2.0, 0.0, 0.0, -7.5];
    rows[2] = [0.0, 0.0, 0.75, 3.0];
    rows[3] = [0.0, 0.0, 0.0, 1.0];
    let mut v = MetaVolume::new(t, Affine(rows)).unwrap();
    v.meta.insert("modality".into(), MetaValue::Str("MR".into()));
    v.meta.insert("window".into(), MetaValue::List(vec![-1.0, 2.5]));
    v.meta.insert("echo".into(), MetaValue::Num(0.125));
    let rec = TraceRecord::new("flip", true, &v).with("axes", vec![0u64, 2]);
    v.push_trace(rec);
    v
}
