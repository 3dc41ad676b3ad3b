mod common;

use std::cell::RefCell;
use std::rc::Rc;

use common::*;
use medvox::geometry::Affine;
use medvox::inference::{
    axis_starts, evaluate, plan_windows, sliding_window_infer, BlendMode, Engine, EngineState, EventKind,
    WindowParams,
};
use medvox::pipeline::DataDict;
use medvox::{Error, MetaVolume, Pipeline, Result, Rng, StubPredictor, Tensor};

fn params(roi: &[usize], overlap: f64, blend: BlendMode, batch_size: usize) -> WindowParams {
    WindowParams {
        roi: roi.to_vec(),
        overlap,
        blend,
        batch_size,
    }
}

#[test]
fn identity_reconstruction() {
    let mut rng = Rng::new(11);
    let v = volume(random_tensor(&mut rng, vec![2, 13, 10, 9]), Affine::identity());
    for overlap in [0.0, 0.25, 0.5, 0.75] {
        for blend in [BlendMode::Constant, BlendMode::Gaussian] {
            for roi in [[4, 4, 4], [13, 5, 3], [6, 10, 9]] {
                let out = sliding_window_infer(&v, &params(&roi, overlap, blend, 3), &StubPredictor::Identity).unwrap();
                assert_eq!(out.array.shape(), v.array.shape());
                let err = out.array.max_abs_diff(&v.array);
                assert!(err <= 1e-5, "overlap {overlap} {blend:?} roi {roi:?}: {err}");
                assert!(!out.meta.contains_key("sys.sliding_window_padded"));
            }
        }
    }
}

#[test]
fn small_images_are_padded_and_cropped_back() {
    let mut rng = Rng::new(12);
    let v = volume(random_tensor(&mut rng, vec![1, 5, 9, 3]), Affine::identity());
    for blend in [BlendMode::Constant, BlendMode::Gaussian] {
        let out = sliding_window_infer(&v, &params(&[8, 4, 6], 0.5, blend, 2), &StubPredictor::Identity).unwrap();
        assert_eq!(out.array.shape(), v.array.shape());
        assert!(out.array.max_abs_diff(&v.array) <= 1e-5);
        assert!(out.meta.contains_key("sys.sliding_window_padded"));
    }
}

#[test]
fn window_plans_cover_every_voxel() {
    let mut rng = Rng::new(13);
    for _ in 0..200 {
        let dims: Vec<usize> = (0..3).map(|_| 1 + rng.below(20) as usize).collect();
        let roi: Vec<usize> = dims.iter().map(|&d| 1 + rng.below(d as u64) as usize).collect();
        let overlap = rng.uniform_range(0.0, 0.95);
        let plan = plan_windows(&dims, &roi, overlap).unwrap();
        for a in 0..3 {
            let s = axis_starts(dims[a], roi[a], overlap);
            assert_eq!(s[0], 0);
            assert_eq!(*s.last().unwrap(), dims[a] - roi[a]);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            let mut covered = vec![false; dims[a]];
            for &st in &s {
                covered[st..st + roi[a]].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c), "dims {dims:?} roi {roi:?} overlap {overlap}");
        }
        let expected: usize = (0..3).map(|a| axis_starts(dims[a], roi[a], overlap).len()).product();
        assert_eq!(plan.origins.len(), expected);
    }
    assert!(plan_windows(&[4, 4], &[2, 2], 1.0).is_err());
    assert!(plan_windows(&[4, 4], &[0, 2], 0.5).is_err());
}

#[test]
fn constant_predictor_gives_constant_output() {
    let v = volume(Tensor::zeros(vec![1, 11, 7, 6]).unwrap(), Affine::identity());
    let constant = |ws: &[Tensor]| -> Result<Vec<Tensor>> {
        ws.iter().map(|w| Tensor::filled(w.shape().to_vec(), 3.0)).collect()
    };
    let out = sliding_window_infer(&v, &params(&[4, 4, 4], 0.5, BlendMode::Gaussian, 5), &constant).unwrap();
    assert!(out.array.data().iter().all(|&x| (x - 3.0).abs() < 1e-6));
}

#[test]
fn softmax_outputs_stay_normalised() {
    let mut rng = Rng::new(14);
    let v = volume(random_tensor(&mut rng, vec![1, 12, 9, 10]), Affine::identity());
    let softmax = |ws: &[Tensor]| -> Result<Vec<Tensor>> {
        ws.iter()
            .map(|w| {
                let mut shape = w.shape().to_vec();
                shape[0] = 3;
                Tensor::from_fn(shape, |c, idx| {
                    let x = w.get(0, idx) as f64 * 4.0;
                    let logits = [x, -x, 0.5 * x];
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    (logits[c].exp() / z) as f32
                })
            })
            .collect()
    };
    for blend in [BlendMode::Constant, BlendMode::Gaussian] {
        let out = sliding_window_infer(&v, &params(&[5, 4, 6], 0.6, blend, 4), &softmax).unwrap();
        assert_eq!(out.channels(), 3);
        for i in 0..out.array.spatial_len() {
            let s: f32 = (0..3).map(|c| out.array.channel(c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn batch_size_does_not_change_output() {
    let mut rng = Rng::new(15);
    let v = volume(random_tensor(&mut rng, vec![1, 10, 10, 10]), Affine::identity());
    let blur = StubPredictor::BlurThreshold { sigma: 1.0, threshold: 0.5 };
    let one = sliding_window_infer(&v, &params(&[6, 6, 6], 0.5, BlendMode::Gaussian, 1), &blur).unwrap();
    for b in [2, 7, 100] {
        let other = sliding_window_infer(&v, &params(&[6, 6, 6], 0.5, BlendMode::Gaussian, b), &blur).unwrap();
        assert!(other.array.bitwise_eq(&one.array));
    }
}

#[test]
fn predictor_contract_violations() {
    let v = volume(Tensor::zeros(vec![1, 6, 6, 6]).unwrap(), Affine::identity());
    let p = params(&[4, 4, 4], 0.5, BlendMode::Constant, 2);
    let short = |ws: &[Tensor]| -> Result<Vec<Tensor>> { Ok(ws[..1].to_vec()) };
    assert!(matches!(sliding_window_infer(&v, &p, &short), Err(Error::Predictor(_))));
    let wrong = |ws: &[Tensor]| -> Result<Vec<Tensor>> {
        ws.iter().map(|_| Tensor::zeros(vec![1, 2, 2, 2])).collect()
    };
    assert!(matches!(sliding_window_infer(&v, &p, &wrong), Err(Error::Predictor(_))));
    assert!(sliding_window_infer(&v, &params(&[4, 4], 0.5, BlendMode::Constant, 1), &StubPredictor::Identity).is_err());
    assert!(sliding_window_infer(&v, &params(&[4, 4, 4], 0.5, BlendMode::Constant, 0), &StubPredictor::Identity).is_err());
}

type Log = Rc<RefCell<Vec<EventKind>>>;

fn recorder(log: &Log) -> Rc<dyn medvox::inference::Handler<u32>> {
    let log = log.clone();
    Rc::new(move |e: EventKind, _: &mut EngineState<u32>| log.borrow_mut().push(e))
}

#[test]
fn engine_fires_each_attachment() {
    let log: Log = Rc::default();
    let mut engine = Engine::new();
    let h = recorder(&log);
    engine.attach(h.clone());
    engine.attach(h);
    let state = engine.run(&[1u32, 2], |_, x| Ok(*x * 10), 1).unwrap();
    assert_eq!(state.output, Some(20));
    assert_eq!(state.iteration, 2);
    let log = log.borrow();
    // started, epoch start, 2 × (iter start, iter done), epoch done, completed; each twice.
    assert_eq!(log.len(), 16);
    assert_eq!(&log[..2], &[EventKind::Started, EventKind::Started]);
    assert_eq!(log.iter().filter(|&&e| e == EventKind::IterationCompleted).count(), 4);
}

#[test]
fn engine_exception_paths() {
    let fail = |_: &EngineState<u32>, x: &u32| -> Result<u32> {
        if *x == 2 {
            Err(Error::Predictor("boom".into()))
        } else {
            Ok(*x)
        }
    };

    let log: Log = Rc::default();
    let mut engine = Engine::new();
    engine.attach(recorder(&log));
    assert!(matches!(engine.run(&[1u32, 2, 3], fail, 1), Err(Error::Predictor(_))));
    let log_v = log.borrow().clone();
    assert_eq!(*log_v.last().unwrap(), EventKind::ExceptionRaised);
    assert!(!log_v.contains(&EventKind::Completed));

    let seen = Rc::new(RefCell::new(Vec::new()));
    let s = seen.clone();
    let mut forgiving = Engine::new();
    forgiving.attach(Rc::new(move |e: EventKind, st: &mut EngineState<u32>| {
        if e == EventKind::ExceptionRaised {
            s.borrow_mut().push(st.error.clone().unwrap());
            st.exception_handled = true;
        }
    }));
    let state = forgiving.run(&[1u32, 2, 3], fail, 2).unwrap();
    assert_eq!(state.output, Some(3));
    assert_eq!(state.iteration, 6);
    assert_eq!(seen.borrow().len(), 2);
    assert!(seen.borrow()[0].contains("boom"));
}

fn mask(on: &[[usize; 3]]) -> Tensor {
    let mut t = Tensor::zeros(vec![1, 4, 4, 4]).unwrap();
    for p in on {
        t.set(0, p, 1.0);
    }
    t
}

fn item(image: Tensor, label: Tensor) -> DataDict {
    let mut d = DataDict::new();
    d.insert("image".into(), MetaVolume::with_identity(image));
    d.insert("label".into(), MetaVolume::with_identity(label));
    d
}

#[test]
fn evaluate_hand_computed_mean() {
    let a = mask(&[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
    let b = mask(&[[0, 0, 2], [0, 0, 3], [1, 0, 0], [1, 0, 1]]);
    let empty = mask(&[]);
    let items = vec![item(a.clone(), b.clone()), item(b.clone(), b.clone()), item(empty.clone(), empty)];
    let p = params(&[2, 2, 2], 0.5, BlendMode::Constant, 4);
    let pipeline = Pipeline::new(vec![], Some(0));
    let mean = evaluate(&items, &pipeline, &StubPredictor::Identity, &p).unwrap();
    // Dice 0.5 and 1.0; the empty pair is undefined and skipped.
    assert!((mean.unwrap() - 0.75).abs() < 1e-12);

    let oracle = evaluate(&items[1..2], &pipeline, &StubPredictor::Identity, &p).unwrap();
    assert_eq!(oracle, Some(1.0));
    let zero = |ws: &[Tensor]| -> Result<Vec<Tensor>> { ws.iter().map(|w| Tensor::zeros(w.shape().to_vec())).collect() };
    assert_eq!(evaluate(&items[..2], &pipeline, &zero, &p).unwrap(), Some(0.0));
    assert_eq!(evaluate(&items[2..], &pipeline, &zero, &p).unwrap(), None);

    let mut missing = items[0].clone();
    missing.shift_remove("label");
    assert!(evaluate(&[missing], &pipeline, &StubPredictor::Identity, &p).is_err());
}
