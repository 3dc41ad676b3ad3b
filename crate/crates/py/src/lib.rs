//! Python bindings. Arrays cross the boundary as flat `list[float]` in
//! C order plus a `shape` list (channel first).

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use engine::datasets::{load_volume, save_volume};
use engine::inference::{sliding_window_infer, BlendMode, WindowParams};
use engine::pipeline::{invert_volume, DataDict};
use engine::{metrics, mvol, nifti, Affine, Error, Item, MetaVolume, Rng, StubPredictor, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Stream(_) => PyIOError::new_err(e.to_string()),
        Error::MissingKey(_) => PyKeyError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Channel-first volume with a 4×4 voxel-to-world affine and a trace stack.
#[pyclass(name = "Volume", module = "medvox", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    pub inner: MetaVolume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, shape, affine = None))]
    fn new(data: Vec<f32>, shape: Vec<usize>, affine: Option<[[f64; 4]; 4]>) -> PyResult<Self> {
        let t = Tensor::new(shape, data).map_err(py_err)?;
        let a = affine.map(Affine).unwrap_or_else(Affine::identity);
        Ok(PyVolume {
            inner: MetaVolume::new(t, a).map_err(py_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.array.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.array.data().to_vec()
    }

    #[getter]
    fn affine(&self) -> [[f64; 4]; 4] {
        self.inner.affine.0
    }

    /// Number of records on the trace stack.
    #[getter]
    fn trace_len(&self) -> usize {
        self.inner.applied.len()
    }

    /// Trace stack as `{"applied": [...]}` JSON.
    fn trace_json(&self) -> PyResult<String> {
        serde_json::to_string(&serde_json::json!({ "applied": self.inner.applied }))
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_mvol<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &mvol::to_bytes(&self.inner).map_err(py_err)?))
    }

    #[staticmethod]
    fn from_mvol(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyVolume {
            inner: mvol::from_bytes(bytes).map_err(py_err)?,
        })
    }

    /// Loads `.mvol` or NIfTI-1 by extension.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVolume {
            inner: load_volume(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_volume(&self.inner, path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?}, trace_len={})", self.inner.array.shape(), self.inner.applied.len())
    }

    fn __eq__(&self, other: PyRef<'_, PyVolume>) -> bool {
        self.inner == other.inner
    }
}

/// Transform pipeline built from its JSON configuration.
#[pyclass(name = "Pipeline", module = "medvox")]
pub struct PyPipeline {
    inner: engine::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        Ok(PyPipeline {
            inner: engine::Pipeline::from_json(config_json).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[pyo3(signature = (volume, index = 0, epoch = 0))]
    fn apply(&self, volume: PyRef<'_, PyVolume>, index: u64, epoch: u64) -> PyResult<PyVolume> {
        let out = self.inner.apply_volume(volume.inner.clone(), index, epoch).map_err(py_err)?;
        Ok(PyVolume { inner: out })
    }

    /// Applies the pipeline to a `{key: Volume}` dict, returning a new dict.
    #[pyo3(signature = (items, index = 0, epoch = 0))]
    fn apply_dict<'py>(
        &self,
        py: Python<'py>,
        items: &Bound<'py, PyDict>,
        index: u64,
        epoch: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut d = DataDict::new();
        for (k, v) in items.iter() {
            let v: PyRef<'_, PyVolume> = v.extract()?;
            d.insert(k.extract::<String>()?, v.inner.clone());
        }
        let out = self.inner.apply(Item::Dict(d), index, epoch).map_err(py_err)?;
        let res = PyDict::new(py);
        for (k, v) in out.into_dict().map_err(py_err)? {
            res.set_item(k, PyVolume { inner: v })?;
        }
        Ok(res)
    }
}

/// Undoes the newest `depth` trace records (all when omitted).
#[pyfunction]
#[pyo3(signature = (volume, depth = None))]
fn invert(volume: PyRef<'_, PyVolume>, depth: Option<usize>) -> PyResult<PyVolume> {
    let depth = depth.unwrap_or(volume.inner.applied.len());
    Ok(PyVolume {
        inner: invert_volume(volume.inner.clone(), Some(depth)).map_err(py_err)?,
    })
}

#[pyfunction]
#[pyo3(name = "sliding_window_infer")]
#[pyo3(signature = (volume, roi, overlap = 0.25, blend = "constant", predictor = "identity", batch_size = 4))]
fn py_sliding_window_infer(
    volume: PyRef<'_, PyVolume>,
    roi: Vec<usize>,
    overlap: f64,
    blend: &str,
    predictor: &str,
    batch_size: usize,
) -> PyResult<PyVolume> {
    let blend: BlendMode = blend.parse().map_err(py_err)?;
    let predictor: StubPredictor = predictor.parse().map_err(py_err)?;
    let params = WindowParams {
        roi,
        overlap,
        blend,
        batch_size,
    };
    Ok(PyVolume {
        inner: sliding_window_infer(&volume.inner, &params, &predictor).map_err(py_err)?,
    })
}

/// Per-channel Dice of binary masks; `None` where a class is absent from both.
#[pyfunction]
fn dice_metric(pred: PyRef<'_, PyVolume>, truth: PyRef<'_, PyVolume>) -> PyResult<Vec<Option<f64>>> {
    metrics::dice_metric(&pred.inner.array, &truth.inner.array).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, smooth = metrics::DEFAULT_SMOOTH))]
fn dice_loss(pred: PyRef<'_, PyVolume>, truth: PyRef<'_, PyVolume>, smooth: f64) -> PyResult<f64> {
    metrics::dice_loss(&pred.inner.array, &truth.inner.array, smooth).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, alpha = 0.5, beta = 0.5, smooth = metrics::DEFAULT_SMOOTH))]
fn tversky_loss(pred: PyRef<'_, PyVolume>, truth: PyRef<'_, PyVolume>, alpha: f64, beta: f64, smooth: f64) -> PyResult<f64> {
    metrics::tversky_loss(&pred.inner.array, &truth.inner.array, alpha, beta, smooth).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, gamma = 2.0))]
fn focal_loss(pred: PyRef<'_, PyVolume>, truth: PyRef<'_, PyVolume>, gamma: f64) -> PyResult<f64> {
    metrics::focal_loss(&pred.inner.array, &truth.inner.array, gamma).map_err(py_err)
}

#[pyfunction]
fn bending_energy(field: PyRef<'_, PyVolume>) -> PyResult<f64> {
    metrics::bending_energy(&field.inner.array).map_err(py_err)
}

/// Synthetic `(image, label)` pair of noisy ellipsoids.
#[pyfunction]
#[pyo3(signature = (dims, objects = 2, noise = 0.05, seed = 0))]
fn synth(dims: Vec<usize>, objects: usize, noise: f64, seed: u64) -> PyResult<(PyVolume, PyVolume)> {
    let (i, l) = nifti::synth_volume(&mut Rng::new(seed), &dims, objects, noise).map_err(py_err)?;
    Ok((PyVolume { inner: i }, PyVolume { inner: l }))
}

/// Fixes (or with `None`, releases) the seed used by pipelines without one.
#[pyfunction]
#[pyo3(signature = (seed = None))]
fn set_determinism(seed: Option<u64>) {
    engine::pipeline::set_determinism(seed);
}

#[pymodule]
#[pyo3(name = "medvox")]
pub fn medvox_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(py_sliding_window_infer, m)?)?;
    m.add_function(wrap_pyfunction!(dice_metric, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tversky_loss, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bending_energy, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(set_determinism, m)?)?;
    Ok(())
}
