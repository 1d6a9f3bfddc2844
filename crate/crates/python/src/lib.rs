//! Python bindings: network configs, models, the strictness checker, the
//! equivariance-error metric, the synthetic dataset and gradient checks.
//! Arrays cross the boundary as `float32` NumPy arrays in `[B, C, H, W]`.

use numpy::ndarray::{ArrayD, IxDyn};
use numpy::{IntoPyArray, PyArrayDyn, PyReadonlyArrayDyn};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rotequiv::harness;
use rotequiv::layers::DownsampleMode;
use rotequiv::model::{Checkpoint, Model, NetworkConfig};
use rotequiv::{Rng, Tensor};

fn err(e: rotequiv::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_tensor(x: PyReadonlyArrayDyn<'_, f32>) -> PyResult<Tensor<f32>> {
    let view = x.as_array();
    Tensor::new(view.shape().to_vec(), view.iter().copied().collect()).map_err(err)
}

fn to_array<'py>(py: Python<'py>, t: &Tensor<f32>) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let a = ArrayD::from_shape_vec(IxDyn(t.shape()), t.data().to_vec()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(a.into_pyarray(py))
}

/// Network configuration; `Config()` is the default strict network.
#[pyclass(name = "Config", module = "pyrotequiv", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: NetworkConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (mode = "strict", orientations = 8))]
    fn new(mode: &str, orientations: usize) -> PyResult<Self> {
        let mode = match mode {
            "strict" => DownsampleMode::Strict,
            "approx" => DownsampleMode::Approx,
            m => return Err(PyValueError::new_err(format!("mode must be strict or approx, got {m:?}"))),
        };
        let inner = NetworkConfig::default().with_mode(mode).with_orientations(orientations);
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = NetworkConfig::from_toml_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Copy with dotted `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let inner = self.inner.with_overrides(&overrides).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    #[getter]
    fn orientations(&self) -> usize {
        self.inner.orientations
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(orientations={}, input_size={}, stages={})",
            self.inner.orientations,
            self.inner.input_size,
            self.inner.stages.len()
        )
    }
}

#[pyclass(name = "Model", module = "pyrotequiv", unsendable)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(NetworkConfig::default, |c| c.inner);
        Ok(PyModel {
            inner: Model::build(&cfg, &mut Rng::new(seed)).map_err(err)?,
        })
    }

    /// Load the model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path.as_ref()).map_err(err)?;
        let (inner, _) = harness::TrainState::from_checkpoint(&ck).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn tap_names(&self) -> Vec<String> {
        self.inner.tap_names()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// `(logits [B, K], angles [B] in radians)`.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArrayDyn<'py, f32>,
    ) -> PyResult<(Bound<'py, PyArrayDyn<f32>>, Vec<f64>)> {
        let p = self.inner.predict(&to_tensor(x)?).map_err(err)?;
        Ok((to_array(py, &p.logits)?, p.angle))
    }

    /// Feature maps at every tap, keyed by tap name.
    fn features<'py>(&self, py: Python<'py>, x: PyReadonlyArrayDyn<'py, f32>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (name, t) in self.inner.features(&to_tensor(x)?).map_err(err)? {
            d.set_item(name, to_array(py, &t)?)?;
        }
        Ok(d)
    }

    /// Stagewise equivariance error rows for grid angles (degrees).
    #[pyo3(signature = (x, angles = vec![90.0, 180.0, 270.0]))]
    fn equiv_error<'py>(&self, py: Python<'py>, x: PyReadonlyArrayDyn<'py, f32>, angles: Vec<f64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let report = harness::stagewise_error(&self.inner, &to_tensor(x)?, &angles).map_err(err)?;
        report
            .entries
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("stage", &e.stage)?;
                d.set_item("angle_deg", e.angle_deg)?;
                d.set_item("epsilon", e.epsilon)?;
                d.set_item("epsilon_normalized", e.epsilon_normalized)?;
                Ok(d)
            })
            .collect()
    }
}

/// Per-layer strictness rows and the overall verdict.
#[pyfunction]
#[pyo3(signature = (config, input_size = None))]
fn check_strictness<'py>(py: Python<'py>, config: &PyConfig, input_size: Option<usize>) -> PyResult<(bool, Vec<Bound<'py, PyDict>>)> {
    let r = harness::check_strictness(&config.inner, input_size.unwrap_or(config.inner.input_size)).map_err(err)?;
    let rows = r
        .layers
        .iter()
        .map(|l| {
            let d = PyDict::new(py);
            d.set_item("name", &l.name)?;
            d.set_item("padded_in", l.padded_in)?;
            d.set_item("k", l.k)?;
            d.set_item("s", l.s)?;
            d.set_item("residue", l.residue)?;
            d.set_item("pass", l.verdict == harness::Verdict::Pass)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((r.is_strict(), rows))
}

/// Stride-2 sampling points `(column, row)` before and after a quarter turn
/// of a `2n x 2n` image.
#[pyfunction]
fn sampling_mismatch(n: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let d = harness::sampling_mismatch_demo(n);
    (d.pre, d.post)
}

/// Synthetic shapes: dict with `train_images`, `train_labels`,
/// `train_thetas`, and the same for `test`.
#[pyfunction]
#[pyo3(signature = (n_train = 2000, n_test = 500, image_size = 64, seed = 0, noise_std = 0.05))]
fn gen_dataset<'py>(
    py: Python<'py>,
    n_train: usize,
    n_test: usize,
    image_size: usize,
    seed: u64,
    noise_std: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = harness::DatasetSpec {
        n_train,
        n_test,
        image_size,
        seed,
        noise_std,
        max_angle_deg: None,
    };
    let ds = harness::gen_dataset(&spec).map_err(err)?;
    let d = PyDict::new(py);
    for (name, s) in [("train", &ds.train), ("test", &ds.test)] {
        d.set_item(format!("{name}_images"), to_array(py, &s.images)?)?;
        d.set_item(format!("{name}_labels"), s.labels.clone())?;
        d.set_item(format!("{name}_thetas"), s.thetas.clone())?;
    }
    Ok(d)
}

/// `(op, max_rel_error, pass)` per checked operation.
#[pyfunction]
#[pyo3(signature = (op = "all", points = 10, seed = 0))]
fn gradcheck(op: &str, points: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    Ok(harness::run_gradcheck(op, points, seed)
        .map_err(err)?
        .into_iter()
        .map(|r| (r.op, r.max_rel_error, r.pass))
        .collect())
}

/// Clockwise quarter turns of the last two axes.
#[pyfunction]
fn rot90<'py>(py: Python<'py>, x: PyReadonlyArrayDyn<'py, f32>, k: i64) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let t = to_tensor(x)?;
    let nd = t.ndim();
    if nd < 2 {
        return Err(PyValueError::new_err("rot90 needs at least two axes"));
    }
    to_array(py, &t.rot90(k, (nd - 2, nd - 1)).map_err(err)?)
}

#[pymodule]
fn pyrotequiv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(check_strictness, m)?)?;
    m.add_function(wrap_pyfunction!(sampling_mismatch, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(rot90, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
