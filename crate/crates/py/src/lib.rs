//! Python bindings: volumes and masks, the GMM, skeleton graphs, the volume
//! regression, phantoms and whole pipeline runs.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use bronco::bundle_tree::select_axis;
use bronco::components::count_components;
use bronco::gmm::{fit_gmm, GmmParams};
use bronco::morphology::{dilate, erode, StructuringElement};
use bronco::phantom::{generate, ChestParams, PhantomSpec};
use bronco::pipeline::{run_pipeline as run, PipelineConfig};
use bronco::skeleton::{build_graph, skeletonize};
use bronco::volume_qa::{self, qa_verdict};
use bronco::{BinaryMask, BroncoError, Connectivity, Geometry, Grid, ScalarVolume};

fn err(e: BroncoError) -> PyErr {
    match e {
        BroncoError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn geometry(dims: [usize; 3], spacing: Option<[f64; 3]>) -> PyResult<Geometry> {
    Geometry::new(dims, spacing.unwrap_or([1.0; 3]), [0.0; 3]).map_err(err)
}

/// Scalar volume, x fastest.
#[pyclass(name = "Volume", module = "bronco_py")]
struct PyVolume {
    inner: ScalarVolume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, values, spacing=None))]
    fn new(dims: [usize; 3], values: Vec<f64>, spacing: Option<[f64; 3]>) -> PyResult<Self> {
        let inner = Grid::from_vec(geometry(dims, spacing)?, values).map_err(err)?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVolume {
            inner: bronco::io::load_volume(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        bronco::io::save_volume(&self.inner, path, bronco::io::ScalarType::F32).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.geometry().spacing
    }

    fn values(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f64> {
        let [nx, ny, nz] = self.inner.dims();
        if x >= nx || y >= ny || z >= nz {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(*self.inner.get(x, y, z))
    }

    /// Voxels strictly below `level`.
    fn below(&self, level: f64) -> PyMask {
        PyMask {
            inner: self.inner.map(|&v| v < level),
        }
    }

    /// Voxels at or above `level`.
    fn above(&self, level: f64) -> PyMask {
        PyMask {
            inner: self.inner.map(|&v| v >= level),
        }
    }

    /// Intensities of the voxels inside `mask`.
    fn masked(&self, mask: &PyMask) -> PyResult<Vec<f64>> {
        bronco::gmm::masked_intensities(&self.inner, &mask.inner).map_err(err)
    }
}

#[pyclass(name = "Mask", module = "bronco_py")]
struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    #[new]
    #[pyo3(signature = (dims, values, spacing=None))]
    fn new(dims: [usize; 3], values: Vec<bool>, spacing: Option<[f64; 3]>) -> PyResult<Self> {
        let inner = Grid::from_vec(geometry(dims, spacing)?, values).map_err(err)?;
        Ok(PyMask { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyMask {
            inner: bronco::io::load_mask(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        bronco::io::save_mask(&self.inner, path).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn volume_ml(&self) -> f64 {
        volume_qa::mask_volume(&self.inner)
    }

    fn values(&self) -> Vec<bool> {
        self.inner.data().to_vec()
    }

    fn dilate(&self, radius: usize) -> PyResult<Self> {
        Ok(PyMask {
            inner: dilate(&self.inner, &StructuringElement::ball(radius)).map_err(err)?,
        })
    }

    fn erode(&self, radius: usize) -> PyResult<Self> {
        Ok(PyMask {
            inner: erode(&self.inner, &StructuringElement::ball(radius)).map_err(err)?,
        })
    }

    /// Number of 26-connected components.
    fn components(&self) -> usize {
        count_components(&self.inner, Connectivity::TwentySix)
    }

    /// Skeleton graph as JSON with `nodes` and `edges`.
    fn skeleton_graph(&self) -> PyResult<String> {
        let skel = skeletonize(&self.inner).map_err(err)?;
        build_graph(&skel).to_json().map_err(err)
    }
}

#[pyclass(name = "GmmModel", module = "bronco_py", get_all)]
struct PyGmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    log_likelihood: f64,
    converged: bool,
    iterations: usize,
}

#[pyfunction]
#[pyo3(signature = (values, k=3, seed=0))]
fn fit_gmm_1d(values: Vec<f64>, k: usize, seed: u64) -> PyResult<PyGmm> {
    let m = fit_gmm(
        &values,
        &GmmParams {
            k,
            seed,
            ..Default::default()
        },
    )
    .map_err(err)?;
    Ok(PyGmm {
        weights: m.weights,
        means: m.means,
        variances: m.variances,
        log_likelihood: m.log_likelihood,
        converged: m.converged,
        iterations: m.iterations,
    })
}

#[pyclass(name = "RegressionModel", module = "bronco_py")]
struct PyRegression {
    inner: volume_qa::RegressionModel,
}

#[pymethods]
impl PyRegression {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyRegression {
            inner: volume_qa::RegressionModel::from_json(s).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn slope(&self) -> f64 {
        self.inner.slope
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    #[getter]
    fn residual_std(&self) -> f64 {
        self.inner.residual_std
    }

    /// `(estimate, low, high)`.
    #[pyo3(signature = (x, level=0.95))]
    fn predict_interval(&self, x: f64, level: f64) -> PyResult<(f64, f64, f64)> {
        volume_qa::predict_with_interval(&self.inner, x, level).map_err(err)
    }

    fn chauvenet_flag(&self, x: f64, y: f64) -> bool {
        volume_qa::chauvenet_flag(&self.inner, x, y)
    }

    /// `ok`, `suspected_oversegmentation` or `suspected_undersegmentation`.
    #[pyo3(signature = (lung_ml, bundle_ml, level=0.95))]
    fn verdict(&self, lung_ml: f64, bundle_ml: f64, level: f64) -> PyResult<&'static str> {
        Ok(qa_verdict(&self.inner, lung_ml, bundle_ml, level)
            .map_err(err)?
            .verdict
            .as_str())
    }
}

#[pyfunction]
fn fit_regression(pairs: Vec<(f64, f64)>) -> PyResult<PyRegression> {
    Ok(PyRegression {
        inner: volume_qa::fit_regression(&pairs).map_err(err)?,
    })
}

/// Name of the base plane whose normal is closest to `u`.
#[pyfunction]
fn main_axis(u: [f64; 3]) -> String {
    format!("{:?}", select_axis(u)).to_lowercase()
}

/// Synthetic chest: `(ct, lung, airway_lumen)`.
#[pyfunction]
#[pyo3(signature = (dims=64, scale=1.0, seed=0, blob=false, noise=20.0))]
fn chest_phantom(dims: usize, scale: f64, seed: u64, blob: bool, noise: f64) -> PyResult<(PyVolume, PyMask, PyMask)> {
    let spec = PhantomSpec::chest(&ChestParams {
        dims: [dims; 3],
        scale,
        seed,
        blob,
        noise_std: noise,
        ..Default::default()
    })
    .map_err(err)?;
    let p = generate(&spec).map_err(err)?;
    Ok((
        PyVolume { inner: p.ct },
        PyMask { inner: p.lung },
        PyMask {
            inner: p.truth.airway_lumen,
        },
    ))
}

/// Run the pipeline from a JSON config; returns `(exit_code, report_json)`.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_json: &str) -> PyResult<(i32, String)> {
    let cfg = PipelineConfig::from_json(config_json).map_err(err)?;
    let report = py.detach(|| run(&cfg)).map_err(err)?;
    Ok((report.exit_code(), report.to_json().map_err(err)?))
}

#[pymodule]
fn bronco_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyGmm>()?;
    m.add_class::<PyRegression>()?;
    m.add_function(wrap_pyfunction!(fit_gmm_1d, m)?)?;
    m.add_function(wrap_pyfunction!(fit_regression, m)?)?;
    m.add_function(wrap_pyfunction!(main_axis, m)?)?;
    m.add_function(wrap_pyfunction!(chest_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
