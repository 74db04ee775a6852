//! Python bindings for `clip_prior`.
//!
//! Arrays cross the boundary as nested lists; heavy work runs with the
//! interpreter detached.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clip_prior::oracles::{self, Rect, SynthSpec};
use clip_prior::{bundle_io, numerics, pipeline, pir, Error};

create_exception!(clip_prior_py, ClipPriorError, PyValueError);

fn to_py(e: Error) -> PyErr {
    ClipPriorError::new_err(format!("{}: {e}", e.code()))
}

fn rows<T: Copy + Into<f64>>(a: ndarray::ArrayView2<'_, T>) -> Vec<Vec<f64>> {
    a.outer_iter()
        .map(|r| r.iter().map(|&v| v.into()).collect())
        .collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(
        Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
            .expect("checked shape"),
    )
}

/// Parses a Rust-serialized value back into Python objects.
fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "PriorConfig", module = "clip_prior_py", from_py_object)]
#[derive(Clone, Default)]
pub struct PyPriorConfig {
    pub inner: clip_prior::PriorConfig,
}

#[pymethods]
impl PyPriorConfig {
    /// Keyword arguments override the defaults; unknown names are rejected.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner: clip_prior::PriorConfig = match kwargs {
            Some(kw) => {
                let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
                serde_json::from_str(&text)
                    .map_err(|e| ClipPriorError::new_err(format!("InvalidConfig: {e}")))?
            }
            None => Default::default(),
        };
        inner.validate().map_err(to_py)?;
        Ok(PyPriorConfig { inner })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "PriorConfig({})",
            serde_json::to_string(&self.inner).unwrap_or_default()
        )
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "FeatureBundle", module = "clip_prior_py")]
pub struct PyFeatureBundle {
    pub inner: bundle_io::FeatureBundle,
}

#[pymethods]
impl PyFeatureBundle {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let inner = py.detach(|| bundle_io::load_bundle(&path)).map_err(to_py)?;
        Ok(PyFeatureBundle { inner })
    }

    fn write(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        py.detach(|| bundle_io::write_bundle(&self.inner, &path))
            .map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn h(&self) -> usize {
        self.inner.grid.h
    }

    #[getter]
    fn w(&self) -> usize {
        self.inner.grid.w
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.inner.n_blocks()
    }

    #[getter]
    fn shots(&self) -> usize {
        self.inner.shots()
    }

    #[getter]
    fn class_name(&self) -> String {
        self.inner.class_name.clone()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.inner.image_height, self.inner.image_width)
    }

    /// `hw x d` query patch features.
    fn query_features(&self) -> Vec<Vec<f64>> {
        rows(self.inner.query_features.view())
    }

    fn support_mask(&self, shot: usize) -> PyResult<Vec<Vec<u8>>> {
        let m = self
            .inner
            .support_masks
            .get(shot)
            .ok_or_else(|| PyValueError::new_err(format!("shot {shot} out of range")))?;
        Ok(m.outer_iter().map(|r| r.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureBundle(h={}, w={}, d={}, n={}, K={}, class_name={:?})",
            self.inner.grid.h,
            self.inner.grid.w,
            self.inner.d(),
            self.inner.n_blocks(),
            self.inner.shots(),
            self.inner.class_name
        )
    }
}

#[pyclass(name = "PriorStack", module = "clip_prior_py")]
pub struct PyPriorStack {
    pub inner: bundle_io::PriorStack,
}

#[pymethods]
impl PyPriorStack {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        bundle_io::load_prior_stack(&path)
            .map(|inner| PyPriorStack { inner })
            .map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        bundle_io::write_prior_stack(&self.inner, &path).map_err(to_py)
    }

    /// `(channels, h, w)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.channels.dim()
    }

    #[getter]
    fn channel_names(&self) -> Vec<String> {
        self.inner.metadata.channel_names.clone()
    }

    #[getter]
    fn omitted(&self) -> Vec<String> {
        self.inner.metadata.omitted.clone()
    }

    fn channel(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        if index >= self.inner.channel_count() {
            return Err(PyValueError::new_err(format!(
                "channel {index} out of range"
            )));
        }
        Ok(rows(self.inner.channel(index)))
    }

    fn render(&self, index: usize, path: PathBuf) -> PyResult<()> {
        let (_, map) = pipeline::stack_maps(&self.inner)
            .into_iter()
            .nth(index)
            .ok_or_else(|| PyValueError::new_err(format!("channel {index} out of range")))?;
        pipeline::render_heatmap(&map, &path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "PriorStack(shape={:?}, channels={:?})",
            self.shape(),
            self.inner.metadata.channel_names
        )
    }
}

#[pyfunction]
#[pyo3(signature = (h, w, d, n, k, seed=0, patch=4, planted=None))]
#[allow(clippy::too_many_arguments)]
pub fn synth_bundle(
    h: usize,
    w: usize,
    d: usize,
    n: usize,
    k: usize,
    seed: u64,
    patch: usize,
    planted: Option<(usize, usize, usize, usize)>,
) -> PyResult<PyFeatureBundle> {
    if h == 0 || w == 0 || d < 2 || n == 0 || k == 0 || patch == 0 {
        return Err(PyValueError::new_err(
            "synth needs h, w, n, k, patch >= 1 and d >= 2",
        ));
    }
    let mut spec = SynthSpec::new(h, w, d, n, k, seed).with_patch(patch);
    if let Some((r0, c0, r1, c1)) = planted {
        if r0 >= r1 || c0 >= c1 || r1 > h || c1 > w {
            return Err(PyValueError::new_err(
                "planted region must be non-empty and inside the grid",
            ));
        }
        spec = spec.planted(Rect::new(r0, c0, r1, c1));
    }
    Ok(PyFeatureBundle {
        inner: oracles::synth_bundle(&spec),
    })
}

#[pyfunction]
#[pyo3(signature = (bundle, config=None))]
pub fn generate_prior_stack(
    py: Python<'_>,
    bundle: &PyFeatureBundle,
    config: Option<PyPriorConfig>,
) -> PyResult<PyPriorStack> {
    let config = config.unwrap_or_default().inner;
    py.detach(|| pipeline::generate_prior_stack(&bundle.inner, &config))
        .map(|inner| PyPriorStack { inner })
        .map_err(to_py)
}

/// Returns the batch summary as a dict.
#[pyfunction]
#[pyo3(signature = (inputs, output_dir, config=None, parallelism=1))]
pub fn run_batch<'py>(
    py: Python<'py>,
    inputs: Vec<PathBuf>,
    output_dir: PathBuf,
    config: Option<PyPriorConfig>,
    parallelism: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config = config.unwrap_or_default().inner;
    let summary = py
        .detach(|| pipeline::run_batch(&inputs, &config, &output_dir, parallelism))
        .map_err(to_py)?;
    json_to_py(py, &summary)
}

#[pyfunction]
pub fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(to_py(Error::DimMismatch(format!(
            "{} vs {}",
            a.len(),
            b.len()
        ))));
    }
    Ok(numerics::cosine(
        Array1::from(a).view(),
        Array1::from(b).view(),
    ))
}

#[pyfunction]
pub fn softmax(z: Vec<f64>) -> Vec<f64> {
    numerics::softmax(&z)
}

/// Returns `(matrix, iterations, residual)`.
#[pyfunction]
#[pyo3(signature = (matrix, max_iters=100, tol=1e-6))]
pub fn sinkhorn(
    matrix: Vec<Vec<f64>>,
    max_iters: usize,
    tol: f64,
) -> PyResult<(Vec<Vec<f64>>, usize, f64)> {
    let a = from_rows(matrix)?;
    let b = pir::sinkhorn_balance(a.view(), max_iters, tol).map_err(to_py)?;
    Ok((rows(b.matrix.view()), b.iterations, b.residual))
}

#[pymodule]
pub fn clip_prior_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ClipPriorError", m.py().get_type::<ClipPriorError>())?;
    m.add_class::<PyPriorConfig>()?;
    m.add_class::<PyFeatureBundle>()?;
    m.add_class::<PyPriorStack>()?;
    m.add_function(wrap_pyfunction!(synth_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(generate_prior_stack, m)?)?;
    m.add_function(wrap_pyfunction!(run_batch, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    Ok(())
}
