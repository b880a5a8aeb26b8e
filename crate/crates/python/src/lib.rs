//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sara_core::attention::{
    exact_softmax_attention, kernel_attention_linear_with, kernel_attention_quadratic_with, AttentionLayerParams,
    EngineOptions,
};
use sara_core::feature_maps::{apply_feature_map, sara_from_theorem, FeatureKind, FeatureMapSpec, SaraParamsMeta};
use sara_core::navdemo::{self, KernelSpec, SceneConfig};
use sara_core::numerics::{mat1, DenseMatrix, DenseVector, SeededRng};
use sara_core::theory::{self, TheoremSetting};
use sara_core::uptrain::DistillationConfig;
use sara_core::SaraError;

fn py_err(e: SaraError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(values: Vec<f64>) -> PyResult<DenseVector> {
    DenseVector::new(values).map_err(py_err)
}

fn kind(name: &str) -> PyResult<FeatureKind> {
    serde_json::from_value(serde_json::Value::String(name.to_lowercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown feature kind {name:?}; expected relu, exp or square")))
}

/// Dense row-major f64 matrix.
#[pyclass(name = "Matrix", module = "sara_attention", skip_from_py_object)]
#[derive(Clone)]
struct PyMatrix(DenseMatrix);

#[pymethods]
impl PyMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        DenseMatrix::from_rows(&rows).map(PyMatrix).map_err(py_err)
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        PyMatrix(DenseMatrix::identity(n))
    }

    #[staticmethod]
    #[pyo3(signature = (rows, cols, seed, label = "matrix"))]
    fn gaussian(rows: usize, cols: usize, seed: u64, label: &str) -> PyResult<Self> {
        let mut rng = SeededRng::new(seed).substream(label);
        sara_core::numerics::gaussian_matrix(&mut rng, rows, cols).map(PyMatrix).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        mat1::load(path).map(PyMatrix).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mat1::save(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    fn tolist(&self) -> Vec<Vec<f64>> {
        self.0.to_rows()
    }

    fn transpose(&self) -> Self {
        PyMatrix(self.0.transpose())
    }

    fn matmul(&self, other: &PyMatrix) -> PyResult<Self> {
        self.0.matmul(&other.0).map(PyMatrix).map_err(py_err)
    }

    fn normalize_rows(&self, radius: f64) -> PyResult<Self> {
        sara_core::numerics::normalize_rows_to_radius(&self.0, radius).map(PyMatrix).map_err(py_err)
    }

    fn max_abs_diff(&self, other: &PyMatrix) -> PyResult<f64> {
        self.0.max_abs_diff(&other.0).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.0.shape();
        format!("Matrix({r}x{c})")
    }
}

/// Learnable SARA parameters `(v, G_Q, G_K)`.
#[pyclass(name = "SaraParams", module = "sara_attention", skip_from_py_object)]
#[derive(Clone)]
struct PySaraParams(sara_core::feature_maps::SaraParams);

#[pymethods]
impl PySaraParams {
    #[new]
    fn new(v: Vec<f64>, g_q: &PyMatrix, g_k: &PyMatrix) -> PyResult<Self> {
        sara_core::feature_maps::SaraParams::new(vector(v)?, g_q.0.clone(), g_k.0.clone())
            .map(PySaraParams)
            .map_err(py_err)
    }

    /// Closed-form parameters reproducing softmax attention of `(w_q, w_k)`
    /// in expectation, from Gaussian draws `g` (m×d_qk) and `a < 0`.
    #[staticmethod]
    fn from_theorem(g: &PyMatrix, w_q: &PyMatrix, w_k: &PyMatrix, a: f64) -> PyResult<Self> {
        sara_from_theorem(&g.0, &w_q.0, &w_k.0, a).map(PySaraParams).map_err(py_err)
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        sara_core::feature_maps::SaraParams::load(dir).map(|(p, _)| PySaraParams(p)).map_err(py_err)
    }

    #[pyo3(signature = (dir, f, a_if_constructed = None))]
    fn save(&self, dir: &str, f: &str, a_if_constructed: Option<f64>) -> PyResult<()> {
        let meta = SaraParamsMeta { m: self.0.m(), d: self.0.d(), f: kind(f)?, a_if_constructed };
        self.0.save(dir, &meta).map_err(py_err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.0.v.as_slice().to_vec()
    }

    #[getter]
    fn g_q(&self) -> PyMatrix {
        PyMatrix(self.0.g_q.clone())
    }

    #[getter]
    fn g_k(&self) -> PyMatrix {
        PyMatrix(self.0.g_k.clone())
    }

    /// Query and key feature maps sharing these parameters.
    fn feature_maps(&self, f: &str) -> PyResult<(PyFeatureMap, PyFeatureMap)> {
        let (q, k) = FeatureMapSpec::sara_pair(kind(f)?, self.0.clone());
        Ok((PyFeatureMap(q), PyFeatureMap(k)))
    }
}

#[pyclass(name = "FeatureMap", module = "sara_attention", skip_from_py_object)]
#[derive(Clone)]
struct PyFeatureMap(FeatureMapSpec);

#[pymethods]
impl PyFeatureMap {
    #[staticmethod]
    fn identity(dim: usize) -> Self {
        PyFeatureMap(FeatureMapSpec::Identity { dim })
    }

    #[staticmethod]
    fn elementwise(f: &str, dim: usize) -> PyResult<Self> {
        Ok(PyFeatureMap(FeatureMapSpec::Elementwise { f: kind(f)?, dim }))
    }

    #[staticmethod]
    fn randomized(f: &str, projection: &PyMatrix) -> PyResult<Self> {
        Ok(PyFeatureMap(FeatureMapSpec::Randomized { f: kind(f)?, projection: projection.0.clone() }))
    }

    #[staticmethod]
    fn positive_rf(projection: &PyMatrix) -> Self {
        PyFeatureMap(FeatureMapSpec::PositiveRf { projection: projection.0.clone() })
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }

    fn apply(&self, z: &PyMatrix) -> PyResult<PyMatrix> {
        apply_feature_map(&self.0, &z.0).map(PyMatrix).map_err(py_err)
    }
}

#[pyclass(name = "AttentionOutput", module = "sara_attention", get_all)]
struct PyAttentionOutput {
    values: PyMatrix,
    scores: Option<PyMatrix>,
    denominators: Vec<f64>,
    flops: u64,
}

impl From<sara_core::attention::AttentionOutput> for PyAttentionOutput {
    fn from(o: sara_core::attention::AttentionOutput) -> Self {
        PyAttentionOutput {
            values: PyMatrix(o.values),
            scores: o.scores.map(PyMatrix),
            denominators: o.denominators.into_vec(),
            flops: o.flops.total(),
        }
    }
}

#[pyfunction]
fn softmax_attention(q: &PyMatrix, k: &PyMatrix, v: &PyMatrix) -> PyResult<PyAttentionOutput> {
    exact_softmax_attention(&q.0, &k.0, &v.0).map(Into::into).map_err(py_err)
}

/// Kernel attention through the `"linear"` or `"quadratic"` engine.
#[pyfunction]
#[pyo3(signature = (phi_q, phi_k, xq, xk, v, engine = "linear", denom_stabilizer = 0.0, reconstruct_scores = false))]
#[allow(clippy::too_many_arguments)]
fn kernel_attention(
    phi_q: &PyFeatureMap,
    phi_k: &PyFeatureMap,
    xq: &PyMatrix,
    xk: &PyMatrix,
    v: &PyMatrix,
    engine: &str,
    denom_stabilizer: f64,
    reconstruct_scores: bool,
) -> PyResult<PyAttentionOutput> {
    let opts = EngineOptions { denom_stabilizer, reconstruct_scores, parallel: false };
    let out = match engine {
        "linear" => kernel_attention_linear_with(&phi_q.0, &phi_k.0, &xq.0, &xk.0, &v.0, opts),
        "quadratic" => kernel_attention_quadratic_with(&phi_q.0, &phi_k.0, &xq.0, &xk.0, &v.0, opts),
        other => return Err(PyValueError::new_err(format!("unknown engine {other:?}"))),
    };
    out.map(Into::into).map_err(py_err)
}

#[pyfunction]
fn softmax_kernel(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    theory::softmax_kernel(&vector(x)?, &vector(y)?).map_err(py_err)
}

/// One draw of the normalized estimate of `exp(xᵀy)` with projection `g`.
#[pyfunction]
fn normalized_estimate(g: &PyMatrix, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    theory::normalized_estimate(&g.0, &vector(x)?, &vector(y)?).map_err(py_err)
}

/// Returns `(target, mean, stderr, variance)` over `trials` projections.
#[pyfunction]
fn mc_unbiasedness(x: Vec<f64>, y: Vec<f64>, m: usize, trials: usize, seed: u64) -> PyResult<(f64, f64, f64, f64)> {
    let r = theory::mc_unbiasedness(&vector(x)?, &vector(y)?, m, trials, &SeededRng::new(seed)).map_err(py_err)?;
    Ok((r.target, r.mc_mean, r.mc_stderr, r.mc_variance))
}

#[pyfunction]
fn variance_closed_form(x: Vec<f64>, y: Vec<f64>, m: usize) -> PyResult<f64> {
    theory::variance_closed_form(&vector(x)?, &vector(y)?, m).map_err(py_err)
}

#[pyfunction]
fn chebyshev_radius(m: usize, r: f64, theta: f64, t: f64) -> f64 {
    theory::chebyshev_radius(m, r, theta, t)
}

#[pyfunction]
#[pyo3(signature = (tau, rho, delta, m_queries, n_keys, radius, a = -1.0))]
fn theorem_m(tau: f64, rho: f64, delta: f64, m_queries: usize, n_keys: usize, radius: f64, a: f64) -> PyResult<usize> {
    theory::theorem_m(&TheoremSetting { tau, rho, delta, m_queries, n_keys, radius, a }).map_err(py_err)
}

/// Runs distillation from a JSON config; returns the per-step losses and the
/// final parameters.
#[pyfunction(name = "uptrain")]
fn run_uptrain(config_json: &str) -> PyResult<(Vec<f64>, PySaraParams)> {
    let config: DistillationConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let teacher = config.teacher().map_err(py_err)?;
    let history = sara_core::uptrain::uptrain(&config, &teacher, &mut config.data()).map_err(py_err)?;
    Ok((history.loss, PySaraParams(history.final_params)))
}

#[pyclass(name = "Scene", module = "sara_attention")]
struct PyScene(navdemo::Scene);

fn kernel_spec(maps: Option<(PyRef<'_, PyFeatureMap>, PyRef<'_, PyFeatureMap>)>) -> KernelSpec {
    match maps {
        None => KernelSpec::ExactSoftmax,
        Some((q, k)) => KernelSpec::features(q.0.clone(), k.0.clone()),
    }
}

#[pymethods]
impl PyScene {
    /// Clustered synthetic scene; `config_json` holds any `SceneConfig` fields.
    #[staticmethod]
    #[pyo3(signature = (seed, config_json = "{}"))]
    fn synthetic(seed: u64, config_json: &str) -> PyResult<Self> {
        let config: SceneConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        navdemo::synthetic_scene(&config, &SeededRng::new(seed)).map(PyScene).map_err(py_err)
    }

    #[staticmethod]
    fn new(patch_keys: &PyMatrix, targets: &PyMatrix, base_actions: &PyMatrix, radius: f64) -> PyResult<Self> {
        let layer = AttentionLayerParams::scaled_identity(patch_keys.0.cols(), radius);
        navdemo::Scene::new(patch_keys.0.clone(), targets.0.clone(), base_actions.0.clone(), layer)
            .map(PyScene)
            .map_err(py_err)
    }

    #[getter]
    fn n_patches(&self) -> usize {
        self.0.n_patches()
    }

    #[getter]
    fn n_targets(&self) -> usize {
        self.0.n_targets()
    }

    /// Scores of target `i` over the patches; exact softmax unless a
    /// `(phi_q, phi_k)` pair is given.
    #[pyo3(signature = (i, maps = None))]
    fn action_distribution(
        &self,
        i: usize,
        maps: Option<(PyRef<'_, PyFeatureMap>, PyRef<'_, PyFeatureMap>)>,
    ) -> PyResult<Vec<f64>> {
        navdemo::action_distribution(&self.0, i, &kernel_spec(maps)).map(DenseVector::into_vec).map_err(py_err)
    }

    #[pyo3(signature = (i, maps = None))]
    fn expected_action(
        &self,
        i: usize,
        maps: Option<(PyRef<'_, PyFeatureMap>, PyRef<'_, PyFeatureMap>)>,
    ) -> PyResult<Vec<f64>> {
        navdemo::expected_action(&self.0, i, &kernel_spec(maps)).map(DenseVector::into_vec).map_err(py_err)
    }

    /// Per-target `(tv_distance, argmax_agree, entropy_gap)` against exact softmax.
    fn compare(
        &self,
        phi_q: &PyFeatureMap,
        phi_k: &PyFeatureMap,
    ) -> PyResult<(Vec<f64>, Vec<bool>, Vec<f64>)> {
        let spec = KernelSpec::features(phi_q.0.clone(), phi_k.0.clone());
        let mut reports = navdemo::compare_kernels(&self.0, &[spec]).map_err(py_err)?;
        let r = reports.remove(0);
        Ok((r.tv_distance, r.argmax_agree, r.entropy_gap))
    }
}

#[pyfunction]
fn topk_sample(scores: Vec<f64>, k: usize, seed: u64) -> PyResult<usize> {
    let mut rng = SeededRng::new(seed);
    navdemo::topk_truncated_sample(&vector(scores)?, k, &mut rng).map_err(py_err)
}

#[pymodule]
fn sara_attention(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_class::<PySaraParams>()?;
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyAttentionOutput>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(softmax_attention, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_attention, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(mc_unbiasedness, m)?)?;
    m.add_function(wrap_pyfunction!(variance_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(chebyshev_radius, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_m, m)?)?;
    m.add_function(wrap_pyfunction!(run_uptrain, m)?)?;
    m.add_function(wrap_pyfunction!(topk_sample, m)?)?;
    Ok(())
}
