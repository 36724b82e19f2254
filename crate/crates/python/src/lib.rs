//! Python bindings: background models, unsupervised codes, end-to-end training,
//! metrics and gradient checks.

use std::collections::{BTreeMap, BTreeSet};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sgmm::classifier::HeadConfig;
use sgmm::data::{self, SynthConfig};
use sgmm::deep_pool::{init_from_ubm, CodeKind, PoolLayer, PoolSpec, Variant};
use sgmm::gmm::{self, CovarianceKind, EmConfig, GmmModel};
use sgmm::metrics::{self, GroundTruth, ScoredPrediction};
use sgmm::stats_pool::{self, SecondOrderKind};
use sgmm::trainer::{self, Checkpoint, FrozenCode, FrozenPool, GradcheckSpec, Model, Pooling, TrainConfig};
use sgmm::{rng, Error, Matrix};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected at least one row"));
    }
    Matrix::from_rows(&rows).map_err(py_err)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Gaussian mixture background model.
#[pyclass(name = "Gmm", module = "sgmm_py", from_py_object)]
#[derive(Clone)]
struct PyGmm {
    inner: GmmModel,
}

#[pymethods]
impl PyGmm {
    /// Fits a mixture by k-means++ seeding followed by EM.
    #[staticmethod]
    #[pyo3(signature = (frames, k, covariance = "diagonal", seed = 0, max_iters = 100))]
    fn train(frames: Vec<Vec<f64>>, k: usize, covariance: &str, seed: u64, max_iters: usize) -> PyResult<Self> {
        let kind: CovarianceKind = parse(covariance)?;
        let cfg = EmConfig { seed, max_iters, ..EmConfig::default() };
        let fit = gmm::train_ubm(&matrix(frames)?, k, kind, &cfg).map_err(py_err)?;
        Ok(Self { inner: fit.model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: gmm::read_gmm(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        gmm::write_gmm(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.inner.means().to_rows()
    }

    fn posteriors(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.posteriors(&matrix(frames)?).map_err(py_err)?.to_rows())
    }

    fn loglik(&self, frames: Vec<Vec<f64>>) -> PyResult<f64> {
        Ok(self.inner.loglik(&matrix(frames)?))
    }

    fn __repr__(&self) -> String {
        format!("Gmm(k={}, dim={}, covariance={:?})", self.inner.k(), self.inner.dim(), self.inner.kind())
    }
}

/// Labelled videos, each a `frames × dim` matrix.
#[pyclass(name = "Dataset", module = "sgmm_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic corpus whose class signal lives in cluster occupancy.
    #[staticmethod]
    #[pyo3(signature = (classes = 8, clusters = 16, dim = 16, videos_per_class = 100, seed = 0))]
    fn synth(classes: usize, clusters: usize, dim: usize, videos_per_class: usize, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig {
            num_classes: classes,
            num_clusters_true: clusters,
            dim,
            videos_per_class,
            seed,
            ..SynthConfig::default()
        };
        Ok(Self { inner: data::gen_classification(&cfg).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: data::read_vseq(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::write_vseq(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<Vec<u32>> {
        self.inner.records.iter().map(|r| r.labels.clone()).collect()
    }

    fn frames(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let r = self.inner.records.get(index).ok_or_else(|| PyValueError::new_err("index out of range"))?;
        Ok(r.frames.to_rows())
    }

    /// All frames stacked into one matrix.
    fn stacked_frames(&self) -> Vec<Vec<f64>> {
        self.inner.stacked_frames().to_rows()
    }

    /// Splits off the last `fraction` of every class: `(head, tail)`.
    fn split_tail(&self, fraction: f64) -> PyResult<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(PyValueError::new_err("fraction must be in [0, 1]"));
        }
        let (a, b) = self.inner.split_tail(fraction);
        Ok((Self { inner: a }, Self { inner: b }))
    }
}

/// Smoothed-GMM code of one video: a `k × dim` list of rows.
#[pyfunction]
#[pyo3(signature = (gmm, frames, gamma = stats_pool::DEFAULT_GAMMA, intra_norm = false, final_norm = false))]
fn sgmm_code(
    gmm: &PyGmm,
    frames: Vec<Vec<f64>>,
    gamma: f64,
    intra_norm: bool,
    final_norm: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let stats = stats_pool::accumulate_frames(&gmm.inner, &matrix(frames)?, SecondOrderKind::None).map_err(py_err)?;
    let code = stats_pool::sgmm_code(&stats, &gmm.inner, gamma).map_err(py_err)?;
    Ok(stats_pool::normalize(&code, intra_norm, final_norm).values.to_rows())
}

/// VLAD code of one video: a `k × dim` list of rows.
#[pyfunction]
#[pyo3(signature = (gmm, frames, intra_norm = false, final_norm = false))]
fn vlad_code(gmm: &PyGmm, frames: Vec<Vec<f64>>, intra_norm: bool, final_norm: bool) -> PyResult<Vec<Vec<f64>>> {
    let stats = stats_pool::accumulate_frames(&gmm.inner, &matrix(frames)?, SecondOrderKind::None).map_err(py_err)?;
    let code = stats_pool::vlad_code(&stats, &gmm.inner).map_err(py_err)?;
    Ok(stats_pool::normalize(&code, intra_norm, final_norm).values.to_rows())
}

/// Pooling layer plus classifier head.
#[pyclass(name = "Model", module = "sgmm_py")]
struct PyModel {
    checkpoint: Checkpoint,
    log: Vec<trainer::LogRow>,
}

#[pymethods]
impl PyModel {
    /// Trains end to end and keeps the checkpoint with the lowest validation loss.
    ///
    /// `pool` is one of `dsgmm`, `netvlad`, `avg` or `sgmm` (frozen, needs `gmm`).
    #[staticmethod]
    #[pyo3(signature = (
        train, val, pool = "dsgmm", variant = "diagonal", gmm = None, k = 16, gamma = stats_pool::DEFAULT_GAMMA,
        lr = 2e-4, steps = 1000, batch_size = 64, eval_every = 100, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        train: &PyDataset,
        val: &PyDataset,
        pool: &str,
        variant: &str,
        gmm: Option<&PyGmm>,
        k: usize,
        gamma: f64,
        lr: f64,
        steps: u64,
        batch_size: usize,
        eval_every: u64,
        seed: u64,
    ) -> PyResult<Self> {
        let dim = train.inner.dim;
        let pooling = match pool {
            "avg" => Pooling::Average { dim },
            "sgmm" => {
                let g = gmm.ok_or_else(|| PyValueError::new_err("pool='sgmm' needs a gmm"))?;
                Pooling::Frozen(FrozenPool {
                    ubm: g.inner.clone(),
                    code: FrozenCode::Sgmm { gamma },
                    intra_norm: true,
                    final_norm: false,
                })
            }
            other => {
                let kind: CodeKind = parse(other)?;
                let v: Variant = parse(variant)?;
                let spec = PoolSpec { gamma, ..PoolSpec::new(kind) };
                let layer = match gmm {
                    Some(g) => init_from_ubm(&g.inner, v, spec).map_err(py_err)?,
                    None => PoolLayer::random(spec, v, k, dim, &mut rng::stream(seed, u64::MAX)),
                };
                Pooling::Trainable(layer)
            }
        };
        let classes = train.inner.num_classes.max(val.inner.num_classes);
        let tr = train.inner.clone().with_num_classes(classes).map_err(py_err)?;
        let va = val.inner.clone().with_num_classes(classes).map_err(py_err)?;
        let model = Model::new(pooling, classes, HeadConfig::default(), &mut rng::stream(seed, u64::MAX - 1))
            .map_err(py_err)?;
        let cfg = TrainConfig { lr, max_steps: steps, batch_size, eval_every, seed, ..TrainConfig::default() };
        let out = trainer::train(&tr, &va, model, &cfg).map_err(py_err)?;
        Ok(Self { checkpoint: out.best, log: out.log })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { checkpoint: trainer::read_checkpoint(path).map_err(py_err)?, log: Vec::new() })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trainer::write_checkpoint(&self.checkpoint, path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.checkpoint.step
    }

    #[getter]
    fn pool(&self) -> String {
        self.checkpoint.model.pooling.name()
    }

    /// Training log rows as dicts with step, train_loss, val_loss, gap and hit1.
    fn log<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.log
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("val_loss", r.val_loss)?;
                d.set_item("gap", r.gap)?;
                d.set_item("hit1", r.hit1)?;
                Ok(d)
            })
            .collect()
    }

    /// Per-class probabilities for one video.
    fn predict(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.checkpoint.model.predict(&matrix(frames)?).map_err(py_err)
    }

    /// Loss, GAP and Hit@1 over every frame of every video.
    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let ds = data.inner.clone().with_num_classes(self.checkpoint.model.num_classes()).map_err(py_err)?;
        let r = trainer::evaluate(&self.checkpoint.model, &ds).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("loss", r.loss)?;
        d.set_item("gap", r.gap)?;
        d.set_item("hit1", r.hit1)?;
        d.set_item("n_videos", r.n_videos)?;
        Ok(d)
    }
}

fn predictions(preds: Vec<(String, u32, f64)>) -> Vec<ScoredPrediction> {
    preds.into_iter().map(|(v, l, c)| ScoredPrediction::new(v, l, c)).collect()
}

fn truth(t: BTreeMap<String, Vec<u32>>) -> GroundTruth {
    t.into_iter().map(|(k, v)| (k, v.into_iter().collect::<BTreeSet<u32>>())).collect()
}

/// Global average precision over `(video, label, confidence)` triples.
#[pyfunction]
#[pyo3(signature = (predictions, truth, top_n = metrics::GAP_TOP_N))]
fn gap(predictions: Vec<(String, u32, f64)>, truth: BTreeMap<String, Vec<u32>>, top_n: usize) -> PyResult<f64> {
    metrics::gap(&self::predictions(predictions), &self::truth(truth), top_n).map_err(py_err)
}

#[pyfunction]
fn hit_at_1(predictions: Vec<(String, u32, f64)>, truth: BTreeMap<String, Vec<u32>>) -> PyResult<f64> {
    metrics::hit_at_1(&self::predictions(predictions), &self::truth(truth)).map_err(py_err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(py_err)
}

/// Continuity-corrected McNemar test from the discordant counts: `(chi2, p_value)`.
#[pyfunction]
fn mcnemar(b: usize, c: usize) -> (f64, f64) {
    let m = metrics::mcnemar_counts(b, c);
    (m.chi2, m.p_value)
}

/// Finite-difference check of the pooling and head gradients.
#[pyfunction]
#[pyo3(signature = (variant = "diagonal", pool = "dsgmm", intra_norm = true, final_norm = false, seed = 0))]
fn gradcheck<'py>(
    py: Python<'py>,
    variant: &str,
    pool: &str,
    intra_norm: bool,
    final_norm: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = GradcheckSpec {
        variant: parse(variant)?,
        code_kind: parse(pool)?,
        intra_norm,
        final_norm,
        seed,
        ..GradcheckSpec::default()
    };
    let r = trainer::gradcheck(&spec).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("max_rel_err", r.max_rel_err)?;
    d.set_item("threshold", r.threshold)?;
    d.set_item("passed", r.passed())?;
    let blocks: Vec<(String, usize, f64)> =
        r.blocks.iter().map(|b| (b.name.clone(), b.checked, b.max_rel_err)).collect();
    d.set_item("blocks", blocks)?;
    Ok(d)
}

#[pymodule]
fn sgmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGmm>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sgmm_code, m)?)?;
    m.add_function(wrap_pyfunction!(vlad_code, m)?)?;
    m.add_function(wrap_pyfunction!(gap, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(mcnemar, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
