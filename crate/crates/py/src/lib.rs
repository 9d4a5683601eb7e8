//! Python bindings for the badexpert backdoor-defense laboratory.
//!
//! Exposes the main types (datasets, networks, triggers, detectors) and the
//! pipeline operations (training, poisoning, extraction, finetuning,
//! calibration, scoring) to Python. Build with
//! `cargo build -p badexpert-py --release`; the resulting
//! `libbadexpert_py.so` imports as the module `badexpert_py` (see
//! `python/smoke_test.py`).

use badexpert::adaptive::{apply_adaptive, optimize_adaptive_trigger, AdaptiveConfig};
use badexpert::config::ExperimentConfig;
use badexpert::data::{make_synthetic_dataset, LabeledDataset};
use badexpert::detector::{calibrate_threshold, DecisionRule, Detector};
use badexpert::extraction::{clean_finetune, extract_backdoor_expert, ExtractionConfig, FinetuneConfig};
use badexpert::harness::Pipeline;
use badexpert::metrics;
use badexpert::nn::{Architecture, Augmentation, Network, TrainConfig};
use badexpert::poison::{self, MislabelStrategy, PoisonPolicy, TargetMode, TriggerSpec};
use badexpert::Tensor;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::collections::HashMap;
use std::path::Path;

fn to_py(err: badexpert::Error) -> PyErr {
    use badexpert::Error as E;
    match &err {
        E::Io { .. } | E::Dependency(_) => PyIOError::new_err(err.to_string()),
        E::Numeric(_) => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// A labeled image dataset with pixels in [0,1].
#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Deterministic synthetic blob dataset.
    #[staticmethod]
    #[pyo3(signature = (classes, per_class, shape, seed=0))]
    fn synthetic(
        classes: usize,
        per_class: usize,
        shape: (usize, usize, usize),
        seed: u64,
    ) -> PyResult<Self> {
        let inner = make_synthetic_dataset(classes, per_class, [shape.0, shape.1, shape.2], seed)
            .map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Load a BDXD dataset file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: badexpert::checkpoint::load_dataset(Path::new(path)).map_err(to_py)?,
        })
    }

    /// Load an IDX images/labels pair.
    #[staticmethod]
    fn load_idx(images: &str, labels: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: badexpert::idx::load_idx(Path::new(images), Path::new(labels))
                .map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        badexpert::checkpoint::save_dataset(Path::new(path), &self.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn label(&self, index: usize) -> PyResult<usize> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.label(index))
    }

    /// Flat pixel data of one sample (row-major, channel-first).
    fn input(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.input(index).data().to_vec())
    }

    /// Split off `n` samples (seeded shuffle) into a new dataset; returns
    /// (head, rest).
    fn split(&self, n: usize, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let (a, b) = self.inner.split(n, seed).map_err(to_py)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }
}

/// A trigger planting procedure (patch or blend).
#[pyclass(name = "Trigger")]
#[derive(Clone)]
struct PyTrigger {
    inner: TriggerSpec,
}

#[pymethods]
impl PyTrigger {
    /// 3x3 checkered patch at the bottom-right corner.
    #[staticmethod]
    fn default_patch(shape: (usize, usize, usize)) -> PyResult<Self> {
        Ok(PyTrigger {
            inner: TriggerSpec::default_patch([shape.0, shape.1, shape.2]).map_err(to_py)?,
        })
    }

    /// Fixed pseudo-random full-image blend pattern.
    #[staticmethod]
    #[pyo3(signature = (shape, alpha=0.2))]
    fn default_blend(shape: (usize, usize, usize), alpha: f64) -> PyResult<Self> {
        Ok(PyTrigger {
            inner: TriggerSpec::default_blend([shape.0, shape.1, shape.2], alpha)
                .map_err(to_py)?,
        })
    }

    /// The same blend trigger at a different opacity.
    fn with_alpha(&self, alpha: f64) -> PyTrigger {
        PyTrigger {
            inner: self.inner.with_alpha(alpha),
        }
    }
}

fn tensor_from_flat(data: Vec<f32>, shape: [usize; 3]) -> PyResult<Tensor> {
    Tensor::new(shape.to_vec(), data).map_err(to_py)
}

/// A feed-forward/convolutional classifier.
#[pyclass(name = "Network")]
#[derive(Clone)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// conv3x3(16)-relu-pool-conv3x3(32)-relu-pool-flatten-dense head.
    #[staticmethod]
    #[pyo3(signature = (shape, classes, seed=0))]
    fn small_cnn(shape: (usize, usize, usize), classes: usize, seed: u64) -> PyResult<Self> {
        let arch = Architecture::small_cnn(shape.0, shape.1, shape.2, classes).map_err(to_py)?;
        Ok(PyNetwork {
            inner: Network::new(arch, seed).map_err(to_py)?,
        })
    }

    /// Flat multi-layer perceptron with the given hidden widths.
    #[staticmethod]
    #[pyo3(signature = (shape, hidden, classes, seed=0))]
    fn mlp(
        shape: (usize, usize, usize),
        hidden: Vec<usize>,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Architecture::mlp(shape.0, shape.1, shape.2, &hidden, classes).map_err(to_py)?;
        Ok(PyNetwork {
            inner: Network::new(arch, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: badexpert::checkpoint::load_network(Path::new(path)).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        badexpert::checkpoint::save_network(Path::new(path), &self.inner).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn descriptor(&self) -> String {
        self.inner.architecture().descriptor().to_string()
    }

    /// SGD training on a dataset; returns the trained copy.
    #[pyo3(signature = (dataset, epochs, batch_size=64, lr=0.05, momentum=0.9, weight_decay=1e-4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        dataset: &PyDataset,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        seed: u64,
    ) -> PyResult<PyNetwork> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            base_lr: lr,
            lr_schedule: vec![],
            momentum,
            weight_decay,
            seed,
            augmentation: Augmentation::None,
        };
        Ok(PyNetwork {
            inner: badexpert::nn::train(&self.inner, &dataset.inner, &cfg).map_err(to_py)?,
        })
    }

    /// Predicted class for one flat input.
    fn predict(&self, input: Vec<f32>) -> PyResult<usize> {
        let x = tensor_from_flat(input, self.inner.input_shape())?;
        self.inner.predict(&x).map_err(to_py)
    }

    /// Softmax confidences for one flat input.
    fn confidence(&self, input: Vec<f32>) -> PyResult<Vec<f64>> {
        let x = tensor_from_flat(input, self.inner.input_shape())?;
        self.inner.confidence(&x).map_err(to_py)
    }

    fn clean_accuracy(&self, dataset: &PyDataset) -> PyResult<f64> {
        metrics::clean_accuracy(&self.inner, &dataset.inner).map_err(to_py)
    }

    /// ASR with the trigger planted into every eligible sample;
    /// `target_class=None` means the all-to-all labeling.
    #[pyo3(signature = (dataset, trigger, target_class=None))]
    fn attack_success_rate(
        &self,
        dataset: &PyDataset,
        trigger: &PyTrigger,
        target_class: Option<usize>,
    ) -> PyResult<f64> {
        let target = match target_class {
            Some(t) => TargetMode::AllToOne { target: t },
            None => TargetMode::AllToAll,
        };
        metrics::attack_success_rate(&self.inner, &dataset.inner, &trigger.inner, &target)
            .map_err(to_py)
    }
}

/// The (M, B, M') detector bundle with a decision rule.
#[pyclass(name = "Detector")]
struct PyDetector {
    inner: Detector,
}

fn rule_from_str(rule: &str, tau: Option<f64>) -> PyResult<DecisionRule> {
    Ok(match rule {
        "hard" => DecisionRule::Hard,
        "soft_b" => DecisionRule::SoftB { tau },
        "soft_mprime" => DecisionRule::SoftMPrime { tau },
        "simple_ratio" => DecisionRule::SimpleRatio,
        "modified" => DecisionRule::Modified,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown rule {other:?} (hard|soft_b|soft_mprime|simple_ratio|modified)"
            )))
        }
    })
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (suspect, expert, auxiliary, rule="modified", gamma=0.5, tau=None))]
    fn new(
        suspect: &PyNetwork,
        expert: &PyNetwork,
        auxiliary: &PyNetwork,
        rule: &str,
        gamma: f64,
        tau: Option<f64>,
    ) -> PyResult<Self> {
        Ok(PyDetector {
            inner: Detector::new(
                suspect.inner.clone(),
                expert.inner.clone(),
                auxiliary.inner.clone(),
                rule_from_str(rule, tau)?,
                gamma,
            )
            .map_err(to_py)?,
        })
    }

    /// Calibrate the rejection threshold on clean data; returns alpha.
    fn calibrate(&mut self, clean: &PyDataset, target_fpr: f64) -> PyResult<f64> {
        self.inner.calibrate(&clean.inner, target_fpr).map_err(to_py)
    }

    #[getter]
    fn alpha(&self) -> Option<f64> {
        self.inner.alpha
    }

    #[setter]
    fn set_alpha(&mut self, alpha: f64) {
        self.inner.alpha = Some(alpha);
    }

    /// Rule score for one flat input (lower = more suspicious).
    fn score(&self, input: Vec<f32>) -> PyResult<f64> {
        let x = tensor_from_flat(input, self.inner.suspect.input_shape())?;
        self.inner.score(&x).map_err(to_py)
    }

    /// Backdoor input detector: True = reject.
    fn bid(&self, input: Vec<f32>) -> PyResult<bool> {
        let x = tensor_from_flat(input, self.inner.suspect.input_shape())?;
        self.inner.bid(&x).map_err(to_py)
    }

    /// Scores for every input of a dataset.
    fn score_dataset(&self, dataset: &PyDataset) -> PyResult<Vec<f64>> {
        self.inner.score_all(dataset.inner.inputs()).map_err(to_py)
    }

    /// Scores for every input of a dataset with the trigger planted
    /// (all-to-one target class excludes samples already labeled target).
    #[pyo3(signature = (dataset, trigger, target_class=None))]
    fn score_triggered(
        &self,
        dataset: &PyDataset,
        trigger: &PyTrigger,
        target_class: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        let target = match target_class {
            Some(t) => TargetMode::AllToOne { target: t },
            None => TargetMode::AllToAll,
        };
        let set = metrics::build_triggered_set(&dataset.inner, &trigger.inner, &target)
            .map_err(to_py)?;
        self.inner.score_all(&set.inputs).map_err(to_py)
    }
}

/// Plant a trigger into `floor(rate * len)` samples; returns the poisoned
/// dataset and the touched indices. `target_class=None` = all-to-all.
#[pyfunction]
#[pyo3(signature = (dataset, trigger, rate, target_class=None, seed=0))]
fn poison_dataset(
    dataset: &PyDataset,
    trigger: &PyTrigger,
    rate: f64,
    target_class: Option<usize>,
    seed: u64,
) -> PyResult<(PyDataset, Vec<usize>)> {
    let target = match target_class {
        Some(t) => TargetMode::AllToOne { target: t },
        None => TargetMode::AllToAll,
    };
    let policy = PoisonPolicy {
        trigger: trigger.inner.clone(),
        target,
        poison_rate: rate,
        seed,
    };
    let (d, idx) = poison::poison_dataset(&dataset.inner, &policy).map_err(to_py)?;
    Ok((PyDataset { inner: d }, idx))
}

/// Backdoor functionality extraction: finetune a copy of the suspect model
/// on mislabeled clean batches with a gentle Adam rate.
#[pyfunction]
#[pyo3(signature = (suspect, clean, eta, batch_size=128, iterations=None, strategy="shift", seed=0))]
fn extract_backdoor_expert_py(
    suspect: &PyNetwork,
    clean: &PyDataset,
    eta: f64,
    batch_size: usize,
    iterations: Option<usize>,
    strategy: &str,
    seed: u64,
) -> PyResult<PyNetwork> {
    let strategy = match strategy {
        "shift" => MislabelStrategy::Shift,
        "random_other" => MislabelStrategy::RandomOther { seed },
        "soft" => MislabelStrategy::Soft { epsilon: 1.0 },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown strategy {other:?} (shift|random_other|soft)"
            )))
        }
    };
    let cfg = ExtractionConfig {
        eta,
        iterations,
        batch_size,
        strategy,
        seed,
    };
    Ok(PyNetwork {
        inner: extract_backdoor_expert(&suspect.inner, &clean.inner, &cfg).map_err(to_py)?,
    })
}

/// Standard clean finetuning (SGD, stepped decay); yields the auxiliary model.
#[pyfunction]
#[pyo3(signature = (suspect, clean, lr, epochs=10, decay_every=2, batch_size=64, augment=true, seed=0))]
#[allow(clippy::too_many_arguments)]
fn clean_finetune_py(
    suspect: &PyNetwork,
    clean: &PyDataset,
    lr: f64,
    epochs: usize,
    decay_every: usize,
    batch_size: usize,
    augment: bool,
    seed: u64,
) -> PyResult<PyNetwork> {
    let cfg = FinetuneConfig {
        initial_lr: lr,
        epochs,
        decay_every,
        batch_size,
        momentum: 0.9,
        augment,
        seed,
    };
    Ok(PyNetwork {
        inner: clean_finetune(&suspect.inner, &clean.inner, &cfg).map_err(to_py)?,
    })
}

/// Mann-Whitney AUROC (lower score = backdoor).
#[pyfunction]
fn auroc(clean_scores: Vec<f64>, backdoor_scores: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&clean_scores, &backdoor_scores).map_err(to_py)
}

/// Quantile threshold for a false-positive budget on clean scores.
#[pyfunction]
fn calibrate_threshold_py(clean_scores: Vec<f64>, target_fpr: f64) -> PyResult<f64> {
    calibrate_threshold(&clean_scores, target_fpr).map_err(to_py)
}

/// Optimize an asymmetric adaptive trigger against (suspect, expert).
/// Returns (mark, mask, mask_norm, objective_trace).
#[pyfunction]
#[pyo3(signature = (suspect, expert, target, data, lambda1, lambda2, steps=200, step_size=1e-2, seed=0))]
#[allow(clippy::too_many_arguments)]
fn optimize_adaptive_trigger_py(
    suspect: &PyNetwork,
    expert: &PyNetwork,
    target: usize,
    data: &PyDataset,
    lambda1: f64,
    lambda2: f64,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> PyResult<(Vec<f32>, Vec<f32>, f64, Vec<f64>)> {
    let cfg = AdaptiveConfig {
        lambda1,
        lambda2,
        steps,
        step_size,
        batch_size: 32,
        seed,
    };
    let (trigger, trace) =
        optimize_adaptive_trigger(&suspect.inner, &expert.inner, target, &data.inner, &cfg)
            .map_err(to_py)?;
    Ok((
        trigger.mark.data().to_vec(),
        trigger.mask.data().to_vec(),
        trigger.mask_norm(),
        trace.iter().map(|p| p.total).collect(),
    ))
}

/// Apply an adaptive (mark, mask) trigger to one flat input.
#[pyfunction]
fn apply_adaptive_trigger(
    input: Vec<f32>,
    mark: Vec<f32>,
    mask: Vec<f32>,
    shape: (usize, usize, usize),
) -> PyResult<Vec<f32>> {
    let trigger = badexpert::adaptive::AdaptiveTrigger {
        mark: tensor_from_flat(mark, [shape.0, shape.1, shape.2])?,
        mask: Tensor::new(vec![shape.1, shape.2], mask).map_err(to_py)?,
    };
    let x = tensor_from_flat(input, [shape.0, shape.1, shape.2])?;
    Ok(apply_adaptive(&x, &trigger).map_err(to_py)?.data().to_vec())
}

/// Run the config-driven pipeline end to end; returns the machine-report
/// section as a dict.
#[pyfunction]
#[pyo3(signature = (config_path, out=None, force=false))]
fn run_pipeline(
    config_path: &str,
    out: Option<&str>,
    force: bool,
) -> PyResult<HashMap<String, String>> {
    let cfg = ExperimentConfig::from_file(Path::new(config_path)).map_err(to_py)?;
    let pipeline = Pipeline::new(cfg, out.map(Path::new), force);
    let report = pipeline.run().map_err(to_py)?;
    Ok(report.machine.into_iter().collect())
}

#[pymodule]
fn badexpert_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrigger>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(poison_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(extract_backdoor_expert_py, m)?)?;
    m.add_function(wrap_pyfunction!(clean_finetune_py, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_threshold_py, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_adaptive_trigger_py, m)?)?;
    m.add_function(wrap_pyfunction!(apply_adaptive_trigger, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("__version__", badexpert::VERSION)?;
    Ok(())
}
