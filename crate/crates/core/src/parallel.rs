//! Batch inference helpers. Per-sample outputs are independent, so they may
//! be computed in parallel; results are collected by index so the outcome is
//! identical to a sequential run. The `BDXP_THREADS` environment variable
//! caps the pool size.

use crate::error::Result;
use crate::nn::Network;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::sync::OnceLock;

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Ok(v) = std::env::var("BDXP_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                builder = builder.num_threads(n.max(1));
            }
        }
        builder.build().expect("evaluation thread pool")
    })
}

/// Run a closure inside the evaluation pool.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    pool().install(f)
}

/// Predicted class per input.
pub fn predict_all(net: &Network, inputs: &[Tensor]) -> Result<Vec<usize>> {
    pool().install(|| inputs.par_iter().map(|x| net.predict(x)).collect())
}

/// Softmax confidence vector per input.
pub fn confidences_all(net: &Network, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    pool().install(|| inputs.par_iter().map(|x| net.confidence(x)).collect())
}
