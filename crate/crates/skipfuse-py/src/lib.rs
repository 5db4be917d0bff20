//! Python bindings for the skipfuse library: the trainable model, the
//! analytical FLOP model, forward benchmarking, and the memory calculator.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skipfuse::data::{Batch, PairSpec};
use skipfuse::objectives;
use skipfuse::optim::Optimizer;
use skipfuse::perf;
use skipfuse::{FusionVariant, Model, ModelConfig};

fn to_py(e: skipfuse::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_variant(s: &str) -> PyResult<FusionVariant> {
    s.parse().map_err(|e: skipfuse::Error| PyValueError::new_err(e.to_string()))
}

/// Toy-scale pretraining model over synthetic image-caption pairs.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model<f32>,
    cfg: ModelConfig,
}

#[pymethods]
impl PyModel {
    /// variant: "skip" | "connected" | "co" | "asym"
    #[new]
    #[pyo3(signature = (variant = "skip", seed = 0))]
    fn new(variant: &str, seed: u64) -> PyResult<Self> {
        let mut cfg = ModelConfig::toy();
        cfg.seed = seed;
        let inner = Model::new(&cfg, parse_variant(variant)?).map_err(to_py)?;
        Ok(Self { inner, cfg })
    }

    /// Trains on a pool of synthetic pairs; returns the per-step total loss.
    #[pyo3(signature = (steps = 50, pairs = 16, batch_size = 4, lr = 1e-2))]
    fn train(&mut self, steps: usize, pairs: usize, batch_size: usize, lr: f64) -> PyResult<Vec<f64>> {
        let mut data_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(1));
        let pool = skipfuse::data::synthetic_pairs::<f32>(&self.cfg, pairs, &mut data_rng)
            .map_err(to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(2));
        let mut opt = Optimizer::sgd(lr);
        let history = objectives::train(
            &mut self.inner,
            &pool,
            steps,
            batch_size,
            &mut opt,
            &mut rng,
            None,
        )
        .map_err(to_py)?;
        Ok(history.into_iter().map(|c| c.total).collect())
    }

    /// The deterministic caption tokens of a synthetic pair.
    fn caption_tokens(&self, color: usize, row: usize, col: usize) -> Vec<usize> {
        PairSpec { color, row, col }.caption()
    }

    /// Greedy-decodes a caption for the rendered (color, row, col) image.
    #[pyo3(signature = (color, row, col, max_len = 8))]
    fn decode(&self, color: usize, row: usize, col: usize, max_len: usize) -> PyResult<Vec<usize>> {
        let spec = PairSpec { color, row, col };
        let image = spec.render::<f32>(&self.cfg);
        objectives::greedy_decode(&self.inner, &image, &[], max_len).map_err(to_py)
    }

    /// Mean joint loss of one batch of freshly sampled pairs, no update.
    #[pyo3(signature = (pairs = 4, seed = 0))]
    fn eval_loss(&self, pairs: usize, seed: u64) -> PyResult<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Batch<f32> =
            skipfuse::data::synthetic_pairs(&self.cfg, pairs, &mut rng).map_err(to_py)?;
        let mut tape = skipfuse::Tape::<f32>::new();
        let enc = objectives::encode_batch(&mut tape, &self.inner, &batch).map_err(to_py)?;
        let (itc, _, _) =
            objectives::itc_forward(&mut tape, &self.inner, &batch, &enc).map_err(to_py)?;
        let mlm =
            objectives::mlm_loss(&mut tape, &self.inner, &batch, &enc, &mut rng).map_err(to_py)?;
        let sum = tape.add(itc.loss, mlm).map_err(to_py)?;
        Ok(tape.value(sum).scalar_value() as f64)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(to_py)
    }

    fn load(&self, path: &str) -> PyResult<()> {
        self.inner.load(std::path::Path::new(path)).map_err(to_py)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }
}

/// Analytical forward FLOPs of one fusion pass. `m`/`n` exclude CLS rows.
#[pyfunction]
#[pyo3(signature = (variant, d, m, n, layers, stride, ffn_multiplier = 4))]
fn flop_count(
    variant: &str,
    d: usize,
    m: usize,
    n: usize,
    layers: usize,
    stride: usize,
    ffn_multiplier: usize,
) -> PyResult<u64> {
    perf::flop_count(parse_variant(variant)?, d, m, n, layers, stride, ffn_multiplier)
        .map_err(to_py)
}

/// Times the fusion forward; returns (flops, wall_seconds).
#[pyfunction]
#[pyo3(signature = (variant, d, m, n, layers, stride, samples = 10, warmup = 2))]
#[allow(clippy::too_many_arguments)]
fn benchmark(
    variant: &str,
    d: usize,
    m: usize,
    n: usize,
    layers: usize,
    stride: usize,
    samples: usize,
    warmup: usize,
) -> PyResult<(u64, f64)> {
    let mut cfg = ModelConfig::toy();
    cfg.d_model = d;
    cfg.n_heads = [12usize, 8, 4, 2, 1]
        .into_iter()
        .find(|h| d % h == 0)
        .unwrap_or(1);
    cfg.n_fusion_asym_layers = layers;
    cfg.stride = stride;
    let rec = perf::benchmark_forward(parse_variant(variant)?, &cfg, m, n, samples, warmup)
        .map_err(to_py)?;
    Ok((rec.flops, rec.wall_seconds))
}

/// ZeRO-style partitioned memory estimate: returns a dict of byte counts.
#[pyfunction]
fn zero_memory<'py>(
    py: Python<'py>,
    param_count: u64,
    n_gpus: u64,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let est = perf::zero_memory_estimate(
        param_count,
        n_gpus,
        perf::PrecisionProfile::adam_fp32(),
        perf::ActivationSpec {
            n_layers: 6,
            seq_rows: 287,
            d_model: 768,
            bytes_per_element: 4,
            segments: 2,
        },
    )
    .map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("static_bytes_per_gpu", est.static_bytes_per_gpu)?;
    d.set_item("zero_bytes_per_gpu", est.zero_bytes_per_gpu)?;
    d.set_item("activation_bytes_full", est.activation_bytes_full)?;
    d.set_item("activation_bytes_checkpointed", est.activation_bytes_checkpointed)?;
    d.set_item("recompute_forward_multiplier", est.recompute_forward_multiplier)?;
    Ok(d)
}

#[pymodule]
fn skipfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(zero_memory, m)?)?;
    Ok(())
}
