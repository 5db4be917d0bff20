//! Performance lab: analytical FLOP model per fusion variant, wall-clock
//! forward benchmarking, stride sweeps, and the data-parallel (ZeRO-style)
//! memory calculator.
//!
//! FLOPs are counted as 2 × multiply-accumulates over matrix products only;
//! softmax/LN/GELU element-wise work is excluded (O(len·d) noise at the
//! dimensions of interest). The analytical model is held to within 1% of an
//! instrumented multiply-counter run of the real forward pass.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{layer_trace, FusionNetwork, FusionState, FusionVariant, LayerKind};
use crate::nn::{init_tensor, Init};
use crate::tape::Tape;

/// One benchmark measurement. `m_len`/`n_len` exclude the CLS rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: FusionVariant,
    pub d_model: usize,
    pub m_len: usize,
    pub n_len: usize,
    pub layers: usize,
    pub stride: usize,
    /// Analytical FLOPs for a single forward sample.
    pub flops: u64,
    /// Total seconds over all measured samples.
    pub wall_seconds: f64,
    pub samples: usize,
    pub warmup: usize,
    pub host: String,
}

pub const CSV_HEADER: &str =
    "variant,d_model,m_len,n_len,layers,stride,flops,wall_seconds,samples,warmup,host";

pub fn write_csv<W: Write>(w: &mut W, records: &[BenchRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.d_model,
            r.m_len,
            r.n_len,
            r.layers,
            r.stride,
            r.flops,
            r.wall_seconds,
            r.samples,
            r.warmup,
            r.host
        )?;
    }
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Input(format!(
                "bad CSV header: {:?}",
                other.unwrap_or("")
            )));
        }
    }
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Input(format!("bad CSV row: {line}")));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Input(format!("bad field {s}")))
        };
        out.push(BenchRecord {
            variant: f[0].parse()?,
            d_model: num(f[1])?,
            m_len: num(f[2])?,
            n_len: num(f[3])?,
            layers: num(f[4])?,
            stride: num(f[5])?,
            flops: f[6]
                .parse()
                .map_err(|_| Error::Input(format!("bad field {}", f[6])))?,
            wall_seconds: f[7]
                .parse()
                .map_err(|_| Error::Input(format!("bad field {}", f[7])))?,
            samples: num(f[8])?,
            warmup: num(f[9])?,
            host: f[10].to_string(),
        });
    }
    Ok(out)
}

fn sa_flops(len: u64, d: u64) -> u64 {
    8 * len * d * d + 4 * len * len * d
}

fn ca_flops(lq: u64, lk: u64, d: u64) -> u64 {
    4 * lq * d * d + 4 * lk * d * d + 4 * lq * lk * d
}

fn ffn_flops(len: u64, d: u64, mult: u64) -> u64 {
    4 * mult * len * d * d
}

/// Closed-form forward FLOPs of one fusion-network pass. `m` and `n` are
/// the patch/token counts excluding CLS; the CLS rows are added internally.
pub fn flop_count(
    variant: FusionVariant,
    d: usize,
    m: usize,
    n: usize,
    layers: usize,
    stride: usize,
    ffn_multiplier: usize,
) -> Result<u64> {
    let trace = layer_trace(variant, layers, stride)?;
    let (d, mult) = (d as u64, ffn_multiplier as u64);
    let m1 = (m + 1) as u64;
    let n1 = (n + 1) as u64;
    let asym = sa_flops(n1, d) + ca_flops(n1, m1, d) + ffn_flops(n1, d, mult);
    let connected = sa_flops(m1 + n1, d) + ffn_flops(m1 + n1, d, mult);
    let co = asym + sa_flops(m1, d) + ca_flops(m1, n1, d) + ffn_flops(m1, d, mult);
    Ok(trace
        .iter()
        .map(|k| match k {
            LayerKind::Asym => asym,
            LayerKind::Connected => connected,
            LayerKind::Co => co,
        })
        .sum())
}

fn bench_config(d: usize, layers: usize, stride: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.d_model = d;
    cfg.n_heads = [12usize, 8, 4, 2, 1]
        .into_iter()
        .find(|h| d % h == 0)
        .unwrap_or(1);
    cfg.n_fusion_asym_layers = layers;
    cfg.stride = stride;
    cfg
}

/// Runs the real fusion forward once and returns the tape's exact
/// multiply-accumulate count × 2. Used as the oracle for [`flop_count`].
pub fn instrumented_flop_count(
    variant: FusionVariant,
    d: usize,
    m: usize,
    n: usize,
    layers: usize,
    stride: usize,
    ffn_multiplier: usize,
) -> Result<u64> {
    let mut cfg = bench_config(d, layers, stride);
    cfg.ffn_multiplier = ffn_multiplier;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = FusionNetwork::<f32>::new(&mut rng, "bench", &cfg, variant)?;
    let mut tape = Tape::<f32>::no_grad();
    let v = init_tensor(&mut rng, vec![m + 1, d], Init::Normal);
    let l = init_tensor(&mut rng, vec![n + 1, d], Init::Normal);
    let state = FusionState {
        v: tape.leaf(v),
        l: tape.leaf(l),
        text_mask: vec![true; n + 1],
    };
    let before = tape.matmul_flops();
    net.forward(&mut tape, state)?;
    Ok(tape.matmul_flops() - before)
}

fn host_descriptor() -> String {
    format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times `samples` sequential single-sample forward passes of the fusion
/// network (encoders excluded: they are identical across variants), after
/// `warmup` untimed passes. Monotonic clock, single thread. `m` and `n`
/// exclude the CLS rows, which are added internally.
pub fn benchmark_forward(
    variant: FusionVariant,
    cfg: &ModelConfig,
    m: usize,
    n: usize,
    samples: usize,
    warmup: usize,
) -> Result<BenchRecord> {
    if samples == 0 {
        return Err(Error::Input("samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = FusionNetwork::<f32>::new(&mut rng, "bench", cfg, variant)?;
    let v = init_tensor::<f32>(&mut rng, vec![m + 1, cfg.d_model], Init::Normal);
    let l = init_tensor::<f32>(&mut rng, vec![n + 1, cfg.d_model], Init::Normal);

    let run_once = || -> Result<()> {
        let mut tape = Tape::<f32>::no_grad();
        let state = FusionState {
            v: tape.leaf(v.clone()),
            l: tape.leaf(l.clone()),
            text_mask: vec![true; n + 1],
        };
        net.forward(&mut tape, state)?;
        Ok(())
    };
    for _ in 0..warmup {
        run_once()?;
    }
    let start = Instant::now();
    for _ in 0..samples {
        run_once()?;
    }
    let wall_seconds = start.elapsed().as_secs_f64();

    Ok(BenchRecord {
        variant,
        d_model: cfg.d_model,
        m_len: m,
        n_len: n,
        layers: cfg.n_fusion_asym_layers,
        stride: cfg.stride,
        flops: flop_count(
            variant,
            cfg.d_model,
            m,
            n,
            cfg.n_fusion_asym_layers,
            cfg.stride,
            cfg.ffn_multiplier,
        )?,
        wall_seconds,
        samples,
        warmup,
        host: host_descriptor(),
    })
}

/// One SkipConnected benchmark per stride, same seed and dims throughout.
pub fn stride_sweep(
    cfg: &ModelConfig,
    m: usize,
    n: usize,
    strides: &[usize],
    samples: usize,
    warmup: usize,
) -> Result<Vec<BenchRecord>> {
    strides
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.stride = s;
            benchmark_forward(FusionVariant::SkipConnected, &c, m, n, samples, warmup)
        })
        .collect()
}

/// Byte widths of one parameter's training state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrecisionProfile {
    pub bytes_per_param: u64,
    pub bytes_per_grad: u64,
    pub bytes_per_optim_state: u64,
    pub optim_states_per_param: u64,
}

impl PrecisionProfile {
    /// FP32 everywhere, Adam: momentum, variance, and the optimizer's
    /// master weight copy as three four-byte states per parameter
    /// (ZeRO-style accounting), so 20 bytes per parameter in total.
    pub fn adam_fp32() -> Self {
        Self {
            bytes_per_param: 4,
            bytes_per_grad: 4,
            bytes_per_optim_state: 4,
            optim_states_per_param: 3,
        }
    }
}

/// Per-layer activation footprint for the (analytical) checkpointing model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationSpec {
    pub n_layers: u64,
    pub seq_rows: u64,
    pub d_model: u64,
    pub bytes_per_element: u64,
    /// Checkpoint segments: only segment-boundary activations are kept.
    pub segments: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryEstimate {
    pub n_gpus: u64,
    pub param_count: u64,
    pub profile: PrecisionProfile,
    /// Params + grads + optimizer states on one GPU without partitioning.
    pub static_bytes_per_gpu: u64,
    /// The same state partitioned across the data-parallel group.
    pub zero_bytes_per_gpu: u64,
    pub activation_bytes_full: u64,
    pub activation_bytes_checkpointed: u64,
    /// Forward-cost factor paid for recomputing activations backward.
    pub recompute_forward_multiplier: f64,
}

pub fn zero_memory_estimate(
    param_count: u64,
    n_gpus: u64,
    profile: PrecisionProfile,
    activations: ActivationSpec,
) -> Result<MemoryEstimate> {
    if param_count == 0 || n_gpus == 0 {
        return Err(Error::Input(
            "param_count and n_gpus must be at least 1".into(),
        ));
    }
    let static_bytes = param_count
        * (profile.bytes_per_param
            + profile.bytes_per_grad
            + profile.optim_states_per_param * profile.bytes_per_optim_state);
    let zero_bytes = static_bytes.div_ceil(n_gpus);
    let per_layer = activations.seq_rows * activations.d_model * activations.bytes_per_element;
    let full = activations.n_layers * per_layer;
    let checkpointed = activations.segments.min(activations.n_layers) * per_layer;
    Ok(MemoryEstimate {
        n_gpus,
        param_count,
        profile,
        static_bytes_per_gpu: static_bytes,
        zero_bytes_per_gpu: zero_bytes,
        activation_bytes_full: full,
        activation_bytes_checkpointed: checkpointed,
        recompute_forward_multiplier: 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_D: usize = 768;
    const PAPER_M: usize = 256;
    const PAPER_N: usize = 30;

    #[test]
    fn single_self_attention_layer_formula() {
        let d = 64u64;
        assert_eq!(sa_flops(1, d), 8 * d * d + 4 * d);
    }

    #[test]
    fn analytical_matches_instrumented_on_grid() {
        for variant in FusionVariant::ALL {
            for (d, m, n, layers, stride) in
                [(16, 5, 3, 2, 2), (32, 9, 4, 4, 2), (24, 4, 4, 6, 3), (16, 6, 2, 1, 1)]
            {
                let a = flop_count(variant, d, m, n, layers, stride, 4).unwrap();
                let i = instrumented_flop_count(variant, d, m, n, layers, stride, 4).unwrap();
                let rel = (a as f64 - i as f64).abs() / i as f64;
                assert!(
                    rel <= 0.01,
                    "{variant} d={d} m={m} n={n}: analytical {a} vs instrumented {i}"
                );
            }
        }
    }

    #[test]
    fn variant_ordering_at_reference_dims() {
        let f = |v, s| flop_count(v, PAPER_D, PAPER_M, PAPER_N, 6, s, 4).unwrap();
        let co = f(FusionVariant::CoAttention, 6);
        let connected = f(FusionVariant::ConnectedAttention, 6);
        let skip = f(FusionVariant::SkipConnected, 6);
        let asym = f(FusionVariant::AsymmetricCoAttention, 6);
        assert!(co > connected && connected > skip && skip > asym);
        assert!((skip as f64) <= 0.5 * connected as f64);
        assert!((skip as f64) <= 0.5 * co as f64);
    }

    #[test]
    fn flops_strictly_decrease_with_stride() {
        let counts: Vec<u64> = [1usize, 2, 3, 6]
            .iter()
            .map(|&s| {
                flop_count(FusionVariant::SkipConnected, PAPER_D, PAPER_M, PAPER_N, 6, s, 4)
                    .unwrap()
            })
            .collect();
        for w in counts.windows(2) {
            assert!(w[0] > w[1], "flops not decreasing: {counts:?}");
        }
    }

    #[test]
    fn csv_round_trips() {
        let records = vec![BenchRecord {
            variant: FusionVariant::SkipConnected,
            d_model: 768,
            m_len: 256,
            n_len: 30,
            layers: 6,
            stride: 6,
            flops: 123_456_789,
            wall_seconds: 1.2345678901234,
            samples: 100,
            warmup: 5,
            host: host_descriptor(),
        }];
        let mut buf = Vec::new();
        write_csv(&mut buf, &records).unwrap();
        let parsed = parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn adam_profile_static_bytes_exact() {
        let act = ActivationSpec {
            n_layers: 6,
            seq_rows: 287,
            d_model: 768,
            bytes_per_element: 4,
            segments: 2,
        };
        let est = zero_memory_estimate(1_000_000, 1, PrecisionProfile::adam_fp32(), act).unwrap();
        assert_eq!(est.static_bytes_per_gpu, 20_000_000);
        assert_eq!(est.zero_bytes_per_gpu, est.static_bytes_per_gpu);
        assert!(est.activation_bytes_checkpointed <= est.activation_bytes_full);
    }

    #[test]
    fn zero_partition_rounding_bound() {
        let act = ActivationSpec {
            n_layers: 1,
            seq_rows: 1,
            d_model: 1,
            bytes_per_element: 4,
            segments: 1,
        };
        for n in [1u64, 8, 16] {
            let est =
                zero_memory_estimate(1_000_003, n, PrecisionProfile::adam_fp32(), act).unwrap();
            let lo = est.static_bytes_per_gpu;
            let hi = est.static_bytes_per_gpu + n;
            let prod = est.zero_bytes_per_gpu * n;
            assert!(prod >= lo && prod < hi, "n={n}: {prod} outside [{lo}, {hi})");
        }
    }
}
