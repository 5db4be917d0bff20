//! Command-line entry point: benchmarks, stride sweeps, analytical FLOP
//! counts, toy training, gradient checking, and the memory calculator.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Flags override
//! values from an optional `--config` TOML file; `SKIPFUSE_SEED` is used
//! when no `--seed` is given.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::synthetic_pairs;
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::gradcheck::grad_check_params;
use crate::model::Model;
use crate::objectives;
use crate::optim::{Optimizer, OptimizerKind};
use crate::perf::{
    benchmark_forward, flop_count, stride_sweep, write_csv, zero_memory_estimate,
    ActivationSpec, BenchRecord, PrecisionProfile,
};
use crate::tape::Tape;
use crate::tensor::Element;

#[derive(Parser)]
#[command(
    name = "skipfuse",
    about = "Cross-modal skip-connected fusion: benchmarks, training, and cost models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the perf commands. `--m` counts image patches excluding
/// the CLS row (e.g. 256 for a 256x256 image with 16x16 patches); the CLS
/// row is added internally. `--n` likewise counts text tokens excluding CLS.
#[derive(Args)]
struct DimArgs {
    /// Optional TOML config; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding width
    #[arg(long, default_value_t = 768)]
    d_model: usize,
    /// Image patch count, excluding the CLS row (added internally)
    #[arg(long, default_value_t = 256)]
    m: usize,
    /// Text token count, excluding the CLS row (added internally)
    #[arg(long, default_value_t = 30)]
    n: usize,
    /// Asymmetric co-attention layer count L
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Asymmetric layers per connected layer (SkipConnected only)
    #[arg(long, default_value_t = 6)]
    stride: usize,
    /// RNG seed; falls back to $SKIPFUSE_SEED, then the config value
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (default stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl DimArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let base = ModelConfig::toy();
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_file(p, base)?,
            None => base,
        };
        cfg.d_model = self.d_model;
        cfg.n_heads = [12usize, 8, 4, 2, 1]
            .into_iter()
            .find(|h| self.d_model % h == 0)
            .unwrap_or(1);
        cfg.n_fusion_asym_layers = self.layers;
        cfg.stride = self.stride;
        cfg.seed = resolve_seed(self.seed, cfg.seed);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Time one fusion variant's forward pass and emit a CSV row
    Bench {
        #[command(flatten)]
        dims: DimArgs,
        /// Fusion variant: skip | connected | co | asym
        #[arg(long, default_value = "skip")]
        variant: FusionVariant,
        /// Timed forward passes
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Untimed passes before measurement
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Benchmark SkipConnected at several strides; one CSV row per stride
    SweepStride {
        #[command(flatten)]
        dims: DimArgs,
        /// Comma-separated strides; each must divide --layers
        #[arg(long, default_value = "1,2,3,6", value_delimiter = ',')]
        strides: Vec<usize>,
        /// Timed forward passes per stride
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Untimed passes before measurement
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Analytical FLOP counts only (wall_seconds column is 0)
    Flops {
        #[command(flatten)]
        dims: DimArgs,
        /// Restrict to one variant; all four when omitted
        #[arg(long)]
        variant: Option<FusionVariant>,
    },
    /// Train the toy model on synthetic image-caption pairs
    TrainToy {
        /// Optional TOML config; flags below override its values
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fusion variant: skip | connected | co | asym
        #[arg(long, default_value = "skip")]
        variant: FusionVariant,
        /// Optimization steps
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Synthetic pair pool size
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        /// Pairs per step
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Learning rate
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        /// sgd (momentum 0.9) or adam
        #[arg(long, default_value = "sgd")]
        optimizer: OptimizerKind,
        /// RNG seed; falls back to $SKIPFUSE_SEED, then the config value
        #[arg(long)]
        seed: Option<u64>,
        /// Write a checkpoint of the trained weights here
        #[arg(long)]
        save: Option<PathBuf>,
        /// Write the fused output of the first pair here as raw f32 bytes
        #[arg(long)]
        dump_fused: Option<PathBuf>,
        /// Training log destination (default stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a small end-to-end loss
    Gradcheck {
        /// RNG seed; falls back to $SKIPFUSE_SEED, then 0
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Data-parallel (ZeRO-style) memory estimates
    Memory {
        /// Trainable parameter count
        #[arg(long, default_value_t = 1_000_000)]
        params: u64,
        /// Comma-separated data-parallel group sizes
        #[arg(long, default_value = "1,8,16", value_delimiter = ',')]
        gpus: Vec<u64>,
        /// Layers in the activation model
        #[arg(long, default_value_t = 6)]
        layers: u64,
        /// Activation rows per layer (sequence length)
        #[arg(long, default_value_t = 287)]
        rows: u64,
        /// Activation width
        #[arg(long, default_value_t = 768)]
        d_model: u64,
        /// Gradient-checkpointing segments
        #[arg(long, default_value_t = 2)]
        segments: u64,
        /// Output file (default stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_seed(flag: Option<u64>, config_default: u64) -> u64 {
    flag.or_else(|| {
        std::env::var("SKIPFUSE_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(config_default)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn emit_records(out: &Option<PathBuf>, records: &[BenchRecord]) -> Result<()> {
    let mut w = output(out)?;
    write_csv(&mut w, records)
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Bench {
            dims,
            variant,
            samples,
            warmup,
        } => {
            let cfg = dims.resolve()?;
            let rec = benchmark_forward(variant, &cfg, dims.m, dims.n, samples, warmup)?;
            emit_records(&dims.out, &[rec])?;
            Ok(0)
        }
        Command::SweepStride {
            dims,
            strides,
            samples,
            warmup,
        } => {
            let cfg = dims.resolve()?;
            let recs = stride_sweep(&cfg, dims.m, dims.n, &strides, samples, warmup)?;
            emit_records(&dims.out, &recs)?;
            Ok(0)
        }
        Command::Flops { dims, variant } => {
            let cfg = dims.resolve()?;
            let variants: Vec<FusionVariant> = match variant {
                Some(v) => vec![v],
                None => FusionVariant::ALL.to_vec(),
            };
            let recs: Vec<BenchRecord> = variants
                .into_iter()
                .map(|v| {
                    Ok(BenchRecord {
                        variant: v,
                        d_model: cfg.d_model,
                        m_len: dims.m,
                        n_len: dims.n,
                        layers: cfg.n_fusion_asym_layers,
                        stride: cfg.stride,
                        flops: flop_count(
                            v,
                            cfg.d_model,
                            dims.m,
                            dims.n,
                            cfg.n_fusion_asym_layers,
                            cfg.stride,
                            cfg.ffn_multiplier,
                        )?,
                        wall_seconds: 0.0,
                        samples: 0,
                        warmup: 0,
                        host: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
                    })
                })
                .collect::<Result<_>>()?;
            emit_records(&dims.out, &recs)?;
            Ok(0)
        }
        Command::TrainToy {
            config,
            variant,
            steps,
            pairs,
            batch_size,
            lr,
            optimizer,
            seed,
            save,
            dump_fused,
            out,
        } => {
            let base = ModelConfig::toy();
            let mut cfg = match &config {
                Some(p) => ModelConfig::from_file(p, base)?,
                None => base,
            };
            cfg.seed = resolve_seed(seed, cfg.seed);
            let mut model = Model::<f32>::new(&cfg, variant)?;
            let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let pool = synthetic_pairs::<f32>(&cfg, pairs, &mut data_rng)?;
            let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
            let mut opt = Optimizer::new(optimizer, lr);
            let mut log = output(&out)?;
            objectives::train(
                &mut model,
                &pool,
                steps,
                batch_size,
                &mut opt,
                &mut train_rng,
                Some(&mut log),
            )?;
            if let Some(path) = save {
                model.save(&path)?;
            }
            if let Some(path) = dump_fused {
                dump_fused_output(&model, &pool.images[0], &pool.token_ids[0], &path)?;
            }
            Ok(0)
        }
        Command::Gradcheck { seed } => {
            let seed = resolve_seed(seed, 0);
            let err = gradcheck_small(seed)?;
            println!("max relative error: {err:.3e}");
            Ok(if err < 1e-4 { 0 } else { 2 })
        }
        Command::Memory {
            params,
            gpus,
            layers,
            rows,
            d_model,
            segments,
            out,
        } => {
            let mut w = output(&out)?;
            writeln!(
                w,
                "n_gpus,param_count,static_bytes,zero_bytes,activation_full,activation_checkpointed,recompute_multiplier"
            )?;
            for n in gpus {
                let est = zero_memory_estimate(
                    params,
                    n,
                    PrecisionProfile::adam_fp32(),
                    ActivationSpec {
                        n_layers: layers,
                        seq_rows: rows,
                        d_model,
                        bytes_per_element: 4,
                        segments,
                    },
                )?;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    est.n_gpus,
                    est.param_count,
                    est.static_bytes_per_gpu,
                    est.zero_bytes_per_gpu,
                    est.activation_bytes_full,
                    est.activation_bytes_checkpointed,
                    est.recompute_forward_multiplier
                )?;
            }
            Ok(0)
        }
    }
}

/// Tiny f64 configuration for gradient checking.
fn gradcheck_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_visual_layers = 1;
    cfg.n_text_layers = 1;
    cfg.n_fusion_asym_layers = 1;
    cfg.stride = 1;
    cfg.n_decoder_layers = 1;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.vocab_size = 24;
    cfg.max_text_len = 4;
    cfg.ffn_multiplier = 2;
    cfg.queue_size = 8;
    cfg.seed = seed;
    cfg
}

fn gradcheck_small(seed: u64) -> Result<f64> {
    let cfg = gradcheck_config(seed);
    let model = Model::<f64>::new(&cfg, FusionVariant::SkipConnected)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = synthetic_pairs::<f64>(&cfg, 2, &mut rng)?;

    // a handful of weights from different layer families; checking every
    // element of every tensor is the acceptance suite's job
    let all = model.params();
    let chosen: Vec<_> = all
        .iter()
        .filter(|p| {
            let n = p.name();
            n == "itm_head.w"
                || n.contains("fusion.asym0.ca.q")
                || n.contains("fusion.connected1.sa.o")
                || n.contains("decoder.layer0.sa.q")
        })
        .cloned()
        .collect();

    let loss_fn = |tape: &mut Tape<f64>| -> Result<crate::tape::Val> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let enc = objectives::encode_batch(tape, &model, &batch)?;
        let (itc, _, _) = objectives::itc_forward(tape, &model, &batch, &enc)?;
        let itm = objectives::itm_loss(
            tape,
            &model,
            &enc,
            &itc.similarities,
            objectives::HardNegativeMode::Argmax,
            &mut rng,
        )?;
        let mlm = objectives::mlm_loss(tape, &model, &batch, &enc, &mut rng)?;
        let plm = objectives::prefix_lm_loss(tape, &model, &batch, &enc, Some(1), &mut rng)?;
        let a = tape.add(itc.loss, itm)?;
        let b = tape.add(mlm, plm)?;
        tape.add(a, b)
    };
    grad_check_params(loss_fn, &chosen, 1e-4)
}

fn dump_fused_output<E: Element>(
    model: &Model<E>,
    image: &crate::tensor::Tensor<E>,
    tokens: &[usize],
    path: &std::path::Path,
) -> Result<()> {
    let mut tape = Tape::<E>::no_grad();
    let vseq = model.visual.encode(&mut tape, image)?;
    let tseq = model.text.encode(&mut tape, tokens)?;
    let fused = model.fuse(&mut tape, &vseq, &tseq)?;
    let mut bytes = Vec::new();
    for val in [fused.v, fused.l] {
        for &x in tape.value(val).data() {
            bytes.extend_from_slice(&(x.to_real() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero_and_unknown_flag_exits_one() {
        assert_eq!(run(["skipfuse", "--help"]), 0);
        assert_eq!(run(["skipfuse", "bench", "--help"]), 0);
        assert_eq!(run(["skipfuse", "bench", "--no-such-flag"]), 1);
        assert_eq!(run(["skipfuse", "frobnicate"]), 1);
    }

    #[test]
    fn flops_command_emits_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("flops.csv");
        let code = run([
            "skipfuse",
            "flops",
            "--d-model",
            "64",
            "--m",
            "8",
            "--n",
            "4",
            "--layers",
            "2",
            "--stride",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(&out).unwrap();
        let recs = crate::perf::parse_csv(&text).unwrap();
        assert_eq!(recs.len(), 4);
    }

    #[test]
    fn memory_command_runs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("mem.csv");
        let code = run([
            "skipfuse",
            "memory",
            "--params",
            "1000000",
            "--gpus",
            "1,16",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("20000000"));
    }

    #[test]
    fn bad_stride_is_runtime_error() {
        assert_eq!(
            run(["skipfuse", "flops", "--layers", "6", "--stride", "4"]),
            2
        );
    }
}
