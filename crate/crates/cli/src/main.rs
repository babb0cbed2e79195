//! `nlroi`: run the non-local RoI block from the command line.
//!
//! Exit codes: 0 success, 1 validation failure (bad arguments, inputs,
//! configs, or a failed check), 2 internal error.

use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use nlroi_core::autodiff::{grad_check, CheckDims};
use nlroi_core::bench::{run_bench, BenchDims};
use nlroi_core::config::parse_config;
use nlroi_core::io::{decode_params, encode_blob, encode_params, load_blob, AnyParams, AnyTensor};
use nlroi_core::toy::{constant_prediction_rate, train_with_progress, RunStatus};
use nlroi_core::{init_params, nlroi_forward, selftest, BlockDims, NlRoiParams, Real, Tensor};
use tempfile::NamedTempFile;

#[derive(Debug, Parser)]
#[command(name = "nlroi", version, about = "Non-local RoI attention block")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the block on an (N, D, H, W) blob and write the augmented blob.
    Forward {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the (N, N) attention matrix.
        #[arg(long)]
        emit_attention: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// N,D,D_f,D_g,H,W
        #[arg(long, default_value = "2,2,1,1,1,1")]
        dims: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Train on the synthetic cross-RoI task.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        /// Train the head alone, without the non-local block.
        #[arg(long)]
        baseline: bool,
        /// Where to write `epoch<TAB>loss<TAB>accuracy` records.
        #[arg(long, default_value = "metrics.tsv")]
        metrics: PathBuf,
    },
    /// Time forward passes over a list of RoI counts.
    Bench {
        /// Strictly increasing RoI counts, e.g. 1,2,4,8.
        #[arg(long)]
        n_list: String,
        /// D,D_f,D_g,H,W
        #[arg(long)]
        dims: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Write freshly initialized parameters to a params file.
    InitParams {
        /// D,D_f,D_g
        #[arg(long)]
        dims: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write binary64 instead of binary32.
        #[arg(long)]
        f64: bool,
    },
}

/// A failure mapped onto the exit-code contract.
enum Failure {
    Invalid(String),
    Internal(String),
}

impl Failure {
    fn invalid(e: impl Display) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<nlroi_core::Error> for Failure {
    fn from(e: nlroi_core::Error) -> Self {
        Failure::invalid(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("nlroi: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Forward {
            input,
            params,
            out,
            emit_attention,
        } => forward(&input, &params, &out, emit_attention.as_deref()),
        Command::Gradcheck { seed, dims, eps, tol } => gradcheck(seed, &dims, eps, tol),
        Command::TrainToy {
            config,
            baseline,
            metrics,
        } => train_toy(&config, baseline, &metrics),
        Command::Bench { n_list, dims, reps } => bench(&n_list, &dims, reps),
        Command::Selftest => run_selftest(),
        Command::InitParams { dims, seed, out, f64 } => write_init_params(&dims, seed, &out, f64),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("nlroi: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("nlroi: internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn parse_list<T: FromStr>(flag: &str, text: &str, len: Option<usize>) -> Result<Vec<T>, Failure> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::Invalid(format!("--{flag}: cannot parse {text:?}")))?;
    match len {
        Some(n) if values.len() != n => Err(Failure::Invalid(format!(
            "--{flag}: expected {n} comma-separated values, got {}",
            values.len()
        ))),
        _ => Ok(values),
    }
}

/// Writes every `(path, bytes)` pair or none of them: each file is staged
/// next to its destination and only renamed into place once all are staged.
fn write_all_or_nothing(outputs: &[(&Path, Vec<u8>)]) -> CmdResult {
    let mut staged = Vec::with_capacity(outputs.len());
    for (path, bytes) in outputs {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = NamedTempFile::new_in(dir)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.flush())
            .map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
        staged.push((tmp, *path));
    }
    let mut written: Vec<&Path> = Vec::new();
    for (tmp, path) in staged {
        if let Err(e) = tmp.persist(path) {
            for done in written {
                let _ = std::fs::remove_file(done);
            }
            return Err(Failure::Internal(format!("{}: {}", path.display(), e.error)));
        }
        written.push(path);
    }
    Ok(())
}

fn forward(input: &Path, params: &Path, out: &Path, attention: Option<&Path>) -> CmdResult {
    let x = load_blob(input)?;
    let params_bytes =
        std::fs::read(params).map_err(|e| Failure::Invalid(format!("{}: {e}", params.display())))?;
    let params = decode_params(&params_bytes)?;
    let (augmented, attn) = match (x, params) {
        (AnyTensor::F32(x), AnyParams::F32(p)) => run_forward(&x, &p)?,
        (AnyTensor::F64(x), AnyParams::F64(p)) => run_forward(&x, &p)?,
        (x, p) => {
            return Err(Failure::Invalid(format!(
                "input is {} but params are {}",
                x.dtype(),
                p.dtype()
            )))
        }
    };
    let mut outputs = vec![(out, augmented)];
    if let Some(path) = attention {
        outputs.push((path, attn));
    }
    write_all_or_nothing(&outputs)
}

fn run_forward<T: Real>(x: &Tensor<T>, params: &NlRoiParams<T>) -> Result<(Vec<u8>, Vec<u8>), Failure> {
    let out = nlroi_forward(x, params)?;
    Ok((encode_blob(&out.augmented), encode_blob(&out.attention)))
}

fn gradcheck(seed: u64, dims: &str, eps: f64, tol: f64) -> CmdResult {
    let v: Vec<usize> = parse_list("dims", dims, Some(6))?;
    let dims = CheckDims::new(v[0], v[1], v[2], v[3], v[4], v[5]);
    let report = grad_check(seed, dims, eps, tol)?;
    for (name, err) in &report.max_rel_err {
        println!("{name}\t{err:.3e}");
    }
    if report.passed {
        println!("pass: max relative error {:.3e} < {tol:e}", report.worst());
        Ok(())
    } else {
        Err(Failure::Invalid(format!(
            "gradient check failed: max relative error {:.3e} >= {tol:e}",
            report.worst()
        )))
    }
}

fn train_toy(config: &Path, baseline: bool, metrics: &Path) -> CmdResult {
    let config = parse_config(config)?;
    let result = train_with_progress::<f32>(&config, !baseline, |r| {
        println!("epoch {}\tloss {:.6}\taccuracy {:.4}", r.epoch, r.loss, r.accuracy);
    })?;
    if let RunStatus::Diverged { epoch, scene } = result.metrics.status {
        return Err(Failure::Invalid(format!(
            "training diverged (non-finite loss) at epoch {} scene {scene}",
            epoch + 1
        )));
    }
    let records: String = result
        .metrics
        .records
        .iter()
        .map(|r| format!("{}\t{}\t{}\n", r.epoch, r.loss, r.accuracy))
        .collect();
    write_all_or_nothing(&[(metrics, records.into_bytes())])?;
    println!(
        "final accuracy {:.4} (constant-prediction rate {:.4})",
        result.metrics.final_accuracy,
        constant_prediction_rate(config.rois, config.classes)
    );
    Ok(())
}

fn bench(n_list: &str, dims: &str, reps: usize) -> CmdResult {
    let ns: Vec<usize> = parse_list("n-list", n_list, None)?;
    let d: Vec<usize> = parse_list("dims", dims, Some(5))?;
    let dims = BenchDims {
        d: d[0],
        d_f: d[1],
        d_g: d[2],
        h: d[3],
        w: d[4],
    };
    let report = run_bench(&ns, dims, reps)?;
    for record in &report.records {
        println!("{record}");
    }
    Ok(())
}

fn run_selftest() -> CmdResult {
    let outcomes = selftest::run();
    for o in &outcomes {
        println!("{}\t{}\t{}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{failed} of {} checks failed", outcomes.len())))
    }
}

fn write_init_params(dims: &str, seed: u64, out: &Path, wide: bool) -> CmdResult {
    let d: Vec<usize> = parse_list("dims", dims, Some(3))?;
    let dims = BlockDims::new(d[0], d[1], d[2])?;
    let bytes = if wide {
        encode_params(&init_params::<f64>(dims, seed))
    } else {
        encode_params(&init_params::<f32>(dims, seed))
    };
    write_all_or_nothing(&[(out, bytes)])
}
