//! Command-line interface: train the experiments, certify model files,
//! invert layers with either solver, sweep solver step sizes, and run the
//! PL / bi-Lipschitz verifiers.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 certification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bilip_core::harness::{run_experiment, Experiment, ExperimentConfig};
use bilip_core::model_io::{load_model, save_model, ModelParams, SavedModel};
use bilip_core::plnet::{verify, PLNet};
use bilip_core::solvers::{
    append_trace_csv, dys_invert, fsm_invert, SolverConfig, SolverKind, TRACE_CSV_HEADER,
};
use bilip_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bilipnet",
    about = "Certified bi-Lipschitz networks: training, exact inversion, and verification",
    version
)]
struct Cli {
    /// Seed override applied to whatever the subcommand seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for generated files
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the monotonicity/Lipschitz certificate of every layer
    Certify {
        model: PathBuf,
    },
    /// Invert a model at a target point with DYS or FSM
    Invert(InvertArgs),
    /// Train one of the built-in experiments
    Train(TrainArgs),
    /// Residual traces for a DYS step-size sweep against FSM
    BenchSolvers(BenchArgs),
    /// PL-inequality sweep plus empirical bi-Lipschitz estimates
    Verify(VerifyArgs),
}

#[derive(Args)]
struct InvertArgs {
    model: PathBuf,
    /// Target vector, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    y: Vec<f64>,
    #[arg(long, default_value = "dys")]
    solver: String,
    /// Step size; defaults to 0.9 mu/gamma (DYS) or mu/nu^2 (FSM)
    #[arg(long)]
    alpha: Option<f64>,
    /// Allow a step size outside the guaranteed range
    #[arg(long)]
    force_alpha: bool,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 20000)]
    max_iters: usize,
    /// Write the residual trace CSV here
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// step | rb2d | rb2d-sine | rb2d-param | rbNd
    #[arg(long)]
    experiment: String,
    /// Flat key=value config overriding the experiment defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print per-epoch progress to stderr
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Which monotone layer to exercise
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Fractions of the DYS bound mu/gamma to sweep
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.7, 0.9])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 200000)]
    max_iters: usize,
    /// Output CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    model: PathBuf,
    #[arg(long, default_value_t = 10000)]
    samples: usize,
    /// Sampling box per dimension as lo:hi pairs, comma separated; defaults
    /// to the training box stored in the model (inflated by 25%)
    #[arg(long)]
    domain: Option<String>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 20000)]
    max_iters: usize,
    /// Write the verification report JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Print to stdout, exiting quietly if the reader closed the pipe.
fn emit(s: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    if out.write_all(s.as_bytes()).is_err() || out.flush().is_err() {
        std::process::exit(0);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are successes; anything else is a usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Certify { model } => certify(&model),
        Command::Invert(args) => invert(args),
        Command::Train(args) => train_cmd(args, cli.seed, &cli.out_dir),
        Command::BenchSolvers(args) => bench_solvers(args, cli.seed),
        Command::Verify(args) => verify_cmd(args, cli.seed, &cli.out_dir),
    }
}

fn certify(path: &PathBuf) -> Result<()> {
    let SavedModel { params, .. } = load_model(path)?;
    let core = params.materialize_core()?;
    let reports = core.certificates();
    let mut ok = true;
    for (k, r) in reports.iter().enumerate() {
        let pass = r.certified();
        ok &= pass;
        emit(&format!(
            "layer {k}: y_eq_err={:.3e} h_margin={:.3e} lemma_v={:.3e} lemma_s={:.3e} [{}]\n",
            r.y_eq_err,
            r.h_margin,
            r.lemma_v_margin,
            r.lemma_s_margin,
            if pass { "certified" } else { "FAILED" }
        ));
    }
    emit(&format!(
        "model: mu={:.6} nu={:.6} tau={:.6}\n",
        core.mu(),
        core.nu(),
        core.tau()
    ));
    if ok {
        Ok(())
    } else {
        Err(Error::Certification("certificate check failed".into()))
    }
}

fn invert(args: InvertArgs) -> Result<()> {
    let SavedModel { params, .. } = load_model(&args.model)?;
    let core = params.materialize_core()?;
    let cfg = SolverConfig {
        kind: SolverKind::parse(&args.solver)?,
        alpha: args.alpha,
        tol: args.tol,
        max_iters: args.max_iters,
        record_trace: true,
        force_alpha: args.force_alpha,
        ..SolverConfig::default()
    };
    let solve = core.inverse(&args.y, &cfg)?;
    let xs: Vec<String> = solve.x.iter().map(|v| format!("{v}")).collect();
    emit(&format!("x = {}\n", xs.join(",")));
    emit(&format!(
        "iterations = {} (per layer: {:?})\n",
        solve.total_iters(),
        solve
            .layer_solves
            .iter()
            .map(|s| s.iters)
            .collect::<Vec<_>>()
    ));
    if let Some(path) = args.trace_out {
        let mut buf = String::from(TRACE_CSV_HEADER);
        buf.push('\n');
        for (i, s) in solve.layer_solves.iter().enumerate() {
            if let Some(trace) = &s.trace {
                let alpha = args.alpha.unwrap_or(f64::NAN);
                append_trace_csv(&mut buf, &format!("{}-layer{i}", args.solver), alpha, trace);
            }
        }
        std::fs::write(&path, buf)?;
        emit(&format!("trace written to {}\n", path.display()));
    }
    Ok(())
}

fn train_cmd(args: TrainArgs, seed: Option<u64>, out_dir: &PathBuf) -> Result<()> {
    let exp = Experiment::parse(&args.experiment)?;
    let mut cfg = ExperimentConfig::default_for(exp);
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if args.verbose && cfg.log_every == 0 {
        cfg.log_every = 1;
    }
    std::fs::create_dir_all(out_dir)?;
    let (params, result) = run_experiment(exp, &cfg)?;

    let train_domain = match exp {
        Experiment::Step => vec![(-2.0, 2.0)],
        Experiment::Rb2d | Experiment::Rb2dSine => vec![(-2.0, 2.0), (-1.0, 3.0)],
        Experiment::Rb2dParam => vec![(-2.0, 2.0), (-1.0, 3.0), (-1.0, 1.0), (-1.0, 1.0)],
        Experiment::RbNd => vec![(-2.0, 2.0); cfg.dims],
    };
    let model_path = out_dir.join(format!("{}-model.blnm", exp.name()));
    save_model(&model_path, &params, Some(&train_domain))?;
    let result_path = out_dir.join(format!("{}-result.json", exp.name()));
    let json = serde_json::to_string_pretty(&result)?;
    std::fs::write(&result_path, &json)?;
    emit(&json);
    emit("\n");
    eprintln!(
        "model -> {}\nresult -> {}",
        model_path.display(),
        result_path.display()
    );
    Ok(())
}

fn bench_solvers(args: BenchArgs, seed: Option<u64>) -> Result<()> {
    let SavedModel { params, .. } = load_model(&args.model)?;
    let core = params.materialize_core()?;
    let layer = core.mono.get(args.layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {} out of range (model has {})",
            args.layer,
            core.mono.len()
        ))
    })?;

    // target from a seeded preimage so every solver chases the same point
    let seed = seed.unwrap_or(0);
    let x0 = bilip_core::cayley::seeded_normal(layer.input_dim, 1, 1.0, seed)
        .data()
        .to_vec();
    let y = layer.forward_vec(&x0)?;

    let mut buf = String::from(TRACE_CSV_HEADER);
    buf.push('\n');
    let bound = layer.mu / (layer.nu - layer.mu);
    for frac in &args.fractions {
        let alpha = frac * bound;
        let cfg = SolverConfig {
            alpha: Some(alpha),
            tol: args.tol,
            max_iters: args.max_iters,
            record_trace: true,
            ..SolverConfig::default()
        };
        let solve = dys_invert(layer, &y, &cfg)?;
        append_trace_csv(&mut buf, "dys", alpha, solve.trace.as_deref().unwrap_or(&[]));
    }
    let fsm_alpha = layer.mu / (layer.nu * layer.nu);
    let cfg = SolverConfig {
        kind: SolverKind::Fsm,
        tol: args.tol,
        max_iters: args.max_iters,
        record_trace: true,
        ..SolverConfig::default()
    };
    let solve = fsm_invert(layer, &y, &cfg)?;
    append_trace_csv(&mut buf, "fsm", fsm_alpha, solve.trace.as_deref().unwrap_or(&[]));

    match args.out {
        Some(path) => {
            std::fs::write(&path, buf)?;
            eprintln!("traces -> {}", path.display());
        }
        None => emit(&buf),
    }
    Ok(())
}

fn verify_cmd(args: VerifyArgs, seed: Option<u64>, out_dir: &PathBuf) -> Result<()> {
    let SavedModel { params, domain } = load_model(&args.model)?;
    let net = match &params {
        ModelParams::Pl { .. } | ModelParams::ConditionedPl { .. } => params.as_plnet()?,
        // a plain bi-Lipschitz model still defines a valid potential with c = 0
        _ => PLNet::new(params.materialize_core()?, 0.0),
    };
    let n = net.input_dim();
    let domain: Vec<(f64, f64)> = match &args.domain {
        Some(spec) => parse_domain(spec, n)?,
        None => match domain {
            Some(d) => d
                .iter()
                .take(n)
                .map(|(lo, hi)| {
                    let pad = 0.25 * (hi - lo) * 0.5;
                    (lo - pad, hi + pad)
                })
                .collect(),
            None => vec![(-2.5, 2.5); n],
        },
    };
    if domain.len() != n {
        return Err(Error::Config(format!(
            "domain has {} dims, model needs {n}",
            domain.len()
        )));
    }
    let cfg = SolverConfig {
        tol: args.tol,
        max_iters: args.max_iters,
        ..SolverConfig::default()
    };
    let report = verify(&net, args.samples, seed.unwrap_or(0), &domain, &cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    emit(&json);
    emit("\n");
    if let Some(path) = &args.out {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(path, &json)?;
    }
    if report.pl_violations > 0 {
        return Err(Error::Certification(format!(
            "{} PL violations (worst margin {:.3e})",
            report.pl_violations, report.pl_worst_margin
        )));
    }
    Ok(())
}

fn parse_domain(spec: &str, n: usize) -> Result<Vec<(f64, f64)>> {
    let parts: Vec<&str> = spec.split(',').collect();
    let mut out = Vec::with_capacity(parts.len());
    for part in parts {
        let Some((lo, hi)) = part.split_once(':') else {
            return Err(Error::Config(format!("bad domain component `{part}`")));
        };
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad domain bound `{lo}`")))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad domain bound `{hi}`")))?;
        out.push((lo, hi));
    }
    if out.len() == 1 && n > 1 {
        return Ok(vec![out[0]; n]);
    }
    Ok(out)
}
