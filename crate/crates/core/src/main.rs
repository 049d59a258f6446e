use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fedbnn::experiment::{parse_config, run, write_artifacts, ExperimentConfig, ExperimentMethod};
use fedbnn::Error;

/// Federated binary neural network training.
///
/// Exit status: 0 on success, 1 when a run fails, 2 for invalid
/// configuration. Config entries can be overridden with environment
/// variables such as FEDBNN_FEDERATION__ROUNDS=40.
#[derive(Debug, Parser)]
#[command(name = "fedbnn", version)]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for client updates (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,

    /// Output directory; overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,

    /// fedbnn, fedavg, fedbnn_beta1_lambda1 or fedbnn_client_aux.
    #[arg(long, value_name = "NAME")]
    method: Option<String>,

    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,

    /// Suppress per-round progress.
    #[arg(long, short)]
    quiet: bool,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path, std::env::vars())?,
        None => ExperimentConfig::from_toml_str("", std::env::vars())?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &cli.method {
        cfg.method = m.parse::<ExperimentMethod>()?;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        // an unreadable config file is a configuration problem too
        Err(e @ Error::Io { .. }) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => return fail(&e),
    };
    if cli.print_config {
        return match cfg.to_toml_string() {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        };
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }

    let rounds = cfg.federation.rounds;
    let quiet = cli.quiet;
    let out = match run(&cfg, |r| {
        if !quiet {
            eprintln!(
                "round {:>4}/{rounds}  train_loss {:.4}  val_real {:.4}  val_binary {:.4}{}",
                r.round + 1,
                r.train_loss,
                r.val_acc_real,
                r.val_acc_binary,
                if r.best_so_far { "  *" } else { "" }
            );
        }
    }) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    if let Err(e) = write_artifacts(&out, &cfg.output_dir) {
        return fail(&e);
    }
    let r = &out.report;
    println!("method            {}", r.method);
    println!("seed              {}", r.seed);
    println!("best round        {}", r.best_round + 1);
    println!("test acc (binary) {:.4}", r.test_acc_binary);
    println!("test acc (clean)  {:.4}", r.test_acc_clean);
    println!(
        "flops             {:.4e} real, {:.4e} binary ({:.2}x)",
        r.flops.real_flops, r.flops.binary_flops, r.flops.ratio
    );
    println!(
        "memory            {:.4} MB real, {:.4} MB binary ({:.2}x)",
        r.memory.real_mb, r.memory.binary_mb, r.memory.ratio
    );
    println!("rotation overhead {:.2}%", r.rotation_overhead.percent);
    println!("artifacts         {}", cfg.output_dir.display());
    ExitCode::SUCCESS
}
