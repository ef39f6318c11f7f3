//! Experiment runner for logic gate network training: single runs, factorial
//! sweeps over (method, temperature, seed), report aggregation, and hard
//! circuit export/verification.

mod config;
mod report;
mod run;
mod sweep;

use clap::{Args, Parser, Subcommand};
use gatenet::circuit::{
    eval_bitpacked, eval_scalar, extract_circuit, load_circuit, random_binary_features,
    save_circuit, verify_equivalence, BitBatch, PACKING_FACTOR,
};
use gatenet::error::{Error, Result};
use gatenet::network::Network;
use std::path::PathBuf;
use std::process::ExitCode;

use config::{exit_code_for, ExperimentConfig, MethodChoice};

#[derive(Parser)]
#[command(
    name = "gatenet",
    about = "Train and analyze differentiable logic gate networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write a run directory.
    Run(RunArgs),
    /// Run the Cartesian product of methods x temperatures x seeds.
    Sweep(SweepArgs),
    /// Aggregate a sweep manifest into gap and robustness tables.
    Report(ReportArgs),
    /// Extract the argmax hard circuit from a checkpoint.
    ExportCircuit(ExportArgs),
    /// Check bit-packed circuit evaluation against the float hard pipeline.
    VerifyCircuit(VerifyArgs),
}

/// Flags shared by run and sweep; unset flags fall back to --config values,
/// then to the defaults.
#[derive(Args, Clone)]
struct CommonArgs {
    /// Key-value config file mirroring these flag names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mnist | mnist-binary | cifar10-binary | parity | two-moons | teacher-circuit
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset files (or $GATENET_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Binarization threshold for mnist-binary (default 0.5).
    #[arg(long)]
    binarize: Option<f64>,
    /// Training subset size (seeded shuffle, then first N).
    #[arg(long)]
    subset: Option<usize>,
    /// Seed of the subset shuffle.
    #[arg(long)]
    subset_seed: Option<u64>,
    /// Test subset size (default: whole test set).
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Class count; must match the dataset when given.
    #[arg(long)]
    classes: Option<usize>,
    /// Feature count for synthetic datasets.
    #[arg(long)]
    synthetic_dims: Option<usize>,
    /// Sample count for synthetic datasets.
    #[arg(long)]
    synthetic_samples: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// on | off: adaptive backward temperature (hard methods only).
    #[arg(long)]
    cage: Option<String>,
    #[arg(long)]
    cage_tau_min: Option<f64>,
    #[arg(long)]
    cage_tau_max: Option<f64>,
    #[arg(long)]
    cage_beta: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Method-pass repeats per evaluation (stochastic methods).
    #[arg(long)]
    eval_repeats: Option<usize>,
    /// Draw selection noise per sample instead of per step.
    #[arg(long)]
    per_example_noise: bool,
    /// Also write the extracted hard circuit into the run directory.
    #[arg(long)]
    export_circuit: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// soft-mix | soft-gumbel | hard-st | gumbel-st (+ -cage variants)
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated method list.
    #[arg(long, default_value = "soft-mix,soft-gumbel,hard-st,gumbel-st")]
    methods: String,
    /// Comma-separated temperature grid.
    #[arg(long, default_value = "0.05,0.1,0.5,1.0,2.0")]
    tau_grid: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Bounded worker pool size.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep directory or manifest.json path.
    #[arg(long)]
    manifest: PathBuf,
    /// Optional CSV output path (defaults next to the manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn build_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_kv(&config::parse_kv_file(&text)?)?;
    }
    if let Some(v) = &common.dataset {
        cfg.dataset = config::DatasetChoice::parse(v)?;
    }
    if let Some(v) = &common.data_dir {
        cfg.data_dir = Some(v.clone());
    }
    if let Some(v) = common.binarize {
        cfg.binarize = Some(v);
    }
    if let Some(v) = common.subset {
        cfg.subset = Some(v);
    }
    if let Some(v) = common.subset_seed {
        cfg.subset_seed = v;
    }
    if let Some(v) = common.test_subset {
        cfg.test_subset = Some(v);
    }
    if let Some(v) = common.layers {
        cfg.layers = v;
    }
    if let Some(v) = common.width {
        cfg.width = v;
    }
    if let Some(v) = common.classes {
        cfg.classes = Some(v);
    }
    if let Some(v) = common.synthetic_dims {
        cfg.synthetic_dims = v;
    }
    if let Some(v) = common.synthetic_samples {
        cfg.synthetic_samples = v;
    }
    if let Some(v) = common.iters {
        cfg.iters = v;
    }
    if let Some(v) = common.batch {
        cfg.batch = v;
    }
    if let Some(v) = common.lr {
        cfg.lr = v;
    }
    if let Some(v) = &common.cage {
        cfg.choice.cage = match v.as_str() {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => {
                return Err(Error::config(format!(
                    "invalid --cage value '{other}'; expected on or off"
                )))
            }
        };
    }
    if let Some(v) = common.cage_tau_min {
        cfg.cage_tau_min = v;
    }
    if let Some(v) = common.cage_tau_max {
        cfg.cage_tau_max = v;
    }
    if let Some(v) = common.cage_beta {
        cfg.cage_beta = v;
    }
    if let Some(v) = common.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = common.eval_repeats {
        cfg.eval_repeats = v;
    }
    if common.per_example_noise {
        cfg.per_example_noise = true;
    }
    if common.export_circuit {
        cfg.export_circuit = true;
    }
    if let Some(v) = &common.out {
        cfg.out = v.clone();
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::config(format!("invalid {what} entry '{p}'")))
        })
        .collect()
}

fn cmd_run(args: &RunArgs) -> Result<u8> {
    let mut cfg = build_config(&args.common)?;
    if let Some(m) = &args.method {
        let keep_cage = args.common.cage.is_some() && cfg.choice.cage;
        cfg.choice = MethodChoice::parse(m)?;
        if keep_cage {
            cfg.choice.cage = true;
        }
    }
    if let Some(t) = args.tau {
        cfg.tau = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = run::execute(&cfg)?;
    let last = out.log.final_row();
    println!(
        "run directory: {} ({} nodes)",
        out.dir.display(),
        out.network.total_nodes()
    );
    if let Some(row) = last {
        println!(
            "final: iteration {} acc(method/soft/hard) {:.4}/{:.4}/{:.4} selection gap {:+.4}",
            row.iteration, row.a_method, row.a_soft, row.a_hard, row.selection_gap
        );
    }
    Ok(0)
}

fn cmd_sweep(args: &SweepArgs) -> Result<u8> {
    let base = build_config(&args.common)?;
    let methods = args
        .methods
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(MethodChoice::parse)
        .collect::<Result<Vec<_>>>()?;
    let grid = sweep::SweepGrid {
        methods,
        taus: parse_list(&args.tau_grid, "tau grid")?,
        seeds: parse_list(&args.seeds, "seed")?,
    };
    let manifest = sweep::run_sweep(&base, &grid, args.jobs)?;
    let done = manifest
        .cells
        .iter()
        .filter(|c| c.status == sweep::CellStatus::Completed)
        .count();
    println!(
        "sweep complete: {done}/{} cells, manifest at {}",
        manifest.cells.len(),
        base.out.join("manifest.json").display()
    );
    Ok(sweep::sweep_exit_code(&manifest))
}

fn cmd_report(args: &ReportArgs) -> Result<u8> {
    let manifest_path = if args.manifest.is_dir() {
        args.manifest.join("manifest.json")
    } else {
        args.manifest.clone()
    };
    let base_dir = manifest_path
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = sweep::Manifest::load(&manifest_path)?;
    let rep = report::build_report(&manifest, &base_dir)?;
    print!("{}", report::report_text(&rep));
    let csv_path = args
        .out
        .clone()
        .unwrap_or_else(|| base_dir.join("report.csv"));
    std::fs::write(&csv_path, report::report_csv(&rep))?;
    println!("\nwrote {}", csv_path.display());
    Ok(0)
}

fn cmd_export(args: &ExportArgs) -> Result<u8> {
    let net = Network::load_checkpoint(&args.checkpoint)?;
    let circuit = extract_circuit(&net);
    save_circuit(&circuit, &args.out)?;
    println!(
        "exported {} gates ({} layers, {} inputs, {} classes) to {}",
        circuit.gates.len(),
        circuit.layer_widths.len(),
        circuit.input_width,
        circuit.classes,
        args.out.display()
    );
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8> {
    let net = Network::load_checkpoint(&args.checkpoint)?;
    let circuit = load_circuit(&args.circuit)?;
    let report = verify_equivalence(&circuit, &net, args.samples, args.seed)?;
    println!("equivalence: {report}");

    if args.samples > 0 {
        // Wall-clock comparison of packed vs scalar circuit evaluation.
        let width = circuit.input_width;
        let features = random_binary_features(width, args.samples, args.seed);
        let batch = BitBatch::from_unit_features(&features, args.samples, width);
        let t0 = std::time::Instant::now();
        let _ = eval_bitpacked(&circuit, &batch)?;
        let packed = t0.elapsed();
        let t1 = std::time::Instant::now();
        for s in 0..args.samples {
            let bits: Vec<bool> = (0..width).map(|f| features[s * width + f] > 0.5).collect();
            let _ = eval_scalar(&circuit, &bits);
        }
        let scalar = t1.elapsed();
        println!(
            "throughput: packed {:.3}s, scalar {:.3}s, speedup {:.1}x (packing factor {PACKING_FACTOR})",
            packed.as_secs_f64(),
            scalar.as_secs_f64(),
            scalar.as_secs_f64() / packed.as_secs_f64().max(1e-12),
        );
    }
    if report.pass {
        Ok(0)
    } else {
        Err(Error::data(format!("circuit mismatch: {report}")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
        Command::ExportCircuit(args) => cmd_export(args),
        Command::VerifyCircuit(args) => cmd_verify(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
