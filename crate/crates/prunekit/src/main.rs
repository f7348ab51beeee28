//! Command-line entry point: experiments, sweeps, Pareto analysis,
//! latency benchmarks, and figure-data emission.

use clap::{Parser, Subcommand};
use prunekit::bench;
use prunekit::config::{default_config, ExperimentConfig};
use prunekit::error::{Error, Result};
use prunekit::experiments::{
    self, budget_compare, enumerate_mixtures, pareto_frontier, BudgetPoint, MemberRun, Provenance,
    RunReport,
};
use prunekit::pruning::{Scope, Selector, Structure};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "prunekit",
    about = "Multitask pruning engine: magnitude/movement x element-wise/rank x global/local",
    version
)]
struct Cli {
    /// Suppress progress output on stdout
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and write report.json plus a checkpoint
    Run {
        /// Path to an ExperimentConfig JSON file
        #[arg(long)]
        config: PathBuf,
        /// Seed override (precedence: flag > PRUNEKIT_SEED > config)
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory override
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the 8-setting grid over densities and seeds; write a CSV summary
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Final densities to sweep, comma separated
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2])]
        densities: Vec<f64>,
        /// Seeds to sweep, comma separated (default: the resolved config seed)
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Parallel worker threads
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute the mixture Pareto frontier and budget comparison from run dirs
    Pareto {
        /// Directories containing report.json files
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "pareto")]
        output: PathBuf,
    },
    /// Benchmark dense vs rank-factored products
    Bench {
        /// Weight shape, MxN
        #[arg(long, default_value = "768x3072")]
        shape: String,
        /// Batch rows l
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Retained-rank fractions of min(m, n), comma separated
        #[arg(long, value_delimiter = ',',
              default_values_t = vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0])]
        densities: Vec<f64>,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        /// Threads per measured kernel
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "bench.csv")]
        output: PathBuf,
    },
    /// Emit per-figure CSV series from finished run dirs
    Figdata {
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "figdata")]
        output: PathBuf,
    },
    /// Print the documented default configuration as JSON
    DefaultConfig,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numerical { .. } | Error::SvdNonConvergence { .. } => 3,
        _ => 2,
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// flag > PRUNEKIT_SEED > config file
fn resolve_seed(cfg: &mut ExperimentConfig, flag: Option<u64>) -> Result<()> {
    if let Some(s) = flag {
        cfg.training.seed = s;
    } else if let Ok(env) = std::env::var("PRUNEKIT_SEED") {
        cfg.training.seed = env
            .parse()
            .map_err(|e| Error::Config(format!("PRUNEKIT_SEED not a u64: {e}")))?;
    }
    Ok(())
}

fn sweep_csv_header() -> &'static str {
    "run_id,selector,structure,scope,final_density,task_id,dev_metric,macro,param_fraction,seed,wall_clock_s"
}

fn setting_name(s: Selector) -> &'static str {
    match s {
        Selector::Magnitude => "magnitude",
        Selector::Movement => "movement",
    }
}

fn structure_name(s: Structure) -> &'static str {
    match s {
        Structure::ElementWise => "element_wise",
        Structure::Rank => "rank",
    }
}

fn scope_name(s: Scope) -> &'static str {
    match s {
        Scope::Global => "global",
        Scope::Local => "local",
    }
}

fn sweep_csv_rows(report: &RunReport) -> Vec<String> {
    report
        .final_metrics
        .iter()
        .map(|(task_id, metric)| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                report.run_id,
                setting_name(report.selector),
                structure_name(report.structure),
                scope_name(report.scope),
                report.final_density,
                task_id,
                metric,
                report.macro_metric,
                report.final_param_fraction,
                report.seed,
                report.wall_clock_s,
            )
        })
        .collect()
}

fn cmd_run(config: &Path, seed: Option<u64>, output: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    resolve_seed(&mut cfg, seed)?;
    if let Some(out) = output {
        cfg.output_dir = out;
    }
    let report = experiments::run_experiment(&cfg)?;
    let path = cfg.output_dir.join(&report.run_id).join("report.json");
    atomic_write(&path, &serde_json::to_vec_pretty(&report)?)?;
    if !quiet {
        println!(
            "run {} done: fraction {:.4}, macro {:.4} -> {}",
            report.run_id,
            report.final_param_fraction,
            report.macro_metric,
            path.display()
        );
    }
    if let Some(abort) = &report.aborted {
        return Err(Error::numerical("run_experiment", abort.detail.clone()));
    }
    Ok(())
}

fn all_settings() -> Vec<(Selector, Structure, Scope)> {
    let mut out = Vec::new();
    for sel in [Selector::Magnitude, Selector::Movement] {
        for st in [Structure::ElementWise, Structure::Rank] {
            for sc in [Scope::Global, Scope::Local] {
                out.push((sel, st, sc));
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: &Path,
    densities: &[f64],
    seeds: &[u64],
    jobs: usize,
    seed: Option<u64>,
    output: Option<PathBuf>,
    quiet: bool,
) -> Result<()> {
    let mut base = ExperimentConfig::load(config)?;
    resolve_seed(&mut base, seed)?;
    if let Some(out) = output {
        base.output_dir = out;
    }
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.training.seed] } else { seeds.to_vec() };
    let mut configs = Vec::new();
    for &(sel, st, sc) in all_settings().iter() {
        for &d in densities {
            for &s in &seeds {
                let mut cfg = base.clone();
                cfg.prune.selector = sel;
                cfg.prune.structure = st;
                cfg.prune.scope = sc;
                cfg.prune.final_density = d;
                // the grid settings are defined on one shared score set
                cfg.mask_mode = prunekit::multitask::MaskMode::Shared;
                cfg.training.seed = s;
                cfg.validate()?;
                configs.push(cfg);
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let reports: Result<Vec<RunReport>> = pool.install(|| {
        use rayon::prelude::*;
        configs.par_iter().map(experiments::run_experiment).collect()
    });
    let reports = reports?;
    let mut csv = vec![sweep_csv_header().to_string()];
    for r in &reports {
        csv.extend(sweep_csv_rows(r));
        if !quiet {
            println!(
                "sweep {}/{}/{} d={} s={}: macro {:.4}",
                setting_name(r.selector),
                structure_name(r.structure),
                scope_name(r.scope),
                r.final_density,
                r.seed,
                r.macro_metric
            );
        }
        let path = base.output_dir.join(&r.run_id).join("report.json");
        atomic_write(&path, &serde_json::to_vec_pretty(r)?)?;
    }
    let path = base.output_dir.join("sweep.csv");
    atomic_write(&path, (csv.join("\n") + "\n").as_bytes())?;
    if !quiet {
        println!("sweep summary -> {}", path.display());
    }
    if let Some(abort) = reports.iter().find_map(|r| r.aborted.as_ref()) {
        return Err(Error::numerical("sweep", abort.detail.clone()));
    }
    Ok(())
}

/// Loads every report.json under the given dirs (each dir may be a run
/// dir or a parent of run dirs). Missing reports are an error listing
/// the offending path.
fn load_reports(dirs: &[PathBuf]) -> Result<Vec<RunReport>> {
    if dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut reports = Vec::new();
    for dir in dirs {
        let direct = dir.join("report.json");
        let mut found = false;
        if direct.exists() {
            reports.push(serde_json::from_slice(&std::fs::read(&direct)?)?);
            found = true;
        } else if dir.is_dir() {
            let mut entries: Vec<PathBuf> =
                std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            entries.sort();
            for sub in entries {
                let p = sub.join("report.json");
                if p.exists() {
                    reports.push(serde_json::from_slice(&std::fs::read(&p)?)?);
                    found = true;
                }
            }
        }
        if !found {
            return Err(Error::Config(format!("no report.json under {}", dir.display())));
        }
    }
    Ok(reports)
}

/// Single-task reports become mixture members grouped by task; multitask
/// reports become budget points scored by their macro metric.
fn split_reports(reports: &[RunReport]) -> (Vec<Vec<MemberRun>>, Vec<BudgetPoint>) {
    let mut members: std::collections::BTreeMap<String, Vec<MemberRun>> = Default::default();
    let mut multitask = Vec::new();
    for r in reports {
        if r.final_metrics.len() == 1 {
            let (task_id, metric) = r.final_metrics.iter().next().expect("one metric");
            members.entry(task_id.clone()).or_default().push(MemberRun {
                run_id: r.run_id.clone(),
                task_id: task_id.clone(),
                size: r.final_param_fraction,
                metric: *metric,
            });
        } else {
            multitask.push(BudgetPoint {
                size: r.final_param_fraction,
                metric: r.macro_metric,
                provenance: Provenance::Multitask { run_id: r.run_id.clone() },
            });
        }
    }
    (members.into_values().collect(), multitask)
}

fn provenance_label(p: &Provenance) -> String {
    match p {
        Provenance::Multitask { run_id } => format!("multitask:{run_id}"),
        Provenance::Mixture { run_ids } => format!("mixture:{}", run_ids.join(";")),
    }
}

fn cmd_pareto(dirs: &[PathBuf], output: &Path, quiet: bool) -> Result<()> {
    let reports = load_reports(dirs)?;
    let (members, multitask) = split_reports(&reports);
    if members.is_empty() {
        return Err(Error::Config("pareto needs single-task runs to form mixtures".into()));
    }
    let mixtures = enumerate_mixtures(&members)?;
    let frontier = pareto_frontier(&mixtures)?;
    let mut csv = vec!["size,metric,provenance".to_string()];
    for p in &frontier {
        csv.push(format!("{},{},{}", p.size, p.metric, provenance_label(&p.provenance)));
    }
    atomic_write(&output.join("frontier.csv"), (csv.join("\n") + "\n").as_bytes())?;
    if !multitask.is_empty() {
        let rows = budget_compare(&multitask, &frontier)?;
        let mut csv =
            vec!["budget,multitask_metric,mixture_size,mixture_metric,delta,flagged".to_string()];
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &rows {
            csv.push(format!(
                "{},{},{},{},{},{}",
                r.budget,
                r.multitask_metric,
                opt(r.mixture_size),
                opt(r.mixture_metric),
                opt(r.delta),
                r.flagged
            ));
        }
        atomic_write(&output.join("budget_compare.csv"), (csv.join("\n") + "\n").as_bytes())?;
    }
    if !quiet {
        println!(
            "pareto: {} mixtures, {} frontier points -> {}",
            mixtures.len(),
            frontier.len(),
            output.display()
        );
    }
    Ok(())
}

fn cmd_bench(
    shape: &str,
    batch: usize,
    densities: &[f64],
    reps: usize,
    jobs: usize,
    output: &Path,
    quiet: bool,
) -> Result<()> {
    let (m, n) = shape
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("shape must look like 768x3072, got {shape}")))?;
    let results = bench::bench_grid(&[(m, n)], batch, densities, reps, jobs.max(1), 0)?;
    let control = bench::dense_control(m, n, batch, reps, jobs.max(1), 0)?;
    let mut csv = vec![bench::csv_header().to_string()];
    for r in &results {
        csv.push(bench::csv_row(r));
        if !quiet {
            println!(
                "bench k'={} density {:.3}: relative {:.3} (theory {:.3})",
                r.k_prime, r.density, r.relative, r.theoretical_ratio
            );
        }
    }
    atomic_write(output, (csv.join("\n") + "\n").as_bytes())?;
    if !quiet {
        println!("dense control ratio {control:.3}; results -> {}", output.display());
    }
    Ok(())
}

fn cmd_figdata(dirs: &[PathBuf], output: &Path, quiet: bool) -> Result<()> {
    let reports = load_reports(dirs)?;
    // Fig. 1 style: per-setting (density, metric) series
    let mut fig1 =
        vec!["selector,structure,scope,final_density,task_id,dev_metric,macro".to_string()];
    for r in &reports {
        for (task_id, metric) in &r.final_metrics {
            fig1.push(format!(
                "{},{},{},{},{},{},{}",
                setting_name(r.selector),
                structure_name(r.structure),
                scope_name(r.scope),
                r.final_density,
                task_id,
                metric,
                r.macro_metric
            ));
        }
    }
    atomic_write(&output.join("fig1.csv"), (fig1.join("\n") + "\n").as_bytes())?;

    // Fig. 2 style: (budget, macro) series for multitask points and the
    // mixture frontier when single-task runs are present
    let (members, multitask) = split_reports(&reports);
    let mut fig2 = vec!["budget,macro,kind".to_string()];
    for p in &multitask {
        fig2.push(format!("{},{},multitask", p.size, p.metric));
    }
    if !members.is_empty() {
        for p in pareto_frontier(&enumerate_mixtures(&members)?)? {
            fig2.push(format!("{},{},mixture_frontier", p.size, p.metric));
        }
    }
    atomic_write(&output.join("fig2.csv"), (fig2.join("\n") + "\n").as_bytes())?;
    if !quiet {
        println!("figure data for {} runs -> {}", reports.len(), output.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, seed, output } => cmd_run(&config, seed, output, cli.quiet),
        Cmd::Sweep { config, densities, seeds, jobs, seed, output } => {
            cmd_sweep(&config, &densities, &seeds, jobs, seed, output, cli.quiet)
        }
        Cmd::Pareto { dirs, output } => cmd_pareto(&dirs, &output, cli.quiet),
        Cmd::Bench { shape, batch, densities, reps, jobs, output } => {
            cmd_bench(&shape, batch, &densities, reps, jobs, &output, cli.quiet)
        }
        Cmd::Figdata { dirs, output } => cmd_figdata(&dirs, &output, cli.quiet),
        Cmd::DefaultConfig => {
            println!(
                "{}",
                serde_json::to_string_pretty(&default_config()).expect("default serializes")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
