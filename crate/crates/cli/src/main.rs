use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use didimp::commands::{self, SimulateOptions};
use didimp::config::{NamedEstimand, RunConfig};
use didimp::report::{PlotKind, PretestSummary};
use didimp::{CliError, Result};
use didimp_core::benchmark::Column;
use didimp_core::design::EstimandSpec;
use didimp_core::inference::PretestMode;
use didimp_core::panel::format_f64;
use didimp_core::par::Execution;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "didimp",
    version,
    about = "Imputation estimator for staggered-adoption event studies"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Panel CSV, one row per unit and period.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    unit: Option<String>,
    #[arg(long, global = true)]
    time: Option<String>,
    #[arg(long, global = true)]
    outcome: Option<String>,
    /// Column holding each unit's event date (empty or `never` if never treated).
    #[arg(long, global = true, conflicts_with = "treated")]
    event_time: Option<String>,
    /// Absorbing 0/1 treatment column.
    #[arg(long, global = true)]
    treated: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulations.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate treatment effects with standard errors.
    Estimate {
        /// Estimand shorthand (`att`, `h<k>`, `cohort<e>`); replaces configured estimands.
        #[arg(long)]
        estimand: Vec<String>,
        /// Write per-observation effect estimates here.
        #[arg(long)]
        tau_out: Option<PathBuf>,
        /// Also run the pre-trend test.
        #[arg(long)]
        pretest: bool,
    },
    /// Test for pre-trends using untreated observations only.
    Pretest {
        #[arg(long)]
        leads: Option<usize>,
        /// Cluster-robust Wald test instead of the F test.
        #[arg(long)]
        cluster: bool,
    },
    /// Print the implied observation weights of each estimand.
    Weights {
        #[arg(long)]
        estimand: Vec<String>,
    },
    /// Static two-way regression weights and dynamic-specification checks.
    DiagnoseOls {
        /// Also write the per-observation weights as CSV.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Monte Carlo comparison with reference estimators.
    Simulate {
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated: baseline, more_pre_periods, heteroskedastic, ar1, anticipation.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        /// Exact moments only.
        #[arg(long)]
        exact: bool,
        /// Write one simulated panel as CSV instead of running the study.
        #[arg(long)]
        panel_out: Option<PathBuf>,
        /// Replication written by --panel-out.
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Event-study plot data: pre-trend coefficients and horizon effects.
    ExportPlot {
        #[arg(long)]
        leads: Option<usize>,
    },
}

fn parse_estimand(s: &str) -> Result<NamedEstimand> {
    let bad = || CliError::Config(format!("unknown estimand `{s}` (use att, h<k> or cohort<e>)"));
    let spec = if s == "att" {
        EstimandSpec::Att
    } else if let Some(h) = s.strip_prefix('h') {
        EstimandSpec::Horizon {
            h: h.parse().map_err(|_| bad())?,
        }
    } else if let Some(e) = s.strip_prefix("cohort") {
        EstimandSpec::Cohort {
            e: e.parse().map_err(|_| bad())?,
        }
    } else {
        return Err(bad());
    };
    Ok(NamedEstimand::new(spec))
}

fn config(g: &Global) -> Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    let i = &mut c.input;
    if g.input.is_some() {
        i.path = g.input.clone();
    }
    for (dst, src) in [
        (&mut i.unit, &g.unit),
        (&mut i.time, &g.time),
        (&mut i.outcome, &g.outcome),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    if g.event_time.is_some() {
        i.event_time = g.event_time.clone();
        i.treated = None;
    }
    if g.treated.is_some() {
        i.treated = g.treated.clone();
        i.event_time = None;
    }
    Ok(c)
}

fn io_err(path: &std::path::Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(path: Option<&PathBuf>, value: &T) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Io {
        path: path.map_or("stdout".into(), |p| p.display().to_string()),
        source: e,
    })
}

fn write_csv(path: Option<&PathBuf>, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    let wrap = |e: csv::Error| CliError::Core(e.into());
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut cfg = config(g)?;
    let out = g.out.as_ref();
    match cli.command {
        Command::Estimate {
            estimand,
            tau_out,
            pretest,
        } => {
            if !estimand.is_empty() {
                cfg.estimands = estimand
                    .iter()
                    .map(|s| parse_estimand(s))
                    .collect::<Result<_>>()?;
            }
            if pretest && cfg.pretest.is_none() {
                cfg.pretest = Some(Default::default());
            }
            let loaded = commands::load(&cfg)?;
            let (report, tau) = commands::estimate(&cfg, &loaded)?;
            if let Some(p) = tau_out.as_ref().or(cfg.output.tau_csv.as_ref()) {
                let rows = tau
                    .iter()
                    .map(|r| {
                        vec![
                            r.unit.clone(),
                            r.time.to_string(),
                            r.horizon.to_string(),
                            format_f64(r.y),
                            format_f64(r.y0_hat),
                            format_f64(r.tau_hat),
                        ]
                    })
                    .collect();
                write_csv(
                    Some(p),
                    &["unit", "time", "horizon", "y", "y0_hat", "tau_hat"],
                    rows,
                )?;
            }
            match g.format.unwrap_or(Format::Json) {
                Format::Json => write_json(out, &report),
                Format::Csv => {
                    let rows = report
                        .estimates
                        .iter()
                        .map(|e| {
                            vec![
                                e.label.clone(),
                                format_f64(e.estimate),
                                format_f64(e.se),
                                format_f64(e.n_h),
                                e.n_support.to_string(),
                            ]
                        })
                        .collect();
                    write_csv(out, &["estimand", "estimate", "se", "n_h", "n_support"], rows)
                }
            }
        }
        Command::Pretest { leads, cluster } => {
            let pc = cfg.pretest.get_or_insert_with(Default::default);
            if leads.is_some() {
                pc.leads = leads;
            }
            if cluster {
                pc.mode = PretestMode::ClusterWald;
            }
            let loaded = commands::load(&cfg)?;
            let r = PretestSummary::from(&commands::run_pretest(&cfg, &loaded.panel)?);
            match g.format.unwrap_or(Format::Json) {
                Format::Json => write_json(out, &r),
                Format::Csv => {
                    let rows = (0..r.labels.len())
                        .map(|j| {
                            vec![
                                r.labels[j].clone(),
                                r.relative_times[j].map(|t| t.to_string()).unwrap_or_default(),
                                format_f64(r.coefficients[j]),
                                format_f64(r.se[j]),
                            ]
                        })
                        .collect();
                    write_csv(out, &["label", "relative_time", "coefficient", "se"], rows)
                }
            }
        }
        Command::Weights { estimand } => {
            if !estimand.is_empty() {
                cfg.estimands = estimand
                    .iter()
                    .map(|s| parse_estimand(s))
                    .collect::<Result<_>>()?;
            }
            let loaded = commands::load(&cfg)?;
            let rows = commands::weights(&cfg, &loaded.panel)?;
            match g.format.unwrap_or(Format::Csv) {
                Format::Json => write_json(out, &rows),
                Format::Csv => write_csv(
                    out,
                    &["estimand", "unit", "time", "treated", "weight"],
                    rows.iter()
                        .map(|r| {
                            vec![
                                r.estimand.clone(),
                                r.unit.clone(),
                                r.time.to_string(),
                                (r.treated as u8).to_string(),
                                format_f64(r.weight),
                            ]
                        })
                        .collect(),
                ),
            }
        }
        Command::DiagnoseOls { weights_out } => {
            let loaded = commands::load(&cfg)?;
            let (summary, rows) = commands::diagnose_ols(&loaded.panel)?;
            let csv_rows = || {
                rows.iter()
                    .map(|r| {
                        vec![
                            r.unit.clone(),
                            r.time.to_string(),
                            r.horizon.to_string(),
                            format_f64(r.weight),
                        ]
                    })
                    .collect()
            };
            let header = ["unit", "time", "horizon", "weight"];
            if let Some(p) = &weights_out {
                write_csv(Some(p), &header, csv_rows())?;
            }
            match g.format.unwrap_or(Format::Json) {
                Format::Json => write_json(out, &summary),
                Format::Csv => write_csv(out, &header, csv_rows()),
            }
        }
        Command::Simulate {
            reps,
            columns,
            exact,
            panel_out,
            rep,
        } => {
            let columns = columns
                .iter()
                .map(|s| Column::parse(s).ok_or_else(|| CliError::Config(format!("unknown column `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            let opts = SimulateOptions {
                columns,
                reps,
                seed: g.seed,
                exact,
                exec: if g.threads == Some(1) {
                    Execution::Sequential
                } else {
                    Execution::Parallel
                },
            };
            if let Some(p) = &panel_out {
                let panel = commands::simulated_panel(&commands::simulation_spec(&cfg, &opts), rep)?;
                let file = File::create(p).map_err(io_err(p))?;
                return Ok(panel.write_csv(BufWriter::new(file))?);
            }
            let report = commands::simulate(&cfg, &opts)?;
            match g.format.unwrap_or(Format::Csv) {
                Format::Json => write_json(out, &report),
                Format::Csv => Ok(report.write_csv(sink(out)?)?),
            }
        }
        Command::ExportPlot { leads } => {
            if leads.is_some() {
                cfg.pretest.get_or_insert_with(Default::default).leads = leads;
            }
            let loaded = commands::load(&cfg)?;
            let rows = commands::export_plot(&cfg, &loaded.panel)?;
            match g.format.unwrap_or(Format::Csv) {
                Format::Json => write_json(out, &rows),
                Format::Csv => write_csv(
                    out,
                    &["relative_time", "coefficient", "se", "kind"],
                    rows.iter()
                        .map(|r| {
                            vec![
                                r.relative_time.to_string(),
                                format_f64(r.coefficient),
                                format_f64(r.se),
                                match r.kind {
                                    PlotKind::Effect => "effect".into(),
                                    PlotKind::Pretrend => "pretrend".into(),
                                },
                            ]
                        })
                        .collect(),
                ),
            }
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<&'a [String]>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.code(),
                message: e.to_string(),
                certificate: e.certificate(),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&report).unwrap_or_else(|_| e.to_string())
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
