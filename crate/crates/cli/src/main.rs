use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dcast_core::batch;
use dcast_core::cluster;
use dcast_core::report::{write_trace, RunReport, EXIT_INVALID, EXIT_OK, OUT_DIR_ENV};
use dcast_core::scenario::{Scenario, ScenarioError};
use dcast_core::switch::Outcome;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dcast", about = "Switchable consensus simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write line-delimited JSON trace events here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Report path; `.csv` selects CSV, anything else JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run variants of a scenario on the same seeds and tabulate them.
    Compare {
        scenario: PathBuf,
        /// `field=v1,v2,...`; repeat to take the cross product.
        #[arg(long, required = true)]
        vary: Vec<String>,
        /// Number of consecutive seeds per variant, starting at the scenario seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Validate a scenario without running it.
    Check { scenario: PathBuf },
    /// Run several scenarios, one summary line each.
    Batch { scenarios: Vec<PathBuf> },
}

/// Fields a comparison may vary; anything else changes the experiment itself.
const COMPARABLE: [&str; 4] = ["cluster.protocol", "switch.", "raft.", "hotstuff."];

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => match e.downcast_ref::<ScenarioError>() {
            Some(se) => {
                eprint!("{se}");
                EXIT_INVALID
            }
            None => {
                eprintln!("error: {e:#}");
                1
            }
        },
    };
    ExitCode::from(code as u8)
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Run {
            scenario,
            seed,
            trace,
            report,
        } => run(&scenario, seed, trace, report),
        Cmd::Compare {
            scenario,
            vary,
            seeds,
        } => compare(&scenario, &vary, seeds),
        Cmd::Check { scenario } => {
            let c = Scenario::load(&scenario)?.validate()?;
            println!(
                "ok: n={} {} duration={} seed={}",
                c.params.n, c.protocol, c.duration, c.seed
            );
            Ok(EXIT_OK)
        }
        Cmd::Batch { scenarios } => run_batch(&scenarios),
    }
}

fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_report(r: &RunReport, path: &Path) -> Result<()> {
    let body = if path.extension().is_some_and(|e| e == "csv") {
        r.to_csv()
    } else {
        r.to_json()
    };
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(
    path: &Path,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<i32> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.cluster.seed = seed;
    }
    let (r, events) = cluster::run(&s, trace.is_some())?;
    match report {
        Some(p) => write_report(&r, &p)?,
        None => {
            let dir = out_dir();
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("scenario");
            let base = dir.join(format!("{stem}-{}", s.cluster.seed));
            write_report(&r, &base.with_extension("json"))?;
            write_report(&r, &base.with_extension("csv"))?;
        }
    }
    if let Some(p) = trace {
        let f = std::fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        write_trace(&events, std::io::BufWriter::new(f))?;
    }
    println!("{}", summary(&r));
    if !r.safe() {
        eprintln!("safety violation:");
        for d in &r.safety.details {
            eprintln!("  {d}");
        }
    }
    Ok(r.exit_code())
}

fn summary(r: &RunReport) -> String {
    format!(
        "seed={} height={}..{} p50={} p95={} messages={} switches={} safe={}",
        r.seed,
        r.min_honest_height(),
        r.max_height(),
        r.commit_latency.p50,
        r.commit_latency.p95,
        r.messages.sent,
        r.switches.count(Outcome::Completed),
        r.safe()
    )
}

/// Rejected comparisons count as invalid scenarios for the exit code.
fn invalid(msg: String) -> anyhow::Error {
    ScenarioError { errors: vec![msg] }.into()
}

fn parse_vary(spec: &str) -> Result<(String, Vec<String>)> {
    let Some((field, values)) = spec.split_once('=') else {
        return Err(invalid(format!("--vary `{spec}`: expected field=v1,v2")));
    };
    let field = field.trim().to_string();
    if !COMPARABLE
        .iter()
        .any(|p| field == *p || (p.ends_with('.') && field.starts_with(p)))
    {
        return Err(invalid(format!(
            "--vary {field}: only protocol and policy fields may differ between variants"
        )));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(invalid(format!("--vary {field}: empty value")));
    }
    Ok((field, values))
}

struct Variant {
    label: String,
    scenario: Scenario,
}

fn variants(base: &Scenario, vary: &[String]) -> Result<Vec<Variant>> {
    let mut out = vec![Variant {
        label: String::new(),
        scenario: base.clone(),
    }];
    for spec in vary {
        let (field, values) = parse_vary(spec)?;
        let mut next = Vec::new();
        for v in &out {
            for value in &values {
                let mut s = v.scenario.clone();
                s.set(&field, value)?;
                let sep = if v.label.is_empty() { "" } else { " " };
                next.push(Variant {
                    label: format!("{}{sep}{field}={value}", v.label),
                    scenario: s,
                });
            }
        }
        out = next;
    }
    let n = base.validate()?.params.n;
    for v in &out {
        let c = v.scenario.validate()?;
        if c.params.n != n {
            return Err(invalid(format!(
                "variant `{}` has n={} but the base has n={n}",
                v.label, c.params.n
            )));
        }
    }
    Ok(out)
}

fn compare(path: &Path, vary: &[String], seeds: u64) -> Result<i32> {
    let base = Scenario::load(path)?;
    let vs = variants(&base, vary)?;
    let seeds = seeds.max(1);
    let jobs: Vec<Scenario> = vs
        .iter()
        .flat_map(|v| {
            (0..seeds).map(move |k| {
                let mut s = v.scenario.clone();
                s.cluster.seed = base.cluster.seed.wrapping_add(k);
                s
            })
        })
        .collect();
    let results = batch::run_all(&jobs);
    let width = vs.iter().map(|v| v.label.len()).max().unwrap_or(0).max(7);
    println!(
        "{:<width$} {:>8} {:>10} {:>6} {:>6} {:>10} {:>8} {:>5}",
        "variant", "height", "per_1k", "p50", "p95", "messages", "switches", "safe"
    );
    let mut code = EXIT_OK;
    for (v, chunk) in vs.iter().zip(results.chunks(seeds as usize)) {
        let reports = chunk.iter().cloned().collect::<Result<Vec<_>, _>>()?;
        let k = reports.len() as f64;
        let mean = |f: &dyn Fn(&RunReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let height = mean(&|r| r.min_honest_height() as f64);
        let per_1k = mean(&|r| r.min_honest_height() as f64 * 1000.0 / r.duration as f64);
        let safe = reports.iter().all(RunReport::safe);
        if let Some(bad) = reports.iter().find(|r| !r.safe()) {
            code = code.max(bad.exit_code());
        }
        println!(
            "{:<width$} {:>8.1} {:>10.2} {:>6.1} {:>6.1} {:>10.0} {:>8.2} {:>5}",
            v.label,
            height,
            per_1k,
            mean(&|r| r.commit_latency.p50 as f64),
            mean(&|r| r.commit_latency.p95 as f64),
            mean(&|r| r.messages.sent as f64),
            mean(&|r| r.switches.count(Outcome::Completed) as f64),
            safe
        );
    }
    Ok(code)
}

fn run_batch(paths: &[PathBuf]) -> Result<i32> {
    let loaded: Vec<Result<Scenario, ScenarioError>> =
        paths.iter().map(|p| Scenario::load(p)).collect();
    let results = batch::map(&loaded, |s| match s {
        Ok(s) => cluster::run(s, false).map(|(r, _)| r),
        Err(e) => Err(e.clone()),
    });
    let mut code = EXIT_OK;
    for (p, res) in paths.iter().zip(results) {
        match res {
            Ok(r) => {
                code = code.max(r.exit_code());
                println!("{}: {}", p.display(), summary(&r));
            }
            Err(e) => {
                code = code.max(EXIT_INVALID);
                println!("{}: {}", p.display(), e.errors.join("; "));
            }
        }
    }
    Ok(code)
}
