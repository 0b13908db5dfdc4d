//! Command-line front end. [`run`] parses arguments, dispatches a subcommand and
//! returns the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success, no critical findings |
//! | 1 | completed, critical findings present |
//! | 2 | usage or input error |
//! | 3 | integrity failure (ledger chain or snapshot object) |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, anyhow};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use sheetguard::assess::{
    Period, UsageThresholds, build_report, render_json, render_text, risk_profile, usage_metrics,
};
use sheetguard::control::{TrendRule, trend_deviation};
use sheetguard::grid::{CellContent, escape, format_number, format_timestamp, parse_timestamp};
use sheetguard::ledger::{ChainStatus, LOG_FILE, LedgerError, LedgerLock};
use sheetguard::{
    AuditConfig, CellAddress, ControlPolicy, Finding, Ledger, Snapshot, audit_workbook, diff_snapshots,
    parse_snapshot_file,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CRITICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INTEGRITY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "sheetguard", version, about = "Integrity monitoring for business-critical spreadsheets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record a snapshot in a ledger and print the findings its changes produce.
    Ingest {
        ledger: PathBuf,
        snapshot: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Statically audit one snapshot.
    Audit {
        snapshot: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the cell-level changes between two snapshots.
    Diff { before: PathBuf, after: PathBuf },
    /// Re-evaluate the latest change in a ledger against a policy without recording anything.
    Check {
        ledger: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Print a cell's value series and score its latest value against the earlier ones.
    Trend {
        ledger: PathBuf,
        cell: String,
        #[arg(long, default_value_t = 20)]
        window: usize,
        #[arg(long, default_value_t = 3.0)]
        z_threshold: f64,
        #[arg(long, default_value_t = 5)]
        min_points: usize,
    },
    /// Print every recorded change to a cell.
    History { ledger: PathBuf, cell: String },
    /// Classify workbook usage and score operational risk.
    Profile {
        ledger: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Write a SOX-mapped compliance report for a period (both ends inclusive).
    Report {
        ledger: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Fixed report timestamp, for reproducible output.
        #[arg(long)]
        generated_at: Option<String>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Verify the ledger hash chain and stored snapshot objects.
    Verify { ledger: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

/// A failed command and the exit code it maps to.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: error.into() }
    }

    fn integrity(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_INTEGRITY, error: error.into() }
    }
}

impl From<LedgerError> for Failure {
    fn from(e: LedgerError) -> Self {
        match e {
            LedgerError::ChainBroken { .. } | LedgerError::MissingObject(_) | LedgerError::CorruptPayload { .. } => {
                Failure::integrity(e)
            }
            other => Failure::usage(other),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure::usage(error)
    }
}

type Outcome = Result<i32, Failure>;

/// Runs the tool with `args` (including the program name).
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{rendered}");
            return EXIT_OK;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(Failure { code, error }) => {
            let _ = writeln!(stderr, "error: {error:#}");
            code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::Ingest { ledger, snapshot, policy, config } => {
            ingest(&ledger, &snapshot, policy.as_deref(), config.as_deref(), out)
        }
        Command::Audit { snapshot, config } => {
            let s = read_snapshot(&snapshot)?;
            let findings = audit_workbook(&s, &load_config(config.as_deref())?);
            print_findings(out, &findings)
        }
        Command::Diff { before, after } => diff(&before, &after, out),
        Command::Check { ledger, policy } => {
            let ledger = open_existing(&ledger)?;
            ensure_verified(&ledger)?;
            let findings = ledger.reevaluate_latest(&load_policy(Some(&policy))?)?;
            print_findings(out, &findings)
        }
        Command::Trend { ledger, cell, window, z_threshold, min_points } => {
            let ledger = open_existing(&ledger)?;
            let mut rule = TrendRule::new(parse_cell(&cell)?);
            rule.window = window;
            rule.z_threshold = z_threshold;
            rule.min_points = min_points;
            let policy = ControlPolicy { trend_rules: vec![rule.clone()], ..Default::default() };
            policy.validate().map_err(Failure::usage)?;
            trend(&ledger, &rule, out)
        }
        Command::History { ledger, cell } => {
            let ledger = open_existing(&ledger)?;
            for h in ledger.change_history(&parse_cell(&cell)?) {
                let side = |c: &Option<CellContent>| c.as_ref().map_or("-".to_string(), |c| escape(&c.to_string()));
                emit(
                    out,
                    &format!(
                        "{}\t{}\t{}\t{}\t{}",
                        format_timestamp(&h.timestamp),
                        escape(&h.actor),
                        h.event.kind,
                        side(&h.event.before),
                        side(&h.event.after)
                    ),
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::Profile { ledger, thresholds } => {
            let ledger = open_existing(&ledger)?;
            let thresholds = load_thresholds(thresholds.as_deref())?;
            profile(&ledger, &thresholds, out)
        }
        Command::Report { ledger, from, to, policy, out: path, format, generated_at, thresholds } => {
            let ledger = open_existing(&ledger)?;
            let period = Period::new(parse_instant(&from)?, parse_instant(&to)?).map_err(Failure::usage)?;
            let generated_at = match generated_at {
                Some(t) => parse_instant(&t)?,
                None => Utc::now(),
            };
            let policy = load_policy(Some(&policy))?;
            let thresholds = load_thresholds(thresholds.as_deref())?;
            let report = build_report(&ledger, &policy, period, &thresholds, generated_at).map_err(Failure::usage)?;
            let rendered = match format {
                Format::Text => render_text(&report),
                Format::Json => render_json(&report),
            };
            match path {
                Some(path) => fs::write(&path, rendered).with_context(|| format!("writing {}", path.display()))?,
                None => out.write_all(rendered.as_bytes()).context("writing report")?,
            }
            if !report.chain_verified() {
                Ok(EXIT_INTEGRITY)
            } else if report.material_weaknesses.is_empty() {
                Ok(EXIT_OK)
            } else {
                Ok(EXIT_CRITICAL)
            }
        }
        Command::Verify { ledger } => verify(&open_existing(&ledger)?, out),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> Result<(), Failure> {
    writeln!(out, "{line}").context("writing output").map_err(Failure::usage)
}

fn print_findings(out: &mut dyn Write, findings: &[Finding]) -> Outcome {
    for f in findings {
        emit(out, &f.display_line())?;
    }
    Ok(if findings.iter().any(Finding::is_critical) { EXIT_CRITICAL } else { EXIT_OK })
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_snapshot(path: &Path) -> Result<Snapshot, Failure> {
    let text = read_text(path)?;
    parse_snapshot_file(&text).map_err(|e| Failure::usage(anyhow!(e).context(format!("parsing {}", path.display()))))
}

fn load_config(path: Option<&Path>) -> Result<AuditConfig, Failure> {
    match path {
        None => Ok(AuditConfig::default()),
        Some(p) => AuditConfig::from_toml(&read_text(p)?)
            .map_err(|e| Failure::usage(anyhow!(e).context(format!("in {}", p.display())))),
    }
}

fn load_policy(path: Option<&Path>) -> Result<ControlPolicy, Failure> {
    match path {
        None => Ok(ControlPolicy::default()),
        Some(p) => ControlPolicy::from_toml(&read_text(p)?)
            .map_err(|e| Failure::usage(anyhow!(e).context(format!("in {}", p.display())))),
    }
}

fn load_thresholds(path: Option<&Path>) -> Result<UsageThresholds, Failure> {
    match path {
        None => Ok(UsageThresholds::default()),
        Some(p) => UsageThresholds::from_toml(&read_text(p)?)
            .map_err(|e| Failure::usage(anyhow!(e).context(format!("in {}", p.display())))),
    }
}

fn parse_cell(text: &str) -> Result<CellAddress, Failure> {
    text.parse().map_err(|e| Failure::usage(anyhow!("bad cell address {text:?}: {e}")))
}

fn parse_instant(text: &str) -> Result<DateTime<Utc>, Failure> {
    parse_timestamp(text).map_err(|e| Failure::usage(anyhow!("bad timestamp {text:?}: {e}")))
}

fn open_existing(dir: &Path) -> Result<Ledger, Failure> {
    if !dir.join(LOG_FILE).is_file() {
        return Err(Failure::usage(anyhow!("no ledger at {}", dir.display())));
    }
    Ok(Ledger::open(dir)?)
}

fn ensure_verified(ledger: &Ledger) -> Result<(), Failure> {
    match ledger.verify_chain() {
        ChainStatus::Verified { .. } => Ok(()),
        ChainStatus::Broken { seq, reason } => Err(LedgerError::ChainBroken { seq, reason }.into()),
    }
}

fn ingest(dir: &Path, snapshot: &Path, policy: Option<&Path>, config: Option<&Path>, out: &mut dyn Write) -> Outcome {
    let s = read_snapshot(snapshot)?;
    let policy = load_policy(policy)?;
    let config = load_config(config)?;
    let _lock = LedgerLock::acquire(dir)?;
    let mut ledger = Ledger::open(dir)?;
    let findings = ledger.ingest_snapshot(&s, &config, &policy)?;
    print_findings(out, &findings)
}

fn diff(before: &Path, after: &Path, out: &mut dyn Write) -> Outcome {
    let cs = diff_snapshots(&read_snapshot(before)?, &read_snapshot(after)?).map_err(Failure::usage)?;
    for e in &cs.events {
        let side = |c: &Option<CellContent>| c.as_ref().map_or("-".to_string(), |c| escape(&c.to_string()));
        emit(out, &format!("{}\t{}\t{}\t{}", e.kind, e.address, side(&e.before), side(&e.after)))?;
    }
    Ok(EXIT_OK)
}

fn trend(ledger: &Ledger, rule: &TrendRule, out: &mut dyn Write) -> Outcome {
    let mut series = ledger.series_for_cell(&rule.address);
    for (t, v) in &series.points {
        emit(out, &format!("{}\t{}", format_timestamp(t), escape(&v.to_string())))?;
    }
    let Some(latest) = series.points.pop() else {
        emit(out, "no values recorded")?;
        return Ok(EXIT_OK);
    };
    let Some(value) = latest.1.as_number() else {
        emit(out, "latest value is not numeric")?;
        return Ok(EXIT_OK);
    };
    let prior = series.numbers().len().min(rule.window);
    if prior < rule.min_points {
        emit(out, &format!("insufficient history: {prior} prior numeric points, {} required", rule.min_points))?;
        return Ok(EXIT_OK);
    }
    let v = trend_deviation(&series, value, rule);
    emit(
        out,
        &format!(
            "latest={} mean={} stddev={:.6} z={:.6} violated={}",
            format_number(v.new_value),
            format_number(v.mean),
            v.stddev,
            v.z,
            v.violated
        ),
    )?;
    Ok(EXIT_OK)
}

fn profile(ledger: &Ledger, thresholds: &UsageThresholds, out: &mut dyn Write) -> Outcome {
    let view = ledger.view();
    let findings: Vec<Finding> = view.findings().into_iter().flat_map(|f| f.findings).collect();
    let p = risk_profile(&usage_metrics(&view), &findings, thresholds);
    let m = &p.metrics;
    let lines = [
        format!("classification\t{}", p.classification),
        format!("risk_score\t{}", format_number(p.risk_score)),
        format!("distinct_actors\t{}", m.distinct_actors),
        format!("persistence_days\t{}", format_number(m.persistence_days)),
        format!("mean_structural_volatility\t{}", format_number(m.mean_structural_volatility)),
        format!("mean_data_volatility\t{}", format_number(m.mean_data_volatility)),
        format!("ingest_count\t{}", m.ingest_count),
    ];
    for line in lines.iter().chain(p.rationale.iter().map(|r| format!("rationale\t{r}")).collect::<Vec<_>>().iter()) {
        emit(out, line)?;
    }
    Ok(EXIT_OK)
}

fn verify(ledger: &Ledger, out: &mut dyn Write) -> Outcome {
    match ledger.verify_chain() {
        ChainStatus::Broken { seq, reason } => {
            emit(out, &format!("BROKEN seq={seq}: {reason}"))?;
            Ok(EXIT_INTEGRITY)
        }
        ChainStatus::Verified { records } => {
            let bad = ledger.verify_objects();
            if bad.is_empty() {
                emit(out, &format!("OK n={records}"))?;
                Ok(EXIT_OK)
            } else {
                for digest in bad {
                    emit(out, &format!("BROKEN object={digest}: missing or does not match its digest"))?;
                }
                Ok(EXIT_INTEGRITY)
            }
        }
    }
}
