//! Usage classification, operational risk scoring and SOX-mapped compliance reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::control::ControlPolicy;
use crate::diff::volatility_metrics;
use crate::finding::{Finding, Location, RuleId, Severity, sort_findings};
use crate::grid::{format_number, format_timestamp};
use crate::ledger::{ChainStatus, Ledger, LedgerView};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReportError {
    #[error("ledger has no ingested snapshots")]
    EmptyLedger,
    #[error("report period must start before it ends")]
    InvalidPeriod,
    #[error("policy is for workbook {policy:?}, ledger tracks {ledger:?}")]
    WorkbookMismatch { policy: String, ledger: String },
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UsageMetrics {
    pub distinct_actors: usize,
    pub persistence_days: f64,
    pub mean_structural_volatility: f64,
    pub mean_data_volatility: f64,
    pub ingest_count: usize,
}

/// Aggregates actor count, lifetime and per-delta volatility over the whole ledger.
pub fn usage_metrics(ledger: &LedgerView<'_>) -> UsageMetrics {
    let ingests = ledger.ingests();
    let actors: BTreeSet<&str> = ingests.iter().map(|i| i.actor.as_str()).collect();
    let persistence_days = match (ingests.first(), ingests.last()) {
        (Some(first), Some(last)) => (last.timestamp - first.timestamp).num_milliseconds() as f64 / 86_400_000.0,
        _ => 0.0,
    };
    let (mut structural, mut data, mut pairs) = (0.0, 0.0, 0usize);
    for (_, cs) in ledger.changesets() {
        let Ok(before) = ledger.snapshot(&cs.from_digest) else { continue };
        let v = volatility_metrics(&cs, &before);
        structural += v.structural_volatility;
        data += v.data_volatility;
        pairs += 1;
    }
    let mean = |sum: f64| if pairs == 0 { 0.0 } else { sum / pairs as f64 };
    UsageMetrics {
        distinct_actors: actors.len(),
        persistence_days,
        mean_structural_volatility: mean(structural),
        mean_data_volatility: mean(data),
        ingest_count: ingests.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    Modeling,
    Operational,
    Indeterminate,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Modeling => "Modeling",
            Classification::Operational => "Operational",
            Classification::Indeterminate => "Indeterminate",
        })
    }
}

/// Rubric cut-offs. Defaults: 2 actors, 30 days, 0.10 and 0.25 structural volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UsageThresholds {
    pub operational_min_actors: usize,
    pub persistence_days: f64,
    pub operational_max_structural: f64,
    pub modeling_min_structural: f64,
}

impl Default for UsageThresholds {
    fn default() -> Self {
        Self {
            operational_min_actors: 2,
            persistence_days: 30.0,
            operational_max_structural: 0.10,
            modeling_min_structural: 0.25,
        }
    }
}

impl UsageThresholds {
    pub fn from_toml(text: &str) -> Result<Self, ReportError> {
        let t: Self = toml::from_str(text).map_err(|e| ReportError::InvalidThresholds(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: &str| Err(ReportError::InvalidThresholds(m.to_string()));
        if self.operational_min_actors < 2 {
            return bad("operational_min_actors must be at least 2");
        }
        if self.persistence_days.is_nan() || self.persistence_days < 0.0 {
            return bad("persistence_days must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.operational_max_structural)
            || !(0.0..=1.0).contains(&self.modeling_min_structural)
        {
            return bad("volatility thresholds must lie in [0, 1]");
        }
        if self.modeling_min_structural <= self.operational_max_structural {
            return bad("modeling_min_structural must exceed operational_max_structural");
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!(
            "Operational when actors >= {} or (persistence >= {} days and structural volatility <= {}); \
             Modeling when actors <= 1 and structural volatility >= {}; otherwise Indeterminate",
            self.operational_min_actors,
            format_number(self.persistence_days),
            format_number(self.operational_max_structural),
            format_number(self.modeling_min_structural)
        )
    }
}

pub fn classify_usage(m: &UsageMetrics) -> Classification {
    classify_usage_with(m, &UsageThresholds::default())
}

pub fn classify_usage_with(m: &UsageMetrics, t: &UsageThresholds) -> Classification {
    let persistent_stable =
        m.persistence_days >= t.persistence_days && m.mean_structural_volatility <= t.operational_max_structural;
    if m.distinct_actors >= t.operational_min_actors || persistent_stable {
        Classification::Operational
    } else if m.distinct_actors <= 1 && m.mean_structural_volatility >= t.modeling_min_structural {
        Classification::Modeling
    } else {
        Classification::Indeterminate
    }
}

pub const WEIGHT_ACTOR: f64 = 15.0;
pub const ACTOR_CAP: usize = 4;
pub const WEIGHT_DATA_VOLATILITY: f64 = 25.0;
pub const WEIGHT_PERSISTENT: f64 = 10.0;
pub const WEIGHT_CRITICAL: f64 = 5.0;

/// `clamp(0, 100, 15·min(actors,4) + 25·data_volatility + 10·persistent + 5·critical)`.
pub fn risk_score(m: &UsageMetrics, findings: &[Finding]) -> f64 {
    risk_score_with(m, findings, &UsageThresholds::default())
}

pub fn risk_score_with(m: &UsageMetrics, findings: &[Finding], t: &UsageThresholds) -> f64 {
    let critical = findings.iter().filter(|f| f.is_critical()).count();
    let persistent = if m.persistence_days >= t.persistence_days { 1.0 } else { 0.0 };
    let raw = WEIGHT_ACTOR * m.distinct_actors.min(ACTOR_CAP) as f64
        + WEIGHT_DATA_VOLATILITY * m.mean_data_volatility
        + WEIGHT_PERSISTENT * persistent
        + WEIGHT_CRITICAL * critical as f64;
    raw.clamp(0.0, 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskProfile {
    pub metrics: UsageMetrics,
    pub classification: Classification,
    pub risk_score: f64,
    pub rationale: Vec<String>,
}

pub fn risk_profile(m: &UsageMetrics, findings: &[Finding], t: &UsageThresholds) -> RiskProfile {
    let classification = classify_usage_with(m, t);
    let mut rationale = Vec::new();
    if m.distinct_actors >= t.operational_min_actors {
        rationale.push(format!("{} distinct actors indicate handover between individuals", m.distinct_actors));
    } else {
        rationale.push(format!("{} distinct actor(s)", m.distinct_actors));
    }
    if m.persistence_days >= t.persistence_days {
        rationale.push(format!("in use for {} days, a long-lived workbook", fmt_decimal(m.persistence_days)));
    }
    if m.mean_structural_volatility >= t.modeling_min_structural {
        rationale.push(format!(
            "mean structural volatility {} shows frequent structural revision",
            fmt_decimal(m.mean_structural_volatility)
        ));
    } else if m.mean_structural_volatility <= t.operational_max_structural {
        rationale.push(format!(
            "mean structural volatility {} shows rare structural change",
            fmt_decimal(m.mean_structural_volatility)
        ));
    }
    let critical = findings.iter().filter(|f| f.is_critical()).count();
    if critical > 0 {
        rationale.push(format!("{critical} critical finding(s) raise the risk score"));
    }
    RiskProfile { metrics: *m, classification, risk_score: risk_score_with(m, findings, t), rationale }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SoxSection {
    S103,
    S302,
    S304,
    S404,
}

impl SoxSection {
    pub const ALL: [SoxSection; 4] = [SoxSection::S103, SoxSection::S302, SoxSection::S304, SoxSection::S404];

    pub fn number(self) -> u16 {
        match self {
            SoxSection::S103 => 103,
            SoxSection::S302 => 302,
            SoxSection::S304 => 304,
            SoxSection::S404 => 404,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SoxSection::S103 => "internal control evaluation",
            SoxSection::S302 => "significant changes requiring explanation",
            SoxSection::S304 => "restatement-risk flags",
            SoxSection::S404 => "management assessment of internal control",
        }
    }
}

impl fmt::Display for SoxSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Serialize for SoxSection {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Every finding maps to 103 and 404. Logic-change findings add 302; critical
/// bound, type, trend and error-value findings add 304.
pub fn map_finding_to_sox(f: &Finding) -> BTreeSet<SoxSection> {
    let mut out = BTreeSet::from([SoxSection::S103, SoxSection::S404]);
    let logic_change = match f.rule_id {
        RuleId::DataOnlyLogicChange | RuleId::UnattestedLogicChange => true,
        RuleId::LockedRegionChange => f.observed == "LogicChanged",
        _ => false,
    };
    if logic_change {
        out.insert(SoxSection::S302);
    }
    let feeds_figures = matches!(
        f.rule_id,
        RuleId::BoundViolation | RuleId::TypeViolation | RuleId::TrendDeviation | RuleId::ErrorValue
    );
    if f.severity == Severity::Critical && feeds_figures {
        out.insert(SoxSection::S304);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Period {
    #[serde(serialize_with = "ser_ts")]
    pub start: DateTime<Utc>,
    #[serde(serialize_with = "ser_ts")]
    pub end: DateTime<Utc>,
}

impl Period {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, ReportError> {
        if start < end { Ok(Self { start, end }) } else { Err(ReportError::InvalidPeriod) }
    }

    /// Both ends inclusive.
    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        self.start <= *t && *t <= self.end
    }
}

fn ser_ts<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format_timestamp(t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    pub verified: bool,
    pub records: usize,
    pub first_bad_seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub region_rules: usize,
    pub cadence_rules: usize,
    pub bound_rules: usize,
    pub trend_rules: usize,
    pub workflow_steps: usize,
}

pub const FRAUD_NOTE: &str = "Findings carry a severity, never an intent. Nothing in this report is labelled as fraud.";
pub const RESTATEMENT_NOTE: &str =
    "Section 304 entries are restatement-risk flags from a heuristic, not a legal determination.";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplianceReport {
    pub schema: &'static str,
    pub workbook_id: String,
    pub period: Period,
    #[serde(serialize_with = "ser_ts")]
    pub generated_at: DateTime<Utc>,
    pub chain: ChainSummary,
    pub policy: PolicySummary,
    pub findings_by_sox: BTreeMap<SoxSection, Vec<Finding>>,
    pub material_weaknesses: Vec<Finding>,
    pub profile: RiskProfile,
    pub thresholds: UsageThresholds,
    pub notes: Vec<&'static str>,
}

impl ComplianceReport {
    pub fn chain_verified(&self) -> bool {
        self.chain.verified
    }

    /// Distinct findings in the period, in report order.
    pub fn findings(&self) -> Vec<&Finding> {
        let mut seen = Vec::new();
        for f in self.findings_by_sox.values().flatten() {
            if !seen.contains(&f) {
                seen.push(f);
            }
        }
        seen
    }
}

/// Collects period findings, verifies the chain and maps everything to SOX sections.
pub fn build_report(
    ledger: &Ledger,
    policy: &ControlPolicy,
    period: Period,
    thresholds: &UsageThresholds,
    generated_at: DateTime<Utc>,
) -> Result<ComplianceReport, ReportError> {
    thresholds.validate()?;
    let view = ledger.view();
    let ingests = view.ingests();
    let workbook_id = ingests.first().map(|i| i.workbook_id.clone()).ok_or(ReportError::EmptyLedger)?;
    if let Some(p) = &policy.workbook_id
        && p != &workbook_id
    {
        return Err(ReportError::WorkbookMismatch { policy: p.clone(), ledger: workbook_id });
    }

    let mut findings: Vec<Finding> = view
        .findings()
        .into_iter()
        .filter(|entry| period.contains(&entry.at))
        .flat_map(|entry| entry.findings)
        .collect();
    let chain = match ledger.verify_chain() {
        ChainStatus::Verified { records } => {
            ChainSummary { verified: true, records, first_bad_seq: None, reason: None }
        }
        ChainStatus::Broken { seq, reason } => {
            findings.push(
                Finding::new(
                    RuleId::LedgerTamper,
                    Location::Workbook,
                    format!("ledger chain fails verification: {reason}"),
                    format!("seq {seq}"),
                )
                .with_expected("intact hash chain"),
            );
            ChainSummary { verified: false, records: ledger.len(), first_bad_seq: Some(seq), reason: Some(reason) }
        }
    };
    sort_findings(&mut findings);

    let mut findings_by_sox: BTreeMap<SoxSection, Vec<Finding>> =
        SoxSection::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for f in &findings {
        for section in map_finding_to_sox(f) {
            findings_by_sox.entry(section).or_default().push(f.clone());
        }
    }
    let material_weaknesses = findings.iter().filter(|f| f.is_critical()).cloned().collect();
    let metrics = usage_metrics(&view);
    let workflow_steps = policy.workflow.as_ref().map_or(0, |w| w.steps.len());

    Ok(ComplianceReport {
        schema: "sheetguard.report/1",
        workbook_id,
        period,
        generated_at,
        chain,
        policy: PolicySummary {
            region_rules: policy.region_rules.len(),
            cadence_rules: policy.cadence_rules.len(),
            bound_rules: policy.bound_rules.len(),
            trend_rules: policy.trend_rules.len(),
            workflow_steps,
        },
        findings_by_sox,
        material_weaknesses,
        profile: risk_profile(&metrics, &findings, thresholds),
        thresholds: *thresholds,
        notes: vec![RESTATEMENT_NOTE, FRAUD_NOTE],
    })
}

/// Rounds to 6 places for display.
fn fmt_decimal(x: f64) -> String {
    format_number((x * 1e6).round() / 1e6)
}

pub fn render_text(r: &ComplianceReport) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "SPREADSHEET CONTROL REPORT");
    let _ = writeln!(w, "workbook: {}", r.workbook_id);
    let _ =
        writeln!(w, "period: {} to {} (inclusive)", format_timestamp(&r.period.start), format_timestamp(&r.period.end));
    let _ = writeln!(w, "generated at: {}", format_timestamp(&r.generated_at));
    match r.chain.first_bad_seq {
        None => {
            let _ = writeln!(w, "ledger chain: verified ({} records)", r.chain.records);
        }
        Some(seq) => {
            let _ = writeln!(w, "ledger chain: FAILED at seq {seq}: {}", r.chain.reason.as_deref().unwrap_or(""));
        }
    }
    let p = &r.policy;
    let _ = writeln!(
        w,
        "policy: {} region, {} cadence, {} bound, {} trend rules; {} workflow steps",
        p.region_rules, p.cadence_rules, p.bound_rules, p.trend_rules, p.workflow_steps
    );

    let m = &r.profile.metrics;
    let _ = writeln!(w);
    let _ = writeln!(w, "USAGE PROFILE");
    let _ = writeln!(w, "classification: {}", r.profile.classification);
    let _ = writeln!(w, "risk score: {} / 100", fmt_decimal(r.profile.risk_score));
    let _ = writeln!(w, "distinct actors: {}", m.distinct_actors);
    let _ = writeln!(w, "persistence days: {}", fmt_decimal(m.persistence_days));
    let _ = writeln!(w, "mean structural volatility: {}", fmt_decimal(m.mean_structural_volatility));
    let _ = writeln!(w, "mean data volatility: {}", fmt_decimal(m.mean_data_volatility));
    let _ = writeln!(w, "ingests: {}", m.ingest_count);
    let _ = writeln!(w, "rubric: {}", r.thresholds.describe());
    let _ = writeln!(
        w,
        "score weights: {} per actor (max {}), {} x data volatility, {} if persistent, {} per critical finding",
        WEIGHT_ACTOR, ACTOR_CAP, WEIGHT_DATA_VOLATILITY, WEIGHT_PERSISTENT, WEIGHT_CRITICAL
    );
    for line in &r.profile.rationale {
        let _ = writeln!(w, "  - {line}");
    }

    for (section, findings) in &r.findings_by_sox {
        let _ = writeln!(w);
        let _ = writeln!(w, "SOX {section}: {} ({})", section.title(), findings.len());
        if findings.is_empty() {
            let _ = writeln!(w, "  (none)");
        }
        for f in findings {
            let _ = writeln!(w, "  {}", f.display_line());
        }
    }

    let _ = writeln!(w);
    let _ = writeln!(w, "MATERIAL WEAKNESSES ({})", r.material_weaknesses.len());
    if r.material_weaknesses.is_empty() {
        let _ = writeln!(w, "  (none)");
    }
    for f in &r.material_weaknesses {
        let _ = writeln!(w, "  {}", f.display_line());
    }

    let _ = writeln!(w);
    let _ = writeln!(w, "NOTES");
    for note in &r.notes {
        let _ = writeln!(w, "  - {note}");
    }
    out
}

pub fn render_json(r: &ComplianceReport) -> String {
    let mut text = serde_json::to_string_pretty(r).expect("report serializes");
    text.push('\n');
    text
}
