//! Declarative control policies evaluated against each change set: region modes,
//! cadence windows, value bounds, KPI trend deviation and workflow step order.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::Deserialize;
use thiserror::Error;

use crate::diff::{ChangeEvent, ChangeKind, ChangeSet};
use crate::finding::{Finding, Location, RuleId, sort_findings};
use crate::grid::{CellAddress, CellValue, Region, format_number, format_timestamp};
use crate::ledger::{CellSeries, Entry, LedgerView};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("cannot parse policy: {0}")]
    Parse(String),
    #[error("invalid policy: {0}")]
    Invalid(String),
}

/// Region modes, least strict first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionMode {
    Free,
    FormulaMaintained,
    DataOnly,
    Locked,
}

impl RegionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionMode::Free => "FREE",
            RegionMode::FormulaMaintained => "FORMULA_MAINTAINED",
            RegionMode::DataOnly => "DATA_ONLY",
            RegionMode::Locked => "LOCKED",
        }
    }
}

impl fmt::Display for RegionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "FREE" => Ok(RegionMode::Free),
            "FORMULA_MAINTAINED" => Ok(RegionMode::FormulaMaintained),
            "DATA_ONLY" => Ok(RegionMode::DataOnly),
            "LOCKED" => Ok(RegionMode::Locked),
            _ => Err(PolicyError::Invalid(format!("unknown region mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRule {
    pub region: Region,
    pub mode: RegionMode,
    pub ticket_required: bool,
}

/// Weekdays plus a half-open UTC hour range, written `Mon-Fri 09-17`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CadenceWindow {
    /// Indexed by days from Monday.
    pub days: [bool; 7],
    pub start_hour: u32,
    pub end_hour: u32,
}

const DAY_NAMES: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

fn parse_day(text: &str) -> Option<usize> {
    DAY_NAMES.iter().position(|d| d.eq_ignore_ascii_case(text.get(..3).unwrap_or(text)) && text.len() >= 3)
}

impl CadenceWindow {
    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        self.days[t.weekday().num_days_from_monday() as usize]
            && self.start_hour <= t.hour()
            && t.hour() < self.end_hour
    }
}

impl FromStr for CadenceWindow {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| PolicyError::Invalid(format!("cadence window {s:?}: {why}"));
        let (days_part, hours_part) =
            s.trim().split_once(char::is_whitespace).ok_or_else(|| bad("expected `DAYS HH-HH`"))?;
        let mut days = [false; 7];
        if days_part == "*" {
            days = [true; 7];
        } else {
            for item in days_part.split(',') {
                match item.split_once('-') {
                    Some((a, b)) => {
                        let (a, b) = (
                            parse_day(a).ok_or_else(|| bad("unknown day"))?,
                            parse_day(b).ok_or_else(|| bad("unknown day"))?,
                        );
                        let mut d = a;
                        loop {
                            days[d] = true;
                            if d == b {
                                break;
                            }
                            d = (d + 1) % 7;
                        }
                    }
                    None => days[parse_day(item).ok_or_else(|| bad("unknown day"))?] = true,
                }
            }
        }
        let (start, end) = hours_part.trim().split_once('-').ok_or_else(|| bad("expected hours `HH-HH`"))?;
        let hour = |h: &str| h.trim().parse::<u32>().map_err(|_| bad("bad hour"));
        let (start_hour, end_hour) = (hour(start)?, hour(end)?);
        if start_hour >= end_hour || end_hour > 24 {
            return Err(bad("hours must satisfy 0 <= start < end <= 24"));
        }
        Ok(Self { days, start_hour, end_hour })
    }
}

impl fmt::Display for CadenceWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let days: Vec<&str> = (0..7).filter(|&d| self.days[d]).map(|d| DAY_NAMES[d]).collect();
        let days = if days.len() == 7 { "*".to_string() } else { days.join(",") };
        write!(f, "{days} {:02}-{:02}", self.start_hour, self.end_hour)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CadenceRule {
    pub region: Region,
    pub windows: Vec<CadenceWindow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRule {
    pub region: Region,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl BoundRule {
    fn describe(&self) -> String {
        let end = |b: Option<f64>, inf: &str| b.map(format_number).unwrap_or_else(|| inf.to_string());
        format!("[{}, {}]", end(self.min, "-inf"), end(self.max, "inf"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendRule {
    pub address: CellAddress,
    pub window: usize,
    pub z_threshold: f64,
    pub min_points: usize,
}

impl TrendRule {
    pub fn new(address: CellAddress) -> Self {
        Self { address, window: 20, z_threshold: 3.0, min_points: 5 }
    }
}

/// When the workflow's touched-step memory resets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeriodBoundary {
    /// After each ATTEST record.
    #[default]
    Attest,
    /// At each UTC calendar day.
    Day,
    /// At each ISO week.
    Week,
    /// At each UTC calendar month.
    Month,
}

impl FromStr for PeriodBoundary {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "attest" => Ok(PeriodBoundary::Attest),
            "day" => Ok(PeriodBoundary::Day),
            "week" => Ok(PeriodBoundary::Week),
            "month" => Ok(PeriodBoundary::Month),
            _ => Err(PolicyError::Invalid(format!("unknown workflow period {s:?}"))),
        }
    }
}

impl PeriodBoundary {
    fn bucket(self, t: &DateTime<Utc>) -> (i32, u32) {
        match self {
            PeriodBoundary::Attest => (0, 0),
            PeriodBoundary::Day => (t.year(), t.ordinal()),
            PeriodBoundary::Week => (t.iso_week().year(), t.iso_week().week()),
            PeriodBoundary::Month => (t.year(), t.month()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowStep {
    pub id: String,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Workflow {
    pub steps: Vec<WorkflowStep>,
    pub period: PeriodBoundary,
}

impl Workflow {
    pub fn new(steps: Vec<WorkflowStep>, period: PeriodBoundary) -> Result<Self, PolicyError> {
        let wf = Self { steps, period };
        wf.validate()?;
        Ok(wf)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let mut ids = BTreeSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            if !ids.insert(step.id.as_str()) {
                return Err(PolicyError::Invalid(format!("duplicate workflow step {:?}", step.id)));
            }
            if let Some(other) = self.steps[..i].iter().find(|o| o.region.overlaps(&step.region)) {
                return Err(PolicyError::Invalid(format!("workflow steps {:?} and {:?} overlap", other.id, step.id)));
            }
        }
        Ok(())
    }

    /// Index of the step whose region holds `address`.
    pub fn step_of(&self, address: &CellAddress) -> Option<usize> {
        self.steps.iter().position(|s| s.region.contains(address))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlPolicy {
    /// Workbook the policy is bound to; `None` applies to any workbook.
    pub workbook_id: Option<String>,
    pub region_rules: Vec<RegionRule>,
    pub cadence_rules: Vec<CadenceRule>,
    pub bound_rules: Vec<BoundRule>,
    pub trend_rules: Vec<TrendRule>,
    pub workflow: Option<Workflow>,
}

// TOML file shape.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    workbook: Option<String>,
    #[serde(default)]
    region: Vec<RegionStanza>,
    #[serde(default)]
    cadence: Vec<CadenceStanza>,
    #[serde(default)]
    bounds: Vec<BoundsStanza>,
    #[serde(default)]
    trend: Vec<TrendStanza>,
    workflow: Option<WorkflowStanza>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionStanza {
    range: String,
    mode: String,
    #[serde(default)]
    ticket_required: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CadenceStanza {
    range: String,
    windows: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsStanza {
    range: String,
    min: Option<f64>,
    max: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrendStanza {
    cell: String,
    window: Option<usize>,
    z_threshold: Option<f64>,
    min_points: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkflowStanza {
    period: Option<String>,
    #[serde(default)]
    step: Vec<StepStanza>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepStanza {
    id: String,
    range: String,
}

fn region(text: &str) -> Result<Region, PolicyError> {
    text.parse().map_err(|e| PolicyError::Invalid(format!("range {text:?}: {e}")))
}

impl ControlPolicy {
    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile = toml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        let mut policy = ControlPolicy { workbook_id: file.workbook, ..Default::default() };
        for r in file.region {
            policy.region_rules.push(RegionRule {
                region: region(&r.range)?,
                mode: r.mode.parse()?,
                ticket_required: r.ticket_required,
            });
        }
        for c in file.cadence {
            policy.cadence_rules.push(CadenceRule {
                region: region(&c.range)?,
                windows: c.windows.iter().map(|w| w.parse()).collect::<Result<_, _>>()?,
            });
        }
        for b in file.bounds {
            policy.bound_rules.push(BoundRule { region: region(&b.range)?, min: b.min, max: b.max });
        }
        for t in file.trend {
            let address = t.cell.parse().map_err(|e| PolicyError::Invalid(format!("trend cell {:?}: {e}", t.cell)))?;
            let mut rule = TrendRule::new(address);
            rule.window = t.window.unwrap_or(rule.window);
            rule.z_threshold = t.z_threshold.unwrap_or(rule.z_threshold);
            rule.min_points = t.min_points.unwrap_or(rule.min_points);
            policy.trend_rules.push(rule);
        }
        if let Some(w) = file.workflow {
            let steps = w
                .step
                .into_iter()
                .map(|s| Ok(WorkflowStep { id: s.id, region: region(&s.range)? }))
                .collect::<Result<_, PolicyError>>()?;
            let period = w.period.as_deref().map(str::parse).transpose()?.unwrap_or_default();
            policy.workflow = Some(Workflow { steps, period });
        }
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let invalid = |m: String| Err(PolicyError::Invalid(m));
        for c in &self.cadence_rules {
            if c.windows.is_empty() {
                return invalid(format!("cadence rule for {} has no windows", c.region));
            }
        }
        for b in &self.bound_rules {
            if b.min.is_some_and(|m| !m.is_finite()) || b.max.is_some_and(|m| !m.is_finite()) {
                return invalid(format!("bounds for {} must be finite", b.region));
            }
            if let (Some(min), Some(max)) = (b.min, b.max)
                && min > max
            {
                return invalid(format!("bounds for {} have min > max", b.region));
            }
        }
        for t in &self.trend_rules {
            if t.window < 5 {
                return invalid(format!("trend window for {} must be at least 5", t.address));
            }
            if !(t.z_threshold.is_finite() && t.z_threshold > 0.0) {
                return invalid(format!("trend z_threshold for {} must be positive", t.address));
            }
            if t.min_points < 5 || t.min_points > t.window {
                return invalid(format!("trend min_points for {} must be in 5..=window", t.address));
            }
        }
        if let Some(w) = &self.workflow {
            w.validate()?;
        }
        Ok(())
    }
}

/// Strictest mode among the region rules covering `address`; FREE when none do.
pub fn effective_mode(policy: &ControlPolicy, address: &CellAddress) -> RegionMode {
    policy.region_rules.iter().filter(|r| r.region.contains(address)).map(|r| r.mode).max().unwrap_or(RegionMode::Free)
}

/// A ticket reference such as `CHG-1042`: ASCII letters, a hyphen, digits.
pub fn has_ticket_reference(text: &str) -> bool {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-')).any(|token| {
        token.split_once('-').is_some_and(|(letters, digits)| {
            !letters.is_empty()
                && letters.chars().all(|c| c.is_ascii_alphabetic())
                && !digits.is_empty()
                && digits.chars().all(|c| c.is_ascii_digit())
        })
    })
}

fn rule_flags(rule: &RegionRule, event: &ChangeEvent, attestation: &str) -> Option<RuleId> {
    match rule.mode {
        RegionMode::Free => None,
        RegionMode::Locked => Some(RuleId::LockedRegionChange),
        RegionMode::DataOnly => event.touches_logic().then_some(RuleId::DataOnlyLogicChange),
        RegionMode::FormulaMaintained => {
            let attested =
                !attestation.trim().is_empty() && (!rule.ticket_required || has_ticket_reference(attestation));
            (event.touches_logic() && !attested).then_some(RuleId::UnattestedLogicChange)
        }
    }
}

/// Region-mode findings: at most one per (event, rule id).
pub fn check_regions(cs: &ChangeSet, policy: &ControlPolicy) -> Vec<Finding> {
    let attestation = cs.attestation.as_deref().unwrap_or("");
    let mut out = Vec::new();
    for event in &cs.events {
        let rules: BTreeSet<RuleId> = policy
            .region_rules
            .iter()
            .filter(|r| r.region.contains(&event.address))
            .filter_map(|r| rule_flags(r, event, attestation))
            .collect();
        for rule in rules {
            let message = match rule {
                RuleId::LockedRegionChange => "cell changed inside a LOCKED region",
                RuleId::DataOnlyLogicChange => "formula logic changed inside a DATA_ONLY region",
                _ if attestation.trim().is_empty() => "formula logic changed without an attestation",
                _ => "formula logic changed without a ticket reference in the attestation",
            };
            out.push(Finding::new(rule, Location::Cell(event.address.clone()), message, event.kind.as_str()));
        }
    }
    out
}

/// One CADENCE_VIOLATION per (event, rule) whose change time is outside every window.
pub fn check_cadence(cs: &ChangeSet, policy: &ControlPolicy) -> Vec<Finding> {
    let t = cs.to_time;
    let mut out = Vec::new();
    for rule in &policy.cadence_rules {
        if rule.windows.iter().any(|w| w.contains(&t)) {
            continue;
        }
        let windows: Vec<String> = rule.windows.iter().map(ToString::to_string).collect();
        for event in cs.events.iter().filter(|e| rule.region.contains(&e.address)) {
            out.push(
                Finding::new(
                    RuleId::CadenceViolation,
                    Location::Cell(event.address.clone()),
                    format!("changed outside the allowed windows for {}", rule.region),
                    format!("{} {}", DAY_NAMES[t.weekday().num_days_from_monday() as usize], format_timestamp(&t)),
                )
                .with_expected(windows.join("; ")),
            );
        }
    }
    out
}

/// BOUND_VIOLATION for numeric values outside inclusive bounds; TYPE_VIOLATION for
/// non-numeric values in a bounded region.
pub fn check_bounds(cs: &ChangeSet, policy: &ControlPolicy) -> Vec<Finding> {
    let mut out = Vec::new();
    for event in cs.events.iter().filter(|e| matches!(e.kind, ChangeKind::Added | ChangeKind::DataChanged)) {
        let Some(value) = event.after.as_ref().and_then(|c| c.value()) else { continue };
        for rule in policy.bound_rules.iter().filter(|r| r.region.contains(&event.address)) {
            let location = Location::Cell(event.address.clone());
            match value {
                CellValue::Number(n) => {
                    if rule.min.is_some_and(|m| *n < m) || rule.max.is_some_and(|m| *n > m) {
                        out.push(
                            Finding::new(
                                RuleId::BoundViolation,
                                location,
                                format!("value outside bounds of {}", rule.region),
                                format_number(*n),
                            )
                            .with_expected(rule.describe()),
                        );
                    }
                }
                other => out.push(
                    Finding::new(
                        RuleId::TypeViolation,
                        location,
                        format!("non-numeric value in bounded region {}", rule.region),
                        other.to_string(),
                    )
                    .with_expected("number"),
                ),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendVerdict {
    pub address: CellAddress,
    pub new_value: f64,
    pub mean: f64,
    pub stddev: f64,
    pub z: f64,
    pub violated: bool,
}

/// Scores `new_value` against up to `rule.window` most recent numeric points of `series`.
pub fn trend_deviation(series: &CellSeries, new_value: f64, rule: &TrendRule) -> TrendVerdict {
    let numbers = series.numbers();
    let prior = &numbers[numbers.len().saturating_sub(rule.window)..];
    let mut verdict =
        TrendVerdict { address: series.address.clone(), new_value, mean: 0.0, stddev: 0.0, z: 0.0, violated: false };
    if prior.len() < rule.min_points || prior.is_empty() {
        return verdict;
    }
    let n = prior.len() as f64;
    let mean = prior.iter().sum::<f64>() / n;
    let variance =
        if prior.len() > 1 { prior.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    verdict.mean = mean;
    verdict.stddev = variance.sqrt();
    if verdict.stddev > 0.0 {
        verdict.z = (new_value - mean) / verdict.stddev;
        verdict.violated = verdict.z.abs() > rule.z_threshold;
    } else {
        verdict.violated = new_value != mean;
    }
    verdict
}

pub fn check_trends(cs: &ChangeSet, policy: &ControlPolicy, ledger: &LedgerView<'_>) -> Vec<Finding> {
    let mut out = Vec::new();
    for rule in &policy.trend_rules {
        let Some(new_value) =
            cs.events.iter().find(|e| e.address == rule.address).and_then(|e| e.after.as_ref()?.value()?.as_number())
        else {
            continue;
        };
        let verdict = trend_deviation(&ledger.series_for_cell(&rule.address), new_value, rule);
        if verdict.violated {
            let message = if verdict.stddev > 0.0 {
                format!(
                    "value deviates from recent history (mean {}, stddev {:.6}, z {:.6})",
                    format_number(verdict.mean),
                    verdict.stddev,
                    verdict.z
                )
            } else {
                format!("value departs from a constant history of {}", format_number(verdict.mean))
            };
            out.push(
                Finding::new(
                    RuleId::TrendDeviation,
                    Location::Cell(rule.address.clone()),
                    message,
                    format_number(new_value),
                )
                .with_expected(format!("|z| <= {}", format_number(rule.z_threshold))),
            );
        }
    }
    out
}

/// Step indices touched by a change set.
fn touched_steps(workflow: &Workflow, cs: &ChangeSet) -> BTreeSet<usize> {
    cs.events.iter().filter_map(|e| workflow.step_of(&e.address)).collect()
}

/// TASK_ORDER_VIOLATION for each step touched in `cs` while an earlier step is still
/// untouched in the current period.
pub fn check_task_order(ledger: &LedgerView<'_>, workflow: &Workflow, cs: &ChangeSet) -> Vec<Finding> {
    let bucket = workflow.period.bucket(&cs.to_time);
    let mut done = BTreeSet::new();
    for (_, entry) in ledger.entries() {
        match entry {
            Entry::Attest(_) if workflow.period == PeriodBoundary::Attest => done.clear(),
            Entry::ChangeSet(prior) if workflow.period.bucket(&prior.to_time) == bucket => {
                done.extend(touched_steps(workflow, &prior));
            }
            _ => {}
        }
    }
    let now = touched_steps(workflow, cs);
    let mut out = Vec::new();
    for &k in &now {
        let skipped: Vec<&str> =
            (0..k).filter(|j| !done.contains(j) && !now.contains(j)).map(|j| workflow.steps[j].id.as_str()).collect();
        if !skipped.is_empty() {
            let step = &workflow.steps[k];
            out.push(
                Finding::new(
                    RuleId::TaskOrderViolation,
                    Location::Region(step.region.clone()),
                    format!("step {} performed before {}", step.id, skipped.join(", ")),
                    step.id.clone(),
                )
                .with_expected(skipped.join(",")),
            );
        }
    }
    out
}

/// All policy findings for one change set, evaluated against the prior ledger history.
pub fn evaluate_policies(cs: &ChangeSet, policy: &ControlPolicy, ledger: &LedgerView<'_>) -> Vec<Finding> {
    let mut out = check_regions(cs, policy);
    out.extend(check_cadence(cs, policy));
    out.extend(check_bounds(cs, policy));
    out.extend(check_trends(cs, policy, ledger));
    if let Some(workflow) = &policy.workflow {
        out.extend(check_task_order(ledger, workflow, cs));
    }
    sort_findings(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::diff_snapshots;
    use crate::grid::{CellContent, Snapshot};
    use crate::ledger::Ledger;
    use chrono::TimeZone;

    fn addr(s: &str) -> CellAddress {
        s.parse().unwrap()
    }

    fn cs_with(events: Vec<ChangeEvent>, to_time: DateTime<Utc>, attestation: Option<&str>) -> ChangeSet {
        let empty = Snapshot::new("wb", to_time, "ann");
        let mut cs = diff_snapshots(&empty, &empty).unwrap();
        cs.to_time = to_time;
        cs.events = events;
        cs.attestation = attestation.map(str::to_string);
        cs
    }

    fn event(a: &str, kind: ChangeKind, before: Option<CellContent>, after: Option<CellContent>) -> ChangeEvent {
        ChangeEvent { address: addr(a), kind, before, after }
    }

    fn tue(hour: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 7, hour, 0, 0).unwrap()
    }

    fn policy(text: &str) -> ControlPolicy {
        ControlPolicy::from_toml(text).unwrap()
    }

    fn logic_change(a: &str) -> ChangeEvent {
        event(
            a,
            ChangeKind::LogicChanged,
            Some(CellContent::formula("=A1+1").unwrap()),
            Some(CellContent::formula("=A1+2").unwrap()),
        )
    }

    fn data_change(a: &str, after: CellContent) -> ChangeEvent {
        event(a, ChangeKind::DataChanged, Some(CellContent::number(1.0)), Some(after))
    }

    fn rules(findings: &[Finding]) -> Vec<RuleId> {
        findings.iter().map(|f| f.rule_id).collect()
    }

    #[test]
    fn empty_changeset_has_no_findings() {
        let ledger = Ledger::in_memory();
        let p = policy("[[region]]\nrange = \"S!A1:Z99\"\nmode = \"LOCKED\"\n");
        assert!(evaluate_policies(&cs_with(vec![], tue(10), None), &p, &ledger.view()).is_empty());
    }

    #[test]
    fn mode_examples() {
        let p = policy(
            "[[region]]\nrange = \"S!A1:A10\"\nmode = \"LOCKED\"\n\
             [[region]]\nrange = \"S!B1:B10\"\nmode = \"DATA_ONLY\"\n\
             [[region]]\nrange = \"S!A1:C10\"\nmode = \"FREE\"\n",
        );
        let locked = check_regions(&cs_with(vec![data_change("S!A2", CellContent::number(2.0))], tue(10), None), &p);
        assert_eq!(rules(&locked), [RuleId::LockedRegionChange]);
        assert!(locked[0].is_critical());
        let data_only = check_regions(&cs_with(vec![logic_change("S!B2")], tue(10), None), &p);
        assert_eq!(rules(&data_only), [RuleId::DataOnlyLogicChange]);
        let data_ok = check_regions(&cs_with(vec![data_change("S!B2", CellContent::number(5.0))], tue(10), None), &p);
        assert!(data_ok.is_empty());

        assert_eq!(effective_mode(&p, &addr("S!A1")), RegionMode::Locked);
        assert_eq!(effective_mode(&p, &addr("S!Z1")), RegionMode::Free);
        let q = policy(
            "[[region]]\nrange = \"S!A1\"\nmode = \"FORMULA_MAINTAINED\"\n[[region]]\nrange = \"S!A1\"\nmode = \"data_only\"\n",
        );
        assert_eq!(effective_mode(&q, &addr("S!A1")), RegionMode::DataOnly);
    }

    #[test]
    fn formula_maintained_needs_attestation_and_ticket() {
        let p = policy("[[region]]\nrange = \"S!A1:A10\"\nmode = \"FORMULA_MAINTAINED\"\nticket_required = true\n");
        let run = |att: Option<&str>| rules(&check_regions(&cs_with(vec![logic_change("S!A1")], tue(10), att), &p));
        assert_eq!(run(None), [RuleId::UnattestedLogicChange]);
        assert_eq!(run(Some("  ")), [RuleId::UnattestedLogicChange]);
        assert_eq!(run(Some("fixed rounding")), [RuleId::UnattestedLogicChange]);
        assert!(run(Some("fixed rounding per CHG-1042")).is_empty());
        assert!(has_ticket_reference("(JIRA-7)"));
        assert!(!has_ticket_reference("CHG-"));
        assert!(!has_ticket_reference("12-34"));
    }

    #[test]
    fn cadence_examples() {
        let p = policy("[[cadence]]\nrange = \"S!A1:A10\"\nwindows = [\"Mon-Fri 09-17\"]\n");
        let run = |t| check_cadence(&cs_with(vec![data_change("S!A1", CellContent::number(3.0))], t, None), &p);
        assert!(run(tue(10)).is_empty());
        assert_eq!(run(Utc.with_ymd_and_hms(2024, 5, 11, 10, 0, 0).unwrap()).len(), 1);
        assert_eq!(run(tue(17)).len(), 1);
        assert!(run(tue(9)).is_empty());
        let outside = cs_with(vec![data_change("S!B1", CellContent::number(3.0))], tue(20), None);
        assert!(check_cadence(&outside, &p).is_empty());
    }

    #[test]
    fn window_parsing() {
        let w: CadenceWindow = "Fri-Mon 0-24".parse().unwrap();
        assert_eq!(w.days, [true, false, false, false, true, true, true]);
        assert_eq!(w.to_string(), "Mon,Fri,Sat,Sun 00-24");
        assert_eq!("* 8-9".parse::<CadenceWindow>().unwrap().to_string(), "* 08-09");
        assert!("Mon 9-9".parse::<CadenceWindow>().is_err());
        assert!("Mon 9-25".parse::<CadenceWindow>().is_err());
        assert!("Funday 9-10".parse::<CadenceWindow>().is_err());
    }

    #[test]
    fn bound_examples() {
        let p = policy("[[bounds]]\nrange = \"S!A1:A10\"\nmin = 0\nmax = 100\n");
        let run = |c| check_bounds(&cs_with(vec![data_change("S!A1", c)], tue(10), None), &p);
        assert!(run(CellContent::number(100.0)).is_empty());
        assert!(run(CellContent::number(0.0)).is_empty());
        assert_eq!(rules(&run(CellContent::number(-1.0))), [RuleId::BoundViolation]);
        assert_eq!(rules(&run(CellContent::text("n/a"))), [RuleId::TypeViolation]);
    }

    #[test]
    fn trend_examples() {
        let rule = TrendRule::new(addr("S!A1"));
        let series = |xs: &[f64]| CellSeries {
            address: addr("S!A1"),
            points: xs.iter().enumerate().map(|(i, x)| (tue(i as u32), CellValue::Number(*x))).collect(),
        };
        assert!(!trend_deviation(&series(&[10.0; 5]), 10.0, &rule).violated);
        let moved = trend_deviation(&series(&[10.0; 5]), 11.0, &rule);
        assert!(moved.violated);
        assert_eq!(moved.z, 0.0);
        let few = trend_deviation(&series(&[10.0; 4]), 99.0, &rule);
        assert!(!few.violated);
        assert_eq!(few.z, 0.0);
    }

    #[test]
    fn policy_file_validation() {
        assert!(ControlPolicy::from_toml("[[region]]\nrange = \"S!A1\"\nmode = \"SEALED\"\n").is_err());
        assert!(ControlPolicy::from_toml("[[bounds]]\nrange = \"S!A1\"\nmin = 5\nmax = 1\n").is_err());
        assert!(ControlPolicy::from_toml("[[trend]]\ncell = \"S!A1\"\nwindow = 4\n").is_err());
        assert!(ControlPolicy::from_toml("[[trend]]\ncell = \"S!A1\"\nz_threshold = 0\n").is_err());
        assert!(ControlPolicy::from_toml("unknown = 1\n").is_err());
        let overlapping = "[workflow]\n[[workflow.step]]\nid = \"a\"\nrange = \"S!A1:A5\"\n\
                           [[workflow.step]]\nid = \"b\"\nrange = \"S!A5:B5\"\n";
        assert!(ControlPolicy::from_toml(overlapping).is_err());
        let duplicate = "[workflow]\n[[workflow.step]]\nid = \"a\"\nrange = \"S!A1\"\n\
                         [[workflow.step]]\nid = \"a\"\nrange = \"S!B1\"\n";
        assert!(ControlPolicy::from_toml(duplicate).is_err());
        let p = ControlPolicy::from_toml("workbook = \"wb\"\n[[trend]]\ncell = \"S!A1\"\n").unwrap();
        assert_eq!(p.trend_rules[0], TrendRule::new(addr("S!A1")));
        assert_eq!(p.workbook_id.as_deref(), Some("wb"));
    }

    #[test]
    fn task_order_within_one_changeset() {
        let wf = Workflow::new(
            vec![
                WorkflowStep { id: "S1".into(), region: "S!A1".parse().unwrap() },
                WorkflowStep { id: "S2".into(), region: "S!B1".parse().unwrap() },
                WorkflowStep { id: "S3".into(), region: "S!C1".parse().unwrap() },
            ],
            PeriodBoundary::Attest,
        )
        .unwrap();
        let ledger = Ledger::in_memory();
        let touch = |cells: &[&str]| {
            cs_with(cells.iter().map(|c| data_change(c, CellContent::number(9.0))).collect(), tue(10), None)
        };
        assert!(check_task_order(&ledger.view(), &wf, &touch(&["S!A1", "S!B1", "S!C1"])).is_empty());
        let skipped = check_task_order(&ledger.view(), &wf, &touch(&["S!B1"]));
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].expected.as_deref(), Some("S1"));
        assert!(skipped[0].message.contains("S2"));
        assert!(check_task_order(&ledger.view(), &wf, &touch(&["S!Z9"])).is_empty());
    }
}
