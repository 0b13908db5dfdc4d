//! Static audit of a single snapshot: copy-run inconsistencies, deep IF nesting,
//! embedded constants, error values and unparseable formulas.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::finding::{Finding, Location, RuleId, sort_findings};
use crate::formula::{FormulaAst, UnaryOp, normalize_relative};
use crate::grid::{CellAddress, CellContent, CellValue, Region, Snapshot, format_number};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid audit config: {0}")]
    Invalid(String),
    #[error("cannot parse audit config: {0}")]
    Parse(String),
}

/// An exact non-negative rational, written `2/3` or as a decimal like `0.75`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den != 0).then_some(Self { num, den })
    }

    pub fn numerator(self) -> u64 {
        self.num
    }

    pub fn denominator(self) -> u64 {
        self.den
    }

    /// `part / whole >= self`, exactly.
    pub fn is_reached_by(self, part: usize, whole: usize) -> bool {
        (part as u128) * (self.den as u128) >= (self.num as u128) * (whole as u128)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl FromStr for Fraction {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Parse(format!("not a fraction: {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| bad())?;
            let den = d.trim().parse().map_err(|_| bad())?;
            return Fraction::new(num, den).ok_or_else(bad);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 18 {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let num = digits.parse().map_err(|_| bad())?;
        Fraction::new(num, 10u64.pow(frac.len() as u32)).ok_or_else(bad)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Float(f64),
            Int(u64),
        }
        let text = match Raw::deserialize(deserializer)? {
            Raw::Text(t) => t,
            Raw::Float(f) => format!("{f}"),
            Raw::Int(i) => i.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

fn default_if_depth() -> u32 {
    3
}

fn default_min_run() -> usize {
    3
}

fn default_majority() -> Fraction {
    Fraction { num: 2, den: 3 }
}

fn default_whitelist() -> Vec<f64> {
    vec![0.0, 1.0, -1.0, 100.0]
}

/// Detector thresholds. Loaded from TOML; absent keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "default_if_depth")]
    pub if_depth_threshold: u32,
    #[serde(default = "default_min_run")]
    pub min_run_length: usize,
    #[serde(default = "default_majority")]
    pub majority_fraction: Fraction,
    #[serde(default = "default_whitelist")]
    pub constant_whitelist: Vec<f64>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            if_depth_threshold: default_if_depth(),
            min_run_length: default_min_run(),
            majority_fraction: default_majority(),
            constant_whitelist: default_whitelist(),
        }
    }
}

impl AuditConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: AuditConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.if_depth_threshold < 1 {
            return Err(ConfigError::Invalid("if_depth_threshold must be >= 1".into()));
        }
        if self.min_run_length < 3 {
            return Err(ConfigError::Invalid("min_run_length must be >= 3".into()));
        }
        let f = self.majority_fraction;
        if f.num * 2 <= f.den || f.num > f.den {
            return Err(ConfigError::Invalid(format!("majority_fraction {f} must lie in (1/2, 1]")));
        }
        Ok(())
    }
}

/// Runs every detector and returns findings ordered by (sheet, row, col, rule_id).
pub fn audit_workbook(s: &Snapshot, cfg: &AuditConfig) -> Vec<Finding> {
    let mut findings = Vec::new();
    for sheet in s.sheets() {
        findings.extend(detect_copy_inconsistencies(s, sheet, cfg));
    }
    findings.extend(detect_deep_nesting(s, cfg));
    findings.extend(detect_embedded_constants(s, cfg));
    findings.extend(detect_error_values(s));
    findings.extend(detect_parse_failures(s));
    sort_findings(&mut findings);
    findings
}

#[derive(Clone, Copy)]
enum Axis {
    Row,
    Column,
}

/// Flags minority formulas in maximal horizontal and vertical runs of formula cells.
pub fn detect_copy_inconsistencies(s: &Snapshot, sheet: &str, cfg: &AuditConfig) -> Vec<Finding> {
    // (row, col) -> normalized text; unparseable formulas keep their source.
    let mut forms: BTreeMap<(u32, u32), String> = BTreeMap::new();
    for (addr, content) in s.cells.iter().filter(|(a, _)| a.same_sheet(sheet)) {
        if let CellContent::Formula(f) = content {
            let form = match f.ast() {
                Ok(ast) => normalize_relative(ast, addr).as_str().to_string(),
                Err(_) => f.source().to_string(),
            };
            forms.insert((addr.row(), addr.col()), form);
        }
    }
    let Some(sheet_name) = s.cells.keys().find(|a| a.same_sheet(sheet)).map(|a| a.sheet().to_string()) else {
        return Vec::new();
    };

    let mut findings = Vec::new();
    let mut flagged: HashSet<(u32, u32)> = HashSet::new();
    for axis in [Axis::Row, Axis::Column] {
        for run in runs(&forms, axis) {
            if run.len() < cfg.min_run_length {
                continue;
            }
            let Some(majority) = majority_form(&run, &forms, cfg) else { continue };
            let (first, last) = (run[0], run[run.len() - 1]);
            let region =
                Region { sheet: sheet_name.clone(), top: first.0, left: first.1, bottom: last.0, right: last.1 };
            for pos in &run {
                let form = &forms[pos];
                if form == majority || !flagged.insert(*pos) {
                    continue;
                }
                let addr = CellAddress::new(sheet_name.clone(), pos.0, pos.1).expect("address came from a snapshot");
                let axis_name = match axis {
                    Axis::Row => "row",
                    Axis::Column => "column",
                };
                findings.push(
                    Finding::new(
                        RuleId::CopyInconsistent,
                        Location::Cell(addr),
                        format!("formula differs from the majority of its {axis_name} run {region}"),
                        form.clone(),
                    )
                    .with_expected(majority.clone()),
                );
            }
        }
    }
    sort_findings(&mut findings);
    findings
}

fn runs(forms: &BTreeMap<(u32, u32), String>, axis: Axis) -> Vec<Vec<(u32, u32)>> {
    let mut cells: Vec<(u32, u32)> = forms.keys().copied().collect();
    // Sort so that consecutive entries along the axis are adjacent.
    let line_key = |p: &(u32, u32)| match axis {
        Axis::Row => (p.0, p.1),
        Axis::Column => (p.1, p.0),
    };
    cells.sort_by_key(line_key);
    let mut out: Vec<Vec<(u32, u32)>> = Vec::new();
    for pos in cells {
        let (line, step) = line_key(&pos);
        match out.last_mut() {
            Some(run)
                if {
                    let (prev_line, prev_step) = line_key(run.last().expect("runs are non-empty"));
                    prev_line == line && prev_step + 1 == step
                } =>
            {
                run.push(pos)
            }
            _ => out.push(vec![pos]),
        }
    }
    out
}

fn majority_form<'a>(
    run: &[(u32, u32)],
    forms: &'a BTreeMap<(u32, u32), String>,
    cfg: &AuditConfig,
) -> Option<&'a String> {
    let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
    for pos in run {
        *counts.entry(&forms[pos]).or_default() += 1;
    }
    let (form, count) = counts.iter().max_by_key(|(_, c)| **c)?;
    let strict = *count * 2 > run.len();
    (strict && cfg.majority_fraction.is_reached_by(*count, run.len())).then_some(*form)
}

/// Deepest chain of nested `IF` calls, counting the node itself.
pub fn if_depth(ast: &FormulaAst) -> u32 {
    let here = u32::from(matches!(ast, FormulaAst::Call(name, _) if name == "IF"));
    let below = match ast {
        FormulaAst::Unary(_, c) => if_depth(c),
        FormulaAst::Binary(_, l, r) => if_depth(l).max(if_depth(r)),
        FormulaAst::Call(_, args) => args.iter().map(if_depth).max().unwrap_or(0),
        _ => 0,
    };
    here + below
}

pub fn detect_deep_nesting(s: &Snapshot, cfg: &AuditConfig) -> Vec<Finding> {
    let mut out = Vec::new();
    for (addr, content) in &s.cells {
        let CellContent::Formula(f) = content else { continue };
        let Ok(ast) = f.ast() else { continue };
        let depth = if_depth(ast);
        if depth > cfg.if_depth_threshold {
            out.push(
                Finding::new(
                    RuleId::DeepNesting,
                    Location::Cell(addr.clone()),
                    format!("IF nested {depth} deep (threshold {})", cfg.if_depth_threshold),
                    depth.to_string(),
                )
                .with_expected(format!("<= {}", cfg.if_depth_threshold)),
            );
        }
    }
    out
}

/// Numeric literals in a formula, folding a leading minus into the constant.
fn constants(ast: &FormulaAst, out: &mut Vec<f64>) {
    match ast {
        FormulaAst::Number(n) => out.push(*n),
        FormulaAst::Unary(UnaryOp::Neg, c) if matches!(**c, FormulaAst::Number(_)) => {
            if let FormulaAst::Number(n) = **c {
                out.push(-n);
            }
        }
        FormulaAst::Unary(_, c) => constants(c, out),
        FormulaAst::Binary(_, l, r) => {
            constants(l, out);
            constants(r, out);
        }
        FormulaAst::Call(_, args) => args.iter().for_each(|a| constants(a, out)),
        _ => {}
    }
}

pub fn detect_embedded_constants(s: &Snapshot, cfg: &AuditConfig) -> Vec<Finding> {
    let mut out = Vec::new();
    for (addr, content) in &s.cells {
        let CellContent::Formula(f) = content else { continue };
        let Ok(ast) = f.ast() else { continue };
        let bare_literal = match ast {
            FormulaAst::Number(_) => true,
            FormulaAst::Unary(UnaryOp::Neg, c) => matches!(**c, FormulaAst::Number(_)),
            _ => false,
        };
        if bare_literal {
            continue;
        }
        let mut found = Vec::new();
        constants(ast, &mut found);
        found.retain(|c| !cfg.constant_whitelist.contains(c));
        if found.is_empty() {
            continue;
        }
        let cited: Vec<String> = found.iter().map(|c| format_number(*c)).collect();
        out.push(Finding::new(
            RuleId::EmbeddedConstant,
            Location::Cell(addr.clone()),
            format!("formula embeds constant {}", cited.join(", ")),
            cited.join(","),
        ));
    }
    out
}

pub fn detect_error_values(s: &Snapshot) -> Vec<Finding> {
    s.cells
        .iter()
        .filter_map(|(addr, content)| match content.value() {
            Some(CellValue::Error(code)) => Some(Finding::new(
                RuleId::ErrorValue,
                Location::Cell(addr.clone()),
                format!("cell evaluates to {code}"),
                code.as_str(),
            )),
            _ => None,
        })
        .collect()
}

pub fn detect_parse_failures(s: &Snapshot) -> Vec<Finding> {
    s.cells
        .iter()
        .filter_map(|(addr, content)| match content {
            CellContent::Formula(f) => f.ast().err().map(|e| {
                Finding::new(
                    RuleId::ParseFailure,
                    Location::Cell(addr.clone()),
                    format!("formula could not be parsed: {e}"),
                    f.source(),
                )
            }),
            _ => None,
        })
        .collect()
}

/// Distinct cells named by a list of findings.
pub fn flagged_cells(findings: &[Finding]) -> BTreeSet<CellAddress> {
    findings.iter().filter_map(|f| f.location.cell().cloned()).collect()
}
