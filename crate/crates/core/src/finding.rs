//! Findings and the closed rule registry shared by the auditor, the control engine and
//! the report builder.

use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::grid::{self, CellAddress, Region, escape, unescape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FindingError {
    #[error("unknown rule {0:?}")]
    UnknownRule(String),
    #[error("unknown severity {0:?}")]
    UnknownSeverity(String),
    #[error("bad location {0:?}")]
    BadLocation(String),
    #[error("malformed finding line {0:?}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Critical => "critical",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = FindingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "info" => Ok(Severity::Info),
            "warning" => Ok(Severity::Warning),
            "critical" => Ok(Severity::Critical),
            other => Err(FindingError::UnknownSeverity(other.to_string())),
        }
    }
}

macro_rules! rules {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// Every rule that can produce a finding.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum RuleId {
            $($variant),+
        }

        impl RuleId {
            pub const ALL: &'static [RuleId] = &[$(RuleId::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(RuleId::$variant => $name),+
                }
            }
        }

        impl FromStr for RuleId {
            type Err = FindingError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(RuleId::$variant),)+
                    other => Err(FindingError::UnknownRule(other.to_string())),
                }
            }
        }
    };
}

rules! {
    CopyInconsistent => "COPY_INCONSISTENT",
    DeepNesting => "DEEP_NESTING",
    EmbeddedConstant => "EMBEDDED_CONSTANT",
    ErrorValue => "ERROR_VALUE",
    ParseFailure => "PARSE_FAILURE",
    LockedRegionChange => "LOCKED_REGION_CHANGE",
    DataOnlyLogicChange => "DATA_ONLY_LOGIC_CHANGE",
    UnattestedLogicChange => "UNATTESTED_LOGIC_CHANGE",
    CadenceViolation => "CADENCE_VIOLATION",
    BoundViolation => "BOUND_VIOLATION",
    TypeViolation => "TYPE_VIOLATION",
    TrendDeviation => "TREND_DEVIATION",
    TaskOrderViolation => "TASK_ORDER_VIOLATION",
    LedgerTamper => "LEDGER_TAMPER",
}

impl RuleId {
    /// Default severity each rule reports with.
    pub fn severity(self) -> Severity {
        match self {
            RuleId::ErrorValue
            | RuleId::LockedRegionChange
            | RuleId::DataOnlyLogicChange
            | RuleId::BoundViolation
            | RuleId::TypeViolation
            | RuleId::LedgerTamper => Severity::Critical,
            RuleId::CopyInconsistent
            | RuleId::DeepNesting
            | RuleId::EmbeddedConstant
            | RuleId::ParseFailure
            | RuleId::UnattestedLogicChange
            | RuleId::CadenceViolation
            | RuleId::TrendDeviation
            | RuleId::TaskOrderViolation => Severity::Warning,
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for RuleId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

/// Where a finding applies. Renders as `Sheet1!B2`, `Sheet1!A1:C9` or `*` for the
/// whole workbook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Workbook,
    Cell(CellAddress),
    Region(Region),
}

impl Location {
    fn sort_key(&self) -> (String, u32, u32) {
        match self {
            Location::Workbook => (String::new(), 0, 0),
            Location::Cell(a) => a.key(),
            Location::Region(r) => r.sort_key(),
        }
    }

    pub fn cell(&self) -> Option<&CellAddress> {
        match self {
            Location::Cell(a) => Some(a),
            _ => None,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Workbook => f.write_str("*"),
            Location::Cell(a) => a.fmt(f),
            Location::Region(r) => r.fmt(f),
        }
    }
}

impl FromStr for Location {
    type Err = FindingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "*" {
            return Ok(Location::Workbook);
        }
        let bad = || FindingError::BadLocation(s.to_string());
        let (_, rest) = grid::split_sheet_prefix(s).ok_or_else(bad)?;
        if rest.contains(':') {
            s.parse().map(Location::Region).map_err(|_| bad())
        } else {
            s.parse().map(Location::Cell).map_err(|_| bad())
        }
    }
}

impl Serialize for Location {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub rule_id: RuleId,
    pub severity: Severity,
    pub location: Location,
    pub message: String,
    pub observed: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
}

impl Finding {
    /// A finding at the rule's default severity.
    pub fn new(rule_id: RuleId, location: Location, message: impl Into<String>, observed: impl Into<String>) -> Self {
        Self {
            rule_id,
            severity: rule_id.severity(),
            location,
            message: message.into(),
            observed: observed.into(),
            expected: None,
        }
    }

    pub fn with_expected(mut self, expected: impl Into<String>) -> Self {
        self.expected = Some(expected.into());
        self
    }

    pub fn is_critical(&self) -> bool {
        self.severity == Severity::Critical
    }

    /// `severity<TAB>rule_id<TAB>location<TAB>message`, as printed by the CLI.
    pub fn display_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.severity, self.rule_id, self.location, escape(&self.message))
    }

    /// Canonical ledger line: the display fields plus observed and optional expected.
    pub fn to_record_line(&self) -> String {
        let mut line = format!(
            "{}\t{}\t{}\t{}\t{}",
            self.severity,
            self.rule_id,
            escape(&self.location.to_string()),
            escape(&self.message),
            escape(&self.observed)
        );
        if let Some(expected) = &self.expected {
            line.push('\t');
            line.push_str(&escape(expected));
        }
        line
    }

    pub fn from_record_line(line: &str) -> Result<Self, FindingError> {
        let fields: Vec<&str> = line.split('\t').collect();
        let malformed = || FindingError::Malformed(line.to_string());
        let text = |f: &str| unescape(f).map_err(|_| malformed());
        let (sev, rule, loc, msg, obs, exp) = match fields.as_slice() {
            [s, r, l, m, o] => (s, r, l, m, o, None),
            [s, r, l, m, o, e] => (s, r, l, m, o, Some(e)),
            _ => return Err(malformed()),
        };
        Ok(Finding {
            severity: sev.parse()?,
            rule_id: rule.parse()?,
            location: text(loc)?.parse()?,
            message: text(msg)?,
            observed: text(obs)?,
            expected: exp.map(|e| text(e)).transpose()?,
        })
    }
}

/// Deterministic order: (sheet, row, col, rule_id), then the remaining fields.
pub fn sort_findings(findings: &mut [Finding]) {
    findings.sort_by(|a, b| {
        a.location
            .sort_key()
            .cmp(&b.location.sort_key())
            .then_with(|| a.rule_id.as_str().cmp(b.rule_id.as_str()))
            .then_with(|| a.message.cmp(&b.message))
            .then_with(|| a.observed.cmp(&b.observed))
    });
}
