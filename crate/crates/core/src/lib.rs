//! Integrity monitoring for business-critical spreadsheets.
//!
//! Snapshots of a workbook are audited for formula smells, diffed cell by cell,
//! recorded in a hash-chained ledger, checked against declarative control policies
//! and summarized in compliance reports.

pub mod assess;
pub mod audit;
pub mod control;
pub mod diff;
pub mod finding;
pub mod formula;
pub mod grid;
pub mod ledger;

pub use assess::{ComplianceReport, Period, UsageMetrics, UsageThresholds, build_report, classify_usage, risk_score};
pub use audit::{AuditConfig, audit_workbook};
pub use control::{ControlPolicy, evaluate_policies};
pub use diff::{ChangeEvent, ChangeKind, ChangeSet, apply_changes, diff_snapshots};
pub use finding::{Finding, Location, RuleId, Severity};
pub use formula::{FormulaAst, parse_formula, print_formula};
pub use grid::{
    CellAddress, CellContent, CellValue, Region, Snapshot, SnapshotDigest, parse_snapshot_file, write_snapshot_file,
};
pub use ledger::{ChainStatus, Ledger, LedgerError};
