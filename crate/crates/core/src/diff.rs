//! Address-based cell diffing between two snapshots of one workbook.

use std::cmp::Ordering;
use std::collections::btree_map;
use std::fmt;
use std::iter::Peekable;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::grid::{
    CellAddress, CellContent, Snapshot, SnapshotDigest, escape, format_timestamp, parse_timestamp, unescape,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiffError {
    #[error("workbook mismatch: {before:?} vs {after:?}")]
    WorkbookMismatch { before: String, after: String },
    #[error("contents are equal; nothing to classify")]
    NoChange,
    #[error("digest mismatch: expected {expected}, found {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("event at {0} does not match the cell it applies to")]
    ConflictingEvent(String),
    #[error("malformed change set: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ChangeKind {
    Added,
    Removed,
    DataChanged,
    LogicChanged,
    KindChanged,
}

impl ChangeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeKind::Added => "Added",
            ChangeKind::Removed => "Removed",
            ChangeKind::DataChanged => "DataChanged",
            ChangeKind::LogicChanged => "LogicChanged",
            ChangeKind::KindChanged => "KindChanged",
        }
    }
}

impl fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChangeKind {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Added" => ChangeKind::Added,
            "Removed" => ChangeKind::Removed,
            "DataChanged" => ChangeKind::DataChanged,
            "LogicChanged" => ChangeKind::LogicChanged,
            "KindChanged" => ChangeKind::KindChanged,
            other => return Err(DiffError::Malformed(format!("unknown change kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeEvent {
    pub address: CellAddress,
    pub kind: ChangeKind,
    pub before: Option<CellContent>,
    pub after: Option<CellContent>,
}

impl ChangeEvent {
    /// True when the event alters, adds or removes formula logic.
    pub fn touches_logic(&self) -> bool {
        match self.kind {
            ChangeKind::LogicChanged | ChangeKind::KindChanged => true,
            ChangeKind::Added => self.after.as_ref().is_some_and(CellContent::is_formula),
            ChangeKind::Removed => self.before.as_ref().is_some_and(CellContent::is_formula),
            ChangeKind::DataChanged => false,
        }
    }
}

/// Classified differences between two snapshots, sorted by address.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeSet {
    pub workbook_id: String,
    pub from_digest: SnapshotDigest,
    pub to_digest: SnapshotDigest,
    pub from_time: DateTime<Utc>,
    pub to_time: DateTime<Utc>,
    /// Actor of the later snapshot.
    pub actor: String,
    /// Attestation carried by the later snapshot.
    pub attestation: Option<String>,
    pub events: Vec<ChangeEvent>,
}

/// Classifies one cell's change. Formula equality is source-text equality; a formula
/// whose cached value alone moved is a data change.
pub fn classify_change(before: Option<&CellContent>, after: Option<&CellContent>) -> Result<ChangeKind, DiffError> {
    match (before, after) {
        (None, None) => Err(DiffError::NoChange),
        (None, Some(_)) => Ok(ChangeKind::Added),
        (Some(_), None) => Ok(ChangeKind::Removed),
        (Some(b), Some(a)) if b == a => Err(DiffError::NoChange),
        (Some(CellContent::Literal(_)), Some(CellContent::Literal(_))) => Ok(ChangeKind::DataChanged),
        (Some(CellContent::Formula(b)), Some(CellContent::Formula(a))) => {
            Ok(if b.source() == a.source() { ChangeKind::DataChanged } else { ChangeKind::LogicChanged })
        }
        _ => Ok(ChangeKind::KindChanged),
    }
}

struct MergeJoin<'a> {
    left: Peekable<btree_map::Iter<'a, CellAddress, CellContent>>,
    right: Peekable<btree_map::Iter<'a, CellAddress, CellContent>>,
}

impl<'a> Iterator for MergeJoin<'a> {
    type Item = (&'a CellAddress, Option<&'a CellContent>, Option<&'a CellContent>);

    fn next(&mut self) -> Option<Self::Item> {
        let order = match (self.left.peek(), self.right.peek()) {
            (None, None) => return None,
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (Some((a, _)), Some((b, _))) => a.cmp(b),
        };
        Some(match order {
            Ordering::Less => {
                let (a, c) = self.left.next()?;
                (a, Some(c), None)
            }
            Ordering::Greater => {
                let (a, c) = self.right.next()?;
                (a, None, Some(c))
            }
            Ordering::Equal => {
                let (_, l) = self.left.next()?;
                let (a, r) = self.right.next()?;
                (a, Some(l), Some(r))
            }
        })
    }
}

pub fn diff_snapshots(before: &Snapshot, after: &Snapshot) -> Result<ChangeSet, DiffError> {
    if before.workbook_id != after.workbook_id {
        return Err(DiffError::WorkbookMismatch {
            before: before.workbook_id.clone(),
            after: after.workbook_id.clone(),
        });
    }
    let join = MergeJoin { left: before.cells.iter().peekable(), right: after.cells.iter().peekable() };
    let events = join
        .filter_map(|(address, b, a)| {
            let kind = classify_change(b, a).ok()?;
            Some(ChangeEvent { address: address.clone(), kind, before: b.cloned(), after: a.cloned() })
        })
        .collect();
    Ok(ChangeSet {
        workbook_id: after.workbook_id.clone(),
        from_digest: before.digest(),
        to_digest: after.digest(),
        from_time: before.timestamp,
        to_time: after.timestamp,
        actor: after.actor.clone(),
        attestation: after.attestation.clone(),
        events,
    })
}

/// Replays a change set onto the snapshot it was computed from.
pub fn apply_changes(before: &Snapshot, cs: &ChangeSet) -> Result<Snapshot, DiffError> {
    let actual = before.digest();
    if actual != cs.from_digest {
        return Err(DiffError::DigestMismatch { expected: cs.from_digest.to_string(), actual: actual.to_string() });
    }
    let mut out = before.clone();
    for event in &cs.events {
        if out.cells.get(&event.address) != event.before.as_ref() {
            return Err(DiffError::ConflictingEvent(event.address.to_string()));
        }
        match &event.after {
            Some(content) => out.set(event.address.clone(), content.clone()),
            None => {
                out.cells.remove(&event.address);
            }
        }
    }
    out.timestamp = cs.to_time;
    out.actor = cs.actor.clone();
    out.attestation = cs.attestation.clone();
    let result = out.digest();
    if result != cs.to_digest {
        return Err(DiffError::DigestMismatch { expected: cs.to_digest.to_string(), actual: result.to_string() });
    }
    Ok(out)
}

/// Per-delta volatility ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct VolatilityMetrics {
    /// Formula cells changed, flipped or removed over formula cells before.
    pub structural_volatility: f64,
    /// Literal cells changed, flipped or removed over literal cells before.
    pub data_volatility: f64,
    /// Added cells over cells before; the plain added count when before was empty.
    pub added_fraction: f64,
}

pub fn volatility_metrics(cs: &ChangeSet, before: &Snapshot) -> VolatilityMetrics {
    let formulas = before.cells.values().filter(|c| c.is_formula()).count();
    let literals = before.cells.len() - formulas;
    let mut logic_moved = 0usize;
    let mut data_moved = 0usize;
    let mut added = 0usize;
    for event in &cs.events {
        match (event.kind, &event.before) {
            (ChangeKind::Added, _) => added += 1,
            (
                ChangeKind::LogicChanged | ChangeKind::KindChanged | ChangeKind::Removed,
                Some(CellContent::Formula(_)),
            ) => logic_moved += 1,
            (
                ChangeKind::DataChanged | ChangeKind::KindChanged | ChangeKind::Removed,
                Some(CellContent::Literal(_)),
            ) => data_moved += 1,
            _ => {}
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    VolatilityMetrics {
        structural_volatility: ratio(logic_moved, formulas),
        data_volatility: ratio(data_moved, literals),
        added_fraction: if before.cells.is_empty() { added as f64 } else { ratio(added, before.cells.len()) },
    }
}

const CHANGESET_MAGIC: &str = "CHANGESET1";

impl ChangeSet {
    /// Canonical text used as the ledger payload.
    ///
    /// ```text
    /// CHANGESET1<TAB>wb<TAB>from_digest<TAB>to_digest<TAB>from_time<TAB>to_time<TAB>actor
    /// ATTEST<TAB>text                  (optional)
    /// <kind><TAB><sheet><TAB><A1>      (one per event)
    /// -<TAB><cell payload>             (before, if present)
    /// +<TAB><cell payload>             (after, if present)
    /// ```
    pub fn to_canonical(&self) -> String {
        let mut out = format!(
            "{CHANGESET_MAGIC}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            escape(&self.workbook_id),
            self.from_digest,
            self.to_digest,
            format_timestamp(&self.from_time),
            format_timestamp(&self.to_time),
            escape(&self.actor)
        );
        if let Some(a) = &self.attestation {
            out.push_str("ATTEST\t");
            out.push_str(&escape(a));
            out.push('\n');
        }
        for e in &self.events {
            out.push_str(&format!("{}\t{}\t{}\n", e.kind, escape(e.address.sheet()), e.address.a1()));
            for (tag, content) in [("-", &e.before), ("+", &e.after)] {
                if let Some(c) = content {
                    out.push_str(tag);
                    out.push('\t');
                    c.write_fields(&mut out);
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_canonical(text: &str) -> Result<Self, DiffError> {
        let bad = |m: String| DiffError::Malformed(m);
        let body = text.strip_suffix('\n').ok_or_else(|| bad("missing final newline".into()))?;
        let mut lines = body.split('\n').peekable();
        let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
        let [CHANGESET_MAGIC, wb, from_d, to_d, from_t, to_t, actor] = header.as_slice() else {
            return Err(bad("bad header".into()));
        };
        let text_field = |f: &str| unescape(f).map_err(bad);
        let digest = |f: &str| SnapshotDigest::from_str(f).map_err(|e| bad(e.to_string()));
        let time = |f: &str| parse_timestamp(f).map_err(|e| bad(e.to_string()));
        let mut cs = ChangeSet {
            workbook_id: text_field(wb)?,
            from_digest: digest(from_d)?,
            to_digest: digest(to_d)?,
            from_time: time(from_t)?,
            to_time: time(to_t)?,
            actor: text_field(actor)?,
            attestation: None,
            events: Vec::new(),
        };
        if let Some(rest) = lines.peek().and_then(|l| l.strip_prefix("ATTEST\t")) {
            cs.attestation = Some(text_field(rest)?);
            lines.next();
        }
        while let Some(line) = lines.next() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [kind, sheet, a1] = fields.as_slice() else {
                return Err(bad(format!("bad event line {line:?}")));
            };
            let kind: ChangeKind = kind.parse()?;
            let address = CellAddress::from_a1(text_field(sheet)?, a1).map_err(|e| bad(e.to_string()))?;
            let mut side = |tag: char| -> Result<Option<CellContent>, DiffError> {
                match lines.peek().and_then(|l| l.strip_prefix(tag)).and_then(|l| l.strip_prefix('\t')) {
                    Some(payload) => {
                        lines.next();
                        let fields: Vec<&str> = payload.split('\t').collect();
                        CellContent::parse_fields(&fields).map(Some).map_err(bad)
                    }
                    None => Ok(None),
                }
            };
            let before = side('-')?;
            let after = side('+')?;
            let expected = classify_change(before.as_ref(), after.as_ref())
                .map_err(|_| bad(format!("event at {address} has no change")))?;
            if expected != kind {
                return Err(bad(format!("event at {address} is {expected}, recorded as {kind}")));
            }
            cs.events.push(ChangeEvent { address, kind, before, after });
        }
        Ok(cs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn snap(hour: u32, cells: &[(&str, &str)]) -> Snapshot {
        let mut s = Snapshot::new("wb", Utc.with_ymd_and_hms(2024, 1, 1, hour, 0, 0).unwrap(), "ann");
        for (addr, src) in cells {
            let content = if src.starts_with('=') {
                CellContent::formula(src).unwrap()
            } else {
                CellContent::number(src.parse().unwrap())
            };
            s.set(addr.parse().unwrap(), content);
        }
        s
    }

    #[test]
    fn identical_snapshots_have_no_events() {
        let s = snap(1, &[("S!A1", "5"), ("S!B1", "=A1*2")]);
        let cs = diff_snapshots(&s, &s).unwrap();
        assert!(cs.events.is_empty());
        assert_eq!(cs.from_digest, cs.to_digest);
    }

    #[test]
    fn literal_change_is_data_change() {
        let cs = diff_snapshots(&snap(1, &[("S!A1", "5")]), &snap(2, &[("S!A1", "6")])).unwrap();
        assert_eq!(cs.events.len(), 1);
        assert_eq!(cs.events[0].kind, ChangeKind::DataChanged);
    }

    #[test]
    fn flip_and_add() {
        let cs = diff_snapshots(&snap(1, &[("S!A1", "=B1+1")]), &snap(2, &[("S!A1", "7"), ("S!B2", "1")])).unwrap();
        let kinds: Vec<_> = cs.events.iter().map(|e| (e.address.to_string(), e.kind)).collect();
        assert_eq!(kinds, [("S!A1".to_string(), ChangeKind::KindChanged), ("S!B2".to_string(), ChangeKind::Added)]);
    }

    #[test]
    fn mismatched_workbooks() {
        let mut other = snap(2, &[]);
        other.workbook_id = "other".into();
        assert!(matches!(diff_snapshots(&snap(1, &[]), &other), Err(DiffError::WorkbookMismatch { .. })));
    }

    #[test]
    fn classification_table() {
        let lit = CellContent::number(3.0);
        let f1 = CellContent::formula("=A1").unwrap();
        let f2 = CellContent::formula("=A2").unwrap();
        assert_eq!(classify_change(None, Some(&lit)), Ok(ChangeKind::Added));
        assert_eq!(classify_change(Some(&lit), None), Ok(ChangeKind::Removed));
        assert_eq!(classify_change(Some(&f1), Some(&f2)), Ok(ChangeKind::LogicChanged));
        assert_eq!(classify_change(Some(&lit), Some(&f1)), Ok(ChangeKind::KindChanged));
        assert_eq!(classify_change(Some(&lit), Some(&lit)), Err(DiffError::NoChange));
        assert_eq!(classify_change(None, None), Err(DiffError::NoChange));
        // Same source, new cached value: the logic is intact.
        let cached = |v: f64| {
            CellContent::Formula(crate::grid::FormulaCell::new("=A1", Some(crate::grid::CellValue::Number(v))).unwrap())
        };
        assert_eq!(classify_change(Some(&cached(1.0)), Some(&cached(2.0))), Ok(ChangeKind::DataChanged));
        // Cosmetic rewrites are still logged.
        let spaced = CellContent::formula("=A1 ").unwrap();
        assert_eq!(classify_change(Some(&f1), Some(&spaced)), Ok(ChangeKind::LogicChanged));
    }

    #[test]
    fn apply_reconstructs_after() {
        let a = snap(1, &[("S!A1", "5"), ("S!A2", "=A1*2"), ("T!C3", "1")]);
        let b = snap(2, &[("S!A1", "6"), ("S!A2", "=A1*3"), ("S!A9", "4")]);
        let cs = diff_snapshots(&a, &b).unwrap();
        let rebuilt = apply_changes(&a, &cs).unwrap();
        assert_eq!(rebuilt.cells, b.cells);
        assert_eq!(rebuilt.digest(), cs.to_digest);
        let empty = diff_snapshots(&a, &a).unwrap();
        assert_eq!(apply_changes(&a, &empty).unwrap().cells, a.cells);
    }

    #[test]
    fn apply_rejects_stale_base() {
        let a = snap(1, &[("S!A1", "5")]);
        let b = snap(2, &[("S!A1", "6")]);
        let cs = diff_snapshots(&a, &b).unwrap();
        assert!(matches!(apply_changes(&b, &cs), Err(DiffError::DigestMismatch { .. })));
    }

    #[test]
    fn apply_rejects_conflicting_event() {
        let a = snap(1, &[("S!A1", "5")]);
        let b = snap(2, &[("S!A1", "6")]);
        let mut cs = diff_snapshots(&a, &b).unwrap();
        cs.events[0].before = Some(CellContent::number(99.0));
        assert!(matches!(apply_changes(&a, &cs), Err(DiffError::ConflictingEvent(_))));
    }

    #[test]
    fn structural_volatility_quarter() {
        let a = snap(1, &[("S!A1", "=B1"), ("S!A2", "=B2"), ("S!A3", "=B3"), ("S!A4", "=B4")]);
        let b = snap(2, &[("S!A1", "=B1"), ("S!A2", "=B2*2"), ("S!A3", "=B3"), ("S!A4", "=B4")]);
        let m = volatility_metrics(&diff_snapshots(&a, &b).unwrap(), &a);
        assert_eq!(m.structural_volatility, 0.25);
        assert_eq!(m.data_volatility, 0.0);
    }

    #[test]
    fn data_volatility_half() {
        let cells: Vec<(String, String)> = (1..=10).map(|r| (format!("S!A{r}"), r.to_string())).collect();
        let refs: Vec<(&str, &str)> = cells.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect();
        let a = snap(1, &refs);
        let mut b = a.clone();
        for r in 1..=5 {
            b.set(format!("S!A{r}").parse().unwrap(), CellContent::number(100.0 + r as f64));
        }
        let m = volatility_metrics(&diff_snapshots(&a, &b).unwrap(), &a);
        assert_eq!(m.data_volatility, 0.5);
        assert_eq!(m.structural_volatility, 0.0);
        let none = volatility_metrics(&diff_snapshots(&a, &a).unwrap(), &a);
        assert_eq!(none, VolatilityMetrics::default());
    }

    #[test]
    fn added_fraction_from_empty_uses_count() {
        let a = snap(1, &[]);
        let b = snap(2, &[("S!A1", "1"), ("S!A2", "2")]);
        assert_eq!(volatility_metrics(&diff_snapshots(&a, &b).unwrap(), &a).added_fraction, 2.0);
    }

    #[test]
    fn canonical_round_trip() {
        let a = snap(1, &[("S!A1", "5"), ("S!A2", "=A1*2"), ("T!C3", "1")]);
        let mut b = snap(2, &[("S!A1", "6"), ("S!A2", "7"), ("S!A9", "=SUM(A1:A2)")]);
        b.attestation = Some("CHG-1 approved".into());
        let cs = diff_snapshots(&a, &b).unwrap();
        let text = cs.to_canonical();
        assert_eq!(ChangeSet::from_canonical(&text).unwrap(), cs);
        let tampered = text.replace("DataChanged", "LogicChanged");
        assert!(ChangeSet::from_canonical(&tampered).is_err());
    }
}
