//! Workbook data model and the canonical `.snap` snapshot file format.
//!
//! A snapshot file is UTF-8, LF-terminated, tab-separated:
//!
//! ```text
//! SNAP1<TAB>workbook_id<TAB>timestamp<TAB>actor
//! ATTEST<TAB>free text                      (optional)
//! sheet<TAB>A1<TAB>V<TAB>N<TAB>5
//! sheet<TAB>B1<TAB>F<TAB>=A1*2<TAB>N<TAB>10  (cached value optional)
//! ```
//!
//! Free-text fields escape `\`, TAB, LF and CR as `\\`, `\t`, `\n`, `\r`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::formula::{self, FormulaAst, FormulaError};

pub const MAX_ROW: u32 = 1_048_576;
pub const MAX_COL: u32 = 16_384;

const HEADER_MAGIC: &str = "SNAP1";
const ATTEST_TAG: &str = "ATTEST";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate cell {0}")]
    DuplicateCell(String),
    #[error("bad cell address on line {line}: {text:?}")]
    BadAddress { line: usize, text: String },
    #[error("malformed cell on line {line}: {reason}")]
    MalformedCell { line: usize, reason: String },
    #[error("bad timestamp {0:?}")]
    BadTimestamp(String),
    #[error("invalid reference {0:?}")]
    BadReference(String),
}

/// Converts a 1-based column index to letters (`1` → `A`, `27` → `AA`).
pub fn col_to_letters(mut col: u32) -> String {
    let mut out = Vec::new();
    while col > 0 {
        let rem = (col - 1) % 26;
        out.push(b'A' + rem as u8);
        col = (col - 1) / 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// Inverse of [`col_to_letters`]; case-insensitive. Returns `None` outside `1..=MAX_COL`.
pub fn letters_to_col(letters: &str) -> Option<u32> {
    if letters.is_empty() || letters.len() > 3 {
        return None;
    }
    let mut col: u32 = 0;
    for b in letters.bytes() {
        if !b.is_ascii_alphabetic() {
            return None;
        }
        col = col * 26 + u32::from(b.to_ascii_uppercase() - b'A' + 1);
    }
    (1..=MAX_COL).contains(&col).then_some(col)
}

/// Splits `A1` / `a1` into (row, col). No `$`, no sheet.
pub fn parse_a1(text: &str) -> Option<(u32, u32)> {
    let split = text.find(|c: char| c.is_ascii_digit())?;
    let (letters, digits) = text.split_at(split);
    let col = letters_to_col(letters)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let row: u32 = digits.parse().ok()?;
    (1..=MAX_ROW).contains(&row).then_some((row, col))
}

pub fn render_a1(row: u32, col: u32) -> String {
    format!("{}{}", col_to_letters(col), row)
}

/// True when a sheet name can appear unquoted before `!`.
fn sheet_is_bare(sheet: &str) -> bool {
    let mut chars = sheet.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    sheet.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') && parse_a1(sheet).is_none()
}

/// Renders a sheet name as a reference prefix, quoting when needed.
pub fn quote_sheet(sheet: &str) -> String {
    if sheet_is_bare(sheet) { sheet.to_string() } else { format!("'{}'", sheet.replace('\'', "''")) }
}

/// Splits `Sheet!rest` or `'My Sheet'!rest` into (sheet, rest).
pub(crate) fn split_sheet_prefix(text: &str) -> Option<(String, &str)> {
    if let Some(quoted) = text.strip_prefix('\'') {
        let mut sheet = String::new();
        let mut chars = quoted.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if c == '\'' {
                if let Some((_, '\'')) = chars.peek() {
                    chars.next();
                    sheet.push('\'');
                    continue;
                }
                let rest = quoted[i + 1..].strip_prefix('!')?;
                return (!sheet.is_empty()).then_some((sheet, rest));
            }
            sheet.push(c);
        }
        None
    } else {
        let (sheet, rest) = text.split_once('!')?;
        (!sheet.is_empty()).then(|| (sheet.to_string(), rest))
    }
}

fn sheet_key(sheet: &str) -> String {
    sheet.to_lowercase()
}

/// A cell location. Sheet names compare case-insensitively but keep their case.
#[derive(Debug, Clone)]
pub struct CellAddress {
    sheet: String,
    row: u32,
    col: u32,
}

impl CellAddress {
    pub fn new(sheet: impl Into<String>, row: u32, col: u32) -> Result<Self, GridError> {
        let sheet = sheet.into();
        if sheet.is_empty() || !(1..=MAX_ROW).contains(&row) || !(1..=MAX_COL).contains(&col) {
            return Err(GridError::BadReference(format!("{sheet}!R{row}C{col}")));
        }
        Ok(Self { sheet, row, col })
    }

    /// Parses `A1` text on a given sheet.
    pub fn from_a1(sheet: impl Into<String>, a1: &str) -> Result<Self, GridError> {
        let (row, col) = parse_a1(a1).ok_or_else(|| GridError::BadReference(a1.to_string()))?;
        Self::new(sheet, row, col)
    }

    pub fn sheet(&self) -> &str {
        &self.sheet
    }

    pub fn row(&self) -> u32 {
        self.row
    }

    pub fn col(&self) -> u32 {
        self.col
    }

    pub fn a1(&self) -> String {
        render_a1(self.row, self.col)
    }

    pub fn same_sheet(&self, sheet: &str) -> bool {
        self.sheet == sheet || sheet_key(&self.sheet) == sheet_key(sheet)
    }

    pub(crate) fn key(&self) -> (String, u32, u32) {
        (sheet_key(&self.sheet), self.row, self.col)
    }
}

impl PartialEq for CellAddress {
    fn eq(&self, other: &Self) -> bool {
        self.row == other.row && self.col == other.col && self.same_sheet(&other.sheet)
    }
}

impl Eq for CellAddress {}

impl Hash for CellAddress {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl Ord for CellAddress {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for CellAddress {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CellAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}!{}", quote_sheet(&self.sheet), self.a1())
    }
}

impl FromStr for CellAddress {
    type Err = GridError;

    /// Parses `Sheet1!B7` or `'My Sheet'!B7`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (sheet, rest) = split_sheet_prefix(s).ok_or_else(|| GridError::BadReference(s.to_string()))?;
        Self::from_a1(sheet, rest)
    }
}

impl Serialize for CellAddress {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// A rectangular block of cells on one sheet, inclusive on all sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub sheet: String,
    pub top: u32,
    pub left: u32,
    pub bottom: u32,
    pub right: u32,
}

impl Region {
    pub fn new(sheet: impl Into<String>, top: u32, left: u32, bottom: u32, right: u32) -> Result<Self, GridError> {
        let sheet = sheet.into();
        let ok = !sheet.is_empty()
            && top >= 1
            && left >= 1
            && top <= bottom
            && left <= right
            && bottom <= MAX_ROW
            && right <= MAX_COL;
        if !ok {
            return Err(GridError::BadReference(format!("{sheet}!R{top}C{left}:R{bottom}C{right}")));
        }
        Ok(Self { sheet, top, left, bottom, right })
    }

    pub fn single(address: &CellAddress) -> Self {
        Self {
            sheet: address.sheet().to_string(),
            top: address.row(),
            left: address.col(),
            bottom: address.row(),
            right: address.col(),
        }
    }

    pub fn contains(&self, address: &CellAddress) -> bool {
        address.same_sheet(&self.sheet)
            && (self.top..=self.bottom).contains(&address.row())
            && (self.left..=self.right).contains(&address.col())
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        sheet_key(&self.sheet) == sheet_key(&other.sheet)
            && self.top <= other.bottom
            && other.top <= self.bottom
            && self.left <= other.right
            && other.left <= self.right
    }

    pub(crate) fn sort_key(&self) -> (String, u32, u32) {
        (sheet_key(&self.sheet), self.top, self.left)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}!{}:{}",
            quote_sheet(&self.sheet),
            render_a1(self.top, self.left),
            render_a1(self.bottom, self.right)
        )
    }
}

impl FromStr for Region {
    type Err = GridError;

    /// Parses `Sheet1!A1:D20`; a single cell `Sheet1!B2` is a 1×1 region.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GridError::BadReference(s.to_string());
        let (sheet, rest) = split_sheet_prefix(s).ok_or_else(bad)?;
        let (start, end) = rest.split_once(':').unwrap_or((rest, rest));
        let (r1, c1) = parse_a1(start).ok_or_else(bad)?;
        let (r2, c2) = parse_a1(end).ok_or_else(bad)?;
        Region::new(sheet, r1.min(r2), c1.min(c2), r1.max(r2), c1.max(c2))
    }
}

impl Serialize for Region {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ErrorCode {
    #[serde(rename = "#DIV/0!")]
    Div0,
    #[serde(rename = "#N/A")]
    NA,
    #[serde(rename = "#NAME?")]
    Name,
    #[serde(rename = "#NULL!")]
    Null,
    #[serde(rename = "#NUM!")]
    Num,
    #[serde(rename = "#REF!")]
    Ref,
    #[serde(rename = "#VALUE!")]
    Value,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 7] = [
        ErrorCode::Div0,
        ErrorCode::NA,
        ErrorCode::Name,
        ErrorCode::Null,
        ErrorCode::Num,
        ErrorCode::Ref,
        ErrorCode::Value,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Div0 => "#DIV/0!",
            ErrorCode::NA => "#N/A",
            ErrorCode::Name => "#NAME?",
            ErrorCode::Null => "#NULL!",
            ErrorCode::Num => "#NUM!",
            ErrorCode::Ref => "#REF!",
            ErrorCode::Value => "#VALUE!",
        }
    }

    /// Case-insensitive lookup.
    pub fn parse(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(text))
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A literal or computed cell value. Numbers are always finite.
#[derive(Debug, Clone, PartialEq)]
pub enum CellValue {
    Number(f64),
    Text(String),
    Boolean(bool),
    Error(ErrorCode),
}

impl CellValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            CellValue::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, CellValue::Error(_))
    }

    fn write_fields(&self, out: &mut String) {
        match self {
            CellValue::Number(n) => {
                out.push_str("N\t");
                out.push_str(&format_number(*n));
            }
            CellValue::Text(t) => {
                out.push_str("T\t");
                out.push_str(&escape(t));
            }
            CellValue::Boolean(b) => out.push_str(if *b { "B\tTRUE" } else { "B\tFALSE" }),
            CellValue::Error(code) => {
                out.push_str("E\t");
                out.push_str(code.as_str());
            }
        }
    }

    fn parse_fields(tag: &str, payload: &str) -> Result<Self, String> {
        match tag {
            "N" => parse_number(payload).map(CellValue::Number).ok_or_else(|| format!("bad number {payload:?}")),
            "T" => unescape(payload).map(CellValue::Text),
            "B" => match payload {
                "TRUE" => Ok(CellValue::Boolean(true)),
                "FALSE" => Ok(CellValue::Boolean(false)),
                _ => Err(format!("bad boolean {payload:?}")),
            },
            "E" => ErrorCode::parse(payload)
                .filter(|c| c.as_str() == payload)
                .map(CellValue::Error)
                .ok_or_else(|| format!("bad error code {payload:?}")),
            other => Err(format!("unknown value tag {other:?}")),
        }
    }
}

impl fmt::Display for CellValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellValue::Number(n) => f.write_str(&format_number(*n)),
            CellValue::Text(t) => write!(f, "{t:?}"),
            CellValue::Boolean(b) => f.write_str(if *b { "TRUE" } else { "FALSE" }),
            CellValue::Error(c) => f.write_str(c.as_str()),
        }
    }
}

/// Shortest round-tripping decimal rendering; `-0` renders as `0`.
pub fn format_number(n: f64) -> String {
    if n == 0.0 { "0".to_string() } else { format!("{n}") }
}

/// Parses a finite decimal, normalizing `-0` to `0`.
pub fn parse_number(text: &str) -> Option<f64> {
    let trimmed = text.trim();
    if trimmed.is_empty()
        || trimmed != text
        || !trimmed.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'))
    {
        return None;
    }
    let n: f64 = trimmed.parse().ok()?;
    n.is_finite().then_some(if n == 0.0 { 0.0 } else { n })
}

/// A formula cell: verbatim source, its parse, and the optional cached result.
#[derive(Debug, Clone)]
pub struct FormulaCell {
    source: String,
    ast: Result<FormulaAst, FormulaError>,
    cached: Option<CellValue>,
}

impl FormulaCell {
    /// Parses `source`; a parse failure is kept rather than rejected.
    pub fn new(source: impl Into<String>, cached: Option<CellValue>) -> Result<Self, GridError> {
        let source = source.into();
        if !source.starts_with('=') {
            return Err(GridError::MalformedCell {
                line: 0,
                reason: format!("formula must start with '=': {source:?}"),
            });
        }
        let ast = formula::parse_formula(&source);
        Ok(Self { source, ast, cached })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> Result<&FormulaAst, &FormulaError> {
        self.ast.as_ref()
    }

    pub fn cached(&self) -> Option<&CellValue> {
        self.cached.as_ref()
    }
}

impl PartialEq for FormulaCell {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source && self.cached == other.cached
    }
}

/// Non-empty cell content. Empty cells are simply absent from a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum CellContent {
    Literal(CellValue),
    Formula(FormulaCell),
}

impl CellContent {
    pub fn formula(source: &str) -> Result<Self, GridError> {
        FormulaCell::new(source, None).map(CellContent::Formula)
    }

    pub fn number(n: f64) -> Self {
        CellContent::Literal(CellValue::Number(n))
    }

    pub fn text(t: impl Into<String>) -> Self {
        CellContent::Literal(CellValue::Text(t.into()))
    }

    pub fn is_formula(&self) -> bool {
        matches!(self, CellContent::Formula(_))
    }

    /// The literal value, or the cached value of a formula.
    pub fn value(&self) -> Option<&CellValue> {
        match self {
            CellContent::Literal(v) => Some(v),
            CellContent::Formula(f) => f.cached(),
        }
    }

    /// Payload fields of a cell line, i.e. everything after the address.
    pub fn write_fields(&self, out: &mut String) {
        match self {
            CellContent::Literal(v) => {
                out.push_str("V\t");
                v.write_fields(out);
            }
            CellContent::Formula(f) => {
                out.push_str("F\t");
                out.push_str(&escape(&f.source));
                if let Some(cached) = &f.cached {
                    out.push('\t');
                    cached.write_fields(out);
                }
            }
        }
    }

    pub fn to_fields(&self) -> String {
        let mut out = String::new();
        self.write_fields(&mut out);
        out
    }

    /// Inverse of [`CellContent::write_fields`] over already-split fields.
    pub fn parse_fields(fields: &[&str]) -> Result<Self, String> {
        match fields {
            ["V", tag, payload] => CellValue::parse_fields(tag, payload).map(CellContent::Literal),
            ["F", source] => Self::parse_formula_fields(source, None),
            ["F", source, tag, payload] => {
                let cached = CellValue::parse_fields(tag, payload)?;
                Self::parse_formula_fields(source, Some(cached))
            }
            _ => Err(format!("unrecognized cell payload {:?}", fields.join("\t"))),
        }
    }

    fn parse_formula_fields(source: &str, cached: Option<CellValue>) -> Result<Self, String> {
        let source = unescape(source)?;
        FormulaCell::new(source, cached).map(CellContent::Formula).map_err(|e| e.to_string())
    }
}

impl fmt::Display for CellContent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellContent::Literal(v) => v.fmt(f),
            CellContent::Formula(cell) => match &cell.cached {
                Some(v) => write!(f, "{} [{}]", cell.source, v),
                None => f.write_str(&cell.source),
            },
        }
    }
}

/// Content digest of a snapshot: 64 lowercase hex characters of SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SnapshotDigest(String);

impl SnapshotDigest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for SnapshotDigest {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Self(s.to_string()))
        } else {
            Err(GridError::BadReference(format!("not a digest: {s:?}")))
        }
    }
}

impl fmt::Display for SnapshotDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for SnapshotDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

/// A point-in-time capture of one workbook.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub workbook_id: String,
    pub timestamp: DateTime<Utc>,
    pub actor: String,
    pub attestation: Option<String>,
    pub cells: BTreeMap<CellAddress, CellContent>,
}

impl Snapshot {
    pub fn new(workbook_id: impl Into<String>, timestamp: DateTime<Utc>, actor: impl Into<String>) -> Self {
        Self {
            workbook_id: workbook_id.into(),
            timestamp,
            actor: actor.into(),
            attestation: None,
            cells: BTreeMap::new(),
        }
    }

    /// Inserts or replaces a cell.
    pub fn set(&mut self, address: CellAddress, content: CellContent) {
        // Remove first so a re-cased sheet name replaces the stored key too.
        self.cells.remove(&address);
        self.cells.insert(address, content);
    }

    pub fn get(&self, address: &CellAddress) -> Option<&CellContent> {
        self.cells.get(address)
    }

    /// Distinct sheet names in address order, first-seen casing.
    pub fn sheets(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for addr in self.cells.keys() {
            if out.last().is_none_or(|last| !addr.same_sheet(last)) {
                out.push(addr.sheet());
            }
        }
        out
    }

    pub fn digest(&self) -> SnapshotDigest {
        snapshot_digest(self)
    }
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Parses an RFC 3339 instant with any offset and normalizes it to UTC.
pub fn parse_timestamp(text: &str) -> Result<DateTime<Utc>, GridError> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| GridError::BadTimestamp(text.to_string()))
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

pub fn unescape(text: &str) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

fn write_cell_lines(s: &Snapshot, out: &mut String, fold_sheet_case: bool) {
    for (addr, content) in &s.cells {
        if fold_sheet_case {
            out.push_str(&escape(&addr.key().0));
        } else {
            out.push_str(&escape(addr.sheet()));
        }
        out.push('\t');
        out.push_str(&addr.a1());
        out.push('\t');
        content.write_fields(out);
        out.push('\n');
    }
}

/// Renders the canonical snapshot file. Cell lines are sorted by (sheet lowercase, row, col).
pub fn write_snapshot_file(s: &Snapshot) -> String {
    let mut out = format!(
        "{HEADER_MAGIC}\t{}\t{}\t{}\n",
        escape(&s.workbook_id),
        format_timestamp(&s.timestamp),
        escape(&s.actor)
    );
    if let Some(attest) = &s.attestation {
        out.push_str(ATTEST_TAG);
        out.push('\t');
        out.push_str(&escape(attest));
        out.push('\n');
    }
    write_cell_lines(s, &mut out, false);
    out
}

/// SHA-256 over the canonical file with timestamp, actor and attestation left out.
/// Sheet names are lowercased, so a case-only rename keeps the digest.
pub fn snapshot_digest(s: &Snapshot) -> SnapshotDigest {
    let mut out = format!("{HEADER_MAGIC}\t{}\n", escape(&s.workbook_id));
    write_cell_lines(s, &mut out, true);
    SnapshotDigest::of_bytes(out.as_bytes())
}

pub fn parse_snapshot_file(content: &str) -> Result<Snapshot, GridError> {
    let body = content.strip_suffix('\n').unwrap_or(content);
    let mut lines = body.split('\n').enumerate().map(|(i, l)| (i + 1, l)).peekable();

    let (_, header) = lines.next().ok_or_else(|| GridError::MalformedHeader("empty file".into()))?;
    let fields: Vec<&str> = header.split('\t').collect();
    let [magic, wb, ts, actor] = fields.as_slice() else {
        return Err(GridError::MalformedHeader(format!("expected 4 fields, got {}", fields.len())));
    };
    if *magic != HEADER_MAGIC {
        return Err(GridError::MalformedHeader(format!("unknown magic {magic:?}")));
    }
    let workbook_id = unescape(wb).map_err(GridError::MalformedHeader)?;
    if workbook_id.is_empty() {
        return Err(GridError::MalformedHeader("empty workbook id".into()));
    }
    let actor = unescape(actor).map_err(GridError::MalformedHeader)?;
    let timestamp = parse_timestamp(ts)?;
    let mut snapshot = Snapshot::new(workbook_id, timestamp, actor);

    if let Some((_, line)) = lines.peek()
        && let Some((ATTEST_TAG, text)) = line.split_once('\t').filter(|(_, t)| !t.contains('\t'))
    {
        snapshot.attestation = Some(unescape(text).map_err(GridError::MalformedHeader)?);
        lines.next();
    }

    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(GridError::MalformedCell { line: line_no, reason: format!("too few fields in {line:?}") });
        }
        let sheet = unescape(fields[0]).map_err(|reason| GridError::MalformedCell { line: line_no, reason })?;
        let address = CellAddress::from_a1(sheet, fields[1])
            .map_err(|_| GridError::BadAddress { line: line_no, text: fields[1].to_string() })?;
        let content = CellContent::parse_fields(&fields[2..])
            .map_err(|reason| GridError::MalformedCell { line: line_no, reason })?;
        if snapshot.cells.contains_key(&address) {
            return Err(GridError::DuplicateCell(address.to_string()));
        }
        snapshot.cells.insert(address, content);
    }
    Ok(snapshot)
}
