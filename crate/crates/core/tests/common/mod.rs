#![allow(dead_code)]

use chrono::{DateTime, TimeZone, Utc};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;
use sheetguard::FormulaAst;
use sheetguard::formula::{BinaryOp, CellRef, UnaryOp};
use sheetguard::grid::{CellAddress, CellContent, CellValue, ErrorCode, FormulaCell, Snapshot};

pub fn ts(secs: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(1_714_000_000 + secs, 0).unwrap()
}

pub fn number() -> impl Strategy<Value = f64> {
    prop_oneof![(0u32..1000).prop_map(f64::from), (0u32..1_000_000).prop_map(|n| f64::from(n) / 1000.0),]
}

pub fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 \"!,.]{0,8}"
}

pub fn cell_ref(max_row: u32, max_col: u32, qualified: bool) -> impl Strategy<Value = CellRef> {
    let sheet = if qualified {
        prop_oneof![Just(None), Just(Some("Data".to_string())), Just(Some("Q1 data".to_string()))].boxed()
    } else {
        Just(None).boxed()
    };
    (sheet, 1..=max_row, 1..=max_col, any::<bool>(), any::<bool>())
        .prop_map(|(sheet, row, col, row_abs, col_abs)| CellRef { sheet, row, col, row_abs, col_abs })
}

fn range_of(a: CellRef, mut b: CellRef) -> FormulaAst {
    b.sheet = a.sheet.clone();
    FormulaAst::Range(a, b)
}

/// Arbitrary formula trees covering every grammar production.
pub fn formula(qualified: bool) -> impl Strategy<Value = FormulaAst> {
    let leaf = prop_oneof![
        number().prop_map(FormulaAst::Number),
        text().prop_map(FormulaAst::Text),
        any::<bool>().prop_map(FormulaAst::Bool),
        prop::sample::select(ErrorCode::ALL.to_vec()).prop_map(FormulaAst::Error),
        cell_ref(500, 60, qualified).prop_map(FormulaAst::Ref),
        (cell_ref(500, 60, qualified), cell_ref(500, 60, false)).prop_map(|(a, b)| range_of(a, b)),
    ];
    leaf.prop_recursive(5, 40, 4, |inner| {
        prop_oneof![
            (prop::sample::select(vec![UnaryOp::Neg, UnaryOp::Percent]), inner.clone())
                .prop_map(|(op, c)| FormulaAst::unary(op, c)),
            (prop::sample::select(BinaryOp::ALL.to_vec()), inner.clone(), inner.clone())
                .prop_map(|(op, l, r)| FormulaAst::binary(op, l, r)),
            (
                prop::sample::select(vec!["SUM", "IF", "ROUND", "AVERAGE", "MAX", "NOW", "VLOOKUP"]),
                prop::collection::vec(inner, 0..4)
            )
                .prop_map(|(name, args)| FormulaAst::Call(name.to_string(), args)),
        ]
    })
}

pub fn value() -> impl Strategy<Value = CellValue> {
    prop_oneof![
        4 => number().prop_map(CellValue::Number),
        2 => text().prop_map(CellValue::Text),
        1 => any::<bool>().prop_map(CellValue::Boolean),
        1 => prop::sample::select(ErrorCode::ALL.to_vec()).prop_map(CellValue::Error),
    ]
}

pub fn content() -> impl Strategy<Value = CellContent> {
    prop_oneof![
        3 => value().prop_map(CellContent::Literal),
        2 => (
            prop::sample::select(vec!["=A1+1", "=SUM(A1:A3)", "=B2*2", "=IF(A1>0,1,2)", "=Data!A1", "=(1"]),
            prop::option::of(value())
        )
            .prop_map(|(src, cached)| CellContent::Formula(FormulaCell::new(src, cached).unwrap())),
    ]
}

pub fn address() -> impl Strategy<Value = CellAddress> {
    (prop::sample::select(vec!["S", "Data", "data"]), 1u32..=20, 1u32..=8)
        .prop_map(|(sheet, row, col)| CellAddress::new(sheet, row, col).unwrap())
}

pub fn snapshot(max_cells: usize) -> impl Strategy<Value = Snapshot> {
    (
        prop::collection::vec((address(), content()), 0..max_cells),
        "[a-z]{1,6}",
        prop::option::of("[a-zA-Z0-9 \\-]{0,12}"),
        0i64..100_000,
    )
        .prop_map(|(cells, actor, attestation, secs)| {
            let mut s = Snapshot::new("wb", ts(secs), actor);
            s.attestation = attestation;
            for (a, c) in cells {
                s.set(a, c);
            }
            s
        })
}

#[derive(Debug, Clone)]
pub enum Edit {
    Keep,
    Remove,
    Replace(CellContent),
}

/// A snapshot and a mutated successor sharing most cells.
pub fn snapshot_pair(max_cells: usize) -> impl Strategy<Value = (Snapshot, Snapshot)> {
    snapshot(max_cells).prop_flat_map(move |a| {
        let n = a.cells.len();
        let edits = prop::collection::vec(
            prop_oneof![5 => Just(Edit::Keep), 1 => Just(Edit::Remove), 2 => content().prop_map(Edit::Replace)],
            n,
        );
        let added = prop::collection::vec((address(), content()), 0..max_cells / 4 + 1);
        (Just(a), edits, added).prop_map(|(a, edits, added)| {
            let mut b = a.clone();
            b.timestamp = a.timestamp + chrono::Duration::hours(1);
            for ((addr, _), edit) in a.cells.iter().zip(edits) {
                match edit {
                    Edit::Keep => {}
                    Edit::Remove => {
                        b.cells.remove(addr);
                    }
                    Edit::Replace(c) => b.set(addr.clone(), c),
                }
            }
            for (addr, c) in added {
                b.set(addr, c);
            }
            (a, b)
        })
    })
}

/// Exact mean and sample variance of f64 samples.
pub fn exact_mean_variance(xs: &[f64]) -> (BigRational, BigRational) {
    let rs: Vec<BigRational> = xs.iter().map(|x| BigRational::from_float(*x).unwrap()).collect();
    let n = BigRational::from_integer(BigInt::from(rs.len()));
    let mean = rs.iter().fold(BigRational::zero(), |acc, x| acc + x) / &n;
    let one = BigRational::from_integer(BigInt::from(1));
    let ss = rs.iter().fold(BigRational::zero(), |acc, x| {
        let d = x - &mean;
        acc + &d * &d
    });
    (mean, ss / (n - one))
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Touch sequence respects step order iff every step's predecessors were touched before it.
pub fn order_oracle(touches: &[usize]) -> Vec<bool> {
    let mut flags = Vec::new();
    for (i, &k) in touches.iter().enumerate() {
        let earlier = &touches[..i];
        flags.push((0..k).any(|j| !earlier.contains(&j)));
    }
    flags
}
