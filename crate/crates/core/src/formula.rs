//! Formula tokenizer, precedence parser, canonical printer and R1C1-relative normalizer.
//!
//! Precedence, lowest to highest: comparisons, `&`, `+ -`, `* /`, `^`, prefix `-`,
//! postfix `%`. All binary operators are left-associative. Prefix minus binds tighter
//! than `^`, so `=-2^2` is `(-2)^2`.

use std::fmt;

use thiserror::Error;

use crate::grid::{
    self, CellAddress, ErrorCode, MAX_COL, MAX_ROW, col_to_letters, format_number, letters_to_col, quote_sheet,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormulaError {
    #[error("syntax error at {position}: expected {expected}")]
    SyntaxError { position: usize, expected: String },
    #[error("unbalanced parentheses at {position}")]
    UnbalancedParens { position: usize },
    #[error("unknown token {text:?} at {position}")]
    UnknownToken { position: usize, text: String },
}

/// A cell reference as written in a formula. `sheet: None` means the host sheet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellRef {
    pub sheet: Option<String>,
    pub row: u32,
    pub col: u32,
    pub row_abs: bool,
    pub col_abs: bool,
}

impl CellRef {
    pub fn relative(row: u32, col: u32) -> Self {
        Self { sheet: None, row, col, row_abs: false, col_abs: false }
    }

    pub fn absolute(row: u32, col: u32) -> Self {
        Self { sheet: None, row, col, row_abs: true, col_abs: true }
    }

    fn write_a1(&self, out: &mut String) {
        if self.col_abs {
            out.push('$');
        }
        out.push_str(&col_to_letters(self.col));
        if self.row_abs {
            out.push('$');
        }
        out.push_str(&self.row.to_string());
    }

    fn write_r1c1(&self, host: &CellAddress, out: &mut String) {
        // Sheet-qualified refs never get relative offsets.
        let qualified = self.sheet.is_some();
        write_axis(out, 'R', self.row, host.row(), self.row_abs || qualified);
        write_axis(out, 'C', self.col, host.col(), self.col_abs || qualified);
    }
}

fn write_axis(out: &mut String, axis: char, value: u32, host: u32, absolute: bool) {
    out.push(axis);
    if absolute {
        out.push_str(&value.to_string());
    } else {
        let offset = i64::from(value) - i64::from(host);
        if offset != 0 {
            out.push_str(&format!("[{offset}]"));
        }
    }
}

impl fmt::Display for CellRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        if let Some(sheet) = &self.sheet {
            out.push_str(&quote_sheet(sheet));
            out.push('!');
        }
        self.write_a1(&mut out);
        f.write_str(&out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Percent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Pow,
    Mul,
    Div,
    Add,
    Sub,
    Concat,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinaryOp {
    fn precedence(self) -> u8 {
        match self {
            BinaryOp::Eq | BinaryOp::Ne | BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 1,
            BinaryOp::Concat => 2,
            BinaryOp::Add | BinaryOp::Sub => 3,
            BinaryOp::Mul | BinaryOp::Div => 4,
            BinaryOp::Pow => 5,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Pow => "^",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Concat => "&",
            BinaryOp::Eq => "=",
            BinaryOp::Ne => "<>",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
        }
    }

    pub const ALL: [BinaryOp; 12] = [
        BinaryOp::Pow,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Concat,
        BinaryOp::Eq,
        BinaryOp::Ne,
        BinaryOp::Lt,
        BinaryOp::Le,
        BinaryOp::Gt,
        BinaryOp::Ge,
    ];
}

const PREC_NEG: u8 = 6;
const PREC_PERCENT: u8 = 7;
const PREC_ATOM: u8 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum FormulaAst {
    Number(f64),
    Text(String),
    Bool(bool),
    Error(ErrorCode),
    Ref(CellRef),
    /// Both ends carry the same sheet.
    Range(CellRef, CellRef),
    Unary(UnaryOp, Box<FormulaAst>),
    Binary(BinaryOp, Box<FormulaAst>, Box<FormulaAst>),
    /// Function name is stored uppercase.
    Call(String, Vec<FormulaAst>),
}

impl FormulaAst {
    fn precedence(&self) -> u8 {
        match self {
            FormulaAst::Binary(op, ..) => op.precedence(),
            FormulaAst::Unary(UnaryOp::Neg, _) => PREC_NEG,
            FormulaAst::Unary(UnaryOp::Percent, _) => PREC_PERCENT,
            _ => PREC_ATOM,
        }
    }

    pub fn binary(op: BinaryOp, left: FormulaAst, right: FormulaAst) -> Self {
        FormulaAst::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn unary(op: UnaryOp, child: FormulaAst) -> Self {
        FormulaAst::Unary(op, Box::new(child))
    }

    /// Pre-order walk.
    pub fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a FormulaAst)) {
        visit(self);
        match self {
            FormulaAst::Unary(_, child) => child.walk(visit),
            FormulaAst::Binary(_, l, r) => {
                l.walk(visit);
                r.walk(visit);
            }
            FormulaAst::Call(_, args) => args.iter().for_each(|a| a.walk(visit)),
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenizer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    Text(String),
    Error(ErrorCode),
    Bool(bool),
    Ref(CellRef),
    Func(String),
    Op(BinaryOp),
    Minus,
    Plus,
    Percent,
    LParen,
    RParen,
    Comma,
    Colon,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '.' || c == '$'
}

/// `$A$1`, `A1`, `a$1`; returns None when the word is not a reference.
fn parse_ref_word(word: &str) -> Option<CellRef> {
    let (col_abs, rest) = match word.strip_prefix('$') {
        Some(r) => (true, r),
        None => (false, word),
    };
    let letters_end = rest.find(|c: char| !c.is_ascii_alphabetic())?;
    let (letters, rest) = rest.split_at(letters_end);
    let (row_abs, digits) = match rest.strip_prefix('$') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let col = letters_to_col(letters)?;
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let row: u32 = digits.parse().ok()?;
    if !(1..=MAX_ROW).contains(&row) {
        return None;
    }
    Some(CellRef { sheet: None, row, col, row_abs, col_abs })
}

impl<'a> Lexer<'a> {
    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek_char() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek_char() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn tokens(mut self) -> Result<Vec<Token>, FormulaError> {
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            let pos = self.pos;
            let Some(c) = self.peek_char() else { break };
            let tok = match c {
                '0'..='9' | '.' => self.number()?,
                '"' => self.string()?,
                '#' => self.error_literal()?,
                '\'' => self.quoted_sheet_ref()?,
                '(' => self.single(Tok::LParen),
                ')' => self.single(Tok::RParen),
                ',' => self.single(Tok::Comma),
                ':' => self.single(Tok::Colon),
                '%' => self.single(Tok::Percent),
                '+' => self.single(Tok::Plus),
                '-' => self.single(Tok::Minus),
                '*' => self.single(Tok::Op(BinaryOp::Mul)),
                '/' => self.single(Tok::Op(BinaryOp::Div)),
                '^' => self.single(Tok::Op(BinaryOp::Pow)),
                '&' => self.single(Tok::Op(BinaryOp::Concat)),
                '=' => self.single(Tok::Op(BinaryOp::Eq)),
                '<' => {
                    self.pos += 1;
                    match self.peek_char() {
                        Some('=') => self.single(Tok::Op(BinaryOp::Le)),
                        Some('>') => self.single(Tok::Op(BinaryOp::Ne)),
                        _ => Tok::Op(BinaryOp::Lt),
                    }
                }
                '>' => {
                    self.pos += 1;
                    match self.peek_char() {
                        Some('=') => self.single(Tok::Op(BinaryOp::Ge)),
                        _ => Tok::Op(BinaryOp::Gt),
                    }
                }
                c if c.is_alphabetic() || c == '_' || c == '$' => self.word()?,
                other => {
                    return Err(FormulaError::UnknownToken { position: pos, text: other.to_string() });
                }
            };
            out.push(Token { tok, pos });
        }
        Ok(out)
    }

    fn single(&mut self, tok: Tok) -> Tok {
        self.pos += self.peek_char().map_or(0, char::len_utf8);
        tok
    }

    fn number(&mut self) -> Result<Tok, FormulaError> {
        let start = self.pos;
        self.take_while(|c| c.is_ascii_digit());
        if self.peek_char() == Some('.') {
            self.pos += 1;
            self.take_while(|c| c.is_ascii_digit());
        }
        if matches!(self.peek_char(), Some('e' | 'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek_char(), Some('+' | '-')) {
                self.pos += 1;
            }
            if self.take_while(|c| c.is_ascii_digit()).is_empty() {
                self.pos = mark;
            }
        }
        let text = &self.src[start..self.pos];
        if self.peek_char().is_some_and(|c| c.is_alphanumeric() || c == '_') {
            let tail = self.take_while(is_word_char);
            return Err(FormulaError::UnknownToken { position: start, text: format!("{text}{tail}") });
        }
        match grid::parse_number(text) {
            Some(n) if text != "." => Ok(Tok::Number(n)),
            _ => Err(FormulaError::UnknownToken { position: start, text: text.to_string() }),
        }
    }

    fn string(&mut self) -> Result<Tok, FormulaError> {
        let start = self.pos;
        self.pos += 1;
        let mut text = String::new();
        loop {
            match self.peek_char() {
                None => {
                    return Err(FormulaError::SyntaxError { position: start, expected: "closing '\"'".into() });
                }
                Some('"') => {
                    self.pos += 1;
                    if self.peek_char() == Some('"') {
                        self.pos += 1;
                        text.push('"');
                    } else {
                        return Ok(Tok::Text(text));
                    }
                }
                Some(c) => {
                    self.pos += c.len_utf8();
                    text.push(c);
                }
            }
        }
    }

    fn error_literal(&mut self) -> Result<Tok, FormulaError> {
        let rest = &self.src[self.pos..];
        for code in ErrorCode::ALL {
            let lit = code.as_str();
            if rest.len() >= lit.len()
                && rest.is_char_boundary(lit.len())
                && rest[..lit.len()].eq_ignore_ascii_case(lit)
            {
                self.pos += lit.len();
                return Ok(Tok::Error(code));
            }
        }
        let text = rest.chars().take_while(|c| !c.is_whitespace()).collect();
        Err(FormulaError::UnknownToken { position: self.pos, text })
    }

    fn quoted_sheet_ref(&mut self) -> Result<Tok, FormulaError> {
        let start = self.pos;
        let rest = &self.src[self.pos..];
        let Some((sheet, after)) = grid::split_sheet_prefix(rest) else {
            return Err(FormulaError::SyntaxError {
                position: start,
                expected: "quoted sheet name followed by '!'".into(),
            });
        };
        self.pos += rest.len() - after.len();
        self.ref_after_sheet(sheet)
    }

    fn ref_after_sheet(&mut self, sheet: String) -> Result<Tok, FormulaError> {
        let pos = self.pos;
        let word = self.take_while(is_word_char);
        match parse_ref_word(word) {
            Some(r) => Ok(Tok::Ref(CellRef { sheet: Some(sheet), ..r })),
            None => Err(FormulaError::SyntaxError { position: pos, expected: "cell reference after '!'".into() }),
        }
    }

    fn word(&mut self) -> Result<Tok, FormulaError> {
        let start = self.pos;
        let word = self.take_while(is_word_char);
        if self.peek_char() == Some('!') && !word.contains('$') {
            self.pos += 1;
            return self.ref_after_sheet(word.to_string());
        }
        let save = self.pos;
        self.skip_ws();
        let is_call = self.peek_char() == Some('(');
        self.pos = save;
        if is_call {
            if word.contains('$') {
                return Err(FormulaError::UnknownToken { position: start, text: word.to_string() });
            }
            return Ok(Tok::Func(word.to_uppercase()));
        }
        if let Some(r) = parse_ref_word(word) {
            return Ok(Tok::Ref(r));
        }
        if word.eq_ignore_ascii_case("TRUE") {
            return Ok(Tok::Bool(true));
        }
        if word.eq_ignore_ascii_case("FALSE") {
            return Ok(Tok::Bool(false));
        }
        Err(FormulaError::UnknownToken { position: start, text: word.to_string() })
    }
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    tokens: Vec<Token>,
    idx: usize,
    end: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.idx).map(|t| &t.tok)
    }

    fn pos(&self) -> usize {
        self.tokens.get(self.idx).map_or(self.end, |t| t.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let tok = self.tokens.get(self.idx).map(|t| t.tok.clone());
        self.idx += 1;
        tok
    }

    fn expected(&self, what: &str) -> FormulaError {
        if self.peek().is_none() && self.depth > 0 {
            return FormulaError::UnbalancedParens { position: self.end };
        }
        FormulaError::SyntaxError { position: self.pos(), expected: what.to_string() }
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        match self.peek()? {
            Tok::Op(op) => Some(*op),
            Tok::Plus => Some(BinaryOp::Add),
            Tok::Minus => Some(BinaryOp::Sub),
            _ => None,
        }
    }

    fn expr(&mut self, min_prec: u8) -> Result<FormulaAst, FormulaError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binary_op() {
            let prec = op.precedence();
            if prec < min_prec {
                break;
            }
            self.bump();
            let rhs = self.expr(prec + 1)?;
            lhs = FormulaAst::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<FormulaAst, FormulaError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.bump();
                Ok(FormulaAst::unary(UnaryOp::Neg, self.unary()?))
            }
            // Unary plus is a no-op and is dropped.
            Some(Tok::Plus) => {
                self.bump();
                self.unary()
            }
            _ => {
                let mut node = self.primary()?;
                while self.peek() == Some(&Tok::Percent) {
                    self.bump();
                    node = FormulaAst::unary(UnaryOp::Percent, node);
                }
                Ok(node)
            }
        }
    }

    fn close_paren(&mut self) -> Result<(), FormulaError> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.bump();
                self.depth -= 1;
                Ok(())
            }
            None => Err(FormulaError::UnbalancedParens { position: self.end }),
            _ => Err(self.expected("')'")),
        }
    }

    fn primary(&mut self) -> Result<FormulaAst, FormulaError> {
        let Some(tok) = self.bump() else {
            self.idx -= 1;
            return Err(self.expected("operand"));
        };
        match tok {
            Tok::Number(n) => Ok(FormulaAst::Number(n)),
            Tok::Text(t) => Ok(FormulaAst::Text(t)),
            Tok::Bool(b) => Ok(FormulaAst::Bool(b)),
            Tok::Error(e) => Ok(FormulaAst::Error(e)),
            Tok::Ref(start) => {
                if self.peek() != Some(&Tok::Colon) {
                    return Ok(FormulaAst::Ref(start));
                }
                self.bump();
                let pos = self.pos();
                match self.bump() {
                    Some(Tok::Ref(end)) => {
                        let end_sheet_ok = match (&start.sheet, &end.sheet) {
                            (_, None) => true,
                            (Some(a), Some(b)) => a.to_lowercase() == b.to_lowercase(),
                            (None, Some(_)) => false,
                        };
                        if !end_sheet_ok {
                            return Err(FormulaError::SyntaxError {
                                position: pos,
                                expected: "range end on the same sheet as its start".into(),
                            });
                        }
                        let end = CellRef { sheet: start.sheet.clone(), ..end };
                        Ok(FormulaAst::Range(start, end))
                    }
                    _ => {
                        self.idx -= 1;
                        Err(self.expected("cell reference after ':'"))
                    }
                }
            }
            Tok::LParen => {
                self.depth += 1;
                let inner = self.expr(0)?;
                self.close_paren()?;
                Ok(inner)
            }
            Tok::Func(name) => {
                self.bump(); // '('
                self.depth += 1;
                let mut args = Vec::new();
                if self.peek() == Some(&Tok::RParen) {
                    self.close_paren()?;
                    return Ok(FormulaAst::Call(name, args));
                }
                loop {
                    args.push(self.expr(0)?);
                    match self.peek() {
                        Some(Tok::Comma) => {
                            self.bump();
                        }
                        _ => {
                            self.close_paren()?;
                            return Ok(FormulaAst::Call(name, args));
                        }
                    }
                }
            }
            Tok::RParen => {
                self.idx -= 1;
                if self.depth == 0 {
                    Err(FormulaError::UnbalancedParens { position: self.pos() })
                } else {
                    Err(self.expected("operand"))
                }
            }
            _ => {
                self.idx -= 1;
                Err(self.expected("operand"))
            }
        }
    }
}

/// Parses formula source text, which must start with `=`.
pub fn parse_formula(source: &str) -> Result<FormulaAst, FormulaError> {
    let Some(body) = source.strip_prefix('=') else {
        return Err(FormulaError::SyntaxError { position: 0, expected: "'='".into() });
    };
    let mut tokens = Lexer { src: body, pos: 0 }.tokens()?;
    for t in &mut tokens {
        t.pos += 1;
    }
    let mut parser = Parser { tokens, idx: 0, end: source.len(), depth: 0 };
    let ast = parser.expr(0)?;
    match parser.peek() {
        None => Ok(ast),
        Some(Tok::RParen) => Err(FormulaError::UnbalancedParens { position: parser.pos() }),
        Some(_) => Err(parser.expected("operator or end of formula")),
    }
}

// ---------------------------------------------------------------------------
// Printing

fn write_node(ast: &FormulaAst, out: &mut String, write_ref: &dyn Fn(&CellRef, &mut String)) {
    let child = |node: &FormulaAst, parens: bool, out: &mut String| {
        if parens {
            out.push('(');
            write_node(node, out, write_ref);
            out.push(')');
        } else {
            write_node(node, out, write_ref);
        }
    };
    match ast {
        FormulaAst::Number(n) => out.push_str(&format_number(*n)),
        FormulaAst::Text(t) => {
            out.push('"');
            out.push_str(&t.replace('"', "\"\""));
            out.push('"');
        }
        FormulaAst::Bool(b) => out.push_str(if *b { "TRUE" } else { "FALSE" }),
        FormulaAst::Error(e) => out.push_str(e.as_str()),
        FormulaAst::Ref(r) => {
            write_sheet_prefix(r, out);
            write_ref(r, out);
        }
        FormulaAst::Range(a, b) => {
            write_sheet_prefix(a, out);
            write_ref(a, out);
            out.push(':');
            write_ref(b, out);
        }
        FormulaAst::Unary(UnaryOp::Neg, c) => {
            out.push('-');
            child(c, c.precedence() < PREC_NEG, out);
        }
        FormulaAst::Unary(UnaryOp::Percent, c) => {
            child(c, c.precedence() < PREC_PERCENT, out);
            out.push('%');
        }
        FormulaAst::Binary(op, l, r) => {
            let prec = op.precedence();
            child(l, l.precedence() < prec, out);
            out.push_str(op.symbol());
            child(r, r.precedence() <= prec, out);
        }
        FormulaAst::Call(name, args) => {
            out.push_str(name);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_node(a, out, write_ref);
            }
            out.push(')');
        }
    }
}

fn write_sheet_prefix(r: &CellRef, out: &mut String) {
    if let Some(sheet) = &r.sheet {
        out.push_str(&quote_sheet(sheet));
        out.push('!');
    }
}

/// Canonical A1 text: minimal parentheses, uppercase names, no whitespace.
pub fn print_formula(ast: &FormulaAst) -> String {
    let mut out = String::from("=");
    write_node(ast, &mut out, &|r, out| r.write_a1(out));
    out
}

/// Host-relative canonical form; translated copies of a formula normalize identically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormalizedFormula(String);

impl NormalizedFormula {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NormalizedFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn normalize_relative(ast: &FormulaAst, host: &CellAddress) -> NormalizedFormula {
    let mut out = String::from("=");
    write_node(ast, &mut out, &|r, out| r.write_r1c1(host, out));
    NormalizedFormula(out)
}

/// A reference occurrence in source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reference {
    Cell(CellRef),
    Range(CellRef, CellRef),
}

pub fn references_of(ast: &FormulaAst) -> Vec<Reference> {
    let mut out = Vec::new();
    ast.walk(&mut |node| match node {
        FormulaAst::Ref(r) => out.push(Reference::Cell(r.clone())),
        FormulaAst::Range(a, b) => out.push(Reference::Range(a.clone(), b.clone())),
        _ => {}
    });
    out
}

/// Moves every relative axis of every unqualified reference by (dr, dc), as copying a
/// formula does. Returns `None` if a reference would leave the grid.
pub fn translate(ast: &FormulaAst, dr: i64, dc: i64) -> Option<FormulaAst> {
    let shift = |r: &CellRef| -> Option<CellRef> {
        if r.sheet.is_some() {
            return Some(r.clone());
        }
        let mv = |v: u32, abs: bool, d: i64, max: u32| -> Option<u32> {
            if abs {
                return Some(v);
            }
            let n = i64::from(v) + d;
            (1..=i64::from(max)).contains(&n).then_some(n as u32)
        };
        Some(CellRef { row: mv(r.row, r.row_abs, dr, MAX_ROW)?, col: mv(r.col, r.col_abs, dc, MAX_COL)?, ..r.clone() })
    };
    Some(match ast {
        FormulaAst::Ref(r) => FormulaAst::Ref(shift(r)?),
        FormulaAst::Range(a, b) => FormulaAst::Range(shift(a)?, shift(b)?),
        FormulaAst::Unary(op, c) => FormulaAst::unary(*op, translate(c, dr, dc)?),
        FormulaAst::Binary(op, l, r) => FormulaAst::binary(*op, translate(l, dr, dc)?, translate(r, dr, dc)?),
        FormulaAst::Call(name, args) => {
            FormulaAst::Call(name.clone(), args.iter().map(|a| translate(a, dr, dc)).collect::<Option<Vec<_>>>()?)
        }
        other => other.clone(),
    })
}
