//! CSV ingestion. All layouts need a header row; numeric cells must be finite
//! decimals. Errors carry the source name, line and column.

use crate::args::Layout;
use crate::{input_err, CliError, Result};
use frm_core::kernels::{apply_pseudocount, PseudocountPolicy};
use frm_core::model::SubjectRecord;
use frm_core::ustat::{pair_count, PairData, PairIndex};
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Subjects(Vec<SubjectRecord>),
    Pairs(PairData),
}

/// Role of a column, decided by its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Id,
    Index,
    Response,
    Covariate,
    Count,
}

/// `x`, `x1`, `x_age` match prefix `x`; `xylose` does not.
fn has_prefix(name: &str, prefix: char) -> bool {
    match name.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('_') || rest.chars().all(|c| c.is_ascii_digit()),
        None => false,
    }
}

struct Table {
    source: String,
    headers: Vec<String>,
    /// (line number, cells)
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table<R: Read>(reader: R, source: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let wrap = |e: csv::Error| {
        let msg = match e.kind() {
            csv::ErrorKind::UnequalLengths { pos: Some(p), expected_len, len } => {
                format!("line {}: found {len} fields, expected {expected_len}", p.line())
            }
            _ => e.to_string(),
        };
        CliError::Input(format!("{source}: {msg}"))
    };
    let headers: Vec<String> = rdr.headers().map_err(wrap)?.iter().map(str::to_owned).collect();
    if headers.iter().all(String::is_empty) {
        return input_err(format!("{source}: missing header row"));
    }
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h) {
            return input_err(format!("{source}: duplicate column '{h}'"));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(wrap)?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    if rows.is_empty() {
        return input_err(format!("{source}: no data rows"));
    }
    Ok(Table { source: source.to_owned(), headers, rows })
}

impl Table {
    fn number(&self, line: u64, col: usize, cell: &str) -> Result<f64> {
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => input_err(format!(
                "{}: line {line}, column {} ({}): '{cell}' is not a finite number",
                self.source,
                col + 1,
                self.headers[col]
            )),
        }
    }

    fn roles(&self, classify: impl Fn(usize, &str) -> Option<Role>) -> Result<Vec<Role>> {
        self.headers
            .iter()
            .enumerate()
            .map(|(c, h)| {
                classify(c, h).ok_or_else(|| {
                    CliError::Input(format!("{}: column {} ('{h}') has an unrecognized header", self.source, c + 1))
                })
            })
            .collect()
    }

    fn cols(roles: &[Role], role: Role) -> Vec<usize> {
        roles.iter().enumerate().filter(|(_, r)| **r == role).map(|(c, _)| c).collect()
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen: HashMap<&str, u64> = HashMap::new();
        for (line, cells) in &self.rows {
            if cells[0].is_empty() {
                return input_err(format!("{}: line {line}: empty id", self.source));
            }
            if let Some(first) = seen.insert(&cells[0], *line) {
                return input_err(format!(
                    "{}: line {line}: duplicate id '{}' (first on line {first})",
                    self.source, cells[0]
                ));
            }
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path, layout: Layout) -> Result<Dataset> {
    let source = path.display().to_string();
    let file = open(path)?;
    match layout {
        Layout::Subjects => read_subjects(file, &source).map(Dataset::Subjects),
        Layout::Abundance => read_abundance(file, &source).map(Dataset::Subjects),
        Layout::Pairs => read_pairs(file, &source).map(Dataset::Pairs),
    }
}

/// `id`, then response columns `y*` and covariate columns `x*` in any order.
pub fn read_subjects<R: Read>(reader: R, source: &str) -> Result<Vec<SubjectRecord>> {
    let t = read_table(reader, source)?;
    let roles = t.roles(|c, h| match h {
        "id" if c == 0 => Some(Role::Id),
        _ if c > 0 && has_prefix(h, 'y') => Some(Role::Response),
        _ if c > 0 && has_prefix(h, 'x') => Some(Role::Covariate),
        _ => None,
    })?;
    let (ycols, xcols) = (Table::cols(&roles, Role::Response), Table::cols(&roles, Role::Covariate));
    if ycols.is_empty() {
        return input_err(format!("{source}: no response columns (headers starting with 'y')"));
    }
    t.check_ids()?;
    t.rows
        .iter()
        .map(|(line, cells)| {
            let y = ycols.iter().map(|&c| t.number(*line, c, &cells[c])).collect::<Result<Vec<_>>>()?;
            let x = xcols.iter().map(|&c| t.number(*line, c, &cells[c])).collect::<Result<Vec<_>>>()?;
            Ok(SubjectRecord::new(cells[0].clone(), y, x)?)
        })
        .collect()
}

/// `id`, count columns, and optional covariate columns `x*`. Each count row
/// is closed to a composition; zeros get half the smallest positive count.
pub fn read_abundance<R: Read>(reader: R, source: &str) -> Result<Vec<SubjectRecord>> {
    let t = read_table(reader, source)?;
    let roles = t.roles(|c, h| match c {
        0 if h == "id" => Some(Role::Id),
        0 => None,
        _ if has_prefix(h, 'x') => Some(Role::Covariate),
        _ => Some(Role::Count),
    })?;
    let (ccols, xcols) = (Table::cols(&roles, Role::Count), Table::cols(&roles, Role::Covariate));
    if ccols.len() < 2 {
        return input_err(format!("{source}: need at least two count columns, found {}", ccols.len()));
    }
    t.check_ids()?;
    t.rows
        .iter()
        .map(|(line, cells)| {
            let counts = ccols.iter().map(|&c| t.number(*line, c, &cells[c])).collect::<Result<Vec<_>>>()?;
            let comp = apply_pseudocount(&counts, PseudocountPolicy::HalfMinPositive)
                .map_err(|e| CliError::Input(format!("{source}: line {line} (id '{}'): {e}", cells[0])))?;
            let x = xcols.iter().map(|&c| t.number(*line, c, &cells[c])).collect::<Result<Vec<_>>>()?;
            Ok(SubjectRecord::new(cells[0].clone(), comp.values().to_vec(), x)?)
        })
        .collect()
}

/// `i1`, `i2` (0-based subject indices with i1 < i2), responses `f*`, pair
/// covariates `x*`. Every pair of the `n = max index + 1` subjects must
/// appear exactly once; rows may come in any order.
pub fn read_pairs<R: Read>(reader: R, source: &str) -> Result<PairData> {
    let t = read_table(reader, source)?;
    let roles = t.roles(|c, h| match (c, h) {
        (0, "i1") | (1, "i2") => Some(Role::Index),
        (0 | 1, _) => None,
        _ if has_prefix(h, 'f') => Some(Role::Response),
        _ if has_prefix(h, 'x') => Some(Role::Covariate),
        _ => None,
    })?;
    let (fcols, xcols) = (Table::cols(&roles, Role::Response), Table::cols(&roles, Role::Covariate));
    if fcols.is_empty() {
        return input_err(format!("{source}: no response columns (headers starting with 'f')"));
    }
    let index = |line: u64, c: usize, cell: &str| -> Result<usize> {
        cell.parse::<usize>().or_else(|_| {
            input_err(format!(
                "{source}: line {line}, column {} ({}): '{cell}' is not a subject index",
                c + 1,
                t.headers[c]
            ))
        })
    };
    let mut parsed = Vec::with_capacity(t.rows.len());
    let mut seen: HashMap<(usize, usize), u64> = HashMap::new();
    for (line, cells) in &t.rows {
        let (a, b) = (index(*line, 0, &cells[0])?, index(*line, 1, &cells[1])?);
        if a == b {
            return input_err(format!("{source}: line {line}: pair ({a}, {b}) pairs a subject with itself"));
        }
        if let Some(first) = seen.insert((a.min(b), a.max(b)), *line) {
            return input_err(format!("{source}: line {line}: duplicate pair ({a}, {b}) (first on line {first})"));
        }
        parsed.push((*line, a, b, cells));
    }
    if let Some((line, a, b, _)) = parsed.iter().find(|(_, a, b, _)| a > b) {
        return input_err(format!("{source}: line {line}: pair ({a}, {b}) must be listed with i1 < i2"));
    }
    let n = parsed.iter().map(|p| p.2).max().unwrap_or(0) + 1;
    let total = pair_count(n);
    if parsed.len() != total {
        let missing = (0..total).map(|k| PairIndex::from_linear(k, n)).find(|p| !seen.contains_key(&(p.i1, p.i2)));
        let what = missing.map(|p| format!("; pair ({}, {}) is missing", p.i1, p.i2)).unwrap_or_default();
        return input_err(format!("{source}: {n} subjects need {total} pairs, found {}{what}", parsed.len()));
    }
    let (d, r) = (fcols.len(), xcols.len());
    let mut f = vec![0.0; total * d];
    let mut x = vec![0.0; total * r];
    for (line, a, b, cells) in parsed {
        let k = PairIndex { i1: a, i2: b }.linear(n);
        for (j, &c) in fcols.iter().enumerate() {
            f[k * d + j] = t.number(line, c, &cells[c])?;
        }
        for (j, &c) in xcols.iter().enumerate() {
            x[k * r + j] = t.number(line, c, &cells[c])?;
        }
    }
    Ok(PairData::new(n, d, r, f, x)?)
}
