//! Loading and joining the transaction / identity tables.
//!
//! Input is comma-separated text with a header row. Empty cells and the
//! literal "NaN" are MISSING for every column kind; numerics that parse to
//! a non-finite value are also stored as MISSING so everything downstream
//! can assume finite floats. The identity table is left-joined onto the
//! transaction table by the identifier column; output row order is the
//! transaction file's order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Identifier,
    Time,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind,
        }
    }
}

/// Typed column storage; `None` is MISSING.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
    Identifier(Vec<i64>),
    Time(Vec<Option<f64>>),
    Label(Vec<Option<u8>>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
            ColumnData::Identifier(v) => v.len(),
            ColumnData::Time(v) => v.len(),
            ColumnData::Label(v) => v.len(),
        }
    }
}

/// Joined table: `data[i]` corresponds to `columns[i]`, all of length
/// `n_rows`, ordered as the transaction file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub columns: Vec<ColumnSpec>,
    pub n_rows: usize,
    pub data: Vec<ColumnData>,
}

impl RawTable {
    pub fn column(&self, name: &str) -> Option<(&ColumnSpec, &ColumnData)> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .map(|i| (&self.columns[i], &self.data[i]))
    }

    fn by_kind(&self, kind: ColumnKind) -> Option<usize> {
        self.columns.iter().position(|c| c.kind == kind)
    }

    /// The identifier column (schema validation guarantees exactly one).
    pub fn ids(&self) -> &[i64] {
        match &self.data[self.by_kind(ColumnKind::Identifier).unwrap()] {
            ColumnData::Identifier(v) => v,
            _ => unreachable!("identifier column has identifier data"),
        }
    }

    pub fn labels(&self) -> &[Option<u8>] {
        match &self.data[self.by_kind(ColumnKind::Label).unwrap()] {
            ColumnData::Label(v) => v,
            _ => unreachable!("label column has label data"),
        }
    }

    /// Time column values, or `None` if the schema declares no time column.
    pub fn times(&self) -> Option<&[Option<f64>]> {
        self.by_kind(ColumnKind::Time).map(|i| match &self.data[i] {
            ColumnData::Time(v) => v.as_slice(),
            _ => unreachable!("time column has time data"),
        })
    }
}

/// Exactly one label, exactly one identifier, at most one time column,
/// unique names.
pub fn validate_schema(schema: &[ColumnSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in schema {
        if !seen.insert(c.name.as_str()) {
            return Err(Error::ConfigError(format!(
                "schema declares column {:?} twice",
                c.name
            )));
        }
    }
    let count = |k| schema.iter().filter(|c| c.kind == k).count();
    if count(ColumnKind::Identifier) != 1 {
        return Err(Error::ConfigError(
            "schema must declare exactly one identifier column".into(),
        ));
    }
    if count(ColumnKind::Label) != 1 {
        return Err(Error::ConfigError(
            "schema must declare exactly one label column".into(),
        ));
    }
    if count(ColumnKind::Time) > 1 {
        return Err(Error::ConfigError(
            "schema may declare at most one time column".into(),
        ));
    }
    Ok(())
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s == "NaN"
}

fn cell_err(path: &Path, line: u64, col: &str, raw: &str, kind: &str) -> Error {
    Error::SchemaViolation(format!(
        "{}: line {line}, column {col:?}: cannot parse {raw:?} as {kind}",
        path.display()
    ))
}

fn parse_numeric(path: &Path, line: u64, col: &str, raw: &str) -> Result<Option<f64>> {
    if is_missing(raw) {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| cell_err(path, line, col, raw, "numeric"))?;
    // Parsed infinities (and a spelled-out "nan") count as MISSING so all
    // stored numerics are finite.
    Ok(v.is_finite().then_some(v))
}

fn parse_label(path: &Path, line: u64, col: &str, raw: &str) -> Result<Option<u8>> {
    if is_missing(raw) {
        return Ok(None);
    }
    match raw {
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        _ => Err(cell_err(path, line, col, raw, "binary label")),
    }
}

fn parse_id(path: &Path, line: u64, col: &str, raw: &str) -> Result<i64> {
    if is_missing(raw) {
        return Err(Error::SchemaViolation(format!(
            "{}: line {line}, column {col:?}: identifier is missing",
            path.display()
        )));
    }
    raw.parse()
        .map_err(|_| cell_err(path, line, col, raw, "identifier"))
}

/// Where each schema column's values come from.
#[derive(Clone, Copy)]
enum Source {
    Transaction(usize),
    Identity(usize),
    Absent,
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn headers(reader: &mut csv::Reader<std::fs::File>, path: &Path) -> Result<Vec<String>> {
    Ok(reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|s| s.to_string())
        .collect())
}

fn empty_builder(kind: ColumnKind) -> ColumnData {
    match kind {
        ColumnKind::Numeric => ColumnData::Numeric(Vec::new()),
        ColumnKind::Categorical => ColumnData::Categorical(Vec::new()),
        ColumnKind::Identifier => ColumnData::Identifier(Vec::new()),
        ColumnKind::Time => ColumnData::Time(Vec::new()),
        ColumnKind::Label => ColumnData::Label(Vec::new()),
    }
}

fn push_cell(
    data: &mut ColumnData,
    spec: &ColumnSpec,
    path: &Path,
    line: u64,
    raw: Option<&str>,
) -> Result<()> {
    let raw_str = raw.unwrap_or("");
    match data {
        ColumnData::Numeric(v) => v.push(parse_numeric(path, line, &spec.name, raw_str)?),
        ColumnData::Time(v) => v.push(parse_numeric(path, line, &spec.name, raw_str)?),
        ColumnData::Categorical(v) => v.push(if is_missing(raw_str) {
            None
        } else {
            Some(raw_str.to_string())
        }),
        ColumnData::Label(v) => v.push(parse_label(path, line, &spec.name, raw_str)?),
        ColumnData::Identifier(v) => v.push(parse_id(path, line, &spec.name, raw_str)?),
    }
    Ok(())
}

/// Load the transaction table, left-join the identity table if given, and
/// return one typed table in transaction-file row order.
///
/// Columns in a file but not in the schema are skipped with a warning.
/// Declared columns found in neither file are filled with MISSING (also
/// with a warning) — except the identifier, which must exist.
pub fn load_tables(
    transaction_path: &Path,
    identity_path: Option<&Path>,
    schema: &[ColumnSpec],
) -> Result<RawTable> {
    validate_schema(schema)?;
    let id_spec = schema
        .iter()
        .find(|c| c.kind == ColumnKind::Identifier)
        .expect("validated");

    let mut tx_reader = open_reader(transaction_path)?;
    let tx_headers = headers(&mut tx_reader, transaction_path)?;

    let identity = match identity_path {
        Some(p) => {
            let mut r = open_reader(p)?;
            let h = headers(&mut r, p)?;
            if !h.iter().any(|n| *n == id_spec.name) {
                return Err(Error::SchemaViolation(format!(
                    "{}: identity table lacks identifier column {:?}",
                    p.display(),
                    id_spec.name
                )));
            }
            Some((p, r, h))
        }
        None => None,
    };

    // Resolve each schema column to a source, preferring the transaction
    // file.
    let mut sources = Vec::with_capacity(schema.len());
    for spec in schema {
        let src = if let Some(i) = tx_headers.iter().position(|h| *h == spec.name) {
            Source::Transaction(i)
        } else if let Some((_, _, ih)) = &identity {
            match ih.iter().position(|h| *h == spec.name) {
                Some(i) => Source::Identity(i),
                None => Source::Absent,
            }
        } else {
            Source::Absent
        };
        if matches!(src, Source::Absent) {
            if spec.kind == ColumnKind::Identifier {
                return Err(Error::SchemaViolation(format!(
                    "{}: required identifier column {:?} not found",
                    transaction_path.display(),
                    spec.name
                )));
            }
            eprintln!(
                "warning: column {:?} not present in input; treating as all-missing",
                spec.name
            );
        }
        sources.push(src);
    }
    {
        let declared: HashSet<&str> = schema.iter().map(|c| c.name.as_str()).collect();
        for h in &tx_headers {
            if !declared.contains(h.as_str()) {
                eprintln!("warning: ignoring undeclared column {h:?}");
            }
        }
    }

    // Pass 1: transaction file.
    let mut builders: Vec<ColumnData> =
        schema.iter().map(|c| empty_builder(c.kind)).collect();
    let mut tx_ids: Vec<i64> = Vec::new();
    let id_tx_col = tx_headers
        .iter()
        .position(|h| *h == id_spec.name)
        .ok_or_else(|| {
            Error::SchemaViolation(format!(
                "{}: required identifier column {:?} not found",
                transaction_path.display(),
                id_spec.name
            ))
        })?;
    let mut seen_ids: HashSet<i64> = HashSet::new();
    for record in tx_reader.records() {
        let record = record.map_err(|e| Error::csv(transaction_path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = parse_id(
            transaction_path,
            line,
            &id_spec.name,
            record.get(id_tx_col).unwrap_or(""),
        )?;
        if !seen_ids.insert(id) {
            return Err(Error::DuplicateKey {
                table: "transaction".into(),
                id: id.to_string(),
            });
        }
        tx_ids.push(id);
        for (spec, (src, data)) in schema.iter().zip(sources.iter().zip(&mut builders)) {
            if let Source::Transaction(i) = src {
                push_cell(data, spec, transaction_path, line, record.get(*i))?;
            }
        }
    }
    let n_rows = tx_ids.len();

    // Pass 2: identity file into side storage keyed by identifier.
    if let Some((path, mut reader, headers)) = identity {
        let id_col = headers
            .iter()
            .position(|h| *h == id_spec.name)
            .expect("checked above");
        let mut side: Vec<ColumnData> = schema.iter().map(|c| empty_builder(c.kind)).collect();
        let mut row_of: HashMap<i64, usize> = HashMap::new();
        let mut n_identity = 0usize;
        for record in reader.records() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let id = parse_id(path, line, &id_spec.name, record.get(id_col).unwrap_or(""))?;
            if row_of.insert(id, n_identity).is_some() {
                return Err(Error::DuplicateKey {
                    table: "identity".into(),
                    id: id.to_string(),
                });
            }
            for (spec, (src, data)) in schema.iter().zip(sources.iter().zip(&mut side)) {
                if let Source::Identity(i) = src {
                    push_cell(data, spec, path, line, record.get(*i))?;
                }
            }
            n_identity += 1;
        }
        // Assemble identity-sourced columns in transaction order.
        for (ci, src) in sources.iter().enumerate() {
            let Source::Identity(_) = src else { continue };
            match (&mut builders[ci], &side[ci]) {
                (ColumnData::Numeric(out), ColumnData::Numeric(s)) => {
                    *out = join_rows(&tx_ids, &row_of, s);
                }
                (ColumnData::Time(out), ColumnData::Time(s)) => {
                    *out = join_rows(&tx_ids, &row_of, s);
                }
                (ColumnData::Categorical(out), ColumnData::Categorical(s)) => {
                    *out = join_rows(&tx_ids, &row_of, s);
                }
                (ColumnData::Label(out), ColumnData::Label(s)) => {
                    *out = join_rows(&tx_ids, &row_of, s);
                }
                _ => unreachable!("identifier always resolves to the transaction file"),
            }
        }
    }

    // Absent columns become all-MISSING of the right length.
    for (ci, src) in sources.iter().enumerate() {
        if matches!(src, Source::Absent) {
            builders[ci] = match schema[ci].kind {
                ColumnKind::Numeric => ColumnData::Numeric(vec![None; n_rows]),
                ColumnKind::Time => ColumnData::Time(vec![None; n_rows]),
                ColumnKind::Categorical => ColumnData::Categorical(vec![None; n_rows]),
                ColumnKind::Label => ColumnData::Label(vec![None; n_rows]),
                ColumnKind::Identifier => unreachable!("rejected earlier"),
            };
        }
    }

    let table = RawTable {
        columns: schema.to_vec(),
        n_rows,
        data: builders,
    };
    debug_assert!(table.data.iter().all(|c| c.len() == n_rows));
    Ok(table)
}

fn join_rows<T: Clone>(
    tx_ids: &[i64],
    row_of: &HashMap<i64, usize>,
    side: &[Option<T>],
) -> Vec<Option<T>> {
    tx_ids
        .iter()
        .map(|id| row_of.get(id).and_then(|&r| side[r].clone()))
        .collect()
}
