//! Domain types, id alignment and file I/O for representations, responses,
//! targets and importance scores.
//!
//! Binary matrices (`EMB1` embeddings, `IMP1` importance) share one layout:
//!
//! ```text
//! magic[4] | u32 n | u32 d | u32 id_block_len | id_block | n*d f32
//! ```
//!
//! All integers and floats are little-endian, the matrix is row-major and the
//! id block is the `n` ids joined by `\n` (no trailing newline). Readers accept
//! only this canonical form, so `write(read(bytes)) == bytes`.
//!
//! Responses and targets are JSON lines:
//!
//! ```text
//! {"id":"washington","responses":[1799,1799,1796]}
//! {"id":"paris","responses":[[48.85,2.35],[48.86,2.34]]}
//! {"id":"washington","target":1799}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"EMB1";
pub const IMPORTANCE_MAGIC: [u8; 4] = *b"IMP1";

const HEADER_LEN: usize = 16;

/// Row-labelled dense `f32` matrix; the storage behind embeddings and
/// importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    ids: Vec<String>,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl LabeledMatrix {
    pub fn new(ids: Vec<String>, cols: usize, data: Vec<f32>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Shape("matrix needs at least one column".into()));
        }
        let rows = ids.len();
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} ids x {} columns needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        check_ids(&ids)?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                row: index / cols,
                col: index % cols,
            });
        }
        Ok(Self {
            ids,
            rows,
            cols,
            data,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// New matrix holding `rows` in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            ids.push(self.ids[r].clone());
        }
        Self {
            ids,
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows widened to `f64`, in the given order.
    pub fn to_dmatrix_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.cols, |i, j| self.get(rows[i], j) as f64)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|&v| v as f64))
    }

    fn encode(&self, magic: [u8; 4]) -> Vec<u8> {
        let id_block = self.ids.join("\n");
        let mut out = Vec::with_capacity(HEADER_LEN + id_block.len() + 4 * self.data.len());
        out.extend_from_slice(&magic);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(id_block.len() as u32).to_le_bytes());
        out.extend_from_slice(id_block.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!(
                "{} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if bytes[..4] != magic {
            return Err(Error::BadMagic {
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
                expected: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!(
                "{} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (rows, cols, id_len) = (word(4), word(8), word(12));
        if cols == 0 {
            return Err(Error::Format("d must be positive".into()));
        }
        let payload = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
        let expected = HEADER_LEN + id_len + payload;
        if bytes.len() < expected {
            return Err(Error::Truncated(format!(
                "expected {expected} bytes for n={rows}, d={cols}, got {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let block = std::str::from_utf8(&bytes[HEADER_LEN..HEADER_LEN + id_len])
            .map_err(|e| Error::Format(format!("id block is not UTF-8: {e}")))?;
        let ids: Vec<String> = if rows == 0 && block.is_empty() {
            Vec::new()
        } else {
            block.split('\n').map(str::to_owned).collect()
        };
        if ids.len() != rows {
            return Err(Error::Format(format!(
                "id block holds {} ids, header says n={rows}",
                ids.len()
            )));
        }
        let data: Vec<f32> = bytes[HEADER_LEN + id_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(ids, cols, data)
    }
}

fn check_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if id.is_empty() || id.contains('\n') {
            return Err(Error::Format(format!(
                "id {id:?} must be non-empty and free of newlines"
            )));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Hidden representations, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub matrix: LabeledMatrix,
    /// Free-form provenance (model, layer, temperature). Not stored in `EMB1`.
    pub meta: BTreeMap<String, String>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, d: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self {
            matrix: LabeledMatrix::new(ids, d, data)?,
            meta: BTreeMap::new(),
        })
    }

    pub fn ids(&self) -> &[String] {
        self.matrix.ids()
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.matrix.encode(EMBEDDING_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self {
            matrix: LabeledMatrix::decode(bytes, EMBEDDING_MAGIC)?,
            meta: BTreeMap::new(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_bytes(&read_bytes(path.as_ref())?)
}

/// Per-sample, per-feature relevance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    pub matrix: LabeledMatrix,
}

impl ImportanceMatrix {
    pub fn new(ids: Vec<String>, d: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self {
            matrix: LabeledMatrix::new(ids, d, data)?,
        })
    }

    pub fn ids(&self) -> &[String] {
        self.matrix.ids()
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.matrix.encode(IMPORTANCE_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self {
            matrix: LabeledMatrix::decode(bytes, IMPORTANCE_MAGIC)?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }
}

pub fn load_importance(path: impl AsRef<Path>) -> Result<ImportanceMatrix> {
    ImportanceMatrix::from_bytes(&read_bytes(path.as_ref())?)
}

/// Ordered id -> value map with uniqueness enforced on insert.
#[derive(Debug, Clone, PartialEq)]
struct IdMap<T> {
    ids: Vec<String>,
    values: Vec<T>,
    index: HashMap<String, usize>,
}

impl<T> Default for IdMap<T> {
    fn default() -> Self {
        Self {
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Clone> IdMap<T> {
    fn insert(&mut self, id: String, value: T) -> Result<()> {
        if id.is_empty() || id.contains('\n') {
            return Err(Error::Format(format!(
                "id {id:?} must be non-empty and free of newlines"
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.push(value);
        Ok(())
    }

    fn get(&self, id: &str) -> Option<&T> {
        self.index.get(id).map(|&i| &self.values[i])
    }

    fn select(&self, ids: &[String]) -> Self {
        let mut out = Self::default();
        for id in ids {
            if let Some(v) = self.get(id) {
                out.index.insert(id.clone(), out.ids.len());
                out.ids.push(id.clone());
                out.values.push(v.clone());
            }
        }
        out
    }
}

/// Repeated responses per sample. Every response has `t` coordinates; the
/// number of responses may differ between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTable {
    t: usize,
    entries: IdMap<Vec<Vec<f64>>>,
}

impl ResponseTable {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            entries: IdMap::default(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, responses: Vec<Vec<f64>>) -> Result<()> {
        let id = id.into();
        for r in &responses {
            if r.len() != self.t {
                return Err(Error::Dimension {
                    expected: self.t,
                    found: r.len(),
                    context: format!("response for {id:?}"),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite response for {id:?}")));
            }
        }
        self.entries.insert(id, responses)
    }

    /// Table with every id present and no responses recorded.
    pub fn empty_for(ids: &[String], t: usize) -> Result<Self> {
        let mut table = Self::new(t);
        for id in ids {
            table.insert(id.clone(), Vec::new())?;
        }
        Ok(table)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.entries.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.entries.ids
    }

    pub fn get(&self, id: &str) -> Option<&[Vec<f64>]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Vec<f64>])> {
        self.entries
            .ids
            .iter()
            .zip(&self.entries.values)
            .map(|(id, r)| (id.as_str(), r.as_slice()))
    }

    fn select(&self, ids: &[String]) -> Self {
        Self {
            t: self.t,
            entries: self.entries.select(ids),
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, responses) in self.iter() {
            let value = if self.t == 1 {
                serde_json::json!({ "id": id, "responses": responses.iter().map(|r| r[0]).collect::<Vec<_>>() })
            } else {
                serde_json::json!({ "id": id, "responses": responses })
            };
            writeln!(w, "{value}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Ground-truth concept values.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    t: usize,
    entries: IdMap<Vec<f64>>,
}

impl TargetVector {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            entries: IdMap::default(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, target: Vec<f64>) -> Result<()> {
        let id = id.into();
        if target.len() != self.t {
            return Err(Error::Dimension {
                expected: self.t,
                found: target.len(),
                context: format!("target for {id:?}"),
            });
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite target for {id:?}")));
        }
        self.entries.insert(id, target)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.entries.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.entries.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    fn select(&self, ids: &[String]) -> Self {
        Self {
            t: self.t,
            entries: self.entries.select(ids),
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, target) in self.entries.ids.iter().zip(&self.entries.values) {
            let value = if self.t == 1 {
                serde_json::json!({ "id": id, "target": target[0] })
            } else {
                serde_json::json!({ "id": id, "target": target })
            };
            writeln!(w, "{value}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Extract the first `t` signed decimal numbers from free text.
///
/// A `-` or `+` counts as a sign only when it directly precedes a digit (or
/// `.digit`) and does not follow a digit, so `"1799-1800"` yields 1799, 1800.
pub fn parse_numeric_response(text: &str, t: usize) -> Option<Vec<f64>> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(t);
    let mut i = 0;
    let starts_number = |at: usize| -> bool {
        match bytes.get(at) {
            Some(b) if b.is_ascii_digit() => true,
            Some(b'.') => bytes.get(at + 1).is_some_and(u8::is_ascii_digit),
            _ => false,
        }
    };
    while i < bytes.len() && out.len() < t {
        let prev_digit = i > 0 && bytes[i - 1].is_ascii_digit();
        let signed = matches!(bytes[i], b'-' | b'+') && !prev_digit && starts_number(i + 1);
        if !(signed || starts_number(i)) {
            i += 1;
            continue;
        }
        let start = i;
        if signed {
            i += 1;
        }
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        out.push(text[start..i].parse::<f64>().ok()?);
    }
    (out.len() == t).then_some(out)
}

enum RawResponse {
    Numeric(Vec<f64>),
    Text(String),
}

fn numeric_dim(v: &Value) -> Option<Vec<f64>> {
    match v {
        Value::Number(n) => n.as_f64().map(|x| vec![x]),
        Value::Array(items) => items.iter().map(Value::as_f64).collect(),
        _ => None,
    }
}

fn read_json_lines(path: &Path) -> Result<Vec<(usize, serde_json::Map<String, Value>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => out.push((line_no, map)),
            Ok(_) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "record must be a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn record_id(line: usize, map: &serde_json::Map<String, Value>) -> Result<String> {
    match map.get("id") {
        Some(Value::String(s)) => Ok(s.clone()),
        _ => Err(Error::Parse {
            line,
            msg: "missing string field \"id\"".into(),
        }),
    }
}

/// Load a responses file, inferring `t` from the numeric entries.
pub fn load_responses(path: impl AsRef<Path>) -> Result<ResponseTable> {
    load_responses_with_dim(path, None)
}

/// Load a responses file. Entries may be numbers, `[num, num]` pairs, or raw
/// generation strings; strings go through [`parse_numeric_response`] and are
/// dropped when they hold too few numbers. `t` must be given when no entry is
/// numeric (defaults to 1 otherwise).
pub fn load_responses_with_dim(path: impl AsRef<Path>, t: Option<usize>) -> Result<ResponseTable> {
    let path = path.as_ref();
    let mut dim = t;
    let mut parsed = Vec::new();
    for (line, map) in read_json_lines(path)? {
        let id = record_id(line, &map)?;
        let Some(Value::Array(items)) = map.get("responses") else {
            return Err(Error::Parse {
                line,
                msg: "missing array field \"responses\"".into(),
            });
        };
        let mut raw = Vec::with_capacity(items.len());
        for item in items {
            if let Value::String(s) = item {
                raw.push(RawResponse::Text(s.clone()));
                continue;
            }
            let v = numeric_dim(item).filter(|v| !v.is_empty()).ok_or_else(|| Error::Parse {
                line,
                msg: format!("response {item} is not a number, numeric array or string"),
            })?;
            match dim {
                None => dim = Some(v.len()),
                Some(t) if t != v.len() => {
                    return Err(Error::Dimension {
                        expected: t,
                        found: v.len(),
                        context: format!("line {line}"),
                    })
                }
                _ => {}
            }
            raw.push(RawResponse::Numeric(v));
        }
        parsed.push((line, id, raw));
    }
    let t = dim.unwrap_or(1);
    if !(1..=2).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "response dimensionality must be 1 or 2, got {t}"
        )));
    }
    let mut table = ResponseTable::new(t);
    for (line, id, raw) in parsed {
        let responses = raw
            .into_iter()
            .filter_map(|r| match r {
                RawResponse::Numeric(v) => Some(v),
                RawResponse::Text(s) => parse_numeric_response(&s, t),
            })
            .collect();
        table.insert(id, responses).map_err(|e| match e {
            Error::DuplicateId(_) | Error::Dimension { .. } | Error::Format(_) => Error::Parse {
                line,
                msg: e.to_string(),
            },
            other => other,
        })?;
    }
    Ok(table)
}

pub fn load_targets(path: impl AsRef<Path>) -> Result<TargetVector> {
    let path = path.as_ref();
    let mut targets: Option<TargetVector> = None;
    for (line, map) in read_json_lines(path)? {
        let id = record_id(line, &map)?;
        let v = map
            .get("target")
            .and_then(numeric_dim)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Parse {
                line,
                msg: "field \"target\" must be a number or numeric array".into(),
            })?;
        let table = targets.get_or_insert_with(|| TargetVector::new(v.len()));
        table.insert(id, v).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
    }
    targets.ok_or_else(|| Error::Format(format!("{} holds no targets", path.display())))
}

/// Ids present in at least one input but missing from a given source.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DropReport {
    pub embeddings: Vec<String>,
    pub responses: Vec<String>,
    pub targets: Vec<String>,
    pub importance: Option<Vec<String>>,
}

impl DropReport {
    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
            && self.responses.is_empty()
            && self.targets.is_empty()
            && self.importance.as_ref().is_none_or(Vec::is_empty)
    }
}

/// All inputs restricted to their shared ids, in the embeddings' order.
#[derive(Debug, Clone)]
pub struct AlignedDataset {
    pub embeddings: EmbeddingMatrix,
    pub responses: ResponseTable,
    pub targets: TargetVector,
    pub importance: Option<ImportanceMatrix>,
    pub drops: DropReport,
}

impl PartialEq for AlignedDataset {
    /// Compares the data only; the drop report describes how it was built.
    fn eq(&self, other: &Self) -> bool {
        self.embeddings == other.embeddings
            && self.responses == other.responses
            && self.targets == other.targets
            && self.importance == other.importance
    }
}

pub fn align(
    embeddings: &EmbeddingMatrix,
    responses: &ResponseTable,
    targets: &TargetVector,
    importance: Option<&ImportanceMatrix>,
) -> Result<AlignedDataset> {
    if responses.t() != targets.t() {
        return Err(Error::Dimension {
            expected: targets.t(),
            found: responses.t(),
            context: "response vs target dimensionality".into(),
        });
    }
    if let Some(imp) = importance {
        if imp.d() != embeddings.d() {
            return Err(Error::Dimension {
                expected: embeddings.d(),
                found: imp.d(),
                context: "importance vs embedding feature count".into(),
            });
        }
    }

    let resp_ids: HashSet<&str> = responses.ids().iter().map(String::as_str).collect();
    let tgt_ids: HashSet<&str> = targets.ids().iter().map(String::as_str).collect();
    let emb_ids: HashSet<&str> = embeddings.ids().iter().map(String::as_str).collect();
    let imp_index: Option<HashMap<&str, usize>> = importance.map(|imp| {
        imp.ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    });

    let mut rows = Vec::new();
    let mut imp_rows = Vec::new();
    for (i, id) in embeddings.ids().iter().enumerate() {
        let id = id.as_str();
        if !resp_ids.contains(id) || !tgt_ids.contains(id) {
            continue;
        }
        if let Some(index) = &imp_index {
            match index.get(id) {
                Some(&j) => imp_rows.push(j),
                None => continue,
            }
        }
        rows.push(i);
    }
    if rows.is_empty() {
        return Err(Error::EmptyIntersection);
    }

    let mut union: Vec<&str> = emb_ids
        .iter()
        .chain(&resp_ids)
        .chain(&tgt_ids)
        .copied()
        .collect();
    if let Some(index) = &imp_index {
        union.extend(index.keys().copied());
    }
    union.sort_unstable();
    union.dedup();
    let missing = |set: &dyn Fn(&str) -> bool| -> Vec<String> {
        union.iter().filter(|id| !set(id)).map(|s| s.to_string()).collect()
    };
    let drops = DropReport {
        embeddings: missing(&|id| emb_ids.contains(id)),
        responses: missing(&|id| resp_ids.contains(id)),
        targets: missing(&|id| tgt_ids.contains(id)),
        importance: imp_index
            .as_ref()
            .map(|index| missing(&|id| index.contains_key(id))),
    };

    let emb = EmbeddingMatrix {
        matrix: embeddings.matrix.select_rows(&rows),
        meta: embeddings.meta.clone(),
    };
    let ids = emb.ids().to_vec();
    Ok(AlignedDataset {
        responses: responses.select(&ids),
        targets: targets.select(&ids),
        importance: importance.map(|imp| ImportanceMatrix {
            matrix: imp.matrix.select_rows(&imp_rows),
        }),
        embeddings: emb,
        drops,
    })
}

impl AlignedDataset {
    pub fn n(&self) -> usize {
        self.embeddings.n()
    }

    pub fn d(&self) -> usize {
        self.embeddings.d()
    }

    pub fn t(&self) -> usize {
        self.targets.t()
    }

    pub fn ids(&self) -> &[String] {
        self.embeddings.ids()
    }

    pub fn features(&self) -> DMatrix<f64> {
        self.embeddings.matrix.to_dmatrix()
    }

    pub fn features_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        self.embeddings.matrix.to_dmatrix_rows(rows)
    }

    pub fn target_matrix(&self) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.n()).collect();
        self.target_rows(&all)
    }

    pub fn target_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        let ids = self.ids();
        DMatrix::from_fn(rows.len(), self.t(), |i, j| {
            self.targets.get(&ids[rows[i]]).expect("aligned target")[j]
        })
    }

    /// Row index of every id, for mapping scored ids back into the dataset.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Dataset restricted to `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> AlignedDataset {
        let embeddings = EmbeddingMatrix {
            matrix: self.embeddings.matrix.select_rows(rows),
            meta: self.embeddings.meta.clone(),
        };
        let ids = embeddings.ids().to_vec();
        AlignedDataset {
            responses: self.responses.select(&ids),
            targets: self.targets.select(&ids),
            importance: self.importance.as_ref().map(|imp| ImportanceMatrix {
                matrix: imp.matrix.select_rows(rows),
            }),
            embeddings,
            drops: DropReport::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn emb(names: &[&str]) -> EmbeddingMatrix {
        let data = (0..names.len() * 2).map(|v| v as f32).collect();
        EmbeddingMatrix::new(ids(names), 2, data).unwrap()
    }

    fn responses(names: &[&str]) -> ResponseTable {
        let mut r = ResponseTable::new(1);
        for n in names {
            r.insert(*n, vec![vec![1.0], vec![2.0]]).unwrap();
        }
        r
    }

    fn targets(names: &[&str]) -> TargetVector {
        let mut t = TargetVector::new(1);
        for n in names {
            t.insert(*n, vec![3.0]).unwrap();
        }
        t
    }

    #[test]
    fn embedding_bytes_match_layout() {
        let m = EmbeddingMatrix::new(ids(&["a", "b"]), 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a\nb");
        assert_eq!(f32::from_le_bytes(bytes[19..23].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 19 + 24);
        let back = EmbeddingMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.matrix.row(1), &[4., 5., 6.]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic_names_the_magic() {
        let mut bytes = emb(&["a"]).to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = EmbeddingMatrix::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("XXXX"));
        // Importance files are not embeddings.
        let imp = ImportanceMatrix::new(ids(&["a"]), 1, vec![0.5]).unwrap();
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&imp.to_bytes()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_and_trailing_payloads_rejected() {
        let bytes = emb(&["a", "b"]).to_bytes();
        let err = EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes[..10]),
            Err(Error::Truncated(_))
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&longer),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_reports_first_offender() {
        let m = EmbeddingMatrix::new(ids(&["a", "b"]), 2, vec![0., 1., 2., 3.]).unwrap();
        let mut bytes = m.to_bytes();
        let at = bytes.len() - 8; // row 1, col 0
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        match EmbeddingMatrix::from_bytes(&bytes).unwrap_err() {
            Error::NonFinite { index, row, col } => assert_eq!((index, row, col), (2, 1, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected_in_matrix() {
        let err = EmbeddingMatrix::new(ids(&["a", "a"]), 1, vec![0., 1.]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn parse_numeric_examples() {
        assert_eq!(parse_numeric_response("He died in 1799.", 1), Some(vec![1799.0]));
        assert_eq!(
            parse_numeric_response("40.7128, -74.0060", 2),
            Some(vec![40.7128, -74.0060])
        );
        assert_eq!(parse_numeric_response("I don't know", 1), None);
        assert_eq!(parse_numeric_response("only 12", 2), None);
        assert_eq!(
            parse_numeric_response("1799-1800", 2),
            Some(vec![1799.0, 1800.0])
        );
        assert_eq!(parse_numeric_response("about -.5 or so", 1), Some(vec![-0.5]));
        assert_eq!(parse_numeric_response("year 1799. Next", 1), Some(vec![1799.0]));
    }

    #[test]
    fn align_drops_and_reports() {
        let d = align(&emb(&["a", "b", "c"]), &responses(&["a", "b"]), &targets(&["a", "b", "c"]), None)
            .unwrap();
        assert_eq!(d.ids(), &ids(&["a", "b"])[..]);
        assert!(d.drops.targets.is_empty());
        assert!(d.drops.embeddings.is_empty());
        assert_eq!(d.drops.responses, ids(&["c"]));
        assert_eq!(d.embeddings.matrix.row(1), &[2.0, 3.0]);
    }

    #[test]
    fn align_without_gaps_has_no_drops() {
        let d = align(&emb(&["a", "b"]), &responses(&["b", "a"]), &targets(&["a", "b"]), None).unwrap();
        assert_eq!(d.ids(), &ids(&["a", "b"])[..]);
        assert!(d.drops.is_empty());
        assert_eq!(d.responses.ids(), &ids(&["a", "b"])[..]);
    }

    #[test]
    fn align_disjoint_is_error() {
        let err = align(&emb(&["a"]), &responses(&["b"]), &targets(&["c"]), None).unwrap_err();
        assert!(matches!(err, Error::EmptyIntersection));
    }

    #[test]
    fn align_is_idempotent() {
        let imp = ImportanceMatrix::new(ids(&["c", "a", "b"]), 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let once = align(&emb(&["a", "b", "c"]), &responses(&["a", "c"]), &targets(&["a", "b", "c"]), Some(&imp))
            .unwrap();
        let twice = align(
            &once.embeddings,
            &once.responses,
            &once.targets,
            once.importance.as_ref(),
        )
        .unwrap();
        assert_eq!(once, twice);
        assert!(twice.drops.is_empty());
        // importance rows follow the embedding order
        assert_eq!(once.importance.as_ref().unwrap().matrix.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn align_rejects_dimension_mismatch() {
        let mut t2 = TargetVector::new(2);
        t2.insert("a", vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            align(&emb(&["a"]), &responses(&["a"]), &t2, None),
            Err(Error::Dimension { .. })
        ));
    }
}
