//! Columnar metadata file (`.lfcol`) with per-column predicate scans.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LFCOL001"                     8-byte magic
//! column chunk 0 .. column chunk k-1
//! footer                         UTF-8 JSON: {"version", "rows", "columns": [{name, type, offset, length}]}
//! footer length                  u64
//! "LFCOL001"                     8-byte magic
//! ```
//!
//! Every chunk starts with a validity bitmap of `ceil(rows / 8)` bytes (bit
//! `i % 8` of byte `i / 8` set when row `i` is non-null), followed by:
//! `i64`/`f64` → `rows` 8-byte values; `bool` → a second bitmap;
//! `string`/`json` → `rows + 1` u64 offsets then the concatenated UTF-8;
//! `struct`/`null` → nothing. Nested objects flatten to dotted column names;
//! a `struct` column records whether the object itself was present.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"LFCOL001";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Null,
    Bool,
    I64,
    F64,
    String,
    Json,
    Struct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footer {
    pub version: u32,
    pub rows: usize,
    pub columns: Vec<ColumnMeta>,
}

#[derive(Debug, thiserror::Error)]
pub enum ColumnarError {
    #[error("row {row}: schema drift at field {field:?}: {message}")]
    SchemaDrift { row: usize, field: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("bad predicate: {0}")]
    Predicate(String),
}

fn leaf_type(v: &Value) -> ColumnType {
    match v {
        Value::Null => ColumnType::Null,
        Value::Bool(_) => ColumnType::Bool,
        Value::Number(n) if n.is_i64() => ColumnType::I64,
        Value::Number(_) => ColumnType::F64,
        Value::String(_) => ColumnType::String,
        Value::Array(_) => ColumnType::Json,
        Value::Object(_) => ColumnType::Struct,
    }
}

/// Schema tree inferred over all rows.
#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(ColumnType),
    Struct(Vec<(String, Node)>),
}

fn drift(row: usize, field: &str, message: String) -> ColumnarError {
    ColumnarError::SchemaDrift {
        row,
        field: field.to_string(),
        message,
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn merge_fields(row: usize, prefix: &str, fields: &mut Vec<(String, Node)>, obj: &Map<String, Value>, first: bool) -> Result<(), ColumnarError> {
    for k in obj.keys() {
        if k.contains('.') || k.is_empty() {
            return Err(drift(row, &join(prefix, k), "field names must be non-empty and free of '.'".into()));
        }
        if !first && !fields.iter().any(|(n, _)| n == k) {
            return Err(drift(row, &join(prefix, k), "field not present in earlier rows".into()));
        }
    }
    if first {
        for (k, v) in obj {
            fields.push((k.clone(), Node::Leaf(ColumnType::Null)));
            let slot = &mut fields.last_mut().expect("pushed").1;
            merge(row, &join(prefix, k), slot, v)?;
        }
        return Ok(());
    }
    for (k, slot) in fields.iter_mut() {
        let name = join(prefix, k);
        let v = obj.get(k).ok_or_else(|| drift(row, &name, "field missing".into()))?;
        merge(row, &name, slot, v)?;
    }
    Ok(())
}

fn merge(row: usize, name: &str, node: &mut Node, v: &Value) -> Result<(), ColumnarError> {
    match (node, v) {
        (_, Value::Null) => Ok(()),
        (node @ Node::Leaf(ColumnType::Null), Value::Object(obj)) => {
            let mut fields = Vec::new();
            merge_fields(row, name, &mut fields, obj, true)?;
            *node = Node::Struct(fields);
            Ok(())
        }
        (Node::Struct(fields), Value::Object(obj)) => merge_fields(row, name, fields, obj, false),
        (Node::Struct(_), other) => Err(drift(row, name, format!("expected an object, found {:?}", leaf_type(other)))),
        (Node::Leaf(t), Value::Object(_)) => Err(drift(row, name, format!("expected {t:?}, found an object"))),
        (Node::Leaf(t), v) => {
            let found = leaf_type(v);
            *t = match (*t, found) {
                (ColumnType::Null, f) => f,
                (a, b) if a == b => a,
                (ColumnType::I64, ColumnType::F64) | (ColumnType::F64, ColumnType::I64) => ColumnType::F64,
                (a, b) => return Err(drift(row, name, format!("expected {a:?}, found {b:?}"))),
            };
            Ok(())
        }
    }
}

fn infer(rows: &[&Map<String, Value>]) -> Result<Vec<(String, Node)>, ColumnarError> {
    let mut fields = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        merge_fields(i, "", &mut fields, r, i == 0)?;
    }
    Ok(fields)
}

fn columns_of(prefix: &str, fields: &[(String, Node)], out: &mut Vec<(String, ColumnType)>) {
    for (k, node) in fields {
        let name = join(prefix, k);
        match node {
            Node::Leaf(t) => out.push((name, *t)),
            Node::Struct(children) => {
                out.push((name.clone(), ColumnType::Struct));
                columns_of(&name, children, out);
            }
        }
    }
}

fn lookup<'a>(row: &'a Map<String, Value>, name: &str) -> &'a Value {
    let mut parts = name.split('.');
    let mut cur = row.get(parts.next().unwrap_or("")).unwrap_or(&Value::Null);
    for p in parts {
        cur = cur.get(p).unwrap_or(&Value::Null);
    }
    cur
}

fn bitmap(n: usize, bit: impl Fn(usize) -> bool) -> Vec<u8> {
    let mut b = vec![0u8; n.div_ceil(8)];
    for i in 0..n {
        if bit(i) {
            b[i / 8] |= 1 << (i % 8);
        }
    }
    b
}

fn get_bit(b: &[u8], i: usize) -> bool {
    b[i / 8] & (1 << (i % 8)) != 0
}

fn encode_column(values: &[&Value], ty: ColumnType) -> Vec<u8> {
    let n = values.len();
    let mut out = bitmap(n, |i| !values[i].is_null());
    match ty {
        ColumnType::Null | ColumnType::Struct => {}
        ColumnType::Bool => out.extend(bitmap(n, |i| values[i].as_bool() == Some(true))),
        ColumnType::I64 => {
            for v in values {
                out.extend(v.as_i64().unwrap_or(0).to_le_bytes());
            }
        }
        ColumnType::F64 => {
            for v in values {
                out.extend(v.as_f64().unwrap_or(0.0).to_le_bytes());
            }
        }
        ColumnType::String | ColumnType::Json => {
            let texts: Vec<String> = values
                .iter()
                .map(|v| match (ty, v) {
                    (_, Value::Null) => String::new(),
                    (ColumnType::String, Value::String(s)) => s.clone(),
                    (_, v) => serde_json::to_string(v).expect("json value serializes"),
                })
                .collect();
            let mut off = 0u64;
            out.extend(off.to_le_bytes());
            for t in &texts {
                off += t.len() as u64;
                out.extend(off.to_le_bytes());
            }
            for t in &texts {
                out.extend(t.as_bytes());
            }
        }
    }
    out
}

/// Encodes rows into the columnar byte format. Fails on schema drift.
pub fn encode_columnar(rows: &[&Map<String, Value>]) -> Result<Vec<u8>, ColumnarError> {
    let schema = infer(rows)?;
    let mut cols = Vec::new();
    columns_of("", &schema, &mut cols);
    let mut out = MAGIC.to_vec();
    let mut metas = Vec::with_capacity(cols.len());
    for (name, ty) in cols {
        let values: Vec<&Value> = rows.iter().map(|r| lookup(r, &name)).collect();
        let chunk = encode_column(&values, ty);
        metas.push(ColumnMeta {
            name,
            ty,
            offset: out.len() as u64,
            length: chunk.len() as u64,
        });
        out.extend(chunk);
    }
    let footer = serde_json::to_vec(&Footer {
        version: VERSION,
        rows: rows.len(),
        columns: metas,
    })
    .expect("footer serializes");
    out.extend(&footer);
    out.extend((footer.len() as u64).to_le_bytes());
    out.extend(MAGIC);
    Ok(out)
}

pub fn write_columnar(rows: &[&Map<String, Value>], path: &Path) -> Result<Footer, ColumnarError> {
    let bytes = encode_columnar(rows)?;
    write_atomic(path, &bytes).map_err(|source| ColumnarError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_footer(&mut io::Cursor::new(&bytes), path)
}

fn read_footer<R: Read + Seek>(r: &mut R, path: &Path) -> Result<Footer, ColumnarError> {
    let bad = |message: &str| ColumnarError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let io_err = |source| ColumnarError::Io {
        path: path.to_path_buf(),
        source,
    };
    let len = r.seek(SeekFrom::End(0)).map_err(io_err)?;
    if len < 24 {
        return Err(bad("file too short"));
    }
    let mut head = [0u8; 8];
    r.seek(SeekFrom::Start(0)).map_err(io_err)?;
    r.read_exact(&mut head).map_err(io_err)?;
    let mut tail = [0u8; 16];
    r.seek(SeekFrom::End(-16)).map_err(io_err)?;
    r.read_exact(&mut tail).map_err(io_err)?;
    if &head != MAGIC || &tail[8..] != MAGIC {
        return Err(bad("bad magic"));
    }
    let flen = u64::from_le_bytes(tail[..8].try_into().expect("8 bytes"));
    if flen > len - 24 {
        return Err(bad("footer length out of range"));
    }
    r.seek(SeekFrom::Start(len - 16 - flen)).map_err(io_err)?;
    let mut fbytes = vec![0u8; flen as usize];
    r.read_exact(&mut fbytes).map_err(io_err)?;
    let footer: Footer = serde_json::from_slice(&fbytes).map_err(|e| bad(&format!("footer: {e}")))?;
    if footer.version != VERSION {
        return Err(bad(&format!("unsupported version {}", footer.version)));
    }
    for c in &footer.columns {
        if c.offset < 8 || c.offset + c.length > len - 16 - flen {
            return Err(bad(&format!("column {:?} out of range", c.name)));
        }
    }
    Ok(footer)
}

/// Decoded values of one column.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub ty: ColumnType,
    valid: Vec<u8>,
    data: ColumnData,
}

#[derive(Debug, Clone, PartialEq)]
enum ColumnData {
    None,
    Bools(Vec<u8>),
    I64(Vec<i64>),
    F64(Vec<f64>),
    Text { offsets: Vec<u64>, bytes: Vec<u8> },
}

impl Column {
    pub fn is_null(&self, row: usize) -> bool {
        !get_bit(&self.valid, row)
    }

    pub fn value(&self, row: usize) -> Value {
        if self.is_null(row) {
            return Value::Null;
        }
        match &self.data {
            ColumnData::None => Value::Bool(true),
            ColumnData::Bools(b) => Value::Bool(get_bit(b, row)),
            ColumnData::I64(v) => Value::from(v[row]),
            ColumnData::F64(v) => Number::from_f64(v[row]).map(Value::Number).unwrap_or(Value::Null),
            ColumnData::Text { .. } => {
                let s = self.text(row).unwrap_or_default();
                if self.ty == ColumnType::Json {
                    serde_json::from_str(s).unwrap_or(Value::Null)
                } else {
                    Value::String(s.to_string())
                }
            }
        }
    }

    fn text(&self, row: usize) -> Option<&str> {
        match &self.data {
            ColumnData::Text { offsets, bytes } if !self.is_null(row) => {
                std::str::from_utf8(&bytes[offsets[row] as usize..offsets[row + 1] as usize]).ok()
            }
            _ => None,
        }
    }
}

fn decode_column(chunk: &[u8], ty: ColumnType, rows: usize) -> Option<Column> {
    let vlen = rows.div_ceil(8);
    let valid = chunk.get(..vlen)?.to_vec();
    let rest = &chunk[vlen..];
    let fixed = |rest: &[u8]| -> Option<Vec<[u8; 8]>> {
        if rest.len() != rows * 8 {
            return None;
        }
        Some(rest.chunks_exact(8).map(|c| c.try_into().expect("8 bytes")).collect())
    };
    let data = match ty {
        ColumnType::Null | ColumnType::Struct => ColumnData::None,
        ColumnType::Bool => ColumnData::Bools(rest.get(..vlen)?.to_vec()),
        ColumnType::I64 => ColumnData::I64(fixed(rest)?.into_iter().map(i64::from_le_bytes).collect()),
        ColumnType::F64 => ColumnData::F64(fixed(rest)?.into_iter().map(f64::from_le_bytes).collect()),
        ColumnType::String | ColumnType::Json => {
            let olen = (rows + 1) * 8;
            let offsets: Vec<u64> = rest
                .get(..olen)?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let bytes = rest[olen..].to_vec();
            if offsets.windows(2).any(|w| w[0] > w[1]) || *offsets.last()? as usize != bytes.len() {
                return None;
            }
            ColumnData::Text { offsets, bytes }
        }
    };
    Some(Column { ty, valid, data })
}

/// Random-access reader; columns are read from disk on first use only.
pub struct ColumnarReader {
    path: PathBuf,
    file: File,
    footer: Footer,
    cache: BTreeMap<String, Column>,
    columns_read: usize,
}

impl ColumnarReader {
    pub fn open(path: &Path) -> Result<Self, ColumnarError> {
        let mut file = File::open(path).map_err(|source| ColumnarError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let footer = read_footer(&mut file, path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            footer,
            cache: BTreeMap::new(),
            columns_read: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.footer.rows
    }

    pub fn footer(&self) -> &Footer {
        &self.footer
    }

    /// Number of column chunks fetched from disk so far.
    pub fn columns_read(&self) -> usize {
        self.columns_read
    }

    pub fn column(&mut self, name: &str) -> Result<&Column, ColumnarError> {
        if !self.cache.contains_key(name) {
            let meta = self
                .footer
                .columns
                .iter()
                .find(|c| c.name == name)
                .ok_or_else(|| ColumnarError::UnknownColumn(name.to_string()))?
                .clone();
            let io_err = |source| ColumnarError::Io {
                path: self.path.clone(),
                source,
            };
            self.file.seek(SeekFrom::Start(meta.offset)).map_err(io_err)?;
            let mut chunk = vec![0u8; meta.length as usize];
            self.file.read_exact(&mut chunk).map_err(io_err)?;
            let col = decode_column(&chunk, meta.ty, self.footer.rows).ok_or_else(|| ColumnarError::Format {
                path: self.path.clone(),
                message: format!("column {name:?} is malformed"),
            })?;
            self.columns_read += 1;
            self.cache.insert(name.to_string(), col);
        }
        Ok(&self.cache[name])
    }

    /// Row indexes matching `predicate`, ascending.
    pub fn scan(&mut self, predicate: &Predicate) -> Result<Vec<usize>, ColumnarError> {
        for name in predicate.columns() {
            self.column(name)?;
        }
        Ok((0..self.rows()).filter(|&i| predicate.eval(&self.cache, i)).collect())
    }

    /// Reassembles rows as nested objects. `fields` limits the output to the
    /// given fields (dotted names select nested ones); `None` returns every
    /// field.
    pub fn read_rows(&mut self, rows: &[usize], fields: Option<&[&str]>) -> Result<Vec<Map<String, Value>>, ColumnarError> {
        let wanted: Vec<ColumnMeta> = self
            .footer
            .columns
            .iter()
            .filter(|c| fields.is_none_or(|f| f.iter().any(|f| selects(f, &c.name))))
            .cloned()
            .collect();
        for c in &wanted {
            self.column(&c.name)?;
        }
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            let mut obj = Map::new();
            for c in &wanted {
                let col = &self.cache[&c.name];
                let parts: Vec<&str> = c.name.split('.').collect();
                let v = if c.ty == ColumnType::Struct {
                    if col.is_null(r) {
                        Value::Null
                    } else {
                        Value::Object(Map::new())
                    }
                } else {
                    col.value(r)
                };
                insert_at(&mut obj, &parts, v);
            }
            out.push(obj);
        }
        Ok(out)
    }
}

/// Whether column `name` is needed to output field `f`: the field itself,
/// anything below it, or a parent object on the way to it.
fn selects(f: &str, name: &str) -> bool {
    let below = |a: &str, b: &str| a.len() > b.len() && a.starts_with(b) && a.as_bytes()[b.len()] == b'.';
    f == name || below(name, f) || below(f, name)
}

/// Places `v` at a dotted path; skipped when a parent object is null.
fn insert_at(obj: &mut Map<String, Value>, path: &[&str], v: Value) {
    match path {
        [] => {}
        [last] => {
            obj.insert((*last).to_string(), v);
        }
        [head, rest @ ..] => {
            if let Some(Value::Object(m)) = obj.get_mut(*head) {
                insert_at(m, rest, v);
            }
        }
    }
}

/// Row filter over column values. Comparisons never match null cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Eq(String, Value),
    Ne(String, Value),
    Lt(String, Value),
    Le(String, Value),
    Gt(String, Value),
    Ge(String, Value),
    IsNull(String),
    NotNull(String),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

fn compare(col: &Column, row: usize, lit: &Value) -> Option<Ordering> {
    if col.is_null(row) {
        return None;
    }
    match (&col.data, lit) {
        (ColumnData::I64(v), Value::Number(n)) => match n.as_i64() {
            Some(x) => Some(v[row].cmp(&x)),
            None => (v[row] as f64).partial_cmp(&n.as_f64()?),
        },
        (ColumnData::F64(v), Value::Number(n)) => v[row].partial_cmp(&n.as_f64()?),
        (ColumnData::Bools(b), Value::Bool(x)) => Some(get_bit(b, row).cmp(x)),
        (ColumnData::Text { .. }, Value::String(s)) if col.ty == ColumnType::String => Some(col.text(row)?.cmp(s.as_str())),
        _ => None,
    }
}

/// Equality also covers JSON cells, which have no ordering.
fn equals(col: &Column, row: usize, lit: &Value) -> Option<bool> {
    if col.is_null(row) {
        return None;
    }
    if col.ty == ColumnType::Json {
        return Some(col.value(row) == *lit);
    }
    compare(col, row, lit).map(|o| o == Ordering::Equal)
}

impl Predicate {
    /// Columns the predicate reads.
    pub fn columns(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Predicate::Eq(c, _)
            | Predicate::Ne(c, _)
            | Predicate::Lt(c, _)
            | Predicate::Le(c, _)
            | Predicate::Gt(c, _)
            | Predicate::Ge(c, _)
            | Predicate::IsNull(c)
            | Predicate::NotNull(c) => out.push(c),
            Predicate::And(ps) | Predicate::Or(ps) => ps.iter().for_each(|p| p.collect(out)),
            Predicate::Not(p) => p.collect(out),
        }
    }

    fn eval(&self, cols: &BTreeMap<String, Column>, row: usize) -> bool {
        let cmp = |c: &String, v: &Value| compare(&cols[c.as_str()], row, v);
        match self {
            Predicate::Eq(c, v) => equals(&cols[c.as_str()], row, v) == Some(true),
            Predicate::Ne(c, v) => equals(&cols[c.as_str()], row, v) == Some(false),
            Predicate::Lt(c, v) => cmp(c, v) == Some(Ordering::Less),
            Predicate::Le(c, v) => cmp(c, v).is_some_and(|o| o != Ordering::Greater),
            Predicate::Gt(c, v) => cmp(c, v) == Some(Ordering::Greater),
            Predicate::Ge(c, v) => cmp(c, v).is_some_and(|o| o != Ordering::Less),
            Predicate::IsNull(c) => cols[c.as_str()].is_null(row),
            Predicate::NotNull(c) => !cols[c.as_str()].is_null(row),
            Predicate::And(ps) => ps.iter().all(|p| p.eval(cols, row)),
            Predicate::Or(ps) => ps.iter().any(|p| p.eval(cols, row)),
            Predicate::Not(p) => !p.eval(cols, row),
        }
    }

    /// Parses `field op value [and field op value ...]` with ops
    /// `= != < <= > >=` and the forms `field is null`, `field is not null`.
    /// Values are read as JSON when they parse, `'single quoted'` text as a
    /// string, anything else as a bare string.
    pub fn parse(text: &str) -> Result<Self, ColumnarError> {
        let mut terms = Vec::new();
        for clause in text.split(" and ") {
            let clause = clause.trim();
            if let Some(field) = clause.strip_suffix(" is not null") {
                terms.push(Predicate::NotNull(field.trim().to_string()));
                continue;
            }
            if let Some(field) = clause.strip_suffix(" is null") {
                terms.push(Predicate::IsNull(field.trim().to_string()));
                continue;
            }
            let ops = ["!=", "<=", ">=", "==", "=", "<", ">"];
            let (pos, op) = ops
                .iter()
                .filter_map(|op| clause.find(op).map(|p| (p, *op)))
                .min_by_key(|(p, op)| (*p, usize::MAX - op.len()))
                .ok_or_else(|| ColumnarError::Predicate(format!("no operator in {clause:?}")))?;
            let field = clause[..pos].trim().to_string();
            let raw = clause[pos + op.len()..].trim();
            if field.is_empty() || raw.is_empty() {
                return Err(ColumnarError::Predicate(format!("incomplete clause {clause:?}")));
            }
            let value = match raw.strip_prefix('\'').and_then(|r| r.strip_suffix('\'')) {
                Some(quoted) => Value::String(quoted.to_string()),
                None => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
            };
            terms.push(match op {
                "=" | "==" => Predicate::Eq(field, value),
                "!=" => Predicate::Ne(field, value),
                "<" => Predicate::Lt(field, value),
                "<=" => Predicate::Le(field, value),
                ">" => Predicate::Gt(field, value),
                _ => Predicate::Ge(field, value),
            });
        }
        Ok(if terms.len() == 1 { terms.pop().expect("one term") } else { Predicate::And(terms) })
    }
}
