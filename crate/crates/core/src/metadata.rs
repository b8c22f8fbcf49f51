//! Building contextual descriptions: loading, imputation and numeric encoding.
//!
//! A description table is a delimited file with one row per building and a
//! header naming the id column plus every attribute declared by a [`Schema`].
//! Two encoding pipelines are provided: label encoding (one integer code per
//! categorical column) and one-hot encoding (one indicator column per distinct
//! value). Both are usually followed by per-column min-max scaling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ID_COLUMN: &str = "building_id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    /// Real-valued attribute, optionally bounded below.
    Numeric { min: Option<f64> },
    Categorical,
    /// Categorical with a natural order. When `levels` is absent the order is
    /// lexicographic.
    Ordered { levels: Option<Vec<String>> },
}

impl ColumnKind {
    pub fn is_numeric(&self) -> bool {
        matches!(self, ColumnKind::Numeric { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// Declares the id column and the kind of every attribute column, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub id_column: String,
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Self {
        Schema {
            id_column: DEFAULT_ID_COLUMN.to_string(),
            columns,
        }
    }

    /// Parses the flat key-value schema format:
    ///
    /// ```text
    /// # comment
    /// @id = building_id
    /// occupants = numeric min=1
    /// house_type = categorical
    /// construction_year = ordered pre-1850|1850-1899|1900-1929
    /// ```
    pub fn parse(text: &str) -> Result<Schema> {
        let mut id_column = DEFAULT_ID_COLUMN.to_string();
        let mut columns: Vec<Column> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, spec) = line.split_once('=').ok_or_else(|| {
                Error::Schema(format!("line {}: expected `name = kind`", lineno + 1))
            })?;
            let key = key.trim();
            let spec = spec.trim();
            if key == "@id" {
                id_column = spec.to_string();
                continue;
            }
            let mut parts = spec.split_whitespace();
            let kind_word = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            let kind = match kind_word {
                "numeric" => {
                    let mut min = None;
                    for opt in rest {
                        match opt.split_once('=') {
                            Some(("min", v)) => {
                                min = Some(v.parse::<f64>().map_err(|_| {
                                    Error::Schema(format!("line {}: bad min `{v}`", lineno + 1))
                                })?)
                            }
                            _ => {
                                return Err(Error::Schema(format!(
                                    "line {}: unknown numeric option `{opt}`",
                                    lineno + 1
                                )))
                            }
                        }
                    }
                    ColumnKind::Numeric { min }
                }
                "categorical" => ColumnKind::Categorical,
                "ordered" => {
                    let levels = if rest.is_empty() {
                        None
                    } else {
                        Some(
                            rest.join(" ")
                                .split('|')
                                .map(|s| s.trim().to_string())
                                .collect(),
                        )
                    };
                    ColumnKind::Ordered { levels }
                }
                other => {
                    return Err(Error::Schema(format!(
                        "line {}: unknown column kind `{other}` for `{key}`",
                        lineno + 1
                    )))
                }
            };
            if columns.iter().any(|c| c.name == key) {
                return Err(Error::Schema(format!("column `{key}` declared twice")));
            }
            columns.push(Column {
                name: key.to_string(),
                kind,
            });
        }
        if columns.is_empty() {
            return Err(Error::Schema("schema declares no columns".into()));
        }
        Ok(Schema { id_column, columns })
    }

    pub fn load(path: &Path) -> Result<Schema> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Schema::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("@id = {}\n", self.id_column);
        for c in &self.columns {
            let kind = match &c.kind {
                ColumnKind::Numeric { min: None } => "numeric".to_string(),
                ColumnKind::Numeric { min: Some(m) } => format!("numeric min={m}"),
                ColumnKind::Categorical => "categorical".to_string(),
                ColumnKind::Ordered { levels: None } => "ordered".to_string(),
                ColumnKind::Ordered { levels: Some(l) } => format!("ordered {}", l.join("|")),
            };
            out.push_str(&format!("{} = {}\n", c.name, kind));
        }
        out
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Parses one cell according to the column kind. Returns `None` when the
    /// cell is present but cannot be interpreted.
    fn parse_cell(&self, col: usize, cell: &str) -> Option<Value> {
        let cell = cell.trim();
        if cell.is_empty() || cell == "NA" {
            return Some(Value::Missing);
        }
        match &self.columns[col].kind {
            ColumnKind::Numeric { min } => {
                let v: f64 = cell.parse().ok()?;
                if !v.is_finite() || min.is_some_and(|m| v < m) {
                    return None;
                }
                Some(Value::Number(v))
            }
            ColumnKind::Categorical | ColumnKind::Ordered { .. } => {
                Some(Value::Label(cell.to_string()))
            }
        }
    }

    /// Orders two non-missing values of a column canonically: numeric order
    /// for numbers, declared level order for ordered columns with levels,
    /// lexicographic otherwise.
    pub fn canonical_cmp(&self, col: usize, a: &Value, b: &Value) -> Ordering {
        match (a, b) {
            (Value::Number(x), Value::Number(y)) => x.total_cmp(y),
            (Value::Label(x), Value::Label(y)) => match &self.columns[col].kind {
                ColumnKind::Ordered {
                    levels: Some(levels),
                } => {
                    let rank = |s: &str| levels.iter().position(|l| l == s).unwrap_or(usize::MAX);
                    rank(x).cmp(&rank(y)).then_with(|| x.cmp(y))
                }
                _ => x.cmp(y),
            },
            (Value::Missing, Value::Missing) => Ordering::Equal,
            (Value::Missing, _) => Ordering::Greater,
            (_, Value::Missing) => Ordering::Less,
            (Value::Number(_), Value::Label(_)) => Ordering::Less,
            (Value::Label(_), Value::Number(_)) => Ordering::Greater,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Missing,
    Number(f64),
    Label(String),
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Missing => f.write_str("NA"),
            Value::Number(v) => write!(f, "{v}"),
            Value::Label(s) => f.write_str(s),
        }
    }
}

/// One building's contextual record. `values` is aligned with the schema's
/// columns; attributes outside the schema are kept in `extras` verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingDescription {
    pub building_id: String,
    pub values: Vec<Value>,
    #[serde(default)]
    pub extras: BTreeMap<String, String>,
}

impl BuildingDescription {
    /// Parses a key-value document such as
    /// `occupants=2, house_type=detached, bedrooms=3`. Separators may be
    /// commas, semicolons or newlines. Keys missing from the document become
    /// missing values. With `strict`, unknown keys are rejected by name;
    /// otherwise they are kept as extras.
    pub fn parse_kv(id: &str, doc: &str, schema: &Schema, strict: bool) -> Result<Self> {
        let mut values = vec![Value::Missing; schema.columns.len()];
        let mut extras = BTreeMap::new();
        let mut unknown = Vec::new();
        for part in doc.split([',', ';', '\n']) {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (k, v) = part
                .split_once('=')
                .or_else(|| part.split_once(':'))
                .ok_or_else(|| Error::invalid(format!("malformed pair `{part}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match schema.column_index(k) {
                Some(col) => {
                    values[col] = schema.parse_cell(col, v).ok_or_else(|| {
                        Error::invalid(format!("cannot parse `{v}` for attribute `{k}`"))
                    })?;
                }
                None if strict => unknown.push(k.to_string()),
                None => {
                    extras.insert(k.to_string(), v.to_string());
                }
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Schema(format!(
                "unknown attribute(s): {}",
                unknown.join(", ")
            )));
        }
        Ok(BuildingDescription {
            building_id: id.to_string(),
            values,
            extras,
        })
    }

    pub fn to_kv(&self, schema: &Schema) -> String {
        schema
            .columns
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| !v.is_missing())
            .map(|(c, v)| format!("{}={}", c.name, v))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionTable {
    pub schema: Schema,
    pub rows: Vec<BuildingDescription>,
    /// Number of cells that could not be parsed and were recorded as missing.
    pub warnings: usize,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { delimiter: b',' }
    }
}

impl DescriptionTable {
    pub fn new(schema: Schema, rows: Vec<BuildingDescription>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if r.values.len() != schema.columns.len() {
                return Err(Error::Schema(format!(
                    "building `{}` has {} values, schema has {} columns",
                    r.building_id,
                    r.values.len(),
                    schema.columns.len()
                )));
            }
            if !seen.insert(r.building_id.clone()) {
                return Err(Error::DuplicateId(r.building_id.clone()));
            }
        }
        Ok(DescriptionTable {
            schema,
            rows,
            warnings: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.building_id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&BuildingDescription> {
        self.rows.iter().find(|r| r.building_id == id)
    }

    /// Table without the given building, keeping row order.
    pub fn without(&self, id: &str) -> DescriptionTable {
        DescriptionTable {
            schema: self.schema.clone(),
            rows: self
                .rows
                .iter()
                .filter(|r| r.building_id != id)
                .cloned()
                .collect(),
            warnings: self.warnings,
        }
    }

    pub fn has_missing(&self) -> bool {
        self.rows.iter().any(|r| r.values.iter().any(Value::is_missing))
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.schema.id_column.clone();
        for c in &self.schema.columns {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.building_id);
            for v in &r.values {
                out.push(',');
                if !v.is_missing() {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Loads a delimited description table. Cells that fail to parse are recorded
/// as missing and counted in `warnings`.
pub fn load_descriptions(path: &Path, schema: &Schema, opts: &LoadOptions) -> Result<DescriptionTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_descriptions(file, path, schema, opts)
}

pub fn read_descriptions<R: std::io::Read>(
    reader: R,
    path: &Path,
    schema: &Schema,
    opts: &LoadOptions,
) -> Result<DescriptionTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let id_pos = header
        .iter()
        .position(|h| *h == schema.id_column)
        .ok_or_else(|| Error::Schema(format!("header lacks id column `{}`", schema.id_column)))?;
    let mut col_pos = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let p = header
            .iter()
            .position(|h| *h == c.name)
            .ok_or_else(|| Error::Schema(format!("header lacks schema column `{}`", c.name)))?;
        col_pos.push(p);
    }
    let extra_pos: Vec<usize> = (0..header.len())
        .filter(|p| *p != id_pos && !col_pos.contains(p))
        .collect();

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let mut warnings = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Format {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec.get(id_pos).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line,
                message: "empty building id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let mut values = Vec::with_capacity(col_pos.len());
        for (ci, &p) in col_pos.iter().enumerate() {
            let cell = rec.get(p).unwrap_or("");
            match schema.parse_cell(ci, cell) {
                Some(v) => values.push(v),
                None => {
                    log::warn!(
                        "{}:{}: unparseable `{}` value `{}`; treated as missing",
                        path.display(),
                        line,
                        schema.columns[ci].name,
                        cell
                    );
                    warnings += 1;
                    values.push(Value::Missing);
                }
            }
        }
        let extras = extra_pos
            .iter()
            .filter_map(|&p| {
                let v = rec.get(p)?.trim();
                (!v.is_empty()).then(|| (header[p].clone(), v.to_string()))
            })
            .collect();
        rows.push(BuildingDescription {
            building_id: id,
            values,
            extras,
        });
    }
    if rows.is_empty() {
        return Err(Error::NoBuildings(path.to_path_buf()));
    }
    Ok(DescriptionTable {
        schema: schema.clone(),
        rows,
        warnings,
    })
}

/// Most frequent non-missing value per column, ties broken by the smallest
/// canonical value. `None` for columns with no observed value.
pub fn column_modes(table: &DescriptionTable) -> Vec<Option<Value>> {
    let schema = &table.schema;
    (0..schema.columns.len())
        .map(|col| {
            let mut observed: Vec<&Value> = table
                .rows
                .iter()
                .map(|r| &r.values[col])
                .filter(|v| !v.is_missing())
                .collect();
            observed.sort_by(|a, b| schema.canonical_cmp(col, a, b));
            let mut best: Option<(&Value, usize)> = None;
            let mut i = 0;
            while i < observed.len() {
                let mut j = i + 1;
                while j < observed.len() && observed[j] == observed[i] {
                    j += 1;
                }
                // strict `>` keeps the earliest (smallest) value on ties
                if best.is_none_or(|(_, n)| j - i > n) {
                    best = Some((observed[i], j - i));
                }
                i = j;
            }
            best.map(|(v, _)| v.clone())
        })
        .collect()
}

/// Replaces every missing cell with its column's most frequent value.
pub fn impute_most_frequent(table: &DescriptionTable) -> Result<DescriptionTable> {
    let modes = column_modes(table);
    impute_with(table, &modes)
}

pub(crate) fn impute_with(table: &DescriptionTable, modes: &[Option<Value>]) -> Result<DescriptionTable> {
    let mut out = table.clone();
    for row in &mut out.rows {
        for (col, v) in row.values.iter_mut().enumerate() {
            if v.is_missing() {
                *v = modes[col]
                    .clone()
                    .ok_or_else(|| Error::AllMissing(table.schema.columns[col].name.clone()))?;
            }
        }
    }
    Ok(out)
}

/// Numeric matrix of encoded descriptions, rows aligned to building ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major values, `ids.len() * columns.len()` entries.
    pub values: Vec<f64>,
    pub scaled: bool,
    /// Steps applied to produce the matrix, e.g. `impute>onehot>minmax`.
    pub pipeline: String,
}

impl EncodedMatrix {
    pub fn nrows(&self) -> usize {
        self.ids.len()
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.ncols();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ncols() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.get(i, j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Encoding {
    Label,
    #[default]
    OneHot,
}

impl Encoding {
    pub fn tag(self) -> &'static str {
        match self {
            Encoding::Label => "label",
            Encoding::OneHot => "onehot",
        }
    }
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(Encoding::Label),
            "onehot" | "one-hot" => Ok(Encoding::OneHot),
            other => Err(Error::invalid(format!("unknown encoding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnCodec {
    Numeric,
    Label(Vec<Value>),
    OneHot(Vec<Value>),
}

/// Encoder whose vocabularies were fitted on one table and can be applied to
/// further descriptions (e.g. an unseen target building).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedEncoder {
    schema: Schema,
    encoding: Encoding,
    codecs: Vec<ColumnCodec>,
    columns: Vec<String>,
}

impl FittedEncoder {
    pub fn fit(table: &DescriptionTable, encoding: Encoding) -> Result<Self> {
        let schema = &table.schema;
        let mut codecs = Vec::new();
        let mut columns = Vec::new();
        for (col, c) in schema.columns.iter().enumerate() {
            if c.kind.is_numeric() {
                codecs.push(ColumnCodec::Numeric);
                columns.push(c.name.clone());
                continue;
            }
            let mut vocab: Vec<Value> = Vec::new();
            for r in &table.rows {
                let v = &r.values[col];
                if v.is_missing() {
                    return Err(Error::MissingValue {
                        column: c.name.clone(),
                        building: r.building_id.clone(),
                    });
                }
                if !vocab.contains(v) {
                    vocab.push(v.clone());
                }
            }
            vocab.sort_by(|a, b| schema.canonical_cmp(col, a, b));
            match encoding {
                Encoding::Label => {
                    columns.push(c.name.clone());
                    codecs.push(ColumnCodec::Label(vocab));
                }
                Encoding::OneHot => {
                    columns.extend(vocab.iter().map(|v| format!("{}={}", c.name, v)));
                    codecs.push(ColumnCodec::OneHot(vocab));
                }
            }
        }
        Ok(FittedEncoder {
            schema: schema.clone(),
            encoding,
            codecs,
            columns,
        })
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Encodes one description. Labels outside the fitted vocabulary map to
    /// an all-zero indicator block (one-hot) or the next unused code (label).
    pub fn encode_row(&self, d: &BuildingDescription) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.columns.len());
        for (col, codec) in self.codecs.iter().enumerate() {
            let v = &d.values[col];
            if v.is_missing() {
                return Err(Error::MissingValue {
                    column: self.schema.columns[col].name.clone(),
                    building: d.building_id.clone(),
                });
            }
            match codec {
                ColumnCodec::Numeric => match v {
                    Value::Number(x) => out.push(*x),
                    other => {
                        return Err(Error::Schema(format!(
                            "non-numeric value `{other}` in numeric column `{}`",
                            self.schema.columns[col].name
                        )))
                    }
                },
                ColumnCodec::Label(vocab) => {
                    let code = vocab.iter().position(|x| x == v).unwrap_or(vocab.len());
                    out.push(code as f64);
                }
                ColumnCodec::OneHot(vocab) => {
                    out.extend(vocab.iter().map(|x| if x == v { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, table: &DescriptionTable) -> Result<EncodedMatrix> {
        if table.schema != self.schema {
            return Err(Error::Schema("table schema differs from the fitted schema".into()));
        }
        let mut values = Vec::with_capacity(table.len() * self.columns.len());
        for r in &table.rows {
            values.extend(self.encode_row(r)?);
        }
        Ok(EncodedMatrix {
            ids: table.ids(),
            columns: self.columns.clone(),
            values,
            scaled: false,
            pipeline: self.encoding.tag().to_string(),
        })
    }
}

/// Label-encodes categorical columns with codes assigned in sorted order of
/// distinct values, starting at 0. Numeric columns pass through.
pub fn encode_labels(table: &DescriptionTable) -> Result<EncodedMatrix> {
    FittedEncoder::fit(table, Encoding::Label)?.encode(table)
}

/// Expands each categorical column into one indicator column per distinct
/// value, named `<attr>=<value>`. Numeric columns pass through.
pub fn one_hot_encode(table: &DescriptionTable) -> Result<EncodedMatrix> {
    FittedEncoder::fit(table, Encoding::OneHot)?.encode(table)
}

/// Per-column (min, max) statistics fitted on one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit(m: &EncodedMatrix) -> Result<Self> {
        if m.nrows() == 0 {
            return Err(Error::invalid("cannot scale an empty matrix"));
        }
        let mut mins = vec![f64::INFINITY; m.ncols()];
        let mut maxs = vec![f64::NEG_INFINITY; m.ncols()];
        for i in 0..m.nrows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        Ok(ColumnScaler { mins, maxs })
    }

    /// Constant columns map to 0.
    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        let range = self.maxs[j] - self.mins[j];
        if range == 0.0 {
            0.0
        } else {
            (v - self.mins[j]) / range
        }
    }

    pub fn scale_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &v)| self.scale_value(j, v)).collect()
    }

    pub fn apply(&self, m: &EncodedMatrix) -> EncodedMatrix {
        let mut out = m.clone();
        let w = m.ncols();
        for (k, v) in out.values.iter_mut().enumerate() {
            *v = self.scale_value(k % w, *v);
        }
        out.scaled = true;
        out.pipeline = format!("{}>minmax", m.pipeline);
        out
    }
}

/// Min-max scales each column to [0, 1]; constant columns become 0.
pub fn minmax_scale_columns(m: &EncodedMatrix) -> Result<EncodedMatrix> {
    Ok(ColumnScaler::fit(m)?.apply(m))
}

/// Impute, encode and (optionally) scale, with every statistic fitted on one
/// reference table so further descriptions are encoded consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionPipeline {
    modes: Vec<Option<Value>>,
    encoder: FittedEncoder,
    scaler: Option<ColumnScaler>,
}

impl DescriptionPipeline {
    pub fn fit(table: &DescriptionTable, encoding: Encoding, scale: bool) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::invalid("cannot fit a pipeline on an empty table"));
        }
        let modes = column_modes(table);
        let imputed = impute_with(table, &modes)?;
        let encoder = FittedEncoder::fit(&imputed, encoding)?;
        let scaler = if scale {
            Some(ColumnScaler::fit(&encoder.encode(&imputed)?)?)
        } else {
            None
        };
        Ok(DescriptionPipeline {
            modes,
            encoder,
            scaler,
        })
    }

    pub fn tag(&self) -> String {
        let mut t = format!("impute>{}", self.encoder.encoding().tag());
        if self.scaler.is_some() {
            t.push_str(">minmax");
        }
        t
    }

    pub fn encoding(&self) -> Encoding {
        self.encoder.encoding()
    }

    pub fn columns(&self) -> &[String] {
        self.encoder.columns()
    }

    pub fn transform_one(&self, d: &BuildingDescription) -> Result<Vec<f64>> {
        let mut d = d.clone();
        for (col, v) in d.values.iter_mut().enumerate() {
            if v.is_missing() {
                if let Some(m) = &self.modes[col] {
                    *v = m.clone();
                }
            }
        }
        let row = self.encoder.encode_row(&d)?;
        Ok(match &self.scaler {
            Some(s) => s.scale_row(&row),
            None => row,
        })
    }

    pub fn transform(&self, table: &DescriptionTable) -> Result<EncodedMatrix> {
        let mut values = Vec::new();
        for r in &table.rows {
            values.extend(self.transform_one(r)?);
        }
        Ok(EncodedMatrix {
            ids: table.ids(),
            columns: self.encoder.columns().to_vec(),
            values,
            scaled: self.scaler.is_some(),
            pipeline: self.tag(),
        })
    }
}

/// Fits and applies a pipeline to one table in a single step.
pub fn encode_table(table: &DescriptionTable, encoding: Encoding, scale: bool) -> Result<EncodedMatrix> {
    DescriptionPipeline::fit(table, encoding, scale)?.transform(table)
}
