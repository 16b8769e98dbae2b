//! Tabular knowledge base, the conjunctive equality query language over it,
//! and query execution.
//!
//! The query language is the fragment
//!
//! ```text
//! SELECT * FROM kb [WHERE f = v (AND f = v)*] <eoq>
//! ```
//!
//! with at most one clause per field. A query's denotation is the set of rows
//! satisfying every clause, plus the distinct cell values of those rows.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;
use thiserror::Error;

pub const SELECT: &str = "SELECT";
pub const STAR: &str = "*";
pub const FROM: &str = "FROM";
pub const TABLE: &str = "kb";
pub const WHERE: &str = "WHERE";
pub const AND: &str = "AND";
pub const EQ: &str = "=";
pub const EOQ: &str = "<eoq>";

/// Tokens that can never be a field name or a cell value.
pub const RESERVED: [&str; 8] = [SELECT, STAR, FROM, TABLE, WHERE, AND, EQ, EOQ];

#[derive(Debug, Error)]
pub enum KbError {
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("malformed knowledge base JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("parse error at token {position}: expected {expected}, found `{found}`")]
    Parse {
        position: usize,
        expected: &'static str,
        found: String,
    },
    #[error("field `{0}` is constrained more than once")]
    DuplicateField(String),
}

/// Lowercases, trims and joins internal whitespace runs with `_`.
pub fn normalize(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// An immutable table of normalized string cells.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    fields: Vec<String>,
    rows: Vec<Vec<String>>,
    field_index: HashMap<String, usize>,
    /// value -> indices of the fields in which it occurs, ascending
    value_fields: HashMap<String, Vec<usize>>,
    max_value_parts: usize,
}

impl KnowledgeBase {
    pub fn new(fields: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, KbError> {
        if fields.is_empty() {
            return Err(KbError::Schema("no fields".into()));
        }
        if rows.is_empty() {
            return Err(KbError::Schema("knowledge base has no rows".into()));
        }
        let mut field_index = HashMap::new();
        for (i, f) in fields.iter().enumerate() {
            if f.is_empty() || f.chars().any(char::is_whitespace) {
                return Err(KbError::Schema(format!("invalid field name `{f}`")));
            }
            if RESERVED.contains(&f.as_str()) {
                return Err(KbError::Schema(format!("field name `{f}` is reserved")));
            }
            if field_index.insert(f.clone(), i).is_some() {
                return Err(KbError::Schema(format!("duplicate field `{f}`")));
            }
        }
        let mut value_fields: HashMap<String, Vec<usize>> = HashMap::new();
        let mut max_value_parts = 1;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != fields.len() {
                return Err(KbError::Row {
                    row: r,
                    message: format!("expected {} cells, found {}", fields.len(), row.len()),
                });
            }
            for (f, cell) in row.iter().enumerate() {
                if cell.is_empty() || normalize(cell) != *cell {
                    return Err(KbError::Row {
                        row: r,
                        message: format!("cell `{cell}` is not a normalized value"),
                    });
                }
                if RESERVED.contains(&cell.as_str()) {
                    return Err(KbError::Row {
                        row: r,
                        message: format!("cell value `{cell}` is reserved"),
                    });
                }
                let slots = value_fields.entry(cell.clone()).or_default();
                if !slots.contains(&f) {
                    slots.push(f);
                }
                max_value_parts = max_value_parts.max(cell.split('_').count());
            }
        }
        for slots in value_fields.values_mut() {
            slots.sort_unstable();
        }
        Ok(Self {
            fields,
            rows,
            field_index,
            value_fields,
            max_value_parts,
        })
    }

    /// Parses a JSON array of flat objects. The schema is taken from the first
    /// object; every cell is normalized.
    pub fn from_json_str(text: &str) -> Result<Self, KbError> {
        let doc: Value = serde_json::from_str(text)?;
        let records = doc
            .as_array()
            .ok_or_else(|| KbError::Schema("expected a JSON array of objects".into()))?;
        let first = records
            .first()
            .and_then(Value::as_object)
            .ok_or_else(|| KbError::Schema("expected at least one object".into()))?;
        let fields: Vec<String> = first.keys().cloned().collect();
        let mut rows = Vec::with_capacity(records.len());
        for (r, record) in records.iter().enumerate() {
            let obj = record.as_object().ok_or_else(|| KbError::Row {
                row: r,
                message: "not an object".into(),
            })?;
            if obj.len() != fields.len() {
                return Err(KbError::Row {
                    row: r,
                    message: format!("expected {} fields, found {}", fields.len(), obj.len()),
                });
            }
            let mut row = Vec::with_capacity(fields.len());
            for f in &fields {
                let cell = obj.get(f).ok_or_else(|| KbError::Row {
                    row: r,
                    message: format!("missing field `{f}`"),
                })?;
                let text = match cell {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    other => {
                        return Err(KbError::Row {
                            row: r,
                            message: format!("field `{f}` is not a string: {other}"),
                        })
                    }
                };
                row.push(normalize(&text));
            }
            rows.push(row);
        }
        Self::new(fields, rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let records: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let obj = self
                    .fields
                    .iter()
                    .zip(row)
                    .map(|(f, v)| (f.clone(), Value::String(v.clone())))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        serde_json::to_string_pretty(&Value::Array(records)).expect("string map serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn field_id(&self, name: &str) -> Option<usize> {
        self.field_index.get(name).copied()
    }

    /// Fields (by index) having `value` in at least one row.
    pub fn fields_of_value(&self, value: &str) -> &[usize] {
        self.value_fields.get(value).map_or(&[], Vec::as_slice)
    }

    pub fn is_value(&self, value: &str) -> bool {
        self.value_fields.contains_key(value)
    }

    /// Longest value measured in `_`-separated parts; bounds span matching.
    pub fn max_value_parts(&self) -> usize {
        self.max_value_parts
    }

    /// Number of distinct cell values in the whole table.
    pub fn distinct_values(&self) -> usize {
        self.value_fields.len()
    }

    pub fn cell(&self, row: usize, field: usize) -> &str {
        &self.rows[row][field]
    }
}

/// One `field = value` equality constraint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Clause {
    pub field: String,
    pub value: String,
}

impl Clause {
    pub fn new(field: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            value: value.into(),
        }
    }
}

/// A conjunction of equality clauses, at most one per field.
///
/// Equality and hashing are order-sensitive; compare canonical forms to test
/// semantic equivalence.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Query {
    clauses: Vec<Clause>,
}

impl Query {
    pub fn new(clauses: Vec<Clause>) -> Result<Self, QueryError> {
        let mut seen = HashSet::new();
        for c in &clauses {
            if !seen.insert(c.field.as_str()) {
                return Err(QueryError::DuplicateField(c.field.clone()));
            }
        }
        Ok(Self { clauses })
    }

    /// The query with no clauses, retrieving every row.
    pub fn all() -> Self {
        Self::default()
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Clauses sorted by (field, value).
    pub fn canonicalize(&self) -> Query {
        let mut clauses = self.clauses.clone();
        clauses.sort();
        Query { clauses }
    }

    pub fn is_canonical(&self) -> bool {
        self.clauses.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn clause_set(&self) -> BTreeSet<&Clause> {
        self.clauses.iter().collect()
    }

    /// Token sequence in canonical clause order, terminated by `<eoq>`.
    pub fn serialize(&self) -> Vec<String> {
        let canon = self.canonicalize();
        let mut out: Vec<String> = [SELECT, STAR, FROM, TABLE].map(String::from).to_vec();
        for (i, c) in canon.clauses.iter().enumerate() {
            out.push(if i == 0 { WHERE } else { AND }.to_string());
            out.push(c.field.clone());
            out.push(EQ.to_string());
            out.push(c.value.clone());
        }
        out.push(EOQ.to_string());
        out
    }

    /// Checks every clause field against the schema.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<(), KbError> {
        match self.clauses.iter().find(|c| kb.field_id(&c.field).is_none()) {
            Some(c) => Err(KbError::UnknownField(c.field.clone())),
            None => Ok(()),
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize().join(" "))
    }
}

impl FromStr for Query {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        parse_query(&tokens)
    }
}

pub fn canonicalize(query: &Query) -> Query {
    query.canonicalize()
}

pub fn serialize(query: &Query) -> Vec<String> {
    query.serialize()
}

/// Parses a complete `<eoq>`-terminated token sequence. Clause order is kept
/// as written.
pub fn parse_query<S: AsRef<str>>(tokens: &[S]) -> Result<Query, QueryError> {
    let tok = |i: usize| tokens.get(i).map(AsRef::as_ref);
    let expect = |i: usize, want: &'static str| -> Result<(), QueryError> {
        match tok(i) {
            Some(t) if t == want => Ok(()),
            other => Err(QueryError::Parse {
                position: i,
                expected: want,
                found: other.unwrap_or("end of input").to_string(),
            }),
        }
    };
    // operand slots accept anything that is not reserved
    let operand = |i: usize, what: &'static str| -> Result<String, QueryError> {
        match tok(i) {
            Some(t) if !RESERVED.contains(&t) && !t.is_empty() => Ok(t.to_string()),
            other => Err(QueryError::Parse {
                position: i,
                expected: what,
                found: other.unwrap_or("end of input").to_string(),
            }),
        }
    };

    expect(0, SELECT)?;
    expect(1, STAR)?;
    expect(2, FROM)?;
    expect(3, TABLE)?;
    let mut clauses = Vec::new();
    let mut i = 4;
    match tok(i) {
        Some(EOQ) => {}
        Some(WHERE) => loop {
            let field = operand(i + 1, "a field name")?;
            expect(i + 2, EQ)?;
            let value = operand(i + 3, "a value")?;
            clauses.push(Clause { field, value });
            i += 4;
            match tok(i) {
                Some(AND) => continue,
                Some(EOQ) => break,
                other => {
                    return Err(QueryError::Parse {
                        position: i,
                        expected: "AND or <eoq>",
                        found: other.unwrap_or("end of input").to_string(),
                    })
                }
            }
        },
        other => {
            return Err(QueryError::Parse {
                position: i,
                expected: "WHERE or <eoq>",
                found: other.unwrap_or("end of input").to_string(),
            })
        }
    }
    if i + 1 != tokens.len() {
        return Err(QueryError::Parse {
            position: i + 1,
            expected: "end of input",
            found: tokens[i + 1].as_ref().to_string(),
        });
    }
    Query::new(clauses)
}

/// Denotation of a query: matching rows and the distinct values they hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultSet<'kb> {
    pub rows: Vec<usize>,
    pub entities: BTreeSet<&'kb str>,
}

impl ResultSet<'_> {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Rows where every clause holds. Fails on clauses naming unknown fields.
pub fn matching_rows(query: &Query, kb: &KnowledgeBase) -> Result<Vec<usize>, KbError> {
    let constraints = query
        .clauses()
        .iter()
        .map(|c| {
            kb.field_id(&c.field)
                .map(|f| (f, c.value.as_str()))
                .ok_or_else(|| KbError::UnknownField(c.field.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..kb.rows.len())
        .filter(|&r| constraints.iter().all(|&(f, v)| kb.rows[r][f] == v))
        .collect())
}

pub fn execute<'kb>(query: &Query, kb: &'kb KnowledgeBase) -> Result<ResultSet<'kb>, KbError> {
    let rows = matching_rows(query, kb)?;
    let entities = rows
        .iter()
        .flat_map(|&r| kb.rows[r].iter().map(String::as_str))
        .collect();
    Ok(ResultSet { rows, entities })
}
