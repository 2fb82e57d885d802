//! Filter syntax trees and their evaluation against event rows.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::QueryError;
use crate::kvstore::Entry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];

    fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Lt => "lt",
            CmpOp::Le => "le",
            CmpOp::Gt => "gt",
            CmpOp::Ge => "ge",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.as_str() == s)
    }
}

/// A compiled regular expression compared by its source text.
#[derive(Clone)]
pub struct Pattern(Regex);

impl Pattern {
    pub fn new(src: &str) -> Result<Self, QueryError> {
        Regex::new(src)
            .map(Pattern)
            .map_err(|e| QueryError::InvalidFilter(e.to_string()))
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    pub fn is_match(&self, s: &str) -> bool {
        self.0.is_match(s)
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.as_str() == other.as_str()
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}/", self.as_str())
    }
}

/// Boolean filter over the fields of one event. `Regex` matches anywhere in
/// the value unless the pattern is anchored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum FilterTree {
    And(Vec<FilterTree>),
    Or(Vec<FilterTree>),
    Not(Box<FilterTree>),
    Cmp { field: String, op: CmpOp, value: String },
    Regex { field: String, pattern: Pattern },
}

impl FilterTree {
    pub fn eq(field: impl Into<String>, value: impl Into<String>) -> Self {
        Self::cmp(field, CmpOp::Eq, value)
    }

    pub fn cmp(field: impl Into<String>, op: CmpOp, value: impl Into<String>) -> Self {
        FilterTree::Cmp {
            field: field.into(),
            op,
            value: value.into(),
        }
    }

    pub fn regex(field: impl Into<String>, pattern: &str) -> Result<Self, QueryError> {
        Ok(FilterTree::Regex {
            field: field.into(),
            pattern: Pattern::new(pattern)?,
        })
    }

    pub fn and(children: Vec<FilterTree>) -> Result<Self, QueryError> {
        check_arity("and", &children)?;
        Ok(FilterTree::And(children))
    }

    pub fn or(children: Vec<FilterTree>) -> Result<Self, QueryError> {
        check_arity("or", &children)?;
        Ok(FilterTree::Or(children))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(child: FilterTree) -> Self {
        FilterTree::Not(Box::new(child))
    }

    /// The `(field, value)` of an equality node.
    pub fn as_equality(&self) -> Option<(&str, &str)> {
        match self {
            FilterTree::Cmp {
                field,
                op: CmpOp::Eq,
                value,
            } => Some((field, value)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        match self {
            FilterTree::And(c) | FilterTree::Or(c) => {
                check_arity(if matches!(self, FilterTree::And(_)) { "and" } else { "or" }, c)?;
                c.iter().try_for_each(FilterTree::validate)
            }
            FilterTree::Not(c) => c.validate(),
            FilterTree::Cmp { field, .. } | FilterTree::Regex { field, .. } if field.is_empty() => {
                Err(QueryError::InvalidFilter("empty field name".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(v: &Value) -> Result<Self, QueryError> {
        let bad = |msg: String| QueryError::InvalidFilter(msg);
        let obj = v.as_object().ok_or_else(|| bad(format!("filter node must be an object: {v}")))?;
        let op = obj
            .get("op")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("filter node needs a string op".into()))?;
        let children = || -> Result<Vec<FilterTree>, QueryError> {
            obj.get("children")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("{op} needs children")))?
                .iter()
                .map(FilterTree::from_json)
                .collect()
        };
        let field = || -> Result<String, QueryError> {
            match obj.get("field").and_then(Value::as_str) {
                Some(f) if !f.is_empty() => Ok(f.to_string()),
                _ => Err(bad(format!("{op} needs a field"))),
            }
        };
        let value = || -> Result<String, QueryError> {
            match obj.get("value") {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(Value::Number(n)) => Ok(n.to_string()),
                Some(Value::Bool(b)) => Ok(b.to_string()),
                _ => Err(bad(format!("{op} needs a scalar value"))),
            }
        };
        match op {
            "and" => FilterTree::and(children()?),
            "or" => FilterTree::or(children()?),
            "not" => {
                let mut c = children()?;
                if c.len() != 1 {
                    return Err(bad("not takes exactly one child".into()));
                }
                Ok(FilterTree::not(c.remove(0)))
            }
            "regex" => FilterTree::regex(field()?, &value()?),
            other => {
                let op = CmpOp::parse(other).ok_or_else(|| bad(format!("unknown op {other:?}")))?;
                Ok(FilterTree::cmp(field()?, op, value()?))
            }
        }
    }

    pub fn to_json(&self) -> Value {
        use serde_json::json;
        match self {
            FilterTree::And(c) => json!({"op": "and", "children": c.iter().map(Self::to_json).collect::<Vec<_>>()}),
            FilterTree::Or(c) => json!({"op": "or", "children": c.iter().map(Self::to_json).collect::<Vec<_>>()}),
            FilterTree::Not(c) => json!({"op": "not", "children": [c.to_json()]}),
            FilterTree::Cmp { field, op, value } => json!({"op": op.as_str(), "field": field, "value": value}),
            FilterTree::Regex { field, pattern } => {
                json!({"op": "regex", "field": field, "value": pattern.as_str()})
            }
        }
    }
}

fn check_arity(op: &str, children: &[FilterTree]) -> Result<(), QueryError> {
    if children.len() < 2 {
        return Err(QueryError::InvalidFilter(format!("{op} needs at least two children")));
    }
    Ok(())
}

impl TryFrom<Value> for FilterTree {
    type Error = QueryError;

    fn try_from(v: Value) -> Result<Self, QueryError> {
        FilterTree::from_json(&v)
    }
}

impl From<FilterTree> for Value {
    fn from(t: FilterTree) -> Value {
        t.to_json()
    }
}

/// Field lookup over some representation of an event row.
pub trait Fields {
    fn field(&self, name: &str) -> Option<&str>;
}

impl Fields for BTreeMap<String, String> {
    fn field(&self, name: &str) -> Option<&str> {
        self.get(name).map(String::as_str)
    }
}

/// The entries of one event-table row, one per field.
impl Fields for [Entry] {
    fn field(&self, name: &str) -> Option<&str> {
        self.iter()
            .find(|e| e.colq.as_ref() == name.as_bytes())
            .and_then(|e| std::str::from_utf8(&e.value).ok())
    }
}

fn numeric(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// `=` and `≠` compare exact strings, matching what the index stores. Order
/// comparisons are numeric when both sides parse as finite numbers and
/// lexicographic otherwise.
pub fn compare(op: CmpOp, actual: &str, expected: &str) -> bool {
    let ord = || match (numeric(actual), numeric(expected)) {
        (Some(a), Some(b)) => a.partial_cmp(&b).unwrap_or(Ordering::Equal),
        _ => actual.cmp(expected),
    };
    match op {
        CmpOp::Eq => actual == expected,
        CmpOp::Ne => actual != expected,
        CmpOp::Lt => ord().is_lt(),
        CmpOp::Le => ord().is_le(),
        CmpOp::Gt => ord().is_gt(),
        CmpOp::Ge => ord().is_ge(),
    }
}

/// A condition on a missing field is false.
pub fn eval_filter<F: Fields + ?Sized>(tree: &FilterTree, record: &F) -> bool {
    match tree {
        FilterTree::And(c) => c.iter().all(|t| eval_filter(t, record)),
        FilterTree::Or(c) => c.iter().any(|t| eval_filter(t, record)),
        FilterTree::Not(c) => !eval_filter(c, record),
        FilterTree::Cmp { field, op, value } => record.field(field).is_some_and(|v| compare(*op, v, value)),
        FilterTree::Regex { field, pattern } => record.field(field).is_some_and(|v| pattern.is_match(v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn rec(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn examples() {
        assert!(eval_filter(&FilterTree::eq("domain", "x"), &rec(&[("domain", "x")])));
        let r = rec(&[("status", "404")]);
        assert!(!eval_filter(&FilterTree::cmp("status", CmpOp::Lt, "200"), &r));
        // non-numeric operand falls back to string order
        assert!(eval_filter(&FilterTree::cmp("status", CmpOp::Gt, "1000"), &rec(&[("status", "404a")])));
        assert!(eval_filter(&FilterTree::cmp("status", CmpOp::Lt, "1000"), &r));
        let missing = FilterTree::eq("nope", "x");
        assert!(!eval_filter(&missing, &r));
        assert!(!eval_filter(&FilterTree::cmp("nope", CmpOp::Ne, "x"), &r));
        assert!(eval_filter(&FilterTree::not(missing), &r));
        assert!(eval_filter(&FilterTree::regex("status", "^4").unwrap(), &r));
        assert!(!eval_filter(&FilterTree::regex("status", "^5").unwrap(), &r));
    }

    #[test]
    fn equality_is_exact() {
        assert!(!compare(CmpOp::Eq, "200", "200.0"));
        assert!(compare(CmpOp::Le, "200", "200.0"));
        assert!(compare(CmpOp::Ge, "200", "200.0"));
        assert!(compare(CmpOp::Lt, "NaN", "a"));
    }

    #[test]
    fn entry_rows_as_fields() {
        let row = vec![
            Entry::new("r", "domain", "a.com"),
            Entry::new("r", "status", "200"),
        ];
        assert!(eval_filter(&FilterTree::eq("domain", "a.com"), row.as_slice()));
        assert!(!eval_filter(&FilterTree::eq("url", "a.com"), row.as_slice()));
    }

    #[test]
    fn json_round_trip_and_errors() {
        let v = json!({"op": "and", "children": [
            {"op": "eq", "field": "domain", "value": "a.com"},
            {"op": "not", "children": [{"op": "regex", "field": "url", "value": "^/x"}]},
            {"op": "or", "children": [
                {"op": "ge", "field": "status", "value": 400},
                {"op": "ne", "field": "bytes", "value": "0"}]}]});
        let t = FilterTree::from_json(&v).unwrap();
        let back = FilterTree::from_json(&t.to_json()).unwrap();
        assert_eq!(t, back);
        let parsed: FilterTree = serde_json::from_value(v).unwrap();
        assert_eq!(parsed, t);

        for bad in [
            json!({"op": "and", "children": [{"op": "eq", "field": "a", "value": "b"}]}),
            json!({"op": "not", "children": []}),
            json!({"op": "eq", "field": "a"}),
            json!({"op": "eq", "field": "", "value": "b"}),
            json!({"op": "regex", "field": "a", "value": "("}),
            json!({"op": "xor", "children": []}),
            json!("eq"),
        ] {
            assert!(FilterTree::from_json(&bad).is_err(), "{bad}");
        }
    }

    /// Independent interpreter working on the JSON form of the tree.
    fn oracle(node: &Value, rec: &BTreeMap<String, String>) -> bool {
        let op = node["op"].as_str().unwrap();
        let kids = || node["children"].as_array().unwrap().iter();
        if op == "and" {
            return kids().fold(true, |acc, c| oracle(c, rec) && acc);
        }
        if op == "or" {
            return kids().fold(false, |acc, c| oracle(c, rec) || acc);
        }
        if op == "not" {
            return !oracle(&node["children"][0], rec);
        }
        let Some(actual) = rec.get(node["field"].as_str().unwrap()) else {
            return false;
        };
        let want = node["value"].as_str().unwrap();
        if op == "regex" {
            return Regex::new(want).unwrap().find(actual).is_some();
        }
        if op == "eq" {
            return actual.as_bytes() == want.as_bytes();
        }
        if op == "ne" {
            return actual.as_bytes() != want.as_bytes();
        }
        let sign: i32 = match (actual.parse::<f64>(), want.parse::<f64>()) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => {
                if a < b {
                    -1
                } else if a > b {
                    1
                } else {
                    0
                }
            }
            _ => {
                let (a, b) = (actual.as_bytes(), want.as_bytes());
                if a < b {
                    -1
                } else if a > b {
                    1
                } else {
                    0
                }
            }
        };
        match op {
            "lt" => sign < 0,
            "le" => sign <= 0,
            "gt" => sign > 0,
            "ge" => sign >= 0,
            _ => unreachable!(),
        }
    }

    const FIELDS: [&str; 4] = ["a", "b", "c", "d"];
    const VALUES: [&str; 8] = ["1", "2", "10", "x", "xy", "", "-3.5", "y1"];

    fn random_tree(rng: &mut ChaCha8Rng, depth: u32) -> Value {
        let leaf = depth == 0 || rng.random_bool(0.4);
        if leaf {
            let field = FIELDS[rng.random_range(0..FIELDS.len())];
            if rng.random_bool(0.15) {
                let pats = ["^x", "1$", "y", "^$", "[0-9]"];
                return json!({"op": "regex", "field": field, "value": pats[rng.random_range(0..pats.len())]});
            }
            let op = CmpOp::ALL[rng.random_range(0..6)].as_str();
            return json!({"op": op, "field": field, "value": VALUES[rng.random_range(0..VALUES.len())]});
        }
        match rng.random_range(0..3) {
            0 => json!({"op": "not", "children": [random_tree(rng, depth - 1)]}),
            k => {
                let n = rng.random_range(2..4);
                let children: Vec<Value> = (0..n).map(|_| random_tree(rng, depth - 1)).collect();
                json!({"op": if k == 1 { "and" } else { "or" }, "children": children})
            }
        }
    }

    #[test]
    fn matches_independent_interpreter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let tree_json = random_tree(&mut rng, 3);
            let tree = FilterTree::from_json(&tree_json).unwrap();
            let mut r = BTreeMap::new();
            for f in FIELDS {
                if rng.random_bool(0.8) {
                    r.insert(f.to_string(), VALUES[rng.random_range(0..VALUES.len())].to_string());
                }
            }
            assert_eq!(eval_filter(&tree, &r), oracle(&tree_json, &r), "{tree_json} on {r:?}");
        }
    }
}
