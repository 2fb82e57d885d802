//! Access-path selection from the shape of the filter tree and equality
//! densities.

use std::collections::BTreeSet;

use serde::Serialize;

use super::filter::FilterTree;
use super::QueryError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PlanMode {
    IndexSingle,
    IndexUnion,
    IndexIntersectThenFilter,
    FullScanFilter,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexCondition {
    pub field: String,
    pub value: String,
    /// Present when the planner needed it to choose between conditions.
    pub density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPlan {
    pub mode: PlanMode,
    pub index_conditions: Vec<IndexCondition>,
    pub residual: Option<FilterTree>,
}

impl QueryPlan {
    pub fn full_scan(filter: Option<FilterTree>) -> Self {
        Self {
            mode: PlanMode::FullScanFilter,
            index_conditions: Vec::new(),
            residual: filter,
        }
    }

    fn index(mode: PlanMode, conds: Vec<IndexCondition>, residual: Option<FilterTree>) -> Self {
        Self {
            mode,
            index_conditions: conds,
            residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerConfig {
    /// Equality conditions with density at least `w` times the smallest are
    /// left to filtering.
    pub w: f64,
    /// Fields present in the index table; `None` means every field.
    pub indexed_fields: Option<BTreeSet<String>>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            w: 10.0,
            indexed_fields: None,
        }
    }
}

impl PlannerConfig {
    fn indexed_equality<'a>(&self, t: &'a FilterTree) -> Option<(&'a str, &'a str)> {
        t.as_equality()
            .filter(|(f, _)| self.indexed_fields.as_ref().is_none_or(|s| s.contains(*f)))
    }
}

fn cond(field: &str, value: &str, density: Option<f64>) -> IndexCondition {
    IndexCondition {
        field: field.to_string(),
        value: value.to_string(),
        density,
    }
}

/// Chooses an access path. `density` is only consulted for conjunctions.
pub fn plan_with<D>(filter: Option<&FilterTree>, cfg: &PlannerConfig, mut density: D) -> Result<QueryPlan, QueryError>
where
    D: FnMut(&str, &str) -> Result<f64, QueryError>,
{
    if !(cfg.w > 1.0) {
        return Err(QueryError::InvalidQuery(format!("w must exceed 1, got {}", cfg.w)));
    }
    let Some(tree) = filter else {
        return Ok(QueryPlan::full_scan(None));
    };
    if let Some((f, v)) = cfg.indexed_equality(tree) {
        return Ok(QueryPlan::index(PlanMode::IndexSingle, vec![cond(f, v, None)], None));
    }
    match tree {
        FilterTree::Or(children) => {
            let eqs: Option<Vec<_>> = children.iter().map(|c| cfg.indexed_equality(c)).collect();
            match eqs {
                Some(eqs) => {
                    let conds = eqs.into_iter().map(|(f, v)| cond(f, v, None)).collect();
                    Ok(QueryPlan::index(PlanMode::IndexUnion, conds, None))
                }
                None => Ok(QueryPlan::full_scan(Some(tree.clone()))),
            }
        }
        FilterTree::And(children) => {
            let mut scored = Vec::new();
            for (i, c) in children.iter().enumerate() {
                if let Some((f, v)) = cfg.indexed_equality(c) {
                    scored.push((i, f, v, density(f, v)?));
                }
            }
            let Some(&(argmin, _, _, min)) = scored.iter().min_by(|a, b| a.3.total_cmp(&b.3)) else {
                return Ok(QueryPlan::full_scan(Some(tree.clone())));
            };
            let threshold = cfg.w * min;
            let mut selected = BTreeSet::new();
            let mut conds = Vec::new();
            for &(i, f, v, d) in &scored {
                // the sparsest condition is always used, even when its density is zero
                if i == argmin || d < threshold {
                    selected.insert(i);
                    conds.push(cond(f, v, Some(d)));
                }
            }
            let mut rest: Vec<FilterTree> = children
                .iter()
                .enumerate()
                .filter(|(i, _)| !selected.contains(i))
                .map(|(_, c)| c.clone())
                .collect();
            let residual = match rest.len() {
                0 => None,
                1 => rest.pop(),
                _ => Some(FilterTree::And(rest)),
            };
            Ok(QueryPlan::index(PlanMode::IndexIntersectThenFilter, conds, residual))
        }
        _ => Ok(QueryPlan::full_scan(Some(tree.clone()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::filter::CmpOp;

    fn no_density(_: &str, _: &str) -> Result<f64, QueryError> {
        panic!("density not needed")
    }

    #[test]
    fn absent_filter_scans() {
        let p = plan_with(None, &PlannerConfig::default(), no_density).unwrap();
        assert_eq!(p, QueryPlan::full_scan(None));
    }

    #[test]
    fn root_equality_uses_index() {
        let t = FilterTree::eq("domain", "x");
        let p = plan_with(Some(&t), &PlannerConfig::default(), no_density).unwrap();
        assert_eq!(p.mode, PlanMode::IndexSingle);
        assert_eq!(p.index_conditions, vec![cond("domain", "x", None)]);
        assert!(p.residual.is_none());
    }

    #[test]
    fn conjunction_example() {
        let t = FilterTree::and(vec![
            FilterTree::eq("a", "v1"),
            FilterTree::eq("b", "v2"),
            FilterTree::regex("c", "p").unwrap(),
        ])
        .unwrap();
        let p = plan_with(Some(&t), &PlannerConfig::default(), |f, _| {
            Ok(if f == "a" { 0.001 } else { 0.5 })
        })
        .unwrap();
        assert_eq!(p.mode, PlanMode::IndexIntersectThenFilter);
        assert_eq!(p.index_conditions, vec![cond("a", "v1", Some(0.001))]);
        assert_eq!(
            p.residual,
            Some(FilterTree::And(vec![FilterTree::eq("b", "v2"), FilterTree::regex("c", "p").unwrap()]))
        );
    }

    #[test]
    fn conjunction_selects_similar_densities() {
        let t = FilterTree::and(vec![
            FilterTree::eq("a", "1"),
            FilterTree::eq("b", "2"),
            FilterTree::cmp("c", CmpOp::Gt, "3"),
        ])
        .unwrap();
        let p = plan_with(Some(&t), &PlannerConfig::default(), |f, _| Ok(if f == "a" { 0.01 } else { 0.05 })).unwrap();
        assert_eq!(p.index_conditions.len(), 2);
        assert_eq!(p.residual, Some(FilterTree::cmp("c", CmpOp::Gt, "3")));

        // zero density still picks the sparsest condition
        let p = plan_with(Some(&t), &PlannerConfig::default(), |f, _| Ok(if f == "b" { 0.0 } else { 0.2 })).unwrap();
        assert_eq!(p.index_conditions, vec![cond("b", "2", Some(0.0))]);
        assert_eq!(
            p.residual,
            Some(FilterTree::And(vec![FilterTree::eq("a", "1"), FilterTree::cmp("c", CmpOp::Gt, "3")]))
        );
    }

    #[test]
    fn disjunction() {
        let all_eq = FilterTree::or(vec![FilterTree::eq("a", "1"), FilterTree::eq("b", "2")]).unwrap();
        let p = plan_with(Some(&all_eq), &PlannerConfig::default(), no_density).unwrap();
        assert_eq!(p.mode, PlanMode::IndexUnion);
        assert_eq!(p.index_conditions.len(), 2);
        let mixed = FilterTree::or(vec![FilterTree::eq("a", "1"), FilterTree::cmp("b", CmpOp::Lt, "2")]).unwrap();
        let p = plan_with(Some(&mixed), &PlannerConfig::default(), no_density).unwrap();
        assert_eq!(p, QueryPlan::full_scan(Some(mixed)));
    }

    #[test]
    fn otherwise_full_scan() {
        for t in [
            FilterTree::not(FilterTree::eq("a", "v")),
            FilterTree::cmp("a", CmpOp::Ne, "v"),
            FilterTree::regex("a", "v").unwrap(),
            FilterTree::and(vec![FilterTree::regex("a", "v").unwrap(), FilterTree::cmp("b", CmpOp::Le, "1")]).unwrap(),
        ] {
            let p = plan_with(Some(&t), &PlannerConfig::default(), no_density).unwrap();
            assert_eq!(p, QueryPlan::full_scan(Some(t)));
        }
    }

    #[test]
    fn unindexed_equality_falls_back() {
        let cfg = PlannerConfig {
            indexed_fields: Some(BTreeSet::from(["domain".to_string()])),
            ..PlannerConfig::default()
        };
        let t = FilterTree::eq("url", "/");
        assert_eq!(plan_with(Some(&t), &cfg, no_density).unwrap(), QueryPlan::full_scan(Some(t)));
        let t = FilterTree::and(vec![FilterTree::eq("url", "/"), FilterTree::eq("domain", "d")]).unwrap();
        let p = plan_with(Some(&t), &cfg, |_, _| Ok(0.3)).unwrap();
        assert_eq!(p.index_conditions, vec![cond("domain", "d", Some(0.3))]);
        assert_eq!(p.residual, Some(FilterTree::eq("url", "/")));
    }

    #[test]
    fn w_must_exceed_one() {
        let cfg = PlannerConfig {
            w: 1.0,
            ..PlannerConfig::default()
        };
        assert!(plan_with(None, &cfg, no_density).is_err());
    }
}
