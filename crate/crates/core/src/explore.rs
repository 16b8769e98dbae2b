//! Systematic exploration of context-grounded queries.
//!
//! WHERE values can only be copied from the dialog context, so the reachable
//! query space is the set of clause subsets over `(field, value)` pairs whose
//! value is mentioned in the context. Exploration enumerates those subsets and
//! keeps the ones earning a positive reward.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::dialog::{link_entities, DialogContext, EntitySet};
use crate::kb::{Clause, KnowledgeBase, Query};
use crate::reward::{reward, RewardValue};

pub const DEFAULT_MAX_CLAUSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationEntry {
    #[serde(serialize_with = "query_as_text")]
    pub query: Query,
    pub reward: RewardValue,
}

fn query_as_text<S: serde::Serializer>(q: &Query, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(q)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExplorationResult {
    /// Canonical queries with positive reward, in canonical order.
    pub entries: Vec<ExplorationEntry>,
    pub best_reward: f64,
}

/// `(field, value)` pairs where `value` is mentioned in the context and occurs
/// under `field` in the KB.
pub fn candidate_clauses(context: &DialogContext, kb: &KnowledgeBase) -> BTreeSet<Clause> {
    let mut out = BTreeSet::new();
    for utterance in context.utterances() {
        for value in link_entities(utterance, kb) {
            for &f in kb.fields_of_value(&value) {
                out.insert(Clause::new(kb.fields()[f].clone(), value.clone()));
            }
        }
    }
    out
}

/// Enumerates every query built from at most `max_clauses` candidate clauses
/// (one per field) and keeps those with positive reward.
///
/// Adding a clause only shrinks the result set, so once a subset loses recall
/// none of its supersets can earn reward and the branch is cut.
pub fn systematic_explore(
    context: &DialogContext,
    es: &EntitySet,
    kb: &KnowledgeBase,
    max_clauses: usize,
) -> ExplorationResult {
    let mut result = ExplorationResult::default();
    if es.is_empty() {
        return result;
    }
    let candidates: Vec<Clause> = candidate_clauses(context, kb).into_iter().collect();
    let mut chosen: Vec<&Clause> = Vec::new();
    let mut found = Vec::new();
    extend(&candidates, 0, &mut chosen, max_clauses, es, kb, &mut found);
    found.sort_by(|a: &ExplorationEntry, b| a.query.cmp(&b.query));
    result.best_reward = found.iter().map(|e| e.reward.get()).fold(0.0, f64::max);
    result.entries = found;
    result
}

fn extend<'c>(
    candidates: &'c [Clause],
    from: usize,
    chosen: &mut Vec<&'c Clause>,
    max_clauses: usize,
    es: &EntitySet,
    kb: &KnowledgeBase,
    found: &mut Vec<ExplorationEntry>,
) {
    // chosen is built in candidate order, which is already canonical
    let query = Query::new(chosen.iter().map(|&c| c.clone()).collect()).expect("one clause per field by construction");
    let r = reward(&query, es, kb).expect("es is non-empty");
    if !r.is_positive() {
        return;
    }
    found.push(ExplorationEntry { query, reward: r });
    if chosen.len() == max_clauses {
        return;
    }
    for i in from..candidates.len() {
        let c = &candidates[i];
        if chosen.iter().any(|d| d.field == c.field) {
            continue;
        }
        chosen.push(c);
        extend(candidates, i + 1, chosen, max_clauses, es, kb, found);
        chosen.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialog::tokenize;
    use crate::kb::tests::restaurants;

    fn context(text: &str) -> DialogContext {
        DialogContext::from_utterances(vec![tokenize(text)]).unwrap()
    }

    #[test]
    fn candidates() {
        let kb = restaurants();
        let c = candidate_clauses(&context("moderate price in the south please"), &kb);
        assert_eq!(
            c,
            [Clause::new("area", "south"), Clause::new("pricerange", "moderate")].into()
        );
        assert!(candidate_clauses(&context("hello"), &kb).is_empty());
        let twice =
            KnowledgeBase::from_json_str(r#"[{"name": "south", "area": "south"}, {"name": "x", "area": "north"}]"#)
                .unwrap();
        assert_eq!(candidate_clauses(&context("south"), &twice).len(), 2);
    }

    #[test]
    fn explores_running_example() {
        let kb = restaurants();
        let es: EntitySet = ["peking_restaurant", "2343-4040"].map(String::from).into();
        let result = systematic_explore(&context("chinese food , moderate price in the south"), &es, &kb, 4);
        let queries: Vec<String> = result.entries.iter().map(|e| e.query.to_string()).collect();
        assert!(queries.contains(&"SELECT * FROM kb <eoq>".to_string()));
        assert!(queries.contains(
            &"SELECT * FROM kb WHERE area = south AND cuisine = chinese AND pricerange = moderate <eoq>".to_string()
        ));
        assert_eq!(result.entries.len(), 8);
        assert!(result
            .entries
            .iter()
            .all(|e| e.reward.is_positive() && e.query.is_canonical()));
        assert_eq!(result.best_reward, 0.4);

        let bounded = systematic_explore(&context("chinese food , moderate price in the south"), &es, &kb, 1);
        assert_eq!(bounded.entries.len(), 4);
    }

    #[test]
    fn unreachable_targets() {
        let kb = restaurants();
        let es: EntitySet = ["peking_restaurant"].map(String::from).into();
        let result = systematic_explore(&context("north please"), &es, &kb, 4);
        // only the unconstrained query can still reach the target
        assert_eq!(result.entries.len(), 1);
        assert!(systematic_explore(&context("north"), &EntitySet::new(), &kb, 4)
            .entries
            .is_empty());
        let r = systematic_explore(&context("north"), &["nowhere".to_string()].into(), &kb, 4);
        assert!(r.entries.is_empty());
        assert_eq!(r.best_reward, 0.0);
    }
}
