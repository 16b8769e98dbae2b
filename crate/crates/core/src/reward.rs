//! Weak-supervision reward: a query earns the precision of its retrieved
//! entities against the subsequent-dialog entities, gated on full recall.

use std::collections::HashSet;

use thiserror::Error;

use crate::dialog::EntitySet;
use crate::kb::{matching_rows, parse_query, KnowledgeBase, Query};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("recall is undefined for an empty target entity set")]
    EmptyTarget,
}

/// A reward in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct RewardValue(f64);

impl RewardValue {
    pub const ZERO: RewardValue = RewardValue(0.0);

    pub fn new(value: f64) -> Option<Self> {
        (0.0..=1.0).contains(&value).then_some(Self(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0.0
    }
}

fn overlap<'a, I: IntoIterator<Item = &'a str>>(es: &EntitySet, ea: I) -> (usize, usize) {
    let ea: HashSet<&str> = ea.into_iter().collect();
    (es.iter().filter(|e| ea.contains(e.as_str())).count(), ea.len())
}

pub fn recall<'a, I: IntoIterator<Item = &'a str>>(es: &EntitySet, ea: I) -> Result<f64, RewardError> {
    if es.is_empty() {
        return Err(RewardError::EmptyTarget);
    }
    let (hit, _) = overlap(es, ea);
    Ok(hit as f64 / es.len() as f64)
}

/// `|es ∩ ea| / |ea|`, or 0 when nothing was retrieved.
pub fn precision<'a, I: IntoIterator<Item = &'a str>>(es: &EntitySet, ea: I) -> f64 {
    let (hit, total) = overlap(es, ea);
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Reward of a query against the subsequent-dialog entities `es`.
///
/// Queries naming unknown fields, and queries with empty results, earn 0.
pub fn reward(query: &Query, es: &EntitySet, kb: &KnowledgeBase) -> Result<RewardValue, RewardError> {
    if es.is_empty() {
        return Err(RewardError::EmptyTarget);
    }
    let Ok(rows) = matching_rows(query, kb) else {
        return Ok(RewardValue::ZERO);
    };
    let mut retrieved: HashSet<&str> = HashSet::new();
    for &r in &rows {
        retrieved.extend(kb.rows()[r].iter().map(String::as_str));
    }
    let hit = es.iter().filter(|e| retrieved.contains(e.as_str())).count();
    if hit < es.len() {
        return Ok(RewardValue::ZERO);
    }
    Ok(RewardValue(hit as f64 / retrieved.len() as f64))
}

/// Reward of a raw token sequence; ungrammatical sequences earn 0.
pub fn reward_tokens<S: AsRef<str>>(
    tokens: &[S],
    es: &EntitySet,
    kb: &KnowledgeBase,
) -> Result<RewardValue, RewardError> {
    match parse_query(tokens) {
        Ok(q) => reward(&q, es, kb),
        Err(_) if es.is_empty() => Err(RewardError::EmptyTarget),
        Err(_) => Ok(RewardValue::ZERO),
    }
}
