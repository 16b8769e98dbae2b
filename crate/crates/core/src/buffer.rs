//! Per-context replay buffers of positive-reward canonical queries.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::explore::ExplorationResult;
use crate::kb::Query;
use crate::reward::RewardValue;

/// Rewards closer than this are treated as equal when splitting buffers.
pub const REWARD_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BufferError {
    #[error("only positive-reward queries are buffered (got {0})")]
    NonPositiveReward(f64),
}

/// A set of canonical queries with cached rewards.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Buffer {
    entries: BTreeMap<Query, f64>,
}

impl Buffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_exploration(result: &ExplorationResult) -> Self {
        let mut b = Self::new();
        for e in &result.entries {
            b.insert(e.query.clone(), e.reward)
                .expect("exploration keeps positive rewards");
        }
        b
    }

    /// Adds a query; returns whether the buffer changed.
    pub fn insert(&mut self, query: Query, reward: RewardValue) -> Result<bool, BufferError> {
        if !reward.is_positive() {
            return Err(BufferError::NonPositiveReward(reward.get()));
        }
        let query = query.canonicalize();
        if self.entries.contains_key(&query) {
            return Ok(false);
        }
        self.entries.insert(query, reward.get());
        Ok(true)
    }

    pub fn contains(&self, query: &Query) -> bool {
        if query.is_canonical() {
            self.entries.contains_key(query)
        } else {
            self.entries.contains_key(&query.canonicalize())
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Query, f64)> {
        self.entries.iter().map(|(q, &r)| (q, r))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `B_h` holds the queries at the best reward seen so far, `B_o` every other
/// positive-reward query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferPair {
    high: Buffer,
    other: Buffer,
    best_reward: f64,
}

impl BufferPair {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_exploration(result: &ExplorationResult) -> Self {
        let mut b = Self::new();
        for e in &result.entries {
            b.insert(e.query.clone(), e.reward)
                .expect("exploration keeps positive rewards");
        }
        b
    }

    pub fn high(&self) -> &Buffer {
        &self.high
    }

    pub fn other(&self) -> &Buffer {
        &self.other
    }

    pub fn best_reward(&self) -> f64 {
        self.best_reward
    }

    pub fn contains(&self, query: &Query) -> bool {
        self.high.contains(query) || self.other.contains(query)
    }

    pub fn len(&self) -> usize {
        self.high.len() + self.other.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty() && self.other.is_empty()
    }

    /// `B_h ∪ B_o` as a single buffer.
    pub fn union(&self) -> Buffer {
        let mut b = self.high.clone();
        b.entries.extend(self.other.iter().map(|(q, r)| (q.clone(), r)));
        b
    }

    /// Applies the buffer update rule; returns whether anything changed.
    pub fn insert(&mut self, query: Query, reward: RewardValue) -> Result<bool, BufferError> {
        if !reward.is_positive() {
            return Err(BufferError::NonPositiveReward(reward.get()));
        }
        let query = query.canonicalize();
        if self.contains(&query) {
            return Ok(false);
        }
        let r = reward.get();
        if self.high.is_empty() || r > self.best_reward + REWARD_TIE_EPS {
            let demoted = std::mem::take(&mut self.high.entries);
            self.other.entries.extend(demoted);
            self.high.entries.insert(query, r);
            self.best_reward = r;
        } else if r >= self.best_reward - REWARD_TIE_EPS {
            self.high.entries.insert(query, r);
        } else {
            self.other.entries.insert(query, r);
        }
        Ok(true)
    }

    /// Checks disjointness and the reward split; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (q, r) in self.high.iter() {
            if self.other.contains(q) {
                return Err(format!("{q} in both buffers"));
            }
            if (r - self.best_reward).abs() > REWARD_TIE_EPS {
                return Err(format!("{q} in B_h with reward {r} != best {}", self.best_reward));
            }
        }
        for (q, r) in self.other.iter() {
            if !(r > 0.0 && r < self.best_reward - REWARD_TIE_EPS) {
                return Err(format!("{q} in B_o with reward {r}, best {}", self.best_reward));
            }
        }
        if self.high.is_empty() && !self.other.is_empty() {
            return Err("B_o non-empty while B_h is empty".into());
        }
        Ok(())
    }
}

/// Functional form of [`BufferPair::insert`].
pub fn update_buffers(buffers: &BufferPair, query: Query, reward: RewardValue) -> Result<BufferPair, BufferError> {
    let mut next = buffers.clone();
    next.insert(query, reward)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(text: &str) -> Query {
        format!("SELECT * FROM kb {text} <eoq>").parse().unwrap()
    }

    fn r(x: f64) -> RewardValue {
        RewardValue::new(x).unwrap()
    }

    #[test]
    fn higher_reward_demotes_high_buffer() {
        let mut b = BufferPair::new();
        assert!(b.insert(q("WHERE a = x"), r(0.4)).unwrap());
        assert_eq!(b.high().len(), 1);
        assert!(b.other().is_empty());
        b.insert(q("WHERE b = y"), r(0.4)).unwrap();
        b.insert(q("WHERE a = x AND b = y"), r(0.7)).unwrap();
        assert_eq!(b.best_reward(), 0.7);
        assert_eq!(b.high().len(), 1);
        assert!(b.other().contains(&q("WHERE a = x")) && b.other().contains(&q("WHERE b = y")));
        b.check_invariants().unwrap();
    }

    #[test]
    fn duplicates_and_lower_rewards() {
        let mut b = BufferPair::new();
        b.insert(q("WHERE a = x"), r(0.5)).unwrap();
        let before = b.clone();
        assert!(!b.insert(q("WHERE a = x"), r(0.5)).unwrap());
        assert_eq!(b, before);
        b.insert(q(""), r(0.1)).unwrap();
        assert!(b.other().contains(&q("")));
        b.insert(q("WHERE b = y AND a = x"), r(0.6)).unwrap();
        // clause order does not make a new query
        assert!(!b.insert(q("WHERE a = x AND b = y"), r(0.6)).unwrap());
        assert!(b.insert(q("WHERE c = z"), r(0.0)).is_err());
        b.check_invariants().unwrap();
    }

    #[test]
    fn functional_update() {
        let b = BufferPair::new();
        let next = update_buffers(&b, q("WHERE a = x"), r(0.3)).unwrap();
        assert!(b.is_empty());
        assert_eq!(next.len(), 1);
        assert_eq!(next.union().len(), 1);
    }
}
