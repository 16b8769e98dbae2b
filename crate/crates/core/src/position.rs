//! Query-position classifier: per turn, fire the KB query now or wait.
//!
//! Logistic regression over a handful of context features, trained by
//! full-batch gradient descent on turn-level labels derived from a labeled
//! position `q`: turns before `q` are negatives, turn `q` is the positive, and
//! later turns are left out.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dialog::{link_entities, Dialog};
use crate::kb::KnowledgeBase;

const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PositionError {
    #[error("no dialog carries a position label")]
    EmptyCorpus,
    #[error("dialog {0} has no gold position")]
    MissingGold(usize),
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("model was trained for schema {found}, expected {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("malformed model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    pub threshold: f64,
}

impl Default for PositionConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            iterations: 2000,
            l2: 1e-4,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionModel {
    version: u32,
    schema_hash: String,
    pub weights: Vec<f64>,
    pub threshold: f64,
}

fn schema_hash(kb: &KnowledgeBase) -> String {
    let mut h = Sha256::new();
    for f in kb.fields() {
        h.update(f.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Feature rows for turns `1..=m`: bias, turn index, per-field counts of
/// linked values in the context, whether the last user utterance introduced
/// an unseen candidate clause, and the number of fields with a linked value.
pub fn turn_features(dialog: &Dialog, kb: &KnowledgeBase) -> Vec<Vec<f64>> {
    let n = kb.fields().len();
    let mut seen: BTreeSet<(usize, String)> = BTreeSet::new();
    let mut out = Vec::with_capacity(dialog.num_turns());
    for (i, turn) in dialog.turns.iter().enumerate() {
        let mut fresh = false;
        for v in link_entities(&turn.user, kb) {
            for &f in kb.fields_of_value(&v) {
                fresh |= seen.insert((f, v.clone()));
            }
        }
        let mut row = vec![0.0; n + 4];
        row[0] = 1.0;
        row[1] = (i + 1) as f64;
        for (f, _) in &seen {
            row[2 + f] += 1.0;
        }
        row[2 + n] = f64::from(u8::from(fresh));
        row[3 + n] = seen.iter().map(|(f, _)| f).collect::<BTreeSet<_>>().len() as f64;
        out.push(row);
        // system mentions count from the next turn on
        for v in link_entities(&turn.system, kb) {
            for &f in kb.fields_of_value(&v) {
                seen.insert((f, v.clone()));
            }
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the classifier on dialogs labeled by `label`; unlabeled dialogs are
/// skipped.
pub fn train_position(
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
    label: impl Fn(&Dialog) -> Option<usize>,
    cfg: &PositionConfig,
) -> Result<PositionModel, PositionError> {
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(PositionError::Threshold(cfg.threshold));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for d in dialogs {
        let Some(q) = label(d).filter(|&q| q >= 1 && q <= d.num_turns()) else {
            continue;
        };
        for (i, row) in turn_features(d, kb).into_iter().take(q).enumerate() {
            xs.push(row);
            ys.push(if i + 1 == q { 1.0 } else { 0.0 });
        }
    }
    if xs.is_empty() {
        return Err(PositionError::EmptyCorpus);
    }
    if ys.iter().all(|&y| y == 1.0) {
        log::warn!("every labeled turn is positive; the classifier will always fire");
    }
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let n = xs.len() as f64;
    for _ in 0..cfg.iterations {
        let mut g = vec![0.0; dim];
        for (x, &y) in xs.iter().zip(&ys) {
            let err = sigmoid(dot(&w, x)) - y;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += err * xj;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= cfg.learning_rate * (gj / n + cfg.l2 * *wj);
        }
    }
    Ok(PositionModel {
        version: MODEL_VERSION,
        schema_hash: schema_hash(kb),
        weights: w,
        threshold: cfg.threshold,
    })
}

impl PositionModel {
    /// Per-turn firing probabilities.
    pub fn probabilities(&self, dialog: &Dialog, kb: &KnowledgeBase) -> Vec<f64> {
        turn_features(dialog, kb)
            .iter()
            .map(|x| sigmoid(dot(&self.weights, x)))
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json_str(text: &str, kb: &KnowledgeBase) -> Result<Self, PositionError> {
        let m: Self = serde_json::from_str(text)?;
        let expected = schema_hash(kb);
        if m.schema_hash != expected || m.version != MODEL_VERSION || m.weights.len() != kb.fields().len() + 4 {
            return Err(PositionError::SchemaMismatch {
                expected,
                found: m.schema_hash,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PositionError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, kb: &KnowledgeBase) -> Result<Self, PositionError> {
        Self::from_json_str(&std::fs::read_to_string(path)?, kb)
    }
}

/// First turn whose probability reaches `threshold`, else the last turn.
pub fn first_crossing(probabilities: &[f64], threshold: f64) -> usize {
    probabilities
        .iter()
        .position(|&p| p >= threshold)
        .map_or(probabilities.len(), |i| i + 1)
}

pub fn predict_position(model: &PositionModel, dialog: &Dialog, kb: &KnowledgeBase) -> usize {
    first_crossing(&model.probabilities(dialog, kb), model.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionMetrics {
    /// Share of dialogs classified 1 at the gold turn and 0 at every turn before.
    pub accuracy: f64,
    /// Share of dialogs whose predicted turn equals the gold turn.
    pub lenient_accuracy: f64,
    /// Mean absolute difference between predicted and gold turns.
    pub average_turn_difference: f64,
}

/// Scores per-turn probability sequences against gold turns.
pub fn score_positions(probabilities: &[Vec<f64>], gold: &[usize], threshold: f64) -> PositionMetrics {
    assert_eq!(probabilities.len(), gold.len());
    let n = gold.len().max(1) as f64;
    let mut strict = 0;
    let mut lenient = 0;
    let mut diff = 0.0;
    for (p, &q) in probabilities.iter().zip(gold) {
        let predicted = first_crossing(p, threshold);
        if p.get(q - 1).is_some_and(|&x| x >= threshold) && p[..q - 1].iter().all(|&x| x < threshold) {
            strict += 1;
        }
        if predicted == q {
            lenient += 1;
        }
        diff += predicted.abs_diff(q) as f64;
    }
    PositionMetrics {
        accuracy: strict as f64 / n,
        lenient_accuracy: lenient as f64 / n,
        average_turn_difference: diff / n,
    }
}

pub fn position_metrics(
    model: &PositionModel,
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
) -> Result<PositionMetrics, PositionError> {
    let mut probs = Vec::with_capacity(dialogs.len());
    let mut gold = Vec::with_capacity(dialogs.len());
    for (i, d) in dialogs.iter().enumerate() {
        gold.push(d.gold_position.ok_or(PositionError::MissingGold(i))?);
        probs.push(model.probabilities(d, kb));
    }
    Ok(score_positions(&probs, &gold, model.threshold))
}

/// Accuracy and turn difference of precomputed positions (for example the
/// heuristic labels) against gold. Dialogs without a prediction fire at
/// their last turn.
pub fn label_metrics(
    dialogs: &[Dialog],
    predicted: impl Fn(&Dialog) -> Option<usize>,
) -> Result<PositionMetrics, PositionError> {
    let n = dialogs.len().max(1) as f64;
    let mut hits = 0;
    let mut diff = 0.0;
    for (i, d) in dialogs.iter().enumerate() {
        let q = d.gold_position.ok_or(PositionError::MissingGold(i))?;
        let p = predicted(d).unwrap_or(d.num_turns());
        hits += usize::from(p == q);
        diff += p.abs_diff(q) as f64;
    }
    let acc = hits as f64 / n;
    Ok(PositionMetrics {
        accuracy: acc,
        lenient_accuracy: acc,
        average_turn_difference: diff / n,
    })
}
