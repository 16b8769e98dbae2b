//! Dialogs, dialog contexts, entity linking and heuristic query-position labels.
//!
//! Turn indices are 1-based throughout: a dialog with `m` turns has positions
//! `1..=m`, and the context at position `q` is `c_1^u, c_1^s, ..., c_q^u`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{KnowledgeBase, Query};

/// Normalized KB cell values.
pub type EntitySet = BTreeSet<String>;

#[derive(Debug, Error)]
pub enum DialogError {
    #[error("dialog {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("turn {q} outside 1..={turns}")]
    PositionOutOfRange { q: usize, turns: usize },
    #[error("malformed corpus JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub user: Vec<String>,
    pub system: Vec<String>,
}

impl Turn {
    pub fn new(user: &str, system: &str) -> Self {
        Self {
            user: tokenize(user),
            system: tokenize(system),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub turns: Vec<Turn>,
    pub gold_query: Option<Query>,
    pub gold_position: Option<usize>,
    pub heuristic_position: Option<usize>,
}

/// Whitespace tokenization with lowercasing, so copied words compare equal to
/// normalized KB values.
pub fn tokenize(utterance: &str) -> Vec<String> {
    utterance.split_whitespace().map(str::to_lowercase).collect()
}

impl Dialog {
    pub fn new(turns: Vec<Turn>) -> Self {
        Self {
            turns,
            gold_query: None,
            gold_position: None,
            heuristic_position: None,
        }
    }

    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    fn check_turn(&self, q: usize) -> Result<(), DialogError> {
        if q == 0 || q > self.turns.len() {
            return Err(DialogError::PositionOutOfRange {
                q,
                turns: self.turns.len(),
            });
        }
        Ok(())
    }

    /// The prefix ending with the user utterance of turn `q`.
    pub fn context(&self, q: usize) -> Result<DialogContext, DialogError> {
        self.check_turn(q)?;
        let mut utterances = Vec::with_capacity(2 * q - 1);
        for (i, turn) in self.turns[..q].iter().enumerate() {
            utterances.push(turn.user.clone());
            if i + 1 < q {
                utterances.push(turn.system.clone());
            }
        }
        Ok(DialogContext { utterances, turn: q })
    }

    /// Utterances following the query fired at turn `q`: `c_q^s, c_{q+1}^u, ..., c_m^s`.
    pub fn subsequent(&self, q: usize) -> Result<Vec<&[String]>, DialogError> {
        self.check_turn(q)?;
        let mut out = vec![self.turns[q - 1].system.as_slice()];
        for turn in &self.turns[q..] {
            out.push(&turn.user);
            out.push(&turn.system);
        }
        Ok(out)
    }
}

/// The dialog prefix a query is predicted from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogContext {
    utterances: Vec<Vec<String>>,
    turn: usize,
}

impl DialogContext {
    /// Builds a context from alternating user/system utterances, which must
    /// end on a user utterance.
    pub fn from_utterances(utterances: Vec<Vec<String>>) -> Option<Self> {
        if utterances.len().is_multiple_of(2) {
            return None;
        }
        let turn = utterances.len().div_ceil(2);
        Some(Self { utterances, turn })
    }

    pub fn utterances(&self) -> &[Vec<String>] {
        &self.utterances
    }

    /// Query turn `q`.
    pub fn turn(&self) -> usize {
        self.turn
    }

    pub fn last_user(&self) -> &[String] {
        self.utterances.last().expect("context is never empty")
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().flatten().map(String::as_str)
    }
}

/// KB values whose normalized form is a token, or a contiguous token span
/// joined by `_`, of the utterance.
pub fn link_entities<S: AsRef<str>>(utterance: &[S], kb: &KnowledgeBase) -> EntitySet {
    let words: Vec<String> = utterance.iter().map(|w| w.as_ref().to_lowercase()).collect();
    let mut found = EntitySet::new();
    for start in 0..words.len() {
        let mut span = String::new();
        for (len, word) in words[start..].iter().take(kb.max_value_parts()).enumerate() {
            if len > 0 {
                span.push('_');
            }
            span.push_str(word);
            if kb.is_value(&span) {
                found.insert(span.clone());
            }
        }
    }
    found
}

/// `E^s` for a query fired at turn `q`.
pub fn subsequent_entities(dialog: &Dialog, q: usize, kb: &KnowledgeBase) -> Result<EntitySet, DialogError> {
    Ok(dialog
        .subsequent(q)?
        .into_iter()
        .flat_map(|u| link_entities(u, kb))
        .collect())
}

/// First turn whose system utterance mentions a KB value absent from every
/// earlier utterance.
pub fn heuristic_position(dialog: &Dialog, kb: &KnowledgeBase) -> Option<usize> {
    let mut seen = EntitySet::new();
    for (i, turn) in dialog.turns.iter().enumerate() {
        seen.extend(link_entities(&turn.user, kb));
        let said = link_entities(&turn.system, kb);
        if said.iter().any(|e| !seen.contains(e)) {
            return Some(i + 1);
        }
        seen.extend(said);
    }
    None
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTurn {
    user: Option<String>,
    system: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDialog {
    turns: Vec<RawTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heuristic_position: Option<usize>,
}

fn from_raw(index: usize, raw: RawDialog) -> Result<Dialog, DialogError> {
    let invalid = |message: String| DialogError::Invalid { index, message };
    if raw.turns.is_empty() {
        return Err(invalid("dialog has no turns".into()));
    }
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (t, turn) in raw.turns.into_iter().enumerate() {
        match (turn.user, turn.system) {
            (Some(u), Some(s)) => turns.push(Turn::new(&u, &s)),
            (None, _) => return Err(invalid(format!("turn {} has no user utterance", t + 1))),
            (_, None) => return Err(invalid(format!("turn {} has no system utterance", t + 1))),
        }
    }
    let m = turns.len();
    for (name, pos) in [
        ("gold_position", raw.gold_position),
        ("heuristic_position", raw.heuristic_position),
    ] {
        if let Some(p) = pos {
            if p == 0 || p > m {
                return Err(invalid(format!("{name} {p} outside 1..={m}")));
            }
        }
    }
    let gold_query = raw
        .gold_query
        .map(|text| text.parse::<Query>())
        .transpose()
        .map_err(|e| invalid(format!("gold_query: {e}")))?;
    Ok(Dialog {
        turns,
        gold_query,
        gold_position: raw.gold_position,
        heuristic_position: raw.heuristic_position,
    })
}

pub fn corpus_from_json_str(text: &str) -> Result<Vec<Dialog>, DialogError> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text)?;
    raw.into_iter()
        .enumerate()
        .map(|(index, value)| {
            let dialog: RawDialog = serde_json::from_value(value).map_err(|e| DialogError::Invalid {
                index,
                message: e.to_string(),
            })?;
            from_raw(index, dialog)
        })
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialog>, DialogError> {
    let corpus = corpus_from_json_str(&std::fs::read_to_string(path)?)?;
    log::info!(
        "loaded {} dialogs ({} with gold queries)",
        corpus.len(),
        corpus.iter().filter(|d| d.gold_query.is_some()).count()
    );
    Ok(corpus)
}

pub fn corpus_to_json_string(dialogs: &[Dialog]) -> String {
    let raw: Vec<RawDialog> = dialogs
        .iter()
        .map(|d| RawDialog {
            turns: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    user: Some(t.user.join(" ")),
                    system: Some(t.system.join(" ")),
                })
                .collect(),
            gold_query: d.gold_query.as_ref().map(ToString::to_string),
            gold_position: d.gold_position,
            heuristic_position: d.heuristic_position,
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("corpus serializes")
}

pub fn save_corpus(dialogs: &[Dialog], path: impl AsRef<Path>) -> Result<(), DialogError> {
    std::fs::write(path, corpus_to_json_string(dialogs) + "\n")?;
    Ok(())
}
