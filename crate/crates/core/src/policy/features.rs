//! Binary feature template for the log-linear decoder.
//!
//! Every feature is an indicator on (context, decoded prefix, candidate
//! action). Blocks, in weight-vector order:
//!
//! | block        | indexed by                                               |
//! |--------------|----------------------------------------------------------|
//! | state×action | grammar state kind × action class                        |
//! | bigram       | previous action class × action class                     |
//! | length       | clause count when choosing `<eoq>`                       |
//! | stop         | {continue, `<eoq>`} × whether mentioned fields remain    |
//! | field        | field action × field mentioned in context / last turn    |
//! | value        | copied word × its KB type and speaker                    |
//! | hashed       | context word × candidate action (bag of words)           |
//!
//! Action classes are the eight keywords, one class per field and one shared
//! class for copied words.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grammar::{Action, Grammar, GrammarState, Keyword, StateKind};
use crate::dialog::{link_entities, DialogContext};
use crate::kb::KnowledgeBase;

const TEMPLATE_VERSION: u32 = 1;
const N_KEYWORDS: usize = 8;
pub const MAX_FIELDS: usize = 64;

/// Schema-dependent feature space definition. Two templates produce the same
/// weight layout iff their [`FeatureTemplate::hash`] agree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTemplate {
    pub fields: Vec<String>,
    /// log2 of the hashed bag-of-words block size; 0 disables the block.
    pub hash_bits: u32,
    pub max_clauses: usize,
}

impl FeatureTemplate {
    pub fn new(kb: &KnowledgeBase, hash_bits: u32, max_clauses: usize) -> Self {
        assert!(kb.fields().len() <= MAX_FIELDS, "at most {MAX_FIELDS} fields supported");
        assert!(hash_bits <= 24, "hash block too large");
        Self {
            fields: kb.fields().to_vec(),
            hash_bits,
            max_clauses,
        }
    }

    pub fn grammar(&self) -> Grammar {
        Grammar {
            n_fields: self.fields.len(),
            max_clauses: self.max_clauses,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.fields.len(), self.max_clauses, self.hash_bits)
    }

    pub fn dim(&self) -> usize {
        self.layout().dim
    }

    /// Hex SHA-256 over the template version and every template parameter.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("kbq-features-v{TEMPLATE_VERSION}\n"));
        for f in &self.fields {
            h.update(f.as_bytes());
            h.update([0u8]);
        }
        h.update(format!("\nbits={} clauses={}", self.hash_bits, self.max_clauses));
        hex::encode(h.finalize())
    }
}

/// Block offsets into the weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_fields: usize,
    pub max_clauses: usize,
    classes: usize,
    state_action: usize,
    bigram: usize,
    length: usize,
    stop: usize,
    field: usize,
    value: usize,
    hashed: usize,
    hash_mask: u64,
    pub dim: usize,
}

impl Layout {
    fn new(n_fields: usize, max_clauses: usize, hash_bits: u32) -> Self {
        let classes = N_KEYWORDS + n_fields + 1;
        let states = 7 + 2 * n_fields;
        let state_action = 0;
        let bigram = state_action + states * classes;
        let length = bigram + (classes + 1) * classes;
        let stop = length + max_clauses + 1;
        let field = stop + 4;
        let value = field + 2 + n_fields;
        let hashed = value + 4 + n_fields;
        let hash_size = if hash_bits == 0 { 0 } else { 1usize << hash_bits };
        Self {
            n_fields,
            max_clauses,
            classes,
            state_action,
            bigram,
            length,
            stop,
            field,
            value,
            hashed,
            hash_mask: (hash_size as u64).wrapping_sub(1),
            dim: hashed + hash_size,
        }
    }

    fn class(&self, a: Action) -> usize {
        match a {
            Action::Keyword(k) => k as usize,
            Action::Field(f) => N_KEYWORDS + f,
            Action::Value(_) => N_KEYWORDS + self.n_fields,
        }
    }

    fn state_index(&self, kind: StateKind) -> usize {
        match kind {
            StateKind::Start => 0,
            StateKind::AfterSelect => 1,
            StateKind::AfterStar => 2,
            StateKind::AfterFrom => 3,
            StateKind::AfterTable => 4,
            StateKind::FieldSlot => 5,
            StateKind::AfterValue => 6,
            StateKind::AfterField(f) => 7 + f,
            StateKind::ValueSlot(f) => 7 + self.n_fields + f,
            StateKind::Done => unreachable!("no actions after <eoq>"),
        }
    }

    fn hashed_index(&self, key: u64) -> Option<u32> {
        (self.hash_mask != u64::MAX).then(|| (self.hashed as u64 + (key & self.hash_mask)) as u32)
    }
}

/// FNV-1a over a sequence of byte strings, with a separator between parts so
/// that `("ab", "c")` and `("a", "bc")` differ.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in part.iter().chain(&[0xffu8]) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// The per-context action space: schema fields and the words that may be
/// copied into WHERE values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionVocabulary {
    pub fields: Vec<String>,
    /// Distinct context words plus linked multi-word KB values, sorted.
    pub copyable: Vec<String>,
}

impl ActionVocabulary {
    pub fn token(&self, action: Action) -> &str {
        match action {
            Action::Keyword(k) => k.token(),
            Action::Field(f) => &self.fields[f],
            Action::Value(v) => &self.copyable[v],
        }
    }
}

/// A dialog context compiled against a feature template: the action
/// vocabulary plus every context-dependent feature, precomputed once.
#[derive(Debug, Clone)]
pub struct PolicyContext {
    pub(crate) layout: Layout,
    pub(crate) grammar: Grammar,
    pub(crate) vocab: ActionVocabulary,
    /// Fields with a value mentioned anywhere in the context.
    mentioned: u64,
    /// Fields with a value mentioned in the last user utterance.
    mentioned_last: u64,
    /// For each copyable word, the fields it is a KB value of.
    value_fields: Vec<u64>,
    /// Whether each copyable word occurs in a user utterance.
    value_by_user: Vec<bool>,
    bow_field: Vec<Vec<u32>>,
    /// Indexed by `field * copyable.len() + value`.
    bow_value: Vec<Vec<u32>>,
    bow_continue: Vec<u32>,
    bow_stop: Vec<u32>,
}

fn field_mask(kb: &KnowledgeBase, values: impl IntoIterator<Item = String>) -> u64 {
    values
        .into_iter()
        .flat_map(|v| kb.fields_of_value(&v).to_vec())
        .fold(0, |m, f| m | (1 << f))
}

impl PolicyContext {
    pub fn new(template: &FeatureTemplate, kb: &KnowledgeBase, context: &DialogContext) -> Self {
        assert_eq!(template.fields, kb.fields(), "template was built for another schema");
        let layout = template.layout();
        let words: BTreeSet<&str> = context.tokens().collect();
        let mut copyable: BTreeSet<String> = words.iter().map(|w| w.to_string()).collect();
        let mut linked = BTreeSet::new();
        for u in context.utterances() {
            linked.extend(link_entities(u, kb));
        }
        copyable.extend(linked.iter().cloned());
        let copyable: Vec<String> = copyable.into_iter().collect();
        let last = link_entities(context.last_user(), kb);
        // user utterances sit at even positions
        let mut by_user = BTreeSet::new();
        for u in context.utterances().iter().step_by(2) {
            by_user.extend(u.iter().cloned());
            by_user.extend(link_entities(u, kb));
        }

        let value_fields = copyable.iter().map(|v| field_mask(kb, [v.clone()])).collect();
        let value_by_user = copyable.iter().map(|v| by_user.contains(v)).collect();

        let hashed = |tag: &[u8], extra: &[&[u8]]| -> Vec<u32> {
            words
                .iter()
                .filter_map(|w| {
                    let mut parts: Vec<&[u8]> = vec![tag];
                    parts.extend_from_slice(extra);
                    parts.push(w.as_bytes());
                    layout.hashed_index(fnv1a(&parts))
                })
                .collect()
        };
        let n = kb.fields().len();
        let bow_field = (0..n).map(|f| hashed(b"field", &[kb.fields()[f].as_bytes()])).collect();
        let mut bow_value = Vec::with_capacity(n * copyable.len());
        for f in 0..n {
            for v in &copyable {
                bow_value.push(hashed(b"value", &[kb.fields()[f].as_bytes(), v.as_bytes()]));
            }
        }
        Self {
            layout,
            grammar: template.grammar(),
            mentioned: field_mask(kb, linked),
            mentioned_last: field_mask(kb, last),
            value_fields,
            value_by_user,
            bow_field,
            bow_value,
            bow_continue: hashed(b"continue", &[]),
            bow_stop: hashed(b"stop", &[]),
            vocab: ActionVocabulary {
                fields: kb.fields().to_vec(),
                copyable,
            },
        }
    }

    pub fn vocabulary(&self) -> &ActionVocabulary {
        &self.vocab
    }

    pub fn grammar(&self) -> Grammar {
        self.grammar
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn valid_actions(&self, gs: &GrammarState) -> Vec<Action> {
        self.grammar.valid_actions(gs, self.vocab.copyable.len())
    }

    pub fn advance(&self, gs: &GrammarState, action: Action) -> Option<GrammarState> {
        self.grammar.advance(gs, action, self.vocab.copyable.len())
    }

    /// Appends the active feature indices of `action` taken at `gs` after `prev`.
    pub(crate) fn features(&self, gs: &GrammarState, prev: Option<Action>, action: Action, out: &mut Vec<u32>) {
        let l = &self.layout;
        let class = l.class(action);
        let idx = |i: usize| i as u32;
        out.push(idx(l.state_action + l.state_index(gs.kind) * l.classes + class));
        let prev_class = prev.map_or(l.classes, |p| l.class(p));
        out.push(idx(l.bigram + prev_class * l.classes + class));

        let remaining = self.mentioned & !gs.constrained != 0;
        match action {
            Action::Keyword(Keyword::Eoq) => {
                out.push(idx(l.length + gs.clauses.min(l.max_clauses)));
                out.push(idx(l.stop + 2 + usize::from(!remaining)));
                out.extend_from_slice(&self.bow_stop);
            }
            Action::Keyword(Keyword::Where | Keyword::And) => {
                out.push(idx(l.stop + usize::from(!remaining)));
                out.extend_from_slice(&self.bow_continue);
            }
            Action::Keyword(_) => {}
            Action::Field(f) => {
                if self.mentioned & (1 << f) != 0 {
                    out.push(idx(l.field));
                    out.push(idx(l.field + 2 + f));
                }
                if self.mentioned_last & (1 << f) != 0 {
                    out.push(idx(l.field + 1));
                }
                out.extend_from_slice(&self.bow_field[f]);
            }
            Action::Value(v) => {
                let StateKind::ValueSlot(f) = gs.kind else {
                    unreachable!("values are only copied into value slots")
                };
                let types = self.value_fields[v];
                if types & (1 << f) != 0 {
                    out.push(idx(l.value));
                    out.push(idx(l.value + 4 + f));
                } else if types != 0 {
                    out.push(idx(l.value + 1));
                } else {
                    out.push(idx(l.value + 2));
                }
                if self.value_by_user[v] {
                    out.push(idx(l.value + 3));
                }
                out.extend_from_slice(&self.bow_value[f * self.vocab.copyable.len() + v]);
            }
        }
    }
}
