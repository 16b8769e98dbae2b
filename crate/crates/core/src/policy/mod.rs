//! Grammar-constrained log-linear autoregressive policy over query actions.
//!
//! A query is decoded as a sequence of [`Action`]s through the [`Grammar`]
//! automaton. At each non-forced step the policy is a softmax over the valid
//! actions of `w · f(context, prefix, action)`; steps with a single valid
//! action have probability one and contribute nothing to scores or gradients.

mod features;
mod grammar;

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{ActionVocabulary, FeatureTemplate, Layout, PolicyContext, MAX_FIELDS};
pub use grammar::{Action, Grammar, GrammarState, Keyword, StateKind, CLAUSE_TOKENS, HEADER_TOKENS};

use crate::kb::{parse_query, Query};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token {position} ({token:?}) is not a valid continuation")]
    Ungrammatical { position: usize, token: String },
    #[error("action sequence ends before <eoq>")]
    Unterminated,
    #[error("checkpoint was built for feature template {found}, expected {expected}")]
    TemplateMismatch { expected: String, found: String },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("malformed checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A decoded sequence and its log probability under the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub actions: Vec<Action>,
    pub logprob: f64,
}

/// Weight vector of the log-linear policy, tied to the template it indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    template: FeatureTemplate,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    template: FeatureTemplate,
    template_hash: String,
    weights: Vec<f64>,
}

impl PolicyParameters {
    /// All-zero weights: the uniform policy over valid actions.
    pub fn zeros(template: FeatureTemplate) -> Self {
        let dim = template.dim();
        Self {
            template,
            weights: vec![0.0; dim],
        }
    }

    pub fn template(&self) -> &FeatureTemplate {
        &self.template
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// `w += scale * g`.
    pub fn step(&mut self, gradient: &[f64], scale: f64) {
        assert_eq!(gradient.len(), self.weights.len(), "gradient dimension");
        for (w, g) in self.weights.iter_mut().zip(gradient) {
            *w += scale * g;
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            template: self.template.clone(),
            template_hash: self.template.hash(),
            weights: self.weights.clone(),
        })
        .expect("checkpoint serializes")
    }

    /// Parses a checkpoint, rejecting it unless its template hash equals the
    /// hash of `expected` (when given).
    pub fn from_json_str(text: &str, expected: Option<&FeatureTemplate>) -> Result<Self, PolicyError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Corrupt(format!("unsupported version {}", ck.version)));
        }
        let actual = ck.template.hash();
        if actual != ck.template_hash {
            return Err(PolicyError::TemplateMismatch {
                expected: actual,
                found: ck.template_hash,
            });
        }
        if let Some(t) = expected {
            if t.hash() != ck.template_hash {
                return Err(PolicyError::TemplateMismatch {
                    expected: t.hash(),
                    found: ck.template_hash,
                });
            }
        }
        if ck.weights.len() != ck.template.dim() {
            return Err(PolicyError::Corrupt(format!(
                "{} weights for a {}-dimensional template",
                ck.weights.len(),
                ck.template.dim()
            )));
        }
        Ok(Self {
            template: ck.template,
            weights: ck.weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&FeatureTemplate>) -> Result<Self, PolicyError> {
        Self::from_json_str(&std::fs::read_to_string(path)?, expected)
    }

    fn check(&self, pc: &PolicyContext) {
        assert_eq!(pc.dim(), self.weights.len(), "context compiled for another template");
    }

    fn score(&self, pc: &PolicyContext, gs: &GrammarState, prev: Option<Action>, a: Action, buf: &mut Vec<u32>) -> f64 {
        buf.clear();
        pc.features(gs, prev, a, buf);
        buf.iter().map(|&i| self.weights[i as usize]).sum()
    }

    /// Valid actions at `gs` with their probabilities.
    fn distribution(
        &self,
        pc: &PolicyContext,
        gs: &GrammarState,
        prev: Option<Action>,
        buf: &mut Vec<u32>,
    ) -> Vec<(Action, f64)> {
        let actions = pc.valid_actions(gs);
        if actions.len() == 1 {
            return vec![(actions[0], 1.0)];
        }
        let scores: Vec<f64> = actions.iter().map(|&a| self.score(pc, gs, prev, a, buf)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        actions.into_iter().zip(exp).map(|(a, e)| (a, e / z)).collect()
    }

    /// Replays `prefix` through the grammar, returning the state and last action.
    fn replay(&self, pc: &PolicyContext, prefix: &[Action]) -> Result<(GrammarState, Option<Action>), PolicyError> {
        let mut gs = pc.grammar().initial();
        for (i, &a) in prefix.iter().enumerate() {
            gs = pc.advance(&gs, a).ok_or_else(|| PolicyError::Ungrammatical {
                position: i,
                token: token_or_index(pc, a),
            })?;
        }
        Ok((gs, prefix.last().copied()))
    }

    /// Next-action distribution after `prefix`; empty once `<eoq>` was taken.
    pub fn step_distribution(&self, pc: &PolicyContext, prefix: &[Action]) -> Result<Vec<(Action, f64)>, PolicyError> {
        self.check(pc);
        let (gs, prev) = self.replay(pc, prefix)?;
        if gs.is_terminal() {
            return Ok(Vec::new());
        }
        Ok(self.distribution(pc, &gs, prev, &mut Vec::new()))
    }

    pub fn sequence_logprob(&self, pc: &PolicyContext, actions: &[Action]) -> Result<f64, PolicyError> {
        self.accumulate_logprob_gradient(pc, actions, 0.0, &mut [])
    }

    /// `∇ log π(actions)` as a dense vector.
    pub fn logprob_gradient(&self, pc: &PolicyContext, actions: &[Action]) -> Result<Vec<f64>, PolicyError> {
        let mut g = vec![0.0; self.dim()];
        self.accumulate_logprob_gradient(pc, actions, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `scale · ∇ log π(actions)` into `grad` and returns `log π(actions)`.
    /// With `scale == 0` the gradient pass is skipped and `grad` may be empty.
    pub fn accumulate_logprob_gradient(
        &self,
        pc: &PolicyContext,
        actions: &[Action],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, PolicyError> {
        self.check(pc);
        let mut gs = pc.grammar().initial();
        let mut prev = None;
        let mut logprob = 0.0;
        let mut buf = Vec::new();
        for (i, &a) in actions.iter().enumerate() {
            let dist = if gs.is_terminal() {
                Vec::new()
            } else {
                self.distribution(pc, &gs, prev, &mut buf)
            };
            let Some(&(_, p)) = dist.iter().find(|(b, _)| *b == a) else {
                return Err(PolicyError::Ungrammatical {
                    position: i,
                    token: token_or_index(pc, a),
                });
            };
            if dist.len() > 1 {
                logprob += p.ln();
                if scale != 0.0 {
                    buf.clear();
                    pc.features(&gs, prev, a, &mut buf);
                    for &f in &buf {
                        grad[f as usize] += scale;
                    }
                    for &(b, q) in &dist {
                        buf.clear();
                        pc.features(&gs, prev, b, &mut buf);
                        for &f in &buf {
                            grad[f as usize] -= scale * q;
                        }
                    }
                }
            }
            gs = pc.advance(&gs, a).expect("valid action advances");
            prev = Some(a);
        }
        if !gs.is_terminal() {
            return Err(PolicyError::Unterminated);
        }
        Ok(logprob)
    }

    /// Ancestral sample. `max_len` bounds the tokens before `<eoq>`: once
    /// another clause would not fit, `<eoq>` is forced at the clause boundary.
    pub fn sample<R: Rng + ?Sized>(&self, pc: &PolicyContext, rng: &mut R, max_len: usize) -> Vec<Action> {
        self.check(pc);
        assert!(max_len >= HEADER_TOKENS, "max_len below the shortest query");
        let mut gs = pc.grammar().initial();
        let mut prev = None;
        let mut out = Vec::with_capacity(max_len + 1);
        let mut buf = Vec::new();
        while !gs.is_terminal() {
            let a = if Grammar::at_clause_boundary(&gs) && gs.len + CLAUSE_TOKENS > max_len {
                Action::EOQ
            } else {
                let dist = self.distribution(pc, &gs, prev, &mut buf);
                if dist.len() == 1 {
                    dist[0].0
                } else {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = dist[dist.len() - 1].0;
                    for &(a, p) in &dist {
                        acc += p;
                        if u < acc {
                            pick = a;
                            break;
                        }
                    }
                    pick
                }
            };
            gs = pc.advance(&gs, a).expect("sampled action is valid");
            prev = Some(a);
            out.push(a);
        }
        out
    }

    /// Length-synchronized beam search. Returns at most `beam_width` finished
    /// hypotheses by descending log probability, ties broken by token order.
    pub fn beam_search(&self, pc: &PolicyContext, beam_width: usize) -> Vec<Hypothesis> {
        self.beam(pc, beam_width, |cands, k| cands.truncate(k))
    }

    /// Beam search where each of the `beam_width` slots is, with probability
    /// `epsilon`, filled by a uniformly random remaining candidate instead of
    /// the best remaining one.
    pub fn randomized_beam_search<R: Rng + ?Sized>(
        &self,
        pc: &PolicyContext,
        beam_width: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Vec<Hypothesis> {
        assert!((0.0..=1.0).contains(&epsilon), "epsilon outside [0, 1]");
        self.beam(pc, beam_width, |cands, k| {
            let mut kept = Vec::with_capacity(k.min(cands.len()));
            while kept.len() < k && !cands.is_empty() {
                let i = if epsilon > 0.0 && rng.random_bool(epsilon) {
                    rng.random_range(0..cands.len())
                } else {
                    0
                };
                kept.push(cands.remove(i));
            }
            *cands = kept;
        })
    }

    fn beam<F>(&self, pc: &PolicyContext, beam_width: usize, mut select: F) -> Vec<Hypothesis>
    where
        F: FnMut(&mut Vec<(Hypothesis, GrammarState)>, usize),
    {
        self.check(pc);
        assert!(beam_width >= 1, "beam width must be positive");
        let mut active = vec![(
            Hypothesis {
                actions: Vec::new(),
                logprob: 0.0,
            },
            pc.grammar().initial(),
        )];
        let mut finished = Vec::new();
        let mut buf = Vec::new();
        while !active.is_empty() {
            let mut cands = Vec::new();
            for (h, gs) in &active {
                for (a, p) in self.distribution(pc, gs, h.actions.last().copied(), &mut buf) {
                    let mut actions = h.actions.clone();
                    actions.push(a);
                    let next = pc.advance(gs, a).expect("valid action advances");
                    let logprob = if p == 1.0 { h.logprob } else { h.logprob + p.ln() };
                    cands.push((Hypothesis { actions, logprob }, next));
                }
            }
            cands.sort_by(|a, b| rank(pc, &a.0, &b.0));
            select(&mut cands, beam_width);
            active.clear();
            for (h, gs) in cands {
                if gs.is_terminal() {
                    finished.push(h);
                } else {
                    active.push((h, gs));
                }
            }
        }
        finished.sort_by(|a, b| rank(pc, a, b));
        finished.truncate(beam_width);
        finished
    }

    /// Beam-1 decode.
    pub fn greedy(&self, pc: &PolicyContext) -> Vec<Action> {
        self.beam_search(pc, 1).swap_remove(0).actions
    }
}

fn rank(pc: &PolicyContext, a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| {
        let ta = a.actions.iter().map(|&x| pc.vocab.token(x));
        let tb = b.actions.iter().map(|&x| pc.vocab.token(x));
        ta.cmp(tb)
    })
}

fn token_or_index(pc: &PolicyContext, a: Action) -> String {
    match a {
        Action::Field(f) if f >= pc.vocab.fields.len() => format!("field #{f}"),
        Action::Value(v) if v >= pc.vocab.copyable.len() => format!("value #{v}"),
        _ => pc.vocab.token(a).to_string(),
    }
}

impl PolicyContext {
    pub fn tokens(&self, actions: &[Action]) -> Vec<String> {
        actions.iter().map(|&a| self.vocab.token(a).to_string()).collect()
    }

    /// Maps query tokens to actions, failing on tokens outside this
    /// context's action space or on ungrammatical sequences.
    pub fn actions<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<Action>, PolicyError> {
        let mut gs = self.grammar.initial();
        let mut out = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let t = t.as_ref();
            let bad = || PolicyError::Ungrammatical {
                position: i,
                token: t.to_string(),
            };
            let a = match gs.kind {
                StateKind::FieldSlot => Action::Field(self.vocab.fields.iter().position(|f| f == t).ok_or_else(bad)?),
                StateKind::ValueSlot(_) => Action::Value(
                    self.vocab
                        .copyable
                        .binary_search_by(|v| v.as_str().cmp(t))
                        .map_err(|_| bad())?,
                ),
                _ => Action::Keyword(Keyword::from_token(t).ok_or_else(bad)?),
            };
            gs = self.advance(&gs, a).ok_or_else(bad)?;
            out.push(a);
        }
        if !gs.is_terminal() {
            return Err(PolicyError::Unterminated);
        }
        Ok(out)
    }

    /// The query a terminated action sequence denotes.
    pub fn to_query(&self, actions: &[Action]) -> Query {
        parse_query(&self.tokens(actions)).expect("grammar paths parse")
    }

    /// Every action sequence realizing `query`, one per clause ordering, or
    /// `None` if the query lies outside this context's action space.
    pub fn realizations(&self, query: &Query) -> Option<Vec<Vec<Action>>> {
        if query.len() > self.grammar.max_clauses {
            return None;
        }
        let mut clauses = Vec::with_capacity(query.len());
        for c in query.clauses() {
            let f = self.vocab.fields.iter().position(|x| *x == c.field)?;
            let v = self.vocab.copyable.binary_search(&c.value).ok()?;
            clauses.push((f, v));
        }
        clauses.sort_unstable();
        let mut out = Vec::new();
        loop {
            let mut seq: Vec<Action> = [Keyword::Select, Keyword::Star, Keyword::From, Keyword::Table]
                .map(Action::Keyword)
                .to_vec();
            for (i, &(f, v)) in clauses.iter().enumerate() {
                seq.push(Action::Keyword(if i == 0 { Keyword::Where } else { Keyword::And }));
                seq.extend([Action::Field(f), Action::Keyword(Keyword::Eq), Action::Value(v)]);
            }
            seq.push(Action::EOQ);
            out.push(seq);
            if !next_permutation(&mut clauses) {
                break;
            }
        }
        Some(out)
    }
}

fn next_permutation<T: Ord>(xs: &mut [T]) -> bool {
    let Some(i) = xs.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = xs.iter().rposition(|x| *x > xs[i]).expect("pivot has a successor");
    xs.swap(i, j);
    xs[i + 1..].reverse();
    true
}
