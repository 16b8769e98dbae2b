//! Random small instances and brute-force oracles shared by the property
//! tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use kbq_core::buffer::BufferPair;
use kbq_core::dialog::{tokenize, DialogContext, EntitySet};
use kbq_core::kb::{KnowledgeBase, Query};
use kbq_core::policy::{Action, FeatureTemplate, PolicyContext, PolicyParameters};
use kbq_core::reward::RewardValue;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const FIELDS: [&str; 4] = ["name", "food", "price", "area"];
const FOODS: [&str; 4] = ["thai", "greek", "french", "indian"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const AREAS: [&str; 3] = ["north", "south", "centre"];
const FILLER: [&str; 5] = ["please", "want", "a", "place", "food"];

pub struct Instance {
    pub kb: KnowledgeBase,
    pub context: DialogContext,
    pub es: EntitySet,
    pub pc: PolicyContext,
    pub params: PolicyParameters,
}

/// A KB of `rows` restaurants over [`FIELDS`].
pub fn random_kb<R: Rng>(rng: &mut R, rows: usize) -> KnowledgeBase {
    let rows = (0..rows)
        .map(|i| {
            vec![
                format!("r{i}"),
                FOODS.choose(rng).unwrap().to_string(),
                PRICES.choose(rng).unwrap().to_string(),
                AREAS.choose(rng).unwrap().to_string(),
            ]
        })
        .collect();
    KnowledgeBase::new(FIELDS.map(String::from).to_vec(), rows).unwrap()
}

/// One utterance of `words` tokens drawn from KB values and filler.
pub fn random_context<R: Rng>(rng: &mut R, kb: &KnowledgeBase, words: usize) -> DialogContext {
    let mut pool: Vec<String> = FILLER.map(String::from).to_vec();
    for row in kb.rows() {
        pool.extend(row[1..].iter().cloned());
    }
    let text: Vec<String> = (0..words).map(|_| pool.choose(rng).unwrap().clone()).collect();
    DialogContext::from_utterances(vec![tokenize(&text.join(" "))]).unwrap()
}

/// A non-empty subset of one row's values, sometimes with an unknown entity.
pub fn random_entities<R: Rng>(rng: &mut R, kb: &KnowledgeBase) -> EntitySet {
    let row = kb.rows().choose(rng).unwrap();
    let mut es: EntitySet = row.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
    if es.is_empty() {
        es.insert(row[0].clone());
    }
    if rng.random_bool(0.1) {
        es.insert("nowhere_to_be_found".into());
    }
    es
}

pub fn random_weights<R: Rng>(rng: &mut R, params: &mut PolicyParameters, scale: f64) {
    for w in params.weights_mut() {
        *w = rng.random_range(-scale..scale);
    }
}

pub fn random_instance<R: Rng>(rng: &mut R, rows: usize, words: usize, max_clauses: usize) -> Instance {
    let kb = random_kb(rng, rows);
    let context = random_context(rng, &kb, words);
    let es = random_entities(rng, &kb);
    let template = FeatureTemplate::new(&kb, 4, max_clauses);
    let pc = PolicyContext::new(&template, &kb, &context);
    let mut params = PolicyParameters::zeros(template);
    random_weights(rng, &mut params, 0.5);
    Instance {
        kb,
        context,
        es,
        pc,
        params,
    }
}

/// Every terminated action sequence of the context's grammar, by depth-first
/// walk over the automaton.
pub fn terminated_sequences(pc: &PolicyContext) -> Vec<Vec<Action>> {
    fn walk(
        pc: &PolicyContext,
        gs: kbq_core::policy::GrammarState,
        prefix: &mut Vec<Action>,
        out: &mut Vec<Vec<Action>>,
    ) {
        if gs.is_terminal() {
            out.push(prefix.clone());
            return;
        }
        for a in pc.valid_actions(&gs) {
            let next = pc.advance(&gs, a).unwrap();
            prefix.push(a);
            walk(pc, next, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    walk(pc, pc.grammar().initial(), &mut Vec::new(), &mut out);
    out
}

/// Reward computed straight from its definition: the values of every row
/// satisfying all clauses form `E^a`; the reward is `|E^s|/|E^a|` when
/// `E^s ⊆ E^a`, else 0.
pub fn oracle_reward(query: &Query, es: &EntitySet, kb: &KnowledgeBase) -> f64 {
    let mut ea = BTreeSet::new();
    for row in kb.rows() {
        let ok = query.clauses().iter().all(|c| {
            kb.fields()
                .iter()
                .position(|f| *f == c.field)
                .is_some_and(|i| row[i] == c.value)
        });
        if ok {
            ea.extend(row.iter().cloned());
        }
    }
    if ea.is_empty() || !es.iter().all(|e| ea.contains(e)) {
        0.0
    } else {
        es.len() as f64 / ea.len() as f64
    }
}

/// Positive-reward canonical queries reachable through the policy grammar.
pub fn brute_force_positive(pc: &PolicyContext, es: &EntitySet, kb: &KnowledgeBase) -> BTreeMap<Query, f64> {
    let mut out = BTreeMap::new();
    for seq in terminated_sequences(pc) {
        let q = pc.to_query(&seq).canonicalize();
        let r = oracle_reward(&q, es, kb);
        if r > 0.0 {
            out.insert(q, r);
        }
    }
    out
}

fn prob(params: &PolicyParameters, pc: &PolicyContext, seq: &[Action]) -> f64 {
    params.sequence_logprob(pc, seq).unwrap().exp()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

/// `Σ_a π(a) R(a) ∇log π(a)` over every terminated sequence.
pub fn exact_expected_reward_gradient(inst: &Instance) -> Vec<f64> {
    let mut g = vec![0.0; inst.params.dim()];
    for seq in terminated_sequences(&inst.pc) {
        let r = oracle_reward(&inst.pc.to_query(&seq), &inst.es, &inst.kb);
        if r > 0.0 {
            let p = prob(&inst.params, &inst.pc, &seq);
            axpy(&mut g, p * r, &inst.params.logprob_gradient(&inst.pc, &seq).unwrap());
        }
    }
    g
}

/// Exact mean of the two-buffer estimator: each region's policy-weighted
/// expectation, renormalized to that region and scaled by its clipped mass.
pub fn exact_two_buffer_gradient(inst: &Instance, buffers: &BufferPair, alpha_h: f64, alpha_o: f64) -> Vec<f64> {
    let seqs = terminated_sequences(&inst.pc);
    let region = |q: &Query| {
        if buffers.high().contains(q) {
            0
        } else if buffers.other().contains(q) {
            1
        } else {
            2
        }
    };
    let mut mass = [0.0; 3];
    let mut part = vec![vec![0.0; inst.params.dim()]; 3];
    for seq in &seqs {
        let q = inst.pc.to_query(seq).canonicalize();
        let k = region(&q);
        let p = prob(&inst.params, &inst.pc, seq);
        mass[k] += p;
        let r = oracle_reward(&q, &inst.es, &inst.kb);
        if r > 0.0 {
            axpy(
                &mut part[k],
                p * r,
                &inst.params.logprob_gradient(&inst.pc, seq).unwrap(),
            );
        }
    }
    let floor = |a: f64, empty: bool| if empty { 0.0 } else { a };
    let c_h = if mass[0] >= floor(alpha_h, buffers.high().is_empty()) {
        mass[0]
    } else {
        alpha_h
    };
    let lo = (1.0 - c_h) * floor(alpha_o, buffers.other().is_empty());
    let c_o = if mass[1] > 1.0 - c_h {
        1.0 - c_h
    } else if mass[1] < lo {
        lo
    } else {
        mass[1]
    };
    let weights = [c_h, c_o, 1.0 - c_h - c_o];
    let mut g = vec![0.0; inst.params.dim()];
    for k in 0..3 {
        if mass[k] > 0.0 {
            axpy(&mut g, weights[k] / mass[k], &part[k]);
        }
    }
    g
}

/// A buffer pair holding the given positive queries.
pub fn buffers_from(entries: impl IntoIterator<Item = (Query, f64)>) -> BufferPair {
    let mut b = BufferPair::new();
    for (q, r) in entries {
        b.insert(q, RewardValue::new(r).unwrap()).unwrap();
    }
    b
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Central finite-difference gradient of `log π(seq)`.
pub fn finite_difference(params: &PolicyParameters, pc: &PolicyContext, seq: &[Action], h: f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.dim())
        .map(|i| {
            let w = p.weights()[i];
            p.weights_mut()[i] = w + h;
            let up = p.sequence_logprob(pc, seq).unwrap();
            p.weights_mut()[i] = w - h;
            let down = p.sequence_logprob(pc, seq).unwrap();
            p.weights_mut()[i] = w;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Sample mean and standard error of `xs`.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
