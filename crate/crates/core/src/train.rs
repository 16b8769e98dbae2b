//! Training loop with early stopping, and query-level evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{update_buffers, Buffer, BufferPair};
use crate::dialog::{heuristic_position, subsequent_entities, Dialog, DialogContext, EntitySet};
use crate::estimators::{self, Diagnostics, EstimatorError, Example, GradientEstimate};
use crate::explore::systematic_explore;
use crate::kb::{KnowledgeBase, Query};
use crate::policy::{Action, FeatureTemplate, PolicyContext, PolicyParameters};
use crate::position::{predict_position, PositionModel};
use crate::reward::reward;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dialog {0} has no gold query")]
    MissingGold(usize),
    #[error("dialog {0} has no {1} position")]
    MissingPosition(usize, &'static str),
    #[error("predicted positions need a position model")]
    NoPositionModel,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("dialog {index}: {message}")]
    Data { index: usize, message: String },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Reinforce,
    Bs,
    Rbs,
    Mapo,
    Mbmapo,
    Sl,
    Slrl,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        Self::Reinforce,
        Self::Bs,
        Self::Rbs,
        Self::Mapo,
        Self::Mbmapo,
        Self::Sl,
        Self::Slrl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Reinforce => "reinforce",
            Self::Bs => "bs",
            Self::Rbs => "rbs",
            Self::Mapo => "mapo",
            Self::Mbmapo => "mbmapo",
            Self::Sl => "sl",
            Self::Slrl => "slrl",
        }
    }

    fn uses_buffers(self) -> bool {
        matches!(self, Self::Mapo | Self::Mbmapo | Self::Slrl)
    }

    fn needs_gold(self) -> bool {
        matches!(self, Self::Sl | Self::Slrl)
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown estimator `{s}`"))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub alpha: f64,
    pub alpha_h: f64,
    pub alpha_o: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// On-policy samples per context per step.
    pub samples: usize,
    pub beam_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_clauses: usize,
    pub hash_bits: u32,
    /// Whether the clause-free query may enter the replay buffers.
    pub buffer_unconstrained: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Mbmapo,
            alpha: 0.1,
            alpha_h: 0.5,
            alpha_o: 0.1,
            lambda: 0.1,
            epsilon: 0.15,
            samples: 8,
            beam_width: 5,
            learning_rate: 0.5,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            max_clauses: 4,
            hash_bits: 12,
            buffer_unconstrained: false,
        }
    }
}

impl TrainConfig {
    /// Checks ranges and returns the names of set fields the chosen estimator
    /// ignores.
    pub fn validate(&self) -> Result<Vec<&'static str>, TrainError> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{name} = {x} outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("alpha_h", self.alpha_h)?;
        unit("alpha_o", self.alpha_o)?;
        unit("epsilon", self.epsilon)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate = {} must be > 0",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("samples", self.samples),
            ("beam_width", self.beam_width),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("max_clauses", self.max_clauses),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.hash_bits > 24 {
            return Err(TrainError::Config(format!("hash_bits = {} exceeds 24", self.hash_bits)));
        }

        use EstimatorKind::*;
        let d = Self::default();
        let e = self.estimator;
        let mut ignored = Vec::new();
        let mut check = |name, changed: bool, used: bool| {
            if changed && !used {
                ignored.push(name);
            }
        };
        check("alpha", self.alpha != d.alpha, e == Mapo);
        check("alpha_h", self.alpha_h != d.alpha_h, matches!(e, Mbmapo | Slrl));
        check("alpha_o", self.alpha_o != d.alpha_o, matches!(e, Mbmapo | Slrl));
        check("lambda", self.lambda != d.lambda, e == Slrl);
        check("epsilon", self.epsilon != d.epsilon, e == Rbs);
        check(
            "samples",
            self.samples != d.samples,
            matches!(e, Reinforce | Mapo | Mbmapo | Slrl),
        );
        check("beam_width", self.beam_width != d.beam_width, matches!(e, Bs | Rbs));
        for name in &ignored {
            log::warn!("{name} is ignored by the {e} estimator");
        }
        Ok(ignored)
    }

    pub fn template(&self, kb: &KnowledgeBase) -> FeatureTemplate {
        FeatureTemplate::new(kb, self.hash_bits, self.max_clauses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    Gold,
    Heuristic,
    Predicted,
}

impl std::str::FromStr for PositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold" => Ok(Self::Gold),
            "heuristic" => Ok(Self::Heuristic),
            "predicted" => Ok(Self::Predicted),
            _ => Err(format!("unknown position mode `{s}`")),
        }
    }
}

/// The query turn of every dialog under `mode`. Missing gold or heuristic
/// positions are errors; a heuristic label absent from the corpus is
/// recomputed from the dialog.
pub fn resolve_positions(
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
    mode: PositionMode,
    model: Option<&PositionModel>,
) -> Result<Vec<usize>, TrainError> {
    dialogs
        .iter()
        .enumerate()
        .map(|(i, d)| match mode {
            PositionMode::Gold => d.gold_position.ok_or(TrainError::MissingPosition(i, "gold")),
            PositionMode::Heuristic => d
                .heuristic_position
                .or_else(|| heuristic_position(d, kb))
                .ok_or(TrainError::MissingPosition(i, "heuristic")),
            PositionMode::Predicted => model
                .map(|m| predict_position(m, d, kb))
                .ok_or(TrainError::NoPositionModel),
        })
        .collect()
}

/// One dialog compiled for the policy at its query turn.
#[derive(Debug, Clone)]
pub struct Item {
    /// Index into the source corpus.
    pub dialog: usize,
    pub position: usize,
    pub utterances: DialogContext,
    pub context: PolicyContext,
    /// `None` when nothing after the query turn links to the KB.
    pub entities: Option<EntitySet>,
    pub gold: Option<Query>,
}

/// A corpus split compiled against one feature template.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn new(
        dialogs: &[Dialog],
        positions: &[usize],
        kb: &KnowledgeBase,
        template: &FeatureTemplate,
    ) -> Result<Self, TrainError> {
        assert_eq!(dialogs.len(), positions.len(), "one position per dialog");
        let items = dialogs
            .par_iter()
            .zip(positions)
            .enumerate()
            .map(|(i, (d, &q))| {
                let data = |e: crate::dialog::DialogError| TrainError::Data {
                    index: i,
                    message: e.to_string(),
                };
                let ctx = d.context(q).map_err(data)?;
                let es = subsequent_entities(d, q, kb).map_err(data)?;
                Ok(Item {
                    dialog: i,
                    position: q,
                    context: PolicyContext::new(template, kb, &ctx),
                    utterances: ctx,
                    entities: (!es.is_empty()).then_some(es),
                    gold: d.gold_query.as_ref().map(Query::canonicalize),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Greedy-decoded query for an item, canonical.
pub fn predict_query(params: &PolicyParameters, item: &Item) -> Query {
    item.context.to_query(&params.greedy(&item.context)).canonicalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub dialogs: usize,
    /// Share of dialogs whose prediction equals the gold query; `None` when
    /// some dialog lacks gold.
    pub query_accuracy: Option<f64>,
    pub piq_ratio: Option<f64>,
    /// Summed reward over dialogs with a non-empty target set.
    pub total_reward: f64,
    pub rewarded_dialogs: usize,
    pub mean_reward: f64,
}

/// Proper, non-empty subset of the gold clauses.
pub fn is_partial(predicted: &Query, gold: &Query) -> bool {
    let p = predicted.clause_set();
    let g = gold.clause_set();
    !p.is_empty() && p.len() < g.len() && p.is_subset(&g)
}

fn same_query(a: &Query, b: &Query) -> bool {
    a.canonicalize() == b.canonicalize()
}

/// Scores greedy predictions on `data`.
pub fn evaluate(params: &PolicyParameters, data: &Dataset, kb: &KnowledgeBase) -> QueryMetrics {
    // (exact, partial) against gold, and the reward when E^s is known
    type Scored = (Option<(bool, bool)>, Option<f64>);
    let per_item: Vec<Scored> = data
        .items
        .par_iter()
        .map(|item| {
            let q = predict_query(params, item);
            let hit = item.gold.as_ref().map(|g| (same_query(&q, g), is_partial(&q, g)));
            let r = item
                .entities
                .as_ref()
                .map(|es| reward(&q, es, kb).expect("targets are non-empty").get());
            (hit, r)
        })
        .collect();
    let n = per_item.len();
    let all_gold = n > 0 && per_item.iter().all(|(h, _)| h.is_some());
    let share = |pick: fn((bool, bool)) -> bool| {
        all_gold.then(|| per_item.iter().filter(|(h, _)| pick(h.unwrap())).count() as f64 / n as f64)
    };
    let rewards: Vec<f64> = per_item.iter().filter_map(|(_, r)| *r).collect();
    let total: f64 = rewards.iter().sum();
    QueryMetrics {
        dialogs: n,
        query_accuracy: share(|(hit, _)| hit),
        piq_ratio: share(|(_, partial)| partial),
        total_reward: total,
        rewarded_dialogs: rewards.len(),
        mean_reward: if rewards.is_empty() {
            0.0
        } else {
            total / rewards.len() as f64
        },
    }
}

fn require_gold(data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySet);
    }
    match data.items.iter().find(|it| it.gold.is_none()) {
        Some(it) => Err(TrainError::MissingGold(it.dialog)),
        None => Ok(()),
    }
}

pub fn query_accuracy(params: &PolicyParameters, data: &Dataset, kb: &KnowledgeBase) -> Result<f64, TrainError> {
    require_gold(data)?;
    Ok(evaluate(params, data, kb).query_accuracy.unwrap_or(0.0))
}

pub fn piq_ratio(params: &PolicyParameters, data: &Dataset, kb: &KnowledgeBase) -> Result<f64, TrainError> {
    require_gold(data)?;
    Ok(evaluate(params, data, kb).piq_ratio.unwrap_or(0.0))
}

pub fn total_reward(params: &PolicyParameters, data: &Dataset, kb: &KnowledgeBase) -> f64 {
    evaluate(params, data, kb).total_reward
}

/// Averages of the per-call estimator diagnostics over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    /// Buffer masses under the end-of-epoch policy. Single-buffer MAPO
    /// reports its buffer as `B_h`.
    pub avg_pi_bh: f64,
    pub avg_pi_bo: f64,
    /// Buffer masses seen by the estimator during the epoch.
    pub step_pi_bh: f64,
    pub step_pi_bo: f64,
    pub avg_pi_c_bh: f64,
    pub avg_pi_c_bo: f64,
    /// Accepted over drawn outside samples.
    pub acceptance: f64,
    pub mean_buffer_size: f64,
    pub discoveries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub diagnostics: EpochDiagnostics,
    pub train: QueryMetrics,
    pub val: QueryMetrics,
}

impl EpochRecord {
    /// `(split, metric, value)` triples for the long-format metrics table.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, f64)> {
        let mut out = Vec::new();
        for (split, m) in [("train", &self.train), ("val", &self.val)] {
            if let Some(a) = m.query_accuracy {
                out.push((split, "query_accuracy", a));
            }
            if let Some(p) = m.piq_ratio {
                out.push((split, "piq_ratio", p));
            }
            out.push((split, "total_reward", m.total_reward));
            out.push((split, "mean_reward", m.mean_reward));
        }
        let d = &self.diagnostics;
        out.extend([
            ("train", "avg_pi_bh", d.avg_pi_bh),
            ("train", "avg_pi_bo", d.avg_pi_bo),
            ("train", "step_pi_bh", d.step_pi_bh),
            ("train", "step_pi_bo", d.step_pi_bo),
            ("train", "avg_pi_c_bh", d.avg_pi_c_bh),
            ("train", "avg_pi_c_bo", d.avg_pi_c_bo),
            ("train", "acceptance", d.acceptance),
            ("train", "mean_buffer_size", d.mean_buffer_size),
            ("train", "discoveries", d.discoveries as f64),
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub estimator: EstimatorKind,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Per-epoch `(avg π_Bh, avg π_Bo)`; empty unless the run used two buffers.
pub fn buffer_dynamics(history: &TrainHistory) -> Vec<(f64, f64)> {
    if history.estimator != EstimatorKind::Mbmapo {
        return Vec::new();
    }
    history
        .epochs
        .iter()
        .map(|e| (e.diagnostics.avg_pi_bh, e.diagnostics.avg_pi_bo))
        .collect()
}

pub struct TrainOutcome {
    pub params: PolicyParameters,
    pub history: TrainHistory,
}

/// Training state of one example.
struct Slot {
    item: usize,
    entities: EntitySet,
    gold: Option<Vec<Action>>,
    buffers: BufferPair,
    /// `B_h ∪ B_o`, kept in step for single-buffer MAPO.
    union: Buffer,
}

/// Independent generator for `(seed, epoch, example)`.
fn substream(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn prepare_slots(data: &Dataset, kb: &KnowledgeBase, cfg: &TrainConfig) -> Result<Vec<Slot>, TrainError> {
    let needs_gold = cfg.estimator.needs_gold();
    let slots: Vec<Option<Slot>> = data
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let Some(es) = item.entities.clone() else {
                return Ok(None);
            };
            let gold = match &item.gold {
                Some(g) if needs_gold => match item.context.actions(&g.serialize()) {
                    Ok(a) => Some(a),
                    Err(e) => {
                        log::warn!("dialog {}: gold query not expressible ({e}); skipped", item.dialog);
                        return Ok(None);
                    }
                },
                None if needs_gold => return Err(TrainError::MissingGold(item.dialog)),
                _ => None,
            };
            let buffers = if cfg.estimator.uses_buffers() {
                let mut found = systematic_explore(&item.utterances, &es, kb, cfg.max_clauses);
                if !cfg.buffer_unconstrained {
                    found.entries.retain(|e| !e.query.is_empty());
                }
                BufferPair::from_exploration(&found)
            } else {
                BufferPair::new()
            };
            let union = buffers.union();
            Ok(Some(Slot {
                item: i,
                entities: es,
                gold,
                buffers,
                union,
            }))
        })
        .collect::<Result<_, TrainError>>()?;
    let skipped = slots.iter().filter(|s| s.is_none()).count();
    if skipped > 0 {
        log::info!("{skipped} of {} training dialogs have no usable target", data.len());
    }
    Ok(slots.into_iter().flatten().collect())
}

fn estimate(
    params: &PolicyParameters,
    cfg: &TrainConfig,
    ex: &Example,
    slot: &Slot,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate, EstimatorError> {
    use EstimatorKind::*;
    match cfg.estimator {
        Reinforce => estimators::reinforce_gradient(params, ex, cfg.samples, rng),
        Bs => estimators::bs_reinforce_gradient(params, ex, cfg.beam_width),
        Rbs => estimators::rbs_reinforce_gradient(params, ex, cfg.beam_width, cfg.epsilon, rng),
        Mapo => estimators::mapo_gradient(params, ex, &slot.union, cfg.alpha, cfg.samples, rng),
        Mbmapo => estimators::mbmapo_gradient(params, ex, &slot.buffers, cfg.alpha_h, cfg.alpha_o, cfg.samples, rng),
        Sl => Ok(GradientEstimate {
            gradient: estimators::sl_loss_gradient(params, ex.context, slot.gold.as_deref().expect("gold"))?,
            diagnostics: Diagnostics::default(),
            discoveries: Vec::new(),
        }),
        Slrl => estimators::sl_rl_gradient(
            params,
            ex,
            slot.gold.as_deref().expect("gold"),
            &slot.buffers,
            cfg.alpha_h,
            cfg.alpha_o,
            cfg.lambda,
            cfg.samples,
            rng,
        ),
    }
}

fn end_of_epoch_masses(
    params: &PolicyParameters,
    kind: EstimatorKind,
    data: &Dataset,
    slots: &[Slot],
) -> Result<(f64, f64), TrainError> {
    let masses: Vec<(f64, f64)> = slots
        .par_iter()
        .map(|slot| {
            let ctx = &data.items[slot.item].context;
            let pair = if kind == EstimatorKind::Mapo {
                (estimators::buffer_probability(params, ctx, &slot.union)?, 0.0)
            } else {
                (
                    estimators::buffer_probability(params, ctx, slot.buffers.high())?,
                    estimators::buffer_probability(params, ctx, slot.buffers.other())?,
                )
            };
            Ok(pair)
        })
        .collect::<Result<_, EstimatorError>>()?;
    let n = masses.len().max(1) as f64;
    Ok((
        masses.iter().map(|m| m.0).sum::<f64>() / n,
        masses.iter().map(|m| m.1).sum::<f64>() / n,
    ))
}

/// Trains from zero weights; returns the checkpoint with the best validation
/// total reward and the full per-epoch history.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let template = cfg.template(kb);
    let mut params = PolicyParameters::zeros(template);
    let mut slots = prepare_slots(train_set, kb, cfg)?;
    if slots.is_empty() {
        return Err(TrainError::EmptySet);
    }
    // descent gradients for the supervised objectives, ascent otherwise
    let direction = if cfg.estimator.needs_gold() { -1.0 } else { 1.0 };
    let mut order: Vec<usize> = (0..slots.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, PolicyParameters)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = substream(cfg.seed, epoch, u32::MAX as usize);
        order.shuffle(&mut shuffle);
        let mut sums = Diagnostics::default();
        let mut buffer_sizes = 0usize;
        let mut discoveries = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &params;
            let estimates: Vec<GradientEstimate> = batch
                .par_iter()
                .map(|&s| {
                    let slot = &slots[s];
                    let item = &train_set.items[slot.item];
                    let ex = Example {
                        context: &item.context,
                        entities: &slot.entities,
                        kb,
                        max_len: item.context.grammar().default_max_len(),
                    };
                    estimate(snapshot, cfg, &ex, slot, &mut substream(cfg.seed, epoch, s))
                })
                .collect::<Result<_, _>>()?;

            let mut grad = vec![0.0; params.dim()];
            for (&s, est) in batch.iter().zip(&estimates) {
                for (g, x) in grad.iter_mut().zip(&est.gradient) {
                    *g += x;
                }
                let d = est.diagnostics;
                sums.pi_bh += d.pi_bh;
                sums.pi_bo += d.pi_bo;
                sums.pi_c_bh += d.pi_c_bh;
                sums.pi_c_bo += d.pi_c_bo;
                sums.draws += d.draws;
                sums.accepted += d.accepted;
                let slot = &mut slots[s];
                buffer_sizes += slot.buffers.len();
                if cfg.estimator.uses_buffers() {
                    for (q, r) in &est.discoveries {
                        if !slot.buffers.contains(q) && (cfg.buffer_unconstrained || !q.is_empty()) {
                            slot.buffers = update_buffers(&slot.buffers, q.clone(), *r)
                                .expect("discoveries carry positive reward");
                            slot.union.insert(q.clone(), *r).expect("positive reward");
                            discoveries += 1;
                        }
                    }
                }
            }
            params.step(&grad, direction * cfg.learning_rate / batch.len() as f64);
        }
        if !params.is_finite() {
            return Err(TrainError::Config(format!(
                "weights diverged in epoch {epoch}; lower the learning rate"
            )));
        }

        let n = slots.len() as f64;
        let (end_bh, end_bo) = if cfg.estimator.uses_buffers() {
            end_of_epoch_masses(&params, cfg.estimator, train_set, &slots)?
        } else {
            (0.0, 0.0)
        };
        let record = EpochRecord {
            epoch,
            diagnostics: EpochDiagnostics {
                avg_pi_bh: end_bh,
                avg_pi_bo: end_bo,
                step_pi_bh: sums.pi_bh / n,
                step_pi_bo: sums.pi_bo / n,
                avg_pi_c_bh: sums.pi_c_bh / n,
                avg_pi_c_bo: sums.pi_c_bo / n,
                acceptance: if sums.draws == 0 {
                    1.0
                } else {
                    sums.accepted as f64 / sums.draws as f64
                },
                mean_buffer_size: buffer_sizes as f64 / n,
                discoveries,
            },
            train: evaluate(&params, train_set, kb),
            val: evaluate(&params, val_set, kb),
        };
        log::info!(
            "epoch {epoch}: val reward {:.3}, val acc {:?}, pi_bh {:.3}, pi_bo {:.3}",
            record.val.total_reward,
            record.val.query_accuracy,
            record.diagnostics.avg_pi_bh,
            record.diagnostics.avg_pi_bo
        );
        let score = record.val.total_reward;
        epochs.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("no validation improvement for {stale} epochs; stopping");
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        history: TrainHistory {
            estimator: cfg.estimator,
            epochs,
            best_epoch,
        },
    })
}
