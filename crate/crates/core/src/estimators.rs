//! Policy-gradient estimators for the expected weak reward.
//!
//! Every estimator returns an ascent direction on its objective, except
//! [`sl_loss_gradient`] and [`sl_rl_gradient`], which return the descent
//! gradient of a loss.
//!
//! Buffered queries are canonical, while the policy decodes clauses in any
//! order; the probability of a buffered query is the summed probability of
//! all its clause orderings, and outside samples are rejected by canonical
//! query.

use rand::Rng;
use thiserror::Error;

use crate::buffer::{Buffer, BufferPair};
use crate::dialog::EntitySet;
use crate::kb::{KnowledgeBase, Query};
use crate::policy::{Action, PolicyContext, PolicyError, PolicyParameters};
use crate::reward::{reward, RewardValue};

/// Outside-buffer sampling gives up after this many draws per requested sample.
pub const REJECTION_DRAW_FACTOR: usize = 10;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("buffer probabilities outside their domain: {0}")]
    Domain(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-call buffer statistics. For single-buffer MAPO the buffer is reported
/// in the `bh` slots.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Diagnostics {
    pub pi_bh: f64,
    pub pi_bo: f64,
    pub pi_c_bh: f64,
    pub pi_c_bo: f64,
    /// Policy samples drawn, including rejected ones.
    pub draws: usize,
    /// Samples that entered the estimate.
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// Positive-reward queries found by sampling, canonical, first-seen order.
    pub discoveries: Vec<(Query, RewardValue)>,
}

impl GradientEstimate {
    fn zeros(dim: usize) -> Self {
        Self {
            gradient: vec![0.0; dim],
            diagnostics: Diagnostics::default(),
            discoveries: Vec::new(),
        }
    }

    fn discover(&mut self, query: Query, r: RewardValue) {
        if !self.discoveries.iter().any(|(q, _)| *q == query) {
            self.discoveries.push((query, r));
        }
    }
}

/// What an estimator needs to know about one training example.
#[derive(Clone, Copy)]
pub struct Example<'a> {
    pub context: &'a PolicyContext,
    pub entities: &'a EntitySet,
    pub kb: &'a KnowledgeBase,
    /// Token budget for sampling, excluding `<eoq>`.
    pub max_len: usize,
}

impl Example<'_> {
    fn reward(&self, actions: &[Action]) -> (Query, RewardValue) {
        let q = self.context.to_query(actions).canonicalize();
        let r = reward(&q, self.entities, self.kb).expect("examples have non-empty targets");
        (q, r)
    }
}

/// `Σ_o π(o)` over the clause orderings `o` of `query`, and optionally
/// `scale · Σ_o π(o) ∇log π(o)` added into `grad`.
fn query_mass(
    params: &PolicyParameters,
    context: &PolicyContext,
    query: &Query,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64, PolicyError> {
    let Some(orderings) = context.realizations(query) else {
        return Ok(0.0);
    };
    let mut mass = 0.0;
    for seq in orderings {
        let p = params.sequence_logprob(context, &seq)?.exp();
        if scale != 0.0 {
            params.accumulate_logprob_gradient(context, &seq, scale * p, grad)?;
        }
        mass += p;
    }
    Ok(mass)
}

/// Total policy mass of the buffer, summed over clause orderings.
pub fn buffer_probability(
    params: &PolicyParameters,
    context: &PolicyContext,
    buffer: &Buffer,
) -> Result<f64, PolicyError> {
    buffer
        .iter()
        .map(|(q, _)| query_mass(params, context, q, 0.0, &mut []))
        .sum()
}

fn buffer_mass(params: &PolicyParameters, ex: &Example, buffer: &Buffer) -> Result<f64, PolicyError> {
    buffer_probability(params, ex.context, buffer)
}

/// Adds `weight · E_{q∼π+}[R(q) ∇log π(q)]`, with `π+` the policy
/// renormalized to the buffer of mass `mass`, computed by enumeration.
fn add_buffer_term(
    params: &PolicyParameters,
    ex: &Example,
    buffer: &Buffer,
    mass: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<(), PolicyError> {
    if mass <= 0.0 || weight == 0.0 {
        return Ok(());
    }
    // π+(q) ∇log π(q) = Σ_o π(o) ∇log π(o) / mass
    for (q, r) in buffer.iter() {
        query_mass(params, ex.context, q, weight * r / mass, grad)?;
    }
    Ok(())
}

/// Adds `weight · (1/n) Σ R(a) ∇log π(a)` over `n` samples whose canonical
/// query is not rejected. Draws stop after `REJECTION_DRAW_FACTOR · n`
/// attempts; missing samples count as zero terms.
fn add_sampled_term<R: Rng + ?Sized>(
    params: &PolicyParameters,
    ex: &Example,
    n: usize,
    weight: f64,
    rejected: impl Fn(&Query) -> bool,
    rng: &mut R,
    est: &mut GradientEstimate,
) -> Result<(), PolicyError> {
    let mut accepted = 0;
    let mut draws = 0;
    while accepted < n && draws < REJECTION_DRAW_FACTOR * n {
        draws += 1;
        let seq = params.sample(ex.context, rng, ex.max_len);
        let (q, r) = ex.reward(&seq);
        if rejected(&q) {
            continue;
        }
        accepted += 1;
        if r.is_positive() {
            params.accumulate_logprob_gradient(ex.context, &seq, weight * r.get() / n as f64, &mut est.gradient)?;
            est.discover(q, r);
        }
    }
    if accepted < n {
        log::debug!("outside-buffer sampling accepted {accepted}/{n} after {draws} draws");
    }
    est.diagnostics.draws += draws;
    est.diagnostics.accepted += accepted;
    Ok(())
}

/// Score-function estimate `(1/N) Σ_k R(a_k) ∇log π(a_k)` over `N` samples.
pub fn reinforce_gradient<R: Rng + ?Sized>(
    params: &PolicyParameters,
    ex: &Example,
    n: usize,
    rng: &mut R,
) -> Result<GradientEstimate, EstimatorError> {
    assert!(n >= 1, "at least one sample");
    let mut est = GradientEstimate::zeros(params.dim());
    add_sampled_term(params, ex, n, 1.0, |_| false, rng, &mut est)?;
    Ok(est)
}

fn beam_term(
    params: &PolicyParameters,
    ex: &Example,
    beam: Vec<crate::policy::Hypothesis>,
) -> Result<GradientEstimate, EstimatorError> {
    let mut est = GradientEstimate::zeros(params.dim());
    for h in beam {
        let (q, r) = ex.reward(&h.actions);
        if r.is_positive() {
            params.accumulate_logprob_gradient(ex.context, &h.actions, r.get() * h.logprob.exp(), &mut est.gradient)?;
            est.discover(q, r);
        }
        est.diagnostics.draws += 1;
        est.diagnostics.accepted += 1;
    }
    Ok(est)
}

/// `Σ_{a∈beam} R(a) π(a) ∇log π(a)` over a beam-search output.
pub fn bs_reinforce_gradient(
    params: &PolicyParameters,
    ex: &Example,
    beam_width: usize,
) -> Result<GradientEstimate, EstimatorError> {
    beam_term(params, ex, params.beam_search(ex.context, beam_width))
}

/// [`bs_reinforce_gradient`] over an ε-randomized beam.
pub fn rbs_reinforce_gradient<R: Rng + ?Sized>(
    params: &PolicyParameters,
    ex: &Example,
    beam_width: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<GradientEstimate, EstimatorError> {
    beam_term(
        params,
        ex,
        params.randomized_beam_search(ex.context, beam_width, epsilon, rng),
    )
}

/// `π^c_B ∇E_{π+}[R] + (1 − π^c_B) ∇E_{outside}[R]` with `π^c_B = max(π_B, α)`.
pub fn mapo_gradient<R: Rng + ?Sized>(
    params: &PolicyParameters,
    ex: &Example,
    buffer: &Buffer,
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<GradientEstimate, EstimatorError> {
    assert!(n >= 1, "at least one sample");
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EstimatorError::Domain(format!("alpha = {alpha}")));
    }
    let mut est = GradientEstimate::zeros(params.dim());
    let pi_b = buffer_mass(params, ex, buffer)?.min(1.0);
    let pi_c = if buffer.is_empty() { pi_b } else { pi_b.max(alpha) };
    add_buffer_term(params, ex, buffer, pi_b, pi_c, &mut est.gradient)?;
    add_sampled_term(params, ex, n, 1.0 - pi_c, |q| buffer.contains(q), rng, &mut est)?;
    est.diagnostics.pi_bh = pi_b;
    est.diagnostics.pi_c_bh = pi_c;
    Ok(est)
}

/// Floors on the two buffer masses: `π^c_Bh = max(π_Bh, α_h)` and
/// `π^c_Bo = min(max((1 − π^c_Bh) α_o, π_Bo), 1 − π^c_Bh)`.
///
/// Every argument must lie in `[0, 1]`. The sum of the inputs is not checked:
/// the upper clamp keeps `π^c_Bh + π^c_Bo ≤ 1` regardless.
pub fn clip_buffer_probs(pi_bh: f64, pi_bo: f64, alpha_h: f64, alpha_o: f64) -> Result<(f64, f64), EstimatorError> {
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if !(unit(pi_bh) && unit(pi_bo) && unit(alpha_h) && unit(alpha_o)) {
        return Err(EstimatorError::Domain(format!(
            "pi_bh = {pi_bh}, pi_bo = {pi_bo}, alpha_h = {alpha_h}, alpha_o = {alpha_o}"
        )));
    }
    let c_h = pi_bh.max(alpha_h);
    let c_o = ((1.0 - c_h) * alpha_o).max(pi_bo).min(1.0 - c_h);
    Ok((c_h, c_o))
}

/// Two-buffer estimate: exact `B_h` and `B_o` terms weighted by their clipped
/// masses, plus a rejection-sampled outside term weighted by the remainder.
#[allow(clippy::too_many_arguments)]
pub fn mbmapo_gradient<R: Rng + ?Sized>(
    params: &PolicyParameters,
    ex: &Example,
    buffers: &BufferPair,
    alpha_h: f64,
    alpha_o: f64,
    n: usize,
    rng: &mut R,
) -> Result<GradientEstimate, EstimatorError> {
    assert!(n >= 1, "at least one sample");
    let mut est = GradientEstimate::zeros(params.dim());
    let pi_bh = buffer_mass(params, ex, buffers.high())?.min(1.0);
    let pi_bo = buffer_mass(params, ex, buffers.other())?.min(1.0 - pi_bh);
    // an empty buffer has nothing to floor
    let (c_h, c_o) = clip_buffer_probs(
        pi_bh,
        pi_bo,
        if buffers.high().is_empty() { 0.0 } else { alpha_h },
        if buffers.other().is_empty() { 0.0 } else { alpha_o },
    )?;
    add_buffer_term(params, ex, buffers.high(), pi_bh, c_h, &mut est.gradient)?;
    add_buffer_term(params, ex, buffers.other(), pi_bo, c_o, &mut est.gradient)?;
    add_sampled_term(params, ex, n, 1.0 - c_h - c_o, |q| buffers.contains(q), rng, &mut est)?;
    est.diagnostics.pi_bh = pi_bh;
    est.diagnostics.pi_bo = pi_bo;
    est.diagnostics.pi_c_bh = c_h;
    est.diagnostics.pi_c_bo = c_o;
    Ok(est)
}

/// Descent gradient of the cross-entropy `−log π(gold)`.
pub fn sl_loss_gradient(
    params: &PolicyParameters,
    context: &PolicyContext,
    gold: &[Action],
) -> Result<Vec<f64>, EstimatorError> {
    let mut g = vec![0.0; params.dim()];
    params.accumulate_logprob_gradient(context, gold, -1.0, &mut g)?;
    Ok(g)
}

/// Descent gradient of `CE − λ·O_ER`, with the expected-reward term
/// estimated by [`mbmapo_gradient`].
#[allow(clippy::too_many_arguments)]
pub fn sl_rl_gradient<R: Rng + ?Sized>(
    params: &PolicyParameters,
    ex: &Example,
    gold: &[Action],
    buffers: &BufferPair,
    alpha_h: f64,
    alpha_o: f64,
    lambda: f64,
    n: usize,
    rng: &mut R,
) -> Result<GradientEstimate, EstimatorError> {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let mut est = if lambda == 0.0 {
        GradientEstimate::zeros(params.dim())
    } else {
        mbmapo_gradient(params, ex, buffers, alpha_h, alpha_o, n, rng)?
    };
    let sl = sl_loss_gradient(params, ex.context, gold)?;
    for (g, s) in est.gradient.iter_mut().zip(sl) {
        *g = s - lambda * *g;
    }
    Ok(est)
}
