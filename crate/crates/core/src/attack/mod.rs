//! Targeted L2 evasion attacks.
//!
//! Classification: minimize `‖σ‖₂ + c·f(x+σ)` with the hinge-logit loss `f`,
//! binary-searching `c`. Regression: minimize `‖σ‖₂ − c·g(x+σ, y)` with the
//! squared residual `g`, at a fixed `c` by default. The adversarial image is
//! `(tanh(w) + 1) / 2`, so it stays inside `[0, 1]` for every `w`.

mod record;

use std::time::{Duration, Instant};

use crate::data::Direction;
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardOptions, Head, Model};
use crate::tensor::{l2_distance, softmax_in_place, Graph, NodeId, Real, Tensor};

pub use record::{
    run_attacks, write_results_csv, write_scores_csv, AttackJob, AttackRecord, JobKind, CLASSIFICATION_SCORES_HEADER,
    REGRESSION_SCORES_HEADER,
};

/// Relative objective improvement required per abort window.
const ABORT_IMPROVEMENT: f64 = 1e-4;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// `w` preimages are taken of `x` pulled this far inside the open box.
const BOX_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionMode {
    /// One optimization at [`AttackConfig::fixed_c`].
    FixedC,
    /// Binary search on `c` against `ratio ≥ τ`.
    Search,
}

impl RegressionMode {
    pub fn name(self) -> &'static str {
        match self {
            RegressionMode::FixedC => "fixed_c",
            RegressionMode::Search => "search",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed_c" => Some(RegressionMode::FixedC),
            "search" => Some(RegressionMode::Search),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub c_initial: f64,
    pub binary_search_steps: usize,
    pub fixed_c: f64,
    /// Optimizer steps per value of `c`.
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub abort_early: bool,
    /// Iterations between abort-early checks.
    pub abort_window: usize,
    /// Search-mode success threshold on the adversarial/clean residual ratio.
    pub regression_success_ratio: f64,
    pub regression_mode: RegressionMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            c_initial: 0.001,
            binary_search_steps: 9,
            fixed_c: 100.0,
            max_iterations: 1000,
            learning_rate: 0.01,
            abort_early: true,
            abort_window: 100,
            regression_success_ratio: 2.0,
            regression_mode: RegressionMode::FixedC,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("attack config", m));
        if !(self.c_initial > 0.0 && self.c_initial.is_finite()) {
            return bad(format!("c_initial {} must be > 0", self.c_initial));
        }
        if !(self.fixed_c >= 0.0 && self.fixed_c.is_finite()) {
            return bad(format!("fixed_c {} must be >= 0", self.fixed_c));
        }
        if self.binary_search_steps == 0 || self.max_iterations == 0 || self.abort_window == 0 {
            return bad("binary_search_steps, max_iterations and abort_window must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.regression_success_ratio.is_nan() || self.regression_success_ratio <= 0.0 {
            return bad(format!("regression_success_ratio {} must be > 0", self.regression_success_ratio));
        }
        Ok(())
    }
}

/// What the attack pushes the model toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Classify as `target`.
    Targeted { target: Direction },
    /// Move the prediction away from the true response `y`.
    Residual { y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(Direction),
    Value(f64),
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Prediction::Class(d) => write!(f, "{d}"),
            Prediction::Value(v) => write!(f, "{v}"),
        }
    }
}

/// One inner optimization of the binary search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Round {
    pub c: f64,
    pub success: bool,
    /// L2 of the round's best iterate, if it produced one.
    pub l2_norm: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T: Real = f32> {
    /// `adversarial − x`.
    pub sigma: Tensor<T>,
    pub adversarial: Tensor<T>,
    pub l2_norm: f64,
    pub success: bool,
    /// `c` of the returned iterate; `None` when no optimization ran.
    pub best_c: Option<f64>,
    /// Optimizer steps summed over all rounds.
    pub iterations: usize,
    pub original_prediction: Prediction,
    pub adversarial_prediction: Prediction,
    /// Class probabilities (classification) or `[ŷ]` (regression).
    pub original_scores: Vec<f64>,
    pub adversarial_scores: Vec<f64>,
    /// Squared residuals before and after, for regression attacks.
    pub clean_residual: Option<f64>,
    pub adversarial_residual: Option<f64>,
    pub rounds: Vec<Round>,
    pub wall_time: Duration,
}

impl<T: Real> AttackResult<T> {
    /// Adversarial over clean squared residual (regression only).
    pub fn mse_ratio(&self) -> Option<f64> {
        Some(residual_ratio(self.clean_residual?, self.adversarial_residual?))
    }
}

fn residual_ratio(clean: f64, adversarial: f64) -> f64 {
    if clean > 0.0 {
        adversarial / clean
    } else if adversarial > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// `(max_{j≠t} z_j − z_t)⁺`
pub fn hinge_logit_loss(logits: &[f64], target: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    (other - logits[target]).max(0.0)
}

/// `(prediction − y)²`
pub fn residual_loss(prediction: f64, y: f64) -> f64 {
    (prediction - y).powi(2)
}

/// Graph nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub adversarial: NodeId,
    pub norm: NodeId,
    /// `f` (classification) or `g` (regression).
    pub loss: NodeId,
    pub logits: NodeId,
    pub total: NodeId,
}

/// Records `‖σ‖₂ ± c·loss` for `x + σ = tanh_box(w)` on `graph`.
pub fn record_objective<T: Real>(
    graph: &mut Graph<T>,
    model: &Model<T>,
    w: NodeId,
    x: &Tensor<T>,
    objective: Objective,
    c: T,
) -> Result<ObjectiveNodes> {
    let adversarial = graph.tanh_box(w)?;
    let x = graph.constant(x.clone());
    let sigma = graph.sub(adversarial, x)?;
    let norm = graph.l2_norm(sigma)?;
    let pass = model.record(graph, adversarial, ForwardOptions::infer())?;
    let (loss, signed) = match objective {
        Objective::Targeted { target } => {
            let f = graph.hinge_logit(pass.logits, target.index())?;
            (f, graph.scale(f, c)?)
        }
        Objective::Residual { y } => {
            let g = graph.mean_squared_error(pass.logits, &[T::from_f64_lossy(y)])?;
            (g, graph.scale(g, -c)?)
        }
    };
    let total = graph.add(norm, signed)?;
    Ok(ObjectiveNodes {
        adversarial,
        norm,
        loss,
        logits: pass.logits,
        total,
    })
}

/// `atanh(2x − 1)` with `x` kept just inside the open unit box.
pub fn box_preimage<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let u = (2.0 * v.as_f64() - 1.0).clamp(-1.0 + BOX_MARGIN, 1.0 - BOX_MARGIN);
        T::from_f64_lossy(u.atanh())
    })
}

fn check_image<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<()> {
    if image.shape() != model.input_shape() {
        return Err(Error::shape("attack", image.shape(), &model.input_shape()));
    }
    if !image.data().iter().all(|v| *v >= T::zero() && *v <= T::one()) {
        return Err(Error::invalid("attack", "image pixels must lie in [0, 1]"));
    }
    Ok(())
}

/// Best iterate of one optimization.
#[derive(Debug, Clone)]
pub struct Candidate<T: Real> {
    pub adversarial: Tensor<T>,
    pub l2_norm: f64,
    /// Whether the attack goal holds at this iterate.
    pub success: bool,
    /// `f` or `g` at this iterate.
    pub loss: f64,
    pub outputs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimization<T: Real> {
    /// `None` when no iterate qualified (classification: none succeeded).
    pub best: Option<Candidate<T>>,
    /// The last evaluated iterate.
    pub last: Candidate<T>,
    pub iterations: usize,
    /// Set when the objective became non-finite.
    pub diverged: bool,
}

fn is_success(objective: Objective, outputs: &[f64], clean_residual: f64, config: &AttackConfig) -> bool {
    match objective {
        Objective::Targeted { target } => argmax(outputs) == target.index(),
        Objective::Residual { y } => {
            let adv = residual_loss(outputs[0], y);
            match config.regression_mode {
                RegressionMode::FixedC => adv > clean_residual,
                RegressionMode::Search => residual_ratio(clean_residual, adv) >= config.regression_success_ratio,
            }
        }
    }
}

/// Runs Adam on `w` for one penalty constant.
///
/// Classification keeps the lowest-L2 successful iterate. Regression keeps
/// the highest-residual iterate whose objective is no worse than at `σ = 0`,
/// so the norm spent is always paid for by `c·Δg`.
pub fn optimize_at_c<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    objective: Objective,
    c: f64,
    config: &AttackConfig,
) -> Result<Optimization<T>> {
    check_image(model, image)?;
    let clean_residual = match objective {
        Objective::Residual { y } => residual_loss(model.logits(image)?.item().as_f64(), y),
        Objective::Targeted { .. } => 0.0,
    };
    let mut w = box_preimage(image);
    let n = w.len();
    let (mut m, mut v) = (vec![0f64; n], vec![0f64; n]);
    let (lr, b1, b2) = (config.learning_rate, ADAM_BETA1, ADAM_BETA2);
    let (mut b1t, mut b2t) = (1.0, 1.0);
    let ct = T::from_f64_lossy(c);

    let mut best: Option<Candidate<T>> = None;
    let mut start_objective = None;
    let mut checkpoint = f64::INFINITY;
    let mut last = None;
    let mut iterations = 0;
    let mut diverged = false;

    // evaluates max_iterations + 1 points: the start and every step
    for step in 0..=config.max_iterations {
        let mut g = Graph::new();
        let wid = g.variable(w.clone());
        let nodes = record_objective(&mut g, model, wid, image, objective, ct)?;
        let total = g.value(nodes.total).item().as_f64();
        let adversarial = g.value(nodes.adversarial).clone();
        let outputs: Vec<f64> = g.value(nodes.logits).data().iter().map(|v| v.as_f64()).collect();
        if !total.is_finite() || !outputs.iter().all(|v| v.is_finite()) {
            diverged = true;
            break;
        }
        let candidate = Candidate {
            l2_norm: l2_distance(&adversarial, image)?,
            success: is_success(objective, &outputs, clean_residual, config),
            loss: g.value(nodes.loss).item().as_f64(),
            adversarial,
            outputs,
        };
        let start = *start_objective.get_or_insert(total);
        let better = match objective {
            Objective::Targeted { .. } => {
                candidate.success && best.as_ref().is_none_or(|b| candidate.l2_norm < b.l2_norm)
            }
            Objective::Residual { .. } => {
                total <= start && best.as_ref().is_none_or(|b| candidate.loss > b.loss)
            }
        };
        if better {
            best = Some(candidate.clone());
        }
        last = Some(candidate);
        if step == config.max_iterations {
            break;
        }
        if config.abort_early && step > 0 && step % config.abort_window == 0 {
            if total > checkpoint * (1.0 - ABORT_IMPROVEMENT) {
                break;
            }
            checkpoint = total;
        } else if step == 0 {
            checkpoint = total;
        }

        let grads = g.backward(nodes.total, None)?;
        let Some(grad) = grads.get(wid) else { break };
        b1t *= b1;
        b2t *= b2;
        for ((wi, &gi), (mi, vi)) in w.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
            let gi = gi.as_f64();
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let step = lr * (*mi / (1.0 - b1t)) / ((*vi / (1.0 - b2t)).sqrt() + ADAM_EPS);
            *wi -= T::from_f64_lossy(step);
        }
        iterations += 1;
    }

    let last = match last {
        Some(l) => l,
        None => Candidate {
            adversarial: image.clone(),
            l2_norm: 0.0,
            success: false,
            loss: f64::NAN,
            outputs: Vec::new(),
        },
    };
    if diverged {
        best = None;
    }
    Ok(Optimization {
        best,
        last,
        iterations,
        diverged,
    })
}

fn prediction_of<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<(Prediction, Vec<f64>)> {
    match model.head() {
        Head::Classification => {
            let mut z = model.logits(image)?.data().to_vec();
            softmax_in_place(&mut z);
            let probs: Vec<f64> = z.iter().map(|v| v.as_f64()).collect();
            Ok((Prediction::Class(Direction::from_index(argmax(&z))), probs))
        }
        Head::Regression => {
            let y = model.logits(image)?.item().as_f64();
            Ok((Prediction::Value(y), vec![y]))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    adversarial: Tensor<T>,
    success: bool,
    best_c: Option<f64>,
    iterations: usize,
    rounds: Vec<Round>,
    started: Instant,
    y: Option<f64>,
) -> Result<AttackResult<T>> {
    if !adversarial.data().iter().all(|v| *v >= T::zero() && *v <= T::one()) {
        return Err(Error::invalid("attack", "adversarial image left the [0, 1] box"));
    }
    let (original_prediction, original_scores) = prediction_of(model, image)?;
    let (adversarial_prediction, adversarial_scores) = prediction_of(model, &adversarial)?;
    let residuals = y.map(|y| {
        (
            residual_loss(original_scores[0], y),
            residual_loss(adversarial_scores[0], y),
        )
    });
    Ok(AttackResult {
        sigma: adversarial.sub(image)?,
        l2_norm: l2_distance(&adversarial, image)?,
        adversarial,
        success,
        best_c,
        iterations,
        original_prediction,
        adversarial_prediction,
        original_scores,
        adversarial_scores,
        clean_residual: residuals.map(|r| r.0),
        adversarial_residual: residuals.map(|r| r.1),
        rounds,
        wall_time: started.elapsed(),
    })
}

/// Penalty-constant schedule: lower bound starts at 0 and the upper bound
/// unknown; `c` grows tenfold until the first success, then bisects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CSearch {
    pub lower: f64,
    pub upper: Option<f64>,
    pub c: f64,
}

impl CSearch {
    pub fn new(c_initial: f64) -> Self {
        Self {
            lower: 0.0,
            upper: None,
            c: c_initial,
        }
    }

    pub fn update(&mut self, success: bool) {
        if success {
            self.upper = Some(self.upper.map_or(self.c, |u| u.min(self.c)));
        } else {
            self.lower = self.lower.max(self.c);
        }
        self.c = match self.upper {
            Some(u) => (self.lower + u) / 2.0,
            None => self.c * 10.0,
        };
    }
}

/// Binary search over `c`, returning the smallest-L2 success across rounds.
fn search<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    objective: Objective,
    config: &AttackConfig,
    started: Instant,
    y: Option<f64>,
) -> Result<AttackResult<T>> {
    let mut schedule = CSearch::new(config.c_initial);
    let mut rounds = Vec::with_capacity(config.binary_search_steps);
    let mut best: Option<(Candidate<T>, f64)> = None;
    let mut fallback = None;
    let mut iterations = 0;
    for _ in 0..config.binary_search_steps {
        let c = schedule.c;
        let opt = optimize_at_c(model, image, objective, c, config)?;
        iterations += opt.iterations;
        let success = opt.best.as_ref().is_some_and(|b| b.success);
        rounds.push(Round {
            c,
            success,
            l2_norm: opt.best.as_ref().map(|b| b.l2_norm),
            iterations: opt.iterations,
        });
        if let Some(b) = opt.best.filter(|b| b.success) {
            if best.as_ref().is_none_or(|(cur, _)| b.l2_norm < cur.l2_norm) {
                best = Some((b, c));
            }
        }
        fallback = Some((opt.last, c));
        schedule.update(success);
    }
    match best {
        Some((b, c)) => finish(model, image, b.adversarial, true, Some(c), iterations, rounds, started, y),
        None => {
            let (last, c) = fallback.expect("at least one round");
            finish(model, image, last.adversarial, false, Some(c), iterations, rounds, started, y)
        }
    }
}

/// Targeted attack on a classifier. When the model already predicts
/// `target` the clean image is returned as a success with `σ = 0`.
pub fn attack_targeted<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    target: Direction,
    config: &AttackConfig,
) -> Result<AttackResult<T>> {
    let started = Instant::now();
    config.validate()?;
    model.require_head(Head::Classification, "attack_targeted")?;
    check_image(model, image)?;
    let (pred, _) = prediction_of(model, image)?;
    if pred == Prediction::Class(target) {
        return finish(model, image, image.clone(), true, None, 0, Vec::new(), started, None);
    }
    let mut result = search(model, image, Objective::Targeted { target }, config, started, None)?;
    // success is re-derived from a fresh infer-mode prediction
    result.success = result.success && result.adversarial_prediction == Prediction::Class(target);
    Ok(result)
}

/// Residual-maximization attack on a regressor with true response `y`.
pub fn attack_regression<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    y: f64,
    config: &AttackConfig,
) -> Result<AttackResult<T>> {
    let started = Instant::now();
    config.validate()?;
    model.require_head(Head::Regression, "attack_regression")?;
    check_image(model, image)?;
    let objective = Objective::Residual { y };
    match config.regression_mode {
        RegressionMode::Search => search(model, image, objective, config, started, Some(y)),
        RegressionMode::FixedC => {
            let c = config.fixed_c;
            let opt = optimize_at_c(model, image, objective, c, config)?;
            let chosen = opt.best.unwrap_or(opt.last);
            let rounds = vec![Round {
                c,
                success: chosen.success,
                l2_norm: Some(chosen.l2_norm),
                iterations: opt.iterations,
            }];
            finish(model, image, chosen.adversarial, chosen.success, Some(c), opt.iterations, rounds, started, Some(y))
        }
    }
}
