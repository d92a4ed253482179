//! Training harnesses: schedules, the step loop, an exactly solvable
//! quadratic objective, and a frozen toy transformer task.
//!
//! Two objectives are provided. The quadratic one, 0.5 ||e_hat - E*||_F^2
//! against a target constructed to be exactly representable, has a known
//! optimum of zero, which turns convergence claims into checkable
//! assertions. The toy task trains a prompt against a small frozen
//! transformer classifier and exists to show the qualitative behaviour of
//! the ablation modes at desk scale.

pub mod optimizer;
pub mod toy;

use crate::error::{Result, UlptError};
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::{Rng64, Seed};
use crate::reparam::{
    backward, build_projection, clamp_scale, up_project, GradientBundle, Mode, ProjectionMatrix,
    PromptConfig, UlptParams, SCALE_CLAMP_THRESHOLD,
};
pub use optimizer::{BlockId, Optimizer, OptimizerConfig, OptimizerKind};
use serde::{Deserialize, Serialize};

/// Linear warmup to a peak followed by linear decay to zero:
/// lr(t) = peak * t / warmup for t < warmup, then
/// lr(t) = peak * (total - t) / (total - warmup), reaching 0 at total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(UlptError::Config(format!(
                "peak learning rate must be non-negative, got {}",
                self.peak_lr
            )));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(UlptError::Config(format!(
                "warmup ({}) must end before the run does ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        self.peak_lr * (self.total_steps - step) as f64
            / (self.total_steps - self.warmup_steps) as f64
    }
}

/// How the trainer picks each step's learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrPolicy {
    /// Warmup + linear decay.
    Schedule(ScheduleConfig),
    /// Fixed learning rate, e.g. a descent-safe 0.9 / curvature.
    Constant { lr: f64 },
    /// Backtracking line search with the Armijo sufficient-decrease test
    /// L(x - eta g) <= L(x) - c1 * eta * ||g||^2. Gradient-descent only.
    Armijo {
        init: f64,
        shrink: f64,
        c1: f64,
        max_backtracks: u32,
    },
}

impl LrPolicy {
    /// Defaults tuned for steepest descent: with c1 = 0.5 the largest
    /// accepted step on a locally quadratic slice is the exact minimizer
    /// along the ray, which avoids the slow zig-zag that tiny
    /// sufficient-decrease constants permit.
    pub fn armijo_default() -> LrPolicy {
        LrPolicy::Armijo {
            init: 1.0,
            shrink: 0.5,
            c1: 0.5,
            max_backtracks: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrPolicy::Schedule(s) => s.validate(),
            LrPolicy::Constant { lr } => {
                if !(lr.is_finite() && lr >= 0.0) {
                    return Err(UlptError::Config(format!(
                        "constant learning rate must be non-negative, got {lr}"
                    )));
                }
                Ok(())
            }
            LrPolicy::Armijo {
                init,
                shrink,
                c1,
                max_backtracks,
            } => {
                if !(init.is_finite() && init > 0.0) {
                    return Err(UlptError::Config(format!(
                        "line search initial step must be positive, got {init}"
                    )));
                }
                if !(shrink > 0.0 && shrink < 1.0) {
                    return Err(UlptError::Config(format!(
                        "line search shrink factor must lie in (0, 1), got {shrink}"
                    )));
                }
                if !(c1 > 0.0 && c1 < 1.0) {
                    return Err(UlptError::Config(format!(
                        "sufficient-decrease constant must lie in (0, 1), got {c1}"
                    )));
                }
                if max_backtracks == 0 {
                    return Err(UlptError::Config(
                        "line search needs at least one backtrack".to_string(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// An objective expressed in terms of the expanded prompt e_hat.
pub trait LossTask {
    /// Full-batch loss and gradient dL/d(e_hat).
    fn loss_and_grad(&mut self, e_hat: &Matrix) -> Result<(f64, Matrix)>;

    /// Forward-only loss, used by line search, curvature probes, and
    /// independent consistency checks. Implementations should avoid sharing
    /// arithmetic with the gradient path where it is cheap to do so.
    fn loss(&mut self, e_hat: &Matrix) -> Result<f64> {
        self.loss_and_grad(e_hat).map(|(l, _)| l)
    }

    /// Optional held-out metric (e.g. accuracy).
    fn eval(&mut self, _e_hat: &Matrix) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// The quadratic objective 0.5 ||e_hat - target||_F^2 with its gradient.
pub fn quadratic_pl_loss(e_hat: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = e_hat.sub(target)?;
    let loss = 0.5 * diff.frobenius_norm().powi(2);
    Ok((loss, diff))
}

/// [`LossTask`] wrapper around [`quadratic_pl_loss`].
pub struct QuadraticTarget {
    pub target: Matrix,
}

impl LossTask for QuadraticTarget {
    fn loss_and_grad(&mut self, e_hat: &Matrix) -> Result<(f64, Matrix)> {
        quadratic_pl_loss(e_hat, &self.target)
    }
}

/// Target parameters drawn so the optimum of the quadratic objective is
/// exactly reachable in the given mode: the mode's frozen pieces are the
/// run's own (projection from the config seed; frozen z likewise), while
/// its trainable pieces are drawn from the target seed, with scale entries
/// in [0.5, 1.5] and shift entries standard normal.
pub fn reachable_target_params(
    config: &PromptConfig,
    target_seed: Seed,
) -> Result<(UlptParams, ProjectionMatrix)> {
    let mut params = UlptParams::init(config, target_seed)?;
    let mut proj = build_projection(config)?;
    let mut rng = Rng64::new(target_seed.derive(2));
    if config.mode.trains_scale() {
        for v in params.s.as_mut_slice() {
            *v = rng.next_range(0.5, 1.5);
        }
    }
    if config.mode.trains_shift() {
        for v in params.b.as_mut_slice() {
            *v = rng.next_gaussian();
        }
    }
    if config.mode.trains_projection() {
        let variance = 1.0 / config.r as f64;
        let std = variance.sqrt();
        let mut prng = Rng64::new(target_seed.derive(3));
        for v in proj.matrix.as_mut_slice() {
            *v = std * prng.next_gaussian();
        }
    }
    Ok((params, proj))
}

/// The reachable quadratic target itself (see [`reachable_target_params`]).
pub fn make_reachable_target(config: &PromptConfig, target_seed: Seed) -> Result<Matrix> {
    let (params, proj) = reachable_target_params(config, target_seed)?;
    up_project(&params, &proj)
}

/// Parameterization plus its projection, with the plumbing the trainer
/// needs: block iteration, flattening, gradient application.
#[derive(Debug, Clone)]
pub struct PromptState {
    pub config: PromptConfig,
    pub params: UlptParams,
    pub proj: ProjectionMatrix,
}

impl PromptState {
    pub fn init(config: &PromptConfig, run_seed: Seed) -> Result<PromptState> {
        let proj = build_projection(config)?;
        let params = UlptParams::init(config, run_seed)?;
        Ok(PromptState {
            config: *config,
            params,
            proj,
        })
    }

    pub fn forward(&self) -> Result<Matrix> {
        up_project(&self.params, &self.proj)
    }

    pub fn backward(&self, d_e: &Matrix) -> Result<GradientBundle> {
        backward(&self.params, &self.proj, d_e)
    }

    /// Trainable blocks in canonical order (z, scale, shift, projection).
    pub fn trainable_blocks(&self) -> Vec<BlockId> {
        let mode = self.config.mode;
        let mut blocks = Vec::new();
        if mode.trains_z() {
            blocks.push(BlockId::Z);
        }
        if mode.trains_scale() {
            blocks.push(BlockId::Scale);
        }
        if mode.trains_shift() {
            blocks.push(BlockId::Shift);
        }
        if mode.trains_projection() {
            blocks.push(BlockId::Projection);
        }
        blocks
    }

    fn block_len(&self, id: BlockId) -> usize {
        match id {
            BlockId::Z => self.params.z.as_slice().len(),
            BlockId::Scale => self.params.s.len(),
            BlockId::Shift => self.params.b.len(),
            BlockId::Projection => self.proj.matrix.as_slice().len(),
        }
    }

    /// Total number of scalars the optimizer will touch. Must agree with
    /// the mode's closed-form parameter count; the trainer asserts this.
    pub fn trainable_elements(&self) -> usize {
        self.trainable_blocks()
            .into_iter()
            .map(|id| self.block_len(id))
            .sum()
    }

    pub fn flatten_trainables(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.trainable_elements());
        for id in self.trainable_blocks() {
            let slice = match id {
                BlockId::Z => self.params.z.as_slice(),
                BlockId::Scale => self.params.s.as_slice(),
                BlockId::Shift => self.params.b.as_slice(),
                BlockId::Projection => self.proj.matrix.as_slice(),
            };
            flat.extend_from_slice(slice);
        }
        flat
    }

    pub fn set_trainables(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for id in self.trainable_blocks() {
            let len = self.block_len(id);
            let src = &flat[offset..offset + len];
            let dst = match id {
                BlockId::Z => self.params.z.as_mut_slice(),
                BlockId::Scale => self.params.s.as_mut_slice(),
                BlockId::Shift => self.params.b.as_mut_slice(),
                BlockId::Projection => self.proj.matrix.as_mut_slice(),
            };
            dst.copy_from_slice(src);
            offset += len;
        }
        debug_assert_eq!(offset, flat.len());
    }

    pub fn flatten_grads(&self, grads: &GradientBundle) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.trainable_elements());
        for id in self.trainable_blocks() {
            let slice = match id {
                BlockId::Z => grads.d_z.as_slice(),
                BlockId::Scale => grads.d_s.as_slice(),
                BlockId::Shift => grads.d_b.as_slice(),
                BlockId::Projection => grads
                    .d_p
                    .as_ref()
                    .expect("projection gradient present for trainable projection")
                    .as_slice(),
            };
            flat.extend_from_slice(slice);
        }
        flat
    }

    /// One optimizer step over all trainable blocks; returns elements
    /// updated.
    pub fn apply_gradients(
        &mut self,
        opt: &mut Optimizer,
        lr: f64,
        grads: &GradientBundle,
    ) -> usize {
        opt.advance();
        let mut updated = 0;
        for id in self.trainable_blocks() {
            updated += match id {
                BlockId::Z => {
                    opt.update_block(id, lr, self.params.z.as_mut_slice(), grads.d_z.as_slice())
                }
                BlockId::Scale => {
                    opt.update_block(id, lr, self.params.s.as_mut_slice(), grads.d_s.as_slice())
                }
                BlockId::Shift => {
                    opt.update_block(id, lr, self.params.b.as_mut_slice(), grads.d_b.as_slice())
                }
                BlockId::Projection => {
                    let d_p = grads
                        .d_p
                        .as_ref()
                        .expect("projection gradient present for trainable projection");
                    opt.update_block(id, lr, self.proj.matrix.as_mut_slice(), d_p.as_slice())
                }
            };
        }
        updated
    }

    /// Clamps near-zero scale entries (trainable scale only) and returns
    /// how many were clamped.
    pub fn clamp(&mut self) -> usize {
        if self.config.mode.trains_scale() {
            clamp_scale(&mut self.params.s, SCALE_CLAMP_THRESHOLD)
        } else {
            0
        }
    }
}

/// One recorded training step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

/// Everything a finished (or aborted) run reports.
#[derive(Debug)]
pub struct TrainRun {
    pub state: PromptState,
    pub trace: Vec<TraceRow>,
    /// Loss of the final parameters; absent if the run diverged.
    pub final_loss: Option<f64>,
    pub final_eval: Option<f64>,
    pub clamp_events: usize,
    /// Scalars the optimizer touches per step, cross-checked against the
    /// mode's closed-form count.
    pub trainable_elements: usize,
    pub status: RunStatus,
}

impl TrainRun {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

/// Step budget, learning-rate policy, optimizer, and bookkeeping knobs for
/// one run.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub steps: usize,
    pub policy: LrPolicy,
    pub optimizer: OptimizerConfig,
    /// Evaluate every k steps (and always once at the end).
    pub eval_every: Option<usize>,
    /// Stop early once the loss drops below this value.
    pub stop_below_loss: Option<f64>,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.optimizer.validate()?;
        if matches!(self.policy, LrPolicy::Armijo { .. })
            && self.optimizer.kind != OptimizerKind::Gd
        {
            return Err(UlptError::Config(
                "line search is defined for plain gradient descent only".to_string(),
            ));
        }
        if self.eval_every == Some(0) {
            return Err(UlptError::Config(
                "eval interval must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Runs the training loop.
///
/// Per step: forward, loss (+ optional eval), gradient, optimizer update,
/// scale clamp. A non-finite loss stops the run immediately with a
/// `Diverged` status; the trace up to and including the bad step is
/// retained so the blow-up can be inspected.
pub fn train(
    task: &mut dyn LossTask,
    config: &PromptConfig,
    settings: &TrainSettings,
    run_seed: Seed,
) -> Result<TrainRun> {
    settings.validate()?;
    config.validate()?;
    let mut state = PromptState::init(config, run_seed)?;
    let trainable_elements = state.trainable_elements();
    debug_assert_eq!(trainable_elements, config.trainable_param_count());
    let mut opt = Optimizer::new(settings.optimizer)?;
    let mut trace = Vec::with_capacity(settings.steps.min(1 << 20));
    let mut clamp_events = 0usize;
    let mut status = RunStatus::Completed;
    // Line search warm start: begin each search near the last accepted
    // step so the search adapts to local curvature in both directions.
    let mut armijo_init = match settings.policy {
        LrPolicy::Armijo { init, .. } => init,
        _ => 0.0,
    };

    for step in 0..settings.steps {
        let e_hat = state.forward()?;
        let (loss, d_e) = task.loss_and_grad(&e_hat)?;
        if !loss.is_finite() {
            // The trace keeps only finite losses; the status records where
            // the blow-up happened.
            status = RunStatus::Diverged { step };
            break;
        }
        let eval_metric = match settings.eval_every {
            Some(k) if step % k == 0 => task.eval(&e_hat)?,
            _ => None,
        };

        let grads = state.backward(&d_e)?;
        let lr = match settings.policy {
            LrPolicy::Schedule(s) => s.lr_at(step),
            LrPolicy::Constant { lr } => lr,
            LrPolicy::Armijo {
                init,
                shrink,
                c1,
                max_backtracks,
            } => {
                let eta = armijo_step(
                    task,
                    &mut state,
                    &grads,
                    loss,
                    armijo_init,
                    shrink,
                    c1,
                    max_backtracks,
                )?;
                armijo_init = if eta > 0.0 { 4.0 * eta } else { init };
                eta
            }
        };
        trace.push(TraceRow {
            step,
            lr,
            loss,
            eval_metric,
        });

        if matches!(settings.policy, LrPolicy::Armijo { .. }) {
            // The line search already moved the parameters.
            opt.advance();
        } else {
            let updated = state.apply_gradients(&mut opt, lr, &grads);
            debug_assert_eq!(updated, trainable_elements);
        }
        clamp_events += state.clamp();

        if let Some(threshold) = settings.stop_below_loss {
            if loss < threshold {
                break;
            }
        }
    }

    let (final_loss, final_eval) = if status == RunStatus::Completed {
        let e_hat = state.forward()?;
        let (loss, _) = task.loss_and_grad(&e_hat)?;
        let eval = task.eval(&e_hat)?;
        (Some(loss), eval)
    } else {
        (None, None)
    };

    Ok(TrainRun {
        state,
        trace,
        final_loss,
        final_eval,
        clamp_events,
        trainable_elements,
        status,
    })
}

/// Backtracking line search along the negative gradient. Moves the state to
/// the accepted point and returns the accepted step size (0 if every
/// candidate failed, leaving the parameters unchanged).
#[allow(clippy::too_many_arguments)]
fn armijo_step(
    task: &mut dyn LossTask,
    state: &mut PromptState,
    grads: &GradientBundle,
    loss_at_x: f64,
    init: f64,
    shrink: f64,
    c1: f64,
    max_backtracks: u32,
) -> Result<f64> {
    let x0 = state.flatten_trainables();
    let g = state.flatten_grads(grads);
    let g_norm_sq: f64 = g.iter().map(|v| v * v).sum();
    if g_norm_sq == 0.0 {
        return Ok(0.0);
    }
    let mut eta = init;
    for _ in 0..max_backtracks {
        let candidate: Vec<f64> = x0.iter().zip(&g).map(|(x, gi)| x - eta * gi).collect();
        state.set_trainables(&candidate);
        let trial_loss = task.loss(&state.forward()?)?;
        if trial_loss.is_finite() && trial_loss <= loss_at_x - c1 * eta * g_norm_sq {
            return Ok(eta);
        }
        eta *= shrink;
    }
    state.set_trainables(&x0);
    Ok(0.0)
}

/// Power-iteration estimate of the largest absolute eigenvalue of the
/// loss Hessian in the trainable coordinates, using central-difference
/// Hessian-vector products built from the analytic gradient.
///
/// The returned value is the curvature bound behind "descent-safe" constant
/// learning rates: gradient descent with lr below 1/L keeps the loss
/// non-increasing wherever the local quadratic model is valid.
pub fn curvature_estimate(
    task: &mut dyn LossTask,
    state: &mut PromptState,
    probe_seed: Seed,
    iterations: usize,
) -> Result<f64> {
    if iterations == 0 {
        return Err(UlptError::Config(
            "curvature estimation needs at least one iteration".to_string(),
        ));
    }
    let x0 = state.flatten_trainables();
    let dim = x0.len();
    let scale = 1.0 + x0.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let h = 1e-4 * scale;

    let mut grad_at = |state: &mut PromptState, x: &[f64]| -> Result<Vec<f64>> {
        state.set_trainables(x);
        let e_hat = state.forward()?;
        let (_, d_e) = task.loss_and_grad(&e_hat)?;
        let grads = state.backward(&d_e)?;
        Ok(state.flatten_grads(&grads))
    };

    let mut rng = Rng64::new(probe_seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let plus: Vec<f64> = x0.iter().zip(&v).map(|(x, vi)| x + h * vi).collect();
        let minus: Vec<f64> = x0.iter().zip(&v).map(|(x, vi)| x - h * vi).collect();
        let g_plus = grad_at(state, &plus)?;
        let g_minus = grad_at(state, &minus)?;
        let mut hv: Vec<f64> = g_plus
            .iter()
            .zip(&g_minus)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        lambda = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(lambda.is_finite() && lambda > 0.0) {
            state.set_trainables(&x0);
            return Err(UlptError::Domain(format!(
                "curvature power iteration degenerated (|Hv| = {lambda})"
            )));
        }
        for x in &mut hv {
            *x /= lambda;
        }
        v = hv;
    }
    state.set_trainables(&x0);
    Ok(lambda)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

/// Result line of one ablation run.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub param_count: usize,
    pub final_loss: Option<f64>,
    pub final_eval: Option<f64>,
    pub clamp_events: usize,
    pub diverged: bool,
}

/// Runs the same task across modes with matched shapes, seeds, and
/// schedule, reporting per-mode parameter counts and final losses. The
/// factory builds a fresh task per mode so runs cannot leak state into one
/// another.
pub fn ablation_suite<F>(
    modes: &[Mode],
    n: usize,
    r: usize,
    d: usize,
    seed: Seed,
    run_seed: Seed,
    settings: &TrainSettings,
    mut make_task: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&PromptConfig) -> Result<Box<dyn LossTask>>,
{
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let config = PromptConfig::new(n, r, d, seed, mode)?;
        let mut task = make_task(&config)?;
        let run = train(task.as_mut(), &config, settings, run_seed)?;
        rows.push(AblationRow {
            mode,
            param_count: config.trainable_param_count(),
            final_loss: run.final_loss,
            final_eval: run.final_eval,
            clamp_events: run.clamp_events,
            diverged: run.diverged(),
        });
    }
    Ok(rows)
}

/// Mean rank-normalized row offset: subtracts the given shift from every
/// row of a matrix (helper for rank analyses of shifted targets).
pub fn subtract_row_offset(m: &Matrix, offset: &Vector) -> Result<Matrix> {
    if offset.len() != m.cols() {
        return Err(UlptError::Dimension(format!(
            "offset length {} does not match matrix width {}",
            offset.len(),
            m.cols()
        )));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v -= offset[j];
        }
    }
    Ok(out)
}
