//! The low-dimensional prompt parameterization and its gradients.
//!
//! A prompt for a frozen downstream model is n embedding rows of width d.
//! Training those nd values directly is the baseline. Here the trainable
//! object is much smaller: prompts z_i of width r << d, expanded as
//!
//! ```text
//! e_hat[i][j] = (sum_k z[i][k] * p[k][j]) * s[j] + b[j]
//! ```
//!
//! where p is an r-by-d random projection that is frozen and never stored
//! (only its seed is), and s and b are learnable per-dimension scale and
//! shift. Ablation modes drop s and/or b, train p instead of z, or fall back
//! to direct prompt training; every mode evaluates the same expression with
//! the untrained pieces pinned to their neutral values (s = 1, b = 0,
//! p = identity), so one forward and one backward cover all of them.

use crate::error::{Result, UlptError};
use crate::numerics::matrix::{gaussian_matrix, matmul, Matrix, Vector};
use crate::numerics::rng::{Rng64, Seed};
use crate::numerics::svd::{rank_and_spectral_extremes, DEFAULT_RANK_TOL};
use serde::{Deserialize, Serialize};

/// Magnitude below which a learnable scale entry is pushed back to
/// sign * threshold after each optimizer step, keeping the parameterization
/// away from the s = 0 degeneracy.
pub const SCALE_CLAMP_THRESHOLD: f64 = 1e-8;

/// How many consecutive seeds to try when a drawn projection is rank
/// deficient (which for Gaussian matrices has probability zero in exact
/// arithmetic; the retry loop exists for auditability, not because it is
/// expected to run).
const MAX_PROJECTION_ATTEMPTS: u64 = 16;

/// Which pieces of the parameterization are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train z, s, b; p frozen from seed.
    Ulpt,
    /// Train z, b; s pinned to ones.
    UlptNoScale,
    /// Train z only; s ones, b zeros.
    UlptNoShiftNoScale,
    /// Train the full n-by-d prompt directly (r forced to d, p identity).
    VanillaPt,
    /// Train z and p jointly; no scale or shift.
    DptLearnableP,
    /// Train p, s, b against a frozen random z.
    TunePFrozenZ,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Ulpt,
        Mode::UlptNoScale,
        Mode::UlptNoShiftNoScale,
        Mode::VanillaPt,
        Mode::DptLearnableP,
        Mode::TunePFrozenZ,
    ];

    /// Stable one-byte tag used by the checkpoint format.
    pub fn as_u8(self) -> u8 {
        match self {
            Mode::Ulpt => 0,
            Mode::UlptNoScale => 1,
            Mode::UlptNoShiftNoScale => 2,
            Mode::VanillaPt => 3,
            Mode::DptLearnableP => 4,
            Mode::TunePFrozenZ => 5,
        }
    }

    pub fn from_u8(tag: u8) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_u8() == tag)
            .ok_or_else(|| UlptError::Format(format!("unknown mode tag {tag}")))
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Ulpt => "ulpt",
            Mode::UlptNoScale => "ulpt_no_scale",
            Mode::UlptNoShiftNoScale => "ulpt_no_shift_no_scale",
            Mode::VanillaPt => "vanilla_pt",
            Mode::DptLearnableP => "dpt_learnable_p",
            Mode::TunePFrozenZ => "tune_p_frozen_z",
        }
    }

    /// Whether s is a trainable parameter in this mode.
    pub fn trains_scale(self) -> bool {
        matches!(self, Mode::Ulpt | Mode::TunePFrozenZ)
    }

    /// Whether b is a trainable parameter in this mode.
    pub fn trains_shift(self) -> bool {
        matches!(self, Mode::Ulpt | Mode::UlptNoScale | Mode::TunePFrozenZ)
    }

    /// Whether z is a trainable parameter in this mode.
    pub fn trains_z(self) -> bool {
        !matches!(self, Mode::TunePFrozenZ)
    }

    /// Whether the projection is trainable (not frozen).
    pub fn trains_projection(self) -> bool {
        matches!(self, Mode::DptLearnableP | Mode::TunePFrozenZ)
    }

    /// Number of trainable scalars for a given shape.
    ///
    /// ulpt: nr + 2d; no-scale: nr + d; no-shift-no-scale: nr;
    /// vanilla: nd; dpt: nr + rd; tune-p: rd + 2d.
    pub fn param_count(self, n: usize, r: usize, d: usize) -> usize {
        match self {
            Mode::Ulpt => n * r + 2 * d,
            Mode::UlptNoScale => n * r + d,
            Mode::UlptNoShiftNoScale => n * r,
            Mode::VanillaPt => n * d,
            Mode::DptLearnableP => n * r + r * d,
            Mode::TunePFrozenZ => r * d + 2 * d,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = UlptError;
    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| {
                UlptError::Config(format!(
                    "unknown mode {s:?}; expected one of: {}",
                    Mode::ALL.map(Mode::label).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Shape, seed, and mode of one prompt parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Number of prompt tokens.
    pub n: usize,
    /// Trainable prompt width (forced to d in vanilla mode).
    pub r: usize,
    /// Frozen model embedding width.
    pub d: usize,
    /// Seed for the frozen randomness (projection, and the frozen z in
    /// tune-p mode).
    pub seed: Seed,
    pub mode: Mode,
}

impl PromptConfig {
    /// Validates and normalizes a configuration. Vanilla mode ignores the
    /// requested r and pins it to d so the identity projection is square.
    pub fn new(n: usize, r: usize, d: usize, seed: Seed, mode: Mode) -> Result<PromptConfig> {
        let r = if mode == Mode::VanillaPt { d } else { r };
        let config = PromptConfig {
            n,
            r,
            d,
            seed,
            mode,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(UlptError::Config("n must be at least 1".to_string()));
        }
        if self.d == 0 {
            return Err(UlptError::Config("d must be at least 1".to_string()));
        }
        if self.r == 0 || self.r > self.d {
            return Err(UlptError::Config(format!(
                "r must satisfy 1 <= r <= d, got r={} d={}",
                self.r, self.d
            )));
        }
        if self.mode == Mode::VanillaPt && self.r != self.d {
            return Err(UlptError::Config(format!(
                "vanilla mode requires r == d, got r={} d={}",
                self.r, self.d
            )));
        }
        Ok(())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.mode.param_count(self.n, self.r, self.d)
    }
}

/// The r-by-d projection, together with the seed that (re)builds it and
/// whether it is frozen (reseedable) or trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub matrix: Matrix,
    /// Seed that reproduces the initial matrix; for frozen projections this
    /// is all a checkpoint needs to store.
    pub seed: Seed,
    /// Frozen projections are never touched by the optimizer.
    pub frozen: bool,
}

impl ProjectionMatrix {
    /// Identity projection of width d (vanilla mode, and a handy test hook:
    /// with p = I the expansion is exact).
    pub fn identity(d: usize, seed: Seed) -> ProjectionMatrix {
        ProjectionMatrix {
            matrix: Matrix::identity(d),
            seed,
            frozen: true,
        }
    }
}

/// Builds the projection for a configuration.
///
/// Low-rank modes draw an r-by-d matrix with i.i.d. N(0, 1/r) entries from
/// the config seed. If the draw is rank deficient (numerically, at the
/// default tolerance) the next seed value is tried, deterministically, and
/// the seed that was actually used is recorded. Vanilla mode gets the
/// identity. Modes that train the projection receive the same N(0, 1/r)
/// draw as their starting point, so runs with matched seeds start from the
/// same matrix whether or not it is trainable.
pub fn build_projection(config: &PromptConfig) -> Result<ProjectionMatrix> {
    config.validate()?;
    if config.mode == Mode::VanillaPt {
        return Ok(ProjectionMatrix::identity(config.d, config.seed));
    }
    let variance = 1.0 / config.r as f64;
    for attempt in 0..MAX_PROJECTION_ATTEMPTS {
        let seed = Seed(config.seed.0.wrapping_add(attempt));
        let matrix = gaussian_matrix(seed, config.r, config.d, variance)?;
        let summary = rank_and_spectral_extremes(&matrix, DEFAULT_RANK_TOL)?;
        if summary.rank == config.r {
            return Ok(ProjectionMatrix {
                matrix,
                seed,
                frozen: !config.mode.trains_projection(),
            });
        }
    }
    Err(UlptError::Domain(format!(
        "no full-rank {}x{} projection found within {} seeds starting at {}",
        config.r, config.d, MAX_PROJECTION_ATTEMPTS, config.seed
    )))
}

/// Trainable prompt-side parameters: low-dimensional prompts z (n-by-r),
/// per-dimension scale s and shift b (length d). Modes that do not train s
/// or b keep them pinned at ones / zeros so the forward pass is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct UlptParams {
    pub z: Matrix,
    pub s: Vector,
    pub b: Vector,
}

impl UlptParams {
    /// Fresh parameters for a run: z with i.i.d. N(0, 1/r) entries from the
    /// run seed (or, in tune-p mode, from the config seed since z is then
    /// part of the frozen randomness), s all ones, b all zeros.
    pub fn init(config: &PromptConfig, run_seed: Seed) -> Result<UlptParams> {
        config.validate()?;
        let z_seed = if config.mode.trains_z() {
            run_seed
        } else {
            config.seed.derive(1)
        };
        let variance = 1.0 / config.r as f64;
        let z = gaussian_matrix(z_seed, config.n, config.r, variance)?;
        Ok(UlptParams {
            z,
            s: Vector::filled(config.d, 1.0),
            b: Vector::zeros(config.d),
        })
    }

    pub fn shapes_match(&self, config: &PromptConfig) -> bool {
        self.z.rows() == config.n
            && self.z.cols() == config.r
            && self.s.len() == config.d
            && self.b.len() == config.d
    }
}

/// Gradients with respect to the parameterization, shaped like the
/// parameters themselves. `d_p` is present exactly when the projection is
/// trainable.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_z: Matrix,
    pub d_s: Vector,
    pub d_b: Vector,
    pub d_p: Option<Matrix>,
}

/// Expands low-dimensional prompts to full embedding width:
/// e_hat[i][j] = (z p)[i][j] * s[j] + b[j].
pub fn up_project(params: &UlptParams, proj: &ProjectionMatrix) -> Result<Matrix> {
    let d = proj.matrix.cols();
    if params.s.len() != d || params.b.len() != d {
        return Err(UlptError::Dimension(format!(
            "scale/shift length {} does not match projection width {d}",
            params.s.len()
        )));
    }
    let mut e_hat = matmul(&params.z, &proj.matrix)?;
    let s = params.s.as_slice();
    let b = params.b.as_slice();
    for i in 0..e_hat.rows() {
        for (j, v) in e_hat.row_mut(i).iter_mut().enumerate() {
            *v = *v * s[j] + b[j];
        }
    }
    Ok(e_hat)
}

/// Analytic gradients of a loss through the expansion, given the upstream
/// gradient d_e = dL/d(e_hat) (n-by-d).
///
/// For each output column j and prompt row i:
///   d_b[j]    = sum_i d_e[i][j]
///   d_s[j]    = sum_i (z p)[i][j] * d_e[i][j]
///   d_z[i][k] = sum_j p[k][j] * s[j] * d_e[i][j]
///   d_p[k][j] = sum_i z[i][k] * s[j] * d_e[i][j]   (trainable p only)
pub fn backward(
    params: &UlptParams,
    proj: &ProjectionMatrix,
    d_e: &Matrix,
) -> Result<GradientBundle> {
    let n = params.z.rows();
    let r = params.z.cols();
    let d = proj.matrix.cols();
    if proj.matrix.rows() != r {
        return Err(UlptError::Dimension(format!(
            "projection is {}x{} but z has width {r}",
            proj.matrix.rows(),
            d
        )));
    }
    if d_e.rows() != n || d_e.cols() != d {
        return Err(UlptError::Dimension(format!(
            "upstream gradient is {}x{}, expected {n}x{d}",
            d_e.rows(),
            d_e.cols()
        )));
    }
    if params.s.len() != d || params.b.len() != d {
        return Err(UlptError::Dimension(format!(
            "scale/shift length {} does not match projection width {d}",
            params.s.len()
        )));
    }

    let zp = matmul(&params.z, &proj.matrix)?;
    let s = params.s.as_slice();

    let mut d_b = Vector::zeros(d);
    let mut d_s = Vector::zeros(d);
    for i in 0..n {
        let de_row = d_e.row(i);
        let zp_row = zp.row(i);
        for j in 0..d {
            d_b[j] += de_row[j];
            d_s[j] += zp_row[j] * de_row[j];
        }
    }

    // d_z = (d_e scaled per-column by s) times p^T.
    let mut scaled = d_e.clone();
    for i in 0..n {
        for (j, v) in scaled.row_mut(i).iter_mut().enumerate() {
            *v *= s[j];
        }
    }
    let d_z = matmul(&scaled, &proj.matrix.transposed())?;

    let d_p = if proj.frozen {
        None
    } else {
        // d_p[k][j] = sum_i z[i][k] * (s[j] * d_e[i][j]) = (z^T scaled)[k][j].
        Some(matmul(&params.z.transposed(), &scaled)?)
    };

    Ok(GradientBundle { d_z, d_s, d_b, d_p })
}

/// Stacks prompt rows on top of token embedding rows to form the model
/// input: output rows 0..n are the prompt, the rest are the tokens.
pub fn assemble_input(prompt: &Matrix, token_embeddings: &Matrix) -> Result<Matrix> {
    if prompt.cols() != token_embeddings.cols() {
        return Err(UlptError::Dimension(format!(
            "prompt width {} does not match token embedding width {}",
            prompt.cols(),
            token_embeddings.cols()
        )));
    }
    let rows = prompt.rows() + token_embeddings.rows();
    let mut out = Matrix::zeros(rows, prompt.cols());
    for i in 0..prompt.rows() {
        out.row_mut(i).copy_from_slice(prompt.row(i));
    }
    for i in 0..token_embeddings.rows() {
        out.row_mut(prompt.rows() + i)
            .copy_from_slice(token_embeddings.row(i));
    }
    Ok(out)
}

/// Pushes near-zero scale entries back to sign * threshold (zeros count as
/// positive). Returns how many entries were clamped; trainers report the
/// total per run.
pub fn clamp_scale(s: &mut Vector, threshold: f64) -> usize {
    let mut clamped = 0;
    for v in s.as_mut_slice() {
        if v.abs() < threshold {
            *v = if *v < 0.0 { -threshold } else { threshold };
            clamped += 1;
        }
    }
    clamped
}

/// Largest rank whose trainable-parameter count fits a budget, for the two
/// modes one compares at matched budgets: training z (nr + 2d grows with n
/// per rank) versus training the projection (rd + 2d grows with d per
/// rank). The result is capped at d, since ranks above the embedding width
/// buy nothing.
pub fn solve_rank_for_budget(mode: Mode, budget: usize, n: usize, d: usize) -> Result<usize> {
    let per_rank = match mode {
        Mode::Ulpt => n,
        Mode::TunePFrozenZ => d,
        other => {
            return Err(UlptError::Config(format!(
                "budget solving is defined for the z-training and projection-training \
                 modes, not {other}"
            )));
        }
    };
    if n == 0 || d == 0 {
        return Err(UlptError::Config("n and d must be positive".to_string()));
    }
    let overhead = 2 * d;
    let minimum = overhead + per_rank;
    if budget < minimum {
        return Err(UlptError::InfeasibleBudget(format!(
            "budget {budget} cannot fit mode {mode} at n={n}, d={d}: rank 1 already \
             needs {minimum} parameters"
        )));
    }
    Ok(((budget - overhead) / per_rank).min(d))
}

/// One finite-difference gradient comparison: largest relative disagreement
/// between analytic and central-difference gradients over all trainable
/// coordinates of random instances.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

/// Checks the analytic backward pass against central finite differences of
/// the quadratic loss L = 0.5 * ||e_hat - t||_F^2 on randomly sized, randomly
/// filled instances of one mode.
///
/// Every trainable coordinate of every instance is perturbed by +/- h; the
/// centered slope is compared to the analytic gradient with relative error
/// |a - f| / max(|a|, |f|, 1e-6). Because the loss is quadratic in each
/// coordinate, the centered slope is exact up to rounding, making this a
/// genuinely independent oracle for the backward formulas.
pub fn gradcheck_suite(
    mode: Mode,
    max_n: usize,
    max_r: usize,
    max_d: usize,
    instances: usize,
    seed: Seed,
    h: f64,
) -> Result<GradcheckReport> {
    if max_n == 0 || max_r == 0 || max_d == 0 || max_r > max_d {
        return Err(UlptError::Config(format!(
            "gradcheck size caps must satisfy 1 <= max_r <= max_d and max_n >= 1, got n<={max_n} r<={max_r} d<={max_d}"
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(UlptError::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0usize;
    for instance in 0..instances {
        let mut rng = Rng64::new(seed.derive(instance as u64));
        let n = 1 + rng.next_below(max_n as u64) as usize;
        let d = 1 + rng.next_below(max_d as u64) as usize;
        let r_cap = max_r.min(d);
        let r = 1 + rng.next_below(r_cap as u64) as usize;
        let config = PromptConfig::new(n, r, d, Seed(rng.next_u64()), mode)?;
        let mut proj = build_projection(&config)?;

        // Random, well-scaled instance data. Scale entries stay away from
        // zero so relative errors are well conditioned.
        let mut params = UlptParams::init(&config, Seed(rng.next_u64()))?;
        for v in params.z.as_mut_slice() {
            *v = rng.next_gaussian();
        }
        if !proj.frozen {
            for v in proj.matrix.as_mut_slice() {
                *v = rng.next_gaussian();
            }
        }
        if mode.trains_scale() {
            for v in params.s.as_mut_slice() {
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                *v = sign * rng.next_range(0.5, 1.5);
            }
        }
        if mode.trains_shift() {
            for v in params.b.as_mut_slice() {
                *v = rng.next_gaussian();
            }
        }
        let target = {
            let mut t = Matrix::zeros(config.n, config.d);
            for v in t.as_mut_slice() {
                *v = rng.next_gaussian();
            }
            t
        };

        let loss = |params: &UlptParams, proj: &ProjectionMatrix| -> Result<f64> {
            let e_hat = up_project(params, proj)?;
            Ok(0.5 * e_hat.sub(&target)?.frobenius_norm().powi(2))
        };

        let e_hat = up_project(&params, &proj)?;
        let d_e = e_hat.sub(&target)?;
        let grads = backward(&params, &proj, &d_e)?;

        let mut check = |analytic: f64, fd: f64| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            coords_checked += 1;
        };

        // Central difference for one coordinate, restoring it afterwards.
        macro_rules! fd_at {
            ($slot:expr) => {{
                let orig = *$slot;
                *$slot = orig + h;
                let up = loss(&params, &proj)?;
                *$slot = orig - h;
                let down = loss(&params, &proj)?;
                *$slot = orig;
                (up - down) / (2.0 * h)
            }};
        }

        if mode.trains_z() {
            for idx in 0..config.n * config.r {
                let fd = fd_at!(&mut params.z.as_mut_slice()[idx]);
                check(grads.d_z.as_slice()[idx], fd);
            }
        }
        if mode.trains_scale() {
            for j in 0..config.d {
                let fd = fd_at!(&mut params.s[j]);
                check(grads.d_s[j], fd);
            }
        }
        if mode.trains_shift() {
            for j in 0..config.d {
                let fd = fd_at!(&mut params.b[j]);
                check(grads.d_b[j], fd);
            }
        }
        if let Some(ref d_p) = grads.d_p {
            for idx in 0..config.r * config.d {
                let fd = fd_at!(&mut proj.matrix.as_mut_slice()[idx]);
                check(d_p.as_slice()[idx], fd);
            }
        }
    }
    Ok(GradcheckReport {
        instances,
        coords_checked,
        max_rel_err,
    })
}
