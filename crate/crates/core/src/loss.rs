//! Transducer forward recursions with exact gradients.
//!
//! Three variants share one grid of log-probabilities:
//!
//! * `Regular`: a symbol stays on its frame,
//!   `alpha(t,u) = logadd(alpha(t-1,u) + blank(t-1,u), alpha(t,u-1) + y(t,u-1))`,
//!   terminated by a final blank at `(T-1, U)`.
//! * `Modified`: a symbol moves to the next frame,
//!   `alpha(t,u) = logadd(alpha(t-1,u) + blank(t-1,u), alpha(t-1,u-1) + y(t-1,u-1))`,
//!   terminated at `alpha(T, U)`.
//! * `Constrained`: as `Modified`, but emitting a symbol also pays the blank
//!   of the new context on the same frame: the diagonal term gains
//!   `+ blank(t-1, u)`.
//!
//! All arithmetic here is `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logspace::{log_add, log_sum_exp, safe_exp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid too large for enumeration (T={t}, U={u}; limits T<=8, U<=6)")]
    TooLarge { t: usize, u: usize },
    #[error("log-likelihood is -inf; gradient undefined")]
    UndefinedGradient,
    #[error("validation failed: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Regular,
    Modified,
    Constrained,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Regular, Variant::Modified, Variant::Constrained];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Regular => "regular",
            Variant::Modified => "modified",
            Variant::Constrained => "constrained",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(Variant::Regular),
            "modified" => Ok(Variant::Modified),
            "constrained" => Ok(Variant::Constrained),
            other => Err(LossError::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// Per-utterance log-probabilities over the `(t, u)` alignment grid.
///
/// `blank(t, u)` is `log P(blank | context after u targets, frame t)` and has
/// `U + 1` columns; `symbol(t, u)` is `log P(target[u] | same)` and has `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrid {
    frames: usize,
    targets: usize,
    blank: Vec<f64>,
    symbol: Vec<f64>,
}

impl LogProbGrid {
    pub fn new(frames: usize, targets: usize, blank: Vec<f64>, symbol: Vec<f64>) -> Result<Self, LossError> {
        if blank.len() != frames * (targets + 1) || symbol.len() != frames * targets {
            return Err(LossError::InvalidArgument(format!(
                "grid shape mismatch for T={frames}, U={targets}: blank {} symbol {}",
                blank.len(),
                symbol.len()
            )));
        }
        if blank.iter().chain(&symbol).any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(LossError::InvalidArgument("grid entries must be < +inf and not NaN".into()));
        }
        Ok(LogProbGrid {
            frames,
            targets,
            blank,
            symbol,
        })
    }

    /// Grid with every entry equal to `value`.
    pub fn uniform(frames: usize, targets: usize, value: f64) -> Self {
        LogProbGrid {
            frames,
            targets,
            blank: vec![value; frames * (targets + 1)],
            symbol: vec![value; frames * targets],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    #[inline]
    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.blank[t * (self.targets + 1) + u]
    }

    #[inline]
    pub fn symbol(&self, t: usize, u: usize) -> f64 {
        self.symbol[t * self.targets + u]
    }

    pub fn blank_mut(&mut self, t: usize, u: usize) -> &mut f64 {
        &mut self.blank[t * (self.targets + 1) + u]
    }

    pub fn symbol_mut(&mut self, t: usize, u: usize) -> &mut f64 {
        &mut self.symbol[t * self.targets + u]
    }

    pub fn blank_values(&self) -> &[f64] {
        &self.blank
    }

    pub fn symbol_values(&self) -> &[f64] {
        &self.symbol
    }
}

/// Forward table and data log-likelihood of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub variant: Variant,
    pub loglik: f64,
    /// Row-major, `rows x (U + 1)`; `rows` is `T` for regular, `T + 1` otherwise.
    pub alpha: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl LossResult {
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.cols + u]
    }

    /// False when no alignment exists (modified/constrained with `U > T`).
    pub fn is_feasible(&self) -> bool {
        self.loglik > f64::NEG_INFINITY
    }

    /// The terminal expression re-evaluated from the stored table.
    pub fn terminal_from_alpha(&self, grid: &LogProbGrid) -> f64 {
        let u = grid.targets();
        match self.variant {
            Variant::Regular => self.alpha(grid.frames() - 1, u) + grid.blank(grid.frames() - 1, u),
            Variant::Modified | Variant::Constrained => self.alpha(grid.frames(), u),
        }
    }
}

/// Partial derivatives of `loglik` with respect to each grid entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub frames: usize,
    pub targets: usize,
    pub d_blank: Vec<f64>,
    pub d_symbol: Vec<f64>,
}

impl GridGradient {
    fn zeros(frames: usize, targets: usize) -> Self {
        GridGradient {
            frames,
            targets,
            d_blank: vec![0.0; frames * (targets + 1)],
            d_symbol: vec![0.0; frames * targets],
        }
    }

    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.d_blank[t * (self.targets + 1) + u]
    }

    pub fn symbol(&self, t: usize, u: usize) -> f64 {
        self.d_symbol[t * self.targets + u]
    }

    fn blank_mut(&mut self, t: usize, u: usize) -> &mut f64 {
        &mut self.d_blank[t * (self.targets + 1) + u]
    }

    fn symbol_mut(&mut self, t: usize, u: usize) -> &mut f64 {
        &mut self.d_symbol[t * self.targets + u]
    }

    fn scale(&mut self, factor: f64) {
        for v in self.d_blank.iter_mut().chain(self.d_symbol.iter_mut()) {
            *v *= factor;
        }
    }
}

fn check_frames(grid: &LogProbGrid) -> Result<(), LossError> {
    if grid.frames() == 0 {
        Err(LossError::InvalidArgument("at least one frame is required".into()))
    } else {
        Ok(())
    }
}

pub fn forward_regular(grid: &LogProbGrid) -> Result<LossResult, LossError> {
    check_frames(grid)?;
    let (rows, cols) = (grid.frames(), grid.targets() + 1);
    let mut alpha = vec![f64::NEG_INFINITY; rows * cols];
    for t in 0..rows {
        for u in 0..cols {
            let value = if t == 0 && u == 0 {
                0.0
            } else {
                let mut acc = f64::NEG_INFINITY;
                if t > 0 {
                    acc = alpha[(t - 1) * cols + u] + grid.blank(t - 1, u);
                }
                if u > 0 {
                    acc = log_add(acc, alpha[t * cols + u - 1] + grid.symbol(t, u - 1));
                }
                acc
            };
            alpha[t * cols + u] = value;
        }
    }
    let loglik = alpha[(rows - 1) * cols + cols - 1] + grid.blank(rows - 1, cols - 1);
    Ok(LossResult {
        variant: Variant::Regular,
        loglik,
        alpha,
        rows,
        cols,
    })
}

fn forward_diagonal(grid: &LogProbGrid, variant: Variant) -> Result<LossResult, LossError> {
    check_frames(grid)?;
    let (rows, cols) = (grid.frames() + 1, grid.targets() + 1);
    let mut alpha = vec![f64::NEG_INFINITY; rows * cols];
    alpha[0] = 0.0;
    for t in 1..rows {
        for u in 0..cols {
            let mut acc = alpha[(t - 1) * cols + u] + grid.blank(t - 1, u);
            if u > 0 {
                let mut diag = alpha[(t - 1) * cols + u - 1] + grid.symbol(t - 1, u - 1);
                if variant == Variant::Constrained {
                    diag += grid.blank(t - 1, u);
                }
                acc = log_add(acc, diag);
            }
            alpha[t * cols + u] = acc;
        }
    }
    let loglik = alpha[rows * cols - 1];
    Ok(LossResult {
        variant,
        loglik,
        alpha,
        rows,
        cols,
    })
}

/// Emitting a symbol consumes a frame. `U > T` yields `loglik = -inf`.
pub fn forward_modified(grid: &LogProbGrid) -> Result<LossResult, LossError> {
    forward_diagonal(grid, Variant::Modified)
}

/// As [`forward_modified`], with the next context's blank paid on the
/// emitting frame.
pub fn forward_constrained(grid: &LogProbGrid) -> Result<LossResult, LossError> {
    forward_diagonal(grid, Variant::Constrained)
}

pub fn forward(grid: &LogProbGrid, variant: Variant) -> Result<LossResult, LossError> {
    match variant {
        Variant::Regular => forward_regular(grid),
        Variant::Modified => forward_modified(grid),
        Variant::Constrained => forward_constrained(grid),
    }
}

/// Reference log-likelihood by explicit enumeration of every alignment.
///
/// Regular: every interleaving of `T - 1` blanks with `U` symbols, plus the
/// final blank. Modified/constrained: every size-`U` subset of frames that
/// emit a symbol. Refuses grids beyond `T <= 8`, `U <= 6`.
pub fn brute_force_loglik(grid: &LogProbGrid, variant: Variant) -> Result<f64, LossError> {
    let (frames, targets) = (grid.frames(), grid.targets());
    check_frames(grid)?;
    if frames > 8 || targets > 6 {
        return Err(LossError::TooLarge { t: frames, u: targets });
    }
    let mut scores = Vec::new();
    match variant {
        Variant::Regular => {
            // Sequence of moves: true = symbol, false = blank.
            let moves = frames - 1 + targets;
            for mask in 0u32..(1 << moves) {
                if mask.count_ones() as usize != targets {
                    continue;
                }
                let (mut t, mut u, mut score) = (0usize, 0usize, 0.0);
                for step in 0..moves {
                    if mask >> step & 1 == 1 {
                        score += grid.symbol(t, u);
                        u += 1;
                    } else {
                        score += grid.blank(t, u);
                        t += 1;
                    }
                }
                debug_assert_eq!((t, u), (frames - 1, targets));
                scores.push(score + grid.blank(t, u));
            }
        }
        Variant::Modified | Variant::Constrained => {
            for mask in 0u32..(1 << frames) {
                if mask.count_ones() as usize != targets {
                    continue;
                }
                let mut u = 0usize;
                let mut score = 0.0;
                let mut last_emit: Option<usize> = None;
                for t in 0..frames {
                    if mask >> t & 1 == 1 {
                        assert!(last_emit.is_none_or(|p| p < t), "frames must strictly increase");
                        last_emit = Some(t);
                        score += grid.symbol(t, u);
                        u += 1;
                        if variant == Variant::Constrained {
                            score += grid.blank(t, u);
                        }
                    } else {
                        score += grid.blank(t, u);
                    }
                }
                scores.push(score);
            }
        }
    }
    Ok(log_sum_exp(scores))
}

/// Exact gradient of the variant's log-likelihood via the backward recursion.
pub fn grad(grid: &LogProbGrid, variant: Variant) -> Result<(LossResult, GridGradient), LossError> {
    let fwd = forward(grid, variant)?;
    if !fwd.is_feasible() {
        return Err(LossError::UndefinedGradient);
    }
    let loglik = fwd.loglik;
    let (frames, targets) = (grid.frames(), grid.targets());
    let cols = targets + 1;
    let mut g = GridGradient::zeros(frames, targets);
    match variant {
        Variant::Regular => {
            let mut beta = vec![f64::NEG_INFINITY; frames * cols];
            for t in (0..frames).rev() {
                for u in (0..cols).rev() {
                    let mut acc = if t == frames - 1 && u == targets {
                        grid.blank(t, u)
                    } else {
                        f64::NEG_INFINITY
                    };
                    if t + 1 < frames {
                        acc = log_add(acc, grid.blank(t, u) + beta[(t + 1) * cols + u]);
                    }
                    if u < targets {
                        acc = log_add(acc, grid.symbol(t, u) + beta[t * cols + u + 1]);
                    }
                    beta[t * cols + u] = acc;
                }
            }
            for t in 0..frames {
                for u in 0..cols {
                    let a = fwd.alpha(t, u);
                    let after_blank = if t + 1 < frames {
                        beta[(t + 1) * cols + u]
                    } else if u == targets {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    };
                    *g.blank_mut(t, u) = safe_exp(a + grid.blank(t, u) + after_blank - loglik);
                    if u < targets {
                        *g.symbol_mut(t, u) =
                            safe_exp(a + grid.symbol(t, u) + beta[t * cols + u + 1] - loglik);
                    }
                }
            }
        }
        Variant::Modified | Variant::Constrained => {
            let constrained = variant == Variant::Constrained;
            let diag = |t: usize, u: usize| {
                grid.symbol(t, u) + if constrained { grid.blank(t, u + 1) } else { 0.0 }
            };
            let rows = frames + 1;
            let mut beta = vec![f64::NEG_INFINITY; rows * cols];
            beta[frames * cols + targets] = 0.0;
            for t in (0..frames).rev() {
                for u in 0..cols {
                    let mut acc = grid.blank(t, u) + beta[(t + 1) * cols + u];
                    if u < targets {
                        acc = log_add(acc, diag(t, u) + beta[(t + 1) * cols + u + 1]);
                    }
                    beta[t * cols + u] = acc;
                }
            }
            for t in 0..frames {
                for u in 0..cols {
                    let a = fwd.alpha(t, u);
                    *g.blank_mut(t, u) += safe_exp(a + grid.blank(t, u) + beta[(t + 1) * cols + u] - loglik);
                    if u < targets {
                        let occ = safe_exp(a + diag(t, u) + beta[(t + 1) * cols + u + 1] - loglik);
                        *g.symbol_mut(t, u) += occ;
                        if constrained {
                            *g.blank_mut(t, u + 1) += occ;
                        }
                    }
                }
            }
        }
    }
    Ok((fwd, g))
}

/// Trivial-joiner grid: `z[t][u][k] = enc[t][k] + (1 + lm_scale) * dec[u][k]`,
/// log-softmax over `k`, then the blank column and the target column.
///
/// `enc_lp` is `T x V`, `dec_lp` is `(U + 1) x V`, both row-major and each row
/// log-normalized. Row `u` of `dec_lp` belongs to the context after `u` targets.
pub fn trivial_joiner_logprobs(
    enc_lp: &[f64],
    dec_lp: &[f64],
    vocab: usize,
    targets: &[u32],
    lm_scale: f64,
) -> Result<LogProbGrid, LossError> {
    trivial_joiner_full(enc_lp, dec_lp, vocab, targets, lm_scale).map(|(grid, _)| grid)
}

/// [`trivial_joiner_logprobs`] that also returns the full normalized
/// distribution `T x (U + 1) x V` (needed for backpropagation).
pub fn trivial_joiner_full(
    enc_lp: &[f64],
    dec_lp: &[f64],
    vocab: usize,
    targets: &[u32],
    lm_scale: f64,
) -> Result<(LogProbGrid, Vec<f64>), LossError> {
    if vocab < 2 {
        return Err(LossError::InvalidArgument("vocabulary must include blank and a token".into()));
    }
    if !(lm_scale >= 0.0) {
        return Err(LossError::InvalidArgument(format!("lm_scale {lm_scale} must be >= 0")));
    }
    if enc_lp.len() % vocab != 0 || dec_lp.len() != (targets.len() + 1) * vocab {
        return Err(LossError::InvalidArgument("trivial joiner input shapes disagree".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&k| k == 0 || k as usize >= vocab) {
        return Err(LossError::InvalidArgument(format!("target token {bad} out of range")));
    }
    for (name, rows) in [("encoder", enc_lp), ("decoder", dec_lp)] {
        for (i, row) in rows.chunks(vocab).enumerate() {
            let norm = log_sum_exp(row.iter().copied());
            if !(norm.abs() <= 1e-6) {
                return Err(LossError::Validation(format!(
                    "{name} row {i} is not log-normalized (log-sum-exp {norm})"
                )));
            }
        }
    }
    let frames = enc_lp.len() / vocab;
    let u_count = targets.len();
    let scale = 1.0 + lm_scale;
    let mut full = vec![0.0; frames * (u_count + 1) * vocab];
    let mut blank = Vec::with_capacity(frames * (u_count + 1));
    let mut symbol = Vec::with_capacity(frames * u_count);
    for t in 0..frames {
        let enc_row = &enc_lp[t * vocab..(t + 1) * vocab];
        for u in 0..=u_count {
            let dec_row = &dec_lp[u * vocab..(u + 1) * vocab];
            let out = &mut full[(t * (u_count + 1) + u) * vocab..][..vocab];
            for k in 0..vocab {
                out[k] = enc_row[k] + scale * dec_row[k];
            }
            crate::logspace::log_softmax_f64(out);
            blank.push(out[0]);
            if u < u_count {
                symbol.push(out[targets[u] as usize]);
            }
        }
    }
    Ok((LogProbGrid::new(frames, u_count, blank, symbol)?, full))
}

/// Value and gradients of
/// `-loglik(full) + lambda_simple * -loglik(trivial)`.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub full_loglik: f64,
    pub trivial_loglik: f64,
    /// Gradient of `value` (not of the log-likelihood) w.r.t. the full grid.
    pub d_full: GridGradient,
    pub d_trivial: GridGradient,
}

pub fn combined_loss(
    full: &LogProbGrid,
    trivial: &LogProbGrid,
    variant: Variant,
    lambda_simple: f64,
) -> Result<CombinedLoss, LossError> {
    if (full.frames(), full.targets()) != (trivial.frames(), trivial.targets()) {
        return Err(LossError::InvalidArgument("full and trivial grids differ in shape".into()));
    }
    let (full_res, mut d_full) = grad(full, variant)?;
    let (trivial_res, mut d_trivial) = grad(trivial, variant)?;
    d_full.scale(-1.0);
    d_trivial.scale(-lambda_simple);
    Ok(CombinedLoss {
        value: -full_res.loglik - lambda_simple * trivial_res.loglik,
        full_loglik: full_res.loglik,
        trivial_loglik: trivial_res.loglik,
        d_full,
        d_trivial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ln_choose(n: usize, k: usize) -> f64 {
        (0..k).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum()
    }

    fn random_grid(rng: &mut ChaCha8Rng, frames: usize, targets: usize) -> LogProbGrid {
        let blank = (0..frames * (targets + 1)).map(|_| rng.random_range(-3.0..0.0)).collect();
        let symbol = (0..frames * targets).map(|_| rng.random_range(-3.0..0.0)).collect();
        LogProbGrid::new(frames, targets, blank, symbol).unwrap()
    }

    #[test]
    fn empty_target_is_all_blank() {
        let grid = LogProbGrid::uniform(4, 0, 0.0);
        for v in Variant::ALL {
            assert_eq!(forward(&grid, v).unwrap().loglik, 0.0);
        }
    }

    #[test]
    fn two_by_one_half_grid() {
        let grid = LogProbGrid::uniform(2, 1, 0.5f64.ln());
        assert!((forward_regular(&grid).unwrap().loglik - 0.25f64.ln()).abs() < 1e-12);
        assert!((forward_modified(&grid).unwrap().loglik - 0.5f64.ln()).abs() < 1e-12);
        assert!((forward_constrained(&grid).unwrap().loglik - 0.25f64.ln()).abs() < 1e-12);
        for v in Variant::ALL {
            let f = forward(&grid, v).unwrap().loglik;
            assert!((f - brute_force_loglik(&grid, v).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_targets() {
        let grid = LogProbGrid::uniform(2, 3, -0.1);
        for v in [Variant::Modified, Variant::Constrained] {
            let res = forward(&grid, v).unwrap();
            assert!(!res.is_feasible());
            assert_eq!(grad(&grid, v).unwrap_err(), LossError::UndefinedGradient);
        }
        assert!(forward_regular(&grid).unwrap().is_feasible());
    }

    #[test]
    fn zero_frames_rejected() {
        let grid = LogProbGrid::uniform(0, 0, 0.0);
        for v in Variant::ALL {
            assert!(matches!(forward(&grid, v), Err(LossError::InvalidArgument(_))));
        }
    }

    #[test]
    fn closed_forms_on_uniform_grids() {
        let lp = 0.3f64.ln();
        for frames in 1..=6 {
            for targets in 0..=4 {
                let grid = LogProbGrid::uniform(frames, targets, lp);
                let regular = ln_choose(frames - 1 + targets, targets) + (frames + targets) as f64 * lp;
                assert!((forward_regular(&grid).unwrap().loglik - regular).abs() <= 1e-9);
                if targets <= frames {
                    let modified = ln_choose(frames, targets) + frames as f64 * lp;
                    let constrained = ln_choose(frames, targets) + (frames + targets) as f64 * lp;
                    assert!((forward_modified(&grid).unwrap().loglik - modified).abs() <= 1e-9);
                    assert!((forward_constrained(&grid).unwrap().loglik - constrained).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn brute_force_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = random_grid(&mut rng, 5, 0);
        let sum: f64 = (0..5).map(|t| grid.blank(t, 0)).sum();
        for v in Variant::ALL {
            assert!((brute_force_loglik(&grid, v).unwrap() - sum).abs() < 1e-12);
        }
        let grid = random_grid(&mut rng, 1, 1);
        assert!((brute_force_loglik(&grid, Variant::Modified).unwrap() - grid.symbol(0, 0)).abs() < 1e-15);
        assert_eq!(
            brute_force_loglik(&random_grid(&mut rng, 9, 1), Variant::Regular),
            Err(LossError::TooLarge { t: 9, u: 1 })
        );
    }

    #[test]
    fn recursions_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let frames = rng.random_range(1..=6);
            let targets = rng.random_range(0..=4);
            let grid = random_grid(&mut rng, frames, targets);
            for v in Variant::ALL {
                let res = forward(&grid, v).unwrap();
                let brute = brute_force_loglik(&grid, v).unwrap();
                if brute == f64::NEG_INFINITY {
                    assert_eq!(res.loglik, brute);
                } else {
                    assert!((res.loglik - brute).abs() <= 1e-6);
                }
                let terminal = res.terminal_from_alpha(&grid);
                assert!(terminal == res.loglik || (terminal - res.loglik).abs() <= 1e-12);
                if v == Variant::Constrained {
                    assert!(res.loglik <= forward_modified(&grid).unwrap().loglik);
                }
            }
        }
    }

    #[test]
    fn gradient_of_empty_target_saturates_blanks() {
        let grid = LogProbGrid::uniform(3, 0, -0.2);
        for v in Variant::ALL {
            let (_, g) = grad(&grid, v).unwrap();
            assert!(g.d_blank.iter().all(|&d| (d - 1.0).abs() < 1e-12));
            assert!(g.d_symbol.is_empty());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-4;
        for _ in 0..20 {
            let grid = random_grid(&mut rng, 4, 2);
            for v in Variant::ALL {
                let (_, g) = grad(&grid, v).unwrap();
                let f = |grid: &LogProbGrid| forward(grid, v).unwrap().loglik;
                for t in 0..4 {
                    for u in 0..3 {
                        let mut plus = grid.clone();
                        *plus.blank_mut(t, u) += h;
                        let mut minus = grid.clone();
                        *minus.blank_mut(t, u) -= h;
                        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                        let analytic = g.blank(t, u);
                        assert!((numeric - analytic).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-3));
                    }
                    for u in 0..2 {
                        let mut plus = grid.clone();
                        *plus.symbol_mut(t, u) += h;
                        let mut minus = grid.clone();
                        *minus.symbol_mut(t, u) -= h;
                        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                        let analytic = g.symbol(t, u);
                        assert!((numeric - analytic).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-3));
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_gradients_are_symmetric() {
        // Reversing time and targets maps a uniform grid's alignment set onto
        // itself, so the regular occupancies are point-symmetric.
        let grid = LogProbGrid::uniform(4, 3, 0.4f64.ln());
        let (_, g) = grad(&grid, Variant::Regular).unwrap();
        for t in 0..4 {
            for u in 0..3 {
                assert!((g.symbol(t, u) - g.symbol(3 - t, 2 - u)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trivial_joiner_checks_and_reduces() {
        let vocab = 3;
        let uniform = vec![(1.0f64 / 3.0).ln(); 2 * vocab];
        let mut dec = vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln(), 0.6f64.ln(), 0.1f64.ln(), 0.3f64.ln()];
        let grid = trivial_joiner_logprobs(&uniform, &dec, vocab, &[2], 0.25).unwrap();
        // Uniform encoder rows reduce to softmax((1 + lm_scale) * dec).
        for u in 0..2 {
            let mut expected: Vec<f64> = dec[u * vocab..(u + 1) * vocab].iter().map(|v| 1.25 * v).collect();
            crate::logspace::log_softmax_f64(&mut expected);
            for t in 0..2 {
                assert!((grid.blank(t, u) - expected[0]).abs() < 1e-12);
                if u == 0 {
                    assert!((grid.symbol(t, 0) - expected[2]).abs() < 1e-12);
                }
            }
        }
        dec[0] += 0.5;
        assert!(matches!(
            trivial_joiner_logprobs(&uniform, &dec, vocab, &[2], 0.25),
            Err(LossError::Validation(_))
        ));
    }

    #[test]
    fn combined_loss_without_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = random_grid(&mut rng, 4, 2);
        let trivial = random_grid(&mut rng, 4, 2);
        let c = combined_loss(&full, &trivial, Variant::Constrained, 0.0).unwrap();
        assert_eq!(c.value, -forward_constrained(&full).unwrap().loglik);
        assert!(c.d_trivial.d_blank.iter().all(|&d| d == 0.0));
    }
}
