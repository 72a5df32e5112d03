//! Soft pseudo-labels over the `K+1` peers.
//!
//! The positive row is pinned at `ξ`. The negative block `Ŷ` (`K × N`) is the
//! entropic transport plan between the uniform row marginal `1/K` and the
//! uniform column marginal `1/N` with cost `−log P̂`, `P̂ = P[1..]/N`:
//!
//! ```text
//! min_Ŷ ⟨Ŷ, −log P̂⟩ − (1/λ) H(Ŷ)   s.t.  Ŷ1 = 1/K,  Ŷᵀ1 = 1/N,  Ŷ ≥ 0
//! ```
//!
//! whose solution has the form `diag(α) P̂^λ diag(β)`. The assembled label
//! matrix is `[ξ·1ᵀ ; N(1−ξ)·Ŷ]`, so every column sums to one.

use crate::error::{Error, Result};
use crate::matrix::Mat;

/// Lower clamp applied to `P̂^λ` before normalization.
pub const PROB_FLOOR: f64 = 1e-300;

/// Residual below which the oracle's scaling iteration stops.
pub const ORACLE_RESIDUAL: f64 = 1e-12;

/// Minimum number of oracle scaling sweeps.
pub const ORACLE_MIN_ITERS: usize = 10_000;

const ORACLE_MAX_ITERS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMatrix {
    y: Mat,
    xi: f64,
    lambda: f64,
    iters: usize,
    dominance_violations: usize,
}

impl PseudoLabelMatrix {
    pub fn y(&self) -> &Mat {
        &self.y
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn iters(&self) -> usize {
        self.iters
    }

    /// Number of assembled negative entries that exceed `ξ`. The relaxed
    /// assembly only keeps the positive peer dominant on average; this counts
    /// the columns where it does not.
    pub fn dominance_violations(&self) -> usize {
        self.dominance_violations
    }

    /// The negative block divided back by `N(1−ξ)`; `None` when `ξ = 1`.
    pub fn transport_plan(&self) -> Option<Mat> {
        let n = self.y.cols() as f64;
        let mass = n * (1.0 - self.xi);
        (mass > 0.0).then(|| self.y.row_range(1, self.y.rows()).scale(1.0 / mass))
    }

    /// Keeps only the first `n` columns (used when the solve ran over an
    /// extended batch).
    pub fn truncate_columns(&self, n: usize) -> PseudoLabelMatrix {
        PseudoLabelMatrix {
            y: self.y.col_range(0, n),
            ..self.clone()
        }
    }

    pub fn into_inner(self) -> Mat {
        self.y
    }
}

fn check_xi(xi: f64, negatives: usize) -> Result<()> {
    let lo = 1.0 / (negatives as f64 + 1.0);
    if !(xi >= lo && xi <= 1.0) {
        return Err(Error::param(
            "xi",
            format!("must lie in [{lo}, 1], got {xi}"),
        ));
    }
    Ok(())
}

fn check_prob(p: &Mat) -> Result<()> {
    if p.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if p.rows() < 2 {
        return Err(Error::shape(
            "at least 2 rows (positive + negatives)",
            format!("{} rows", p.rows()),
        ));
    }
    for r in 0..p.rows() {
        for (col, &value) in p.row(r).iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::LogDomain { row: r, col, value });
            }
        }
    }
    Ok(())
}

/// `P̂ = P[1..] / N`.
pub fn negative_block(p: &Mat) -> Mat {
    let n = p.cols() as f64;
    p.row_range(1, p.rows()).map(|v| v / n)
}

/// Normalized Gibbs kernel `P̂^λ / ΣP̂^λ`, the starting point of the scaling.
fn gibbs_kernel(p: &Mat, lambda: f64) -> Mat {
    let kernel = negative_block(p).map(|v| v.powf(lambda).max(PROB_FLOOR));
    let total = kernel.sum();
    kernel.map(|v| v / total)
}

fn sinkhorn_sweep(y: &mut Mat) {
    let (k, n) = y.shape();
    for (r, s) in y.row_sums().into_iter().enumerate() {
        let denom = s * k as f64;
        y.row_mut(r).iter_mut().for_each(|v| *v /= denom);
    }
    let col_denoms: Vec<f64> = y.col_sums().into_iter().map(|s| s * n as f64).collect();
    for r in 0..k {
        for (v, d) in y.row_mut(r).iter_mut().zip(&col_denoms) {
            *v /= d;
        }
    }
}

fn check_solver_args(p: &Mat, lambda: f64, iters: usize) -> Result<()> {
    check_prob(p)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param("lambda", format!("must be > 0, got {lambda}")));
    }
    if iters == 0 {
        return Err(Error::param("iters", "must be at least 1"));
    }
    Ok(())
}

/// The negative-block plan `Ŷ` (`K × N`) after `iters` row/column sweeps.
/// Columns sum to `1/N` (the column step runs last); rows approach `1/K`.
pub fn sinkhorn_plan(p: &Mat, lambda: f64, iters: usize) -> Result<Mat> {
    check_solver_args(p, lambda, iters)?;
    let mut y = gibbs_kernel(p, lambda);
    for _ in 0..iters {
        sinkhorn_sweep(&mut y);
    }
    Ok(y)
}

/// Every intermediate plan, one per sweep (index 0 is the normalized kernel).
pub fn sinkhorn_trace(p: &Mat, lambda: f64, iters: usize) -> Result<Vec<Mat>> {
    check_solver_args(p, lambda, iters)?;
    let mut y = gibbs_kernel(p, lambda);
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(y.clone());
    for _ in 0..iters {
        sinkhorn_sweep(&mut y);
        trace.push(y.clone());
    }
    Ok(trace)
}

/// Builds `[ξ·1ᵀ ; N(1−ξ)·Ŷ]`.
pub fn assemble(plan: &Mat, xi: f64, lambda: f64, iters: usize) -> Result<PseudoLabelMatrix> {
    check_xi(xi, plan.rows())?;
    let n = plan.cols();
    let mass = n as f64 * (1.0 - xi);
    let head = Mat::filled(1, n, xi);
    let y = head.vcat(&plan.scale(mass))?;
    let dominance_violations = y
        .row_range(1, y.rows())
        .as_slice()
        .iter()
        .filter(|&&v| v > xi)
        .count();
    if dominance_violations > 0 {
        log::warn!(
            "{dominance_violations} pseudo-label entries exceed the positive mass xi={xi}; \
             the positive peer is not dominant in every column"
        );
    }
    Ok(PseudoLabelMatrix {
        y,
        xi,
        lambda,
        iters,
        dominance_violations,
    })
}

/// Pseudo-labels from the truncated Sinkhorn-Knopp solve.
///
/// `p` is treated as a constant. With `ξ = 1` the negative block is scaled by
/// zero and the result equals [`one_hot_labels`].
pub fn sinkhorn_labels(p: &Mat, xi: f64, lambda: f64, iters: usize) -> Result<PseudoLabelMatrix> {
    check_xi(xi, p.rows().saturating_sub(1))?;
    let plan = sinkhorn_plan(p, lambda, iters)?;
    assemble(&plan, xi, lambda, iters)
}

/// Classical contrastive targets: all mass on the positive peer.
pub fn one_hot_labels(k_plus_one: usize, n: usize) -> PseudoLabelMatrix {
    let y = Mat::from_fn(k_plus_one, n, |r, _| if r == 0 { 1.0 } else { 0.0 });
    PseudoLabelMatrix {
        y,
        xi: 1.0,
        lambda: f64::NAN,
        iters: 0,
        dominance_violations: 0,
    }
}

/// `⟨Ŷ, −log P̂⟩ − (1/λ) H(Ŷ)` with `H(Ŷ) = −Σ ŷ log ŷ` (`0 log 0 = 0`).
pub fn transport_objective(plan: &Mat, p_hat: &Mat, lambda: f64) -> Result<f64> {
    if plan.shape() != p_hat.shape() {
        return Err(Error::shape(
            format!("{}x{}", p_hat.rows(), p_hat.cols()),
            format!("{}x{}", plan.rows(), plan.cols()),
        ));
    }
    let mut total = 0.0;
    for (&y, &p) in plan.as_slice().iter().zip(p_hat.as_slice()) {
        if y > 0.0 {
            total += y * (-p.ln()) + y * y.ln() / lambda;
        }
    }
    Ok(total)
}

/// Reference solution of the entropic transport problem by a route
/// independent of [`sinkhorn_labels`]:
///
/// * `K = 1`: the polytope is a single point, `Ŷ = 1/N`.
/// * `K = 2, N = 2`: golden-section search over the one free parameter.
/// * `K = 2`, any `N`: bisection on the scalar dual of the row constraint.
/// * `K·N ≤ 16`: explicit scaling vectors `u, v` iterated to a marginal
///   residual below `1e-12` (at least `10⁴` sweeps).
pub fn oracle_labels(p: &Mat, xi: f64, lambda: f64) -> Result<PseudoLabelMatrix> {
    check_solver_args(p, lambda, 1)?;
    let (k, n) = (p.rows() - 1, p.cols());
    check_xi(xi, k)?;
    let p_hat = negative_block(p);
    let plan = match (k, n) {
        (1, _) => Mat::filled(1, n, 1.0 / n as f64),
        (2, 2) => polytope_golden_section(&p_hat, lambda),
        (2, _) => two_row_dual_bisection(&p_hat, lambda),
        _ if k * n <= 16 => scaling_vectors(&p_hat, lambda)?,
        _ => {
            return Err(Error::OracleScale {
                negatives: k,
                columns: n,
            })
        }
    };
    assemble(&plan, xi, lambda, 0)
}

/// `K = N = 2`: `Ŷ = [[t, ½−t], [½−t, t]]`, `t ∈ [0, ½]`.
fn polytope_golden_section(p_hat: &Mat, lambda: f64) -> Mat {
    let plan = |t: f64| Mat::from_vec(2, 2, vec![t, 0.5 - t, 0.5 - t, t]).expect("2x2");
    let objective = |t: f64| transport_objective(&plan(t), p_hat, lambda).expect("2x2");
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, 0.5);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    while b - a > 1e-15 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    plan((a + b) / 2.0)
}

/// `K = 2`: stationarity gives `ŷ₁ₙ = σ(λ(log p̂₁ₙ − log p̂₂ₙ) − s)/N` for a
/// single shift `s` fixed by `Σₙ ŷ₁ₙ = ½`.
fn two_row_dual_bisection(p_hat: &Mat, lambda: f64) -> Mat {
    let n = p_hat.cols();
    let inv_n = 1.0 / n as f64;
    let gaps: Vec<f64> = (0..n)
        .map(|c| lambda * (p_hat[(0, c)].ln() - p_hat[(1, c)].ln()))
        .collect();
    let sigmoid = |x: f64| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    let row_mass = |s: f64| gaps.iter().map(|g| sigmoid(g - s)).sum::<f64>() * inv_n;
    let spread = gaps.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let (mut lo, mut hi) = (-spread - 50.0, spread + 50.0);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if row_mass(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    let s = 0.5 * (lo + hi);
    Mat::from_fn(2, n, |r, c| {
        let top = sigmoid(gaps[c] - s) * inv_n;
        if r == 0 {
            top
        } else {
            sigmoid(s - gaps[c]) * inv_n
        }
    })
}

/// Matrix scaling with explicit vectors: `Ŷ = diag(u) G diag(v)` where
/// `G = P̂^λ`, alternating `u = r ⊘ (Gv)` and `v = c ⊘ (Gᵀu)`.
fn scaling_vectors(p_hat: &Mat, lambda: f64) -> Result<Mat> {
    let (k, n) = p_hat.shape();
    // rescale before exponentiation so tiny kernels stay representable
    let max = p_hat.as_slice().iter().fold(0.0f64, |m, &v| m.max(v));
    let g = p_hat.map(|v| (v / max).powf(lambda));
    let (r, c) = (1.0 / k as f64, 1.0 / n as f64);
    let mut u = vec![1.0; k];
    let mut v = vec![1.0; n];
    let plan = |u: &[f64], v: &[f64]| Mat::from_fn(k, n, |i, j| u[i] * g[(i, j)] * v[j]);
    for iter in 0..ORACLE_MAX_ITERS {
        for (i, ui) in u.iter_mut().enumerate() {
            let gv: f64 = (0..n).map(|j| g[(i, j)] * v[j]).sum();
            *ui = r / gv;
        }
        for (j, vj) in v.iter_mut().enumerate() {
            let gu: f64 = (0..k).map(|i| g[(i, j)] * u[i]).sum();
            *vj = c / gu;
        }
        if iter + 1 >= ORACLE_MIN_ITERS {
            let y = plan(&u, &v);
            let row_res = y
                .row_sums()
                .iter()
                .fold(0.0f64, |m, s| m.max((s - r).abs()));
            let col_res = y
                .col_sums()
                .iter()
                .fold(0.0f64, |m, s| m.max((s - c).abs()));
            if row_res < ORACLE_RESIDUAL && col_res < ORACLE_RESIDUAL {
                return Ok(y);
            }
        }
    }
    Err(Error::param(
        "oracle",
        format!("scaling did not reach residual {ORACLE_RESIDUAL} in {ORACLE_MAX_ITERS} sweeps"),
    ))
}
