//! Swapped-label cross-entropy with cross-similarity regularization.
//!
//! ```text
//! L = CE(Yˢ → Pᵗ) + CE(Yᵗ → Pˢ) + CE(sg(Pˢ) → Pᵗ) + CE(sg(Pᵗ) → Pˢ)
//! ```
//!
//! `CE(T → P) = −(1/N) Σₙ Σₖ Tₖₙ log Pₖₙ` and `sg` is stop-gradient. All
//! gradients are with respect to the temperature-scaled logits that produced
//! `Pˢ` and `Pᵗ`; since every target column sums to one the softmax
//! cross-entropy gradient collapses to `(P − T)/N`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Mat;

/// Allowed deviation of a target column sum from one.
pub const LABEL_SUM_TOL: f64 = 1e-6;

/// Ablation switches of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LossSwitches {
    /// Sinkhorn pseudo-labels when on, one-hot targets when off.
    pub uniform_labels: bool,
    /// Keep the two cross-similarity terms.
    pub xsim_reg: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            uniform_labels: true,
            xsim_reg: true,
        }
    }
}

impl LossSwitches {
    /// The 2×2 grid, full configuration first.
    pub fn grid() -> [LossSwitches; 4] {
        [
            LossSwitches {
                uniform_labels: true,
                xsim_reg: true,
            },
            LossSwitches {
                uniform_labels: true,
                xsim_reg: false,
            },
            LossSwitches {
                uniform_labels: false,
                xsim_reg: true,
            },
            LossSwitches {
                uniform_labels: false,
                xsim_reg: false,
            },
        ]
    }

    pub fn label(&self) -> &'static str {
        match (self.uniform_labels, self.xsim_reg) {
            (true, true) => "uniform+xsim",
            (true, false) => "uniform",
            (false, true) => "xsim",
            (false, false) => "one-hot",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub term_label_s_on_pt: f64,
    pub term_label_t_on_ps: f64,
    pub term_xsim_s_on_pt: f64,
    pub term_xsim_t_on_ps: f64,
    pub grad_logits_s: Mat,
    pub grad_logits_t: Mat,
}

fn check_shapes(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    if a.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok(())
}

fn check_positive(pred: &Mat) -> Result<()> {
    for r in 0..pred.rows() {
        for (col, &value) in pred.row(r).iter().enumerate() {
            if !(value > 0.0) {
                return Err(Error::LogDomain { row: r, col, value });
            }
        }
    }
    Ok(())
}

fn check_label_columns(name: &'static str, y: &Mat) -> Result<()> {
    for (c, s) in y.col_sums().into_iter().enumerate() {
        if !((s - 1.0).abs() <= LABEL_SUM_TOL) {
            return Err(Error::param(name, format!("column {c} sums to {s}")));
        }
    }
    Ok(())
}

/// `−(1/N) Σₙ Σₖ targetₖₙ log predₖₙ`; the target is a constant. Terms with
/// a zero target contribute nothing, so `pred` may vanish exactly there.
pub fn cross_entropy_term(target: &Mat, pred: &Mat) -> Result<f64> {
    check_shapes(target, pred)?;
    let n = pred.cols() as f64;
    let cols = pred.cols();
    let mut acc = 0.0;
    for (i, (&t, &p)) in target.as_slice().iter().zip(pred.as_slice()).enumerate() {
        if p < 0.0 || (t != 0.0 && !(p > 0.0)) {
            return Err(Error::LogDomain {
                row: i / cols,
                col: i % cols,
                value: p,
            });
        }
        if t != 0.0 {
            acc += t * p.ln();
        }
    }
    Ok(-acc / n)
}

/// Symmetric one-hot contrastive loss `−(1/N) Σₙ [log Pˢ₀ₙ + log Pᵗ₀ₙ]`.
pub fn classical_loss(ps: &Mat, pt: &Mat) -> Result<f64> {
    check_shapes(ps, pt)?;
    check_positive(ps)?;
    check_positive(pt)?;
    let n = ps.cols() as f64;
    let acc: f64 = ps
        .row(0)
        .iter()
        .zip(pt.row(0))
        .map(|(a, b)| a.ln() + b.ln())
        .sum();
    Ok(-acc / n)
}

/// Gradients of [`classical_loss`] with respect to both logit matrices,
/// computed directly from `P` without materializing label matrices.
pub fn classical_gradients(ps: &Mat, pt: &Mat) -> Result<(Mat, Mat)> {
    check_shapes(ps, pt)?;
    let inv_n = 1.0 / ps.cols() as f64;
    let grad = |p: &Mat| {
        Mat::from_fn(p.rows(), p.cols(), |r, c| {
            let target = if r == 0 { 1.0 } else { 0.0 };
            (p[(r, c)] - target) * inv_n
        })
    };
    Ok((grad(ps), grad(pt)))
}

/// The full objective with both regularization terms.
pub fn xmoco_loss(ps: &Mat, pt: &Mat, ys: &Mat, yt: &Mat) -> Result<LossReport> {
    xmoco_loss_with(ps, pt, ys, yt, true)
}

/// The objective with the cross-similarity terms optionally dropped.
/// `ys` supervises `pt` and `yt` supervises `ps`.
pub fn xmoco_loss_with(
    ps: &Mat,
    pt: &Mat,
    ys: &Mat,
    yt: &Mat,
    xsim_reg: bool,
) -> Result<LossReport> {
    check_shapes(ps, pt)?;
    check_shapes(ps, ys)?;
    check_shapes(ps, yt)?;
    check_label_columns("ys", ys)?;
    check_label_columns("yt", yt)?;

    let term_label_s_on_pt = cross_entropy_term(ys, pt)?;
    let term_label_t_on_ps = cross_entropy_term(yt, ps)?;
    let (term_xsim_s_on_pt, term_xsim_t_on_ps) = if xsim_reg {
        (cross_entropy_term(ps, pt)?, cross_entropy_term(pt, ps)?)
    } else {
        (0.0, 0.0)
    };

    let inv_n = 1.0 / ps.cols() as f64;
    let grad = |own: &Mat, label: &Mat, other: &Mat| {
        Mat::from_fn(own.rows(), own.cols(), |r, c| {
            let p = own[(r, c)];
            let mut g = p - label[(r, c)];
            if xsim_reg {
                g += p - other[(r, c)];
            }
            g * inv_n
        })
    };

    Ok(LossReport {
        total: term_label_s_on_pt + term_label_t_on_ps + term_xsim_s_on_pt + term_xsim_t_on_ps,
        term_label_s_on_pt,
        term_label_t_on_ps,
        term_xsim_s_on_pt,
        term_xsim_t_on_ps,
        grad_logits_s: grad(ps, yt, pt),
        grad_logits_t: grad(pt, ys, ps),
    })
}

/// The regularization part of the logit gradients alone:
/// `((Pˢ − Pᵗ)/N, (Pᵗ − Pˢ)/N)`.
pub fn xsim_gradients(ps: &Mat, pt: &Mat) -> Result<(Mat, Mat)> {
    check_shapes(ps, pt)?;
    let inv_n = 1.0 / ps.cols() as f64;
    Ok((ps.sub(pt)?.scale(inv_n), pt.sub(ps)?.scale(inv_n)))
}
