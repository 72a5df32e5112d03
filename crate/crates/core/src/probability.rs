//! Temperature-scaled similarity probabilities over the `K+1` peers of each
//! query: the paired momentum key in row 0, the memory bank in rows `1..=K`.

use crate::error::{Error, Result};
use crate::matrix::{dot, Mat};

/// Columns whose norm deviates from one by more than this are rejected.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Column-stochastic `(K+1) × N` matrix of peer probabilities, together with
/// the temperature-scaled logits it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    p: Mat,
    logits: Option<Mat>,
    temperature: f64,
}

impl ProbMatrix {
    /// Wraps an externally supplied probability matrix (for example one read
    /// from disk). Columns must sum to one within `1e-10` and every entry must
    /// be strictly positive.
    pub fn from_probabilities(p: Mat) -> Result<Self> {
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
            for (c, &v) in p.row(r).iter().enumerate() {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::LogDomain {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
        }
        for (c, s) in p.col_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::param(
                    "probability matrix",
                    format!("column {c} sums to {s}, not 1"),
                ));
            }
        }
        Ok(Self {
            p,
            logits: None,
            temperature: f64::NAN,
        })
    }

    pub fn p(&self) -> &Mat {
        &self.p
    }

    /// Logits `S(q, m)/τ` when the matrix was built by [`get_prob`].
    pub fn logits(&self) -> Option<&Mat> {
        self.logits.as_ref()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Number of negative peers `K`.
    pub fn negatives(&self) -> usize {
        self.p.rows() - 1
    }

    /// Batch width `N`.
    pub fn batch(&self) -> usize {
        self.p.cols()
    }

    pub fn into_inner(self) -> Mat {
        self.p
    }
}

pub(crate) fn check_unit_columns(m: &Mat) -> Result<()> {
    for (column, n) in m.col_norms().into_iter().enumerate() {
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Unnormalized { column, norm: n });
        }
    }
    Ok(())
}

/// Logit matrix `[qₙᵀkₙ ; bankᵀqₙ] / τ`, shape `(K+1) × N`.
pub fn peer_logits(queries: &Mat, current_keys: &Mat, bank: &Mat, temperature: f64) -> Result<Mat> {
    if !(temperature > 0.0) {
        return Err(Error::param(
            "temperature",
            format!("must be > 0, got {temperature}"),
        ));
    }
    if queries.shape() != current_keys.shape() {
        return Err(Error::shape(
            format!("keys {}x{}", queries.rows(), queries.cols()),
            format!("{}x{}", current_keys.rows(), current_keys.cols()),
        ));
    }
    if bank.rows() != queries.rows() {
        return Err(Error::shape(
            format!("bank with {} rows", queries.rows()),
            format!("{} rows", bank.rows()),
        ));
    }
    if queries.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    check_unit_columns(queries)?;
    check_unit_columns(current_keys)?;
    check_unit_columns(bank)?;

    let n = queries.cols();
    let negatives = bank.t_matmul(queries)?;
    let positives = queries.hadamard(current_keys)?.col_sums();
    let mut logits = Mat::zeros(bank.cols() + 1, n);
    for (c, s) in positives.into_iter().enumerate() {
        logits[(0, c)] = s / temperature;
    }
    for k in 0..bank.cols() {
        for c in 0..n {
            logits[(k + 1, c)] = negatives[(k, c)] / temperature;
        }
    }
    Ok(logits)
}

/// Peer probabilities for a batch of queries. Keys and bank are consumed as
/// constants; only the query side carries gradient.
pub fn get_prob(
    queries: &Mat,
    current_keys: &Mat,
    bank: &Mat,
    temperature: f64,
) -> Result<ProbMatrix> {
    let logits = peer_logits(queries, current_keys, bank, temperature)?;
    let p = logits.softmax_columns()?;
    Ok(ProbMatrix {
        p,
        logits: Some(logits),
        temperature,
    })
}

/// Chain rule from logit gradients back to the queries:
/// `∂L/∂qₙ = (gₒₙ kₙ + Σₖ gₖₙ bankₖ) / τ`.
pub fn query_gradient(
    grad_logits: &Mat,
    current_keys: &Mat,
    bank: &Mat,
    temperature: f64,
) -> Result<Mat> {
    let (d, n) = current_keys.shape();
    if grad_logits.shape() != (bank.cols() + 1, n) || bank.rows() != d {
        return Err(Error::shape(
            format!("grad {}x{n} with bank {d}x{}", bank.cols() + 1, bank.cols()),
            format!(
                "grad {}x{} with bank {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                bank.rows(),
                bank.cols()
            ),
        ));
    }
    let neg = grad_logits.row_range(1, grad_logits.rows());
    let mut grad = bank.matmul(&neg)?;
    let inv_tau = 1.0 / temperature;
    for r in 0..d {
        for c in 0..n {
            grad[(r, c)] = (grad[(r, c)] + grad_logits[(0, c)] * current_keys[(r, c)]) * inv_tau;
        }
    }
    Ok(grad)
}

/// Similarity of one query to each peer column (used for diagnostics).
pub fn peer_similarities(query: &[f64], peers: &Mat) -> Vec<f64> {
    (0..peers.cols())
        .map(|k| dot(query, &peers.col(k)))
        .collect()
}
