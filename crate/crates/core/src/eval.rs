//! Frozen-feature evaluation: cosine k-nearest-neighbor vote and a softmax
//! linear probe.

use serde::Serialize;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::matrix::{dot, Mat};
use crate::probability::check_unit_columns;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub knn_accuracy: Option<f64>,
    pub linear_accuracy: Option<f64>,
    pub k: usize,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Training loss before each step, plus the final loss.
    pub loss_history: Vec<f64>,
}

fn check_split(name: &'static str, feats: &Mat, labels: &[usize]) -> Result<()> {
    if feats.cols() == 0 {
        return Err(Error::param(name, "empty split"));
    }
    if feats.cols() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", feats.cols()),
            format!("{}", labels.len()),
        ));
    }
    Ok(())
}

/// Class votes of the `k` most similar training columns. Similarity ties go
/// to the lower training index; vote ties go to the smaller class id.
pub fn knn_predict(train: &Mat, train_labels: &[usize], query: &[f64], k: usize) -> usize {
    let mut order: Vec<(f64, usize)> = (0..train.cols())
        .map(|j| (dot(query, &train.col(j)), j))
        .collect();
    let k = k.min(order.len());
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let classes = train_labels.iter().max().map_or(0, |&c| c + 1);
    let mut votes = vec![0usize; classes];
    for &(_, j) in &order[..k] {
        votes[train_labels[j]] += 1;
    }
    let best = *votes.iter().max().expect("at least one class");
    votes
        .iter()
        .position(|&v| v == best)
        .expect("max is present")
}

/// Fraction of test columns whose k-NN majority vote matches the label.
/// Features must be unit-norm columns.
pub fn knn_eval(
    train_feats: &Mat,
    train_labels: &[usize],
    test_feats: &Mat,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("k", "must be positive"));
    }
    check_split("train", train_feats, train_labels)?;
    check_split("test", test_feats, test_labels)?;
    if k > train_feats.cols() {
        return Err(Error::param(
            "k",
            format!("{k} exceeds the {} training points", train_feats.cols()),
        ));
    }
    if train_feats.rows() != test_feats.rows() {
        return Err(Error::shape(
            format!("{} feature rows", train_feats.rows()),
            format!("{}", test_feats.rows()),
        ));
    }
    check_unit_columns(train_feats)?;
    check_unit_columns(test_feats)?;
    let correct = (0..test_feats.cols())
        .filter(|&i| {
            knn_predict(train_feats, train_labels, &test_feats.col(i), k) == test_labels[i]
        })
        .count();
    Ok(correct as f64 / test_feats.cols() as f64)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// `W·x + b` for every column, as `classes × M`.
fn logits(w: &Mat, b: &[f64], x: &Mat) -> Result<Mat> {
    let mut z = w.matmul(x)?;
    for (r, &bias) in b.iter().enumerate() {
        z.row_mut(r).iter_mut().for_each(|v| *v += bias);
    }
    Ok(z)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(w: &Mat, b: &[f64], x: &Mat, labels: &[usize]) -> Result<f64> {
    let z = logits(w, b, x)?;
    let correct = (0..x.cols())
        .filter(|&i| argmax(&z.col(i)) == labels[i])
        .count();
    Ok(correct as f64 / x.cols() as f64)
}

/// Multinomial logistic regression on frozen features, trained by full-batch
/// gradient descent from a zero initialization.
pub fn linear_probe(
    train_feats: &Mat,
    train_labels: &[usize],
    test_feats: &Mat,
    test_labels: &[usize],
    steps: usize,
    lr: f64,
) -> Result<ProbeResult> {
    check_split("train", train_feats, train_labels)?;
    check_split("test", test_feats, test_labels)?;
    if train_feats.rows() != test_feats.rows() {
        return Err(Error::shape(
            format!("{} feature rows", train_feats.rows()),
            format!("{}", test_feats.rows()),
        ));
    }
    if !(lr > 0.0) {
        return Err(Error::param("lr", format!("must be > 0, got {lr}")));
    }
    let first = train_labels[0];
    if train_labels.iter().all(|&c| c == first) {
        return Err(Error::param(
            "labels",
            "linear probe needs at least two classes",
        ));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&c| c + 1);
    let (d, m) = train_feats.shape();
    let mut w = Mat::zeros(classes, d);
    let mut b = vec![0.0; classes];
    let inv_m = 1.0 / m as f64;
    let mut loss_history = Vec::with_capacity(steps + 1);

    for step in 0..=steps {
        // probabilities, then `P − onehot` in place
        let mut residual = logits(&w, &b, train_feats)?;
        let mut loss = 0.0;
        for c in 0..m {
            let mut col = residual.col(c);
            softmax_in_place(&mut col);
            loss -= col[train_labels[c]].max(f64::MIN_POSITIVE).ln();
            col[train_labels[c]] -= 1.0;
            residual.set_col(c, &col);
        }
        loss_history.push(loss * inv_m);
        if step == steps {
            break;
        }
        let gw = residual.matmul_t(train_feats)?;
        let gb = residual.row_sums();
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *wv -= lr * gv * inv_m;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= lr * gv * inv_m;
        }
    }
    if !w.is_finite() {
        return Err(Error::Divergence {
            step: steps as u64,
            detail: format!("linear probe diverged at lr={lr}"),
        });
    }
    Ok(ProbeResult {
        accuracy: accuracy(&w, &b, test_feats, test_labels)?,
        train_accuracy: accuracy(&w, &b, train_feats, train_labels)?,
        loss_history,
    })
}

/// Features used for evaluation: the encoder output, or the input of its last
/// linear layer rescaled to unit norm when `penultimate` is set.
pub fn embed(params: &EncoderParams, samples: &Mat, penultimate: bool) -> Result<Mat> {
    let (out, tape) = params.forward(samples)?;
    if !penultimate {
        return Ok(out);
    }
    tape.penultimate()
        .l2_normalize_columns()
        .map_err(|e| match e {
            Error::ZeroNorm { column } => Error::DegenerateEmbedding { column },
            other => other,
        })
}
