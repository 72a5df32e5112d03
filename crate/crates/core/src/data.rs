//! Synthetic datasets, the vector transformation family used to produce two
//! views of a sample, epoch batching and delimited-text ingestion.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::sampling::{gaussian_mat, random_orthogonal, stream_rng};

/// Samples are the columns of `samples` (`d_in × M`). Labels are carried for
/// evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Mat,
    pub labels: Vec<usize>,
    pub name: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        samples: Mat,
        labels: Vec<usize>,
        name: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != samples.cols() {
            return Err(Error::shape(
                format!("{} labels", samples.cols()),
                format!("{}", labels.len()),
            ));
        }
        Ok(Self {
            samples,
            labels,
            name: name.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.cols() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset {
        Dataset {
            samples: self.samples.select_cols(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: name.to_string(),
            seed: self.seed,
        }
    }

    /// Seeded shuffle split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::param(
                "test_fraction",
                format!("must lie in [0, 1), got {test_fraction}"),
            ));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = order.split_at(n_test);
        Ok((
            self.subset(train, &format!("{}-train", self.name)),
            self.subset(test, &format!("{}-test", self.name)),
        ))
    }

    /// Empirical per-class means, `d_in × C`.
    pub fn class_centroids(&self) -> Mat {
        let classes = self.num_classes();
        let mut sums = Mat::zeros(self.dim(), classes);
        let mut counts = vec![0usize; classes];
        for (j, &label) in self.labels.iter().enumerate() {
            counts[label] += 1;
            for r in 0..self.dim() {
                sums[(r, label)] += self.samples[(r, j)];
            }
        }
        Mat::from_fn(self.dim(), classes, |r, c| {
            if counts[c] == 0 {
                f64::INFINITY
            } else {
                sums[(r, c)] / counts[c] as f64
            }
        })
    }
}

const SPLIT_STREAM: u64 = 0x5;

/// Index of the closest centroid column in Euclidean distance.
pub fn nearest_centroid(x: &[f64], centroids: &Mat) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for c in 0..centroids.cols() {
        let d: f64 = x
            .iter()
            .enumerate()
            .map(|(r, v)| (v - centroids[(r, c)]).powi(2))
            .sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Isotropic unit-variance Gaussian clusters. For `classes ≤ d_in` the
/// centroids sit on a randomly rotated scaled simplex corner set, so every
/// pair is exactly `separation` standard deviations apart; otherwise they are
/// rejection-sampled until every pair is at least that far apart.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    d_in: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || d_in == 0 {
        return Err(Error::param(
            "blobs",
            format!("degenerate dims: classes={classes} per_class={per_class} d_in={d_in}"),
        ));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::param(
            "separation",
            format!("must be > 0, got {separation}"),
        ));
    }
    let mut rng = stream_rng(seed, 0);
    let centroids = if classes <= d_in {
        let rot = random_orthogonal(&mut rng, d_in);
        let scale = separation / std::f64::consts::SQRT_2;
        rot.col_range(0, classes).scale(scale)
    } else {
        let mut attempt = 0;
        loop {
            let spread = separation * (classes as f64).sqrt();
            let c = gaussian_mat(&mut rng, d_in, classes).scale(spread);
            let ok = (0..classes).all(|a| {
                (a + 1..classes).all(|b| {
                    let d: f64 = (0..d_in).map(|r| (c[(r, a)] - c[(r, b)]).powi(2)).sum();
                    d.sqrt() >= separation
                })
            });
            if ok {
                break c;
            }
            attempt += 1;
            if attempt > 10_000 {
                return Err(Error::param("blobs", "could not place separated centroids"));
            }
        }
    };
    let m = classes * per_class;
    let mut samples = Mat::zeros(d_in, m);
    let mut labels = Vec::with_capacity(m);
    for class in 0..classes {
        for i in 0..per_class {
            let j = class * per_class + i;
            for r in 0..d_in {
                let noise: f64 = rng.sample(StandardNormal);
                samples[(r, j)] = centroids[(r, class)] + noise;
            }
            labels.push(class);
        }
    }
    Dataset::new(
        samples,
        labels,
        format!("blobs-{classes}x{per_class}-d{d_in}-s{separation}"),
        seed,
    )
}

/// Parameters of the random view transformation. Applied in order: scale,
/// additive noise, coordinate masking, pairwise sign flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransformSpec {
    pub noise_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Fraction of coordinates zeroed per view (rounded to a count).
    pub mask_fraction: f64,
    /// Probability of negating each coordinate pair `(2i, 2i+1)`.
    pub flip_prob: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.2,
            scale_min: 0.9,
            scale_max: 1.1,
            mask_fraction: 0.0625,
            flip_prob: 0.0,
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            mask_fraction: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param(
                "noise_sigma",
                format!("must be >= 0, got {}", self.noise_sigma),
            ));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite())
        {
            return Err(Error::param(
                "scale_range",
                format!(
                    "need 0 < min <= max, got [{}, {}]",
                    self.scale_min, self.scale_max
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::param(
                "mask_fraction",
                format!("must lie in [0, 1), got {}", self.mask_fraction),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::param(
                "flip_prob",
                format!("must lie in [0, 1], got {}", self.flip_prob),
            ));
        }
        Ok(())
    }

    pub fn masked_count(&self, d: usize) -> usize {
        (self.mask_fraction * d as f64).round() as usize
    }

    /// One random view of `x`.
    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let mut v: Vec<f64> = x.iter().map(|&a| a * scale).collect();
        if self.noise_sigma > 0.0 {
            for a in v.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *a += self.noise_sigma * z;
            }
        }
        let masked = self.masked_count(v.len());
        if masked > 0 {
            for i in rand::seq::index::sample(rng, v.len(), masked) {
                v[i] = 0.0;
            }
        }
        if self.flip_prob > 0.0 {
            for pair in v.chunks_exact_mut(2) {
                if rng.random_bool(self.flip_prob) {
                    pair[0] = -pair[0];
                    pair[1] = -pair[1];
                }
            }
        }
        v
    }
}

/// Two independently transformed views of the same sample.
pub fn two_views<R: Rng + ?Sized>(
    sample: &[f64],
    spec: &TransformSpec,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let s = spec.apply(sample, rng);
    let t = spec.apply(sample, rng);
    (s, t)
}

/// Views of every column of `batch`, as two `d_in × N` matrices.
pub fn batch_views<R: Rng + ?Sized>(batch: &Mat, spec: &TransformSpec, rng: &mut R) -> (Mat, Mat) {
    let (d, n) = batch.shape();
    let mut xs = Mat::zeros(d, n);
    let mut xt = Mat::zeros(d, n);
    for c in 0..n {
        let (s, t) = two_views(&batch.col(c), spec, rng);
        xs.set_col(c, &s);
        xt.set_col(c, &t);
    }
    (xs, xt)
}

/// Fraction of samples whose nearest class centroid is unchanged in both
/// views, over `draws` transformed copies.
pub fn preservation_rate<R: Rng + ?Sized>(
    ds: &Dataset,
    spec: &TransformSpec,
    draws: usize,
    rng: &mut R,
) -> f64 {
    let centroids = ds.class_centroids();
    let mut kept = 0usize;
    for i in 0..draws {
        let j = i % ds.len();
        let x = ds.samples.col(j);
        let home = nearest_centroid(&x, &centroids);
        let (s, t) = two_views(&x, spec, rng);
        if nearest_centroid(&s, &centroids) == home && nearest_centroid(&t, &centroids) == home {
            kept += 1;
        }
    }
    kept as f64 / draws as f64
}

/// A without-replacement permutation cut into `⌊M/N⌋` full batches.
pub fn epoch_batches<R: Rng + ?Sized>(
    m: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be positive"));
    }
    if batch_size > m {
        return Err(Error::param(
            "batch_size",
            format!("batch of {batch_size} exceeds dataset of {m}"),
        ));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Per-coordinate zero mean / unit variance (population variance). Constant
/// coordinates are centered only.
pub fn standardize(samples: &Mat) -> Mat {
    let (d, m) = samples.shape();
    let mut out = samples.clone();
    for r in 0..d {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / m as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / m as f64;
        if var > 0.0 {
            let sd = var.sqrt();
            row.iter_mut().for_each(|v| *v /= sd);
        }
    }
    out
}

/// Reads a comma-separated table, one sample per row, `#` comment lines
/// allowed. With `has_labels` the last field is an integer class id.
/// Features are standardized per coordinate.
pub fn load_delimited(path: &Path, has_labels: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let fields: Vec<&str> = record.iter().collect();
        let feature_count = if has_labels {
            fields.len().saturating_sub(1)
        } else {
            fields.len()
        };
        if feature_count == 0 {
            return Err(Error::Format {
                what: "delimited data",
                reason: format!("line {line}: no feature columns"),
            });
        }
        let row = fields[..feature_count]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format {
                        what: "delimited data",
                        reason: format!("line {line}: non-numeric cell {s:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format {
                    what: "delimited data",
                    reason: format!(
                        "line {line}: ragged row of {} fields, expected {}",
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
        if has_labels {
            let raw = fields[feature_count];
            let label = raw.parse::<usize>().map_err(|_| Error::Format {
                what: "delimited data",
                reason: format!("line {line}: label {raw:?} is not a non-negative integer"),
            })?;
            labels.push(label);
        }
    }
    if rows.is_empty() {
        return Err(Error::Format {
            what: "delimited data",
            reason: format!("{}: no rows", path.display()),
        });
    }
    if !has_labels {
        labels = vec![0; rows.len()];
    }
    let samples = Mat::from_rows(&rows)?.transpose();
    let name = path.file_stem().map_or_else(
        || "delimited".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    Dataset::new(standardize(&samples), labels, name, 0)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => Error::Format {
            what: "delimited data",
            reason: format!(
                "line {}: ragged row of {len} fields, expected {expected_len}",
                pos.as_ref().map_or(0, |p| p.line())
            ),
        },
        _ => Error::Format {
            what: "delimited data",
            reason: format!("{}: {e}", path.display()),
        },
    }
}

/// Writes one sample per row with the label as the last field. Header lines
/// are emitted as `#` comments.
pub fn write_delimited(path: &Path, ds: &Dataset, header: &[String]) -> Result<()> {
    let mut out = Vec::new();
    for line in header {
        writeln!(out, "# {line}")?;
    }
    for j in 0..ds.len() {
        let mut first = true;
        for r in 0..ds.dim() {
            if !first {
                out.push(b',');
            }
            first = false;
            write!(out, "{}", ds.samples[(r, j)])?;
        }
        writeln!(out, ",{}", ds.labels[j])?;
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}
