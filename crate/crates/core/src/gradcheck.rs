//! Central finite-difference verification of the analytic gradients, both at
//! the logits and end to end through the encoder.
//!
//! Targets that the objective treats as constants (pseudo-labels and the
//! stop-gradient probability targets) are frozen at their base-point values
//! while differencing, so the numeric and analytic sides differentiate the
//! same function.

use rand::Rng;
use serde::Serialize;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_term, xmoco_loss_with, LossReport};
use crate::matrix::Mat;
use crate::probability::{get_prob, query_gradient};
use crate::pseudolabel::{one_hot_labels, sinkhorn_labels};
use crate::sampling::{gaussian_mat, random_unit_columns, stream_rng};

pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-8;

/// Loss and logit gradients given `(ps, pt, ys, yt, xsim_reg)`.
pub type LossFn = fn(&Mat, &Mat, &Mat, &Mat, bool) -> Result<LossReport>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: String,
    pub negatives: usize,
    pub batch: usize,
    pub coordinates: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random instances per suite.
    pub instances: usize,
    pub tolerance: f64,
    pub loss_fn: LossFn,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            tolerance: TOLERANCE,
            loss_fn: xmoco_loss_with,
        }
    }
}

/// Shape and hyperparameters of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub tau: f64,
    pub xi: f64,
    pub lambda: f64,
    pub uniform_labels: bool,
    pub xsim_reg: bool,
}

impl CaseSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let k = rng.random_range(1..=6);
        let hidden = (0..rng.random_range(0..=2))
            .map(|_| rng.random_range(2..=6))
            .collect();
        let lo = 1.0 / (k as f64 + 1.0);
        Self {
            d_in: rng.random_range(2..=5),
            hidden,
            d: rng.random_range(2..=4),
            n: rng.random_range(1..=4),
            k,
            tau: rng.random_range(0.1..1.0),
            xi: rng.random_range(lo..=1.0),
            lambda: rng.random_range(0.5..3.0),
            uniform_labels: rng.random_bool(0.8),
            xsim_reg: rng.random_bool(0.8),
        }
    }

    fn label(&self) -> String {
        format!(
            "d_in={} hidden={:?} d={} N={} K={} tau={:.3} xi={:.3} uniform={} xsim={}",
            self.d_in,
            self.hidden,
            self.d,
            self.n,
            self.k,
            self.tau,
            self.xi,
            self.uniform_labels,
            self.xsim_reg
        )
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(REL_FLOOR)
}

/// The objective with every target frozen.
struct Frozen {
    ys: Mat,
    yt: Mat,
    ps0: Mat,
    pt0: Mat,
    xsim_reg: bool,
}

impl Frozen {
    fn new(ps: &Mat, pt: &Mat, spec: &CaseSpec) -> Result<Self> {
        let (ys, yt) = if spec.uniform_labels {
            (
                sinkhorn_labels(ps, spec.xi, spec.lambda, 3)?.into_inner(),
                sinkhorn_labels(pt, spec.xi, spec.lambda, 3)?.into_inner(),
            )
        } else {
            let one = one_hot_labels(ps.rows(), ps.cols()).into_inner();
            (one.clone(), one)
        };
        Ok(Self {
            ys,
            yt,
            ps0: ps.clone(),
            pt0: pt.clone(),
            xsim_reg: spec.xsim_reg,
        })
    }

    fn value(&self, ps: &Mat, pt: &Mat) -> Result<f64> {
        let mut total = cross_entropy_term(&self.ys, pt)? + cross_entropy_term(&self.yt, ps)?;
        if self.xsim_reg {
            total += cross_entropy_term(&self.ps0, pt)? + cross_entropy_term(&self.pt0, ps)?;
        }
        Ok(total)
    }
}

/// Gradient with respect to the logits feeding `softmax`.
pub fn logit_case(spec: &CaseSpec, seed: u64, loss_fn: LossFn) -> Result<CaseResult> {
    let mut rng = stream_rng(seed, 0);
    let zs = gaussian_mat(&mut rng, spec.k + 1, spec.n).scale(2.0);
    let zt = gaussian_mat(&mut rng, spec.k + 1, spec.n).scale(2.0);
    let ps = zs.softmax_columns()?;
    let pt = zt.softmax_columns()?;
    let frozen = Frozen::new(&ps, &pt, spec)?;
    let report = loss_fn(&ps, &pt, &frozen.ys, &frozen.yt, spec.xsim_reg)?;

    let mut analytic = report.grad_logits_s.as_slice().to_vec();
    analytic.extend_from_slice(report.grad_logits_t.as_slice());
    let mut numeric = Vec::with_capacity(analytic.len());
    for side in 0..2 {
        let base = if side == 0 { &zs } else { &zt };
        for i in 0..base.as_slice().len() {
            let eval = |h: f64| -> Result<f64> {
                let mut z = base.clone();
                z.as_mut_slice()[i] += h;
                let p = z.softmax_columns()?;
                if side == 0 {
                    frozen.value(&p, &pt)
                } else {
                    frozen.value(&ps, &p)
                }
            };
            numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
        }
    }
    Ok(CaseResult {
        suite: "loss",
        name: spec.label(),
        negatives: spec.k,
        batch: spec.n,
        coordinates: analytic.len(),
        rel_error: rel_error(&analytic, &numeric),
    })
}

struct Pipeline {
    xs: Mat,
    xt: Mat,
    ks: Mat,
    kt: Mat,
    bank_s: Mat,
    bank_t: Mat,
    tau: f64,
}

impl Pipeline {
    fn probs(&self, f: &EncoderParams) -> Result<(Mat, Mat)> {
        let qs = f.encode(&self.xs)?;
        let qt = f.encode(&self.xt)?;
        let ps = get_prob(&qs, &self.kt, &self.bank_t, self.tau)?.into_inner();
        let pt = get_prob(&qt, &self.ks, &self.bank_s, self.tau)?.into_inner();
        Ok((ps, pt))
    }
}

/// Gradient with respect to every parameter of the query encoder, through
/// the MLP, normalization, temperature and softmax.
pub fn encoder_case(spec: &CaseSpec, seed: u64, loss_fn: LossFn) -> Result<CaseResult> {
    let mut rng = stream_rng(seed, 0);
    let mut dims = vec![spec.d_in];
    dims.extend(&spec.hidden);
    dims.push(spec.d);
    let mut f = EncoderParams::init(&dims, &mut rng)?;
    // non-zero biases so their gradients are exercised away from the origin
    for t in f.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let g = EncoderParams::init(&dims, &mut rng)?;
    let xs = gaussian_mat(&mut rng, spec.d_in, spec.n);
    let xt = gaussian_mat(&mut rng, spec.d_in, spec.n);
    let pipe = Pipeline {
        ks: g.encode(&xs)?,
        kt: g.encode(&xt)?,
        xs,
        xt,
        bank_s: random_unit_columns(&mut rng, spec.d, spec.k),
        bank_t: random_unit_columns(&mut rng, spec.d, spec.k),
        tau: spec.tau,
    };

    let (qs, tape_s) = f.forward(&pipe.xs)?;
    let (qt, tape_t) = f.forward(&pipe.xt)?;
    let ps = get_prob(&qs, &pipe.kt, &pipe.bank_t, spec.tau)?.into_inner();
    let pt = get_prob(&qt, &pipe.ks, &pipe.bank_s, spec.tau)?.into_inner();
    let frozen = Frozen::new(&ps, &pt, spec)?;
    let report = loss_fn(&ps, &pt, &frozen.ys, &frozen.yt, spec.xsim_reg)?;
    let gqs = query_gradient(&report.grad_logits_s, &pipe.kt, &pipe.bank_t, spec.tau)?;
    let gqt = query_gradient(&report.grad_logits_t, &pipe.ks, &pipe.bank_s, spec.tau)?;
    let (mut grads, _) = f.backward(&tape_s, &gqs)?;
    grads.accumulate(&f.backward(&tape_t, &gqt)?.0)?;
    let analytic: Vec<f64> = grads
        .tensors()
        .flat_map(|t| t.as_slice().to_vec())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let tensors = f.tensors().count();
    for ti in 0..tensors {
        let len = f.tensors().nth(ti).expect("tensor index").as_slice().len();
        for i in 0..len {
            let eval = |h: f64| -> Result<f64> {
                let mut p = f.clone();
                p.tensors_mut()
                    .nth(ti)
                    .expect("tensor index")
                    .as_mut_slice()[i] += h;
                let (ps, pt) = pipe.probs(&p)?;
                frozen.value(&ps, &pt)
            };
            numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
        }
    }
    Ok(CaseResult {
        suite: "encoder",
        name: spec.label(),
        negatives: spec.k,
        batch: spec.n,
        coordinates: analytic.len(),
        rel_error: rel_error(&analytic, &numeric),
    })
}

/// Fixed small instances: a four-input, three-output encoder with `N = K = 2`
/// and the single-negative edge case.
pub fn fixed_specs() -> Vec<CaseSpec> {
    let base = CaseSpec {
        d_in: 4,
        hidden: vec![5],
        d: 3,
        n: 2,
        k: 2,
        tau: 0.2,
        xi: 0.9,
        lambda: 2.0,
        uniform_labels: true,
        xsim_reg: true,
    };
    vec![base.clone(), CaseSpec { k: 1, n: 3, ..base }]
}

/// Both suites: the fixed instances plus `instances` random ones each.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = stream_rng(opts.seed, 7);
    let mut cases = Vec::new();
    for (i, spec) in fixed_specs().iter().enumerate() {
        let seed = opts.seed.wrapping_add(i as u64);
        cases.push(logit_case(spec, seed, opts.loss_fn)?);
        cases.push(encoder_case(spec, seed, opts.loss_fn)?);
    }
    for _ in 0..opts.instances {
        let spec = CaseSpec::random(&mut rng);
        cases.push(logit_case(&spec, rng.random(), opts.loss_fn)?);
        // rectifiers can zero a whole embedding at tiny widths; redraw those
        let mut attempts = 0;
        loop {
            let spec = CaseSpec::random(&mut rng);
            match encoder_case(&spec, rng.random(), opts.loss_fn) {
                Err(Error::DegenerateEmbedding { .. }) if attempts < 100 => attempts += 1,
                other => {
                    cases.push(other?);
                    break;
                }
            }
        }
    }
    let worst = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        cases,
        worst_rel_error: worst,
        tolerance: opts.tolerance,
        passed: worst < opts.tolerance,
    })
}

/// Flips the sign of the cross-similarity gradient; must be caught.
pub fn sign_flipped_regularizer(
    ps: &Mat,
    pt: &Mat,
    ys: &Mat,
    yt: &Mat,
    xsim_reg: bool,
) -> Result<LossReport> {
    let mut r = xmoco_loss_with(ps, pt, ys, yt, xsim_reg)?;
    if xsim_reg {
        let (gs, gt) = crate::loss::xsim_gradients(ps, pt)?;
        r.grad_logits_s = r.grad_logits_s.sub(&gs.scale(2.0))?;
        r.grad_logits_t = r.grad_logits_t.sub(&gt.scale(2.0))?;
    }
    Ok(r)
}
