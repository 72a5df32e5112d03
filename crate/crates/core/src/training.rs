//! The alternating training loop: per batch, solve pseudo-labels from the
//! current peer probabilities, then take one SGD step on the query encoder,
//! move the momentum encoder and rotate the banks.
//!
//! Every random draw comes from a counter-addressed stream (parameter init,
//! the epoch permutation, the views of each step), so a run restarted from a
//! checkpoint replays exactly the same draws as the uninterrupted one.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;

use crate::bank::{extend_marginals, MemoryBank, ProbQueue};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{batch_views, epoch_batches, Dataset};
use crate::encoder::{EncoderParams, MomentumPair};
use crate::error::{Error, Result};
use crate::loss::{classical_gradients, classical_loss, cross_entropy_term, xmoco_loss_with};
use crate::matrix::Mat;
use crate::probability::{get_prob, query_gradient};
use crate::pseudolabel::{one_hot_labels, sinkhorn_labels, PseudoLabelMatrix};
use crate::sampling::stream_rng;

pub const INIT_STREAM: u64 = 1;
pub const EPOCH_STREAM: u64 = 1 << 32;
pub const VIEW_STREAM: u64 = 1 << 48;

pub const LR_COEFF: f64 = 0.5;
pub const LR_OFFSET: f64 = 0.1;

/// Which objective drives the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPath {
    /// Pseudo-labels plus the configured switches.
    XMoCo,
    /// One-hot contrastive loss computed directly from `P`, ignoring the
    /// label and regularization settings. Used as a reference.
    Classical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub pair: MomentumPair,
    /// SGD momentum buffers for `f`.
    pub velocity: EncoderParams,
    pub bank_s: MemoryBank,
    pub bank_t: MemoryBank,
    pub queue_s: ProbQueue,
    pub queue_t: ProbQueue,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, d_in: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let f = EncoderParams::init(&cfg.dims(d_in), &mut rng)?;
        let velocity = f.zeros_like();
        let pair = MomentumPair::new(f, cfg.ema_m)?;
        let bank_s = MemoryBank::random(cfg.out_dim, cfg.bank_size, &mut rng)?;
        let bank_t = MemoryBank::random(cfg.out_dim, cfg.bank_size, &mut rng)?;
        let rows = cfg.bank_size + 1;
        Ok(Self {
            pair,
            velocity,
            bank_s,
            bank_t,
            queue_s: ProbQueue::new(rows, cfg.prob_queue),
            queue_t: ProbQueue::new(rows, cfg.prob_queue),
            epoch: 0,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub term_label_s_on_pt: f64,
    pub term_label_t_on_ps: f64,
    pub term_xsim_s_on_pt: f64,
    pub term_xsim_t_on_ps: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    Step(StepMetrics),
    Epoch(EpochMetrics),
}

/// `base_lr · (offset + coeff·(1 + cos(π·step/total)))`.
pub fn cosine_lr(
    step: u64,
    total_steps: u64,
    base_lr: f64,
    coeff: f64,
    offset: f64,
) -> Result<f64> {
    if step > total_steps {
        return Err(Error::param(
            "step",
            format!("{step} exceeds schedule length {total_steps}"),
        ));
    }
    let phase = if total_steps == 0 {
        0.0
    } else {
        PI * step as f64 / total_steps as f64
    };
    Ok(base_lr * (offset + coeff * (1.0 + phase.cos())))
}

/// `v ← μ·v + grad + wd·θ`, then `θ ← θ − lr·v`.
pub fn sgd_update(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    velocity: &mut EncoderParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(velocity) {
        return Err(Error::shape(
            format!("{:?}", params.dims()),
            format!("grads {:?}, velocity {:?}", grads.dims(), velocity.dims()),
        ));
    }
    for ((p, g), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((pv, &gv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

fn labels_for(p: &Mat, queue: &mut ProbQueue, cfg: &TrainConfig) -> Result<PseudoLabelMatrix> {
    if !cfg.switches.uniform_labels {
        return Ok(one_hot_labels(p.rows(), p.cols()));
    }
    let labels = if queue.capacity() == 0 {
        sinkhorn_labels(p, cfg.xi, cfg.lambda, cfg.sinkhorn_iters)?
    } else {
        let (ext, n) = extend_marginals(p, queue)?;
        sinkhorn_labels(&ext, cfg.xi, cfg.lambda, cfg.sinkhorn_iters)?.truncate_columns(n)
    };
    queue.absorb(p)?;
    Ok(labels)
}

fn divergence(step: u64, what: &str, ps: &Mat, pt: &Mat) -> Error {
    let mut detail = what.to_string();
    for (side, p) in [("P^s", ps), ("P^t", pt)] {
        let bad: Vec<usize> = (0..p.cols())
            .filter(|&c| p.col(c).iter().any(|v| !v.is_finite() || *v <= 0.0))
            .collect();
        let shown: Vec<usize> = if bad.is_empty() { vec![0] } else { bad };
        for c in shown.into_iter().take(4) {
            let col = p.col(c);
            let head: Vec<String> = col.iter().take(8).map(|v| format!("{v:e}")).collect();
            detail.push_str(&format!(
                "; {side}[:, {c}] = [{}{}]",
                head.join(", "),
                if col.len() > 8 { ", …" } else { "" }
            ));
        }
    }
    Error::Divergence { step, detail }
}

/// One update from explicit source and target views (`d_in × N` each).
pub fn train_step_views(
    state: &mut TrainState,
    xs: &Mat,
    xt: &Mat,
    cfg: &TrainConfig,
    lr: f64,
    path: LossPath,
) -> Result<StepMetrics> {
    let n = xs.cols();
    if xt.shape() != xs.shape() {
        return Err(Error::shape(
            format!("{}x{}", xs.rows(), xs.cols()),
            format!("{}x{}", xt.rows(), xt.cols()),
        ));
    }
    if n > cfg.bank_size {
        return Err(Error::BatchExceedsBank {
            batch: n,
            capacity: cfg.bank_size,
        });
    }
    let f = &state.pair.f;
    let (qs, tape_s) = f.forward(xs)?;
    let (qt, tape_t) = f.forward(xt)?;
    let ks = state.pair.g.encode(xs)?;
    let kt = state.pair.g.encode(xt)?;

    let prob_s = get_prob(&qs, &kt, state.bank_t.features(), cfg.tau)?;
    let prob_t = get_prob(&qt, &ks, state.bank_s.features(), cfg.tau)?;
    let (ps, pt) = (prob_s.p(), prob_t.p());

    let (terms, grad_s, grad_t) = match path {
        LossPath::XMoCo => {
            let ys = labels_for(ps, &mut state.queue_s, cfg)?;
            let yt = labels_for(pt, &mut state.queue_t, cfg)?;
            let r = xmoco_loss_with(ps, pt, ys.y(), yt.y(), cfg.switches.xsim_reg).map_err(
                |e| match e {
                    Error::LogDomain { .. } => divergence(state.step, &e.to_string(), ps, pt),
                    other => other,
                },
            )?;
            let terms = [
                r.total,
                r.term_label_s_on_pt,
                r.term_label_t_on_ps,
                r.term_xsim_s_on_pt,
                r.term_xsim_t_on_ps,
            ];
            (terms, r.grad_logits_s, r.grad_logits_t)
        }
        LossPath::Classical => {
            let total = classical_loss(ps, pt)
                .map_err(|e| divergence(state.step, &e.to_string(), ps, pt))?;
            let one_hot = one_hot_labels(ps.rows(), n);
            let on_pt = cross_entropy_term(one_hot.y(), pt)?;
            let on_ps = cross_entropy_term(one_hot.y(), ps)?;
            let (gs, gt) = classical_gradients(ps, pt)?;
            ([total, on_pt, on_ps, 0.0, 0.0], gs, gt)
        }
    };
    if !terms[0].is_finite() {
        return Err(divergence(
            state.step,
            &format!("loss is {}", terms[0]),
            ps,
            pt,
        ));
    }

    let grad_qs = query_gradient(&grad_s, &kt, state.bank_t.features(), cfg.tau)?;
    let grad_qt = query_gradient(&grad_t, &ks, state.bank_s.features(), cfg.tau)?;
    let (mut grads, _) = f.backward(&tape_s, &grad_qs)?;
    let (grads_t, _) = f.backward(&tape_t, &grad_qt)?;
    grads.accumulate(&grads_t)?;
    let grad_norm = grads.norm();

    sgd_update(
        &mut state.pair.f,
        &grads,
        &mut state.velocity,
        lr,
        cfg.sgd_momentum,
        cfg.weight_decay,
    )?;
    if !state.pair.f.is_finite() {
        return Err(divergence(
            state.step,
            "non-finite parameters after update",
            ps,
            pt,
        ));
    }
    state.pair.momentum_update();
    state.bank_s.enqueue_dequeue(&ks)?;
    state.bank_t.enqueue_dequeue(&kt)?;

    let metrics = StepMetrics {
        step: state.step,
        epoch: state.epoch,
        lr,
        loss: terms[0],
        term_label_s_on_pt: terms[1],
        term_label_t_on_ps: terms[2],
        term_xsim_s_on_pt: terms[3],
        term_xsim_t_on_ps: terms[4],
        grad_norm,
    };
    state.step += 1;
    Ok(metrics)
}

/// One update on a `d_in × N` batch of original samples; the two views are
/// drawn from the stream belonging to the current step.
pub fn train_step(
    state: &mut TrainState,
    batch: &Mat,
    cfg: &TrainConfig,
    lr: f64,
    path: LossPath,
) -> Result<StepMetrics> {
    let mut rng = stream_rng(cfg.seed, VIEW_STREAM + state.step);
    let (xs, xt) = batch_views(batch, &cfg.transform, &mut rng);
    train_step_views(state, &xs, &xt, cfg, lr, path)
}

/// Full batches per epoch.
pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    if batch_size == 0 {
        0
    } else {
        dataset_len / batch_size
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory receiving `epoch-XXXX.ckpt` files; `None` disables them.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines sink for step and epoch metrics.
    pub metrics: Option<&'a mut dyn Write>,
    /// Stop after this many epochs in total (for interrupted runs); the
    /// schedule still spans the configured epoch count.
    pub stop_after_epochs: Option<usize>,
    /// Objective; defaults to [`LossPath::XMoCo`].
    pub path: Option<LossPath>,
}

pub struct RunOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

fn emit(sink: &mut Option<&mut dyn Write>, m: &Metrics) -> Result<()> {
    if let Some(w) = sink.as_mut() {
        serde_json::to_writer(&mut **w, m)?;
        w.write_all(b"\n").map_err(Error::Stream)?;
    }
    Ok(())
}

fn save(
    dir: &Option<PathBuf>,
    state: &TrainState,
    cfg: &TrainConfig,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("epoch-{:04}.ckpt", state.epoch));
        checkpoint::save(&path, state, cfg)?;
        written.push(path);
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs, starting from `resume` if given.
///
/// Checkpoints are written at epoch 0 (fresh runs only), every
/// `cfg.checkpoint_every` epochs and after the last epoch.
pub fn run(
    cfg: &TrainConfig,
    ds: &Dataset,
    resume: Option<TrainState>,
    mut opts: RunOptions<'_>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let per_epoch = steps_per_epoch(ds.len(), cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::param(
            "batch_size",
            format!(
                "batch of {} exceeds dataset of {}",
                cfg.batch_size,
                ds.len()
            ),
        ));
    }
    let total_steps = (per_epoch * cfg.epochs) as u64;
    let path = opts.path.unwrap_or(LossPath::XMoCo);
    let mut written = Vec::new();

    let mut state = match resume {
        Some(s) => {
            if s.pair.f.input_dim() != ds.dim() {
                return Err(Error::shape(
                    format!("{} input features", s.pair.f.input_dim()),
                    format!("{}", ds.dim()),
                ));
            }
            if s.step != (s.epoch * per_epoch) as u64 {
                return Err(Error::Format {
                    what: "checkpoint",
                    reason: format!(
                        "step {} does not match epoch {} at {per_epoch} steps per epoch",
                        s.step, s.epoch
                    ),
                });
            }
            s
        }
        None => {
            let s = TrainState::init(cfg, ds.dim())?;
            save(&opts.checkpoint_dir, &s, cfg, &mut written)?;
            s
        }
    };

    let last_epoch = opts
        .stop_after_epochs
        .map_or(cfg.epochs, |e| e.min(cfg.epochs));
    let mut epochs = Vec::new();
    while state.epoch < last_epoch {
        let mut rng = stream_rng(cfg.seed, EPOCH_STREAM + state.epoch as u64);
        let batches = epoch_batches(ds.len(), cfg.batch_size, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in &batches {
            let batch = ds.samples.select_cols(idx);
            lr = cosine_lr(state.step, total_steps, cfg.base_lr, LR_COEFF, LR_OFFSET)?;
            let m = train_step(&mut state, &batch, cfg, lr, path)?;
            loss_sum += m.loss;
            emit(&mut opts.metrics, &Metrics::Step(m))?;
        }
        let summary = EpochMetrics {
            epoch: state.epoch,
            steps: batches.len(),
            mean_loss: loss_sum / batches.len() as f64,
            lr,
        };
        log::info!("epoch {} mean loss {:.6}", summary.epoch, summary.mean_loss);
        emit(&mut opts.metrics, &Metrics::Epoch(summary.clone()))?;
        epochs.push(summary);
        state.epoch += 1;
        let periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
        if periodic || state.epoch == last_epoch {
            save(&opts.checkpoint_dir, &state, cfg, &mut written)?;
        }
    }
    if let Some(w) = opts.metrics.as_mut() {
        w.flush().map_err(Error::Stream)?;
    }
    Ok(RunOutcome {
        state,
        epochs,
        checkpoints: written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::pseudolabel::one_hot_labels;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            bank_size: 16,
            batch_size: 8,
            epochs: 2,
            hidden: vec![12],
            out_dim: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_points() {
        let b = 0.3;
        assert!((cosine_lr(0, 100, b, 0.5, 0.1).unwrap() - 1.1 * b).abs() < 1e-15);
        assert!((cosine_lr(100, 100, b, 0.5, 0.1).unwrap() - 0.1 * b).abs() < 1e-15);
        assert!((cosine_lr(50, 100, b, 0.5, 0.1).unwrap() - 0.6 * b).abs() < 1e-15);
        assert!(cosine_lr(101, 100, b, 0.5, 0.1).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = cosine_lr(s, 37, b, 0.5, 0.1).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn scalar(v: f64) -> EncoderParams {
        let layer = crate::encoder::Layer {
            weight: Mat::filled(1, 1, v),
            bias: Mat::zeros(1, 1),
        };
        EncoderParams::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn sgd_hand_iteration() {
        let mut p = scalar(1.0);
        let g = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p.layers()[0].weight[(0, 0)] - 0.71).abs() < 1e-15);

        let mut p = scalar(2.0);
        let mut v = scalar(0.0);
        sgd_update(&mut p, &scalar(0.5), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.layers()[0].weight[(0, 0)], 2.0 - 0.1 * 0.5);

        let mut p = scalar(2.0);
        let mut v = scalar(0.0);
        sgd_update(&mut p, &scalar(0.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, scalar(2.0));
    }

    #[test]
    fn zero_lr_moves_only_the_momentum_encoder() {
        let cfg = small_cfg();
        let ds = make_blobs(2, 8, 5, 4.0, 1).unwrap();
        let mut state = TrainState::init(&cfg, 5).unwrap();
        // make f and g differ so the EMA has something to do
        for w in state.pair.f.tensors_mut() {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= 1.5);
        }
        let f_before = state.pair.f.clone();
        let g_before = state.pair.g.clone();
        train_step(
            &mut state,
            &ds.samples.col_range(0, 8),
            &cfg,
            0.0,
            LossPath::XMoCo,
        )
        .unwrap();
        assert_eq!(state.pair.f, f_before);
        let mut expected = MomentumPair {
            f: f_before,
            g: g_before,
            m: cfg.ema_m,
        };
        expected.momentum_update();
        assert_eq!(state.pair.g, expected.g);
    }

    #[test]
    fn label_terms_reduce_to_classical_at_unit_xi() {
        let cfg = TrainConfig {
            xi: 1.0,
            switches: crate::loss::LossSwitches {
                uniform_labels: true,
                xsim_reg: false,
            },
            ..small_cfg()
        };
        let ds = make_blobs(2, 8, 5, 4.0, 2).unwrap();
        let mut a = TrainState::init(&cfg, 5).unwrap();
        let mut b = a.clone();
        let batch = ds.samples.col_range(0, 8);
        let ma = train_step(&mut a, &batch, &cfg, 0.05, LossPath::XMoCo).unwrap();
        let mb = train_step(&mut b, &batch, &cfg, 0.05, LossPath::Classical).unwrap();
        assert!((ma.loss - mb.loss).abs() < 1e-12);
        assert_eq!(a, b);
        assert_eq!(one_hot_labels(3, 1).y().col(0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_batch_loss_decreases() {
        let cfg = small_cfg();
        let ds = make_blobs(2, 8, 5, 4.0, 4).unwrap();
        let mut state = TrainState::init(&cfg, 5).unwrap();
        let mut rng = stream_rng(9, 0);
        let (xs, xt) = batch_views(&ds.samples.col_range(0, 8), &cfg.transform, &mut rng);
        let (bank_s, bank_t) = (state.bank_s.clone(), state.bank_t.clone());
        let mut losses = Vec::new();
        for _ in 0..50 {
            let m = train_step_views(&mut state, &xs, &xt, &cfg, 0.01, LossPath::XMoCo).unwrap();
            losses.push(m.loss);
            state.bank_s = bank_s.clone();
            state.bank_t = bank_t.clone();
        }
        let ups = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups <= 5, "{ups} increases: {losses:?}");
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn momentum_encoder_lags_within_contraction_bound() {
        let cfg = small_cfg();
        let ds = make_blobs(2, 16, 5, 4.0, 5).unwrap();
        let mut state = TrainState::init(&cfg, 5).unwrap();
        let lr = 0.2;
        for s in 0..20 {
            let before = state.pair.g.distance(&state.pair.f);
            let batch = ds.samples.col_range((s % 4) * 8, (s % 4) * 8 + 8);
            train_step(&mut state, &batch, &cfg, lr, LossPath::XMoCo).unwrap();
            let after = state.pair.g.distance(&state.pair.f);
            assert!(after <= before + lr * state.velocity.norm() + 1e-12);
        }
    }

    #[test]
    fn run_is_deterministic_and_resumable() {
        let cfg = TrainConfig {
            epochs: 3,
            checkpoint_every: 1,
            ..small_cfg()
        };
        let ds = make_blobs(2, 12, 5, 4.0, 6).unwrap();
        let mut full_log = Vec::new();
        let full = run(
            &cfg,
            &ds,
            None,
            RunOptions {
                metrics: Some(&mut full_log),
                ..Default::default()
            },
        )
        .unwrap();
        let mut again = Vec::new();
        run(
            &cfg,
            &ds,
            None,
            RunOptions {
                metrics: Some(&mut again),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(full_log, again);

        let mut head = Vec::new();
        let part = run(
            &cfg,
            &ds,
            None,
            RunOptions {
                metrics: Some(&mut head),
                stop_after_epochs: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let mut tail = Vec::new();
        let resumed = run(
            &cfg,
            &ds,
            Some(part.state),
            RunOptions {
                metrics: Some(&mut tail),
                ..Default::default()
            },
        )
        .unwrap();
        head.extend(tail);
        assert_eq!(head, full_log);
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let ds = make_blobs(2, 8, 5, 4.0, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run(
            &cfg,
            &ds,
            None,
            RunOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert!(out.checkpoints[0].ends_with("epoch-0000.ckpt"));
        assert_eq!(out.state.step, 0);
    }

    #[test]
    fn metrics_lines_are_tagged() {
        let m = Metrics::Epoch(EpochMetrics {
            epoch: 1,
            steps: 2,
            mean_loss: 0.5,
            lr: 0.1,
        });
        let line = serde_json::to_string(&m).unwrap();
        assert_eq!(
            line,
            r#"{"kind":"epoch","epoch":1,"steps":2,"mean_loss":0.5,"lr":0.1}"#
        );
    }
}
