//! Checkpoint files: a text manifest followed by XMC1 tensor blocks.
//!
//! ```text
//! XMOCO-CHECKPOINT 1
//! arch 16,64,64,16
//! config tau = 0.2
//! …
//! epoch 3
//! step 42
//! cursor_s 5
//! cursor_t 5
//! tensor f.w0 64 16
//! …
//! end
//! XMC1 64 16
//! <payload>
//! …
//! ```
//!
//! Blocks follow the manifest order: `f.*`, `g.*`, `v.*` (SGD velocity), the
//! two banks in storage order, then the two probability queues.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::bank::{MemoryBank, ProbQueue};
use crate::config::{RunConfig, TrainConfig};
use crate::encoder::{EncoderParams, Layer, MomentumPair};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::training::TrainState;

pub const MAGIC: &str = "XMOCO-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: TrainConfig,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn tensors(state: &TrainState) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    for (prefix, params) in [
        ("f", &state.pair.f),
        ("g", &state.pair.g),
        ("v", &state.velocity),
    ] {
        out.extend(
            params
                .tensor_names(prefix)
                .into_iter()
                .zip(params.tensors().cloned()),
        );
    }
    out.push(("bank_s".into(), state.bank_s.features().clone()));
    out.push(("bank_t".into(), state.bank_t.features().clone()));
    out.push(("queue_s".into(), state.queue_s.to_mat()));
    out.push(("queue_t".into(), state.queue_t.to_mat()));
    out
}

pub fn write<W: Write>(w: &mut W, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let arch: Vec<String> = state
        .pair
        .f
        .dims()
        .iter()
        .map(ToString::to_string)
        .collect();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "arch {}", arch.join(","))?;
    for (k, v) in cfg.to_pairs() {
        writeln!(w, "config {k} = {v}")?;
    }
    writeln!(w, "epoch {}", state.epoch)?;
    writeln!(w, "step {}", state.step)?;
    writeln!(w, "cursor_s {}", state.bank_s.cursor())?;
    writeln!(w, "cursor_t {}", state.bank_t.cursor())?;
    let blocks = tensors(state);
    for (name, m) in &blocks {
        writeln!(w, "tensor {name} {} {}", m.rows(), m.cols())?;
    }
    writeln!(w, "end")?;
    for (_, m) in &blocks {
        m.write_xmc1(w)?;
    }
    Ok(())
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// truncated checkpoint behind.
pub fn save(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        write(&mut w, state, cfg)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected '{key} …', got {line:?}")))
}

fn number<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    value(line, key)?
        .trim()
        .parse()
        .map_err(|_| bad(format!("invalid {key} in {line:?}")))
}

fn params_from(blocks: &mut std::vec::IntoIter<Mat>, layers: usize) -> Result<EncoderParams> {
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let weight = blocks.next().ok_or_else(|| bad("missing weight block"))?;
        let bias = blocks.next().ok_or_else(|| bad("missing bias block"))?;
        out.push(Layer { weight, bias });
    }
    EncoderParams::from_layers(out)
}

pub fn read<R: BufRead>(r: &mut R) -> Result<Checkpoint> {
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("manifest is missing its 'end' line"));
        }
        let line = line.trim_end_matches(['\n', '\r']).to_string();
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.iter().map(String::as_str).peekable();
    if it.next() != Some(MAGIC) {
        return Err(bad(format!("first line must be {MAGIC:?}")));
    }
    let arch: Vec<usize> = value(it.next().unwrap_or(""), "arch")?
        .split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| bad(format!("invalid arch entry {s:?}")))
        })
        .collect::<Result<_>>()?;
    if arch.len() < 2 {
        return Err(bad("arch needs at least two widths"));
    }

    let mut run = RunConfig::default();
    while let Some(line) = it.peek().and_then(|l| l.strip_prefix("config ")) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("invalid config line {line:?}")))?;
        run.set(k.trim(), v).map_err(bad)?;
        it.next();
    }
    let config = run.train;
    config.validate()?;
    if config.dims(arch[0]) != arch {
        return Err(bad(format!(
            "arch {arch:?} disagrees with the stored config"
        )));
    }

    let epoch: usize = number(it.next().unwrap_or(""), "epoch")?;
    let step: u64 = number(it.next().unwrap_or(""), "step")?;
    let cursor_s: usize = number(it.next().unwrap_or(""), "cursor_s")?;
    let cursor_t: usize = number(it.next().unwrap_or(""), "cursor_t")?;

    let mut manifest = Vec::new();
    for line in it {
        let mut parts = value(line, "tensor")?.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| bad(format!("tensor line {line:?}")))?;
        let dims: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| bad(format!("tensor line {line:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(bad(format!("tensor line {line:?}")));
        }
        manifest.push((name.to_string(), dims[0], dims[1]));
    }
    let layers = arch.len() - 1;
    if manifest.len() != 6 * layers + 4 {
        return Err(bad(format!(
            "expected {} tensors for arch {arch:?}, manifest lists {}",
            6 * layers + 4,
            manifest.len()
        )));
    }

    let mut blocks = Vec::with_capacity(manifest.len());
    for (name, rows, cols) in &manifest {
        let m = Mat::read_xmc1(r)?;
        if m.shape() != (*rows, *cols) {
            return Err(bad(format!(
                "block {name} is {}x{}, manifest says {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        blocks.push(m);
    }
    let mut blocks = blocks.into_iter();
    let f = params_from(&mut blocks, layers)?;
    let g = params_from(&mut blocks, layers)?;
    let velocity = params_from(&mut blocks, layers)?;
    if f.dims() != arch || !f.same_shape(&g) || !f.same_shape(&velocity) {
        return Err(bad("parameter blocks disagree with arch"));
    }
    let mut next = || blocks.next().ok_or_else(|| bad("missing block"));
    let bank_s = MemoryBank::from_parts(next()?, cursor_s)?;
    let bank_t = MemoryBank::from_parts(next()?, cursor_t)?;
    let queue_s = ProbQueue::from_mat(&next()?, config.prob_queue)?;
    let queue_t = ProbQueue::from_mat(&next()?, config.prob_queue)?;
    if bank_s.capacity() != config.bank_size || bank_t.capacity() != config.bank_size {
        return Err(bad("bank capacity disagrees with bank_size"));
    }
    let state = TrainState {
        pair: MomentumPair {
            f,
            g,
            m: config.ema_m,
        },
        velocity,
        bank_s,
        bank_t,
        queue_s,
        queue_t,
        epoch,
        step,
    };
    Ok(Checkpoint { state, config })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::training::{train_step, LossPath};

    fn trained_state(cfg: &TrainConfig) -> TrainState {
        let ds = make_blobs(2, 8, 5, 4.0, 1).unwrap();
        let mut state = TrainState::init(cfg, 5).unwrap();
        for _ in 0..3 {
            train_step(
                &mut state,
                &ds.samples.col_range(0, 4),
                cfg,
                0.1,
                LossPath::XMoCo,
            )
            .unwrap();
        }
        state
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = TrainConfig {
            bank_size: 6,
            batch_size: 4,
            hidden: vec![7],
            out_dim: 3,
            prob_queue: 5,
            ..TrainConfig::default()
        };
        let state = trained_state(&cfg);
        let mut buf = Vec::new();
        write(&mut buf, &state, &cfg).unwrap();
        let back = read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.config, cfg);
        let mut again = Vec::new();
        write(&mut again, &back.state, &back.config).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_truncation_and_tampering() {
        let cfg = TrainConfig {
            bank_size: 6,
            batch_size: 4,
            hidden: vec![],
            out_dim: 3,
            ..TrainConfig::default()
        };
        let state = trained_state(&cfg);
        let mut buf = Vec::new();
        write(&mut buf, &state, &cfg).unwrap();
        assert!(read(&mut &buf[..buf.len() - 3]).is_err());
        let text = String::from_utf8_lossy(&buf).replacen("arch 5,3", "arch 5,4", 1);
        assert!(read(&mut text.as_bytes()).is_err());
        assert!(read(&mut "XMC1 1 1\n".as_bytes()).is_err());
    }
}
