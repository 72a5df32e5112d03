//! Fully connected encoder with rectifiers between layers and a final L2
//! normalization, plus the momentum (EMA) copy that produces keys.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Mat,
    /// `out × 1`.
    pub bias: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

/// Activations recorded by [`EncoderParams::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer (post-rectifier for all but the first).
    inputs: Vec<Mat>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Mat>,
    /// Normalized features.
    features: Mat,
    /// Norms of the unnormalized output columns.
    norms: Vec<f64>,
}

impl Tape {
    pub fn features(&self) -> &Mat {
        &self.features
    }

    /// Input of the last linear layer.
    pub fn penultimate(&self) -> &Mat {
        self.inputs.last().expect("at least one layer")
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases. `dims = [d_in, hidden…, d]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::param(
                "architecture",
                format!("need at least two positive dimensions, got {dims:?}"),
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: Mat::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..=a)),
                    bias: Mat::zeros(fan_out, 1),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("architecture", "no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (l.weight.rows(), 1) {
                return Err(Error::shape(
                    format!("layer {i} bias {}x1", l.weight.rows()),
                    format!("{}x{}", l.bias.rows(), l.bias.cols()),
                ));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::shape(
                    format!("layer {i} input {}", layers[i - 1].weight.rows()),
                    format!("{}", l.weight.cols()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `[d_in, hidden…, d]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.cols()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    /// Weight and bias tensors in a fixed order: `w0, b0, w1, b1, …`.
    pub fn tensors(&self) -> impl Iterator<Item = &Mat> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Tensor names matching [`Self::tensors`].
    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.w{i}"), format!("{prefix}.b{i}")])
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Mat::zeros(l.bias.rows(), 1),
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .map(|t| t.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖` over all parameters.
    pub fn distance(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| {
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Mat::is_finite)
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    fn linear(layer: &Layer, x: &Mat) -> Result<Mat> {
        let mut out = layer.weight.matmul(x)?;
        for r in 0..out.rows() {
            let b = layer.bias[(r, 0)];
            out.row_mut(r).iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    /// Encodes a `d_in × N` batch into unit-norm `d × N` features.
    pub fn forward(&self, batch: &Mat) -> Result<(Mat, Tape)> {
        if batch.rows() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input rows", self.input_dim()),
                format!("{}", batch.rows()),
            ));
        }
        if !batch.is_finite() {
            return Err(Error::param("batch", "non-finite input"));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::linear(layer, &x)?;
            inputs.push(x);
            if i == last {
                x = z;
            } else {
                x = z.map(relu);
                pre_activations.push(z);
            }
        }
        let norms = x.col_norms();
        if let Some(column) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::DegenerateEmbedding { column });
        }
        let mut features = x;
        let cols = features.cols();
        for (i, v) in features.as_mut_slice().iter_mut().enumerate() {
            *v /= norms[i % cols];
        }
        let tape = Tape {
            inputs,
            pre_activations,
            features: features.clone(),
            norms,
        };
        Ok((features, tape))
    }

    /// Convenience wrapper discarding the tape.
    pub fn encode(&self, batch: &Mat) -> Result<Mat> {
        self.forward(batch).map(|(f, _)| f)
    }

    /// Parameter and input gradients of a scalar loss given its gradient with
    /// respect to the normalized features.
    pub fn backward(&self, tape: &Tape, grad_features: &Mat) -> Result<(EncoderParams, Mat)> {
        if grad_features.shape() != tape.features.shape() {
            return Err(Error::shape(
                format!("{}x{}", tape.features.rows(), tape.features.cols()),
                format!("{}x{}", grad_features.rows(), grad_features.cols()),
            ));
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::shape(
                format!("tape of {} layers", self.layers.len()),
                format!("{}", tape.inputs.len()),
            ));
        }
        // through y = z/‖z‖: (g − y(yᵀg)) / ‖z‖
        let y = &tape.features;
        let along = y.hadamard(grad_features)?.col_sums();
        let cols = y.cols();
        let mut delta = Mat::from_fn(y.rows(), cols, |r, c| {
            (grad_features[(r, c)] - y[(r, c)] * along[c]) / tape.norms[c]
        });

        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &tape.inputs[i];
            let weight = delta.matmul_t(input)?;
            let bias = Mat::from_vec(delta.rows(), 1, delta.row_sums())?;
            grads.push(Layer { weight, bias });
            let mut back = layer.weight.t_matmul(&delta)?;
            if i > 0 {
                let pre = &tape.pre_activations[i - 1];
                for (b, &z) in back.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            delta = back;
        }
        grads.reverse();
        Ok((EncoderParams { layers: grads }, delta))
    }
}

/// Trainable encoder `f` with its momentum copy `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub f: EncoderParams,
    pub g: EncoderParams,
    pub m: f64,
}

impl MomentumPair {
    /// `g` starts as an exact copy of `f`.
    pub fn new(f: EncoderParams, m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::param(
                "ema_m",
                format!("must lie in [0, 1], got {m}"),
            ));
        }
        Ok(Self { g: f.clone(), f, m })
    }

    /// `g ← m·g + (1−m)·f`, elementwise; `f` is untouched.
    pub fn momentum_update(&mut self) {
        let m = self.m;
        for (g, f) in self.g.tensors_mut().zip(self.f.tensors()) {
            for (gv, fv) in g.as_mut_slice().iter_mut().zip(f.as_slice()) {
                *gv = m * *gv + (1.0 - m) * fv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::gaussian_mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(d: usize) -> EncoderParams {
        EncoderParams::from_layers(vec![Layer {
            weight: Mat::identity(d),
            bias: Mat::zeros(d, 1),
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_normalizes() {
        let net = identity_net(2);
        let x = Mat::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let (f, _) = net.forward(&x).unwrap();
        assert!((f[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((f[(1, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn outputs_are_unit_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = EncoderParams::init(&[5, 8, 8, 3], &mut rng).unwrap();
        let x = gaussian_mat(&mut rng, 5, 6);
        let (a, _) = net.forward(&x).unwrap();
        for n in a.col_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        let twin = x.col_range(0, 1).hcat(&x.col_range(0, 1)).unwrap();
        let (b, _) = net.forward(&twin).unwrap();
        assert_eq!(b.col(0), b.col(1));
        assert_eq!(net.dims(), vec![5, 8, 8, 3]);
    }

    #[test]
    fn zero_output_is_degenerate() {
        let net = EncoderParams::from_layers(vec![Layer {
            weight: Mat::zeros(2, 2),
            bias: Mat::zeros(2, 1),
        }])
        .unwrap();
        assert!(matches!(
            net.forward(&Mat::filled(2, 1, 1.0)),
            Err(Error::DegenerateEmbedding { column: 0 })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = EncoderParams::init(&[4, 6, 3], &mut rng).unwrap();
        let x = gaussian_mat(&mut rng, 4, 3);
        let (f, tape) = net.forward(&x).unwrap();
        let (grads, gin) = net
            .backward(&tape, &Mat::zeros(f.rows(), f.cols()))
            .unwrap();
        assert_eq!(grads.norm(), 0.0);
        assert_eq!(gin.max_abs(), 0.0);
    }

    #[test]
    fn radial_upstream_gradient_is_annihilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = EncoderParams::init(&[4, 6, 3], &mut rng).unwrap();
        let x = gaussian_mat(&mut rng, 4, 3);
        let (f, tape) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&tape, &f.scale(2.5)).unwrap();
        assert!(grads.norm() < 1e-12);
    }

    #[test]
    fn one_layer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = EncoderParams::init(&[4, 3], &mut rng).unwrap();
        let x = gaussian_mat(&mut rng, 4, 5);
        let upstream = gaussian_mat(&mut rng, 3, 5);
        let loss = |p: &EncoderParams| p.encode(&x).unwrap().frobenius_dot(&upstream).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&tape, &upstream).unwrap();
        let h = 1e-6;
        let mut fd = net.zeros_like();
        let n_tensors = net.tensors().count();
        for t in 0..n_tensors {
            let len = net.tensors().nth(t).unwrap().as_slice().len();
            for i in 0..len {
                let mut plus = net.clone();
                plus.tensors_mut().nth(t).unwrap().as_mut_slice()[i] += h;
                let mut minus = net.clone();
                minus.tensors_mut().nth(t).unwrap().as_mut_slice()[i] -= h;
                fd.tensors_mut().nth(t).unwrap().as_mut_slice()[i] =
                    (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
        }
        let rel = fd.distance(&grads) / fd.norm().max(grads.norm());
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn momentum_limits_and_hand_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = EncoderParams::init(&[3, 2], &mut rng).unwrap();
        let g0 = EncoderParams::init(&[3, 2], &mut rng).unwrap();

        let mut pair = MomentumPair {
            f: f.clone(),
            g: g0.clone(),
            m: 0.0,
        };
        pair.momentum_update();
        assert_eq!(pair.g, f);

        let mut pair = MomentumPair {
            f: f.clone(),
            g: g0.clone(),
            m: 1.0,
        };
        pair.momentum_update();
        assert_eq!(pair.g, g0);
        assert_eq!(pair.f, f);

        let scalar = |v: f64| {
            EncoderParams::from_layers(vec![Layer {
                weight: Mat::filled(1, 1, v),
                bias: Mat::filled(1, 1, v),
            }])
            .unwrap()
        };
        let mut pair = MomentumPair {
            f: scalar(4.0),
            g: scalar(2.0),
            m: 0.5,
        };
        pair.momentum_update();
        assert_eq!(pair.g, scalar(3.0));
    }

    #[test]
    fn momentum_contracts_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = EncoderParams::init(&[4, 5, 2], &mut rng).unwrap();
        let g = EncoderParams::init(&[4, 5, 2], &mut rng).unwrap();
        let mut pair = MomentumPair { f, g, m: 0.9 };
        let mut prev = pair.g.distance(&pair.f);
        for _ in 0..20 {
            pair.momentum_update();
            let now = pair.g.distance(&pair.f);
            assert!((now - 0.9 * prev).abs() <= 1e-12 * prev.max(1.0));
            prev = now;
        }
    }

    #[test]
    fn new_pair_copies_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = EncoderParams::init(&[4, 2], &mut rng).unwrap();
        let pair = MomentumPair::new(f.clone(), 0.99).unwrap();
        assert_eq!(pair.g, f);
        assert!(MomentumPair::new(f, 1.5).is_err());
    }
}
