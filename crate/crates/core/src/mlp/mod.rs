//! Feed-forward surrogate networks.
//!
//! An [`Mlp`] is a stack of affine layers. Every layer except the last applies
//! the hidden activation elementwise; the last layer is affine and has a single
//! output, so the network is a scalar function of its input vector.

mod io;
mod train;

pub use io::{load_model, model_from_json, model_to_json, save_model, MODEL_FORMAT_VERSION};
pub use train::{split_dataset, train, EpochLoss, TrainConfig, TrainReport};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{dot, ActivationKind, Matrix};

/// Hidden widths used for every experimental surrogate.
pub const DEFAULT_HIDDEN: [usize; 2] = [26, 26];

/// One affine layer, weights shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                context: "layer bias length",
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `W x + b` into `out`.
    pub(crate) fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.bias
                .iter()
                .enumerate()
                .map(|(r, b)| dot(self.weights.row(r), x) + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: ActivationKind,
}

impl Mlp {
    /// Validates the layer chain: dimensions connect, the output is scalar and
    /// every parameter is finite.
    pub fn new(layers: Vec<Layer>, activation: ActivationKind) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidConfig("an Mlp needs at least one layer".into()));
        };
        if last.out_dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "output layer width",
                expected: 1,
                found: last.out_dim(),
            });
        }
        for pair in layers.windows(2) {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::DimensionMismatch {
                    context: "consecutive layer dimensions",
                    expected: pair[0].out_dim(),
                    found: pair[1].in_dim(),
                });
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias length",
                    expected: l.out_dim(),
                    found: l.bias.len(),
                });
            }
            if !l.weights.is_finite() || !l.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Scaled-uniform initialisation: each weight and bias of a layer with
    /// fan-in `m` is drawn from `U(-sqrt(1/m), sqrt(1/m))`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        activation: ActivationKind,
        rng: &mut R,
    ) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let bound = (1.0 / inp as f64).sqrt();
                let weights: Vec<f64> = (0..out * inp).map(|_| rng.gen_range(-bound..=bound)).collect();
                let bias = (0..out).map(|_| rng.gen_range(-bound..=bound)).collect();
                Layer {
                    weights: Matrix::new(out, inp, weights).expect("sized above"),
                    bias,
                }
            })
            .collect();
        Self { layers, activation }
    }

    /// The experimental surrogate: two softplus layers of width 26.
    pub fn default_surrogate(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random(input_dim, &DEFAULT_HIDDEN, ActivationKind::Softplus, &mut rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters in layer order, weights (row-major) before bias.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
    }

    pub(crate) fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()].into_iter())
    }

    pub(crate) fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let hidden = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine_into(&cur, &mut next);
            if i < hidden {
                for v in next.iter_mut() {
                    *v = self.activation.value(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    /// Mean squared error over a dataset.
    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        self.check_input(&data.inputs[0])?;
        let mut sum = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.outputs) {
            let r = self.forward(x)? - y;
            sum += r * r;
        }
        Ok(sum / data.len() as f64)
    }

    /// Order-sensitive FNV-1a hash over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.parameters() {
            for b in p.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Input/output tuples for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidConfig("dataset is empty".into()));
        }
        if inputs.len() != outputs.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset outputs",
                expected: inputs.len(),
                found: outputs.len(),
            });
        }
        let d = inputs[0].len();
        for x in &inputs {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "dataset input dimension",
                    expected: d,
                    found: x.len(),
                });
            }
        }
        if !inputs.iter().flatten().chain(&outputs).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        Ok(Self { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            outputs: indices.iter().map(|&i| self.outputs[i]).collect(),
        }
    }
}

/// Parameter-shaped container for `∂MSE/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub(crate) fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub(crate) fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()].into_iter())
    }
}

/// Batch-averaged gradient of the mean squared error with respect to every
/// parameter, by backpropagation.
pub fn backward(net: &Mlp, batch: &Dataset) -> Result<Gradients> {
    Ok(backward_with_loss(net, batch)?.0)
}

/// [`backward`] plus the batch MSE it was computed from.
pub fn backward_with_loss(net: &Mlp, batch: &Dataset) -> Result<(Gradients, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    for x in &batch.inputs {
        net.check_input(x)?;
    }
    let mut grads = Gradients::zeros_like(net);
    let mut ws = Workspace::new(net);
    let loss = ws.accumulate(net, batch, 0..batch.len(), &mut grads);
    Ok((grads, loss))
}

/// Reusable buffers for the per-sample forward/backward sweep.
pub(crate) struct Workspace {
    /// `acts[l]` feeds layer `l`; the last entry is the network output.
    acts: Vec<Vec<f64>>,
    /// Activation slopes `σ'(z)` of the hidden layers.
    slopes: Vec<Vec<f64>>,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(net: &Mlp) -> Self {
        let mut acts = vec![vec![0.0; net.input_dim()]];
        acts.extend(net.layers.iter().map(|l| vec![0.0; l.out_dim()]));
        let slopes = net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();
        Self {
            acts,
            slopes,
            delta: Vec::new(),
            prev: Vec::new(),
        }
    }

    /// Adds the MSE gradient over `batch[indices]` into `grads` (the mean is
    /// taken over the selected samples) and returns their MSE. Inputs must
    /// already be dimension-checked.
    pub(crate) fn accumulate(
        &mut self,
        net: &Mlp,
        batch: &Dataset,
        indices: impl ExactSizeIterator<Item = usize>,
        grads: &mut Gradients,
    ) -> f64 {
        let n = indices.len() as f64;
        let last = net.layers.len() - 1;
        let mut loss = 0.0;
        for s in indices {
            self.acts[0].copy_from_slice(&batch.inputs[s]);
            for (l, layer) in net.layers.iter().enumerate() {
                let (head, tail) = self.acts.split_at_mut(l + 1);
                let (a_in, out) = (&head[l], &mut tail[0]);
                for (r, o) in out.iter_mut().enumerate() {
                    *o = dot(layer.weights.row(r), a_in) + layer.bias[r];
                }
                if l < last {
                    for (o, d) in out.iter_mut().zip(self.slopes[l].iter_mut()) {
                        (*o, *d) = net.activation.value_and_first(*o);
                    }
                }
            }
            let r = self.acts[last + 1][0] - batch.outputs[s];
            loss += r * r;
            // delta = ∂(r²/n)/∂z for the current layer's pre-activations
            self.delta.clear();
            self.delta.push(2.0 * r / n);
            for l in (0..=last).rev() {
                let layer = &net.layers[l];
                let g = &mut grads.layers[l];
                let a_in = &self.acts[l];
                let width = a_in.len();
                let gw = g.weights.as_mut_slice();
                for (row, &d) in self.delta.iter().enumerate() {
                    g.bias[row] += d;
                    for (w, &a) in gw[row * width..(row + 1) * width].iter_mut().zip(a_in) {
                        *w += d * a;
                    }
                }
                if l == 0 {
                    break;
                }
                self.prev.clear();
                self.prev.resize(width, 0.0);
                for (row, &d) in self.delta.iter().enumerate() {
                    for (p, &w) in self.prev.iter_mut().zip(layer.weights.row(row)) {
                        *p += d * w;
                    }
                }
                for (p, &sl) in self.prev.iter_mut().zip(&self.slopes[l - 1]) {
                    *p *= sl;
                }
                std::mem::swap(&mut self.delta, &mut self.prev);
            }
        }
        loss / n
    }
}

/// `n` input/target pairs, all entries uniform on `[-2, 2]`.
pub fn random_batch(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Dataset {
    let inputs = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let outputs = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Dataset::new(inputs, outputs).unwrap()
}

/// Central differences of the batch MSE in each parameter.
pub fn finite_difference_gradient(net: &Mlp, batch: &Dataset, h: f64) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut probe = net.clone();
    for li in 0..net.layers.len() {
        let n_w = net.layers[li].weights.as_slice().len();
        let n_b = net.layers[li].bias.len();
        for k in 0..n_w + n_b {
            let set = |p: &mut Mlp, v: f64| {
                if k < n_w {
                    p.layers[li].weights.as_mut_slice()[k] = v;
                } else {
                    p.layers[li].bias[k - n_w] = v;
                }
            };
            let orig = if k < n_w {
                net.layers[li].weights.as_slice()[k]
            } else {
                net.layers[li].bias[k - n_w]
            };
            set(&mut probe, orig + h);
            let up = probe.mse(batch)?;
            set(&mut probe, orig - h);
            let down = probe.mse(batch)?;
            set(&mut probe, orig);
            out.push((up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Largest relative disagreement between [`backward`] and central differences
/// (step `1e-5`) on a random small network and batch derived from `seed`.
/// Relative errors use a floor of `1e-2` on the magnitude.
pub fn gradient_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=5)).collect();
    let d = rng.gen_range(1..=4);
    let net = Mlp::random(d, &hidden, ActivationKind::Softplus, &mut rng);
    let n = rng.gen_range(1..=6);
    let batch = random_batch(&mut rng, d, n);
    let analytic: Vec<f64> = backward(&net, &batch)?.values().collect();
    let fd = finite_difference_gradient(&net, &batch, 1e-5)?;
    Ok(analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-2))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softplus;
    use proptest::prelude::*;
    use rand::Rng;

    fn layer(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Layer {
        Layer::new(Matrix::from_rows(&rows).unwrap(), bias).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::new(
            vec![Layer::zeros(2, 2), Layer::zeros(2, 2), Layer::zeros(1, 2)],
            ActivationKind::Softplus,
        )
        .unwrap();
        for x in [[0.0, 0.0], [3.0, -1.0], [-100.0, 50.0]] {
            assert_eq!(net.forward(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_unit_closed_form() {
        let net = Mlp::new(
            vec![
                layer(vec![vec![1.0, 1.0]], vec![0.0]),
                layer(vec![vec![1.0]], vec![0.0]),
            ],
            ActivationKind::Softplus,
        )
        .unwrap();
        let y = net.forward(&[0.0, 0.0]).unwrap();
        assert!((y - std::f64::consts::LN_2).abs() < 1e-15);
    }

    /// Two inputs, two width-3 activated layers, linear read-out, written out
    /// term by term.
    fn exposition_by_hand(net: &Mlp, x1: f64, x2: f64) -> f64 {
        let (f, g, h) = (&net.layers[0], &net.layers[1], &net.layers[2]);
        let w = |r, c| f.weights.get(r, c);
        let v = |r, c| g.weights.get(r, c);
        let big_w = [
            w(0, 0) * x1 + w(0, 1) * x2 + f.bias[0],
            w(1, 0) * x1 + w(1, 1) * x2 + f.bias[1],
            w(2, 0) * x1 + w(2, 1) * x2 + f.bias[2],
        ];
        let s = big_w.map(softplus);
        let mut out = 0.0;
        for i in 0..3 {
            let vi = v(i, 0) * s[0] + v(i, 1) * s[1] + v(i, 2) * s[2] + g.bias[i];
            out += h.weights.get(0, i) * softplus(vi);
        }
        out
    }

    #[test]
    fn forward_matches_hand_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = Mlp::random(2, &[3, 3], ActivationKind::Softplus, &mut rng);
        net.layers[2].bias[0] = 0.0;
        for _ in 0..50 {
            let x1: f64 = rng.gen_range(-3.0..3.0);
            let x2: f64 = rng.gen_range(-3.0..3.0);
            let got = net.forward(&[x1, x2]).unwrap();
            assert!((got - exposition_by_hand(&net, x1, x2)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = Mlp::default_surrogate(2, 0);
        assert!(matches!(
            net.forward(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn constructor_validates_chain() {
        let bad = Mlp::new(vec![Layer::zeros(3, 2), Layer::zeros(1, 4)], ActivationKind::Softplus);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
        let wide_out = Mlp::new(vec![Layer::zeros(2, 2)], ActivationKind::Softplus);
        assert!(wide_out.is_err());
        let mut nan_layer = Layer::zeros(1, 2);
        nan_layer.bias[0] = f64::NAN;
        assert!(Mlp::new(vec![nan_layer], ActivationKind::Softplus).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::random(3, &[4, 4], ActivationKind::Softplus, &mut rng);
        let mut batch = random_batch(&mut rng, 3, 7);
        batch.outputs = batch.inputs.iter().map(|x| net.forward(x).unwrap()).collect();
        let g = backward(&net, &batch).unwrap();
        assert!(g.values().all(|v| v == 0.0));
    }

    #[test]
    fn doubling_residuals_doubles_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::random(2, &[5, 3], ActivationKind::Softplus, &mut rng);
        let batch = random_batch(&mut rng, 2, 9);
        let preds: Vec<f64> = batch.inputs.iter().map(|x| net.forward(x).unwrap()).collect();
        let mut doubled = batch.clone();
        for (y, p) in doubled.outputs.iter_mut().zip(&preds) {
            *y = p - 2.0 * (p - *y);
        }
        let (g1, l1) = backward_with_loss(&net, &batch).unwrap();
        let (g2, l2) = backward_with_loss(&net, &doubled).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-10 * l1.max(1.0));
        for (a, b) in g1.values().zip(g2.values()) {
            assert!((b - 2.0 * a).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..100 {
            let err = gradient_check(seed).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn checksum_tracks_parameters() {
        let net = Mlp::default_surrogate(2, 9);
        let mut other = net.clone();
        assert_eq!(net.checksum(), other.checksum());
        other.layers[1].bias[3] += 1e-12;
        assert_ne!(net.checksum(), other.checksum());
    }

    proptest! {
        #[test]
        fn forward_is_deterministic(seed in any::<u64>(), x in -3.0f64..3.0, y in -3.0f64..3.0) {
            let net = Mlp::default_surrogate(2, seed);
            let a = net.forward(&[x, y]).unwrap();
            let b = net.forward(&[x, y]).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a.is_finite());
        }
    }
}
