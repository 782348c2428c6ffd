//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only record of scalar operations. Each node stores
//! its parents and the local partial derivative with respect to each of them,
//! so a plain backward sweep is a single reverse pass over the nodes.
//!
//! Second derivatives use reverse-over-reverse: [`Tape::gradient_recorded`]
//! performs the backward sweep *as tape operations*, appending the adjoint
//! computation to the same tape. The resulting gradient scalars can then be
//! differentiated again with [`Tape::gradient`]. For that to work every local
//! partial must itself be a tape expression, which is why the logistic
//! function (the derivative of softplus) and its derivative are primitives.
//!
//! On top of the tape this module implements the surrogate derivatives used
//! by the classifiers: input gradients, nested mixed partials in either
//! order, and the full Hessian.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::math::{softplus, softplus_double_prime, softplus_prime, softplus_triple_prime, Matrix};
use crate::mlp::{Dataset, Gradients, Layer, Mlp};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Softplus(usize),
    /// σ', the logistic sigmoid.
    Logistic(usize),
    /// σ''.
    LogisticPrime(usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
    /// Local partials with respect to the parents named in `op`, in order.
    partials: [f64; 2],
}

impl Node {
    fn parents(&self) -> impl Iterator<Item = (usize, f64)> {
        let (a, b) = match self.op {
            Op::Leaf => (None, None),
            Op::Add(a, b) | Op::Mul(a, b) => (Some(a), Some(b)),
            Op::Scale(a, _) | Op::Offset(a) | Op::Softplus(a) | Op::Logistic(a) | Op::LogisticPrime(a) => {
                (Some(a), None)
            }
        };
        let p = self.partials;
        a.map(|i| (i, p[0])).into_iter().chain(b.map(|i| (i, p[1])))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A scalar recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct DiffScalar<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A new independent variable (or constant: the tape does not distinguish).
    pub fn var(&self, value: f64) -> DiffScalar<'_> {
        self.push(Op::Leaf, value, [0.0, 0.0])
    }

    fn push(&self, op: Op, value: f64, partials: [f64; 2]) -> DiffScalar<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(match op {
            Op::Leaf => true,
            Op::Add(a, b) | Op::Mul(a, b) => a < nodes.len() && b < nodes.len(),
            Op::Scale(a, _) | Op::Offset(a) | Op::Softplus(a) | Op::Logistic(a) | Op::LogisticPrime(a) =>
                a < nodes.len(),
        });
        nodes.push(Node { op, value, partials });
        DiffScalar {
            tape: self,
            index: nodes.len() - 1,
            value,
        }
    }

    fn owns(&self, s: &DiffScalar<'_>) -> Result<()> {
        if std::ptr::eq(self, s.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    fn scalar(&self, index: usize) -> DiffScalar<'_> {
        let value = self.nodes.borrow()[index].value;
        DiffScalar {
            tape: self,
            index,
            value,
        }
    }

    /// Plain reverse sweep: `∂output/∂w` for each `w` in `wrt`.
    pub fn gradient(&self, output: DiffScalar<'_>, wrt: &[DiffScalar<'_>]) -> Result<Vec<f64>> {
        self.owns(&output)?;
        for w in wrt {
            self.owns(w)?;
        }
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; output.index + 1];
        adj[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for (p, d) in nodes[i].parents() {
                adj[p] += a * d;
            }
        }
        Ok(wrt.iter().map(|w| adj.get(w.index).copied().unwrap_or(0.0)).collect())
    }

    /// Reverse sweep recorded onto this tape, so the returned gradient entries
    /// are themselves differentiable.
    pub fn gradient_recorded<'t>(
        &'t self,
        output: DiffScalar<'t>,
        wrt: &[DiffScalar<'t>],
    ) -> Result<Vec<DiffScalar<'t>>> {
        self.owns(&output)?;
        for w in wrt {
            self.owns(w)?;
        }
        let mut adj: Vec<Option<DiffScalar<'t>>> = vec![None; output.index + 1];
        adj[output.index] = Some(self.var(1.0));
        let accumulate = |adj: &mut Vec<Option<DiffScalar<'t>>>, p: usize, v: DiffScalar<'t>| -> Result<()> {
            adj[p] = Some(match adj[p] {
                None => v,
                Some(acc) => acc.add(v)?,
            });
            Ok(())
        };
        for i in (0..=output.index).rev() {
            let Some(a) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op;
            match op {
                Op::Leaf => {}
                Op::Add(x, y) => {
                    accumulate(&mut adj, x, a)?;
                    accumulate(&mut adj, y, a)?;
                }
                Op::Mul(x, y) => {
                    let (sx, sy) = (self.scalar(x), self.scalar(y));
                    accumulate(&mut adj, x, a.mul(sy)?)?;
                    accumulate(&mut adj, y, a.mul(sx)?)?;
                }
                Op::Scale(x, c) => accumulate(&mut adj, x, a.scale(c))?,
                Op::Offset(x) => accumulate(&mut adj, x, a)?,
                Op::Softplus(x) => {
                    let d = self.scalar(x).logistic();
                    accumulate(&mut adj, x, a.mul(d)?)?;
                }
                Op::Logistic(x) => {
                    let d = self.scalar(x).logistic_prime();
                    accumulate(&mut adj, x, a.mul(d)?)?;
                }
                Op::LogisticPrime(_) => {
                    return Err(Error::DerivativeOrder(
                        "the tape records softplus derivatives up to second order",
                    ))
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.index).copied().flatten() {
                Some(g) => g,
                None => self.var(0.0),
            })
            .collect())
    }
}

impl<'t> DiffScalar<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: DiffScalar<'t>) -> Result<Self> {
        self.tape.owns(&other)?;
        Ok(self
            .tape
            .push(Op::Add(self.index, other.index), self.value + other.value, [1.0, 1.0]))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: DiffScalar<'t>) -> Result<Self> {
        self.tape.owns(&other)?;
        Ok(self.tape.push(
            Op::Mul(self.index, other.index),
            self.value * other.value,
            [other.value, self.value],
        ))
    }

    pub fn scale(self, c: f64) -> Self {
        self.tape.push(Op::Scale(self.index, c), c * self.value, [c, 0.0])
    }

    pub fn offset(self, c: f64) -> Self {
        self.tape.push(Op::Offset(self.index), self.value + c, [1.0, 0.0])
    }

    pub fn softplus(self) -> Self {
        let x = self.value;
        self.tape
            .push(Op::Softplus(self.index), softplus(x), [softplus_prime(x), 0.0])
    }

    pub fn logistic(self) -> Self {
        let x = self.value;
        self.tape.push(
            Op::Logistic(self.index),
            softplus_prime(x),
            [softplus_double_prime(x), 0.0],
        )
    }

    pub fn logistic_prime(self) -> Self {
        let x = self.value;
        self.tape.push(
            Op::LogisticPrime(self.index),
            softplus_double_prime(x),
            [softplus_triple_prime(x), 0.0],
        )
    }
}

/// Records `net(inputs)` with the parameters as constants.
pub fn record_forward<'t>(net: &Mlp, inputs: &[DiffScalar<'t>]) -> Result<DiffScalar<'t>> {
    if inputs.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: net.input_dim(),
            found: inputs.len(),
        });
    }
    let tape = inputs[0].tape;
    let hidden = net.layers().len() - 1;
    let mut cur: Vec<DiffScalar<'t>> = inputs.to_vec();
    for (li, layer) in net.layers().iter().enumerate() {
        let mut next = Vec::with_capacity(layer.out_dim());
        for r in 0..layer.out_dim() {
            let mut acc: Option<DiffScalar<'t>> = None;
            for (&w, &a) in layer.weights.row(r).iter().zip(&cur) {
                let term = a.scale(w);
                acc = Some(match acc {
                    None => term,
                    Some(s) => s.add(term)?,
                });
            }
            let z = match acc {
                Some(s) => s.offset(layer.bias[r]),
                None => tape.var(layer.bias[r]),
            };
            next.push(if li < hidden { activate(net, z) } else { z });
        }
        cur = next;
    }
    Ok(cur[0])
}

fn activate<'t>(net: &Mlp, z: DiffScalar<'t>) -> DiffScalar<'t> {
    match net.activation() {
        crate::math::ActivationKind::Softplus => z.softplus(),
    }
}

fn check_point(net: &Mlp, point: &[f64]) -> Result<()> {
    if point.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "evaluation point",
            expected: net.input_dim(),
            found: point.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_pair(dim: usize, first: usize, second: usize) -> Result<()> {
    for index in [first, second] {
        if index >= dim {
            return Err(Error::IndexOutOfRange { index, dim });
        }
    }
    if first == second {
        return Err(Error::SameVariable { index: first });
    }
    Ok(())
}

/// `∇f̂(point)`.
pub fn gradient(net: &Mlp, point: &[f64]) -> Result<Vec<f64>> {
    check_point(net, point)?;
    let tape = Tape::new();
    let xs: Vec<_> = point.iter().map(|&v| tape.var(v)).collect();
    let out = record_forward(net, &xs)?;
    tape.gradient(out, &xs)
}

/// `∂/∂x_second (∂f̂/∂x_first)` by differentiating the recorded first
/// backward sweep. Swapping the arguments gives the other nesting order.
pub fn mixed_partial_nested(net: &Mlp, point: &[f64], first: usize, second: usize) -> Result<f64> {
    check_point(net, point)?;
    check_pair(point.len(), first, second)?;
    let tape = Tape::new();
    let xs: Vec<_> = point.iter().map(|&v| tape.var(v)).collect();
    let out = record_forward(net, &xs)?;
    let d_first = tape.gradient_recorded(out, &xs[first..=first])?[0];
    Ok(tape.gradient(d_first, &xs[second..=second])?[0])
}

/// The full `d × d` matrix of second partials: one recorded sweep for the
/// gradient, then one sweep per gradient entry.
pub fn hessian(net: &Mlp, point: &[f64]) -> Result<Matrix> {
    check_point(net, point)?;
    let d = point.len();
    let tape = Tape::new();
    let xs: Vec<_> = point.iter().map(|&v| tape.var(v)).collect();
    let out = record_forward(net, &xs)?;
    let grad = tape.gradient_recorded(out, &xs)?;
    let mut rows = Vec::with_capacity(d);
    for g in grad {
        rows.push(tape.gradient(g, &xs)?);
    }
    Matrix::from_rows(&rows)
}

/// `∂MSE/∂θ` through the tape, with every parameter recorded as a variable.
/// Independent of the hand-written backpropagation in [`crate::mlp::backward`].
pub fn loss_gradient(net: &Mlp, batch: &Dataset) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    net.check_input(&batch.inputs[0])?;
    let tape = Tape::new();
    let params: Vec<(Vec<DiffScalar<'_>>, Vec<DiffScalar<'_>>)> = net
        .layers()
        .iter()
        .map(|l| {
            (
                l.weights.as_slice().iter().map(|&w| tape.var(w)).collect(),
                l.bias.iter().map(|&b| tape.var(b)).collect(),
            )
        })
        .collect();
    let hidden = net.layers().len() - 1;
    let mut total: Option<DiffScalar<'_>> = None;
    for (x, &y) in batch.inputs.iter().zip(&batch.outputs) {
        net.check_input(x)?;
        let mut cur: Vec<DiffScalar<'_>> = x.iter().map(|&v| tape.var(v)).collect();
        for (li, layer) in net.layers().iter().enumerate() {
            let (w, b) = &params[li];
            let cols = layer.in_dim();
            let mut next = Vec::with_capacity(layer.out_dim());
            for r in 0..layer.out_dim() {
                let mut z = b[r];
                for (c, &a) in cur.iter().enumerate() {
                    z = z.add(w[r * cols + c].mul(a)?)?;
                }
                next.push(if li < hidden { activate(net, z) } else { z });
            }
            cur = next;
        }
        let resid = cur[0].offset(-y);
        let sq = resid.mul(resid)?;
        total = Some(match total {
            None => sq,
            Some(t) => t.add(sq)?,
        });
    }
    let loss = total.expect("batch is non-empty").scale(1.0 / batch.len() as f64);
    let flat: Vec<DiffScalar<'_>> = params.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect();
    let mut g = tape.gradient(loss, &flat)?.into_iter();
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            let w: Vec<f64> = g.by_ref().take(l.weights.as_slice().len()).collect();
            let b: Vec<f64> = g.by_ref().take(l.bias.len()).collect();
            Layer::new(Matrix::new(l.out_dim(), l.in_dim(), w)?, b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ActivationKind;
    use crate::mlp::Layer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net_from(layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> Mlp {
        Mlp::new(
            layers
                .into_iter()
                .map(|(w, b)| Layer::new(Matrix::from_rows(&w).unwrap(), b).unwrap())
                .collect(),
            ActivationKind::Softplus,
        )
        .unwrap()
    }

    /// softplus(x1 + x2)
    fn coupled() -> Mlp {
        net_from(vec![(vec![vec![1.0, 1.0]], vec![0.0]), (vec![vec![1.0]], vec![0.0])])
    }

    /// softplus(x1) + softplus(x2)
    fn separable() -> Mlp {
        net_from(vec![
            (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]),
            (vec![vec![1.0, 1.0]], vec![0.0]),
        ])
    }

    fn fd_mixed(net: &Mlp, p: &[f64], i: usize, j: usize, h: f64) -> f64 {
        let at = |di: f64, dj: f64| {
            let mut q = p.to_vec();
            q[i] += di;
            q[j] += dj;
            net.forward(&q).unwrap()
        };
        (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
    }

    #[test]
    fn tape_basic_arithmetic() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let f = x.mul(x).unwrap().add(y.scale(4.0)).unwrap().offset(1.0);
        assert_eq!(f.value(), 9.0 - 8.0 + 1.0);
        assert_eq!(tape.gradient(f, &[x, y]).unwrap(), vec![6.0, 4.0]);
        // second derivative of x² through the recorded sweep
        let g = tape.gradient_recorded(f, &[x]).unwrap()[0];
        assert_eq!(g.value(), 6.0);
        assert_eq!(tape.gradient(g, &[x, y]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn parents_precede_children() {
        let tape = Tape::new();
        let x = tape.var(0.3);
        let y = x.softplus().mul(x).unwrap();
        let _ = tape.gradient_recorded(y, &[x]).unwrap();
        let nodes = tape.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            assert!(n.parents().all(|(p, _)| p < i));
        }
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.var(1.0);
        let b = t2.var(2.0);
        assert!(matches!(a.add(b), Err(Error::TapeMismatch)));
        assert!(matches!(a.mul(b), Err(Error::TapeMismatch)));
        assert!(matches!(t1.gradient(b, &[a]), Err(Error::TapeMismatch)));
        assert!(matches!(t1.gradient(a, &[b]), Err(Error::TapeMismatch)));
    }

    #[test]
    fn third_order_is_refused() {
        let tape = Tape::new();
        let x = tape.var(0.1);
        let y = x.softplus();
        let g = tape.gradient_recorded(y, &[x]).unwrap()[0];
        let h = tape.gradient_recorded(g, &[x]).unwrap()[0];
        assert!((h.value() - softplus_double_prime(0.1)).abs() < 1e-15);
        assert!(matches!(
            tape.gradient_recorded(h, &[x]),
            Err(Error::DerivativeOrder(_))
        ));
        // value-level third derivative is still available
        let third = tape.gradient(h, &[x]).unwrap()[0];
        assert!((third - softplus_triple_prime(0.1)).abs() < 1e-15);
    }

    #[test]
    fn backward_is_repeatable() {
        let net = Mlp::default_surrogate(2, 3);
        let tape = Tape::new();
        let xs = [tape.var(0.4), tape.var(-1.1)];
        let out = record_forward(&net, &xs).unwrap();
        let a = tape.gradient(out, &xs).unwrap();
        let b = tape.gradient(out, &xs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_closed_form() {
        assert_eq!(gradient(&coupled(), &[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn gradient_of_constant_network_is_zero() {
        let mut net = Mlp::default_surrogate(3, 1);
        for w in net.layers_mut()[0].weights.as_mut_slice() {
            *w = 0.0;
        }
        assert!(gradient(&net, &[1.0, -2.0, 0.5]).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for s in 0..20 {
            let net = Mlp::default_surrogate(3, s);
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let g = gradient(&net, &p).unwrap();
            for i in 0..3 {
                let h = 1e-5;
                let mut up = p.clone();
                let mut down = p.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (net.forward(&up).unwrap() - net.forward(&down).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-2));
            }
        }
    }

    #[test]
    fn nested_closed_forms() {
        let v = mixed_partial_nested(&coupled(), &[0.0, 0.0], 0, 1).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            assert!(mixed_partial_nested(&separable(), &p, 0, 1).unwrap().abs() < 1e-12);
            assert!(mixed_partial_nested(&separable(), &p, 1, 0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn nested_matches_second_order_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in 0..20 {
            let net = Mlp::random(2, &[5, 4], ActivationKind::Softplus, &mut rng);
            let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let ad = mixed_partial_nested(&net, &p, 0, 1).unwrap();
            let fd = fd_mixed(&net, &p, 0, 1, 1e-4);
            assert!((ad - fd).abs() < 1e-5, "seed {s}: {ad} vs {fd}");
        }
    }

    #[test]
    fn nested_rejects_bad_indices() {
        let net = Mlp::default_surrogate(2, 0);
        assert!(matches!(
            mixed_partial_nested(&net, &[0.0, 0.0], 1, 1),
            Err(Error::SameVariable { .. })
        ));
        assert!(matches!(
            mixed_partial_nested(&net, &[0.0, 0.0], 0, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            mixed_partial_nested(&net, &[0.0], 0, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hessian_properties() {
        let h = hessian(&coupled(), &[0.0, 0.0]).unwrap();
        assert!(h.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut flat = Mlp::default_surrogate(2, 4);
        for w in flat.layers_mut()[1].weights.as_mut_slice() {
            *w = 0.0;
        }
        assert!(hessian(&flat, &[0.3, 0.2])
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for s in 0..20 {
            let net = Mlp::default_surrogate(3, s);
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let h = hessian(&net, &p).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((h.get(i, j) - h.get(j, i)).abs() < 1e-10);
                    if i != j {
                        let n = mixed_partial_nested(&net, &p, i, j).unwrap();
                        assert!((h.get(i, j) - n).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn nesting_orders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for s in 0..50 {
            let net = Mlp::default_surrogate(2, 100 + s);
            let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let a = mixed_partial_nested(&net, &p, 0, 1).unwrap();
            let b = mixed_partial_nested(&net, &p, 1, 0).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_gradient_matches_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let net = Mlp::random(2, &[4, 3], ActivationKind::Softplus, &mut rng);
            let inputs: Vec<Vec<f64>> = (0..5)
                .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                .collect();
            let outputs = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let batch = Dataset::new(inputs, outputs).unwrap();
            let a = loss_gradient(&net, &batch).unwrap();
            let b = crate::mlp::backward(&net, &batch).unwrap();
            for (x, y) in a.values().zip(b.values()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
