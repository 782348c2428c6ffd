//! A second network, sharing the surrogate's weights, whose forward pass
//! evaluates the surrogate's mixed partial `∂²f̂/∂x_i∂x_j` directly.
//!
//! Each unit carries the quadruple `(u, ∂u/∂x_i, ∂u/∂x_j, ∂²u/∂x_i∂x_j)`.
//! Affine layers map all four components linearly (the bias only touches
//! `u`). A softplus unit with pre-activation quadruple `(z, z_i, z_j, z_ij)`
//! outputs
//!
//! ```text
//! u    = σ(z)
//! u_i  = σ'(z) z_i
//! u_j  = σ'(z) z_j
//! u_ij = σ''(z) z_i z_j + σ'(z) z_ij
//! ```
//!
//! For one hidden layer feeding a linear read-out this is exactly the
//! two-term-per-unit sum `Σ n σ''(V) VW_i VW_j + n σ'(V) VW''`.

use crate::autodiff::check_pair;
use crate::error::{Error, Result};
use crate::math::{dot, ActivationKind};
use crate::mlp::Mlp;

#[derive(Debug, Clone, Copy)]
pub struct DerivativeNet<'a> {
    source: &'a Mlp,
    first: usize,
    second: usize,
}

/// Wires a derivative network onto `net` for the variable pair `(i, j)`.
pub fn build_derivative_network(net: &Mlp, i: usize, j: usize) -> Result<DerivativeNet<'_>> {
    check_pair(net.input_dim(), i, j)?;
    match net.activation() {
        ActivationKind::Softplus => {}
        #[allow(unreachable_patterns)]
        other => return Err(Error::UnsupportedActivation(other.to_string())),
    }
    Ok(DerivativeNet {
        source: net,
        first: i,
        second: j,
    })
}

impl<'a> DerivativeNet<'a> {
    pub fn source(&self) -> &'a Mlp {
        self.source
    }

    pub fn variables(&self) -> (usize, usize) {
        (self.first, self.second)
    }

    pub fn eval_mixed_partial(&self, point: &[f64]) -> Result<f64> {
        let net = self.source;
        net.check_input(point)?;
        let act = net.activation();
        let d = point.len();
        let mut u = point.to_vec();
        let mut ui = vec![0.0; d];
        let mut uj = vec![0.0; d];
        let mut uij = vec![0.0; d];
        ui[self.first] = 1.0;
        uj[self.second] = 1.0;

        let hidden = net.layers().len() - 1;
        for (li, layer) in net.layers().iter().enumerate() {
            let out = layer.out_dim();
            let (mut z, mut zi, mut zj, mut zij) = (
                Vec::with_capacity(out),
                Vec::with_capacity(out),
                Vec::with_capacity(out),
                Vec::with_capacity(out),
            );
            for r in 0..out {
                let w = layer.weights.row(r);
                z.push(dot(w, &u) + layer.bias[r]);
                zi.push(dot(w, &ui));
                zj.push(dot(w, &uj));
                zij.push(dot(w, &uij));
            }
            if li < hidden {
                for k in 0..out {
                    let s1 = act.first(z[k]);
                    let s2 = act.second(z[k]);
                    zij[k] = s2 * zi[k] * zj[k] + s1 * zij[k];
                    zi[k] *= s1;
                    zj[k] *= s1;
                    z[k] = act.value(z[k]);
                }
            }
            (u, ui, uj, uij) = (z, zi, zj, zij);
        }
        Ok(uij[0])
    }
}
