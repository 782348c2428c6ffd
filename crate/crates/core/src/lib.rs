//! Additive separability testing of neural-network surrogates.
//!
//! A surrogate [`mlp::Mlp`] is trained on samples of an unknown function
//! `f(x⃗, y⃗)`. The function is additively separable, `g(x⃗) + h(y⃗)`, exactly
//! when its cross mixed partial derivative vanishes, so each classifier
//! estimates `∂²f̂/∂x₁∂y₁` on a grid of test points, averages its magnitude and
//! compares the result against a threshold. Eight estimators are provided:
//!
//! | method | estimator |
//! |---|---|
//! | 1 | corner differences over all sample pairs, unit denominator |
//! | 2 | corner differences over all sample pairs, divided by `h·k` |
//! | 3 | corner differences against the median sample, unit denominator |
//! | 4 | corner differences against the median sample, divided by `h·k` |
//! | 5 | nested reverse-mode AD, `x` first then `y` |
//! | 6 | nested reverse-mode AD, `y` first then `x` |
//! | 7 | full Hessian by reverse-over-reverse AD |
//! | 8 | derivative network built from the surrogate's weights |

pub mod autodiff;
pub mod classify;
pub mod derivative_net;
pub mod error;
pub mod evaluate;
pub mod finite_diff;
pub mod funcgen;
pub mod hexfloat;
pub mod math;
pub mod mlp;
pub mod pipeline;
pub mod selftest;
pub mod util;

pub use error::{Error, Result};
