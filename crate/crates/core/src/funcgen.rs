//! Ground-truth functions built from twelve univariate sub-functions, the
//! labelled corpus, and the training/test samples drawn from them.
//!
//! Expressions are written in a prefix notation used by corpus manifests:
//!
//! ```text
//! expr := (+ expr expr) | (* expr expr) | (sub KIND xN)
//! KIND := id | sq | cube3 | recip4 | sin | cos | sin2 | cos2 | exp | log4 | sqrtabs | cbrt
//! ```
//!
//! e.g. `(* (sub exp x0) (sub log4 x1))` is `exp(x0) · log(x1 + 4)`.
//!
//! Corpus combinatorics: two-variable functions are `g(x0) ⊕ h(x1)` for every
//! ordered pair of sub-functions and `⊕ ∈ {+, ×}`. Three-variable functions
//! combine a univariate group with a bivariate one, `g(x0) ⊕ (h(x1) ⊙ k(x2))`
//! with `⊕, ⊙ ∈ {+, ×}`. The partition is always `{x0} | {x1, ...}` and the
//! label follows the top-level combinator. Non-separable candidates whose
//! cross mixed partial vanishes everywhere on the classifiers' probe slice
//! (e.g. `g(x0)·h(x1)·sin(x2)` with `x2` held at 0) are dropped, since no
//! classifier could see their coupling.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite_diff::{Axes, TestSet};
use crate::math::Matrix;
use crate::mlp::Dataset;
use crate::util::{derive_seed, write_atomic};

pub const DEFAULT_POINTS: usize = 30;
pub const DEFAULT_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubKind {
    Identity,
    Square,
    CubeThird,
    Reciprocal,
    Sin,
    Cos,
    SinSquared,
    CosSquared,
    Exp,
    Log,
    SqrtAbs,
    Cbrt,
}

impl SubKind {
    pub const ALL: [SubKind; 12] = [
        SubKind::Identity,
        SubKind::Square,
        SubKind::CubeThird,
        SubKind::Reciprocal,
        SubKind::Sin,
        SubKind::Cos,
        SubKind::SinSquared,
        SubKind::CosSquared,
        SubKind::Exp,
        SubKind::Log,
        SubKind::SqrtAbs,
        SubKind::Cbrt,
    ];

    pub fn token(self) -> &'static str {
        match self {
            SubKind::Identity => "id",
            SubKind::Square => "sq",
            SubKind::CubeThird => "cube3",
            SubKind::Reciprocal => "recip4",
            SubKind::Sin => "sin",
            SubKind::Cos => "cos",
            SubKind::SinSquared => "sin2",
            SubKind::CosSquared => "cos2",
            SubKind::Exp => "exp",
            SubKind::Log => "log4",
            SubKind::SqrtAbs => "sqrtabs",
            SubKind::Cbrt => "cbrt",
        }
    }

    pub fn from_token(t: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == t)
    }

    /// Human-readable form with `v` substituted for the input.
    pub fn formula(self, v: &str) -> String {
        match self {
            SubKind::Identity => v.to_string(),
            SubKind::Square => format!("{v}^2"),
            SubKind::CubeThird => format!("({v}/3)^3"),
            SubKind::Reciprocal => format!("1/({v}+4)"),
            SubKind::Sin => format!("sin({v})"),
            SubKind::Cos => format!("cos({v})"),
            SubKind::SinSquared => format!("sin({v})^2"),
            SubKind::CosSquared => format!("cos({v})^2"),
            SubKind::Exp => format!("exp({v})"),
            SubKind::Log => format!("log({v}+4)"),
            SubKind::SqrtAbs => format!("sqrt(|{v}|)"),
            SubKind::Cbrt => format!("{v}^(1/3)"),
        }
    }

    fn value(self, n: f64) -> f64 {
        match self {
            SubKind::Identity => n,
            SubKind::Square => n * n,
            SubKind::CubeThird => (n / 3.0).powi(3),
            SubKind::Reciprocal => 1.0 / (n + 4.0),
            SubKind::Sin => n.sin(),
            SubKind::Cos => n.cos(),
            SubKind::SinSquared => n.sin().powi(2),
            SubKind::CosSquared => n.cos().powi(2),
            SubKind::Exp => n.exp(),
            SubKind::Log => (n + 4.0).ln(),
            SubKind::SqrtAbs => n.abs().sqrt(),
            SubKind::Cbrt => n.cbrt(),
        }
    }

    fn first(self, n: f64) -> f64 {
        match self {
            SubKind::Identity => 1.0,
            SubKind::Square => 2.0 * n,
            SubKind::CubeThird => n * n / 9.0,
            SubKind::Reciprocal => -1.0 / (n + 4.0).powi(2),
            SubKind::Sin => n.cos(),
            SubKind::Cos => -n.sin(),
            SubKind::SinSquared => (2.0 * n).sin(),
            SubKind::CosSquared => -(2.0 * n).sin(),
            SubKind::Exp => n.exp(),
            SubKind::Log => 1.0 / (n + 4.0),
            SubKind::SqrtAbs => n.signum() / (2.0 * n.abs().sqrt()),
            SubKind::Cbrt => 1.0 / (3.0 * n.cbrt().powi(2)),
        }
    }

    fn second(self, n: f64) -> f64 {
        match self {
            SubKind::Identity => 0.0,
            SubKind::Square => 2.0,
            SubKind::CubeThird => 2.0 * n / 9.0,
            SubKind::Reciprocal => 2.0 / (n + 4.0).powi(3),
            SubKind::Sin => -n.sin(),
            SubKind::Cos => -n.cos(),
            SubKind::SinSquared => 2.0 * (2.0 * n).cos(),
            SubKind::CosSquared => -2.0 * (2.0 * n).cos(),
            SubKind::Exp => n.exp(),
            SubKind::Log => -1.0 / (n + 4.0).powi(2),
            SubKind::SqrtAbs => -1.0 / (4.0 * n.abs().powf(1.5)),
            SubKind::Cbrt => -2.0 / (9.0 * n.cbrt().powi(5)),
        }
    }
}

/// Closed-form sub-function value; non-finite results (e.g. `1/(n+4)` at
/// `n = -4`) are errors.
pub fn eval_subfunction(kind: SubKind, n: f64) -> Result<f64> {
    finite(kind.value(n), || format!("{} at {n}", kind.formula("n")))
}

fn finite(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Sub(SubKind, usize),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn sub(kind: SubKind, var: usize) -> Self {
        Expr::Sub(kind, var)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Add(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(a: Expr, b: Expr) -> Self {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn variables(&self) -> Vec<usize> {
        let mut v = Vec::new();
        self.collect_vars(&mut v);
        v.sort_unstable();
        v.dedup();
        v
    }

    fn collect_vars(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Sub(_, v) => out.push(*v),
            Expr::Add(a, b) | Expr::Mul(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Sub(k, v) => k.value(x[*v]),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
        }
    }

    /// `∂e/∂x_i`.
    pub fn d(&self, x: &[f64], i: usize) -> f64 {
        match self {
            Expr::Sub(k, v) => {
                if *v == i {
                    k.first(x[i])
                } else {
                    0.0
                }
            }
            Expr::Add(a, b) => a.d(x, i) + b.d(x, i),
            Expr::Mul(a, b) => a.d(x, i) * b.eval(x) + a.eval(x) * b.d(x, i),
        }
    }

    /// `∂²e/∂x_i∂x_j`.
    pub fn d2(&self, x: &[f64], i: usize, j: usize) -> f64 {
        match self {
            Expr::Sub(k, v) => {
                if *v == i && *v == j {
                    k.second(x[i])
                } else {
                    0.0
                }
            }
            Expr::Add(a, b) => a.d2(x, i, j) + b.d2(x, i, j),
            Expr::Mul(a, b) => {
                a.d2(x, i, j) * b.eval(x) + a.d(x, i) * b.d(x, j) + a.d(x, j) * b.d(x, i) + a.eval(x) * b.d2(x, i, j)
            }
        }
    }

    /// True when the expression is a sum of terms that each depend on one
    /// side of the partition only.
    pub fn additively_separable(&self, partition: &Partition) -> bool {
        match self {
            Expr::Add(a, b) => a.additively_separable(partition) && b.additively_separable(partition),
            other => partition.within_one_group(&other.variables()),
        }
    }

    pub fn to_prefix(&self) -> String {
        match self {
            Expr::Sub(k, v) => format!("(sub {} x{v})", k.token()),
            Expr::Add(a, b) => format!("(+ {} {})", a.to_prefix(), b.to_prefix()),
            Expr::Mul(a, b) => format!("(* {} {})", a.to_prefix(), b.to_prefix()),
        }
    }

    pub fn parse(text: &str) -> Result<Expr> {
        let spaced = text.replace('(', " ( ").replace(')', " ) ");
        let tokens: Vec<&str> = spaced.split_whitespace().collect();
        let mut pos = 0;
        let e = parse_expr(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::Format(format!("trailing tokens in expression {text:?}")));
        }
        Ok(e)
    }
}

fn parse_expr(t: &[&str], pos: &mut usize) -> Result<Expr> {
    let mut next = || -> Result<&str> {
        let tok = t
            .get(*pos)
            .copied()
            .ok_or_else(|| Error::Format("unexpected end of expression".into()))?;
        *pos += 1;
        Ok(tok)
    };
    let expect = |got: &str, want: &str| {
        if got == want {
            Ok(())
        } else {
            Err(Error::Format(format!("expected {want:?}, found {got:?}")))
        }
    };
    expect(next()?, "(")?;
    let head = next()?;
    let e = match head {
        "+" | "*" => {
            let a = parse_expr(t, pos)?;
            let b = parse_expr(t, pos)?;
            if head == "+" {
                Expr::add(a, b)
            } else {
                Expr::mul(a, b)
            }
        }
        "sub" => {
            let mut next = || -> Result<&str> {
                let tok = t
                    .get(*pos)
                    .copied()
                    .ok_or_else(|| Error::Format("unexpected end of expression".into()))?;
                *pos += 1;
                Ok(tok)
            };
            let kind_tok = next()?;
            let kind = SubKind::from_token(kind_tok)
                .ok_or_else(|| Error::Format(format!("unknown sub-function {kind_tok:?}")))?;
            let var_tok = next()?;
            let var = var_tok
                .strip_prefix('x')
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad variable {var_tok:?}")))?;
            Expr::sub(kind, var)
        }
        other => return Err(Error::Format(format!("unknown combinator {other:?}"))),
    };
    let close = t
        .get(*pos)
        .copied()
        .ok_or_else(|| Error::Format("missing ')'".into()))?;
    *pos += 1;
    expect(close, ")")?;
    Ok(e)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Sub(k, v) => f.write_str(&k.formula(&format!("x{v}"))),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
        }
    }
}

/// Disjoint variable groups `x⃗ | y⃗`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

impl Partition {
    pub fn within_one_group(&self, vars: &[usize]) -> bool {
        vars.iter().all(|v| self.x.contains(v)) || vars.iter().all(|v| self.y.contains(v))
    }

    /// The classifiers' probe pair: the first element of each group.
    pub fn axes(&self) -> Axes {
        Axes::new(self.x[0], self.y[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Separable,
    NonSeparable,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Separable => "separable",
            Label::NonSeparable => "non_separable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "separable" => Some(Label::Separable),
            "non_separable" => Some(Label::NonSeparable),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicFunction {
    pub id: String,
    pub arity: usize,
    pub expr: Expr,
    pub partition: Partition,
    pub label: Label,
    pub seed: u64,
}

impl SymbolicFunction {
    /// Builds a function and derives its label from the expression.
    pub fn new(id: impl Into<String>, arity: usize, expr: Expr, partition: Partition, seed: u64) -> Result<Self> {
        let vars = expr.variables();
        if vars.iter().any(|&v| v >= arity) {
            return Err(Error::InvalidConfig(format!(
                "expression {expr} uses a variable beyond arity {arity}"
            )));
        }
        let mut all: Vec<usize> = partition.x.iter().chain(&partition.y).copied().collect();
        all.sort_unstable();
        if partition.x.is_empty() || partition.y.is_empty() || all != (0..arity).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig(format!(
                "partition {partition:?} does not split {arity} variables into two groups"
            )));
        }
        let label = if expr.additively_separable(&partition) {
            Label::Separable
        } else {
            Label::NonSeparable
        };
        Ok(Self {
            id: id.into(),
            arity,
            expr,
            partition,
            label,
            seed,
        })
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.arity {
            return Err(Error::DimensionMismatch {
                context: "symbolic function input",
                expected: self.arity,
                found: input.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        finite(self.expr.eval(input), || format!("{} at {input:?}", self.id))
    }

    /// Analytic `∂/∂x_second (∂f/∂x_first)`.
    pub fn mixed_partial(&self, input: &[f64], first: usize, second: usize) -> Result<f64> {
        self.check_input(input)?;
        crate::autodiff::check_pair(self.arity, first, second)?;
        finite(self.expr.d2(input, first, second), || {
            format!("mixed partial of {} at {input:?}", self.id)
        })
    }

    /// Every analytic second partial. Entries may be infinite or NaN where a
    /// sub-function is not twice differentiable (e.g. `sqrt|x|` at 0).
    pub fn hessian(&self, input: &[f64]) -> Result<Matrix> {
        self.check_input(input)?;
        let d = self.arity;
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, self.expr.d2(input, i, j));
            }
        }
        Ok(m)
    }
}

pub fn eval_symbolic(f: &SymbolicFunction, input: &[f64]) -> Result<f64> {
    f.eval(input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub arities: Vec<usize>,
    /// `None` keeps every candidate (subject to balance).
    pub max_functions: Option<usize>,
    pub balance: bool,
    /// Select additive/multiplicative twins built from the same sub-functions.
    pub paired: bool,
    pub rng_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            arities: vec![2, 3],
            max_functions: None,
            balance: true,
            paired: true,
            rng_seed: 0,
        }
    }
}

/// A separable candidate and (when it exists) its non-separable twin.
struct Twin {
    arity: usize,
    separable: Option<(Expr, Partition)>,
    non_separable: Option<(Expr, Partition)>,
}

fn two_var_twins() -> Vec<Twin> {
    let p = Partition { x: vec![0], y: vec![1] };
    let mut out = Vec::with_capacity(144);
    for g in SubKind::ALL {
        for h in SubKind::ALL {
            let (a, b) = (Expr::sub(g, 0), Expr::sub(h, 1));
            out.push(Twin {
                arity: 2,
                separable: Some((Expr::add(a.clone(), b.clone()), p.clone())),
                non_separable: Some((Expr::mul(a, b), p.clone())),
            });
        }
    }
    out
}

fn three_var_twins() -> Vec<Twin> {
    let p = Partition {
        x: vec![0],
        y: vec![1, 2],
    };
    let mut out = Vec::with_capacity(2 * 1728);
    for inner_mul in [false, true] {
        for g in SubKind::ALL {
            for h in SubKind::ALL {
                for k in SubKind::ALL {
                    let (a, b, c) = (Expr::sub(g, 0), Expr::sub(h, 1), Expr::sub(k, 2));
                    let inner = if inner_mul { Expr::mul(b, c) } else { Expr::add(b, c) };
                    out.push(Twin {
                        arity: 3,
                        separable: Some((Expr::add(a.clone(), inner.clone()), p.clone())),
                        non_separable: Some((Expr::mul(a, inner), p.clone())),
                    });
                }
            }
        }
    }
    out
}

/// Whether the cross mixed partial is nonzero somewhere on the default grid
/// slice the classifiers probe.
fn detectable(expr: &Expr, partition: &Partition, arity: usize) -> bool {
    let ts = build_grid_testset(arity, DEFAULT_POINTS, DEFAULT_RANGE);
    let held = ts.medians();
    let axes = partition.axes();
    ts.points.iter().any(|p| {
        let mut q = held.clone();
        q[axes.first] = p[axes.first];
        q[axes.second] = p[axes.second];
        let v = expr.d2(&q, axes.first, axes.second);
        v.is_finite() && v.abs() > 1e-9
    })
}

/// Deterministic, seeded corpus generation.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SymbolicFunction>> {
    if cfg.arities.is_empty() || cfg.arities.iter().any(|a| !(2..=3).contains(a)) {
        return Err(Error::InvalidConfig(format!(
            "arities must be a non-empty subset of {{2, 3}}, got {:?}",
            cfg.arities
        )));
    }
    let mut arities = cfg.arities.clone();
    arities.sort_unstable();
    arities.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    // Per-arity candidate pools, each shuffled once.
    let mut pools: Vec<Vec<Twin>> = arities
        .iter()
        .map(|&a| {
            let mut twins = if a == 2 { two_var_twins() } else { three_var_twins() };
            for t in &mut twins {
                let undetectable = t
                    .non_separable
                    .as_ref()
                    .is_some_and(|(e, p)| !detectable(e, p, t.arity));
                if undetectable {
                    t.non_separable = None;
                }
            }
            twins.shuffle(&mut rng);
            twins
        })
        .collect();

    let mut chosen: Vec<(usize, Expr, Partition)> = Vec::new();
    if cfg.paired {
        if !cfg.balance {
            return Err(Error::InvalidConfig("paired selection implies balance".into()));
        }
        for pool in &mut pools {
            pool.retain(|t| t.separable.is_some() && t.non_separable.is_some());
        }
        let available: usize = pools.iter().map(Vec::len).sum();
        let n_pairs = match cfg.max_functions {
            None => available,
            Some(m) if m % 2 == 1 => return Err(Error::UnsatisfiableBalance(format!("{m} is odd"))),
            Some(m) if m / 2 > available => {
                return Err(Error::UnsatisfiableBalance(format!(
                    "{m} functions requested but only {available} twin pairs exist"
                )))
            }
            Some(m) => m / 2,
        };
        for twin in round_robin(pools, n_pairs) {
            let arity = twin.arity;
            for (e, p) in [twin.separable, twin.non_separable].into_iter().flatten() {
                chosen.push((arity, e, p));
            }
        }
    } else {
        let mut sep: Vec<Vec<(usize, Expr, Partition)>> = Vec::new();
        let mut non: Vec<Vec<(usize, Expr, Partition)>> = Vec::new();
        for pool in pools {
            let (mut s, mut n) = (Vec::new(), Vec::new());
            for t in pool {
                if let Some((e, p)) = t.separable {
                    s.push((t.arity, e, p));
                }
                if let Some((e, p)) = t.non_separable {
                    n.push((t.arity, e, p));
                }
            }
            sep.push(s);
            non.push(n);
        }
        let n_sep: usize = sep.iter().map(Vec::len).sum();
        let n_non: usize = non.iter().map(Vec::len).sum();
        if cfg.balance {
            let per_class = match cfg.max_functions {
                None => n_sep.min(n_non),
                Some(m) if m % 2 == 1 => return Err(Error::UnsatisfiableBalance(format!("{m} is odd"))),
                Some(m) if m / 2 > n_sep.min(n_non) => {
                    return Err(Error::UnsatisfiableBalance(format!(
                        "{m} functions requested; smaller class has {}",
                        n_sep.min(n_non)
                    )))
                }
                Some(m) => m / 2,
            };
            chosen.extend(round_robin(sep, per_class));
            chosen.extend(round_robin(non, per_class));
        } else {
            let mut all: Vec<_> = sep.into_iter().chain(non).flatten().collect();
            all.shuffle(&mut rng);
            all.truncate(cfg.max_functions.unwrap_or(usize::MAX));
            chosen = all;
        }
    }

    chosen
        .into_iter()
        .enumerate()
        .map(|(i, (arity, expr, partition))| {
            SymbolicFunction::new(
                format!("f{i:05}"),
                arity,
                expr,
                partition,
                derive_seed(cfg.rng_seed, i as u64),
            )
        })
        .collect()
}

/// Takes `n` items cycling over the pools so every arity is represented.
fn round_robin<T>(pools: Vec<Vec<T>>, n: usize) -> Vec<T> {
    let mut iters: Vec<_> = pools.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let before = out.len();
        for it in &mut iters {
            if out.len() == n {
                break;
            }
            if let Some(x) = it.next() {
                out.push(x);
            }
        }
        if out.len() == before {
            break;
        }
    }
    out
}

/// How training inputs are assembled from the random draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingLayout {
    /// `points` tuples, every coordinate drawn independently.
    Tuples,
    /// `points` values drawn per variable, combined as a Cartesian product
    /// (`points^arity` tuples).
    #[default]
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub points: usize,
    pub low: f64,
    pub high: f64,
    pub layout: TrainingLayout,
    /// Size of the grid test set the classifiers are scored on.
    pub test_points: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            points: DEFAULT_POINTS,
            low: DEFAULT_RANGE.0,
            high: DEFAULT_RANGE.1,
            layout: TrainingLayout::Product,
            test_points: DEFAULT_POINTS,
        }
    }
}

/// Training inputs with every coordinate uniform on `[low, high]`, laid out
/// per `cfg.layout`, and their exact outputs.
pub fn sample_training_data(f: &SymbolicFunction, cfg: &SamplingConfig, seed: u64) -> Result<Dataset> {
    if cfg.points == 0 || cfg.low.partial_cmp(&cfg.high) != Some(std::cmp::Ordering::Less) {
        return Err(Error::InvalidConfig(format!("bad sampling config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = match cfg.layout {
        TrainingLayout::Tuples => (0..cfg.points)
            .map(|_| (0..f.arity).map(|_| rng.gen_range(cfg.low..=cfg.high)).collect())
            .collect(),
        TrainingLayout::Product => {
            let axes: Vec<Vec<f64>> = (0..f.arity)
                .map(|_| (0..cfg.points).map(|_| rng.gen_range(cfg.low..=cfg.high)).collect())
                .collect();
            let mut tuples = vec![Vec::with_capacity(f.arity)];
            for axis in &axes {
                tuples = tuples
                    .into_iter()
                    .flat_map(|t| {
                        axis.iter().map(move |&v| {
                            let mut t = t.clone();
                            t.push(v);
                            t
                        })
                    })
                    .collect();
            }
            tuples
        }
    };
    let outputs = inputs.iter().map(|x| f.eval(x)).collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, outputs)
}

/// Index-aligned grid: tuple `t` has every coordinate equal to the `t`-th of
/// `points` evenly spaced values on `[low, high]`.
pub fn build_grid_testset(arity: usize, points: usize, range: (f64, f64)) -> TestSet {
    let (lo, hi) = range;
    let denom = points.saturating_sub(1).max(1) as f64;
    let pts = (0..points)
        .map(|t| vec![lo + (hi - lo) * t as f64 / denom; arity])
        .collect();
    TestSet { points: pts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub arity: usize,
    pub expression: String,
    pub partition: Partition,
    pub label: Label,
    pub seed: u64,
}

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
const GRAMMAR: &str = "expr := (+ expr expr) | (* expr expr) | (sub KIND xN); \
KIND := id | sq | cube3 | recip4 | sin | cos | sin2 | cos2 | exp | log4 | sqrtabs | cbrt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub grammar: String,
    pub corpus: CorpusConfig,
    pub functions: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(corpus: CorpusConfig, functions: &[SymbolicFunction]) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            grammar: GRAMMAR.to_string(),
            corpus,
            functions: functions
                .iter()
                .map(|f| ManifestEntry {
                    id: f.id.clone(),
                    arity: f.arity,
                    expression: f.expr.to_prefix(),
                    partition: f.partition.clone(),
                    label: f.label,
                    seed: f.seed,
                })
                .collect(),
        }
    }

    /// Parses every entry and checks its stored label against the expression.
    pub fn functions(&self) -> Result<Vec<SymbolicFunction>> {
        self.functions
            .iter()
            .map(|e| {
                let f = SymbolicFunction::new(
                    e.id.clone(),
                    e.arity,
                    Expr::parse(&e.expression)?,
                    e.partition.clone(),
                    e.seed,
                )?;
                if f.label != e.label {
                    return Err(Error::Format(format!(
                        "{}: stored label {} disagrees with expression",
                        e.id, e.label
                    )));
                }
                Ok(f)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialisation cannot fail");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format(format!("manifest format version {}", m.format_version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(expr: &str) -> SymbolicFunction {
        SymbolicFunction::new(
            "t",
            2,
            Expr::parse(expr).unwrap(),
            Partition { x: vec![0], y: vec![1] },
            0,
        )
        .unwrap()
    }

    #[test]
    fn subfunction_values() {
        assert_eq!(eval_subfunction(SubKind::Reciprocal, 0.0).unwrap(), 0.25);
        assert_eq!(eval_subfunction(SubKind::SqrtAbs, -9.0).unwrap(), 3.0);
        assert_eq!(eval_subfunction(SubKind::CubeThird, 3.0).unwrap(), 1.0);
        assert_eq!(eval_subfunction(SubKind::Cbrt, -8.0).unwrap(), -2.0);
        assert!(matches!(
            eval_subfunction(SubKind::Reciprocal, -4.0),
            Err(Error::NonFinite(_))
        ));
        assert!(eval_subfunction(SubKind::Log, -5.0).is_err());
    }

    #[test]
    fn subfunctions_finite_on_range() {
        for k in SubKind::ALL {
            for i in 0..=600 {
                let n = -3.0 + i as f64 * 0.01;
                assert!(eval_subfunction(k, n).is_ok(), "{k:?} at {n}");
            }
        }
    }

    #[test]
    fn subfunction_derivatives_match_finite_differences() {
        let h = 1e-5;
        for k in SubKind::ALL {
            for i in 0..50 {
                let n = -2.95 + i as f64 * 0.121;
                if n.abs() < 0.1 {
                    continue; // sqrt/cbrt kinks
                }
                let fd1 = (k.value(n + h) - k.value(n - h)) / (2.0 * h);
                let fd2 = (k.first(n + h) - k.first(n - h)) / (2.0 * h);
                assert!((fd1 - k.first(n)).abs() < 1e-6 * k.first(n).abs().max(1.0), "{k:?}");
                assert!((fd2 - k.second(n)).abs() < 1e-6 * k.second(n).abs().max(1.0), "{k:?}");
            }
        }
    }

    #[test]
    fn symbolic_values_and_mixed_partials() {
        let sum = two("(+ (sub id x0) (sub id x1))");
        assert_eq!(sum.eval(&[1.0, 2.0]).unwrap(), 3.0);
        let prod = two("(* (sub id x0) (sub id x1))");
        for p in [[0.0, 0.0], [1.5, -2.0], [-3.0, 3.0]] {
            assert_eq!(prod.mixed_partial(&p, 0, 1).unwrap(), 1.0);
        }
        let sc = two("(* (sub sin x0) (sub cos x1))");
        assert_eq!(sc.mixed_partial(&[0.0, 0.0], 0, 1).unwrap(), 0.0);
        assert_eq!(sc.label, Label::NonSeparable);
        assert!(sum.eval(&[1.0]).is_err());
    }

    #[test]
    fn symbolic_mixed_partial_matches_finite_difference() {
        let f = two("(* (sub exp x0) (sub log4 x1))");
        let h = 1e-4;
        let p = [0.7, -1.3];
        let at = |a: f64, b: f64| f.eval(&[p[0] + a, p[1] + b]).unwrap();
        let fd = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
        assert!((fd - f.mixed_partial(&p, 0, 1).unwrap()).abs() < 1e-6);
        let hs = f.hessian(&p).unwrap();
        assert_eq!(hs.get(0, 1), hs.get(1, 0));
    }

    #[test]
    fn prefix_round_trip_and_errors() {
        let e = Expr::mul(
            Expr::sub(SubKind::Exp, 0),
            Expr::add(Expr::sub(SubKind::Log, 1), Expr::sub(SubKind::Cbrt, 2)),
        );
        assert_eq!(Expr::parse(&e.to_prefix()).unwrap(), e);
        for bad in [
            "",
            "(sub foo x0)",
            "(+ (sub id x0))",
            "(sub id y0)",
            "(sub id x0) x",
            "(^ (sub id x0) (sub id x1))",
        ] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn labels_follow_top_combinator() {
        let p3 = Partition {
            x: vec![0],
            y: vec![1, 2],
        };
        let sep = Expr::parse("(+ (sub sin x0) (* (sub id x1) (sub exp x2)))").unwrap();
        assert!(sep.additively_separable(&p3));
        let non = Expr::parse("(* (sub sin x0) (+ (sub id x1) (sub exp x2)))").unwrap();
        assert!(!non.additively_separable(&p3));
        assert!(SymbolicFunction::new("bad", 2, sep, p3, 0).is_err());
    }

    #[test]
    fn two_variable_enumeration_counts() {
        let corpus = generate_corpus(&CorpusConfig {
            arities: vec![2],
            ..Default::default()
        })
        .unwrap();
        let sep = corpus.iter().filter(|f| f.label == Label::Separable).count();
        assert_eq!((sep, corpus.len() - sep), (144, 144));
        let has = |s: &str, l: Label| {
            let e = Expr::parse(s).unwrap();
            corpus.iter().any(|f| f.expr == e && f.label == l)
        };
        assert!(has("(+ (sub sin x0) (sub sq x1))", Label::Separable));
        assert!(has("(* (sub exp x0) (sub log4 x1))", Label::NonSeparable));
    }

    #[test]
    fn corpus_is_balanced_deterministic_and_mixed() {
        let cfg = CorpusConfig {
            arities: vec![2, 3],
            max_functions: Some(40),
            rng_seed: 9,
            ..Default::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert_eq!(a.iter().filter(|f| f.label == Label::Separable).count(), 20);
        assert!(a.iter().any(|f| f.arity == 2) && a.iter().any(|f| f.arity == 3));

        let unpaired = generate_corpus(&CorpusConfig {
            paired: false,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(unpaired.iter().filter(|f| f.label == Label::Separable).count(), 20);
    }

    #[test]
    fn odd_balanced_request_fails() {
        let cfg = CorpusConfig {
            arities: vec![2],
            max_functions: Some(7),
            ..Default::default()
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::UnsatisfiableBalance(_))));
        let too_many = CorpusConfig {
            arities: vec![2],
            max_functions: Some(1000),
            ..Default::default()
        };
        assert!(matches!(
            generate_corpus(&too_many),
            Err(Error::UnsatisfiableBalance(_))
        ));
    }

    #[test]
    fn label_soundness_on_full_corpus() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for f in &corpus {
            let axes = f.partition.axes();
            let pts: Vec<Vec<f64>> = (0..100)
                .map(|_| (0..f.arity).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let vals: Vec<f64> = pts.iter().map(|p| f.expr.d2(p, axes.first, axes.second)).collect();
            match f.label {
                Label::Separable => assert!(vals.iter().all(|v| v.abs() < 1e-12), "{}", f.expr),
                Label::NonSeparable => assert!(vals.iter().any(|v| v.abs() > 1e-6), "{}", f.expr),
            }
        }
    }

    #[test]
    fn training_samples_respect_contract() {
        let f = two("(* (sub exp x0) (sub cos x1))");
        let cfg = SamplingConfig {
            layout: TrainingLayout::Tuples,
            ..Default::default()
        };
        let a = sample_training_data(&f, &cfg, 5).unwrap();
        let b = sample_training_data(&f, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert!(a.inputs.iter().flatten().all(|v| (-3.0..=3.0).contains(v)));
        for (x, y) in a.inputs.iter().zip(&a.outputs) {
            assert_eq!(f.eval(x).unwrap(), *y);
        }
    }

    #[test]
    fn product_layout_crosses_per_variable_draws() {
        let f = two("(+ (sub id x0) (sub id x1))");
        let cfg = SamplingConfig {
            points: 5,
            layout: TrainingLayout::Product,
            ..Default::default()
        };
        let d = sample_training_data(&f, &cfg, 2).unwrap();
        assert_eq!(d.len(), 25);
        let mut xs: Vec<f64> = d.inputs.iter().map(|p| p[0]).collect();
        let mut ys: Vec<f64> = d.inputs.iter().map(|p| p[1]).collect();
        for v in [&mut xs, &mut ys] {
            v.sort_by(f64::total_cmp);
            v.dedup();
            assert_eq!(v.len(), 5);
        }
    }

    #[test]
    fn grid_testset_shape() {
        for arity in [2, 3] {
            let ts = build_grid_testset(arity, 30, DEFAULT_RANGE);
            assert_eq!(ts.len(), 30);
            assert_eq!(ts.points[0], vec![-3.0; arity]);
            assert_eq!(ts.points[29], vec![3.0; arity]);
            for w in ts.points.windows(2) {
                assert!((w[1][0] - w[0][0] - 6.0 / 29.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = CorpusConfig {
            max_functions: Some(10),
            rng_seed: 3,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let m = Manifest::new(cfg, &corpus);
        let back: Manifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back.functions().unwrap(), corpus);
    }
}
