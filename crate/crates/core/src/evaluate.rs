//! Scoring of corpus functions by the eight classifiers.
//!
//! A score is the mean absolute estimate of `∂²f/∂x_a∂x_b` over the test
//! set, where `(a, b)` are the first variables of the two groups. All other
//! coordinates are held at the test-set medians, for the derivative methods
//! as well as the corner methods, so every method probes the same slice.

use std::cell::Cell;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{hessian, mixed_partial_nested};
use crate::classify::{summarise, MethodSummary, ScoreRecord};
use crate::derivative_net::build_derivative_network;
use crate::error::{Error, Result};
use crate::finite_diff::{score, Axes, FdMode, TestSet};
use crate::funcgen::{build_grid_testset, SamplingConfig, SymbolicFunction};
use crate::mlp::Mlp;

pub const ALL_METHODS: [u8; 8] = [1, 2, 3, 4, 5, 6, 7, 8];

/// Parses `"1,2,5-8"` style lists; `"all"` selects every method.
pub fn parse_methods(text: &str) -> Result<Vec<u8>> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("all") {
        return Ok(ALL_METHODS.to_vec());
    }
    let bad = || Error::InvalidConfig(format!("bad method list {text:?}; expected e.g. 1,3,5-8"));
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse::<u8>(), b.trim().parse::<u8>()),
            None => (part.parse::<u8>(), part.parse::<u8>()),
        };
        let (lo, hi) = (lo.map_err(|_| bad())?, hi.map_err(|_| bad())?);
        if lo == 0 || hi > 8 || lo > hi {
            return Err(bad());
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn method_name(method: u8) -> &'static str {
    match method {
        1 => "corner, all pairs, unit step",
        2 => "corner, all pairs, true step",
        3 => "corner, median anchor, unit step",
        4 => "corner, median anchor, true step",
        5 => "nested AD, x then y",
        6 => "nested AD, y then x",
        7 => "full Hessian",
        8 => "derivative network",
        _ => "unknown",
    }
}

/// What a classifier differentiates: a trained surrogate or the analytic
/// ground truth.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Surrogate(&'a Mlp),
    Oracle(&'a SymbolicFunction),
}

impl Target<'_> {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            Target::Surrogate(n) => n.forward(x),
            Target::Oracle(f) => f.eval(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub mean_abs: f64,
    pub mean_signed: f64,
    /// Corner evaluations for methods 1-4, derivative evaluations for 5-8.
    pub evaluations: usize,
}

/// `p` with every coordinate outside `axes` replaced by its held value.
pub fn slice_point(p: &[f64], held: &[f64], axes: Axes) -> Vec<f64> {
    let mut q = held.to_vec();
    q[axes.first] = p[axes.first];
    q[axes.second] = p[axes.second];
    q
}

/// Per-point mixed partials for the derivative methods 5-8.
pub fn pointwise_mixed_partials(target: Target<'_>, testset: &TestSet, axes: Axes, method: u8) -> Result<Vec<f64>> {
    let held = testset.medians();
    let points = testset.points.iter().map(|p| slice_point(p, &held, axes));
    let (a, b) = (axes.first, axes.second);
    match (method, target) {
        (5, Target::Surrogate(n)) => points.map(|q| mixed_partial_nested(n, &q, a, b)).collect(),
        (6, Target::Surrogate(n)) => points.map(|q| mixed_partial_nested(n, &q, b, a)).collect(),
        (7, Target::Surrogate(n)) => points.map(|q| hessian(n, &q).map(|h| h.get(a, b))).collect(),
        (8, Target::Surrogate(n)) => {
            let dn = build_derivative_network(n, a, b)?;
            points.map(|q| dn.eval_mixed_partial(&q)).collect()
        }
        (5 | 8, Target::Oracle(f)) => points.map(|q| f.mixed_partial(&q, a, b)).collect(),
        (6, Target::Oracle(f)) => points.map(|q| f.mixed_partial(&q, b, a)).collect(),
        (7, Target::Oracle(f)) => points
            .map(|q| {
                let v = f.hessian(&q)?.get(a, b);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("hessian entry of {} at {q:?}", f.id)))
                }
            })
            .collect(),
        _ => Err(Error::InvalidConfig(format!(
            "method {method} is not a derivative method"
        ))),
    }
}

/// Scores one target with one method.
pub fn score_target(target: Target<'_>, testset: &TestSet, axes: Axes, method: u8) -> Result<MethodScore> {
    if let Some(mode) = FdMode::for_method(method) {
        let calls = Cell::new(0usize);
        let f = |x: &[f64]| {
            calls.set(calls.get() + 1);
            target.eval(x)
        };
        let s = score(&f, testset, axes, mode)?;
        return Ok(MethodScore {
            mean_abs: s.mean_abs,
            mean_signed: s.mean_signed,
            evaluations: calls.get() / 4,
        });
    }
    let values = pointwise_mixed_partials(target, testset, axes, method)?;
    if values.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, found: 0 });
    }
    let n = values.len() as f64;
    Ok(MethodScore {
        mean_abs: values.iter().map(|v| v.abs()).sum::<f64>() / n,
        mean_signed: values.iter().sum::<f64>() / n,
        evaluations: values.len(),
    })
}

/// A scoring call that failed; the function is excluded from that method's
/// threshold and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub function_id: String,
    pub method: u8,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub oracle: bool,
    pub methods: Vec<u8>,
    pub note: String,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ScoreRecord>,
    pub failures: Vec<Failure>,
}

pub const SAME_SET_NOTE: &str =
    "thresholds are chosen on the same functions whose accuracy is reported (no held-out split)";

/// Scores every `(function, surrogate)` pair with every method on the grid
/// test set. A `None` surrogate scores the analytic function (oracle mode).
/// Work is spread over the current rayon pool; results do not depend on it.
pub fn run_evaluation(
    jobs: &[(&SymbolicFunction, Option<&Mlp>)],
    methods: &[u8],
    sampling: &SamplingConfig,
) -> Result<EvaluationReport> {
    if methods.is_empty() || methods.iter().any(|m| !(1..=8).contains(m)) {
        return Err(Error::InvalidConfig(format!("bad method set {methods:?}")));
    }
    let per_function: Vec<(Vec<ScoreRecord>, Vec<Failure>)> = jobs
        .par_iter()
        .map(|&(f, surrogate)| {
            let testset = build_grid_testset(f.arity, sampling.test_points, (sampling.low, sampling.high));
            let axes = f.partition.axes();
            let target = match surrogate {
                Some(n) => Target::Surrogate(n),
                None => Target::Oracle(f),
            };
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for &m in methods {
                let start = Instant::now();
                let result = score_target(target, &testset, axes, m);
                let wall_time = start.elapsed().as_secs_f64();
                match result.and_then(|s| {
                    if s.mean_abs.is_finite() {
                        Ok(s)
                    } else {
                        Err(Error::NonFinite(format!("score of {}", f.id)))
                    }
                }) {
                    Ok(s) => records.push(ScoreRecord {
                        function_id: f.id.clone(),
                        method: m,
                        score: s.mean_abs,
                        signed_score: s.mean_signed,
                        wall_time,
                        label: f.label,
                        evaluations: s.evaluations,
                    }),
                    Err(e) => failures.push(Failure {
                        function_id: f.id.clone(),
                        method: m,
                        error: e.to_string(),
                    }),
                }
            }
            (records, failures)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_function {
        records.extend(r);
        failures.extend(f);
    }
    let summaries = summarise(&records, methods)?;
    Ok(EvaluationReport {
        oracle: jobs.iter().all(|(_, s)| s.is_none()),
        methods: methods.to_vec(),
        note: SAME_SET_NOTE.to_string(),
        summaries,
        records,
        failures,
    })
}
