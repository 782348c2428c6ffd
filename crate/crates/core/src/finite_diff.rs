//! Finite-difference estimates of a mixed partial from rectangle corners.
//!
//! For a quad with base `(x, y)` and offset `(x + h, y + k)` in the tested
//! coordinates, the estimate is
//!
//! ```text
//! [f(x+h, y+k) - f(x+h, y) - f(x, y+k) + f(x, y)] / D
//! ```
//!
//! with `D = 1` ([`Denominator::UnitStep`]) or `D = h·k`
//! ([`Denominator::TrueStep`]). All other coordinates are held at the
//! per-coordinate median of the test set. The four classifier scores average
//! the absolute estimate either over every unordered pair of test samples
//! ([`Anchor::AllPairs`], `n(n-1)/2` quads) or over each sample paired with
//! the coordinate-wise median ([`Anchor::MedianAnchor`], `n` quads). Means are
//! sequential sums in enumeration order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::median;

/// Test inputs at which a classifier probes a function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub points: Vec<Vec<f64>>,
}

impl TestSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = points.first() {
            let d = first.len();
            if let Some(bad) = points.iter().find(|p| p.len() != d) {
                return Err(Error::DimensionMismatch {
                    context: "test set point",
                    expected: d,
                    found: bad.len(),
                });
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    /// Per-coordinate medians, used for every held-constant coordinate.
    pub fn medians(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|c| median(&self.points.iter().map(|p| p[c]).collect::<Vec<_>>()))
            .collect()
    }
}

/// The tested coordinate pair: the first element of each variable group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axes {
    pub first: usize,
    pub second: usize,
}

impl Axes {
    pub fn new(first: usize, second: usize) -> Self {
        Self { first, second }
    }

    pub fn swapped(self) -> Self {
        Self {
            first: self.second,
            second: self.first,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Denominator {
    /// Divide by `1 · 1`.
    UnitStep,
    /// Divide by `h · k`.
    TrueStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    AllPairs,
    MedianAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FdMode {
    pub denominator: Denominator,
    pub anchor: Anchor,
}

impl FdMode {
    /// Finite-difference classifiers 1 to 4.
    pub fn for_method(method: u8) -> Option<Self> {
        use Anchor::*;
        use Denominator::*;
        let (denominator, anchor) = match method {
            1 => (UnitStep, AllPairs),
            2 => (TrueStep, AllPairs),
            3 => (UnitStep, MedianAnchor),
            4 => (TrueStep, MedianAnchor),
            _ => return None,
        };
        Some(Self { denominator, anchor })
    }
}

/// One rectangle in the `(first, second)` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerQuad {
    pub axes: Axes,
    pub base: [f64; 2],
    pub offset: [f64; 2],
    /// Full input vector supplying the held-constant coordinates.
    pub context: Vec<f64>,
}

impl CornerQuad {
    pub fn steps(&self) -> (f64, f64) {
        (self.offset[0] - self.base[0], self.offset[1] - self.base[1])
    }

    fn at(&self, x: f64, y: f64) -> Vec<f64> {
        let mut p = self.context.clone();
        p[self.axes.first] = x;
        p[self.axes.second] = y;
        p
    }
}

fn check_axes(axes: Axes, dim: usize) -> Result<()> {
    crate::autodiff::check_pair(dim, axes.first, axes.second)
}

/// `(f(x+h,y+k) + f(x,y)) - (f(x,y+k) + f(x+h,y))`.
pub fn corner_numerator<F>(f: &F, quad: &CornerQuad) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    check_axes(quad.axes, quad.context.len())?;
    let [x, y] = quad.base;
    let [xh, yk] = quad.offset;
    Ok((f(&quad.at(xh, yk))? + f(&quad.at(x, y))?) - (f(&quad.at(x, yk))? + f(&quad.at(xh, y))?))
}

pub fn corner_mixed_partial<F>(f: &F, quad: &CornerQuad, denominator: Denominator) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let (h, k) = quad.steps();
    let scale = match denominator {
        Denominator::UnitStep => 1.0,
        Denominator::TrueStep => {
            if h == 0.0 || k == 0.0 {
                return Err(Error::ZeroStep { h, k });
            }
            h * k
        }
    };
    Ok(corner_numerator(f, quad)? / scale)
}

/// Diagonal-corner form: `(f(a) + f(b)) - (f(a_i, b_j) + f(b_i, a_j))`.
/// Coordinates other than `i` and `j` are taken from `a` for the two mixed
/// corners.
pub fn corner_test<F>(f: &F, a: &[f64], b: &[f64], i: usize, j: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "corner test points",
            expected: a.len(),
            found: b.len(),
        });
    }
    check_axes(Axes::new(i, j), a.len())?;
    let mut ab = a.to_vec();
    ab[j] = b[j];
    let mut ba = a.to_vec();
    ba[i] = b[i];
    Ok((f(a)? + f(b)?) - (f(&ab)? + f(&ba)?))
}

/// Outcome of one finite-difference classifier on one function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdScore {
    /// Mean absolute estimate: the classifier score.
    pub mean_abs: f64,
    pub mean_signed: f64,
    /// Quads evaluated (four function calls each).
    pub quads: usize,
    /// Quads skipped for a zero step under `TrueStep`.
    pub skipped: usize,
    /// Median-anchor samples sharing a tested coordinate with the anchor.
    pub degenerate: usize,
}

pub fn score<F>(f: &F, testset: &TestSet, axes: Axes, mode: FdMode) -> Result<FdScore>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let needed = match mode.anchor {
        Anchor::AllPairs => 2,
        Anchor::MedianAnchor => 1,
    };
    if testset.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            found: testset.len(),
        });
    }
    check_axes(axes, testset.dim())?;
    let context = testset.medians();
    let quad = |a: &[f64], b: [f64; 2]| CornerQuad {
        axes,
        base: [a[axes.first], a[axes.second]],
        offset: b,
        context: context.clone(),
    };

    let (mut sum_abs, mut sum_signed) = (0.0, 0.0);
    let (mut quads, mut skipped, mut degenerate) = (0usize, 0usize, 0usize);
    let mut visit = |q: CornerQuad| -> Result<()> {
        let (h, k) = q.steps();
        let zero = h == 0.0 || k == 0.0;
        if mode.anchor == Anchor::MedianAnchor && zero {
            degenerate += 1;
        }
        if mode.denominator == Denominator::TrueStep && zero {
            skipped += 1;
            return Ok(());
        }
        let v = corner_mixed_partial(f, &q, mode.denominator)?;
        sum_abs += v.abs();
        sum_signed += v;
        quads += 1;
        Ok(())
    };

    let pts = &testset.points;
    match mode.anchor {
        Anchor::AllPairs => {
            for a in 0..pts.len() {
                for b in a + 1..pts.len() {
                    visit(quad(&pts[a], [pts[b][axes.first], pts[b][axes.second]]))?;
                }
            }
        }
        Anchor::MedianAnchor => {
            let anchor = [context[axes.first], context[axes.second]];
            for p in pts {
                visit(quad(p, anchor))?;
            }
        }
    }
    if quads == 0 {
        return Err(Error::AllSamplesDegenerate);
    }
    Ok(FdScore {
        mean_abs: sum_abs / quads as f64,
        mean_signed: sum_signed / quads as f64,
        quads,
        skipped,
        degenerate,
    })
}

macro_rules! method_score {
    ($name:ident, $m:literal) => {
        pub fn $name<F>(f: &F, testset: &TestSet, axes: Axes) -> Result<f64>
        where
            F: Fn(&[f64]) -> Result<f64>,
        {
            score(f, testset, axes, FdMode::for_method($m).unwrap()).map(|s| s.mean_abs)
        }
    };
}

method_score!(score_method1, 1);
method_score!(score_method2, 2);
method_score!(score_method3, 3);
method_score!(score_method4, 4);
