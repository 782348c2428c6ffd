//! Runtime invariant checks for every module, run by `addsep selftest`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{hessian, mixed_partial_nested, record_forward, Tape};
use crate::classify::{classify, confusion, optimal_threshold, ScoreRecord};
use crate::derivative_net::build_derivative_network;
use crate::evaluate::{pointwise_mixed_partials, score_target, Target};
use crate::finite_diff::{corner_numerator, corner_test, score, Axes, CornerQuad, FdMode, TestSet};
use crate::funcgen::{
    build_grid_testset, generate_corpus, sample_training_data, CorpusConfig, Expr, Label, SamplingConfig,
    SymbolicFunction, TrainingLayout, DEFAULT_POINTS, DEFAULT_RANGE,
};
use crate::math::{softplus, softplus_double_prime, softplus_prime, softplus_triple_prime, ActivationKind};
use crate::mlp::{gradient_check, split_dataset, train, Dataset, Mlp, TrainConfig};
use crate::pipeline::{cmd_evaluate, cmd_generate, cmd_train, EvaluateOptions, Overrides, RunConfig, RunDir};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    /// Matched additive/multiplicative pairs trained for the classifier check.
    pub pairs: usize,
    /// Per-variable sample count for those surrogates (product layout).
    pub pair_points: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            pairs: 10,
            pair_points: 12,
            seed: 0,
        }
    }
}

type Check = fn(&SelftestOptions) -> Result<String, String>;

const CHECKS: &[(&str, &str, Check)] = &[
    ("core_math", "logistic complement", math_complement),
    ("core_math", "second derivative identity", math_second),
    ("core_math", "odd part of softplus", math_odd_part),
    ("core_math", "derivatives match finite differences", math_fd),
    ("mlp", "gradient check on 100 random small nets", mlp_gradients),
    ("mlp", "early stopping bookkeeping", mlp_early_stopping),
    ("mlp", "forward is deterministic across threads", mlp_threads),
    ("autodiff", "nested orders agree", ad_symmetry),
    ("autodiff", "Hessian entry equals nested orders", ad_hessian),
    (
        "autodiff",
        "autodiff equals derivative network on 1000 points",
        ad_vs_dnet,
    ),
    ("autodiff", "backward on an unmodified tape repeats", ad_repeat),
    ("derivative_net", "linear in read-out weights", dn_linear),
    ("derivative_net", "blind to read-out bias", dn_bias),
    ("derivative_net", "symmetric in the variable pair", dn_swap),
    ("finite_diff", "separable corpus scores vanish", fd_separable),
    ("finite_diff", "corner identity is exact", fd_corner),
    ("finite_diff", "evaluation counts", fd_counts),
    ("finite_diff", "axis swap invariance", fd_swap),
    ("finite_diff", "held coordinate does not matter for x^2 + yz", fd_held),
    ("funcgen", "label soundness", fg_labels),
    ("funcgen", "balance", fg_balance),
    ("funcgen", "determinism", fg_determinism),
    ("classify", "no false positives at the threshold", cl_no_fp),
    ("classify", "threshold monotonicity", cl_monotone),
    ("classify", "methods 5-8 agree and rank identically", cl_methods_agree),
    ("classify", "classifier 1 ranks matched pairs", cl_matched_pairs),
    ("cli", "end-to-end determinism across worker counts", cli_determinism),
    ("cli", "artifacts reproducible from stored config", cli_reproducible),
];

/// Runs every check, in order. Panics inside a check count as failures.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckResult> {
    run_filtered(opts, |_, _| true)
}

/// Runs the checks whose `(module, name)` satisfy `keep`.
pub fn run_filtered(opts: &SelftestOptions, keep: impl Fn(&str, &str) -> bool) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(m, n, _)| keep(m, n))
        .map(|&(module, name, check)| {
            let start = Instant::now();
            let outcome =
                catch_unwind(AssertUnwindSafe(|| check(opts))).unwrap_or_else(|_| Err("panicked".to_string()));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                module,
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn rng(opts: &SelftestOptions, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::util::derive_seed(opts.seed, stream))
}

fn math_complement(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x: f64 = r.gen_range(-50.0..50.0);
        worst = worst.max((softplus_prime(x) + softplus_prime(-x) - 1.0).abs());
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn math_second(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x: f64 = r.gen_range(-50.0..50.0);
        let s = softplus_prime(x);
        worst = worst.max((softplus_double_prime(x) - s * (1.0 - s)).abs());
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn math_odd_part(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x: f64 = r.gen_range(-30.0..=30.0);
        worst = worst.max((softplus(x) - softplus(-x) - x).abs());
    }
    ensure(worst <= 1e-10, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn math_fd(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 4);
    let h = 1e-5;
    type Pair = (fn(f64) -> f64, fn(f64) -> f64);
    let chain: [Pair; 3] = [
        (softplus, softplus_prime),
        (softplus_prime, softplus_double_prime),
        (softplus_double_prime, softplus_triple_prime),
    ];
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: f64 = r.gen_range(-10.0..10.0);
        for (lower, d) in chain {
            let fd = (lower(x + h) - lower(x - h)) / (2.0 * h);
            let a = d(x);
            worst = worst.max((fd - a).abs() / a.abs().max(1e-3));
        }
    }
    ensure(worst < 1e-7, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn mlp_gradients(o: &SelftestOptions) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for s in 0..100 {
        let e = gradient_check(o.seed.wrapping_add(s)).map_err(err)?;
        worst = worst.max(e);
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn random_data(r: &mut ChaCha8Rng, n: usize, f: impl Fn(f64, f64) -> f64) -> Dataset {
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)])
        .collect();
    let outputs = inputs.iter().map(|p| f(p[0], p[1])).collect();
    Dataset::new(inputs, outputs).unwrap()
}

fn mlp_early_stopping(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 5);
    for k in 0..4u64 {
        let data = random_data(&mut r, 30, |x, y| x.sin() * y);
        let cfg = TrainConfig {
            patience: 25 + 25 * k as usize,
            max_epochs: 400,
            rng_seed: k,
            ..Default::default()
        };
        let (net, rep) = train(&Mlp::default_surrogate(2, k), &data, &cfg).map_err(err)?;
        ensure(rep.epochs_run <= rep.best_epoch + cfg.patience + 1, || {
            format!(
                "ran {} epochs with best {} and patience {}",
                rep.epochs_run, rep.best_epoch, cfg.patience
            )
        })?;
        ensure(rep.epochs_run <= cfg.max_epochs, || "exceeded max_epochs".into())?;
        let (_, val) = split_dataset(&data, &cfg).map_err(err)?;
        let v = net.mse(&val).map_err(err)?;
        ensure((v - rep.best_validation_loss).abs() <= 1e-12, || {
            format!("validation loss {v} vs reported {}", rep.best_validation_loss)
        })?;
    }
    Ok("4 training runs".into())
}

fn mlp_threads(o: &SelftestOptions) -> Result<String, String> {
    let net = Mlp::default_surrogate(3, o.seed);
    let mut r = rng(o, 6);
    let pts: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..3).map(|_| r.gen_range(-3.0..3.0)).collect())
        .collect();
    let eval = |net: &Mlp| -> Vec<u64> { pts.iter().map(|p| net.forward(p).unwrap().to_bits()).collect() };
    let reference = eval(&net);
    let results: Vec<Vec<u64>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| eval(&net))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    ensure(results.iter().all(|v| *v == reference), || "threads disagree".into())?;
    Ok("4 concurrent readers, bit-identical".into())
}

fn random_nets(o: &SelftestOptions, stream: u64, count: usize) -> Vec<Mlp> {
    let mut r = rng(o, stream);
    (0..count)
        .map(|_| {
            let d = r.gen_range(2..=4);
            let depth = r.gen_range(1..=3);
            let hidden: Vec<usize> = (0..depth).map(|_| r.gen_range(2..=8)).collect();
            Mlp::random(d, &hidden, ActivationKind::Softplus, &mut r)
        })
        .collect()
}

fn random_point(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.gen_range(-3.0..3.0)).collect()
}

fn ad_symmetry(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 7);
    let mut worst: f64 = 0.0;
    for net in random_nets(o, 8, 50) {
        let p = random_point(&mut r, net.input_dim());
        let a = mixed_partial_nested(&net, &p, 0, 1).map_err(err)?;
        let b = mixed_partial_nested(&net, &p, 1, 0).map_err(err)?;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-10, || format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn ad_hessian(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 9);
    let mut worst: f64 = 0.0;
    for net in random_nets(o, 10, 30) {
        let d = net.input_dim();
        let p = random_point(&mut r, d);
        let h = hessian(&net, &p).map_err(err)?;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let n = mixed_partial_nested(&net, &p, i, j).map_err(err)?;
                    worst = worst.max((h.get(i, j) - n).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn ad_vs_dnet(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 11);
    let mut worst: f64 = 0.0;
    for k in 0..10u64 {
        let net = Mlp::default_surrogate(2, o.seed.wrapping_add(k));
        let dn = build_derivative_network(&net, 0, 1).map_err(err)?;
        for _ in 0..100 {
            let p = random_point(&mut r, 2);
            let a = dn.eval_mixed_partial(&p).map_err(err)?;
            let b = mixed_partial_nested(&net, &p, 0, 1).map_err(err)?;
            let c = hessian(&net, &p).map_err(err)?.get(0, 1);
            worst = worst.max((a - b).abs()).max((a - c).abs());
        }
    }
    ensure(worst <= 1e-8, || format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn ad_repeat(o: &SelftestOptions) -> Result<String, String> {
    let net = Mlp::default_surrogate(2, o.seed);
    let tape = Tape::new();
    let xs = [tape.var(0.3), tape.var(-1.2)];
    let out = record_forward(&net, &xs).map_err(err)?;
    let a = tape.gradient(out, &xs).map_err(err)?;
    let b = tape.gradient(out, &xs).map_err(err)?;
    ensure(a == b, || "repeated sweeps differ".into())?;
    Ok("identical".into())
}

fn dn_linear(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 12);
    let net = Mlp::default_surrogate(2, o.seed);
    let mut scaled = net.clone();
    let last = scaled.layers().len() - 1;
    let c = -3.75;
    for w in scaled.layers_mut()[last].weights.as_mut_slice() {
        *w *= c;
    }
    let (a, b) = (
        build_derivative_network(&net, 0, 1).map_err(err)?,
        build_derivative_network(&scaled, 0, 1).map_err(err)?,
    );
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p = random_point(&mut r, 2);
        worst = worst.max((b.eval_mixed_partial(&p).map_err(err)? - c * a.eval_mixed_partial(&p).map_err(err)?).abs());
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn dn_bias(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 13);
    let net = Mlp::default_surrogate(2, o.seed);
    let mut shifted = net.clone();
    let last = shifted.layers().len() - 1;
    shifted.layers_mut()[last].bias[0] += 123.0;
    let (a, b) = (
        build_derivative_network(&net, 0, 1).map_err(err)?,
        build_derivative_network(&shifted, 0, 1).map_err(err)?,
    );
    for _ in 0..200 {
        let p = random_point(&mut r, 2);
        let (x, y) = (
            a.eval_mixed_partial(&p).map_err(err)?,
            b.eval_mixed_partial(&p).map_err(err)?,
        );
        ensure(x == y, || format!("{x} vs {y} at {p:?}"))?;
    }
    Ok("exactly unchanged".into())
}

fn dn_swap(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 14);
    let mut worst: f64 = 0.0;
    for k in 0..5u64 {
        let net = Mlp::default_surrogate(3, o.seed.wrapping_add(k));
        let (a, b) = (
            build_derivative_network(&net, 0, 2).map_err(err)?,
            build_derivative_network(&net, 2, 0).map_err(err)?,
        );
        for _ in 0..100 {
            let p = random_point(&mut r, 3);
            worst = worst.max((a.eval_mixed_partial(&p).map_err(err)? - b.eval_mixed_partial(&p).map_err(err)?).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn fd_separable(_: &SelftestOptions) -> Result<String, String> {
    let corpus = generate_corpus(&CorpusConfig {
        paired: false,
        balance: false,
        ..Default::default()
    })
    .map_err(err)?;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for f in corpus.iter().filter(|f| f.label == Label::Separable) {
        let ts = build_grid_testset(f.arity, DEFAULT_POINTS, DEFAULT_RANGE);
        for m in 1..=4 {
            let s = score_target(Target::Oracle(f), &ts, f.partition.axes(), m).map_err(err)?;
            worst = worst.max(s.mean_abs);
        }
        n += 1;
    }
    ensure(worst < 1e-10, || format!("max score {worst:e}"))?;
    Ok(format!("{n} functions, max score {worst:.1e}"))
}

fn fd_corner(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 15);
    let net = Mlp::default_surrogate(3, o.seed);
    let f = |x: &[f64]| net.forward(x);
    for _ in 0..500 {
        let a = random_point(&mut r, 3);
        let b = random_point(&mut r, 3);
        let quad = CornerQuad {
            axes: Axes::new(0, 2),
            base: [a[0], a[2]],
            offset: [b[0], b[2]],
            context: a.clone(),
        };
        let mut b_ctx = a.clone();
        b_ctx[0] = b[0];
        b_ctx[2] = b[2];
        let via_corner = corner_test(&f, &a, &b_ctx, 0, 2).map_err(err)?;
        let via_numerator = corner_numerator(&f, &quad).map_err(err)?;
        ensure(via_corner == via_numerator, || {
            format!("{via_corner} vs {via_numerator}")
        })?;
    }
    Ok("500 random rectangles".into())
}

fn fd_counts(o: &SelftestOptions) -> Result<String, String> {
    let net = Mlp::default_surrogate(2, o.seed);
    let ts = build_grid_testset(2, DEFAULT_POINTS, DEFAULT_RANGE);
    let counts: Vec<usize> = (1..=4)
        .map(|m| score_target(Target::Surrogate(&net), &ts, Axes::new(0, 1), m).map(|s| s.evaluations))
        .collect::<crate::Result<_>>()
        .map_err(err)?;
    ensure(counts == [435, 435, 30, 30], || format!("{counts:?}"))?;
    Ok(format!("{counts:?}"))
}

fn fd_swap(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 16);
    let net = Mlp::default_surrogate(2, o.seed);
    let f = |x: &[f64]| net.forward(x);
    let ts = TestSet::new((0..20).map(|_| random_point(&mut r, 2)).collect()).map_err(err)?;
    let mut worst: f64 = 0.0;
    for m in 1..=4 {
        let mode = FdMode::for_method(m).unwrap();
        let a = score(&f, &ts, Axes::new(0, 1), mode).map_err(err)?.mean_abs;
        let b = score(&f, &ts, Axes::new(1, 0), mode).map_err(err)?.mean_abs;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn fd_held(_: &SelftestOptions) -> Result<String, String> {
    let f = |x: &[f64]| Ok(x[0] * x[0] + x[1] * x[2]);
    let mut worst: f64 = 0.0;
    for z in [-3.0, -0.5, 0.0, 1.7, 3.0] {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|t| {
                let v = -3.0 + 6.0 * t as f64 / 29.0;
                vec![v, v, z]
            })
            .collect();
        let ts = TestSet::new(pts).map_err(err)?;
        for m in 1..=4 {
            let s = score(&f, &ts, Axes::new(0, 1), FdMode::for_method(m).unwrap()).map_err(err)?;
            worst = worst.max(s.mean_abs);
        }
    }
    ensure(worst < 1e-10, || format!("max score {worst:e}"))?;
    Ok(format!("max score {worst:.1e}"))
}

fn fg_labels(o: &SelftestOptions) -> Result<String, String> {
    let corpus = generate_corpus(&CorpusConfig::default()).map_err(err)?;
    let mut r = rng(o, 17);
    for f in &corpus {
        let axes = f.partition.axes();
        let vals: Vec<f64> = (0..100)
            .map(|_| {
                let p = random_point(&mut r, f.arity);
                f.expr.d2(&p, axes.first, axes.second)
            })
            .collect();
        match f.label {
            Label::Separable => ensure(vals.iter().all(|v| v.abs() <= 1e-12), || format!("{} {}", f.id, f.expr))?,
            Label::NonSeparable => ensure(vals.iter().any(|v| v.abs() > 1e-6), || format!("{} {}", f.id, f.expr))?,
        }
    }
    Ok(format!("{} functions", corpus.len()))
}

fn fg_balance(o: &SelftestOptions) -> Result<String, String> {
    for (arities, n, paired) in [(vec![2], 60, true), (vec![2, 3], 200, true), (vec![3], 100, false)] {
        let c = generate_corpus(&CorpusConfig {
            arities,
            max_functions: Some(n),
            paired,
            rng_seed: o.seed,
            ..Default::default()
        })
        .map_err(err)?;
        let sep = c.iter().filter(|f| f.label == Label::Separable).count();
        ensure(c.len() == n && 2 * sep == n, || {
            format!("{sep} of {} separable", c.len())
        })?;
    }
    Ok("3 corpora".into())
}

fn fg_determinism(o: &SelftestOptions) -> Result<String, String> {
    let cfg = CorpusConfig {
        max_functions: Some(20),
        rng_seed: o.seed,
        ..Default::default()
    };
    let a = generate_corpus(&cfg).map_err(err)?;
    let b = generate_corpus(&cfg).map_err(err)?;
    ensure(a == b, || "corpora differ".into())?;
    let sampling = SamplingConfig::default();
    for f in &a {
        let d1 = sample_training_data(f, &sampling, f.seed).map_err(err)?;
        let d2 = sample_training_data(f, &sampling, f.seed).map_err(err)?;
        ensure(d1 == d2, || format!("datasets differ for {}", f.id))?;
        let t1 = build_grid_testset(f.arity, 30, DEFAULT_RANGE);
        ensure(t1 == build_grid_testset(f.arity, 30, DEFAULT_RANGE), || {
            "test sets differ".into()
        })?;
    }
    Ok("corpus, datasets and test sets repeat".into())
}

fn synthetic_records(r: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let n = r.gen_range(2..40);
    (0..n)
        .map(|i| ScoreRecord {
            function_id: format!("s{i}"),
            method: 1,
            score: r.gen_range(1e-6..1.0),
            signed_score: 0.0,
            wall_time: 0.0,
            label: if i == 0 || r.gen_bool(0.5) {
                Label::NonSeparable
            } else {
                Label::Separable
            },
            evaluations: 0,
        })
        .collect()
}

fn cl_no_fp(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 18);
    for _ in 0..500 {
        let recs = synthetic_records(&mut r);
        let t = optimal_threshold(&recs).map_err(err)?;
        ensure(confusion(&recs, t).false_positives == 0, || {
            format!("false positive at {t}")
        })?;
    }
    Ok("500 random score sets".into())
}

fn cl_monotone(o: &SelftestOptions) -> Result<String, String> {
    let mut r = rng(o, 19);
    for _ in 0..500 {
        let recs = synthetic_records(&mut r);
        let mut ts: Vec<f64> = (0..10).map(|_| r.gen_range(0.0..1.0)).collect();
        ts.sort_by(f64::total_cmp);
        let counts: Vec<usize> = ts
            .iter()
            .map(|&t| recs.iter().filter(|x| classify(x.score, t) == Label::Separable).count())
            .collect();
        ensure(counts.windows(2).all(|w| w[0] <= w[1]), || format!("{counts:?}"))?;
    }
    Ok("500 random score sets".into())
}

fn cl_methods_agree(o: &SelftestOptions) -> Result<String, String> {
    let ts = build_grid_testset(2, DEFAULT_POINTS, DEFAULT_RANGE);
    let axes = Axes::new(0, 1);
    let nets: Vec<Mlp> = (0..12)
        .map(|k| Mlp::default_surrogate(2, o.seed.wrapping_add(k)))
        .collect();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut worst: f64 = 0.0;
    for net in &nets {
        let per: Vec<Vec<f64>> = (5..=8)
            .map(|m| pointwise_mixed_partials(Target::Surrogate(net), &ts, axes, m))
            .collect::<crate::Result<_>>()
            .map_err(err)?;
        for (k, v) in per.iter().enumerate() {
            for (a, b) in per[0].iter().zip(v) {
                worst = worst.max((a - b).abs());
            }
            scores[k].push(v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64);
        }
    }
    ensure(worst <= 1e-8, || format!("max difference {worst:e}"))?;
    let order = |s: &Vec<f64>| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
        idx
    };
    let first = order(&scores[0]);
    ensure(scores.iter().all(|s| order(s) == first), || "rankings differ".into())?;
    Ok(format!("max difference {worst:.1e}"))
}

fn cl_matched_pairs(o: &SelftestOptions) -> Result<String, String> {
    let corpus = generate_corpus(&CorpusConfig {
        arities: vec![2],
        max_functions: Some(2 * o.pairs),
        rng_seed: o.seed,
        ..Default::default()
    })
    .map_err(err)?;
    let cfg = RunConfig {
        sampling: SamplingConfig {
            points: o.pair_points,
            layout: TrainingLayout::Product,
            ..Default::default()
        },
        ..Default::default()
    };
    let ts = build_grid_testset(2, DEFAULT_POINTS, DEFAULT_RANGE);
    let mut scores = Vec::with_capacity(corpus.len());
    for f in &corpus {
        let (net, _) = crate::pipeline::train_surrogate(f, &cfg).map_err(err)?;
        scores.push(
            score_target(Target::Surrogate(&net), &ts, f.partition.axes(), 1)
                .map_err(err)?
                .mean_abs,
        );
    }
    let (wins, total) = matched_pair_wins(&corpus, &scores);
    ensure(total > 0 && wins * 10 >= total * 9, || {
        format!("{wins} of {total} pairs ordered")
    })?;
    Ok(format!("{wins} of {total} pairs ordered"))
}

/// Counts additive/multiplicative twins (same sub-functions) where the
/// additive one scores strictly lower. Returns `(wins, pairs)`.
pub fn matched_pair_wins(corpus: &[SymbolicFunction], scores: &[f64]) -> (usize, usize) {
    let (mut wins, mut total) = (0, 0);
    for (i, f) in corpus.iter().enumerate() {
        let Expr::Add(a, b) = &f.expr else { continue };
        let twin = Expr::Mul(a.clone(), b.clone());
        if let Some(j) = corpus.iter().position(|g| g.expr == twin) {
            total += 1;
            if scores[i] < scores[j] {
                wins += 1;
            }
        }
    }
    (wins, total)
}

fn tiny_run_config(o: &SelftestOptions, workers: usize) -> RunConfig {
    RunConfig {
        seed: o.seed,
        corpus: CorpusConfig {
            arities: vec![2, 3],
            max_functions: Some(6),
            ..Default::default()
        },
        sampling: SamplingConfig {
            points: 30,
            layout: TrainingLayout::Tuples,
            ..Default::default()
        },
        train: TrainConfig {
            patience: 20,
            max_epochs: 150,
            ..Default::default()
        },
        workers,
        ..Default::default()
    }
}

fn cli_determinism(o: &SelftestOptions) -> Result<String, String> {
    let mut outcomes = Vec::new();
    for workers in [1, 3] {
        let dir = tempfile_dir()?;
        let run = RunDir::new(dir.path());
        cmd_generate(&tiny_run_config(o, workers), &run).map_err(err)?;
        cmd_train(&run, &Overrides::default()).map_err(err)?;
        let rep = cmd_evaluate(&run, &Overrides::default(), EvaluateOptions::default()).map_err(err)?;
        let scores: Vec<(String, u8, u64)> = rep
            .records
            .iter()
            .map(|r| (r.function_id.clone(), r.method, r.score.to_bits()))
            .collect();
        let thresholds: Vec<u64> = rep.summaries.iter().map(|s| s.threshold.to_bits()).collect();
        outcomes.push((scores, thresholds));
    }
    ensure(outcomes[0] == outcomes[1], || {
        "scores differ between worker counts".into()
    })?;
    Ok("1 and 3 workers agree bit-for-bit".into())
}

fn cli_reproducible(o: &SelftestOptions) -> Result<String, String> {
    let a = tempfile_dir()?;
    let b = tempfile_dir()?;
    let run_a = RunDir::new(a.path());
    cmd_generate(&tiny_run_config(o, 1), &run_a).map_err(err)?;
    let stored = run_a.load_config().map_err(err)?;
    let run_b = RunDir::new(b.path());
    let corpus = cmd_generate(&stored, &run_b).map_err(err)?;
    let same = |p: &std::path::Path, q: &std::path::Path| std::fs::read(p).ok() == std::fs::read(q).ok();
    ensure(same(&run_a.manifest(), &run_b.manifest()), || "manifests differ".into())?;
    ensure(same(&run_a.config(), &run_b.config()), || "configs differ".into())?;
    for f in &corpus {
        ensure(same(&run_a.data(&f.id), &run_b.data(&f.id)), || {
            format!("data for {} differs", f.id)
        })?;
    }
    Ok(format!("{} datasets regenerated byte-identically", corpus.len()))
}

/// A scratch directory removed on drop.
struct ScratchDir(std::path::PathBuf);

impl ScratchDir {
    fn path(&self) -> &std::path::Path {
        &self.0
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn tempfile_dir() -> Result<ScratchDir, String> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let p = std::env::temp_dir().join(format!(
        "addsep-selftest-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&p).map_err(|e| e.to_string())?;
    Ok(ScratchDir(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcgen::Partition;

    #[test]
    fn matched_pair_counting() {
        let p = Partition { x: vec![0], y: vec![1] };
        let mk = |s: &str, id: &str| SymbolicFunction::new(id, 2, Expr::parse(s).unwrap(), p.clone(), 0).unwrap();
        let corpus = vec![
            mk("(+ (sub sin x0) (sub id x1))", "a"),
            mk("(* (sub sin x0) (sub id x1))", "b"),
            mk("(+ (sub exp x0) (sub id x1))", "c"),
            mk("(* (sub exp x0) (sub id x1))", "d"),
            mk("(+ (sub cos x0) (sub id x1))", "e"),
        ];
        assert_eq!(matched_pair_wins(&corpus, &[0.1, 0.5, 0.9, 0.2, 0.0]), (1, 2));
    }

    #[test]
    fn fast_checks_pass() {
        let opts = SelftestOptions::default();
        let results = run_filtered(&opts, |m, n| {
            !matches!(
                n,
                "classifier 1 ranks matched pairs" | "separable corpus scores vanish" | "label soundness"
            ) && m != "cli"
        });
        for r in &results {
            assert!(r.passed, "{} / {}: {}", r.module, r.name, r.detail);
        }
    }
}
