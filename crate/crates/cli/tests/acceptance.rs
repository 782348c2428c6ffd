//! Acceptance suite. Runs every criterion and prints one line each:
//!
//! ```text
//! cargo test -p addsep-cli --test acceptance
//! ```
//!
//! Set `ACCEPTANCE_ONLY=1,5` to run a subset.

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use addsep::autodiff::{hessian, loss_gradient, mixed_partial_nested};
use addsep::classify::MethodSummary;
use addsep::derivative_net::build_derivative_network;
use addsep::evaluate::{run_evaluation, EvaluationReport, ALL_METHODS};
use addsep::finite_diff::{score, Axes, FdMode, TestSet};
use addsep::funcgen::{
    build_grid_testset, generate_corpus, CorpusConfig, Expr, Partition, SamplingConfig, SubKind, SymbolicFunction,
    TrainingLayout, DEFAULT_POINTS, DEFAULT_RANGE,
};
use addsep::mlp::{backward, gradient_check, random_batch, Mlp, TrainConfig};
use addsep::pipeline::{train_surrogate, RunConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn two_var_corpus(n: usize, seed: u64) -> Vec<SymbolicFunction> {
    generate_corpus(&CorpusConfig {
        arities: vec![2],
        max_functions: Some(n),
        rng_seed: seed,
        ..Default::default()
    })
    .expect("corpus")
}

fn train_all(corpus: &[SymbolicFunction], cfg: &RunConfig) -> Vec<Mlp> {
    corpus
        .par_iter()
        .map(|f| train_surrogate(f, cfg).expect("training").0)
        .collect()
}

fn evaluate(corpus: &[SymbolicFunction], nets: &[Mlp], methods: &[u8]) -> EvaluationReport {
    let jobs: Vec<(&SymbolicFunction, Option<&Mlp>)> = corpus.iter().zip(nets).map(|(f, n)| (f, Some(n))).collect();
    run_evaluation(&jobs, methods, &SamplingConfig::default()).expect("evaluation")
}

fn summary(rep: &EvaluationReport, m: u8) -> &MethodSummary {
    rep.summaries.iter().find(|s| s.method == m).expect("summary")
}

fn criterion_1() -> Outcome {
    let corpus = two_var_corpus(50, 11);
    let cfg = RunConfig {
        seed: 11,
        sampling: SamplingConfig {
            layout: TrainingLayout::Tuples,
            ..Default::default()
        },
        train: TrainConfig {
            patience: 100,
            max_epochs: 1000,
            ..Default::default()
        },
        ..Default::default()
    };
    let nets = train_all(&corpus, &cfg);
    let ts = build_grid_testset(2, DEFAULT_POINTS, DEFAULT_RANGE);
    let h = 1e-4;
    let (mut pairwise, mut vs_fd): (f64, f64) = (0.0, 0.0);
    for net in &nets {
        let dn = build_derivative_network(net, 0, 1).unwrap();
        for p in &ts.points {
            let v = [
                mixed_partial_nested(net, p, 0, 1).unwrap(),
                mixed_partial_nested(net, p, 1, 0).unwrap(),
                hessian(net, p).unwrap().get(0, 1),
                dn.eval_mixed_partial(p).unwrap(),
            ];
            let f = |dx: f64, dy: f64| net.forward(&[p[0] + dx, p[1] + dy]).unwrap();
            let fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
            for a in v {
                for b in v {
                    pairwise = pairwise.max((a - b).abs());
                }
                vs_fd = vs_fd.max((a - fd).abs());
            }
        }
    }
    outcome(
        pairwise <= 1e-8 && vs_fd <= 1e-4,
        format!(
            "{} nets x {} points; methods 5-8 max gap {pairwise:.1e}, vs central FD {vs_fd:.1e}",
            nets.len(),
            ts.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let corpus = generate_corpus(&CorpusConfig {
        arities: vec![2, 3],
        max_functions: Some(200),
        rng_seed: 3,
        ..Default::default()
    })
    .unwrap();
    let jobs: Vec<(&SymbolicFunction, Option<&Mlp>)> = corpus.iter().map(|f| (f, None)).collect();
    let rep = run_evaluation(&jobs, &ALL_METHODS, &SamplingConfig::default()).unwrap();
    for f in &rep.failures {
        println!("    {} method {}: {}", f.function_id, f.method, f.error);
    }
    let worst_acc = rep.summaries.iter().map(|s| s.accuracy).fold(1.0, f64::min);
    let worst_thr = rep.summaries.iter().map(|s| s.threshold).fold(0.0, f64::max);
    outcome(
        rep.summaries.len() == 8 && worst_acc == 1.0 && worst_thr < 1e-8 && rep.failures.is_empty(),
        format!(
            "{} functions, min accuracy {worst_acc}, max threshold {worst_thr:.1e}",
            corpus.len()
        ),
    )
}

struct SeedRun {
    seed: u64,
    report: EvaluationReport,
    seconds: f64,
}

fn table2_runs() -> Vec<SeedRun> {
    (0..3u64)
        .map(|seed| {
            let start = Instant::now();
            let corpus = two_var_corpus(60, seed);
            let cfg = RunConfig {
                seed,
                ..Default::default()
            };
            let nets = train_all(&corpus, &cfg);
            let report = evaluate(&corpus, &nets, &ALL_METHODS);
            SeedRun {
                seed,
                report,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn criterion_3(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let (a1, a5) = (summary(&r.report, 1).accuracy, summary(&r.report, 5).accuracy);
        ok &= a1 >= 0.75 && a1 >= a5;
        let accs: Vec<String> = r
            .report
            .summaries
            .iter()
            .map(|s| format!("{:.3}", s.accuracy))
            .collect();
        parts.push(format!("seed {}: [{}] in {:.0}s", r.seed, accs.join(" "), r.seconds));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_4(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let t: Vec<f64> = (1..=8).map(|m| summary(&r.report, m).mean_time).collect();
        ok &= t[6] > t[4] && t[6] > t[5] && t[6] > t[7];
        parts.push(format!(
            "seed {}: t5 {:.2e} t6 {:.2e} t7 {:.2e} t8 {:.2e}",
            r.seed, t[4], t[5], t[6], t[7]
        ));
    }
    let counts_ok = runs.iter().flat_map(|r| &r.report.records).all(|rec| match rec.method {
        1 | 2 => rec.evaluations == 435,
        3 | 4 => rec.evaluations == 30,
        _ => true,
    });
    ok &= counts_ok;
    parts.push(format!("counts 435/30 exact: {counts_ok}"));
    outcome(ok, parts.join("; "))
}

fn criterion_5() -> Outcome {
    let worst_fd = (0..100u64).map(|s| gradient_check(s).unwrap()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_ad: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=4);
        let hidden: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
        let net = Mlp::random(d, &hidden, addsep::math::ActivationKind::Softplus, &mut rng);
        let n = rng.gen_range(1..=6);
        let batch = random_batch(&mut rng, d, n);
        let bp = backward(&net, &batch).unwrap();
        let ad = loss_gradient(&net, &batch).unwrap();
        for (a, b) in bp.values().zip(ad.values()) {
            worst_ad = worst_ad.max((a - b).abs());
        }
    }
    outcome(
        worst_fd <= 1e-6 && worst_ad <= 1e-10,
        format!("backprop vs FD max relative {worst_fd:.1e}; autodiff vs backprop max {worst_ad:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let p = Partition { x: vec![0], y: vec![1] };
    let sep = |g: SubKind, h: SubKind| {
        SymbolicFunction::new("s", 2, Expr::add(Expr::sub(g, 0), Expr::sub(h, 1)), p.clone(), 0).unwrap()
    };
    let pairs = [
        (sep(SubKind::Exp, SubKind::Sin), sep(SubKind::CubeThird, SubKind::Log)),
        (
            sep(SubKind::Square, SubKind::CosSquared),
            sep(SubKind::SqrtAbs, SubKind::Reciprocal),
        ),
        (
            sep(SubKind::Cbrt, SubKind::Identity),
            sep(SubKind::SinSquared, SubKind::Exp),
        ),
    ];
    let ts: TestSet = build_grid_testset(2, DEFAULT_POINTS, DEFAULT_RANGE);
    let mut worst: f64 = 0.0;
    for (f1, f2) in &pairs {
        let sum = |x: &[f64]| Ok(f1.eval(x)? + f2.eval(x)?);
        for m in 1..=4 {
            let mode = FdMode::for_method(m).unwrap();
            worst = worst.max(score(&sum, &ts, Axes::new(0, 1), mode).unwrap().mean_abs);
            for c in [-2.5, 0.1, 7.0] {
                let scaled = |x: &[f64]| Ok(c * f1.eval(x)?);
                worst = worst.max(score(&scaled, &ts, Axes::new(0, 1), mode).unwrap().mean_abs);
            }
        }
    }
    outcome(worst < 1e-10, format!("f1+f2 and c*f1 max score {worst:.1e}"))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_addsep"))
        .arg("selftest")
        .output()
        .expect("run selftest");
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap_or("").to_string();
    for line in stdout.lines().filter(|l| l.starts_with("FAIL")) {
        println!("    {line}");
    }
    outcome(out.status.success() && secs < 300.0, format!("{last} in {secs:.0}s"))
}

/// Informational: the same comparison with 30 independent training tuples
/// per function instead of the per-variable product.
fn tuples_layout_note() -> String {
    let corpus = two_var_corpus(60, 0);
    let cfg = RunConfig {
        sampling: SamplingConfig {
            layout: TrainingLayout::Tuples,
            ..Default::default()
        },
        ..Default::default()
    };
    let nets = train_all(&corpus, &cfg);
    let rep = evaluate(&corpus, &nets, &[1, 5]);
    format!(
        "30-tuple training data, seed 0: classifier 1 {:.3}, classifier 5 {:.3}",
        summary(&rep, 1).accuracy,
        summary(&rep, 5).accuracy
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |k: u32| only.as_ref().is_none_or(|v| v.contains(&k));

    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |k: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if want(k) {
            let start = Instant::now();
            let o = f();
            let secs = start.elapsed().as_secs_f64();
            println!(
                "{} criterion {k}: {name} ({secs:.1}s) {}",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push((k, name, o, secs));
        }
    };

    run(1, "derivative engines agree", &mut criterion_1);
    run(2, "oracle classification is perfect", &mut criterion_2);
    let mut runs = Vec::new();
    run(3, "classifier 1 accuracy and ordering over 3 seeds", &mut || {
        runs = table2_runs();
        criterion_3(&runs)
    });
    run(4, "cost structure of the methods", &mut || {
        if runs.is_empty() {
            runs = table2_runs();
        }
        criterion_4(&runs)
    });
    run(5, "gradient correctness", &mut criterion_5);
    run(6, "separability closure", &mut criterion_6);
    run(7, "selftest passes within 5 minutes", &mut criterion_7);
    if want(3) {
        println!("info: {}", tuples_layout_note());
    }

    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("{} criteria, {} failed", results.len(), failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
