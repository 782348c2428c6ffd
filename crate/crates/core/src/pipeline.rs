//! Run directories: generate a corpus, train surrogates, score them, report.
//!
//! ```text
//! <out>/config.json            the RunConfig that produced everything below
//! <out>/manifest.json          corpus manifest
//! <out>/data/<id>.csv          training tuples
//! <out>/models/<id>.json       trained surrogate
//! <out>/models/<id>.train.json training report for that surrogate
//! <out>/train_log.csv          function_id,epochs,best_val_loss,status
//! <out>/scores.csv             per-function scores
//! <out>/summary.csv            per-method threshold, accuracy, time
//! <out>/evaluation.json        full-precision evaluation
//! <out>/score_distribution.csv scores by method and label, for plotting
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{MethodSummary, SUMMARY_HEADER};
use crate::error::{Error, Result};
use crate::evaluate::{parse_methods, run_evaluation, EvaluationReport, Failure, ALL_METHODS};
use crate::funcgen::{generate_corpus, sample_training_data, CorpusConfig, Manifest, SamplingConfig, SymbolicFunction};
use crate::mlp::{load_model, save_model, train, Dataset, Mlp, TrainConfig, TrainReport};
use crate::util::{derive_seed, sig6, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; the corpus, datasets, initial weights and shuffles all
    /// derive from it.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub methods: Vec<u8>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            sampling: SamplingConfig::default(),
            train: TrainConfig::default(),
            methods: ALL_METHODS.to_vec(),
            workers: 0,
        }
    }
}

/// Command-line overrides applied on top of a stored or loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub methods: Option<String>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialisation cannot fail");
        s.push('\n');
        s
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(m) = &o.methods {
            self.methods = parse_methods(m)?;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.methods.is_empty() || self.methods.iter().any(|m| !(1..=8).contains(m)) {
            return Err(Error::InvalidConfig(format!("bad method set {:?}", self.methods)));
        }
        if self.sampling.test_points < 2 {
            return Err(Error::InvalidConfig("sampling.test_points must be at least 2".into()));
        }
        Ok(())
    }

    /// The corpus config with the master seed applied.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            rng_seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
    }
}

/// Per-function seeds: `(dataset, shuffling, initial weights)`.
pub fn function_seeds(f: &SymbolicFunction) -> (u64, u64, u64) {
    (derive_seed(f.seed, 1), derive_seed(f.seed, 2), derive_seed(f.seed, 3))
}

/// Samples a function's training data and trains its surrogate from scratch.
pub fn train_surrogate(f: &SymbolicFunction, cfg: &RunConfig) -> Result<(Mlp, TrainReport)> {
    let data = sample_training_data(f, &cfg.sampling, function_seeds(f).0)?;
    train_on(f, &data, cfg)
}

fn train_on(f: &SymbolicFunction, data: &Dataset, cfg: &RunConfig) -> Result<(Mlp, TrainReport)> {
    let (_, shuffle, init) = function_seeds(f);
    let tc = TrainConfig {
        rng_seed: shuffle,
        ..cfg.train.clone()
    };
    train(&Mlp::default_surrogate(f.arity, init), data, &tc)
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn data(&self, id: &str) -> PathBuf {
        self.root.join("data").join(format!("{id}.csv"))
    }

    pub fn model(&self, id: &str) -> PathBuf {
        self.root.join("models").join(format!("{id}.json"))
    }

    pub fn train_report(&self, id: &str) -> PathBuf {
        self.root.join("models").join(format!("{id}.train.json"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation.json")
    }

    pub fn distribution(&self) -> PathBuf {
        self.root.join("score_distribution.csv")
    }

    fn require(&self, path: PathBuf, hint: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::IncompleteRun {
                path: self.root.clone(),
                hint: format!("{} is missing; {hint}", path.display()),
            })
        }
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.require(self.config(), "run `addsep generate` first")?)
    }

    pub fn load_corpus(&self) -> Result<Vec<SymbolicFunction>> {
        Manifest::read(&self.require(self.manifest(), "run `addsep generate` first")?)?.functions()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn dataset_csv(data: &Dataset) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    w.write_record(&header).expect("in-memory write");
    for (x, y) in data.inputs.iter().zip(&data.outputs) {
        w.write_record(x.iter().chain([y]).map(f64::to_string))
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
    for row in r.deserialize::<Vec<f64>>() {
        let mut vals = row.map_err(|e| csv_err(path, e))?;
        let y = vals
            .pop()
            .ok_or_else(|| Error::Format(format!("{}: empty row", path.display())))?;
        outputs.push(y);
        inputs.push(vals);
    }
    Dataset::new(inputs, outputs)
}

/// Writes config, manifest and training data. Same config, same bytes.
pub fn cmd_generate(cfg: &RunConfig, run: &RunDir) -> Result<Vec<SymbolicFunction>> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus_config())?;
    write_atomic(&run.config(), cfg.to_json().as_bytes())?;
    Manifest::new(cfg.corpus_config(), &corpus).write(&run.manifest())?;
    let pool = cfg.pool()?;
    pool.install(|| {
        corpus.par_iter().try_for_each(|f| {
            let data = sample_training_data(f, &cfg.sampling, function_seeds(f).0)?;
            write_atomic(&run.data(&f.id), dataset_csv(&data).as_bytes())
        })
    })?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub function_id: String,
    pub epochs: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
    pub log: Vec<TrainLogRow>,
}

fn existing_training(run: &RunDir, f: &SymbolicFunction) -> Option<TrainReport> {
    let net = load_model(&run.model(&f.id)).ok()?;
    if net.input_dim() != f.arity {
        return None;
    }
    let text = std::fs::read_to_string(run.train_report(&f.id)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Trains one surrogate per manifest entry, skipping entries that already
/// have a valid model. Per-function failures are logged, not fatal.
pub fn cmd_train(run: &RunDir, o: &Overrides) -> Result<TrainSummary> {
    let mut cfg = run.load_config()?;
    cfg.apply(&Overrides {
        seed: None,
        ..o.clone()
    })?;
    let corpus = run.load_corpus()?;
    let pool = cfg.pool()?;
    let rows: Vec<(TrainLogRow, bool)> = pool.install(|| {
        corpus
            .par_iter()
            .map(|f| -> Result<(TrainLogRow, bool)> {
                if let Some(rep) = existing_training(run, f) {
                    return Ok((log_row(f, Ok(&rep)), true));
                }
                let data = read_dataset(&run.require(run.data(&f.id), "re-run `addsep generate`")?)?;
                match train_on(f, &data, &cfg) {
                    Ok((net, rep)) => {
                        let mut stored = rep.clone();
                        stored.loss_history.clear();
                        save_model(&net, &run.model(&f.id))?;
                        let json = serde_json::to_string_pretty(&stored)?;
                        write_atomic(&run.train_report(&f.id), json.as_bytes())?;
                        Ok((log_row(f, Ok(&rep)), false))
                    }
                    Err(e) => Ok((log_row(f, Err(&e)), false)),
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut summary = TrainSummary::default();
    let mut csv = String::from("function_id,epochs,best_val_loss,status\n");
    for (row, skipped) in rows {
        if row.status != "ok" {
            summary.failed += 1;
        } else if skipped {
            summary.skipped += 1;
        } else {
            summary.trained += 1;
        }
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.function_id,
            row.epochs.map_or(String::new(), |e| e.to_string()),
            row.best_val_loss.map_or(String::new(), sig6),
            row.status
        ));
        summary.log.push(row);
    }
    write_atomic(&run.train_log(), csv.as_bytes())?;
    Ok(summary)
}

fn log_row(f: &SymbolicFunction, r: std::result::Result<&TrainReport, &Error>) -> TrainLogRow {
    match r {
        Ok(rep) => TrainLogRow {
            function_id: f.id.clone(),
            epochs: Some(rep.epochs_run),
            best_val_loss: Some(rep.best_validation_loss),
            status: "ok".into(),
        },
        Err(e) => TrainLogRow {
            function_id: f.id.clone(),
            epochs: None,
            best_val_loss: None,
            status: match e {
                Error::NonFiniteLoss { .. } => "non_finite_loss".into(),
                other => format!("error: {}", other.to_string().replace(',', ";")),
            },
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub config: RunConfig,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvaluateOptions {
    pub oracle: bool,
    pub partial: bool,
}

/// Scores every function (on its surrogate, or analytically with `oracle`)
/// and writes the score, summary and sidecar files.
pub fn cmd_evaluate(run: &RunDir, o: &Overrides, opts: EvaluateOptions) -> Result<EvaluationReport> {
    let mut cfg = run.load_config()?;
    cfg.apply(&Overrides {
        seed: None,
        ..o.clone()
    })?;
    let corpus = run.load_corpus()?;
    let mut models: Vec<Option<Mlp>> = Vec::with_capacity(corpus.len());
    let mut missing = Vec::new();
    for f in &corpus {
        if opts.oracle {
            models.push(None);
            continue;
        }
        let path = run.model(&f.id);
        if path.exists() {
            models.push(Some(load_model(&path)?));
        } else if opts.partial {
            models.push(None);
            missing.push(f.id.clone());
        } else {
            return Err(Error::MissingModel { id: f.id.clone(), path });
        }
    }
    let jobs: Vec<(&SymbolicFunction, Option<&Mlp>)> = corpus
        .iter()
        .zip(&models)
        .filter(|(_, m)| opts.oracle || m.is_some())
        .map(|(f, m)| (f, m.as_ref()))
        .collect();
    let pool = cfg.pool()?;
    let mut report = pool.install(|| run_evaluation(&jobs, &cfg.methods, &cfg.sampling))?;
    report.oracle = opts.oracle;
    for id in missing {
        for &m in &cfg.methods {
            report.failures.push(Failure {
                function_id: id.clone(),
                method: m,
                error: "no trained model (--partial)".into(),
            });
        }
    }
    write_atomic(
        &run.scores(),
        crate::classify::scores_csv(&report.records, &report.summaries).as_bytes(),
    )?;
    write_atomic(
        &run.summary(),
        crate::classify::summary_csv(&report.summaries).as_bytes(),
    )?;
    let file = EvaluationFile {
        config: cfg,
        report: report.clone(),
    };
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    write_atomic(&run.evaluation(), json.as_bytes())?;
    Ok(report)
}

/// One summary CSV row, kept as the printed strings.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: u8,
    pub threshold: String,
    pub accuracy: String,
    pub mean_time: String,
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != SUMMARY_HEADER {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    r.deserialize::<(u8, String, String, String)>()
        .map(|row| {
            let (method, threshold, accuracy, mean_time) = row.map_err(|e| csv_err(path, e))?;
            Ok(SummaryRow {
                method,
                threshold,
                accuracy,
                mean_time,
            })
        })
        .collect()
}

/// Renders the accuracy and timing tables (from `summary.csv`, verbatim) and
/// writes the score-distribution file.
pub fn cmd_report(run: &RunDir) -> Result<String> {
    let summary_path = run.require(run.summary(), "run `addsep evaluate` first")?;
    let mut rows = read_summary(&summary_path)?;
    let eval_path = run.require(run.evaluation(), "run `addsep evaluate` first")?;
    let text = std::fs::read_to_string(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
    let eval: EvaluationFile = serde_json::from_str(&text)?;

    let key = |r: &SummaryRow| r.accuracy.parse::<f64>().unwrap_or(f64::NEG_INFINITY);
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.method.cmp(&b.method)));

    let mut out = String::new();
    let mode = if eval.report.oracle {
        "analytic functions"
    } else {
        "trained surrogates"
    };
    out.push_str(&format!(
        "{} functions scored on {mode}; {}\n\n",
        eval.report
            .records
            .iter()
            .map(|r| &r.function_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        eval.report.note
    ));
    out.push_str(&format!(
        "{:<10} {:>12} {:>12}\n",
        "classifier", "accuracy", "threshold"
    ));
    for r in &rows {
        out.push_str(&format!("{:<10} {:>12} {:>12}\n", r.method, r.accuracy, r.threshold));
    }
    out.push_str(&format!("\n{:<10} {:>14}\n", "classifier", "mean time (s)"));
    for r in &rows {
        out.push_str(&format!("{:<10} {:>14}\n", r.method, r.mean_time));
    }
    let fp: Vec<&MethodSummary> = eval.report.summaries.iter().filter(|s| s.false_positives > 0).collect();
    for s in fp {
        out.push_str(&format!(
            "\nclassifier {}: {} non-separable function(s) score exactly 0 and are misclassified at threshold 0\n",
            s.method, s.false_positives
        ));
    }
    if !eval.report.failures.is_empty() {
        out.push_str(&format!(
            "\n{} scoring failure(s) excluded; see evaluation.json\n",
            eval.report.failures.len()
        ));
    }

    let mut dist = String::from("method,label,score,signed_score\n");
    for r in &eval.report.records {
        dist.push_str(&format!("{},{},{},{}\n", r.method, r.label, r.score, r.signed_score));
    }
    write_atomic(&run.distribution(), dist.as_bytes())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig {
            seed: 4,
            corpus: CorpusConfig {
                arities: vec![2],
                max_functions: Some(4),
                ..Default::default()
            },
            train: TrainConfig {
                patience: 20,
                max_epochs: 200,
                ..Default::default()
            },
            workers: 1,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = Dataset::new(vec![vec![0.1, -2.5], vec![1.0 / 3.0, 3.0]], vec![1e-300, -7.25]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_atomic(&p, dataset_csv(&d).as_bytes()).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            methods: Some("1,5-6".into()),
            workers: Some(2),
        })
        .unwrap();
        assert_eq!((cfg.seed, cfg.methods.clone(), cfg.workers), (9, vec![1, 5, 6], 2));
        assert_eq!(cfg.corpus_config().rng_seed, 9);
        assert!(cfg
            .apply(&Overrides {
                methods: Some("9".into()),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        assert!(matches!(cmd_report(&run), Err(Error::IncompleteRun { .. })));
        assert!(matches!(
            cmd_train(&run, &Overrides::default()),
            Err(Error::IncompleteRun { .. })
        ));

        cmd_generate(&small_config(), &run).unwrap();
        assert!(matches!(
            cmd_evaluate(&run, &Overrides::default(), EvaluateOptions::default()),
            Err(Error::MissingModel { .. })
        ));
        let first = cmd_train(&run, &Overrides::default()).unwrap();
        assert_eq!((first.trained, first.skipped, first.failed), (4, 0, 0));
        let again = cmd_train(&run, &Overrides::default()).unwrap();
        assert_eq!((again.trained, again.skipped), (0, 4));
        assert_eq!(first.log, again.log);

        let rep = cmd_evaluate(&run, &Overrides::default(), EvaluateOptions::default()).unwrap();
        assert_eq!(rep.summaries.len(), 8);
        let text = cmd_report(&run).unwrap();
        assert!(text.contains("classifier"));
        assert!(run.distribution().exists());
    }
}
