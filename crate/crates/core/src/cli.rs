//! Command-line front end.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    faithfulness_table, importance_uncertainty_corr, CorrStudyConfig, MaskingProtocol,
};
use crate::attribution::Pool;
use crate::baselines::{score_detector, BaselineConfig, Detector, ScoreRecord};
use crate::error::{Error, Result};
use crate::labeling::{label_record, rouge_l_f, CorrectnessConfig, LabelRecord, Measure};
use crate::metrics::{evaluate, EvalResult, LabeledScores};
use crate::report::{ansi_header, build_views, render_ansi, render_html, render_index};
use crate::trace::{
    concentrated_fixture, decode_attention, encode_attention, make_synthetic_trace, read_dataset,
    separation_fixture, write_dataset, DatasetReader, GenerationTrace, TraceDataset, HEADER_LEN,
};
use crate::uncertainty::{calibrate_epsilon, reppl, score_trace, RePPLConfig, AUTO_EPSILON_RATIO};

#[derive(Debug, Parser)]
#[command(
    name = "reppl",
    version,
    about = "Hallucination scoring for generation traces"
)]
pub struct Cli {
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Off => log::LevelFilter::Off,
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every example with one or more detectors.
    Score(ScoreArgs),
    /// Derive hallucination labels from gold answers or similarities.
    Label(LabelArgs),
    /// Compute AUC, accuracy, correlation and PRR per detector.
    Evaluate(EvaluateArgs),
    /// Masking faithfulness table of token-level explanation scores.
    Perturb(PerturbArgs),
    /// Correlation between attribution importance and uncertainty.
    CorrStudy(CorrStudyArgs),
    /// Token heatmaps of input and output uncertainty.
    Explain(ExplainArgs),
    /// Run the built-in checks on synthetic fixtures.
    Selftest(SelftestArgs),
    /// Write a bundled synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScoringArgs {
    #[arg(long, value_enum, default_value_t = Pool::Avg)]
    pub pool: Pool,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// A non-negative number, or `auto` for a fraction of the mean InnerPPL.
    #[arg(long, default_value = "0.005", value_parser = parse_epsilon)]
    pub epsilon: Epsilon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Fixed(f64),
    Auto,
}

fn parse_epsilon(s: &str) -> std::result::Result<Epsilon, String> {
    if s == "auto" {
        return Ok(Epsilon::Auto);
    }
    s.parse::<f64>()
        .map(Epsilon::Fixed)
        .map_err(|_| format!("expected a number or `auto`, got `{s}`"))
}

fn parse_detector(s: &str) -> std::result::Result<Detector, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ScoringArgs {
    fn config(&self) -> Result<RePPLConfig> {
        let cfg = RePPLConfig {
            alpha: self.alpha,
            epsilon: match self.epsilon {
                Epsilon::Fixed(e) => e,
                Epsilon::Auto => 0.0,
            },
            pool: self.pool,
            ..RePPLConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Trace dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Comma-separated detectors.
    #[arg(long, value_delimiter = ',', default_value = "reppl", value_parser = parse_detector)]
    pub detectors: Vec<Detector>,
    /// RePPL scores go here; other detectors to `<stem>_<detector>.jsonl`
    /// next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Measure::EmbeddingSimilarity)]
    pub measure: Measure,
    /// Defaults to 0.9 for embedding similarity and 0.5 for ROUGE-L.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long)]
    pub labels: PathBuf,
    /// Value of the dataset column.
    #[arg(long, default_value = "all")]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
    pub ratios: Vec<f64>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrStudyArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated slices to include; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub slices: Option<Vec<String>>,
    /// Also zero the lowest fraction of each score before correlating.
    #[arg(long, default_value_t = 0.0)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 10_000)]
    pub shuffles: usize,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// JSON destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Html,
    Ansi,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Html)]
    pub format: ReportFormat,
    /// Output directory; ANSI output goes to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flag examples whose negated RePPL exceeds this value.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Also validate an externally written dataset.
    #[arg(long)]
    pub external: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fixture {
    Separation,
    Concentrated,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Fixture::Separation)]
    pub fixture: Fixture,
    #[arg(long)]
    pub out: PathBuf,
}

/// One line of a RePPL scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RePPLRecord {
    pub example_id: String,
    pub inner_ppl: f64,
    pub outer_ppl: f64,
    pub reppl: f64,
    pub input_cv: Vec<f64>,
    pub input_pseudo_conf: Vec<f64>,
    pub greedy_logprobs: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScoreLine {
    Detector(ScoreRecord),
    Reppl(RePPLRecord),
}

impl ScoreLine {
    fn into_record(self) -> ScoreRecord {
        match self {
            ScoreLine::Detector(r) => r,
            ScoreLine::Reppl(r) => ScoreRecord {
                detector: Detector::Reppl,
                example_id: r.example_id,
                value: r.reppl,
                orientation: Detector::Reppl.orientation(),
            },
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level.filter())
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Score(a) => cmd_score(a).map(|_| 0),
        Command::Label(a) => cmd_label(a).map(|_| 0),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| 0),
        Command::Perturb(a) => cmd_perturb(a).map(|_| 0),
        Command::CorrStudy(a) => cmd_corr_study(a, cli.seed).map(|_| 0),
        Command::Explain(a) => cmd_explain(a).map(|_| 0),
        Command::Selftest(a) => cmd_selftest(a),
        Command::Synth(a) => cmd_synth(a).map(|_| 0),
    }
}

fn load_traces(path: &Path) -> Result<Vec<GenerationTrace>> {
    let reader = read_dataset(path)?;
    let traces: Vec<GenerationTrace> = reader
        .ids()
        .par_iter()
        .map(|id| reader.load(id))
        .collect::<Result<_>>()?;
    info!("loaded {} examples from {}", traces.len(), path.display());
    Ok(traces)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Path of the scores file for a non-RePPL detector.
pub fn detector_path(out: &Path, detector: Detector) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("scores");
    out.with_file_name(format!("{stem}_{}.jsonl", detector.name()))
}

fn reppl_records(traces: &[GenerationTrace], scoring: &ScoringArgs) -> Result<Vec<RePPLRecord>> {
    let cfg = scoring.config()?;
    let scored: Vec<_> = traces
        .par_iter()
        .map(|t| score_trace(t, &cfg))
        .collect::<Result<_>>()?;
    let epsilon = match scoring.epsilon {
        Epsilon::Fixed(e) => e,
        Epsilon::Auto => {
            let inner: Vec<f64> = scored.iter().map(|u| u.inner_ppl).collect();
            let e = calibrate_epsilon(&inner, AUTO_EPSILON_RATIO);
            info!("calibrated epsilon = {e}");
            e
        }
    };
    traces
        .iter()
        .zip(scored)
        .map(|(t, u)| {
            let value = reppl(u.inner_ppl, u.outer_ppl, epsilon);
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "reppl for {} is {value}",
                    t.example_id
                )));
            }
            Ok(RePPLRecord {
                example_id: t.example_id.clone(),
                inner_ppl: u.inner_ppl,
                outer_ppl: u.outer_ppl,
                reppl: value,
                input_cv: u.input_cv,
                input_pseudo_conf: u.input_pseudo_conf,
                greedy_logprobs: u.output_logprobs,
            })
        })
        .collect()
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let traces = load_traces(&a.input)?;
    let reppl_cfg = a.scoring.config()?;
    let baseline_cfg = BaselineConfig::default();
    let mut detectors = a.detectors.clone();
    detectors.dedup();
    for detector in detectors {
        if detector == Detector::Reppl {
            write_file(&a.out, &jsonl(&reppl_records(&traces, &a.scoring)?)?)?;
            continue;
        }
        let results: Vec<Result<ScoreRecord>> = traces
            .par_iter()
            .map(|t| score_detector(detector, t, &reppl_cfg, &baseline_cfg))
            .collect();
        let mut rows = Vec::with_capacity(results.len());
        let mut skipped = 0usize;
        for r in results {
            match r {
                Ok(row) => rows.push(row),
                Err(Error::MissingField { field, example_id }) => {
                    warn!("{detector}: skipping {example_id}, missing {field}");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if skipped > 0 {
            warn!("{detector}: skipped {skipped} of {} examples", traces.len());
        }
        write_file(&detector_path(&a.out, detector), &jsonl(&rows)?)?;
    }
    Ok(())
}

fn cmd_label(a: &LabelArgs) -> Result<()> {
    let cfg = CorrectnessConfig {
        measure: a.measure,
        threshold: a.threshold.unwrap_or(a.measure.default_threshold()),
    };
    cfg.validate()?;
    let traces = load_traces(&a.input)?;
    let rows: Vec<LabelRecord> = traces
        .par_iter()
        .map(|t| label_record(t, &cfg))
        .collect::<Result<_>>()?;
    write_file(&a.out, &jsonl(&rows)?)
}

fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let labels: Vec<LabelRecord> = parse_jsonl(path)?;
    let mut seen = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        if l.label > 1 {
            return Err(Error::Format(format!(
                "label for {} must be 0 or 1",
                l.example_id
            )));
        }
        if seen.insert(l.example_id.as_str(), i).is_some() {
            return Err(Error::Format(format!(
                "duplicate label for {}",
                l.example_id
            )));
        }
    }
    Ok(labels)
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Evaluates every detector found in `score_files` against `labels`,
/// returning rows in first-appearance order.
pub fn evaluate_files(
    score_files: &[PathBuf],
    labels: &[LabelRecord],
) -> Result<Vec<(Detector, EvalResult)>> {
    let mut by_detector: Vec<(Detector, HashMap<String, ScoreRecord>)> = Vec::new();
    for path in score_files {
        for line in parse_jsonl::<ScoreLine>(path)? {
            let rec = line.into_record();
            let idx = match by_detector.iter().position(|(d, _)| *d == rec.detector) {
                Some(i) => i,
                None => {
                    by_detector.push((rec.detector, HashMap::new()));
                    by_detector.len() - 1
                }
            };
            if by_detector[idx]
                .1
                .insert(rec.example_id.clone(), rec)
                .is_some()
            {
                return Err(Error::Format(format!(
                    "{}: duplicate example",
                    path.display()
                )));
            }
        }
    }
    let known: HashMap<&str, ()> = labels.iter().map(|l| (l.example_id.as_str(), ())).collect();
    let mut results = Vec::new();
    for (detector, scores) in by_detector {
        let unlabeled = scores
            .keys()
            .filter(|id| !known.contains_key(id.as_str()))
            .count();
        if unlabeled > 0 {
            warn!("{detector}: {unlabeled} scored examples have no label");
        }
        let mut ls = LabeledScores {
            scores: Vec::new(),
            labels: Vec::new(),
            quality: Some(Vec::new()),
        };
        let mut missing = 0usize;
        for l in labels {
            match scores.get(&l.example_id) {
                Some(s) => {
                    ls.scores.push(s.oriented());
                    ls.labels.push(l.hallucinated());
                    if let Some(q) = ls.quality.as_mut() {
                        q.push(l.quality);
                    }
                }
                None => missing += 1,
            }
        }
        if missing > 0 {
            warn!("{detector}: {missing} labeled examples have no score");
        }
        results.push((detector, evaluate(&ls)?));
    }
    Ok(results)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let labels = load_labels(&a.labels)?;
    let mut csv = String::from("detector,dataset,auc,acc,corr,prr\n");
    for (detector, r) in evaluate_files(&a.scores, &labels)? {
        let _ = writeln!(
            csv,
            "{detector},{},{},{},{},{}",
            a.dataset,
            pct(r.auc),
            pct(r.acc_gmean),
            pct(r.spearman),
            pct(r.prr)
        );
    }
    write_file(&a.out, &csv)
}

fn labels_for(traces: &[GenerationTrace], path: &Path) -> Result<Vec<bool>> {
    let labels: BTreeMap<String, bool> = load_labels(path)?
        .into_iter()
        .map(|l| {
            let h = l.hallucinated();
            (l.example_id, h)
        })
        .collect();
    traces
        .iter()
        .map(|t| {
            labels
                .get(&t.example_id)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no label for {}", t.example_id)))
        })
        .collect()
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn cmd_perturb(a: &PerturbArgs) -> Result<()> {
    let traces = load_traces(&a.input)?;
    let labels = labels_for(&traces, &a.labels)?;
    let protocol = MaskingProtocol {
        ratios: a.ratios.clone(),
    };
    let table = faithfulness_table(&traces, &labels, &a.scoring.config()?, &protocol)?;
    emit(a.out.as_deref(), &table.to_csv())
}

fn cmd_corr_study(a: &CorrStudyArgs, seed: u64) -> Result<()> {
    let traces = load_traces(&a.input)?;
    let study = CorrStudyConfig {
        mask_ratio: a.mask_ratio,
        shuffles: a.shuffles,
        seed,
        slices: a.slices.clone(),
        ..CorrStudyConfig::default()
    };
    let result = importance_uncertainty_corr(&traces, &a.scoring.config()?, &study)?;
    let mut json = serde_json::to_string_pretty(&result)?;
    json.push('\n');
    emit(a.out.as_deref(), &json)
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let traces = load_traces(&a.input)?;
    let records = reppl_records(&traces, &a.scoring)?;
    let cfg = a.scoring.config()?;
    let mut scores: Vec<_> = traces
        .par_iter()
        .map(|t| score_trace(t, &cfg))
        .collect::<Result<_>>()?;
    for (u, r) in scores.iter_mut().zip(&records) {
        u.reppl = r.reppl;
    }
    let views = build_views(&traces, &scores, a.threshold)?;
    match (a.format, &a.out) {
        (ReportFormat::Ansi, None) => {
            for v in &views {
                println!("{}", ansi_header(v));
                println!("{}", render_ansi(v));
            }
            Ok(())
        }
        (format, Some(dir)) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let rendered: Vec<(String, String)> = views
                .par_iter()
                .map(|v| match format {
                    ReportFormat::Html => (format!("{}.html", v.example_id), render_html(v)),
                    ReportFormat::Ansi => (format!("{}.ans", v.example_id), render_ansi(v) + "\n"),
                })
                .collect();
            for (name, body) in &rendered {
                write_file(&dir.join(name), body)?;
            }
            match format {
                ReportFormat::Html => write_file(&dir.join("index.html"), &render_index(&views)),
                ReportFormat::Ansi => {
                    let index: String = views.iter().map(|v| ansi_header(v) + "\n").collect();
                    write_file(&dir.join("index.txt"), &index)
                }
            }
        }
        (ReportFormat::Html, None) => Err(Error::InvalidArgument("html output needs --out".into())),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let ds = match a.fixture {
        Fixture::Separation => separation_fixture(),
        Fixture::Concentrated => concentrated_fixture().0,
    };
    write_dataset(&ds, &a.out)
}

struct Check {
    name: &'static str,
    outcome: std::result::Result<(), String>,
}

fn check(name: &'static str, f: impl FnOnce() -> std::result::Result<(), String>) -> Check {
    Check { name, outcome: f() }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn builtin_checks() -> Vec<Check> {
    let cfg = RePPLConfig::default();
    vec![
        check("zero-noise traces have zero InnerPPL", || {
            for seed in 0..10 {
                let t = make_synthetic_trace(seed, 5, &[3, 4, 2], 0.0);
                let u = score_trace(&t, &cfg).map_err(|e| e.to_string())?;
                ensure(u.inner_ppl == 0.0, || {
                    format!("seed {seed}: InnerPPL {}", u.inner_ppl)
                })?;
                let expected = -cfg.epsilon * u.outer_ppl;
                ensure((u.reppl - expected).abs() <= 1e-12, || {
                    format!("seed {seed}: RePPL {}", u.reppl)
                })?;
            }
            Ok(())
        }),
        check("separation fixture is perfectly separated", || {
            let ds = separation_fixture();
            let labels: Vec<bool> = (0..ds.records.len()).map(|k| k % 2 == 1).collect();
            let scores: Vec<f64> = ds
                .records
                .iter()
                .map(|t| score_trace(t, &cfg).map(|u| -u.reppl))
                .collect::<Result<_>>()
                .map_err(|e| e.to_string())?;
            let r = evaluate(&LabeledScores {
                scores,
                labels,
                quality: None,
            })
            .map_err(|e| e.to_string())?;
            ensure(
                r.auc == 1.0 && r.acc_gmean == 1.0 && r.spearman == 1.0 && r.prr == 1.0,
                || format!("{r:?}"),
            )
        }),
        check("attention encoding round-trips", || {
            let t = make_synthetic_trace(3, 4, &[2, 3], 0.5);
            for stack in t.attn.iter().chain([&t.greedy_attn]) {
                let back = decode_attention(&encode_attention(stack)).map_err(|e| e.to_string())?;
                ensure(&back == stack, || "decoded stack differs".into())?;
            }
            Ok(())
        }),
        check("pooled attributions are row-stochastic", || {
            let t = make_synthetic_trace(5, 4, &[3, 3], 1.0);
            for pool in Pool::ALL {
                let m = pool.apply(&t.attn[0]);
                for i in 0..m.seq_len() {
                    let s: f64 = m.row(i).iter().sum();
                    ensure((s - 1.0).abs() <= 1e-6, || {
                        format!("{pool}: row {i} sums to {s}")
                    })?;
                    ensure(m.row(i)[i + 1..].iter().all(|&v| v == 0.0), || {
                        format!("{pool}: row {i} not causal")
                    })?;
                }
            }
            Ok(())
        }),
        check("masking keeps concentrated uncertainty", || {
            let (ds, labels) = concentrated_fixture();
            let table = faithfulness_table(&ds.records, &labels, &cfg, &MaskingProtocol::default())
                .map_err(|e| e.to_string())?;
            let drop = table.inner_drop().unwrap_or(f64::NAN);
            ensure(drop < 0.02, || format!("AUC drop {drop}"))
        }),
        check("ROUGE-L of a text with itself is 1", || {
            ensure(rouge_l_f("the cat sat", "The cat sat.") == 1.0, || {
                "self-similarity below 1".into()
            })
        }),
    ]
}

fn external_checks(path: &Path) -> Vec<Check> {
    let mut checks = Vec::new();
    let loaded = read_dataset(path).and_then(|r| r.load_all().map(|ds| (r, ds)));
    let (reader, ds) = match loaded {
        Ok(pair) => {
            checks.push(check("external dataset passes validation", || Ok(())));
            pair
        }
        Err(e) => {
            checks.push(check("external dataset passes validation", || {
                Err(e.to_string())
            }));
            return checks;
        }
    };
    if ds.manifest.dataset == separation_fixture().manifest.dataset {
        checks.push(check("external fixture matches the built-in one", || {
            compare_fixture(&reader, &ds, &separation_fixture())
        }));
    }
    checks
}

fn compare_fixture(
    reader: &DatasetReader,
    ext: &TraceDataset,
    ours: &TraceDataset,
) -> std::result::Result<(), String> {
    ensure(ext.records.len() == ours.records.len(), || {
        "record count differs".into()
    })?;
    for (a, b) in ext.records.iter().zip(&ours.records) {
        ensure(a.example_id == b.example_id, || {
            format!("{} != {}", a.example_id, b.example_id)
        })?;
        for (n, stack) in b.attn.iter().enumerate() {
            let file = reader
                .record_dir(&a.example_id)
                .join(format!("attn_sample_{n}.bin"));
            let bytes = fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let expected = encode_attention(stack);
            ensure(
                bytes[..HEADER_LEN.min(bytes.len())] == expected[..HEADER_LEN],
                || format!("{}: header differs", file.display()),
            )?;
            ensure(bytes == expected, || {
                format!("{}: payload differs", file.display())
            })?;
        }
        ensure(a.greedy_attn == b.greedy_attn, || {
            format!("{}: greedy attention differs", a.example_id)
        })?;
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> Result<i32> {
    let mut checks = builtin_checks();
    if let Some(p) = &a.external {
        checks.extend(external_checks(p));
    }
    let mut failed = 0;
    for c in &checks {
        match &c.outcome {
            Ok(()) => println!("ok    {}", c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {}: {msg}", c.name);
            }
        }
    }
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
