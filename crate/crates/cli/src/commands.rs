use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use apex_core::data_model::{load_manifest, read_head, read_spectrogram, Manifest};
use apex_core::disentangler::{fit_with_observer, invariance_report, tensors_of, DisentangleState};
use apex_core::evaluator::metrics::{auroc, average_precision, eer, Condition, MetricReport};
use apex_core::evaluator::study::{masking_study, StudyConfig};
use apex_core::explainer::{explain as explain_sample, render_explanation};
use apex_core::prototype_bank::{build_bank, load_bank, persist_bank, Polarity, DEFAULT_BANK_SIZE};
use apex_core::synth::{generate, GroundTruth, SynthBackbone, SynthConfig, GROUND_TRUTH_FILE, HEAD_FILE};
use apex_core::{fold_head, ApexError, ClassifierHead, DisentangleConfig, FeatureMapSet, Scheme, Split};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use crate::{CheckFailed, DataArgs};

/// `println!` that returns write errors (a closed pipe) instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

/// Residual above which a fit is rejected.
const FIT_INVARIANCE_LIMIT: f64 = 1e-4;
/// Residual above which `invariance` reports a breach.
const INVARIANCE_LIMIT: f64 = 1e-5;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

struct Dataset {
    base: PathBuf,
    manifest: Manifest,
    features: FeatureMapSet,
    head: ClassifierHead,
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let manifest = load_manifest(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let base = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let features = FeatureMapSet::load(&manifest, &base).context("loading feature maps")?;
    let head_path = args.head.clone().unwrap_or_else(|| base.join(HEAD_FILE));
    let head = read_head(&head_path).with_context(|| format!("reading head {}", head_path.display()))?;
    if head.channels() != features.channels() {
        return Err(ApexError::Shape(format!(
            "head has {} channels, feature maps have {}",
            head.channels(),
            features.channels()
        ))
        .into());
    }
    if head.num_classes() != manifest.num_classes() {
        return Err(ApexError::Shape(format!(
            "head scores {} classes, manifest names {}",
            head.num_classes(),
            manifest.num_classes()
        ))
        .into());
    }
    Ok(Dataset {
        base,
        manifest,
        features,
        head,
    })
}

/// Restricts a set to one split, keeping manifest order.
fn subset(features: &FeatureMapSet, split: Option<Split>) -> Result<FeatureMapSet> {
    let Some(split) = split else {
        return Ok(features.clone());
    };
    let idx = features.indices(split);
    if idx.is_empty() {
        return Err(ApexError::Data(format!("the manifest has no {split} samples")).into());
    }
    Ok(FeatureMapSet::new(
        idx.iter().map(|&i| features.maps[i].clone()).collect(),
        idx.iter().map(|&i| features.labels[i].clone()).collect(),
        vec![split; idx.len()],
    )?)
}

fn load_state(path: &Path, features: &FeatureMapSet) -> Result<DisentangleState> {
    let mut state = DisentangleState::load(path).with_context(|| format!("reading state {}", path.display()))?;
    if state.channels() != features.channels() {
        return Err(ApexError::Shape(format!(
            "state is {0}x{0} but feature maps have {1} channels",
            state.channels(),
            features.channels()
        ))
        .into());
    }
    state.resolve_indices(features)?;
    Ok(state)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ------------------------------------------------------------------ synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub freq: usize,
    #[arg(long, default_value_t = 8)]
    pub time: usize,
    #[arg(long, default_value_t = 32)]
    pub input_freq: usize,
    #[arg(long, default_value_t = 32)]
    pub input_time: usize,
    #[arg(long, default_value_t = 4)]
    pub concepts_per_kind: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 2)]
    pub max_concepts: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 2.3)]
    pub mixing_norm: f64,
    /// Give every concept kind the same total activation.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub equal_energy: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        channels: a.channels,
        freq: a.freq,
        time: a.time,
        input_freq: a.input_freq,
        input_time: a.input_time,
        concepts_per_kind: a.concepts_per_kind,
        num_classes: a.classes,
        num_samples: a.samples,
        max_concepts_per_sample: a.max_concepts,
        noise_sigma: a.noise_sigma,
        mixing_norm: a.mixing_norm,
        equal_energy: a.equal_energy,
        seed: a.seed,
        ..Default::default()
    };
    let ds = generate(&cfg)?;
    let manifest = ds.write(&a.out)?;
    let t = &ds.truth;
    let train = ds.features.indices(Split::Train).len();
    out!(
        "manifest={} samples={} train={} test={} channels={} concepts={} classes={} condition_number={:.3} seed={}",
        manifest.display(),
        cfg.num_samples,
        train,
        cfg.num_samples - train,
        cfg.channels,
        cfg.num_concepts(),
        cfg.num_classes,
        t.condition_number,
        cfg.seed
    );
    for (c, concepts) in t.class_concepts.iter().enumerate() {
        let kinds: Vec<String> = concepts
            .iter()
            .map(|&j| format!("{j}:{}", cfg.concept_kind(j).as_str()))
            .collect();
        out!("class={c} concepts={}", kinds.join(","));
    }
    Ok(())
}

// -------------------------------------------------------------------- fit

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Where to write the fitted state.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value = "square", value_parser = parse_scheme)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub recalc_interval: usize,
    #[arg(long, default_value_t = 100)]
    pub proto_count_start: usize,
    #[arg(long, default_value_t = 5)]
    pub proto_count_end: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: ApexError| e.to_string())
}

fn parse_polarity(s: &str) -> std::result::Result<Polarity, String> {
    s.parse().map_err(|e: ApexError| e.to_string())
}

pub fn fit(a: FitArgs) -> Result<()> {
    let config = DisentangleConfig {
        scheme: a.scheme,
        epochs: a.epochs,
        recalc_interval: a.recalc_interval,
        proto_count_start: a.proto_count_start,
        proto_count_end: a.proto_count_end,
        batch_size: a.batch_size,
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    config.validate()?;
    let ds = load_dataset(&a.data)?;
    let features = subset(&ds.features, a.split.split())?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log = String::new();
    let _ = writeln!(
        log,
        "scheme={} samples={} epochs={} lr={} batch_size={} seed={}",
        config.scheme,
        features.len(),
        config.epochs,
        config.lr,
        config.batch_size,
        config.seed
    );
    let mut breach: Option<(usize, f64)> = None;
    let outcome = fit_with_observer(&config, &features, &ds.head, |e, _| {
        let _ = writeln!(log, "{}", e.to_line());
        if breach.is_none() && (e.invariance_residual > FIT_INVARIANCE_LIMIT || e.argmax_agreement < 1.0) {
            breach = Some((e.epoch, e.invariance_residual));
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            fs::write(&log_path, &log)?;
            return Err(e.into());
        }
    };
    let _ = writeln!(
        log,
        "initial_mean_purity={:.6} final_mean_purity={:.6}",
        outcome.initial_mean_purity, outcome.final_mean_purity
    );
    fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    if let Some((epoch, r)) = breach {
        return Err(CheckFailed(format!(
            "output invariance breached at epoch {epoch}: residual {r:.3e} > {FIT_INVARIANCE_LIMIT:e}; state not written"
        ))
        .into());
    }
    outcome.state.save(&a.out)?;
    out!(
        "state={} log={} initial_mean_purity={:.4} final_mean_purity={:.4}",
        a.out.display(),
        log_path.display(),
        outcome.initial_mean_purity,
        outcome.final_mean_purity
    );
    Ok(())
}

// ------------------------------------------------------------------- bank

#[derive(Args, Debug)]
pub struct BankArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prototypes kept per channel.
    #[arg(long, default_value_t = DEFAULT_BANK_SIZE)]
    pub m: usize,
    #[arg(long, default_value = "positive", value_parser = parse_polarity)]
    pub polarity: Polarity,
}

pub fn bank(a: BankArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let state = load_state(&a.state, &ds.features)?;
    let train = subset(&ds.features, Some(Split::Train))?;
    let folded = fold_head(&ds.head, &state)?;
    let bank = build_bank(&state, &train, &folded, a.m, a.polarity)?;
    persist_bank(&bank, &a.out)?;
    out!(
        "bank={} scheme={} polarity={:?} m={} channels={}",
        a.out.display(),
        bank.scheme,
        bank.polarity,
        bank.m,
        bank.per_channel.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- explain

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Output directory for records, overlays and heatmaps.
    #[arg(long)]
    pub out: PathBuf,
    /// Samples to explain (repeatable); default: every sample of `--split`.
    #[arg(long = "sample")]
    pub samples: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = apex_core::explainer::DEFAULT_TOP_K)]
    pub top_k: usize,
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let state = load_state(&a.state, &ds.features)?;
    let bank = load_bank(&a.bank).with_context(|| format!("reading bank {}", a.bank.display()))?;
    if bank.scheme != state.scheme() {
        return Err(ApexError::Config(format!(
            "state uses the {} scheme but the bank was built with {}",
            state.scheme(),
            bank.scheme
        ))
        .into());
    }
    let folded = fold_head(&ds.head, &state)?;
    let indices: Vec<usize> = if a.samples.is_empty() {
        match a.split.split() {
            Some(s) => ds.features.indices(s),
            None => (0..ds.features.len()).collect(),
        }
    } else {
        a.samples
            .iter()
            .map(|id| {
                ds.manifest
                    .samples
                    .iter()
                    .position(|r| &r.sample_id == id)
                    .ok_or_else(|| anyhow!(ApexError::Validation(format!("sample '{id}' is not in the manifest"))))
            })
            .collect::<Result<_>>()?
    };
    for i in indices {
        let rec = &ds.manifest.samples[i];
        let expl = explain_sample(&ds.features.maps[i], &state, &folded, &bank, a.top_k)?;
        let spec = match &rec.spectrogram {
            Some(p) => Some(read_spectrogram(ds.base.join(p)).with_context(|| format!("reading spectrogram of {}", rec.sample_id))?),
            None => None,
        };
        render_explanation(&expl, spec.as_ref(), &a.out)?;
        let top: Vec<String> = expl
            .channels
            .iter()
            .map(|c| format!("{}:{:.4}", c.channel, c.contribution))
            .collect();
        out!("sample={} predicted={} top={}", expl.sample_id, expl.predicted_class, top.join(","));
    }
    Ok(())
}

// ------------------------------------------------------------- invariance

#[derive(Args, Debug)]
pub struct InvarianceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub state: PathBuf,
}

pub fn invariance(a: InvarianceArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let state = load_state(&a.state, &ds.features)?;
    let folded = fold_head(&ds.head, &state)?;
    let report = invariance_report(&ds.head, &folded, &state.u, &tensors_of(&ds.features))?;
    out!(
        "samples={} max_rel_deviation={:.3e} argmax_agreement={:.6}",
        report.samples, report.max_rel_deviation, report.argmax_agreement
    );
    if report.max_rel_deviation > INVARIANCE_LIMIT || report.argmax_agreement < 1.0 {
        bail!(CheckFailed(format!(
            "output invariance breached: deviation {:.3e} (limit {INVARIANCE_LIMIT:e}), argmax agreement {}",
            report.max_rel_deviation, report.argmax_agreement
        )));
    }
    Ok(())
}

// -------------------------------------------------------------- mask-eval

#[derive(Args, Debug)]
pub struct MaskEvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fitted states, one per scheme (repeatable).
    #[arg(long = "state", required = true)]
    pub states: Vec<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = apex_core::evaluator::masking::DEFAULT_FLOOR)]
    pub attenuation_floor: f64,
    #[arg(long, default_value_t = apex_core::evaluator::masking::DEFAULT_SOFTNESS)]
    pub edge_softness: usize,
    /// Random-mask seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub seeds: Vec<u64>,
}

pub fn mask_eval(a: MaskEvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    // masked spectrograms must go back through the real model; only the
    // synthetic benchmark ships one
    let truth_path = ds.base.join(GROUND_TRUTH_FILE);
    if !truth_path.exists() {
        return Err(ApexError::Config(format!(
            "no forward model for masked inputs: {} not found (mask-eval runs on the synthetic benchmark; \
             for exported models, re-export masked features and score them with `metrics`)",
            truth_path.display()
        ))
        .into());
    }
    let truth = GroundTruth::load(&truth_path)?;
    if truth.samples.len() != ds.features.len() {
        return Err(ApexError::Validation("ground truth and manifest disagree on the sample count".into()).into());
    }
    let spectrograms = ds
        .manifest
        .samples
        .iter()
        .map(|r| {
            let p = r
                .spectrogram
                .as_ref()
                .ok_or_else(|| ApexError::Data(format!("sample {} has no spectrogram", r.sample_id)))?;
            Ok(read_spectrogram(ds.base.join(p))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = SynthBackbone::new(truth, ds.head.clone());
    let states = a
        .states
        .iter()
        .map(|p| load_state(p, &ds.features))
        .collect::<Result<Vec<_>>>()?;
    let folded = states
        .iter()
        .map(|s| fold_head(&ds.head, s))
        .collect::<apex_core::Result<Vec<_>>>()?;
    let pairs: Vec<_> = states.iter().zip(&folded).collect();
    let samples = match a.split.split() {
        Some(s) => ds.features.indices(s),
        None => (0..ds.features.len()).collect(),
    };
    let config = StudyConfig {
        attenuation_floor: a.attenuation_floor,
        edge_softness: a.edge_softness,
        seeds: a.seeds,
    };
    let report = masking_study(&ds.features, &spectrograms, &samples, &pairs, &model, &config)?;
    write_json(&a.out, &report)?;
    write!(std::io::stdout(), "{}", report.to_table())?;
    for s in &report.schemes {
        out!(
            "scheme={} cmap_gap={:.4} t1_gap={:.4}",
            s.scheme,
            s.cmap_gap(),
            s.t1_gap()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- metrics

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    /// Pick from the file extension (`.csv` or `.jsonl`).
    Auto,
    /// `score,label` rows with label 0/1; an optional header row.
    Csv,
    /// One `{"scores": [...], "labels": [...]}` object per sample.
    Jsonl,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Scores file.
    pub input: PathBuf,
    #[arg(long, default_value = "auto")]
    pub format: MetricsFormat,
    /// Also write the results as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct ScoredSample {
    scores: Vec<f64>,
    labels: Vec<usize>,
}

fn read_binary_csv(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| ApexError::Format(e.to_string()))?;
        if row.len() != 2 {
            return Err(ApexError::Format(format!("line {}: expected `score,label`", line + 1)).into());
        }
        let score = row[0].parse::<f64>();
        if line == 0 && score.is_err() {
            continue; // header
        }
        let score = score.map_err(|_| ApexError::Format(format!("line {}: bad score '{}'", line + 1, &row[0])))?;
        let label = match &row[1] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(ApexError::Format(format!("line {}: label must be 0 or 1, got '{other}'", line + 1)).into())
            }
        };
        scores.push(score);
        labels.push(label);
    }
    Ok((scores, labels))
}

/// Per-sample class scores and label sets.
type MultiLabel = (Vec<Vec<f64>>, Vec<Vec<usize>>);

fn read_multilabel_jsonl(path: &Path) -> Result<MultiLabel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let s: ScoredSample =
            serde_json::from_str(line).map_err(|e| ApexError::Format(format!("line {}: {e}", i + 1)))?;
        scores.push(s.scores);
        labels.push(s.labels);
    }
    Ok((scores, labels))
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let format = match a.format {
        MetricsFormat::Auto => match a.input.extension().and_then(|e| e.to_str()) {
            Some("csv") => MetricsFormat::Csv,
            Some("jsonl") | Some("json") => MetricsFormat::Jsonl,
            _ => {
                return Err(ApexError::Config("cannot infer the format from the extension; pass --format".into()).into())
            }
        },
        f => f,
    };
    let result = if format == MetricsFormat::Csv {
        let (scores, labels) = read_binary_csv(&a.input)?;
        let positives = labels.iter().filter(|&&l| l).count();
        let ap = average_precision(&scores, &labels)?;
        let eer = eer(&scores, &labels)?;
        let auroc = auroc(&scores, &labels)?;
        out!(
            "n={} positives={positives} eer={eer:.6} auroc={auroc:.6} ap={:.6}",
            scores.len(),
            ap.unwrap_or(f64::NAN)
        );
        serde_json::json!({ "n": scores.len(), "positives": positives, "eer": eer, "auroc": auroc, "ap": ap })
    } else {
        let (scores, labels) = read_multilabel_jsonl(&a.input)?;
        let report = MetricReport::from_logits(&scores, &labels, Condition::NoMask)?;
        out!(
            "n={} aeer={:.6} cmap={:.6} auroc={:.6} t1_acc={:.6}",
            scores.len(),
            report.aeer,
            report.cmap,
            report.auroc,
            report.t1_acc
        );
        serde_json::to_value(&report)?
    };
    if let Some(out) = &a.out {
        write_json(out, &result)?;
    }
    Ok(())
}
