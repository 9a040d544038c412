//! End-to-end runs: config parsing, group-level splits, training protocols,
//! evaluation and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{build_cohort, write_cohort, Cohort, CohortExample, CohortKind, DEFAULT_MAX_CONTROLS};
use crate::datamodel::{load_dataset, Dataset, Source};
use crate::error::{Error, Result, StageExt};
use crate::eval::{evaluate_binary, evaluate_model, BenchmarkRules, EvalReport, Method, ScoredSet};
use crate::features::{build_vocabulary, intersect_vocabularies, FeatureVector, Featurizer, Vocabulary};
use crate::nnet::{self, Hyperparams, Model, TrainingLog};
use crate::phecode::{curated_map, parse_phecode_map, PhecodeMap};
use crate::rng;
use crate::synth::{generate_population, write_population, SynthConfig};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("SMIRISK_GIT_DESCRIBE"));
pub const MODEL_FILE: &str = "model.bin";
pub const VOCABULARY_FILE: &str = "vocabulary.txt";
pub const COHORT_FILE: &str = "cohort.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.1,
            test: 0.3,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::Config(format!("split fractions must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SplitPart {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "VAL")]
    Val,
    #[serde(rename = "TEST")]
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Val, SplitPart::Test];
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitPart::Train => "TRAIN",
            SplitPart::Val => "VAL",
            SplitPart::Test => "TEST",
        })
    }
}

/// Match group → split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub groups: BTreeMap<u32, SplitPart>,
}

impl SplitAssignment {
    pub fn part_of(&self, group: u32) -> SplitPart {
        self.groups[&group]
    }

    pub fn examples<'a>(&self, cohort: &'a Cohort, part: SplitPart) -> Vec<&'a CohortExample> {
        cohort
            .examples
            .iter()
            .filter(|e| self.part_of(e.match_group) == part)
            .collect()
    }

    pub fn group_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for p in self.groups.values() {
            out[*p as usize] += 1;
        }
        out
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier part.
pub fn split_sizes(n: usize, f: &SplitFractions) -> [usize; 3] {
    let exact = [f.train, f.val, f.test].map(|x| x * n as f64);
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffles match groups with the seed and cuts them into TRAIN/VAL/TEST.
/// Fails if any split ends up with a single label.
pub fn split_cohort(cohort: &Cohort, f: &SplitFractions, seed: u64) -> Result<SplitAssignment> {
    f.validate()?;
    let mut groups: Vec<u32> = cohort
        .examples
        .iter()
        .map(|e| e.match_group)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if groups.is_empty() {
        return Err(Error::EmptyCohort(cohort.kind.to_string()));
    }
    groups.shuffle(&mut rng::seeded(seed));
    let [n_train, n_val, _] = split_sizes(groups.len(), f);
    let assignment = SplitAssignment {
        groups: groups
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let part = if i < n_train {
                    SplitPart::Train
                } else if i < n_train + n_val {
                    SplitPart::Val
                } else {
                    SplitPart::Test
                };
                (g, part)
            })
            .collect(),
    };
    for part in SplitPart::ALL {
        let ex = assignment.examples(cohort, part);
        let n_pos = ex.iter().filter(|e| e.label == 1).count();
        if n_pos == 0 || n_pos == ex.len() {
            return Err(Error::SingleClass {
                context: format!("{part} split of the {} cohort", cohort.kind),
                n_pos,
                n_neg: ex.len() - n_pos,
            });
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataPaths {
    pub persons: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub phecode_map: Option<PathBuf>,
}

impl DataPaths {
    fn required(&self, prefix: &str) -> Result<(&Path, &Path)> {
        match (&self.persons, &self.events) {
            (Some(p), Some(e)) => Ok((p, e)),
            _ => Err(Error::Config(format!("{prefix}.persons and {prefix}.events must be set"))),
        }
    }
}

/// Everything a run needs, parsed from a flat `key=value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataPaths,
    pub source: Option<Source>,
    pub pretrain: DataPaths,
    pub cohort_kind: CohortKind,
    pub max_controls: usize,
    pub split: SplitFractions,
    pub hp: Hyperparams,
    /// Explicit network seed; derived from `seed` when absent.
    pub nnet_seed: Option<u64>,
    pub model_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub synth_seed: Option<u64>,
    pub report_inputs: Vec<PathBuf>,
    /// Effective settings, echoed into the manifest.
    pub echo: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("out"),
            data: DataPaths::default(),
            source: None,
            pretrain: DataPaths::default(),
            cohort_kind: CohortKind::AllAge,
            max_controls: DEFAULT_MAX_CONTROLS,
            split: SplitFractions::default(),
            hp: Hyperparams::default(),
            nnet_seed: None,
            model_dir: None,
            synth: SynthConfig::new(Source::Claims, 50_000, 42),
            synth_seed: None,
            report_inputs: Vec::new(),
            echo: BTreeMap::new(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data.persons" => self.data.persons = path(),
            "data.events" => self.data.events = path(),
            "data.phecode_map" => self.data.phecode_map = path(),
            "data.source" => self.source = Some(parse_value(key, value)?),
            "pretrain.persons" => self.pretrain.persons = path(),
            "pretrain.events" => self.pretrain.events = path(),
            "pretrain.phecode_map" => self.pretrain.phecode_map = path(),
            "cohort.kind" => self.cohort_kind = parse_value(key, value)?,
            "cohort.max_controls" => self.max_controls = parse_value(key, value)?,
            "split.train" => self.split.train = parse_value(key, value)?,
            "split.val" => self.split.val = parse_value(key, value)?,
            "split.test" => self.split.test = parse_value(key, value)?,
            "nnet.embedding_dim" => self.hp.embedding_dim = parse_value(key, value)?,
            "nnet.hidden1" => self.hp.hidden1 = parse_value(key, value)?,
            "nnet.hidden2" => self.hp.hidden2 = parse_value(key, value)?,
            "nnet.learning_rate" => self.hp.learning_rate = parse_value(key, value)?,
            "nnet.batch_size" => self.hp.batch_size = parse_value(key, value)?,
            "nnet.max_epochs" => self.hp.max_epochs = parse_value(key, value)?,
            "nnet.patience" => self.hp.patience = parse_value(key, value)?,
            "nnet.seed" => self.nnet_seed = Some(parse_value(key, value)?),
            "model.dir" => self.model_dir = path(),
            "synth.n_persons" => s.n_persons = parse_value(key, value)?,
            "synth.source" => s.source = parse_value(key, value)?,
            "synth.shared_dx" => s.vocab.shared_dx = parse_value(key, value)?,
            "synth.specific_dx" => s.vocab.specific_dx = parse_value(key, value)?,
            "synth.rx" => s.vocab.rx = parse_value(key, value)?,
            "synth.base_logit" => s.base_logit = parse_value(key, value)?,
            "synth.smi_annual_rate_cap" => s.smi_annual_rate_cap = parse_value(key, value)?,
            "synth.event_rate" => s.event_rate = parse_value(key, value)?,
            "synth.conditions_per_person" => s.conditions_per_person = parse_value(key, value)?,
            "synth.frequency_tilt" => s.frequency_tilt = parse_value(key, value)?,
            "synth.age_effect" => s.age_effect = parse_value(key, value)?,
            "synth.male_effect" => s.male_effect = parse_value(key, value)?,
            "synth.signal_scale" => s.signal_scale = parse_value(key, value)?,
            "synth.min_year" => s.year_range.0 = parse_value(key, value)?,
            "synth.max_year" => s.year_range.1 = parse_value(key, value)?,
            "synth.seed" => self.synth_seed = Some(parse_value(key, value)?),
            "report.inputs" => {
                self.report_inputs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            _ => match key.strip_prefix("synth.risk.") {
                Some(code) => {
                    s.risk_weights.insert(code.to_string(), parse_value(key, value)?);
                }
                None => return Err(Error::Config(format!("unknown config key {key}"))),
            },
        }
        self.echo.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.hp.validate()
    }

    /// Network hyperparameters with the effective seed filled in.
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            seed: self.nnet_seed.unwrap_or_else(|| rng::derive_seed(self.seed, "nnet")),
            ..self.hp
        }
    }

    pub fn split_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "split")
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.synth_seed.unwrap_or(self.seed),
            ..self.synth.clone()
        }
    }

    fn seeds(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("run", self.seed),
            ("cohort", self.seed),
            ("split", self.split_seed()),
            ("nnet", self.hyperparams().seed),
            ("synth", self.synth_config().seed),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Protocol {
    #[serde(rename = "SINGLE_SOURCE")]
    SingleSource,
    #[serde(rename = "CROSS_EVAL")]
    CrossEval,
    #[serde(rename = "TWO_STEP")]
    TwoStep,
    #[serde(rename = "USE_CASE")]
    UseCase,
    #[serde(rename = "BENCH")]
    Bench,
}

/// One row of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub protocol: String,
    pub dataset: String,
    pub cohort: String,
    pub auc: Option<f64>,
    pub threshold: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub prevalence: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub version: String,
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enums serialize to strings"),
    }
}

impl ReportRow {
    pub fn new(r: &EvalReport, protocol: Protocol, seed: u64) -> Self {
        ReportRow {
            method: r.method.to_string(),
            protocol: label(&protocol),
            dataset: r.dataset.clone(),
            cohort: r.cohort.to_string(),
            auc: r.auc,
            threshold: r.threshold,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            prevalence: r.prevalence,
            n_pos: r.n_pos,
            n_neg: r.n_neg,
            seed,
            version: VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub generated_at: String,
    pub rows: Vec<ReportRow>,
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let mut w = crate::datamodel::create(path)?;
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    let report = Report {
        generated_at: timestamp(),
        rows: rows.to_vec(),
    };
    write_text(&dir.join(REPORT_JSON), &to_json(&report))?;
    let mut csv = String::from("method,dataset,cohort,auc,sensitivity,specificity,prevalence\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.dataset,
            r.cohort,
            fmt_opt(r.auc),
            r.sensitivity,
            r.specificity,
            r.prevalence
        ));
    }
    write_text(&dir.join(REPORT_CSV), &csv)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Report> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub generated_at: String,
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<&'static str, u64>,
    pub counts: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            generated_at: timestamp(),
            version: VERSION.to_string(),
            command: command.to_string(),
            config: cfg.echo.clone(),
            seeds: cfg.seeds(),
            counts: BTreeMap::new(),
        }
    }

    pub fn count(&mut self, key: impl Into<String>, value: impl Serialize) {
        self.counts
            .insert(key.into(), serde_json::to_value(value).expect("serializable"));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(MANIFEST_FILE), &to_json(self))
    }
}

/// Dataset, Phecode map, cohort and split for one source.
pub struct PreparedCohort {
    pub dataset: Dataset,
    pub phecodes: PhecodeMap,
    pub cohort: Cohort,
    pub split: SplitAssignment,
}

impl PreparedCohort {
    pub fn part(&self, part: SplitPart) -> Vec<&CohortExample> {
        self.split.examples(&self.cohort, part)
    }

    fn record_counts(&self, m: &mut Manifest, prefix: &str) {
        m.count(format!("{prefix}persons"), self.dataset.persons().len());
        m.count(format!("{prefix}events"), self.dataset.events().len());
        m.count(format!("{prefix}codes"), self.dataset.codes().len());
        m.count(format!("{prefix}cohort"), &self.cohort.stats);
        let groups = self.split.group_counts();
        for (i, part) in SplitPart::ALL.iter().enumerate() {
            let ex = self.part(*part);
            let pos = ex.iter().filter(|e| e.label == 1).count();
            m.count(
                format!("{prefix}split_{}", part.to_string().to_lowercase()),
                serde_json::json!({"groups": groups[i], "examples": ex.len(), "positives": pos}),
            );
        }
    }
}

pub fn load_data(paths: &DataPaths, prefix: &str, source: Option<Source>) -> Result<(Dataset, PhecodeMap)> {
    let (persons, events) = paths.required(prefix)?;
    let dataset = load_dataset(persons, events, source.unwrap_or(Source::Claims)).stage("load")?;
    let phecodes = match &paths.phecode_map {
        Some(p) => parse_phecode_map(p).stage("load")?,
        None => curated_map(),
    };
    Ok((dataset, phecodes))
}

/// Builds the cohort and split for an already loaded dataset.
pub fn prepare(dataset: Dataset, phecodes: PhecodeMap, kind: CohortKind, cfg: &RunConfig) -> Result<PreparedCohort> {
    let cohort = build_cohort(kind, &dataset, &phecodes, cfg.max_controls, cfg.seed).stage("cohort")?;
    let split = split_cohort(&cohort, &cfg.split, cfg.split_seed()).stage("split")?;
    Ok(PreparedCohort {
        dataset,
        phecodes,
        cohort,
        split,
    })
}

fn labels(ex: &[&CohortExample]) -> Vec<bool> {
    ex.iter().map(|e| e.label == 1).collect()
}

/// A trained network with the vocabulary its embedding rows refer to.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub vocab: Vocabulary,
    pub log: TrainingLog,
}

impl TrainedModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.vocab.write(dir.join(VOCABULARY_FILE))?;
        nnet::save_model(&self.model, dir.join(MODEL_FILE))
    }

    pub fn load(dir: &Path) -> Result<(Model, Vocabulary)> {
        let model = nnet::load_model(dir.join(MODEL_FILE))?;
        let vocab = Vocabulary::read(dir.join(VOCABULARY_FILE))?;
        model.check_vocabulary(&vocab)?;
        Ok((model, vocab))
    }
}

/// Vocabulary from TRAIN, initial model from `init`, then fit on TRAIN
/// with early stopping on VAL.
pub fn fit(
    prep: &PreparedCohort,
    hp: &Hyperparams,
    init: impl FnOnce(&Vocabulary) -> Result<Model>,
) -> Result<TrainedModel> {
    let train = prep.part(SplitPart::Train);
    let val = prep.part(SplitPart::Val);
    let vocab = build_vocabulary(&train, &prep.dataset).stage("vocabulary")?;
    let featurizer = Featurizer::new(&prep.dataset, &vocab);
    let (train_x, val_x) = (featurizer.featurize_all(&train), featurizer.featurize_all(&val));
    let start = init(&vocab).stage("init")?;
    let (model, log) =
        nnet::train(&start, &train_x, &labels(&train), &val_x, &labels(&val), hp).stage("train")?;
    log::info!(
        "trained {} epochs, best epoch {} with validation AUC {:.4}",
        log.epochs.len(),
        log.best_epoch,
        log.best_val_auc
    );
    Ok(TrainedModel { model, vocab, log })
}

/// Scores, labels and threshold-selection data for one evaluated model.
#[derive(Debug, Clone)]
pub struct ModelEvaluation {
    pub report: EvalReport,
    pub val: ScoredSet,
    pub test: ScoredSet,
}

fn score(model: &Model, featurizer: &Featurizer, ex: &[&CohortExample]) -> Result<ScoredSet> {
    let x: Vec<FeatureVector> = featurizer.featurize_all(ex);
    ScoredSet::new(model.predict_all(&x)?, labels(ex))
}

pub fn evaluate_trained(prep: &PreparedCohort, model: &Model, featurizer: &Featurizer) -> Result<ModelEvaluation> {
    let val = score(model, featurizer, &prep.part(SplitPart::Val))?;
    let test = score(model, featurizer, &prep.part(SplitPart::Test))?;
    let dataset = prep.dataset.source.to_string();
    let report = evaluate_model(&val, &test, &dataset, prep.cohort.kind)?;
    Ok(ModelEvaluation { report, val, test })
}

/// Both rule-based benchmarks on TEST. Substance Phecodes are removed from
/// the triggers for the substance cohort.
pub fn evaluate_benchmarks(prep: &PreparedCohort) -> Result<Vec<EvalReport>> {
    let rules = BenchmarkRules::new(prep.cohort.kind == CohortKind::Substance);
    let phe = prep.phecodes.resolve(prep.dataset.codes());
    let test = prep.part(SplitPart::Test);
    let y = labels(&test);
    let dataset = prep.dataset.source.to_string();
    [Method::Bench1, Method::Bench2]
        .into_iter()
        .map(|m| {
            let preds: Vec<u8> = test.iter().map(|ex| rules.predict(m, ex, &prep.dataset, &phe)).collect();
            evaluate_binary(m, &preds, &y, &dataset, prep.cohort.kind)
        })
        .collect()
}

/// Result of a training or evaluation run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<ReportRow>,
    pub evaluation: Option<ModelEvaluation>,
    pub trained: Option<TrainedModel>,
}

impl RunOutcome {
    pub fn model_auc(&self) -> Option<f64> {
        self.evaluation.as_ref().and_then(|e| e.report.auc)
    }

    pub fn row(&self, method: Method) -> Option<&ReportRow> {
        let name = method.to_string();
        self.rows.iter().find(|r| r.method == name)
    }
}

fn create_out(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn finish(
    cfg: &RunConfig,
    prep: &PreparedCohort,
    trained: TrainedModel,
    evaluation: ModelEvaluation,
    protocol: Protocol,
    mut manifest: Manifest,
) -> Result<RunOutcome> {
    let out = create_out(cfg)?;
    let mut rows = vec![ReportRow::new(&evaluation.report, protocol, cfg.seed)];
    for r in evaluate_benchmarks(prep).stage("benchmarks")? {
        rows.push(ReportRow::new(&r, protocol, cfg.seed));
    }
    write_cohort(out.join(COHORT_FILE), &prep.cohort)?;
    trained.save(out)?;
    write_report(out, &rows)?;
    prep.record_counts(&mut manifest, "");
    manifest.count("vocabulary", trained.vocab.len());
    manifest.count("training", &trained.log);
    manifest.write(out)?;
    Ok(RunOutcome {
        rows,
        evaluation: Some(evaluation),
        trained: Some(trained),
    })
}

/// Synthetic population into `out`.
pub fn run_synth(cfg: &RunConfig) -> Result<usize> {
    let sc = cfg.synth_config();
    let (dataset, truth) = generate_population(&sc).stage("synth")?;
    let out = create_out(cfg)?;
    write_population(out, &dataset, &truth, &sc.vocab)?;
    let mut m = Manifest::new("synth", cfg);
    m.count("persons", dataset.persons().len());
    m.count("events", dataset.events().len());
    m.count("codes", dataset.codes().len());
    m.count("onsets", truth.n_onsets());
    m.write(out)?;
    Ok(dataset.persons().len())
}

/// Cohort only, written to `cohort.csv`.
pub fn run_cohort(cfg: &RunConfig) -> Result<Cohort> {
    let (dataset, phecodes) = load_data(&cfg.data, "data", cfg.source)?;
    let cohort = build_cohort(cfg.cohort_kind, &dataset, &phecodes, cfg.max_controls, cfg.seed).stage("cohort")?;
    let out = create_out(cfg)?;
    write_cohort(out.join(COHORT_FILE), &cohort)?;
    let mut m = Manifest::new("cohort", cfg);
    m.count("persons", dataset.persons().len());
    m.count("cohort", &cohort.stats);
    m.write(out)?;
    Ok(cohort)
}

/// Train and evaluate on one source.
pub fn run_single_source(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (dataset, phecodes) = load_data(&cfg.data, "data", cfg.source)?;
    run_single_source_on(cfg, dataset, phecodes)
}

pub fn run_single_source_on(cfg: &RunConfig, dataset: Dataset, phecodes: PhecodeMap) -> Result<RunOutcome> {
    cfg.validate()?;
    let hp = cfg.hyperparams();
    let prep = prepare(dataset, phecodes, cfg.cohort_kind, cfg)?;
    let trained = fit(&prep, &hp, |v| nnet::init(v, &hp))?;
    let featurizer = Featurizer::new(&prep.dataset, &trained.vocab);
    let evaluation = evaluate_trained(&prep, &trained.model, &featurizer).stage("evaluate")?;
    finish(cfg, &prep, trained, evaluation, Protocol::SingleSource, Manifest::new("train", cfg))
}

/// Scores the data source with a model trained elsewhere, using only the
/// codes both training vocabularies share.
pub fn run_cross_eval(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg
        .model_dir
        .as_ref()
        .ok_or_else(|| Error::Config("model.dir must point at a trained model".into()))?;
    let (model, model_vocab) = TrainedModel::load(dir).stage("load model")?;
    let (dataset, phecodes) = load_data(&cfg.data, "data", cfg.source)?;
    let prep = prepare(dataset, phecodes, cfg.cohort_kind, cfg)?;
    let target_vocab = build_vocabulary(&prep.part(SplitPart::Train), &prep.dataset).stage("vocabulary")?;
    let shared = intersect_vocabularies(&model_vocab, &target_vocab).stage("vocabulary")?;
    let featurizer = Featurizer::restricted(&prep.dataset, &model_vocab, &shared);
    let evaluation = evaluate_trained(&prep, &model, &featurizer).stage("evaluate")?;

    let out = create_out(cfg)?;
    let mut rows = vec![ReportRow::new(&evaluation.report, Protocol::CrossEval, cfg.seed)];
    for r in evaluate_benchmarks(&prep).stage("benchmarks")? {
        rows.push(ReportRow::new(&r, Protocol::CrossEval, cfg.seed));
    }
    write_cohort(out.join(COHORT_FILE), &prep.cohort)?;
    shared.write(out.join(VOCABULARY_FILE))?;
    write_report(out, &rows)?;
    let mut m = Manifest::new("cross-eval", cfg);
    prep.record_counts(&mut m, "");
    m.count("model_vocabulary", model_vocab.len());
    m.count("target_vocabulary", target_vocab.len());
    m.count("shared_vocabulary", shared.len());
    m.write(out)?;
    Ok(RunOutcome {
        rows,
        evaluation: Some(evaluation),
        trained: None,
    })
}

/// Pretrains on `pretrain.*`, transfers onto the target vocabulary and
/// fine-tunes on `data.*`.
pub fn run_two_step(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    cfg.pretrain.required("pretrain")?;
    cfg.data.required("data")?;
    let (pre_data, pre_phe) = load_data(&cfg.pretrain, "pretrain", None).stage("pretrain")?;
    let (dataset, phecodes) = load_data(&cfg.data, "data", cfg.source)?;
    run_two_step_on(cfg, pre_data, pre_phe, dataset, phecodes)
}

pub fn run_two_step_on(
    cfg: &RunConfig,
    pre_data: Dataset,
    pre_phe: PhecodeMap,
    dataset: Dataset,
    phecodes: PhecodeMap,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let hp = cfg.hyperparams();
    let pre_prep = prepare(pre_data, pre_phe, CohortKind::AllAge, cfg).stage("pretrain")?;
    let pretrained = fit(&pre_prep, &hp, |v| nnet::init(v, &hp)).stage("pretrain")?;
    let prep = prepare(dataset, phecodes, cfg.cohort_kind, cfg)?;
    let trained = fit(&prep, &hp, |v| nnet::transfer_init(&pretrained.model, &pretrained.vocab, v, &hp))?;
    let featurizer = Featurizer::new(&prep.dataset, &trained.vocab);
    let evaluation = evaluate_trained(&prep, &trained.model, &featurizer).stage("evaluate")?;
    let mut m = Manifest::new("two-step", cfg);
    pre_prep.record_counts(&mut m, "pretrain_");
    m.count("pretrain_vocabulary", pretrained.vocab.len());
    m.count("pretrain_training", &pretrained.log);
    finish(cfg, &prep, trained, evaluation, Protocol::TwoStep, m)
}

/// Fine-tunes the model in `model.dir` on a use-case cohort.
pub fn run_use_case(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.cohort_kind == CohortKind::AllAge {
        return Err(Error::Config("use-case runs need cohort.kind=AGE18 or SUBSTANCE".into()));
    }
    let dir = cfg
        .model_dir
        .as_ref()
        .ok_or_else(|| Error::Config("model.dir must point at the base model".into()))?;
    let (base, base_vocab) = TrainedModel::load(dir).stage("load model")?;
    let (dataset, phecodes) = load_data(&cfg.data, "data", cfg.source)?;
    let hp = cfg.hyperparams();
    let prep = prepare(dataset, phecodes, cfg.cohort_kind, cfg)?;
    let trained = fit(&prep, &hp, |v| nnet::transfer_init(&base, &base_vocab, v, &hp))?;
    let featurizer = Featurizer::new(&prep.dataset, &trained.vocab);
    let evaluation = evaluate_trained(&prep, &trained.model, &featurizer).stage("evaluate")?;
    finish(cfg, &prep, trained, evaluation, Protocol::UseCase, Manifest::new("use-case", cfg))
}

/// Benchmarks only, on the TEST split.
pub fn run_bench(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (dataset, phecodes) = load_data(&cfg.data, "data", cfg.source)?;
    let prep = prepare(dataset, phecodes, cfg.cohort_kind, cfg)?;
    let rows: Vec<ReportRow> = evaluate_benchmarks(&prep)
        .stage("benchmarks")?
        .iter()
        .map(|r| ReportRow::new(r, Protocol::Bench, cfg.seed))
        .collect();
    let out = create_out(cfg)?;
    write_cohort(out.join(COHORT_FILE), &prep.cohort)?;
    write_report(out, &rows)?;
    let mut m = Manifest::new("bench", cfg);
    prep.record_counts(&mut m, "");
    m.write(out)?;
    Ok(RunOutcome {
        rows,
        evaluation: None,
        trained: None,
    })
}

/// Concatenates the rows of earlier reports.
pub fn run_report(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    if cfg.report_inputs.is_empty() {
        return Err(Error::Config("report.inputs must list at least one report.json".into()));
    }
    let mut rows = Vec::new();
    for p in &cfg.report_inputs {
        rows.extend(read_report(p)?.rows);
    }
    let out = create_out(cfg)?;
    write_report(out, &rows)?;
    let mut m = Manifest::new("report", cfg);
    m.count("rows", rows.len());
    m.write(out)?;
    Ok(rows)
}
