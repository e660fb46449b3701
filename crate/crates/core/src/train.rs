//! Run configuration and the drivers behind the command line: training,
//! generation over a split, scoring, the four-variant ablation and the
//! one-factor hyperparameter sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use convqg_grad::AdamW;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auxiliary::Auxiliary;
use crate::checkpoint::{self, CheckpointMeta};
use crate::constraints::render;
use crate::decode::{self, GenerationRecord};
use crate::metrics::{self, EvalCorpus, EvalInstance, MetricsReport};
use crate::model::{ModelConfig, ParamStore};
use crate::objective::{self, BetaSchedule, LogLine, LossBreakdown, LossConfig, PreparedExample, Variant};
use crate::toyworld::{self, Example, Split};
use crate::vocab::Vocab;
use crate::{Error, Result};

/// Environment variable capping generation parallelism.
pub const THREADS_ENV: &str = "CONVQG_THREADS";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ValCel,
    ValBleu4,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_cel" => Ok(Selection::ValCel),
            "val_bleu4" => Ok(Selection::ValBleu4),
            _ => Err(Error::Config(format!("unknown selection `{s}` (val_cel | val_bleu4)"))),
        }
    }
}

/// Beta in a flat config: a number means a fixed value, a string names a schedule.
mod beta_field {
    use super::BetaSchedule;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Name(String),
    }

    pub fn serialize<S: Serializer>(b: &BetaSchedule, s: S) -> Result<S::Ok, S::Error> {
        match *b {
            BetaSchedule::Fixed { value } => Repr::Num(value),
            g => Repr::Name(g.label()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BetaSchedule, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(value) => Ok(BetaSchedule::Fixed { value }),
            Repr::Name(n) => n.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything a run depends on. Serialized flat; absent keys take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub margin: f64,
    #[serde(with = "beta_field")]
    pub beta: BetaSchedule,
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_sent: usize,
    pub dropout: f64,
    pub embedder_seed: u64,
    /// Record shape of the data files: kvqg, vqa, vqgcoco or fvqa.
    pub format: String,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub select_by: Selection,
    pub beams: usize,
    /// Seeds of the ablation runs.
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::toy(0);
        let l = LossConfig::default();
        Self {
            seed: 7,
            epochs: 5,
            batch_size: 16,
            lr: 2e-5,
            weight_decay: 0.05,
            alpha: l.alpha,
            margin: l.margin,
            beta: l.beta,
            variant: l.variant,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_len: m.max_len,
            d_sent: m.d_sent,
            dropout: m.dropout,
            embedder_seed: 0,
            format: "kvqg".into(),
            train: None,
            val: None,
            test: None,
            out_dir: None,
            select_by: Selection::ValCel,
            beams: decode::DEFAULT_BEAMS,
            ablation_seeds: vec![7, 8, 9],
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, margin: self.margin, beta: self.beta, variant: self.variant }
    }

    pub fn set_loss(&mut self, l: &LossConfig) {
        self.alpha = l.alpha;
        self.margin = l.margin;
        self.beta = l.beta;
        self.variant = l.variant;
    }

    pub fn model(&self, vocab_size: usize, d_in: usize, max_patches: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_in,
            max_patches,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            d_sent: self.d_sent,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.beams == 0 {
            return Err(Error::Config("epochs, batch_size and beams must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation_seeds is empty".into()));
        }
        toyworld::DatasetFormat::from_str(&self.format)?;
        self.loss().validate()?;
        self.model(1, 1, 1).validate()
    }
}

/// Train, validation and test examples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Routes examples by their split tag.
    pub fn from_examples(examples: Vec<Example>) -> Self {
        let mut d = Dataset::default();
        for ex in examples {
            match ex.split {
                Split::Train => d.train.push(ex),
                Split::Val => d.val.push(ex),
                Split::Test => d.test.push(ex),
            }
        }
        d
    }

    /// Reads whichever paths the config names; a missing train path is an error.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let read = |p: &Option<PathBuf>| -> Result<Vec<Example>> {
            match p {
                Some(p) => toyworld::ingest_jsonl(p, &cfg.format),
                None => Ok(Vec::new()),
            }
        };
        if cfg.train.is_none() {
            return Err(Error::Config("no training data path given".into()));
        }
        Ok(Dataset { train: read(&cfg.train)?, val: read(&cfg.val)?, test: read(&cfg.test)? })
    }

    fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Closed vocabulary over training questions and rendered constraints.
pub fn build_vocab(train: &[Example]) -> Result<Vocab> {
    let mut texts = Vec::with_capacity(train.len() * 2);
    for ex in train {
        texts.push(ex.question.clone());
        texts.push(render(&ex.constraint)?);
    }
    Ok(Vocab::build(texts.iter().map(String::as_str)))
}

/// `(d_in, max_patches)` covering every example.
pub fn patch_geometry<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<(usize, usize)> {
    let mut geometry: Option<(usize, usize)> = None;
    for ex in examples {
        let p = ex.visual.patches::<f32>()?;
        let (rows, cols) = (p.shape()[0], p.shape()[1]);
        geometry = match geometry {
            None => Some((cols, rows)),
            Some((d, _)) if d != cols => {
                return Err(Error::Input(format!("example {} has patch width {cols}, expected {d}", ex.id)));
            }
            Some((d, m)) => Some((d, m.max(rows))),
        };
    }
    geometry.ok_or_else(|| Error::Input("no examples".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub beta: f64,
    /// Example-weighted means over the epoch's steps.
    pub mean: LossBreakdown,
    pub val_cel: Option<f64>,
    pub val_bleu4: Option<f64>,
}

pub struct TrainOutcome {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub embedder_seed: u64,
    pub params: ParamStore<f32>,
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochSummary>,
    pub init_fingerprint: String,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn meta(&self, epoch: usize) -> CheckpointMeta {
        CheckpointMeta { model: self.model.clone(), vocab: self.vocab.clone(), embedder_seed: self.embedder_seed, epoch }
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.cl_img += w * b.cl_img;
    acc.cl_txt += w * b.cl_txt;
    acc.cl += w * b.cl;
    acc.cel += w * b.cel;
    acc.total += w * b.total;
}

/// Trains from the seed in `cfg`. With `out`, writes `config.json`, the
/// per-step `train_log.jsonl`, `epochs.jsonl`, `epoch-<k>.ckpt`, `best.ckpt`
/// and `final.ckpt` (each with its metadata sidecar).
///
/// Patch capacity covers all three splits so the test split always fits.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let vocab = build_vocab(&data.train)?;
    let (d_in, max_patches) = patch_geometry(data.all())?;
    let model = cfg.model(vocab.len(), d_in, max_patches);
    model.validate()?;
    let aux = Auxiliary::hashed(model.d_sent, cfg.embedder_seed)?;
    let train_set = objective::prepare(&data.train, &vocab, &aux, &model)?;
    let val_set = objective::prepare(&data.val, &vocab, &aux, &model)?;
    let loss = cfg.loss();

    let mut params = ParamStore::<f32>::init(&model, cfg.seed)?;
    let mut outcome = TrainOutcome {
        init_fingerprint: checkpoint::fingerprint(&params),
        model,
        vocab,
        embedder_seed: cfg.embedder_seed,
        best: params.clone(),
        best_epoch: 0,
        epochs: Vec::with_capacity(cfg.epochs),
        params: ParamStore::from_parts(Vec::new(), Vec::new())?,
        steps: 0,
    };

    let mut log = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cp = dir.join("config.json");
        fs::write(&cp, serde_json::to_string_pretty(cfg).expect("config serializes")).map_err(|e| Error::io(&cp, e))?;
        let lp = dir.join("train_log.jsonl");
        let ep = dir.join("epochs.jsonl");
        log = Some((create_file(&lp)?, lp, create_file(&ep)?, ep));
    }

    let mut opt = AdamW::<f32>::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best_score = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let dropout_seed = (cfg.dropout > 0.0).then(|| cfg.seed.rotate_left(32) ^ (outcome.steps as u64) << 16);
            let (b, grads) =
                objective::batch_loss_with_dropout(&outcome.model, &params, &batch, &loss, epoch, true, dropout_seed)?;
            opt.step(params.tensors_mut(), &grads.expect("gradients requested"))?;
            if !b.total.is_finite() {
                return Err(Error::Input(format!("non-finite loss at step {}", outcome.steps)));
            }
            accumulate(&mut sum, &b, batch.len() as f64);
            if let Some((w, p, _, _)) = log.as_mut() {
                write_json_line(w, p, &LogLine::new(outcome.steps, epoch, &b))?;
            }
            outcome.steps += 1;
        }
        let n = train_set.len() as f64;
        let beta = loss.beta.at(epoch);
        let mean = LossBreakdown {
            cl_img: sum.cl_img / n,
            cl_txt: sum.cl_txt / n,
            cl: sum.cl / n,
            cel: sum.cel / n,
            total: sum.total / n,
            beta,
        };
        let val_cel = if val_set.is_empty() { None } else { Some(objective::mean_cel(&outcome.model, &params, &val_set)?) };
        let val_bleu4 = if cfg.select_by == Selection::ValBleu4 && !data.val.is_empty() {
            let gen = generate_all(&outcome.model, &params, &outcome.vocab, &data.val, cfg.beams)?;
            Some(score(&gen, &references(&data.val))?.bleu4)
        } else {
            None
        };
        // Lower is better; without validation data the latest epoch wins.
        let key = match cfg.select_by {
            Selection::ValCel => val_cel,
            Selection::ValBleu4 => val_bleu4.map(|b| -b),
        }
        .unwrap_or(f64::NEG_INFINITY);
        let improved = epoch == 0 || key < best_score || key == f64::NEG_INFINITY;
        if improved {
            best_score = key;
            outcome.best = params.clone();
            outcome.best_epoch = epoch;
        }
        let summary = EpochSummary { epoch, beta, mean, val_cel, val_bleu4 };
        if let (Some(dir), Some((w, lp, e, ep))) = (out, log.as_mut()) {
            write_json_line(e, ep, &summary)?;
            w.flush().map_err(|err| Error::io(lp.as_path(), err))?;
            e.flush().map_err(|err| Error::io(ep.as_path(), err))?;
            let meta = outcome.meta(epoch);
            checkpoint::save_with_meta(dir.join(format!("epoch-{epoch}.ckpt")), &params, &meta)?;
            if improved {
                checkpoint::save_with_meta(dir.join("best.ckpt"), &params, &meta)?;
            }
        }
        outcome.epochs.push(summary);
    }
    if let Some(dir) = out {
        checkpoint::save_with_meta(dir.join("final.ckpt"), &params, &outcome.meta(cfg.epochs - 1))?;
    }
    outcome.params = params;
    Ok(outcome)
}

/// Thread cap from the environment; unset or unparsable means the rayon default.
pub fn eval_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n: &usize| n > 0)
}

/// Beam-search generation for every example, in parallel, ordered by id.
pub fn generate_all(
    model: &ModelConfig,
    params: &ParamStore<f32>,
    vocab: &Vocab,
    examples: &[Example],
    beams: usize,
) -> Result<Vec<GenerationRecord>> {
    let one = |ex: &Example| -> Result<GenerationRecord> {
        let (question, score) = decode::generate(model, params, vocab, &ex.visual, &ex.constraint, beams)?;
        Ok(GenerationRecord {
            id: ex.id.clone(),
            constraint_type: ex.constraint.kind().as_str().into(),
            t_prime: render(&ex.constraint)?,
            question,
            score,
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = eval_threads() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut out: Vec<GenerationRecord> = pool.install(|| examples.par_iter().map(one).collect::<Result<_>>())?;
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Reference questions per example id.
pub fn references(examples: &[Example]) -> BTreeMap<String, Vec<String>> {
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for ex in examples {
        refs.entry(ex.id.clone()).or_default().push(ex.question.clone());
    }
    refs
}

/// Scores generated questions against references, which must cover every id.
pub fn score(generated: &[GenerationRecord], refs: &BTreeMap<String, Vec<String>>) -> Result<MetricsReport> {
    let missing: Vec<&str> = generated.iter().filter(|g| !refs.contains_key(&g.id)).map(|g| g.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("ids without references: {}", missing.join(", "))));
    }
    let instances = generated
        .iter()
        .map(|g| EvalInstance { id: g.id.clone(), candidate: g.question.clone(), references: refs[&g.id].clone() })
        .collect();
    metrics::evaluate(&EvalCorpus::new(instances)?)
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::record(i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut w = create_file(path)?;
    for r in records {
        write_json_line(&mut w, path, r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One finished training run, evaluated on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub loss: LossConfig,
    pub metrics: MetricsReport,
    pub epochs: Vec<EpochSummary>,
    pub init_fingerprint: String,
    pub final_fingerprint: String,
}

/// Trains with `cfg`, then generates and scores the test split with the selected checkpoint.
pub fn run_and_evaluate(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<RunResult> {
    if data.test.len() < 2 {
        return Err(Error::Input("test split needs at least two examples".into()));
    }
    let t = train(cfg, data, out)?;
    let gen = generate_all(&t.model, &t.best, &t.vocab, &data.test, cfg.beams)?;
    if let Some(dir) = out {
        write_generations(&dir.join("test_generations.jsonl"), &gen)?;
    }
    let metrics = score(&gen, &references(&data.test))?;
    Ok(RunResult {
        variant: cfg.variant,
        seed: cfg.seed,
        loss: cfg.loss(),
        metrics,
        epochs: t.epochs,
        init_fingerprint: t.init_fingerprint,
        final_fingerprint: checkpoint::fingerprint(&t.params),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median of each metric over runs.
pub fn median_metrics(runs: &[&MetricsReport]) -> MetricsReport {
    let m = |f: fn(&MetricsReport) -> f64| median(runs.iter().map(|r| f(r)).collect());
    MetricsReport {
        bleu1: m(|r| r.bleu1),
        bleu2: m(|r| r.bleu2),
        bleu3: m(|r| r.bleu3),
        bleu4: m(|r| r.bleu4),
        rouge_l: m(|r| r.rouge_l),
        meteor_lite: m(|r| r.meteor_lite),
        cider: m(|r| r.cider),
    }
}

pub const METRIC_COLUMNS: &str = "bleu1,bleu2,bleu3,bleu4,rouge_l,meteor_lite,cider";

fn metric_cells(m: &MetricsReport) -> String {
    [m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l, m.meteor_lite, m.cider]
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub median: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub runs: Vec<RunResult>,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn csv(&self) -> String {
        let mut s = format!("variant,{METRIC_COLUMNS}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}\n", r.variant, metric_cells(&r.median)));
        }
        s
    }
}

/// Trains every variant for every ablation seed. Runs with the same seed must
/// start from the same parameters; a mismatch aborts.
///
/// `progress` sees each run as it finishes.
pub fn ablate(
    cfg: &RunConfig,
    data: &Dataset,
    out: Option<&Path>,
    mut progress: impl FnMut(&RunResult),
) -> Result<Ablation> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut init: HashMap<u64, String> = HashMap::new();
    for &seed in &cfg.ablation_seeds {
        for variant in Variant::ALL {
            let mut c = cfg.clone();
            c.seed = seed;
            c.variant = variant;
            let dir = out.map(|d| d.join(format!("{variant}-seed{seed}")));
            let r = run_and_evaluate(&c, data, dir.as_deref())?;
            let first = init.entry(seed).or_insert_with(|| r.init_fingerprint.clone());
            if *first != r.init_fingerprint {
                return Err(Error::Config(format!("variant {variant} started from different parameters (seed {seed})")));
            }
            progress(&r);
            runs.push(r);
        }
    }
    let rows = Variant::ALL
        .iter()
        .map(|&v| AblationRow {
            variant: v,
            median: median_metrics(&runs.iter().filter(|r| r.variant == v).map(|r| &r.metrics).collect::<Vec<_>>()),
        })
        .collect();
    Ok(Ablation { runs, rows })
}

/// Values tried per loss hyperparameter, each varied with the others at their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<BetaSchedule>,
    pub margin: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            alpha: vec![0.2, 0.5, 0.8],
            beta: vec![
                BetaSchedule::Fixed { value: 10.0 },
                BetaSchedule::Fixed { value: 100.0 },
                BetaSchedule::Geometric10 { start: 10.0 },
            ],
            margin: vec![0.2, 0.5, 0.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSetting {
    pub parameter: &'static str,
    pub value: String,
    pub loss: LossConfig,
}

impl fmt::Display for SweepSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.parameter, self.value)
    }
}

/// Expands and validates the grid around `base` without training anything.
pub fn sweep_settings(base: &LossConfig, grid: &SweepGrid) -> Result<Vec<SweepSetting>> {
    if grid.alpha.is_empty() && grid.beta.is_empty() && grid.margin.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut out = Vec::new();
    for &alpha in &grid.alpha {
        out.push(SweepSetting { parameter: "alpha", value: format!("{alpha}"), loss: LossConfig { alpha, ..base.clone() } });
    }
    for &beta in &grid.beta {
        out.push(SweepSetting { parameter: "beta", value: beta.label(), loss: LossConfig { beta, ..base.clone() } });
    }
    for &margin in &grid.margin {
        out.push(SweepSetting { parameter: "margin", value: format!("{margin}"), loss: LossConfig { margin, ..base.clone() } });
    }
    for s in &out {
        s.loss.validate().map_err(|e| {
            let why = match e {
                Error::Config(m) => m,
                other => other.to_string(),
            };
            Error::Config(format!("sweep setting {s}: {why}"))
        })?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: SweepSetting,
    pub metrics: MetricsReport,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("parameter,value,alpha,beta,margin,{METRIC_COLUMNS}\n");
    for r in rows {
        let l = &r.setting.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.setting.parameter,
            r.setting.value,
            l.alpha,
            l.beta.label(),
            l.margin,
            metric_cells(&r.metrics)
        ));
    }
    s
}

/// Runs every grid setting; settings that coincide (the defaults recur in
/// each group) are trained once.
pub fn sweep(
    cfg: &RunConfig,
    grid: &SweepGrid,
    data: &Dataset,
    out: Option<&Path>,
    mut progress: impl FnMut(&SweepSetting, &MetricsReport),
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let settings = sweep_settings(&cfg.loss(), grid)?;
    let mut cache: Vec<(LossConfig, MetricsReport)> = Vec::new();
    let mut rows = Vec::with_capacity(settings.len());
    for s in settings {
        let metrics = match cache.iter().find(|(l, _)| *l == s.loss) {
            Some((_, m)) => m.clone(),
            None => {
                let mut c = cfg.clone();
                c.set_loss(&s.loss);
                let dir = out.map(|d| d.join(format!("{}-{}", s.parameter, s.value)));
                let m = run_and_evaluate(&c, data, dir.as_deref())?.metrics;
                cache.push((s.loss.clone(), m.clone()));
                m
            }
        };
        progress(&s, &metrics);
        rows.push(SweepRow { setting: s, metrics });
    }
    Ok(rows)
}
