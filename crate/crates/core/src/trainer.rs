//! Experiment configs, the training loop, evaluation, metrics logs and
//! ordering comparisons.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, toy, Corpus, TokenId, TokenSequence, Vocab};
use crate::denoiser::{
    load_checkpoint, loss_grad, save_checkpoint, AdamConfig, DenoiserConfig, OptState, Parameters, TimeEmbedding,
    Transformer,
};
use crate::diffusion::{nelbo_dataset, stochastic_terms, Denoiser, DiffusionBatch, NelboMode};
use crate::error::{Error, Result};
use crate::ordering::{
    information_gain, make_blocks, order_frequency, order_information_gain, order_random, OrderingSpec, Strategy,
};
use crate::schedule::{build_schedule, validate_schedule, ScheduleTable, Warp};

pub const CORPUS_FILE: &str = "corpus.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ORDER_FILE: &str = "order.txt";
pub const SCHEDULE_FILE: &str = "schedule.bin";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Toy grammar sequences generated on the fly.
    Toy { sequences: usize, seq_len: usize, seed: u64 },
    /// A directory written by `ordiff prepare` (`corpus.bin` + `vocab.tsv`).
    Prepared { dir: PathBuf, seq_len: usize },
}

impl DatasetConfig {
    pub fn seq_len(&self) -> usize {
        match self {
            DatasetConfig::Toy { seq_len, .. } | DatasetConfig::Prepared { seq_len, .. } => *seq_len,
        }
    }
}

fn default_window_len() -> usize {
    10
}

fn default_alpha() -> f64 {
    1.0
}

/// How categories are grouped and ordered for destruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingConfig {
    /// A built-in strategy name (`standard`, `common-first`, `rare-first`,
    /// `random`, `info-gain`, `info-gain-low`) or `groups`.
    pub strategy: String,
    /// For `groups`: token groups listed in destruction order, i.e. the
    /// first group is masked first and generated last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destroy_groups: Option<Vec<Vec<String>>>,
    /// For frequency strategies: number of frequency blocks (`None` = one
    /// group per category).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    /// For `random`; defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Overrides the experiment warp for this ordering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warp: Option<Warp>,
}

impl OrderingConfig {
    pub fn named(strategy: &str) -> Self {
        Self {
            strategy: strategy.into(),
            destroy_groups: None,
            blocks: None,
            alpha: 1.0,
            window_len: default_window_len(),
            seed: None,
            warp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    #[serde(default)]
    pub time_embedding: TimeEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalMethod {
    /// Sums every timestep; the expectation over `z_t` per `nelbo_full`.
    Full { mode: NelboMode },
    /// `draws` uniform-`t` draws per sequence.
    Stochastic { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sequences: usize,
    pub method: EvalMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub ordering: OrderingConfig,
    /// Named orderings that `compare` can refer to besides built-in names.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub orderings: BTreeMap<String, OrderingConfig>,
    /// Number of diffusion steps `T`.
    pub diffusion_steps: usize,
    #[serde(default = "identity")]
    pub warp: Warp,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub train_steps: usize,
    pub eval_every: usize,
    pub eval: EvalConfig,
    /// Checkpoint cadence in steps; the final model is always written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn identity() -> Warp {
    Warp::Identity
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        // relative paths are relative to the config file
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).map_err(|e| Error::io(path, e))?;
        if let DatasetConfig::Prepared { dir, .. } = &mut cfg.dataset {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval.sequences == 0 {
            return bad("batch_size, eval_every and eval.sequences must be positive".into());
        }
        if self.dataset.seq_len() == 0 {
            return bad("seq_len must be positive".into());
        }
        if let DatasetConfig::Prepared { dir, .. } = &self.dataset {
            for f in [CORPUS_FILE, VOCAB_FILE] {
                if !dir.join(f).is_file() {
                    return bad(format!("{} does not exist", dir.join(f).display()));
                }
            }
        }
        if let DatasetConfig::Toy { seq_len, .. } = self.dataset {
            if seq_len % 2 == 0 || seq_len < 3 {
                return bad(format!("toy seq_len must be odd and at least 3, got {seq_len}"));
            }
        }
        Ok(())
    }

    pub fn denoiser_config(&self, vocab_size: usize) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.model.layers,
            model_dim: self.model.model_dim,
            heads: self.model.heads,
            ff_dim: self.model.ff_dim,
            vocab_size,
            max_len: self.dataset.seq_len(),
            steps: self.diffusion_steps,
            time_embedding: self.model.time_embedding,
            dropout: 0.0,
            seed: self.seed,
        }
    }

    /// Resolves an ordering by name: a key of `orderings`, or a built-in strategy.
    pub fn ordering_named(&self, name: &str) -> Result<OrderingConfig> {
        if let Some(o) = self.orderings.get(name) {
            return Ok(o.clone());
        }
        name.parse::<Strategy>()
            .map(|s| OrderingConfig::named(s.name()))
            .map_err(|_| Error::InvalidConfig(format!("unknown ordering {name:?}")))
    }

    /// Toy-data defaults: `T = 16`, 31-token sequences, small model, 2k steps.
    pub fn toy(name: &str, ordering: OrderingConfig, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let mut orderings = BTreeMap::new();
        orderings.insert("ordered".to_string(), toy_ordered());
        Self {
            name: name.into(),
            dataset: DatasetConfig::Toy { sequences: 20_000, seq_len: 31, seed: 1 },
            ordering,
            orderings,
            diffusion_steps: 16,
            warp: Warp::Identity,
            model: ModelConfig { layers: 2, model_dim: 64, heads: 4, ff_dim: 256, time_embedding: TimeEmbedding::Sinusoidal },
            optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            batch_size: 64,
            train_steps: 2000,
            eval_every: 500,
            eval: EvalConfig { sequences: 256, method: EvalMethod::Full { mode: NelboMode::MonteCarlo { samples: 1, seed: 0 } } },
            checkpoint_every: None,
            seed,
            output_dir: output_dir.into(),
        }
    }
}

/// Anchors `a`, `b` destroyed last (generated first).
pub fn toy_ordered() -> OrderingConfig {
    OrderingConfig {
        destroy_groups: Some(vec![
            vec!["c".into(), "d".into(), "e".into(), "f".into()],
            vec!["a".into(), "b".into()],
        ]),
        ..OrderingConfig::named("groups")
    }
}

/// Vocabulary plus the three splits; `vocab.probs()` is the training marginal.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

impl Dataset {
    pub fn load(cfg: &DatasetConfig) -> Result<Self> {
        let (vocab, corpus) = match cfg {
            DatasetConfig::Toy { sequences, seq_len, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let seqs = (0..*sequences)
                    .map(|_| toy::generate(*seq_len, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                (toy::vocab(), Corpus::Sequences(seqs))
            }
            DatasetConfig::Prepared { dir, .. } => {
                let vocab = Vocab::read_tsv(dir.join(VOCAB_FILE))?;
                let corpus = Corpus::read(dir.join(CORPUS_FILE))?;
                corpus.validate(vocab.size())?;
                (vocab, corpus)
            }
        };
        let s = corpus.split();
        if s.train.token_count() == 0 || s.valid.token_count() == 0 {
            return Err(Error::EmptyCorpus);
        }
        let vocab = vocab.with_probs(&s.train.frequencies(vocab.size())?)?;
        Ok(Self { vocab, train: s.train, valid: s.valid, test: s.test })
    }
}

/// Builds the destruction ordering for a config against a dataset.
pub fn build_ordering(cfg: &OrderingConfig, data: &Dataset, default_seed: u64) -> Result<OrderingSpec> {
    let probs = data.vocab.probs();
    let v = data.vocab.size();
    if cfg.strategy == "groups" {
        let groups = cfg
            .destroy_groups
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("strategy \"groups\" needs destroy_groups".into()))?;
        let ids = groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|t| data.vocab.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
                    .collect::<Result<Vec<TokenId>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        return OrderingSpec::from_groups(&ids, v);
    }
    let strategy: Strategy = cfg.strategy.parse()?;
    if let (Some(first), Some(b)) = (strategy.destroy_first(), cfg.blocks) {
        return make_blocks(probs, b, cfg.alpha, first);
    }
    match strategy {
        Strategy::Standard => OrderingSpec::single_group(v),
        Strategy::Random => order_random(v, cfg.seed.unwrap_or(default_seed)),
        Strategy::InfoGain | Strategy::InfoGainLow => {
            let l = cfg.window_len;
            let windows = data.train.slices().flat_map(|s| corpus::windows(s, l, 1));
            let report = information_gain(windows, v, l)?;
            order_information_gain(&report, strategy.ig_destroy_first().expect("info-gain strategy"))
        }
        _ => order_frequency(probs, strategy.destroy_first().expect("frequency strategy")),
    }
}

/// Ordering, warp and schedule for an experiment, checked against the schedule invariants.
pub fn build_table(cfg: &ExperimentConfig, ordering: &OrderingConfig, data: &Dataset) -> Result<ScheduleTable> {
    let order = build_ordering(ordering, data, cfg.seed)?;
    let warp = ordering.warp.clone().unwrap_or_else(|| cfg.warp.clone());
    let table = build_schedule(&order, data.vocab.probs(), cfg.diffusion_steps, &warp)?;
    let diag = validate_schedule(&table);
    if let Some(v) = diag.violations.first() {
        return Err(Error::InvalidSchedule(v.to_string()));
    }
    Ok(table)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training-batch NELBO since the previous record; absent at step 0.
    pub train_nelbo_bits: Option<f64>,
    pub valid_nelbo_bits: f64,
    pub perplexity: f64,
    pub wall_time: f64,
}

/// Append-only metrics with strictly increasing steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(Error::InvalidConfig(format!("metrics step {} after {}", rec.step, last.step)));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn write_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_ndjson(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                log.push(serde_json::from_str(&line)?)?;
            }
        }
        Ok(log)
    }
}

/// Held-out NELBO summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bits_per_token: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

impl EvalReport {
    fn from_nats(nats: f64, tokens: usize) -> Self {
        let bits = nats / (std::f64::consts::LN_2 * tokens as f64);
        Self { bits_per_token: bits, perplexity: bits.exp2(), tokens }
    }
}

/// Mean bits per token of `model` on `sequences`; perplexity is `2^bits`.
pub fn evaluate<D: Denoiser + ?Sized>(
    model: &D,
    table: &ScheduleTable,
    sequences: &[TokenSequence],
    method: EvalMethod,
) -> Result<EvalReport> {
    if model.vocab_size() != table.vocab_size() {
        return Err(Error::IncompatibleSchedule(format!(
            "model V={}, schedule V={}",
            model.vocab_size(),
            table.vocab_size()
        )));
    }
    if sequences.is_empty() {
        return Err(Error::EmptyInput);
    }
    match method {
        EvalMethod::Full { mode } => {
            let b = nelbo_dataset(sequences, model, table, mode)?;
            Ok(EvalReport::from_nats(b.total, b.tokens))
        }
        EvalMethod::Stochastic { draws, seed } => {
            if draws == 0 {
                return Err(Error::InvalidConfig("stochastic evaluation needs at least one draw".into()));
            }
            let per_draw: Vec<f64> = (0..draws)
                .into_par_iter()
                .map(|d| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (d as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    Ok(stochastic_terms(sequences, model, table, &mut rng)?.iter().sum())
                })
                .collect::<Result<_>>()?;
            let tokens: usize = sequences.iter().map(|s| s.len()).sum();
            Ok(EvalReport::from_nats(per_draw.iter().sum::<f64>() / draws as f64, tokens))
        }
    }
}

/// `evaluate` for a trained transformer, checking it was built for this schedule.
pub fn evaluate_transformer(
    model: &Transformer,
    table: &ScheduleTable,
    sequences: &[TokenSequence],
    method: EvalMethod,
) -> Result<EvalReport> {
    if model.config().steps != table.steps() {
        return Err(Error::IncompatibleSchedule(format!(
            "model trained with T={}, schedule has T={}",
            model.config().steps,
            table.steps()
        )));
    }
    evaluate(model, table, sequences, method)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub params: Parameters<f32>,
    pub table: ScheduleTable,
    pub vocab: Vocab,
    pub valid_digest: String,
}

/// Progress callback: receives each record as it is logged.
pub type Progress<'a> = &'a mut dyn FnMut(&MetricsRecord);

/// Trains with the experiment's own ordering.
pub fn train(cfg: &ExperimentConfig, progress: Option<Progress<'_>>) -> Result<TrainOutcome> {
    train_with(cfg, &cfg.ordering, progress)
}

/// Trains one model and writes config, ordering, schedule, vocab, metrics
/// and checkpoint into `cfg.output_dir`. With `train_steps = 0` only the
/// initial evaluation is logged.
pub fn train_with(cfg: &ExperimentConfig, ordering: &OrderingConfig, mut progress: Option<Progress<'_>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let data = Dataset::load(&cfg.dataset)?;
    let table = build_table(cfg, ordering, &data)?;
    let seq_len = cfg.dataset.seq_len();
    let valid = data.valid.eval_sequences(seq_len, cfg.eval.sequences);
    if valid.is_empty() {
        return Err(Error::CorpusTooShort { len: data.valid.token_count(), seq_len });
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut run_cfg = cfg.clone();
    run_cfg.ordering = ordering.clone();
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&run_cfg)?).map_err(|e| Error::io(out, e))?;
    table.order().write(out.join(ORDER_FILE))?;
    table.write(out.join(SCHEDULE_FILE))?;
    data.vocab.write_tsv(out.join(VOCAB_FILE))?;

    let mcfg = cfg.denoiser_config(data.vocab.size());
    let mut params = Parameters::<f32>::init(&mcfg)?;
    let mut opt = OptState::new(cfg.optimizer.clone(), params.parameter_count());
    let mut sampler = corpus::BatchSampler::new(&data.train, seq_len, cfg.batch_size, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let valid_digest = data.valid.digest();
    let meta = |step: usize| {
        serde_json::json!({
            "experiment": cfg.name,
            "strategy": ordering.strategy,
            "step": step,
            "valid_sha256": valid_digest,
        })
    };

    let mut log = MetricsLog::default();
    let mut record = |params: &Parameters<f32>, step: usize, train_bits: Option<f64>, log: &mut MetricsLog| -> Result<()> {
        let model = Transformer::new(params.clone());
        let rep = evaluate(&model, &table, &valid, cfg.eval.method)?;
        let rec = MetricsRecord {
            step,
            train_nelbo_bits: train_bits,
            valid_nelbo_bits: rep.bits_per_token,
            perplexity: rep.perplexity,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(p) = progress.as_mut() {
            p(&rec);
        }
        log.push(rec)?;
        log.write_ndjson(out.join(METRICS_FILE))
    };
    record(&params, 0, None, &mut log)?;

    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 1..=cfg.train_steps {
        let batch = DiffusionBatch::sample(sampler.next_batch(), &table, &mut rng)?;
        let (loss, grad) = match loss_grad(&params, &batch, &table) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss(m)) => return Err(Error::NonFiniteLoss(format!("step {step}: {m}"))),
            Err(e) => return Err(e),
        };
        opt.step(&mut params.data, &grad)?;
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss(format!("step {step}: parameters diverged")));
        }
        acc += loss / std::f64::consts::LN_2;
        acc_n += 1;
        if step % cfg.eval_every == 0 || step == cfg.train_steps {
            record(&params, step, Some(acc / acc_n as f64), &mut log)?;
            (acc, acc_n) = (0.0, 0);
        }
        if cfg.checkpoint_every.is_some_and(|c| step % c == 0) {
            save_checkpoint(out.join(CHECKPOINT_FILE), &params, Some(&opt), meta(step))?;
        }
    }
    save_checkpoint(out.join(CHECKPOINT_FILE), &params, Some(&opt), meta(cfg.train_steps))?;
    Ok(TrainOutcome { log, params, table, vocab: data.vocab, valid_digest })
}

/// Loads a run directory's checkpoint with its schedule and vocabulary.
pub fn load_run(dir: impl AsRef<Path>) -> Result<(Transformer, ScheduleTable, Vocab)> {
    let dir = dir.as_ref();
    let ck = load_checkpoint(dir.join(CHECKPOINT_FILE))?;
    let vocab = Vocab::read_tsv(dir.join(VOCAB_FILE))?;
    let order = OrderingSpec::read(dir.join(ORDER_FILE))?;
    let table = ScheduleTable::read(dir.join(SCHEDULE_FILE), order, vocab.probs().to_vec())?;
    Ok((Transformer::new(ck.params), table, vocab))
}

/// Final validation NELBO of every repeat of one ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub finals: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Sorted by mean, best first.
    pub rows: Vec<ComparisonRow>,
    pub logs: Vec<LabeledLog>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = String::from("rank\tstrategy\tmean_bits\tstd_bits\trepeats\n");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\t{}\n", i + 1, r.strategy, r.mean, r.std, r.finals.len()));
        }
        s
    }
}

/// Trains every ordering `repeats` times with seeds `seed, seed+1, …` and the
/// same budget; runs go to `output_dir/<strategy>/<repeat>`.
pub fn compare_orderings(
    base: &ExperimentConfig,
    strategies: &[String],
    repeats: usize,
    mut progress: Option<&mut dyn FnMut(&str, usize, &MetricsRecord)>,
) -> Result<Comparison> {
    if strategies.is_empty() || repeats == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for name in strategies {
        let ordering = base.ordering_named(name)?;
        let mut finals = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut cfg = base.clone();
            cfg.seed = base.seed + r as u64;
            cfg.output_dir = base.output_dir.join(name).join(r.to_string());
            let mut cb = |rec: &MetricsRecord| {
                if let Some(p) = progress.as_mut() {
                    p(name, r, rec);
                }
            };
            let out = train_with(&cfg, &ordering, Some(&mut cb))?;
            finals.push(out.log.last().expect("initial record").valid_nelbo_bits);
            logs.push(LabeledLog { strategy: name.clone(), repeat: r, log: out.log });
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let std = if finals.len() > 1 {
            (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(ComparisonRow { strategy: name.clone(), finals, mean, std });
    }
    rows.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    Ok(Comparison { rows, logs })
}

/// A metrics log tagged with the ordering and repeat that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLog {
    pub strategy: String,
    pub repeat: usize,
    pub log: MetricsLog,
}

/// One row of the perplexity CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub strategy: String,
    pub repeat: usize,
    pub step: usize,
    pub valid_bits: f64,
    pub perplexity: f64,
}

/// Writes `strategy,repeat,step,valid_bits,perplexity` rows in input order.
pub fn export_metrics_csv<W: Write>(logs: &[LabeledLog], out: W) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut w = csv::Writer::from_writer(out);
    for l in logs {
        for r in &l.log.records {
            w.serialize(CsvRow {
                strategy: l.strategy.clone(),
                repeat: l.repeat,
                step: r.step,
                valid_bits: r.valid_nelbo_bits,
                perplexity: r.perplexity,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn parse_metrics_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
