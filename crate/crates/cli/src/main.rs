use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ordiff::corpus::{self, toy, Corpus, TokenSequence, Vocab};
use ordiff::diffusion::generate;
use ordiff::trainer::{
    self, build_ordering, build_table, compare_orderings, evaluate_transformer, export_metrics_csv, load_run,
    Dataset, EvalMethod, ExperimentConfig, LabeledLog, MetricsLog, MetricsRecord, CONFIG_FILE,
    METRICS_FILE,
};
use ordiff::schedule::validate_schedule;
use ordiff::viz::{visualize_forward, visualize_reverse};

#[derive(Parser)]
#[command(name = "ordiff", version, about = "Ordered absorbing discrete diffusion")]
struct Cli {
    /// Seed override; each subcommand is deterministic given it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize a corpus into `corpus.bin` + `vocab.tsv`.
    Prepare(PrepareArgs),
    /// Print the destruction ordering for a config.
    Order(OrderArgs),
    /// Build, validate and optionally write the mask schedule.
    Schedule(ScheduleArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a trained run on its validation or test split.
    Eval(EvalArgs),
    /// Train several orderings with repeats and rank them.
    Compare(CompareArgs),
    /// Draw samples from a trained run.
    Sample(SampleArgs),
    /// Dump a forward corruption path.
    VizForward(VizForwardArgs),
    /// Dump a generation path from a trained run.
    VizReverse(VizReverseArgs),
    /// Collect run metrics into one CSV.
    ExportCsv(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Char,
    Word,
    Toy,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Input text (char and word kinds).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Keep only the first N bytes of the input.
    #[arg(long)]
    max_bytes: Option<usize>,
    #[arg(long, default_value_t = 8300)]
    max_vocab: usize,
    #[arg(long, default_value_t = 20_000)]
    sequences: usize,
    #[arg(long, default_value_t = 31)]
    seq_len: usize,
}

#[derive(Args)]
struct OrderArgs {
    #[arg(long)]
    config: PathBuf,
    /// Ordering name; defaults to the config's own ordering.
    #[arg(long)]
    strategy: Option<String>,
    /// Also write the ordering file here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    /// Overrides `diffusion_steps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the full mask table as TSV.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Valid)]
    split: Split,
    /// Overrides `eval.sequences`.
    #[arg(long)]
    sequences: Option<usize>,
    /// Use the uniform-t estimator with this many draws instead of the config's method.
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    strategies: Vec<String>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Write every run's metrics here as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Defaults to the model's maximum length.
    #[arg(long)]
    len: Option<usize>,
}

#[derive(Args)]
struct VizForwardArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, default_value_t = 10)]
    snapshots: usize,
    /// Sample length; defaults to the config's `seq_len`.
    #[arg(long)]
    len: Option<usize>,
    /// Token offset of the sample in the validation split.
    #[arg(long, default_value_t = 0)]
    offset: usize,
}

#[derive(Args)]
struct VizReverseArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 10)]
    snapshots: usize,
    #[arg(long)]
    len: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directories; `<strategy>/<repeat>` layouts from `compare` are labelled accordingly.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Prepare(a) => prepare(cli, a),
        Cmd::Order(a) => order(cli, a),
        Cmd::Schedule(a) => schedule(cli, a),
        Cmd::Train(a) => train(cli, a),
        Cmd::Eval(a) => eval(cli, a),
        Cmd::Compare(a) => compare(cli, a),
        Cmd::Sample(a) => sample(cli, a),
        Cmd::VizForward(a) => viz_forward(cli, a),
        Cmd::VizReverse(a) => viz_reverse(cli, a),
        Cmd::ExportCsv(a) => export_csv(a),
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_strategy(cfg: &mut ExperimentConfig, strategy: &Option<String>) -> Result<()> {
    if let Some(s) = strategy {
        cfg.ordering = cfg.ordering_named(s)?;
    }
    Ok(())
}

fn progress(quiet: bool) -> impl FnMut(&MetricsRecord) {
    move |r: &MetricsRecord| {
        if !quiet {
            let train = r.train_nelbo_bits.map_or("-".to_string(), |b| format!("{b:.4}"));
            eprintln!(
                "step {:>6}  train {train}  valid {:.4} bits  ppl {:.4}  {:.1}s",
                r.step, r.valid_nelbo_bits, r.perplexity, r.wall_time
            );
        }
    }
}

fn read_text(path: &Option<PathBuf>, max_bytes: Option<usize>) -> Result<Vec<u8>> {
    let path = path.as_ref().context("--input is required for this kind")?;
    let mut bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(n) = max_bytes {
        bytes.truncate(n);
    }
    while bytes.last().is_some_and(|b| b.is_ascii_whitespace() && *b != b' ') {
        bytes.pop();
    }
    Ok(bytes)
}

fn prepare(cli: &Cli, a: &PrepareArgs) -> Result<()> {
    let (vocab, corpus): (Vocab, Corpus) = match a.kind {
        Kind::Char => {
            let text = read_text(&a.input, a.max_bytes)?;
            let vocab = corpus::build_char_vocab(&text)?;
            let ids = corpus::encode_chars(&vocab, &text)?;
            (vocab, Corpus::Stream(ids.0))
        }
        Kind::Word => {
            let bytes = read_text(&a.input, a.max_bytes)?;
            let text = String::from_utf8(bytes).context("input is not UTF-8")?;
            let vocab = corpus::build_word_vocab(&text, a.max_vocab)?;
            let ids = corpus::encode_words(&vocab, &text)?;
            (vocab, Corpus::Stream(ids.0))
        }
        Kind::Toy => {
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(1));
            let seqs = (0..a.sequences)
                .map(|_| toy::generate(a.seq_len, &mut rng))
                .collect::<ordiff::Result<Vec<_>>>()?;
            (toy::vocab(), Corpus::Sequences(seqs))
        }
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    corpus.write(a.out.join(trainer::CORPUS_FILE))?;
    vocab.write_tsv(a.out.join(trainer::VOCAB_FILE))?;
    if !cli.quiet {
        eprintln!("{} tokens, V={} -> {}", corpus.token_count(), vocab.size(), a.out.display());
    }
    Ok(())
}

fn order(cli: &Cli, a: &OrderArgs) -> Result<()> {
    let mut cfg = load_config(cli, &a.config)?;
    with_strategy(&mut cfg, &a.strategy)?;
    let data = Dataset::load(&cfg.dataset)?;
    let spec = build_ordering(&cfg.ordering, &data, cfg.seed)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "# group\ttokens (group 0 is destroyed first)")?;
    for (g, members) in spec.groups().iter().enumerate() {
        let names: Vec<String> = members.iter().map(|&c| format!("{:?}", data.vocab.token(c).unwrap_or("?"))).collect();
        writeln!(out, "{g}\t{}", names.join(" "))?;
    }
    if let Some(p) = &a.out {
        spec.write(p)?;
    }
    Ok(())
}

fn schedule(cli: &Cli, a: &ScheduleArgs) -> Result<()> {
    let mut cfg = load_config(cli, &a.config)?;
    with_strategy(&mut cfg, &a.strategy)?;
    if let Some(t) = a.steps {
        cfg.diffusion_steps = t;
    }
    let data = Dataset::load(&cfg.dataset)?;
    let table = build_table(&cfg, &cfg.ordering, &data)?;
    let diag = validate_schedule(&table);
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "T={} V={} groups={} violations={}",
        table.steps(),
        table.vocab_size(),
        table.order().group_count(),
        diag.violations.len()
    )?;
    if a.table {
        let header: Vec<String> = data.vocab.tokens().iter().map(|t| format!("{t:?}")).collect();
        writeln!(out, "t\tratio\t{}", header.join("\t"))?;
        for t in 0..=table.steps() {
            let row: Vec<String> = table.row(t).iter().map(|m| format!("{m:.6}")).collect();
            writeln!(out, "{t}\t{:.6}\t{}", diag.ratios[t], row.join("\t"))?;
        }
    }
    if let Some(p) = &a.out {
        table.write(p)?;
    }
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli, &a.config)?;
    with_strategy(&mut cfg, &a.strategy)?;
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.steps {
        cfg.train_steps = s;
    }
    let mut p = progress(cli.quiet);
    let outcome = trainer::train(&cfg, Some(&mut p))?;
    let last = outcome.log.last().context("empty metrics log")?;
    println!(
        "final valid {:.6} bits/token, perplexity {:.6} -> {}",
        last.valid_nelbo_bits,
        last.perplexity,
        cfg.output_dir.display()
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = load_config(cli, &a.run.join(CONFIG_FILE))?;
    let (model, table, _) = load_run(&a.run)?;
    let data = Dataset::load(&cfg.dataset)?;
    let split = match a.split {
        Split::Valid => &data.valid,
        Split::Test => &data.test,
    };
    let seqs = split.eval_sequences(cfg.dataset.seq_len(), a.sequences.unwrap_or(cfg.eval.sequences));
    let method = match a.draws {
        Some(draws) => EvalMethod::Stochastic { draws, seed: cfg.seed },
        None => cfg.eval.method,
    };
    let rep = evaluate_transformer(&model, &table, &seqs, method)?;
    println!("{}", serde_json::to_string(&rep)?);
    Ok(())
}

fn compare(cli: &Cli, a: &CompareArgs) -> Result<()> {
    let mut cfg = load_config(cli, &a.config)?;
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.steps {
        cfg.train_steps = s;
    }
    let quiet = cli.quiet;
    let mut cb = |name: &str, r: usize, rec: &MetricsRecord| {
        if !quiet {
            eprintln!("{name}#{r} step {:>6}  valid {:.4} bits", rec.step, rec.valid_nelbo_bits);
        }
    };
    let cmp = compare_orderings(&cfg, &a.strategies, a.repeats, Some(&mut cb))?;
    print!("{}", cmp.table());
    if let Some(p) = &a.csv {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        export_metrics_csv(&cmp.logs, f)?;
    }
    Ok(())
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let (model, table, vocab) = load_run(&a.run)?;
    let len = a.len.unwrap_or(model.config().max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let mut out = std::io::stdout().lock();
    for _ in 0..a.count {
        let g = generate(&model, &table, len, &[], &mut rng)?;
        writeln!(out, "{}", vocab.render(&g.sequence))?;
    }
    Ok(())
}

fn viz_forward(cli: &Cli, a: &VizForwardArgs) -> Result<()> {
    let mut cfg = load_config(cli, &a.config)?;
    with_strategy(&mut cfg, &a.strategy)?;
    let data = Dataset::load(&cfg.dataset)?;
    let table = build_table(&cfg, &cfg.ordering, &data)?;
    let len = a.len.unwrap_or(cfg.dataset.seq_len());
    let sample = pick_sample(&data.valid, a.offset, len)?;
    let dump = visualize_forward(&data.vocab, &sample, &table, a.snapshots, cli.seed.unwrap_or(0))?;
    print!("{dump}");
    Ok(())
}

fn pick_sample(split: &Corpus, offset: usize, len: usize) -> Result<TokenSequence> {
    let found = match split {
        Corpus::Stream(ids) => ids.get(offset..offset + len).map(|s| TokenSequence(s.to_vec())),
        Corpus::Sequences(seqs) => seqs.get(offset).filter(|s| s.len() >= len).map(|s| TokenSequence(s[..len].to_vec())),
    };
    found.with_context(|| format!("validation split has no sample of length {len} at offset {offset}"))
}

fn viz_reverse(cli: &Cli, a: &VizReverseArgs) -> Result<()> {
    let (model, table, vocab) = load_run(&a.run)?;
    let len = a.len.unwrap_or(model.config().max_len);
    let dump = visualize_reverse(&model, &vocab, &table, len, a.snapshots, cli.seed.unwrap_or(0))?;
    print!("{dump}");
    Ok(())
}

fn export_csv(a: &ExportArgs) -> Result<()> {
    let mut logs = Vec::new();
    for dir in &a.runs {
        let log = MetricsLog::read_ndjson(dir.join(METRICS_FILE))?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let (strategy, repeat) = match name.parse::<usize>() {
            Ok(r) => {
                let parent = dir.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("run");
                (parent.to_string(), r)
            }
            Err(_) => (run_strategy(dir).unwrap_or_else(|| name.to_string()), 0),
        };
        logs.push(LabeledLog { strategy, repeat, log });
    }
    if logs.is_empty() {
        bail!("no runs given");
    }
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    export_metrics_csv(&logs, f)?;
    Ok(())
}

fn run_strategy(dir: &Path) -> Option<String> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE)).ok()?).ok()?;
    Some(cfg.ordering.strategy)
}
