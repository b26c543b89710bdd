use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use charprobe::bridge::{
    ngram_train, serve_stream, serve_tcp, BridgeClient, ClientOptions, Endpoint, OraclePredictor, Predictor,
    UniformPredictor,
};
use charprobe::dataset::{self, build_instances, parse_pairs, read_instances, write_instances, BuildOptions};
use charprobe::eval::{
    self, curve_series, degrading_series, render_table, run_probe, Granularity, MetricTable, ProbeOptions,
};
use charprobe::mask::{generate_corpus, MaskingConfig, Segmentation, Strategy};
use charprobe::segment::{segment_chars, Lexicon};
use charprobe::{align_pair, Sentence, Vocab};

/// Character-level probing toolkit for Chinese masked language models.
#[derive(Parser, Debug)]
#[command(name = "charprobe", version)]
struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align erroneous/corrected sentences and print their span edits.
    Align(AlignArgs),
    /// Turn sentence pairs into replacement and insertion probing instances.
    BuildDataset(BuildArgs),
    /// Segment sentences with forward maximum matching.
    Segment(SegmentArgs),
    /// Produce a masked pre-training corpus.
    Mask(MaskArgs),
    /// Query a prediction backend and score the instances.
    Probe(ProbeArgs),
    /// Print metric tables side by side and export a checkpoint curve.
    Report(ReportArgs),
    /// Run a reference prediction backend on stdio or TCP.
    Serve(ServeArgs),
}

/// Settings that may come from the config file.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Config {
    seed: Option<u64>,
    k: Option<usize>,
    bridge: Option<String>,
    strategy: Option<StrategyArg>,
    mask_rate: Option<f64>,
    max_seq_len: Option<usize>,
    workers: Option<usize>,
    max_in_flight: Option<usize>,
    timeout_secs: Option<u64>,
    granularity: Option<GranularityArg>,
    apply_other_edits: Option<bool>,
}

impl Config {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
enum StrategyArg {
    Clm,
    Wwm,
    Mixed,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Clm => Strategy::Clm,
            StrategyArg::Wwm => Strategy::Wwm,
            StrategyArg::Mixed => Strategy::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
enum GranularityArg {
    Position,
    Span,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Position => Granularity::Position,
            GranularityArg::Span => Granularity::Span,
        }
    }
}

#[derive(Args, Debug)]
struct AlignArgs {
    /// Erroneous sentence (with CORRECTED); omit both to read a pair TSV.
    #[arg(requires = "corrected")]
    erroneous: Option<String>,
    corrected: Option<String>,
    /// Pair TSV (`id<TAB>erroneous<TAB>corrected`); `-` for stdin.
    #[arg(long, short, conflicts_with = "erroneous")]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Pair TSV (`id<TAB>erroneous<TAB>corrected`); `-` for stdin.
    #[arg(long, short)]
    input: PathBuf,
    /// Receives instances.jsonl, stats.tsv and rejects.tsv.
    #[arg(long, short)]
    out_dir: PathBuf,
    /// Apply the pair's other gold edits so each instance has one error.
    #[arg(long)]
    apply_other_edits: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// One word per line; `#` starts a comment line.
    #[arg(long, short)]
    lexicon: PathBuf,
    #[arg(long, short, default_value = "-")]
    input: PathBuf,
    #[arg(long, short, default_value = "-")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// One sentence per line.
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short, default_value = "-")]
    output: PathBuf,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Word list for whole-word masking.
    #[arg(long, conflicts_with = "presegmented")]
    lexicon: Option<PathBuf>,
    /// Input words are already separated by single spaces.
    #[arg(long)]
    presegmented: bool,
    /// Vocabulary for random replacements; defaults to the corpus characters.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Instances written by build-dataset.
    #[arg(long, short)]
    instances: PathBuf,
    /// Backend: `HOST:PORT`, `tcp://HOST:PORT`, or a command line.
    #[arg(long, short, env = "CHARPROBE_BRIDGE")]
    bridge: Option<String>,
    /// Receives metrics.tsv, metrics.txt, records.jsonl and problems.tsv.
    #[arg(long, short)]
    out_dir: PathBuf,
    /// Candidates requested per masked position.
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    /// Map characters outside this vocabulary to [UNK] in queries.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Row label in the printed table.
    #[arg(long, default_value = "model")]
    label: String,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// metrics.tsv files, in checkpoint order for --curve.
    #[arg(required = true)]
    tables: Vec<PathBuf>,
    /// One label per table; defaults to each file's directory or stem.
    #[arg(long, short)]
    label: Vec<String>,
    /// Write the series as a long-format CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Ngram,
    Oracle,
    Uniform,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, value_enum)]
    backend: Backend,
    /// Training text for the n-gram backend.
    #[arg(long, required_if_eq("backend", "ngram"))]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// Instances whose gold the oracle backend reads.
    #[arg(long, required_if_eq("backend", "oracle"))]
    instances: Option<PathBuf>,
    /// Alphabet for the uniform backend; defaults to the first
    /// --alphabet-size CJK characters.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    alphabet_size: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Serve TCP on this address instead of stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Align(args) => align(args),
        Command::BuildDataset(args) => build_dataset(args, &config),
        Command::Segment(args) => segment(args),
        Command::Mask(args) => mask(args, &config),
        Command::Probe(args) => probe(args, &config),
        Command::Report(args) => report(args),
        Command::Serve(args) => serve(args, &config),
    }
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(io::stdin().lock())));
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Box::new(BufReader::new(file)))
}

fn create_output(path: &Path) -> Result<Box<dyn Write>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::new(file)))
}

fn create_in(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    Vocab::read(open_input(path)?).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn read_lexicon(path: &Path) -> Result<Lexicon> {
    Lexicon::read(open_input(path)?).with_context(|| format!("reading lexicon {}", path.display()))
}

fn align(args: AlignArgs) -> Result<()> {
    let mut out = BufWriter::new(io::stdout().lock());
    if let (Some(erroneous), Some(corrected)) = (&args.erroneous, &args.corrected) {
        let src = Sentence::from_text("erroneous", erroneous)?;
        let tgt = Sentence::from_text("corrected", corrected)?;
        for edit in align_pair(&src, &tgt)? {
            serde_json::to_writer(&mut out, &edit)?;
            writeln!(out)?;
        }
        return Ok(());
    }
    let input = args.input.unwrap_or_else(|| PathBuf::from("-"));
    let parsed = parse_pairs(open_input(&input)?)?;
    for err in &parsed.errors {
        log::warn!("skipping {err}");
    }
    for pair in &parsed.pairs {
        let edits =
            align_pair(&pair.erroneous, &pair.corrected).with_context(|| format!("aligning pair {}", pair.id))?;
        serde_json::to_writer(&mut out, &serde_json::json!({ "id": pair.id, "edits": edits }))?;
        writeln!(out)?;
    }
    Ok(())
}

fn build_dataset(args: BuildArgs, config: &Config) -> Result<()> {
    let parsed = parse_pairs(open_input(&args.input)?)?;
    for err in &parsed.errors {
        log::warn!("skipping {err}");
    }
    let opts = BuildOptions {
        apply_other_edits: args.apply_other_edits || config.apply_other_edits.unwrap_or(false),
    };
    let mut built = build_instances(&parsed.pairs, opts)?;
    built.rejects.add_record_errors(&parsed.errors);

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut w = create_in(&args.out_dir, "instances.jsonl")?;
    write_instances(&mut w, &built.instances)?;
    w.flush()?;
    let mut w = create_in(&args.out_dir, "stats.tsv")?;
    built.stats.write_tsv(&mut w)?;
    w.flush()?;
    let mut w = create_in(&args.out_dir, "rejects.tsv")?;
    built.rejects.write_tsv(&mut w)?;
    w.flush()?;

    eprintln!(
        "{} pairs ({} bad records): {} spans, {} instances; dropped {} redundant, {} ordering, {} degenerate",
        parsed.pairs.len(),
        parsed.errors.len(),
        built.spans_found,
        built.instances.len(),
        built.rejects.total(dataset::RejectKind::Redundant),
        built.rejects.total(dataset::RejectKind::Ordering),
        built.rejects.total(dataset::RejectKind::Degenerate),
    );
    Ok(())
}

fn segment(args: SegmentArgs) -> Result<()> {
    let lexicon = read_lexicon(&args.lexicon)?;
    let mut out = create_output(&args.output)?;
    for line in open_input(&args.input)?.lines() {
        let line = line?;
        let chars: Vec<char> = line.trim_end_matches('\r').chars().collect();
        writeln!(out, "{}", segment_chars(&chars, &lexicon).render(&chars))?;
    }
    out.flush()?;
    Ok(())
}

fn mask(args: MaskArgs, config: &Config) -> Result<()> {
    let defaults = MaskingConfig::default();
    let strategy: Strategy = args.strategy.or(config.strategy).unwrap_or(StrategyArg::Clm).into();
    let cfg = MaskingConfig {
        strategy,
        mask_rate: args.mask_rate.or(config.mask_rate).unwrap_or(defaults.mask_rate),
        max_seq_len: args.max_seq_len.or(config.max_seq_len).unwrap_or(defaults.max_seq_len),
        seed: args.seed.or(config.seed).unwrap_or(defaults.seed),
        ..defaults
    };
    let workers = args
        .workers
        .or(config.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let lexicon = args.lexicon.as_deref().map(read_lexicon).transpose()?;
    let empty = Lexicon::new();
    let seg = match (&lexicon, args.presegmented) {
        (_, true) => Segmentation::Presegmented,
        (Some(lex), false) => Segmentation::Lexicon(lex),
        (None, false) => {
            if strategy != Strategy::Clm {
                log::warn!("no lexicon given: whole-word masking falls back to single characters");
            }
            Segmentation::Lexicon(&empty)
        }
    };

    let mut text = String::new();
    open_input(&args.input)?.read_to_string(&mut text)?;
    let vocab = match &args.vocab {
        Some(path) => read_vocab(path)?,
        None => Vocab::from_chars(text.chars().filter(|c| !c.is_whitespace())),
    };
    let mut out = create_output(&args.output)?;
    let summary = generate_corpus(text.as_bytes(), &mut out, &cfg, &vocab, seg, workers)?;
    eprintln!(
        "{} lines ({} skipped): {} instances, {} clm / {} wwm",
        summary.lines, summary.skipped_lines, summary.instances, summary.clm, summary.wwm
    );
    Ok(())
}

fn probe(args: ProbeArgs, config: &Config) -> Result<()> {
    let Some(bridge) = args.bridge.or_else(|| config.bridge.clone()) else {
        bail!("no bridge endpoint: pass --bridge, set CHARPROBE_BRIDGE or `bridge` in the config file");
    };
    let endpoint: Endpoint = bridge.parse().map_err(anyhow::Error::msg)?;
    let instances = read_instances(open_input(&args.instances)?)?;
    let vocab = args.vocab.as_deref().map(read_vocab).transpose()?;
    let opts = ProbeOptions {
        top_k: args.k.or(config.k).unwrap_or(10),
        max_seq_len: args.max_seq_len.or(config.max_seq_len).unwrap_or(512),
        granularity: args
            .granularity
            .or(config.granularity)
            .map_or(Granularity::Position, Into::into),
    };
    let client_opts = ClientOptions {
        max_in_flight: args.max_in_flight.or(config.max_in_flight).unwrap_or(64),
        timeout: Duration::from_secs(args.timeout_secs.or(config.timeout_secs).unwrap_or(30)),
    };

    let mut client =
        BridgeClient::connect(&endpoint, client_opts).with_context(|| format!("connecting to {endpoint}"))?;
    let run = run_probe(&instances, &mut client, vocab.as_ref(), &opts)?;
    let orphans = client.orphans().to_vec();
    drop(client);

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut w = create_in(&args.out_dir, "metrics.tsv")?;
    run.table.write_tsv(&mut w)?;
    w.flush()?;
    let rendered = render_table(&[(args.label.as_str(), &run.table)]);
    fs::write(args.out_dir.join("metrics.txt"), &rendered)?;
    let mut w = create_in(&args.out_dir, "records.jsonl")?;
    for record in &run.records {
        serde_json::to_writer(&mut w, record)?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut w = create_in(&args.out_dir, "problems.tsv")?;
    writeln!(w, "id\tkind\tdetail")?;
    for skip in &run.skipped {
        writeln!(w, "{}\tskipped\t{}", skip.id, skip.reason)?;
    }
    for (id, err) in &run.errors {
        writeln!(w, "{id}\tprotocol\t{err}")?;
    }
    for err in &orphans {
        writeln!(w, "\torphan\t{err}")?;
    }
    w.flush()?;

    print!("{rendered}");
    eprintln!(
        "{} instances: {} scored positions, {} skipped, {} protocol errors",
        instances.len(),
        run.records.len(),
        run.skipped.len(),
        run.errors.len()
    );
    if run.records.is_empty() && !instances.is_empty() {
        bail!(
            "no instance was scored; see {}",
            args.out_dir.join("problems.tsv").display()
        );
    }
    Ok(())
}

fn default_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn report(args: ReportArgs) -> Result<()> {
    if !args.label.is_empty() && args.label.len() != args.tables.len() {
        bail!("{} labels for {} tables", args.label.len(), args.tables.len());
    }
    let mut series = Vec::with_capacity(args.tables.len());
    for (i, path) in args.tables.iter().enumerate() {
        let table = MetricTable::read_tsv(open_input(path)?).with_context(|| format!("reading {}", path.display()))?;
        let label = args.label.get(i).cloned().unwrap_or_else(|| default_label(path));
        series.push((label, table));
    }
    let rows: Vec<(&str, &MetricTable)> = series.iter().map(|(l, t)| (l.as_str(), t)).collect();
    print!("{}", render_table(&rows));

    if let Some(curve) = &args.curve {
        let rows = curve_series(&series)?;
        let mut w = create_output(curve)?;
        eval::write_curve_csv(&mut w, &rows)?;
        w.flush()?;
        for (task, bucket, metric) in degrading_series(&rows) {
            eprintln!("degrading: {task} {bucket} {metric}");
        }
    }
    Ok(())
}

fn serve(args: ServeArgs, config: &Config) -> Result<()> {
    let predictor: Arc<dyn Predictor> = match args.backend {
        Backend::Ngram => {
            let path = args.train.as_deref().context("--train is required")?;
            Arc::new(ngram_train(open_input(path)?, args.order)?)
        }
        Backend::Oracle => {
            let path = args.instances.as_deref().context("--instances is required")?;
            Arc::new(OraclePredictor::new(&read_instances(open_input(path)?)?))
        }
        Backend::Uniform => {
            let alphabet: Vec<char> = match &args.vocab {
                Some(path) => read_vocab(path)?.characters().collect(),
                None => (0x4E00u32..)
                    .filter_map(char::from_u32)
                    .take(args.alphabet_size)
                    .collect(),
            };
            Arc::new(UniformPredictor::new(alphabet, args.seed.or(config.seed).unwrap_or(0)))
        }
    };
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp(listener, predictor)?;
        }
        None => {
            let handled = serve_stream(&predictor, io::stdin().lock(), io::stdout().lock())?;
            log::info!("answered {handled} queries");
        }
    }
    Ok(())
}
