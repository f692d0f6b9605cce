//! Pipeline driver: synthetic corpus generation, statement extraction,
//! pair generation, training, evaluation, ablation sweeps, and plotting.
//! Every subcommand is deterministic given its seed flags.

mod plot;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use mtb::checkpoint::load_checkpoint;
use mtb::corpus::{cap_by_entity, extract_all, Document};
use mtb::encoder::{EncoderConfig, EncoderModel};
use mtb::evaluation::{
    self, build_episodes, evaluate_fewshot, evaluate_supervised, to_fewshot_classes,
    to_supervised_examples, Aggregation, EvalReport, LabeledStatement, RelationMap, SweepRow,
    SweepSpec,
};
use mtb::jsonl;
use mtb::objectives::ClassifierHead;
use mtb::pairgen::{generate_pairs, PairGenConfig, PairRecord};
use mtb::synth::{synth_corpus, SynthConfig};
use mtb::tokens::{build_vocab, Vocabulary};
use mtb::training::{
    prepare_pairs, train, CheckpointSink, MetricsRecord, TrainConfig, TrainData, TrainMode,
};

#[derive(Parser)]
#[command(
    name = "mtb",
    version,
    about = "Relation representation learning by matching the blanks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a templated synthetic entity-linked corpus with gold labels.
    Synth(SynthArgs),
    /// Extract relation statements from entity-linked documents.
    Extract(ExtractArgs),
    /// Generate blanked statement pairs for pretraining.
    Pairgen(PairgenArgs),
    /// Run a training loop (pretraining or fine-tuning).
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[command(subcommand)]
        task: EvalTask,
    },
    /// Fine-tune on growing labeled subsets and tabulate accuracy.
    Sweep(SweepArgs),
    /// Render metrics logs and sweep tables to SVG/CSV.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum EvalTask {
    /// N-way-K-shot exemplar matching by inner product.
    Fewshot(FewshotArgs),
    /// Classifier accuracy and micro-F1 (nil class excluded from F1).
    Supervised(SupervisedArgs),
    /// Alias of the top-level sweep command.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    relations: usize,
    #[arg(long, default_value_t = 2)]
    templates_per_relation: usize,
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 2000)]
    docs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    distractor_prob: f64,
    #[arg(long)]
    pairs_per_relation: Option<usize>,
    /// Directory for docs.jsonl, labeled.jsonl, relations.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    /// Documents JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Vocabulary file (read, or written with --build-vocab).
    #[arg(long)]
    vocab: PathBuf,
    /// Build the vocabulary from the input corpus before extracting.
    #[arg(long, default_value_t = false)]
    build_vocab: bool,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 40)]
    window: usize,
    /// Cap statements per entity (reservoir sampled); 0 disables.
    #[arg(long, default_value_t = 0)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    cap_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairgenArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pos_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    hard_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    max_pairs: usize,
    #[arg(long, default_value_t = false)]
    exclude_same_doc: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [encoder] and [train] sections.
    #[arg(long)]
    config: PathBuf,
    /// Pairs JSONL (mtb_pretrain) or labeled JSONL (fine-tune modes).
    #[arg(long)]
    data: PathBuf,
    /// Relation-name mapping, required for supervised_finetune.
    #[arg(long)]
    relations: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint stem to initialize from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggArg {
    Max,
    Mean,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AggArg::Max)]
    agg: AggArg,
    /// Keep statements labeled no_relation in the episode pool.
    #[arg(long, default_value_t = false)]
    include_nil: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also print a per-class text table.
    #[arg(long, default_value_t = false)]
    table: bool,
}

#[derive(Args)]
struct SupervisedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    relations: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    table: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML file with [encoder] and [train] sections for fine-tuning.
    #[arg(long)]
    config: PathBuf,
    /// Starting encoder checkpoint; omitted = fresh random encoder.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long)]
    relations: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Comma-separated examples-per-type grid; 0 = untuned few-shot point.
    #[arg(long, default_value = "0,1,4,16")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    fewshot_n: usize,
    #[arg(long, default_value_t = 1)]
    fewshot_k: usize,
    #[arg(long, default_value_t = 500)]
    fewshot_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sweep table output (JSONL).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics JSONL from training.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Sweep table JSONL.
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Relative paths resolve under MTB_DATA_DIR when it is set.
fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(base) = std::env::var("MTB_DATA_DIR") {
            return PathBuf::from(base).join(path);
        }
    }
    path.to_path_buf()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainFile {
    encoder: EncoderConfig,
    train: TrainConfig,
}

fn load_train_file(path: &Path) -> anyhow::Result<TrainFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let file: TrainFile = toml::from_str(&text).map_err(|e| anyhow!("bad config file: {e}"))?;
    file.train.validate()?;
    Ok(file)
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Ok(Vocabulary::load(resolve(path))?)
}

fn write_report(report: &EvalReport, path: Option<&PathBuf>) -> anyhow::Result<()> {
    let mut value = serde_json::to_value(report)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("format".into(), "mtb.report".into());
        map.insert("version".into(), 1u32.into());
    }
    let text = serde_json::to_string_pretty(&value)?;
    match path {
        Some(path) => std::fs::write(resolve(path), text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn print_class_table(report: &EvalReport) {
    println!("{:<20} {:>8} {:>10} {:>8}", "class", "gold", "predicted", "correct");
    for row in &report.per_class {
        println!(
            "{:<20} {:>8} {:>10} {:>8}",
            row.class, row.gold, row.predicted, row.correct
        );
    }
}

fn checkpoint_model(
    stem: &Path,
    vocab: &Vocabulary,
) -> anyhow::Result<(EncoderModel, Option<ClassifierHead>)> {
    let loaded = load_checkpoint(&resolve(stem))?;
    if loaded.vocab_hash != vocab.content_hash() {
        bail!(
            "checkpoint {} was trained with a different vocabulary (hash mismatch)",
            stem.display()
        );
    }
    Ok((loaded.model, loaded.head))
}

fn run_synth(args: SynthArgs) -> anyhow::Result<()> {
    let out_dir = resolve(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let output = synth_corpus(&SynthConfig {
        num_relations: args.relations,
        templates_per_relation: args.templates_per_relation,
        entities: args.entities,
        docs: args.docs,
        seed: args.seed,
        distractor_prob: args.distractor_prob,
        pairs_per_relation: args.pairs_per_relation,
    })?;
    jsonl::write_jsonl(out_dir.join("docs.jsonl"), jsonl::DOCUMENTS, output.documents.iter())?;
    jsonl::write_jsonl(out_dir.join("labeled.jsonl"), jsonl::LABELED, output.labeled.iter())?;
    std::fs::write(out_dir.join("relations.txt"), output.relations.join("\n") + "\n")?;
    println!(
        "synth: wrote {} documents, {} labeled statements, {} relations to {}",
        output.documents.len(),
        output.labeled.len(),
        output.relations.len(),
        out_dir.display()
    );
    Ok(())
}

fn run_extract(args: ExtractArgs) -> anyhow::Result<()> {
    let docs: Vec<Document> = jsonl::read_jsonl(resolve(&args.input), jsonl::DOCUMENTS)?;
    for doc in &docs {
        doc.validate()?;
    }
    let vocab_path = resolve(&args.vocab);
    let vocab = if args.build_vocab {
        let vocab = build_vocab(docs.iter().flat_map(|d| d.tokens.iter()), args.min_count)?;
        vocab.save(&vocab_path)?;
        vocab
    } else {
        Vocabulary::load(&vocab_path)?
    };

    let mut statements = extract_all(&docs, &vocab, args.window);
    let extracted = statements.len();
    if args.cap > 0 {
        statements = cap_by_entity(statements, args.cap, args.cap_seed);
    }
    jsonl::write_jsonl(resolve(&args.out), jsonl::STATEMENTS, statements.iter())?;
    println!(
        "extract: {} documents -> {} statements{} ({} vocab entries)",
        docs.len(),
        statements.len(),
        if args.cap > 0 {
            format!(" (capped from {extracted})")
        } else {
            String::new()
        },
        vocab.len()
    );
    Ok(())
}

fn run_pairgen(args: PairgenArgs) -> anyhow::Result<()> {
    let statements: Vec<mtb::corpus::RelationStatement> =
        jsonl::read_jsonl(resolve(&args.input), jsonl::STATEMENTS)?;
    let config = PairGenConfig {
        alpha: args.alpha,
        pos_fraction: args.pos_fraction,
        hard_fraction: args.hard_fraction,
        seed: args.seed,
        max_pairs: args.max_pairs,
        exclude_same_doc: args.exclude_same_doc,
    };
    let pairs = if args.max_pairs == 0 {
        Vec::new()
    } else {
        generate_pairs(&statements, &config)?
    };
    let records: Vec<PairRecord> = pairs.iter().map(PairRecord::from).collect();
    jsonl::write_jsonl(resolve(&args.out), jsonl::PAIRS, records.iter())?;
    let positives = pairs.iter().filter(|p| p.label == 1).count();
    println!(
        "pairgen: {} pairs ({} positive, {} negative)",
        pairs.len(),
        positives,
        pairs.len() - positives
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let file = load_train_file(&resolve(&args.config))?;
    let vocab = load_vocab(&args.vocab)?;

    let mut encoder_config = file.encoder;
    if encoder_config.vocab_size == 0 {
        encoder_config.vocab_size = vocab.len();
    } else if encoder_config.vocab_size != vocab.len() {
        bail!(
            "encoder vocab_size {} does not match vocabulary size {}",
            encoder_config.vocab_size,
            vocab.len()
        );
    }

    let model = match &args.init {
        Some(stem) => checkpoint_model(stem, &vocab)?.0,
        None => EncoderModel::new(encoder_config.clone())?,
    };

    let out_dir = resolve(&args.out);
    std::fs::create_dir_all(&out_dir)?;
    let sink = CheckpointSink {
        dir: out_dir.clone(),
        vocab_hash: vocab.content_hash(),
    };

    let outcome = match file.train.mode {
        TrainMode::MtbPretrain => {
            let records: Vec<PairRecord> = jsonl::read_jsonl(resolve(&args.data), jsonl::PAIRS)?;
            let prepared = prepare_pairs(&records, &model.config)?;
            train(model, None, TrainData::Pairs(&prepared), &file.train, Some(&sink))?
        }
        TrainMode::SupervisedFinetune => {
            let labeled: Vec<LabeledStatement> =
                jsonl::read_jsonl(resolve(&args.data), jsonl::LABELED)?;
            let relations_path = args
                .relations
                .as_ref()
                .ok_or_else(|| anyhow!("supervised_finetune requires --relations"))?;
            let relations = RelationMap::load(resolve(relations_path))?;
            let examples = to_supervised_examples(&labeled, &vocab, &relations, &model.config)?;
            let head = ClassifierHead::new(
                relations.len(),
                model.config.rep_dim(),
                relations.nil_index(),
                file.train.seed,
            );
            train(model, Some(head), TrainData::Supervised(&examples), &file.train, Some(&sink))?
        }
        TrainMode::FewshotFinetune => {
            let labeled: Vec<LabeledStatement> =
                jsonl::read_jsonl(resolve(&args.data), jsonl::LABELED)?;
            let classes = to_fewshot_classes(&labeled, &vocab, &model.config)?;
            train(model, None, TrainData::Fewshot(&classes), &file.train, Some(&sink))?
        }
    };

    jsonl::write_jsonl(out_dir.join("metrics.jsonl"), jsonl::METRICS, outcome.metrics.iter())?;
    let last = outcome.metrics.last();
    println!(
        "train: {} steps complete, final loss {:.4}; checkpoint at {}",
        file.train.steps,
        last.map(|m| m.loss).unwrap_or(f64::NAN),
        out_dir.join("ckpt-final").display()
    );
    Ok(())
}

fn run_eval_fewshot(args: FewshotArgs) -> anyhow::Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let (model, _) = checkpoint_model(&args.ckpt, &vocab)?;
    let mut pool: Vec<LabeledStatement> = jsonl::read_jsonl(resolve(&args.data), jsonl::LABELED)?;
    if !args.include_nil {
        pool.retain(|st| st.relation != evaluation::NIL_RELATION);
    }
    let episodes = build_episodes(&pool, args.n_way, args.k_shot, args.episodes, args.seed)?;
    let aggregation = match args.agg {
        AggArg::Max => Aggregation::Max,
        AggArg::Mean => Aggregation::Mean,
    };
    let report = evaluate_fewshot(&model, &vocab, &episodes, aggregation)?;
    println!(
        "fewshot: accuracy {:.4} (95% interval {:.4}..{:.4}, n={})",
        report.accuracy, report.interval95.0, report.interval95.1, report.n
    );
    if args.table {
        print_class_table(&report);
    }
    write_report(&report, args.report.as_ref())?;
    Ok(())
}

fn run_eval_supervised(args: SupervisedArgs) -> anyhow::Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let (model, head) = checkpoint_model(&args.ckpt, &vocab)?;
    let head = head.ok_or_else(|| anyhow!("checkpoint has no classifier head"))?;
    let labeled: Vec<LabeledStatement> = jsonl::read_jsonl(resolve(&args.data), jsonl::LABELED)?;
    let relations = RelationMap::load(resolve(&args.relations))?;
    let report = evaluate_supervised(&model, &head, &vocab, &labeled, &relations)?;
    let micro = report.micro.as_ref().expect("supervised micro scores");
    println!(
        "supervised: accuracy {:.4}, micro-P {:.4}, micro-R {:.4}, micro-F1 {:.4} (n={})",
        report.accuracy, micro.precision, micro.recall, micro.f1, report.n
    );
    if args.table {
        print_class_table(&report);
    }
    write_report(&report, args.report.as_ref())?;
    Ok(())
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let file = load_train_file(&resolve(&args.config))?;
    let vocab = load_vocab(&args.vocab)?;
    let mut encoder_config = file.encoder;
    if encoder_config.vocab_size == 0 {
        encoder_config.vocab_size = vocab.len();
    }
    let init = match &args.init {
        Some(stem) => checkpoint_model(stem, &vocab)?.0,
        None => EncoderModel::new(encoder_config)?,
    };
    let train_set: Vec<LabeledStatement> =
        jsonl::read_jsonl(resolve(&args.train_data), jsonl::LABELED)?;
    let eval_set: Vec<LabeledStatement> =
        jsonl::read_jsonl(resolve(&args.eval_data), jsonl::LABELED)?;
    let relations = RelationMap::load(resolve(&args.relations))?;
    let grid: Vec<usize> = args
        .grid
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow!("bad --grid: {e}"))?;

    let mut tune = file.train;
    tune.mode = TrainMode::SupervisedFinetune;
    let rows = mtb::evaluation::ablation_sweep(&SweepSpec {
        init: &init,
        vocab: &vocab,
        train_set: &train_set,
        eval_set: &eval_set,
        relations: &relations,
        grid: &grid,
        tune,
        fewshot: (args.fewshot_n, args.fewshot_k, args.fewshot_episodes),
        seed: args.seed,
    })?;

    for row in &rows {
        if row.skipped {
            eprintln!("sweep: grid point {} skipped (infeasible)", row.examples_per_type);
        } else {
            println!(
                "sweep: examples_per_type {:>4} -> accuracy {:.4}{}",
                row.examples_per_type,
                row.accuracy,
                row.micro_f1
                    .map(|f1| format!(", micro-F1 {f1:.4}"))
                    .unwrap_or_default()
            );
        }
    }
    jsonl::write_jsonl(resolve(&args.report), jsonl::SWEEP, rows.iter())?;
    Ok(())
}

fn run_plot(args: PlotArgs) -> anyhow::Result<()> {
    if args.metrics.is_none() && args.sweep.is_none() {
        bail!("plot requires --metrics and/or --sweep");
    }
    let out_dir = resolve(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    if let Some(metrics_path) = &args.metrics {
        let metrics: Vec<MetricsRecord> = jsonl::read_jsonl(resolve(metrics_path), jsonl::METRICS)?;
        let mut series = vec![plot::Series {
            name: "loss".into(),
            points: metrics.iter().map(|m| (m.step as f64, m.loss)).collect(),
        }];
        if metrics.iter().any(|m| m.mtb_loss.is_some()) {
            series.push(plot::Series {
                name: "pair loss".into(),
                points: metrics
                    .iter()
                    .filter_map(|m| m.mtb_loss.map(|v| (m.step as f64, v)))
                    .collect(),
            });
        }
        if metrics.iter().any(|m| m.mlm_loss.is_some()) {
            series.push(plot::Series {
                name: "mlm loss".into(),
                points: metrics
                    .iter()
                    .filter_map(|m| m.mlm_loss.map(|v| (m.step as f64, v)))
                    .collect(),
            });
        }
        let svg = plot::line_chart("training loss", "step", "loss", &series);
        std::fs::write(out_dir.join("loss.svg"), svg)?;
        if metrics.iter().any(|m| m.accuracy.is_some()) {
            let accuracy_series = vec![plot::Series {
                name: "batch accuracy".into(),
                points: metrics
                    .iter()
                    .filter_map(|m| m.accuracy.map(|v| (m.step as f64, v)))
                    .collect(),
            }];
            let svg = plot::line_chart("training accuracy", "step", "accuracy", &accuracy_series);
            std::fs::write(out_dir.join("accuracy.svg"), svg)?;
        }
        let rows: Vec<Vec<String>> = metrics
            .iter()
            .map(|m| {
                vec![
                    m.step.to_string(),
                    format!("{}", m.loss),
                    m.mtb_loss.map(|v| v.to_string()).unwrap_or_default(),
                    m.mlm_loss.map(|v| v.to_string()).unwrap_or_default(),
                    m.accuracy.map(|v| v.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        std::fs::write(
            out_dir.join("metrics.csv"),
            plot::to_csv(&["step", "loss", "mtb_loss", "mlm_loss", "accuracy"], &rows),
        )?;
        println!("plot: wrote {} and metrics.csv", out_dir.join("loss.svg").display());
    }

    if let Some(sweep_path) = &args.sweep {
        let rows: Vec<SweepRow> = jsonl::read_jsonl(resolve(sweep_path), jsonl::SWEEP)?;
        let series = vec![plot::Series {
            name: "accuracy".into(),
            points: rows
                .iter()
                .filter(|r| !r.skipped)
                .map(|r| (r.examples_per_type as f64, r.accuracy))
                .collect(),
        }];
        let svg = plot::line_chart(
            "accuracy vs annotation budget",
            "examples per type",
            "accuracy",
            &series,
        );
        std::fs::write(out_dir.join("sweep.svg"), svg)?;
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.examples_per_type.to_string(),
                    format!("{}", r.accuracy),
                    r.micro_f1.map(|v| v.to_string()).unwrap_or_default(),
                    r.skipped.to_string(),
                ]
            })
            .collect();
        std::fs::write(
            out_dir.join("sweep.csv"),
            plot::to_csv(&["examples_per_type", "accuracy", "micro_f1", "skipped"], &csv_rows),
        )?;
        println!("plot: wrote {} and sweep.csv", out_dir.join("sweep.svg").display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Extract(args) => run_extract(args),
        Command::Pairgen(args) => run_pairgen(args),
        Command::Train(args) => run_train(args),
        Command::Eval { task } => match task {
            EvalTask::Fewshot(args) => run_eval_fewshot(args),
            EvalTask::Supervised(args) => run_eval_supervised(args),
            EvalTask::Sweep(args) => run_sweep(args),
        },
        Command::Sweep(args) => run_sweep(args),
        Command::Plot(args) => run_plot(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        // Machine-readable error record on stderr.
        let mut record = serde_json::json!({ "error": error.to_string() });
        if let Some(mtb::Error::Malformed { line, .. }) = error.downcast_ref::<mtb::Error>() {
            record["line"] = (*line).into();
        }
        eprintln!("{record}");
        std::process::exit(1);
    }
}
