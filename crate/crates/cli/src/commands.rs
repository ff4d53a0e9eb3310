use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use graphtext::checkpoint::Checkpoint;
use graphtext::config::RunConfig;
use graphtext::contrastive::LossMask;
use graphtext::corpus::GraphTextCorpus;
use graphtext::experiment::Evaluator;
use graphtext::graph_encoder::GraphInputs;
use graphtext::model::DualEncoder;
use graphtext::pretrain::{pretrain, TrainLog};
use graphtext::prompt::{DiscretePrompt, PromptInit};
use graphtext::tasks::{generate_synthetic_raw, EvalReport};
use graphtext::{Error, Result};

/// Graph-grounded contrastive pre-training and prompt-based classification.
#[derive(Debug, Parser)]
#[command(name = "graphtext", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train the text and graph encoders on a corpus directory.
    Pretrain(PretrainArgs),
    /// Classify with label-text prompts and no labeled examples.
    Zeroshot(ZeroShotArgs),
    /// Tune a continuous prompt per task on K labeled examples per class.
    Fewshot(FewShotArgs),
    /// Write a synthetic corpus with planted classes.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of L1,L2,L3.
    #[arg(long)]
    loss_mask: Option<LossMask>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// TOML file whose [prompt] and [evaluation] sections replace the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Also write the reports as JSON lines here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
}

#[derive(Debug, Args)]
struct ZeroShotArgs {
    #[command(flatten)]
    common: EvalArgs,
    /// Discrete prompt containing `[CLASS]`; empty uses the label text alone.
    #[arg(long)]
    template: Option<String>,
}

#[derive(Debug, Args)]
struct FewShotArgs {
    #[command(flatten)]
    common: EvalArgs,
    #[arg(long)]
    shots: Option<usize>,
    /// context, random or label-only.
    #[arg(long)]
    init: Option<PromptInit>,
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Tuning epochs per task.
    #[arg(long)]
    epochs: Option<usize>,
    /// Neighbors sampled per support node for context initialization.
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory to write the corpus files into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    docs_per_class: Option<usize>,
    #[arg(long)]
    p_in: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Zeroshot(a) => cmd_zeroshot(a),
        Command::Fewshot(a) => cmd_fewshot(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    let p = &mut config.pretrain;
    set(&mut p.seed, a.seed);
    set(&mut p.loss_mask, a.loss_mask);
    set(&mut p.lambda, a.lambda);
    set(&mut p.eta, a.eta);
    set(&mut p.batch_size, a.batch_size);
    set(&mut p.epochs, a.epochs);
    set(&mut p.learning_rate, a.learning_rate);
    config.validate()?;

    let (corpus, table) = GraphTextCorpus::load_parts(&a.corpus, &config.corpus, None, None)?;
    log::info!(
        "corpus {}: {} documents, {} edges, vocabulary {}",
        a.corpus.display(),
        corpus.len(),
        corpus.raw.edges.len(),
        corpus.vocab.len()
    );
    config.model = config.model.for_corpus(&corpus);
    let inputs = GraphInputs::from_corpus(&corpus)?;
    let mut model = DualEncoder::new(config.model, corpus.feature_dim(), config.pretrain.seed)?;

    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log");
        PathBuf::from(s)
    });
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut write_error = None;
    let _ = writeln!(writer, "{}", TrainLog::HEADER);
    pretrain(&mut model, &corpus, &inputs, &config.pretrain, |record| {
        if let Err(e) = writeln!(writer, "{record}") {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(Error::io(&log_path, e));
    }
    writer.flush().map_err(|e| Error::io(&log_path, e))?;

    let checkpoint = Checkpoint {
        seed: config.pretrain.seed,
        corpus_fingerprint: corpus.raw.fingerprint(),
        vocab: corpus.vocab.clone(),
        word_embeddings: table,
        config,
        model,
    };
    checkpoint.save(&a.out)?;
    log::info!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

/// Loads the checkpoint and re-reads the corpus with its vocabulary and word vectors.
fn prepare(a: &EvalArgs) -> Result<(Checkpoint, GraphTextCorpus)> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let mut config = checkpoint.config.clone();
    if let Some(path) = &a.config {
        let other = RunConfig::load(path)?;
        config.prompt = other.prompt;
        config.evaluation = other.evaluation;
    }
    set(&mut config.evaluation.seed, a.seed);
    set(&mut config.evaluation.ways, a.ways);
    set(&mut config.evaluation.tasks, a.tasks);
    let corpus = GraphTextCorpus::load_with(
        &a.corpus,
        &config.corpus,
        Some(checkpoint.vocab.clone()),
        Some(checkpoint.word_embeddings.clone()),
    )?;
    let fingerprint = corpus.raw.fingerprint();
    if fingerprint != checkpoint.corpus_fingerprint {
        log::warn!(
            "corpus fingerprint {fingerprint} differs from the pre-training corpus {}",
            checkpoint.corpus_fingerprint
        );
    }
    Ok((Checkpoint { config, ..checkpoint }, corpus))
}

fn emit(reports: &[&EvalReport], out: Option<&Path>) -> Result<()> {
    for r in reports {
        println!("{}", r.to_table());
    }
    if let Some(path) = out {
        let body: String = reports.iter().map(|r| r.to_json_lines()).collect();
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_zeroshot(a: ZeroShotArgs) -> Result<()> {
    let (mut ck, corpus) = prepare(&a.common)?;
    set(&mut ck.config.evaluation.template, a.template);
    ck.config.validate()?;
    let template = DiscretePrompt::parse(&ck.config.evaluation.template)?;
    let ev = ck.config.evaluation;
    let evaluator = Evaluator::new(&ck.model, &corpus)?;
    let report = evaluator.zero_shot(&template, ev.ways, ev.tasks, ev.seed)?;
    emit(&[&report], a.common.out.as_deref())
}

fn cmd_fewshot(a: FewShotArgs) -> Result<()> {
    let (mut ck, corpus) = prepare(&a.common)?;
    set(&mut ck.config.evaluation.shots, a.shots);
    let p = &mut ck.config.prompt;
    set(&mut p.init, a.init);
    set(&mut p.prompt_len, a.prompt_len);
    set(&mut p.epochs, a.epochs);
    set(&mut p.eta, a.eta);
    set(&mut p.learning_rate, a.learning_rate);
    if ck.config.evaluation.shots < 1 {
        return Err(Error::Config("few-shot needs at least one shot; use zeroshot for K = 0".into()));
    }
    ck.config.validate()?;
    let ev = &ck.config.evaluation;
    let evaluator = Evaluator::new(&ck.model, &corpus)?;
    let (tuned, baseline) = evaluator.few_shot(&ck.config.prompt, ev.ways, ev.shots, ev.tasks, ev.seed)?;
    emit(&[&tuned, &baseline], a.common.out.as_deref())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    let s = &mut config.synthetic;
    set(&mut s.seed, a.seed);
    set(&mut s.classes, a.classes);
    set(&mut s.docs_per_class, a.docs_per_class);
    set(&mut s.p_in, a.p_in);
    set(&mut s.p_out, a.p_out);
    set(&mut s.noise, a.noise);
    config.validate()?;
    let raw = generate_synthetic_raw(&config.synthetic)?;
    raw.save(&a.out)?;
    log::info!(
        "wrote {} documents and {} edges to {}",
        raw.len(),
        raw.edges.len(),
        a.out.display()
    );
    Ok(())
}
