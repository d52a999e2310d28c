#![allow(clippy::type_complexity)]

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taglm::config::ExperimentConfig;
use taglm::corpus::{read_conll, read_plain, SchemeKind, Sentence, Token, Vocabulary};
use taglm::evaluation::{report, ReportRow};
use taglm::experiment::{
    ablation_variants, convert_sentences, load_embedder, main_variant, prepare_features, prepare_task, run_variant_seed,
    AblationKind, Comparison, EmbeddingCache, LmEmbedder, VariantData,
};
use taglm::langmodel::{train_lm, Direction, LanguageModel, LmConfig, LmInput, LmTrainConfig};
use taglm::layers::CellKind;
use taglm::persist::{lm_container, lm_from_container, tagger_container, tagger_from_container, Container};
use taglm::synthetic::{GrammarTask, GrammarTaskConfig, MarkovChain};
use taglm::tagger::TaggerModel;
use taglm::training::{evaluate, multi_seed, summarize, LabeledSet, RunResult};
use taglm::{Error, Result, RngStream, Tensor};

#[derive(Parser)]
#[command(name = "taglm", version, about = "Sequence tagging with language-model embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a forward or backward language model on one-sentence-per-line text.
    LmTrain(LmTrainArgs),
    /// Print a language model's perplexity on a corpus.
    LmEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Write LM embeddings of every sentence to a cache container.
    LmEmbed {
        #[arg(long)]
        forward: Option<PathBuf>,
        #[arg(long)]
        backward: Option<PathBuf>,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a tagger once per configured seed.
    TagTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a trained tagger on labeled data.
    TagEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        columns: usize,
        #[arg(long, default_value_t = 3)]
        tag_column: usize,
        #[arg(long, default_value = "iob1")]
        source_scheme: SchemeKind,
        #[command(flatten)]
        lm: LmArgs,
    },
    /// Tag text with a trained model.
    Tag {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        lm: LmArgs,
    },
    /// Run one of the comparison sweeps.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate synthetic corpora.
    Synth {
        #[command(subcommand)]
        what: SynthCommand,
    },
}

#[derive(Args)]
struct LmTrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "forward")]
    direction: Direction,
    #[arg(long, value_enum, default_value_t = CellArg::Lstm)]
    cell: CellArg,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long)]
    projection: Option<usize>,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Read characters through a CNN instead of a token embedding table.
    #[arg(long)]
    char_cnn: bool,
    /// Use raw token forms instead of lowercased, digit-normalized ones.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-epoch JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CellArg {
    Gru,
    Lstm,
    Lstmp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Plain,
    Conll,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Plain)]
    format: Format,
}

#[derive(Args)]
struct LmArgs {
    #[arg(long)]
    lm_forward: Option<PathBuf>,
    #[arg(long)]
    lm_backward: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Sentences from a random first-order Markov chain.
    Chain {
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        branching: usize,
        #[arg(long, default_value_t = 0.15)]
        end_prob: f64,
        #[arg(long, default_value_t = 2000)]
        sentences: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-grammar tagging task: labeled train/dev plus unlabeled text.
    Grammar {
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 300)]
        dev: usize,
        #[arg(long, default_value_t = 20_000)]
        unlabeled: usize,
        /// Cue words per grammar.
        #[arg(long, default_value_t = 300)]
        cues: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::LmTrain(a) => lm_train(a),
        Command::LmEval { model, corpus } => {
            let lm: LanguageModel = lm_from_container(&Container::load(&model)?)?;
            println!("{:.4}", lm.perplexity(&read_plain(&corpus)?)?);
            Ok(())
        }
        Command::LmEmbed { forward, backward, input, out } => {
            let embedder = load_embedder::<f64>(forward.as_deref(), backward.as_deref())?
                .ok_or_else(|| Error::Usage("give --forward and/or --backward".into()))?;
            let (sentences, _) = read_input(&input)?;
            let mut cache = EmbeddingCache::for_embedder(&embedder);
            embedder.extract_all(&sentences, &mut cache)?;
            cache.to_container().save(&out)?;
            Ok(())
        }
        Command::TagTrain { config } => tag_train(&config),
        Command::TagEval { model, data, columns, tag_column, source_scheme, lm } => {
            let model: TaggerModel = tagger_from_container(&Container::load(&model)?)?;
            let sentences = convert_sentences(&read_conll(&data, columns, tag_column)?, source_scheme, model.config.scheme)?;
            let set = LabeledSet::new(sentences.clone(), lm_for(&model, &lm, &sentences)?)?;
            print!("{}", evaluate(&model, &set)?.table());
            Ok(())
        }
        Command::Tag { model, input, lm } => {
            let model: TaggerModel = tagger_from_container(&Container::load(&model)?)?;
            let (sentences, lines) = read_input(&input)?;
            let feats = lm_for(&model, &lm, &sentences)?;
            let mut out = std::io::stdout().lock();
            for (i, s) in sentences.iter().enumerate() {
                let tags = model.predict(s, feats.as_ref().map(|f| &f[i]))?;
                for (k, tag) in tags.iter().enumerate() {
                    let line = match &lines {
                        Some(l) => format!("{} {tag}", l[i][k]),
                        None => format!("{} _ _ {tag}", s.tokens[k].raw),
                    };
                    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
                }
                writeln!(out).map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        }
        Command::Ablate { kind, config } => ablate(kind.parse()?, &config),
        Command::Synth { what } => synth(what),
    }
}

fn lm_train(a: LmTrainArgs) -> Result<()> {
    let corpus = read_plain(&a.corpus)?;
    let dev = a.dev.as_deref().map(read_plain).transpose()?;
    let mut cfg = LmConfig::lstm(a.direction, a.embed_dim, a.hidden);
    cfg.cell = match a.cell {
        CellArg::Gru => CellKind::Gru,
        CellArg::Lstm => CellKind::Lstm,
        CellArg::Lstmp => CellKind::Lstmp,
    };
    cfg.projection = a.projection;
    cfg.layers = a.layers;
    cfg.normalize = !a.raw;
    if a.char_cnn {
        cfg.input = LmInput::CharCnn;
    }
    let forms: Vec<&str> = corpus
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| if a.raw { t.raw.as_str() } else { t.norm.as_str() }))
        .collect();
    let vocab = Vocabulary::build(forms.iter().copied(), a.min_count);
    let chars = a.char_cnn.then(|| Vocabulary::build_chars(forms.iter().copied(), 1));
    let mut rng = RngStream::new(a.seed);
    let mut lm = LanguageModel::<f64>::new(cfg, vocab, chars, &mut rng)?;
    let tc = LmTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..Default::default()
    };
    let log = train_lm(&mut lm, &corpus, dev.as_deref(), &tc)?;
    for e in &log {
        match e.dev_perplexity {
            Some(d) => eprintln!("epoch {:>3}  train ppl {:.3}  dev ppl {:.3}", e.epoch, e.train_perplexity, d),
            None => eprintln!("epoch {:>3}  train ppl {:.3}", e.epoch, e.train_perplexity),
        }
    }
    if let Some(p) = &a.log {
        write_jsonl(p, &log)?;
    }
    lm_container(&lm).save(&a.out)
}

fn write_jsonl<S: serde::Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sentences, plus the original lines when the input is CoNLL.
fn read_input(input: &InputArgs) -> Result<(Vec<Sentence>, Option<Vec<Vec<String>>>)> {
    match input.format {
        Format::Plain => Ok((read_plain(&input.input)?, None)),
        Format::Conll => {
            let f = fs::File::open(&input.input).map_err(|e| Error::io(&input.input, e))?;
            let mut sentences = Vec::new();
            let mut lines = Vec::new();
            let mut cur: Vec<String> = Vec::new();
            let mut flush = |cur: &mut Vec<String>| -> Result<()> {
                if !cur.is_empty() {
                    let toks = cur.iter().map(|l| Token::new(l.split_whitespace().next().unwrap_or(""))).collect();
                    sentences.push(Sentence::new(toks, None)?);
                    lines.push(std::mem::take(cur));
                }
                Ok(())
            };
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&input.input, e))?;
                let t = line.trim_end();
                if t.is_empty() || t.starts_with("-DOCSTART-") {
                    flush(&mut cur)?;
                } else {
                    cur.push(t.to_string());
                }
            }
            flush(&mut cur)?;
            Ok((sentences, Some(lines)))
        }
    }
}

/// LM embeddings matching the tagger's expected width.
fn lm_for(model: &TaggerModel, lm: &LmArgs, sentences: &[Sentence]) -> Result<Option<Vec<Tensor<f64>>>> {
    if !model.config.mode.uses_lm() {
        return Ok(None);
    }
    let embedder: LmEmbedder = load_embedder(lm.lm_forward.as_deref(), lm.lm_backward.as_deref())?.ok_or_else(|| {
        Error::Usage(format!("model uses mode {} and needs --lm-forward/--lm-backward", model.config.mode))
    })?;
    let sel = embedder.default_selection();
    if embedder.dim(sel) != model.config.lm_dim {
        return Err(Error::Config(format!(
            "language models give {}-dimensional embeddings, model expects {}",
            embedder.dim(sel),
            model.config.lm_dim
        )));
    }
    let mut cache = EmbeddingCache::for_embedder(&embedder);
    embedder
        .extract_all(sentences, &mut cache)?
        .iter()
        .map(|s| sel.pick(s))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn tag_train(path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(path)?;
    let tagger = cfg.model.resolve()?;
    let task = prepare_task(&cfg, &tagger)?;
    let features = prepare_features::<f64>(&cfg, &task)?;
    let variant = main_variant(&tagger, features.as_ref())?;
    let data = VariantData::build(&task, features.as_ref(), &variant, cfg.data.subsample_seed)?;
    create_dir(&cfg.output_dir)?;
    let runs = multi_seed(&cfg.seeds, |seed| {
        let (result, model) = run_variant_seed(&task, &data, &variant, &cfg.training, seed)?;
        tagger_container(&model).save(&cfg.output_dir.join(format!("model-seed{seed}.taglm")))?;
        Ok(result)
    })?;
    write_jsonl(&cfg.output_dir.join("runs.jsonl"), &runs)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&cfg.output_dir, e))?;
    print!("{}", runs_table(&runs));
    Ok(())
}

/// One row per seed, then the aggregate.
fn runs_table(runs: &[RunResult]) -> String {
    let mut rows: Vec<ReportRow> = runs
        .iter()
        .map(|r| ReportRow {
            name: format!("seed {}", r.seed),
            mean: r.headline_f1(),
            std: 0.0,
            runs: 1,
        })
        .collect();
    let f1: Vec<f64> = runs.iter().map(RunResult::headline_f1).collect();
    let (mean, std) = summarize(&f1);
    rows.push(ReportRow {
        name: "mean".into(),
        mean,
        std,
        runs: f1.len(),
    });
    report(&rows, None)
}

fn ablate(kind: AblationKind, path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(path)?;
    let tagger = cfg.model.resolve()?;
    let task = prepare_task(&cfg, &tagger)?;
    let features = prepare_features::<f64>(&cfg, &task)?
        .ok_or_else(|| Error::Config(format!("ablation {kind} needs a language model")))?;
    let variants = ablation_variants(kind, &tagger, &task, &features, cfg.data.subsample_fraction)?;
    let cmp = Comparison::run(&task, Some(&features), variants, &cfg.training, &cfg.seeds, cfg.data.subsample_seed)?;
    create_dir(&cfg.output_dir)?;
    let records: Vec<serde_json::Value> = cmp
        .variants
        .iter()
        .zip(&cmp.runs)
        .flat_map(|(v, runs)| runs.iter().map(move |r| serde_json::json!({ "config": v.name, "run": r })))
        .collect();
    write_jsonl(&cfg.output_dir.join(format!("ablation-{kind}.jsonl")), &records)?;
    print!("{}", cmp.table());
    Ok(())
}

fn write_sentences(path: &Path, sentences: &[Sentence], tagged: bool) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        if tagged {
            let tags = s.tags().unwrap_or_default();
            for (t, tag) in s.tokens.iter().zip(tags) {
                text.push_str(&format!("{} _ _ {tag}\n", t.raw));
            }
            text.push('\n');
        } else {
            text.push_str(&s.raws().collect::<Vec<_>>().join(" "));
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(what: SynthCommand) -> Result<()> {
    match what {
        SynthCommand::Chain { vocab, branching, end_prob, sentences, seed, out } => {
            let mut rng = RngStream::new(seed);
            let chain = MarkovChain::random(vocab, branching, end_prob, &mut rng)?;
            write_sentences(&out, &chain.sample_corpus(sentences, &mut rng), false)?;
            eprintln!("entropy-rate perplexity {:.4}", chain.entropy_rate().exp());
            Ok(())
        }
        SynthCommand::Grammar { train, dev, unlabeled, cues, seed, out } => {
            create_dir(&out)?;
            let mut rng = RngStream::new(seed);
            let task = GrammarTask::new(
                GrammarTaskConfig {
                    cues_per_grammar: cues,
                    ..Default::default()
                },
                &mut rng,
            )?;
            write_sentences(&out.join("train.txt"), &task.labeled(train, &mut rng), true)?;
            write_sentences(&out.join("dev.txt"), &task.labeled(dev, &mut rng), true)?;
            write_sentences(&out.join("unlabeled.txt"), &task.unlabeled(unlabeled, &mut rng), false)?;
            Ok(())
        }
    }
}
