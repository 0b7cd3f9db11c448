//! The `sublm` command line.
//!
//! Every flag with a default shows it in `--help`:
//!
//! ```
//! use clap::CommandFactory;
//! use subword_lm::cli::Cli;
//!
//! let mut cmd = Cli::command();
//! cmd.build();
//! for sub in cmd.get_subcommands_mut() {
//!     let help = sub.render_long_help().to_string();
//!     for arg in sub.get_arguments() {
//!         let Some(long) = arg.get_long() else { continue };
//!         assert!(help.contains(&format!("--{long}")), "{long} missing from help");
//!         for d in arg.get_default_values() {
//!             let shown = format!("[default: {}]", d.to_string_lossy());
//!             assert!(help.contains(&shown), "{long} default missing from help");
//!         }
//!     }
//! }
//! ```

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::corpusio::{encode_corpus, read_sentences, EncodedCorpus, RecordFile, RECORD_MAGIC};
use crate::error::{Error, Result};
use crate::scorer::{
    corpus_perplexity_ar, corpus_pseudo_perplexity, sentence_log_prob_ar, sentence_pseudo_log_prob, EvalReport,
    PSEUDO_BATCH,
};
use crate::subseg::{tokenize, word_counts, MarkingScheme, SegTrainOptions, SegmentationModel, SubwordVocab, UNK};
use crate::trainer::{load_model, train, Checkpoint, LoadedModel, RunConfig, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    /// Continuation pieces carry a leading `+`.
    M,
    /// Both sides of every split carry a `+`.
    Mm,
}

impl From<SchemeArg> for MarkingScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::M => MarkingScheme::LeftMarked,
            SchemeArg::Mm => MarkingScheme::LeftRightMarked,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoreMode {
    /// Chain rule with the recurrent model.
    Ar,
    /// One masked prediction per position with the masked model.
    Pseudo,
}

#[derive(Debug, Parser)]
#[command(name = "sublm", version, about = "Subword language models: segmentation, training and scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a segmentation lexicon on raw text.
    SegTrain {
        /// Training text, one sentence per line; repeatable.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        /// Corpus weight.
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        /// Stop when a pass gains fewer bits than this.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 50)]
        max_passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment and mark raw text with a trained lexicon.
    SegApply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeArg::Mm)]
        scheme: SchemeArg,
    },
    /// Build a subword vocabulary from raw text.
    VocabBuild {
        #[arg(long)]
        model: PathBuf,
        /// Text to collect subwords from; repeatable.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeArg::Mm)]
        scheme: SchemeArg,
    },
    /// Encode raw text into a binary record file of framed id sequences.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeArg::Mm)]
        scheme: SchemeArg,
    },
    /// Train a model from a key=value run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step (the schedule still spans total_steps).
        #[arg(long)]
        stop_at: Option<u64>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Autoregressive perplexity of a recurrent checkpoint.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        /// Raw text or an encoded record file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        resources: Resources,
        /// Write per-sentence scores here as TSV.
        #[arg(long)]
        per_sentence: Option<PathBuf>,
    },
    /// Pseudo-perplexity of a masked checkpoint.
    EvalPseudoPpl {
        #[arg(long)]
        model: PathBuf,
        /// Raw text or an encoded record file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        resources: Resources,
        #[arg(long)]
        per_sentence: Option<PathBuf>,
        /// Masked variants per forward pass.
        #[arg(long, default_value_t = PSEUDO_BATCH)]
        batch: usize,
    },
    /// Score one sentence.
    ScoreSentence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sentence: String,
        #[command(flatten)]
        resources: Resources,
        /// Defaults to the mode that fits the checkpoint.
        #[arg(long, value_enum)]
        mode: Option<ScoreMode>,
    },
}

/// Overrides for the lexicon and vocabulary named in a checkpoint.
#[derive(Debug, clap::Args)]
pub struct Resources {
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

/// Parses `argv` and runs the command, printing results to stdout and
/// errors to stderr. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns what it prints.
pub fn execute(cmd: Command) -> Result<String> {
    let mut out = String::new();
    match cmd {
        Command::SegTrain {
            input,
            alpha,
            epsilon,
            max_passes,
            seed,
            out: path,
        } => {
            let mut sentences = Vec::new();
            for p in &input {
                sentences.extend(read_sentences(p)?.0);
            }
            let counts = word_counts(sentences.iter().map(String::as_str));
            let opts = SegTrainOptions {
                epsilon,
                seed,
                max_passes,
            };
            let report = SegmentationModel::train(&counts, alpha, &opts)?;
            report.model.save(&path)?;
            let _ = writeln!(
                out,
                "words={} units={} cost={} passes={}",
                counts.len(),
                report.model.lexicon().len(),
                report.model.cost(),
                report.cost_history.len() - 1
            );
        }
        Command::SegApply {
            model,
            input,
            out: path,
            scheme,
        } => {
            let seg = SegmentationModel::load(&model)?;
            let mut text = String::new();
            for s in read_sentences(&input)?.0 {
                text.push_str(&tokenize(&seg, &s, scheme.into())?.join(" "));
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Command::VocabBuild {
            model,
            input,
            out: path,
            scheme,
        } => {
            let seg = SegmentationModel::load(&model)?;
            let mut sentences = Vec::new();
            for p in &input {
                sentences.extend(read_sentences(p)?.0);
            }
            let vocab = SubwordVocab::build(sentences.iter().map(String::as_str), &seg, scheme.into())?;
            vocab.save(&path)?;
            let _ = writeln!(out, "vocab_size={}", vocab.len());
        }
        Command::Encode {
            model,
            vocab,
            input,
            out: path,
            scheme,
        } => {
            let seg = SegmentationModel::load(&model)?;
            let vocab = SubwordVocab::load(&vocab, scheme.into())?;
            let corpus = encode_corpus(&read_sentences(&input)?.0, &seg, &vocab)?;
            let file = RecordFile {
                vocab_size: vocab.len() as u32,
                records: corpus.sequences,
            };
            file.write(&path)?;
            let _ = writeln!(out, "sentences={} unk={}", file.records.len(), corpus.unk);
        }
        Command::Train {
            config,
            resume,
            stop_at,
            seed,
        } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run.seed = s;
            }
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train(&run, TrainOptions { resume, stop_at })?;
            if outcome.skipped > 0 {
                let _ = writeln!(out, "skipped={} (longer than max_position)", outcome.skipped);
            }
            for r in outcome.log.iter().filter(|r| r.split == crate::trainer::Split::Valid) {
                let _ = writeln!(out, "{r}");
            }
            let _ = writeln!(
                out,
                "step={} checkpoint={}",
                outcome.checkpoint.step,
                run.out_dir.join(crate::trainer::CHECKPOINT_FILE).display()
            );
        }
        Command::EvalPpl {
            model,
            data,
            resources,
            per_sentence,
        } => {
            let ck = Checkpoint::load(&model)?;
            let (run, loaded) = load_model(&ck)?;
            let LoadedModel::Xl(xl) = loaded else {
                return Err(Error::ModelKindMismatch {
                    expected: "xl",
                    found: loaded.kind().as_str(),
                });
            };
            let corpus = load_eval_data(&data, &run, &resources, xl.config().vocab_size)?;
            finish_report(corpus_perplexity_ar(&xl, &corpus)?, per_sentence.as_deref(), &mut out)?;
        }
        Command::EvalPseudoPpl {
            model,
            data,
            resources,
            per_sentence,
            batch,
        } => {
            if batch == 0 {
                return Err(Error::InvalidArgument("--batch must be positive".into()));
            }
            let ck = Checkpoint::load(&model)?;
            let (run, loaded) = load_model(&ck)?;
            let LoadedModel::Mlm(mlm) = loaded else {
                return Err(Error::ModelKindMismatch {
                    expected: "mlm",
                    found: loaded.kind().as_str(),
                });
            };
            let corpus = load_eval_data(&data, &run, &resources, mlm.config().vocab_size)?;
            finish_report(
                corpus_pseudo_perplexity(&mlm, &corpus, batch)?,
                per_sentence.as_deref(),
                &mut out,
            )?;
        }
        Command::ScoreSentence {
            model,
            sentence,
            resources,
            mode,
        } => {
            let ck = Checkpoint::load(&model)?;
            let (run, loaded) = load_model(&ck)?;
            let (seg, vocab) = load_resources(&run, &resources)?;
            let Some(text) = crate::corpusio::preprocess_line(&sentence) else {
                return Err(Error::InvalidArgument("--sentence is empty after preprocessing".into()));
            };
            let (ids, unk) = crate::corpusio::encode_sentence(&text, &seg, &vocab)?;
            let (lp, n, mode) = match (mode, &loaded) {
                (None | Some(ScoreMode::Ar), LoadedModel::Xl(m)) => {
                    let (lp, n) = sentence_log_prob_ar(m, &ids)?;
                    (lp, n, "ar")
                }
                (None | Some(ScoreMode::Pseudo), LoadedModel::Mlm(m)) => {
                    let (lp, n) = sentence_pseudo_log_prob(m, &ids, PSEUDO_BATCH)?;
                    (lp, n, "pseudo")
                }
                (Some(ScoreMode::Ar), LoadedModel::Mlm(_)) => {
                    return Err(Error::ModelKindMismatch {
                        expected: "xl",
                        found: "mlm",
                    })
                }
                (Some(ScoreMode::Pseudo), LoadedModel::Xl(_)) => {
                    return Err(Error::ModelKindMismatch {
                        expected: "mlm",
                        found: "xl",
                    })
                }
            };
            let tokens = vocab.decode(&ids).join(" ");
            let _ = writeln!(
                out,
                "mode={mode} T={n} logprob={lp} ppl={} unk={unk}\ttokens={tokens}",
                (-lp / n as f64).exp()
            );
        }
    }
    Ok(out)
}

fn load_resources(run: &RunConfig, r: &Resources) -> Result<(SegmentationModel, SubwordVocab)> {
    let lexicon = r.lexicon.as_ref().unwrap_or(&run.lexicon);
    let vocab = r.vocab.as_ref().unwrap_or(&run.vocab);
    let seg = SegmentationModel::load(lexicon)?;
    let vocab = SubwordVocab::load(vocab, run.scheme)?;
    if vocab.len() != run.model.vocab_size() {
        return Err(Error::ConfigMismatch(format!(
            "vocabulary has {} entries, the checkpoint expects {}",
            vocab.len(),
            run.model.vocab_size()
        )));
    }
    Ok((seg, vocab))
}

fn load_eval_data(path: &Path, run: &RunConfig, r: &Resources, vocab_size: usize) -> Result<EncodedCorpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RECORD_MAGIC) {
        let file = RecordFile::from_bytes(&bytes, path)?;
        if file.vocab_size as usize != vocab_size {
            return Err(Error::ConfigMismatch(format!(
                "{} was encoded with {} ids, the checkpoint expects {vocab_size}",
                path.display(),
                file.vocab_size
            )));
        }
        let unk = file.records.iter().flatten().filter(|&&t| t == UNK).count();
        return Ok(EncodedCorpus {
            sequences: file.records,
            unk,
        });
    }
    let (seg, vocab) = load_resources(run, r)?;
    encode_corpus(&read_sentences(path)?.0, &seg, &vocab)
}

fn finish_report(report: EvalReport, per_sentence: Option<&Path>, out: &mut String) -> Result<()> {
    if let Some(p) = per_sentence {
        report.write_tsv(p)?;
    }
    let _ = writeln!(out, "{}", report.summary_line());
    Ok(())
}
