use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use veracity::corpus::{parse_corpus, synth_corpus, ColumnLayout, Corpus, SynthVocab};
use veracity::model::Variant;
use veracity::pipeline::{clean_corpus, encode_cleaned, evaluate, fit, FitOptions};
use veracity::serve::http::{serve, ServiceState};
use veracity::serve::{Checkpoint, Classifier, ClassifyRequest};
use veracity::train::PROGRESS_HEADER;

#[derive(Debug, Parser)]
#[command(name = "veracity", version, about = "Truthful/deceptive statement classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    Custom,
    Distil,
}

impl From<Arch> for Variant {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Custom => Variant::Custom,
            Arch::Distil => Variant::Distil,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a labelled corpus (70/30 split) and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "custom")]
        arch: Arch,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        accum: Option<usize>,
        #[arg(long = "weight-decay")]
        weight_decay: Option<f32>,
    },
    /// Score a labelled corpus with a checkpoint and write a JSON metrics report.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Classify one statement and print the explanation as JSON.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long = "top-k", default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        attention: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write a seeded synthetic corpus as CSV.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let corpus = parse_corpus(BufReader::new(file), &ColumnLayout::default())
        .with_context(|| format!("cannot read corpus {}", path.display()))?;
    corpus.validate().with_context(|| format!("invalid corpus {}", path.display()))?;
    Ok(corpus)
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            corpus,
            arch,
            out,
            seed,
            epochs,
            lr,
            batch,
            accum,
            weight_decay,
        } => {
            let corpus = read_corpus(&corpus)?;
            let mut options = FitOptions::new(arch.into(), seed);
            let t = &mut options.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.batch_size = batch.unwrap_or(t.batch_size);
            t.accumulation_steps = accum.unwrap_or(t.accumulation_steps);
            t.weight_decay = weight_decay.unwrap_or(t.weight_decay);
            options.train.validate()?;
            println!("{PROGRESS_HEADER}");
            let fitted = fit(&corpus, &options, |stats| println!("{stats}"))?;
            fitted
                .checkpoint
                .save(&out)
                .with_context(|| format!("cannot write checkpoint {}", out.display()))?;
            let r = &fitted.report;
            println!(
                "trained on {} statements, held out {}: accuracy {:.4}, precision {:.4}, recall {:.4}, f1 {:.4}, roc_auc {:.4}, ap {:.4}",
                fitted.train_size, fitted.test_size, r.accuracy, r.precision, r.recall, r.f1, r.roc_auc, r.average_precision
            );
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { corpus, ckpt, report } => {
            let corpus = read_corpus(&corpus)?;
            let checkpoint = load(&ckpt)?;
            let cleaned = clean_corpus(&corpus, &checkpoint.cleaning)?;
            let examples = encode_cleaned(&cleaned, &checkpoint.vocab, checkpoint.model.config().max_len)?;
            let metrics = evaluate(&checkpoint.model, &examples)?;
            let file = File::create(&report).with_context(|| format!("cannot create {}", report.display()))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, &metrics)?;
            writeln!(w)?;
            w.flush()?;
            println!(
                "{} statements: accuracy {:.4}, f1 {:.4}, roc_auc {:.4}; report written to {}",
                examples.len(),
                metrics.accuracy,
                metrics.f1,
                metrics.roc_auc,
                report.display()
            );
        }
        Command::Explain {
            ckpt,
            text,
            top_k,
            attention,
        } => {
            let classifier = Classifier::new(load(&ckpt)?);
            let response = classifier.classify(&ClassifyRequest {
                text,
                top_k,
                include_attention: attention,
            })?;
            println!("{}", serde_json::to_string_pretty(&response)?);
        }
        Command::Serve { ckpt, addr } => {
            let state = ServiceState::with_classifier(Classifier::new(load(&ckpt)?));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("cannot bind {addr}"))?;
                println!("listening on http://{}", listener.local_addr()?);
                serve(listener, state).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::Synth { n, seed, out } => {
            let corpus = synth_corpus(n, &SynthVocab::default(), seed)?;
            let file = File::create(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let mut w = BufWriter::new(file);
            corpus.write_csv(&mut w)?;
            w.flush()?;
            println!("{} statements written to {}", corpus.len(), out.display());
        }
    }
    Ok(())
}

/// 2 when the root cause is the filesystem or network, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|cause| {
        cause.is::<std::io::Error>() || cause.downcast_ref::<veracity::Error>().is_some_and(veracity::Error::is_io)
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
