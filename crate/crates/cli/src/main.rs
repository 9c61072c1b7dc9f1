//! `crnn`: train, evaluate and inspect character-level CRNN classifiers.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crnn::bench::{bench_cells, bench_csv, BenchPlan};
use crnn::cells::CellKind;
use crnn::checkpoint;
use crnn::convert::{brown_dir, newsgroups_dir, qc_files};
use crnn::corpus::{filter, load_tsv, save_tsv, split, stats, synthetic_motifs, synthetic_news, CorpusStats, LabeledCorpus};
use crnn::encoding::{Alphabet, PreprocessOptions};
use crnn::gradcheck::{check_model, GradCheckOptions};
use crnn::knn::{knn_baseline, Representation};
use crnn::metrics::MetricsReport;
use crnn::model::CrnnConfig;
use crnn::train::{default_alpha_grid, evaluate, sweep_alpha, sweep_csv, trace_csv, train};
use crnn::Error;

use run_config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Parser)]
#[command(name = "crnn", version, about = "Character-level CRNN text classifier")]
struct Cli {
    /// Seed for initialization, shuffling and splitting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for checkpoints, traces and reports.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    cell: Option<CellKind>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Size, vocabulary, mean sentence length and class count of TSV corpora.
    Stats {
        #[arg(required = true)]
        corpora: Vec<PathBuf>,
    },
    /// Train on a corpus, write a checkpoint and a loss trace, report test metrics.
    Train {
        corpus: PathBuf,
        /// Held-out TSV; without it the corpus is split.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval { checkpoint: PathBuf, corpus: PathBuf },
    /// Train once per aggregation weight and rank by macro F1.
    Sweep {
        corpus: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Comma-separated weights; defaults to 0.1, 0.2, ..., 0.9.
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
    },
    /// Time training steps of each recurrent cell on the same batches.
    Bench {
        corpus: PathBuf,
        /// Comma-separated cells; defaults to all three.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<CellKind>,
        #[arg(long, default_value_t = 30)]
        bench_steps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Compare model gradients with central finite differences on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 40)]
        max_per_block: usize,
    },
    /// Convert a native corpus layout into label<TAB>text.
    Convert {
        #[arg(value_enum)]
        kind: SourceKind,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long)]
        strip_metadata: bool,
        #[arg(long)]
        remove_stopwords: bool,
    },
    /// Write a labelled synthetic corpus as TSV.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long, short)]
        output: PathBuf,
        /// Records for `motifs`; `news` has a fixed size.
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// k-nearest-neighbour baseline on the same split as training.
    Knn {
        corpus: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value = "bow")]
        representation: Representation,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SourceKind {
    /// Question files with `COARSE:fine text` lines.
    Qc,
    /// Brown corpus directory.
    Brown,
    /// One directory per newsgroup.
    Newsgroups,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Two classes marked by distinct three-letter motifs.
    Motifs,
    /// 55-class stand-in for a short-news corpus.
    News,
}

enum Failure {
    /// Exit 1.
    Check(String),
    /// Exit 2.
    Input(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Failure::Check(e.to_string()),
            Error::Layer { ref source, .. } if matches!(**source, Error::NonFinite { .. }) => Failure::Check(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        rc.apply_text(&text)
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    }
    for pair in &cli.set {
        rc.assign(pair)?;
    }
    if let Some(seed) = cli.seed {
        rc.set("seed", &seed.to_string())?;
    }
    if let Some(cell) = cli.cell {
        rc.model.cell = cell;
    }
    if let Some(alpha) = cli.alpha {
        rc.model.alpha = alpha;
    }
    if let Some(steps) = cli.steps {
        rc.plan.steps = steps;
    }
    rc.validate()?;
    Ok(rc)
}

fn echo(title: &str, kv: &str) {
    println!("# {title}");
    for line in kv.lines() {
        println!("# {line}");
    }
    println!();
}

/// Prints CSV as is, or as a left-aligned table.
fn emit(format: Format, csv: &str) {
    match format {
        Format::Csv => print!("{csv}"),
        Format::Table => {
            let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
            let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
            let widths: Vec<usize> = (0..cols)
                .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
                .collect();
            for r in &rows {
                let line: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
                println!("{}", line.join("  ").trim_end());
            }
        }
    }
}

fn load(path: &Path, rc: &RunConfig) -> CliResult<LabeledCorpus> {
    let corpus = load_tsv(path)?;
    Ok(match rc.filter_options() {
        Some(options) => filter(&corpus, options),
        None => corpus,
    })
}

/// Re-indexes `corpus` onto `labels`; labels outside the index are an input error.
fn remap(corpus: &LabeledCorpus, labels: &[String], what: &str) -> CliResult<LabeledCorpus> {
    let mut out = LabeledCorpus::with_labels(corpus.name.clone(), labels)?;
    for (label, text) in corpus.iter() {
        out.push(label, text)?;
    }
    if out.class_count() != labels.len() {
        return Err(Failure::Input(format!(
            "{} has {} classes but {what} has {}; unseen labels: {}",
            corpus.name,
            corpus.class_count(),
            labels.len(),
            out.labels()[labels.len()..].join(", ")
        )));
    }
    Ok(out)
}

fn train_test(corpus_path: &Path, test_path: Option<&Path>, rc: &RunConfig) -> CliResult<(LabeledCorpus, LabeledCorpus)> {
    let corpus = load(corpus_path, rc)?;
    match test_path {
        Some(t) => {
            let test = load(t, rc)?;
            let test = remap(&test, corpus.labels(), "the training corpus")?;
            corpus.require_non_empty()?;
            Ok((corpus, test))
        }
        None => Ok(split(&corpus, &rc.split_plan(corpus.len()))?),
    }
}

fn labels_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".labels");
    PathBuf::from(p)
}

fn write(path: &Path, content: &str) -> CliResult {
    fs::write(path, content).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| Failure::Input(format!("{}: {e}", cli.out_dir.display())))?;
    Ok(&cli.out_dir)
}

fn report_metrics(format: Format, report: &MetricsReport, labels: &[String]) {
    emit(format, &report.to_csv(labels));
}

fn run(cli: &Cli) -> CliResult {
    let rc = resolve(cli)?;
    echo("resolved config", &rc.to_kv());
    match &cli.command {
        Command::Stats { corpora } => {
            let rows = corpora
                .iter()
                .map(|p| Ok(stats(&load(p, &rc)?)?))
                .collect::<CliResult<Vec<CorpusStats>>>()?;
            match cli.format {
                Format::Table => print!("{}", CorpusStats::table(&rows)),
                Format::Csv => {
                    println!("{}", CorpusStats::CSV_HEADER);
                    for r in &rows {
                        println!("{}", r.csv_row());
                    }
                }
            }
        }
        Command::Train { corpus, test } => {
            let (train_set, test_set) = train_test(corpus, test.as_deref(), &rc)?;
            let config = rc.model_for(train_set.class_count())?;
            let dir = out_dir(cli)?;
            write(&dir.join("run.cfg"), &rc.to_kv())?;
            let outcome = train(&config, &train_set, Some(&test_set), &rc.plan)?;
            let ckpt = dir.join("model.ckpt");
            checkpoint::save(&ckpt, &config, &outcome.params)?;
            write(&labels_path(&ckpt), &(train_set.labels().join("\n") + "\n"))?;
            write(&dir.join("trace.csv"), &trace_csv(&outcome.trace))?;
            eprintln!(
                "wrote {}, {} and {}",
                ckpt.display(),
                labels_path(&ckpt).display(),
                dir.join("trace.csv").display()
            );
            let report = outcome.test_metrics.expect("test split given");
            report_metrics(cli.format, &report, train_set.labels());
        }
        Command::Eval { checkpoint: path, corpus } => {
            let (config, params) = checkpoint::load(path)?;
            echo("checkpoint model", &config.to_kv());
            let corpus = load(corpus, &rc)?;
            let lp = labels_path(path);
            let corpus = if lp.exists() {
                let text = fs::read_to_string(&lp).map_err(|e| Failure::Input(format!("{}: {e}", lp.display())))?;
                let labels: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(String::from).collect();
                if labels.len() != config.classes {
                    return Err(Failure::Input(format!(
                        "{} lists {} labels but the checkpoint has {} classes",
                        lp.display(),
                        labels.len(),
                        config.classes
                    )));
                }
                remap(&corpus, &labels, "the checkpoint")?
            } else if corpus.class_count() != config.classes {
                return Err(Failure::Input(format!(
                    "corpus has {} classes but the checkpoint has {}",
                    corpus.class_count(),
                    config.classes
                )));
            } else {
                corpus
            };
            let report = evaluate(&config, &params, &corpus)?;
            report_metrics(cli.format, &report, corpus.labels());
        }
        Command::Sweep { corpus, test, alphas } => {
            let (train_set, test_set) = train_test(corpus, test.as_deref(), &rc)?;
            let config = rc.model_for(train_set.class_count())?;
            let grid = if alphas.is_empty() { default_alpha_grid() } else { alphas.clone() };
            let rows = sweep_alpha(&config, &train_set, &test_set, &grid, &rc.plan)?;
            emit(cli.format, &sweep_csv(&rows));
        }
        Command::Bench {
            corpus,
            cells,
            bench_steps,
            warmup,
        } => {
            let corpus = load(corpus, &rc)?;
            let config = rc.model_for(corpus.class_count())?;
            let cells = if cells.is_empty() { CellKind::ALL.to_vec() } else { cells.clone() };
            let plan = BenchPlan {
                steps: *bench_steps,
                warmup: *warmup,
                batch_size: rc.plan.batch_size,
                seed: rc.model.seed,
            };
            let results = bench_cells(&config, &corpus, &cells, &plan)?;
            emit(cli.format, &bench_csv(&results));
        }
        Command::Gradcheck { tol, max_per_block } => {
            let config = CrnnConfig {
                alpha: rc.model.alpha,
                seed: rc.model.seed,
                ..CrnnConfig::small(3, rc.model.cell)
            };
            echo("gradcheck model", &config.to_kv());
            let params = crnn::model::CrnnParams::init(&config)?;
            let texts = ["what is the capital of peru?", "who wrote hamlet", "how far is the moon, in km"];
            let inputs = texts
                .iter()
                .map(|t| Alphabet::standard().encode(t, config.length))
                .collect::<crnn::Result<Vec<_>>>()?;
            let opts = GradCheckOptions {
                tol: *tol,
                max_per_block: Some(*max_per_block),
                seed: rc.model.seed,
                ..GradCheckOptions::default()
            };
            let report = check_model(&config, &params, &inputs, &[0, 1, 2], &opts)?;
            println!("{report}");
            if !report.passed() {
                return Err(Failure::Check(format!(
                    "max relative error {:.3e} exceeds tolerance {:.3e}",
                    report.max_rel_err(),
                    tol
                )));
            }
            println!("passed: max relative error {:.3e} <= {:.3e}", report.max_rel_err(), tol);
        }
        Command::Convert {
            kind,
            inputs,
            output,
            strip_metadata,
            remove_stopwords,
        } => {
            let one_dir = || -> CliResult<&Path> {
                match inputs.as_slice() {
                    [d] => Ok(d),
                    _ => Err(Failure::Input("expected exactly one input directory".into())),
                }
            };
            let corpus = match kind {
                SourceKind::Qc => qc_files(inputs)?,
                SourceKind::Brown => brown_dir(one_dir()?)?,
                SourceKind::Newsgroups => newsgroups_dir(
                    one_dir()?,
                    PreprocessOptions {
                        strip_metadata: *strip_metadata,
                        remove_stopwords: *remove_stopwords,
                    },
                )?,
            };
            save_tsv(&corpus, output)?;
            let row = stats(&corpus)?;
            match cli.format {
                Format::Table => print!("{}", CorpusStats::table(&[row])),
                Format::Csv => println!("{}\n{}", CorpusStats::CSV_HEADER, row.csv_row()),
            }
        }
        Command::Synth { kind, output, count } => {
            let corpus = match kind {
                SynthKind::Motifs => synthetic_motifs(*count, rc.model.seed),
                SynthKind::News => synthetic_news(rc.model.seed),
            };
            save_tsv(&corpus, output)?;
            let row = stats(&corpus)?;
            match cli.format {
                Format::Table => print!("{}", CorpusStats::table(&[row])),
                Format::Csv => println!("{}\n{}", CorpusStats::CSV_HEADER, row.csv_row()),
            }
        }
        Command::Knn {
            corpus,
            test,
            k,
            representation,
        } => {
            let (train_set, test_set) = train_test(corpus, test.as_deref(), &rc)?;
            let report = knn_baseline(&train_set, &test_set, *k, *representation)?;
            report_metrics(cli.format, &report, test_set.labels());
        }
    }
    Ok(())
}
