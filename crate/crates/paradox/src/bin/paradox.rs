//! Command-line front end.
//!
//! Exit codes: 0 success, 1 finished with per-query failures, 2 stage
//! failure, 3 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paradox::config::{load_config, AttackKind, ExperimentConfig, Overrides, RetrieverKind};
use paradox::error::Error;
use paradox::orchestrator::{cmd_attack, cmd_report, cmd_run, cmd_stats};
use paradox::rag::DefenseKind;

#[derive(Parser)]
#[command(name = "paradox", version, about = "RAG corpus-poisoning attack and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Craft poison documents for every query and store them under out_dir.
    Attack(RunArgs),
    /// Evaluate the configured conditions end to end and write the report.
    Run(RunArgs),
    /// Paired t-tests between two runs' report.json files.
    Stats {
        /// First report (its differences are taken minus the second's).
        report_a: PathBuf,
        report_b: PathBuf,
    },
    /// Render one or more report.json files as text, optionally merged CSV.
    Report {
        /// report.json files to render.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write every condition row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory override.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Attack override: none, paradox, or prepend.
    #[arg(long, value_parser = parse_attack)]
    attack: Option<AttackKind>,
    /// Retriever override: bm25 or dense.
    #[arg(long, value_parser = parse_retriever)]
    retriever: Option<RetrieverKind>,
    /// Retrieval depth override.
    #[arg(long)]
    k: Option<usize>,
    /// Defense override: none, rerank, or confidence.
    #[arg(long, value_parser = parse_defense)]
    defense: Option<DefenseKind>,
    /// Paraphrase-mode override.
    #[arg(long)]
    paraphrase: Option<bool>,
}

fn parse_attack(s: &str) -> Result<AttackKind, String> {
    match s {
        "none" => Ok(AttackKind::None),
        "paradox" => Ok(AttackKind::Paradox),
        "prepend" => Ok(AttackKind::Prepend),
        other => Err(format!("unknown attack {other:?} (expected none, paradox, or prepend)")),
    }
}

fn parse_retriever(s: &str) -> Result<RetrieverKind, String> {
    match s {
        "bm25" => Ok(RetrieverKind::Bm25),
        "dense" => Ok(RetrieverKind::Dense),
        other => Err(format!("unknown retriever {other:?} (expected bm25 or dense)")),
    }
}

fn parse_defense(s: &str) -> Result<DefenseKind, String> {
    match s {
        "none" => Ok(DefenseKind::None),
        "rerank" => Ok(DefenseKind::Rerank),
        "confidence" => Ok(DefenseKind::Confidence),
        other => Err(format!(
            "unknown defense {other:?} (expected none, rerank, or confidence)"
        )),
    }
}

impl RunArgs {
    fn resolve(&self) -> paradox::Result<ExperimentConfig> {
        let mut config = load_config(&self.config)?;
        config.apply_overrides(&Overrides {
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            attack: self.attack,
            retriever: self.retriever,
            k: self.k,
            defense: self.defense,
            paraphrase: self.paraphrase,
        });
        Ok(config)
    }
}

const EXIT_OK: u8 = 0;
const EXIT_PARTIAL: u8 = 1;
const EXIT_STAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn run(cli: Cli) -> u8 {
    match cli.command {
        Command::Attack(args) => {
            let config = match args.resolve() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match cmd_attack(&config) {
                Ok(summary) => {
                    println!(
                        "attack: {} queries, {} crafted, {} reused, {} failed",
                        summary.total,
                        summary.crafted,
                        summary.reused,
                        summary.failed.len()
                    );
                    for (id, msg) in &summary.failed {
                        eprintln!("warning: {id}: {msg}");
                    }
                    if summary.failed.is_empty() {
                        EXIT_OK
                    } else {
                        EXIT_PARTIAL
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::Run(args) => {
            let config = match args.resolve() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match cmd_run(&config) {
                Ok(summary) => {
                    if summary.already_complete {
                        println!(
                            "run: already complete for this config; report at {}",
                            summary.report_path.display()
                        );
                        return EXIT_OK;
                    }
                    println!(
                        "run: conditions [{}], {} per-query failures, report at {}",
                        summary.conditions.join(", "),
                        summary.failed.len(),
                        summary.report_path.display()
                    );
                    for (id, msg) in &summary.failed {
                        eprintln!("warning: {id}: {msg}");
                    }
                    match fs_read(&summary.report_path.with_file_name("report.txt")) {
                        Some(text) => print!("{text}"),
                        None => {}
                    }
                    if summary.failed.is_empty() {
                        EXIT_OK
                    } else {
                        EXIT_PARTIAL
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::Stats { report_a, report_b } => match cmd_stats(&report_a, &report_b) {
            Ok(cmp) => {
                match serde_json::to_string_pretty(&cmp) {
                    Ok(body) => println!("{body}"),
                    Err(e) => {
                        eprintln!("error: render stats: {e}");
                        return EXIT_STAGE;
                    }
                }
                EXIT_OK
            }
            Err(e) => fail(&e),
        },
        Command::Report { reports, csv } => match cmd_report(&reports, csv.as_deref()) {
            Ok(text) => {
                print!("{text}");
                EXIT_OK
            }
            Err(e) => fail(&e),
        },
    }
}

fn fail(err: &Error) -> u8 {
    eprintln!("error: {err}");
    exit_for(err)
}

fn fs_read(path: &std::path::Path) -> Option<String> {
    std::fs::read_to_string(path).ok()
}

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
