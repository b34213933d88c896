use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use r2kg_core::server::{read_transcript, render_transcript};
use r2kg_core::{GraphFormat, KnowledgeGraph};
use r2kg_harness::report::{self, render_stats};
use r2kg_harness::runner::{transcript_file_name, ResultRecord, RESULTS_FILE};
use r2kg_harness::{read_jsonl, run_experiment, Manifest};

/// Dual-agent knowledge-graph reasoning experiments.
#[derive(Parser)]
#[command(name = "r2kg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a graph dump and print its size, or query it.
    LoadKg {
        path: PathBuf,
        /// triple-tsv or quintuple-tsv
        #[arg(long, default_value = "triple-tsv")]
        format: GraphFormat,
        /// List the relations of this entity.
        #[arg(long)]
        entity: Option<String>,
        /// With --entity: print the facts along these relations (repeatable).
        #[arg(long = "relation")]
        relations: Vec<String>,
    },
    /// Execute (or resume) the experiment described by a manifest.
    Run { manifest: PathBuf },
    /// Compute metrics for a run directory; exits 1 when a gate fails.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Re-render a stored transcript.
    Replay {
        /// Transcript file, or a run directory together with --id.
        path: PathBuf,
        #[arg(long)]
        id: Option<String>,
    },
    /// Mean Operator and Supervisor calls per sample for a run directory.
    Stats {
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::LoadKg { path, format, entity, relations } => {
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let graph = KnowledgeGraph::load(BufReader::new(file), format)
                .with_context(|| format!("loading {}", path.display()))?;
            match entity {
                None => {
                    if !relations.is_empty() {
                        bail!("--relation needs --entity");
                    }
                    println!(
                        "{} facts, {} entities, {} relations",
                        graph.len(),
                        graph.entity_count(),
                        graph.relation_count()
                    );
                }
                Some(e) if relations.is_empty() => {
                    for r in graph.get_relations(&e) {
                        println!("{r}");
                    }
                }
                Some(e) => {
                    for fact in graph.explore(&e, &relations)? {
                        println!("{fact}");
                    }
                }
            }
        }
        Command::Run { manifest } => {
            let manifest = Manifest::load(&manifest)?;
            let summary = run_experiment(&manifest)?;
            for (line, message) in &summary.bad_lines {
                eprintln!("warning: dataset line {line}: {message}");
            }
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} samples: {} run, {} already recorded; {} operator and {} supervisor calls",
                summary.samples, summary.executed, summary.resumed, summary.operator.calls, summary.supervisor.calls
            );
            print!("{}", std::fs::read_to_string(summary.run_dir.join(report::REPORT_TXT))?);
        }
        Command::Report { run_dir, json } => {
            let (report, _) = report::write_outputs(&run_dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
            if !report.gates_passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Replay { path, id } => {
            let file = match id {
                Some(id) => {
                    let results: Vec<ResultRecord> = read_jsonl(&path.join(RESULTS_FILE))
                        .with_context(|| format!("reading results in {}", path.display()))?;
                    let rel = results
                        .into_iter()
                        .find(|r| r.id == id)
                        .map(|r| r.transcript_path)
                        .unwrap_or_else(|| transcript_file_name(&id));
                    path.join(rel)
                }
                None => path,
            };
            let reader = BufReader::new(File::open(&file).with_context(|| format!("opening {}", file.display()))?);
            print!("{}", render_transcript(&read_transcript(reader)?));
        }
        Command::Stats { run_dir, json } => {
            let (_, results) = report::load_run(&run_dir)?;
            let stats = report::call_stats(&results);
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", render_stats(&stats));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
