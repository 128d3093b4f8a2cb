use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use coorddelay::archive::{DateWindow, DEFAULT_THRESHOLD};
use coorddelay::extraction::{extract_facts, write_facts_csv};
use coorddelay::networks::build_domain_network;
use coorddelay::vulndb::{load_records, write_records_csv};
use coorddelay_cli::config::read_merges;
use coorddelay_cli::pipeline::{build_networks, ingest_archive, parse_stages};
use coorddelay_cli::tables::{read_facts, read_messages, write_messages, write_participants, MessageRow};
use coorddelay_cli::{run, CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "coorddelay", version, about = "CVE coordination delay analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline (or selected stages) from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of ingest,nvd,extract,networks,metrics,regress,classify.
        #[arg(long)]
        stages: Option<String>,
        /// Overrides the master seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a mailing-list archive into messages.csv and participants.csv.
    Ingest {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value = "2008-02-01")]
        from: NaiveDate,
        #[arg(long, default_value = "2016-12-31")]
        to: NaiveDate,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        delta: f64,
        #[arg(long)]
        merges: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Flatten vulnerability feeds into a records table.
    Nvd {
        #[arg(long, num_args = 1.., required = true)]
        feed: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract CVE ids and domains from a messages table.
    Extract {
        #[arg(long)]
        messages: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the domain network, and the social network when messages are given.
    Networks {
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        messages: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::stage("output", format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::stage("output", format!("{}: {e}", path.display())))
}

fn open(path: &Path, what: &str) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Config(format!("`--{what}` {}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            stages,
            seed,
            out,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let stages = match stages {
                Some(list) => parse_stages(&list)?,
                None => BTreeSet::new(),
            };
            let report = run(&cfg, &stages)?;
            log::info!(
                "done: {} samples, {} skipped items, output in {}",
                report.counts.get("samples").copied().unwrap_or(0),
                report.skipped.len(),
                cfg.out_dir.display()
            );
        }
        Command::Ingest {
            archive,
            from,
            to,
            delta,
            merges,
            out_dir,
        } => {
            let window = DateWindow::new(from, to).map_err(|e| CliError::Config(e.to_string()))?;
            if !(delta > 0.0 && delta <= 1.0) {
                return Err(CliError::Config(format!("`--delta` {delta} is not in (0, 1]")));
            }
            let merges = match merges {
                Some(p) => read_merges(&p)?,
                None => Vec::new(),
            };
            let (report, ids, rows) = ingest_archive(&archive, &window, delta, &merges)?;
            write_messages(&rows, create(&out_dir.join("messages.csv"))?).map_err(|e| CliError::stage("ingest", e))?;
            write_participants(&ids, create(&out_dir.join("participants.csv"))?)
                .map_err(|e| CliError::stage("ingest", e))?;
            log::info!(
                "{} messages, {} participants, {} outside the window, {} malformed",
                rows.len(),
                ids.participants.len(),
                report.outside_window,
                report.malformed
            );
        }
        Command::Nvd { feed, out } => {
            let set = load_records(&feed).map_err(|e| CliError::stage("nvd", e))?;
            write_records_csv(&set, create(&out)?).map_err(|e| CliError::stage("nvd", e))?;
            log::info!("{} records, {} skipped, {} duplicates", set.records.len(), set.skipped, set.duplicates);
        }
        Command::Extract { messages, out } => {
            let rows = read_messages(open(&messages, "messages")?).map_err(|e| CliError::stage("extract", e))?;
            let facts: Vec<_> = rows.iter().map(|r| extract_facts(&r.email)).collect();
            write_facts_csv(&facts, create(&out)?).map_err(|e| CliError::stage("extract", e))?;
        }
        Command::Networks {
            facts,
            messages,
            out_dir,
        } => {
            let facts = read_facts(open(&facts, "facts")?).map_err(|e| CliError::stage("networks", e))?;
            let rows = match &messages {
                Some(p) => read_messages(open(p, "messages")?).map_err(|e| CliError::stage("networks", e))?,
                None => Vec::new(),
            };
            let domains = build_domain_network(facts.iter().map(|f| (&f.cve_ids, &f.domains)));
            domains
                .write_edges_csv("domain", create(&out_dir.join("domain_edges.csv"))?)
                .map_err(|e| CliError::stage("networks", e))?;
            if messages.is_some() {
                // pair each fact row with its message through the key
                let by_key: BTreeMap<&str, &MessageRow> =
                    rows.iter().map(|r| (r.email.message_key.as_str(), r)).collect();
                let (m, f): (Vec<MessageRow>, Vec<_>) = facts
                    .iter()
                    .filter_map(|f| by_key.get(f.message_key.as_str()).map(|r| ((*r).clone(), f.clone())))
                    .unzip();
                let (social, _) = build_networks(&m, &f);
                social
                    .write_edges_csv("participant", create(&out_dir.join("social_edges.csv"))?)
                    .map_err(|e| CliError::stage("networks", e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
