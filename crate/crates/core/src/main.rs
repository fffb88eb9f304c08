use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fewsum::baselines::Baseline;
use fewsum::config::{Preset, RunConfig};
use fewsum::corpus::{load_reviews, write_jsonl, Split};
use fewsum::error::{Error, Result};
use fewsum::evaluation::{cross_domain_report, cross_domain_table, reports_table};
use fewsum::pipeline::{self, Run, Step, System};

#[derive(Parser, Debug)]
#[command(name = "fewsum", version, about = "Few-shot opinion summarization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config; keys it omits come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (FEWSUM_RUN_DIR takes precedence).
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Bit-exact runs. Ops are single-threaded already, so this only gets
    /// recorded in the manifest.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Review JSONL to use instead of the synthetic corpus.
    #[arg(long, global = true, requires = "annotated")]
    reviews: Option<PathBuf>,
    /// Annotated summaries matching --reviews.
    #[arg(long, global = true, requires = "reviews")]
    annotated: Option<PathBuf>,
    /// Split file for the annotated entries.
    #[arg(long, global = true)]
    splits: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter reviews and cut them into groups.
    Preprocess {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn the subword vocabulary.
    TrainBpe {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    PretrainLm,
    TrainLoo,
    Novelty,
    PluginInit,
    PluginFinetune,
    JointFinetune,
    UslFinetune,
    Mtl,
    /// Decode summaries for one split.
    Summarize {
        #[arg(long, default_value = "fewsum")]
        system: System,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    Baseline {
        #[arg(value_parser = ["lexrank", "clustroid", "random", "lead"])]
        kind: String,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// ROUGE of system outputs already in the run directory.
    Evaluate(Outputs),
    /// Point of view and length of system outputs.
    AnalyzeText(Outputs),
    /// Adapt on other categories only and score each target category.
    CrossDomain {
        /// Target categories (all when omitted).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: u64,
    },
    /// Every stage, summaries, baselines and reports.
    Pipeline {
        /// Also train and score the unconditioned variants.
        #[arg(long)]
        variants: bool,
        #[arg(long)]
        mtl: bool,
    },
    /// Print the normalized config.
    ValidateConfig,
}

#[derive(Args, Debug)]
struct Outputs {
    /// Output names (every output present for the split when omitted).
    #[arg(long, value_delimiter = ',')]
    systems: Vec<String>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split '{s}'"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p, g.preset)?,
        None => RunConfig::preset(g.preset),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_run(g: &Global, cfg: RunConfig) -> Result<Run> {
    let dir = std::env::var_os("FEWSUM_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| g.run_dir.clone());
    let mut run = Run::open(&dir, cfg, g.deterministic)?;
    run.sources.reviews = g.reviews.clone();
    run.sources.annotated = g.annotated.clone();
    run.sources.splits = g.splits.clone();
    Ok(run)
}

fn train(run: &mut Run, step: Step) -> Result<()> {
    match run.train(step)? {
        Some(r) => println!("{}: {} steps, loss {:.4} -> {:.4}", r.stage, r.steps, r.initial_loss, r.final_loss),
        None => println!("{}: up to date", step.name()),
    }
    Ok(())
}

/// Names with an output file for `split`, in a stable order.
fn present_outputs(run: &Run, split: Split) -> Vec<String> {
    let suffix = format!(".{}.jsonl", split.as_str());
    let mut names: Vec<String> = std::fs::read_dir(run.path("outputs"))
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(&suffix).map(str::to_string))
        .collect();
    names.sort();
    names
}

fn output_names(run: &Run, o: &Outputs) -> Result<Vec<String>> {
    let names = if o.systems.is_empty() { present_outputs(run, o.split) } else { o.systems.clone() };
    if names.is_empty() {
        return Err(Error::Empty(format!("no outputs for split {}", o.split.as_str())));
    }
    Ok(names)
}

fn standalone_reviews(input: &Path) -> Result<Vec<fewsum::corpus::Review>> {
    let reviews = load_reviews(input)?;
    if reviews.is_empty() {
        return Err(Error::Empty(format!("{}: no reviews", input.display())));
    }
    Ok(reviews)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Command::ValidateConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    // Both file-to-file forms skip the run directory entirely.
    match &cli.command {
        Command::Preprocess { input: Some(input), out } => {
            let groups = pipeline::preprocess(&standalone_reviews(input)?, &cfg)?;
            let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_jsonl(&dir.join("groups.jsonl"), &groups)?;
            println!("{} groups written to {}", groups.len(), dir.join("groups.jsonl").display());
            return Ok(());
        }
        Command::TrainBpe { input: Some(input), out } => {
            let bpe = pipeline::train_bpe(&standalone_reviews(input)?, cfg.model.vocab_size)?;
            let path = out.clone().unwrap_or_else(|| PathBuf::from("bpe.txt"));
            bpe.save(&path)?;
            println!("vocabulary of {} written to {}", bpe.vocab_size(), path.display());
            return Ok(());
        }
        _ => {}
    }
    let mut run = open_run(&cli.global, cfg)?;
    match cli.command {
        Command::Preprocess { .. } => {
            run.prepare_data()?;
            println!("groups in {}", run.path(pipeline::DATA_GROUPS).display());
        }
        Command::TrainBpe { .. } => {
            run.prepare_bpe()?;
            println!("vocabulary in {}", run.path(pipeline::DATA_BPE).display());
        }
        Command::PretrainLm => train(&mut run, Step::PretrainLm)?,
        Command::TrainLoo => train(&mut run, Step::TrainLoo)?,
        Command::Novelty => train(&mut run, Step::Novelty)?,
        Command::PluginInit => train(&mut run, Step::PluginInit)?,
        Command::PluginFinetune => train(&mut run, Step::PluginFinetune)?,
        Command::JointFinetune => train(&mut run, Step::JointFinetune)?,
        Command::UslFinetune => train(&mut run, Step::UslFinetune)?,
        Command::Mtl => train(&mut run, Step::Mtl)?,
        Command::Summarize { system, split } => {
            let recs = run.summarize(system, split)?;
            println!("{} summaries in {}", recs.len(), run.path(&Run::output_rel(system.name(), split)).display());
        }
        Command::Baseline { kind, split } => {
            let b: Baseline = kind.parse()?;
            let recs = run.baseline(b, split)?;
            println!("{} summaries in {}", recs.len(), run.path(&Run::output_rel(b.name(), split)).display());
        }
        Command::Evaluate(o) => {
            let names = output_names(&run, &o)?;
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            print!("{}", reports_table(&run.evaluate(&refs, o.split)?));
        }
        Command::AnalyzeText(o) => {
            let names = output_names(&run, &o)?;
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let rows = run.analyze_text(&refs, o.split)?;
            print!("{}", fewsum::evaluation::characteristics_table(&rows));
        }
        Command::CrossDomain { targets, repeats } => {
            let targets = if targets.is_empty() {
                let cats: BTreeSet<String> =
                    run.prepared()?.annotated.entries.iter().map(|e| e.category.clone()).collect();
                cats.into_iter().collect()
            } else {
                targets
            };
            let mut scores = BTreeMap::new();
            for t in &targets {
                let mut v = Vec::new();
                for r in 0..repeats {
                    v.push(run.cross_domain(t, run.cfg.seed.wrapping_add(r))?);
                }
                scores.insert(t.clone(), v);
            }
            print!("{}", cross_domain_table(&cross_domain_report(&scores)?));
        }
        Command::Pipeline { variants, mtl } => {
            let res = run.pipeline(variants, mtl)?;
            print!("{}", reports_table(&res.reports));
        }
        Command::ValidateConfig => unreachable!(),
    }
    Ok(())
}
