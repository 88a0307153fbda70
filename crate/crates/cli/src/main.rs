//! `deid`: generate synthetic notes, harmonize labels, train and apply
//! taggers, and score them.
//!
//! ```sh
//! deid --config spec.toml generate --out notes.jsonl
//! deid harmonize --input notes.jsonl --output clean.jsonl --report changes.csv
//! deid --config plan.toml train --checkpoint model.ckpt --log stages.tsv
//! deid predict --checkpoint model.ckpt --input test.jsonl --output pred.jsonl
//! deid evaluate --gold test.jsonl --pred pred.jsonl --out metrics.csv
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use deid_core::checkpoint;
use deid_core::corpus::{
    assign_domain_ids, generate_synthetic, harmonize_corpus, load_corpus, save_corpus, HarmonizationChange,
    HarmonizationRules, LabelSet, SyntheticSpec,
};
use deid_core::evaluation::{approx_randomization, curve_csv, evaluate_documents, learning_curve, CurveStart};
use deid_core::heads::HeadConfig;
use deid_core::model::Vocabularies;
use deid_core::numerics::TrainingConfig;
use deid_core::training::{apply_overrides, run_plan, EpochLog, PlanFile};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "deid", version, about = "Clinical note de-identification experiments")]
struct Cli {
    /// Seed for every random choice. Overrides any seed in the config file
    /// [default: the config file's seed, else 42]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel evaluation
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// TOML input of the command: synthetic spec, harmonization rules,
    /// training plan or learning-curve settings
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set config.max_epochs=5`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic annotated corpus
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Map source labels onto the shared PHI types
    Harmonize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// CSV listing every dropped or modified annotation
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a training plan
    Train {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tab-separated per-epoch log
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Tag a corpus; gold annotations are replaced by predictions
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Entity-level precision, recall and F1
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Metrics CSV
        #[arg(long)]
        out: Option<PathBuf>,
        /// Human-readable table (also printed to stdout)
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Approximate randomization test between two systems
    Significance {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred_a: PathBuf,
        #[arg(long)]
        pred_b: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        shuffles: usize,
        /// JSON result (also printed to stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// F1 against growing in-domain training sets
    LearningCurve {
        /// Model to fine-tune; adds a `fine_tuned` curve next to the baseline
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Documents to sample training sets from
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        increments: Vec<usize>,
        /// Curve seeds [default: --seed]
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Baseline model settings for `learning-curve`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveSettings {
    #[serde(default)]
    head: HeadConfig,
    #[serde(default)]
    config: TrainingConfig,
    labels: Option<Vec<String>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            eprint!("error[usage]: {}", text.strip_prefix("error: ").unwrap_or(&text));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEID_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<deid_core::Error>() {
                Some(c) => eprintln!("error[{}]: {c}", c.kind()),
                None => eprintln!("error[cli]: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if !cli.overrides.is_empty() && cli.config.is_none() && !matches!(cli.command, Command::LearningCurve { .. }) {
        bail!("--set needs a --config file to apply to");
    }
    match &cli.command {
        Command::Generate { out } => generate(&cli, out),
        Command::Harmonize { input, output, report } => harmonize(&cli, input, output, report.as_deref()),
        Command::Train { checkpoint, log } => train(&cli, checkpoint, log.as_deref()),
        Command::Predict { checkpoint, input, output } => predict(checkpoint, input, output),
        Command::Evaluate { gold, pred, out, table } => evaluate(gold, pred, out.as_deref(), table.as_deref()),
        Command::Significance { gold, pred_a, pred_b, shuffles, out } => {
            significance(&cli, gold, pred_a, pred_b, *shuffles, out.as_deref())
        }
        Command::LearningCurve { checkpoint, pool, test, increments, seeds, out } => {
            curve(&cli, checkpoint.as_deref(), pool, test, increments, seeds, out)
        }
    }
}

/// The `--config` file with `--set` overrides applied, or `None`.
fn config_value(cli: &Cli) -> anyhow::Result<Option<toml::Value>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: toml::Value =
        toml::from_str(&text).map_err(|e| deid_core::Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    apply_overrides(&mut value, &cli.overrides)?;
    Ok(Some(value))
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn generate(cli: &Cli, out: &Path) -> anyhow::Result<()> {
    let value = config_value(cli)?.ok_or_else(|| anyhow!("generate needs --config <spec.toml>"))?;
    let text = toml::to_string(&value)?;
    let mut spec = SyntheticSpec::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let docs = generate_synthetic(&spec)?;
    save_corpus(&docs, out)?;
    log::info!("wrote {} documents to {}", docs.len(), out.display());
    Ok(())
}

fn harmonize(cli: &Cli, input: &Path, output: &Path, report: Option<&Path>) -> anyhow::Result<()> {
    let rules = match config_value(cli)? {
        Some(value) => HarmonizationRules::from_toml(&toml::to_string(&value)?)?,
        None => HarmonizationRules::default(),
    };
    let docs = load_corpus(input)?;
    let (out, changes) = harmonize_corpus(&docs, &rules)?;
    save_corpus(&out, output)?;
    if let Some(path) = report {
        write(path, &change_report(&changes)?)?;
    }
    log::info!("harmonized {} documents, {} annotations changed", out.len(), changes.len());
    Ok(())
}

fn change_report(changes: &[HarmonizationChange]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["doc_id", "start", "end", "original_type", "action", "reason", "result"])?;
    for c in changes {
        let action = serde_json::to_value(c.action)?;
        let result: Vec<String> = c.result.iter().map(|a| format!("{}-{}:{}", a.start, a.end, a.phi_type)).collect();
        w.write_record([
            c.doc_id.clone(),
            c.start.to_string(),
            c.end.to_string(),
            c.original_type.clone(),
            action.as_str().unwrap_or_default().to_string(),
            c.reason.clone(),
            result.join(";"),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn train(cli: &Cli, checkpoint_path: &Path, log_path: Option<&Path>) -> anyhow::Result<()> {
    let path = cli.config.as_deref().ok_or_else(|| anyhow!("train needs --config <plan.toml>"))?;
    let mut file = PlanFile::load(path, &cli.overrides)?;
    if let Some(seed) = cli.seed {
        file.seed = Some(seed);
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let plan = file.resolve(base)?;
    plan.validate()?;
    let out = run_plan(&plan)?;
    checkpoint::save(&out.tagger, checkpoint_path)?;
    if let Some(p) = log_path {
        let mut text = String::from(EpochLog::HEADER);
        text.push('\n');
        for entry in &out.log {
            text.push_str(&entry.line());
            text.push('\n');
        }
        write(p, &text)?;
    }
    for r in &out.tagger.history {
        log::info!("stage {} [{}]: best dev F1 {:.4} at epoch {}", r.stage, r.corpora.join(", "), r.best_dev_f1, r.best_epoch);
    }
    Ok(())
}

fn predict(checkpoint_path: &Path, input: &Path, output: &Path) -> anyhow::Result<()> {
    let tagger = checkpoint::load(checkpoint_path)?;
    let docs = load_corpus(input)?;
    let preds = tagger.predict_documents(&docs)?;
    save_corpus(&preds, output)?;
    log::info!("tagged {} documents", preds.len());
    Ok(())
}

fn evaluate(gold: &Path, pred: &Path, out: Option<&Path>, table: Option<&Path>) -> anyhow::Result<()> {
    let report = evaluate_documents(&load_corpus(gold)?, &load_corpus(pred)?)?;
    if let Some(p) = out {
        write(p, &report.to_csv())?;
    }
    let text = report.to_table();
    if let Some(p) = table {
        write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn significance(cli: &Cli, gold: &Path, a: &Path, b: &Path, shuffles: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let result = approx_randomization(&load_corpus(gold)?, &load_corpus(a)?, &load_corpus(b)?, shuffles, seed, true)?;
    let json = serde_json::to_string_pretty(&result)? + "\n";
    if let Some(p) = out {
        write(p, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn curve(
    cli: &Cli,
    checkpoint_path: Option<&Path>,
    pool: &Path,
    test: &Path,
    increments: &[usize],
    seeds: &[u64],
    out: &Path,
) -> anyhow::Result<()> {
    let pretrained = checkpoint_path.map(checkpoint::load).transpose()?;
    let mut pool = load_corpus(pool)?;
    let test = load_corpus(test)?;
    let domains = assign_domain_ids(&mut pool);
    let seeds = if seeds.is_empty() { vec![cli.seed.unwrap_or(DEFAULT_SEED)] } else { seeds.to_vec() };

    let settings: CurveSettings = match config_value(cli)? {
        Some(v) => v.try_into().map_err(|e: toml::de::Error| deid_core::Error::InvalidConfig(e.to_string()))?,
        None if !cli.overrides.is_empty() => bail!("--set needs a --config file to apply to"),
        None => match &pretrained {
            Some(t) => CurveSettings {
                head: HeadConfig::Plain,
                config: t.config.clone(),
                labels: Some(t.labels.phi_types().to_vec()),
            },
            None => CurveSettings::default(),
        },
    };
    let baseline = CurveStart::Scratch {
        config: settings.config,
        head: settings.head,
        labels: settings.labels.map_or_else(LabelSet::harmonized, LabelSet::new),
        vocab: Vocabularies::build(&pool),
        domains,
    };
    let mut points = learning_curve(&baseline, &pool, &test, increments, &seeds)?;
    if let Some(t) = &pretrained {
        points.extend(learning_curve(&CurveStart::FineTune(t), &pool, &test, increments, &seeds)?);
    }
    write(out, &curve_csv(&points))?;
    Ok(())
}
