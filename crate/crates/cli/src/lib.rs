//! Subcommand dispatch for the `verbalized` executable.
//!
//! Exit codes: 0 on success, 1 when the input or configuration is invalid,
//! 2 on internal or environment failures.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use verbalized::ablation::{render_ablation, run_ablation, AblationAxis, AblationPlan};
use verbalized::checkpoint::{load_model, save_model};
use verbalized::config::CONFIG_KEYS;
use verbalized::corpus::{load_corpus, load_label_set, write_corpus, write_label_set};
use verbalized::evaluator::{evaluate, render_table};
use verbalized::predictor::{predict_corpus, target_label_set, PredictionRecord, Predictor};
use verbalized::synthetic::{generate, SyntheticSpec};
use verbalized::trainer::{label_inputs, train};
use verbalized::{verbalize, Document, Format, LabelCache, LabelSet, TrainConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CACHE_FILE: &str = "labels.cache";

/// A failure caused by the user's input rather than the environment.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<verbalized::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.is::<Invalid>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    2
}

fn config_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (config file `key = value`, or `--key value`):\n");
    for (key, help) in CONFIG_KEYS {
        s.push_str(&format!("  {key:<width$}  {help}\n"));
    }
    s
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat key = value configuration file"),
    );
    // a subcommand's own flag of the same name takes precedence
    CONFIG_KEYS.iter().fold(cmd, |cmd, (key, help)| {
        if cmd.get_arguments().any(|a| a.get_id() == *key) {
            return cmd;
        }
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(*help)
                .hide(true),
        )
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

pub fn command() -> Command {
    Command::new("verbalized")
        .about("Dual-encoder entity disambiguation with verbalized labels")
        .subcommand_required(true)
        .after_help(config_help())
        .subcommand(
            Command::new("verbalize")
                .about("Render label verbalizations")
                .arg(path_arg("labels", "label-set JSONL").required(true))
                .arg(
                    Arg::new("format")
                        .long("format")
                        .required(true)
                        .value_parser(Format::ALL.map(|f| f.name()))
                        .help("verbalization format"),
                )
                .arg(path_arg("out", "output JSONL").required(true)),
        )
        .subcommand(config_args(
            Command::new("train")
                .about("Train a model")
                .after_help(config_help())
                .arg(path_arg("corpus", "training corpus JSONL").required(true))
                .arg(path_arg("labels", "label-set JSONL").required(true))
                .arg(path_arg("dev", "held-out corpus scored after every epoch"))
                .arg(
                    path_arg("out", "output directory")
                        .value_name("DIR")
                        .required(true),
                ),
        ))
        .subcommand(config_args(
            Command::new("predict")
                .about("Predict a label for every gold mention")
                .after_help(config_help())
                .arg(path_arg("corpus", "corpus JSONL").required(true))
                .arg(path_arg("labels", "label-set JSONL").required(true))
                .arg(path_arg("checkpoint", "model checkpoint").required(true))
                .arg(
                    Arg::new("iterative")
                        .long("iterative")
                        .action(ArgAction::SetTrue)
                        .help("insert confident predictions and re-predict the rest"),
                )
                .arg(
                    Arg::new("restrict-to-targets")
                        .long("restrict-to-targets")
                        .action(ArgAction::SetTrue)
                        .help("search only labels that occur as golds in the corpus"),
                )
                .arg(path_arg("out", "output predictions JSONL").required(true))
                .arg(path_arg("first-pass-out", "first-round predictions JSONL")),
        ))
        .subcommand(
            Command::new("eval")
                .about("Score predictions against gold mentions")
                .arg(path_arg("pred", "predictions JSONL").required(true))
                .arg(path_arg("gold-corpus", "gold corpus JSONL").required(true))
                .arg(path_arg("first-pass", "first-round predictions for change analysis"))
                .arg(path_arg("out", "report JSON")),
        )
        .subcommand(config_args(
            Command::new("ablate")
                .about("Train every variant of one design axis under several seeds")
                .after_help(config_help())
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .required(true)
                        .value_parser(AblationAxis::ALL.map(|a| a.name())),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("1,2,3")
                        .help("comma-separated seeds"),
                )
                .arg(path_arg("corpus", "training corpus JSONL"))
                .arg(path_arg("labels", "label-set JSONL"))
                .arg(path_arg("dev", "held-out corpus JSONL"))
                .arg(
                    Arg::new("synthetic")
                        .long("synthetic")
                        .action(ArgAction::SetTrue)
                        .conflicts_with_all(["corpus", "labels", "dev"])
                        .help("use the generated ambiguity corpus"),
                )
                .arg(path_arg("out", "table JSON")),
        ))
        .subcommand(
            Command::new("synth")
                .about("Write the generated ambiguity corpus")
                .arg(
                    path_arg("out", "output directory")
                        .value_name("DIR")
                        .required(true),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("7"),
                ),
        )
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return exit_code(&e);
    }
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("VERBALIZED_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("VERBALIZED_THREADS must be a positive integer, got '{raw}'")))?;
    // a second call within one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("verbalize", s)) => cmd_verbalize(s),
        Some(("train", s)) => cmd_train(s),
        Some(("predict", s)) => cmd_predict(s),
        Some(("eval", s)) => cmd_eval(s),
        Some(("ablate", s)) => cmd_ablate(s),
        Some(("synth", s)) => cmd_synth(s),
        _ => bail!("no subcommand"),
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn required<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    path(m, name).expect("clap enforces required arguments")
}

/// Starts from `base` (or the file given by `--config`) and applies every
/// config flag on top.
fn resolve_config(m: &ArgMatches, base: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match m.get_one::<String>("config").map(Path::new).or(base) {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for (key, _) in CONFIG_KEYS {
        if let Ok(Some(v)) = m.try_get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_verbalize(m: &ArgMatches) -> Result<()> {
    let labels = load_label_set(required(m, "labels"))?;
    let format: Format = m.get_one::<String>("format").expect("required").parse()?;
    let spec = format.spec();
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        text: String,
        title_span: [usize; 2],
    }
    let rows = labels
        .records()
        .iter()
        .map(|r| {
            let v = verbalize(r, &spec)?;
            Ok(Row {
                id: &r.id,
                text: v.text,
                title_span: [v.title_char_span.0, v.title_char_span.1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(required(m, "out"), &rows)
}

fn fresh_cache(model: &verbalized::Model, labels: &LabelSet, cfg: &TrainConfig) -> Result<LabelCache> {
    let inputs = label_inputs(labels, cfg)?;
    let mut cache = LabelCache::new(
        labels.ids().map(String::from).collect(),
        cfg.dim,
        cfg.pooling,
        cfg.sim_spec(),
    );
    cache.full_refresh(&model.label, &inputs, cfg.label_batch, 0)?;
    Ok(cache)
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m, None)?;
    let corpus = load_corpus(required(m, "corpus"))?;
    let labels = load_label_set(required(m, "labels"))?;
    let dev = path(m, "dev").map(load_corpus).transpose()?;
    let out = required(m, "out");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let outcome = train(&corpus, &labels, &cfg, dev.as_deref())?;
    for row in &outcome.metrics {
        let dev = row.dev_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        eprintln!("epoch {:>3}  loss {:.5}  dev {dev}", row.epoch, row.loss);
    }
    let d = &outcome.diagnostics;
    if d.skipped_unlinkable + d.skipped_no_negatives > 0 {
        eprintln!(
            "skipped {} unlinkable mentions, {} without negatives",
            d.skipped_unlinkable, d.skipped_no_negatives
        );
    }
    save_model(&outcome.model, out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_key_values())
        .with_context(|| format!("writing {}", out.join(CONFIG_FILE).display()))?;
    write_jsonl(&out.join(METRICS_FILE), &outcome.metrics)?;
    fresh_cache(&outcome.model, &labels, &cfg)?.save(out.join(CACHE_FILE))?;
    Ok(())
}

fn cmd_predict(m: &ArgMatches) -> Result<()> {
    let checkpoint = required(m, "checkpoint");
    let beside = checkpoint
        .parent()
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.is_file());
    let cfg = resolve_config(m, beside.as_deref())?;
    let model = load_model(checkpoint)?;
    if model.dim() != cfg.dim || model.vocab() != cfg.vocab || model.mention.window != cfg.window {
        return Err(invalid(format!(
            "checkpoint shape (vocab {}, dim {}, window {}) does not match configuration (vocab {}, dim {}, window {})",
            model.vocab(),
            model.dim(),
            model.mention.window,
            cfg.vocab,
            cfg.dim,
            cfg.window
        )));
    }
    let docs = load_corpus(required(m, "corpus"))?;
    let labels = load_label_set(required(m, "labels"))?;
    let cache = fresh_cache(&model, &labels, &cfg)?;

    let allowed: Option<BTreeSet<String>> = m
        .get_flag("restrict-to-targets")
        .then(|| target_label_set(&docs, &labels));
    if allowed.as_ref().is_some_and(BTreeSet::is_empty) {
        return Err(invalid("no gold label of the corpus is in the label set"));
    }
    let mut predictor = Predictor::new(&model.mention, &cache, &labels, cfg.pooling);
    predictor.rescore_resolved = cfg.rescore_resolved;
    let preds = predict_corpus(
        &predictor,
        &docs,
        (cfg.max_chunk_mentions, cfg.max_chunk_chars),
        m.get_flag("iterative"),
        allowed.as_ref(),
    )?;
    write_jsonl(required(m, "out"), &preds.records)?;
    if let Some(p) = path(m, "first-pass-out") {
        write_jsonl(p, &preds.first_pass)?;
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let preds = read_predictions(required(m, "pred"))?;
    let golds = load_corpus(required(m, "gold-corpus"))?;
    let first = path(m, "first-pass").map(read_predictions).transpose()?;
    let report = evaluate(&preds, &golds, first.as_deref())?;
    print!("{}", render_table(&report));
    if let Some(out) = path(m, "out") {
        let mut w = create(out)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| invalid(format!("invalid seed '{s}'")))
        })
        .collect()
}

fn cmd_ablate(m: &ArgMatches) -> Result<()> {
    let base = resolve_config(m, None)?;
    let axis: AblationAxis = m.get_one::<String>("axis").expect("required").parse()?;
    let seeds = parse_seeds(m.get_one::<String>("seeds").expect("defaulted"))?;
    let plan = AblationPlan::standard(axis, seeds);

    let (train_docs, labels, dev): (Vec<Document>, LabelSet, Vec<Document>) = if m.get_flag("synthetic") {
        let data = generate(&SyntheticSpec::default());
        (data.train, data.labels, data.dev)
    } else {
        let get = |name| path(m, name).ok_or_else(|| invalid(format!("--{name} is required without --synthetic")));
        (
            load_corpus(get("corpus")?)?,
            load_label_set(get("labels")?)?,
            load_corpus(get("dev")?)?,
        )
    };
    let table = run_ablation(&plan, &base, &train_docs, &labels, &dev)?;
    print!("{}", render_ablation(&table));
    if let Some(out) = path(m, "out") {
        let mut w = create(out)?;
        serde_json::to_writer_pretty(&mut w, &table)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let out = required(m, "out");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let data = generate(&SyntheticSpec {
        seed,
        ..Default::default()
    });
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
        let p = out.join(name);
        let mut w = create(&p)?;
        f(&mut w).with_context(|| format!("writing {}", p.display()))?;
        w.flush()?;
        Ok(())
    };
    write("labels.jsonl", &|w| write_label_set(&data.labels, w))?;
    write("train.jsonl", &|w| write_corpus(&data.train, w))?;
    write("dev.jsonl", &|w| write_corpus(&data.dev, w))?;
    Ok(())
}
