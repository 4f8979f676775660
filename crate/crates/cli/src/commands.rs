use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use boottod_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, sha256_hex, PARAMS_FILE};
use boottod_core::data::synthetic::generate_synthetic_corpus;
use boottod_core::data::{PMode, TokenizedDialogue};
use boottod_core::eval::{
    act_examples, finetune_dialogue_act, finetune_intent, intent_examples, response_pairs, response_pool,
    response_selection_eval, IntentSpace, MetricsReport,
};
use boottod_core::objective::{Distance, PretrainModel};
use boottod_core::trainer::{init_model, train, LogRecord, TrainOutcome};
use boottod_core::vocab::Vocab;
use boottod_core::Error;
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{write_json, write_synthetic, Corpus};
use crate::{CliError, CommonArgs, DistanceArg, EvalArgs, GenCorpusArgs, InspectArgs, ObjectiveArgs, PretrainArgs, Task, TrainArgs};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const VERSION_FILE: &str = "version.json";

#[derive(Serialize)]
struct VersionStamp<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
}

pub fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = Some(o.clone());
    }
    Ok(cfg)
}

pub fn require_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.paths
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out, BOOTTOD_OUT or paths.out)".into()))
}

pub fn require_corpus(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.paths
        .corpus
        .clone()
        .ok_or_else(|| CliError::Usage("a corpus directory is required (--corpus, BOOTTOD_CORPUS or paths.corpus)".into()))
}

/// Writes the resolved configuration and the tool version stamp into `dir`.
pub fn stamp(dir: &Path, cfg: &RunConfig, command: &str) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let p = dir.join(RESOLVED_CONFIG);
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    write_json(
        &dir.join(VERSION_FILE),
        &VersionStamp {
            tool: "boottod",
            version: env!("CARGO_PKG_VERSION"),
            command,
        },
    )
}

pub fn gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    let c = &mut cfg.corpus;
    if let Some(s) = args.common.seed {
        c.seed = s;
    }
    if let Some(v) = args.intents {
        c.num_intents = v;
    }
    if let Some(v) = args.dialogues {
        c.dialogues = v;
    }
    if let Some(v) = args.templates {
        c.templates_per_intent = v;
    }
    if let Some(v) = args.noise {
        c.noise = v;
    }
    cfg.corpus.validate()?;
    let out = require_out(&cfg)?;
    let corpus = generate_synthetic_corpus(&cfg.corpus)?;
    let manifest = write_synthetic(&out, &corpus, &cfg.corpus)?;
    stamp(&out, &cfg, "gen-corpus")?;
    println!(
        "wrote {} train / {} dev / {} test dialogues to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    );
    for (f, h) in &manifest.files {
        println!("{h}  {f}");
    }
    Ok(())
}

pub fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(c) = &a.corpus {
        cfg.paths.corpus = Some(c.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = a.max_steps {
        t.max_steps = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
}

pub fn resolve_p_mode(mode: Option<&str>, cap: Option<usize>) -> Result<Option<PMode>, CliError> {
    match (mode, cap) {
        (None, None) => Ok(None),
        (None, Some(k)) | (Some("cap"), Some(k)) => {
            if k == 0 {
                return Err(CliError::Usage("--p-cap must be at least 1".into()));
            }
            Ok(Some(PMode::Cap(k)))
        }
        (Some("cap"), None) => Err(CliError::Usage("--p-mode cap requires --p-cap".into())),
        (Some(m), Some(_)) => Err(CliError::Usage(format!("--p-cap conflicts with --p-mode {m}"))),
        (Some(m), None) => m.parse().map(Some).map_err(|e: Error| CliError::Usage(e.to_string())),
    }
}

pub fn apply_objective_args(cfg: &mut RunConfig, a: &ObjectiveArgs) -> Result<(), CliError> {
    if let Some(p) = resolve_p_mode(a.p_mode.as_deref(), a.p_cap)? {
        cfg.sampler.p_mode = p;
    }
    let al = &mut cfg.alignment;
    if let Some(k) = a.k {
        al.k = k;
    }
    if a.no_mlm {
        al.use_mlm = false;
    }
    if a.no_cls_align {
        al.use_cls_align = false;
    }
    if a.no_mask_align {
        al.use_mask_align = false;
    }
    if a.no_stop_gradient {
        al.use_stop_gradient = false;
    }
    if a.no_predictor {
        al.use_predictor = false;
    }
    if let Some(d) = a.distance {
        al.distance = match d {
            DistanceArg::Euclidean => Distance::Euclidean,
            DistanceArg::Squared => Distance::Squared,
        };
    }
    if let Some(n) = a.normalize {
        al.normalize = n;
    }
    Ok(())
}

pub fn tokenized(dialogues: &[boottod_core::data::Dialogue], vocab: &Vocab) -> Vec<TokenizedDialogue> {
    dialogues.iter().map(|d| TokenizedDialogue::new(d, vocab)).collect()
}

/// Builds the vocabulary from the train split and pre-trains from a seeded init.
pub fn pretrain_in_memory(cfg: &RunConfig, corpus: &Corpus) -> Result<(Vocab, TrainOutcome), Error> {
    let vocab = Vocab::build(&corpus.train, cfg.vocab.min_freq)?;
    let enc = cfg.encoder_config(vocab.len())?;
    let tcfg = cfg.train_config();
    let model = init_model(&enc, cfg.seed)?;
    let outcome = train(model, &tokenized(&corpus.train, &vocab), &tokenized(&corpus.dev, &vocab), &tcfg)?;
    Ok((vocab, outcome))
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    for r in log {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::Data(e.to_string()))?;
    }
    f.flush().map_err(|e| Error::Data(e.to_string()))
}

#[derive(Serialize)]
struct PretrainSummary {
    best_step: usize,
    best_dev_ppl: f64,
    initial_dev_ppl: f64,
    steps_run: usize,
    stopped_early: bool,
    warnings: Vec<String>,
}

pub fn pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    apply_train_args(&mut cfg, &args.train);
    apply_objective_args(&mut cfg, &args.objective)?;
    let out = require_out(&cfg)?;
    let corpus = Corpus::load(&require_corpus(&cfg)?)?;
    for w in cfg.train_config().validate(cfg.encoder.num_layers)? {
        eprintln!("warning: {w}");
    }
    stamp(&out, &cfg, "pretrain")?;
    let (vocab, outcome) = pretrain_in_memory(&cfg, &corpus)?;
    write_log(&out.join("train_log.jsonl"), &outcome.log)?;
    let metrics = BTreeMap::from([
        ("dev_ppl".to_string(), outcome.best_dev_ppl),
        ("initial_dev_ppl".to_string(), outcome.initial_dev_ppl),
    ]);
    let snapshot = toml_to_json(&cfg)?;
    save_checkpoint(&out.join("checkpoint"), &outcome.model, &vocab, outcome.best_step, metrics, snapshot)?;
    write_json(
        &out.join("summary.json"),
        &PretrainSummary {
            best_step: outcome.best_step,
            best_dev_ppl: outcome.best_dev_ppl,
            initial_dev_ppl: outcome.initial_dev_ppl,
            steps_run: outcome.steps_run,
            stopped_early: outcome.stopped_early,
            warnings: outcome.warnings.clone(),
        },
    )?;
    println!(
        "pre-trained {} steps; dev perplexity {:.3} -> {:.3} (best at step {}); checkpoint in {}",
        outcome.steps_run,
        outcome.initial_dev_ppl,
        outcome.best_dev_ppl,
        outcome.best_step,
        out.join("checkpoint").display()
    );
    Ok(())
}

fn toml_to_json(cfg: &RunConfig) -> Result<serde_json::Value, Error> {
    Ok(serde_json::to_value(cfg)?)
}

/// Runs one downstream protocol and returns its report.
pub fn evaluate_task(
    cfg: &RunConfig,
    corpus: &Corpus,
    model: &PretrainModel,
    vocab: &Vocab,
    task: Task,
    split: &str,
) -> Result<MetricsReport, Error> {
    let ft = cfg.finetune_config();
    let max_len = model.config().max_len;
    let eval_dialogues = corpus.split(split);
    if eval_dialogues.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    match task {
        Task::Intent => {
            let meta = corpus.meta()?;
            let space = IntentSpace::new(&meta.intents, &meta.ood_intents);
            let (xt, yt) = intent_examples(&corpus.train, &corpus.labels("train")?, vocab, &space, max_len)?;
            let (xe, ye) = intent_examples(eval_dialogues, &corpus.labels(split)?, vocab, &space, max_len)?;
            finetune_intent(model, (&xt, &yt), (&xe, &ye), &space, &ft)
        }
        Task::Act => {
            let meta = corpus.meta()?;
            let (xt, yt) = act_examples(&corpus.train, &corpus.labels("train")?, vocab, &meta.acts, max_len)?;
            let (xe, ye) = act_examples(eval_dialogues, &corpus.labels(split)?, vocab, &meta.acts, max_len)?;
            finetune_dialogue_act(model, (&xt, &yt), (&xe, &ye), meta.acts.len(), &ft)
        }
        Task::ResponseSelection => {
            let pool = response_pool(&corpus.all(), vocab, max_len);
            let train = response_pairs(&corpus.train, vocab, max_len);
            let test = response_pairs(eval_dialogues, vocab, max_len);
            response_selection_eval(model, &train, &test, &pool, cfg.eval.pool_size, &cfg.eval.ks, &ft)
        }
    }
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<(), Error> {
    write_json(&dir.join("report.json"), report)?;
    let p = dir.join("report.csv");
    fs::write(&p, report.to_csv()).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

pub fn finetune_eval(args: EvalArgs, split: &str, command: &str) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = &args.corpus {
        cfg.paths.corpus = Some(c.clone());
    }
    if let Some(c) = &args.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if args.random_init {
        cfg.paths.checkpoint = None;
    }
    if let Some(v) = args.steps {
        cfg.eval.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.eval.lr = v;
    }
    if args.freeze_encoder {
        cfg.eval.freeze_encoder = true;
    }
    if let Some(v) = args.pool_size {
        cfg.eval.pool_size = v;
    }
    let out = require_out(&cfg)?;
    let corpus = Corpus::load(&require_corpus(&cfg)?)?;
    let (model, vocab, source) = match &cfg.paths.checkpoint {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            cfg.encoder = ck.manifest.encoder.clone();
            (ck.model, ck.vocab, dir.display().to_string())
        }
        None if args.random_init => {
            let vocab = Vocab::build(&corpus.train, cfg.vocab.min_freq)?;
            let model = init_model(&cfg.encoder_config(vocab.len())?, cfg.seed)?;
            (model, vocab, "random-init".to_string())
        }
        None => {
            return Err(CliError::Usage(
                "either --checkpoint (or BOOTTOD_CHECKPOINT / paths.checkpoint) or --random-init is required".into(),
            ))
        }
    };
    stamp(&out, &cfg, command)?;
    info!("running {} on the {split} split", args.task.name());
    let mut report = evaluate_task(&cfg, &corpus, &model, &vocab, args.task, split)?;
    report.meta.init = if args.random_init { "random".into() } else { "pretrained".into() };
    report.meta.checkpoint = Some(source);
    write_report(&out, &report)?;
    for (k, v) in &report.metrics {
        println!("{}\t{k}\t{v:.4}", report.task);
    }
    for k in &report.absent {
        println!("{}\t{k}\tabsent", report.task);
    }
    Ok(())
}

#[derive(Serialize)]
struct Inspection<'a> {
    path: String,
    format_version: u32,
    tool_version: &'a str,
    step: usize,
    metrics: &'a BTreeMap<String, f64>,
    encoder: &'a boottod_core::encoder::EncoderConfig,
    parameters: usize,
    scalars: usize,
    checksum_ok: bool,
}

pub fn inspect_checkpoint(args: InspectArgs) -> Result<(), CliError> {
    let m = read_manifest(&args.checkpoint)?;
    let p = args.checkpoint.join(PARAMS_FILE);
    let bytes = fs::read(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    let checksum_ok = bytes.len() == m.params_bytes && sha256_hex(&bytes) == m.params_sha256;
    let info = Inspection {
        path: args.checkpoint.display().to_string(),
        format_version: m.format_version,
        tool_version: &m.tool_version,
        step: m.step,
        metrics: &m.metrics,
        encoder: &m.encoder,
        parameters: m.params.len(),
        scalars: m.params.iter().map(|e| e.shape.iter().product::<usize>()).sum(),
        checksum_ok,
    };
    println!("{}", serde_json::to_string_pretty(&info).map_err(Error::from)?);
    if !checksum_ok {
        return Err(Error::Checkpoint {
            path: p,
            msg: "checksum mismatch".into(),
        }
        .into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_mode_flag_resolution() {
        assert_eq!(resolve_p_mode(Some("all"), None).unwrap(), Some(PMode::All));
        assert_eq!(resolve_p_mode(None, Some(3)).unwrap(), Some(PMode::Cap(3)));
        assert_eq!(resolve_p_mode(Some("cap"), Some(2)).unwrap(), Some(PMode::Cap(2)));
        assert_eq!(resolve_p_mode(Some("3"), None).unwrap(), Some(PMode::Cap(3)));
        assert!(matches!(resolve_p_mode(Some("fix"), Some(3)), Err(CliError::Usage(_))));
        assert!(matches!(resolve_p_mode(Some("cap"), None), Err(CliError::Usage(_))));
        assert!(matches!(resolve_p_mode(Some("bogus"), None), Err(CliError::Usage(_))));
    }
}
