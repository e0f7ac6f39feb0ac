use crate::log_sink::JsonLog;
use crate::{Cli, Command, DataArgs, EvalFewshotArgs, EvalZeroshotArgs, ExportArgs, GenSynthArgs, GradcheckArgs, MetricsArgs, PretrainArgs};
use log::info;
use relcon::config::{CorpusSection, EvalSection, RunConfig};
use relcon::corpus::{PreparedCorpus, PreprocessConfig};
use relcon::encoder::{BiEncoder, EncoderConfig};
use relcon::episodes::{evaluate, EmbeddedCorpus, EvalReport, LabelMatchClassifier, PrototypeClassifier, Similarity, TaskSpec};
use relcon::gradcheck::{objective_check, op_suite};
use relcon::metrics::export_embeddings;
use relcon::pipeline::{corpus_metrics, export_rows, load_run_data, load_with_vocab};
use relcon::synth::{generate, SynthSpec};
use relcon::tensor::Checkpoint;
use relcon::training::{load_model, TrainConfig, Trainer};
use relcon::Error;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
    #[error("gradient check failed for {0}")]
    CheckFailed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_numerical() => 3,
            CliError::Run(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Text appended to `pretrain --help`: the config layout with every default.
pub fn config_help() -> String {
    let example = RunConfig {
        corpus: CorpusSection {
            train: "train.jsonl".into(),
            eval: Some("heldout.jsonl".into()),
            min_count: 1,
        },
        labels: "labels.json".into(),
        encoder: EncoderConfig::default(),
        train: TrainConfig::default(),
        preprocess: PreprocessConfig::default(),
        eval: EvalSection::default(),
    };
    format!(
        "Run config: JSON, unknown keys rejected, paths relative to the config file. \
         Only corpus.train and labels are required; every other value below is the default. \
         encoder.vocab_size 0 means the size of the vocabulary built from the data, and \
         eval.t null means T = N.\n\n{}",
        serde_json::to_string_pretty(&example).expect("config serializes")
    )
}

pub fn run(cli: Cli) -> Result<()> {
    let mut log = JsonLog::open(cli.log.as_deref())?;
    match cli.command {
        Command::GenSynth(a) => gen_synth(a, &mut log),
        Command::Pretrain(a) => pretrain(a, &mut log),
        Command::EvalFewshot(a) => eval_fewshot(a, &mut log),
        Command::EvalZeroshot(a) => eval_zeroshot(a, &mut log),
        Command::Metrics(a) => metrics(a, &mut log),
        Command::ExportEmbeddings(a) => export(a, &mut log),
        Command::Gradcheck(a) => gradcheck(a, &mut log),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn gen_synth(a: GenSynthArgs, log: &mut JsonLog) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.rng_seed = s;
    }
    let corpus = generate(&spec)?;
    corpus.write_to(&a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    info!(
        "wrote {} sentences over {} relations ({} train, {} held out) to {}",
        corpus.records.len(),
        corpus.labels.len(),
        corpus.train_relations.len(),
        corpus.heldout_relations.len(),
        a.out.display()
    );
    log.write("gen_synth", &spec)?;
    Ok(())
}

fn pretrain(a: PretrainArgs, log: &mut JsonLog) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.rng_seed = s;
    }
    cfg.validate()?;
    let data = load_run_data(&cfg)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let (t, vocab) = Trainer::restore(&Checkpoint::load(p)?)?;
            if vocab != data.vocab {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary in {} differs from the one built from the config's data",
                    p.display()
                ))
                .into());
            }
            t
        }
        None => {
            if cfg.encoder.vocab_size == 0 {
                cfg.encoder.vocab_size = data.vocab.len();
            } else if cfg.encoder.vocab_size != data.vocab.len() {
                return Err(Error::InvalidArgument(format!(
                    "encoder.vocab_size is {} but the data gives a vocabulary of {}",
                    cfg.encoder.vocab_size,
                    data.vocab.len()
                ))
                .into());
            }
            Trainer::new(cfg.encoder, cfg.train, cfg.preprocess)?
        }
    };
    fs::create_dir_all(&a.out)?;
    data.vocab.save(a.out.join("vocab.json"))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut train_log = std::io::BufWriter::new(fs::File::create(a.out.join("train_log.jsonl"))?);
    let per_epoch = trainer.steps_per_epoch(&data.train);
    info!(
        "{} training sentences, {} labels, vocabulary {}, {} parameters, {} steps per epoch",
        data.train.len(),
        data.labels.len(),
        data.vocab.len(),
        trainer.model.store.num_scalars(),
        per_epoch
    );
    let (ck_every, eval_every, eval_cfg) = (cfg.train.checkpoint_every, cfg.train.eval_every, cfg.eval);
    let out = a.out.clone();
    let vocab = data.vocab.clone();
    trainer.run(&data.train, a.max_steps, |t, rec| {
        serde_json::to_writer(&mut train_log, rec)?;
        train_log.write_all(b"\n")?;
        log.write("train_step", rec)?;
        if rec.batch + 1 == per_epoch {
            info!(
                "epoch {:>3} step {:>6}  loss {:.4}  scl {:.4}  mlm {:.4}  tau {:.4}",
                rec.epoch + 1,
                rec.step,
                rec.loss,
                rec.scl,
                rec.mlm,
                rec.tau
            );
        }
        if ck_every > 0 && rec.step % ck_every == 0 {
            t.checkpoint(&vocab)?.save(out.join(format!("checkpoint-step{:06}.bin", rec.step)))?;
        }
        if let (true, Some(eval)) = (eval_every > 0 && rec.step % eval_every == 0, &data.eval) {
            let report = fewshot_report(&t.model, eval, &eval_cfg)?;
            info!("step {} eval {} accuracy {:.4}", rec.step, report.method, report.accuracy);
            log.write("eval", &serde_json::json!({ "step": rec.step, "report": report }))?;
        }
        Ok(())
    })?;
    train_log.flush()?;
    let path = a.out.join("checkpoint.bin");
    trainer.checkpoint(&vocab)?.save(&path)?;
    info!("saved {} at step {}", path.display(), trainer.step());
    Ok(())
}

fn fewshot_report(model: &BiEncoder, corpus: &PreparedCorpus, e: &EvalSection) -> relcon::Result<EvalReport> {
    let embedded = EmbeddedCorpus::new(model, corpus)?;
    let index = embedded.index();
    if e.k == 0 {
        let c = LabelMatchClassifier { corpus: &embedded };
        return evaluate(&c, &index, e.task(), e.episodes, e.seed);
    }
    let c = PrototypeClassifier {
        corpus: &embedded,
        label_info: e.label_info,
        similarity: e.similarity,
    };
    evaluate(&c, &index, e.task(), e.episodes, e.seed)
}

/// Model from the checkpoint plus the evaluation corpus encoded with its vocabulary.
fn load_eval(d: &DataArgs) -> Result<(BiEncoder, PreparedCorpus)> {
    let cfg = d.config.as_ref().map(RunConfig::load).transpose()?;
    let corpus: PathBuf = d
        .corpus
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.corpus.eval.clone()))
        .ok_or_else(|| CliError::Usage("no evaluation corpus: pass --corpus or set corpus.eval in --config".into()))?;
    let labels: PathBuf = d
        .labels
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.labels.clone()))
        .ok_or_else(|| CliError::Usage("no label file: pass --labels or --config".into()))?;
    let (model, vocab, meta) = load_model(&Checkpoint::load(&d.checkpoint)?)?;
    let prepared = load_with_vocab(corpus, labels, &vocab, meta.preprocess.max_seq_len)?;
    Ok((model, prepared))
}

fn report(r: &EvalReport, out: Option<&Path>, log: &mut JsonLog) -> Result<()> {
    info!(
        "{} {}-way-{}-shot, {} episodes x {} queries: accuracy {:.4} +/- {:.4}",
        r.method, r.task.n, r.task.k, r.episodes, r.task.t, r.accuracy, r.ci95
    );
    if let Some(p) = out {
        write_json(p, r)?;
    }
    log.write("eval", r)?;
    Ok(())
}

fn eval_fewshot(a: EvalFewshotArgs, log: &mut JsonLog) -> Result<()> {
    if a.k == 0 {
        return Err(CliError::Usage("eval-fewshot needs --k >= 1; use eval-zeroshot for K = 0".into()));
    }
    let (model, corpus) = load_eval(&a.data)?;
    let e = EvalSection {
        n: a.n,
        k: a.k,
        t: a.t,
        episodes: a.episodes,
        seed: a.seed,
        label_info: a.label_info,
        similarity: if a.euclidean { Similarity::Euclidean } else { Similarity::Cosine },
    };
    let r = fewshot_report(&model, &corpus, &e)?;
    report(&r, a.data.out.as_deref(), log)
}

fn eval_zeroshot(a: EvalZeroshotArgs, log: &mut JsonLog) -> Result<()> {
    let (model, corpus) = load_eval(&a.data)?;
    let embedded = EmbeddedCorpus::new(&model, &corpus)?;
    let c = LabelMatchClassifier { corpus: &embedded };
    let r = evaluate(&c, &embedded.index(), TaskSpec::new(a.n, 0, a.t), a.episodes, a.seed)?;
    report(&r, a.data.out.as_deref(), log)
}

fn metrics(a: MetricsArgs, log: &mut JsonLog) -> Result<()> {
    let (model, vocab, meta) = load_model(&Checkpoint::load(&a.checkpoint)?)?;
    let corpus = load_with_vocab(&a.corpus, &a.labels, &vocab, meta.preprocess.max_seq_len)?;
    let m = corpus_metrics(&model, &corpus, a.seed)?;
    info!(
        "align {:.6}  uniform {:.6}  ({} positive pairs, {} sentences, {} labels)",
        m.align, m.uniform, m.positive_pairs, m.sentences, m.labels
    );
    write_json(&a.out, &m)?;
    log.write("metrics", &m)?;
    Ok(())
}

fn export(a: ExportArgs, log: &mut JsonLog) -> Result<()> {
    let (model, vocab, meta) = load_model(&Checkpoint::load(&a.checkpoint)?)?;
    let corpus = load_with_vocab(&a.corpus, &a.labels, &vocab, meta.preprocess.max_seq_len)?;
    let embedded = EmbeddedCorpus::new(&model, &corpus)?;
    let rows = export_rows(&embedded, &a.relations)?;
    export_embeddings(&rows, &a.out)?;
    info!("wrote {} rows to {}", rows.len(), a.out.display());
    log.write(
        "export",
        &serde_json::json!({ "rows": rows.len(), "relations": a.relations, "out": a.out }),
    )?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, log: &mut JsonLog) -> Result<()> {
    let mut reports = op_suite(a.seed, a.cases, 1e-5)?;
    reports.push(objective_check(a.seed, 8, 16, 50, 1e-4)?);
    let mut failed = Vec::new();
    for r in &reports {
        info!(
            "{:<16} {:>4} checked  max rel err {:.3e}  (tol {:.0e})  {}",
            r.name,
            r.coordinates,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
        log.write("gradcheck", r)?;
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}
