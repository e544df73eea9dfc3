use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use hybridlm::corpus::{read_documents, MaskingContext, PackedDataset};
use hybridlm::eval::{evaluate_suite, SuiteOptions, DEFAULT_TEMPERATURE_GRID};
use hybridlm::generate::{detokenize_stream, greedy_generate, GenerationConfig};
use hybridlm::training::{load_checkpoint, StepMetrics, TrainState, Trainer};
use hybridlm::{train_bpe, Vocab, DEFAULT_SPECIALS};
use serde_json::{json, Value};

use crate::config::{self, check_corpus, RunConfig};
use crate::run_dir::{
    corpus_digest, read_manifest, unix_time, write_atomic, write_manifest_section, RunLock,
};
use crate::{ConfigArgs, EvalArgs, Failure, GenerateArgs, TokenizeArgs, TrainArgs};

fn load_config(a: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = config::load(a.config.as_deref(), &a.set)?;
    if !a.corpus.is_empty() {
        cfg.corpus = a.corpus.clone();
    }
    if let Some(seed) = a.seed {
        cfg.schedule.seed = seed;
    }
    Ok(cfg)
}

fn load_vocab(path: &Path, hint: &str) -> Result<Vocab, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "no vocabulary at {}; {hint}",
            path.display()
        )));
    }
    Ok(Vocab::load(path)?)
}

fn check_checkpoint(dir: &Path) -> Result<(), Failure> {
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::usage(format!(
            "no checkpoint at {}",
            dir.display()
        )));
    }
    Ok(())
}

/// `vocab.txt` in the run directory that holds `checkpoint`.
fn vocab_beside(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join("vocab.txt")
}

pub fn tokenize(a: TokenizeArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    let corpus = cfg.corpus_files()?.to_vec();
    let _lock = RunLock::acquire(&a.out)?;
    let started = unix_time();
    let digest = corpus_digest(&corpus)?;
    let mut docs = Vec::new();
    for p in &corpus {
        docs.extend(read_documents(p)?);
    }
    let vocab = train_bpe(&docs, cfg.vocab_size, &DEFAULT_SPECIALS)?;
    let path = a.out.join("vocab.txt");
    write_atomic(&path, vocab.to_file_string().as_bytes())?;
    write_manifest_section(
        &a.out,
        "tokenize",
        json!({
            "corpus": corpus,
            "corpus_sha256": digest,
            "documents": docs.len(),
            "vocab_size": vocab.vocab_size(),
            "merges": vocab.num_merges(),
            "started_at": started,
            "finished_at": unix_time(),
        }),
    )?;
    println!(
        "wrote {} ({} tokens, {} merges, {} documents)",
        path.display(),
        vocab.vocab_size(),
        vocab.num_merges(),
        docs.len()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let vocab_path = a.vocab.clone().unwrap_or_else(|| a.out.join("vocab.txt"));
    let vocab = load_vocab(&vocab_path, "run `hybridlm tokenize` first or pass --vocab")?;
    let (state, corpus) = match &a.resume {
        Some(ckpt) => resume_state(&a, ckpt)?,
        None => fresh_state(&a, &vocab)?,
    };
    if state.config.model.vocab_size != vocab.vocab_size() {
        return Err(Failure::usage(format!(
            "model vocab_size {} does not match {} ({} tokens)",
            state.config.model.vocab_size,
            vocab_path.display(),
            vocab.vocab_size()
        )));
    }
    let _lock = RunLock::acquire(&a.out)?;
    let digest = corpus_digest(&corpus)?;
    if a.resume.is_some() {
        let m = read_manifest(&a.out);
        if let Some(prev) = m
            .get("train")
            .and_then(|t| t.get("corpus_sha256"))
            .and_then(Value::as_str)
        {
            if prev != digest {
                return Err(Failure::usage(format!(
                    "corpus content differs from the run being resumed (sha256 {prev}, now {digest})"
                )));
            }
        }
    }
    let seq_len = state
        .config
        .schedule
        .sequence_length(state.step.min(state.config.schedule.total_steps))?;
    let dataset = PackedDataset::ingest(&corpus, &vocab, seq_len)?;
    let ctx = MaskingContext::new(&vocab, state.config.schedule.corruption);

    let started = unix_time();
    let start_step = state.step;
    let mut section = json!({
        "status": "running",
        "config": state.config,
        "corpus": corpus,
        "corpus_sha256": digest,
        "seed": state.config.schedule.seed,
        "resumed_from": a.resume,
        "start_step": start_step,
        "started_at": started,
        "finished_at": null,
        "final_metrics": null,
    });
    write_manifest_section(&a.out, "train", section.clone())?;

    let total = state.config.schedule.total_steps;
    let mut trainer = Trainer::new(state, dataset, ctx).with_output(&a.out)?;
    let log_every = a.log_every;
    let mut last: Option<StepMetrics> = None;
    let result = trainer.run_with(total.saturating_sub(start_step), |m| {
        if log_every > 0 && (m.step % log_every == 0 || m.step == total) {
            eprintln!(
                "step {:>6}/{total}  loss {:.4}  lr {:.3e}  seq {}  tokens {}  |g| {:.3}",
                m.step, m.loss_total, m.lr, m.seq_len, m.batch_tokens, m.grad_norm
            );
        }
        last = Some(m.clone());
    });
    section["finished_at"] = unix_time().into();
    section["final_step"] = trainer.state.step.into();
    section["final_metrics"] = serde_json::to_value(&last).expect("metrics serialize");
    match result {
        Ok(_) => {
            section["status"] = "finished".into();
            write_manifest_section(&a.out, "train", section)?;
            let ckpt = a
                .out
                .join(hybridlm::training::checkpoint_dir_name(trainer.state.step));
            match &last {
                Some(m) => println!(
                    "step {} loss {:.4}; checkpoint {}",
                    m.step,
                    m.loss_total,
                    ckpt.display()
                ),
                None => println!("nothing to do: already at step {total}"),
            }
            Ok(())
        }
        Err(e) => {
            section["status"] = "failed".into();
            section["error"] = e.to_string().into();
            write_manifest_section(&a.out, "train", section)?;
            Err(e.into())
        }
    }
}

fn fresh_state(a: &TrainArgs, vocab: &Vocab) -> Result<(TrainState, Vec<PathBuf>), Failure> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(steps) = a.steps {
        cfg.schedule.total_steps = steps;
    }
    if let Some(r) = a.ratio {
        cfg.schedule.ratio = r;
    }
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.vocab_size();
    }
    let corpus = cfg.corpus_files()?.to_vec();
    Ok((TrainState::new(cfg.train_config())?, corpus))
}

/// The checkpoint's configuration is authoritative; only the corpus
/// location and a longer step budget may be given alongside it.
fn resume_state(a: &TrainArgs, ckpt: &Path) -> Result<(TrainState, Vec<PathBuf>), Failure> {
    let c = &a.cfg;
    if c.config.is_some() || !c.set.is_empty() || c.seed.is_some() || a.ratio.is_some() {
        return Err(Failure::usage(
            "--resume continues with the checkpoint's configuration; drop --config, --set, --seed and --ratio",
        ));
    }
    check_checkpoint(ckpt)?;
    let mut state = load_checkpoint(ckpt)?;
    if let Some(steps) = a.steps {
        if steps < state.step {
            return Err(Failure::usage(format!(
                "--steps {steps} is before the checkpoint's step {}",
                state.step
            )));
        }
        state.config.schedule.total_steps = steps;
    }
    let corpus = if !c.corpus.is_empty() {
        c.corpus.clone()
    } else {
        let m = read_manifest(&a.out);
        m.get("train")
            .and_then(|t| t.get("corpus"))
            .and_then(|v| serde_json::from_value::<Vec<PathBuf>>(v.clone()).ok())
            .unwrap_or_default()
    };
    check_corpus(&corpus)?;
    Ok((state, corpus))
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    check_checkpoint(&a.checkpoint)?;
    for d in &a.data {
        if !d.is_file() {
            return Err(Failure::usage(format!(
                "no evaluation file {}",
                d.display()
            )));
        }
    }
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| vocab_beside(&a.checkpoint));
    let vocab = load_vocab(&vocab_path, "pass --vocab")?;
    let calibrate = match &a.calibrate_temperature {
        None => None,
        Some(s) if s.trim().is_empty() => Some(DEFAULT_TEMPERATURE_GRID.to_vec()),
        Some(s) => Some(
            s.split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| {
                    Failure::usage(format!(
                        "--calibrate-temperature expects numbers, got {s:?}"
                    ))
                })?,
        ),
    };
    let opts = SuiteOptions {
        mode: a.mode,
        temperature: a.temperature,
        calibrate,
        prefix_fraction: a.prefix_fraction,
    };
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    let _lock = RunLock::acquire(&out)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let report = evaluate_suite(&state.params, &vocab, &a.data, &opts)?;

    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["checkpoint"] = a.checkpoint.display().to_string().into();
    value["step"] = state.step.into();
    let path = out.join("report.json");
    write_atomic(
        &path,
        serde_json::to_string_pretty(&value)
            .expect("report serializes")
            .as_bytes(),
    )?;

    for f in &report.files {
        println!("{}: {}", f.file, summarize(&f.metrics));
    }
    println!(
        "overall (mode {}, T={}): {}",
        report.mode,
        report.temperature,
        summarize(&report.overall)
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn summarize(m: &hybridlm::eval::Metrics) -> String {
    let mut parts = Vec::new();
    if let Some(acc) = m.accuracy {
        parts.push(format!(
            "accuracy {acc:.4} ({}/{})",
            m.ranked_correct, m.ranked
        ));
    }
    if let Some(em) = m.exact_match {
        parts.push(format!(
            "exact match {em:.4} ({}/{})",
            m.cloze_exact, m.cloze
        ));
    }
    if let Some(lp) = m.mean_gold_logprob {
        parts.push(format!("mean gold log-prob {lp:.4}"));
    }
    if let Some(l) = m.mean_loss {
        parts.push(format!("loss {l:.4} over {} tokens", m.text_tokens));
    }
    if m.skipped > 0 {
        parts.push(format!("{} skipped", m.skipped));
    }
    if parts.is_empty() {
        parts.push("no items".into());
    }
    parts.join(", ")
}

pub fn generate(a: GenerateArgs) -> Result<(), Failure> {
    check_checkpoint(&a.checkpoint)?;
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| vocab_beside(&a.checkpoint));
    let vocab = load_vocab(&vocab_path, "pass --vocab")?;
    let prompt = if a.prompt == "-" {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Failure::runtime(format!("cannot read prompt from stdin: {e}")))?;
        s.strip_suffix('\n')
            .map(|t| t.strip_suffix('\r').unwrap_or(t).to_string())
            .unwrap_or(s)
    } else {
        a.prompt.clone()
    };
    let state = load_checkpoint(&a.checkpoint)?;
    let sp = vocab.specials();
    let mut ids = vec![sp.bos];
    ids.extend(vocab.encode(&prompt));
    let room = state.config.model.max_seq_len.saturating_sub(ids.len());
    if room == 0 {
        return Err(Failure::usage(format!(
            "prompt of {} tokens leaves no room in the model's context of {}",
            ids.len(),
            state.config.model.max_seq_len
        )));
    }
    let cfg = GenerationConfig {
        max_new_tokens: a.max_new_tokens.unwrap_or(room.min(64)),
        repetition_penalty: a.repetition_penalty,
        stop_on_eos: !a.ignore_eos,
    };
    cfg.validate()?;
    let out = greedy_generate(&state.params, &ids, &cfg, sp.eos)?;
    let text = detokenize_stream(&vocab, &out.ids)?.concat();
    let mut stdout = io::stdout().lock();
    let written = if a.json {
        let v = json!({"prompt": prompt, "ids": out.ids, "text": text, "steps": out.steps});
        writeln!(stdout, "{v}")
    } else {
        writeln!(stdout, "{text}")
    };
    written.map_err(|e| Failure::runtime(format!("cannot write output: {e}")))
}
