use std::fs;
use std::path::Path;

use mannmt::analysis::{export_trace, monotonicity_report, record_episode};
use mannmt::data::{build_vocab, generate_copy_task, generate_toy_translation, load_parallel_corpus, ParallelCorpus, Vocabulary};
use mannmt::decode::{beam_decode, greedy_decode};
use mannmt::metrics::{bleu, token_accuracy};
use mannmt::models::{Checkpoint, Model, ModelConfig};
use mannmt::train::{max_decode_len, AdamConfig, LogRow, TrainConfig};
use mannmt::{Error, Result};

use crate::{DecodeArgs, Encoder, EvaluateArgs, InspectArgs, Task, TrainArgs, TranslateArgs};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.into(), source }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io(path))
}

fn data(a: &TrainArgs) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let total = a.train_size + a.valid_size;
    let all = match a.task {
        Some(Task::Copy) => generate_copy_task(total, a.min_len, a.max_len, a.bits, a.seed)?,
        Some(Task::Toy) => generate_toy_translation(total, a.toy_vocab, a.min_len, a.max_len, a.seed)?,
        None => {
            // clap guarantees all four paths when no task is given
            let path = |p: &Option<std::path::PathBuf>| p.clone().expect("required by clap");
            let (ts, tt) = (path(&a.train_source), path(&a.train_target));
            let sv = build_vocab(&ts, a.source_vocab_size)?;
            let tv = build_vocab(&tt, a.target_vocab_size)?;
            let train = load_parallel_corpus(&ts, &tt, &sv, &tv)?;
            let valid = load_parallel_corpus(&path(&a.valid_source), &path(&a.valid_target), &sv, &tv)?;
            return Ok((train, valid));
        }
    };
    Ok(all.split_at(a.train_size))
}

fn write_corpus(c: &ParallelCorpus, dir: &Path, stem: &str) -> Result<()> {
    let (mut src, mut tgt) = (String::new(), String::new());
    for p in &c.pairs {
        src.push_str(&c.source_vocab.decode(&p.source));
        src.push('\n');
        tgt.push_str(&c.target_vocab.decode(&p.target));
        tgt.push('\n');
    }
    write(&dir.join(format!("{stem}.src")), &src)?;
    write(&dir.join(format!("{stem}.tgt")), &tgt)
}

pub fn train(a: &TrainArgs, resolved: &str) -> Result<()> {
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    write(&a.out.join("config.txt"), resolved)?;
    let (train_set, valid_set) = data(a)?;
    if a.task.is_some() {
        write_corpus(&train_set, &a.out, "train")?;
        write_corpus(&valid_set, &a.out, "valid")?;
    }

    let mut mc = ModelConfig::new(a.arch, train_set.source_vocab.len(), train_set.target_vocab.len());
    mc.embedding = a.embedding;
    mc.hidden = a.hidden;
    mc.layers = a.layers;
    mc.memory_locations = a.memory_locations;
    mc.memory_width = a.memory_width;
    mc.read_heads = a.read_heads;
    mc.write_heads = a.write_heads;
    mc.bidirectional = a.encoder == Encoder::Bidirectional && a.arch.has_encoder();
    mc.dropout = a.dropout;
    mc.init_range = a.init_range;
    // distinct streams for data, initialisation and batching
    let model = Model::<f64>::new(mc, a.seed.wrapping_add(1))?;
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        adam: AdamConfig { learning_rate: a.lr, beta1: a.beta1, beta2: a.beta2, epsilon: a.adam_epsilon },
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        seed: a.seed.wrapping_add(2),
        eval_every: (a.eval_every > 0).then_some(a.eval_every),
        target_accuracy: (a.target_accuracy > 0.0).then_some(a.target_accuracy),
        eval_limit: (a.eval_limit > 0).then_some(a.eval_limit),
        bucket_batches: 20,
    };

    let out = mannmt::train::train(model, &train_set, &valid_set, &tc, &mut |row| {
        if let LogRow::Valid { step, token_accuracy, bleu, .. } = row {
            eprintln!("step {step}: valid token accuracy {token_accuracy:.4}, BLEU {bleu:.2}");
        }
    })?;
    write(&a.out.join("metrics.tsv"), &out.log_tsv())?;
    for (file, model, step) in [("best.ckpt", &out.best, out.best_step), ("last.ckpt", &out.last, out.steps_run)] {
        let mut ck = Checkpoint::from_model(model, &train_set.source_vocab, &train_set.target_vocab);
        ck.meta = vec![("step".into(), step.to_string()), ("seed".into(), a.seed.to_string())];
        ck.save(&a.out.join(file))?;
    }
    if let Some(e) = out.diverged {
        return Err(e);
    }
    match out.best_evaluation {
        Some(ev) => println!(
            "steps={} best_step={} token_accuracy={:.6} bleu={:.4}",
            out.steps_run, out.best_step, ev.token_accuracy, ev.bleu
        ),
        None => println!("steps={} best_step={}", out.steps_run, out.best_step),
    }
    Ok(())
}

fn decode(model: &Model<f64>, source: &[usize], d: &DecodeArgs) -> Result<Vec<usize>> {
    let max = if d.max_output > 0 { d.max_output } else { max_decode_len(source.len()) };
    if d.greedy {
        Ok(greedy_decode(model, &[source.to_vec()], max)?.swap_remove(0))
    } else {
        beam_decode(model, source, d.beam_width, max)
    }
}

fn check_vocab(given: &Option<std::path::PathBuf>, expected: &Vocabulary, field: &str) -> Result<()> {
    let Some(path) = given else { return Ok(()) };
    let v = Vocabulary::load(path)?;
    if &v != expected {
        return Err(Error::Config {
            field: field.into(),
            message: format!("{} ({} ids) differs from the checkpoint's vocabulary ({} ids)", path.display(), v.len(), expected.len()),
        });
    }
    Ok(())
}

pub fn translate(a: &TranslateArgs) -> Result<()> {
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    check_vocab(&a.source_vocab, &ck.source_vocab, "source_vocab")?;
    check_vocab(&a.target_vocab, &ck.target_vocab, "target_vocab")?;
    let model = ck.to_model()?;
    let mut out = String::new();
    for line in read(&a.input)?.lines() {
        let ids = decode(&model, &ck.source_vocab.encode(line), &a.decode)?;
        out.push_str(&ck.target_vocab.decode(&ids));
        out.push('\n');
    }
    match &a.output {
        Some(path) => write(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let corpus = load_parallel_corpus(&a.source, &a.reference, &ck.source_vocab, &ck.target_vocab)?;
    if corpus.is_empty() {
        return Err(Error::Ingest { path: a.source.clone(), message: "no sentences to evaluate".into() });
    }
    let mut hyps = Vec::with_capacity(corpus.len());
    for p in &corpus.pairs {
        hyps.push(decode(&model, &p.source, &a.decode)?);
    }
    let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.target[..p.target.len() - 1].to_vec()).collect();
    println!(
        "bleu={:.4} token_accuracy={:.6} sentences={}",
        bleu(&hyps, &refs)?,
        token_accuracy(&hyps, &refs)?,
        corpus.len()
    );
    Ok(())
}

pub fn inspect(a: &InspectArgs, resolved: &str) -> Result<()> {
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let source = ck.source_vocab.encode(&a.sentence);
    let decoded = decode(&model, &source, &a.decode)?;
    let episode = record_episode(&model, &source, Some(&decoded), Some((&ck.source_vocab, &ck.target_vocab)))?;

    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    write(&a.out.join("config.txt"), resolved)?;
    let mut report = format!("source: {}\ntranslation: {}\n", a.sentence.trim(), ck.target_vocab.decode(&decoded));
    for trace in &episode.traces {
        export_trace(trace, &a.out)?;
        report.push_str(&monotonicity_report(trace)?.render());
    }
    write(&a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}
