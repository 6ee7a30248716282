use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use progdistill::chain::{
    distill_step, run_chain_with, table3_chains, train_on_raw_crops, train_teacher, ChainMemo, ChainOptions,
    ChainResult, ChainSpec, Trained,
};
use progdistill::checkpoint::Checkpoint;
use progdistill::dataset::{ingest, LabeledDataset, Splits};
use progdistill::distillation::{build_distilled_dataset, DistillOptions, LabelMode};
use progdistill::evaluation::{evaluate, EvalOptions, EvalReport};
use progdistill::kv::join;
use progdistill::model::{count_flops, FlopsReport, Network};
use progdistill::synth::{generate, write_corpus};

use crate::config::{RunConfig, Scale};

fn load_splits(cfg: &RunConfig, root: &Path) -> Result<Splits> {
    ingest(root, &cfg.ingest()?).with_context(|| format!("loading dataset {}", root.display()))
}

fn load_net(path: &Path) -> Result<Network> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Network::from_checkpoint(&ckpt)?)
}

fn log_file(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Saves the checkpoint, evaluates on `test` and writes `eval.json`.
fn finish(out: &Path, ckpt_name: &str, trained: &Trained, test: &LabeledDataset) -> Result<EvalReport> {
    trained.to_checkpoint().save(out.join(ckpt_name))?;
    let report = evaluate(&trained.net, test, &EvalOptions::default())?;
    write_json(&out.join("eval.json"), &report)?;
    eprint!("{}", report.table());
    println!("{}", out.join(ckpt_name).display());
    Ok(report)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.synth()?;
    let corpus = generate(&spec)?;
    write_corpus(out, &spec, &corpus)?;
    cfg.freeze(out, "synth", &["synth"])?;
    println!(
        "wrote {} train and {} test clips ({} classes) to {}",
        corpus.splits.train.len(),
        corpus.splits.test.len(),
        spec.label_names().len(),
        out.display()
    );
    Ok(())
}

pub fn train_teacher_cmd(cfg: &RunConfig, data: &Path, ms: u32, out: &Path) -> Result<()> {
    let splits = load_splits(cfg, data)?;
    let front = cfg.front_end()?;
    let spec = cfg.network(ms, splits.train.n_classes())?;
    let training = cfg.training()?;
    cfg.freeze(out, "train-teacher", &["train", "data"])?;
    let mut log = log_file(out, &format!("log_c{ms}.jsonl"))?;
    let trained = train_teacher(&splits.train, &spec, &front, &training, Some(&mut log))?;
    log.flush()?;
    finish(out, &format!("c{ms}.ckpt"), &trained, &splits.test)?;
    Ok(())
}

pub fn baseline(cfg: &RunConfig, data: &Path, ms: u32, out: &Path) -> Result<()> {
    let splits = load_splits(cfg, data)?;
    let front = cfg.front_end()?;
    let spec = cfg.network(ms, splits.train.n_classes())?;
    let training = cfg.training()?;
    cfg.freeze(out, "baseline", &["train", "data"])?;
    let mut log = log_file(out, &format!("log_raw_c{ms}.jsonl"))?;
    let trained = train_on_raw_crops(&splits.train, &spec, &front, &training, Some(&mut log))?;
    log.flush()?;
    finish(out, &format!("raw_c{ms}.ckpt"), &trained, &splits.test)?;
    Ok(())
}

pub struct DistillArgs<'a> {
    pub teacher: &'a Path,
    pub data: &'a Path,
    pub ms: u32,
    pub mode: LabelMode,
    pub out: &'a Path,
    pub dump_dataset: bool,
}

pub fn distill(cfg: &RunConfig, a: &DistillArgs<'_>) -> Result<()> {
    let teacher = load_net(a.teacher)?;
    let splits = load_splits(cfg, a.data)?;
    if splits.train.label_names != teacher.label_names {
        bail!(
            "dataset classes {:?} do not match the teacher's {:?}",
            splits.train.label_names,
            teacher.label_names
        );
    }
    let training = cfg.training()?;
    cfg.freeze(a.out, "distill", &["train", "data"])?;
    if a.dump_dataset {
        let ds = build_distilled_dataset(
            &teacher,
            &splits.train.prepared(&teacher.front)?,
            &DistillOptions {
                tgt_ms: a.ms,
                crops_per_source: training.crops_per_source,
                mode: a.mode,
                seed: training.seed,
                epoch: 0,
            },
        )?;
        ds.save(a.out.join("distilled"))?;
    }
    let mut log = log_file(a.out, &format!("log_c{}.jsonl", a.ms))?;
    let trained = distill_step(&teacher, &splits.train, a.ms, &training, a.mode, Some(&mut log))?;
    log.flush()?;
    finish(a.out, &format!("c{}.ckpt", a.ms), &trained, &splits.test)?;
    Ok(())
}

fn chain_dir(out: &Path, dims: &[u32], mode: LabelMode) -> PathBuf {
    out.join(format!("{mode}_{}", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")))
}

fn chain_json(r: &ChainResult) -> serde_json::Value {
    serde_json::json!({
        "dims_ms": r.dims_ms,
        "label_mode": r.label_mode.to_string(),
        "final_accuracy": r.final_accuracy(),
        "steps": r.steps.iter().map(|s| &s.eval).collect::<Vec<_>>(),
    })
}

pub struct ChainArgs<'a> {
    pub data: &'a Path,
    pub dims: Vec<u32>,
    pub mode: LabelMode,
    pub sweep: bool,
    pub resume: bool,
    pub out: &'a Path,
}

pub fn chain(cfg: &RunConfig, a: &ChainArgs<'_>) -> Result<()> {
    let splits = load_splits(cfg, a.data)?;
    let front = cfg.front_end()?;
    let training = cfg.training()?;
    let first = *a.dims.first().context("empty --dims")?;
    let net_spec = cfg.network(first, splits.train.n_classes())?;
    cfg.freeze(a.out, "chain", &["train", "data"])?;
    let train = splits.train.prepared(&front)?;
    let test = splits.test.prepared(&front)?;
    let mut memo = ChainMemo::default();
    let mut run = |dims: Vec<u32>, mode: LabelMode, dir: PathBuf| -> Result<ChainResult> {
        let spec = ChainSpec {
            dims_ms: dims,
            label_mode: mode,
            training: training.clone(),
        };
        let opts = ChainOptions {
            out_dir: Some(dir.clone()),
            resume: a.resume,
            eval: EvalOptions::default(),
        };
        let r = run_chain_with(&spec, &net_spec, &front, &train, &test, &opts, &mut memo)?;
        write_json(&dir.join("result.json"), &chain_json(&r))?;
        for s in &r.steps {
            eprintln!(
                "  C{}: {:.2}%{}",
                s.dim_ms,
                100.0 * s.eval.accuracy,
                if s.resumed { " (reused)" } else { "" }
            );
        }
        Ok(r)
    };

    if !a.sweep {
        let r = run(a.dims.clone(), a.mode, a.out.to_path_buf())?;
        std::fs::write(
            a.out.join("table3.csv"),
            format!("{}\n{}\n", ChainResult::TABLE3_HEADER, r.table3_row()),
        )?;
        println!("{}", r.table3_row());
        return Ok(());
    }

    // Every chain of the progressive table in the requested mode, plus
    // single-step soft and hard chains to each shorter length.
    let full = first;
    let mut table = vec![ChainResult::TABLE3_HEADER.to_string()];
    let mut fig3 = vec!["steps,dims_ms,accuracy".to_string()];
    for dims in table3_chains() {
        if dims[0] != full {
            bail!("--sweep expects the chains to start at {} ms, got {full}", dims[0]);
        }
        eprintln!("chain {} ({})", join(&dims), a.mode);
        let r = run(dims.clone(), a.mode, chain_dir(a.out, &dims, a.mode))?;
        fig3.push(format!("{},{},{:.4}", dims.len() - 1, join(&dims).replace(',', "-"), 100.0 * r.final_accuracy()));
        table.push(r.table3_row());
    }
    let mut fig2 = vec!["target_ms,soft,hard,difference".to_string()];
    for tgt in (500..full).step_by(100).rev() {
        let mut acc = [0.0; 2];
        for (i, mode) in [LabelMode::Soft, LabelMode::Hard].into_iter().enumerate() {
            let dims = vec![full, tgt];
            eprintln!("chain {} ({mode})", join(&dims));
            acc[i] = 100.0 * run(dims.clone(), mode, chain_dir(a.out, &dims, mode))?.final_accuracy();
        }
        fig2.push(format!("{tgt},{:.4},{:.4},{:.4}", acc[0], acc[1], acc[0] - acc[1]));
    }
    std::fs::write(a.out.join("table3.csv"), table.join("\n") + "\n")?;
    std::fs::write(a.out.join("fig3.csv"), fig3.join("\n") + "\n")?;
    std::fs::write(a.out.join("fig2.csv"), fig2.join("\n") + "\n")?;
    println!("{}", table.join("\n"));
    Ok(())
}

pub struct EvalArgs<'a> {
    pub net: &'a Path,
    pub test: &'a Path,
    pub split: &'a str,
    pub csv: bool,
    pub random_offsets: Option<u64>,
    pub out: Option<&'a Path>,
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs<'_>) -> Result<()> {
    let net = load_net(a.net)?;
    let splits = load_splits(cfg, a.test)?;
    let data = match a.split {
        "test" => splits.test,
        "validation" => splits.validation,
        "train" => splits.train,
        other => bail!("unknown split {other:?}"),
    };
    let report = evaluate(&net, &data, &EvalOptions { random_offsets: a.random_offsets })?;
    let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    if let Some(out) = a.out {
        cfg.freeze(out, "eval", &["data"])?;
        write_json(&out.join("eval.json"), &report)?;
        std::fs::write(out.join("eval.csv"), &csv)?;
    }
    eprint!("{}", report.table());
    if a.csv {
        print!("{csv}");
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

pub fn flops(cfg: &RunConfig, dims: &[u32], out: Option<&Path>) -> Result<()> {
    let classes = match cfg.scale()? {
        Scale::Desk => 6,
        Scale::Standard => 12,
    };
    let base = cfg.network(1000, classes)?;
    let mut text = format!("{}\n", FlopsReport::CSV_HEADER);
    for &ms in dims {
        text.push_str(&count_flops(&base.with_input_ms(ms)).csv_row());
        text.push('\n');
    }
    if let Some(out) = out {
        cfg.freeze(out, "flops", &[])?;
        std::fs::write(out.join("flops.csv"), &text)?;
    }
    print!("{text}");
    Ok(())
}
