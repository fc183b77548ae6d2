use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde_json::{json, Map, Value};

use super::adam::{adam_step, AdamConfig, OptimState};
use super::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{DatasetRecord, RegionSet, TokenSeq};
use crate::error::{Result, TdenError};
use crate::model::TdenModel;
use crate::proxy::{loss_tden, mask_batch, LossSet, MaskConfig, MaskedBatch};
use crate::rng::{rng_for, tag};
use crate::sampling::{run_step, StepConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub step: StepConfig,
    pub mask: MaskConfig,
    pub adam: AdamConfig,
    /// Evaluate every this many steps (0: only before the first and after the last step).
    pub eval_every: u64,
    pub eval_size: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            seed: 0,
            step: StepConfig::default(),
            mask: MaskConfig::default(),
            adam: AdamConfig {
                lr: 5e-4,
                warmup_steps: 100,
                ..AdamConfig::default()
            },
            eval_every: 0,
            eval_size: 256,
            checkpoint_every: 0,
        }
    }
}

/// Optional output locations for a run.
#[derive(Clone, Debug, Default)]
pub struct RunFiles {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub terms: Vec<(String, f64)>,
    pub alpha: Option<u8>,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub step: u64,
    pub masked_word_acc: f64,
    pub mlm: f64,
    pub moc: f64,
    pub msg: f64,
    pub msg_ppl: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalMetrics>,
    /// Exactly the lines written to the metrics log.
    pub log: Vec<String>,
    pub checkpoint: Checkpoint,
}

/// Dataset indices for `step`: a seeded permutation per epoch, consumed in order.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let k = step * batch as u64 + j;
        let epoch = k / n as u64;
        if cached.as_ref().is_none_or(|c| c.0 != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, &[tag::BATCH_ORDER, epoch]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set").1[(k % n as u64) as usize]);
    }
    out
}

pub fn pairs_of(records: &[&DatasetRecord]) -> Vec<(TokenSeq, RegionSet)> {
    records.iter().map(|r| (r.tokens(), r.regions.clone())).collect()
}

pub fn mask_records(records: &[&DatasetRecord], cfg: &MaskConfig, seed: u64, tags: &[u64]) -> MaskedBatch {
    let pairs = pairs_of(records);
    let refs: Vec<(&TokenSeq, &RegionSet)> = pairs.iter().map(|(t, r)| (t, r)).collect();
    mask_batch(&refs, cfg, &mut rng_for(seed, tags))
}

/// Masked-word accuracy and proxy losses on a fixed masked batch, no gradients.
pub fn evaluate(model: &TdenModel, batch: &MaskedBatch, step: u64) -> Result<EvalMetrics> {
    let mut g = model.frozen_graph();
    let losses = LossSet {
        mlm: true,
        moc: true,
        ism: false,
        msg: true,
    };
    let p = loss_tden(&mut g, model, batch, losses)?;
    let term = |name: &str| p.terms.iter().find(|t| t.0 == name).map(|t| g.scalar(t.1)).unwrap_or(f64::NAN);
    let logits = g.value(p.word_logits.expect("MLM enabled"));
    let targets = batch.word_targets();
    let correct = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
            best == Some(targets[i])
        })
        .count();
    let msg = term("msg");
    Ok(EvalMetrics {
        step,
        masked_word_acc: correct as f64 / targets.len() as f64,
        mlm: term("mlm"),
        moc: term("moc"),
        msg,
        msg_ppl: msg.exp(),
    })
}

fn eval_line(e: &EvalMetrics) -> String {
    json!({
        "kind": "eval",
        "step": e.step,
        "masked_word_acc": e.masked_word_acc,
        "mlm": e.mlm,
        "moc": e.moc,
        "msg": e.msg,
        "msg_ppl": e.msg_ppl,
    })
    .to_string()
}

fn step_line(r: &StepRecord) -> String {
    let mut m = Map::new();
    m.insert("kind".into(), json!("step"));
    m.insert("step".into(), json!(r.step));
    m.insert("total".into(), json!(r.total));
    for (k, v) in &r.terms {
        m.insert(k.clone(), json!(v));
    }
    if let Some(a) = r.alpha {
        m.insert("alpha".into(), json!(a));
    }
    m.insert("grad_norm".into(), json!(r.grad_norm));
    Value::Object(m).to_string()
}

/// Runs `cfg.steps` optimizer steps (continuing from `resume` when given).
/// `snapshot` is stored verbatim in the checkpoint.
pub fn pretrain(
    model: &mut TdenModel,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    cfg: &TrainConfig,
    snapshot: &str,
    resume: Option<&Checkpoint>,
    files: &RunFiles,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(TdenError::contract("pretraining needs a nonempty training split"));
    }
    if cfg.batch_size == 0 {
        return Err(TdenError::Config("batch_size must be positive".into()));
    }
    let (mut optim, start) = match resume {
        Some(ck) => (ck.restore_into(model)?, ck.step),
        None => (OptimState::new(&model.params), 0),
    };
    let mut sink = match &files.metrics {
        Some(p) if resume.is_some() => Some(BufWriter::new(OpenOptions::new().append(true).create(true).open(p)?)),
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |line: String, sink: &mut Option<BufWriter<File>>| -> Result<()> {
        if let Some(w) = sink {
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        log.push(line);
        Ok(())
    };

    let eval_batch = if val.is_empty() || cfg.eval_size == 0 {
        None
    } else {
        let recs: Vec<&DatasetRecord> = val.iter().take(cfg.eval_size).collect();
        Some(mask_records(&recs, &cfg.mask, cfg.seed, &[tag::EVAL]))
    };
    let mut evals = Vec::new();
    let mut steps = Vec::new();
    if let (Some(b), None) = (&eval_batch, resume) {
        let e = evaluate(model, b, 0)?;
        emit(eval_line(&e), &mut sink)?;
        evals.push(e);
    }

    for step in start..cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step);
        let recs: Vec<&DatasetRecord> = idx.iter().map(|&i| &train[i]).collect();
        let batch = mask_records(&recs, &cfg.mask, cfg.seed, &[tag::MASKING, step]);
        let mut g = model.graph();
        let out = run_step(&mut g, model, &batch, &cfg.step, &mut rng_for(cfg.seed, &[tag::SAMPLING, step]))?;
        let terms: Vec<(String, f64)> = out.terms.iter().map(|(k, v)| (k.to_string(), g.scalar(*v))).collect();
        let total = g.scalar(out.total);
        if !total.is_finite() {
            return Err(TdenError::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(out.total)?;
        let grad_norm = adam_step(&mut model.params, grads, &mut optim, &cfg.adam)?;
        let rec = StepRecord {
            step: step + 1,
            total,
            terms,
            alpha: out.alpha,
            grad_norm,
        };
        emit(step_line(&rec), &mut sink)?;
        steps.push(rec);

        let done = step + 1;
        if let Some(b) = &eval_batch {
            if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps {
                let e = evaluate(model, b, done)?;
                emit(eval_line(&e), &mut sink)?;
                evals.push(e);
            }
        }
        if let Some(p) = &files.checkpoint {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
                save_checkpoint(p, &Checkpoint::capture(model, &optim, done, cfg.seed, snapshot))?;
            }
        }
    }
    let checkpoint = Checkpoint::capture(model, &optim, cfg.steps.max(start), cfg.seed, snapshot);
    if let Some(p) = &files.checkpoint {
        save_checkpoint(p, &checkpoint)?;
    }
    Ok(TrainReport {
        steps,
        evals,
        log,
        checkpoint,
    })
}
