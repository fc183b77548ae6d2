//! The eight-row objective/scheme ablation and the pretraining-transfer
//! comparison, run at a reduced scale and averaged over seeds.

use std::fmt::Write as _;

use crate::data::{gen_corpus, DatasetRecord, SynthConfig};
use crate::downstream::{finetune, FinetuneConfig, TaskData, TaskKind};
use crate::error::{Result, TdenError};
use crate::model::TdenModel;
use crate::nn::{IsmPlacement, ModelConfig};
use crate::proxy::{LossSet, MaskConfig};
use crate::sampling::{Scheme, StepConfig};
use crate::train::{pretrain, AdamConfig, RunFiles, TrainConfig};

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub row: usize,
    pub name: &'static str,
    pub losses: LossSet,
    pub scheme: Scheme,
    pub placement: IsmPlacement,
}

const UNDERSTANDING: LossSet = LossSet {
    mlm: true,
    moc: true,
    ism: true,
    msg: false,
};
const GENERATION: LossSet = LossSet {
    mlm: false,
    moc: false,
    ism: true,
    msg: true,
};
const NO_ISM: LossSet = LossSet {
    mlm: true,
    moc: true,
    ism: false,
    msg: true,
};

pub const PRESETS: [Preset; 8] = [
    Preset { row: 1, name: "mlm+moc+ism", losses: UNDERSTANDING, scheme: Scheme::None, placement: IsmPlacement::Encoder },
    Preset { row: 2, name: "msg+ism", losses: GENERATION, scheme: Scheme::None, placement: IsmPlacement::Encoder },
    Preset { row: 3, name: "no ism", losses: NO_ISM, scheme: Scheme::None, placement: IsmPlacement::Encoder },
    Preset { row: 4, name: "ism at cross encoder", losses: LossSet::ALL, scheme: Scheme::None, placement: IsmPlacement::Cross },
    Preset { row: 5, name: "full", losses: LossSet::ALL, scheme: Scheme::None, placement: IsmPlacement::Encoder },
    Preset { row: 6, name: "two-pass-a", losses: LossSet::ALL, scheme: Scheme::TwoPassA, placement: IsmPlacement::Encoder },
    Preset { row: 7, name: "two-pass-b", losses: LossSet::ALL, scheme: Scheme::TwoPassB, placement: IsmPlacement::Encoder },
    Preset { row: 8, name: "two-pass-c", losses: LossSet::ALL, scheme: Scheme::TwoPassC, placement: IsmPlacement::Encoder },
];

pub fn preset(row: usize) -> Result<Preset> {
    PRESETS
        .iter()
        .find(|p| p.row == row)
        .copied()
        .ok_or_else(|| TdenError::Config(format!("ablation preset must be 1..=8, got {row}")))
}

/// Sizes and budgets shared by every row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationScale {
    pub model: ModelConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub pretrain_steps: u64,
    pub pretrain_batch: usize,
    pub pretrain_adam: AdamConfig,
    pub finetune: FinetuneConfig,
    /// Train items seen by finetuning.
    pub ft_train: usize,
}

impl AblationScale {
    /// The scale used for the directional checks.
    pub fn reduced() -> Self {
        AblationScale {
            model: ModelConfig::small(),
            n_train: 1024,
            n_test: 100,
            pretrain_steps: 1000,
            pretrain_batch: 16,
            pretrain_adam: AdamConfig {
                lr: 1e-3,
                warmup_steps: 50,
                ..AdamConfig::default()
            },
            finetune: FinetuneConfig::default(),
            ft_train: 1024,
        }
    }
}

/// Headline downstream metrics in [`TaskKind::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    /// 1..=8, or 0 for finetuning without pretraining.
    pub row: usize,
    pub seed: u64,
    pub metrics: [f64; 4],
}

pub struct SeedData {
    pub pretrain: Vec<DatasetRecord>,
    pub finetune: TaskData,
    pub test: TaskData,
}

pub fn seed_data(scale: &AblationScale, seed: u64) -> Result<SeedData> {
    let c = gen_corpus(&SynthConfig::for_model(&scale.model), 1000 + seed, scale.n_train, 0, scale.n_test)?;
    let all = TaskData::from_items(&c.train);
    Ok(SeedData {
        pretrain: all.records.clone(),
        finetune: all.head(scale.ft_train),
        test: TaskData::from_items(&c.test),
    })
}

/// Finetunes `model` on each task in `tasks` and returns the headline metrics
/// (NaN for tasks not run).
pub fn downstream_metrics(model: &TdenModel, data: &SeedData, scale: &AblationScale, seed: u64, tasks: &[TaskKind]) -> Result<[f64; 4]> {
    let cfg = FinetuneConfig {
        seed,
        ..scale.finetune.clone()
    };
    let mut out = [f64::NAN; 4];
    for (slot, task) in TaskKind::ALL.iter().enumerate() {
        if tasks.contains(task) {
            let (_, _, report) = finetune(model, *task, &data.finetune, &data.test, &cfg)?;
            out[slot] = report.headline();
        }
    }
    Ok(out)
}

/// Pretrains with the row's objectives (row 0 skips pretraining), then finetunes every task.
pub fn run_row(row: usize, seed: u64, scale: &AblationScale, data: &SeedData) -> Result<RowResult> {
    let mut model_cfg = scale.model.clone();
    let mut model = if row == 0 {
        TdenModel::new(model_cfg, seed)?
    } else {
        let p = preset(row)?;
        model_cfg.ism_placement = p.placement;
        let mut model = TdenModel::new(model_cfg, seed)?;
        let cfg = TrainConfig {
            steps: scale.pretrain_steps,
            batch_size: scale.pretrain_batch,
            seed,
            step: StepConfig {
                scheme: p.scheme,
                losses: p.losses,
                ..StepConfig::default()
            },
            mask: MaskConfig::default(),
            adam: scale.pretrain_adam.clone(),
            eval_every: 0,
            eval_size: 0,
            checkpoint_every: 0,
        };
        pretrain(&mut model, &data.pretrain, &[], &cfg, "", None, &RunFiles::default())?;
        model
    };
    // downstream retrieval ranks with encoder-level similarity unless the row moved it
    if row != 4 {
        model.config.ism_placement = IsmPlacement::Encoder;
    }
    let metrics = downstream_metrics(&model, data, scale, seed, &TaskKind::ALL)?;
    Ok(RowResult { row, seed, metrics })
}

/// Mean metrics of `row` over its seeds.
pub fn mean_metrics(results: &[RowResult], row: usize) -> Option<[f64; 4]> {
    let rows: Vec<&RowResult> = results.iter().filter(|r| r.row == row).collect();
    if rows.is_empty() {
        return None;
    }
    let mut m = [0.0; 4];
    for r in &rows {
        for (a, b) in m.iter_mut().zip(r.metrics) {
            *a += b / rows.len() as f64;
        }
    }
    Some(m)
}

pub fn row_name(row: usize) -> &'static str {
    if row == 0 {
        "no pretraining"
    } else {
        preset(row).map(|p| p.name).unwrap_or("?")
    }
}

/// Markdown table of seed-averaged metrics, one line per row present.
pub fn comparison_table(results: &[RowResult]) -> String {
    let mut rows: Vec<usize> = results.iter().map(|r| r.row).collect();
    rows.sort_unstable();
    rows.dedup();
    let mut out = String::from("| row | preset | seeds | cls acc | R@1 | mc acc | caption F1 |\n|---|---|---|---|---|---|---|\n");
    for row in rows {
        let m = mean_metrics(results, row).expect("row present");
        let n = results.iter().filter(|r| r.row == row).count();
        let _ = writeln!(
            out,
            "| {row} | {} | {n} | {:.4} | {:.4} | {:.4} | {:.4} |",
            row_name(row),
            m[0],
            m[1],
            m[2],
            m[3]
        );
    }
    out
}

/// Directional comparisons over seed-averaged metrics: (description, holds).
pub fn directional_checks(results: &[RowResult]) -> Result<Vec<(String, bool)>> {
    let get = |row| {
        mean_metrics(results, row).ok_or_else(|| TdenError::contract(format!("no results for row {row}")))
    };
    let (r1, r2, r4, r5) = (get(1)?, get(2)?, get(4)?, get(5)?);
    let mut out = vec![
        (
            format!("joint (5) caption F1 {:.4} >= understanding-only (1) {:.4}", r5[3], r1[3]),
            r5[3] >= r1[3],
        ),
        (
            format!("joint (5) cls acc {:.4} >= generation-only (2) {:.4}", r5[0], r2[0]),
            r5[0] >= r2[0],
        ),
        (
            format!("encoder ISM (5) R@1 {:.4} >= cross ISM (4) {:.4}", r5[1], r4[1]),
            r5[1] >= r4[1],
        ),
    ];
    for row in 6..=8 {
        let m = get(row)?;
        let wins = (0..4).filter(|&i| m[i] >= r5[i]).count();
        out.push((
            format!("{} (row {row}) >= no scheduling (5) on {wins}/4 metrics, need 2", row_name(row)),
            wins >= 2,
        ));
    }
    Ok(out)
}
