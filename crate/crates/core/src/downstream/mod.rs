//! Finetuning heads and evaluations for the four downstream task formulations:
//! answer classification, caption-image retrieval, multiple choice and captioning.

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::vocab::{CLS, IMG, MASK, SEP};
use crate::data::{DatasetRecord, RegionSet, SynthItem, TaskAnnotation, TokenSeq};
use crate::error::{Result, TdenError};
use crate::model::{EncodedPair, TdenModel};
use crate::nn::{AttnPool, Group, IsmPlacement, Linear, ParamBuilder};
use crate::proxy::ism_loss;
use crate::rng::{derive_seed, rng_for, tag};
use crate::train::{adam_step_scaled, batch_indices, AdamConfig, OptimState};

/// Length normalization exponent applied when beam hypotheses are finalized.
pub const LENGTH_PENALTY: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Classification,
    Retrieval,
    Multichoice,
    Captioning,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Classification,
        TaskKind::Retrieval,
        TaskKind::Multichoice,
        TaskKind::Captioning,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "retrieval" => Ok(TaskKind::Retrieval),
            "multichoice" => Ok(TaskKind::Multichoice),
            "captioning" => Ok(TaskKind::Captioning),
            other => Err(TdenError::Config(format!(
                "unknown task `{other}` (expected classification, retrieval, multichoice or captioning)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Retrieval => "retrieval",
            TaskKind::Multichoice => "multichoice",
            TaskKind::Captioning => "captioning",
        }
    }

    /// Metric used when a single number summarizes the task.
    pub fn headline_metric(self) -> &'static str {
        match self {
            TaskKind::Classification | TaskKind::Multichoice => "accuracy",
            TaskKind::Retrieval => "r1",
            TaskKind::Captioning => "token_f1",
        }
    }
}

/// Records with their task labels, aligned by index.
#[derive(Clone, Debug, Default)]
pub struct TaskData {
    pub records: Vec<DatasetRecord>,
    pub annotations: Vec<TaskAnnotation>,
}

impl TaskData {
    pub fn new(records: Vec<DatasetRecord>, annotations: Vec<TaskAnnotation>) -> Result<Self> {
        if records.len() != annotations.len() {
            return Err(TdenError::contract(format!(
                "{} records but {} annotations",
                records.len(),
                annotations.len()
            )));
        }
        Ok(TaskData { records, annotations })
    }

    pub fn from_items(items: &[SynthItem]) -> Self {
        TaskData {
            records: items.iter().map(|i| i.record.clone()).collect(),
            annotations: items.iter().map(|i| i.annotation.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `n` items.
    pub fn head(&self, n: usize) -> TaskData {
        let n = n.min(self.len());
        TaskData {
            records: self.records[..n].to_vec(),
            annotations: self.annotations[..n].to_vec(),
        }
    }
}

/// Attention pools over the cross-modal encoder and decoder outputs.
#[derive(Clone, Debug)]
pub struct JointPool {
    pub encoder: AttnPool,
    pub decoder: AttnPool,
}

impl JointPool {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        JointPool {
            encoder: AttnPool::new(pb, &format!("{name}.encoder_pool"), Group::Head, d),
            decoder: AttnPool::new(pb, &format!("{name}.decoder_pool"), Group::Head, d),
        }
    }

    /// Holistic image-sentence feature, 1×d: pooled cross-encoder rows plus
    /// pooled decoder rows. The decoder reads the sentence causally.
    pub fn forward(&self, g: &mut Graph, model: &TdenModel, tokens: &TokenSeq, regions: &RegionSet) -> Result<Var> {
        let image = model.encode_objects(g, regions)?;
        let sentence = model.encode_sentence(g, tokens, false)?;
        let joint = model.cross_encode(g, EncodedPair { sentence, image })?;
        let causal = model.encode_sentence(g, tokens, true)?;
        let decoded = model.cross_decode(g, causal, image)?;
        let a = self.encoder.forward(g, joint)?;
        let b = self.decoder.forward(g, decoded)?;
        g.add(a, b)
    }
}

/// Task-specific parameters attached to the model's store under [`Group::Head`].
#[derive(Clone, Debug)]
pub enum TaskHead {
    /// Sigmoid scores over the answer set.
    Classification { pool: JointPool, output: Linear },
    /// Ranks by the matching similarity; no extra parameters.
    Retrieval,
    /// One scalar score per candidate response.
    Multichoice { pool: JointPool, output: Linear },
    /// Decoder plus generation classifier; no extra parameters.
    Captioning,
}

impl TaskHead {
    pub fn attach(model: &mut TdenModel, task: TaskKind, seed: u64) -> TaskHead {
        let d = model.config.d_model;
        let n_answers = model.config.n_attributes;
        let std = model.config.init_std;
        let mut pb = ParamBuilder::new(&mut model.params, rng_for(seed, &[tag::HEAD_INIT]), std);
        match task {
            TaskKind::Classification => TaskHead::Classification {
                pool: JointPool::new(&mut pb, "head", d),
                output: Linear::new(&mut pb, "head.output", Group::Head, d, n_answers),
            },
            TaskKind::Retrieval => TaskHead::Retrieval,
            TaskKind::Multichoice => TaskHead::Multichoice {
                pool: JointPool::new(&mut pb, "head", d),
                output: Linear::new(&mut pb, "head.output", Group::Head, d, 1),
            },
            TaskKind::Captioning => TaskHead::Captioning,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskHead::Classification { .. } => TaskKind::Classification,
            TaskHead::Retrieval => TaskKind::Retrieval,
            TaskHead::Multichoice { .. } => TaskKind::Multichoice,
            TaskHead::Captioning => TaskKind::Captioning,
        }
    }
}

/// Question as the input sentence.
pub fn question_tokens(annotation: &TaskAnnotation) -> TokenSeq {
    TokenSeq::wrap(&annotation.question)
}

/// Question followed by one candidate response.
pub fn choice_tokens(annotation: &TaskAnnotation, choice: usize) -> TokenSeq {
    let mut words = annotation.question.clone();
    words.extend_from_slice(&annotation.choices[choice]);
    TokenSeq::wrap(&words)
}

/// Answer logits for one item, 1×A.
pub fn classification_logits(
    g: &mut Graph,
    model: &TdenModel,
    pool: &JointPool,
    output: &Linear,
    record: &DatasetRecord,
    annotation: &TaskAnnotation,
) -> Result<Var> {
    let feature = pool.forward(g, model, &question_tokens(annotation), &record.regions)?;
    output.forward(g, feature)
}

/// Candidate scores for one item, 1×n_choices.
pub fn multichoice_scores(
    g: &mut Graph,
    model: &TdenModel,
    pool: &JointPool,
    output: &Linear,
    record: &DatasetRecord,
    annotation: &TaskAnnotation,
) -> Result<Var> {
    let n = annotation.choices.len();
    let mut scores = Vec::with_capacity(n);
    for c in 0..n {
        let feature = pool.forward(g, model, &choice_tokens(annotation, c), &record.regions)?;
        scores.push(output.forward(g, feature)?);
    }
    let col = g.concat_rows(&scores)?;
    g.reshape(col, &[1, n])
}

/// Teacher-forced captioning loss for one clean pair.
pub fn caption_loss(g: &mut Graph, model: &TdenModel, record: &DatasetRecord) -> Result<Var> {
    let tokens = record.tokens();
    let image = model.encode_objects(g, &record.regions)?;
    let causal = model.encode_sentence(g, &tokens, true)?;
    let inputs = g.slice_rows(causal, 0, tokens.len() - 1)?;
    let decoded = model.cross_decode(g, inputs, image)?;
    let logits = model.logits_generation(g, decoded)?;
    g.cross_entropy(logits, &tokens.ids()[1..], None)
}

/// Mean training loss of `head` on the items at `idx`.
pub fn task_loss(g: &mut Graph, model: &TdenModel, head: &TaskHead, data: &TaskData, idx: &[usize]) -> Result<Var> {
    match head {
        TaskHead::Classification { pool, output } => {
            let n_answers = model.config.n_attributes;
            let mut rows = Vec::with_capacity(idx.len());
            let mut targets = Tensor::zeros(&[idx.len(), n_answers]);
            for (r, &i) in idx.iter().enumerate() {
                let ann = &data.annotations[i];
                if ann.answer >= n_answers {
                    return Err(TdenError::Index {
                        op: "classification target",
                        index: ann.answer,
                        bound: n_answers,
                    });
                }
                rows.push(classification_logits(g, model, pool, output, &data.records[i], ann)?);
                targets.data_mut()[r * n_answers + ann.answer] = 1.0;
            }
            let logits = g.concat_rows(&rows)?;
            g.bce_with_logits(logits, &targets)
        }
        TaskHead::Retrieval => {
            let mut sentences = Vec::with_capacity(idx.len());
            let mut images = Vec::with_capacity(idx.len());
            for &i in idx {
                let rec = &data.records[i];
                sentences.push(model.encode_sentence(g, &rec.tokens(), false)?);
                images.push(model.encode_objects(g, &rec.regions)?);
            }
            ism_loss(g, model, &sentences, &images)
        }
        TaskHead::Multichoice { pool, output } => {
            let mut rows = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                let ann = &data.annotations[i];
                rows.push(multichoice_scores(g, model, pool, output, &data.records[i], ann)?);
                targets.push(ann.correct_choice);
            }
            let scores = g.concat_rows(&rows)?;
            g.cross_entropy(scores, &targets, None)
        }
        TaskHead::Captioning => {
            let terms = idx
                .iter()
                .map(|&i| caption_loss(g, model, &data.records[i]))
                .collect::<Result<Vec<_>>>()?;
            let total = g.add_all(&terms)?;
            Ok(g.scale(total, 1.0 / idx.len() as f64))
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning-rate multiplier for the freshly initialized head parameters.
    pub head_lr_scale: f64,
    pub seed: u64,
    /// Held-out pairs ranked against each other for retrieval.
    pub retrieval_pool: usize,
    /// Beam width for caption evaluation; 1 decodes greedily.
    pub beam: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 250,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            head_lr_scale: 30.0,
            seed: 0,
            retrieval_pool: 100,
            beam: 1,
        }
    }
}

/// Named metrics for one task, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    pub task: TaskKind,
    pub metrics: Vec<(&'static str, f64)>,
    /// Training loss per finetuning step.
    pub losses: Vec<f64>,
}

impl TaskReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == name).map(|m| m.1)
    }

    pub fn headline(&self) -> f64 {
        self.metric(self.task.headline_metric()).unwrap_or(f64::NAN)
    }
}

/// Finetunes a copy of `model` on `train` and scores it on `test`.
/// Returns the finetuned model, its head and the report.
pub fn finetune(
    model: &TdenModel,
    task: TaskKind,
    train: &TaskData,
    test: &TaskData,
    cfg: &FinetuneConfig,
) -> Result<(TdenModel, TaskHead, TaskReport)> {
    if train.is_empty() && cfg.steps > 0 {
        return Err(TdenError::contract("finetuning needs at least one training item"));
    }
    if task == TaskKind::Retrieval && cfg.batch_size < 2 {
        return Err(TdenError::contract("retrieval finetuning needs a batch of at least 2"));
    }
    let mut tuned = model.clone();
    let head = TaskHead::attach(&mut tuned, task, cfg.seed);
    let mut optim = OptimState::new(&tuned.params);
    let order_seed = derive_seed(cfg.seed, &[tag::FINETUNE]);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, order_seed, step);
        let mut g = tuned.graph();
        let loss = task_loss(&mut g, &tuned, &head, train, &idx)?;
        losses.push(g.scalar(loss));
        let grads = g.backward(loss)?;
        adam_step_scaled(&mut tuned.params, grads, &mut optim, &cfg.adam, |group| {
            if group == Group::Head {
                cfg.head_lr_scale
            } else {
                1.0
            }
        })?;
    }
    let metrics = evaluate_task(&tuned, &head, test, cfg)?;
    let report = TaskReport { task, metrics, losses };
    Ok((tuned, head, report))
}

/// Scores a (finetuned) model on held-out items.
pub fn evaluate_task(
    model: &TdenModel,
    head: &TaskHead,
    test: &TaskData,
    cfg: &FinetuneConfig,
) -> Result<Vec<(&'static str, f64)>> {
    match head {
        TaskHead::Classification { pool, output } => {
            let mut credit = 0.0;
            for (rec, ann) in test.records.iter().zip(&test.annotations) {
                let mut g = model.frozen_graph();
                let logits = classification_logits(&mut g, model, pool, output, rec, ann)?;
                credit += argmax_credit(g.value(logits).data(), ann.answer);
            }
            Ok(vec![("accuracy", credit / test.len().max(1) as f64)])
        }
        TaskHead::Retrieval => {
            let sim = retrieval_similarities(model, &test.records, cfg.retrieval_pool)?;
            let r = recall_at(&sim, &[1, 5, 10])?;
            Ok(vec![("r1", r[0]), ("r5", r[1]), ("r10", r[2])])
        }
        TaskHead::Multichoice { pool, output } => {
            let mut credit = 0.0;
            for (rec, ann) in test.records.iter().zip(&test.annotations) {
                let mut g = model.frozen_graph();
                let scores = multichoice_scores(&mut g, model, pool, output, rec, ann)?;
                credit += argmax_credit(g.value(scores).data(), ann.correct_choice);
            }
            Ok(vec![("accuracy", credit / test.len().max(1) as f64)])
        }
        TaskHead::Captioning => {
            let mode = if cfg.beam <= 1 {
                DecodeMode::Greedy
            } else {
                DecodeMode::Beam(cfg.beam)
            };
            let preds = test
                .records
                .iter()
                .map(|r| generate_caption(model, &r.regions, mode))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<Vec<usize>> = test.records.iter().map(|r| r.caption.clone()).collect();
            let s = eval_caption(&preds, &refs)?;
            Ok(vec![("exact_match", s.exact_match), ("token_f1", s.token_f1)])
        }
    }
}

/// 1 if `target` holds the unique maximum, 1/k if it ties with k-1 others, else 0.
pub fn argmax_credit(scores: &[f64], target: usize) -> f64 {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores[target] < best {
        return 0.0;
    }
    1.0 / scores.iter().filter(|&&s| s == best).count() as f64
}

pub fn finetune_classification(model: &TdenModel, train: &TaskData, test: &TaskData, cfg: &FinetuneConfig) -> Result<f64> {
    let (_, _, r) = finetune(model, TaskKind::Classification, train, test, cfg)?;
    Ok(r.headline())
}

/// R@1, R@5, R@10.
pub fn finetune_retrieval(model: &TdenModel, train: &TaskData, test: &TaskData, cfg: &FinetuneConfig) -> Result<[f64; 3]> {
    let (_, _, r) = finetune(model, TaskKind::Retrieval, train, test, cfg)?;
    let get = |n| r.metric(n).unwrap_or(f64::NAN);
    Ok([get("r1"), get("r5"), get("r10")])
}

pub fn finetune_multichoice(model: &TdenModel, train: &TaskData, test: &TaskData, cfg: &FinetuneConfig) -> Result<f64> {
    let (_, _, r) = finetune(model, TaskKind::Multichoice, train, test, cfg)?;
    Ok(r.headline())
}

/// Caption-by-image similarity matrix over the first `pool` records,
/// entry (i, j) = caption i against image j.
pub fn retrieval_similarities(model: &TdenModel, records: &[DatasetRecord], pool: usize) -> Result<Vec<Vec<f64>>> {
    if pool < 10 || records.len() < pool {
        return Err(TdenError::contract(format!(
            "retrieval needs a pool of at least 10 pairs, got {} of {}",
            records.len().min(pool),
            pool
        )));
    }
    let records = &records[..pool];
    let mut g = model.frozen_graph();
    let mut sentences = Vec::with_capacity(pool);
    let mut images = Vec::with_capacity(pool);
    for rec in records {
        sentences.push(model.encode_sentence(&mut g, &rec.tokens(), false)?);
        images.push(model.encode_objects(&mut g, &rec.regions)?);
    }
    match model.config.ism_placement {
        IsmPlacement::Encoder => {
            let s = sentences
                .iter()
                .map(|&h| model.pool_sentence(&mut g, h))
                .collect::<Result<Vec<_>>>()?;
            let v = images
                .iter()
                .map(|&h| model.pool_image(&mut g, h))
                .collect::<Result<Vec<_>>>()?;
            let s = g.concat_rows(&s)?;
            let v = g.concat_rows(&v)?;
            let vt = g.transpose(v)?;
            let sim = g.matmul(s, vt)?;
            Ok(g.value(sim).data().chunks(pool).map(<[f64]>::to_vec).collect())
        }
        IsmPlacement::Cross => {
            let sentences: Vec<Tensor> = sentences.iter().map(|&v| g.value(v).clone()).collect();
            let images: Vec<Tensor> = images.iter().map(|&v| g.value(v).clone()).collect();
            let mut out = Vec::with_capacity(pool);
            for s in &sentences {
                let mut row = Vec::with_capacity(pool);
                for im in &images {
                    let mut g = model.frozen_graph();
                    let sentence = g.constant(s.clone());
                    let image = g.constant(im.clone());
                    let sim = crate::proxy::ism_similarity(&mut g, model, &[sentence], &[image])?;
                    row.push(g.scalar(sim));
                }
                out.push(row);
            }
            Ok(out)
        }
    }
}

/// Fraction of captions whose paired image ranks within the top k. Ties
/// count against the paired image.
pub fn recall_at(sim: &[Vec<f64>], ks: &[usize]) -> Result<Vec<f64>> {
    let n = sim.len();
    if sim.iter().any(|r| r.len() != n) {
        let cols = sim.iter().map(Vec::len).find(|&c| c != n).unwrap_or(n);
        return Err(TdenError::Shape {
            op: "recall_at",
            lhs: vec![n, n],
            rhs: vec![n, cols],
        });
    }
    let ranks: Vec<usize> = (0..n)
        .map(|i| {
            let own = sim[i][i];
            1 + (0..n).filter(|&j| j != i && sim[i][j] >= own).count()
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n.max(1) as f64)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// A decoded caption with its summed log-probability (including `[SEP]` when emitted).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub words: Vec<usize>,
    pub log_prob: f64,
    /// Generated tokens, counting the closing `[SEP]`.
    pub length: usize,
}

impl Decoded {
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / (self.length.max(1) as f64).powf(LENGTH_PENALTY)
    }
}

/// Next-token log-probabilities after `prefix` (which starts with `[CLS]`).
/// `[CLS]`, `[MASK]` and `[IMG]` get −∞.
pub fn next_log_probs(model: &TdenModel, image: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut g = model.frozen_graph();
    let image = g.constant(image.clone());
    let mut ids = prefix.to_vec();
    ids.push(SEP);
    let tokens = TokenSeq::from_wrapped(ids)?;
    let states = model.encode_sentence(&mut g, &tokens, true)?;
    let last = g.slice_rows(states, 0, prefix.len())?;
    let decoded = model.cross_decode(&mut g, last, image)?;
    let row = g.slice_rows(decoded, prefix.len() - 1, prefix.len())?;
    let logits = model.logits_generation(&mut g, row)?;
    let z = g.value(logits).data();
    let lse = crate::autodiff::kernels::log_sum_exp(z);
    let mut out: Vec<f64> = z.iter().map(|v| v - lse).collect();
    for id in [CLS, MASK, IMG] {
        out[id] = f64::NEG_INFINITY;
    }
    Ok(out)
}

/// Encoded `[IMG]` + regions as a plain tensor.
pub fn encode_image(model: &TdenModel, regions: &RegionSet) -> Result<Tensor> {
    let mut g = model.frozen_graph();
    let v = model.encode_objects(&mut g, regions)?;
    Ok(g.value(v).clone())
}

/// Decodes at most `max_steps` tokens (the closing `[SEP]` included).
pub fn decode(model: &TdenModel, regions: &RegionSet, mode: DecodeMode, max_steps: usize) -> Result<Decoded> {
    let limit = model.config.max_seq_len - 1;
    if max_steps == 0 || max_steps > limit {
        return Err(TdenError::contract(format!("decode length must be in 1..={limit}, got {max_steps}")));
    }
    let image = encode_image(model, regions)?;
    match mode {
        DecodeMode::Greedy => greedy(model, &image, max_steps),
        DecodeMode::Beam(k) => beam(model, &image, k.max(1), max_steps),
    }
}

/// Caption word ids (no `[CLS]`/`[SEP]`), up to `max_seq_len − 1` generated tokens.
pub fn generate_caption(model: &TdenModel, regions: &RegionSet, mode: DecodeMode) -> Result<Vec<usize>> {
    Ok(decode(model, regions, mode, model.config.max_seq_len - 1)?.words)
}

fn finish(prefix: &[usize], log_prob: f64) -> Decoded {
    let closed = prefix.last() == Some(&SEP);
    let end = if closed { prefix.len() - 1 } else { prefix.len() };
    Decoded {
        words: prefix[1..end].to_vec(),
        log_prob,
        length: prefix.len() - 1,
    }
}

/// Lowest id among the maxima.
fn best_id(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn greedy(model: &TdenModel, image: &Tensor, max_steps: usize) -> Result<Decoded> {
    let mut prefix = vec![CLS];
    let mut log_prob = 0.0;
    for _ in 0..max_steps {
        let lp = next_log_probs(model, image, &prefix)?;
        let id = best_id(&lp);
        log_prob += lp[id];
        prefix.push(id);
        if id == SEP {
            break;
        }
    }
    Ok(finish(&prefix, log_prob))
}

fn beam(model: &TdenModel, image: &Tensor, k: usize, max_steps: usize) -> Result<Decoded> {
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![CLS], 0.0)];
    let mut done: Vec<Decoded> = Vec::new();
    for _ in 0..max_steps {
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, score) in &live {
            let lp = next_log_probs(model, image, prefix)?;
            for (id, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    let mut p = prefix.clone();
                    p.push(id);
                    cands.push((p, score + l));
                }
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(k);
        live.clear();
        for (p, s) in cands {
            if p.last() == Some(&SEP) {
                done.push(finish(&p, s));
            } else {
                live.push((p, s));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live.iter().map(|(p, s)| finish(p, *s)));
    let mut best = done.swap_remove(0);
    for d in done {
        if d.normalized_score() > best.normalized_score() {
            best = d;
        }
    }
    Ok(best)
}

/// Model log-probability of a given continuation (`[SEP]` appended when `closed`).
pub fn sequence_log_prob(model: &TdenModel, regions: &RegionSet, words: &[usize], closed: bool) -> Result<f64> {
    let image = encode_image(model, regions)?;
    let mut prefix = vec![CLS];
    let mut total = 0.0;
    let tail = closed.then_some(SEP);
    for &id in words.iter().chain(tail.iter()) {
        total += next_log_probs(model, &image, &prefix)?[id];
        prefix.push(id);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptionScores {
    pub exact_match: f64,
    pub token_f1: f64,
}

/// Exact-match rate and mean bag-of-tokens F1.
pub fn eval_caption(predictions: &[Vec<usize>], references: &[Vec<usize>]) -> Result<CaptionScores> {
    if predictions.len() != references.len() {
        return Err(TdenError::contract(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let n = predictions.len().max(1) as f64;
    let em = predictions.iter().zip(references).filter(|(p, r)| p == r).count() as f64 / n;
    let f1: f64 = predictions.iter().zip(references).map(|(p, r)| token_f1(p, r)).sum::<f64>() / n;
    Ok(CaptionScores {
        exact_match: em,
        token_f1: f1,
    })
}

pub fn token_f1(pred: &[usize], reference: &[usize]) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let mut left = reference.to_vec();
    let mut overlap = 0usize;
    for t in pred {
        if let Some(pos) = left.iter().position(|x| x == t) {
            left.swap_remove(pos);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests;
