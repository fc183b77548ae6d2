//! Masking and the four pretraining objectives: MLM, MOC, ISM and MSG.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::vocab::MASK;
use crate::data::{RegionSet, TokenSeq};
use crate::error::{Result, TdenError};
use crate::model::{counter, EncodedPair, TdenModel};
use crate::data::{gen_corpus, SynthConfig};
use crate::nn::{IsmPlacement, ModelConfig};
use crate::rng::{rng_for, tag};

pub const DEFAULT_MASK_PROB: f64 = 0.15;

/// Word-side masking result for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedWords {
    pub input: TokenSeq,
    /// Indices into the wrapped sequence (never 0 or the last index).
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Region-side masking result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRegions {
    pub input: RegionSet,
    /// Region indices (the `[IMG]` row is never masked).
    pub positions: Vec<usize>,
    /// Detector distributions at the masked regions, k×C.
    pub targets: Tensor,
}

/// Each non-special token becomes `[MASK]` independently with probability `p`.
pub fn mask_words(tokens: &TokenSeq, p: f64, rng: &mut impl Rng) -> MaskedWords {
    let mut ids = tokens.ids().to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for pos in 1..ids.len() - 1 {
        if rng.random::<f64>() < p {
            positions.push(pos);
            targets.push(ids[pos]);
            ids[pos] = MASK;
        }
    }
    MaskedWords {
        input: TokenSeq::from_wrapped(ids).expect("specials untouched"),
        positions,
        targets,
    }
}

/// Each region is masked independently with probability `p`: its features are
/// zeroed, its geometry kept, and its detector distribution becomes the target.
pub fn mask_regions(regions: &RegionSet, p: f64, rng: &mut impl Rng) -> MaskedRegions {
    let positions: Vec<usize> = (0..regions.len()).filter(|_| rng.random::<f64>() < p).collect();
    region_mask_at(regions, positions)
}

fn region_mask_at(regions: &RegionSet, positions: Vec<usize>) -> MaskedRegions {
    let mut input = regions.clone();
    let f = regions.features.cols();
    let c = regions.detector.cols();
    let mut targets = Vec::with_capacity(positions.len() * c);
    for &r in &positions {
        input.features.data_mut()[r * f..(r + 1) * f].fill(0.0);
        input.masked[r] = true;
        targets.extend_from_slice(regions.detector.row(r));
    }
    let k = positions.len();
    MaskedRegions {
        input,
        positions,
        targets: Tensor::matrix(k, c, targets).expect("sized"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedItem {
    pub original: TokenSeq,
    pub clean_regions: RegionSet,
    pub words: MaskedWords,
    pub regions: MaskedRegions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub items: Vec<MaskedItem>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_masked_words(&self) -> usize {
        self.items.iter().map(|i| i.words.positions.len()).sum()
    }

    pub fn n_masked_regions(&self) -> usize {
        self.items.iter().map(|i| i.regions.positions.len()).sum()
    }

    /// All masked word targets in batch order.
    pub fn word_targets(&self) -> Vec<usize> {
        self.items.iter().flat_map(|i| i.words.targets.iter().copied()).collect()
    }

    pub fn word_inputs(&self) -> Vec<&TokenSeq> {
        self.items.iter().map(|i| &i.words.input).collect()
    }

    pub fn region_inputs(&self) -> Vec<&RegionSet> {
        self.items.iter().map(|i| &i.regions.input).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub word_prob: f64,
    pub region_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            word_prob: DEFAULT_MASK_PROB,
            region_prob: DEFAULT_MASK_PROB,
        }
    }
}

/// Masks every pair; when a probability is positive but nothing of that
/// modality was drawn across the batch, one eligible position is masked.
pub fn mask_batch(pairs: &[(&TokenSeq, &RegionSet)], cfg: &MaskConfig, rng: &mut impl Rng) -> MaskedBatch {
    let mut items: Vec<MaskedItem> = pairs
        .iter()
        .map(|&(tokens, regions)| MaskedItem {
            original: tokens.clone(),
            clean_regions: regions.clone(),
            words: mask_words(tokens, cfg.word_prob, rng),
            regions: mask_regions(regions, cfg.region_prob, rng),
        })
        .collect();

    let none_words = items.iter().all(|i| i.words.positions.is_empty());
    if cfg.word_prob > 0.0 && none_words {
        let eligible: Vec<(usize, usize)> = items
            .iter()
            .enumerate()
            .flat_map(|(k, i)| (1..=i.original.n_words()).map(move |p| (k, p)))
            .collect();
        if let Some(&(k, p)) = eligible.choose(rng) {
            let it = &mut items[k];
            let id = it.original.ids()[p];
            it.words = MaskedWords {
                input: it.original.with_replacement(p, MASK),
                positions: vec![p],
                targets: vec![id],
            };
        }
    }
    let none_regions = items.iter().all(|i| i.regions.positions.is_empty());
    if cfg.region_prob > 0.0 && none_regions && !items.is_empty() {
        let eligible: Vec<(usize, usize)> = items
            .iter()
            .enumerate()
            .flat_map(|(k, i)| (0..i.clean_regions.len()).map(move |r| (k, r)))
            .collect();
        let &(k, r) = eligible.choose(rng).expect("regions are nonempty");
        items[k].regions = region_mask_at(&items[k].clean_regions, vec![r]);
    }
    MaskedBatch { items }
}

/// Which of the four objectives contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSet {
    pub mlm: bool,
    pub moc: bool,
    pub ism: bool,
    pub msg: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        mlm: true,
        moc: true,
        ism: true,
        msg: true,
    };

    pub fn understanding(&self) -> bool {
        self.mlm || self.moc
    }
}

impl Default for LossSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// Runs the object encoder over every image of the batch.
pub fn encode_images(g: &mut Graph, model: &TdenModel, regions: &[&RegionSet]) -> Result<Vec<Var>> {
    g.bump(counter::OBJECT_ENCODER);
    regions.iter().map(|r| model.encode_objects(g, r)).collect()
}

/// Runs the sentence encoder over every sentence of the batch.
pub fn encode_sentences(g: &mut Graph, model: &TdenModel, seqs: &[&TokenSeq], causal: bool) -> Result<Vec<Var>> {
    g.bump(counter::SENTENCE_ENCODER);
    seqs.iter().map(|s| model.encode_sentence(g, s, causal)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct UnderstandingOut {
    pub mlm: Option<Var>,
    pub moc: Option<Var>,
    /// Vocabulary logits at every masked word position, batch order.
    pub word_logits: Option<Var>,
}

/// Cross-modal encoder pass with the MLM and MOC heads. `sentences` and
/// `images` are encoder outputs aligned with `batch.items`.
pub fn understanding(
    g: &mut Graph,
    model: &TdenModel,
    batch: &MaskedBatch,
    sentences: &[Var],
    images: &[Var],
    mlm: bool,
    moc: bool,
) -> Result<UnderstandingOut> {
    if mlm && batch.n_masked_words() == 0 {
        return Err(TdenError::contract("MLM needs at least one masked word"));
    }
    if moc && batch.n_masked_regions() == 0 {
        return Err(TdenError::contract("MOC needs at least one masked region"));
    }
    g.bump(counter::CROSS_ENCODER);
    let mut word_rows = Vec::new();
    let mut region_rows = Vec::new();
    for (k, item) in batch.items.iter().enumerate() {
        let joint = model.cross_encode(
            g,
            EncodedPair {
                sentence: sentences[k],
                image: images[k],
            },
        )?;
        let ls = item.words.input.len();
        if mlm && !item.words.positions.is_empty() {
            word_rows.push(g.gather_rows(joint, &item.words.positions)?);
        }
        if moc && !item.regions.positions.is_empty() {
            let rows: Vec<usize> = item.regions.positions.iter().map(|r| ls + 1 + r).collect();
            region_rows.push(g.gather_rows(joint, &rows)?);
        }
    }
    let mut out = UnderstandingOut {
        mlm: None,
        moc: None,
        word_logits: None,
    };
    if mlm {
        let states = g.concat_rows(&word_rows)?;
        let logits = model.logits_words(g, states)?;
        out.mlm = Some(g.cross_entropy(logits, &batch.word_targets(), None)?);
        out.word_logits = Some(logits);
    }
    if moc {
        let states = g.concat_rows(&region_rows)?;
        let logits = model.logits_objects(g, states)?;
        let targets: Vec<&Tensor> = batch.items.iter().map(|i| &i.regions.targets).collect();
        let c = model.config.n_object_classes;
        let mut flat = Vec::new();
        for t in &targets {
            flat.extend_from_slice(t.data());
        }
        let target = Tensor::matrix(flat.len() / c, c, flat)?;
        out.moc = Some(g.kl_divergence(logits, &target)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct GenerationOut {
    pub msg: Var,
    /// Decoder logits predicting each masked word position, batch order.
    pub masked_logits: Option<Var>,
}

/// Decoder pass with the MSG head. `causal_sentences` come from the sentence
/// encoder in causal mode; inputs are `[CLS] w_1 … w_N`, targets are the
/// original `w_1 … w_N [SEP]`.
pub fn generation(
    g: &mut Graph,
    model: &TdenModel,
    batch: &MaskedBatch,
    causal_sentences: &[Var],
    images: &[Var],
) -> Result<GenerationOut> {
    g.bump(counter::CROSS_DECODER);
    let mut states = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut masked_rows = Vec::new();
    let mut offset = 0;
    for (k, item) in batch.items.iter().enumerate() {
        let n = item.original.n_words();
        let inputs = g.slice_rows(causal_sentences[k], 0, n + 1)?;
        states.push(model.cross_decode(g, inputs, images[k])?);
        targets.extend_from_slice(&item.original.ids()[1..]);
        masked_rows.extend(item.words.positions.iter().map(|p| offset + p - 1));
        offset += n + 1;
    }
    let all = g.concat_rows(&states)?;
    let logits = model.logits_generation(g, all)?;
    let msg = g.cross_entropy(logits, &targets, None)?;
    let masked_logits = if masked_rows.is_empty() {
        None
    } else {
        Some(g.gather_rows(logits, &masked_rows)?)
    };
    Ok(GenerationOut { msg, masked_logits })
}

/// B×B similarity matrix, entry (i, j) = sentence i against image j.
pub fn ism_similarity(g: &mut Graph, model: &TdenModel, sentences: &[Var], images: &[Var]) -> Result<Var> {
    match model.config.ism_placement {
        IsmPlacement::Encoder => {
            let s = sentences
                .iter()
                .map(|&h| model.pool_sentence(g, h))
                .collect::<Result<Vec<_>>>()?;
            let v = images
                .iter()
                .map(|&h| model.pool_image(g, h))
                .collect::<Result<Vec<_>>>()?;
            let s = g.concat_rows(&s)?;
            let v = g.concat_rows(&v)?;
            let vt = g.transpose(v)?;
            g.matmul(s, vt)
        }
        IsmPlacement::Cross => {
            let b = sentences.len();
            g.bump(counter::CROSS_ENCODER_ISM);
            let mut entries = Vec::with_capacity(b * b);
            for &sent in sentences {
                let ls = g.shape(sent)[0];
                for &img in images {
                    let joint = model.cross_encode(g, EncodedPair { sentence: sent, image: img })?;
                    let l = g.shape(joint)[0];
                    let words = g.slice_rows(joint, 0, ls)?;
                    let visual = g.slice_rows(joint, ls, l)?;
                    let s = model.pool_sentence(g, words)?;
                    let v = model.pool_image(g, visual)?;
                    let p = g.mul(s, v)?;
                    let sim = g.sum(p);
                    entries.push(g.reshape(sim, &[1, 1])?);
                }
            }
            let col = g.concat_rows(&entries)?;
            g.reshape(col, &[b, b])
        }
    }
}

/// Bidirectional in-batch triplet ranking loss over the ISM similarities.
pub fn ism_loss(g: &mut Graph, model: &TdenModel, sentences: &[Var], images: &[Var]) -> Result<Var> {
    if sentences.len() < 2 {
        return Err(TdenError::contract(format!(
            "ISM needs a batch of at least 2 pairs, got {}",
            sentences.len()
        )));
    }
    let sim = ism_similarity(g, model, sentences, images)?;
    g.ranking_hinge(sim, model.config.ism_margin)
}

/// Everything produced by one standard (single) pass over a masked batch.
#[derive(Clone, Debug)]
pub struct PassOne {
    /// Named loss terms in a fixed order: mlm, moc, ism, msg (enabled ones only).
    pub terms: Vec<(&'static str, Var)>,
    pub images: Vec<Var>,
    pub word_logits: Option<Var>,
    pub decoder_logits: Option<Var>,
}

/// L_TDEN: one pass over the masked batch with every enabled objective.
pub fn loss_tden(g: &mut Graph, model: &TdenModel, batch: &MaskedBatch, losses: LossSet) -> Result<PassOne> {
    let images = encode_images(g, model, &batch.region_inputs())?;
    let inputs = batch.word_inputs();
    let mut terms = Vec::with_capacity(4);
    let mut word_logits = None;
    let mut decoder_logits = None;
    let need_bidir = losses.understanding() || losses.ism;
    let sentences = if need_bidir {
        encode_sentences(g, model, &inputs, false)?
    } else {
        Vec::new()
    };
    if losses.understanding() {
        let u = understanding(g, model, batch, &sentences, &images, losses.mlm, losses.moc)?;
        word_logits = u.word_logits;
        terms.extend(u.mlm.map(|v| ("mlm", v)));
        terms.extend(u.moc.map(|v| ("moc", v)));
    }
    if losses.ism {
        terms.push(("ism", ism_loss(g, model, &sentences, &images)?));
    }
    if losses.msg {
        let causal = encode_sentences(g, model, &inputs, true)?;
        let gen = generation(g, model, batch, &causal, &images)?;
        decoder_logits = gen.masked_logits;
        terms.push(("msg", gen.msg));
    }
    if terms.is_empty() {
        return Err(TdenError::contract("no objective enabled"));
    }
    Ok(PassOne {
        terms,
        images,
        word_logits,
        decoder_logits,
    })
}

/// Left-to-right sum of named terms.
pub fn sum_terms(g: &mut Graph, terms: &[(&'static str, Var)]) -> Result<Var> {
    let vars: Vec<Var> = terms.iter().map(|t| t.1).collect();
    g.add_all(&vars)
}

/// Mean fresh-model MLM, MOC and MSG losses over `n_models` initialization seeds, each
/// scored on its own 32-pair batch with one-hot region targets cycling over the classes.
pub fn untrained_loss_means(config: &ModelConfig, n_models: u64) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    for seed in 0..n_models {
        let model = TdenModel::new(config.clone(), seed)?;
        let corpus = gen_corpus(&SynthConfig::for_model(config), 1000 + seed, 32, 0, 0)?;
        let pairs: Vec<(TokenSeq, RegionSet)> =
            corpus.train.iter().map(|i| (i.record.tokens(), i.record.regions.clone())).collect();
        let refs: Vec<(&TokenSeq, &RegionSet)> = pairs.iter().map(|(t, r)| (t, r)).collect();
        let mut batch = mask_batch(&refs, &MaskConfig::default(), &mut rng_for(seed, &[tag::MASKING]));
        let mut k = 0;
        for item in &mut batch.items {
            let t = &mut item.regions.targets;
            let c = t.cols();
            for row in t.data_mut().chunks_mut(c) {
                row.fill(0.0);
                row[k % c] = 1.0;
                k += 1;
            }
        }
        let mut g = model.frozen_graph();
        let p = loss_tden(&mut g, &model, &batch, LossSet { ism: false, ..LossSet::ALL })?;
        for (slot, name) in ["mlm", "moc", "msg"].iter().enumerate() {
            let v = p.terms.iter().find(|t| t.0 == *name).map(|t| g.scalar(t.1));
            sum[slot] += v.ok_or_else(|| TdenError::Contract(format!("missing `{name}` term")))?;
        }
    }
    Ok(sum.map(|s| s / n_models as f64))
}
