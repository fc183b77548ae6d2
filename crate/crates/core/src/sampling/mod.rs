//! Two-pass pretraining with scheduled sampling: first-pass `[MASK]` tokens
//! are replaced by ids sampled from first-pass predictions, and the
//! mask-free sequences drive a second pass.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use crate::autodiff::{kernels, Graph, Var};
use crate::data::vocab::{is_special, N_SPECIAL};
use crate::data::TokenSeq;
use crate::error::{Result, TdenError};
use crate::model::TdenModel;
use crate::proxy::{
    encode_images, encode_sentences, generation, ism_loss, loss_tden, sum_terms, understanding, LossSet,
    MaskedBatch,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    None,
    TwoPassA,
    TwoPassB,
    TwoPassC,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::TwoPassA => "two_pass_a",
            Scheme::TwoPassB => "two_pass_b",
            Scheme::TwoPassC => "two_pass_c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Scheme::None,
            "two_pass_a" => Scheme::TwoPassA,
            "two_pass_b" => Scheme::TwoPassB,
            "two_pass_c" => Scheme::TwoPassC,
            other => return Err(TdenError::Config(format!("unknown scheme `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    Multinomial,
    Argmax,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Multinomial => "multinomial",
            SamplingMode::Argmax => "argmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(SamplingMode::Multinomial),
            "argmax" => Ok(SamplingMode::Argmax),
            other => Err(TdenError::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// Per-masked-position vocabulary distributions from the first pass, batch order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PassOutputs {
    pub enc_word_dists: Option<Vec<Vec<f64>>>,
    pub dec_word_dists: Option<Vec<Vec<f64>>>,
}

/// Row-wise softmax of a logits value.
pub fn distributions(g: &Graph, logits: Var) -> Vec<Vec<f64>> {
    let t = g.value(logits);
    (0..t.rows())
        .map(|i| {
            let mut row = t.row(i).to_vec();
            kernels::softmax_in_place(&mut row);
            row
        })
        .collect()
}

/// Draws one id from `dist`, ignoring the special ids.
pub fn sample_id(dist: &[f64], mode: SamplingMode, rng: &mut impl Rng) -> Result<usize> {
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(TdenError::Numeric("sampling distribution has a non-finite or negative entry".into()));
    }
    if dist.len() <= N_SPECIAL {
        return Err(TdenError::contract("vocabulary has no non-special ids"));
    }
    let argmax = || {
        (N_SPECIAL..dist.len())
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .expect("nonempty")
    };
    match mode {
        SamplingMode::Argmax => Ok(argmax()),
        SamplingMode::Multinomial => {
            let weights = dist.iter().enumerate().map(|(i, &p)| if is_special(i) { 0.0 } else { p });
            match WeightedIndex::new(weights) {
                Ok(w) => Ok(w.sample(rng)),
                // all mass on specials
                Err(_) => Ok(argmax()),
            }
        }
    }
}

/// Replaces every masked position of each sentence with an id drawn from
/// `dists` (one distribution per masked position, batch order).
pub fn sample_sequences(
    batch: &MaskedBatch,
    dists: &[Vec<f64>],
    mode: SamplingMode,
    rng: &mut impl Rng,
) -> Result<Vec<TokenSeq>> {
    if dists.len() != batch.n_masked_words() {
        return Err(TdenError::contract(format!(
            "{} distributions for {} masked words",
            dists.len(),
            batch.n_masked_words()
        )));
    }
    let mut it = dists.iter();
    let mut out = Vec::with_capacity(batch.len());
    for item in &batch.items {
        let mut ids = item.words.input.ids().to_vec();
        for &p in &item.words.positions {
            ids[p] = sample_id(it.next().expect("counted"), mode, rng)?;
        }
        out.push(TokenSeq::from_wrapped(ids)?);
    }
    Ok(out)
}

/// S_E from the encoder distributions, then S_D from the decoder distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequences {
    pub s_e: Vec<TokenSeq>,
    pub s_d: Vec<TokenSeq>,
}

pub fn sample_replacements(
    batch: &MaskedBatch,
    pass1: &PassOutputs,
    mode: SamplingMode,
    rng: &mut impl Rng,
) -> Result<SampledSequences> {
    let need = |d: &Option<Vec<Vec<f64>>>, which: &str| {
        d.clone()
            .ok_or_else(|| TdenError::contract(format!("first pass produced no {which} distributions")))
    };
    let enc = need(&pass1.enc_word_dists, "encoder")?;
    let dec = need(&pass1.dec_word_dists, "decoder")?;
    Ok(SampledSequences {
        s_e: sample_sequences(batch, &enc, mode, rng)?,
        s_d: sample_sequences(batch, &dec, mode, rng)?,
    })
}

/// The per-step encoder/decoder switch of Two-Pass-C.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwitchState {
    /// 1 selects the cross-modal encoder for the first pass, 0 the decoder.
    pub alpha: u8,
}

impl SwitchState {
    pub fn draw(rng: &mut impl Rng) -> Self {
        SwitchState {
            alpha: u8::from(rng.random_bool(0.5)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub scheme: Scheme,
    pub losses: LossSet,
    pub sampling: SamplingMode,
    /// Fixes alpha for Two-Pass-C instead of drawing it.
    pub force_alpha: Option<u8>,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            scheme: Scheme::None,
            losses: LossSet::ALL,
            sampling: SamplingMode::Multinomial,
            force_alpha: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub total: Var,
    /// Named terms; `_2` marks second-pass terms.
    pub terms: Vec<(&'static str, Var)>,
    pub alpha: Option<u8>,
    /// Sequences fed to the second pass, if any.
    pub second_pass_inputs: Vec<TokenSeq>,
    pub sampled: Option<SampledSequences>,
}

/// One training objective evaluation for the configured scheme.
pub fn run_step(
    g: &mut Graph,
    model: &TdenModel,
    batch: &MaskedBatch,
    cfg: &StepConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    if cfg.scheme != Scheme::None && !(cfg.losses.mlm && cfg.losses.msg) {
        return Err(TdenError::Config(format!(
            "scheme {} needs both MLM and MSG enabled",
            cfg.scheme.as_str()
        )));
    }
    match cfg.scheme {
        Scheme::None => {
            let p = loss_tden(g, model, batch, cfg.losses)?;
            let total = sum_terms(g, &p.terms)?;
            Ok(StepOutput {
                total,
                terms: p.terms,
                alpha: None,
                second_pass_inputs: Vec::new(),
                sampled: None,
            })
        }
        Scheme::TwoPassA | Scheme::TwoPassB => two_pass_ab(g, model, batch, cfg, rng),
        Scheme::TwoPassC => two_pass_c(g, model, batch, cfg, rng),
    }
}

fn two_pass_ab(
    g: &mut Graph,
    model: &TdenModel,
    batch: &MaskedBatch,
    cfg: &StepConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    let l = cfg.losses;
    let p1 = loss_tden(g, model, batch, l)?;
    let outputs = PassOutputs {
        enc_word_dists: p1.word_logits.map(|v| distributions(g, v)),
        dec_word_dists: p1.decoder_logits.map(|v| distributions(g, v)),
    };
    let sampled = sample_replacements(batch, &outputs, cfg.sampling, rng)?;
    let (to_encoder, to_decoder) = match cfg.scheme {
        Scheme::TwoPassA => (&sampled.s_e, &sampled.s_d),
        _ => (&sampled.s_d, &sampled.s_e),
    };
    let mut terms = p1.terms.clone();
    let enc_in: Vec<&TokenSeq> = to_encoder.iter().collect();
    let sentences = encode_sentences(g, model, &enc_in, false)?;
    let u = understanding(g, model, batch, &sentences, &p1.images, l.mlm, l.moc)?;
    let dec_in: Vec<&TokenSeq> = to_decoder.iter().collect();
    let causal = encode_sentences(g, model, &dec_in, true)?;
    let gen = generation(g, model, batch, &causal, &p1.images)?;
    // Eq. (1) order: MLM(S_E) + MOC(S_E) + MSG(S_D); Eq. (2) lists MSG first.
    if cfg.scheme == Scheme::TwoPassA {
        terms.extend(u.mlm.map(|v| ("mlm_2", v)));
        terms.extend(u.moc.map(|v| ("moc_2", v)));
        terms.push(("msg_2", gen.msg));
    } else {
        terms.push(("msg_2", gen.msg));
        terms.extend(u.mlm.map(|v| ("mlm_2", v)));
        terms.extend(u.moc.map(|v| ("moc_2", v)));
    }
    let total = sum_terms(g, &terms)?;
    let mut second = to_encoder.clone();
    second.extend(to_decoder.iter().cloned());
    Ok(StepOutput {
        total,
        terms,
        alpha: None,
        second_pass_inputs: second,
        sampled: Some(sampled),
    })
}

fn two_pass_c(
    g: &mut Graph,
    model: &TdenModel,
    batch: &MaskedBatch,
    cfg: &StepConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    let l = cfg.losses;
    let alpha = match cfg.force_alpha {
        Some(a) if a <= 1 => a,
        Some(a) => return Err(TdenError::Config(format!("alpha must be 0 or 1, got {a}"))),
        None => SwitchState::draw(rng).alpha,
    };
    let images = encode_images(g, model, &batch.region_inputs())?;
    let masked: Vec<&TokenSeq> = batch.word_inputs();
    let mut terms = Vec::with_capacity(4);
    let second: Vec<TokenSeq>;
    let sampled;
    if alpha == 1 {
        let sentences = encode_sentences(g, model, &masked, false)?;
        let u = understanding(g, model, batch, &sentences, &images, l.mlm, l.moc)?;
        terms.extend(u.mlm.map(|v| ("mlm", v)));
        terms.extend(u.moc.map(|v| ("moc", v)));
        let dists = distributions(g, u.word_logits.expect("MLM enabled"));
        let s_e = sample_sequences(batch, &dists, cfg.sampling, rng)?;
        let refs: Vec<&TokenSeq> = s_e.iter().collect();
        let causal = encode_sentences(g, model, &refs, true)?;
        let gen = generation(g, model, batch, &causal, &images)?;
        terms.push(("msg_2", gen.msg));
        second = s_e.clone();
        sampled = SampledSequences { s_e, s_d: Vec::new() };
    } else {
        let causal = encode_sentences(g, model, &masked, true)?;
        let gen = generation(g, model, batch, &causal, &images)?;
        terms.push(("msg", gen.msg));
        let dists = match gen.masked_logits {
            Some(v) => distributions(g, v),
            None => Vec::new(),
        };
        let s_d = sample_sequences(batch, &dists, cfg.sampling, rng)?;
        let refs: Vec<&TokenSeq> = s_d.iter().collect();
        let sentences = encode_sentences(g, model, &refs, false)?;
        let u = understanding(g, model, batch, &sentences, &images, l.mlm, l.moc)?;
        terms.extend(u.mlm.map(|v| ("mlm_2", v)));
        terms.extend(u.moc.map(|v| ("moc_2", v)));
        second = s_d.clone();
        sampled = SampledSequences { s_e: Vec::new(), s_d };
    }
    if l.ism {
        let clean_regions: Vec<_> = batch.items.iter().map(|i| &i.clean_regions).collect();
        let clean_words: Vec<&TokenSeq> = batch.items.iter().map(|i| &i.original).collect();
        let clean_images = encode_images(g, model, &clean_regions)?;
        let clean_sentences = encode_sentences(g, model, &clean_words, false)?;
        terms.push(("ism", ism_loss(g, model, &clean_sentences, &clean_images)?));
    }
    let total = sum_terms(g, &terms)?;
    Ok(StepOutput {
        total,
        terms,
        alpha: Some(alpha),
        second_pass_inputs: second,
        sampled: Some(sampled),
    })
}
