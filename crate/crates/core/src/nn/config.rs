use crate::data::vocab::Vocab;
use crate::error::{Result, TdenError};

/// Where the image-sentence matching similarity is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsmPlacement {
    /// Pooled outputs of the object and sentence encoders.
    Encoder,
    /// Pooled outputs of the cross-modal encoder, one joint pass per (sentence, image) pair.
    Cross,
}

impl IsmPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            IsmPlacement::Encoder => "encoder",
            IsmPlacement::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(IsmPlacement::Encoder),
            "cross" => Ok(IsmPlacement::Cross),
            other => Err(TdenError::Config(format!("unknown ism_placement `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Block counts for the object encoder, sentence encoder, cross-modal encoder and decoder.
    pub k_object: usize,
    pub k_sentence: usize,
    pub k_cross: usize,
    pub k_decoder: usize,
    pub vocab_size: usize,
    pub n_object_classes: usize,
    pub n_attributes: usize,
    pub d_region_feat: usize,
    pub max_seq_len: usize,
    pub max_regions: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    /// One vocabulary classifier for both the MLM and MSG heads.
    pub tie_word_classifier: bool,
    pub ism_placement: IsmPlacement,
    pub ism_margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            k_object: 2,
            k_sentence: 2,
            k_cross: 2,
            k_decoder: 2,
            vocab_size: 128,
            n_object_classes: 24,
            n_attributes: 24,
            d_region_feat: 32,
            max_seq_len: 20,
            max_regions: 12,
            ln_eps: 1e-5,
            init_std: 0.02,
            tie_word_classifier: true,
            ism_placement: IsmPlacement::Encoder,
            ism_margin: 0.2,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            k_object: 1,
            k_sentence: 1,
            k_cross: 1,
            k_decoder: 1,
            vocab_size: 24,
            n_object_classes: 4,
            n_attributes: 4,
            d_region_feat: 6,
            max_seq_len: 14,
            max_regions: 4,
            ln_eps: 1e-5,
            init_std: 0.3,
            tie_word_classifier: true,
            ism_placement: IsmPlacement::Encoder,
            ism_margin: 0.2,
        }
    }

    /// Desk vocabulary and data dimensions with one narrow block per stack.
    pub fn small() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            k_object: 1,
            k_sentence: 1,
            k_cross: 1,
            k_decoder: 1,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            other => Err(TdenError::Config(format!(
                "unknown model preset `{other}` (expected desk, small or tiny)"
            ))),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_object_classes, self.n_attributes)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TdenError::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if [self.k_object, self.k_sentence, self.k_cross, self.k_decoder].contains(&0) {
            return fail("every block count must be at least 1".into());
        }
        let need = self.vocab().required_size();
        if self.vocab_size < need {
            return fail(format!(
                "vocab_size {} cannot hold the {} ids the corpus uses",
                self.vocab_size, need
            ));
        }
        // [CLS] what color is the <class> + the <attr> <class> <pred> the <attr> <class> [SEP]
        if self.max_seq_len < 14 {
            return fail("max_seq_len must be at least 14".into());
        }
        if self.max_regions < 2 || self.n_object_classes < 2 || self.n_attributes < 4 {
            return fail("need at least 2 regions and classes and 4 attributes".into());
        }
        if self.d_region_feat < 2 || self.d_model < 2 || self.d_ff == 0 {
            return fail("degenerate widths".into());
        }
        Ok(())
    }
}
