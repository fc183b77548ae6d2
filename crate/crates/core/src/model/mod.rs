//! The two-stream decoupled encoder-decoder.

use crate::autodiff::{AttnMask, Graph, Var};
use crate::data::{RegionSet, TokenSeq};
use crate::error::{Result, TdenError};
use crate::nn::{
    AttnPool, DecoderStack, EncoderStack, Group, Linear, ModelConfig, ParamBuilder, ParamStore,
    RegionEmbedding, WordEmbedding,
};
use crate::rng::{rng_for, tag};

/// Counter names bumped on the graph once per batched stack pass.
pub mod counter {
    pub const OBJECT_ENCODER: &str = "object_encoder";
    pub const SENTENCE_ENCODER: &str = "sentence_encoder";
    pub const CROSS_ENCODER: &str = "cross_encoder";
    pub const CROSS_DECODER: &str = "cross_decoder";
    /// Joint passes spent on mismatched pairs when matching runs through the cross-modal encoder.
    pub const CROSS_ENCODER_ISM: &str = "cross_encoder_ism";
}

/// Sentence-encoder and object-encoder outputs for one pair.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    /// (N_S+2)×d
    pub sentence: Var,
    /// (N_I+1)×d
    pub image: Var,
}

#[derive(Clone, Debug)]
pub struct TdenModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub region_embed: RegionEmbedding,
    pub object_encoder: EncoderStack,
    pub word_embed: WordEmbedding,
    pub sentence_encoder: EncoderStack,
    pub cross_encoder: EncoderStack,
    pub cross_decoder: DecoderStack,
    pub word_classifier: Linear,
    /// Separate generation classifier when `tie_word_classifier` is off.
    pub msg_classifier: Option<Linear>,
    pub object_classifier: Linear,
    pub ism_sentence_pool: AttnPool,
    pub ism_image_pool: AttnPool,
}

impl TdenModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, rng_for(seed, &[tag::INIT]), config.init_std);
        let c = &config;
        let region_embed = RegionEmbedding::new(&mut pb, Group::ObjectEncoder, c);
        let object_encoder = EncoderStack::new(&mut pb, "object_encoder", Group::ObjectEncoder, c.k_object, c);
        let word_embed = WordEmbedding::new(&mut pb, Group::SentenceEncoder, c);
        let sentence_encoder =
            EncoderStack::new(&mut pb, "sentence_encoder", Group::SentenceEncoder, c.k_sentence, c);
        let cross_encoder = EncoderStack::new(&mut pb, "cross_encoder", Group::CrossEncoder, c.k_cross, c);
        let cross_decoder = DecoderStack::new(&mut pb, "cross_decoder", Group::CrossDecoder, c.k_decoder, c);
        let word_classifier =
            Linear::new(&mut pb, "word_classifier", Group::WordClassifier, c.d_model, c.vocab_size);
        let msg_classifier = (!c.tie_word_classifier).then(|| {
            Linear::new(&mut pb, "msg_classifier", Group::WordClassifier, c.d_model, c.vocab_size)
        });
        let object_classifier = Linear::new(
            &mut pb,
            "object_classifier",
            Group::ObjectClassifier,
            c.d_model,
            c.n_object_classes,
        );
        let ism_sentence_pool = AttnPool::new(&mut pb, "ism.sentence_pool", Group::IsmPool, c.d_model);
        let ism_image_pool = AttnPool::new(&mut pb, "ism.image_pool", Group::IsmPool, c.d_model);
        Ok(TdenModel {
            config,
            params,
            region_embed,
            object_encoder,
            word_embed,
            sentence_encoder,
            cross_encoder,
            cross_decoder,
            word_classifier,
            msg_classifier,
            object_classifier,
            ism_sentence_pool,
            ism_image_pool,
        })
    }

    /// Graph with every parameter tracked for gradients.
    pub fn graph(&self) -> Graph {
        Graph::new(self.params.tensors())
    }

    /// Graph for inference.
    pub fn frozen_graph(&self) -> Graph {
        Graph::frozen(self.params.tensors())
    }

    /// `[IMG]` + regions through K_I encoder blocks with unrestricted attention.
    pub fn encode_objects(&self, g: &mut Graph, regions: &RegionSet) -> Result<Var> {
        let x = self.region_embed.forward(g, regions, self.config.max_regions)?;
        let l = regions.len() + 1;
        self.object_encoder.forward(g, x, &AttnMask::full(l, l))
    }

    /// `[CLS] … [SEP]` through K_S encoder blocks. With `causal`, row i sees
    /// only rows ≤ i; this is the view the decoder consumes.
    pub fn encode_sentence(&self, g: &mut Graph, tokens: &TokenSeq, causal: bool) -> Result<Var> {
        let x = self.word_embed.forward(g, tokens)?;
        let l = tokens.len();
        let mask = if causal {
            AttnMask::causal(l)
        } else {
            AttnMask::full(l, l)
        };
        self.sentence_encoder.forward(g, x, &mask)
    }

    pub fn encode_pair(&self, g: &mut Graph, tokens: &TokenSeq, regions: &RegionSet) -> Result<EncodedPair> {
        Ok(EncodedPair {
            sentence: self.encode_sentence(g, tokens, false)?,
            image: self.encode_objects(g, regions)?,
        })
    }

    /// `[H_S, H_I]` through K_E blocks with unrestricted cross-modal attention.
    /// Output rows: sentence rows first, then `[IMG]` and the regions.
    pub fn cross_encode(&self, g: &mut Graph, pair: EncodedPair) -> Result<Var> {
        let ws = g.shape(pair.sentence)[1];
        let wi = g.shape(pair.image)[1];
        if ws != self.config.d_model || wi != self.config.d_model {
            return Err(TdenError::contract(format!(
                "cross_encode width mismatch: sentence {ws}, image {wi}, model {}",
                self.config.d_model
            )));
        }
        let x = g.concat_rows(&[pair.sentence, pair.image])?;
        let l = g.shape(x)[0];
        self.cross_encoder.forward(g, x, &AttnMask::full(l, l))
    }

    /// K_D decoder blocks: causal self-attention over `word_states`, cross-attention to `visual`.
    pub fn cross_decode(&self, g: &mut Graph, word_states: Var, visual: Var) -> Result<Var> {
        self.cross_decoder.forward(g, word_states, visual)
    }

    /// Vocabulary logits for the understanding head.
    pub fn logits_words(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.word_classifier.forward(g, states)
    }

    /// Vocabulary logits for the generation head (shared with MLM unless untied).
    pub fn logits_generation(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.msg_classifier
            .as_ref()
            .unwrap_or(&self.word_classifier)
            .forward(g, states)
    }

    pub fn logits_objects(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.object_classifier.forward(g, states)
    }

    /// Unit-normalized pooled sentence vector, 1×d.
    pub fn pool_sentence(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let p = self.ism_sentence_pool.forward(g, states)?;
        g.l2_normalize_rows(p)
    }

    /// Unit-normalized pooled image vector, 1×d.
    pub fn pool_image(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let p = self.ism_image_pool.forward(g, states)?;
        g.l2_normalize_rows(p)
    }
}
