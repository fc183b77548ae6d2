use crate::autodiff::{AttnMask, Graph, Tensor, Var};
use crate::data::{RegionSet, TokenSeq};
use crate::error::{Result, TdenError};

use super::params::{Group, ParamBuilder, ParamId};

/// `y = x·W + b` with `W` stored in×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: pb.normal(&format!("{name}.weight"), group, &[d_in, d_out]),
            bias: Some(pb.constant(&format!("{name}.bias"), group, &[d_out], 0.0)),
        }
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, group: Group, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: pb.normal(&format!("{name}.weight"), group, &[d_in, d_out]),
            bias: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight.index());
        let h = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b.index());
                g.add_row(h, b)
            }
            None => Ok(h),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, d: usize, eps: f64) -> Self {
        LayerNorm {
            gain: pb.constant(&format!("{name}.gain"), group, &[d], 1.0),
            bias: pb.constant(&format!("{name}.bias"), group, &[d], 0.0),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain.index()), g.param(self.bias.index()));
        g.layer_norm(x, gain, bias, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::new(pb, &format!("{name}.query"), group, d, d),
            key: Linear::new(pb, &format!("{name}.key"), group, d, d),
            value: Linear::new(pb, &format!("{name}.value"), group, d, d),
            output: Linear::new(pb, &format!("{name}.output"), group, d, d),
            heads,
        }
    }

    /// `queries` attend over `keys_values`; `mask` is Lq×Lk.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var, mask: &AttnMask) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;
        let a = g.attention(q, k, v, mask, self.heads)?;
        self.output.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, d: usize, d_ff: usize) -> Self {
        FeedForward {
            fc1: Linear::new(pb, &format!("{name}.fc1"), group, d, d_ff),
            fc2: Linear::new(pb, &format!("{name}.fc2"), group, d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, cfg: &super::ModelConfig) -> Self {
        EncoderBlock {
            ln_attn: LayerNorm::new(pb, &format!("{name}.ln_attn"), group, cfg.d_model, cfg.ln_eps),
            attn: MultiHeadAttention::new(pb, &format!("{name}.attn"), group, cfg.d_model, cfg.n_heads),
            ln_ffn: LayerNorm::new(pb, &format!("{name}.ln_ffn"), group, cfg.d_model, cfg.ln_eps),
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), group, cfg.d_model, cfg.d_ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }

    /// Output projections of both sublayers (zeroing these makes the block the identity).
    pub fn output_projections(&self) -> Vec<ParamId> {
        let mut v = self.attn.output.params();
        v.extend(self.ffn.fc2.params());
        v
    }
}

/// Causal self-attention over words, cross-attention to visual tokens, then FFN.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, cfg: &super::ModelConfig) -> Self {
        let (d, e) = (cfg.d_model, cfg.ln_eps);
        DecoderBlock {
            ln_self: LayerNorm::new(pb, &format!("{name}.ln_self"), group, d, e),
            self_attn: MultiHeadAttention::new(pb, &format!("{name}.self_attn"), group, d, cfg.n_heads),
            ln_cross: LayerNorm::new(pb, &format!("{name}.ln_cross"), group, d, e),
            cross_attn: MultiHeadAttention::new(pb, &format!("{name}.cross_attn"), group, d, cfg.n_heads),
            ln_ffn: LayerNorm::new(pb, &format!("{name}.ln_ffn"), group, d, e),
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), group, d, cfg.d_ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, words: Var, visual: Var, causal: &AttnMask) -> Result<Var> {
        if !causal.is_causal() {
            return Err(TdenError::contract("decoder self-attention mask must be causal"));
        }
        let lw = g.shape(words)[0];
        let lv = g.shape(visual)[0];
        let h = self.ln_self.forward(g, words)?;
        let a = self.self_attn.forward(g, h, h, causal)?;
        let x = g.add(words, a)?;
        let h = self.ln_cross.forward(g, x)?;
        let c = self.cross_attn.forward(g, h, visual, &AttnMask::full(lw, lv))?;
        let x = g.add(x, c)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// A stack of encoder blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
}

impl EncoderStack {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, depth: usize, cfg: &super::ModelConfig) -> Self {
        EncoderStack {
            blocks: (0..depth)
                .map(|i| EncoderBlock::new(pb, &format!("{name}.block{i}"), group, cfg))
                .collect(),
            final_ln: LayerNorm::new(pb, &format!("{name}.final_ln"), group, cfg.d_model, cfg.ln_eps),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, mask: &AttnMask) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x, mask)?;
        }
        self.final_ln.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub blocks: Vec<DecoderBlock>,
    pub final_ln: LayerNorm,
}

impl DecoderStack {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, depth: usize, cfg: &super::ModelConfig) -> Self {
        DecoderStack {
            blocks: (0..depth)
                .map(|i| DecoderBlock::new(pb, &format!("{name}.block{i}"), group, cfg))
                .collect(),
            final_ln: LayerNorm::new(pb, &format!("{name}.final_ln"), group, cfg.d_model, cfg.ln_eps),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut words: Var, visual: Var) -> Result<Var> {
        let mask = AttnMask::causal(g.shape(words)[0]);
        for b in &self.blocks {
            words = b.forward(g, words, visual, &mask)?;
        }
        self.final_ln.forward(g, words)
    }
}

/// Word-id embedding plus a learned 1D position embedding.
#[derive(Clone, Debug)]
pub struct WordEmbedding {
    pub table: ParamId,
    pub positions: ParamId,
}

impl WordEmbedding {
    pub fn new(pb: &mut ParamBuilder, group: Group, cfg: &super::ModelConfig) -> Self {
        WordEmbedding {
            table: pb.normal("word_embed.table", group, &[cfg.vocab_size, cfg.d_model]),
            positions: pb.normal("word_embed.positions", group, &[cfg.max_seq_len, cfg.d_model]),
        }
    }

    pub fn forward(&self, g: &mut Graph, tokens: &TokenSeq) -> Result<Var> {
        let table = g.param(self.table.index());
        let pos_table = g.param(self.positions.index());
        let max_len = g.shape(pos_table)[0];
        if tokens.len() > max_len {
            return Err(TdenError::Index {
                op: "embed_words position",
                index: tokens.len() - 1,
                bound: max_len,
            });
        }
        let w = g.gather_rows(table, tokens.ids())?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = g.gather_rows(pos_table, &positions)?;
        g.add(w, p)
    }
}

/// Region features and box geometry projected to the model width, with an
/// `[IMG]` row (projected mean of raw features) in front.
#[derive(Clone, Debug)]
pub struct RegionEmbedding {
    pub feature: Linear,
    pub geometry: Linear,
    pub mask_embedding: ParamId,
}

impl RegionEmbedding {
    pub fn new(pb: &mut ParamBuilder, group: Group, cfg: &super::ModelConfig) -> Self {
        RegionEmbedding {
            feature: Linear::new(pb, "region_embed.feature", group, cfg.d_region_feat, cfg.d_model),
            geometry: Linear::no_bias(pb, "region_embed.geometry", group, 5, cfg.d_model),
            mask_embedding: pb.normal("region_embed.mask", group, &[1, cfg.d_model]),
        }
    }

    pub fn forward(&self, g: &mut Graph, regions: &RegionSet, max_regions: usize) -> Result<Var> {
        let n = regions.len();
        if n == 0 {
            return Err(TdenError::contract("empty region set"));
        }
        if n > max_regions {
            return Err(TdenError::contract(format!(
                "{n} regions exceed max_regions {max_regions}"
            )));
        }
        let raw = g.constant(regions.features.clone());
        let pooled = g.mean_rows(raw)?;
        let stacked = g.concat_rows(&[pooled, raw])?;
        let projected = self.feature.forward(g, stacked)?;

        let mut geo = vec![0.0; 5];
        for b in &regions.boxes {
            geo.extend(b.to_array());
        }
        let geo = g.constant(Tensor::matrix(n + 1, 5, geo)?);
        let geo = self.geometry.forward(g, geo)?;
        let out = g.add(projected, geo)?;

        if regions.masked.iter().any(|&m| m) {
            let mut ind = vec![0.0];
            ind.extend(regions.masked.iter().map(|&m| if m { 1.0 } else { 0.0 }));
            let ind = g.constant(Tensor::matrix(n + 1, 1, ind)?);
            let me = g.param(self.mask_embedding.index());
            let m = g.matmul(ind, me)?;
            g.add(out, m)
        } else {
            Ok(out)
        }
    }
}

/// Attention pooling: a two-layer MLP scores each row, softmax over rows,
/// weighted sum, then an output projection.
#[derive(Clone, Debug)]
pub struct AttnPool {
    pub hidden: Linear,
    pub score: Linear,
    pub output: Linear,
}

impl AttnPool {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: Group, d: usize) -> Self {
        AttnPool {
            hidden: Linear::new(pb, &format!("{name}.hidden"), group, d, d),
            score: Linear::no_bias(pb, &format!("{name}.score"), group, d, 1),
            output: Linear::new(pb, &format!("{name}.output"), group, d, d),
        }
    }

    /// L×d → 1×d
    pub fn forward(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let h = self.hidden.forward(g, states)?;
        let h = g.tanh(h);
        let s = self.score.forward(g, h)?;
        let s = g.transpose(s)?;
        let w = g.softmax(s, 1)?;
        let pooled = g.matmul(w, states)?;
        self.output.forward(g, pooled)
    }
}
