//! Finite-difference verification of every tape op, every model block and the
//! full pretraining objective.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{grad_check, AttnMask, GradCheckConfig, Graph, Tensor, Var};
use crate::data::{gen_corpus, DatasetRecord, SynthConfig, TokenSeq};
use crate::downstream::{classification_logits, TaskHead, TaskKind};
use crate::error::Result;
use crate::model::TdenModel;
use crate::nn::ModelConfig;
use crate::proxy::{loss_tden, mask_batch, LossSet, MaskConfig};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Worst relative error over all cases.
pub fn suite_max(cases: &[SuiteCase]) -> f64 {
    cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}

fn random(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    let mut rng = rng_for(seed, &[0x6772_6164, tag]);
    let n = shape.iter().product();
    let d = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(&mut rng)).collect()).expect("sized")
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output entry gets a distinct weight.
fn probe(g: &mut Graph, x: Var, seed: u64, tag: u64) -> Result<Var> {
    let w = random(g.shape(x), seed, 1000 + tag);
    let w = g.constant(w);
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

type Case<'a> = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph) -> Result<Var> + 'a>);

fn op_cases(seed: u64) -> Vec<Case<'static>> {
    let r = move |shape: &[usize], t: u64| random(shape, seed, t);
    let soft = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.25, 0.15], vec![0.5, 0.0, 0.25, 0.25, 0.0]]).expect("rows");
    let bce_t = Tensor::from_rows(&[vec![1.0, 0.0, 0.3], vec![0.0, 1.0, 0.5]]).expect("rows");
    let positive = |mut t: Tensor| {
        t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        t
    };
    vec![
        ("op.matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(0), g.param(1));
            let y = g.matmul(a, b)?;
            probe(g, y, seed, 1)
        })),
        ("op.add", vec![r(&[3, 4], 3), r(&[3, 4], 4)], Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(0), g.param(1));
            let y = g.add(a, b)?;
            probe(g, y, seed, 2)
        })),
        ("op.add_row", vec![r(&[3, 4], 5), r(&[4], 6)], Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(0), g.param(1));
            let y = g.add_row(a, b)?;
            probe(g, y, seed, 3)
        })),
        ("op.mul", vec![r(&[3, 4], 7), r(&[3, 4], 8)], Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(0), g.param(1));
            let y = g.mul(a, b)?;
            probe(g, y, seed, 4)
        })),
        ("op.scale", vec![r(&[3, 4], 9)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let y = g.scale(a, -1.7);
            probe(g, y, seed, 5)
        })),
        ("op.sum_mean", vec![r(&[3, 4], 10)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let sq = g.mul(a, a)?;
            let s = g.sum(sq);
            let m = g.mean(a);
            g.add_all(&[s, m])
        })),
        ("op.gelu", vec![r(&[3, 4], 11)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let y = g.gelu(a);
            probe(g, y, seed, 6)
        })),
        ("op.tanh", vec![r(&[3, 4], 12)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let y = g.tanh(a);
            probe(g, y, seed, 7)
        })),
        ("op.relu", vec![r(&[3, 4], 13)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let y = g.relu(a);
            probe(g, y, seed, 8)
        })),
        ("op.softmax", vec![r(&[3, 4], 14)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let rows = g.softmax(a, 1)?;
            let cols = g.softmax(a, 0)?;
            let y = g.add(rows, cols)?;
            probe(g, y, seed, 9)
        })),
        ("op.layer_norm", vec![r(&[3, 6], 15), r(&[6], 16), r(&[6], 17)], Box::new(move |g: &mut Graph| {
            let (x, gain, bias) = (g.param(0), g.param(1), g.param(2));
            let y = g.layer_norm(x, gain, bias, 1e-5)?;
            probe(g, y, seed, 10)
        })),
        ("op.rows", vec![r(&[4, 3], 18), r(&[2, 3], 19)], Box::new(move |g: &mut Graph| {
            let (a, b) = (g.param(0), g.param(1));
            let cat = g.concat_rows(&[a, b])?;
            let gathered = g.gather_rows(cat, &[5, 0, 0, 3])?;
            let sliced = g.slice_rows(cat, 1, 5)?;
            let y = g.add(gathered, sliced)?;
            let mean = g.mean_rows(y)?;
            let p1 = probe(g, y, seed, 11)?;
            let p2 = probe(g, mean, seed, 12)?;
            g.add(p1, p2)
        })),
        ("op.reshape_transpose", vec![r(&[2, 6], 20)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let y = g.reshape(a, &[3, 4])?;
            let t = g.transpose(y)?;
            probe(g, t, seed, 13)
        })),
        ("op.attention", vec![r(&[4, 8], 21), r(&[5, 8], 22), r(&[5, 8], 23)], Box::new(move |g: &mut Graph| {
            let mask = AttnMask::from_fn(4, 5, |i, j| j <= i + 1);
            let (q, k, v) = (g.param(0), g.param(1), g.param(2));
            let y = g.attention(q, k, v, &mask, 2)?;
            probe(g, y, seed, 14)
        })),
        ("op.l2_normalize_rows", vec![r(&[3, 4], 24)], Box::new(move |g: &mut Graph| {
            let a = g.param(0);
            let y = g.l2_normalize_rows(a)?;
            probe(g, y, seed, 15)
        })),
        ("op.cross_entropy", vec![r(&[3, 5], 25)], Box::new(move |g: &mut Graph| {
            let z = g.param(0);
            g.cross_entropy(z, &[1, 4, 0], Some(&[1.0, 0.5, 2.0]))
        })),
        ("op.kl_divergence", vec![r(&[2, 5], 26)], Box::new(move |g: &mut Graph| {
            let z = g.param(0);
            g.kl_divergence(z, &soft)
        })),
        ("op.ranking_hinge", vec![r(&[4, 4], 27)], Box::new(move |g: &mut Graph| {
            let s = g.param(0);
            let s = g.scale(s, 0.1);
            g.ranking_hinge(s, 0.2)
        })),
        ("op.bce_with_logits", vec![r(&[2, 3], 28)], Box::new(move |g: &mut Graph| {
            let z = g.param(0);
            g.bce_with_logits(z, &bce_t)
        })),
        ("op.quotient_path", vec![positive(r(&[2, 3], 29))], Box::new(move |g: &mut Graph| {
            // normalization divides by a parameter-dependent norm
            let a = g.param(0);
            let n = g.l2_normalize_rows(a)?;
            let y = g.mul(n, a)?;
            probe(g, y, seed, 16)
        })),
    ]
}

/// Runs every case on `config` (normally the tiny preset). Block and loss cases
/// differentiate with respect to every model parameter.
pub fn gradient_suite(config: &ModelConfig, seed: u64) -> Result<Vec<SuiteCase>> {
    let check_cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut out = Vec::new();
    let mut run = |name: &str, params: &[Tensor], f: &dyn Fn(&mut Graph) -> Result<Var>| -> Result<()> {
        let rep = grad_check(f, params, &check_cfg)?;
        out.push(SuiteCase {
            name: name.to_string(),
            max_rel_error: rep.max_rel_error,
            coords_checked: rep.coords_checked,
        });
        Ok(())
    };
    for (name, params, f) in op_cases(seed) {
        run(name, &params, &*f)?;
    }

    let mut model = TdenModel::new(config.clone(), seed)?;
    let head = TaskHead::attach(&mut model, TaskKind::Classification, seed);
    let m = &model;
    let corpus = gen_corpus(&SynthConfig::for_model(config), seed, 4, 0, 0)?;
    let recs: Vec<DatasetRecord> = corpus.train.iter().map(|i| i.record.clone()).collect();
    let rec = &recs[0];
    let tokens = rec.tokens();
    let params = m.params.tensors();
    let d = config.d_model;
    let l = tokens.len();

    run("block.word_embedding", params, &|g| {
        let x = m.word_embed.forward(g, &tokens)?;
        probe(g, x, seed, 20)
    })?;
    run("block.region_embedding", params, &|g| {
        let x = m.region_embed.forward(g, &rec.regions, config.max_regions)?;
        probe(g, x, seed, 21)
    })?;
    run("block.encoder", params, &|g| {
        let x = m.word_embed.forward(g, &tokens)?;
        let y = m.sentence_encoder.blocks[0].forward(g, x, &AttnMask::full(l, l))?;
        probe(g, y, seed, 22)
    })?;
    run("block.decoder", params, &|g| {
        let x = m.word_embed.forward(g, &tokens)?;
        let v = m.region_embed.forward(g, &rec.regions, config.max_regions)?;
        let y = m.cross_decoder.blocks[0].forward(g, x, v, &AttnMask::causal(l))?;
        probe(g, y, seed, 23)
    })?;
    run("stack.object_encoder", params, &|g| {
        let y = m.encode_objects(g, &rec.regions)?;
        probe(g, y, seed, 24)
    })?;
    run("stack.sentence_encoder", params, &|g| {
        let y = m.encode_sentence(g, &tokens, false)?;
        probe(g, y, seed, 25)
    })?;
    run("stack.cross_encoder", params, &|g| {
        let pair = m.encode_pair(g, &tokens, &rec.regions)?;
        let y = m.cross_encode(g, pair)?;
        probe(g, y, seed, 26)
    })?;
    run("stack.cross_decoder", params, &|g| {
        let s = m.encode_sentence(g, &tokens, true)?;
        let v = m.encode_objects(g, &rec.regions)?;
        let y = m.cross_decode(g, s, v)?;
        let z = m.logits_generation(g, y)?;
        probe(g, z, seed, 27)
    })?;
    run("block.attention_pool", params, &|g| {
        let s = m.encode_sentence(g, &tokens, false)?;
        let p = m.pool_sentence(g, s)?;
        assert_eq!(g.shape(p)[1], d);
        probe(g, p, seed, 28)
    })?;
    if let TaskHead::Classification { pool, output } = &head {
        let ann = &corpus.train[0].annotation;
        run("block.joint_pool_head", params, &|g| {
            let z = classification_logits(g, m, pool, output, rec, ann)?;
            probe(g, z, seed, 29)
        })?;
    }
    let pairs: Vec<(TokenSeq, _)> = recs.iter().map(|r| (r.tokens(), r.regions.clone())).collect();
    let refs: Vec<_> = pairs.iter().map(|(t, r)| (t, r)).collect();
    let batch = mask_batch(&refs, &MaskConfig::default(), &mut rng_for(seed, &[0x6d61_736b]));
    run("loss.tden", params, &|g| {
        let p = loss_tden(g, m, &batch, LossSet::ALL)?;
        crate::proxy::sum_terms(g, &p.terms)
    })?;
    Ok(out)
}
