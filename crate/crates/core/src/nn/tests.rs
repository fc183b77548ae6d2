use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, AttnMask, GradCheckConfig, Graph, Tensor};
use crate::data::{BoxGeometry, RegionSet, TokenSeq};

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store_with<T>(seed: u64, std: f64, build: impl FnOnce(&mut ParamBuilder) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, ChaCha8Rng::seed_from_u64(seed), std);
    let out = build(&mut pb);
    (store, out)
}

fn linear_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (r, k, n) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0; r * n];
    for i in 0..r {
        for j in 0..n {
            let mut s = b.data()[j];
            for t in 0..k {
                s += x.get(i, t) * w.get(t, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn attention_over_single_key_returns_projected_value() {
    let d = 8;
    let (store, mha) = store_with(1, 0.3, |pb| MultiHeadAttention::new(pb, "mha", Group::Head, d, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random_matrix(&mut rng, 3, d);
    let kv = random_matrix(&mut rng, 1, d);
    let mut g = Graph::frozen(store.tensors());
    let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
    let out = mha.forward(&mut g, qv, kvv, &AttnMask::full(3, 1)).unwrap();

    let t = |id: ParamId| store.tensor(id).clone();
    let v = Tensor::matrix(
        1,
        d,
        linear_oracle(&kv, &t(mha.value.weight), &t(mha.value.bias.unwrap())),
    )
    .unwrap();
    let o = linear_oracle(&v, &t(mha.output.weight), &t(mha.output.bias.unwrap()));
    for i in 0..3 {
        for j in 0..d {
            assert!((g.value(out).get(i, j) - o[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random_matrix(&mut rng, 2, 4);
    let row = random_matrix(&mut rng, 1, 4);
    let k = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec(), row.data().to_vec()]).unwrap();
    let v = random_matrix(&mut rng, 3, 4);
    let mut g = Graph::frozen(&[]);
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, &AttnMask::full(2, 3), 2).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            let mean = (0..3).map(|r| v.get(r, j)).sum::<f64>() / 3.0;
            assert!((g.value(out).get(i, j) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_head_attention_matches_per_head_loop() {
    let (d, h, l) = (8, 2, 4);
    let (store, mha) = store_with(4, 0.4, |pb| MultiHeadAttention::new(pb, "mha", Group::Head, d, h));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(&mut rng, l, d);
    let mut g = Graph::frozen(store.tensors());
    let xv = g.constant(x.clone());
    let out = mha.forward(&mut g, xv, xv, &AttnMask::full(l, l)).unwrap();

    let t = |lin: &Linear| (store.tensor(lin.weight).clone(), store.tensor(lin.bias.unwrap()).clone());
    let proj = |lin: &Linear, x: &Tensor| {
        let (w, b) = t(lin);
        Tensor::matrix(x.rows(), w.cols(), linear_oracle(x, &w, &b)).unwrap()
    };
    let (q, k, v) = (proj(&mha.query, &x), proj(&mha.key, &x), proj(&mha.value, &x));
    let dh = d / h;
    let mut concat = vec![0.0; l * d];
    for head in 0..h {
        let off = head * dh;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| q.get(i, off + c) * k.get(j, off + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i * d + off + c] = (0..l).map(|j| e[j] / z * v.get(j, off + c)).sum();
            }
        }
    }
    let expect = proj(&mha.output, &Tensor::matrix(l, d, concat).unwrap());
    for (a, b) in g.value(out).data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

fn tiny_block(seed: u64) -> (ParamStore, EncoderBlock) {
    let cfg = ModelConfig::tiny();
    store_with(seed, 0.3, |pb| EncoderBlock::new(pb, "blk", Group::CrossEncoder, &cfg))
}

#[test]
fn encoder_block_with_zero_output_projections_is_identity() {
    let (mut store, blk) = tiny_block(6);
    for id in [
        blk.attn.output.weight,
        blk.attn.output.bias.unwrap(),
        blk.ffn.fc2.weight,
        blk.ffn.fc2.bias.unwrap(),
    ] {
        store.tensor_mut(id.index()).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_matrix(&mut rng, 5, 8);
    let mut g = Graph::frozen(store.tensors());
    let xv = g.constant(x.clone());
    let y = blk.forward(&mut g, xv, &AttnMask::full(5, 5)).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(g.value(y)), bits(&x));
}

#[test]
fn encoder_block_preserves_shape() {
    let (store, blk) = tiny_block(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for l in [1, 5, 40] {
        let mut g = Graph::frozen(store.tensors());
        let xv = g.constant(random_matrix(&mut rng, l, 8));
        let y = blk.forward(&mut g, xv, &AttnMask::full(l, l)).unwrap();
        assert_eq!(g.shape(y), &[l, 8]);
    }
}

#[test]
fn encoder_block_gradients_match_finite_differences() {
    let (store, blk) = tiny_block(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_matrix(&mut rng, 4, 8);
    let w = random_matrix(&mut rng, 4, 8);
    let report = grad_check(
        |g| {
            let xv = g.constant(x.clone());
            let y = blk.forward(g, xv, &AttnMask::causal(4))?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        },
        store.tensors(),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

fn tiny_decoder(seed: u64) -> (ParamStore, DecoderStack) {
    let cfg = ModelConfig::tiny();
    store_with(seed, 0.3, |pb| DecoderStack::new(pb, "dec", Group::CrossDecoder, 2, &cfg))
}

#[test]
fn decoder_rows_ignore_later_words() {
    let (store, dec) = tiny_decoder(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let words = random_matrix(&mut rng, 6, 8);
    let visual = random_matrix(&mut rng, 3, 8);
    let run = |w: &Tensor, v: &Tensor| {
        let mut g = Graph::frozen(store.tensors());
        let (wv, vv) = (g.constant(w.clone()), g.constant(v.clone()));
        let y = dec.forward(&mut g, wv, vv).unwrap();
        g.value(y).clone()
    };
    let base = run(&words, &visual);
    for j in 1..6 {
        let mut w2 = words.clone();
        for c in 0..8 {
            w2.data_mut()[j * 8 + c] += 0.7;
        }
        let out = run(&w2, &visual);
        for i in 0..j {
            let a: Vec<u64> = base.row(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = out.row(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "row {i} changed when word {j} changed");
        }
        assert_ne!(base.row(j), out.row(j));
    }
    let mut v2 = visual.clone();
    v2.data_mut()[0] += 1.0;
    let out = run(&words, &v2);
    let diff: f64 = base.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
}

#[test]
fn decoder_rejects_non_causal_mask() {
    let cfg = ModelConfig::tiny();
    let (store, blk) = store_with(14, 0.3, |pb| DecoderBlock::new(pb, "d", Group::CrossDecoder, &cfg));
    let mut g = Graph::frozen(store.tensors());
    let w = g.constant(Tensor::zeros(&[3, 8]));
    let v = g.constant(Tensor::zeros(&[2, 8]));
    assert!(blk.forward(&mut g, w, v, &AttnMask::full(3, 3)).is_err());
}

#[test]
fn word_embedding_adds_positions() {
    let cfg = ModelConfig::tiny();
    let (store, emb) = store_with(15, 0.3, |pb| WordEmbedding::new(pb, Group::SentenceEncoder, &cfg));
    let tokens = TokenSeq::wrap(&[9, 9, 9]);
    let mut g = Graph::frozen(store.tensors());
    let x = emb.forward(&mut g, &tokens).unwrap();
    assert_eq!(g.shape(x), &[5, 8]);
    assert_ne!(g.value(x).row(1), g.value(x).row(2));

    let long = TokenSeq::wrap(&vec![9; cfg.max_seq_len - 1]);
    assert!(emb.forward(&mut g, &long).is_err());

    let w = {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        random_matrix(&mut rng, 5, 8)
    };
    let report = grad_check(
        |g| {
            let x = emb.forward(g, &tokens)?;
            let wv = g.constant(w.clone());
            let p = g.mul(x, wv)?;
            Ok(g.sum(p))
        },
        store.tensors(),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

fn regions(rng: &mut ChaCha8Rng, n: usize, f: usize, c: usize) -> RegionSet {
    let boxes = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..0.5);
            let y = rng.random_range(0.0..0.5);
            BoxGeometry::new(x, y, x + 0.3, y + 0.2).unwrap()
        })
        .collect();
    RegionSet::new(random_matrix(rng, n, f), boxes, Tensor::matrix(n, c, vec![1.0 / c as f64; n * c]).unwrap())
        .unwrap()
}

#[test]
fn region_embedding_layout_and_permutation() {
    let cfg = ModelConfig::tiny();
    let (store, emb) = store_with(17, 0.3, |pb| RegionEmbedding::new(pb, Group::ObjectEncoder, &cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let r = regions(&mut rng, 3, 6, 4);
    let mut g = Graph::frozen(store.tensors());
    let x = emb.forward(&mut g, &r, cfg.max_regions).unwrap();
    assert_eq!(g.shape(x), &[4, 8]);

    let perm = [2, 0, 1];
    let rp = r.permuted(&perm);
    let xp = emb.forward(&mut g, &rp, cfg.max_regions).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in g.value(xp).row(i + 1).iter().zip(g.value(x).row(p + 1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    for (a, b) in g.value(xp).row(0).iter().zip(g.value(x).row(0)) {
        assert!((a - b).abs() < 1e-12);
    }

    let one = r.permuted(&[1]);
    let dup = r.permuted(&[1, 1]);
    let a = emb.forward(&mut g, &one, cfg.max_regions).unwrap();
    let b = emb.forward(&mut g, &dup, cfg.max_regions).unwrap();
    for (u, v) in g.value(a).row(0).iter().zip(g.value(b).row(0)) {
        assert!((u - v).abs() < 1e-12);
    }

    let mut masked = r.clone();
    masked.masked[1] = true;
    let m = emb.forward(&mut g, &masked, cfg.max_regions).unwrap();
    assert_eq!(g.value(m).row(1), g.value(x).row(1));
    assert_ne!(g.value(m).row(2), g.value(x).row(2));

    let too_many = regions(&mut rng, cfg.max_regions + 1, 6, 4);
    assert!(emb.forward(&mut g, &too_many, cfg.max_regions).is_err());
}

#[test]
fn attention_pool_reduces_to_one_row() {
    let (store, pool) = store_with(19, 0.3, |pb| AttnPool::new(pb, "pool", Group::IsmPool, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = random_matrix(&mut rng, 5, 8);
    let mut g = Graph::frozen(store.tensors());
    let xv = g.constant(x.clone());
    let p = pool.forward(&mut g, xv).unwrap();
    assert_eq!(g.shape(p), &[1, 8]);
    let report = grad_check(
        |g| {
            let xv = g.constant(x.clone());
            let p = pool.forward(g, xv)?;
            let t = g.tanh(p);
            Ok(g.sum(t))
        },
        store.tensors(),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}
