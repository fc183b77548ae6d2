//! Synthetic paired scenes: regions with class/attribute structure and a
//! template caption describing the most salient objects.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::types::{BoxGeometry, RegionSet, TokenSeq};
use super::vocab::{Vocab, COLOR, IS, N_PREDICATES, THE, WHAT};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::nn::ModelConfig;
use crate::rng::{derive_seed, rng_for, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_attributes: usize,
    pub d_region_feat: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub noise_sigma: f64,
    pub detector_temperature: f64,
    pub relation_prob: f64,
}

impl SynthConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        SynthConfig {
            n_classes: cfg.n_object_classes,
            n_attributes: cfg.n_attributes,
            d_region_feat: cfg.d_region_feat,
            min_regions: 2,
            max_regions: cfg.max_regions.min(cfg.n_object_classes),
            noise_sigma: 0.1,
            detector_temperature: 0.5,
            relation_prob: 0.5,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_classes, self.n_attributes)
    }

    /// Leading feature dimensions carry the class prototype, the rest the attribute offset.
    fn class_dims(&self) -> usize {
        self.d_region_feat.div_ceil(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub attribute: usize,
    pub geometry: BoxGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Relation {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Sorted by decreasing box area; object 0 is the caption subject.
    pub objects: Vec<SceneObject>,
    pub relation: Option<Relation>,
}

/// Fixed latent structure shared by every split: one prototype per class and
/// one offset per attribute.
#[derive(Clone, Debug)]
pub struct World {
    pub config: SynthConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub attribute_offsets: Vec<Vec<f64>>,
}

impl World {
    pub fn new(config: SynthConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::WORLD]);
        let f = config.d_region_feat;
        let cd = config.class_dims();
        let gauss_in = |range: std::ops::Range<usize>, rng: &mut ChaCha8Rng| {
            let mut v = vec![0.0; f];
            for x in &mut v[range] {
                *x = StandardNormal.sample(rng);
            }
            v
        };
        let prototypes = (0..config.n_classes)
            .map(|_| gauss_in(0..cd, &mut rng))
            .collect();
        let attribute_offsets = (0..config.n_attributes)
            .map(|_| gauss_in(cd..f, &mut rng))
            .collect();
        World {
            config,
            prototypes,
            attribute_offsets,
        }
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in i + 1..self.prototypes.len() {
                best = best.min(euclid(&self.prototypes[i], &self.prototypes[j]));
            }
        }
        best
    }

    pub fn nearest_prototype(&self, feature: &[f64]) -> usize {
        (0..self.prototypes.len())
            .min_by(|&a, &b| {
                euclid(feature, &self.prototypes[a]).total_cmp(&euclid(feature, &self.prototypes[b]))
            })
            .expect("at least one class")
    }

    pub fn gen_scene(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        let c = &self.config;
        let n = rng.random_range(c.min_regions..=c.max_regions);
        let mut classes: Vec<usize> = (0..c.n_classes).collect();
        classes.shuffle(rng);
        let mut objects: Vec<SceneObject> = classes[..n]
            .iter()
            .map(|&class| {
                let w = rng.random_range(0.1..0.6);
                let h = rng.random_range(0.1..0.6);
                let x1 = rng.random_range(0.0..1.0 - w);
                let y1 = rng.random_range(0.0..1.0 - h);
                SceneObject {
                    class,
                    attribute: rng.random_range(0..c.n_attributes),
                    geometry: BoxGeometry::new(x1, y1, x1 + w, y1 + h).expect("in unit square"),
                }
            })
            .collect();
        objects.sort_by(|a, b| b.geometry.area.total_cmp(&a.geometry.area));
        let relation = (rng.random::<f64>() < c.relation_prob).then(|| Relation {
            subject: 0,
            predicate: spatial_predicate(objects[0].geometry, objects[1].geometry),
            object: 1,
        });
        SceneSpec { objects, relation }
    }

    pub fn render_regions(&self, scene: &SceneSpec, rng: &mut ChaCha8Rng) -> RegionSet {
        let c = &self.config;
        let f = c.d_region_feat;
        let noise = Normal::new(0.0, c.noise_sigma).expect("positive sigma");
        let mut feats = Vec::with_capacity(scene.objects.len() * f);
        let mut det = Vec::with_capacity(scene.objects.len() * c.n_classes);
        for obj in &scene.objects {
            let start = feats.len();
            for k in 0..f {
                feats.push(
                    self.prototypes[obj.class][k]
                        + self.attribute_offsets[obj.attribute][k]
                        + noise.sample(rng),
                );
            }
            det.extend(self.detector_distribution(&feats[start..]));
        }
        let n = scene.objects.len();
        RegionSet::new(
            Tensor::matrix(n, f, feats).expect("sized"),
            scene.objects.iter().map(|o| o.geometry).collect(),
            Tensor::matrix(n, c.n_classes, det).expect("sized"),
        )
        .expect("consistent shapes")
    }

    /// Soft detector output: softmax over `2·cos(feature, prototype)` at the configured temperature.
    pub fn detector_distribution(&self, feature: &[f64]) -> Vec<f64> {
        let cd = self.config.class_dims();
        let fc = &feature[..cd];
        let mut logits: Vec<f64> = self
            .prototypes
            .iter()
            .map(|p| 2.0 * cosine(fc, &p[..cd]) / self.config.detector_temperature)
            .collect();
        crate::autodiff::kernels::softmax_in_place(&mut logits);
        logits
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// 0 left-of, 1 right-of, 2 above, 3 below (subject relative to object, y grows downward).
pub fn spatial_predicate(subject: BoxGeometry, object: BoxGeometry) -> usize {
    let (sx, sy) = subject.center();
    let (ox, oy) = object.center();
    let (dx, dy) = (ox - sx, oy - sy);
    let p = if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            0
        } else {
            1
        }
    } else if dy >= 0.0 {
        2
    } else {
        3
    };
    debug_assert!(p < N_PREDICATES);
    p
}

/// `the <attr> <class> [<pred> the <attr> <class>]`
pub fn gen_caption(scene: &SceneSpec, vocab: &Vocab) -> Vec<usize> {
    let describe = |o: &SceneObject| [THE, vocab.attribute_word(o.attribute), vocab.class_word(o.class)];
    let mut words = describe(&scene.objects[0]).to_vec();
    if let Some(r) = scene.relation {
        words.push(vocab.predicate_word(r.predicate));
        words.extend(describe(&scene.objects[r.object]));
    }
    words
}

/// Whether a caption is a true statement about the scene.
pub fn caption_holds(scene: &SceneSpec, caption: &[usize], vocab: &Vocab) -> bool {
    let find = |attr_word: usize, class_word: usize| -> Option<usize> {
        let a = vocab.word_attribute(attr_word)?;
        let c = vocab.word_class(class_word)?;
        scene
            .objects
            .iter()
            .position(|o| o.class == c && o.attribute == a)
    };
    match caption {
        [THE, a, c] => find(*a, *c).is_some(),
        [THE, a, c, p, THE, a2, c2] => {
            let (Some(s), Some(o)) = (find(*a, *c), find(*a2, *c2)) else {
                return false;
            };
            vocab.word_predicate(*p)
                == Some(spatial_predicate(
                    scene.objects[s].geometry,
                    scene.objects[o].geometry,
                ))
        }
        _ => false,
    }
}

/// Per-item labels for the downstream tasks.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TaskAnnotation {
    /// `what color is the <class>` (unwrapped words).
    pub question: Vec<usize>,
    /// Attribute index of the queried object.
    pub answer: usize,
    /// Four candidate captions, exactly one true.
    pub choices: Vec<Vec<usize>>,
    pub correct_choice: usize,
}

pub fn gen_annotation(
    scene: &SceneSpec,
    caption: &[usize],
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> TaskAnnotation {
    // questions ask about a captioned object; the caption itself is not a task input
    let described = if scene.relation.is_some() { 2 } else { 1 };
    let target = &scene.objects[rng.random_range(0..described)];
    let question = vec![WHAT, COLOR, IS, THE, vocab.class_word(target.class)];

    let absent: Vec<usize> = (0..vocab.n_classes)
        .filter(|c| scene.objects.iter().all(|o| o.class != *c))
        .collect();
    // all three distractors replace the same word, so the four choices are
    // pairwise one-word apart and no choice sits at the center of the set
    let slots: Vec<usize> = (0..caption.len())
        .filter(|&i| {
            vocab.word_attribute(caption[i]).is_some()
                || (vocab.word_class(caption[i]).is_some() && absent.len() >= 3)
        })
        .collect();
    let slot = slots[rng.random_range(0..slots.len())];
    let replacements: Vec<usize> = match vocab.word_attribute(caption[slot]) {
        Some(a) => {
            let others: Vec<usize> = (0..vocab.n_attributes).filter(|&b| b != a).collect();
            others.choose_multiple(rng, 3).map(|&b| vocab.attribute_word(b)).collect()
        }
        None => absent.choose_multiple(rng, 3).map(|&c| vocab.class_word(c)).collect(),
    };
    let distractors: Vec<Vec<usize>> = replacements
        .into_iter()
        .map(|w| {
            let mut d = caption.to_vec();
            d[slot] = w;
            d
        })
        .collect();
    let correct_choice = rng.random_range(0..4);
    let mut choices = distractors;
    choices.insert(correct_choice, caption.to_vec());
    TaskAnnotation {
        question,
        answer: target.attribute,
        choices,
        correct_choice,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub regions: RegionSet,
    /// Unwrapped caption word ids.
    pub caption: Vec<usize>,
}

impl DatasetRecord {
    pub fn tokens(&self) -> TokenSeq {
        TokenSeq::wrap(&self.caption)
    }
}

/// A generated item: the record plus the latent scene and task labels.
#[derive(Clone, Debug)]
pub struct SynthItem {
    pub scene: SceneSpec,
    pub record: DatasetRecord,
    pub annotation: TaskAnnotation,
}

pub fn gen_item(world: &World, seed: u64, index: u64) -> SynthItem {
    let mut rng = rng_for(seed, &[tag::RECORD, index]);
    let vocab = world.config.vocab();
    let scene = world.gen_scene(&mut rng);
    let caption = gen_caption(&scene, &vocab);
    let regions = world.render_regions(&scene, &mut rng);
    let annotation = gen_annotation(&scene, &caption, &vocab, &mut rng);
    SynthItem {
        scene,
        record: DatasetRecord { regions, caption },
        annotation,
    }
}

/// Items `0..n` of the split identified by `split_tag`.
pub fn gen_split(world: &World, seed: u64, split_tag: u64, n: usize) -> Vec<SynthItem> {
    let split_seed = derive_seed(seed, &[split_tag]);
    (0..n as u64).map(|i| gen_item(world, split_seed, i)).collect()
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<SynthItem>,
    pub val: Vec<SynthItem>,
    pub test: Vec<SynthItem>,
}

pub const SPLIT_TRAIN: u64 = 101;
pub const SPLIT_VAL: u64 = 102;
pub const SPLIT_TEST: u64 = 103;

/// Train/val/test splits over one shared world.
pub fn gen_corpus(
    cfg: &SynthConfig,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<Corpus> {
    let world = World::new(cfg.clone(), seed);
    Ok(Corpus {
        train: gen_split(&world, seed, SPLIT_TRAIN, n_train),
        val: gen_split(&world, seed, SPLIT_VAL, n_val),
        test: gen_split(&world, seed, SPLIT_TEST, n_test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn desk_world() -> World {
        World::new(SynthConfig::for_model(&ModelConfig::desk()), 7)
    }

    #[test]
    fn same_seed_same_scene() {
        let w = desk_world();
        let a = gen_item(&w, 3, 11);
        let b = gen_item(&w, 3, 11);
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.record, b.record);
        assert_ne!(gen_item(&w, 3, 12).record, a.record);
    }

    #[test]
    fn prototypes_well_separated() {
        let w = desk_world();
        assert!(w.min_prototype_distance() > 4.0 * w.config.noise_sigma);
    }

    #[test]
    fn boxes_and_counts_valid() {
        let w = desk_world();
        for i in 0..500 {
            let item = gen_item(&w, 5, i);
            let n = item.scene.objects.len();
            assert!((2..=12).contains(&n));
            assert!(item.scene.objects.iter().all(|o| o.geometry.is_valid()
                && o.geometry.x2 - o.geometry.x1 > 0.0
                && o.geometry.y2 - o.geometry.y1 > 0.0));
            for r in 0..n {
                let s: f64 = item.record.regions.detector.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                let argmax = (0..24)
                    .max_by(|&a, &b| item.record.regions.detector.get(r, a).total_cmp(&item.record.regions.detector.get(r, b)))
                    .unwrap();
                assert_eq!(argmax, item.scene.objects[r].class);
            }
        }
    }

    #[test]
    fn single_object_caption_has_three_words() {
        let vocab = Vocab::new(24, 24);
        let scene = SceneSpec {
            objects: vec![SceneObject {
                class: 5,
                attribute: 9,
                geometry: BoxGeometry::new(0.1, 0.1, 0.5, 0.5).unwrap(),
            }],
            relation: None,
        };
        let cap = gen_caption(&scene, &vocab);
        assert_eq!(cap.len(), 3);
        assert_eq!(vocab.word_class(cap[2]), Some(5));
        assert_eq!(vocab.word_attribute(cap[1]), Some(9));
        assert!(caption_holds(&scene, &cap, &vocab));
    }

    #[test]
    fn captions_decode_to_scene_and_are_true() {
        let w = desk_world();
        let vocab = w.config.vocab();
        for i in 0..300 {
            let item = gen_item(&w, 9, i);
            let cap = &item.record.caption;
            assert!(caption_holds(&item.scene, cap, &vocab));
            assert_eq!(vocab.word_class(cap[2]), Some(item.scene.objects[0].class));
            let ann = &item.annotation;
            assert_eq!(ann.choices.len(), 4);
            assert_eq!(&ann.choices[ann.correct_choice], cap);
            for (k, c) in ann.choices.iter().enumerate() {
                if k != ann.correct_choice {
                    assert!(!caption_holds(&item.scene, c, &vocab));
                }
                for (j, d) in ann.choices.iter().enumerate().skip(k + 1) {
                    let diff: Vec<usize> = (0..c.len()).filter(|&i| c[i] != d[i]).collect();
                    assert_eq!(diff.len(), 1, "choices {k} and {j} of item {i}");
                }
            }
            let qc = vocab.word_class(ann.question[4]).unwrap();
            let obj = item.scene.objects.iter().find(|o| o.class == qc).unwrap();
            assert_eq!(obj.attribute, ann.answer);
            assert!(cap.contains(&ann.question[4]));
        }
    }

    #[test]
    fn corpus_unigram_entropy_above_three_bits() {
        let w = desk_world();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut total = 0usize;
        for i in 0..10_000 {
            for &t in &gen_item(&w, 21, i).record.caption {
                *counts.entry(t).or_default() += 1;
                total += 1;
            }
        }
        let h: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.log2()
            })
            .sum();
        assert!(h > 3.0, "entropy {h}");
    }

    #[test]
    fn nearest_prototype_recovers_classes() {
        let w = desk_world();
        let (mut hit, mut n) = (0, 0);
        for i in 0..500 {
            let item = gen_item(&w, 33, i);
            for (r, o) in item.scene.objects.iter().enumerate() {
                n += 1;
                if w.nearest_prototype(item.record.regions.features.row(r)) == o.class {
                    hit += 1;
                }
            }
        }
        assert!(hit as f64 / n as f64 > 0.95, "{hit}/{n}");
    }
}
