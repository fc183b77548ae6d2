use crate::autodiff::Tensor;
use crate::error::{Result, TdenError};

use super::vocab::{CLS, MASK, SEP};

/// Normalized box corners plus area, the 5-value geometry fed to the region embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxGeometry {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub area: f64,
}

impl BoxGeometry {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(x1) && inside(y1) && inside(x2) && inside(y2)) || x1 > x2 || y1 > y2 {
            return Err(TdenError::Domain(format!(
                "invalid box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BoxGeometry {
            x1,
            y1,
            x2,
            y2,
            area: (x2 - x1) * (y2 - y1),
        })
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.x1, self.y1, self.x2, self.y2, self.area]
    }

    pub fn center(self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(self) -> bool {
        self.x1 <= self.x2
            && self.y1 <= self.y2
            && (self.area - (self.x2 - self.x1) * (self.y2 - self.y1)).abs() <= 1e-9
    }
}

/// The detected regions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    /// N×d_region_feat raw features.
    pub features: Tensor,
    pub boxes: Vec<BoxGeometry>,
    /// N×n_object_classes detector class distributions.
    pub detector: Tensor,
    /// Regions whose features were replaced by the mask token.
    pub masked: Vec<bool>,
}

impl RegionSet {
    pub fn new(features: Tensor, boxes: Vec<BoxGeometry>, detector: Tensor) -> Result<Self> {
        let n = features.rows();
        if features.ndim() != 2 || boxes.len() != n || detector.ndim() != 2 || detector.rows() != n
        {
            return Err(TdenError::Shape {
                op: "region_set",
                lhs: features.shape().to_vec(),
                rhs: detector.shape().to_vec(),
            });
        }
        Ok(RegionSet {
            features,
            boxes,
            detector,
            masked: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Applies a permutation: region `i` of the result is region `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> RegionSet {
        let f = self.features.cols();
        let c = self.detector.cols();
        let mut feats = Vec::with_capacity(perm.len() * f);
        let mut det = Vec::with_capacity(perm.len() * c);
        for &p in perm {
            feats.extend_from_slice(self.features.row(p));
            det.extend_from_slice(self.detector.row(p));
        }
        RegionSet {
            features: Tensor::matrix(perm.len(), f, feats).expect("same width"),
            boxes: perm.iter().map(|&p| self.boxes[p]).collect(),
            detector: Tensor::matrix(perm.len(), c, det).expect("same width"),
            masked: perm.iter().map(|&p| self.masked[p]).collect(),
        }
    }
}

/// A sentence wrapped as `[CLS] w_1 … w_N [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn wrap(words: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(words);
        ids.push(SEP);
        TokenSeq { ids }
    }

    /// Accepts an already wrapped id list.
    pub fn from_wrapped(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != CLS || ids[ids.len() - 1] != SEP {
            return Err(TdenError::contract(
                "token sequence must start with [CLS] and end with [SEP]",
            ));
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Number of words, excluding the two specials.
    pub fn n_words(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn with_replacement(&self, pos: usize, id: usize) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids[pos] = id;
        TokenSeq { ids }
    }

    pub fn contains_mask(&self) -> bool {
        self.ids.contains(&MASK)
    }
}
