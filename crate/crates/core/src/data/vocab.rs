//! Word-id layout shared by the synthetic corpus and the model.
//!
//! ```text
//! 0..4    [CLS] [SEP] [MASK] [IMG]
//! 4..8    the what color is
//! 8..     predicates, then classes, then attributes
//! ```
//! Ids past the last attribute are valid but never emitted by the generator.

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const IMG: usize = 3;
pub const N_SPECIAL: usize = 4;

pub const THE: usize = 4;
pub const WHAT: usize = 5;
pub const COLOR: usize = 6;
pub const IS: usize = 7;
const FIRST_CONTENT: usize = 8;

/// left-of, right-of, above, below
pub const N_PREDICATES: usize = 4;

pub fn is_special(id: usize) -> bool {
    id < N_SPECIAL
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_predicates: usize,
    pub n_classes: usize,
    pub n_attributes: usize,
}

impl Vocab {
    pub fn new(n_classes: usize, n_attributes: usize) -> Self {
        Vocab {
            n_predicates: N_PREDICATES,
            n_classes,
            n_attributes,
        }
    }

    /// Smallest vocabulary size that holds every emitted id.
    pub fn required_size(&self) -> usize {
        FIRST_CONTENT + self.n_predicates + self.n_classes + self.n_attributes
    }

    pub fn predicate_word(&self, p: usize) -> usize {
        debug_assert!(p < self.n_predicates);
        FIRST_CONTENT + p
    }

    pub fn class_word(&self, c: usize) -> usize {
        debug_assert!(c < self.n_classes);
        FIRST_CONTENT + self.n_predicates + c
    }

    pub fn attribute_word(&self, a: usize) -> usize {
        debug_assert!(a < self.n_attributes);
        FIRST_CONTENT + self.n_predicates + self.n_classes + a
    }

    pub fn word_class(&self, id: usize) -> Option<usize> {
        let base = FIRST_CONTENT + self.n_predicates;
        (base..base + self.n_classes).contains(&id).then(|| id - base)
    }

    pub fn word_attribute(&self, id: usize) -> Option<usize> {
        let base = FIRST_CONTENT + self.n_predicates + self.n_classes;
        (base..base + self.n_attributes).contains(&id).then(|| id - base)
    }

    pub fn word_predicate(&self, id: usize) -> Option<usize> {
        (FIRST_CONTENT..FIRST_CONTENT + self.n_predicates)
            .contains(&id)
            .then(|| id - FIRST_CONTENT)
    }
}
