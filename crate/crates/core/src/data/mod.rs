//! Region/token containers, the synthetic corpus and dataset files.

pub mod io;
pub mod synth;
pub mod types;
pub mod vocab;

pub use synth::{
    gen_corpus, gen_item, Corpus, DatasetRecord, SceneSpec, SynthConfig, SynthItem, TaskAnnotation,
    World,
};
pub use types::{BoxGeometry, RegionSet, TokenSeq};
pub use vocab::Vocab;
