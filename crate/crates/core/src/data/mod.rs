//! Synthetic persona-motion corpus: persona knobs, procedural motion,
//! mirror augmentation, prompt grammar, and the split/on-disk format.

pub mod corpus;
pub mod persona;
pub mod synth;
pub mod text;

pub use corpus::{build_corpus, ChannelStats, Clip, Corpus, CorpusSpec};
pub use persona::{sample_personas, PersonaParams, NUM_KNOBS};
pub use synth::{
    crop, flip_lr, synthesize, synthesize_take, Content, CH_CONTACT_L, CH_CONTACT_R, CH_ROOT_X,
    CH_ROOT_Y, CH_ROOT_Z, CH_VEL_X, CH_VEL_Y, CH_YAW, FPS, MAX_FRAMES, MIN_FRAMES, NUM_CHANNELS,
    NUM_PAIRS, PAIRS_START,
};
pub use text::{personalize, template, templates, Template, Tokenizer, PLACEHOLDER, VARIANTS_PER_CONTENT};
