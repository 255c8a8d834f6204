//! Prompt templates and the whitespace tokenizer.
//!
//! Every content has eight phrasings. All templates begin with the subject
//! noun phrase, so personalization inserts the persona placeholder at
//! position 0 ("[P] a person walks forward") and shifts the subject index
//! by one. The tokenizer's vocabulary is built from the closed template
//! grammar, round-trips exactly, and rejects out-of-grammar words.

use std::collections::BTreeMap;

use super::synth::Content;
use crate::error::{Error, Result};

/// Placeholder token that the persona embedding replaces.
pub const PLACEHOLDER: &str = "[P]";

#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub text: &'static str,
    /// Token index of the subject head noun ("person" / "someone").
    pub subject_index: usize,
}

const fn t(text: &'static str, subject_index: usize) -> Template {
    Template {
        text,
        subject_index,
    }
}

pub const VARIANTS_PER_CONTENT: usize = 8;

static WALK_LINE: [Template; 8] = [
    t("a person walks forward", 1),
    t("a person walks forward in a straight line", 1),
    t("someone walks ahead at a steady pace", 0),
    t("the person strides forward", 1),
    t("a person is walking forward", 1),
    t("someone moves forward step by step", 0),
    t("a person walks straight ahead slowly", 1),
    t("the person keeps walking in a line", 1),
];

static WALK_CIRCLE: [Template; 8] = [
    t("a person walks in a circle", 1),
    t("a person walks around in a circle", 1),
    t("someone walks a circular path", 0),
    t("the person walks round and round", 1),
    t("a person is walking in a circle", 1),
    t("someone walks a wide circle", 0),
    t("a person walks a circle at a steady pace", 1),
    t("the person keeps walking in a circle", 1),
];

static RUN: [Template; 8] = [
    t("a person runs forward", 1),
    t("a person is running fast", 1),
    t("someone runs ahead quickly", 0),
    t("the person runs in a straight line", 1),
    t("a person runs at speed", 1),
    t("someone keeps running forward", 0),
    t("a person runs forward fast", 1),
    t("the person moves ahead running", 1),
];

static HOP: [Template; 8] = [
    t("a person hops forward", 1),
    t("a person hops ahead on one leg", 1),
    t("someone hops forward several times", 0),
    t("the person jumps forward on one leg", 1),
    t("a person is hopping forward", 1),
    t("someone keeps hopping ahead", 0),
    t("a person hops in a straight line", 1),
    t("the person hops forward slowly", 1),
];

static WAVE: [Template; 8] = [
    t("a person waves", 1),
    t("a person waves with one hand", 1),
    t("someone waves a hand in the air", 0),
    t("the person raises a hand and waves", 1),
    t("a person is waving", 1),
    t("someone waves to say hello", 0),
    t("a person lifts an arm and waves", 1),
    t("the person waves several times", 1),
];

static PUNCH: [Template; 8] = [
    t("a person punches", 1),
    t("a person punches forward", 1),
    t("someone throws a punch", 0),
    t("the person punches the air", 1),
    t("a person is punching", 1),
    t("someone punches with one arm", 0),
    t("a person throws several punches", 1),
    t("the person punches quickly", 1),
];

pub fn templates(content: Content) -> &'static [Template; 8] {
    match content {
        Content::WalkLine => &WALK_LINE,
        Content::WalkCircle => &WALK_CIRCLE,
        Content::Run => &RUN,
        Content::Hop => &HOP,
        Content::Wave => &WAVE,
        Content::Punch => &PUNCH,
    }
}

pub fn template(content: Content, variant: usize) -> Template {
    templates(content)[variant % VARIANTS_PER_CONTENT]
}

/// A template with the placeholder spliced in before the subject phrase.
/// Returns the new text, the placeholder's token position, and the shifted
/// subject index.
pub fn personalize(tpl: Template) -> (String, usize, usize) {
    // All templates open with the subject noun phrase, so the phrase
    // starts at token 0 and the placeholder lands there.
    let text = format!("{PLACEHOLDER} {}", tpl.text);
    (text, 0, tpl.subject_index + 1)
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary = placeholder + every word of the template grammar, in
    /// first-appearance order. Fully deterministic.
    pub fn new() -> Self {
        let mut vocab = vec![PLACEHOLDER.to_string()];
        let mut index = BTreeMap::new();
        index.insert(PLACEHOLDER.to_string(), 0usize);
        for content in Content::ALL {
            for tpl in templates(content) {
                for word in tpl.text.split_whitespace() {
                    if !index.contains_key(word) {
                        index.insert(word.to_string(), vocab.len());
                        vocab.push(word.to_string());
                    }
                }
            }
        }
        Tokenizer { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn placeholder_id(&self) -> usize {
        0
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::Corpus(format!("word not in grammar: `{w}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.vocab[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new()
    }
}
