//! Persona parameters: the latent "style knobs" of the synthetic corpus.
//!
//! Personas are a deterministic function of `(corpus_seed, persona_id)`.
//! Identities are kept apart by Latin-hypercube cell assignment: for each
//! of the five knobs, a seed-derived permutation assigns every persona its
//! own cell, and jitter stays in the central half of the cell. Two personas
//! therefore differ by at least half a cell width in *every* knob, which
//! lower-bounds their distance in normalized parameter space.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::fork;

pub const NUM_KNOBS: usize = 5;

/// Knob ranges: (min, max) for amplitude, frequency, lean, arm bias,
/// tempo jitter.
const RANGES: [(f64, f64); NUM_KNOBS] = [
    (0.6, 1.5),   // amplitude_scale
    (0.7, 1.4),   // frequency_scale
    (-0.3, 0.3),  // lean
    (-0.5, 0.5),  // arm_bias
    (0.0, 0.15),  // tempo_jitter
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonaParams {
    /// Multiplies every oscillation amplitude.
    pub amplitude_scale: f64,
    /// Multiplies the base gait/gesture frequency.
    pub frequency_scale: f64,
    /// Constant forward-lean offset added to the torso channels.
    pub lean: f64,
    /// Left/right asymmetry added to the arm channels (+ left, - right).
    pub arm_bias: f64,
    /// Depth of the slow sinusoidal phase modulation.
    pub tempo_jitter: f64,
}

impl PersonaParams {
    /// The style-free persona used for the pretraining split.
    pub fn neutral() -> Self {
        PersonaParams {
            amplitude_scale: 1.0,
            frequency_scale: 1.0,
            lean: 0.0,
            arm_bias: 0.0,
            tempo_jitter: 0.0,
        }
    }

    pub fn to_array(self) -> [f64; NUM_KNOBS] {
        [
            self.amplitude_scale,
            self.frequency_scale,
            self.lean,
            self.arm_bias,
            self.tempo_jitter,
        ]
    }

    fn from_array(a: [f64; NUM_KNOBS]) -> Self {
        PersonaParams {
            amplitude_scale: a[0],
            frequency_scale: a[1],
            lean: a[2],
            arm_bias: a[3],
            tempo_jitter: a[4],
        }
    }

    /// Map each knob into [0, 1] by its range.
    pub fn normalized(self) -> [f64; NUM_KNOBS] {
        let a = self.to_array();
        std::array::from_fn(|i| (a[i] - RANGES[i].0) / (RANGES[i].1 - RANGES[i].0))
    }

    /// Euclidean distance in normalized knob space.
    pub fn distance(self, other: PersonaParams) -> f64 {
        let a = self.normalized();
        let b = other.normalized();
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Guaranteed minimum pairwise normalized-space distance for a cohort
    /// of `num_personas` (half a Latin-hypercube cell per knob, all knobs).
    pub fn separation_margin(num_personas: usize) -> f64 {
        (NUM_KNOBS as f64).sqrt() * 0.5 / num_personas as f64
    }
}

/// Sample the whole cohort. Persona `i` of a given `(corpus_seed,
/// num_personas)` is always the same, independent of how many other
/// personas are asked for afterwards.
pub fn sample_personas(corpus_seed: u64, num_personas: usize) -> Vec<PersonaParams> {
    assert!(num_personas >= 1);
    // One permutation per knob, derived from the corpus seed alone.
    let perms: Vec<Vec<usize>> = (0..NUM_KNOBS)
        .map(|d| {
            let mut idx: Vec<usize> = (0..num_personas).collect();
            let mut rng = fork(corpus_seed, "personas", &format!("perm/{d}"));
            idx.shuffle(&mut rng);
            idx
        })
        .collect();

    (0..num_personas)
        .map(|i| {
            let mut rng = fork(corpus_seed, "personas", &format!("jitter/{i}"));
            let a: [f64; NUM_KNOBS] = std::array::from_fn(|d| {
                let cell = perms[d][i] as f64;
                // central half of the cell: [cell + 0.25, cell + 0.75] / P
                let u: f64 = rng.random();
                let pos = (cell + 0.25 + 0.5 * u) / num_personas as f64;
                RANGES[d].0 + pos * (RANGES[d].1 - RANGES[d].0)
            });
            PersonaParams::from_array(a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed_and_id() {
        let a = sample_personas(42, 4);
        let b = sample_personas(42, 4);
        assert_eq!(a, b);
        let c = sample_personas(43, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn neutral_is_identity_knobs() {
        let n = PersonaParams::neutral();
        assert_eq!(n.to_array(), [1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cohort_respects_separation_margin() {
        for seed in [1u64, 7, 99] {
            for p in [2usize, 4, 8] {
                let personas = sample_personas(seed, p);
                let margin = PersonaParams::separation_margin(p);
                for i in 0..p {
                    for j in i + 1..p {
                        let d = personas[i].distance(personas[j]);
                        assert!(
                            d >= margin,
                            "seed {seed} personas {i},{j} too close: {d} < {margin}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn knobs_stay_in_range() {
        for &seed in &[3u64, 11] {
            for persona in sample_personas(seed, 6) {
                let a = persona.to_array();
                for (v, (lo, hi)) in a.iter().zip(RANGES) {
                    assert!(*v >= lo && *v <= hi);
                }
                let n = persona.normalized();
                assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}
