//! Shared fixtures for the benchmarks: a small model stack and synthetic
//! inputs sized like real desk-scale workloads.

use personadiff_core::clip::{ClipSpace, D_CLIP};
use personadiff_core::data::{Tokenizer, NUM_CHANNELS};
use personadiff_core::diffusion::Denoiser;
use personadiff_core::nn::{ParamSet, Tensor};
use personadiff_core::persona::PersonaExtractor;
use personadiff_core::rng::fork;

pub struct BenchStack {
    pub clip: ClipSpace,
    pub denoiser: Denoiser,
    pub extractor: PersonaExtractor,
    pub params: ParamSet<f32>,
}

pub fn stack() -> BenchStack {
    let mut params = ParamSet::new();
    let tokenizer = Tokenizer::new();
    let clip = ClipSpace::new(
        &mut params,
        tokenizer.vocab_size(),
        NUM_CHANNELS,
        0.1,
        &mut fork(0, "bench", "clip"),
    );
    let denoiser = Denoiser::new(&mut params, NUM_CHANNELS, D_CLIP, &mut fork(0, "bench", "den"));
    let extractor = PersonaExtractor::new(&mut params, &mut fork(0, "bench", "ext"));
    BenchStack {
        clip,
        denoiser,
        extractor,
        params,
    }
}

/// A standard-normal motion window, shaped like a training view.
pub fn motion_window(frames: usize) -> Tensor<f32> {
    personadiff_core::diffusion::gaussian_tensor(frames, NUM_CHANNELS, &mut fork(0, "bench", "x"))
}
