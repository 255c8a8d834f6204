//! Procedural motion synthesis.
//!
//! A clip is `frames x 32` (20 fps). The channel layout is frozen and
//! documented in `docs/dataset-format.md`:
//!
//! ```text
//! 0 root_x   forward travel (m), 0 at clip start
//! 1 root_y   lateral position (m)          [negated by mirror]
//! 2 root_z   pelvis height (m)
//! 3 vel_x    forward velocity (m/s)
//! 4 vel_y    lateral velocity (m/s)        [negated by mirror]
//! 5 yaw      heading (rad)                 [negated by mirror]
//! 6..=29     12 left/right joint pairs, L on even, R on odd channel
//!            [pairs swapped by mirror]
//! 30 contact_l  foot contact {0,1}         [swapped by mirror]
//! 31 contact_r  foot contact {0,1}
//! ```
//!
//! Six contents share one skeleton of oscillators; persona knobs modulate
//! amplitude, frequency, posture, arm asymmetry, and tempo drift.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::persona::PersonaParams;
use crate::nn::Tensor;
use crate::rng::Rng;

pub const NUM_CHANNELS: usize = 32;
pub const FPS: f64 = 20.0;
pub const MIN_FRAMES: usize = 32;
pub const MAX_FRAMES: usize = 64;

pub const CH_ROOT_X: usize = 0;
pub const CH_ROOT_Y: usize = 1;
pub const CH_ROOT_Z: usize = 2;
pub const CH_VEL_X: usize = 3;
pub const CH_VEL_Y: usize = 4;
pub const CH_YAW: usize = 5;
pub const PAIRS_START: usize = 6;
pub const NUM_PAIRS: usize = 12;
pub const CH_CONTACT_L: usize = 30;
pub const CH_CONTACT_R: usize = 31;

/// Joint pair indices (left channel = PAIRS_START + 2k, right = +1).
mod pair {
    pub const HIP: usize = 0;
    pub const KNEE: usize = 1;
    pub const ANKLE: usize = 2;
    pub const FOOT_H: usize = 3;
    pub const SHOULDER: usize = 4;
    pub const ELBOW: usize = 5;
    pub const WRIST_H: usize = 6;
    pub const ARM_SWING: usize = 7;
    pub const TORSO_PITCH: usize = 8;
    pub const SHOULDER_FWD: usize = 9;
    pub const HEAD: usize = 10;
    pub const HAND_OPEN: usize = 11;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Content {
    WalkLine,
    WalkCircle,
    Run,
    Hop,
    Wave,
    Punch,
}

impl Content {
    pub const ALL: [Content; 6] = [
        Content::WalkLine,
        Content::WalkCircle,
        Content::Run,
        Content::Hop,
        Content::Wave,
        Content::Punch,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Content::WalkLine => "walk-line",
            Content::WalkCircle => "walk-circle",
            Content::Run => "run",
            Content::Hop => "hop",
            Content::Wave => "wave",
            Content::Punch => "punch",
        }
    }

    pub fn index(self) -> usize {
        Content::ALL.iter().position(|&c| c == self).unwrap()
    }

    /// Base cycle frequency in Hz before persona scaling.
    fn base_freq(self) -> f64 {
        match self {
            Content::WalkLine | Content::WalkCircle => 1.4,
            Content::Run => 2.6,
            Content::Hop => 1.8,
            Content::Wave => 1.6,
            Content::Punch => 2.2,
        }
    }
}

/// Synthesize one take. `phi0` is the gait phase offset, `psi` the tempo
/// drift phase; pass `noise` to add per-frame measurement jitter on the
/// continuous channels.
pub fn synthesize(
    content: Content,
    persona: &PersonaParams,
    frames: usize,
    phi0: f64,
    psi: f64,
    mut noise: Option<&mut Rng>,
) -> Tensor<f32> {
    let amp = persona.amplitude_scale;
    let freq = persona.frequency_scale * content.base_freq();
    let omega = 2.0 * std::f64::consts::PI * freq;
    let lean = persona.lean;
    let bias = persona.arm_bias;

    let mut clip = Tensor::zeros(frames, NUM_CHANNELS);
    for fi in 0..frames {
        let t = fi as f64 / FPS;
        // slow sinusoidal tempo drift
        let phase = omega * t
            + persona.tempo_jitter * 4.0 * (2.0 * std::f64::consts::PI * 0.3 * t + psi).sin()
            + phi0;
        let s = phase.sin();
        let s_pi = (phase + std::f64::consts::PI).sin();

        let mut ch = [0.0f64; NUM_CHANNELS];
        let set_pair = |ch: &mut [f64; NUM_CHANNELS], k: usize, l: f64, r: f64| {
            ch[PAIRS_START + 2 * k] = l;
            ch[PAIRS_START + 2 * k + 1] = r;
        };

        // shared posture
        set_pair(&mut ch, pair::TORSO_PITCH, lean, lean);
        set_pair(&mut ch, pair::HEAD, lean * 0.5, lean * 0.5);

        match content {
            Content::WalkLine | Content::WalkCircle => {
                let v = 1.0 * persona.frequency_scale * (0.7 + 0.3 * amp);
                if content == Content::WalkLine {
                    ch[CH_ROOT_X] = v * t;
                    ch[CH_ROOT_Y] = 0.04 * amp * (0.5 * phase).sin();
                    ch[CH_VEL_X] = v;
                    ch[CH_VEL_Y] = 0.02 * amp * omega * (0.5 * phase).cos();
                    ch[CH_YAW] = 0.0;
                } else {
                    // constant-rate turn; radius follows from speed
                    let turn = 2.0 * std::f64::consts::PI / (9.0 / persona.frequency_scale);
                    let yaw = turn * t;
                    let r = v / turn;
                    ch[CH_ROOT_X] = r * yaw.sin();
                    ch[CH_ROOT_Y] = r * (1.0 - yaw.cos());
                    ch[CH_VEL_X] = v * yaw.cos();
                    ch[CH_VEL_Y] = v * yaw.sin();
                    ch[CH_YAW] = yaw;
                }
                ch[CH_ROOT_Z] = 0.95 + 0.03 * amp * (2.0 * phase).sin();
                set_pair(&mut ch, pair::HIP, 0.5 * amp * s, 0.5 * amp * s_pi);
                set_pair(
                    &mut ch,
                    pair::KNEE,
                    0.35 * amp * (1.0 + (phase - 0.6).sin()),
                    0.35 * amp * (1.0 + (phase - 0.6 + std::f64::consts::PI).sin()),
                );
                set_pair(&mut ch, pair::ANKLE, 0.15 * amp * s_pi, 0.15 * amp * s);
                set_pair(
                    &mut ch,
                    pair::FOOT_H,
                    0.05 + 0.08 * amp * (-s).max(0.0),
                    0.05 + 0.08 * amp * s.max(0.0),
                );
                set_pair(
                    &mut ch,
                    pair::SHOULDER,
                    0.25 * amp * s_pi + bias,
                    0.25 * amp * s - bias,
                );
                set_pair(
                    &mut ch,
                    pair::ELBOW,
                    0.3 + 0.15 * amp * s_pi + 0.5 * bias,
                    0.3 + 0.15 * amp * s - 0.5 * bias,
                );
                set_pair(&mut ch, pair::WRIST_H, 0.8, 0.8);
                set_pair(
                    &mut ch,
                    pair::ARM_SWING,
                    0.35 * amp * s_pi + bias,
                    0.35 * amp * s - bias,
                );
                set_pair(&mut ch, pair::SHOULDER_FWD, 0.1 * amp * s_pi, 0.1 * amp * s);
                set_pair(&mut ch, pair::HAND_OPEN, 0.5, 0.5);
                ch[CH_CONTACT_L] = if s > -0.3 { 1.0 } else { 0.0 };
                ch[CH_CONTACT_R] = if s_pi > -0.3 { 1.0 } else { 0.0 };
            }
            Content::Run => {
                let v = 2.5 * persona.frequency_scale * (0.6 + 0.4 * amp);
                ch[CH_ROOT_X] = v * t;
                ch[CH_ROOT_Y] = 0.03 * amp * (0.5 * phase).sin();
                ch[CH_ROOT_Z] = 0.98 + 0.06 * amp * (2.0 * phase).sin();
                ch[CH_VEL_X] = v;
                ch[CH_VEL_Y] = 0.015 * amp * omega * (0.5 * phase).cos();
                set_pair(&mut ch, pair::HIP, 0.8 * amp * s, 0.8 * amp * s_pi);
                set_pair(
                    &mut ch,
                    pair::KNEE,
                    0.55 * amp * (1.0 + (phase - 0.8).sin()),
                    0.55 * amp * (1.0 + (phase - 0.8 + std::f64::consts::PI).sin()),
                );
                set_pair(&mut ch, pair::ANKLE, 0.25 * amp * s_pi, 0.25 * amp * s);
                set_pair(
                    &mut ch,
                    pair::FOOT_H,
                    0.08 + 0.18 * amp * (-s).max(0.0),
                    0.08 + 0.18 * amp * s.max(0.0),
                );
                set_pair(
                    &mut ch,
                    pair::SHOULDER,
                    0.45 * amp * s_pi + bias,
                    0.45 * amp * s - bias,
                );
                set_pair(
                    &mut ch,
                    pair::ELBOW,
                    0.9 + 0.2 * amp * s_pi + 0.5 * bias,
                    0.9 + 0.2 * amp * s - 0.5 * bias,
                );
                set_pair(&mut ch, pair::WRIST_H, 1.0, 1.0);
                set_pair(
                    &mut ch,
                    pair::ARM_SWING,
                    0.5 * amp * s_pi + bias,
                    0.5 * amp * s - bias,
                );
                set_pair(&mut ch, pair::SHOULDER_FWD, 0.15 * amp * s_pi, 0.15 * amp * s);
                set_pair(&mut ch, pair::HAND_OPEN, 0.2, 0.2);
                ch[CH_CONTACT_L] = if s > 0.35 { 1.0 } else { 0.0 };
                ch[CH_CONTACT_R] = if s_pi > 0.35 { 1.0 } else { 0.0 };
            }
            Content::Hop => {
                let v = 0.7 * persona.frequency_scale * amp;
                let bounce = s.max(0.0);
                ch[CH_ROOT_X] = v * t;
                ch[CH_ROOT_Y] = 0.015 * amp * (0.5 * phase).sin();
                ch[CH_ROOT_Z] = 0.9 + 0.12 * amp * bounce;
                ch[CH_VEL_X] = v;
                ch[CH_VEL_Y] = 0.0075 * amp * omega * (0.5 * phase).cos();
                // hops on the left leg, right leg tucked
                set_pair(&mut ch, pair::HIP, 0.4 * amp * bounce, -0.5 * amp);
                set_pair(&mut ch, pair::KNEE, 0.5 * amp * bounce, 0.9 * amp);
                set_pair(&mut ch, pair::ANKLE, 0.3 * amp * bounce, 0.1 * amp);
                set_pair(&mut ch, pair::FOOT_H, 0.05 + 0.15 * amp * bounce, 0.3 * amp);
                set_pair(
                    &mut ch,
                    pair::SHOULDER,
                    0.3 * amp * s + bias,
                    0.3 * amp * s - bias,
                );
                set_pair(&mut ch, pair::ELBOW, 0.5 + 0.5 * bias, 0.5 - 0.5 * bias);
                set_pair(&mut ch, pair::WRIST_H, 0.9, 0.9);
                set_pair(
                    &mut ch,
                    pair::ARM_SWING,
                    0.25 * amp * s + bias,
                    0.25 * amp * s - bias,
                );
                set_pair(&mut ch, pair::SHOULDER_FWD, 0.0, 0.0);
                set_pair(&mut ch, pair::HAND_OPEN, 0.5, 0.5);
                ch[CH_CONTACT_L] = if s < 0.0 { 1.0 } else { 0.0 };
                ch[CH_CONTACT_R] = 0.0;
            }
            Content::Wave => {
                ch[CH_ROOT_X] = 0.0;
                ch[CH_ROOT_Y] = 0.0;
                ch[CH_ROOT_Z] = 0.97 + 0.005 * amp * (0.5 * phase).sin();
                // standing still; waves with the right arm
                set_pair(&mut ch, pair::HIP, 0.05, 0.05);
                set_pair(&mut ch, pair::KNEE, 0.1, 0.1);
                set_pair(&mut ch, pair::ANKLE, 0.0, 0.0);
                set_pair(&mut ch, pair::FOOT_H, 0.02, 0.02);
                set_pair(&mut ch, pair::SHOULDER, -0.1 + bias, 1.3 + 0.1 * amp * s - bias);
                set_pair(
                    &mut ch,
                    pair::ELBOW,
                    0.2 + 0.5 * bias,
                    0.6 + 0.4 * amp * s - 0.5 * bias,
                );
                set_pair(&mut ch, pair::WRIST_H, 0.7, 1.7 + 0.15 * amp * s);
                set_pair(&mut ch, pair::ARM_SWING, 0.0 + bias, 0.5 * amp * s - bias);
                set_pair(&mut ch, pair::SHOULDER_FWD, 0.0, 0.05 * amp * s);
                set_pair(&mut ch, pair::HAND_OPEN, 1.0, 1.0);
                ch[CH_CONTACT_L] = 1.0;
                ch[CH_CONTACT_R] = 1.0;
            }
            Content::Punch => {
                // sharp thrust profile: rectified and squared sine
                let thrust = s.max(0.0).powi(2);
                ch[CH_ROOT_X] = 0.0;
                ch[CH_ROOT_Y] = 0.0;
                ch[CH_ROOT_Z] = 0.96 + 0.01 * amp * thrust;
                set_pair(&mut ch, pair::HIP, 0.15, 0.15);
                set_pair(&mut ch, pair::KNEE, 0.25, 0.25);
                set_pair(&mut ch, pair::ANKLE, 0.05, 0.05);
                set_pair(&mut ch, pair::FOOT_H, 0.02, 0.02);
                set_pair(
                    &mut ch,
                    pair::SHOULDER,
                    0.4 + bias,
                    0.4 + 0.5 * amp * thrust - bias,
                );
                set_pair(
                    &mut ch,
                    pair::ELBOW,
                    1.1 + 0.5 * bias,
                    1.2 - 1.0 * amp * thrust - 0.5 * bias,
                );
                set_pair(&mut ch, pair::WRIST_H, 1.2, 1.3 + 0.1 * amp * thrust);
                set_pair(&mut ch, pair::ARM_SWING, 0.1 + bias, 0.6 * amp * thrust - bias);
                set_pair(
                    &mut ch,
                    pair::SHOULDER_FWD,
                    -0.2 * amp * thrust,
                    0.3 * amp * thrust,
                );
                set_pair(&mut ch, pair::HAND_OPEN, 0.0, 0.0);
                ch[CH_CONTACT_L] = 1.0;
                ch[CH_CONTACT_R] = 1.0;
            }
        }

        if let Some(rng) = noise.as_deref_mut() {
            // measurement jitter on continuous non-root-ramp channels
            let sigma = 0.008 * (0.5 + 0.5 * amp);
            for c in [CH_ROOT_Z, CH_VEL_X, CH_VEL_Y]
                .into_iter()
                .chain(PAIRS_START..PAIRS_START + 2 * NUM_PAIRS)
            {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                ch[c] += sigma * z;
            }
        }

        for (c, &v) in ch.iter().enumerate() {
            clip.set(fi, c, v as f32);
        }
    }
    clip
}

/// Draw take-level nuisance variables and synthesize.
pub fn synthesize_take(content: Content, persona: &PersonaParams, rng: &mut Rng) -> Tensor<f32> {
    let frames = rng.random_range(MIN_FRAMES..=MAX_FRAMES);
    let phi0 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let psi = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let mut noise = rng.clone();
    // keep the caller's stream moving so consecutive takes differ
    let _ = rng.random::<u64>();
    synthesize(content, persona, frames, phi0, psi, Some(&mut noise))
}

/// Mirror a clip left/right. Involution: `flip_lr(flip_lr(x)) == x` exactly.
pub fn flip_lr(clip: &Tensor<f32>) -> Tensor<f32> {
    let mut out = clip.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        row[CH_ROOT_Y] = -row[CH_ROOT_Y];
        row[CH_VEL_Y] = -row[CH_VEL_Y];
        row[CH_YAW] = -row[CH_YAW];
        for k in 0..NUM_PAIRS {
            row.swap(PAIRS_START + 2 * k, PAIRS_START + 2 * k + 1);
        }
        row.swap(CH_CONTACT_L, CH_CONTACT_R);
    }
    out
}

/// Crop frames `[start, start+len)`, re-zeroing the ramp channels (root x,
/// root y, yaw) against the first kept frame so windows are comparable.
pub fn crop(clip: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    assert!(start + len <= clip.rows, "crop out of range");
    let mut out = Tensor::zeros(len, clip.cols);
    let x0 = clip.get(start, CH_ROOT_X);
    let y0 = clip.get(start, CH_ROOT_Y);
    let yaw0 = clip.get(start, CH_YAW);
    for i in 0..len {
        let src = clip.row(start + i);
        let dst = out.row_mut(i);
        dst.copy_from_slice(src);
        dst[CH_ROOT_X] -= x0;
        dst[CH_ROOT_Y] -= y0;
        dst[CH_YAW] -= yaw0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn neutral_clip(content: Content, frames: usize) -> Tensor<f32> {
        synthesize(content, &PersonaParams::neutral(), frames, 0.3, 0.0, None)
    }

    #[test]
    fn shape_and_contact_domain() {
        for content in Content::ALL {
            let clip = neutral_clip(content, 48);
            assert_eq!((clip.rows, clip.cols), (48, NUM_CHANNELS));
            for i in 0..clip.rows {
                for c in [CH_CONTACT_L, CH_CONTACT_R] {
                    let v = clip.get(i, c);
                    assert!(v == 0.0 || v == 1.0, "{content:?} contact not binary: {v}");
                }
            }
        }
    }

    #[test]
    fn flip_is_involution() {
        let mut rng = rng_for(5, "synth-test");
        for content in Content::ALL {
            let clip = synthesize(content, &PersonaParams::neutral(), 40, 1.1, 0.4, Some(&mut rng));
            assert_eq!(flip_lr(&flip_lr(&clip)), clip);
        }
    }

    #[test]
    fn flip_negates_and_swaps() {
        let clip = neutral_clip(Content::WalkCircle, 40);
        let m = flip_lr(&clip);
        for i in 0..clip.rows {
            assert_eq!(m.get(i, CH_ROOT_Y), -clip.get(i, CH_ROOT_Y));
            assert_eq!(m.get(i, CH_VEL_Y), -clip.get(i, CH_VEL_Y));
            assert_eq!(m.get(i, CH_YAW), -clip.get(i, CH_YAW));
            assert_eq!(m.get(i, CH_CONTACT_L), clip.get(i, CH_CONTACT_R));
            assert_eq!(m.get(i, PAIRS_START), clip.get(i, PAIRS_START + 1));
            assert_eq!(m.get(i, CH_ROOT_X), clip.get(i, CH_ROOT_X));
            assert_eq!(m.get(i, CH_ROOT_Z), clip.get(i, CH_ROOT_Z));
        }
    }

    #[test]
    fn locomotion_travels_and_gesture_stays() {
        let walk = neutral_clip(Content::WalkLine, 60);
        let run = neutral_clip(Content::Run, 60);
        let wave = neutral_clip(Content::Wave, 60);
        let punch = neutral_clip(Content::Punch, 60);
        let last = 59;
        assert!(walk.get(last, CH_ROOT_X) > 1.0);
        assert!(run.get(last, CH_ROOT_X) > 2.0 * walk.get(last, CH_ROOT_X) * 0.8);
        assert!(wave.get(last, CH_ROOT_X).abs() < 1e-6);
        assert!(punch.get(last, CH_ROOT_X).abs() < 1e-6);
        // standing contents keep both feet planted
        for i in 0..60 {
            assert_eq!(wave.get(i, CH_CONTACT_L), 1.0);
            assert_eq!(wave.get(i, CH_CONTACT_R), 1.0);
        }
    }

    #[test]
    fn run_has_flight_frames() {
        let run = neutral_clip(Content::Run, 64);
        let flight = (0..64)
            .filter(|&i| run.get(i, CH_CONTACT_L) == 0.0 && run.get(i, CH_CONTACT_R) == 0.0)
            .count();
        assert!(flight > 5, "runs should leave the ground, got {flight} flight frames");
    }

    #[test]
    fn circle_turns_heading() {
        let circle = neutral_clip(Content::WalkCircle, 64);
        assert!(circle.get(63, CH_YAW) > 1.0);
        // lateral displacement appears as the path curves
        assert!(circle.get(63, CH_ROOT_Y).abs() > 0.2);
    }

    #[test]
    fn amplitude_knob_scales_joint_motion() {
        let mut small = PersonaParams::neutral();
        small.amplitude_scale = 0.6;
        let mut big = PersonaParams::neutral();
        big.amplitude_scale = 1.5;
        let cs = synthesize(Content::WalkLine, &small, 64, 0.0, 0.0, None);
        let cb = synthesize(Content::WalkLine, &big, 64, 0.0, 0.0, None);
        let std_of = |clip: &Tensor<f32>, c: usize| {
            let vals: Vec<f64> = (0..clip.rows).map(|i| clip.get(i, c) as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let hip = PAIRS_START + 2 * pair::HIP;
        assert!(std_of(&cb, hip) > 1.5 * std_of(&cs, hip));
    }

    #[test]
    fn arm_bias_breaks_symmetry() {
        let mut p = PersonaParams::neutral();
        p.arm_bias = 0.4;
        let clip = synthesize(Content::WalkLine, &p, 64, 0.0, 0.0, None);
        let l = PAIRS_START + 2 * pair::ARM_SWING;
        let mean_l: f32 = (0..64).map(|i| clip.get(i, l)).sum::<f32>() / 64.0;
        let mean_r: f32 = (0..64).map(|i| clip.get(i, l + 1)).sum::<f32>() / 64.0;
        assert!(mean_l - mean_r > 0.5, "bias should lift left arm: {mean_l} vs {mean_r}");
    }

    #[test]
    fn crop_rezeroes_ramp_channels() {
        let clip = neutral_clip(Content::WalkCircle, 64);
        let window = crop(&clip, 20, 32);
        assert_eq!(window.rows, 32);
        assert_eq!(window.get(0, CH_ROOT_X), 0.0);
        assert_eq!(window.get(0, CH_ROOT_Y), 0.0);
        assert_eq!(window.get(0, CH_YAW), 0.0);
        // non-ramp channels are copied untouched
        assert_eq!(window.get(0, CH_ROOT_Z), clip.get(20, CH_ROOT_Z));
        assert_eq!(window.get(5, PAIRS_START + 3), clip.get(25, PAIRS_START + 3));
    }

    #[test]
    fn takes_differ_but_are_deterministic() {
        let p = PersonaParams::neutral();
        let mut r1 = rng_for(9, "takes");
        let a1 = synthesize_take(Content::Hop, &p, &mut r1);
        let b1 = synthesize_take(Content::Hop, &p, &mut r1);
        let mut r2 = rng_for(9, "takes");
        let a2 = synthesize_take(Content::Hop, &p, &mut r2);
        assert_eq!(a1, a2);
        assert_ne!(a1.data, b1.data);
    }
}
