//! Planted-signal generator for asynchronous three-modality sequences.
//!
//! Each sample draws a latent score `z ~ U(-3, 3)` and hides it differently
//! in every modality:
//!
//! * language: the keyword vector `k_L · z` is added at one random step;
//! * visual: channel 0 carries a sinusoid of amplitude `|z|/3` whose phase
//!   follows the sign of `z`, starting after a random lag;
//! * audio: channel 0 is shifted by `z/3` over a random window.
//!
//! Every modality also receives i.i.d. Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetInfo, Label, MultimodalSample, Sequence, TaskMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Feature widths for L, V, A.
    pub dims: [usize; 3],
    /// Inclusive length ranges for L, V, A.
    pub lengths: [(usize, usize); 3],
    pub noise: f64,
    /// Inclusive range of the visual onset lag in frames.
    pub visual_lag: (usize, usize),
    /// Period of the visual sinusoid in frames.
    pub visual_period: f64,
    /// Inclusive range of the audio window length.
    pub audio_window: (usize, usize),
    pub classification: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            dims: [12, 8, 10],
            lengths: [(15, 20), (28, 35), (40, 50)],
            noise: 0.3,
            visual_lag: (3, 8),
            visual_period: 8.0,
            audio_window: (8, 12),
            classification: false,
        }
    }
}

impl GeneratorSpec {
    pub fn mode(&self) -> TaskMode {
        if self.classification {
            TaskMode::Classification { classes: 7 }
        } else {
            TaskMode::Regression
        }
    }

    /// Shape information of every dataset this spec can produce.
    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            mode: self.mode(),
            dims: self.dims,
            max_lengths: [self.lengths[0].1, self.lengths[1].1, self.lengths[2].1],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (i, &(lo, hi)) in self.lengths.iter().enumerate() {
            if lo == 0 || lo > hi {
                return bad(format!("length range {i} is ({lo}, {hi})"));
            }
        }
        if self.dims.contains(&0) {
            return bad("feature dims must be positive".into());
        }
        if self.visual_lag.0 > self.visual_lag.1 || self.visual_lag.1 >= self.lengths[1].0 {
            return bad(format!("visual lag range {:?} does not fit the visual length", self.visual_lag));
        }
        let (w_lo, w_hi) = self.audio_window;
        if w_lo == 0 || w_lo > w_hi || w_hi > self.lengths[2].0 {
            return bad(format!("audio window range {:?} does not fit the audio length", self.audio_window));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        Ok(())
    }
}

/// Where the latent signal was planted in one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Planted {
    pub z: f64,
    pub keyword_step: usize,
    pub visual_lag: usize,
    /// `(start, len)` of the shifted audio window.
    pub audio_window: (usize, usize),
}

/// Seven-bin discretization of a score: `round(z)` clamped to `[-3, 3]`,
/// shifted to `0..7`.
pub fn score_class(z: f64) -> usize {
    (z.round().clamp(-3.0, 3.0) + 3.0) as usize
}

/// The unit-norm language keyword direction shared by a dataset.
pub fn keyword_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006b_6579_776f_7264);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Draws one sample with latent `z`.
pub fn generate_planted(
    rng: &mut ChaCha8Rng,
    spec: &GeneratorSpec,
    keyword: &[f64],
    z: f64,
    id: String,
) -> Result<(MultimodalSample, Planted)> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let draw = |rng: &mut ChaCha8Rng, len: usize, dim: usize| -> Vec<f64> {
        (0..len * dim)
            .map(|_| if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 })
            .collect()
    };
    let lens: Vec<usize> = spec
        .lengths
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..=hi))
        .collect();
    let [dl, dv, da] = spec.dims;

    let mut lang = draw(rng, lens[0], dl);
    let keyword_step = rng.random_range(0..lens[0]);
    for (x, k) in lang[keyword_step * dl..(keyword_step + 1) * dl].iter_mut().zip(keyword) {
        *x += k * z;
    }

    let mut vis = draw(rng, lens[1], dv);
    let visual_lag = rng.random_range(spec.visual_lag.0..=spec.visual_lag.1);
    let amplitude = z.abs() / 3.0;
    let phase = if z < 0.0 { std::f64::consts::PI } else { 0.0 };
    for t in visual_lag..lens[1] {
        let arg = 2.0 * std::f64::consts::PI * (t - visual_lag) as f64 / spec.visual_period + phase;
        vis[t * dv] += amplitude * arg.sin();
    }

    let mut aud = draw(rng, lens[2], da);
    let window = rng.random_range(spec.audio_window.0..=spec.audio_window.1);
    let start = rng.random_range(0..=lens[2] - window);
    for t in start..start + window {
        aud[t * da] += z / 3.0;
    }

    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let label = if spec.classification {
        Label::Class(score_class(z))
    } else {
        Label::score(z)
    };
    let sample = MultimodalSample {
        id,
        seqs: [
            Sequence::new(lens[0], dl, to_f32(lang))?,
            Sequence::new(lens[1], dv, to_f32(vis))?,
            Sequence::new(lens[2], da, to_f32(aud))?,
        ],
        label,
    };
    let planted = Planted {
        z,
        keyword_step,
        visual_lag,
        audio_window: (start, window),
    };
    Ok((sample, planted))
}

/// `n` samples, deterministic in `seed`.
pub fn generate_synthetic(n: usize, seed: u64, spec: &GeneratorSpec) -> Result<Vec<MultimodalSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let keyword = keyword_vector(seed, spec.dims[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let z = rng.random_range(-3.0..3.0);
            generate_planted(&mut rng, spec, &keyword, z, format!("syn-{seed}-{i:05}")).map(|(s, _)| s)
        })
        .collect()
}
