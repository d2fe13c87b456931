//! Seeded stand-in for a real VLM.
//!
//! Each sample draws a latent confidence `c` from the stage-1 confidence range. Every
//! generated step puts probability near `c` on its top token, and the stage-1 answer is
//! correct with probability `mean_top_prob ^ calibration_exponent`, so less confident
//! samples are wrong more often. Task attention carries a Gaussian bump at a random
//! token cell on the planted layer; generic attention is uniform. Stage 2 raises every
//! top probability by `boost * (1 - p)` when the requested box covers the bump, and
//! reuses the stage-1 correctness draw against the boosted confidence.

use super::{
    Backend, BackendError, InferenceStep, SampleTrace, Stage1Output, Stage2Output,
    MAX_OUTPUT_TOKENS,
};
use crate::image::RawImage;
use crate::roi::{self, AttentionTrace, BoundingBox, GridGeometry};
use crate::uncertainty::{TokenDistribution, TokenProb};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub seed: u64,
    pub num_samples: usize,
    pub grid_side: u32,
    pub encoder_resolution: u32,
    pub num_layers: usize,
    /// Layer carrying the planted hotspot.
    pub attention_layer: usize,
    pub vocab_size: u32,
    pub top_k: usize,
    pub original_width: u32,
    pub original_height: u32,
    pub stage1_confidence_range: (f64, f64),
    pub stage2_confidence_boost: f64,
    pub answer_length_range: (usize, usize),
    pub hotspot_sigma: f64,
    pub hotspot_amplitude: f64,
    pub noise_floor: f64,
    pub calibration_exponent: f64,
    /// Window scales used when recording the stage-2 bounding box.
    pub window_scales: Vec<f64>,
    pub epsilon: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            num_samples: 1000,
            grid_side: 24,
            encoder_resolution: 336,
            num_layers: 4,
            attention_layer: 2,
            vocab_size: 32_000,
            top_k: 8,
            original_width: 672,
            original_height: 672,
            stage1_confidence_range: (0.15, 1.0),
            stage2_confidence_boost: 0.6,
            answer_length_range: (1, 8),
            hotspot_sigma: 1.5,
            hotspot_amplitude: 8.0,
            noise_floor: 1.0,
            calibration_exponent: 1.0,
            window_scales: crate::server::DEFAULT_WINDOW_SCALES.to_vec(),
            epsilon: roi::DEFAULT_EPSILON,
        }
    }
}

impl SynthParams {
    /// Small images and grids, for fast tests.
    pub fn small() -> Self {
        Self {
            num_samples: 16,
            grid_side: 8,
            encoder_resolution: 32,
            original_width: 64,
            original_height: 48,
            ..Self::default()
        }
    }

    pub fn geometry(&self) -> Result<GridGeometry, BackendError> {
        GridGeometry::new(self.grid_side, self.encoder_resolution)
            .map_err(|e| BackendError::InvalidParams(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidParams(m.to_owned()));
        self.geometry()?;
        let (lo, hi) = self.stage1_confidence_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("stage1_confidence_range must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.stage2_confidence_boost) {
            return bad("stage2_confidence_boost must be in [0, 1]");
        }
        let (amin, amax) = self.answer_length_range;
        if !(amin >= 1 && amin <= amax && amax <= MAX_OUTPUT_TOKENS) {
            return bad("answer_length_range must satisfy 1 <= min <= max <= 20");
        }
        if self.num_layers == 0 || self.attention_layer >= self.num_layers {
            return bad("attention_layer must index one of num_layers");
        }
        if self.top_k < 2 || self.top_k > self.vocab_size as usize {
            return bad("top_k must be in 2..=vocab_size");
        }
        if self.original_width == 0
            || self.original_height == 0
            || self.original_width > u32::from(u16::MAX)
            || self.original_height > u32::from(u16::MAX)
        {
            return bad("original image dimensions must be in 1..=65535");
        }
        if !(self.hotspot_sigma > 0.0 && self.hotspot_sigma.is_finite()) {
            return bad("hotspot_sigma must be positive");
        }
        if !(self.hotspot_amplitude >= 0.0 && self.noise_floor >= 0.0)
            || !(self.hotspot_amplitude + self.noise_floor > 0.0)
            || !(self.hotspot_amplitude + self.noise_floor).is_finite()
        {
            return bad("hotspot_amplitude and noise_floor must be non-negative, not both zero");
        }
        if !(self.calibration_exponent > 0.0 && self.calibration_exponent.is_finite()) {
            return bad("calibration_exponent must be positive");
        }
        roi::candidate_sides(&self.window_scales, self.grid_side)
            .map_err(|e| BackendError::InvalidParams(e.to_string()))?;
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

const LATENT: u64 = 1;
const STAGE1: u64 = 2;
const ATTENTION: u64 = 3;
const STAGE2: u64 = 4;
const IMAGE: u64 = 5;

/// Per-sample quantities shared by both stages.
struct Latent {
    top_probs: Vec<f64>,
    correctness_draw: f64,
    hotspot: (u32, u32),
}

/// Question text the synthetic edge asks for sample `index`.
pub fn synthetic_question(index: u64) -> String {
    format!("What is shown in sample {index}?")
}

/// Deterministic placeholder for a sample's original image.
pub fn synthetic_image(sample_id: &str, width: u32, height: u32) -> RawImage {
    let h = sample_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |acc, b| (acc ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    let mut rng = stream(&[IMAGE, h]);
    let base: [u8; 3] = rng.random();
    let (fx, fy) = (rng.random_range(1..7u32), rng.random_range(1..7u32));
    // red follows x and blue carries the stripes, so rows differ only in green and
    // in which of the two stripe phases they use
    let row_len = 3 * width as usize;
    let templates: [Vec<u8>; 2] = [0, 1].map(|phase| {
        let mut row = vec![0u8; row_len];
        for (x, px) in (0..width).zip(row.chunks_exact_mut(3)) {
            let stripe = if (x * fx / 16 + phase) % 2 == 0 { 40 } else { 0 };
            px[0] = base[0].wrapping_add((x * 255 / width) as u8);
            px[2] = base[2].wrapping_add(stripe);
        }
        row
    });
    let mut pixels = vec![0u8; row_len * height as usize];
    for (y, row) in (0..height).zip(pixels.chunks_exact_mut(row_len)) {
        row.copy_from_slice(&templates[(y * fy / 16 % 2) as usize]);
        let g = base[1].wrapping_add((y * 255 / height) as u8);
        row.chunks_exact_mut(3).for_each(|px| px[1] = g);
    }
    RawImage::new(width, height, pixels).expect("dimensions are positive")
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    params: SynthParams,
    geometry: GridGeometry,
}

impl SyntheticBackend {
    pub fn new(params: SynthParams) -> Result<Self, BackendError> {
        params.validate()?;
        let geometry = params.geometry()?;
        Ok(Self { params, geometry })
    }

    pub fn params(&self) -> &SynthParams {
        &self.params
    }

    fn check(&self, index: u64) -> Result<(), BackendError> {
        if index < self.params.num_samples as u64 {
            Ok(())
        } else {
            Err(BackendError::UnknownSample(index))
        }
    }

    fn latent(&self, index: u64) -> Latent {
        let p = &self.params;
        let mut rng = stream(&[p.seed, index, LATENT]);
        let (lo, hi) = p.stage1_confidence_range;
        let confidence = lo + (hi - lo) * rng.random::<f64>();
        let len = rng.random_range(p.answer_length_range.0..=p.answer_length_range.1);
        let jitter = 0.15 * (hi - lo);
        let top_probs = (0..len)
            .map(|_| (confidence + jitter * (2.0 * rng.random::<f64>() - 1.0)).clamp(lo, hi))
            .collect();
        let correctness_draw = rng.random::<f64>();
        let g = p.grid_side;
        let hotspot = (rng.random_range(0..g), rng.random_range(0..g));
        Latent {
            top_probs,
            correctness_draw,
            hotspot,
        }
    }

    /// Token cell `(row, col)` at the centre of the planted attention bump.
    pub fn hotspot(&self, index: u64) -> Result<(u32, u32), BackendError> {
        self.check(index)?;
        Ok(self.latent(index).hotspot)
    }

    fn steps(&self, rng: &mut ChaCha8Rng, top_probs: &[f64]) -> Vec<InferenceStep> {
        top_probs
            .iter()
            .map(|&top| {
                let dist = distribution(rng, top, self.params.top_k, self.params.vocab_size);
                InferenceStep::greedy(dist).expect("distribution has a top entry")
            })
            .collect()
    }

    fn is_correct(&self, draw: f64, top_probs: &[f64]) -> bool {
        let mean = top_probs.iter().sum::<f64>() / top_probs.len() as f64;
        draw < mean.powf(self.params.calibration_exponent)
    }

    fn attention(&self, index: u64, hotspot: (u32, u32)) -> (AttentionTrace, AttentionTrace) {
        let p = &self.params;
        let g = p.grid_side as usize;
        let n_v = g * g;
        let mut rng = stream(&[p.seed, index, ATTENTION]);
        let two_sigma_sq = 2.0 * p.hotspot_sigma * p.hotspot_sigma;
        let task: Vec<Vec<f64>> = (0..p.num_layers)
            .map(|layer| {
                let mut row: Vec<f64> = (0..n_v)
                    .map(|i| {
                        let noise = p.noise_floor * rng.random::<f64>();
                        if layer != p.attention_layer {
                            return noise;
                        }
                        let dr = (i / g) as f64 - f64::from(hotspot.0);
                        let dc = (i % g) as f64 - f64::from(hotspot.1);
                        noise + p.hotspot_amplitude * (-(dr * dr + dc * dc) / two_sigma_sq).exp()
                    })
                    .collect();
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|v| *v /= total);
                }
                row
            })
            .collect();
        let generic = vec![vec![1.0 / n_v as f64; n_v]; p.num_layers];
        (
            AttentionTrace::new(task).expect("square, non-negative"),
            AttentionTrace::new(generic).expect("square, non-negative"),
        )
    }
}

/// Top-K distribution with `top` on the first entry and a geometric tail capped at `top`.
fn distribution(rng: &mut ChaCha8Rng, top: f64, top_k: usize, vocab: u32) -> TokenDistribution {
    let ids = index::sample(rng, vocab as usize, top_k);
    let mut ids = ids.iter().map(|i| i as u32);
    let mut entries = vec![TokenProb {
        token: ids.next().unwrap(),
        prob: top,
    }];
    let rest = 1.0 - top;
    if rest > 0.0 {
        let ratio = rng.random_range(0.3..0.9);
        let weights: Vec<f64> = (1..top_k).map(|k| f64::powi(ratio, k as i32)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut tail = rest * rng.random_range(0.7..0.95);
        // keep the runner-up no more likely than the top token
        tail = tail.min(top * wsum / weights[0]);
        for (w, token) in weights.iter().zip(ids) {
            entries.push(TokenProb {
                token,
                prob: (tail * w / wsum).min(top),
            });
        }
    }
    let explicit: f64 = entries.iter().map(|e| e.prob).sum();
    let residual = (1.0 - explicit).clamp(0.0, 1.0);
    TokenDistribution::new(entries, residual, vocab).expect("constructed to be valid")
}

fn answer_text(steps: &[InferenceStep]) -> String {
    steps
        .iter()
        .map(|s| format!("t{}", s.chosen_token))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Backend for SyntheticBackend {
    fn num_samples(&self) -> usize {
        self.params.num_samples
    }

    fn sample_id(&self, index: u64) -> Result<String, BackendError> {
        self.check(index)?;
        Ok(format!("syn{index:06}"))
    }

    fn infer_stage1(&self, index: u64) -> Result<Stage1Output, BackendError> {
        self.check(index)?;
        let latent = self.latent(index);
        let mut rng = stream(&[self.params.seed, index, STAGE1]);
        let steps = self.steps(&mut rng, &latent.top_probs);
        let (task_attention, generic_attention) = self.attention(index, latent.hotspot);
        Ok(Stage1Output {
            answer: answer_text(&steps),
            correct: self.is_correct(latent.correctness_draw, &latent.top_probs),
            steps,
            task_attention,
            generic_attention,
            geometry: self.geometry,
            attention_layer: self.params.attention_layer,
        })
    }

    fn infer_stage2(&self, index: u64, bbox: BoundingBox) -> Result<Stage2Output, BackendError> {
        self.check(index)?;
        let g = self.params.grid_side;
        bbox.validate(g).map_err(|e| BackendError::Fault(e.to_string()))?;
        let latent = self.latent(index);
        let boost = if bbox.contains(latent.hotspot.0, latent.hotspot.1, g) {
            self.params.stage2_confidence_boost
        } else {
            0.0
        };
        let top_probs: Vec<f64> = latent
            .top_probs
            .iter()
            .map(|&p| p + boost * (1.0 - p))
            .collect();
        let mut rng = stream(&[self.params.seed, index, STAGE2, u64::from(bbox.b1), u64::from(bbox.b2)]);
        let steps = self.steps(&mut rng, &top_probs);
        Ok(Stage2Output {
            answer: answer_text(&steps),
            correct: self.is_correct(latent.correctness_draw, &top_probs),
            steps,
        })
    }
}

/// Generates a full trace collection. The recorded box is what the relative-attention
/// window search returns on each sample's planted attention.
pub fn synth_generate(params: &SynthParams) -> Result<Vec<SampleTrace>, BackendError> {
    let backend = SyntheticBackend::new(params.clone())?;
    (0..params.num_samples as u64)
        .map(|i| {
            let s1 = backend.infer_stage1(i)?;
            let bbox = roi::locate(
                &s1.task_attention,
                &s1.generic_attention,
                s1.attention_layer,
                params.epsilon,
                &s1.geometry,
                &params.window_scales,
            )
            .map_err(|e| BackendError::Fault(e.to_string()))?;
            let s2 = backend.infer_stage2(i, bbox)?;
            Ok(SampleTrace {
                sample_id: backend.sample_id(i)?,
                original_width: params.original_width,
                original_height: params.original_height,
                question: synthetic_question(i),
                vocab_size: params.vocab_size,
                geometry: s1.geometry,
                attention_layer: s1.attention_layer,
                stage1_steps: s1.steps,
                task_attention: s1.task_attention,
                generic_attention: s1.generic_attention,
                recorded_bbox: bbox,
                stage2_steps: s2.steps,
                stage1_answer: s1.answer,
                stage2_answer: s2.answer,
                stage1_correct: s1.correct,
                stage2_correct: s2.correct,
            })
        })
        .collect()
}
