// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic meetings with planted group reactions.
//!
//! Participants sit still in a grid of video tiles. Each face's expression
//! posterior drifts around a personal resting expression by a mean-reverting
//! walk whose per-frame step is `noise_scale`; embeddings do the same around
//! an identity vector. A planted event makes a share of the participants jump
//! to a distant expression within two seconds of the onset, hold it, and jump
//! back together at the end of the event window.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::GroundTruthWindow;
use crate::geometry::BoundingBox;
use crate::io::{FeatureStream, FrameRecord, StreamFace, StreamMeta, DEFAULT_FPS};
use crate::tracking::{ExpressionLabel, FaceObservation, EMBEDDING_DIM, EXPRESSION_DIM};

/// Pull of the walk towards its anchor per frame.
const REVERSION: f64 = 0.1;
/// Share of the distance to the target category an expression jump may cover.
const MAX_JUMP_SHARE: f64 = 0.7;
const TILE: (f64, f64) = (160.0, 120.0);
const FACE: f64 = 80.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedEvent {
    pub onset_frame: u64,
    pub duration_frames: u64,
    pub affected_fraction: f64,
    /// Size of the expression and embedding jump, in vector-distance units.
    pub intensity: f64,
    #[serde(default = "default_label")]
    pub label: String,
}

fn default_label() -> String {
    "planted".to_string()
}

fn default_noise() -> f64 {
    0.01
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub participant_count: usize,
    pub duration_frames: u64,
    #[serde(default)]
    pub events: Vec<InjectedEvent>,
    /// Per-frame drift of the feature vectors.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "yes")]
    pub embeddings: bool,
    #[serde(default = "yes")]
    pub labels: bool,
}

impl SyntheticScenario {
    pub fn new(participant_count: usize, duration_frames: u64, seed: u64) -> Self {
        Self {
            participant_count,
            duration_frames,
            events: Vec::new(),
            noise_scale: default_noise(),
            seed,
            fps: DEFAULT_FPS,
            embeddings: true,
            labels: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.participant_count == 0 {
            return Err(Error::config("participant_count must be at least 1"));
        }
        if self.duration_frames == 0 {
            return Err(Error::config("duration_frames must be at least 1"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::config("noise_scale must be non-negative"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::config("fps must be positive"));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.onset_frame >= self.duration_frames {
                return Err(Error::config(format!(
                    "event {i}: onset lies beyond the meeting"
                )));
            }
            if e.duration_frames == 0 {
                return Err(Error::config(format!(
                    "event {i}: duration must be positive"
                )));
            }
            if !(e.affected_fraction > 0.0 && e.affected_fraction <= 1.0) {
                return Err(Error::config(format!(
                    "event {i}: affected_fraction must lie in (0, 1]"
                )));
            }
            if !(e.intensity.is_finite() && e.intensity >= 0.0) {
                return Err(Error::config(format!(
                    "event {i}: intensity must be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// How many participants an event moves.
    pub fn affected_count(&self, event: &InjectedEvent) -> usize {
        let n = self.participant_count;
        ((event.affected_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    }
}

// independent random streams, so planting an event leaves the baseline noise alone
const STREAM_SETUP: u64 = 0;
const STREAM_EVENTS: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian direction, optionally restricted to sum-zero vectors, made
/// orthogonal to `avoid` and scaled to unit length.
fn random_direction(rng: &mut impl Rng, dim: usize, sum_zero: bool, avoid: &[f64]) -> Vec<f64> {
    loop {
        let mut g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if sum_zero {
            let m = g.iter().sum::<f64>() / dim as f64;
            g.iter_mut().for_each(|x| *x -= m);
        }
        let a2: f64 = avoid.iter().map(|x| x * x).sum();
        if a2 > 1e-24 {
            let dot: f64 = g.iter().zip(avoid).map(|(x, a)| x * a).sum();
            g.iter_mut()
                .zip(avoid)
                .for_each(|(x, a)| *x -= dot / a2 * a);
        }
        let n = norm(&g);
        if n > 1e-9 {
            g.iter_mut().for_each(|x| *x /= n);
            return g;
        }
    }
}

/// Mean-reverting walk. Noise is orthogonal to the displacement, which keeps
/// the per-frame step length nearly constant at `sqrt(s^2 + (k d)^2)`.
struct Walk {
    value: Vec<f64>,
    anchor: Vec<f64>,
    simplex: bool,
}

impl Walk {
    fn step(&mut self, rng: &mut impl Rng, scale: f64) {
        let pull: Vec<f64> = self
            .anchor
            .iter()
            .zip(&self.value)
            .map(|(a, v)| a - v)
            .collect();
        let u = random_direction(rng, self.value.len(), self.simplex, &pull);
        for ((v, p), d) in self.value.iter_mut().zip(&pull).zip(&u) {
            *v += REVERSION * p + scale * d;
        }
        self.project();
    }

    fn shift(&mut self, delta: &[f64], sign: f64) {
        for ((v, a), d) in self.value.iter_mut().zip(self.anchor.iter_mut()).zip(delta) {
            *v += sign * d;
            *a += sign * d;
        }
        self.project();
    }

    fn project(&mut self) {
        if self.simplex {
            self.value.iter_mut().for_each(|x| *x = x.max(0.0));
            let s: f64 = self.value.iter().sum();
            self.value.iter_mut().for_each(|x| *x /= s);
        }
    }
}

struct Participant {
    tile: BoundingBox,
    expression: Walk,
    embedding: Walk,
    dominant: usize,
}

#[derive(Clone, Debug)]
struct Jump {
    frame: u64,
    participant: usize,
    expression: Vec<f64>,
    embedding: Vec<f64>,
    sign: f64,
}

fn setup(s: &SyntheticScenario) -> Vec<Participant> {
    let mut rng = rng_for(s.seed, STREAM_SETUP);
    let cols = (s.participant_count as f64).sqrt().ceil() as usize;
    (0..s.participant_count)
        .map(|p| {
            let (row, col) = (p / cols, p % cols);
            let (x0, y0) = (col as f64 * TILE.0 + 40.0, row as f64 * TILE.1 + 20.0);
            let dominant = rng.random_range(0..EXPRESSION_DIM);
            let weights: Vec<f64> = (0..EXPRESSION_DIM)
                .map(|_| rng.random_range(0.5..1.0))
                .collect();
            let total: f64 = weights.iter().sum();
            let rest: Vec<f64> = weights
                .iter()
                .enumerate()
                .map(|(i, w)| 0.6 * w / total + if i == dominant { 0.4 } else { 0.0 })
                .collect();
            let identity = random_direction(&mut rng, EMBEDDING_DIM, false, &[]);
            Participant {
                tile: BoundingBox::new(x0, y0, x0 + FACE, y0 + FACE)
                    .expect("tile geometry is valid"),
                expression: Walk {
                    value: rest.clone(),
                    anchor: rest,
                    simplex: true,
                },
                embedding: Walk {
                    value: identity.clone(),
                    anchor: identity,
                    simplex: false,
                },
                dominant,
            }
        })
        .collect()
}

fn plan_jumps(s: &SyntheticScenario, people: &[Participant]) -> Vec<Jump> {
    let mut rng = rng_for(s.seed, STREAM_EVENTS);
    let max_jitter = (2.0 * s.fps).floor() as u64;
    let mut jumps = Vec::new();
    for e in s.events.iter().filter(|e| e.intensity > 0.0) {
        let chosen = sample(&mut rng, s.participant_count, s.affected_count(e));
        let back = e.onset_frame + e.duration_frames - 1;
        for p in chosen.into_iter() {
            let jitter = rng.random_range(0..=max_jitter.min(e.duration_frames.saturating_sub(2)));
            let onset = e.onset_frame + jitter;
            let rest = &people[p].expression.anchor;
            let target = loop {
                let k = rng.random_range(0..EXPRESSION_DIM);
                if k != people[p].dominant {
                    break k;
                }
            };
            let toward: Vec<f64> = (0..EXPRESSION_DIM)
                .map(|i| f64::from(u8::from(i == target)) - rest[i])
                .collect();
            let dist = norm(&toward);
            let t = e.intensity.min(MAX_JUMP_SHARE * dist);
            let expression: Vec<f64> = toward.iter().map(|x| t * x / dist).collect();
            let embedding: Vec<f64> = random_direction(&mut rng, EMBEDDING_DIM, false, &[])
                .into_iter()
                .map(|x| x * e.intensity)
                .collect();
            jumps.push(Jump {
                frame: onset,
                participant: p,
                expression: expression.clone(),
                embedding: embedding.clone(),
                sign: 1.0,
            });
            jumps.push(Jump {
                frame: back.max(onset + 1),
                participant: p,
                expression,
                embedding,
                sign: -1.0,
            });
        }
    }
    // stable: events apply in scenario order within a frame
    jumps.sort_by_key(|j| (j.frame, j.participant));
    jumps
}

/// Build the stream and the windows that were planted. Events of intensity
/// zero change nothing and are left out of the truth.
pub fn generate(s: &SyntheticScenario) -> Result<(FeatureStream, Vec<GroundTruthWindow>)> {
    s.validate()?;
    let mut people = setup(s);
    let jumps = plan_jumps(s, &people);
    let mut rng = rng_for(s.seed, STREAM_NOISE);
    let mut next_jump = 0;
    let mut frames = Vec::with_capacity(s.duration_frames as usize);
    for f in 0..s.duration_frames {
        let mut faces = Vec::with_capacity(people.len());
        for person in people.iter_mut() {
            if f > 0 {
                person.expression.step(&mut rng, s.noise_scale);
                if s.embeddings {
                    person.embedding.step(&mut rng, s.noise_scale);
                }
            }
        }
        while next_jump < jumps.len() && jumps[next_jump].frame == f {
            let j = &jumps[next_jump];
            people[j.participant]
                .expression
                .shift(&j.expression, j.sign);
            people[j.participant].embedding.shift(&j.embedding, j.sign);
            next_jump += 1;
        }
        for person in &people {
            let t = person.tile;
            let mut jitter = || rng.random_range(-1.0..1.0);
            let bbox = BoundingBox::new(
                t.x_min + jitter(),
                t.y_min + jitter(),
                t.x_max + jitter(),
                t.y_max + jitter(),
            )?;
            let mut obs =
                FaceObservation::new(f, bbox).with_expression(person.expression.value.clone());
            if s.embeddings {
                obs = obs.with_embedding(person.embedding.value.clone());
            }
            if s.labels {
                obs.expression_label = ExpressionLabel::argmax(&person.expression.value);
            }
            faces.push(StreamFace {
                channel: 0,
                observation: obs,
            });
        }
        frames.push(FrameRecord {
            frame_index: f,
            faces,
        });
    }
    let mut truth: Vec<GroundTruthWindow> = s
        .events
        .iter()
        .filter(|e| e.intensity > 0.0)
        .map(|e| GroundTruthWindow {
            start_frame: e.onset_frame,
            end_frame: (e.onset_frame + e.duration_frames - 1).min(s.duration_frames - 1),
            label: e.label.clone(),
        })
        .collect();
    truth.sort_by_key(|w| (w.start_frame, w.end_frame));
    let meta = StreamMeta {
        fps: s.fps,
        frame_count: s.duration_frames,
        source: format!("synthetic-{}", s.seed),
        ..StreamMeta::default()
    };
    Ok((FeatureStream { meta, frames }, truth))
}

/// Read scenarios from a JSON file (one object or an array of them) or a
/// TOML file (one scenario at the top level, or a `[[scenario]]` list).
pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<SyntheticScenario>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    let json = path
        .extension()
        .is_some_and(|x| x.eq_ignore_ascii_case("json"));
    let parsed = if json {
        parse_json_scenarios(&text)
    } else {
        parse_toml_scenarios(&text)
    };
    let scenarios = parsed.map_err(|e| e.in_file(path))?;
    if scenarios.is_empty() {
        return Err(Error::config("no scenarios").in_file(path));
    }
    Ok(scenarios)
}

pub fn parse_json_scenarios(text: &str) -> Result<Vec<SyntheticScenario>> {
    let bad = |e: serde_json::Error| Error::config(e.to_string());
    match serde_json::from_str(text).map_err(bad)? {
        serde_json::Value::Array(items) => items
            .into_iter()
            .map(|v| serde_json::from_value(v).map_err(bad))
            .collect(),
        v => Ok(vec![serde_json::from_value(v).map_err(bad)?]),
    }
}

pub fn parse_toml_scenarios(text: &str) -> Result<Vec<SyntheticScenario>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Many {
        scenario: Vec<SyntheticScenario>,
    }
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    let bad = |e: toml::de::Error| Error::config(e.to_string());
    if table.contains_key("scenario") {
        Ok(Many::deserialize(table).map_err(bad)?.scenario)
    } else {
        Ok(vec![SyntheticScenario::deserialize(table).map_err(bad)?])
    }
}

/// Ranges for drawing random meetings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeetingSampler {
    pub participants: (usize, usize),
    pub events: (usize, usize),
    /// Event intensity as a multiple of `noise_scale`.
    pub intensity_factor: (f64, f64),
    pub affected_fraction: (f64, f64),
    /// Event durations are log-uniform over this range.
    pub event_seconds: (f64, f64),
    /// Calm frames before the first event and between events (minimum).
    pub gap_frames: u64,
    pub noise_scale: f64,
    pub fps: f64,
    pub embeddings: bool,
}

impl Default for MeetingSampler {
    fn default() -> Self {
        Self {
            participants: (4, 25),
            events: (1, 3),
            intensity_factor: (8.0, 12.0),
            affected_fraction: (0.6, 1.0),
            event_seconds: (2.0, 40.0),
            gap_frames: 60,
            noise_scale: default_noise(),
            fps: DEFAULT_FPS,
            embeddings: true,
        }
    }
}

impl MeetingSampler {
    pub fn sample(&self, seed: u64) -> SyntheticScenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(self.participants.0..=self.participants.1);
        let k = rng.random_range(self.events.0..=self.events.1);
        let mut t = 0u64;
        let mut events = Vec::with_capacity(k);
        for _ in 0..k {
            t += rng.random_range(self.gap_frames..=2 * self.gap_frames);
            let (lo, hi) = (self.event_seconds.0.ln(), self.event_seconds.1.ln());
            let secs = rng.random_range(lo..=hi).exp();
            let duration = ((secs * self.fps).round() as u64).max(2);
            events.push(InjectedEvent {
                onset_frame: t,
                duration_frames: duration,
                affected_fraction: rng
                    .random_range(self.affected_fraction.0..=self.affected_fraction.1),
                intensity: self.noise_scale
                    * rng.random_range(self.intensity_factor.0..=self.intensity_factor.1),
                label: default_label(),
            });
            t += duration;
        }
        t += rng.random_range(self.gap_frames..=2 * self.gap_frames);
        SyntheticScenario {
            participant_count: n,
            duration_frames: t,
            events,
            noise_scale: self.noise_scale,
            seed,
            fps: self.fps,
            embeddings: self.embeddings,
            labels: true,
        }
    }

    /// Same meeting shape with no events.
    pub fn sample_quiet(&self, seed: u64) -> SyntheticScenario {
        let mut s = self.sample(seed);
        s.events.clear();
        s
    }
}
