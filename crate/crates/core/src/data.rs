//! Synthetic multimodal episodes.
//!
//! An episode is a timeline of non-overlapping events, each with a class
//! out of [`N_CLASSES`]. Every stream is rendered from that timeline:
//!
//! * `semantic`: one-hot class axis per frame (background has its own axis),
//!   plus small noise held over each hold segment;
//! * `sync`: onset, activity, offset and hold-change impulses;
//! * `text`: one class embedding per event, in order;
//! * `audio`: per-class oscillator across the latent channels inside event
//!   windows, background noise everywhere.
//!
//! All streams share the audio frame rate. Channel phases are spread evenly
//! over a full turn, so the summed per-frame energy of an active oscillator is
//! exactly `LATENT_DIM / 2` whatever the phase.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;

use crate::conditioning::{ConditionDims, RawConditions};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal, seeded, Rng};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 8;
pub const LATENT_DIM: usize = 8;
pub const SEMANTIC_DIM: usize = 12;
pub const SYNC_DIM: usize = 4;
pub const TEXT_DIM: usize = 12;
/// Semantic axis reserved for frames outside every event.
pub const BACKGROUND_AXIS: usize = N_CLASSES;
pub const MIN_DURATION: usize = 4;
pub const MAX_DURATION: usize = 10;
pub const MIN_GAP: usize = 2;
pub const BACKGROUND_STD: f64 = 0.05;
pub const SEMANTIC_NOISE: f64 = 0.05;
/// Splits index their episodes below this bound, so `(split seed, index)`
/// pairs of distinct split seeds never collide.
pub const SPLIT_STRIDE: u64 = 1 << 20;

/// Condition widths of the generated streams at model width `d_model`.
pub fn condition_dims(d_model: usize) -> ConditionDims {
    ConditionDims {
        semantic: SEMANTIC_DIM,
        sync: SYNC_DIM,
        text: TEXT_DIM,
        latent: LATENT_DIM,
        model: d_model,
    }
}

/// Oscillation frequency of a class in cycles per frame.
pub fn class_frequency(class: usize) -> f64 {
    0.03 + 0.055 * class as f64
}

pub fn channel_phase(channel: usize) -> f64 {
    2.0 * PI * channel as f64 / LATENT_DIM as f64
}

/// Latent frame of class `class` at (absolute) frame `frame`.
pub fn oscillator(class: usize, frame: usize, out: &mut [f64]) {
    let w = 2.0 * PI * class_frequency(class) * frame as f64;
    for (d, o) in out.iter_mut().enumerate() {
        *o = libm::sin(w + channel_phase(d));
    }
}

/// Fixed orthogonal class embedding (an axis of the semantic/text space).
pub fn class_embedding(class: usize) -> Vec<f64> {
    let mut e = vec![0.0; SEMANTIC_DIM];
    e[class] = 1.0;
    e
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub class: usize,
    /// 1-based first frame.
    pub onset: usize,
    pub duration: usize,
}

impl Event {
    /// 0-based half-open frame range.
    pub fn frames(&self) -> core::ops::Range<usize> {
        self.onset - 1..self.onset - 1 + self.duration
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub redundancy: f64,
    pub events: Vec<Event>,
    pub semantic: Tensor,
    pub sync: Tensor,
    pub text: Tensor,
    pub audio: Tensor,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn conditions(&self) -> RawConditions {
        RawConditions {
            semantic: self.semantic.clone(),
            sync: self.sync.clone(),
            text: self.text.clone(),
        }
    }

    /// 1 inside event windows, 0 elsewhere.
    pub fn envelope(&self) -> Vec<f64> {
        let mut env = vec![0.0; self.len()];
        for e in &self.events {
            for i in e.frames() {
                env[i] = 1.0;
            }
        }
        env
    }

    /// Class per frame, `None` for background.
    pub fn frame_classes(&self) -> Vec<Option<usize>> {
        let mut c = vec![None; self.len()];
        for e in &self.events {
            for i in e.frames() {
                c[i] = Some(e.class);
            }
        }
        c
    }

    /// Semantic label per frame: the event class, or [`BACKGROUND_AXIS`].
    pub fn segment_labels(&self) -> Vec<usize> {
        let classes = self.frame_classes();
        let mut labels = Vec::with_capacity(self.len());
        for c in classes {
            labels.push(c.unwrap_or(BACKGROUND_AXIS));
        }
        labels
    }

    /// Number of maximal runs of equal semantic content.
    pub fn distinct_segments(&self) -> usize {
        let labels = self.segment_labels();
        1 + labels.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// Named tensors for persistence; [`Episode::from_tensors`] inverts it.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut ev = Vec::with_capacity(3 * self.events.len());
        for e in &self.events {
            ev.extend_from_slice(&[e.class as f64, e.onset as f64, e.duration as f64]);
        }
        vec![
            (String::from("meta"), Tensor::row_vector(&[(self.seed >> 32) as f64, (self.seed & 0xFFFF_FFFF) as f64, self.redundancy])),
            (String::from("events"), Tensor::from_vec(self.events.len(), 3, ev)),
            (String::from("semantic"), self.semantic.clone()),
            (String::from("sync"), self.sync.clone()),
            (String::from("text"), self.text.clone()),
            (String::from("audio"), self.audio.clone()),
        ]
    }

    pub fn from_tensors(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Invalid(format!("episode entry {name} missing")))
        };
        let meta = find("meta")?;
        if meta.numel() != 3 {
            return Err(Error::invalid("episode meta must hold three values"));
        }
        let ev = find("events")?;
        let events = (0..ev.shape()[0])
            .map(|i| Event {
                class: ev.get(i, 0) as usize,
                onset: ev.get(i, 1) as usize,
                duration: ev.get(i, 2) as usize,
            })
            .collect();
        Ok(Self {
            seed: ((meta.data()[0] as u64) << 32) | meta.data()[1] as u64,
            redundancy: meta.data()[2],
            events,
            semantic: find("semantic")?.clone(),
            sync: find("sync")?.clone(),
            text: find("text")?.clone(),
            audio: find("audio")?.clone(),
        })
    }
}

/// Shortest length that fits `n_events` events with their gaps.
pub fn min_length(n_events: usize) -> usize {
    if n_events == 0 {
        0
    } else {
        n_events * MIN_DURATION + (n_events - 1) * MIN_GAP
    }
}

fn draw_events(rng: &mut Rng, length: usize, n_events: usize) -> Vec<Event> {
    if n_events == 0 {
        return Vec::new();
    }
    let mut durations: Vec<usize> = (0..n_events).map(|_| rng.random_range(MIN_DURATION..=MAX_DURATION)).collect();
    let budget = length - (n_events - 1) * MIN_GAP;
    while durations.iter().sum::<usize>() > budget {
        let i = (0..n_events).max_by_key(|&i| (durations[i], core::cmp::Reverse(i))).unwrap();
        durations[i] -= 1;
    }
    // slack spread over the n+1 gaps by sorted uniform cuts
    let slack = budget - durations.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..n_events).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut events = Vec::with_capacity(n_events);
    let mut cursor = 0;
    let mut prev_cut = 0;
    let mut prev_class = usize::MAX;
    for (i, &d) in durations.iter().enumerate() {
        cursor += cuts[i] - prev_cut + if i > 0 { MIN_GAP } else { 0 };
        prev_cut = cuts[i];
        let mut class = rng.random_range(0..N_CLASSES);
        if class == prev_class {
            class = (class + 1 + rng.random_range(0..N_CLASSES - 1)) % N_CLASSES;
        }
        prev_class = class;
        events.push(Event { class, onset: cursor + 1, duration: d });
        cursor += d;
    }
    events
}

/// Hold length inside an event of `duration` frames.
pub fn hold_length(duration: usize, redundancy: f64) -> usize {
    1 + libm::round(redundancy * (duration - 1) as f64) as usize
}

/// Builds one episode deterministically from `seed`.
pub fn generate_episode(seed: u64, length: usize, n_events: usize, redundancy: f64) -> Result<Episode> {
    if length == 0 {
        return Err(Error::invalid("generate_episode: length must be at least 1"));
    }
    if !(0.0..=1.0).contains(&redundancy) {
        return Err(Error::Domain { op: "generate_episode(redundancy)", index: 0 });
    }
    if min_length(n_events) > length {
        return Err(Error::Invalid(format!("{n_events} events do not fit in {length} frames")));
    }
    let mut rng = seeded(seed);
    let events = draw_events(&mut rng, length, n_events);

    let mut semantic = Tensor::zeros(&[length, SEMANTIC_DIM]);
    let mut sync = Tensor::zeros(&[length, SYNC_DIM]);
    let mut audio = Tensor::zeros(&[length, LATENT_DIM]);
    for v in audio.data_mut() {
        *v = BACKGROUND_STD * normal(&mut rng);
    }
    let mut noise = [0.0; SEMANTIC_DIM];
    let mut osc = [0.0; LATENT_DIM];
    let mut in_event = vec![false; length];
    for e in &events {
        let hold = hold_length(e.duration, redundancy);
        let start = e.onset - 1;
        for (k, i) in e.frames().enumerate() {
            in_event[i] = true;
            if k % hold == 0 {
                for n in noise.iter_mut() {
                    *n = SEMANTIC_NOISE * normal(&mut rng);
                }
                oscillator(e.class, start + k, &mut osc);
                if k > 0 {
                    sync.set(i, 3, 1.0);
                }
            }
            let row = semantic.row_mut(i);
            for (r, n) in row.iter_mut().zip(&noise) {
                *r = *n;
            }
            row[e.class] += 1.0;
            for (a, o) in audio.row_mut(i).iter_mut().zip(&osc) {
                *a += o;
            }
            sync.set(i, 1, 1.0);
        }
        sync.set(start, 0, 1.0);
        sync.set(start + e.duration - 1, 2, 1.0);
    }
    // background gets its own axis with noise held across each run
    let mut i = 0;
    while i < length {
        if in_event[i] {
            i += 1;
            continue;
        }
        for n in noise.iter_mut() {
            *n = SEMANTIC_NOISE * normal(&mut rng);
        }
        while i < length && !in_event[i] {
            let row = semantic.row_mut(i);
            for (r, n) in row.iter_mut().zip(&noise) {
                *r = *n;
            }
            row[BACKGROUND_AXIS] += 1.0;
            i += 1;
        }
    }
    let text = if events.is_empty() {
        Tensor::zeros(&[1, TEXT_DIM])
    } else {
        let rows: Vec<Vec<f64>> = events.iter().map(|e| class_embedding(e.class)).collect();
        Tensor::from_fn(rows.len(), TEXT_DIM, |i, j| rows[i][j])
    };
    Ok(Episode {
        seed,
        redundancy,
        events,
        semantic,
        sync,
        text,
        audio,
    })
}

/// Parameters of a reproducible episode split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    pub size: usize,
    pub length: usize,
    pub redundancy: f64,
    /// Expected events per 32 frames; each episode draws its count uniformly
    /// from `1..=2·rate·length/32`, capped by what fits.
    pub event_rate: f64,
}

impl SplitSpec {
    pub fn new(seed: u64, size: usize, length: usize) -> Self {
        Self {
            seed,
            size,
            length,
            redundancy: 0.0,
            event_rate: 1.5,
        }
    }

    /// Seed of the `index`-th episode.
    pub fn episode_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(SPLIT_STRIDE).wrapping_add(index as u64)
    }

    pub fn episode(&self, index: usize) -> Result<Episode> {
        if index as u64 >= SPLIT_STRIDE {
            return Err(Error::invalid("split index out of range"));
        }
        let seed = self.episode_seed(index);
        let mut rng = seeded(derive_seed(&[seed, 0xE7E4]));
        let mut fit = 0;
        while min_length(fit + 1) <= self.length {
            fit += 1;
        }
        let upper = (libm::round(2.0 * self.event_rate * self.length as f64 / 32.0) as usize).clamp(1, fit.max(1));
        let n = if fit == 0 { 0 } else { rng.random_range(1..=upper) };
        generate_episode(seed, self.length, n, self.redundancy)
    }
}

/// `size` episodes of length `length` in a fixed order.
pub fn make_split(seed: u64, size: usize, length: usize) -> Result<Vec<Episode>> {
    make_split_with(&SplitSpec::new(seed, size, length))
}

pub fn make_split_with(spec: &SplitSpec) -> Result<Vec<Episode>> {
    (0..spec.size).map(|i| spec.episode(i)).collect()
}

/// A single-class chunk without gaps, used to build class references.
pub fn clean_class_chunk(rng: &mut Rng, class: usize, len: usize) -> Tensor {
    let offset = rng.random_range(0..1000);
    let mut out = Tensor::zeros(&[len, LATENT_DIM]);
    for i in 0..len {
        oscillator(class, offset + i, out.row_mut(i));
        for v in out.row_mut(i) {
            *v += BACKGROUND_STD * normal(rng);
        }
    }
    out
}
