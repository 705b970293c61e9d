//! Deterministic synthetic corpora: tonal/noise audio prototypes with POI contexts, and
//! simulated rater annotations.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_manifest, ClipRecord, DatasetError};
use crate::features::parallel_map;
use crate::signal::{write_wav, SignalError, CLIP_SAMPLES, SAMPLE_RATE};
use crate::stats::AnnotationMatrix;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub freq: f64,
    pub amp: f64,
    /// Amplitude-modulation rate in Hz; 0 leaves the tone steady.
    pub am_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioPrototype {
    pub tones: Vec<Tone>,
    /// Band-limited noise between `noise_band` edges in Hz at `noise_level` RMS.
    pub noise_band: (f64, f64),
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub audio: AudioPrototype,
    /// Descriptor multiset characteristic of locations where the class is heard.
    pub context: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub classes: Vec<ClassSpec>,
    /// Two classes sharing one audio prototype.
    pub confounded: (usize, usize),
    pub clips_per_class: usize,
    /// Probability that a clip carries a second, co-occurring class.
    pub polyphony: f64,
    /// Gain of the co-occurring class relative to the primary one.
    pub secondary_gain: f64,
    /// Relative frequency jitter applied per clip.
    pub freq_jitter: f64,
    /// Broadband background noise level relative to the event signal.
    pub snr_db: f64,
    pub context_size: usize,
    /// Chance that a drawn descriptor comes from the shared background pool instead.
    pub context_noise: f64,
    pub background_context: Vec<String>,
    pub seed: u64,
}

fn tone(freq: f64, amp: f64, am_rate: f64) -> Tone {
    Tone { freq, amp, am_rate }
}

fn class(name: &str, tones: Vec<Tone>, band: (f64, f64), level: f64, context: &[&str]) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        audio: AudioPrototype { tones, noise_band: band, noise_level: level },
        context: context.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for WorldSpec {
    fn default() -> Self {
        let rotor = || vec![tone(90.0, 0.5, 12.0), tone(180.0, 0.3, 12.0), tone(2400.0, 0.05, 0.0)];
        Self {
            classes: vec![
                class(
                    "birdsong",
                    vec![tone(3000.0, 0.3, 8.0), tone(4200.0, 0.2, 6.0)],
                    (2500.0, 5000.0),
                    0.02,
                    &["natural: wood", "leisure: park", "landuse: forest"],
                ),
                class(
                    "traffic",
                    vec![tone(120.0, 0.2, 0.0)],
                    (80.0, 600.0),
                    0.3,
                    &["highway: primary", "highway: traffic_signals", "amenity: fuel"],
                ),
                class(
                    "speech",
                    vec![tone(220.0, 0.3, 4.0), tone(440.0, 0.2, 4.0), tone(660.0, 0.1, 4.0)],
                    (300.0, 3000.0),
                    0.03,
                    &["amenity: cafe", "shop: supermarket", "amenity: school"],
                ),
                class(
                    "church_bell",
                    vec![tone(523.0, 0.4, 0.5), tone(1046.0, 0.2, 0.5), tone(1569.0, 0.1, 0.5)],
                    (500.0, 600.0),
                    0.01,
                    &["amenity: place_of_worship", "building: church", "amenity: grave_yard"],
                ),
                class(
                    "water",
                    vec![],
                    (1000.0, 6000.0),
                    0.3,
                    &["waterway: river", "natural: water", "waterway: stream"],
                ),
                class(
                    "train",
                    vec![tone(300.0, 0.3, 2.0)],
                    (200.0, 2000.0),
                    0.15,
                    &["railway: rail", "railway: station", "landuse: railway"],
                ),
                class(
                    "helicopter",
                    rotor(),
                    (50.0, 400.0),
                    0.2,
                    &["aeroway: helipad", "amenity: hospital", "aeroway: aerodrome"],
                ),
                class(
                    "lawn_mower",
                    rotor(),
                    (50.0, 400.0),
                    0.2,
                    &["leisure: garden", "landuse: grass", "leisure: golf_course"],
                ),
            ],
            confounded: (6, 7),
            clips_per_class: 60,
            polyphony: 0.25,
            secondary_gain: 0.5,
            freq_jitter: 0.02,
            snr_db: 20.0,
            context_size: 6,
            context_noise: 0.3,
            background_context: [
                "building: yes",
                "highway: residential",
                "highway: footway",
                "amenity: parking",
                "amenity: bench",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let c = self.classes.len();
        let (a, b) = self.confounded;
        if c < 3 {
            return bad(format!("need at least 3 classes, got {c}"));
        }
        if a == b || a >= c || b >= c {
            return bad(format!("confounded pair {:?} out of range", self.confounded));
        }
        if self.classes[a].audio != self.classes[b].audio {
            return bad("confounded classes must share one audio prototype".into());
        }
        if self.classes[a].context.iter().any(|d| self.classes[b].context.contains(d)) {
            return bad("confounded classes must have disjoint contexts".into());
        }
        if self.clips_per_class < 3 {
            return bad("clips_per_class must be at least 3".into());
        }
        if !(0.0..=1.0).contains(&self.polyphony) || !(0.0..=1.0).contains(&self.context_noise) {
            return bad("polyphony and context_noise are probabilities".into());
        }
        if self.classes.iter().any(|k| k.context.is_empty()) {
            return bad("every class needs a context".into());
        }
        if self.context_noise > 0.0 && self.background_context.is_empty() {
            return bad("context_noise needs a background pool".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Sum of one-pole band-pass filtered white noise scaled to `level` RMS.
fn band_noise(rng: &mut ChaCha8Rng, band: (f64, f64), level: f64, out: &mut [f64]) {
    if level <= 0.0 {
        return;
    }
    let fs = SAMPLE_RATE as f64;
    let coef = |fc: f64| 1.0 - (-2.0 * PI * fc / fs).exp();
    let (a_lo, a_hi) = (coef(band.0), coef(band.1));
    let (mut low_edge, mut high_edge) = (0.0, 0.0);
    let mut buf = vec![0.0; out.len()];
    for v in buf.iter_mut() {
        let w: f64 = StandardNormal.sample(rng);
        high_edge += a_hi * (w - high_edge);
        low_edge += a_lo * (w - low_edge);
        *v = high_edge - low_edge;
    }
    let rms = (buf.iter().map(|v| v * v).sum::<f64>() / buf.len() as f64).sqrt();
    if rms > 0.0 {
        for (o, v) in out.iter_mut().zip(&buf) {
            *o += level * v / rms;
        }
    }
}

fn render(proto: &AudioPrototype, gain: f64, jitter: f64, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let fs = SAMPLE_RATE as f64;
    for t in &proto.tones {
        let f = t.freq * (1.0 + rng.random_range(-jitter..=jitter));
        let phase = rng.random_range(0.0..2.0 * PI);
        let am_phase = rng.random_range(0.0..2.0 * PI);
        let amp = gain * t.amp * rng.random_range(0.8..1.2);
        for (i, o) in out.iter_mut().enumerate() {
            let x = i as f64 / fs;
            let env = if t.am_rate > 0.0 { 0.5 * (1.0 + (2.0 * PI * t.am_rate * x + am_phase).sin()) } else { 1.0 };
            *o += amp * env * (2.0 * PI * f * x + phase).sin();
        }
    }
    let level = gain * proto.noise_level * rng.random_range(0.8..1.2);
    band_noise(rng, proto.noise_band, level, out);
}

/// One generated clip before it is written out.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub primary: usize,
    pub samples: Vec<f64>,
}

/// Clip `index` of the world; clips are independent, so any subset can be rendered alone.
pub fn synth_clip(spec: &WorldSpec, index: usize) -> SynthClip {
    let c = spec.classes.len();
    let primary = index / spec.clips_per_class;
    let k = index % spec.clips_per_class;
    let mut rng = clip_rng(spec.seed, index);
    let mut labels = vec![0u8; c];
    labels[primary] = 1;
    let mut samples = vec![0.0; CLIP_SAMPLES];
    render(&spec.classes[primary].audio, 1.0, spec.freq_jitter, &mut rng, &mut samples);
    if rng.random_bool(spec.polyphony) {
        // Co-occurring events come from outside the confounded pair so the pair's labels
        // stay tied to the clip's location.
        let (a, b) = spec.confounded;
        let pool: Vec<usize> = (0..c).filter(|&j| j != primary && j != a && j != b).collect();
        if !pool.is_empty() {
            let j = pool[rng.random_range(0..pool.len())];
            labels[j] = 1;
            render(&spec.classes[j].audio, spec.secondary_gain, spec.freq_jitter, &mut rng, &mut samples);
        }
    }
    let sig_rms = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
    let bg = sig_rms * 10f64.powf(-spec.snr_db / 20.0);
    for s in samples.iter_mut() {
        let w: f64 = StandardNormal.sample(&mut rng);
        *s += bg * w;
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s *= 0.5 / peak);
    }
    let context = &spec.classes[primary].context;
    let tags = (0..spec.context_size)
        .map(|_| {
            if rng.random_bool(spec.context_noise) {
                spec.background_context[rng.random_range(0..spec.background_context.len())].clone()
            } else {
                context[rng.random_range(0..context.len())].clone()
            }
        })
        .collect();
    let id = format!("c{primary:02}_{k:04}");
    SynthClip {
        record: ClipRecord {
            audio_path: PathBuf::from(format!("clips/{id}.wav")),
            id,
            labels,
            geo: None,
            gsc_tags: Some(tags),
            gsc_embedding_ref: None,
        },
        primary,
        samples,
    }
}

pub fn n_clips(spec: &WorldSpec) -> usize {
    spec.classes.len() * spec.clips_per_class
}

/// Writes `clips/*.wav`, `manifest.jsonl`, `classes.json` and `world.json` under `out_dir`.
pub fn generate_world(spec: &WorldSpec, out_dir: &Path) -> Result<Vec<ClipRecord>, SynthError> {
    spec.validate()?;
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|source| SynthError::Io { path: clips_dir.clone(), source })?;
    let indices: Vec<usize> = (0..n_clips(spec)).collect();
    let records = parallel_map(&indices, |&i| -> Result<ClipRecord, SynthError> {
        let clip = synth_clip(spec, i);
        write_wav(&out_dir.join(&clip.record.audio_path), &clip.samples)?;
        Ok(clip.record)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        crate::geo::write_atomic(&p, text.as_bytes()).map_err(|source| SynthError::Io { path: p, source })
    };
    write("classes.json", serde_json::to_string_pretty(&spec.class_names()).expect("names"))?;
    write("world.json", serde_json::to_string_pretty(spec).expect("spec"))?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationSpec {
    pub raters: usize,
    pub items: usize,
    pub positive_rate: f64,
    /// Chance a rater misses a present event.
    pub miss_rate: f64,
    /// Chance a rater marks an absent event.
    pub false_alarm_rate: f64,
    pub seed: u64,
}

impl Default for AnnotationSpec {
    fn default() -> Self {
        Self { raters: 10, items: 5000, positive_rate: 0.045, miss_rate: 0.3, false_alarm_rate: 0.02, seed: 0 }
    }
}

/// Raters who independently miss true events and report false ones at fixed rates.
pub fn annotation_fixture(spec: &AnnotationSpec) -> AnnotationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth: Vec<bool> = (0..spec.items).map(|_| rng.random_bool(spec.positive_rate)).collect();
    let rows = (0..spec.raters)
        .map(|_| {
            truth
                .iter()
                .map(|&t| {
                    let flip = rng.random_bool(if t { spec.miss_rate } else { spec.false_alarm_rate });
                    u8::from(t != flip)
                })
                .collect()
        })
        .collect::<Vec<Vec<u8>>>();
    AnnotationMatrix::from_binary(&rows).expect("at least two raters")
}
