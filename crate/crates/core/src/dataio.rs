//! Ingestion and corpus tooling: pose-keypoint JSON parsing, WAV read/write,
//! windowed-sinc resampling, log-mel spectrograms, manifest assembly, and a
//! synthetic multimodal corpus with exactly known gesture/prosody ground truth.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::DTensor;

/// 2D pose keypoints over time: T frames of J (x, y) joints in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSequence {
    /// frames[t][j] = [x, y].
    pub frames: Vec<Vec<[f64; 2]>>,
    /// Optional per-joint detector confidences in [0, 1].
    pub confidences: Option<Vec<Vec<f64>>>,
    pub fps: f64,
}

impl KeypointSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps <= 0.0 {
            return Err(CoreError::Input("fps must be > 0".into()));
        }
        let j = self.num_joints();
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != j {
                return Err(CoreError::Input(format!(
                    "frame {t} has {} joints, expected {j}",
                    frame.len()
                )));
            }
        }
        if let Some(conf) = &self.confidences {
            if conf.len() != self.frames.len() {
                return Err(CoreError::Input("confidence length mismatch".into()));
            }
            for row in conf {
                if row.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                    return Err(CoreError::Input("confidence outside [0,1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Row-major flatten of frame t: [x0, y0, x1, y1, ...].
    pub fn flat_frame(&self, t: usize) -> Vec<f64> {
        self.frames[t].iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// T x 2J matrix of flattened frames.
    pub fn flat_matrix(&self) -> DTensor {
        let t = self.num_frames();
        let j2 = 2 * self.num_joints();
        let mut data = Vec::with_capacity(t * j2);
        for i in 0..t {
            data.extend(self.flat_frame(i));
        }
        DTensor::from_vec(&[t, j2], data).expect("consistent J")
    }
}

/// Per-frame detector records: `[{"people": [{"pose_keypoints_2d": [x,y,c,...]}]}, ...]`.
/// Frames with an empty `people` array hold the previous pose; leading gaps
/// take the first valid frame.
pub fn parse_keypoints(path: &Path) -> Result<KeypointSequence> {
    let text = std::fs::read_to_string(path)?;
    parse_keypoints_str(&text)
}

pub fn parse_keypoints_str(text: &str) -> Result<KeypointSequence> {
    let doc: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CoreError::Parse(format!("keypoint json: {e}")))?;
    let fps = doc
        .get("fps")
        .and_then(serde_json::Value::as_f64)
        .unwrap_or(25.0);
    let frames_json = doc
        .get("frames")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| CoreError::Parse("missing top-level \"frames\" array".into()))?;

    // Pass 1: extract each frame's pose (None where no person detected).
    let mut parsed: Vec<Option<(Vec<[f64; 2]>, Vec<f64>)>> = Vec::with_capacity(frames_json.len());
    for (t, frame) in frames_json.iter().enumerate() {
        let people = frame
            .get("people")
            .and_then(serde_json::Value::as_array)
            .ok_or_else(|| CoreError::Parse(format!("frame {t}: missing \"people\" array")))?;
        let Some(person) = people.first() else {
            parsed.push(None);
            continue;
        };
        let flat = person
            .get("pose_keypoints_2d")
            .and_then(serde_json::Value::as_array)
            .ok_or_else(|| CoreError::Parse(format!("frame {t}: missing pose_keypoints_2d")))?;
        if flat.len() % 3 != 0 {
            return Err(CoreError::Parse(format!(
                "frame {t}: pose_keypoints_2d length {} not a multiple of 3",
                flat.len()
            )));
        }
        let vals: Vec<f64> = flat
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| CoreError::Parse(format!("frame {t}: non-numeric keypoint")))
            })
            .collect::<Result<_>>()?;
        let joints: Vec<[f64; 2]> = vals.chunks(3).map(|c| [c[0], c[1]]).collect();
        let confs: Vec<f64> = vals.chunks(3).map(|c| c[2]).collect();
        parsed.push(Some((joints, confs)));
    }

    // Pass 2: previous-frame hold; leading gaps take the first valid frame.
    let first_valid = parsed
        .iter()
        .position(Option::is_some)
        .ok_or_else(|| CoreError::Input("no frame with a detected person".into()))?;
    let mut held = parsed[first_valid].clone().expect("first valid");
    let j0 = held.0.len();
    let mut seq_frames = Vec::with_capacity(parsed.len());
    let mut seq_confs = Vec::with_capacity(parsed.len());
    for (t, frame) in parsed.into_iter().enumerate() {
        if let Some(f) = frame {
            if f.0.len() != j0 {
                return Err(CoreError::Input(format!(
                    "frame {t}: {} joints, expected {j0}",
                    f.0.len()
                )));
            }
            held = f;
        }
        seq_frames.push(held.0.clone());
        seq_confs.push(held.1.clone());
    }

    let seq = KeypointSequence {
        frames: seq_frames,
        confidences: Some(seq_confs),
        fps,
    };
    seq.validate()?;
    Ok(seq)
}

/// Serialize in the same per-frame detector schema that [`parse_keypoints`]
/// reads, so fixtures round-trip.
pub fn write_keypoints(path: &Path, kp: &KeypointSequence) -> Result<()> {
    let frames: Vec<serde_json::Value> = kp
        .frames
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let mut flat = Vec::with_capacity(frame.len() * 3);
            for (j, p) in frame.iter().enumerate() {
                flat.push(p[0]);
                flat.push(p[1]);
                flat.push(
                    kp.confidences
                        .as_ref()
                        .map_or(1.0, |c| c[t][j]),
                );
            }
            serde_json::json!({ "people": [{ "pose_keypoints_2d": flat }] })
        })
        .collect();
    let doc = serde_json::json!({ "fps": kp.fps, "frames": frames });
    std::fs::write(path, serde_json::to_string(&doc).expect("json"))?;
    Ok(())
}

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// 16-bit PCM or 32-bit float WAV; stereo is averaged to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    let fmt_err = |m: &str| CoreError::Format(format!("wav: {m}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("not a RIFF/WAVE file"));
    }
    let u16le = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
    let u32le = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);

    let mut pos = 12;
    let mut format_tag = 0u16;
    let mut channels = 0u16;
    let mut sample_rate = 0u32;
    let mut bits = 0u16;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32le(&bytes[pos + 4..pos + 8]) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(fmt_err("short fmt chunk"));
                }
                format_tag = u16le(&body[0..2]);
                channels = u16le(&body[2..4]);
                sample_rate = u32le(&body[4..8]);
                bits = u16le(&body[14..16]);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let data = data.ok_or_else(|| fmt_err("missing data chunk"))?;
    if channels == 0 || sample_rate == 0 {
        return Err(fmt_err("missing fmt chunk"));
    }
    let ch = channels as usize;
    let interleaved: Vec<f64> = match (format_tag, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(fmt_err(&format!(
                "unsupported encoding (format {format_tag}, {bits}-bit)"
            )))
        }
    };
    let samples: Vec<f64> = interleaved
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate,
    })
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Zeroth-order modified Bessel function (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..40 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

/// Windowed-sinc (Kaiser, beta 8.6) sample-rate conversion. Cutoff at the
/// lower of the two Nyquist frequencies. Same-rate conversion is an identity.
pub fn resample(clip: &AudioClip, target_sr: u32) -> Result<AudioClip> {
    if target_sr == 0 {
        return Err(CoreError::Input("target sample rate 0".into()));
    }
    if target_sr == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = target_sr as f64 / clip.sample_rate as f64;
    let out_len = (clip.samples.len() as f64 * ratio).round() as usize;
    // Normalized cutoff relative to the input rate.
    let fc = 0.5 * ratio.min(1.0);
    let beta = 8.6;
    let half_width = 32.0 / ratio.min(1.0); // widen when decimating
    let hw = half_width.ceil() as isize;
    let i0b = bessel_i0(beta);
    let x = &clip.samples;
    let n_in = x.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = m as f64 / ratio; // position in input samples
        let center = t.floor() as isize;
        let mut acc = 0.0;
        for k in (center - hw)..=(center + hw) {
            if k < 0 || k >= n_in {
                continue;
            }
            let dt = t - k as f64;
            let sinc = if dt.abs() < 1e-12 {
                2.0 * fc
            } else {
                (2.0 * fc * std::f64::consts::PI * dt).sin() / (std::f64::consts::PI * dt)
            };
            let u = dt / half_width;
            if u.abs() >= 1.0 {
                continue;
            }
            let w = bessel_i0(beta * (1.0 - u * u).sqrt()) / i0b;
            acc += x[k as usize] * sinc * w;
        }
        out.push(acc);
    }
    Ok(AudioClip {
        samples: out,
        sample_rate: target_sr,
    })
}

/// HTK mel scale.
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Standard TTS defaults: n_fft 1024, hop 256, 80 mel bands, 0-8 kHz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

/// Hann-windowed magnitude STFT columns (F x (n_fft/2+1)), plus the window
/// used, for energy checks.
pub fn stft_magnitudes(clip: &AudioClip, n_fft: usize, hop: usize) -> Result<(DTensor, Vec<f64>)> {
    if clip.samples.len() < n_fft {
        return Err(CoreError::Input(format!(
            "clip of {} samples shorter than one frame ({n_fft})",
            clip.samples.len()
        )));
    }
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
        .collect();
    let frames = 1 + (clip.samples.len() - n_fft) / hop;
    let bins = n_fft / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = DTensor::zeros(&[frames, bins]);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let start = f * hop;
        for n in 0..n_fft {
            buf[n] = Complex::new(clip.samples[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out.set(f, b, buf[b].norm());
        }
    }
    Ok((out, window))
}

/// Triangular mel filterbank rows (n_mels x bins).
pub fn mel_filterbank(sr: u32, n_fft: usize, cfg: &MelConfig) -> DTensor {
    let bins = n_fft / 2 + 1;
    let fmax = if cfg.fmax <= 0.0 {
        sr as f64 / 2.0
    } else {
        cfg.fmax.min(sr as f64 / 2.0)
    };
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let centers: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = DTensor::zeros(&[cfg.n_mels, bins]);
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for b in 0..bins {
            let f = b as f64 * sr as f64 / n_fft as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.set(m, b, w);
        }
    }
    fb
}

/// Log-mel grid, F x n_mels, natural log with floor 1e-5.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<DTensor> {
    let (mags, _) = stft_magnitudes(clip, cfg.n_fft, cfg.hop)?;
    let fb = mel_filterbank(clip.sample_rate, cfg.n_fft, cfg);
    let mel = mags.matmul(&fb.transpose())?;
    Ok(mel.map(|v| v.max(1e-5).ln()))
}

/// Center frequency (Hz) of each mel band, for band-location oracles.
pub fn mel_band_centers(sr: u32, cfg: &MelConfig) -> Vec<f64> {
    let fmax = if cfg.fmax <= 0.0 {
        sr as f64 / 2.0
    } else {
        cfg.fmax.min(sr as f64 / 2.0)
    };
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// One generated clip with its planted alignment ground truth.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub clip_id: String,
    pub text: String,
    pub audio: AudioClip,
    pub mel_target: DTensor,
    pub keypoints: KeypointSequence,
    /// Final planted apex time (the per-clip alignment target).
    pub t_gesture_true: f64,
    pub apex_times_true: Vec<f64>,
    pub duration: f64,
}

/// Generator knobs. Defaults match the verification corpus used throughout
/// the test suite.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub fps: f64,
    pub joints: usize,
    pub sample_rate: u32,
    /// Width (seconds) of the planted motion bumps.
    pub motion_sigma: f64,
    /// Width (seconds) of the planted pitch excursions.
    pub pitch_sigma: f64,
    pub mel: MelConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fps: 25.0,
            joints: 8,
            sample_rate: 22050,
            motion_sigma: 0.12,
            pitch_sigma: 0.15,
            mel: MelConfig::default(),
        }
    }
}

const WORDS: &[&str] = &[
    "the", "hand", "rises", "then", "falls", "while", "speech", "peaks", "align", "with", "motion",
    "beats", "over", "time", "and", "pitch", "moves", "up", "down", "slowly", "quickly",
];

fn random_text(rng: &mut Rng) -> String {
    let n = 4 + rng.below(8);
    (0..n)
        .map(|_| WORDS[rng.below(WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Place `count` apex times on the motion-sample grid (midpoints between
/// frames), at least `min_sep` apart, inside [margin, duration - margin].
fn place_apexes(
    duration: f64,
    count: usize,
    min_sep: f64,
    margin: f64,
    fps: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let lo = margin;
    let hi = duration - margin;
    let span = hi - lo;
    // Partition the usable span into `count` slots and jitter within each,
    // keeping the separation guarantee.
    let slot = span / count as f64;
    let slack = (slot - min_sep).max(0.0);
    let mut times = Vec::with_capacity(count);
    for i in 0..count {
        let base = lo + i as f64 * slot + min_sep / 2.0;
        let t = base + rng.uniform() * slack;
        // Snap to the velocity-sample grid k/fps so the planted bump is
        // symmetric about a sample and run midpoints recover it exactly.
        times.push((t * fps).round() / fps);
    }
    times
}

fn gen_one(index: u64, jitter_std: f64, cfg: &SynthConfig, root: &Rng) -> SynthSample {
    let mut rng = root.derive(index);
    let duration = rng.uniform_in(4.0, 15.0);
    let n_apex = 2 + rng.below(4); // 2..=5
    let apex_times = place_apexes(duration, n_apex, 1.2, 0.6, cfg.fps, &mut rng);

    // Keypoints: displacement between frames t and t+1 has Euclidean norm
    // speed(t/fps)/fps, so the motion-magnitude series (fps * ||dK|| at
    // difference index t) reproduces speed() exactly on the t/fps grid.
    let frames = (duration * cfg.fps).round() as usize + 1;
    let j = cfg.joints;
    let speed = |t: f64| -> f64 {
        apex_times
            .iter()
            .map(|&a| 2.0 * (-(t - a).powi(2) / (2.0 * cfg.motion_sigma.powi(2))).exp())
            .sum()
    };
    let mut dir = vec![[0.0f64; 2]; j];
    let mut norm = 0.0;
    for d in dir.iter_mut() {
        d[0] = rng.normal();
        d[1] = rng.normal();
        norm += d[0] * d[0] + d[1] * d[1];
    }
    let norm = norm.sqrt().max(1e-9);
    for d in dir.iter_mut() {
        d[0] /= norm;
        d[1] /= norm;
    }
    let mut kp_frames = Vec::with_capacity(frames);
    let mut pose: Vec<[f64; 2]> = (0..j)
        .map(|_| [rng.uniform_in(100.0, 200.0), rng.uniform_in(100.0, 200.0)])
        .collect();
    kp_frames.push(pose.clone());
    let mut sign = 1.0;
    for t in 0..frames - 1 {
        let tm = t as f64 / cfg.fps;
        let step = speed(tm) / cfg.fps;
        for (p, d) in pose.iter_mut().zip(&dir) {
            p[0] += sign * step * d[0];
            p[1] += sign * step * d[1];
        }
        sign = -sign; // oscillate to avoid unbounded drift
        kp_frames.push(pose.clone());
    }
    let keypoints = KeypointSequence {
        frames: kp_frames,
        confidences: None,
        fps: cfg.fps,
    };

    // Audio: sine with instantaneous frequency carrying a pitch excursion at
    // each (jittered) apex time.
    let jittered: Vec<f64> = apex_times
        .iter()
        .map(|&a| (a + jitter_std * rng.normal()).clamp(0.2, duration - 0.2))
        .collect();
    let f0 = |t: f64| -> f64 {
        150.0
            + 90.0
                * jittered
                    .iter()
                    .map(|&a| (-(t - a).powi(2) / (2.0 * cfg.pitch_sigma.powi(2))).exp())
                    .sum::<f64>()
    };
    let sr = cfg.sample_rate;
    let n_samples = (duration * sr as f64).round() as usize;
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let t = n as f64 / sr as f64;
        phase += 2.0 * std::f64::consts::PI * f0(t) / sr as f64;
        samples.push(0.5 * phase.sin());
    }
    let audio = AudioClip {
        samples,
        sample_rate: sr,
    };
    let mel_target = mel_spectrogram(&audio, &cfg.mel).expect("clips are >= 4 s");

    SynthSample {
        clip_id: format!("synth{index:04}"),
        text: random_text(&mut rng),
        audio,
        mel_target,
        keypoints,
        t_gesture_true: *apex_times.last().expect(">= 2 apexes"),
        apex_times_true: apex_times,
        duration,
    }
}

/// Deterministic synthetic corpus: same seed, byte-identical samples.
/// `jitter_std` shifts the audio pitch peaks off the gesture apexes.
pub fn gen_synthetic_corpus(n: usize, jitter_std: f64, rng: &Rng) -> Vec<SynthSample> {
    gen_synthetic_corpus_with(n, jitter_std, &SynthConfig::default(), rng)
}

pub fn gen_synthetic_corpus_with(
    n: usize,
    jitter_std: f64,
    cfg: &SynthConfig,
    rng: &Rng,
) -> Vec<SynthSample> {
    use rayon::prelude::*;
    (0..n as u64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| gen_one(i, jitter_std, cfg, rng))
        .collect()
}

/// Write a corpus as `<id>.keypoints.json`, `<id>.wav`, `<id>.txt` triples.
pub fn write_corpus(dir: &Path, samples: &[SynthSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        write_keypoints(&dir.join(format!("{}.keypoints.json", s.clip_id)), &s.keypoints)?;
        write_wav(&dir.join(format!("{}.wav", s.clip_id)), &s.audio)?;
        std::fs::write(dir.join(format!("{}.txt", s.clip_id)), &s.text)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub keypoint_path: PathBuf,
    pub audio_path: PathBuf,
    pub transcript: String,
    pub speaker_id: String,
    pub duration: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    /// (clip_id, reason) for everything excluded.
    pub rejects: Vec<(String, String)>,
}

impl CorpusManifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,split,keypoint_path,audio_path,speaker_id,duration\n");
        for (split, entries) in [("train", &self.train), ("test", &self.test)] {
            for e in entries {
                out.push_str(&format!(
                    "{},{},{},{},{},{:.6}\n",
                    e.clip_id,
                    split,
                    e.keypoint_path.display(),
                    e.audio_path.display(),
                    e.speaker_id,
                    e.duration
                ));
            }
        }
        out
    }
}

/// Pair up `<id>.keypoints.json` / `<id>.wav` / `<id>.txt` files under `root`,
/// drop clips outside [4, 15] s, then split with a seeded shuffle.
pub fn build_manifest(root: &Path, split_ratio: f64, seed: u64) -> Result<CorpusManifest> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(CoreError::Input("split_ratio outside [0,1]".into()));
    }
    let mut by_id: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>, Option<PathBuf>)> =
        BTreeMap::new();
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
            continue;
        };
        let name = name.as_str();
        if let Some(id) = name.strip_suffix(".keypoints.json") {
            by_id.entry(id.to_string()).or_default().0 = Some(path);
        } else if let Some(id) = name.strip_suffix(".wav") {
            by_id.entry(id.to_string()).or_default().1 = Some(path);
        } else if let Some(id) = name.strip_suffix(".txt") {
            by_id.entry(id.to_string()).or_default().2 = Some(path);
        }
    }
    let mut entries = Vec::new();
    let mut rejects = Vec::new();
    for (id, (kp, wav, txt)) in by_id {
        let (Some(kp), Some(wav), Some(txt)) = (kp, wav, txt) else {
            rejects.push((id, "unpaired".to_string()));
            continue;
        };
        let clip = match read_wav(&wav) {
            Ok(c) => c,
            Err(e) => {
                rejects.push((id, format!("audio: {e}")));
                continue;
            }
        };
        let duration = clip.duration();
        if !(4.0..=15.0).contains(&duration) {
            rejects.push((id, "duration".to_string()));
            continue;
        }
        let transcript = std::fs::read_to_string(&txt)?.trim().to_string();
        entries.push(ManifestEntry {
            clip_id: id,
            keypoint_path: kp,
            audio_path: wav,
            transcript,
            speaker_id: "spk0".to_string(),
            duration,
        });
    }
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut entries);
    let n_train = (entries.len() as f64 * split_ratio).round() as usize;
    let test = entries.split_off(n_train.min(entries.len()));
    Ok(CorpusManifest {
        train: entries,
        test,
        rejects,
    })
}
