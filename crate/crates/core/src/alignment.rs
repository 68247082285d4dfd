//! Cross-modal alignment machinery: gesture apex detection from keypoint
//! motion, pitch tracking and prominence detection, one-to-one peak matching,
//! the gesture-offset and mutual-information metrics, the batch mean-absolute
//! alignment loss, and WER/CER string metrics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::dataio::{AudioClip, KeypointSequence};
use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

/// Per-difference gesture speed: value[t] = fps * ||flat(K_{t+1}) - flat(K_t)||.
/// Sample t sits at time t/fps; the series has frames - 1 entries.
#[derive(Debug, Clone, Serialize)]
pub struct MotionMagnitude {
    pub values: Vec<f64>,
    pub fps: f64,
}

pub fn motion_magnitude(kp: &KeypointSequence) -> Result<MotionMagnitude> {
    kp.validate()?;
    if kp.num_frames() < 2 {
        return Err(CoreError::Input(
            "motion magnitude needs >= 2 frames".into(),
        ));
    }
    let values = (0..kp.num_frames() - 1)
        .map(|t| {
            let a = kp.flat_frame(t);
            let b = kp.flat_frame(t + 1);
            let sq: f64 = a.iter().zip(&b).map(|(x, y)| (y - x).powi(2)).sum();
            kp.fps * sq.sqrt()
        })
        .collect();
    Ok(MotionMagnitude {
        values,
        fps: kp.fps,
    })
}

/// Gesture apexes: midpoints of high-magnitude runs, ascending in time.
#[derive(Debug, Clone, Serialize)]
pub struct ApexList {
    pub times: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

/// Threshold at `rel_threshold * max(values)`; each contiguous above-threshold
/// run is a peak with its apex at the run's temporal midpoint. Runs whose
/// apexes are closer than `min_gap` are merged (higher-magnitude run wins,
/// apex recomputed over the merged span).
pub fn detect_apexes(m: &MotionMagnitude, rel_threshold: f64, min_gap: f64) -> Result<ApexList> {
    if !(0.0..1.0).contains(&rel_threshold) || rel_threshold == 0.0 {
        return Err(CoreError::Input(format!(
            "rel_threshold {rel_threshold} outside (0,1)"
        )));
    }
    let max = m.values.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Ok(ApexList {
            times: Vec::new(),
            magnitudes: Vec::new(),
        });
    }
    let thr = rel_threshold * max;
    // (start, end) inclusive index spans plus run maximum.
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    let mut cur: Option<(usize, usize, f64)> = None;
    for (i, &v) in m.values.iter().enumerate() {
        if v >= thr {
            cur = Some(match cur {
                Some((s, _, mx)) => (s, i, mx.max(v)),
                None => (i, i, v),
            });
        } else if let Some(run) = cur.take() {
            runs.push(run);
        }
    }
    if let Some(run) = cur {
        runs.push(run);
    }
    let apex_time = |run: &(usize, usize, f64)| (run.0 + run.1) as f64 / 2.0 / m.fps;
    // Merge adjacent runs whose apexes fall within min_gap.
    loop {
        let mut merged = false;
        let mut i = 0;
        while i + 1 < runs.len() {
            if apex_time(&runs[i + 1]) - apex_time(&runs[i]) < min_gap {
                let (a, b) = (runs[i], runs[i + 1]);
                runs[i] = (a.0.min(b.0), a.1.max(b.1), a.2.max(b.2));
                runs.remove(i + 1);
                merged = true;
            } else {
                i += 1;
            }
        }
        if !merged {
            break;
        }
    }
    Ok(ApexList {
        times: runs.iter().map(apex_time).collect(),
        magnitudes: runs.iter().map(|r| r.2).collect(),
    })
}

/// Frame-wise fundamental frequency estimate; f0 = 0 exactly where unvoiced.
#[derive(Debug, Clone, Serialize)]
pub struct PitchContour {
    pub frame_times: Vec<f64>,
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

const F0_MIN: f64 = 60.0;
const F0_MAX: f64 = 400.0;
const VOICING_THRESHOLD: f64 = 0.3;

/// Normalized-autocorrelation pitch tracker over 60-400 Hz with parabolic lag
/// interpolation. Frame centers define `frame_times`.
pub fn extract_pitch(clip: &AudioClip, frame_s: f64, hop_s: f64) -> Result<PitchContour> {
    let sr = clip.sample_rate as f64;
    if clip.sample_rate < 8000 {
        return Err(CoreError::Input("pitch: sample rate < 8 kHz".into()));
    }
    if frame_s <= 2.0 / F0_MIN {
        return Err(CoreError::Input(format!(
            "pitch: frame {frame_s} s too short for f0_min {F0_MIN} Hz"
        )));
    }
    let frame = (frame_s * sr).round() as usize;
    let hop = (hop_s * sr).round().max(1.0) as usize;
    if clip.samples.len() < frame {
        return Ok(PitchContour {
            frame_times: Vec::new(),
            f0: Vec::new(),
            voiced: Vec::new(),
        });
    }
    let lag_min = (sr / F0_MAX).floor() as usize;
    let lag_max = ((sr / F0_MIN).ceil() as usize).min(frame - 1);

    // FFT-based autocorrelation per frame.
    let fft_len = (2 * frame).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    let n_frames = 1 + (clip.samples.len() - frame) / hop;
    let mut frame_times = Vec::with_capacity(n_frames);
    let mut f0s = Vec::with_capacity(n_frames);
    let mut voiced = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    for i in 0..n_frames {
        let start = i * hop;
        frame_times.push((start as f64 + frame as f64 / 2.0) / sr);
        for (slot, &s) in buf.iter_mut().zip(&clip.samples[start..start + frame]) {
            *slot = Complex::new(s, 0.0);
        }
        for slot in buf.iter_mut().skip(frame) {
            *slot = Complex::new(0.0, 0.0);
        }
        fwd.process(&mut buf);
        for c in buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        inv.process(&mut buf);
        let r0 = buf[0].re / fft_len as f64;
        if r0 <= 1e-12 {
            f0s.push(0.0);
            voiced.push(false);
            continue;
        }
        let r = |tau: usize| buf[tau].re / fft_len as f64 / r0;
        let mut best = (lag_min, r(lag_min));
        for tau in lag_min..=lag_max {
            let v = r(tau);
            if v > best.1 {
                best = (tau, v);
            }
        }
        if best.1 < VOICING_THRESHOLD {
            f0s.push(0.0);
            voiced.push(false);
            continue;
        }
        // Octave-error correction: a tone whose true period is shorter than
        // the search floor shows up at an integer multiple of its lag. If a
        // divisor of the winning lag correlates almost as strongly, the
        // shorter lag is the fundamental.
        let mut tau = best.0;
        for k in (2..=4).rev() {
            let cand = (best.0 as f64 / k as f64).round() as usize;
            if cand >= 4 && r(cand) >= 0.9 * best.1 {
                tau = cand;
                break;
            }
        }
        // Parabolic refinement around the winning lag.
        let lag = if tau > 1 && tau < lag_max {
            let (a, b, c) = (r(tau - 1), r(tau), r(tau + 1));
            let denom = a - 2.0 * b + c;
            let delta = if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            tau as f64 + delta
        } else {
            tau as f64
        };
        f0s.push(sr / lag);
        voiced.push(true);
    }
    Ok(PitchContour {
        frame_times,
        f0: f0s,
        voiced,
    })
}

/// Local maxima of f0 over voiced frames, non-maximum-suppressed within
/// `min_gap` seconds (equal peaks keep the earlier one). Times ascending.
pub fn detect_prominences(pc: &PitchContour, min_gap: f64) -> Vec<f64> {
    let n = pc.f0.len();
    let at = |i: isize| -> f64 {
        if i < 0 || i as usize >= n || !pc.voiced[i as usize] {
            f64::NEG_INFINITY
        } else {
            pc.f0[i as usize]
        }
    };
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            pc.voiced[i] && pc.f0[i] > at(i as isize - 1) && pc.f0[i] >= at(i as isize + 1)
        })
        .collect();
    // Strongest first; earlier index wins ties, which also implements the
    // keep-the-earlier rule for equal maxima inside one suppression window.
    candidates.sort_by(|&a, &b| {
        pc.f0[b]
            .partial_cmp(&pc.f0[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept
            .iter()
            .all(|&k| (pc.frame_times[c] - pc.frame_times[k]).abs() >= min_gap)
        {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| pc.frame_times[i]).collect()
}

/// Greedy one-to-one matching: in ascending gesture order, each apex takes
/// the nearest unused speech peak within `max_lag`.
pub fn match_peaks(apexes: &[f64], prominences: &[f64], max_lag: f64) -> Vec<(f64, f64)> {
    let mut used = vec![false; prominences.len()];
    let mut pairs = Vec::new();
    for &a in apexes {
        let mut best: Option<(usize, f64)> = None;
        for (i, &p) in prominences.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = (a - p).abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, d)) = best {
            if d <= max_lag {
                used[i] = true;
                pairs.push((a, prominences[i]));
            }
        }
    }
    pairs
}

/// Mean |gesture_t - speech_t| over matched pairs. Zero pairs is undefined,
/// not zero.
pub fn gesture_offset(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "gesture offset over zero matched pairs".into(),
        ));
    }
    Ok(pairs.iter().map(|(g, s)| (g - s).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Binary bin-occupancy mutual information in bits, clamped at zero. Events
/// land in `n_bins` uniform bins over [0, duration]; a bin is occupied iff it
/// holds at least one event.
pub fn mutual_information(
    gesture_times: &[f64],
    speech_times: &[f64],
    duration: f64,
    n_bins: usize,
) -> Result<f64> {
    if duration <= 0.0 {
        return Err(CoreError::Input("mutual information: duration <= 0".into()));
    }
    if n_bins < 2 {
        return Err(CoreError::Input("mutual information: n_bins < 2".into()));
    }
    if gesture_times.is_empty() && speech_times.is_empty() {
        return Ok(0.0);
    }
    let occupancy = |times: &[f64]| -> Vec<bool> {
        let mut bits = vec![false; n_bins];
        for &t in times {
            let idx = ((t / duration * n_bins as f64).floor() as isize)
                .clamp(0, n_bins as isize - 1) as usize;
            bits[idx] = true;
        }
        bits
    };
    let g = occupancy(gesture_times);
    let s = occupancy(speech_times);
    // Joint counts over (gesture_bit, speech_bit).
    let mut joint = [[0.0f64; 2]; 2];
    for i in 0..n_bins {
        joint[g[i] as usize][s[i] as usize] += 1.0;
    }
    let n = n_bins as f64;
    let pg = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let ps = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    // MI = H(g) + H(s) - H(g,s), built from one shared entropy term so the
    // identical-stream case collapses to the occupancy entropy exactly
    // (2H - H = H in f64) and transposing the joint leaves the sum bitwise
    // unchanged.
    let hg = entropy_term(pg[0], n) + entropy_term(pg[1], n);
    let hs = entropy_term(ps[0], n) + entropy_term(ps[1], n);
    let hj = (entropy_term(joint[0][0], n) + entropy_term(joint[1][1], n))
        + (entropy_term(joint[0][1], n) + entropy_term(joint[1][0], n));
    Ok((hg + hs - hj).max(0.0))
}

/// -p log2 p for p = count/total; 0 for empty cells.
fn entropy_term(count: f64, total: f64) -> f64 {
    if count > 0.0 {
        let p = count / total;
        -p * p.log2()
    } else {
        0.0
    }
}

/// Entropy (bits) of a stream's bin occupancy: the exact MI value when both
/// streams occupy identical bins.
pub fn occupancy_entropy(times: &[f64], duration: f64, n_bins: usize) -> Result<f64> {
    if duration <= 0.0 || n_bins < 2 {
        return Err(CoreError::Input("occupancy entropy: bad arguments".into()));
    }
    let mut bits = vec![false; n_bins];
    for &t in times {
        let idx =
            ((t / duration * n_bins as f64).floor() as isize).clamp(0, n_bins as isize - 1) as usize;
        bits[idx] = true;
    }
    let k = bits.iter().filter(|&&b| b).count() as f64;
    let n = n_bins as f64;
    Ok(entropy_term(n - k, n) + entropy_term(k, n))
}

/// Batch mean absolute error between predicted and gesture-derived times.
pub fn cmtd_loss(t_pred: &[f64], t_gesture: &[f64]) -> Result<f64> {
    if t_pred.len() != t_gesture.len() || t_pred.is_empty() {
        return Err(CoreError::Contract(format!(
            "cmtd: batch lengths {} vs {}",
            t_pred.len(),
            t_gesture.len()
        )));
    }
    Ok(t_pred
        .iter()
        .zip(t_gesture)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / t_pred.len() as f64)
}

/// Differentiable variant: `t_pred` lives on the tape (one scalar per sample,
/// flat), targets are constants.
pub fn cmtd_loss_var<'t>(tape: &'t Tape, t_pred: Var<'t>, t_gesture: &[f64]) -> Result<Var<'t>> {
    if t_pred.value().numel() != t_gesture.len() || t_gesture.is_empty() {
        return Err(CoreError::Contract(format!(
            "cmtd: batch lengths {} vs {}",
            t_pred.value().numel(),
            t_gesture.len()
        )));
    }
    let shape = t_pred.value().shape().to_vec();
    let targets = tape.leaf(DTensor::from_vec(&shape, t_gesture.to_vec())?);
    Ok(t_pred.sub(targets)?.abs().mean())
}

/// Word and character error rates in percent (edit distance over the
/// reference length).
pub fn wer_cer(reference: &str, hypothesis: &str) -> Result<(f64, f64)> {
    let ref_words: Vec<&str> = reference.split_whitespace().collect();
    let ref_chars: Vec<char> = reference.chars().collect();
    if ref_words.is_empty() || ref_chars.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "error rate against an empty reference".into(),
        ));
    }
    let hyp_words: Vec<&str> = hypothesis.split_whitespace().collect();
    let hyp_chars: Vec<char> = hypothesis.chars().collect();
    let wer = levenshtein(&ref_words, &hyp_words) as f64 / ref_words.len() as f64 * 100.0;
    let cer = levenshtein(&ref_chars, &hyp_chars) as f64 / ref_chars.len() as f64 * 100.0;
    Ok((wer, cer))
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Everything the analyze workflow reports for one clip.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentReport {
    pub apexes: ApexList,
    pub prominences: Vec<f64>,
    pub matched_pairs: Vec<(f64, f64)>,
    pub gesture_offset: Option<f64>,
    pub mutual_info: f64,
    pub n_apexes: usize,
    pub n_peaks: usize,
}

/// Analysis knobs shared by the CLI and the verification suites.
#[derive(Debug, Clone)]
pub struct AnalyzeConfig {
    pub rel_threshold: f64,
    pub min_gap: f64,
    pub max_lag: f64,
    pub n_bins: usize,
    pub pitch_frame: f64,
    pub pitch_hop: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            rel_threshold: 0.5,
            min_gap: 0.25,
            max_lag: 1.0,
            n_bins: 50,
            pitch_frame: 0.04,
            pitch_hop: 256.0 / 22050.0,
        }
    }
}

/// Full cross-modal pipeline for one (keypoints, audio) pair.
pub fn analyze_clip(
    kp: &KeypointSequence,
    audio: &AudioClip,
    cfg: &AnalyzeConfig,
) -> Result<AlignmentReport> {
    let magnitude = motion_magnitude(kp)?;
    let apexes = detect_apexes(&magnitude, cfg.rel_threshold, cfg.min_gap)?;
    let pitch = extract_pitch(audio, cfg.pitch_frame, cfg.pitch_hop)?;
    let prominences = detect_prominences(&pitch, cfg.min_gap);
    let pairs = match_peaks(&apexes.times, &prominences, cfg.max_lag);
    let offset = gesture_offset(&pairs).ok();
    let duration = kp.duration().max(audio.duration());
    let mi = mutual_information(&apexes.times, &prominences, duration, cfg.n_bins)?;
    Ok(AlignmentReport {
        n_apexes: apexes.times.len(),
        n_peaks: prominences.len(),
        apexes,
        prominences,
        matched_pairs: pairs,
        gesture_offset: offset,
        mutual_info: mi,
    })
}

/// CSV batch summary: clip_id, offset_s, mi_bits, cmtd_s, n_apexes, n_peaks.
pub fn batch_csv(rows: &[(String, AlignmentReport, Option<f64>)]) -> String {
    let mut out = String::from("clip_id,offset_s,mi_bits,cmtd_s,n_apexes,n_peaks\n");
    for (id, r, cmtd) in rows {
        let offset = r
            .gesture_offset
            .map_or("nan".to_string(), |v| format!("{v:.6}"));
        let cmtd = cmtd.map_or("nan".to_string(), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{id},{offset},{:.6},{cmtd},{},{}\n",
            r.mutual_info, r.n_apexes, r.n_peaks
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gen_synthetic_corpus;
    use crate::rng::Rng;
    use crate::tape::grad_check;

    fn mag(values: Vec<f64>, fps: f64) -> MotionMagnitude {
        MotionMagnitude { values, fps }
    }

    #[test]
    fn magnitude_static_and_hand_case() {
        let kp = KeypointSequence {
            frames: vec![vec![[5.0, 6.0]]; 8],
            confidences: None,
            fps: 25.0,
        };
        let m = motion_magnitude(&kp).unwrap();
        assert_eq!(m.values.len(), 7);
        assert!(m.values.iter().all(|&v| v == 0.0));

        // One joint moving (dx=3, dy=4) each frame at 25 fps: 25 * 5 = 125.
        let mut frames = vec![vec![[0.0, 0.0]]];
        for t in 1..5 {
            frames.push(vec![[3.0 * t as f64, 4.0 * t as f64]]);
        }
        let kp = KeypointSequence {
            frames,
            confidences: None,
            fps: 25.0,
        };
        let m = motion_magnitude(&kp).unwrap();
        assert!(m.values.iter().all(|&v| (v - 125.0).abs() < 1e-9));

        let single = KeypointSequence {
            frames: vec![vec![[0.0, 0.0]]],
            confidences: None,
            fps: 25.0,
        };
        assert!(motion_magnitude(&single).is_err());
    }

    #[test]
    fn magnitude_time_reversal_reverses_series() {
        let mut rng = Rng::new(1);
        let frames: Vec<Vec<[f64; 2]>> = (0..10)
            .map(|_| (0..3).map(|_| [rng.normal(), rng.normal()]).collect())
            .collect();
        let kp = KeypointSequence {
            frames: frames.clone(),
            confidences: None,
            fps: 25.0,
        };
        let rev = KeypointSequence {
            frames: frames.into_iter().rev().collect(),
            confidences: None,
            fps: 25.0,
        };
        let a = motion_magnitude(&kp).unwrap().values;
        let mut b = motion_magnitude(&rev).unwrap().values;
        b.reverse();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn apex_run_midpoint_hand_case() {
        // Triangular bump whose above-threshold run is [12, 18].
        let mut v = vec![0.0; 30];
        for (i, slot) in v.iter_mut().enumerate().take(21).skip(10) {
            let d = 5.0 - (i as f64 - 15.0).abs();
            *slot = d.max(0.0) * 2.0; // peak 10 at i=15
        }
        let apexes = detect_apexes(&mag(v.clone(), 25.0), 0.5, 0.25).unwrap();
        // threshold = 5; v[i] >= 5 for |i-15| <= 2.5 -> run {13..17}? recompute:
        // v[i] = 2*(5-|i-15|): v[12]=4 <5, v[13]=6>=5 ... adjust run to [13,17].
        assert_eq!(apexes.times.len(), 1);
        assert!((apexes.times[0] - 15.0 / 25.0).abs() < 1e-12);

        // Plateau over frames [12, 18]: apex at the run midpoint.
        let mut w = vec![0.0; 30];
        for slot in w.iter_mut().take(19).skip(12) {
            *slot = 1.0;
        }
        let apexes = detect_apexes(&mag(w, 25.0), 0.5, 0.25).unwrap();
        assert_eq!(apexes.times, vec![(12 + 18) as f64 / 2.0 / 25.0]);
    }

    #[test]
    fn apex_empty_and_scaling_invariance() {
        assert!(detect_apexes(&mag(vec![0.0; 20], 25.0), 0.5, 0.25)
            .unwrap()
            .times
            .is_empty());
        let mut rng = Rng::new(2);
        let v: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let a = detect_apexes(&mag(v.clone(), 25.0), 0.5, 0.25).unwrap();
        let b = detect_apexes(
            &mag(v.iter().map(|x| x * 37.5).collect(), 25.0),
            0.5,
            0.25,
        )
        .unwrap();
        assert_eq!(a.times, b.times);
        assert!(detect_apexes(&mag(vec![1.0], 25.0), 1.2, 0.25).is_err());
    }

    #[test]
    fn apex_merge_rule() {
        // Two above-threshold runs 0.05 s apart with min_gap 0.2 s merge into
        // one apex over the combined span.
        let fps = 100.0;
        let mut v = vec![0.0; 60];
        v[20] = 10.0;
        v[21] = 10.0;
        // apexes 20.5/100 and 25/100: 0.045 s apart.
        v[25] = 8.0;
        let merged = detect_apexes(&mag(v.clone(), fps), 0.5, 0.2).unwrap();
        assert_eq!(merged.times.len(), 1);
        assert!((merged.times[0] - (20 + 25) as f64 / 2.0 / fps).abs() < 1e-12);
        assert_eq!(merged.magnitudes[0], 10.0);
        // Without merging they stay separate.
        let split = detect_apexes(&mag(v, fps), 0.5, 0.01).unwrap();
        assert_eq!(split.times.len(), 2);
    }

    #[test]
    fn apex_merge_brute_force_oracle() {
        // Random series: compare against an independent merge routine that
        // exhaustively re-scans the full apex list each round.
        let mut rng = Rng::new(3);
        for trial in 0..200 {
            let n = 30 + rng.below(50);
            let v: Vec<f64> = (0..n)
                .map(|_| if rng.uniform() < 0.3 { rng.uniform() } else { 0.0 })
                .collect();
            let fps = 25.0;
            let min_gap = rng.uniform_in(0.05, 0.5);
            let got = detect_apexes(&mag(v.clone(), fps), 0.5, min_gap).unwrap();

            // Oracle: runs from the mask, then repeated full-scan merging.
            let max = v.iter().copied().fold(0.0f64, f64::max);
            if max <= 0.0 {
                assert!(got.times.is_empty());
                continue;
            }
            let thr = 0.5 * max;
            let mask: Vec<bool> = v.iter().map(|&x| x >= thr).collect();
            let mut runs: Vec<(usize, usize)> = Vec::new();
            let mut i = 0;
            while i < n {
                if mask[i] {
                    let s = i;
                    while i < n && mask[i] {
                        i += 1;
                    }
                    runs.push((s, i - 1));
                } else {
                    i += 1;
                }
            }
            let t_of = |r: &(usize, usize)| (r.0 + r.1) as f64 / 2.0 / fps;
            'merge: loop {
                for k in 0..runs.len().saturating_sub(1) {
                    if t_of(&runs[k + 1]) - t_of(&runs[k]) < min_gap {
                        let merged = (runs[k].0, runs[k + 1].1);
                        runs[k] = merged;
                        runs.remove(k + 1);
                        continue 'merge;
                    }
                }
                break;
            }
            let want: Vec<f64> = runs.iter().map(|r| t_of(r)).collect();
            assert_eq!(got.times, want, "trial {trial}");
        }
    }

    fn tone(freq: f64, sr: u32, seconds: f64) -> AudioClip {
        let n = (seconds * sr as f64) as usize;
        AudioClip {
            samples: (0..n)
                .map(|i| 0.6 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sample_rate: sr,
        }
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn pitch_tracks_pure_tones() {
        for freq in [220.0, 440.0] {
            let clip = tone(freq, 22050, 1.0);
            let pc = extract_pitch(&clip, 0.04, 256.0 / 22050.0).unwrap();
            assert!(pc.voiced.iter().all(|&v| v));
            let med = median(pc.f0.clone());
            assert!((med - freq).abs() < 2.0, "median {med} for {freq}");
        }
    }

    #[test]
    fn pitch_rejects_noise_and_silence() {
        let mut rng = Rng::new(4);
        let noise = AudioClip {
            samples: (0..22050).map(|_| 0.3 * rng.normal()).collect(),
            sample_rate: 22050,
        };
        let pc = extract_pitch(&noise, 0.04, 256.0 / 22050.0).unwrap();
        let unvoiced = pc.voiced.iter().filter(|&&v| !v).count();
        assert!(
            unvoiced as f64 >= 0.9 * pc.voiced.len() as f64,
            "{unvoiced}/{}",
            pc.voiced.len()
        );

        let silence = AudioClip {
            samples: vec![0.0; 22050],
            sample_rate: 22050,
        };
        let pc = extract_pitch(&silence, 0.04, 256.0 / 22050.0).unwrap();
        assert!(pc.voiced.iter().all(|&v| !v));
        assert!(pc.f0.iter().all(|&f| f == 0.0));
        // f0 > 0 <=> voiced on every contour we produce.
        assert!(pc.f0.iter().zip(&pc.voiced).all(|(&f, &v)| (f > 0.0) == v));

        let short = AudioClip {
            samples: vec![0.0; 10],
            sample_rate: 22050,
        };
        assert!(extract_pitch(&short, 0.04, 0.01).unwrap().f0.is_empty());
    }

    #[test]
    fn prominence_unimodal_and_ties() {
        let pc = PitchContour {
            frame_times: (0..9).map(|i| i as f64 * 0.25).collect(),
            f0: vec![100.0, 120.0, 140.0, 160.0, 180.0, 160.0, 140.0, 120.0, 100.0],
            voiced: vec![true; 9],
        };
        assert_eq!(detect_prominences(&pc, 0.6), vec![1.0]);

        // Two equal maxima 0.5 s apart, min_gap 0.6: earlier kept.
        let pc = PitchContour {
            frame_times: (0..5).map(|i| i as f64 * 0.25).collect(),
            f0: vec![100.0, 150.0, 120.0, 150.0, 100.0],
            voiced: vec![true; 5],
        };
        assert_eq!(detect_prominences(&pc, 0.6), vec![0.25]);
        // With a small window both survive.
        assert_eq!(detect_prominences(&pc, 0.1), vec![0.25, 0.75]);

        let unvoiced = PitchContour {
            frame_times: vec![0.0, 0.1],
            f0: vec![0.0, 0.0],
            voiced: vec![false, false],
        };
        assert!(detect_prominences(&unvoiced, 0.25).is_empty());
    }

    #[test]
    fn matching_hand_cases() {
        let pairs = match_peaks(&[1.0, 2.0], &[1.0, 2.0], 1.0);
        assert_eq!(pairs, vec![(1.0, 1.0), (2.0, 2.0)]);
        let pairs = match_peaks(&[1.0, 2.0], &[1.1, 2.3], 1.0);
        assert_eq!(pairs, vec![(1.0, 1.1), (2.0, 2.3)]);
        assert!(match_peaks(&[1.0], &[5.0], 2.0).is_empty());
        assert!(match_peaks(&[], &[1.0], 2.0).is_empty());
    }

    /// Exhaustive best assignment: maximize pair count, then minimize total
    /// |dt|, over all one-to-one matchings within max_lag.
    fn optimal_assignment(apexes: &[f64], proms: &[f64], max_lag: f64) -> (usize, f64) {
        fn go(
            a: usize,
            apexes: &[f64],
            proms: &[f64],
            used: &mut Vec<bool>,
            max_lag: f64,
        ) -> (usize, f64) {
            if a == apexes.len() {
                return (0, 0.0);
            }
            // Skip this apex.
            let mut best = go(a + 1, apexes, proms, used, max_lag);
            for p in 0..proms.len() {
                if used[p] || (apexes[a] - proms[p]).abs() > max_lag {
                    continue;
                }
                used[p] = true;
                let (c, t) = go(a + 1, apexes, proms, used, max_lag);
                used[p] = false;
                let cand = (c + 1, t + (apexes[a] - proms[p]).abs());
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1 - 1e-15) {
                    best = cand;
                }
            }
            best
        }
        go(0, apexes, proms, &mut vec![false; proms.len()], max_lag)
    }

    #[test]
    fn greedy_matches_optimal_in_most_random_cases() {
        let mut rng = Rng::new(5);
        let mut agree = 0;
        let trials = 1000;
        for _ in 0..trials {
            // Realistic lists: apexes separated by at least the suppression
            // window, speech peaks jittered around them, with occasional
            // spurious or missing peaks.
            let na = 1 + rng.below(6);
            let mut a: Vec<f64> = Vec::new();
            let mut t = rng.uniform_in(0.0, 1.0);
            for _ in 0..na {
                a.push(t);
                t += rng.uniform_in(0.8, 2.5);
            }
            let mut p: Vec<f64> = Vec::new();
            for &x in &a {
                if rng.uniform() > 0.1 {
                    p.push(x + 0.15 * rng.normal());
                }
            }
            if rng.uniform() < 0.2 {
                p.push(rng.uniform_in(0.0, t));
            }
            a.sort_by(f64::total_cmp);
            p.sort_by(f64::total_cmp);
            let pairs = match_peaks(&a, &p, 1.0);
            let greedy_total: f64 = pairs.iter().map(|(g, s)| (g - s).abs()).sum();
            let (opt_count, opt_total) = optimal_assignment(&a, &p, 1.0);
            if pairs.len() == opt_count && (greedy_total - opt_total).abs() < 1e-9 {
                agree += 1;
            }
        }
        assert!(agree >= 950, "greedy agreed in {agree}/{trials}");
    }

    #[test]
    fn offset_hand_cases_and_shift_invariance() {
        assert_eq!(gesture_offset(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), 0.0);
        let v = gesture_offset(&[(1.0, 1.1), (2.0, 2.3)]).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        assert!(matches!(
            gesture_offset(&[]),
            Err(CoreError::UndefinedMetric(_))
        ));
        // Swapping the roles leaves |dt| unchanged.
        let swapped = gesture_offset(&[(1.1, 1.0), (2.3, 2.0)]).unwrap();
        assert_eq!(v, swapped);
        // Common time shift of both modalities.
        let a = [1.0, 2.0, 3.5];
        let p = [1.2, 2.1, 3.4];
        let base = gesture_offset(&match_peaks(&a, &p, 1.0)).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        let sp: Vec<f64> = p.iter().map(|x| x + 10.0).collect();
        let shifted = gesture_offset(&match_peaks(&sa, &sp, 1.0)).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn mi_identical_streams_equal_occupancy_entropy() {
        let times = [0.3, 1.7, 2.2, 4.9];
        let mi = mutual_information(&times, &times, 5.0, 50).unwrap();
        let h = occupancy_entropy(&times, 5.0, 50).unwrap();
        assert!((mi - h).abs() < 1e-12);
    }

    #[test]
    fn mi_anti_aligned_balanced_is_one_bit() {
        // gesture occupies bins 0..5, speech bins 5..10 of a 10-bin grid:
        // speech bit = NOT gesture bit, both balanced -> exactly 1 bit.
        let g: Vec<f64> = (0..5).map(|i| i as f64 + 0.5).collect();
        let s: Vec<f64> = (5..10).map(|i| i as f64 + 0.5).collect();
        let mi = mutual_information(&g, &s, 10.0, 10).unwrap();
        assert!((mi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mi_independent_events_near_zero() {
        let mut rng = Rng::new(6);
        let trials = 300;
        let mut total = 0.0;
        for _ in 0..trials {
            let g: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.0, 10.0)).collect();
            let s: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.0, 10.0)).collect();
            total += mutual_information(&g, &s, 10.0, 50).unwrap();
        }
        let mean = total / trials as f64;
        assert!(mean < 0.05, "mean MI {mean}");
    }

    #[test]
    fn mi_symmetry_bounds_and_edge_cases() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let g: Vec<f64> = (0..1 + rng.below(10))
                .map(|_| rng.uniform_in(0.0, 8.0))
                .collect();
            let s: Vec<f64> = (0..1 + rng.below(10))
                .map(|_| rng.uniform_in(0.0, 8.0))
                .collect();
            let ab = mutual_information(&g, &s, 8.0, 32).unwrap();
            let ba = mutual_information(&s, &g, 8.0, 32).unwrap();
            assert_eq!(ab, ba);
            let hg = occupancy_entropy(&g, 8.0, 32).unwrap();
            let hs = occupancy_entropy(&s, 8.0, 32).unwrap();
            assert!(ab >= 0.0 && ab <= hg.min(hs) + 1e-12);
        }
        assert_eq!(mutual_information(&[], &[], 5.0, 50).unwrap(), 0.0);
        assert!(mutual_information(&[1.0], &[1.0], 0.0, 50).is_err());
        assert!(mutual_information(&[1.0], &[1.0], 5.0, 1).is_err());
    }

    #[test]
    fn cmtd_hand_cases_and_triangle() {
        assert_eq!(cmtd_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = cmtd_loss(&[1.0, 3.0], &[1.5, 2.5]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!((cmtd_loss(&[2.0], &[3.2]).unwrap() - 1.2).abs() < 1e-12);
        assert!(cmtd_loss(&[1.0], &[1.0, 2.0]).is_err());

        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.0, 10.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.0, 10.0)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.0, 10.0)).collect();
            let ac = cmtd_loss(&a, &c).unwrap();
            let ab = cmtd_loss(&a, &b).unwrap();
            let bc = cmtd_loss(&b, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn cmtd_var_matches_plain_and_differentiates() {
        let targets = [1.5, 2.5, 0.5];
        let preds = DTensor::from_vec(&[3], vec![1.0, 3.0, 0.75]).unwrap();
        let tape = Tape::new();
        let loss = cmtd_loss_var(&tape, tape.leaf(preds.clone()), &targets).unwrap();
        let plain = cmtd_loss(preds.data(), &targets).unwrap();
        assert!((loss.value().item() - plain).abs() < 1e-12);
        let err = grad_check(
            |t, x| cmtd_loss_var(t, x, &targets),
            &preds,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn wer_cer_cases() {
        assert_eq!(wer_cer("a b c", "a b c").unwrap(), (0.0, 0.0));
        let (wer, _) = wer_cer("a b c", "a x c").unwrap();
        assert!((wer - 100.0 / 3.0).abs() < 1e-9);
        let (wer, cer) = wer_cer("abc", "").unwrap();
        assert_eq!(wer, 100.0);
        assert_eq!(cer, 100.0);
        assert!(matches!(
            wer_cer("", "abc"),
            Err(CoreError::UndefinedMetric(_))
        ));
        // Insertions can push rates above 100%.
        let (wer, _) = wer_cer("a", "x y z").unwrap();
        assert_eq!(wer, 300.0);
    }

    #[test]
    fn synthetic_pipeline_recovers_planted_alignment() {
        let cfg = AnalyzeConfig::default();
        let samples = gen_synthetic_corpus(8, 0.0, &Rng::new(40));
        let mut total_offset = 0.0;
        let mut n = 0;
        for s in &samples {
            let m = motion_magnitude(&s.keypoints).unwrap();
            let apexes = detect_apexes(&m, cfg.rel_threshold, cfg.min_gap).unwrap();
            assert_eq!(
                apexes.times.len(),
                s.apex_times_true.len(),
                "clip {}",
                s.clip_id
            );
            for (got, want) in apexes.times.iter().zip(&s.apex_times_true) {
                assert!((got - want).abs() < 1e-9, "apex {got} vs {want}");
            }
            let report = analyze_clip(&s.keypoints, &s.audio, &cfg).unwrap();
            let offset = report.gesture_offset.expect("matched pairs");
            total_offset += offset * report.matched_pairs.len() as f64;
            n += report.matched_pairs.len();
            assert_eq!(report.matched_pairs.len(), s.apex_times_true.len());
        }
        let mean = total_offset / n as f64;
        assert!(mean < 0.0116, "mean offset {mean}");
    }

    #[test]
    fn batch_csv_layout() {
        let report = AlignmentReport {
            apexes: ApexList {
                times: vec![1.0],
                magnitudes: vec![2.0],
            },
            prominences: vec![1.1],
            matched_pairs: vec![(1.0, 1.1)],
            gesture_offset: Some(0.1),
            mutual_info: 0.5,
            n_apexes: 1,
            n_peaks: 1,
        };
        let csv = batch_csv(&[("clip0".into(), report, Some(0.2))]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "clip_id,offset_s,mi_bits,cmtd_s,n_apexes,n_peaks"
        );
        assert!(lines.next().unwrap().starts_with("clip0,0.100000,0.500000,0.200000,1,1"));
    }
}
