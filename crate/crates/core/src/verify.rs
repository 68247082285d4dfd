//! Embedded verification suites: gradient checks, routing invariants, metric
//! oracles, and sparse-vs-dense equivalence. A fault-injection knob lets the
//! suites prove they detect a broken gate (mutation-test oracle).

use serde::Serialize;

use crate::alignment::{
    detect_apexes, gesture_offset, motion_magnitude, mutual_information, occupancy_entropy,
    wer_cer, MotionMagnitude,
};
use crate::dataio::gen_synthetic_corpus;
use crate::decoder::{Decoder, DecoderConfig, DecoderTargets};
use crate::error::Result;
use crate::moe::{MoEConfig, MoELayer};
use crate::nn::{AttentionBlock, ParamStore};
use crate::rng::Rng;
use crate::tape::{grad_check, Tape};
use crate::tensor::DTensor;
use crate::training::{total_loss, LossWeights};

/// Deliberately broken behaviors, used to show the suites catch them.
#[derive(Debug, Clone, Default)]
pub struct FaultInjection {
    /// Present routing weights as raw gate masses instead of renormalizing
    /// over the selected experts.
    pub skip_gate_renorm: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.into(),
            pass,
            detail,
        });
    }

    /// Shorthand for value-tolerance checks.
    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.check(
            name,
            (got - want).abs() <= tol,
            format!("got {got}, want {want} (tol {tol})"),
        );
    }

    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.pass).count()
    }

    pub fn failed(&self) -> usize {
        self.checks.len() - self.passed()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub suites: Vec<SuiteResult>,
}

impl VerifySummary {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.failed() == 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary json")
    }

    /// One line per suite: name, passed, failed.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{}: {} passed, {} failed\n",
                s.name,
                s.passed(),
                s.failed()
            ));
            for c in s.checks.iter().filter(|c| !c.pass) {
                out.push_str(&format!("  FAIL {}: {}\n", c.name, c.detail));
            }
        }
        out
    }
}

pub fn run_verification(fault: &FaultInjection, seed: u64) -> Result<VerifySummary> {
    Ok(VerifySummary {
        suites: vec![
            gradient_suite(seed)?,
            routing_suite(fault, seed)?,
            metric_suite(seed)?,
            equivalence_suite(seed)?,
        ],
    })
}

fn gradient_suite(seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("gradient_checks");
    let mut rng = Rng::new(seed).derive(1);

    let x = DTensor::randn(&[3, 4], 0.7, &mut rng);
    let err = grad_check(
        |_t, v| Ok(v.softmax_rows().abs().mean()),
        &x,
        1e-5,
    )?;
    suite.check("softmax_abs_mean", err < 1e-4, format!("max rel err {err}"));

    let mut ps = ParamStore::new();
    let attn = AttentionBlock::new("v.attn", 8, 2, &mut ps, &mut rng)?;
    let q = DTensor::randn(&[3, 8], 0.5, &mut rng);
    let err = grad_check(
        |t, v| Ok(attn.forward(t, &ps, v, v, None)?.sum()),
        &q,
        1e-5,
    )?;
    suite.check("attention_block", err < 1e-4, format!("max rel err {err}"));

    let mut ps = ParamStore::new();
    let moe = MoELayer::new(
        "v.moe",
        6,
        MoEConfig {
            num_experts: 4,
            top_k: 2,
            expert_layers: 2,
            hidden_dim: 12,
            capacity_factor: f64::INFINITY,
            fallback_prob: 0.0,
            lb_weight: 0.01,
        },
        &mut ps,
        &mut rng,
    )?;
    let x = DTensor::randn(&[5, 6], 0.5, &mut rng);
    let moe_rng = Rng::new(seed).derive(2);
    let err = grad_check(
        |t, v| {
            let (y, _, aux) = moe.forward(t, &ps, v, &moe_rng, false)?;
            y.sum().add(aux)
        },
        &x,
        1e-5,
    )?;
    suite.check("moe_forward", err < 1e-4, format!("max rel err {err}"));

    let mut ps = ParamStore::new();
    let dec = Decoder::new(
        "v.dec",
        DecoderConfig {
            layers: 1,
            width: 8,
            heads: 2,
            max_steps: 8,
            mel_dim: 3,
            vocab_size: 10,
            ..DecoderConfig::default()
        },
        &mut ps,
        &mut rng,
    )?;
    let g = DTensor::randn(&[2, 8], 0.5, &mut rng);
    let z = DTensor::randn(&[2, 8], 0.5, &mut rng);
    let targets = DecoderTargets {
        tokens: vec![1, 4, 7],
        mel: DTensor::randn(&[3, 3], 0.5, &mut rng),
        t_target: 3.0 * 256.0 / 22050.0,
    };
    let e0 = DTensor::randn(&[2, 8], 0.5, &mut rng);
    let err = grad_check(
        |t, v| {
            let l = dec.teacher_forced_masked(
                t,
                &ps,
                v,
                t.leaf(g.clone()),
                t.leaf(z.clone()),
                &targets,
                false,
            )?;
            l.l_text.add(l.l_mel)?.add(l.l_dur)
        },
        &e0,
        1e-5,
    )?;
    suite.check("decoder_losses", err < 1e-4, format!("max rel err {err}"));
    Ok(suite)
}

fn routing_suite(fault: &FaultInjection, seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("routing_invariants");
    let mut rng = Rng::new(seed).derive(10);
    let cfg = MoEConfig {
        num_experts: 4,
        top_k: 2,
        expert_layers: 1,
        hidden_dim: 8,
        capacity_factor: 1.25,
        fallback_prob: 0.0,
        lb_weight: 0.01,
    };
    let mut ps = ParamStore::new();
    let moe = MoELayer::new("v.route", 8, cfg.clone(), &mut ps, &mut rng)?;
    let capacity = (cfg.capacity_factor * 24.0 * cfg.top_k as f64 / cfg.num_experts as f64).ceil()
        as usize;

    let mut weight_sum_ok = true;
    let mut distinct_ok = true;
    let mut capacity_ok = true;
    let mut load_ok = true;
    for trial in 0..50 {
        let x = DTensor::randn(&[24, 8], 1.0, &mut rng);
        let mut trace = moe.gate_route(&ps, &x, &Rng::new(seed).derive(100 + trial), false)?;
        if fault.skip_gate_renorm {
            // Mutation under test: report raw softmax masses of the selected
            // experts without renormalizing over the selection.
            let logits = moe.gate_logits(&ps, &x)?;
            for tok in &mut trace.tokens {
                let row = logits.row(tok.token_idx);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                tok.weights = tok.experts.iter().map(|&e| exps[e] / total).collect();
            }
        }
        let mut load = vec![0usize; cfg.num_experts];
        for tok in &trace.tokens {
            let sum: f64 = tok.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                weight_sum_ok = false;
            }
            let mut seen = tok.experts.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != tok.experts.len() || tok.experts.len() != cfg.top_k {
                distinct_ok = false;
            }
            for (e, _) in tok.surviving() {
                load[e] += 1;
            }
        }
        if load.iter().any(|&c| c > capacity) {
            capacity_ok = false;
        }
        if load != trace.load {
            load_ok = false;
        }
    }
    suite.check(
        "selected_weights_sum_to_one",
        weight_sum_ok,
        "renormalized gate weights per token".into(),
    );
    suite.check(
        "experts_distinct_and_top_k",
        distinct_ok,
        "each token picks top_k distinct experts".into(),
    );
    suite.check(
        "capacity_respected",
        capacity_ok,
        format!("per-expert load <= {capacity}"),
    );
    suite.check(
        "trace_load_matches_assignments",
        load_ok,
        "trace.load equals recount of surviving assignments".into(),
    );

    // Fallback slot statistics: with fallback_prob 1 and a uniform gate the
    // final slot is uniform over the remaining experts.
    let cfg_fb = MoEConfig {
        fallback_prob: 1.0,
        ..cfg
    };
    let mut ps_fb = ParamStore::new();
    let moe_fb = MoELayer::new("v.fb", 4, cfg_fb.clone(), &mut ps_fb, &mut rng)?;
    // Zero gate weights: all logits equal, remaining mass uniform.
    let gate_w = ps_fb.lookup("v.fb.gate.weight").unwrap();
    let shape = ps_fb.get(gate_w).shape().to_vec();
    *ps_fb.get_mut(gate_w) = DTensor::zeros(&shape);
    let x = DTensor::randn(&[1, 4], 1.0, &mut rng);
    let trials = 3000usize;
    let mut counts = vec![0usize; cfg_fb.num_experts];
    let mut first: Option<usize> = None;
    for i in 0..trials {
        let trace = moe_fb.gate_route(&ps_fb, &x, &Rng::new(seed).derive(7000 + i as u64), true)?;
        let tok = &trace.tokens[0];
        let f = tok.experts[0];
        if let Some(prev) = first {
            if prev != f {
                suite.check("fallback_keeps_primary_slot", false, "primary changed".into());
            }
        }
        first = Some(f);
        counts[*tok.experts.last().unwrap()] += 1;
    }
    let remaining = cfg_fb.num_experts - (cfg_fb.top_k - 1);
    let p = 1.0 / remaining as f64;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    let expected = trials as f64 * p;
    let primary = first.unwrap();
    let worst = counts
        .iter()
        .enumerate()
        .filter(|(e, _)| *e != primary)
        .map(|(_, &c)| (c as f64 - expected).abs())
        .fold(0.0f64, f64::max);
    suite.check(
        "fallback_uniform_over_remaining",
        worst <= 4.0 * sigma && counts[primary] == 0,
        format!("max deviation {worst:.1} vs 4 sigma {:.1}", 4.0 * sigma),
    );
    Ok(suite)
}

fn metric_suite(seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("metric_oracles");

    // Apex at the midpoint of an above-threshold run: samples 12..=18 at
    // 25 fps put the apex at 15/25 = 0.600 s.
    let mut values = vec![0.1; 30];
    for v in &mut values[12..=18] {
        *v = 1.0;
    }
    let apexes = detect_apexes(
        &MotionMagnitude { values, fps: 25.0 },
        0.5,
        0.25,
    )?;
    suite.check(
        "apex_run_midpoint",
        apexes.times.len() == 1 && (apexes.times[0] - 0.600).abs() < 1e-12,
        format!("times {:?}", apexes.times),
    );

    let off = gesture_offset(&[(1.0, 1.2), (2.0, 1.9), (3.0, 3.05)])?;
    suite.close("gesture_offset_mean_abs", off, (0.2 + 0.1 + 0.05) / 3.0, 1e-12);

    let times = [0.5, 1.5, 2.5, 7.5];
    let mi = mutual_information(&times, &times, 10.0, 20)?;
    let h = occupancy_entropy(&times, 10.0, 20)?;
    suite.check(
        "identical_streams_mi_equals_occupancy_entropy",
        mi == h,
        format!("mi {mi} vs entropy {h}"),
    );

    let (wer, cer) = wer_cer("the cat sat", "the bat sat")?;
    // Error rates are reported in percent.
    suite.close("wer_single_substitution", wer, 100.0 / 3.0, 1e-9);
    suite.close("cer_single_substitution", cer, 100.0 / 11.0, 1e-9);

    let w = LossWeights {
        lambda_dur: 0.5,
        lambda_al: 0.1,
    };
    suite.close(
        "total_loss_hand_example",
        total_loss(1.0, 2.0, 3.0, 4.0, &w, 0.0)?,
        4.9,
        1e-12,
    );

    let tape = Tape::new();
    let logits = tape.leaf(DTensor::zeros(&[5, 16]));
    suite.close(
        "uniform_logits_cross_entropy",
        logits.gather_nll(&[0, 3, 7, 11, 15])?.item(),
        (16f64).ln(),
        1e-12,
    );

    // Planted apexes in a zero-jitter synthetic clip are recovered exactly.
    let sample = &gen_synthetic_corpus(1, 0.0, &Rng::new(seed).derive(40))[0];
    let mag = motion_magnitude(&sample.keypoints)?;
    let found = detect_apexes(&mag, 0.5, 0.25)?;
    let worst = sample
        .apex_times_true
        .iter()
        .map(|&t| {
            found
                .times
                .iter()
                .map(|&f| (f - t).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0f64, f64::max);
    suite.check(
        "synthetic_apex_recovery",
        found.times.len() == sample.apex_times_true.len() && worst < 1e-9,
        format!(
            "{} apexes, worst error {worst:e}",
            found.times.len()
        ),
    );
    Ok(suite)
}

fn equivalence_suite(seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("sparse_dense_equivalence");
    let mut rng = Rng::new(seed).derive(20);
    let d = 6;
    let k = 4;
    let cfg = MoEConfig {
        num_experts: k,
        top_k: k,
        expert_layers: 2,
        hidden_dim: 12,
        capacity_factor: f64::INFINITY,
        fallback_prob: 0.0,
        lb_weight: 0.01,
    };
    let mut ps = ParamStore::new();
    let moe = MoELayer::new("v.dense", d, cfg, &mut ps, &mut rng)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = DTensor::randn(&[7, d], 0.8, &mut rng);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (y, _, _) = moe.forward(&tape, &ps, xv, &Rng::new(seed).derive(21), false)?;
        let sparse = y.value();

        // Dense reference: softmax-weighted sum over every expert.
        let logits = moe.gate_logits(&ps, &x)?;
        let mut dense = DTensor::zeros(&[7, d]);
        for (e, expert) in moe.experts.iter().enumerate() {
            let t2 = Tape::new();
            let out = expert.forward(&t2, &ps, t2.leaf(x.clone()))?.value();
            for r in 0..7 {
                let row = logits.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
                let p = exps[e] / exps.iter().sum::<f64>();
                for c in 0..d {
                    let v = dense.at(r, c) + p * out.at(r, c);
                    dense.set(r, c, v);
                }
            }
        }
        for r in 0..7 {
            for c in 0..d {
                worst = worst.max((sparse.at(r, c) - dense.at(r, c)).abs());
            }
        }
    }
    suite.check(
        "top_k_equals_num_experts_matches_dense",
        worst < 1e-9,
        format!("max abs diff {worst:e}"),
    );
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes_all_suites() {
        let summary = run_verification(&FaultInjection::default(), 1234).unwrap();
        assert!(summary.all_passed(), "{}", summary.render_text());
        assert_eq!(summary.suites.len(), 4);
        for s in &summary.suites {
            assert!(s.passed() > 0, "suite {} ran no checks", s.name);
        }
    }

    #[test]
    fn broken_gate_renormalization_is_detected() {
        let fault = FaultInjection {
            skip_gate_renorm: true,
        };
        let summary = run_verification(&fault, 1234).unwrap();
        let routing = summary
            .suites
            .iter()
            .find(|s| s.name == "routing_invariants")
            .unwrap();
        let weight_check = routing
            .checks
            .iter()
            .find(|c| c.name == "selected_weights_sum_to_one")
            .unwrap();
        assert!(!weight_check.pass, "mutation went undetected");
        // Unrelated suites stay green.
        assert!(summary
            .suites
            .iter()
            .filter(|s| s.name != "routing_invariants")
            .all(|s| s.failed() == 0));
    }

    #[test]
    fn summary_serializes_with_per_suite_counts() {
        let summary = run_verification(&FaultInjection::default(), 99).unwrap();
        let json = summary.to_json();
        assert!(json.contains("gradient_checks"));
        assert!(json.contains("metric_oracles"));
        let text = summary.render_text();
        assert!(text.contains("passed"));
    }
}
