//! `g2sk`: gesture-speech analysis, synthetic-corpus generation, training,
//! ablations, verification, and routing audits from one binary.
//!
//! Exit codes: 0 success, 1 failed property, 2 input/config error,
//! 3 undefined metric, 4 training divergence.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use g2sk_core::alignment::{
    analyze_clip, batch_csv, detect_prominences, extract_pitch, motion_magnitude, AnalyzeConfig,
};
use g2sk_core::dataio::{
    build_manifest, gen_synthetic_corpus, parse_keypoints, read_wav, write_corpus,
};
use g2sk_core::fusion::{embedding_csv, FusionMode};
use g2sk_core::moe::{load_balance_stats, MoEConfig, MoELayer};
use g2sk_core::training::{
    ablate_alignment, ablate_fusion, configure_threads, fusion_ablation_csv, train, TrainConfig,
};
use g2sk_core::verify::{run_verification, FaultInjection};
use g2sk_core::{CoreError, DTensor, ParamStore, Rng, Tape};

#[derive(Parser)]
#[command(name = "g2sk", version, about = "gesture-to-speech toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cross-modal alignment report for one keypoints/audio pair.
    Analyze {
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Histogram bins for mutual information.
        #[arg(long)]
        bins: Option<usize>,
        /// Minimum gap (s) between detected events.
        #[arg(long)]
        min_gap: Option<f64>,
        /// Relative magnitude threshold for apex detection.
        #[arg(long)]
        threshold: Option<f64>,
        /// Maximum apex-to-prominence pairing lag (s).
        #[arg(long)]
        max_lag: Option<f64>,
    },
    /// Generate a paired synthetic corpus with a manifest.
    GenSynth {
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Std dev (s) of the speech-peak jitter around each apex.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        split: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model on an in-process synthetic corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fusion: Option<String>,
        #[arg(long = "lambda-al")]
        lambda_al: Option<f64>,
        #[arg(long, default_value_t = 64)]
        n_samples: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
    /// Paired comparison experiments (alignment loss or fusion strategy).
    Ablate {
        /// Which axis to ablate: "alignment" or "fusion".
        #[arg(long)]
        which: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "lambda-al")]
        lambda_al: Option<f64>,
        #[arg(long, default_value_t = 64)]
        n_samples: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
    /// Run the embedded invariant suites.
    Verify {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fault injection: present routing weights without renormalization
        /// (the suites must flag this).
        #[arg(long)]
        inject_bad_gating: bool,
    },
    /// Dump routing decisions for a seeded expert layer as JSONL.
    RoutingAudit {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        #[arg(long = "top-k", default_value_t = 2)]
        top_k: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code_for(&err))
        }
    }
}

/// Map error kinds onto the documented exit-code taxonomy.
fn code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::UndefinedMetric(_)) => 3,
        Some(CoreError::Divergence(_)) => 4,
        Some(CoreError::Contract(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.cmd {
        Cmd::Analyze {
            keypoints,
            wav,
            out,
            bins,
            min_gap,
            threshold,
            max_lag,
        } => cmd_analyze(&keypoints, &wav, &out, bins, min_gap, threshold, max_lag),
        Cmd::GenSynth {
            n,
            jitter,
            seed,
            split,
            out,
        } => cmd_gen_synth(n, jitter, seed, split, &out),
        Cmd::Train {
            config,
            out,
            seed,
            fusion,
            lambda_al,
            n_samples,
            jitter,
        } => cmd_train(
            config.as_deref(),
            &out,
            seed,
            fusion.as_deref(),
            lambda_al,
            n_samples,
            jitter,
        ),
        Cmd::Ablate {
            which,
            config,
            out,
            seed,
            lambda_al,
            n_samples,
            jitter,
        } => cmd_ablate(
            &which,
            config.as_deref(),
            &out,
            seed,
            lambda_al,
            n_samples,
            jitter,
        ),
        Cmd::Verify {
            seed,
            out,
            inject_bad_gating,
        } => cmd_verify(seed, out.as_deref(), inject_bad_gating),
        Cmd::RoutingAudit {
            out,
            seed,
            tokens,
            experts,
            top_k,
        } => cmd_routing_audit(&out, seed, tokens, experts, top_k),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    keypoints: &Path,
    wav: &Path,
    out: &Path,
    bins: Option<usize>,
    min_gap: Option<f64>,
    threshold: Option<f64>,
    max_lag: Option<f64>,
) -> anyhow::Result<u8> {
    let kp = parse_keypoints(keypoints).context("reading keypoints")?;
    let audio = read_wav(wav).context("reading wav")?;
    let mut cfg = AnalyzeConfig::default();
    if let Some(b) = bins {
        cfg.n_bins = b;
    }
    if let Some(g) = min_gap {
        cfg.min_gap = g;
    }
    if let Some(t) = threshold {
        cfg.rel_threshold = t;
    }
    if let Some(l) = max_lag {
        cfg.max_lag = l;
    }
    let report = analyze_clip(&kp, &audio, &cfg)?;
    if report.prominences.is_empty() {
        return Err(CoreError::UndefinedMetric("no speech prominences".into()).into());
    }
    if report.gesture_offset.is_none() {
        return Err(CoreError::UndefinedMetric("zero matched gesture-speech pairs".into()).into());
    }

    std::fs::create_dir_all(out)?;
    let resolved = serde_json::json!({
        "command": "analyze",
        "keypoints": keypoints.display().to_string(),
        "wav": wav.display().to_string(),
        "rel_threshold": cfg.rel_threshold,
        "min_gap": cfg.min_gap,
        "max_lag": cfg.max_lag,
        "n_bins": cfg.n_bins,
        "pitch_frame": cfg.pitch_frame,
        "pitch_hop": cfg.pitch_hop,
    });
    write(&out.join("resolved.json"), &format!("{resolved:#}\n"))?;
    write(
        &out.join("report.json"),
        &format!("{}\n", serde_json::to_string_pretty(&report)?),
    )?;
    let clip_id = keypoints
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("clip")
        .trim_end_matches(".keypoints")
        .to_string();
    write(
        &out.join("report.csv"),
        &batch_csv(&[(clip_id, report.clone(), None)]),
    )?;

    // Diagnostic plot: magnitude with apexes, pitch with prominences.
    let mag = motion_magnitude(&kp)?;
    let pitch = extract_pitch(&audio, cfg.pitch_frame, cfg.pitch_hop)?;
    let proms = detect_prominences(&pitch, cfg.min_gap);
    let mag_series = plot::Series {
        label: "gesture speed".into(),
        color: "#1f77b4".into(),
        points: mag
            .values
            .iter()
            .enumerate()
            .map(|(t, &v)| (t as f64 / mag.fps, v))
            .collect(),
    };
    let apex_markers: Vec<plot::Marker> = report
        .apexes
        .times
        .iter()
        .map(|&x| plot::Marker {
            x,
            color: "#d62728".into(),
        })
        .collect();
    let f0_series = plot::Series {
        label: "f0 (voiced)".into(),
        color: "#2ca02c".into(),
        points: pitch
            .frame_times
            .iter()
            .zip(&pitch.f0)
            .zip(&pitch.voiced)
            .filter(|(_, &v)| v)
            .map(|((&t, &f), _)| (t, f))
            .collect(),
    };
    let prom_markers: Vec<plot::Marker> = proms
        .iter()
        .map(|&x| plot::Marker {
            x,
            color: "#9467bd".into(),
        })
        .collect();
    let svg = plot::chart(&[
        ("motion magnitude + apexes", vec![mag_series], apex_markers),
        ("pitch contour + prominences", vec![f0_series], prom_markers),
    ]);
    write(&out.join("analyze.svg"), &svg)?;

    println!(
        "offset {:.4} s, mi {:.4} bits, {} apexes, {} peaks",
        report.gesture_offset.unwrap(),
        report.mutual_info,
        report.n_apexes,
        report.n_peaks
    );
    Ok(0)
}

fn cmd_gen_synth(n: usize, jitter: f64, seed: u64, split: f64, out: &Path) -> anyhow::Result<u8> {
    let samples = gen_synthetic_corpus(n, jitter, &Rng::new(seed));
    std::fs::create_dir_all(out)?;
    write_corpus(out, &samples)?;
    let manifest = build_manifest(out, split, seed)?;
    write(&out.join("manifest.csv"), &manifest.to_csv())?;
    let resolved = serde_json::json!({
        "command": "gen-synth",
        "n": n,
        "jitter_std": jitter,
        "seed": seed,
        "split": split,
    });
    write(&out.join("resolved.json"), &format!("{resolved:#}\n"))?;

    // Whole-second duration histogram for a quick sanity read.
    let mut hist = std::collections::BTreeMap::new();
    for s in &samples {
        *hist.entry(s.duration.floor() as i64).or_insert(0usize) += 1;
    }
    println!(
        "{n} samples ({} train / {} test, {} rejected)",
        manifest.train.len(),
        manifest.test.len(),
        manifest.rejects.len()
    );
    for (sec, count) in hist {
        println!("{sec:>3} s: {}", "#".repeat(count));
    }
    Ok(0)
}

/// Shared config resolution for train/ablate: file or defaults, then flag
/// overrides.
fn resolve_config(
    config: Option<&Path>,
    seed: Option<u64>,
    fusion: Option<&str>,
    lambda_al: Option<f64>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = fusion {
        cfg.fusion = FusionMode::parse(f)?;
    }
    if let Some(l) = lambda_al {
        cfg.weights.lambda_al = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_for(cfg: &TrainConfig, n_samples: usize, jitter: f64) -> Vec<g2sk_core::dataio::SynthSample> {
    gen_synthetic_corpus(n_samples, jitter, &Rng::new(cfg.seed).derive(77))
}

fn write_run_context(out: &Path, cfg: &TrainConfig, n_samples: usize, jitter: f64) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let corpus_meta = serde_json::json!({
        "n_samples": n_samples,
        "jitter_std": jitter,
    });
    write(&out.join("corpus.json"), &format!("{corpus_meta:#}\n"))?;
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    fusion: Option<&str>,
    lambda_al: Option<f64>,
    n_samples: usize,
    jitter: f64,
) -> anyhow::Result<u8> {
    let cfg = resolve_config(config, seed, fusion, lambda_al)?;
    write_run_context(out, &cfg, n_samples, jitter)?;
    let corpus = corpus_for(&cfg, n_samples, jitter);
    let outcome = train(&corpus, &cfg)?;
    write(&out.join("steps.csv"), &outcome.log.steps_csv())?;
    write(&out.join("evals.csv"), &outcome.log.evals_csv())?;
    outcome.params.save(&out.join("model.ckpt"))?;

    // Fused-embedding dump for the first few held-out clips.
    let mut emb = String::new();
    for &i in outcome.holdout_idxs.iter().take(4) {
        let tape = Tape::new();
        let (fused, _, _) = outcome.model.fuse(
            &tape,
            &outcome.params,
            &corpus[i],
            &Rng::new(cfg.seed).derive(i as u64),
            false,
        )?;
        emb.push_str(&embedding_csv(&corpus[i].clip_id, &fused));
    }
    write(&out.join("embeddings.csv"), &emb)?;

    let first = outcome.log.steps.first().map(|s| s.total).unwrap_or(f64::NAN);
    let last = outcome.log.steps.last().map(|s| s.total).unwrap_or(f64::NAN);
    println!(
        "{} steps, total {first:.4} -> {last:.4} ({} mode)",
        outcome.log.steps.len(),
        cfg.fusion.name()
    );
    if let Some(e) = outcome.log.evals.last() {
        println!(
            "held-out: dur err {:.4} s, offset {:.4} s, mi {:.4} bits",
            e.dur_err, e.gesture_offset, e.mutual_info
        );
    }
    Ok(0)
}

fn cmd_ablate(
    which: &str,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    lambda_al: Option<f64>,
    n_samples: usize,
    jitter: f64,
) -> anyhow::Result<u8> {
    let cfg = resolve_config(config, seed, None, lambda_al)?;
    write_run_context(out, &cfg, n_samples, jitter)?;
    let corpus = corpus_for(&cfg, n_samples, jitter);
    match which {
        "alignment" => {
            let pair = ablate_alignment(&corpus, &cfg)?;
            write(&out.join("baseline_steps.csv"), &pair.baseline.steps_csv())?;
            write(&out.join("baseline_evals.csv"), &pair.baseline.evals_csv())?;
            write(&out.join("with_al_steps.csv"), &pair.with_al.steps_csv())?;
            write(&out.join("with_al_evals.csv"), &pair.with_al.evals_csv())?;
            let cmp = serde_json::json!({
                "lambda_al": pair.lambda_al,
                "baseline_dur_err_s": pair.baseline_dur_err,
                "with_al_dur_err_s": pair.with_al_dur_err,
            });
            write(&out.join("comparison.json"), &format!("{cmp:#}\n"))?;
            println!(
                "held-out duration error: baseline {:.4} s, lambda_al={} {:.4} s",
                pair.baseline_dur_err, pair.lambda_al, pair.with_al_dur_err
            );
        }
        "fusion" => {
            let rows = ablate_fusion(&corpus, &cfg)?;
            for row in &rows {
                write(
                    &out.join(format!("{}_steps.csv", row.mode.name())),
                    &row.log.steps_csv(),
                )?;
            }
            let csv = fusion_ablation_csv(&rows);
            write(&out.join("fusion_ablation.csv"), &csv)?;
            print!("{csv}");
        }
        other => {
            return Err(
                CoreError::Input(format!("unknown ablation axis {other:?} (alignment|fusion)"))
                    .into(),
            )
        }
    }
    Ok(0)
}

fn cmd_verify(seed: u64, out: Option<&Path>, inject_bad_gating: bool) -> anyhow::Result<u8> {
    let fault = FaultInjection {
        skip_gate_renorm: inject_bad_gating,
    };
    let summary = run_verification(&fault, seed)?;
    print!("{}", summary.render_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write(&dir.join("summary.json"), &format!("{}\n", summary.to_json()))?;
    }
    Ok(if summary.all_passed() { 0 } else { 1 })
}

fn cmd_routing_audit(
    out: &Path,
    seed: u64,
    tokens: usize,
    experts: usize,
    top_k: usize,
) -> anyhow::Result<u8> {
    let dim = 16;
    let cfg = MoEConfig {
        num_experts: experts,
        top_k,
        expert_layers: 1,
        hidden_dim: dim,
        capacity_factor: 1.25,
        fallback_prob: 0.5,
        lb_weight: 0.01,
    };
    let mut ps = ParamStore::new();
    let mut rng = Rng::new(seed);
    let layer = MoELayer::new("audit", dim, cfg, &mut ps, &mut rng)?;
    let x = DTensor::randn(&[tokens, dim], 1.0, &mut rng);
    let trace = layer.gate_route(&ps, &x, &Rng::new(seed).derive(1), true)?;
    let stats = load_balance_stats(&trace);

    std::fs::create_dir_all(out)?;
    write(&out.join("routes.jsonl"), &trace.to_jsonl())?;
    write(
        &out.join("load_stats.json"),
        &format!("{}\n", serde_json::to_string_pretty(&stats)?),
    )?;
    let resolved = serde_json::json!({
        "command": "routing-audit",
        "seed": seed,
        "tokens": tokens,
        "experts": experts,
        "top_k": top_k,
        "dim": dim,
    });
    write(&out.join("resolved.json"), &format!("{resolved:#}\n"))?;
    println!(
        "load {:?}, dropped {}, cv {:.4}",
        stats.counts, stats.dropped, stats.cv
    );
    Ok(0)
}
