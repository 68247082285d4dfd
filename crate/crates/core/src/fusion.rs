//! Multimodal style fusion: speaker and motion encoders, a perceiver-style
//! resampler producing a fixed number of global style tokens, gesture token
//! projection, and three interchangeable fusion strategies (per-modality MoE,
//! cross-attention, plain concatenation with a mixer).
//!
//! All paths share one token-count contract: for a clip with T frames and N
//! style latents, the fused memory has 1 + T + N rows of width d.

use crate::dataio::KeypointSequence;
use crate::error::{CoreError, Result};
use crate::moe::{MoELayer, RoutingTrace};
use crate::nn::{AttentionBlock, FeedForward, LinearLayer, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{concat_cols, concat_rows, Tape, Var};
use crate::tensor::DTensor;

/// Mean-pool over mel frames followed by a two-layer projection to width d.
/// Pooling uses the permutation-stable mean, so frame order cannot leak into
/// the embedding even at the last ulp.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pub proj: FeedForward,
    pub n_mels: usize,
    pub dim: usize,
}

impl SpeakerEncoder {
    pub fn new(name: &str, n_mels: usize, dim: usize, ps: &mut ParamStore, rng: &mut Rng) -> Self {
        Self {
            proj: FeedForward::new(name, &[n_mels, dim, dim], 0.01, ps, rng),
            n_mels,
            dim,
        }
    }

    /// mel is [F x n_mels]; output is [1 x d].
    pub fn forward<'t>(&self, tape: &'t Tape, ps: &ParamStore, mel: Var<'t>) -> Result<Var<'t>> {
        let v = mel.value();
        if v.rows() == 0 || v.numel() == 0 {
            return Err(CoreError::Input("speaker encoder: empty mel".into()));
        }
        if v.cols() != self.n_mels {
            return Err(CoreError::Shape(format!(
                "speaker encoder: {} mel bands, expected {}",
                v.cols(),
                self.n_mels
            )));
        }
        self.proj.forward(tape, ps, mel.mean_rows_stable())
    }
}

/// Per-frame joint velocities (first differences x fps, flattened to 2J)
/// passed through a depth-2 temporal convolution (kernel 5, zero-padded
/// same-length) to width d.
#[derive(Debug, Clone)]
pub struct MotionEncoder {
    pub conv1: LinearLayer,
    pub conv2: LinearLayer,
    pub in_dim: usize,
    pub dim: usize,
    slope: f64,
}

/// Velocity features: row t = fps * (flat(K_{t+1}) - flat(K_t)); the final
/// row repeats the previous one so the output keeps T rows.
pub fn keypoint_velocities(kp: &KeypointSequence) -> Result<DTensor> {
    kp.validate()?;
    let t = kp.num_frames();
    if t < 2 {
        return Err(CoreError::Input("motion encoder needs >= 2 frames".into()));
    }
    let j2 = 2 * kp.num_joints();
    let mut data = Vec::with_capacity(t * j2);
    for i in 0..t - 1 {
        let a = kp.flat_frame(i);
        let b = kp.flat_frame(i + 1);
        data.extend(a.iter().zip(&b).map(|(x, y)| (y - x) * kp.fps));
    }
    let last: Vec<f64> = data[(t - 2) * j2..].to_vec();
    data.extend(last);
    DTensor::from_vec(&[t, j2], data)
}

/// One zero-padded temporal convolution realized as gathered shifts plus a
/// linear map over the stacked window.
fn temporal_conv<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    layer: &LinearLayer,
    ps: &ParamStore,
    kernel: usize,
) -> Result<Var<'t>> {
    let t = x.value().rows();
    let w = x.value().cols();
    let half = kernel / 2;
    let pad = tape.leaf(DTensor::zeros(&[half, w]));
    let padded = concat_rows(tape, &[pad, x, pad])?;
    let shifts: Vec<Var<'t>> = (0..kernel).map(|o| padded.slice_rows(o, o + t)).collect();
    layer.forward(tape, ps, concat_cols(tape, &shifts)?)
}

impl MotionEncoder {
    pub fn new(name: &str, joints: usize, dim: usize, ps: &mut ParamStore, rng: &mut Rng) -> Self {
        let in_dim = 2 * joints;
        Self {
            conv1: LinearLayer::new(&format!("{name}.conv1"), 5 * in_dim, dim, ps, rng),
            conv2: LinearLayer::new(&format!("{name}.conv2"), 5 * dim, dim, ps, rng),
            in_dim,
            dim,
            slope: 0.01,
        }
    }

    /// velocities is [T x 2J]; output is [T x d].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        velocities: Var<'t>,
    ) -> Result<Var<'t>> {
        if velocities.value().cols() != self.in_dim {
            return Err(CoreError::Shape(format!(
                "motion encoder: width {}, expected {}",
                velocities.value().cols(),
                self.in_dim
            )));
        }
        let h = temporal_conv(tape, velocities, &self.conv1, ps, 5)?.leaky_relu(self.slope);
        temporal_conv(tape, h, &self.conv2, ps, 5)
    }

    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        kp: &KeypointSequence,
    ) -> Result<Var<'t>> {
        let vel = tape.leaf(keypoint_velocities(kp)?);
        self.forward(tape, ps, vel)
    }
}

/// N learned latents cross-attend over per-frame keys built from the
/// feature-wise concatenation of motion features and the broadcast speaker
/// embedding. Output is always [N x d], independent of T.
#[derive(Debug, Clone)]
pub struct PerceiverResampler {
    pub latents: ParamId,
    pub n_latents: usize,
    pub dim: usize,
    pub key_proj: LinearLayer,
    pub blocks: Vec<(AttentionBlock, FeedForward)>,
}

impl PerceiverResampler {
    pub fn new(
        name: &str,
        n_latents: usize,
        dim: usize,
        heads: usize,
        blocks: usize,
        ps: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let latents = ps.register(
            format!("{name}.latents"),
            DTensor::randn(&[n_latents, dim], 0.5, rng),
        );
        let key_proj = LinearLayer::new(&format!("{name}.key_proj"), 2 * dim, dim, ps, rng);
        let blocks = (0..blocks)
            .map(|b| {
                Ok((
                    AttentionBlock::new(&format!("{name}.b{b}.attn"), dim, heads, ps, rng)?,
                    FeedForward::new(&format!("{name}.b{b}.ff"), &[dim, 2 * dim, dim], 0.01, ps, rng),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            latents,
            n_latents,
            dim,
            key_proj,
            blocks,
        })
    }

    /// motion is [T x d], speaker [1 x d].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        motion: Var<'t>,
        speaker: Var<'t>,
    ) -> Result<Var<'t>> {
        let t = motion.value().rows();
        if motion.value().cols() != self.dim || speaker.value().cols() != self.dim {
            return Err(CoreError::Config(format!(
                "resampler width mismatch: motion {}, speaker {}, expected {}",
                motion.value().cols(),
                speaker.value().cols(),
                self.dim
            )));
        }
        let ones = tape.leaf(DTensor::full(&[t, 1], 1.0));
        let spk_rows = ones.matmul(speaker)?;
        let keys_in = concat_cols(tape, &[motion, spk_rows])?;
        let keys = self.key_proj.forward(tape, ps, keys_in)?;
        let mut z = tape.param(ps, self.latents);
        for (attn, ff) in &self.blocks {
            z = z.add(attn.forward(tape, ps, z, keys, None)?)?;
            z = z.add(ff.forward(tape, ps, z)?)?;
        }
        Ok(z)
    }
}

/// Row-major flatten of each frame's J x 2 keypoints, then a linear map to d:
/// one token per video frame.
pub fn project_gestures<'t>(
    tape: &'t Tape,
    ps: &ParamStore,
    kp: &KeypointSequence,
    proj: &LinearLayer,
) -> Result<Var<'t>> {
    kp.validate()?;
    let flat = kp.flat_matrix();
    if flat.cols() != proj.in_dim {
        return Err(CoreError::Input(format!(
            "gesture projection expects {} coords, got {}",
            proj.in_dim,
            flat.cols()
        )));
    }
    proj.forward(tape, ps, tape.leaf(flat))
}

/// Which fusion strategy builds z_total (ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Moe,
    Xattn,
    Concat,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(Self::Moe),
            "xattn" => Ok(Self::Xattn),
            "concat" => Ok(Self::Concat),
            other => Err(CoreError::Input(format!(
                "unknown fusion mode {other:?} (expected moe|xattn|concat)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Moe => "moe",
            Self::Xattn => "xattn",
            Self::Concat => "concat",
        }
    }
}

/// Fused style memory. z_total stacks the styled speaker token, T motion
/// tokens, and N style tokens along the token axis.
pub struct FusedStyle<'t> {
    pub z_speech: Var<'t>,
    pub z_motion: Var<'t>,
    pub z_style: Var<'t>,
    pub z_total: Var<'t>,
}

/// Per-modality MoE styling: independent expert mixtures refine the speaker
/// token, the motion tokens, and the style tokens before concatenation.
#[allow(clippy::too_many_arguments)]
pub fn fuse_styles_moe<'t>(
    tape: &'t Tape,
    ps: &ParamStore,
    speaker: Var<'t>,
    motion: Var<'t>,
    style: Var<'t>,
    moe_speech: &MoELayer,
    moe_motion: &MoELayer,
    moe_style: &MoELayer,
    rng: &Rng,
    training: bool,
) -> Result<(FusedStyle<'t>, Vec<RoutingTrace>, Var<'t>)> {
    check_widths(&[speaker, motion, style])?;
    let (z_speech, tr_a, aux_a) = moe_speech.forward(tape, ps, speaker, &rng.derive(0), training)?;
    let (z_motion, tr_b, aux_b) = moe_motion.forward(tape, ps, motion, &rng.derive(1), training)?;
    let (z_style, tr_c, aux_c) = moe_style.forward(tape, ps, style, &rng.derive(2), training)?;
    let z_total = concat_rows(tape, &[z_speech, z_motion, z_style])?;
    let aux = aux_a.add(aux_b)?.add(aux_c)?;
    Ok((
        FusedStyle {
            z_speech,
            z_motion,
            z_style,
            z_total,
        },
        vec![tr_a, tr_b, tr_c],
        aux,
    ))
}

/// Cross-attention ablation: the style tokens attend over [speaker || motion];
/// speaker and motion tokens pass through so the token-count contract matches
/// the MoE path.
pub fn fuse_styles_xattn<'t>(
    tape: &'t Tape,
    ps: &ParamStore,
    speaker: Var<'t>,
    motion: Var<'t>,
    style: Var<'t>,
    xattn: &AttentionBlock,
) -> Result<FusedStyle<'t>> {
    check_widths(&[speaker, motion, style])?;
    let memory = concat_rows(tape, &[speaker, motion])?;
    let z_style = xattn.forward(tape, ps, style, memory, None)?;
    let z_total = concat_rows(tape, &[speaker, motion, z_style])?;
    Ok(FusedStyle {
        z_speech: speaker,
        z_motion: motion,
        z_style,
        z_total,
    })
}

/// Concatenation ablation: raw token stack through a shared linear mixer.
pub fn fuse_styles_concat<'t>(
    tape: &'t Tape,
    ps: &ParamStore,
    speaker: Var<'t>,
    motion: Var<'t>,
    style: Var<'t>,
    mixer: &LinearLayer,
) -> Result<FusedStyle<'t>> {
    check_widths(&[speaker, motion, style])?;
    let stacked = concat_rows(tape, &[speaker, motion, style])?;
    let z_total = mixer.forward(tape, ps, stacked)?;
    let t = motion.value().rows();
    let n = style.value().rows();
    Ok(FusedStyle {
        z_speech: z_total.slice_rows(0, 1),
        z_motion: z_total.slice_rows(1, 1 + t),
        z_style: z_total.slice_rows(1 + t, 1 + t + n),
        z_total,
    })
}

fn check_widths(parts: &[Var<'_>]) -> Result<()> {
    let d = parts[0].value().cols();
    for p in parts {
        if p.value().cols() != d {
            return Err(CoreError::Config(format!(
                "fusion width mismatch: {} vs {d}",
                p.value().cols()
            )));
        }
    }
    Ok(())
}

/// CSV rows (sample_id, modality, dim0, dim1, ...) for external embedding
/// analysis.
pub fn embedding_csv(sample_id: &str, fused: &FusedStyle<'_>) -> String {
    let mut out = String::new();
    for (modality, var) in [
        ("speech", fused.z_speech),
        ("motion", fused.z_motion),
        ("style", fused.z_style),
    ] {
        let v = var.value();
        for r in 0..v.rows() {
            out.push_str(sample_id);
            out.push(',');
            out.push_str(modality);
            for x in v.row(r) {
                out.push_str(&format!(",{x:.9}"));
            }
            out.push('\n');
        }
    }
    out
}
