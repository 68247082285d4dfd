//! Autoregressive cross-attention decoder: consumes text embeddings plus
//! gesture and style memories, emits acoustic tokens, mel frames, and a
//! per-step stop probability that determines the predicted duration.

use crate::error::{CoreError, Result};
use crate::nn::{
    causal_mask, sinusoidal_positions, AttentionBlock, FeedForward, LayerNorm, LinearLayer,
    ParamId, ParamStore,
};
use crate::rng::Rng;
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::DTensor;

/// Character vocabulary: printable ASCII 0x20..=0x7E.
pub const ASCII_VOCAB: usize = 95;

/// Map text to vocabulary indices; characters outside printable ASCII reject.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            let b = c as u32;
            if (0x20..=0x7E).contains(&b) {
                Ok((b - 0x20) as usize)
            } else {
                Err(CoreError::Input(format!(
                    "character {c:?} outside printable ASCII"
                )))
            }
        })
        .collect()
}

/// Inverse of `encode_text`; out-of-range indices render as '?'.
pub fn decode_tokens(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| {
            if t < ASCII_VOCAB {
                char::from_u32(0x20 + t as u32).unwrap()
            } else {
                '?'
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_steps: usize,
    pub mel_dim: usize,
    pub vocab_size: usize,
    pub stop_threshold: f64,
    pub temperature: f64,
    pub cond_drop_prob: f64,
    /// Seconds of audio per decoder step (mel hop).
    pub frame_hop: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 32,
            heads: 4,
            max_steps: 64,
            mel_dim: 80,
            vocab_size: ASCII_VOCAB,
            stop_threshold: 0.5,
            temperature: 0.7,
            cond_drop_prob: 0.1,
            frame_hop: 256.0 / 22050.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.max_steps == 0 || self.mel_dim == 0 {
            return Err(CoreError::Config("decoder sizes must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(CoreError::Config("vocab must have at least 2 symbols".into()));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(CoreError::Config(format!(
                "stop_threshold {} outside (0,1)",
                self.stop_threshold
            )));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(CoreError::Config("cond_drop_prob outside [0,1]".into()));
        }
        if self.frame_hop <= 0.0 {
            return Err(CoreError::Config("frame_hop must be positive".into()));
        }
        Ok(())
    }
}

/// Result of a sampling run.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub tokens: Vec<usize>,
    /// Pre-sampling logits, one row per emitted step.
    pub token_logits: DTensor,
    pub mel: DTensor,
    pub stop_probs: Vec<f64>,
    pub t_pred: f64,
    /// Set when max_steps elapsed without the stop head firing.
    pub truncated: bool,
}

/// Teacher-forced losses; every Var stays on the caller's tape.
pub struct DecoderLosses<'t> {
    pub l_text: Var<'t>,
    pub l_mel: Var<'t>,
    /// Stop-flag BCE plus |soft expected stop time - target|; the BCE term
    /// is what pushes the hard stop position toward the target duration.
    pub l_dur: Var<'t>,
    pub token_logits: Var<'t>,
    pub mel_pred: Var<'t>,
    pub stop_logits: Var<'t>,
    pub t_pred_soft: f64,
}

/// Per-sample training targets.
#[derive(Debug, Clone)]
pub struct DecoderTargets {
    pub tokens: Vec<usize>,
    pub mel: DTensor,
    pub t_target: f64,
}

struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: AttentionBlock,
    ln2: LayerNorm,
    cross_attn: AttentionBlock,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Pre-LN causal transformer with a cross-attention stage per block.
pub struct Decoder {
    pub cfg: DecoderConfig,
    embed: ParamId,
    start: ParamId,
    blocks: Vec<DecoderBlock>,
    /// Normalizes the cross-attention memory so conditioning streams of any
    /// scale (e.g. raw keypoint coordinates) cannot blow up the values.
    mem_ln: LayerNorm,
    /// Pre-LN convention: normalize the stream before the output heads.
    final_ln: LayerNorm,
    tok_head: LinearLayer,
    mel_head: LinearLayer,
    stop_head: LinearLayer,
}

impl Decoder {
    pub fn new(name: &str, cfg: DecoderConfig, ps: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let embed = ps.register(
            format!("{name}.embed"),
            DTensor::randn(&[cfg.vocab_size, d], 0.5, rng),
        );
        let start = ps.register(format!("{name}.start"), DTensor::randn(&[1, d], 0.5, rng));
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.block{l}");
            blocks.push(DecoderBlock {
                ln1: LayerNorm::new(&format!("{p}.ln1"), d, ps),
                self_attn: AttentionBlock::new(&format!("{p}.self"), d, cfg.heads, ps, rng)?,
                ln2: LayerNorm::new(&format!("{p}.ln2"), d, ps),
                cross_attn: AttentionBlock::new(&format!("{p}.cross"), d, cfg.heads, ps, rng)?,
                ln3: LayerNorm::new(&format!("{p}.ln3"), d, ps),
                ff: FeedForward::new(&format!("{p}.ff"), &[d, 2 * d, d], 0.01, ps, rng),
            });
        }
        Ok(Self {
            embed,
            start,
            blocks,
            mem_ln: LayerNorm::new(&format!("{name}.mem_ln"), d, ps),
            final_ln: LayerNorm::new(&format!("{name}.final_ln"), d, ps),
            tok_head: LinearLayer::new(&format!("{name}.tok_head"), d, cfg.vocab_size, ps, rng),
            mel_head: LinearLayer::new(&format!("{name}.mel_head"), d, cfg.mel_dim, ps, rng),
            stop_head: LinearLayer::new(&format!("{name}.stop_head"), d, 1, ps, rng),
            cfg,
        })
    }

    /// Step inputs: learned start row, then embeddings of the already-known
    /// tokens, plus sinusoidal positions.
    fn step_inputs<'t>(&self, tape: &'t Tape, ps: &ParamStore, prev: &[usize]) -> Result<Var<'t>> {
        let start = tape.param(ps, self.start);
        let x = if prev.is_empty() {
            start
        } else {
            let emb = tape.param(ps, self.embed).gather_rows(prev);
            concat_rows(tape, &[start, emb])?
        };
        let pos = tape.leaf(sinusoidal_positions(prev.len() + 1, self.cfg.width));
        x.add(pos)
    }

    /// Shared trunk: hidden states for `prev.len()+1` steps. `visible_mem`
    /// limits cross-attention to the first rows of `memory` (condition
    /// dropout hides everything past the text block).
    fn hidden<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        prev: &[usize],
        memory: Var<'t>,
        visible_mem: usize,
    ) -> Result<Var<'t>> {
        let steps = prev.len() + 1;
        let mem_rows = memory.shape()[0];
        let self_mask = causal_mask(steps);
        let cross_mask = if visible_mem < mem_rows {
            let mut m = DTensor::zeros(&[steps, mem_rows]);
            for i in 0..steps {
                for j in visible_mem..mem_rows {
                    m.set(i, j, -1e30);
                }
            }
            Some(m)
        } else {
            None
        };
        let memory = self.mem_ln.forward(tape, ps, memory)?;
        let mut h = self.step_inputs(tape, ps, prev)?;
        for b in &self.blocks {
            let n1 = b.ln1.forward(tape, ps, h)?;
            h = h.add(b.self_attn.forward(tape, ps, n1, n1, Some(&self_mask))?)?;
            let n2 = b.ln2.forward(tape, ps, h)?;
            h = h.add(b.cross_attn.forward(tape, ps, n2, memory, cross_mask.as_ref())?)?;
            let n3 = b.ln3.forward(tape, ps, h)?;
            h = h.add(b.ff.forward(tape, ps, n3)?)?;
        }
        self.final_ln.forward(tape, ps, h)
    }

    fn check_memory(&self, e_text: &[usize], g: &[usize], z: &[usize]) -> Result<()> {
        if e_text[0] == 0 {
            return Err(CoreError::Input("empty text embedding".into()));
        }
        let d = self.cfg.width;
        if e_text[1] != d || g[1] != d || z[1] != d {
            return Err(CoreError::Shape(format!(
                "memory widths {}/{}/{} != decoder width {d}",
                e_text[1], g[1], z[1]
            )));
        }
        Ok(())
    }

    /// Sampling run. Token choice is softmax at `temperature`; the stop head
    /// ends generation at the first step whose probability clears the
    /// threshold.
    pub fn decode(
        &self,
        ps: &ParamStore,
        e_text: &DTensor,
        g: &DTensor,
        z_total: &DTensor,
        rng: &mut Rng,
        training: bool,
    ) -> Result<DecoderOutput> {
        self.check_memory(e_text.shape(), g.shape(), z_total.shape())?;
        let text_rows = e_text.rows();
        let drop_cond = training && rng.uniform() < self.cfg.cond_drop_prob;
        let mut tokens: Vec<usize> = Vec::new();
        let mut logit_rows: Vec<Vec<f64>> = Vec::new();
        let mut mel_rows: Vec<Vec<f64>> = Vec::new();
        let mut stop_probs: Vec<f64> = Vec::new();
        let mut stopped_at: Option<usize> = None;
        for step in 0..self.cfg.max_steps {
            let tape = Tape::new();
            let memory = concat_rows(
                &tape,
                &[
                    tape.leaf(e_text.clone()),
                    tape.leaf(g.clone()),
                    tape.leaf(z_total.clone()),
                ],
            )?;
            let visible = if drop_cond { text_rows } else { memory.shape()[0] };
            let h = self.hidden(&tape, ps, &tokens, memory, visible)?;
            let steps = tokens.len() + 1;
            let last = h.slice_rows(steps - 1, steps);
            let logits = self.tok_head.forward(&tape, ps, last)?.value();
            let mel = self.mel_head.forward(&tape, ps, last)?.value();
            let stop_logit = self.stop_head.forward(&tape, ps, last)?.item();
            let stop_prob = 1.0 / (1.0 + (-stop_logit).exp());

            let probs = temperature_probs(logits.data(), self.cfg.temperature);
            let tok = rng.weighted(&probs);
            tokens.push(tok);
            logit_rows.push(logits.data().to_vec());
            mel_rows.push(mel.data().to_vec());
            stop_probs.push(stop_prob);
            if stop_prob >= self.cfg.stop_threshold {
                stopped_at = Some(step);
                break;
            }
        }
        let (t_pred, truncated) = match stopped_at {
            Some(idx) => ((idx + 1) as f64 * self.cfg.frame_hop, false),
            None => (self.cfg.max_steps as f64 * self.cfg.frame_hop, true),
        };
        Ok(DecoderOutput {
            tokens,
            token_logits: DTensor::from_rows(&logit_rows)?,
            mel: DTensor::from_rows(&mel_rows)?,
            stop_probs,
            t_pred,
            truncated,
        })
    }

    /// Teacher forcing with the condition-dropout coin flipped from `rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn teacher_forced<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        e_text: Var<'t>,
        g: Var<'t>,
        z_total: Var<'t>,
        targets: &DecoderTargets,
        rng: &mut Rng,
        training: bool,
    ) -> Result<DecoderLosses<'t>> {
        let drop = training && rng.uniform() < self.cfg.cond_drop_prob;
        self.teacher_forced_masked(tape, ps, e_text, g, z_total, targets, drop)
    }

    /// Teacher forcing with an explicit condition-dropout decision.
    pub fn teacher_forced_masked<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        e_text: Var<'t>,
        g: Var<'t>,
        z_total: Var<'t>,
        targets: &DecoderTargets,
        drop_cond: bool,
    ) -> Result<DecoderLosses<'t>> {
        self.check_memory(&e_text.shape(), &g.shape(), &z_total.shape())?;
        let s = targets.tokens.len();
        if s == 0 {
            return Err(CoreError::Contract("empty target token sequence".into()));
        }
        if targets.mel.rows() != s || targets.mel.cols() != self.cfg.mel_dim {
            return Err(CoreError::Contract(format!(
                "mel targets {}x{} vs {s} steps x {} bands",
                targets.mel.rows(),
                targets.mel.cols(),
                self.cfg.mel_dim
            )));
        }
        if let Some(&bad) = targets.tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(CoreError::Contract(format!(
                "target token {bad} outside vocab {}",
                self.cfg.vocab_size
            )));
        }
        let text_rows = e_text.shape()[0];
        let memory = concat_rows(tape, &[e_text, g, z_total])?;
        let visible = if drop_cond { text_rows } else { memory.shape()[0] };
        let h = self.hidden(tape, ps, &targets.tokens[..s - 1], memory, visible)?;

        let token_logits = self.tok_head.forward(tape, ps, h)?;
        let l_text = token_logits.gather_nll(&targets.tokens)?;

        let mel_pred = self.mel_head.forward(tape, ps, h)?;
        let l_mel = mel_pred.sub(tape.leaf(targets.mel.clone()))?.abs().mean();

        // Stop flag raised only on the final target step.
        let stop_logits = self.stop_head.forward(tape, ps, h)?;
        let mut stop_t = DTensor::zeros(&[s, 1]);
        stop_t.set(s - 1, 0, 1.0);
        let bce = stop_logits.bce_with_logits(&stop_t)?;
        let t_soft = soft_duration(stop_logits, self.cfg.frame_hop)?;
        let t_pred_soft = t_soft.item();
        let l_dur = t_soft.add_scalar(-targets.t_target).abs().add(bce)?;

        Ok(DecoderLosses {
            l_text,
            l_mel,
            l_dur,
            token_logits,
            mel_pred,
            stop_logits,
            t_pred_soft,
        })
    }
}

/// Softmax over `logits / temperature`, computed stably.
fn temperature_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - m) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Hard duration rule: first stop probability clearing the threshold ends
/// the sequence; (index + 1) frames of `hop` seconds each.
pub fn t_pred_from_stops(stop_probs: &[f64], threshold: f64, hop: f64) -> (f64, bool) {
    match stop_probs.iter().position(|&p| p >= threshold) {
        Some(idx) => ((idx + 1) as f64 * hop, false),
        None => (stop_probs.len() as f64 * hop, true),
    }
}

/// Differentiable expected stop time: treats per-step stop probabilities as
/// a geometric-style halting distribution (first-stop mass via exclusive
/// survival products); residual mass is charged the full horizon.
pub fn soft_duration<'t>(stop_logits: Var<'t>, hop: f64) -> Result<Var<'t>> {
    let s = stop_logits.shape()[0];
    let p = stop_logits.sigmoid();
    let survive = p.neg().add_scalar(1.0).cumprod_exclusive();
    let q = p.mul(survive)?;
    let times: Vec<f64> = (0..s).map(|i| (i + 1) as f64 * hop).collect();
    let expected = q.dot_const(&times)?;
    let tail = q
        .dot_const(&vec![1.0; s])?
        .neg()
        .add_scalar(1.0)
        .scale(s as f64 * hop);
    expected.add(tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    fn toy_cfg() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            width: 16,
            heads: 2,
            max_steps: 12,
            mel_dim: 6,
            vocab_size: 16,
            ..DecoderConfig::default()
        }
    }

    fn toy_decoder(seed: u64) -> (Decoder, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = Rng::new(seed);
        let dec = Decoder::new("dec", toy_cfg(), &mut ps, &mut rng).unwrap();
        (dec, ps)
    }

    fn toy_memory(seed: u64, d: usize) -> (DTensor, DTensor, DTensor) {
        let mut rng = Rng::new(seed);
        (
            DTensor::randn(&[3, d], 0.5, &mut rng),
            DTensor::randn(&[4, d], 0.5, &mut rng),
            DTensor::randn(&[5, d], 0.5, &mut rng),
        )
    }

    fn toy_targets(dec: &Decoder, seed: u64, steps: usize) -> DecoderTargets {
        let mut rng = Rng::new(seed);
        let tokens: Vec<usize> = (0..steps).map(|_| rng.below(dec.cfg.vocab_size)).collect();
        DecoderTargets {
            tokens,
            mel: DTensor::randn(&[steps, dec.cfg.mel_dim], 0.5, &mut rng),
            t_target: steps as f64 * dec.cfg.frame_hop,
        }
    }

    fn zero_params(ps: &mut ParamStore) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            // Keep LayerNorm scale at 1 so normalization stays well-defined.
            if ps.name(id).contains(".gamma") {
                continue;
            }
            let shape = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = DTensor::zeros(&shape);
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = toy_cfg();
        c.stop_threshold = 1.0;
        assert!(c.validate().is_err());
        let mut c = toy_cfg();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = toy_cfg();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        assert!(toy_cfg().validate().is_ok());
    }

    #[test]
    fn text_roundtrip_and_rejection() {
        let toks = encode_text("Hello, world!").unwrap();
        assert_eq!(decode_tokens(&toks), "Hello, world!");
        assert!(encode_text("caf\u{e9}").is_err());
    }

    #[test]
    fn empty_text_is_an_input_error() {
        let (dec, ps) = toy_decoder(1);
        let (_, g, z) = toy_memory(2, 16);
        let e = DTensor::zeros(&[0, 16]);
        let mut rng = Rng::new(3);
        match dec.decode(&ps, &e, &g, &z, &mut rng, false) {
            Err(CoreError::Input(_)) => {}
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn decode_is_deterministic_for_fixed_seed() {
        let (dec, ps) = toy_decoder(4);
        let (e, g, z) = toy_memory(5, 16);
        let a = dec.decode(&ps, &e, &g, &z, &mut Rng::new(7), false).unwrap();
        let b = dec.decode(&ps, &e, &g, &z, &mut Rng::new(7), false).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.mel.data(), b.mel.data());
        assert_eq!(a.stop_probs, b.stop_probs);
        assert_eq!(a.t_pred, b.t_pred);
    }

    #[test]
    fn near_zero_temperature_matches_greedy_argmax() {
        let (dec, ps) = toy_decoder(8);
        let mut dec = dec;
        dec.cfg.temperature = 1e-9;
        let (e, g, z) = toy_memory(9, 16);
        let out = dec.decode(&ps, &e, &g, &z, &mut Rng::new(11), false).unwrap();
        for (s, &tok) in out.tokens.iter().enumerate() {
            let row = out.token_logits.row(s);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(tok, argmax, "step {s}");
        }
        // Greedy decoding no longer depends on the sampling seed.
        let again = dec.decode(&ps, &e, &g, &z, &mut Rng::new(999), false).unwrap();
        assert_eq!(out.tokens, again.tokens);
    }

    #[test]
    fn stop_at_step_nine_gives_116ms() {
        let hop = 256.0 / 22050.0;
        let mut probs = vec![0.1; 12];
        probs[9] = 0.6;
        let (t, truncated) = t_pred_from_stops(&probs, 0.5, hop);
        assert!(!truncated);
        assert!((t - 10.0 * hop).abs() < 1e-15);
        assert!((t - 0.116).abs() < 1e-3);
    }

    #[test]
    fn t_pred_monotone_in_stop_threshold() {
        let mut rng = Rng::new(13);
        for _ in 0..200 {
            let probs: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
            let mut prev = 0.0;
            for k in 1..20 {
                let th = k as f64 / 20.0;
                let (t, _) = t_pred_from_stops(&probs, th, 0.01);
                assert!(t >= prev, "threshold {th}: {t} < {prev}");
                prev = t;
            }
        }
    }

    #[test]
    fn never_stopping_sets_truncation_flag() {
        let (dec, mut ps) = toy_decoder(14);
        let bias = ps.lookup("dec.stop_head.bias").unwrap();
        *ps.get_mut(bias) = DTensor::from_vec(&[1], vec![-50.0]).unwrap();
        // Wipe the stop weight so no hidden state can overcome the bias.
        let w = ps.lookup("dec.stop_head.weight").unwrap();
        let shape = ps.get(w).shape().to_vec();
        *ps.get_mut(w) = DTensor::zeros(&shape);
        let (e, g, z) = toy_memory(15, 16);
        let out = dec.decode(&ps, &e, &g, &z, &mut Rng::new(16), false).unwrap();
        assert!(out.truncated);
        assert_eq!(out.tokens.len(), dec.cfg.max_steps);
        assert!((out.t_pred - dec.cfg.max_steps as f64 * dec.cfg.frame_hop).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_cost_is_log_vocab() {
        // All-zero weights make every token logit zero: the uniform case.
        let (dec, mut ps) = toy_decoder(17);
        zero_params(&mut ps);
        let tape = Tape::new();
        let (e, g, z) = toy_memory(18, 16);
        let targets = toy_targets(&dec, 19, 5);
        let losses = dec
            .teacher_forced_masked(
                &tape,
                &ps,
                tape.leaf(e),
                tape.leaf(g),
                tape.leaf(z),
                &targets,
                false,
            )
            .unwrap();
        assert!((losses.l_text.item() - (16f64).ln()).abs() < 1e-12);
        assert!((losses.l_text.item() - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn zero_prediction_against_ones_mel_costs_one() {
        let (dec, mut ps) = toy_decoder(20);
        zero_params(&mut ps);
        let tape = Tape::new();
        let (e, g, z) = toy_memory(21, 16);
        let mut targets = toy_targets(&dec, 22, 4);
        targets.mel = DTensor::from_vec(&[4, 6], vec![1.0; 24]).unwrap();
        let losses = dec
            .teacher_forced_masked(
                &tape,
                &ps,
                tape.leaf(e),
                tape.leaf(g),
                tape.leaf(z),
                &targets,
                false,
            )
            .unwrap();
        assert!((losses.l_mel.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_stop_logits_recover_target_duration() {
        let tape = Tape::new();
        let hop = 0.01;
        let logits = tape.leaf(DTensor::from_vec(&[5, 1], vec![-50.0, -50.0, -50.0, -50.0, 50.0]).unwrap());
        let t = soft_duration(logits, hop).unwrap();
        assert!((t.item() - 5.0 * hop).abs() < 1e-9);
    }

    #[test]
    fn causality_is_exact_under_future_target_edits() {
        let (dec, ps) = toy_decoder(23);
        let (e, g, z) = toy_memory(24, 16);
        let targets = toy_targets(&dec, 25, 6);
        let run = |tg: &DecoderTargets| {
            let tape = Tape::new();
            let losses = dec
                .teacher_forced_masked(
                    &tape,
                    &ps,
                    tape.leaf(e.clone()),
                    tape.leaf(g.clone()),
                    tape.leaf(z.clone()),
                    tg,
                    false,
                )
                .unwrap();
            (losses.token_logits.value(), losses.mel_pred.value())
        };
        let (base_logits, base_mel) = run(&targets);
        for edit in 2..6 {
            let mut changed = targets.clone();
            changed.tokens[edit] = (changed.tokens[edit] + 1) % dec.cfg.vocab_size;
            let (logits, mel) = run(&changed);
            // Input at step s is target token s-1, so steps <= edit see no change.
            for s in 0..=edit {
                assert_eq!(base_logits.row(s), logits.row(s), "edit {edit} step {s}");
                assert_eq!(base_mel.row(s), mel.row(s), "edit {edit} step {s}");
            }
        }
    }

    #[test]
    fn condition_dropout_hides_gesture_and_style_exactly() {
        let (dec, ps) = toy_decoder(26);
        let (e, g, z) = toy_memory(27, 16);
        let targets = toy_targets(&dec, 28, 5);
        let run = |g: &DTensor, z: &DTensor, drop: bool| {
            let tape = Tape::new();
            let losses = dec
                .teacher_forced_masked(
                    &tape,
                    &ps,
                    tape.leaf(e.clone()),
                    tape.leaf(g.clone()),
                    tape.leaf(z.clone()),
                    &targets,
                    drop,
                )
                .unwrap();
            losses.token_logits.value()
        };
        let mut rng = Rng::new(29);
        let g2 = DTensor::randn(&[4, 16], 1.0, &mut rng);
        let z2 = DTensor::randn(&[5, 16], 1.0, &mut rng);
        // Dropout forced on: the conditioning memories are invisible.
        assert_eq!(run(&g, &z, true).data(), run(&g2, &z2, true).data());
        // Forced off: perturbing the gesture memory must change the output.
        assert_ne!(run(&g, &z, false).data(), run(&g2, &z, false).data());
    }

    #[test]
    fn teacher_forced_losses_pass_grad_check() {
        let mut ps = ParamStore::new();
        let mut rng = Rng::new(30);
        let cfg = DecoderConfig {
            layers: 1,
            width: 8,
            heads: 2,
            max_steps: 8,
            mel_dim: 3,
            vocab_size: 12,
            ..DecoderConfig::default()
        };
        let dec = Decoder::new("dec", cfg, &mut ps, &mut rng).unwrap();
        let g = DTensor::randn(&[2, 8], 0.5, &mut rng);
        let z = DTensor::randn(&[3, 8], 0.5, &mut rng);
        let targets = toy_targets(&dec, 31, 3);
        let e0 = DTensor::randn(&[2, 8], 0.5, &mut rng);
        let err = grad_check(
            |tape, x| {
                let losses = dec
                    .teacher_forced_masked(
                        tape,
                        &ps,
                        x,
                        tape.leaf(g.clone()),
                        tape.leaf(z.clone()),
                        &targets,
                        false,
                    )
                    .unwrap();
                losses.l_text.add(losses.l_mel)?.add(losses.l_dur)
            },
            &e0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "decoder grad check error {err}");
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let (dec, ps) = toy_decoder(32);
        let (e, g, z) = toy_memory(33, 16);
        let tape = Tape::new();
        let mut targets = toy_targets(&dec, 34, 5);
        targets.mel = DTensor::zeros(&[4, 6]);
        match dec.teacher_forced_masked(
            &tape,
            &ps,
            tape.leaf(e),
            tape.leaf(g),
            tape.leaf(z),
            &targets,
            false,
        ) {
            Err(CoreError::Contract(_)) => {}
            other => panic!("expected contract error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn soft_duration_tracks_hard_rule_for_confident_sequences() {
        let tape = Tape::new();
        let hop = 256.0 / 22050.0;
        for stop_at in 0..6 {
            let logits: Vec<f64> = (0..6)
                .map(|i| if i == stop_at { 40.0 } else { -40.0 })
                .collect();
            let v = tape.leaf(DTensor::from_vec(&[6, 1], logits.clone()).unwrap());
            let soft = soft_duration(v, hop).unwrap().item();
            let probs: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
            let (hard, _) = t_pred_from_stops(&probs, 0.5, hop);
            assert!((soft - hard).abs() < 1e-9, "stop {stop_at}: {soft} vs {hard}");
        }
    }
}
