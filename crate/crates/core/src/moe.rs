//! Sparse top-k Mixture-of-Experts layers with randomized fallback, capacity
//! constraints, and a two-level hierarchical variant.
//!
//! The layer computes `y = sum_i g_i(x) E_i(x)` per token over the selected
//! expert set, with gate weights renormalized to sum to 1. Routing decisions
//! are made on concrete values; the weights that reach the output are
//! recomputed on the tape (softmax over selected logits) so gradients flow to
//! the gate.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{FeedForward, LinearLayer, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

/// Routing configuration for one MoE layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoEConfig {
    /// Number of experts K.
    pub num_experts: usize,
    /// Experts activated per token.
    pub top_k: usize,
    /// Layers per expert feedforward stack.
    pub expert_layers: usize,
    /// Expert hidden width; 0 means 4*d.
    pub hidden_dim: usize,
    /// Per-expert capacity = ceil(capacity_factor * T * top_k / K).
    /// `f64::INFINITY` disables dropping.
    pub capacity_factor: f64,
    /// Probability (during training) that the final slot is sampled from the
    /// remaining experts proportionally to gate mass.
    pub fallback_prob: f64,
    /// Load-balance auxiliary loss weight.
    pub lb_weight: f64,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            top_k: 2,
            expert_layers: 4,
            hidden_dim: 0,
            capacity_factor: 1.25,
            fallback_prob: 0.5,
            lb_weight: 0.01,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(CoreError::Config(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if self.capacity_factor <= 0.0 {
            return Err(CoreError::Config("capacity_factor must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fallback_prob) {
            return Err(CoreError::Config("fallback_prob outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Routing decision for one token.
#[derive(Debug, Clone, Serialize)]
pub struct TokenRoute {
    pub token_idx: usize,
    pub experts: Vec<usize>,
    /// Renormalized over the selected set (pre-drop).
    pub weights: Vec<f64>,
    pub dropped: Vec<bool>,
}

impl TokenRoute {
    pub fn surviving(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.experts
            .iter()
            .zip(&self.weights)
            .zip(&self.dropped)
            .filter(|(_, &d)| !d)
            .map(|((&e, &w), _)| (e, w))
    }
}

/// Observability record for one routed batch.
#[derive(Debug, Clone, Serialize)]
pub struct RoutingTrace {
    pub num_experts: usize,
    pub top_k: usize,
    pub tokens: Vec<TokenRoute>,
    /// Surviving assignments per expert.
    pub load: Vec<usize>,
    /// Assignments dropped by the capacity constraint.
    pub dropped_assignments: usize,
}

impl RoutingTrace {
    /// One JSON object per token, for the routing-audit workflow.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(&serde_json::to_string(tok).expect("trace json"));
            out.push('\n');
        }
        out
    }
}

/// Per-expert utilization summary.
#[derive(Debug, Clone, Serialize)]
pub struct LoadStats {
    pub counts: Vec<usize>,
    pub dropped: usize,
    /// Coefficient of variation (population std / mean) of the counts.
    pub cv: f64,
}

/// Utilization histogram and coefficient of variation from a trace.
pub fn load_balance_stats(trace: &RoutingTrace) -> LoadStats {
    if trace.tokens.is_empty() {
        return LoadStats {
            counts: Vec::new(),
            dropped: trace.dropped_assignments,
            cv: 0.0,
        };
    }
    let counts = trace.load.clone();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let cv = if mean > 0.0 {
        let var = counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        var.sqrt() / mean
    } else {
        0.0
    };
    LoadStats {
        counts,
        dropped: trace.dropped_assignments,
        cv,
    }
}

/// One expert: a feedforward stack, or an exact identity map (used by
/// convexity tests and degenerate configurations).
#[derive(Debug, Clone)]
pub enum ExpertNet {
    Identity,
    Ffn(FeedForward),
}

impl ExpertNet {
    pub fn forward<'t>(&self, tape: &'t Tape, ps: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            ExpertNet::Identity => Ok(x),
            ExpertNet::Ffn(ff) => ff.forward(tape, ps, x),
        }
    }
}

/// Gated expert network over width-d tokens.
#[derive(Debug, Clone)]
pub struct MoELayer {
    pub config: MoEConfig,
    pub dim: usize,
    pub gate: LinearLayer,
    pub experts: Vec<ExpertNet>,
}

impl MoELayer {
    pub fn new(
        name: &str,
        dim: usize,
        config: MoEConfig,
        ps: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let gate = LinearLayer::new(&format!("{name}.gate"), dim, config.num_experts, ps, rng);
        let hidden = if config.hidden_dim == 0 {
            4 * dim
        } else {
            config.hidden_dim
        };
        let mut dims = vec![dim];
        for _ in 0..config.expert_layers.saturating_sub(1) {
            dims.push(hidden);
        }
        dims.push(dim);
        let experts = (0..config.num_experts)
            .map(|i| {
                ExpertNet::Ffn(FeedForward::new(
                    &format!("{name}.expert{i}"),
                    &dims,
                    0.01,
                    ps,
                    rng,
                ))
            })
            .collect();
        Ok(Self {
            config,
            dim,
            gate,
            experts,
        })
    }

    /// Same gate, but every expert is an exact identity map.
    pub fn with_identity_experts(
        name: &str,
        dim: usize,
        config: MoEConfig,
        ps: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let gate = LinearLayer::new(&format!("{name}.gate"), dim, config.num_experts, ps, rng);
        let experts = (0..config.num_experts).map(|_| ExpertNet::Identity).collect();
        Ok(Self {
            config,
            dim,
            gate,
            experts,
        })
    }

    pub(crate) fn gate_logits(&self, ps: &ParamStore, x: &DTensor) -> Result<DTensor> {
        let w = ps.get(self.gate.weight);
        let b = ps.get(self.gate.bias);
        let mut y = x.matmul(w)?;
        let k = y.cols();
        for i in 0..y.rows() {
            for j in 0..k {
                let v = y.at(i, j) + b.data()[j];
                y.set(i, j, v);
            }
        }
        Ok(y)
    }

    /// Route a batch of tokens without running experts.
    pub fn gate_route(
        &self,
        ps: &ParamStore,
        x: &DTensor,
        rng: &Rng,
        training: bool,
    ) -> Result<RoutingTrace> {
        if !x.is_finite() {
            return Err(CoreError::Input("gate_route: non-finite input".into()));
        }
        let logits = self.gate_logits(ps, x)?;
        route_from_logits(&logits, &self.config, rng, training)
    }

    /// Full sparse forward: output, routing trace, load-balance aux loss.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        x: Var<'t>,
        rng: &Rng,
        training: bool,
    ) -> Result<(Var<'t>, RoutingTrace, Var<'t>)> {
        let gate_w = tape.param(ps, self.gate.weight);
        let gate_b = tape.param(ps, self.gate.bias);
        let logits = x.matmul(gate_w)?.add_row(gate_b)?;
        let logits_val = logits.value();
        let trace = route_from_logits(&logits_val, &self.config, rng, training)?;
        let t_tokens = logits_val.rows();
        let k = self.config.num_experts;

        // Differentiable renormalized weights: softmax over surviving selected
        // logits (masked softmax). Fully-dropped tokens keep their original
        // selection in the mask so the row stays well-defined; the weights are
        // unused for them.
        let mut mask = DTensor::full(&[t_tokens, k], -1e30);
        for tok in &trace.tokens {
            let any_survives = tok.dropped.iter().any(|&d| !d);
            for (slot, &e) in tok.experts.iter().enumerate() {
                if !any_survives || !tok.dropped[slot] {
                    mask.set(tok.token_idx, e, 0.0);
                }
            }
        }
        let weights = logits.add(tape.leaf(mask))?.softmax_rows();

        // Dispatch: group surviving assignments by expert.
        let mut y: Option<Var<'t>> = None;
        for e in 0..k {
            let toks: Vec<usize> = trace
                .tokens
                .iter()
                .filter(|tok| tok.surviving().any(|(ex, _)| ex == e))
                .map(|tok| tok.token_idx)
                .collect();
            if toks.is_empty() {
                continue;
            }
            let xg = x.gather_rows(&toks);
            let out = self.experts[e].forward(tape, ps, xg)?;
            let wcol = weights.slice_cols(e, e + 1).gather_rows(&toks);
            let weighted = out.mul_col(wcol)?;
            let scattered = weighted.scatter_rows(&toks, t_tokens);
            y = Some(match y {
                Some(acc) => acc.add(scattered)?,
                None => scattered,
            });
        }
        // Residual passthrough for tokens whose every selection was dropped.
        let orphans: Vec<usize> = trace
            .tokens
            .iter()
            .filter(|tok| tok.dropped.iter().all(|&d| d))
            .map(|tok| tok.token_idx)
            .collect();
        if !orphans.is_empty() {
            let pass = x.gather_rows(&orphans).scatter_rows(&orphans, t_tokens);
            y = Some(match y {
                Some(acc) => acc.add(pass)?,
                None => pass,
            });
        }
        let y = match y {
            Some(v) => v,
            None => x.scale(0.0),
        };

        let aux = self.aux_loss(tape, &logits, &trace)?;
        Ok((y, trace, aux))
    }

    /// Switch-style load balance loss: lb_weight * K * sum_i f_i * P_i with
    /// f_i the (stop-gradient) fraction of pre-drop assignments to expert i
    /// and P_i the mean gate probability.
    fn aux_loss<'t>(
        &self,
        _tape: &'t Tape,
        logits: &Var<'t>,
        trace: &RoutingTrace,
    ) -> Result<Var<'t>> {
        let k = self.config.num_experts;
        let mut assign = vec![0.0f64; k];
        let mut total = 0.0;
        for tok in &trace.tokens {
            for &e in &tok.experts {
                assign[e] += 1.0;
                total += 1.0;
            }
        }
        if total > 0.0 {
            for a in &mut assign {
                *a /= total;
            }
        }
        let probs_mean = logits.softmax_rows().mean_rows();
        let coeffs: Vec<f64> = assign
            .iter()
            .map(|&f| f * self.config.lb_weight * k as f64)
            .collect();
        probs_mean.dot_const(&coeffs)
    }
}

fn route_from_logits(
    logits: &DTensor,
    cfg: &MoEConfig,
    rng: &Rng,
    training: bool,
) -> Result<RoutingTrace> {
    cfg.validate()?;
    let (t_tokens, k) = (logits.rows(), logits.cols());
    if k != cfg.num_experts {
        return Err(CoreError::Config(format!(
            "gate width {k} vs num_experts {}",
            cfg.num_experts
        )));
    }
    let capacity = if cfg.capacity_factor.is_finite() {
        ((cfg.capacity_factor * t_tokens as f64 * cfg.top_k as f64 / k as f64).ceil()) as usize
    } else {
        usize::MAX
    };

    let mut tokens = Vec::with_capacity(t_tokens);
    let mut load = vec![0usize; k];
    let mut dropped_assignments = 0usize;
    for t in 0..t_tokens {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / z).collect();

        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let mut selected: Vec<usize> = order[..cfg.top_k - 1].to_vec();
        let mut token_rng = rng.derive(t as u64);
        let final_slot = if training
            && cfg.top_k < k
            && cfg.fallback_prob > 0.0
            && token_rng.uniform() < cfg.fallback_prob
        {
            // Randomized fallback: sample the last slot from the remaining
            // experts proportionally to gate mass.
            let remaining: Vec<usize> = order[cfg.top_k - 1..].to_vec();
            let mass: Vec<f64> = remaining.iter().map(|&e| probs[e]).collect();
            remaining[token_rng.weighted(&mass)]
        } else {
            order[cfg.top_k - 1]
        };
        selected.push(final_slot);

        let sel_mass: f64 = selected.iter().map(|&e| probs[e]).sum();
        let weights: Vec<f64> = selected.iter().map(|&e| probs[e] / sel_mass).collect();

        let mut dropped = vec![false; selected.len()];
        for (slot, &e) in selected.iter().enumerate() {
            if load[e] >= capacity {
                dropped[slot] = true;
                dropped_assignments += 1;
            } else {
                load[e] += 1;
            }
        }

        tokens.push(TokenRoute {
            token_idx: t,
            experts: selected,
            weights,
            dropped,
        });
    }
    Ok(RoutingTrace {
        num_experts: k,
        top_k: cfg.top_k,
        tokens,
        load,
        dropped_assignments,
    })
}

/// Two-level MoE: an outer gate over expert groups, each group an inner
/// [`MoELayer`].
#[derive(Debug, Clone)]
pub struct HierarchicalMoE {
    pub outer_gate: LinearLayer,
    pub groups: Vec<MoELayer>,
    pub outer_top_k: usize,
    pub lb_weight: f64,
    pub dim: usize,
}

/// Nested routing record for the hierarchical layer.
#[derive(Debug, Clone, Serialize)]
pub struct HmoeTrace {
    pub outer: RoutingTrace,
    /// Inner traces per group; `token_ids[i]` maps inner token indices back to
    /// the original token positions.
    pub inner: Vec<RoutingTrace>,
    pub inner_token_ids: Vec<Vec<usize>>,
}

impl HierarchicalMoE {
    /// `(groups, experts_per_group)` defaults to (4, 4).
    pub fn new(
        name: &str,
        dim: usize,
        groups: usize,
        experts_per_group: usize,
        inner: MoEConfig,
        ps: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut inner_cfg = inner;
        inner_cfg.num_experts = experts_per_group;
        inner_cfg.top_k = inner_cfg.top_k.min(experts_per_group);
        let outer_gate = LinearLayer::new(&format!("{name}.outer_gate"), dim, groups, ps, rng);
        let layers = (0..groups)
            .map(|g| MoELayer::new(&format!("{name}.group{g}"), dim, inner_cfg.clone(), ps, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            outer_gate,
            groups: layers,
            outer_top_k: 2.min(groups),
            lb_weight: inner_cfg.lb_weight,
            dim,
        })
    }

    pub fn with_identity_experts(
        name: &str,
        dim: usize,
        groups: usize,
        experts_per_group: usize,
        inner: MoEConfig,
        ps: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut inner_cfg = inner;
        inner_cfg.num_experts = experts_per_group;
        inner_cfg.top_k = inner_cfg.top_k.min(experts_per_group);
        let outer_gate = LinearLayer::new(&format!("{name}.outer_gate"), dim, groups, ps, rng);
        let layers = (0..groups)
            .map(|g| {
                MoELayer::with_identity_experts(
                    &format!("{name}.group{g}"),
                    dim,
                    inner_cfg.clone(),
                    ps,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            outer_gate,
            groups: layers,
            outer_top_k: 2.min(groups),
            lb_weight: inner_cfg.lb_weight,
            dim,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        x: Var<'t>,
        rng: &Rng,
        training: bool,
    ) -> Result<(Var<'t>, HmoeTrace, Var<'t>)> {
        let g_out = self.groups.len();
        let outer_cfg = MoEConfig {
            num_experts: g_out,
            top_k: self.outer_top_k,
            capacity_factor: f64::INFINITY,
            fallback_prob: 0.0,
            lb_weight: self.lb_weight,
            ..MoEConfig::default()
        };
        let w = tape.param(ps, self.outer_gate.weight);
        let b = tape.param(ps, self.outer_gate.bias);
        let logits = x.matmul(w)?.add_row(b)?;
        let logits_val = logits.value();
        let outer_trace = route_from_logits(&logits_val, &outer_cfg, rng, false)?;
        let t_tokens = logits_val.rows();

        let mut mask = DTensor::full(&[t_tokens, g_out], -1e30);
        for tok in &outer_trace.tokens {
            for &g in &tok.experts {
                mask.set(tok.token_idx, g, 0.0);
            }
        }
        let outer_weights = logits.add(tape.leaf(mask))?.softmax_rows();

        let mut y: Option<Var<'t>> = None;
        let mut inner_traces = Vec::with_capacity(g_out);
        let mut inner_token_ids = Vec::with_capacity(g_out);
        let mut aux = {
            let mut assign = vec![0.0f64; g_out];
            let mut total = 0.0f64;
            for tok in &outer_trace.tokens {
                for &g in &tok.experts {
                    assign[g] += 1.0;
                    total += 1.0;
                }
            }
            let coeffs: Vec<f64> = assign
                .iter()
                .map(|&f| f / total.max(1.0) * self.lb_weight * g_out as f64)
                .collect();
            logits.softmax_rows().mean_rows().dot_const(&coeffs)?
        };
        for (g, group) in self.groups.iter().enumerate() {
            let toks: Vec<usize> = outer_trace
                .tokens
                .iter()
                .filter(|tok| tok.experts.contains(&g))
                .map(|tok| tok.token_idx)
                .collect();
            if toks.is_empty() {
                inner_traces.push(RoutingTrace {
                    num_experts: group.config.num_experts,
                    top_k: group.config.top_k,
                    tokens: Vec::new(),
                    load: vec![0; group.config.num_experts],
                    dropped_assignments: 0,
                });
                inner_token_ids.push(Vec::new());
                continue;
            }
            let xg = x.gather_rows(&toks);
            let (out, trace, inner_aux) =
                group.forward(tape, ps, xg, &rng.derive(1000 + g as u64), training)?;
            let wcol = outer_weights.slice_cols(g, g + 1).gather_rows(&toks);
            let weighted = out.mul_col(wcol)?;
            let scattered = weighted.scatter_rows(&toks, t_tokens);
            y = Some(match y {
                Some(acc) => acc.add(scattered)?,
                None => scattered,
            });
            aux = aux.add(inner_aux)?;
            inner_traces.push(trace);
            inner_token_ids.push(toks);
        }
        let y = y.expect("at least one group receives tokens");
        Ok((
            y,
            HmoeTrace {
                outer: outer_trace,
                inner: inner_traces,
                inner_token_ids,
            },
            aux,
        ))
    }
}
