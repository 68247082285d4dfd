//! Layer primitives, the named parameter store, Adam, and checkpoint I/O.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tape::{concat_cols, Tape, Var};
use crate::tensor::DTensor;

/// Handle to a named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of named parameters. Models hold `ParamId`s; the store owns
/// the tensors, which makes checkpointing and optimization uniform.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DTensor>,
    index: HashMap<String, usize>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"G2SK";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: DTensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(DTensor::numel).sum()
    }

    /// Little-endian binary checkpoint: magic "G2SK", format version, then
    /// (name length, name bytes, rank, dims, f64 payload) per parameter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > buf.len() {
                return Err(CoreError::Format("checkpoint truncated".into()));
            }
            let s = &buf[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 4)? != CHECKPOINT_MAGIC {
            return Err(CoreError::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut store = ParamStore::new();
        while cursor < buf.len() {
            let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
                .map_err(|_| CoreError::Format("non-utf8 parameter name".into()))?;
            let rank = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
            }
            store.register(name, DTensor::from_vec(&shape, data)?);
        }
        Ok(store)
    }

    /// Copy values from `other` into this store, matched by name.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.ids() {
            let name = self.names[id.0].clone();
            let src = other
                .lookup(&name)
                .ok_or_else(|| CoreError::Format(format!("checkpoint missing parameter {name}")))?;
            let value = other.get(src).clone();
            if value.shape() != self.get(id).shape() {
                return Err(CoreError::Format(format!(
                    "checkpoint shape mismatch for {name}"
                )));
            }
            *self.get_mut(id) = value;
        }
        Ok(())
    }
}

/// Affine map with weight [in x out] and bias [out].
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        ps: &mut ParamStore,
        rng: &mut Rng,
    ) -> Self {
        let scale = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = ps.register(
            format!("{name}.weight"),
            DTensor::randn(&[in_dim, out_dim], scale, rng),
        );
        let bias = ps.register(format!("{name}.bias"), DTensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, ps: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        x.matmul(w)?.add_row(b)
    }

    /// Overwrite with an exact identity map (requires in_dim == out_dim).
    pub fn set_identity(&self, ps: &mut ParamStore) {
        assert_eq!(self.in_dim, self.out_dim);
        *ps.get_mut(self.weight) = DTensor::eye(self.in_dim);
        *ps.get_mut(self.bias) = DTensor::zeros(&[self.out_dim]);
    }
}

/// Stack of linear layers with LeakyReLU between them (last layer linear).
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub layers: Vec<LinearLayer>,
    pub slope: f64,
}

impl FeedForward {
    /// `dims` lists layer widths including input and output, e.g.
    /// `[d, h, h, h, d]` builds a four-layer net.
    pub fn new(name: &str, dims: &[usize], slope: f64, ps: &mut ParamStore, rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(&format!("{name}.l{i}"), w[0], w[1], ps, rng))
            .collect();
        Self { layers, slope }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, ps: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, ps, h)?;
            if i != last {
                h = h.leaky_relu(self.slope);
            }
        }
        Ok(h)
    }
}

/// Learned per-feature gain/bias normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize, ps: &mut ParamStore) -> Self {
        Self {
            gamma: ps.register(format!("{name}.gamma"), DTensor::full(&[dim], 1.0)),
            beta: ps.register(format!("{name}.beta"), DTensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, ps: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        x.layer_norm(g, b, 1e-5)
    }
}

/// Multi-head scaled dot-product attention with query/key/value/output
/// projections.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        ps: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: LinearLayer::new(&format!("{name}.wq"), dim, dim, ps, rng),
            wk: LinearLayer::new(&format!("{name}.wk"), dim, dim, ps, rng),
            wv: LinearLayer::new(&format!("{name}.wv"), dim, dim, ps, rng),
            wo: LinearLayer::new(&format!("{name}.wo"), dim, dim, ps, rng),
            heads,
            dim,
        })
    }

    /// `mask`, when present, is added to the pre-softmax scores
    /// ([Nq x Nk], 0 for visible, large negative for hidden).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ps: &ParamStore,
        q_in: Var<'t>,
        kv_in: Var<'t>,
        mask: Option<&DTensor>,
    ) -> Result<Var<'t>> {
        let q = self.wq.forward(tape, ps, q_in)?;
        let k = self.wk.forward(tape, ps, kv_in)?;
        let v = self.wv.forward(tape, ps, kv_in)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);
            let mut scores = qh.matmul(kh.transpose())?.scale(scale);
            if let Some(m) = mask {
                let mv = tape.leaf(m.clone());
                scores = scores.add(mv)?;
            }
            let attn = scores.softmax_rows();
            head_outs.push(attn.matmul(vh)?);
        }
        let merged = concat_cols(tape, &head_outs)?;
        self.wo.forward(tape, ps, merged)
    }
}

/// Strictly-causal additive mask for self-attention over `n` steps.
pub fn causal_mask(n: usize) -> DTensor {
    let mut m = DTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.set(i, j, -1e30);
        }
    }
    m
}

/// Sinusoidal position encodings, [len x dim].
pub fn sinusoidal_positions(len: usize, dim: usize) -> DTensor {
    let mut p = DTensor::zeros(&[len, dim]);
    for t in 0..len {
        for j in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = t as f64 * rate;
            p.set(t, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    p
}

/// Adam with bias correction over all parameters of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<DTensor>,
    v: Vec<DTensor>,
}

impl Adam {
    pub fn new(ps: &ParamStore, lr: f64) -> Self {
        Self::with_betas(ps, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(ps: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<DTensor> = ps
            .ids()
            .map(|id| DTensor::zeros(ps.get(id).shape()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One Adam update from accumulated `(param, grad)` pairs. Parameters with
    /// no gradient entry are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[(ParamId, DTensor)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, grad) in grads {
            let param = ps.get_mut(*id);
            if param.shape() != grad.shape() {
                return Err(CoreError::Contract(format!(
                    "adam: grad shape {:?} vs param shape {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                param.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut rng = Rng::new(1);
        let mut ps = ParamStore::new();
        let layer = LinearLayer::new("l", 3, 2, &mut ps, &mut rng);
        let before = ps.get(layer.weight).clone();
        let mut adam = Adam::new(&ps, 0.1);
        let g = DTensor::zeros(&[3, 2]);
        adam.step(&mut ps, &[(layer.weight, g)]).unwrap();
        assert_eq!(ps.get(layer.weight), &before);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // Scalar param, g = 1: bias-corrected first step moves by ~lr.
        let mut ps = ParamStore::new();
        let id = ps.register("w", DTensor::scalar(1.0));
        let mut adam = Adam::new(&ps, 0.1);
        adam.step(&mut ps, &[(id, DTensor::scalar(1.0))]).unwrap();
        let moved = 1.0 - ps.get(id).item();
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
        assert_eq!(adam.timestep(), 1);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut ps = ParamStore::new();
        let id = ps.register("w", DTensor::zeros(&[2, 2]));
        let mut adam = Adam::new(&ps, 0.1);
        let r = adam.step(&mut ps, &[(id, DTensor::zeros(&[3]))]);
        assert!(matches!(r, Err(CoreError::Contract(_))));
    }

    #[test]
    fn adam_determinism() {
        let run = || {
            let mut rng = Rng::new(5);
            let mut ps = ParamStore::new();
            let id = ps.register("w", DTensor::randn(&[4], 1.0, &mut rng));
            let mut adam = Adam::new(&ps, 0.05);
            for step in 0..10 {
                let g = DTensor::randn(&[4], 1.0, &mut rng.derive(step));
                adam.step(&mut ps, &[(id, g)]).unwrap();
            }
            ps.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = Rng::new(2);
        let mut ps = ParamStore::new();
        ps.register("a.weight", DTensor::randn(&[3, 4], 1.0, &mut rng));
        ps.register("b", DTensor::randn(&[7], 1.0, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.g2sk");
        ps.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        let a = loaded.lookup("a.weight").unwrap();
        assert_eq!(loaded.get(a), ps.get(ps.lookup("a.weight").unwrap()));

        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[0..4], b"G2SK");
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.g2sk");
        std::fs::write(&path, b"NOPE1234").unwrap();
        assert!(matches!(
            ParamStore::load(&path),
            Err(CoreError::Format(_))
        ));
    }

    #[test]
    fn attention_single_key_passes_value_projection() {
        let mut rng = Rng::new(3);
        let mut ps = ParamStore::new();
        let attn = AttentionBlock::new("a", 8, 2, &mut ps, &mut rng).unwrap();
        let tape = Tape::new();
        let q = tape.leaf(DTensor::randn(&[5, 8], 1.0, &mut rng));
        let kv = tape.leaf(DTensor::randn(&[1, 8], 1.0, &mut rng));
        let out = attn.forward(&tape, &ps, q, kv, None).unwrap().value();
        // One key: attention weights are 1 regardless of the query, so every
        // output row is Wo(Wv(key_row)).
        let vv = attn.wv.forward(&tape, &ps, kv).unwrap();
        let expected = attn.wo.forward(&tape, &ps, vv).unwrap().value();
        for i in 0..5 {
            for j in 0..8 {
                assert!((out.at(i, j) - expected.at(0, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_uniform_logits_average_values() {
        // Zeroed key projection makes every score equal, so the attention
        // weights are uniform and the output is the mean over value rows.
        let mut rng = Rng::new(4);
        let mut ps = ParamStore::new();
        let attn = AttentionBlock::new("a", 8, 2, &mut ps, &mut rng).unwrap();
        attn.wv.set_identity(&mut ps);
        attn.wo.set_identity(&mut ps);
        *ps.get_mut(attn.wk.weight) = DTensor::zeros(&[8, 8]);
        *ps.get_mut(attn.wk.bias) = DTensor::zeros(&[8]);
        let tape = Tape::new();
        let kv_val = DTensor::randn(&[4, 8], 1.0, &mut rng);
        let kv = tape.leaf(kv_val.clone());
        let q = tape.leaf(DTensor::randn(&[3, 8], 1.0, &mut rng));
        let out = attn.forward(&tape, &ps, q, kv, None).unwrap().value();
        for j in 0..8 {
            let mean: f64 = (0..4).map(|i| kv_val.at(i, j)).sum::<f64>() / 4.0;
            for i in 0..3 {
                assert!((out.at(i, j) - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_shape_contract_and_head_check() {
        let mut rng = Rng::new(6);
        let mut ps = ParamStore::new();
        let attn = AttentionBlock::new("a", 64, 4, &mut ps, &mut rng).unwrap();
        let tape = Tape::new();
        let q = tape.leaf(DTensor::randn(&[5, 64], 1.0, &mut rng));
        let kv = tape.leaf(DTensor::randn(&[9, 64], 1.0, &mut rng));
        let out = attn.forward(&tape, &ps, q, kv, None).unwrap();
        assert_eq!(out.shape(), vec![5, 64]);

        let mut ps2 = ParamStore::new();
        assert!(matches!(
            AttentionBlock::new("b", 10, 4, &mut ps2, &mut rng),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn attention_grad_check() {
        let mut rng = Rng::new(7);
        let mut ps = ParamStore::new();
        let attn = AttentionBlock::new("a", 8, 2, &mut ps, &mut rng).unwrap();
        let x = DTensor::randn(&[4, 8], 1.0, &mut rng);
        let kv_fixed = DTensor::randn(&[6, 8], 1.0, &mut rng);
        let err = grad_check(
            |t, xv| {
                let kv = t.leaf(kv_fixed.clone());
                Ok(attn.forward(t, &ps, xv, kv, None)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn feedforward_grad_check() {
        let mut rng = Rng::new(8);
        let mut ps = ParamStore::new();
        let ff = FeedForward::new("f", &[6, 12, 12, 12, 6], 0.01, &mut ps, &mut rng);
        let mut x = DTensor::randn(&[3, 6], 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.01;
            }
        }
        let err = grad_check(|t, xv| Ok(ff.forward(t, &ps, xv)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
