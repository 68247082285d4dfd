//! Reverse-mode differentiation on an eager tape.
//!
//! Operations execute immediately and record a backward closure. Values are
//! inspectable during tracing, so data-dependent control flow (expert routing,
//! stop decisions) works naturally. A tape is confined to one thread; parallel
//! batch evaluation uses one tape per sample and reduces gradients in a fixed
//! order.

use std::cell::RefCell;

use crate::error::{CoreError, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::DTensor;

type BackFn = Box<dyn Fn(&DTensor) -> Vec<DTensor>>;

struct Node {
    value: DTensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    param: Option<ParamId>,
}

/// Records a computation graph; acyclic by construction (nodes only reference
/// earlier nodes).
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DTensor, parents: Vec<usize>, backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            param: None,
        });
        Var { tape: self, idx }
    }

    /// Input node; gradient is tracked but not tied to any parameter.
    pub fn leaf(&self, value: DTensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Bind a stored parameter as a leaf; its gradient is retrievable by id.
    pub fn param<'t>(&'t self, store: &ParamStore, id: ParamId) -> Var<'t> {
        let v = self.leaf(store.get(id).clone());
        self.nodes.borrow_mut()[v.idx].param = Some(id);
        v
    }

    pub fn value(&self, v: Var<'_>) -> DTensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    /// Run reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.idx].value.numel() != 1 {
            return Err(CoreError::Contract(
                "backward root must be scalar-valued".into(),
            ));
        }
        let mut grads: Vec<Option<DTensor>> = vec![None; nodes.len()];
        grads[root.idx] = Some(DTensor::scalar(1.0));
        for i in (0..=root.idx).rev() {
            let Some(gout) = grads[i].clone() else {
                continue;
            };
            let node = &nodes[i];
            let Some(back) = &node.backward else {
                continue;
            };
            let parent_grads = back(&gout);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => acc.add_scaled(&pg, 1.0),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Collect parameter gradients by id, summing duplicate bindings.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, DTensor)> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<(ParamId, DTensor)> = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            if let Some((_, acc)) = out.iter_mut().find(|(pid, _)| *pid == id) {
                acc.add_scaled(g, 1.0);
            } else {
                out.push((id, g.clone()));
            }
        }
        out
    }
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<DTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&DTensor> {
        self.grads[v.idx].as_ref()
    }

    /// Gradient w.r.t. `v`, zeros when the root does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var<'_>) -> DTensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DTensor::zeros(tape.value(v).shape()))
    }
}

fn softmax_rows_value(x: &DTensor) -> DTensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> DTensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let y = a.matmul(&b)?;
        Ok(self.tape.push(
            y,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                let da = g.matmul(&b.transpose()).expect("matmul back a");
                let db = a.transpose().matmul(g).expect("matmul back b");
                vec![da, db]
            })),
        ))
    }

    pub fn transpose(self) -> Var<'t> {
        let y = self.value().transpose();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| vec![g.transpose()])),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let old_shape = x.shape().to_vec();
        let y = x.reshape(shape)?;
        Ok(self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![g.reshape(&old_shape).expect("reshape back")]
            })),
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let y = self.value().add(&rhs.value())?;
        Ok(self.tape.push(
            y,
            vec![self.idx, rhs.idx],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let y = self.value().zip(&rhs.value(), |a, b| a - b)?;
        Ok(self.tape.push(
            y,
            vec![self.idx, rhs.idx],
            Some(Box::new(|g| vec![g.clone(), g.scale(-1.0)])),
        ))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let y = a.zip(&b, |x, y| x * y)?;
        Ok(self.tape.push(
            y,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                vec![
                    g.zip(&b, |gg, bb| gg * bb).expect("mul back"),
                    g.zip(&a, |gg, aa| gg * aa).expect("mul back"),
                ]
            })),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().scale(c);
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| vec![g.scale(c)])),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let y = self.value().map(|v| v + c);
        self.tape
            .push(y, vec![self.idx], Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Add a bias vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let (m, n) = (x.rows(), x.cols());
        if b.numel() != n {
            return Err(CoreError::Shape(format!(
                "add_row: bias len {} vs row width {n}",
                b.numel()
            )));
        }
        let b_shape = b.shape().to_vec();
        let mut y = x.clone();
        for i in 0..m {
            for j in 0..n {
                y.data_mut()[i * n + j] += b.data()[j];
            }
        }
        Ok(self.tape.push(
            y,
            vec![self.idx, bias.idx],
            Some(Box::new(move |g| {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.data()[i * n + j];
                    }
                }
                vec![
                    g.clone(),
                    DTensor::from_vec(&b_shape, db).expect("add_row back"),
                ]
            })),
        ))
    }

    /// Multiply each row i by the scalar in `col` row i (col shape [m x 1] or [m]).
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let c = col.value();
        let (m, n) = (x.rows(), x.cols());
        if c.numel() != m {
            return Err(CoreError::Shape(format!(
                "mul_col: col len {} vs rows {m}",
                c.numel()
            )));
        }
        let c_shape = c.shape().to_vec();
        let mut y = x.clone();
        for i in 0..m {
            let s = c.data()[i];
            for v in &mut y.data_mut()[i * n..(i + 1) * n] {
                *v *= s;
            }
        }
        let xc = x;
        let cc = c;
        Ok(self.tape.push(
            y,
            vec![self.idx, col.idx],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    let s = cc.data()[i];
                    for j in 0..n {
                        dc[i] += g.data()[i * n + j] * xc.data()[i * n + j];
                        dx.data_mut()[i * n + j] *= s;
                    }
                }
                vec![dx, DTensor::from_vec(&c_shape, dc).expect("mul_col back")]
            })),
        ))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.value();
        let y = x.map(|v| if v >= 0.0 { v } else { slope * v });
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![g
                    .zip(&x, |gg, xv| if xv >= 0.0 { gg } else { slope * gg })
                    .expect("leaky_relu back")]
            })),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = y.clone();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![g
                    .zip(&yc, |gg, s| gg * s * (1.0 - s))
                    .expect("sigmoid back")]
            })),
        )
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let y = x.map(f64::abs);
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![g
                    .zip(&x, |gg, xv| if xv >= 0.0 { gg } else { -gg })
                    .expect("abs back")]
            })),
        )
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(self) -> Var<'t> {
        let y = softmax_rows_value(&self.value());
        let yc = y.clone();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let (m, n) = (yc.rows(), yc.cols());
                let mut dx = DTensor::zeros(yc.shape());
                for i in 0..m {
                    let dot: f64 = (0..n)
                        .map(|j| g.data()[i * n + j] * yc.data()[i * n + j])
                        .sum();
                    for j in 0..n {
                        dx.data_mut()[i * n + j] =
                            yc.data()[i * n + j] * (g.data()[i * n + j] - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let ga = gamma.value();
        let (m, n) = (x.rows(), x.cols());
        if ga.numel() != n || beta.value().numel() != n {
            return Err(CoreError::Shape("layer_norm: gain/bias width".into()));
        }
        let mut xhat = DTensor::zeros(x.shape());
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                xhat.data_mut()[i * n + j] = (row[j] - mu) * istd;
            }
        }
        let mut y = DTensor::zeros(x.shape());
        let beta_v = beta.value();
        for i in 0..m {
            for j in 0..n {
                y.data_mut()[i * n + j] = xhat.at(i, j) * ga.data()[j] + beta_v.data()[j];
            }
        }
        let ga_shape = ga.shape().to_vec();
        let beta_shape = beta_v.shape().to_vec();
        Ok(self.tape.push(
            y,
            vec![self.idx, gamma.idx, beta.idx],
            Some(Box::new(move |g| {
                let mut dx = DTensor::zeros(xhat.shape());
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xhat = 0.0;
                    for j in 0..n {
                        let dh = g.data()[i * n + j] * ga.data()[j];
                        sum_dh += dh;
                        sum_dh_xhat += dh * xhat.at(i, j);
                        dgamma[j] += g.data()[i * n + j] * xhat.at(i, j);
                        dbeta[j] += g.data()[i * n + j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dh = g.data()[i * n + j] * ga.data()[j];
                        dx.data_mut()[i * n + j] = inv_std[i]
                            * (dh - sum_dh / nf - xhat.at(i, j) * sum_dh_xhat / nf);
                    }
                }
                vec![
                    dx,
                    DTensor::from_vec(&ga_shape, dgamma).expect("ln back"),
                    DTensor::from_vec(&beta_shape, dbeta).expect("ln back"),
                ]
            })),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = DTensor::scalar(x.data().iter().sum());
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![DTensor::full(&shape, g.item())]
            })),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over rows -> [1 x d].
    pub fn mean_rows(self) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut y = DTensor::zeros(&[1, n]);
        for i in 0..m {
            for j in 0..n {
                y.data_mut()[j] += x.at(i, j) / m as f64;
            }
        }
        let shape = x.shape().to_vec();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut dx = DTensor::zeros(&shape);
                for i in 0..m {
                    for j in 0..n {
                        dx.data_mut()[i * n + j] = g.data()[j] / m as f64;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Mean over rows with each column summed in value-sorted order, so the
    /// result is bit-identical under any row permutation of the input.
    /// Backward is the same uniform 1/m broadcast as [`Var::mean_rows`].
    pub fn mean_rows_stable(self) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut y = DTensor::zeros(&[1, n]);
        let mut col = vec![0.0f64; m];
        for j in 0..n {
            for i in 0..m {
                col[i] = x.at(i, j);
            }
            col.sort_by(f64::total_cmp);
            y.data_mut()[j] = col.iter().sum::<f64>() / m as f64;
        }
        let shape = x.shape().to_vec();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut dx = DTensor::zeros(&shape);
                for i in 0..m {
                    for j in 0..n {
                        dx.data_mut()[i * n + j] = g.data()[j] / m as f64;
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        let y = DTensor::from_vec(&[end - start, n], x.data()[start * n..end * n].to_vec())
            .expect("slice_rows");
        let shape = x.shape().to_vec();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut dx = DTensor::zeros(&shape);
                dx.data_mut()[start * n..end * n].copy_from_slice(g.data());
                vec![dx]
            })),
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let w = end - start;
        let mut y = DTensor::zeros(&[m, w]);
        for i in 0..m {
            for j in 0..w {
                y.data_mut()[i * w + j] = x.at(i, start + j);
            }
        }
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut dx = DTensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..w {
                        dx.data_mut()[i * n + start + j] = g.data()[i * w + j];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Select rows by index (duplicates allowed; backward scatter-adds).
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        let m = x.rows();
        let idx: Vec<usize> = indices.to_vec();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(x.row(i));
        }
        let y = DTensor::from_vec(&[idx.len(), n], data).expect("gather_rows");
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut dx = DTensor::zeros(&[m, n]);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx.data_mut()[i * n + j] += g.data()[k * n + j];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Place row k of `self` at destination row `indices[k]` of a new
    /// [total_rows x d] tensor; colliding rows add.
    pub fn scatter_rows(self, indices: &[usize], total_rows: usize) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        let idx: Vec<usize> = indices.to_vec();
        let mut y = DTensor::zeros(&[total_rows, n]);
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..n {
                y.data_mut()[i * n + j] += x.at(k, j);
            }
        }
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut dx = DTensor::zeros(&[idx.len(), n]);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx.data_mut()[k * n + j] = g.data()[i * n + j];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Weighted sum with constant weights: y = sum_i w_i * x_i (flat).
    pub fn dot_const(self, weights: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        if x.numel() != weights.len() {
            return Err(CoreError::Shape("dot_const: length mismatch".into()));
        }
        let w: Vec<f64> = weights.to_vec();
        let shape = x.shape().to_vec();
        let y = DTensor::scalar(x.data().iter().zip(&w).map(|(a, b)| a * b).sum());
        Ok(self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let s = g.item();
                vec![DTensor::from_vec(&shape, w.iter().map(|&wi| wi * s).collect())
                    .expect("dot_const back")]
            })),
        ))
    }

    /// Exclusive cumulative product along the flat data: y_i = prod_{j<i} x_j.
    /// Entries must be nonzero (true for sigmoid complements).
    pub fn cumprod_exclusive(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let shape = x.shape().to_vec();
        let mut y = vec![1.0; n];
        for i in 1..n {
            y[i] = y[i - 1] * x.data()[i - 1];
        }
        let yv = DTensor::from_vec(&shape, y.clone()).expect("cumprod");
        let xc = x;
        self.tape.push(
            yv,
            vec![self.idx],
            Some(Box::new(move |g| {
                // dL/dx_j = sum_{i>j} g_i y_i / x_j  (suffix sums)
                let mut dx = vec![0.0; n];
                let mut suffix = 0.0;
                for j in (0..n).rev() {
                    if j + 1 < n {
                        suffix += g.data()[j + 1] * y[j + 1];
                    }
                    let xj = xc.data()[j];
                    dx[j] = if xj.abs() > 1e-300 { suffix / xj } else { 0.0 };
                }
                vec![DTensor::from_vec(&shape, dx).expect("cumprod back")]
            })),
        )
    }

    /// Mean negative log-likelihood of target classes under row softmax.
    pub fn gather_nll(self, targets: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        if targets.len() != m {
            return Err(CoreError::Contract(format!(
                "gather_nll: {m} logit rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(CoreError::Contract(format!(
                "gather_nll: target {bad} out of vocab {n}"
            )));
        }
        let probs = softmax_rows_value(&x);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= probs.at(i, t).max(1e-300).ln();
        }
        loss /= m as f64;
        let tg: Vec<usize> = targets.to_vec();
        Ok(self.tape.push(
            DTensor::scalar(loss),
            vec![self.idx],
            Some(Box::new(move |g| {
                let s = g.item() / m as f64;
                let mut dx = probs.scale(s);
                for (i, &t) in tg.iter().enumerate() {
                    let v = dx.at(i, t);
                    dx.set(i, t, v - s);
                }
                vec![dx]
            })),
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(self, targets: &DTensor) -> Result<Var<'t>> {
        let z = self.value();
        if z.numel() != targets.numel() {
            return Err(CoreError::Contract("bce: length mismatch".into()));
        }
        let n = z.numel() as f64;
        let mut loss = 0.0;
        for (&zi, &ti) in z.data().iter().zip(targets.data()) {
            // log(1 + exp(-|z|)) + max(z,0) - z*t, stable form
            loss += zi.max(0.0) - zi * ti + (1.0 + (-zi.abs()).exp()).ln();
        }
        loss /= n;
        let tg = targets.clone();
        let zc = z;
        Ok(self.tape.push(
            DTensor::scalar(loss),
            vec![self.idx],
            Some(Box::new(move |g| {
                let s = g.item() / n;
                vec![zc
                    .zip(&tg, |zi, ti| s * (1.0 / (1.0 + (-zi).exp()) - ti))
                    .expect("bce back")]
            })),
        ))
    }
}

/// Stack a list of matrices along the row axis.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    assert!(!parts.is_empty());
    let values: Vec<DTensor> = parts.iter().map(|p| p.value()).collect();
    let n = values[0].cols();
    if values.iter().any(|v| v.cols() != n) {
        return Err(CoreError::Shape("concat_rows: column widths differ".into()));
    }
    let total: usize = values.iter().map(DTensor::rows).sum();
    let mut data = Vec::with_capacity(total * n);
    for v in &values {
        data.extend_from_slice(v.data());
    }
    let row_counts: Vec<usize> = values.iter().map(DTensor::rows).collect();
    let y = DTensor::from_vec(&[total, n], data)?;
    Ok(tape.push_concat(y, parts, move |g| {
        let mut out = Vec::new();
        let mut offset = 0;
        for &rc in &row_counts {
            out.push(
                DTensor::from_vec(&[rc, n], g.data()[offset * n..(offset + rc) * n].to_vec())
                    .expect("concat_rows back"),
            );
            offset += rc;
        }
        out
    }))
}

/// Stack a list of matrices along the column axis.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    assert!(!parts.is_empty());
    let values: Vec<DTensor> = parts.iter().map(|p| p.value()).collect();
    let m = values[0].rows();
    if values.iter().any(|v| v.rows() != m) {
        return Err(CoreError::Shape("concat_cols: row counts differ".into()));
    }
    let widths: Vec<usize> = values.iter().map(DTensor::cols).collect();
    let total: usize = widths.iter().sum();
    let mut y = DTensor::zeros(&[m, total]);
    {
        let mut offset = 0;
        for v in &values {
            let w = v.cols();
            for i in 0..m {
                for j in 0..w {
                    y.data_mut()[i * total + offset + j] = v.at(i, j);
                }
            }
            offset += w;
        }
    }
    let widths_b = widths.clone();
    Ok(tape.push_concat(y, parts, move |g| {
        let mut out = Vec::new();
        let mut offset = 0;
        for &w in &widths_b {
            let mut part = DTensor::zeros(&[m, w]);
            for i in 0..m {
                for j in 0..w {
                    part.data_mut()[i * w + j] = g.data()[i * total + offset + j];
                }
            }
            out.push(part);
            offset += w;
        }
        out
    }))
}

impl Tape {
    fn push_concat<'t>(
        &'t self,
        value: DTensor,
        parts: &[Var<'t>],
        back: impl Fn(&DTensor) -> Vec<DTensor> + 'static,
    ) -> Var<'t> {
        let parents = parts.iter().map(|p| p.idx).collect();
        self.push(value, parents, Some(Box::new(back)))
    }
}

/// Compare the tape gradient of a scalar function against central finite
/// differences. Returns the max over coordinates of
/// `|g_tape - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &DTensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CoreError::Contract(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    if y.value().numel() != 1 {
        return Err(CoreError::Contract("grad_check: f must be scalar".into()));
    }
    let grads = tape.backward(y)?;
    let g_tape = grads.wrt(&tape, xv);

    let eval = |xt: &DTensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.leaf(xt.clone());
        Ok(f(&t, v)?.item())
    };

    let mut max_err = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let g_fd = (fp - fm) / (2.0 * eps);
        let err = (g_tape.data()[i] - g_fd).abs() / g_fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
