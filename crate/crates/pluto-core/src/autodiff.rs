//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`GradContext`] records the forward computation as a flat tape of nodes;
//! [`GradContext::gradient`] replays it in reverse, visiting each node exactly
//! once, and returns gradients for every watched parameter. The op set is the
//! minimum needed for the transformer forward pass, the selector towers, and
//! entropy losses. [`finite_difference_gradient`] is the independent oracle
//! used to cross-check every composite.

use crate::error::{PlutoError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Index of a value recorded on the tape.
pub type ValueId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Constant or watched parameter.
    Leaf,
    MatMul(ValueId, ValueId),
    /// n×m plus a length-m bias broadcast over rows.
    AddBias(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    MulElem(ValueId, ValueId),
    Scale(ValueId, f64),
    Neg(ValueId),
    Relu(ValueId),
    Gelu(ValueId),
    SoftmaxRows(ValueId),
    LayerNormRows {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    Transpose(ValueId),
    SliceCols {
        x: ValueId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<ValueId>),
    SliceRows {
        x: ValueId,
        start: usize,
        end: usize,
    },
    ConcatRows(Vec<ValueId>),
    /// Per-row Shannon entropy of probability rows, 0·ln0 := 0. Output n×1.
    EntropyRows(ValueId),
    /// Per-row −ln p[label]. Output n×1.
    NllRows { probs: ValueId, labels: Vec<usize> },
    SumAll(ValueId),
    MeanAll(ValueId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by watched-parameter name.
#[derive(Debug, Clone)]
pub struct Gradients {
    map: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| PlutoError::NotWatched(name.to_string()))
    }

    pub fn into_map(self) -> HashMap<String, Tensor> {
        self.map
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }
}

/// Recorded computation graph plus the set of watched parameters.
pub struct GradContext {
    nodes: Vec<Node>,
    watched: Vec<(String, ValueId)>,
}

impl Default for GradContext {
    fn default() -> Self {
        Self::new()
    }
}

impl GradContext {
    pub fn new() -> Self {
        GradContext {
            nodes: Vec::new(),
            watched: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Record a constant input; no gradient flows out of it.
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(Op::Leaf, t)
    }

    /// Record a parameter whose gradient will be reported under `name`.
    pub fn watch(&mut self, name: &str, t: Tensor) -> Result<ValueId> {
        if self.watched.iter().any(|(n, _)| n == name) {
            return Err(PlutoError::InvalidArgument(format!(
                "parameter watched twice: {name}"
            )));
        }
        let id = self.push(Op::Leaf, t);
        self.watched.push((name.to_string(), id));
        Ok(id)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id].value
    }

    fn dims2(&self, id: ValueId) -> Result<(usize, usize)> {
        self.nodes[id].value.dims2()
    }

    // ── op builders ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (n, m) = self.dims2(x)?;
        if self.nodes[bias].value.numel() != m {
            return Err(PlutoError::shapes(
                "add_bias",
                self.nodes[x].value.shape(),
                self.nodes[bias].value.shape(),
            ));
        }
        let bd = self.nodes[bias].value.data().to_vec();
        let mut v = self.nodes[x].value.clone();
        let vd = v.data_mut();
        for i in 0..n {
            for j in 0..m {
                vd[i * m + j] += bd[j];
            }
        }
        Ok(self.push(Op::AddBias(x, bias), v))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.nodes[a].value.sub(&self.nodes[b].value)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.nodes[a].value.hadamard(&self.nodes[b].value)?;
        Ok(self.push(Op::MulElem(a, b), v))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let v = self.nodes[x].value.scale(c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn neg(&mut self, x: ValueId) -> ValueId {
        let v = self.nodes[x].value.scale(-1.0);
        self.push(Op::Neg(x), v)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.nodes[x].value.map(|a| a.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let v = self.nodes[x].value.map(gelu_scalar);
        self.push(Op::Gelu(x), v)
    }

    /// Row-wise stable softmax of an n×m tensor.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, m) = self.dims2(x)?;
        let mut v = self.nodes[x].value.clone();
        let vd = v.data_mut();
        for i in 0..n {
            let row = &mut vd[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(x), v))
    }

    /// Row-wise LayerNorm of an n×d tensor with length-d affine parameters.
    pub fn layer_norm_rows(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let (n, d) = self.dims2(x)?;
        if self.nodes[gamma].value.numel() != d || self.nodes[beta].value.numel() != d {
            return Err(PlutoError::shapes(
                "layer_norm_rows affine",
                self.nodes[x].value.shape(),
                self.nodes[gamma].value.shape(),
            ));
        }
        let g = self.nodes[gamma].value.data().to_vec();
        let b = self.nodes[beta].value.data().to_vec();
        let mut v = self.nodes[x].value.clone();
        let vd = v.data_mut();
        for i in 0..n {
            let row = &mut vd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = g[j] * (*e - mean) * inv_std + b[j];
            }
        }
        Ok(self.push(Op::LayerNormRows { x, gamma, beta, eps }, v))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.nodes[x].value.transpose()?;
        Ok(self.push(Op::Transpose(x), v))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (n, m) = self.dims2(x)?;
        if start >= end || end > m {
            return Err(PlutoError::InvalidArgument(format!(
                "slice_cols {start}..{end} out of range for {m} columns"
            )));
        }
        let w = end - start;
        let src = self.nodes[x].value.data();
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            out[i * w..(i + 1) * w].copy_from_slice(&src[i * m + start..i * m + end]);
        }
        let v = Tensor::from_vec(vec![n, w], out)?;
        Ok(self.push(Op::SliceCols { x, start, end }, v))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(PlutoError::EmptyInput("concat_cols"));
        }
        let (n, _) = self.dims2(parts[0])?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.dims2(p).map(|(r, c)| if r == n { c } else { usize::MAX }))
            .collect::<Result<_>>()?;
        if widths.contains(&usize::MAX) {
            return Err(PlutoError::InvalidArgument(
                "concat_cols: row counts differ".to_string(),
            ));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p].value.data();
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let v = Tensor::from_vec(vec![n, total], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (n, m) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(PlutoError::InvalidArgument(format!(
                "slice_rows {start}..{end} out of range for {n} rows"
            )));
        }
        let src = self.nodes[x].value.data();
        let v = Tensor::from_vec(
            vec![end - start, m],
            src[start * m..end * m].to_vec(),
        )?;
        Ok(self.push(Op::SliceRows { x, start, end }, v))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(PlutoError::EmptyInput("concat_rows"));
        }
        let (_, m) = self.dims2(parts[0])?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != m {
                return Err(PlutoError::InvalidArgument(
                    "concat_rows: column counts differ".to_string(),
                ));
            }
            rows += r;
            out.extend_from_slice(self.nodes[p].value.data());
        }
        let v = Tensor::from_vec(vec![rows, m], out)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Per-row entropy of probability rows (n×K → n×1), 0·ln0 := 0.
    pub fn entropy_rows(&mut self, probs: ValueId) -> Result<ValueId> {
        let (n, k) = self.dims2(probs)?;
        let src = self.nodes[probs].value.data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = src[i * k..(i + 1) * k]
                .iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum();
        }
        let v = Tensor::from_vec(vec![n, 1], out)?;
        Ok(self.push(Op::EntropyRows(probs), v))
    }

    /// Per-row negative log-likelihood −ln p[label] (n×K → n×1).
    pub fn nll_rows(&mut self, probs: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (n, k) = self.dims2(probs)?;
        if labels.len() != n {
            return Err(PlutoError::InvalidArgument(format!(
                "nll_rows: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(PlutoError::InvalidArgument(format!(
                "nll_rows: label {bad} out of range for {k} classes"
            )));
        }
        let src = self.nodes[probs].value.data();
        let out: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(src[i * k + l].max(1e-300)).ln())
            .collect();
        let v = Tensor::from_vec(vec![n, 1], out)?;
        Ok(self.push(
            Op::NllRows {
                probs,
                labels: labels.to_vec(),
            },
            v,
        ))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let v = Tensor::scalar(self.nodes[x].value.sum());
        self.push(Op::SumAll(x), v)
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.nodes[x].value.numel() as f64;
        let v = Tensor::scalar(self.nodes[x].value.sum() / n);
        self.push(Op::MeanAll(x), v)
    }

    // ── backward pass ────────────────────────────────────────────────

    /// Exact reverse-mode gradients of a scalar `loss` for every watched
    /// parameter. Each recorded node is visited exactly once.
    pub fn gradient(&self, loss: ValueId) -> Result<Gradients> {
        let loss_val = &self.nodes[loss].value;
        if loss_val.numel() != 1 {
            return Err(PlutoError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss] = Some(Tensor::full(loss_val.shape(), 1.0));

        for id in (0..=loss).rev() {
            // leave the adjoint in place: watched leaves are read out below
            let adj = match adjoints[id].clone() {
                Some(a) => a,
                None => continue,
            };
            self.backprop_node(id, &adj, &mut adjoints);
        }

        let mut map = HashMap::new();
        for (name, id) in &self.watched {
            let shape = self.nodes[*id].value.shape();
            let g = match &adjoints[*id] {
                Some(t) => t.clone(),
                None => Tensor::zeros(shape),
            };
            debug_assert_eq!(g.shape(), shape);
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }

    fn accumulate(adjoints: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
        match &mut adjoints[id] {
            Some(existing) => {
                let sum = existing.add(&delta).expect("adjoint shape");
                *existing = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: ValueId, adj: &Tensor, adjoints: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let da = adj.matmul(&bv.transpose().unwrap()).unwrap();
                let db = av.transpose().unwrap().matmul(adj).unwrap();
                Self::accumulate(adjoints, *a, da);
                Self::accumulate(adjoints, *b, db);
            }
            Op::AddBias(x, bias) => {
                let (n, m) = adj.dims2().unwrap();
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += adj.at2(i, j);
                    }
                }
                let bias_shape = self.nodes[*bias].value.shape().to_vec();
                Self::accumulate(adjoints, *x, adj.clone());
                Self::accumulate(
                    adjoints,
                    *bias,
                    Tensor::from_vec(bias_shape, db).unwrap(),
                );
            }
            Op::Add(a, b) => {
                Self::accumulate(adjoints, *a, adj.clone());
                Self::accumulate(adjoints, *b, adj.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(adjoints, *a, adj.clone());
                Self::accumulate(adjoints, *b, adj.scale(-1.0));
            }
            Op::MulElem(a, b) => {
                let da = adj.hadamard(&self.nodes[*b].value).unwrap();
                let db = adj.hadamard(&self.nodes[*a].value).unwrap();
                Self::accumulate(adjoints, *a, da);
                Self::accumulate(adjoints, *b, db);
            }
            Op::Scale(x, c) => {
                Self::accumulate(adjoints, *x, adj.scale(*c));
            }
            Op::Neg(x) => {
                Self::accumulate(adjoints, *x, adj.scale(-1.0));
            }
            Op::Relu(x) => {
                let dx = adj
                    .zip_map(&self.nodes[*x].value, |g, v| if v > 0.0 { g } else { 0.0 })
                    .unwrap();
                Self::accumulate(adjoints, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = adj
                    .zip_map(&self.nodes[*x].value, |g, v| g * gelu_grad_scalar(v))
                    .unwrap();
                Self::accumulate(adjoints, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                // ds_i = s_i * (g_i − Σ_j g_j s_j) per row
                let s = &self.nodes[id].value;
                let (n, m) = s.dims2().unwrap();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let mut inner = 0.0;
                    for j in 0..m {
                        inner += adj.at2(i, j) * s.at2(i, j);
                    }
                    for j in 0..m {
                        dx[i * m + j] = s.at2(i, j) * (adj.at2(i, j) - inner);
                    }
                }
                Self::accumulate(adjoints, *x, Tensor::from_vec(vec![n, m], dx).unwrap());
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let g = self.nodes[*gamma].value.data();
                let (n, d) = xv.dims2().unwrap();
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let row: Vec<f64> = (0..d).map(|j| xv.at2(i, j)).collect();
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dy: Vec<f64> = (0..d).map(|j| adj.at2(i, j)).collect();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let dxhat: Vec<f64> = (0..d).map(|j| dy[j] * g[j]).collect();
                    for j in 0..d {
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += dy[j] * xhat[j];
                        dbeta[j] += dy[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        dx[i * d + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                let gshape = self.nodes[*gamma].value.shape().to_vec();
                let bshape = self.nodes[*beta].value.shape().to_vec();
                Self::accumulate(adjoints, *x, Tensor::from_vec(vec![n, d], dx).unwrap());
                Self::accumulate(adjoints, *gamma, Tensor::from_vec(gshape, dgamma).unwrap());
                Self::accumulate(adjoints, *beta, Tensor::from_vec(bshape, dbeta).unwrap());
            }
            Op::Transpose(x) => {
                Self::accumulate(adjoints, *x, adj.transpose().unwrap());
            }
            Op::SliceCols { x, start, end } => {
                let (n, m) = self.nodes[*x].value.dims2().unwrap();
                let w = end - start;
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..w {
                        dx[i * m + start + j] = adj.at2(i, j);
                    }
                }
                Self::accumulate(adjoints, *x, Tensor::from_vec(vec![n, m], dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let (n, _) = adj.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.nodes[p].value.dims2().unwrap();
                    let mut dp = vec![0.0; n * w];
                    for i in 0..n {
                        for j in 0..w {
                            dp[i * w + j] = adj.at2(i, off + j);
                        }
                    }
                    Self::accumulate(adjoints, p, Tensor::from_vec(vec![n, w], dp).unwrap());
                    off += w;
                }
            }
            Op::SliceRows { x, start, end } => {
                let (n, m) = self.nodes[*x].value.dims2().unwrap();
                let mut dx = vec![0.0; n * m];
                for i in *start..*end {
                    for j in 0..m {
                        dx[i * m + j] = adj.at2(i - start, j);
                    }
                }
                Self::accumulate(adjoints, *x, Tensor::from_vec(vec![n, m], dx).unwrap());
            }
            Op::ConcatRows(parts) => {
                let (_, m) = adj.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let (r, _) = self.nodes[p].value.dims2().unwrap();
                    let mut dp = vec![0.0; r * m];
                    for i in 0..r {
                        for j in 0..m {
                            dp[i * m + j] = adj.at2(off + i, j);
                        }
                    }
                    Self::accumulate(adjoints, p, Tensor::from_vec(vec![r, m], dp).unwrap());
                    off += r;
                }
            }
            Op::EntropyRows(probs) => {
                // dH/dp = −(ln p + 1); entries at exactly 0 contribute nothing
                let pv = &self.nodes[*probs].value;
                let (n, k) = pv.dims2().unwrap();
                let mut dp = vec![0.0; n * k];
                for i in 0..n {
                    let gi = adj.at2(i, 0);
                    for j in 0..k {
                        let p = pv.at2(i, j);
                        if p > 0.0 {
                            dp[i * k + j] = gi * (-(p.ln() + 1.0));
                        }
                    }
                }
                Self::accumulate(adjoints, *probs, Tensor::from_vec(vec![n, k], dp).unwrap());
            }
            Op::NllRows { probs, labels } => {
                let pv = &self.nodes[*probs].value;
                let (n, k) = pv.dims2().unwrap();
                let mut dp = vec![0.0; n * k];
                for (i, &l) in labels.iter().enumerate() {
                    let p = pv.at2(i, l).max(1e-300);
                    dp[i * k + l] = adj.at2(i, 0) * (-1.0 / p);
                }
                Self::accumulate(adjoints, *probs, Tensor::from_vec(vec![n, k], dp).unwrap());
            }
            Op::SumAll(x) => {
                let g = adj.data()[0];
                let shape = self.nodes[*x].value.shape();
                Self::accumulate(adjoints, *x, Tensor::full(shape, g));
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].value.numel() as f64;
                let g = adj.data()[0] / n;
                let shape = self.nodes[*x].value.shape();
                Self::accumulate(adjoints, *x, Tensor::full(shape, g));
            }
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Central-difference gradient oracle: (f(θ+he_i) − f(θ−he_i)) / 2h.
pub fn finite_difference_gradient<F>(mut f: F, theta: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = vec![0.0; theta.numel()];
    let mut probe = theta.clone();
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::from_vec(theta.shape().to_vec(), grad).expect("shape preserved")
}

/// ‖a − b‖₂ / max(‖b‖₂, floor): relative error metric for gradient checks.
pub fn relative_l2_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / b.l2_norm().max(1e-12)
}

/// Gradient agreement check: ‖a − b‖₂ ≤ rel·‖b‖₂ + abs. The absolute floor
/// covers analytically-zero gradients, where central differences return pure
/// O(h²) noise and a relative ratio is meaningless.
pub fn gradients_close(a: &Tensor, b: &Tensor, rel: f64, abs: f64) -> bool {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff <= rel * b.l2_norm() + abs
}
