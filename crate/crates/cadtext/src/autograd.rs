//! Reverse-mode automatic differentiation over f64 matrices.
//!
//! A [`Tape`] records operations append-only; node references always point
//! backwards, so reverse iteration over the node list is a valid
//! topological order for backpropagation. Trainable tensors live in a
//! [`ParamStore`] outside the tape and receive gradients through a
//! [`Gradients`] buffer, which keeps per-example tapes cheap and lets
//! batches run in parallel with a deterministic, order-fixed reduction.

use ndarray::{Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named trainable tensors plus per-tensor freeze flags.
#[derive(Debug, Clone)]
pub struct ParamStore {
    tensors: Vec<Matrix>,
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Matrix) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        self.trainable.push(true);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count over all tensors.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.tensors.iter().map(|t| Matrix::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

enum Op {
    /// Constant leaf; no gradient flows out.
    Input,
    Gather {
        param: ParamId,
        ids: Vec<usize>,
    },
    /// x · W
    Linear {
        x: Var,
        weight: ParamId,
    },
    /// x + b, b broadcast over rows.
    Bias {
        x: Var,
        bias: ParamId,
    },
    /// x ⊙ g, g broadcast over rows.
    ScaleRows {
        x: Var,
        gain: ParamId,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    /// a · bᵀ
    MatMulNT {
        a: Var,
        b: Var,
    },
    /// x · Wᵀ (weight tying against an embedding table).
    LinearNT {
        x: Var,
        weight: ParamId,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    /// Row-wise (x − mean)/sqrt(var + eps), before any scale/shift.
    LayerNorm {
        x: Var,
    },
    /// Row-wise softmax; columns where `key_valid` is false get exactly 0.
    MaskedSoftmaxRows {
        x: Var,
        key_valid: Vec<bool>,
    },
    /// Elementwise multiply by a constant keep/scale mask.
    Dropout {
        x: Var,
        mask: Matrix,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    /// Row-wise x / (‖x‖₂ + eps).
    NormalizeRows {
        x: Var,
        eps: f64,
    },
    Sigmoid {
        x: Var,
    },
    /// Scalar binary cross-entropy against a fixed label; probability is
    /// clamped to [1e-7, 1 − 1e-7].
    BceLoss {
        p: Var,
        label: f64,
    },
    /// Mean softmax cross-entropy over rows against per-row target ids.
    SoftmaxCeRows {
        logits: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;

/// Append-only computation record.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on non-scalar node");
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn gather(&mut self, store: &ParamStore, param: ParamId, ids: &[usize]) -> Var {
        let table = store.get(param);
        let cols = table.ncols();
        let value = Matrix::from_shape_fn((ids.len(), cols), |(r, c)| table[[ids[r], c]]);
        self.push(
            value,
            Op::Gather {
                param,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn linear(&mut self, store: &ParamStore, x: Var, weight: ParamId) -> Var {
        let value = self.value(x).dot(store.get(weight));
        self.push(value, Op::Linear { x, weight })
    }

    pub fn bias(&mut self, store: &ParamStore, x: Var, bias: ParamId) -> Var {
        let b = store.get(bias);
        assert_eq!(b.nrows(), 1);
        let value = self.value(x) + &b.row(0);
        self.push(value, Op::Bias { x, bias })
    }

    pub fn scale_rows(&mut self, store: &ParamStore, x: Var, gain: ParamId) -> Var {
        let g = store.get(gain);
        assert_eq!(g.nrows(), 1);
        let value = self.value(x) * &g.row(0);
        self.push(value, Op::ScaleRows { x, gain })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT { a, b })
    }

    pub fn linear_nt(&mut self, store: &ParamStore, x: Var, weight: ParamId) -> Var {
        let value = self.value(x).dot(&store.get(weight).t());
        self.push(value, Op::LinearNT { x, weight })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn layer_norm(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let mut value = input.clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(value, Op::LayerNorm { x })
    }

    /// Softmax across each row, restricted to valid key columns; invalid
    /// columns are exactly zero. A row must have at least one valid key.
    pub fn masked_softmax_rows(&mut self, x: Var, key_valid: &[bool]) -> Var {
        let scores = self.value(x);
        assert_eq!(scores.ncols(), key_valid.len());
        assert!(key_valid.iter().any(|&v| v), "softmax row with no valid keys");
        let mut value = Matrix::zeros(scores.raw_dim());
        for (r, row) in scores.rows().into_iter().enumerate() {
            let max = row
                .iter()
                .zip(key_valid)
                .filter(|(_, &v)| v)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, s) in row.iter().enumerate() {
                if key_valid[c] {
                    let e = (s - max).exp();
                    value[[r, c]] = e;
                    denom += e;
                }
            }
            for c in 0..row.len() {
                if key_valid[c] {
                    value[[r, c]] /= denom;
                }
            }
        }
        self.push(
            value,
            Op::MaskedSoftmaxRows {
                x,
                key_valid: key_valid.to_vec(),
            },
        )
    }

    /// `mask` entries are 0 (dropped) or 1/(1−p) (kept); generated by the
    /// caller so the same mask replays in backward.
    pub fn dropout(&mut self, x: Var, mask: Matrix) -> Var {
        let value = self.value(x) * &mask;
        self.push(value, Op::Dropout { x, mask })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let source = self.value(x);
        let value = Matrix::from_shape_fn((rows.len(), source.ncols()), |(r, c)| {
            source[[rows[r], c]]
        });
        self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let input = self.value(x);
        let mut value = input.clone();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm + eps;
            row.mapv_inplace(|v| v / denom);
        }
        self.push(value, Op::NormalizeRows { x, eps })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn bce_loss(&mut self, p: Var, label: f64) -> Var {
        let prob = self.scalar(p).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let loss = -label * prob.ln() - (1.0 - label) * (1.0 - prob).ln();
        self.push(Matrix::from_elem((1, 1), loss), Op::BceLoss { p, label })
    }

    pub fn softmax_ce_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        assert!(!targets.is_empty());
        let mut total = 0.0;
        for (row, &t) in l.rows().into_iter().zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_denom = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += -(row[t] - max) + log_denom;
        }
        let loss = total / targets.len() as f64;
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::SoftmaxCeRows {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Backpropagate from one or more seeded nodes, accumulating into
    /// `grads` for every trainable parameter reached.
    pub fn backward(&self, seeds: &[(Var, Matrix)], store: &ParamStore, grads: &mut Gradients) {
        let mut adjoints: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, seed) in seeds {
            assert_eq!(
                seed.raw_dim(),
                self.nodes[var.0].value.raw_dim(),
                "seed shape mismatch"
            );
            accum(&mut adjoints[var.0], seed.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let adj = match adjoints[idx].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Gather { param, ids } => {
                    if store.is_trainable(*param) {
                        let g = grads.get_mut(*param);
                        for (r, &id) in ids.iter().enumerate() {
                            let mut target = g.row_mut(id);
                            target += &adj.row(r);
                        }
                    }
                }
                Op::Linear { x, weight } => {
                    let w = store.get(*weight);
                    accum(&mut adjoints[x.0], adj.dot(&w.t()));
                    if store.is_trainable(*weight) {
                        let xv = &self.nodes[x.0].value;
                        *grads.get_mut(*weight) += &xv.t().dot(&adj);
                    }
                }
                Op::Bias { x, bias } => {
                    if store.is_trainable(*bias) {
                        let summed = adj.sum_axis(Axis(0)).insert_axis(Axis(0));
                        *grads.get_mut(*bias) += &summed;
                    }
                    accum(&mut adjoints[x.0], adj);
                }
                Op::ScaleRows { x, gain } => {
                    let g = store.get(*gain);
                    let xv = &self.nodes[x.0].value;
                    if store.is_trainable(*gain) {
                        let summed = (&adj * xv).sum_axis(Axis(0)).insert_axis(Axis(0));
                        *grads.get_mut(*gain) += &summed;
                    }
                    accum(&mut adjoints[x.0], &adj * &g.row(0));
                }
                Op::MatMul { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accum(&mut adjoints[a.0], adj.dot(&bv.t()));
                    accum(&mut adjoints[b.0], av.t().dot(&adj));
                }
                Op::MatMulNT { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accum(&mut adjoints[a.0], adj.dot(bv));
                    accum(&mut adjoints[b.0], adj.t().dot(av));
                }
                Op::LinearNT { x, weight } => {
                    let w = store.get(*weight);
                    accum(&mut adjoints[x.0], adj.dot(w));
                    if store.is_trainable(*weight) {
                        let xv = &self.nodes[x.0].value;
                        *grads.get_mut(*weight) += &adj.t().dot(xv);
                    }
                }
                Op::Add { a, b } => {
                    accum(&mut adjoints[a.0], adj.clone());
                    accum(&mut adjoints[b.0], adj);
                }
                Op::Scale { x, factor } => {
                    accum(&mut adjoints[x.0], &adj * *factor);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let masked = Matrix::from_shape_fn(adj.raw_dim(), |(r, c)| {
                        if xv[[r, c]] > 0.0 {
                            adj[[r, c]]
                        } else {
                            0.0
                        }
                    });
                    accum(&mut adjoints[x.0], masked);
                }
                Op::LayerNorm { x } => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(adj.raw_dim());
                    for r in 0..xv.nrows() {
                        let n = xv.ncols() as f64;
                        let row = xv.row(r);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let dy = adj.row(r);
                        let y = yv.row(r);
                        let mean_dy = dy.sum() / n;
                        let mean_dy_y = dy.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..xv.ncols() {
                            dx[[r, c]] = inv * (dy[c] - mean_dy - y[c] * mean_dy_y);
                        }
                    }
                    accum(&mut adjoints[x.0], dx);
                }
                Op::MaskedSoftmaxRows { x, key_valid } => {
                    let p = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(adj.raw_dim());
                    for r in 0..p.nrows() {
                        let dot: f64 = (0..p.ncols())
                            .filter(|&c| key_valid[c])
                            .map(|c| adj[[r, c]] * p[[r, c]])
                            .sum();
                        for c in 0..p.ncols() {
                            if key_valid[c] {
                                dx[[r, c]] = p[[r, c]] * (adj[[r, c]] - dot);
                            }
                        }
                    }
                    accum(&mut adjoints[x.0], dx);
                }
                Op::Dropout { x, mask } => {
                    accum(&mut adjoints[x.0], &adj * mask);
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Matrix::zeros(self.nodes[x.0].value.raw_dim());
                    dx.slice_mut(ndarray::s![.., *start..start + len]).assign(&adj);
                    accum(&mut adjoints[x.0], dx);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let slice = adj.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accum(&mut adjoints[p.0], slice);
                        offset += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let mut dx = Matrix::zeros(self.nodes[x.0].value.raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut target = dx.row_mut(src);
                        target += &adj.row(r);
                    }
                    accum(&mut adjoints[x.0], dx);
                }
                Op::NormalizeRows { x, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(adj.raw_dim());
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                        let denom = norm + eps;
                        let dot: f64 = adj.row(r).iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..xv.ncols() {
                            dx[[r, c]] = adj[[r, c]] / denom - row[c] * dot / (norm * denom * denom);
                        }
                    }
                    accum(&mut adjoints[x.0], dx);
                }
                Op::Sigmoid { x } => {
                    let p = &self.nodes[idx].value;
                    let dx = Matrix::from_shape_fn(adj.raw_dim(), |(r, c)| {
                        adj[[r, c]] * p[[r, c]] * (1.0 - p[[r, c]])
                    });
                    accum(&mut adjoints[x.0], dx);
                }
                Op::BceLoss { p, label } => {
                    let raw = self.nodes[p.0].value[[0, 0]];
                    let grad = if raw <= BCE_CLAMP || raw >= 1.0 - BCE_CLAMP {
                        0.0
                    } else {
                        (raw - label) / (raw * (1.0 - raw))
                    };
                    accum(
                        &mut adjoints[p.0],
                        Matrix::from_elem((1, 1), adj[[0, 0]] * grad),
                    );
                }
                Op::SoftmaxCeRows { logits, targets } => {
                    let l = &self.nodes[logits.0].value;
                    let scale = adj[[0, 0]] / targets.len() as f64;
                    let mut dl = Matrix::zeros(l.raw_dim());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = l.row(r);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for c in 0..l.ncols() {
                            let q = ((l[[r, c]] - max).exp()) / denom;
                            dl[[r, c]] = scale * (q - f64::from(u8::from(c == t)));
                        }
                    }
                    accum(&mut adjoints[logits.0], dl);
                }
            }
        }
    }
}

fn accum(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(existing) => *existing += &delta,
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite difference of `loss_fn` with respect to one entry of
    /// one parameter tensor.
    fn numeric_param_grad(
        store: &ParamStore,
        id: ParamId,
        r: usize,
        c: usize,
        loss_fn: &dyn Fn(&ParamStore) -> f64,
    ) -> f64 {
        let h = 1e-5;
        let mut plus = store.clone();
        plus.get_mut(id)[[r, c]] += h;
        let mut minus = store.clone();
        minus.get_mut(id)[[r, c]] -= h;
        (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h)
    }

    /// A little network exercising every op: gather → linear+bias →
    /// layer-norm/scale/shift → attention-style masked softmax → relu FF →
    /// slice/concat → normalize → sigmoid/BCE plus a CE branch.
    fn build_loss(store: &ParamStore, ids: &[(ParamId, &'static str)]) -> f64 {
        let find = |name: &str| ids.iter().find(|(_, n)| *n == name).unwrap().0;
        let mut tape = Tape::new();
        let tokens = [0usize, 2, 1, 3];
        let emb = tape.gather(store, find("emb"), &tokens);
        let h = tape.linear(store, emb, find("w1"));
        let h = tape.bias(store, h, find("b1"));
        let h = tape.layer_norm(h);
        let h = tape.scale_rows(store, h, find("gain"));
        let h = tape.bias(store, h, find("shift"));
        let q = tape.linear(store, h, find("wq"));
        let k = tape.linear(store, h, find("wk"));
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, 0.5);
        let valid = vec![true, true, true, false];
        let probs = tape.masked_softmax_rows(scores, &valid);
        let mixed = tape.matmul(probs, h);
        let residual = tape.add(mixed, h);
        let act = tape.relu(residual);
        let left = tape.slice_cols(act, 0, 2);
        let right = tape.slice_cols(act, 2, 2);
        let joined = tape.concat_cols(&[left, right]);
        let pooled = tape.gather_rows(joined, &[0]);
        let unit = tape.normalize_rows(pooled, 1e-12);
        let logit = tape.linear(store, unit, find("head"));
        let prob = tape.sigmoid(logit);
        let bce = tape.bce_loss(prob, 1.0);
        let tied = tape.linear_nt(store, unit, find("emb"));
        let ce = tape.softmax_ce_rows(tied, &[2]);
        let total = tape.add(bce, ce);
        tape.scalar(total)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let specs: [(&str, usize, usize); 9] = [
            ("emb", 5, 4),
            ("w1", 4, 4),
            ("b1", 1, 4),
            ("gain", 1, 4),
            ("shift", 1, 4),
            ("wq", 4, 4),
            ("wk", 4, 4),
            ("head", 4, 1),
            ("unused", 2, 2),
        ];
        let ids: Vec<(ParamId, &'static str)> = specs
            .iter()
            .map(|(name, r, c)| (store.add(*name, random_matrix(&mut rng, *r, *c)), *name))
            .collect();

        // Analytic gradients.
        let mut grads = Gradients::zeros_like(&store);
        {
            let find = |name: &str| ids.iter().find(|(_, n)| *n == name).unwrap().0;
            let mut tape = Tape::new();
            let tokens = [0usize, 2, 1, 3];
            let emb = tape.gather(&store, find("emb"), &tokens);
            let h = tape.linear(&store, emb, find("w1"));
            let h = tape.bias(&store, h, find("b1"));
            let h = tape.layer_norm(h);
            let h = tape.scale_rows(&store, h, find("gain"));
            let h = tape.bias(&store, h, find("shift"));
            let q = tape.linear(&store, h, find("wq"));
            let k = tape.linear(&store, h, find("wk"));
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, 0.5);
            let valid = vec![true, true, true, false];
            let probs = tape.masked_softmax_rows(scores, &valid);
            let mixed = tape.matmul(probs, h);
            let residual = tape.add(mixed, h);
            let act = tape.relu(residual);
            let left = tape.slice_cols(act, 0, 2);
            let right = tape.slice_cols(act, 2, 2);
            let joined = tape.concat_cols(&[left, right]);
            let pooled = tape.gather_rows(joined, &[0]);
            let unit = tape.normalize_rows(pooled, 1e-12);
            let logit = tape.linear(&store, unit, find("head"));
            let prob = tape.sigmoid(logit);
            let bce = tape.bce_loss(prob, 1.0);
            let tied = tape.linear_nt(&store, unit, find("emb"));
            let ce = tape.softmax_ce_rows(tied, &[2]);
            let total = tape.add(bce, ce);
            tape.backward(&[(total, Matrix::from_elem((1, 1), 1.0))], &store, &mut grads);
        }

        let loss_fn = |s: &ParamStore| build_loss(s, &ids);
        let mut checked = 0usize;
        for (id, name) in &ids {
            if *name == "unused" {
                assert!(grads.get(*id).iter().all(|&g| g == 0.0));
                continue;
            }
            let t = store.get(*id);
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    let numeric = numeric_param_grad(&store, *id, r, c, &loss_fn);
                    let analytic = grads.get(*id)[[r, c]];
                    let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(
                        ((numeric - analytic) / denom).abs() < 1e-4,
                        "{name}[{r},{c}]: numeric {numeric} vs analytic {analytic}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 2.0], [3.0, 4.0]]);
        store.set_trainable(w, false);
        let mut tape = Tape::new();
        let x = tape.input(array![[1.0, 1.0]]);
        let y = tape.linear(&store, x, w);
        let pooled = tape.slice_cols(y, 0, 1);
        let p = tape.sigmoid(pooled);
        let loss = tape.bce_loss(p, 0.0);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(&[(loss, Matrix::from_elem((1, 1), 1.0))], &store, &mut grads);
        assert!(grads.get(w).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_seed_yields_zero_gradients() {
        // A constant objective backpropagates nothing.
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.5, -0.5], [1.0, 2.0]]);
        let mut tape = Tape::new();
        let x = tape.input(array![[1.0, 2.0]]);
        let y = tape.linear(&store, x, w);
        let pooled = tape.slice_cols(y, 0, 1);
        let p = tape.sigmoid(pooled);
        let loss = tape.bce_loss(p, 1.0);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(&[(loss, Matrix::zeros((1, 1)))], &store, &mut grads);
        assert!(grads.get(w).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_masked_are_zero() {
        let mut tape = Tape::new();
        let x = tape.input(array![[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]]);
        let valid = vec![true, true, true, false];
        let p = tape.masked_softmax_rows(x, &valid);
        let pv = tape.value(p);
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| pv[[r, c]]).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
            assert_eq!(pv[[r, 3]], 0.0);
        }
        // Equal scores over 4 unmasked keys give the uniform row.
        let mut tape = Tape::new();
        let x = tape.input(Matrix::zeros((1, 4)));
        let p = tape.masked_softmax_rows(x, &[true; 4]);
        for c in 0..4 {
            assert_relative_eq!(tape.value(p)[[0, c]], 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.input(random_matrix(&mut rng, 6, 16));
        let y = tape.layer_norm(x);
        for row in tape.value(y).rows() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn normalize_rows_yields_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.input(array![[3.0, 4.0], [0.0, 0.0]]);
        let y = tape.normalize_rows(x, 1e-12);
        let yv = tape.value(y);
        let norm0: f64 = yv.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(norm0, 1.0, epsilon = 1e-6);
        // Zero row stays finite.
        assert!(yv.row(1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bce_loss_hand_values() {
        let mut tape = Tape::new();
        let p = tape.input(Matrix::from_elem((1, 1), 0.5));
        let l = tape.bce_loss(p, 1.0);
        assert_relative_eq!(tape.scalar(l), std::f64::consts::LN_2, epsilon = 1e-12);
        let mut tape = Tape::new();
        let p = tape.input(Matrix::from_elem((1, 1), 0.9));
        let l = tape.bce_loss(p, 0.0);
        assert_relative_eq!(tape.scalar(l), -(0.1f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_n() {
        let mut tape = Tape::new();
        let logits = tape.input(Matrix::zeros((2, 7)));
        let l = tape.softmax_ce_rows(logits, &[3, 0]);
        assert_relative_eq!(tape.scalar(l), (7.0f64).ln(), epsilon = 1e-12);
    }
}
