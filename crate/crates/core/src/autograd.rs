//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix whose rows index the batch. A [`Graph`] records
//! operations eagerly; [`Graph::backward`] walks the record in reverse and
//! returns gradients for every parameter that was read through
//! [`Graph::param`]. Recurrent cells, layer normalization, output activations
//! and the losses are fused nodes with hand-written adjoints, which keeps the
//! tape short enough for long unrolls on a single core.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Each store carries a process-unique id so one graph can read parameters
/// from several stores (generator and critic, say) and hand gradients back to
/// the right owner. Clones receive a fresh id.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "next_uid")]
    uid: u64,
    names: Vec<String>,
    values: Vec<Mat>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: next_uid(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients produced by one backward pass, keyed by (store, parameter).
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<(u64, usize), Mat>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&(store.uid, id.0))
    }

    fn accumulate(&mut self, key: (u64, usize), g: Mat) {
        match self.by_param.get_mut(&key) {
            Some(acc) => *acc += &g,
            None => {
                self.by_param.insert(key, g);
            }
        }
    }

    /// Global L2 norm over the gradients that belong to `store`.
    pub fn norm(&self, store: &ParamStore) -> f64 {
        self.by_param
            .iter()
            .filter(|((uid, _), _)| *uid == store.uid)
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales the gradients of `store` so their global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, store: &ParamStore, max_norm: f64) {
        let norm = self.norm(store);
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for ((uid, _), g) in self.by_param.iter_mut() {
                if *uid == store.uid {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Activation applied to one contiguous column group of an output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnGroup {
    pub start: usize,
    pub len: usize,
    pub kind: GroupKind,
}

struct GruCache {
    x: Var,
    h: Var,
    wi: Var,
    wh: Var,
    bi: Var,
    bh: Var,
    r: Mat,
    z: Mat,
    n: Mat,
    ghn: Mat,
}

struct LstmCache {
    x: Var,
    h: Var,
    c: Var,
    wi: Var,
    wh: Var,
    b: Var,
    i: Mat,
    f: Mat,
    g: Mat,
    o: Mat,
    tanh_c: Mat,
}

struct LayerNormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Mat,
    inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    Param(u64, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Exp(Var),
    Sin(Var),
    Square(Var),
    Sqrt(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Gru(Box<GruCache>),
    Lstm(Box<LstmCache>),
    LayerNorm(Box<LayerNormCache>),
    GroupAct(Var, Arc<Vec<ColumnGroup>>),
    SqErr(Var, Box<(Mat, Mat)>),
    CrossEntropy(Var, Box<(Mat, Mat)>),
    Bce(Var, Box<(Mat, Mat)>),
    MaskedMean(Vec<Var>, Mat),
    MaskedMax(Vec<Var>, Array2<usize>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Eagerly evaluated computation record.
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, usize), Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn col_sum(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Reads a parameter. Repeated reads of the same parameter share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid, id.0);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(key.0, key.1), true);
        self.param_cache.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x d` row over the batch.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a * col`, broadcasting a `B x 1` column over the features.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sin);
        let ng = self.ng(a);
        self.push(value, Op::Sin(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Mat::zeros((rows, cols));
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat row mismatch");
            value.slice_mut(s![.., off..off + v.ncols()]).assign(v);
            off += v.ncols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..end` of `a`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Slice(a, start), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Mat::from_elem((1, 1), v.sum() / v.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Per-row sum, `B x d -> B x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Affine map `x w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// One gated-recurrent-unit step with gate order `[reset, update, new]`.
    ///
    /// `wi: in x 3H`, `wh: H x 3H`, `bi, bh: 1 x 3H`.
    pub fn gru_cell(&mut self, x: Var, h: Var, wi: Var, wh: Var, bi: Var, bh: Var) -> Var {
        let hd = self.value(h).ncols();
        let gi = self.value(x).dot(self.value(wi)) + self.value(bi);
        let gh = self.value(h).dot(self.value(wh)) + self.value(bh);
        let mut r = &gi.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd]);
        r.mapv_inplace(sigmoid);
        let mut z = &gi.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd]);
        z.mapv_inplace(sigmoid);
        let ghn = gh.slice(s![.., 2 * hd..3 * hd]).to_owned();
        let mut n = &gi.slice(s![.., 2 * hd..3 * hd]) + &(&r * &ghn);
        n.mapv_inplace(f64::tanh);
        let mut out = Mat::zeros(n.dim());
        Zip::from(&mut out)
            .and(&z)
            .and(&n)
            .and(self.value(h))
            .for_each(|o, &z, &n, &h| *o = (1.0 - z) * n + z * h);
        let ng = [x, h, wi, wh, bi, bh].iter().any(|&v| self.ng(v));
        self.push(
            out,
            Op::Gru(Box::new(GruCache {
                x,
                h,
                wi,
                wh,
                bi,
                bh,
                r,
                z,
                n,
                ghn,
            })),
            ng,
        )
    }

    /// One LSTM step with gate order `[input, forget, cell, output]`.
    ///
    /// Returns `[h', c']` concatenated column-wise (`B x 2H`).
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, wi: Var, wh: Var, b: Var) -> Var {
        let hd = self.value(h).ncols();
        let a = self.value(x).dot(self.value(wi)) + self.value(h).dot(self.value(wh)) + self.value(b);
        let i = a.slice(s![.., 0..hd]).mapv(sigmoid);
        let f = a.slice(s![.., hd..2 * hd]).mapv(sigmoid);
        let g = a.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
        let o = a.slice(s![.., 3 * hd..4 * hd]).mapv(sigmoid);
        let c_new = &f * self.value(c) + &i * &g;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;
        let mut out = Mat::zeros((h_new.nrows(), 2 * hd));
        out.slice_mut(s![.., 0..hd]).assign(&h_new);
        out.slice_mut(s![.., hd..]).assign(&c_new);
        let ng = [x, h, c, wi, wh, b].iter().any(|&v| self.ng(v));
        self.push(
            out,
            Op::Lstm(Box::new(LstmCache {
                x,
                h,
                c,
                wi,
                wh,
                b,
                i,
                f,
                g,
                o,
                tanh_c,
            })),
            ng,
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mu) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = [x, gamma, beta].iter().any(|&v| self.ng(v));
        self.push(
            out,
            Op::LayerNorm(Box::new(LayerNormCache {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            })),
            ng,
        )
    }

    /// Sigmoid or softmax applied per column group. Columns not covered by a
    /// group pass through unchanged.
    pub fn group_activation(&mut self, a: Var, groups: Arc<Vec<ColumnGroup>>) -> Var {
        let mut out = self.value(a).clone();
        for gr in groups.iter() {
            let mut block = out.slice_mut(s![.., gr.start..gr.start + gr.len]);
            match gr.kind {
                GroupKind::Sigmoid => block.mapv_inplace(sigmoid),
                GroupKind::Softmax => {
                    for mut row in block.rows_mut() {
                        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        row.mapv_inplace(|v| (v - m).exp());
                        let z = row.sum();
                        row.mapv_inplace(|v| v / z);
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GroupAct(a, groups), ng)
    }

    /// `sum(weight * (pred - target)^2)`.
    pub fn sq_err(&mut self, pred: Var, target: Mat, weight: Mat) -> Var {
        let p = self.value(pred);
        let mut total = 0.0;
        Zip::from(p)
            .and(&target)
            .and(&weight)
            .for_each(|&p, &t, &w| total += w * (p - t) * (p - t));
        let ng = self.ng(pred);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::SqErr(pred, Box::new((target, weight))),
            ng,
        )
    }

    /// `sum(-weight * target * ln(prob))` on probabilities from a softmax.
    pub fn cross_entropy(&mut self, prob: Var, target: Mat, weight: Mat) -> Var {
        let p = self.value(prob);
        let mut total = 0.0;
        Zip::from(p).and(&target).and(&weight).for_each(|&p, &t, &w| {
            if w != 0.0 && t != 0.0 {
                total -= w * t * p.max(PROB_EPS).ln();
            }
        });
        let ng = self.ng(prob);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropy(prob, Box::new((target, weight))),
            ng,
        )
    }

    /// `sum(weight * BCE(prob, target))` on probabilities from a sigmoid.
    pub fn bce(&mut self, prob: Var, target: Mat, weight: Mat) -> Var {
        let p = self.value(prob);
        let mut total = 0.0;
        Zip::from(p).and(&target).and(&weight).for_each(|&p, &t, &w| {
            if w != 0.0 {
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                total -= w * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
            }
        });
        let ng = self.ng(prob);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::Bce(prob, Box::new((target, weight))),
            ng,
        )
    }

    /// Mean over steps where `mask[b, t] = 1`. `steps[t]` is `B x H`.
    pub fn masked_mean(&mut self, steps: &[Var], mask: Mat) -> Var {
        assert_eq!(steps.len(), mask.ncols());
        let (b, hd) = self.shape(steps[0]);
        let mut out = Mat::zeros((b, hd));
        for (t, &v) in steps.iter().enumerate() {
            let col = mask.column(t);
            Zip::from(out.rows_mut())
                .and(self.value(v).rows())
                .and(&col)
                .for_each(|mut o, x, &m| {
                    if m != 0.0 {
                        o.scaled_add(m, &x);
                    }
                });
        }
        for (mut row, cnt) in out.rows_mut().into_iter().zip(mask.sum_axis(Axis(1))) {
            if cnt > 0.0 {
                row.mapv_inplace(|v| v / cnt);
            }
        }
        let ng = steps.iter().any(|&v| self.ng(v));
        self.push(out, Op::MaskedMean(steps.to_vec(), mask), ng)
    }

    /// Elementwise max over steps where `mask[b, t] = 1`.
    pub fn masked_max(&mut self, steps: &[Var], mask: &Mat) -> Var {
        assert_eq!(steps.len(), mask.ncols());
        let (b, hd) = self.shape(steps[0]);
        let mut out = Mat::from_elem((b, hd), f64::NEG_INFINITY);
        let mut arg = Array2::<usize>::zeros((b, hd));
        for (t, &v) in steps.iter().enumerate() {
            let val = self.value(v);
            for bi in 0..b {
                if mask[[bi, t]] == 0.0 {
                    continue;
                }
                for j in 0..hd {
                    if val[[bi, j]] > out[[bi, j]] {
                        out[[bi, j]] = val[[bi, j]];
                        arg[[bi, j]] = t;
                    }
                }
            }
        }
        out.mapv_inplace(|v| if v == f64::NEG_INFINITY { 0.0 } else { v });
        let ng = steps.iter().any(|&v| self.ng(v));
        self.push(out, Op::MaskedMax(steps.to_vec(), arg), ng)
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut out = Gradients::default();
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: Mat, grads: &mut [Option<Mat>], out: &mut Gradients) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(uid, idx) => out.accumulate((*uid, *idx), g),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, -&g);
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, &g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    self.acc(grads, *row, col_sum(&g));
                }
                self.acc(grads, *a, g);
            }
            Op::MulCol(a, col) => {
                if self.ng(*col) {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *col, gc);
                }
                if self.ng(*a) {
                    self.acc(grads, *a, &g * self.value(*col));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g;
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                self.acc(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * &node.value),
            Op::Sin(a) => self.acc(grads, *a, g * &self.value(*a).mapv(f64::cos)),
            Op::Square(a) => self.acc(grads, *a, g * &(self.value(*a) * 2.0)),
            Op::Sqrt(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d /= 2.0 * y);
                self.acc(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::Slice(a, start) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.acc(grads, *a, d);
                }
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                self.acc(grads, *a, Mat::from_elem(self.value(*a).dim(), k));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                let k = g[[0, 0]] / v.len().max(1) as f64;
                self.acc(grads, *a, Mat::from_elem(v.dim(), k));
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).dim();
                let d = Mat::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                self.acc(grads, *a, d);
            }
            Op::Gru(c) => self.backward_gru(c, g, grads),
            Op::Lstm(c) => self.backward_lstm(c, g, grads),
            Op::LayerNorm(c) => self.backward_layer_norm(c, g, grads),
            Op::GroupAct(a, groups) => {
                let y = &node.value;
                let mut d = g;
                for gr in groups.iter() {
                    let yb = y.slice(s![.., gr.start..gr.start + gr.len]);
                    let mut db = d.slice_mut(s![.., gr.start..gr.start + gr.len]);
                    match gr.kind {
                        GroupKind::Sigmoid => {
                            Zip::from(&mut db).and(&yb).for_each(|d, &y| *d *= y * (1.0 - y))
                        }
                        GroupKind::Softmax => {
                            for (mut drow, yrow) in db.rows_mut().into_iter().zip(yb.rows()) {
                                let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                                Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                            }
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SqErr(p, tw) => {
                let k = g[[0, 0]];
                let (target, weight) = (&tw.0, &tw.1);
                let mut d = self.value(*p) - target;
                Zip::from(&mut d).and(weight).for_each(|d, &w| *d *= 2.0 * w * k);
                self.acc(grads, *p, d);
            }
            Op::CrossEntropy(p, tw) => {
                let k = g[[0, 0]];
                let (target, weight) = (&tw.0, &tw.1);
                let mut d = Mat::zeros(target.dim());
                Zip::from(&mut d)
                    .and(self.value(*p))
                    .and(target)
                    .and(weight)
                    .for_each(|d, &p, &t, &w| {
                        if w != 0.0 && t != 0.0 && p > PROB_EPS {
                            *d = -k * w * t / p;
                        }
                    });
                self.acc(grads, *p, d);
            }
            Op::Bce(p, tw) => {
                let k = g[[0, 0]];
                let (target, weight) = (&tw.0, &tw.1);
                let mut d = Mat::zeros(target.dim());
                Zip::from(&mut d)
                    .and(self.value(*p))
                    .and(target)
                    .and(weight)
                    .for_each(|d, &p, &t, &w| {
                        if w != 0.0 && p > PROB_EPS && p < 1.0 - PROB_EPS {
                            *d = k * w * (p - t) / (p * (1.0 - p));
                        }
                    });
                self.acc(grads, *p, d);
            }
            Op::MaskedMean(steps, mask) => {
                let cnt = mask.sum_axis(Axis(1));
                for (t, &v) in steps.iter().enumerate() {
                    if !self.ng(v) {
                        continue;
                    }
                    let mut d = g.clone();
                    for (bi, mut row) in d.rows_mut().into_iter().enumerate() {
                        let w = if cnt[bi] > 0.0 { mask[[bi, t]] / cnt[bi] } else { 0.0 };
                        row.mapv_inplace(|x| x * w);
                    }
                    self.acc(grads, v, d);
                }
            }
            Op::MaskedMax(steps, arg) => {
                let (b, hd) = g.dim();
                let mut per_step: Vec<Option<Mat>> = vec![None; steps.len()];
                for bi in 0..b {
                    for j in 0..hd {
                        let t = arg[[bi, j]];
                        let slot = per_step[t].get_or_insert_with(|| Mat::zeros((b, hd)));
                        slot[[bi, j]] += g[[bi, j]];
                    }
                }
                // rows with no valid step send their gradient nowhere
                for (t, d) in per_step.into_iter().enumerate() {
                    if let Some(d) = d {
                        self.acc(grads, steps[t], d);
                    }
                }
            }
        }
    }

    fn backward_gru(&self, c: &GruCache, g: Mat, grads: &mut [Option<Mat>]) {
        let hd = c.r.ncols();
        let b = c.r.nrows();
        let h = self.value(c.h);
        let mut dgi = Mat::zeros((b, 3 * hd));
        let mut dgh = Mat::zeros((b, 3 * hd));
        let mut dh_direct = Mat::zeros((b, hd));
        for i in 0..b {
            for j in 0..hd {
                let (r, z, n, ghn) = (c.r[[i, j]], c.z[[i, j]], c.n[[i, j]], c.ghn[[i, j]]);
                let gij = g[[i, j]];
                let dn = gij * (1.0 - z);
                let dz = gij * (h[[i, j]] - n);
                dh_direct[[i, j]] = gij * z;
                let dan = dn * (1.0 - n * n);
                let dar = dan * ghn * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                dgi[[i, j]] = dar;
                dgi[[i, hd + j]] = daz;
                dgi[[i, 2 * hd + j]] = dan;
                dgh[[i, j]] = dar;
                dgh[[i, hd + j]] = daz;
                dgh[[i, 2 * hd + j]] = dan * r;
            }
        }
        if self.ng(c.x) {
            self.acc(grads, c.x, dgi.dot(&self.value(c.wi).t()));
        }
        if self.ng(c.h) {
            let dh = dgh.dot(&self.value(c.wh).t()) + dh_direct;
            self.acc(grads, c.h, dh);
        }
        if self.ng(c.wi) {
            self.acc(grads, c.wi, self.value(c.x).t().dot(&dgi));
        }
        if self.ng(c.wh) {
            self.acc(grads, c.wh, h.t().dot(&dgh));
        }
        if self.ng(c.bi) {
            self.acc(grads, c.bi, col_sum(&dgi));
        }
        if self.ng(c.bh) {
            self.acc(grads, c.bh, col_sum(&dgh));
        }
    }

    fn backward_lstm(&self, c: &LstmCache, g: Mat, grads: &mut [Option<Mat>]) {
        let hd = c.i.ncols();
        let b = c.i.nrows();
        let c_prev = self.value(c.c);
        let mut da = Mat::zeros((b, 4 * hd));
        let mut dc_prev = Mat::zeros((b, hd));
        for r in 0..b {
            for j in 0..hd {
                let (i, f, gg, o, tc) = (c.i[[r, j]], c.f[[r, j]], c.g[[r, j]], c.o[[r, j]], c.tanh_c[[r, j]]);
                let dh = g[[r, j]];
                let dc = g[[r, hd + j]] + dh * o * (1.0 - tc * tc);
                let d_o = dh * tc;
                da[[r, j]] = dc * gg * i * (1.0 - i);
                da[[r, hd + j]] = dc * c_prev[[r, j]] * f * (1.0 - f);
                da[[r, 2 * hd + j]] = dc * i * (1.0 - gg * gg);
                da[[r, 3 * hd + j]] = d_o * o * (1.0 - o);
                dc_prev[[r, j]] = dc * f;
            }
        }
        if self.ng(c.x) {
            self.acc(grads, c.x, da.dot(&self.value(c.wi).t()));
        }
        if self.ng(c.h) {
            self.acc(grads, c.h, da.dot(&self.value(c.wh).t()));
        }
        if self.ng(c.c) {
            self.acc(grads, c.c, dc_prev);
        }
        if self.ng(c.wi) {
            self.acc(grads, c.wi, self.value(c.x).t().dot(&da));
        }
        if self.ng(c.wh) {
            self.acc(grads, c.wh, self.value(c.h).t().dot(&da));
        }
        if self.ng(c.b) {
            self.acc(grads, c.b, col_sum(&da));
        }
    }

    fn backward_layer_norm(&self, c: &LayerNormCache, g: Mat, grads: &mut [Option<Mat>]) {
        if self.ng(c.gamma) {
            self.acc(grads, c.gamma, col_sum(&(&g * &c.xhat)));
        }
        if self.ng(c.beta) {
            self.acc(grads, c.beta, col_sum(&g));
        }
        if self.ng(c.x) {
            let dxhat = &g * self.value(c.gamma);
            let d = dxhat.ncols() as f64;
            let mut dx = Mat::zeros(dxhat.dim());
            for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                let dxh = dxhat.row(r);
                let xh = c.xhat.row(r);
                let m1 = dxh.sum() / d;
                let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                let is = c.inv_std[r];
                Zip::from(&mut row)
                    .and(&dxh)
                    .and(&xh)
                    .for_each(|o, &a, &x| *o = is * (a - m1 - x * m2));
            }
            self.acc(grads, c.x, dx);
        }
    }
}
