//! Layers and optimizers built on [`crate::autograd`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Mat, ParamId, ParamStore, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(rng, in_dim, in_dim, out_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros((1, out_dim))));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.affine(x, w, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruLayer {
    pub wi: ParamId,
    pub wh: ParamId,
    pub bi: ParamId,
    pub bh: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Stack of gated recurrent units; layer `n + 1` reads layer `n`'s new state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|n| {
                let d_in = if n == 0 { in_dim } else { hidden };
                GruLayer {
                    wi: store.add(format!("{name}.{n}.wi"), fan_in_uniform(rng, hidden, d_in, 3 * hidden)),
                    wh: store.add(format!("{name}.{n}.wh"), fan_in_uniform(rng, hidden, hidden, 3 * hidden)),
                    bi: store.add(format!("{name}.{n}.bi"), Mat::zeros((1, 3 * hidden))),
                    bh: store.add(format!("{name}.{n}.bh"), Mat::zeros((1, 3 * hidden))),
                    in_dim: d_in,
                    hidden,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    /// Advances every layer by one step. Rows whose `active` entry is 0 keep
    /// their previous state.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        hidden: &[Var],
        active: Option<Var>,
    ) -> Vec<Var> {
        let mut input = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(hidden) {
            let (wi, wh) = (g.param(store, layer.wi), g.param(store, layer.wh));
            let (bi, bh) = (g.param(store, layer.bi), g.param(store, layer.bh));
            let mut h_new = g.gru_cell(input, h, wi, wh, bi, bh);
            if let Some(m) = active {
                let delta = g.sub(h_new, h);
                let kept = g.mul_col(delta, m);
                h_new = g.add(h, kept);
            }
            out.push(h_new);
            input = h_new;
        }
        out
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> Vec<Var> {
        self.layers
            .iter()
            .map(|l| g.constant(Mat::zeros((batch, l.hidden))))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmLayer {
    pub wi: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

/// Hidden and cell state of one LSTM layer.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|n| {
                let d_in = if n == 0 { in_dim } else { hidden };
                let mut bias = Mat::zeros((1, 4 * hidden));
                // forget gate starts open
                bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
                LstmLayer {
                    wi: store.add(format!("{name}.{n}.wi"), fan_in_uniform(rng, hidden, d_in, 4 * hidden)),
                    wh: store.add(format!("{name}.{n}.wh"), fan_in_uniform(rng, hidden, hidden, 4 * hidden)),
                    b: store.add(format!("{name}.{n}.b"), bias),
                    hidden,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> Vec<LstmState> {
        self.layers
            .iter()
            .map(|l| LstmState {
                h: g.constant(Mat::zeros((batch, l.hidden))),
                c: g.constant(Mat::zeros((batch, l.hidden))),
            })
            .collect()
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        state: &[LstmState],
        active: Option<Var>,
    ) -> Vec<LstmState> {
        let mut input = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, st) in self.layers.iter().zip(state) {
            let (wi, wh, b) = (g.param(store, layer.wi), g.param(store, layer.wh), g.param(store, layer.b));
            let hc = g.lstm_cell(input, st.h, st.c, wi, wh, b);
            let hd = layer.hidden;
            let mut h = g.slice(hc, 0, hd);
            let mut c = g.slice(hc, hd, 2 * hd);
            if let Some(m) = active {
                let dh = g.sub(h, st.h);
                let dh = g.mul_col(dh, m);
                h = g.add(st.h, dh);
                let dc = g.sub(c, st.c);
                let dc = g.mul_col(dc, m);
                c = g.add(st.c, dc);
            }
            out.push(LstmState { h, c });
            input = h;
        }
        out
    }
}

/// Feedforward block: affine, optional layer normalization, LeakyReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormedLayer {
    pub linear: Linear,
    pub norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Vec<NormedLayer>,
    pub output: Linear,
}

impl Mlp {
    /// `widths` are the hidden widths; every hidden layer is followed by an
    /// optional layer norm and LeakyReLU, the output layer is linear.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        out_dim: usize,
        layer_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut d = in_dim;
        let mut hidden = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let linear = Linear::new(store, &format!("{name}.{i}"), d, w, true, rng);
            let norm = layer_norm.then(|| {
                (
                    store.add(format!("{name}.{i}.ln_gamma"), Mat::ones((1, w))),
                    store.add(format!("{name}.{i}.ln_beta"), Mat::zeros((1, w))),
                )
            });
            hidden.push(NormedLayer { linear, norm });
            d = w;
        }
        let output = Linear::new(store, &format!("{name}.out"), d, out_dim, true, rng);
        Self { hidden, output }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().map_or(self.output.in_dim, |l| l.linear.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.linear.forward(g, store, h);
            if let Some((gamma, beta)) = layer.norm {
                let (gm, bt) = (g.param(store, gamma), g.param(store, beta));
                h = g.layer_norm(h, gm, bt, 1e-5);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        self.output.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64 },
    RmsProp { alpha: f64 },
}

/// First-order optimizer with per-parameter state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub eps: f64,
    pub steps: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Optimizer {
    pub fn adam(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self::new(store, OptimizerKind::Adam { beta1, beta2 }, lr)
    }

    pub fn rmsprop(store: &ParamStore, lr: f64) -> Self {
        Self::new(store, OptimizerKind::RmsProp { alpha: 0.99 }, lr)
    }

    pub fn new(store: &ParamStore, kind: OptimizerKind, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        let first = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::RmsProp { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            eps: 1e-8,
            steps: 0,
            first,
            second: zeros,
        }
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let t = self.steps as i32;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(grad) = grads.get(store, id) else { continue };
            let grad = grad.clone();
            let p = store.get_mut(id);
            match self.kind {
                OptimizerKind::Adam { beta1, beta2 } => {
                    let m = &mut self.first[id.0];
                    let v = &mut self.second[id.0];
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    ndarray::Zip::from(p).and(m).and(v).and(&grad).for_each(|p, m, v, &g| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *p -= self.lr * mh / (vh.sqrt() + self.eps);
                    });
                }
                OptimizerKind::RmsProp { alpha } => {
                    let v = &mut self.second[id.0];
                    ndarray::Zip::from(p).and(v).and(&grad).for_each(|p, v, &g| {
                        *v = alpha * *v + (1.0 - alpha) * g * g;
                        *p -= self.lr * g / (v.sqrt() + self.eps);
                    });
                }
            }
        }
    }
}
