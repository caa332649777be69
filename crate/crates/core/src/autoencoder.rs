//! Recurrent autoencoder for fully observed sequences.
//!
//! The encoder runs a GRU stack over `[x_i, y]`, pools the top layer's states
//! (mean, max and last, over valid steps only) and maps them through one
//! affine layer with LeakyReLU to a summary `s`. The latent code is
//!
//! ```text
//! r = [s, h^1, ..., h^N]        width (N + 1) * hidden
//! ```
//!
//! where `h^n` is the final state of encoder layer `n`. The decoder reads the
//! global features from `s` and reconstructs the dynamic features
//! autoregressively, starting its GRU stack from the `h^n` blocks of `r`.

use std::sync::Arc;

use ndarray::{s, Array1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ColumnGroup, Graph, Mat, ParamStore, Var};
use crate::batch::Batch;
use crate::data::{uniform_times, Instance, Layout, Schema};
use crate::error::{Error, Result};
use crate::model::{feature_loss, harden, length_column, pin_length, SequenceModel};
use crate::nn::{GruStack, Linear, LEAKY_SLOPE};

/// What the decoder sees as the previous step while training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Feeding {
    /// Always the ground truth.
    Teacher,
    /// Per row and step, the ground truth with probability `teacher_prob`,
    /// otherwise the decoder's own previous output.
    Sampling { teacher_prob: f64 },
    /// Always the decoder's own previous output.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub layers: usize,
    pub hidden: usize,
    pub feeding: Feeding,
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("autoencoder needs at least one layer of width >= 1".into()));
        }
        if let Feeding::Sampling { teacher_prob } = self.feeding {
            if !(0.0..=1.0).contains(&teacher_prob) {
                return Err(Error::Config(format!("teacher_prob {teacher_prob} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Modules {
    enc: GruStack,
    enc_fc: Linear,
    dec: GruStack,
    global_head: Option<Linear>,
    dynamic_head: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub schema: Schema,
    layout: Layout,
    modules: Modules,
    params: ParamStore,
}

/// Output of the decoder for one batch.
pub struct Decoded {
    pub global: Option<Var>,
    pub dynamic: Vec<Var>,
}

impl Autoencoder {
    pub fn new(schema: &Schema, config: AeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let layout = schema.layout();
        if layout.d_x == 0 {
            return Err(Error::Schema("no dynamic features".into()));
        }
        let (d_x, d_y, h, n) = (layout.d_x, layout.d_y, config.hidden, config.layers);
        let mut params = ParamStore::new();
        let enc = GruStack::new(&mut params, "enc.gru", d_x + d_y, h, n, rng);
        let enc_fc = Linear::new(&mut params, "enc.fc", 3 * h, h, true, rng);
        let dec = GruStack::new(&mut params, "dec.gru", d_x + h, h, n, rng);
        let global_head = (d_y > 0).then(|| Linear::new(&mut params, "dec.global", h, d_y, true, rng));
        let dynamic_head = Linear::new(&mut params, "dec.dynamic", h, d_x, true, rng);
        Ok(Self {
            config,
            schema: schema.clone(),
            layout,
            modules: Modules {
                enc,
                enc_fc,
                dec,
                global_head,
                dynamic_head,
            },
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn dynamic_groups(&self) -> Arc<Vec<ColumnGroup>> {
        self.layout.dynamic_groups()
    }

    /// Per-step encoder inputs and the summary `s` and final states.
    fn encode_parts(&self, g: &mut Graph, batch: &Batch) -> (Var, Vec<Var>) {
        let m = &self.modules;
        let b = batch.size();
        let y = g.constant(batch.y.clone());
        let mut h = m.enc.zero_state(g, b);
        let mut tops = Vec::with_capacity(batch.steps());
        for i in 0..batch.steps() {
            let x = g.constant(batch.x[i].clone());
            let e = g.concat(&[x, y]);
            let active = g.constant(batch.active_col(i));
            h = m.enc.step(g, &self.params, e, &h, Some(active));
            tops.push(*h.last().expect("at least one layer"));
        }
        let mean = g.masked_mean(&tops, batch.active.clone());
        let max = g.masked_max(&tops, &batch.active);
        let last = *h.last().expect("at least one layer");
        let pooled = g.concat(&[mean, max, last]);
        let a = m.enc_fc.forward(g, &self.params, pooled);
        let s = g.leaky_relu(a, LEAKY_SLOPE);
        (s, h)
    }

    /// Splits a latent batch into `s` and the decoder's initial states.
    fn split_latent(&self, g: &mut Graph, r: Var) -> (Var, Vec<Var>) {
        let h = self.config.hidden;
        let s = g.slice(r, 0, h);
        let init = (1..=self.config.layers).map(|n| g.slice(r, n * h, (n + 1) * h)).collect();
        (s, init)
    }

    /// Global head: activation per feature group of `W_y s + b_y`.
    pub fn decode_global(&self, g: &mut Graph, s: Var) -> Option<Var> {
        let head = self.modules.global_head.as_ref()?;
        let a = head.forward(g, &self.params, s);
        Some(g.group_activation(a, self.layout.global_groups()))
    }

    /// Autoregressive dynamic decoding for `steps` steps. `teacher` holds the
    /// ground-truth rows used by teacher and sampling feeding.
    pub fn decode_dynamic(
        &self,
        g: &mut Graph,
        r: Var,
        steps: usize,
        teacher: Option<&[Mat]>,
        feeding: Feeding,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var>> {
        if feeding != Feeding::Free && teacher.is_none_or(|t| t.len() + 1 < steps) {
            return Err(Error::Data("teacher inputs are shorter than the decoded length".into()));
        }
        let (s, mut h) = self.split_latent(g, r);
        let b = g.shape(r).0;
        let groups = self.dynamic_groups();
        let mut prev = g.constant(Mat::zeros((b, self.layout.d_x)));
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let input = g.concat(&[prev, s]);
            h = self.modules.dec.step(g, &self.params, input, &h, None);
            let top = *h.last().expect("at least one layer");
            let a = self.modules.dynamic_head.forward(g, &self.params, top);
            let xh = g.group_activation(a, groups.clone());
            out.push(xh);
            if i + 1 == steps {
                break;
            }
            prev = match feeding {
                Feeding::Teacher => g.constant(teacher.expect("checked")[i].clone()),
                Feeding::Free => xh,
                Feeding::Sampling { teacher_prob } => {
                    let pick = Mat::from_shape_fn((b, 1), |_| f64::from(rng.random::<f64>() < teacher_prob));
                    let keep = pick.mapv(|p| 1.0 - p);
                    let truth = g.constant(&teacher.expect("checked")[i] * &pick);
                    let keep = g.constant(keep);
                    let own = g.mul_col(xh, keep);
                    g.add(truth, own)
                }
            };
        }
        Ok(out)
    }

    /// Reconstruction of a batch with the given feeding strategy.
    pub fn reconstruct(&self, g: &mut Graph, batch: &Batch, feeding: Feeding, rng: &mut ChaCha8Rng) -> Result<Decoded> {
        let r = self.encode_batch(g, batch);
        let (s, _) = self.split_latent(g, r);
        let global = self.decode_global(g, s);
        let dynamic = self.decode_dynamic(g, r, batch.steps(), Some(&batch.x), feeding, rng)?;
        Ok(Decoded { global, dynamic })
    }

    /// `d_y/(d_x+d_y) L_y + d_x/(d_x+d_y) L_x`, averaged over instances. Each
    /// term averages over features, and the dynamic term first over the
    /// instance's valid steps.
    pub fn reconstruction_loss(&self, g: &mut Graph, batch: &Batch, out: &Decoded) -> Var {
        reconstruction_loss(g, &self.layout, batch, out)
    }
}

pub(crate) fn reconstruction_loss(g: &mut Graph, layout: &Layout, batch: &Batch, out: &Decoded) -> Var {
    let b = batch.size() as f64;
    let (d_x, d_y) = (layout.d_x as f64, layout.d_y as f64);
    let (wx, wy) = (d_x / (d_x + d_y), d_y / (d_x + d_y));
    let k = layout.k() as f64;
    let mut terms = Vec::new();
    for (i, &xh) in out.dynamic.iter().enumerate() {
        let w = Mat::from_shape_fn((batch.size(), layout.k()), |(r, _)| {
            batch.active[[r, i]] * wx / (b * k * batch.lengths[r] as f64)
        });
        terms.push(feature_loss(g, xh, &batch.x[i], &w, &layout.dynamic));
    }
    if let Some(yh) = out.global {
        let n = layout.n_global() as f64;
        let w = Mat::from_elem((batch.size(), layout.n_global()), wy / (b * n));
        terms.push(feature_loss(g, yh, &batch.y, &w, &layout.global));
    }
    let all = g.concat(&terms);
    g.sum(all)
}

impl SequenceModel for Autoencoder {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn latent_dim(&self) -> usize {
        (self.config.layers + 1) * self.config.hidden
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn batch_loss(&self, g: &mut Graph, batch: &Batch, rng: &mut ChaCha8Rng) -> Var {
        let out = self
            .reconstruct(g, batch, self.config.feeding, rng)
            .expect("batch carries its own teacher rows");
        self.reconstruction_loss(g, batch, &out)
    }

    fn encode_batch(&self, g: &mut Graph, batch: &Batch) -> Var {
        let (s, h) = self.encode_parts(g, batch);
        let mut parts = vec![s];
        parts.extend(h);
        g.concat(&parts)
    }

    fn decode(&self, latents: &Mat, _rng: &mut ChaCha8Rng) -> Result<Vec<Instance>> {
        let n = latents.nrows();
        if n == 0 {
            return Ok(Vec::new());
        }
        if latents.ncols() != self.latent_dim() {
            return Err(Error::Config(format!(
                "latent width {} does not match the autoencoder ({})",
                latents.ncols(),
                self.latent_dim()
            )));
        }
        let mut g = Graph::new();
        let r = g.constant(latents.clone());
        let (s, mut h) = self.split_latent(&mut g, r);
        let global = self.decode_global(&mut g, s).map(|v| {
            let mut y = g.value(v).clone();
            harden(&mut y, &self.layout.global);
            y
        });
        let len_col = length_column(&self.layout);
        let max_len = self.schema.max_len;
        let lengths: Vec<usize> = (0..n)
            .map(|i| match (len_col, &global) {
                (Some(c), Some(y)) => self.schema.decode_length(y[[i, c]]),
                _ => max_len,
            })
            .collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let groups = self.dynamic_groups();
        let mut prev = Mat::zeros((n, self.layout.d_x));
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            let p = g.constant(prev);
            let input = g.concat(&[p, s]);
            h = self.modules.dec.step(&mut g, &self.params, input, &h, None);
            let top = *h.last().expect("at least one layer");
            let a = self.modules.dynamic_head.forward(&mut g, &self.params, top);
            let xh = g.group_activation(a, groups.clone());
            let mut x = g.value(xh).clone();
            harden(&mut x, &self.layout.dynamic);
            rows.push(x.clone());
            prev = x;
        }
        (0..n)
            .map(|i| {
                let l = lengths[i];
                let x = Mat::from_shape_fn((l, self.layout.d_x), |(t, c)| rows[t][[i, c]]);
                let mut y = global.as_ref().map_or_else(|| Array1::zeros(0), |y| y.row(i).to_owned());
                pin_length(&mut y, len_col, l, max_len);
                Instance::new(
                    x,
                    Mat::ones((l, self.layout.k())),
                    y,
                    Array1::ones(self.layout.n_global()),
                    uniform_times(l),
                )
            })
            .collect()
    }
}

/// Latent layout: `s` occupies the first `hidden` entries, then each layer's
/// final state in order.
pub fn latent_block(r: &Array1<f64>, hidden: usize, block: usize) -> Array1<f64> {
    r.slice(s![block * hidden..(block + 1) * hidden]).to_owned()
}
