//! Missing-aware autoencoder for irregular sequences with informative
//! missing values.
//!
//! Every step is first turned into an observation embedding
//! `e_i = W [x_i, pre_i, M_i, y, m_y] + phi(t_i)` where `phi` is a learnable
//! time representation (one linear slot, the rest sinusoidal). The same
//! embedding feeds the encoder and the decoder.
//!
//! The encoder is the pooled GRU stack of [`crate::autoencoder`] and produces
//! the same latent layout `[s, h^1, ..., h^N]`. Each `h^n` passes through an
//! affine map with LeakyReLU before seeding decoder layer `n`.
//!
//! Decoding happens in two phases per step. The decision stack (the first
//! `decide_layers` layers) reads the embedding of the previous observation
//! and emits the time increment and per-feature observation probabilities.
//! The generation stack (the remaining layers) reads `[q_i, s]`, where `q_i`
//! is the decision state shrunk by a trainable decay of the time lags and the
//! decided mask, and emits the feature values.

use std::sync::Arc;

use ndarray::{s, Array1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ColumnGroup, Graph, Mat, ParamId, ParamStore, Var};
use crate::batch::Batch;
use crate::data::{Dataset, Instance, Layout, Schema};
use crate::error::{Error, Result};
use crate::model::{feature_loss, harden, length_column, pin_length, SequenceModel};
use crate::nn::{fan_in_uniform, GruStack, Linear, LEAKY_SLOPE};

/// How decided observation probabilities become masks at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// Observed when the probability exceeds the calibrated threshold.
    #[default]
    Threshold,
    /// Observed with the predicted probability.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Layers of the decision stack; the generation stack gets the rest.
    pub decide_layers: usize,
    pub embed_dim: usize,
    /// When false the recurrent stacks read the raw `[x, M, y, m_y, t]`.
    #[serde(default = "yes")]
    pub observation_embedding: bool,
    /// When false one stack feeds the time, mask and feature heads together
    /// and no decay is applied.
    #[serde(default = "yes")]
    pub two_step_decoder: bool,
    #[serde(default)]
    pub binarize: Binarize,
}

fn yes() -> bool {
    true
}

impl MissingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("layers, hidden and embed_dim must be positive".into()));
        }
        if self.two_step_decoder && !(1..self.layers).contains(&self.decide_layers) {
            return Err(Error::Config(format!(
                "decide_layers must lie in [1, layers) (got {} of {})",
                self.decide_layers, self.layers
            )));
        }
        Ok(())
    }
}

/// Per-feature cut-offs on the observation probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub dynamic: Vec<f64>,
    pub global: Vec<f64>,
}

/// Projection plus learnable time representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub proj: Linear,
    pub time_w: ParamId,
    pub time_b: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Modules {
    embed: Option<Embedding>,
    enc: GruStack,
    enc_fc: Linear,
    bridge: Vec<Linear>,
    decide: GruStack,
    generate: Option<GruStack>,
    decay: Option<Linear>,
    time_head: Linear,
    mask_head: Linear,
    dynamic_head: Linear,
    global_head: Option<Linear>,
    global_mask_head: Option<Linear>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissingAutoencoder {
    pub config: MissingConfig,
    pub schema: Schema,
    /// Overall missing rate of each dynamic feature on the training set.
    pub rates: Vec<f64>,
    pub global_rates: Vec<f64>,
    pub thresholds: Option<Thresholds>,
    layout: Layout,
    modules: Modules,
    params: ParamStore,
}

/// Step inputs of the embedding, all `B x _`.
pub struct StepInput {
    pub x: Var,
    pub pre: Var,
    pub mask: Var,
    pub t: Var,
}

/// Teacher-forced decoder outputs of one batch.
pub struct TeacherOut {
    /// Time increments `B x 1` per step.
    pub increments: Vec<Var>,
    /// Observation probabilities `B x K` per step.
    pub mask_probs: Vec<Var>,
    pub values: Vec<Var>,
    pub global: Option<Var>,
    pub global_mask_probs: Option<Var>,
}

/// Generated sequences plus the time lags used while generating them.
pub struct Synthesis {
    pub instances: Vec<Instance>,
    pub lags: Vec<Mat>,
}

impl MissingAutoencoder {
    /// Builds an untrained model; missing rates are taken from `train`.
    pub fn new(train: &Dataset, config: MissingConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let schema = &train.schema;
        let layout = schema.layout();
        if layout.d_x == 0 {
            return Err(Error::Schema("no dynamic features".into()));
        }
        let (d_x, d_y, k, n_g) = (layout.d_x, layout.d_y, layout.k(), layout.n_global());
        let (h, n) = (config.hidden, config.layers);
        let mut params = ParamStore::new();
        let (embed, step_dim) = if config.observation_embedding {
            let d = config.embed_dim;
            let proj = Linear::new(&mut params, "embed.proj", 2 * d_x + k + d_y + n_g, d, false, rng);
            let time_w = params.add("embed.time_w", fan_in_uniform(rng, 1, 1, d));
            let time_b = params.add("embed.time_b", fan_in_uniform(rng, 1, 1, d));
            (Some(Embedding { proj, time_w, time_b }), d)
        } else {
            (None, d_x + k + d_y + n_g + 1)
        };
        let enc = GruStack::new(&mut params, "enc.gru", step_dim, h, n, rng);
        let enc_fc = Linear::new(&mut params, "enc.fc", 3 * h, h, true, rng);
        let bridge = (0..n)
            .map(|i| Linear::new(&mut params, &format!("dec.bridge.{i}"), h, h, true, rng))
            .collect();
        let (decide, generate, decay) = if config.two_step_decoder {
            let nd = config.decide_layers;
            let decide = GruStack::new(&mut params, "dec.decide", step_dim, h, nd, rng);
            let generate = GruStack::new(&mut params, "dec.generate", 2 * h, h, n - nd, rng);
            let decay = Linear::new(&mut params, "dec.decay", 2 * k, h, true, rng);
            (decide, Some(generate), Some(decay))
        } else {
            (GruStack::new(&mut params, "dec.decide", step_dim + h, h, n, rng), None, None)
        };
        let time_head = Linear::new(&mut params, "dec.time", h, 1, true, rng);
        let mask_head = Linear::new(&mut params, "dec.mask", h, k, true, rng);
        let dynamic_head = Linear::new(&mut params, "dec.dynamic", h, d_x, true, rng);
        let global_head = (d_y > 0).then(|| Linear::new(&mut params, "dec.global", h, d_y, true, rng));
        let global_mask_head = (n_g > 0).then(|| Linear::new(&mut params, "dec.global_mask", h, n_g, true, rng));
        Ok(Self {
            config,
            schema: schema.clone(),
            rates: train.dynamic_missing_rates(),
            global_rates: train.global_missing_rates(),
            thresholds: None,
            layout,
            modules: Modules {
                embed,
                enc,
                enc_fc,
                bridge,
                decide,
                generate,
                decay,
                time_head,
                mask_head,
                dynamic_head,
                global_head,
                global_mask_head,
            },
            params,
        })
    }

    fn dynamic_groups(&self) -> Arc<Vec<ColumnGroup>> {
        self.layout.dynamic_groups()
    }

    /// `phi(t)`: slot 0 is `w_0 t + b_0`, slot `j > 0` is `sin(w_j t + b_j)`.
    pub fn time_representation(&self, g: &mut Graph, t: Var) -> Option<Var> {
        let emb = self.modules.embed.as_ref()?;
        let (w, b) = (g.param(&self.params, emb.time_w), g.param(&self.params, emb.time_b));
        let a = g.affine(t, w, Some(b));
        let d = g.shape(a).1;
        let linear = g.slice(a, 0, 1);
        if d == 1 {
            return Some(linear);
        }
        let rest = g.slice(a, 1, d);
        let periodic = g.sin(rest);
        Some(g.concat(&[linear, periodic]))
    }

    /// Observation embedding of one step; `y` and `m_y` are shared by all steps.
    pub fn embed(&self, g: &mut Graph, step: &StepInput, y: Var, m_y: Var) -> Var {
        match &self.modules.embed {
            Some(emb) => {
                let cat = g.concat(&[step.x, step.pre, step.mask, y, m_y]);
                let proj = emb.proj.forward(g, &self.params, cat);
                let phi = self.time_representation(g, step.t).expect("embedding present");
                g.add(proj, phi)
            }
            None => g.concat(&[step.x, step.mask, y, m_y, step.t]),
        }
    }

    fn step_input(g: &mut Graph, batch: &Batch, i: usize) -> StepInput {
        StepInput {
            x: g.constant(batch.x[i].clone()),
            pre: g.constant(batch.pre[i].clone()),
            mask: g.constant(batch.mask[i].clone()),
            t: g.constant(batch.t[i].clone()),
        }
    }

    fn zero_input(&self, g: &mut Graph, b: usize) -> StepInput {
        let (d_x, k) = (self.layout.d_x, self.layout.k());
        StepInput {
            x: g.constant(Mat::zeros((b, d_x))),
            pre: g.constant(Mat::zeros((b, d_x))),
            mask: g.constant(Mat::zeros((b, k))),
            t: g.constant(Mat::zeros((b, 1))),
        }
    }

    /// Encoder pass; returns the latent codes and the per-step embeddings.
    fn encode_with_embeddings(&self, g: &mut Graph, batch: &Batch) -> (Var, Vec<Var>) {
        let m = &self.modules;
        let y = g.constant(batch.y.clone());
        let m_y = g.constant(batch.global_mask.clone());
        let mut h = m.enc.zero_state(g, batch.size());
        let mut tops = Vec::with_capacity(batch.steps());
        let mut embeds = Vec::with_capacity(batch.steps());
        for i in 0..batch.steps() {
            let step = Self::step_input(g, batch, i);
            let e = self.embed(g, &step, y, m_y);
            embeds.push(e);
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
        let mut parts = vec![s];
        parts.extend(h);
        (g.concat(&parts), embeds)
    }

    /// `s` and the bridged initial states of the decoder layers.
    fn start_decoder(&self, g: &mut Graph, r: Var) -> (Var, Vec<Var>) {
        let h = self.config.hidden;
        let s = g.slice(r, 0, h);
        let init = self
            .modules
            .bridge
            .iter()
            .enumerate()
            .map(|(n, fc)| {
                let block = g.slice(r, (n + 1) * h, (n + 2) * h);
                let a = fc.forward(g, &self.params, block);
                g.leaky_relu(a, LEAKY_SLOPE)
            })
            .collect();
        (s, init)
    }

    fn decide_depth(&self) -> usize {
        self.modules.decide.num_layers()
    }

    /// Advances the decision stack on embedding `e` and reads the time
    /// increment `sigma(W_t h + b_t)` and the observation probabilities.
    pub fn decide_step(&self, g: &mut Graph, e: Var, s: Var, hidden: &[Var]) -> (Vec<Var>, Var, Var) {
        let input = if self.config.two_step_decoder { e } else { g.concat(&[e, s]) };
        let h = self.modules.decide.step(g, &self.params, input, hidden, None);
        let top = *h.last().expect("at least one layer");
        let ta = self.modules.time_head.forward(g, &self.params, top);
        let inc = g.sigmoid(ta);
        let ma = self.modules.mask_head.forward(g, &self.params, top);
        let probs = g.sigmoid(ma);
        (h, inc, probs)
    }

    /// `beta = exp(-max(0, W_beta [delta, M] + b_beta))`, `q = beta * h`.
    pub fn apply_decay(&self, g: &mut Graph, h: Var, delta: Var, mask: Var) -> Var {
        match &self.modules.decay {
            Some(decay) => {
                let cat = g.concat(&[delta, mask]);
                let a = decay.forward(g, &self.params, cat);
                let r = g.relu(a);
                let neg = g.scale(r, -1.0);
                let beta = g.exp(neg);
                g.mul(beta, h)
            }
            None => h,
        }
    }

    /// Generation stack on `[q, s]` and the feature head.
    pub fn generate_step(&self, g: &mut Graph, q: Var, s: Var, hidden: &[Var]) -> (Vec<Var>, Var) {
        let (h, top) = match &self.modules.generate {
            Some(gen) => {
                let input = g.concat(&[q, s]);
                let h = gen.step(g, &self.params, input, hidden, None);
                let top = *h.last().expect("at least one layer");
                (h, top)
            }
            None => (Vec::new(), q),
        };
        let a = self.modules.dynamic_head.forward(g, &self.params, top);
        (h, g.group_activation(a, self.dynamic_groups()))
    }

    fn decode_globals(&self, g: &mut Graph, s: Var) -> (Option<Var>, Option<Var>) {
        let y = self.modules.global_head.as_ref().map(|head| {
            let a = head.forward(g, &self.params, s);
            g.group_activation(a, self.layout.global_groups())
        });
        let my = self.modules.global_mask_head.as_ref().map(|head| {
            let a = head.forward(g, &self.params, s);
            g.sigmoid(a)
        });
        (y, my)
    }

    /// Decoder pass with ground-truth times, masks and previous values.
    pub fn teacher_forward(&self, g: &mut Graph, batch: &Batch) -> TeacherOut {
        let (r, embeds) = self.encode_with_embeddings(g, batch);
        let (s, init) = self.start_decoder(g, r);
        let (global, global_mask_probs) = self.decode_globals(g, s);
        let nd = self.decide_depth();
        let mut h_dec = init[..nd].to_vec();
        let mut h_gen = init[nd..].to_vec();
        let y = g.constant(batch.y.clone());
        let m_y = g.constant(batch.global_mask.clone());
        let start = self.zero_input(g, batch.size());
        let mut e = self.embed(g, &start, y, m_y);
        let (mut increments, mut mask_probs, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..batch.steps() {
            let (h, inc, probs) = self.decide_step(g, e, s, &h_dec);
            h_dec = h;
            let top = *h_dec.last().expect("at least one layer");
            let delta = g.constant(batch.delta[i].clone());
            let mask = g.constant(batch.mask[i].clone());
            let q = self.apply_decay(g, top, delta, mask);
            let (h, xh) = self.generate_step(g, q, s, &h_gen);
            h_gen = h;
            increments.push(inc);
            mask_probs.push(probs);
            values.push(xh);
            e = embeds[i];
        }
        TeacherOut {
            increments,
            mask_probs,
            values,
            global,
            global_mask_probs,
        }
    }

    /// Weights `(1 - rho) (1 - M) + rho M` of the mask cross-entropy.
    pub fn mask_weights(mask: &Mat, rates: &[f64]) -> Mat {
        Mat::from_shape_fn(mask.dim(), |(r, j)| {
            let m = mask[[r, j]];
            (1.0 - rates[j]) * (1.0 - m) + rates[j] * m
        })
    }

    /// Missing-aware reconstruction loss, averaged over instances.
    ///
    /// Dynamic part: feature error over observed entries (averaged over the
    /// instance's observations) and the squared error of the time increments
    /// (averaged over steps after the first) share the budget `K : 1`; the
    /// weighted mask cross-entropy is normalized by `K l`. The global part is
    /// built the same way from the observed global features and their mask.
    /// The two parts are combined with weights `d_x : d_y`.
    pub fn masked_loss(&self, g: &mut Graph, batch: &Batch, out: &TeacherOut) -> Var {
        let lay = &self.layout;
        let b = batch.size();
        let bf = b as f64;
        let (d_x, d_y) = (lay.d_x as f64, lay.d_y as f64);
        let (wx, wy) = (d_x / (d_x + d_y), d_y / (d_x + d_y));
        let k = lay.k() as f64;
        let observed: Vec<f64> = (0..b)
            .map(|r| (0..batch.steps()).map(|i| batch.mask[i].row(r).sum()).sum::<f64>().max(1.0))
            .collect();
        let mut terms = Vec::new();
        for i in 0..batch.steps() {
            let act = |r: usize| batch.active[[r, i]];
            let l = |r: usize| batch.lengths[r] as f64;
            let w_val = Mat::from_shape_fn((b, lay.k()), |(r, j)| {
                act(r) * batch.mask[i][[r, j]] * wx * k / (k + 1.0) / (bf * observed[r])
            });
            terms.push(feature_loss(g, out.values[i], &batch.x[i], &w_val, &lay.dynamic));
            if i > 0 {
                let dt = &batch.t[i] - &batch.t[i - 1];
                let w_t = Mat::from_shape_fn((b, 1), |(r, _)| {
                    if l(r) > 1.0 {
                        act(r) * wx / (k + 1.0) / (bf * (l(r) - 1.0))
                    } else {
                        0.0
                    }
                });
                terms.push(g.sq_err(out.increments[i], dt, w_t));
            }
            let mut w_m = Self::mask_weights(&batch.mask[i], &self.rates);
            for r in 0..b {
                let scale = act(r) * wx / (bf * k * l(r));
                w_m.row_mut(r).mapv_inplace(|w| w * scale);
            }
            terms.push(g.bce(out.mask_probs[i], batch.mask[i].clone(), w_m));
        }
        if let (Some(yh), Some(myh)) = (out.global, out.global_mask_probs) {
            let n_g = lay.n_global() as f64;
            let w_val = Mat::from_shape_fn((b, lay.n_global()), |(r, j)| {
                let seen = batch.global_mask.row(r).sum().max(1.0);
                batch.global_mask[[r, j]] * wy / (bf * seen)
            });
            terms.push(feature_loss(g, yh, &batch.y, &w_val, &lay.global));
            let mut w_m = Self::mask_weights(&batch.global_mask, &self.global_rates);
            w_m.mapv_inplace(|w| w * wy / (bf * n_g));
            terms.push(g.bce(myh, batch.global_mask.clone(), w_m));
        }
        let all = g.concat(&terms);
        g.sum(all)
    }

    /// Observation probabilities of every valid step of `data` under teacher
    /// forcing: one vector per dynamic feature and one per global feature.
    pub fn mask_head_outputs(&self, data: &Dataset, chunk: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (k, n_g) = (self.layout.k(), self.layout.n_global());
        let mut dynamic = vec![Vec::new(); k];
        let mut global = vec![Vec::new(); n_g];
        let refs: Vec<&Instance> = data.instances.iter().collect();
        for part in refs.chunks(chunk.max(1)) {
            let batch = Batch::new(part, &self.layout);
            let mut g = Graph::new();
            let out = self.teacher_forward(&mut g, &batch);
            for (i, &p) in out.mask_probs.iter().enumerate() {
                let p = g.value(p);
                for r in 0..batch.size() {
                    if batch.active[[r, i]] != 0.0 {
                        for (j, col) in dynamic.iter_mut().enumerate() {
                            col.push(p[[r, j]]);
                        }
                    }
                }
            }
            if let Some(my) = out.global_mask_probs {
                for row in g.value(my).rows() {
                    for (j, col) in global.iter_mut().enumerate() {
                        col.push(row[j]);
                    }
                }
            }
        }
        (dynamic, global)
    }

    /// Calibrates thresholds so the binarized training-set observation rate
    /// of each feature matches its observed rate.
    pub fn calibrate_thresholds(&mut self, data: &Dataset) -> Thresholds {
        let (dynamic, global) = self.mask_head_outputs(data, 256);
        let th = Thresholds {
            dynamic: dynamic
                .iter()
                .zip(&self.rates)
                .enumerate()
                .map(|(j, (v, &rho))| calibrate_threshold(v, rho, &self.layout.dynamic[j].name))
                .collect(),
            global: global
                .iter()
                .zip(&self.global_rates)
                .enumerate()
                .map(|(j, (v, &rho))| calibrate_threshold(v, rho, &self.layout.global[j].name))
                .collect(),
        };
        self.thresholds = Some(th.clone());
        th
    }

    fn binarize(&self, p: f64, tau: f64, rng: &mut ChaCha8Rng) -> f64 {
        let on = match self.config.binarize {
            Binarize::Threshold => p > tau,
            Binarize::Sample => rng.random::<f64>() < p,
        };
        f64::from(on)
    }

    /// Autoregressive synthesis: decide the time and mask, update the time
    /// lags from the decided history, decay, generate, keep observed values.
    pub fn synthesize(&self, latents: &Mat, rng: &mut ChaCha8Rng) -> Result<Synthesis> {
        let th = self
            .thresholds
            .as_ref()
            .ok_or_else(|| Error::Config("observation thresholds have not been calibrated".into()))?;
        let n = latents.nrows();
        if n == 0 {
            return Ok(Synthesis {
                instances: Vec::new(),
                lags: Vec::new(),
            });
        }
        if latents.ncols() != self.latent_dim() {
            return Err(Error::Config(format!(
                "latent width {} does not match the autoencoder ({})",
                latents.ncols(),
                self.latent_dim()
            )));
        }
        let lay = &self.layout;
        let (d_x, k, n_g) = (lay.d_x, lay.k(), lay.n_global());
        let owner = lay.dynamic_column_owner();
        let mut g = Graph::new();
        let r = g.constant(latents.clone());
        let (s, init) = self.start_decoder(&mut g, r);
        let (yv, myv) = self.decode_globals(&mut g, s);
        let len_col = length_column(lay);
        let len_idx = len_col.map(|_| n_g - 1);
        let mut y = yv.map_or_else(|| Mat::zeros((n, 0)), |v| g.value(v).clone());
        harden(&mut y, &lay.global);
        let mut m_y = Mat::zeros((n, n_g));
        if let Some(v) = myv {
            let p = g.value(v).clone();
            for ((r, j), &pv) in p.indexed_iter() {
                m_y[[r, j]] = if Some(j) == len_idx { 1.0 } else { self.binarize(pv, th.global[j], rng) };
            }
        }
        for (j, slot) in lay.global.iter().enumerate() {
            for r in 0..n {
                if m_y[[r, j]] == 0.0 {
                    y.slice_mut(s![r, slot.start..slot.end()]).fill(0.0);
                }
            }
        }
        let lengths: Vec<usize> = (0..n)
            .map(|r| len_col.map_or(self.schema.max_len, |c| self.schema.decode_length(y[[r, c]])))
            .collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);

        let nd = self.decide_depth();
        let mut h_dec = init[..nd].to_vec();
        let mut h_gen = init[nd..].to_vec();
        let yc = g.constant(y.clone());
        let myc = g.constant(m_y.clone());
        let mut prev = (Mat::zeros((n, d_x)), Mat::zeros((n, d_x)), Mat::zeros((n, k)), Mat::zeros((n, 1)));
        let mut delta = Mat::zeros((n, k));
        let mut xs = Vec::with_capacity(steps);
        let mut masks = Vec::with_capacity(steps);
        let mut times = Vec::with_capacity(steps);
        let mut lags = Vec::with_capacity(steps);
        let mut pre = Mat::zeros((n, d_x));
        for i in 0..steps {
            let input = StepInput {
                x: g.constant(prev.0.clone()),
                pre: g.constant(prev.1.clone()),
                mask: g.constant(prev.2.clone()),
                t: g.constant(prev.3.clone()),
            };
            let e = self.embed(&mut g, &input, yc, myc);
            let (h, inc, probs) = self.decide_step(&mut g, e, s, &h_dec);
            h_dec = h;
            let mut t = Mat::zeros((n, 1));
            if i > 0 {
                let incv = g.value(inc);
                for r in 0..n {
                    let tp = prev.3[[r, 0]];
                    t[[r, 0]] = (tp + incv[[r, 0]]).max(tp.next_up());
                }
                for r in 0..n {
                    let dt = t[[r, 0]] - prev.3[[r, 0]];
                    for j in 0..k {
                        delta[[r, j]] = if prev.2[[r, j]] != 0.0 { dt } else { delta[[r, j]] + dt };
                    }
                }
            }
            let pv = g.value(probs).clone();
            let mask = Mat::from_shape_fn((n, k), |(r, j)| self.binarize(pv[[r, j]], th.dynamic[j], rng));
            let top = *h_dec.last().expect("at least one layer");
            let dv = g.constant(delta.clone());
            let mv = g.constant(mask.clone());
            let q = self.apply_decay(&mut g, top, dv, mv);
            let (h, xh) = self.generate_step(&mut g, q, s, &h_gen);
            h_gen = h;
            let mut x = g.value(xh).clone();
            harden(&mut x, &lay.dynamic);
            for ((r, c), v) in x.indexed_iter_mut() {
                if mask[[r, owner[c]]] == 0.0 {
                    *v = 0.0;
                }
            }
            let step_pre = pre.clone();
            for ((r, c), p) in pre.indexed_iter_mut() {
                if mask[[r, owner[c]]] != 0.0 {
                    *p = x[[r, c]];
                }
            }
            xs.push(x.clone());
            masks.push(mask.clone());
            times.push(t.clone());
            lags.push(delta.clone());
            prev = (x, step_pre, mask, t);
        }

        let mut instances = Vec::with_capacity(n);
        let mut inst_lags = Vec::with_capacity(n);
        for r in 0..n {
            let l = lengths[r];
            let x = Mat::from_shape_fn((l, d_x), |(i, c)| xs[i][[r, c]]);
            let mask = Mat::from_shape_fn((l, k), |(i, j)| masks[i][[r, j]]);
            let t = Array1::from_shape_fn(l, |i| times[i][[r, 0]]);
            let mut yr = y.row(r).to_owned();
            pin_length(&mut yr, len_col, l, self.schema.max_len);
            instances.push(Instance::new(x, mask, yr, m_y.row(r).to_owned(), t)?);
            inst_lags.push(Mat::from_shape_fn((l, k), |(i, j)| lags[i][[r, j]]));
        }
        Ok(Synthesis {
            instances,
            lags: inst_lags,
        })
    }
}

/// `tau` such that a fraction `rho` of `outputs` is at or below it; entries
/// above `tau` count as observed. Constant outputs fall back to 0.5.
pub fn calibrate_threshold(outputs: &[f64], rho: f64, name: &str) -> f64 {
    if outputs.is_empty() {
        return 0.5;
    }
    let mut v = outputs.to_vec();
    v.sort_by(f64::total_cmp);
    if v[v.len() - 1] - v[0] < 1e-12 {
        log::warn!("observation head for {name:?} is constant; using threshold 0.5");
        return 0.5;
    }
    let missing = (rho * v.len() as f64).round() as usize;
    if missing == 0 {
        0.0
    } else {
        v[missing.min(v.len()) - 1]
    }
}

impl SequenceModel for MissingAutoencoder {
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

    fn batch_loss(&self, g: &mut Graph, batch: &Batch, _rng: &mut ChaCha8Rng) -> Var {
        let out = self.teacher_forward(g, batch);
        self.masked_loss(g, batch, &out)
    }

    fn encode_batch(&self, g: &mut Graph, batch: &Batch) -> Var {
        self.encode_with_embeddings(g, batch).0
    }

    fn decode(&self, latents: &Mat, rng: &mut ChaCha8Rng) -> Result<Vec<Instance>> {
        Ok(self.synthesize(latents, rng)?.instances)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_time_lags;
    use crate::model::{encode_instances, stream_rng};
    use crate::testutil::{check_param_grads, mixed_incomplete};
    use rand::SeedableRng;

    fn config() -> MissingConfig {
        MissingConfig {
            layers: 3,
            hidden: 6,
            decide_layers: 2,
            embed_dim: 5,
            observation_embedding: true,
            two_step_decoder: true,
            binarize: Binarize::Threshold,
        }
    }

    fn model(ds: &Dataset, cfg: MissingConfig) -> MissingAutoencoder {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        MissingAutoencoder::new(ds, cfg, &mut rng).unwrap()
    }

    fn short(ds: &Dataset, n: usize, l: usize) -> Vec<Instance> {
        ds.instances
            .iter()
            .take(n)
            .map(|i| {
                let l = i.len().min(l);
                Instance::new(
                    i.x.slice(s![..l, ..]).to_owned(),
                    i.mask.slice(s![..l, ..]).to_owned(),
                    i.y.clone(),
                    i.global_mask.clone(),
                    i.t.slice(s![..l]).to_owned(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn rejects_a_decision_stack_as_deep_as_the_decoder() {
        let mut cfg = config();
        cfg.decide_layers = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn generation_stack_has_the_remaining_layers() {
        let ds = mixed_incomplete(6, 0);
        let m = model(&ds, config());
        assert_eq!(m.modules.decide.num_layers(), 2);
        assert_eq!(m.modules.generate.as_ref().unwrap().num_layers(), 1);
    }

    #[test]
    fn zero_projection_leaves_the_time_representation() {
        let ds = mixed_incomplete(6, 0);
        let mut m = model(&ds, config());
        let emb = m.modules.embed.clone().unwrap();
        m.params.get_mut(emb.proj.w).fill(0.0);
        m.params.get_mut(emb.time_w)[[0, 0]] = 1.0;
        m.params.get_mut(emb.time_b)[[0, 0]] = 0.0;
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let batch = Batch::new(&refs, &m.layout);
        let mut g = Graph::new();
        let y = g.constant(batch.y.clone());
        let my = g.constant(batch.global_mask.clone());
        let step = MissingAutoencoder::step_input(&mut g, &batch, 1);
        let e = m.embed(&mut g, &step, y, my);
        let phi = m.time_representation(&mut g, step.t).unwrap();
        assert_eq!(g.value(e), g.value(phi));
        let ev = g.value(e);
        for r in 0..batch.size() {
            assert_eq!(ev[[r, 0]], batch.t[1][[r, 0]]);
            assert!(ev.row(r).iter().skip(1).all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn decision_heads_and_decay_limits() {
        let ds = mixed_incomplete(6, 0);
        let mut m = model(&ds, config());
        let mut g = Graph::new();
        let e = g.constant(Mat::from_elem((3, 5), 0.3));
        let s = g.constant(Mat::from_elem((3, 6), -0.2));
        let h0 = m.modules.decide.zero_state(&mut g, 3);
        let (_, inc, probs) = m.decide_step(&mut g, e, s, &h0);
        assert!(g.value(inc).iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(g.value(probs).iter().all(|&v| v > 0.0 && v < 1.0));

        let time = m.modules.time_head.clone();
        m.params.get_mut(time.w).fill(0.0);
        m.params.get_mut(time.b.unwrap()).fill(0.0);
        let mut g = Graph::new();
        let e = g.constant(Mat::from_elem((3, 5), 0.3));
        let s = g.constant(Mat::zeros((3, 6)));
        let h0 = m.modules.decide.zero_state(&mut g, 3);
        let (_, inc, _) = m.decide_step(&mut g, e, s, &h0);
        assert!(g.value(inc).iter().all(|&v| v == 0.5));

        let decay = m.modules.decay.clone().unwrap();
        let hv = Mat::from_shape_fn((3, 6), |(r, c)| (r * 6 + c) as f64 * 0.1 - 0.5);
        let run = |m: &MissingAutoencoder| {
            let mut g = Graph::new();
            let h = g.constant(hv.clone());
            let delta = g.constant(Mat::from_elem((3, 2), 1e3));
            let mask = g.constant(Mat::zeros((3, 2)));
            let q = m.apply_decay(&mut g, h, delta, mask);
            g.value(q).clone()
        };
        for (a, b) in run(&m).iter().zip(hv.iter()) {
            assert!(a.abs() <= b.abs() + 1e-15);
        }

        m.params.get_mut(decay.w).fill(0.0);
        m.params.get_mut(decay.b.unwrap()).fill(0.0);
        assert_eq!(run(&m), hv);

        m.params.get_mut(decay.w).fill(1.0);
        assert!(run(&m).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn mask_weights_sum_to_one_across_branches() {
        let rates = [0.8067, 0.0, 1.0];
        let obs = MissingAutoencoder::mask_weights(&Mat::ones((1, 3)), &rates);
        let miss = MissingAutoencoder::mask_weights(&Mat::zeros((1, 3)), &rates);
        assert!((obs[[0, 0]] - 0.8067).abs() < 1e-15);
        assert!((miss[[0, 0]] - 0.1933).abs() < 1e-12);
        assert_eq!(obs[[0, 1]], 0.0);
        for j in 0..3 {
            assert!((obs[[0, j]] + miss[[0, j]] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let tau = calibrate_threshold(&v, 0.25, "f");
        assert!((tau - 0.25).abs() < 0.01);
        let missing = v.iter().filter(|&&p| p <= tau).count() as f64 / v.len() as f64;
        assert!((missing - 0.25).abs() < 0.02);
        let floor = calibrate_threshold(&v, 0.0, "f");
        assert!(v.iter().all(|&p| p > floor));
        assert_eq!(calibrate_threshold(&[0.3; 10], 0.5, "f"), 0.5);
    }

    #[test]
    fn feature_head_ignores_the_current_values() {
        // Values of step i never reach the prediction of step i; the decided
        // mask of step i does.
        let ds = mixed_incomplete(8, 3);
        let m = model(&ds, config());
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let base = Batch::new(&refs, &m.layout);
        let i = 1;
        let run = |b: &Batch| {
            let mut g = Graph::new();
            let out = m.teacher_forward(&mut g, b);
            (g.value(out.values[i]).clone(), g.value(out.mask_probs[i]).clone())
        };
        let (v0, p0) = run(&base);

        let mut changed = base.clone();
        changed.x[i].mapv_inplace(|v| 1.0 - v);
        // The encoder sees the whole sequence; freeze its latent by feeding
        // the decoder only through a fixed latent.
        let mut g = Graph::new();
        let (r, _) = m.encode_with_embeddings(&mut g, &base);
        let r = g.value(r).clone();
        let decode = |b: &Batch| {
            let mut g = Graph::new();
            let rv = g.constant(r.clone());
            let (s, init) = m.start_decoder(&mut g, rv);
            let nd = m.decide_depth();
            let (mut hd, mut hg) = (init[..nd].to_vec(), init[nd..].to_vec());
            let y = g.constant(b.y.clone());
            let my = g.constant(b.global_mask.clone());
            let start = m.zero_input(&mut g, b.size());
            let mut e = m.embed(&mut g, &start, y, my);
            let mut outs = Vec::new();
            for step in 0..=i {
                let (h, _, p) = m.decide_step(&mut g, e, s, &hd);
                hd = h;
                let top = *hd.last().unwrap();
                let d = g.constant(b.delta[step].clone());
                let mk = g.constant(b.mask[step].clone());
                let q = m.apply_decay(&mut g, top, d, mk);
                let (h, xh) = m.generate_step(&mut g, q, s, &hg);
                hg = h;
                outs.push((g.value(xh).clone(), g.value(p).clone()));
                let inp = MissingAutoencoder::step_input(&mut g, b, step);
                e = m.embed(&mut g, &inp, y, my);
            }
            outs.pop().unwrap()
        };
        let (a, pa) = decode(&base);
        let (b, pb) = decode(&changed);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let _ = (v0, p0);

        let mut flipped = base.clone();
        flipped.mask[i].mapv_inplace(|v| 1.0 - v);
        let (c, _) = decode(&flipped);
        assert_ne!(a, c);
    }

    #[test]
    fn encoder_and_decoder_share_the_embedding() {
        let ds = mixed_incomplete(4, 1);
        let m = model(&ds, config());
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let batch = Batch::new(&refs, &m.layout);
        let mut g = Graph::new();
        let (_, embeds) = m.encode_with_embeddings(&mut g, &batch);
        let y = g.constant(batch.y.clone());
        let my = g.constant(batch.global_mask.clone());
        let step = MissingAutoencoder::step_input(&mut g, &batch, 2);
        let e = m.embed(&mut g, &step, y, my);
        assert_eq!(g.value(e), g.value(embeds[2]));
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let ds = mixed_incomplete(5, 2);
        let m = MissingAutoencoder {
            rates: vec![0.0; 2],
            global_rates: vec![0.0; 3],
            ..model(&ds, config())
        };
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let batch = Batch::new(&refs, &m.layout);
        let mut g = Graph::new();
        let out = TeacherOut {
            increments: (0..batch.steps())
                .map(|i| {
                    let dt = if i == 0 { Mat::zeros((5, 1)) } else { &batch.t[i] - &batch.t[i - 1] };
                    g.constant(dt)
                })
                .collect(),
            mask_probs: batch.mask.iter().map(|mk| g.constant(mk.clone())).collect(),
            values: batch.x.iter().map(|x| g.constant(x.clone())).collect(),
            global: Some(g.constant(batch.y.clone())),
            global_mask_probs: Some(g.constant(batch.global_mask.clone())),
        };
        let l = m.masked_loss(&mut g, &batch, &out);
        assert!(g.scalar(l).abs() < 1e-9, "{}", g.scalar(l));
    }

    #[test]
    fn masked_loss_gradients() {
        let ds = mixed_incomplete(6, 4);
        let mut m = model(&ds, config());
        let insts = short(&ds, 3, 3);
        let refs: Vec<&Instance> = insts.iter().collect();
        let batch = Batch::new(&refs, &m.layout);
        check_param_grads(
            &mut m,
            |m| &mut m.params,
            |g, m| {
                let out = m.teacher_forward(g, &batch);
                m.masked_loss(g, &batch, &out)
            },
            &["embed.", "dec.decay", "dec.time", "dec.mask", "dec.dynamic", "dec.global", "dec.bridge.0"],
            1e-4,
        );
    }

    #[test]
    fn synthesis_timestamps_increase_and_lags_match_the_oracle() {
        let ds = mixed_incomplete(20, 5);
        let mut m = model(&ds, config());
        m.calibrate_thresholds(&ds);
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let latents = encode_instances(&m, &refs, 8);
        let mut rng = stream_rng(0, 0);
        let syn = m.synthesize(&latents, &mut rng).unwrap();
        assert_eq!(syn.instances.len(), 20);
        for (inst, lag) in syn.instances.iter().zip(&syn.lags) {
            assert!(inst.t.windows(2).into_iter().all(|w| w[1] > w[0]));
            assert_eq!(&compute_time_lags(&inst.mask, &inst.t), lag);
            assert!(inst.len() >= 1 && inst.len() <= ds.schema.max_len);
            crate::data::instance::check_instance(inst, &ds.schema).unwrap();
        }
    }

    #[test]
    fn all_observed_thresholds_fill_every_entry() {
        let ds = mixed_incomplete(10, 6);
        let mut m = model(&ds, config());
        m.thresholds = Some(Thresholds {
            dynamic: vec![0.0; 2],
            global: vec![0.0; 3],
        });
        let latents = Mat::from_elem((4, m.latent_dim()), 0.1);
        let syn = m.synthesize(&latents, &mut stream_rng(0, 0)).unwrap();
        for inst in &syn.instances {
            assert!(inst.mask.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn calibration_reproduces_training_rates() {
        let ds = mixed_incomplete(40, 8);
        let mut m = model(&ds, config());
        let th = m.calibrate_thresholds(&ds);
        let (outs, _) = m.mask_head_outputs(&ds, 16);
        for (j, v) in outs.iter().enumerate() {
            let missing = v.iter().filter(|&&p| p <= th.dynamic[j]).count() as f64 / v.len() as f64;
            assert!((missing - m.rates[j]).abs() <= 0.02, "{missing} vs {}", m.rates[j]);
        }
    }

    #[test]
    fn ablations_build_and_run() {
        let ds = mixed_incomplete(6, 9);
        for (emb, two) in [(false, true), (true, false), (false, false)] {
            let mut cfg = config();
            cfg.observation_embedding = emb;
            cfg.two_step_decoder = two;
            let mut m = model(&ds, cfg);
            let refs: Vec<&Instance> = ds.instances.iter().collect();
            let batch = Batch::new(&refs, &m.layout);
            let mut g = Graph::new();
            let l = m.batch_loss(&mut g, &batch, &mut stream_rng(0, 0));
            assert!(g.scalar(l).is_finite());
            m.calibrate_thresholds(&ds);
            let latents = encode_instances(&m, &refs, 4);
            assert_eq!(m.decode(&latents, &mut stream_rng(0, 1)).unwrap().len(), 6);
        }
    }
}
