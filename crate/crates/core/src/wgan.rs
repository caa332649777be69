//! Adversarial model of the latent space: an MLP generator and a three-layer
//! critic trained with the gradient-penalty Wasserstein objective.

use ndarray::{s, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::data::{Dataset, Instance, Split};
use crate::error::{Error, Result};
use crate::model::{encode_instances, stream_rng, SequenceModel};
use crate::nn::{Linear, Mlp, Optimizer, OptimizerKind, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Gradient-penalty coefficient.
    pub lambda: f64,
    pub critic_steps: usize,
    /// Generator updates.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub generator_layers: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            critic_steps: 5,
            iterations: 15_000,
            batch_size: 512,
            lr: 1e-4,
            optimizer: OptimizerKind::RmsProp { alpha: 0.99 },
            generator_layers: 3,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive (got {})", self.lambda)));
        }
        if self.critic_steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("critic_steps, batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Generator and critic with their own parameter stores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentGan {
    pub dim: usize,
    generator: Mlp,
    critic: [Linear; 3],
    gen_params: ParamStore,
    critic_params: ParamStore,
}

/// Loss of one critic step split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticTerms {
    /// `mean D(real) - mean D(fake)`.
    pub wasserstein: f64,
    pub penalty: f64,
}

/// Resumable progress of [`train_latent_gan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanState {
    pub iteration: usize,
    pub critic_opt: Optimizer,
    pub gen_opt: Optimizer,
    /// Wasserstein estimate of the last critic step of every iteration.
    pub wasserstein: Vec<f64>,
    pub generator_loss: Vec<f64>,
}

impl GanState {
    pub fn new(gan: &LatentGan, cfg: &GanConfig) -> Self {
        Self {
            iteration: 0,
            critic_opt: Optimizer::new(&gan.critic_params, cfg.optimizer, cfg.lr),
            gen_opt: Optimizer::new(&gan.gen_params, cfg.optimizer, cfg.lr),
            wasserstein: Vec::new(),
            generator_loss: Vec::new(),
        }
    }
}

/// `batch x dim` standard-normal noise.
pub fn sample_noise(batch: usize, dim: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_simple_fn((batch, dim), || rng.sample(StandardNormal))
}

fn leaky_slope_mask(z: &Mat) -> Mat {
    z.mapv(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE })
}

impl LatentGan {
    /// Generator with `layers` hidden layers of width `dim`; the critic's
    /// hidden layers also have width `dim`.
    pub fn new(dim: usize, layers: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_shape(dim, dim, layers, true, rng)
    }

    /// Like [`LatentGan::new`] with hidden layers of width `width`, and layer
    /// normalization in the generator only when `layer_norm` is set. Very
    /// small latents need both: normalizing an affine image of 2D noise
    /// discards most of the noise radius.
    pub fn with_shape(dim: usize, width: usize, layers: usize, layer_norm: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim == 0 || width == 0 {
            return Err(Error::Config("latent dimension and width must be positive".into()));
        }
        let mut gen_params = ParamStore::new();
        let generator = Mlp::new(&mut gen_params, "gen", dim, &vec![width; layers], dim, layer_norm, rng);
        let mut critic_params = ParamStore::new();
        let critic = [
            Linear::new(&mut critic_params, "critic.0", dim, width, true, rng),
            Linear::new(&mut critic_params, "critic.1", width, width, true, rng),
            Linear::new(&mut critic_params, "critic.2", width, 1, true, rng),
        ];
        Ok(Self {
            dim,
            generator,
            critic,
            gen_params,
            critic_params,
        })
    }

    /// Builds a model whose width matches `model`'s latent codes.
    pub fn for_model<M: SequenceModel + ?Sized>(model: &M, cfg: &GanConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(model.latent_dim(), cfg.generator_layers, rng)
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.gen_params
    }

    pub fn generator_params_mut(&mut self) -> &mut ParamStore {
        &mut self.gen_params
    }

    /// Generator and critic stores together.
    pub fn stores_mut(&mut self) -> [&mut ParamStore; 2] {
        [&mut self.gen_params, &mut self.critic_params]
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic_params
    }

    pub fn critic_params_mut(&mut self) -> &mut ParamStore {
        &mut self.critic_params
    }

    pub fn critic_layers(&self) -> &[Linear; 3] {
        &self.critic
    }

    fn check_dim(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.dim {
            return Err(Error::Config(format!(
                "expected {} latent columns, got {}",
                self.dim,
                m.ncols()
            )));
        }
        Ok(())
    }

    pub fn generate(&self, g: &mut Graph, z: Var) -> Var {
        self.generator.forward(g, &self.gen_params, z)
    }

    /// Generator output for a noise matrix.
    pub fn generate_latents(&self, z: &Mat) -> Result<Mat> {
        self.check_dim(z)?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.generate(&mut g, zv);
        Ok(g.value(out).clone())
    }

    /// Critic scores, `B x 1`.
    pub fn critic(&self, g: &mut Graph, u: Var) -> Var {
        let [l0, l1, l2] = &self.critic;
        let a = l0.forward(g, &self.critic_params, u);
        let a = g.leaky_relu(a, LEAKY_SLOPE);
        let a = l1.forward(g, &self.critic_params, a);
        let a = g.leaky_relu(a, LEAKY_SLOPE);
        l2.forward(g, &self.critic_params, a)
    }

    /// Row-wise gradient of the critic with respect to its input, built from
    /// the transposed weights so it is differentiable in the critic weights.
    pub fn critic_input_gradient(&self, g: &mut Graph, u: &Mat) -> Var {
        let [l0, l1, l2] = &self.critic;
        let p = &self.critic_params;
        let (w0, w1) = (p.get(l0.w), p.get(l1.w));
        let mut z0 = u.dot(w0);
        if let Some(b) = l0.b {
            z0 += p.get(b);
        }
        let a0 = z0.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        let mut z1 = a0.dot(w1);
        if let Some(b) = l1.b {
            z1 += p.get(b);
        }
        let (d0, d1) = (g.constant(leaky_slope_mask(&z0)), g.constant(leaky_slope_mask(&z1)));
        let ones = g.constant(Mat::ones((u.nrows(), 1)));
        let w0v = g.param(p, l0.w);
        let w1v = g.param(p, l1.w);
        let w2v = g.param(p, l2.w);
        let w2t = g.transpose(w2v);
        let rows = g.matmul(ones, w2t);
        let g1 = g.mul(d1, rows);
        let w1t = g.transpose(w1v);
        let back1 = g.matmul(g1, w1t);
        let g0 = g.mul(d0, back1);
        let w0t = g.transpose(w0v);
        g.matmul(g0, w0t)
    }

    /// `lambda * mean((|grad_u D(u)| - 1)^2)` at the given points.
    pub fn gradient_penalty(&self, g: &mut Graph, u: &Mat, lambda: f64) -> Var {
        let grad = self.critic_input_gradient(g, u);
        let sq = g.square(grad);
        let ss = g.row_sum(sq);
        let ss = g.add_scalar(ss, 1e-12);
        let norm = g.sqrt(ss);
        let dev = g.add_scalar(norm, -1.0);
        let dev = g.square(dev);
        let m = g.mean(dev);
        g.scale(m, lambda)
    }

    /// Euclidean norms of the critic's input gradient at each row of `u`.
    pub fn critic_gradient_norms(&self, u: &Mat) -> Vec<f64> {
        let mut g = Graph::new();
        let grad = self.critic_input_gradient(&mut g, u);
        g.value(grad).rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
    }

    /// `mean D(a) - mean D(b)` under the current critic.
    pub fn wasserstein_estimate(&self, a: &Mat, b: &Mat) -> f64 {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let (da, db) = (self.critic(&mut g, av), self.critic(&mut g, bv));
        let (ma, mb) = (g.mean(da), g.mean(db));
        g.scalar(ma) - g.scalar(mb)
    }

    /// Critic objective `-(mean D(real) - mean D(fake)) + penalty`, where the
    /// penalty is evaluated at one uniform interpolate per real/fake pair.
    pub fn critic_loss(
        &self,
        g: &mut Graph,
        real: &Mat,
        fake: &Mat,
        lambda: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, CriticTerms)> {
        if real.dim() != fake.dim() {
            return Err(Error::Config(format!(
                "real and fake batches differ: {:?} vs {:?}",
                real.dim(),
                fake.dim()
            )));
        }
        self.check_dim(real)?;
        let eps: Vec<f64> = (0..real.nrows()).map(|_| rng.random::<f64>()).collect();
        let mut u = fake.clone();
        for (r, mut row) in u.rows_mut().into_iter().enumerate() {
            row.zip_mut_with(&real.row(r), |f, &x| *f = eps[r] * x + (1.0 - eps[r]) * *f);
        }
        let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
        let (dr, df) = (self.critic(g, rv), self.critic(g, fv));
        let (mr, mf) = (g.mean(dr), g.mean(df));
        let w = g.sub(mr, mf);
        let penalty = self.gradient_penalty(g, &u, lambda);
        let neg = g.scale(w, -1.0);
        let loss = g.add(neg, penalty);
        let terms = CriticTerms {
            wasserstein: g.scalar(w),
            penalty: g.scalar(penalty),
        };
        Ok((loss, terms))
    }

    /// `-mean D(G(z))`.
    pub fn generator_loss(&self, g: &mut Graph, z: &Mat) -> Result<Var> {
        self.check_dim(z)?;
        let zv = g.constant(z.clone());
        let fake = self.generate(g, zv);
        let d = self.critic(g, fake);
        let m = g.mean(d);
        Ok(g.scale(m, -1.0))
    }
}

fn sample_rows(data: &Mat, n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.nrows())).collect();
    data.select(Axis(0), &idx)
}

/// Trains on precomputed real latents until `state.iteration == cfg.iterations`.
///
/// Iteration `i` draws everything from stream `i` of `seed`, so a saved state
/// resumes exactly. A non-finite loss stops with [`Error::Training`] before
/// the offending update; `on_iteration` runs after every generator step.
pub fn train_latent_gan<F>(
    gan: &mut LatentGan,
    real: &Mat,
    cfg: &GanConfig,
    seed: u64,
    state: &mut GanState,
    mut on_iteration: F,
) -> Result<()>
where
    F: FnMut(&LatentGan, &GanState) -> Result<()>,
{
    cfg.validate()?;
    gan.check_dim(real)?;
    if real.nrows() == 0 {
        return Err(Error::Data("no real latents to train on".into()));
    }
    let b = cfg.batch_size.min(real.nrows());
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let mut rng = stream_rng(seed, it as u64);
        let mut wasserstein = 0.0;
        for _ in 0..cfg.critic_steps {
            let x = sample_rows(real, b, &mut rng);
            let z = sample_noise(b, gan.dim, &mut rng);
            let fake = gan.generate_latents(&z)?;
            let mut g = Graph::new();
            let (loss, terms) = gan.critic_loss(&mut g, &x, &fake, cfg.lambda, &mut rng)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::Training(format!("non-finite critic loss at iteration {it}")));
            }
            let grads = g.backward(loss);
            state.critic_opt.step(&mut gan.critic_params, &grads);
            wasserstein = terms.wasserstein;
        }
        let z = sample_noise(b, gan.dim, &mut rng);
        let mut g = Graph::new();
        let loss = gan.generator_loss(&mut g, &z)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite generator loss at iteration {it}")));
        }
        let grads = g.backward(loss);
        state.gen_opt.step(&mut gan.gen_params, &grads);
        state.wasserstein.push(wasserstein);
        state.generator_loss.push(value);
        state.iteration += 1;
        if state.iteration % 100 == 0 {
            log::debug!("gan iteration {} wasserstein {:.5}", state.iteration, wasserstein);
        }
        on_iteration(gan, state)?;
    }
    Ok(())
}

/// Encodes the training set with the frozen autoencoder and trains the GAN on
/// its latent codes. The autoencoder's parameters are checked to be unchanged.
pub fn train_wgan<M, F>(
    model: &M,
    data: &Dataset,
    gan: &mut LatentGan,
    cfg: &GanConfig,
    seed: u64,
    state: &mut GanState,
    on_iteration: F,
) -> Result<()>
where
    M: SequenceModel + ?Sized,
    F: FnMut(&LatentGan, &GanState) -> Result<()>,
{
    if gan.dim != model.latent_dim() {
        return Err(Error::Config(format!(
            "GAN width {} does not match the autoencoder's latent width {}",
            gan.dim,
            model.latent_dim()
        )));
    }
    let before = model.params().digest();
    let refs: Vec<&Instance> = data.instances.iter().collect();
    let real = encode_instances(model, &refs, 256);
    train_latent_gan(gan, &real, cfg, seed, state, on_iteration)?;
    if model.params().digest() != before {
        return Err(Error::Training("autoencoder parameters changed during GAN training".into()));
    }
    Ok(())
}

/// Samples `count` synthetic instances: noise, generator, then the
/// autoencoder's decoder. Chunk `c` uses streams `2c` and `2c + 1` of `seed`.
pub fn generate_dataset<M: SequenceModel + ?Sized>(
    gan: &LatentGan,
    model: &M,
    schema: &crate::data::Schema,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    const CHUNK: usize = 256;
    if gan.dim != model.latent_dim() {
        return Err(Error::Config("GAN and autoencoder widths differ".into()));
    }
    let mut instances = Vec::with_capacity(count);
    let mut done = 0;
    let mut c = 0u64;
    while done < count {
        let n = CHUNK.min(count - done);
        let z = sample_noise(n, gan.dim, &mut stream_rng(seed, 2 * c));
        let latents = gan.generate_latents(&z)?;
        instances.extend(model.decode(&latents, &mut stream_rng(seed, 2 * c + 1))?);
        done += n;
        c += 1;
    }
    for inst in &instances {
        crate::data::instance::check_instance(inst, schema)?;
    }
    Dataset::new(schema.clone(), Split::Synthetic, instances)
}

/// First `n` rows, or all of them.
pub fn head_rows(m: &Mat, n: usize) -> Mat {
    m.slice(s![..n.min(m.nrows()), ..]).to_owned()
}
