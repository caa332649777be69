//! Interface shared by the two sequence autoencoders, plus the loss and
//! sampling helpers they have in common.

use ndarray::{s, Array1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::batch::Batch;
use crate::data::{FeatureSlot, Instance};
use crate::error::Result;

/// Random stream `stream` of master seed `seed`. Streams are independent and
/// fully determined by the pair, so any epoch or iteration can be replayed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A sequence autoencoder whose latent codes have a fixed width.
pub trait SequenceModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn latent_dim(&self) -> usize;

    /// Scalar training loss of one batch.
    fn batch_loss(&self, g: &mut Graph, batch: &Batch, rng: &mut ChaCha8Rng) -> Var;

    /// Latent codes of a batch, `B x latent_dim`.
    fn encode_batch(&self, g: &mut Graph, batch: &Batch) -> Var;

    /// Decodes latent rows into encoded instances.
    fn decode(&self, latents: &Mat, rng: &mut ChaCha8Rng) -> Result<Vec<Instance>>;

    fn layout(&self) -> &crate::data::Layout;
}

/// Encodes instances in chunks, returning one latent row per instance.
pub fn encode_instances<M: SequenceModel + ?Sized>(model: &M, instances: &[&Instance], chunk: usize) -> Mat {
    let mut out = Mat::zeros((instances.len(), model.latent_dim()));
    let mut start = 0;
    for part in instances.chunks(chunk.max(1)) {
        let batch = Batch::new(part, model.layout());
        let mut g = Graph::new();
        let r = model.encode_batch(&mut g, &batch);
        out.slice_mut(s![start..start + part.len(), ..]).assign(g.value(r));
        start += part.len();
    }
    out
}

/// Weighted reconstruction loss over one block of encoded columns: squared
/// error on continuous features, cross-entropy on categorical ones.
/// `weight` is `B x F`, one entry per feature.
pub(crate) fn feature_loss(g: &mut Graph, pred: Var, target: &Mat, weight: &Mat, slots: &[FeatureSlot]) -> Var {
    let (b, width) = target.dim();
    let mut w_cont = Mat::zeros((b, width));
    let mut w_cat = Mat::zeros((b, width));
    for (j, slot) in slots.iter().enumerate() {
        let col = weight.column(j);
        let dst = if slot.categorical { &mut w_cat } else { &mut w_cont };
        for c in slot.start..slot.end() {
            dst.column_mut(c).assign(&col);
        }
    }
    let se = g.sq_err(pred, target.clone(), w_cont);
    if slots.iter().any(|s| s.categorical) {
        let ce = g.cross_entropy(pred, target.clone(), w_cat);
        g.add(se, ce)
    } else {
        se
    }
}

/// Replaces each categorical group with the one-hot of its argmax.
pub(crate) fn harden(values: &mut Mat, slots: &[FeatureSlot]) {
    for slot in slots.iter().filter(|s| s.categorical) {
        for mut row in values.rows_mut() {
            let mut cells = row.slice_mut(s![slot.start..slot.end()]);
            let best = argmax(cells.iter().copied());
            cells.fill(0.0);
            cells[best] = 1.0;
        }
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Position of the length feature in the encoded global vector.
pub(crate) fn length_column(layout: &crate::data::Layout) -> Option<usize> {
    layout
        .global
        .iter()
        .find(|s| s.name == crate::data::schema::LENGTH_FEATURE)
        .map(|s| s.start)
}

/// Clamps a decoded global vector so the length entry decodes to `l` exactly.
pub(crate) fn pin_length(y: &mut Array1<f64>, col: Option<usize>, l: usize, max_len: usize) {
    if let Some(c) = col {
        y[c] = l as f64 / max_len as f64;
    }
}
