//! Small recurrent classifiers and step-wise regressors used by the metrics.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::model::stream_rng;
use crate::nn::{GruStack, Linear, LstmStack, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub cell: Cell,
    pub layers: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
enum Stack {
    Gru(GruStack),
    Lstm(LstmStack),
}

/// Recurrent stack plus an affine head with a sigmoid output.
#[derive(Debug, Clone)]
pub struct SeqNet {
    stack: Stack,
    head: Linear,
    params: ParamStore,
}

/// Zero-padded step inputs of a batch and the `B x T` validity mask.
struct Padded {
    steps: Vec<Mat>,
    active: Mat,
}

fn pad(seqs: &[&Mat]) -> Padded {
    let b = seqs.len();
    let t = seqs.iter().map(|s| s.nrows()).max().unwrap_or(0);
    let f = seqs.first().map_or(0, |s| s.ncols());
    let mut steps = vec![Mat::zeros((b, f)); t];
    let mut active = Mat::zeros((b, t));
    for (r, s) in seqs.iter().enumerate() {
        for (i, row) in s.rows().into_iter().enumerate() {
            steps[i].row_mut(r).assign(&row);
            active[[r, i]] = 1.0;
        }
    }
    Padded { steps, active }
}

impl SeqNet {
    pub fn new(in_dim: usize, out_dim: usize, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let stack = match cfg.cell {
            Cell::Gru => Stack::Gru(GruStack::new(&mut params, "rnn", in_dim, cfg.hidden, cfg.layers, rng)),
            Cell::Lstm => Stack::Lstm(LstmStack::new(&mut params, "rnn", in_dim, cfg.hidden, cfg.layers, rng)),
        };
        let head = Linear::new(&mut params, "head", cfg.hidden, out_dim, true, rng);
        Self { stack, head, params }
    }

    /// Top-layer state after every step; padded rows keep their last state.
    fn run(&self, g: &mut Graph, p: &Padded) -> Vec<Var> {
        let b = p.active.nrows();
        let mut tops = Vec::with_capacity(p.steps.len());
        match &self.stack {
            Stack::Gru(s) => {
                let mut h = s.zero_state(g, b);
                for (i, x) in p.steps.iter().enumerate() {
                    let xv = g.constant(x.clone());
                    let act = g.constant(p.active.column(i).to_owned().insert_axis(ndarray::Axis(1)));
                    h = s.step(g, &self.params, xv, &h, Some(act));
                    tops.push(*h.last().expect("at least one layer"));
                }
            }
            Stack::Lstm(s) => {
                let mut st = s.zero_state(g, b);
                for (i, x) in p.steps.iter().enumerate() {
                    let xv = g.constant(x.clone());
                    let act = g.constant(p.active.column(i).to_owned().insert_axis(ndarray::Axis(1)));
                    st = s.step(g, &self.params, xv, &st, Some(act));
                    tops.push(st.last().expect("at least one layer").h);
                }
            }
        }
        tops
    }

    fn final_prob(&self, g: &mut Graph, p: &Padded) -> Var {
        let tops = self.run(g, p);
        let last = *tops.last().expect("non-empty sequences");
        let a = self.head.forward(g, &self.params, last);
        g.sigmoid(a)
    }

    fn step_probs(&self, g: &mut Graph, p: &Padded) -> Vec<Var> {
        self.run(g, p)
            .into_iter()
            .map(|h| {
                let a = self.head.forward(g, &self.params, h);
                g.sigmoid(a)
            })
            .collect()
    }

    fn train<F>(&mut self, n: usize, cfg: &NetConfig, seed: u64, mut loss_of: F)
    where
        F: FnMut(&SeqNet, &mut Graph, &[usize]) -> Var,
    {
        let mut opt = Optimizer::adam(&self.params, cfg.lr, 0.9, 0.999);
        for epoch in 0..cfg.epochs {
            let mut rng = stream_rng(seed, epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut g = Graph::new();
                let loss = loss_of(self, &mut g, chunk);
                if !g.scalar(loss).is_finite() {
                    log::warn!("non-finite loss in evaluation network; stopping early");
                    return;
                }
                let grads = g.backward(loss);
                opt.step(&mut self.params, &grads);
            }
        }
    }

    /// Binary classifier on whole sequences, read out at the last valid step.
    pub fn fit_classifier(seqs: &[Mat], labels: &[f64], cfg: &NetConfig, seed: u64) -> Self {
        let in_dim = seqs.first().map_or(0, |s| s.ncols());
        let mut net = SeqNet::new(in_dim, 1, cfg, &mut stream_rng(seed, u64::MAX));
        net.train(seqs.len(), cfg, seed, |net, g, idx| {
            let refs: Vec<&Mat> = idx.iter().map(|&i| &seqs[i]).collect();
            let p = pad(&refs);
            let prob = net.final_prob(g, &p);
            let target = Mat::from_shape_fn((idx.len(), 1), |(r, _)| labels[idx[r]]);
            let w = Mat::from_elem((idx.len(), 1), 1.0 / idx.len() as f64);
            g.bce(prob, target, w)
        });
        net
    }

    pub fn predict_proba(&self, seqs: &[Mat]) -> Vec<f64> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(256) {
            let refs: Vec<&Mat> = part.iter().collect();
            let p = pad(&refs);
            let mut g = Graph::new();
            let prob = self.final_prob(&mut g, &p);
            out.extend(g.value(prob).column(0).iter().copied());
        }
        out
    }

    /// Step-wise regressor with outputs in `(0, 1)`, trained on squared error
    /// over valid steps. `targets[i]` has one row per step of `inputs[i]`.
    pub fn fit_regressor(inputs: &[Mat], targets: &[Mat], cfg: &NetConfig, seed: u64) -> Self {
        let in_dim = inputs.first().map_or(0, |s| s.ncols());
        let out_dim = targets.first().map_or(0, |s| s.ncols());
        let mut net = SeqNet::new(in_dim, out_dim, cfg, &mut stream_rng(seed, u64::MAX));
        net.train(inputs.len(), cfg, seed, |net, g, idx| {
            let xs: Vec<&Mat> = idx.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<&Mat> = idx.iter().map(|&i| &targets[i]).collect();
            let (px, py) = (pad(&xs), pad(&ys));
            let outs = net.step_probs(g, &px);
            let count = px.active.sum().max(1.0);
            let terms: Vec<Var> = outs
                .iter()
                .enumerate()
                .map(|(i, &o)| {
                    let w = Mat::from_shape_fn(py.steps[i].dim(), |(r, _)| px.active[[r, i]] / count);
                    g.sq_err(o, py.steps[i].clone(), w)
                })
                .collect();
            let all = g.concat(&terms);
            g.sum(all)
        });
        net
    }

    /// Step-wise predictions, one matrix per input sequence.
    pub fn predict_steps(&self, inputs: &[Mat]) -> Vec<Mat> {
        let mut out = Vec::with_capacity(inputs.len());
        for part in inputs.chunks(256) {
            let refs: Vec<&Mat> = part.iter().collect();
            let p = pad(&refs);
            let mut g = Graph::new();
            let outs = self.step_probs(&mut g, &p);
            for (r, s) in part.iter().enumerate() {
                let w = g.value(outs[0]).ncols();
                out.push(Mat::from_shape_fn((s.nrows(), w), |(i, c)| g.value(outs[i])[[r, c]]));
            }
        }
        out
    }
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = Array1::<f64>::zeros(scores.len());
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..labels.len()).filter(|&k| labels[k] > 0.5).map(|k| ranks[k]).sum();
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(cell: Cell) -> NetConfig {
        NetConfig {
            cell,
            layers: 2,
            hidden: 8,
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
        }
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = stream_rng(0, 0);
        let scores: Vec<f64> = (0..200).map(|_| (rng.random::<f64>() * 10.0).floor()).collect();
        let labels: Vec<f64> = (0..200).map(|_| f64::from(rng.random::<bool>())).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((auc(&scores, &labels).unwrap() - num / den).abs() < 1e-12);
        assert_eq!(auc(&[0.1, 0.2], &[1.0, 1.0]), None);
        assert_eq!(auc(&[0.1, 0.9], &[0.0, 1.0]), Some(1.0));
    }

    #[test]
    fn classifiers_separate_an_easy_toy() {
        for cell in [Cell::Gru, Cell::Lstm] {
            let mut rng = stream_rng(1, 0);
            let mut seqs = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..200 {
                let y = f64::from(rng.random::<bool>());
                let l = rng.random_range(2..6);
                seqs.push(Mat::from_shape_fn((l, 2), |_| 0.3 * y + 0.7 * rng.random::<f64>()));
                labels.push(y);
            }
            let net = SeqNet::fit_classifier(&seqs, &labels, &cfg(cell), 3);
            let p = net.predict_proba(&seqs);
            assert!(auc(&p, &labels).unwrap() > 0.9);
        }
    }

    #[test]
    fn regressor_learns_a_copy_task() {
        let mut rng = stream_rng(2, 0);
        let xs: Vec<Mat> = (0..100).map(|_| Mat::from_shape_fn((5, 1), |_| rng.random::<f64>())).collect();
        let net = SeqNet::fit_regressor(&xs, &xs, &cfg(Cell::Lstm), 0);
        let pred = net.predict_steps(&xs);
        let mae: f64 = pred.iter().zip(&xs).map(|(p, x)| (p - x).mapv(f64::abs).mean().unwrap()).sum::<f64>() / 100.0;
        assert!(mae < 0.08, "{mae}");
    }
}
