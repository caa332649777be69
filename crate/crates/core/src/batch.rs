//! Step-major, zero-padded batches of encoded instances.

use ndarray::s;

use crate::autograd::Mat;
use crate::data::{Instance, Layout};

/// A batch laid out step by step so recurrent stacks can consume it.
///
/// Every per-step matrix has one row per instance; rows past an instance's
/// length are zero and flagged inactive in `active`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lengths: Vec<usize>,
    /// `B x T`, 1 where the step exists.
    pub active: Mat,
    pub x: Vec<Mat>,
    pub mask: Vec<Mat>,
    pub pre: Vec<Mat>,
    pub delta: Vec<Mat>,
    pub t: Vec<Mat>,
    pub y: Mat,
    pub global_mask: Mat,
}

impl Batch {
    pub fn new(instances: &[&Instance], layout: &Layout) -> Self {
        let b = instances.len();
        let steps = instances.iter().map(|i| i.len()).max().unwrap_or(0);
        let owner = layout.dynamic_column_owner();
        let (d_x, k) = (layout.d_x, layout.k());
        let mut x = vec![Mat::zeros((b, d_x)); steps];
        let mut mask = vec![Mat::zeros((b, k)); steps];
        let mut pre = vec![Mat::zeros((b, d_x)); steps];
        let mut delta = vec![Mat::zeros((b, k)); steps];
        let mut t = vec![Mat::zeros((b, 1)); steps];
        let mut active = Mat::zeros((b, steps));
        let mut y = Mat::zeros((b, layout.d_y));
        let mut global_mask = Mat::zeros((b, layout.n_global()));
        for (r, inst) in instances.iter().enumerate() {
            let p = inst.last_observations(&owner);
            let dl = inst.time_lags();
            for i in 0..inst.len() {
                x[i].row_mut(r).assign(&inst.x.row(i));
                mask[i].row_mut(r).assign(&inst.mask.row(i));
                pre[i].row_mut(r).assign(&p.row(i));
                delta[i].row_mut(r).assign(&dl.row(i));
                t[i][[r, 0]] = inst.t[i];
                active[[r, i]] = 1.0;
            }
            y.row_mut(r).assign(&inst.y);
            global_mask.row_mut(r).assign(&inst.global_mask);
        }
        Self {
            lengths: instances.iter().map(|i| i.len()).collect(),
            active,
            x,
            mask,
            pre,
            delta,
            t,
            y,
            global_mask,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.x.len()
    }

    /// Column `i` of `active` as a `B x 1` matrix.
    pub fn active_col(&self, i: usize) -> Mat {
        self.active.slice(s![.., i..i + 1]).to_owned()
    }
}

/// Splits `0..n` into consecutive chunks of `size` following `order`.
pub fn chunks(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pads_and_flags_inactive_steps() {
        let ds = crate::testutil::tiny_incomplete();
        let layout = ds.schema.layout();
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let b = Batch::new(&refs, &layout);
        assert_eq!(b.steps(), 3);
        assert_eq!(b.active, array![[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!(b.x[2].row(1).iter().all(|&v| v == 0.0));
        assert_eq!(b.delta[0].row(0).to_vec(), vec![0.0, 0.0]);
    }
}
