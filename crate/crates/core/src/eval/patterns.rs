//! Missing-pattern diagnostics and low-dimensional projections.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Axis;

use crate::autograd::Mat;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// One row per instance (the first `sample`, or all): the fraction of steps
/// at which each dynamic feature is missing.
pub fn missing_rate_vectors(ds: &Dataset, sample: Option<usize>) -> Mat {
    let k = ds.schema.layout().k();
    let n = sample.map_or(ds.len(), |s| s.min(ds.len()));
    let mut out = Mat::zeros((n, k));
    for (r, inst) in ds.instances.iter().take(n).enumerate() {
        let l = inst.len() as f64;
        for j in 0..k {
            out[[r, j]] = inst.mask.column(j).iter().filter(|&&m| m == 0.0).count() as f64 / l;
        }
    }
    out
}

/// Column-pair Pearson correlations of `v`, plus the columns with zero
/// variance (whose correlations are reported as 0, diagonal included).
pub fn pearson_matrix(v: &Mat) -> Result<(Mat, Vec<usize>)> {
    let (n, k) = v.dim();
    if n < 2 {
        return Err(Error::Eval("Pearson correlation needs at least 2 rows".into()));
    }
    let mean = v.mean_axis(Axis(0)).expect("non-empty");
    let centred = v - &mean;
    let cov = centred.t().dot(&centred);
    let sd: Vec<f64> = (0..k).map(|j| cov[[j, j]].sqrt()).collect();
    let flat: Vec<usize> = (0..k).filter(|&j| sd[j] <= 1e-12).collect();
    let corr = Mat::from_shape_fn((k, k), |(a, b)| {
        if sd[a] <= 1e-12 || sd[b] <= 1e-12 {
            0.0
        } else if a == b {
            1.0
        } else {
            (cov[[a, b]] / (sd[a] * sd[b])).clamp(-1.0, 1.0)
        }
    });
    Ok((corr, flat))
}

/// Pearson matrix of the per-instance missing rates.
pub fn pearson_missing_heatmap(ds: &Dataset) -> Result<(Mat, Vec<usize>)> {
    if ds.len() < 2 {
        return Err(Error::Eval("missing-rate heatmap needs at least 2 instances".into()));
    }
    pearson_matrix(&missing_rate_vectors(ds, None))
}

/// Pearson correlation between the off-diagonal entries of two square
/// matrices ("correlation of correlations").
pub fn matrix_similarity(a: &Mat, b: &Mat) -> f64 {
    let k = a.nrows();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            xs.push(a[[i, j]]);
            ys.push(b[[i, j]]);
        }
    }
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = Mat::from_shape_fn((n, 2), |(r, c)| if c == 0 { xs[r] } else { ys[r] });
    pearson_matrix(&m).map(|(c, _)| c[[0, 1]]).unwrap_or(0.0)
}

/// Principal axes of a set of row vectors.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: ndarray::Array1<f64>,
    /// `d x dims`, columns sorted by decreasing variance.
    pub components: Mat,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(v: &Mat, dims: usize) -> Result<Self> {
        let (n, d) = v.dim();
        if n < dims.max(1) {
            return Err(Error::Eval(format!("PCA to {dims} dimensions needs at least {dims} rows")));
        }
        let mean = v.mean_axis(Axis(0)).expect("non-empty");
        let centred = v - &mean;
        let cov = centred.t().dot(&centred) / n as f64;
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_standard_layout().as_slice().expect("contiguous")));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let dims = dims.min(d);
        let mut components = Mat::zeros((d, dims));
        let mut variances = Vec::with_capacity(dims);
        for (c, &i) in order.iter().take(dims).enumerate() {
            let col = eig.eigenvectors.column(i);
            // Sign convention: largest-magnitude loading is positive.
            let pivot = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                components[[r, c]] = sign * col[r];
            }
            variances.push(eig.eigenvalues[i].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    /// Centred coordinates; axes with no variance give 0.
    pub fn transform(&self, v: &Mat) -> Mat {
        let mut out = (v - &self.mean).dot(&self.components);
        for (c, &var) in self.variances.iter().enumerate() {
            if var <= 1e-12 {
                out.column_mut(c).fill(0.0);
            }
        }
        out
    }
}

/// Fits on `v` and returns its projection.
pub fn pca_project(v: &Mat, dims: usize) -> Result<Mat> {
    Ok(Pca::fit(v, dims)?.transform(v))
}

/// Sequences flattened over time, one row per instance: the first `sample`
/// instances of `ds`, padded with zeros to the longest of them.
pub fn flatten_sequences(ds: &Dataset, sample: usize) -> Mat {
    let insts: Vec<_> = ds.instances.iter().take(sample).collect();
    let l = insts.iter().map(|i| i.len()).max().unwrap_or(0);
    let d = ds.schema.layout().d_x;
    let mut out = Mat::zeros((insts.len(), l * d));
    for (r, inst) in insts.iter().enumerate() {
        for ((i, c), &v) in inst.x.indexed_iter() {
            out[[r, i * d + c]] = v;
        }
    }
    out
}
