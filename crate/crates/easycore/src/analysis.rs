//! Geometric and statistical analyses: decision-boundary rasters and their
//! complexity, PCA variance profiles of penultimate features, hardness vs
//! robustness curves, rank correlation, the input/weight gradient-norm
//! bound check, and score histograms.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Decision boundary raster
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.nx < 2 || self.ny < 2 {
            issues.push(format!(
                "grid resolution must be at least 2 per axis, got {}x{}",
                self.nx, self.ny
            ));
        }
        if !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            issues.push("grid ranges must be nonempty".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }

    /// Grid over the data bounding box padded by `pad_frac` on each side.
    pub fn covering(data: &Dataset, pad_frac: f64, nx: usize, ny: usize) -> Result<GridSpec> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.dim() != 2 {
            return Err(Error::shape("grid", &[data.n(), data.dim()], &[0, 2]));
        }
        let bounds = data.bounding_box();
        let pad = |lo: f64, hi: f64| {
            let span = (hi - lo).max(f64::MIN_POSITIVE);
            (lo - pad_frac * span, hi + pad_frac * span)
        };
        let (x_min, x_max) = pad(bounds[0].0, bounds[0].1);
        let (y_min, y_max) = pad(bounds[1].0, bounds[1].1);
        let grid = GridSpec {
            x_min,
            x_max,
            nx,
            y_min,
            y_max,
            ny,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Center of cell (ix, iy).
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let cx = self.x_min + (ix as f64 + 0.5) * (self.x_max - self.x_min) / self.nx as f64;
        let cy = self.y_min + (iy as f64 + 0.5) * (self.y_max - self.y_min) / self.ny as f64;
        (cx, cy)
    }
}

/// Predicted class per grid cell; rows indexed by iy, columns by ix.
#[derive(Debug, Clone)]
pub struct BoundaryRaster {
    pub grid: GridSpec,
    pub classes: Vec<usize>,
}

impl BoundaryRaster {
    pub fn class_at(&self, ix: usize, iy: usize) -> usize {
        self.classes[iy * self.grid.nx + ix]
    }
}

/// Rasterize the model's predicted class at every cell center. Rows are
/// evaluated in parallel and merged by index.
pub fn boundary_raster(model: &Model, grid: &GridSpec) -> Result<BoundaryRaster> {
    grid.validate()?;
    if model.config().input_dim != 2 {
        return Err(Error::shape(
            "boundary_raster",
            &[model.config().input_dim],
            &[2],
        ));
    }
    let rows: Vec<usize> = (0..grid.ny).collect();
    let classes_by_row: Vec<Vec<usize>> = rows
        .par_iter()
        .map(|&iy| -> Result<Vec<usize>> {
            let mut values = Vec::with_capacity(grid.nx * 2);
            for ix in 0..grid.nx {
                let (cx, cy) = grid.cell_center(ix, iy);
                values.push(cx);
                values.push(cy);
            }
            let batch = Tensor::matrix(grid.nx, 2, values)?;
            model.predict(&batch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundaryRaster {
        grid: *grid,
        classes: classes_by_row.concat(),
    })
}

/// Number of 4-neighbor cell pairs with differing predicted classes.
pub fn boundary_complexity(raster: &BoundaryRaster) -> usize {
    let (nx, ny) = (raster.grid.nx, raster.grid.ny);
    let mut edges = 0;
    for iy in 0..ny {
        for ix in 0..nx {
            let c = raster.class_at(ix, iy);
            if ix + 1 < nx && raster.class_at(ix + 1, iy) != c {
                edges += 1;
            }
            if iy + 1 < ny && raster.class_at(ix, iy + 1) != c {
                edges += 1;
            }
        }
    }
    edges
}

pub fn write_raster_csv<P: AsRef<Path>>(path: P, raster: &BoundaryRaster) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "x,y,class")?;
    for iy in 0..raster.grid.ny {
        for ix in 0..raster.grid.nx {
            let (cx, cy) = raster.grid.cell_center(ix, iy);
            writeln!(w, "{cx},{cy},{}", raster.class_at(ix, iy))?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

fn centered_matrix(features: &Tensor) -> Result<DMatrix<f64>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::shape("pca", shape, &[0, 0]));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut m = DMatrix::from_row_slice(n, d, features.values());
    for c in 0..d {
        let mean = m.column(c).sum() / n as f64;
        for r in 0..n {
            m[(r, c)] -= mean;
        }
    }
    Ok(m)
}

/// Descending eigenvalues of the feature covariance, computed through the
/// singular values of the centered matrix.
fn covariance_eigenvalues(features: &Tensor) -> Result<Vec<f64>> {
    let m = centered_matrix(features)?;
    let n = m.nrows();
    let svd = m.svd(false, false);
    let mut eigen: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s * s / (n as f64 - 1.0))
        .collect();
    eigen.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(eigen)
}

/// Minimum number of principal components whose cumulative explained
/// variance reaches `variance_target`.
pub fn pca_kappa(features: &Tensor, variance_target: f64) -> Result<usize> {
    if features.shape()[0] < 2 {
        return Err(Error::config(format!(
            "pca_kappa needs at least 2 samples, got {}",
            features.shape()[0]
        )));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::config(format!(
            "variance target must be in (0, 1], got {variance_target}"
        )));
    }
    let eigen = covariance_eigenvalues(features)?;
    let total: f64 = eigen.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroVariance {
            what: "pca_kappa features",
        });
    }
    let mut cumulative = 0.0;
    for (k, lambda) in eigen.iter().enumerate() {
        cumulative += lambda;
        if cumulative / total >= variance_target {
            return Ok(k + 1);
        }
    }
    Ok(eigen.len())
}

#[derive(Debug, Clone)]
pub struct Projection2d {
    /// [n, 2] coordinates in the top-2 principal axes.
    pub coords: Vec<(f64, f64)>,
    /// Per-class centroids in the projected space.
    pub centroids: Vec<(f64, f64)>,
}

/// Project features onto the top two principal axes and compute per-class
/// centroids. Axis signs are fixed so the largest-magnitude loading of each
/// axis is positive, which makes the projection deterministic.
pub fn pca_project2d(
    features: &Tensor,
    labels: &[usize],
    class_count: usize,
) -> Result<Projection2d> {
    let n = features.shape()[0];
    if n < 3 {
        return Err(Error::config(format!(
            "pca_project2d needs at least 3 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::shape("pca_project2d", features.shape(), &[labels.len()]));
    }
    let m = centered_matrix(features)?;
    let d = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut axes: Vec<(f64, Vec<f64>)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, v_t.row(i).iter().copied().collect()))
        .collect();
    axes.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite singular values"));
    if axes.is_empty() || axes[0].0 <= 0.0 {
        return Err(Error::ZeroVariance {
            what: "pca_project2d features",
        });
    }
    let mut principal: Vec<Vec<f64>> = Vec::with_capacity(2);
    for i in 0..2 {
        let mut axis = if i < axes.len() {
            axes[i].1.clone()
        } else {
            vec![0.0; d]
        };
        // Deterministic sign: largest |loading| made positive.
        let lead = axis
            .iter()
            .cloned()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        principal.push(axis);
    }
    let mut coords = Vec::with_capacity(n);
    for r in 0..n {
        let row = m.row(r);
        let p1: f64 = row.iter().zip(&principal[0]).map(|(a, b)| a * b).sum();
        let p2: f64 = row.iter().zip(&principal[1]).map(|(a, b)| a * b).sum();
        coords.push((p1, p2));
    }
    let mut centroids = vec![(0.0, 0.0); class_count];
    let mut counts = vec![0usize; class_count];
    for (&(p1, p2), &label) in coords.iter().zip(labels) {
        centroids[label].0 += p1;
        centroids[label].1 += p2;
        counts[label] += 1;
    }
    for (c, count) in centroids.iter_mut().zip(&counts) {
        if *count > 0 {
            c.0 /= *count as f64;
            c.1 /= *count as f64;
        }
    }
    Ok(Projection2d { coords, centroids })
}

pub fn write_projection_csv<P: AsRef<Path>>(
    path: P,
    ids: &[usize],
    labels: &[usize],
    projection: &Projection2d,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "id,label,pc1,pc2")?;
    for ((&id, &label), &(p1, p2)) in ids.iter().zip(labels).zip(&projection.coords) {
        writeln!(w, "{id},{label},{p1},{p2}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_centroids_csv<P: AsRef<Path>>(path: P, projection: &Projection2d) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "class,pc1,pc2")?;
    for (class, &(p1, p2)) in projection.centroids.iter().enumerate() {
        writeln!(w, "{class},{p1},{p2}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_kappa_csv<P: AsRef<Path>>(
    path: P,
    rows: &[(f64, usize, usize)],
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "target,kappa,total_dim")?;
    for &(target, kappa, total_dim) in rows {
        writeln!(w, "{target},{kappa},{total_dim}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Hardness vs robustness
// ---------------------------------------------------------------------------

/// Mean adversarial correctness over `bins` contiguous groups of the
/// ordered ids (remainder joins the last group).
pub fn hardness_accuracy_curve(
    per_sample_adv: &[bool],
    order: &[usize],
    bins: usize,
) -> Result<Vec<f64>> {
    let n = per_sample_adv.len();
    if bins < 2 || bins > n {
        return Err(Error::BinsOutOfRange { bins, min: 2, n });
    }
    if order.len() != n {
        return Err(Error::shape("hardness_accuracy_curve", &[order.len()], &[n]));
    }
    let mut seen = vec![false; n];
    for &id in order {
        if id >= n || seen[id] {
            return Err(Error::config(format!(
                "order must be a permutation covering every id; problem at id {id}"
            )));
        }
        seen[id] = true;
    }
    let base = n / bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let end = if b + 1 == bins { n } else { start + base };
        let group = &order[start..end];
        let correct = group.iter().filter(|&&id| per_sample_adv[id]).count();
        out.push(correct as f64 / group.len() as f64);
        start = end;
    }
    Ok(out)
}

pub fn write_curve_csv<P: AsRef<Path>>(path: P, curve: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "bin,accuracy")?;
    for (bin, acc) in curve.iter().enumerate() {
        writeln!(w, "{bin},{acc}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average-rank tie handling.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len();
    if n < 3 || ys.len() != n {
        return Err(Error::config(format!(
            "spearman needs two equal-length series of at least 3, got {n} and {}",
            ys.len()
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        cov += (x - mean) * (y - mean);
        var_x += (x - mean) * (x - mean);
        var_y += (y - mean) * (y - mean);
    }
    if var_x == 0.0 {
        return Err(Error::ZeroVariance { what: "spearman x" });
    }
    if var_y == 0.0 {
        return Err(Error::ZeroVariance { what: "spearman y" });
    }
    Ok(cov / (var_x * var_y).sqrt())
}

/// Spearman correlation between scores and boolean robustness outcomes
/// (1 = robust, 0 = broken).
pub fn rank_correlation(scores: &[f64], outcomes: &[bool]) -> Result<f64> {
    let ys: Vec<f64> = outcomes.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    spearman(scores, &ys)
}

// ---------------------------------------------------------------------------
// Gradient-norm bound check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Lemma1Report {
    /// Frobenius norm of the loss gradient with respect to the input batch.
    pub input_grad_norm: f64,
    /// Frobenius norm over every parameter gradient.
    pub weight_grad_norm: f64,
    /// Bound constant ||W1||_F * ||(X_b^T)+||_F / s_P.
    pub k_g: f64,
    /// Smallest singular value of P = X_b^T (X_b^T)+.
    pub s_p: f64,
    pub holds: bool,
}

/// Check input_grad_norm <= k_g * weight_grad_norm * (1 + 1e-6) on one
/// batch. The batch matrix must be full rank (smallest singular value above
/// 1e-8); for the usual batch-larger-than-dim case P is the identity and
/// s_P is 1.
pub fn lemma1_check(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Lemma1Report> {
    let shape = batch.shape();
    if shape.len() != 2 {
        return Err(Error::shape("lemma1_check", shape, &[0, 0]));
    }
    let (b, d) = (shape[0], shape[1]);
    let x = DMatrix::from_row_slice(b, d, batch.values());
    let xt = x.transpose();
    let sv = xt.clone().svd(false, false);
    let smallest = sv
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(smallest > 1e-8) {
        return Err(Error::RankDeficient { smallest });
    }
    let pinv = xt
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::config(format!("pseudo-inverse failed: {e}")))?;
    let p = &xt * &pinv;
    let p_svd = p.svd(false, false);
    let s_p = p_svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let pinv_norm = pinv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let w1_norm = model.params()[0]
        .tensor
        .values()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let k_g = w1_norm * pinv_norm / s_p;

    // Both gradients from one backward pass over the mean cross-entropy.
    let mut tape = Tape::new();
    let xv = tape.leaf_from(shape.to_vec(), batch.values().to_vec(), true);
    let pass = model.forward_pass(&mut tape, xv, true)?;
    let losses = tape.softmax_cross_entropy(pass.logits, labels)?;
    let loss = tape.mean(losses);
    tape.backward(loss)?;
    let input_grad_norm = tape
        .grad(xv)
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let weight_grad_norm = pass
        .param_vars
        .iter()
        .flat_map(|&v| tape.grad(v).iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();

    let holds = input_grad_norm <= k_g * weight_grad_norm * (1.0 + 1e-6);
    Ok(Lemma1Report {
        input_grad_norm,
        weight_grad_norm,
        k_g,
        s_p,
        holds,
    })
}

pub fn write_lemma1_csv<P: AsRef<Path>>(path: P, reports: &[Lemma1Report]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "batch,input_grad_norm,weight_grad_norm,k_g,s_p,holds")?;
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{},{},{}",
            r.input_grad_norm,
            r.weight_grad_norm,
            r.k_g,
            r.s_p,
            r.holds as u8
        )?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Histogram
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Histogram {
    /// bins + 1 edges.
    pub edges: Vec<f64>,
    /// Normalized so that sum(density * width) = 1.
    pub densities: Vec<f64>,
}

/// Equal-width histogram over [min, max]. All-equal scores degenerate to a
/// single unit-width bin of density 1.
pub fn aign_histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    let n = scores.len();
    if bins < 1 {
        return Err(Error::BinsOutOfRange { bins, min: 1, n });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(idx) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::NanScore { index: idx });
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(Histogram {
            edges: vec![min, min + 1.0],
            densities: vec![1.0],
        });
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let mut bin = ((s - min) / width) as usize;
        if bin >= bins {
            bin = bins - 1; // max lands in the last bin
        }
        counts[bin] += 1;
    }
    let edges: Vec<f64> = (0..=bins).map(|i| min + i as f64 * width).collect();
    let densities: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (n as f64 * width))
        .collect();
    Ok(Histogram { edges, densities })
}

pub fn write_histogram_csv<P: AsRef<Path>>(path: P, histogram: &Histogram) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "bin_left,bin_right,density")?;
    for (i, &density) in histogram.densities.iter().enumerate() {
        writeln!(w, "{},{},{density}", histogram.edges[i], histogram.edges[i + 1])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
