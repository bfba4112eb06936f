//! Multi-scale descriptor combination and supervised learned whitening.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::aggregation::Descriptor;
use crate::error::{AsdaError, Result};
use crate::feature::ImageTensor;
use crate::model::Model;

pub fn default_scales() -> Vec<f64> {
    vec![1.0, std::f64::consts::FRAC_1_SQRT_2, 0.5]
}

/// Describes the image at every scale, averages the descriptors and
/// renormalizes. Scales that would shrink the image below the backbone's
/// minimum input are skipped.
pub fn multiscale_descriptor(image: &ImageTensor, model: &Model, scales: &[f64]) -> Result<Descriptor> {
    let mut sum = vec![0.0; model.dim()];
    let mut used = 0;
    for &s in scales {
        let scaled = match image.rescaled(s) {
            Ok(img) if img.height().min(img.width()) >= model.backbone.min_input_side() => img,
            Ok(img) => {
                log::warn!("skipping scale {s}: {}x{} is below the backbone minimum", img.height(), img.width());
                continue;
            }
            Err(AsdaError::ImageTooSmall { height, width, .. }) => {
                log::warn!("skipping scale {s}: {height}x{width} is too small");
                continue;
            }
            Err(e) => return Err(e),
        };
        let d = model.describe_image(&scaled)?;
        for (a, b) in sum.iter_mut().zip(d.values()) {
            *a += b;
        }
        used += 1;
    }
    if used == 0 {
        return Err(AsdaError::Invalid(format!(
            "every scale in {scales:?} shrinks the {}x{} image below the minimum size",
            image.height(),
            image.width()
        )));
    }
    Ok(Descriptor::from_unnormalized(&sum))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningProjection {
    pub mean: Vec<f64>,
    /// D'×D, row-major.
    pub projection: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Eigenvalues of the intra-pair scatter raised to the floor during fitting.
    pub floored: usize,
}

/// Eigen-decomposition sorted by descending eigenvalue, each eigenvector
/// signed so its largest-magnitude entry is positive.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let n = eig.eigenvalues.len();
    let lead = |j: usize| -> usize {
        let col = eig.eigenvectors.column(j);
        (0..n)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(lead(a).cmp(&lead(b)))
    });
    let values = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let sign = if col[lead(src)] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    (values, vectors)
}

/// Fits the learned whitening: whiten the intra-pair scatter, then rotate
/// onto the leading eigenvectors of the whitened total scatter.
pub fn fit_whitening<V: AsRef<[f64]>>(pairs: &[(V, V)], all: &[V], output_dim: usize) -> Result<WhiteningProjection> {
    let dim = all
        .first()
        .map(|v| v.as_ref().len())
        .ok_or_else(|| AsdaError::InsufficientData("no descriptors to fit whitening".into()))?;
    if pairs.is_empty() {
        return Err(AsdaError::InsufficientData("no matched pairs to fit whitening".into()));
    }
    if output_dim < 1 || output_dim > dim {
        return Err(AsdaError::InvalidConfig(format!(
            "whitening output dimension {output_dim} must lie in 1..={dim}"
        )));
    }
    if all.iter().any(|v| v.as_ref().len() != dim)
        || pairs.iter().any(|(a, b)| a.as_ref().len() != dim || b.as_ref().len() != dim)
    {
        return Err(AsdaError::ShapeMismatch("whitening inputs differ in dimension".into()));
    }
    if pairs.len() < dim {
        log::warn!("fitting {dim}-d whitening from only {} pairs", pairs.len());
    }

    let mut mean = DVector::<f64>::zeros(dim);
    for v in all {
        mean += DVector::from_column_slice(v.as_ref());
    }
    mean /= all.len() as f64;

    let mut intra = DMatrix::<f64>::zeros(dim, dim);
    for (a, b) in pairs {
        let d = DVector::from_column_slice(a.as_ref()) - DVector::from_column_slice(b.as_ref());
        intra.ger(1.0, &d, &d, 1.0);
    }
    let trace = intra.trace();
    if !(trace > 0.0) {
        return Err(AsdaError::Invalid(
            "intra-pair scatter is zero; matched pairs carry no variation".into(),
        ));
    }
    let floor = 1e-10 * trace / dim as f64;
    let (lambdas, basis) = sorted_eigen(intra);
    let floored = lambdas.iter().filter(|l| **l < floor).count();
    if floored > 0 {
        log::warn!("intra-pair scatter is rank deficient: {floored} eigenvalues raised to {floor:.3e}");
    }
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        dim,
        lambdas.iter().map(|l| 1.0 / l.max(floor).sqrt()),
    ));
    let whiten = &basis * inv_sqrt * basis.transpose();

    let mut total = DMatrix::<f64>::zeros(dim, dim);
    for v in all {
        let c = DVector::from_column_slice(v.as_ref()) - &mean;
        total.ger(1.0, &c, &c, 1.0);
    }
    let rotated = &whiten * total * &whiten;
    let rotated = (&rotated + rotated.transpose()) * 0.5;
    let (_, rotation) = sorted_eigen(rotated);
    let proj = rotation.columns(0, output_dim).transpose() * whiten;

    let mut projection = Vec::with_capacity(output_dim * dim);
    for r in 0..output_dim {
        projection.extend(proj.row(r).iter().copied());
    }
    Ok(WhiteningProjection {
        mean: mean.iter().copied().collect(),
        projection,
        input_dim: dim,
        output_dim,
        floored,
    })
}

impl WhiteningProjection {
    pub fn identity(dim: usize) -> Self {
        let mut projection = vec![0.0; dim * dim];
        for i in 0..dim {
            projection[i * dim + i] = 1.0;
        }
        WhiteningProjection {
            mean: vec![0.0; dim],
            projection,
            input_dim: dim,
            output_dim: dim,
            floored: 0,
        }
    }

    /// `P·(x − μ)` without normalization.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(AsdaError::ShapeMismatch(format!(
                "whitening expects {} dims, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .projection
            .chunks(self.input_dim)
            .map(|row| row.iter().zip(&centered).map(|(p, c)| p * c).sum())
            .collect())
    }
}

pub fn apply_whitening(d: &Descriptor, proj: &WhiteningProjection) -> Result<Descriptor> {
    Ok(Descriptor::from_unnormalized(&proj.project(d.values())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn basis(dim: usize, i: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        v
    }

    #[test]
    fn identity_scatters_give_identity() {
        let dim = 5;
        let zero = vec![0.0; dim];
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..dim).map(|i| (basis(dim, i, 1.0), zero.clone())).collect();
        let s = 0.5f64.sqrt();
        let all: Vec<Vec<f64>> = (0..dim)
            .flat_map(|i| [basis(dim, i, s), basis(dim, i, -s)])
            .collect();
        let w = fit_whitening(&pairs, &all, dim).unwrap();
        for (i, v) in w.projection.iter().enumerate() {
            let want = if i / dim == i % dim { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "{i}: {v}");
        }
        assert!(w.mean.iter().all(|m| m.abs() < 1e-15));
    }

    #[test]
    fn isotropic_pairs_give_scaled_orthonormal_rows() {
        let dim = 4;
        let a = 0.3;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..dim)
            .flat_map(|i| {
                [
                    (basis(dim, i, a), vec![0.0; dim]),
                    (vec![0.1; dim], {
                        let mut v = vec![0.1; dim];
                        v[i] += a;
                        v
                    }),
                ]
            })
            .collect();
        let all: Vec<Vec<f64>> = vec![
            vec![1.0, 0.2, 0.0, 0.3],
            vec![0.1, 0.9, 0.4, 0.0],
            vec![0.5, 0.5, 0.5, 0.1],
            vec![0.0, 0.3, 1.2, 0.8],
            vec![0.7, 0.0, 0.2, 0.6],
        ];
        let w = fit_whitening(&pairs, &all, 3).unwrap();
        let scale2 = 1.0 / (2.0 * a * a);
        for r in 0..3 {
            for s in 0..3 {
                let dot: f64 = (0..dim).map(|j| w.projection[r * dim + j] * w.projection[s * dim + j]).sum();
                let want = if r == s { scale2 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9 * scale2, "{r},{s}: {dot}");
            }
        }
    }

    #[test]
    fn fit_errors() {
        let all = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pairs = vec![(all[0].clone(), all[1].clone())];
        assert!(fit_whitening(&pairs, &all, 3).is_err());
        let same = vec![(all[0].clone(), all[0].clone())];
        assert!(fit_whitening(&same, &all, 2).is_err());
        let w = fit_whitening(&pairs, &all, 2).unwrap();
        assert_eq!(w.floored, 1);
    }

    #[test]
    fn apply_identity_and_norm() {
        let d = Descriptor::from_unnormalized(&[0.2, -0.4, 0.1]);
        let same = apply_whitening(&d, &WhiteningProjection::identity(3)).unwrap();
        for (a, b) in same.values().iter().zip(d.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = WhiteningProjection {
            mean: vec![0.1, 0.0, -0.2],
            projection: vec![2.0, 0.0, 1.0, 0.5, 1.0, 0.0],
            input_dim: 3,
            output_dim: 2,
            floored: 0,
        };
        let out = apply_whitening(&d, &w).unwrap();
        let norm: f64 = out.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(apply_whitening(&Descriptor::from_unnormalized(&[1.0, 0.0]), &w).is_err());
    }

    #[test]
    fn whitening_can_reorder_neighbours() {
        let q = Descriptor::from_unnormalized(&[1.0, 0.4]);
        let a = Descriptor::from_unnormalized(&[1.0, 0.0]);
        let b = Descriptor::from_unnormalized(&[0.6, 0.8]);
        let w = WhiteningProjection {
            mean: vec![0.0, 0.0],
            projection: vec![1.0, 0.0, 0.0, 25.0],
            input_dim: 2,
            output_dim: 2,
            floored: 0,
        };
        // Brute force: stretch, renormalize, compare cosines directly.
        let brute = |x: &[f64], y: &[f64]| -> f64 {
            let px = [x[0], 25.0 * x[1]];
            let py = [y[0], 25.0 * y[1]];
            let nx = (px[0] * px[0] + px[1] * px[1]).sqrt();
            let ny = (py[0] * py[0] + py[1] * py[1]).sqrt();
            (px[0] * py[0] + px[1] * py[1]) / (nx * ny)
        };
        let wq = apply_whitening(&q, &w).unwrap();
        let after_a = wq.dot(&apply_whitening(&a, &w).unwrap());
        let after_b = wq.dot(&apply_whitening(&b, &w).unwrap());
        assert!((after_a - brute(q.values(), a.values())).abs() < 1e-12);
        assert!((after_b - brute(q.values(), b.values())).abs() < 1e-12);
        assert!(q.dot(&a) > q.dot(&b));
        assert!(after_a < after_b);
    }

    #[test]
    fn repeated_unit_scale_matches_single_scale() {
        let model = Model::new(&ModelConfig::default(), 2).unwrap();
        let data: Vec<f64> = (0..48 * 64 * 3).map(|i| ((i * 13) % 29) as f64 / 28.0).collect();
        let img = ImageTensor::new(48, 64, data).unwrap();
        let single = model.describe_image(&img).unwrap();
        let ms = multiscale_descriptor(&img, &model, &[1.0, 1.0, 1.0]).unwrap();
        for (a, b) in single.values().iter().zip(ms.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        let ms = multiscale_descriptor(&img, &model, &default_scales()).unwrap();
        let norm: f64 = ms.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(multiscale_descriptor(&img, &model, &[0.2, 0.1]).is_err());
    }
}
