//! Adversarial detector: K sequential 1×1 detectors, each run on the feature
//! map with every position claimed by the previous detector erased.
//!
//! Step k computes `m_k(x) = sigmoid(w_k · f_k(x) + b_k)` where `f_1 = f` and
//! `f_k = r_k ⊙ f_{k-1}` with `r_k(x) = [m_{k-1}(x) < θ]`. The erasing mask is a
//! constant for differentiation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AsdaError, Result};
use crate::feature::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorStack {
    channels: usize,
    theta: f64,
    /// K×C, row k is `w_k`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Per-position significance in [0, 1] for one adversarial step.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    step: usize,
    values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

/// Output of [`compute_semantic_maps`] with the cumulative masks kept for
/// backpropagation and invariant checks.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    pub maps: Vec<SemanticMap>,
    /// `keep[k][x]` is true iff f_{k+1}(x) = f(x), i.e. position x survived
    /// every erasing step before step k+1.
    pub keep: Vec<Vec<bool>>,
}

pub fn validate_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(AsdaError::InvalidConfig(format!(
            "adversarial threshold {theta} outside (0, 1)"
        )));
    }
    Ok(())
}

pub fn init_detector_stack(channels: usize, steps: usize, theta: f64, seed: u64) -> Result<DetectorStack> {
    if steps < 1 {
        return Err(AsdaError::InvalidConfig("detector needs K >= 1 steps".into()));
    }
    if channels < 1 {
        return Err(AsdaError::InvalidConfig("detector needs C >= 1 channels".into()));
    }
    validate_theta(theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("finite std");
    let weights = (0..steps * channels).map(|_| normal.sample(&mut rng)).collect();
    Ok(DetectorStack {
        channels,
        theta,
        weights,
        biases: vec![0.0; steps],
    })
}

impl DetectorStack {
    pub fn from_parts(channels: usize, theta: f64, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        validate_theta(theta)?;
        if biases.is_empty() || weights.len() != biases.len() * channels {
            return Err(AsdaError::ShapeMismatch(format!(
                "detector weights {} do not match K={} x C={channels}",
                weights.len(),
                biases.len()
            )));
        }
        Ok(DetectorStack {
            channels,
            theta,
            weights,
            biases,
        })
    }

    pub fn steps(&self) -> usize {
        self.biases.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn set_theta(&mut self, theta: f64) -> Result<()> {
        validate_theta(theta)?;
        self.theta = theta;
        Ok(())
    }

    pub fn weight(&self, k: usize) -> &[f64] {
        &self.weights[k * self.channels..(k + 1) * self.channels]
    }
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, step: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(AsdaError::ShapeMismatch(format!(
                "semantic map expects {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AsdaError::Invalid(format!("semantic value {v} outside [0, 1]")));
        }
        Ok(SemanticMap {
            height,
            width,
            step,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

impl ResidualMask {
    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Positions that survive erasure: `m(x) < θ`, strictly.
pub fn residual_mask(m: &SemanticMap, theta: f64) -> ResidualMask {
    ResidualMask {
        height: m.height,
        width: m.width,
        values: m.values.iter().map(|v| *v < theta).collect(),
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn compute_semantic_maps(f: &FeatureMap, stack: &DetectorStack) -> Result<DetectorOutput> {
    if f.channels() != stack.channels {
        return Err(AsdaError::ShapeMismatch(format!(
            "feature map has {} channels, detector expects {}",
            f.channels(),
            stack.channels
        )));
    }
    let (h, w) = (f.height(), f.width());
    let n = h * w;
    let mut keep = vec![true; n];
    let mut maps = Vec::with_capacity(stack.steps());
    let mut keeps = Vec::with_capacity(stack.steps());
    for k in 0..stack.steps() {
        if k > 0 {
            let prev: &SemanticMap = &maps[k - 1];
            let r = residual_mask(prev, stack.theta);
            for (kp, r) in keep.iter_mut().zip(r.values) {
                *kp = *kp && r;
            }
        }
        let wk = stack.weight(k);
        let bk = stack.biases[k];
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let z = if keep[i] {
                    let cell = &f.data()[i * f.channels()..(i + 1) * f.channels()];
                    bk + cell.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>()
                } else {
                    bk
                };
                sigmoid(z)
            })
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AsdaError::NonFinite { stage: "detector" });
        }
        maps.push(SemanticMap {
            height: h,
            width: w,
            step: k,
            values,
        });
        keeps.push(keep.clone());
    }
    Ok(DetectorOutput { maps, keep: keeps })
}

impl DetectorOutput {
    /// The erased input stream f_k of step k (0-based).
    pub fn erased_input(&self, f: &FeatureMap, k: usize) -> FeatureMap {
        let c = f.channels();
        let mut out = f.clone();
        for (i, kept) in self.keep[k].iter().enumerate() {
            if !kept {
                out.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }

    /// Backpropagates `d_maps[k][x]` (gradient w.r.t. m_k(x)) into detector
    /// parameter gradients and, when given, the feature-map gradient.
    pub fn backward(
        &self,
        f: &FeatureMap,
        stack: &DetectorStack,
        d_maps: &[Vec<f64>],
        d_weights: &mut [f64],
        d_biases: &mut [f64],
        mut d_features: Option<&mut [f64]>,
    ) {
        let c = f.channels();
        for k in 0..self.maps.len() {
            let m = &self.maps[k].values;
            let wk = stack.weight(k);
            let dwk = &mut d_weights[k * c..(k + 1) * c];
            for (i, &dm) in d_maps[k].iter().enumerate() {
                if dm == 0.0 {
                    continue;
                }
                let dz = dm * m[i] * (1.0 - m[i]);
                d_biases[k] += dz;
                if !self.keep[k][i] {
                    continue;
                }
                let cell = &f.data()[i * c..(i + 1) * c];
                for j in 0..c {
                    dwk[j] += dz * cell[j];
                }
                if let Some(df) = d_features.as_deref_mut() {
                    for j in 0..c {
                        df[i * c + j] += dz * wk[j];
                    }
                }
            }
        }
    }

    pub(crate) fn hash_structure<H: std::hash::Hasher>(&self, state: &mut H) {
        for keep in &self.keep {
            for chunk in keep.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, k)| acc | ((*k as u64) << i));
                state.write_u64(bits);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_determinism() {
        let s = init_detector_stack(32, 4, 0.7, 7).unwrap();
        assert_eq!(s.steps(), 4);
        assert_eq!(s.weights.len(), 128);
        assert!(s.biases.iter().all(|b| *b == 0.0));
        assert_eq!(s.theta(), 0.7);

        let a = init_detector_stack(8, 1, 0.5, 0).unwrap();
        let b = init_detector_stack(8, 1, 0.5, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_bad_params() {
        assert!(init_detector_stack(8, 0, 0.5, 0).is_err());
        assert!(init_detector_stack(8, 2, 0.0, 0).is_err());
        assert!(init_detector_stack(8, 2, 1.0, 0).is_err());
        assert!(init_detector_stack(8, 2, 1.5, 0).is_err());
    }

    #[test]
    fn residual_mask_is_strict() {
        let m = SemanticMap::new(2, 2, 0, vec![0.9, 0.2, 0.69, 0.7]).unwrap();
        let r = residual_mask(&m, 0.7);
        assert_eq!(r.values(), &[false, true, true, false]);

        let zeros = SemanticMap::new(2, 3, 0, vec![0.0; 6]).unwrap();
        assert!(residual_mask(&zeros, 0.7).values().iter().all(|v| *v));
    }

    #[test]
    fn tiny_threshold_erases_everything() {
        let f = FeatureMap::new(2, 2, 1, vec![0.1, 0.5, 2.0, 0.0]).unwrap();
        let stack = DetectorStack::from_parts(1, 1e-12, vec![-3.0], vec![0.0]).unwrap();
        let out = compute_semantic_maps(&f, &stack).unwrap();
        assert!(residual_mask(&out.maps[0], 1e-12).values().iter().all(|v| !v));
    }

    #[test]
    fn hand_evaluated_two_step_erasure() {
        let f = FeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
        let stack = DetectorStack::from_parts(1, 0.7, vec![10.0, 5.0], vec![0.0, 0.0]).unwrap();
        let out = compute_semantic_maps(&f, &stack).unwrap();
        let m1 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((out.maps[0].values()[0] - m1).abs() < 1e-15);
        assert!((m1 - 0.99995).abs() < 1e-5);
        assert_eq!(out.maps[1].values()[0], 0.5);
        assert_eq!(out.erased_input(&f, 1).data(), &[0.0]);
    }

    #[test]
    fn single_step_is_plain_detector() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 0.5, 0.0]).unwrap();
        let stack = DetectorStack::from_parts(2, 0.7, vec![0.3, -0.2], vec![0.1]).unwrap();
        let out = compute_semantic_maps(&f, &stack).unwrap();
        assert_eq!(out.maps.len(), 1);
        assert_eq!(out.maps[0].values()[0], sigmoid(0.1 + 0.3 - 0.4));
        assert_eq!(out.maps[0].values()[1], sigmoid(0.1 + 0.15));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let f = FeatureMap::zeros(2, 2, 3);
        let stack = init_detector_stack(4, 2, 0.7, 0).unwrap();
        assert!(matches!(
            compute_semantic_maps(&f, &stack),
            Err(AsdaError::ShapeMismatch(_))
        ));
    }
}
