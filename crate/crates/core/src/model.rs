//! The trainable end-to-end pipeline: backbone, adversarial detector and
//! reduction, with a flat view of the parameter tensors for the optimizer.

use std::hash::Hasher;

use crate::aggregation::{
    backward_efficient, forward_efficient, AggregationCache, AggregationGrads, AggregationSettings,
    Descriptor, ReductionParams,
};
use crate::backbone::{build_backbone, Backbone, BackboneCache, BackboneConfig};
use crate::detector::{init_detector_stack, DetectorStack};
use crate::error::{AsdaError, Result};
use crate::feature::{FeatureMap, ImageTensor};
use crate::region::{generate_candidate_regions, CandidateRegion};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub train_backbone: bool,
    pub steps: usize,
    pub theta: f64,
    pub scales: usize,
    pub settings: AggregationSettings,
    /// Output dimensionality; must not exceed K·C.
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            train_backbone: true,
            steps: 4,
            theta: 0.7,
            scales: 4,
            settings: AggregationSettings::default(),
            dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub detector: DetectorStack,
    pub reduction: ReductionParams,
    pub scales: usize,
    pub settings: AggregationSettings,
}

/// Flat gradient buffers, one per parameter tensor, in [`Model::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors
            .iter_mut()
            .flatten()
            .for_each(|v| *v *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|v| *v == 0.0)
    }
}

/// A cached forward pass for one input.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    backbone: Option<BackboneCache>,
    features: FeatureMap,
    regions: Vec<CandidateRegion>,
    aggregation: AggregationCache,
}

impl ForwardPass {
    pub fn descriptor(&self) -> &Descriptor {
        self.aggregation.descriptor()
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn aggregation(&self) -> &AggregationCache {
        &self.aggregation
    }

    /// Hashes every discrete decision of the pass (ReLU patterns, erasing
    /// masks, MAC winners, zero-norm branches). Two parameter settings with the
    /// same fingerprint lie in the same smooth piece of the loss.
    pub fn hash_structure<H: Hasher>(&self, state: &mut H) {
        if let Some(b) = &self.backbone {
            b.hash_structure(state);
        }
        self.aggregation.hash_structure(state);
    }
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.settings.pooling.validate()?;
        let mut backbone = build_backbone(&config.backbone, seed)?;
        backbone.trainable = config.train_backbone;
        let channels = backbone.output_channels();
        let detector = init_detector_stack(channels, config.steps, config.theta, seed.wrapping_add(1))?;
        if config.dim < 1 || config.dim > config.steps * channels {
            return Err(AsdaError::InvalidConfig(format!(
                "descriptor dimension {} must lie in 1..={} (K·C)",
                config.dim,
                config.steps * channels
            )));
        }
        let reduction = ReductionParams::init(config.steps * channels, config.dim, seed.wrapping_add(2))?;
        generate_candidate_regions(1, 1, config.scales)?;
        Ok(Model {
            backbone,
            detector,
            reduction,
            scales: config.scales,
            settings: config.settings,
        })
    }

    pub fn dim(&self) -> usize {
        self.reduction.output_dim()
    }

    pub fn regions_for(&self, height: usize, width: usize) -> Result<Vec<CandidateRegion>> {
        generate_candidate_regions(height, width, self.scales)
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.blocks.len() {
            names.push(format!("backbone.{i}.weight"));
            names.push(format!("backbone.{i}.bias"));
        }
        for n in ["detector.weight", "detector.bias", "reduction.weight", "reduction.bias"] {
            names.push(n.to_string());
        }
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.backbone.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        out.push(&self.detector.weights);
        out.push(&self.detector.biases);
        out.push(&self.reduction.weight);
        out.push(&self.reduction.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.backbone.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.detector.weights);
        out.push(&mut self.detector.biases);
        out.push(&mut self.reduction.weight);
        out.push(&mut self.reduction.bias);
        out
    }

    /// Per tensor: whether the optimizer updates it.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let nb = 2 * self.backbone.blocks.len();
        (0..nb + 4)
            .map(|i| i >= nb || self.backbone.trainable)
            .collect()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn describe_features(&self, f: &FeatureMap) -> Result<Descriptor> {
        Ok(self.forward_features(f)?.aggregation.descriptor().clone())
    }

    pub fn describe_image(&self, image: &ImageTensor) -> Result<Descriptor> {
        let f = self.backbone.extract_feature_map(image)?;
        self.describe_features(&f)
    }

    pub fn forward_features(&self, f: &FeatureMap) -> Result<ForwardPass> {
        let regions = self.regions_for(f.height(), f.width())?;
        let aggregation = forward_efficient(f, &self.detector, &regions, &self.settings, &self.reduction)?;
        Ok(ForwardPass {
            backbone: None,
            features: f.clone(),
            regions,
            aggregation,
        })
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<ForwardPass> {
        let (f, cache) = self.backbone.forward(image, self.backbone.trainable)?;
        let mut pass = self.forward_features(&f)?;
        pass.backbone = cache;
        Ok(pass)
    }

    /// Accumulates into `grads` the gradient of a scalar whose gradient with
    /// respect to this pass's descriptor is `d_descriptor`.
    pub fn backward(&self, pass: &ForwardPass, d_descriptor: &[f64], grads: &mut Gradients) {
        let nb = 2 * self.backbone.blocks.len();
        let (bb, rest) = grads.tensors.split_at_mut(nb);
        let [dw, db, rw, rb] = rest else {
            panic!("gradient set does not match model layout");
        };
        let want_features = pass.backbone.is_some();
        let mut d_features = want_features.then(|| vec![0.0; pass.features.data().len()]);
        backward_efficient(
            &pass.aggregation,
            &pass.features,
            &self.detector,
            &pass.regions,
            &self.settings,
            &self.reduction,
            d_descriptor,
            AggregationGrads {
                reduction_weight: rw,
                reduction_bias: rb,
                detector_weights: dw,
                detector_biases: db,
                features: d_features.as_deref_mut(),
            },
        );
        if let (Some(cache), Some(df)) = (&pass.backbone, d_features) {
            let mut pairs: Vec<(&mut [f64], &mut [f64])> = bb
                .chunks_mut(2)
                .map(|pair| {
                    let (w, b) = pair.split_at_mut(1);
                    (w[0].as_mut_slice(), b[0].as_mut_slice())
                })
                .collect();
            self.backbone.backward(cache, &df, &mut pairs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_capped_by_concat_length() {
        let mut cfg = ModelConfig::default();
        cfg.dim = 129;
        assert!(Model::new(&cfg, 0).is_err());
        cfg.dim = 128;
        let m = Model::new(&cfg, 0).unwrap();
        assert_eq!(m.dim(), 128);
        assert_eq!(m.tensor_names().len(), m.tensors().len());
    }

    #[test]
    fn frozen_backbone_mask() {
        let mut cfg = ModelConfig::default();
        cfg.train_backbone = false;
        let m = Model::new(&cfg, 0).unwrap();
        let mask = m.trainable_mask();
        assert_eq!(mask, vec![false, false, false, false, false, false, true, true, true, true]);
    }

    #[test]
    fn image_descriptor_is_unit_and_deterministic() {
        let m = Model::new(&ModelConfig::default(), 4).unwrap();
        let data: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let img = ImageTensor::new(64, 64, data).unwrap();
        let a = m.describe_image(&img).unwrap();
        let b = m.describe_image(&img).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}
