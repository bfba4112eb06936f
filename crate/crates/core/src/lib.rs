//! Adversarial soft-detection aggregation (ASDA) for compact image retrieval
//! descriptors.
//!
//! Feature maps from a convolutional backbone are scanned by a stack of 1×1
//! detectors. Each detector sees the map with the positions claimed by its
//! predecessor erased, so the stack produces K complementary semantic maps.
//! Crops of those maps over multi-scale sliding windows weight regional
//! pooling; the pooled regions are summed per map, concatenated, reduced and
//! normalized into one descriptor. The whole pipeline trains end-to-end with a
//! contrastive loss and is evaluated by mean average precision.

pub mod aggregation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod harness;
pub mod model;
pub mod postprocess;
pub mod region;
pub mod synth;
pub mod training;

pub use aggregation::{
    aggregate_map, concat_and_reduce, describe, describe_efficient, pool_region, AggregationSettings,
    Descriptor, Pooling, ProposalMode, ReductionParams, RegionalRepresentation,
};
pub use backbone::{build_backbone, Backbone, BackboneConfig, BlockSpec};
pub use config::ExperimentConfig;
pub use detector::{compute_semantic_maps, init_detector_stack, residual_mask, DetectorStack, SemanticMap};
pub use error::{AsdaError, Result};
pub use feature::{FeatureMap, ImageTensor};
pub use model::{Gradients, Model, ModelConfig};
pub use region::{crop_soft_region_proposal, generate_candidate_regions, CandidateRegion, SoftRegionProposal};
