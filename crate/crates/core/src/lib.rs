//! Training-free open-vocabulary semantic segmentation by retrieving image
//! archives for each concept and co-segmenting them into a reference embedding.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Files on disk
//! are always little-endian `f32`; the aliases below fix the pipeline's type.

pub mod cosegment;
pub mod crf;
pub mod error;
pub mod grid;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod saliency;
pub mod scalar;
pub mod synth;
pub mod tensor_io;

pub use cosegment::{
    build_background_references, build_reference, compose_gates, context_gates, mean_support,
    select_seeds, BackgroundArchive, BackgroundReferences, BlockSchedule, DenseFeatureMap, GateKind,
    GateMap, ReferenceEmbedding, Seed, SeedSet,
};
pub use crf::{refine, CrfParams, LabelDistribution, RgbField};
pub use error::{Error, Result};
pub use inference::{
    argmax_mask, concept_probability, fuse, merge_categories, merge_probability_maps, threshold_mask,
    MergeTable, ProbabilityMap, SegmentationMask, IGNORE_INDEX,
};
pub use metrics::{ConfusionMatrix, Scores};
pub use pipeline::{run_pipeline, EvalReport, Pipeline, PipelineConfig, PipelineOutput, Toggles};
pub use retrieval::{build_archive, ConceptSpec, EmbeddingIndex};
pub use saliency::{dense_saliency, ProjectionMatrix, SaliencyMap, ValueFeatureMap};
pub use scalar::Scalar;
pub use tensor_io::{read_tensor, write_tensor, ArchiveEntry, ArchiveManifest, IndexManifest, Tensor};

pub type FeatureMap = DenseFeatureMap<f32>;
pub type Gate = GateMap<f32>;
pub type Reference = ReferenceEmbedding<f32>;
pub type Concept = ConceptSpec<f32>;
pub type Index = EmbeddingIndex<f32>;
pub type Probability = ProbabilityMap<f32>;
pub type Saliency = SaliencyMap<f32>;
pub type Projection = ProjectionMatrix<f32>;
pub type Values = ValueFeatureMap<f32>;
pub type Rgb = RgbField<f32>;
