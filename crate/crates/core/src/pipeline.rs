//! End-to-end orchestration: retrieve, background references, gated
//! co-segmentation, saliency, fused inference, CRF, merge and evaluation.
//!
//! Each stage can be toggled. Every file a stage reads or writes is recorded
//! with its SHA-256 in `provenance.json`, so a disabled stage is visible as
//! the absence of its inputs. Work happens in `<output>/.partial`; on success
//! its contents replace the output directory's, on failure they are kept in
//! `<output>/failed` together with `error.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cosegment::{
    archive_gates, build_background_references, build_reference, select_seeds,
    BackgroundArchive, BackgroundReferences, BlockSchedule, DenseFeatureMap, GateMap,
    ReferenceEmbedding,
};
use crate::crf::{refine, CrfParams, RgbField};
use crate::error::{Error, Result};
use crate::inference::{
    argmax_mask, concept_probability, fuse, merge_categories, merge_probability_maps,
    threshold_mask, MergeTable, ProbabilityMap, SegmentationMask, IGNORE_INDEX,
};
use crate::metrics::{ConfusionMatrix, Scores};
use crate::retrieval::{build_archive, tensor_path_for, ConceptSpec, EmbeddingIndex};
use crate::saliency::{dense_saliency, ProjectionMatrix, SaliencyMap, ValueFeatureMap};
use crate::scalar::convert_slice;
use crate::tensor_io::{decode_tensor, encode_tensor, resolve, ArchiveManifest, IndexManifest};

/// Context categories suppressed by default.
pub const DEFAULT_BACKGROUNDS: [&str; 5] = ["tree", "sky", "building", "road", "person"];
pub const DEFAULT_K: usize = 50;
/// Name of the bundled COCO-Stuff 171 -> 27 merge table.
pub const BUILTIN_COCOSTUFF: &str = "builtin:cocostuff27";

pub mod stage {
    pub const RETRIEVE: &str = "retrieve";
    pub const BACKGROUND: &str = "background_refs";
    pub const COSEGMENT: &str = "cosegment";
    pub const SALIENCY: &str = "saliency";
    pub const INFER: &str = "infer";
    pub const CRF: &str = "crf";
    pub const MERGE: &str = "merge";
    pub const EVAL: &str = "eval";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Multiply probability maps by text saliency at inference.
    pub use_saliency_fusion: bool,
    /// Gate co-segmentation by text saliency of the archive images.
    pub use_language_gating: bool,
    /// Gate co-segmentation by the complement of background probabilities.
    pub use_context_elimination: bool,
    pub use_crf: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_saliency_fusion: true,
            use_language_gating: true,
            use_context_elimination: true,
            use_crf: true,
        }
    }
}

impl Toggles {
    pub const fn all_off() -> Self {
        Self {
            use_saliency_fusion: false,
            use_language_gating: false,
            use_context_elimination: false,
            use_crf: false,
        }
    }
}

/// Paths are resolved against the directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelinePaths {
    pub index: String,
    /// Directory of `<id>.rtns` dense features for corpus images.
    pub corpus_features: String,
    /// Directory of `<id>.rtns` value features for corpus images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_values: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_bias: Option<String>,
    /// Images to segment.
    pub eval_ids: Vec<String>,
    pub eval_features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_values: Option<String>,
    /// Directory of `<id>.png` RGB images; sets the prediction resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<String>,
    /// Directory of `<id>.png` index masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_gt: Option<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Target concepts; their order is the label order of the masks.
    pub concepts: Vec<ConceptSpec<f32>>,
    #[serde(default = "default_backgrounds")]
    pub background_concepts: Vec<String>,
    /// Text embeddings for background names not among `concepts`.
    #[serde(default)]
    pub background_specs: Vec<ConceptSpec<f32>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub toggles: Toggles,
    pub paths: PipelinePaths,
    #[serde(default)]
    pub crf: CrfParams,
    /// Merge table path, or [`BUILTIN_COCOSTUFF`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_table: Option<String>,
    /// Merge probability maps before the CRF instead of merging the mask after it.
    #[serde(default)]
    pub merge_before_crf: bool,
    /// With a single concept, threshold its map instead of taking an argmax.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    #[serde(default)]
    pub schedule: BlockSchedule,
}

fn default_backgrounds() -> Vec<String> {
    DEFAULT_BACKGROUNDS.iter().map(|s| s.to_string()).collect()
}

fn default_k() -> usize {
    DEFAULT_K
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            concepts: Vec::new(),
            background_concepts: default_backgrounds(),
            background_specs: Vec::new(),
            k: DEFAULT_K,
            toggles: Toggles::default(),
            paths: PipelinePaths::default(),
            crf: CrfParams::default(),
            merge_table: None,
            merge_before_crf: false,
            threshold: None,
            schedule: BlockSchedule::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = crate::tensor_io::read_json(path)?;
        let concepts = cfg.concepts.into_iter().map(ConceptSpec::normalized).collect::<Result<_>>()?;
        let background_specs =
            cfg.background_specs.into_iter().map(ConceptSpec::normalized).collect::<Result<_>>()?;
        Ok(Self { concepts, background_specs, ..cfg })
    }

    fn background_spec(&self, name: &str) -> Option<&ConceptSpec<f32>> {
        self.background_specs
            .iter()
            .chain(&self.concepts)
            .find(|c| c.name == name)
    }

    /// Toggle combinations outside the evaluated ablation grid.
    pub fn untested_combination_notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.toggles.use_crf && !self.toggles.use_saliency_fusion {
            notes.push("untested combination: CRF without saliency fusion".to_string());
        }
        notes
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::Config("no target concepts".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut names: Vec<&str> = self.concepts.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate target concept names".into()));
        }
        let t = &self.toggles;
        if (t.use_language_gating || t.use_saliency_fusion) && self.paths.projection.is_none() {
            return Err(Error::Config("saliency needs `paths.projection`".into()));
        }
        if t.use_language_gating && self.paths.corpus_values.is_none() {
            return Err(Error::Config("language gating needs `paths.corpus_values`".into()));
        }
        if t.use_saliency_fusion && self.paths.eval_values.is_none() {
            return Err(Error::Config("saliency fusion needs `paths.eval_values`".into()));
        }
        if t.use_crf && self.paths.eval_images.is_none() {
            return Err(Error::Config("CRF needs `paths.eval_images`".into()));
        }
        if t.use_context_elimination {
            for b in &self.background_concepts {
                if self.background_spec(b).is_none() {
                    return Err(Error::Config(format!("no text embedding for background concept `{b}`")));
                }
            }
        }
        if let Some(th) = self.threshold {
            if !(th > 0.0 && th < 1.0) {
                return Err(Error::Config(format!("threshold {th} must lie in (0, 1)")));
            }
        }
        self.crf.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub subject: String,
    pub params: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: PipelineConfig,
    pub notes: Vec<String>,
    pub stages: Vec<StageRecord>,
}

impl Provenance {
    pub fn stage_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for s in &self.stages {
            if !names.contains(&s.stage.as_str()) {
                names.push(&s.stage);
            }
        }
        names
    }

    /// Every input path read by any stage.
    pub fn inputs(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().flat_map(|s| s.inputs.iter().map(|f| f.path.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub acc: f64,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_matrix(classes: &[String], cm: ConfusionMatrix, images: usize) -> Result<Self> {
        let Scores { acc, miou, per_class_iou } = cm.scores()?;
        Ok(Self {
            images,
            acc,
            miou,
            per_class: classes
                .iter()
                .zip(per_class_iou)
                .map(|(c, iou)| ClassIou { class: c.clone(), iou })
                .collect(),
            confusion: cm,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub output_dir: PathBuf,
    pub masks: Vec<(String, PathBuf)>,
    pub report: Option<EvalReport>,
    pub provenance: Provenance,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Filesystem-safe form of a concept name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// File access log for one stage and subject.
struct StageLog<'a> {
    record: StageRecord,
    base: &'a Path,
    work: &'a Path,
}

impl<'a> StageLog<'a> {
    fn new(stage: &str, subject: &str, base: &'a Path, work: &'a Path) -> Self {
        Self {
            record: StageRecord {
                stage: stage.to_string(),
                subject: subject.to_string(),
                params: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                notes: Vec::new(),
            },
            base,
            work,
        }
    }

    fn params(mut self, params: serde_json::Value) -> Self {
        self.record.params = params;
        self
    }

    fn note(&mut self, note: impl Into<String>) {
        self.record.notes.push(note.into());
    }

    /// Paths are logged relative to the config directory when possible.
    fn display(&self, path: &Path) -> String {
        path.strip_prefix(self.base).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.record.inputs.push(FileRecord { path: self.display(path), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.work.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record.outputs.push(FileRecord { path: rel.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|source| Error::Json { path: rel.into(), source })?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn write_tensor(&mut self, rel: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        self.write(rel, &encode_tensor(shape, data)?)
    }

    fn write_mask(&mut self, rel: &str, mask: &SegmentationMask) -> Result<()> {
        let path = self.work.join(rel);
        mask.save_png(&path)?;
        let png = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.record.outputs.push(FileRecord { path: rel.to_string(), sha256: sha256_hex(&png) });
        let side = SegmentationMask::sidecar_path(Path::new(rel));
        let side_abs = self.work.join(&side);
        let json = fs::read(&side_abs).map_err(|e| Error::io(&side_abs, e))?;
        self.record.outputs.push(FileRecord {
            path: side.to_string_lossy().into_owned(),
            sha256: sha256_hex(&json),
        });
        Ok(())
    }

    fn feature_map(&mut self, id: &str, path: &Path) -> Result<DenseFeatureMap<f32>> {
        let t = decode_tensor(&self.read(path)?)?;
        let s = t.expect_rank(3, "dense feature map")?.to_vec();
        DenseFeatureMap::from_channel_first(id, s[0], s[1], s[2], &t.data)
    }

    fn value_map(&mut self, id: &str, path: &Path) -> Result<ValueFeatureMap<f32>> {
        let t = decode_tensor(&self.read(path)?)?;
        let s = t.expect_rank(3, "value feature map")?.to_vec();
        ValueFeatureMap::new(id, s[0], s[1], s[2], t.data)
    }

    fn rgb(&mut self, path: &Path) -> Result<RgbField<f32>> {
        let bytes = self.read(path)?;
        let img = image::load_from_memory(&bytes)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        RgbField::new(h, w, img.into_raw().into_iter().map(f32::from).collect())
    }

    fn mask(&mut self, path: &Path) -> Result<(usize, usize, Vec<u16>)> {
        let bytes = self.read(path)?;
        let img = image::load_from_memory(&bytes)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok((h, w, img.into_raw().into_iter().map(u16::from).collect()))
    }

    fn finish(self) -> StageRecord {
        self.record
    }
}

type BackgroundEntry = (BackgroundReferences<f32>, Vec<StageRecord>);
/// Features of an archive and, when language gating is on, one gate per image.
type LoadedArchive = (Vec<DenseFeatureMap<f32>>, Option<Vec<GateMap<f32>>>);

/// Key under which background references are cached.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct BackgroundKey {
    index: PathBuf,
    k: usize,
    gating: bool,
    names: Vec<String>,
}

/// Runs pipeline configurations, caching background references across runs
/// that share an index, archive size and gating mode.
#[derive(Default)]
pub struct Pipeline {
    background_cache: Mutex<HashMap<BackgroundKey, BackgroundEntry>>,
}

struct Shared<'a> {
    cfg: &'a PipelineConfig,
    base: &'a Path,
    work: &'a Path,
    index: EmbeddingIndex<f32>,
    projection: Option<ProjectionMatrix<f32>>,
}

impl Shared<'_> {
    fn path(&self, p: &str) -> PathBuf {
        resolve(self.base, p)
    }

    fn corpus_features(&self) -> PathBuf {
        self.path(&self.cfg.paths.corpus_features)
    }

    fn corpus_values(&self) -> Option<PathBuf> {
        self.cfg.paths.corpus_values.as_deref().map(|p| self.path(p))
    }

    fn projection(&self) -> Result<&ProjectionMatrix<f32>> {
        self.projection
            .as_ref()
            .ok_or_else(|| Error::Config("saliency requested without a projection".into()))
    }

    /// Saliency of `concept` over `values`, resampled to `extent`.
    fn saliency(
        &self,
        log: &mut StageLog<'_>,
        concept: &ConceptSpec<f32>,
        id: &str,
        value_path: &Path,
        extent: (usize, usize),
    ) -> Result<SaliencyMap<f32>> {
        let values = log.value_map(id, value_path)?;
        let mut s = dense_saliency(&values, self.projection()?, concept)?;
        if (s.h, s.w) != extent {
            s.values = crate::grid::resize_nearest(&s.values, s.h, s.w, extent.0, extent.1);
            (s.h, s.w) = extent;
        }
        Ok(s)
    }

    fn retrieve(&self, concept: &ConceptSpec<f32>) -> Result<(ArchiveManifest, StageRecord)> {
        let mut log = StageLog::new(stage::RETRIEVE, &concept.name, self.base, self.work)
            .params(serde_json::json!({ "k": self.cfg.k }));
        let values = if self.cfg.toggles.use_language_gating { self.corpus_values() } else { None };
        let archive = build_archive(&self.index, concept, self.cfg.k, &self.corpus_features(), values.as_deref())?;
        log.write_json(&format!("archives/{}.json", file_stem(&concept.name)), &archive)?;
        Ok((archive, log.finish()))
    }

    /// Loads archive features and, when enabled, per-image language gates.
    fn load_archive(
        &self,
        log: &mut StageLog<'_>,
        concept: &ConceptSpec<f32>,
        archive: &ArchiveManifest,
    ) -> Result<LoadedArchive> {
        let mut features = Vec::with_capacity(archive.k);
        let mut gates = Vec::new();
        for e in &archive.image_entries {
            let f = log.feature_map(&e.image_id, &resolve(self.base, &e.feature_path))?;
            if self.cfg.toggles.use_language_gating {
                let gate = match (&e.saliency_path, &e.value_feature_path) {
                    (Some(s), _) => {
                        let t = decode_tensor(&log.read(&resolve(self.base, s))?)?;
                        let (h, w) = match t.shape.as_slice() {
                            [h, w] | [1, h, w] => (*h, *w),
                            s => return Err(Error::Format(format!("gate map must be h x w, got {s:?}"))),
                        };
                        GateMap::new(h, w, t.data, crate::cosegment::GateKind::Saliency)?
                            .resized(f.height(), f.width())
                    }
                    (None, Some(v)) => self
                        .saliency(log, concept, &e.image_id, &resolve(self.base, v), f.extent())?
                        .as_gate()?,
                    (None, None) => {
                        return Err(Error::Manifest(format!(
                            "language gating needs value features for `{}`",
                            e.image_id
                        )))
                    }
                };
                gates.push(gate);
            }
            features.push(f);
        }
        let gates = self.cfg.toggles.use_language_gating.then_some(gates);
        Ok((features, gates))
    }

    fn background_references(&self) -> Result<(BackgroundReferences<f32>, Vec<StageRecord>)> {
        let mut records = Vec::new();
        let mut archives = Vec::new();
        for name in &self.cfg.background_concepts {
            let spec = self
                .cfg
                .background_spec(name)
                .ok_or_else(|| Error::Config(format!("no text embedding for background `{name}`")))?;
            let (archive, rec) = self.retrieve(spec).map_err(|e| e.in_stage(stage::RETRIEVE, name))?;
            records.push(rec);
            let mut log = StageLog::new(stage::BACKGROUND, name, self.base, self.work).params(serde_json::json!({
                "k": self.cfg.k,
                "language_gating": self.cfg.toggles.use_language_gating,
            }));
            let (features, saliency) =
                self.load_archive(&mut log, spec, &archive).map_err(|e| e.in_stage(stage::BACKGROUND, name))?;
            archives.push((BackgroundArchive { name: name.clone(), features, saliency }, log));
        }
        let (plain, logs): (Vec<_>, Vec<_>) = archives.into_iter().unzip();
        let refs = build_background_references(&plain, &self.cfg.schedule)
            .map_err(|e| e.in_stage(stage::BACKGROUND, "background set"))?;
        for (r, mut log) in refs.references.iter().zip(logs) {
            let stem = file_stem(&r.concept_name);
            log.write_tensor(&format!("background/{stem}.rtns"), &[r.dim()], &r.vector)?;
            records.push(log.finish());
        }
        Ok((refs, records))
    }

    fn cosegment(
        &self,
        concept: &ConceptSpec<f32>,
        background: &BackgroundReferences<f32>,
    ) -> Result<(ReferenceEmbedding<f32>, Vec<StageRecord>)> {
        let name = &concept.name;
        let ce = self.cfg.toggles.use_context_elimination;
        if ce {
            if let Some(sub) = background.substitute(name) {
                let mut log = StageLog::new(stage::COSEGMENT, name, self.base, self.work);
                log.note(format!("`{name}` is a background concept; its background reference is reused"));
                log.write_tensor(&format!("references/{}.rtns", file_stem(name)), &[sub.dim()], &sub.vector)?;
                return Ok((sub, vec![log.finish()]));
            }
        }
        let (archive, retrieve_rec) = self.retrieve(concept).map_err(|e| e.in_stage(stage::RETRIEVE, name))?;
        let mut log = StageLog::new(stage::COSEGMENT, name, self.base, self.work).params(serde_json::json!({
            "k": self.cfg.k,
            "language_gating": self.cfg.toggles.use_language_gating,
            "context_elimination": ce,
            "backgrounds": if ce { background.names() } else { Vec::new() },
        }));
        let result = (|| {
            let (features, lang) = self.load_archive(&mut log, concept, &archive)?;
            let bg: &[ReferenceEmbedding<f32>] = if ce { &background.references } else { &[] };
            let gates = archive_gates(&features, lang.as_deref(), bg)?;
            let seeds = select_seeds(&features, gates.as_deref(), &self.cfg.schedule)?;
            let reference = build_reference(&seeds, name)?;
            let stem = file_stem(name);
            log.write_tensor(&format!("references/{stem}.rtns"), &[reference.dim()], &reference.vector)?;
            log.write_json(&format!("references/{stem}.seeds.json"), &seeds.summary())?;
            Ok(reference)
        })()
        .map_err(|e: Error| e.in_stage(stage::COSEGMENT, name))?;
        Ok((result, vec![retrieve_rec, log.finish()]))
    }

    fn segment_image(
        &self,
        id: &str,
        references: &[ReferenceEmbedding<f32>],
        merge: Option<&MergeTable>,
    ) -> Result<(SegmentationMask, Vec<StageRecord>)> {
        let cfg = self.cfg;
        let t = cfg.toggles;
        let mut records = Vec::new();
        let img_dir = format!("maps/{}", file_stem(id));

        let mut infer = StageLog::new(stage::INFER, id, self.base, self.work);
        let features = infer
            .feature_map(id, &tensor_path_for(&self.path(&cfg.paths.eval_features), id))
            .map_err(|e| e.in_stage(stage::INFER, id))?;
        let extent = features.extent();
        let mut maps = Vec::with_capacity(references.len());
        for r in references {
            let p = concept_probability(r, &features).map_err(|e| e.in_stage(stage::INFER, &r.concept_name))?;
            infer.write_tensor(&format!("{img_dir}/{}.prob.rtns", file_stem(&r.concept_name)), &[p.h, p.w], &p.values)?;
            maps.push(p);
        }

        if t.use_saliency_fusion {
            let mut sal = StageLog::new(stage::SALIENCY, id, self.base, self.work);
            let values_dir = self.path(cfg.paths.eval_values.as_deref().unwrap_or_default());
            let value_path = tensor_path_for(&values_dir, id);
            for (m, concept) in maps.iter_mut().zip(&cfg.concepts) {
                let s = self
                    .saliency(&mut sal, concept, id, &value_path, extent)
                    .map_err(|e| e.in_stage(stage::SALIENCY, &concept.name))?;
                let stem = file_stem(&concept.name);
                sal.write_tensor(&format!("{img_dir}/{stem}.sal.rtns"), &[s.h, s.w], &s.values)?;
                *m = fuse(m, &s).map_err(|e| e.in_stage(stage::SALIENCY, &concept.name))?;
                sal.write_tensor(&format!("{img_dir}/{stem}.fused.rtns"), &[m.h, m.w], &m.values)?;
            }
            records.push(sal.finish());
        }

        let image = if t.use_crf {
            let dir = self.path(cfg.paths.eval_images.as_deref().unwrap_or_default());
            Some((dir.join(format!("{id}.png")), StageLog::new(stage::CRF, id, self.base, self.work)))
        } else {
            None
        };

        let labels: Vec<String> = cfg.concepts.iter().map(|c| c.name.clone()).collect();
        let single_threshold = cfg.threshold.filter(|_| maps.len() == 1);
        let mut mask = match single_threshold {
            Some(th) => threshold_mask(&maps[0], th),
            None => argmax_mask(&maps, &labels),
        }
        .map_err(|e| e.in_stage(stage::INFER, id))?;
        records.insert(0, infer.finish());

        let mut merged = false;
        if let Some((path, mut crf_log)) = image {
            crf_log = crf_log.params(serde_json::to_value(cfg.crf).unwrap_or_default());
            if let Some(note) = cfg.untested_combination_notes().into_iter().next() {
                crf_log.note(note);
            }
            let rgb = crf_log.rgb(&path).map_err(|e| e.in_stage(stage::CRF, id))?;
            let (h, w) = (rgb.h, rgb.w);
            let (crf_maps, crf_labels) = match merge.filter(|_| cfg.merge_before_crf) {
                Some(table) => {
                    merged = true;
                    merge_probability_maps(&maps, table).map_err(|e| e.in_stage(stage::MERGE, id))?
                }
                None => (maps.clone(), labels.clone()),
            };
            if single_threshold.is_some() || crf_maps.len() < 2 {
                crf_log.note("skipped: fewer than two categories");
                mask = mask.resized(h, w);
                if merged {
                    mask = argmax_mask(&crf_maps, &crf_labels)?.resized(h, w);
                }
            } else {
                let full: Vec<ProbabilityMap<f32>> = crf_maps.iter().map(|m| m.resized(h, w)).collect();
                mask = refine(&full, &rgb, &cfg.crf).map_err(|e| e.in_stage(stage::CRF, id))?;
                mask.label_table = crf_labels;
            }
            records.push(crf_log.finish());
        } else if let Some(dir) = &cfg.paths.eval_images {
            // prediction resolution follows the RGB image when one is configured
            let path = self.path(dir).join(format!("{id}.png"));
            if let Ok((w, h)) = image::image_dimensions(&path) {
                mask = mask.resized(h as usize, w as usize);
            }
        }

        if let (Some(table), false) = (merge, merged) {
            let log = StageLog::new(stage::MERGE, id, self.base, self.work);
            mask = merge_categories(&mask, table).map_err(|e| e.in_stage(stage::MERGE, id))?;
            records.push(log.finish());
        }
        Ok((mask, records))
    }
}

impl Pipeline {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `config_path` and runs it, resolving paths against its directory.
    pub fn run_file(&self, config_path: impl AsRef<Path>) -> Result<PipelineOutput> {
        let config_path = config_path.as_ref();
        let cfg = PipelineConfig::load(config_path)?;
        let base = crate::tensor_io::parent_dir(config_path);
        self.run(&cfg, &base)
    }

    pub fn run(&self, cfg: &PipelineConfig, base: &Path) -> Result<PipelineOutput> {
        cfg.validate()?;
        let out = resolve(base, &cfg.paths.output);
        let work = out.join(".partial");
        if work.exists() {
            fs::remove_dir_all(&work).map_err(|e| Error::io(&work, e))?;
        }
        fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
        let mut stages = Vec::new();
        match self.run_inner(cfg, base, &work, &mut stages) {
            Ok((masks, report)) => {
                let provenance = Provenance { config: cfg.clone(), notes: cfg.untested_combination_notes(), stages };
                crate::tensor_io::write_json(&provenance, work.join("provenance.json"))?;
                publish(&work, &out)?;
                let masks = masks.into_iter().map(|(id, rel)| (id, out.join(rel))).collect();
                info!("pipeline finished: {}", out.display());
                Ok(PipelineOutput { output_dir: out, masks, report, provenance })
            }
            Err(err) => {
                let failed = out.join("failed");
                if failed.exists() {
                    fs::remove_dir_all(&failed).map_err(|e| Error::io(&failed, e))?;
                }
                let provenance = Provenance { config: cfg.clone(), notes: cfg.untested_combination_notes(), stages };
                let _ = crate::tensor_io::write_json(&provenance, work.join("provenance.json"));
                let _ = crate::tensor_io::write_json(
                    &serde_json::json!({ "error": err.to_string() }),
                    work.join("error.json"),
                );
                fs::rename(&work, &failed).map_err(|e| Error::io(&failed, e))?;
                Err(err)
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn run_inner(
        &self,
        cfg: &PipelineConfig,
        base: &Path,
        work: &Path,
        stages: &mut Vec<StageRecord>,
    ) -> Result<(Vec<(String, PathBuf)>, Option<EvalReport>)> {
        let t = cfg.toggles;
        let index_path = resolve(base, &cfg.paths.index);
        let mut index_log = StageLog::new(stage::RETRIEVE, "index", base, work);
        let index = load_index(&mut index_log, &index_path).map_err(|e| e.in_stage(stage::RETRIEVE, "index"))?;
        for c in cfg.concepts.iter().chain(&cfg.background_specs) {
            if c.dim() != index.dim() {
                return Err(Error::Config(format!(
                    "concept `{}` has {} dims, index has {}",
                    c.name,
                    c.dim(),
                    index.dim()
                )));
            }
        }
        let projection = if t.use_language_gating || t.use_saliency_fusion {
            let p = resolve(base, cfg.paths.projection.as_deref().unwrap_or_default());
            let t = decode_tensor(&index_log.read(&p)?)?;
            let s = t.expect_rank(2, "projection matrix")?.to_vec();
            let bias = match &cfg.paths.projection_bias {
                Some(b) => Some(decode_tensor(&index_log.read(&resolve(base, b))?)?.data),
                None => None,
            };
            Some(ProjectionMatrix::new(s[0], s[1], t.data, bias)?)
        } else {
            None
        };
        stages.push(index_log.finish());

        let shared = Shared { cfg, base, work, index, projection };

        let background = if t.use_context_elimination {
            let key = BackgroundKey {
                index: index_path.clone(),
                k: cfg.k,
                gating: t.use_language_gating,
                names: cfg.background_concepts.clone(),
            };
            let cached = self.background_cache.lock().expect("cache lock").get(&key).cloned();
            let (refs, records) = match cached {
                Some(hit) => {
                    // cached references are re-emitted so every run's output is complete
                    let mut log = StageLog::new(stage::BACKGROUND, "cache", base, work);
                    log.note("background references reused from cache");
                    for r in &hit.0.references {
                        log.write_tensor(&format!("background/{}.rtns", file_stem(&r.concept_name)), &[r.dim()], &r.vector)?;
                    }
                    let mut recs = hit.1.clone();
                    recs.push(log.finish());
                    (hit.0, recs)
                }
                None => {
                    let fresh = shared.background_references()?;
                    self.background_cache.lock().expect("cache lock").insert(key, fresh.clone());
                    fresh
                }
            };
            stages.extend(records);
            refs
        } else {
            BackgroundReferences::default()
        };

        let per_concept: Vec<(ReferenceEmbedding<f32>, Vec<StageRecord>)> = cfg
            .concepts
            .par_iter()
            .map(|c| shared.cosegment(c, &background))
            .collect::<Result<_>>()?;
        let mut references = Vec::with_capacity(per_concept.len());
        for (r, recs) in per_concept {
            references.push(r);
            stages.extend(recs);
        }

        let merge = match cfg.merge_table.as_deref() {
            None => None,
            Some(BUILTIN_COCOSTUFF) => Some(MergeTable::cocostuff_27()),
            Some(p) => Some(MergeTable::load(resolve(base, p))?),
        };

        let per_image: Vec<(SegmentationMask, Vec<StageRecord>)> = cfg
            .paths
            .eval_ids
            .par_iter()
            .map(|id| shared.segment_image(id, &references, merge.as_ref()))
            .collect::<Result<_>>()?;

        let mut masks = Vec::new();
        let mut final_masks = Vec::new();
        for (id, (mask, recs)) in cfg.paths.eval_ids.iter().zip(per_image) {
            stages.extend(recs);
            let rel = format!("masks/{}.png", file_stem(id));
            let mut log = StageLog::new("write", id, base, work);
            log.write_mask(&rel, &mask)?;
            stages.push(log.finish());
            masks.push((id.clone(), PathBuf::from(rel)));
            final_masks.push(mask);
        }

        let report = match &cfg.paths.eval_gt {
            Some(gt_dir) => {
                let gt_dir = resolve(base, gt_dir);
                let mut log = StageLog::new(stage::EVAL, "all", base, work);
                let classes = final_masks
                    .first()
                    .map(|m| m.label_table.clone())
                    .unwrap_or_default();
                let mut cm = ConfusionMatrix::new(classes.len());
                for (id, pred) in cfg.paths.eval_ids.iter().zip(&final_masks) {
                    let (h, w, idx) = log
                        .mask(&gt_dir.join(format!("{id}.png")))
                        .map_err(|e| e.in_stage(stage::EVAL, id))?;
                    let gt = SegmentationMask::new(h, w, idx, classes.clone())
                        .map_err(|e| e.in_stage(stage::EVAL, id))?
                        .resized(pred.h, pred.w);
                    cm.accumulate(&gt, pred).map_err(|e| e.in_stage(stage::EVAL, id))?;
                }
                let report = EvalReport::from_matrix(&classes, cm, final_masks.len())
                    .map_err(|e| e.in_stage(stage::EVAL, "all"))?;
                log.write_json("report.json", &report)?;
                stages.push(log.finish());
                Some(report)
            }
            None => None,
        };
        Ok((masks, report))
    }
}

fn load_index(log: &mut StageLog<'_>, path: &Path) -> Result<EmbeddingIndex<f32>> {
    let manifest: IndexManifest = serde_json::from_slice(&log.read(path)?)
        .map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    let base = crate::tensor_io::parent_dir(path);
    let t = decode_tensor(&log.read(&resolve(&base, &manifest.embeddings))?)?;
    let shape = t.expect_rank(2, "embedding matrix")?.to_vec();
    let lines = |bytes: Vec<u8>| -> Vec<String> {
        String::from_utf8_lossy(&bytes)
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect()
    };
    let ids = lines(log.read(&resolve(&base, &manifest.ids))?);
    let labels = match &manifest.labels {
        Some(p) => Some(lines(log.read(&resolve(&base, p))?)),
        None => None,
    };
    if ids.len() != shape[0] {
        return Err(Error::Manifest(format!("{} ids for {} embedding rows", ids.len(), shape[0])));
    }
    EmbeddingIndex::new(shape[1], convert_slice(&t.data), ids, labels)
}

/// Moves everything from `work` into `out`, replacing same-named entries.
fn publish(work: &Path, out: &Path) -> Result<()> {
    let entries = fs::read_dir(work).map_err(|e| Error::io(work, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(work, e))?;
        let target = out.join(entry.file_name());
        if target.is_dir() {
            fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        } else if target.exists() {
            fs::remove_file(&target).map_err(|e| Error::io(&target, e))?;
        }
        fs::rename(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
    }
    fs::remove_dir(work).map_err(|e| Error::io(work, e))?;
    let failed = out.join("failed");
    if failed.exists() {
        fs::remove_dir_all(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    Ok(())
}

/// Runs one configuration with a fresh cache.
pub fn run_pipeline(config: &PipelineConfig, base: &Path) -> Result<PipelineOutput> {
    Pipeline::new().run(config, base)
}

/// Remaps prediction indices onto `classes` by label name; unknown names
/// become the ignore index.
pub fn remap_to_classes(mask: &SegmentationMask, classes: &[String]) -> Result<SegmentationMask> {
    let lut: Vec<u16> = mask
        .label_table
        .iter()
        .map(|l| classes.iter().position(|c| c == l).map_or(IGNORE_INDEX, |i| i as u16))
        .collect();
    let indices = mask
        .indices
        .iter()
        .map(|&i| if i == IGNORE_INDEX { i } else { lut[i as usize] })
        .collect();
    SegmentationMask::new(mask.h, mask.w, indices, classes.to_vec())
}

/// Scores every `<id>.png` in `pred_dir` against the same name in `gt_dir`.
/// Predictions are remapped to `classes` through their label sidecars;
/// ground truth indices refer to `classes` directly.
pub fn evaluate_dirs(gt_dir: &Path, pred_dir: &Path, classes: &[String]) -> Result<EvalReport> {
    let mut names: Vec<PathBuf> = fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::arg(format!("no PNG masks in {}", pred_dir.display())));
    }
    let per_image: Vec<ConfusionMatrix> = names
        .par_iter()
        .map(|pred_path| {
            let pred = SegmentationMask::load_png(pred_path, Some(classes))?;
            let pred = remap_to_classes(&pred, classes)?;
            let gt_path = gt_dir.join(pred_path.file_name().expect("file name"));
            let gt = SegmentationMask::load_png(&gt_path, Some(classes))?;
            let gt = SegmentationMask::new(gt.h, gt.w, gt.indices, classes.to_vec())?.resized(pred.h, pred.w);
            let mut cm = ConfusionMatrix::new(classes.len());
            cm.accumulate(&gt, &pred)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(classes.len());
    for cm in &per_image {
        total.merge(cm)?;
    }
    EvalReport::from_matrix(classes, total, names.len())
}
