//! Per-concept probability maps, saliency fusion and mask resolution.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cosegment::{DenseFeatureMap, ReferenceEmbedding};
use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;
use crate::scalar::{convert_slice, dot, sigmoid, to_f32_vec, Scalar};
use crate::tensor_io::{read_json, read_tensor, write_json, write_tensor};

pub const IGNORE_INDEX: u16 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T> {
    pub h: usize,
    pub w: usize,
    pub values: Vec<T>,
    pub concept_name: String,
    pub fused: bool,
}

impl<T: Scalar> ProbabilityMap<T> {
    pub fn new(h: usize, w: usize, values: Vec<T>, concept_name: impl Into<String>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::arg(format!("{} values do not fit {h}x{w}", values.len())));
        }
        Ok(Self { h, w, values, concept_name: concept_name.into(), fused: false })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn resized(&self, h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: crate::grid::resize_nearest(&self.values, self.h, self.w, h, w),
            concept_name: self.concept_name.clone(),
            fused: self.fused,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&[self.h, self.w], &to_f32_vec(&self.values), path)
    }

    pub fn load(concept_name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(path)?;
        let (h, w) = match t.shape.as_slice() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Format(format!("probability map must be h x w, got {s:?}"))),
        };
        Self::new(h, w, convert_slice(&t.data), concept_name)
    }
}

/// `sigmoid(<f_c, F(p)>)` at every pixel. With unit inputs the logits lie in
/// `[-1, 1]`, so outputs stay within `[sigmoid(-1), sigmoid(1)]`.
pub fn concept_probability<T: Scalar>(
    reference: &ReferenceEmbedding<T>,
    features: &DenseFeatureMap<T>,
) -> Result<ProbabilityMap<T>> {
    if reference.dim() != features.channels() {
        return Err(Error::arg(format!(
            "reference `{}` has {} dims, features `{}` have {} channels",
            reference.concept_name,
            reference.dim(),
            features.image_id,
            features.channels()
        )));
    }
    let values = (0..features.num_pixels())
        .map(|p| sigmoid(dot(&reference.vector, features.pixel(p))))
        .collect();
    ProbabilityMap::new(features.height(), features.width(), values, reference.concept_name.clone())
}

/// Hadamard product of a probability map with the concept's saliency.
pub fn fuse<T: Scalar>(prob: &ProbabilityMap<T>, saliency: &SaliencyMap<T>) -> Result<ProbabilityMap<T>> {
    if prob.extent() != (saliency.h, saliency.w) {
        return Err(Error::arg(format!(
            "probability extent {:?} does not match saliency extent {:?}",
            prob.extent(),
            (saliency.h, saliency.w)
        )));
    }
    if prob.concept_name != saliency.concept_name {
        return Err(Error::arg(format!(
            "cannot fuse `{}` with saliency for `{}`",
            prob.concept_name, saliency.concept_name
        )));
    }
    Ok(ProbabilityMap {
        h: prob.h,
        w: prob.w,
        values: prob.values.iter().zip(&saliency.values).map(|(&a, &b)| a * b).collect(),
        concept_name: prob.concept_name.clone(),
        fused: true,
    })
}

/// Per-pixel category indices; `label_table[i]` names index `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u16>,
    pub label_table: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelSidecar {
    label_table: Vec<String>,
    ignore_index: u16,
}

impl SegmentationMask {
    pub fn new(h: usize, w: usize, indices: Vec<u16>, label_table: Vec<String>) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::arg(format!("{} indices do not fit {h}x{w}", indices.len())));
        }
        if label_table.len() > IGNORE_INDEX as usize {
            return Err(Error::arg(format!("label table of {} entries collides with the ignore index", label_table.len())));
        }
        if let Some(i) = indices.iter().find(|&&i| i != IGNORE_INDEX && i as usize >= label_table.len()) {
            return Err(Error::arg(format!("index {i} missing from label table of {}", label_table.len())));
        }
        Ok(Self { h, w, indices, label_table })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn resized(&self, h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            indices: crate::grid::resize_nearest(&self.indices, self.h, self.w, h, w),
            label_table: self.label_table.clone(),
        }
    }

    /// Pixel count per label-table index (ignore excluded).
    pub fn histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.label_table.len()];
        for &i in &self.indices {
            if i != IGNORE_INDEX {
                hist[i as usize] += 1;
            }
        }
        hist
    }

    /// Sidecar JSON path for a mask PNG (`x.png` -> `x.json`).
    pub fn sidecar_path(png: &Path) -> PathBuf {
        png.with_extension("json")
    }

    /// Writes an 8-bit index PNG plus the label-table sidecar.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.indices.iter().map(|&i| i as u8).collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, bytes)
            .ok_or_else(|| Error::arg("mask buffer does not match its extent"))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        write_json(
            &LabelSidecar { label_table: self.label_table.clone(), ignore_index: IGNORE_INDEX },
            Self::sidecar_path(path),
        )
    }

    /// Reads an index PNG. The label table comes from the sidecar if present,
    /// otherwise from `fallback_labels`.
    pub fn load_png(path: impl AsRef<Path>, fallback_labels: Option<&[String]>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let indices = img.into_raw().into_iter().map(u16::from).collect();
        let sidecar = Self::sidecar_path(path);
        let label_table = if sidecar.is_file() {
            read_json::<LabelSidecar>(&sidecar)?.label_table
        } else if let Some(l) = fallback_labels {
            l.to_vec()
        } else {
            return Err(Error::Manifest(format!("no label table for mask {}", path.display())));
        };
        Self::new(h, w, indices, label_table)
    }
}

/// Index of the maximal map at every pixel; ties go to the earliest map.
pub fn argmax_mask<T: Scalar>(maps: &[ProbabilityMap<T>], label_table: &[String]) -> Result<SegmentationMask> {
    let first = maps.first().ok_or_else(|| Error::arg("argmax over an empty list of maps"))?;
    if let Some(m) = maps.iter().find(|m| m.extent() != first.extent()) {
        return Err(Error::arg(format!(
            "map `{}` extent {:?} differs from {:?}",
            m.concept_name,
            m.extent(),
            first.extent()
        )));
    }
    if label_table.len() != maps.len() {
        return Err(Error::arg(format!("{} labels for {} maps", label_table.len(), maps.len())));
    }
    let indices = (0..first.values.len())
        .map(|p| {
            let mut best = 0;
            for (c, m) in maps.iter().enumerate().skip(1) {
                if m.values[p] > maps[best].values[p] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    SegmentationMask::new(first.h, first.w, indices, label_table.to_vec())
}

/// Binary mask: index 1 (the concept) where `value >= threshold`, else 0.
pub fn threshold_mask<T: Scalar>(map: &ProbabilityMap<T>, threshold: T) -> Result<SegmentationMask> {
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::arg(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let indices = map.values.iter().map(|&v| u16::from(v >= threshold)).collect();
    SegmentationMask::new(
        map.h,
        map.w,
        indices,
        vec!["background".to_string(), map.concept_name.clone()],
    )
}

/// Low-level to mid-level category regrouping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeTable {
    pub low_to_mid: BTreeMap<String, String>,
    /// Output label order. Defaults to the sorted distinct targets.
    #[serde(default)]
    pub mid_labels: Vec<String>,
}

impl MergeTable {
    pub fn new(low_to_mid: BTreeMap<String, String>, mid_labels: Vec<String>) -> Result<Self> {
        Self { low_to_mid, mid_labels }.checked()
    }

    fn checked(mut self) -> Result<Self> {
        if self.mid_labels.is_empty() {
            let mut mids: Vec<String> = self.low_to_mid.values().cloned().collect();
            mids.sort();
            mids.dedup();
            self.mid_labels = mids;
        }
        if let Some((low, mid)) = self.low_to_mid.iter().find(|(_, m)| !self.mid_labels.contains(m)) {
            return Err(Error::Config(format!("`{low}` maps to `{mid}`, which is not a declared mid-level label")));
        }
        Ok(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json::<Self>(path)?.checked()
    }

    /// The 171 COCO-Stuff categories grouped into its 27 mid-level
    /// categories (12 thing and 15 stuff supercategories). The supercategories
    /// `food` and `furniture` occur on both sides and are suffixed
    /// `-things` / `-stuff` to keep names unique.
    pub fn cocostuff_27() -> Self {
        #[derive(Deserialize)]
        struct Raw {
            low_to_mid: BTreeMap<String, String>,
            mid_labels: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(include_str!("../data/cocostuff_171_to_27.json"))
            .expect("bundled merge table is valid JSON");
        Self { low_to_mid: raw.low_to_mid, mid_labels: raw.mid_labels }
    }

    /// Indices of the mid-level label for each entry of `labels`.
    fn mapping_for(&self, labels: &[String]) -> Result<Vec<u16>> {
        let mid_index: HashMap<&str, u16> =
            self.mid_labels.iter().enumerate().map(|(i, m)| (m.as_str(), i as u16)).collect();
        labels
            .iter()
            .map(|l| {
                self.low_to_mid
                    .get(l)
                    .map(|m| mid_index[m.as_str()])
                    .ok_or_else(|| Error::Config(format!("label `{l}` missing from merge table")))
            })
            .collect()
    }
}

/// Relabels a mask over the merge table's mid-level label set.
pub fn merge_categories(mask: &SegmentationMask, table: &MergeTable) -> Result<SegmentationMask> {
    let map = table.mapping_for(&mask.label_table)?;
    let indices = mask
        .indices
        .iter()
        .map(|&i| if i == IGNORE_INDEX { i } else { map[i as usize] })
        .collect();
    SegmentationMask::new(mask.h, mask.w, indices, table.mid_labels.clone())
}

/// Merges probability maps before mask resolution: each mid-level map is the
/// pixelwise max over its low-level members. Mid-level labels without
/// members are dropped. Returns the maps and their label table.
pub fn merge_probability_maps<T: Scalar>(
    maps: &[ProbabilityMap<T>],
    table: &MergeTable,
) -> Result<(Vec<ProbabilityMap<T>>, Vec<String>)> {
    let names: Vec<String> = maps.iter().map(|m| m.concept_name.clone()).collect();
    let map = table.mapping_for(&names)?;
    let mut out = Vec::new();
    let mut labels = Vec::new();
    for (mid_idx, mid) in table.mid_labels.iter().enumerate() {
        let members: Vec<&ProbabilityMap<T>> = maps
            .iter()
            .zip(&map)
            .filter(|(_, &m)| m as usize == mid_idx)
            .map(|(p, _)| p)
            .collect();
        let Some(first) = members.first() else { continue };
        let mut merged = (*first).clone();
        merged.concept_name = mid.clone();
        for m in &members[1..] {
            for (a, &b) in merged.values.iter_mut().zip(&m.values) {
                if b > *a {
                    *a = b;
                }
            }
        }
        out.push(merged);
        labels.push(mid.clone());
    }
    Ok((out, labels))
}
