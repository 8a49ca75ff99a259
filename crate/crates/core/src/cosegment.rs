//! Seed-pixel co-segmentation.
//!
//! Every archive pixel is scored by its mean best-match similarity against
//! each archive image (itself included); the top-scoring pixel of each image
//! is its seed, and the normalized mean of the seed features becomes the
//! reference embedding for the concept.
//!
//! The `khw x khw` adjacency matrix is never built. For each ordered image
//! pair `(i, j)` the similarities between the pixels of `i` and the
//! (gated) pixels of `j` are reduced by `max` tile by tile and folded into a
//! per-image [`SupportAccumulator`]. Peak extra memory is one `hw` vector per
//! worker.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::concept_probability;
use crate::scalar::{convert_slice, dot, normalize_in_place, to_f32_vec, Scalar};
use crate::tensor_io::{read_tensor, write_tensor};

/// L2-normalized dense features for one image, stored pixel-major
/// (`hw x d`) so that every pixel's channel vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap<T> {
    pub image_id: String,
    d: usize,
    h: usize,
    w: usize,
    pixels: Vec<T>,
    degenerate: Vec<bool>,
}

impl<T: Scalar> DenseFeatureMap<T> {
    /// Builds a map from channel-first `d x h x w` data, normalizing each
    /// pixel's channel vector. All-zero pixels stay zero and are flagged.
    pub fn from_channel_first(
        image_id: impl Into<String>,
        d: usize,
        h: usize,
        w: usize,
        data: &[T],
    ) -> Result<Self> {
        let image_id = image_id.into();
        if d == 0 || h == 0 || w == 0 || data.len() != d * h * w {
            return Err(Error::arg(format!(
                "feature map `{image_id}`: {} values do not fit {d}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("feature map `{image_id}` has non-finite values")));
        }
        let hw = h * w;
        let mut pixels = vec![T::zero(); hw * d];
        for c in 0..d {
            let plane = &data[c * hw..(c + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                pixels[p * d + c] = v;
            }
        }
        let degenerate = pixels
            .chunks_exact_mut(d)
            .map(|px| normalize_in_place(px) == T::zero())
            .collect();
        Ok(Self { image_id, d, h, w, pixels, degenerate })
    }

    /// Builds a map from pixel-major `hw x d` data.
    pub fn from_pixels(image_id: impl Into<String>, d: usize, h: usize, w: usize, pixels: &[T]) -> Result<Self> {
        if d == 0 || pixels.len() != d * h * w {
            return Err(Error::arg("pixel data does not fit the declared extent"));
        }
        let hw = h * w;
        let mut cf = vec![T::zero(); hw * d];
        for p in 0..hw {
            for c in 0..d {
                cf[c * hw + p] = pixels[p * d + c];
            }
        }
        Self::from_channel_first(image_id, d, h, w, &cf)
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn num_pixels(&self) -> usize {
        self.h * self.w
    }

    /// Unit channel vector at row-major pixel index `p` (zero if degenerate).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.pixels[p * self.d..(p + 1) * self.d]
    }

    pub fn is_degenerate(&self, p: usize) -> bool {
        self.degenerate[p]
    }

    pub fn all_degenerate(&self) -> bool {
        self.degenerate.iter().all(|&z| z)
    }

    /// Channel-first copy of the normalized data.
    pub fn to_channel_first(&self) -> Vec<T> {
        let hw = self.num_pixels();
        let mut out = vec![T::zero(); hw * self.d];
        for p in 0..hw {
            for (c, &v) in self.pixel(p).iter().enumerate() {
                out[c * hw + p] = v;
            }
        }
        out
    }

    /// Loads a `d x h x w` RTNS tensor.
    pub fn load(image_id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(path)?;
        let s = t.expect_rank(3, "dense feature map")?;
        let (d, h, w) = (s[0], s[1], s[2]);
        Self::from_channel_first(image_id, d, h, w, &convert_slice::<T>(&t.data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&[self.d, self.h, self.w], &to_f32_vec(&self.to_channel_first()), path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    Saliency,
    ContextComplement,
    Composed,
}

/// Per-pixel multiplier in `[0, 1]` applied to candidate-pixel similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMap<T> {
    h: usize,
    w: usize,
    values: Vec<T>,
    pub kind: GateKind,
}

impl<T: Scalar> GateMap<T> {
    pub fn new(h: usize, w: usize, values: Vec<T>, kind: GateKind) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::arg(format!("gate of {} values does not fit {h}x{w}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::arg(format!("gate value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, values, kind })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { h, w, values: vec![T::one(); h * w], kind: GateKind::Composed }
    }

    /// `1 - P` for a background probability map `P`.
    pub fn context_complement(h: usize, w: usize, probability: &[T]) -> Result<Self> {
        let values = probability.iter().map(|&p| T::one() - p).collect();
        Self::new(h, w, values, GateKind::ContextComplement)
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Loads an `h x w` (or `1 x h x w`) RTNS tensor.
    pub fn load(path: impl AsRef<Path>, kind: GateKind) -> Result<Self> {
        let t = read_tensor(path)?;
        let (h, w) = match t.shape.as_slice() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Format(format!("gate map must be h x w, got shape {s:?}"))),
        };
        Self::new(h, w, convert_slice(&t.data), kind)
    }

    /// Nearest-neighbour resample to another extent.
    pub fn resized(&self, h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: crate::grid::resize_nearest(&self.values, self.h, self.w, h, w),
            kind: self.kind,
        }
    }
}

/// Elementwise product of `gates`; an empty list yields the all-ones gate.
///
/// Factors are multiplied per pixel in ascending value order, so the result
/// is bit-identical under any permutation of `gates`.
pub fn compose_gates<T: Scalar>(extent: (usize, usize), gates: &[&GateMap<T>]) -> Result<GateMap<T>> {
    let (h, w) = extent;
    if let Some(g) = gates.iter().find(|g| g.extent() != extent) {
        return Err(Error::arg(format!(
            "gate extent {:?} does not match {:?}",
            g.extent(),
            extent
        )));
    }
    let mut out = GateMap::ones(h, w);
    if gates.is_empty() {
        return Ok(out);
    }
    let mut factors = Vec::with_capacity(gates.len());
    for (p, slot) in out.values.iter_mut().enumerate() {
        factors.clear();
        factors.extend(gates.iter().map(|g| g.values[p]));
        factors.sort_by(|a, b| a.partial_cmp(b).expect("gate values are finite"));
        *slot = factors.iter().fold(T::one(), |acc, &f| acc * f);
    }
    Ok(out)
}

/// Controls how the pairwise reductions are tiled and scheduled. Results do
/// not depend on the schedule: `max` is exact and every per-image mean sums
/// its terms in archive order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    /// Target pixels per tile.
    pub target_tile: usize,
    /// Candidate pixels per tile.
    pub candidate_tile: usize,
    /// Process target images on the rayon pool.
    pub parallel: bool,
}

impl Default for BlockSchedule {
    fn default() -> Self {
        Self { target_tile: 64, candidate_tile: 256, parallel: true }
    }
}

/// For each pixel `p` of `target`: `max_q <F_target(p), F_candidate(q)> * gate(q)`.
pub fn pairwise_block_max<T: Scalar>(
    target: &DenseFeatureMap<T>,
    candidate: &DenseFeatureMap<T>,
    gate: Option<&GateMap<T>>,
) -> Result<Vec<T>> {
    pairwise_block_max_tiled(target, candidate, gate, &BlockSchedule::default())
}

pub fn pairwise_block_max_tiled<T: Scalar>(
    target: &DenseFeatureMap<T>,
    candidate: &DenseFeatureMap<T>,
    gate: Option<&GateMap<T>>,
    schedule: &BlockSchedule,
) -> Result<Vec<T>> {
    if target.d != candidate.d {
        return Err(Error::arg(format!(
            "channel mismatch: `{}` has {} channels, `{}` has {}",
            target.image_id, target.d, candidate.image_id, candidate.d
        )));
    }
    if let Some(g) = gate {
        if g.extent() != candidate.extent() {
            return Err(Error::arg(format!(
                "gate extent {:?} does not match candidate `{}` extent {:?}",
                g.extent(),
                candidate.image_id,
                candidate.extent()
            )));
        }
    }
    let mut out = vec![T::neg_infinity(); target.num_pixels()];
    max_reduce_into(target, candidate, gate.map(|g| g.values()), schedule, &mut out);
    Ok(out)
}

fn max_reduce_into<T: Scalar>(
    target: &DenseFeatureMap<T>,
    candidate: &DenseFeatureMap<T>,
    gate: Option<&[T]>,
    schedule: &BlockSchedule,
    out: &mut [T],
) {
    let tt = schedule.target_tile.max(1);
    let ct = schedule.candidate_tile.max(1);
    let n_t = target.num_pixels();
    let n_c = candidate.num_pixels();
    for t0 in (0..n_t).step_by(tt) {
        let t1 = (t0 + tt).min(n_t);
        for c0 in (0..n_c).step_by(ct) {
            let c1 = (c0 + ct).min(n_c);
            for (p, best) in (t0..t1).zip(out[t0..t1].iter_mut()) {
                let fp = target.pixel(p);
                for q in c0..c1 {
                    let mut s = dot(fp, candidate.pixel(q));
                    if let Some(g) = gate {
                        s *= g[q];
                    }
                    if s > *best {
                        *best = s;
                    }
                }
            }
        }
    }
}

/// Running sum of per-image max similarities for one archive image.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportAccumulator<T> {
    pub support_sum: Vec<T>,
    pub images_seen: usize,
}

impl<T: Scalar> SupportAccumulator<T> {
    pub fn new(num_pixels: usize) -> Self {
        Self { support_sum: vec![T::zero(); num_pixels], images_seen: 0 }
    }

    pub fn add(&mut self, block_max: &[T]) {
        debug_assert_eq!(block_max.len(), self.support_sum.len());
        for (s, &m) in self.support_sum.iter_mut().zip(block_max) {
            *s += m;
        }
        self.images_seen += 1;
    }

    pub fn mean(&self) -> Vec<T> {
        let n = T::from_count(self.images_seen.max(1));
        self.support_sum.iter().map(|&s| s / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seed<T> {
    pub image_id: String,
    pub y: usize,
    pub x: usize,
    pub support: T,
    #[serde(skip_serializing_if = "Vec::is_empty", default = "Vec::new")]
    pub feature: Vec<T>,
}

/// One seed per archive image, in archive order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSet<T> {
    pub seeds: Vec<Seed<T>>,
}

impl<T: Scalar> SeedSet<T> {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn coordinates(&self) -> Vec<(usize, usize)> {
        self.seeds.iter().map(|s| (s.y, s.x)).collect()
    }

    /// Seed record without feature vectors, for JSON output.
    pub fn summary(&self) -> SeedSet<f64> {
        SeedSet {
            seeds: self
                .seeds
                .iter()
                .map(|s| Seed {
                    image_id: s.image_id.clone(),
                    y: s.y,
                    x: s.x,
                    support: s.support.as_f64(),
                    feature: Vec::new(),
                })
                .collect(),
        }
    }
}

fn check_archive<T: Scalar>(maps: &[DenseFeatureMap<T>], gates: Option<&[GateMap<T>]>) -> Result<()> {
    let first = maps.first().ok_or_else(|| Error::arg("empty archive"))?;
    if let Some(m) = maps.iter().find(|m| m.d != first.d) {
        return Err(Error::arg(format!(
            "channel mismatch in archive: `{}` has {} channels, `{}` has {}",
            first.image_id, first.d, m.image_id, m.d
        )));
    }
    if let Some(m) = maps.iter().find(|m| m.all_degenerate()) {
        return Err(Error::Degenerate(format!("feature map `{}` is all zeros", m.image_id)));
    }
    if let Some(gates) = gates {
        if gates.len() != maps.len() {
            return Err(Error::arg(format!("{} gates for {} archive images", gates.len(), maps.len())));
        }
        for (g, m) in gates.iter().zip(maps) {
            if g.extent() != m.extent() {
                return Err(Error::arg(format!(
                    "gate extent {:?} does not match `{}` extent {:?}",
                    g.extent(),
                    m.image_id,
                    m.extent()
                )));
            }
        }
    }
    Ok(())
}

/// Mean over all archive images (self included) of the gated best-match
/// similarity, for every pixel of every archive image.
pub fn mean_support<T: Scalar>(
    maps: &[DenseFeatureMap<T>],
    gates: Option<&[GateMap<T>]>,
    schedule: &BlockSchedule,
) -> Result<Vec<Vec<T>>> {
    check_archive(maps, gates)?;
    let per_image = |i: usize| -> Vec<T> {
        let target = &maps[i];
        let mut acc = SupportAccumulator::new(target.num_pixels());
        let mut block = vec![T::zero(); target.num_pixels()];
        for (j, candidate) in maps.iter().enumerate() {
            block.fill(T::neg_infinity());
            let gate = gates.map(|g| g[j].values());
            max_reduce_into(target, candidate, gate, schedule, &mut block);
            acc.add(&block);
        }
        acc.mean()
    };
    Ok(if schedule.parallel {
        (0..maps.len()).into_par_iter().map(per_image).collect()
    } else {
        (0..maps.len()).map(per_image).collect()
    })
}

/// Picks one seed per archive image: the non-degenerate pixel with maximal
/// mean support, ties going to the smallest row-major index.
pub fn select_seeds<T: Scalar>(
    maps: &[DenseFeatureMap<T>],
    gates: Option<&[GateMap<T>]>,
    schedule: &BlockSchedule,
) -> Result<SeedSet<T>> {
    let support = mean_support(maps, gates, schedule)?;
    let seeds = maps
        .iter()
        .zip(&support)
        .map(|(m, s)| {
            let mut best: Option<usize> = None;
            for (p, &v) in s.iter().enumerate() {
                if m.is_degenerate(p) {
                    continue;
                }
                if best.is_none_or(|b| v > s[b]) {
                    best = Some(p);
                }
            }
            let p = best.expect("non-degenerate pixel exists");
            Seed {
                image_id: m.image_id.clone(),
                y: p / m.w,
                x: p % m.w,
                support: s[p],
                feature: m.pixel(p).to_vec(),
            }
        })
        .collect();
    Ok(SeedSet { seeds })
}

/// Unit-norm classifier direction for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEmbedding<T> {
    pub vector: Vec<T>,
    pub concept_name: String,
    pub k_used: usize,
}

impl<T: Scalar> ReferenceEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn renamed(&self, name: &str) -> Self {
        Self { concept_name: name.to_string(), ..self.clone() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&[self.vector.len()], &to_f32_vec(&self.vector), path)
    }

    /// Loads a rank-1 tensor, re-normalizing it.
    pub fn load(concept_name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(path)?;
        t.expect_rank(1, "reference embedding")?;
        let mut vector: Vec<T> = convert_slice(&t.data);
        if normalize_in_place(&mut vector) == T::zero() {
            return Err(Error::DegenerateReference);
        }
        Ok(Self { vector, concept_name: concept_name.into(), k_used: 0 })
    }
}

/// L2-normalized mean of the seed features.
pub fn build_reference<T: Scalar>(seeds: &SeedSet<T>, concept_name: &str) -> Result<ReferenceEmbedding<T>> {
    let first = seeds.seeds.first().ok_or_else(|| Error::arg("no seeds"))?;
    let d = first.feature.len();
    if d == 0 || seeds.seeds.iter().any(|s| s.feature.len() != d) {
        return Err(Error::arg("seed features missing or of unequal length"));
    }
    let mut sum = vec![T::zero(); d];
    for s in &seeds.seeds {
        for (a, &b) in sum.iter_mut().zip(&s.feature) {
            *a += b;
        }
    }
    let k = T::from_count(seeds.len());
    for a in sum.iter_mut() {
        *a /= k;
    }
    let norm = normalize_in_place(&mut sum);
    if norm <= T::epsilon() {
        return Err(Error::DegenerateReference);
    }
    Ok(ReferenceEmbedding { vector: sum, concept_name: concept_name.to_string(), k_used: seeds.len() })
}

/// `1 - sigmoid(<f_bg, F(p)>)` for each background reference.
pub fn context_gates<T: Scalar>(
    features: &DenseFeatureMap<T>,
    background: &[ReferenceEmbedding<T>],
) -> Result<Vec<GateMap<T>>> {
    background
        .iter()
        .map(|r| {
            let p = concept_probability(r, features)?;
            GateMap::context_complement(features.h, features.w, &p.values)
        })
        .collect()
}

/// Per-image candidate gates for an archive: language gates (if any) times
/// the context complements of `background`. `None` when neither applies.
pub fn archive_gates<T: Scalar>(
    features: &[DenseFeatureMap<T>],
    language: Option<&[GateMap<T>]>,
    background: &[ReferenceEmbedding<T>],
) -> Result<Option<Vec<GateMap<T>>>> {
    if language.is_none() && background.is_empty() {
        return Ok(None);
    }
    if language.is_some_and(|l| l.len() != features.len()) {
        return Err(Error::arg("one language gate per archive image is required"));
    }
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut parts = context_gates(f, background)?;
            if let Some(l) = language {
                parts.push(l[i].clone());
            }
            let refs: Vec<&GateMap<T>> = parts.iter().collect();
            compose_gates(f.extent(), &refs)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Archive of one background concept, ready for seeding.
#[derive(Debug, Clone)]
pub struct BackgroundArchive<T> {
    pub name: String,
    pub features: Vec<DenseFeatureMap<T>>,
    /// Language gates, one per archive image, when language gating is on.
    pub saliency: Option<Vec<GateMap<T>>>,
}

/// Reference embeddings for the shared background concepts, in configured order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackgroundReferences<T> {
    pub references: Vec<ReferenceEmbedding<T>>,
}

impl<T: Scalar> BackgroundReferences<T> {
    pub fn get(&self, name: &str) -> Option<&ReferenceEmbedding<T>> {
        self.references.iter().find(|r| r.concept_name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.references.iter().map(|r| r.concept_name.as_str()).collect()
    }

    /// When a target concept is itself a background concept its reference is
    /// replaced by the background one.
    pub fn substitute(&self, target: &str) -> Option<ReferenceEmbedding<T>> {
        self.get(target).map(|r| r.renamed(target))
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

/// Seeds each background concept using language gating only. Context
/// elimination never applies here: backgrounds are what it eliminates.
pub fn build_background_references<T: Scalar>(
    archives: &[BackgroundArchive<T>],
    schedule: &BlockSchedule,
) -> Result<BackgroundReferences<T>> {
    let references = archives
        .iter()
        .map(|a| {
            let seeds = select_seeds(&a.features, a.saliency.as_deref(), schedule)?;
            build_reference(&seeds, &a.name)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BackgroundReferences { references })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v: &[f64], id: &str) -> DenseFeatureMap<f64> {
        DenseFeatureMap::from_pixels(id, v.len(), 1, 1, v).unwrap()
    }

    fn random_map(rng: &mut impl rand::Rng, id: &str, d: usize, h: usize, w: usize) -> DenseFeatureMap<f64> {
        let data: Vec<f64> = (0..d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseFeatureMap::from_channel_first(id, d, h, w, &data).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let m = single(&[0.6, 0.8], "a");
        let out = pairwise_block_max(&m, &m, None).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gate_zeroes_output() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let a = random_map(&mut rng, "a", 4, 3, 3);
        let b = random_map(&mut rng, "b", 4, 2, 2);
        let g = GateMap::new(2, 2, vec![0.0; 4], GateKind::Saliency).unwrap();
        for v in pairwise_block_max(&a, &b, Some(&g)).unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn pairwise_matches_materialized_block() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let a = random_map(&mut rng, "a", 8, 4, 4);
        let b = random_map(&mut rng, "b", 8, 4, 4);
        let gv: Vec<f64> = (0..16).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let g = GateMap::new(4, 4, gv.clone(), GateKind::Saliency).unwrap();
        // materialize the 16x16 block, scale columns, reduce rows
        let block: Vec<Vec<f64>> = (0..16)
            .map(|p| (0..16).map(|q| dot(a.pixel(p), b.pixel(q)) * gv[q]).collect())
            .collect();
        let out = pairwise_block_max(&a, &b, Some(&g)).unwrap();
        for p in 0..16 {
            let m = block[p].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((out[p] - m).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let a = single(&[1.0, 0.0], "a");
        let b = single(&[1.0, 0.0, 0.0], "b");
        assert!(matches!(pairwise_block_max(&a, &b, None), Err(Error::Argument(_))));
        assert!(matches!(
            select_seeds(&[a, b], None, &BlockSchedule::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn compose_gate_arithmetic() {
        let s = GateMap::new(1, 2, vec![0.8, 0.8], GateKind::Saliency).unwrap();
        let c = GateMap::context_complement(1, 2, &[0.5, 0.5]).unwrap();
        let g = compose_gates((1, 2), &[&s, &c, &c]).unwrap();
        for v in g.values() {
            assert!((v - 0.2f64).abs() < 1e-12);
        }
        let ones: GateMap<f64> = compose_gates((1, 2), &[]).unwrap();
        assert_eq!(ones.values(), &[1.0, 1.0]);
        let unit = GateMap::new(1, 2, vec![1.0, 1.0], GateKind::Saliency).unwrap();
        assert_eq!(compose_gates((1, 2), &[&unit]).unwrap().values(), &[1.0, 1.0]);
        let no_bg = GateMap::context_complement(1, 2, &[0.0, 0.0]).unwrap();
        assert_eq!(compose_gates((1, 2), &[&s, &no_bg]).unwrap().values(), s.values());
        let other = GateMap::<f64>::ones(2, 1);
        assert!(compose_gates((1, 2), &[&s, &other]).is_err());
    }

    #[test]
    fn gate_values_must_be_in_unit_interval() {
        assert!(GateMap::new(1, 1, vec![1.5f32], GateKind::Saliency).is_err());
        assert!(GateMap::new(1, 1, vec![f32::NAN], GateKind::Saliency).is_err());
    }

    #[test]
    fn identical_single_pixels_seed_at_origin() {
        let v = [0.0, 1.0, 0.0];
        let seeds = select_seeds(&[single(&v, "a"), single(&v, "b")], None, &BlockSchedule::default()).unwrap();
        assert_eq!(seeds.coordinates(), vec![(0, 0), (0, 0)]);
        for s in &seeds.seeds {
            assert!((s.support - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_degenerate_archives_are_errors() {
        let empty: Vec<DenseFeatureMap<f64>> = vec![];
        assert!(matches!(select_seeds(&empty, None, &BlockSchedule::default()), Err(Error::Argument(_))));
        let zero = DenseFeatureMap::from_channel_first("dead", 2, 1, 2, &[0.0f64; 4]).unwrap();
        match select_seeds(&[single(&[1.0, 0.0], "a"), zero], None, &BlockSchedule::default()) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("dead")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_pixels_are_never_seeds() {
        // pixel 0 is zero; pixel 1 points away from the other image
        let a = DenseFeatureMap::from_pixels("a", 2, 1, 2, &[0.0, 0.0, -1.0, 0.0]).unwrap();
        let b = single(&[1.0, 0.0], "b");
        let seeds = select_seeds(&[a, b], None, &BlockSchedule::default()).unwrap();
        assert_eq!(seeds.seeds[0].x, 1);
    }

    #[test]
    fn reference_of_orthogonal_pair() {
        let set = SeedSet {
            seeds: vec![
                Seed { image_id: "a".into(), y: 0, x: 0, support: 1.0, feature: vec![1.0, 0.0] },
                Seed { image_id: "b".into(), y: 0, x: 0, support: 1.0, feature: vec![0.0, 1.0] },
            ],
        };
        let r = build_reference(&set, "c").unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.vector[0] - h).abs() < 1e-12 && (r.vector[1] - h).abs() < 1e-12);
        assert_eq!(r.k_used, 2);
    }

    #[test]
    fn cancelling_seeds_are_degenerate() {
        let set = SeedSet {
            seeds: vec![
                Seed { image_id: "a".into(), y: 0, x: 0, support: 1.0, feature: vec![1.0, 0.0] },
                Seed { image_id: "b".into(), y: 0, x: 0, support: 1.0, feature: vec![-1.0, 0.0] },
            ],
        };
        assert!(matches!(build_reference(&set, "c"), Err(Error::DegenerateReference)));
    }

    #[test]
    fn background_references_and_substitution() {
        let v = [0.0, 0.0, 1.0];
        let names = ["tree", "sky", "building", "road", "person"];
        let archives: Vec<_> = names
            .iter()
            .map(|n| BackgroundArchive {
                name: n.to_string(),
                features: vec![single(&v, "x"), single(&v, "y")],
                saliency: None,
            })
            .collect();
        let refs = build_background_references(&archives, &BlockSchedule::default()).unwrap();
        assert_eq!(refs.names(), names.to_vec());
        assert_eq!(refs.get("sky").unwrap().vector, v.to_vec());
        let sub = refs.substitute("road").unwrap();
        assert_eq!(sub.concept_name, "road");
        assert_eq!(sub.vector, v.to_vec());
        assert!(refs.substitute("cat").is_none());
    }

    #[test]
    fn feature_map_round_trips_through_disk() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let m = random_map(&mut rng, "a", 3, 2, 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rtns");
        m.save(&p).unwrap();
        let back: DenseFeatureMap<f64> = DenseFeatureMap::load("a", &p).unwrap();
        for q in 0..10 {
            for (x, y) in back.pixel(q).iter().zip(m.pixel(q)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn schedules_agree_exactly(seed in any::<u64>(), tt in 1usize..20, ct in 1usize..20) {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let maps: Vec<_> = (0..3).map(|i| random_map(&mut rng, &format!("m{i}"), 5, 3 + i, 4)).collect();
            let a = mean_support(&maps, None, &BlockSchedule { target_tile: tt, candidate_tile: ct, parallel: false }).unwrap();
            let b = mean_support(&maps, None, &BlockSchedule::default()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn reference_is_unit_and_permutation_invariant(seed in any::<u64>(), k in 1usize..12) {
            use rand::seq::SliceRandom;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let mut seeds: Vec<Seed<f64>> = (0..k).map(|i| {
                let mut f: Vec<f64> = (0..6).map(|_| rand::Rng::random_range(&mut rng, 0.1..1.0)).collect();
                normalize_in_place(&mut f);
                Seed { image_id: format!("{i}"), y: 0, x: 0, support: 0.0, feature: f }
            }).collect();
            let r1 = build_reference(&SeedSet { seeds: seeds.clone() }, "c").unwrap();
            seeds.shuffle(&mut rng);
            let r2 = build_reference(&SeedSet { seeds }, "c").unwrap();
            prop_assert!((crate::scalar::l2_norm(&r1.vector) - 1.0).abs() < 1e-6);
            for (a, b) in r1.vector.iter().zip(&r2.vector) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn gates_are_monotone_on_nonnegative_features(seed in any::<u64>(), bump in 0.0f64..1.0) {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let pos = |rng: &mut rand_chacha::ChaCha8Rng, id: &str| {
                let data: Vec<f64> = (0..4 * 9).map(|_| rand::Rng::random_range(rng, 0.0..1.0)).collect();
                DenseFeatureMap::from_channel_first(id, 4, 3, 3, &data).unwrap()
            };
            let a = pos(&mut rng, "a");
            let b = pos(&mut rng, "b");
            let lo: Vec<f64> = (0..9).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|g| (g + bump).min(1.0)).collect();
            let lo_out = pairwise_block_max(&a, &b, Some(&GateMap::new(3, 3, lo, GateKind::Saliency).unwrap())).unwrap();
            let hi_out = pairwise_block_max(&a, &b, Some(&GateMap::new(3, 3, hi, GateKind::Saliency).unwrap())).unwrap();
            for (l, h) in lo_out.iter().zip(&hi_out) {
                prop_assert!(h >= l);
            }
        }
    }
}
