//! Fully connected CRF refinement with mean-field inference.
//!
//! Potts compatibility with an appearance kernel (position + colour) and a
//! smoothness kernel (position only). Messages are summed directly over all
//! pixel pairs, optionally restricted to a square window, which keeps the
//! cost at `O(N^2 C)` per iteration; callers bound `N` through the working
//! resolution.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fit_within, resize_nearest};
use crate::inference::{argmax_mask, ProbabilityMap, SegmentationMask};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub iterations: usize,
    pub appearance_weight: f64,
    /// Spatial bandwidth of the appearance kernel, in pixels.
    pub appearance_spatial_sigma: f64,
    /// Colour bandwidth of the appearance kernel, in intensity units.
    pub appearance_color_sigma: f64,
    pub smoothness_weight: f64,
    pub smoothness_sigma: f64,
    /// Only pixels within this Chebyshev distance exchange messages.
    pub radius: Option<usize>,
    /// Longest side of the grid the CRF runs on; larger inputs are
    /// nearest-downsampled and the result upsampled back.
    pub working_max_side: Option<usize>,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 10,
            appearance_weight: 10.0,
            appearance_spatial_sigma: 80.0,
            appearance_color_sigma: 13.0,
            smoothness_weight: 3.0,
            smoothness_sigma: 3.0,
            radius: None,
            working_max_side: Some(64),
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > 100 {
            return Err(Error::arg(format!("{} iterations exceeds the limit of 100", self.iterations)));
        }
        let sigmas = [self.appearance_spatial_sigma, self.appearance_color_sigma, self.smoothness_sigma];
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::arg("CRF sigmas must be positive and finite"));
        }
        let weights = [self.appearance_weight, self.smoothness_weight];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::arg("CRF weights must be non-negative and finite"));
        }
        if self.working_max_side == Some(0) {
            return Err(Error::arg("working_max_side must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: Self = crate::tensor_io::read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    fn has_pairwise(&self) -> bool {
        self.iterations > 0 && (self.appearance_weight > 0.0 || self.smoothness_weight > 0.0)
    }
}

/// `h x w x 3` intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbField<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> RgbField<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::arg(format!("{} intensities do not fit {h}x{w}x3", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|v| T::from_count(v as usize)).collect();
        Self::new(h, w, data)
    }

    pub fn resized(&self, h: usize, w: usize) -> Self {
        let px: Vec<[T; 3]> = self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let data = resize_nearest(&px, self.h, self.w, h, w).into_iter().flatten().collect();
        Self { h, w, data }
    }

    #[inline]
    fn color(&self, p: usize) -> &[T] {
        &self.data[3 * p..3 * p + 3]
    }
}

/// Mean-field state `Q`, stored `C x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution<T> {
    pub labels: usize,
    pub h: usize,
    pub w: usize,
    pub q: Vec<T>,
}

impl<T: Scalar> LabelDistribution<T> {
    fn n(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn get(&self, label: usize, p: usize) -> T {
        self.q[label * self.n() + p]
    }

    /// Largest deviation of any pixel's label sum from 1, and the smallest entry.
    pub fn normalization_error(&self) -> (T, T) {
        let n = self.n();
        let mut worst = T::zero();
        let mut min = T::infinity();
        for p in 0..n {
            let mut s = T::zero();
            for l in 0..self.labels {
                let v = self.q[l * n + p];
                s += v;
                min = min.min(v);
            }
            worst = worst.max((s - T::one()).abs());
        }
        (worst, min)
    }

    pub fn argmax(&self) -> Vec<u16> {
        let n = self.n();
        (0..n)
            .map(|p| {
                let mut best = 0;
                for l in 1..self.labels {
                    if self.q[l * n + p] > self.q[best * n + p] {
                        best = l;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// `-log` of the per-pixel renormalized probabilities, `C x h x w`.
/// Pixels whose maps are all zero get a uniform unary.
pub fn unary_from_probabilities<T: Scalar>(maps: &[ProbabilityMap<T>]) -> Result<LabelDistribution<T>> {
    if maps.len() < 2 {
        return Err(Error::arg(format!("CRF needs at least 2 labels, got {}", maps.len())));
    }
    let (h, w) = maps[0].extent();
    if let Some(m) = maps.iter().find(|m| m.extent() != (h, w)) {
        return Err(Error::arg(format!("map `{}` extent {:?} differs from {:?}", m.concept_name, m.extent(), (h, w))));
    }
    let n = h * w;
    let c = maps.len();
    let floor = T::lit(1e-10);
    let uniform = -(T::one() / T::from_count(c)).ln();
    let mut u = vec![T::zero(); c * n];
    let mut dead = 0usize;
    for p in 0..n {
        let total: T = maps.iter().map(|m| m.values[p]).sum();
        if !(total > T::zero() && total.is_finite()) {
            dead += 1;
            for l in 0..c {
                u[l * n + p] = uniform;
            }
            continue;
        }
        for (l, m) in maps.iter().enumerate() {
            u[l * n + p] = -(m.values[p] / total).max(floor).ln();
        }
    }
    if dead > 0 {
        warn!("CRF: {dead} pixel(s) with no probability mass, using a uniform unary");
    }
    Ok(LabelDistribution { labels: c, h, w, q: u })
}

fn softmax_neg<T: Scalar>(energy: &mut [T]) {
    let min = energy.iter().cloned().fold(T::infinity(), T::min);
    let mut sum = T::zero();
    for e in energy.iter_mut() {
        *e = (min - *e).exp();
        sum += *e;
    }
    for e in energy.iter_mut() {
        *e /= sum;
    }
}

struct Kernel<'a, T> {
    image: &'a RgbField<T>,
    w1: T,
    w2: T,
    inv_alpha: T,
    inv_beta: T,
    inv_gamma: T,
    radius: Option<usize>,
}

impl<'a, T: Scalar> Kernel<'a, T> {
    fn new(image: &'a RgbField<T>, params: &CrfParams) -> Self {
        let inv = |s: f64| T::lit(1.0 / (2.0 * s * s));
        Self {
            image,
            w1: T::lit(params.appearance_weight),
            w2: T::lit(params.smoothness_weight),
            inv_alpha: inv(params.appearance_spatial_sigma),
            inv_beta: inv(params.appearance_color_sigma),
            inv_gamma: inv(params.smoothness_sigma),
            radius: params.radius,
        }
    }

    #[inline]
    fn eval(&self, i: usize, j: usize) -> T {
        let w = self.image.w;
        let (yi, xi) = (i / w, i % w);
        let (yj, xj) = (j / w, j % w);
        let dy = T::from_count(yi.abs_diff(yj));
        let dx = T::from_count(xi.abs_diff(xj));
        let d2 = dy * dy + dx * dx;
        let (ci, cj) = (self.image.color(i), self.image.color(j));
        let mut c2 = T::zero();
        for k in 0..3 {
            let d = ci[k] - cj[k];
            c2 += d * d;
        }
        self.w1 * (-(d2 * self.inv_alpha) - c2 * self.inv_beta).exp() + self.w2 * (-(d2 * self.inv_gamma)).exp()
    }

    /// Neighbours of `i` in ascending index order.
    fn neighbours(&self, i: usize) -> Box<dyn Iterator<Item = usize> + '_> {
        let (h, w) = (self.image.h, self.image.w);
        match self.radius {
            None => Box::new((0..h * w).filter(move |&j| j != i)),
            Some(r) => {
                let (y, x) = (i / w, i % w);
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                Box::new(
                    (y0..=y1)
                        .flat_map(move |yy| (x0..=x1).map(move |xx| yy * w + xx))
                        .filter(move |&j| j != i),
                )
            }
        }
    }
}

/// One mean-field update: `Q_i(l) ∝ exp(-U_i(l) + Σ_{j≠i} k(i,j) Q_j(l))`.
pub fn mean_field_step<T: Scalar>(
    q: &LabelDistribution<T>,
    unary: &LabelDistribution<T>,
    image: &RgbField<T>,
    params: &CrfParams,
) -> LabelDistribution<T> {
    let kernel = Kernel::new(image, params);
    let (c, n) = (q.labels, q.n());
    let per_pixel: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut msg = vec![T::zero(); c];
            for j in kernel.neighbours(i) {
                let k = kernel.eval(i, j);
                for (l, m) in msg.iter_mut().enumerate() {
                    *m += k * q.q[l * n + j];
                }
            }
            let mut energy: Vec<T> = (0..c).map(|l| unary.q[l * n + i] - msg[l]).collect();
            softmax_neg(&mut energy);
            energy
        })
        .collect();
    let mut out = vec![T::zero(); c * n];
    for (i, dist) in per_pixel.into_iter().enumerate() {
        for (l, v) in dist.into_iter().enumerate() {
            out[l * n + i] = v;
        }
    }
    LabelDistribution { labels: c, h: q.h, w: q.w, q: out }
}

/// Full trace of a refinement, for inspection and testing.
#[derive(Debug, Clone)]
pub struct CrfOutcome<T> {
    pub mask: SegmentationMask,
    pub distribution: LabelDistribution<T>,
    /// `(max |Σ_l Q - 1|, min Q)` after each iteration.
    pub normalization: Vec<(T, T)>,
}

/// Refines at the extent of the inputs (no working-resolution resampling).
pub fn refine_detailed<T: Scalar>(
    maps: &[ProbabilityMap<T>],
    image: &RgbField<T>,
    params: &CrfParams,
) -> Result<CrfOutcome<T>> {
    params.validate()?;
    let unary = unary_from_probabilities(maps)?;
    if (image.h, image.w) != (unary.h, unary.w) {
        return Err(Error::arg(format!(
            "image extent {:?} does not match map extent {:?}",
            (image.h, image.w),
            (unary.h, unary.w)
        )));
    }
    let n = unary.n();
    let mut q = unary.clone();
    for p in 0..n {
        let mut e: Vec<T> = (0..q.labels).map(|l| unary.q[l * n + p]).collect();
        softmax_neg(&mut e);
        for (l, v) in e.into_iter().enumerate() {
            q.q[l * n + p] = v;
        }
    }
    let mut normalization = Vec::new();
    if params.has_pairwise() {
        for _ in 0..params.iterations {
            q = mean_field_step(&q, &unary, image, params);
            normalization.push(q.normalization_error());
        }
    }
    let labels: Vec<String> = maps.iter().map(|m| m.concept_name.clone()).collect();
    // without coupling the result is the unary argmax, taken on the raw maps
    // so that renormalization rounding cannot reorder near-ties
    let mask = if params.has_pairwise() {
        SegmentationMask::new(q.h, q.w, q.argmax(), labels)?
    } else {
        argmax_mask(maps, &labels)?
    };
    Ok(CrfOutcome { mask, distribution: q, normalization })
}

/// Refines fused maps into a mask at the maps' extent, running the CRF at
/// the configured working resolution.
pub fn refine<T: Scalar>(maps: &[ProbabilityMap<T>], image: &RgbField<T>, params: &CrfParams) -> Result<SegmentationMask> {
    params.validate()?;
    let first = maps.first().ok_or_else(|| Error::arg("CRF needs at least 2 labels, got 0"))?;
    let (h, w) = first.extent();
    if (image.h, image.w) != (h, w) {
        return Err(Error::arg(format!(
            "image extent {:?} does not match map extent {:?}",
            (image.h, image.w),
            (h, w)
        )));
    }
    let (wh, ww) = params.working_max_side.map_or((h, w), |m| fit_within(h, w, m));
    if (wh, ww) == (h, w) {
        return Ok(refine_detailed(maps, image, params)?.mask);
    }
    let small: Vec<ProbabilityMap<T>> = maps.iter().map(|m| m.resized(wh, ww)).collect();
    let small_image = image.resized(wh, ww);
    Ok(refine_detailed(&small, &small_image, params)?.mask.resized(h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_instance(seed: u64, c: usize, h: usize, w: usize) -> (Vec<ProbabilityMap<f64>>, RgbField<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let maps = (0..c)
            .map(|l| {
                let v = (0..h * w).map(|_| rng.random_range(0.01..1.0)).collect();
                ProbabilityMap::new(h, w, v, format!("l{l}")).unwrap()
            })
            .collect();
        let img = (0..h * w * 3).map(|_| rng.random_range(0.0..255.0)).collect();
        (maps, RgbField::new(h, w, img).unwrap())
    }

    fn unary_argmax(maps: &[ProbabilityMap<f64>]) -> Vec<u16> {
        let names: Vec<String> = maps.iter().map(|m| m.concept_name.clone()).collect();
        crate::inference::argmax_mask(maps, &names).unwrap().indices
    }

    #[test]
    fn zero_pairwise_is_unary_argmax() {
        let (maps, img) = random_instance(1, 3, 5, 6);
        let p = CrfParams { appearance_weight: 0.0, smoothness_weight: 0.0, ..CrfParams::default() };
        assert_eq!(refine(&maps, &img, &p).unwrap().indices, unary_argmax(&maps));
        let p0 = CrfParams { iterations: 0, ..CrfParams::default() };
        assert_eq!(refine(&maps, &img, &p0).unwrap().indices, unary_argmax(&maps));
    }

    #[test]
    fn rejects_single_label_and_bad_params() {
        let (maps, img) = random_instance(2, 2, 3, 3);
        assert!(refine(&maps[..1], &img, &CrfParams::default()).is_err());
        let bad = CrfParams { smoothness_sigma: 0.0, ..CrfParams::default() };
        assert!(refine(&maps, &img, &bad).is_err());
        let many = CrfParams { iterations: 101, ..CrfParams::default() };
        assert!(refine(&maps, &img, &many).is_err());
        let small = RgbField::new(2, 2, vec![0.0; 12]).unwrap();
        assert!(refine(&maps, &small, &CrfParams::default()).is_err());
    }

    #[test]
    fn dead_pixel_gets_uniform_unary() {
        let a = ProbabilityMap::new(1, 2, vec![0.0f64, 0.9], "a").unwrap();
        let b = ProbabilityMap::new(1, 2, vec![0.0f64, 0.1], "b").unwrap();
        let u = unary_from_probabilities(&[a, b]).unwrap();
        assert!((u.get(0, 0) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(u.get(0, 0), u.get(1, 0));
    }

    #[test]
    fn q_stays_normalized() {
        let (maps, img) = random_instance(3, 4, 6, 5);
        let out = refine_detailed(&maps, &img, &CrfParams { working_max_side: None, ..CrfParams::default() }).unwrap();
        assert_eq!(out.normalization.len(), 10);
        for (err, min) in out.normalization {
            assert!(err < 1e-5 && min >= 0.0);
        }
    }

    #[test]
    fn label_permutation_equivariance() {
        let (maps, img) = random_instance(4, 3, 5, 5);
        let params = CrfParams { working_max_side: None, ..CrfParams::default() };
        let a = refine(&maps, &img, &params).unwrap();
        let perm = [2usize, 0, 1];
        let shuffled: Vec<_> = perm.iter().map(|&i| maps[i].clone()).collect();
        let b = refine(&shuffled, &img, &params).unwrap();
        for (x, y) in a.indices.iter().zip(&b.indices) {
            assert_eq!(perm[*y as usize], *x as usize);
        }
    }

    #[test]
    fn radius_window_limits_neighbours() {
        let img = RgbField::new(4, 4, vec![0.0f64; 48]).unwrap();
        let params = CrfParams { radius: Some(1), ..CrfParams::default() };
        let k = Kernel::new(&img, &params);
        let corner: Vec<usize> = k.neighbours(0).collect();
        assert_eq!(corner, vec![1, 4, 5]);
        assert_eq!(k.neighbours(5).count(), 8);
    }

    #[test]
    fn working_resolution_returns_full_extent() {
        let (maps, img) = random_instance(5, 2, 12, 8);
        let params = CrfParams { working_max_side: Some(6), ..CrfParams::default() };
        let m = refine(&maps, &img, &params).unwrap();
        assert_eq!(m.extent(), (12, 8));
    }
}
