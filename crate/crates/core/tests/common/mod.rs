//! Independent reference implementations and instance generators shared by
//! the integration tests. Nothing here calls into the streaming code paths.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use reco_core::cosegment::{DenseFeatureMap, GateKind, GateMap};

/// Raw channel-first archive image as generated, before any normalization.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn to_map(&self, id: &str) -> DenseFeatureMap<f64> {
        DenseFeatureMap::from_channel_first(id, self.d, self.h, self.w, &self.data).unwrap()
    }

    fn pixel(&self, p: usize) -> Vec<f64> {
        let n = self.h * self.w;
        (0..self.d).map(|c| self.data[c * n + p]).collect()
    }
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_archive(rng: &mut impl Rng, k: usize, d: usize, h: usize, w: usize) -> Vec<RawImage> {
    (0..k).map(|_| RawImage { d, h, w, data: gaussian(rng, d * h * w) }).collect()
}

pub fn random_gates(rng: &mut impl Rng, k: usize, h: usize, w: usize) -> Vec<GateMap<f64>> {
    (0..k)
        .map(|_| GateMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect(), GateKind::Saliency).unwrap())
        .collect()
}

/// Result of the naive oracle for one archive image.
#[derive(Debug, Clone)]
pub struct OracleSeed {
    pub y: usize,
    pub x: usize,
    pub support: f64,
}

/// Materializes the full `khw x khw` gated similarity matrix, reduces each
/// row block by max, averages over images and takes the first maximum among
/// non-zero pixels.
pub fn naive_seeds(images: &[RawImage], gates: Option<&[Vec<f64>]>) -> (Vec<OracleSeed>, Vec<Vec<f64>>) {
    let k = images.len();
    let n = images[0].h * images[0].w;
    let w = images[0].w;
    let feats: Vec<Vec<Vec<f64>>> = images.iter().map(|im| (0..n).map(|p| unit(&im.pixel(p))).collect()).collect();
    let rows = k * n;
    let mut adj = vec![0.0f64; rows * rows];
    for i in 0..k {
        for p in 0..n {
            for j in 0..k {
                for q in 0..n {
                    let g = gates.map_or(1.0, |g| g[j][q]);
                    adj[(i * n + p) * rows + j * n + q] = dot(&feats[i][p], &feats[j][q]) * g;
                }
            }
        }
    }
    let mut supports = Vec::with_capacity(k);
    let mut seeds = Vec::with_capacity(k);
    for i in 0..k {
        let mut support = vec![0.0; n];
        for (p, s) in support.iter_mut().enumerate() {
            let row = &adj[(i * n + p) * rows..(i * n + p + 1) * rows];
            let mut total = 0.0;
            for j in 0..k {
                total += row[j * n..(j + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            *s = total / k as f64;
        }
        let mut best: Option<usize> = None;
        for p in 0..n {
            if feats[i][p].iter().all(|&v| v == 0.0) {
                continue;
            }
            if best.is_none() || support[p] > support[best.unwrap()] {
                best = Some(p);
            }
        }
        let p = best.unwrap();
        seeds.push(OracleSeed { y: p / w, x: p % w, support: support[p] });
        supports.push(support);
    }
    (seeds, supports)
}

/// Planted-direction archive: one pixel per image carries `u`, the rest are
/// Gaussian vectors orthogonalized against `u`. Returns the archive, `u` and
/// the planted pixel index per image.
pub fn planted_archive(rng: &mut impl Rng, k: usize, d: usize, h: usize, w: usize) -> (Vec<RawImage>, Vec<f64>, Vec<usize>) {
    let n = h * w;
    let u = unit(&gaussian(rng, d));
    let mut images = Vec::with_capacity(k);
    let mut planted = Vec::with_capacity(k);
    for _ in 0..k {
        let at = rng.random_range(0..n);
        let mut data = vec![0.0; d * n];
        for p in 0..n {
            let v = if p == at {
                u.clone()
            } else {
                let g = gaussian(rng, d);
                let proj = dot(&g, &u);
                unit(&g.iter().zip(&u).map(|(a, b)| a - proj * b).collect::<Vec<_>>())
            };
            for c in 0..d {
                data[c * n + p] = v[c];
            }
        }
        images.push(RawImage { d, h, w, data });
        planted.push(at);
    }
    (images, u, planted)
}

/// One mean-field step for two pixels and two labels with only the
/// smoothness kernel, evaluated directly from the update rule.
/// `p` holds the input probabilities `[pixel][label]`.
pub fn two_pixel_step(p: [[f64; 2]; 2], weight: f64, sigma: f64, dist2: f64) -> [[f64; 2]; 2] {
    let u: Vec<[f64; 2]> = p
        .iter()
        .map(|pp| {
            let s = pp[0] + pp[1];
            [-(pp[0] / s).ln(), -(pp[1] / s).ln()]
        })
        .collect();
    let q0: Vec<[f64; 2]> = u
        .iter()
        .map(|uu| {
            let e = [(-uu[0]).exp(), (-uu[1]).exp()];
            [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
        })
        .collect();
    let kern = weight * (-dist2 / (2.0 * sigma * sigma)).exp();
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        let j = 1 - i;
        let e = [(-u[i][0] + kern * q0[j][0]).exp(), (-u[i][1] + kern * q0[j][1]).exp()];
        out[i] = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
    }
    out
}

/// Top-k by full stable sort on descending score, ties to the lower position.
pub fn full_sort_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Three well-separated clusters of unit embeddings with labels `c0..c2`.
pub fn three_clusters(rng: &mut impl Rng, per: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<String>, Vec<Vec<f64>>) {
    let centres: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let mut v = vec![0.0; dim];
            v[c] = 1.0;
            v
        })
        .collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per {
            let noise = gaussian(rng, dim);
            rows.push(unit(&centre.iter().zip(&noise).map(|(a, b)| a + 0.1 * b).collect::<Vec<_>>()));
            labels.push(format!("c{c}"));
        }
    }
    (rows, labels, centres)
}
