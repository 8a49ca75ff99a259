//! Text-anchored saliency from value features.
//!
//! Each pixel's value vector is projected into the joint space, normalized,
//! correlated with the normalized text embedding (a 1x1 convolution) and
//! squashed with a sigmoid. Concepts are scored independently, so there is
//! no softmax across them.

use std::path::Path;

use log::warn;

use crate::cosegment::{GateKind, GateMap};
use crate::error::{Error, Result};
use crate::retrieval::ConceptSpec;
use crate::scalar::{convert_slice, dot, normalize_in_place, sigmoid, to_f32_vec, Scalar};
use crate::tensor_io::{read_tensor, write_tensor};

/// `e_v x h x w` value features for one image, stored channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFeatureMap<T> {
    pub image_id: String,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ValueFeatureMap<T> {
    pub fn new(image_id: impl Into<String>, channels: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        let image_id = image_id.into();
        if channels == 0 || h == 0 || w == 0 || data.len() != channels * h * w {
            return Err(Error::arg(format!(
                "value map `{image_id}`: {} values do not fit {channels}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("value map `{image_id}` has non-finite values")));
        }
        Ok(Self { image_id, channels, h, w, data })
    }

    pub fn load(image_id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(path)?;
        let s = t.expect_rank(3, "value feature map")?;
        let (c, h, w) = (s[0], s[1], s[2]);
        Self::new(image_id, c, h, w, convert_slice(&t.data))
    }
}

/// The encoder's final linear projection, `e x e_v`, with an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ProjectionMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::arg(format!(
                "projection of {} values does not fit {rows}x{cols}",
                data.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != rows) {
            return Err(Error::arg("projection bias length must equal its row count"));
        }
        if data.iter().chain(bias.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("projection has non-finite values".into()));
        }
        Ok(Self { rows, cols, data, bias })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self { rows: n, cols: n, data, bias: None }
    }

    pub fn load(path: impl AsRef<Path>, bias_path: Option<&Path>) -> Result<Self> {
        let t = read_tensor(path)?;
        let s = t.expect_rank(2, "projection matrix")?;
        let (rows, cols) = (s[0], s[1]);
        let bias = match bias_path {
            Some(p) => {
                let b = read_tensor(p)?;
                b.expect_rank(1, "projection bias")?;
                Some(convert_slice(&b.data))
            }
            None => None,
        };
        Self::new(rows, cols, convert_slice(&t.data), bias)
    }
}

/// Per-pixel saliency in the open interval (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    pub h: usize,
    pub w: usize,
    pub values: Vec<T>,
    pub concept_name: String,
    /// Pixels whose projected vector was zero (assigned 0.5).
    pub degenerate_pixels: usize,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn as_gate(&self) -> Result<GateMap<T>> {
        GateMap::new(self.h, self.w, self.values.clone(), GateKind::Saliency)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&[self.h, self.w], &to_f32_vec(&self.values), path)
    }
}

pub fn dense_saliency<T: Scalar>(
    values: &ValueFeatureMap<T>,
    proj: &ProjectionMatrix<T>,
    concept: &ConceptSpec<T>,
) -> Result<SaliencyMap<T>> {
    if proj.cols != values.channels {
        return Err(Error::arg(format!(
            "projection expects {} value channels, `{}` has {}",
            proj.cols, values.image_id, values.channels
        )));
    }
    if concept.dim() != proj.rows {
        return Err(Error::arg(format!(
            "concept `{}` embedding has {} dims, projection outputs {}",
            concept.name,
            concept.dim(),
            proj.rows
        )));
    }
    let mut text = concept.text_embedding.clone();
    normalize_in_place(&mut text);

    let hw = values.h * values.w;
    let mut pixel = vec![T::zero(); values.channels];
    let mut projected = vec![T::zero(); proj.rows];
    let mut out = Vec::with_capacity(hw);
    let mut degenerate = 0;
    for p in 0..hw {
        for (c, slot) in pixel.iter_mut().enumerate() {
            *slot = values.data[c * hw + p];
        }
        for (r, slot) in projected.iter_mut().enumerate() {
            let row = &proj.data[r * proj.cols..(r + 1) * proj.cols];
            *slot = dot(row, &pixel) + proj.bias.as_ref().map_or(T::zero(), |b| b[r]);
        }
        let cos = if normalize_in_place(&mut projected) == T::zero() {
            degenerate += 1;
            T::zero()
        } else {
            dot(&projected, &text)
        };
        out.push(sigmoid(cos));
    }
    if degenerate > 0 {
        warn!(
            "saliency for `{}` on `{}`: {degenerate} pixel(s) projected to zero, set to 0.5",
            concept.name, values.image_id
        );
    }
    Ok(SaliencyMap {
        h: values.h,
        w: values.w,
        values: out,
        concept_name: concept.name.clone(),
        degenerate_pixels: degenerate,
    })
}
