//! Exact top-k retrieval over a joint image/text embedding space.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{convert_slice, dot, normalize_in_place, Scalar};
use crate::tensor_io::{
    parent_dir, read_json, read_lines, read_tensor, resolve, write_json, ArchiveEntry,
    ArchiveManifest, IndexManifest, TENSOR_EXT,
};

/// A named retrieval query and saliency anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec<T> {
    pub name: String,
    pub text_embedding: Vec<T>,
    #[serde(default)]
    pub is_background: bool,
    /// Original category name when `name` is a less ambiguous rephrasing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rephrased_from: Option<String>,
}

impl<T: Scalar> ConceptSpec<T> {
    pub fn new(name: impl Into<String>, text_embedding: Vec<T>, is_background: bool) -> Result<Self> {
        Self {
            name: name.into(),
            text_embedding,
            is_background,
            rephrased_from: None,
        }
        .normalized()
    }

    /// Re-normalizes the text embedding; rejects empty, zero or non-finite ones.
    pub fn normalized(mut self) -> Result<Self> {
        if self.text_embedding.is_empty() {
            return Err(Error::arg(format!("concept `{}` has an empty embedding", self.name)));
        }
        if self.text_embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("concept `{}` has non-finite embedding", self.name)));
        }
        if normalize_in_place(&mut self.text_embedding) == T::zero() {
            return Err(Error::Degenerate(format!("concept `{}` has a zero embedding", self.name)));
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.text_embedding.len()
    }
}

impl ConceptSpec<f32> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json::<Self>(path)?.normalized()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

impl<T: Scalar> ConceptSpec<T> {
    pub fn cast<U: Scalar>(&self) -> ConceptSpec<U> {
        ConceptSpec {
            name: self.name.clone(),
            text_embedding: self.text_embedding.iter().map(|&x| U::lit(x.as_f64())).collect(),
            is_background: self.is_background,
            rephrased_from: self.rephrased_from.clone(),
        }
    }
}

/// N unit-norm rows with their image ids. Immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex<T> {
    dim: usize,
    embeddings: Vec<T>,
    ids: Vec<String>,
    labels: Option<Vec<String>>,
}

impl<T: Scalar> EmbeddingIndex<T> {
    /// Builds an index from a row-major `ids.len() x dim` matrix, re-normalizing every row.
    pub fn new(
        dim: usize,
        mut embeddings: Vec<T>,
        ids: Vec<String>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::arg("embedding index must contain at least one row"));
        }
        if dim == 0 || embeddings.len() != ids.len() * dim {
            return Err(Error::arg(format!(
                "embedding matrix of {} values does not match {} ids x dim {dim}",
                embeddings.len(),
                ids.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::arg(format!("{} labels for {} ids", l.len(), ids.len())));
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::arg(format!("duplicate id `{id}` in index")));
            }
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite value in embedding matrix".into()));
        }
        for (row, id) in embeddings.chunks_exact_mut(dim).zip(&ids) {
            if normalize_in_place(row) == T::zero() {
                return Err(Error::Degenerate(format!("zero embedding for id `{id}`")));
            }
        }
        Ok(Self { dim, embeddings, ids, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Dot product of every row against `query`.
    pub fn scores(&self, query: &[T]) -> Result<Vec<T>> {
        if query.len() != self.dim {
            return Err(Error::arg(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        Ok(self.embeddings.chunks_exact(self.dim).map(|r| dot(r, query)).collect())
    }

    /// Row positions of the `k` best-scoring rows, descending by score,
    /// ties broken by ascending position.
    pub fn top_k_positions(&self, query: &[T], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.len() {
            return Err(Error::arg(format!("k={k} must be in 1..={}", self.len())));
        }
        let scores = self.scores(query)?;
        let by_rank = |&a: &usize, &b: &usize| -> Ordering {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, by_rank);
            order.truncate(k);
        }
        order.sort_unstable_by(by_rank);
        Ok(order)
    }

    /// Ids of the `k` rows most similar to the concept.
    pub fn top_k(&self, query: &ConceptSpec<T>, k: usize) -> Result<Vec<String>> {
        Ok(self
            .top_k_positions(&query.text_embedding, k)?
            .into_iter()
            .map(|i| self.ids[i].clone())
            .collect())
    }

    /// Fraction of the top-k rows whose label equals `query_label`.
    pub fn precision_at_k(&self, query: &ConceptSpec<T>, query_label: &str, k: usize) -> Result<f64> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::arg("precision@k needs an index with labels"))?;
        let hits = self
            .top_k_positions(&query.text_embedding, k)?
            .into_iter()
            .filter(|&i| labels[i] == query_label)
            .count();
        Ok(hits as f64 / k as f64)
    }
}

impl<T: Scalar> EmbeddingIndex<T> {
    /// Loads an index described by an [`IndexManifest`] JSON file.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest: IndexManifest = read_json(manifest_path)?;
        let base = parent_dir(manifest_path);
        let t = read_tensor(resolve(&base, &manifest.embeddings))?;
        let shape = t.expect_rank(2, "embedding matrix")?;
        let dim = shape[1];
        let ids = read_lines(&resolve(&base, &manifest.ids))?;
        let labels = match &manifest.labels {
            Some(p) => Some(read_lines(&resolve(&base, p))?),
            None => None,
        };
        if ids.len() != shape[0] {
            return Err(Error::Manifest(format!(
                "{} ids for an embedding matrix with {} rows",
                ids.len(),
                shape[0]
            )));
        }
        Self::new(dim, convert_slice(&t.data), ids, labels)
    }
}

/// Path of the tensor for `id` under `root`, following the `<root>/<id>.rtns` convention.
pub fn tensor_path_for(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}.{TENSOR_EXT}"))
}

/// Retrieves the top-k images for `query` and resolves their feature files.
///
/// Value-feature paths are filled in when `value_root` is given and the file exists.
pub fn build_archive<T: Scalar>(
    index: &EmbeddingIndex<T>,
    query: &ConceptSpec<T>,
    k: usize,
    feature_root: &Path,
    value_root: Option<&Path>,
) -> Result<ArchiveManifest> {
    let ids = index.top_k(query, k)?;
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !tensor_path_for(feature_root, id).is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFeatures { missing });
    }
    let image_entries = ids
        .into_iter()
        .map(|id| {
            let value_feature_path = value_root
                .map(|r| tensor_path_for(r, &id))
                .filter(|p| p.is_file())
                .map(|p| p.to_string_lossy().into_owned());
            ArchiveEntry {
                feature_path: tensor_path_for(feature_root, &id).to_string_lossy().into_owned(),
                image_id: id,
                saliency_path: None,
                value_feature_path,
            }
        })
        .collect();
    let manifest = ArchiveManifest {
        concept_name: query.name.clone(),
        k,
        image_entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    fn two_axis() -> EmbeddingIndex<f64> {
        EmbeddingIndex::new(2, vec![1.0, 0.0, 0.0, 1.0], ids(2), None).unwrap()
    }

    #[test]
    fn aligned_query_picks_its_row() {
        let q = ConceptSpec::new("x", vec![1.0, 0.0], false).unwrap();
        assert_eq!(two_axis().top_k(&q, 1).unwrap(), vec!["img0"]);
    }

    #[test]
    fn ties_break_by_position() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = ConceptSpec::new("diag", vec![h, h], false).unwrap();
        assert_eq!(two_axis().top_k(&q, 2).unwrap(), vec!["img0", "img1"]);
        // reversed storage order flips the tie-break
        let rev = EmbeddingIndex::new(2, vec![0.0, 1.0, 1.0, 0.0], ids(2), None).unwrap();
        assert_eq!(rev.top_k(&q, 1).unwrap(), vec!["img0"]);
    }

    #[test]
    fn argument_errors() {
        let idx = two_axis();
        let q = ConceptSpec::new("x", vec![1.0, 0.0], false).unwrap();
        assert!(matches!(idx.top_k(&q, 3), Err(Error::Argument(_))));
        assert!(matches!(idx.top_k(&q, 0), Err(Error::Argument(_))));
        let q3 = ConceptSpec::new("x", vec![1.0, 0.0, 0.0], false).unwrap();
        assert!(matches!(idx.top_k(&q3, 1), Err(Error::Argument(_))));
        assert!(matches!(idx.precision_at_k(&q, "x", 1), Err(Error::Argument(_))));
    }

    #[test]
    fn index_renormalizes_and_rejects_duplicates() {
        let idx = EmbeddingIndex::new(2, vec![3.0f32, 4.0], ids(1), None).unwrap();
        assert!((crate::scalar::l2_norm(idx.row(0)) - 1.0).abs() < 1e-6);
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(EmbeddingIndex::new(1, vec![1.0f32, 1.0], dup, None).is_err());
        assert!(EmbeddingIndex::<f32>::new(1, vec![], vec![], None).is_err());
    }

    #[test]
    fn precision_extremes() {
        let labels = Some(vec!["a".to_string(), "b".to_string()]);
        let idx = EmbeddingIndex::new(2, vec![1.0, 0.0, 0.0, 1.0], ids(2), labels).unwrap();
        let q = ConceptSpec::new("a", vec![1.0, 0.0], false).unwrap();
        assert_eq!(idx.precision_at_k(&q, "a", 1).unwrap(), 1.0);
        assert_eq!(idx.precision_at_k(&q, "c", 2).unwrap(), 0.0);
        assert_eq!(idx.precision_at_k(&q, "a", 2).unwrap(), 0.5);
    }

    #[test]
    fn archive_lists_missing_ids() {
        let dir = tempfile::tempdir().unwrap();
        crate::tensor_io::write_tensor(&[1, 1, 1], &[1.0], dir.path().join("img0.rtns")).unwrap();
        let idx = two_axis();
        let q = ConceptSpec::new("x", vec![1.0, 0.0], false).unwrap();
        let m = build_archive(&idx, &q, 1, dir.path(), None).unwrap();
        assert_eq!(m.image_entries[0].image_id, "img0");
        match build_archive(&idx, &q, 2, dir.path(), None) {
            Err(Error::MissingFeatures { missing }) => assert_eq!(missing, vec!["img1"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn top_k_is_prefix_of_full_sort(
            raw in proptest::collection::vec(-1.0f64..1.0, 3 * 40),
            q in proptest::collection::vec(-1.0f64..1.0, 3),
            k in 1usize..40,
        ) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
            let rows: Vec<f64> = raw.iter().map(|x| if *x == 0.0 { 1e-3 } else { *x }).collect();
            let idx = EmbeddingIndex::new(3, rows, ids(40), None).unwrap();
            let c = ConceptSpec::new("q", q, false).unwrap();
            let s = idx.scores(&c.text_embedding).unwrap();
            let mut full: Vec<usize> = (0..40).collect();
            full.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(idx.top_k_positions(&c.text_embedding, k).unwrap(), full[..k].to_vec());
        }
    }
}
