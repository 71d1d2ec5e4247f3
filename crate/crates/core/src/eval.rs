//! Attack-success metrics over precomputed embeddings.
//!
//! Rankings break ties by ascending gallery index, so results are exactly
//! reproducible.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::EmbeddingBatch;

/// Cut-offs reported for both retrieval directions.
pub const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];

/// Correct gallery rows for each query row.
pub type GroundTruth = Vec<BTreeSet<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub data: Array2<f64>,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

fn default_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Cosine similarities `q_i · g_j` (rows are assumed unit-norm).
pub fn similarity_matrix(queries: &EmbeddingBatch, gallery: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    similarity_matrix_with_ids(queries, gallery, default_ids(queries.len()), default_ids(gallery.len()))
}

pub fn similarity_matrix_with_ids(
    queries: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    query_ids: Vec<String>,
    gallery_ids: Vec<String>,
) -> Result<SimilarityMatrix> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} vs gallery dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    if query_ids.len() != queries.len() || gallery_ids.len() != gallery.len() {
        return Err(Error::Dimension("id lists do not match embedding rows".into()));
    }
    Ok(SimilarityMatrix {
        data: queries.view().dot(&gallery.view().t()),
        query_ids,
        gallery_ids,
    })
}

/// Ground truth by id: gallery item `g` is correct for query `q` when
/// `g == q` or one of them is the other followed by `#suffix` (several
/// captions per image, e.g. `img7#0 … img7#4`).
pub fn ground_truth_from_ids(query_ids: &[String], gallery_ids: &[String]) -> GroundTruth {
    let base = |s: &str| s.split_once('#').map_or(s, |(b, _)| b).to_string();
    let mut by_base: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (j, g) in gallery_ids.iter().enumerate() {
        by_base.entry(base(g)).or_default().insert(j);
    }
    query_ids
        .iter()
        .map(|q| by_base.get(&base(q)).cloned().unwrap_or_default())
        .collect()
}

/// Percentage of queries whose top-`k` gallery items contain a correct one.
pub fn recall_at_k(sim: &SimilarityMatrix, ground_truth: &[BTreeSet<usize>], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let (q, g) = sim.data.dim();
    if ground_truth.len() != q {
        return Err(Error::InvalidInput(format!(
            "ground truth covers {} queries, similarity matrix has {q}",
            ground_truth.len()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > g) {
        return Err(Error::Config(format!("k = {k} is outside 1..={g} (gallery size)")));
    }
    // best rank of any correct item = number of items ranked ahead of it
    let mut best_ranks = Vec::with_capacity(q);
    for (i, truth) in ground_truth.iter().enumerate() {
        if truth.is_empty() {
            return Err(Error::InvalidInput(format!(
                "query {} has no ground-truth gallery item",
                sim.query_ids.get(i).map_or("?", |s| s.as_str())
            )));
        }
        let row = sim.data.row(i);
        let mut best = usize::MAX;
        for &t in truth {
            if t >= g {
                return Err(Error::InvalidInput(format!("ground-truth index {t} outside gallery of {g}")));
            }
            let s = row[t];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > s || (v == s && j < t))
                .count();
            best = best.min(ahead);
        }
        best_ranks.push(best);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = best_ranks.iter().filter(|&&r| r < k).count();
            (k, 100.0 * hits as f64 / q as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_fingerprint: String,
    pub dataset_sizes: BTreeMap<String, usize>,
}

/// Retrieval and classification attack-success percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tr_at: BTreeMap<usize, f64>,
    pub ir_at: BTreeMap<usize, f64>,
    pub r_mean: f64,
    pub classification_asr: Option<f64>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    /// Builds a report, deriving `r_mean` from the six retrieval entries.
    pub fn from_recalls(
        tr_at: BTreeMap<usize, f64>,
        ir_at: BTreeMap<usize, f64>,
        classification_asr: Option<f64>,
        metadata: ReportMetadata,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(6);
        for (label, map) in [("TR", &tr_at), ("IR", &ir_at)] {
            for k in RETRIEVAL_KS {
                let v = *map
                    .get(&k)
                    .ok_or_else(|| Error::InvalidInput(format!("missing {label}@{k}")))?;
                values.push(v);
            }
        }
        let all = values.iter().copied().chain(classification_asr);
        if let Some(bad) = all.into_iter().find(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::InvalidInput(format!("percentage {bad} outside [0, 100]")));
        }
        let r_mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self {
            tr_at,
            ir_at,
            r_mean,
            classification_asr,
            metadata,
        })
    }

    /// `[TR@1, TR@5, TR@10, IR@1, IR@5, IR@10]`.
    pub fn retrieval_row(&self) -> [f64; 6] {
        let get = |m: &BTreeMap<usize, f64>, k: usize| m.get(&k).copied().unwrap_or(f64::NAN);
        [
            get(&self.tr_at, 1),
            get(&self.tr_at, 5),
            get(&self.tr_at, 10),
            get(&self.ir_at, 1),
            get(&self.ir_at, 5),
            get(&self.ir_at, 10),
        ]
    }

    /// Two-decimal one-line summary.
    pub fn summary(&self) -> String {
        let r = self.retrieval_row();
        let mut s = format!(
            "TR@1 {:.2}  TR@5 {:.2}  TR@10 {:.2}  IR@1 {:.2}  IR@5 {:.2}  IR@10 {:.2}  R@Mean {:.2}",
            r[0], r[1], r[2], r[3], r[4], r[5], self.r_mean
        );
        if let Some(asr) = self.classification_asr {
            s.push_str(&format!("  ASR {asr:.2}"));
        }
        s
    }
}

/// Embeddings and ground truth for both retrieval directions.
pub struct RetrievalInputs<'a> {
    /// Adversarial image embeddings (text-retrieval queries).
    pub adv_images: &'a EmbeddingBatch,
    /// Caption embeddings (text-retrieval gallery, image-retrieval queries).
    pub texts: &'a EmbeddingBatch,
    /// Image gallery in which the adversarial images replace the originals.
    pub image_gallery: &'a EmbeddingBatch,
    /// Correct text rows per adversarial image.
    pub text_truth: &'a [BTreeSet<usize>],
    /// Correct gallery rows per text.
    pub image_truth: &'a [BTreeSet<usize>],
}

pub fn retrieval_report(inputs: &RetrievalInputs<'_>, metadata: ReportMetadata) -> Result<EvalReport> {
    let tr = recall_at_k(&similarity_matrix(inputs.adv_images, inputs.texts)?, inputs.text_truth, &RETRIEVAL_KS)?;
    let ir = recall_at_k(
        &similarity_matrix(inputs.texts, inputs.image_gallery)?,
        inputs.image_truth,
        &RETRIEVAL_KS,
    )?;
    EvalReport::from_recalls(tr, ir, None, metadata)
}

/// Percentage of samples whose most similar candidate is the ground-truth
/// one (ties go to the lowest index).
pub fn classification_asr(adv: &EmbeddingBatch, candidates: &[EmbeddingBatch], gt_index: &[usize]) -> Result<f64> {
    let n = adv.len();
    if candidates.len() != n || gt_index.len() != n {
        return Err(Error::Dimension(format!(
            "{n} samples, {} candidate sets, {} labels",
            candidates.len(),
            gt_index.len()
        )));
    }
    let mut hits = 0usize;
    for (i, (cands, &gt)) in candidates.iter().zip(gt_index).enumerate() {
        if cands.len() < 2 {
            return Err(Error::Config(format!("sample {i} has {} candidate(s), need at least 2", cands.len())));
        }
        if gt >= cands.len() {
            return Err(Error::InvalidInput(format!("sample {i}: label {gt} outside {} candidates", cands.len())));
        }
        if cands.dim() != adv.dim() {
            return Err(Error::Dimension(format!("sample {i}: candidate dim {} vs {}", cands.dim(), adv.dim())));
        }
        let scores = cands.view().dot(&adv.view().row(i));
        let mut best = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        hits += usize::from(best == gt);
    }
    Ok(100.0 * hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn eye(n: usize) -> EmbeddingBatch {
        EmbeddingBatch::new(Array2::eye(n)).unwrap()
    }

    fn diagonal_truth(n: usize) -> GroundTruth {
        (0..n).map(|i| BTreeSet::from([i])).collect()
    }

    #[test]
    fn self_similarity_is_identity_for_orthonormal_rows() {
        let s = similarity_matrix(&eye(4), &eye(4)).unwrap();
        assert_eq!(s.data, Array2::<f64>::eye(4));
    }

    #[test]
    fn perfect_ranking_scores_full_recall() {
        let s = similarity_matrix(&eye(12), &eye(12)).unwrap();
        let r = recall_at_k(&s, &diagonal_truth(12), &[1, 5, 10]).unwrap();
        assert!(r.values().all(|v| *v == 100.0));
    }

    #[test]
    fn ties_go_to_lower_gallery_index() {
        let sim = SimilarityMatrix {
            data: array![[0.5, 0.5, 0.5]],
            query_ids: vec!["q".into()],
            gallery_ids: default_ids(3),
        };
        let hit = recall_at_k(&sim, &[BTreeSet::from([0])], &[1]).unwrap();
        let miss = recall_at_k(&sim, &[BTreeSet::from([2])], &[1, 2, 3]).unwrap();
        assert_eq!(hit[&1], 100.0);
        assert_eq!((miss[&1], miss[&2], miss[&3]), (0.0, 0.0, 100.0));
    }

    #[test]
    fn recall_argument_errors() {
        let s = similarity_matrix(&eye(3), &eye(3)).unwrap();
        assert!(matches!(recall_at_k(&s, &diagonal_truth(3), &[4]), Err(Error::Config(_))));
        let mut gt = diagonal_truth(3);
        gt[1].clear();
        assert!(matches!(recall_at_k(&s, &gt, &[1]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn caption_ids_share_their_image_base() {
        let q = vec!["a".to_string(), "b".to_string()];
        let g = vec!["b#0".to_string(), "a#0".to_string(), "a#1".to_string()];
        assert_eq!(
            ground_truth_from_ids(&q, &g),
            vec![BTreeSet::from([1, 2]), BTreeSet::from([0])]
        );
    }

    #[test]
    fn r_mean_aggregates_six_entries() {
        let m = |a: f64, b: f64, c: f64| BTreeMap::from([(1, a), (5, b), (10, c)]);
        let full = EvalReport::from_recalls(m(100.0, 100.0, 100.0), m(100.0, 100.0, 100.0), None, ReportMetadata::default()).unwrap();
        assert_eq!(full.r_mean, 100.0);
        assert!(EvalReport::from_recalls(m(101.0, 0.0, 0.0), m(0.0, 0.0, 0.0), None, ReportMetadata::default()).is_err());
    }

    #[test]
    fn classification_forced_outcomes() {
        let adv = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let cands = vec![
            EmbeddingBatch::new(array![[1.0, 0.0], [-1.0, 0.0]]).unwrap(),
            EmbeddingBatch::new(array![[0.0, -1.0], [0.0, 1.0]]).unwrap(),
        ];
        assert_eq!(classification_asr(&adv, &cands, &[0, 1]).unwrap(), 100.0);
        assert_eq!(classification_asr(&adv, &cands, &[1, 0]).unwrap(), 0.0);
        let single = vec![EmbeddingBatch::new(array![[1.0, 0.0]]).unwrap(); 2];
        assert!(matches!(classification_asr(&adv, &single, &[0, 0]), Err(Error::Config(_))));
    }
}
