//! Text-to-image scoring and CMC Rank-k evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tensor::cosine_unchecked;
use crate::numeric::{Real, Tensor};
use crate::safa::HeadEmbeddings;

/// Global feature plus K part embeddings for one image or caption.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEmbedding<T: Real = f32> {
    pub global: Vec<T>,
    pub parts: HeadEmbeddings<T>,
    pub identity: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Global,
    Part,
    #[default]
    Both,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 3] = [ScoringMode::Global, ScoringMode::Part, ScoringMode::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::Global => "global",
            ScoringMode::Part => "part",
            ScoringMode::Both => "both",
        }
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ScoringMode::Global),
            "part" => Ok(ScoringMode::Part),
            "both" => Ok(ScoringMode::Both),
            _ => Err(Error::Config(format!("unknown scoring mode {s:?} (global|part|both)"))),
        }
    }
}

/// `cos(e_g, t_g) + Σ_k cos(ẽ_k, t̃_k)`, or either half alone.
pub fn pair_similarity<T: Real>(img: &SampleEmbedding<T>, txt: &SampleEmbedding<T>, mode: ScoringMode) -> Result<T> {
    if img.parts.num_heads() != txt.parts.num_heads()
        || img.parts.dim() != txt.parts.dim()
        || img.global.len() != txt.global.len()
    {
        return Err(Error::Shape(format!(
            "embedding mismatch: image K={} d={}, text K={} d={}",
            img.parts.num_heads(),
            img.global.len(),
            txt.parts.num_heads(),
            txt.global.len()
        )));
    }
    let global = || cosine_unchecked(&img.global, &txt.global);
    let part = || {
        (0..img.parts.num_heads()).fold(T::zero(), |acc, k| {
            acc + cosine_unchecked(img.parts.head(k), txt.parts.head(k))
        })
    };
    Ok(match mode {
        ScoringMode::Global => global(),
        ScoringMode::Part => part(),
        ScoringMode::Both => global() + part(),
    })
}

/// `S[i][j] = pair_similarity(gallery[j], queries[i])`.
pub fn similarity_matrix<T: Real>(
    queries: &[SampleEmbedding<T>],
    gallery: &[SampleEmbedding<T>],
    mode: ScoringMode,
) -> Result<Tensor<T>> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    if queries.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    let mut data = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        for g in gallery {
            data.push(pair_similarity(g, q, mode)?);
        }
    }
    Tensor::new(vec![queries.len(), gallery.len()], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub excluded: usize,
    pub mode: ScoringMode,
}

impl RankMetrics {
    /// Single-line JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Fraction of scored queries whose first same-identity gallery item sits
/// within the top `k`, for each requested `k`. Ties rank the lower gallery
/// index first. Queries with no same-identity gallery item are excluded and
/// counted in the second return value.
pub fn cmc<T: Real>(
    scores: &Tensor<T>,
    query_ids: &[usize],
    gallery_ids: &[usize],
    ks: &[usize],
) -> Result<(Vec<f64>, usize, usize)> {
    let (nq, ng) = (scores.rows(), scores.cols());
    if scores.shape().len() != 2 || query_ids.len() != nq || gallery_ids.len() != ng {
        return Err(Error::Shape(format!(
            "scores {:?} with {} query ids and {} gallery ids",
            scores.shape(),
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    let mut hits = vec![0usize; ks.len()];
    let (mut scored, mut excluded) = (0, 0);
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for (i, &qid) in query_ids.iter().enumerate() {
        if !gallery_ids.contains(&qid) {
            excluded += 1;
            continue;
        }
        scored += 1;
        let row = scores.row(i);
        order.clear();
        order.extend(0..ng);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        let first = order
            .iter()
            .position(|&j| gallery_ids[j] == qid)
            .expect("identity present");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first < k {
                *h += 1;
            }
        }
    }
    let rates = hits
        .iter()
        .map(|&h| if scored == 0 { 0.0 } else { h as f64 / scored as f64 })
        .collect();
    Ok((rates, scored, excluded))
}

/// Rank-1/5/10 over a query×gallery score matrix.
pub fn cmc_ranks<T: Real>(
    scores: &Tensor<T>,
    query_ids: &[usize],
    gallery_ids: &[usize],
    mode: ScoringMode,
) -> Result<RankMetrics> {
    let (r, num_queries, excluded) = cmc(scores, query_ids, gallery_ids, &[1, 5, 10])?;
    Ok(RankMetrics {
        rank1: r[0],
        rank5: r[1],
        rank10: r[2],
        num_queries,
        excluded,
        mode,
    })
}
