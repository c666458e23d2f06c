//! Recall@K retrieval evaluation in both directions.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalDirection {
    /// Image query, captions ranked.
    SentenceRetrieval,
    /// Caption query, images ranked.
    ImageRetrieval,
}

impl fmt::Display for RetrievalDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalDirection::SentenceRetrieval => "sentence retrieval",
            RetrievalDirection::ImageRetrieval => "image retrieval",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub direction: RetrievalDirection,
    /// Percentages for K = 1, 5, 10.
    pub r_at: [f64; 3],
}

impl RetrievalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        RECALL_KS.iter().position(|&x| x == k).map(|i| self.r_at[i])
    }

    pub fn sum(&self) -> f64 {
        self.r_at.iter().sum()
    }
}

/// Sentence and image retrieval results, averaged over folds.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub results: Vec<RetrievalResult>,
    pub folds: usize,
}

impl EvalReport {
    pub fn sentence(&self) -> &RetrievalResult {
        &self.results[0]
    }

    pub fn image(&self) -> &RetrievalResult {
        &self.results[1]
    }

    /// Sum of all six recalls.
    pub fn rsum(&self) -> f64 {
        self.results.iter().map(RetrievalResult::sum).sum()
    }

    /// One line in the layout `R@1 R@5 R@10 | R@1 R@5 R@10 | rsum`.
    pub fn table_row(&self) -> String {
        let s = self.sentence().r_at;
        let i = self.image().r_at;
        format!(
            "{:6.1} {:6.1} {:6.1} | {:6.1} {:6.1} {:6.1} | {:7.1}",
            s[0],
            s[1],
            s[2],
            i[0],
            i[1],
            i[2],
            self.rsum()
        )
    }

    pub fn table_header() -> &'static str {
        "  sentence retrieval  |    image retrieval    |\n   R@1    R@5   R@10 |    R@1    R@5   R@10 |    rsum"
    }

    pub fn csv_header() -> &'static str {
        "sentence_r1,sentence_r5,sentence_r10,image_r1,image_r5,image_r10,rsum"
    }

    pub fn csv_row(&self) -> String {
        let s = self.sentence().r_at;
        let i = self.image().r_at;
        format!("{},{},{},{},{},{},{}", s[0], s[1], s[2], i[0], i[1], i[2], self.rsum())
    }
}

/// Zero-based rank of candidate `target` in `scores` sorted descending,
/// ties broken by lower candidate index.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let t = scores.clone().nth(target).expect("target in range");
    scores
        .enumerate()
        .filter(|&(i, s)| s > t || (s == t && i < target))
        .count()
}

fn recall_from_ranks(ranks: &[usize], direction: RetrievalDirection) -> RetrievalResult {
    let n = ranks.len() as f64;
    let mut r_at = [0.0; 3];
    for (slot, &k) in r_at.iter_mut().zip(&RECALL_KS) {
        let hits = ranks.iter().filter(|&&r| r < k).count();
        *slot = 100.0 * hits as f64 / n;
    }
    RetrievalResult { direction, r_at }
}

/// Recalls from a full `[images × captions]` score matrix, where
/// `owner[c]` is the image caption `c` describes. An image query hits at K
/// when any of its captions ranks in the top K.
pub fn recall_from_scores(scores: &Tensor, owner: &[usize]) -> Result<EvalReport> {
    let (n_img, n_cap) = scores.dims2()?;
    if owner.len() != n_cap {
        return Err(Error::Dimension(format!(
            "{} caption owners for {n_cap} score columns",
            owner.len()
        )));
    }
    if let Some(&bad) = owner.iter().find(|&&o| o >= n_img) {
        return Err(Error::Input(format!("caption owner {bad} out of range for {n_img} images")));
    }
    let mut sentence_ranks = Vec::with_capacity(n_img);
    for i in 0..n_img {
        let row = scores.row(i);
        let best = owner
            .iter()
            .enumerate()
            .filter(|&(_, &o)| o == i)
            .map(|(c, _)| rank_of(row.iter().copied(), c))
            .min()
            .ok_or_else(|| Error::Input(format!("image {i} has no captions")))?;
        sentence_ranks.push(best);
    }
    let image_ranks: Vec<usize> = (0..n_cap)
        .map(|c| rank_of((0..n_img).map(|i| scores.at(i, c)), owner[c]))
        .collect();
    Ok(EvalReport {
        results: vec![
            recall_from_ranks(&sentence_ranks, RetrievalDirection::SentenceRetrieval),
            recall_from_ranks(&image_ranks, RetrievalDirection::ImageRetrieval),
        ],
        folds: 1,
    })
}

/// Splits images into `folds` equal consecutive groups (with their
/// captions), evaluates each group on its own and averages the recalls.
pub fn recall_with_folds(scores: &Tensor, owner: &[usize], folds: usize) -> Result<EvalReport> {
    let (n_img, _) = scores.dims2()?;
    if folds == 0 || n_img % folds != 0 {
        return Err(Error::Config(format!(
            "{folds} folds do not evenly divide {n_img} images"
        )));
    }
    if folds == 1 {
        return recall_from_scores(scores, owner);
    }
    let per = n_img / folds;
    let mut acc = [[0.0; 3]; 2];
    for f in 0..folds {
        let lo = f * per;
        let cols: Vec<usize> = (0..owner.len()).filter(|&c| owner[c] / per == f).collect();
        let mut sub = Vec::with_capacity(per * cols.len());
        for i in lo..lo + per {
            sub.extend(cols.iter().map(|&c| scores.at(i, c)));
        }
        let sub = Tensor::matrix(per, cols.len(), sub)?;
        let sub_owner: Vec<usize> = cols.iter().map(|&c| owner[c] - lo).collect();
        let r = recall_from_scores(&sub, &sub_owner)?;
        for (a, res) in acc.iter_mut().zip(&r.results) {
            for (x, y) in a.iter_mut().zip(res.r_at) {
                *x += y;
            }
        }
    }
    let avg = |a: [f64; 3]| a.map(|x| x / folds as f64);
    Ok(EvalReport {
        results: vec![
            RetrievalResult {
                direction: RetrievalDirection::SentenceRetrieval,
                r_at: avg(acc[0]),
            },
            RetrievalResult {
                direction: RetrievalDirection::ImageRetrieval,
                r_at: avg(acc[1]),
            },
        ],
        folds,
    })
}

/// Scores every image against every caption of `dataset` and reports
/// recalls averaged over `folds`.
pub fn evaluate(model: &Model, dataset: &Dataset, folds: usize) -> Result<EvalReport> {
    if dataset.num_images() == 0 {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    if folds == 0 || dataset.num_images() % folds != 0 {
        return Err(Error::Config(format!(
            "{folds} folds do not evenly divide {} images",
            dataset.num_images()
        )));
    }
    let (captions, owner) = dataset.flat_captions();
    let scores = model.score_matrix(&dataset.images(), &captions)?;
    recall_with_folds(&scores, &owner, folds)
}
