//! Report tables: adjacent-layer similarity, error histograms and loss
//! curves.

use ndarray::{s, ArrayView2};
use serde::Serialize;

use super::metrics::{CsvRow, LossCurveRow};
use crate::error::{invalid, Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSimilarityRow {
    /// Lower layer of the pair `(gap, gap + 1)`.
    pub gap: usize,
    /// Mean cosine similarity over included tokens; `NaN` if none remain.
    pub similarity: f64,
    pub tokens: usize,
    /// Tokens skipped because one of the two vectors has zero norm.
    pub excluded: usize,
}

impl CsvRow for LayerSimilarityRow {
    const HEADER: &'static [&'static str] = &["gap", "similarity", "tokens", "excluded"];
}

/// Mean cosine similarity of adjacent layers over a set of `L x d` stacks.
pub fn layer_similarity_report<'a>(
    stacks: impl IntoIterator<Item = ArrayView2<'a, f64>>,
) -> Result<Vec<LayerSimilarityRow>> {
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut excluded: Vec<usize> = Vec::new();
    let mut layers = None;
    for stack in stacks {
        let l = *layers.get_or_insert(stack.nrows());
        if l < 2 {
            return Err(invalid("layer similarity needs at least two layers"));
        }
        if stack.nrows() != l {
            return Err(Error::DimensionMismatch {
                expected: l,
                found: stack.nrows(),
            });
        }
        if sums.is_empty() {
            sums = vec![0.0; l - 1];
            counts = vec![0; l - 1];
            excluded = vec![0; l - 1];
        }
        for g in 0..l - 1 {
            let (a, b) = (stack.row(g), stack.row(g + 1));
            let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
            if na == 0.0 || nb == 0.0 {
                excluded[g] += 1;
                continue;
            }
            sums[g] += (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
            counts[g] += 1;
        }
    }
    if layers.is_none() {
        return Err(invalid("layer similarity needs at least one token"));
    }
    Ok((0..sums.len())
        .map(|g| LayerSimilarityRow {
            gap: g,
            similarity: if counts[g] == 0 {
                f64::NAN
            } else {
                sums[g] / counts[g] as f64
            },
            tokens: counts[g],
            excluded: excluded[g],
        })
        .collect())
}

/// Layer similarity of a model's embedding tables over every token
/// occurrence in `sequences`.
pub fn model_layer_similarity(
    model: &Model,
    sequences: &[Vec<usize>],
) -> Result<Vec<LayerSimilarityRow>> {
    let embed = &model.params.embed;
    if let Some(&bad) = sequences
        .iter()
        .flatten()
        .find(|&&t| t >= model.config.vocab)
    {
        return Err(invalid(format!("token id {bad} outside vocabulary")));
    }
    layer_similarity_report(
        sequences
            .iter()
            .flatten()
            .map(|&t| embed.slice(s![.., t, ..])),
    )
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

impl CsvRow for HistogramBin {
    const HEADER: &'static [&'static str] = &["bin_lo", "bin_hi", "count"];
}

fn edge(k: usize) -> f64 {
    k as f64 / HISTOGRAM_BINS as f64
}

/// Histogram of error rates over bins `[k/20, (k+1)/20)`; the last bin also
/// holds 1.0.
pub fn error_histogram(rates: &[f64]) -> Result<Vec<HistogramBin>> {
    let mut counts = [0usize; HISTOGRAM_BINS];
    for &r in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(invalid(format!("error rate {r} outside [0, 1]")));
        }
        let mut k = ((r * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        while k + 1 < HISTOGRAM_BINS && edge(k + 1) <= r {
            k += 1;
        }
        while k > 0 && edge(k) > r {
            k -= 1;
        }
        counts[k] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, &count)| HistogramBin {
            bin_lo: edge(k),
            bin_hi: edge(k + 1),
            count,
        })
        .collect())
}

/// One row per epoch from `(train_loss, val_loss)` pairs, epochs from 1.
pub fn loss_curve(log: &[(f64, f64)]) -> Result<Vec<LossCurveRow>> {
    if log.is_empty() {
        return Err(invalid("empty training log"));
    }
    log.iter()
        .enumerate()
        .map(|(i, &(train_loss, val_loss))| {
            if train_loss.is_finite() && val_loss.is_finite() {
                Ok(LossCurveRow {
                    epoch: i + 1,
                    train_loss,
                    val_loss,
                })
            } else {
                Err(Error::NonFinite("loss curve"))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_and_orthogonal_layers() {
        let same = array![[1.0, 2.0], [1.0, 2.0]];
        let r = layer_similarity_report([same.view()]).unwrap();
        assert!((r[0].similarity - 1.0).abs() < 1e-12);
        let ortho = array![[1.0, 0.0], [0.0, 3.0]];
        assert_eq!(
            layer_similarity_report([ortho.view()]).unwrap()[0].similarity,
            0.0
        );
    }

    #[test]
    fn zero_vectors_are_excluded() {
        let a = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let b = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let r = layer_similarity_report([a.view(), b.view()]).unwrap();
        assert_eq!((r[0].tokens, r[0].excluded), (1, 1));
        assert_eq!((r[1].tokens, r[1].excluded), (1, 1));
        assert_eq!(r[0].similarity, 1.0);
        let single = array![[1.0, 0.0]];
        assert!(layer_similarity_report([single.view()]).is_err());
    }

    #[test]
    fn histogram_edges() {
        let h = error_histogram(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(h.len(), HISTOGRAM_BINS);
        assert_eq!(h[0].count, 3);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 3);
        let h = error_histogram(&[0.05, 0.15, 1.0, 0.049]).unwrap();
        assert_eq!(
            (h[0].count, h[1].count, h[3].count, h[19].count),
            (1, 1, 1, 1)
        );
        assert!(error_histogram(&[1.01]).is_err());
        assert!(error_histogram(&[f64::NAN]).is_err());
    }

    #[test]
    fn loss_curve_rows() {
        let c = loss_curve(&[(1.0, 2.0)]).unwrap();
        assert_eq!(c.len(), 1);
        let c = loss_curve(&[(1.0, 2.0), (0.5, 1.0), (0.4, 0.9)]).unwrap();
        assert!(c.windows(2).all(|w| w[0].epoch < w[1].epoch));
        assert!(loss_curve(&[]).is_err());
        assert!(loss_curve(&[(f64::NAN, 1.0)]).is_err());
    }
}
