//! Average-linkage agglomerative clustering under cosine distance.

use std::collections::BTreeSet;

use ndarray::{Array1, ArrayView1, ArrayView2};

use super::{block_summary, MemoryBlock, MemoryState};
use crate::error::{invalid, Error, Result};

/// Distances this close to zero are treated as exactly zero, so parallel
/// vectors always merge at `theta = 0`.
const ZERO_DISTANCE: f64 = 1e-12;

/// `1 - cos(a, b)` clamped to `[0, 2]`; `None` when either vector is zero.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let d = (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0);
    Some(if d < ZERO_DISTANCE { 0.0 } else { d })
}

/// Groups the rows of `vectors` into memory blocks.
///
/// Clusters start as singletons and the closest pair (average pairwise
/// cosine distance) is merged while that distance is at most `theta`. Exact
/// ties go to the pair whose smaller first-member index is lowest, then whose
/// other first-member index is lowest. Zero vectors have no direction and stay
/// singletons. Blocks are numbered in order of their first member and the
/// returned state has capacity `n`.
pub fn cluster_tokens(vectors: ArrayView2<f64>, theta: f64) -> Result<MemoryState> {
    let n = vectors.nrows();
    if n == 0 {
        return Err(invalid("cannot cluster an empty token set"));
    }
    if !(0.0..=2.0).contains(&theta) {
        return Err(invalid(format!(
            "theta {theta} outside the cosine distance range [0, 2]"
        )));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("token vectors"));
    }

    let dist: Vec<Vec<Option<f64>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cosine_distance(vectors.row(i), vectors.row(j)))
                .collect()
        })
        .collect();

    // Clusters live in the slot of their smallest member, so slot order is
    // the tie-break order.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mergeable: Vec<bool> = (0..n).map(|i| dist[i][i].is_some()).collect();
    // Sum of pairwise distances between clusters in slots i and j.
    let mut link: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist[i][j].unwrap_or(f64::NAN)).collect())
        .collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            let Some(mi) = &members[i] else { continue };
            if !mergeable[i] {
                continue;
            }
            for j in i + 1..n {
                let Some(mj) = &members[j] else { continue };
                if !mergeable[j] {
                    continue;
                }
                let avg = link[i][j] / (mi.len() * mj.len()) as f64;
                if best.is_none_or(|(b, _, _)| avg < b) {
                    best = Some((avg, i, j));
                }
            }
        }
        match best {
            Some((avg, i, j)) if avg <= theta => {
                let moved = members[j].take().expect("active slot");
                members[i].as_mut().expect("active slot").extend(moved);
                for k in 0..n {
                    if k != i && members[k].is_some() && mergeable[k] {
                        let s = link[i][k] + link[j][k];
                        link[i][k] = s;
                        link[k][i] = s;
                    }
                }
            }
            _ => break,
        }
    }

    let blocks = members
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(id, group)| {
            let rows: Vec<Array1<f64>> = group.iter().map(|&m| vectors.row(m).to_owned()).collect();
            Ok(MemoryBlock {
                block_id: id,
                centroid: block_summary(&rows)?,
                member_tokens: group.into_iter().collect::<BTreeSet<_>>(),
                last_used_step: 0,
                usage_count: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MemoryState::from_blocks(blocks, n, 0)
}
