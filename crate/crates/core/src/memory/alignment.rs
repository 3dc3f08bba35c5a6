//! Cross-layer alignment audit and rectification.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::hier_embed::HierEmbedStack;
use crate::objectives::{gap_residuals, LayerTransform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GapDiscrepancy {
    pub max: f64,
    pub mean: f64,
}

/// Per-gap discrepancy `|v_{l+1} - f_l(v_l)|` over tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub gaps: Vec<GapDiscrepancy>,
}

fn check_inputs(stacks: &[HierEmbedStack], transform: &LayerTransform) -> Result<()> {
    for s in stacks {
        if s.num_layers() < 2 {
            return Err(invalid("alignment needs at least two layers"));
        }
        if s.num_layers() - 1 != transform.num_gaps() || s.dim() != transform.dim() {
            return Err(invalid("stack shape does not match the layer transform"));
        }
    }
    Ok(())
}

pub fn alignment_audit(
    stacks: &[HierEmbedStack],
    transform: &LayerTransform,
) -> Result<AlignmentReport> {
    check_inputs(stacks, transform)?;
    let mut gaps = vec![GapDiscrepancy::default(); transform.num_gaps()];
    for stack in stacks {
        for (g, r) in gap_residuals(stack, transform).iter().enumerate() {
            let norm = r.dot(r).sqrt();
            gaps[g].max = gaps[g].max.max(norm);
            gaps[g].mean += norm;
        }
    }
    if !stacks.is_empty() {
        for g in &mut gaps {
            g.mean /= stacks.len() as f64;
        }
    }
    Ok(AlignmentReport { gaps })
}

/// Pulls each layer toward the projection of the one below:
/// `v_{l+1} <- (1 - eta) v_{l+1} + eta f_l(v_l)`, gap by gap from the bottom.
/// Each gap's residual shrinks by exactly `1 - eta`.
pub fn rectify(
    stacks: &[HierEmbedStack],
    transform: &LayerTransform,
    eta: f64,
) -> Result<Vec<HierEmbedStack>> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(invalid(format!("eta {eta} outside (0, 1]")));
    }
    check_inputs(stacks, transform)?;
    stacks
        .iter()
        .map(|stack| {
            let mut layers = stack.layers().to_owned();
            for g in 0..transform.num_gaps() {
                let projected = transform.apply(g, layers.row(g));
                let mut upper = layers.row_mut(g + 1);
                upper *= 1.0 - eta;
                upper.scaled_add(eta, &projected);
            }
            stack.with_layers(layers)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2, Array3};

    fn stack(layers: Array2<f64>) -> HierEmbedStack {
        HierEmbedStack::from_layers(0, layers).unwrap()
    }

    #[test]
    fn aligned_stacks_report_zero() {
        let t = LayerTransform::identity(3, 2);
        let r = alignment_audit(&[stack(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])], &t).unwrap();
        assert!(r.gaps.iter().all(|g| g.max == 0.0 && g.mean == 0.0));
    }

    #[test]
    fn three_four_five() {
        let t = LayerTransform::identity(2, 2);
        let r = alignment_audit(&[stack(array![[1.0, 1.0], [4.0, 5.0]])], &t).unwrap();
        assert_eq!(r.gaps[0].max, 5.0);
        assert_eq!(r.gaps[0].mean, 5.0);
    }

    #[test]
    fn max_and_mean_over_tokens() {
        let t = LayerTransform::identity(2, 2);
        let s = [
            stack(array![[0.0, 0.0], [3.0, 4.0]]),
            stack(array![[0.0, 0.0], [0.0, 1.0]]),
        ];
        let r = alignment_audit(&s, &t).unwrap();
        assert_eq!(r.gaps[0].max, 5.0);
        assert_eq!(r.gaps[0].mean, 3.0);
    }

    #[test]
    fn full_rectify_aligns_exactly() {
        let mut w = Array3::zeros((2, 2, 2));
        w[[0, 0, 1]] = 1.0;
        w[[0, 1, 0]] = -1.0;
        w[[1, 0, 0]] = 2.0;
        w[[1, 1, 1]] = 0.5;
        let t = LayerTransform::new(w, array![[0.1, 0.2], [-0.3, 0.0]]).unwrap();
        let s = [stack(array![[1.0, 2.0], [5.0, -1.0], [0.0, 3.0]])];
        let out = rectify(&s, &t, 1.0).unwrap();
        let r = alignment_audit(&out, &t).unwrap();
        assert!(r.gaps.iter().all(|g| g.max < 1e-12));
    }

    #[test]
    fn half_rectify_halves() {
        let t = LayerTransform::identity(2, 2);
        let s = [stack(array![[1.0, 1.0], [4.0, 5.0]])];
        let out = rectify(&s, &t, 0.5).unwrap();
        assert_abs_diff_eq!(
            alignment_audit(&out, &t).unwrap().gaps[0].max,
            2.5,
            epsilon = 1e-9
        );
    }

    #[test]
    fn repeated_rectify_decays_geometrically() {
        let t = LayerTransform::identity(2, 2);
        let mut s = vec![stack(array![[1.0, 1.0], [4.0, 5.0]])];
        for k in 1..=10 {
            s = rectify(&s, &t, 0.5).unwrap();
            let d = alignment_audit(&s, &t).unwrap().gaps[0].max;
            assert_abs_diff_eq!(d, 5.0 * 0.5f64.powi(k), epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_eta_and_shapes() {
        let t = LayerTransform::identity(2, 2);
        let s = [stack(array![[1.0, 1.0], [4.0, 5.0]])];
        assert!(rectify(&s, &t, 0.0).is_err());
        assert!(rectify(&s, &t, 1.5).is_err());
        assert!(alignment_audit(&[stack(array![[1.0, 1.0]])], &t).is_err());
    }
}
