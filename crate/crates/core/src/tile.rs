//! Overlapping patch extraction and seamless merging for tiled processing.
//!
//! Patches of size `p` are taken at stride `s` with one extra patch snapped
//! to each trailing edge so the grid always covers the full extent. Merging
//! blends overlaps with a strictly positive raised-cosine window, normalized
//! per cell so the effective weights sum to exactly one everywhere.

use ndarray::{Array2, Array3, ArrayView3};

use crate::err::{Error, Result};
use crate::scalar::Scalar;

/// Placement of a patch grid over a `[c, h, w]` tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub src_h: usize,
    pub src_w: usize,
    /// Patch extent along rows (`min(patch, src_h)`).
    pub patch_h: usize,
    /// Patch extent along columns (`min(patch, src_w)`).
    pub patch_w: usize,
    /// Row offsets of the patches, ascending.
    pub rows: Vec<usize>,
    /// Column offsets of the patches, ascending.
    pub cols: Vec<usize>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offsets in extraction order (rows outer, columns inner).
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.rows {
            for &c in &self.cols {
                out.push((r, c));
            }
        }
        out
    }
}

/// Offsets along one axis: multiples of `stride` whose patch fits strictly
/// inside, plus a final patch flush with the trailing edge.
fn axis_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch >= len {
        return vec![0];
    }
    let mut offs = Vec::new();
    let mut k = 0usize;
    while k * stride + patch < len {
        offs.push(k * stride);
        k += 1;
    }
    offs.push(len - patch);
    offs
}

/// Plans a patch grid for a `h x w` tensor.
pub fn plan_grid(h: usize, w: usize, patch: usize, stride: usize) -> Result<PatchGrid> {
    if patch == 0 || stride == 0 {
        return Err(Error::invalid("patch and stride must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot tile an empty tensor"));
    }
    if stride > patch {
        return Err(Error::invalid(format!(
            "stride {stride} larger than patch {patch} would leave gaps"
        )));
    }
    let patch_h = patch.min(h);
    let patch_w = patch.min(w);
    Ok(PatchGrid {
        src_h: h,
        src_w: w,
        patch_h,
        patch_w,
        rows: axis_offsets(h, patch_h, stride),
        cols: axis_offsets(w, patch_w, stride),
    })
}

/// Extracts overlapping patches in row-major grid order.
pub fn to_patches<S: Scalar>(
    src: ArrayView3<'_, S>,
    patch: usize,
    stride: usize,
) -> Result<(Vec<Array3<S>>, PatchGrid)> {
    let (_, h, w) = src.dim();
    let grid = plan_grid(h, w, patch, stride)?;
    let mut out = Vec::with_capacity(grid.len());
    for (r, c) in grid.offsets() {
        let view = src.slice(ndarray::s![.., r..r + grid.patch_h, c..c + grid.patch_w]);
        out.push(view.to_owned());
    }
    Ok((out, grid))
}

/// Strictly positive raised-cosine window over `m` cells:
/// `w(u) = 0.5 - 0.5 * cos(pi * (2u + 1) / m)`.
fn window(m: usize) -> Vec<f64> {
    (0..m)
        .map(|u| 0.5 - 0.5 * (std::f64::consts::PI * (2 * u + 1) as f64 / m as f64).cos())
        .collect()
}

/// Per-cell sum of blend weights over all covering patches.
///
/// Used as the normalizer inside [`merge_patches`]; exposed so tests can
/// check the partition-of-unity property of the normalized field.
pub fn blend_weight_sums(grid: &PatchGrid) -> Array2<f64> {
    let wr = window(grid.patch_h);
    let wc = window(grid.patch_w);
    let mut sums = Array2::<f64>::zeros((grid.src_h, grid.src_w));
    for &r in &grid.rows {
        for &c in &grid.cols {
            for (i, wy) in wr.iter().enumerate() {
                for (j, wx) in wc.iter().enumerate() {
                    sums[[r + i, c + j]] += wy * wx;
                }
            }
        }
    }
    sums
}

/// Merges patches produced by [`to_patches`] back into the full tensor.
///
/// Each cell is a convex combination of the covering patches with weights
/// `w_patch / sum_of_weights`. A cell covered by exactly one patch divides a
/// weight by itself, so single-coverage regions reproduce the patch content
/// bitwise; in particular a grid with one all-covering patch merges to
/// exactly that patch.
pub fn merge_patches<S: Scalar>(patches: &[Array3<S>], grid: &PatchGrid) -> Result<Array3<S>> {
    if patches.len() != grid.len() {
        return Err(Error::invalid(format!(
            "grid expects {} patches, got {}",
            grid.len(),
            patches.len()
        )));
    }
    let channels = patches
        .first()
        .ok_or_else(|| Error::invalid("cannot merge zero patches"))?
        .dim()
        .0;
    for (i, p) in patches.iter().enumerate() {
        if p.dim() != (channels, grid.patch_h, grid.patch_w) {
            return Err(Error::invalid(format!(
                "patch {i} has shape {:?}, expected {:?}",
                p.dim(),
                (channels, grid.patch_h, grid.patch_w)
            )));
        }
    }

    let wr = window(grid.patch_h);
    let wc = window(grid.patch_w);
    let sums = blend_weight_sums(grid);
    let mut out = Array3::<S>::zeros((channels, grid.src_h, grid.src_w));
    for (patch, (r, c)) in patches.iter().zip(grid.offsets()) {
        for (i, wy) in wr.iter().enumerate() {
            for (j, wx) in wc.iter().enumerate() {
                let weight = S::of(wy * wx / sums[[r + i, c + j]]);
                for ch in 0..channels {
                    out[[ch, r + i, c + j]] += patch[[ch, i, j]] * weight;
                }
            }
        }
    }
    Ok(out)
}

/// Normalized blend weight of each patch at each cell it covers, in grid
/// order. Each entry is `(row, col, weights[patch_h, patch_w])`.
pub fn normalized_weights(grid: &PatchGrid) -> Vec<(usize, usize, Array2<f64>)> {
    let wr = window(grid.patch_h);
    let wc = window(grid.patch_w);
    let sums = blend_weight_sums(grid);
    grid.offsets()
        .into_iter()
        .map(|(r, c)| {
            let mut w = Array2::<f64>::zeros((grid.patch_h, grid.patch_w));
            for (i, wy) in wr.iter().enumerate() {
                for (j, wx) in wc.iter().enumerate() {
                    w[[i, j]] = wy * wx / sums[[r + i, c + j]];
                }
            }
            (r, c, w)
        })
        .collect()
}

/// Sum of [`normalized_weights`] over patches, per cell. Exactly one up to
/// floating-point accumulation; tests pin the tolerance.
pub fn coverage_field(grid: &PatchGrid) -> Array2<f64> {
    let mut field = Array2::<f64>::zeros((grid.src_h, grid.src_w));
    for (r, c, w) in normalized_weights(grid) {
        let mut dst = field.slice_mut(ndarray::s![r..r + grid.patch_h, c..c + grid.patch_w]);
        dst += &w;
    }
    field
}

/// Convenience: number of patches along each axis for diagnostics.
pub fn grid_shape(grid: &PatchGrid) -> (usize, usize) {
    (grid.rows.len(), grid.cols.len())
}

#[allow(unused_imports)]
use ndarray::s;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn axis_offsets_match_pinned_cases() {
        assert_eq!(axis_offsets(160, 96, 64), vec![0, 64]);
        assert_eq!(axis_offsets(97, 96, 64), vec![0, 1]);
        assert_eq!(axis_offsets(96, 96, 64), vec![0]);
        assert_eq!(axis_offsets(256, 96, 64), vec![0, 64, 128, 160]);
        assert_eq!(axis_offsets(40, 96, 64), vec![0]);
    }

    #[test]
    fn offsets_cover_everything_without_overrun() {
        for len in 1..200usize {
            for patch in [1, 3, 16, 96] {
                let p = patch.min(len);
                let offs = axis_offsets(len, p, (p / 2).max(1));
                assert_eq!(offs[0], 0);
                assert_eq!(*offs.last().unwrap() + p, len.max(p));
                for w in offs.windows(2) {
                    assert!(w[1] > w[0]);
                    assert!(w[1] <= w[0] + p, "gap between {} and {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn window_is_strictly_positive() {
        for m in [1usize, 2, 3, 64, 96] {
            for w in window(m) {
                assert!(w > 0.0, "window of extent {m} touched zero");
            }
        }
    }

    fn ramp(c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            (ci as f32 * 0.37 + y as f32 * 0.11 - x as f32 * 0.07).sin()
        })
    }

    #[test]
    fn split_merge_is_identity_on_constant_fields() {
        let src = Array3::<f64>::from_elem((3, 30, 22), 0.625);
        let (patches, grid) = to_patches(src.view(), 12, 8).unwrap();
        let merged = merge_patches(&patches, &grid).unwrap();
        for &v in merged.iter() {
            assert!((v - 0.625).abs() < 1e-12);
        }
    }

    #[test]
    fn split_merge_reconstructs_arbitrary_fields() {
        let src = ramp(4, 37, 29);
        let (patches, grid) = to_patches(src.view(), 16, 9).unwrap();
        let merged = merge_patches(&patches, &grid).unwrap();
        for (a, b) in merged.iter().zip(src.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn degenerate_single_patch_is_bitwise_identity() {
        let src = ramp(3, 24, 24);
        let (patches, grid) = to_patches(src.view(), 24, 24).unwrap();
        assert_eq!(patches.len(), 1);
        let merged = merge_patches(&patches, &grid).unwrap();
        assert_eq!(merged, src);
    }

    #[test]
    fn oversized_patch_spans_whole_axis() {
        let src = ramp(1, 10, 50);
        let (patches, grid) = to_patches(src.view(), 96, 64).unwrap();
        assert_eq!(grid.patch_h, 10);
        assert_eq!(grid.patch_w, 50);
        assert_eq!(patches.len(), 1);
        let merged = merge_patches(&patches, &grid).unwrap();
        assert_eq!(merged, src);
    }

    #[test]
    fn coverage_sums_to_one() {
        for (h, w, p, s) in [(160, 160, 96, 64), (97, 130, 96, 64), (33, 17, 8, 3)] {
            let grid = plan_grid(h, w, p, s).unwrap();
            let field = coverage_field(&grid);
            for &v in field.iter() {
                assert!((v - 1.0).abs() < 1e-9, "coverage {v} at grid {h}x{w}");
            }
        }
    }

    #[test]
    fn stride_larger_than_patch_is_rejected() {
        assert!(plan_grid(64, 64, 8, 9).is_err());
    }

    proptest! {
        #[test]
        fn merge_inverts_split(
            h in 1usize..60,
            w in 1usize..60,
            patch in 1usize..40,
            stride_frac in 1usize..=100,
        ) {
            let stride = ((patch * stride_frac).div_euclid(100)).max(1).min(patch);
            let src = ramp(2, h, w);
            let (patches, grid) = to_patches(src.view(), patch, stride).unwrap();
            let merged = merge_patches(&patches, &grid).unwrap();
            for (a, b) in merged.iter().zip(src.iter()) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }

        #[test]
        fn coverage_partition_of_unity(
            h in 1usize..80,
            w in 1usize..80,
            patch in 1usize..50,
            stride in 1usize..50,
        ) {
            prop_assume!(stride <= patch);
            let grid = plan_grid(h, w, patch, stride).unwrap();
            let field = coverage_field(&grid);
            for &v in field.iter() {
                prop_assert!((v - 1.0).abs() < 1e-9);
            }
        }
    }
}
