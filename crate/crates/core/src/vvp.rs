//! Visual-visual prior: dense cosine matching of masked support patches
//! against query patches, keeping the best match per query pixel.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::bundle_io::FeatureBundle;
use crate::config::{MaskSampling, PriorConfig};
use crate::error::{Error, Result};
use crate::numerics::{self, Grid, Map2D};

/// Cosines between every support pixel (rows) and query pixel (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix(pub Array2<f64>);

impl CorrespondenceMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Samples an image-resolution mask at the patch centers of `grid`.
pub fn downsample_mask(
    mask: ArrayView2<u8>,
    grid: Grid,
    sampling: MaskSampling,
) -> Result<Array2<u8>> {
    let (big_h, big_w) = mask.dim();
    if big_h < grid.h || big_w < grid.w || grid.hw() == 0 {
        return Err(Error::shape(
            "support mask",
            format!(">= {}x{}", grid.h, grid.w),
            (big_h, big_w),
        ));
    }
    let out = match sampling {
        MaskSampling::Nearest => Array2::from_shape_fn((grid.h, grid.w), |(r, c)| {
            // center of patch r sits at (r + 1/2) * H / h
            let y = (2 * r + 1) * big_h / (2 * grid.h);
            let x = (2 * c + 1) * big_w / (2 * grid.w);
            u8::from(mask[[y, x]] != 0)
        }),
        MaskSampling::Bilinear => {
            let axis = |i: usize, big: usize, small: usize| {
                let s = ((i as f64 + 0.5) * big as f64 / small as f64 - 0.5)
                    .clamp(0.0, (big - 1) as f64);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(big - 1), s - lo as f64)
            };
            Array2::from_shape_fn((grid.h, grid.w), |(r, c)| {
                let (y0, y1, fy) = axis(r, big_h, grid.h);
                let (x0, x1, fx) = axis(c, big_w, grid.w);
                let px = |y: usize, x: usize| f64::from(u8::from(mask[[y, x]] != 0));
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                u8::from(top * (1.0 - fy) + bottom * fy >= 0.5)
            })
        }
    };
    if !out.iter().any(|&v| v == 1) {
        return Err(Error::EmptyMask(0));
    }
    Ok(out)
}

/// Zeroes every support row whose mask entry is 0.
pub fn mask_support_features(
    features: ArrayView2<f32>,
    mask: ArrayView1<u8>,
) -> Result<Array2<f32>> {
    if features.nrows() != mask.len() {
        return Err(Error::shape(
            "support mask tokens",
            features.nrows(),
            mask.len(),
        ));
    }
    let mut out = features.to_owned();
    for (mut row, &m) in out.axis_iter_mut(Axis(0)).zip(mask.iter()) {
        if m == 0 {
            row.fill(0.0);
        }
    }
    Ok(out)
}

fn unit_rows(features: ArrayView2<f32>) -> Array2<f64> {
    let mut rows = features.mapv(f64::from);
    for mut row in rows.axis_iter_mut(Axis(0)) {
        let n = numerics::norm(row.view());
        if n > 0.0 {
            row /= n;
        }
    }
    rows
}

/// All-pairs cosine; zero-norm rows give 0 against everything.
pub fn correspondence(
    support: ArrayView2<f32>,
    query: ArrayView2<f32>,
) -> Result<CorrespondenceMatrix> {
    if support.ncols() != query.ncols() {
        return Err(Error::DimMismatch(format!(
            "support d={} vs query d={}",
            support.ncols(),
            query.ncols()
        )));
    }
    let s = unit_rows(support);
    let q = unit_rows(query);
    let hq = q.nrows();
    let mut out = vec![0.0; s.nrows() * hq];
    if hq > 0 {
        out.par_chunks_mut(hq).enumerate().for_each(|(i, row)| {
            let si = s.row(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = numerics::dot(si, q.row(j)).clamp(-1.0, 1.0);
            }
        });
    }
    Ok(CorrespondenceMatrix(
        Array2::from_shape_vec((s.nrows(), hq), out).expect("sized above"),
    ))
}

fn column_max(c: &CorrespondenceMatrix, keep: Option<ArrayView1<u8>>) -> Array1<f64> {
    let mut best = Array1::from_elem(c.0.ncols(), f64::NEG_INFINITY);
    for (i, row) in c.0.axis_iter(Axis(0)).enumerate() {
        if keep.is_some_and(|k| k[i] == 0) {
            continue;
        }
        best.zip_mut_with(&row, |b, &v| *b = b.max(v));
    }
    best
}

/// Per-query-pixel max over all support pixels, then min-max.
pub fn vvp_map(c: &CorrespondenceMatrix, grid: Grid, eps: f64) -> Result<Map2D> {
    vvp_map_raw(c, grid, None).map(|m| numerics::minmax_normalize(&m, eps))
}

/// Like [`vvp_map`] but the max only ranges over support rows with `keep = 1`.
pub fn vvp_map_foreground(
    c: &CorrespondenceMatrix,
    keep: ArrayView1<u8>,
    grid: Grid,
    eps: f64,
) -> Result<Map2D> {
    if keep.len() != c.0.nrows() {
        return Err(Error::shape("foreground selector", c.0.nrows(), keep.len()));
    }
    vvp_map_raw(c, grid, Some(keep)).map(|m| numerics::minmax_normalize(&m, eps))
}

/// Column maxima before normalization.
pub fn vvp_map_raw(
    c: &CorrespondenceMatrix,
    grid: Grid,
    keep: Option<ArrayView1<u8>>,
) -> Result<Map2D> {
    if c.0.ncols() != grid.hw() {
        return Err(Error::shape(
            "correspondence columns",
            grid.hw(),
            c.0.ncols(),
        ));
    }
    Map2D::from_flat(column_max(c, keep).to_vec(), grid)
}

/// One shot's prior from its features and image-resolution mask.
pub fn single_shot_vvp(
    support: ArrayView2<f32>,
    mask: ArrayView2<u8>,
    query: ArrayView2<f32>,
    grid: Grid,
    config: &PriorConfig,
) -> Result<Map2D> {
    let small = downsample_mask(mask, grid, config.mask_sampling)?;
    let flat: Array1<u8> = small.iter().copied().collect();
    let masked = mask_support_features(support, flat.view())?;
    let c = correspondence(masked.view(), query)?;
    if config.vvp_foreground_only {
        vvp_map_foreground(&c, flat.view(), grid, config.eps)
    } else {
        vvp_map(&c, grid, config.eps)
    }
}

/// One independent map per shot, in shot order; shots are not averaged.
pub fn vvp_multishot(bundle: &FeatureBundle, config: &PriorConfig) -> Result<Vec<Map2D>> {
    (0..bundle.shots())
        .into_par_iter()
        .map(|k| {
            single_shot_vvp(
                bundle.support_features[k].view(),
                bundle.support_masks[k].view(),
                bundle.query_features.view(),
                bundle.grid,
                config,
            )
            .map_err(|e| match e {
                Error::EmptyMask(_) => Error::EmptyMask(k),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{naive_correspondence, naive_vvp, synth_bundle, SplitMix64, SynthSpec};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn downsample_examples() {
        let mut m = Array2::<u8>::zeros((4, 4));
        m.slice_mut(ndarray::s![0..2, 0..2]).fill(1);
        let g = Grid::new(2, 2);
        assert_eq!(
            downsample_mask(m.view(), g, MaskSampling::Nearest).unwrap(),
            array![[1, 0], [0, 0]]
        );
        assert_eq!(
            downsample_mask(m.view(), g, MaskSampling::Bilinear).unwrap(),
            array![[1, 0], [0, 0]]
        );

        let ones = Array2::<u8>::ones((6, 9));
        assert_eq!(
            downsample_mask(ones.view(), Grid::new(2, 3), MaskSampling::Nearest).unwrap(),
            Array2::<u8>::ones((2, 3))
        );

        let mut dot = Array2::<u8>::zeros((4, 4));
        dot[[0, 0]] = 1;
        assert!(matches!(
            downsample_mask(dot.view(), g, MaskSampling::Nearest),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn masking_examples() {
        let f = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f32 + 1.0);
        assert_eq!(
            mask_support_features(f.view(), Array1::ones(5).view()).unwrap(),
            f
        );
        let mut sel = Array1::<u8>::zeros(5);
        sel[3] = 1;
        let one = mask_support_features(f.view(), sel.view()).unwrap();
        for (i, row) in one.axis_iter(Axis(0)).enumerate() {
            assert_eq!(row.iter().any(|&v| v != 0.0), i == 3);
        }
        let none = mask_support_features(f.view(), Array1::zeros(5).view()).unwrap();
        assert!(none.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correspondence_examples() {
        let unit = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let c = correspondence(unit.view(), unit.view()).unwrap();
        assert_eq!(c.0, Array2::<f64>::eye(3));

        let mut rng = SplitMix64::new(17);
        let s = Array2::from_shape_fn((9, 4), |_| rng.uniform(-1.0, 1.0) as f32);
        let q = Array2::from_shape_fn((9, 4), |_| rng.uniform(-1.0, 1.0) as f32);
        let c = correspondence(s.view(), q.view()).unwrap();
        let oracle = naive_correspondence(&s, &q);
        for i in 0..9 {
            for j in 0..9 {
                assert!((c.0[[i, j]] - oracle[i][j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn vvp_examples() {
        let s = array![[1.0f32, 0.0], [0.0, 1.0]];
        let q = array![[0.6f32, 0.8]];
        let raw = vvp_map_raw(
            &correspondence(s.view(), q.view()).unwrap(),
            Grid::new(1, 1),
            None,
        )
        .unwrap();
        assert!((raw.values()[[0, 0]] - 0.8).abs() < 1e-7);

        // one support pixel equal to query pixel 2, others orthogonal
        let s = array![[0.0f32, 0.0, 1.0]];
        let q = array![
            [1.0f32, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0]
        ];
        let m = vvp_map(
            &correspondence(s.view(), q.view()).unwrap(),
            Grid::new(2, 2),
            1e-7,
        )
        .unwrap();
        assert!((m.values()[[1, 0]] - 1.0).abs() < 1e-6);
        assert_eq!(m.values().iter().filter(|&&v| v == 0.0).count(), 3);

        let flat = CorrespondenceMatrix(Array2::from_elem((3, 4), 0.3));
        let m = vvp_map(&flat, Grid::new(2, 2), 1e-7).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multishot_examples() {
        let cfg = PriorConfig::default();
        let b1 = synth_bundle(&SynthSpec::new(6, 6, 8, 1, 1, 2));
        let single = single_shot_vvp(
            b1.support_features[0].view(),
            b1.support_masks[0].view(),
            b1.query_features.view(),
            b1.grid,
            &cfg,
        )
        .unwrap();
        assert_eq!(vvp_multishot(&b1, &cfg).unwrap(), vec![single]);

        let mut b5 = synth_bundle(&SynthSpec::new(6, 6, 8, 1, 5, 3));
        b5.support_features[2] = b5.support_features[1].clone();
        b5.support_masks[2] = b5.support_masks[1].clone();
        let maps = vvp_multishot(&b5, &cfg).unwrap();
        assert_eq!(maps.len(), 5);
        assert_eq!(maps[1], maps[2]);
        for (k, m) in maps.iter().enumerate() {
            let oracle = naive_vvp(&b5, k, cfg.eps);
            for (a, b) in m.values().iter().zip(oracle.values()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn empty_shot_reports_its_index() {
        let mut b = synth_bundle(&SynthSpec::new(3, 3, 4, 1, 3, 4));
        b.support_masks[2].fill(0);
        b.support_masks[2][[0, 0]] = 1;
        let err = vvp_multishot(&b, &PriorConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyMask(2)), "{err}");
    }

    #[test]
    fn foreground_only_ignores_zeroed_rows() {
        // the only foreground support pixel is anti-aligned with the query
        let s = array![[-1.0f32, 0.0], [0.0, 0.0]];
        let q = array![[1.0f32, 0.0], [0.0, 1.0]];
        let c = correspondence(s.view(), q.view()).unwrap();
        let literal = vvp_map_raw(&c, Grid::new(1, 2), None).unwrap();
        assert_eq!(literal.values()[[0, 0]], 0.0);
        let fg = vvp_map_raw(&c, Grid::new(1, 2), Some(array![1u8, 0].view())).unwrap();
        assert_eq!(fg.values()[[0, 0]], -1.0);
    }

    proptest! {
        #[test]
        fn invariant_to_support_permutation_and_scale(seed in 0u64..1000, shift in 1usize..9) {
            let b = synth_bundle(&SynthSpec::new(3, 3, 5, 1, 1, seed));
            let s = &b.support_features[0];
            let q = &b.query_features;
            let base = vvp_map_raw(&correspondence(s.view(), q.view()).unwrap(), b.grid, None).unwrap();

            let hw = s.nrows();
            let mut rng = SplitMix64::new(seed ^ 0xABCD);
            let permuted = Array2::from_shape_fn(s.dim(), |(i, m)| s[[(i + shift) % hw, m]]);
            let scales: Vec<f32> = (0..hw).map(|_| rng.uniform(0.1, 10.0) as f32).collect();
            let scaled = Array2::from_shape_fn(s.dim(), |(i, m)| s[[i, m]] * scales[i]);
            for variant in [permuted, scaled] {
                let got = vvp_map_raw(&correspondence(variant.view(), q.view()).unwrap(), b.grid, None).unwrap();
                for (a, c) in got.values().iter().zip(base.values()) {
                    prop_assert!((a - c).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn adding_support_pixels_never_lowers_max(seed in 0u64..1000) {
            let b = synth_bundle(&SynthSpec::new(3, 3, 5, 1, 2, seed));
            let q = &b.query_features;
            let one = b.support_features[0].clone();
            let both = ndarray::concatenate(Axis(0), &[one.view(), b.support_features[1].view()]).unwrap();
            let small = vvp_map_raw(&correspondence(one.view(), q.view()).unwrap(), b.grid, None).unwrap();
            let big = vvp_map_raw(&correspondence(both.view(), q.view()).unwrap(), b.grid, None).unwrap();
            for (a, c) in big.values().iter().zip(small.values()) {
                prop_assert!(*a >= *c);
            }
        }
    }
}
