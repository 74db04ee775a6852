//! Synthetic bundles and loop-literal reference implementations.
//!
//! The references here deliberately avoid the engine kernels: every sum,
//! norm and max is spelled out as a plain loop so the two can be compared.

#![allow(clippy::needless_range_loop)]

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::bundle_io::FeatureBundle;
use crate::numerics::{Grid, Map2D};

/// SplitMix64: `state += 0x9E3779B97F4A7C15`, then the standard
/// xor-shift-multiply finalizer. Doubles take the top 53 bits.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }
}

/// Axis-aligned rectangle in grid coordinates, end-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Rect {
            row0,
            col0,
            row1,
            col1,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }

    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    /// Image pixels per patch side; masks ship at `h*patch x w*patch`.
    pub patch: usize,
    pub planted: Option<Rect>,
}

impl SynthSpec {
    pub fn new(h: usize, w: usize, d: usize, n: usize, k: usize, seed: u64) -> Self {
        SynthSpec {
            seed,
            h,
            w,
            d,
            n,
            k,
            patch: 4,
            planted: None,
        }
    }

    pub fn planted(mut self, region: Rect) -> Self {
        self.planted = Some(region);
        self
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch = patch;
        self
    }
}

fn random_vec(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random orthonormal pair via Gram-Schmidt.
fn orthonormal_pair(rng: &mut SplitMix64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let u = unit(random_vec(rng, d));
    loop {
        let v = random_vec(rng, d);
        let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rest: Vec<f64> = v.iter().zip(&u).map(|(b, a)| b - proj * a).collect();
        if rest.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            return (u, unit(rest));
        }
    }
}

/// Features scattered around a shared direction, as CLIP patch tokens are.
fn clustered_features(rng: &mut SplitMix64, base: &[f64], hw: usize, spread: f64) -> Array2<f32> {
    let d = base.len();
    Array2::from_shape_fn((hw, d), |(_, m)| {
        (base[m] + spread * rng.uniform(-1.0, 1.0)) as f32
    })
}

fn paint_mask(grid: Grid, patch: usize, region: Rect) -> Array2<u8> {
    Array2::from_shape_fn((grid.h * patch, grid.w * patch), |(y, x)| {
        u8::from(region.contains(y / patch, x / patch))
    })
}

fn random_rect(rng: &mut SplitMix64, grid: Grid) -> Rect {
    let (r0, r1) = {
        let a = rng.below(grid.h);
        let b = rng.below(grid.h);
        (a.min(b), a.max(b) + 1)
    };
    let (c0, c1) = {
        let a = rng.below(grid.w);
        let b = rng.below(grid.w);
        (a.min(b), a.max(b) + 1)
    };
    Rect::new(r0, c0, r1, c1)
}

/// Row-stochastic attention with a locality bump, one map per block.
fn synth_attention(rng: &mut SplitMix64, grid: Grid, n: usize) -> Array3<f32> {
    let hw = grid.hw();
    let mut a = Array3::<f32>::zeros((n, hw, hw));
    for b in 0..n {
        let width = 0.5 + b as f64 * 0.25;
        for i in 0..hw {
            let (ri, ci) = grid.coords(i);
            let mut row = Vec::with_capacity(hw);
            for j in 0..hw {
                let (rj, cj) = grid.coords(j);
                let dist2 = (ri as f64 - rj as f64).powi(2) + (ci as f64 - cj as f64).powi(2);
                row.push(rng.uniform(0.01, 1.0) + 2.0 * (-dist2 / (2.0 * width * width)).exp());
            }
            let total: f64 = row.iter().sum();
            for (j, v) in row.into_iter().enumerate() {
                a[[b, i, j]] = (v / total) as f32;
            }
        }
    }
    a
}

/// Deterministic bundle from a seed.
///
/// With a planted region, query tokens inside it equal a unit vector `u` and
/// outside equal `u' ⟂ u`; the text embeddings are `u` / `u'`, and every
/// support shot is a copy of the query masked to the region.
pub fn synth_bundle(spec: &SynthSpec) -> FeatureBundle {
    let mut rng = SplitMix64::new(spec.seed);
    let grid = Grid::new(spec.h, spec.w);
    let hw = grid.hw();
    let d = spec.d;
    let image = (spec.h * spec.patch, spec.w * spec.patch);

    let (query_features, support_features, support_masks, t_f, t_b) = match spec.planted {
        Some(region) => {
            let (u, u_perp) = orthonormal_pair(&mut rng, d);
            let q = Array2::from_shape_fn((hw, d), |(j, m)| {
                let (r, c) = grid.coords(j);
                if region.contains(r, c) {
                    u[m] as f32
                } else {
                    u_perp[m] as f32
                }
            });
            let mask = paint_mask(grid, spec.patch, region);
            (q.clone(), vec![q; spec.k], vec![mask; spec.k], u, u_perp)
        }
        None => {
            let base = random_vec(&mut rng, d);
            let q = clustered_features(&mut rng, &base, hw, 0.5);
            let mut feats = Vec::with_capacity(spec.k);
            let mut masks = Vec::with_capacity(spec.k);
            for _ in 0..spec.k {
                feats.push(clustered_features(&mut rng, &base, hw, 0.5));
                let rect = random_rect(&mut rng, grid);
                masks.push(paint_mask(grid, spec.patch, rect));
            }
            let t_f: Vec<f64> = base
                .iter()
                .map(|b| b + 0.3 * rng.uniform(-1.0, 1.0))
                .collect();
            let t_b: Vec<f64> = base
                .iter()
                .map(|b| b + 0.3 * rng.uniform(-1.0, 1.0))
                .collect();
            (q, feats, masks, t_f, t_b)
        }
    };

    let attentions = synth_attention(&mut rng, grid, spec.n);
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Array1<f32>>();
    FeatureBundle {
        grid,
        image_height: image.0,
        image_width: image.1,
        query_features,
        support_features,
        support_masks,
        text_embed_target: to_f32(t_f),
        text_embed_background: to_f32(t_b),
        attentions,
        class_name: format!("synthetic-{}", spec.seed),
        seed: Some(spec.seed),
    }
}

/// Random non-negative `n x n` matrix with roughly `zero_frac` exact zeros,
/// keeping the diagonal positive so no row or column is empty.
pub fn random_nonnegative(rng: &mut SplitMix64, n: usize, zero_frac: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        let v = rng.uniform(0.0, 1.0);
        if i != j && rng.next_f64() < zero_frac {
            0.0
        } else {
            v + if i == j { 0.05 } else { 0.0 }
        }
    })
}

/// `cos(f_s^i, f_q^j)` by explicit loops, indexed `[i][j]`.
pub fn naive_correspondence(support: &Array2<f32>, query: &Array2<f32>) -> Vec<Vec<f64>> {
    let (hs, d) = support.dim();
    let hq = query.nrows();
    let mut out = vec![vec![0.0; hq]; hs];
    for i in 0..hs {
        for j in 0..hq {
            let mut dot = 0.0f64;
            let mut ns = 0.0f64;
            let mut nq = 0.0f64;
            for m in 0..d {
                let a = support[[i, m]] as f64;
                let b = query[[j, m]] as f64;
                dot += a * b;
                ns += a * a;
                nq += b * b;
            }
            out[i][j] = if ns == 0.0 || nq == 0.0 {
                0.0
            } else {
                dot / (ns.sqrt() * nq.sqrt())
            };
        }
    }
    out
}

/// Nearest patch-center sample of a full-resolution mask, flattened row-major.
fn naive_grid_mask(mask: &Array2<u8>, grid: Grid) -> Vec<u8> {
    let (big_h, big_w) = mask.dim();
    let mut out = Vec::with_capacity(grid.hw());
    for r in 0..grid.h {
        for c in 0..grid.w {
            let y = ((2 * r + 1) * big_h) / (2 * grid.h);
            let x = ((2 * c + 1) * big_w) / (2 * grid.w);
            out.push(mask[[y, x]]);
        }
    }
    out
}

/// Masking, all-pairs cosine, per-query max and min-max for one shot.
pub fn naive_vvp(bundle: &FeatureBundle, shot: usize, eps: f64) -> Map2D {
    let grid = bundle.grid;
    let keep = naive_grid_mask(&bundle.support_masks[shot], grid);
    let mut masked = bundle.support_features[shot].clone();
    for (i, &k) in keep.iter().enumerate() {
        for m in 0..masked.ncols() {
            masked[[i, m]] *= k as f32;
        }
    }
    let cos = naive_correspondence(&masked, &bundle.query_features);
    let hw = grid.hw();
    let mut best = vec![f64::NEG_INFINITY; hw];
    for row in &cos {
        for j in 0..hw {
            if row[j] > best[j] {
                best[j] = row[j];
            }
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &best {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let normed: Vec<f64> = best.iter().map(|v| (v - lo) / (hi - lo + eps)).collect();
    Map2D::from_flat(normed, grid).expect("hw entries")
}

/// Two-prompt softmax scores `(S_f, S_b)` of a pooled query token.
fn literal_scores(v: &[f64], t_f: &[f64], t_b: &[f64], tau: f64) -> (f64, f64) {
    let cos = |t: &[f64]| {
        let mut dot = 0.0;
        let mut nv = 0.0;
        let mut nt = 0.0;
        for m in 0..v.len() {
            dot += v[m] * t[m];
            nv += v[m] * v[m];
            nt += t[m] * t[m];
        }
        dot / (nv.sqrt() * nt.sqrt())
    };
    let zf = cos(t_f) / tau;
    let zb = cos(t_b) / tau;
    let top = zf.max(zb);
    let ef = (zf - top).exp();
    let eb = (zb - top).exp();
    (ef / (ef + eb), eb / (ef + eb))
}

/// Central finite differences of `S_f` with respect to each channel mean,
/// scaled by `1/hw`.
///
/// Because `S_f + S_b = 1`, the difference is taken on whichever score is
/// smaller and negated if needed; differencing a value near 1 would lose
/// every significant digit once the softmax saturates.
pub fn fd_gradcam_weights(bundle: &FeatureBundle, tau: f64, step: f64) -> Vec<f64> {
    let (hw, d) = bundle.query_features.dim();
    let mut v = vec![0.0f64; d];
    for i in 0..hw {
        for m in 0..d {
            v[m] += bundle.query_features[[i, m]] as f64;
        }
    }
    for x in v.iter_mut() {
        *x /= hw as f64;
    }
    let t_f: Vec<f64> = bundle.text_embed_target.iter().map(|&x| x as f64).collect();
    let t_b: Vec<f64> = bundle
        .text_embed_background
        .iter()
        .map(|&x| x as f64)
        .collect();
    let (s_f, s_b) = literal_scores(&v, &t_f, &t_b, tau);
    let use_background = s_b < s_f;

    let mut w = vec![0.0; d];
    for m in 0..d {
        let mut plus = v.clone();
        let mut minus = v.clone();
        plus[m] += step;
        minus[m] -= step;
        let (pf, pb) = literal_scores(&plus, &t_f, &t_b, tau);
        let (mf, mb) = literal_scores(&minus, &t_f, &t_b, tau);
        let grad = if use_background {
            -(pb - mb) / (2.0 * step)
        } else {
            (pf - mf) / (2.0 * step)
        };
        w[m] = grad / hw as f64;
    }
    w
}

/// Alternating row then column L1 normalization until both residuals fall
/// to `tol` or `max_iters` passes have run.
pub fn naive_sinkhorn(a: &[Vec<f64>], tol: f64, max_iters: usize) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = a[0].len();
    let mut x: Vec<Vec<f64>> = a.to_vec();
    for _ in 0..max_iters {
        for row in x.iter_mut() {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        for j in 0..m {
            let mut s = 0.0;
            for i in 0..n {
                s += x[i][j];
            }
            for i in 0..n {
                x[i][j] /= s;
            }
        }
        let mut worst = 0.0f64;
        for row in &x {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for j in 0..m {
            let mut s = 0.0;
            for row in &x {
                s += row[j];
            }
            worst = worst.max((s - 1.0).abs());
        }
        if worst <= tol {
            break;
        }
    }
    x
}

/// Mean of the last `l` attention blocks by explicit summation.
pub fn naive_average_attention(a: &Array3<f32>, l: usize) -> Vec<Vec<f64>> {
    let (n, r, c) = a.dim();
    let mut out = vec![vec![0.0; c]; r];
    for b in (n - l)..n {
        for i in 0..r {
            for j in 0..c {
                out[i][j] += a[[b, i, j]] as f64;
            }
        }
    }
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= l as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 0 of the published SplitMix64 generator
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn same_spec_same_bundle() {
        let spec = SynthSpec::new(4, 5, 6, 3, 2, 99);
        let a = synth_bundle(&spec);
        let b = synth_bundle(&spec);
        assert_eq!(a, b);
        a.validate().unwrap();
        let planted = synth_bundle(&spec.clone().planted(Rect::new(1, 1, 3, 4)));
        planted.validate().unwrap();
    }

    #[test]
    fn naive_sinkhorn_two_by_two() {
        let d = naive_sinkhorn(&[vec![4.0, 1.0], vec![1.0, 4.0]], 1e-10, 1000);
        for (i, row) in d.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 0.8 } else { 0.2 };
                assert!((v - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn planted_orthogonality() {
        let b = synth_bundle(&SynthSpec::new(3, 3, 5, 1, 1, 5).planted(Rect::new(0, 0, 2, 2)));
        let dot: f64 = b
            .text_embed_target
            .iter()
            .zip(b.text_embed_background.iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        assert!(dot.abs() < 1e-6);
    }
}
