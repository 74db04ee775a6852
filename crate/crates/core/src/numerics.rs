//! Dense kernels shared by the prior generators.
//!
//! Everything accumulates in `f64` with a fixed loop order, so a given input
//! always produces the same bits no matter how many threads rayon has.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Patch grid of a feature map: `h` rows by `w` columns, row-major tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid { h, w }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Token index `j` maps to `(j / w, j % w)`.
    pub fn coords(&self, j: usize) -> (usize, usize) {
        (j / self.w, j % self.w)
    }
}

/// A single-channel `h x w` response map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2D(Array2<f64>);

impl Map2D {
    pub fn new(values: Array2<f64>) -> Self {
        Map2D(values)
    }

    /// Reshape a flat row-major token vector onto `grid`.
    pub fn from_flat(flat: Vec<f64>, grid: Grid) -> Result<Self> {
        if flat.len() != grid.hw() {
            return Err(Error::shape("map", grid.hw(), flat.len()));
        }
        let values = Array2::from_shape_vec((grid.h, grid.w), flat)
            .map_err(|e| Error::shape("map", (grid.h, grid.w), e.to_string()))?;
        Ok(Map2D(values))
    }

    pub fn grid(&self) -> Grid {
        let (h, w) = self.0.dim();
        Grid { h, w }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Row-major flattening, matching the token order of the features.
    pub fn flatten(&self) -> Array1<f64> {
        self.0.iter().copied().collect()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.0.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }
}

const LANES: usize = 8;

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().sum::<f64>() + tail
}

/// Inner product with a fixed eight-lane summation order.
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => dot_slices(x, y),
        _ => dot_slices(&a.to_vec(), &b.to_vec()),
    }
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `(m - min) / (max - min + eps)`; a constant map becomes all zeros.
pub fn minmax_normalize(m: &Map2D, eps: f64) -> Map2D {
    let lo = m.min();
    let hi = m.max();
    let scale = hi - lo + eps;
    Map2D(m.0.mapv(|v| (v - lo) / scale))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let peak = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn matvec(m: ArrayView2<f64>, p: ArrayView1<f64>) -> Result<Array1<f64>> {
    if m.ncols() != p.len() {
        return Err(Error::shape("matvec operand", m.ncols(), p.len()));
    }
    let out: Vec<f64> = (0..m.nrows())
        .into_par_iter()
        .map(|i| dot(m.row(i), p))
        .collect();
    Ok(Array1::from(out))
}

/// Dense product with an i-k-j loop; each output entry sums over `k` in order.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, inner) = a.dim();
    let (inner_b, m) = b.dim();
    if inner != inner_b {
        return Err(Error::shape("matmul operand", inner, inner_b));
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a_flat = a.as_slice().expect("standard layout");
    let b_flat = b.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; n * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let a_row = &a_flat[i * inner..(i + 1) * inner];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b_flat[k * m..(k + 1) * m];
                for (acc, &bkj) in row.iter_mut().zip(b_row) {
                    *acc += aik * bkj;
                }
            }
        });
    }
    Ok(Array2::from_shape_vec((n, m), out).expect("shape computed above"))
}

/// `A·Aᵀ` from row inner products; the lower triangle is mirrored, so the
/// result is exactly symmetric.
pub fn gram_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let a = a.as_standard_layout();
    let width = a.ncols();
    let flat = a.as_slice().expect("standard layout");
    let row = |i: usize| &flat[i * width..(i + 1) * width];
    let lower: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| dot_slices(row(i), row(j))).collect())
        .collect();
    Array2::from_shape_fn(
        (n, n),
        |(i, j)| if j <= i { lower[i][j] } else { lower[j][i] },
    )
}

pub fn hadamard(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape("hadamard operand", a.dim(), b.dim()));
    }
    Ok(&a * &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(
            cosine(array![1.0, 0.0].view(), array![1.0, 0.0].view()),
            1.0
        );
        assert_eq!(
            cosine(array![1.0, 0.0].view(), array![0.0, 1.0].view()),
            0.0
        );
        let c = cosine(array![1.0, 0.0].view(), array![0.6, 0.8].view());
        assert!((c - 0.6).abs() < 1e-15);
        assert_eq!(
            cosine(array![0.0, 0.0].view(), array![0.6, 0.8].view()),
            0.0
        );
    }

    #[test]
    fn minmax_examples() {
        let m = Map2D::new(array![[2.0, 4.0, 6.0]]);
        let out = minmax_normalize(&m, 1e-7);
        let expect = [0.0, 2.0 / (4.0 + 1e-7), 4.0 / (4.0 + 1e-7)];
        for (got, want) in out.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((out.values()[[0, 1]] - 0.49999999).abs() < 1e-8);

        let flat = minmax_normalize(&Map2D::new(Array::from_elem((3, 3), 5.5)), 1e-7);
        assert!(flat.values().iter().all(|&v| v == 0.0));

        let unit = minmax_normalize(&Map2D::new(array![[0.0, 1.0]]), 1e-7);
        assert_eq!(unit.values()[[0, 0]], 0.0);
        assert!((unit.values()[[0, 1]] - 1.0 / (1.0 + 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
        let big = softmax(&[1000.0, 0.0]);
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1].abs() < 1e-12);
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn product_examples() {
        let id = Array2::<f64>::eye(3);
        let p = array![0.3, -1.0, 2.5];
        assert_eq!(matvec(id.view(), p.view()).unwrap(), p);

        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(hadamard(a.view(), Array2::ones((2, 2)).view()).unwrap(), a);

        let d = array![[0.8, 0.2], [0.2, 0.8]];
        let ddt = matmul(d.view(), d.t()).unwrap();
        let want = array![[0.68, 0.32], [0.32, 0.68]];
        for (g, w) in ddt.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_matches_matmul() {
        let a = Array2::from_shape_fn((6, 11), |(i, j)| ((i * 11 + j) as f64 * 0.7).sin());
        let g = gram_rows(a.view());
        let m = matmul(a.view(), a.t()).unwrap();
        for (x, y) in g.iter().zip(m.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(g, g.t());
    }

    #[test]
    fn shape_errors() {
        let a = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            matvec(a.view(), Array1::zeros(2).view()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matmul(a.view(), a.view()).is_err());
        assert!(hadamard(a.view(), Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) as f64).sin());
        let b = Array2::from_shape_fn((7, 4), |(i, j)| ((i * 4 + j) as f64 * 0.3).cos());
        let got = matmul(a.view(), b.view()).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a[[i, k]] * b[[k, j]];
                }
                assert_eq!(got[[i, j]], s);
            }
        }
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(a in vec_strategy(6), b in vec_strategy(6), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let a = Array1::from(a);
            let b = Array1::from(b);
            prop_assume!(norm(a.view()) > 1e-3 && norm(b.view()) > 1e-3);
            let base = cosine(a.view(), b.view());
            let scaled = cosine((&a * s).view(), (&b * t).view());
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn minmax_range_and_argmax(v in vec_strategy(12)) {
            let m = Map2D::new(Array2::from_shape_vec((3, 4), v).unwrap());
            let out = minmax_normalize(&m, 1e-7);
            prop_assert!(out.values().iter().all(|&x| (0.0..1.0).contains(&x)));
            if m.max() > m.min() {
                prop_assert_eq!(out.argmax(), m.argmax());
            }
        }

        #[test]
        fn softmax_shift_invariant(v in vec_strategy(5), c in -50.0f64..50.0) {
            let p = softmax(&v);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(*a > 0.0);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
