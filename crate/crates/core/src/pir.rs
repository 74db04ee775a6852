//! Prior refinement through the query image's own attention.
//!
//! The last `l` attention blocks are averaged, balanced into a doubly
//! stochastic matrix `D` with Sinkhorn iterations, optionally lifted to the
//! high-order `R = max(D, D·Dᵀ)`, and applied to a flattened prior inside a
//! box mask drawn around the prior's strongest responses.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};

use crate::bundle_io::FeatureBundle;
use crate::config::{BoxMode, PriorConfig, RefinementMode};
use crate::error::{Error, Result};
use crate::numerics::{self, Map2D};

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementMatrix {
    pub values: Array2<f64>,
    pub mode: RefinementMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxMask {
    pub values: Array2<u8>,
    /// Absolute cut-off, `theta * max(P)`.
    pub threshold_used: f64,
}

/// Outcome of a Sinkhorn run.
#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub matrix: Array2<f64>,
    pub iterations: usize,
    /// Largest `|row_sum - 1|` or `|col_sum - 1|` after the last pass.
    pub residual: f64,
}

impl Balanced {
    pub fn converged(&self, tol: f64) -> bool {
        self.residual <= tol
    }
}

/// Mean of the last `l` blocks of an `[n, hw, hw]` attention stack.
pub fn average_attention(attentions: ArrayView3<f32>, l: usize) -> Result<Array2<f64>> {
    let (n, r, c) = attentions.dim();
    if l == 0 || l > n {
        return Err(Error::BadRange(format!(
            "l_blocks = {l} with {n} attention blocks"
        )));
    }
    let mut acc = Array2::<f64>::zeros((r, c));
    for block in attentions.axis_iter(Axis(0)).skip(n - l) {
        Zip::from(&mut acc)
            .and(&block)
            .for_each(|a, &x| *a += x as f64);
    }
    Ok(acc / l as f64)
}

/// Adds `floor` to every entry of an all-zero row or column.
pub fn floor_empty_lines(a: &mut Array2<f64>, floor: f64) {
    let zero_rows: Vec<usize> = a
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, row)| row.iter().all(|&v| v == 0.0))
        .map(|(i, _)| i)
        .collect();
    let zero_cols: Vec<usize> = a
        .axis_iter(Axis(1))
        .enumerate()
        .filter(|(_, col)| col.iter().all(|&v| v == 0.0))
        .map(|(j, _)| j)
        .collect();
    for i in zero_rows {
        a.row_mut(i).mapv_inplace(|v| v + floor);
    }
    for j in zero_cols {
        a.column_mut(j).mapv_inplace(|v| v + floor);
    }
}

fn row_sums(a: &Array2<f64>) -> Vec<f64> {
    a.axis_iter(Axis(0)).map(|row| row.sum()).collect()
}

fn col_sums(a: &Array2<f64>) -> Vec<f64> {
    let mut sums = vec![0.0; a.ncols()];
    for row in a.axis_iter(Axis(0)) {
        for (s, &v) in sums.iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    sums
}

fn worst_deviation(sums: &[f64]) -> f64 {
    sums.iter().fold(0.0f64, |w, s| w.max((s - 1.0).abs()))
}

/// Alternating row / column L1 normalization.
pub fn sinkhorn_balance(a: ArrayView2<f64>, max_iters: usize, tol: f64) -> Result<Balanced> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::shape("sinkhorn input", "square", (r, c)));
    }
    if let Some(v) = a.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidValue {
            name: "sinkhorn input".into(),
            reason: format!("entries must be finite and non-negative, found {v}"),
        });
    }
    let mut x = a.to_owned();
    if let Some(i) = row_sums(&x).iter().position(|&s| s == 0.0) {
        return Err(Error::DegenerateMatrix(format!("row {i} is all zeros")));
    }
    if let Some(j) = col_sums(&x).iter().position(|&s| s == 0.0) {
        return Err(Error::DegenerateMatrix(format!("column {j} is all zeros")));
    }

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for mut row in x.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            row /= s;
        }
        let cols = col_sums(&x);
        for mut row in x.axis_iter_mut(Axis(0)) {
            row.zip_mut_with(&ndarray::aview1(&cols), |v, &s| *v /= s);
        }
        residual = worst_deviation(&row_sums(&x)).max(worst_deviation(&col_sums(&x)));
        if residual <= tol {
            break;
        }
    }
    Ok(Balanced {
        matrix: x,
        iterations,
        residual,
    })
}

/// Sinkhorn-balanced matrix `D`.
pub fn sinkhorn_normalize(a: ArrayView2<f64>, max_iters: usize, tol: f64) -> Result<Array2<f64>> {
    sinkhorn_balance(a, max_iters, tol).map(|b| b.matrix)
}

/// `R = max(D, D·Dᵀ)` elementwise.
pub fn high_order_matrix(d: ArrayView2<f64>) -> Result<RefinementMatrix> {
    if d.nrows() != d.ncols() {
        return Err(Error::shape("refinement base", "square", d.dim()));
    }
    let mut values = numerics::gram_rows(d);
    Zip::from(&mut values)
        .and(&d)
        .for_each(|r, &x| *r = r.max(x));
    Ok(RefinementMatrix {
        values,
        mode: RefinementMode::HighOrderR,
    })
}

fn bounding_rect(
    cells: impl Iterator<Item = (usize, usize)>,
) -> Option<(usize, usize, usize, usize)> {
    cells.fold(None, |acc, (r, c)| match acc {
        None => Some((r, c, r, c)),
        Some((r0, c0, r1, c1)) => Some((r0.min(r), c0.min(c), r1.max(r), c1.max(c))),
    })
}

fn fill_rect(out: &mut Array2<u8>, (r0, c0, r1, c1): (usize, usize, usize, usize)) {
    out.slice_mut(ndarray::s![r0..=r1, c0..=c1]).fill(1);
}

/// 4-connected components of the `true` cells.
fn components(fg: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = fg.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for ((r, c), &on) in fg.indexed_iter() {
        if !on || seen[[r, c]] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([(r, c)]);
        seen[[r, c]] = true;
        while let Some((y, x)) = queue.pop_front() {
            comp.push((y, x));
            let nbrs = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for (ny, nx) in nbrs {
                if ny < h && nx < w && fg[[ny, nx]] && !seen[[ny, nx]] {
                    seen[[ny, nx]] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Box around pixels reaching `theta * max(P)`; all ones when `max(P) = 0`.
pub fn box_mask(p: &Map2D, theta: f64, mode: BoxMode) -> BoxMask {
    let values = p.values();
    let peak = p.max();
    let threshold = theta * peak;
    if peak.is_nan() || peak <= 0.0 {
        return BoxMask {
            values: Array2::ones(values.dim()),
            threshold_used: threshold,
        };
    }
    let fg = values.mapv(|v| v >= threshold);
    let mut out = Array2::<u8>::zeros(values.dim());
    match mode {
        BoxMode::Global => {
            let cells = fg.indexed_iter().filter(|(_, &on)| on).map(|(rc, _)| rc);
            if let Some(rect) = bounding_rect(cells) {
                fill_rect(&mut out, rect);
            }
        }
        BoxMode::PerComponent => {
            for comp in components(&fg) {
                if let Some(rect) = bounding_rect(comp.into_iter()) {
                    fill_rect(&mut out, rect);
                }
            }
        }
    }
    BoxMask {
        values: out,
        threshold_used: threshold,
    }
}

/// `B ⊙ reshape(R · flatten(P))`, min-max normalized.
pub fn refine_prior(p: &Map2D, r: &RefinementMatrix, b: &BoxMask, eps: f64) -> Result<Map2D> {
    let grid = p.grid();
    if r.values.dim() != (grid.hw(), grid.hw()) {
        return Err(Error::shape(
            "refinement matrix",
            (grid.hw(), grid.hw()),
            r.values.dim(),
        ));
    }
    if b.values.dim() != (grid.h, grid.w) {
        return Err(Error::shape("box mask", (grid.h, grid.w), b.values.dim()));
    }
    let spread = numerics::matvec(r.values.view(), p.flatten().view())?;
    let spread = Map2D::from_flat(spread.to_vec(), grid)?;
    let boxed = numerics::hadamard(spread.values().view(), b.values.mapv(f64::from).view())?;
    Ok(numerics::minmax_normalize(&Map2D::new(boxed), eps))
}

/// Refines `p` with a box drawn from `p` itself.
pub fn refine_with_own_box(p: &Map2D, r: &RefinementMatrix, config: &PriorConfig) -> Result<Map2D> {
    let b = box_mask(p, config.box_theta, config.box_mode);
    refine_prior(p, r, &b, config.eps)
}

/// Attention average, floor, Sinkhorn, and (in high-order mode) `max(D, D·Dᵀ)`.
pub fn make_refinement(bundle: &FeatureBundle, config: &PriorConfig) -> Result<RefinementMatrix> {
    refinement_from_attention(bundle.attentions.view(), config)
}

pub fn refinement_from_attention(
    attentions: ArrayView3<f32>,
    config: &PriorConfig,
) -> Result<RefinementMatrix> {
    let mut avg = average_attention(attentions, config.l_blocks)?;
    floor_empty_lines(&mut avg, config.attention_floor);
    let d = sinkhorn_normalize(avg.view(), config.sinkhorn_max_iters, config.sinkhorn_tol)?;
    match config.refinement_mode {
        RefinementMode::InitialD => Ok(RefinementMatrix {
            values: d,
            mode: RefinementMode::InitialD,
        }),
        RefinementMode::HighOrderR => high_order_matrix(d.view()),
    }
}
