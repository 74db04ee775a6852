//! Visual-text prior: softmax-GradCAM of a target / non-target prompt pair.
//!
//! The query patches are pooled into one token, classified against the two
//! text embeddings with a temperature softmax, and the gradient of the target
//! score w.r.t. the features weights each channel of the activation map.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numerics::{self, Grid, Map2D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationScores {
    pub target: f64,
    pub background: f64,
    pub tau: f64,
}

/// Per-channel GradCAM weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcamWeights(pub Array1<f64>);

impl GradcamWeights {
    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }
}

/// Global average pool over tokens.
pub fn compute_query_token(features: ArrayView2<f32>) -> Array1<f64> {
    let hw = features.nrows().max(1) as f64;
    let mut acc = Array1::<f64>::zeros(features.ncols());
    for row in features.axis_iter(Axis(0)) {
        acc.zip_mut_with(&row, |a, &x| *a += x as f64);
    }
    acc / hw
}

fn nonzero(v: ArrayView1<f64>, what: &'static str) -> Result<f64> {
    let n = numerics::norm(v);
    if n == 0.0 {
        return Err(Error::ZeroVector(what));
    }
    Ok(n)
}

pub fn classification_scores(
    query_token: ArrayView1<f64>,
    text_target: ArrayView1<f64>,
    text_background: ArrayView1<f64>,
    tau: f64,
) -> Result<ClassificationScores> {
    nonzero(query_token, "query token")?;
    nonzero(text_target, "target text embedding")?;
    nonzero(text_background, "background text embedding")?;
    let z = [
        numerics::cosine(query_token, text_target) / tau,
        numerics::cosine(query_token, text_background) / tau,
    ];
    let p = numerics::softmax(&z);
    Ok(ClassificationScores {
        target: p[0],
        background: p[1],
        tau,
    })
}

/// Gradient of `cos(v, t) / tau` with respect to `v`.
fn logit_gradient(
    v: ArrayView1<f64>,
    v_norm: f64,
    t: ArrayView1<f64>,
    tau: f64,
) -> Result<Array1<f64>> {
    let t_norm = nonzero(t, "text embedding")?;
    let vt = numerics::dot(v, t);
    let a = 1.0 / (v_norm * t_norm * tau);
    let b = vt / (v_norm.powi(3) * t_norm * tau);
    Ok(&t * a - &v * b)
}

/// Channel weights `w_m`: the mean over pixels of `∂S_f/∂F_q^m`.
///
/// `S_f` sees the features only through the pooled token, so each pixel's
/// gradient is `∂S_f/∂v_q / hw` and the weight is `∂S_f/∂v_q / hw` as well.
pub fn gradcam_weights(
    features: ArrayView2<f32>,
    text_target: ArrayView1<f64>,
    text_background: ArrayView1<f64>,
    tau: f64,
) -> Result<GradcamWeights> {
    let v = compute_query_token(features);
    let scores = classification_scores(v.view(), text_target, text_background, tau)?;
    let v_norm = numerics::norm(v.view());
    let grad_f = logit_gradient(v.view(), v_norm, text_target, tau)?;
    let grad_b = logit_gradient(v.view(), v_norm, text_background, tau)?;
    let coupling = scores.target * scores.background / features.nrows() as f64;
    Ok(GradcamWeights((grad_f - grad_b) * coupling))
}

/// `ReLU(Σ_m w_m F_q^m)` reshaped row-major onto the grid, then min-max.
pub fn vtp_map(
    features: ArrayView2<f32>,
    weights: &GradcamWeights,
    grid: Grid,
    eps: f64,
) -> Result<Map2D> {
    let (hw, d) = features.dim();
    if hw != grid.hw() {
        return Err(Error::shape("query features rows", grid.hw(), hw));
    }
    if weights.0.len() != d {
        return Err(Error::shape("gradcam weights", d, weights.0.len()));
    }
    let activation: Vec<f64> = features
        .axis_iter(Axis(0))
        .map(|row| {
            let s: f64 = row
                .iter()
                .zip(weights.0.iter())
                .map(|(&f, &w)| f as f64 * w)
                .sum();
            s.max(0.0)
        })
        .collect();
    Ok(numerics::minmax_normalize(
        &Map2D::from_flat(activation, grid)?,
        eps,
    ))
}

/// Full visual-text prior for a bundle's query features and prompt pair.
pub fn visual_text_prior(
    features: ArrayView2<f32>,
    text_target: ArrayView1<f32>,
    text_background: ArrayView1<f32>,
    grid: Grid,
    tau: f64,
    eps: f64,
) -> Result<Map2D> {
    let t_f = text_target.mapv(f64::from);
    let t_b = text_background.mapv(f64::from);
    let w = gradcam_weights(features, t_f.view(), t_b.view(), tau)?;
    vtp_map(features, &w, grid, eps)
}
