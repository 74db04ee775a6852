use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which matrix refines a prior: the balanced attention `D`, or the
/// high-order `max(D, D·Dᵀ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    #[serde(rename = "initial_D", alias = "initial_d")]
    InitialD,
    #[default]
    #[serde(rename = "high_order_R", alias = "high_order_r")]
    HighOrderR,
}

impl std::str::FromStr for RefinementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "initial_d" | "d" | "initial" => Ok(RefinementMode::InitialD),
            "high_order_r" | "r" | "high_order" | "high-order" => Ok(RefinementMode::HighOrderR),
            other => Err(Error::InvalidConfig(format!(
                "unknown refinement mode `{other}`"
            ))),
        }
    }
}

/// Support-mask downsampling onto the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSampling {
    /// Nearest pixel at each patch center.
    #[default]
    Nearest,
    /// Bilinear sample at each patch center, kept where it reaches 0.5.
    Bilinear,
}

impl std::str::FromStr for MaskSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(MaskSampling::Nearest),
            "bilinear" => Ok(MaskSampling::Bilinear),
            other => Err(Error::InvalidConfig(format!(
                "unknown mask sampling `{other}`"
            ))),
        }
    }
}

/// How the box mask is drawn around above-threshold pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    /// One tight rectangle around every above-threshold pixel.
    #[default]
    Global,
    /// Union of one rectangle per 4-connected above-threshold component.
    PerComponent,
}

impl std::str::FromStr for BoxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "global" => Ok(BoxMode::Global),
            "per_component" => Ok(BoxMode::PerComponent),
            other => Err(Error::InvalidConfig(format!("unknown box mode `{other}`"))),
        }
    }
}

/// Every tunable of the prior engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Softmax temperature of the visual-text classification.
    pub tau: f64,
    /// Min-max normalization guard.
    pub eps: f64,
    /// Number of trailing transformer blocks averaged for refinement.
    pub l_blocks: usize,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    /// Floor added to all-zero attention rows/columns before balancing.
    pub attention_floor: f64,
    /// Box threshold as a fraction of the map maximum.
    pub box_theta: f64,
    pub box_mode: BoxMode,
    pub refinement_mode: RefinementMode,
    pub refine_vtp: bool,
    pub refine_vvp: bool,
    pub enable_vtp: bool,
    pub enable_vvp: bool,
    pub mask_sampling: MaskSampling,
    /// Restrict the per-query max to foreground support positions.
    pub vvp_foreground_only: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            tau: 0.01,
            eps: 1e-7,
            l_blocks: 8,
            sinkhorn_max_iters: 100,
            sinkhorn_tol: 1e-6,
            attention_floor: 1e-12,
            box_theta: 0.4,
            box_mode: BoxMode::Global,
            refinement_mode: RefinementMode::HighOrderR,
            refine_vtp: true,
            refine_vvp: false,
            enable_vtp: true,
            enable_vvp: true,
            mask_sampling: MaskSampling::Nearest,
            vvp_foreground_only: false,
        }
    }
}

impl PriorConfig {
    /// Checks the bundle-independent invariants; `l_blocks <= n` is checked
    /// when attention is averaged.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.l_blocks == 0 {
            return bad("l_blocks must be at least 1".into());
        }
        if self.sinkhorn_max_iters == 0 {
            return bad("sinkhorn_max_iters must be at least 1".into());
        }
        if self.sinkhorn_tol.is_nan() || self.sinkhorn_tol <= 0.0 {
            return bad(format!(
                "sinkhorn_tol must be positive, got {}",
                self.sinkhorn_tol
            ));
        }
        if !(self.attention_floor >= 0.0 && self.attention_floor.is_finite()) {
            return bad(format!(
                "attention_floor must be non-negative, got {}",
                self.attention_floor
            ));
        }
        if !(self.box_theta > 0.0 && self.box_theta < 1.0) {
            return bad(format!(
                "box_theta must lie in (0, 1), got {}",
                self.box_theta
            ));
        }
        if !self.enable_vtp && !self.enable_vvp {
            return bad("at least one of enable_vtp / enable_vvp must be on".into());
        }
        Ok(())
    }

    /// Whether the attention-derived refinement matrix is needed at all.
    pub fn needs_refinement(&self) -> bool {
        (self.enable_vtp && self.refine_vtp) || (self.enable_vvp && self.refine_vvp)
    }
}
