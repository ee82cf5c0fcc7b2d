//! Feature-guided proxy attention for the final encoder block.
//!
//! Patch-to-patch affinities come from an external feature grid rather than
//! from the block's own queries and keys. They are optionally restricted to
//! instance masks, softmax-normalized with a temperature, and used to
//! aggregate the block's value vectors resampled onto the feature grid.

use serde::{Deserialize, Serialize};

use crate::error::{DoucError, Result, StageExt};
use crate::fusion::{LogitMap, TextBank};
use crate::og::dense_logits;
use crate::tensor::{self, bilinear_resize, l2_normalize_rows, matmul, matmul_bt, Grid3, Tensor2};
use crate::vit::{LastBlockMode, ReplacedAggregation, TokenSequence, ValueAggregator, VisionTransformer};

/// Written into disallowed affinity entries before normalization.
pub const MASK_SENTINEL: f32 = -1e4;
pub const DEFAULT_TAU: f32 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Off,
    /// Restrict attention to same-instance pairs when masks are supplied.
    #[default]
    Instance,
}

/// Which patches an unmasked (uncovered) patch may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncoveredPolicy {
    /// All uncovered patches form one extra group.
    #[default]
    BackgroundGroup,
    SelfOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    #[serde(default = "default_tau")]
    pub tau: f32,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub uncovered_policy: UncoveredPolicy,
}

fn default_tau() -> f32 {
    DEFAULT_TAU
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            mask_mode: MaskMode::default(),
            uncovered_policy: UncoveredPolicy::default(),
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DoucError::config("fade.tau", format!("{} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Binary instance masks on one grid, with overlaps resolved so that every
/// cell belongs to at most one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskSet {
    height: usize,
    width: usize,
    masks: Vec<Vec<bool>>,
    assignment: Vec<Option<usize>>,
}

impl InstanceMaskSet {
    /// Builds from an `h x w x k` grid (one channel per instance, value > 0.5
    /// means inside). A cell inside several masks goes to the smallest one;
    /// equal areas go to the lower index.
    pub fn from_grid(grid: &Grid3) -> Self {
        let (h, w, k) = grid.shape();
        let mut masks = vec![vec![false; h * w]; k];
        for y in 0..h {
            for x in 0..w {
                for (m, &v) in grid.pixel(y, x).iter().enumerate() {
                    masks[m][y * w + x] = v > 0.5;
                }
            }
        }
        let areas: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
        let assignment = (0..h * w)
            .map(|cell| (0..k).filter(|&m| masks[m][cell]).min_by_key(|&m| (areas[m], m)))
            .collect();
        Self {
            height: h,
            width: w,
            masks,
            assignment,
        }
    }

    /// From a per-cell instance label (`None` = uncovered).
    pub fn from_assignment(height: usize, width: usize, assignment: Vec<Option<usize>>) -> Result<Self> {
        if assignment.len() != height * width {
            return Err(DoucError::shape(
                "InstanceMaskSet::from_assignment",
                format!("{} labels for a {height}x{width} grid", assignment.len()),
            ));
        }
        let k = assignment.iter().flatten().map(|&m| m + 1).max().unwrap_or(0);
        let mut masks = vec![vec![false; height * width]; k];
        for (cell, a) in assignment.iter().enumerate() {
            if let Some(m) = a {
                masks[*m][cell] = true;
            }
        }
        Ok(Self {
            height,
            width,
            masks,
            assignment,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Raw (pre-resolution) mask `m`.
    pub fn mask(&self, m: usize) -> &[bool] {
        &self.masks[m]
    }

    /// Instance owning each cell after overlap resolution.
    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }
}

/// Affinities after normalization; every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: Tensor2,
}

impl AffinityMatrix {
    pub fn values(&self) -> &Tensor2 {
        &self.values
    }

    pub fn into_inner(self) -> Tensor2 {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }
}

/// Pairwise cosine similarity of the flattened feature vectors.
pub fn build_affinity(features: &Grid3) -> Tensor2 {
    let e = l2_normalize_rows(&features.to_tensor2(), 1e-12);
    matmul_bt(&e, &e).expect("square by construction")
}

/// Writes [`MASK_SENTINEL`] wherever `i` and `j` may not attend to each other.
pub fn mask_affinity(s: &Tensor2, masks: &InstanceMaskSet, policy: UncoveredPolicy) -> Result<Tensor2> {
    let n = s.rows();
    let (h, w) = masks.grid();
    if s.cols() != n || h * w != n {
        return Err(DoucError::shape(
            "mask_affinity",
            format!("affinity {:?} vs {h}x{w} mask grid", s.shape()),
        ));
    }
    let owner = masks.assignment();
    let mut out = s.clone();
    for i in 0..n {
        for j in 0..n {
            let allowed = match (owner[i], owner[j]) {
                (Some(a), Some(b)) => a == b,
                (None, None) => match policy {
                    UncoveredPolicy::BackgroundGroup => true,
                    UncoveredPolicy::SelfOnly => i == j,
                },
                _ => false,
            };
            if !allowed {
                out.set(i, j, MASK_SENTINEL);
            }
        }
    }
    Ok(out)
}

/// Row softmax of `tau * s`. Sentinel entries receive exactly zero weight.
pub fn normalize_affinity(s: &Tensor2, tau: f32) -> AffinityMatrix {
    let mut values = s.clone();
    for r in 0..values.rows() {
        tensor::softmax_in_place(values.row_mut(r), tau as f64, Some(MASK_SENTINEL));
    }
    AffinityMatrix { values }
}

/// Patch rows of `v` (class row dropped) resampled from the encoder grid to `target`.
pub fn resample_values(v: &Tensor2, clip_grid: (usize, usize), target: (usize, usize)) -> Result<Tensor2> {
    let (gh, gw) = clip_grid;
    if v.rows() != gh * gw + 1 {
        return Err(DoucError::shape(
            "resample_values",
            format!("{} value rows for a {gh}x{gw} grid plus class token", v.rows()),
        ));
    }
    let grid = Grid3::from_tensor2(gh, gw, v.slice_rows(1, v.rows()))?;
    Ok(bilinear_resize(&grid, target.0, target.1).into_tensor2())
}

/// `A V`: every output row is a convex combination of value rows.
pub fn reconstruct_values(a: &AffinityMatrix, v: &Tensor2) -> Result<Tensor2> {
    matmul(a.values(), v).stage("reconstruct_values")
}

/// Final-block aggregator driven by an external feature grid.
pub struct ProxyAggregator<'a> {
    pub features: &'a Grid3,
    pub masks: Option<&'a InstanceMaskSet>,
    pub config: &'a ProxyConfig,
}

impl ProxyAggregator<'_> {
    pub fn affinity(&self) -> Result<AffinityMatrix> {
        let raw = build_affinity(self.features);
        let raw = match (self.config.mask_mode, self.masks) {
            (MaskMode::Instance, Some(m)) => mask_affinity(&raw, m, self.config.uncovered_policy).stage("fade/mask")?,
            _ => raw,
        };
        Ok(normalize_affinity(&raw, self.config.tau))
    }
}

impl ValueAggregator for ProxyAggregator<'_> {
    fn aggregate(&self, values: &Tensor2, grid: (usize, usize)) -> Result<ReplacedAggregation> {
        let target = (self.features.height(), self.features.width());
        let a = self.affinity()?;
        let v = resample_values(values, grid, target).stage("fade/resample")?;
        let patches = reconstruct_values(&a, &v)?;
        Ok(ReplacedAggregation {
            patches,
            grid: target,
            affinity: Some(a.into_inner()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FadeOutput {
    pub logits: LogitMap,
    pub affinity: Tensor2,
    /// Final block value projections before resampling, `(L+1) x v`.
    pub values: Tensor2,
}

/// Full proxy-attention branch: `Q x H_f x W_f` logits.
pub fn fade_dense_logits(
    x0: &TokenSequence,
    model: &VisionTransformer,
    features: &Grid3,
    masks: Option<&InstanceMaskSet>,
    text: &TextBank,
    config: &ProxyConfig,
) -> Result<FadeOutput> {
    config.validate()?;
    if let Some(m) = masks {
        if m.grid() != (features.height(), features.width()) {
            return Err(DoucError::shape(
                "fade_dense_logits",
                format!(
                    "patch masks on {:?} vs feature grid {}x{}",
                    m.grid(),
                    features.height(),
                    features.width()
                ),
            ))
            .stage("fade/masks");
        }
    }
    let aggregator = ProxyAggregator {
        features,
        masks,
        config,
    };
    let out = model
        .forward(x0, &[], LastBlockMode::Replaced(&aggregator))
        .stage("fade/forward")?;
    let logits = dense_logits(&out.tokens, &model.head, model.ln_eps, text).stage("fade/logits")?;
    let aggregation = out.aggregation.expect("replaced mode yields an aggregation");
    Ok(FadeOutput {
        logits,
        affinity: aggregation.affinity.expect("proxy aggregator records affinity"),
        values: out.values.expect("replaced mode captures values"),
    })
}
