//! Outlier-gated branch: norm-based soft gating of patch tokens inside the
//! encoder, and the dense query logits of the gated tokens.

use serde::{Deserialize, Serialize};

use crate::error::{DoucError, Result};
use crate::fusion::{LogitMap, TextBank};
use crate::tensor::{self, l2_normalize_rows, matmul_bt};
use crate::vit::{project_to_joint_space, HookTransform, LayerHook, ProjectionHead, TokenSequence};

pub const DEFAULT_GATE_STRENGTH: f32 = 0.5;
pub const DEFAULT_GATE_TEMPERATURE: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Gated block indices; `None` means the last quarter of the blocks.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
}

fn default_alpha() -> f32 {
    DEFAULT_GATE_STRENGTH
}

fn default_temperature() -> f32 {
    DEFAULT_GATE_TEMPERATURE
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            layers: None,
            alpha: DEFAULT_GATE_STRENGTH,
            temperature: DEFAULT_GATE_TEMPERATURE,
        }
    }
}

/// Last quarter of `layer_count` blocks, at least one.
pub fn default_gate_layers(layer_count: usize) -> Vec<usize> {
    let n = (layer_count / 4).max(1).min(layer_count);
    (layer_count - n..layer_count).collect()
}

impl GateConfig {
    pub fn resolved_layers(&self, layer_count: usize) -> Vec<usize> {
        self.layers.clone().unwrap_or_else(|| default_gate_layers(layer_count))
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DoucError::config("og.alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DoucError::config(
                "og.temperature",
                format!("{} must be positive", self.temperature),
            ));
        }
        if let Some(bad) = self.resolved_layers(layer_count).iter().find(|&&l| l >= layer_count) {
            return Err(DoucError::config(
                "og.layers",
                format!("layer {bad} out of range for {layer_count} blocks"),
            ));
        }
        Ok(())
    }

    pub fn hooks(&self, layer_count: usize) -> Vec<LayerHook> {
        let mut layers = self.resolved_layers(layer_count);
        layers.sort_unstable();
        layers.dedup();
        layers
            .into_iter()
            .map(|layer_index| LayerHook {
                layer_index,
                transform: HookTransform::Gate {
                    alpha: self.alpha,
                    temperature: self.temperature,
                },
            })
            .collect()
    }
}

/// Scores and weights of the patch tokens at one gated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGate {
    pub scores: Vec<f32>,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateReport {
    pub layers: Vec<(usize, LayerGate)>,
}

/// Euclidean norm of every patch token; the class token is skipped.
pub fn reliability_scores(tokens: &TokenSequence) -> Vec<f32> {
    (0..tokens.patch_count())
        .map(|i| tensor::l2_norm(tokens.patch(i)) as f32)
        .collect()
}

/// Min-max normalized scores through a centered sigmoid with the given temperature.
pub fn gate_weights(scores: &[f32], temperature: f32) -> Vec<f32> {
    let lo = scores.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let spread = hi - lo;
    let t = temperature as f64;
    scores
        .iter()
        .map(|&s| {
            let normalized = if spread > 0.0 { (s as f64 - lo) / spread } else { 0.5 };
            (1.0 / (1.0 + (-(normalized - 0.5) / t).exp())) as f32
        })
        .collect()
}

/// Scales patch token `i` by `(1 - alpha) + alpha * w[i]`.
pub fn apply_gate(tokens: &TokenSequence, weights: &[f32], alpha: f32) -> Result<TokenSequence> {
    if weights.len() != tokens.patch_count() {
        return Err(DoucError::shape(
            "apply_gate",
            format!("{} weights for {} patch tokens", weights.len(), tokens.patch_count()),
        ));
    }
    let mut out = tokens.clone();
    for (i, &w) in weights.iter().enumerate() {
        let factor = ((1.0 - alpha as f64) + alpha as f64 * w as f64) as f32;
        for x in out.patch_mut(i) {
            *x *= factor;
        }
    }
    Ok(out)
}

pub(crate) fn gate_tokens(tokens: &TokenSequence, alpha: f32, temperature: f32) -> Result<(TokenSequence, LayerGate)> {
    let scores = reliability_scores(tokens);
    let weights = gate_weights(&scores, temperature);
    let gated = apply_gate(tokens, &weights, alpha)?;
    Ok((gated, LayerGate { scores, weights }))
}

/// Cosine logits of every patch against every query, `Q x grid_h x grid_w`.
pub fn og_dense_logits(tokens: &TokenSequence, head: &ProjectionHead, eps: f32, text: &TextBank) -> Result<LogitMap> {
    dense_logits(tokens, head, eps, text)
}

/// Shared by both branches: project, normalize and score the patch rows.
pub(crate) fn dense_logits(
    tokens: &TokenSequence,
    head: &ProjectionHead,
    eps: f32,
    text: &TextBank,
) -> Result<LogitMap> {
    if head.proj.cols() != text.dim() {
        return Err(DoucError::shape(
            "dense_logits",
            format!("projection dim {} vs text dim {}", head.proj.cols(), text.dim()),
        ));
    }
    let projected = project_to_joint_space(tokens, head, eps)?;
    let patches = projected.slice_rows(1, projected.rows());
    let z = l2_normalize_rows(&patches, 1e-12);
    // cosine of unit vectors; clamp float overshoot
    let y = matmul_bt(&z, text.embeddings())?.map(|x| x.clamp(-1.0, 1.0));
    let (h, w) = tokens.grid();
    LogitMap::from_patch_major(&y, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2;
    use proptest::prelude::*;

    fn seq(patches: Vec<Vec<f32>>, h: usize, w: usize) -> TokenSequence {
        let dim = patches[0].len();
        let mut rows = vec![vec![9.0; dim]];
        rows.extend(patches);
        TokenSequence::new(Tensor2::from_rows(&rows).unwrap(), h, w).unwrap()
    }

    #[test]
    fn default_layers_are_last_quarter() {
        assert_eq!(default_gate_layers(12), vec![9, 10, 11]);
        assert_eq!(default_gate_layers(24), (18..24).collect::<Vec<_>>());
        assert_eq!(default_gate_layers(2), vec![1]);
        assert_eq!(default_gate_layers(1), vec![0]);
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate(12).is_ok());
        let bad_alpha = GateConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad_alpha.validate(12).is_err());
        let bad_t = GateConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad_t.validate(12).is_err());
        let bad_layer = GateConfig {
            layers: Some(vec![12]),
            ..Default::default()
        };
        assert!(bad_layer.validate(12).is_err());
    }

    #[test]
    fn scores_skip_class_token() {
        let t = seq(vec![vec![3.0, 4.0, 0.0], vec![0.0; 3]], 1, 2);
        assert_eq!(reliability_scores(&t), vec![5.0, 0.0]);
    }

    #[test]
    fn weight_endpoints_and_flat_scores() {
        assert_eq!(gate_weights(&[2.0, 2.0, 2.0], 0.25), vec![0.5; 3]);
        let t = 0.3f32 as f64;
        let w = gate_weights(&[1.0, 4.0, 2.5], t as f32);
        let sig = |x: f64| (1.0 / (1.0 + (-x).exp())) as f32;
        assert_eq!(w[1], sig(0.5 / t));
        assert_eq!(w[0], sig(-0.5 / t));
    }

    #[test]
    fn gate_scalar_cases() {
        let t = seq(vec![vec![1.0, -2.0], vec![0.5, 4.0]], 1, 2);
        assert_eq!(apply_gate(&t, &[0.3, 0.9], 0.0).unwrap(), t);

        let g = apply_gate(&t, &[1.0, 0.2], 1.0).unwrap();
        assert_eq!(g.patch(0), t.patch(0));

        let g = apply_gate(&t, &[0.0, 1.0], 0.5).unwrap();
        assert_eq!(g.patch(0), &[0.5, -1.0]);
        assert_eq!(g.patch(1), t.patch(1));
        assert_eq!(g.cls(), t.cls());

        assert!(apply_gate(&t, &[0.5], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn weights_monotone_in_scores(scores in prop::collection::vec(0.0f32..100.0, 2..40), t in 0.05f32..2.0) {
            let w = gate_weights(&scores, t);
            for i in 0..scores.len() {
                prop_assert!(w[i] > 0.0 && w[i] < 1.0);
                for j in 0..scores.len() {
                    if scores[i] <= scores[j] {
                        prop_assert!(w[i] <= w[j]);
                    }
                }
            }
        }

        #[test]
        fn gating_keeps_direction_and_bounds(
            vals in prop::collection::vec(-5.0f32..5.0, 12),
            alpha in 0.0f32..=1.0,
        ) {
            let patches: Vec<Vec<f32>> = vals.chunks(3).map(<[f32]>::to_vec).collect();
            let t = seq(patches, 2, 2);
            let (g, report) = gate_tokens(&t, alpha, 0.25).unwrap();
            prop_assert_eq!(report.weights.len(), 4);
            for i in 0..4 {
                let (a, b) = (t.patch(i), g.patch(i));
                let na = tensor::l2_norm(a);
                let nb = tensor::l2_norm(b);
                prop_assert!(nb <= na * (1.0 + 1e-6));
                prop_assert!(nb >= (1.0 - alpha as f64) * na * (1.0 - 1e-6));
                if na > 1e-3 {
                    let cos = tensor::dot(a, b) / (na * nb);
                    prop_assert!((cos - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
