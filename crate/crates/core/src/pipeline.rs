//! Per-image orchestration of both branches, fusion and prediction, plus
//! comparison of the staged intermediates against a golden bundle.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DoucError, Result, StageExt};
use crate::fade::{fade_dense_logits, FadeOutput, InstanceMaskSet, ProxyConfig};
use crate::fusion::{
    add_cls_prior, align_and_fuse, cls_prior_logits, collapse_queries, instance_post_correct, label_map, FusionConfig,
    LabelMap, LogitMap, TextBank,
};
use crate::io::{load_manifest, stage, GoldenBundle, Manifest, TensorFile};
use crate::og::{og_dense_logits, GateConfig, GateReport};
use crate::tensor::{max_abs_diff, Grid3, Tensor2};
use crate::vit::{project_to_joint_space, LastBlockMode, VisionTransformer};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub og: GateConfig,
    #[serde(default)]
    pub fade: ProxyConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
}

impl PipelineConfig {
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        self.og.validate(layer_count)?;
        self.fade.validate()?;
        self.fusion.validate()
    }
}

/// Everything the engine needs for one image.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub id: String,
    /// Patch embeddings with the class embedding in row 0, before positional embedding.
    pub tokens: Tensor2,
    pub features: Option<Grid3>,
    pub patch_masks: Option<InstanceMaskSet>,
    pub pixel_masks: Option<InstanceMaskSet>,
}

/// Loaded model, text bank and export resolution.
#[derive(Debug, Clone)]
pub struct Engine {
    pub model: VisionTransformer,
    pub text: TextBank,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct GateStage {
    pub layer: usize,
    pub pre: Tensor2,
    pub post: Tensor2,
}

#[derive(Debug, Clone)]
pub struct ImageResult {
    pub id: String,
    pub gate_stages: Vec<GateStage>,
    pub gate_report: GateReport,
    pub logits_og: Option<LogitMap>,
    pub fade: Option<FadeOutput>,
    pub cls_logits: Option<Vec<f32>>,
    /// Query logits after fusion and the class-token prior.
    pub logits_fused: LogitMap,
    /// Class logits at pixel resolution, after post-correction if enabled.
    pub class_logits: LogitMap,
    pub labels: LabelMap,
}

fn weighted(l: &LogitMap, a: f32) -> LogitMap {
    let values = l.values().iter().map(|&v| (a as f64 * v as f64) as f32).collect();
    LogitMap::new(l.queries(), l.height(), l.width(), values).expect("same shape")
}

impl Engine {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let model = VisionTransformer::from_manifest(manifest).stage("load/model")?;
        let text = TextBank::from_manifest(manifest).stage("load/text_bank")?;
        if text.dim() != model.proj_dim() {
            return Err(DoucError::role(
                "text_bank",
                format!("dim {} vs projection dim {}", text.dim(), model.proj_dim()),
            ));
        }
        let [h, w] = manifest.doc.image_size;
        Ok(Self {
            model,
            text,
            image_size: (h, w),
        })
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(&load_manifest(manifest_path)?)
    }

    pub fn run(&self, input: &ImageInput, config: &PipelineConfig) -> Result<ImageResult> {
        config.validate(self.model.layer_count()).stage("config")?;
        let x0 = self.model.prepare_input(&input.tokens).stage("input")?;
        let fusion = &config.fusion;
        let need_og = fusion.alpha_og > 0.0 || fusion.lambda_cls > 0.0;
        let need_fade = fusion.alpha_fade > 0.0;

        let mut gate_stages = Vec::new();
        let mut gate_report = GateReport::default();
        let mut logits_og = None;
        let mut cls_logits = None;
        if need_og {
            let hooks = config.og.hooks(self.model.layer_count());
            let out = self
                .model
                .forward(&x0, &hooks, LastBlockMode::Standard)
                .stage("og/forward")?;
            for rec in out.hooks {
                gate_stages.push(GateStage {
                    layer: rec.layer_index,
                    pre: rec.before.into_tokens(),
                    post: rec.after.into_tokens(),
                });
                if let Some(g) = rec.gate {
                    gate_report.layers.push((rec.layer_index, g));
                }
            }
            let head = &self.model.head;
            logits_og = Some(og_dense_logits(&out.tokens, head, self.model.ln_eps, &self.text).stage("og/logits")?);
            let projected = project_to_joint_space(&out.tokens, head, self.model.ln_eps).stage("og/cls")?;
            cls_logits = Some(cls_prior_logits(projected.row(0), &self.text).stage("og/cls")?);
        }

        let fade = if need_fade {
            let features = input.features.as_ref().ok_or_else(|| {
                DoucError::config("images.features", format!("image `{}` has no feature grid", input.id))
            })?;
            Some(fade_dense_logits(
                &x0,
                &self.model,
                features,
                input.patch_masks.as_ref(),
                &self.text,
                &config.fade,
            )?)
        } else {
            None
        };

        let fused = match (&logits_og, &fade) {
            (Some(og), Some(f)) if fusion.alpha_og > 0.0 => align_and_fuse(og, &f.logits, fusion).stage("fusion")?,
            (_, Some(f)) => weighted(&f.logits, fusion.alpha_fade),
            (Some(og), None) => weighted(og, fusion.alpha_og),
            (None, None) => unreachable!("validated: at least one branch weight is positive"),
        };
        let fused = match &cls_logits {
            Some(l_cls) => add_cls_prior(&fused, l_cls, fusion.lambda_cls).stage("fusion/cls_prior")?,
            None => fused,
        };

        let class = collapse_queries(&fused, self.text.query_to_class(), self.text.classes(), fusion.collapse)
            .stage("collapse")?;
        let (h, w) = self.image_size;
        let mut class_logits = class.resize(h, w);
        if fusion.post_correct {
            if let Some(masks) = &input.pixel_masks {
                class_logits = instance_post_correct(&class_logits, masks).stage("post_correct")?;
            }
        }
        let labels = label_map(&class_logits);
        Ok(ImageResult {
            id: input.id.clone(),
            gate_stages,
            gate_report,
            logits_og,
            fade,
            cls_logits,
            logits_fused: fused,
            class_logits,
            labels,
        })
    }
}

impl ImageResult {
    /// Staged intermediates in golden-bundle form.
    pub fn to_bundle(&self) -> GoldenBundle {
        let mut b = GoldenBundle::new(&self.id);
        for g in &self.gate_stages {
            b.insert(stage::pre_gate(g.layer), &g.pre);
            b.insert(stage::post_gate(g.layer), &g.post);
        }
        if let Some(og) = &self.logits_og {
            b.insert(stage::LOGITS_OG, og);
        }
        if let Some(cls) = &self.cls_logits {
            b.insert(stage::CLS_LOGITS, cls.as_slice());
        }
        if let Some(f) = &self.fade {
            b.insert(stage::LAST_BLOCK_V, &f.values);
            b.insert(stage::PROXY_AFFINITY, &f.affinity);
            b.insert(stage::LOGITS_FADE, &f.logits);
        }
        b.insert(stage::LOGITS_FUSED, &self.logits_fused);
        b.insert(stage::LABELS, &self.labels);
        b
    }
}

/// Max-abs tolerance per stage; labels always compare exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub tokens: f32,
    pub affinity: f32,
    pub logits: f32,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tokens: 1e-3,
            affinity: 1e-3,
            logits: 1e-3,
        }
    }
}

impl Tolerances {
    pub fn for_stage(&self, name: &str) -> f32 {
        if name == stage::LABELS {
            0.0
        } else if name == stage::PROXY_AFFINITY {
            self.affinity
        } else if name.ends_with("_gate") || name == stage::LAST_BLOCK_V {
            self.tokens
        } else {
            self.logits
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckOutcome {
    Pass { max_abs: f32 },
    Mismatch { max_abs: f32 },
    ShapeMismatch { engine: Vec<usize>, golden: Vec<usize> },
    MissingFromBundle,
    NotProduced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageCheck {
    pub stage: String,
    pub tolerance: f32,
    pub outcome: CheckOutcome,
}

impl StageCheck {
    pub fn passed(&self) -> bool {
        matches!(self.outcome, CheckOutcome::Pass { .. })
    }
}

impl std::fmt::Display for StageCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tol = self.tolerance;
        match &self.outcome {
            CheckOutcome::Pass { max_abs } => write!(f, "PASS {:<24} max_abs={max_abs:.3e} tol={tol:.0e}", self.stage),
            CheckOutcome::Mismatch { max_abs } => {
                write!(f, "FAIL {:<24} max_abs={max_abs:.3e} tol={tol:.0e}", self.stage)
            }
            CheckOutcome::ShapeMismatch { engine, golden } => {
                write!(f, "FAIL {:<24} shape engine={engine:?} golden={golden:?}", self.stage)
            }
            CheckOutcome::MissingFromBundle => write!(f, "FAIL {:<24} missing from bundle", self.stage),
            CheckOutcome::NotProduced => write!(f, "FAIL {:<24} not produced by this configuration", self.stage),
        }
    }
}

fn compare_tensor(engine: &TensorFile, golden: &TensorFile, tol: f32) -> CheckOutcome {
    if engine.shape != golden.shape {
        return CheckOutcome::ShapeMismatch {
            engine: engine.shape.clone(),
            golden: golden.shape.clone(),
        };
    }
    let max_abs = max_abs_diff(&engine.data, &golden.data);
    let nan_mismatch = engine
        .data
        .iter()
        .zip(&golden.data)
        .any(|(a, b)| a.is_nan() != b.is_nan());
    if max_abs <= tol && !nan_mismatch {
        CheckOutcome::Pass { max_abs }
    } else {
        CheckOutcome::Mismatch { max_abs }
    }
}

/// Compares every engine stage with its golden counterpart, in stage-name order.
pub fn verify_bundle(engine: &GoldenBundle, golden: &GoldenBundle, tol: &Tolerances) -> Vec<StageCheck> {
    let names: BTreeSet<&String> = engine.tensors.keys().chain(golden.tensors.keys()).collect();
    names
        .into_iter()
        .map(|name| {
            let tolerance = tol.for_stage(name);
            let outcome = match (engine.tensors.get(name), golden.tensors.get(name)) {
                (Some(e), Some(g)) => compare_tensor(e, g, tolerance),
                (Some(_), None) => CheckOutcome::MissingFromBundle,
                (None, _) => CheckOutcome::NotProduced,
            };
            StageCheck {
                stage: name.clone(),
                tolerance,
                outcome,
            }
        })
        .collect()
}
