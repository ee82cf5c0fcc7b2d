//! Seeded toy models and images for examples, tests and smoke runs.
//!
//! Scenes are a few axis-aligned class regions. Feature grids and patch
//! tokens carry a per-class prototype plus noise, so the affinity proxy and
//! the label maps have structure to find.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigFile, ImageEntry};
use crate::error::{DoucError, Result};
use crate::fade::InstanceMaskSet;
use crate::fusion::{LabelMap, TextBank};
use crate::io::{write_manifest, write_tensor, Activation, ExportConfig, ManifestDoc, TensorFile};
use crate::pipeline::{Engine, ImageInput};
use crate::tensor::{Grid3, Tensor2};
use crate::vit::{BlockWeights, LayerNormParams, ProjectionHead, VisionTransformer};

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub proj_dim: usize,
    pub patch_grid: (usize, usize),
    pub patch_size: usize,
    pub feature_grid: (usize, usize),
    pub feature_dim: usize,
    pub classes: usize,
    /// Query to class; identity when empty.
    pub query_to_class: Vec<usize>,
    pub with_ln_pre: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            layers: 2,
            embed_dim: 8,
            heads: 2,
            mlp_dim: 16,
            proj_dim: 4,
            patch_grid: (4, 4),
            patch_size: 4,
            feature_grid: (6, 6),
            feature_dim: 5,
            classes: 3,
            query_to_class: Vec::new(),
            with_ln_pre: true,
        }
    }
}

impl ToySpec {
    pub fn image_size(&self) -> (usize, usize) {
        (self.patch_grid.0 * self.patch_size, self.patch_grid.1 * self.patch_size)
    }

    pub fn query_count(&self) -> usize {
        if self.query_to_class.is_empty() {
            self.classes
        } else {
            self.query_to_class.len()
        }
    }

    fn query_map(&self) -> Vec<usize> {
        if self.query_to_class.is_empty() {
            (0..self.classes).collect()
        } else {
            self.query_to_class.clone()
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|k| format!("class{k}")).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

fn vector(rng: &mut ChaCha8Rng, n: usize, center: f32, scale: f32) -> Vec<f32> {
    (0..n).map(|_| center + rng.gen_range(-scale..scale)).collect()
}

fn unit_rows(mut t: Tensor2) -> Tensor2 {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        for x in row {
            *x = (*x as f64 / norm) as f32;
        }
    }
    t
}

/// A seeded engine matching `spec`.
pub fn toy_engine(spec: &ToySpec, seed: u64) -> Engine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = spec.embed_dim;
    let m = spec.mlp_dim;
    let s = 1.0 / (v as f32).sqrt();
    let (gh, gw) = spec.patch_grid;
    let ln = |rng: &mut ChaCha8Rng| LayerNormParams {
        gamma: vector(rng, v, 1.0, 0.2),
        beta: vector(rng, v, 0.0, 0.1),
    };
    let pos_embed = uniform(&mut rng, gh * gw + 1, v, 0.1);
    let ln_pre = spec.with_ln_pre.then(|| ln(&mut rng));
    let blocks = (0..spec.layers)
        .map(|_| BlockWeights {
            head_count: spec.heads,
            ln_1: ln(&mut rng),
            w_q: uniform(&mut rng, v, v, s),
            w_k: uniform(&mut rng, v, v, s),
            w_v: uniform(&mut rng, v, v, s),
            w_out: uniform(&mut rng, v, v, s),
            b_q: vector(&mut rng, v, 0.0, 0.05),
            b_k: vector(&mut rng, v, 0.0, 0.05),
            b_v: vector(&mut rng, v, 0.0, 0.05),
            b_out: vector(&mut rng, v, 0.0, 0.05),
            ln_2: ln(&mut rng),
            w_fc: uniform(&mut rng, v, m, s),
            b_fc: vector(&mut rng, m, 0.0, 0.05),
            w_proj: uniform(&mut rng, m, v, 1.0 / (m as f32).sqrt()),
            b_proj: vector(&mut rng, v, 0.0, 0.05),
        })
        .collect();
    let head = ProjectionHead {
        ln_post: ln(&mut rng),
        proj: uniform(&mut rng, v, spec.proj_dim, s),
    };
    let text = unit_rows(uniform(&mut rng, spec.query_count(), spec.proj_dim, 1.0));
    let (h, w) = spec.image_size();
    Engine {
        model: VisionTransformer {
            pos_embed,
            ln_pre,
            blocks,
            head,
            grid: spec.patch_grid,
            ln_eps: 1e-5,
            activation: Activation::Gelu,
        },
        text: TextBank::new(text, spec.query_map(), spec.class_names()).expect("toy text bank is valid"),
        image_size: (h, w),
    }
}

/// One toy image plus its ground truth and the raw mask grids.
#[derive(Debug, Clone)]
pub struct ToyImage {
    pub input: ImageInput,
    pub gt: LabelMap,
    pub patch_mask_grid: Grid3,
    pub pixel_mask_grid: Grid3,
}

/// Class of each cell of an `h x w` grid for a scene in unit coordinates.
struct Scene {
    /// (y0, x0, y1, x1, class), later entries painted on top.
    regions: Vec<(f32, f32, f32, f32, usize)>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, classes: usize) -> Self {
        let cut = rng.gen_range(0.3..0.7f32);
        let a = rng.gen_range(0..classes);
        let b = (a + 1 + rng.gen_range(0..classes.max(2) - 1)) % classes;
        let c = rng.gen_range(0..classes);
        let y0 = rng.gen_range(0.0..0.5f32);
        let x0 = rng.gen_range(0.0..0.5f32);
        Self {
            regions: vec![
                (0.0, 0.0, 1.0, cut, a),
                (0.0, cut, 1.0, 1.0, b),
                (y0, x0, y0 + rng.gen_range(0.25..0.5), x0 + rng.gen_range(0.25..0.5), c),
            ],
        }
    }

    /// Region index covering each cell centre.
    fn regions_at(&self, h: usize, w: usize) -> Vec<usize> {
        let mut out = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = ((y as f32 + 0.5) / h as f32, (x as f32 + 0.5) / w as f32);
                for (r, &(y0, x0, y1, x1, _)) in self.regions.iter().enumerate() {
                    if cy >= y0 && cy < y1 && cx >= x0 && cx < x1 {
                        out[y * w + x] = r;
                    }
                }
            }
        }
        out
    }

    fn mask_grid(&self, h: usize, w: usize) -> Grid3 {
        let k = self.regions.len();
        let at = self.regions_at(h, w);
        let mut data = vec![0.0; h * w * k];
        for (i, &r) in at.iter().enumerate() {
            data[i * k + r] = 1.0;
        }
        Grid3::from_vec(h, w, k, data).expect("sized")
    }
}

/// A seeded image for `engine`; features and tokens follow the scene layout.
pub fn toy_image(spec: &ToySpec, seed: u64, id: &str) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let scene = Scene::random(&mut rng, spec.classes);
    let class_of = |r: usize| scene.regions[r].4;

    let (fh, fw) = spec.feature_grid;
    let protos = uniform(&mut rng, spec.classes, spec.feature_dim, 1.0);
    let mut feats = Vec::with_capacity(fh * fw * spec.feature_dim);
    for r in scene.regions_at(fh, fw) {
        for &p in protos.row(class_of(r)) {
            feats.push(p + rng.gen_range(-0.3..0.3f32));
        }
    }

    let (gh, gw) = spec.patch_grid;
    let token_protos = uniform(&mut rng, spec.classes, spec.embed_dim, 1.0);
    let mut tokens = vector(&mut rng, spec.embed_dim, 0.0, 0.5);
    for r in scene.regions_at(gh, gw) {
        for &p in token_protos.row(class_of(r)) {
            tokens.push(p + rng.gen_range(-0.5..0.5f32));
        }
    }

    let (h, w) = spec.image_size();
    let gt = LabelMap::new(h, w, scene.regions_at(h, w).into_iter().map(class_of).collect()).expect("sized");
    let patch_mask_grid = scene.mask_grid(fh, fw);
    let pixel_mask_grid = scene.mask_grid(h, w);
    ToyImage {
        input: ImageInput {
            id: id.to_string(),
            tokens: Tensor2::from_vec(gh * gw + 1, spec.embed_dim, tokens).expect("sized"),
            features: Some(Grid3::from_vec(fh, fw, spec.feature_dim, feats).expect("sized")),
            patch_masks: Some(InstanceMaskSet::from_grid(&patch_mask_grid)),
            pixel_masks: Some(InstanceMaskSet::from_grid(&pixel_mask_grid)),
        },
        gt,
        patch_mask_grid,
        pixel_mask_grid,
    }
}

fn roles_of(engine: &Engine) -> Vec<(String, TensorFile)> {
    let m = &engine.model;
    let mut out: Vec<(String, TensorFile)> = vec![("pos_embed".into(), (&m.pos_embed).into())];
    let ln = |out: &mut Vec<(String, TensorFile)>, p: &str, l: &LayerNormParams| {
        out.push((format!("{p}.gamma"), l.gamma.as_slice().into()));
        out.push((format!("{p}.beta"), l.beta.as_slice().into()));
    };
    if let Some(l) = &m.ln_pre {
        ln(&mut out, "ln_pre", l);
    }
    for (i, b) in m.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        ln(&mut out, &format!("{p}.ln_1"), &b.ln_1);
        ln(&mut out, &format!("{p}.ln_2"), &b.ln_2);
        for (name, t) in [("w_q", &b.w_q), ("w_k", &b.w_k), ("w_v", &b.w_v), ("w_out", &b.w_out)] {
            out.push((format!("{p}.attn.{name}"), t.into()));
        }
        for (name, t) in [("b_q", &b.b_q), ("b_k", &b.b_k), ("b_v", &b.b_v), ("b_out", &b.b_out)] {
            out.push((format!("{p}.attn.{name}"), t.as_slice().into()));
        }
        out.push((format!("{p}.mlp.w_fc"), (&b.w_fc).into()));
        out.push((format!("{p}.mlp.b_fc"), b.b_fc.as_slice().into()));
        out.push((format!("{p}.mlp.w_proj"), (&b.w_proj).into()));
        out.push((format!("{p}.mlp.b_proj"), b.b_proj.as_slice().into()));
    }
    ln(&mut out, "ln_post", &m.head.ln_post);
    out.push(("proj".into(), (&m.head.proj).into()));
    out.push(("text_bank".into(), engine.text.embeddings().into()));
    out
}

/// Writes `engine` as an export directory and returns the manifest path.
pub fn write_export(dir: &Path, engine: &Engine, model_id: &str, export_config: ExportConfig) -> Result<PathBuf> {
    let m = &engine.model;
    let mut entries = BTreeMap::new();
    for (role, t) in roles_of(engine) {
        let rel = format!("tensors/{role}.bin");
        write_tensor(dir.join(&rel), &t)?;
        entries.insert(role, rel);
    }
    let patch_size = engine.image_size.0 / m.grid.0;
    if patch_size * m.grid.0 != engine.image_size.0 || patch_size * m.grid.1 != engine.image_size.1 {
        return Err(DoucError::shape(
            "write_export",
            "image size is not a multiple of the patch grid",
        ));
    }
    let doc = ManifestDoc {
        model_id: model_id.to_string(),
        layer_count: m.layer_count(),
        embed_dim: m.dim(),
        proj_dim: m.proj_dim(),
        patch_size,
        head_count: m.blocks.first().map_or(1, |b| b.head_count),
        mlp_dim: m.blocks.first().map_or(1, |b| b.w_fc.cols()),
        image_size: [engine.image_size.0, engine.image_size.1],
        ln_eps: m.ln_eps,
        activation: m.activation,
        class_names: engine.text.class_names().to_vec(),
        query_to_class: engine.text.query_to_class().to_vec(),
        entries,
        export_config,
    };
    let path = dir.join("manifest.json");
    write_manifest(&path, &doc)?;
    Ok(path)
}

/// Writes a toy image's inputs under `dir/images/` and returns the config entry
/// with paths relative to `dir`.
pub fn write_image(dir: &Path, image: &ToyImage) -> Result<ImageEntry> {
    let id = &image.input.id;
    let rel = |what: &str| PathBuf::from(format!("images/{id}.{what}.bin"));
    let entry = ImageEntry {
        id: id.clone(),
        tokens: rel("tokens"),
        features: Some(rel("features")),
        patch_masks: Some(rel("patch_masks")),
        pixel_masks: Some(rel("pixel_masks")),
        gt: Some(rel("gt")),
    };
    write_tensor(dir.join(&entry.tokens), &(&image.input.tokens).into())?;
    if let Some(f) = &image.input.features {
        write_tensor(dir.join(rel("features")), &f.into())?;
    }
    write_tensor(dir.join(rel("patch_masks")), &(&image.patch_mask_grid).into())?;
    write_tensor(dir.join(rel("pixel_masks")), &(&image.pixel_mask_grid).into())?;
    write_tensor(dir.join(rel("gt")), &(&image.gt).into())?;
    Ok(entry)
}

/// A complete on-disk toy run: export, `images` inputs, and `config.json`.
/// Returns the config path.
pub fn write_toy_run(dir: &Path, spec: &ToySpec, seed: u64, images: usize) -> Result<PathBuf> {
    let engine = toy_engine(spec, seed);
    write_export(dir, &engine, &format!("toy-{seed}"), ExportConfig::default())?;
    let mut entries = Vec::with_capacity(images);
    for i in 0..images {
        let img = toy_image(spec, seed.wrapping_add(1 + i as u64), &format!("img{i:03}"));
        entries.push(write_image(dir, &img)?);
    }
    let config = ConfigFile {
        manifest: Some("manifest.json".into()),
        out: Some("out".into()),
        images: entries,
        ..Default::default()
    };
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&config).expect("config serializes");
    crate::io::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
