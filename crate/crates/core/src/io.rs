//! Interchange format shared with the asset exporter.
//!
//! Tensor file layout, little-endian:
//!
//! ```text
//! "DOUCTEN1" | u8 dtype (0 = f32) | u8 rank | rank x u32 dims | f32 payload
//! ```
//!
//! One JSON manifest per export names every weight tensor by role.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DoucError, Result, StageExt};
use crate::fade::ProxyConfig;
use crate::fusion::{FusionConfig, LabelMap, LogitMap};
use crate::og::GateConfig;
use crate::tensor::{Grid3, Tensor2};

pub const MAGIC: &[u8; 8] = b"DOUCTEN1";
pub const DTYPE_F32: u8 = 0;
const HEADER_FIXED: usize = 10;

/// Raw tensor as stored on disk: a shape and a row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if !(1..=4).contains(&shape.len()) {
            return Err(DoucError::shape(
                "TensorFile::new",
                format!("rank {} outside 1..=4", shape.len()),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DoucError::shape(
                "TensorFile::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn into_tensor2(self) -> Result<Tensor2> {
        match self.shape.as_slice() {
            &[r, c] => Tensor2::from_vec(r, c, self.data),
            other => Err(DoucError::shape(
                "into_tensor2",
                format!("rank-2 expected, got {other:?}"),
            )),
        }
    }

    pub fn into_grid3(self) -> Result<Grid3> {
        match self.shape.as_slice() {
            &[h, w, c] => Grid3::from_vec(h, w, c, self.data),
            other => Err(DoucError::shape(
                "into_grid3",
                format!("rank-3 expected, got {other:?}"),
            )),
        }
    }

    pub fn into_vector(self) -> Result<Vec<f32>> {
        match self.shape.as_slice() {
            &[_] => Ok(self.data),
            other => Err(DoucError::shape(
                "into_vector",
                format!("rank-1 expected, got {other:?}"),
            )),
        }
    }
}

impl From<&Tensor2> for TensorFile {
    fn from(t: &Tensor2) -> Self {
        Self {
            shape: vec![t.rows(), t.cols()],
            data: t.data().to_vec(),
        }
    }
}

impl From<&Grid3> for TensorFile {
    fn from(g: &Grid3) -> Self {
        let (h, w, c) = g.shape();
        Self {
            shape: vec![h, w, c],
            data: g.data().to_vec(),
        }
    }
}

impl From<&LogitMap> for TensorFile {
    fn from(l: &LogitMap) -> Self {
        Self {
            shape: vec![l.queries(), l.height(), l.width()],
            data: l.values().to_vec(),
        }
    }
}

impl From<&LabelMap> for TensorFile {
    fn from(l: &LabelMap) -> Self {
        Self {
            shape: vec![l.height(), l.width()],
            data: l.labels().iter().map(|&c| c as f32).collect(),
        }
    }
}

impl From<&[f32]> for TensorFile {
    fn from(v: &[f32]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }
}

/// A tensor as loaded from disk, typed by rank.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedTensor {
    Vector(Vec<f32>),
    Matrix(Tensor2),
    Grid(Grid3),
    Rank4 { shape: [usize; 4], data: Vec<f32> },
}

impl LoadedTensor {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            LoadedTensor::Vector(v) => vec![v.len()],
            LoadedTensor::Matrix(t) => vec![t.rows(), t.cols()],
            LoadedTensor::Grid(g) => vec![g.height(), g.width(), g.channels()],
            LoadedTensor::Rank4 { shape, .. } => shape.to_vec(),
        }
    }
}

impl From<TensorFile> for LoadedTensor {
    fn from(f: TensorFile) -> Self {
        match *f.shape.as_slice() {
            [_] => LoadedTensor::Vector(f.data),
            [r, c] => LoadedTensor::Matrix(Tensor2::from_vec(r, c, f.data).expect("validated")),
            [h, w, c] => LoadedTensor::Grid(Grid3::from_vec(h, w, c, f.data).expect("validated")),
            [a, b, c, d] => LoadedTensor::Rank4 {
                shape: [a, b, c, d],
                data: f.data,
            },
            _ => unreachable!("rank validated at parse time"),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DoucError {
    if source.kind() == std::io::ErrorKind::NotFound {
        DoucError::MissingFile(path.to_path_buf())
    } else {
        DoucError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < HEADER_FIXED || &bytes[..8] != MAGIC {
        return Err(DoucError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F32 {
        return Err(DoucError::UnsupportedDtype {
            path: path.to_path_buf(),
            tag: dtype,
        });
    }
    let rank = bytes[9] as usize;
    if !(1..=4).contains(&rank) {
        return Err(DoucError::UnsupportedRank {
            path: path.to_path_buf(),
            rank,
        });
    }
    let header_len = HEADER_FIXED + 4 * rank;
    if bytes.len() < header_len {
        return Err(DoucError::PayloadMismatch {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let shape = bytes[HEADER_FIXED..header_len]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    Ok((shape, header_len))
}

pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<TensorFile> {
    let (shape, header_len) = parse_header(path, bytes)?;
    let count: usize = shape.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != 4 * count {
        return Err(DoucError::PayloadMismatch {
            path: path.to_path_buf(),
            expected: 4 * count,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(TensorFile { shape, data })
}

pub fn encode_tensor(t: &TensorFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * t.shape.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &t.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_tensor(path, &bytes)
}

/// Reads a tensor file; rank 2 loads as [`Tensor2`], rank 3 as [`Grid3`].
pub fn read_tensor(path: impl AsRef<Path>) -> Result<LoadedTensor> {
    read_tensor_file(path).map(LoadedTensor::from)
}

/// Shape from the header alone.
pub fn read_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut head = [0u8; HEADER_FIXED + 16];
    let mut filled = 0;
    while filled < head.len() {
        match f.read(&mut head[filled..]).map_err(|e| io_err(path, e))? {
            0 => break,
            n => filled += n,
        }
    }
    let (shape, header_len) = parse_header(path, &head[..filled])?;
    let len = f.metadata().map_err(|e| io_err(path, e))?.len() as usize;
    let expected = 4 * shape.iter().product::<usize>();
    if len - header_len != expected {
        return Err(DoucError::PayloadMismatch {
            path: path.to_path_buf(),
            expected,
            actual: len - header_len,
        });
    }
    Ok(shape)
}

/// Writes via a sibling temp file and a rename, so readers never see a torn file.
pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// FFN nonlinearity of the encoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact erf form.
    #[default]
    Gelu,
    /// `x * sigmoid(1.702 x)`, as shipped by the original CLIP checkpoints.
    QuickGelu,
}

/// Hyperparameters recorded by the exporter at export time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub og: Option<GateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fade: Option<ProxyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    /// Free-form provenance (feature facet, mask generator, ...).
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn default_ln_eps() -> f32 {
    1e-5
}

/// The JSON document as written by the exporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub model_id: String,
    pub layer_count: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub patch_size: usize,
    pub head_count: usize,
    pub mlp_dim: usize,
    /// Input resolution `[height, width]` in pixels; fixed per export.
    pub image_size: [usize; 2],
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
    #[serde(default)]
    pub activation: Activation,
    pub class_names: Vec<String>,
    /// Query index to class index; identity when empty.
    #[serde(default)]
    pub query_to_class: Vec<usize>,
    pub entries: BTreeMap<String, String>,
    #[serde(default)]
    pub export_config: ExportConfig,
}

/// A manifest whose every referenced tensor exists with the declared shape.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub doc: ManifestDoc,
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RoleSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub required: bool,
}

impl ManifestDoc {
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size[0] / self.patch_size,
            self.image_size[1] / self.patch_size,
        )
    }

    pub fn patch_count(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn query_count(&self) -> usize {
        if self.query_to_class.is_empty() {
            self.class_names.len()
        } else {
            self.query_to_class.len()
        }
    }

    /// Every tensor role the engine understands, with the shape it must have.
    pub fn roles(&self) -> Vec<RoleSpec> {
        let v = self.embed_dim;
        let m = self.mlp_dim;
        let tokens = self.patch_count() + 1;
        let mut roles = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, required: bool| roles.push(RoleSpec { name, shape, required });
        add("pos_embed".into(), vec![tokens, v], true);
        add("ln_pre.gamma".into(), vec![v], false);
        add("ln_pre.beta".into(), vec![v], false);
        for i in 0..self.layer_count {
            let p = format!("blocks.{i}");
            for ln in ["ln_1", "ln_2"] {
                add(format!("{p}.{ln}.gamma"), vec![v], true);
                add(format!("{p}.{ln}.beta"), vec![v], true);
            }
            for w in ["w_q", "w_k", "w_v", "w_out"] {
                add(format!("{p}.attn.{w}"), vec![v, v], true);
            }
            for b in ["b_q", "b_k", "b_v", "b_out"] {
                add(format!("{p}.attn.{b}"), vec![v], false);
            }
            add(format!("{p}.mlp.w_fc"), vec![v, m], true);
            add(format!("{p}.mlp.b_fc"), vec![m], true);
            add(format!("{p}.mlp.w_proj"), vec![m, v], true);
            add(format!("{p}.mlp.b_proj"), vec![v], true);
        }
        add("ln_post.gamma".into(), vec![v], true);
        add("ln_post.beta".into(), vec![v], true);
        add("proj".into(), vec![v, self.proj_dim], true);
        add("text_bank".into(), vec![self.query_count(), self.proj_dim], true);
        roles
    }

    fn validate_fields(&self) -> Result<()> {
        let positive = [
            ("layer_count", self.layer_count),
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim),
            ("patch_size", self.patch_size),
            ("head_count", self.head_count),
            ("mlp_dim", self.mlp_dim),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(DoucError::manifest(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.head_count) {
            return Err(DoucError::manifest(
                "head_count",
                format!("embed_dim {} not divisible by {}", self.embed_dim, self.head_count),
            ));
        }
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(DoucError::manifest(
                "image_size",
                format!("{h}x{w} is not a positive multiple of patch_size {}", self.patch_size),
            ));
        }
        if self.class_names.is_empty() {
            return Err(DoucError::manifest("class_names", "at least one class required"));
        }
        let c = self.class_names.len();
        if self.query_to_class.is_empty() {
            return Ok(());
        }
        if let Some(bad) = self.query_to_class.iter().find(|&&k| k >= c) {
            return Err(DoucError::manifest(
                "query_to_class",
                format!("class index {bad} out of range for {c} classes"),
            ));
        }
        for k in 0..c {
            if !self.query_to_class.contains(&k) {
                return Err(DoucError::manifest(
                    "query_to_class",
                    format!("class {k} ({}) has no query", self.class_names[k]),
                ));
            }
        }
        Ok(())
    }
}

impl Manifest {
    pub fn path_of(&self, role: &str) -> Option<PathBuf> {
        self.doc.entries.get(role).map(|p| self.base_dir.join(p))
    }

    pub fn read_role(&self, role: &str) -> Result<TensorFile> {
        let path = self
            .path_of(role)
            .ok_or_else(|| DoucError::role(role, "no entry in manifest"))?;
        read_tensor_file(path)
    }

    pub fn read_optional_role(&self, role: &str) -> Result<Option<TensorFile>> {
        match self.path_of(role) {
            Some(p) => read_tensor_file(p).map(Some),
            None => Ok(None),
        }
    }
}

/// Parses and validates a manifest, checking every referenced tensor header.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| {
        // serde reports `missing field `x`` / `unknown variant` with position
        DoucError::manifest(json_error_field(&e), e.to_string())
    })?;
    doc.validate_fields()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest { doc, base_dir };
    for role in manifest.doc.roles() {
        let Some(file) = manifest.path_of(&role.name) else {
            if role.required {
                return Err(DoucError::role(&role.name, "missing from entries"));
            }
            continue;
        };
        let shape = read_shape(&file).stage(&format!("manifest role `{}`", role.name))?;
        if shape != role.shape {
            return Err(DoucError::role(
                &role.name,
                format!("declared shape {:?}, file has {shape:?}", role.shape),
            ));
        }
    }
    let paired = [("ln_pre.gamma", "ln_pre.beta")];
    for (a, b) in paired {
        if manifest.doc.entries.contains_key(a) != manifest.doc.entries.contains_key(b) {
            return Err(DoucError::role(a, format!("must be given together with {b}")));
        }
    }
    Ok(manifest)
}

fn json_error_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string())
}

pub fn write_manifest(path: impl AsRef<Path>, doc: &ManifestDoc) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).expect("manifest serializes");
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Stage names used inside golden bundles.
pub mod stage {
    pub const LAST_BLOCK_V: &str = "last_block_v";
    pub const PROXY_AFFINITY: &str = "proxy_affinity";
    pub const LOGITS_OG: &str = "logits_og";
    pub const LOGITS_FADE: &str = "logits_fade";
    pub const CLS_LOGITS: &str = "cls_logits";
    pub const LOGITS_FUSED: &str = "logits_fused";
    pub const LABELS: &str = "labels";

    pub fn pre_gate(layer: usize) -> String {
        format!("layer{layer}.pre_gate")
    }

    pub fn post_gate(layer: usize) -> String {
        format!("layer{layer}.post_gate")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleIndex {
    image_id: String,
    tensors: BTreeMap<String, String>,
}

/// Named intermediate tensors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenBundle {
    pub image_id: String,
    pub tensors: BTreeMap<String, TensorFile>,
}

impl GoldenBundle {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<TensorFile>) {
        self.tensors.insert(name.into(), t.into());
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut index = BundleIndex {
            image_id: self.image_id.clone(),
            tensors: BTreeMap::new(),
        };
        for (name, t) in &self.tensors {
            let file = format!("{name}.bin");
            write_tensor(dir.join(&file), t)?;
            index.tensors.insert(name.clone(), file);
        }
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        write_atomic(&dir.join("bundle.json"), text.as_bytes())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join("bundle.json");
        let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
        let index: BundleIndex =
            serde_json::from_str(&text).map_err(|e| DoucError::manifest(json_error_field(&e), e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, file) in index.tensors {
            let t = read_tensor_file(dir.join(&file)).map_err(|e| DoucError::role(&name, e.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(Self {
            image_id: index.image_id,
            tensors,
        })
    }
}
