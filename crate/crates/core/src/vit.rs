//! Pre-norm ViT encoder with a per-layer token hook and a replaceable
//! final-block aggregation.

use crate::error::{DoucError, Result};
use crate::io::{Activation, Manifest};
use crate::og::{self, LayerGate};
use crate::tensor::{self, bilinear_resize, layer_norm, matmul, Grid3, Tensor2};

/// Class token followed by the patch tokens of a `grid_h x grid_w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Tensor2,
    grid_h: usize,
    grid_w: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor2, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tokens.rows() != grid_h * grid_w + 1 {
            return Err(DoucError::shape(
                "TokenSequence::new",
                format!("{} rows for a {grid_h}x{grid_w} grid plus class token", tokens.rows()),
            ));
        }
        Ok(Self { tokens, grid_h, grid_w })
    }

    /// Class token and patch rows, reassembled.
    pub fn from_parts(cls: &[f32], patches: &Tensor2, grid_h: usize, grid_w: usize) -> Result<Self> {
        let head = Tensor2::from_vec(1, cls.len(), cls.to_vec())?;
        Self::new(head.vstack(patches)?, grid_h, grid_w)
    }

    pub fn tokens(&self) -> &Tensor2 {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor2 {
        self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn cls(&self) -> &[f32] {
        self.tokens.row(0)
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        self.tokens.row(i + 1)
    }

    pub fn patches(&self) -> Tensor2 {
        self.tokens.slice_rows(1, self.tokens.rows())
    }

    pub(crate) fn patch_mut(&mut self, i: usize) -> &mut [f32] {
        self.tokens.row_mut(i + 1)
    }

    /// Bilinearly resample the patch rows onto another grid; the class token is kept.
    pub fn resample(&self, grid_h: usize, grid_w: usize) -> Result<Self> {
        if (grid_h, grid_w) == self.grid() {
            return Ok(self.clone());
        }
        let grid = Grid3::from_tensor2(self.grid_h, self.grid_w, self.patches())?;
        let patches = bilinear_resize(&grid, grid_h, grid_w).into_tensor2();
        Self::from_parts(self.cls(), &patches, grid_h, grid_w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &Tensor2, eps: f32) -> Result<Tensor2> {
        layer_norm(x, &self.gamma, &self.beta, eps)
    }
}

/// Weights of one encoder block. Projections act on the right: `Q = X W_q + b_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub head_count: usize,
    pub ln_1: LayerNormParams,
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_out: Tensor2,
    pub b_q: Vec<f32>,
    pub b_k: Vec<f32>,
    pub b_v: Vec<f32>,
    pub b_out: Vec<f32>,
    pub ln_2: LayerNormParams,
    pub w_fc: Tensor2,
    pub b_fc: Vec<f32>,
    pub w_proj: Tensor2,
    pub b_proj: Vec<f32>,
}

impl BlockWeights {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.dim();
        let m = self.w_fc.cols();
        let bad = |what: &str, got: String| {
            Err(DoucError::shape(
                "BlockWeights",
                format!("{what}: {got} with embed dim {v}"),
            ))
        };
        if self.head_count == 0 || !v.is_multiple_of(self.head_count) {
            return bad("head_count", self.head_count.to_string());
        }
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
        ] {
            if w.shape() != (v, v) {
                return bad(name, format!("{:?}", w.shape()));
            }
        }
        for (name, b) in [
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("b_v", &self.b_v),
            ("b_out", &self.b_out),
            ("b_proj", &self.b_proj),
            ("ln_1.gamma", &self.ln_1.gamma),
            ("ln_1.beta", &self.ln_1.beta),
            ("ln_2.gamma", &self.ln_2.gamma),
            ("ln_2.beta", &self.ln_2.beta),
        ] {
            if b.len() != v {
                return bad(name, format!("length {}", b.len()));
            }
        }
        if self.w_fc.rows() != v || self.b_fc.len() != m || self.w_proj.shape() != (m, v) {
            return bad(
                "mlp",
                format!(
                    "w_fc {:?}, b_fc {}, w_proj {:?}",
                    self.w_fc.shape(),
                    self.b_fc.len(),
                    self.w_proj.shape()
                ),
            );
        }
        Ok(())
    }
}

/// Post-processing head: layer norm then linear projection into the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub ln_post: LayerNormParams,
    pub proj: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer {
    pub pos_embed: Tensor2,
    pub ln_pre: Option<LayerNormParams>,
    pub blocks: Vec<BlockWeights>,
    pub head: ProjectionHead,
    pub grid: (usize, usize),
    pub ln_eps: f32,
    pub activation: Activation,
}

impl VisionTransformer {
    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.pos_embed.cols()
    }

    pub fn proj_dim(&self) -> usize {
        self.head.proj.cols()
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let doc = &manifest.doc;
        let v = doc.embed_dim;
        let matrix = |role: &str| manifest.read_role(role)?.into_tensor2();
        let vector = |role: &str| manifest.read_role(role)?.into_vector();
        let bias = |role: &str| -> Result<Vec<f32>> {
            Ok(match manifest.read_optional_role(role)? {
                Some(t) => t.into_vector()?,
                None => vec![0.0; v],
            })
        };
        let ln = |prefix: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: vector(&format!("{prefix}.gamma"))?,
                beta: vector(&format!("{prefix}.beta"))?,
            })
        };
        let ln_pre = if manifest.doc.entries.contains_key("ln_pre.gamma") {
            Some(ln("ln_pre")?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(doc.layer_count);
        for i in 0..doc.layer_count {
            let p = format!("blocks.{i}");
            blocks.push(BlockWeights {
                head_count: doc.head_count,
                ln_1: ln(&format!("{p}.ln_1"))?,
                w_q: matrix(&format!("{p}.attn.w_q"))?,
                w_k: matrix(&format!("{p}.attn.w_k"))?,
                w_v: matrix(&format!("{p}.attn.w_v"))?,
                w_out: matrix(&format!("{p}.attn.w_out"))?,
                b_q: bias(&format!("{p}.attn.b_q"))?,
                b_k: bias(&format!("{p}.attn.b_k"))?,
                b_v: bias(&format!("{p}.attn.b_v"))?,
                b_out: bias(&format!("{p}.attn.b_out"))?,
                ln_2: ln(&format!("{p}.ln_2"))?,
                w_fc: matrix(&format!("{p}.mlp.w_fc"))?,
                b_fc: vector(&format!("{p}.mlp.b_fc"))?,
                w_proj: matrix(&format!("{p}.mlp.w_proj"))?,
                b_proj: vector(&format!("{p}.mlp.b_proj"))?,
            });
        }
        let model = Self {
            pos_embed: matrix("pos_embed")?,
            ln_pre,
            blocks,
            head: ProjectionHead {
                ln_post: ln("ln_post")?,
                proj: matrix("proj")?,
            },
            grid: doc.grid(),
            ln_eps: doc.ln_eps,
            activation: doc.activation,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.dim();
        if self.pos_embed.rows() != self.grid.0 * self.grid.1 + 1 {
            return Err(DoucError::shape(
                "VisionTransformer",
                format!("pos_embed has {} rows for grid {:?}", self.pos_embed.rows(), self.grid),
            ));
        }
        for b in &self.blocks {
            if b.dim() != v {
                return Err(DoucError::shape(
                    "VisionTransformer",
                    format!("block dim {} vs {v}", b.dim()),
                ));
            }
            b.validate()?;
        }
        if self.head.proj.rows() != v || self.head.ln_post.gamma.len() != v {
            return Err(DoucError::shape(
                "VisionTransformer",
                format!("projection {:?} for embed dim {v}", self.head.proj.shape()),
            ));
        }
        Ok(())
    }

    /// Adds the positional embedding (and the optional pre-norm) to raw patch
    /// embeddings, giving the first block's input.
    pub fn prepare_input(&self, raw_tokens: &Tensor2) -> Result<TokenSequence> {
        let mut x = raw_tokens.add(&self.pos_embed).map_err(|_| {
            DoucError::shape(
                "prepare_input",
                format!(
                    "image tokens {:?} vs positional embedding {:?}",
                    raw_tokens.shape(),
                    self.pos_embed.shape()
                ),
            )
        })?;
        if let Some(ln) = &self.ln_pre {
            x = ln.apply(&x, self.ln_eps)?;
        }
        TokenSequence::new(x, self.grid.0, self.grid.1)
    }

    pub fn forward(&self, x0: &TokenSequence, hooks: &[LayerHook], mode: LastBlockMode<'_>) -> Result<ForwardOutput> {
        forward(x0, self, hooks, mode)
    }
}

/// Token transform inserted after a block.
#[derive(Debug, Clone, PartialEq)]
pub enum HookTransform {
    Identity,
    /// Norm-based soft gating of patch tokens.
    Gate {
        alpha: f32,
        temperature: f32,
    },
}

/// Applies `transform` to the output tokens of block `layer_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerHook {
    pub layer_index: usize,
    pub transform: HookTransform,
}

#[derive(Debug, Clone)]
pub struct HookRecord {
    pub layer_index: usize,
    pub before: TokenSequence,
    pub after: TokenSequence,
    pub gate: Option<LayerGate>,
}

/// Result of a substituted final-block aggregation.
#[derive(Debug, Clone)]
pub struct ReplacedAggregation {
    /// Aggregated patch values on `grid`, one row per grid cell.
    pub patches: Tensor2,
    pub grid: (usize, usize),
    /// Row-stochastic weights that produced `patches`, if the aggregator has any.
    pub affinity: Option<Tensor2>,
}

/// Supplies the patch aggregation of the final block in place of `A V`.
pub trait ValueAggregator: Sync {
    /// `values` is the final block's full `(L+1) x v` value matrix; `grid` is
    /// the patch grid it lives on.
    fn aggregate(&self, values: &Tensor2, grid: (usize, usize)) -> Result<ReplacedAggregation>;
}

#[derive(Clone, Copy)]
pub enum LastBlockMode<'a> {
    Standard,
    CaptureValues,
    Replaced(&'a dyn ValueAggregator),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub tokens: TokenSequence,
    /// Final block value projections, `(L+1) x v`, in capture and replaced modes.
    pub values: Option<Tensor2>,
    pub hooks: Vec<HookRecord>,
    pub aggregation: Option<ReplacedAggregation>,
}

fn gelu(x: f32, act: Activation) -> f32 {
    let x = x as f64;
    let y = match act {
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        Activation::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
    };
    y as f32
}

fn linear(x: &Tensor2, w: &Tensor2, b: &[f32]) -> Result<Tensor2> {
    matmul(x, w)?.add_row_vector(b)
}

/// Per-head `softmax(Q_h K_h^T / sqrt(v / heads)) V_h` for the query rows in
/// `query_rows`, concatenated over heads.
fn aggregate_heads(q: &Tensor2, k: &Tensor2, v: &Tensor2, heads: usize, query_rows: std::ops::Range<usize>) -> Tensor2 {
    let dim = q.cols();
    let hd = dim / heads;
    let n = k.rows();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor2::zeros(query_rows.len(), dim);
    let mut scores = vec![0.0f32; n];
    for (oi, i) in query_rows.enumerate() {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qi = &q.row(i)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = tensor::dot(qi, &k.row(j)[cols.clone()]) as f32;
            }
            tensor::softmax_in_place(&mut scores, scale, None);
            let mut acc = vec![0.0f64; hd];
            for (j, &a) in scores.iter().enumerate() {
                for (slot, &x) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *slot += a as f64 * x as f64;
                }
            }
            for (o, s) in out.row_mut(oi)[cols].iter_mut().zip(acc) {
                *o = s as f32;
            }
        }
    }
    out
}

/// Per-head attention matrices `softmax(Q_h K_h^T / sqrt(v / heads))` of
/// an (already normalized) block input. Used for inspection and tests.
pub fn attention_weights(x: &Tensor2, w: &BlockWeights) -> Result<Vec<Tensor2>> {
    let q = linear(x, &w.w_q, &w.b_q)?;
    let k = linear(x, &w.w_k, &w.b_k)?;
    let hd = w.dim() / w.head_count;
    let mut out = Vec::with_capacity(w.head_count);
    for h in 0..w.head_count {
        let cols = h * hd..(h + 1) * hd;
        let mut a = Tensor2::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            for j in 0..k.rows() {
                a.set(
                    i,
                    j,
                    tensor::dot(&q.row(i)[cols.clone()], &k.row(j)[cols.clone()]) as f32,
                );
            }
        }
        out.push(tensor::row_softmax(&a, 1.0 / (hd as f32).sqrt()));
    }
    Ok(out)
}

/// Multi-head self-attention of `x` including the output projection.
/// No normalization or residual is applied here.
pub fn self_attention(x: &Tensor2, w: &BlockWeights) -> Result<Tensor2> {
    if x.cols() != w.dim() {
        return Err(DoucError::shape(
            "self_attention",
            format!("tokens {:?} for embed dim {}", x.shape(), w.dim()),
        ));
    }
    let q = linear(x, &w.w_q, &w.b_q)?;
    let k = linear(x, &w.w_k, &w.b_k)?;
    let v = linear(x, &w.w_v, &w.b_v)?;
    let agg = aggregate_heads(&q, &k, &v, w.head_count, 0..x.rows());
    linear(&agg, &w.w_out, &w.b_out)
}

fn mlp(x: &Tensor2, w: &BlockWeights, act: Activation) -> Result<Tensor2> {
    let hidden = linear(x, &w.w_fc, &w.b_fc)?.map(|h| gelu(h, act));
    linear(&hidden, &w.w_proj, &w.b_proj)
}

struct BlockOutput {
    tokens: TokenSequence,
    values: Option<Tensor2>,
    aggregation: Option<ReplacedAggregation>,
}

fn run_block(
    x: &TokenSequence,
    w: &BlockWeights,
    eps: f32,
    act: Activation,
    capture: bool,
    replace: Option<&dyn ValueAggregator>,
) -> Result<BlockOutput> {
    let h = w.ln_1.apply(x.tokens(), eps)?;
    let q = linear(&h, &w.w_q, &w.b_q)?;
    let k = linear(&h, &w.w_k, &w.b_k)?;
    let v = linear(&h, &w.w_v, &w.b_v)?;

    let (agg, residual, aggregation) = match replace {
        None => {
            let agg = aggregate_heads(&q, &k, &v, w.head_count, 0..h.rows());
            (agg, x.clone(), None)
        }
        Some(aggregator) => {
            let replaced = aggregator.aggregate(&v, x.grid())?;
            let (gh, gw) = replaced.grid;
            if replaced.patches.shape() != (gh * gw, w.dim()) {
                return Err(DoucError::shape(
                    "replaced aggregation",
                    format!("{:?} patches on a {gh}x{gw} grid", replaced.patches.shape()),
                ));
            }
            // the class token keeps its ordinary attention path
            let cls = aggregate_heads(&q, &k, &v, w.head_count, 0..1);
            let agg = cls.vstack(&replaced.patches)?;
            let residual = x.resample(gh, gw)?;
            (agg, residual, Some(replaced))
        }
    };
    let attn = linear(&agg, &w.w_out, &w.b_out)?;
    let mid = residual.tokens().add(&attn)?;
    let out = mid.add(&mlp(&w.ln_2.apply(&mid, eps)?, w, act)?)?;
    let (gh, gw) = residual.grid();
    Ok(BlockOutput {
        tokens: TokenSequence::new(out, gh, gw)?,
        values: (capture || replace.is_some()).then_some(v),
        aggregation,
    })
}

/// Runs every block over `x0`, applying hooks after their block.
pub fn forward(
    x0: &TokenSequence,
    model: &VisionTransformer,
    hooks: &[LayerHook],
    mode: LastBlockMode<'_>,
) -> Result<ForwardOutput> {
    let layers = model.layer_count();
    if let Some(h) = hooks.iter().find(|h| h.layer_index >= layers) {
        return Err(DoucError::config(
            "hooks",
            format!("hook on layer {} but the model has {layers} layers", h.layer_index),
        ));
    }
    if x0.dim() != model.dim() {
        return Err(DoucError::shape(
            "forward",
            format!("token dim {} vs model dim {}", x0.dim(), model.dim()),
        ));
    }
    let mut x = x0.clone();
    let mut records = Vec::new();
    let mut values = None;
    let mut aggregation = None;
    for (i, block) in model.blocks.iter().enumerate() {
        let last = i + 1 == layers;
        let (capture, replace) = match (last, mode) {
            (true, LastBlockMode::CaptureValues) => (true, None),
            (true, LastBlockMode::Replaced(agg)) => (true, Some(agg)),
            _ => (false, None),
        };
        let out = run_block(&x, block, model.ln_eps, model.activation, capture, replace)?;
        x = out.tokens;
        if capture {
            values = out.values;
            aggregation = out.aggregation;
        }
        for hook in hooks.iter().filter(|h| h.layer_index == i) {
            let before = x.clone();
            let gate = match hook.transform {
                HookTransform::Identity => None,
                HookTransform::Gate { alpha, temperature } => {
                    let (gated, report) = og::gate_tokens(&x, alpha, temperature)?;
                    x = gated;
                    Some(report)
                }
            };
            records.push(HookRecord {
                layer_index: i,
                before,
                after: x.clone(),
                gate,
            });
        }
    }
    Ok(ForwardOutput {
        tokens: x,
        values,
        hooks: records,
        aggregation,
    })
}

/// Post-norm and projection of every token into the joint space, `(L+1) x d`.
/// Rows are not normalized.
pub fn project_to_joint_space(tokens: &TokenSequence, head: &ProjectionHead, eps: f32) -> Result<Tensor2> {
    if head.proj.rows() != tokens.dim() {
        return Err(DoucError::shape(
            "project_to_joint_space",
            format!("tokens of dim {} vs projection {:?}", tokens.dim(), head.proj.shape()),
        ));
    }
    let normed = head.ln_post.apply(tokens.tokens(), eps)?;
    matmul(&normed, &head.proj)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, scale: f32, rng: &mut impl Rng) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn rand_vec(n: usize, scale: f32, rng: &mut impl Rng) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    fn rand_block(v: usize, heads: usize, m: usize, rng: &mut impl Rng) -> BlockWeights {
        BlockWeights {
            head_count: heads,
            ln_1: LayerNormParams {
                gamma: (0..v).map(|_| rng.gen_range(0.5..1.5)).collect(),
                beta: rand_vec(v, 0.1, rng),
            },
            w_q: rand_mat(v, v, 0.5, rng),
            w_k: rand_mat(v, v, 0.5, rng),
            w_v: rand_mat(v, v, 0.5, rng),
            w_out: rand_mat(v, v, 0.5, rng),
            b_q: rand_vec(v, 0.1, rng),
            b_k: rand_vec(v, 0.1, rng),
            b_v: rand_vec(v, 0.1, rng),
            b_out: rand_vec(v, 0.1, rng),
            ln_2: LayerNormParams::identity(v),
            w_fc: rand_mat(v, m, 0.5, rng),
            b_fc: rand_vec(m, 0.1, rng),
            w_proj: rand_mat(m, v, 0.5, rng),
            b_proj: rand_vec(v, 0.1, rng),
        }
    }

    fn toy_model(layers: usize, rng: &mut impl Rng) -> VisionTransformer {
        let v = 8;
        VisionTransformer {
            pos_embed: rand_mat(5, v, 0.1, rng),
            ln_pre: None,
            blocks: (0..layers).map(|_| rand_block(v, 2, 16, rng)).collect(),
            head: ProjectionHead {
                ln_post: LayerNormParams::identity(v),
                proj: rand_mat(v, 4, 0.5, rng),
            },
            grid: (2, 2),
            ln_eps: 1e-5,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_block(8, 2, 16, &mut rng);
        let x = rand_mat(1, 8, 1.0, &mut rng);
        let out = self_attention(&x, &w).unwrap();
        let v = linear(&x, &w.w_v, &w.b_v).unwrap();
        let expected = linear(&v, &w.w_out, &w.b_out).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-6);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_block(8, 2, 16, &mut rng);
        let row = rand_vec(8, 1.0, &mut rng);
        let x = Tensor2::from_rows(&vec![row; 5]).unwrap();
        let out = self_attention(&x, &w).unwrap();
        for r in 1..5 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn mhsa_matches_scalar_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_block(8, 2, 16, &mut rng);
        let x = rand_mat(5, 8, 1.0, &mut rng);
        let got = self_attention(&x, &w).unwrap();

        let proj = |m: &Tensor2, b: &[f32], i: usize, c: usize| -> f64 {
            let mut s = b[c] as f64;
            for p in 0..8 {
                s += x.get(i, p) as f64 * m.get(p, c) as f64;
            }
            s
        };
        let mut concat = vec![vec![0.0f64; 8]; 5];
        for h in 0..2 {
            for i in 0..5 {
                let mut logits = [0.0f64; 5];
                for (j, l) in logits.iter_mut().enumerate() {
                    for c in h * 4..h * 4 + 4 {
                        *l += proj(&w.w_q, &w.b_q, i, c) * proj(&w.w_k, &w.b_k, j, c);
                    }
                    *l /= 2.0; // sqrt(head dim 4)
                }
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    let a = (l - mx).exp() / z;
                    for c in h * 4..h * 4 + 4 {
                        concat[i][c] += a * proj(&w.w_v, &w.b_v, j, c);
                    }
                }
            }
        }
        for i in 0..5 {
            for c in 0..8 {
                let mut e = w.b_out[c] as f64;
                for p in 0..8 {
                    e += concat[i][p] * w.w_out.get(p, c) as f64;
                }
                assert!((got.get(i, c) as f64 - e).abs() < 1e-5, "({i},{c})");
            }
        }
    }

    #[test]
    fn head_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_block(8, 2, 16, &mut rng);
        let x = rand_mat(5, 8, 2.0, &mut rng);
        for a in attention_weights(&x, &w).unwrap() {
            for row in a.row_iter() {
                let s: f64 = row.iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn one_block_forward_is_direct_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = toy_model(1, &mut rng);
        let raw = rand_mat(5, 8, 1.0, &mut rng);
        let x0 = model.prepare_input(&raw).unwrap();
        let out = model.forward(&x0, &[], LastBlockMode::Standard).unwrap();

        let b = &model.blocks[0];
        let x = x0.tokens();
        let mid = x
            .add(&self_attention(&b.ln_1.apply(x, 1e-5).unwrap(), b).unwrap())
            .unwrap();
        let expected = mid
            .add(&mlp(&b.ln_2.apply(&mid, 1e-5).unwrap(), b, Activation::Gelu).unwrap())
            .unwrap();
        assert!(out.tokens.tokens().max_abs_diff(&expected).unwrap() < 1e-6);
        assert!(out.values.is_none());
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = toy_model(2, &mut rng);
        for b in &mut model.blocks {
            b.w_out = Tensor2::zeros(8, 8);
            b.b_out = vec![0.0; 8];
            b.w_proj = Tensor2::zeros(16, 8);
            b.b_proj = vec![0.0; 8];
        }
        let x0 = TokenSequence::new(rand_mat(5, 8, 1.0, &mut rng), 2, 2).unwrap();
        let out = model.forward(&x0, &[], LastBlockMode::Standard).unwrap();
        assert_eq!(out.tokens, x0);
    }

    #[test]
    fn forward_is_bit_stable_and_identity_hooks_are_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = toy_model(3, &mut rng);
        let x0 = model.prepare_input(&rand_mat(5, 8, 1.0, &mut rng)).unwrap();
        let a = model.forward(&x0, &[], LastBlockMode::Standard).unwrap();
        let b = model.forward(&x0, &[], LastBlockMode::Standard).unwrap();
        assert_eq!(a.tokens, b.tokens);

        let hooks: Vec<_> = (0..3)
            .map(|i| LayerHook {
                layer_index: i,
                transform: HookTransform::Identity,
            })
            .collect();
        let c = model.forward(&x0, &hooks, LastBlockMode::Standard).unwrap();
        assert!(c.tokens.tokens().max_abs_diff(a.tokens.tokens()).unwrap() <= 1e-6);
        assert_eq!(c.hooks.len(), 3);
    }

    #[test]
    fn captured_values_are_last_block_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = toy_model(2, &mut rng);
        let x0 = model.prepare_input(&rand_mat(5, 8, 1.0, &mut rng)).unwrap();
        let out = model.forward(&x0, &[], LastBlockMode::CaptureValues).unwrap();
        let std = model.forward(&x0, &[], LastBlockMode::Standard).unwrap();
        assert_eq!(out.tokens, std.tokens);

        let one = VisionTransformer {
            blocks: model.blocks[..1].to_vec(),
            ..model.clone()
        };
        let x_last = one.forward(&x0, &[], LastBlockMode::Standard).unwrap().tokens;
        let last = &model.blocks[1];
        let direct = linear(&last.ln_1.apply(x_last.tokens(), 1e-5).unwrap(), &last.w_v, &last.b_v).unwrap();
        let v = out.values.unwrap();
        assert_eq!(v.shape(), (5, 8));
        assert!(v.max_abs_diff(&direct).unwrap() < 1e-6);
    }

    #[test]
    fn out_of_range_hook_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = toy_model(2, &mut rng);
        let x0 = model.prepare_input(&rand_mat(5, 8, 1.0, &mut rng)).unwrap();
        let hook = LayerHook {
            layer_index: 2,
            transform: HookTransform::Identity,
        };
        assert!(model.forward(&x0, &[hook], LastBlockMode::Standard).is_err());
    }

    #[test]
    fn projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = TokenSequence::new(rand_mat(5, 4, 1.0, &mut rng), 2, 2).unwrap();
        // identity head: layer norm with gamma=1/beta=0 standardizes rows, so
        // compare against the standardized tokens
        let head = ProjectionHead {
            ln_post: LayerNormParams::identity(4),
            proj: Tensor2::identity(4),
        };
        let got = project_to_joint_space(&x, &head, 1e-5).unwrap();
        let normed = layer_norm(x.tokens(), &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert_eq!(got, normed);

        let col = Tensor2::from_vec(4, 1, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let head = ProjectionHead {
            ln_post: LayerNormParams::identity(4),
            proj: col.clone(),
        };
        let got = project_to_joint_space(&x, &head, 1e-5).unwrap();
        for i in 0..5 {
            let d = tensor::dot(normed.row(i), col.data());
            assert!((got.get(i, 0) as f64 - d).abs() < 1e-6);
        }
    }
}
