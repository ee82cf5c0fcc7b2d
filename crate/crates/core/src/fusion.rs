//! Logit-level fusion of the two branches, the global class-token prior,
//! query-to-class collapse, prediction and instance post-correction.

use serde::{Deserialize, Serialize};

use crate::error::{DoucError, Result};
use crate::fade::InstanceMaskSet;
use crate::io::Manifest;
use crate::tensor::{self, bilinear_resize, Grid3, Tensor2};

/// Unit-norm text embeddings, one row per query, plus the query-to-class map.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    embeddings: Tensor2,
    query_to_class: Vec<usize>,
    class_names: Vec<String>,
}

impl TextBank {
    pub fn new(embeddings: Tensor2, query_to_class: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if query_to_class.len() != embeddings.rows() {
            return Err(DoucError::shape(
                "TextBank",
                format!(
                    "{} query classes for {} embeddings",
                    query_to_class.len(),
                    embeddings.rows()
                ),
            ));
        }
        for (q, row) in embeddings.row_iter().enumerate() {
            let n = tensor::l2_norm(row);
            if (n - 1.0).abs() > 1e-5 {
                return Err(DoucError::shape(
                    "TextBank",
                    format!("query {q} has norm {n}, expected 1"),
                ));
            }
        }
        let c = class_names.len();
        if let Some(bad) = query_to_class.iter().find(|&&k| k >= c) {
            return Err(DoucError::shape(
                "TextBank",
                format!("class {bad} out of range for {c} classes"),
            ));
        }
        if let Some(k) = (0..c).find(|k| !query_to_class.contains(k)) {
            return Err(DoucError::shape("TextBank", format!("class {k} has no query")));
        }
        Ok(Self {
            embeddings,
            query_to_class,
            class_names,
        })
    }

    /// One query per class, in class order.
    pub fn with_identity_map(embeddings: Tensor2, class_names: Vec<String>) -> Result<Self> {
        let q = embeddings.rows();
        Self::new(embeddings, (0..q).collect(), class_names)
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let emb = manifest.read_role("text_bank")?.into_tensor2()?;
        let doc = &manifest.doc;
        let map = if doc.query_to_class.is_empty() {
            (0..emb.rows()).collect()
        } else {
            doc.query_to_class.clone()
        };
        Self::new(emb, map, doc.class_names.clone()).map_err(|e| DoucError::role("text_bank", e.to_string()))
    }

    pub fn embeddings(&self) -> &Tensor2 {
        &self.embeddings
    }

    pub fn query_to_class(&self) -> &[usize] {
        &self.query_to_class
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn queries(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collapse {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    #[serde(default = "half")]
    pub alpha_og: f32,
    #[serde(default = "half")]
    pub alpha_fade: f32,
    #[serde(default)]
    pub lambda_cls: f32,
    #[serde(default)]
    pub collapse: Collapse,
    #[serde(default)]
    pub post_correct: bool,
}

fn half() -> f32 {
    0.5
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha_og: 0.5,
            alpha_fade: 0.5,
            lambda_cls: 0.0,
            collapse: Collapse::Max,
            post_correct: false,
        }
    }
}

impl FusionConfig {
    /// 75% OG, 25% FADE.
    pub fn og_to_fade() -> Self {
        Self {
            alpha_og: 0.75,
            alpha_fade: 0.25,
            ..Self::default()
        }
    }

    /// 75% FADE, 25% OG.
    pub fn fade_to_og() -> Self {
        Self {
            alpha_og: 0.25,
            alpha_fade: 0.75,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("fusion.alpha_og", self.alpha_og),
            ("fusion.alpha_fade", self.alpha_fade),
            ("fusion.lambda_cls", self.lambda_cls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DoucError::config(field, format!("{v} must be finite and >= 0")));
            }
        }
        if self.alpha_og == 0.0 && self.alpha_fade == 0.0 {
            return Err(DoucError::config(
                "fusion.alpha_og",
                "alpha_og and alpha_fade are both zero",
            ));
        }
        Ok(())
    }
}

/// Dense logits, query-major: `values[q * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    queries: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl LogitMap {
    pub fn new(queries: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != queries * height * width {
            return Err(DoucError::shape(
                "LogitMap::new",
                format!("{} values for {queries}x{height}x{width}", values.len()),
            ));
        }
        Ok(Self {
            queries,
            height,
            width,
            values,
        })
    }

    /// From a `(h*w) x Q` matrix of per-patch logits.
    pub fn from_patch_major(y: &Tensor2, height: usize, width: usize) -> Result<Self> {
        if y.rows() != height * width {
            return Err(DoucError::shape(
                "LogitMap::from_patch_major",
                format!("{} rows for a {height}x{width} grid", y.rows()),
            ));
        }
        Ok(Self {
            queries: y.cols(),
            height,
            width,
            values: y.transpose().into_vec(),
        })
    }

    pub fn from_grid(g: &Grid3) -> Self {
        let (h, w, q) = g.shape();
        let values = Tensor2::from_vec(h * w, q, g.data().to_vec())
            .expect("grid shape")
            .transpose()
            .into_vec();
        Self {
            queries: q,
            height: h,
            width: w,
            values,
        }
    }

    /// Channel-last view, `h x w x Q`.
    pub fn to_grid(&self) -> Grid3 {
        let t = Tensor2::from_vec(self.queries, self.height * self.width, self.values.clone())
            .expect("logit shape")
            .transpose();
        Grid3::from_tensor2(self.height, self.width, t).expect("logit shape")
    }

    pub fn resize(&self, height: usize, width: usize) -> LogitMap {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Self::from_grid(&bilinear_resize(&self.to_grid(), height, width))
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, q: usize, y: usize, x: usize) -> f32 {
        self.values[(q * self.height + y) * self.width + x]
    }

    /// Spatial plane of query `q`.
    pub fn plane(&self, q: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.values[q * hw..(q + 1) * hw]
    }

    /// Logit vector at one position.
    pub fn at(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.queries).map(|q| self.get(q, y, x)).collect()
    }

    pub fn scale(&self, a: f32) -> LogitMap {
        LogitMap {
            values: self.values.iter().map(|v| v * a).collect(),
            ..*self
        }
    }
}

/// Class index per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(DoucError::shape(
                "LabelMap::new",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        Ok(Self { height, width, labels })
    }

    /// From a rank-2 tensor of non-negative integral values.
    pub fn from_tensor(t: &Tensor2) -> Result<Self> {
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f32 {
                    Ok(v as usize)
                } else {
                    Err(DoucError::shape(
                        "LabelMap::from_tensor",
                        format!("{v} is not a class index"),
                    ))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(t.rows(), t.cols(), labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }
}

/// Resizes both maps to the larger grid and returns `alpha_fade * fade + alpha_og * og`.
pub fn align_and_fuse(l_og: &LogitMap, l_fade: &LogitMap, config: &FusionConfig) -> Result<LogitMap> {
    if l_og.queries != l_fade.queries {
        return Err(DoucError::shape(
            "align_and_fuse",
            format!("{} OG queries vs {} FADE queries", l_og.queries, l_fade.queries),
        ));
    }
    let h = l_og.height.max(l_fade.height);
    let w = l_og.width.max(l_fade.width);
    let og = l_og.resize(h, w);
    let fade = l_fade.resize(h, w);
    let (a_og, a_fade) = (config.alpha_og as f64, config.alpha_fade as f64);
    let values = og
        .values
        .iter()
        .zip(&fade.values)
        .map(|(&o, &f)| (a_fade * f as f64 + a_og * o as f64) as f32)
        .collect();
    LogitMap::new(og.queries, h, w, values)
}

/// Cosine of the projected class token against every query.
pub fn cls_prior_logits(cls_projected: &[f32], text: &TextBank) -> Result<Vec<f32>> {
    if cls_projected.len() != text.dim() {
        return Err(DoucError::shape(
            "cls_prior_logits",
            format!(
                "class embedding of dim {} vs text dim {}",
                cls_projected.len(),
                text.dim()
            ),
        ));
    }
    let norm = tensor::l2_norm(cls_projected);
    if norm == 0.0 || !norm.is_finite() {
        return Err(DoucError::Degenerate {
            op: "cls_prior_logits",
            detail: "class-token embedding has zero norm".into(),
        });
    }
    Ok(text
        .embeddings()
        .row_iter()
        .map(|t| (tensor::dot(cls_projected, t) / norm).clamp(-1.0, 1.0) as f32)
        .collect())
}

/// Adds `lambda * l_cls[q]` to every position of query `q`.
pub fn add_cls_prior(l: &LogitMap, l_cls: &[f32], lambda_cls: f32) -> Result<LogitMap> {
    if l_cls.len() != l.queries {
        return Err(DoucError::shape(
            "add_cls_prior",
            format!("{} prior logits for {} queries", l_cls.len(), l.queries),
        ));
    }
    if lambda_cls == 0.0 {
        return Ok(l.clone());
    }
    let hw = l.height * l.width;
    let mut out = l.clone();
    for (q, &c) in l_cls.iter().enumerate() {
        let offset = lambda_cls * c;
        for v in &mut out.values[q * hw..(q + 1) * hw] {
            *v += offset;
        }
    }
    Ok(out)
}

/// Per-pixel max (or mean) over the queries of each class.
pub fn collapse_queries(l: &LogitMap, query_to_class: &[usize], classes: usize, mode: Collapse) -> Result<LogitMap> {
    if query_to_class.len() != l.queries {
        return Err(DoucError::shape(
            "collapse_queries",
            format!("map of {} entries for {} queries", query_to_class.len(), l.queries),
        ));
    }
    if let Some(&bad) = query_to_class.iter().find(|&&k| k >= classes) {
        return Err(DoucError::shape(
            "collapse_queries",
            format!("class {bad} out of range"),
        ));
    }
    let hw = l.height * l.width;
    let (mut acc, mut count) = match mode {
        Collapse::Max => (vec![f64::NEG_INFINITY; classes * hw], vec![0usize; classes]),
        Collapse::Mean => (vec![0.0f64; classes * hw], vec![0usize; classes]),
    };
    for (q, &k) in query_to_class.iter().enumerate() {
        count[k] += 1;
        let dst = &mut acc[k * hw..(k + 1) * hw];
        for (d, &v) in dst.iter_mut().zip(l.plane(q)) {
            match mode {
                Collapse::Max => *d = d.max(v as f64),
                Collapse::Mean => *d += v as f64,
            }
        }
    }
    let values = acc
        .chunks(hw.max(1))
        .zip(&count)
        .flat_map(|(plane, &n)| {
            plane.iter().map(move |&v| match mode {
                Collapse::Max => v as f32,
                Collapse::Mean => (v / n as f64) as f32,
            })
        })
        .take(classes * hw)
        .collect();
    LogitMap::new(classes, l.height, l.width, values)
}

/// Per-pixel softmax over classes then argmax; ties go to the lowest index.
pub fn label_map(l: &LogitMap) -> LabelMap {
    let mut labels = Vec::with_capacity(l.height * l.width);
    let mut probs = vec![0.0f64; l.queries];
    for y in 0..l.height {
        for x in 0..l.width {
            let max = (0..l.queries)
                .map(|c| l.get(c, y, x) as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (l.get(c, y, x) as f64 - max).exp();
                sum += *p;
            }
            let mut best = 0;
            for c in 1..l.queries {
                if probs[c] / sum > probs[best] / sum {
                    best = c;
                }
            }
            labels.push(best);
        }
    }
    LabelMap {
        height: l.height,
        width: l.width,
        labels,
    }
}

/// Bilinear upsample to `target_h x target_w`, then [`label_map`].
pub fn predict(l_class: &LogitMap, target_h: usize, target_w: usize) -> LabelMap {
    label_map(&l_class.resize(target_h, target_w))
}

/// Replaces every pixel's logit vector inside an instance by the instance mean.
pub fn instance_post_correct(l_class: &LogitMap, pixel_masks: &InstanceMaskSet) -> Result<LogitMap> {
    if pixel_masks.grid() != (l_class.height, l_class.width) {
        return Err(DoucError::shape(
            "instance_post_correct",
            format!(
                "masks on {:?} vs logits {}x{}",
                pixel_masks.grid(),
                l_class.height,
                l_class.width
            ),
        ));
    }
    let hw = l_class.height * l_class.width;
    let k = pixel_masks.len();
    let c = l_class.queries;
    let mut sums = vec![0.0f64; k * c];
    let mut counts = vec![0usize; k];
    for (p, owner) in pixel_masks.assignment().iter().enumerate() {
        if let Some(m) = *owner {
            counts[m] += 1;
            for q in 0..c {
                sums[m * c + q] += l_class.values[q * hw + p] as f64;
            }
        }
    }
    let mut out = l_class.clone();
    for (p, owner) in pixel_masks.assignment().iter().enumerate() {
        if let Some(m) = *owner {
            for q in 0..c {
                out.values[q * hw + p] = (sums[m * c + q] / counts[m] as f64) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(q: usize, h: usize, w: usize, rng: &mut impl Rng) -> LogitMap {
        LogitMap::new(q, h, w, (0..q * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn text_bank_validation() {
        let e = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        assert!(TextBank::new(e.clone(), vec![0, 1, 1], names(2)).is_ok());
        assert!(TextBank::new(e.clone(), vec![0, 0, 0], names(2)).is_err());
        assert!(TextBank::new(e.clone(), vec![0, 1], names(2)).is_err());
        let bad = Tensor2::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(TextBank::with_identity_map(bad, names(1)).is_err());
    }

    #[test]
    fn layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = random_map(3, 2, 4, &mut rng);
        assert_eq!(LogitMap::from_grid(&l.to_grid()), l);
        assert_eq!(l.to_grid().get(1, 3, 2), l.get(2, 1, 3));
    }

    #[test]
    fn fusion_degenerate_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let og = random_map(3, 4, 4, &mut rng);
        let fade = random_map(3, 4, 4, &mut rng);
        let only_og = FusionConfig {
            alpha_og: 1.0,
            alpha_fade: 0.0,
            ..Default::default()
        };
        assert_eq!(align_and_fuse(&og, &fade, &only_og).unwrap(), og);

        let half = FusionConfig::default();
        assert_eq!(align_and_fuse(&og, &og, &half).unwrap(), og);

        let avg = align_and_fuse(&og, &fade, &half).unwrap();
        for i in 0..og.values().len() {
            let e = 0.5 * og.values()[i] as f64 + 0.5 * fade.values()[i] as f64;
            assert!((avg.values()[i] as f64 - e).abs() < 1e-7);
        }

        let coarse = random_map(3, 2, 2, &mut rng);
        let fused = align_and_fuse(&coarse, &fade, &only_og).unwrap();
        assert_eq!(fused, coarse.resize(4, 4));
        assert!(align_and_fuse(&random_map(2, 4, 4, &mut rng), &fade, &half).is_err());
    }

    #[test]
    fn cls_prior_cases() {
        let e = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let text = TextBank::with_identity_map(e, names(2)).unwrap();
        assert_eq!(cls_prior_logits(&[2.0, 0.0, 0.0], &text).unwrap(), vec![1.0, 0.0]);
        assert_eq!(cls_prior_logits(&[0.0, 0.0, 5.0], &text).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            cls_prior_logits(&[0.0; 3], &text),
            Err(DoucError::Degenerate { .. })
        ));
    }

    #[test]
    fn cls_prior_add_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_map(3, 2, 3, &mut rng);
        assert_eq!(add_cls_prior(&l, &[0.3, -0.2, 0.9], 0.0).unwrap(), l);

        let shifted = add_cls_prior(&l, &[0.5; 3], 2.0).unwrap();
        assert_eq!(label_map(&shifted), label_map(&l));

        let p = [0.25, -0.5, 0.125];
        let out = add_cls_prior(&l, &p, 0.75).unwrap();
        for q in 0..3 {
            for y in 0..2 {
                for x in 0..3 {
                    let e = l.get(q, y, x) + 0.75 * p[q];
                    assert_eq!(out.get(q, y, x), e);
                }
            }
        }
        assert!(add_cls_prior(&l, &p[..2], 1.0).is_err());
    }

    #[test]
    fn collapse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_map(3, 2, 2, &mut rng);
        assert_eq!(collapse_queries(&l, &[0, 1, 2], 3, Collapse::Max).unwrap(), l);

        let two = LogitMap::new(2, 1, 1, vec![0.2, 0.7]).unwrap();
        let c = collapse_queries(&two, &[0, 0], 1, Collapse::Max).unwrap();
        assert_eq!(c.values(), &[0.7]);
        let m = collapse_queries(&two, &[0, 0], 1, Collapse::Mean).unwrap();
        assert!((m.values()[0] - 0.45).abs() < 1e-7);

        let l6 = random_map(6, 3, 2, &mut rng);
        let pi = [2, 0, 1, 0, 2, 2];
        let c = collapse_queries(&l6, &pi, 3, Collapse::Max).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                for k in 0..3 {
                    let mut best = f32::NEG_INFINITY;
                    for q in 0..6 {
                        if pi[q] == k && l6.get(q, y, x) > best {
                            best = l6.get(q, y, x);
                        }
                    }
                    assert_eq!(c.get(k, y, x), best);
                }
            }
        }
    }

    #[test]
    fn predict_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let single = random_map(1, 2, 2, &mut rng);
        assert!(predict(&single, 5, 3).labels().iter().all(|&c| c == 0));

        // 2 classes on a 2x2 grid, one exact tie
        let l = LogitMap::new(2, 2, 2, vec![0.1, 0.9, 0.5, -0.3, 0.2, 0.4, 0.5, -0.1]).unwrap();
        let p = predict(&l, 2, 2);
        let mut expected = vec![];
        for i in 0..4 {
            expected.push(if l.values()[4 + i] > l.values()[i] { 1 } else { 0 });
        }
        assert_eq!(p.labels(), expected.as_slice());
        assert_eq!(p.get(1, 0), 0);

        let up = predict(&l, 6, 4);
        assert_eq!((up.height(), up.width()), (6, 4));
    }

    #[test]
    fn post_correct_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random_map(2, 3, 3, &mut rng);
        let one = InstanceMaskSet::from_assignment(3, 3, {
            let mut a = vec![None; 9];
            a[4] = Some(0);
            a
        })
        .unwrap();
        assert_eq!(instance_post_correct(&l, &one).unwrap(), l);

        let flat = LogitMap::new(2, 3, 3, [vec![0.3; 9], vec![-0.1; 9]].concat()).unwrap();
        let all = InstanceMaskSet::from_assignment(3, 3, vec![Some(0); 9]).unwrap();
        assert_eq!(instance_post_correct(&flat, &all).unwrap(), flat);

        // top-left 2x2 block
        let block: Vec<Option<usize>> = (0..9).map(|p| (p % 3 < 2 && p / 3 < 2).then_some(0)).collect();
        let masks = InstanceMaskSet::from_assignment(3, 3, block).unwrap();
        let out = instance_post_correct(&l, &masks).unwrap();
        for q in 0..2 {
            let mean =
                (l.get(q, 0, 0) as f64 + l.get(q, 0, 1) as f64 + l.get(q, 1, 0) as f64 + l.get(q, 1, 1) as f64) / 4.0;
            for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                assert!((out.get(q, y, x) as f64 - mean).abs() < 1e-7);
            }
            assert_eq!(out.get(q, 2, 2), l.get(q, 2, 2));
        }
        assert!(instance_post_correct(&random_map(2, 2, 2, &mut rng), &masks).is_err());
    }

    proptest! {
        #[test]
        fn fusion_is_linear(seed in any::<u64>(), a in 0.1f32..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_map(2, 3, 3, &mut rng);
            let y = random_map(2, 2, 2, &mut rng);
            let cfg = FusionConfig { alpha_og: 0.3, alpha_fade: 0.7, ..Default::default() };
            let scaled = align_and_fuse(&x.scale(a), &y.scale(a), &cfg).unwrap();
            let base = align_and_fuse(&x, &y, &cfg).unwrap().scale(a);
            for (s, b) in scaled.values().iter().zip(base.values()) {
                prop_assert!((s - b).abs() < 1e-6 * a.max(1.0));
            }
        }

        #[test]
        fn prior_shifts_planes_uniformly(seed in any::<u64>(), lambda in 0.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_map(3, 3, 4, &mut rng);
            let p: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = add_cls_prior(&l, &p, lambda).unwrap();
            for q in 0..3 {
                let d0 = out.plane(q)[0] - l.plane(q)[0];
                for (o, i) in out.plane(q).iter().zip(l.plane(q)) {
                    prop_assert!(((o - i) - d0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn labels_invariant_under_increasing_affine(seed in any::<u64>(), a in 0.1f32..5.0, b in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // dyadic values keep a*x + b exact enough to preserve strict order
            let values: Vec<f32> = (0..4 * 9).map(|_| rng.gen_range(-64i32..64) as f32 / 8.0).collect();
            let l = LogitMap::new(4, 3, 3, values).unwrap();
            let t = LogitMap::new(4, 3, 3, l.values().iter().map(|&v| (a as f64 * v as f64 + b as f64) as f32).collect()).unwrap();
            prop_assert_eq!(label_map(&l), label_map(&t));
        }

        #[test]
        fn collapse_within_query_range(seed in any::<u64>(), mean in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_map(5, 2, 3, &mut rng);
            let pi = [0, 1, 1, 0, 1];
            let mode = if mean { Collapse::Mean } else { Collapse::Max };
            let c = collapse_queries(&l, &pi, 2, mode).unwrap();
            for y in 0..2 {
                for x in 0..3 {
                    let v = l.at(y, x);
                    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
                    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    for k in 0..2 {
                        prop_assert!(c.get(k, y, x) >= lo - 1e-6 && c.get(k, y, x) <= hi + 1e-6);
                    }
                }
            }
        }

        #[test]
        fn post_correct_makes_regions_constant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_map(3, 4, 4, &mut rng);
            let owner: Vec<Option<usize>> = (0..16).map(|_| {
                let k = rng.gen_range(0..4usize);
                (k < 3).then_some(k)
            }).collect();
            let masks = InstanceMaskSet::from_assignment(4, 4, owner.clone()).unwrap();
            let labels = label_map(&instance_post_correct(&l, &masks).unwrap());
            for k in 0..3 {
                let region: Vec<usize> = (0..16).filter(|&p| owner[p] == Some(k)).map(|p| labels.labels()[p]).collect();
                prop_assert!(region.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }
}
