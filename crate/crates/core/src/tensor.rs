//! Dense f32 numerics shared by every stage of the pipeline.
//!
//! Storage is single precision, row-major. Reductions (matrix products,
//! norms, softmax denominators, layer-norm moments) accumulate in f64.

use rayon::prelude::*;

use crate::error::{DoucError, Result};

/// Work size (multiply-adds) above which `matmul` splits rows across threads.
const PARALLEL_MATMUL_WORK: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DoucError::shape(
                "Tensor2::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DoucError::shape(
                    "Tensor2::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and zero-width tensors still have rows
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2 {
        Tensor2 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stack `self` on top of `other`.
    pub fn vstack(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(DoucError::shape(
                "vstack",
                format!("{:?} over {:?}", self.shape(), other.shape()),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor2 {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(DoucError::shape(
                "add",
                format!("{:?} + {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor2 { data, ..*self })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f32]) -> Result<Tensor2> {
        if bias.len() != self.cols {
            return Err(DoucError::shape(
                "add_row_vector",
                format!("bias of length {} for {} columns", bias.len(), self.cols),
            ));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor2 {
        Tensor2 {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> Option<f32> {
        (self.shape() == other.shape()).then(|| max_abs_diff(&self.data, &other.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Height x width x channels, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid3 {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(DoucError::shape(
                "Grid3::from_vec",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Reinterpret an (h*w) x c matrix as an h x w x c grid.
    pub fn from_tensor2(height: usize, width: usize, t: Tensor2) -> Result<Self> {
        if t.rows() != height * width {
            return Err(DoucError::shape(
                "Grid3::from_tensor2",
                format!("{} rows cannot fill a {height}x{width} grid", t.rows()),
            ));
        }
        let channels = t.cols();
        Ok(Self {
            height,
            width,
            channels,
            data: t.into_vec(),
        })
    }

    /// Flatten to (h*w) x c, row-major over the grid.
    pub fn to_tensor2(&self) -> Tensor2 {
        Tensor2 {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data.clone(),
        }
    }

    pub fn into_tensor2(self) -> Tensor2 {
        Tensor2 {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Matrix product `a * b`.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(DoucError::shape(
            "matmul",
            format!("lhs {}x{} vs rhs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; n * m];
    if m == 0 {
        return Tensor2::from_vec(n, m, out);
    }
    let kernel = |(i, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; m];
        for (p, &lhs) in a.row(i).iter().enumerate() {
            // masked affinities are mostly exact zeros
            if lhs == 0.0 {
                continue;
            }
            let lhs = lhs as f64;
            for (slot, &rhs) in acc.iter_mut().zip(b.row(p)) {
                *slot += lhs * rhs as f64;
            }
        }
        for (o, s) in out_row.iter_mut().zip(acc) {
            *o = s as f32;
        }
    };
    if n * k * m >= PARALLEL_MATMUL_WORK {
        out.par_chunks_mut(m).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(m).enumerate().for_each(kernel);
    }
    Tensor2::from_vec(n, m, out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_bt(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.cols {
        return Err(DoucError::shape(
            "matmul_bt",
            format!("lhs {}x{} vs rhs^T of {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Tensor2::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j)) as f32;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Softmax of `scale * row` for every row, with row-max subtraction.
pub fn row_softmax(m: &Tensor2, scale: f32) -> Tensor2 {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), scale as f64, None);
    }
    out
}

/// Softmax over one slice. Entries at or below `masked_at` get exactly zero weight.
pub(crate) fn softmax_in_place(row: &mut [f32], scale: f64, masked_at: Option<f32>) {
    let keep = |x: f32| masked_at.is_none_or(|t| x > t);
    let max = row
        .iter()
        .filter(|&&x| keep(x))
        .map(|&x| scale * x as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let exps: Vec<f64> = row
        .iter()
        .map(|&x| if keep(x) { (scale * x as f64 - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = exps.iter().sum();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Divides each row by `max(||row||, eps)`.
pub fn l2_normalize_rows(m: &Tensor2, eps: f32) -> Tensor2 {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let norm = l2_norm(row).max(eps as f64);
        for x in row.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
    out
}

pub fn layer_norm(m: &Tensor2, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor2> {
    if gamma.len() != m.cols || beta.len() != m.cols {
        return Err(DoucError::shape(
            "layer_norm",
            format!("gamma {} / beta {} for {} columns", gamma.len(), beta.len(), m.cols),
        ));
    }
    let mut out = m.clone();
    let n = m.cols as f64;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((x, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *x = ((*x as f64 - mean) * inv * g as f64 + b as f64) as f32;
        }
    }
    Ok(out)
}

/// Source taps for one output coordinate under the half-pixel convention.
#[derive(Debug, Clone, Copy)]
struct Taps {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn half_pixel_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Taps {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

/// Channel-wise bilinear resize, align-corners-false (half-pixel centers,
/// edge-clamped). Same-size resizes return an exact copy.
pub fn bilinear_resize(g: &Grid3, out_h: usize, out_w: usize) -> Grid3 {
    assert!(out_h >= 1 && out_w >= 1, "bilinear_resize: empty output size");
    if (out_h, out_w) == (g.height, g.width) {
        return g.clone();
    }
    let ys = half_pixel_taps(g.height, out_h);
    let xs = half_pixel_taps(g.width, out_w);
    let c = g.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for ty in &ys {
        for tx in &xs {
            let p00 = g.pixel(ty.lo, tx.lo);
            let p01 = g.pixel(ty.lo, tx.hi);
            let p10 = g.pixel(ty.hi, tx.lo);
            let p11 = g.pixel(ty.hi, tx.hi);
            let (wy, wx) = (ty.w_hi, tx.w_hi);
            for ch in 0..c {
                let top = (1.0 - wx) * p00[ch] as f64 + wx * p01[ch] as f64;
                let bottom = (1.0 - wx) * p10[ch] as f64 + wx * p11[ch] as f64;
                data.push(((1.0 - wy) * top + wy * bottom) as f32);
            }
        }
    }
    Grid3 {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    }
}
