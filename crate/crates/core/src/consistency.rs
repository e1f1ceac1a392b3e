//! Cross-view query consistency on a toy decoder.
//!
//! RoI features pooled from one view are embedded into queries and appended
//! to the other view's object queries. A block-diagonal attention mask keeps
//! the two query groups from seeing each other, and the decoded consistency
//! queries of both views are compared with a mean squared error.
//!
//! All arithmetic runs in explicit loops with a fixed summation order, so a
//! masked-out query has no effect at all on the remaining outputs, down to
//! the last bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{rows}x{cols} matrix from {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// `self` stacked above `other`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!("cannot stack {} and {} columns", self.cols, other.cols)));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense `[channels x height x width]` feature map over the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::param("feature grid dimensions must be >= 1"));
        }
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{channels}x{height}x{width} grid from {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("feature grid has non-finite entries"));
        }
        Ok(Self { channels, height, width, values })
    }

    /// Grid whose entry `(c, y, x)` is `f(c, y, x)`.
    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, values)
    }

    pub fn constant(channels: usize, height: usize, width: usize, v: f64) -> Result<Self> {
        Self::from_fn(channels, height, width, |_, _, _| v)
    }

    pub fn random(channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let values = (0..channels * height * width).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { channels, height, width, values }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::ShapeMismatch("grids differ in shape".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Self::new(self.channels, self.height, self.width, values)
    }

    /// One token per cell, `channels` entries each, row-major over cells.
    pub fn tokens(&self) -> Matrix {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(n * self.channels);
        for cell in 0..n {
            for c in 0..self.channels {
                data.push(self.values[c * n + cell]);
            }
        }
        Matrix { rows: n, cols: self.channels, data }
    }

    /// Bilinear sample at continuous index coordinates, with cell `(i, j)`
    /// centered at `(j, i)`. Points more than one cell outside contribute 0.
    fn bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let (h, w) = (self.height as f64, self.width as f64);
        if y < -1.0 || y > h || x < -1.0 || x > w {
            return 0.0;
        }
        let y = y.clamp(0.0, h - 1.0);
        let x = x.clamp(0.0, w - 1.0);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let ly = y - y0 as f64;
        let lx = x - x0 as f64;
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        hy * hx * self.get(c, y0, x0) + hy * lx * self.get(c, y0, x1) + ly * hx * self.get(c, y1, x0) + ly * lx * self.get(c, y1, x1)
    }
}

/// RoIAlign pooling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub out_h: usize,
    pub out_w: usize,
    pub sampling: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self { out_h: 7, out_w: 7, sampling: 2 }
    }
}

/// Pools the region `bbox` (normalized coordinates) of `grid` into an
/// `out_h x out_w` grid; each bin averages `sampling x sampling` bilinear
/// samples placed at the centers of an even sub-grid. No coordinate rounding.
pub fn roi_align(grid: &FeatureGrid, bbox: &BBox, out_h: usize, out_w: usize, sampling: usize) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 || sampling == 0 {
        return Err(Error::param("roi_align output size and sampling must be >= 1"));
    }
    if !bbox.is_finite() || bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return Err(Error::InvalidBox(format!("zero-area region {bbox:?}")));
    }
    // index space: cell i covers [i, i+1) and is sampled at i + 0.5
    let x0 = bbox.x_min * grid.width as f64 - 0.5;
    let y0 = bbox.y_min * grid.height as f64 - 0.5;
    let bin_w = bbox.width() * grid.width as f64 / out_w as f64;
    let bin_h = bbox.height() * grid.height as f64 / out_h as f64;
    let count = (sampling * sampling) as f64;

    let mut values = Vec::with_capacity(grid.channels * out_h * out_w);
    for c in 0..grid.channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for sy in 0..sampling {
                    let y = y0 + oy as f64 * bin_h + (sy as f64 + 0.5) * bin_h / sampling as f64;
                    for sx in 0..sampling {
                        let x = x0 + ox as f64 * bin_w + (sx as f64 + 0.5) * bin_w / sampling as f64;
                        acc += grid.bilinear(c, y, x);
                    }
                }
                values.push(acc / count);
            }
        }
    }
    FeatureGrid::new(grid.channels, out_h, out_w, values)
}

/// Affine map `y = W x + b`, `W` stored `[out x in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows {
            return Err(Error::ShapeMismatch(format!("bias of {} for {} outputs", bias.len(), weight.rows)));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(output, input), bias: vec![0.0; output] }
    }

    pub fn random(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Matrix::random(output, input, scale, rng);
        let bias = (0..output).map(|_| rng.random_range(-scale..=scale)).collect();
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim())
            .map(|o| {
                let mut acc = self.bias[o];
                for (w, v) in self.weight.row(o).iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }
}

/// Stack of linear layers with `max(0, .)` between consecutive layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer emits {} values, next expects {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `input -> hidden -> output` with one ReLU.
    pub fn two_layer(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self { layers: vec![Linear::random(input, hidden, rng), Linear::random(hidden, output, rng)] }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }
}

/// Flattens each pooled region and runs it through `mlp`.
pub fn embed_queries(roi_feats: &[FeatureGrid], mlp: &Mlp) -> Result<Matrix> {
    let mut data = Vec::with_capacity(roi_feats.len() * mlp.out_dim());
    for f in roi_feats {
        if f.values.len() != mlp.in_dim() {
            return Err(Error::ShapeMismatch(format!("pooled size {} vs MLP input {}", f.values.len(), mlp.in_dim())));
        }
        data.extend(mlp.forward(&f.values));
    }
    Matrix::new(roi_feats.len(), mlp.out_dim(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryGroup {
    Matching,
    Consistency,
}

/// Decoder input queries with their group tags.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub embeddings: Matrix,
    pub groups: Vec<QueryGroup>,
}

impl QuerySet {
    pub fn new(embeddings: Matrix, groups: Vec<QueryGroup>) -> Result<Self> {
        if embeddings.rows != groups.len() {
            return Err(Error::ShapeMismatch(format!("{} queries, {} tags", embeddings.rows, groups.len())));
        }
        Ok(Self { embeddings, groups })
    }

    /// Matching queries followed by consistency queries.
    pub fn attach(matching: &Matrix, consistency: &Matrix) -> Result<Self> {
        let groups = std::iter::repeat_n(QueryGroup::Matching, matching.rows)
            .chain(std::iter::repeat_n(QueryGroup::Consistency, consistency.rows))
            .collect();
        Self::new(matching.vstack(consistency)?, groups)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// `blocked[i][j]`: query `i` may not attend to query `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.n + j]
    }

    pub fn num_blocked(&self) -> usize {
        self.blocked.iter().filter(|b| **b).count()
    }

    /// No blocking at all.
    pub fn open(n: usize) -> Self {
        Self { n, blocked: vec![false; n * n] }
    }

    /// Everything blocked except the diagonal.
    pub fn diagonal(n: usize) -> Self {
        Self { n, blocked: (0..n * n).map(|k| k / n != k % n).collect() }
    }
}

/// Queries attend only within their own group.
pub fn build_attention_mask(groups: &[QueryGroup]) -> AttentionMask {
    let n = groups.len();
    let mut blocked = Vec::with_capacity(n * n);
    for gi in groups {
        for gj in groups {
            blocked.push(gi != gj);
        }
    }
    AttentionMask { n, blocked }
}

/// Multi-head attention projections. Queries come from a `dim`-wide stream,
/// keys and values from a `kv_dim`-wide one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttentionParams {
    pub fn random(dim: usize, kv_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::random(dim, dim, rng),
            wk: Linear::random(kv_dim, dim, rng),
            wv: Linear::random(kv_dim, dim, rng),
            wo: Linear::random(dim, dim, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub memory_channels: usize,
    pub ffn_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dim: 16, heads: 2, memory_channels: 8, ffn_hidden: 32 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!("dim {} not divisible into {} heads", self.dim, self.heads)));
        }
        if self.memory_channels == 0 || self.ffn_hidden == 0 {
            return Err(Error::param("memory_channels and ffn_hidden must be >= 1"));
        }
        Ok(())
    }
}

/// One decoder block: masked self-attention, cross-attention to memory and a
/// feed-forward layer, each with a residual connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub heads: usize,
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: Mlp,
}

impl DecoderParams {
    pub fn random(cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            heads: cfg.heads,
            self_attn: AttentionParams::random(cfg.dim, cfg.dim, rng),
            cross_attn: AttentionParams::random(cfg.dim, cfg.memory_channels, rng),
            ffn: Mlp::two_layer(cfg.dim, cfg.ffn_hidden, cfg.dim, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.self_attn.wq.out_dim()
    }
}

fn project(x: &Matrix, layer: &Linear) -> Matrix {
    let mut data = Vec::with_capacity(x.rows * layer.out_dim());
    for i in 0..x.rows {
        data.extend(layer.forward(x.row(i)));
    }
    Matrix { rows: x.rows, cols: layer.out_dim(), data }
}

/// Scaled dot-product attention of each query row over the key rows it may
/// see; `visible(i, j)` decides. Keys that are not visible are skipped, not
/// zero-weighted.
fn attend(
    queries: &Matrix,
    kv: &Matrix,
    p: &AttentionParams,
    heads: usize,
    visible: impl Fn(usize, usize) -> bool,
) -> Matrix {
    let q = project(queries, &p.wq);
    let k = project(kv, &p.wk);
    let v = project(kv, &p.wv);
    let dim = q.cols;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut mixed = Matrix::zeros(queries.rows, dim);
    let mut logits = Vec::with_capacity(kv.rows);
    for i in 0..queries.rows {
        for h in 0..heads {
            let lo = h * hd;
            logits.clear();
            for j in 0..kv.rows {
                if !visible(i, j) {
                    continue;
                }
                let mut dot = 0.0;
                for d in lo..lo + hd {
                    dot += q.get(i, d) * k.get(j, d);
                }
                logits.push((j, dot * scale));
            }
            if logits.is_empty() {
                continue;
            }
            let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                l.1 = (l.1 - max).exp();
                denom += l.1;
            }
            for d in lo..lo + hd {
                let mut acc = 0.0;
                for &(j, w) in &logits {
                    acc += w * v.get(j, d);
                }
                mixed.data[i * dim + d] = acc / denom;
            }
        }
    }
    project(&mixed, &p.wo)
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data.iter_mut().zip(&y.data) {
        *a += b;
    }
}

/// Runs the decoder block over `queries`, attending to the cells of `memory`.
pub fn toy_decode(queries: &QuerySet, memory: &FeatureGrid, mask: &AttentionMask, params: &DecoderParams) -> Result<Matrix> {
    let dim = params.dim();
    if queries.embeddings.cols != dim && !queries.is_empty() {
        return Err(Error::ShapeMismatch(format!("queries of width {} for decoder dim {dim}", queries.embeddings.cols)));
    }
    if mask.len() != queries.len() {
        return Err(Error::ShapeMismatch(format!("mask over {} queries, got {}", mask.len(), queries.len())));
    }
    if memory.channels != params.cross_attn.wk.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "memory has {} channels, decoder expects {}",
            memory.channels,
            params.cross_attn.wk.in_dim()
        )));
    }
    let x = &queries.embeddings;
    let mut h = x.clone();
    add_in_place(&mut h, &attend(x, x, &params.self_attn, params.heads, |i, j| !mask.is_blocked(i, j)));
    let tokens = memory.tokens();
    let cross = attend(&h, &tokens, &params.cross_attn, params.heads, |_, _| true);
    add_in_place(&mut h, &cross);
    let ffn = project_mlp(&h, &params.ffn);
    add_in_place(&mut h, &ffn);
    Ok(h)
}

fn project_mlp(x: &Matrix, mlp: &Mlp) -> Matrix {
    let mut data = Vec::with_capacity(x.rows * mlp.out_dim());
    for i in 0..x.rows {
        data.extend(mlp.forward(x.row(i)));
    }
    Matrix { rows: x.rows, cols: mlp.out_dim(), data }
}

/// MSE value and its gradient with respect to the student side.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    /// Same shape as the student matrix. The teacher side is a constant and
    /// receives no gradient.
    pub grad_student: Matrix,
}

/// Mean squared error over all entries, treating `o_hat_t` as a constant.
pub fn consistency_loss(o_hat_s: &Matrix, o_hat_t: &Matrix) -> Result<ConsistencyLoss> {
    if (o_hat_s.rows, o_hat_s.cols) != (o_hat_t.rows, o_hat_t.cols) {
        return Err(Error::ShapeMismatch(format!(
            "student {}x{} vs teacher {}x{}",
            o_hat_s.rows, o_hat_s.cols, o_hat_t.rows, o_hat_t.cols
        )));
    }
    let n = o_hat_s.data.len();
    if n == 0 {
        return Ok(ConsistencyLoss { value: 0.0, grad_student: o_hat_s.clone() });
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (s, t) in o_hat_s.data.iter().zip(&o_hat_t.data) {
        let d = s - t;
        value += d * d;
        grad.push(2.0 * d / n as f64);
    }
    Ok(ConsistencyLoss { value: value / n as f64, grad_student: Matrix { rows: o_hat_s.rows, cols: o_hat_s.cols, data: grad } })
}

/// Per-model parameters used by the consistency branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyModel {
    /// Learned object queries, one row each.
    pub queries: Matrix,
    pub embed: Mlp,
    pub decoder: DecoderParams,
}

impl ConsistencyModel {
    /// Random model whose decoder attends over `cfg.memory_channels`-channel
    /// memory and whose RoI features have that many channels too.
    pub fn random(cfg: &DecoderConfig, roi: &RoiConfig, num_queries: usize, rng: &mut impl Rng) -> Result<Self> {
        let decoder = DecoderParams::random(cfg, rng)?;
        let input = cfg.memory_channels * roi.out_h * roi.out_w;
        let embed = Mlp::two_layer(input, cfg.dim, cfg.dim, rng);
        Ok(Self { queries: Matrix::random(num_queries, cfg.dim, 1.0, rng), embed, decoder })
    }

    /// Every parameter, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        fn linear<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut f64>) {
            out.extend(l.weight.data.iter_mut());
            out.extend(l.bias.iter_mut());
        }
        fn attention<'a>(a: &'a mut AttentionParams, out: &mut Vec<&'a mut f64>) {
            linear(&mut a.wq, out);
            linear(&mut a.wk, out);
            linear(&mut a.wv, out);
            linear(&mut a.wo, out);
        }
        let mut out = Vec::new();
        out.extend(self.queries.data.iter_mut());
        for l in &mut self.embed.layers {
            linear(l, &mut out);
        }
        attention(&mut self.decoder.self_attn, &mut out);
        attention(&mut self.decoder.cross_attn, &mut out);
        for l in &mut self.decoder.ffn.layers {
            linear(l, &mut out);
        }
        out
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.clone().params_mut().into_iter().map(|v| *v).collect()
    }

    /// Overwrites every parameter from `values` (same order as
    /// [`Self::params_mut`]).
    pub fn set_from(&mut self, values: &[f64]) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::ShapeMismatch(format!("model has {} parameters, got {}", slots.len(), values.len())));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = *v;
        }
        Ok(())
    }
}

/// One view of an image as seen by one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInputs {
    /// Backbone features RoI embeddings are pooled from.
    pub features: FeatureGrid,
    /// Original object queries.
    pub queries: Matrix,
    /// Encoded features the decoder cross-attends to.
    pub memory: FeatureGrid,
}

/// Decoder outputs of both views.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewOutput {
    /// Consistency-query outputs of the teacher decoder (student-view RoIs).
    pub o_hat_t: Matrix,
    /// Consistency-query outputs of the student decoder (teacher-view RoIs).
    pub o_hat_s: Matrix,
    /// Matching-query outputs of the teacher decoder.
    pub o_t: Matrix,
    /// Matching-query outputs of the student decoder.
    pub o_s: Matrix,
}

/// Embeds pseudo boxes from each view and decodes them in the other:
/// the student decoder receives teacher-view embeddings and vice versa.
pub fn cross_view_decode(
    teacher_view: &ViewInputs,
    student_view: &ViewInputs,
    teacher: &ConsistencyModel,
    student: &ConsistencyModel,
    boxes: &[BBox],
    roi: &RoiConfig,
) -> Result<CrossViewOutput> {
    let pool = |grid: &FeatureGrid| -> Result<Vec<FeatureGrid>> {
        boxes.iter().map(|b| roi_align(grid, b, roi.out_h, roi.out_w, roi.sampling)).collect()
    };
    let c_t = embed_queries(&pool(&teacher_view.features)?, &teacher.embed)?;
    let c_s = embed_queries(&pool(&student_view.features)?, &student.embed)?;

    let run = |view: &ViewInputs, attached: &Matrix, model: &ConsistencyModel| -> Result<(Matrix, Matrix)> {
        let qs = QuerySet::attach(&view.queries, attached)?;
        let mask = build_attention_mask(&qs.groups);
        let out = toy_decode(&qs, &view.memory, &mask, &model.decoder)?;
        let m = view.queries.rows;
        Ok((out.slice_rows(0, m), out.slice_rows(m, out.rows)))
    };
    let (o_s, o_hat_s) = run(student_view, &c_t, student)?;
    let (o_t, o_hat_t) = run(teacher_view, &c_s, teacher)?;
    Ok(CrossViewOutput { o_hat_t, o_hat_s, o_t, o_s })
}
