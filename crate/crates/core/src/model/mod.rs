//! The two-branch multi-scale network, context enhancement and prediction
//! heads.
//!
//! A forward pass runs in five stages:
//!
//! 1. **Conv branch.** Each pyramid level `f_s` goes through a Conv1D with
//!    kernel `K_s/L_1 + 1` and stride `K_s/L_1` (+ReLU), landing at `L_1`
//!    steps. The per-scale maps are concatenated into `C_1^t` and
//!    kernel-3/stride-2 convolutions produce `C_2^t .. C_N^t`.
//! 2. **Pool branch.** Non-overlapping max pooling with window `K_s/L_1`
//!    brings each level to `L_1` steps; concatenation gives `C_1^p`, then
//!    window-2 pooling builds the rest of the hierarchy.
//! 3. **Fusion.** Channel concatenation of the two branches at every level.
//! 4. **Context.** Every level is concatenated with the next level duplicated
//!    twice in time (local) and the single whole-video cell tiled across it
//!    (global). The last level uses itself as local context.
//! 5. **Heads.** A per-level Conv1D emits `1 + M + 2` channels per cell:
//!    actionness, `M` class logits, and the two span offsets.

mod anchors;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::PyramidFeature;
use crate::tensor::{
    accumulate_channel_slice, concat_channels, relu_backward, relu_inplace, upsample_backward,
    upsample_time, Conv1d, Grad2, MaxPool, Padding, Param, Scalar,
};

pub use anchors::{layout_anchors, Anchor};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    Both,
    Conv,
    Pool,
}

impl Branches {
    pub fn has_conv(self) -> bool {
        matches!(self, Branches::Both | Branches::Conv)
    }

    pub fn has_pool(self) -> bool {
        matches!(self, Branches::Both | Branches::Pool)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scales: usize,
    pub base_segments: usize,
    pub feature_dim: usize,
    pub branch_filters: usize,
    pub head_kernel: usize,
    pub num_classes: usize,
    pub branches: Branches,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales == 0 || self.scales > 24 {
            return bad(format!("scale count {} out of range", self.scales));
        }
        if !self.base_segments.is_power_of_two() {
            return bad(format!("K_1 = {} is not a power of two", self.base_segments));
        }
        if self.feature_dim == 0 || self.branch_filters == 0 || self.head_kernel == 0 {
            return bad("feature_dim, branch_filters and head_kernel must be ≥ 1".into());
        }
        if self.num_classes == 0 {
            return bad("at least one class is required".into());
        }
        Ok(())
    }

    /// Hierarchy depth `N = log2(K_1) + 1`.
    pub fn depth(&self) -> usize {
        self.base_segments.trailing_zeros() as usize + 1
    }

    /// `L_i` for zero-based level `i`.
    pub fn level_len(&self, level: usize) -> usize {
        self.base_segments >> level
    }

    pub fn num_anchors(&self) -> usize {
        2 * self.base_segments - 1
    }

    /// `d_t`.
    pub fn conv_width(&self) -> usize {
        self.scales * self.branch_filters
    }

    /// `d_p`.
    pub fn pool_width(&self) -> usize {
        self.scales * self.feature_dim
    }

    /// `d_f`, identical at every level.
    pub fn fused_width(&self) -> usize {
        let mut w = 0;
        if self.branches.has_conv() {
            w += self.conv_width();
        }
        if self.branches.has_pool() {
            w += self.pool_width();
        }
        w
    }

    pub fn context_width(&self) -> usize {
        3 * self.fused_width()
    }

    pub fn head_channels(&self) -> usize {
        self.num_classes + 3
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        layout_anchors(self.base_segments)
    }
}

/// Raw head outputs for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPrediction {
    pub act_logit: f64,
    pub class_logits: Vec<f64>,
    pub center_offset: f64,
    pub length_offset: f64,
}

impl AnchorPrediction {
    fn from_row<F: Scalar>(row: &[F]) -> Self {
        let m = row.len() - 3;
        Self {
            act_logit: row[0].as_f64(),
            class_logits: row[1..=m].iter().map(|v| v.as_f64()).collect(),
            center_offset: row[m + 1].as_f64(),
            length_offset: row[m + 2].as_f64(),
        }
    }
}

/// Every intermediate of a forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<F: Scalar = f32> {
    pub inputs: Vec<Grad2<F>>,
    /// Per-scale conv outputs (after ReLU), each `L_1 × filters`.
    pub scale_maps: Vec<Grad2<F>>,
    /// `C_i^t`.
    pub conv_levels: Vec<Grad2<F>>,
    /// `C_i^p`.
    pub pool_levels: Vec<Grad2<F>>,
    /// `C_i`.
    pub fused: Vec<Grad2<F>>,
    pub enhanced: Vec<Grad2<F>>,
    /// Per-level head maps, `L_i × (M + 3)`.
    pub heads: Vec<Grad2<F>>,
}

impl<F: Scalar> ForwardPass<F> {
    /// One prediction per anchor, in [`layout_anchors`] order.
    pub fn predictions(&self) -> Vec<AnchorPrediction> {
        self.heads
            .iter()
            .flat_map(|h| (0..h.t()).map(move |t| AnchorPrediction::from_row(h.row(t))))
            .collect()
    }

    pub fn zero_head_grads(&mut self) {
        self.heads.iter_mut().for_each(Grad2::zero_grad);
    }
}

pub fn pyramid_inputs<F: Scalar>(pyramid: &PyramidFeature) -> Result<Vec<Grad2<F>>> {
    (0..pyramid.scales())
        .map(|s| Grad2::from_f32(pyramid.rows(s), pyramid.dim(), pyramid.level(s)))
        .collect()
}

/// Max-pool branch. Parameter-free.
pub fn pool_branch<F: Scalar>(inputs: &[Grad2<F>], config: &ModelConfig) -> Result<Vec<Grad2<F>>> {
    let l1 = config.base_segments;
    let mut per_scale = Vec::with_capacity(inputs.len());
    for (s, x) in inputs.iter().enumerate() {
        let pooled = MaxPool::non_overlapping(x.t() / l1).forward(x).out;
        if pooled.t() != l1 {
            return Err(Error::Shape(format!(
                "scale {s}: pooled to {} steps, expected {l1}",
                pooled.t()
            )));
        }
        per_scale.push(pooled);
    }
    let refs: Vec<&Grad2<F>> = per_scale.iter().collect();
    let mut levels = vec![concat_channels(&refs)?];
    for _ in 1..config.depth() {
        let next = MaxPool::non_overlapping(2).forward(levels.last().unwrap()).out;
        levels.push(next);
    }
    Ok(levels)
}

/// Channel-wise concatenation per level. An empty side (single-branch
/// model) passes the other through.
pub fn fuse_branches<F: Scalar>(conv: &[Grad2<F>], pool: &[Grad2<F>]) -> Result<Vec<Grad2<F>>> {
    match (conv.is_empty(), pool.is_empty()) {
        (true, true) => Err(Error::Shape("both branches are empty".into())),
        (false, true) => Ok(conv.to_vec()),
        (true, false) => Ok(pool.to_vec()),
        (false, false) => {
            if conv.len() != pool.len() {
                return Err(Error::Shape(format!(
                    "branch depths differ: {} vs {}",
                    conv.len(),
                    pool.len()
                )));
            }
            conv.iter()
                .zip(pool)
                .map(|(c, p)| concat_channels(&[c, p]))
                .collect()
        }
    }
}

/// Local and global context: `C_i ⊕ dup2(C_{i+1}) ⊕ tile(C_N)`, with the
/// last level using itself for the local block.
pub fn enhance_context<F: Scalar>(hierarchy: &[Grad2<F>]) -> Result<Vec<Grad2<F>>> {
    let n = hierarchy.len();
    let global = hierarchy
        .last()
        .ok_or_else(|| Error::Shape("empty hierarchy".into()))?;
    (0..n)
        .map(|i| {
            let cur = &hierarchy[i];
            let local = upsample_time(&hierarchy[(i + 1).min(n - 1)], cur.t())?;
            let glob = upsample_time(global, cur.t())?;
            concat_channels(&[cur, &local, &glob])
        })
        .collect()
}

fn backward_context<F: Scalar>(fused: &mut [Grad2<F>], enhanced: &[Grad2<F>]) {
    let n = fused.len();
    let w = fused[0].c();
    for i in 0..n {
        let t = enhanced[i].t();
        accumulate_channel_slice(&enhanced[i], 0, &mut fused[i]);
        for (block, src) in [(1, (i + 1).min(n - 1)), (2, n - 1)] {
            let mut up = Grad2::zeros(t, w);
            accumulate_channel_slice(&enhanced[i], block * w, &mut up);
            upsample_backward(&mut fused[src], &up);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dtpn<F: Scalar = f32> {
    config: ModelConfig,
    scale_convs: Vec<Conv1d<F>>,
    down_convs: Vec<Conv1d<F>>,
    heads: Vec<Conv1d<F>>,
}

impl<F: Scalar> Dtpn<F> {
    /// All weights and biases zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (mut scale_convs, mut down_convs) = (Vec::new(), Vec::new());
        if config.branches.has_conv() {
            for s in 0..config.scales {
                let ratio = 1 << s;
                scale_convs.push(Conv1d::new(
                    &format!("conv_branch.scale{s}"),
                    ratio + 1,
                    ratio,
                    config.feature_dim,
                    config.branch_filters,
                    Padding::Same,
                ));
            }
            let width = config.conv_width();
            for i in 1..config.depth() {
                down_convs.push(Conv1d::new(
                    &format!("conv_branch.down{i}"),
                    3,
                    2,
                    width,
                    width,
                    Padding::Same,
                ));
            }
        }
        let heads = (0..config.depth())
            .map(|i| {
                Conv1d::new(
                    &format!("head.level{i}"),
                    config.head_kernel,
                    1,
                    config.context_width(),
                    config.head_channels(),
                    Padding::Same,
                )
            })
            .collect();
        Ok(Self {
            config,
            scale_convs,
            down_convs,
            heads,
        })
    }

    /// Fan-in uniform initialization from a seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in model.convs_mut() {
            conv.init_fan_in(&mut rng);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn convs(&self) -> impl Iterator<Item = &Conv1d<F>> {
        self.scale_convs.iter().chain(&self.down_convs).chain(&self.heads)
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv1d<F>> {
        self.scale_convs
            .iter_mut()
            .chain(&mut self.down_convs)
            .chain(&mut self.heads)
    }

    /// Parameters in fixed topological order.
    pub fn params(&self) -> Vec<&Param<F>> {
        self.convs().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.convs_mut().flat_map(|c| c.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn cast<G: Scalar>(&self) -> Dtpn<G> {
        Dtpn {
            config: self.config,
            scale_convs: self.scale_convs.iter().map(Conv1d::cast).collect(),
            down_convs: self.down_convs.iter().map(Conv1d::cast).collect(),
            heads: self.heads.iter().map(Conv1d::cast).collect(),
        }
    }

    pub fn check_pyramid(&self, pyramid: &PyramidFeature) -> Result<()> {
        let c = &self.config;
        if pyramid.scales() != c.scales
            || pyramid.base_segments() != c.base_segments
            || pyramid.dim() != c.feature_dim
        {
            return Err(Error::Shape(format!(
                "features have (d={}, S={}, K_1={}), model expects (d={}, S={}, K_1={})",
                pyramid.dim(),
                pyramid.scales(),
                pyramid.base_segments(),
                c.feature_dim,
                c.scales,
                c.base_segments
            )));
        }
        Ok(())
    }

    /// Returns the post-ReLU per-scale maps and `C_1^t .. C_N^t`.
    pub fn conv_branch(&self, inputs: &[Grad2<F>]) -> Result<(Vec<Grad2<F>>, Vec<Grad2<F>>)> {
        if self.scale_convs.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut scale_maps = Vec::with_capacity(inputs.len());
        for (conv, x) in self.scale_convs.iter().zip(inputs) {
            let mut y = conv.forward(x)?;
            relu_inplace(&mut y);
            scale_maps.push(y);
        }
        let refs: Vec<&Grad2<F>> = scale_maps.iter().collect();
        let mut levels = vec![concat_channels(&refs)?];
        for conv in &self.down_convs {
            let mut y = conv.forward(levels.last().unwrap())?;
            relu_inplace(&mut y);
            levels.push(y);
        }
        Ok((scale_maps, levels))
    }

    /// Smallest `|z|` over every ReLU input of the conv branch, or infinity
    /// without one. Finite-difference checks need this well above ε.
    pub fn relu_margin(&self, pyramid: &PyramidFeature) -> Result<f64> {
        let inputs: Vec<Grad2<F>> = pyramid_inputs(pyramid)?;
        let min_abs = |g: &Grad2<F>| g.values().iter().map(|v| v.as_f64().abs()).fold(f64::INFINITY, f64::min);
        let mut margin = f64::INFINITY;
        let mut maps = Vec::new();
        for (conv, x) in self.scale_convs.iter().zip(&inputs) {
            let mut z = conv.forward(x)?;
            margin = margin.min(min_abs(&z));
            relu_inplace(&mut z);
            maps.push(z);
        }
        if maps.is_empty() {
            return Ok(margin);
        }
        let refs: Vec<&Grad2<F>> = maps.iter().collect();
        let mut level = concat_channels(&refs)?;
        for conv in &self.down_convs {
            let mut z = conv.forward(&level)?;
            margin = margin.min(min_abs(&z));
            relu_inplace(&mut z);
            level = z;
        }
        Ok(margin)
    }

    pub fn predict_heads(&self, enhanced: &[Grad2<F>]) -> Result<Vec<Grad2<F>>> {
        self.heads
            .iter()
            .zip(enhanced)
            .map(|(h, x)| h.forward(x))
            .collect()
    }

    pub fn forward(&self, pyramid: &PyramidFeature) -> Result<ForwardPass<F>> {
        self.check_pyramid(pyramid)?;
        let inputs = pyramid_inputs(pyramid)?;
        let (scale_maps, conv_levels) = self.conv_branch(&inputs)?;
        let pool_levels = if self.config.branches.has_pool() {
            pool_branch(&inputs, &self.config)?
        } else {
            Vec::new()
        };
        let fused = fuse_branches(&conv_levels, &pool_levels)?;
        let enhanced = enhance_context(&fused)?;
        let heads = self.predict_heads(&enhanced)?;
        Ok(ForwardPass {
            inputs,
            scale_maps,
            conv_levels,
            pool_levels,
            fused,
            enhanced,
            heads,
        })
    }

    /// Backpropagate the gradients stored in `pass.heads` into parameter
    /// gradients (accumulating). The pool branch has no parameters and the
    /// pyramid is a leaf, so nothing flows through max pooling here.
    pub fn backward(&mut self, pass: &mut ForwardPass<F>) {
        for level in pass.enhanced.iter_mut().chain(&mut pass.fused) {
            level.zero_grad();
        }
        for ((head, x), out) in self.heads.iter_mut().zip(&mut pass.enhanced).zip(&pass.heads) {
            head.backward(x, out);
        }
        backward_context(&mut pass.fused, &pass.enhanced);
        if self.scale_convs.is_empty() {
            return;
        }
        for (conv, fused) in pass.conv_levels.iter_mut().zip(&pass.fused) {
            conv.zero_grad();
            accumulate_channel_slice(fused, 0, conv);
        }
        for i in (1..pass.conv_levels.len()).rev() {
            let (lower, upper) = pass.conv_levels.split_at_mut(i);
            relu_backward(&mut upper[0]);
            self.down_convs[i - 1].backward(&mut lower[i - 1], &upper[0]);
        }
        let mut offset = 0;
        for ((conv, map), x) in self
            .scale_convs
            .iter_mut()
            .zip(&mut pass.scale_maps)
            .zip(&mut pass.inputs)
        {
            map.zero_grad();
            accumulate_channel_slice(&pass.conv_levels[0], offset, map);
            offset += map.c();
            relu_backward(map);
            conv.backward(x, map);
        }
    }
}
