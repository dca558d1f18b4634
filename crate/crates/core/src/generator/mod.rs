//! Encoder-decoder generator mapping a Tencode frame to a 3-channel image.
//!
//! Layout for `N` stages:
//!
//! ```text
//! stem:    3x3 conv -> BN -> SiLU -> 3x3 conv -> BN -> SiLU            (full res)
//! enc i:   2x2 max-pool, then repeats[i] blocks of kind[i]             (res / 2^(i+1))
//! dec i:   bilinear 2x upsample, concat skip from level i, repeats[i]  (deepest first)
//!          blocks of kind[i] back down to the level's channel count
//! head:    1x1 conv -> SiLU -> 1x1 conv to 3 channels -> sigmoid
//! ```
//!
//! Blocks are EfficientNetV2 style: Fused-MBConv (3x3 expand, 1x1 project) and
//! MBConv (1x1 expand, 3x3 depthwise, squeeze-excitation, 1x1 project), with a
//! residual connection whenever input and output channels agree.

mod checkpoint;
mod padding;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CheckpointError,
    CheckpointMeta, OptimizerMoments, CHECKPOINT_VERSION,
};
pub use padding::{crop, pad_to, pad_to_grid, CropRecord};

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Tensor, Var};
use crate::hashing::sha256_hex;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const OUTPUT_WEIGHT: &str = "head.1.weight";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Fused,
    Mbconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_repeats: Vec<usize>,
    pub stage_kind: Vec<BlockKind>,
    pub expansion_ratio: f64,
    /// Squeeze-excitation width relative to the block input (MBConv only).
    pub se_ratio: f64,
    pub head_channels: usize,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            stage_channels: vec![48, 80, 160],
            stage_repeats: vec![2, 2, 3],
            stage_kind: vec![BlockKind::Fused, BlockKind::Fused, BlockKind::Mbconv],
            expansion_ratio: 4.0,
            se_ratio: 0.25,
            head_channels: 16,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

impl GeneratorConfig {
    /// Small single-stage network for desk-scale experiments and tests.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: vec![16],
            stage_repeats: vec![1],
            stage_kind: vec![BlockKind::Fused],
            expansion_ratio: 2.0,
            se_ratio: 0.25,
            head_channels: 8,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::InvalidConfig(m));
        let n = self.stage_channels.len();
        if n == 0 {
            return bad("at least one stage is required".into());
        }
        if self.stage_repeats.len() != n || self.stage_kind.len() != n {
            return bad(format!(
                "stage lists differ in length: channels {}, repeats {}, kinds {}",
                n,
                self.stage_repeats.len(),
                self.stage_kind.len()
            ));
        }
        if self.stem_channels == 0 || self.head_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.stage_repeats.contains(&0) {
            return bad("stage repeats must be at least 1".into());
        }
        if !(self.expansion_ratio.is_finite() && self.expansion_ratio >= 1.0) {
            return bad(format!("expansion ratio {} must be >= 1", self.expansion_ratio));
        }
        if !(self.se_ratio.is_finite() && self.se_ratio >= 0.0 && self.se_ratio <= 1.0) {
            return bad(format!("se ratio {} must lie in [0, 1]", self.se_ratio));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn grid_factor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    fn expanded(&self, c_in: usize) -> usize {
        ((c_in as f64 * self.expansion_ratio).round() as usize).max(1)
    }

    fn se_width(&self, c_in: usize) -> Option<usize> {
        (self.se_ratio > 0.0).then(|| ((c_in as f64 * self.se_ratio) as usize).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Debug, Clone, Copy)]
struct SqueezeExcite {
    reduce_w: usize,
    reduce_b: usize,
    expand_w: usize,
    expand_b: usize,
}

#[derive(Debug, Clone)]
enum Block {
    Fused {
        expand: ConvBn,
        project: Option<ConvBn>,
        residual: bool,
    },
    Mb {
        expand: ConvBn,
        depthwise: ConvBn,
        se: Option<SqueezeExcite>,
        project: ConvBn,
        residual: bool,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    stem: [ConvBn; 2],
    encoder: Vec<Vec<Block>>,
    decoder: Vec<Vec<Block>>,
    head_hidden: (usize, usize),
    head_out: (usize, usize),
}

/// Running batch-norm statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnBuffer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Builder<'a> {
    config: &'a GeneratorConfig,
    specs: Vec<ParamSpec>,
    bn_channels: Vec<usize>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: [usize; 4]) -> usize {
        self.specs.push(ParamSpec { name, shape });
        self.specs.len() - 1
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize) -> ConvBn {
        let conv = self.param(format!("{name}.conv"), [c_out, c_in / groups, k, k]);
        let gamma = self.param(format!("{name}.bn.gamma"), [1, c_out, 1, 1]);
        let beta = self.param(format!("{name}.bn.beta"), [1, c_out, 1, 1]);
        self.bn_channels.push(c_out);
        ConvBn {
            conv,
            gamma,
            beta,
            bn: self.bn_channels.len() - 1,
        }
    }

    fn block(&mut self, name: &str, kind: BlockKind, c_in: usize, c_out: usize) -> Block {
        let residual = c_in == c_out;
        let mid = self.config.expanded(c_in);
        match kind {
            BlockKind::Fused if mid == c_in && self.config.expansion_ratio == 1.0 => Block::Fused {
                expand: self.conv_bn(&format!("{name}.fused"), c_in, c_out, 3, 1),
                project: None,
                residual,
            },
            BlockKind::Fused => Block::Fused {
                expand: self.conv_bn(&format!("{name}.fused"), c_in, mid, 3, 1),
                project: Some(self.conv_bn(&format!("{name}.project"), mid, c_out, 1, 1)),
                residual,
            },
            BlockKind::Mbconv => {
                let expand = self.conv_bn(&format!("{name}.expand"), c_in, mid, 1, 1);
                let depthwise = self.conv_bn(&format!("{name}.depthwise"), mid, mid, 3, mid);
                let se = self.config.se_width(c_in).map(|r| SqueezeExcite {
                    reduce_w: self.param(format!("{name}.se.reduce.weight"), [r, mid, 1, 1]),
                    reduce_b: self.param(format!("{name}.se.reduce.bias"), [1, r, 1, 1]),
                    expand_w: self.param(format!("{name}.se.expand.weight"), [mid, r, 1, 1]),
                    expand_b: self.param(format!("{name}.se.expand.bias"), [1, mid, 1, 1]),
                });
                let project = self.conv_bn(&format!("{name}.project"), mid, c_out, 1, 1);
                Block::Mb {
                    expand,
                    depthwise,
                    se,
                    project,
                    residual,
                }
            }
        }
    }

    fn stage(&mut self, name: &str, kind: BlockKind, repeats: usize, c_in: usize, c_out: usize) -> Vec<Block> {
        (0..repeats)
            .map(|r| {
                let cin = if r == 0 { c_in } else { c_out };
                self.block(&format!("{name}.{r}"), kind, cin, c_out)
            })
            .collect()
    }
}

fn layout(config: &GeneratorConfig) -> (Layout, Vec<ParamSpec>, Vec<usize>) {
    let mut b = Builder {
        config,
        specs: Vec::new(),
        bn_channels: Vec::new(),
    };
    let stem_c = config.stem_channels;
    let stem = [
        b.conv_bn("stem.0", 3, stem_c, 3, 1),
        b.conv_bn("stem.1", stem_c, stem_c, 3, 1),
    ];
    // level 0 is the stem; level i+1 is encoder stage i
    let level_c: Vec<usize> = std::iter::once(stem_c)
        .chain(config.stage_channels.iter().copied())
        .collect();
    let n = config.stage_channels.len();
    let encoder = (0..n)
        .map(|i| {
            b.stage(
                &format!("encoder.{i}"),
                config.stage_kind[i],
                config.stage_repeats[i],
                level_c[i],
                level_c[i + 1],
            )
        })
        .collect();
    // decoder[i] upsamples level i+1 and fuses it with level i
    let decoder: Vec<Vec<Block>> = (0..n)
        .rev()
        .map(|i| {
            b.stage(
                &format!("decoder.{i}"),
                config.stage_kind[i],
                config.stage_repeats[i],
                level_c[i + 1] + level_c[i],
                level_c[i],
            )
        })
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let head_hidden = (
        b.param("head.0.weight".into(), [config.head_channels, stem_c, 1, 1]),
        b.param("head.0.bias".into(), [1, config.head_channels, 1, 1]),
    );
    let head_out = (
        b.param(OUTPUT_WEIGHT.into(), [3, config.head_channels, 1, 1]),
        b.param("head.1.bias".into(), [1, 3, 1, 1]),
    );
    (
        Layout {
            stem,
            encoder,
            decoder,
            head_hidden,
            head_out,
        },
        b.specs,
        b.bn_channels,
    )
}

/// Generator weights, running statistics and the config they belong to.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    buffers: Vec<BnBuffer>,
    layout: Layout,
}

/// Mode-dependent normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics; deterministic and batch-independent.
    Inference,
}

/// Graph handles produced by [`Generator::forward_graph`].
pub struct ForwardPass {
    pub output: Var,
    /// One leaf per parameter, same order as [`Generator::params`].
    pub params: Vec<Var>,
    /// Batch statistics per normalization layer (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

struct Ctx<'g> {
    graph: &'g mut Graph,
    params: Vec<Var>,
    mode: Mode,
    stats: Vec<Option<BatchStats>>,
}

impl Generator {
    /// He-normal convolution weights, unit BN scale, zero biases.
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self, GeneratorError> {
        config.validate()?;
        let (layout, specs, bn_channels) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|spec| {
                let shape = spec.shape;
                if spec.name.ends_with(".gamma") {
                    Tensor::ones(shape)
                } else if spec.name.ends_with(".beta") || spec.name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    // the output layer starts near zero so the sigmoid is unsaturated
                    let gain = if spec.name == OUTPUT_WEIGHT { 0.01 } else { 1.0 };
                    let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
                    Tensor::from_shape_simple_fn(shape, || normal.sample(&mut rng))
                }
            })
            .collect();
        let buffers = bn_channels
            .iter()
            .map(|&c| BnBuffer {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect();
        Ok(Self {
            config,
            specs,
            params,
            buffers,
            layout,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BnBuffer] {
        &self.buffers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Number of learned scalars (normalization running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over parameters and running statistics (little-endian f64).
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.parameter_count() * 8);
        for p in &self.params {
            for v in p.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in &self.buffers {
            for v in b.mean.iter().chain(&b.var) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self
                .buffers
                .iter()
                .all(|b| b.mean.iter().chain(&b.var).all(|v| v.is_finite()))
    }

    pub(crate) fn from_parts(
        config: GeneratorConfig,
        params: Vec<Tensor>,
        buffers: Vec<BnBuffer>,
    ) -> Result<Self, GeneratorError> {
        let mut g = Self::build(config, 0)?;
        if params.len() != g.params.len() || buffers.len() != g.buffers.len() {
            return Err(GeneratorError::ShapeMismatch("parameter list length".into()));
        }
        for (i, (p, spec)) in params.iter().zip(&g.specs).enumerate() {
            if p.shape() != spec.shape {
                return Err(GeneratorError::ShapeMismatch(format!(
                    "parameter {i} ({}) has shape {:?}, expected {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                )));
            }
        }
        for (b, have) in buffers.iter().zip(&g.buffers) {
            if b.mean.len() != have.mean.len() || b.var.len() != have.var.len() {
                return Err(GeneratorError::ShapeMismatch("normalization buffer".into()));
            }
        }
        g.params = params;
        g.buffers = buffers;
        Ok(g)
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), GeneratorError> {
        let s = batch.shape();
        let f = self.config.grid_factor();
        if s[1] != 3 {
            return Err(GeneratorError::ShapeMismatch(format!("expected 3 input channels, got {}", s[1])));
        }
        if s[0] == 0 || s[2] == 0 || s[3] == 0 || s[2] % f != 0 || s[3] % f != 0 {
            return Err(GeneratorError::ShapeMismatch(format!(
                "input {}x{} must be non-empty multiples of {f} (pad first)",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass over a `(B, 3, H, W)` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, GeneratorError> {
        let mut graph = Graph::new();
        let pass = self.forward_graph(&mut graph, batch, Mode::Inference)?;
        Ok(graph.value(pass.output).clone())
    }

    /// Records the forward pass on `graph` for later differentiation.
    pub fn forward_graph(&self, graph: &mut Graph, batch: &Tensor, mode: Mode) -> Result<ForwardPass, GeneratorError> {
        self.check_input(batch)?;
        let params = self.params.iter().map(|p| graph.leaf(p.clone())).collect();
        let mut ctx = Ctx {
            graph,
            params,
            mode,
            stats: vec![None; self.buffers.len()],
        };
        let input = ctx.graph.leaf(batch.clone());
        let output = self.run(&mut ctx, input);
        Ok(ForwardPass {
            output,
            params: ctx.params,
            batch_stats: ctx.stats.into_iter().flatten().collect(),
        })
    }

    fn run(&self, ctx: &mut Ctx, input: Var) -> Var {
        let l = &self.layout;
        let mut x = self.conv_bn(ctx, l.stem[0], input, 1, true);
        x = self.conv_bn(ctx, l.stem[1], x, 1, true);
        let mut levels = vec![x];
        for stage in &l.encoder {
            x = ctx.graph.max_pool2(x);
            for block in stage {
                x = self.block(ctx, block, x);
            }
            levels.push(x);
        }
        for (i, stage) in l.decoder.iter().enumerate().rev() {
            let up = ctx.graph.upsample2(x);
            x = ctx.graph.concat(up, levels[i]);
            for block in stage {
                x = self.block(ctx, block, x);
            }
        }
        let (w, b) = l.head_hidden;
        x = ctx.graph.conv2d(x, ctx.params[w], Some(ctx.params[b]), 1);
        x = ctx.graph.silu(x);
        let (w, b) = l.head_out;
        x = ctx.graph.conv2d(x, ctx.params[w], Some(ctx.params[b]), 1);
        match self.config.output_activation {
            OutputActivation::Sigmoid => ctx.graph.sigmoid(x),
        }
    }

    fn conv_bn(&self, ctx: &mut Ctx, cb: ConvBn, x: Var, groups: usize, act: bool) -> Var {
        let y = ctx.graph.conv2d(x, ctx.params[cb.conv], None, groups);
        let (gamma, beta) = (ctx.params[cb.gamma], ctx.params[cb.beta]);
        let y = match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm_train(y, gamma, beta, BN_EPS);
                ctx.stats[cb.bn] = Some(stats);
                y
            }
            Mode::Inference => {
                let buf = &self.buffers[cb.bn];
                ctx.graph.batch_norm_eval(y, gamma, beta, &buf.mean, &buf.var, BN_EPS)
            }
        };
        if act {
            ctx.graph.silu(y)
        } else {
            y
        }
    }

    fn block(&self, ctx: &mut Ctx, block: &Block, x: Var) -> Var {
        match *block {
            Block::Fused {
                expand,
                project,
                residual,
            } => {
                let mut y = self.conv_bn(ctx, expand, x, 1, true);
                if let Some(p) = project {
                    y = self.conv_bn(ctx, p, y, 1, false);
                }
                if residual {
                    y = ctx.graph.add(y, x);
                }
                y
            }
            Block::Mb {
                expand,
                depthwise,
                se,
                project,
                residual,
            } => {
                let mut y = self.conv_bn(ctx, expand, x, 1, true);
                let channels = self.params[depthwise.conv].shape()[0];
                y = self.conv_bn(ctx, depthwise, y, channels, true);
                if let Some(se) = se {
                    let s = ctx.graph.global_avg_pool(y);
                    let s = ctx.graph.conv2d(s, ctx.params[se.reduce_w], Some(ctx.params[se.reduce_b]), 1);
                    let s = ctx.graph.silu(s);
                    let s = ctx.graph.conv2d(s, ctx.params[se.expand_w], Some(ctx.params[se.expand_b]), 1);
                    let s = ctx.graph.sigmoid(s);
                    y = ctx.graph.channel_scale(y, s);
                }
                y = self.conv_bn(ctx, project, y, 1, false);
                if residual {
                    y = ctx.graph.add(y, x);
                }
                y
            }
        }
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        assert_eq!(stats.len(), self.buffers.len(), "one statistic per normalization layer");
        for (buf, s) in self.buffers.iter_mut().zip(stats) {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..buf.mean.len() {
                buf.mean[c] = (1.0 - BN_MOMENTUM) * buf.mean[c] + BN_MOMENTUM * s.mean[c];
                buf.var[c] = (1.0 - BN_MOMENTUM) * buf.var[c] + BN_MOMENTUM * s.var[c] * unbias;
            }
        }
    }

    /// Pads one `(H, W, 3)` image to the grid, runs inference and crops back.
    pub fn generate(&self, image: &Array3<f64>) -> Result<Array3<f64>, GeneratorError> {
        let (padded, record) = pad_to_grid(image, self.config.grid_factor());
        let out = self.forward(&images_to_batch(&[padded])?)?;
        let img = batch_to_images(&out).pop().expect("one image");
        Ok(crop(&img, &record))
    }
}

/// Stacks `(H, W, 3)` images into a `(B, 3, H, W)` batch.
pub fn images_to_batch(images: &[Array3<f64>]) -> Result<Tensor, GeneratorError> {
    let first = images
        .first()
        .ok_or_else(|| GeneratorError::ShapeMismatch("empty batch".into()))?;
    let (h, w, c) = first.dim();
    if c != 3 {
        return Err(GeneratorError::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    if let Some(bad) = images.iter().find(|i| i.dim() != (h, w, 3)) {
        return Err(GeneratorError::ShapeMismatch(format!(
            "batch mixes {:?} and {:?}",
            (h, w, 3),
            bad.dim()
        )));
    }
    Ok(Tensor::from_shape_fn((images.len(), 3, h, w), |(b, c, y, x)| images[b][[y, x, c]]))
}

pub fn batch_to_images(batch: &Tensor) -> Vec<Array3<f64>> {
    batch
        .axis_iter(Axis(0))
        .map(|img| img.permuted_axes([1, 2, 0]).as_standard_layout().into_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_simple_fn((b, 3, h, w), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let mut c = GeneratorConfig::default();
        c.stage_repeats.pop();
        assert!(matches!(Generator::build(c, 0), Err(GeneratorError::InvalidConfig(_))));
        let mut c = GeneratorConfig::tiny();
        c.stage_repeats = vec![0];
        assert!(Generator::build(c, 0).is_err());
        let mut c = GeneratorConfig::tiny();
        c.stage_channels = vec![0];
        assert!(Generator::build(c, 0).is_err());
    }

    #[test]
    fn deterministic_init() {
        let a = Generator::build(GeneratorConfig::default(), 5).unwrap();
        let b = Generator::build(GeneratorConfig::default(), 5).unwrap();
        let c = Generator::build(GeneratorConfig::default(), 6).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn default_shape_contract() {
        let g = Generator::build(GeneratorConfig::default(), 1).unwrap();
        let out = g.forward(&random_batch(1, 64, 64, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_unaligned_input() {
        let g = Generator::build(GeneratorConfig::default(), 1).unwrap();
        assert!(matches!(
            g.forward(&random_batch(1, 36, 40, 0)),
            Err(GeneratorError::ShapeMismatch(_))
        ));
        assert!(g.forward(&Tensor::zeros((1, 2, 16, 16))).is_err());
    }

    #[test]
    fn zero_head_gives_half() {
        let mut g = Generator::build(GeneratorConfig::tiny(), 3).unwrap();
        for name in ["head.1.weight", "head.1.bias"] {
            let i = g.param_index(name).unwrap();
            g.params_mut()[i].fill(0.0);
        }
        let out = g.forward(&random_batch(2, 8, 8, 4)).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inference_is_bitwise_repeatable() {
        let g = Generator::build(GeneratorConfig::tiny(), 9).unwrap();
        let x = random_batch(2, 16, 16, 10);
        assert_eq!(g.forward(&x).unwrap(), g.forward(&x).unwrap());
    }

    #[test]
    fn generate_handles_odd_sizes() {
        let g = Generator::build(GeneratorConfig::tiny(), 0).unwrap();
        let img = Array3::from_elem((7, 9, 3), 0.3);
        assert_eq!(g.generate(&img).unwrap().dim(), (7, 9, 3));
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let mut g = Generator::build(GeneratorConfig::tiny(), 0).unwrap();
        let mut graph = Graph::new();
        let pass = g.forward_graph(&mut graph, &random_batch(2, 8, 8, 1), Mode::Train).unwrap();
        assert_eq!(pass.batch_stats.len(), g.buffers().len());
        let before = g.buffers()[0].clone();
        g.update_running_stats(&pass.batch_stats);
        assert_ne!(g.buffers()[0], before);
    }

    #[test]
    fn batch_layout_round_trip() {
        let imgs = vec![
            Array3::from_shape_fn((2, 3, 3), |(y, x, c)| (y * 9 + x * 3 + c) as f64),
            Array3::zeros((2, 3, 3)),
        ];
        let batch = images_to_batch(&imgs).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 2, 3]);
        assert_eq!(batch[[0, 2, 1, 0]], imgs[0][[1, 0, 2]]);
        assert_eq!(batch_to_images(&batch), imgs);
        assert!(images_to_batch(&[Array3::zeros((2, 2, 3)), Array3::zeros((2, 3, 3))]).is_err());
    }
}
