//! Pose encoder, Decomposed Style Encoder (DSE), and Cross Channel Fusion.
//!
//! The pose branch downsamples skeleton heatmaps into structure-aligned
//! features F_p. The style branch splits the image into per-region parts,
//! runs a single shared encoder over each, and concatenates the partial
//! features channel-wise; CCF then mixes channels per position so nothing
//! downstream depends on the fixed concatenation order.

use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Result, ScmError};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Channels of F_p and F_s at the correlation stage.
pub const FEATURE_CHANNELS: usize = 64;
/// Channels each region contributes before concatenation.
pub const REGION_CHANNELS: usize = 8;

/// Learnable conv + bias with fixed stride/pad.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

/// Node ids of one layer's parameters inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: NodeId,
    pub bias: NodeId,
    pub stride: usize,
    pub pad: usize,
}

/// Registry of (parameter name, graph leaf) pairs created while binding
/// modules into a graph; the trainer reads gradients back through it.
#[derive(Default)]
pub struct ParamBindings {
    pub entries: Vec<(String, NodeId)>,
}

impl ConvLayer {
    /// Kaiming-style init: weights ~ N(0, sqrt(2 / fan_in)), zero bias.
    pub fn init(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            weight: Tensor::new(vec![cout, cin, k, k], data).unwrap(),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        name: &str,
        trainable: bool,
        reg: Option<&mut ParamBindings>,
    ) -> BoundConv {
        let weight = g.leaf(self.weight.clone(), trainable);
        let bias = g.leaf(self.bias.clone(), trainable);
        if let Some(reg) = reg {
            reg.entries.push((format!("{}.weight", name), weight));
            reg.entries.push((format!("{}.bias", name), bias));
        }
        BoundConv { weight, bias, stride: self.stride, pad: self.pad }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{}.weight", prefix), &self.weight);
        f(format!("{}.bias", prefix), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{}.weight", prefix), &mut self.weight);
        f(format!("{}.bias", prefix), &mut self.bias);
    }
}

impl BoundConv {
    /// conv -> leaky relu
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.conv2d(x, self.weight, self.bias, self.stride, self.pad)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    /// conv only, no activation
    pub fn forward_linear(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, self.weight, self.bias, self.stride, self.pad)
    }
}

/// Three conv-leakyrelu blocks with strides 1,2,2; spatial dims shrink x4.
#[derive(Debug, Clone)]
pub struct DownEncoder {
    pub blocks: Vec<ConvLayer>,
}

pub struct BoundDownEncoder {
    pub blocks: Vec<BoundConv>,
}

impl DownEncoder {
    pub fn init(rng: &mut ChaCha8Rng, cin: usize, widths: [usize; 3]) -> Self {
        let blocks = vec![
            ConvLayer::init(rng, cin, widths[0], 3, 1, 1),
            ConvLayer::init(rng, widths[0], widths[1], 3, 2, 1),
            ConvLayer::init(rng, widths[1], widths[2], 3, 2, 1),
        ];
        DownEncoder { blocks }
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        name: &str,
        trainable: bool,
        mut reg: Option<&mut ParamBindings>,
    ) -> BoundDownEncoder {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(g, &format!("{}.{}", name, i), trainable, reg.as_deref_mut()))
            .collect();
        BoundDownEncoder { blocks }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{}.{}", prefix, i), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{}.{}", prefix, i), f);
        }
    }
}

impl BoundDownEncoder {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Pose encoder: skeleton heatmaps [14,H,W] -> F_p [64,H/4,W/4].
pub fn pose_encoder(rng: &mut ChaCha8Rng, joints: usize) -> DownEncoder {
    DownEncoder::init(rng, joints, [32, 64, FEATURE_CHANNELS])
}

/// Channels of each region block that carry the blur-downsampled masked
/// image itself (an explicit color pathway); the rest are learned.
pub const COLOR_SKIP_CHANNELS: usize = 3;

/// Shared per-region style encoder: masked part [3,H,W] ->
/// [REGION_CHANNELS - COLOR_SKIP_CHANNELS, H/4, W/4]; the color-skip
/// channels are appended by `encode_style_parts`.
pub fn style_encoder(rng: &mut ChaCha8Rng) -> DownEncoder {
    DownEncoder::init(rng, 3, [32, 64, REGION_CHANNELS - COLOR_SKIP_CHANNELS])
}

/// Global encoder for the no-DSE ablation: image [3,H,W] -> [64,H/4,W/4].
pub fn global_encoder(rng: &mut ChaCha8Rng) -> DownEncoder {
    DownEncoder::init(rng, 3, [32, 64, FEATURE_CHANNELS])
}

/// Cross Channel Fusion: two 1x1 conv blocks, purely per-position mixing.
#[derive(Debug, Clone)]
pub struct CcfModule {
    pub blocks: Vec<ConvLayer>,
}

pub struct BoundCcf {
    pub blocks: Vec<BoundConv>,
}

impl CcfModule {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = vec![
            ConvLayer::init(rng, FEATURE_CHANNELS, FEATURE_CHANNELS, 1, 1, 0),
            ConvLayer::init(rng, FEATURE_CHANNELS, FEATURE_CHANNELS, 1, 1, 0),
        ];
        // Identity-residual init: start as (almost) a pass-through so the
        // per-region channel semantics survive fusion from step 0; the
        // random component is scaled down to act as a perturbation.
        for b in &mut blocks {
            for w in b.weight.data_mut() {
                *w *= 0.1;
            }
            for c in 0..FEATURE_CHANNELS {
                b.weight.data_mut()[c * FEATURE_CHANNELS + c] += 1.0;
            }
        }
        CcfModule { blocks }
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        name: &str,
        trainable: bool,
        mut reg: Option<&mut ParamBindings>,
    ) -> BoundCcf {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(g, &format!("{}.{}", name, i), trainable, reg.as_deref_mut()))
            .collect();
        BoundCcf { blocks }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{}.{}", prefix, i), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{}.{}", prefix, i), f);
        }
    }
}

impl BoundCcf {
    /// `enabled = false` is the w/o-CCF ablation: identity map.
    pub fn forward(&self, g: &mut Graph, x: NodeId, enabled: bool) -> Result<NodeId> {
        if !enabled {
            return Ok(x);
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Split an image into per-region masked parts: part_r = I * S_r,
/// broadcast over RGB. The parts sum back to I exactly.
pub fn decompose(g: &mut Graph, image: NodeId, mask: &Tensor) -> Result<Vec<NodeId>> {
    let si = g.value(image).shape().to_vec();
    let sm = mask.shape().to_vec();
    if si.len() != 3 || si[0] != 3 || sm.len() != 3 || si[1] != sm[1] || si[2] != sm[2] {
        return Err(ScmError::Shape {
            op: "decompose",
            detail: format!("image {:?} mask {:?}", si, sm),
        });
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ScmError::Config("decompose requires a binary mask".into()));
    }
    let regions = sm[0];
    let hw = sm[1] * sm[2];
    let mut parts = Vec::with_capacity(regions);
    for r in 0..regions {
        let plane = &mask.data()[r * hw..(r + 1) * hw];
        let mut m3 = Vec::with_capacity(3 * hw);
        for _ in 0..3 {
            m3.extend_from_slice(plane);
        }
        let mask3 = g.constant(Tensor::new(vec![3, sm[1], sm[2]], m3)?);
        parts.push(g.mul(image, mask3)?);
    }
    Ok(parts)
}

/// One fixed 3x3 box-blur stride-2 conv over `ch` channels (no channel
/// mixing, weights 1/9, zero bias, pad 1). Frozen by construction.
fn box_blur_stride2(g: &mut Graph, x: NodeId, ch: usize) -> Result<NodeId> {
    let mut w = Tensor::zeros(&[ch, ch, 3, 3]);
    for c in 0..ch {
        for i in 0..9 {
            w.data_mut()[(c * ch + c) * 9 + i] = 1.0 / 9.0;
        }
    }
    let wn = g.constant(w);
    let bn = g.constant(Tensor::zeros(&[ch]));
    g.conv2d(x, wn, bn, 2, 1)
}

/// The same two-pass box-blur pyramid applied to a raw mask plane on the
/// host side; used to normalize the color skip for partial coverage.
fn blur_coverage(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let pass = |src: &[f64], h: usize, w: usize| -> Vec<f64> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix = (2 * ox + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += src[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[oy * ow + ox] = acc / 9.0;
            }
        }
        out
    };
    let mid = pass(plane, h, w);
    pass(&mid, h / 2, w / 2)
}

/// Blur-downsample a masked part to feature resolution and divide out the
/// region's coverage so interior values equal the region color; positions
/// with low coverage are zeroed. The divisor depends only on the mask, so
/// it enters the graph as a constant and the skip stays differentiable in
/// the image.
fn color_skip(g: &mut Graph, part: NodeId, mask_plane: &[f64], h: usize, w: usize) -> Result<NodeId> {
    let b1 = box_blur_stride2(g, part, 3)?;
    let b2 = box_blur_stride2(g, b1, 3)?;
    let cov = blur_coverage(mask_plane, h, w);
    let (fh, fw) = (h / 4, w / 4);
    let mut inv = Tensor::zeros(&[3, fh, fw]);
    for p in 0..fh * fw {
        let v = if cov[p] > 0.25 { 1.0 / cov[p] } else { 0.0 };
        for c in 0..3 {
            inv.data_mut()[c * fh * fw + p] = v;
        }
    }
    let invn = g.constant(inv);
    g.mul(b2, invn)
}

/// Run the shared style encoder over all parts and concatenate the
/// region features channel-wise in the frozen region order. Each region
/// block is the encoder's learned channels plus the color-skip channels of
/// the same masked part.
pub fn encode_style_parts(
    g: &mut Graph,
    encoder: &BoundDownEncoder,
    parts: &[NodeId],
    mask: &Tensor,
) -> Result<NodeId> {
    let sm = mask.shape().to_vec();
    if sm.len() != 3 || sm[0] != parts.len() {
        return Err(ScmError::Shape {
            op: "encode_style_parts",
            detail: format!("mask {:?} for {} parts", sm, parts.len()),
        });
    }
    let (h, w) = (sm[1], sm[2]);
    let hw = h * w;
    let mut feats = Vec::with_capacity(2 * parts.len());
    for (r, &p) in parts.iter().enumerate() {
        feats.push(encoder.forward(g, p)?);
        feats.push(color_skip(g, p, &mask.data()[r * hw..(r + 1) * hw], h, w)?);
    }
    g.concat(0, &feats)
}
