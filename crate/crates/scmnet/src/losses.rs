//! Training objectives: adversarial, reconstruction, perceptual, style
//! (Gram), and the body-structure-retaining graph loss, plus their weighted
//! total.
//!
//! Perceptual and style losses run through a frozen random feature pyramid
//! with a fixed seed instead of a pretrained backbone; the seed travels with
//! checkpoints so loss values are reproducible. The body graph pools the
//! pyramid's deepest stage per region and compares node features and their
//! pairwise cosine adjacency between real and generated images.

use crate::encoders::{BoundConv, ConvLayer, ParamBindings};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Result, ScmError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Epsilon for adjacency cosine normalization.
const COSINE_EPS: f64 = 1e-8;

/// Gain applied to the frozen pyramid's Kaiming init. The style loss sums
/// entrywise L1 norms of Gram differences and the graph loss sums node L1
/// differences; at unit gain those sums are orders of magnitude larger than
/// the mean-abs reconstruction term and starve it of gradient. Stage-l
/// activations scale with gain^l (leaky-relu is positively homogeneous), so
/// a sub-unit gain rebalances the weighted objective without touching the
/// loss formulas or their weights.
const PYRAMID_GAIN: f64 = 0.2;

/// Weights of the total objective. Defaults follow the reference setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub rec: f64,
    pub perc: f64,
    pub style: f64,
    pub graph: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { adv: 5.0, rec: 1.0, perc: 1.0, style: 150.0, graph: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.adv, self.rec, self.perc, self.style, self.graph];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ScmError::Config(format!("loss weights must be non-negative: {:?}", self)));
        }
        Ok(())
    }
}

/// Frozen 3-stage random conv pyramid, widths 16/32/64, stride 2 per stage.
/// Stage 0 is a 1x1 stride-2 projection so that its Gram statistics are
/// exactly blind to 2x2-block rearrangements; stages 1-2 mix spatially.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<ConvLayer>,
    pub seed: u64,
}

pub struct BoundPyramid {
    stages: Vec<BoundConv>,
}

impl FeaturePyramid {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = vec![
            ConvLayer::init(&mut rng, 3, 16, 1, 2, 0),
            ConvLayer::init(&mut rng, 16, 32, 3, 2, 1),
            ConvLayer::init(&mut rng, 32, 64, 3, 2, 1),
        ];
        for s in &mut stages {
            for w in s.weight.data_mut() {
                *w *= PYRAMID_GAIN;
            }
        }
        FeaturePyramid { stages, seed }
    }

    /// Always bound non-trainable: the pyramid is frozen by construction.
    pub fn bind(&self, g: &mut Graph) -> BoundPyramid {
        let mut reg = ParamBindings::default();
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.bind(g, &format!("pyramid.{}", i), false, Some(&mut reg)))
            .collect();
        let _ = reg;
        BoundPyramid { stages }
    }
}

impl BoundPyramid {
    /// Activations of all three stages for a [3,H,W] image.
    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = image;
        for s in &self.stages {
            h = s.forward(g, h)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Reconstruction loss: mean absolute pixel difference.
pub fn l_rec(g: &mut Graph, fake: NodeId, real: NodeId) -> Result<NodeId> {
    let d = g.sub(fake, real)?;
    g.mean_abs(d)
}

/// Perceptual loss: sum over stages of mean-abs activation differences.
pub fn l_perc(g: &mut Graph, pyr: &BoundPyramid, fake: NodeId, real: NodeId) -> Result<NodeId> {
    let ff = pyr.forward(g, fake)?;
    let fr = pyr.forward(g, real)?;
    let mut total = None;
    for (a, b) in ff.into_iter().zip(fr) {
        let d = g.sub(a, b)?;
        let m = g.mean_abs(d)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.unwrap())
}

/// Gram matrix of a [C,H,W] feature map: A·Aᵀ / (C·H·W).
pub fn gram(g: &mut Graph, feat: NodeId) -> Result<NodeId> {
    let s = g.value(feat).shape().to_vec();
    if s.len() != 3 {
        return Err(ScmError::Shape { op: "gram", detail: format!("expected [C,H,W], got {:?}", s) });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let a = g.reshape(feat, vec![c, h * w])?;
    let at = g.transpose2d(a)?;
    let aat = g.matmul(a, at)?;
    g.scale(aat, 1.0 / (c * h * w) as f64)
}

/// Style loss: sum over stages of L1 distance between Gram matrices.
pub fn l_style(g: &mut Graph, pyr: &BoundPyramid, fake: NodeId, real: NodeId) -> Result<NodeId> {
    let ff = pyr.forward(g, fake)?;
    let fr = pyr.forward(g, real)?;
    let mut total = None;
    for (a, b) in ff.into_iter().zip(fr) {
        let ga = gram(g, a)?;
        let gb = gram(g, b)?;
        let d = g.sub(ga, gb)?;
        let n = g.abs_sum(d)?;
        total = Some(match total {
            None => n,
            Some(t) => g.add(t, n)?,
        });
    }
    Ok(total.unwrap())
}

/// Max-pool a binary region mask down by an integer factor. A coarse cell
/// is in-region when any of its fine cells is; regions may overlap after
/// pooling, which region-wise averaging tolerates.
pub fn downsample_mask_max(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 3 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(ScmError::Shape {
            op: "downsample_mask_max",
            detail: format!("mask {:?} factor {}", s, factor),
        });
    }
    let (r, h, w) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[r, ho, wo]);
    for reg in 0..r {
        for y in 0..ho {
            for x in 0..wo {
                let mut v: f64 = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        v = v.max(mask.data()[(reg * h + y * factor + dy) * w + x * factor + dx]);
                    }
                }
                out.data_mut()[(reg * ho + y) * wo + x] = v;
            }
        }
    }
    Ok(out)
}

/// Body graph of an image: per-region pooled deep features and their
/// pairwise cosine adjacency (zero rows/cols for empty regions).
pub struct BodyGraph {
    /// [R, C] node feature matrix.
    pub nodes: NodeId,
    /// [R, R] cosine adjacency.
    pub adjacency: NodeId,
}

/// `mask` must already be at image resolution; it is max-pooled to the
/// deepest pyramid stage (factor 8) internally.
pub fn build_body_graph(
    g: &mut Graph,
    pyr: &BoundPyramid,
    image: NodeId,
    mask: &Tensor,
) -> Result<BodyGraph> {
    let feats = pyr.forward(g, image)?;
    let deep = *feats.last().unwrap();
    let fs = g.value(deep).shape().to_vec();
    let factor = mask.shape()[1] / fs[1];
    let small = downsample_mask_max(mask, factor)?;
    let mask_node = g.constant(small);
    let nodes = g.region_avg_pool(deep, mask_node)?;
    // cosine adjacency: L2-normalize node rows, then inner products.
    // Empty regions pool to zero vectors, which normalize to zero and
    // yield zero adjacency rows/cols.
    let nt = g.transpose2d(nodes)?;
    let nn = g.normalize_columns(nt, COSINE_EPS)?;
    let nnt = g.transpose2d(nn)?;
    let adjacency = g.matmul(nnt, nn)?;
    Ok(BodyGraph { nodes, adjacency })
}

/// Body-structure-retaining loss: L1 between the two images' graphs built
/// under the same parsing mask. `adj_weight` re-weights the adjacency term
/// against the node term (1.0 = the default equal weighting).
pub fn l_bsr(
    g: &mut Graph,
    pyr: &BoundPyramid,
    fake: NodeId,
    real: NodeId,
    mask: &Tensor,
    adj_weight: f64,
) -> Result<NodeId> {
    let gf = build_body_graph(g, pyr, fake, mask)?;
    let gr = build_body_graph(g, pyr, real, mask)?;
    let dn = g.sub(gf.nodes, gr.nodes)?;
    let ln = g.abs_sum(dn)?;
    let da = g.sub(gf.adjacency, gr.adjacency)?;
    let la = g.abs_sum(da)?;
    let la = g.scale(la, adj_weight)?;
    g.add(ln, la)
}

/// Non-saturating generator adversarial loss from fake patch logits:
/// −mean[log D_s(Î)] − mean[log D_p(Î,P)].
pub fn l_adv_g(g: &mut Graph, ds_fake: NodeId, dp_fake: NodeId) -> Result<NodeId> {
    let a = g.bce_with_logits(ds_fake, 1.0)?;
    let b = g.bce_with_logits(dp_fake, 1.0)?;
    g.add(a, b)
}

/// Discriminator loss over real and fake patch logits of both critics.
pub fn l_adv_d(
    g: &mut Graph,
    ds_real: NodeId,
    dp_real: NodeId,
    ds_fake: NodeId,
    dp_fake: NodeId,
) -> Result<NodeId> {
    let a = g.bce_with_logits(ds_real, 1.0)?;
    let b = g.bce_with_logits(dp_real, 1.0)?;
    let c = g.bce_with_logits(ds_fake, 0.0)?;
    let d = g.bce_with_logits(dp_fake, 0.0)?;
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    g.add(ab, cd)
}

/// Weighted total generator objective.
pub fn l_total(
    g: &mut Graph,
    adv: NodeId,
    rec: NodeId,
    perc: NodeId,
    style: NodeId,
    graph: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    let mut total = g.scale(adv, w.adv)?;
    for (term, weight) in [(rec, w.rec), (perc, w.perc), (style, w.style), (graph, w.graph)] {
        let s = g.scale(term, weight)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}
