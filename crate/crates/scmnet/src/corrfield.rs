//! Correlation Mining Module.
//!
//! Flattened pose features F_p and style features F_s ([C, H*W] each) are
//! mean-centered per position, column-normalized, and compared with cosine
//! similarity. A temperature-softmax over the style axis turns each pose
//! position's row into an attention distribution C[i, j]; the style features
//! are then rearranged as F*_s = F_s · C^T so that position i of the output
//! aggregates style content from the positions it correlates with.

use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Result, ScmError};

/// Default softmax temperature tau; similarities are scaled by 1/tau.
pub const TEMPERATURE: f64 = 0.01;
/// Epsilon added to column norms before division.
pub const NORM_EPS: f64 = 1e-8;

/// Which feature map provides the query (row) axis of the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryAxis {
    /// Rows indexed by pose positions (default; output aligns with pose).
    Pose,
    /// Rows indexed by style positions (ablation switch).
    Style,
}

impl Default for QueryAxis {
    fn default() -> Self {
        QueryAxis::Pose
    }
}

/// Flatten [C,H,W] features to the [C, H*W] layout the module works in.
pub fn flatten_features(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 3 {
        return Err(ScmError::Shape {
            op: "flatten_features",
            detail: format!("expected [C,H,W], got {:?}", s),
        });
    }
    g.reshape(x, vec![s[0], s[1] * s[2]])
}

/// Per-position centering followed by column L2-normalization.
pub fn center_normalize(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let c = g.center_columns(x)?;
    g.normalize_columns(c, NORM_EPS)
}

/// Raw cosine similarity matrix between column-wise-normalized features:
/// sim = norm(fp)^T · norm(fs), shape [Np, Ns].
pub fn similarity(g: &mut Graph, fp: NodeId, fs: NodeId) -> Result<NodeId> {
    let a = center_normalize(g, fp)?;
    let b = center_normalize(g, fs)?;
    let at = g.transpose2d(a)?;
    g.matmul(at, b)
}

/// Build the correlation field C from flattened [C,N] feature maps.
///
/// With `QueryAxis::Pose`, C has shape [Np, Ns] and each row is a softmax
/// distribution over style positions. With `QueryAxis::Style` the roles are
/// swapped and C has shape [Ns, Np].
pub fn build_field(
    g: &mut Graph,
    fp: NodeId,
    fs: NodeId,
    axis: QueryAxis,
    tau: f64,
) -> Result<NodeId> {
    let (sp, ss) = (g.value(fp).shape().to_vec(), g.value(fs).shape().to_vec());
    if sp.len() != 2 || ss.len() != 2 || sp[0] != ss[0] {
        return Err(ScmError::Shape {
            op: "build_field",
            detail: format!("pose {:?} style {:?}", sp, ss),
        });
    }
    if !(tau > 0.0) {
        return Err(ScmError::Config(format!("temperature must be positive, got {}", tau)));
    }
    let sim = match axis {
        QueryAxis::Pose => similarity(g, fp, fs)?,
        QueryAxis::Style => similarity(g, fs, fp)?,
    };
    let scaled = g.scale(sim, 1.0 / tau)?;
    g.softmax(scaled, 1)
}

/// Rearranged style features F*_s = F_s · C^T, shape [C, Np].
///
/// For `QueryAxis::Style` the field rows already index style positions, so
/// the matching aggregation is F_s · C (column j of C weights how much style
/// position i attends to pose position j).
pub fn rearrange(g: &mut Graph, fs: NodeId, field: NodeId, axis: QueryAxis) -> Result<NodeId> {
    match axis {
        QueryAxis::Pose => {
            let ct = g.transpose2d(field)?;
            g.matmul(fs, ct)
        }
        QueryAxis::Style => g.matmul(fs, field),
    }
}

/// Number of fixed sinusoidal coordinate channels appended to both sides
/// of the similarity computation.
pub const POSITION_CHANNELS: usize = 8;

/// Magnitude of the positional channels relative to the content features.
pub const POSITION_SCALE: f64 = 1.0;

/// Fixed positional channels: two sine/cosine frequencies per axis, with
/// coordinates compressed to [0, 0.5) so the lowest frequency is monotone
/// in spatial distance (no wrap-around aliasing). Giving both feature maps
/// the same positional signature biases the initial correlation field
/// toward the identity, which breaks the correspondence-learning
/// degeneracy: aligned training pairs get a near-correct field before any
/// content matching has been learned, so the generator receives meaningful
/// features from step 0 and gradients can refine the matching.
pub fn positional_channels(h: usize, w: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(&[POSITION_CHANNELS, h, w]);
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let xn = (x as f64 + 0.5) / w as f64 * 0.5;
            let yn = (y as f64 + 0.5) / h as f64 * 0.5;
            let p = y * w + x;
            let vals = [
                (std::f64::consts::TAU * xn).sin(),
                (std::f64::consts::TAU * xn).cos(),
                (std::f64::consts::TAU * yn).sin(),
                (std::f64::consts::TAU * yn).cos(),
                (2.0 * std::f64::consts::TAU * xn).sin(),
                (2.0 * std::f64::consts::TAU * xn).cos(),
                (2.0 * std::f64::consts::TAU * yn).sin(),
                (2.0 * std::f64::consts::TAU * yn).cos(),
            ];
            for (c, v) in vals.into_iter().enumerate() {
                t.data_mut()[c * hw + p] = scale * v;
            }
        }
    }
    t
}

/// Like [`correlate`], but the similarity is computed on features augmented
/// with the shared positional channels; the rearrangement is still applied
/// to the bare style features.
pub fn correlate_positional(
    g: &mut Graph,
    pose_feat: NodeId,
    style_feat: NodeId,
    axis: QueryAxis,
    tau: f64,
) -> Result<(NodeId, NodeId)> {
    let shape = g.value(pose_feat).shape().to_vec();
    if shape.len() != 3 {
        return Err(ScmError::Shape {
            op: "correlate_positional",
            detail: format!("expected [C,H,W] pose features, got {:?}", shape),
        });
    }
    let coords = g.constant(positional_channels(shape[1], shape[2], POSITION_SCALE));
    let fp_aug = g.concat(0, &[pose_feat, coords])?;
    let fs_aug = g.concat(0, &[style_feat, coords])?;
    let fp = flatten_features(g, fp_aug)?;
    let fsa = flatten_features(g, fs_aug)?;
    let fs = flatten_features(g, style_feat)?;
    let field = build_field(g, fp, fsa, axis, tau)?;
    let rearranged = rearrange(g, fs, field, axis)?;
    let out = g.reshape(rearranged, shape)?;
    Ok((out, field))
}

/// Full module: [C,H,W] pose/style features in, rearranged [C,H,W] style
/// features and the field out.
pub fn correlate(
    g: &mut Graph,
    pose_feat: NodeId,
    style_feat: NodeId,
    axis: QueryAxis,
    tau: f64,
) -> Result<(NodeId, NodeId)> {
    let shape = g.value(pose_feat).shape().to_vec();
    let fp = flatten_features(g, pose_feat)?;
    let fs = flatten_features(g, style_feat)?;
    let field = build_field(g, fp, fs, axis, tau)?;
    let rearranged = rearrange(g, fs, field, axis)?;
    let out = g.reshape(rearranged, shape)?;
    Ok((out, field))
}

/// Export one query row of the field as a [H,W] attention map for debugging.
pub fn field_row(field: &Tensor, row: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let s = field.shape();
    if s.len() != 2 || row >= s[0] || s[1] != h * w {
        return Err(ScmError::Shape {
            op: "field_row",
            detail: format!("field {:?}, row {}, map {}x{}", s, row, h, w),
        });
    }
    Ok(field.data()[row * s[1]..(row + 1) * s[1]].to_vec())
}
