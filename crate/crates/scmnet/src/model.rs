//! Full network assembly: encoders, correlation mining, generator, and
//! discriminators, with the ablation switches and a parameter-traversal
//! interface used by the optimizer and checkpointing.

use crate::corrfield::{correlate_positional, QueryAxis, TEMPERATURE};
use crate::encoders::{
    decompose, encode_style_parts, global_encoder, pose_encoder, style_encoder, BoundCcf,
    BoundDownEncoder, CcfModule, DownEncoder, ParamBindings,
};
use crate::synthfig::{NUM_JOINTS, NUM_REGIONS};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::translator::{BoundDiscriminator, BoundGenerator, Discriminator, Generator};
use crate::{Result, ScmError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture/pipeline switches shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_res: usize,
    pub feature_res: usize,
    /// Replace the decomposed style encoder with a single global encoder.
    pub no_dse: bool,
    /// Make cross channel fusion an identity map.
    pub no_ccf: bool,
    /// Correlation softmax temperature.
    pub tau: f64,
    /// Which side of the correlation field holds the query axis.
    pub query_axis: QueryAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_res: 64,
            feature_res: 16,
            no_dse: false,
            no_ccf: false,
            tau: TEMPERATURE,
            query_axis: QueryAxis::Pose,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_res != 4 * self.feature_res || self.feature_res == 0 {
            return Err(ScmError::Config(format!(
                "image_res must be 4 x feature_res, got {} and {}",
                self.image_res, self.feature_res
            )));
        }
        if !(self.tau > 0.0) {
            return Err(ScmError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// All learnable modules. The global encoder is always present (and
/// checkpointed) so ablation runs share the checkpoint format.
#[derive(Debug, Clone)]
pub struct ScmModel {
    pub pose_enc: DownEncoder,
    pub style_enc: DownEncoder,
    pub global_enc: DownEncoder,
    pub ccf: CcfModule,
    pub generator: Generator,
    pub d_style: Discriminator,
    pub d_pose: Discriminator,
}

impl ScmModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScmModel {
            pose_enc: pose_encoder(&mut rng, NUM_JOINTS),
            style_enc: style_encoder(&mut rng),
            global_enc: global_encoder(&mut rng),
            ccf: CcfModule::init(&mut rng),
            generator: Generator::init(&mut rng),
            d_style: Discriminator::style(&mut rng),
            d_pose: Discriminator::pose(&mut rng, NUM_JOINTS),
        }
    }

    /// Visit every parameter tensor with its stable path name.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.pose_enc.visit("pose_enc", f);
        self.style_enc.visit("style_enc", f);
        self.global_enc.visit("global_enc", f);
        self.ccf.visit("ccf", f);
        self.generator.visit("gen", f);
        self.d_style.visit("d_s", f);
        self.d_pose.visit("d_p", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.pose_enc.visit_mut("pose_enc", f);
        self.style_enc.visit_mut("style_enc", f);
        self.global_enc.visit_mut("global_enc", f);
        self.ccf.visit_mut("ccf", f);
        self.generator.visit_mut("gen", f);
        self.d_style.visit_mut("d_s", f);
        self.d_pose.visit_mut("d_p", f);
    }

    /// Bind the generator-side modules (everything updated by the G-step).
    pub fn bind_generator_side(
        &self,
        g: &mut Graph,
        trainable: bool,
        mut reg: Option<&mut ParamBindings>,
    ) -> BoundGeneratorSide {
        BoundGeneratorSide {
            pose_enc: self.pose_enc.bind(g, "pose_enc", trainable, reg.as_deref_mut()),
            style_enc: self.style_enc.bind(g, "style_enc", trainable, reg.as_deref_mut()),
            global_enc: self.global_enc.bind(g, "global_enc", trainable, reg.as_deref_mut()),
            ccf: self.ccf.bind(g, "ccf", trainable, reg.as_deref_mut()),
            generator: self.generator.bind(g, "gen", trainable, reg),
        }
    }

    /// Bind both discriminators (everything updated by the D-step).
    pub fn bind_discriminators(
        &self,
        g: &mut Graph,
        trainable: bool,
        mut reg: Option<&mut ParamBindings>,
    ) -> BoundDiscriminators {
        BoundDiscriminators {
            d_style: self.d_style.bind(g, "d_s", trainable, reg.as_deref_mut()),
            d_pose: self.d_pose.bind(g, "d_p", trainable, reg),
        }
    }
}

pub struct BoundGeneratorSide {
    pub pose_enc: BoundDownEncoder,
    pub style_enc: BoundDownEncoder,
    pub global_enc: BoundDownEncoder,
    pub ccf: BoundCcf,
    pub generator: BoundGenerator,
}

pub struct BoundDiscriminators {
    pub d_style: BoundDiscriminator,
    pub d_pose: BoundDiscriminator,
}

/// Intermediate node handles of one generator forward pass.
pub struct PipelineOut {
    /// Generated image, [3, H, W] in (0,1).
    pub image: NodeId,
    /// Correlation field over flattened feature positions.
    pub field: NodeId,
    /// Post-CCF style features (pre-rearrangement).
    pub style_features: NodeId,
    /// Pose features.
    pub pose_features: NodeId,
}

impl BoundGeneratorSide {
    /// Style branch up to (but excluding) CCF: [64, H/4, W/4].
    /// With `no_dse` this is the global encoder over the unmasked image.
    pub fn style_pre_ccf(
        &self,
        g: &mut Graph,
        image: NodeId,
        mask: &Tensor,
        cfg: &ModelConfig,
    ) -> Result<NodeId> {
        if cfg.no_dse {
            self.global_enc.forward(g, image)
        } else {
            let parts = decompose(g, image, mask)?;
            if parts.len() != NUM_REGIONS {
                return Err(ScmError::Shape {
                    op: "style_pre_ccf",
                    detail: format!("expected {} regions, got {}", NUM_REGIONS, parts.len()),
                });
            }
            encode_style_parts(g, &self.style_enc, &parts, mask)
        }
    }

    /// Full pipeline from raw tensors to generated image.
    pub fn forward(
        &self,
        g: &mut Graph,
        style_image: &Tensor,
        style_mask: &Tensor,
        target_skeleton: &Tensor,
        cfg: &ModelConfig,
    ) -> Result<PipelineOut> {
        cfg.validate()?;
        let img = g.constant(style_image.clone());
        let skel = g.constant(target_skeleton.clone());
        let pre = self.style_pre_ccf(g, img, style_mask, cfg)?;
        let style_features = self.ccf.forward(g, pre, !cfg.no_ccf)?;
        self.forward_from_style(g, style_features, skel, cfg)
    }

    /// Resume the pipeline from already-computed pre-CCF style features
    /// (used by attribute editing, which splices feature blocks first).
    pub fn forward_from_pre_ccf(
        &self,
        g: &mut Graph,
        pre_ccf: NodeId,
        target_skeleton: &Tensor,
        cfg: &ModelConfig,
    ) -> Result<PipelineOut> {
        let skel = g.constant(target_skeleton.clone());
        let style_features = self.ccf.forward(g, pre_ccf, !cfg.no_ccf)?;
        self.forward_from_style(g, style_features, skel, cfg)
    }

    fn forward_from_style(
        &self,
        g: &mut Graph,
        style_features: NodeId,
        skeleton: NodeId,
        cfg: &ModelConfig,
    ) -> Result<PipelineOut> {
        let pose_features = self.pose_enc.forward(g, skeleton)?;
        let (rearranged, field) =
            correlate_positional(g, pose_features, style_features, cfg.query_axis, cfg.tau)?;
        let image = self.generator.forward(g, rearranged)?;
        Ok(PipelineOut { image, field, style_features, pose_features })
    }
}
