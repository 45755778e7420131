//! Self-supervised training loop: single-image reconstruction with
//! alternating discriminator/generator updates, Adam, checkpointing, and
//! pixel-space evaluation metrics.
//!
//! Each step builds one graph holding the full pipeline for a batch. The
//! discriminator loss sees the generated image detached (as a constant), so
//! its backward pass leaves generator-side gradients untouched; the
//! generator loss flows through the live image node while discriminator
//! updates are simply not applied from it. Both updates therefore use the
//! parameter values from the start of the step.

use crate::corrfield::QueryAxis;
use crate::encoders::ParamBindings;
use crate::losses::{
    l_adv_d, l_adv_g, l_bsr, l_perc, l_rec, l_style, l_total, FeaturePyramid, LossWeights,
};
use crate::model::{ModelConfig, ScmModel};
use crate::synthfig::{perturb_pose, render_at, sample_seed, FigureSample, REGION_NAMES};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Result, ScmError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SCMC";
const CHECKPOINT_VERSION: u16 = 1;
pub const ADAM_EPS: f64 = 1e-8;

/// Everything a run needs to be reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weights: LossWeights,
    pub no_dse: bool,
    pub no_ccf: bool,
    pub no_bsr: bool,
    pub augment_pose: bool,
    pub seed: u64,
    pub feature_res: usize,
    pub image_res: usize,
    pub tau: f64,
    /// Re-weight of the adjacency term inside the body-graph loss.
    pub adj_weight: f64,
    /// Global L2 gradient clip per parameter group; 0 disables.
    pub grad_clip: f64,
    /// Ablation switch for the correlation field's query axis.
    pub style_as_query: bool,
    /// Seed of the frozen feature pyramid.
    pub pyramid_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            lr: 2e-4,
            betas: (0.5, 0.999),
            weights: LossWeights::default(),
            no_dse: false,
            no_ccf: false,
            no_bsr: false,
            augment_pose: true,
            seed: 0,
            feature_res: 16,
            image_res: 64,
            tau: 0.1,
            adj_weight: 1.0,
            grad_clip: 10.0,
            style_as_query: false,
            pyramid_seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(ScmError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(ScmError::Config("batch must be >= 1".into()));
        }
        self.weights.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_res: self.image_res,
            feature_res: self.feature_res,
            no_dse: self.no_dse,
            no_ccf: self.no_ccf,
            tau: self.tau,
            query_axis: if self.style_as_query { QueryAxis::Style } else { QueryAxis::Pose },
        }
    }

    /// Effective loss weights after ablation flags.
    fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.no_bsr {
            w.graph = 0.0;
        }
        w
    }

    /// Flat key=value serialization, used by checkpoints and config files.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{} = {}\n", k, v));
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("beta1", self.betas.0.to_string());
        kv("beta2", self.betas.1.to_string());
        kv("w_adv", self.weights.adv.to_string());
        kv("w_rec", self.weights.rec.to_string());
        kv("w_perc", self.weights.perc.to_string());
        kv("w_style", self.weights.style.to_string());
        kv("w_graph", self.weights.graph.to_string());
        kv("no_dse", self.no_dse.to_string());
        kv("no_ccf", self.no_ccf.to_string());
        kv("no_bsr", self.no_bsr.to_string());
        kv("augment_pose", self.augment_pose.to_string());
        kv("seed", self.seed.to_string());
        kv("feature_res", self.feature_res.to_string());
        kv("image_res", self.image_res.to_string());
        kv("tau", self.tau.to_string());
        kv("adj_weight", self.adj_weight.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("style_as_query", self.style_as_query.to_string());
        kv("pyramid_seed", self.pyramid_seed.to_string());
        s
    }

    /// Parse the key=value form; `#` starts a comment, unknown keys error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ScmError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad =
                |e: &dyn std::fmt::Display| ScmError::Config(format!("key {}: {}", k, e));
            match k {
                "steps" => cfg.steps = v.parse().map_err(|e| bad(&e))?,
                "batch" => cfg.batch = v.parse().map_err(|e| bad(&e))?,
                "lr" => cfg.lr = v.parse().map_err(|e| bad(&e))?,
                "beta1" => cfg.betas.0 = v.parse().map_err(|e| bad(&e))?,
                "beta2" => cfg.betas.1 = v.parse().map_err(|e| bad(&e))?,
                "w_adv" => cfg.weights.adv = v.parse().map_err(|e| bad(&e))?,
                "w_rec" => cfg.weights.rec = v.parse().map_err(|e| bad(&e))?,
                "w_perc" => cfg.weights.perc = v.parse().map_err(|e| bad(&e))?,
                "w_style" => cfg.weights.style = v.parse().map_err(|e| bad(&e))?,
                "w_graph" => cfg.weights.graph = v.parse().map_err(|e| bad(&e))?,
                "no_dse" => cfg.no_dse = v.parse().map_err(|e| bad(&e))?,
                "no_ccf" => cfg.no_ccf = v.parse().map_err(|e| bad(&e))?,
                "no_bsr" => cfg.no_bsr = v.parse().map_err(|e| bad(&e))?,
                "augment_pose" => cfg.augment_pose = v.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = v.parse().map_err(|e| bad(&e))?,
                "feature_res" => cfg.feature_res = v.parse().map_err(|e| bad(&e))?,
                "image_res" => cfg.image_res = v.parse().map_err(|e| bad(&e))?,
                "tau" => cfg.tau = v.parse().map_err(|e| bad(&e))?,
                "adj_weight" => cfg.adj_weight = v.parse().map_err(|e| bad(&e))?,
                "grad_clip" => cfg.grad_clip = v.parse().map_err(|e| bad(&e))?,
                "style_as_query" => cfg.style_as_query = v.parse().map_err(|e| bad(&e))?,
                "pyramid_seed" => cfg.pyramid_seed = v.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(ScmError::Config(format!("unknown config key '{}'", other)))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Bias-corrected Adam step on one parameter tensor.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    t: u64,
) {
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam state for one parameter group, keyed by parameter path.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Adam { lr, betas, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    fn apply(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        adam_update(param, grad, m, v, self.lr, self.betas, ADAM_EPS, self.t);
    }
}

/// Scale a gradient group so its global L2 norm is at most `max_norm`.
fn clip_grads(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Per-step loss record; all values are batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub rec: f64,
    pub perc: f64,
    pub style: f64,
    pub graph: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,adv_d,adv_g,rec,perc,style,graph,total";

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.adv_d, self.adv_g, self.rec, self.perc, self.style, self.graph,
            self.total
        )
    }

    fn all_finite(&self) -> bool {
        [self.adv_d, self.adv_g, self.rec, self.perc, self.style, self.graph, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Pixel-space self-reconstruction metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub struct Trainer {
    pub model: ScmModel,
    pub pyramid: FeaturePyramid,
    pub cfg: TrainConfig,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model: ScmModel::init(cfg.seed),
            pyramid: FeaturePyramid::init(cfg.pyramid_seed),
            opt_g: Adam::new(cfg.lr, cfg.betas),
            opt_d: Adam::new(cfg.lr, cfg.betas),
            cfg,
            step: 0,
        })
    }

    /// Deterministic batch index selection for a given step.
    pub fn batch_indices(&self, dataset_len: usize, step: u64) -> Vec<usize> {
        (0..self.cfg.batch)
            .map(|k| {
                let s = sample_seed(self.cfg.seed ^ 0x6261_7463_6821, step * self.cfg.batch as u64 + k as u64);
                (s % dataset_len as u64) as usize
            })
            .collect()
    }

    /// The training target for batch slot `k` at `step`. Without pose
    /// augmentation this is the sample itself (plain self-reconstruction).
    /// With augmentation, odd slots are re-rendered under a perturbed pose
    /// with the same region colors: the network still takes style from the
    /// original image but must reproduce the perturbed render, so it has to
    /// learn content-based correspondence — and to read appearance from the
    /// style channels — instead of memorizing the aligned layout. Even
    /// slots stay aligned so self-reconstruction remains sharp.
    fn training_target<'a>(
        &self,
        sample: &'a FigureSample,
        step: u64,
        k: usize,
    ) -> std::borrow::Cow<'a, FigureSample> {
        if !self.cfg.augment_pose || k % 2 == 0 {
            return std::borrow::Cow::Borrowed(sample);
        }
        let seed = sample_seed(
            self.cfg.seed ^ 0x6a69_7474_6572,
            step * self.cfg.batch as u64 + k as u64,
        );
        let perturbed = perturb_pose(&sample.spec, seed);
        std::borrow::Cow::Owned(render_at(&perturbed, self.cfg.image_res))
    }

    /// One alternating D/G update on a deterministic batch from `dataset`.
    pub fn train_step(&mut self, dataset: &[FigureSample]) -> Result<StepMetrics> {
        if dataset.is_empty() {
            return Err(ScmError::Dataset("cannot train on an empty dataset".into()));
        }
        let step = self.step;
        let mcfg = self.cfg.model_config();
        let diverged = |term: &str, e: &ScmError| {
            ScmError::Diverged(format!("step {}: non-finite value in {}: {}", step, term, e))
        };

        let mut g = Graph::new();
        let mut reg_g = ParamBindings::default();
        let mut reg_d = ParamBindings::default();
        let bound_g = self.model.bind_generator_side(&mut g, true, Some(&mut reg_g));
        let bound_d = self.model.bind_discriminators(&mut g, true, Some(&mut reg_d));
        let pyr = self.pyramid.bind(&mut g);

        let indices = self.batch_indices(dataset.len(), step);
        let mut term_sums: [Option<NodeId>; 6] = [None; 6]; // adv_d, adv_g, rec, perc, style, graph
        for (k, &idx) in indices.iter().enumerate() {
            let sample = &dataset[idx];
            let target = self.training_target(sample, step, k);
            let out = bound_g
                .forward(&mut g, &sample.image, &sample.mask, &target.skeleton, &mcfg)
                .map_err(|e| diverged("generator forward", &e))?;

            let real = g.constant(target.image.clone());
            let real_skel = g.constant(target.skeleton.clone());
            let fake_skel = real_skel;
            let fake_detached = g.constant(g.value(out.image).clone());

            // discriminator loss on (real, detached fake)
            let ds_real = bound_d.d_style.logits(&mut g, real)?;
            let real_pair = g.concat(0, &[real, real_skel])?;
            let dp_real = bound_d.d_pose.logits(&mut g, real_pair)?;
            let ds_fake_d = bound_d.d_style.logits(&mut g, fake_detached)?;
            let fake_pair_d = g.concat(0, &[fake_detached, fake_skel])?;
            let dp_fake_d = bound_d.d_pose.logits(&mut g, fake_pair_d)?;
            let adv_d = l_adv_d(&mut g, ds_real, dp_real, ds_fake_d, dp_fake_d)
                .map_err(|e| diverged("l_adv_d", &e))?;

            // generator-side losses on the live fake
            let ds_fake_g = bound_d.d_style.logits(&mut g, out.image)?;
            let fake_pair_g = g.concat(0, &[out.image, fake_skel])?;
            let dp_fake_g = bound_d.d_pose.logits(&mut g, fake_pair_g)?;
            let adv_g = l_adv_g(&mut g, ds_fake_g, dp_fake_g)
                .map_err(|e| diverged("l_adv_g", &e))?;
            let rec = l_rec(&mut g, out.image, real).map_err(|e| diverged("l_rec", &e))?;
            let perc =
                l_perc(&mut g, &pyr, out.image, real).map_err(|e| diverged("l_perc", &e))?;
            let style =
                l_style(&mut g, &pyr, out.image, real).map_err(|e| diverged("l_style", &e))?;
            let graph = l_bsr(&mut g, &pyr, out.image, real, &target.mask, self.cfg.adj_weight)
                .map_err(|e| diverged("l_bsr", &e))?;

            for (slot, node) in [adv_d, adv_g, rec, perc, style, graph].into_iter().enumerate() {
                term_sums[slot] = Some(match term_sums[slot] {
                    None => node,
                    Some(acc) => g.add(acc, node)?,
                });
            }
        }

        let inv_batch = 1.0 / self.cfg.batch as f64;
        let mut terms = [0usize; 6].map(|_| 0); // node ids, filled below
        for (slot, acc) in term_sums.into_iter().enumerate() {
            terms[slot] = g.scale(acc.unwrap(), inv_batch)?;
        }
        let [adv_d, adv_g, rec, perc, style, graph] = terms;
        let weights = self.cfg.effective_weights();
        let total = l_total(&mut g, adv_g, rec, perc, style, graph, &weights)
            .map_err(|e| diverged("l_total", &e))?;

        let metrics = StepMetrics {
            step,
            adv_d: g.value(adv_d).item(),
            adv_g: g.value(adv_g).item(),
            rec: g.value(rec).item(),
            perc: g.value(perc).item(),
            style: g.value(style).item(),
            graph: g.value(graph).item(),
            total: g.value(total).item(),
        };
        if !metrics.all_finite() {
            return Err(ScmError::Diverged(format!(
                "step {}: non-finite loss term: {}",
                step,
                metrics.csv_line()
            )));
        }

        // D update from the detached adversarial loss
        g.zero_grad();
        g.backward(adv_d)?;
        let mut d_grads = collect_grads(&g, &reg_d);
        clip_grads(&mut d_grads, self.cfg.grad_clip);

        // G update from the weighted total (discriminator leaves also get
        // gradients here, but they are never applied)
        g.zero_grad();
        g.backward(total)?;
        let mut g_grads = collect_grads(&g, &reg_g);
        clip_grads(&mut g_grads, self.cfg.grad_clip);

        self.opt_d.t += 1;
        self.opt_g.t += 1;
        let (opt_d, opt_g) = (&mut self.opt_d, &mut self.opt_g);
        self.model.visit_mut(&mut |name, t| {
            if let Some(grad) = d_grads.get(&name) {
                opt_d.apply(&name, t.data_mut(), grad);
            } else if let Some(grad) = g_grads.get(&name) {
                opt_g.apply(&name, t.data_mut(), grad);
            }
        });

        self.step += 1;
        Ok(metrics)
    }

    /// Run until `cfg.steps`, invoking `log` after each step.
    pub fn train(
        &mut self,
        dataset: &[FigureSample],
        mut log: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let m = self.train_step(dataset)?;
            log(&m);
            out.push(m);
        }
        Ok(out)
    }

    // ---- inference ----

    /// Self-reconstruction: the sample provides style, mask, and pose.
    pub fn infer_reconstruct(&self, sample: &FigureSample) -> Result<Tensor> {
        self.infer_transfer(sample, &sample.skeleton)
    }

    /// Pose transfer: style from `source`, pose from `target_skeleton`.
    pub fn infer_transfer(
        &self,
        source: &FigureSample,
        target_skeleton: &Tensor,
    ) -> Result<Tensor> {
        let mcfg = self.cfg.model_config();
        let mut g = Graph::new();
        let bound = self.model.bind_generator_side(&mut g, false, None);
        let out = bound.forward(&mut g, &source.image, &source.mask, target_skeleton, &mcfg)?;
        Ok(g.value(out.image).clone())
    }

    /// Pose transfer that also returns the correlation field (debug export).
    pub fn infer_transfer_with_field(
        &self,
        source: &FigureSample,
        target_skeleton: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mcfg = self.cfg.model_config();
        let mut g = Graph::new();
        let bound = self.model.bind_generator_side(&mut g, false, None);
        let out = bound.forward(&mut g, &source.image, &source.mask, target_skeleton, &mcfg)?;
        Ok((g.value(out.image).clone(), g.value(out.field).clone()))
    }

    /// Attribute editing: swap the named region's pre-CCF feature block of
    /// `source` with `reference`'s, then resume the pipeline on the source
    /// pose. Incompatible with the no_dse ablation.
    pub fn infer_edit(
        &self,
        source: &FigureSample,
        reference: &FigureSample,
        region: usize,
    ) -> Result<Tensor> {
        if self.cfg.no_dse {
            return Err(ScmError::Config(
                "attribute editing requires the decomposed style encoder (no_dse is set)".into(),
            ));
        }
        if region >= REGION_NAMES.len() {
            return Err(ScmError::Config(format!(
                "region index {} out of range 0..{}",
                region,
                REGION_NAMES.len()
            )));
        }
        let mcfg = self.cfg.model_config();
        let mut g = Graph::new();
        let bound = self.model.bind_generator_side(&mut g, false, None);
        let src_img = g.constant(source.image.clone());
        let ref_img = g.constant(reference.image.clone());
        let src_pre = bound.style_pre_ccf(&mut g, src_img, &source.mask, &mcfg)?;
        let ref_pre = bound.style_pre_ccf(&mut g, ref_img, &reference.mask, &mcfg)?;
        let rc = crate::encoders::REGION_CHANNELS;
        let mut blocks = Vec::with_capacity(REGION_NAMES.len());
        for r in 0..REGION_NAMES.len() {
            let from = if r == region { ref_pre } else { src_pre };
            blocks.push(g.slice(from, 0, r * rc, (r + 1) * rc)?);
        }
        let spliced = g.concat(0, &blocks)?;
        let out = bound.forward_from_pre_ccf(&mut g, spliced, &source.skeleton, &mcfg)?;
        Ok(g.value(out.image).clone())
    }

    /// Self-reconstruction metrics averaged over `dataset`.
    pub fn evaluate(&self, dataset: &[FigureSample]) -> Result<EvalMetrics> {
        if dataset.is_empty() {
            return Err(ScmError::Dataset("cannot evaluate on an empty dataset".into()));
        }
        let (mut l1s, mut psnrs, mut ssims) = (0.0, 0.0, 0.0);
        for sample in dataset {
            let out = self.infer_reconstruct(sample)?;
            l1s += mean_abs_diff(&out, &sample.image);
            psnrs += psnr(&out, &sample.image);
            ssims += ssim(&out, &sample.image);
        }
        let n = dataset.len() as f64;
        Ok(EvalMetrics { l1: l1s / n, psnr: psnrs / n, ssim: ssims / n })
    }

    // ---- persistence ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.model.visit(&mut |name, t| {
            tensors.push((name, t.shape().to_vec(), t.data().to_vec()));
        });
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (kind, map) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, buf) in map {
                    tensors.push((format!("{}.{}.{}", prefix, kind, name), vec![buf.len()], buf.clone()));
                }
            }
        }

        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        f.write_u64::<LittleEndian>(self.step)?;
        f.write_u64::<LittleEndian>(self.opt_g.t)?;
        f.write_u64::<LittleEndian>(self.opt_d.t)?;
        f.write_u64::<LittleEndian>(self.cfg.pyramid_seed)?;
        let kv = self.cfg.to_kv();
        f.write_u32::<LittleEndian>(kv.len() as u32)?;
        f.write_all(kv.as_bytes())?;
        f.write_u32::<LittleEndian>(tensors.len() as u32)?;
        for (name, shape, data) in &tensors {
            f.write_u16::<LittleEndian>(name.len() as u16)?;
            f.write_all(name.as_bytes())?;
            f.write_u8(shape.len() as u8)?;
            for &d in shape {
                f.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in data {
                f.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |what: &str| ScmError::Checkpoint(format!("{}: {}", path.display(), what));
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| ScmError::Checkpoint(format!("{}: {}", path.display(), e)))?,
        );
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = f.read_u16::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {}", version)));
        }
        let step = f.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let t_g = f.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let t_d = f.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let pyramid_seed = f.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let kv_len = f.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"))? as usize;
        let mut kv = vec![0u8; kv_len];
        f.read_exact(&mut kv).map_err(|_| corrupt("truncated config"))?;
        let kv = String::from_utf8(kv).map_err(|_| corrupt("config is not utf-8"))?;
        let cfg = TrainConfig::from_kv(&kv)?;
        if cfg.pyramid_seed != pyramid_seed {
            return Err(corrupt("pyramid seed mismatch between header and config"));
        }

        let count = f.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated table"))? as usize;
        let mut table: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = f.read_u16::<LittleEndian>().map_err(|_| corrupt("truncated entry"))? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name).map_err(|_| corrupt("truncated entry"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name not utf-8"))?;
            let ndim = f.read_u8().map_err(|_| corrupt("truncated entry"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(f.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated entry"))? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            f.read_f64_into::<LittleEndian>(&mut data).map_err(|_| corrupt("truncated tensor data"))?;
            table.insert(name, (shape, data));
        }

        let mut trainer = Trainer::new(cfg)?;
        trainer.step = step;
        trainer.opt_g.t = t_g;
        trainer.opt_d.t = t_d;
        let mut missing = Vec::new();
        trainer.model.visit_mut(&mut |name, t| match table.remove(&name) {
            Some((shape, data)) if shape == t.shape() => {
                t.data_mut().copy_from_slice(&data);
            }
            Some(_) => missing.push(format!("{} (shape mismatch)", name)),
            None => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(corrupt(&format!("missing/invalid tensors: {}", missing.join(", "))));
        }
        for (name, (_, data)) in table {
            let target = if let Some(rest) = name.strip_prefix("opt_g.m.") {
                trainer.opt_g.m.insert(rest.to_string(), data)
            } else if let Some(rest) = name.strip_prefix("opt_g.v.") {
                trainer.opt_g.v.insert(rest.to_string(), data)
            } else if let Some(rest) = name.strip_prefix("opt_d.m.") {
                trainer.opt_d.m.insert(rest.to_string(), data)
            } else if let Some(rest) = name.strip_prefix("opt_d.v.") {
                trainer.opt_d.v.insert(rest.to_string(), data)
            } else {
                return Err(corrupt(&format!("unexpected tensor '{}'", name)));
            };
            let _ = target;
        }
        Ok(trainer)
    }
}

fn collect_grads(g: &Graph, reg: &ParamBindings) -> BTreeMap<String, Vec<f64>> {
    reg.entries
        .iter()
        .map(|(name, id)| (name.clone(), g.grad(*id).expect("trainable leaf").to_vec()))
        .collect()
}

// ---- pixel metrics ----

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// PSNR in dB for images in [0,1]; clamped at 120 dB for identical pairs.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        / a.len() as f64;
    (10.0 * (1.0 / mse.max(1e-12)).log10()).min(120.0)
}

/// Mean SSIM over non-overlapping 8x8 windows and channels, on [0,1] data
/// with the standard constants C1=(0.01)^2, C2=(0.03)^2.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    const WIN: usize = 8;
    let s = a.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (wh, ww) = (h / WIN, w / WIN);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for by in 0..wh {
            for bx in 0..ww {
                let (mut ma, mut mb) = (0.0, 0.0);
                let n = (WIN * WIN) as f64;
                for y in 0..WIN {
                    for x in 0..WIN {
                        let p = (ch * h + by * WIN + y) * w + bx * WIN + x;
                        ma += a.data()[p];
                        mb += b.data()[p];
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..WIN {
                    for x in 0..WIN {
                        let p = (ch * h + by * WIN + y) * w + bx * WIN + x;
                        let da = a.data()[p] - ma;
                        let db = b.data()[p] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthfig::{render_at, sample_spec};
    use tempfile::tempdir;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 2,
            batch: 2,
            image_res: 16,
            feature_res: 4,
            ..Default::default()
        }
    }

    fn tiny_dataset(n: usize) -> Vec<FigureSample> {
        (0..n).map(|i| render_at(&sample_spec(i as u64), 16)).collect()
    }

    #[test]
    fn adam_first_step_and_quadratic_bowl() {
        // zero grad leaves the parameter untouched
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 0.1, (0.5, 0.999), ADAM_EPS, 1);
        assert_eq!(p, vec![1.0]);

        // first step with constant gradient moves by ~lr
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut p, &[0.3], &mut m, &mut v, 0.1, (0.5, 0.999), ADAM_EPS, 1);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6, "got {}", p[0]);

        // f(x) = x^2 from x=1: |x| < 0.05 after 100 steps at lr 0.1
        let mut x = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=100 {
            let grad = vec![2.0 * x[0]];
            adam_update(&mut x, &grad, &mut m, &mut v, 0.1, (0.5, 0.999), ADAM_EPS, t);
        }
        assert!(x[0].abs() < 0.05, "ended at {}", x[0]);
    }

    #[test]
    fn config_kv_round_trip_and_errors() {
        let cfg = TrainConfig {
            steps: 123,
            no_ccf: true,
            lr: 3.5e-5,
            tau: 0.02,
            ..Default::default()
        };
        let parsed = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(parsed, cfg);

        assert!(TrainConfig::from_kv("bogus_key = 1").is_err());
        assert!(TrainConfig::from_kv("steps").is_err());
        assert!(TrainConfig::from_kv("batch = 0").is_err());
        // comments and blank lines are fine
        let ok = TrainConfig::from_kv("# comment\n\nsteps = 5 # trailing\n").unwrap();
        assert_eq!(ok.steps, 5);
    }

    #[test]
    fn metrics_record_is_complete_and_finite() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let data = tiny_dataset(4);
        let m = t.train_step(&data).unwrap();
        assert_eq!(m.step, 0);
        assert!(m.all_finite());
        let line = m.csv_line();
        assert_eq!(line.split(',').count(), 8);
        assert_eq!(METRICS_HEADER.split(',').count(), 8);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut cfg = tiny_config();
        cfg.lr = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let mut before = Vec::new();
        t.model.visit(&mut |_, ten| before.push(ten.data().to_vec()));
        t.train_step(&tiny_dataset(4)).unwrap();
        let mut after = Vec::new();
        t.model.visit(&mut |_, ten| after.push(ten.data().to_vec()));
        assert_eq!(before, after);
    }

    #[test]
    fn update_groups_are_disjoint() {
        // G-step never writes discriminator tensors and vice versa;
        // verified by zeroing one optimizer's lr and checking bit-equality
        let data = tiny_dataset(4);
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.opt_d.lr = 0.0; // only the G-step may write
        let mut d_before = Vec::new();
        t.model.visit(&mut |name, ten| {
            if name.starts_with("d_s") || name.starts_with("d_p") {
                d_before.push(ten.data().to_vec());
            }
        });
        t.train_step(&data).unwrap();
        let mut d_after = Vec::new();
        t.model.visit(&mut |name, ten| {
            if name.starts_with("d_s") || name.starts_with("d_p") {
                d_after.push(ten.data().to_vec());
            }
        });
        assert_eq!(d_before, d_after, "G-step mutated discriminator parameters");

        let mut t = Trainer::new(tiny_config()).unwrap();
        t.opt_g.lr = 0.0; // only the D-step may write
        let mut g_before = Vec::new();
        t.model.visit(&mut |name, ten| {
            if !name.starts_with("d_s") && !name.starts_with("d_p") {
                g_before.push(ten.data().to_vec());
            }
        });
        t.train_step(&data).unwrap();
        let mut g_after = Vec::new();
        t.model.visit(&mut |name, ten| {
            if !name.starts_with("d_s") && !name.starts_with("d_p") {
                g_after.push(ten.data().to_vec());
            }
        });
        assert_eq!(g_before, g_after, "D-step mutated generator-side parameters");
    }

    #[test]
    fn deterministic_metric_stream() {
        let data = tiny_dataset(4);
        let run = || {
            let mut t = Trainer::new(tiny_config()).unwrap();
            t.train(&data, |_| {}).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.scmc");
        let data = tiny_dataset(4);

        let mut cfg = tiny_config();
        cfg.steps = 4;
        let mut full = Trainer::new(cfg.clone()).unwrap();
        let stream_full = full.train(&data, |_| {}).unwrap();

        let mut halted = Trainer::new(cfg).unwrap();
        let first_half = [halted.train_step(&data).unwrap(), halted.train_step(&data).unwrap()];
        halted.save(&path).unwrap();

        let mut resumed = Trainer::load(&path).unwrap();
        // bit-exact round trip
        let mut a = Vec::new();
        halted.model.visit(&mut |_, t| a.push(t.data().to_vec()));
        let mut b = Vec::new();
        resumed.model.visit(&mut |_, t| b.push(t.data().to_vec()));
        assert_eq!(a, b);
        assert_eq!(halted.opt_g.m, resumed.opt_g.m);
        assert_eq!(halted.opt_d.v, resumed.opt_d.v);
        assert_eq!(halted.step, resumed.step);

        // resumed stream continues the unresumed one exactly
        let second_half = resumed.train(&data, |_| {}).unwrap();
        let mut stitched = first_half.to_vec();
        stitched.extend(second_half);
        assert_eq!(stitched, stream_full);
    }

    #[test]
    fn checkpoint_corruption_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.scmc");
        let t = Trainer::new(tiny_config()).unwrap();
        t.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Trainer::load(&path), Err(ScmError::Checkpoint(_))));

        let good = {
            let mut b = std::fs::read(&path).unwrap();
            b[0] = b'S';
            b
        };
        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(Trainer::load(&path), Err(ScmError::Checkpoint(_))));
        assert!(Trainer::load(Path::new("/nonexistent/ck")).is_err());
    }

    #[test]
    fn divergence_is_reported_with_the_term() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        // poison one generator bias so the forward pass produces NaN
        t.model.visit_mut(&mut |name, ten| {
            if name == "gen.head.bias" {
                for v in ten.data_mut() {
                    *v = f64::NAN;
                }
            }
        });
        match t.train_step(&tiny_dataset(2)) {
            Err(ScmError::Diverged(msg)) => assert!(msg.contains("step 0"), "msg: {}", msg),
            other => panic!("expected divergence, got {:?}", other.map(|m| m.csv_line())),
        }
    }

    #[test]
    fn ablation_flags_still_log_all_terms() {
        for cfg in [
            TrainConfig { no_ccf: true, ..tiny_config() },
            TrainConfig { no_bsr: true, ..tiny_config() },
            TrainConfig { no_dse: true, ..tiny_config() },
            TrainConfig { augment_pose: true, ..tiny_config() },
            TrainConfig { style_as_query: true, ..tiny_config() },
        ] {
            let no_bsr = cfg.no_bsr;
            let mut t = Trainer::new(cfg).unwrap();
            let m = t.train_step(&tiny_dataset(2)).unwrap();
            assert!(m.all_finite());
            if no_bsr {
                // term still logged, weight forced to zero
                let unweighted = 5.0 * m.adv_g + m.rec + m.perc + 150.0 * m.style;
                assert!((m.total - unweighted).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn pixel_metric_identities() {
        let img = render_at(&sample_spec(3), 16).image;
        assert_eq!(ssim(&img, &img), 1.0);
        let mut inverted = img.clone();
        for v in inverted.data_mut() {
            *v = 1.0 - *v;
        }
        assert!(ssim(&img, &inverted) < 1.0);

        // PSNR closed form: mse 0.01 -> 20 dB
        let a = Tensor::zeros(&[3, 8, 8]);
        let b = Tensor::full(&[3, 8, 8], 0.1);
        assert!((psnr(&a, &b) - 20.0).abs() <= 1e-9);
    }

    #[test]
    fn edit_with_self_is_reconstruction() {
        let t = Trainer::new(tiny_config()).unwrap();
        let s = render_at(&sample_spec(5), 16);
        let recon = t.infer_reconstruct(&s).unwrap();
        let edited = t.infer_edit(&s, &s, 4).unwrap();
        assert_eq!(recon.data(), edited.data());

        assert!(t.infer_edit(&s, &s, 99).is_err());
        let mut no_dse = Trainer::new(TrainConfig { no_dse: true, ..tiny_config() }).unwrap();
        no_dse.step = 0;
        assert!(no_dse.infer_edit(&s, &s, 0).is_err());
    }
}
