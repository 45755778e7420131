//! Image translator: U-Net generator plus two PatchGAN discriminators.
//!
//! The generator consumes the rearranged style features F*_s ([64, H/4, W/4],
//! already pose-aligned by the correlation field) and decodes them to an RGB
//! image through a small U-Net: two strided encoder blocks, four
//! nearest-neighbor upsampling stages, and skip connections from the
//! generator's own encoder stages. D_s judges images alone; D_p judges
//! image/skeleton pairs to enforce pose alignment. Both emit patch logit
//! grids, not single scalars.

use crate::encoders::{
    BoundConv, ConvLayer, ParamBindings, COLOR_SKIP_CHANNELS, FEATURE_CHANNELS, REGION_CHANNELS,
};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::Result;
use rand_chacha::ChaCha8Rng;

/// The per-region color-skip channels of the rearranged style features are
/// also routed straight to the generator head (upsampled to image
/// resolution). They are coverage-gated — zero outside their region's
/// support — so even a linear head can recover the fetched color layout,
/// giving region appearance a one-layer gradient path instead of one
/// through the whole U-Net.
pub const COLOR_CARRY_CHANNELS: usize =
    (FEATURE_CHANNELS / REGION_CHANNELS) * COLOR_SKIP_CHANNELS;

#[derive(Debug, Clone)]
pub struct Generator {
    /// encoder: two stride-2 blocks, 64 -> 128 -> 128
    pub e1: ConvLayer,
    pub e2: ConvLayer,
    /// decoder convs applied after upsample + skip concat
    pub d2: ConvLayer,
    pub d1: ConvLayer,
    /// refinement convs on the two upsamples back to image resolution
    pub u1: ConvLayer,
    pub u0: ConvLayer,
    /// 3-channel head, squashed by sigmoid
    pub head: ConvLayer,
}

pub struct BoundGenerator {
    e1: BoundConv,
    e2: BoundConv,
    d2: BoundConv,
    d1: BoundConv,
    u1: BoundConv,
    u0: BoundConv,
    head: BoundConv,
}

impl Generator {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut gen = Generator {
            e1: ConvLayer::init(rng, FEATURE_CHANNELS, 128, 3, 2, 1),
            e2: ConvLayer::init(rng, 128, 128, 3, 2, 1),
            d2: ConvLayer::init(rng, 256, 128, 3, 1, 1),
            d1: ConvLayer::init(rng, 128 + FEATURE_CHANNELS, 64, 3, 1, 1),
            u1: ConvLayer::init(rng, 64, 32, 3, 1, 1),
            u0: ConvLayer::init(rng, 32, 16, 3, 1, 1),
            head: ConvLayer::init(rng, 16 + COLOR_CARRY_CHANNELS, 3, 3, 1, 1),
        };
        // Start the head as "paste the warped region colors": damp the
        // random weights, then wire each region's color-carry channel c to
        // output channel c with a gain/bias chosen so sigmoid(4v - 2) ~= v
        // over [0, 1]. With a small random init the head learns to ignore
        // the carry channels entirely (the field is too noisy early on for
        // their gradient to compete with the decoder path); starting from
        // the identity map keeps an appearance gradient flowing into the
        // correlation field from step 0.
        let cin = 16 + COLOR_CARRY_CHANNELS;
        for w in gen.head.weight.data_mut() {
            *w *= 0.1;
        }
        let regions = COLOR_CARRY_CHANNELS / COLOR_SKIP_CHANNELS;
        for c in 0..3 {
            for r in 0..regions {
                let ch = 16 + r * COLOR_SKIP_CHANNELS + c;
                gen.head.weight.data_mut()[((c * cin + ch) * 3 + 1) * 3 + 1] = 4.0;
            }
            gen.head.bias.data_mut()[c] = -2.0;
        }
        gen
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        name: &str,
        trainable: bool,
        mut reg: Option<&mut ParamBindings>,
    ) -> BoundGenerator {
        let mut bind1 = |layer: &ConvLayer, part: &str, g: &mut Graph| {
            layer.bind(g, &format!("{}.{}", name, part), trainable, reg.as_deref_mut())
        };
        BoundGenerator {
            e1: bind1(&self.e1, "e1", g),
            e2: bind1(&self.e2, "e2", g),
            d2: bind1(&self.d2, "d2", g),
            d1: bind1(&self.d1, "d1", g),
            u1: bind1(&self.u1, "u1", g),
            u0: bind1(&self.u0, "u0", g),
            head: bind1(&self.head, "head", g),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (part, layer) in self.layers() {
            layer.visit(&format!("{}.{}", prefix, part), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        let prefix = prefix.to_string();
        for (part, layer) in self.layers_mut() {
            layer.visit_mut(&format!("{}.{}", prefix, part), f);
        }
    }

    fn layers(&self) -> [(&'static str, &ConvLayer); 7] {
        [
            ("e1", &self.e1),
            ("e2", &self.e2),
            ("d2", &self.d2),
            ("d1", &self.d1),
            ("u1", &self.u1),
            ("u0", &self.u0),
            ("head", &self.head),
        ]
    }

    fn layers_mut(&mut self) -> [(&'static str, &mut ConvLayer); 7] {
        [
            ("e1", &mut self.e1),
            ("e2", &mut self.e2),
            ("d2", &mut self.d2),
            ("d1", &mut self.d1),
            ("u1", &mut self.u1),
            ("u0", &mut self.u0),
            ("head", &mut self.head),
        ]
    }
}

impl BoundGenerator {
    /// [64, H/4, W/4] rearranged style features -> [3, H, W] image in (0,1).
    pub fn forward(&self, g: &mut Graph, feat: NodeId) -> Result<NodeId> {
        let s1 = self.e1.forward(g, feat)?;
        let s2 = self.e2.forward(g, s1)?;

        let up2 = g.upsample_nearest2x(s2)?;
        let cat2 = g.concat(0, &[up2, s1])?;
        let d2 = self.d2.forward(g, cat2)?;

        let up1 = g.upsample_nearest2x(d2)?;
        let cat1 = g.concat(0, &[up1, feat])?;
        let d1 = self.d1.forward(g, cat1)?;

        let up_h = g.upsample_nearest2x(d1)?;
        let u1 = self.u1.forward(g, up_h)?;
        let up_f = g.upsample_nearest2x(u1)?;
        let u0 = self.u0.forward(g, up_f)?;

        // color carry: route the per-region color-skip channels to the head
        let lc = REGION_CHANNELS - COLOR_SKIP_CHANNELS;
        let mut colors = Vec::with_capacity(FEATURE_CHANNELS / REGION_CHANNELS);
        for r in 0..FEATURE_CHANNELS / REGION_CHANNELS {
            colors.push(g.slice(feat, 0, r * REGION_CHANNELS + lc, (r + 1) * REGION_CHANNELS)?);
        }
        let carry = g.concat(0, &colors)?;
        let carry2 = g.upsample_nearest2x(carry)?;
        let carry4 = g.upsample_nearest2x(carry2)?;

        let head_in = g.concat(0, &[u0, carry4])?;
        let logits = self.head.forward_linear(g, head_in)?;
        g.sigmoid(logits)
    }
}

/// PatchGAN discriminator: four stride-2 conv blocks then a 1x1 head.
/// A [C,64,64] input yields a [1,4,4] grid of patch logits.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub blocks: Vec<ConvLayer>,
    pub head: ConvLayer,
}

pub struct BoundDiscriminator {
    blocks: Vec<BoundConv>,
    head: BoundConv,
}

impl Discriminator {
    pub fn init(rng: &mut ChaCha8Rng, cin: usize) -> Self {
        let widths = [32usize, 64, 64, 64];
        let mut blocks = Vec::with_capacity(4);
        let mut c = cin;
        for w in widths {
            blocks.push(ConvLayer::init(rng, c, w, 3, 2, 1));
            c = w;
        }
        let head = ConvLayer::init(rng, c, 1, 1, 1, 0);
        Discriminator { blocks, head }
    }

    /// Style discriminator D_s: image only.
    pub fn style(rng: &mut ChaCha8Rng) -> Self {
        Discriminator::init(rng, 3)
    }

    /// Pose discriminator D_p: image concatenated with skeleton heatmaps.
    pub fn pose(rng: &mut ChaCha8Rng, joints: usize) -> Self {
        Discriminator::init(rng, 3 + joints)
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        name: &str,
        trainable: bool,
        mut reg: Option<&mut ParamBindings>,
    ) -> BoundDiscriminator {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(g, &format!("{}.{}", name, i), trainable, reg.as_deref_mut()))
            .collect();
        let head = self.head.bind(g, &format!("{}.head", name), trainable, reg);
        BoundDiscriminator { blocks, head }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{}.{}", prefix, i), f);
        }
        self.head.visit(&format!("{}.head", prefix), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{}.{}", prefix, i), f);
        }
        self.head.visit_mut(&format!("{}.head", prefix), f);
    }
}

impl BoundDiscriminator {
    /// Patch logits, [1, H/16, W/16].
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        self.head.forward_linear(g, h)
    }

    /// Patch realness scores in (0,1).
    pub fn scores(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let l = self.logits(g, x)?;
        g.sigmoid(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn generator_shapes_and_range() {
        let gen = Generator::init(&mut rng(0));
        let mut g = Graph::new();
        let b = gen.bind(&mut g, "gen", false, None);
        let x = g.constant(random_tensor(&[64, 16, 16], 1));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 64, 64]);
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn generator_is_resolution_agnostic() {
        let gen = Generator::init(&mut rng(2));
        let mut g = Graph::new();
        let b = gen.bind(&mut g, "gen", false, None);
        let x = g.constant(random_tensor(&[64, 4, 4], 3));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 16, 16]);
    }

    #[test]
    fn generator_gradient_reaches_every_parameter() {
        let gen = Generator::init(&mut rng(4));
        let mut g = Graph::new();
        let mut reg = ParamBindings::default();
        let b = gen.bind(&mut g, "gen", true, Some(&mut reg));
        assert_eq!(reg.entries.len(), 14); // 7 layers x (weight, bias)
        let x = g.constant(random_tensor(&[64, 4, 4], 5));
        let y = b.forward(&mut g, x).unwrap();
        let loss = g.mean_abs(y).unwrap();
        g.backward(loss).unwrap();
        for (name, id) in &reg.entries {
            let grad = g.grad(*id).unwrap();
            assert!(grad.iter().any(|&v| v != 0.0), "no gradient in {}", name);
        }
    }

    #[test]
    fn discriminator_patch_grid_and_scores() {
        let d = Discriminator::style(&mut rng(6));
        let mut g = Graph::new();
        let b = d.bind(&mut g, "d_s", false, None);
        let x = g.constant(random_tensor(&[3, 64, 64], 7));
        let logits = b.logits(&mut g, x).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 4, 4]);
        let scores = b.scores(&mut g, x).unwrap();
        assert!(g.value(scores).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn pose_discriminator_accepts_image_skeleton_pair() {
        let d = Discriminator::pose(&mut rng(8), 14);
        let mut g = Graph::new();
        let b = d.bind(&mut g, "d_p", false, None);
        let img = g.constant(random_tensor(&[3, 64, 64], 9));
        let skel = g.constant(random_tensor(&[14, 64, 64], 10));
        let pair = g.concat(0, &[img, skel]).unwrap();
        let logits = b.logits(&mut g, pair).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 4, 4]);
    }

    #[test]
    fn discriminator_judges_patches_locally() {
        // The receptive field of a patch logit is ~31 px, so perturbing the
        // far corner must leave the opposite corner's logit untouched.
        let d = Discriminator::style(&mut rng(12));
        let base = random_tensor(&[3, 64, 64], 13);
        let mut tampered = base.clone();
        for c in 0..3 {
            tampered.data_mut()[(c * 64 + 63) * 64 + 63] = 123.0;
        }
        let mut g = Graph::new();
        let b = d.bind(&mut g, "d_s", false, None);
        let xa = g.constant(base);
        let xb = g.constant(tampered);
        let la = b.logits(&mut g, xa).unwrap();
        let lb = b.logits(&mut g, xb).unwrap();
        let (da, db) = (g.value(la).data(), g.value(lb).data());
        assert_eq!(da[0], db[0], "top-left patch saw a bottom-right pixel");
        assert_ne!(da[15], db[15], "bottom-right patch ignored its own pixel");
    }

    #[test]
    fn generator_gradcheck_wrt_features() {
        // reduced 8x8-feature configuration; weight the output by a fixed
        // random tensor so no gradient element vanishes by cancellation
        let gen = Generator::init(&mut rng(20));
        let x = {
            let mut t = random_tensor(&[64, 8, 8], 21);
            for v in t.data_mut() {
                *v *= 0.3;
            }
            t
        };
        let wsum = random_tensor(&[3, 32, 32], 22);
        let err = crate::tensor::check_gradients(
            |g, feat| {
                let b = gen.bind(g, "gen", false, None);
                let img = b.forward(g, feat)?;
                let w = g.constant(wsum.clone());
                let p = g.mul(img, w)?;
                g.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {}", err);
    }

    #[test]
    fn pose_discriminator_reacts_to_skeleton() {
        let d = Discriminator::pose(&mut rng(24), 14);
        let mut g = Graph::new();
        let b = d.bind(&mut g, "d_p", false, None);
        let img = random_tensor(&[3, 64, 64], 25);
        let s1 = random_tensor(&[14, 64, 64], 26);
        let s2 = random_tensor(&[14, 64, 64], 27);
        let i1 = g.constant(img.clone());
        let i2 = g.constant(img);
        let k1 = g.constant(s1);
        let k2 = g.constant(s2);
        let p1 = g.concat(0, &[i1, k1]).unwrap();
        let p2 = g.concat(0, &[i2, k2]).unwrap();
        let l1 = b.logits(&mut g, p1).unwrap();
        let l2 = b.logits(&mut g, p2).unwrap();
        assert!(g.value(l1).max_abs_diff(g.value(l2)) > 1e-12);
    }

    #[test]
    fn deterministic_forward() {
        let gen = Generator::init(&mut rng(14));
        let x = random_tensor(&[64, 8, 8], 15);
        let run = || {
            let mut g = Graph::new();
            let b = gen.bind(&mut g, "gen", false, None);
            let xn = g.constant(x.clone());
            let y = b.forward(&mut g, xn).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
