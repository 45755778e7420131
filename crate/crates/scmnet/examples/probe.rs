//! Scratch probe: evaluate transfer/edit statistics on a trained checkpoint.

use std::path::Path;

use scmnet::synthfig::{perturb_pose, read_dataset, render_at, FigureSample};
use scmnet::trainer::{ssim, Trainer};
use scmnet::{Graph, Tensor};

const PANTS: usize = 4;
const HAIR: usize = 0;
const BACKGROUND: usize = 7;

fn skeleton_adjacent(skel: &Tensor) -> Vec<usize> {
    let s = skel.shape();
    let (j, hw) = (s[0], s[1] * s[2]);
    (0..hw)
        .filter(|&p| (0..j).any(|c| skel.data()[c * hw + p] > 0.5))
        .collect()
}

fn region_mean_color(image: &Tensor, mask: &Tensor, region: usize) -> Option<[f64; 3]> {
    let hw = image.shape()[1] * image.shape()[2];
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    for p in 0..hw {
        if mask.data()[region * hw + p] > 0.5 {
            count += 1;
            for ch in 0..3 {
                acc[ch] += image.data()[ch * hw + p];
            }
        }
    }
    if count == 0 {
        return None;
    }
    Some([acc[0] / count as f64, acc[1] / count as f64, acc[2] / count as f64])
}

fn color_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Max-pool one region channel of a full-res mask down to `fr`x`fr`.
fn downsample_mask(mask: &Tensor, region: usize, fr: usize) -> Tensor {
    let s = mask.shape();
    let (h, w) = (s[1], s[2]);
    let f = h / fr;
    let mut out = Tensor::zeros(&[1, fr, fr]);
    for y in 0..fr {
        for x in 0..fr {
            let mut m = 0.0f64;
            for dy in 0..f {
                for dx in 0..f {
                    m = m.max(mask.data()[region * h * w + (y * f + dy) * w + (x * f + dx)]);
                }
            }
            out.data_mut()[y * fr + x] = m;
        }
    }
    out
}

fn edit_variant(
    trainer: &Trainer,
    source: &FigureSample,
    reference: &FigureSample,
    region: usize,
    pooled: bool,
    anchored: bool,
) -> Tensor {
    let mcfg = trainer.cfg.model_config();
    let mut g = Graph::new();
    let bound = trainer.model.bind_generator_side(&mut g, false, None);
    let src_img = g.constant(source.image.clone());
    let ref_img = g.constant(reference.image.clone());
    let src_pre = bound.style_pre_ccf(&mut g, src_img, &source.mask, &mcfg).unwrap();
    let ref_pre = bound.style_pre_ccf(&mut g, ref_img, &reference.mask, &mcfg).unwrap();
    let rc = scmnet::encoders::REGION_CHANNELS;
    let mut blocks = Vec::new();
    for r in 0..8 {
        if r != region {
            blocks.push(g.slice(src_pre, 0, r * rc, (r + 1) * rc).unwrap());
        } else if !pooled {
            blocks.push(g.slice(ref_pre, 0, r * rc, (r + 1) * rc).unwrap());
        } else {
            let fr = mcfg.feature_res;
            let ref_block = g.slice(ref_pre, 0, r * rc, (r + 1) * rc).unwrap();
            let rm = g.constant(downsample_mask(&reference.mask, r, fr));
            let pooledv = g.region_avg_pool(ref_block, rm).unwrap(); // [1, rc]
            let vecc = g.transpose2d(pooledv).unwrap(); // [rc, 1]
            let sm = downsample_mask(&source.mask, r, fr);
            let srow = g.constant(sm.reshaped(vec![1, fr * fr]).unwrap());
            let outer = g.matmul(vecc, srow).unwrap();
            blocks.push(g.reshape(outer, vec![rc, fr, fr]).unwrap());
        }
    }
    let _ = anchored;
    let spliced = g.concat(0, &blocks).unwrap();
    let out = bound.forward_from_pre_ccf(&mut g, spliced, &source.skeleton, &mcfg).unwrap();
    g.value(out.image).clone()
}

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "/tmp/pilot".into());
    let dir = Path::new(&dir);
    let trainer = Trainer::load(&dir.join("ck.bin")).unwrap();
    let train_set = read_dataset(&dir.join("train.bin")).unwrap();
    let held = read_dataset(&dir.join("held.bin")).unwrap();

    let eval = trainer.evaluate(&held).unwrap();
    println!("held-out: l1 {:.4} psnr {:.2} ssim {:.4}", eval.l1, eval.psnr, eval.ssim);

    // criterion 6a: own-pose transfer vs reconstruction
    let mut max_gap = 0.0f64;
    for s in held.iter().take(16) {
        let rec = trainer.infer_reconstruct(s).unwrap();
        let tr = trainer.infer_transfer(s, &s.skeleton).unwrap();
        let gap = (ssim(&rec, &s.image) - ssim(&tr, &s.image)).abs();
        max_gap = max_gap.max(gap);
    }
    println!("own-pose ssim gap: {:.6}", max_gap);

    // criterion 6b: perturbed-pose transfer, skeleton-adjacent non-background
    let mut fracs = Vec::new();
    for (i, source) in train_set.iter().take(32).enumerate() {
        let tspec = perturb_pose(&source.spec, 0xbeef + i as u64);
        let target = render_at(&tspec, 64);
        let out = trainer.infer_transfer(source, &target.skeleton).unwrap();
        let bg = source.spec.region_colors[BACKGROUND];
        let pixels = skeleton_adjacent(&target.skeleton);
        let hw = 64 * 64;
        let non_bg = pixels
            .iter()
            .filter(|&&p| {
                let px = [out.data()[p], out.data()[hw + p], out.data()[2 * hw + p]];
                color_dist(&px, &bg) > 0.15
            })
            .count();
        fracs.push(non_bg as f64 / pixels.len().max(1) as f64);
    }
    fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "perturbed-pose non-bg fraction: min {:.3} p10 {:.3} median {:.3}",
        fracs[0],
        fracs[3],
        fracs[16]
    );
    let pass80 = fracs.iter().filter(|&&f| f >= 0.8).count();
    println!("trials with >= 80% non-bg: {}/32", pass80);

    // criterion 7: pants edit statistics
    let full_body: Vec<&FigureSample> = train_set
        .iter()
        .filter(|s| {
            region_mean_color(&s.image, &s.mask, PANTS).is_some()
                && region_mean_color(&s.image, &s.mask, HAIR).is_some()
        })
        .collect();
    // Color-fidelity diagnostic: how well does plain reconstruction track the
    // true per-sample region color, vs just emitting the palette mean?
    {
        let mut d_true = Vec::new();
        let mut true_b = Vec::new();
        let mut rec_b = Vec::new();
        for s in full_body.iter().take(32) {
            let rec = trainer.infer_reconstruct(s).unwrap();
            let got = region_mean_color(&rec, &s.mask, PANTS).unwrap();
            let truth = s.spec.region_colors[PANTS];
            d_true.push(color_dist(&got, &truth));
            true_b.push(truth[2]);
            rec_b.push(got[2]);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mt, mr) = (mean(&true_b), mean(&rec_b));
        let cov: f64 =
            true_b.iter().zip(&rec_b).map(|(a, b)| (a - mt) * (b - mr)).sum::<f64>();
        let vt: f64 = true_b.iter().map(|a| (a - mt) * (a - mt)).sum::<f64>();
        let vr: f64 = rec_b.iter().map(|a| (a - mr) * (a - mr)).sum::<f64>();
        println!(
            "recon pants fidelity: mean dist to true {:.4}, B-channel corr {:.3}, true B std {:.3}, rec B std {:.3}",
            mean(&d_true),
            cov / (vt.sqrt() * vr.sqrt()).max(1e-12),
            (vt / 32.0).sqrt(),
            (vr / 32.0).sqrt()
        );
    }

    // Stage-by-stage color tracing: where does per-sample pants color die?
    {
        use scmnet::corrfield::{correlate_positional, flatten_features, rearrange};
        let mcfg = trainer.cfg.model_config();
        let fr = mcfg.feature_res;
        let rc = scmnet::encoders::REGION_CHANNELS;
        let lc = rc - 3; // learned channels before the color skip
        let mut pre_b = Vec::new();
        let mut warped_b = Vec::new();
        let mut true_b2 = Vec::new();
        let mut field_hit = 0.0f64;
        for s in full_body.iter().take(16) {
            let mut g = Graph::new();
            let bound = trainer.model.bind_generator_side(&mut g, false, None);
            let img = g.constant(s.image.clone());
            let pre = bound.style_pre_ccf(&mut g, img, &s.mask, &mcfg).unwrap();
            let sf = bound.ccf.forward(&mut g, pre, true).unwrap();
            let skel = g.constant(s.skeleton.clone());
            let pose = bound.pose_enc.forward(&mut g, skel).unwrap();
            let (_, field) =
                correlate_positional(&mut g, pose, sf, mcfg.query_axis, mcfg.tau).unwrap();
            let pre_flat = flatten_features(&mut g, pre).unwrap();
            let warped = rearrange(&mut g, pre_flat, field, mcfg.query_axis).unwrap();

            let pm = downsample_mask(&s.mask, PANTS, fr);
            let sup: Vec<usize> =
                (0..fr * fr).filter(|&p| pm.data()[p] > 0.5).collect();
            if sup.is_empty() {
                continue;
            }
            let hw = fr * fr;
            // pants color-skip B channel, pre-CCF, averaged over support
            let pd = g.value(pre).data().to_vec();
            let b_chan = PANTS * rc + lc + 2;
            pre_b.push(sup.iter().map(|&p| pd[b_chan * hw + p]).sum::<f64>() / sup.len() as f64);
            // same channel after warping by the learned field
            let wd = g.value(warped).data().to_vec();
            warped_b
                .push(sup.iter().map(|&p| wd[b_chan * hw + p]).sum::<f64>() / sup.len() as f64);
            // field argmax hit rate: pants query rows attending inside pants
            let fdata = g.value(field).data().to_vec();
            let mut hits = 0usize;
            for &p in &sup {
                let row = &fdata[p * hw..(p + 1) * hw];
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pm.data()[arg] > 0.5 {
                    hits += 1;
                }
            }
            field_hit += hits as f64 / sup.len() as f64;
            true_b2.push(s.spec.region_colors[PANTS][2]);
        }
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
            let vb: f64 = b.iter().map(|x| (x - mb) * (x - mb)).sum();
            cov / (va.sqrt() * vb.sqrt()).max(1e-12)
        };
        println!(
            "color trace: pre-CCF skip corr {:.3}, field-warped skip corr {:.3}, field pants hit-rate {:.3}",
            corr(&pre_b, &true_b2),
            corr(&warped_b, &true_b2),
            field_hit / true_b2.len() as f64
        );
    }

    // Causal sensitivity: add a fixed offset to the pants color-skip
    // channels (pre-CCF, at the source's own support) and measure how much
    // the rendered pants pixels move. Near-zero response = dead pathway.
    {
        let mcfg = trainer.cfg.model_config();
        let fr = mcfg.feature_res;
        let rc = scmnet::encoders::REGION_CHANNELS;
        let lc = rc - 3;
        let mut responses = Vec::new();
        for s in full_body.iter().take(8) {
            let mut g = Graph::new();
            let bound = trainer.model.bind_generator_side(&mut g, false, None);
            let img = g.constant(s.image.clone());
            let pre = bound.style_pre_ccf(&mut g, img, &s.mask, &mcfg).unwrap();
            let base =
                bound.forward_from_pre_ccf(&mut g, pre, &s.skeleton, &mcfg).unwrap();
            let base_img = g.value(base.image).clone();

            // offset tensor: +0.3 on the pants color-skip channels over the
            // pants support, zero elsewhere
            let pm = downsample_mask(&s.mask, PANTS, fr);
            let hw = fr * fr;
            let mut off = Tensor::zeros(&[64, fr, fr]);
            for c in 0..3 {
                let ch = PANTS * rc + lc + c;
                for p in 0..hw {
                    if pm.data()[p] > 0.5 {
                        off.data_mut()[ch * hw + p] = 0.3;
                    }
                }
            }
            let offn = g.constant(off);
            let pre2 = g.add(pre, offn).unwrap();
            let alt =
                bound.forward_from_pre_ccf(&mut g, pre2, &s.skeleton, &mcfg).unwrap();
            let alt_img = g.value(alt.image).clone();

            let ihw = 64 * 64;
            let sup: Vec<usize> = (0..ihw)
                .filter(|&p| s.mask.data()[PANTS * ihw + p] > 0.5)
                .collect();
            let delta: f64 = sup
                .iter()
                .map(|&p| {
                    (0..3)
                        .map(|c| (alt_img.data()[c * ihw + p] - base_img.data()[c * ihw + p]).abs())
                        .sum::<f64>()
                        / 3.0
                })
                .sum::<f64>()
                / sup.len().max(1) as f64;
            responses.push(delta);
        }
        let mean_resp = responses.iter().sum::<f64>() / responses.len() as f64;
        println!("pants color-channel sensitivity (offset 0.3): mean |d out| {:.4}", mean_resp);
    }

    for (pooled, anchored) in [(false, false), (true, false)] {
        let mut closer = 0;
        let mut hair_ok = 0;
        let mut trials = 0;
        let mut hair_worst = 0.0f64;
        let mut mean_gain = 0.0f64;
        for k in 0..32usize {
            let source = full_body[k % full_body.len()];
            let reference = full_body[(k * 7 + 13) % full_body.len()];
            if std::ptr::eq(source, reference) {
                continue;
            }
            trials += 1;
            let unedited = trainer.infer_reconstruct(source).unwrap();
            let edited = edit_variant(&trainer, source, reference, PANTS, pooled, anchored);
            let ref_color = reference.spec.region_colors[PANTS];
            let before = region_mean_color(&unedited, &source.mask, PANTS).unwrap();
            let after = region_mean_color(&edited, &source.mask, PANTS).unwrap();
            let gain = color_dist(&before, &ref_color) - color_dist(&after, &ref_color);
            mean_gain += gain;
            if gain > 0.0 {
                closer += 1;
            }
            let hb = region_mean_color(&unedited, &source.mask, HAIR).unwrap();
            let ha = region_mean_color(&edited, &source.mask, HAIR).unwrap();
            let hd = color_dist(&ha, &hb);
            hair_worst = hair_worst.max(hd);
            if hd <= 0.1 {
                hair_ok += 1;
            }
        }
        println!(
            "pants edit (pooled={} anchored={}): closer {}/{} mean_gain {:+.4} hair_ok {}/{} hair_worst {:.4}",
            pooled, anchored, closer, trials, mean_gain / trials as f64, hair_ok, trials, hair_worst
        );
    }
}
