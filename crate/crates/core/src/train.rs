//! Two-stage training (train-and-freeze base, then adapt DSP+DRP with the
//! robust prompt mix) and the stability evaluation harness.

use rayon::prelude::*;

use crate::attention::{KvStrategy, PlainAttention, RoutedAttention};
use crate::checkpoint::group_checksum;
use crate::config::RunConfig;
use crate::data::SyntheticScene;
use crate::decoder::{self, DecoderOutput, IMG};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{self, ImageScores, StabilityReport};
use crate::prompts::{self, Box2, PromptSpec};
use crate::rng::Rng;
use crate::tensor::{Adam, Graph, ParamGroup, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Stable BCE-with-logits plus soft dice (epsilon 1) at full resolution.
pub fn seg_loss(
    g: &mut Graph,
    logits: Var,
    gt: &BinaryMask,
    ce_w: f64,
    dice_w: f64,
) -> Result<(Var, LossBreakdown)> {
    let shape = g.shape(logits).to_vec();
    if shape != [gt.height, gt.width] {
        return Err(Error::Shape {
            op: "seg_loss",
            lhs: shape,
            rhs: vec![gt.height, gt.width],
        });
    }
    let target: Vec<f64> = gt.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let ce = g.bce_with_logits_mean(logits, &target)?;

    let p = g.sigmoid(logits);
    let t = g.constant(&shape, target);
    let pt = g.mul(p, t)?;
    let inter = g.sum_all(pt);
    let num0 = g.scale(inter, 2.0);
    let num = g.add_const(num0, 1.0);
    let psum = g.sum_all(p);
    let den0 = g.add_const(psum, gt.count() as f64);
    let den = g.add_const(den0, 1.0);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    let dice = g.add_const(neg, 1.0);

    let ce_part = g.scale(ce, ce_w);
    let dice_part = g.scale(dice, dice_w);
    let total = g.add(ce_part, dice_part)?;
    let bd = LossBreakdown {
        ce: g.data(ce)[0],
        dice: g.data(dice)[0],
        total: g.data(total)[0],
    };
    Ok((total, bd))
}

/// One full forward: encode image, optionally embed a dense coarse-mask
/// prompt, tokenize the sparse prompt, run the decoder.
pub fn forward_scene(
    g: &mut Graph,
    base: &ParamGroup,
    adapter: Option<&ParamGroup>,
    strategy: &dyn KvStrategy,
    image: &[u8],
    token_prompt: &PromptSpec,
    dense_prompt: Option<&BinaryMask>,
    s_p: f64,
) -> Result<DecoderOutput> {
    let mut emb = decoder::encode_image(g, base, image)?;
    if let Some(coarse) = dense_prompt {
        emb = decoder::add_mask_prompt(g, base, emb, coarse)?;
    }
    let tokens = decoder::encode_prompts(g, base, token_prompt, IMG, IMG)?;
    decoder::run_decoder(g, base, emb, tokens, strategy, adapter, s_p)
}

fn gt_box_of(scene: &SyntheticScene) -> Result<Box2> {
    Box2::around_mask(&scene.target_mask)
        .ok_or_else(|| Error::Generation("scene target mask is empty".into()))
}

/// Sparse token prompt plus optional dense coarse mask for one training step.
/// Coarse-mask prompts pair with the GT box in the same forward pass.
fn make_training_prompt(
    scene: &SyntheticScene,
    kind: usize,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<(PromptSpec, Option<BinaryMask>)> {
    let gt = gt_box_of(scene)?;
    match kind {
        0 => Ok((PromptSpec::gt_box(gt), None)),
        1 => {
            let b = prompts::noisy_box(
                &gt,
                cfg.noise_scale,
                cfg.train_iou_lo,
                cfg.train_iou_hi,
                IMG,
                IMG,
                rng,
            )?;
            Ok((PromptSpec::noisy_box(b, cfg.train_iou_lo, cfg.train_iou_hi), None))
        }
        2 => {
            let k = cfg.point_counts[rng.below(cfg.point_counts.len())];
            let k = k.min(scene.target_mask.count());
            let ps = prompts::sample_points(&scene.target_mask, k, rng)?;
            Ok((PromptSpec::points(ps), None))
        }
        _ => {
            let coarse = prompts::coarse_mask(
                &scene.target_mask,
                cfg.coarse_band_radius,
                cfg.coarse_flip_prob,
                rng,
            )?;
            Ok((PromptSpec::gt_box(gt), Some(coarse)))
        }
    }
}

/// Canonical train split for a config: seeded from the run seed.
pub fn train_dataset(cfg: &RunConfig) -> Vec<SyntheticScene> {
    crate::data::generate_dataset(
        cfg.train_scenes,
        cfg.occlusion_prob,
        &Rng::new(cfg.seed).derive(0x7a11),
    )
}

/// Canonical held-out split for a config.
pub fn test_dataset(cfg: &RunConfig) -> Vec<SyntheticScene> {
    crate::data::generate_dataset(
        cfg.test_scenes,
        cfg.occlusion_prob,
        &Rng::new(cfg.seed).derive(0x7e57),
    )
}

pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
}

fn check_finite_loss(loss: f64, stage: &str, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Train(format!("{stage} loss became {loss} at epoch {epoch}")));
    }
    Ok(())
}

/// Stage 1: train encoder + decoder jointly on clean prompts (GT boxes and
/// 3-point), then freeze.
pub fn train_base(scenes: &[SyntheticScene], cfg: &RunConfig) -> Result<(ParamGroup, TrainStats)> {
    let mut rng = Rng::new(cfg.seed).derive(0x0b51);
    let mut base = decoder::init_base(&mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.base_epochs);
    for epoch in 0..cfg.base_epochs {
        let order = rng.sample_indices(scenes.len(), scenes.len());
        let mut acc = 0.0;
        for &i in &order {
            let scene = &scenes[i];
            // clean prompts only: one GT box and one 3-point draw per step,
            // gradients averaged
            let k = 3.min(scene.target_mask.count());
            let ps = prompts::sample_points(&scene.target_mask, k, &mut rng)?;
            let clean = [
                make_training_prompt(scene, 0, cfg, &mut rng)?,
                (PromptSpec::points(ps), None),
            ];
            let mut step_loss = 0.0;
            for (prompt, dense) in &clean {
                let mut g = Graph::new();
                let out = forward_scene(
                    &mut g,
                    &base,
                    None,
                    &PlainAttention,
                    &scene.image,
                    prompt,
                    dense.as_ref(),
                    cfg.s_p,
                )?;
                let (loss, bd) = seg_loss(&mut g, out.full_logits, &scene.target_mask, cfg.ce_weight, cfg.dice_weight)?;
                check_finite_loss(bd.total, "base", epoch)?;
                step_loss += bd.total;
                let scaled = g.scale(loss, 1.0 / clean.len() as f64);
                g.backward(scaled)?;
                base.absorb_grads(&g);
            }
            acc += step_loss / clean.len() as f64;
            opt.step(&mut base)?;
            base.zero_grads();
        }
        epoch_losses.push(acc / scenes.len() as f64);
    }
    base.frozen = true;
    Ok((base, TrainStats { epoch_losses }))
}

/// Stage 2: adapt DSP + DRP against the robust prompt mix; the base is
/// frozen and its checksum must not move.
pub fn adapt_stable(
    base: &ParamGroup,
    scenes: &[SyntheticScene],
    cfg: &RunConfig,
) -> Result<(ParamGroup, TrainStats)> {
    if !base.frozen {
        return Err(Error::Contract("adapt_stable requires a frozen base".into()));
    }
    let checksum_before = group_checksum(&[base]);
    let mut rng = Rng::new(cfg.seed).derive(0xada7);
    let mut adapter = crate::dsp::init_adapter(&mut rng);
    let mut opt = Adam::new(cfg.adapt_lr);
    let strategy = RoutedAttention::learned();
    let mut epoch_losses = Vec::with_capacity(cfg.adapt_epochs);
    for epoch in 0..cfg.adapt_epochs {
        let order = rng.sample_indices(scenes.len(), scenes.len());
        let mut acc = 0.0;
        for &i in &order {
            let scene = &scenes[i];
            // average gradients over several prompt draws of the same scene;
            // single-draw gradients are too noisy for the tiny adapter
            let mut step_loss = 0.0;
            for _ in 0..cfg.adapt_batch {
                let kind = rng.below(4); // uniform over the RTS mix
                let (prompt, dense) = match make_training_prompt(scene, kind, cfg, &mut rng) {
                    Ok(p) => p,
                    // infeasible noisy box on a degenerate scene: fall back to GT box
                    Err(Error::Generation(_)) => make_training_prompt(scene, 0, cfg, &mut rng)?,
                    Err(e) => return Err(e),
                };
                let mut g = Graph::new();
                let out = forward_scene(
                    &mut g,
                    base,
                    Some(&adapter),
                    &strategy,
                    &scene.image,
                    &prompt,
                    dense.as_ref(),
                    cfg.s_p,
                )?;
                let (loss, bd) = seg_loss(&mut g, out.full_logits, &scene.target_mask, cfg.ce_weight, cfg.dice_weight)?;
                check_finite_loss(bd.total, "adapt", epoch)?;
                step_loss += bd.total;
                let scaled = g.scale(loss, 1.0 / cfg.adapt_batch as f64);
                g.backward(scaled)?;
                adapter.absorb_grads(&g);
            }
            acc += step_loss / cfg.adapt_batch as f64;
            opt.step(&mut adapter)?;
            adapter.zero_grads();
        }
        epoch_losses.push(acc / scenes.len() as f64);
        if group_checksum(&[base]) != checksum_before {
            return Err(Error::Contract(
                "frozen base parameters changed during adaptation".into(),
            ));
        }
    }
    Ok((adapter, TrainStats { epoch_losses }))
}

/// One evaluation condition; prompt qualities from the degradation protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    GtBox,
    NoisyBox { lo: f64, hi: f64 },
    Points { k: usize },
}

impl Condition {
    pub fn tag(&self) -> String {
        match self {
            Condition::GtBox => "gt_box".into(),
            Condition::NoisyBox { lo, hi } => format!("noisy_box:{lo}-{hi}"),
            Condition::Points { k } => format!("points:{k}"),
        }
    }

    /// Parse "gt_box", "noisy_box:0.5-0.6" or "points:1".
    pub fn parse(s: &str) -> Result<Condition> {
        if s == "gt_box" {
            return Ok(Condition::GtBox);
        }
        if let Some(rest) = s.strip_prefix("noisy_box:") {
            let (lo, hi) = rest
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("bad condition '{s}'")))?;
            let lo: f64 = lo.parse().map_err(|_| Error::Config(format!("bad condition '{s}'")))?;
            let hi: f64 = hi.parse().map_err(|_| Error::Config(format!("bad condition '{s}'")))?;
            return Ok(Condition::NoisyBox { lo, hi });
        }
        if let Some(k) = s.strip_prefix("points:") {
            let k: usize = k.parse().map_err(|_| Error::Config(format!("bad condition '{s}'")))?;
            return Ok(Condition::Points { k });
        }
        Err(Error::Config(format!(
            "unknown condition '{s}' (expected gt_box, noisy_box:LO-HI, points:K)"
        )))
    }

    fn draw_prompt(&self, scene: &SyntheticScene, cfg: &RunConfig, rng: &mut Rng) -> Result<PromptSpec> {
        let gt = gt_box_of(scene)?;
        match self {
            Condition::GtBox => Ok(PromptSpec::gt_box(gt)),
            Condition::NoisyBox { lo, hi } => {
                let b = prompts::noisy_box(&gt, cfg.noise_scale, *lo, *hi, IMG, IMG, rng)?;
                Ok(PromptSpec::noisy_box(b, *lo, *hi))
            }
            Condition::Points { k } => {
                if scene.target_mask.count() < *k {
                    return Err(Error::Generation(format!(
                        "target has {} pixels, need {k}",
                        scene.target_mask.count()
                    )));
                }
                Ok(PromptSpec::points(prompts::sample_points(&scene.target_mask, *k, rng)?))
            }
        }
    }
}

fn eval_pool() -> rayon::ThreadPool {
    let threads = std::env::var("STABLE_ATTN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().expect("thread pool")
}

/// The §-style stability protocol at desk scale: for each image and
/// condition draw B prompts, threshold logits at 0, and score mIoU / mBIoU
/// against GT plus mSF over the B masks.
pub fn evaluate_stability(
    base: &ParamGroup,
    adapter: Option<&ParamGroup>,
    strategy: &dyn KvStrategy,
    scenes: &[SyntheticScene],
    conditions: &[Condition],
    b_prompts: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<StabilityReport> {
    let d = metrics::default_boundary_width(IMG, IMG);
    let pool = eval_pool();
    let results: Vec<Result<(Vec<ImageScores>, usize)>> = pool.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(img_idx, scene)| {
                let mut rows = Vec::new();
                let mut skipped = 0usize;
                for (ci, cond) in conditions.iter().enumerate() {
                    let mut rng = Rng::new(seed)
                        .derive(0xe7a1)
                        .derive(img_idx as u64)
                        .derive(ci as u64);
                    let mut masks: Vec<BinaryMask> = Vec::with_capacity(b_prompts);
                    let mut alphas: Vec<f64> = Vec::new();
                    let mut infeasible = false;
                    for _ in 0..b_prompts {
                        let prompt = match cond.draw_prompt(scene, cfg, &mut rng) {
                            Ok(p) => p,
                            Err(Error::Generation(_)) => {
                                infeasible = true;
                                break;
                            }
                            Err(e) => return Err(e),
                        };
                        let mut g = Graph::new();
                        let out = forward_scene(
                            &mut g,
                            base,
                            adapter,
                            strategy,
                            &scene.image,
                            &prompt,
                            None,
                            cfg.s_p,
                        )?;
                        let bits: Vec<bool> =
                            g.data(out.full_logits).iter().map(|v| *v > 0.0).collect();
                        masks.push(BinaryMask::from_bits(IMG, IMG, bits));
                        for rec in &out.records {
                            if let Some((a1, _)) = rec.alpha {
                                alphas.push(a1);
                            }
                        }
                    }
                    if infeasible || masks.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    let mut miou = 0.0;
                    let mut mbiou = 0.0;
                    for m in &masks {
                        miou += metrics::mask_iou(m, &scene.target_mask)?;
                        mbiou += metrics::boundary_iou(m, &scene.target_mask, d)?;
                    }
                    let nb = masks.len() as f64;
                    rows.push(ImageScores {
                        condition: cond.tag(),
                        miou: miou / nb,
                        mbiou: mbiou / nb,
                        msf: metrics::stability_score(&masks)?,
                        alpha1_mean: if alphas.is_empty() {
                            None
                        } else {
                            Some(alphas.iter().sum::<f64>() / alphas.len() as f64)
                        },
                    });
                }
                Ok((rows, skipped))
            })
            .collect()
    });

    let mut all_rows = Vec::new();
    let mut skipped_total = 0usize;
    for r in results {
        let (rows, skipped) = r?;
        all_rows.extend(rows);
        skipped_total += skipped;
    }
    let mut report = metrics::aggregate_report(&all_rows, &cfg.hash(), seed);
    report.skipped_images = skipped_total;
    report.base_params = Some(base.param_count());
    report.adapter_params = adapter.map(|a| a.param_count());
    Ok(report)
}
