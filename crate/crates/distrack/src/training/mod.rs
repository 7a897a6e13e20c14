//! Losses and the two-phase optimization recipe.
//!
//! Phase 1 trains everything except the score module with a weighted GIoU +
//! L1 box loss plus an auxiliary per-cell cross-entropy on the
//! distractor-aware features. Phase 2 freezes all of that and trains only
//! the score module with a binary cross-entropy on positive/negative
//! template-search pairs.

pub mod sampler;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{self, BoundingBox};
use crate::model::{Model, TemplateInput, TemplateSource};
use crate::nn::{Adam, Gradients, StepDecay, Tape, Var};

pub use sampler::{
    sample_phase1, sample_phase2, search_crop, template_crop, Phase1Sample, Phase2Sample,
    SamplePool,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub phase1_epochs: u32,
    pub phase1_decay_epoch: u32,
    pub phase2_epochs: u32,
    pub phase2_decay_epoch: u32,
    pub steps_per_epoch: u32,
    pub batch_size: usize,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    /// Transparent : opaque pool weights (5:3).
    pub transparent_weight: u32,
    pub opaque_weight: u32,
    /// Max frame distance between the search frame and its templates.
    pub frame_window: u32,
    pub search_context: f64,
    pub template_context: f64,
    /// Search-crop center jitter, in units of sqrt(box area).
    pub center_jitter: f64,
    /// Log-scale jitter of the search context factor.
    pub scale_jitter: f64,
}

impl TrainConfig {
    /// Full-scale constants.
    pub fn full() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay_factor: 10.0,
            phase1_epochs: 300,
            phase1_decay_epoch: 250,
            phase2_epochs: 40,
            phase2_decay_epoch: 30,
            steps_per_epoch: 10_000,
            batch_size: 32,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            transparent_weight: 5,
            opaque_weight: 3,
            frame_window: 200,
            search_context: 4.0,
            template_context: 4.0,
            center_jitter: 0.35,
            scale_jitter: 0.25,
        }
    }

    /// Desk-scale defaults: same loss weights and ratios, small counts and
    /// a faster learning rate so overfit runs converge within minutes.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            phase1_epochs: 20,
            phase1_decay_epoch: 17,
            phase2_epochs: 8,
            phase2_decay_epoch: 6,
            steps_per_epoch: 100,
            batch_size: 8,
            ..TrainConfig::full()
        }
    }

    pub fn phase1_schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.lr,
            decay_epoch: self.phase1_decay_epoch,
            factor: self.lr_decay_factor,
        }
    }

    pub fn phase2_schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.lr,
            decay_epoch: self.phase2_decay_epoch,
            factor: self.lr_decay_factor,
        }
    }

    pub fn phase1_steps(&self) -> u32 {
        self.phase1_epochs * self.steps_per_epoch
    }

    pub fn phase2_steps(&self) -> u32 {
        self.phase2_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::domain("batch size and steps per epoch must be positive"));
        }
        if self.phase1_decay_epoch >= self.phase1_epochs && self.phase1_epochs > 1 {
            return Err(Error::domain("phase-1 decay epoch must precede the last epoch"));
        }
        if self.phase2_decay_epoch >= self.phase2_epochs && self.phase2_epochs > 1 {
            return Err(Error::domain("phase-2 decay epoch must precede the last epoch"));
        }
        Ok(())
    }

    /// Flat `key=value` serialization (the on-disk training config format).
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("lr", self.lr.to_string());
        put("lr_decay_factor", self.lr_decay_factor.to_string());
        put("phase1_epochs", self.phase1_epochs.to_string());
        put("phase1_decay_epoch", self.phase1_decay_epoch.to_string());
        put("phase2_epochs", self.phase2_epochs.to_string());
        put("phase2_decay_epoch", self.phase2_decay_epoch.to_string());
        put("steps_per_epoch", self.steps_per_epoch.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lambda_giou", self.lambda_giou.to_string());
        put("lambda_l1", self.lambda_l1.to_string());
        put("transparent_weight", self.transparent_weight.to_string());
        put("opaque_weight", self.opaque_weight.to_string());
        put("frame_window", self.frame_window.to_string());
        put("search_context", self.search_context.to_string());
        put("template_context", self.template_context.to_string());
        put("center_jitter", self.center_jitter.to_string());
        put("scale_jitter", self.scale_jitter.to_string());
        out
    }

    /// Apply `key=value` overrides on top of `self`; unknown keys are
    /// rejected.
    pub fn apply_kv(&mut self, kv: &[(String, String)]) -> Result<()> {
        for (k, v) in kv {
            let bad =
                |e: std::num::ParseFloatError| Error::domain(format!("bad value for {k}: {e}"));
            let bad_int =
                |e: std::num::ParseIntError| Error::domain(format!("bad value for {k}: {e}"));
            match k.as_str() {
                "lr" => self.lr = v.parse().map_err(bad)?,
                "lr_decay_factor" => self.lr_decay_factor = v.parse().map_err(bad)?,
                "phase1_epochs" => self.phase1_epochs = v.parse().map_err(bad_int)?,
                "phase1_decay_epoch" => self.phase1_decay_epoch = v.parse().map_err(bad_int)?,
                "phase2_epochs" => self.phase2_epochs = v.parse().map_err(bad_int)?,
                "phase2_decay_epoch" => self.phase2_decay_epoch = v.parse().map_err(bad_int)?,
                "steps_per_epoch" => self.steps_per_epoch = v.parse().map_err(bad_int)?,
                "batch_size" => self.batch_size = v.parse().map_err(bad_int)?,
                "lambda_giou" => self.lambda_giou = v.parse().map_err(bad)?,
                "lambda_l1" => self.lambda_l1 = v.parse().map_err(bad)?,
                "transparent_weight" => self.transparent_weight = v.parse().map_err(bad_int)?,
                "opaque_weight" => self.opaque_weight = v.parse().map_err(bad_int)?,
                "frame_window" => self.frame_window = v.parse().map_err(bad_int)?,
                "search_context" => self.search_context = v.parse().map_err(bad)?,
                "template_context" => self.template_context = v.parse().map_err(bad)?,
                "center_jitter" => self.center_jitter = v.parse().map_err(bad)?,
                "scale_jitter" => self.scale_jitter = v.parse().map_err(bad)?,
                _ => return Err(Error::domain(format!("unknown training config key {k:?}"))),
            }
        }
        Ok(())
    }
}

/// Weighted box loss: `lambda_giou * (1 - GIoU) + lambda_l1 * L1` with the
/// L1 term on (x, y, w, h) normalized by the patch dimensions.
pub fn loss_bb(
    pred: &BoundingBox,
    gt: &BoundingBox,
    norm: (f64, f64),
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(cfg.lambda_giou * geom::giou_loss(pred, gt)?
        + cfg.lambda_l1 * geom::l1_box_loss(pred, gt, norm)?)
}

/// Mean per-cell binary cross-entropy with logits.
pub fn loss_aux(logits: &Array2<f64>, m_gt: &Array2<f64>) -> f64 {
    assert_eq!(logits.dim(), m_gt.dim());
    let mut acc = 0.0;
    for (&z, &t) in logits.iter().zip(m_gt.iter()) {
        acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    acc / logits.len() as f64
}

/// Phase-1 total: box loss plus auxiliary mask loss.
pub fn loss_phase1(
    pred: &BoundingBox,
    gt: &BoundingBox,
    norm: (f64, f64),
    logits: &Array2<f64>,
    m_gt: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(loss_bb(pred, gt, norm, cfg)? + loss_aux(logits, m_gt))
}

/// Phase-2 score cross-entropy `-[y ln s + (1 - y) ln(1 - s)]`.
pub fn loss_phase2(score: f64, label: u8) -> Result<f64> {
    if !(0.0..1.0).contains(&score) || score == 0.0 {
        return Err(Error::domain(format!(
            "score {score} outside the open interval (0, 1)"
        )));
    }
    let y = label as f64;
    Ok(-(y * score.ln() + (1.0 - y) * (1.0 - score).ln()))
}

/// On-tape version of [`loss_bb`] for a `(1, 4)` predicted box var against
/// a constant ground-truth box, so gradients flow through the soft-argmax.
pub fn loss_bb_var(
    tape: &mut Tape,
    box_var: Var,
    gt: &BoundingBox,
    norm: (f64, f64),
    cfg: &TrainConfig,
) -> Var {
    let x = tape.slice_cols(box_var, 0, 1);
    let y = tape.slice_cols(box_var, 1, 1);
    let w = tape.slice_cols(box_var, 2, 1);
    let h = tape.slice_cols(box_var, 3, 1);
    let x2 = tape.add(x, w);
    let y2 = tape.add(y, h);
    let gx = tape.scalar(gt.x);
    let gy = tape.scalar(gt.y);
    let gx2 = tape.scalar(gt.right());
    let gy2 = tape.scalar(gt.bottom());

    // Intersection, union, enclosing hull.
    let ix1 = tape.maximum(x, gx);
    let iy1 = tape.maximum(y, gy);
    let ix2 = tape.minimum(x2, gx2);
    let iy2 = tape.minimum(y2, gy2);
    let iw_raw = tape.sub(ix2, ix1);
    let ih_raw = tape.sub(iy2, iy1);
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);
    let area_pred = tape.mul(w, h);
    let gt_area = tape.scalar(gt.area());
    let sum_areas = tape.add(area_pred, gt_area);
    let union = tape.sub(sum_areas, inter);
    let hx1 = tape.minimum(x, gx);
    let hy1 = tape.minimum(y, gy);
    let hx2 = tape.maximum(x2, gx2);
    let hy2 = tape.maximum(y2, gy2);
    let hw = tape.sub(hx2, hx1);
    let hh = tape.sub(hy2, hy1);
    let hull = tape.mul(hw, hh);
    let iou = tape.div(inter, union);
    let empty = tape.sub(hull, union);
    let empty_frac = tape.div(empty, hull);
    let giou = tape.sub(iou, empty_frac);
    let neg_giou = tape.scale(giou, -1.0);
    let giou_loss = tape.add_scalar(neg_giou, 1.0);

    // Normalized L1 over the four coordinates.
    let (w_im, h_im) = norm;
    let dx = tape.sub(x, gx);
    let dy = tape.sub(y, gy);
    let gw = tape.scalar(gt.w);
    let gh = tape.scalar(gt.h);
    let dw = tape.sub(w, gw);
    let dh = tape.sub(h, gh);
    let adx = tape.abs(dx);
    let ady = tape.abs(dy);
    let adw = tape.abs(dw);
    let adh = tape.abs(dh);
    let sx = tape.scale(adx, 1.0 / w_im);
    let sy = tape.scale(ady, 1.0 / h_im);
    let sw = tape.scale(adw, 1.0 / w_im);
    let sh = tape.scale(adh, 1.0 / h_im);
    let sum_xy = tape.add(sx, sy);
    let sum_wh = tape.add(sw, sh);
    let sum = tape.add(sum_xy, sum_wh);
    let l1 = tape.scale(sum, 0.25);

    let weighted_giou = tape.scale(giou_loss, cfg.lambda_giou);
    let weighted_l1 = tape.scale(l1, cfg.lambda_l1);
    tape.add(weighted_giou, weighted_l1)
}

pub struct TrainReport {
    pub steps: u32,
    pub mean_last_losses: f64,
}

fn write_log(path: Option<&Path>, content: &str) -> Result<()> {
    if let Some(path) = path {
        std::fs::write(path, content).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Phase 1: train everything except the score module.
pub fn train_phase1(
    model: &mut Model,
    pool: &SamplePool,
    cfg: &TrainConfig,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&model.params);
    let mask = model.non_spm_mask();
    let schedule = cfg.phase1_schedule();
    let total_steps = cfg.phase1_steps();
    let mut log = String::from("step,loss_bb,loss_aux,lr\n");
    let mut recent = Vec::new();
    let norm = (model.cfg.input_size as f64, model.cfg.input_size as f64);

    for step in 1..=total_steps {
        let epoch = (step - 1) / cfg.steps_per_epoch + 1;
        let lr = schedule.lr_at_epoch(epoch);
        let mut grads = Gradients::zeros(model.params.len());
        let mut batch_bb = 0.0;
        let mut batch_aux = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = sample_phase1(pool, &mut rng, &model.cfg, cfg)?;
            let templates: Vec<TemplateInput> = sample
                .templates
                .iter()
                .map(|(patch, bbox)| TemplateInput {
                    source: TemplateSource::Patch(patch.clone()),
                    box_in_patch: *bbox,
                    include_in_pose: true,
                    slot: 0,
                })
                .collect();
            let mut fwd = model.begin();
            let out = fwd.localize_pipeline(&templates, &sample.search_patch)?;
            let bb = loss_bb_var(
                &mut fwd.tape,
                out.localize.box_var,
                &sample.gt_box_patch,
                norm,
                cfg,
            );
            batch_bb += fwd.tape.scalar_value(bb);
            // The auxiliary loss guides the distractor branch; skip it when
            // that branch is ablated away.
            let total = if model.cfg.ablation.disable_dis {
                bb
            } else {
                let aux = fwd
                    .tape
                    .bce_with_logits(out.aux_logits, sample.gt_cells.clone());
                batch_aux += fwd.tape.scalar_value(aux);
                fwd.tape.add(bb, aux)
            };
            let sample_grads = fwd.tape.backward(total, model.params.len());
            grads.accumulate(&sample_grads);
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        adam.step(&mut model.params, &grads, lr, Some(&mask));
        let bb_mean = batch_bb / cfg.batch_size as f64;
        let aux_mean = batch_aux / cfg.batch_size as f64;
        let _ = writeln!(log, "{step},{bb_mean},{aux_mean},{lr}");
        recent.push(bb_mean + aux_mean);
        if recent.len() > 25 {
            recent.remove(0);
        }
    }
    write_log(log_path, &log)?;
    Ok(TrainReport {
        steps: total_steps,
        mean_last_losses: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
    })
}

/// Phase 2: freeze everything except the score module and train it on
/// balanced positive/negative pairs.
pub fn train_phase2(
    model: &mut Model,
    pool: &SamplePool,
    cfg: &TrainConfig,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&model.params);
    let mask = model.spm_mask();
    let schedule = cfg.phase2_schedule();
    let total_steps = cfg.phase2_steps();
    let mut log = String::from("step,loss_ce,lr\n");
    let mut recent = Vec::new();

    for step in 1..=total_steps {
        let epoch = (step - 1) / cfg.steps_per_epoch + 1;
        let lr = schedule.lr_at_epoch(epoch);
        let mut grads = Gradients::zeros(model.params.len());
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = sample_phase2(pool, &mut rng, &model.cfg, cfg)?;
            let loss = phase2_sample_loss(model, &sample)?;
            batch_loss += loss.1;
            grads.accumulate(&loss.0);
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        adam.step(&mut model.params, &grads, lr, Some(&mask));
        let mean = batch_loss / cfg.batch_size as f64;
        let _ = writeln!(log, "{step},{mean},{lr}");
        recent.push(mean);
        if recent.len() > 25 {
            recent.remove(0);
        }
    }
    write_log(log_path, &log)?;
    Ok(TrainReport {
        steps: total_steps,
        mean_last_losses: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
    })
}

/// Forward one score-training pair and return its gradients and loss.
fn phase2_sample_loss(model: &Model, sample: &Phase2Sample) -> Result<(Gradients, f64)> {
    let templates = vec![TemplateInput {
        source: TemplateSource::Patch(sample.template_patch.clone()),
        box_in_patch: sample.template_box_patch,
        include_in_pose: true,
        slot: 0,
    }];
    let mut fwd = model.begin();
    let (t_fused, s_fused) = fwd.encode_and_fuse(&templates, &sample.search_patch)?;
    let f0_star = crate::model::branches::crop_template_features_or_center(
        &mut fwd.tape,
        t_fused[0],
        &sample.template_box_patch,
        &model.cfg,
    )?;
    let roi_box = crate::model::branches::ensure_covers_cell(&sample.gt_box_patch, &model.cfg);
    let spm = fwd.spm_score(s_fused, &roi_box, f0_star);
    let logit = spm
        .logit
        .ok_or_else(|| Error::domain("score box covers no feature cell"))?;
    let targets = Array2::from_elem((1, 1), sample.label as f64);
    let loss = fwd.tape.bce_with_logits(logit, targets);
    let value = fwd.tape.scalar_value(loss);
    Ok((fwd.tape.backward(loss, model.params.len()), value))
}

/// Mean score over labeled pairs (evaluation helper for score training).
pub fn mean_scores(model: &Model, samples: &[Phase2Sample]) -> Result<(f64, f64)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for sample in samples {
        let templates = vec![TemplateInput {
            source: TemplateSource::Patch(sample.template_patch.clone()),
            box_in_patch: sample.template_box_patch,
            include_in_pose: true,
            slot: 0,
        }];
        let mut fwd = model.begin();
        let (t_fused, s_fused) = fwd.encode_and_fuse(&templates, &sample.search_patch)?;
        let f0_star = crate::model::branches::crop_template_features_or_center(
            &mut fwd.tape,
            t_fused[0],
            &sample.template_box_patch,
            &model.cfg,
        )?;
        let roi_box = crate::model::branches::ensure_covers_cell(&sample.gt_box_patch, &model.cfg);
        let spm = fwd.spm_score(s_fused, &roi_box, f0_star);
        if sample.label == 1 {
            pos.push(spm.score);
        } else {
            neg.push(spm.score);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((mean(&pos), mean(&neg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn loss_bb_worked_example() {
        let cfg = TrainConfig::full();
        let pred = bb(0.0, 0.0, 1.0, 1.0);
        let gt = bb(2.0, 0.0, 1.0, 1.0);
        // 2 * (4/3) + 5 * ((2/320 + 0 + 0 + 0) / 4)
        let expected = 2.0 * (4.0 / 3.0) + 5.0 * (2.0 / 320.0) / 4.0;
        let got = loss_bb(&pred, &gt, (320.0, 320.0), &cfg).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert_eq!(loss_bb(&pred, &pred, (320.0, 320.0), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn loss_bb_decreases_on_approach() {
        let cfg = TrainConfig::full();
        let gt = bb(100.0, 80.0, 40.0, 30.0);
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let t = k as f64 / 19.0;
            let pred = bb(100.0 - 60.0 * (1.0 - t), 80.0 - 44.0 * (1.0 - t), 40.0, 30.0);
            let loss = loss_bb(&pred, &gt, (320.0, 320.0), &cfg).unwrap();
            assert!(loss < last, "loss {loss} did not decrease at step {k}");
            last = loss;
        }
        assert!(last.abs() < 1e-12);
    }

    #[test]
    fn loss_aux_cases() {
        let zeros = Array2::zeros((12, 1));
        let targets = Array2::from_elem((12, 1), 1.0);
        assert!((loss_aux(&zeros, &targets) - std::f64::consts::LN_2).abs() < 1e-12);
        // Saturated correct logits drive the loss to zero.
        let mut logits = Array2::from_elem((12, 1), -50.0);
        let mut t2 = Array2::zeros((12, 1));
        for i in 0..6 {
            logits[[i, 0]] = 50.0;
            t2[[i, 0]] = 1.0;
        }
        assert!(loss_aux(&logits, &t2) < 1e-12);
    }

    #[test]
    fn loss_phase2_cases() {
        assert!(loss_phase2(1.0 - 1e-12, 1).unwrap() < 1e-9);
        assert!((loss_phase2(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss_phase2(0.5, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_phase2(0.0, 1).is_err());
        assert!(loss_phase2(1.0, 1).is_err());
    }

    #[test]
    fn tape_loss_matches_numeric_loss() {
        let cfg = TrainConfig::full();
        let cases = [
            (bb(10.0, 12.0, 30.0, 20.0), bb(15.0, 10.0, 25.0, 30.0)),
            (bb(0.0, 0.0, 10.0, 10.0), bb(50.0, 60.0, 10.0, 10.0)),
            (bb(5.0, 5.0, 50.0, 50.0), bb(10.0, 10.0, 20.0, 20.0)),
        ];
        for (pred, gt) in cases {
            let mut tape = Tape::new();
            let pv = tape.constant(ndarray::arr2(&[[pred.x, pred.y, pred.w, pred.h]]));
            let var = loss_bb_var(&mut tape, pv, &gt, (320.0, 320.0), &cfg);
            let numeric = loss_bb(&pred, &gt, (320.0, 320.0), &cfg).unwrap();
            assert!(
                (tape.scalar_value(var) - numeric).abs() < 1e-9,
                "tape {} vs numeric {numeric}",
                tape.scalar_value(var)
            );
        }
    }

    #[test]
    fn loss_phase1_is_additive() {
        let cfg = TrainConfig::full();
        let pred = bb(8.0, 8.0, 30.0, 30.0);
        let gt = bb(10.0, 10.0, 30.0, 30.0);
        let logits = Array2::from_elem((16, 1), 0.3);
        let m_gt = Array2::zeros((16, 1));
        let total = loss_phase1(&pred, &gt, (128.0, 128.0), &logits, &m_gt, &cfg).unwrap();
        let parts = loss_bb(&pred, &gt, (128.0, 128.0), &cfg).unwrap() + loss_aux(&logits, &m_gt);
        assert_eq!(total, parts);
    }

    #[test]
    fn overfit_single_sample_reduces_loss_tenfold() {
        use crate::model::ModelConfig;
        let mcfg = ModelConfig::tiny();
        let mut model = Model::new(mcfg, 3).unwrap();
        let tcfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::desk()
        };
        let norm = (mcfg.input_size as f64, mcfg.input_size as f64);
        // One fixed sample.
        let size = mcfg.input_size;
        let patch = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
            ((r + 2 * c + 3 * ch) as f64 * 0.05).sin() * 0.5 + 0.5
        });
        let gt = bb(18.0, 14.0, 28.0, 30.0);
        let mut gt_cells = Array2::zeros((mcfg.cells(), 1));
        for cell in crate::model::cells_under_box(&gt, &mcfg) {
            gt_cells[[cell, 0]] = 1.0;
        }
        let mut adam = Adam::new(&model.params);
        let mask = model.non_spm_mask();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let templates = vec![TemplateInput {
                source: TemplateSource::Patch(patch.clone()),
                box_in_patch: gt,
                include_in_pose: true,
                slot: 0,
            }];
            let mut fwd = model.begin();
            let out = fwd.localize_pipeline(&templates, &patch).unwrap();
            let bbv = loss_bb_var(&mut fwd.tape, out.localize.box_var, &gt, norm, &tcfg);
            let aux = fwd.tape.bce_with_logits(out.aux_logits, gt_cells.clone());
            let total = fwd.tape.add(bbv, aux);
            last = fwd.tape.scalar_value(total);
            first.get_or_insert(last);
            let grads = fwd.tape.backward(total, model.params.len());
            adam.step(&mut model.params, &grads, 3e-3, Some(&mask));
        }
        let first = first.unwrap();
        assert!(
            last <= first / 10.0,
            "loss went from {first} to {last}, less than 10x"
        );
    }

    #[test]
    fn phase2_freezes_non_spm_weights() {
        use crate::model::ModelConfig;
        use crate::seqgen::{
            crossing_suite_spec, render_sequence, BackgroundSource, GeneratorConfig,
        };
        let mcfg = ModelConfig::tiny();
        let mut model = Model::new(mcfg, 4).unwrap();
        let gen_cfg = GeneratorConfig {
            width: 96,
            height: 72,
            alpha_override: None,
        };
        let seqs: Vec<_> = (0..2)
            .map(|i| {
                let mut spec = crossing_suite_spec(i, 900, 4);
                spec.distractor = false;
                render_sequence(&spec, &BackgroundSource::Procedural, &gen_cfg).unwrap()
            })
            .collect();
        let pool = SamplePool::transparent_only(seqs);
        let tcfg = TrainConfig {
            batch_size: 2,
            steps_per_epoch: 3,
            phase2_epochs: 2,
            phase2_decay_epoch: 1,
            ..TrainConfig::desk()
        };
        let before: Vec<_> = (0..model.params.len())
            .filter(|&i| !model.params.name(i).starts_with("spm."))
            .map(|i| (i, model.params.value(i).clone()))
            .collect();
        let spm_before: Vec<_> = model
            .params
            .indices_with_prefix("spm.")
            .iter()
            .map(|&i| model.params.value(i).clone())
            .collect();
        train_phase2(&mut model, &pool, &tcfg, 7, None).unwrap();
        for (i, snapshot) in &before {
            assert_eq!(
                model.params.value(*i),
                snapshot,
                "non-SPM weight {} changed",
                model.params.name(*i)
            );
        }
        let spm_after: Vec<_> = model
            .params
            .indices_with_prefix("spm.")
            .iter()
            .map(|&i| model.params.value(i).clone())
            .collect();
        assert_ne!(spm_before, spm_after, "SPM weights did not move");
    }

    #[test]
    fn config_kv_round_trip_and_unknown_key() {
        let cfg = TrainConfig::desk();
        let text = cfg.to_kv();
        let kv: Vec<(String, String)> = text
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        let mut rebuilt = TrainConfig::full();
        rebuilt.apply_kv(&kv).unwrap();
        assert_eq!(rebuilt, cfg);
        let mut bad = TrainConfig::full();
        assert!(bad
            .apply_kv(&[("nonsense".to_string(), "1".to_string())])
            .is_err());
    }
}
