//! Training-sample construction: crops around ground-truth boxes, the 5:3
//! transparent/opaque pool mix, the 200-frame template window for
//! localization training, and the balanced positive/negative pairs for
//! score training.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{crop_resize, BoundingBox};
use crate::model::{cells_under_box, ModelConfig};
use crate::seqgen::SequenceRecord;

use super::TrainConfig;

/// In-memory training pools. The transparent pool is sampled with weight
/// 5, the opaque pool with weight 3; an empty opaque pool falls back to
/// transparent-only sampling (and vice versa).
pub struct SamplePool {
    pub transparent: Vec<SequenceRecord>,
    pub opaque: Vec<SequenceRecord>,
}

impl SamplePool {
    pub fn transparent_only(seqs: Vec<SequenceRecord>) -> SamplePool {
        SamplePool {
            transparent: seqs,
            opaque: Vec::new(),
        }
    }

    pub fn total_sequences(&self) -> usize {
        self.transparent.len() + self.opaque.len()
    }

    fn validate(&self) -> Result<()> {
        if self.total_sequences() == 0 {
            return Err(Error::usage("sample pool is empty"));
        }
        Ok(())
    }

    /// Pick a pool by the 5:3 rule, then a sequence uniformly within it.
    fn pick_sequence<'a>(
        &'a self,
        rng: &mut impl Rng,
        cfg: &TrainConfig,
    ) -> (&'a SequenceRecord, bool) {
        let w_t = if self.transparent.is_empty() {
            0
        } else {
            cfg.transparent_weight
        };
        let w_o = if self.opaque.is_empty() {
            0
        } else {
            cfg.opaque_weight
        };
        let take_transparent = if w_o == 0 {
            true
        } else if w_t == 0 {
            false
        } else {
            rng.random_range(0..w_t + w_o) < w_t
        };
        let pool = if take_transparent {
            &self.transparent
        } else {
            &self.opaque
        };
        (&pool[rng.random_range(0..pool.len())], take_transparent)
    }

    /// All sequences, transparent first (used for negative pairs).
    fn sequence(&self, idx: usize) -> &SequenceRecord {
        if idx < self.transparent.len() {
            &self.transparent[idx]
        } else {
            &self.opaque[idx - self.transparent.len()]
        }
    }
}

/// One localization-training sample.
pub struct Phase1Sample {
    pub search_patch: Array3<f64>,
    /// Ground-truth box mapped into search-patch pixels.
    pub gt_box_patch: BoundingBox,
    /// `(HW, 1)` cell mask of the ground-truth box at feature resolution.
    pub gt_cells: Array2<f64>,
    /// Two template patches with their boxes in template-patch pixels.
    pub templates: Vec<(Array3<f64>, BoundingBox)>,
    pub from_transparent_pool: bool,
    /// Frame indices (search, template a, template b) for window checks.
    pub frames: (usize, usize, usize),
}

/// One score-training sample.
pub struct Phase2Sample {
    pub search_patch: Array3<f64>,
    /// Box fed to the score module, in search-patch pixels (the search
    /// frame's ground truth).
    pub gt_box_patch: BoundingBox,
    pub template_patch: Array3<f64>,
    pub template_box_patch: BoundingBox,
    pub label: u8,
}

/// Template crop around its ground-truth box (no jitter).
pub fn template_crop(
    record: &SequenceRecord,
    frame: usize,
    context: f64,
    mcfg: &ModelConfig,
) -> Result<(Array3<f64>, BoundingBox)> {
    let gt = record.target_boxes[frame];
    let (patch, transform) = crop_resize(
        &record.frames[frame],
        &gt,
        context,
        mcfg.input_size,
    )?;
    Ok((patch, transform.image_to_patch(&gt)))
}

/// Search crop around a jittered ground-truth box, so the target is not
/// always centered; returns the patch and the true box in patch pixels.
pub fn search_crop(
    record: &SequenceRecord,
    frame: usize,
    context: f64,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Array3<f64>, BoundingBox)> {
    let gt = record.target_boxes[frame];
    let scale = (gt.w * gt.h).sqrt();
    let dx = (rng.random::<f64>() * 2.0 - 1.0) * cfg.center_jitter * scale;
    let dy = (rng.random::<f64>() * 2.0 - 1.0) * cfg.center_jitter * scale;
    let context_jitter =
        context * ((rng.random::<f64>() * 2.0 - 1.0) * cfg.scale_jitter).exp();
    let anchor = BoundingBox {
        x: gt.x + dx,
        y: gt.y + dy,
        w: gt.w,
        h: gt.h,
    };
    let (patch, transform) = crop_resize(
        &record.frames[frame],
        &anchor,
        context_jitter.max(1.0),
        mcfg.input_size,
    )?;
    Ok((patch, transform.image_to_patch(&gt)))
}

/// Draw a localization sample: pool by the 5:3 rule, a random search frame,
/// and two template frames within the configured window of it.
pub fn sample_phase1(
    pool: &SamplePool,
    rng: &mut impl Rng,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Phase1Sample> {
    pool.validate()?;
    let (record, from_transparent) = pool.pick_sequence(rng, cfg);
    let n = record.frame_count();
    let search_frame = rng.random_range(0..n);
    let window = cfg.frame_window as usize;
    let lo = search_frame.saturating_sub(window);
    let hi = (search_frame + window).min(n - 1);
    let mut pick_template_frame = || rng.random_range(lo..=hi);
    let ta = pick_template_frame();
    let tb = pick_template_frame();

    let (search_patch, gt_box_patch) =
        search_crop(record, search_frame, cfg.search_context, mcfg, cfg, rng)?;
    let mut gt_cells = Array2::zeros((mcfg.cells(), 1));
    for cell in cells_under_box(&gt_box_patch, mcfg) {
        gt_cells[[cell, 0]] = 1.0;
    }
    let templates = vec![
        template_crop(record, ta, cfg.template_context, mcfg)?,
        template_crop(record, tb, cfg.template_context, mcfg)?,
    ];
    Ok(Phase1Sample {
        search_patch,
        gt_box_patch,
        gt_cells,
        templates,
        from_transparent_pool: from_transparent,
        frames: (search_frame, ta, tb),
    })
}

/// Draw a score sample: positives pair a template and search frame from
/// one sequence, negatives from two different sequences; labels are
/// balanced.
pub fn sample_phase2(
    pool: &SamplePool,
    rng: &mut impl Rng,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Phase2Sample> {
    pool.validate()?;
    let total = pool.total_sequences();
    let positive = rng.random::<f64>() < 0.5;
    let (template_seq, search_seq) = if positive || total < 2 {
        let idx = rng.random_range(0..total);
        (idx, idx)
    } else {
        let a = rng.random_range(0..total);
        let b = loop {
            let b = rng.random_range(0..total);
            if b != a {
                break b;
            }
        };
        (a, b)
    };
    let t_rec = pool.sequence(template_seq);
    let s_rec = pool.sequence(search_seq);
    let t_frame = rng.random_range(0..t_rec.frame_count());
    let s_frame = rng.random_range(0..s_rec.frame_count());
    let (template_patch, template_box_patch) =
        template_crop(t_rec, t_frame, cfg.template_context, mcfg)?;
    let (search_patch, gt_box_patch) =
        search_crop(s_rec, s_frame, cfg.search_context, mcfg, cfg, rng)?;
    Ok(Phase2Sample {
        search_patch,
        gt_box_patch,
        template_patch,
        template_box_patch,
        label: u8::from(template_seq == search_seq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqgen::{
        crossing_suite_spec, render_sequence, BackgroundSource, GeneratorConfig,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_pool(n_transparent: usize, n_opaque: usize) -> SamplePool {
        let cfg = GeneratorConfig {
            width: 96,
            height: 72,
            alpha_override: None,
        };
        let opaque_cfg = GeneratorConfig {
            alpha_override: Some(1.0),
            ..cfg.clone()
        };
        let render = |i: u32, opaque: bool| {
            let mut spec = crossing_suite_spec(i, 500 + i as u64, 6);
            spec.distractor = false;
            let c = if opaque { &opaque_cfg } else { &cfg };
            render_sequence(&spec, &BackgroundSource::Procedural, c).unwrap()
        };
        SamplePool {
            transparent: (0..n_transparent as u32).map(|i| render(i, false)).collect(),
            opaque: (0..n_opaque as u32).map(|i| render(100 + i, true)).collect(),
        }
    }

    #[test]
    fn phase1_pool_mix_and_window() {
        let pool = tiny_pool(3, 3);
        let mcfg = ModelConfig::tiny();
        let tcfg = TrainConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 8000;
        let mut transparent = 0usize;
        for _ in 0..n {
            let s = sample_phase1(&pool, &mut rng, &mcfg, &tcfg).unwrap();
            if s.from_transparent_pool {
                transparent += 1;
            }
            let (sf, ta, tb) = s.frames;
            assert!(ta.abs_diff(sf) <= tcfg.frame_window as usize);
            assert!(tb.abs_diff(sf) <= tcfg.frame_window as usize);
            assert_eq!(s.templates.len(), 2);
        }
        let frac = transparent as f64 / n as f64;
        assert!((frac - 0.625).abs() <= 0.02, "transparent fraction {frac}");
    }

    #[test]
    fn phase1_deterministic_under_seed() {
        let pool = tiny_pool(2, 0);
        let mcfg = ModelConfig::tiny();
        let tcfg = TrainConfig::desk();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let sa = sample_phase1(&pool, &mut a, &mcfg, &tcfg).unwrap();
        let sb = sample_phase1(&pool, &mut b, &mcfg, &tcfg).unwrap();
        assert_eq!(sa.gt_box_patch, sb.gt_box_patch);
        assert_eq!(sa.search_patch, sb.search_patch);
        assert_eq!(sa.frames, sb.frames);
    }

    #[test]
    fn phase2_label_marginal_and_negative_rule() {
        let pool = tiny_pool(4, 2);
        let mcfg = ModelConfig::tiny();
        let tcfg = TrainConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 8000;
        let mut pos = 0usize;
        for _ in 0..n {
            let s = sample_phase2(&pool, &mut rng, &mcfg, &tcfg).unwrap();
            pos += s.label as usize;
        }
        let frac = pos as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "positive fraction {frac}");
    }

    #[test]
    fn gt_cells_match_box_footprint() {
        let pool = tiny_pool(1, 0);
        let mcfg = ModelConfig::tiny();
        let tcfg = TrainConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_phase1(&pool, &mut rng, &mcfg, &tcfg).unwrap();
        let expected: f64 = cells_under_box(&s.gt_box_patch, &mcfg).len() as f64;
        assert_eq!(s.gt_cells.sum(), expected);
        assert!(expected > 0.0, "ground-truth box must cover cells");
    }
}
