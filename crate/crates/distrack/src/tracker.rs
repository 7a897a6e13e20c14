//! The online tracking loop: initialization, per-frame localization,
//! score-gated template-set maintenance and coordinate mapping back to
//! image space.
//!
//! The template set keeps the initial template in slot 0 forever; a new
//! template is appended every `update_interval` tracked frames when the
//! confidence gate is open, evicting the oldest non-initial entry beyond
//! the capacity. A separate previous-frame template refreshes every
//! confident frame and feeds only the distractor-aware branch.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geom::{crop_resize, BoundingBox};
use crate::img::Image;
use crate::model::{branches, Model, TemplateInput, TemplateSource};

#[derive(Debug, Clone, Copy)]
pub struct TrackerConfig {
    pub search_context: f64,
    pub template_context: f64,
    /// Append a template every this many tracked frames.
    pub update_interval: u32,
    /// Confidence gate for both the periodic append and the
    /// previous-frame refresh.
    pub confidence_gate: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            search_context: 4.0,
            template_context: 4.0,
            update_interval: 10,
            confidence_gate: 0.5,
        }
    }
}

/// A stored template: its patch, box (patch coordinates) and cached
/// backbone features.
#[derive(Debug, Clone)]
pub struct TemplateEntry {
    pub patch: Array3<f64>,
    pub box_in_patch: BoundingBox,
    pub features: Array2<f64>,
    pub birth_frame: u32,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    /// Slot 0 is the initial template and is never evicted.
    templates: Vec<TemplateEntry>,
    /// Previous-frame template; feeds the distractor-aware branch only.
    recent: Option<TemplateEntry>,
    pub last_box: BoundingBox,
    pub frame_index: u32,
    pub last_score: f64,
}

impl TrackerState {
    pub fn template_count(&self) -> usize {
        self.templates.len()
    }

    pub fn birth_frames(&self) -> Vec<u32> {
        self.templates.iter().map(|t| t.birth_frame).collect()
    }

    pub fn recent_birth_frame(&self) -> Option<u32> {
        self.recent.as_ref().map(|t| t.birth_frame)
    }
}

/// What the template-maintenance rules decide for one tracked frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateDecision {
    pub refresh_recent: bool,
    pub append: bool,
}

/// Pure maintenance rule: both the periodic append (every
/// `update_interval` tracked frames) and the per-frame recent refresh are
/// gated on `score > confidence_gate`.
pub fn update_decision(cfg: &TrackerConfig, frame_index: u32, score: f64) -> UpdateDecision {
    let confident = score > cfg.confidence_gate;
    UpdateDecision {
        refresh_recent: confident,
        append: confident && frame_index % cfg.update_interval == 0,
    }
}

/// Result of one tracked frame.
#[derive(Debug, Clone)]
pub struct TrackStep {
    /// Predicted box in image coordinates, clamped inside the frame.
    pub bbox: BoundingBox,
    pub score: f64,
    /// The corner head produced a non-increasing corner pair and the 1-px
    /// clamp engaged, or the score box covered no feature cell.
    pub low_quality: bool,
    /// Template birth frames that fed each branch this frame.
    pub pose_inputs: Vec<usize>,
    pub dis_inputs: Vec<usize>,
}

pub struct Tracker<'m> {
    pub model: &'m Model,
    pub cfg: TrackerConfig,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, cfg: TrackerConfig) -> Tracker<'m> {
        Tracker { model, cfg }
    }

    /// Crop a template patch around `bbox` and cache its backbone features.
    fn make_template(
        &self,
        frame: &Image,
        bbox: &BoundingBox,
        birth_frame: u32,
    ) -> Result<TemplateEntry> {
        let (patch, transform) = crop_resize(
            frame,
            bbox,
            self.cfg.template_context,
            self.model.cfg.input_size,
        )?;
        let box_in_patch = transform.image_to_patch(bbox);
        let mut fwd = self.model.begin();
        let feats = fwd.encode_patch(&patch)?;
        let features = fwd.tape.value(feats).clone();
        Ok(TemplateEntry {
            patch,
            box_in_patch,
            features,
            birth_frame,
        })
    }

    /// Initialize on the first frame's ground-truth box.
    pub fn init(&self, frame: &Image, gt_box: &BoundingBox) -> Result<TrackerState> {
        gt_box.validate()?;
        let initial = self.make_template(frame, gt_box, 0)?;
        Ok(TrackerState {
            recent: Some(initial.clone()),
            templates: vec![initial],
            last_box: *gt_box,
            frame_index: 0,
            last_score: 1.0,
        })
    }

    /// Track one frame: crop the search region around the last box, run
    /// the localization pipeline, map the box back to image coordinates,
    /// score it, and maintain the template set.
    pub fn track_frame(&self, state: &mut TrackerState, frame: &Image) -> Result<TrackStep> {
        if state.templates.is_empty() {
            return Err(Error::usage("tracker used before init"));
        }
        state.frame_index += 1;
        let model = self.model;
        let (search_patch, transform) = crop_resize(
            frame,
            &state.last_box,
            self.cfg.search_context,
            model.cfg.input_size,
        )?;

        let mut inputs: Vec<TemplateInput> = state
            .templates
            .iter()
            .map(|t| TemplateInput {
                source: TemplateSource::Cached(t.features.clone()),
                box_in_patch: t.box_in_patch,
                include_in_pose: true,
                slot: t.birth_frame as usize,
            })
            .collect();
        if !model.cfg.ablation.disable_recent {
            if let Some(recent) = &state.recent {
                inputs.push(TemplateInput {
                    source: TemplateSource::Cached(recent.features.clone()),
                    box_in_patch: recent.box_in_patch,
                    include_in_pose: false,
                    slot: recent.birth_frame as usize,
                });
            }
        }

        let mut fwd = model.begin();
        let out = fwd.localize_pipeline(&inputs, &search_patch)?;
        let patch_box = out.localize.bbox;
        let f0_star = branches::crop_template_features_or_center(
            &mut fwd.tape,
            out.templates_fused[0],
            &state.templates[0].box_in_patch,
            &model.cfg,
        )?;
        let spm = fwd.spm_score(out.search_fused, &patch_box, f0_star);
        let score = spm.score;
        let low_quality = out.localize.degenerate || spm.degenerate;

        let image_box = transform
            .patch_to_image(&patch_box)
            .clamp_to(frame.width() as f64, frame.height() as f64);
        state.last_box = image_box;
        state.last_score = score;
        let step = TrackStep {
            bbox: image_box,
            score,
            low_quality,
            pose_inputs: fwd.pose_slots.clone(),
            dis_inputs: fwd.dis_slots.clone(),
        };
        self.update_templates(state, frame, &image_box, score)?;
        Ok(step)
    }

    /// Apply the maintenance rules after a tracked frame.
    pub fn update_templates(
        &self,
        state: &mut TrackerState,
        frame: &Image,
        bbox: &BoundingBox,
        score: f64,
    ) -> Result<()> {
        let decision = update_decision(&self.cfg, state.frame_index, score);
        if !decision.refresh_recent && !decision.append {
            return Ok(());
        }
        let entry = self.make_template(frame, bbox, state.frame_index)?;
        if decision.refresh_recent {
            state.recent = Some(entry.clone());
        }
        if decision.append {
            state.templates.push(entry);
            if state.templates.len() > self.model.cfg.template_count {
                // Evict the oldest entry, never slot 0.
                let evict = state
                    .templates
                    .iter()
                    .enumerate()
                    .skip(1)
                    .min_by_key(|(_, t)| t.birth_frame)
                    .map(|(i, _)| i)
                    .expect("capacity exceeded implies a non-initial entry");
                state.templates.remove(evict);
            }
        }
        Ok(())
    }

    /// Run a whole sequence: initialize on `init_box`, track every later
    /// frame. Returns per-frame boxes (frame 0 echoes the init box) and
    /// confidence scores (frame 0 reports 1.0).
    pub fn track_sequence(
        &self,
        frames: &[Image],
        init_box: &BoundingBox,
    ) -> Result<(Vec<BoundingBox>, Vec<f64>)> {
        if frames.is_empty() {
            return Err(Error::usage("empty sequence"));
        }
        let mut state = self.init(&frames[0], init_box)?;
        let mut boxes = vec![*init_box];
        let mut scores = vec![1.0];
        for frame in &frames[1..] {
            let step = self.track_frame(&mut state, frame)?;
            boxes.push(step.bbox);
            scores.push(step.score);
        }
        Ok((boxes, scores))
    }
}

/// Write the box trace and its parallel per-frame confidence file.
pub fn write_trace_files(
    dir: &std::path::Path,
    seq_id: &str,
    boxes: &[BoundingBox],
    scores: &[f64],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::geom::write_box_file(&dir.join(format!("{seq_id}.txt")), boxes)?;
    let score_path = dir.join(format!("{seq_id}_confidence.txt"));
    let mut text = String::new();
    for s in scores {
        text.push_str(&format!("{s}\n"));
    }
    std::fs::write(&score_path, text).map_err(|e| Error::io(&score_path, e))
}

/// Read a box trace written by [`write_trace_files`].
pub fn read_trace_file(dir: &std::path::Path, seq_id: &str) -> Result<Vec<BoundingBox>> {
    crate::geom::read_box_file(&dir.join(format!("{seq_id}.txt")))
}
