//! The tracking network: a convolutional backbone with transformer feature
//! fusion (image encoding), a distractor-aware attention branch, a
//! pose-aware attention branch, a corner-based localization head, an
//! auxiliary per-cell mask head and a score prediction module.
//!
//! All forward passes run on the autodiff tape, so the same code path
//! serves training, gradient checks and inference.

pub mod branches;
pub mod heads;
pub mod iem;
pub mod spm;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::nn::{sine_position_encoding, ParamStore, Tape, Var};

pub use branches::cells_under_box;
pub use heads::{corner_expectation, LocalizeOut};
pub use spm::SpmOut;

/// Ablation switches: a disabled branch contributes zeros to the fused
/// localization features; `disable_recent` drops the previous-frame
/// template from the distractor-aware inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub disable_dis: bool,
    pub disable_pos: bool,
    pub disable_recent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input patches (template and search share it).
    pub input_size: usize,
    /// Total backbone stride; the feature grid is `input_size / stride`.
    pub stride: usize,
    /// Feature channels C.
    pub channels: usize,
    pub heads: usize,
    /// Number of transformer feature-fusion layers L.
    pub fusion_layers: usize,
    /// Maximum template-set size N_T.
    pub template_count: usize,
    /// Channel progression of the four stride-2 backbone stages.
    pub backbone_channels: [usize; 4],
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl ModelConfig {
    /// Laptop-scale defaults: 128x128 patches, 64 channels.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 128,
            stride: 16,
            channels: 64,
            heads: 8,
            fusion_layers: 2,
            template_count: 6,
            backbone_channels: [8, 16, 32, 64],
            ablation: AblationFlags::default(),
        }
    }

    /// Full-scale constants: 320x320 patches, 256 channels, 20x20 grid.
    pub fn full() -> Self {
        ModelConfig {
            input_size: 320,
            stride: 16,
            channels: 256,
            heads: 8,
            fusion_layers: 4,
            template_count: 6,
            backbone_channels: [32, 64, 128, 256],
            ablation: AblationFlags::default(),
        }
    }

    /// Miniature config for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 64,
            stride: 16,
            channels: 16,
            heads: 4,
            fusion_layers: 1,
            template_count: 3,
            backbone_channels: [4, 8, 8, 16],
            ablation: AblationFlags::default(),
        }
    }

    /// Feature grid side H (= W).
    pub fn feat_side(&self) -> usize {
        self.input_size / self.stride
    }

    /// Cell count HW.
    pub fn cells(&self) -> usize {
        self.feat_side() * self.feat_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 16 {
            return Err(Error::domain("backbone stride must be 16"));
        }
        if self.input_size % self.stride != 0 {
            return Err(Error::domain(format!(
                "input size {} not divisible by stride {}",
                self.input_size, self.stride
            )));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::domain(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.backbone_channels[3] == 0 || self.channels == 0 || self.fusion_layers == 0 {
            return Err(Error::domain("zero-sized model dimension"));
        }
        Ok(())
    }
}

pub(crate) struct Blocks {
    pub iem: iem::ImageEncoder,
    pub encoding: branches::TemplateEncoding,
    pub dis: branches::Branch,
    pub pos: branches::Branch,
    pub corners: heads::CornerHeads,
    pub aux: heads::AuxHead,
    pub spm: spm::ScoreModule,
}

/// Model = config + named parameters + the block wiring between them.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub(crate) blocks: Blocks,
    /// Shared sine table for the feature grid, one per spatial size.
    pos_table: Array2<f64>,
}

impl Model {
    /// Fresh model with deterministic initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let blocks = Blocks {
            iem: iem::ImageEncoder::build(&mut params, &cfg, &mut rng)?,
            encoding: branches::TemplateEncoding::build(&mut params, &cfg, &mut rng)?,
            dis: branches::Branch::build(&mut params, "dis", &cfg, &mut rng)?,
            pos: branches::Branch::build(&mut params, "pos", &cfg, &mut rng)?,
            corners: heads::CornerHeads::build(&mut params, &cfg, &mut rng)?,
            aux: heads::AuxHead::build(&mut params, &cfg, &mut rng)?,
            spm: spm::ScoreModule::build(&mut params, &cfg, &mut rng)?,
        };
        let pos_table = sine_position_encoding(cfg.feat_side(), cfg.feat_side(), cfg.channels);
        Ok(Model {
            cfg,
            params,
            blocks,
            pos_table,
        })
    }

    /// Save config + weights to a checkpoint archive.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let config = serde_json::to_value(self.cfg)
            .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
        crate::nn::checkpoint::save(path, &config, &self.params)
    }

    /// Load a checkpoint: rebuilds the wiring from the stored config and
    /// copies every tensor by name (shapes verified).
    pub fn load(path: &std::path::Path) -> Result<Model> {
        let (config, loaded) = crate::nn::checkpoint::load(path)?;
        let cfg: ModelConfig = serde_json::from_value(config)
            .map_err(|e| Error::Checkpoint(format!("bad config record: {e}")))?;
        let mut model = Model::new(cfg, 0)?;
        if loaded.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.params.len()
            )));
        }
        for idx in 0..model.params.len() {
            let name = model.params.name(idx).to_string();
            let src = loaded
                .get_index(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if loaded.value(src).dim() != model.params.value(idx).dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    loaded.value(src).dim(),
                    model.params.value(idx).dim()
                )));
            }
            model.params.value_mut(idx).assign(loaded.value(src));
        }
        Ok(model)
    }

    /// Ablation variant of the same weights (no retraining implied).
    pub fn with_ablation(mut self, ablation: AblationFlags) -> Model {
        self.cfg.ablation = ablation;
        self
    }

    pub fn begin(&self) -> Forward<'_> {
        Forward {
            model: self,
            tape: Tape::new(),
            attn_probs: Vec::new(),
            pose_slots: Vec::new(),
            dis_slots: Vec::new(),
        }
    }

    pub fn pos_table(&self) -> &Array2<f64> {
        &self.pos_table
    }

    /// Update mask for phase 1 (everything except the score module).
    pub fn non_spm_mask(&self) -> Vec<bool> {
        self.params.mask_where(|n| !n.starts_with("spm."))
    }

    /// Update mask for phase 2 (score module only).
    pub fn spm_mask(&self) -> Vec<bool> {
        self.params.mask_where(|n| n.starts_with("spm."))
    }
}

/// How a template's backbone features enter a forward pass: raw patches go
/// through the backbone on-tape; cached features (tracking) enter as
/// constants.
pub enum TemplateSource {
    Patch(Array3<f64>),
    Cached(Array2<f64>),
}

/// One template fed to a forward pass.
pub struct TemplateInput {
    pub source: TemplateSource,
    /// Target box in template-patch pixel coordinates.
    pub box_in_patch: BoundingBox,
    /// The previous-frame template sets this to false: it feeds only the
    /// distractor-aware branch.
    pub include_in_pose: bool,
    /// Instrumentation id (template slot or birth frame).
    pub slot: usize,
}

/// Everything the localization pipeline produces for one search patch.
pub struct LocalizeForward {
    pub search_fused: Var,
    pub templates_fused: Vec<Var>,
    pub f_dis: Var,
    pub f_pos: Var,
    pub localize: LocalizeOut,
    pub aux_logits: Var,
}

/// An in-flight forward pass: the tape plus instrumentation (attention
/// probability handles, which template slots fed which branch).
pub struct Forward<'m> {
    pub model: &'m Model,
    pub tape: Tape,
    pub attn_probs: Vec<Var>,
    pub pose_slots: Vec<usize>,
    pub dis_slots: Vec<usize>,
}

impl<'m> Forward<'m> {
    /// Backbone + channel reduction for one `(S, S, 3)` patch in `[0, 1]`;
    /// returns `(HW, C)` features (pre-fusion).
    pub fn encode_patch(&mut self, patch: &Array3<f64>) -> Result<Var> {
        let m = self.model;
        let s = m.cfg.input_size;
        if patch.dim() != (s, s, 3) {
            return Err(Error::domain(format!(
                "patch size {:?} does not match model input {s}",
                patch.dim()
            )));
        }
        // (3, S*S) channels-first, zero-centered.
        let mut flat = Array2::zeros((3, s * s));
        for r in 0..s {
            for c in 0..s {
                for ch in 0..3 {
                    flat[[ch, r * s + c]] = patch[[r, c, ch]] * 2.0 - 1.0;
                }
            }
        }
        let x = self.tape.constant(flat);
        let feats = m.blocks.iem.backbone_forward(&mut self.tape, &m.params, x, s);
        Ok(feats)
    }

    /// Enter cached backbone features (`(HW, C)`) as a constant.
    pub fn cached_features(&mut self, feats: &Array2<f64>) -> Result<Var> {
        let m = self.model;
        if feats.dim() != (m.cfg.cells(), m.cfg.channels) {
            return Err(Error::domain(format!(
                "cached features {:?} do not match grid ({}, {})",
                feats.dim(),
                m.cfg.cells(),
                m.cfg.channels
            )));
        }
        Ok(self.tape.constant(feats.clone()))
    }

    fn template_features(&mut self, t: &TemplateInput) -> Result<Var> {
        match &t.source {
            TemplateSource::Patch(p) => self.encode_patch(p),
            TemplateSource::Cached(f) => self.cached_features(f),
        }
    }

    /// Encode templates and search, then run the fusion layers.
    /// Returns fused per-template features and fused search features.
    pub fn encode_and_fuse(
        &mut self,
        templates: &[TemplateInput],
        search_patch: &Array3<f64>,
    ) -> Result<(Vec<Var>, Var)> {
        if templates.is_empty() {
            return Err(Error::domain("template list must be nonempty"));
        }
        let t_feats: Vec<Var> = templates
            .iter()
            .map(|t| self.template_features(t))
            .collect::<Result<_>>()?;
        let s_feat = self.encode_patch(search_patch)?;
        let m = self.model;
        let (t_fused, s_fused) = m.blocks.iem.fuse(
            &mut self.tape,
            &m.params,
            &mut self.attn_probs,
            t_feats,
            s_feat,
            &m.pos_table,
        );
        Ok((t_fused, s_fused))
    }

    /// The full localization pipeline for one search patch against a
    /// template set: fusion, both feature branches (honoring ablations),
    /// corner localization and the auxiliary mask logits.
    pub fn localize_pipeline(
        &mut self,
        templates: &[TemplateInput],
        search_patch: &Array3<f64>,
    ) -> Result<LocalizeForward> {
        let (templates_fused, search_fused) = self.encode_and_fuse(templates, search_patch)?;
        let m = self.model;
        let cells = m.cfg.cells();
        let channels = m.cfg.channels;

        let f_dis = if m.cfg.ablation.disable_dis {
            self.tape.constant(Array2::zeros((cells, channels)))
        } else {
            let mut kv = Vec::new();
            for (t, &fused) in templates.iter().zip(&templates_fused) {
                if m.cfg.ablation.disable_recent && !t.include_in_pose {
                    continue;
                }
                let enc = m.blocks.encoding.forward(
                    &mut self.tape,
                    &m.params,
                    &t.box_in_patch,
                    &m.cfg,
                )?;
                self.dis_slots.push(t.slot);
                kv.push((fused, enc));
            }
            m.blocks.dis.forward_distractor(
                &mut self.tape,
                &m.params,
                &mut self.attn_probs,
                search_fused,
                &kv,
                &m.pos_table,
            )?
        };

        let f_pos = if m.cfg.ablation.disable_pos {
            self.tape.constant(Array2::zeros((cells, channels)))
        } else {
            let mut cropped = Vec::new();
            for (t, &fused) in templates.iter().zip(&templates_fused) {
                if !t.include_in_pose {
                    continue;
                }
                let rows = branches::crop_template_features_or_center(
                    &mut self.tape,
                    fused,
                    &t.box_in_patch,
                    &m.cfg,
                )?;
                self.pose_slots.push(t.slot);
                cropped.push(rows);
            }
            m.blocks.pos.forward_pose(
                &mut self.tape,
                &m.params,
                &mut self.attn_probs,
                search_fused,
                &cropped,
                &m.pos_table,
            )?
        };

        let f_loc = self.tape.add(f_pos, f_dis);
        let localize = m
            .blocks
            .corners
            .localize(&mut self.tape, &m.params, f_loc, &m.cfg);
        let aux_logits = m.blocks.aux.forward(&mut self.tape, &m.params, f_dis);
        Ok(LocalizeForward {
            search_fused,
            templates_fused,
            f_dis,
            f_pos,
            localize,
            aux_logits,
        })
    }

    /// Score the target presence inside `bbox` (search-patch pixels) given
    /// fused search features and the initial template's cropped features.
    pub fn spm_score(&mut self, search_fused: Var, bbox: &BoundingBox, f0_star: Var) -> SpmOut {
        let m = self.model;
        m.blocks.spm.forward(
            &mut self.tape,
            &m.params,
            &mut self.attn_probs,
            search_fused,
            bbox,
            f0_star,
            &m.cfg,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_patch(seed: f64, size: usize) -> Array3<f64> {
        Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
            ((r * 31 + c * 7 + ch * 13) as f64 * 0.01 + seed).sin() * 0.5 + 0.5
        })
    }

    fn template(patch: Array3<f64>, bbox: BoundingBox, pose: bool, slot: usize) -> TemplateInput {
        TemplateInput {
            source: TemplateSource::Patch(patch),
            box_in_patch: bbox,
            include_in_pose: pose,
            slot,
        }
    }

    #[test]
    fn pipeline_shapes_and_attention_rows() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 7).unwrap();
        let size = cfg.input_size;
        let bbox = BoundingBox::new(20.0, 20.0, 24.0, 24.0).unwrap();
        let templates = vec![
            template(tiny_patch(0.1, size), bbox, true, 0),
            template(tiny_patch(0.7, size), bbox, false, 9),
        ];
        let mut fwd = model.begin();
        let out = fwd
            .localize_pipeline(&templates, &tiny_patch(0.4, size))
            .unwrap();
        let hw = cfg.cells();
        assert_eq!(fwd.tape.shape(out.search_fused), (hw, cfg.channels));
        assert_eq!(fwd.tape.shape(out.f_dis), (hw, cfg.channels));
        assert_eq!(fwd.tape.shape(out.f_pos), (hw, cfg.channels));
        assert_eq!(fwd.tape.shape(out.aux_logits), (hw, 1));
        assert_eq!(fwd.tape.shape(out.localize.box_var), (1, 4));
        // Recent template (slot 9) reaches the distractor branch only.
        assert_eq!(fwd.pose_slots, vec![0]);
        assert_eq!(fwd.dis_slots, vec![0, 9]);
        // Every attention row on the tape sums to one.
        assert!(!fwd.attn_probs.is_empty());
        for &p in &fwd.attn_probs {
            for row in fwd.tape.value(p).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_patches_give_identical_features() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 3).unwrap();
        let patch = tiny_patch(0.2, cfg.input_size);
        let mut fwd = model.begin();
        let a = fwd.encode_patch(&patch).unwrap();
        let b = fwd.encode_patch(&patch).unwrap();
        assert_eq!(fwd.tape.value(a), fwd.tape.value(b));
    }

    #[test]
    fn ablations_zero_the_right_branch() {
        let cfg = ModelConfig::tiny();
        let size = cfg.input_size;
        let bbox = BoundingBox::new(16.0, 16.0, 32.0, 32.0).unwrap();
        let run = |ablation: AblationFlags| {
            let model = Model::new(cfg, 11).unwrap().with_ablation(ablation);
            let templates = vec![template(tiny_patch(0.1, size), bbox, true, 0)];
            let mut fwd = model.begin();
            let out = fwd
                .localize_pipeline(&templates, &tiny_patch(0.5, size))
                .unwrap();
            (
                fwd.tape.value(out.f_dis).iter().all(|&v| v == 0.0),
                fwd.tape.value(out.f_pos).iter().all(|&v| v == 0.0),
            )
        };
        assert_eq!(
            run(AblationFlags {
                disable_dis: true,
                ..Default::default()
            }),
            (true, false)
        );
        assert_eq!(
            run(AblationFlags {
                disable_pos: true,
                ..Default::default()
            }),
            (false, true)
        );
        assert_eq!(run(AblationFlags::default()), (false, false));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        let bbox = BoundingBox::new(16.0, 16.0, 32.0, 32.0).unwrap();
        let patch = tiny_patch(0.3, cfg.input_size);
        let search = tiny_patch(0.9, cfg.input_size);
        let run = |m: &Model| {
            let templates = vec![template(patch.clone(), bbox, true, 0)];
            let mut fwd = m.begin();
            let out = fwd.localize_pipeline(&templates, &search).unwrap();
            fwd.tape.value(out.localize.box_var).clone()
        };
        assert_eq!(run(&model), run(&loaded));
    }

    #[test]
    fn empty_template_list_is_domain_error() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 1).unwrap();
        let mut fwd = model.begin();
        assert!(fwd
            .localize_pipeline(&[], &tiny_patch(0.0, cfg.input_size))
            .is_err());
    }
}
