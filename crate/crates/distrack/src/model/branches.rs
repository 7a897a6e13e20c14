//! The two feature-extraction branches and their template-side inputs:
//! box-derived template encodings, feature-cell cropping, and the shared
//! attention + feed-forward block structure.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tape, Var};

use super::ModelConfig;

/// Feature-grid cells whose centers fall inside the patch-space box.
/// Cell `(r, c)` has its center at `((c + 0.5) * stride, (r + 0.5) * stride)`
/// in patch pixels; returned indices are row-major.
pub fn cells_under_box(bbox: &BoundingBox, cfg: &ModelConfig) -> Vec<usize> {
    let side = cfg.feat_side();
    let stride = cfg.stride as f64;
    let mut cells = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let cx = (c as f64 + 0.5) * stride;
            let cy = (r as f64 + 0.5) * stride;
            if bbox.contains_point(cx, cy) {
                cells.push(r * side + c);
            }
        }
    }
    cells
}

/// As [`cells_under_box`], but falls back to the single cell containing the
/// box center when no cell center lies inside (small or awkwardly placed
/// boxes during tracking).
pub fn cells_under_box_or_center(bbox: &BoundingBox, cfg: &ModelConfig) -> Vec<usize> {
    let cells = cells_under_box(bbox, cfg);
    if !cells.is_empty() {
        return cells;
    }
    let side = cfg.feat_side();
    let stride = cfg.stride as f64;
    let (cx, cy) = bbox.center();
    let col = ((cx / stride).floor().max(0.0) as usize).min(side - 1);
    let row = ((cy / stride).floor().max(0.0) as usize).min(side - 1);
    vec![row * side + col]
}

/// Grow a box (if needed) until it covers at least one feature-cell
/// center: boxes that miss every center are unioned with the cell rect
/// containing their center. Used where an empty ROI would be fatal.
pub fn ensure_covers_cell(bbox: &BoundingBox, cfg: &ModelConfig) -> BoundingBox {
    if !cells_under_box(bbox, cfg).is_empty() {
        return *bbox;
    }
    let cell = cells_under_box_or_center(bbox, cfg)[0];
    let side = cfg.feat_side();
    let stride = cfg.stride as f64;
    let (r, c) = (cell / side, cell % side);
    let cell_rect = BoundingBox {
        x: c as f64 * stride,
        y: r as f64 * stride,
        w: stride,
        h: stride,
    };
    let x1 = bbox.x.min(cell_rect.x);
    let y1 = bbox.y.min(cell_rect.y);
    let x2 = bbox.right().max(cell_rect.right());
    let y2 = bbox.bottom().max(cell_rect.bottom());
    BoundingBox {
        x: x1,
        y: y1,
        w: x2 - x1,
        h: y2 - y1,
    }
}

/// Two-channel cell mask for a template box: channel 0 is one inside the
/// box, channel 1 is its inverse.
pub fn two_channel_mask(bbox: &BoundingBox, cfg: &ModelConfig) -> Array2<f64> {
    let cells = cfg.cells();
    let inside = cells_under_box(bbox, cfg);
    let mut mask = Array2::zeros((cells, 2));
    for r in 0..cells {
        mask[[r, 1]] = 1.0;
    }
    for &i in &inside {
        mask[[i, 0]] = 1.0;
        mask[[i, 1]] = 0.0;
    }
    mask
}

/// Learned linear map from the two-channel box mask to C-channel template
/// encodings.
pub struct TemplateEncoding {
    map: Linear,
}

impl TemplateEncoding {
    pub fn build(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<TemplateEncoding> {
        let _ = cfg;
        Ok(TemplateEncoding {
            map: Linear::new(store, "enc.map", 2, cfg.channels, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bbox: &BoundingBox,
        cfg: &ModelConfig,
    ) -> Result<Var> {
        bbox.validate()?;
        let mask = two_channel_mask(bbox, cfg);
        let mask_var = tape.constant(mask);
        Ok(self.map.forward(tape, store, mask_var))
    }
}

/// Select the feature rows of cells whose centers lie inside the box.
/// Errors when the box covers no cell center.
pub fn crop_template_features(
    tape: &mut Tape,
    features: Var,
    bbox: &BoundingBox,
    cfg: &ModelConfig,
) -> Result<Var> {
    bbox.validate()?;
    let cells = cells_under_box(bbox, cfg);
    if cells.is_empty() {
        return Err(Error::domain(format!(
            "box {bbox:?} covers no feature-cell center"
        )));
    }
    Ok(tape.gather_rows(features, &cells))
}

/// As [`crop_template_features`], but small boxes that miss every cell
/// center fall back to the cell containing the box center, so template
/// management never dead-ends on a coarse grid.
pub fn crop_template_features_or_center(
    tape: &mut Tape,
    features: Var,
    bbox: &BoundingBox,
    cfg: &ModelConfig,
) -> Result<Var> {
    bbox.validate()?;
    let cells = cells_under_box_or_center(bbox, cfg);
    Ok(tape.gather_rows(features, &cells))
}

/// One attention block plus a two-layer rectified feed-forward, both with
/// residual connections and post-norm layer normalization.
pub struct Branch {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl Branch {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Branch> {
        Ok(Branch {
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                cfg.channels,
                cfg.heads,
                rng,
            )?,
            norm1: LayerNorm::new(store, &format!("{name}.norm.0"), cfg.channels)?,
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                cfg.channels,
                4 * cfg.channels,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm.1"), cfg.channels)?,
        })
    }

    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attn_probs: &mut Vec<Var>,
        query: Var,
        keys: Var,
        values: Var,
        q_pos: Option<&Array2<f64>>,
        k_pos: Option<&Array2<f64>>,
    ) -> Var {
        let out = self
            .attn
            .forward(tape, store, query, keys, values, q_pos, k_pos);
        attn_probs.extend(&out.probs);
        let res = tape.add(query, out.out);
        let x1 = self.norm1.forward(tape, store, res);
        let ff = self.ffn.forward(tape, store, x1);
        let res2 = tape.add(x1, ff);
        self.norm2.forward(tape, store, res2)
    }

    /// Distractor-aware features: search cells query the concatenation of
    /// all template grids; values are template features plus their box
    /// encodings, so attention can tell target cells from background.
    pub fn forward_distractor(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attn_probs: &mut Vec<Var>,
        search: Var,
        templates: &[(Var, Var)],
        pos: &Array2<f64>,
    ) -> Result<Var> {
        if templates.is_empty() {
            return Err(Error::domain(
                "distractor branch needs at least one template",
            ));
        }
        let keys: Vec<Var> = templates.iter().map(|&(f, _)| f).collect();
        let values: Vec<Var> = templates
            .iter()
            .map(|&(f, enc)| tape.add(f, enc))
            .collect();
        let k_cat = tape.concat_rows(&keys);
        let v_cat = tape.concat_rows(&values);
        let pos_cat = {
            let (n, c) = pos.dim();
            let mut tiled = Array2::zeros((n * templates.len(), c));
            for k in 0..templates.len() {
                tiled.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).assign(pos);
            }
            tiled
        };
        Ok(self.attend(
            tape,
            store,
            attn_probs,
            search,
            k_cat,
            v_cat,
            Some(pos),
            Some(&pos_cat),
        ))
    }

    /// Pose-aware features: search cells query the cropped template cells.
    /// The cropped cells form a set, so no positional encoding is attached
    /// to the keys (queries keep theirs).
    pub fn forward_pose(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attn_probs: &mut Vec<Var>,
        search: Var,
        cropped: &[Var],
        pos: &Array2<f64>,
    ) -> Result<Var> {
        if cropped.is_empty() {
            return Err(Error::domain("pose branch needs at least one template"));
        }
        let kv = tape.concat_rows(cropped);
        Ok(self.attend(tape, store, attn_probs, search, kv, kv, Some(pos), None))
    }
}
