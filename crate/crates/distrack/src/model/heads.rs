//! Output heads: the two-corner convolutional localization head with
//! soft-argmax readout, and the auxiliary per-cell mask head.

use rand::Rng;

use ndarray::Array2;

use crate::error::Result;
use crate::geom::BoundingBox;
use crate::nn::{Conv2d, Linear, ParamStore, Tape, Var};

use super::ModelConfig;

/// A stack of 3x3 convolutions halving the channel count down to a single
/// probability map.
pub struct CornerHead {
    convs: Vec<Conv2d>,
}

impl CornerHead {
    fn build(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<CornerHead> {
        let mut convs = Vec::new();
        let mut c_in = channels;
        for i in 0..4 {
            let c_out = if i == 3 { 1 } else { (c_in / 2).max(1) };
            convs.push(Conv2d::new(
                store,
                &format!("{name}.{i}"),
                c_in,
                c_out,
                3,
                1,
                1,
                rng,
            )?);
            c_in = c_out;
        }
        Ok(CornerHead { convs })
    }

    /// `(C, HW)` features to a `(1, HW)` softmax probability map.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, side: usize) -> Var {
        let mut feat = x;
        for (i, conv) in self.convs.iter().enumerate() {
            feat = conv.forward(tape, store, feat, side, side);
            if i + 1 < self.convs.len() {
                feat = tape.relu(feat);
            }
        }
        tape.softmax_rows(feat)
    }
}

pub struct LocalizeOut {
    /// `(1, 4)` box `(x, y, w, h)` in search-patch pixels; w and h are
    /// clamped to at least one pixel on-tape.
    pub box_var: Var,
    /// Extracted value, additionally clamped into the patch.
    pub bbox: BoundingBox,
    /// True when a bottom-right expectation did not exceed its top-left
    /// counterpart and the 1-px clamp engaged.
    pub degenerate: bool,
    pub probs_tl: Var,
    pub probs_br: Var,
}

pub struct CornerHeads {
    tl: CornerHead,
    br: CornerHead,
}

impl CornerHeads {
    pub fn build(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<CornerHeads> {
        Ok(CornerHeads {
            tl: CornerHead::build(store, "loc.tl", cfg.channels, rng)?,
            br: CornerHead::build(store, "loc.br", cfg.channels, rng)?,
        })
    }

    /// Localization from fused `(HW, C)` features.
    pub fn localize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_loc: Var,
        cfg: &ModelConfig,
    ) -> LocalizeOut {
        let side = cfg.feat_side();
        let grid = tape.transpose(f_loc);
        let probs_tl = self.tl.forward(tape, store, grid, side);
        let probs_br = self.br.forward(tape, store, grid, side);
        let (box_var, degenerate) =
            corner_expectation(tape, probs_tl, probs_br, side, cfg.stride);
        let v = tape.value(box_var).clone();
        let s = cfg.input_size as f64;
        let bbox = BoundingBox {
            x: v[[0, 0]],
            y: v[[0, 1]],
            w: v[[0, 2]],
            h: v[[0, 3]],
        }
        .clamp_to(s, s);
        LocalizeOut {
            box_var,
            bbox,
            degenerate,
            probs_tl,
            probs_br,
        }
    }
}

/// Soft-argmax of two corner probability maps into a `(1, 4)` box var.
/// Cell `(r, c)` contributes its center `((c + 0.5) * stride, (r + 0.5) * stride)`;
/// width and height are clamped to >= 1 px (the clamp reports `degenerate`).
pub fn corner_expectation(
    tape: &mut Tape,
    probs_tl: Var,
    probs_br: Var,
    side: usize,
    stride: usize,
) -> (Var, bool) {
    let mut coord_x = Array2::zeros((side * side, 1));
    let mut coord_y = Array2::zeros((side * side, 1));
    for r in 0..side {
        for c in 0..side {
            coord_x[[r * side + c, 0]] = (c as f64 + 0.5) * stride as f64;
            coord_y[[r * side + c, 0]] = (r as f64 + 0.5) * stride as f64;
        }
    }
    let cx = tape.constant(coord_x);
    let cy = tape.constant(coord_y);
    let x_tl = tape.matmul(probs_tl, cx);
    let y_tl = tape.matmul(probs_tl, cy);
    let x_br = tape.matmul(probs_br, cx);
    let y_br = tape.matmul(probs_br, cy);
    let w_raw = tape.sub(x_br, x_tl);
    let h_raw = tape.sub(y_br, y_tl);
    let degenerate =
        tape.scalar_value(w_raw) < 1.0 || tape.scalar_value(h_raw) < 1.0;
    let one = tape.scalar(1.0);
    let w = tape.maximum(w_raw, one);
    let h = tape.maximum(h_raw, one);
    let box_var = tape.concat_cols(&[x_tl, y_tl, w, h]);
    (box_var, degenerate)
}

/// Per-cell linear map from distractor-aware features to mask logits
/// (a 1x1 convolution over the grid).
pub struct AuxHead {
    head: Linear,
}

impl AuxHead {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<AuxHead> {
        Ok(AuxHead {
            head: Linear::new(store, "aux.head", cfg.channels, 1, rng)?,
        })
    }

    /// `(HW, C)` to `(HW, 1)` logits; no sigmoid baked in.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_dis: Var) -> Var {
        self.head.forward(tape, store, f_dis)
    }
}
