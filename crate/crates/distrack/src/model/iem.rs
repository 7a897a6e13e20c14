//! Image encoding: a four-stage stride-2 convolutional backbone, a 1x1
//! channel reduction and L transformer feature-fusion layers that
//! self-attend within the template and search streams and cross-attend
//! between them.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::nn::{Conv2d, LayerNorm, MultiHeadAttention, ParamStore, Tape, Var};

use super::ModelConfig;

pub struct FusionLayer {
    self_t: MultiHeadAttention,
    norm_self_t: LayerNorm,
    self_s: MultiHeadAttention,
    norm_self_s: LayerNorm,
    cross_s: MultiHeadAttention,
    norm_cross_s: LayerNorm,
    cross_t: MultiHeadAttention,
    norm_cross_t: LayerNorm,
}

pub struct ImageEncoder {
    stages: Vec<Conv2d>,
    reduce: Conv2d,
    fusion: Vec<FusionLayer>,
}

impl ImageEncoder {
    pub fn build(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<ImageEncoder> {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.backbone_channels.iter().enumerate() {
            stages.push(Conv2d::new(
                store,
                &format!("iem.backbone.{i}"),
                c_in,
                c_out,
                3,
                2,
                1,
                rng,
            )?);
            c_in = c_out;
        }
        let reduce = Conv2d::new(store, "iem.reduce.0", c_in, cfg.channels, 1, 1, 0, rng)?;
        let mut fusion = Vec::new();
        for l in 0..cfg.fusion_layers {
            let name = |part: &str| format!("iem.fusion.{l}.{part}");
            fusion.push(FusionLayer {
                self_t: MultiHeadAttention::new(store, &name("self_t"), cfg.channels, cfg.heads, rng)?,
                norm_self_t: LayerNorm::new(store, &name("norm_self_t"), cfg.channels)?,
                self_s: MultiHeadAttention::new(store, &name("self_s"), cfg.channels, cfg.heads, rng)?,
                norm_self_s: LayerNorm::new(store, &name("norm_self_s"), cfg.channels)?,
                cross_s: MultiHeadAttention::new(store, &name("cross_s"), cfg.channels, cfg.heads, rng)?,
                norm_cross_s: LayerNorm::new(store, &name("norm_cross_s"), cfg.channels)?,
                cross_t: MultiHeadAttention::new(store, &name("cross_t"), cfg.channels, cfg.heads, rng)?,
                norm_cross_t: LayerNorm::new(store, &name("norm_cross_t"), cfg.channels)?,
            });
        }
        Ok(ImageEncoder {
            stages,
            reduce,
            fusion,
        })
    }

    /// Backbone + 1x1 reduction for one `(3, S*S)` zero-centered patch;
    /// output `(HW, C)`.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        input_size: usize,
    ) -> Var {
        let mut side = input_size;
        let mut feat = x;
        for stage in &self.stages {
            feat = stage.forward(tape, store, feat, side, side);
            feat = tape.relu(feat);
            side /= 2;
        }
        let reduced = self.reduce.forward(tape, store, feat, side, side);
        tape.transpose(reduced)
    }

    /// Run the fusion layers over per-template streams plus the search
    /// stream. Template self-attention stays within each template.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attn_probs: &mut Vec<Var>,
        templates: Vec<Var>,
        search: Var,
        pos: &Array2<f64>,
    ) -> (Vec<Var>, Var) {
        let mut t_streams = templates;
        let mut s_stream = search;
        for layer in &self.fusion {
            // Self-attention within each stream.
            for t in t_streams.iter_mut() {
                let out = layer
                    .self_t
                    .forward(tape, store, *t, *t, *t, Some(pos), Some(pos));
                attn_probs.extend(&out.probs);
                let res = tape.add(*t, out.out);
                *t = layer.norm_self_t.forward(tape, store, res);
            }
            let out = layer
                .self_s
                .forward(tape, store, s_stream, s_stream, s_stream, Some(pos), Some(pos));
            attn_probs.extend(&out.probs);
            let res = tape.add(s_stream, out.out);
            s_stream = layer.norm_self_s.forward(tape, store, res);

            // Cross-attention: search attends the concatenated templates,
            // each template attends the search stream.
            let t_cat = tape.concat_rows(&t_streams);
            let pos_cat = tile_rows(pos, t_streams.len());
            let out = layer.cross_s.forward(
                tape,
                store,
                s_stream,
                t_cat,
                t_cat,
                Some(pos),
                Some(&pos_cat),
            );
            attn_probs.extend(&out.probs);
            let res = tape.add(s_stream, out.out);
            let s_next = layer.norm_cross_s.forward(tape, store, res);

            for t in t_streams.iter_mut() {
                let out = layer
                    .cross_t
                    .forward(tape, store, *t, s_stream, s_stream, Some(pos), Some(pos));
                attn_probs.extend(&out.probs);
                let res = tape.add(*t, out.out);
                *t = layer.norm_cross_t.forward(tape, store, res);
            }
            s_stream = s_next;
        }
        (t_streams, s_stream)
    }
}

fn tile_rows(pos: &Array2<f64>, times: usize) -> Array2<f64> {
    let (n, c) = pos.dim();
    let mut out = Array2::zeros((n * times, c));
    for k in 0..times {
        out.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).assign(pos);
    }
    out
}

#[cfg(test)]
mod tests {

    use crate::model::{Model, ModelConfig};
    use ndarray::Array3;

    #[test]
    fn backbone_reduces_sixteen_fold() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 2).unwrap();
        let patch = Array3::from_elem((cfg.input_size, cfg.input_size, 3), 0.5);
        let mut fwd = model.begin();
        let feats = fwd.encode_patch(&patch).unwrap();
        assert_eq!(
            fwd.tape.shape(feats),
            (cfg.cells(), cfg.channels),
            "expected ({}, {})",
            cfg.cells(),
            cfg.channels
        );
    }
}
