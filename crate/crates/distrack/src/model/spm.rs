//! Score prediction module: a learnable token attends to the search-region
//! features inside the estimated box, then to the initial template's
//! cropped features, and a three-layer perceptron with a sigmoid turns the
//! token into the target-presence confidence.

use rand::Rng;

use crate::error::Result;
use crate::geom::BoundingBox;
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, ParamStore, Tape, Var};

use super::branches::cells_under_box;
use super::ModelConfig;

pub struct SpmOut {
    /// Confidence in `(0, 1)`; exactly 0.0 for a degenerate box covering no
    /// feature cell.
    pub score: f64,
    /// Pre-sigmoid logit, present unless degenerate.
    pub logit: Option<Var>,
    pub score_var: Option<Var>,
    pub degenerate: bool,
}

pub struct ScoreModule {
    token: usize,
    attn_roi: MultiHeadAttention,
    norm_roi: LayerNorm,
    attn_template: MultiHeadAttention,
    norm_template: LayerNorm,
    mlp: [Linear; 3],
}

impl ScoreModule {
    pub fn build(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<ScoreModule> {
        let c = cfg.channels;
        Ok(ScoreModule {
            token: store.add_init("spm.token", 1, c, 1.0, rng)?,
            attn_roi: MultiHeadAttention::new(store, "spm.attn.0", c, cfg.heads, rng)?,
            norm_roi: LayerNorm::new(store, "spm.norm.0", c)?,
            attn_template: MultiHeadAttention::new(store, "spm.attn.1", c, cfg.heads, rng)?,
            norm_template: LayerNorm::new(store, "spm.norm.1", c)?,
            mlp: [
                Linear::new(store, "spm.mlp.0", c, c, rng)?,
                Linear::new(store, "spm.mlp.1", c, c, rng)?,
                Linear::new(store, "spm.mlp.2", c, 1, rng)?,
            ],
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attn_probs: &mut Vec<Var>,
        search_fused: Var,
        bbox: &BoundingBox,
        f0_star: Var,
        cfg: &ModelConfig,
    ) -> SpmOut {
        let cells = cells_under_box(bbox, cfg);
        if cells.is_empty() {
            return SpmOut {
                score: 0.0,
                logit: None,
                score_var: None,
                degenerate: true,
            };
        }
        let roi = tape.gather_rows(search_fused, &cells);
        let token = tape.param(store, self.token);
        let a1 = self
            .attn_roi
            .forward(tape, store, token, roi, roi, None, None);
        attn_probs.extend(&a1.probs);
        let res1 = tape.add(token, a1.out);
        let t1 = self.norm_roi.forward(tape, store, res1);
        let a2 = self
            .attn_template
            .forward(tape, store, t1, f0_star, f0_star, None, None);
        attn_probs.extend(&a2.probs);
        let res2 = tape.add(t1, a2.out);
        let t2 = self.norm_template.forward(tape, store, res2);
        let h = self.mlp[0].forward(tape, store, t2);
        let h = tape.relu(h);
        let h = self.mlp[1].forward(tape, store, h);
        let h = tape.relu(h);
        let logit = self.mlp[2].forward(tape, store, h);
        let score_var = tape.sigmoid(logit);
        SpmOut {
            score: tape.scalar_value(score_var),
            logit: Some(logit),
            score_var: Some(score_var),
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_is_in_open_unit_interval() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inputs = ParamStore::new();
        let s = inputs
            .add_init("s", cfg.cells(), cfg.channels, 1.0, &mut rng)
            .unwrap();
        let f0 = inputs.add_init("f0", 4, cfg.channels, 1.0, &mut rng).unwrap();
        let mut fwd = model.begin();
        let sv = fwd.tape.constant(inputs.value(s).clone());
        let f0v = fwd.tape.constant(inputs.value(f0).clone());
        let bbox = BoundingBox::new(8.0, 8.0, 40.0, 40.0).unwrap();
        let out = fwd.spm_score(sv, &bbox, f0v);
        assert!(!out.degenerate);
        assert!(out.score > 0.0 && out.score < 1.0);
    }

    #[test]
    fn degenerate_box_scores_zero_with_flag() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg, 22).unwrap();
        let mut fwd = model.begin();
        let sv = fwd
            .tape
            .constant(ndarray::Array2::zeros((cfg.cells(), cfg.channels)));
        let f0v = fwd.tape.constant(ndarray::Array2::zeros((2, cfg.channels)));
        // 2x2-px box between cell centers: covers no cell.
        let bbox = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let out = fwd.spm_score(sv, &bbox, f0v);
        assert!(out.degenerate);
        assert_eq!(out.score, 0.0);
        assert!(out.logit.is_none());
    }
}
