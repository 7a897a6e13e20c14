//! Reusable network blocks built on the tape: linear maps, strided
//! convolutions, layer norm, multi-head attention and feed-forwards.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;

use super::params::ParamStore;
use super::tape::{ConvGeom, Tape, Var};

/// `y = x W + b` with `x: (n, in)`, `W: (in, out)`, `b: (1, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Linear> {
        Ok(Linear {
            w: store.add_init(&format!("{name}.weight"), in_dim, out_dim, 1.0, rng)?,
            b: store.add_const(&format!("{name}.bias"), 1, out_dim, 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row_vec(y, b)
    }
}

/// 3x3-style convolution over a `(c_in, h*w)` image via im2col; weights are
/// `(c_out, c_in*k*k)` and bias `(c_out, 1)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Conv2d> {
        let fan_in = c_in * k * k;
        let mut w = Array2::zeros((c_out, fan_in));
        let scale = (2.0 / fan_in as f64).sqrt();
        for v in w.iter_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * scale;
        }
        Ok(Conv2d {
            w: store.add(&format!("{name}.weight"), w)?,
            b: store.add_const(&format!("{name}.bias"), c_out, 1, 0.0)?,
            c_in,
            c_out,
            k,
            stride,
            pad,
        })
    }

    /// Input `(c_in, h*w)`; output `(c_out, out_h*out_w)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let geom = ConvGeom {
            c_in: self.c_in,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = tape.im2col(x, geom);
        let wt = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(wt, cols);
        tape.add_col_vec(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: store.add_const(&format!("{name}.gain"), 1, dim, 1.0)?,
            bias: store.add_const(&format!("{name}.bias"), 1, dim, 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let gain = tape.param(store, self.gain);
        let bias = tape.param(store, self.bias);
        tape.layer_norm_rows(x, gain, bias)
    }
}

/// Attention output plus the per-head attention probability matrices, kept
/// for row-normalization checks and inspection.
pub struct AttnOut {
    pub out: Var,
    pub probs: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<MultiHeadAttention> {
        assert!(dim % heads == 0, "dim must be divisible by heads");
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.wq"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.wk"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.wv"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.wo"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `q_in: (nq, C)`, `k_in`/`v_in: (nk, C)`. Positional encodings, when
    /// given, are added to the query/key inputs before projection (values
    /// are left untouched).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        q_pos: Option<&Array2<f64>>,
        k_pos: Option<&Array2<f64>>,
    ) -> AttnOut {
        let q_base = match q_pos {
            Some(pos) => {
                let p = tape.constant(pos.clone());
                tape.add(q_in, p)
            }
            None => q_in,
        };
        let k_base = match k_pos {
            Some(pos) => {
                let p = tape.constant(pos.clone());
                tape.add(k_in, p)
            }
            None => k_in,
        };
        let q = self.q.forward(tape, store, q_base);
        let k = self.k.forward(tape, store, k_base);
        let v = self.v.forward(tape, store, v_in);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut probs = Vec::with_capacity(self.heads);
        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores);
            probs.push(p);
            contexts.push(tape.matmul(p, vh));
        }
        let ctx = tape.concat_cols(&contexts);
        let out = self.o.forward(tape, store, ctx);
        AttnOut { out, probs }
    }
}

/// Two linear transformations with a rectifier between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<FeedForward> {
        Ok(FeedForward {
            lin1: Linear::new(store, &format!("{name}.0"), dim, hidden, rng)?,
            lin2: Linear::new(store, &format!("{name}.1"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.lin1.forward(tape, store, x);
        let h = tape.relu(h);
        self.lin2.forward(tape, store, h)
    }
}

/// Standard 2D sine positional encodings for an `h x w` grid with `c`
/// channels: the first half encodes the row coordinate, the second half the
/// column, with sin/cos pairs over a geometric frequency ladder.
pub fn sine_position_encoding(h: usize, w: usize, c: usize) -> Array2<f64> {
    assert!(c % 2 == 0, "channel count must be even");
    let half = c / 2;
    let mut table = Array2::zeros((h * w, c));
    let temperature: f64 = 10_000.0;
    for row in 0..h {
        for col in 0..w {
            let cell = row * w + col;
            for j in 0..half {
                let freq = temperature.powf(2.0 * (j / 2) as f64 / half as f64);
                let (coord, base) = (row as f64, 0usize);
                let angle = coord / freq;
                table[[cell, base + j]] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
            for j in 0..half {
                let freq = temperature.powf(2.0 * (j / 2) as f64 / half as f64);
                let angle = col as f64 / freq;
                table[[cell, half + j]] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_normalize_and_shapes_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "t.attn", 16, 4, &mut rng).unwrap();
        let x = store.add_init("t.x", 6, 16, 1.0, &mut rng).unwrap();
        let kv = store.add_init("t.kv", 9, 16, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xq = tape.param(&store, x);
        let kvv = tape.param(&store, kv);
        let out = mha.forward(&mut tape, &store, xq, kvv, kvv, None, None);
        assert_eq!(tape.shape(out.out), (6, 16));
        assert_eq!(out.probs.len(), 4);
        for &p in &out.probs {
            assert_eq!(tape.shape(p), (6, 9));
            for row in tape.value(p).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = store.add_init("x", 4, 8, 1.0, &mut rng).unwrap();
        let pos = sine_position_encoding(2, 2, 8);
        let probes = [
            (store.get_index("a.wq.weight").unwrap(), 5),
            (store.get_index("a.wk.weight").unwrap(), 12),
            (store.get_index("a.wv.weight").unwrap(), 33),
            (store.get_index("a.wo.bias").unwrap(), 3),
            (x, 7),
        ];
        let err = max_relative_error(
            &mut store,
            move |tape, store| {
                let xv = tape.param(store, x);
                let out = mha.forward(tape, store, xv, xv, xv, Some(&pos), Some(&pos));
                let sq = tape.mul(out.out, out.out);
                tape.mean_all(sq)
            },
            &probes,
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn attention_is_permutation_invariant_over_kv_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "p", 8, 2, &mut rng).unwrap();
        let q = store.add_init("q", 3, 8, 1.0, &mut rng).unwrap();
        let kv = store.add_init("kv", 5, 8, 1.0, &mut rng).unwrap();

        let run = |perm: &[usize]| -> Array2<f64> {
            let mut tape = Tape::new();
            let qv = tape.param(&store, q);
            let kvv = tape.param(&store, kv);
            let kvp = tape.gather_rows(kvv, perm);
            let out = mha.forward(&mut tape, &store, qv, kvp, kvp, None, None);
            tape.value(out.out).clone()
        };
        let identity = run(&[0, 1, 2, 3, 4]);
        let shuffled = run(&[4, 2, 0, 3, 1]);
        let max_diff = (&identity - &shuffled)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-10, "permutation changed output by {max_diff}");
    }

    #[test]
    fn conv_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 3, 8, 3, 2, 1, &mut rng).unwrap();
        let x = store.add_init("x", 3, 16 * 12, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = conv.forward(&mut tape, &store, xv, 16, 12);
        assert_eq!(tape.shape(y), (8, 8 * 6));
    }

    #[test]
    fn position_encoding_is_bounded_and_distinct() {
        let pe = sine_position_encoding(4, 5, 8);
        assert_eq!(pe.dim(), (20, 8));
        for v in pe.iter() {
            assert!(v.abs() <= 1.0 + 1e-12);
        }
        // Different cells receive different codes.
        let a = pe.row(0);
        let b = pe.row(7);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }
}
