use bdc_tensor::{Mask, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

const LN_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters under a name prefix.
pub(crate) struct Builder<'a, S> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<S: Real> Builder<'_, S> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::lit(self.rng.gen_range(-bound..bound)))
            .collect();
        self.store
            .add(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, S::lit(v)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new<S: Real>(
        bld: &mut Builder<'_, S>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: bld.uniform(&format!("{name}.w"), &[input, output], bound),
            b: bld.constant(&format!("{name}.b"), &[output], 0.0),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.w);
        let b = tape.param(p, self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<S: Real>(bld: &mut Builder<'_, S>, name: &str, dim: usize) -> Self {
        Self {
            gain: bld.constant(&format!("{name}.g"), &[dim], 1.0),
            bias: bld.constant(&format!("{name}.b"), &[dim], 0.0),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(p, self.gain);
        let b = tape.param(p, self.bias);
        let n = tape.layer_norm(x, LN_EPS)?;
        let y = tape.mul_row(n, g)?;
        Ok(tape.add_row(y, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub(crate) fn new<S: Real>(
        bld: &mut Builder<'_, S>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            heads,
            q: Linear::new(bld, &format!("{name}.q"), dim, dim),
            k: Linear::new(bld, &format!("{name}.k"), dim, dim),
            v: Linear::new(bld, &format!("{name}.v"), dim, dim),
            o: Linear::new(bld, &format!("{name}.o"), dim, dim),
        }
    }

    /// Attention of `queries` over `keys`. `mask` is `[Q, K]`; `None` means
    /// every key is visible.
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &ParamStore<S>,
        queries: Var,
        keys: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, queries)?;
        let k = self.k.forward(tape, p, keys)?;
        let v = self.v.forward(tape, p, keys)?;
        let (nq, dim) = (tape.shape(q)[0], tape.shape(q)[1]);
        let nk = tape.shape(k)[0];
        let dh = dim / self.heads;
        let full;
        let mask = match mask {
            Some(m) => m,
            None => {
                full = Mask::full(nq, nk);
                &full
            }
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.masked_softmax(scores, mask)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        self.o.forward(tape, p, cat)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn new<S: Real>(
        bld: &mut Builder<'_, S>,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(bld, &format!("{name}.up"), dim, hidden),
            down: Linear::new(bld, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, p, h)
    }
}

/// Pre-norm self-attention block with full visibility.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub(crate) fn new<S: Real>(
        bld: &mut Builder<'_, S>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(bld, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(bld, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(bld, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(bld, &format!("{name}.ffn"), dim, 4 * dim),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, h, None)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.ffn.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Pre-norm masked self-attention, cross-attention to a memory, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub(crate) fn new<S: Real>(
        bld: &mut Builder<'_, S>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(bld, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(bld, &format!("{name}.self"), dim, heads),
            ln2: LayerNorm::new(bld, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(bld, &format!("{name}.cross"), dim, heads),
            ln3: LayerNorm::new(bld, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(bld, &format!("{name}.ffn"), dim, 4 * dim),
        }
    }

    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &ParamStore<S>,
        x: Var,
        memory: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.self_attn.forward(tape, p, h, h, Some(mask))?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.cross_attn.forward(tape, p, h, memory, None)?;
        let x = tape.add(x, h)?;
        let h = self.ln3.forward(tape, p, x)?;
        let h = self.ffn.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Interleaved sinusoid: `pe[2i] = sin(pos/base^(2i/d))`, `pe[2i+1] = cos(…)`.
pub fn sinusoid(pos: f64, dim: usize, base: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos / base.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
