//! Layers shared by the chunk and document encoders.

use hier_tensor::{ParamId, ParamSet, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::Rng;

use crate::error::{invalid, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Self::with_std(params, name, d_in, d_out, INIT_STD, rng)
    }

    pub fn with_std<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: params.add_normal(format!("{name}.weight"), &[d_in, d_out], std, rng)?,
            bias: params.add_filled(format!("{name}.bias"), &[d_out], 0.0)?,
            d_in,
            d_out,
        })
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.weight);
        let b = t.param(self.bias);
        let y = t.matmul(x, w)?;
        Ok(t.add(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add_filled(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: params.add_filled(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        Ok(t.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `h + FFN(LN(h))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
    d_model: usize,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(invalid(format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        Ok(Self {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), d_model)?,
            qkv: Linear::new(params, &format!("{name}.attn.qkv"), d_model, 3 * d_model, rng)?,
            out: Linear::new(params, &format!("{name}.attn.out"), d_model, d_model, rng)?,
            ln_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), d_model)?,
            ff_in: Linear::new(params, &format!("{name}.ff.in"), d_model, ff_dim, rng)?,
            ff_out: Linear::new(params, &format!("{name}.ff.out"), ff_dim, d_model, rng)?,
            heads,
            d_model,
            dropout,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `x` is `[L, d_model]`; keys with `key_mask[j] == false` are never attended.
    pub fn forward(&self, t: &mut Tape, x: Var, key_mask: &[bool], train: bool) -> Result<Var> {
        let h = self.ln_attn.forward(t, x)?;
        let qkv = self.qkv.forward(t, h)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = t.slice_cols(qkv, i * hd, hd)?;
            let k = t.slice_cols(qkv, self.d_model + i * hd, hd)?;
            let v = t.slice_cols(qkv, 2 * self.d_model + i * hd, hd)?;
            let kt = t.transpose(k)?;
            let scores = t.matmul(q, kt)?;
            let scores = t.scale(scores, scale);
            let probs = t.masked_softmax_rows(scores, key_mask)?;
            let probs = t.dropout(probs, self.dropout, train)?;
            head_outputs.push(t.matmul(probs, v)?);
        }
        let heads = t.concat(&head_outputs, 1)?;
        let attn = self.out.forward(t, heads)?;
        let attn = t.dropout(attn, self.dropout, train)?;
        let x = t.add(x, attn)?;

        let h = self.ln_ff.forward(t, x)?;
        let h = self.ff_in.forward(t, h)?;
        let h = t.gelu(h);
        let h = self.ff_out.forward(t, h)?;
        let h = t.dropout(h, self.dropout, train)?;
        Ok(t.add(x, h)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

/// One direction of a recurrent layer. Input projections for all time
/// steps are computed with one matmul; the recurrence then runs row by row.
#[derive(Debug, Clone)]
pub struct RecurrentCell {
    kind: CellKind,
    input: Linear,
    hidden_weight: ParamId,
    hidden_bias: ParamId,
    hidden: usize,
}

impl RecurrentCell {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        kind: CellKind,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = match kind {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        };
        let input = Linear::new(params, &format!("{name}.input"), d_in, gates * hidden, rng)?;
        if kind == CellKind::Lstm {
            // forget gate starts open
            params.get_mut(input.bias_id()).data_mut()[hidden..2 * hidden].fill(1.0);
        }
        Ok(Self {
            kind,
            input,
            hidden_weight: params.add_normal(format!("{name}.hidden.weight"), &[hidden, gates * hidden], INIT_STD, rng)?,
            hidden_bias: params.add_filled(format!("{name}.hidden.bias"), &[gates * hidden], 0.0)?,
            hidden,
        })
    }

    /// Runs over `x[n, d_in]` in the given order and returns the hidden
    /// state after each step, indexed by original row.
    pub fn run(&self, t: &mut Tape, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let n = t.shape(x)[0];
        let proj = self.input.forward(t, x)?;
        let wh = t.param(self.hidden_weight);
        let bh = t.param(self.hidden_bias);
        let h_dim = self.hidden;
        let mut h = t.constant(Tensor::zeros(&[1, h_dim]));
        let mut c = t.constant(Tensor::zeros(&[1, h_dim]));
        let mut states = vec![None; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for step in order {
            let xp = t.slice_rows(proj, step, 1)?;
            let hp = t.matmul(h, wh)?;
            let hp = t.add(hp, bh)?;
            match self.kind {
                CellKind::Lstm => {
                    let g = t.add(xp, hp)?;
                    let i = t.slice_cols(g, 0, h_dim)?;
                    let i = t.sigmoid(i);
                    let f = t.slice_cols(g, h_dim, h_dim)?;
                    let f = t.sigmoid(f);
                    let cand = t.slice_cols(g, 2 * h_dim, h_dim)?;
                    let cand = t.tanh(cand);
                    let o = t.slice_cols(g, 3 * h_dim, h_dim)?;
                    let o = t.sigmoid(o);
                    let keep = t.mul(f, c)?;
                    let write = t.mul(i, cand)?;
                    c = t.add(keep, write)?;
                    let ct = t.tanh(c);
                    h = t.mul(o, ct)?;
                }
                CellKind::Gru => {
                    let xr = t.slice_cols(xp, 0, h_dim)?;
                    let xz = t.slice_cols(xp, h_dim, h_dim)?;
                    let xn = t.slice_cols(xp, 2 * h_dim, h_dim)?;
                    let hr = t.slice_cols(hp, 0, h_dim)?;
                    let hz = t.slice_cols(hp, h_dim, h_dim)?;
                    let hn = t.slice_cols(hp, 2 * h_dim, h_dim)?;
                    let r = t.add(xr, hr)?;
                    let r = t.sigmoid(r);
                    let z = t.add(xz, hz)?;
                    let z = t.sigmoid(z);
                    let gated = t.mul(r, hn)?;
                    let cand = t.add(xn, gated)?;
                    let cand = t.tanh(cand);
                    // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
                    let diff = t.sub(h, cand)?;
                    let mix = t.mul(z, diff)?;
                    h = t.add(cand, mix)?;
                }
            }
            states[step] = Some(h);
        }
        Ok(states.into_iter().map(|s| s.expect("every step visited")).collect())
    }
}

/// Bidirectional recurrent layer; outputs are `[fwd_t, bwd_t]` per step.
#[derive(Debug, Clone)]
pub struct BiRecurrent {
    fwd: RecurrentCell,
    bwd: RecurrentCell,
}

pub struct BiOutput {
    /// `[n, 2 * hidden]`
    pub sequence: Var,
    /// `[1, 2 * hidden]`: forward state after the last step, backward
    /// state after the first.
    pub final_state: Var,
}

impl BiRecurrent {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        kind: CellKind,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fwd: RecurrentCell::new(params, &format!("{name}.fwd"), kind, d_in, hidden, rng)?,
            bwd: RecurrentCell::new(params, &format!("{name}.bwd"), kind, d_in, hidden, rng)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<BiOutput> {
        let f = self.fwd.run(t, x, false)?;
        let b = self.bwd.run(t, x, true)?;
        let f_seq = t.concat(&f, 0)?;
        let b_seq = t.concat(&b, 0)?;
        let sequence = t.concat(&[f_seq, b_seq], 1)?;
        let final_state = t.concat(&[*f.last().expect("non-empty"), b[0]], 1)?;
        Ok(BiOutput { sequence, final_state })
    }
}
