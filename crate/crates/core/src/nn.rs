//! Layers shared by the tokenizer, the alignment projector and the flow model.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        params: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(vec![in_dim, out_dim], INIT_STD, rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, binding.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_suffix(y, binding.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize, params: &mut ParamStore) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(vec![width], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, binding.var(self.gamma), binding.var(self.beta))
    }
}

/// Two linear maps with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        params: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(&format!("{name}.fc1"), in_dim, hidden, true, params, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, out_dim, true, params, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, binding, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, binding, h)
    }
}

/// Pre-norm single-head self-attention followed by a pre-norm MLP, both residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub width: usize,
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl AttentionBlock {
    pub fn new(
        name: &str,
        width: usize,
        mlp_hidden: usize,
        params: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Self {
        AttentionBlock {
            width,
            ln1: LayerNorm::new(&format!("{name}.ln1"), width, params),
            query: Linear::new(&format!("{name}.q"), width, width, true, params, rng),
            key: Linear::new(&format!("{name}.k"), width, width, true, params, rng),
            value: Linear::new(&format!("{name}.v"), width, width, true, params, rng),
            out: Linear::new(&format!("{name}.o"), width, width, true, params, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), width, params),
            mlp: Mlp::new(
                &format!("{name}.mlp"),
                width,
                mlp_hidden,
                width,
                params,
                rng,
            ),
        }
    }

    /// `tokens: [B, T, W]` to `[B, T, W]`.
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens);
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::shape(
                "attention",
                format!("expected B x T x {}, got {:?}", self.width, s),
            ));
        }
        let h = self.ln1.forward(tape, binding, tokens)?;
        let q = self.query.forward(tape, binding, h)?;
        let k = self.key.forward(tape, binding, h)?;
        let v = self.value.forward(tape, binding, h)?;
        let scores = tape.bmm(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (self.width as f64).sqrt());
        let weights = tape.softmax_rows(scores)?;
        let mixed = tape.bmm(weights, v, false, false)?;
        let attn = self.out.forward(tape, binding, mixed)?;
        let x = tape.add(tokens, attn)?;
        let h = self.ln2.forward(tape, binding, x)?;
        let m = self.mlp.forward(tape, binding, h)?;
        tape.add(x, m)
    }
}

/// Eager attention block application.
pub fn attention(block: &AttentionBlock, params: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = params.bind_frozen(&mut tape);
    let x = tape.constant(tokens.clone());
    let y = block.forward(&mut tape, &binding, x)?;
    Ok(tape.value(y).clone())
}

/// Fixed 1-D sinusoidal embedding, `[len, width]`.
pub fn sincos_1d(len: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * width);
    for p in 0..len {
        for i in 0..width {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / width as f64);
            let a = p as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::from_vec(vec![len, width], data)
}

/// Fixed 2-D sinusoidal embedding for a `grid x grid` patch layout, `[grid^2, width]`:
/// the first half of the channels encode the row, the second half the column.
pub fn sincos_2d(grid: usize, width: usize) -> Tensor {
    let half = width / 2;
    let rows = sincos_1d(grid, half);
    let cols = sincos_1d(grid, width - half);
    let mut data = Vec::with_capacity(grid * grid * width);
    for y in 0..grid {
        for x in 0..grid {
            data.extend_from_slice(&rows.data()[y * half..(y + 1) * half]);
            data.extend_from_slice(&cols.data()[x * (width - half)..(x + 1) * (width - half)]);
        }
    }
    Tensor::from_vec(vec![grid * grid, width], data)
}
