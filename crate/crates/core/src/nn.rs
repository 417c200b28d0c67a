//! Small building blocks shared by the model modules.

use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const LN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// How a forward pass behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel noise and dropout on.
    Train,
    /// Deterministic argmax selection, no dropout.
    Eval,
    /// Like `Eval` but history selection uses the soft weights, so the loss
    /// is smooth in every parameter. Used for finite-difference checks.
    Relaxed,
}

/// Per-pass state: mode, dropout rate and the random stream.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub dropout: f64,
    pub temperature: f64,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            temperature: 1.0,
            rng: None,
        }
    }

    pub fn relaxed() -> Self {
        Self {
            mode: Mode::Relaxed,
            ..Self::eval()
        }
    }

    pub fn train(rng: &'a mut Rng, dropout: f64, temperature: f64) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            temperature,
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if !self.is_train() || self.dropout <= 0.0 {
            return Ok(x);
        }
        let rng = self.rng.as_deref_mut().expect("training pass without rng");
        let keep = 1.0 - self.dropout;
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if rng.uniform() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.mul_const(x, &Tensor::new(shape, mask)?)
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.bias"), &[1, fan_out])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gain and bias of a layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{name}.gain"), &[1, width])?,
            bias: store.zeros(format!("{name}.bias"), &[1, width])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
