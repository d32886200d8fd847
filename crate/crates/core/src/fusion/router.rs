use std::fmt;
use std::str::FromStr;

use coop_numerics::{rng, softmax_rows_in_place, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoopError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Linear,
    Mlp2,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Per-position mean of the specialists' final hidden states.
    SpecialistMean,
    /// The base model's final hidden state.
    BaseHidden,
}

macro_rules! text_enum {
    ($t:ty { $($v:path => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = CoopError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(CoopError::InvalidConfig(format!(
                        concat!("unknown ", stringify!($t), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(RouterKind { RouterKind::Linear => "linear", RouterKind::Mlp2 => "mlp2", RouterKind::Uniform => "uniform" });
text_enum!(InputMode { InputMode::SpecialistMean => "specialist_mean", InputMode::BaseHidden => "base_hidden" });

/// A named router array.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Maps a `T × d` hidden state to a `T × N` gate matrix.
///
/// `linear`: `softmax(h · W_rᵀ)` with `W_r` of shape `N × d`.
/// `mlp2`: `softmax(gelu(h · W₁ + b₁) · W₂ᵀ)` with `W₁: d × d`, `W₂: N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub kind: RouterKind,
    pub input_mode: InputMode,
    pub n_experts: usize,
    pub hidden_dim: usize,
    pub arrays: Vec<RouterArray>,
}

impl Router {
    /// Seeded initialization; the output projection starts at zero, so the
    /// initial gates are exactly uniform.
    pub fn init(kind: RouterKind, input_mode: InputMode, n_experts: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if n_experts == 0 || hidden_dim == 0 {
            return Err(CoopError::InvalidConfig("router needs at least one expert and a positive width".into()));
        }
        let zeros = |name: &str, shape: Vec<usize>| RouterArray {
            name: name.into(),
            data: vec![0.0; shape.iter().product()],
            shape,
        };
        let arrays = match kind {
            RouterKind::Uniform => Vec::new(),
            RouterKind::Linear => vec![zeros("w_r", vec![n_experts, hidden_dim])],
            RouterKind::Mlp2 => {
                let mut r = rng::stream(seed, "router-init");
                let normal = Normal::new(0.0, 1.0 / (hidden_dim as f64).sqrt()).expect("valid std");
                let w1 = RouterArray {
                    name: "w1".into(),
                    shape: vec![hidden_dim, hidden_dim],
                    data: (0..hidden_dim * hidden_dim).map(|_| normal.sample(&mut r)).collect(),
                };
                vec![w1, zeros("b1", vec![hidden_dim]), zeros("w2", vec![n_experts, hidden_dim])]
            }
        };
        Ok(Self { kind, input_mode, n_experts, hidden_dim, arrays })
    }

    pub fn uniform(n_experts: usize, hidden_dim: usize) -> Self {
        Self { kind: RouterKind::Uniform, input_mode: InputMode::SpecialistMean, n_experts, hidden_dim, arrays: Vec::new() }
    }

    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub(crate) fn expected_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (n, d) = (self.n_experts, self.hidden_dim);
        match self.kind {
            RouterKind::Uniform => vec![],
            RouterKind::Linear => vec![("w_r", vec![n, d])],
            RouterKind::Mlp2 => vec![("w1", vec![d, d]), ("b1", vec![d]), ("w2", vec![n, d])],
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let want = self.expected_shapes();
        let ok = want.len() == self.arrays.len()
            && want.iter().zip(&self.arrays).all(|((name, shape), a)| {
                a.name == *name && &a.shape == shape && a.data.len() == shape.iter().product::<usize>()
            });
        if !ok {
            return Err(CoopError::InvalidInput(format!("router arrays do not match a {} router", self.kind)));
        }
        if self.arrays.iter().any(|a| a.data.iter().any(|v| !v.is_finite())) {
            return Err(CoopError::InvalidInput("non-finite router weights".into()));
        }
        Ok(())
    }

    /// Gate logits on a tape; `params` are the router arrays in order.
    pub(crate) fn logits_on_tape(&self, tape: &mut Tape, h: Var, params: &[Var]) -> Result<Var> {
        Ok(match self.kind {
            RouterKind::Uniform => unreachable!("uniform routers have no gate logits"),
            RouterKind::Linear => {
                let wt = tape.transpose(params[0])?;
                tape.matmul(h, wt)?
            }
            RouterKind::Mlp2 => {
                let a = tape.matmul(h, params[0])?;
                let a = tape.add(a, params[1])?;
                let a = tape.gelu(a)?;
                let wt = tape.transpose(params[2])?;
                tape.matmul(a, wt)?
            }
        })
    }

    /// Gates for a `rows × d` router input.
    pub fn gates_from_input(&self, input: &Tensor) -> Result<Tensor> {
        let (rows, d) = input
            .dims2()
            .ok_or_else(|| CoopError::InvalidInput(format!("router input must be 2-D, got {:?}", input.shape())))?;
        if d != self.hidden_dim {
            return Err(CoopError::InvalidInput(format!(
                "router input width {d} does not match router width {}",
                self.hidden_dim
            )));
        }
        if self.kind == RouterKind::Uniform {
            return Ok(Tensor::full(vec![rows, self.n_experts], 1.0 / self.n_experts as f64)?);
        }
        let mut tape = Tape::new();
        let h = tape.constant(input.clone())?;
        let params = self
            .arrays
            .iter()
            .map(|a| Ok(tape.constant(Tensor::new(a.shape.clone(), a.data.clone())?)?))
            .collect::<Result<Vec<_>>>()?;
        let z = self.logits_on_tape(&mut tape, h, &params)?;
        let mut g = tape.value(z).clone();
        softmax_rows_in_place(g.data_mut(), self.n_experts);
        Ok(g)
    }
}
