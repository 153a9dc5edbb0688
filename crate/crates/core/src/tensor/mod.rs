//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Every feature map of the network lives in a [`Tensor`]. Operations are
//! recorded on a [`Tape`] in creation order, which is a topological order, so
//! [`Tape::backward`] is a single reverse sweep. Parameters enter a tape as
//! tracked leaves via [`Tape::param`]; fixed inputs via [`Tape::constant`].
//!
//! Broadcasting follows the usual singleton rule on equal-rank operands.

mod dense;
mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_scaled, GradCheck};
pub use tape::{inject_backward_fault, sigmoid, Conv2dArgs, OpKind, Tape, Var};

/// Global average pool followed by a stack of fully connected layers.
///
/// `layers` holds (weight `[in, out]`, bias `[1, out]`) pairs; `activations`
/// is applied after each layer. Returns an `[N, out]` tensor.
pub fn pool_and_fc(
    tape: &mut Tape,
    input: Var,
    layers: &[(Var, Var)],
    activations: &[Activation],
) -> crate::Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 {
        return Err(crate::Error::shape("pool_and_fc", format!("expected rank 4, got {shape:?}")));
    }
    let pooled = tape.mean_axes(input, &[2, 3])?;
    let mut x = tape.reshape(pooled, &[shape[0], shape[1]])?;
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = linear(tape, x, w, b)?;
        x = activations.get(i).copied().unwrap_or(Activation::Identity).apply(tape, x);
    }
    Ok(x)
}

/// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [1, out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> crate::Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}
