//! Small differentiable building blocks composed from tape primitives.

use super::{Tape, Var};
use crate::error::{GhnError, Result};

/// Gated recurrent unit parameters. Gate weights are `[2D, D]` acting on the
/// row-wise concatenation `[h, m]`; biases are `[D]`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

/// `h' = (1 − z) ⊙ h + z ⊙ ĥ` for a batch of rows `h, m : [n, D]`.
pub fn gru_cell(tape: &mut Tape, h: Var, m: Var, p: &GruParams) -> Result<Var> {
    let (hs, ms) = (tape.shape(h).to_vec(), tape.shape(m).to_vec());
    if hs.len() != 2 || hs != ms {
        return Err(GhnError::dim(format!(
            "gru_cell: state {hs:?} and message {ms:?} must both be [n, D]"
        )));
    }
    let d = hs[1];
    for w in [p.w_z, p.w_r, p.w_h] {
        if tape.shape(w) != [2 * d, d] {
            return Err(GhnError::dim(format!(
                "gru_cell: gate weight {:?} does not match hidden size {d}",
                tape.shape(w)
            )));
        }
    }
    let hm = tape.concat(&[h, m], 1)?;
    let z = tape.linear(hm, p.w_z, p.b_z)?;
    let z = tape.sigmoid(z);
    let r = tape.linear(hm, p.w_r, p.b_r)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let rhm = tape.concat(&[rh, m], 1)?;
    let cand = tape.linear(rhm, p.w_h, p.b_h)?;
    let cand = tape.tanh(cand);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Two-layer perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp2 {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let hidden = tape.linear(x, self.w1, self.b1)?;
        let hidden = tape.relu(hidden);
        tape.linear(hidden, self.w2, self.b2)
    }
}
