//! Dot-product expression head and the training objective `L_mse + L_pcc`.

use crate::error::{Error, Result};
use crate::nd::{Tape, Tensor, Var};

/// `ŷ[i][c] = z_i · v_cᵀ` for windows `z` (N×D) and gene vectors `v` (G×D).
pub fn predict(tape: &mut Tape, z: Var, v: Var) -> Result<Var> {
    let (zs, vs) = (tape.value(z).shape(), tape.value(v).shape());
    if zs[1] != vs[1] {
        return Err(Error::dim("predict", zs, vs));
    }
    let vt = tape.transpose(v);
    tape.matmul(z, vt)
}

pub fn predict_values(z: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (zv, vv) = (tape.constant(z.clone()), tape.constant(v.clone()));
    let out = predict(&mut tape, zv, vv)?;
    Ok(tape.value(out).clone())
}

/// Mean of `(ŷ − y)²` over all entries.
pub fn loss_mse(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    tape.mse(y_hat, y)
}

/// Mean over genes of `1 − r_c`, correlations taken across windows.
pub fn loss_pcc(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    tape.pcc_loss(y_hat, y)
}

/// Unweighted sum of [`loss_mse`] and [`loss_pcc`].
pub fn loss_total(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    let mse = loss_mse(tape, y_hat, y)?;
    let pcc = loss_pcc(tape, y_hat, y)?;
    tape.add(mse, pcc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub mse: f64,
    pub pcc: f64,
    pub total: f64,
}

pub fn loss_values(y_hat: &Tensor, y: &Tensor) -> Result<LossValues> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(y_hat.clone()), tape.constant(y.clone()));
    let mse = loss_mse(&mut tape, a, b)?;
    let pcc = loss_pcc(&mut tape, a, b)?;
    let total = tape.add(mse, pcc)?;
    Ok(LossValues {
        mse: tape.value(mse).item(),
        pcc: tape.value(pcc).item(),
        total: tape.value(total).item(),
    })
}
