//! Bloch-vector form of the two-class qubit demo.
//!
//! `bloch_step` integrates the printed component SDEs verbatim. They are
//! kept separate from the matrix-level generator on purpose: the two forms
//! disagree in rate and sign conventions, and the demo reports the
//! discrepancy instead of reconciling it.

use crate::qmatrix::{cr, CMat};

/// Qubit state in Bloch coordinates, `x^2 + y^2 + z^2 <= 1 + 1e-9`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochState {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        BlochState { x, y, z }
    }

    pub fn radius_sq(&self) -> f64 {
        self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn in_ball(&self) -> bool {
        self.radius_sq() <= 1.0 + 1e-9
    }

    /// `(I + x sx + y sy + z sz) / 2`.
    pub fn to_density(&self) -> CMat {
        CMat::from_row_slice(
            2,
            2,
            &[
                cr(0.5 * (1.0 + self.z)),
                crate::qmatrix::c(0.5 * self.x, -0.5 * self.y),
                crate::qmatrix::c(0.5 * self.x, 0.5 * self.y),
                cr(0.5 * (1.0 - self.z)),
            ],
        )
    }

    pub fn from_density(m: &CMat) -> Self {
        BlochState {
            x: (m[(0, 1)] + m[(1, 0)]).re,
            y: (m[(1, 0)] - m[(0, 1)]).im,
            z: (m[(0, 0)] - m[(1, 1)]).re,
        }
    }
}

/// One Euler-Maruyama step of the printed component equations:
///
/// ```text
/// dx = (-y - x + z E[y]) dt - x z dW
/// dy = ( x - y + u z - z E[x]) dt + y z dW
/// dz = (-u x + y E[x] + x E[y]) dt + (1 - z^2) dW
/// ```
///
/// `means = (E[x], E[y])` of the opposite class. The state is scaled back
/// into the Bloch ball when the update overshoots by more than 1e-9.
pub fn bloch_step(
    state: BlochState,
    means: (f64, f64),
    control: f64,
    dt: f64,
    dw: f64,
) -> BlochState {
    let (ex, ey) = means;
    let BlochState { x, y, z } = state;
    let dx = (-y - x + z * ey) * dt - x * z * dw;
    let dy = (x - y + control * z - z * ex) * dt + y * z * dw;
    let dz = (-control * x + y * ex + x * ey) * dt + (1.0 - z * z) * dw;
    let mut next = BlochState::new(x + dx, y + dy, z + dz);
    let r2 = next.radius_sq();
    if r2 > 1.0 + 1e-9 {
        let scale = 1.0 / r2.sqrt();
        next.x *= scale;
        next.y *= scale;
        next.z *= scale;
    }
    next
}
