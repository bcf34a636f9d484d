//! Model assembly: pair interaction operator and its kernel symmetries, the
//! mean-field operator, Hamiltonian builders for finite registers and for
//! the limit system, measurement configuration, and feedback laws.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::graphon::StepKernel;
use crate::qmatrix::{
    annihilation, cr, frobenius_norm, identity, kron, sigma_x, CMat,
    DensityMatrix, SiteIndex,
};
use crate::{graphon::SampledGraph, qmatrix};

const SYMMETRY_TOL: f64 = 1e-12;

/// Pair interaction with Hilbert-Schmidt kernel `a(x,y; x',y')` stored as a
/// `d^2 x d^2` matrix, row `(x,y)` and column `(x',y')` paired row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionOperator {
    d: usize,
    matrix: CMat,
}

impl InteractionOperator {
    pub fn new(d: usize, matrix: CMat) -> Result<Self> {
        let d2 = d * d;
        if matrix.nrows() != d2 || matrix.ncols() != d2 {
            return Err(Error::DimensionMismatch(format!(
                "interaction kernel must be {d2}x{d2} for d = {d}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = frobenius_norm(&matrix).max(1.0);
        let herm = frobenius_norm(&(&matrix - matrix.adjoint()));
        if herm > SYMMETRY_TOL * scale {
            return Err(Error::InvalidDensity(format!(
                "interaction kernel not Hermitian (defect {herm:.3e})"
            )));
        }
        // Exchange symmetry a(x,y;x',y') = a(y,x;y',x').
        let mut defect = 0.0f64;
        for x in 0..d {
            for y in 0..d {
                for xp in 0..d {
                    for yp in 0..d {
                        let lhs = matrix[(x * d + y, xp * d + yp)];
                        let rhs = matrix[(y * d + x, yp * d + xp)];
                        defect = defect.max((lhs - rhs).norm());
                    }
                }
            }
        }
        if defect > SYMMETRY_TOL * scale {
            return Err(Error::InvalidDensity(format!(
                "interaction kernel not exchange-symmetric (defect {defect:.3e})"
            )));
        }
        Ok(InteractionOperator { d, matrix })
    }

    /// Photon-exchange coupling on qubits: `A = a^dag (x) a + a (x) a^dag`.
    pub fn exchange_qubit() -> Self {
        let a = annihilation();
        let adag = a.adjoint();
        let matrix = kron(&adag, &a) + kron(&a, &adag);
        InteractionOperator { d: 2, matrix }
    }

    pub fn zero(d: usize) -> Self {
        InteractionOperator {
            d,
            matrix: CMat::zeros(d * d, d * d),
        }
    }

    pub fn identity(d: usize) -> Self {
        InteractionOperator {
            d,
            matrix: identity(d * d),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn is_zero(&self) -> bool {
        self.matrix.iter().all(|z| z.norm_sqr() == 0.0)
    }
}

/// Effective one-body field `A^rho`: contraction of the kernel against a
/// state on the second slot, `(A^rho)_{x,x'} = sum_{y,y'} a(x,y;x',y') rho(y',y)`.
///
/// Linear in `rho`; Hermitian whenever `rho` is.
pub fn mean_field_operator(a: &InteractionOperator, rho: &CMat) -> Result<CMat> {
    let d = a.d();
    if rho.nrows() != d || rho.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "mean_field_operator: state is {}x{}, interaction expects {d}x{d}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    let mut out = CMat::zeros(d, d);
    for x in 0..d {
        for xp in 0..d {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..d {
                for yp in 0..d {
                    acc += a.matrix[(x * d + y, xp * d + yp)] * rho[(yp, y)];
                }
            }
            out[(x, xp)] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    Homodyne,
    Counting,
}

/// Measurement channel: observable `L`, efficiency `eta`, detection type.
/// Counting detection requires unitary `L` (constant unit jump intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementConfig {
    l: CMat,
    eta: f64,
    detection: Detection,
}

impl MeasurementConfig {
    pub fn new(l: CMat, eta: f64, detection: Detection) -> Result<Self> {
        if l.nrows() != l.ncols() || l.nrows() == 0 {
            return Err(Error::DimensionMismatch("measurement operator must be square".into()));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::validation("model.eta", format!("must lie in (0, 1], got {eta}")));
        }
        if detection == Detection::Counting {
            let dev = unitarity_defect(&l);
            if dev > 1e-10 {
                return Err(Error::NonUnitaryL { deviation: dev });
            }
        }
        Ok(MeasurementConfig { l, eta, detection })
    }

    pub fn l(&self) -> &CMat {
        &self.l
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn detection(&self) -> Detection {
        self.detection
    }
}

pub fn unitarity_defect(l: &CMat) -> f64 {
    let d = l.nrows();
    frobenius_norm(&(l * l.adjoint() - identity(d)))
}

/// Deviation from normality `|| L L^dag - L^dag L ||`; the printed diffusive
/// generator conserves trace exactly when this vanishes.
pub fn normality_defect(l: &CMat) -> f64 {
    frobenius_norm(&(l * l.adjoint() - l.adjoint() * l))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlKind {
    /// No actuation.
    None,
    /// The printed qubit feedback `-8i tr([sx, g] tau) + 5 (1 - tr(g tau))`.
    DemoFeedback { target: DensityMatrix },
    /// Constant open-loop drive per cell (broadcast when shorter).
    Table { values: Vec<f64> },
}

/// Scalar admissible control; output clipped to `[-bound, bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    pub kind: ControlKind,
    pub bound: f64,
}

impl ControlLaw {
    pub fn none() -> Self {
        ControlLaw {
            kind: ControlKind::None,
            bound: f64::INFINITY,
        }
    }

    pub fn demo_feedback(target: DensityMatrix, bound: f64) -> Self {
        ControlLaw {
            kind: ControlKind::DemoFeedback { target },
            bound,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, ControlKind::None)
    }

    /// Evaluate on the (marginal) state of one particle or cell.
    pub fn evaluate(&self, state: &CMat, cell: usize) -> f64 {
        match &self.kind {
            ControlKind::None => 0.0,
            ControlKind::DemoFeedback { target } => {
                demo_control(state, target.matrix(), self.bound)
            }
            ControlKind::Table { values } => {
                if values.is_empty() {
                    0.0
                } else {
                    values[cell.min(values.len() - 1)].clamp(-self.bound, self.bound)
                }
            }
        }
    }
}

/// Per-cell (or per-site) control assignment; a single law broadcasts.
#[derive(Debug, Clone)]
pub struct CellLaws(Vec<ControlLaw>);

impl CellLaws {
    pub fn uniform(law: ControlLaw) -> Self {
        CellLaws(vec![law])
    }

    pub fn per_cell(laws: Vec<ControlLaw>) -> Self {
        assert!(!laws.is_empty());
        CellLaws(laws)
    }

    pub fn at(&self, cell: usize) -> &ControlLaw {
        &self.0[cell.min(self.0.len() - 1)]
    }

    pub fn all_none(&self) -> bool {
        self.0.iter().all(|l| l.is_none())
    }
}

/// The printed demo feedback law, `d = 2`: imaginary residue of the trace
/// expression is discarded and the result clipped to `[-bound, bound]`.
pub fn demo_control(gamma: &CMat, target: &CMat, bound: f64) -> f64 {
    debug_assert_eq!(gamma.nrows(), 2);
    let sx = sigma_x();
    let comm = &sx * gamma - gamma * &sx;
    let term1 = -qmatrix::IM * cr(8.0) * (&comm * target).trace();
    let term2 = cr(5.0) * (cr(1.0) - (gamma * target).trace());
    let raw = term1 + term2;
    debug_assert!(raw.im.abs() <= 1e-9 * raw.re.abs().max(1.0), "imaginary residue {}", raw.im);
    raw.re.clamp(-bound, bound)
}

/// One species' dynamics: free and controlled Hamiltonians, pair
/// interaction, measurement channel, feedback law.
#[derive(Debug, Clone)]
pub struct ParticleModel {
    d: usize,
    h_free: CMat,
    h_ctrl: CMat,
    interaction: InteractionOperator,
    meas: MeasurementConfig,
    control: ControlLaw,
}

impl ParticleModel {
    pub fn new(
        d: usize,
        h_free: CMat,
        h_ctrl: CMat,
        interaction: InteractionOperator,
        meas: MeasurementConfig,
        control: ControlLaw,
    ) -> Result<Self> {
        for (name, h) in [("H_free", &h_free), ("H_ctrl", &h_ctrl)] {
            if h.nrows() != d || h.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{name} must be {d}x{d}, got {}x{}",
                    h.nrows(),
                    h.ncols()
                )));
            }
            let defect = frobenius_norm(&(h - h.adjoint()));
            if defect > SYMMETRY_TOL * frobenius_norm(h).max(1.0) {
                return Err(Error::InvalidDensity(format!(
                    "{name} not Hermitian (defect {defect:.3e})"
                )));
            }
        }
        if interaction.d() != d {
            return Err(Error::DimensionMismatch(format!(
                "interaction local dimension {} does not match d = {d}",
                interaction.d()
            )));
        }
        if meas.l().nrows() != d {
            return Err(Error::DimensionMismatch(format!(
                "L must be {d}x{d}, got {}x{}",
                meas.l().nrows(),
                meas.l().ncols()
            )));
        }
        Ok(ParticleModel {
            d,
            h_free,
            h_ctrl,
            interaction,
            meas,
            control,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn h_free(&self) -> &CMat {
        &self.h_free
    }

    pub fn h_ctrl(&self) -> &CMat {
        &self.h_ctrl
    }

    pub fn interaction(&self) -> &InteractionOperator {
        &self.interaction
    }

    pub fn meas(&self) -> &MeasurementConfig {
        &self.meas
    }

    pub fn control(&self) -> &ControlLaw {
        &self.control
    }

    pub fn with_control(mut self, control: ControlLaw) -> Self {
        self.control = control;
        self
    }
}

/// Finite-register Hamiltonian
/// `H = (scale/N) sum_{p>q} xi_pq A_pq + sum_q (H_free + u_q H_ctrl)_q`.
///
/// `scale = 1` is the printed normalization; the chaos experiment also runs
/// `scale = 2` as a sensitivity knob.
pub fn assemble_n_hamiltonian_scaled(
    model: &ParticleModel,
    graph: &SampledGraph,
    controls: &[f64],
    scale: f64,
) -> Result<CMat> {
    let n = graph.n_vertices();
    if controls.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected {n} per-site controls, got {}",
            controls.len()
        )));
    }
    let _d = model.d();
    let mut h: Option<CMat> = None;
    let mut add = |m: CMat| {
        h = Some(match h.take() {
            Some(acc) => acc + m,
            None => m,
        });
    };
    for q in 1..=n {
        let local = &model.h_free + &model.h_ctrl * cr(controls[q - 1]);
        add(qmatrix::embed_single(&local, SiteIndex::new(q, n)?)?);
    }
    if !model.interaction.is_zero() {
        let pref = cr(scale / n as f64);
        for q in 1..=n {
            for p in (q + 1)..=n {
                let xi = graph.adjacency()[(p - 1, q - 1)];
                if xi != 0.0 {
                    let pair = qmatrix::embed_pair(
                        model.interaction.matrix(),
                        SiteIndex::new(p, n)?,
                        SiteIndex::new(q, n)?,
                    )?;
                    add(pair * (pref * cr(xi)));
                }
            }
        }
    }
    Ok(h.expect("n >= 1"))
}

pub fn assemble_n_hamiltonian(
    model: &ParticleModel,
    graph: &SampledGraph,
    controls: &[f64],
) -> Result<CMat> {
    assemble_n_hamiltonian_scaled(model, graph, controls, 1.0)
}

/// Effective one-particle Hamiltonian of the limit system at cell `u`:
/// `H_free + u_c H_ctrl + (1/n) sum_v W(u,v) A^{m_v}`.
pub fn effective_limit_hamiltonian(
    model: &ParticleModel,
    w: &StepKernel,
    cell: usize,
    means: &[CMat],
    control: f64,
) -> Result<CMat> {
    let n = w.n();
    if means.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected {n} cell means, got {}",
            means.len()
        )));
    }
    if cell >= n {
        return Err(Error::GridMismatch(format!("cell {cell} outside 0..{n}")));
    }
    let mut h = &model.h_free + &model.h_ctrl * cr(control);
    if !model.interaction.is_zero() {
        let inv_n = 1.0 / n as f64;
        for (v, mean) in means.iter().enumerate() {
            let wuv = w.value(cell, v);
            if wuv != 0.0 {
                h += mean_field_operator(&model.interaction, mean)? * cr(inv_n * wuv);
            }
        }
    }
    Ok(h)
}
