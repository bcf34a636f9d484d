//! The limiting graphon system: the coupled graphon-Lindblad ODE for cell
//! means, the Picard fixed-point map, diffusive and jump trajectory
//! simulators driven by a frozen mean field, and the stability and
//! propagation-of-chaos experiments.
//!
//! The `u`-continuum is discretized into `n_u` uniform cells carrying
//! cell-constant states; the interaction integral becomes the cell average
//! `(1/n) sum_v W(u,v) A^{m_v}`, exact when `W` is a step kernel aligned
//! with the grid.

use rayon::prelude::*;

use rand_distr::{Distribution, Exp, Normal};

use crate::error::{Error, Result};
use crate::graphon::{self, StepKernel};
use crate::model::{
    mean_field_operator, unitarity_defect, CellLaws, Detection, ParticleModel,
};
use crate::nbody::{
    homodyne_em_step, Observations, SchemeMeta, SimConfig, TrajectoryRecord,
};
use crate::qmatrix::{
    cr, frobenius_norm, hermitize, project_with_report, CMat, DensityMatrix, Tolerances, IM,
};
use crate::rng::{fold_seed, stream, TAG_CELL, TAG_SITE, TAG_TRAJECTORY};

#[derive(Debug, Clone)]
pub struct LimitSimConfig {
    /// Cells of the uniform grid on `[0, 1]`; must equal the kernel's block count.
    pub n_u: usize,
    pub dt: f64,
    pub t_max: f64,
    /// Monte Carlo trajectories per cell.
    pub trajectories: usize,
    pub seed: u64,
    pub detection: Detection,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub renorm_every: usize,
}

impl LimitSimConfig {
    pub fn new(n_u: usize, dt: f64, t_max: f64, seed: u64) -> Self {
        LimitSimConfig {
            n_u,
            dt,
            t_max,
            trajectories: 100,
            seed,
            detection: Detection::Homodyne,
            picard_tol: 1e-8,
            picard_max_iter: 20,
            renorm_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_u == 0 {
            return Err(Error::validation("sim.n_u", "must be >= 1"));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_max && self.t_max.is_finite()) {
            return Err(Error::validation(
                "sim.dt",
                format!("need 0 < dt <= t_max, got dt = {}, t_max = {}", self.dt, self.t_max),
            ));
        }
        if self.trajectories == 0 {
            return Err(Error::validation("sim.trajectories", "must be >= 1"));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::validation("sim.picard_tol", "must be > 0"));
        }
        if self.picard_max_iter == 0 {
            return Err(Error::validation("sim.picard_max_iter", "must be >= 1"));
        }
        if self.renorm_every == 0 {
            return Err(Error::validation("sim.renorm_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt).round().max(1.0) as usize
    }

    fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            dt: self.dt,
            t_max: self.t_max,
            seed,
            store_marginals: Vec::new(),
            renorm_every: self.renorm_every,
        }
    }
}

/// Time-indexed grid of cell means `m^u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldPath {
    n_u: usize,
    dt: f64,
    /// `values[cell][step]`, step 0 is the initial condition.
    values: Vec<Vec<CMat>>,
}

impl MeanFieldPath {
    pub fn constant(m0: &DensityMatrix, n_u: usize, dt: f64, n_steps: usize) -> Self {
        MeanFieldPath {
            n_u,
            dt,
            values: vec![vec![m0.matrix().clone(); n_steps + 1]; n_u],
        }
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.values[0].len() - 1
    }

    pub fn t_max(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }

    pub fn value(&self, cell: usize, step: usize) -> &CMat {
        &self.values[cell][step]
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps()).map(move |k| k as f64 * self.dt)
    }

    /// Linear interpolation between grid knots, clamped at the ends.
    pub fn interp(&self, cell: usize, t: f64) -> CMat {
        let steps = self.n_steps();
        let x = (t / self.dt).clamp(0.0, steps as f64);
        let k = (x.floor() as usize).min(steps.saturating_sub(1));
        let frac = x - k as f64;
        if frac == 0.0 {
            self.values[cell][k].clone()
        } else {
            &self.values[cell][k] * cr(1.0 - frac) + &self.values[cell][k + 1] * cr(frac)
        }
    }

    fn grids_match(&self, other: &MeanFieldPath) -> bool {
        self.n_u == other.n_u && self.dt == other.dt && self.n_steps() == other.n_steps()
    }

    /// `sup_{t,u}` Frobenius distance between two paths on the same grid.
    pub fn sup_distance(&self, other: &MeanFieldPath) -> Result<f64> {
        if !self.grids_match(other) {
            return Err(Error::GridMismatch("mean-field paths on different grids".into()));
        }
        let mut sup = 0.0f64;
        for (a_cell, b_cell) in self.values.iter().zip(other.values.iter()) {
            for (a, b) in a_cell.iter().zip(b_cell.iter()) {
                sup = sup.max(frobenius_norm(&(a - b)));
            }
        }
        Ok(sup)
    }
}

/// Fixed-point iteration diagnostics.
#[derive(Debug, Clone)]
pub struct PicardReport {
    pub iterates: usize,
    pub distances: Vec<f64>,
    pub converged: bool,
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutNormMethod {
    Exact,
    Heuristic,
}

/// Outcome of one coupled-noise stability run.
#[derive(Debug, Clone)]
pub struct StabilityResult {
    /// Monte Carlo estimate of `E[int_I sup_t ||d gamma||^2 du]`.
    pub distance_sq: f64,
    pub mc_stderr: f64,
    pub cut_norm: f64,
    pub cut_norm_method: CutNormMethod,
    /// `distance_sq / cut_norm`; 0 when both vanish, infinite when only the
    /// cut norm does.
    pub ratio: f64,
    pub detection: Detection,
    pub trajectories: usize,
    pub n_u: usize,
    /// Joint law used for the two systems.
    pub coupling: &'static str,
}

/// One row of the propagation-of-chaos table.
#[derive(Debug, Clone)]
pub struct ChaosRow {
    pub n_sites: usize,
    pub interaction_scale: f64,
    /// Sup over cells of the Frobenius distance between the ensemble cell
    /// marginal and the limit mean at the final time.
    pub distance: f64,
    /// MC standard error of the estimator at the extremal cell.
    pub stderr: f64,
    pub trajectories: usize,
}

fn dissipator(l: &CMat, l_adj: &CMat, lldag: &CMat, m: &CMat) -> CMat {
    l * m * l_adj - (lldag * m + m * lldag) * cr(0.5)
}

/// Right-hand side of the coupled graphon-Lindblad system, one matrix per
/// cell; each output is traceless and Hermitian.
pub fn lindblad_rhs(
    w: &StepKernel,
    model: &ParticleModel,
    laws: &CellLaws,
    means: &[CMat],
) -> Result<Vec<CMat>> {
    if means.len() != w.n() {
        return Err(Error::DimensionMismatch(format!(
            "lindblad_rhs: kernel has {} cells, got {} means",
            w.n(),
            means.len()
        )));
    }
    let l = model.meas().l();
    let l_adj = l.adjoint();
    let lldag = l * &l_adj;
    (0..w.n())
        .map(|u| {
            let control = laws.at(u).evaluate(&means[u], u);
            let h = crate::model::effective_limit_hamiltonian(model, w, u, means, control)?;
            let comm = (&h * &means[u] - &means[u] * &h) * -IM;
            Ok(comm + dissipator(l, &l_adj, &lldag, &means[u]))
        })
        .collect()
}

fn breach_and_project(state: &mut CMat, renorms: &mut usize) -> Result<()> {
    let tol = Tolerances::default();
    let tr = state.trace();
    let herm = frobenius_norm(&(&*state - state.adjoint()));
    let scale = frobenius_norm(state).max(1.0);
    let mut breach = (tr.re - 1.0).abs() > tol.trace
        || tr.im.abs() > tol.trace
        || herm > tol.herm * scale;
    if !breach {
        let min = hermitize(state)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        breach = min < -tol.psd;
    }
    if breach {
        let report = project_with_report(state, &tol)?;
        *state = report.state.into_matrix();
        *renorms += 1;
    }
    Ok(())
}

/// RK4 integration of the coupled per-cell Lindblad system. States are
/// projected back onto density matrices only when a validity tolerance is
/// breached (RK4 conserves the trace to machine precision).
pub fn solve_mean_ode(
    w: &StepKernel,
    model: &ParticleModel,
    laws: &CellLaws,
    m0: &DensityMatrix,
    cfg: &LimitSimConfig,
) -> Result<MeanFieldPath> {
    cfg.validate()?;
    if cfg.n_u != w.n() {
        return Err(Error::GridMismatch(format!(
            "config has n_u = {}, kernel has {} blocks",
            cfg.n_u,
            w.n()
        )));
    }
    let n_u = cfg.n_u;
    let n_steps = cfg.n_steps();
    let h = cfg.dt;
    let mut states: Vec<CMat> = vec![m0.matrix().clone(); n_u];
    let mut values: Vec<Vec<CMat>> = vec![Vec::with_capacity(n_steps + 1); n_u];
    for (u, v) in values.iter_mut().enumerate() {
        v.push(states[u].clone());
    }
    let mut renorms = 0usize;
    let axpy = |base: &[CMat], k: &[CMat], c: f64| -> Vec<CMat> {
        base.iter().zip(k).map(|(b, kk)| b + kk * cr(c)).collect()
    };
    for _ in 0..n_steps {
        let k1 = lindblad_rhs(w, model, laws, &states)?;
        let k2 = lindblad_rhs(w, model, laws, &axpy(&states, &k1, 0.5 * h))?;
        let k3 = lindblad_rhs(w, model, laws, &axpy(&states, &k2, 0.5 * h))?;
        let k4 = lindblad_rhs(w, model, laws, &axpy(&states, &k3, h))?;
        for u in 0..n_u {
            states[u] += (&k1[u] + &k2[u] * cr(2.0) + &k3[u] * cr(2.0) + &k4[u]) * cr(h / 6.0);
            breach_and_project(&mut states[u], &mut renorms)?;
            values[u].push(states[u].clone());
        }
    }
    Ok(MeanFieldPath {
        n_u,
        dt: cfg.dt,
        values,
    })
}

/// Per-cell effective interaction field `(1/n) sum_v W(u,v) A^{m_v(t)}` on
/// the grid knots; `None` when the interaction vanishes identically.
fn interaction_fields(
    w: &StepKernel,
    model: &ParticleModel,
    mean: &MeanFieldPath,
) -> Result<Option<Vec<Vec<CMat>>>> {
    if model.interaction().is_zero() || w.weights().iter().all(|&x| x == 0.0) {
        return Ok(None);
    }
    let n_u = w.n();
    let n_steps = mean.n_steps();
    // A^{m_v(t_k)} for every (v, k).
    let mut contracted: Vec<Vec<CMat>> = Vec::with_capacity(n_u);
    for v in 0..n_u {
        let mut per_step = Vec::with_capacity(n_steps + 1);
        for k in 0..=n_steps {
            per_step.push(mean_field_operator(model.interaction(), mean.value(v, k))?);
        }
        contracted.push(per_step);
    }
    let inv_n = 1.0 / n_u as f64;
    let d = model.d();
    let fields = (0..n_u)
        .map(|u| {
            (0..=n_steps)
                .map(|k| {
                    let mut f = CMat::zeros(d, d);
                    for (v, c) in contracted.iter().enumerate() {
                        let wuv = w.value(u, v);
                        if wuv != 0.0 {
                            f += &c[k] * cr(inv_n * wuv);
                        }
                    }
                    f
                })
                .collect()
        })
        .collect();
    Ok(Some(fields))
}

fn field_at(fields: &Option<Vec<Vec<CMat>>>, cell: usize, k: usize) -> Option<&CMat> {
    fields.as_ref().map(|f| &f[cell][k])
}

/// Linear interpolation of a knot-sampled field at `t = (k + frac) dt`.
fn field_interp(fields: &Option<Vec<Vec<CMat>>>, cell: usize, x: f64, n_steps: usize) -> Option<CMat> {
    fields.as_ref().map(|f| {
        let x = x.clamp(0.0, n_steps as f64);
        let k = (x.floor() as usize).min(n_steps - 1);
        let frac = x - k as f64;
        if frac == 0.0 {
            f[cell][k].clone()
        } else {
            &f[cell][k] * cr(1.0 - frac) + &f[cell][k + 1] * cr(frac)
        }
    })
}

/// One application of the Picard map: for each cell, integrate the
/// Lindblad ODE driven by the frozen field `A^{xi^v_t}` (control evaluated
/// on the evolving mean), starting at the frozen path's initial slice. The
/// expectation of the frozen-field SDE satisfies exactly this equation, so
/// no Monte Carlo enters the fixed-point iteration.
pub fn picard_map(
    w: &StepKernel,
    model: &ParticleModel,
    laws: &CellLaws,
    frozen: &MeanFieldPath,
    cfg: &LimitSimConfig,
) -> Result<MeanFieldPath> {
    cfg.validate()?;
    if cfg.n_u != w.n() || frozen.n_u() != w.n() {
        return Err(Error::GridMismatch(format!(
            "picard_map: kernel {} vs path {} vs config {}",
            w.n(),
            frozen.n_u(),
            cfg.n_u
        )));
    }
    if frozen.dt() != cfg.dt || frozen.n_steps() != cfg.n_steps() {
        return Err(Error::GridMismatch(format!(
            "picard_map: frozen path grid (dt {}, {} steps) differs from config (dt {}, {} steps)",
            frozen.dt(),
            frozen.n_steps(),
            cfg.dt,
            cfg.n_steps()
        )));
    }
    let fields = interaction_fields(w, model, frozen)?;
    let n_steps = cfg.n_steps();
    let h = cfg.dt;
    let l = model.meas().l().clone();
    let l_adj = l.adjoint();
    let lldag = &l * &l_adj;

    let values: Result<Vec<Vec<CMat>>> = (0..cfg.n_u)
        .into_par_iter()
        .map(|u| {
            let law = laws.at(u);
            let rhs = |mu: &CMat, x: f64| -> CMat {
                let control = law.evaluate(mu, u);
                let mut ham = model.h_free() + model.h_ctrl() * cr(control);
                if let Some(f) = field_interp(&fields, u, x, n_steps) {
                    ham += f;
                }
                (&ham * mu - mu * &ham) * -IM + dissipator(&l, &l_adj, &lldag, mu)
            };
            let mut mu = frozen.value(u, 0).clone();
            let mut out = Vec::with_capacity(n_steps + 1);
            out.push(mu.clone());
            let mut renorms = 0usize;
            for k in 0..n_steps {
                let x = k as f64;
                let k1 = rhs(&mu, x);
                let k2 = rhs(&(&mu + &k1 * cr(0.5 * h)), x + 0.5);
                let k3 = rhs(&(&mu + &k2 * cr(0.5 * h)), x + 0.5);
                let k4 = rhs(&(&mu + &k3 * cr(h)), x + 1.0);
                mu += (k1 + k2 * cr(2.0) + k3 * cr(2.0) + k4) * cr(h / 6.0);
                breach_and_project(&mut mu, &mut renorms)?;
                out.push(mu.clone());
            }
            Ok(out)
        })
        .collect();
    Ok(MeanFieldPath {
        n_u: cfg.n_u,
        dt: cfg.dt,
        values: values?,
    })
}

/// Iterate the Picard map from the constant-in-time path at `m0` until the
/// sup-distance between successive iterates drops below `picard_tol`.
///
/// The first application initializes the iterate and is not counted; with a
/// decoupled kernel the recorded distance sequence is `[0]` and the solver
/// converges after one iteration. `converged = false` (not an error) when
/// `picard_max_iter` is exhausted.
pub fn picard_solve(
    w: &StepKernel,
    model: &ParticleModel,
    laws: &CellLaws,
    m0: &DensityMatrix,
    cfg: &LimitSimConfig,
) -> Result<(MeanFieldPath, PicardReport)> {
    cfg.validate()?;
    let mut x = MeanFieldPath::constant(m0, cfg.n_u, cfg.dt, cfg.n_steps());
    x = picard_map(w, model, laws, &x, cfg)?;
    let mut distances = Vec::new();
    let mut converged = false;
    for _ in 1..=cfg.picard_max_iter {
        let y = picard_map(w, model, laws, &x, cfg)?;
        let d = y.sup_distance(&x)?;
        distances.push(d);
        x = y;
        if d <= cfg.picard_tol {
            converged = true;
            break;
        }
    }
    let report = PicardReport {
        iterates: distances.len(),
        distances,
        converged,
        tol: cfg.picard_tol,
    };
    Ok((x, report))
}

/// Diffusive limit trajectory for one cell, driven by the frozen mean field:
/// Euler-Maruyama with the shared raw step, per-step observation increments,
/// projection per `renorm_every`. Deterministic given `seed`.
pub fn simulate_homodyne_limit(
    w: &StepKernel,
    model: &ParticleModel,
    laws: &CellLaws,
    mean: &MeanFieldPath,
    cell: usize,
    cfg: &LimitSimConfig,
    seed: u64,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    check_limit_grid(w, mean, cell, cfg)?;
    let fields = interaction_fields(w, model, mean)?;
    let l = model.meas().l().clone();
    let eta = model.meas().eta();
    let d = model.d();
    let law = laws.at(cell);
    let n_steps = cfg.n_steps();

    let mut rng = stream(seed, &[TAG_SITE, cell as u64 + 1]);
    let normal = Normal::new(0.0, cfg.dt.sqrt()).expect("valid std dev");

    let mut gamma = mean.value(cell, 0).clone();
    let mut states = vec![gamma.clone()];
    let mut increments = Vec::with_capacity(n_steps);
    let mut times = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    let mut renorm_count = 0usize;
    for k in 0..n_steps {
        let control = law.evaluate(&gamma, cell);
        let mut ham = model.h_free() + model.h_ctrl() * cr(control);
        if let Some(f) = field_at(&fields, cell, k) {
            ham += f;
        }
        let dw = normal.sample(&mut rng);
        let (next, dys) = homodyne_em_step(&gamma, &ham, &l, d, 1, eta, cfg.dt, &[dw])?;
        gamma = next;
        increments.push(dys[0]);
        if (k + 1) % cfg.renorm_every == 0 {
            let report = project_with_report(&gamma, &Tolerances::default())?;
            if report.changed {
                renorm_count += 1;
            }
            gamma = report.state.into_matrix();
        }
        times.push((k + 1) as f64 * cfg.dt);
        states.push(gamma.clone());
    }
    Ok(TrajectoryRecord {
        times,
        marginals: [(cell + 1, states)].into_iter().collect(),
        observations: Observations::Homodyne {
            increments: vec![increments],
        },
        seed,
        scheme: SchemeMeta {
            scheme: "euler-maruyama",
            dt: cfg.dt,
            renorm_every: cfg.renorm_every,
            renorm_count,
        },
    })
}

/// Jump limit trajectory for one cell: RK4 flow of
/// `-i[H_free + u H_ctrl + (1/n) sum_v W(u,v) A^{m_v(t)}, gamma]` between
/// rate-one Poisson jumps, `gamma -> L gamma L^dag` at jumps.
pub fn simulate_jump_limit(
    w: &StepKernel,
    model: &ParticleModel,
    laws: &CellLaws,
    mean: &MeanFieldPath,
    cell: usize,
    cfg: &LimitSimConfig,
    seed: u64,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    check_limit_grid(w, mean, cell, cfg)?;
    let l = model.meas().l().clone();
    let dev = unitarity_defect(&l);
    if dev > 1e-10 {
        return Err(Error::NonUnitaryL { deviation: dev });
    }
    let fields = interaction_fields(w, model, mean)?;
    let l_adj = l.adjoint();
    let law = laws.at(cell);
    let n_steps = cfg.n_steps();
    let dt = cfg.dt;

    let mut rng = stream(seed, &[TAG_SITE, cell as u64 + 1]);
    let exp = Exp::new(1.0).expect("rate 1");
    let mut jumps = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp.sample(&mut rng);
        if t > cfg.t_max {
            break;
        }
        jumps.push(t);
    }

    let rhs = |gamma: &CMat, x: f64| -> CMat {
        let control = law.evaluate(gamma, cell);
        let mut ham = model.h_free() + model.h_ctrl() * cr(control);
        if let Some(f) = field_interp(&fields, cell, x, n_steps) {
            ham += f;
        }
        (&ham * gamma - gamma * &ham) * -IM
    };
    let integrate = |gamma: &mut CMat, t0: f64, t1: f64| {
        if t1 <= t0 {
            return;
        }
        let steps = ((t1 - t0) / dt).ceil().max(1.0) as usize;
        let h = (t1 - t0) / steps as f64;
        for s in 0..steps {
            let tt = t0 + s as f64 * h;
            let x = tt / dt;
            let xh = h / dt;
            let k1 = rhs(gamma, x);
            let k2 = rhs(&(&*gamma + &k1 * cr(0.5 * h)), x + 0.5 * xh);
            let k3 = rhs(&(&*gamma + &k2 * cr(0.5 * h)), x + 0.5 * xh);
            let k4 = rhs(&(&*gamma + &k3 * cr(h)), x + xh);
            *gamma += (k1 + k2 * cr(2.0) + k3 * cr(2.0) + k4) * cr(h / 6.0);
        }
    };

    let mut gamma = mean.value(cell, 0).clone();
    let mut states = vec![gamma.clone()];
    let mut times = vec![0.0];
    let mut cursor = 0.0f64;
    let mut next_jump = 0usize;
    for k in 1..=n_steps {
        let target = k as f64 * dt;
        while next_jump < jumps.len() && jumps[next_jump] <= target {
            let tj = jumps[next_jump];
            integrate(&mut gamma, cursor, tj);
            gamma = &l * &gamma * &l_adj;
            cursor = tj;
            next_jump += 1;
        }
        integrate(&mut gamma, cursor, target);
        cursor = target;
        times.push(target);
        states.push(gamma.clone());
    }
    Ok(TrajectoryRecord {
        times,
        marginals: [(cell + 1, states)].into_iter().collect(),
        observations: Observations::Jumps { times: vec![jumps] },
        seed,
        scheme: SchemeMeta {
            scheme: "rk4-poisson",
            dt,
            renorm_every: cfg.renorm_every,
            renorm_count: 0,
        },
    })
}

fn check_limit_grid(
    w: &StepKernel,
    mean: &MeanFieldPath,
    cell: usize,
    cfg: &LimitSimConfig,
) -> Result<()> {
    if w.n() != mean.n_u() || cfg.n_u != w.n() {
        return Err(Error::GridMismatch(format!(
            "kernel has {} blocks, mean path {} cells, config {}",
            w.n(),
            mean.n_u(),
            cfg.n_u
        )));
    }
    if cell >= w.n() {
        return Err(Error::GridMismatch(format!("cell {cell} outside 0..{}", w.n())));
    }
    if mean.dt() != cfg.dt || mean.n_steps() < cfg.n_steps() {
        return Err(Error::GridMismatch(format!(
            "mean path grid (dt {}, {} steps) does not cover config (dt {}, {} steps)",
            mean.dt(),
            mean.n_steps(),
            cfg.dt,
            cfg.n_steps()
        )));
    }
    Ok(())
}

/// Pathwise-coupled two-graphon experiment: solve both mean fields, drive
/// `M` trajectory pairs per cell with identical noise (same Brownian
/// increments, or the same Poisson jump times), and estimate
/// `E[int_I sup_t ||gamma_a - gamma_b||^2 du]` against `||W_a - W_b||_cut`.
pub fn stability_experiment(
    w_a: &StepKernel,
    w_b: &StepKernel,
    model: &ParticleModel,
    laws: &CellLaws,
    m0: &DensityMatrix,
    cfg: &LimitSimConfig,
) -> Result<StabilityResult> {
    cfg.validate()?;
    if w_a.n() != w_b.n() {
        return Err(Error::GridMismatch(format!(
            "stability kernels have {} vs {} blocks",
            w_a.n(),
            w_b.n()
        )));
    }
    let mean_a = solve_mean_ode(w_a, model, laws, m0, cfg)?;
    let mean_b = solve_mean_ode(w_b, model, laws, m0, cfg)?;
    let fields_a = interaction_fields(w_a, model, &mean_a)?;
    let fields_b = interaction_fields(w_b, model, &mean_b)?;

    let n_u = cfg.n_u;
    let m_traj = cfg.trajectories;
    let sup_sq: Result<Vec<f64>> = (0..n_u * m_traj)
        .into_par_iter()
        .map(|idx| {
            let u = idx / m_traj;
            let m = idx % m_traj;
            let seed = fold_seed(cfg.seed, &[TAG_CELL, u as u64, TAG_TRAJECTORY, m as u64]);
            match cfg.detection {
                Detection::Homodyne => {
                    coupled_homodyne_pair(model, laws, &fields_a, &fields_b, m0, u, cfg, seed)
                }
                Detection::Counting => {
                    coupled_jump_pair(model, laws, &fields_a, &fields_b, m0, u, cfg, seed)
                }
            }
        })
        .collect();
    let sup_sq = sup_sq?;

    let distance_sq = sup_sq.iter().sum::<f64>() / sup_sq.len() as f64;
    // Per-pair cell means, variance over the pair index.
    let mut mean_x = 0.0;
    let mut mean_x2 = 0.0;
    for m in 0..m_traj {
        let x = (0..n_u).map(|u| sup_sq[u * m_traj + m]).sum::<f64>() / n_u as f64;
        mean_x += x;
        mean_x2 += x * x;
    }
    mean_x /= m_traj as f64;
    mean_x2 /= m_traj as f64;
    let var = (mean_x2 - mean_x * mean_x).max(0.0);
    let mc_stderr = (var / m_traj as f64).sqrt();

    let diff = graphon::kernel_sub(w_a, w_b)?;
    let (cut_norm, cut_norm_method) = if diff.n() <= graphon::EXACT_NORM_MAX_BLOCKS {
        (graphon::cut_norm_exact(&diff)?, CutNormMethod::Exact)
    } else {
        (
            graphon::cut_norm_heuristic(&diff, 32, cfg.seed),
            CutNormMethod::Heuristic,
        )
    };
    let ratio = if cut_norm > 0.0 {
        distance_sq / cut_norm
    } else if distance_sq == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(StabilityResult {
        distance_sq,
        mc_stderr,
        cut_norm,
        cut_norm_method,
        ratio,
        detection: cfg.detection,
        trajectories: m_traj,
        n_u,
        coupling: "pathwise-noise",
    })
}

#[allow(clippy::too_many_arguments)]
fn coupled_homodyne_pair(
    model: &ParticleModel,
    laws: &CellLaws,
    fields_a: &Option<Vec<Vec<CMat>>>,
    fields_b: &Option<Vec<Vec<CMat>>>,
    m0: &DensityMatrix,
    cell: usize,
    cfg: &LimitSimConfig,
    seed: u64,
) -> Result<f64> {
    let l = model.meas().l();
    let eta = model.meas().eta();
    let d = model.d();
    let law = laws.at(cell);
    let mut rng = stream(seed, &[TAG_SITE, cell as u64 + 1]);
    let normal = Normal::new(0.0, cfg.dt.sqrt()).expect("valid std dev");
    let n_steps = cfg.n_steps();

    let mut ga = m0.matrix().clone();
    let mut gb = m0.matrix().clone();
    let mut sup = 0.0f64;
    let mut renorms = 0usize;
    for k in 0..n_steps {
        let dw = [normal.sample(&mut rng)];
        for (g, fields) in [(&mut ga, fields_a), (&mut gb, fields_b)] {
            let control = law.evaluate(g, cell);
            let mut ham = model.h_free() + model.h_ctrl() * cr(control);
            if let Some(f) = field_at(fields, cell, k) {
                ham += f;
            }
            let (next, _) = homodyne_em_step(g, &ham, l, d, 1, eta, cfg.dt, &dw)?;
            *g = next;
        }
        if (k + 1) % cfg.renorm_every == 0 {
            breach_and_project(&mut ga, &mut renorms)?;
            breach_and_project(&mut gb, &mut renorms)?;
        }
        let dist = frobenius_norm(&(&ga - &gb));
        sup = sup.max(dist * dist);
    }
    Ok(sup)
}

#[allow(clippy::too_many_arguments)]
fn coupled_jump_pair(
    model: &ParticleModel,
    laws: &CellLaws,
    fields_a: &Option<Vec<Vec<CMat>>>,
    fields_b: &Option<Vec<Vec<CMat>>>,
    m0: &DensityMatrix,
    cell: usize,
    cfg: &LimitSimConfig,
    seed: u64,
) -> Result<f64> {
    let l = model.meas().l().clone();
    let dev = unitarity_defect(&l);
    if dev > 1e-10 {
        return Err(Error::NonUnitaryL { deviation: dev });
    }
    let l_adj = l.adjoint();
    let law = laws.at(cell);
    let dt = cfg.dt;
    let n_steps = cfg.n_steps();

    let mut rng = stream(seed, &[TAG_SITE, cell as u64 + 1]);
    let exp = Exp::new(1.0).expect("rate 1");
    let mut jumps = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp.sample(&mut rng);
        if t > cfg.t_max {
            break;
        }
        jumps.push(t);
    }

    let step = |g: &mut CMat, fields: &Option<Vec<Vec<CMat>>>, t0: f64, t1: f64| {
        if t1 <= t0 {
            return;
        }
        let steps = ((t1 - t0) / dt).ceil().max(1.0) as usize;
        let h = (t1 - t0) / steps as f64;
        let rhs = |gamma: &CMat, x: f64| -> CMat {
            let control = law.evaluate(gamma, cell);
            let mut ham = model.h_free() + model.h_ctrl() * cr(control);
            if let Some(f) = field_interp(fields, cell, x, n_steps) {
                ham += f;
            }
            (&ham * gamma - gamma * &ham) * -IM
        };
        for s in 0..steps {
            let tt = t0 + s as f64 * h;
            let x = tt / dt;
            let xh = h / dt;
            let k1 = rhs(g, x);
            let k2 = rhs(&(&*g + &k1 * cr(0.5 * h)), x + 0.5 * xh);
            let k3 = rhs(&(&*g + &k2 * cr(0.5 * h)), x + 0.5 * xh);
            let k4 = rhs(&(&*g + &k3 * cr(h)), x + xh);
            *g += (k1 + k2 * cr(2.0) + k3 * cr(2.0) + k4) * cr(h / 6.0);
        }
    };

    let mut ga = m0.matrix().clone();
    let mut gb = m0.matrix().clone();
    let mut sup = 0.0f64;
    let mut cursor = 0.0f64;
    let mut next_jump = 0usize;
    for k in 1..=n_steps {
        let target = k as f64 * dt;
        while next_jump < jumps.len() && jumps[next_jump] <= target {
            let tj = jumps[next_jump];
            step(&mut ga, fields_a, cursor, tj);
            step(&mut gb, fields_b, cursor, tj);
            ga = &l * &ga * &l_adj;
            gb = &l * &gb * &l_adj;
            cursor = tj;
            next_jump += 1;
        }
        step(&mut ga, fields_a, cursor, target);
        step(&mut gb, fields_b, cursor, target);
        cursor = target;
        let dist = frobenius_norm(&(&ga - &gb));
        sup = sup.max(dist * dist);
    }
    Ok(sup)
}

/// How the finite interaction graph is produced from the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    /// `xi_pq = W(p/N, q/N)` deterministically.
    Weighted,
    /// `xi_pq ~ Bernoulli(W(p/N, q/N))`.
    Bernoulli,
}

/// Propagation-of-chaos options.
#[derive(Debug, Clone)]
pub struct ChaosConfig {
    pub n_list: Vec<usize>,
    /// Interaction prefactor variants; `1.0` is the printed normalization.
    pub interaction_scales: Vec<f64>,
    pub graph_mode: GraphMode,
    /// Use the pure-state unraveling when admissible (unit efficiency,
    /// normal observable, pure product initial state).
    pub pure_state: bool,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        ChaosConfig {
            n_list: vec![2, 4, 6, 8],
            interaction_scales: vec![1.0, 2.0],
            graph_mode: GraphMode::Weighted,
            pure_state: true,
        }
    }
}

/// Empirical propagation-of-chaos check: for each register size, run a
/// diffusive N-body ensemble on a graph drawn from the kernel, average the
/// site marginals per `u`-cell, and compare against the limit means at the
/// final time.
pub fn chaos_experiment(
    model: &ParticleModel,
    w: &StepKernel,
    m0: &DensityMatrix,
    cfg: &LimitSimConfig,
    chaos: &ChaosConfig,
) -> Result<Vec<ChaosRow>> {
    cfg.validate()?;
    let laws = CellLaws::uniform(model.control().clone());
    let mean = solve_mean_ode(w, model, &laws, m0, cfg)?;
    let n_u = w.n();
    let final_means: Vec<&CMat> = (0..n_u).map(|u| mean.value(u, mean.n_steps())).collect();

    let pure_ok = chaos.pure_state
        && (model.meas().eta() - 1.0).abs() <= 1e-12
        && crate::model::normality_defect(model.meas().l()) <= 1e-10
        && m0.pure_state_vector(1e-9).is_some();

    let mut rows = Vec::new();
    for &n_sites in &chaos.n_list {
        let graph = match chaos.graph_mode {
            GraphMode::Weighted => graphon::weighted_graph(w, n_sites)?,
            GraphMode::Bernoulli => graphon::sample_bernoulli(
                w,
                n_sites,
                fold_seed(cfg.seed, &[TAG_GRAPH_LOCAL, n_sites as u64]),
            )?,
        };
        let cell_of_site = |q: usize| -> usize {
            // Site q sits at u = q/N; cells are left-open intervals.
            ((q * n_u).div_ceil(n_sites)).saturating_sub(1).min(n_u - 1)
        };
        for &scale in &chaos.interaction_scales {
            let m_traj = cfg.trajectories;
            let per_traj: Result<Vec<Vec<CMat>>> = (0..m_traj)
                .into_par_iter()
                .map(|t| {
                    let seed = fold_seed(
                        cfg.seed,
                        &[TAG_GRAPH_LOCAL, n_sites as u64, TAG_TRAJECTORY, t as u64],
                    );
                    let sub_cfg = cfg.sim_config(seed);
                    if pure_ok {
                        crate::nbody::homodyne_nbody_pure_final_marginals(
                            model, &graph, m0, &sub_cfg, scale,
                        )
                    } else {
                        crate::nbody::homodyne_nbody_final_marginals(
                            model, &graph, m0, &sub_cfg, scale,
                        )
                    }
                })
                .collect();
            let per_traj = per_traj?;

            // Per-cell ensemble statistics, reduced in fixed order.
            let d = model.d();
            let mut cell_sum = vec![CMat::zeros(d, d); n_u];
            let mut cell_sumsq = vec![vec![0.0f64; 2 * d * d]; n_u];
            let mut cell_sites = vec![0usize; n_u];
            for q in 1..=n_sites {
                cell_sites[cell_of_site(q)] += 1;
            }
            for marginals in &per_traj {
                let mut per_cell = vec![CMat::zeros(d, d); n_u];
                for (q, marg) in marginals.iter().enumerate() {
                    per_cell[cell_of_site(q + 1)] += marg;
                }
                for u in 0..n_u {
                    if cell_sites[u] == 0 {
                        continue;
                    }
                    let avg = &per_cell[u] * cr(1.0 / cell_sites[u] as f64);
                    for (j, z) in avg.iter().enumerate() {
                        cell_sumsq[u][2 * j] += z.re * z.re;
                        cell_sumsq[u][2 * j + 1] += z.im * z.im;
                    }
                    cell_sum[u] += avg;
                }
            }
            let mut distance = 0.0f64;
            let mut stderr_at_max = 0.0f64;
            for u in 0..n_u {
                if cell_sites[u] == 0 {
                    continue;
                }
                let mean_mat = &cell_sum[u] * cr(1.0 / m_traj as f64);
                let dist = frobenius_norm(&(&mean_mat - final_means[u]));
                let mut var_total = 0.0;
                for (j, z) in mean_mat.iter().enumerate() {
                    let var_re =
                        (cell_sumsq[u][2 * j] / m_traj as f64 - z.re * z.re).max(0.0);
                    let var_im =
                        (cell_sumsq[u][2 * j + 1] / m_traj as f64 - z.im * z.im).max(0.0);
                    var_total += var_re + var_im;
                }
                let stderr = (var_total / m_traj as f64).sqrt();
                if dist >= distance {
                    distance = dist;
                    stderr_at_max = stderr;
                }
            }
            rows.push(ChaosRow {
                n_sites,
                interaction_scale: scale,
                distance,
                stderr: stderr_at_max,
                trajectories: m_traj,
            });
        }
    }
    Ok(rows)
}

const TAG_GRAPH_LOCAL: u64 = 0x6368_6100;
