//! Finite-N diffusive and jump trajectory simulators on the full `d^N`
//! register, with per-site observation records.
//!
//! One trajectory is strictly sequential; ensembles derive independent
//! per-(trajectory, site) noise streams via [`crate::rng`] and reduce in
//! fixed index order, so results are bit-identical for a fixed seed
//! regardless of worker count.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Exp, Normal};

use crate::error::{Error, Result};
use crate::graphon::SampledGraph;
use crate::model::{normality_defect, unitarity_defect, ParticleModel};
use crate::qmatrix::{
    self, apply_single_left, apply_single_right, apply_single_vec, cr, frobenius_norm,
    marginal_of_vector, partial_trace, project_with_report, tensor_power, CMat,
    DensityMatrix, SiteIndex, Tolerances, IM,
};
use crate::rng::{stream, TAG_SITE};

/// Diffusive N-body paths keep a denser guard than the other dense code
/// paths: ten qubits by default.
pub const HOMODYNE_NBODY_DIM_GUARD: usize = 1024;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
    /// Sites whose marginals are recorded at every grid time (1-based).
    pub store_marginals: Vec<usize>,
    /// Project back onto density matrices every this many Euler steps.
    pub renorm_every: usize,
}

impl SimConfig {
    pub fn new(dt: f64, t_max: f64, seed: u64) -> Self {
        SimConfig {
            dt,
            t_max,
            seed,
            store_marginals: Vec::new(),
            renorm_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= self.t_max && self.t_max.is_finite()) {
            return Err(Error::validation(
                "sim.dt",
                format!("need 0 < dt <= t_max, got dt = {}, t_max = {}", self.dt, self.t_max),
            ));
        }
        if self.renorm_every == 0 {
            return Err(Error::validation("sim.renorm_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt).round().max(1.0) as usize
    }
}

/// Integrator metadata attached to every trajectory.
#[derive(Debug, Clone)]
pub struct SchemeMeta {
    pub scheme: &'static str,
    pub dt: f64,
    pub renorm_every: usize,
    /// Number of projections that actually moved the state.
    pub renorm_count: usize,
}

#[derive(Debug, Clone)]
pub enum Observations {
    /// `increments[site][step]` holds `dY` over `((k-1) dt, k dt]`.
    Homodyne { increments: Vec<Vec<f64>> },
    /// Exact jump times per site.
    Jumps { times: Vec<Vec<f64>> },
}

/// One simulated trajectory: grid times, recorded marginals, observation
/// record, and the stream seed that reproduces it.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// Keyed by 1-based site; one `d x d` matrix per grid time.
    pub marginals: BTreeMap<usize, Vec<CMat>>,
    pub observations: Observations,
    pub seed: u64,
    pub scheme: SchemeMeta,
}

#[derive(Debug, Clone)]
pub struct NBodyState {
    pub t: f64,
    pub n_sites: usize,
    pub d: usize,
    pub rho: CMat,
}

impl NBodyState {
    pub fn product(rho0: &DensityMatrix, n_sites: usize) -> Self {
        NBodyState {
            t: 0.0,
            n_sites,
            d: rho0.dim(),
            rho: tensor_power(rho0.matrix(), n_sites),
        }
    }
}

/// Reduced state of site `q` (1-based).
pub fn marginal(rho: &CMat, d: usize, n_sites: usize, site: usize) -> Result<DensityMatrix> {
    let m = partial_trace(rho, d, n_sites, &[site])?;
    DensityMatrix::new(m, &Tolerances::default())
}

/// Raw diffusive Euler-Maruyama update shared by the N-body and limit
/// simulators: drift `-i[H, rho] + sum_q (L_q rho L_q^dag - {L_q L_q^dag, rho}/2)`,
/// diffusion `sqrt(eta) (rho L_q^dag + L_q rho - tr((L_q + L_q^dag) rho) rho) dW_q`.
///
/// Returns the post-step matrix (no projection) and the observation
/// increments `dY_q = dW_q + sqrt(eta) tr((L_q + L_q^dag) rho) dt`. The raw
/// increment must conserve the trace to 1e-12; `TraceDrift` otherwise.
pub fn homodyne_em_step(
    rho: &CMat,
    h: &CMat,
    l: &CMat,
    d: usize,
    n_sites: usize,
    eta: f64,
    dt: f64,
    dw: &[f64],
) -> Result<(CMat, Vec<f64>)> {
    if dw.len() != n_sites {
        return Err(Error::DimensionMismatch(format!(
            "expected {n_sites} noise increments, got {}",
            dw.len()
        )));
    }
    if dw.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFiniteNoise);
    }
    if h.nrows() != rho.nrows() || h.ncols() != rho.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "Hamiltonian is {}x{}, state is {}x{}",
            h.nrows(),
            h.ncols(),
            rho.nrows(),
            rho.ncols()
        )));
    }
    let sqrt_eta = eta.sqrt();
    let l_adj = l.adjoint();
    let lldag = l * &l_adj;

    let mut delta = (h * rho - rho * h) * (-IM * cr(dt));
    let mut dys = Vec::with_capacity(n_sites);
    for q in 1..=n_sites {
        let l_rho = apply_single_left(l, q, d, n_sites, rho);
        let rho_ldag = apply_single_right(&l_adj, q, d, n_sites, rho);
        // Dissipator.
        delta += apply_single_right(&l_adj, q, d, n_sites, &l_rho) * cr(dt);
        delta += apply_single_left(&lldag, q, d, n_sites, rho) * cr(-0.5 * dt);
        delta += apply_single_right(&lldag, q, d, n_sites, rho) * cr(-0.5 * dt);
        // Innovation.
        let marg = partial_trace(rho, d, n_sites, &[q])?;
        let expect = ((l + &l_adj) * &marg).trace().re;
        let diffusion = l_rho + rho_ldag - rho * cr(expect);
        delta += diffusion * cr(sqrt_eta * dw[q - 1]);
        dys.push(dw[q - 1] + sqrt_eta * expect * dt);
    }
    let drift = delta.trace();
    let scale = frobenius_norm(rho).max(1.0);
    if drift.norm() > 1e-12 * scale {
        return Err(Error::TraceDrift { drift: drift.norm() });
    }
    Ok((rho + delta, dys))
}

/// Spec-level step wrapper operating on [`NBodyState`].
pub fn homodyne_nbody_step(
    state: &NBodyState,
    h: &CMat,
    l: &CMat,
    eta: f64,
    dt: f64,
    dw: &[f64],
) -> Result<(NBodyState, Vec<f64>)> {
    let (rho, dys) = homodyne_em_step(&state.rho, h, l, state.d, state.n_sites, eta, dt, dw)?;
    Ok((
        NBodyState {
            t: state.t + dt,
            n_sites: state.n_sites,
            d: state.d,
            rho,
        },
        dys,
    ))
}

fn site_controls(
    model: &ParticleModel,
    rho: &CMat,
    d: usize,
    n_sites: usize,
) -> Result<Vec<f64>> {
    if model.control().is_none() {
        return Ok(vec![0.0; n_sites]);
    }
    (1..=n_sites)
        .map(|q| {
            let marg = partial_trace(rho, d, n_sites, &[q])?;
            Ok(model.control().evaluate(&marg, q - 1))
        })
        .collect()
}

fn control_hamiltonian(
    model: &ParticleModel,
    h_static: &CMat,
    controls: &[f64],
    n_sites: usize,
) -> Result<CMat> {
    let mut h = h_static.clone();
    for (q, &u) in controls.iter().enumerate() {
        if u != 0.0 {
            h += qmatrix::embed_single(
                &(model.h_ctrl() * cr(u)),
                SiteIndex::new(q + 1, n_sites)?,
            )?;
        }
    }
    Ok(h)
}

struct HomodyneRun {
    record: TrajectoryRecord,
    final_rho: CMat,
}

fn run_homodyne_nbody(
    model: &ParticleModel,
    graph: &SampledGraph,
    rho0: &DensityMatrix,
    cfg: &SimConfig,
    interaction_scale: f64,
    record_sites: &[usize],
) -> Result<HomodyneRun> {
    cfg.validate()?;
    let n = graph.n_vertices();
    let d = model.d();
    let dim = d.checked_pow(n as u32).unwrap_or(usize::MAX);
    if dim > HOMODYNE_NBODY_DIM_GUARD {
        return Err(Error::TooLarge(format!(
            "homodyne N-body register d^N = {d}^{n} exceeds {HOMODYNE_NBODY_DIM_GUARD}"
        )));
    }
    if rho0.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "initial state is {}x{}, model has d = {d}",
            rho0.dim(),
            rho0.dim()
        )));
    }
    let n_steps = cfg.n_steps();
    let eta = model.meas().eta();
    let l = model.meas().l().clone();
    let h_static =
        crate::model::assemble_n_hamiltonian_scaled(model, graph, &vec![0.0; n], interaction_scale)?;
    let controlled = !model.control().is_none();

    let mut rngs: Vec<_> = (1..=n).map(|q| stream(cfg.seed, &[TAG_SITE, q as u64])).collect();
    let normal = Normal::new(0.0, cfg.dt.sqrt()).expect("valid std dev");

    let mut rho = tensor_power(rho0.matrix(), n);
    let mut marginals: BTreeMap<usize, Vec<CMat>> = BTreeMap::new();
    for &s in record_sites {
        SiteIndex::new(s, n)?;
        marginals.insert(s, vec![partial_trace(&rho, d, n, &[s])?]);
    }
    let mut increments = vec![Vec::with_capacity(n_steps); n];
    let mut times = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    let mut renorm_count = 0usize;

    let mut dw = vec![0.0f64; n];
    for k in 0..n_steps {
        for (q, rng) in rngs.iter_mut().enumerate() {
            dw[q] = normal.sample(rng);
        }
        let h = if controlled {
            let controls = site_controls(model, &rho, d, n)?;
            control_hamiltonian(model, &h_static, &controls, n)?
        } else {
            h_static.clone()
        };
        let (next, dys) = homodyne_em_step(&rho, &h, &l, d, n, eta, cfg.dt, &dw)?;
        rho = next;
        for (q, dy) in dys.into_iter().enumerate() {
            increments[q].push(dy);
        }
        if (k + 1) % cfg.renorm_every == 0 {
            let report = project_with_report(&rho, &Tolerances::default())?;
            if report.changed {
                renorm_count += 1;
            }
            rho = report.state.into_matrix();
        }
        times.push((k + 1) as f64 * cfg.dt);
        for (&s, store) in marginals.iter_mut() {
            store.push(partial_trace(&rho, d, n, &[s])?);
        }
    }
    Ok(HomodyneRun {
        record: TrajectoryRecord {
            times,
            marginals,
            observations: Observations::Homodyne { increments },
            seed: cfg.seed,
            scheme: SchemeMeta {
                scheme: "euler-maruyama",
                dt: cfg.dt,
                renorm_every: cfg.renorm_every,
                renorm_count,
            },
        },
        final_rho: rho,
    })
}

/// Diffusive Belavkin trajectory of the N-body register with product
/// initial state `rho0^(x N)`. Deterministic given `cfg.seed`.
pub fn simulate_homodyne_nbody(
    model: &ParticleModel,
    graph: &SampledGraph,
    rho0: &DensityMatrix,
    cfg: &SimConfig,
) -> Result<TrajectoryRecord> {
    Ok(run_homodyne_nbody(model, graph, rho0, cfg, 1.0, &cfg.store_marginals)?.record)
}

/// Final-time site marginals of one diffusive trajectory (density-matrix
/// path); used by ensemble experiments that do not need full records.
pub(crate) fn homodyne_nbody_final_marginals(
    model: &ParticleModel,
    graph: &SampledGraph,
    rho0: &DensityMatrix,
    cfg: &SimConfig,
    interaction_scale: f64,
) -> Result<Vec<CMat>> {
    let run = run_homodyne_nbody(model, graph, rho0, cfg, interaction_scale, &[])?;
    let n = graph.n_vertices();
    (1..=n)
        .map(|q| partial_trace(&run.final_rho, model.d(), n, &[q]))
        .collect()
}

/// Pure-state unraveling of the same diffusive dynamics for unit-efficiency
/// measurement of a normal observable and a pure product initial state.
/// The register state stays a vector, which makes large-N ensembles
/// tractable; site marginals agree with the density path in law.
pub(crate) fn homodyne_nbody_pure_final_marginals(
    model: &ParticleModel,
    graph: &SampledGraph,
    rho0: &DensityMatrix,
    cfg: &SimConfig,
    interaction_scale: f64,
) -> Result<Vec<CMat>> {
    cfg.validate()?;
    if (model.meas().eta() - 1.0).abs() > 1e-12 {
        return Err(Error::Numerical(
            "pure-state unraveling requires eta = 1".into(),
        ));
    }
    let l = model.meas().l().clone();
    if normality_defect(&l) > 1e-10 {
        return Err(Error::Numerical(
            "pure-state unraveling requires a normal measurement operator".into(),
        ));
    }
    let psi0 = rho0
        .pure_state_vector(1e-9)
        .ok_or_else(|| Error::InvalidDensity("pure-state unraveling requires a pure initial state".into()))?;
    let n = graph.n_vertices();
    let d = model.d();
    let mut dim = 1usize;
    for _ in 0..n {
        dim = dim
            .checked_mul(d)
            .filter(|&v| v <= qmatrix::DIM_GUARD)
            .ok_or_else(|| Error::TooLarge(format!("d^N = {d}^{n} exceeds {}", qmatrix::DIM_GUARD)))?;
    }
    let h_static =
        crate::model::assemble_n_hamiltonian_scaled(model, graph, &vec![0.0; n], interaction_scale)?;
    let controlled = !model.control().is_none();
    let l_adj = l.adjoint();
    let ldl = &l_adj * &l;

    let mut psi = psi0.clone();
    for _ in 1..n {
        psi = psi.kronecker(&psi0);
    }
    let mut rngs: Vec<_> = (1..=n).map(|q| stream(cfg.seed, &[TAG_SITE, q as u64])).collect();
    let normal = Normal::new(0.0, cfg.dt.sqrt()).expect("valid std dev");
    let n_steps = cfg.n_steps();
    let dt = cfg.dt;

    for _ in 0..n_steps {
        let mut dpsi = &h_static * &psi * (-IM * cr(dt));
        if controlled {
            for q in 1..=n {
                let marg = marginal_of_vector(&psi, d, n, q);
                let u = model.control().evaluate(&marg, q - 1);
                if u != 0.0 {
                    dpsi += apply_single_vec(model.h_ctrl(), q, d, n, &psi) * (-IM * cr(u * dt));
                }
            }
        }
        for q in 1..=n {
            let lpsi = apply_single_vec(&l, q, d, n, &psi);
            let expect = 2.0 * psi.dotc(&lpsi).re;
            let mpsi = apply_single_vec(&ldl, q, d, n, &psi);
            let dw: f64 = normal.sample(&mut rngs[q - 1]);
            dpsi += &mpsi * cr(-0.5 * dt);
            dpsi += &lpsi * cr(0.5 * expect * dt);
            dpsi += &psi * cr(-0.125 * expect * expect * dt);
            dpsi += (&lpsi - &psi * cr(0.5 * expect)) * cr(dw);
        }
        psi += dpsi;
        let norm = psi.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numerical("pure-state path lost normalization".into()));
        }
        psi /= cr(norm);
    }
    Ok((1..=n).map(|q| marginal_of_vector(&psi, d, n, q)).collect())
}

fn rk4_commutator_flow<F>(rho: &mut CMat, f: &F, t0: f64, t1: f64, dt_max: f64)
where
    F: Fn(&CMat, f64) -> CMat,
{
    if t1 <= t0 {
        return;
    }
    let steps = ((t1 - t0) / dt_max).ceil().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let k1 = f(rho, t);
        let k2 = f(&(&*rho + &k1 * cr(0.5 * h)), t + 0.5 * h);
        let k3 = f(&(&*rho + &k2 * cr(0.5 * h)), t + 0.5 * h);
        let k4 = f(&(&*rho + &k3 * cr(h)), t + h);
        *rho += (k1 + k2 * cr(2.0) + k3 * cr(2.0) + k4) * cr(h / 6.0);
    }
}

fn run_jump_nbody(
    model: &ParticleModel,
    graph: &SampledGraph,
    rho0: &DensityMatrix,
    cfg: &SimConfig,
) -> Result<(TrajectoryRecord, CMat)> {
    cfg.validate()?;
    let l = model.meas().l().clone();
    let dev = unitarity_defect(&l);
    if dev > 1e-10 {
        return Err(Error::NonUnitaryL { deviation: dev });
    }
    let n = graph.n_vertices();
    let d = model.d();
    let h_static = crate::model::assemble_n_hamiltonian(model, graph, &vec![0.0; n])?;
    let controlled = !model.control().is_none();
    let l_adj = l.adjoint();

    // Rate-one Poisson event times per site, exact exponential gaps.
    let exp = Exp::new(1.0).expect("rate 1");
    let mut jump_times: Vec<Vec<f64>> = Vec::with_capacity(n);
    for q in 1..=n {
        let mut rng = stream(cfg.seed, &[TAG_SITE, q as u64]);
        let mut t = 0.0;
        let mut times = Vec::new();
        loop {
            t += exp.sample(&mut rng);
            if t > cfg.t_max {
                break;
            }
            times.push(t);
        }
        jump_times.push(times);
    }
    let mut events: Vec<(f64, usize)> = jump_times
        .iter()
        .enumerate()
        .flat_map(|(q, ts)| ts.iter().map(move |&t| (t, q + 1)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let flow = |rho: &CMat, _t: f64| -> CMat {
        let mut h = h_static.clone();
        if controlled {
            let controls = site_controls(model, rho, d, n).expect("marginal dims fixed");
            h = control_hamiltonian(model, &h, &controls, n).expect("dims fixed");
        }
        (&h * rho - rho * &h) * -IM
    };

    let mut rho = tensor_power(rho0.matrix(), n);
    let n_steps = cfg.n_steps();
    let mut times = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    let mut marginals: BTreeMap<usize, Vec<CMat>> = BTreeMap::new();
    for &s in &cfg.store_marginals {
        SiteIndex::new(s, n)?;
        marginals.insert(s, vec![partial_trace(&rho, d, n, &[s])?]);
    }

    let mut cursor = 0.0f64;
    let mut next_event = 0usize;
    for k in 1..=n_steps {
        let target = k as f64 * cfg.dt;
        while next_event < events.len() && events[next_event].0 <= target {
            let (tj, q) = events[next_event];
            rk4_commutator_flow(&mut rho, &flow, cursor, tj, cfg.dt);
            rho = apply_single_right(&l_adj, q, d, n, &apply_single_left(&l, q, d, n, &rho));
            cursor = tj;
            next_event += 1;
        }
        rk4_commutator_flow(&mut rho, &flow, cursor, target, cfg.dt);
        cursor = target;
        times.push(target);
        for (&s, store) in marginals.iter_mut() {
            store.push(partial_trace(&rho, d, n, &[s])?);
        }
    }
    let record = TrajectoryRecord {
        times,
        marginals,
        observations: Observations::Jumps { times: jump_times },
        seed: cfg.seed,
        scheme: SchemeMeta {
            scheme: "rk4-poisson",
            dt: cfg.dt,
            renorm_every: cfg.renorm_every,
            renorm_count: 0,
        },
    };
    Ok((record, rho))
}

/// Photon-counting trajectory with unitary `L`: deterministic RK4 flow of
/// `-i[H, rho]` between rate-one Poisson jump times, `rho -> L_q rho L_q^dag`
/// at a site-q jump. Isospectral by construction.
pub fn simulate_jump_nbody(
    model: &ParticleModel,
    graph: &SampledGraph,
    rho0: &DensityMatrix,
    cfg: &SimConfig,
) -> Result<TrajectoryRecord> {
    Ok(run_jump_nbody(model, graph, rho0, cfg)?.0)
}

/// Final full register state of a jump trajectory (for spectrum checks).
pub fn jump_nbody_final_state(
    model: &ParticleModel,
    graph: &SampledGraph,
    rho0: &DensityMatrix,
    cfg: &SimConfig,
) -> Result<CMat> {
    Ok(run_jump_nbody(model, graph, rho0, cfg)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::graphon::StepKernel;
    use crate::model::tests::demo_model;
    use crate::model::{ControlLaw, Detection, InteractionOperator, MeasurementConfig, ParticleModel};
    use crate::qmatrix::{ground_state, identity, plus_state, sigma_x, sigma_z, CVec};
    use nalgebra::DMatrix;

    fn empty_graph(n: usize) -> SampledGraph {
        SampledGraph::new(DMatrix::zeros(n, n), 0, false).unwrap()
    }

    fn complete_graph(n: usize) -> SampledGraph {
        let adj = DMatrix::from_fn(n, n, |p, q| if p == q { 0.0 } else { 1.0 });
        SampledGraph::new(adj, 0, false).unwrap()
    }

    fn free_model(h: CMat, l: CMat, eta: f64) -> ParticleModel {
        ParticleModel::new(
            2,
            h,
            sigma_x(),
            InteractionOperator::zero(2),
            MeasurementConfig::new(l, eta, Detection::Homodyne).unwrap(),
            ControlLaw::none(),
        )
        .unwrap()
    }

    #[test]
    fn zero_generator_is_identity_step() {
        let state = NBodyState::product(&plus_state(), 2);
        let h = CMat::zeros(4, 4);
        let l = CMat::zeros(2, 2);
        let dw = [0.3, -0.2];
        let (next, dy) = homodyne_nbody_step(&state, &h, &l, 1.0, 1e-3, &dw).unwrap();
        assert!(frobenius_norm(&(&next.rho - &state.rho)) == 0.0);
        assert_eq!(dy, dw.to_vec());
    }

    #[test]
    fn hamiltonian_only_step_matches_exact_propagator() {
        // One Euler step vs exp(-iH dt) rho exp(iH dt): O(dt^2) local error.
        let rho0 = plus_state();
        let h = sigma_z();
        let l = CMat::zeros(2, 2);
        let dt = 1e-3;
        let state = NBodyState::product(&rho0, 1);
        let (next, _) = homodyne_nbody_step(&state, &h, &l, 1.0, dt, &[0.0]).unwrap();
        let u = qmatrix::matrix_exponential(&(h * -IM), dt);
        let exact = &u * rho0.matrix() * u.adjoint();
        let err = frobenius_norm(&(&next.rho - &exact));
        assert!(err < 5.0 * dt * dt, "error {err} not O(dt^2)");
    }

    #[test]
    fn raw_increment_is_tracefree_on_randomized_inputs() {
        // Trace cancellation of all three generator pieces, normal L.
        let mut rng = crate::rng::stream(2024, &[5]);
        for trial in 0..40 {
            let h = qmatrix::hermitize(&crate::qmatrix::tests::random_cmat(&mut rng, 4));
            // Random normal L: unitary-conjugated diagonal complex matrix.
            let diag = CMat::from_diagonal(&nalgebra::DVector::from_fn(2, |_, _| {
                qmatrix::c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
            }));
            let herm = qmatrix::hermitize(&crate::qmatrix::tests::random_cmat(&mut rng, 2));
            let u = qmatrix::matrix_exponential(&(herm * IM), 1.0);
            let l = &u * diag * u.adjoint();
            let raw = crate::qmatrix::tests::random_cmat(&mut rng, 4);
            let rho = match qmatrix::project_to_density(&raw) {
                Ok(p) => p.into_matrix(),
                Err(_) => continue,
            };
            let dw = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let (next, _) =
                homodyne_em_step(&rho, &h, &l, 2, 2, 0.7, 1e-3, &dw).unwrap_or_else(|e| {
                    panic!("trial {trial}: {e}");
                });
            let drift = (next - &rho).trace().norm();
            assert!(drift <= 1e-12, "trial {trial}: trace drift {drift}");
        }
    }

    #[test]
    fn trace_drift_detected_for_nonnormal_l() {
        // The printed dissipator only conserves trace for normal L; the
        // lowering operator must trip the per-step guard.
        let rho = crate::qmatrix::excited_state().into_matrix();
        let h = CMat::zeros(2, 2);
        let l = crate::qmatrix::annihilation();
        let res = homodyne_em_step(&rho, &h, &l, 2, 1, 1.0, 1e-3, &[0.0]);
        assert!(matches!(res, Err(Error::TraceDrift { .. })));
    }

    #[test]
    fn simulate_is_deterministic_and_valid() {
        let model = demo_model();
        let mut cfg = SimConfig::new(1e-3, 0.1, 42);
        cfg.store_marginals = vec![1, 2];
        let g = complete_graph(2);
        let a = simulate_homodyne_nbody(&model, &g, &plus_state(), &cfg).unwrap();
        let b = simulate_homodyne_nbody(&model, &g, &plus_state(), &cfg).unwrap();
        match (&a.observations, &b.observations) {
            (
                Observations::Homodyne { increments: ia },
                Observations::Homodyne { increments: ib },
            ) => assert_eq!(ia, ib),
            _ => panic!("wrong observation type"),
        }
        for (ma, mb) in a.marginals[&1].iter().zip(b.marginals[&1].iter()) {
            assert_eq!(ma, mb);
        }
        // Marginals stay valid states.
        for m in &a.marginals[&2] {
            assert!(DensityMatrix::new_default(m.clone()).is_ok());
        }
        assert_eq!(a.times.len(), cfg.n_steps() + 1);
    }

    #[test]
    fn guard_rejects_oversized_registers() {
        let model = demo_model();
        let cfg = SimConfig::new(1e-3, 0.01, 1);
        let g = empty_graph(11);
        assert!(matches!(
            simulate_homodyne_nbody(&model, &g, &plus_state(), &cfg),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn dephasing_observable_matches_lindblad_mean() {
        // Martingale check: for L = sigma_z the dephasing dissipator leaves
        // sigma_z expectations following the closed Lindblad ODE (constant
        // for H = 0); the per-trajectory innovation averages out.
        let model = free_model(CMat::zeros(2, 2), sigma_z(), 0.8);
        let g = empty_graph(1);
        let theta: f64 = 0.7;
        let psi = CVec::from_vec(vec![cr(theta.cos()), cr(theta.sin())]);
        let rho0 = DensityMatrix::from_pure(&psi).unwrap();
        let z0 = (sigma_z() * rho0.matrix()).trace().re;
        let n_traj = 400;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..n_traj {
            let cfg = SimConfig {
                dt: 1e-3,
                t_max: 0.5,
                seed: crate::rng::fold_seed(99, &[crate::rng::TAG_TRAJECTORY, t]),
                store_marginals: vec![1],
                renorm_every: 1,
            };
            let rec = simulate_homodyne_nbody(&model, &g, &rho0, &cfg).unwrap();
            let last = rec.marginals[&1].last().unwrap();
            let z = (sigma_z() * last).trace().re;
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n_traj as f64;
        let var = (sumsq / n_traj as f64 - mean * mean).max(0.0);
        let stderr = (var / n_traj as f64).sqrt();
        assert!(
            (mean - z0).abs() <= 3.0 * stderr + 2e-3,
            "E[z] = {mean} vs {z0} (stderr {stderr})"
        );
    }

    #[test]
    fn jump_counts_follow_unit_rate_poisson() {
        let model = ParticleModel::new(
            2,
            CMat::zeros(2, 2),
            sigma_x(),
            InteractionOperator::zero(2),
            MeasurementConfig::new(sigma_z(), 1.0, Detection::Counting).unwrap(),
            ControlLaw::none(),
        )
        .unwrap();
        let g = empty_graph(1);
        let t_max = 1.0;
        let runs = 600;
        let mut total = 0usize;
        for t in 0..runs {
            let cfg = SimConfig {
                dt: 0.05,
                t_max,
                seed: crate::rng::fold_seed(7, &[crate::rng::TAG_TRAJECTORY, t]),
                store_marginals: vec![],
                renorm_every: 1,
            };
            let rec = simulate_jump_nbody(&model, &g, &ground_state(), &cfg).unwrap();
            match &rec.observations {
                Observations::Jumps { times } => total += times[0].len(),
                _ => panic!("wrong observation type"),
            }
        }
        let lambda = runs as f64 * t_max;
        let sigma = lambda.sqrt();
        assert!(
            (total as f64 - lambda).abs() <= 3.0 * sigma,
            "total jumps {total} outside {lambda} +- {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn sigma_x_jumps_toggle_the_state() {
        let model = ParticleModel::new(
            2,
            CMat::zeros(2, 2),
            sigma_x(),
            InteractionOperator::zero(2),
            MeasurementConfig::new(sigma_x(), 1.0, Detection::Counting).unwrap(),
            ControlLaw::none(),
        )
        .unwrap();
        let g = empty_graph(1);
        let cfg = SimConfig {
            dt: 1e-2,
            t_max: 3.0,
            seed: 5,
            store_marginals: vec![1],
            renorm_every: 1,
        };
        let rec = simulate_jump_nbody(&model, &g, &ground_state(), &cfg).unwrap();
        let jumps = match &rec.observations {
            Observations::Jumps { times } => times[0].clone(),
            _ => unreachable!(),
        };
        for (k, t) in rec.times.iter().enumerate() {
            let parity = jumps.iter().filter(|&&tj| tj <= *t).count() % 2;
            let want = if parity == 0 {
                ground_state()
            } else {
                crate::qmatrix::excited_state()
            };
            let err = frobenius_norm(&(&rec.marginals[&1][k] - want.matrix()));
            assert!(err <= 1e-10, "t = {t}, step {k}: {err}");
        }
    }

    #[test]
    fn jump_flow_preserves_purity_and_spectrum() {
        // Unitary flow plus unitary jumps: isospectral, purity preserved.
        let model = ParticleModel::new(
            2,
            sigma_z(),
            sigma_x(),
            InteractionOperator::exchange_qubit(),
            MeasurementConfig::new(sigma_z(), 1.0, Detection::Counting).unwrap(),
            ControlLaw::none(),
        )
        .unwrap();
        let g = complete_graph(3);
        let cfg = SimConfig {
            dt: 1e-3,
            t_max: 1.0,
            seed: 11,
            store_marginals: vec![],
            renorm_every: 1,
        };
        // Mixed single-site state gives a nondegenerate register spectrum.
        let rho0 = DensityMatrix::new_default(
            CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![cr(0.7), cr(0.3)])),
        )
        .unwrap();
        let rho_init = tensor_power(rho0.matrix(), 3);
        let mut spec0: Vec<f64> = qmatrix::hermitize(&rho_init)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .collect();
        spec0.sort_by(f64::total_cmp);

        let final_state = jump_nbody_final_state(&model, &g, &rho0, &cfg).unwrap();
        let mut spec1: Vec<f64> = qmatrix::hermitize(&final_state)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .collect();
        spec1.sort_by(f64::total_cmp);
        for (a, b) in spec0.iter().zip(spec1.iter()) {
            assert!((a - b).abs() <= 1e-6, "spectrum moved: {a} vs {b}");
        }

        // Purity for a pure product start.
        let state = jump_nbody_final_state(&model, &g, &ground_state(), &cfg).unwrap();
        let purity = (&state * &state).trace().re;
        assert!((purity - 1.0).abs() <= 1e-6, "purity {purity}");
    }

    #[test]
    fn pure_unraveling_matches_density_path_in_mean() {
        // N = 2 exchange-coupled qubits: site-1 Bloch mean at T from the
        // pure-state path agrees with the density path within MC error.
        let model = demo_model();
        let g = complete_graph(2);
        let rho0 = plus_state();
        let n_traj = 300;
        let mut acc = [CMat::zeros(2, 2), CMat::zeros(2, 2)];
        for t in 0..n_traj {
            let cfg = SimConfig {
                dt: 2e-3,
                t_max: 0.5,
                seed: crate::rng::fold_seed(31, &[crate::rng::TAG_TRAJECTORY, t]),
                store_marginals: vec![],
                renorm_every: 1,
            };
            let dens = homodyne_nbody_final_marginals(&model, &g, &rho0, &cfg, 1.0).unwrap();
            let pure = homodyne_nbody_pure_final_marginals(&model, &g, &rho0, &cfg, 1.0).unwrap();
            acc[0] += &dens[0];
            acc[1] += &pure[0];
        }
        let scale = cr(1.0 / n_traj as f64);
        let diff = frobenius_norm(&(&acc[0] * scale - &acc[1] * scale));
        // ~ 3x MC stderr of a Bloch component at 300 trajectories.
        assert!(diff <= 0.12, "pure vs density mean differ by {diff}");
    }

    #[test]
    fn weighted_graph_from_kernel_feeds_simulator() {
        let w = StepKernel::constant(1, 1.0);
        let g = crate::graphon::weighted_graph(&w, 3).unwrap();
        assert_eq!(g.adjacency()[(0, 1)], 1.0);
        assert_eq!(g.adjacency()[(1, 1)], 0.0);
    }

    #[test]
    fn identity_is_identity() {
        // Sanity anchor for the step index conventions used above.
        let m = identity(4);
        assert_eq!(partial_trace(&m, 2, 2, &[1]).unwrap(), identity(2) * cr(2.0));
    }
}
