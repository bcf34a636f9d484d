//! Experiment configuration: JSON schema, per-command defaults, and
//! validation that reports every violated field at once.
//!
//! Matrices are given either by a builtin name (`sigma_x`, `sigma_y`,
//! `sigma_z`, `identity`, `zero`, and `exchange` for interactions) or as
//! row-major arrays of `[re, im]` pairs. Initial states additionally accept
//! `plus`, `ground`, `excited`, and `mixed`.

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, FieldIssue, Result};
use crate::graphon::{discretize, EvaluableGraphon, StepKernel};
use crate::limit::{ChaosConfig, GraphMode, LimitSimConfig};
use crate::model::{
    ControlKind, ControlLaw, Detection, InteractionOperator, MeasurementConfig, ParticleModel,
};
use crate::qmatrix::{
    excited_state, ground_state, identity, matrix_from_rows, plus_state, sigma_x, sigma_y,
    sigma_z, CMat, DensityMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Demo,
    Stability,
    Chaos,
    Cutnorm,
    MeanOde,
    Simulate,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Demo => "demo",
            CommandKind::Stability => "stability",
            CommandKind::Chaos => "chaos",
            CommandKind::Cutnorm => "cutnorm",
            CommandKind::MeanOde => "mean-ode",
            CommandKind::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Name(String),
    Entries(Vec<Vec<[f64; 2]>>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub kind: Option<String>,
    pub target: Option<MatrixSpec>,
    pub values: Option<Vec<f64>>,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d: Option<usize>,
    pub h_free: Option<MatrixSpec>,
    pub h_ctrl: Option<MatrixSpec>,
    pub interaction: Option<MatrixSpec>,
    pub l: Option<MatrixSpec>,
    pub eta: Option<f64>,
    pub detection: Option<String>,
    pub control: Option<ControlSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphonSpec {
    /// `two_block`, `constant`, `min`, or `complete` (alias of constant 1).
    pub catalog: Option<String>,
    /// Value for `constant`.
    pub value: Option<f64>,
    /// Discretization cells; defaults to `sim.n_u`.
    pub n: Option<usize>,
    /// Explicit step kernel `{n, weights, lo, hi}`.
    pub step: Option<Value>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub n_u: Option<usize>,
    pub dt: Option<f64>,
    pub t_max: Option<f64>,
    pub trajectories: Option<usize>,
    pub renorm_every: Option<usize>,
    pub picard_tol: Option<f64>,
    pub picard_max_iter: Option<usize>,
    pub store_marginals: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBodySpec {
    pub n_sites: Option<usize>,
    pub n_list: Option<Vec<usize>>,
    /// `weighted` or `bernoulli`.
    pub graph: Option<String>,
    pub pure_state: Option<bool>,
    pub interaction_scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutnormSpec {
    pub restarts: Option<usize>,
    pub force_heuristic: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    /// Mixture parameters for the `W_eps = (1-eps) W + eps W_b` sweep.
    pub epsilons: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: CommandKind,
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSpec,
    pub graphon: Option<GraphonSpec>,
    pub graphon_b: Option<GraphonSpec>,
    pub initial_state: Option<MatrixSpec>,
    #[serde(default)]
    pub sim: SimSpec,
    pub nbody: Option<NBodySpec>,
    pub cutnorm: Option<CutnormSpec>,
    pub stability: Option<StabilitySpec>,
    pub output: Option<String>,
}

/// Parse the raw JSON; structural errors carry the serde location.
pub fn parse_config(text: &str) -> Result<RawConfig> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct NBodyResolved {
    pub n_sites: usize,
    pub n_list: Vec<usize>,
    pub graph_mode: GraphMode,
    pub pure_state: bool,
    pub interaction_scales: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CutnormResolved {
    pub restarts: usize,
    pub force_heuristic: bool,
}

/// Fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub command: CommandKind,
    pub seed: u64,
    pub model: ParticleModel,
    pub kernel: StepKernel,
    pub kernel_b: Option<StepKernel>,
    pub initial: DensityMatrix,
    pub limit_cfg: LimitSimConfig,
    pub nbody: NBodyResolved,
    pub cutnorm: CutnormResolved,
    pub stability_epsilons: Vec<f64>,
    pub store_marginals: Option<Vec<usize>>,
    pub output: Option<String>,
    /// Canonical JSON the run was resolved from (for hashing).
    pub canonical: Value,
}

struct Issues(Vec<FieldIssue>);

impl Issues {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.0.push(FieldIssue {
            path: path.to_string(),
            message: message.into(),
        });
    }
}

fn resolve_matrix(
    spec: &MatrixSpec,
    d: usize,
    path: &str,
    issues: &mut Issues,
) -> Option<CMat> {
    match spec {
        MatrixSpec::Name(name) => match name.as_str() {
            "sigma_x" => Some(sigma_x()),
            "sigma_y" => Some(sigma_y()),
            "sigma_z" => Some(sigma_z()),
            "identity" => Some(identity(d)),
            "zero" => Some(CMat::zeros(d, d)),
            other => {
                issues.push(path, format!("unknown matrix name '{other}'"));
                None
            }
        },
        MatrixSpec::Entries(rows) => match matrix_from_rows(rows) {
            Ok(m) => {
                if m.nrows() != d {
                    issues.push(path, format!("expected a {d}x{d} matrix, got {}x{}", m.nrows(), m.ncols()));
                    None
                } else {
                    Some(m)
                }
            }
            Err(e) => {
                issues.push(path, e.to_string());
                None
            }
        },
    }
}

fn resolve_state(
    spec: &MatrixSpec,
    d: usize,
    path: &str,
    issues: &mut Issues,
) -> Option<DensityMatrix> {
    let mat = match spec {
        MatrixSpec::Name(name) => match name.as_str() {
            "plus" => return Some(plus_state()),
            "ground" | "zero" => return Some(ground_state()),
            "excited" | "one" => return Some(excited_state()),
            "mixed" => return Some(DensityMatrix::maximally_mixed(d)),
            other => {
                issues.push(path, format!("unknown state name '{other}'"));
                return None;
            }
        },
        MatrixSpec::Entries(rows) => match matrix_from_rows(rows) {
            Ok(m) => m,
            Err(e) => {
                issues.push(path, e.to_string());
                return None;
            }
        },
    };
    match DensityMatrix::new_default(mat) {
        Ok(s) if s.dim() == d => Some(s),
        Ok(s) => {
            issues.push(path, format!("state dimension {} does not match d = {d}", s.dim()));
            None
        }
        Err(e) => {
            issues.push(path, e.to_string());
            None
        }
    }
}

fn resolve_interaction(
    spec: Option<&MatrixSpec>,
    d: usize,
    issues: &mut Issues,
) -> Option<InteractionOperator> {
    match spec {
        None => {
            if d == 2 {
                Some(InteractionOperator::exchange_qubit())
            } else {
                Some(InteractionOperator::zero(d))
            }
        }
        Some(MatrixSpec::Name(name)) => match name.as_str() {
            "exchange" => {
                if d == 2 {
                    Some(InteractionOperator::exchange_qubit())
                } else {
                    issues.push("model.interaction", "exchange interaction requires d = 2");
                    None
                }
            }
            "zero" => Some(InteractionOperator::zero(d)),
            "identity" => Some(InteractionOperator::identity(d)),
            other => {
                issues.push("model.interaction", format!("unknown interaction name '{other}'"));
                None
            }
        },
        Some(MatrixSpec::Entries(rows)) => match matrix_from_rows(rows) {
            Ok(m) => match InteractionOperator::new(d, m) {
                Ok(a) => Some(a),
                Err(e) => {
                    issues.push("model.interaction", e.to_string());
                    None
                }
            },
            Err(e) => {
                issues.push("model.interaction", e.to_string());
                None
            }
        },
    }
}

fn resolve_control(spec: Option<&ControlSpec>, d: usize, issues: &mut Issues) -> ControlLaw {
    let Some(spec) = spec else {
        return ControlLaw::demo_feedback(ground_state(), 10.0);
    };
    let bound = spec.bound.unwrap_or(10.0);
    if !(bound > 0.0) {
        issues.push("model.control.bound", format!("must be positive, got {bound}"));
    }
    match spec.kind.as_deref().unwrap_or("demo_feedback") {
        "none" => ControlLaw::none(),
        "demo_feedback" => {
            if d != 2 {
                issues.push("model.control.kind", "demo_feedback requires d = 2");
                return ControlLaw::none();
            }
            let target = match &spec.target {
                Some(t) => resolve_state(t, d, "model.control.target", issues)
                    .unwrap_or_else(ground_state),
                None => ground_state(),
            };
            ControlLaw::demo_feedback(target, bound)
        }
        "table" => {
            let values = spec.values.clone().unwrap_or_default();
            if values.is_empty() {
                issues.push("model.control.values", "table control requires at least one value");
            }
            ControlLaw {
                kind: ControlKind::Table { values },
                bound,
            }
        }
        other => {
            issues.push("model.control.kind", format!("unknown control kind '{other}'"));
            ControlLaw::none()
        }
    }
}

fn resolve_graphon(
    spec: Option<&GraphonSpec>,
    default_n: usize,
    path: &str,
    issues: &mut Issues,
) -> Option<StepKernel> {
    let Some(spec) = spec else {
        return discretize(&EvaluableGraphon::two_block(), default_n)
            .map_err(|e| issues.push(path, e.to_string()))
            .ok();
    };
    if let Some(step) = &spec.step {
        if spec.catalog.is_some() {
            issues.push(path, "give either 'catalog' or 'step', not both");
        }
        return StepKernel::from_json(step)
            .map_err(|e| issues.push(&format!("{path}.step"), e.to_string()))
            .ok();
    }
    let n = spec.n.unwrap_or(default_n);
    if n == 0 {
        issues.push(&format!("{path}.n"), "must be >= 1");
        return None;
    }
    let graphon = match spec.catalog.as_deref().unwrap_or("two_block") {
        "two_block" => EvaluableGraphon::two_block(),
        "min" => EvaluableGraphon::min_uv(),
        "complete" => EvaluableGraphon::constant(1.0).expect("1.0 in range"),
        "empty" => EvaluableGraphon::constant(0.0).expect("0.0 in range"),
        "constant" => {
            let c = spec.value.unwrap_or(0.5);
            match EvaluableGraphon::constant(c) {
                Ok(g) => g,
                Err(e) => {
                    issues.push(&format!("{path}.value"), e.to_string());
                    return None;
                }
            }
        }
        other => {
            issues.push(&format!("{path}.catalog"), format!("unknown graphon '{other}'"));
            return None;
        }
    };
    discretize(&graphon, n)
        .map_err(|e| issues.push(path, e.to_string()))
        .ok()
}

/// Apply per-command defaults and validate everything, collecting all
/// violations before failing.
pub fn resolve(raw: &RawConfig, seed_override: Option<u64>) -> Result<ResolvedConfig> {
    let mut issues = Issues(Vec::new());
    let command = raw.command;

    let seed = match seed_override.or(raw.seed) {
        Some(s) => s,
        None => {
            issues.push("seed", "mandatory: set it in the config or pass --seed");
            0
        }
    };

    // Model with demo-preset defaults.
    let d = raw.model.d.unwrap_or(2);
    if d == 0 || d > 64 {
        issues.push("model.d", format!("local dimension must be in 1..=64, got {d}"));
    }
    let h_free = raw
        .model
        .h_free
        .as_ref()
        .map(|m| resolve_matrix(m, d, "model.h_free", &mut issues))
        .unwrap_or_else(|| Some(if d == 2 { sigma_z() } else { CMat::zeros(d, d) }));
    let h_ctrl = raw
        .model
        .h_ctrl
        .as_ref()
        .map(|m| resolve_matrix(m, d, "model.h_ctrl", &mut issues))
        .unwrap_or_else(|| Some(if d == 2 { sigma_x() } else { CMat::zeros(d, d) }));
    let l = raw
        .model
        .l
        .as_ref()
        .map(|m| resolve_matrix(m, d, "model.l", &mut issues))
        .unwrap_or_else(|| Some(if d == 2 { sigma_z() } else { identity(d) }));
    let eta = raw.model.eta.unwrap_or(1.0);
    if !(eta > 0.0 && eta <= 1.0) {
        issues.push("model.eta", format!("must lie in (0, 1], got {eta}"));
    }
    let detection = match raw.model.detection.as_deref() {
        None | Some("homodyne") => Detection::Homodyne,
        Some("counting") => Detection::Counting,
        Some(other) => {
            issues.push("model.detection", format!("expected 'homodyne' or 'counting', got '{other}'"));
            Detection::Homodyne
        }
    };
    let interaction = resolve_interaction(raw.model.interaction.as_ref(), d, &mut issues);
    let control = resolve_control(raw.model.control.as_ref(), d, &mut issues);

    // Simulation defaults per command.
    let n_u = raw.sim.n_u.unwrap_or(2);
    let dt = raw.sim.dt.unwrap_or(1e-3);
    let t_max = raw.sim.t_max.unwrap_or(match command {
        CommandKind::Demo => 10.0,
        _ => 1.0,
    });
    let trajectories = raw.sim.trajectories.unwrap_or(match command {
        CommandKind::Demo => 100,
        CommandKind::Stability => 500,
        CommandKind::Chaos => 2000,
        _ => 100,
    });
    let mut limit_cfg = LimitSimConfig::new(n_u, dt, t_max, seed);
    limit_cfg.trajectories = trajectories;
    limit_cfg.detection = detection;
    if let Some(tol) = raw.sim.picard_tol {
        limit_cfg.picard_tol = tol;
    }
    if let Some(it) = raw.sim.picard_max_iter {
        limit_cfg.picard_max_iter = it;
    }
    if let Some(r) = raw.sim.renorm_every {
        limit_cfg.renorm_every = r;
    }
    if let Err(Error::Validation { issues: sub }) = limit_cfg.validate() {
        for i in sub {
            issues.push(&i.path, i.message);
        }
    }

    let kernel = resolve_graphon(raw.graphon.as_ref(), n_u, "graphon", &mut issues);
    if let Some(k) = &kernel {
        if k.n() != n_u
            && matches!(
                command,
                CommandKind::Demo | CommandKind::Stability | CommandKind::MeanOde
            )
        {
            issues.push(
                "graphon",
                format!("kernel has {} blocks but sim.n_u = {n_u}; align them", k.n()),
            );
        }
    }
    let kernel_b = match (&raw.graphon_b, command) {
        (Some(spec), _) => resolve_graphon(Some(spec), n_u, "graphon_b", &mut issues),
        (None, CommandKind::Stability) => Some(StepKernel::constant(n_u, 0.5)),
        (None, _) => None,
    };

    let initial = raw
        .initial_state
        .as_ref()
        .map(|s| resolve_state(s, d, "initial_state", &mut issues))
        .unwrap_or_else(|| {
            Some(if d == 2 {
                plus_state()
            } else {
                DensityMatrix::maximally_mixed(d)
            })
        });

    // N-body options.
    let nbody_spec = raw.nbody.clone().unwrap_or_default();
    let graph_mode = match nbody_spec.graph.as_deref() {
        None | Some("weighted") => GraphMode::Weighted,
        Some("bernoulli") => GraphMode::Bernoulli,
        Some(other) => {
            issues.push("nbody.graph", format!("expected 'weighted' or 'bernoulli', got '{other}'"));
            GraphMode::Weighted
        }
    };
    let default_chaos = ChaosConfig::default();
    let n_list = nbody_spec.n_list.unwrap_or(default_chaos.n_list);
    if n_list.is_empty() {
        issues.push("nbody.n_list", "must not be empty");
    }
    let n_sites = nbody_spec.n_sites.unwrap_or(2);
    if n_sites == 0 {
        issues.push("nbody.n_sites", "must be >= 1");
    }
    let interaction_scales = nbody_spec
        .interaction_scales
        .unwrap_or(default_chaos.interaction_scales);
    let nbody = NBodyResolved {
        n_sites,
        n_list,
        graph_mode,
        pure_state: nbody_spec.pure_state.unwrap_or(true),
        interaction_scales,
    };

    let cut_spec = raw.cutnorm.clone().unwrap_or_default();
    let cutnorm = CutnormResolved {
        restarts: cut_spec.restarts.unwrap_or(32).max(1),
        force_heuristic: cut_spec.force_heuristic.unwrap_or(false),
    };

    let stability_epsilons = raw
        .stability
        .clone()
        .unwrap_or_default()
        .epsilons
        .unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.4, 0.5]);
    for e in &stability_epsilons {
        if !(0.0..=1.0).contains(e) {
            issues.push("stability.epsilons", format!("mixture parameter {e} outside [0, 1]"));
        }
    }

    if !issues.0.is_empty() {
        return Err(Error::Validation { issues: issues.0 });
    }

    let meas = MeasurementConfig::new(l.unwrap(), eta, detection).map_err(|e| match e {
        Error::NonUnitaryL { deviation } => Error::validation(
            "model.l",
            format!("counting detection requires unitary L (defect {deviation:.3e})"),
        ),
        other => other,
    })?;
    let model = ParticleModel::new(
        d,
        h_free.unwrap(),
        h_ctrl.unwrap(),
        interaction.unwrap(),
        meas,
        control,
    )
    .map_err(|e| Error::validation("model", e.to_string()))?;

    let canonical = canonical_json(raw, seed);
    Ok(ResolvedConfig {
        command,
        seed,
        model,
        kernel: kernel.unwrap(),
        kernel_b,
        initial: initial.unwrap(),
        limit_cfg,
        nbody,
        cutnorm,
        stability_epsilons,
        store_marginals: raw.sim.store_marginals.clone(),
        output: raw.output.clone(),
        canonical,
    })
}

fn canonical_json(raw: &RawConfig, seed: u64) -> Value {
    // Round-trip through Value for stable key ordering (serde_json maps
    // preserve insertion order; reserializing the typed struct is stable).
    let mut v = serde_json::json!({
        "command": raw.command.name(),
        "seed": seed,
    });
    let obj = v.as_object_mut().unwrap();
    obj.insert("model".into(), serde_json::to_value(ModelEcho::from(&raw.model)).unwrap());
    if let Some(g) = &raw.graphon {
        obj.insert("graphon".into(), serde_json::to_value(GraphonEcho::from(g)).unwrap());
    }
    if let Some(g) = &raw.graphon_b {
        obj.insert("graphon_b".into(), serde_json::to_value(GraphonEcho::from(g)).unwrap());
    }
    v
}

// Minimal echoes so the manifest hash covers the user-visible knobs without
// dragging full matrices through another serializer.
#[derive(serde::Serialize)]
struct ModelEcho {
    d: Option<usize>,
    eta: Option<f64>,
    detection: Option<String>,
    control_kind: Option<String>,
}

impl From<&ModelSpec> for ModelEcho {
    fn from(m: &ModelSpec) -> Self {
        ModelEcho {
            d: m.d,
            eta: m.eta,
            detection: m.detection.clone(),
            control_kind: m.control.as_ref().and_then(|c| c.kind.clone()),
        }
    }
}

#[derive(serde::Serialize)]
struct GraphonEcho {
    catalog: Option<String>,
    value: Option<f64>,
    n: Option<usize>,
}

impl From<&GraphonSpec> for GraphonEcho {
    fn from(g: &GraphonSpec) -> Self {
        GraphonEcho {
            catalog: g.catalog.clone(),
            value: g.value,
            n: g.n,
        }
    }
}
