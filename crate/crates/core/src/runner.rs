//! Experiment orchestration and artifact emission.
//!
//! Every command writes its data files plus a `manifest.json` completion
//! marker carrying the config hash, seed, code version, and wall time.
//! Data files are byte-reproducible from `(config, seed, version)`; the
//! manifest is metadata and excluded from that guarantee (it carries the
//! wall time). Floats are emitted with 17 significant digits.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bloch::{bloch_step, BlochState};
use crate::config::{CommandKind, ResolvedConfig};
use crate::error::{Error, Result};
use crate::graphon::{self};
use crate::limit::{
    chaos_experiment, simulate_homodyne_limit, solve_mean_ode, stability_experiment, ChaosConfig,
    CutNormMethod, MeanFieldPath,
};
use crate::model::{CellLaws, ControlKind, ControlLaw, Detection};
use crate::nbody::{simulate_homodyne_nbody, simulate_jump_nbody, Observations, SimConfig};
use crate::qmatrix::{excited_state, ground_state, matrix_to_rows};
use crate::rng::{fold_seed, stream, TAG_CELL, TAG_SITE, TAG_TRAJECTORY};

/// 17 significant digits, locale-independent.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

/// Execute one resolved experiment into `out_dir`.
pub fn run(cfg: &ResolvedConfig, out_dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let mut files = Vec::new();
    let summary = match cfg.command {
        CommandKind::Cutnorm => run_cutnorm(cfg, out_dir, &mut files)?,
        CommandKind::MeanOde => run_mean_ode(cfg, out_dir, &mut files)?,
        CommandKind::Simulate => run_simulate(cfg, out_dir, &mut files)?,
        CommandKind::Stability => run_stability(cfg, out_dir, &mut files)?,
        CommandKind::Chaos => run_chaos(cfg, out_dir, &mut files)?,
        CommandKind::Demo => run_qubit_demo(cfg, out_dir, &mut files)?,
    };
    let manifest = json!({
        "command": cfg.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_sha256": config_hash(cfg),
        "wall_time_ms": started.elapsed().as_millis() as u64,
        "files": files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
    });
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    files.push(manifest_path);
    Ok(RunOutcome { files, summary })
}

fn config_hash(cfg: &ResolvedConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg.canonical.to_string().as_bytes());
    format!("{:x}", hasher.finalize())
}

fn model_hash(cfg: &ResolvedConfig) -> String {
    let m = cfg.model.clone();
    let v = json!({
        "d": m.d(),
        "h_free": matrix_to_rows(m.h_free()),
        "h_ctrl": matrix_to_rows(m.h_ctrl()),
        "interaction": matrix_to_rows(m.interaction().matrix()),
        "l": matrix_to_rows(m.meas().l()),
        "eta": m.meas().eta(),
        "detection": match m.meas().detection() { Detection::Homodyne => "homodyne", Detection::Counting => "counting" },
    });
    let mut hasher = Sha256::new();
    hasher.update(v.to_string().as_bytes());
    format!("{:x}", hasher.finalize())
}

fn write_file(path: &Path, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, contents)?;
    files.push(path.to_path_buf());
    Ok(())
}

fn write_json(path: &Path, value: &Value, files: &mut Vec<PathBuf>) -> Result<()> {
    write_file(path, &serde_json::to_string_pretty(value)?, files)
}

fn cell_laws_for(cfg: &ResolvedConfig) -> CellLaws {
    CellLaws::uniform(cfg.model.control().clone())
}

fn run_cutnorm(cfg: &ResolvedConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<Value> {
    let k = &cfg.kernel;
    let exact_ok = k.n() <= graphon::EXACT_NORM_MAX_BLOCKS && !cfg.cutnorm.force_heuristic;
    let (value, method, restarts) = if exact_ok {
        (graphon::cut_norm_exact(k)?, "exact", None)
    } else {
        (
            graphon::cut_norm_heuristic(k, cfg.cutnorm.restarts, cfg.seed),
            "heuristic",
            Some(cfg.cutnorm.restarts),
        )
    };
    let mut summary = json!({
        "cut_norm": value,
        "method": method,
        "n": k.n(),
    });
    if let Some(r) = restarts {
        summary["restarts"] = json!(r);
    }
    if exact_ok {
        summary["op_norm"] = json!(graphon::op_norm_exact(k)?);
    }
    write_json(&out.join("cutnorm.json"), &summary, files)?;
    Ok(summary)
}

fn mean_path_csv(path: &MeanFieldPath, d: usize) -> String {
    let mut s = String::from("t,cell");
    for i in 0..d {
        for j in 0..d {
            s.push_str(&format!(",m{i}{j}_re,m{i}{j}_im"));
        }
    }
    s.push('\n');
    for (k, t) in path.times().enumerate() {
        for cell in 0..path.n_u() {
            s.push_str(&fmt_f64(t));
            s.push_str(&format!(",{cell}"));
            let m = path.value(cell, k);
            for i in 0..d {
                for j in 0..d {
                    s.push(',');
                    s.push_str(&fmt_f64(m[(i, j)].re));
                    s.push(',');
                    s.push_str(&fmt_f64(m[(i, j)].im));
                }
            }
            s.push('\n');
        }
    }
    s
}

fn run_mean_ode(cfg: &ResolvedConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<Value> {
    let laws = cell_laws_for(cfg);
    let path = solve_mean_ode(&cfg.kernel, &cfg.model, &laws, &cfg.initial, &cfg.limit_cfg)?;
    let d = cfg.model.d();
    write_file(&out.join("mean_path.csv"), &mean_path_csv(&path, d), files)?;
    let finals: Vec<_> = (0..path.n_u())
        .map(|u| matrix_to_rows(path.value(u, path.n_steps())))
        .collect();
    let summary = json!({
        "n_u": path.n_u(),
        "t_max": path.t_max(),
        "dt": path.dt(),
        "final_means": finals,
    });
    write_json(&out.join("summary.json"), &summary, files)?;
    Ok(summary)
}

fn run_simulate(cfg: &ResolvedConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<Value> {
    let n = cfg.nbody.n_sites;
    let graph = match cfg.nbody.graph_mode {
        crate::limit::GraphMode::Weighted => graphon::weighted_graph(&cfg.kernel, n)?,
        crate::limit::GraphMode::Bernoulli => {
            graphon::sample_bernoulli(&cfg.kernel, n, cfg.seed)?
        }
    };
    let mut sim = SimConfig::new(cfg.limit_cfg.dt, cfg.limit_cfg.t_max, cfg.seed);
    sim.renorm_every = cfg.limit_cfg.renorm_every;
    sim.store_marginals = cfg.store_marginals.clone().unwrap_or_else(|| vec![1]);
    let record = match cfg.model.meas().detection() {
        Detection::Homodyne => simulate_homodyne_nbody(&cfg.model, &graph, &cfg.initial, &sim)?,
        Detection::Counting => simulate_jump_nbody(&cfg.model, &graph, &cfg.initial, &sim)?,
    };
    // Long-format CSV: one row per (time, recorded site).
    let d = cfg.model.d();
    let mut s = String::from("t,site");
    for i in 0..d {
        for j in 0..d {
            s.push_str(&format!(",m{i}{j}_re,m{i}{j}_im"));
        }
    }
    match &record.observations {
        Observations::Homodyne { .. } => s.push_str(",dY\n"),
        Observations::Jumps { .. } => s.push_str(",jump\n"),
    }
    for (k, t) in record.times.iter().enumerate() {
        for (&site, states) in &record.marginals {
            s.push_str(&fmt_f64(*t));
            s.push_str(&format!(",{site}"));
            let m = &states[k];
            for i in 0..d {
                for j in 0..d {
                    s.push(',');
                    s.push_str(&fmt_f64(m[(i, j)].re));
                    s.push(',');
                    s.push_str(&fmt_f64(m[(i, j)].im));
                }
            }
            match &record.observations {
                Observations::Homodyne { increments } => {
                    let dy = if k == 0 { 0.0 } else { increments[site - 1][k - 1] };
                    s.push(',');
                    s.push_str(&fmt_f64(dy));
                }
                Observations::Jumps { times } => {
                    let flag = if k == 0 {
                        0
                    } else {
                        let lo = record.times[k - 1];
                        times[site - 1].iter().filter(|&&tj| tj > lo && tj <= *t).count()
                    };
                    s.push_str(&format!(",{flag}"));
                }
            }
            s.push('\n');
        }
    }
    write_file(&out.join("trajectory.csv"), &s, files)?;
    if let Observations::Jumps { times } = &record.observations {
        let mut s = String::from("site,t\n");
        for (q, ts) in times.iter().enumerate() {
            for t in ts {
                s.push_str(&format!("{},{}\n", q + 1, fmt_f64(*t)));
            }
        }
        write_file(&out.join("jumps.csv"), &s, files)?;
    }
    let sidecar = json!({
        "model_hash": model_hash(cfg),
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "n_sites": n,
        "dt": sim.dt,
        "t_max": sim.t_max,
        "scheme": record.scheme.scheme,
        "renorm_count": record.scheme.renorm_count,
        "graph": if graph.is_bernoulli() { "bernoulli" } else { "weighted" },
    });
    write_json(&out.join("sidecar.json"), &sidecar, files)?;
    Ok(sidecar)
}

fn stability_row_json(eps: Option<f64>, r: &crate::limit::StabilityResult) -> Value {
    let mut v = json!({
        "distance_sq": r.distance_sq,
        "mc_stderr": r.mc_stderr,
        "cut_norm": r.cut_norm,
        "cut_norm_method": match r.cut_norm_method { CutNormMethod::Exact => "exact", CutNormMethod::Heuristic => "heuristic" },
        "ratio": if r.ratio.is_finite() { json!(r.ratio) } else { json!("inf") },
        "detection": match r.detection { Detection::Homodyne => "homodyne", Detection::Counting => "counting" },
        "trajectories": r.trajectories,
        "n_u": r.n_u,
        "coupling": r.coupling,
    });
    if let Some(e) = eps {
        v["epsilon"] = json!(e);
    }
    v
}

fn run_stability(cfg: &ResolvedConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<Value> {
    let laws = cell_laws_for(cfg);
    let w_a = &cfg.kernel;
    let w_b = cfg
        .kernel_b
        .as_ref()
        .ok_or_else(|| Error::validation("graphon_b", "stability needs a second graphon"))?;
    let mut rows = Vec::new();
    if cfg.stability_epsilons.is_empty() {
        let r = stability_experiment(w_a, w_b, &cfg.model, &laws, &cfg.initial, &cfg.limit_cfg)?;
        rows.push((None, r));
    } else {
        for &eps in &cfg.stability_epsilons {
            let w_eps = graphon::kernel_lerp(w_a, w_b, eps)?;
            let r =
                stability_experiment(w_a, &w_eps, &cfg.model, &laws, &cfg.initial, &cfg.limit_cfg)?;
            rows.push((Some(eps), r));
        }
    }
    let mut s = String::from(
        "epsilon,distance_sq,mc_stderr,cut_norm,cut_norm_method,ratio\n",
    );
    for (eps, r) in &rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            eps.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.distance_sq),
            fmt_f64(r.mc_stderr),
            fmt_f64(r.cut_norm),
            match r.cut_norm_method {
                CutNormMethod::Exact => "exact",
                CutNormMethod::Heuristic => "heuristic",
            },
            fmt_f64(r.ratio),
        ));
    }
    write_file(&out.join("stability_sweep.csv"), &s, files)?;
    let ratios: Vec<f64> = rows
        .iter()
        .filter(|(_, r)| r.cut_norm > 0.0)
        .map(|(_, r)| r.ratio)
        .collect();
    let summary = json!({
        "rows": rows.iter().map(|(e, r)| stability_row_json(*e, r)).collect::<Vec<_>>(),
        "ratio_max": ratios.iter().cloned().fold(f64::NAN, f64::max),
        "ratio_min": ratios.iter().cloned().fold(f64::NAN, f64::min),
    });
    write_json(&out.join("stability.json"), &summary, files)?;
    Ok(summary)
}

fn run_chaos(cfg: &ResolvedConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<Value> {
    let chaos = ChaosConfig {
        n_list: cfg.nbody.n_list.clone(),
        interaction_scales: cfg.nbody.interaction_scales.clone(),
        graph_mode: cfg.nbody.graph_mode,
        pure_state: cfg.nbody.pure_state,
    };
    let rows = chaos_experiment(&cfg.model, &cfg.kernel, &cfg.initial, &cfg.limit_cfg, &chaos)?;
    let mut s = String::from("n_sites,interaction_scale,distance,stderr,trajectories\n");
    for r in &rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n_sites,
            fmt_f64(r.interaction_scale),
            fmt_f64(r.distance),
            fmt_f64(r.stderr),
            r.trajectories
        ));
    }
    write_file(&out.join("chaos.csv"), &s, files)?;
    let summary = json!({
        "rows": rows.iter().map(|r| json!({
            "n_sites": r.n_sites,
            "interaction_scale": r.interaction_scale,
            "distance": r.distance,
            "stderr": r.stderr,
            "trajectories": r.trajectories,
        })).collect::<Vec<_>>(),
    });
    write_json(&out.join("summary.json"), &summary, files)?;
    Ok(summary)
}

/// Per-class demo laws: the configured feedback bound with the printed
/// targets `tau^0 = |0><0|`, `tau^1 = |1><1|`; a `none` or `table` control
/// in the config applies to both classes unchanged.
fn demo_laws(cfg: &ResolvedConfig) -> CellLaws {
    match &cfg.model.control().kind {
        ControlKind::DemoFeedback { .. } => {
            let bound = cfg.model.control().bound;
            CellLaws::per_cell(vec![
                ControlLaw::demo_feedback(ground_state(), bound),
                ControlLaw::demo_feedback(excited_state(), bound),
            ])
        }
        _ => CellLaws::uniform(cfg.model.control().clone()),
    }
}

struct DemoEnsemble {
    /// Per step: sums of matrix-path Bloch components.
    mat_sum: Vec<[f64; 3]>,
    /// Per step: sums of printed-Bloch-path components.
    bloch_sum: Vec<[f64; 3]>,
    fidelity_mat: Vec<f64>,
    fidelity_bloch: Vec<f64>,
}

fn demo_class_ensemble(
    cfg: &ResolvedConfig,
    laws: &CellLaws,
    mean: &MeanFieldPath,
    class: usize,
) -> Result<DemoEnsemble> {
    let n_steps = cfg.limit_cfg.n_steps();
    let m_traj = cfg.limit_cfg.trajectories;
    let dt = cfg.limit_cfg.dt;
    let target = if class == 0 { ground_state() } else { excited_state() };
    let law = laws.at(class);
    // Opposite-class deterministic means, per step.
    let opp: Vec<(f64, f64)> = (0..=n_steps)
        .map(|k| {
            let b = BlochState::from_density(mean.value(1 - class, k));
            (b.x, b.y)
        })
        .collect();

    let mut out = DemoEnsemble {
        mat_sum: vec![[0.0; 3]; n_steps + 1],
        bloch_sum: vec![[0.0; 3]; n_steps + 1],
        fidelity_mat: Vec::with_capacity(m_traj),
        fidelity_bloch: Vec::with_capacity(m_traj),
    };
    for m in 0..m_traj {
        let seed = fold_seed(cfg.seed, &[TAG_CELL, class as u64, TAG_TRAJECTORY, m as u64]);
        // Matrix-level Eq.-(3) trajectory.
        let rec = simulate_homodyne_limit(
            &cfg.kernel,
            &cfg.model,
            laws,
            mean,
            class,
            &cfg.limit_cfg,
            seed,
        )?;
        let states = &rec.marginals[&(class + 1)];
        for (k, st) in states.iter().enumerate() {
            let b = BlochState::from_density(st);
            out.mat_sum[k][0] += b.x;
            out.mat_sum[k][1] += b.y;
            out.mat_sum[k][2] += b.z;
        }
        out.fidelity_mat
            .push((states[n_steps].clone() * target.matrix()).trace().re);

        // Printed Bloch trajectory with the identical noise stream.
        let mut rng = stream(seed, &[TAG_SITE, class as u64 + 1]);
        let normal = rand_distr::Normal::new(0.0, dt.sqrt()).expect("valid std dev");
        let mut b = BlochState::from_density(mean.value(class, 0));
        out.bloch_sum[0][0] += b.x;
        out.bloch_sum[0][1] += b.y;
        out.bloch_sum[0][2] += b.z;
        for k in 0..n_steps {
            let dw = rand_distr::Distribution::sample(&normal, &mut rng);
            let control = law.evaluate(&b.to_density(), class);
            b = bloch_step(b, opp[k], control, dt, dw);
            out.bloch_sum[k + 1][0] += b.x;
            out.bloch_sum[k + 1][1] += b.y;
            out.bloch_sum[k + 1][2] += b.z;
        }
        out.fidelity_bloch
            .push((b.to_density() * target.matrix()).trace().re);
    }
    Ok(out)
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(0.0);
    (mean, (var / n).sqrt())
}

fn run_qubit_demo(cfg: &ResolvedConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<Value> {
    if cfg.model.d() != 2 || cfg.kernel.n() != 2 || cfg.limit_cfg.n_u != 2 {
        return Err(Error::validation(
            "sim.n_u",
            "the demo is the two-class reduction: d = 2 and n_u = 2 required",
        ));
    }
    let laws = demo_laws(cfg);
    let mean = solve_mean_ode(&cfg.kernel, &cfg.model, &laws, &cfg.initial, &cfg.limit_cfg)?;
    let classes: Vec<DemoEnsemble> = (0..2)
        .map(|j| demo_class_ensemble(cfg, &laws, &mean, j))
        .collect::<Result<_>>()?;

    let n_steps = cfg.limit_cfg.n_steps();
    let m_traj = cfg.limit_cfg.trajectories as f64;
    let stride = (n_steps / 1000).max(1);
    let mut s = String::from("t,class,x_matrix,y_matrix,z_matrix,x_bloch,y_bloch,z_bloch\n");
    for k in (0..=n_steps).step_by(stride) {
        let t = k as f64 * cfg.limit_cfg.dt;
        for (j, ens) in classes.iter().enumerate() {
            s.push_str(&fmt_f64(t));
            s.push_str(&format!(",{j}"));
            for c in 0..3 {
                s.push(',');
                s.push_str(&fmt_f64(ens.mat_sum[k][c] / m_traj));
            }
            for c in 0..3 {
                s.push(',');
                s.push_str(&fmt_f64(ens.bloch_sum[k][c] / m_traj));
            }
            s.push('\n');
        }
    }
    write_file(&out.join("demo_means.csv"), &s, files)?;

    let mut s = String::from("class,trajectory,fidelity_matrix,fidelity_bloch\n");
    for (j, ens) in classes.iter().enumerate() {
        for (m, (fm, fb)) in ens
            .fidelity_mat
            .iter()
            .zip(ens.fidelity_bloch.iter())
            .enumerate()
        {
            s.push_str(&format!("{j},{m},{},{}\n", fmt_f64(*fm), fmt_f64(*fb)));
        }
    }
    write_file(&out.join("demo_fidelity.csv"), &s, files)?;

    // Matrix-vs-Bloch comparison: sup over grid times of the gap between
    // ensemble means, per class and component. Reported, never reconciled.
    let mut comparison = Vec::new();
    for ens in &classes {
        let mut sup = [0.0f64; 3];
        for k in 0..=n_steps {
            for c in 0..3 {
                sup[c] = sup[c].max((ens.mat_sum[k][c] / m_traj - ens.bloch_sum[k][c] / m_traj).abs());
            }
        }
        comparison.push(json!({"x": sup[0], "y": sup[1], "z": sup[2]}));
    }

    let stats = |list: &[Vec<f64>]| -> Vec<Value> {
        list.iter()
            .map(|xs| {
                let (m, se) = mean_stderr(xs);
                json!({"mean": m, "stderr": se})
            })
            .collect()
    };
    let summary = json!({
        "trajectories": cfg.limit_cfg.trajectories,
        "t_max": cfg.limit_cfg.t_max,
        "feedback": matches!(cfg.model.control().kind, ControlKind::DemoFeedback { .. }),
        "final_fidelity_matrix": stats(&[classes[0].fidelity_mat.clone(), classes[1].fidelity_mat.clone()]),
        "final_fidelity_bloch": stats(&[classes[0].fidelity_bloch.clone(), classes[1].fidelity_bloch.clone()]),
        "matrix_vs_bloch_sup_gap": comparison,
    });
    write_json(&out.join("summary.json"), &summary, files)?;
    Ok(summary)
}
