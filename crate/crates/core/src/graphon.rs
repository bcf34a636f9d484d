//! Step kernels, graphons, Bernoulli graph sampling, and the cut and
//! operator norms of the associated kernel operator.
//!
//! Cut-norm conventions: for an `n`-block step kernel the cut norm is
//! `max_{S,T} |sum_{p in S, q in T} w_pq| / n^2`. The outer set is enumerated
//! exactly (Gray code) and the inner set chosen greedily per sign branch,
//! which is exact because the objective is linear in the inner indicator.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::rng::{self, TAG_GRAPH, TAG_RESTART};

/// Block count above which exact norm enumeration is refused.
pub const EXACT_NORM_MAX_BLOCKS: usize = 20;

/// Symmetric piecewise-constant kernel on `[0,1]^2` with `n` uniform blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepKernel {
    n: usize,
    weights: DMatrix<f64>,
    lo: f64,
    hi: f64,
}

impl StepKernel {
    pub fn new(weights: DMatrix<f64>, lo: f64, hi: f64) -> Result<Self> {
        let n = weights.nrows();
        if n == 0 || weights.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "step kernel weights must be square and nonempty, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Parse(format!("invalid kernel bounds [{lo}, {hi}]")));
        }
        let mut defect = 0.0f64;
        for p in 0..n {
            for q in 0..n {
                let w = weights[(p, q)];
                if !w.is_finite() {
                    return Err(Error::Parse("non-finite kernel entry".into()));
                }
                if w < lo - 1e-12 || w > hi + 1e-12 {
                    return Err(Error::Parse(format!(
                        "kernel entry {w} outside declared bounds [{lo}, {hi}]"
                    )));
                }
                defect = defect.max((w - weights[(q, p)]).abs());
            }
        }
        if defect > 1e-12 {
            return Err(Error::Parse(format!(
                "kernel weights not symmetric (defect {defect:.3e})"
            )));
        }
        // Enforce exact symmetry.
        let sym = DMatrix::from_fn(n, n, |p, q| 0.5 * (weights[(p, q)] + weights[(q, p)]));
        Ok(StepKernel {
            n,
            weights: sym,
            lo,
            hi,
        })
    }

    /// A kernel with graphon bounds `[0, 1]`.
    pub fn graphon(weights: DMatrix<f64>) -> Result<Self> {
        Self::new(weights, 0.0, 1.0)
    }

    /// A signed kernel with bounds `[-1, 1]` (e.g. a graphon difference).
    pub fn signed(weights: DMatrix<f64>) -> Result<Self> {
        Self::new(weights, -1.0, 1.0)
    }

    pub fn constant(n: usize, c: f64) -> Self {
        StepKernel {
            n,
            weights: DMatrix::from_element(n, n, c),
            lo: c.min(0.0),
            hi: c.max(1.0).max(c),
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(n, 0.0)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn value(&self, p: usize, q: usize) -> f64 {
        self.weights[(p, q)]
    }

    pub fn is_graphon(&self) -> bool {
        self.weights.iter().all(|&w| (0.0..=1.0).contains(&w))
    }

    /// Cell index of `u` under the partition into left-open intervals
    /// `((p-1)/n, p/n]`; `u = 0` maps to the first cell.
    pub fn cell_of(&self, u: f64) -> usize {
        let c = (u * self.n as f64).ceil() as isize - 1;
        c.clamp(0, self.n as isize - 1) as usize
    }

    /// Step-function evaluation `W(u, v)`.
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.weights[(self.cell_of(u), self.cell_of(v))]
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Vec<f64>> = (0..self.n)
            .map(|p| (0..self.n).map(|q| self.weights[(p, q)]).collect())
            .collect();
        json!({ "n": self.n, "weights": rows, "lo": self.lo, "hi": self.hi })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let n = v["n"]
            .as_u64()
            .ok_or_else(|| Error::Parse("step kernel: missing integer field 'n'".into()))?
            as usize;
        let rows = v["weights"]
            .as_array()
            .ok_or_else(|| Error::Parse("step kernel: missing array 'weights'".into()))?;
        if rows.len() != n {
            return Err(Error::Parse(format!(
                "step kernel: expected {n} weight rows, got {}",
                rows.len()
            )));
        }
        let mut weights = DMatrix::zeros(n, n);
        for (p, row) in rows.iter().enumerate() {
            let row = row
                .as_array()
                .ok_or_else(|| Error::Parse("step kernel: weight row is not an array".into()))?;
            if row.len() != n {
                return Err(Error::Parse("step kernel: ragged weight rows".into()));
            }
            for (q, w) in row.iter().enumerate() {
                weights[(p, q)] = w
                    .as_f64()
                    .ok_or_else(|| Error::Parse("step kernel: non-numeric weight".into()))?;
            }
        }
        let lo = v["lo"].as_f64().unwrap_or(0.0);
        let hi = v["hi"].as_f64().unwrap_or(1.0);
        Self::new(weights, lo, hi)
    }
}

/// A graphon given by a total symmetric evaluator into `[0, 1]`.
#[derive(Clone)]
pub struct EvaluableGraphon {
    name: String,
    eval: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for EvaluableGraphon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvaluableGraphon").field("name", &self.name).finish()
    }
}

impl EvaluableGraphon {
    pub fn constant(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::RangeError(format!("constant graphon value {c} outside [0,1]")));
        }
        Ok(EvaluableGraphon {
            name: format!("constant({c})"),
            eval: Arc::new(move |_, _| c),
        })
    }

    /// Two-block community graphon: 1 when `(u - 1/2)(1/2 - v) >= 0`, else 0.
    pub fn two_block() -> Self {
        EvaluableGraphon {
            name: "two_block".into(),
            eval: Arc::new(|u, v| if (u - 0.5) * (0.5 - v) >= 0.0 { 1.0 } else { 0.0 }),
        }
    }

    pub fn min_uv() -> Self {
        EvaluableGraphon {
            name: "min".into(),
            eval: Arc::new(f64::min),
        }
    }

    /// Wrap a step kernel (must have graphon range).
    pub fn from_step(kernel: StepKernel) -> Result<Self> {
        if !kernel.is_graphon() {
            return Err(Error::RangeError(
                "step kernel has entries outside [0,1]".into(),
            ));
        }
        let name = format!("table({})", kernel.n());
        Ok(EvaluableGraphon {
            name,
            eval: Arc::new(move |u, v| kernel.eval(u, v)),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, u: f64, v: f64) -> f64 {
        (self.eval)(u, v)
    }
}

/// Midpoint discretization onto `n` uniform cells. Exact for step graphons
/// aligned with the grid; `O(1/n)` bias in cut norm otherwise.
pub fn discretize(w: &EvaluableGraphon, n: usize) -> Result<StepKernel> {
    if n == 0 {
        return Err(Error::DimensionMismatch("discretize: n must be >= 1".into()));
    }
    let mid = |p: usize| (p as f64 + 0.5) / n as f64;
    let weights = DMatrix::from_fn(n, n, |p, q| w.value(mid(p), mid(q)));
    StepKernel::graphon(weights)
}

/// Adjacency of a finite interaction graph; `{0,1}`-valued when Bernoulli
/// sampled, `[0,1]`-weighted in deterministic mode. Zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGraph {
    n_vertices: usize,
    adjacency: DMatrix<f64>,
    seed: u64,
    bernoulli: bool,
}

impl SampledGraph {
    pub fn new(adjacency: DMatrix<f64>, seed: u64, bernoulli: bool) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 || adjacency.ncols() != n {
            return Err(Error::DimensionMismatch("graph adjacency must be square".into()));
        }
        for p in 0..n {
            if adjacency[(p, p)] != 0.0 {
                return Err(Error::Parse("graph adjacency must have zero diagonal".into()));
            }
            for q in 0..n {
                let a = adjacency[(p, q)];
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Parse(format!("adjacency entry {a} outside [0,1]")));
                }
                if (a - adjacency[(q, p)]).abs() > 0.0 {
                    return Err(Error::Parse("graph adjacency must be symmetric".into()));
                }
            }
        }
        Ok(SampledGraph {
            n_vertices: n,
            adjacency,
            seed,
            bernoulli,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_bernoulli(&self) -> bool {
        self.bernoulli
    }

    pub fn edge_density(&self) -> f64 {
        let n = self.n_vertices;
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                sum += self.adjacency[(p, q)];
            }
        }
        sum / (n * (n - 1) / 2) as f64
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Vec<f64>> = (0..self.n_vertices)
            .map(|p| (0..self.n_vertices).map(|q| self.adjacency[(p, q)]).collect())
            .collect();
        json!({
            "n": self.n_vertices,
            "weights": rows,
            "lo": 0.0,
            "hi": 1.0,
            "seed": self.seed,
            "bernoulli": self.bernoulli,
        })
    }
}

/// Step kernel of a graph: `W^G(u,v) = J_pq` on cell `(p, q)`.
pub fn step_from_graph(g: &SampledGraph) -> StepKernel {
    StepKernel::graphon(g.adjacency().clone()).expect("graph adjacency is a valid graphon")
}

/// Independent `Bernoulli(W(p/N, q/N))` edges on the upper triangle,
/// mirrored, zero diagonal. Deterministic given the seed.
pub fn sample_bernoulli(w: &StepKernel, n_vertices: usize, seed: u64) -> Result<SampledGraph> {
    if !w.is_graphon() {
        return Err(Error::RangeError(
            "Bernoulli sampling requires entries in [0,1]".into(),
        ));
    }
    if n_vertices == 0 {
        return Err(Error::DimensionMismatch("sample_bernoulli: N must be >= 1".into()));
    }
    let mut rng = rng::stream(seed, &[TAG_GRAPH]);
    let nv = n_vertices as f64;
    let mut adj = DMatrix::zeros(n_vertices, n_vertices);
    for p in 0..n_vertices {
        for q in (p + 1)..n_vertices {
            let prob = w.eval((p + 1) as f64 / nv, (q + 1) as f64 / nv);
            let edge = if rng.random::<f64>() < prob { 1.0 } else { 0.0 };
            adj[(p, q)] = edge;
            adj[(q, p)] = edge;
        }
    }
    SampledGraph::new(adj, seed, true)
}

/// Deterministic weighted graph: `xi_pq = W(p/N, q/N)`, zero diagonal.
pub fn weighted_graph(w: &StepKernel, n_vertices: usize) -> Result<SampledGraph> {
    if !w.is_graphon() {
        return Err(Error::RangeError(
            "weighted graph requires entries in [0,1]".into(),
        ));
    }
    if n_vertices == 0 {
        return Err(Error::DimensionMismatch("weighted_graph: N must be >= 1".into()));
    }
    let nv = n_vertices as f64;
    let mut adj = DMatrix::zeros(n_vertices, n_vertices);
    for p in 0..n_vertices {
        for q in 0..n_vertices {
            if p != q {
                adj[(p, q)] = w.eval((p + 1) as f64 / nv, (q + 1) as f64 / nv);
            }
        }
    }
    SampledGraph::new(adj, 0, false)
}

/// Kernel operator on step functions: `(T_W phi)_p = (1/n) sum_q w_pq phi_q`.
pub fn apply_t(w: &StepKernel, phi: &[f64]) -> Result<Vec<f64>> {
    let n = w.n();
    if phi.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "apply_t: kernel has {n} blocks, step function has {}",
            phi.len()
        )));
    }
    Ok((0..n)
        .map(|p| (0..n).map(|q| w.value(p, q) * phi[q]).sum::<f64>() / n as f64)
        .collect())
}

fn guard_blocks(n: usize) -> Result<()> {
    if n > EXACT_NORM_MAX_BLOCKS {
        return Err(Error::TooLarge(format!(
            "exact norm enumeration limited to {EXACT_NORM_MAX_BLOCKS} blocks, kernel has {n}"
        )));
    }
    Ok(())
}

/// Exact cut norm by Gray-code enumeration of the outer block set with a
/// greedy inner set per sign branch.
pub fn cut_norm_exact(w: &StepKernel) -> Result<f64> {
    let n = w.n();
    guard_blocks(n)?;
    let mut colsum = vec![0.0f64; n];
    let mut best = 0.0f64;
    let total = 1usize << n;
    for i in 1..total {
        let flip = i.trailing_zeros() as usize;
        let gray = i ^ (i >> 1);
        let sign = if gray & (1 << flip) != 0 { 1.0 } else { -1.0 };
        for q in 0..n {
            colsum[q] += sign * w.value(flip, q);
        }
        let mut pos = 0.0;
        let mut neg = 0.0;
        for &cs in &colsum {
            if cs > 0.0 {
                pos += cs;
            } else {
                neg -= cs;
            }
        }
        best = best.max(pos).max(neg);
    }
    Ok(best / (n * n) as f64)
}

/// Alternating maximization over indicator pairs from seeded random starts.
/// Always a lower bound on `cut_norm_exact`; deterministic given the seed.
pub fn cut_norm_heuristic(w: &StepKernel, restarts: usize, seed: u64) -> f64 {
    let n = w.n();
    let restarts = restarts.max(1);
    let mut best = 0.0f64;
    for r in 0..restarts {
        let mut rng = rng::stream(seed, &[TAG_RESTART, r as u64]);
        let start: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
        for sign in [1.0f64, -1.0] {
            let mut s = start.clone();
            let mut t = vec![false; n];
            for _ in 0..64 {
                // Optimal inner set for fixed outer set.
                let mut new_t = vec![false; n];
                for q in 0..n {
                    let cs: f64 = (0..n).filter(|&p| s[p]).map(|p| w.value(p, q)).sum();
                    new_t[q] = sign * cs > 0.0;
                }
                // Optimal outer set for fixed inner set.
                let mut new_s = vec![false; n];
                for p in 0..n {
                    let rs: f64 = (0..n).filter(|&q| new_t[q]).map(|q| w.value(p, q)).sum();
                    new_s[p] = sign * rs > 0.0;
                }
                let converged = new_s == s && new_t == t;
                s = new_s;
                t = new_t;
                if converged {
                    break;
                }
            }
            let mut val = 0.0;
            for p in 0..n {
                if s[p] {
                    for q in 0..n {
                        if t[q] {
                            val += w.value(p, q);
                        }
                    }
                }
            }
            best = best.max(sign * val);
        }
    }
    if best > 0.0 {
        best / (n * n) as f64
    } else {
        0.0
    }
}

/// Exact operator norm of `T_W` on step kernels: the sup over
/// `||phi||_inf <= 1` is attained at sign vectors.
pub fn op_norm_exact(w: &StepKernel) -> Result<f64> {
    let n = w.n();
    guard_blocks(n)?;
    // phi = all ones to start.
    let mut phi = vec![1.0f64; n];
    let mut rowsum: Vec<f64> = (0..n).map(|u| (0..n).map(|v| w.value(u, v)).sum()).collect();
    let eval = |rowsum: &[f64]| rowsum.iter().map(|r| r.abs()).sum::<f64>();
    let mut best = eval(&rowsum);
    let total = 1usize << n;
    for i in 1..total {
        let flip = i.trailing_zeros() as usize;
        let delta = -2.0 * phi[flip];
        phi[flip] = -phi[flip];
        for u in 0..n {
            rowsum[u] += delta * w.value(u, flip);
        }
        best = best.max(eval(&rowsum));
    }
    Ok(best / (n * n) as f64)
}

/// Entrywise difference; bounds by interval arithmetic.
pub fn kernel_sub(a: &StepKernel, b: &StepKernel) -> Result<StepKernel> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch(format!(
            "kernel_sub: {} vs {} blocks",
            a.n(),
            b.n()
        )));
    }
    let weights = a.weights() - b.weights();
    StepKernel::new(weights, a.lo - b.hi, a.hi - b.lo)
}

/// Entrywise scaling; bounds by interval arithmetic.
pub fn kernel_scale(w: &StepKernel, c: f64) -> StepKernel {
    let (lo, hi) = if c >= 0.0 {
        (w.lo * c, w.hi * c)
    } else {
        (w.hi * c, w.lo * c)
    };
    StepKernel::new(w.weights() * c, lo, hi).expect("scaling preserves kernel validity")
}

/// Convex mixture `(1 - t) a + t b` of two graphons.
pub fn kernel_lerp(a: &StepKernel, b: &StepKernel, t: f64) -> Result<StepKernel> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch(format!(
            "kernel_lerp: {} vs {} blocks",
            a.n(),
            b.n()
        )));
    }
    let weights = a.weights() * (1.0 - t) + b.weights() * t;
    let lo = (a.lo * (1.0 - t) + b.lo * t).min(a.lo.min(b.lo));
    let hi = (a.hi * (1.0 - t) + b.hi * t).max(a.hi.max(b.hi));
    StepKernel::new(weights, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force cut norm over every subset pair; oracle for small n.
    fn cut_norm_bruteforce(w: &StepKernel) -> f64 {
        let n = w.n();
        assert!(n <= 10);
        let mut best = 0.0f64;
        for s in 0..(1usize << n) {
            for t in 0..(1usize << n) {
                let mut sum = 0.0;
                for p in 0..n {
                    if s & (1 << p) != 0 {
                        for q in 0..n {
                            if t & (1 << q) != 0 {
                                sum += w.value(p, q);
                            }
                        }
                    }
                }
                best = best.max(sum.abs());
            }
        }
        best / (n * n) as f64
    }

    fn random_signed_kernel(rng: &mut impl Rng, n: usize) -> StepKernel {
        let mut m = DMatrix::zeros(n, n);
        for p in 0..n {
            for q in p..n {
                let v = rng.random::<f64>() * 2.0 - 1.0;
                m[(p, q)] = v;
                m[(q, p)] = v;
            }
        }
        StepKernel::signed(m).unwrap()
    }

    #[test]
    fn step_from_graph_trivials() {
        let k2 = SampledGraph::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            0,
            false,
        )
        .unwrap();
        assert_eq!(step_from_graph(&k2).weights(), k2.adjacency());

        let empty = SampledGraph::new(DMatrix::zeros(3, 3), 0, false).unwrap();
        assert!(step_from_graph(&empty).weights().iter().all(|&w| w == 0.0));

        let p3 = SampledGraph::new(
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
            0,
            false,
        )
        .unwrap();
        assert_eq!(step_from_graph(&p3).value(0, 1), 1.0);
        assert_eq!(step_from_graph(&p3).value(0, 2), 0.0);
    }

    #[test]
    fn discretize_two_block() {
        let w = EvaluableGraphon::two_block();
        let k2 = discretize(&w, 2).unwrap();
        assert_eq!(k2.weights(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));

        // Pointwise evaluation oracle at midpoints.
        let k4 = discretize(&w, 4).unwrap();
        for p in 0..4 {
            for q in 0..4 {
                let u = (p as f64 + 0.5) / 4.0;
                let v = (q as f64 + 0.5) / 4.0;
                let want = if (u - 0.5) * (0.5 - v) >= 0.0 { 1.0 } else { 0.0 };
                assert_eq!(k4.value(p, q), want, "cell ({p},{q})");
            }
        }
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0, //
                1.0, 1.0, 0.0, 0.0, //
                1.0, 1.0, 0.0, 0.0,
            ],
        );
        assert_eq!(k4.weights(), &expect);

        let c = discretize(&EvaluableGraphon::constant(0.3).unwrap(), 5).unwrap();
        assert!(c.weights().iter().all(|&w| w == 0.3));
    }

    #[test]
    fn eval_uses_left_open_cells() {
        let k = discretize(&EvaluableGraphon::two_block(), 2).unwrap();
        assert_eq!(k.cell_of(0.0), 0);
        assert_eq!(k.cell_of(0.5), 0);
        assert_eq!(k.cell_of(0.500000001), 1);
        assert_eq!(k.cell_of(1.0), 1);
    }

    #[test]
    fn bernoulli_trivials_and_determinism() {
        let complete = sample_bernoulli(&StepKernel::constant(1, 1.0), 5, 7).unwrap();
        for p in 0..5 {
            for q in 0..5 {
                let want = if p == q { 0.0 } else { 1.0 };
                assert_eq!(complete.adjacency()[(p, q)], want);
            }
        }
        let empty = sample_bernoulli(&StepKernel::constant(1, 0.0), 5, 7).unwrap();
        assert!(empty.adjacency().iter().all(|&a| a == 0.0));

        let a = sample_bernoulli(&StepKernel::constant(1, 0.5), 30, 3).unwrap();
        let b = sample_bernoulli(&StepKernel::constant(1, 0.5), 30, 3).unwrap();
        let c = sample_bernoulli(&StepKernel::constant(1, 0.5), 30, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let signed = StepKernel::signed(DMatrix::from_element(2, 2, -0.5)).unwrap();
        assert!(matches!(
            sample_bernoulli(&signed, 4, 0),
            Err(Error::RangeError(_))
        ));
    }

    #[test]
    fn bernoulli_density_within_binomial_band() {
        // Binomial statistics oracle: density of constant(1/2) at N = 200 is
        // within 3 sigma, sigma = sqrt(1/4 / C(200,2)).
        let g = sample_bernoulli(&StepKernel::constant(1, 0.5), 200, 12345).unwrap();
        let pairs = (200 * 199 / 2) as f64;
        let sigma = (0.25 / pairs).sqrt();
        assert!(
            (g.edge_density() - 0.5).abs() <= 3.0 * sigma,
            "density {} outside band",
            g.edge_density()
        );
    }

    #[test]
    fn apply_t_examples() {
        let ones = StepKernel::constant(3, 1.0);
        assert_eq!(apply_t(&ones, &[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 1.0, 1.0]);
        let zero = StepKernel::zero(3);
        assert_eq!(apply_t(&zero, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        let k = StepKernel::graphon(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(apply_t(&k, &[1.0, 0.0]).unwrap(), vec![0.0, 0.5]);
        assert!(apply_t(&k, &[1.0]).is_err());
    }

    #[test]
    fn cut_norm_examples() {
        assert_eq!(cut_norm_exact(&StepKernel::constant(4, 0.35)).unwrap(), 0.35);
        let k = StepKernel::graphon(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let exact = cut_norm_exact(&k).unwrap();
        assert_eq!(exact, 0.5);
        assert_eq!(exact, cut_norm_bruteforce(&k));
        // |W| symmetry.
        let neg = kernel_scale(&k, -1.0);
        assert_eq!(cut_norm_exact(&neg).unwrap(), exact);
    }

    #[test]
    fn cut_norm_exact_matches_bruteforce_on_random_kernels() {
        let mut rng = rng::stream(99, &[1]);
        for _ in 0..40 {
            let k = random_signed_kernel(&mut rng, 6);
            let fast = cut_norm_exact(&k).unwrap();
            let brute = cut_norm_bruteforce(&k);
            assert!((fast - brute).abs() <= 1e-12, "{fast} vs {brute}");
        }
    }

    #[test]
    fn cut_norm_guard() {
        let k = StepKernel::constant(EXACT_NORM_MAX_BLOCKS + 1, 0.5);
        assert!(matches!(cut_norm_exact(&k), Err(Error::TooLarge(_))));
        assert!(matches!(op_norm_exact(&k), Err(Error::TooLarge(_))));
    }

    #[test]
    fn heuristic_examples_and_bound() {
        assert!((cut_norm_heuristic(&StepKernel::constant(3, 0.7), 4, 0) - 0.7).abs() <= 1e-12);
        assert_eq!(cut_norm_heuristic(&StepKernel::zero(5), 4, 0), 0.0);
        let mut rng = rng::stream(17, &[4]);
        for i in 0..30 {
            let k = random_signed_kernel(&mut rng, 8);
            let h = cut_norm_heuristic(&k, 8, i);
            let e = cut_norm_exact(&k).unwrap();
            assert!(h <= e + 1e-12, "heuristic {h} above exact {e}");
        }
    }

    #[test]
    fn op_norm_examples() {
        assert_eq!(op_norm_exact(&StepKernel::constant(3, 1.0)).unwrap(), 1.0);
        assert_eq!(op_norm_exact(&StepKernel::zero(4)).unwrap(), 0.0);
        let k = StepKernel::graphon(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        // Enumeration over the 4 sign vectors gives 1/2.
        let mut oracle = 0.0f64;
        for s0 in [-1.0, 1.0] {
            for s1 in [-1.0f64, 1.0] {
                let v = ((k.value(0, 0) * s0 + k.value(0, 1) * s1).abs()
                    + (k.value(1, 0) * s0 + k.value(1, 1) * s1).abs())
                    / 4.0;
                oracle = oracle.max(v);
            }
        }
        assert_eq!(op_norm_exact(&k).unwrap(), oracle);
        assert_eq!(oracle, 0.5);
    }

    #[test]
    fn norm_sandwich_small() {
        // Cut norm <= operator norm <= 4x cut norm on random kernels.
        let mut rng = rng::stream(5, &[2]);
        for _ in 0..50 {
            let k = random_signed_kernel(&mut rng, 7);
            let cut = cut_norm_exact(&k).unwrap();
            let op = op_norm_exact(&k).unwrap();
            assert!(cut <= op + 1e-12);
            assert!(op <= 4.0 * cut + 1e-12);
        }
    }

    #[test]
    fn cut_norm_is_a_seminorm() {
        let mut rng = rng::stream(23, &[8]);
        for _ in 0..30 {
            let a = random_signed_kernel(&mut rng, 6);
            let b = random_signed_kernel(&mut rng, 6);
            let sum = StepKernel::new(a.weights() + b.weights(), -2.0, 2.0).unwrap();
            let na = cut_norm_exact(&a).unwrap();
            let nb = cut_norm_exact(&b).unwrap();
            let ns = cut_norm_exact(&sum).unwrap();
            assert!(ns <= na + nb + 1e-12);
            let c = -1.7;
            let scaled = kernel_scale(&a, c);
            let nscaled = cut_norm_exact(&scaled).unwrap();
            assert!((nscaled - c.abs() * na).abs() <= 1e-12);
        }
    }

    #[test]
    fn kernel_arithmetic_examples() {
        let k = StepKernel::graphon(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let zero = kernel_sub(&k, &k).unwrap();
        assert!(zero.weights().iter().all(|&w| w == 0.0));
        assert!(kernel_scale(&k, 0.0).weights().iter().all(|&w| w == 0.0));
        let half = StepKernel::constant(2, 0.5);
        let diff = kernel_sub(&k, &half).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[-0.5, 0.5, 0.5, -0.5]);
        assert_eq!(diff.weights(), &want);
        assert!(kernel_sub(&k, &StepKernel::constant(3, 0.5)).is_err());
    }

    #[test]
    fn deterministic_graphon_samples_exactly() {
        // The two-block graphon is {0,1}-valued, so Bernoulli sampling
        // reproduces its step kernel exactly off the diagonal.
        let w = discretize(&EvaluableGraphon::two_block(), 50).unwrap();
        let g = sample_bernoulli(&w, 50, 77).unwrap();
        let diff = kernel_sub(&step_from_graph(&g), &w).unwrap();
        assert_eq!(cut_norm_heuristic(&diff, 8, 5), 0.0);
    }

    #[test]
    fn sampled_graphs_converge_in_cut_norm() {
        // Heuristic cut-norm distance between the sampled step kernel and the
        // graphon shrinks with N (trend, fixed restarts and seeds).
        let w = EvaluableGraphon::constant(0.5).unwrap();
        let dist = |n: usize| -> f64 {
            let k = discretize(&w, n).unwrap();
            let g = sample_bernoulli(&k, n, 77).unwrap();
            let diff = kernel_sub(&step_from_graph(&g), &k).unwrap();
            cut_norm_heuristic(&diff, 16, 5)
        };
        let d: Vec<f64> = [20, 50, 100, 200].iter().map(|&n| dist(n)).collect();
        assert!(d[3] < d[0], "no decay: {d:?}");
        assert!(d[2] < d[0], "no decay: {d:?}");
        assert!(d[3] < 0.1, "large-N distance too big: {d:?}");
    }

    #[test]
    fn step_kernel_json_roundtrip() {
        let k = StepKernel::graphon(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let v = k.to_json();
        let back = StepKernel::from_json(&v).unwrap();
        assert_eq!(k, back);
        assert!(StepKernel::from_json(&json!({"n": 2})).is_err());
    }
}
