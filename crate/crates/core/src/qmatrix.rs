//! Dense complex matrix algebra for small Hilbert spaces.
//!
//! Everything here works on `CMat = DMatrix<Complex64>`. Sites of an `N`-body
//! register are labeled `1..=N` with site 1 as the leftmost (most significant)
//! tensor factor, so basis index `i` has site-`j` digit `(i / d^(N-j)) % d`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const IM: Complex64 = Complex64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Largest register dimension the dense code paths will accept.
pub const DIM_GUARD: usize = 4096;

/// Validation tolerances for density matrices.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Relative Hermiticity defect.
    pub herm: f64,
    /// Allowed negative eigenvalue magnitude.
    pub psd: f64,
    /// Allowed deviation of the trace from one.
    pub trace: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            herm: 1e-10,
            psd: 1e-10,
            trace: 1e-9,
        }
    }
}

pub fn identity(d: usize) -> CMat {
    CMat::identity(d, d)
}

pub fn sigma_x() -> CMat {
    CMat::from_row_slice(2, 2, &[cr(0.0), cr(1.0), cr(1.0), cr(0.0)])
}

pub fn sigma_y() -> CMat {
    CMat::from_row_slice(2, 2, &[cr(0.0), -IM, IM, cr(0.0)])
}

pub fn sigma_z() -> CMat {
    CMat::from_row_slice(2, 2, &[cr(1.0), cr(0.0), cr(0.0), cr(-1.0)])
}

/// Annihilation operator on one qubit: `a|1> = |0>`.
pub fn annihilation() -> CMat {
    CMat::from_row_slice(2, 2, &[cr(0.0), cr(1.0), cr(0.0), cr(0.0)])
}

pub fn creation() -> CMat {
    annihilation().adjoint()
}

/// Frobenius norm `sqrt(tr(O O^dag))`.
pub fn frobenius_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Hermitian part `(M + M^dag)/2` with entry conjugate symmetry enforced
/// exactly.
pub fn hermitize(m: &CMat) -> CMat {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut out = CMat::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = cr(m[(i, i)].re);
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)].conj()) * cr(0.5);
            out[(i, j)] = v;
            out[(j, i)] = v.conj();
        }
    }
    out
}

fn check_same_square(a: &CMat, b: &CMat) -> Result<()> {
    if a.nrows() != a.ncols() || b.nrows() != b.ncols() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "expected equal square matrices, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

/// `[A, B] = AB - BA`.
pub fn commutator(a: &CMat, b: &CMat) -> Result<CMat> {
    check_same_square(a, b)?;
    Ok(a * b - b * a)
}

/// `{A, B} = AB + BA`.
pub fn anticommutator(a: &CMat, b: &CMat) -> Result<CMat> {
    check_same_square(a, b)?;
    Ok(a * b + b * a)
}

/// `exp(t M)` (Pade scaling-and-squaring via nalgebra).
pub fn matrix_exponential(m: &CMat, t: f64) -> CMat {
    (m * cr(t)).exp()
}

/// Kronecker product.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// `m^{\otimes n}`.
pub fn tensor_power(m: &CMat, n: usize) -> CMat {
    assert!(n >= 1);
    let mut out = m.clone();
    for _ in 1..n {
        out = out.kronecker(m);
    }
    out
}

fn checked_register_dim(d: usize, n_sites: usize) -> Result<usize> {
    let mut dim: usize = 1;
    for _ in 0..n_sites {
        dim = dim
            .checked_mul(d)
            .filter(|&v| v <= DIM_GUARD)
            .ok_or_else(|| {
                Error::TooLarge(format!("d^N = {d}^{n_sites} exceeds {DIM_GUARD}"))
            })?;
    }
    Ok(dim)
}

/// A site of an `N`-body register, `1 <= site <= n_sites`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteIndex {
    site: usize,
    n_sites: usize,
}

impl SiteIndex {
    pub fn new(site: usize, n_sites: usize) -> Result<Self> {
        if n_sites == 0 || site == 0 || site > n_sites {
            return Err(Error::SiteOutOfRange { site, n_sites });
        }
        Ok(SiteIndex { site, n_sites })
    }

    pub fn site(&self) -> usize {
        self.site
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }
}

/// Embed a one-site operator at slot `j`: `I x .. x O x .. x I`.
pub fn embed_single(op: &CMat, at: SiteIndex) -> Result<CMat> {
    let d = op.nrows();
    if op.ncols() != d {
        return Err(Error::DimensionMismatch("embed_single: operator not square".into()));
    }
    let n = at.n_sites();
    let dim = checked_register_dim(d, n)?;
    let stride = d.pow((n - at.site()) as u32);
    let mut out = CMat::zeros(dim, dim);
    for r in 0..dim {
        let rj = (r / stride) % d;
        let base = r - rj * stride;
        for cj in 0..d {
            out[(r, base + cj * stride)] = op[(rj, cj)];
        }
    }
    Ok(out)
}

/// Embed a two-site operator on slots `(j, k)`. The row index of `op` pairs
/// as `(x_j, x_k)` row-major, i.e. `x_j * d + x_k`.
pub fn embed_pair(op: &CMat, j: SiteIndex, k: SiteIndex) -> Result<CMat> {
    if j.n_sites() != k.n_sites() {
        return Err(Error::DimensionMismatch(
            "embed_pair: inconsistent register sizes".into(),
        ));
    }
    if j.site() == k.site() {
        return Err(Error::IndexCollision { site: j.site() });
    }
    let d2 = op.nrows();
    if op.ncols() != d2 {
        return Err(Error::DimensionMismatch("embed_pair: operator not square".into()));
    }
    let d = (d2 as f64).sqrt().round() as usize;
    if d * d != d2 {
        return Err(Error::DimensionMismatch(format!(
            "embed_pair: operator dim {d2} is not a perfect square"
        )));
    }
    let n = j.n_sites();
    let dim = checked_register_dim(d, n)?;
    let sj = d.pow((n - j.site()) as u32);
    let sk = d.pow((n - k.site()) as u32);
    let mut out = CMat::zeros(dim, dim);
    for r in 0..dim {
        let rj = (r / sj) % d;
        let rk = (r / sk) % d;
        let base = r - rj * sj - rk * sk;
        let row = rj * d + rk;
        for cj in 0..d {
            for ck in 0..d {
                out[(r, base + cj * sj + ck * sk)] = op[(row, cj * d + ck)];
            }
        }
    }
    Ok(out)
}

/// Partial trace of a `d^N`-dimensional operator onto the sites in `keep`
/// (1-based, any order; output factors are ordered by ascending site).
pub fn partial_trace(m: &CMat, d: usize, n_sites: usize, keep: &[usize]) -> Result<CMat> {
    let dim = checked_register_dim(d, n_sites)?;
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "partial_trace: matrix is {}x{}, expected {dim}x{dim} = {d}^{n_sites}",
            m.nrows(),
            m.ncols()
        )));
    }
    if keep.is_empty() {
        return Err(Error::DimensionMismatch("partial_trace: keep set is empty".into()));
    }
    let mut keep = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    for &s in &keep {
        SiteIndex::new(s, n_sites)?;
    }
    let stride = |site: usize| d.pow((n_sites - site) as u32);
    let keep_strides: Vec<usize> = keep.iter().map(|&s| stride(s)).collect();
    let comp: Vec<usize> = (1..=n_sites).filter(|s| !keep.contains(s)).collect();
    let comp_strides: Vec<usize> = comp.iter().map(|&s| stride(s)).collect();

    let out_dim = d.pow(keep.len() as u32);
    let env_dim = d.pow(comp.len() as u32);

    // Register offset of each kept-subsystem index and of each traced index.
    let offsets = |strides: &[usize], count: usize| -> Vec<usize> {
        (0..count)
            .map(|mut idx| {
                let mut off = 0;
                for &s in strides.iter().rev() {
                    off += (idx % d) * s;
                    idx /= d;
                }
                off
            })
            .collect::<Vec<_>>()
    };
    let keep_off = offsets(&keep_strides, out_dim);
    let env_off = offsets(&comp_strides, env_dim);

    let mut out = CMat::zeros(out_dim, out_dim);
    for a in 0..out_dim {
        for b in 0..out_dim {
            let mut acc = Complex64::new(0.0, 0.0);
            for off in &env_off {
                acc += m[(keep_off[a] + off, keep_off[b] + off)];
            }
            out[(a, b)] = acc;
        }
    }
    Ok(out)
}

/// Left-multiply by an embedded one-site operator: `O_j * m`.
pub fn apply_single_left(op: &CMat, site: usize, d: usize, n_sites: usize, m: &CMat) -> CMat {
    let dim = m.nrows();
    let stride = d.pow((n_sites - site) as u32);
    let mut out = CMat::zeros(dim, m.ncols());
    for r in 0..dim {
        let rj = (r / stride) % d;
        let base = r - rj * stride;
        for s in 0..d {
            let w = op[(rj, s)];
            if w != Complex64::new(0.0, 0.0) {
                let src = base + s * stride;
                for col in 0..m.ncols() {
                    out[(r, col)] += w * m[(src, col)];
                }
            }
        }
    }
    out
}

/// Right-multiply by an embedded one-site operator: `m * O_j`.
pub fn apply_single_right(op: &CMat, site: usize, d: usize, n_sites: usize, m: &CMat) -> CMat {
    let dim = m.ncols();
    let stride = d.pow((n_sites - site) as u32);
    let mut out = CMat::zeros(m.nrows(), dim);
    for ccol in 0..dim {
        let cj = (ccol / stride) % d;
        let base = ccol - cj * stride;
        for s in 0..d {
            let w = op[(s, cj)];
            if w != Complex64::new(0.0, 0.0) {
                let src = base + s * stride;
                for row in 0..m.nrows() {
                    out[(row, ccol)] += m[(row, src)] * w;
                }
            }
        }
    }
    out
}

/// Apply an embedded one-site operator to a state vector: `O_j |psi>`.
pub fn apply_single_vec(op: &CMat, site: usize, d: usize, n_sites: usize, v: &CVec) -> CVec {
    let dim = v.len();
    let stride = d.pow((n_sites - site) as u32);
    let mut out = CVec::zeros(dim);
    for r in 0..dim {
        let rj = (r / stride) % d;
        let base = r - rj * stride;
        let mut acc = Complex64::new(0.0, 0.0);
        for s in 0..d {
            acc += op[(rj, s)] * v[base + s * stride];
        }
        out[r] = acc;
    }
    out
}

/// One-site reduced state of a pure register state.
pub fn marginal_of_vector(v: &CVec, d: usize, n_sites: usize, site: usize) -> CMat {
    let stride = d.pow((n_sites - site) as u32);
    let dim = v.len();
    let mut out = CMat::zeros(d, d);
    for r in 0..dim {
        let rj = (r / stride) % d;
        let base = r - rj * stride;
        for s in 0..d {
            out[(rj, s)] += v[r] * v[base + s * stride].conj();
        }
    }
    out
}

/// A positive-semidefinite Hermitian trace-one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: CMat,
}

impl DensityMatrix {
    /// Validate against the given tolerances.
    pub fn new(mat: CMat, tol: &Tolerances) -> Result<Self> {
        if mat.nrows() != mat.ncols() || mat.nrows() == 0 {
            return Err(Error::InvalidDensity(format!(
                "not square: {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        if mat.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidDensity("non-finite entries".into()));
        }
        let scale = frobenius_norm(&mat).max(1.0);
        let herm_defect = frobenius_norm(&(&mat - mat.adjoint()));
        if herm_defect > tol.herm * scale {
            return Err(Error::InvalidDensity(format!(
                "Hermiticity defect {herm_defect:.3e} exceeds {:.3e}",
                tol.herm * scale
            )));
        }
        let tr = mat.trace();
        if (tr.re - 1.0).abs() > tol.trace || tr.im.abs() > tol.trace {
            return Err(Error::InvalidDensity(format!("trace {tr} not within {:.3e} of 1", tol.trace)));
        }
        let eigs = hermitize(&mat).symmetric_eigen().eigenvalues;
        if let Some(min) = eigs.iter().cloned().reduce(f64::min) {
            if min < -tol.psd {
                return Err(Error::InvalidDensity(format!(
                    "minimum eigenvalue {min:.3e} below -{:.3e}",
                    tol.psd
                )));
            }
        }
        Ok(DensityMatrix { mat })
    }

    pub fn new_default(mat: CMat) -> Result<Self> {
        Self::new(mat, &Tolerances::default())
    }

    pub(crate) fn from_unchecked(mat: CMat) -> Self {
        DensityMatrix { mat }
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn purity(&self) -> f64 {
        (&self.mat * &self.mat).trace().re
    }

    /// Bloch components `(x, y, z)` of a qubit state.
    pub fn bloch(&self) -> (f64, f64, f64) {
        assert_eq!(self.dim(), 2);
        let m = &self.mat;
        let x = (m[(0, 1)] + m[(1, 0)]).re;
        let y = (m[(1, 0)] - m[(0, 1)]).im;
        let z = (m[(0, 0)] - m[(1, 1)]).re;
        (x, y, z)
    }

    pub fn maximally_mixed(d: usize) -> Self {
        DensityMatrix {
            mat: identity(d) * cr(1.0 / d as f64),
        }
    }

    /// `|psi><psi| / <psi|psi>`.
    pub fn from_pure(psi: &CVec) -> Result<Self> {
        let n2 = psi.norm_squared();
        if n2 <= 0.0 || !n2.is_finite() {
            return Err(Error::InvalidDensity("pure state has zero or non-finite norm".into()));
        }
        let mat = psi * psi.adjoint() * cr(1.0 / n2);
        Ok(DensityMatrix { mat })
    }

    /// The normalized dominant eigenvector, if the state is pure within `tol`.
    pub fn pure_state_vector(&self, tol: f64) -> Option<CVec> {
        let se = hermitize(&self.mat).symmetric_eigen();
        let (idx, &max) = se
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))?;
        if (max - 1.0).abs() > tol {
            return None;
        }
        let v = se.eigenvectors.column(idx).into_owned();
        Some(&v * cr(1.0 / v.norm()))
    }
}

/// `|+><+|` on a qubit.
pub fn plus_state() -> DensityMatrix {
    let h = cr(0.5);
    DensityMatrix::from_unchecked(CMat::from_row_slice(2, 2, &[h, h, h, h]))
}

/// `|0><0|` (north pole, sigma_z = +1).
pub fn ground_state() -> DensityMatrix {
    DensityMatrix::from_unchecked(CMat::from_row_slice(
        2,
        2,
        &[cr(1.0), cr(0.0), cr(0.0), cr(0.0)],
    ))
}

/// `|1><1|`.
pub fn excited_state() -> DensityMatrix {
    DensityMatrix::from_unchecked(CMat::from_row_slice(
        2,
        2,
        &[cr(0.0), cr(0.0), cr(0.0), cr(1.0)],
    ))
}

pub(crate) struct ProjectionReport {
    pub state: DensityMatrix,
    /// True when clipping or renormalization moved the matrix materially.
    pub changed: bool,
}

pub(crate) fn project_with_report(m: &CMat, tol: &Tolerances) -> Result<ProjectionReport> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "project_to_density: not square: {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("project_to_density: non-finite entries".into()));
    }
    let h = hermitize(m);
    let se = h.symmetric_eigen();
    let mut clipped = 0.0f64;
    let vals: Vec<f64> = se
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < 0.0 {
                clipped += -v;
                0.0
            } else {
                v
            }
        })
        .collect();
    let sum: f64 = vals.iter().sum();
    if sum <= tol.trace {
        return Err(Error::ZeroTrace { sum });
    }
    let diag = CMat::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&v| cr(v / sum)),
    ));
    let rebuilt = hermitize(&(&se.eigenvectors * diag * se.eigenvectors.adjoint()));
    let changed = clipped > 1e-14 || (sum - 1.0).abs() > 1e-12;
    Ok(ProjectionReport {
        state: DensityMatrix::from_unchecked(rebuilt),
        changed,
    })
}

/// Hermitize, clip negative eigenvalues, renormalize the trace to one.
///
/// Fixed point on valid density matrices; fails with `ZeroTrace` when the
/// clipped spectrum sums below tolerance.
pub fn project_to_density(m: &CMat) -> Result<DensityMatrix> {
    Ok(project_with_report(m, &Tolerances::default())?.state)
}

/// Row-major `[re, im]` pair encoding shared by all JSON interfaces.
pub fn matrix_to_rows(m: &CMat) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
        .collect()
}

pub fn matrix_from_rows(rows: &[Vec<[f64; 2]>]) -> Result<CMat> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse("empty matrix".into()));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse("matrix rows must be square".into()));
    }
    let mut out = CMat::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (j, &[re, im]) in row.iter().enumerate() {
            if !re.is_finite() || !im.is_finite() {
                return Err(Error::Parse(format!("non-finite entry at ({i},{j})")));
            }
            out[(i, j)] = c(re, im);
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn assert_mat_eq(a: &CMat, b: &CMat, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        assert!(
            frobenius_norm(&(a - b)) <= tol,
            "matrices differ by {}:\n{a}\nvs\n{b}",
            frobenius_norm(&(a - b))
        );
    }

    #[test]
    fn hermitize_examples() {
        let sz = sigma_z();
        assert_mat_eq(&hermitize(&sz), &sz, 0.0);

        let m = CMat::from_row_slice(2, 2, &[cr(0.0), cr(1.0), cr(0.0), cr(0.0)]);
        let want = CMat::from_row_slice(2, 2, &[cr(0.0), cr(0.5), cr(0.5), cr(0.0)]);
        assert_mat_eq(&hermitize(&m), &want, 0.0);

        // Antisymmetric real matrix has zero Hermitian part.
        let m = CMat::from_row_slice(2, 2, &[cr(0.0), cr(2.0), cr(-2.0), cr(0.0)]);
        assert_mat_eq(&hermitize(&m), &CMat::zeros(2, 2), 0.0);
    }

    #[test]
    fn hermitize_is_exactly_hermitian() {
        let mut rng = crate::rng::stream(7, &[1]);
        let m = random_cmat(&mut rng, 5);
        let h = hermitize(&m);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(h[(i, j)], h[(j, i)].conj());
            }
        }
    }

    #[test]
    fn project_examples() {
        let m = CMat::from_diagonal(&DVector::from_vec(vec![cr(0.5), cr(0.5)]));
        let p = project_to_density(&m).unwrap();
        assert_mat_eq(p.matrix(), &m, 1e-14);

        // Analytic eigen-clip: diag(1.2, -0.2) -> diag(1, 0).
        let m = CMat::from_diagonal(&DVector::from_vec(vec![cr(1.2), cr(-0.2)]));
        let p = project_to_density(&m).unwrap();
        let want = CMat::from_diagonal(&DVector::from_vec(vec![cr(1.0), cr(0.0)]));
        assert_mat_eq(p.matrix(), &want, 1e-14);

        assert!(matches!(
            project_to_density(&CMat::zeros(2, 2)),
            Err(Error::ZeroTrace { .. })
        ));
    }

    #[test]
    fn project_satisfies_invariants_on_random_inputs() {
        let mut rng = crate::rng::stream(11, &[2]);
        for _ in 0..50 {
            let m = random_cmat(&mut rng, 4);
            let p = match project_to_density(&m) {
                Ok(p) => p,
                Err(Error::ZeroTrace { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            let mat = p.matrix();
            // Hermitian exactly, trace within 1e-12, spectrum nonnegative.
            assert_eq!(frobenius_norm(&(mat - mat.adjoint())), 0.0);
            assert!((mat.trace().re - 1.0).abs() <= 1e-12);
            let min = hermitize(mat)
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-12, "min eigenvalue {min}");
        }
    }

    #[test]
    fn partial_trace_product_state() {
        let rho = plus_state().into_matrix();
        let sigma = CMat::from_row_slice(2, 2, &[cr(0.25), cr(0.0), cr(0.0), cr(0.75)]);
        let joint = kron(&rho, &sigma);
        let back = partial_trace(&joint, 2, 2, &[1]).unwrap();
        assert_mat_eq(&back, &rho, 1e-14);
        let back2 = partial_trace(&joint, 2, 2, &[2]).unwrap();
        assert_mat_eq(&back2, &sigma, 1e-14);
    }

    #[test]
    fn partial_trace_bell_state() {
        // |Phi+> = (|00> + |11>)/sqrt(2); independent index-summation oracle.
        let mut psi = CVec::zeros(4);
        psi[0] = cr(1.0 / 2f64.sqrt());
        psi[3] = cr(1.0 / 2f64.sqrt());
        let rho = &psi * psi.adjoint();

        let mut oracle = CMat::zeros(2, 2);
        for a in 0..2 {
            for b in 0..2 {
                for e in 0..2 {
                    oracle[(a, b)] += rho[(a * 2 + e, b * 2 + e)];
                }
            }
        }
        let got = partial_trace(&rho, 2, 2, &[1]).unwrap();
        assert_mat_eq(&got, &oracle, 1e-15);
        assert_mat_eq(&got, &(identity(2) * cr(0.5)), 1e-14);
    }

    #[test]
    fn partial_trace_keep_all_and_trace_preservation() {
        let mut rng = crate::rng::stream(3, &[9]);
        let m = random_cmat(&mut rng, 8);
        let all = partial_trace(&m, 2, 3, &[1, 2, 3]).unwrap();
        assert_mat_eq(&all, &m, 0.0);
        for keep in [&[1usize][..], &[2], &[3], &[1, 3], &[2, 3]] {
            let red = partial_trace(&m, 2, 3, keep).unwrap();
            let tr = red.trace();
            let full = m.trace();
            assert_relative_eq!(tr.re, full.re, epsilon = 1e-12);
            assert_relative_eq!(tr.im, full.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn partial_trace_rejects_bad_dims() {
        let m = CMat::zeros(6, 6);
        assert!(matches!(
            partial_trace(&m, 2, 3, &[1]),
            Err(Error::DimensionMismatch(_))
        ));
        let m = CMat::zeros(4, 4);
        assert!(partial_trace(&m, 2, 2, &[]).is_err());
    }

    #[test]
    fn embed_single_examples() {
        let s1 = SiteIndex::new(1, 2).unwrap();
        let got = embed_single(&sigma_x(), s1).unwrap();
        assert_mat_eq(&got, &kron(&sigma_x(), &identity(2)), 0.0);

        let s2 = SiteIndex::new(2, 2).unwrap();
        let got = embed_single(&sigma_x(), s2).unwrap();
        assert_mat_eq(&got, &kron(&identity(2), &sigma_x()), 0.0);

        // Identity embeds to the full identity; trace scaling tr = tr(O) d^(N-1).
        let got = embed_single(&identity(2), SiteIndex::new(2, 3).unwrap()).unwrap();
        assert_mat_eq(&got, &identity(8), 0.0);
        let got = embed_single(&sigma_z(), SiteIndex::new(1, 3).unwrap()).unwrap();
        assert_relative_eq!(got.trace().re, sigma_z().trace().re * 4.0);
    }

    #[test]
    fn embeds_commute_on_disjoint_sites() {
        let mut rng = crate::rng::stream(5, &[4]);
        for _ in 0..10 {
            let a = random_cmat(&mut rng, 2);
            let b = random_cmat(&mut rng, 2);
            let ea = embed_single(&a, SiteIndex::new(1, 3).unwrap()).unwrap();
            let eb = embed_single(&b, SiteIndex::new(3, 3).unwrap()).unwrap();
            let comm = commutator(&ea, &eb).unwrap();
            assert!(frobenius_norm(&comm) <= 1e-12);
        }
    }

    #[test]
    fn embed_pair_examples() {
        let b = kron(&sigma_x(), &sigma_z());
        let j = SiteIndex::new(1, 2).unwrap();
        let k = SiteIndex::new(2, 2).unwrap();
        assert_mat_eq(&embed_pair(&b, j, k).unwrap(), &b, 0.0);

        // Reversed slots: oracle by explicit basis relabeling with SWAP.
        let swapped = embed_pair(&b, k, j).unwrap();
        let mut swap = CMat::zeros(4, 4);
        swap[(0, 0)] = cr(1.0);
        swap[(1, 2)] = cr(1.0);
        swap[(2, 1)] = cr(1.0);
        swap[(3, 3)] = cr(1.0);
        let oracle = &swap * &b * &swap;
        assert_mat_eq(&swapped, &oracle, 0.0);
        assert_mat_eq(&swapped, &kron(&sigma_z(), &sigma_x()), 0.0);

        assert_mat_eq(
            &embed_pair(&identity(4), j, k).unwrap(),
            &identity(4),
            0.0,
        );
        assert!(matches!(
            embed_pair(&b, j, j),
            Err(Error::IndexCollision { site: 1 })
        ));
    }

    #[test]
    fn embed_pair_factorizes_into_singles() {
        let mut rng = crate::rng::stream(6, &[4]);
        let a = random_cmat(&mut rng, 2);
        let b = random_cmat(&mut rng, 2);
        let j = SiteIndex::new(3, 3).unwrap();
        let k = SiteIndex::new(1, 3).unwrap();
        let pair = embed_pair(&kron(&a, &b), j, k).unwrap();
        let prod = embed_single(&a, j).unwrap() * embed_single(&b, k).unwrap();
        assert_mat_eq(&pair, &prod, 1e-12);
    }

    #[test]
    fn frobenius_examples() {
        assert_relative_eq!(frobenius_norm(&identity(2)), 2f64.sqrt());
        assert_relative_eq!(frobenius_norm(&sigma_x()), 2f64.sqrt());
        let m = CMat::from_row_slice(2, 2, &[cr(3.0), cr(4.0), cr(0.0), cr(0.0)]);
        assert_relative_eq!(frobenius_norm(&m), 5.0);
        assert_eq!(frobenius_norm(&CMat::zeros(3, 3)), 0.0);
    }

    #[test]
    fn commutator_pauli_algebra() {
        // [sx, sy] = 2i sz, {sx, sy} = 0 by direct complex arithmetic.
        let comm = commutator(&sigma_x(), &sigma_y()).unwrap();
        assert_mat_eq(&comm, &(sigma_z() * (IM * cr(2.0))), 1e-15);
        let a = commutator(&sigma_x(), &sigma_x()).unwrap();
        assert_eq!(frobenius_norm(&a), 0.0);
        let anti = anticommutator(&sigma_x(), &sigma_y()).unwrap();
        assert!(frobenius_norm(&anti) <= 1e-15);
        assert!(commutator(&sigma_x(), &identity(3)).is_err());
    }

    #[test]
    fn matrix_exponential_examples() {
        let e = matrix_exponential(&CMat::zeros(3, 3), 1.7);
        assert_mat_eq(&e, &identity(3), 1e-14);

        let m = sigma_z() * -IM;
        let e = matrix_exponential(&m, std::f64::consts::FRAC_PI_2);
        let want = CMat::from_diagonal(&DVector::from_vec(vec![-IM, IM]));
        assert_mat_eq(&e, &want, 1e-12);

        let mut rng = crate::rng::stream(8, &[1]);
        let m = random_cmat(&mut rng, 4);
        let prod = matrix_exponential(&m, 0.3) * matrix_exponential(&m, -0.3);
        assert_mat_eq(&prod, &identity(4), 1e-12);
    }

    #[test]
    fn vector_helpers_match_dense_embedding() {
        let mut rng = crate::rng::stream(12, &[3]);
        let op = random_cmat(&mut rng, 2);
        let m = random_cmat(&mut rng, 8);
        let v = CVec::from_fn(8, |i, _| c(i as f64 * 0.1, -(i as f64) * 0.05));
        for site in 1..=3 {
            let emb = embed_single(&op, SiteIndex::new(site, 3).unwrap()).unwrap();
            assert_mat_eq(&apply_single_left(&op, site, 2, 3, &m), &(&emb * &m), 1e-12);
            assert_mat_eq(&apply_single_right(&op, site, 2, 3, &m), &(&m * &emb), 1e-12);
            let got = apply_single_vec(&op, site, 2, 3, &v);
            let want = &emb * &v;
            assert!((got - want).norm() <= 1e-12);
        }
        let marg = marginal_of_vector(&v, 2, 3, 2);
        let rho = &v * v.adjoint();
        let want = partial_trace(&rho, 2, 3, &[2]).unwrap();
        assert_mat_eq(&marg, &want, 1e-12);
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new_default(plus_state().into_matrix()).is_ok());
        // Trace off.
        let m = identity(2);
        assert!(DensityMatrix::new_default(m).is_err());
        // Negative eigenvalue.
        let m = CMat::from_diagonal(&DVector::from_vec(vec![cr(1.5), cr(-0.5)]));
        assert!(DensityMatrix::new_default(m).is_err());
        // Non-Hermitian.
        let m = CMat::from_row_slice(2, 2, &[cr(0.5), cr(0.3), cr(0.0), cr(0.5)]);
        assert!(DensityMatrix::new_default(m).is_err());
    }

    #[test]
    fn pure_state_roundtrip() {
        let psi = CVec::from_vec(vec![c(0.6, 0.0), c(0.0, 0.8)]);
        let rho = DensityMatrix::from_pure(&psi).unwrap();
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        let back = rho.pure_state_vector(1e-9).unwrap();
        // Equal up to global phase.
        let overlap = back.dotc(&(&psi * cr(1.0 / psi.norm()))).norm();
        assert_relative_eq!(overlap, 1.0, epsilon = 1e-12);
        assert!(DensityMatrix::maximally_mixed(2).pure_state_vector(1e-9).is_none());
    }

    #[test]
    fn json_matrix_roundtrip() {
        let m = sigma_y();
        let rows = matrix_to_rows(&m);
        assert_eq!(rows, vec![vec![[0.0, 0.0], [0.0, -1.0]], vec![[0.0, 1.0], [0.0, 0.0]]]);
        let back = matrix_from_rows(&rows).unwrap();
        assert_mat_eq(&back, &m, 0.0);
        assert!(matrix_from_rows(&[vec![[f64::NAN, 0.0]]]).is_err());
    }

    pub(crate) fn random_cmat(rng: &mut impl rand::Rng, n: usize) -> CMat {
        CMat::from_fn(n, n, |_, _| {
            c(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0)
        })
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_cmat(n: usize) -> impl Strategy<Value = CMat> {
            proptest::collection::vec(
                (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(re, im)| c(re, im)),
                n * n,
            )
            .prop_map(move |v| CMat::from_vec(n, n, v))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn frobenius_is_a_norm(a in small_cmat(3), b in small_cmat(3), s in -3.0f64..3.0) {
                let tri = frobenius_norm(&(&a + &b));
                prop_assert!(tri <= frobenius_norm(&a) + frobenius_norm(&b) + 1e-12);
                let hom = frobenius_norm(&(&a * cr(s)));
                prop_assert!((hom - s.abs() * frobenius_norm(&a)).abs() <= 1e-12);
            }

            #[test]
            fn partial_trace_is_linear(a in small_cmat(4), b in small_cmat(4), s in -2.0f64..2.0) {
                let lhs = partial_trace(&(&a * cr(s) + &b), 2, 2, &[2]).unwrap();
                let rhs = partial_trace(&a, 2, 2, &[2]).unwrap() * cr(s)
                    + partial_trace(&b, 2, 2, &[2]).unwrap();
                prop_assert!(frobenius_norm(&(lhs - rhs)) <= 1e-12);
            }

            #[test]
            fn projection_is_idempotent(a in small_cmat(3)) {
                if let Ok(p) = project_to_density(&a) {
                    let again = project_to_density(p.matrix()).unwrap();
                    prop_assert!(frobenius_norm(&(again.matrix() - p.matrix())) <= 1e-12);
                }
            }
        }
    }
}
