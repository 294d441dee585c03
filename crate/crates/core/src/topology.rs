//! Mixing matrices for the consensus step and their ADMM-based design.
//!
//! A valid mixing matrix `C` is symmetric, has unit row sums, and contracts
//! the disagreement subspace: `rho(C - 11^T/m) <= 1 - gamma < 1`. The ADMM
//! designer searches that set for the matrix whose entries on agent pairs
//! without shared data edges have minimal l1 mass.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::comm::CommGraph;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-10;

/// Forbidden entries whose magnitude is at most this are set to exactly zero.
pub const ZERO_SNAP: f64 = 1e-8;

/// A combination matrix over `m` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    /// `1 - rho(C - 11^T/m)`.
    gamma: f64,
}

impl MixingMatrix {
    /// Wraps a dense matrix after checking symmetry and unit row sums.
    /// Connectivity is not required here; see [`MixingMatrix::check_contraction`].
    pub fn from_dense(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::dim(
                "mixing matrix",
                "non-empty square",
                format!("{}x{}", entries.nrows(), entries.ncols()),
            ));
        }
        let radius = deflated_spectral_radius(&entries)?;
        let m = entries.nrows();
        for k in 0..m {
            let s = entries.row(k).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::param(format!(
                    "mixing matrix row {k} sums to {s}, expected 1"
                )));
            }
        }
        Ok(MixingMatrix {
            entries,
            gamma: 1.0 - radius,
        })
    }

    /// `11^T / m`, the exact averaging projector.
    pub fn uniform(m: usize) -> Self {
        MixingMatrix {
            entries: DMatrix::from_element(m, m, 1.0 / m as f64),
            gamma: 1.0,
        }
    }

    /// `I`: no mixing at all.
    pub fn identity(m: usize) -> Self {
        MixingMatrix {
            entries: DMatrix::identity(m, m),
            gamma: if m == 1 { 1.0 } else { 0.0 },
        }
    }

    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, k: usize, z: usize) -> f64 {
        self.entries[(k, z)]
    }

    /// `1 - rho(C - 11^T/m)`.
    pub fn spectral_gap(&self) -> f64 {
        self.gamma
    }

    /// Off-diagonal pairs with a nonzero weight.
    pub fn comm_edges(&self) -> CommGraph {
        let m = self.m();
        let mut g = CommGraph::empty(m);
        for k in 0..m {
            for z in k + 1..m {
                if self.entries[(k, z)] != 0.0 || self.entries[(z, k)] != 0.0 {
                    g.insert(k, z);
                }
            }
        }
        g
    }

    /// Errors unless the disagreement component strictly contracts.
    pub fn check_contraction(&self) -> Result<()> {
        if self.m() > 1 && self.gamma <= 1e-12 {
            return Err(Error::Disconnected(self.comm_edges().components()));
        }
        Ok(())
    }

    /// Fraction of exactly-zero entries.
    pub fn sparsity(&self) -> f64 {
        let zeros = self.entries.iter().filter(|v| **v == 0.0).count();
        zeros as f64 / self.entries.len() as f64
    }

    pub fn to_csv(&self) -> String {
        dense_to_csv(&self.entries)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MixingMatrix::from_dense(parse_dense_csv(&text, path)?)
    }
}

/// Dense CSV, 17 significant digits per value.
pub fn dense_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{:.16e}", m[(r, c)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_dense_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.into(),
                    line: ln + 1,
                    msg: format!("not a number: {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: ln + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let (r, c) = (rows.len(), rows.first().map_or(0, Vec::len));
    Ok(DMatrix::from_row_iterator(r, c, rows.into_iter().flatten()))
}

/// Reads a 0/1 forbidden matrix.
pub fn read_forbidden_csv(path: &Path) -> Result<Vec<Vec<bool>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dense = parse_dense_csv(&text, path)?;
    let mut out = vec![vec![false; dense.ncols()]; dense.nrows()];
    for r in 0..dense.nrows() {
        for c in 0..dense.ncols() {
            out[r][c] = match dense[(r, c)] {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                v => {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: r + 1,
                        msg: format!("forbidden matrix entries must be 0 or 1, found {v}"),
                    })
                }
            };
        }
    }
    Ok(out)
}

pub fn forbidden_to_csv(a: &[Vec<bool>]) -> String {
    a.iter()
        .map(|row| {
            row.iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect()
}

/// Metropolis-Hastings weights on a connected agent graph.
pub fn metropolis_weights(comm: &CommGraph) -> Result<MixingMatrix> {
    let m = comm.m();
    if m == 0 {
        return Err(Error::param("need at least one agent"));
    }
    if !comm.is_connected() {
        return Err(Error::Disconnected(comm.components()));
    }
    let deg = comm.degrees();
    let mut c = DMatrix::zeros(m, m);
    for (k, z) in comm.links() {
        let w = 1.0 / (1 + deg[k].max(deg[z])) as f64;
        c[(k, z)] = w;
        c[(z, k)] = w;
    }
    for k in 0..m {
        let off: f64 = (0..m).filter(|&z| z != k).map(|z| c[(k, z)]).sum();
        c[(k, k)] = 1.0 - off;
    }
    MixingMatrix::from_dense(c)
}

fn averaging_projector(m: usize) -> DMatrix<f64> {
    DMatrix::from_element(m, m, 1.0 / m as f64)
}

/// `(I - 11^T/m) sym(x) (I - 11^T/m)`.
fn deflate(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.nrows();
    let q = DMatrix::identity(m, m) - averaging_projector(m);
    let sym = (x + x.transpose()) * 0.5;
    let d = &q * sym * &q;
    (&d + d.transpose()) * 0.5
}

/// `rho(C - 11^T/m)` for a symmetric `C`.
pub fn deflated_spectral_radius(c: &DMatrix<f64>) -> Result<f64> {
    if !c.is_square() {
        return Err(Error::dim(
            "spectral radius",
            "square matrix",
            format!("{}x{}", c.nrows(), c.ncols()),
        ));
    }
    let asym = (c - c.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let m = c.nrows();
    let shifted = (c + c.transpose()) * 0.5 - averaging_projector(m);
    let eig = SymmetricEigen::new(shifted);
    Ok(eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
}

/// Euclidean projection onto `{C = C^T, C1 = 1, rho(C - 11^T/m) <= 1 - gamma}`.
pub fn project_feasible(x: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if !x.is_square() {
        return Err(Error::dim(
            "projection",
            "square matrix",
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    let m = x.nrows();
    let bound = 1.0 - gamma;
    let eig = SymmetricEigen::new(deflate(x));
    let mut out = averaging_projector(m);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let beta = lambda.clamp(-bound, bound);
        if beta == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        out += beta * v * v.transpose();
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// `sign(x) max(|x| - eps, 0)`.
pub fn soft_threshold(x: f64, eps: f64) -> f64 {
    x.signum() * (x.abs() - eps).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmOptions {
    pub gamma: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        AdmmOptions {
            gamma: 0.5,
            rho: 1.0,
            max_iter: 5000,
            tol: 1e-8,
        }
    }
}

/// Iterates and residual history of one ADMM solve.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub c: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    /// `(||C - Z||_F, ||Z - Z_prev||_F)` per iteration.
    pub history: Vec<(f64, f64)>,
}

/// Output of [`design_mixing_admm`].
#[derive(Debug, Clone)]
pub struct AdmmDesign {
    pub mixing: MixingMatrix,
    pub state: AdmmState,
    /// Forbidden pairs `k < z` that still carry weight above [`ZERO_SNAP`].
    pub unneeded_links: Vec<(usize, usize)>,
    /// Forbidden entries that were snapped from a tiny nonzero to zero.
    pub snapped: usize,
    /// `||C||_1` restricted to forbidden entries.
    pub objective: f64,
}

fn validate_forbidden(a: &[Vec<bool>]) -> Result<usize> {
    let m = a.len();
    if m == 0 {
        return Err(Error::param("forbidden matrix is empty"));
    }
    for (k, row) in a.iter().enumerate() {
        if row.len() != m {
            return Err(Error::dim("forbidden matrix row", m, row.len()));
        }
        if row[k] {
            return Err(Error::param(format!("forbidden matrix has a 1 on diagonal entry {k}")));
        }
        for z in 0..m {
            if row[z] != a[z][k] {
                return Err(Error::param(format!(
                    "forbidden matrix is not symmetric at ({k}, {z})"
                )));
            }
        }
    }
    Ok(m)
}

/// Projection onto `{Y = Y^T, Y1 = 1, Y_kz = 0 on `zero` entries}`.
///
/// The minimizer is `Y = X + mask .* (l 1^T + 1 l^T)` with `l` solving
/// `(diag(mask 1) + mask) l = 1 - X 1` (for symmetric `X` with zeros already set).
fn project_pattern(x: &DMatrix<f64>, zero: &[Vec<bool>]) -> DMatrix<f64> {
    let m = x.nrows();
    let mut y = (x + x.transpose()) * 0.5;
    let mut mask = DMatrix::from_element(m, m, 1.0);
    for k in 0..m {
        for z in 0..m {
            if zero[k][z] {
                y[(k, z)] = 0.0;
                mask[(k, z)] = 0.0;
            }
        }
    }
    let mut system = mask.clone();
    let mut rhs = nalgebra::DVector::zeros(m);
    for k in 0..m {
        system[(k, k)] += mask.row(k).sum();
        rhs[k] = 1.0 - y.row(k).sum();
    }
    let lambda = system
        .cholesky()
        .expect("pattern system is positive definite because the diagonal is free")
        .solve(&rhs);
    for k in 0..m {
        for z in 0..m {
            y[(k, z)] += mask[(k, z)] * (lambda[k] + lambda[z]);
        }
    }
    y
}

/// Scaled-form ADMM for `min ||C .* A||_1` over the feasible mixing set.
///
/// Starts from `Z = 11^T/m`, `U = 0`. After the loop the forbidden entries
/// of `Z` below [`ZERO_SNAP`] are set to zero and the result is pulled back
/// onto the feasible set by alternating projections that keep those zeros.
pub fn design_mixing_admm(forbidden: &[Vec<bool>], opts: AdmmOptions) -> Result<AdmmDesign> {
    let m = validate_forbidden(forbidden)?;
    if !(opts.gamma > 0.0 && opts.gamma < 1.0) {
        return Err(Error::param(format!("gamma must lie in (0, 1), got {}", opts.gamma)));
    }
    if !(opts.rho > 0.0) {
        return Err(Error::param(format!("rho must be positive, got {}", opts.rho)));
    }
    let threshold = 1.0 / opts.rho;
    let mut z = averaging_projector(m);
    let mut u = DMatrix::zeros(m, m);
    let mut c = z.clone();
    let mut history = Vec::new();
    let mut converged = false;
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut iteration = 0;
    while iteration < opts.max_iter {
        iteration += 1;
        c = project_feasible(&(&z - &u), opts.gamma)?;
        let v = &c + &u;
        let mut z_next = v.clone();
        for k in 0..m {
            for j in 0..m {
                if forbidden[k][j] {
                    z_next[(k, j)] = soft_threshold(v[(k, j)], threshold);
                }
            }
        }
        u += &c - &z_next;
        primal = (&c - &z_next).norm();
        dual = (&z_next - &z).norm();
        z = z_next;
        history.push((primal, dual));
        if primal.max(dual) <= opts.tol {
            converged = true;
            break;
        }
    }

    let mut zero = vec![vec![false; m]; m];
    let mut snapped = 0;
    for k in 0..m {
        for j in 0..m {
            if forbidden[k][j] && z[(k, j)].abs().max(z[(j, k)].abs()) <= ZERO_SNAP {
                zero[k][j] = true;
                if z[(k, j)] != 0.0 {
                    snapped += 1;
                }
            }
        }
    }
    let polished = polish(&z, &zero, opts.gamma)?;
    let mixing = MixingMatrix::from_dense(polished)?;
    mixing.check_contraction()?;

    let mut unneeded_links = Vec::new();
    let mut objective = 0.0;
    for k in 0..m {
        for j in 0..m {
            if forbidden[k][j] {
                objective += mixing.get(k, j).abs();
                if j > k && mixing.get(k, j).abs() > ZERO_SNAP {
                    unneeded_links.push((k, j));
                }
            }
        }
    }
    Ok(AdmmDesign {
        mixing,
        state: AdmmState {
            c,
            z,
            u,
            rho: opts.rho,
            gamma: opts.gamma,
            iteration,
            primal_residual: primal,
            dual_residual: dual,
            converged,
            history,
        },
        unneeded_links,
        snapped,
        objective,
    })
}

/// Alternates between the spectral set and the zero-pattern affine set,
/// ending on the affine set so zeros, symmetry and row sums are exact.
fn polish(start: &DMatrix<f64>, zero: &[Vec<bool>], gamma: f64) -> Result<DMatrix<f64>> {
    let bound = 1.0 - gamma;
    let mut y = project_pattern(start, zero);
    for _ in 0..20_000 {
        let radius = deflated_spectral_radius(&y)?;
        if radius <= bound + 1e-12 {
            break;
        }
        let next = project_pattern(&project_feasible(&y, gamma)?, zero);
        let step = (&next - &y).norm();
        y = next;
        if step < 1e-15 {
            break;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn metropolis_line_of_three() {
        let c = metropolis_weights(&CommGraph::line(3)).unwrap();
        let third = 1.0 / 3.0;
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[2.0 * third, third, 0.0, third, third, third, 0.0, third, 2.0 * third],
        );
        assert!(close(c.entries(), &expected, 1e-15));
        let radius = deflated_spectral_radius(c.entries()).unwrap();
        assert!(radius > 0.0 && radius < 1.0);
        // eigenvalues of this matrix are 1, 2/3 and 0
        assert!((radius - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metropolis_trivial_and_complete() {
        let one = metropolis_weights(&CommGraph::empty(1)).unwrap();
        assert_eq!(one.entries(), &DMatrix::from_element(1, 1, 1.0));
        let c = metropolis_weights(&CommGraph::complete(5)).unwrap();
        assert!(close(c.entries(), &DMatrix::from_element(5, 5, 0.2), 1e-15));
    }

    #[test]
    fn metropolis_rejects_disconnected() {
        let g = CommGraph::from_pairs(4, [(0, 1), (2, 3)]).unwrap();
        match metropolis_weights(&g) {
            Err(Error::Disconnected(parts)) => assert_eq!(parts, vec![vec![0, 1], vec![2, 3]]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn radius_of_projector_and_identity() {
        assert!(deflated_spectral_radius(&averaging_projector(4)).unwrap() < 1e-15);
        let r = deflated_spectral_radius(&DMatrix::identity(2, 2)).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        let asym = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.4, 0.5]);
        assert!(matches!(deflated_spectral_radius(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn projection_examples() {
        let p = project_feasible(&DMatrix::zeros(3, 3), 0.5).unwrap();
        assert!(close(&p, &averaging_projector(3), 1e-15));
        let p = project_feasible(&DMatrix::identity(2, 2), 0.5).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]);
        assert!(close(&p, &expected, 1e-12));
        let feasible = metropolis_weights(&CommGraph::line(3)).unwrap();
        let p = project_feasible(feasible.entries(), 0.2).unwrap();
        assert!(close(&p, feasible.entries(), 1e-10));
        assert!(project_feasible(&DMatrix::zeros(2, 2), 1.0).is_err());
        assert!(project_feasible(&DMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn soft_threshold_values() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-0.3, 0.0), -0.3);
        assert_eq!(soft_threshold(4.0, 0.0), 4.0);
    }

    #[test]
    fn pattern_projection_keeps_zeros_and_sums() {
        let x = DMatrix::from_row_slice(3, 3, &[0.2, 0.9, 0.3, 0.9, -0.1, 0.4, 0.3, 0.4, 0.8]);
        let zero = vec![
            vec![false, false, true],
            vec![false, false, false],
            vec![true, false, false],
        ];
        let y = project_pattern(&x, &zero);
        assert_eq!(y[(0, 2)], 0.0);
        assert_eq!(y[(2, 0)], 0.0);
        for k in 0..3 {
            assert!((y.row(k).sum() - 1.0).abs() < 1e-14);
        }
        assert!(close(&y, &y.transpose(), 0.0));
    }

    #[test]
    fn admm_without_forbidden_links_is_feasible() {
        let a = vec![vec![false; 4]; 4];
        let d = design_mixing_admm(&a, AdmmOptions::default()).unwrap();
        assert!(deflated_spectral_radius(d.mixing.entries()).unwrap() <= 0.5 + 1e-8);
        assert_eq!(d.objective, 0.0);
        assert!(d.unneeded_links.is_empty());
    }

    #[test]
    fn admm_rejects_bad_inputs() {
        let a = vec![vec![true, false], vec![false, false]];
        assert!(design_mixing_admm(&a, AdmmOptions::default()).is_err());
        let a = vec![vec![false; 2]; 2];
        let bad = AdmmOptions {
            rho: 0.0,
            ..Default::default()
        };
        assert!(design_mixing_admm(&a, bad).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let c = metropolis_weights(&CommGraph::ring(5)).unwrap();
        let parsed = parse_dense_csv(&c.to_csv(), Path::new("mem")).unwrap();
        assert_eq!(&parsed, c.entries());
        assert!(c.to_csv().lines().next().unwrap().split(',').count() == 5);
    }
}
