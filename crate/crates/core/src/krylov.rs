//! Restarted GMRES with optional Jacobi preconditioning.
//!
//! The solver runs unchanged in serial and slab-distributed settings: all
//! inner products and norms go through [`SolverComm::global_sum`] and every
//! matrix-vector product is preceded by [`SolverComm::refresh_halo`], so
//! both paths evaluate the same mathematical quantities. Vectors are laid
//! out as `[owned rows..., lower halo plane, upper halo plane]`; dot
//! products run over owned rows only.
//!
//! Arnoldi uses modified Gram-Schmidt; the least-squares problem is kept
//! triangular with Givens rotations. Convergence is declared on the true
//! residual `||b - A x||` recomputed from scratch at restart boundaries,
//! never on the recurrence estimate alone.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fvm::LinearSystem;
use crate::partition::CommError;

#[derive(Debug, Error)]
pub enum KrylovError {
    #[error("GMRES hit max_iters={iterations} with relative residual {relative_residual:.3e}")]
    SolverDiverged {
        iterations: usize,
        relative_residual: f64,
    },
    #[error("zero diagonal entry in row {0}")]
    ZeroDiagonal(usize),
    #[error(transparent)]
    Comm(#[from] CommError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preconditioner {
    None,
    Jacobi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmresConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Krylov subspace size between restarts.
    pub restart: usize,
    pub max_iters: usize,
    pub precondition: Preconditioner,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            restart: 30,
            max_iters: 1000,
            precondition: Preconditioner::None,
        }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rel_tol <= 0.0 || self.abs_tol <= 0.0 {
            return Err("gmres tolerances must be > 0".into());
        }
        if self.restart < 1 || self.max_iters < 1 {
            return Err("gmres restart and max_iters must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// True residual norm over `||b||`, recomputed from scratch.
    pub final_relative_residual: f64,
    pub converged: bool,
    pub wall_time_s: f64,
    /// Recurrence residual estimate after each Arnoldi step, for
    /// monotonicity diagnostics.
    pub residual_history: Vec<f64>,
}

/// Reduction and halo contract the solver runs over.
pub trait SolverComm {
    fn global_sum(&mut self, local: f64) -> Result<f64, CommError>;
    /// Fills the halo slots of an extended vector from the neighbouring
    /// workers' adjacent owned planes.
    fn refresh_halo(&mut self, x: &mut [f64]) -> Result<(), CommError>;
}

/// Single-worker contract: sums are local, there are no halos.
pub struct SerialComm;

impl SolverComm for SerialComm {
    fn global_sum(&mut self, local: f64) -> Result<f64, CommError> {
        Ok(local)
    }
    fn refresh_halo(&mut self, _x: &mut [f64]) -> Result<(), CommError> {
        Ok(())
    }
}

/// `z_i = r_i / a_ii`.
pub fn jacobi_precondition(sys: &LinearSystem, r: &[f64]) -> Result<Vec<f64>, KrylovError> {
    let diag = extract_diagonal(sys)?;
    Ok(r.iter().zip(&diag).map(|(ri, di)| ri / di).collect())
}

fn extract_diagonal(sys: &LinearSystem) -> Result<Vec<f64>, KrylovError> {
    let mut diag = vec![0.0; sys.n_rows];
    for row in 0..sys.n_rows {
        let mut found = false;
        for nz in sys.row_offsets[row]..sys.row_offsets[row + 1] {
            if sys.col_indices[nz] == row {
                diag[row] = sys.values[nz];
                found = true;
                break;
            }
        }
        if !found || diag[row] == 0.0 {
            return Err(KrylovError::ZeroDiagonal(row));
        }
    }
    Ok(diag)
}

fn local_dot(a: &[f64], b: &[f64], n: usize) -> f64 {
    a[..n].iter().zip(&b[..n]).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for the system's right-hand side, starting from `x0`
/// (owned rows only). Returns the owned part of the solution.
pub fn gmres_solve<C: SolverComm>(
    sys: &LinearSystem,
    x0: &[f64],
    cfg: &GmresConfig,
    comm: &mut C,
) -> Result<(Vec<f64>, SolveStats), KrylovError> {
    let start = Instant::now();
    let n = sys.n_rows;
    let nc = sys.n_cols;
    assert_eq!(x0.len(), n, "x0 must be sized to local rows");
    let m = cfg.restart;

    let diag = match cfg.precondition {
        Preconditioner::Jacobi => Some(extract_diagonal(sys)?),
        Preconditioner::None => None,
    };
    let precond = |v: &mut [f64]| {
        if let Some(d) = &diag {
            for i in 0..n {
                v[i] /= d[i];
            }
        }
    };

    let gnorm = |c: &mut C, v: &[f64]| -> Result<f64, KrylovError> {
        Ok(c.global_sum(local_dot(v, v, n))?.sqrt())
    };

    let b_norm = gnorm(comm, &sys.rhs)?;
    let mut zb = sys.rhs.clone();
    precond(&mut zb);
    let mb_norm = gnorm(comm, &zb)?;
    drop(zb);
    let target = f64::max(cfg.rel_tol * b_norm, cfg.abs_tol);
    let est_target = f64::max(cfg.rel_tol * mb_norm, cfg.abs_tol);
    let breakdown_tol = 1e-14 * b_norm;

    let mut x = vec![0.0; nc];
    x[..n].copy_from_slice(x0);
    let mut w = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut hess = vec![vec![0.0; m]; m + 1];
    let mut giv_c = vec![0.0; m];
    let mut giv_s = vec![0.0; m];
    let mut g = vec![0.0; m + 1];

    let mut iterations = 0usize;
    let mut history = Vec::new();
    let rel = |rnorm: f64| if b_norm > 0.0 { rnorm / b_norm } else { rnorm };

    loop {
        // True residual, recomputed from scratch.
        comm.refresh_halo(&mut x)?;
        sys.apply_into(&x, &mut w);
        let mut r = vec![0.0; nc];
        for i in 0..n {
            r[i] = sys.rhs[i] - w[i];
        }
        let true_rnorm = gnorm(comm, &r)?;
        if true_rnorm <= target {
            let stats = SolveStats {
                iterations,
                final_relative_residual: rel(true_rnorm),
                converged: true,
                wall_time_s: start.elapsed().as_secs_f64(),
                residual_history: history,
            };
            x.truncate(n);
            return Ok((x, stats));
        }
        if iterations >= cfg.max_iters {
            return Err(KrylovError::SolverDiverged {
                iterations,
                relative_residual: rel(true_rnorm),
            });
        }

        precond(&mut r);
        let beta = gnorm(comm, &r)?;
        if beta == 0.0 {
            // Preconditioned residual vanished while the true residual did
            // not reach the target; no further progress is possible.
            return Err(KrylovError::SolverDiverged {
                iterations,
                relative_residual: rel(true_rnorm),
            });
        }
        for v in r.iter_mut().take(n) {
            *v /= beta;
        }
        for v in r.iter_mut().skip(n) {
            *v = 0.0;
        }
        basis.clear();
        basis.push(r);
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;

        let mut cols = 0;
        for j in 0..m {
            if iterations >= cfg.max_iters {
                break;
            }
            comm.refresh_halo(&mut basis[j])?;
            sys.apply_into(&basis[j], &mut w);
            precond(&mut w);
            let mut next = vec![0.0; nc];
            next[..n].copy_from_slice(&w);
            // modified Gram-Schmidt
            for i in 0..=j {
                let hij = comm.global_sum(local_dot(&next, &basis[i], n))?;
                hess[i][j] = hij;
                for t in 0..n {
                    next[t] -= hij * basis[i][t];
                }
            }
            let hnext = gnorm(comm, &next)?;
            hess[j + 1][j] = hnext;
            iterations += 1;
            cols = j + 1;

            let happy = hnext < breakdown_tol;
            if !happy {
                for t in next.iter_mut().take(n) {
                    *t /= hnext;
                }
                basis.push(next);
            }

            // fold column j into the triangular factor
            for i in 0..j {
                let a = hess[i][j];
                let b = hess[i + 1][j];
                hess[i][j] = giv_c[i] * a + giv_s[i] * b;
                hess[i + 1][j] = -giv_s[i] * a + giv_c[i] * b;
            }
            let a = hess[j][j];
            let b = hess[j + 1][j];
            let rr = a.hypot(b);
            let (c, s) = if rr == 0.0 {
                (1.0, 0.0)
            } else {
                (a / rr, b / rr)
            };
            giv_c[j] = c;
            giv_s[j] = s;
            hess[j][j] = rr;
            hess[j + 1][j] = 0.0;
            g[j + 1] = -s * g[j];
            g[j] *= c;

            let est = g[j + 1].abs();
            history.push(est);
            if happy || est <= est_target {
                break;
            }
        }

        // y = R^{-1} g, then x += V y (owned rows only)
        let mut y = vec![0.0; cols];
        for i in (0..cols).rev() {
            let mut acc = g[i];
            for j2 in i + 1..cols {
                acc -= hess[i][j2] * y[j2];
            }
            y[i] = acc / hess[i][i];
        }
        for (i, yi) in y.iter().enumerate() {
            for t in 0..n {
                x[t] += yi * basis[i][t];
            }
        }
    }
}
