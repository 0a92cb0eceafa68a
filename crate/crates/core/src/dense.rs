//! Small dense complex linear algebra on top of `faer`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};
use num_complex::Complex64;

use crate::error::{DemixError, Result};

pub type CMat = Mat<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Eigenvalues (ascending) of a Hermitian matrix; only the lower triangle is read.
pub fn hermitian_eigenvalues(a: MatRef<'_, Complex64>) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| DemixError::Numerical(format!("eigenvalue iteration failed: {e:?}")))
}

pub fn min_eigenvalue(a: MatRef<'_, Complex64>) -> Result<f64> {
    Ok(hermitian_eigenvalues(a)?.first().copied().unwrap_or(0.0))
}

/// Projects a Hermitian matrix onto the PSD cone by clipping negative
/// eigenvalues. Writes the result into `out`.
pub fn project_psd(a: MatRef<'_, Complex64>, out: &mut CMat) -> Result<()> {
    let n = a.nrows();
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| DemixError::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let first_pos = (0..n).find(|&i| s[i].re > 0.0).unwrap_or(n);
    let rank = n - first_pos;
    if rank == 0 {
        out.fill(ZERO);
        return Ok(());
    }
    let mut b = Mat::<Complex64>::zeros(n, rank);
    for j in 0..rank {
        let w = s[first_pos + j].re.sqrt();
        for i in 0..n {
            b[(i, j)] = u[(i, first_pos + j)] * w;
        }
    }
    *out = &b * b.adjoint();
    Ok(())
}

/// Singular values, descending.
pub fn singular_values(a: MatRef<'_, Complex64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    a.singular_values()
        .map_err(|e| DemixError::Numerical(format!("SVD failed: {e:?}")))
}

/// Spectral norm by SVD.
pub fn spectral_norm(a: MatRef<'_, Complex64>) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Spectral norm by power iteration on `A*A`.
pub fn spectral_norm_power(a: MatRef<'_, Complex64>, max_iters: usize, rel_tol: f64) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // Fixed, non-symmetric start vector keeps the result reproducible and
    // avoids starting orthogonal to the top singular vector on structured inputs.
    let mut v = Mat::<Complex64>::from_fn(n, 1, |i, _| {
        Complex64::new(1.0 + 0.1 * i as f64, 0.05 * (i % 3) as f64)
    });
    let nv = v.norm_l2();
    v /= faer::Scale(Complex64::from(nv));
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let w = a.adjoint() * (a * &v);
        let nw = w.norm_l2();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw;
        v = w / faer::Scale(Complex64::from(nw));
        let done = (next - lambda).abs() <= rel_tol * next;
        lambda = next;
        if done {
            break;
        }
    }
    lambda.sqrt()
}

/// Solution of a square system with diagnostics.
#[derive(Debug, Clone)]
pub struct LinearSolve {
    pub x: Vec<Complex64>,
    pub condition: f64,
    pub relative_residual: f64,
    pub refined: bool,
}

pub const SINGULAR_CONDITION: f64 = 1e12;
pub const REFINE_CONDITION: f64 = 1e8;

/// Solves `A x = b` by LU with partial pivoting; one step of iterative
/// refinement when the 2-norm condition number exceeds 1e8. Returns `None`
/// when the condition number exceeds 1e12.
pub fn solve_square(a: MatRef<'_, Complex64>, b: &[Complex64]) -> Result<Option<LinearSolve>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(DemixError::Shape(format!(
            "system is {}x{} with right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if n == 0 {
        return Ok(Some(LinearSolve {
            x: Vec::new(),
            condition: 1.0,
            relative_residual: 0.0,
            refined: false,
        }));
    }
    let sv = singular_values(a)?;
    let smin = *sv.last().unwrap();
    let condition = if smin > 0.0 { sv[0] / smin } else { f64::INFINITY };
    if !(condition <= SINGULAR_CONDITION) {
        return Ok(None);
    }
    let lu = a.partial_piv_lu();
    let rhs = Mat::<Complex64>::from_fn(n, 1, |i, _| b[i]);
    let mut x = lu.solve(&rhs);
    let refined = condition > REFINE_CONDITION;
    if refined {
        let r = &rhs - a * &x;
        x += lu.solve(&r);
    }
    let r = &rhs - a * &x;
    let bn = rhs.norm_l2();
    let relative_residual = if bn > 0.0 { r.norm_l2() / bn } else { r.norm_l2() };
    Ok(Some(LinearSolve {
        x: (0..n).map(|i| x[(i, 0)]).collect(),
        condition,
        relative_residual,
        refined,
    }))
}

/// Inverse of a square matrix through its LU factors.
pub fn inverse(a: MatRef<'_, Complex64>) -> CMat {
    a.partial_piv_lu().inverse()
}

/// Minimum-norm least-squares solution via the SVD. Returns the solution and
/// the numerical rank (singular values above `rcond * σ_max`).
pub fn lstsq_min_norm(a: MatRef<'_, Complex64>, b: &[Complex64], rcond: f64) -> Result<(Vec<Complex64>, usize)> {
    let (m, n) = (a.nrows(), a.ncols());
    if b.len() != m {
        return Err(DemixError::Shape(format!(
            "design is {m}x{n} with right-hand side of length {}",
            b.len()
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), 0));
    }
    let svd = a
        .thin_svd()
        .map_err(|e| DemixError::Numerical(format!("SVD failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let k = s.nrows();
    let smax = if k > 0 { s[0].re } else { 0.0 };
    let cutoff = rcond * smax;
    let u = svd.U();
    let v = svd.V();
    let mut x = vec![ZERO; n];
    let mut rank = 0;
    for j in 0..k {
        let sj = s[j].re;
        if sj <= cutoff || sj == 0.0 {
            continue;
        }
        rank += 1;
        let mut coef = ZERO;
        for i in 0..m {
            coef += u[(i, j)].conj() * b[i];
        }
        coef /= sj;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += v[(i, j)] * coef;
        }
    }
    Ok((x, rank))
}
