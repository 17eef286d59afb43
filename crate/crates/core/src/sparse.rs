//! Sparse CSR matrices and the iterative solvers used by the Newton and
//! Green's-function paths: conjugate gradients for the symmetric
//! divergence-form systems, BiCGStab for the nonsymmetric Newton systems,
//! both with ILU(0)/IC(0) or Jacobi preconditioning.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub data: Vec<f64>,
}

/// Accumulates (row, col, value) triplets; duplicates are summed.
#[derive(Debug)]
pub struct TripletBuilder {
    n: usize,
    rows: Vec<Vec<(u32, f64)>>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        TripletBuilder { n, rows: vec![Vec::new(); n] }
    }

    #[inline]
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.n && c < self.n);
        self.rows[r].push((c as u32, v));
    }

    pub fn build(mut self) -> CsrMatrix {
        let mut indptr = Vec::with_capacity(self.n + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in &mut self.rows {
            // stable sort: duplicate entries must keep their push order so
            // that symmetric pushes accumulate bit-identically in both rows
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = row[i].1;
                let mut j = i + 1;
                while j < row.len() && row[j].0 == c {
                    v += row[j].1;
                    j += 1;
                }
                indices.push(c);
                data.push(v);
                i = j;
            }
            indptr.push(indices.len());
        }
        CsrMatrix { n: self.n, indptr, indices, data }
    }
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut s = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                s += self.data[k] * x[self.indices[k] as usize];
            }
            y[r] = s;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        for k in self.indptr[r]..self.indptr[r + 1] {
            if self.indices[k] as usize == c {
                return self.data[k];
            }
        }
        0.0
    }

    /// Maximum asymmetry |A - A^T| over stored entries (diagnostic).
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k] as usize;
                if c > r {
                    worst = worst.max((self.data[k] - self.get(c, r)).abs());
                }
            }
        }
        worst
    }
}

pub trait Preconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct Identity;

impl Preconditioner for Identity {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &CsrMatrix) -> Self {
        let inv_diag = (0..a.n)
            .map(|r| {
                let d = a.get(r, r);
                if d.abs() > 1e-300 { 1.0 / d } else { 1.0 }
            })
            .collect();
        Jacobi { inv_diag }
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for i in 0..r.len() {
            z[i] = r[i] * self.inv_diag[i];
        }
    }
}

/// ILU(0): incomplete LU on the sparsity pattern of A. For symmetric
/// positive-definite input this coincides with an IC(0)-style factorization
/// (L D L^T on the pattern), so the same code preconditions CG.
pub struct Ilu0 {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    data: Vec<f64>,
    diag_ptr: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let n = a.n;
        let indptr = a.indptr.clone();
        let indices = a.indices.clone();
        let mut data = a.data.clone();
        let mut diag_ptr = vec![usize::MAX; n];
        for r in 0..n {
            for k in indptr[r]..indptr[r + 1] {
                if indices[k] as usize == r {
                    diag_ptr[r] = k;
                }
            }
            if diag_ptr[r] == usize::MAX {
                return Err(Error::Assembly(format!("ILU(0): missing diagonal in row {r}")));
            }
        }
        // IKJ factorization restricted to the pattern
        let mut colmap: Vec<usize> = vec![usize::MAX; n];
        for i in 0..n {
            for k in indptr[i]..indptr[i + 1] {
                colmap[indices[k] as usize] = k;
            }
            let row_start = indptr[i];
            let row_end = indptr[i + 1];
            let mut k = row_start;
            while k < row_end {
                let j = indices[k] as usize;
                if j >= i {
                    break;
                }
                let piv = data[diag_ptr[j]];
                let piv = if piv.abs() < 1e-300 { 1e-300f64.copysign(piv + 1e-300) } else { piv };
                let lij = data[k] / piv;
                data[k] = lij;
                for kk in diag_ptr[j] + 1..indptr[j + 1] {
                    let jj = indices[kk] as usize;
                    let slot = colmap[jj];
                    if slot != usize::MAX {
                        data[slot] -= lij * data[kk];
                    }
                }
                k += 1;
            }
            // safeguard a vanishing pivot
            let d = data[diag_ptr[i]];
            if d.abs() < 1e-300 {
                data[diag_ptr[i]] = 1e-12;
            }
            for k in indptr[i]..indptr[i + 1] {
                colmap[indices[k] as usize] = usize::MAX;
            }
        }
        Ok(Ilu0 { n, indptr, indices, data, diag_ptr })
    }
}

impl Preconditioner for Ilu0 {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        // forward: L y = r (unit lower triangle)
        for i in 0..self.n {
            let mut s = r[i];
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k] as usize;
                if j >= i {
                    break;
                }
                s -= self.data[k] * z[j];
            }
            z[i] = s;
        }
        // backward: U x = y
        for i in (0..self.n).rev() {
            let mut s = z[i];
            for k in self.diag_ptr[i] + 1..self.indptr[i + 1] {
                s -= self.data[k] * z[self.indices[k] as usize];
            }
            z[i] = s / self.data[self.diag_ptr[i]];
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients for symmetric positive-definite systems.
pub fn cg(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol_rel: f64,
    max_iter: usize,
    precond: &dyn Preconditioner,
) -> Result<SolveStats> {
    let n = a.n;
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(SolveStats { iterations: 0, rel_residual: 0.0, converged: true });
    }
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    for it in 0..max_iter {
        if res <= tol_rel {
            return Ok(SolveStats { iterations: it, rel_residual: res, converged: true });
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::SolverFailure {
                msg: format!("CG: operator not positive definite (p^T A p = {pap:.3e})"),
                residual: res,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm(&r) / bnorm;
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= tol_rel {
        Ok(SolveStats { iterations: max_iter, rel_residual: res, converged: true })
    } else {
        Err(Error::SolverFailure {
            msg: format!("CG stagnated after {max_iter} iterations"),
            residual: res,
        })
    }
}

/// BiCGStab for general (nonsymmetric) systems.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol_rel: f64,
    max_iter: usize,
    precond: &dyn Preconditioner,
) -> Result<SolveStats> {
    let n = a.n;
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(SolveStats { iterations: 0, rel_residual: 0.0, converged: true });
    }
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    for it in 0..max_iter {
        if res <= tol_rel {
            return Ok(SolveStats { iterations: it, rel_residual: res, converged: true });
        }
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-300 {
            return Err(Error::SolverFailure {
                msg: "BiCGStab breakdown (rho = 0)".into(),
                residual: res,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond.apply(&p, &mut phat);
        a.matvec(&phat, &mut v);
        alpha = rho / dot(&r0, &v);
        let mut s = r.clone();
        for i in 0..n {
            s[i] -= alpha * v[i];
        }
        if norm(&s) / bnorm <= tol_rel {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok(SolveStats {
                iterations: it + 1,
                rel_residual: norm(&s) / bnorm,
                converged: true,
            });
        }
        precond.apply(&s, &mut shat);
        a.matvec(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt.abs() < 1e-300 {
            return Err(Error::SolverFailure {
                msg: "BiCGStab breakdown (t = 0)".into(),
                residual: res,
            });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / bnorm;
        if omega.abs() < 1e-300 {
            return Err(Error::SolverFailure {
                msg: "BiCGStab breakdown (omega = 0)".into(),
                residual: res,
            });
        }
    }
    if res <= tol_rel {
        Ok(SolveStats { iterations: max_iter, rel_residual: res, converged: true })
    } else {
        Err(Error::SolverFailure {
            msg: format!("BiCGStab stagnated after {max_iter} iterations"),
            residual: res,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let mut t = TripletBuilder::new(n);
        for i in 0..n {
            t.push(i, i, 2.0);
            if i > 0 {
                t.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                t.push(i, i + 1, -1.0);
            }
        }
        t.build()
    }

    #[test]
    fn triplets_merge_duplicates() {
        let mut t = TripletBuilder::new(2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.5);
        t.push(0, 1, -1.0);
        t.push(1, 1, 4.0);
        let a = t.build();
        assert_eq!(a.nnz(), 3);
        assert_relative_eq!(a.get(0, 0), 3.5);
    }

    #[test]
    fn cg_solves_spd_system() {
        let n = 200;
        let a = laplacian_1d(n);
        let xtrue: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&xtrue, &mut b);
        for precond in [true, false] {
            let mut x = vec![0.0; n];
            let stats = if precond {
                let ilu = Ilu0::new(&a).unwrap();
                cg(&a, &b, &mut x, 1e-12, 1000, &ilu).unwrap()
            } else {
                cg(&a, &b, &mut x, 1e-12, 10000, &Jacobi::new(&a)).unwrap()
            };
            assert!(stats.converged);
            for i in 0..n {
                assert_relative_eq!(x[i], xtrue[i], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn ilu_cuts_cg_iterations() {
        let n = 400;
        let a = laplacian_1d(n);
        let b = vec![1.0; n];
        let mut x1 = vec![0.0; n];
        let s_jac = cg(&a, &b, &mut x1, 1e-10, 100000, &Jacobi::new(&a)).unwrap();
        let mut x2 = vec![0.0; n];
        let ilu = Ilu0::new(&a).unwrap();
        let s_ilu = cg(&a, &b, &mut x2, 1e-10, 100000, &ilu).unwrap();
        assert!(s_ilu.iterations < s_jac.iterations);
        for i in 0..n {
            assert_relative_eq!(x1[i], x2[i], epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric_system() {
        // 1D convection-diffusion: -u'' + 40 u' upwind-ish
        let n = 300;
        let mut t = TripletBuilder::new(n);
        let c = 0.4;
        for i in 0..n {
            t.push(i, i, 2.0 + c);
            if i > 0 {
                t.push(i, i - 1, -1.0 - c);
            }
            if i + 1 < n {
                t.push(i, i + 1, -1.0);
            }
        }
        let a = t.build();
        let xtrue: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
        let mut b = vec![0.0; n];
        a.matvec(&xtrue, &mut b);
        let ilu = Ilu0::new(&a).unwrap();
        let mut x = vec![0.0; n];
        let stats = bicgstab(&a, &b, &mut x, 1e-12, 2000, &ilu).unwrap();
        assert!(stats.converged);
        for i in 0..n {
            assert_relative_eq!(x[i], xtrue[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn cg_rejects_indefinite_operator() {
        let mut t = TripletBuilder::new(2);
        t.push(0, 0, 1.0);
        t.push(1, 1, -1.0);
        let a = t.build();
        let b = vec![0.0, 1.0];
        let mut x = vec![0.0; 2];
        assert!(matches!(
            cg(&a, &b, &mut x, 1e-12, 10, &Identity),
            Err(Error::SolverFailure { .. })
        ));
    }
}
