//! Dense LU factorization with partial pivoting, kept small so the solve
//! node can reuse the factors for the transpose solve in the backward pass.

use super::DiffError;

const PIVOT_TOL: f64 = 1e-12;

/// Packed LU factors of a square matrix: `P·A = L·U` with unit-diagonal `L`.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    /// L below the diagonal, U on and above it.
    lu: Vec<f64>,
    /// Row permutation: `perm[i]` is the original row now in position i.
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &[f64], n: usize) -> Result<Self, DiffError> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best < PIVOT_TOL {
                return Err(DiffError::SingularSystem {
                    index: k,
                    pivot: best,
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let diag = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / diag;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Ok(LuFactors { n, lu, perm })
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    /// Solves `Aᵀ y = g` using the same factors: `Aᵀ = Uᵀ Lᵀ P`.
    pub fn solve_transpose(&self, g: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = g.to_vec();
        // Uᵀ is lower triangular: forward substitution.
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[j * n + i] * y[j];
            }
            y[i] = s / self.lu[i * n + i];
        }
        // Lᵀ is unit upper triangular: back substitution.
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.lu[j * n + i] * y[j];
            }
            y[i] = s;
        }
        // Undo the row permutation: x = Pᵀ... A = Pᵀ L U, so Aᵀ y = Uᵀ Lᵀ P y.
        let mut out = vec![0.0; n];
        for (i, &pi) in self.perm.iter().enumerate() {
            out[pi] = y[i];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(a: &[f64], x: &[f64], b: &[f64], n: usize) -> f64 {
        (0..n)
            .map(|i| {
                let ax: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum();
                (ax - b[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn solves_random_spd() {
        // Fixed SPD-ish system with a known solution.
        let n = 4;
        let a = vec![
            4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.2, 0.1, 0.5, 0.2, 5.0, 0.3, 0.0, 0.1, 0.3, 2.0,
        ];
        let b = vec![1.0, -2.0, 3.0, 0.5];
        let lu = LuFactors::factor(&a, n).unwrap();
        let x = lu.solve(&b);
        assert!(residual(&a, &x, &b, n) < 1e-12);

        let g = vec![0.3, 0.7, -1.1, 2.0];
        let y = lu.solve_transpose(&g);
        // Aᵀ y should equal g.
        let at: Vec<f64> = (0..n * n).map(|k| a[(k % n) * n + k / n]).collect();
        assert!(residual(&at, &y, &g, n) < 1e-12);
    }

    #[test]
    fn singular_reports_pivot_index() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        match LuFactors::factor(&a, 2) {
            Err(DiffError::SingularSystem { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular system, got {other:?}"),
        }
    }
}
