//! SVD forward factorizations plus the closed-form reverse rules used by the
//! tape. Sign conventions are canonicalized so that the factorization is a
//! locally smooth function of the input, which finite-difference checks rely
//! on.

use nalgebra::DMatrix;

use super::tensor::Tensor;
use super::DiffError;

/// Minimum gap between singular values before eigenvector derivatives blow up.
pub const SPECTRUM_TOL: f64 = 1e-9;

/// Cached factors for the smallest-right-singular-vector op.
#[derive(Clone, Debug)]
pub struct SvdMinCache {
    /// Right singular vectors, n×n, column k is the returned vector.
    pub v: Tensor,
    /// Singular values, descending.
    pub sigma: Vec<f64>,
}

/// Cached factors for the packed 3×3 SVD op.
#[derive(Clone, Debug)]
pub struct Svd3Cache {
    pub u: Tensor,
    pub sigma: [f64; 3],
    pub v: Tensor,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Flips column `j` of `m` in place when its largest-magnitude entry is
/// negative; returns the applied sign.
fn canonical_column_sign(m: &mut DMatrix<f64>, j: usize) -> f64 {
    let col = m.column(j);
    let mut arg = 0;
    let mut best = 0.0;
    for (i, &x) in col.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            arg = i;
        }
    }
    if m[(arg, j)] < 0.0 {
        for i in 0..m.nrows() {
            m[(i, j)] = -m[(i, j)];
        }
        -1.0
    } else {
        1.0
    }
}

/// Full SVD of an m×n matrix (m ≥ n), singular values descending, with the
/// right singular vectors sign-canonicalized (largest entry positive) and the
/// left vectors flipped to match.
pub fn svd_thin(a: &Tensor) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>), DiffError> {
    let m = to_dmatrix(a);
    let svd = m.svd(true, true);
    let mut u = svd.u.ok_or(DiffError::NonFinite { op: "svd" })?;
    let vt = svd.v_t.ok_or(DiffError::NonFinite { op: "svd" })?;
    let mut v = vt.transpose();
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(DiffError::NonFinite { op: "svd" });
    }
    for j in 0..v.ncols() {
        let s = canonical_column_sign(&mut v, j);
        if s < 0.0 && j < u.ncols() {
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
    Ok((u, sigma, v))
}

/// Sharpens the smallest right singular vector by Rayleigh-quotient inverse
/// iteration on the Gram matrix. The SVD alone leaves an error of order
/// ε·σ₁/gap, which is too coarse for the noise-free epipolar checks.
fn refine_min_vector(a: &DMatrix<f64>, v: &mut nalgebra::DVector<f64>) {
    let gram = a.transpose() * a;
    for _ in 0..2 {
        let lambda = (v.transpose() * &gram * &*v)[(0, 0)];
        let n = gram.nrows();
        let shifted = &gram - DMatrix::identity(n, n) * lambda;
        let Some(z) = shifted.lu().solve(v) else {
            break;
        };
        let norm = z.norm();
        if !norm.is_finite() || norm == 0.0 {
            break;
        }
        *v = z / norm;
    }
}

/// Forward pass for `svd_min_right`: the unit right singular vector belonging
/// to the smallest singular value. Works through the n×n Gram matrix so the
/// full right basis is available even for m < n (the minimal eight-point
/// case is 8×9). Errors when the two smallest singular values are closer
/// than the spectrum tolerance (the derivative, and for the eight-point use
/// the solution itself, is then ill-defined).
pub fn svd_min_right_forward(a: &Tensor) -> Result<(Tensor, SvdMinCache), DiffError> {
    let a_mat = to_dmatrix(a);
    let n = a_mat.ncols();
    let gram = a_mat.transpose() * &a_mat;
    let eig = gram.clone().symmetric_eigen();
    // Sort eigenpairs by descending eigenvalue; σ = √λ.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let sigma: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(DiffError::NonFinite { op: "svd_min_right" });
    }
    let gap = sigma[n - 2] - sigma[n - 1];
    if gap.abs() < SPECTRUM_TOL {
        return Err(DiffError::DegenerateSpectrum {
            gap: gap.abs(),
            tol: SPECTRUM_TOL,
        });
    }
    let mut v = DMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        v.set_column(col, &eig.eigenvectors.column(src));
        canonical_column_sign(&mut v, col);
    }
    let mut v_min: nalgebra::DVector<f64> = v.column(n - 1).into_owned();
    refine_min_vector(&a_mat, &mut v_min);
    // Keep the deterministic sign convention after refinement.
    let mut arg = 0;
    let mut best = 0.0;
    for (i, &x) in v_min.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            arg = i;
        }
    }
    if v_min[arg] < 0.0 {
        v_min = -v_min;
    }
    if v_min.iter().any(|x| !x.is_finite()) {
        return Err(DiffError::NonFinite { op: "svd_min_right" });
    }
    let out = Tensor::vector(v_min.iter().copied().collect());
    // Row-major copy with the refined vector in the last column.
    let mut v_rows = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let x = if j == n - 1 { v_min[i] } else { v[(i, j)] };
            v_rows.set(i, j, x);
        }
    }
    Ok((out, SvdMinCache { v: v_rows, sigma }))
}

/// Reverse rule for `svd_min_right`.
///
/// With A vⱼ available directly (σⱼ uⱼ = A vⱼ), the adjoint of the smallest
/// right singular vector v_k under upstream gradient g is
///   Ā = Σ_{j≠k} (g·vⱼ)/(σ_k² − σⱼ²) · [(A v_k) vⱼᵀ + (A vⱼ) v_kᵀ],
/// which stays well-defined at σ_k = 0.
pub fn svd_min_right_backward(a_value: &Tensor, cache: &SvdMinCache, g: &Tensor) -> Tensor {
    let (m, n) = (a_value.rows(), a_value.cols());
    let k = n - 1;
    let sigma = &cache.sigma;
    let v = &cache.v;
    // Precompute A vⱼ for all j.
    let mut av = vec![vec![0.0; m]; n];
    for (j, avj) in av.iter_mut().enumerate() {
        for (i, avji) in avj.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in 0..n {
                s += a_value.get(i, p) * v.get(p, j);
            }
            *avji = s;
        }
    }
    let mut grad = Tensor::zeros(vec![m, n]);
    let sk2 = sigma[k] * sigma[k];
    for j in 0..n {
        if j == k {
            continue;
        }
        let mut gdotv = 0.0;
        for p in 0..n {
            gdotv += g.data()[p] * v.get(p, j);
        }
        let denom = sk2 - sigma[j] * sigma[j];
        let coef = gdotv / denom;
        for i in 0..m {
            for p in 0..n {
                let term = av[k][i] * v.get(p, j) + av[j][i] * v.get(p, k);
                let cur = grad.get(i, p);
                grad.set(i, p, cur + coef * term);
            }
        }
    }
    grad
}

/// Forward pass for the packed 3×3 SVD node: output is the 3×7 block
/// `[U | σ | V]`.
pub fn svd3_forward(a: &Tensor) -> Result<(Tensor, Svd3Cache), DiffError> {
    assert_eq!(a.shape(), &[3, 3], "svd3 expects a 3×3 matrix");
    let (u, sigma, v) = svd_thin(a)?;
    let mut packed = Tensor::zeros(vec![3, 7]);
    let mut ut = Tensor::zeros(vec![3, 3]);
    let mut vt = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            packed.set(i, j, u[(i, j)]);
            packed.set(i, 4 + j, v[(i, j)]);
            ut.set(i, j, u[(i, j)]);
            vt.set(i, j, v[(i, j)]);
        }
        packed.set(i, 3, sigma[i]);
    }
    Ok((
        packed,
        Svd3Cache {
            u: ut,
            sigma: [sigma[0], sigma[1], sigma[2]],
            v: vt,
        },
    ))
}

/// Reverse rule for the packed 3×3 SVD. Upstream gradient is packed the same
/// way as the forward output. Requires a separated spectrum.
pub fn svd3_backward(cache: &Svd3Cache, g: &Tensor) -> Result<Tensor, DiffError> {
    let s = &cache.sigma;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let gap = (s[i] - s[j]).abs();
        if gap < SPECTRUM_TOL {
            return Err(DiffError::DegenerateSpectrum {
                gap,
                tol: SPECTRUM_TOL,
            });
        }
    }
    let u = &cache.u;
    let v = &cache.v;
    let mut gu = [[0.0; 3]; 3];
    let mut gs = [0.0; 3];
    let mut gv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gu[i][j] = g.get(i, j);
            gv[i][j] = g.get(i, 4 + j);
        }
        gs[i] = g.get(i, 3);
    }
    // E_U = Uᵀ Ū, E_V = Vᵀ V̄.
    let mut eu = [[0.0; 3]; 3];
    let mut ev = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut su = 0.0;
            let mut sv = 0.0;
            for p in 0..3 {
                su += u.get(p, i) * gu[p][j];
                sv += v.get(p, i) * gv[p][j];
            }
            eu[i][j] = su;
            ev[i][j] = sv;
        }
    }
    // G_ab = [σ_b (E_U[a,b] − E_U[b,a]) + σ_a (E_V[a,b] − E_V[b,a])] / (σ_b² − σ_a²).
    let mut gmat = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                gmat[a][b] = gs[a];
            } else {
                let denom = s[b] * s[b] - s[a] * s[a];
                gmat[a][b] = (s[b] * (eu[a][b] - eu[b][a]) + s[a] * (ev[a][b] - ev[b][a])) / denom;
            }
        }
    }
    // Ā = U G Vᵀ.
    let mut out = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for p in 0..3 {
                for q in 0..3 {
                    acc += u.get(i, p) * gmat[p][q] * v.get(j, q);
                }
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}
