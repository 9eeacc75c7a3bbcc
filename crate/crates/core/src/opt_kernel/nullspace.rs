use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold on the diagonal of `R` below which a column of the
/// active Jacobian is declared dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Householder QR with column pivoting, `A P = Q R`, with the full square `Q`.
struct PivotedQr {
    q: DMatrix<f64>,
    r_diag: Vec<f64>,
}

fn pivoted_qr(a: &DMatrix<f64>) -> PivotedQr {
    let (m, n) = a.shape();
    let mut r = a.clone();
    let mut q = DMatrix::<f64>::identity(m, m);
    let mut r_diag = Vec::with_capacity(m.min(n));

    for k in 0..m.min(n) {
        let (mut best, mut best_norm) = (k, -1.0);
        for j in k..n {
            let norm = r.view((k, j), (m - k, 1)).norm_squared();
            if norm > best_norm {
                best = j;
                best_norm = norm;
            }
        }
        r.swap_columns(k, best);

        let x: DVector<f64> = r.view((k, k), (m - k, 1)).column(0).into_owned();
        let alpha = x.norm();
        if alpha == 0.0 {
            r_diag.push(0.0);
            continue;
        }
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x;
        v[0] += sign * alpha;
        let vtv = v.norm_squared();

        // R[k.., k..] -= v (2 vᵀ R / vᵀv)
        for j in k..n {
            let dot: f64 = (0..m - k).map(|i| v[i] * r[(k + i, j)]).sum();
            let f = 2.0 * dot / vtv;
            for i in 0..m - k {
                r[(k + i, j)] -= f * v[i];
            }
        }
        // Q[:, k..] -= (Q[:, k..] v) 2 vᵀ / vᵀv
        for row in 0..m {
            let dot: f64 = (0..m - k).map(|i| q[(row, k + i)] * v[i]).sum();
            let f = 2.0 * dot / vtv;
            for i in 0..m - k {
                q[(row, k + i)] -= f * v[i];
            }
        }
        r_diag.push(r[(k, k)]);
    }
    PivotedQr { q, r_diag }
}

/// Orthonormal basis `N` of the null space of `j_active` (rows are
/// constraint gradients): `J N = 0` and `NᵀN = I`.
///
/// An empty Jacobian (zero rows) yields the identity; a square full-rank
/// Jacobian yields a basis with zero columns. Linearly dependent rows are
/// reported as [`Error::RankDeficient`].
pub fn nullspace_orthonormal(j_active: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, m) = j_active.shape();
    if rows == 0 {
        return Ok(DMatrix::identity(m, m));
    }
    if rows > m {
        return Err(Error::RankDeficient { rank: m, rows });
    }
    let qr = pivoted_qr(&j_active.transpose());
    let lead = qr.r_diag.first().map(|v| v.abs()).unwrap_or(0.0);
    let rank = qr
        .r_diag
        .iter()
        .take_while(|d| d.abs() > RANK_TOLERANCE * lead.max(1e-300))
        .count();
    if lead == 0.0 || rank < rows {
        return Err(Error::RankDeficient {
            rank: if lead == 0.0 { 0 } else { rank },
            rows,
        });
    }
    Ok(qr.q.columns(rows, m - rows).into_owned())
}
