//! Randomized truncated SVD of column-centered matrices.
//!
//! A Gaussian sketch is refined by subspace iteration on whichever Gram
//! operator (`AᵀA` or `AAᵀ`) is smaller, re-orthonormalizing after every
//! application, followed by an exact SVD of the small projected matrix.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::SparseRow;

/// Singular values at or below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// A matrix that can be multiplied against dense blocks from either side.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A · m` for `m` of shape `ncols × l`.
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Aᵀ · m` for `m` of shape `nrows × l`.
    fn apply_t(&self, m: &DMatrix<f64>) -> DMatrix<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self * m
    }
    fn apply_t(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(m)
    }
}

/// A sparse matrix minus its column means, never materialized densely.
pub struct CenteredSparse<'a> {
    pub rows: &'a [SparseRow],
    pub ncols: usize,
    pub means: &'a [f64],
}

impl LinearOperator for CenteredSparse<'_> {
    fn nrows(&self) -> usize {
        self.rows.len()
    }

    fn ncols(&self) -> usize {
        self.ncols
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let l = m.ncols();
        // Row-major copy of m so each sparse entry touches a contiguous slice.
        let mt = m.transpose();
        let mt = mt.as_slice();
        let mut shift = vec![0.0; l];
        for (j, mu) in self.means.iter().enumerate() {
            for (s, v) in shift.iter_mut().zip(&mt[j * l..(j + 1) * l]) {
                *s += mu * v;
            }
        }
        let mut out = vec![0.0; self.rows.len() * l];
        for (i, row) in self.rows.iter().enumerate() {
            let acc = &mut out[i * l..(i + 1) * l];
            for &(c, x) in row {
                let c = c as usize;
                for (a, v) in acc.iter_mut().zip(&mt[c * l..(c + 1) * l]) {
                    *a += x * v;
                }
            }
            for (a, s) in acc.iter_mut().zip(&shift) {
                *a -= s;
            }
        }
        DMatrix::from_row_slice(self.rows.len(), l, &out)
    }

    fn apply_t(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let l = m.ncols();
        let mt = m.transpose();
        let mt = mt.as_slice();
        let mut colsum = vec![0.0; l];
        let mut out = vec![0.0; self.ncols * l];
        for (i, row) in self.rows.iter().enumerate() {
            let src = &mt[i * l..(i + 1) * l];
            for (s, v) in colsum.iter_mut().zip(src) {
                *s += v;
            }
            for &(c, x) in row {
                let c = c as usize;
                for (o, v) in out[c * l..(c + 1) * l].iter_mut().zip(src) {
                    *o += x * v;
                }
            }
        }
        for (j, mu) in self.means.iter().enumerate() {
            for (o, s) in out[j * l..(j + 1) * l].iter_mut().zip(&colsum) {
                *o -= mu * s;
            }
        }
        DMatrix::from_row_slice(self.ncols, l, &out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsvdParams {
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for RsvdParams {
    fn default() -> Self {
        RsvdParams {
            oversampling: 10,
            power_iterations: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rsvd {
    /// Right singular directions, one column each (`ncols × k`).
    pub components: DMatrix<f64>,
    /// Nonincreasing.
    pub singular_values: Vec<f64>,
    /// Number of components asked for; more than `singular_values.len()`
    /// when the matrix rank fell short.
    pub requested: usize,
}

impl Rsvd {
    pub fn shortfall(&self) -> usize {
        self.requested.saturating_sub(self.singular_values.len())
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Top-`k` right singular directions and singular values of `a`.
pub fn randomized_svd<A: LinearOperator>(a: &A, k: usize, params: RsvdParams, seed: u64) -> Rsvd {
    let (n, m) = (a.nrows(), a.ncols());
    let kmax = n.min(m);
    let k_eff = k.min(kmax);
    if k_eff == 0 {
        return Rsvd {
            components: DMatrix::zeros(m, 0),
            singular_values: Vec::new(),
            requested: k,
        };
    }
    let l = (k_eff + params.oversampling).min(kmax);
    let omega = gaussian(m, l, seed);

    // Basis for the dominant right singular subspace, as an m × l matrix.
    let basis_right = if m <= n {
        let mut q = orthonormalize(a.apply_t(&a.apply(&omega)));
        for _ in 0..params.power_iterations {
            q = orthonormalize(a.apply_t(&a.apply(&q)));
        }
        q
    } else {
        let mut q = orthonormalize(a.apply(&omega));
        for _ in 0..params.power_iterations {
            q = orthonormalize(a.apply(&a.apply_t(&q)));
        }
        q
    };

    let (components, sv) = if m <= n {
        // A·Q = U Σ Wᵀ  ⇒  right singular vectors are Q·W.
        let c = a.apply(&basis_right);
        let svd = c.svd(false, true);
        let vt = svd.v_t.expect("requested v_t");
        (basis_right * vt.transpose(), svd.singular_values)
    } else {
        // (QᵀA)ᵀ = AᵀQ = U Σ Wᵀ  ⇒  right singular vectors are U.
        let bt = a.apply_t(&basis_right);
        let svd = bt.svd(true, false);
        (svd.u.expect("requested u"), svd.singular_values)
    };

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
    let top = sv.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = order
        .into_iter()
        .take(k_eff)
        .filter(|&i| top > 0.0 && sv[i] > RANK_TOLERANCE * top)
        .collect();
    let comps = DMatrix::from_fn(m, keep.len(), |r, c| components[(r, keep[c])]);
    let values: Vec<f64> = keep.iter().map(|&i| sv[i]).collect();
    Rsvd {
        components: comps,
        singular_values: values,
        requested: k,
    }
}

/// Center the columns of a dense matrix and run [`randomized_svd`] on it.
/// Returns the decomposition and the column means that were removed.
pub fn fit_rsvd(matrix: &DMatrix<f64>, k: usize, params: RsvdParams, seed: u64) -> (Rsvd, Vec<f64>) {
    let n = matrix.nrows().max(1) as f64;
    let means: Vec<f64> = matrix.column_iter().map(|c| c.sum() / n).collect();
    let mut centered = matrix.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (randomized_svd(&centered, k, params, seed), means)
}
