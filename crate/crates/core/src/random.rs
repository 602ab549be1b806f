//! Random operators for tests and the property suite.

use crate::linalg::{complete_orthonormal, ComplexMatrix, C64};
use rand::Rng;
use rand_distr::StandardNormal;

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Matrix with iid standard complex Gaussian entries.
pub fn ginibre<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> ComplexMatrix {
    let data = (0..rows * cols).map(|_| C64::new(gauss(rng), gauss(rng))).collect();
    ComplexMatrix { rows, cols, data }
}

pub fn hermitian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ComplexMatrix {
    ginibre(rng, n, n).hermitize()
}

/// Haar-distributed unitary (Gram-Schmidt on a Ginibre matrix).
pub fn unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ComplexMatrix {
    let g = ginibre(rng, n, n);
    let mut q = ComplexMatrix::zeros(n, n);
    let mut filled = Vec::new();
    for j in 0..n {
        let mut v = g.col(j);
        for _ in 0..2 {
            for &k in &filled {
                let qk = q.col(k);
                let ov: C64 = qk.iter().zip(&v).map(|(a, b): (&C64, &C64)| a.conj() * b).sum();
                for (vi, qi) in v.iter_mut().zip(&qk) {
                    *vi -= ov * qi;
                }
            }
        }
        let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nrm > 1e-10 {
            q.set_col(j, &v.iter().map(|z| z / nrm).collect::<Vec<_>>());
            filled.push(j);
        }
    }
    complete_orthonormal(&mut q, &filled);
    q
}

/// Unit vector drawn uniformly from the sphere.
pub fn pure<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<C64> {
    let v: Vec<C64> = (0..n).map(|_| C64::new(gauss(rng), gauss(rng))).collect();
    let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|z| z / nrm).collect()
}

/// Induced-measure density matrix of rank at most `rank`.
pub fn density<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize) -> ComplexMatrix {
    let g = ginibre(rng, n, rank.max(1));
    let m = g.matmul(&g.adjoint());
    let t = m.trace_re();
    m.scale(1.0 / t).hermitize()
}

/// Probability vector from a flat Dirichlet.
pub fn simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Diagonal state with a random spectrum.
pub fn diagonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ComplexMatrix {
    ComplexMatrix::from_diag(&simplex(rng, n))
}
