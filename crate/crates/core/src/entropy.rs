//! One-shot entropies in bits.
//!
//! Smoothing is spectral truncation throughout: the smallest eigenvalues whose
//! total is at most the smoothing parameter are dropped. Conditional quantities
//! are only provided for classical conditioning, where every optimizer is
//! block diagonal in the classical register.

use crate::error::{check_eps, Error, Result};
use crate::linalg::{eig_hermitian, inv_sqrt_psd, ComplexMatrix, Spectrum, C64, SUPPORT_TOL};
use crate::states::{CQState, DensityOperator};
use serde::Serialize;

const CUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GreedyLp,
    NeymanPearson,
    Blockwise,
    ClosedForm,
    Iterative,
}

#[derive(Clone, Debug, Serialize)]
pub enum Witness {
    /// Test weights on the eigenbasis, paired with the eigenvalues (descending).
    Weights { eigenvalues: Vec<f64>, weights: Vec<f64> },
    /// `Π = (1−w)·P₊(t_hi) + w·P₊(t_lo)` with `P₊(t)` the positive part projector of `ρ − tσ`.
    Threshold { t_lo: f64, t_hi: f64, w: f64 },
    /// Per-symbol weights on each conditional's eigenbasis (descending).
    Blockwise { eigenvalues: Vec<Vec<f64>>, weights: Vec<Vec<f64>> },
    /// Test concentrated outside the support of the reference.
    Unbounded,
}

#[derive(Clone, Debug, Serialize)]
pub struct EntropyResult {
    pub value: f64,
    pub witness: Witness,
    pub method: Method,
}

impl EntropyResult {
    pub fn is_infinite(&self) -> bool {
        self.value.is_infinite()
    }
}

#[derive(Clone, Debug)]
pub struct ImaxResult {
    pub value: f64,
    pub sigma: DensityOperator,
    pub duality_gap: f64,
    pub primal: f64,
    pub dual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Symbols removed by smoothing.
    pub smoothed_out: Vec<String>,
}

/// Support eigenvalues, ascending.
fn support_ascending(rho: &DensityOperator) -> Vec<f64> {
    rho.eigenvalues().into_iter().filter(|&x| x > SUPPORT_TOL).collect()
}

/// Number of smallest values (ascending input) whose running sum stays ≤ eps.
pub fn truncation_count(ascending: &[f64], eps: f64) -> usize {
    let mut s = 0.0;
    let mut k = 0;
    for &x in ascending {
        if s + x <= eps + CUM_TOL {
            s += x;
            k += 1;
        } else {
            break;
        }
    }
    k.min(ascending.len().saturating_sub(1))
}

/// Smoothed support max entropy: log₂ of the support size left after dropping
/// the smallest eigenvalues of total weight at most eps.
pub fn h_tilde_max(rho: &DensityOperator, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let ev = support_ascending(rho);
    let k = truncation_count(&ev, eps);
    Ok(((ev.len() - k) as f64).log2())
}

/// Smoothed norm max entropy: −log₂ of the smallest surviving eigenvalue.
pub fn h_prime_max(rho: &DensityOperator, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let ev = support_ascending(rho);
    let k = truncation_count(&ev, eps);
    Ok(-ev[k].log2())
}

/// Greedy fractional knapsack for `min Σλ(a)` s.t. `Σ p(a)λ(a) ≥ 1−eps`.
/// `p` must be sorted descending. Returns (optimum, weights).
pub fn greedy_lp(p: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let need = 1.0 - eps;
    let mut got = 0.0;
    let mut total = 0.0;
    let mut w = vec![0.0; p.len()];
    for (i, &x) in p.iter().enumerate() {
        if got >= need - CUM_TOL || x <= 0.0 {
            break;
        }
        if got + x >= need - CUM_TOL {
            let f = ((need - got) / x).clamp(0.0, 1.0);
            w[i] = f;
            total += f;
            break;
        }
        w[i] = 1.0;
        total += 1.0;
        got += x;
    }
    (total, w)
}

/// Smooth hypothesis-testing entropy `H_H^eps(A)` (reference: identity).
pub fn h_h(rho: &DensityOperator, eps: f64) -> Result<EntropyResult> {
    check_eps(eps)?;
    let mut ev = rho.eigenvalues();
    ev.reverse();
    Ok(h_h_from_spectrum(&ev, eps))
}

/// As `h_h`, from eigenvalues sorted descending.
pub fn h_h_from_spectrum(descending: &[f64], eps: f64) -> EntropyResult {
    let (opt, weights) = greedy_lp(descending, eps);
    EntropyResult {
        value: opt.log2(),
        witness: Witness::Weights { eigenvalues: descending.to_vec(), weights },
        method: Method::GreedyLp,
    }
}

/// Projector onto the eigenvectors that carry non-zero weight in the optimal
/// `H_H^eps` test, and the optimal test operator itself.
pub fn h_h_test(rho: &DensityOperator, eps: f64) -> Result<(ComplexMatrix, ComplexMatrix)> {
    check_eps(eps)?;
    let sp = rho.spectrum();
    let n = sp.dim();
    let desc: Vec<f64> = (0..n).rev().map(|i| sp.values[i].max(0.0)).collect();
    let (_, w) = greedy_lp(&desc, eps);
    let mut weights = vec![0.0; n];
    for (j, wj) in w.iter().enumerate() {
        weights[n - 1 - j] = *wj;
    }
    let proj = weighted(sp, |i| if weights[i] > 0.0 { 1.0 } else { 0.0 });
    let test = weighted(sp, |i| weights[i]);
    Ok((proj, test))
}

fn weighted(sp: &Spectrum, f: impl Fn(usize) -> f64) -> ComplexMatrix {
    let n = sp.dim();
    let mut out = ComplexMatrix::zeros(n, n);
    for k in 0..n {
        let w = f(k);
        if w == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = sp.vectors[(i, k)] * w;
            for j in 0..n {
                out[(i, j)] += vi * sp.vectors[(j, k)].conj();
            }
        }
    }
    out
}

fn positive_projector(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    let sp = eig_hermitian(m)?;
    let scale = sp.values.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
    Ok(sp.projector(|x| x > 1e-14 * scale))
}

/// Hypothesis-testing relative entropy `D_H^eps(ρ‖σ)`, i.e. −log₂ of the minimal
/// `Tr[Πσ]` over tests with `Tr[Πρ] ≥ 1−eps`.
pub fn d_h(rho: &ComplexMatrix, sigma: &ComplexMatrix, eps: f64) -> Result<EntropyResult> {
    check_eps(eps)?;
    if (rho.rows, rho.cols) != (sigma.rows, sigma.cols) || !rho.is_square() {
        return Err(Error::Dimension("d_h operands differ in shape".into()));
    }
    let need = 1.0 - eps;
    let ssp = eig_hermitian(sigma)?;
    if ssp.min() < -1e-10 {
        return Err(Error::NotPsd(ssp.min()));
    }
    let ker = ssp.projector(|x| x <= SUPPORT_TOL);
    let outside = ker.trace_product(rho).re;
    if outside >= need - CUM_TOL {
        return Ok(EntropyResult { value: f64::INFINITY, witness: Witness::Unbounded, method: Method::NeymanPearson });
    }
    let lam_min_pos = ssp.values.iter().copied().filter(|&x| x > SUPPORT_TOL).fold(f64::INFINITY, f64::min);
    let rho_max = eig_hermitian(rho)?.max().max(0.0);

    let eval = |t: f64| -> Result<(ComplexMatrix, f64, f64)> {
        let p = positive_projector(&(rho - &sigma.scale(t)))?;
        let fr = p.trace_product(rho).re;
        let fs = p.trace_product(sigma).re;
        Ok((p, fr, fs))
    };

    let mut t_lo = 0.0;
    let (_, mut f_lo, mut s_lo) = eval(t_lo)?;
    if f_lo < need - CUM_TOL {
        // Only reachable through clipping of tiny eigenvalues; fall back to the identity test.
        f_lo = 1.0;
        s_lo = sigma.trace_re();
    }
    let mut t_hi = (rho_max / lam_min_pos).max(1e-300);
    let (_, mut f_hi, mut s_hi) = eval(t_hi)?;
    let mut doublings = 0;
    while f_hi >= need - CUM_TOL && doublings < 200 {
        t_lo = t_hi;
        f_lo = f_hi;
        s_lo = s_hi;
        t_hi *= 2.0;
        let r = eval(t_hi)?;
        f_hi = r.1;
        s_hi = r.2;
        doublings += 1;
    }
    for _ in 0..200 {
        let mid = 0.5 * (t_lo + t_hi);
        if mid <= t_lo || mid >= t_hi {
            break;
        }
        let (_, fm, sm) = eval(mid)?;
        if fm >= need - CUM_TOL {
            t_lo = mid;
            f_lo = fm;
            s_lo = sm;
        } else {
            t_hi = mid;
            f_hi = fm;
            s_hi = sm;
        }
    }
    let w = if f_lo - f_hi > 0.0 { ((need - f_hi) / (f_lo - f_hi)).clamp(0.0, 1.0) } else { 1.0 };
    let type2 = (1.0 - w) * s_hi + w * s_lo;
    Ok(EntropyResult {
        value: -type2.log2(),
        witness: Witness::Threshold { t_lo, t_hi, w },
        method: Method::NeymanPearson,
    })
}

/// Rebuild the Neyman–Pearson test recorded in a `Threshold` witness.
pub fn threshold_test(rho: &ComplexMatrix, sigma: &ComplexMatrix, witness: &Witness) -> Result<ComplexMatrix> {
    match witness {
        Witness::Threshold { t_lo, t_hi, w } => {
            let lo = positive_projector(&(rho - &sigma.scale(*t_lo)))?;
            let hi = positive_projector(&(rho - &sigma.scale(*t_hi)))?;
            Ok(&hi.scale(1.0 - w) + &lo.scale(*w))
        }
        _ => Err(Error::Invalid("witness is not a threshold test".into())),
    }
}

/// Conditional `H_H^eps(B|X)` of a cq state: blockwise greedy over the pairs
/// (x, eigenvalue of ρ_x), cost P(x), gain P(x)·eigenvalue.
pub fn h_h_cond_cq(cq: &CQState, eps: f64) -> Result<EntropyResult> {
    check_eps(eps)?;
    let mut items: Vec<(f64, usize, usize)> = Vec::new();
    let mut eig_desc: Vec<Vec<f64>> = Vec::new();
    for (x, c) in cq.conditionals.iter().enumerate() {
        let mut ev = c.eigenvalues();
        ev.reverse();
        for (j, &mu) in ev.iter().enumerate() {
            items.push((mu, x, j));
        }
        eig_desc.push(ev);
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let need = 1.0 - eps;
    let mut got = 0.0;
    let mut cost = 0.0;
    let mut weights: Vec<Vec<f64>> = eig_desc.iter().map(|e| vec![0.0; e.len()]).collect();
    for &(mu, x, j) in &items {
        if got >= need - CUM_TOL || mu <= 0.0 {
            break;
        }
        let p = cq.probs[x];
        let gain = p * mu;
        if got + gain >= need - CUM_TOL {
            let f = ((need - got) / gain).clamp(0.0, 1.0);
            weights[x][j] = f;
            cost += p * f;
            break;
        }
        weights[x][j] = 1.0;
        cost += p;
        got += gain;
    }
    Ok(EntropyResult {
        value: cost.log2(),
        witness: Witness::Blockwise { eigenvalues: eig_desc, weights },
        method: Method::Blockwise,
    })
}

/// Symbols x whose own test block keeps weight ≥ 1 − √eps on ρ_x and has
/// trace ≤ 2^{H_H^eps(B|X)}/eps, built from the blockwise optimizer.
/// Returns the set and its P_X-mass.
pub fn worst_case_set(cq: &CQState, eps: f64) -> Result<(Vec<usize>, f64)> {
    check_eps(eps)?;
    if eps == 0.0 {
        return Ok(((0..cq.len()).collect(), 1.0));
    }
    let res = h_h_cond_cq(cq, eps)?;
    let Witness::Blockwise { eigenvalues, weights } = &res.witness else {
        unreachable!("conditional entropy always returns a blockwise witness")
    };
    let cap = res.value.exp2() / eps;
    let mut set = Vec::new();
    let mut mass = 0.0;
    for x in 0..cq.len() {
        let kept: f64 = eigenvalues[x].iter().zip(&weights[x]).map(|(m, w)| m * w).sum();
        let size: f64 = weights[x].iter().sum();
        if kept >= 1.0 - eps.sqrt() - CUM_TOL && size <= cap + CUM_TOL {
            set.push(x);
            mass += cq.probs[x];
        }
    }
    Ok((set, mass))
}

/// Unsmoothed `H_min(B|X)` of a cq state: −log₂ Σ_x P(x) λ_max(ρ_x).
pub fn h_min_cq(cq: &CQState) -> f64 {
    let s: f64 = cq.probs.iter().zip(&cq.conditionals).map(|(p, c)| p * c.spectrum().max()).sum();
    -s.log2()
}

/// Truncation-smoothed `H_min(B|X)`: lower every conditional's spectrum to a
/// water level c_x, removing at most eps² weight in total, and minimize
/// Σ_x P(x)c_x. The result is not renormalized and lower-bounds the
/// ball-smoothed quantity.
pub fn h_min_cq_smoothed(cq: &CQState, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let budget = eps * eps;
    // Segment (count, length, x): lowering x's level across the segment costs
    // P(x)·count removed weight per unit level and gains P(x) per unit level.
    let mut segs: Vec<(usize, f64, usize)> = Vec::new();
    let mut levels: Vec<f64> = Vec::new();
    for (x, c) in cq.conditionals.iter().enumerate() {
        let mut ev = c.eigenvalues();
        ev.reverse();
        levels.push(ev[0]);
        for j in 0..ev.len() {
            let next = if j + 1 < ev.len() { ev[j + 1] } else { 0.0 };
            let len = ev[j] - next;
            if len > 0.0 {
                segs.push((j + 1, len, x));
            }
        }
    }
    segs.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.cmp(&b.2)));
    let mut left = budget;
    for (count, len, x) in segs {
        if left <= 0.0 {
            break;
        }
        let rate = cq.probs[x] * count as f64;
        let full = rate * len;
        if full <= left {
            levels[x] -= len;
            left -= full;
        } else {
            levels[x] -= left / rate;
            left = 0.0;
        }
    }
    let s: f64 = cq.probs.iter().zip(&levels).map(|(p, c)| p * c.max(0.0)).sum();
    Ok(-s.log2())
}

/// Truncation-smoothed max entropy: drop the same eigenvalues as `h_tilde_max`,
/// renormalize, and return the Rényi-½ entropy 2·log₂ Σ√λ.
pub fn h_max_smooth(rho: &DensityOperator, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let ev = support_ascending(rho);
    let k = truncation_count(&ev, eps);
    let kept = &ev[k..];
    let t: f64 = kept.iter().sum();
    let v = 2.0 * kept.iter().map(|x| (x / t).sqrt()).sum::<f64>().log2();
    let tilde = ((ev.len() - k) as f64).log2();
    assert!(v <= tilde + 1e-9, "smooth max entropy exceeds its support bound");
    Ok(v)
}

const IMAX_TOL: f64 = 1e-6;
const IMAX_MAX_ITERS: usize = 10_000;
const IMAX_ETA: f64 = 0.1;

/// Max-information `I_max^eps(X:B)` of a cq state, defined through D_max:
/// log₂ min_σ max_x λ_max(σ^{-1/2} ρ_x σ^{-1/2}). Smoothing removes the
/// least likely symbols of total mass at most eps.
pub fn i_max_cq(cq: &CQState, eps: f64) -> Result<ImaxResult> {
    check_eps(eps)?;
    let mut order: Vec<usize> = (0..cq.len()).collect();
    order.sort_by(|&a, &b| cq.probs[a].total_cmp(&cq.probs[b]).then(a.cmp(&b)));
    let mut dropped = Vec::new();
    let mut mass = 0.0;
    for &x in order.iter().take(cq.len() - 1) {
        if mass + cq.probs[x] <= eps + CUM_TOL {
            mass += cq.probs[x];
            dropped.push(x);
        } else {
            break;
        }
    }
    let kept: Vec<usize> = (0..cq.len()).filter(|x| !dropped.contains(x)).collect();
    let d = cq.quantum_dim();

    // Work on the support of the kept conditionals.
    let mut avg = ComplexMatrix::zeros(d, d);
    for &x in &kept {
        avg = &avg + cq.conditionals[x].matrix();
    }
    let asp = eig_hermitian(&avg)?;
    let basis: Vec<usize> = (0..d).filter(|&i| asp.values[i] > SUPPORT_TOL * kept.len() as f64).collect();
    let r = basis.len();
    let mut v = ComplexMatrix::zeros(d, r);
    for (j, &i) in basis.iter().enumerate() {
        v.set_col(j, &asp.vectors.col(i));
    }
    let rhos: Vec<ComplexMatrix> =
        kept.iter().map(|&x| v.adjoint().matmul(cq.conditionals[x].matrix()).matmul(&v).hermitize()).collect();
    let sol = solve_dmax_minimax(&rhos)?;
    let sigma_full = v.matmul(&sol.sigma).matmul(&v.adjoint()).hermitize();
    let sigma = DensityOperator::normalized(cq.registers().to_vec(), sigma_full)?;
    Ok(ImaxResult {
        value: sol.primal.log2(),
        sigma,
        duality_gap: (sol.primal / sol.dual).log2().max(0.0),
        primal: sol.primal,
        dual: sol.dual,
        iterations: sol.iterations,
        converged: sol.converged,
        smoothed_out: dropped.iter().map(|&x| cq.symbols[x].clone()).collect(),
    })
}

struct Minimax {
    sigma: ComplexMatrix,
    primal: f64,
    dual: f64,
    iterations: usize,
    converged: bool,
}

/// min{t : ρ_x ≤ tσ ∀x}; finite because σ is full rank on the common support.
pub fn dmax_value(rhos: &[ComplexMatrix], sigma: &ComplexMatrix) -> Result<f64> {
    let s = inv_sqrt_psd(sigma)?;
    let mut t: f64 = 0.0;
    for r in rhos {
        t = t.max(eig_hermitian(&s.conjugate(r).hermitize())?.max());
    }
    Ok(t)
}

fn solve_dmax_minimax(rhos: &[ComplexMatrix]) -> Result<Minimax> {
    let r = rhos[0].rows;
    let n = rhos.len();
    let mut avg = ComplexMatrix::zeros(r, r);
    for m in rhos {
        avg = &avg + m;
    }
    let avg = avg.scale(1.0 / n as f64);
    // Pretty-good measurement as the starting POVM.
    let a_is = inv_sqrt_psd(&avg.scale(n as f64))?;
    let mut ys: Vec<ComplexMatrix> = rhos.iter().map(|m| a_is.conjugate(m).hermitize()).collect();
    let mut sigma = avg.clone();
    let mut best_primal = dmax_value(rhos, &sigma)?;
    let mut best_sigma = sigma.clone();
    let mut best_dual: f64 = rhos.iter().zip(&ys).map(|(m, y)| m.trace_product(y).re).sum();
    let mut iterations = 0;
    let mut converged = (best_primal / best_dual).log2() <= IMAX_TOL;
    while !converged && iterations < IMAX_MAX_ITERS {
        iterations += 1;
        // Dual: Ježek–Řeháček–Fiurášek step Y_x ← R⁻¹ ρ_x Y_x ρ_x R⁻¹.
        let mut r2 = ComplexMatrix::zeros(r, r);
        let prods: Vec<ComplexMatrix> = rhos.iter().zip(&ys).map(|(m, y)| m.matmul(y).matmul(m)).collect();
        for p in &prods {
            r2 = &r2 + p;
        }
        let rsp = eig_hermitian(&r2.hermitize())?;
        let rinv = rsp.apply(|x| if x > SUPPORT_TOL { 1.0 / x.sqrt() } else { 0.0 });
        let complement = rsp.projector(|x| x <= SUPPORT_TOL);
        let mut next: Vec<ComplexMatrix> = prods.iter().map(|p| rinv.conjugate(p).hermitize()).collect();
        next[0] = &next[0] + &complement;
        ys = next;
        let dual: f64 = rhos.iter().zip(&ys).map(|(m, y)| m.trace_product(y).re).sum();
        if dual > best_dual {
            best_dual = dual;
        }
        // Primal: the dual's stationarity direction D = (Σ Y_x ρ_x)₊ / Tr.
        let mut s = ComplexMatrix::zeros(r, r);
        for (m, y) in rhos.iter().zip(&ys) {
            s = &s + &y.matmul(m);
        }
        let dsp = eig_hermitian(&s.hermitize())?;
        let dir = dsp.apply(|x| x.max(0.0));
        let tr = dir.trace_re();
        if tr > 0.0 {
            let dir = dir.scale(1.0 / tr);
            if let Ok(t) = dmax_value(rhos, &(&dir.scale(1.0 - 1e-15) + &avg.scale(1e-15))) {
                if t < best_primal {
                    best_primal = t;
                    best_sigma = dir.clone();
                }
            }
            sigma = (&sigma.scale(1.0 - IMAX_ETA) + &dir.scale(IMAX_ETA)).hermitize();
            let st = sigma.trace_re();
            sigma = sigma.scale(1.0 / st);
            let t = dmax_value(rhos, &sigma)?;
            if t < best_primal {
                best_primal = t;
                best_sigma = sigma.clone();
            }
        }
        converged = (best_primal / best_dual).log2() <= IMAX_TOL;
    }
    Ok(Minimax { sigma: best_sigma, primal: best_primal, dual: best_dual, iterations, converged })
}

/// Value of `H_H` recomputed from a `Weights` witness.
pub fn reevaluate(result: &EntropyResult) -> Option<f64> {
    match &result.witness {
        Witness::Weights { weights, .. } => Some(weights.iter().sum::<f64>().log2()),
        _ => None,
    }
}

/// Reference operator ρ^X ⊗ I^B for a cq state, block ordered by symbol.
pub fn cq_reference(cq: &CQState) -> ComplexMatrix {
    let d = cq.quantum_dim();
    let n = cq.len();
    let mut m = ComplexMatrix::zeros(n * d, n * d);
    for x in 0..n {
        for i in 0..d {
            m[(x * d + i, x * d + i)] = C64::new(cq.probs[x], 0.0);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random;
    use crate::states::Register;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(p: &[f64]) -> DensityOperator {
        DensityOperator::diagonal("A", p).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn h_tilde_max_examples() {
        assert_eq!(h_tilde_max(&diag(&[1.0, 0.0, 0.0]), 0.1).unwrap(), 0.0);
        assert_eq!(h_tilde_max(&diag(&[0.25; 4]), 0.1).unwrap(), 2.0);
        assert!(close(h_tilde_max(&diag(&[0.05, 0.15, 0.3, 0.5]), 0.1).unwrap(), 3f64.log2(), 1e-12));
        assert!(h_tilde_max(&diag(&[0.5, 0.5]), 1.0).is_err());
    }

    #[test]
    fn h_prime_max_examples() {
        assert_eq!(h_prime_max(&diag(&[1.0, 0.0]), 0.1).unwrap(), 0.0);
        assert!(close(h_prime_max(&diag(&[0.125; 8]), 0.1).unwrap(), 3.0, 1e-12));
        assert!(close(h_prime_max(&diag(&[0.05, 0.15, 0.3, 0.5]), 0.1).unwrap(), (1.0f64 / 0.15).log2(), 1e-12));
    }

    #[test]
    fn h_h_examples() {
        assert!(close(h_h(&diag(&[1.0, 0.0]), 0.1).unwrap().value, 0.9f64.log2(), 1e-12));
        assert!(close(h_h(&diag(&[0.25; 4]), 0.1).unwrap().value, 2.0 + 0.9f64.log2(), 1e-12));
        // λ = (1, 1, 1/2): 0.5 + 0.3 + 0.1 = 0.9, objective 2.5.
        let r = h_h(&diag(&[0.5, 0.3, 0.2]), 0.1).unwrap();
        assert!(close(r.value, 2.5f64.log2(), 1e-12));
        match &r.witness {
            Witness::Weights { weights, .. } => {
                assert_eq!(&weights[..2], &[1.0, 1.0]);
                assert!(close(weights[2], 0.5, 1e-12));
            }
            _ => panic!("wrong witness"),
        }
        assert!(close(reevaluate(&r).unwrap(), r.value, 1e-12));
    }

    #[test]
    fn h_h_test_operator_attains_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rho = DensityOperator::single("A", random::density(&mut rng, 5, 5)).unwrap();
            let (_, t) = h_h_test(&rho, 0.1).unwrap();
            assert!(t.trace_product(rho.matrix()).re >= 0.9 - 1e-9);
            assert!(close(t.trace_re().log2(), h_h(&rho, 0.1).unwrap().value, 1e-9));
        }
    }

    #[test]
    fn d_h_examples() {
        for eps in [0.0, 0.1, 0.3] {
            let rho = diag(&[0.6, 0.3, 0.1]);
            let r = d_h(rho.matrix(), rho.matrix(), eps).unwrap();
            assert!(close(r.value, -(1.0 - eps).log2(), 1e-9), "eps = {eps}: {}", r.value);
        }
        let r = d_h(diag(&[0.5, 0.5]).matrix(), diag(&[0.9, 0.1]).matrix(), 0.5).unwrap();
        assert!(close(r.value, 10f64.log2(), 1e-9));
        let rho = diag(&[0.7, 0.3, 0.0]);
        let sigma = diag(&[0.2, 0.3, 0.5]);
        let r = d_h(rho.matrix(), sigma.matrix(), 0.0).unwrap();
        assert!(close(r.value, -(0.5f64).log2(), 1e-9));
        let r = d_h(diag(&[1.0, 0.0]).matrix(), diag(&[0.0, 1.0]).matrix(), 0.1).unwrap();
        assert!(r.is_infinite());
    }

    #[test]
    fn d_h_witness_reproduces_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let rho = random::density(&mut rng, 3, 3);
            let sigma = random::density(&mut rng, 3, 3);
            let r = d_h(&rho, &sigma, 0.2).unwrap();
            let t = threshold_test(&rho, &sigma, &r.witness).unwrap();
            assert!(t.trace_product(&rho).re >= 0.8 - 1e-9);
            assert!(close(-t.trace_product(&sigma).re.log2(), r.value, 1e-8));
        }
    }

    #[test]
    fn h_h_equals_minus_d_h_against_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rho = DensityOperator::single("A", random::density(&mut rng, 4, 3)).unwrap();
            let a = h_h(&rho, 0.07).unwrap().value;
            let b = d_h(rho.matrix(), &ComplexMatrix::identity(4), 0.07).unwrap().value;
            assert!(close(a, -b, 1e-8), "{a} vs {}", -b);
        }
    }

    fn cq(probs: &[f64], conds: &[&[f64]]) -> CQState {
        CQState::from_parts(probs.to_vec(), conds.iter().map(|c| DensityOperator::diagonal("B", c).unwrap()).collect())
            .unwrap()
    }

    #[test]
    fn h_h_cond_examples() {
        let c = cq(&[0.5, 0.5], &[&[1.0, 0.0], &[0.5, 0.5]]);
        assert!(close(h_h_cond_cq(&c, 0.1).unwrap().value, 1.3f64.log2(), 1e-12));
        let single = cq(&[1.0], &[&[0.5, 0.3, 0.2]]);
        assert!(close(h_h_cond_cq(&single, 0.1).unwrap().value, 2.5f64.log2(), 1e-12));
        let pure = cq(&[0.3, 0.7], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(h_h_cond_cq(&pure, 0.1).unwrap().value <= 0.0);
    }

    #[test]
    fn h_h_cond_matches_d_h_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let p = random::simplex(&mut rng, 3);
            let conds: Vec<DensityOperator> =
                (0..3).map(|_| DensityOperator::single("B", random::density(&mut rng, 2, 2)).unwrap()).collect();
            let c = CQState::from_parts(p, conds).unwrap();
            let a = h_h_cond_cq(&c, 0.05).unwrap().value;
            let b = d_h(&c.joint_matrix(), &cq_reference(&c), 0.05).unwrap().value;
            assert!(close(a, -b, 1e-8));
        }
    }

    #[test]
    fn h_min_cq_examples() {
        assert!(close(h_min_cq(&cq(&[0.4, 0.6], &[&[1.0, 0.0], &[0.0, 1.0]])), 0.0, 1e-12));
        assert!(close(h_min_cq(&cq(&[1.0], &[&[0.25; 4]])), 2.0, 1e-12));
        let c = cq(&[0.5, 0.5], &[&[1.0, 0.0], &[0.5, 0.5]]);
        assert!(close(h_min_cq(&c), -(0.75f64).log2(), 1e-12));
        assert!(close(h_min_cq_smoothed(&c, 0.0).unwrap(), h_min_cq(&c), 1e-12));
        let s = h_min_cq_smoothed(&c, 0.1).unwrap();
        assert!(s >= -(0.75f64).log2() && s <= 1.0);
    }

    /// Exhaustive oracle for the water-level truncation: grid over levels.
    #[test]
    fn h_min_smoothed_matches_grid() {
        let c = cq(&[0.5, 0.5], &[&[1.0, 0.0], &[0.5, 0.5]]);
        let eps: f64 = 0.1;
        let mut best = f64::INFINITY;
        let n = 2000;
        for i in 0..=n {
            let c0 = i as f64 / n as f64;
            let used0 = 0.5 * (1.0 - c0);
            if used0 > eps * eps + 1e-15 {
                continue;
            }
            let left = eps * eps - used0;
            // Second conditional: two eigenvalues at 0.5; lowering to c1 removes 2(0.5 − c1).
            let c1 = (0.5 - left / (2.0 * 0.5)).max(0.0);
            best = best.min(0.5 * c0 + 0.5 * c1);
        }
        assert!(close(h_min_cq_smoothed(&c, eps).unwrap(), -best.log2(), 1e-4));
    }

    #[test]
    fn h_max_smooth_examples() {
        assert!(close(h_max_smooth(&diag(&[1.0, 0.0]), 0.1).unwrap(), 0.0, 1e-12));
        let want = 2.0 * (0.5f64.sqrt() + 0.3f64.sqrt() + 0.2f64.sqrt()).log2();
        assert!(close(h_max_smooth(&diag(&[0.5, 0.3, 0.2]), 0.0).unwrap(), want, 1e-12));
        assert!(close(h_max_smooth(&diag(&[0.125; 8]), 0.01).unwrap(), 3.0, 1e-12));
    }

    #[test]
    fn i_max_examples() {
        let same = cq(&[0.3, 0.7], &[&[0.6, 0.4], &[0.6, 0.4]]);
        let r = i_max_cq(&same, 0.0).unwrap();
        assert!(close(r.value, 0.0, 1e-6));
        let orth = cq(&[0.5, 0.5], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = i_max_cq(&orth, 0.0).unwrap();
        assert!(close(r.value, 1.0, 1e-6));
        assert!(r.converged);
        assert!(r.sigma.matrix().approx_eq(&ComplexMatrix::identity(2).scale(0.5), 1e-6));
    }

    #[test]
    fn i_max_gap_nonnegative_and_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let conds: Vec<DensityOperator> = (0..3)
                .map(|_| DensityOperator::new(vec![Register::new("B", 3)], random::density(&mut rng, 3, 2)).unwrap())
                .collect();
            let c = CQState::from_parts(random::simplex(&mut rng, 3), conds).unwrap();
            let r = i_max_cq(&c, 0.0).unwrap();
            assert!(r.duality_gap >= 0.0);
            assert!(r.value >= -1e-9);
            assert!(r.primal >= r.dual - 1e-12);
        }
    }

    #[test]
    fn i_max_smoothing_drops_rare_symbols() {
        let c = cq(&[0.95, 0.05], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = i_max_cq(&c, 0.06).unwrap();
        assert_eq!(r.smoothed_out, vec!["1".to_string()]);
        assert!(close(r.value, 0.0, 1e-6));
    }
}
