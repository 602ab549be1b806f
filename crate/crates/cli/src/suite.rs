//! Lemma property suite behind `puredist verify`.

use puredist_core::entropy::{
    d_h, h_h, h_h_cond_cq, h_max_smooth, h_prime_max, h_tilde_max, i_max_cq, worst_case_set,
};
use puredist_core::linalg::{eig_hermitian, trace_distance, ComplexMatrix, C64};
use puredist_core::povm::{
    compress_measurement, control, validate_compression, NiceParams,
};
use puredist_core::protocols::verify_derandomization;
use puredist_core::random;
use puredist_core::states::{CQState, DensityOperator, DephasingChannel, Povm, PureState, Register};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

const TOL: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct LemmaResult {
    pub lemma: &'static str,
    pub module: &'static str,
    pub trials: usize,
    pub violations: usize,
    /// Largest amount by which a checked inequality failed (≤ 0 when all hold).
    pub worst_excess: f64,
    pub pass: bool,
}

struct Tally {
    trials: usize,
    violations: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Tally { trials: 0, violations: 0, worst: f64::NEG_INFINITY }
    }

    /// Records `lhs ≤ rhs` up to `tol`.
    fn le(&mut self, lhs: f64, rhs: f64, tol: f64) {
        self.trials += 1;
        let ex = lhs - rhs;
        self.worst = self.worst.max(ex);
        if !(ex <= tol) {
            self.violations += 1;
        }
    }

    fn eq(&mut self, a: f64, b: f64, tol: f64) {
        self.le((a - b).abs(), 0.0, tol);
    }
}

type Check = fn(&mut ChaCha8Rng, f64, &mut Tally);

pub const MANIFEST: [(&str, &str); 18] = [
    ("sandwich", "entropy"),
    ("ordering", "entropy"),
    ("purehh", "entropy"),
    ("puretensorsame", "entropy"),
    ("additivehh", "entropy"),
    ("subadditivity", "entropy"),
    ("upperboundhhdim", "entropy"),
    ("hhneg", "entropy"),
    ("hhzeroforconditionalpure", "entropy"),
    ("hhswitchforconditionalpure", "entropy"),
    ("dataprocessinghh-dephasing", "entropy"),
    ("dataprocessinghh-unital", "entropy"),
    ("averageToWorstcaseHH", "entropy"),
    ("neyman-pearson-lp", "entropy"),
    ("compressed-povm-valid", "povm"),
    ("compression-monotone-in-L", "povm"),
    ("bot-mass-at-rate", "povm"),
    ("derandomization-fraction", "povm"),
];

fn checks() -> [Check; 18] {
    [
        sandwich,
        ordering,
        purehh,
        puretensor,
        additive,
        subadditive,
        dimbound,
        hhneg,
        cond_pure,
        switch,
        dp_dephasing,
        dp_unital,
        worst_case,
        np_lp,
        povm_valid,
        monotone_in_l,
        bot_mass,
        derand,
    ]
}

/// Statistical lemmas run on a fixed instance family, not per trial.
fn is_statistical(name: &str) -> bool {
    matches!(name, "compression-monotone-in-L" | "bot-mass-at-rate" | "derandomization-fraction")
}

pub fn run(trials: usize, eps: Option<f64>, seed: u64) -> Vec<LemmaResult> {
    let eps_list: Vec<f64> = eps.map_or(vec![0.01, 0.05, 0.1], |e| vec![e]);
    let checks = checks();
    MANIFEST
        .par_iter()
        .zip(checks.par_iter())
        .enumerate()
        .map(|(i, (&(lemma, module), check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut t = Tally::new();
            let n = if is_statistical(lemma) { eps_list.len() } else { trials };
            for j in 0..n {
                check(&mut rng, eps_list[j % eps_list.len()], &mut t);
            }
            LemmaResult {
                lemma,
                module,
                trials: t.trials,
                violations: t.violations,
                worst_excess: t.worst,
                pass: t.violations == 0,
            }
        })
        .collect()
}

fn density(rng: &mut ChaCha8Rng, label: &str, d: usize) -> DensityOperator {
    let rank = rng.random_range(1..=d);
    DensityOperator::single(label, random::density(rng, d, rank)).unwrap()
}

fn bipartite(rng: &mut ChaCha8Rng) -> DensityOperator {
    let (da, db) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let rank = rng.random_range(1..=da * db);
    DensityOperator::new(
        vec![Register::new("A", da), Register::new("B", db)],
        random::density(rng, da * db, rank),
    )
    .unwrap()
}

fn hh(rho: &DensityOperator, eps: f64) -> f64 {
    h_h(rho, eps).unwrap().value
}

fn sandwich(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let d = rng.random_range(2..=8);
    let rho = density(rng, "A", d);
    let (h, ht) = (hh(&rho, eps), h_tilde_max(&rho, eps).unwrap());
    t.le(ht - 1.0, h, TOL);
    t.le(h, ht, TOL);
}

fn ordering(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let d = rng.random_range(2..=8);
    let rho = density(rng, "A", d);
    let hm = h_max_smooth(&rho, eps).unwrap();
    let ht = h_tilde_max(&rho, eps).unwrap();
    let hp = h_prime_max(&rho, eps).unwrap();
    t.le(hm, ht, TOL);
    t.le(ht, hp, TOL);
    t.le(hp, (d as f64 / eps).log2(), TOL);
}

fn purehh(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let (da, dr) = (rng.random_range(2..=8), rng.random_range(2..=8));
    let v = random::pure(rng, da * dr);
    let psi = PureState::new(vec![Register::new("A", da), Register::new("R", dr)], v).unwrap();
    t.eq(hh(&psi.reduced(&["A"]).unwrap(), eps), hh(&psi.reduced(&["R"]).unwrap(), eps), TOL);
}

fn puretensor(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let d = rng.random_range(2..=6);
    let rho = density(rng, "A", d);
    let dp = rng.random_range(2..=3);
    let phi = DensityOperator::single("P", ComplexMatrix::outer(&random::pure(rng, dp))).unwrap();
    t.eq(hh(&rho.tensor(&phi).unwrap(), eps), hh(&rho, eps), TOL);
}

fn additive(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let d = rng.random_range(2..=6);
    let rho = density(rng, "A", d);
    let m = rng.random_range(2..=4);
    let joint = rho.tensor(&DensityOperator::maximally_mixed("M", m)).unwrap();
    t.eq(hh(&joint, eps), hh(&rho, eps) + (m as f64).log2(), 1e-9);
}

fn subadditive(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let rab = bipartite(rng);
    let ha = hh(&rab.partial_trace(&["A"]).unwrap(), eps);
    let hb = hh(&rab.partial_trace(&["B"]).unwrap(), eps);
    t.le(hh(&rab, 3.0 * eps.sqrt()), ha + hb, TOL);
}

fn dimbound(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let rab = bipartite(rng);
    let ha = hh(&rab.partial_trace(&["A"]).unwrap(), eps);
    let db = rab.register_dim("B").unwrap() as f64;
    t.le(hh(&rab, eps), ha + db.log2(), TOL);
}

fn hhneg(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let d = rng.random_range(2..=8);
    let mut zero = ComplexMatrix::zeros(d, d);
    zero[(0, 0)] = C64::new(1.0, 0.0);
    let junk = random::density(rng, d, d);
    // Largest admixture that stays within ε of |0⟩⟨0|.
    let full = trace_distance(&junk, &zero).unwrap();
    let s = (eps / full).min(1.0) * rng.random::<f64>();
    let sigma = DensityOperator::single("A", (&zero.scale(1.0 - s) + &junk.scale(s)).hermitize()).unwrap();
    t.le(hh(&sigma, eps), 0.0, TOL);
}

fn pure_conditionals(rng: &mut ChaCha8Rng) -> CQState {
    let nx = rng.random_range(2..=6);
    let probs = random::simplex(rng, nx);
    let (ca, cb) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let conds = (0..nx)
        .map(|_| {
            let v = random::pure(rng, ca * cb);
            DensityOperator::new(vec![Register::new("A", ca), Register::new("B", cb)], ComplexMatrix::outer(&v))
                .unwrap()
        })
        .collect();
    CQState::from_parts(probs, conds).unwrap()
}

fn mixed_conditionals(rng: &mut ChaCha8Rng) -> CQState {
    let nx = rng.random_range(2..=6);
    let probs = random::simplex(rng, nx);
    let d = rng.random_range(2..=4);
    let conds = (0..nx).map(|_| density(rng, "B", d)).collect();
    CQState::from_parts(probs, conds).unwrap()
}

fn cond(cq: &CQState, eps: f64) -> f64 {
    h_h_cond_cq(cq, eps).unwrap().value
}

fn cond_pure(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    t.le(cond(&pure_conditionals(rng), eps), 0.0, TOL);
}

fn switch(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let cq = pure_conditionals(rng);
    let a = cond(&cq.partial_trace(&["A"]).unwrap(), eps);
    let b = cond(&cq.partial_trace(&["B"]).unwrap(), eps);
    t.eq(a, b, TOL);
}

fn dp_dephasing(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let cq = mixed_conditionals(rng);
    let ch = DephasingChannel::computational(cq.quantum_dim(), "B", "B");
    let out = cq.map_conditionals(|c| ch.apply(c)).unwrap();
    t.le(cond(&cq, eps), cond(&out, eps), TOL);
}

fn dp_unital(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let cq = mixed_conditionals(rng);
    let d = cq.quantum_dim();
    let us: Vec<ComplexMatrix> = (0..3).map(|_| random::unitary(rng, d)).collect();
    let qs = random::simplex(rng, 3);
    let out = cq
        .map_conditionals(|c| {
            let mut m = ComplexMatrix::zeros(d, d);
            for (u, q) in us.iter().zip(&qs) {
                m = &m + &u.conjugate(c.matrix()).scale(*q);
            }
            DensityOperator::normalized(c.registers().to_vec(), m.hermitize())
        })
        .unwrap();
    t.le(cond(&cq, eps), cond(&out, eps), TOL);
}

fn worst_case(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let cq = mixed_conditionals(rng);
    let (set, mass) = worst_case_set(&cq, eps).unwrap();
    let h = cond(&cq, eps);
    t.le(1.0 - 2.0 * eps.sqrt(), mass, 1e-12);
    for x in set {
        t.le(hh(&cq.conditionals[x], eps.sqrt()), h - eps.log2(), TOL);
    }
}

/// Vertex enumeration of min Σq·w over {Σp·w ≥ 1 − ε, 0 ≤ w ≤ 1}.
fn lp_vertices(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let n = p.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let on = |i: usize| mask & (1 << i) != 0;
        let ps: f64 = (0..n).filter(|&i| on(i)).map(|i| p[i]).sum();
        let qs: f64 = (0..n).filter(|&i| on(i)).map(|i| q[i]).sum();
        if ps >= 1.0 - eps {
            best = best.min(qs);
        }
        for j in (0..n).filter(|&j| !on(j) && p[j] > 0.0) {
            let w = (1.0 - eps - ps) / p[j];
            if (0.0..=1.0).contains(&w) {
                best = best.min(qs + w * q[j]);
            }
        }
    }
    -best.log2()
}

fn np_lp(rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let n = rng.random_range(2..=8);
    let p = random::simplex(rng, n);
    let q: Vec<f64> = random::simplex(rng, n).iter().map(|x| (x + 1e-3) / (1.0 + n as f64 * 1e-3)).collect();
    let u = random::unitary(rng, n);
    let rho = u.conjugate(&ComplexMatrix::from_diag(&p)).hermitize();
    let sigma = u.conjugate(&ComplexMatrix::from_diag(&q)).hermitize();
    t.eq(d_h(&rho, &sigma, eps).unwrap().value, lp_vertices(&p, &q, eps), 1e-8);
}

fn random_instance(rng: &mut ChaCha8Rng) -> (PureState, Povm) {
    let (da, db, dr) = (rng.random_range(2..=4), rng.random_range(2..=3), rng.random_range(1..=3));
    let v = random::pure(rng, da * db * dr);
    let psi = PureState::new(vec![Register::new("A", da), Register::new("B", db), Register::new("R", dr)], v).unwrap();
    (psi, Povm::basis(da))
}

fn povm_valid(rng: &mut ChaCha8Rng, _eps: f64, t: &mut Tally) {
    let (psi, povm) = random_instance(rng);
    let (k, l) = (rng.random_range(1..=4), rng.random_range(1..=16));
    let cm = compress_measurement(&psi, &povm, k, l, rng.random()).unwrap();
    for kk in 0..k {
        let theta = cm.theta(kk).unwrap();
        let d = theta.dim();
        let mut sum = ComplexMatrix::zeros(d, d);
        for e in &theta.elements {
            t.le(-eig_hermitian(e).unwrap().min(), 0.0, 1e-10);
            sum = &sum + e;
        }
        t.le((&sum - &ComplexMatrix::identity(d)).max_abs(), 0.0, 1e-8);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bell pair and a perfectly correlated classical ququart, each with the basis POVM.
fn fixed_instances() -> Vec<(PureState, Povm)> {
    let reg = |d| vec![Register::new("A", d), Register::new("B", d), Register::new("R", 1)];
    let corr = |p: &[f64]| {
        let n = p.len();
        let mut v = vec![C64::new(0.0, 0.0); n * n];
        for (a, pa) in p.iter().enumerate() {
            v[a * n + a] = C64::new(pa.sqrt(), 0.0);
        }
        PureState::new(reg(n), v).unwrap()
    };
    vec![(corr(&[0.5, 0.5]), Povm::basis(2)), (corr(&[0.4, 0.3, 0.2, 0.1]), Povm::basis(4))]
}

const SEEDS: std::ops::RangeInclusive<u64> = 1..=20;

fn monotone_in_l(_rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    for (psi, povm) in fixed_instances() {
        let meds: Vec<f64> = [16, 32, 64, 128]
            .iter()
            .map(|&l| {
                median(
                    SEEDS
                        .map(|s| {
                            let cm = compress_measurement(&psi, &povm, 4, l, s).unwrap();
                            validate_compression(&cm, &psi, &povm, eps).unwrap().ideal_vs_simulated
                        })
                        .collect(),
                )
            })
            .collect();
        for w in meds.windows(2) {
            t.le(w[1], w[0], 1e-12);
        }
    }
}

/// (K, L) meeting the compression rate conditions with the default slack.
fn rate_kl(psi: &PureState, povm: &Povm, eps: f64) -> (usize, usize) {
    let slack = NiceParams::new(eps).slack;
    let cq = control(psi, povm).unwrap();
    let imax = i_max_cq(&cq, eps.powi(4)).unwrap().value;
    let px = DensityOperator::diagonal("X", &cq.probs).unwrap();
    let hp = h_prime_max(&px, eps.powi(4)).unwrap();
    let log_l = (imax + slack).ceil().max(0.0) as u32;
    let log_k = (hp + slack - log_l as f64).ceil().max(0.0) as u32;
    (1 << log_k, 1 << log_l)
}

fn bot_mass(_rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    for (psi, povm) in fixed_instances() {
        let (k, l) = rate_kl(&psi, &povm, eps);
        let m = median(
            SEEDS
                .map(|s| {
                    let cm = compress_measurement(&psi, &povm, k, l, s).unwrap();
                    (0..k).map(|kk| cm.bot_mass(kk)).sum::<f64>() / k as f64
                })
                .collect(),
        );
        t.le(m, 5.0 * eps, 0.0);
    }
}

fn derand(_rng: &mut ChaCha8Rng, eps: f64, t: &mut Tally) {
    let params = NiceParams::new(eps);
    for (psi, povm) in fixed_instances() {
        let (_, l) = rate_kl(&psi, &povm, eps);
        let m = median(
            SEEDS
                .map(|s| {
                    let cm = compress_measurement(&psi, &povm, 8, l, s).unwrap();
                    verify_derandomization(&psi, &povm, &cm, eps, params).unwrap().fraction
                })
                .collect(),
        );
        t.le(1.0 - eps.powf(0.125), m, 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_and_checks_line_up() {
        assert_eq!(MANIFEST.len(), checks().len());
        let r = run(3, Some(0.1), 7);
        assert_eq!(r.len(), MANIFEST.len());
        assert!(r.iter().all(|x| x.trials > 0));
    }

    #[test]
    fn lp_vertices_simple() {
        // Two outcomes, ε = 0.1: w = (1, 0.8) on p = (0.5, 0.5).
        let v = lp_vertices(&[0.5, 0.5], &[0.5, 0.5], 0.1);
        assert!((v + 0.9f64.log2()).abs() < 1e-12);
    }
}
