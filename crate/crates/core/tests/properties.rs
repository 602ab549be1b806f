use num_complex::Complex64 as C64;
use proptest::prelude::*;
use puredist_core::entropy::{h_h, h_h_cond_cq, h_max_smooth, h_min_cq_smoothed, h_prime_max, h_tilde_max, i_max_cq};
use puredist_core::linalg::{eig_hermitian, fidelity, trace_distance, ComplexMatrix};
use puredist_core::povm::{compress_measurement, control, NiceParams};
use puredist_core::protocols::{run_fewqubits_with, run_kd_oneshot_with};
use puredist_core::random;
use puredist_core::states::{dephase, DensityOperator, DephasingChannel, Povm, PureState, Register};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eps_strategy() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.01, 0.05, 0.1])
}

fn bipartite(r: &mut ChaCha8Rng, da: usize, db: usize, rank: usize) -> DensityOperator {
    DensityOperator::new(
        vec![Register::new("A", da), Register::new("B", db)],
        random::density(r, da * db, rank.min(da * db)),
    )
    .unwrap()
}

fn eye_err(m: &ComplexMatrix) -> f64 {
    (m - &ComplexMatrix::identity(m.rows)).max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eig_reconstructs(seed: u64, n in 2usize..=16) {
        let m = random::hermitian(&mut rng(seed), n);
        let sp = eig_hermitian(&m).unwrap();
        let rebuilt = sp.apply(|x| x);
        prop_assert!((&m - &rebuilt).frobenius() <= 1e-8);
    }

    #[test]
    fn partial_trace_keeps_trace_and_positivity(seed: u64, da in 2usize..=4, db in 2usize..=4, rank in 1usize..=16) {
        let rho = bipartite(&mut rng(seed), da, db, rank);
        for keep in [["A"], ["B"]] {
            let red = rho.partial_trace(&keep).unwrap();
            prop_assert!((red.matrix().trace_re() - 1.0).abs() <= 1e-10);
            prop_assert!(red.eigenvalues().iter().all(|&x| x >= -1e-10));
        }
    }

    #[test]
    fn fuchs_van_de_graaf(seed: u64, n in 2usize..=6, ra in 1usize..=6, rb in 1usize..=6) {
        let mut r = rng(seed);
        let a = random::density(&mut r, n, ra.min(n));
        let b = random::density(&mut r, n, rb.min(n));
        let f = fidelity(&a, &b).unwrap();
        let t = trace_distance(&a, &b).unwrap();
        prop_assert!(2.0 * (1.0 - f) <= t + 1e-8);
        prop_assert!(t <= 2.0 * (1.0 - f * f).max(0.0).sqrt() + 1e-8);
    }

    #[test]
    fn purify_then_trace_keeps_spectrum(seed: u64, n in 2usize..=6, rank in 1usize..=6) {
        let rho = DensityOperator::single("A", random::density(&mut rng(seed), n, rank.min(n))).unwrap();
        let back = rho.purify("R").unwrap().reduced(&["A"]).unwrap();
        for (x, y) in rho.eigenvalues().iter().zip(back.eigenvalues()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn dephasing_idempotent_and_unital(seed: u64, n in 2usize..=6) {
        let ch = DephasingChannel::computational(n, "A", "A");
        let rho = DensityOperator::single("A", random::density(&mut rng(seed), n, n)).unwrap();
        let once = dephase(&rho, &ch).unwrap();
        let twice = dephase(&once, &ch).unwrap();
        prop_assert!(once.matrix().approx_eq(twice.matrix(), 1e-12));
        let mm = DensityOperator::maximally_mixed("A", n);
        prop_assert!(dephase(&mm, &ch).unwrap().matrix().approx_eq(mm.matrix(), 1e-12));
    }

    #[test]
    fn control_state_keeps_rb_marginal(seed: u64, da in 2usize..=4, db in 2usize..=3, coarse: bool) {
        let mut r = rng(seed);
        let psi = bipartite(&mut r, da, db, 2).purify("R").unwrap();
        let povm = if coarse {
            let mut lo = vec![0.0; da];
            lo[0] = 1.0;
            let hi: Vec<f64> = lo.iter().map(|x| 1.0 - x).collect();
            Povm::from_elements(vec![ComplexMatrix::from_diag(&lo), ComplexMatrix::from_diag(&hi)]).unwrap()
        } else {
            Povm::basis(da)
        };
        let cq = control(&psi, &povm).unwrap();
        prop_assert!((cq.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        let direct = psi.reduced(&["B", "R"]).unwrap();
        prop_assert!(cq.average().matrix().approx_eq(direct.matrix(), 1e-9));
    }

    #[test]
    fn rank1_refinement_is_a_povm(seed: u64, n in 2usize..=5, parts in 1usize..=3) {
        let u = random::unitary(&mut rng(seed), n);
        let parts = parts.min(n);
        let elements: Vec<ComplexMatrix> = (0..parts)
            .map(|p| {
                let mut m = ComplexMatrix::zeros(n, n);
                for i in (p..n).step_by(parts) {
                    m = &m + &ComplexMatrix::outer(&u.col(i));
                }
                m.hermitize()
            })
            .collect();
        let (refined, parent) = Povm::from_elements(elements).unwrap().rank1_refine();
        prop_assert_eq!(parent.len(), refined.len());
        let mut sum = ComplexMatrix::zeros(n, n);
        for e in &refined.elements {
            prop_assert!(eig_hermitian(e).unwrap().min() >= -1e-10);
            sum = &sum + e;
        }
        prop_assert!(eye_err(&sum) <= 1e-9);
    }

    #[test]
    fn entropy_ordering(seed: u64, n in 2usize..=8, rank in 1usize..=8, eps in eps_strategy()) {
        let rho = DensityOperator::single("A", random::density(&mut rng(seed), n, rank.min(n))).unwrap();
        let hm = h_max_smooth(&rho, eps).unwrap();
        let ht = h_tilde_max(&rho, eps).unwrap();
        let hp = h_prime_max(&rho, eps).unwrap();
        prop_assert!(hm <= ht + 1e-7);
        prop_assert!(ht <= hp + 1e-7);
        prop_assert!(hp <= (n as f64 / eps).log2() + 1e-7);
    }

    #[test]
    fn purity_never_grows_under_local_steps(seed: u64, da in 2usize..=4, db in 2usize..=3, rank in 1usize..=12, eps in eps_strategy()) {
        let mut r = rng(seed);
        let rho = bipartite(&mut r, da, db, rank);
        let purity = |s: &DensityOperator| (s.dim() as f64).log2() - h_h(s, eps).unwrap().value;
        let start = purity(&rho);
        // Local unitary.
        let u = random::unitary(&mut r, da).kron(&random::unitary(&mut r, db));
        prop_assert!((purity(&rho.evolve(&u).unwrap()) - start).abs() <= 1e-7);
        // Discarding B.
        prop_assert!(purity(&rho.partial_trace(&["A"]).unwrap()) <= start + 1e-7);
        // Dephasing B.
        let ch = DephasingChannel::computational(db, "B", "B");
        prop_assert!(purity(&dephase(&rho, &ch).unwrap()) <= start + 1e-7);
        // A borrowed pure ancilla adds exactly its own size.
        let anc = DensityOperator::diagonal("C", &[1.0, 0.0]).unwrap();
        prop_assert!((purity(&rho.tensor(&anc).unwrap()) - 1.0 - start).abs() <= 1e-7);
    }

    #[test]
    fn refinement_lowers_conditional_min_entropy(seed: u64, da in 2usize..=4, db in 2usize..=3, eps in eps_strategy()) {
        let mut r = rng(seed);
        let psi = bipartite(&mut r, da, db, 2).purify("R").unwrap();
        let u = random::unitary(&mut r, da);
        let half = da / 2;
        let proj = |cols: std::ops::Range<usize>| {
            let mut m = ComplexMatrix::zeros(da, da);
            for i in cols {
                m = &m + &ComplexMatrix::outer(&u.col(i));
            }
            m.hermitize()
        };
        let parent = Povm::from_elements(vec![proj(0..half), proj(half..da)]).unwrap();
        let (refined, _) = parent.rank1_refine();
        let hb = |p: &Povm| h_min_cq_smoothed(&control(&psi, p).unwrap().partial_trace(&["B"]).unwrap(), eps).unwrap();
        prop_assert!(hb(&refined) <= hb(&parent) + 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compressed_rows_are_povms(seed: u64, da in 2usize..=4, k in 1usize..=4, l in 1usize..=16) {
        let mut r = rng(seed);
        let psi = bipartite(&mut r, da, 2, 2).purify("R").unwrap();
        let cm = compress_measurement(&psi, &Povm::basis(da), k, l, seed).unwrap();
        for kk in 0..k {
            let theta = cm.theta(kk).unwrap();
            let mut sum = ComplexMatrix::zeros(da, da);
            for e in &theta.elements {
                prop_assert!(eig_hermitian(e).unwrap().min() >= -1e-10);
                sum = &sum + e;
            }
            prop_assert!(eye_err(&sum) <= 1e-8);
        }
    }

    #[test]
    fn transcripts_are_exact_and_communicate_within_imax(seed: u64, n in 2usize..=4) {
        let eps = 0.1;
        let params = NiceParams::new(eps);
        // Perfectly correlated classical state with random marginal.
        let p = random::simplex(&mut rng(seed), n);
        let mut v = vec![C64::new(0.0, 0.0); n * n];
        for (a, pa) in p.iter().enumerate() {
            v[a * n + a] = C64::new(pa.sqrt(), 0.0);
        }
        let psi = PureState::new(vec![Register::new("A", n), Register::new("B", n)], v).unwrap();
        let povm = Povm::basis(n);
        let imax = i_max_cq(&control(&psi, &povm).unwrap(), eps.powi(4)).unwrap().value;
        let l = 1usize << (imax + params.slack).ceil() as u32;
        let kd = run_kd_oneshot_with(&psi, &povm, 4, l, eps, seed, params).unwrap();
        let (fq, _) = run_fewqubits_with(&psi, &povm, 4, l, eps, seed, params).unwrap();
        for t in [kd, fq] {
            prop_assert!(t.check());
            prop_assert!(t.final_error >= 0.0 && t.final_error <= 2.0 + 1e-12);
            // One bit for rounding L up to a power of two, one for the ⊥ label.
            prop_assert!(t.communication as f64 <= imax + params.slack + 2.0);
        }
        // Sanity on the conditional entropy used for Bob.
        prop_assert!(h_h_cond_cq(&control(&psi, &povm).unwrap().partial_trace(&["B"]).unwrap(), eps).unwrap().value <= 1e-7);
    }
}
