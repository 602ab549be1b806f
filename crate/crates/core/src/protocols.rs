//! Distillation protocols simulated on explicit state vectors.
//!
//! Inputs are pure states on registers `A`, `B`, `R` (R may be one-dimensional).
//! Every transcript's `final_error` is the trace distance between the produced
//! state on A_p ⊗ B_p and |0…0⟩, computed from the full vector.

use crate::entropy::{h_h, h_h_cond_cq, h_h_test, h_min_cq_smoothed, i_max_cq};
use crate::error::{check_eps, Error, Result};
use crate::linalg::{
    apply_factor, eig_hermitian, log2, reduced_from_vector, svd, trace_norm, ComplexMatrix, Spectrum, C64, SUPPORT_TOL, ZERO,
};
use crate::povm::{
    branch_states, compress_measurement, nice_sets, row_errors, sqrt_thetas, CompressedMeasurement, NiceParams,
    ALICE, BOB, REFERENCE,
};
use crate::states::{
    control_state, control_state_with_a, dims_map, DensityOperator, Povm, ProtocolTranscript, PureState, RateBounds,
    Register,
};
use serde::Serialize;

const GARBAGE_TOL: f64 = 1e-12;
const BRANCH_MIN: f64 = 1e-14;

/// Isometry from a source register onto A_p ⊗ A_g (A_p first).
#[derive(Clone, Debug, Serialize)]
pub struct DistillationIsometry {
    pub source: Register,
    pub a_p_qubits: u32,
    pub a_p_dim: usize,
    pub a_g_dim: usize,
    pub kept_dim: usize,
    #[serde(skip)]
    pub matrix: ComplexMatrix,
}

impl DistillationIsometry {
    /// max |V†V − I|.
    pub fn isometry_error(&self) -> f64 {
        let g = self.matrix.adjoint().matmul(&self.matrix);
        (&g - &ComplexMatrix::identity(g.rows)).max_abs()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalDistillation {
    pub isometry: DistillationIsometry,
    pub error: f64,
}

/// Output layout shared by all branches of a conditional distillation.
#[derive(Clone, Debug)]
struct Layout {
    a_p_qubits: u32,
    a_p_dim: usize,
    a_g_dim: usize,
    kept: usize,
}

fn layout(d: usize, kept: usize) -> Layout {
    let a_p_qubits = (log2(d as f64) - log2(kept as f64) + 1e-12).floor().max(0.0) as u32;
    let a_p_dim = 1usize << a_p_qubits;
    let a_g_dim = d.div_ceil(a_p_dim);
    Layout { a_p_qubits, a_p_dim, a_g_dim, kept }
}

/// Smallest g with Σ_x P(x)·(1 − weight of the top g eigenvalues of ρ_x) ≤ eps.
fn common_kept(branches: &[(f64, &Spectrum)], d: usize, eps: f64) -> usize {
    let desc: Vec<Vec<f64>> =
        branches.iter().map(|(_, sp)| sp.values.iter().rev().map(|v| v.max(0.0)).collect()).collect();
    let total: f64 = branches.iter().map(|b| b.0).sum();
    for g in 1..=d {
        let lost: f64 = branches
            .iter()
            .zip(&desc)
            .map(|((p, _), ev)| p * (1.0 - ev[..g.min(ev.len())].iter().sum::<f64>()).max(0.0))
            .sum();
        if lost <= eps * total + GARBAGE_TOL {
            return g;
        }
    }
    d
}

/// Map the top `kept` eigenvectors to |0⟩^{A_p}|s⟩^{A_g} and the rest to the
/// next free output slots.
fn branch_isometry(sp: &Spectrum, lay: &Layout) -> ComplexMatrix {
    let d = sp.dim();
    let mut u = ComplexMatrix::zeros(lay.a_p_dim * lay.a_g_dim, d);
    // Output slot s < A_g is |0⟩|s⟩; eigenvectors go in descending order.
    for (slot, i) in (0..d).rev().enumerate() {
        for c in 0..d {
            u[(slot, c)] = sp.vectors[(c, i)].conj();
        }
    }
    u
}

/// Canonical basis isomorphism B ≅ B_p ⊗ B_g.
fn relabel_isometry(d: usize, lay: &Layout) -> ComplexMatrix {
    let mut m = ComplexMatrix::zeros(lay.a_p_dim * lay.a_g_dim, d);
    for i in 0..d {
        m[(i, i)] = C64::new(1.0, 0.0);
    }
    m
}

fn purity_error(sigma: &ComplexMatrix) -> Result<f64> {
    let mut target = ComplexMatrix::zeros(sigma.rows, sigma.cols);
    target[(0, 0)] = C64::new(1.0, 0.0);
    trace_norm(&(sigma - &target).hermitize())
}

pub fn local_distill(rho: &DensityOperator, eps: f64) -> Result<LocalDistillation> {
    check_eps(eps)?;
    let d = rho.dim();
    let sp = rho.spectrum();
    let kept = common_kept(&[(1.0, sp)], d, eps);
    let lay = layout(d, kept);
    let u = branch_isometry(sp, &lay);
    let out = u.matmul(rho.matrix()).matmul(&u.adjoint());
    let sigma = crate::linalg::partial_trace_dims(&out, &[lay.a_p_dim, lay.a_g_dim], &[0]);
    let error = purity_error(&sigma)?;
    let budget = 2.0 * eps.sqrt() + eps;
    if error > budget + 1e-9 {
        return Err(Error::Invalid(format!("local distillation error {error} exceeds {budget}")));
    }
    let source = Register::new(&rho.labels().join(""), d);
    Ok(LocalDistillation {
        isometry: DistillationIsometry {
            source,
            a_p_qubits: lay.a_p_qubits,
            a_p_dim: lay.a_p_dim,
            a_g_dim: lay.a_g_dim,
            kept_dim: lay.kept,
            matrix: u,
        },
        error,
    })
}

/// One branch of a two-sided protocol: probability, normalized vector on (A, B, R).
struct Branch {
    prob: f64,
    vec: Vec<C64>,
}

fn abr_dims(psi: &PureState) -> Result<[usize; 3]> {
    let labels: Vec<&str> = psi.registers().iter().map(|r| r.label.as_str()).collect();
    if labels != [ALICE, BOB, REFERENCE] {
        return Err(Error::UnknownRegister(format!("expected registers A, B, R; found {}", labels.join(", "))));
    }
    let d = psi.dims();
    Ok([d[0], d[1], d[2]])
}

/// Attach a one-dimensional R if the state has only A and B.
pub fn with_reference(psi: &PureState) -> Result<PureState> {
    if psi.has(REFERENCE) {
        return Ok(psi.clone());
    }
    PureState::product(psi, &PureState::new(vec![Register::new(REFERENCE, 1)], vec![C64::new(1.0, 0.0)])?)
}

/// Purify a state on A and B into R.
pub fn purify_ab(rho: &DensityOperator) -> Result<PureState> {
    if rho.labels() != [ALICE, BOB] {
        return Err(Error::UnknownRegister(format!("expected registers A, B; found {}", rho.labels().join(", "))));
    }
    rho.purify(REFERENCE)
}

struct Sides {
    alice: Layout,
    bob: Layout,
    u: Vec<ComplexMatrix>,
    v: Vec<ComplexMatrix>,
}

/// Common-garbage distillation on both sides, one isometry per branch.
fn plan_sides(branches: &[Branch], dims: [usize; 3], eps: f64) -> Result<Sides> {
    let specs_a: Vec<Spectrum> = branches
        .iter()
        .map(|b| eig_hermitian(&reduced_from_vector(&b.vec, &dims, &[0]).hermitize()))
        .collect::<Result<_>>()?;
    let specs_b: Vec<Spectrum> = branches
        .iter()
        .map(|b| eig_hermitian(&reduced_from_vector(&b.vec, &dims, &[1]).hermitize()))
        .collect::<Result<_>>()?;
    let wa: Vec<(f64, &Spectrum)> = branches.iter().zip(&specs_a).map(|(b, s)| (b.prob, s)).collect();
    let wb: Vec<(f64, &Spectrum)> = branches.iter().zip(&specs_b).map(|(b, s)| (b.prob, s)).collect();
    let alice = layout(dims[0], common_kept(&wa, dims[0], eps));
    let bob = layout(dims[1], common_kept(&wb, dims[1], eps));
    let u = specs_a.iter().map(|s| branch_isometry(s, &alice)).collect();
    let v = specs_b.iter().map(|s| branch_isometry(s, &bob)).collect();
    Ok(Sides { alice, bob, u, v })
}

/// Σ_branches P·Tr_rest[(U ⊗ V)|v⟩⟨v|] on A_p ⊗ B_p.
fn output_state(branches: &[Branch], dims: [usize; 3], sides: &Sides) -> ComplexMatrix {
    let (a, b) = (&sides.alice, &sides.bob);
    let mut sigma = ComplexMatrix::zeros(a.a_p_dim * b.a_p_dim, a.a_p_dim * b.a_p_dim);
    for (i, br) in branches.iter().enumerate() {
        let w = apply_factor(&br.vec, &dims, 0, &sides.u[i]);
        let d1 = [a.a_p_dim * a.a_g_dim, dims[1], dims[2]];
        let w = apply_factor(&w, &d1, 1, &sides.v[i]);
        let d2 = [a.a_p_dim, a.a_g_dim, b.a_p_dim, b.a_g_dim, dims[2]];
        sigma = &sigma + &reduced_from_vector(&w, &d2, &[0, 2]).scale(br.prob);
    }
    sigma.hermitize()
}

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

pub fn default_slack(eps: f64) -> f64 {
    (1.0 / eps).log2()
}

fn measured_branches(psi: &PureState, ops: &[(f64, ComplexMatrix)]) -> Result<Vec<Branch>> {
    let mut out = Vec::new();
    for (p, op) in ops {
        if *p < BRANCH_MIN {
            continue;
        }
        let v = psi.apply_local(op, ALICE)?;
        let n = crate::linalg::norm(&v);
        if n < 1e-300 {
            continue;
        }
        out.push(Branch { prob: *p, vec: v.into_iter().map(|z| z / n).collect() });
    }
    Ok(out)
}

/// Conditional entropies H_H(A|X) and H_H(B|X) of the post-measurement states.
fn conditional_hh(psi: &PureState, povm: &Povm, eps: f64) -> Result<(f64, f64)> {
    let full = control_state_with_a(psi, povm, ALICE)?;
    let a = h_h_cond_cq(&full.partial_trace(&[ALICE])?, eps)?.value;
    let b = h_h_cond_cq(&full.partial_trace(&[BOB])?, eps)?.value;
    Ok((a, b))
}

pub fn run_protocol_a(psi: &PureState, povm: &Povm, eps: f64) -> Result<ProtocolTranscript> {
    run_protocol_a_with(psi, povm, eps, default_slack(eps))
}

pub fn run_protocol_a_with(psi: &PureState, povm: &Povm, eps: f64, slack: f64) -> Result<ProtocolTranscript> {
    check_eps(eps)?;
    let psi = with_reference(psi)?;
    let dims = abr_dims(&psi)?;
    let roots = povm.sqrt_elements()?;
    let rho_a = psi.reduced_matrix(&[ALICE])?;
    let ops: Vec<(f64, ComplexMatrix)> =
        povm.elements.iter().zip(roots).map(|(e, r)| (e.trace_product(&rho_a).re, r)).collect();
    let branches = measured_branches(&psi, &ops)?;
    let sides = plan_sides(&branches, dims, eps)?;
    let sigma = output_state(&branches, dims, &sides);
    let error = purity_error(&sigma)?;

    let n_x = povm.len();
    let borrowed = ceil_log2(n_x);
    let mut t = ProtocolTranscript::new(
        "protocol-a",
        None,
        dims_map(psi.registers()),
        eps,
        sides.alice.a_p_qubits,
        sides.bob.a_p_qubits,
        borrowed,
        borrowed,
        error,
        slack,
    );
    let (ha, hb) = conditional_hh(&psi, povm, eps * eps)?;
    let (la, lb) = (log2(dims[0] as f64), log2(dims[1] as f64));
    t.bounds = RateBounds {
        alice_bits: la - ha,
        bob_bits: lb - hb,
        borrowed_bits: log2(n_x as f64),
        formula: la - ha + lb - hb - log2(n_x as f64),
    };
    Ok(t)
}

/// Branches of the fixed-k coherent measurement Θ(k), grouped by decoded symbol
/// (pairs with the same symbol leave identical states), ⊥ last.
fn kd_branches(cm: &CompressedMeasurement, psi: &PureState, k: usize) -> Result<Vec<Branch>> {
    let (roots, bottoms) = sqrt_thetas(cm)?;
    let counts = cm.counts(k);
    let mut ops: Vec<(f64, ComplexMatrix)> = counts
        .iter()
        .zip(roots)
        .map(|(&n, r)| (n as f64 * cm.c_rows[k] / cm.l as f64, r))
        .collect();
    ops.push((cm.bot_mass(k), bottoms[k].clone()));
    measured_branches(psi, &ops)
}

/// Fixed-k protocol: coherent Θ(k) into L_A, per-outcome distillation on both
/// sides, L_A dephased to Bob.
pub fn run_kd_fixed_k(
    cm: &CompressedMeasurement,
    psi: &PureState,
    povm: &Povm,
    k: usize,
    eps: f64,
    slack: f64,
) -> Result<ProtocolTranscript> {
    let t = kd_fixed_k_counts(cm, psi, k, eps, slack)?;
    finish_kd(t, cm, psi, povm, eps, slack)
}

fn kd_fixed_k_counts(
    cm: &CompressedMeasurement,
    psi: &PureState,
    k: usize,
    eps: f64,
    slack: f64,
) -> Result<ProtocolTranscript> {
    check_eps(eps)?;
    let dims = abr_dims(psi)?;
    if k >= cm.k {
        return Err(Error::Invalid(format!("row {k} outside [0, {})", cm.k)));
    }
    let branches = kd_branches(cm, psi, k)?;
    let sides = plan_sides(&branches, dims, eps)?;
    let sigma = output_state(&branches, dims, &sides);
    let error = purity_error(&sigma)?;
    let comm = ceil_log2(cm.l + 1);
    let mut t = ProtocolTranscript::new(
        "kd-oneshot",
        Some(cm.seed),
        dims_map(psi.registers()),
        eps,
        sides.alice.a_p_qubits,
        sides.bob.a_p_qubits,
        comm,
        comm,
        error,
        slack,
    );
    if cm.bot_mass(k) > BRANCH_MIN {
        t.flags.push(format!("bot-routed:{}", cm.symbols[cm.bot_symbol]));
    }
    t.flags.extend(cm.warnings.iter().cloned());
    Ok(t)
}

fn finish_kd(
    mut t: ProtocolTranscript,
    cm: &CompressedMeasurement,
    psi: &PureState,
    povm: &Povm,
    eps: f64,
    slack: f64,
) -> Result<ProtocolTranscript> {
    let dims = abr_dims(psi)?;
    let (ha, hb) = conditional_hh(psi, povm, eps)?;
    let imax = i_max_cq(&control_state(psi, povm, ALICE)?, eps.powi(4))?.value;
    let (la, lb) = (log2(dims[0] as f64), log2(dims[1] as f64));
    t.bounds = RateBounds {
        alice_bits: la - ha,
        bob_bits: lb - hb,
        borrowed_bits: imax + slack,
        formula: la - ha + lb - hb - imax,
    };
    let _ = cm;
    Ok(t)
}

#[derive(Clone, Debug, Serialize)]
pub struct GoodK {
    pub k: usize,
    /// Exact final error of the fixed-k protocol for every row.
    pub per_k_error: Vec<f64>,
    /// Rows meeting both selection conditions.
    pub candidates: Vec<usize>,
    pub row_errors: Vec<f64>,
}

/// Pick k among rows with many nice outcomes (T′) whose own compression error is
/// at most ε^{1/4} (T), minimizing the fixed-k protocol error; ties go to the
/// lowest index.
pub fn find_good_k(
    cm: &CompressedMeasurement,
    psi: &PureState,
    povm: &Povm,
    eps: f64,
    params: NiceParams,
) -> Result<GoodK> {
    let psi = with_reference(psi)?;
    let ns = nice_sets(cm, &psi, povm, eps, params)?;
    let rows = row_errors(cm, &psi, povm)?;
    let per_k_error: Vec<f64> = (0..cm.k)
        .map(|k| Ok(kd_fixed_k_counts(cm, &psi, k, eps, params.slack)?.final_error))
        .collect::<Result<_>>()?;
    let limit = eps.powf(0.25);
    let candidates: Vec<usize> = ns.t_prime.iter().copied().filter(|&k| rows[k] <= limit).collect();
    let mut best: Option<usize> = None;
    for &k in &candidates {
        if best.is_none_or(|b| per_k_error[k] < per_k_error[b]) {
            best = Some(k);
        }
    }
    match best {
        Some(k) => Ok(GoodK { k, per_k_error, candidates, row_errors: rows }),
        None => Err(Error::NoGoodK(format!(
            "no row of the compressed measurement qualifies (K = {}, L = {}); raise L or K",
            cm.k, cm.l
        ))),
    }
}

pub fn run_kd_oneshot(
    psi: &PureState,
    povm: &Povm,
    k: usize,
    l: usize,
    eps: f64,
    seed: u64,
) -> Result<ProtocolTranscript> {
    run_kd_oneshot_with(psi, povm, k, l, eps, seed, NiceParams::new(eps))
}

pub fn run_kd_oneshot_with(
    psi: &PureState,
    povm: &Povm,
    k: usize,
    l: usize,
    eps: f64,
    seed: u64,
    params: NiceParams,
) -> Result<ProtocolTranscript> {
    check_eps(eps)?;
    let psi = with_reference(psi)?;
    let cm = compress_measurement(&psi, povm, k, l, seed)?;
    let good = find_good_k(&cm, &psi, povm, eps, params)?;
    run_kd_fixed_k(&cm, &psi, povm, good.k, eps, params.slack)
}

#[derive(Clone, Debug, Serialize)]
pub struct Uhlmann {
    /// Maps P → Q.
    #[serde(skip)]
    pub unitary: ComplexMatrix,
    pub overlap: f64,
}

/// Uhlmann unitary for coefficient matrices `phi[p, r]` and `chi[q, r]`.
pub fn uhlmann_from_matrices(phi: &ComplexMatrix, chi: &ComplexMatrix) -> Result<Uhlmann> {
    if phi.rows != chi.rows || phi.cols != chi.cols {
        return Err(Error::Dimension(format!(
            "purifications differ in shape: {}x{} vs {}x{}",
            phi.rows, phi.cols, chi.rows, chi.cols
        )));
    }
    // ⟨χ|(U⊗I)|φ⟩ = Tr[U·T] with T = φ χ†; T = V Σ W† gives U = W V†.
    let t = phi.matmul(&chi.adjoint());
    let s = svd(&t)?;
    let unitary = s.v.matmul(&s.u.adjoint());
    let overlap = unitary.trace_product(&t).norm();
    Ok(Uhlmann { unitary, overlap })
}

/// Unitary on `p` (in `phi`) onto `q` (in `chi`) maximizing |⟨χ|(U ⊗ I)|φ⟩|.
/// All other registers must agree.
pub fn uhlmann_unitary(phi: &PureState, p: &str, chi: &PureState, q: &str) -> Result<Uhlmann> {
    let (mp, rest_p) = phi.split(p)?;
    let (mq, rest_q) = chi.split(q)?;
    if rest_p != rest_q {
        return Err(Error::Dimension("purifications act on different reference registers".into()));
    }
    uhlmann_from_matrices(&mp, &mq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FewQubitsCase {
    I,
    II,
}

impl FewQubitsCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            FewQubitsCase::I => "I",
            FewQubitsCase::II => "II",
        }
    }
}

/// Alice's output space A_p ⊗ M with M ⊇ L_A ⊗ A_g; `overflow` basis states of
/// M lie outside L_A ⊗ A_g.
#[derive(Clone, Debug, Serialize)]
pub struct Embedding {
    pub a_p: usize,
    pub l_a: usize,
    pub a_g: usize,
    pub overflow: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FewQubitsPlan {
    pub k: usize,
    pub case: FewQubitsCase,
    /// Case chosen by the entropic condition, which may differ from the concrete one.
    pub formula_case: FewQubitsCase,
    pub borrow: u32,
    pub a_p_bits: u32,
    pub b_p_bits: u32,
    pub embedding: Embedding,
    /// A_g demanded by the truncated conditionals (before fitting into |A|).
    pub a_g_required: usize,
    pub nice: Vec<usize>,
    pub log_a: f64,
    pub i_max: f64,
    pub h_rb: f64,
    pub h_rb_eps2: f64,
    pub h_min_rb: f64,
    pub slack: f64,
    /// I_max + H_H(RB|X) + slack, compared against log|A|.
    pub condition_lhs: f64,
    pub d_borrow: f64,
    pub c_borrow: f64,
    /// Case II borrow H_H^{ε²}(RB|X) − H_min^ε(RB|X) + slack.
    pub delta: f64,
    #[serde(skip)]
    truncations: Vec<Option<ComplexMatrix>>,
    #[serde(skip)]
    bob: Option<(Layout, Vec<ComplexMatrix>)>,
}

pub fn plan_fewqubits(
    psi: &PureState,
    povm: &Povm,
    cm: &CompressedMeasurement,
    k: usize,
    eps: f64,
    params: NiceParams,
) -> Result<FewQubitsPlan> {
    check_eps(eps)?;
    let psi = with_reference(psi)?;
    let dims = abr_dims(&psi)?;
    let ns = nice_sets(cm, &psi, povm, eps, params)?;
    let nice = ns.nice[k].clone();
    let states = branch_states(cm, &psi)?;
    let pair_eps = params.c * eps.powf(0.125);

    let mut truncations: Vec<Option<ComplexMatrix>> = vec![None; states.len()];
    let mut a_g_required = 1;
    for &l in &nice {
        let x = cm.decode[k][l];
        if truncations[x].is_none() {
            let (proj, _) = h_h_test(&states[x], pair_eps)?;
            let rank = eig_hermitian(&proj)?.values.iter().filter(|&&v| v > 0.5).count();
            a_g_required = a_g_required.max(rank.next_power_of_two());
            truncations[x] = Some(proj);
        }
    }

    let l = cm.l;
    let da = dims[0];
    let need = l * a_g_required;
    let (case, borrow, embedding) = if need <= da {
        let mut p = 1;
        while da % (2 * p) == 0 && 2 * p * need <= da {
            p *= 2;
        }
        let m = da / p;
        let a_g = m / l;
        (FewQubitsCase::I, 0, Embedding { a_p: p, l_a: l, a_g, overflow: m - l * a_g })
    } else {
        let b = ceil_log2(need.div_ceil(da));
        let m = da << b;
        let a_g = m / l;
        (FewQubitsCase::II, b, Embedding { a_p: 1, l_a: l, a_g, overflow: m - l * a_g })
    };

    let cq = control_state(&psi, povm, ALICE)?;
    let i_max = i_max_cq(&cq, eps.powi(4))?.value;
    let h_rb = h_h_cond_cq(&cq, params.c * eps)?.value;
    let h_rb_eps2 = h_h_cond_cq(&cq, eps * eps)?.value;
    let h_min_rb = h_min_cq_smoothed(&cq, eps)?;
    let log_a = log2(da as f64);
    let condition_lhs = i_max + h_rb + params.slack;
    let formula_case = if condition_lhs <= log_a { FewQubitsCase::I } else { FewQubitsCase::II };

    // Bob distils conditioned on nice ℓ, weights renormalized over NICE.
    let mut weights = vec![0.0; states.len()];
    for &l in &nice {
        weights[cm.decode[k][l]] += cm.q_kl[k][l];
    }
    let total: f64 = weights.iter().sum();
    let bob_specs: Vec<Spectrum> = states
        .iter()
        .map(|s| Ok(s.partial_trace(&[BOB])?.spectrum().clone()))
        .collect::<Result<_>>()?;
    let bob = if total > 0.0 {
        let wb: Vec<(f64, &Spectrum)> = weights
            .iter()
            .zip(&bob_specs)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, s)| (w / total, s))
            .collect();
        let lay = layout(dims[1], common_kept(&wb, dims[1], eps));
        let isos = bob_specs.iter().map(|s| branch_isometry(s, &lay)).collect();
        Some((lay, isos))
    } else {
        None
    };
    let b_p_bits = bob.as_ref().map_or(0, |(lay, _)| lay.a_p_qubits);

    Ok(FewQubitsPlan {
        k,
        case,
        formula_case,
        borrow,
        a_p_bits: embedding.a_p.trailing_zeros(),
        b_p_bits,
        embedding,
        a_g_required,
        nice,
        log_a,
        i_max,
        h_rb,
        h_rb_eps2,
        h_min_rb,
        slack: params.slack,
        condition_lhs,
        d_borrow: (condition_lhs - log_a).max(0.0),
        c_borrow: i_max + params.slack,
        delta: h_rb_eps2 - h_min_rb + params.slack,
        truncations,
        bob,
    })
}

pub fn run_fewqubits(
    psi: &PureState,
    povm: &Povm,
    k: usize,
    l: usize,
    eps: f64,
    seed: u64,
) -> Result<ProtocolTranscript> {
    run_fewqubits_with(psi, povm, k, l, eps, seed, NiceParams::new(eps)).map(|(t, _)| t)
}

pub fn run_fewqubits_with(
    psi: &PureState,
    povm: &Povm,
    k: usize,
    l: usize,
    eps: f64,
    seed: u64,
    params: NiceParams,
) -> Result<(ProtocolTranscript, FewQubitsPlan)> {
    check_eps(eps)?;
    let psi = with_reference(psi)?;
    let cm = compress_measurement(&psi, povm, k, l, seed)?;
    let good = find_good_k(&cm, &psi, povm, eps, params)?;
    let plan = plan_fewqubits(&psi, povm, &cm, good.k, eps, params)?;
    let t = execute_fewqubits(&psi, povm, &cm, &plan, eps)?;
    Ok((t, plan))
}

/// Run Alice's Uhlmann embedding and Bob's conditional distillation for a plan.
pub fn execute_fewqubits(
    psi: &PureState,
    povm: &Povm,
    cm: &CompressedMeasurement,
    plan: &FewQubitsPlan,
    eps: f64,
) -> Result<ProtocolTranscript> {
    let psi = with_reference(psi)?;
    let dims = abr_dims(&psi)?;
    if plan.nice.is_empty() {
        return Err(Error::NoGoodK(format!("row {} has no nice outcomes; raise L or K", plan.k)));
    }
    let k = plan.k;
    let emb = &plan.embedding;
    let m_dim = emb.l_a * emb.a_g + emb.overflow;
    let q_dim = emb.a_p * m_dim;
    let dbr = dims[1] * dims[2];

    // |ρ̃⟩ on L_A ⊗ A_g ⊗ BR, with A_p = |0⟩ in front.
    let states = branch_states(cm, &psi)?;
    let total: f64 = plan.nice.iter().map(|&l| cm.q_kl[k][l]).sum();
    let mut chi = ComplexMatrix::zeros(q_dim, dbr);
    for &l in &plan.nice {
        let x = cm.decode[k][l];
        let proj = plan.truncations[x].as_ref().expect("nice symbols carry a truncation");
        let cut = proj.matmul(states[x].matrix()).matmul(proj).hermitize();
        let t = cut.trace_re();
        let sp = eig_hermitian(&cut.scale(1.0 / t))?;
        let pl = (cm.q_kl[k][l] / total).sqrt();
        for (j, i) in (0..sp.dim()).rev().filter(|&i| sp.values[i] > SUPPORT_TOL).enumerate() {
            if j >= emb.a_g {
                return Err(Error::Invalid("truncated state does not fit in A_g".into()));
            }
            let amp = pl * sp.values[i].sqrt();
            for r in 0..dbr {
                chi[(l * emb.a_g + j, r)] = sp.vectors[(r, i)] * amp;
            }
        }
    }

    // |ψ⟩ (⊗ |0⟩^C in Case II) as a P × BR coefficient matrix.
    let (m_psi, _) = psi.split(ALICE)?;
    let c_dim = 1usize << plan.borrow;
    let mut phi = ComplexMatrix::zeros(dims[0] * c_dim, dbr);
    for a in 0..dims[0] {
        for r in 0..dbr {
            phi[(a * c_dim, r)] = m_psi[(a, r)];
        }
    }
    let uh = uhlmann_from_matrices(&phi, &chi)?;
    let out = uh.unitary.matmul(&phi);

    let (bob_lay, bob_isos) = plan.bob.as_ref().expect("plan has nice outcomes");
    let nice_set: std::collections::BTreeSet<usize> = plan.nice.iter().copied().collect();
    let relabel = relabel_isometry(dims[1], bob_lay);
    let bp = bob_lay.a_p_dim;
    let mut sigma = ComplexMatrix::zeros(emb.a_p * bp, emb.a_p * bp);
    let outcomes = emb.l_a + usize::from(emb.overflow > 0);
    for o in 0..outcomes {
        let (start, len) = if o < emb.l_a { (o * emb.a_g, emb.a_g) } else { (emb.l_a * emb.a_g, emb.overflow) };
        let mut v = vec![ZERO; emb.a_p * len * dbr];
        for p in 0..emb.a_p {
            for j in 0..len {
                let row = p * m_dim + start + j;
                for r in 0..dbr {
                    v[(p * len + j) * dbr + r] = out[(row, r)];
                }
            }
        }
        if crate::linalg::norm(&v) < 1e-14 {
            continue;
        }
        let iso = if o < emb.l_a && nice_set.contains(&o) { &bob_isos[cm.decode[k][o]] } else { &relabel };
        let w = apply_factor(&v, &[emb.a_p, len, dims[1], dims[2]], 2, iso);
        let d2 = [emb.a_p, len, bp, bob_lay.a_g_dim, dims[2]];
        sigma = &sigma + &reduced_from_vector(&w, &d2, &[0, 2]);
    }
    let error = purity_error(&sigma.hermitize())?;

    let mut t = ProtocolTranscript::new(
        "fewqubits",
        Some(cm.seed),
        dims_map(psi.registers()),
        eps,
        plan.a_p_bits,
        plan.b_p_bits,
        plan.borrow,
        ceil_log2(outcomes),
        error,
        plan.slack,
    );
    t.case = Some(plan.case.as_str().into());
    if plan.case != plan.formula_case {
        t.flags.push(format!("formula-case:{}", plan.formula_case.as_str()));
    }
    t.flags.push(format!("uhlmann-overlap:{:.12}", uh.overlap));
    let (_, hb) = conditional_hh(&psi, povm, eps)?;
    let lb = log2(dims[1] as f64);
    let alice_bits = match plan.formula_case {
        FewQubitsCase::I => plan.log_a - plan.condition_lhs,
        FewQubitsCase::II => 0.0,
    };
    let borrowed_bits = match plan.formula_case {
        FewQubitsCase::I => 0.0,
        FewQubitsCase::II => plan.delta,
    };
    t.bounds = RateBounds {
        alice_bits,
        bob_bits: lb - hb,
        borrowed_bits,
        formula: alice_bits + lb - hb - borrowed_bits,
    };
    Ok(t)
}

#[derive(Clone, Debug, Serialize)]
pub struct DerandReport {
    pub fraction: f64,
    pub threshold: f64,
    pub pass: bool,
    pub t_prime: usize,
    pub k: usize,
    pub l: usize,
}

/// Fraction of all (k, ℓ) pairs satisfying both nice inequalities, against 1 − ε^{1/8}.
pub fn verify_derandomization(
    psi: &PureState,
    povm: &Povm,
    cm: &CompressedMeasurement,
    eps: f64,
    params: NiceParams,
) -> Result<DerandReport> {
    let psi = with_reference(psi)?;
    let ns = nice_sets(cm, &psi, povm, eps, params)?;
    let threshold = 1.0 - eps.powf(0.125);
    Ok(DerandReport {
        fraction: ns.fraction,
        threshold,
        pass: ns.fraction >= threshold,
        t_prime: ns.t_prime.len(),
        k: cm.k,
        l: cm.l,
    })
}

/// log|A| − H_H^eps(A) of a pure state's A marginal.
pub fn local_purity(psi: &PureState, label: &str, eps: f64) -> Result<f64> {
    let rho = psi.reduced(&[label])?;
    Ok(log2(rho.dim() as f64) - h_h(&rho, eps)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fidelity;
    use crate::random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn abr(a: usize, b: usize, r: usize, amps: Vec<C64>) -> PureState {
        PureState::new(
            vec![Register::new("A", a), Register::new("B", b), Register::new("R", r)],
            amps,
        )
        .unwrap()
    }

    fn bell() -> PureState {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut v = vec![ZERO; 4];
        v[0] = C64::new(h, 0.0);
        v[3] = C64::new(h, 0.0);
        abr(2, 2, 1, v)
    }

    /// Σ_x √p(x)|x⟩_A|x⟩_B|x⟩_R.
    fn classical(p: &[f64]) -> PureState {
        let n = p.len();
        let mut v = vec![ZERO; n * n * n];
        for (x, &px) in p.iter().enumerate() {
            v[(x * n + x) * n + x] = C64::new(px.sqrt(), 0.0);
        }
        abr(n, n, n, v)
    }

    #[test]
    fn local_distill_examples() {
        let pure = DensityOperator::single("A", ComplexMatrix::from_diag(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        let r = local_distill(&pure, 0.1).unwrap();
        assert_eq!(r.isometry.a_p_qubits, 2);
        assert!(r.error < 1e-8);

        let mixed = DensityOperator::maximally_mixed("A", 4);
        assert_eq!(local_distill(&mixed, 0.1).unwrap().isometry.a_p_qubits, 0);

        let eigs = [0.6, 0.35, 0.01, 0.01, 0.01, 0.01, 0.01, 0.0];
        let rho = DensityOperator::diagonal("A", &eigs).unwrap();
        let r = local_distill(&rho, 0.06).unwrap();
        assert_eq!(r.isometry.kept_dim, 2);
        assert_eq!(r.isometry.a_p_qubits, 2);
        assert!(r.isometry.isometry_error() < 1e-9);
        assert!((r.error - 0.1).abs() < 1e-9);
    }

    #[test]
    fn protocol_a_trivial_povm_on_product() {
        // |0⟩_A |+⟩_B: both sides fully pure.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let psi = abr(2, 2, 1, vec![C64::new(h, 0.0), C64::new(h, 0.0), ZERO, ZERO]);
        let t = run_protocol_a(&psi, &Povm::trivial(2), 0.1).unwrap();
        assert_eq!((t.distilled_alice, t.distilled_bob, t.borrowed), (1, 1, 0));
        assert!(t.final_error < 1e-10);
        assert!(t.check());
    }

    #[test]
    fn protocol_a_bell_basis() {
        let t = run_protocol_a(&bell(), &Povm::basis(2), 0.1).unwrap();
        assert_eq!(t.distilled_alice, 1);
        assert_eq!(t.distilled_bob, 1);
        assert_eq!(t.borrowed, 1);
        assert!(t.final_error < 1e-10);
    }

    #[test]
    fn protocol_a_classical_matches_formula() {
        let psi = classical(&[0.5, 0.25, 0.125, 0.125]);
        let eps = 0.1;
        let t = run_protocol_a(&psi, &Povm::basis(4), eps).unwrap();
        assert!((t.net_rate as f64 - t.bounds.formula).abs() <= t.slack_bits + 1.0);
        assert!(t.final_error <= 4.0 * eps.sqrt());
    }

    #[test]
    fn uhlmann_matches_fidelity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let phi = ComplexMatrix::column(&random::pure(&mut rng, 6));
            let chi = ComplexMatrix::column(&random::pure(&mut rng, 6));
            let phi = ComplexMatrix { rows: 3, cols: 2, data: phi.data };
            let chi = ComplexMatrix { rows: 3, cols: 2, data: chi.data };
            let u = uhlmann_from_matrices(&phi, &chi).unwrap();
            // Marginals on the reference: (M†M)^T.
            let ra = phi.adjoint().matmul(&phi).transpose();
            let rb = chi.adjoint().matmul(&chi).transpose();
            let f = fidelity(&ra, &rb).unwrap();
            assert!((u.overlap - f).abs() < 1e-8);
            let g = u.unitary.adjoint().matmul(&u.unitary);
            assert!(g.approx_eq(&ComplexMatrix::identity(3), 1e-9));
        }
    }

    #[test]
    fn uhlmann_identical_states() {
        let psi = bell();
        let u = uhlmann_unitary(&psi, "A", &psi, "A").unwrap();
        assert!((u.overlap - 1.0).abs() < 1e-10);
    }

    #[test]
    fn kd_trivial_povm() {
        let psi = bell();
        let t = run_kd_oneshot(&psi, &Povm::trivial(2), 2, 4, 0.1, 3).unwrap();
        assert_eq!(t.borrowed, 3);
        assert!(t.final_error < 1e-8);
    }

    #[test]
    fn good_k_degenerate_l1() {
        let psi = bell();
        let cm = compress_measurement(&psi, &Povm::basis(2), 2, 1, 1).unwrap();
        let err = find_good_k(&cm, &psi, &Povm::basis(2), 0.1, NiceParams::new(0.1)).unwrap_err();
        assert!(matches!(err, Error::NoGoodK(_)));
    }

    #[test]
    fn good_k_trivial_is_zero() {
        let psi = bell();
        let povm = Povm::trivial(2);
        let cm = compress_measurement(&psi, &povm, 4, 4, 1).unwrap();
        assert_eq!(find_good_k(&cm, &psi, &povm, 0.1, NiceParams::new(0.1)).unwrap().k, 0);
    }

    #[test]
    fn fewqubits_trivial_product_case_one() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let psi = abr(4, 2, 1, vec![C64::new(h, 0.0), C64::new(h, 0.0), ZERO, ZERO, ZERO, ZERO, ZERO, ZERO]);
        let povm = Povm::trivial(4);
        let cm = compress_measurement(&psi, &povm, 1, 2, 1).unwrap();
        let plan = plan_fewqubits(&psi, &povm, &cm, 0, 0.1, NiceParams::new(0.1)).unwrap();
        assert_eq!(plan.case, FewQubitsCase::I);
        assert_eq!(plan.embedding.a_g, 1);
        assert_eq!(plan.embedding.a_p * plan.embedding.l_a * plan.embedding.a_g, 4);
        let t = execute_fewqubits(&psi, &povm, &cm, &plan, 0.1).unwrap();
        assert!(t.final_error < 1e-8, "{}", t.final_error);
        assert_eq!(t.distilled_alice, 1);
    }

    #[test]
    fn fewqubits_bell_basis() {
        let psi = classical(&[0.5, 0.5]);
        let (t, plan) = run_fewqubits_with(&psi, &Povm::basis(2), 2, 16, 0.1, 1, NiceParams::new(0.1)).unwrap();
        assert!(plan.d_borrow <= plan.slack + 1e-9);
        assert!(t.check());
    }

    #[test]
    fn derandomization_trivial() {
        let psi = bell();
        let povm = Povm::trivial(2);
        let cm = compress_measurement(&psi, &povm, 3, 3, 2).unwrap();
        let r = verify_derandomization(&psi, &povm, &cm, 0.1, NiceParams::new(0.1)).unwrap();
        assert_eq!(r.fraction, 1.0);
        assert!(r.pass);
    }
}
