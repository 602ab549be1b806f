//! Closed-form rate bounds and the ancilla comparison between the two
//! one-shot distributed protocols.

use crate::entropy::{h_h, h_max_smooth, h_min_cq_smoothed};
use crate::error::{check_eps, Result};
use crate::linalg::log2;
use crate::povm::{compress_measurement, control, NiceParams, ALICE, BOB};
use crate::protocols::{
    execute_fewqubits, find_good_k, plan_fewqubits, run_kd_fixed_k, with_reference, FewQubitsPlan,
};
use crate::states::{DensityOperator, Povm, ProtocolTranscript, PureState};
use serde::Serialize;

/// (lower, upper) on the local distillable purity, in bits.
pub fn local_purity_bounds(rho: &DensityOperator, eps: f64, slack: f64) -> Result<(f64, f64)> {
    check_eps(eps)?;
    let log_d = log2(rho.dim() as f64);
    let lower = log_d - h_h(rho, eps * eps / 9.0)?.value - slack - 1.0;
    let upper = log_d - h_h(rho, eps)?.value;
    Ok((lower, upper))
}

#[derive(Clone, Debug, Serialize)]
pub struct UpperBound {
    /// Bound evaluated with the supplied POVM.
    pub value: f64,
    /// Bound evaluated with the POVM's rank-one refinement.
    pub rank1: f64,
    pub h_max_a: f64,
    pub h_min_b_given_x: f64,
    pub f_eps: f64,
    pub g_eps: f64,
}

/// log|A| + log|B| − H_max^g(A) − H_min^f(B|X) for one POVM on A.
pub fn distributed_upper_bound(
    psi: &PureState,
    povm: &Povm,
    eps: f64,
    f_eps: Option<f64>,
    g_eps: Option<f64>,
) -> Result<UpperBound> {
    check_eps(eps)?;
    let f_eps = f_eps.unwrap_or(eps);
    let g_eps = g_eps.unwrap_or(eps);
    check_eps(f_eps)?;
    check_eps(g_eps)?;
    let psi = with_reference(psi)?;
    let rho_a = psi.reduced(&[ALICE])?;
    let log_ab = log2(rho_a.dim() as f64) + log2(psi.register_dim(BOB)? as f64);
    let h_max_a = h_max_smooth(&rho_a, g_eps)?;
    let eval = |p: &Povm| -> Result<f64> { h_min_cq_smoothed(&control(&psi, p)?.partial_trace(&[BOB])?, f_eps) };
    let h_min_b_given_x = eval(povm)?;
    let (refined, _) = povm.rank1_refine();
    let h_refined = eval(&refined)?;
    Ok(UpperBound {
        value: log_ab - h_max_a - h_min_b_given_x,
        rank1: log_ab - h_max_a - h_refined,
        h_max_a,
        h_min_b_given_x,
        f_eps,
        g_eps,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AncillaComparison {
    pub k: usize,
    pub c_borrow: f64,
    pub d_borrow: f64,
    pub margin: f64,
    /// c_borrow − d_borrow ≥ margin, checked only when margin > 0.
    pub holds: Option<bool>,
    pub kd: ProtocolTranscript,
    pub fewqubits: ProtocolTranscript,
    pub plan: FewQubitsPlan,
}

/// Run both protocols on the same compressed measurement and row.
pub fn ancilla_comparison(
    psi: &PureState,
    povm: &Povm,
    k: usize,
    l: usize,
    eps: f64,
    seed: u64,
    params: NiceParams,
) -> Result<AncillaComparison> {
    check_eps(eps)?;
    let psi = with_reference(psi)?;
    let cm = compress_measurement(&psi, povm, k, l, seed)?;
    let good = find_good_k(&cm, &psi, povm, eps, params)?;
    let kd = run_kd_fixed_k(&cm, &psi, povm, good.k, eps, params.slack)?;
    let plan = plan_fewqubits(&psi, povm, &cm, good.k, eps, params)?;
    let fewqubits = execute_fewqubits(&psi, povm, &cm, &plan, eps)?;
    let rho_a = psi.reduced(&[ALICE])?;
    let margin = log2(rho_a.dim() as f64) - h_h(&rho_a, eps)?.value - params.slack;
    let (c_borrow, d_borrow) = (plan.c_borrow, plan.d_borrow);
    Ok(AncillaComparison {
        k: good.k,
        c_borrow,
        d_borrow,
        margin,
        holds: (margin > 0.0).then_some(c_borrow - d_borrow >= margin),
        kd,
        fewqubits,
        plan,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub local_lower: f64,
    pub local_upper: f64,
    pub dist_upper: f64,
    pub dist_upper_rank1: f64,
    pub kd_rate: f64,
    pub fewqubits_rate: f64,
    pub c_borrow: f64,
    pub d_borrow: f64,
    pub margin: f64,
    pub slack_bits: f64,
    pub slack_convention: String,
}

impl RateReport {
    pub fn is_finite(&self) -> bool {
        [
            self.local_lower,
            self.local_upper,
            self.dist_upper,
            self.dist_upper_rank1,
            self.kd_rate,
            self.fewqubits_rate,
            self.c_borrow,
            self.d_borrow,
            self.margin,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn rate_report(
    psi: &PureState,
    povm: &Povm,
    k: usize,
    l: usize,
    eps: f64,
    seed: u64,
    params: NiceParams,
    f_eps: Option<f64>,
    g_eps: Option<f64>,
) -> Result<RateReport> {
    let psi = with_reference(psi)?;
    let rho_a = psi.reduced(&[ALICE])?;
    let (local_lower, local_upper) = local_purity_bounds(&rho_a, eps, params.slack)?;
    let ub = distributed_upper_bound(&psi, povm, eps, f_eps, g_eps)?;
    let cmp = ancilla_comparison(&psi, povm, k, l, eps, seed, params)?;
    Ok(RateReport {
        local_lower,
        local_upper,
        dist_upper: ub.value,
        dist_upper_rank1: ub.rank1,
        kd_rate: cmp.kd.net_rate as f64,
        fewqubits_rate: cmp.fewqubits.net_rate as f64,
        c_borrow: cmp.c_borrow,
        d_borrow: cmp.d_borrow,
        margin: cmp.margin,
        slack_bits: params.slack,
        slack_convention: format!(
            "slack = {:.6} bits (constant {} on smoothing); f = {}, g = {}",
            params.slack, params.c, ub.f_eps, ub.g_eps
        ),
    })
}
