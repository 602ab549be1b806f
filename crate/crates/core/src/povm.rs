//! Randomized measurement compression and its validators.
//!
//! States handed to this module are pure on registers `A`, `B` and `R`; the
//! POVM acts on `A`. Each pair (k, ℓ) gets a symbol x(k,ℓ) drawn iid from P_X,
//! and Θ_ℓ(k) = c/(L·P(x)) · Π Λ_x Π with Π the support projector of ρ^A. This
//! is ρ^{-1/2} σ ρ^{-1/2} / L for σ = √ρ Λ_x √ρ / P(x), whose conditional state
//! on BR is exactly ρ_x.
//!
//! Sampling uses ChaCha8 (`rand_chacha`): a generator seeded with
//! `seed_from_u64(seed)` is moved to stream `(k << 32) | ℓ` and yields one
//! uniform `f64` in [0, 1), which is inverted against the cumulative P_X.

use crate::entropy::{h_h, h_h_cond_cq};
use crate::error::{check_eps, Error, Result};
use crate::linalg::{eig_hermitian, sqrt_psd, trace_norm, ComplexMatrix};
use crate::states::{control_state, matrix_from_json, matrix_to_json, CQState, DensityOperator, Povm, PureState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const ALICE: &str = "A";
pub const BOB: &str = "B";
pub const REFERENCE: &str = "R";
pub const BOT_LABEL: &str = "⊥";

/// Below this normalization the ⊥ outcome carries a large share of the weight.
const C_WARN: f64 = 0.5;
const PROB_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CompressedMeasurement {
    pub k: usize,
    pub l: usize,
    pub seed: u64,
    /// Symbols of the control state (zero-probability outcomes removed).
    pub symbols: Vec<String>,
    pub probs: Vec<f64>,
    /// Index of the POVM element behind each symbol.
    pub elements: Vec<usize>,
    /// `decode[k][ℓ]` indexes `symbols`.
    pub decode: Vec<Vec<usize>>,
    /// Π Λ_x Π / P(x) per symbol; Θ_ℓ(k) = c/L times the entry for x(k,ℓ).
    pub base: Vec<ComplexMatrix>,
    /// Θ_⊥(k).
    pub bottoms: Vec<ComplexMatrix>,
    /// Smallest row normalization, min_k c_k.
    pub c_norm: f64,
    /// c_k = 1/λ_max(S_k), the largest constant keeping Σ_ℓ Θ_ℓ(k) ≤ I.
    pub c_rows: Vec<f64>,
    /// Symbol reported for ⊥.
    pub bot_symbol: usize,
    /// Q_{KL}(k, ℓ) with the ⊥ outcome in the last column.
    pub q_kl: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Draw one symbol index for pair (k, ℓ).
pub fn sample_symbol(seed: u64, k: usize, l: usize, cdf: &[f64]) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | l as u64);
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Uniform draw used for pair (k, ℓ), exposed for test vectors.
pub fn pair_uniform(seed: u64, k: usize, l: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | l as u64);
    rng.random()
}

pub fn compress_measurement(psi: &PureState, povm: &Povm, k: usize, l: usize, seed: u64) -> Result<CompressedMeasurement> {
    if k == 0 || l == 0 {
        return Err(Error::Invalid("K and L must be at least 1".into()));
    }
    if l as u64 > u32::MAX as u64 || k as u64 > u32::MAX as u64 {
        return Err(Error::Invalid("K and L must fit in 32 bits".into()));
    }
    let cq = control_state(psi, povm, ALICE)?;
    let rho_a = psi.reduced_matrix(&[ALICE])?;
    let support = eig_hermitian(&rho_a.hermitize())?.support_projector();

    let elements: Vec<usize> = cq
        .symbols
        .iter()
        .map(|s| povm.labels.iter().position(|x| x == s).expect("symbol comes from the POVM"))
        .collect();
    let base: Vec<ComplexMatrix> = elements
        .iter()
        .zip(&cq.probs)
        .map(|(&e, &p)| support.matmul(&povm.elements[e]).matmul(&support).scale(1.0 / p).hermitize())
        .collect();

    let mut cdf = Vec::with_capacity(cq.len());
    let mut acc = 0.0;
    for p in &cq.probs {
        acc += p;
        cdf.push(acc);
    }
    let decode: Vec<Vec<usize>> =
        (0..k).map(|kk| (0..l).map(|ll| sample_symbol(seed, kk, ll, &cdf)).collect()).collect();

    // S_k = (1/L) Σ_ℓ base[x(k,ℓ)]; c_k = 1 / λ_max(S_k).
    let d = rho_a.rows;
    let sums: Vec<ComplexMatrix> = decode
        .iter()
        .map(|row| {
            let mut counts = vec![0usize; cq.len()];
            for &x in row {
                counts[x] += 1;
            }
            let mut s = ComplexMatrix::zeros(d, d);
            for (x, &n) in counts.iter().enumerate() {
                if n > 0 {
                    s = &s + &base[x].scale(n as f64 / l as f64);
                }
            }
            s.hermitize()
        })
        .collect();
    let c_rows: Vec<f64> = sums
        .iter()
        .map(|s| {
            let top = eig_hermitian(s)?.max();
            Ok(if top > 0.0 { (1.0 / top).min(1.0) } else { 1.0 })
        })
        .collect::<Result<_>>()?;
    let c_norm = c_rows.iter().cloned().fold(1.0, f64::min);
    let id = ComplexMatrix::identity(d);
    let bottoms: Vec<ComplexMatrix> =
        sums.iter().zip(&c_rows).map(|(s, &c)| (&id - &s.scale(c)).hermitize()).collect();

    let mut warnings = Vec::new();
    if c_norm < C_WARN {
        warnings.push(format!("normalization c = {c_norm:.4} < 1/2; L is too small for this measurement"));
    }
    let bot_symbol = cq.argmax_symbol();

    let mut cm = CompressedMeasurement {
        k,
        l,
        seed,
        symbols: cq.symbols.clone(),
        probs: cq.probs.clone(),
        elements,
        decode,
        base,
        bottoms,
        c_norm,
        c_rows,
        bot_symbol,
        q_kl: Vec::new(),
        warnings,
    };
    cm.q_kl = cm.joint_distribution(&rho_a);
    Ok(cm)
}

impl CompressedMeasurement {
    /// Θ_ℓ(k); `l == L` gives Θ_⊥(k).
    pub fn theta_element(&self, k: usize, l: usize) -> ComplexMatrix {
        if l == self.l {
            self.bottoms[k].clone()
        } else {
            self.base[self.decode[k][l]].scale(self.c_rows[k] / self.l as f64)
        }
    }

    /// The full POVM Θ(k) with outcomes 0..L−1 and ⊥.
    pub fn theta(&self, k: usize) -> Result<Povm> {
        let mut labels: Vec<String> = (0..self.l).map(|l| l.to_string()).collect();
        labels.push(BOT_LABEL.into());
        let elements = (0..=self.l).map(|l| self.theta_element(k, l)).collect();
        Povm::new(labels, elements)
    }

    pub fn dim(&self) -> usize {
        self.bottoms[0].rows
    }

    /// Decoded symbol for (k, ℓ); ⊥ decodes to `bot_symbol`.
    pub fn decode_symbol(&self, k: usize, l: usize) -> usize {
        if l == self.l {
            self.bot_symbol
        } else {
            self.decode[k][l]
        }
    }

    /// How often each symbol was drawn for row k.
    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; self.symbols.len()];
        for &x in &self.decode[k] {
            c[x] += 1;
        }
        c
    }

    /// Tr[Θ_⊥(k) ρ^A].
    pub fn bot_mass(&self, k: usize) -> f64 {
        self.q_kl[k][self.l] * self.k as f64
    }

    /// P_Θ(ℓ|k) for ℓ ∈ [L] ∪ {⊥}.
    pub fn conditional(&self, k: usize) -> Vec<f64> {
        self.q_kl[k].iter().map(|q| q * self.k as f64).collect()
    }

    fn joint_distribution(&self, rho_a: &ComplexMatrix) -> Vec<Vec<f64>> {
        let kk = self.k as f64;
        let per_symbol: Vec<f64> = self.base.iter().map(|b| b.trace_product(rho_a).re / self.l as f64).collect();
        (0..self.k)
            .map(|k| {
                let c = self.c_rows[k];
                let mut row: Vec<f64> = self.decode[k].iter().map(|&x| (c * per_symbol[x]).max(0.0) / kk).collect();
                row.push(self.bottoms[k].trace_product(rho_a).re.max(0.0) / kk);
                row
            })
            .collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "K": self.k,
            "L": self.l,
            "seed": self.seed,
            "c_norm": self.c_norm,
            "c_rows": self.c_rows,
            "symbols": self.symbols,
            "probs": self.probs,
            "elements": self.elements,
            "bot_symbol": self.bot_symbol,
            "decode": self.decode,
            "base": self.base.iter().map(matrix_to_json).collect::<Vec<_>>(),
            "bottoms": self.bottoms.iter().map(matrix_to_json).collect::<Vec<_>>(),
            "q_kl": self.q_kl,
            "warnings": self.warnings,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let field = |name: &str| v.get(name).ok_or_else(|| Error::Invalid(format!("missing field '{name}'")));
        let from = |name: &str| -> Result<Value> { Ok(field(name)?.clone()) };
        let mats = |name: &str| -> Result<Vec<ComplexMatrix>> {
            field(name)?
                .as_array()
                .ok_or_else(|| Error::Invalid(format!("'{name}' is not an array")))?
                .iter()
                .map(matrix_from_json)
                .collect()
        };
        let cm = Self {
            k: serde_json::from_value(from("K")?)?,
            l: serde_json::from_value(from("L")?)?,
            seed: serde_json::from_value(from("seed")?)?,
            symbols: serde_json::from_value(from("symbols")?)?,
            probs: serde_json::from_value(from("probs")?)?,
            elements: serde_json::from_value(from("elements")?)?,
            decode: serde_json::from_value(from("decode")?)?,
            base: mats("base")?,
            bottoms: mats("bottoms")?,
            c_norm: serde_json::from_value(from("c_norm")?)?,
            c_rows: serde_json::from_value(from("c_rows")?)?,
            bot_symbol: serde_json::from_value(from("bot_symbol")?)?,
            q_kl: serde_json::from_value(from("q_kl")?)?,
            warnings: serde_json::from_value(from("warnings")?)?,
        };
        if cm.decode.len() != cm.k || cm.decode.iter().any(|r| r.len() != cm.l || r.iter().any(|&x| x >= cm.symbols.len())) {
            return Err(Error::Invalid("decode table is not total on [K]×[L]".into()));
        }
        if cm.bottoms.len() != cm.k || cm.c_rows.len() != cm.k || cm.base.len() != cm.symbols.len() {
            return Err(Error::Invalid("operator tables do not match K or the symbol count".into()));
        }
        Ok(cm)
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CompressionReport {
    pub ideal_vs_simulated: f64,
    pub per_pair_state_dist: f64,
    pub qkl_vs_uniform: f64,
    pub qk_vs_uniform: f64,
    pub bot_mass_mean: f64,
    pub bot_mass_max: f64,
    pub eps: f64,
}

/// Unnormalized Tr_A[(Θ ⊗ I)ψ] on BR.
fn branch(psi: &PureState, theta: &ComplexMatrix) -> Result<ComplexMatrix> {
    psi.conditional_operator(theta, ALICE)
}

/// Normalized BR state after outcome `base[x]`, one per symbol.
pub fn branch_states(cm: &CompressedMeasurement, psi: &PureState) -> Result<Vec<DensityOperator>> {
    let (_, rest) = psi.split(ALICE)?;
    cm.base
        .iter()
        .map(|b| DensityOperator::normalized(rest.clone(), branch(psi, b)?.hermitize()))
        .collect()
}

pub fn validate_compression(cm: &CompressedMeasurement, psi: &PureState, povm: &Povm, eps: f64) -> Result<CompressionReport> {
    check_eps(eps)?;
    let cq = control_state(psi, povm, ALICE)?;
    if cq.symbols != cm.symbols || cm.dim() != povm.dim() {
        return Err(Error::Invalid("compressed measurement was built for a different instance".into()));
    }
    let kk = cm.k as f64;
    let ll = cm.l as f64;
    let sims: Vec<ComplexMatrix> = cm.base.iter().map(|b| branch(psi, b)).collect::<Result<_>>()?;

    // Weight each symbol receives from the [L] outcomes, averaged over k.
    let mut weight = vec![0.0; cm.symbols.len()];
    for k in 0..cm.k {
        for (x, n) in cm.counts(k).into_iter().enumerate() {
            weight[x] += n as f64 * cm.c_rows[k] / (ll * kk);
        }
    }
    let mut bot = ComplexMatrix::zeros(sims[0].rows, sims[0].cols);
    for b in &cm.bottoms {
        bot = &bot + &branch(psi, b)?.scale(1.0 / kk);
    }

    let mut ideal_vs_simulated = 0.0;
    let mut per_pair: f64 = 0.0;
    for x in 0..cm.symbols.len() {
        let ideal = cq.conditionals[x].matrix().scale(cq.probs[x]);
        let mut tau = sims[x].scale(weight[x]);
        if x == cm.bot_symbol {
            tau = &tau + &bot;
        }
        ideal_vs_simulated += trace_norm(&(&ideal - &tau).hermitize())?;
        if weight[x] > PROB_TOL {
            let t = sims[x].trace_re();
            per_pair = per_pair.max(trace_norm(&(&sims[x].scale(1.0 / t) - cq.conditionals[x].matrix()).hermitize())?);
        }
    }

    let unif = 1.0 / (kk * ll);
    let mut qkl_vs_uniform = 0.0;
    let mut qk_vs_uniform = 0.0;
    let mut bots = Vec::with_capacity(cm.k);
    for k in 0..cm.k {
        let row = &cm.q_kl[k];
        qkl_vs_uniform += row[..cm.l].iter().map(|q| (q - unif).abs()).sum::<f64>() + row[cm.l];
        qk_vs_uniform += (row.iter().sum::<f64>() - 1.0 / kk).abs();
        bots.push(cm.bot_mass(k));
    }
    Ok(CompressionReport {
        ideal_vs_simulated,
        per_pair_state_dist: per_pair,
        qkl_vs_uniform,
        qk_vs_uniform,
        bot_mass_mean: bots.iter().sum::<f64>() / kk,
        bot_mass_max: bots.iter().cloned().fold(0.0, f64::max),
        eps,
    })
}

/// Per-row compression error: Σ_x ‖P(x)ρ_x − τ_{x|k}‖₁ where τ_{x|k} is the
/// BR mixture produced by Θ(k) alone, ⊥ routed to `bot_symbol`.
pub fn row_errors(cm: &CompressedMeasurement, psi: &PureState, povm: &Povm) -> Result<Vec<f64>> {
    let cq = control_state(psi, povm, ALICE)?;
    if cq.symbols != cm.symbols {
        return Err(Error::Invalid("compressed measurement was built for a different instance".into()));
    }
    let sims: Vec<ComplexMatrix> = cm.base.iter().map(|b| branch(psi, b)).collect::<Result<_>>()?;
    let ideal: Vec<ComplexMatrix> =
        cq.conditionals.iter().zip(&cq.probs).map(|(c, &p)| c.matrix().scale(p)).collect();
    (0..cm.k)
        .map(|k| {
            let bot = branch(psi, &cm.bottoms[k])?;
            let mut err = 0.0;
            for (x, n) in cm.counts(k).into_iter().enumerate() {
                let mut tau = sims[x].scale(n as f64 * cm.c_rows[k] / cm.l as f64);
                if x == cm.bot_symbol {
                    tau = &tau + &bot;
                }
                err += trace_norm(&(&ideal[x] - &tau).hermitize())?;
            }
            Ok(err)
        })
        .collect()
}

/// Constants of the nice-pair inequalities: smoothing `c·ε^{1/8}` on the pair
/// side, `c·ε` on the reference side, and an additive `slack` in bits.
#[derive(Clone, Copy, Debug)]
pub struct NiceParams {
    pub c: f64,
    pub slack: f64,
}

impl NiceParams {
    pub fn new(eps: f64) -> Self {
        Self { c: 1.0, slack: (1.0 / eps).log2() }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct NiceSets {
    /// Rows k with at least (1 − ε^{1/16})·L nice outcomes.
    pub t_prime: Vec<usize>,
    pub nice: Vec<Vec<usize>>,
    /// Per symbol: does a pair decoding to it satisfy both inequalities?
    pub symbol_nice: Vec<bool>,
    /// H_H(RB|X) and H_H(B|X) at smoothing c·ε.
    pub reference_rb: f64,
    pub reference_b: f64,
    /// Fraction of all K·L pairs that are nice.
    pub fraction: f64,
}

fn smoothing(c: f64, eps: f64) -> Result<f64> {
    let s = c * eps;
    check_eps(s)?;
    Ok(s)
}

pub fn nice_sets(cm: &CompressedMeasurement, psi: &PureState, povm: &Povm, eps: f64, params: NiceParams) -> Result<NiceSets> {
    check_eps(eps)?;
    let cq = control_state(psi, povm, ALICE)?;
    let cq_b = cq.partial_trace(&[BOB])?;
    let reference_rb = h_h_cond_cq(&cq, smoothing(params.c, eps)?)?.value;
    let reference_b = h_h_cond_cq(&cq_b, smoothing(params.c, eps)?)?.value;
    let pair_eps = smoothing(params.c, eps.powf(0.125))?;

    // A pair's BR state depends on (k, ℓ) only through Θ_ℓ(k) ∝ base[x(k,ℓ)].
    let states = branch_states(cm, psi)?;
    let symbol_nice = states
        .iter()
        .map(|s| {
            let rb = h_h(s, pair_eps)?.value;
            let b = h_h(&s.partial_trace(&[BOB])?, pair_eps)?.value;
            Ok(rb <= reference_rb + params.slack && b <= reference_b + params.slack)
        })
        .collect::<Result<Vec<bool>>>()?;

    let nice: Vec<Vec<usize>> = (0..cm.k)
        .map(|k| {
            let q_min = cm.c_rows[k] / (cm.l as f64 * cm.k as f64) * PROB_TOL;
            (0..cm.l).filter(|&l| symbol_nice[cm.decode[k][l]] && cm.q_kl[k][l] > q_min).collect()
        })
        .collect();
    let need = (1.0 - eps.powf(1.0 / 16.0)) * cm.l as f64;
    let t_prime = (0..cm.k).filter(|&k| nice[k].len() as f64 >= need - 1e-12).collect();
    let total: usize = nice.iter().map(|n| n.len()).sum();
    Ok(NiceSets {
        t_prime,
        nice,
        symbol_nice,
        reference_rb,
        reference_b,
        fraction: total as f64 / (cm.k * cm.l) as f64,
    })
}

/// Helper for tests and the CLI: the control state on BR.
pub fn control(psi: &PureState, povm: &Povm) -> Result<CQState> {
    control_state(psi, povm, ALICE)
}

/// Matrix square root of each base operator, used for coherent measurements.
/// Square roots of the base operators (without the c_k/L factor) and of each Θ_⊥(k).
pub(crate) fn sqrt_thetas(cm: &CompressedMeasurement) -> Result<(Vec<ComplexMatrix>, Vec<ComplexMatrix>)> {
    let base = cm.base.iter().map(sqrt_psd).collect::<Result<_>>()?;
    let bottoms = cm.bottoms.iter().map(sqrt_psd).collect::<Result<_>>()?;
    Ok((base, bottoms))
}
