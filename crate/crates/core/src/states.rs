//! Labeled states, cq states, POVMs and the dephasing channel.
//!
//! Registers are kept in alphabetical label order so that a label always maps to
//! the same tensor position, whatever order the caller supplied.

use crate::error::{Error, Result};
use crate::linalg::{
    self, eig_hermitian, permute_subsystems, permute_vector, sqrt_psd, ComplexMatrix, Spectrum,
    C64, PSD_CLIP, SUPPORT_TOL, ZERO,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::sync::OnceLock;

pub const HERM_TOL: f64 = 1e-9;
pub const TRACE_TOL: f64 = 1e-9;
pub const POVM_TOL: f64 = 1e-8;
/// Outcomes rarer than this are dropped from cq supports.
pub const MIN_PROB: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Register {
    pub label: String,
    pub dim: usize,
}

impl Register {
    pub fn new(label: &str, dim: usize) -> Self {
        Self { label: label.to_string(), dim }
    }
}

fn total_dim(regs: &[Register]) -> usize {
    regs.iter().map(|r| r.dim).product()
}

/// Sort registers by label; returns the sorted list and the permutation
/// (`perm[i]` = original position of sorted factor `i`).
fn canonical_order(regs: &[Register]) -> Result<(Vec<Register>, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..regs.len()).collect();
    perm.sort_by(|&a, &b| regs[a].label.cmp(&regs[b].label));
    for w in perm.windows(2) {
        if regs[w[0]].label == regs[w[1]].label {
            return Err(Error::Invalid(format!("duplicate register '{}'", regs[w[0]].label)));
        }
    }
    if regs.iter().any(|r| r.dim == 0) {
        return Err(Error::Invalid("register of dimension 0".into()));
    }
    Ok((perm.iter().map(|&i| regs[i].clone()).collect(), perm))
}

fn positions(regs: &[Register], labels: &[&str]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            regs.iter()
                .position(|r| r.label == *l)
                .ok_or_else(|| Error::UnknownRegister(l.to_string()))
        })
        .collect()
}

/// Validate a Hermitian unit-trace operator, clipping tiny negative eigenvalues.
fn validate_state_matrix(m: &ComplexMatrix) -> Result<(ComplexMatrix, Spectrum)> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("state matrix {}x{}", m.rows, m.cols)));
    }
    if m.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    let herr = m.hermiticity_error();
    if herr > HERM_TOL {
        return Err(Error::NotHermitian(herr));
    }
    let tr = m.trace_re();
    if (tr - 1.0).abs() > TRACE_TOL {
        return Err(Error::Trace(tr));
    }
    let h = m.hermitize();
    let sp = eig_hermitian(&h)?;
    let min = sp.min();
    if min < -PSD_CLIP {
        return Err(Error::NotPsd(min));
    }
    if min < 0.0 {
        let clipped = Spectrum { values: sp.values.iter().map(|x| x.max(0.0)).collect(), vectors: sp.vectors };
        let rebuilt = clipped.apply(|x| x).hermitize();
        return Ok((rebuilt, clipped));
    }
    Ok((h, sp))
}

#[derive(Debug)]
pub struct DensityOperator {
    registers: Vec<Register>,
    matrix: ComplexMatrix,
    spectrum: OnceLock<Spectrum>,
}

impl Clone for DensityOperator {
    fn clone(&self) -> Self {
        let spectrum = OnceLock::new();
        if let Some(s) = self.spectrum.get() {
            let _ = spectrum.set(s.clone());
        }
        Self { registers: self.registers.clone(), matrix: self.matrix.clone(), spectrum }
    }
}

impl DensityOperator {
    /// `registers` lists the tensor factors of `matrix` in the order they appear.
    pub fn new(registers: Vec<Register>, matrix: ComplexMatrix) -> Result<Self> {
        let d = total_dim(&registers);
        if matrix.rows != d || matrix.cols != d {
            return Err(Error::Dimension(format!(
                "registers give dimension {d}, matrix is {}x{}",
                matrix.rows, matrix.cols
            )));
        }
        let (regs, perm) = canonical_order(&registers)?;
        let dims: Vec<usize> = registers.iter().map(|r| r.dim).collect();
        let m = if perm.iter().enumerate().all(|(i, &p)| i == p) {
            matrix
        } else {
            permute_subsystems(&matrix, &dims, &perm)
        };
        let (m, sp) = validate_state_matrix(&m)?;
        let spectrum = OnceLock::new();
        let _ = spectrum.set(sp);
        Ok(Self { registers: regs, matrix: m, spectrum })
    }

    /// Rescale a PSD operator to unit trace before validating.
    pub fn normalized(registers: Vec<Register>, matrix: ComplexMatrix) -> Result<Self> {
        let t = matrix.trace_re();
        if t <= 0.0 {
            return Err(Error::Trace(t));
        }
        Self::new(registers, matrix.scale(1.0 / t))
    }

    pub fn single(label: &str, matrix: ComplexMatrix) -> Result<Self> {
        let d = matrix.rows;
        Self::new(vec![Register::new(label, d)], matrix)
    }

    pub fn diagonal(label: &str, probs: &[f64]) -> Result<Self> {
        Self::single(label, ComplexMatrix::from_diag(probs))
    }

    pub fn maximally_mixed(label: &str, d: usize) -> Self {
        Self::single(label, ComplexMatrix::identity(d).scale(1.0 / d as f64)).expect("valid")
    }

    pub fn registers(&self) -> &[Register] {
        &self.registers
    }

    pub fn labels(&self) -> Vec<&str> {
        self.registers.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.registers.iter().map(|r| r.dim).collect()
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows
    }

    pub fn register_dim(&self, label: &str) -> Result<usize> {
        let p = positions(&self.registers, &[label])?;
        Ok(self.registers[p[0]].dim)
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn spectrum(&self) -> &Spectrum {
        self.spectrum.get_or_init(|| eig_hermitian(&self.matrix).expect("validated Hermitian"))
    }

    /// Eigenvalues clipped at zero, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.spectrum().values.iter().map(|x| x.max(0.0)).collect()
    }

    pub fn rank(&self) -> usize {
        self.spectrum().values.iter().filter(|&&x| x > SUPPORT_TOL).count()
    }

    pub fn partial_trace(&self, keep: &[&str]) -> Result<DensityOperator> {
        let pos = positions(&self.registers, keep)?;
        let m = linalg::partial_trace_dims(&self.matrix, &self.dims(), &pos);
        let mut pos_sorted = pos.clone();
        pos_sorted.sort_unstable();
        let regs = pos_sorted.iter().map(|&i| self.registers[i].clone()).collect();
        DensityOperator::normalized(regs, m)
    }

    /// Tensor product; labels must be disjoint.
    pub fn tensor(&self, other: &DensityOperator) -> Result<DensityOperator> {
        let mut regs = self.registers.clone();
        regs.extend(other.registers.iter().cloned());
        DensityOperator::new(regs, self.matrix.kron(&other.matrix))
    }

    /// `U ρ U†` for a unitary on the whole space.
    pub fn evolve(&self, u: &ComplexMatrix) -> Result<DensityOperator> {
        DensityOperator::new(self.registers.clone(), u.conjugate(&self.matrix))
    }

    /// Embed an operator on `label` as `op ⊗ I` over the remaining factors.
    pub fn lift(&self, op: &ComplexMatrix, label: &str) -> Result<ComplexMatrix> {
        lift_operator(&self.registers, op, label)
    }

    /// Rename a register (the tensor order is re-canonicalized).
    pub fn relabel(&self, from: &str, to: &str) -> Result<DensityOperator> {
        positions(&self.registers, &[from])?;
        let regs = self
            .registers
            .iter()
            .map(|r| if r.label == from { Register::new(to, r.dim) } else { r.clone() })
            .collect();
        DensityOperator::new(regs, self.matrix.clone())
    }

    /// Purification with a fresh register `r_label` of dimension rank(ρ).
    pub fn purify(&self, r_label: &str) -> Result<PureState> {
        if self.registers.iter().any(|r| r.label == r_label) {
            return Err(Error::Invalid(format!("purifying label '{r_label}' already in use")));
        }
        let sp = self.spectrum();
        let kept: Vec<usize> = (0..sp.dim()).filter(|&i| sp.values[i] > SUPPORT_TOL).collect();
        let r = kept.len().max(1);
        let d = self.dim();
        let mut amps = vec![ZERO; d * r];
        for (j, &i) in kept.iter().enumerate() {
            let s = sp.values[i].sqrt();
            for a in 0..d {
                amps[a * r + j] = sp.vectors[(a, i)] * s;
            }
        }
        let nrm = linalg::norm(&amps);
        let amps: Vec<C64> = amps.into_iter().map(|z| z / nrm).collect();
        let mut regs = self.registers.clone();
        regs.push(Register::new(r_label, r));
        PureState::new(regs, amps)
    }
}

/// `op ⊗ I` with `op` placed on `label` within `regs`.
pub fn lift_operator(regs: &[Register], op: &ComplexMatrix, label: &str) -> Result<ComplexMatrix> {
    let p = positions(regs, &[label])?[0];
    if op.rows != regs[p].dim || op.cols != regs[p].dim {
        return Err(Error::Dimension(format!("operator does not act on register '{label}'")));
    }
    let before: usize = regs[..p].iter().map(|r| r.dim).product();
    let after: usize = regs[p + 1..].iter().map(|r| r.dim).product();
    Ok(ComplexMatrix::identity(before).kron(op).kron(&ComplexMatrix::identity(after)))
}

#[derive(Clone, Debug)]
pub struct PureState {
    registers: Vec<Register>,
    amps: Vec<C64>,
}

impl PureState {
    pub fn new(registers: Vec<Register>, amps: Vec<C64>) -> Result<Self> {
        let d = total_dim(&registers);
        if amps.len() != d {
            return Err(Error::Dimension(format!("{} amplitudes for dimension {d}", amps.len())));
        }
        if amps.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        let n = linalg::norm(&amps);
        if (n * n - 1.0).abs() > TRACE_TOL {
            return Err(Error::Trace(n * n));
        }
        let (regs, perm) = canonical_order(&registers)?;
        let dims: Vec<usize> = registers.iter().map(|r| r.dim).collect();
        let amps = permute_vector(&amps, &dims, &perm);
        Ok(Self { registers: regs, amps })
    }

    pub fn normalized(registers: Vec<Register>, amps: Vec<C64>) -> Result<Self> {
        let n = linalg::norm(&amps);
        if n <= 0.0 {
            return Err(Error::Trace(0.0));
        }
        Self::new(registers, amps.into_iter().map(|z| z / n).collect())
    }

    pub fn product(a: &PureState, b: &PureState) -> Result<Self> {
        let mut regs = a.registers.clone();
        regs.extend(b.registers.iter().cloned());
        Self::new(regs, linalg::kron_vec(&a.amps, &b.amps))
    }

    pub fn registers(&self) -> &[Register] {
        &self.registers
    }

    pub fn dims(&self) -> Vec<usize> {
        self.registers.iter().map(|r| r.dim).collect()
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn register_dim(&self, label: &str) -> Result<usize> {
        let p = positions(&self.registers, &[label])?;
        Ok(self.registers[p[0]].dim)
    }

    pub fn has(&self, label: &str) -> bool {
        self.registers.iter().any(|r| r.label == label)
    }

    pub fn density(&self) -> DensityOperator {
        DensityOperator::normalized(self.registers.clone(), ComplexMatrix::outer(&self.amps))
            .expect("pure state is a valid density operator")
    }

    /// Reduced matrix (unvalidated) on `keep`.
    pub fn reduced_matrix(&self, keep: &[&str]) -> Result<ComplexMatrix> {
        let pos = positions(&self.registers, keep)?;
        Ok(linalg::reduced_from_vector(&self.amps, &self.dims(), &pos))
    }

    pub fn reduced(&self, keep: &[&str]) -> Result<DensityOperator> {
        let pos = positions(&self.registers, keep)?;
        let m = linalg::reduced_from_vector(&self.amps, &self.dims(), &pos);
        let mut pos_sorted = pos;
        pos_sorted.sort_unstable();
        DensityOperator::normalized(pos_sorted.iter().map(|&i| self.registers[i].clone()).collect(), m)
    }

    /// Coefficient matrix `M[a, rest]` with `label` split off as the row index,
    /// together with the remaining registers.
    pub fn split(&self, label: &str) -> Result<(ComplexMatrix, Vec<Register>)> {
        let p = positions(&self.registers, &[label])?[0];
        let mut perm = vec![p];
        perm.extend((0..self.registers.len()).filter(|&i| i != p));
        let v = permute_vector(&self.amps, &self.dims(), &perm);
        let da = self.registers[p].dim;
        let rest: Vec<Register> =
            self.registers.iter().enumerate().filter(|&(i, _)| i != p).map(|(_, r)| r.clone()).collect();
        let dr = total_dim(&rest);
        Ok((ComplexMatrix { rows: da, cols: dr, data: v }, rest))
    }

    /// `(op ⊗ I)|ψ⟩`, unnormalized.
    pub fn apply_local(&self, op: &ComplexMatrix, label: &str) -> Result<Vec<C64>> {
        let (m, rest) = self.split(label)?;
        if op.cols != m.rows {
            return Err(Error::Dimension(format!("operator does not act on '{label}'")));
        }
        let out = op.matmul(&m);
        let mut regs = vec![Register::new(label, op.rows)];
        regs.extend(rest);
        // out is in (label, rest...) order; map it back to canonical order.
        let (sorted, perm) = canonical_order(&regs)?;
        let _ = sorted;
        let dims: Vec<usize> = regs.iter().map(|r| r.dim).collect();
        Ok(permute_vector(&out.data, &dims, &perm))
    }

    /// `Tr_label[(Θ ⊗ I)|ψ⟩⟨ψ|]` as an unnormalized operator on the remaining registers.
    pub fn conditional_operator(&self, theta: &ComplexMatrix, label: &str) -> Result<ComplexMatrix> {
        let (m, _) = self.split(label)?;
        Ok(m.adjoint().matmul(&theta.matmul(&m)).transpose())
    }

    pub fn labels_except(&self, label: &str) -> Vec<String> {
        self.registers.iter().filter(|r| r.label != label).map(|r| r.label.clone()).collect()
    }
}

/// Classical distribution over symbols with conditional states on common registers.
#[derive(Clone, Debug)]
pub struct CQState {
    pub symbols: Vec<String>,
    pub probs: Vec<f64>,
    pub conditionals: Vec<DensityOperator>,
    /// Symbols removed because their probability fell below `MIN_PROB`.
    pub dropped: Vec<String>,
}

impl CQState {
    pub fn new(symbols: Vec<String>, probs: Vec<f64>, conditionals: Vec<DensityOperator>) -> Result<Self> {
        if symbols.len() != probs.len() || probs.len() != conditionals.len() || probs.is_empty() {
            return Err(Error::Invalid("symbols, probabilities and conditionals differ in length".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("negative or non-finite probability".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > TRACE_TOL {
            return Err(Error::Trace(s));
        }
        let sig = conditionals[0].registers().to_vec();
        if conditionals.iter().any(|c| c.registers() != sig.as_slice()) {
            return Err(Error::Invalid("conditionals carry different register signatures".into()));
        }
        let mut out = Self { symbols: vec![], probs: vec![], conditionals: vec![], dropped: vec![] };
        for ((x, p), c) in symbols.into_iter().zip(probs).zip(conditionals) {
            if p < MIN_PROB {
                out.dropped.push(x);
            } else {
                out.symbols.push(x);
                out.probs.push(p);
                out.conditionals.push(c);
            }
        }
        let t: f64 = out.probs.iter().sum();
        for p in &mut out.probs {
            *p /= t;
        }
        Ok(out)
    }

    /// Build from a probability vector with symbols "0", "1", ….
    pub fn from_parts(probs: Vec<f64>, conditionals: Vec<DensityOperator>) -> Result<Self> {
        let symbols = (0..probs.len()).map(|i| i.to_string()).collect();
        Self::new(symbols, probs, conditionals)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn registers(&self) -> &[Register] {
        self.conditionals[0].registers()
    }

    pub fn quantum_dim(&self) -> usize {
        self.conditionals[0].dim()
    }

    /// Mixture `Σ_x P(x) ρ_x`.
    pub fn average(&self) -> DensityOperator {
        let mut m = ComplexMatrix::zeros(self.quantum_dim(), self.quantum_dim());
        for (p, c) in self.probs.iter().zip(&self.conditionals) {
            m = &m + &c.matrix().scale(*p);
        }
        DensityOperator::normalized(self.registers().to_vec(), m).expect("mixture of states")
    }

    /// Full block-diagonal operator `Σ_x P(x)|x⟩⟨x| ⊗ ρ_x` with X first.
    pub fn joint_matrix(&self) -> ComplexMatrix {
        let n = self.len();
        let d = self.quantum_dim();
        let mut m = ComplexMatrix::zeros(n * d, n * d);
        for (x, (p, c)) in self.probs.iter().zip(&self.conditionals).enumerate() {
            for i in 0..d {
                for j in 0..d {
                    m[(x * d + i, x * d + j)] = c.matrix()[(i, j)] * *p;
                }
            }
        }
        m
    }

    /// Apply the same map to each conditional.
    pub fn map_conditionals(&self, f: impl Fn(&DensityOperator) -> Result<DensityOperator>) -> Result<CQState> {
        let cs = self.conditionals.iter().map(f).collect::<Result<Vec<_>>>()?;
        CQState::new(self.symbols.clone(), self.probs.clone(), cs)
    }

    pub fn partial_trace(&self, keep: &[&str]) -> Result<CQState> {
        self.map_conditionals(|c| c.partial_trace(keep))
    }

    pub fn argmax_symbol(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
pub struct Povm {
    pub labels: Vec<String>,
    pub elements: Vec<ComplexMatrix>,
}

impl Povm {
    pub fn new(labels: Vec<String>, elements: Vec<ComplexMatrix>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidPovm("no elements".into()));
        }
        if labels.len() != elements.len() {
            return Err(Error::InvalidPovm("labels and elements differ in length".into()));
        }
        let d = elements[0].rows;
        let mut sum = ComplexMatrix::zeros(d, d);
        for (i, e) in elements.iter().enumerate() {
            if e.rows != d || e.cols != d {
                return Err(Error::InvalidPovm(format!("element {i} has the wrong shape")));
            }
            let herr = e.hermiticity_error();
            if herr > HERM_TOL {
                return Err(Error::InvalidPovm(format!("element {i} not Hermitian ({herr:.2e})")));
            }
            let min = eig_hermitian(&e.hermitize())?.min();
            if min < -HERM_TOL {
                return Err(Error::InvalidPovm(format!("element {i} not PSD (eigenvalue {min:.2e})")));
            }
            sum = &sum + e;
        }
        let dev = (&sum - &ComplexMatrix::identity(d)).max_abs();
        if dev > POVM_TOL {
            return Err(Error::InvalidPovm(format!("elements sum to I only within {dev:.2e}")));
        }
        Ok(Self { labels, elements: elements.iter().map(|e| e.hermitize()).collect() })
    }

    pub fn from_elements(elements: Vec<ComplexMatrix>) -> Result<Self> {
        let labels = (0..elements.len()).map(|i| i.to_string()).collect();
        Self::new(labels, elements)
    }

    pub fn trivial(d: usize) -> Self {
        Self::from_elements(vec![ComplexMatrix::identity(d)]).expect("identity POVM")
    }

    /// Projective measurement in the computational basis.
    pub fn basis(d: usize) -> Self {
        let els = (0..d)
            .map(|i| {
                let mut e = ComplexMatrix::zeros(d, d);
                e[(i, i)] = linalg::ONE;
                e
            })
            .collect();
        Self::from_elements(els).expect("basis POVM")
    }

    pub fn dim(&self) -> usize {
        self.elements[0].rows
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn is_rank_one(&self) -> bool {
        self.elements.iter().all(|e| {
            eig_hermitian(e).map(|s| s.values.iter().filter(|&&x| x > 1e-9).count() <= 1).unwrap_or(false)
        })
    }

    /// Split every element into its rank-one eigencomponents. Returns the
    /// refined POVM and, for each refined element, the index of its parent.
    pub fn rank1_refine(&self) -> (Povm, Vec<usize>) {
        let mut labels = Vec::new();
        let mut elements = Vec::new();
        let mut parents = Vec::new();
        for (i, e) in self.elements.iter().enumerate() {
            let sp = eig_hermitian(e).expect("validated element");
            let mut j = 0;
            for k in (0..sp.dim()).rev() {
                let lam = sp.values[k];
                if lam <= 1e-12 {
                    continue;
                }
                let v = sp.vectors.col(k);
                elements.push(ComplexMatrix::outer(&v).scale(lam));
                labels.push(format!("{}/{}", self.labels[i], j));
                parents.push(i);
                j += 1;
            }
        }
        (Povm { labels, elements }, parents)
    }

    pub fn sqrt_elements(&self) -> Result<Vec<ComplexMatrix>> {
        self.elements.iter().map(sqrt_psd).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DephasingChannel {
    /// Orthonormal basis as matrix columns.
    pub basis: ComplexMatrix,
    pub input: String,
    pub output: String,
}

impl DephasingChannel {
    pub fn new(basis: ComplexMatrix, input: &str, output: &str) -> Result<Self> {
        if !basis.is_square() {
            return Err(Error::Dimension("dephasing basis must be square".into()));
        }
        let g = basis.adjoint().matmul(&basis);
        if !g.approx_eq(&ComplexMatrix::identity(basis.rows), 1e-9) {
            return Err(Error::Invalid("dephasing basis is not orthonormal".into()));
        }
        Ok(Self { basis, input: input.into(), output: output.into() })
    }

    pub fn computational(d: usize, input: &str, output: &str) -> Self {
        Self::new(ComplexMatrix::identity(d), input, output).expect("identity basis")
    }

    pub fn apply(&self, state: &DensityOperator) -> Result<DensityOperator> {
        let d = state.register_dim(&self.input)?;
        if d != self.basis.rows {
            return Err(Error::Dimension(format!(
                "register '{}' has dimension {d}, channel expects {}",
                self.input, self.basis.rows
            )));
        }
        let mut out = ComplexMatrix::zeros(state.dim(), state.dim());
        for x in 0..d {
            let p = ComplexMatrix::outer(&self.basis.col(x));
            let lifted = state.lift(&p, &self.input)?;
            out = &out + &lifted.conjugate(state.matrix());
        }
        let dephased = DensityOperator::normalized(state.registers().to_vec(), out)?;
        if self.input == self.output {
            Ok(dephased)
        } else {
            dephased.relabel(&self.input, &self.output)
        }
    }
}

pub fn dephase(state: &DensityOperator, channel: &DephasingChannel) -> Result<DensityOperator> {
    channel.apply(state)
}

/// Measure register `a` of `psi` with `povm`: P(x) = Tr[Λ_x ρ^A] and
/// ρ_x = Tr_A[√Λ_x ψ √Λ_x]/P(x) on the remaining registers.
pub fn control_state(psi: &PureState, povm: &Povm, a: &str) -> Result<CQState> {
    let (m, rest) = psi.split(a)?;
    if povm.dim() != m.rows {
        return Err(Error::Dimension(format!("POVM acts on dimension {}, register '{a}' has {}", povm.dim(), m.rows)));
    }
    let mut probs = Vec::new();
    let mut conds = Vec::new();
    let mut symbols = Vec::new();
    let mut dropped = Vec::new();
    for (label, e) in povm.labels.iter().zip(&povm.elements) {
        let op = m.adjoint().matmul(&e.matmul(&m)).transpose();
        let p = op.trace_re();
        if p < MIN_PROB {
            dropped.push(label.clone());
            continue;
        }
        symbols.push(label.clone());
        probs.push(p);
        conds.push(DensityOperator::normalized(rest.clone(), op)?);
    }
    let t: f64 = probs.iter().sum();
    let probs = probs.into_iter().map(|p| p / t).collect();
    let mut cq = CQState::new(symbols, probs, conds)?;
    cq.dropped.extend(dropped);
    Ok(cq)
}

/// As `control_state`, but the conditionals keep register `a`:
/// ρ_x = √Λ_x ψ √Λ_x / P(x) on every register.
pub fn control_state_with_a(psi: &PureState, povm: &Povm, a: &str) -> Result<CQState> {
    let roots = povm.sqrt_elements()?;
    let mut probs = Vec::new();
    let mut conds = Vec::new();
    let mut symbols = Vec::new();
    let mut dropped = Vec::new();
    for (label, r) in povm.labels.iter().zip(&roots) {
        let v = psi.apply_local(r, a)?;
        let p = linalg::norm(&v).powi(2);
        if p < MIN_PROB {
            dropped.push(label.clone());
            continue;
        }
        symbols.push(label.clone());
        probs.push(p);
        conds.push(DensityOperator::normalized(psi.registers().to_vec(), ComplexMatrix::outer(&v))?);
    }
    let t: f64 = probs.iter().sum();
    let probs = probs.into_iter().map(|p| p / t).collect();
    let mut cq = CQState::new(symbols, probs, conds)?;
    cq.dropped.extend(dropped);
    Ok(cq)
}

/// Real-valued quantities behind a transcript's integer counts.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct RateBounds {
    pub alice_bits: f64,
    pub bob_bits: f64,
    pub borrowed_bits: f64,
    /// Rate predicted by the entropic formula for this protocol, without slack.
    pub formula: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProtocolTranscript {
    pub protocol: String,
    pub seed: Option<u64>,
    pub dims: BTreeMap<String, usize>,
    pub eps: f64,
    pub distilled_alice: u32,
    pub distilled_bob: u32,
    pub borrowed: u32,
    pub communication: u32,
    pub final_error: f64,
    pub slack_bits: f64,
    pub case: Option<String>,
    pub net_rate: i64,
    pub bounds: RateBounds,
    pub flags: Vec<String>,
}

impl ProtocolTranscript {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        protocol: &str,
        seed: Option<u64>,
        dims: BTreeMap<String, usize>,
        eps: f64,
        distilled_alice: u32,
        distilled_bob: u32,
        borrowed: u32,
        communication: u32,
        final_error: f64,
        slack_bits: f64,
    ) -> Self {
        Self {
            protocol: protocol.into(),
            seed,
            dims,
            eps,
            distilled_alice,
            distilled_bob,
            borrowed,
            communication,
            final_error,
            slack_bits,
            case: None,
            net_rate: distilled_alice as i64 + distilled_bob as i64 - borrowed as i64,
            bounds: RateBounds::default(),
            flags: Vec::new(),
        }
    }

    pub fn check(&self) -> bool {
        self.net_rate == self.distilled_alice as i64 + self.distilled_bob as i64 - self.borrowed as i64
            && self.final_error >= 0.0
    }
}

pub fn dims_map(regs: &[Register]) -> BTreeMap<String, usize> {
    regs.iter().map(|r| (r.label.clone(), r.dim)).collect()
}

// ---- JSON ----

#[derive(Deserialize)]
struct StateFile {
    registers: Vec<Register>,
    matrix: Value,
}

#[derive(Deserialize)]
struct PovmFile {
    #[serde(default)]
    labels: Option<Vec<String>>,
    elements: Vec<Value>,
}

fn parse_entry(v: &Value) -> Option<C64> {
    match v {
        Value::Number(n) => n.as_f64().map(|x| C64::new(x, 0.0)),
        Value::Array(a) if a.len() == 2 && a.iter().all(|x| x.is_number()) => {
            Some(C64::new(a[0].as_f64()?, a[1].as_f64()?))
        }
        _ => None,
    }
}

/// Accepts a flat row-major list of `[re, im]` pairs (or reals), or a list of
/// rows whose entries are reals or `[re, im]` pairs.
pub fn matrix_from_json(v: &Value) -> Result<ComplexMatrix> {
    let arr = v.as_array().ok_or_else(|| Error::Invalid("matrix must be an array".into()))?;
    let flat: Option<Vec<C64>> = arr.iter().map(parse_entry).collect();
    if let Some(data) = flat {
        let n = (data.len() as f64).sqrt().round() as usize;
        if n * n == data.len() {
            return ComplexMatrix::from_vec(n, n, data);
        }
    }
    let rows = arr.len();
    let mut data = Vec::with_capacity(rows * rows);
    for row in arr {
        let r = row.as_array().filter(|r| r.len() == rows).ok_or_else(|| {
            Error::Invalid("matrix is neither a square flat list nor a list of equal-length rows".into())
        })?;
        for e in r {
            data.push(parse_entry(e).ok_or_else(|| Error::Invalid("bad matrix entry".into()))?);
        }
    }
    ComplexMatrix::from_vec(rows, rows, data)
}

pub fn matrix_to_json(m: &ComplexMatrix) -> Value {
    Value::Array(m.data.iter().map(|z| serde_json::json!([z.re, z.im])).collect())
}

pub fn state_from_json(s: &str) -> Result<DensityOperator> {
    let f: StateFile = serde_json::from_str(s)?;
    DensityOperator::new(f.registers, matrix_from_json(&f.matrix)?)
}

pub fn state_to_json(rho: &DensityOperator) -> Value {
    serde_json::json!({ "registers": rho.registers(), "matrix": matrix_to_json(rho.matrix()) })
}

pub fn povm_from_json(s: &str) -> Result<Povm> {
    let f: PovmFile = serde_json::from_str(s)?;
    let els = f.elements.iter().map(matrix_from_json).collect::<Result<Vec<_>>>()?;
    match f.labels {
        Some(l) => Povm::new(l, els),
        None => Povm::from_elements(els),
    }
}

pub fn povm_to_json(p: &Povm) -> Value {
    serde_json::json!({
        "labels": p.labels,
        "elements": p.elements.iter().map(matrix_to_json).collect::<Vec<_>>(),
    })
}
