mod output;
mod suite;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use output::{emit, to_csv, to_json, Format};
use puredist_core::bounds::{ancilla_comparison, distributed_upper_bound, local_purity_bounds};
use puredist_core::entropy::{h_h, h_h_cond_cq, h_max_smooth, h_min_cq, h_prime_max, h_tilde_max, i_max_cq};
use puredist_core::povm::{control, NiceParams};
use puredist_core::protocols::{local_distill, purify_ab, run_fewqubits_with, run_kd_oneshot_with, run_protocol_a_with};
use puredist_core::states::{povm_from_json, state_from_json, DensityOperator, Povm, ProtocolTranscript, PureState};
use rayon::prelude::*;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

const TRANSCRIPT_COLUMNS: &[&str] = &[
    "protocol", "povm", "seed", "eps", "distilled_alice", "distilled_bob", "borrowed", "communication", "net_rate",
    "final_error", "slack_bits", "case", "formula", "alice_bits", "bob_bits", "borrowed_bits", "flags", "error",
];

#[derive(Parser)]
#[command(name = "puredist", version, about = "One-shot local and distributed purity distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entropies of every register and of the whole state.
    ///
    /// CSV columns: subject, dim, h_h, h_tilde_max, h_prime_max, h_max_smooth, h_min, i_max.
    /// Rows "B|X[i]" describe the cq state left by POVM i: h_h = H_H(B|X),
    /// h_min = H_min(B|X), i_max = I_max(RB:X) smoothed at eps^4.
    Entropy(Common),
    /// Local purity distillation of one register.
    ///
    /// CSV columns: register, dim, eps, a_p_qubits, a_g_dim, error, error_budget,
    /// local_lower, local_upper, slack_bits.
    DistillLocal {
        #[command(flatten)]
        common: Common,
        /// Register to distil; defaults to A, or the only register.
        #[arg(long)]
        register: Option<String>,
    },
    /// Protocol A: Alice measures, sends the outcome, both distil.
    ///
    /// CSV columns: protocol, povm, seed, eps, distilled_alice, distilled_bob, borrowed,
    /// communication, net_rate, final_error, slack_bits, case, formula, alice_bits,
    /// bob_bits, borrowed_bits, flags, error.
    ProtocolA(Common),
    /// Compressed-measurement protocol, one run per (POVM, seed).
    ///
    /// CSV columns as for protocol-a.
    KdOneshot(Common),
    /// In-place embedding protocol, one run per (POVM, seed).
    ///
    /// CSV columns as for protocol-a.
    Fewqubits(Common),
    /// Borrowed-ancilla comparison of the two compressed protocols.
    ///
    /// CSV columns: povm, seed, k, c_borrow, d_borrow, margin, holds, kd_net, fq_net,
    /// kd_borrowed, fq_borrowed, kd_communication, fq_communication, kd_error, fq_error,
    /// fq_case, error.
    Compare(Common),
    /// Upper and lower rate bounds next to the achieved rates.
    ///
    /// CSV columns: povm, seed, local_lower, local_upper, dist_upper, dist_upper_rank1,
    /// h_max_a, h_min_b_given_x, f_eps, g_eps, kd_rate, fewqubits_rate, c_borrow,
    /// d_borrow, margin, slack_bits, slack_convention, error.
    Bounds(Common),
    /// Run the lemma property suite; exits nonzero if any lemma fails.
    ///
    /// CSV columns: lemma, module, trials, violations, worst_excess, pass.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// State JSON: {"registers": [{"label", "dim"}], "matrix": [[re, im], ...]}.
    #[arg(long)]
    state: PathBuf,
    /// POVM JSON: {"elements": [matrix, ...]}; repeatable. Defaults to the computational basis on A.
    #[arg(long)]
    povm: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long = "K", default_value_t = 4)]
    k: usize,
    #[arg(long = "L", default_value_t = 16)]
    l: usize,
    /// Seed list such as "1..20", "3,5,8" or "1..4,9".
    #[arg(long)]
    seeds: Option<String>,
    /// Single seed, used when --seeds is absent.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Slack in bits; defaults to log2(1/eps).
    #[arg(long)]
    slack_bits: Option<f64>,
    #[arg(long)]
    f_eps: Option<f64>,
    #[arg(long)]
    g_eps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Single eps; by default the suite cycles through 0.01, 0.05, 0.1.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

fn check_eps(name: &str, e: f64) -> Result<()> {
    if !(e > 0.0 && e < 1.0) {
        bail!("{name} must lie in (0, 1), got {e}");
    }
    Ok(())
}

impl Common {
    fn validate(&self) -> Result<()> {
        check_eps("eps", self.eps)?;
        for (n, v) in [("f-eps", self.f_eps), ("g-eps", self.g_eps)] {
            if let Some(v) = v {
                check_eps(n, v)?;
            }
        }
        if self.k == 0 || self.l == 0 {
            bail!("K and L must be at least 1");
        }
        if let Some(s) = self.slack_bits {
            if !s.is_finite() || s < 0.0 {
                bail!("slack-bits must be a finite nonnegative number");
            }
        }
        Ok(())
    }

    fn params(&self) -> NiceParams {
        let mut p = NiceParams::new(self.eps);
        if let Some(s) = self.slack_bits {
            p.slack = s;
        }
        p
    }

    fn seeds(&self) -> Result<Vec<u64>> {
        match &self.seeds {
            Some(s) => parse_seeds(s),
            None => Ok(vec![self.seed]),
        }
    }

    fn povms(&self, psi: &PureState) -> Result<Vec<(String, Povm)>> {
        if self.povm.is_empty() {
            return Ok(vec![("basis".into(), Povm::basis(psi.register_dim("A")?))]);
        }
        self.povm
            .iter()
            .map(|p| {
                let text = read(p)?;
                let povm = povm_from_json(&text).with_context(|| format!("invalid POVM in {}", p.display()))?;
                Ok((p.file_stem().map_or("povm".into(), |s| s.to_string_lossy().into_owned()), povm))
            })
            .collect()
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let b = b.trim_start_matches('=');
            let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
            if b < a {
                bail!("empty seed range {part}");
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed {part:?}"))?);
        }
    }
    if out.is_empty() {
        bail!("at least one seed is required");
    }
    Ok(out)
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn load_state(p: &Path) -> Result<DensityOperator> {
    state_from_json(&read(p)?).with_context(|| format!("invalid state in {}", p.display()))
}

/// Registers A, B are purified into R; a state already on A, B, R must be pure.
fn load_pure(p: &Path) -> Result<PureState> {
    let rho = load_state(p)?;
    let labels = rho.labels();
    if labels == ["A", "B"] {
        return Ok(purify_ab(&rho)?);
    }
    if labels == ["A", "B", "R"] {
        let sp = rho.spectrum();
        let top = sp.dim() - 1;
        if sp.values[top] < 1.0 - 1e-9 {
            bail!("state on A, B, R must be pure (largest eigenvalue {})", sp.values[top]);
        }
        return Ok(PureState::normalized(rho.registers().to_vec(), sp.vectors.col(top))?);
    }
    bail!("protocol states need registers A, B (optionally R); found {}", labels.join(", "))
}

fn transcript_record(povm: &str, t: &ProtocolTranscript) -> Value {
    let mut v = serde_json::to_value(t).expect("transcripts serialize");
    let m = v.as_object_mut().expect("transcript is an object");
    m.insert("povm".into(), json!(povm));
    m.insert("formula".into(), json!(t.bounds.formula));
    m.insert("alice_bits".into(), json!(t.bounds.alice_bits));
    m.insert("bob_bits".into(), json!(t.bounds.bob_bits));
    m.insert("borrowed_bits".into(), json!(t.bounds.borrowed_bits));
    if let Some(Value::Array(_)) = m.get("flags") {
        m.insert("flags".into(), json!(t.flags.join(";")));
    }
    v
}

fn error_record(protocol: &str, povm: &str, seed: u64, e: impl std::fmt::Display) -> Value {
    json!({"protocol": protocol, "povm": povm, "seed": seed, "error": e.to_string()})
}

/// One job per (POVM, seed), run on the worker pool and returned in input order.
fn sweep<F>(povms: &[(String, Povm)], seeds: &[u64], f: F) -> Vec<Value>
where
    F: Fn(&str, &Povm, u64) -> Value + Sync,
{
    let jobs: Vec<(usize, u64)> = (0..povms.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    jobs.par_iter().map(|&(i, s)| f(&povms[i].0, &povms[i].1, s)).collect()
}

fn entropy(c: &Common) -> Result<(Vec<Value>, &'static [&'static str])> {
    let rho = load_state(&c.state)?;
    let eps = c.eps;
    let row = |subject: String, r: &DensityOperator| -> Result<Value> {
        Ok(json!({
            "subject": subject,
            "dim": r.dim(),
            "h_h": h_h(r, eps)?.value,
            "h_tilde_max": h_tilde_max(r, eps)?,
            "h_prime_max": h_prime_max(r, eps)?,
            "h_max_smooth": h_max_smooth(r, eps)?,
        }))
    };
    let labels: Vec<String> = rho.labels().iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    if labels.len() > 1 {
        for l in &labels {
            rows.push(row(l.clone(), &rho.partial_trace(&[l.as_str()])?)?);
        }
    }
    rows.push(row(labels.join(""), &rho)?);
    if !c.povm.is_empty() {
        let psi = load_pure(&c.state)?;
        for (name, povm) in c.povms(&psi)? {
            let cq = control(&psi, &povm)?;
            let cq_b = cq.partial_trace(&["B"])?;
            rows.push(json!({
                "subject": format!("B|X[{name}]"),
                "dim": cq_b.quantum_dim(),
                "h_h": h_h_cond_cq(&cq_b, eps)?.value,
                "h_min": h_min_cq(&cq_b),
                "i_max": i_max_cq(&cq, eps.powi(4))?.value,
            }));
        }
    }
    Ok((rows, &["subject", "dim", "h_h", "h_tilde_max", "h_prime_max", "h_max_smooth", "h_min", "i_max"]))
}

fn distill_local(c: &Common, register: Option<&str>) -> Result<(Vec<Value>, &'static [&'static str])> {
    let rho = load_state(&c.state)?;
    let labels = rho.labels();
    let label = match register {
        Some(r) => r.to_string(),
        None if labels.len() == 1 => labels[0].to_string(),
        None => "A".to_string(),
    };
    let r = if labels.len() == 1 && labels[0] == label { rho.clone() } else { rho.partial_trace(&[label.as_str()])? };
    let out = local_distill(&r, c.eps)?;
    let slack = c.params().slack;
    let (lo, up) = local_purity_bounds(&r, c.eps, slack)?;
    let row = json!({
        "register": label,
        "dim": r.dim(),
        "eps": c.eps,
        "a_p_qubits": out.isometry.a_p_qubits,
        "a_g_dim": out.isometry.a_g_dim,
        "error": out.error,
        "error_budget": 2.0 * c.eps.sqrt() + c.eps,
        "local_lower": lo,
        "local_upper": up,
        "slack_bits": slack,
    });
    Ok((
        vec![row],
        &["register", "dim", "eps", "a_p_qubits", "a_g_dim", "error", "error_budget", "local_lower", "local_upper", "slack_bits"],
    ))
}

fn protocol(c: &Common, which: &str) -> Result<Vec<Value>> {
    let psi = load_pure(&c.state)?;
    let povms = c.povms(&psi)?;
    let params = c.params();
    if which == "protocol-a" {
        return Ok(povms
            .iter()
            .map(|(name, p)| match run_protocol_a_with(&psi, p, c.eps, params.slack) {
                Ok(t) => transcript_record(name, &t),
                Err(e) => error_record("protocol-a", name, 0, e),
            })
            .collect());
    }
    let seeds = c.seeds()?;
    Ok(sweep(&povms, &seeds, |name, p, s| {
        let r = if which == "kd-oneshot" {
            run_kd_oneshot_with(&psi, p, c.k, c.l, c.eps, s, params)
        } else {
            run_fewqubits_with(&psi, p, c.k, c.l, c.eps, s, params).map(|(t, _)| t)
        };
        match r {
            Ok(t) => transcript_record(name, &t),
            Err(e) => error_record(which, name, s, e),
        }
    }))
}

fn compare(c: &Common) -> Result<(Vec<Value>, &'static [&'static str])> {
    let psi = load_pure(&c.state)?;
    let povms = c.povms(&psi)?;
    let seeds = c.seeds()?;
    let params = c.params();
    let rows = sweep(&povms, &seeds, |name, p, s| match ancilla_comparison(&psi, p, c.k, c.l, c.eps, s, params) {
        Ok(r) => json!({
            "povm": name,
            "seed": s,
            "k": r.k,
            "c_borrow": r.c_borrow,
            "d_borrow": r.d_borrow,
            "margin": r.margin,
            "holds": r.holds,
            "kd_net": r.kd.net_rate,
            "fq_net": r.fewqubits.net_rate,
            "kd_borrowed": r.kd.borrowed,
            "fq_borrowed": r.fewqubits.borrowed,
            "kd_communication": r.kd.communication,
            "fq_communication": r.fewqubits.communication,
            "kd_error": r.kd.final_error,
            "fq_error": r.fewqubits.final_error,
            "fq_case": r.plan.case.as_str(),
        }),
        Err(e) => json!({"povm": name, "seed": s, "error": e.to_string()}),
    });
    Ok((
        rows,
        &[
            "povm", "seed", "k", "c_borrow", "d_borrow", "margin", "holds", "kd_net", "fq_net", "kd_borrowed",
            "fq_borrowed", "kd_communication", "fq_communication", "kd_error", "fq_error", "fq_case", "error",
        ],
    ))
}

fn bounds(c: &Common) -> Result<(Vec<Value>, &'static [&'static str])> {
    let psi = load_pure(&c.state)?;
    let povms = c.povms(&psi)?;
    let seeds = c.seeds()?;
    let params = c.params();
    let rho_a = psi.reduced(&["A"])?;
    let (lo, up) = local_purity_bounds(&rho_a, c.eps, params.slack)?;
    let mut uppers = Vec::new();
    for (_, p) in &povms {
        uppers.push(distributed_upper_bound(&psi, p, c.eps, c.f_eps, c.g_eps)?);
    }
    let index = |name: &str| povms.iter().position(|(n, _)| n == name).expect("known povm");
    let rows = sweep(&povms, &seeds, |name, p, s| {
        let ub = &uppers[index(name)];
        let mut v = json!({
            "povm": name,
            "seed": s,
            "local_lower": lo,
            "local_upper": up,
            "dist_upper": ub.value,
            "dist_upper_rank1": ub.rank1,
            "h_max_a": ub.h_max_a,
            "h_min_b_given_x": ub.h_min_b_given_x,
            "f_eps": ub.f_eps,
            "g_eps": ub.g_eps,
            "slack_bits": params.slack,
            "slack_convention": format!(
                "slack = {} bits on log terms, constant {} on smoothing; f = {}, g = {}",
                params.slack, params.c, ub.f_eps, ub.g_eps
            ),
        });
        let m = v.as_object_mut().expect("object");
        match ancilla_comparison(&psi, p, c.k, c.l, c.eps, s, params) {
            Ok(r) => {
                m.insert("kd_rate".into(), json!(r.kd.net_rate));
                m.insert("fewqubits_rate".into(), json!(r.fewqubits.net_rate));
                m.insert("c_borrow".into(), json!(r.c_borrow));
                m.insert("d_borrow".into(), json!(r.d_borrow));
                m.insert("margin".into(), json!(r.margin));
            }
            Err(e) => {
                m.insert("error".into(), json!(e.to_string()));
            }
        }
        v
    });
    Ok((
        rows,
        &[
            "povm", "seed", "local_lower", "local_upper", "dist_upper", "dist_upper_rank1", "h_max_a",
            "h_min_b_given_x", "f_eps", "g_eps", "kd_rate", "fewqubits_rate", "c_borrow", "d_borrow", "margin",
            "slack_bits", "slack_convention", "error",
        ],
    ))
}

fn write(rows: &[Value], columns: &[&str], header: Value, format: Format, out: Option<&Path>) -> Result<()> {
    let text = match format {
        Format::Csv => to_csv(rows, columns)?,
        Format::Json => {
            let mut h = header;
            h.as_object_mut().expect("header is an object").insert("records".into(), Value::Array(rows.to_vec()));
            to_json(&h)
        }
    };
    emit(&text, out)
}

fn header(cmd: &str, c: &Common) -> Result<Value> {
    Ok(json!({
        "command": cmd,
        "state": c.state.display().to_string(),
        "povms": c.povm.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "eps": c.eps,
        "K": c.k,
        "L": c.l,
        "seeds": c.seeds()?,
        "slack_bits": c.params().slack,
    }))
}

fn init_pool() -> Result<()> {
    if let Ok(v) = std::env::var("PUREDIST_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow!("PUREDIST_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("PUREDIST_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_pool()?;
    match &cli.command {
        Command::Verify(v) => {
            if let Some(e) = v.eps {
                check_eps("eps", e)?;
            }
            if v.trials == 0 {
                bail!("trials must be at least 1");
            }
            let results = suite::run(v.trials, v.eps, v.seed);
            let rows: Vec<Value> = results.iter().map(|r| serde_json::to_value(r).expect("serializable")).collect();
            let cols = ["lemma", "module", "trials", "violations", "worst_excess", "pass"];
            let head = json!({"command": "verify", "trials": v.trials, "eps": v.eps, "seed": v.seed});
            write(&rows, &cols, head, v.format, v.out.as_deref())?;
            let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.lemma).collect();
            eprintln!("verify: {}/{} lemmas passed", results.len() - failed.len(), results.len());
            if !failed.is_empty() {
                bail!("lemmas failed: {}", failed.join(", "));
            }
        }
        Command::Entropy(c) => {
            c.validate()?;
            let (rows, cols) = entropy(c)?;
            write(&rows, cols, header("entropy", c)?, c.format, c.out.as_deref())?;
        }
        Command::DistillLocal { common: c, register } => {
            c.validate()?;
            let (rows, cols) = distill_local(c, register.as_deref())?;
            write(&rows, cols, header("distill-local", c)?, c.format, c.out.as_deref())?;
        }
        Command::ProtocolA(c) | Command::KdOneshot(c) | Command::Fewqubits(c) => {
            c.validate()?;
            let name = match &cli.command {
                Command::ProtocolA(_) => "protocol-a",
                Command::KdOneshot(_) => "kd-oneshot",
                _ => "fewqubits",
            };
            let rows = protocol(c, name)?;
            write(&rows, TRANSCRIPT_COLUMNS, header(name, c)?, c.format, c.out.as_deref())?;
        }
        Command::Compare(c) => {
            c.validate()?;
            let (rows, cols) = compare(c)?;
            write(&rows, cols, header("compare", c)?, c.format, c.out.as_deref())?;
        }
        Command::Bounds(c) => {
            c.validate()?;
            let (rows, cols) = bounds(c)?;
            write(&rows, cols, header("bounds", c)?, c.format, c.out.as_deref())?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seeds("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_seeds("1..=2, 7").unwrap(), vec![1, 2, 7]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("5..2").is_err());
    }
}
