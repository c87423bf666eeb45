//! Exact information-theoretic computations on finite discrete systems.
//!
//! A [`JointTable`] holds an exhaustive joint pmf over named finite-valued
//! variables; entropies and (conditional / interaction) mutual information
//! are exact sums in nats. [`verify_suite`] numerically checks the
//! information-theoretic claims the training objective rests on, using
//! randomized constructions that satisfy each claim's hypotheses.

use crate::error::{Error, Result};
use crate::parallel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PMF_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct VarDef {
    pub name: String,
    pub cardinality: usize,
}

impl VarDef {
    pub fn new(name: &str, cardinality: usize) -> Self {
        VarDef {
            name: name.into(),
            cardinality,
        }
    }
}

/// Exhaustive joint probability mass function over a tuple of finite-valued
/// variables, row-major with the last variable fastest.
#[derive(Clone, Debug)]
pub struct JointTable {
    vars: Vec<VarDef>,
    pmf: Vec<f64>,
    strides: Vec<usize>,
}

impl JointTable {
    pub fn new(vars: Vec<VarDef>, pmf: Vec<f64>) -> Result<Self> {
        let size: usize = vars.iter().map(|v| v.cardinality).product();
        if size != pmf.len() {
            return Err(Error::InvalidTable(format!(
                "pmf length {} does not match product space size {}",
                pmf.len(),
                size
            )));
        }
        if let Some(bad) = pmf.iter().find(|&&p| p.is_nan() || p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidTable(format!("negative or non-finite mass {bad}")));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > PMF_TOLERANCE {
            return Err(Error::InvalidTable(format!("pmf sums to {total}, not 1")));
        }
        let mut strides = vec![1usize; vars.len()];
        for i in (0..vars.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * vars[i + 1].cardinality;
        }
        Ok(JointTable { vars, pmf, strides })
    }

    /// Random table with Dirichlet(1) mass over the product space.
    pub fn random<R: Rng>(vars: Vec<VarDef>, rng: &mut R) -> Self {
        let size: usize = vars.iter().map(|v| v.cardinality).product();
        let mut pmf: Vec<f64> = (0..size).map(|_| exp1(rng)).collect();
        let total: f64 = pmf.iter().sum();
        for p in pmf.iter_mut() {
            *p /= total;
        }
        JointTable::new(vars, pmf).expect("random table is valid")
    }

    pub fn vars(&self) -> &[VarDef] {
        &self.vars
    }

    fn var_index(&self, name: &str) -> Result<usize> {
        self.vars
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.into()))
    }

    fn group_indices(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.var_index(n)).collect()
    }

    fn check_disjoint(groups: &[&[&str]]) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        for group in groups {
            for name in *group {
                if seen.contains(name) {
                    return Err(Error::OverlappingGroups((*name).into()));
                }
                seen.push(name);
            }
        }
        Ok(())
    }

    /// Marginal pmf over the named variables, indexed in the given order.
    pub fn marginal(&self, names: &[&str]) -> Result<Vec<f64>> {
        let idx = self.group_indices(names)?;
        let dims: Vec<usize> = idx.iter().map(|&i| self.vars[i].cardinality).collect();
        let size: usize = dims.iter().product();
        let mut out = vec![0.0; size];
        for (cell, &p) in self.pmf.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut sub = 0usize;
            for (pos, &vi) in idx.iter().enumerate() {
                let digit = (cell / self.strides[vi]) % self.vars[vi].cardinality;
                sub = sub * dims[pos] + digit;
            }
            out[sub] += p;
        }
        Ok(out)
    }

    /// Shannon entropy of the marginal over `names`, in nats; `0 ln 0 = 0`.
    pub fn entropy(&self, names: &[&str]) -> Result<f64> {
        let marg = self.marginal(names)?;
        Ok(entropy_of(&marg))
    }

    /// Mutual information `I(A;B)` between disjoint variable groups, computed
    /// by the direct ratio sum (not the entropy combination, which tests use
    /// as an independent route).
    pub fn mutual_info(&self, a: &[&str], b: &[&str]) -> Result<f64> {
        Self::check_disjoint(&[a, b])?;
        let mut ab: Vec<&str> = a.to_vec();
        ab.extend_from_slice(b);
        let p_ab = self.marginal(&ab)?;
        let p_a = self.marginal(a)?;
        let p_b = self.marginal(b)?;
        let nb = p_b.len();
        let mut mi = 0.0;
        for (i, &pab) in p_ab.iter().enumerate() {
            if pab <= 0.0 {
                continue;
            }
            let (ia, ib) = (i / nb, i % nb);
            mi += pab * (pab / (p_a[ia] * p_b[ib])).ln();
        }
        Ok(mi)
    }

    /// Conditional mutual information `I(A;B|C)` via the entropy combination
    /// `H(A,C) + H(B,C) - H(A,B,C) - H(C)`.
    pub fn conditional_mi(&self, a: &[&str], b: &[&str], given: &[&str]) -> Result<f64> {
        Self::check_disjoint(&[a, b, given])?;
        let mut ac: Vec<&str> = a.to_vec();
        ac.extend_from_slice(given);
        let mut bc: Vec<&str> = b.to_vec();
        bc.extend_from_slice(given);
        let mut abc: Vec<&str> = a.to_vec();
        abc.extend_from_slice(b);
        abc.extend_from_slice(given);
        Ok(self.entropy(&ac)? + self.entropy(&bc)? - self.entropy(&abc)? - self.entropy(given)?)
    }

    /// Interaction information `I(A;B;C) = I(A;B) - I(A;B|C)`; may be
    /// negative (XOR-style synergy).
    pub fn interaction_info(&self, a: &[&str], b: &[&str], c: &[&str]) -> Result<f64> {
        Ok(self.mutual_info(a, b)? - self.conditional_mi(a, b, c)?)
    }

    /// Conditional entropy `H(Y|Z) = H(Y,Z) - H(Z)`.
    pub fn conditional_entropy(&self, y: &[&str], z: &[&str]) -> Result<f64> {
        let mut yz: Vec<&str> = y.to_vec();
        yz.extend_from_slice(z);
        Ok(self.entropy(&yz)? - self.entropy(z)?)
    }

    /// True conditional `p(y|z)` as a row-per-z table (rows of zero-mass z
    /// are uniform).
    pub fn true_conditional(&self, y: &[&str], z: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut zy: Vec<&str> = z.to_vec();
        zy.extend_from_slice(y);
        let p_zy = self.marginal(&zy)?;
        let p_z = self.marginal(z)?;
        let ny = p_zy.len() / p_z.len();
        let mut rows = Vec::with_capacity(p_z.len());
        for (zi, &pz) in p_z.iter().enumerate() {
            if pz > 0.0 {
                rows.push((0..ny).map(|yi| p_zy[zi * ny + yi] / pz).collect());
            } else {
                rows.push(vec![1.0 / ny as f64; ny]);
            }
        }
        Ok(rows)
    }

    /// Expected log loss `E_p[-ln q(y|z)]` of a classifier table `q` whose
    /// rows are conditional distributions over y per z-cell.
    pub fn expected_log_loss(&self, y: &[&str], z: &[&str], q: &[Vec<f64>]) -> Result<f64> {
        let mut zy: Vec<&str> = z.to_vec();
        zy.extend_from_slice(y);
        let p_zy = self.marginal(&zy)?;
        let nz = self.marginal(z)?.len();
        let ny = p_zy.len() / nz;
        if q.len() != nz || q.iter().any(|row| row.len() != ny) {
            return Err(Error::Invalid(format!(
                "classifier table shape mismatch: want {nz} rows of {ny}"
            )));
        }
        let mut loss = 0.0;
        for zi in 0..nz {
            for yi in 0..ny {
                let p = p_zy[zi * ny + yi];
                if p > 0.0 {
                    loss -= p * q[zi][yi].ln();
                }
            }
        }
        Ok(loss)
    }
}

fn entropy_of(pmf: &[f64]) -> f64 {
    -pmf.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn exp1<R: Rng>(rng: &mut R) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln()
}

fn dirichlet<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| exp1(rng)).collect();
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    v
}

// ---------------------------------------------------------------------------
// Claim verification
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize)]
pub struct ClaimRow {
    pub claim: String,
    pub trials: usize,
    /// lhs/rhs of the most binding trial.
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct VerifyReport {
    pub rows: Vec<ClaimRow>,
    /// Informational measurements, not pass/fail claims.
    pub info: Vec<(String, f64)>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<34} {:>7} {:>14} {:>14} {:>10} {:>9} {:>5}",
            "claim", "trials", "lhs", "rhs", "gap", "tol", "pass"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<34} {:>7} {:>14.6e} {:>14.6e} {:>10.3e} {:>9.1e} {:>5}",
                r.claim,
                r.trials,
                r.lhs,
                r.rhs,
                r.gap,
                r.tolerance,
                if r.pass { "yes" } else { "NO" }
            )?;
        }
        for (name, value) in &self.info {
            writeln!(f, "info: {name} = {value:.6}")?;
        }
        Ok(())
    }
}

/// Track the most binding trial of a claim.
struct Worst {
    lhs: f64,
    rhs: f64,
    gap: f64,
}

impl Worst {
    fn new() -> Self {
        Worst {
            lhs: 0.0,
            rhs: 0.0,
            gap: f64::NEG_INFINITY,
        }
    }

    fn update(&mut self, lhs: f64, rhs: f64, gap: f64) {
        if gap > self.gap {
            self.gap = gap;
            self.lhs = lhs;
            self.rhs = rhs;
        }
    }

    fn merge(mut self, other: Worst) -> Worst {
        self.update(other.lhs, other.rhs, other.gap);
        self
    }

    fn row(self, claim: &str, trials: usize, tolerance: f64) -> ClaimRow {
        ClaimRow {
            claim: claim.into(),
            trials,
            lhs: self.lhs,
            rhs: self.rhs,
            gap: self.gap.max(0.0),
            tolerance,
            pass: self.gap <= tolerance,
        }
    }
}

fn per_trial_worst(
    trials: usize,
    seed: u64,
    salt: u64,
    f: impl Fn(&mut ChaCha8Rng) -> (f64, f64, f64) + Sync + Send,
) -> Worst {
    let partials = parallel::map_indexed(trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (t as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let (lhs, rhs, gap) = f(&mut rng);
        let mut w = Worst::new();
        w.update(lhs, rhs, gap);
        w
    });
    partials.into_iter().fold(Worst::new(), Worst::merge)
}

/// A system where `Z^(s)` is a deterministic sufficient representation of
/// `X^(s)` for `Y`: variables `(zse, y, xs, zs)` with `xs` encoding a `(y, n)`
/// pair and `zs` its y-component.
pub fn sufficient_system<R: Rng>(rng: &mut R) -> JointTable {
    let (kz, ky, kn) = (3, 2, 2);
    let q = dirichlet(kz * ky * kn, rng);
    let vars = vec![
        VarDef::new("zse", kz),
        VarDef::new("y", ky),
        VarDef::new("xs", ky * kn),
        VarDef::new("zs", ky),
    ];
    let size = kz * ky * (ky * kn) * ky;
    let mut pmf = vec![0.0; size];
    for zse in 0..kz {
        for y in 0..ky {
            for n in 0..kn {
                let xs = y * kn + n;
                let zs = y;
                let cell = ((zse * ky + y) * (ky * kn) + xs) * ky + zs;
                pmf[cell] = q[(zse * ky + y) * kn + n];
            }
        }
    }
    JointTable::new(vars, pmf).expect("sufficient system is a valid table")
}

/// A system satisfying sufficiency *and* independence `I(Z_se; Z_sr) = 0`
/// with `Z_sr = Z^(s) = V`: variables `(zse, v, n, y)` where
/// `p = p(v) p(n) sum_u q(zse,u) [y = g(v,u)]` for a random lookup `g`.
pub fn independent_sufficient_system<R: Rng>(rng: &mut R) -> JointTable {
    let (kz, kv, kn, ku, ky) = (3, 2, 2, 3, 2);
    let pv = dirichlet(kv, rng);
    let pn = dirichlet(kn, rng);
    let q = dirichlet(kz * ku, rng);
    let g: Vec<usize> = (0..kv * ku).map(|_| rng.gen_range(0..ky)).collect();
    let vars = vec![
        VarDef::new("zse", kz),
        VarDef::new("v", kv),
        VarDef::new("n", kn),
        VarDef::new("y", ky),
    ];
    let mut pmf = vec![0.0; kz * kv * kn * ky];
    for zse in 0..kz {
        for v in 0..kv {
            for n in 0..kn {
                for u in 0..ku {
                    let y = g[v * ku + u];
                    let cell = ((zse * kv + v) * kn + n) * ky + y;
                    pmf[cell] += pv[v] * pn[n] * q[zse * ku + u];
                }
            }
        }
    }
    JointTable::new(vars, pmf).expect("independent sufficient system is valid")
}

/// A two-view system: `p(x1, x2)` random, `z1 <- x1` and `z2 <- x2` through
/// random channels over a shared code alphabet.
pub fn two_view_system<R: Rng>(rng: &mut R) -> (JointTable, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (k1, k2, kc) = (3, 3, 3);
    let px = dirichlet(k1 * k2, rng);
    let ch1: Vec<Vec<f64>> = (0..k1).map(|_| dirichlet(kc, rng)).collect();
    let ch2: Vec<Vec<f64>> = (0..k2).map(|_| dirichlet(kc, rng)).collect();
    let vars = vec![
        VarDef::new("x1", k1),
        VarDef::new("x2", k2),
        VarDef::new("z1", kc),
        VarDef::new("z2", kc),
    ];
    let mut pmf = vec![0.0; k1 * k2 * kc * kc];
    for x1 in 0..k1 {
        for x2 in 0..k2 {
            for z1 in 0..kc {
                for z2 in 0..kc {
                    let cell = ((x1 * k2 + x2) * kc + z1) * kc + z2;
                    pmf[cell] = px[x1 * k2 + x2] * ch1[x1][z1] * ch2[x2][z2];
                }
            }
        }
    }
    (
        JointTable::new(vars, pmf).expect("two-view system is valid"),
        ch1,
        ch2,
    )
}

/// Numerically verify the information-theoretic claims behind the training
/// objective. Each claim runs `trials` randomized constructions (the
/// classifier bound runs `5 * trials`).
pub fn verify_suite(trials: usize, seed: u64) -> Result<VerifyReport> {
    let mut rows = Vec::new();

    // I(Z;Y|X) = I(Z;Y) - I(Z;Y;X) on random 4-variable tables (X a pair).
    let w = per_trial_worst(trials, seed, 1, |rng| {
        let t = JointTable::random(
            vec![
                VarDef::new("z", 3),
                VarDef::new("y", 2),
                VarDef::new("x1", 2),
                VarDef::new("x2", 2),
            ],
            rng,
        );
        let lhs = t.conditional_mi(&["z"], &["y"], &["x1", "x2"]).unwrap();
        let rhs = t.mutual_info(&["z"], &["y"]).unwrap()
            - t.interaction_info(&["z"], &["y"], &["x1", "x2"]).unwrap();
        (lhs, rhs, (lhs - rhs).abs())
    });
    rows.push(w.row("cmi_decomposition_identity", trials, 1e-12));

    // Sufficiency-based equality I(Zse;Y;Xs) = I(Zse;Y;Zs).
    let w = per_trial_worst(trials, seed, 2, |rng| {
        let t = sufficient_system(rng);
        let lhs = t.interaction_info(&["zse"], &["y"], &["xs"]).unwrap();
        let rhs = t.interaction_info(&["zse"], &["y"], &["zs"]).unwrap();
        (lhs, rhs, (lhs - rhs).abs())
    });
    rows.push(w.row("sufficiency_interaction_equality", trials, 1e-10));

    // Interaction upper bound I(Zse;Y;Zsr) <= I(Zse;Zsr) on arbitrary tables.
    let w = per_trial_worst(trials, seed, 3, |rng| {
        let t = JointTable::random(
            vec![
                VarDef::new("zse", 3),
                VarDef::new("y", 3),
                VarDef::new("zsr", 3),
            ],
            rng,
        );
        let lhs = t.interaction_info(&["zse"], &["y"], &["zsr"]).unwrap();
        let rhs = t.mutual_info(&["zse"], &["zsr"]).unwrap();
        (lhs, rhs, lhs - rhs)
    });
    rows.push(w.row("interaction_upper_bound", trials, 1e-12));

    // Under sufficiency + subspace independence: I(Zse;Y|Xs) >= I(Zse;Y).
    let w = per_trial_worst(trials, seed, 4, |rng| {
        let t = independent_sufficient_system(rng);
        let indep = t.mutual_info(&["zse"], &["v"]).unwrap();
        debug_assert!(indep.abs() < 1e-12, "construction broke independence: {indep}");
        let lhs = t.conditional_mi(&["zse"], &["y"], &["v", "n"]).unwrap();
        let rhs = t.mutual_info(&["zse"], &["y"]).unwrap();
        (lhs, rhs, rhs - lhs)
    });
    rows.push(w.row("conditional_gain_lower_bound", trials, 1e-10));

    // Classifier bound: E[-ln q(y|z)] >= H(Y|Z), equality at q = p(y|z).
    let ce_trials = trials * 5;
    let w = per_trial_worst(ce_trials, seed, 5, |rng| {
        let t = JointTable::random(vec![VarDef::new("z", 4), VarDef::new("y", 3)], rng);
        let h = t.conditional_entropy(&["y"], &["z"]).unwrap();
        let q: Vec<Vec<f64>> = (0..4).map(|_| dirichlet(3, rng)).collect();
        let ce = t.expected_log_loss(&["y"], &["z"], &q).unwrap();
        (ce, h, h - ce)
    });
    rows.push(w.row("cross_entropy_bound", ce_trials, 1e-12));

    let w = per_trial_worst(trials, seed, 6, |rng| {
        let t = JointTable::random(vec![VarDef::new("z", 4), VarDef::new("y", 3)], rng);
        let h = t.conditional_entropy(&["y"], &["z"]).unwrap();
        let q = t.true_conditional(&["y"], &["z"]).unwrap();
        let ce = t.expected_log_loss(&["y"], &["z"], &q).unwrap();
        (ce, h, (ce - h).abs())
    });
    rows.push(w.row("cross_entropy_equality_at_truth", trials, 1e-10));

    // Cross-view bound: I(X1;Z1|X2) <= E[D_KL(p(z1|x1) || p(z2|x2))].
    let w = per_trial_worst(trials, seed, 7, |rng| {
        let (t, ch1, ch2) = two_view_system(rng);
        let lhs = t.conditional_mi(&["x1"], &["z1"], &["x2"]).unwrap();
        let px = t.marginal(&["x1", "x2"]).unwrap();
        let k2 = 3;
        let mut rhs = 0.0;
        for x1 in 0..3 {
            for x2 in 0..3 {
                let mut kl = 0.0;
                for z in 0..3 {
                    kl += ch1[x1][z] * (ch1[x1][z] / ch2[x2][z]).ln();
                }
                rhs += px[x1 * k2 + x2] * kl;
            }
        }
        (lhs, rhs, lhs - rhs)
    });
    rows.push(w.row("cross_view_kl_upper_bound", trials, 1e-12));

    // Informational: residual dependence of two orthogonal projections of a
    // correlated cloud, measured on a discretized exhaustive table.
    let info_gap = orthogonal_projection_mi_gap(seed);

    Ok(VerifyReport {
        rows,
        info: vec![(
            "orthogonal_projection_residual_mi_nats".into(),
            info_gap,
        )],
    })
}

/// Discretize orthogonal projections of a correlated 2-D Gaussian cloud and
/// measure their residual mutual information. Orthogonality relaxes
/// independence; this records the size of the relaxation gap on a toy system.
fn orthogonal_projection_mi_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let n = 4000;
    let bins = 4;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.sample(rand_distr::StandardNormal);
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        // correlated cloud, then project on two orthogonal axes
        let x = u;
        let y = 0.6 * u + 0.8 * v;
        let dir = std::f64::consts::FRAC_PI_6;
        a.push(x * dir.cos() + y * dir.sin());
        b.push(-x * dir.sin() + y * dir.cos());
    }
    let qa = quantile_bins(&a, bins);
    let qb = quantile_bins(&b, bins);
    let mut counts = vec![0.0; bins * bins];
    for (&ia, &ib) in qa.iter().zip(&qb) {
        counts[ia * bins + ib] += 1.0;
    }
    for c in counts.iter_mut() {
        *c /= n as f64;
    }
    let t = JointTable::new(
        vec![VarDef::new("zsr", bins), VarDef::new("zse", bins)],
        counts,
    )
    .expect("discretized cloud is a valid table");
    t.mutual_info(&["zsr"], &["zse"]).unwrap()
}

fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thresholds: Vec<f64> = (1..bins)
        .map(|k| sorted[k * values.len() / bins])
        .collect();
    values
        .iter()
        .map(|v| thresholds.iter().take_while(|&&t| *v >= t).count())
        .collect()
}
