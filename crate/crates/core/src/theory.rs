//! Brute-force checks of the optimal-discriminator identity on finite
//! discrete distributions. All logarithms are natural.
//!
//! For `M` distributions `P_i` over a shared support, the inner objective is
//! `V(D) = sum_i sum_z P_i(z) ln D_i(z)` with each `D(z)` on the simplex.
//! Its maximizer is `D*_i(z) = P_i(z) / sum_j P_j(z)`, and
//! `V(D*) = M JSD(P_1..P_M) - M ln M`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::error::{Error, Result};

pub const SUM_TOLERANCE: f64 = 1e-12;
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
pub const EQUALITY_JSD: f64 = 1e-12;
pub const REFINE_TOLERANCE: f64 = 1e-4;
pub const MAX_SUPPORT: usize = 12;

/// `M` probability vectors over `n` shared support points.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJointSet {
    dists: Vec<Vec<f64>>,
}

impl DiscreteJointSet {
    pub fn new(dists: Vec<Vec<f64>>) -> Result<Self> {
        let n = dists.first().map_or(0, Vec::len);
        if dists.len() < 2 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 distributions over a non-empty support, got {} x {n}",
                dists.len()
            )));
        }
        for (i, p) in dists.iter().enumerate() {
            if p.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "distribution {i} has {} points, expected {n}",
                    p.len()
                )));
            }
            if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "distribution {i} has a negative or non-finite entry"
                )));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "distribution {i} sums to {s}"
                )));
            }
        }
        Ok(Self { dists })
    }

    pub fn m(&self) -> usize {
        self.dists.len()
    }

    pub fn n(&self) -> usize {
        self.dists[0].len()
    }

    pub fn dist(&self, i: usize) -> &[f64] {
        &self.dists[i]
    }

    fn mass(&self, z: usize) -> f64 {
        self.dists.iter().map(|p| p[z]).sum()
    }

    /// Removes support points where every distribution is zero.
    pub fn drop_zero_mass(&self) -> Self {
        let keep: Vec<usize> = (0..self.n()).filter(|&z| self.mass(z) > 0.0).collect();
        Self {
            dists: self
                .dists
                .iter()
                .map(|p| keep.iter().map(|&z| p[z]).collect())
                .collect(),
        }
    }

    /// Relabels support point `perm[z]` as `z`.
    pub fn permute_support(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n()];
        if perm.len() != self.n()
            || perm
                .iter()
                .any(|&z| z >= self.n() || std::mem::replace(&mut seen[z], true))
        {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of 0..{}",
                self.n()
            )));
        }
        Ok(Self {
            dists: self
                .dists
                .iter()
                .map(|p| perm.iter().map(|&z| p[z]).collect())
                .collect(),
        })
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogy(v, v)).sum::<f64>()
}

/// Optimal discriminator as an `n x M` matrix. Every support point must carry
/// positive total mass.
pub fn closed_form_d(joints: &DiscreteJointSet) -> Result<Vec<Vec<f64>>> {
    (0..joints.n())
        .map(|z| {
            let total = joints.mass(z);
            if total <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "support point {z} has zero total mass; drop it first"
                )));
            }
            Ok(joints.dists.iter().map(|p| p[z] / total).collect())
        })
        .collect()
}

/// `sum_z sum_i P_i(z) ln D_i(z)` for an `n x M` matrix `d`, with `0 ln 0 = 0`.
pub fn inner_objective(joints: &DiscreteJointSet, d: &[Vec<f64>]) -> f64 {
    (0..joints.n())
        .map(|z| point_objective(joints, z, &d[z]))
        .sum()
}

fn point_objective(joints: &DiscreteJointSet, z: usize, row: &[f64]) -> f64 {
    joints
        .dists
        .iter()
        .zip(row)
        .map(|(p, &d)| xlogy(p[z], d))
        .sum()
}

/// Uniform-weight generalized Jensen-Shannon divergence, in nats.
pub fn generalized_jsd(joints: &DiscreteJointSet) -> f64 {
    let m = joints.m() as f64;
    let mean: Vec<f64> = (0..joints.n()).map(|z| joints.mass(z) / m).collect();
    let within = joints.dists.iter().map(|p| entropy(p)).sum::<f64>() / m;
    (entropy(&mean) - within).max(0.0)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn dirichlet_row(m: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut s = 0.0;
    for o in out.iter_mut().take(m) {
        *o = Distribution::<f64>::sample(&Exp1, rng);
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Projected gradient ascent with Armijo backtracking on one support point.
fn refine_point(joints: &DiscreteJointSet, z: usize, start: &[f64]) -> Vec<f64> {
    let p: Vec<f64> = joints.dists.iter().map(|d| d[z]).collect();
    let mut x = start.to_vec();
    let mut fx = point_objective(joints, z, &x);
    let mut step = 1.0;
    for _ in 0..10_000 {
        let grad: Vec<f64> = p
            .iter()
            .zip(&x)
            .map(|(&pi, &xi)| if pi == 0.0 { 0.0 } else { pi / xi })
            .collect();
        let mut moved = false;
        while step > 1e-18 {
            let cand = project_simplex(
                &x.iter()
                    .zip(&grad)
                    .map(|(a, g)| a + step * g)
                    .collect::<Vec<_>>(),
            );
            let fc = point_objective(joints, z, &cand);
            let lin: f64 = grad
                .iter()
                .zip(cand.iter().zip(&x))
                .map(|(g, (c, a))| g * (c - a))
                .sum();
            if fc.is_finite() && fc >= fx + 1e-4 * lin && fc > fx {
                x = cand;
                fx = fc;
                moved = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

/// Result of the randomized search for the inner maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerMax {
    /// Highest objective among the `trials` full random candidates.
    pub best_candidate: f64,
    /// Objective after per-point selection and ascent refinement.
    pub objective: f64,
    pub d: Vec<Vec<f64>>,
}

/// Samples `trials` feasible discriminators with Dirichlet(1) rows. Support
/// points are independent, so the best row per point is then refined by
/// projected ascent.
pub fn numeric_inner_max(
    joints: &DiscreteJointSet,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InnerMax> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let (n, m) = (joints.n(), joints.m());
    let mut best_rows = vec![vec![0.0; m]; n];
    let mut best_point = vec![f64::NEG_INFINITY; n];
    let mut best_candidate = f64::NEG_INFINITY;
    let mut row = vec![0.0; m];
    for _ in 0..trials {
        let mut total = 0.0;
        for z in 0..n {
            dirichlet_row(m, rng, &mut row);
            let v = point_objective(joints, z, &row);
            total += v;
            if v > best_point[z] {
                best_point[z] = v;
                best_rows[z].copy_from_slice(&row);
            }
        }
        best_candidate = best_candidate.max(total);
    }
    let d: Vec<Vec<f64>> = (0..n)
        .map(|z| refine_point(joints, z, &best_rows[z]))
        .collect();
    Ok(InnerMax {
        best_candidate,
        objective: inner_objective(joints, &d),
        d,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub m: usize,
    pub n: usize,
    pub objective: f64,
    pub jsd: f64,
    /// `V(D*) - (M JSD - M ln M)`.
    pub identity_residual: f64,
    /// `V(D*) + M ln M`, zero exactly at the minimum.
    pub minimum_gap: f64,
    pub identity_ok: bool,
    pub minimum_ok: bool,
}

impl IdentityReport {
    pub fn pass(&self) -> bool {
        self.identity_ok && self.minimum_ok
    }
}

pub fn verify_identity(joints: &DiscreteJointSet) -> Result<IdentityReport> {
    let joints = joints.drop_zero_mass();
    let m = joints.m() as f64;
    let objective = inner_objective(&joints, &closed_form_d(&joints)?);
    let jsd = generalized_jsd(&joints);
    let identity_residual = objective - (m * jsd - m * m.ln());
    let minimum_gap = objective + m * m.ln();
    Ok(IdentityReport {
        m: joints.m(),
        n: joints.n(),
        objective,
        jsd,
        identity_residual,
        minimum_gap,
        identity_ok: identity_residual.abs() < IDENTITY_TOLERANCE,
        minimum_ok: (minimum_gap.abs() < IDENTITY_TOLERANCE) == (jsd < EQUALITY_JSD),
    })
}

/// Random set with `M` in {2,3,4} and `n` in 1..=12. About a fifth of the
/// entries are zeroed before normalization; with `equal` every distribution
/// is a copy of the first.
pub fn random_joint_set(seed: u64, equal: bool) -> DiscreteJointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=4);
    let n = rng.random_range(1..=MAX_SUPPORT);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut p: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = Distribution::<f64>::sample(&Exp1, rng);
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    e
                }
            })
            .collect();
        if p.iter().all(|&v| v == 0.0) {
            p[rng.random_range(0..n)] = 1.0;
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    };
    let first = draw(&mut rng);
    let mut dists = vec![first];
    for _ in 1..m {
        let next = if equal {
            dists[0].clone()
        } else {
            draw(&mut rng)
        };
        dists.push(next);
    }
    DiscreteJointSet::new(dists).expect("generated distributions are normalized")
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRecord {
    pub instance: usize,
    pub seed: u64,
    pub equal: bool,
    pub m: usize,
    pub n: usize,
    pub jsd: f64,
    pub identity_residual: f64,
    pub minimum_gap: f64,
    /// Closed-form objective minus the best random candidate.
    pub candidate_margin: f64,
    /// Closed-form objective minus the refined numeric maximum.
    pub refine_gap: f64,
    pub identity_ok: bool,
    pub minimum_ok: bool,
    pub closed_form_ok: bool,
    pub pass: bool,
}

/// Runs both checks on one set, using `trials` random candidates.
pub fn verify_instance(
    instance: usize,
    seed: u64,
    equal: bool,
    joints: &DiscreteJointSet,
    trials: usize,
) -> Result<InstanceRecord> {
    let report = verify_identity(joints)?;
    let joints = joints.drop_zero_mass();
    let closed = inner_objective(&joints, &closed_form_d(&joints)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let search = numeric_inner_max(&joints, trials, &mut rng)?;
    let candidate_margin = closed - search.best_candidate;
    let refine_gap = closed - search.objective;
    // The closed form may beat a candidate by rounding only, never lose.
    let closed_form_ok =
        candidate_margin >= -IDENTITY_TOLERANCE && refine_gap.abs() < REFINE_TOLERANCE;
    Ok(InstanceRecord {
        instance,
        seed,
        equal,
        m: report.m,
        n: report.n,
        jsd: report.jsd,
        identity_residual: report.identity_residual,
        minimum_gap: report.minimum_gap,
        candidate_margin,
        refine_gap,
        identity_ok: report.identity_ok,
        minimum_ok: report.minimum_ok,
        closed_form_ok,
        pass: report.pass() && closed_form_ok,
    })
}

/// Instance `i` uses seed `seed + i`; every fourth instance is an
/// equal-distribution set.
pub fn verify_random(instances: usize, seed: u64, trials: usize) -> Result<Vec<InstanceRecord>> {
    (0..instances)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let equal = i % 4 == 3;
            verify_instance(i, s, equal, &random_joint_set(s, equal), trials)
        })
        .collect()
}

pub fn report_jsonl(records: &[InstanceRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
