//! Numerical checks of the branch-dominance approximation, the softmax
//! total-variation bound, the fused-output perturbation bounds and the
//! sensitivity of the dynamic weight `λ`.

pub mod suite;

use serde::{Deserialize, Serialize};

use crate::attention::{BlockAttention, QkvBlocks};
use crate::dssi::{alignment_strengths, DssiConfig};
use crate::error::{invalid, shape_err, Result};
use crate::linalg::{l1, l2, softmax_into, Matrix, SeededRng};

/// Slack allowed on every bound comparison to absorb rounding.
pub const BOUND_TOLERANCE: f64 = 1e-12;

/// Branch-wise logit statistics `Z_ij = μ_b + ξ_ij`, `ξ ~ N(0, σ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub n_p: usize,
    pub n_s: usize,
    pub n_o: usize,
    pub mu_p: f64,
    pub mu_s: f64,
    pub mu_o: f64,
    pub sigma: f64,
}

impl BranchStats {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_s == 0 || self.n_o == 0 {
            return invalid("branch token counts must be >= 1");
        }
        if !(self.sigma >= 0.0) {
            return invalid(format!("sigma must be >= 0, got {}", self.sigma));
        }
        Ok(())
    }
}

/// `N_s e^{μ_s} / (N_p e^{μ_p} + N_s e^{μ_s} + N_o e^{μ_o})`, evaluated in
/// the equivalent `1 / (1 + …)` form for overflow safety.
pub fn prop1_predicted_mass(stats: &BranchStats) -> f64 {
    let (np, ns, no) = (stats.n_p as f64, stats.n_s as f64, stats.n_o as f64);
    1.0 / (1.0 + np / ns * (stats.mu_p - stats.mu_s).exp() + no / ns * (stats.mu_o - stats.mu_s).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std_err = if samples.len() > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, std_err }
    }
}

/// Monte-Carlo style-branch mass. Each trial draws one query row of logits
/// (rows are i.i.d. under the model) and records its style-block ℓ1 mass.
pub fn prop1_empirical_mass(stats: &BranchStats, trials: usize, rng: &mut SeededRng) -> Result<McEstimate> {
    stats.validate()?;
    if trials == 0 {
        return invalid("trials must be >= 1");
    }
    let n = stats.n_p + stats.n_s + stats.n_o;
    let mut z = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let style = stats.n_p..stats.n_p + stats.n_s;
    let samples: Vec<f64> = (0..trials)
        .map(|_| {
            for (j, v) in z.iter_mut().enumerate() {
                let mu = if j < stats.n_p {
                    stats.mu_p
                } else if j < stats.n_p + stats.n_s {
                    stats.mu_s
                } else {
                    stats.mu_o
                };
                *v = if stats.sigma > 0.0 { mu + stats.sigma * rng.normal() } else { mu };
            }
            softmax_into(&z, &mut alpha);
            alpha[style.clone()].iter().sum::<f64>()
        })
        .collect();
    Ok(McEstimate::from_samples(&samples))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `ε_ij ~ Uniform[−δ, δ]`.
    UniformPmDelta,
    /// `ε_ij = ±δ` with a fair coin.
    SignDelta,
    /// `+δ` on each row's argmax, `−δ` everywhere else.
    AdversarialRowmax,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [
        PerturbationKind::UniformPmDelta,
        PerturbationKind::SignDelta,
        PerturbationKind::AdversarialRowmax,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub delta: f64,
    pub distribution: PerturbationKind,
}

impl PerturbationSpec {
    pub fn new(delta: f64, distribution: PerturbationKind) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return invalid(format!("delta must be finite and >= 0, got {delta}"));
        }
        Ok(Self { delta, distribution })
    }
}

/// `Z + ε` with `‖ε‖_∞ ≤ δ`.
pub fn perturb_logits(z: &Matrix<f64>, spec: &PerturbationSpec, rng: &mut SeededRng) -> Matrix<f64> {
    let delta = spec.delta;
    let mut out = z.clone();
    match spec.distribution {
        PerturbationKind::UniformPmDelta => {
            for v in out.data_mut() {
                *v += rng.uniform_in(-delta, delta).clamp(-delta, delta);
            }
        }
        PerturbationKind::SignDelta => {
            for v in out.data_mut() {
                *v += if rng.coin() { delta } else { -delta };
            }
        }
        PerturbationKind::AdversarialRowmax => {
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                for (j, v) in row.iter_mut().enumerate() {
                    *v += if j == argmax { delta } else { -delta };
                }
            }
        }
    }
    out
}

fn ensure_row_stochastic(m: &Matrix<f64>, name: &str) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return invalid(format!("{name} row {i} is not a probability vector (sum {total})"));
        }
    }
    Ok(())
}

/// Per-row total variation `½‖a_i − b_i‖₁`.
pub fn tv_distance(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "tv_distance {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    ensure_row_stochastic(a, "a")?;
    ensure_row_stochastic(b, "b")?;
    Ok(a.row_iter().zip(b.row_iter()).map(|(x, y)| tv_row(x, y)).collect())
}

#[inline]
pub fn tv_row(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prop2Bound {
    /// `1 − e^{−2δ}`
    pub tv_bound: f64,
    /// `2(1 − e^{−2δ})`
    pub l1_bound: f64,
    /// `4δ`
    pub small_delta_asymptote: f64,
}

pub fn prop2_bound(delta: f64) -> Prop2Bound {
    let tv = -(-2.0 * delta).exp_m1();
    Prop2Bound {
        tv_bound: tv,
        l1_bound: 2.0 * tv,
        small_delta_asymptote: 4.0 * delta,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub empirical: f64,
    pub bound: f64,
    pub satisfied: bool,
    pub slack: f64,
}

impl BoundReport {
    pub fn new(empirical: f64, bound: f64) -> Self {
        Self {
            empirical,
            bound,
            satisfied: empirical <= bound + BOUND_TOLERANCE,
            slack: bound - empirical,
        }
    }

    /// Strict form `empirical < bound`, for ratio thresholds.
    pub fn strict(empirical: f64, bound: f64) -> Self {
        Self {
            satisfied: empirical < bound,
            ..Self::new(empirical, bound)
        }
    }

    /// The report with the smallest slack; a failing report always wins.
    pub fn tighter(self, other: Self) -> Self {
        match (self.satisfied, other.satisfied) {
            (true, false) => other,
            (false, true) => self,
            _ if other.slack < self.slack => other,
            _ => self,
        }
    }
}

/// Max per-row TV between `softmax(Z + ε)` and `softmax(Z)` over `trials`
/// independent perturbations, checked against `1 − e^{−2δ}`.
pub fn check_prop2(z: &Matrix<f64>, spec: &PerturbationSpec, trials: usize, rng: &mut SeededRng) -> Result<BoundReport> {
    z.ensure_finite("logits")?;
    let clean = crate::linalg::row_softmax(z)?;
    let mut worst: f64 = 0.0;
    let mut buf = vec![0.0; z.cols()];
    for _ in 0..trials {
        let noisy = perturb_logits(z, spec, rng);
        for (i, row) in noisy.row_iter().enumerate() {
            softmax_into(row, &mut buf);
            worst = worst.max(tv_row(&buf, clean.row(i)));
        }
    }
    Ok(BoundReport::new(worst, prop2_bound(spec.delta).tv_bound))
}

/// Largest row ℓ2 norm of each value block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueNorms {
    pub p: f64,
    pub s: f64,
    pub o: f64,
}

impl ValueNorms {
    pub fn of(qkv: &QkvBlocks<f64>) -> Self {
        Self {
            p: qkv.v_p.max_row_l2(),
            s: qkv.v_s.max_row_l2(),
            o: qkv.v_o.max_row_l2(),
        }
    }
}

/// `2(1 − e^{−2δ})(‖V_p‖ + ‖V_s‖ + ‖V_o‖)` with `‖V_b‖` the largest row ℓ2
/// norm, which makes it a bound on every output row.
pub fn output_perturbation_bound(qkv: &QkvBlocks<f64>, delta: f64) -> f64 {
    let n = ValueNorms::of(qkv);
    prop2_bound(delta).l1_bound * (n.p + n.s + n.o)
}

/// Attention weights together with the fusion weight computed from them.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub attn: BlockAttention<f64>,
    pub lambda: f64,
}

impl AttentionState {
    pub fn from_logits(logits: Matrix<f64>, n_p: usize, n_s: usize, cfg: &DssiConfig) -> Result<Self> {
        let attn = BlockAttention::from_logits(logits, n_p, n_s)?;
        let lambda = alignment_strengths(&attn, cfg).lambda_star;
        Ok(Self { attn, lambda })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DssiPerturbationTerms {
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    /// Largest per-row `term1 + term2 + term3`.
    pub total_bound: f64,
    /// `term2 / (term1 + term3)` from the row maxima.
    pub ratio: f64,
    /// `term1 + term2 + term3` for every output row.
    pub row_totals: Vec<f64>,
}

/// Row-wise three-term bound on `‖h̃_o − h_o‖₂` for the reweighted output
/// (κ scales the first two terms). All attention-row norms are ℓ1, the
/// pairing that matches the max-row-ℓ2 value norm.
pub fn dssi_perturbation_terms(
    clean: &AttentionState,
    noisy: &AttentionState,
    qkv: &QkvBlocks<f64>,
    kappa: f64,
) -> Result<DssiPerturbationTerms> {
    let (a, b) = (&clean.attn, &noisy.attn);
    if a.alpha_p.shape() != b.alpha_p.shape()
        || a.alpha_s.shape() != b.alpha_s.shape()
        || a.alpha_o.shape() != b.alpha_o.shape()
    {
        return shape_err("clean and noisy attention have different shapes");
    }
    if a.alpha_p.cols() != qkv.n_p() || a.alpha_s.cols() != qkv.n_s() || a.alpha_o.cols() != qkv.n_o() {
        return shape_err("attention blocks do not match the value blocks");
    }
    let v = ValueNorms::of(qkv);
    let lam = clean.lambda;
    let dlam = (noisy.lambda - clean.lambda).abs();
    let diff_l1 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>();

    let (mut t1, mut t2, mut t3, mut total) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut row_totals = Vec::with_capacity(a.n_queries());
    for i in 0..a.n_queries() {
        let r1 = kappa
            * ((1.0 - lam) * diff_l1(b.alpha_p.row(i), a.alpha_p.row(i)) * v.p
                + lam * diff_l1(b.alpha_s.row(i), a.alpha_s.row(i)) * v.s);
        let r2 = kappa * dlam * (l1(b.alpha_p.row(i)) * v.p + l1(b.alpha_s.row(i)) * v.s);
        let r3 = diff_l1(b.alpha_o.row(i), a.alpha_o.row(i)) * v.o;
        t1 = t1.max(r1);
        t2 = t2.max(r2);
        t3 = t3.max(r3);
        total = total.max(r1 + r2 + r3);
        row_totals.push(r1 + r2 + r3);
    }
    let denom = t1 + t3;
    Ok(DssiPerturbationTerms {
        term1: t1,
        term2: t2,
        term3: t3,
        total_bound: total,
        ratio: if denom > 0.0 { t2 / denom } else { 0.0 },
        row_totals,
    })
}

/// Per-row ℓ2 distances between two outputs.
pub fn row_distances(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<Vec<f64>> {
    let d = a.sub(b)?;
    Ok(d.row_iter().map(l2).collect())
}

/// `max(ε_p, ε_s) / (λ_p + λ_s)`.
pub fn prop3_bound(lambda_p: f64, lambda_s: f64, eps_p: f64, eps_s: f64) -> Result<f64> {
    if !(lambda_p + lambda_s > 0.0) {
        return invalid("lambda_p + lambda_s must be > 0");
    }
    if !(eps_p >= 0.0 && eps_s >= 0.0) {
        return invalid("eps must be >= 0");
    }
    Ok(eps_p.max(eps_s) / (lambda_p + lambda_s))
}

/// `|λ̃ − λ|` for `λ̃_b = λ_b + Δ_b`.
pub fn lambda_shift(lambda_p: f64, lambda_s: f64, delta_p: f64, delta_s: f64) -> f64 {
    let clean = lambda_p / (lambda_p + lambda_s);
    let noisy = (lambda_p + delta_p) / (lambda_p + delta_p + lambda_s + delta_s);
    (noisy - clean).abs()
}

/// Largest `|λ̃ − λ|` over the four corners `Δ_b = ±ε_b`. The shift is a
/// linear-fractional function of `(Δ_p, Δ_s)`, so on a box where the
/// denominator stays positive its extremes sit at the corners.
pub fn prop3_corner_max(lambda_p: f64, lambda_s: f64, eps_p: f64, eps_s: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for sp in [-1.0, 1.0] {
        for ss in [-1.0, 1.0] {
            worst = worst.max(lambda_shift(lambda_p, lambda_s, sp * eps_p, ss * eps_s));
        }
    }
    worst
}

/// `(|λ̃_p − λ_p|, |λ̃_s − λ_s|)` between a clean and a perturbed attention.
pub fn alignment_perturbation(clean: &BlockAttention<f64>, noisy: &BlockAttention<f64>, cfg: &DssiConfig) -> (f64, f64) {
    let a = alignment_strengths(clean, cfg);
    let b = alignment_strengths(noisy, cfg);
    ((b.lambda_p - a.lambda_p).abs(), (b.lambda_s - a.lambda_s).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::vanilla_output_attention;
    use crate::dssi::dssi_output_with_lambda;
    use crate::linalg::gaussian_matrix;

    fn stats(n: usize, mu: (f64, f64, f64), sigma: f64) -> BranchStats {
        BranchStats {
            n_p: n,
            n_s: n,
            n_o: n,
            mu_p: mu.0,
            mu_s: mu.1,
            mu_o: mu.2,
            sigma,
        }
    }

    #[test]
    fn prop1_formula_examples() {
        assert!((prop1_predicted_mass(&stats(5, (0.3, 0.3, 0.3), 0.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((prop1_predicted_mass(&stats(5, (0.0, 2f64.ln(), 0.0), 0.0)) - 0.5).abs() < 1e-15);
        assert!(prop1_predicted_mass(&stats(5, (0.0, 10.0, 0.0), 0.0)) > 0.9999);
    }

    #[test]
    fn prop1_noise_free_is_exact() {
        let s = BranchStats {
            n_p: 3,
            n_s: 7,
            n_o: 11,
            mu_p: 0.4,
            mu_s: -1.0,
            mu_o: 2.0,
            sigma: 0.0,
        };
        let e = prop1_empirical_mass(&s, 10, &mut SeededRng::new(1)).unwrap();
        assert!((e.mean - prop1_predicted_mass(&s)).abs() < 1e-12);
        assert_eq!(e.std_err, 0.0);
    }

    #[test]
    fn prop1_small_sigma_agrees() {
        let s = stats(16, (0.0, 1.0, 0.0), 0.1);
        let e = prop1_empirical_mass(&s, 10_000, &mut SeededRng::new(2)).unwrap();
        assert!((e.mean - prop1_predicted_mass(&s)).abs() < 3e-3);

        let big = stats(16, (0.0, 1.0, 0.0), 1.0);
        let eb = prop1_empirical_mass(&big, 10_000, &mut SeededRng::new(2)).unwrap();
        assert!(
            (eb.mean - prop1_predicted_mass(&big)).abs() > (e.mean - prop1_predicted_mass(&s)).abs(),
            "error should grow with sigma"
        );
    }

    #[test]
    fn perturbation_contracts() {
        let mut rng = SeededRng::new(3);
        let z: Matrix<f64> = gaussian_matrix(4, 6, 0.0, 1.0, &mut rng).unwrap();
        let same = perturb_logits(&z, &PerturbationSpec::new(0.0, PerturbationKind::UniformPmDelta).unwrap(), &mut rng);
        assert_eq!(same, z);
        let u = perturb_logits(&z, &PerturbationSpec::new(0.5, PerturbationKind::UniformPmDelta).unwrap(), &mut rng);
        assert!(u.sub(&z).unwrap().max_abs() <= 0.5);

        let c = Matrix::filled(3, 5, 0.7);
        let s = perturb_logits(&c, &PerturbationSpec::new(0.25, PerturbationKind::SignDelta).unwrap(), &mut rng);
        let mut values: Vec<f64> = s.data().to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values, vec![0.7 - 0.25, 0.7 + 0.25]);

        assert!(PerturbationSpec::new(-0.1, PerturbationKind::SignDelta).is_err());
    }

    #[test]
    fn tv_examples() {
        let m = |r: &[f64]| Matrix::from_rows(&[r]).unwrap();
        assert_eq!(tv_distance(&m(&[0.2, 0.8]), &m(&[0.2, 0.8])).unwrap(), vec![0.0]);
        assert_eq!(tv_distance(&m(&[1.0, 0.0]), &m(&[0.0, 1.0])).unwrap(), vec![1.0]);
        assert_eq!(tv_distance(&m(&[0.5, 0.5]), &m(&[0.75, 0.25])).unwrap(), vec![0.25]);
        assert!(tv_distance(&m(&[0.5, 0.6]), &m(&[0.5, 0.5])).is_err());
        assert!(tv_distance(&m(&[1.5, -0.5]), &m(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn prop2_bound_examples() {
        let b = prop2_bound(0.0);
        assert_eq!((b.tv_bound, b.l1_bound, b.small_delta_asymptote), (0.0, 0.0, 0.0));
        let b = prop2_bound(0.1);
        assert!((b.tv_bound - (1.0 - (-0.2f64).exp())).abs() < 1e-15);
        assert!((b.tv_bound - 0.181269).abs() < 1e-6);
        let b = prop2_bound(0.01);
        assert!((b.l1_bound - 0.04).abs() / 0.04 < 0.01);
    }

    #[test]
    fn prop2_two_point_search_stays_below_bound() {
        // Worst case over two-logit rows: search logit gaps and all corner
        // perturbations (TV is monotone in each |ε_j|, so corners suffice).
        let delta = 0.1;
        let bound = prop2_bound(delta).tv_bound;
        let mut worst: f64 = 0.0;
        for k in 0..=4000 {
            let gap = -10.0 + k as f64 * 0.005;
            let base = [0.0, gap];
            let mut clean = [0.0; 2];
            softmax_into(&base, &mut clean);
            for e0 in [-delta, delta] {
                for e1 in [-delta, delta] {
                    let mut noisy = [0.0; 2];
                    softmax_into(&[e0, gap + e1], &mut noisy);
                    worst = worst.max(tv_row(&noisy, &clean));
                }
            }
        }
        assert!(worst <= bound);
        // the two-point optimum sits at gap −δ: σ(δ) − σ(−δ) = tanh(δ/2)
        assert!((worst - (delta / 2.0).tanh()).abs() < 1e-6, "{worst}");
    }

    #[test]
    fn check_prop2_examples() {
        let mut rng = SeededRng::new(4);
        let z: Matrix<f64> = gaussian_matrix(8, 16, 0.0, 1.0, &mut rng).unwrap();
        let r = check_prop2(&z, &PerturbationSpec::new(0.0, PerturbationKind::SignDelta).unwrap(), 5, &mut rng).unwrap();
        assert_eq!(r.empirical, 0.0);
        assert!(r.satisfied);

        let z: Matrix<f64> = gaussian_matrix(64, 64, 0.0, 1.0, &mut rng).unwrap();
        let r = check_prop2(&z, &PerturbationSpec::new(0.3, PerturbationKind::UniformPmDelta).unwrap(), 200, &mut rng).unwrap();
        assert!(r.satisfied && r.slack > 0.0);

        let delta = 2.0;
        let z = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let r = check_prop2(&z, &PerturbationSpec::new(delta, PerturbationKind::AdversarialRowmax).unwrap(), 1, &mut rng).unwrap();
        // softmax(δ, −δ) against (½, ½): TV = ½ tanh(2δ), ℓ1 = tanh(2δ)
        let l1_expected = ((2.0 * delta).exp() - 1.0) / ((2.0 * delta).exp() + 1.0);
        assert!((2.0 * r.empirical - l1_expected).abs() < 1e-12);
        assert!((l1_expected - 0.9640).abs() < 1e-4);
        assert!((r.bound - 0.9817).abs() < 1e-4);
        assert!(r.satisfied);
    }

    fn random_qkv(np: usize, ns: usize, no: usize, d: usize, seed: u64) -> QkvBlocks<f64> {
        let mut rng = SeededRng::new(seed);
        let mut r = |n| gaussian_matrix(n, d, 0.0, 1.0, &mut rng).unwrap();
        QkvBlocks {
            q_p: r(np),
            q_s: r(ns),
            q_o: r(no),
            k_p: r(np),
            k_s: r(ns),
            k_o: r(no),
            v_p: r(np),
            v_s: r(ns),
            v_o: r(no),
        }
    }

    #[test]
    fn output_bound_examples() {
        let mut qkv = random_qkv(3, 4, 5, 6, 5);
        assert_eq!(output_perturbation_bound(&qkv, 0.0), 0.0);
        let unit = |n: usize| Matrix::from_fn(n, 6, |_, j| if j == 0 { 1.0 } else { 0.0 });
        qkv.v_p = unit(3);
        qkv.v_s = unit(4);
        qkv.v_o = unit(5);
        let b = output_perturbation_bound(&qkv, 0.1);
        assert!((b - 6.0 * (1.0 - (-0.2f64).exp())).abs() < 1e-12);
        assert!((b - 1.0876).abs() < 1e-4);
    }

    #[test]
    fn output_bound_holds_empirically() {
        let qkv = random_qkv(4, 6, 8, 5, 6);
        let clean = vanilla_output_attention(&qkv).unwrap();
        let delta = 0.2;
        let bound = output_perturbation_bound(&qkv, delta);
        let mut rng = SeededRng::new(7);
        for t in 0..1000 {
            let spec = PerturbationSpec::new(delta, PerturbationKind::ALL[t % 3]).unwrap();
            let noisy = BlockAttention::from_logits(perturb_logits(&clean.attn.logits, &spec, &mut rng), 4, 6).unwrap();
            let h = crate::attention::vanilla_from_attention(&noisy, &qkv).unwrap();
            for d in row_distances(&h, &clean.h_o).unwrap() {
                assert!(d <= bound + BOUND_TOLERANCE);
            }
        }
    }

    #[test]
    fn dssi_terms_zero_without_perturbation() {
        let qkv = random_qkv(4, 4, 8, 5, 8);
        let cfg = DssiConfig::default();
        let clean = AttentionState::from_logits(vanilla_output_attention(&qkv).unwrap().attn.logits, 4, 4, &cfg).unwrap();
        let t = dssi_perturbation_terms(&clean, &clean, &qkv, 1.0).unwrap();
        assert_eq!((t.term1, t.term2, t.term3, t.total_bound), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn dssi_terms_bound_empirical_shift() {
        let qkv = random_qkv(8, 8, 24, 6, 9);
        let cfg = DssiConfig::default();
        let logits = vanilla_output_attention(&qkv).unwrap().attn.logits;
        let clean = AttentionState::from_logits(logits.clone(), 8, 8, &cfg).unwrap();
        let h = dssi_output_with_lambda(&qkv, &clean.attn, 1.0, clean.lambda).unwrap();
        let mut rng = SeededRng::new(10);
        for t in 0..300 {
            let spec = PerturbationSpec::new(0.1, PerturbationKind::ALL[t % 3]).unwrap();
            let noisy = AttentionState::from_logits(perturb_logits(&logits, &spec, &mut rng), 8, 8, &cfg).unwrap();
            let terms = dssi_perturbation_terms(&clean, &noisy, &qkv, 1.0).unwrap();
            let hn = dssi_output_with_lambda(&qkv, &noisy.attn, 1.0, noisy.lambda).unwrap();
            for (d, b) in row_distances(&hn, &h).unwrap().into_iter().zip(&terms.row_totals) {
                assert!(d <= b + BOUND_TOLERANCE);
            }
            assert!(terms.total_bound <= output_perturbation_bound(&qkv, 0.1));
        }
    }

    #[test]
    fn prop3_examples() {
        assert_eq!(prop3_bound(1.0, 2.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(prop3_corner_max(1.0, 2.0, 0.0, 0.0), 0.0);
        let b = prop3_bound(1.0, 1.0, 0.1, 0.1).unwrap();
        assert!((b - 0.05).abs() < 1e-15);
        let corner = prop3_corner_max(1.0, 1.0, 0.1, 0.1);
        assert!((corner - (1.1 / 2.0 - 0.5)).abs() < 1e-15);
        assert!(corner <= b + BOUND_TOLERANCE);
        assert!(prop3_bound(0.0, 0.0, 0.1, 0.1).is_err());
    }

    #[test]
    fn prop3_fails_when_noise_exceeds_the_weaker_strength() {
        // Δ_p = Δ_s = −ε shrinks the denominator; once ε > min(λ_p, λ_s)
        // the corner shift exceeds max(ε)/(λ_p + λ_s).
        let (lp, ls, eps) = (1.0, 0.05, 0.1);
        let bound = prop3_bound(lp, ls, eps, eps).unwrap();
        let shift = lambda_shift(lp, ls, -eps, -eps);
        assert!((shift - eps * (lp - ls) / ((lp + ls) * (lp + ls - 2.0 * eps))).abs() < 1e-14);
        assert!(shift > bound);
    }

    #[test]
    fn alignment_perturbation_within_two_delta() {
        let qkv = random_qkv(6, 6, 16, 4, 11);
        let cfg = DssiConfig::default();
        let clean = vanilla_output_attention(&qkv).unwrap().attn;
        let mut rng = SeededRng::new(12);
        for delta in [0.05, 0.1, 0.3] {
            for t in 0..300 {
                let spec = PerturbationSpec::new(delta, PerturbationKind::ALL[t % 3]).unwrap();
                let noisy = BlockAttention::from_logits(perturb_logits(&clean.logits, &spec, &mut rng), 6, 6).unwrap();
                let (ep, es) = alignment_perturbation(&clean, &noisy, &cfg);
                assert!(ep.max(es) <= 2.0 * delta + BOUND_TOLERANCE);
            }
        }
    }

    #[test]
    fn bound_report_selection() {
        let ok = BoundReport::new(0.1, 0.5);
        let tight = BoundReport::new(0.45, 0.5);
        let bad = BoundReport::new(0.7, 0.5);
        assert_eq!(ok.tighter(tight), tight);
        assert_eq!(tight.tighter(bad), bad);
        assert!(!bad.satisfied);
        assert!(!BoundReport::strict(0.05, 0.05).satisfied);
    }
}
