//! The full verification battery behind `verify-propositions`.
//!
//! Every check draws its randomness from child streams addressed by
//! `(check seed, trial index)` and reduces results in index order, so the
//! output is identical for any rayon pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    alignment_perturbation, dssi_perturbation_terms, lambda_shift, output_perturbation_bound,
    perturb_logits, prop1_empirical_mass, prop1_predicted_mass, prop2_bound, prop3_bound,
    prop3_corner_max, row_distances, tv_row, AttentionState, BoundReport, BranchStats,
    PerturbationKind, PerturbationSpec,
};
use crate::attention::{scaled_logits, vanilla_from_attention, QkvBlocks};
use crate::dssi::{dssi_loss, dssi_output_with_lambda, lambda_star, DssiConfig};
use crate::error::Result;
use crate::linalg::{gaussian_matrix, softmax_into, Matrix, SeededRng};
use crate::reflow::{
    bridge_velocity, euler_batch, euler_convergence, flow_samples, loglog_slope, marginal_stats, paired_loss_gap,
    FieldPerturbation, GaussianEndpoints,
};

pub const PROP2_DELTAS: [f64; 5] = [0.01, 0.1, 0.3, 1.0, 2.0];
pub const PROP2_DIMS: [usize; 4] = [2, 8, 64, 512];
pub const PROP2_TRIALS: usize = 100_000;

pub const PROP1_SIGMAS: [f64; 3] = [0.05, 0.1, 0.2];
pub const PROP1_COUNTS: [usize; 3] = [4, 16, 64];
/// `(μ_p, μ_s, μ_o)` grid, all within `[−3, 3]`.
pub const PROP1_MEANS: [(f64, f64, f64); 5] = [
    (0.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (2.0, 0.0, -1.0),
    (-3.0, 3.0, 0.0),
    (3.0, -3.0, 3.0),
];
pub const PROP1_TRIALS: usize = 10_000;

pub const LAMBDA_INSTANCES: usize = 1000;
pub const LAMBDA_GRID_STEP: f64 = 1e-3;

pub const PROP3_STRENGTHS: [f64; 5] = [0.5, 1.0, 2.0, 3.5, 5.0];
pub const PROP3_EPS: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.25];
pub const PROP3_INTERIOR: usize = 10_000;

pub const APPENDIX_DELTAS: [f64; 3] = [0.05, 0.1, 0.3];
pub const APPENDIX_TRIALS: usize = 10_000;

pub const OUTPUT_DELTAS: [f64; 4] = [0.01, 0.1, 0.3, 1.0];
pub const OUTPUT_TRIALS: usize = 10_000;
pub const TERM2_RATIO_LIMIT: f64 = 0.05;
pub const TERM2_DELTA: f64 = 0.1;
pub const TERM2_TRIALS: usize = 600;
/// `(N_p, N_s, N_o)` of the balanced instances.
pub const BALANCED_COUNTS: [usize; 3] = [77, 64, 256];
pub const BALANCED_DIM: usize = 16;
pub const BALANCE_JITTER: f64 = 3.0;
pub const BALANCED_RANGE: std::ops::RangeInclusive<f64> = 0.5..=2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check_name: String,
    pub delta_or_sigma: f64,
    pub report: BoundReport,
    pub trials: usize,
    pub seed: u64,
}

impl CheckRow {
    fn new(name: &str, param: f64, report: BoundReport, trials: usize, seed: u64) -> Self {
        Self {
            check_name: name.to_string(),
            delta_or_sigma: param,
            report,
            trials,
            seed,
        }
    }
}

pub const CSV_HEADER: &str = "check_name,delta_or_sigma,empirical,bound,slack,trials,seed";

pub fn rows_to_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{},{}\n",
            r.check_name, r.delta_or_sigma, r.report.empirical, r.report.bound, r.report.slack, r.trials, r.seed
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub dssi: DssiConfig,
    /// Multiplies every trial count (1.0 runs the full battery).
    pub trials_scale: f64,
}

impl SuiteConfig {
    pub fn new(seed: u64, dssi: DssiConfig) -> Self {
        Self {
            seed,
            dssi,
            trials_scale: 1.0,
        }
    }

    fn trials(&self, full: usize) -> usize {
        ((full as f64 * self.trials_scale).round() as usize).max(1)
    }

    fn seed_for(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag)
    }
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    SeededRng::child(seed, tag).next_u64()
}

fn fold_reports(reports: impl IntoIterator<Item = BoundReport>) -> Option<BoundReport> {
    reports.into_iter().reduce(BoundReport::tighter)
}

/// Runs every check in a fixed order.
pub fn verify_propositions(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    rows.extend(prop1_suite(cfg)?);
    rows.extend(prop2_suite(cfg)?);
    rows.extend(lambda_star_suite(cfg)?);
    rows.extend(prop3_suite(cfg)?);
    rows.extend(appendix_suite(cfg)?);
    rows.extend(output_bound_suite(cfg)?);
    rows.extend(term2_suite(cfg)?);
    Ok(rows)
}

/// Style-branch mass vs. its closed form over the `(μ, N, σ)` grid; the
/// tolerance of each cell is `max(10σ³, 5·std_err)`.
pub fn prop1_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.seed_for(1);
    let trials = cfg.trials(PROP1_TRIALS);
    let mut cells = Vec::new();
    for &sigma in &PROP1_SIGMAS {
        for &(mu_p, mu_s, mu_o) in &PROP1_MEANS {
            for &n_p in &PROP1_COUNTS {
                for &n_s in &PROP1_COUNTS {
                    for &n_o in &PROP1_COUNTS {
                        cells.push(BranchStats {
                            n_p,
                            n_s,
                            n_o,
                            mu_p,
                            mu_s,
                            mu_o,
                            sigma,
                        });
                    }
                }
            }
        }
    }
    let reports: Vec<(f64, BoundReport)> = cells
        .par_iter()
        .enumerate()
        .map(|(k, stats)| {
            let mut rng = SeededRng::child(seed, k as u64);
            let est = prop1_empirical_mass(stats, trials, &mut rng)?;
            let err = (est.mean - prop1_predicted_mass(stats)).abs();
            let tol = (10.0 * stats.sigma.powi(3)).max(5.0 * est.std_err);
            Ok((stats.sigma, BoundReport::new(err, tol)))
        })
        .collect::<Result<_>>()?;
    Ok(PROP1_SIGMAS
        .iter()
        .map(|&sigma| {
            let per_sigma = reports.iter().filter(|(s, _)| *s == sigma).map(|(_, r)| *r);
            let n = reports.iter().filter(|(s, _)| *s == sigma).count();
            CheckRow::new("prop1_style_mass", sigma, fold_reports(per_sigma).unwrap(), n * trials, seed)
        })
        .collect())
}

fn random_logit_row(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    // spread of the clean logits varies per trial from nearly flat to peaked
    let scale = rng.uniform_in(0.1, 5.0);
    (0..n).map(|_| scale * rng.normal()).collect()
}

/// Softmax total variation under `‖ε‖_∞ ≤ δ` against `1 − e^{−2δ}`.
pub fn prop2_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.seed_for(2);
    let total = cfg.trials(PROP2_TRIALS);
    let mut cells = Vec::new();
    for &delta in &PROP2_DELTAS {
        for &n in &PROP2_DIMS {
            for kind in PerturbationKind::ALL {
                cells.push((delta, n, kind));
            }
        }
    }
    let per_cell = total.div_ceil(cells.len());
    let reports: Vec<(f64, BoundReport)> = cells
        .par_iter()
        .enumerate()
        .map(|(k, &(delta, n, kind))| {
            let spec = PerturbationSpec::new(delta, kind)?;
            let bound = prop2_bound(delta).tv_bound;
            let mut worst: f64 = 0.0;
            let mut clean = vec![0.0; n];
            let mut noisy = vec![0.0; n];
            for t in 0..per_cell {
                let mut rng = SeededRng::child(seed, (k * per_cell + t) as u64);
                let z = Matrix::new(1, n, random_logit_row(n, &mut rng))?;
                let zn = perturb_logits(&z, &spec, &mut rng);
                softmax_into(z.row(0), &mut clean);
                softmax_into(zn.row(0), &mut noisy);
                worst = worst.max(tv_row(&noisy, &clean));
            }
            Ok((delta, BoundReport::new(worst, bound)))
        })
        .collect::<Result<_>>()?;
    let trials_per_delta = per_cell * PROP2_DIMS.len() * PerturbationKind::ALL.len();
    Ok(PROP2_DELTAS
        .iter()
        .map(|&delta| {
            let r = fold_reports(reports.iter().filter(|(d, _)| *d == delta).map(|(_, r)| *r)).unwrap();
            CheckRow::new("prop2_tv", delta, r, trials_per_delta, seed)
        })
        .collect())
}

/// Closed-form `λ*` against a `λ` grid, and the curvature `2D(1+γ)`.
pub fn lambda_star_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.seed_for(3);
    let n = cfg.trials(LAMBDA_INSTANCES);
    let steps = (1.0 / LAMBDA_GRID_STEP).round() as usize;
    let results: Vec<(BoundReport, BoundReport)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = SeededRng::child(seed, k as u64);
            let rows = 1 + (rng.next_u64() % 8) as usize;
            let cols = 1 + (rng.next_u64() % 8) as usize;
            let s: Matrix<f64> = gaussian_matrix(rows, cols, 0.0, rng.uniform_in(0.1, 3.0), &mut rng)?;
            let t: Matrix<f64> = gaussian_matrix(rows, cols, 0.0, rng.uniform_in(0.1, 3.0), &mut rng)?;
            // γ spans several orders of magnitude
            let gamma = 10f64.powf(rng.uniform_in(-3.0, 3.0));
            let d = t.sub(&s)?.frobenius().powi(2);
            let at_star = dssi_loss(lambda_star(gamma)?, &s, &t, gamma)?;
            let grid_min = (0..=steps)
                .map(|i| dssi_loss(i as f64 * LAMBDA_GRID_STEP, &s, &t, gamma))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            let undercut = (at_star - grid_min) / d;

            let h = 1e-3;
            let lam = rng.uniform_in(h, 1.0 - h);
            let second = (dssi_loss(lam + h, &s, &t, gamma)? - 2.0 * dssi_loss(lam, &s, &t, gamma)?
                + dssi_loss(lam - h, &s, &t, gamma)?)
                / (h * h);
            let expected = 2.0 * d * (1.0 + gamma);
            let rel = (second - expected).abs() / expected;
            Ok((BoundReport::new(undercut, 1e-9), BoundReport::new(rel, 1e-6)))
        })
        .collect::<Result<_>>()?;
    Ok(vec![
        CheckRow::new(
            "lambda_star_optimality",
            LAMBDA_GRID_STEP,
            fold_reports(results.iter().map(|r| r.0)).unwrap(),
            n,
            seed,
        ),
        CheckRow::new(
            "lambda_star_curvature",
            LAMBDA_GRID_STEP,
            fold_reports(results.iter().map(|r| r.1)).unwrap(),
            n,
            seed,
        ),
    ])
}

/// `|λ̃ − λ| ≤ max(ε_p, ε_s)/(λ_p + λ_s)` on the exhaustive corner grid and
/// on random interior points. Strengths stay at or above `2·max ε`, the
/// region where the bound holds (see `prop3_fails_when_noise_exceeds_the_weaker_strength`).
pub fn prop3_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.seed_for(4);
    let mut corner = None;
    let mut corner_count = 0;
    for &lp in &PROP3_STRENGTHS {
        for &ls in &PROP3_STRENGTHS {
            for &ep in &PROP3_EPS {
                for &es in &PROP3_EPS {
                    let bound = prop3_bound(lp, ls, ep, es)?;
                    let r = BoundReport::new(prop3_corner_max(lp, ls, ep, es), bound);
                    corner = Some(corner.map_or(r, |c: BoundReport| c.tighter(r)));
                    corner_count += 4;
                }
            }
        }
    }
    let n = cfg.trials(PROP3_INTERIOR);
    let interior: Vec<BoundReport> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = SeededRng::child(seed, k as u64);
            let lp = rng.uniform_in(0.5, 5.0);
            let ls = rng.uniform_in(0.5, 5.0);
            let ep = rng.uniform_in(0.0, 0.25);
            let es = rng.uniform_in(0.0, 0.25);
            let dp = rng.uniform_in(-ep, ep);
            let ds = rng.uniform_in(-es, es);
            Ok(BoundReport::new(lambda_shift(lp, ls, dp, ds), prop3_bound(lp, ls, ep, es)?))
        })
        .collect::<Result<_>>()?;
    Ok(vec![
        CheckRow::new("prop3_corners", 0.0, corner.unwrap(), corner_count, seed),
        CheckRow::new("prop3_interior", 0.0, fold_reports(interior).unwrap(), n, seed),
    ])
}

/// Random attention instance: Gaussian Q/K/V plus per-branch logit offsets
/// so that the prompt/style balance varies between instances.
pub struct Instance {
    pub qkv: QkvBlocks<f64>,
    pub logits: Matrix<f64>,
}

pub fn random_instance(rng: &mut SeededRng) -> Result<Instance> {
    let n_p = 4 + (rng.next_u64() % 13) as usize;
    let n_s = 4 + (rng.next_u64() % 13) as usize;
    let n_o = 8 + (rng.next_u64() % 25) as usize;
    let mu_p = rng.uniform_in(-1.5, 1.5);
    let mu_s = rng.uniform_in(-1.5, 1.5);
    sized_instance(rng, [n_p, n_s, n_o], 8, mu_p, mu_s)
}

/// Larger instance whose prompt offset cancels the token-count ratio up to a
/// jitter, so that `λ_p/λ_s` lands near one most of the time.
pub fn balanced_instance(rng: &mut SeededRng) -> Result<Instance> {
    let [n_p, n_s, _] = BALANCED_COUNTS;
    let mu_p = (n_s as f64 / n_p as f64).ln() + rng.uniform_in(-BALANCE_JITTER, BALANCE_JITTER);
    sized_instance(rng, BALANCED_COUNTS, BALANCED_DIM, mu_p, 0.0)
}

fn sized_instance(rng: &mut SeededRng, counts: [usize; 3], d: usize, mu_p: f64, mu_s: f64) -> Result<Instance> {
    let [n_p, n_s, n_o] = counts;
    let mut g = |n| gaussian_matrix::<f64>(n, d, 0.0, 1.0, rng);
    let qkv = QkvBlocks {
        q_p: g(n_p)?,
        q_s: g(n_s)?,
        q_o: g(n_o)?,
        k_p: g(n_p)?,
        k_s: g(n_s)?,
        k_o: g(n_o)?,
        v_p: g(n_p)?,
        v_s: g(n_s)?,
        v_o: g(n_o)?,
    };
    let mut logits = scaled_logits(&qkv.q_o, &qkv.keys())?;
    for i in 0..n_o {
        let row = logits.row_mut(i);
        row[..n_p].iter_mut().for_each(|v| *v += mu_p);
        row[n_p..n_p + n_s].iter_mut().for_each(|v| *v += mu_s);
    }
    Ok(Instance { qkv, logits })
}

/// Measured `max(ε_p, ε_s)` under logit noise against `2δ`.
pub fn appendix_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.seed_for(5);
    let n = cfg.trials(APPENDIX_TRIALS);
    APPENDIX_DELTAS
        .iter()
        .enumerate()
        .map(|(di, &delta)| {
            let reports: Vec<BoundReport> = (0..n)
                .into_par_iter()
                .map(|k| {
                    let mut rng = SeededRng::child(seed, (di * n + k) as u64);
                    let inst = random_instance(&mut rng)?;
                    let spec = PerturbationSpec::new(delta, PerturbationKind::ALL[k % 3])?;
                    let (np, ns) = (inst.qkv.n_p(), inst.qkv.n_s());
                    let clean = crate::attention::BlockAttention::from_logits(inst.logits.clone(), np, ns)?;
                    let noisy = crate::attention::BlockAttention::from_logits(
                        perturb_logits(&inst.logits, &spec, &mut rng),
                        np,
                        ns,
                    )?;
                    let (ep, es) = alignment_perturbation(&clean, &noisy, &cfg.dssi);
                    Ok(BoundReport::new(ep.max(es), 2.0 * delta))
                })
                .collect::<Result<_>>()?;
            Ok(CheckRow::new("appendix_eps_2delta", delta, fold_reports(reports).unwrap(), n, seed))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct OutputTrial {
    vanilla: Option<BoundReport>,
    dssi: Option<BoundReport>,
    dssi_vs_vanilla: Option<BoundReport>,
}

fn merge(a: Option<BoundReport>, b: Option<BoundReport>) -> Option<BoundReport> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.tighter(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Output-row perturbation against the vanilla bound and the three-term
/// reweighted bound (κ = 1), the ordering of the two bounds, and the size of
/// the `λ`-shift term in the balanced regime.
pub fn output_bound_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.seed_for(6);
    let n = cfg.trials(OUTPUT_TRIALS);
    let per_delta = n.div_ceil(OUTPUT_DELTAS.len());
    let mut rows = Vec::new();
    let mut ordering: Option<BoundReport> = None;
    let mut ordering_count = 0;
    for (di, &delta) in OUTPUT_DELTAS.iter().enumerate() {
        let trials: Vec<OutputTrial> = (0..per_delta)
            .into_par_iter()
            .map(|k| output_trial(cfg, seed, (di * per_delta + k) as u64, delta, PerturbationKind::ALL[k % 3]))
            .collect::<Result<_>>()?;
        let fold = |f: fn(&OutputTrial) -> Option<BoundReport>| trials.iter().map(f).fold(None, merge);
        rows.push(CheckRow::new("noisy_output_bound", delta, fold(|t| t.vanilla).unwrap(), per_delta, seed));
        rows.push(CheckRow::new("dssi_three_term_bound", delta, fold(|t| t.dssi).unwrap(), per_delta, seed));
        ordering = merge(ordering, fold(|t| t.dssi_vs_vanilla));
        ordering_count += trials.iter().filter(|t| t.dssi_vs_vanilla.is_some()).count();
    }
    if let Some(r) = ordering {
        rows.push(CheckRow::new("dssi_bound_below_vanilla", 0.0, r, ordering_count, seed));
    }
    Ok(rows)
}

/// Size of the `λ`-shift term relative to the other two at `δ = 0.1`, over
/// instances with `λ_p/λ_s ∈ [0.5, 2]`. Token counts matter here: the shift
/// term shrinks like `1/(λ_p + λ_s)`, so a few dozen output tokens are not
/// enough for it to become small.
pub fn term2_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.seed_for(7);
    let n = cfg.trials(TERM2_TRIALS);
    let [n_p, n_s, _] = BALANCED_COUNTS;
    let reports: Vec<Option<BoundReport>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = SeededRng::child(seed, k as u64);
            let inst = balanced_instance(&mut rng)?;
            let spec = PerturbationSpec::new(TERM2_DELTA, PerturbationKind::ALL[k % 3])?;
            let clean = AttentionState::from_logits(inst.logits.clone(), n_p, n_s, &cfg.dssi)?;
            let noisy = AttentionState::from_logits(perturb_logits(&inst.logits, &spec, &mut rng), n_p, n_s, &cfg.dssi)?;
            let terms = dssi_perturbation_terms(&clean, &noisy, &inst.qkv, 1.0)?;
            let st = crate::dssi::alignment_strengths(&clean.attn, &cfg.dssi);
            let balanced = BALANCED_RANGE.contains(&(st.lambda_p / st.lambda_s));
            Ok(balanced.then(|| BoundReport::strict(terms.ratio, TERM2_RATIO_LIMIT)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<BoundReport> = reports.into_iter().flatten().collect();
    let count = kept.len();
    Ok(fold_reports(kept)
        .map(|r| CheckRow::new("term2_ratio_balanced", TERM2_DELTA, r, count, seed))
        .into_iter()
        .collect())
}

fn output_trial(cfg: &SuiteConfig, seed: u64, index: u64, delta: f64, kind: PerturbationKind) -> Result<OutputTrial> {
    let mut rng = SeededRng::child(seed, index);
    let inst = random_instance(&mut rng)?;
    let (np, ns) = (inst.qkv.n_p(), inst.qkv.n_s());
    let spec = PerturbationSpec::new(delta, kind)?;
    let clean = AttentionState::from_logits(inst.logits.clone(), np, ns, &cfg.dssi)?;
    let noisy = AttentionState::from_logits(perturb_logits(&inst.logits, &spec, &mut rng), np, ns, &cfg.dssi)?;

    let vanilla_bound = output_perturbation_bound(&inst.qkv, delta);
    let h = vanilla_from_attention(&clean.attn, &inst.qkv)?;
    let hn = vanilla_from_attention(&noisy.attn, &inst.qkv)?;
    let vanilla = row_distances(&hn, &h)?
        .into_iter()
        .map(|d| BoundReport::new(d, vanilla_bound))
        .reduce(BoundReport::tighter);

    let terms = dssi_perturbation_terms(&clean, &noisy, &inst.qkv, 1.0)?;
    let g = dssi_output_with_lambda(&inst.qkv, &clean.attn, 1.0, clean.lambda)?;
    let gn = dssi_output_with_lambda(&inst.qkv, &noisy.attn, 1.0, noisy.lambda)?;
    let dssi = row_distances(&gn, &g)?
        .into_iter()
        .zip(&terms.row_totals)
        .map(|(d, &b)| BoundReport::new(d, b))
        .reduce(BoundReport::tighter);

    let lam = clean.lambda;
    let dssi_vs_vanilla = (lam > 0.05 && lam < 0.95).then(|| BoundReport::new(terms.total_bound, vanilla_bound));

    Ok(OutputTrial {
        vanilla,
        dssi,
        dssi_vs_vanilla,
    })
}

/// Endpoints of the reflow battery: three coordinates with shrinking,
/// growing and unchanged spread.
pub fn reflow_endpoints() -> GaussianEndpoints {
    GaussianEndpoints::new(vec![0.0, 1.0, -2.0], vec![2.0, -1.0, 0.5], vec![1.0, 0.5, 2.0], vec![0.25, 2.0, 1.0])
        .expect("constant endpoints are valid")
}

pub const REFLOW_TRAJECTORIES: usize = 10_000;
/// Fine enough that the Euler variance bias stays well below one standard
/// error at [`REFLOW_TRAJECTORIES`].
pub const REFLOW_MARGINAL_STEPS: usize = 1000;
pub const REFLOW_LOSS_SAMPLES: usize = 100_000;
pub const REFLOW_CONVERGENCE_STARTS: usize = 200;

/// Endpoint marginals (|z| ≤ 3), optimality of the exact field against each
/// perturbed field (strict paired gap > 0) and the Euler order
/// (|slope + 1| ≤ 0.2).
pub fn reflow_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    let ep = reflow_endpoints();
    let mut rows = Vec::new();

    let seed = cfg.seed_for(8);
    let n = cfg.trials(REFLOW_TRAJECTORIES).max(2);
    let trajs = euler_batch(&ep, REFLOW_MARGINAL_STEPS, n, seed)?;
    let end = marginal_stats(&trajs)?.pop().expect("trajectories have an end");
    let mean_z = (0..ep.dim())
        .map(|k| (end.mean[k] - ep.mu1[k]).abs() / end.mean_se[k])
        .fold(0.0, f64::max);
    let var_z = (0..ep.dim())
        .map(|k| (end.var[k] - ep.var1[k]).abs() / end.var_se[k])
        .fold(0.0, f64::max);
    let steps = REFLOW_MARGINAL_STEPS as f64;
    rows.push(CheckRow::new("reflow_endpoint_mean_z", steps, BoundReport::new(mean_z, 3.0), n, seed));
    rows.push(CheckRow::new("reflow_endpoint_var_z", steps, BoundReport::new(var_z, 3.0), n, seed));

    let seed = cfg.seed_for(9);
    let n = cfg.trials(REFLOW_LOSS_SAMPLES).max(2);
    let samples = flow_samples(&ep, n, seed);
    let gaps = FieldPerturbation::family()
        .into_iter()
        .map(|p| {
            let gap = paired_loss_gap(&samples, |x, t| bridge_velocity(x, t, &ep), |x, t| p.velocity(x, t, &ep))?;
            // the exact field must lose less: the negated gap has to stay below zero
            Ok(BoundReport::strict(-gap.mean, 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.push(CheckRow::new("reflow_exact_field_optimal", 0.0, fold_reports(gaps).unwrap(), n, seed));

    let seed = cfg.seed_for(10);
    let n = cfg.trials(REFLOW_CONVERGENCE_STARTS).max(2);
    let grid: Vec<usize> = (1..=8).map(|p| 1 << p).collect();
    let slope = loglog_slope(&euler_convergence(&ep, &grid, n, seed)?);
    rows.push(CheckRow::new("reflow_euler_slope", slope, BoundReport::new((slope + 1.0).abs(), 0.2), n, seed));
    Ok(rows)
}
