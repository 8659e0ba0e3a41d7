//! Rectified flow between two diagonal Gaussians with the exact marginal
//! velocity standing in for a learned field.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::McEstimate;
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEndpoints {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub var0: Vec<f64>,
    pub var1: Vec<f64>,
}

impl GaussianEndpoints {
    pub fn new(mu0: Vec<f64>, mu1: Vec<f64>, var0: Vec<f64>, var1: Vec<f64>) -> Result<Self> {
        let d = mu0.len();
        if d == 0 {
            return shape_err("endpoints need at least one coordinate");
        }
        if mu1.len() != d || var0.len() != d || var1.len() != d {
            return shape_err(format!(
                "endpoint lengths differ: mu0 {d}, mu1 {}, var0 {}, var1 {}",
                mu1.len(),
                var0.len(),
                var1.len()
            ));
        }
        if mu0.iter().chain(&mu1).any(|m| !m.is_finite()) {
            return invalid("means must be finite");
        }
        if var0.iter().chain(&var1).any(|v| !(*v > 0.0 && v.is_finite())) {
            return invalid("variances must be finite and > 0");
        }
        Ok(Self { mu0, mu1, var0, var1 })
    }

    pub fn isotropic(d: usize, mu0: f64, mu1: f64, var0: f64, var1: f64) -> Result<Self> {
        Self::new(vec![mu0; d], vec![mu1; d], vec![var0; d], vec![var1; d])
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Mean of `x_t = (1−t)x0 + t x1`.
    pub fn mean_at(&self, t: f64) -> Vec<f64> {
        self.mu0.iter().zip(&self.mu1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    }

    /// Variance of `x_t` under independent coupling.
    pub fn var_at(&self, t: f64) -> Vec<f64> {
        self.var0
            .iter()
            .zip(&self.var1)
            .map(|(v0, v1)| (1.0 - t) * (1.0 - t) * v0 + t * t * v1)
            .collect()
    }

    pub fn sample_source(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.mu0.iter().zip(&self.var0).map(|(m, v)| m + v.sqrt() * rng.normal()).collect()
    }

    pub fn sample_target(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.mu1.iter().zip(&self.var1).map(|(m, v)| m + v.sqrt() * rng.normal()).collect()
    }

    /// Where the exact ODE carries `x0`: an affine map matching the endpoint
    /// standard deviations coordinate by coordinate.
    pub fn flow_map(&self, x0: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.mu1[k] + (self.var1[k] / self.var0[k]).sqrt() * (x0[k] - self.mu0[k]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != states.len() {
            return shape_err(format!("{} times for {} states", times.len(), states.len()));
        }
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("times must increase from 0 to 1");
        }
        let d = states[0].len();
        if states.iter().any(|s| s.len() != d) {
            return shape_err("states have different lengths");
        }
        Ok(Self { times, states })
    }

    pub fn start(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn end(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// `t,x_1,...,x_d` rows.
    pub fn to_csv(&self) -> String {
        let d = self.states[0].len();
        let mut out = String::from("t");
        for k in 1..=d {
            let _ = write!(out, ",x_{k}");
        }
        out.push('\n');
        for (t, s) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t:?}");
            for x in s {
                let _ = write!(out, ",{x:?}");
            }
            out.push('\n');
        }
        out
    }
}

/// Exact marginal velocity `E[x1 − x0 | x_t = x]` for independent Gaussian
/// endpoints.
pub fn bridge_velocity(x: &[f64], t: f64, ep: &GaussianEndpoints) -> Result<Vec<f64>> {
    if x.len() != ep.dim() {
        return shape_err(format!("state has {} coordinates, endpoints {}", x.len(), ep.dim()));
    }
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("t must lie in [0, 1], got {t}"));
    }
    let mut v = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let (v0, v1) = (ep.var0[k], ep.var1[k]);
        let denom = (1.0 - t) * (1.0 - t) * v0 + t * t * v1;
        if !(denom >= 1e-300) {
            return Err(Error::DegenerateTime { t, denominator: denom });
        }
        let coef = (t * v1 - (1.0 - t) * v0) / denom;
        let centre = (1.0 - t) * ep.mu0[k] + t * ep.mu1[k];
        v.push(ep.mu1[k] - ep.mu0[k] + coef * (x[k] - centre));
    }
    Ok(v)
}

/// Monte-Carlo `E[x1 − x0 | x_t = x]` by drawing `x0` from its Gaussian
/// conditional given `x_t` and solving for `x1`. Returns per-coordinate
/// means and standard errors. Needs `t > 0`.
pub fn conditional_velocity_mc(
    x: &[f64],
    t: f64,
    ep: &GaussianEndpoints,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(t > 0.0 && t <= 1.0) || samples < 2 || x.len() != ep.dim() {
        return invalid("conditional oracle needs t in (0, 1], samples >= 2 and a matching state");
    }
    let d = ep.dim();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..samples {
        for k in 0..d {
            let (v0, v1) = (ep.var0[k], ep.var1[k]);
            let vt = (1.0 - t) * (1.0 - t) * v0 + t * t * v1;
            let gain = (1.0 - t) * v0 / vt;
            let mean0 = ep.mu0[k] + gain * (x[k] - ((1.0 - t) * ep.mu0[k] + t * ep.mu1[k]));
            let var0 = (v0 - gain * (1.0 - t) * v0).max(0.0);
            let x0 = mean0 + var0.sqrt() * rng.normal();
            let x1 = (x[k] - (1.0 - t) * x0) / t;
            let diff = x1 - x0;
            sum[k] += diff;
            sum_sq[k] += diff * diff;
        }
    }
    let n = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    Ok((mean, se))
}

fn uniform_times(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Euler integration of the exact field from a given start.
pub fn euler_from(ep: &GaussianEndpoints, x0: Vec<f64>, steps: usize) -> Result<Trajectory> {
    if steps == 0 {
        return invalid("steps must be >= 1");
    }
    let times = uniform_times(steps);
    let dt = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0;
    for &t in &times[..steps] {
        let v = bridge_velocity(&x, t, ep)?;
        let next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
        states.push(std::mem::replace(&mut x, next));
    }
    states.push(x);
    Trajectory::new(times, states)
}

pub fn euler_sample(ep: &GaussianEndpoints, steps: usize, rng: &mut SeededRng) -> Result<Trajectory> {
    let x0 = ep.sample_source(rng);
    euler_from(ep, x0, steps)
}

/// `n` trajectories, trajectory `i` drawn from child stream `(seed, i)`.
pub fn euler_batch(ep: &GaussianEndpoints, steps: usize, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..n)
        .into_par_iter()
        .map(|i| euler_sample(ep, steps, &mut SeededRng::child(seed, i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalStats {
    pub t: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Standard error of each mean.
    pub mean_se: Vec<f64>,
    /// Standard error of each variance (normal-theory `var·√(2/(n−1))`).
    pub var_se: Vec<f64>,
}

/// Sample mean and variance of the states at every grid time.
pub fn marginal_stats(trajs: &[Trajectory]) -> Result<Vec<MarginalStats>> {
    let first = trajs.first().ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
    let n = trajs.len() as f64;
    if trajs.len() < 2 {
        return invalid("need at least two trajectories");
    }
    let d = first.start().len();
    let mut out = Vec::with_capacity(first.times.len());
    for (i, &t) in first.times.iter().enumerate() {
        let mut mean = vec![0.0; d];
        for tr in trajs {
            for k in 0..d {
                mean[k] += tr.states[i][k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for tr in trajs {
            for k in 0..d {
                let c = tr.states[i][k] - mean[k];
                var[k] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n - 1.0);
        let mean_se = var.iter().map(|v| (v / n).sqrt()).collect();
        let var_se = var.iter().map(|v| v * (2.0 / (n - 1.0)).sqrt()).collect();
        out.push(MarginalStats { t, mean, var, mean_se, var_se });
    }
    Ok(out)
}

/// Mean endpoint distance between Euler and the exact flow map, for each
/// step count, over `n` shared starting points.
pub fn euler_convergence(ep: &GaussianEndpoints, steps: &[usize], n: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let starts: Vec<Vec<f64>> = (0..n)
        .map(|i| ep.sample_source(&mut SeededRng::child(seed, i as u64)))
        .collect();
    steps
        .iter()
        .map(|&s| {
            let errs: Vec<f64> = starts
                .par_iter()
                .map(|x0| {
                    let tr = euler_from(ep, x0.clone(), s)?;
                    let exact = ep.flow_map(x0);
                    Ok(tr.end().iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                })
                .collect::<Result<_>>()?;
            Ok((s, errs.iter().sum::<f64>() / n as f64))
        })
        .collect()
}

/// Least-squares slope of `ln err` against `ln steps`.
pub fn loglog_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// One draw of `(x0, x1, t)` for the flow loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
}

impl FlowSample {
    pub fn draw(ep: &GaussianEndpoints, rng: &mut SeededRng) -> Self {
        let x0 = ep.sample_source(rng);
        let x1 = ep.sample_target(rng);
        let t = rng.uniform();
        Self { x0, x1, t }
    }

    pub fn xt(&self) -> Vec<f64> {
        self.x0.iter().zip(&self.x1).map(|(a, b)| (1.0 - self.t) * a + self.t * b).collect()
    }
}

pub fn flow_samples(ep: &GaussianEndpoints, trials: usize, seed: u64) -> Vec<FlowSample> {
    (0..trials)
        .into_par_iter()
        .map(|i| FlowSample::draw(ep, &mut SeededRng::child(seed, i as u64)))
        .collect()
}

/// Squared error of `candidate` on given samples; reusing one sample set
/// across candidates gives a paired comparison.
pub fn flow_loss_on<F>(samples: &[FlowSample], candidate: F) -> Result<McEstimate>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
{
    if samples.len() < 2 {
        return invalid("need at least two samples");
    }
    let per: Vec<f64> = samples.par_iter().map(|s| sample_loss(s, &candidate)).collect::<Result<_>>()?;
    Ok(summarize(&per))
}

fn sample_loss<F>(s: &FlowSample, candidate: &F) -> Result<f64>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let v = candidate(&s.xt(), s.t)?;
    Ok((0..v.len()).map(|k| (s.x1[k] - s.x0[k] - v[k]).powi(2)).sum())
}

fn summarize(per: &[f64]) -> McEstimate {
    let n = per.len() as f64;
    let mean = per.iter().sum::<f64>() / n;
    let var = per.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    McEstimate {
        mean,
        std_err: (var / n).sqrt(),
    }
}

/// Fresh-sample flow loss.
pub fn flow_loss<F>(ep: &GaussianEndpoints, candidate: F, trials: usize, rng: &mut SeededRng) -> Result<McEstimate>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
{
    let seed = rng.next_u64();
    flow_loss_on(&flow_samples(ep, trials, seed), candidate)
}

/// Difference `loss(b) − loss(a)` per sample, with its standard error.
pub fn paired_loss_gap<A, B>(samples: &[FlowSample], a: A, b: B) -> Result<McEstimate>
where
    A: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
    B: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
{
    if samples.len() < 2 {
        return invalid("need at least two samples");
    }
    let per: Vec<f64> = samples
        .par_iter()
        .map(|s| Ok(sample_loss(s, &b)? - sample_loss(s, &a)?))
        .collect::<Result<_>>()?;
    Ok(summarize(&per))
}

/// `∫₀¹ Σ_k Var(x1 − x0 | x_t)` dt by composite Simpson, the loss floor of
/// any velocity field.
pub fn irreducible_loss(ep: &GaussianEndpoints) -> f64 {
    let cond_var = |t: f64| -> f64 {
        (0..ep.dim())
            .map(|k| {
                let (v0, v1) = (ep.var0[k], ep.var1[k]);
                let vt = (1.0 - t) * (1.0 - t) * v0 + t * t * v1;
                let c = t * v1 - (1.0 - t) * v0;
                v0 + v1 - c * c / vt
            })
            .sum()
    };
    let m = 2000;
    let h = 1.0 / m as f64;
    let mut acc = cond_var(0.0) + cond_var(1.0);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * cond_var(i as f64 * h);
    }
    acc * h / 3.0
}

/// Named perturbations of the exact field used for the optimality check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldPerturbation {
    /// Adds `c` to every coordinate.
    Offset(f64),
    /// Scales the state-dependent coefficient by `1 + eta`.
    GainScale(f64),
    /// Evaluates the field at `t + s` (clamped into [0, 1]).
    TimeShift(f64),
    /// Drops the state-dependent part, leaving `mu1 − mu0`.
    DriftOnly,
}

impl FieldPerturbation {
    pub fn family() -> Vec<FieldPerturbation> {
        vec![
            Self::Offset(0.05),
            Self::Offset(-0.3),
            Self::GainScale(0.1),
            Self::GainScale(-0.2),
            Self::TimeShift(0.05),
            Self::TimeShift(-0.1),
            Self::DriftOnly,
        ]
    }

    pub fn velocity(&self, x: &[f64], t: f64, ep: &GaussianEndpoints) -> Result<Vec<f64>> {
        let drift: Vec<f64> = ep.mu1.iter().zip(&ep.mu0).map(|(a, b)| a - b).collect();
        match *self {
            Self::Offset(c) => Ok(bridge_velocity(x, t, ep)?.into_iter().map(|v| v + c).collect()),
            Self::GainScale(eta) => Ok(bridge_velocity(x, t, ep)?
                .into_iter()
                .zip(&drift)
                .map(|(v, d)| d + (1.0 + eta) * (v - d))
                .collect()),
            Self::TimeShift(s) => bridge_velocity(x, (t + s).clamp(0.0, 1.0), ep),
            Self::DriftOnly => Ok(drift),
        }
    }
}

/// One Euler step of the straight-line flow towards a predicted endpoint:
/// `x + dt·(x̂ − x)/(1 − t)`. With `t + dt = 1` it lands on `x̂`.
pub fn rectified_step(x: &[f64], x_hat: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    if x.len() != x_hat.len() {
        return shape_err(format!("state has {} entries, prediction {}", x.len(), x_hat.len()));
    }
    if !(0.0..1.0).contains(&t) || !(dt > 0.0) || t + dt > 1.0 + 1e-12 {
        return invalid(format!("need 0 <= t < t + dt <= 1, got t = {t}, dt = {dt}"));
    }
    let r = dt / (1.0 - t);
    Ok(x.iter().zip(x_hat).map(|(a, b)| a + r * (b - a)).collect())
}

/// Largest distance from an interior state to the chord between the
/// endpoints, divided by the chord length.
pub fn straightness(traj: &Trajectory) -> f64 {
    let a = traj.start();
    let b = traj.end();
    let chord: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let len2: f64 = chord.iter().map(|c| c * c).sum();
    if len2 == 0.0 {
        return 0.0;
    }
    let n = traj.states.len();
    traj.states[1..n - 1]
        .iter()
        .map(|s| {
            let rel: Vec<f64> = s.iter().zip(a).map(|(x, y)| x - y).collect();
            let proj = rel.iter().zip(&chord).map(|(r, c)| r * c).sum::<f64>() / len2;
            rel.iter()
                .zip(&chord)
                .map(|(r, c)| (r - proj * c).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
        / len2.sqrt()
}
