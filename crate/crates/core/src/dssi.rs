//! Dynamic semantic-style integration.
//!
//! The fused output of the output-query rows is the convex combination
//! `(1 − λ)·s + λ·t` of a semantic reference `s = κ α_p V_p + α_o V_o` and a
//! style reference `t = κ α_s V_s + α_o V_o`. The weight `λ` is the closed-form
//! minimiser `γ/(1+γ)` of `L(λ) = ‖h(λ) − s‖²_F + γ‖h(λ) − t‖²_F`, with the
//! trade-off `γ = λ_p/λ_s` taken from the log of the total attention mass the
//! output queries place on each branch.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockAttention, BranchProducts, QkvBlocks};
use crate::error::{invalid, shape_err, Result};
use crate::linalg::{softmax_into, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Plain joint attention.
    Vanilla,
    /// Fixed prompt/style weight.
    Fssi,
    /// Dynamic weight from the alignment strengths.
    #[default]
    Dssi,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Vanilla, FusionMode::Fssi, FusionMode::Dssi];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Vanilla => "vanilla",
            FusionMode::Fssi => "fssi",
            FusionMode::Dssi => "dssi",
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the per-branch attention mass behind `λ_p`, `λ_s` is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentNormalization {
    /// Softmax over the whole `[p; s; o]` key axis, then summed per block.
    #[default]
    FullAxis,
    /// Softmax over one block's keys only. Every row then sums to one, so
    /// both strengths equal `ln N_o` and `λ` is pinned at 1/2.
    BlockLocal,
}

impl AlignmentNormalization {
    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DssiConfig {
    pub kappa: f64,
    pub mode: FusionMode,
    pub lambda_floor: f64,
    /// Prompt-branch weight in `fssi` mode; style gets `1 − fixed_lambda`.
    pub fixed_lambda: f64,
    #[serde(default, skip_serializing_if = "AlignmentNormalization::is_default")]
    pub alignment: AlignmentNormalization,
}

impl Default for DssiConfig {
    fn default() -> Self {
        Self {
            kappa: 2.3,
            mode: FusionMode::Dssi,
            lambda_floor: 1e-6,
            fixed_lambda: 0.5,
            alignment: AlignmentNormalization::FullAxis,
        }
    }
}

impl DssiConfig {
    pub fn with_mode(&self, mode: FusionMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self { kappa, ..self.clone() }
    }

    /// Field-level violations as `(field, message)` pairs.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            out.push(("kappa", format!("must be finite and > 0, got {}", self.kappa)));
        }
        if !(self.lambda_floor > 0.0 && self.lambda_floor.is_finite()) {
            out.push(("lambda_floor", format!("must be finite and > 0, got {}", self.lambda_floor)));
        }
        if !(0.0..=1.0).contains(&self.fixed_lambda) {
            out.push(("fixed_lambda", format!("must lie in [0, 1], got {}", self.fixed_lambda)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some((field, msg)) => invalid(format!("dssi.{field} {msg}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignmentStrengths<T> {
    pub lambda_p: T,
    pub lambda_s: T,
    pub gamma: T,
    pub lambda_star: T,
}

impl<T: Scalar> AlignmentStrengths<T> {
    /// Builds strengths from (already floored) `λ_p`, `λ_s`.
    pub fn from_lambdas(lambda_p: T, lambda_s: T) -> Result<Self> {
        let gamma = lambda_p / lambda_s;
        Ok(Self {
            lambda_p,
            lambda_s,
            gamma,
            lambda_star: lambda_star(gamma)?,
        })
    }
}

/// Total attention mass of the prompt and style blocks under `mode`.
pub fn block_masses<T: Scalar>(attn: &BlockAttention<T>, mode: AlignmentNormalization) -> (T, T) {
    match mode {
        AlignmentNormalization::FullAxis => (attn.alpha_p.sum(), attn.alpha_s.sum()),
        AlignmentNormalization::BlockLocal => {
            let (np, ns) = (attn.n_p(), attn.n_s());
            let local = |start: usize, len: usize| {
                let mut buf = vec![T::zero(); len];
                attn.logits
                    .row_iter()
                    .map(|row| {
                        softmax_into(&row[start..start + len], &mut buf);
                        buf.iter().copied().sum::<T>()
                    })
                    .sum::<T>()
            };
            (local(0, np), local(np, ns))
        }
    }
}

/// `λ_b = max(ln Σ α_b, floor)`, `γ = λ_p/λ_s`, `λ* = γ/(1+γ)`.
pub fn alignment_strengths<T: Scalar>(attn: &BlockAttention<T>, cfg: &DssiConfig) -> AlignmentStrengths<T> {
    let (mass_p, mass_s) = block_masses(attn, cfg.alignment);
    strengths_from_masses(mass_p, mass_s, cfg.lambda_floor)
}

pub fn strengths_from_masses<T: Scalar>(mass_p: T, mass_s: T, floor: f64) -> AlignmentStrengths<T> {
    // masses at or below one would give non-positive logs
    let min_mass = T::one() + T::of(floor);
    let lambda_p = mass_p.max(min_mass).ln();
    let lambda_s = mass_s.max(min_mass).ln();
    AlignmentStrengths::from_lambdas(lambda_p, lambda_s).expect("floored strengths are positive")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceOutputs<T> {
    /// Semantic reference `κ α_p V_p + α_o V_o`.
    pub s: Matrix<T>,
    /// Style reference `κ α_s V_s + α_o V_o`.
    pub t: Matrix<T>,
}

pub fn reference_outputs<T: Scalar>(
    attn: &BlockAttention<T>,
    qkv: &QkvBlocks<T>,
    cfg: &DssiConfig,
) -> Result<ReferenceOutputs<T>> {
    let b = BranchProducts::new(attn, qkv)?;
    Ok(references_from_products(&b, T::of(cfg.kappa)))
}

fn references_from_products<T: Scalar>(b: &BranchProducts<T>, kappa: T) -> ReferenceOutputs<T> {
    let mut s = b.output.clone();
    s.axpy(kappa, &b.prompt).expect("same shape");
    let mut t = b.output.clone();
    t.axpy(kappa, &b.style).expect("same shape");
    ReferenceOutputs { s, t }
}

/// `L(λ) = ‖h(λ) − s‖²_F + γ ‖h(λ) − t‖²_F` with `h(λ) = (1−λ)s + λt`,
/// evaluated from the definition.
pub fn dssi_loss<T: Scalar>(lambda: T, s: &Matrix<T>, t: &Matrix<T>, gamma: T) -> Result<T> {
    if s.shape() != t.shape() {
        return shape_err(format!(
            "s is {}x{}, t is {}x{}",
            s.rows(),
            s.cols(),
            t.rows(),
            t.cols()
        ));
    }
    let one = T::one();
    let mut to_s = T::zero();
    let mut to_t = T::zero();
    for (&a, &b) in s.data().iter().zip(t.data()) {
        let h = (one - lambda) * a + lambda * b;
        to_s += (h - a) * (h - a);
        to_t += (h - b) * (h - b);
    }
    Ok(to_s + gamma * to_t)
}

/// Closed-form minimiser of `λ² + γ(1−λ)²`.
pub fn lambda_star<T: Scalar>(gamma: T) -> Result<T> {
    if gamma.is_nan() || gamma < T::zero() {
        return invalid(format!("gamma must be >= 0, got {gamma}"));
    }
    if gamma.is_infinite() {
        return Ok(T::one());
    }
    Ok(gamma / (T::one() + gamma))
}

fn combine<T: Scalar>(b: &BranchProducts<T>, prompt_w: T, style_w: T) -> Matrix<T> {
    let mut h = b.output.clone();
    h.axpy(prompt_w, &b.prompt).expect("same shape");
    h.axpy(style_w, &b.style).expect("same shape");
    h
}

/// `κ((1−λ) α_p V_p + λ α_s V_s) + α_o V_o` with an explicit `λ`.
pub fn dssi_output_with_lambda<T: Scalar>(
    qkv: &QkvBlocks<T>,
    attn: &BlockAttention<T>,
    kappa: T,
    lambda: T,
) -> Result<Matrix<T>> {
    let b = BranchProducts::new(attn, qkv)?;
    Ok(combine(&b, kappa * (T::one() - lambda), kappa * lambda))
}

/// Reweighted output with `λ` from [`alignment_strengths`].
pub fn dssi_output<T: Scalar>(qkv: &QkvBlocks<T>, attn: &BlockAttention<T>, cfg: &DssiConfig) -> Result<Matrix<T>> {
    let lambda = alignment_strengths(attn, cfg).lambda_star;
    dssi_output_with_lambda(qkv, attn, T::of(cfg.kappa), lambda)
}

/// `κ(w α_p V_p + (1−w) α_s V_s) + α_o V_o` with `w = fixed_lambda`.
pub fn fssi_output<T: Scalar>(qkv: &QkvBlocks<T>, attn: &BlockAttention<T>, cfg: &DssiConfig) -> Result<Matrix<T>> {
    let b = BranchProducts::new(attn, qkv)?;
    let kappa = T::of(cfg.kappa);
    let w = T::of(cfg.fixed_lambda);
    Ok(combine(&b, kappa * w, kappa * (T::one() - w)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fused<T> {
    pub h_o: Matrix<T>,
    /// Present in `dssi` mode.
    pub strengths: Option<AlignmentStrengths<T>>,
}

/// Output-row attention under the configured fusion mode.
pub fn fuse<T: Scalar>(qkv: &QkvBlocks<T>, attn: &BlockAttention<T>, cfg: &DssiConfig) -> Result<Fused<T>> {
    let b = BranchProducts::new(attn, qkv)?;
    let one = T::one();
    let kappa = T::of(cfg.kappa);
    Ok(match cfg.mode {
        FusionMode::Vanilla => Fused {
            h_o: combine(&b, one, one),
            strengths: None,
        },
        FusionMode::Fssi => {
            let w = T::of(cfg.fixed_lambda);
            Fused {
                h_o: combine(&b, kappa * w, kappa * (one - w)),
                strengths: None,
            }
        }
        FusionMode::Dssi => {
            let st = alignment_strengths(attn, cfg);
            let lambda = st.lambda_star;
            Fused {
                h_o: combine(&b, kappa * (one - lambda), kappa * lambda),
                strengths: Some(st),
            }
        }
    })
}
