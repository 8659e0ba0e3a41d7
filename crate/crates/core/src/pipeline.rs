//! Token-scale in-context inpainting: a reference "image" is placed in the
//! style slot, a partly zeroed copy in the output slot, and a stack of toy
//! DiT blocks is run with and without masking so the internal tensors can be
//! compared.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dit_block_forward_traced, project_qkv, DitBlockWeights, LayerTrace, TokenBlocks};
use crate::dssi::{DssiConfig, FusionMode};
use crate::error::{invalid, shape_err, Result};
use crate::linalg::{gaussian_matrix, Matrix, SeededRng};
use crate::reflow::rectified_step;

/// How prompt tokens relate to the style tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRecipe {
    /// Prompt tokens are an independent Gaussian draw.
    #[default]
    Independent,
    /// Prompt tokens are a copy of the style tokens (needs `N_p = N_s`), so
    /// both branches carry identical mass at every layer.
    Symmetric,
    /// Prompt tokens are shifted so that, at the first layer, the mean
    /// output-query logit on the prompt block exceeds the style block's by
    /// [`PROMPT_DOMINANCE_GAP`].
    PromptDominant,
}

pub const PROMPT_DOMINANCE_GAP: f64 = 2.0;
pub const TOKEN_OFFSET_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub d: usize,
    #[serde(rename = "N_p")]
    pub n_p: usize,
    #[serde(rename = "N_s")]
    pub n_s: usize,
    #[serde(rename = "N_o")]
    pub n_o: usize,
    pub layers: usize,
    pub sample_steps: usize,
    pub seed: u64,
    pub mask_fractions: Vec<f64>,
    pub dssi: DssiConfig,
    /// Number of consecutive seeds `seed, seed+1, ...` to run (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<TokenRecipe>,
    /// κ grid for the sweep (default [`DEFAULT_KAPPAS`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappas: Option<Vec<f64>>,
}

pub const DEFAULT_KAPPAS: [f64; 6] = [1.0, 1.5, 2.0, 2.3, 2.5, 3.0];

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_p: 8,
            n_s: 32,
            n_o: 64,
            layers: 4,
            sample_steps: 1,
            seed: 1,
            mask_fractions: vec![0.25, 0.5, 0.75, 0.99],
            dssi: DssiConfig::default(),
            seeds: None,
            recipe: None,
            kappas: None,
        }
    }
}

impl PipelineConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds.unwrap_or(1) as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn recipe(&self) -> TokenRecipe {
        self.recipe.unwrap_or_default()
    }

    pub fn kappa_grid(&self) -> Vec<f64> {
        self.kappas.clone().unwrap_or_else(|| DEFAULT_KAPPAS.to_vec())
    }

    pub fn with_mode(&self, mode: FusionMode) -> Self {
        Self {
            dssi: self.dssi.with_mode(mode),
            ..self.clone()
        }
    }

    /// Every range violation as `(JSON pointer, message)`.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (name, v) in [("d", self.d), ("N_p", self.n_p), ("N_s", self.n_s), ("N_o", self.n_o), ("sample_steps", self.sample_steps)] {
            if v < 1 {
                out.push((format!("/{name}"), format!("must be >= 1, got {v}")));
            }
        }
        for (i, f) in self.mask_fractions.iter().enumerate() {
            if !(0.0..=1.0).contains(f) {
                out.push((format!("/mask_fractions/{i}"), format!("must lie in [0, 1], got {f}")));
            }
        }
        if self.mask_fractions.is_empty() {
            out.push(("/mask_fractions".into(), "must not be empty".into()));
        }
        if self.mask_fractions.windows(2).any(|w| !(w[0] <= w[1])) {
            out.push(("/mask_fractions".into(), "must be sorted ascending".into()));
        }
        for (field, msg) in self.dssi.violations() {
            out.push((format!("/dssi/{field}"), msg));
        }
        if self.seeds == Some(0) {
            out.push(("/seeds".into(), "must be >= 1".into()));
        }
        if self.recipe() == TokenRecipe::Symmetric && self.n_p != self.n_s {
            out.push(("/recipe".into(), format!("symmetric needs N_p = N_s, got {} and {}", self.n_p, self.n_s)));
        }
        if let Some(ks) = &self.kappas {
            if ks.is_empty() {
                out.push(("/kappas".into(), "must not be empty".into()));
            }
            for (i, k) in ks.iter().enumerate() {
                if !(*k > 0.0 && k.is_finite()) {
                    out.push((format!("/kappas/{i}"), format!("must be finite and > 0, got {k}")));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            let parts: Vec<String> = v.iter().map(|(p, m)| format!("{p}: {m}")).collect();
            invalid(parts.join("; "))
        }
    }
}

/// The synthetic scene of one seed: clean target, style rows, prompt rows
/// and the per-layer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `N_o × d` clean target.
    pub reference: Matrix<f64>,
    /// `N_s × d`, rows taken from the reference at an even stride.
    pub style: Matrix<f64>,
    /// `N_p × d` text-condition stand-in.
    pub prompt: Matrix<f64>,
    pub weights: Vec<DitBlockWeights<f64>>,
}

/// Sinusoidal token grid: each feature is an offset plus a sine over the
/// row index with a random frequency and phase, plus a little Gaussian
/// noise. The offsets give the tokens a nonzero mean, as latents have.
fn sinusoid_tokens(rows: usize, d: usize, rng: &mut SeededRng) -> Matrix<f64> {
    let freqs: Vec<f64> = (0..d).map(|_| 1.0 + (rng.next_u64() % 4) as f64).collect();
    let phases: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.0, std::f64::consts::TAU)).collect();
    let offsets: Vec<f64> = (0..d).map(|_| TOKEN_OFFSET_STD * rng.normal()).collect();
    let mut m = Matrix::from_fn(rows, d, |i, j| {
        offsets[j] + (std::f64::consts::TAU * freqs[j] * i as f64 / rows as f64 + phases[j]).sin()
    });
    for v in m.data_mut() {
        *v += 0.1 * rng.normal();
    }
    m
}

pub fn build_scene(cfg: &PipelineConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut token_rng = SeededRng::child(seed, 0);
    let mut weight_rng = SeededRng::child(seed, 1);
    let reference = sinusoid_tokens(cfg.n_o, cfg.d, &mut token_rng);
    let idx: Vec<usize> = (0..cfg.n_s).map(|k| k * cfg.n_o / cfg.n_s).collect();
    let style = Matrix::from_fn(cfg.n_s, cfg.d, |i, j| reference.get(idx[i], j));
    let weights = (0..cfg.layers)
        .map(|_| DitBlockWeights::random(cfg.d, &mut weight_rng))
        .collect::<Result<Vec<_>>>()?;
    let prompt = match cfg.recipe() {
        TokenRecipe::Independent => gaussian_matrix(cfg.n_p, cfg.d, 0.0, 1.0, &mut token_rng)?,
        TokenRecipe::Symmetric => style.clone(),
        TokenRecipe::PromptDominant => {
            let base = gaussian_matrix(cfg.n_p, cfg.d, 0.0, 1.0, &mut token_rng)?;
            match weights.first() {
                Some(w) => dominant_prompt(base, &style, &reference, w, PROMPT_DOMINANCE_GAP)?,
                None => base,
            }
        }
    };
    Ok(Scene {
        reference,
        style,
        prompt,
        weights,
    })
}

/// Replayable dump of the per-layer weights of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsDocument {
    pub d: usize,
    pub seed: u64,
    pub blocks: Vec<DitBlockWeights<f64>>,
}

impl WeightsDocument {
    pub fn from_scene(scene: &Scene, seed: u64) -> Self {
        Self {
            d: scene.reference.cols(),
            seed,
            blocks: scene.weights.clone(),
        }
    }

    /// Blocks must all have width `d`.
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            if b.proj.dim() != self.d {
                return invalid(format!("block {i} has width {}, document says {}", b.proj.dim(), self.d));
            }
        }
        Ok(())
    }
}

fn column_means(m: &Matrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= m.rows() as f64);
    out
}

/// Shifts every prompt row along `W_k q̄` so the mean prompt logit of the
/// clean output queries sits `gap` above the mean style logit.
fn dominant_prompt(
    prompt: Matrix<f64>,
    style: &Matrix<f64>,
    reference: &Matrix<f64>,
    w: &DitBlockWeights<f64>,
    gap: f64,
) -> Result<Matrix<f64>> {
    let d = prompt.cols();
    let q_bar = column_means(&reference.matmul(&w.proj.w_q)?);
    let mean_logit = |x: &Matrix<f64>| -> Result<f64> {
        let k_bar = column_means(&x.matmul(&w.proj.w_k)?);
        Ok(crate::linalg::dot(&q_bar, &k_bar) / (d as f64).sqrt())
    };
    let current = mean_logit(&prompt)? - mean_logit(style)?;
    let dir: Vec<f64> = (0..d)
        .map(|i| (0..d).map(|j| w.proj.w_k.get(i, j) * q_bar[j]).sum())
        .collect();
    let norm2: f64 = dir.iter().map(|v| v * v).sum();
    if !(norm2 > 1e-12) {
        return invalid("output queries are orthogonal to every key direction");
    }
    let c = (gap - current) * (d as f64).sqrt() / norm2;
    let mut out = prompt;
    for i in 0..out.rows() {
        for (v, u) in out.row_mut(i).iter_mut().zip(&dir) {
            *v += c * u;
        }
    }
    Ok(out)
}

/// `⌈f·n⌉`, forgiving the rounding error of products like `0.3·10`.
pub fn masked_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Style slot holds the reference rows; the output slot holds the full
/// reference with its first `⌈f·N_o⌉` rows zeroed and flagged in the mask.
pub fn build_incontext_input(scene: &Scene, cfg: &PipelineConfig, mask_fraction: f64) -> Result<TokenBlocks<f64>> {
    if scene.reference.rows() != cfg.n_o || scene.style.rows() != cfg.n_s || scene.prompt.rows() != cfg.n_p {
        return shape_err(format!(
            "scene has {}/{}/{} prompt/style/output rows, config expects {}/{}/{}",
            scene.prompt.rows(),
            scene.style.rows(),
            scene.reference.rows(),
            cfg.n_p,
            cfg.n_s,
            cfg.n_o
        ));
    }
    if !(0.0..=1.0).contains(&mask_fraction) {
        return invalid(format!("mask fraction must lie in [0, 1], got {mask_fraction}"));
    }
    let k = masked_count(mask_fraction, cfg.n_o);
    let mask = (0..cfg.n_o).map(|i| i < k).collect();
    TokenBlocks::new_masked(
        scene.prompt.clone(),
        vec![scene.style.clone()],
        scene.reference.clone(),
        mask,
    )
}

/// Rows of every style block stacked in order.
pub fn multi_style_concat(styles: &[Matrix<f64>]) -> Result<Matrix<f64>> {
    let parts: Vec<&Matrix<f64>> = styles.iter().collect();
    Matrix::vstack(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackRun {
    pub output: TokenBlocks<f64>,
    /// One entry per layer and sampling step, in execution order.
    pub trace: Vec<LayerTrace<f64>>,
}

/// Applies the blocks in order. With `sample_steps > 1` the whole stack is
/// applied once per step and the output block moves by a rectified-flow
/// Euler step towards the stack's prediction; prompt and style restart from
/// the input at each step.
pub fn run_stack(blocks: &TokenBlocks<f64>, weights: &[DitBlockWeights<f64>], cfg: &PipelineConfig) -> Result<StackRun> {
    if weights.len() != cfg.layers {
        return shape_err(format!("{} weight sets for {} layers", weights.len(), cfg.layers));
    }
    let steps = cfg.sample_steps.max(1);
    let mut trace = Vec::with_capacity(weights.len() * steps);
    let mut current = blocks.clone();
    let mut last = blocks.clone();
    for s in 0..steps {
        let mut x = current.clone();
        for w in weights {
            let (next, t) = dit_block_forward_traced(&x, w, &cfg.dssi)?;
            trace.push(t);
            x = next;
        }
        if steps > 1 {
            let dt = 1.0 / steps as f64;
            let moved = rectified_step(current.output.data(), x.output.data(), s as f64 * dt, dt)?;
            current.output = Matrix::new(cfg.n_o, cfg.d, moved)?;
            last = x;
            last.output = current.output.clone();
        } else {
            last = x;
        }
    }
    Ok(StackRun { output: last, trace })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub logits: f64,
    pub alpha: f64,
    pub output: f64,
}

impl Mae {
    fn between(a: &LayerTrace<f64>, b: &LayerTrace<f64>) -> Result<Self> {
        Ok(Self {
            logits: a.attn.logits.mean_abs_diff(&b.attn.logits)?,
            alpha: a.attn.alpha().mean_abs_diff(&b.attn.alpha())?,
            output: a.h_o.mean_abs_diff(&b.h_o)?,
        })
    }

    fn mean(items: &[Mae]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        Self {
            logits: items.iter().map(|m| m.logits).sum::<f64>() / n,
            alpha: items.iter().map(|m| m.alpha).sum::<f64>() / n,
            output: items.iter().map(|m| m.output).sum::<f64>() / n,
        }
    }
}

/// Per-layer MAE between two traces of equal length, and their average.
pub fn trace_mae(masked: &[LayerTrace<f64>], clean: &[LayerTrace<f64>]) -> Result<(Mae, Vec<Mae>)> {
    if masked.len() != clean.len() {
        return shape_err(format!("traces have {} and {} layers", masked.len(), clean.len()));
    }
    let per: Vec<Mae> = masked.iter().zip(clean).map(|(a, b)| Mae::between(a, b)).collect::<Result<_>>()?;
    Ok((Mae::mean(&per), per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub experiment: String,
    pub mode: FusionMode,
    pub kappa: f64,
    pub mask_fraction: f64,
    pub seed: u64,
    pub mae: Mae,
    pub per_layer: Vec<Mae>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaRow {
    pub kappa: f64,
    pub seed: u64,
    pub style_contribution: f64,
    pub prompt_contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
    pub mae: Vec<MaeRow>,
    pub kappa: Vec<KappaRow>,
}

pub const MAE_CSV_HEADER: &str = "experiment,mode,kappa,mask_fraction,mae_logits,mae_alpha,mae_output,seed";
pub const LAYER_CSV_HEADER: &str = "experiment,mode,kappa,mask_fraction,seed,layer,mae_logits,mae_alpha,mae_output";
pub const KAPPA_CSV_HEADER: &str = "experiment,kappa,style_contribution,prompt_contribution,seed";

impl ExperimentReport {
    pub fn mae_csv(&self) -> String {
        let mut out = format!("{MAE_CSV_HEADER}\n");
        for r in &self.mae {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{}",
                r.experiment, r.mode, r.kappa, r.mask_fraction, r.mae.logits, r.mae.alpha, r.mae.output, r.seed
            );
        }
        out
    }

    pub fn layer_csv(&self) -> String {
        let mut out = format!("{LAYER_CSV_HEADER}\n");
        for r in &self.mae {
            for (l, m) in r.per_layer.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{:?},{:?},{},{},{:?},{:?},{:?}",
                    r.experiment, r.mode, r.kappa, r.mask_fraction, r.seed, l, m.logits, m.alpha, m.output
                );
            }
        }
        out
    }

    pub fn kappa_csv(&self) -> String {
        let mut out = format!("{KAPPA_CSV_HEADER}\n");
        for r in &self.kappa {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{}",
                self.experiment, r.kappa, r.style_contribution, r.prompt_contribution, r.seed
            );
        }
        out
    }

    /// Seed-averaged MAE per mask fraction for one mode.
    pub fn mean_curve(&self, mode: FusionMode) -> Vec<(f64, Mae)> {
        let mut fractions: Vec<f64> = Vec::new();
        for r in self.mae.iter().filter(|r| r.mode == mode) {
            if !fractions.contains(&r.mask_fraction) {
                fractions.push(r.mask_fraction);
            }
        }
        fractions
            .into_iter()
            .map(|f| {
                let rows: Vec<Mae> = self
                    .mae
                    .iter()
                    .filter(|r| r.mode == mode && r.mask_fraction == f)
                    .map(|r| r.mae)
                    .collect();
                (f, Mae::mean(&rows))
            })
            .collect()
    }

    /// MAE curve of one seed and mode, in fraction order.
    pub fn seed_curve(&self, mode: FusionMode, seed: u64) -> Vec<(f64, Mae)> {
        self.mae
            .iter()
            .filter(|r| r.mode == mode && r.seed == seed)
            .map(|r| (r.mask_fraction, r.mae))
            .collect()
    }

    /// Seed-averaged `(κ, style, prompt)` contributions.
    pub fn mean_kappa(&self) -> Vec<(f64, f64, f64)> {
        let mut kappas: Vec<f64> = Vec::new();
        for r in &self.kappa {
            if !kappas.contains(&r.kappa) {
                kappas.push(r.kappa);
            }
        }
        kappas
            .into_iter()
            .map(|k| {
                let rows: Vec<&KappaRow> = self.kappa.iter().filter(|r| r.kappa == k).collect();
                let n = rows.len() as f64;
                (
                    k,
                    rows.iter().map(|r| r.style_contribution).sum::<f64>() / n,
                    rows.iter().map(|r| r.prompt_contribution).sum::<f64>() / n,
                )
            })
            .collect()
    }
}

fn mask_rows(cfg: &PipelineConfig, modes: &[FusionMode], experiment: &str) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let cells: Vec<(u64, FusionMode)> = seeds.iter().flat_map(|&s| modes.iter().map(move |&m| (s, m))).collect();
    let scenes: Vec<Scene> = seeds.par_iter().map(|&s| build_scene(cfg, s)).collect::<Result<_>>()?;
    let rows: Vec<Vec<MaeRow>> = cells
        .par_iter()
        .map(|&(seed, mode)| {
            let scene = &scenes[seeds.iter().position(|&s| s == seed).unwrap()];
            let run_cfg = cfg.with_mode(mode);
            let clean = run_stack(&build_incontext_input(scene, &run_cfg, 0.0)?, &scene.weights, &run_cfg)?;
            run_cfg
                .mask_fractions
                .iter()
                .map(|&f| {
                    let masked = run_stack(&build_incontext_input(scene, &run_cfg, f)?, &scene.weights, &run_cfg)?;
                    let (mae, per_layer) = trace_mae(&masked.trace, &clean.trace)?;
                    Ok(MaeRow {
                        experiment: experiment.to_string(),
                        mode,
                        kappa: run_cfg.dssi.kappa,
                        mask_fraction: f,
                        seed,
                        mae,
                        per_layer,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentReport {
        experiment: experiment.to_string(),
        config: cfg.clone(),
        seeds,
        mae: rows.into_iter().flatten().collect(),
        kappa: Vec::new(),
    })
}

/// Masked vs. clean traces for vanilla and DSSI fusion.
pub fn mask_noise_experiment(cfg: &PipelineConfig) -> Result<ExperimentReport> {
    mask_rows(cfg, &[FusionMode::Vanilla, FusionMode::Dssi], "mask_noise")
}

/// The mask experiment under all three fusion modes with shared scenes.
pub fn mode_ablation(cfg: &PipelineConfig) -> Result<ExperimentReport> {
    mask_rows(cfg, &FusionMode::ALL, "mode_ablation")
}

/// Frobenius norms of the reweighted style and prompt terms of the DSSI
/// output, averaged over layers, on the unmasked input.
pub fn kappa_sweep(cfg: &PipelineConfig, kappas: &[f64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    if kappas.is_empty() || kappas.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
        return invalid("kappas must be non-empty, finite and > 0");
    }
    let seeds = cfg.seed_list();
    let cells: Vec<(u64, f64)> = seeds.iter().flat_map(|&s| kappas.iter().map(move |&k| (s, k))).collect();
    let rows: Vec<KappaRow> = cells
        .par_iter()
        .map(|&(seed, kappa)| {
            let run_cfg = PipelineConfig {
                dssi: cfg.dssi.with_mode(FusionMode::Dssi).with_kappa(kappa),
                ..cfg.clone()
            };
            let scene = build_scene(&run_cfg, seed)?;
            let run = run_stack(&build_incontext_input(&scene, &run_cfg, 0.0)?, &scene.weights, &run_cfg)?;
            let n = run.trace.len().max(1) as f64;
            let (mut style, mut prompt) = (0.0, 0.0);
            for t in &run.trace {
                let lambda = t.strengths.as_ref().map_or(0.5, |s| s.lambda_star);
                style += kappa * lambda * t.branches.style.frobenius();
                prompt += kappa * (1.0 - lambda) * t.branches.prompt.frobenius();
            }
            Ok(KappaRow {
                kappa,
                seed,
                style_contribution: style / n,
                prompt_contribution: prompt / n,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentReport {
        experiment: "kappa_sweep".into(),
        config: cfg.clone(),
        seeds,
        mae: Vec::new(),
        kappa: rows,
    })
}

/// Projected queries of the clean output block at the first layer; handy
/// for inspecting how a recipe shaped the logits.
pub fn first_layer_logit_gap(scene: &Scene, cfg: &PipelineConfig) -> Result<f64> {
    let w = scene.weights.first().ok_or_else(|| crate::Error::InvalidInput("no layers".into()))?;
    let blocks = build_incontext_input(scene, cfg, 0.0)?;
    let qkv = project_qkv(&blocks, &w.proj)?;
    let z_p = crate::attention::scaled_logits(&qkv.q_o, &qkv.k_p)?;
    let z_s = crate::attention::scaled_logits(&qkv.q_o, &qkv.k_s)?;
    let mean = |m: &Matrix<f64>| m.sum() / (m.rows() * m.cols()) as f64;
    Ok(mean(&z_p) - mean(&z_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::vanilla_output_attention;

    fn small() -> PipelineConfig {
        PipelineConfig {
            d: 16,
            n_p: 4,
            n_s: 8,
            n_o: 16,
            layers: 2,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn template_json_shape() {
        let json = serde_json::to_string(&PipelineConfig::default()).unwrap();
        assert_eq!(
            json,
            r#"{"d":64,"N_p":8,"N_s":32,"N_o":64,"layers":4,"sample_steps":1,"seed":1,"mask_fractions":[0.25,0.5,0.75,0.99],"dssi":{"kappa":2.3,"mode":"dssi","lambda_floor":1e-6,"fixed_lambda":0.5}}"#
        );
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }

    #[test]
    fn weights_document_round_trips() {
        let cfg = small();
        let scene = build_scene(&cfg, 9).unwrap();
        let doc = WeightsDocument::from_scene(&scene, 9);
        let json = serde_json::to_string(&doc).unwrap();
        let back: WeightsDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
        back.validate().unwrap();

        // a truncated matrix is rejected while parsing
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["blocks"][0]["w_mlp1"]["data"].as_array_mut().unwrap().pop();
        assert!(serde_json::from_value::<WeightsDocument>(v).is_err());

        let mut wrong = doc;
        wrong.d = 8;
        assert!(wrong.validate().is_err());
    }

    #[test]
    fn violations_use_pointers() {
        let mut cfg = small();
        cfg.dssi.kappa = -1.0;
        cfg.mask_fractions = vec![0.5, 0.25, 1.5];
        cfg.n_o = 0;
        let v = cfg.violations();
        let ptrs: Vec<&str> = v.iter().map(|(p, _)| p.as_str()).collect();
        for p in ["/dssi/kappa", "/mask_fractions", "/mask_fractions/2", "/N_o"] {
            assert!(ptrs.contains(&p), "{p} missing from {ptrs:?}");
        }
        let sym = PipelineConfig {
            recipe: Some(TokenRecipe::Symmetric),
            ..small()
        };
        assert!(sym.validate().is_err());
    }

    #[test]
    fn mask_counts() {
        assert_eq!(masked_count(0.25, 16), 4);
        assert_eq!(masked_count(0.0, 16), 0);
        assert_eq!(masked_count(1.0, 16), 16);
        assert_eq!(masked_count(0.3, 10), 3);
        assert_eq!(masked_count(0.99, 64), 64);
        assert_eq!(masked_count(0.26, 16), 5);
    }

    #[test]
    fn incontext_input_examples() {
        let cfg = small();
        let scene = build_scene(&cfg, 3).unwrap();
        let b0 = build_incontext_input(&scene, &cfg, 0.0).unwrap();
        assert_eq!(b0.output, scene.reference);
        assert!(b0.mask.iter().all(|m| !m));
        let b1 = build_incontext_input(&scene, &cfg, 1.0).unwrap();
        assert!(b1.output.data().iter().all(|&v| v == 0.0));
        let bq = build_incontext_input(&scene, &cfg, 0.25).unwrap();
        let zeroed = (0..16).filter(|&i| bq.output.row(i).iter().all(|&v| v == 0.0)).count();
        assert_eq!(zeroed, 4);
        assert_eq!(bq.mask.iter().filter(|&&m| m).count(), 4);
        assert_eq!(bq.output.row(4), scene.reference.row(4));
        let bad = PipelineConfig { n_o: 17, ..cfg.clone() };
        assert!(build_incontext_input(&scene, &bad, 0.5).is_err());
    }

    #[test]
    fn style_rows_come_from_the_reference() {
        let cfg = small();
        let scene = build_scene(&cfg, 4).unwrap();
        for k in 0..cfg.n_s {
            assert_eq!(scene.style.row(k), scene.reference.row(k * 2));
        }
    }

    #[test]
    fn zero_layers_pass_through() {
        let cfg = PipelineConfig { layers: 0, ..small() };
        let scene = build_scene(&cfg, 1).unwrap();
        let b = build_incontext_input(&scene, &cfg, 0.5).unwrap();
        let run = run_stack(&b, &scene.weights, &cfg).unwrap();
        assert_eq!(run.output, b);
        assert!(run.trace.is_empty());
        let stepped = PipelineConfig { sample_steps: 3, ..cfg };
        assert_eq!(run_stack(&b, &scene.weights, &stepped).unwrap().output, b);
    }

    #[test]
    fn stack_rejects_wrong_layer_count() {
        let cfg = small();
        let scene = build_scene(&cfg, 1).unwrap();
        let b = build_incontext_input(&scene, &cfg, 0.0).unwrap();
        assert!(run_stack(&b, &scene.weights[..1], &cfg).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small();
        let s1 = build_scene(&cfg, 9).unwrap();
        let s2 = build_scene(&cfg, 9).unwrap();
        assert_eq!(s1, s2);
        let b = build_incontext_input(&s1, &cfg, 0.5).unwrap();
        assert_eq!(run_stack(&b, &s1.weights, &cfg).unwrap(), run_stack(&b, &s2.weights, &cfg).unwrap());
    }

    #[test]
    fn vanilla_and_dssi_traces_differ() {
        let cfg = small();
        let scene = build_scene(&cfg, 2).unwrap();
        let b = build_incontext_input(&scene, &cfg, 0.0).unwrap();
        let v = run_stack(&b, &scene.weights, &cfg.with_mode(FusionMode::Vanilla)).unwrap();
        let d = run_stack(&b, &scene.weights, &cfg.with_mode(FusionMode::Dssi)).unwrap();
        assert_eq!(v.trace[0].attn, d.trace[0].attn);
        assert!(v.trace[0].h_o.mean_abs_diff(&d.trace[0].h_o).unwrap() > 1e-6);
    }

    #[test]
    fn vanilla_layer_matches_attention_module() {
        let cfg = small().with_mode(FusionMode::Vanilla);
        let scene = build_scene(&cfg, 5).unwrap();
        let b = build_incontext_input(&scene, &cfg, 0.5).unwrap();
        let run = run_stack(&b, &scene.weights, &cfg).unwrap();
        let direct = vanilla_output_attention(&project_qkv(&b, &scene.weights[0].proj).unwrap()).unwrap();
        assert!(run.trace[0].h_o.mean_abs_diff(&direct.h_o).unwrap() < 1e-15);
        assert!(run.trace[0].h_o.sub(&direct.h_o).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_fraction_gives_zero_mae() {
        let cfg = PipelineConfig {
            mask_fractions: vec![0.0],
            ..small()
        };
        let r = mask_noise_experiment(&cfg).unwrap();
        assert_eq!(r.mae.len(), 2);
        assert!(r.mae.iter().all(|row| row.mae == Mae::default()));
    }

    #[test]
    fn symmetric_recipe_makes_dssi_equal_fssi() {
        let cfg = PipelineConfig {
            n_p: 8,
            recipe: Some(TokenRecipe::Symmetric),
            ..small()
        };
        let r = mode_ablation(&cfg).unwrap();
        let d = r.mean_curve(FusionMode::Dssi);
        let f = r.mean_curve(FusionMode::Fssi);
        for ((_, a), (_, b)) in d.iter().zip(&f) {
            assert!((a.output - b.output).abs() < 1e-10);
            assert!((a.logits - b.logits).abs() < 1e-10);
        }
    }

    #[test]
    fn dominant_recipe_sets_the_gap() {
        let cfg = PipelineConfig {
            recipe: Some(TokenRecipe::PromptDominant),
            ..small()
        };
        let scene = build_scene(&cfg, 6).unwrap();
        let gap = first_layer_logit_gap(&scene, &cfg).unwrap();
        assert!((gap - PROMPT_DOMINANCE_GAP).abs() < 1e-9, "{gap}");
    }

    #[test]
    fn kappa_doubling_doubles_single_layer_contributions() {
        let cfg = PipelineConfig { layers: 1, ..small() };
        let r = kappa_sweep(&cfg, &[1.0, 2.0]).unwrap();
        let a = &r.kappa[0];
        let b = &r.kappa[1];
        assert!((b.style_contribution - 2.0 * a.style_contribution).abs() < 1e-12 * b.style_contribution);
        assert!((b.prompt_contribution - 2.0 * a.prompt_contribution).abs() < 1e-12 * b.prompt_contribution);
        assert!(kappa_sweep(&cfg, &[]).is_err());
        assert!(kappa_sweep(&cfg, &[0.0]).is_err());
    }

    #[test]
    fn multi_style_examples() {
        let a = Matrix::filled(4, 3, 1.0);
        let b = Matrix::filled(6, 3, 2.0);
        assert_eq!(multi_style_concat(std::slice::from_ref(&a)).unwrap(), a);
        let c = multi_style_concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.rows(), 10);
        assert_eq!(c.row(3), a.row(0));
        assert_eq!(c.row(4), b.row(0));
        assert!(multi_style_concat(&[a, Matrix::filled(2, 2, 0.0)]).is_err());
    }

    #[test]
    fn csv_outputs() {
        let cfg = PipelineConfig {
            mask_fractions: vec![0.0, 0.5],
            ..small()
        };
        let r = mask_noise_experiment(&cfg).unwrap();
        let csv = r.mae_csv();
        assert!(csv.starts_with(MAE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.contains("mask_noise,vanilla,2.3,0.0,0.0,0.0,0.0,1"));
        assert_eq!(r.layer_csv().lines().count(), 1 + 4 * 2);
        let k = kappa_sweep(&cfg, &[1.0, 2.0]).unwrap();
        assert_eq!(k.kappa_csv().lines().count(), 3);
    }
}
