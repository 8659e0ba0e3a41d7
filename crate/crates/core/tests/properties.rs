//! Property tests against naive reimplementations.

use dssi_core::analysis::{lambda_shift, prop2_bound, prop3_bound};
use dssi_core::attention::vanilla_output_attention;
use dssi_core::dssi::{dssi_output, fssi_output, DssiConfig};
use dssi_core::linalg::{gaussian_matrix, SeededRng};
use dssi_core::pipeline::{masked_count, PipelineConfig, TokenRecipe};
use dssi_core::reflow::{bridge_velocity, GaussianEndpoints};
use dssi_core::{Matrix, QkvBlocks};
use proptest::prelude::*;

fn random_qkv(np: usize, ns: usize, no: usize, d: usize, seed: u64) -> QkvBlocks {
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

fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

/// Joint attention for the output queries, written out with loops.
fn naive_joint(qkv: &QkvBlocks) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let keys: Vec<Vec<f64>> = [rows(&qkv.k_p), rows(&qkv.k_s), rows(&qkv.k_o)].concat();
    let values: Vec<Vec<f64>> = [rows(&qkv.v_p), rows(&qkv.v_s), rows(&qkv.v_o)].concat();
    let scale = (qkv.d() as f64).sqrt();
    let mut alphas = Vec::new();
    let mut outs = Vec::new();
    for q in rows(&qkv.q_o) {
        let z: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale).collect();
        let a = naive_softmax(&z);
        let mut h = vec![0.0; qkv.d()];
        for (w, v) in a.iter().zip(&values) {
            for (hj, vj) in h.iter_mut().zip(v) {
                *hj += w * vj;
            }
        }
        alphas.push(a);
        outs.push(h);
    }
    (alphas, outs)
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_attention_matches_loops(
        np in 1usize..5, ns in 1usize..6, no in 1usize..6, d in 1usize..6, seed in any::<u64>()
    ) {
        let qkv = random_qkv(np, ns, no, d, seed);
        let out = vanilla_output_attention(&qkv).unwrap();
        let (alphas, hs) = naive_joint(&qkv);
        let alpha = out.attn.alpha();
        for i in 0..no {
            let total: f64 = alpha.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (a, b) in alpha.row(i).iter().zip(&alphas[i]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in out.h_o.row(i).iter().zip(&hs[i]) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    /// With κ = 1 and equal branch weights every fused output is a convex
    /// mix of the same three branch products, so fssi at w = ½ equals
    /// vanilla minus half of the prompt and style terms.
    #[test]
    fn fssi_half_is_half_the_injected_terms(seed in any::<u64>()) {
        let qkv = random_qkv(3, 4, 5, 4, seed);
        let attn = vanilla_output_attention(&qkv).unwrap();
        let cfg = DssiConfig { kappa: 1.0, ..DssiConfig::default() };
        let fs = fssi_output(&qkv, &attn.attn, &cfg).unwrap();
        let ao = attn.attn.alpha_o.matmul(&qkv.v_o).unwrap();
        // vanilla = p + s + o, fssi = (p + s)/2 + o
        let expect = attn.h_o.add(&ao).unwrap().scale(0.5);
        for (a, b) in fs.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Scaling every style value by c moves the dssi output linearly
    /// in c, since λ depends only on the logits.
    #[test]
    fn dssi_is_linear_in_style_values(seed in any::<u64>(), c in -3.0f64..3.0) {
        let qkv = random_qkv(2, 3, 4, 3, seed);
        let attn = vanilla_output_attention(&qkv).unwrap().attn;
        let cfg = DssiConfig::default();
        let base = dssi_output(&qkv, &attn, &cfg).unwrap();
        let scaled = QkvBlocks { v_s: qkv.v_s.scale(c), ..qkv.clone() };
        let zero = QkvBlocks { v_s: qkv.v_s.scale(0.0), ..qkv.clone() };
        let hs = dssi_output(&scaled, &attn, &cfg).unwrap();
        let h0 = dssi_output(&zero, &attn, &cfg).unwrap();
        for ((a, b), z) in hs.data().iter().zip(base.data()).zip(h0.data()) {
            prop_assert!((a - (z + c * (b - z))).abs() < 1e-10);
        }
    }

    #[test]
    fn bounded_logit_noise_respects_tv_bound(
        n in 2usize..40, delta in 0.001f64..2.5, seed in any::<u64>()
    ) {
        let mut rng = SeededRng::new(seed);
        let z: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let noisy: Vec<f64> = z.iter().map(|v| v + rng.uniform_in(-delta, delta)).collect();
        let got = tv(&naive_softmax(&z), &naive_softmax(&noisy));
        prop_assert!(got <= 1.0 - (-2.0 * delta).exp() + 1e-15);
        prop_assert!((prop2_bound(delta).tv_bound - (1.0 - (-2.0 * delta).exp())).abs() < 1e-15);
    }

    #[test]
    fn lambda_shift_within_prop3_bound(
        lp in 0.05f64..6.0, ls in 0.05f64..6.0, frac in 0.0f64..1.0, u in -1.0f64..1.0, v in -1.0f64..1.0
    ) {
        // equal radii no larger than the smaller strength
        let eps = frac * lp.min(ls);
        let shift = lambda_shift(lp, ls, u * eps, v * eps);
        let direct = ((lp + u * eps) / (lp + ls + (u + v) * eps) - lp / (lp + ls)).abs();
        prop_assert!((shift - direct).abs() < 1e-12);
        prop_assert!(shift <= prop3_bound(lp, ls, eps, eps).unwrap() + 1e-12);
    }

    /// The exact flow `x_t = μ_t + σ_t/σ_0 (x0 − μ0)` has time derivative
    /// equal to the marginal velocity everywhere on its path.
    #[test]
    fn bridge_velocity_drives_the_exact_flow(
        mu0 in -3.0f64..3.0, mu1 in -3.0f64..3.0, v0 in 0.1f64..4.0, v1 in 0.1f64..4.0,
        z in -3.0f64..3.0, t in 0.05f64..0.95
    ) {
        let ep = GaussianEndpoints::new(vec![mu0], vec![mu1], vec![v0], vec![v1]).unwrap();
        let path = |s: f64| {
            let sd = ((1.0 - s).powi(2) * v0 + s * s * v1).sqrt();
            (1.0 - s) * mu0 + s * mu1 + sd * z
        };
        let h = 1e-5;
        let fd = (path(t + h) - path(t - h)) / (2.0 * h);
        let v = bridge_velocity(&[path(t)], t, &ep).unwrap()[0];
        prop_assert!((fd - v).abs() < 1e-6 * (1.0 + v.abs()), "fd {fd} vs {v}");
        let end = ep.flow_map(&[mu0 + v0.sqrt() * z])[0];
        prop_assert!((end - path(1.0)).abs() < 1e-12);
    }

    #[test]
    fn masked_count_is_ceiling(n in 1usize..300, k in 0usize..300) {
        let k = k.min(n);
        let f = k as f64 / n as f64;
        prop_assert_eq!(masked_count(f, n), k);
        let g = (k as f64 + 0.5) / n as f64;
        if k < n {
            prop_assert_eq!(masked_count(g, n), k + 1);
        }
    }

    #[test]
    fn config_json_round_trips(
        d in 1usize..128, np in 1usize..16, ns in 1usize..64, no in 1usize..128, layers in 0usize..8,
        steps in 1usize..4, seed in any::<u64>(), kappa in 0.01f64..10.0, floor in 1e-9f64..1e-2,
        mut fractions in proptest::collection::vec(0.0f64..=1.0, 1..6), seeds in proptest::option::of(1usize..30),
        recipe in proptest::option::of(prop_oneof![Just(TokenRecipe::Independent), Just(TokenRecipe::PromptDominant)]),
    ) {
        fractions.sort_by(f64::total_cmp);
        let cfg = PipelineConfig {
            d, n_p: np, n_s: ns, n_o: no, layers, sample_steps: steps, seed,
            mask_fractions: fractions, seeds, recipe,
            dssi: DssiConfig { kappa, lambda_floor: floor, ..DssiConfig::default() },
            ..PipelineConfig::default()
        };
        prop_assert!(cfg.violations().is_empty(), "{:?}", cfg.violations());
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }
}
