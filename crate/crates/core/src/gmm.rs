//! Mini-batch deep Gaussian mixture over background latents.
//!
//! Mixture weights, means, and diagonal variances are estimated from each
//! batch using the soft responsibilities, and the background energy is the
//! negative log mixture density. Everything is differentiable: gradients
//! flow through both the responsibilities and the batch statistics. The
//! energy is always computed in log space; the literal product-form density
//! exists only as a test oracle.

use ndarray::{Array1, Array2, Axis};

use crate::ad::{NodeId, Tape};
use crate::{Error, Result};

/// Safe log floor for mixture weights that underflow to zero.
const PI_FLOOR: f64 = 1e-12;
/// A component whose total responsibility falls below this is degenerate.
const DEGENERATE_TOTAL: f64 = 1e-12;

/// Mixture parameters from one batch. Variances are stored as
/// `s_k = log(sigma^2 + eps)`.
#[derive(Debug, Clone)]
pub struct GmmParams {
    pub pi: Array1<f64>,
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub eps: f64,
    /// Components that fell back to global batch moments.
    pub degenerate: Vec<bool>,
}

/// Per-sample energies and their mean.
#[derive(Debug, Clone)]
pub struct EnergyBatch {
    pub values: Vec<f64>,
    pub mean: f64,
}

/// Graph-side handles to estimated mixture parameters.
pub struct GmmNodes {
    pub pi: NodeId,
    pub mu: NodeId,
    pub s: NodeId,
    pub degenerate: Vec<bool>,
}

/// Build the Eq.-style batch statistics on the tape:
/// `pi_k = mean_i γ_ik`, `mu_k = Σ γ_ik z_i / Σ γ_ik`,
/// `σ²_k = Σ γ_ik (z_i − mu_k)⊙(z_i − mu_k) / Σ γ_ik`, `s_k = log(σ²_k + ε)`.
///
/// A component with (near-)zero total responsibility falls back to the
/// global batch mean/variance; the blend is built into the graph so the
/// surviving paths keep their gradients.
pub fn estimate_params_node(tape: &mut Tape, z_b: NodeId, gamma: NodeId, eps: f64) -> GmmNodes {
    let l = tape.value(gamma).shape()[0];
    let k = tape.value(gamma).shape()[1];
    let denom = tape.sum_axis0(gamma);
    let pi = tape.mul_scalar(denom, 1.0 / l as f64);
    let degenerate: Vec<bool> = tape
        .value(denom)
        .iter()
        .map(|&d| d < DEGENERATE_TOTAL)
        .collect();
    let denom_safe = tape.clamp(denom, DEGENERATE_TOTAL, f64::INFINITY);
    let musum = tape.matmul_tn(gamma, z_b);
    let mu_reg = tape.div_col(musum, denom_safe);
    let var_reg = tape.weighted_var(gamma, z_b, mu_reg, denom_safe);

    let (mu, var) = if degenerate.iter().any(|&d| d) {
        // Global moments, tiled to [K,d], blended in where degenerate.
        let zsum = tape.sum_axis0(z_b);
        let bmean = tape.mul_scalar(zsum, 1.0 / l as f64);
        let nbmean = tape.neg(bmean);
        let centered = tape.add_row(z_b, nbmean);
        let sq = tape.sqr(centered);
        let sqsum = tape.sum_axis0(sq);
        let bvar = tape.mul_scalar(sqsum, 1.0 / l as f64);
        let bmean_t = tape.tile_row(bmean, k);
        let bvar_t = tape.tile_row(bvar, k);
        let keep = tape.constant(
            Array1::from_iter(degenerate.iter().map(|&d| if d { 0.0 } else { 1.0 })).into_dyn(),
        );
        let swap = tape.constant(
            Array1::from_iter(degenerate.iter().map(|&d| if d { 1.0 } else { 0.0 })).into_dyn(),
        );
        let mu_keep = tape.mul_col(mu_reg, keep);
        let mu_swap = tape.mul_col(bmean_t, swap);
        let mu = tape.add(mu_keep, mu_swap);
        let var_keep = tape.mul_col(var_reg, keep);
        let var_swap = tape.mul_col(bvar_t, swap);
        let var = tape.add(var_keep, var_swap);
        (mu, var)
    } else {
        (mu_reg, var_reg)
    };

    let var_eps = tape.add_scalar(var, eps);
    let s = tape.ln(var_eps);
    GmmNodes {
        pi,
        mu,
        s,
        degenerate,
    }
}

/// Per-sample energy node for `z[L,d]` under given mixture parameter nodes:
/// `E_i = −logsumexp_k [ log π_k − (d/2)·log 2π − ½Σ_j s_kj − ½ Q_ik ]`.
pub fn energy_node(tape: &mut Tape, z: NodeId, pi: NodeId, mu: NodeId, s: NodeId) -> NodeId {
    const LN_2PI: f64 = 1.837_877_066_409_345_6;
    let d = tape.value(mu).shape()[1];
    let q = tape.mahalanobis_diag(z, mu, s);
    let pi_floored = tape.add_scalar(pi, PI_FLOOR);
    let log_pi = tape.ln(pi_floored);
    let s_sum = tape.sum_axis1(s);
    let half_s = tape.mul_scalar(s_sum, -0.5);
    let row_const = tape.add(log_pi, half_s);
    let row_const = tape.add_scalar(row_const, -(d as f64) * 0.5 * LN_2PI);
    let qh = tape.mul_scalar(q, -0.5);
    let logp = tape.add_row(qh, row_const);
    let lse = tape.logsumexp_rows(logp);
    tape.neg(lse)
}

/// Batch statistics then per-sample energies plus their mean, on one tape.
pub fn energy_batch_node(
    tape: &mut Tape,
    z_b: NodeId,
    gamma: NodeId,
    eps: f64,
) -> (GmmNodes, NodeId, NodeId) {
    let params = estimate_params_node(tape, z_b, gamma, eps);
    let values = energy_node(tape, z_b, params.pi, params.mu, params.s);
    let mean = tape.mean_all(values);
    (params, values, mean)
}

fn validate_batch(z_b: &Array2<f64>, gamma: &Array2<f64>) -> Result<()> {
    if z_b.nrows() != gamma.nrows() {
        return Err(Error::Shape(format!(
            "{} latents vs {} responsibility rows",
            z_b.nrows(),
            gamma.nrows()
        )));
    }
    if z_b.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    for (i, row) in gamma.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&g| g < 0.0) {
            return Err(Error::Shape(format!(
                "responsibility row {i} is not on the simplex (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Estimate mixture parameters from plain arrays.
pub fn estimate_params(z_b: &Array2<f64>, gamma: &Array2<f64>, eps: f64) -> Result<GmmParams> {
    validate_batch(z_b, gamma)?;
    let mut tape = Tape::new();
    let zb = tape.constant(z_b.clone().into_dyn());
    let g = tape.constant(gamma.clone().into_dyn());
    let nodes = estimate_params_node(&mut tape, zb, g, eps);
    Ok(GmmParams {
        pi: tape
            .value(nodes.pi)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap(),
        mu: tape
            .value(nodes.mu)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap(),
        log_var: tape
            .value(nodes.s)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap(),
        eps,
        degenerate: nodes.degenerate,
    })
}

/// Energy of a single point under given parameters.
pub fn energy(z: &Array1<f64>, params: &GmmParams) -> f64 {
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone().insert_axis(Axis(0)).into_dyn());
    let pi = tape.constant(params.pi.clone().into_dyn());
    let mu = tape.constant(params.mu.clone().into_dyn());
    let s = tape.constant(params.log_var.clone().into_dyn());
    let e = energy_node(&mut tape, zn, pi, mu, s);
    tape.value(e)[[0]]
}

/// Estimate parameters from the batch itself, then score every sample.
pub fn energy_batch(z_b: &Array2<f64>, gamma: &Array2<f64>, eps: f64) -> Result<EnergyBatch> {
    validate_batch(z_b, gamma)?;
    let mut tape = Tape::new();
    let zb = tape.constant(z_b.clone().into_dyn());
    let g = tape.constant(gamma.clone().into_dyn());
    let (_, values, mean) = energy_batch_node(&mut tape, zb, g, eps);
    Ok(EnergyBatch {
        values: tape.value(values).iter().copied().collect(),
        mean: tape.scalar(mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::numeric_grad;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2PI: f64 = 1.837_877_066_409_345_6;

    fn random_simplex_rows(rng: &mut ChaCha8Rng, l: usize, k: usize) -> Array2<f64> {
        let mut g = Array2::from_shape_fn((l, k), |_| rng.gen_range(0.02..1.0));
        for mut row in g.rows_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        g
    }

    /// Direct transcription of the weighted-moment formulas.
    fn moments_oracle(
        z: &Array2<f64>,
        gamma: &Array2<f64>,
        eps: f64,
    ) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
        let (l, d) = z.dim();
        let k = gamma.ncols();
        let mut pi = Array1::zeros(k);
        let mut mu = Array2::zeros((k, d));
        let mut s = Array2::zeros((k, d));
        for c in 0..k {
            let denom: f64 = (0..l).map(|i| gamma[[i, c]]).sum();
            pi[c] = denom / l as f64;
            for j in 0..d {
                let m: f64 = (0..l).map(|i| gamma[[i, c]] * z[[i, j]]).sum::<f64>() / denom;
                mu[[c, j]] = m;
                let v: f64 = (0..l)
                    .map(|i| gamma[[i, c]] * (z[[i, j]] - m) * (z[[i, j]] - m))
                    .sum::<f64>()
                    / denom;
                s[[c, j]] = (v + eps).ln();
            }
        }
        (pi, mu, s)
    }

    /// Literal product-form density, usable only where it does not underflow.
    fn energy_oracle_direct(z: &Array1<f64>, params: &GmmParams) -> f64 {
        let d = z.len() as f64;
        let mut density = 0.0;
        for c in 0..params.pi.len() {
            let mut det = 1.0;
            let mut quad = 0.0;
            for j in 0..z.len() {
                let var = params.log_var[[c, j]].exp();
                det *= var;
                quad += (z[j] - params.mu[[c, j]]).powi(2) / var;
            }
            density += (params.pi[c] + PI_FLOOR)
                * (2.0 * std::f64::consts::PI).powf(-d / 2.0)
                * det.powf(-0.5)
                * (-0.5 * quad).exp();
        }
        -density.ln()
    }

    #[test]
    fn uniform_responsibilities_collapse_to_global_moments() {
        let z = arr2(&[[1.0, 2.0], [3.0, 6.0]]);
        let gamma = arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        let p = estimate_params(&z, &gamma, 1e-6).unwrap();
        assert!((p.pi[0] - 0.5).abs() < 1e-12);
        assert!((p.pi[1] - 0.5).abs() < 1e-12);
        for c in 0..2 {
            assert!((p.mu[[c, 0]] - 2.0).abs() < 1e-12);
            assert!((p.mu[[c, 1]] - 4.0).abs() < 1e-12);
        }
        assert!(!p.degenerate.iter().any(|&d| d));
    }

    #[test]
    fn single_point_batch_gives_log_eps_variance() {
        let z = arr2(&[[0.4, -1.3, 2.0]]);
        let gamma = arr2(&[[0.3, 0.7]]);
        let eps = 1e-6;
        let p = estimate_params(&z, &gamma, eps).unwrap();
        for c in 0..2 {
            for j in 0..3 {
                let sigma2 = p.log_var[[c, j]].exp() - eps;
                assert!(sigma2.abs() < 1e-12, "variance {sigma2} not ~0");
                assert!((p.log_var[[c, j]] - eps.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn estimates_match_weighted_moment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let z = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-2.0..2.0));
        let gamma = random_simplex_rows(&mut rng, 5, 3);
        let p = estimate_params(&z, &gamma, 1e-6).unwrap();
        let (pi_o, mu_o, s_o) = moments_oracle(&z, &gamma, 1e-6);
        for c in 0..3 {
            assert!((p.pi[c] - pi_o[c]).abs() < 1e-10);
            for j in 0..2 {
                assert!((p.mu[[c, j]] - mu_o[[c, j]]).abs() < 1e-10);
                assert!((p.log_var[[c, j]] - s_o[[c, j]]).abs() < 1e-10);
            }
        }
        let total: f64 = p.pi.sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dead_component_falls_back_to_batch_moments() {
        let z = arr2(&[[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]]);
        let gamma = arr2(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let p = estimate_params(&z, &gamma, 1e-6).unwrap();
        assert_eq!(p.degenerate, vec![false, true]);
        // Fallback component carries the global mean and variance.
        assert!((p.mu[[1, 0]] - 3.0).abs() < 1e-12);
        assert!((p.mu[[1, 1]] - 2.0).abs() < 1e-12);
        let want_var = ((1.0f64 - 3.0).powi(2) + 0.0 + (5.0f64 - 3.0).powi(2)) / 3.0;
        assert!((p.log_var[[1, 0]].exp() - (want_var + 1e-6)).abs() < 1e-9);
        // And the live component is untouched by the fallback.
        assert!((p.mu[[0, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn energy_standard_normal_closed_forms() {
        let params = GmmParams {
            pi: arr1(&[1.0]),
            mu: arr2(&[[0.0]]),
            log_var: arr2(&[[0.0]]),
            eps: 1e-6,
            degenerate: vec![false],
        };
        let at_mode = energy(&arr1(&[0.0]), &params);
        assert!((at_mode - 0.5 * LN_2PI).abs() < 1e-9);
        let at_two = energy(&arr1(&[2.0]), &params);
        assert!((at_two - (0.5 * LN_2PI + 2.0)).abs() < 1e-9);
    }

    #[test]
    fn energy_matches_direct_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let z = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.5..1.5));
            let gamma = random_simplex_rows(&mut rng, 6, 2);
            let p = estimate_params(&z, &gamma, 1e-6).unwrap();
            let probe = arr1(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let log_space = energy(&probe, &p);
            let direct = energy_oracle_direct(&probe, &p);
            if direct.is_finite() {
                assert!(
                    (log_space - direct).abs() < 1e-8,
                    "log-space {log_space} vs direct {direct}"
                );
            }
        }
    }

    #[test]
    fn identical_points_batch_energy_closed_form() {
        let eps = 1e-6;
        let z = Array2::from_elem((4, 1), 0.7);
        let gamma = Array2::from_elem((4, 1), 1.0);
        let eb = energy_batch(&z, &gamma, eps).unwrap();
        // K=1 at the mean with sigma^2 = 0: E = d*(½ln2π + ½ln eps) per dim.
        let want = 0.5 * LN_2PI + 0.5 * eps.ln();
        for v in &eb.values {
            assert!((v - want).abs() < 1e-9, "got {v}, want {want}");
        }
    }

    #[test]
    fn permutation_equivariance_and_mean_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let z = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-2.0..2.0));
        let gamma = random_simplex_rows(&mut rng, 6, 2);
        let eb = energy_batch(&z, &gamma, 1e-6).unwrap();
        let arith: f64 = eb.values.iter().sum::<f64>() / eb.values.len() as f64;
        assert!((eb.mean - arith).abs() < 1e-12);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let zp = Array2::from_shape_fn((6, 3), |(i, j)| z[[perm[i], j]]);
        let gp = Array2::from_shape_fn((6, 2), |(i, j)| gamma[[perm[i], j]]);
        let ebp = energy_batch(&zp, &gp, 1e-6).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert!((ebp.values[i] - eb.values[src]).abs() < 1e-9);
        }
        assert!((ebp.mean - eb.mean).abs() < 1e-9);
    }

    #[test]
    fn batch_energy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let z = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let gamma = random_simplex_rows(&mut rng, 5, 2);
        // Reverse-mode gradient through statistics and energies.
        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone().into_dyn());
        let gn = tape.constant(gamma.clone().into_dyn());
        let (_, _, mean) = energy_batch_node(&mut tape, zn, gn, 1e-6);
        let grads = tape.backward(mean);
        let analytic = grads.dense(&tape, zn);
        let numeric = numeric_grad(
            |zv| {
                let z2 = zv.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                energy_batch(&z2, &gamma, 1e-6).unwrap().mean
            },
            &z.clone().into_dyn(),
            1e-6,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-4,
                "reverse {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn gradient_flows_through_responsibilities_too() {
        // gamma = softmax(z_b W) so dE/dz_b includes the responsibility path.
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let z = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-0.8..0.8));
        let build = |tape: &mut Tape, zn: NodeId| {
            let wn = tape.constant(w.clone().into_dyn());
            let logits = tape.matmul_nt(zn, wn);
            let gamma = tape.softmax_rows(logits);
            let (_, _, mean) = energy_batch_node(tape, zn, gamma, 1e-6);
            mean
        };
        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone().into_dyn());
        let mean = build(&mut tape, zn);
        let grads = tape.backward(mean);
        let analytic = grads.dense(&tape, zn);
        let numeric = numeric_grad(
            |zv| {
                let mut t = Tape::new();
                let l = t.constant(zv.clone());
                let m = build(&mut t, l);
                t.scalar(m)
            },
            &z.clone().into_dyn(),
            1e-6,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-4,
                "reverse {a} vs numeric {n}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn translation_leaves_energies_unchanged(
            seed in 0u64..1000,
            shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-2.0..2.0));
            let gamma = random_simplex_rows(&mut rng, 5, 2);
            let base = energy_batch(&z, &gamma, 1e-6).unwrap();
            let shifted = &z + shift;
            let moved = energy_batch(&shifted, &gamma, 1e-6).unwrap();
            for (a, b) in base.values.iter().zip(moved.values.iter()) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
