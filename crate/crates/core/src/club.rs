//! Sampled upper-bound estimator of I(z_s; z_b).
//!
//! A learned conditional Gaussian q(z_b | z_s) scores every (i, j) pair of a
//! batch; the estimate is the mean positive-pair log-density minus the mean
//! over all pairs, including j = i. Training alternates: the critic phase
//! pushes the estimate up by updating only the variational net with latents
//! held constant, the encoder phase minimizes the estimate with the
//! variational net frozen.

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::ad::{NodeId, Tape};
use crate::nets::{critic_forward, Critic, CriticNodes};
use crate::{Error, Result};

/// Value of the estimator on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    /// Nats.
    pub value: f64,
    pub batch_size: usize,
}

/// Which side of the alternating scheme a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClubMode {
    /// Update the variational net; latents are constants.
    Critic,
    /// Provide the MI term for the encoder objective; the variational net is
    /// frozen and receives no gradient.
    Encoder,
}

/// Critic-phase objective. The default maximizes the full estimate; the
/// conventional alternative maximizes only positive-pair log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticObjective {
    MiUpperBound,
    PositiveMle,
}

/// Diagonal Gaussian log-density of `z` under (mean, logvar).
pub fn gaussian_logdf(z: &Array1<f64>, mean: &Array1<f64>, logvar: &Array1<f64>) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    z.iter()
        .zip(mean.iter())
        .zip(logvar.iter())
        .map(|((&z, &m), &lv)| {
            let diff = z - m;
            -HALF_LN_2PI - 0.5 * lv - diff * diff / (2.0 * lv.exp())
        })
        .sum()
}

/// log q(z_b | z_s) for one pair under the critic's predicted Gaussian.
pub fn log_q(z_b: &Array1<f64>, z_s: &Array1<f64>, critic: &Critic) -> f64 {
    let (mean, logvar) = critic_mean_logvar(critic, &z_s.clone().insert_axis(Axis(0)));
    gaussian_logdf(z_b, &mean.row(0).to_owned(), &logvar.row(0).to_owned())
}

/// Run the critic on a batch of subject latents (inference).
pub fn critic_mean_logvar(critic: &Critic, z_s: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut tape = Tape::new();
    let zs = tape.constant(z_s.clone().into_dyn());
    let nodes = critic.nodes(&mut tape, false);
    let (mean, logvar) = critic_forward(&mut tape, zs, &nodes);
    let to2 = |t: &Tape, id: NodeId| {
        t.value(id)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    (to2(&tape, mean), to2(&tape, logvar))
}

/// Graph node for the estimator given latent nodes and critic nodes already
/// on the tape. `mean(diag(M)) − mean(M)` with `M[i,j] = log q(z_b_j | z_s_i)`.
pub fn mi_node(tape: &mut Tape, z_s: NodeId, z_b: NodeId, critic: &CriticNodes) -> NodeId {
    let (mean, logvar) = critic_forward(tape, z_s, critic);
    let m = tape.pair_gauss_logdf(mean, logvar, z_b);
    let pos = tape.diag(m);
    let pos_mean = tape.mean_all(pos);
    let all_mean = tape.mean_all(m);
    tape.sub(pos_mean, all_mean)
}

/// Graph node for the mean positive-pair log-likelihood (the alternative
/// critic objective).
pub fn positive_loglik_node(
    tape: &mut Tape,
    z_s: NodeId,
    z_b: NodeId,
    critic: &CriticNodes,
) -> NodeId {
    let (mean, logvar) = critic_forward(tape, z_s, critic);
    let m = tape.pair_gauss_logdf(mean, logvar, z_b);
    let pos = tape.diag(m);
    tape.mean_all(pos)
}

/// Evaluate the estimator on plain arrays.
pub fn mi_estimate(z_s: &Array2<f64>, z_b: &Array2<f64>, critic: &Critic) -> Result<MiEstimate> {
    if z_s.dim() != z_b.dim() {
        return Err(Error::Shape(format!(
            "latent batches disagree: {:?} vs {:?}",
            z_s.dim(),
            z_b.dim()
        )));
    }
    if z_s.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut tape = Tape::new();
    let zs = tape.constant(z_s.clone().into_dyn());
    let zb = tape.constant(z_b.clone().into_dyn());
    let nodes = critic.nodes(&mut tape, false);
    let mi = mi_node(&mut tape, zs, zb, &nodes);
    Ok(MiEstimate {
        value: tape.scalar(mi),
        batch_size: z_s.nrows(),
    })
}

/// Output of one alternating-scheme step.
pub struct ClubStep {
    /// The loss handed to the caller's optimizer.
    pub loss: f64,
    /// The MI estimate at these inputs.
    pub mi: f64,
    /// Critic mode: gradients of `loss` w.r.t. the critic tensors in
    /// [`Critic::nodes`] order (trunk.w, trunk.b, mean.w, mean.b,
    /// logvar.w, logvar.b). Empty in encoder mode.
    pub critic_grads: Vec<ArrayD<f64>>,
    /// Encoder mode: gradients of `loss` w.r.t. (z_s, z_b). `None` in critic
    /// mode, where the latents are constants by contract.
    pub latent_grads: Option<(Array2<f64>, Array2<f64>)>,
}

/// One step of the alternating scheme on a latent batch.
///
/// Critic mode returns a loss whose minimization maximizes the chosen critic
/// objective w.r.t. the variational net only; encoder mode returns the MI
/// estimate itself with the variational net frozen.
pub fn club_update_step(
    z_s: &Array2<f64>,
    z_b: &Array2<f64>,
    critic: &Critic,
    mode: ClubMode,
    objective: CriticObjective,
) -> Result<ClubStep> {
    if z_s.dim() != z_b.dim() {
        return Err(Error::Shape(format!(
            "latent batches disagree: {:?} vs {:?}",
            z_s.dim(),
            z_b.dim()
        )));
    }
    let mut tape = Tape::new();
    match mode {
        ClubMode::Critic => {
            let zs = tape.constant(z_s.clone().into_dyn());
            let zb = tape.constant(z_b.clone().into_dyn());
            let nodes = critic.nodes(&mut tape, true);
            let mi = mi_node(&mut tape, zs, zb, &nodes);
            let objective_node = match objective {
                CriticObjective::MiUpperBound => mi,
                CriticObjective::PositiveMle => positive_loglik_node(&mut tape, zs, zb, &nodes),
            };
            let loss = tape.neg(objective_node);
            let grads = tape.backward(loss);
            let critic_grads = [
                nodes.trunk.w,
                nodes.trunk.b,
                nodes.mean.w,
                nodes.mean.b,
                nodes.logvar.w,
                nodes.logvar.b,
            ]
            .iter()
            .map(|&id| grads.dense(&tape, id))
            .collect();
            Ok(ClubStep {
                loss: tape.scalar(loss),
                mi: tape.scalar(mi),
                critic_grads,
                latent_grads: None,
            })
        }
        ClubMode::Encoder => {
            let zs = tape.leaf(z_s.clone().into_dyn());
            let zb = tape.leaf(z_b.clone().into_dyn());
            let nodes = critic.nodes(&mut tape, false);
            let mi = mi_node(&mut tape, zs, zb, &nodes);
            let grads = tape.backward(mi);
            let to2 = |a: ArrayD<f64>| a.into_dimensionality::<ndarray::Ix2>().unwrap();
            Ok(ClubStep {
                loss: tape.scalar(mi),
                mi: tape.scalar(mi),
                critic_grads: Vec::new(),
                latent_grads: Some((
                    to2(grads.dense(&tape, zs)),
                    to2(grads.dense(&tape, zb)),
                )),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::numeric_grad;
    use crate::nets::Linear;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A critic with all-zero tensors predicts a standard normal for any z_s.
    fn zero_critic(d: usize, hidden: usize) -> Critic {
        Critic {
            trunk: Linear {
                w: Array2::zeros((hidden, d)),
                b: Array1::zeros(hidden),
            },
            mean: Linear {
                w: Array2::zeros((d, hidden)),
                b: Array1::zeros(d),
            },
            logvar: Linear {
                w: Array2::zeros((d, hidden)),
                b: Array1::zeros(d),
            },
        }
    }

    fn random_critic(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Critic {
        let mut lin = |i: usize, o: usize| Linear {
            w: Array2::from_shape_fn((o, i), |_| rng.gen_range(-0.7..0.7)),
            b: Array1::from_shape_fn(o, |_| rng.gen_range(-0.3..0.3)),
        };
        Critic {
            trunk: lin(d, hidden),
            mean: lin(hidden, d),
            logvar: lin(hidden, d),
        }
    }

    fn rand2(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5))
    }

    /// Literal double-loop transcription of the estimator.
    fn mi_oracle(z_s: &Array2<f64>, z_b: &Array2<f64>, critic: &Critic) -> f64 {
        let n = z_s.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let zsi = z_s.row(i).to_owned();
            let pos = log_q(&z_b.row(i).to_owned(), &zsi, critic);
            let mut inner = 0.0;
            for j in 0..n {
                inner += log_q(&z_b.row(j).to_owned(), &zsi, critic);
            }
            total += pos - inner / n as f64;
        }
        total / n as f64
    }

    #[test]
    fn log_q_standard_normal_values() {
        let critic = zero_critic(1, 4);
        let zs = arr1(&[0.7]);
        let at_mode = log_q(&arr1(&[0.0]), &zs, &critic);
        assert!((at_mode - (-0.918_938_533_204_672_8)).abs() < 1e-12);
        let at_one = log_q(&arr1(&[1.0]), &zs, &critic);
        assert!((at_one - (-1.418_938_533_204_672_8)).abs() < 1e-12);
    }

    #[test]
    fn log_q_matches_per_dimension_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let critic = random_critic(&mut rng, 3, 5);
        let zs = arr1(&[0.3, -0.8, 1.2]);
        let zb = arr1(&[-0.4, 0.9, 0.1]);
        let (mean, logvar) = critic_mean_logvar(&critic, &zs.clone().insert_axis(Axis(0)));
        // Sum of independent 1-d Gaussian log-densities.
        let mut expect = 0.0;
        for j in 0..3 {
            let m = mean[[0, j]];
            let lv = logvar[[0, j]];
            let var = lv.exp();
            expect += -0.5 * (2.0 * std::f64::consts::PI * var).ln()
                - (zb[j] - m).powi(2) / (2.0 * var);
        }
        assert!((log_q(&zb, &zs, &critic) - expect).abs() < 1e-10);
    }

    #[test]
    fn mi_is_exactly_zero_for_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let critic = random_critic(&mut rng, 4, 6);
        let zs = rand2(&mut rng, 1, 4);
        let zb = rand2(&mut rng, 1, 4);
        let est = mi_estimate(&zs, &zb, &critic).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.batch_size, 1);
    }

    #[test]
    fn constant_critic_gives_null_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        // Zero weights with random biases: predictions ignore z_s entirely.
        let mut critic = zero_critic(3, 4);
        critic.mean.b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        critic.logvar.b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        for n in [2usize, 5, 9] {
            let zs = rand2(&mut rng, n, 3);
            let zb = rand2(&mut rng, n, 3);
            let est = mi_estimate(&zs, &zb, &critic).unwrap();
            assert!(est.value.abs() <= 1e-8, "null estimate {}", est.value);
        }
    }

    #[test]
    fn estimator_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..20 {
            let critic = random_critic(&mut rng, 2, 5);
            let n = rng.gen_range(2..8);
            let zs = rand2(&mut rng, n, 2);
            let zb = rand2(&mut rng, n, 2);
            let est = mi_estimate(&zs, &zb, &critic).unwrap();
            let oracle = mi_oracle(&zs, &zb, &critic);
            assert!((est.value - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn estimator_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let critic = random_critic(&mut rng, 3, 5);
        let zs = rand2(&mut rng, 6, 3);
        let zb = rand2(&mut rng, 6, 3);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let zs_p = Array2::from_shape_fn((6, 3), |(i, j)| zs[[perm[i], j]]);
        let zb_p = Array2::from_shape_fn((6, 3), |(i, j)| zb[[perm[i], j]]);
        let a = mi_estimate(&zs, &zb, &critic).unwrap().value;
        let b = mi_estimate(&zs_p, &zb_p, &critic).unwrap().value;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn encoder_mode_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let critic = random_critic(&mut rng, 3, 5);
        let zs = rand2(&mut rng, 5, 3);
        let zb = rand2(&mut rng, 5, 3);
        let step = club_update_step(&zs, &zb, &critic, ClubMode::Encoder, CriticObjective::MiUpperBound)
            .unwrap();
        let (dzs, dzb) = step.latent_grads.unwrap();
        let num_zs = numeric_grad(
            |z| {
                let z2 = z.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                mi_estimate(&z2, &zb, &critic).unwrap().value
            },
            &zs.clone().into_dyn(),
            1e-6,
        );
        for (a, n) in dzs.iter().zip(num_zs.iter()) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-4);
        }
        let num_zb = numeric_grad(
            |z| {
                let z2 = z.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                mi_estimate(&zs, &z2, &critic).unwrap().value
            },
            &zb.clone().into_dyn(),
            1e-6,
        );
        for (a, n) in dzb.iter().zip(num_zb.iter()) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn critic_mode_returns_no_latent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let critic = random_critic(&mut rng, 2, 4);
        let zs = rand2(&mut rng, 4, 2);
        let zb = rand2(&mut rng, 4, 2);
        let step =
            club_update_step(&zs, &zb, &critic, ClubMode::Critic, CriticObjective::MiUpperBound)
                .unwrap();
        assert!(step.latent_grads.is_none());
        assert_eq!(step.critic_grads.len(), 6);
        assert!((step.loss + step.mi).abs() < 1e-12);
    }

    #[test]
    fn one_critic_sgd_step_increases_mi_on_correlated_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        // Correlated toy data: z_b is a noisy linear image of z_s.
        let n = 64;
        let d = 2;
        let zs = rand2(&mut rng, n, d);
        let mut zb = zs.clone() * 0.9;
        zb.mapv_inplace(|v| v + 0.1);
        for v in zb.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let mut critic = random_critic(&mut rng, d, 8);
        let before = mi_estimate(&zs, &zb, &critic).unwrap().value;
        let step =
            club_update_step(&zs, &zb, &critic, ClubMode::Critic, CriticObjective::MiUpperBound)
                .unwrap();
        let lr = 1e-3;
        let apply = |lin: &mut Linear, gw: &ArrayD<f64>, gb: &ArrayD<f64>| {
            let gw = gw.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gb = gb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            lin.w.zip_mut_with(&gw, |w, g| *w -= lr * g);
            lin.b.zip_mut_with(&gb, |b, g| *b -= lr * g);
        };
        apply(&mut critic.trunk, &step.critic_grads[0], &step.critic_grads[1]);
        apply(&mut critic.mean, &step.critic_grads[2], &step.critic_grads[3]);
        apply(&mut critic.logvar, &step.critic_grads[4], &step.critic_grads[5]);
        let after = mi_estimate(&zs, &zb, &critic).unwrap().value;
        assert!(
            after > before,
            "critic step did not increase the estimate: {before} -> {after}"
        );
    }

    #[test]
    fn positive_mle_objective_drives_positive_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let critic = random_critic(&mut rng, 2, 4);
        let zs = rand2(&mut rng, 5, 2);
        let zb = rand2(&mut rng, 5, 2);
        let step =
            club_update_step(&zs, &zb, &critic, ClubMode::Critic, CriticObjective::PositiveMle)
                .unwrap();
        // Loss is minus the mean positive-pair log-likelihood.
        let mut pos = 0.0;
        for i in 0..5 {
            pos += log_q(&zb.row(i).to_owned(), &zs.row(i).to_owned(), &critic);
        }
        pos /= 5.0;
        assert!((step.loss + pos).abs() < 1e-10);
    }
}
