//! Randomized adversarial style perturbations.
//!
//! The attack takes the feature entering a block, freezes its content
//! (instance-normalized part), and runs targeted sign-gradient steps on the
//! per-instance style statistics (mu, sigma) so the restyled feature drives
//! the classifier toward a randomly drawn wrong class. Steps are rescaled by
//! the per-instance magnitude of the initial statistics, and an example stops
//! being attacked once its ground-truth confidence drops below the threshold
//! `tau`, which keeps the synthesized styles in a plausible range.
//!
//! The perturbed feature is rebuilt in the caller's training graph as
//! `content * sigma_T + mu_T` with the attacked statistics as constants:
//! training gradients flow through the content into earlier blocks while the
//! adversarial style itself stays fixed, as in standard adversarial training.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{block_input_channels, forward_from, wire, BackboneParams, Mode};
use crate::error::{Error, Result};
use crate::rng::RunRng;
use crate::scalar::Scalar;
use crate::style::{instance_normalize, stats_of, StyleStats};
use crate::tensor::{Graph, TensorId};

/// Lower clamp for attacked standard deviations; sign steps must not drive
/// sigma to zero or below.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Descend the classification loss toward a random non-ground-truth
    /// class (the paper's objective).
    RandomTarget,
    /// Ablation: ascend the classification loss of the ground-truth class.
    GtAscent,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Base step size before channel rescaling.
    pub epsilon: f64,
    /// Maximum number of attack iterations (T).
    pub iterations: usize,
    /// Ground-truth confidence threshold; an example is attacked only while
    /// its confidence is at least `tau`. A value of 1.0 disables early
    /// stopping so every example takes exactly T steps.
    pub tau: f64,
    pub objective: AttackObjective,
    /// Reference channel count for the step rescale `epsilon * ref / C`.
    pub channel_ref: f64,
    /// Record the (mu_t, sigma_t) trajectory in the trace (diagnostics).
    pub record_stats_path: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 2.0 / 255.0,
            iterations: 5,
            tau: 0.8,
            objective: AttackObjective::RandomTarget,
            channel_ref: 64.0,
            record_stats_path: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("attack.epsilon must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("attack.iterations must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(
                "attack.tau must lie in (0, 1]; 1.0 disables early stopping".into(),
            ));
        }
        if !(self.channel_ref > 0.0) {
            return Err(Error::InvalidConfig("attack.channel_ref must be > 0".into()));
        }
        Ok(())
    }
}

/// Diagnostics from one attack invocation.
#[derive(Clone, Debug)]
pub struct AttackTrace<T> {
    /// Number of loop iterations that updated at least one example.
    pub iterations_run: usize,
    /// Mean ground-truth confidence at the last attack forward.
    pub final_gt_confidence: f64,
    /// Update steps actually taken per example.
    pub per_example_steps: Vec<usize>,
    /// The attack hit a non-finite gradient and returned the input untouched.
    pub aborted: bool,
    /// (mu_t, sigma_t) after each update, preceded by (mu_0, sigma_0).
    pub stats_path: Option<Vec<(Vec<T>, Vec<T>)>>,
}

/// Uniform draw over the classes other than `y`, fixed for the whole attack.
pub fn sample_target(y: usize, num_classes: usize, rng: &mut RunRng) -> Result<usize> {
    if num_classes < 2 {
        return Err(Error::Invalid(alloc::format!(
            "sample_target needs >= 2 classes, got {num_classes}"
        )));
    }
    let draw = rng.random_range(0..num_classes - 1);
    Ok(if draw >= y { draw + 1 } else { draw })
}

/// Effective step size at a given channel count: `epsilon * ref / C` keeps
/// the perturbation size comparable across blocks.
pub fn step_scale(channels: usize, cfg: &AttackConfig) -> f64 {
    cfg.epsilon * cfg.channel_ref / channels as f64
}

/// The attack objective: mean cross-entropy of the partial-forward logits
/// against the attack targets.
pub fn style_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: TensorId,
    y_target: &[usize],
) -> Result<TensorId> {
    g.cross_entropy(logits, y_target)
}

fn softmax_confidence<T: Scalar>(logits: &[T], k: usize, y: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(k)
        .zip(y)
        .map(|(row, &yi)| {
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = 0.0f64;
            for &v in row {
                sum += (v - mx).to_f64().exp();
            }
            (row[yi] - mx).to_f64().exp() / sum
        })
        .collect()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Runs the iterative style attack on the feature `x` entering `block`, and
/// re-attaches the result to `outer` as a constant-style denormalization of
/// the (differentiable) content of `x`.
///
/// Weights are treated as constants inside the loop; only the style
/// statistics are differentiable leaves. Stopping is per example: once an
/// example's ground-truth confidence falls below `tau` its statistics freeze
/// for all later iterations.
pub fn rasp_perturb<T: Scalar>(
    outer: &mut Graph<T>,
    x: TensorId,
    y: &[usize],
    y_target: &[usize],
    params: &BackboneParams<T>,
    cfg: &AttackConfig,
    block: usize,
) -> Result<(TensorId, AttackTrace<T>)> {
    cfg.validate()?;
    let shape = outer.shape(x).to_vec();
    let want_c = block_input_channels(block)?;
    if shape.len() != 4 || shape[1] != want_c {
        return Err(Error::ShapeMismatch {
            op: "rasp_perturb",
            lhs: shape,
            rhs: vec![0, want_c, 0, 0],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if y.len() != n || y_target.len() != n {
        return Err(Error::Invalid("rasp_perturb: label count mismatch".into()));
    }

    // Detach: the inner loop works on values only.
    let xv = outer.value(x).to_vec();
    let StyleStats { mu: mu0, sigma: sigma0, .. } = stats_of(&xv, &shape)?;
    let spatial: usize = shape[2..].iter().product();
    let mut content = vec![T::zero(); xv.len()];
    for (i, chunk) in xv.chunks_exact(spatial).enumerate() {
        let (m, s) = (mu0[i], sigma0[i]);
        for (o, &v) in content[i * spatial..(i + 1) * spatial].iter_mut().zip(chunk) {
            *o = (v - m) / s;
        }
    }

    let eps_eff = T::from_f64(step_scale(c, cfg));
    let mu_norms = StyleStats::instance_norms(&mu0, n, c);
    let sigma_norms = StyleStats::instance_norms(&sigma0, n, c);
    let step_mu: Vec<T> = mu_norms.iter().map(|&v| eps_eff * v).collect();
    let step_sigma: Vec<T> = sigma_norms.iter().map(|&v| eps_eff * v).collect();

    let mut mu_t = mu0.clone();
    let mut sigma_t = sigma0.clone();
    let mut frozen = vec![false; n];
    let mut steps = vec![0usize; n];
    let mut iterations_run = 0usize;
    let mut last_confidence = f64::NAN;
    let mut path = cfg
        .record_stats_path
        .then(|| vec![(mu0.clone(), sigma0.clone())]);
    let sigma_floor = T::from_f64(SIGMA_FLOOR);
    let disable_stop = cfg.tau >= 1.0;

    for _t in 0..cfg.iterations {
        let mut g: Graph<T> = Graph::new();
        let wired = wire(&mut g, params, false)?;
        let content_id = g.constant(&shape, content.clone())?;
        let mu_id = g.input(&[n, c], mu_t.clone(), true)?;
        let sigma_id = g.input(&[n, c], sigma_t.clone(), true)?;
        let styled = g.mul_nc(content_id, sigma_id)?;
        let x_t = g.add_nc(styled, mu_id)?;
        let mut ups = Vec::new();
        let logits = forward_from(
            &mut g,
            params,
            &wired,
            x_t,
            block,
            Mode::Train {
                track_running_stats: false,
            },
            &mut ups,
        )?;

        let conf = softmax_confidence(g.value(logits), crate::backbone::NUM_CLASSES, y);
        last_confidence = conf.iter().sum::<f64>() / n as f64;
        if !disable_stop {
            for (f, &cv) in frozen.iter_mut().zip(&conf) {
                if cv < cfg.tau {
                    *f = true;
                }
            }
        }
        if frozen.iter().all(|&f| f) {
            break;
        }

        let loss = match cfg.objective {
            AttackObjective::RandomTarget => style_loss(&mut g, logits, y_target)?,
            AttackObjective::GtAscent => style_loss(&mut g, logits, y)?,
        };
        g.backward(loss)?;
        let gmu = g.grad(mu_id).ok_or(Error::Invalid("missing mu gradient".into()))?;
        let gsigma = g
            .grad(sigma_id)
            .ok_or(Error::Invalid("missing sigma gradient".into()))?;
        if gmu.iter().chain(gsigma).any(|v| !v.is_finite()) {
            return attach_unperturbed(outer, x, AttackTrace {
                iterations_run,
                final_gt_confidence: last_confidence,
                per_example_steps: steps,
                aborted: true,
                stats_path: path,
            });
        }

        // RandomTarget descends the target loss; GtAscent ascends the
        // ground-truth loss.
        let dir = match cfg.objective {
            AttackObjective::RandomTarget => -T::one(),
            AttackObjective::GtAscent => T::one(),
        };
        for ni in 0..n {
            if frozen[ni] {
                continue;
            }
            for ci in 0..c {
                let idx = ni * c + ci;
                mu_t[idx] = mu_t[idx] + dir * step_mu[ni] * sign(gmu[idx]);
                let s = sigma_t[idx] + dir * step_sigma[ni] * sign(gsigma[idx]);
                sigma_t[idx] = if s > sigma_floor { s } else { sigma_floor };
            }
            steps[ni] += 1;
        }
        iterations_run += 1;
        if let Some(p) = path.as_mut() {
            p.push((mu_t.clone(), sigma_t.clone()));
        }
    }

    // Re-attach: differentiable content of x, attacked statistics as
    // constants.
    let (content_id, _, _) = instance_normalize(outer, x)?;
    let mu_const = outer.constant(&[n, c], mu_t)?;
    let sigma_const = outer.constant(&[n, c], sigma_t)?;
    let styled = outer.mul_nc(content_id, sigma_const)?;
    let x_out = outer.add_nc(styled, mu_const)?;
    Ok((
        x_out,
        AttackTrace {
            iterations_run,
            final_gt_confidence: last_confidence,
            per_example_steps: steps,
            aborted: false,
            stats_path: path,
        },
    ))
}

/// Abort path: hand back the original feature untouched.
fn attach_unperturbed<T: Scalar>(
    _outer: &mut Graph<T>,
    x: TensorId,
    trace: AttackTrace<T>,
) -> Result<(TensorId, AttackTrace<T>)> {
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;
    use crate::rng::rng_from_seed;

    #[test]
    fn target_forced_complement_for_two_classes() {
        let mut rng = rng_from_seed(0);
        for _ in 0..50 {
            assert_eq!(sample_target(0, 2, &mut rng).unwrap(), 1);
            assert_eq!(sample_target(1, 2, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn target_never_equals_label_and_is_uniform() {
        let mut rng = rng_from_seed(42);
        let y = 3usize;
        let k = 10usize;
        let draws = 10_000usize;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let t = sample_target(y, k, &mut rng).unwrap();
            assert_ne!(t, y);
            counts[t] += 1;
        }
        // each non-y class frequency within 3 sigma of 1/9
        let p = 1.0 / 9.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for (cls, &cnt) in counts.iter().enumerate() {
            if cls == y {
                assert_eq!(cnt, 0);
                continue;
            }
            let freq = cnt as f64 / draws as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "class {cls}: freq {freq} vs {p}"
            );
        }
    }

    #[test]
    fn target_rejects_degenerate_class_count() {
        let mut rng = rng_from_seed(0);
        assert!(sample_target(0, 1, &mut rng).is_err());
    }

    #[test]
    fn step_scale_matches_channel_rescale() {
        let cfg = AttackConfig::default();
        assert!((step_scale(64, &cfg) - 2.0 / 255.0).abs() < 1e-15);
        assert!((step_scale(16, &cfg) - 8.0 / 255.0).abs() < 1e-15);
        assert!((step_scale(32, &cfg) - 4.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn style_loss_uniform_logits_is_ln_k() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.input(&[2, 10], vec![0.3; 20], false).unwrap();
        let loss = style_loss(&mut g, logits, &[4, 7]).unwrap();
        assert!((g.value(loss)[0] - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn style_loss_vanishes_for_dominant_target_logit() {
        let mut g: Graph<f64> = Graph::new();
        let mut row = vec![0.0; 10];
        row[2] = 60.0;
        let logits = g.input(&[1, 10], row, false).unwrap();
        let loss = style_loss(&mut g, logits, &[2]).unwrap();
        assert!(g.value(loss)[0] < 1e-12);
    }

    #[test]
    fn style_loss_matches_log_sum_exp_oracle() {
        let mut rng = rng_from_seed(9);
        let n = 4;
        let k = 10;
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut g: Graph<f64> = Graph::new();
        let id = g.input(&[n, k], logits.clone(), false).unwrap();
        let loss = g.cross_entropy(id, &targets).unwrap();
        // independent oracle: mean over rows of ln(sum exp z) - z_target
        let mut want = 0.0f64;
        for (row, &t) in logits.chunks_exact(k).zip(&targets) {
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            want += sum.ln() - row[t];
        }
        want /= n as f64;
        assert!((g.value(loss)[0] - want).abs() < 1e-10);
    }

    fn toy_feature(n: usize, c: usize, side: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng_from_seed(seed);
        (0..n * c * side * side)
            .map(|_| rng.random_range(0.1..1.5f32))
            .collect()
    }

    #[test]
    fn tau_one_runs_exactly_t_iterations_with_exact_step_magnitude() {
        let params: BackboneParams<f32> = init_params(11);
        let cfg = AttackConfig {
            tau: 1.0,
            iterations: 3,
            record_stats_path: true,
            ..AttackConfig::default()
        };
        let n = 2;
        let data = toy_feature(n, 64, 4, 5);
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&[n, 64, 4, 4], data, false).unwrap();
        let (_, trace) = rasp_perturb(&mut g, x, &[1, 2], &[3, 4], &params, &cfg, 4).unwrap();
        assert_eq!(trace.iterations_run, 3);
        assert!(trace.per_example_steps.iter().all(|&s| s == 3));

        let path = trace.stats_path.unwrap();
        assert_eq!(path.len(), 4);
        let eps_eff = step_scale(64, &cfg) as f32;
        let (mu0, _) = &path[0];
        let norms = StyleStats::instance_norms(mu0, n, 64);
        for t in 1..path.len() {
            for ni in 0..n {
                let step = eps_eff * norms[ni];
                for ci in 0..64 {
                    let idx = ni * 64 + ci;
                    let d = (path[t].0[idx] - path[t - 1].0[idx]).abs();
                    // sign-step magnitude is constant wherever the gradient
                    // is nonzero
                    assert!(
                        d == 0.0 || (d - step).abs() <= step * 1e-4,
                        "mu moved {d} vs step {step}"
                    );
                }
            }
        }
    }

    #[test]
    fn already_below_tau_runs_zero_iterations() {
        let params: BackboneParams<f32> = init_params(11);
        // Random init gives ~0.1 confidence per class, far below 0.8.
        let cfg = AttackConfig::default();
        let n = 2;
        let data = toy_feature(n, 64, 4, 6);
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&[n, 64, 4, 4], data.clone(), false).unwrap();
        let (x_out, trace) = rasp_perturb(&mut g, x, &[0, 1], &[2, 3], &params, &cfg, 4).unwrap();
        assert_eq!(trace.iterations_run, 0);
        assert!(trace.per_example_steps.iter().all(|&s| s == 0));
        // unchanged stats: x_T is the identity denormalization of x
        for (a, b) in g.value(x_out).iter().zip(&data) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn attack_determinism_per_seed() {
        let params: BackboneParams<f32> = init_params(13);
        let cfg = AttackConfig {
            tau: 1.0,
            iterations: 2,
            ..AttackConfig::default()
        };
        let run = || {
            let mut rng = rng_from_seed(77);
            let y = [1usize, 4];
            let yt: Vec<usize> = y
                .iter()
                .map(|&yi| sample_target(yi, 10, &mut rng).unwrap())
                .collect();
            let data = toy_feature(2, 64, 4, 7);
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(&[2, 64, 4, 4], data, false).unwrap();
            let (x_out, _) = rasp_perturb(&mut g, x, &y, &yt, &params, &cfg, 4).unwrap();
            (yt.clone(), g.value(x_out).to_vec())
        };
        let (t1, v1) = run();
        let (t2, v2) = run();
        assert_eq!(t1, t2);
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn perturbation_bound_holds() {
        let params: BackboneParams<f32> = init_params(17);
        let cfg = AttackConfig {
            tau: 1.0,
            iterations: 4,
            record_stats_path: true,
            ..AttackConfig::default()
        };
        for seed in 0..20 {
            let data = toy_feature(2, 32, 6, seed);
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(&[2, 32, 6, 6], data, false).unwrap();
            let (_, trace) = rasp_perturb(&mut g, x, &[0, 5], &[1, 6], &params, &cfg, 3).unwrap();
            let path = trace.stats_path.unwrap();
            let (mu0, sigma0) = &path[0];
            let (mu_t, sigma_t) = path.last().unwrap();
            let eps_eff = step_scale(32, &cfg) as f32;
            let t = cfg.iterations as f32;
            let mu_norms = StyleStats::instance_norms(mu0, 2, 32);
            let sig_norms = StyleStats::instance_norms(sigma0, 2, 32);
            for ni in 0..2 {
                for ci in 0..32 {
                    let idx = ni * 32 + ci;
                    assert!((mu_t[idx] - mu0[idx]).abs() <= t * eps_eff * mu_norms[ni] * 1.0001);
                    assert!(
                        (sigma_t[idx] - sigma0[idx]).abs()
                            <= t * eps_eff * sig_norms[ni] * 1.0001 + SIGMA_FLOOR as f32
                    );
                }
            }
        }
    }

    #[test]
    fn aborts_on_non_finite_gradient() {
        let mut params: BackboneParams<f32> = init_params(19);
        params.blocks[3].conv1.w[0] = f32::NAN;
        let cfg = AttackConfig {
            tau: 1.0,
            ..AttackConfig::default()
        };
        let data = toy_feature(1, 64, 4, 8);
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&[1, 64, 4, 4], data.clone(), false).unwrap();
        let (x_out, trace) = rasp_perturb(&mut g, x, &[0], &[1], &params, &cfg, 4).unwrap();
        assert!(trace.aborted);
        assert_eq!(x_out, x, "aborted attack must hand back the original feature");
    }

    #[test]
    fn first_order_descent_direction() {
        // One infinitesimal sign step never increases the style loss
        // (descent test in f64 with exact gradients).
        let params: BackboneParams<f64> = init_params(23);
        let data: Vec<f64> = toy_feature(2, 64, 4, 9).into_iter().map(|v| v as f64).collect();
        let shape = [2usize, 64, 4, 4];
        let y_target = [3usize, 8];

        let loss_at = |mu: &[f64], sigma: &[f64], content: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let wired = wire(&mut g, &params, false).unwrap();
            let c_id = g.constant(&shape, content.to_vec()).unwrap();
            let mu_id = g.input(&[2, 64], mu.to_vec(), true).unwrap();
            let s_id = g.input(&[2, 64], sigma.to_vec(), true).unwrap();
            let styled = g.mul_nc(c_id, s_id).unwrap();
            let x_t = g.add_nc(styled, mu_id).unwrap();
            let mut ups = Vec::new();
            let logits = forward_from(
                &mut g,
                &params,
                &wired,
                x_t,
                4,
                Mode::Train { track_running_stats: false },
                &mut ups,
            )
            .unwrap();
            let loss = style_loss(&mut g, logits, &y_target).unwrap();
            g.value(loss)[0]
        };
        let grad_at = |mu: &[f64], sigma: &[f64], content: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut g: Graph<f64> = Graph::new();
            let wired = wire(&mut g, &params, false).unwrap();
            let c_id = g.constant(&shape, content.to_vec()).unwrap();
            let mu_id = g.input(&[2, 64], mu.to_vec(), true).unwrap();
            let s_id = g.input(&[2, 64], sigma.to_vec(), true).unwrap();
            let styled = g.mul_nc(c_id, s_id).unwrap();
            let x_t = g.add_nc(styled, mu_id).unwrap();
            let mut ups = Vec::new();
            let logits = forward_from(
                &mut g,
                &params,
                &wired,
                x_t,
                4,
                Mode::Train { track_running_stats: false },
                &mut ups,
            )
            .unwrap();
            let loss = style_loss(&mut g, logits, &y_target).unwrap();
            g.backward(loss).unwrap();
            (
                g.grad(mu_id).unwrap().to_vec(),
                g.grad(s_id).unwrap().to_vec(),
            )
        };

        let st = stats_of(&data, &shape).unwrap();
        let spatial = 16usize;
        let mut content = vec![0.0f64; data.len()];
        for (i, chunk) in data.chunks_exact(spatial).enumerate() {
            for (o, &v) in content[i * spatial..(i + 1) * spatial].iter_mut().zip(chunk) {
                *o = (v - st.mu[i]) / st.sigma[i];
            }
        }
        let l0 = loss_at(&st.mu, &st.sigma, &content);
        let (gmu, gsigma) = grad_at(&st.mu, &st.sigma, &content);
        for &eta in &[1e-6f64, 1e-5, 1e-4] {
            let mu1: Vec<f64> = st.mu.iter().zip(&gmu).map(|(m, g)| m - eta * sign(*g)).collect();
            let s1: Vec<f64> = st
                .sigma
                .iter()
                .zip(&gsigma)
                .map(|(s, g)| s - eta * sign(*g))
                .collect();
            let l1 = loss_at(&mu1, &s1, &content);
            assert!(
                l1 <= l0 + 1e-12,
                "sign step at eta={eta} increased loss: {l0} -> {l1}"
            );
        }
    }

    #[test]
    fn gt_ascent_increases_ground_truth_loss() {
        let params: BackboneParams<f64> = init_params(29);
        let data: Vec<f64> = toy_feature(1, 64, 4, 10).into_iter().map(|v| v as f64).collect();
        let shape = [1usize, 64, 4, 4];
        let y = [2usize];

        let gt_loss_of = |x_data: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let wired = wire(&mut g, &params, false).unwrap();
            let x = g.constant(&shape, x_data.to_vec()).unwrap();
            let mut ups = Vec::new();
            let logits = forward_from(
                &mut g,
                &params,
                &wired,
                x,
                4,
                Mode::Train { track_running_stats: false },
                &mut ups,
            )
            .unwrap();
            let loss = g.cross_entropy(logits, &y).unwrap();
            g.value(loss)[0]
        };

        let cfg = AttackConfig {
            tau: 1.0,
            iterations: 1,
            epsilon: 1e-4, // small step keeps the linearization valid
            objective: AttackObjective::GtAscent,
            ..AttackConfig::default()
        };
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&shape, data.clone(), false).unwrap();
        let (x_out, trace) = rasp_perturb(&mut g, x, &y, &[5], &params, &cfg, 4).unwrap();
        assert_eq!(trace.iterations_run, 1);
        let l0 = gt_loss_of(&data);
        let l1 = gt_loss_of(g.value(x_out));
        assert!(l1 >= l0, "gt_ascent must not decrease the gt loss: {l0} -> {l1}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = AttackConfig::default();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig::default();
        cfg.tau = 1.5;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig::default();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }
}
