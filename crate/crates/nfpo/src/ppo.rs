//! GAE, the clipped surrogate, value loss, adaptive-KL learning rate and the
//! epoch/minibatch update loop.

use crate::autodiff::{AdamConfig, Real, Tape, Tensor};
use crate::config::{LrSchedule, TrainConfig};
use crate::policy::Agent;
use crate::rng::Stream;
use crate::telemetry::UpdateMetrics;
use crate::{Error, Result};

/// Generalized advantage estimation over one environment's step sequence.
///
/// `next_values[t]` is V of the true successor state of step t: for a
/// non-terminal mid-rollout step that equals `values[t+1]`, at a truncation
/// it is the bootstrap value of the terminal observation, and at the final
/// rollout step it is V of the post-rollout observation. Termination zeroes
/// the bootstrap; both termination and truncation cut the recursion so no
/// advantage leaks across episode boundaries.
///
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    truncations: &[bool],
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if [values.len(), next_values.len(), dones.len(), truncations.len()]
        .iter()
        .any(|&l| l != t_len)
    {
        return Err(Error::ShapeMismatch {
            op: "gae",
            lhs: vec![t_len],
            rhs: vec![values.len(), next_values.len()],
        });
    }
    for seq in [rewards, values, next_values] {
        if seq.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gae inputs".into(),
            });
        }
    }
    let mut adv = vec![0.0f64; t_len];
    let mut carry = 0.0f64;
    for t in (0..t_len).rev() {
        let next = if dones[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * next - values[t];
        let cut = dones[t] || truncations[t];
        carry = delta + gamma * lam * if cut { 0.0 } else { carry };
        adv[t] = carry;
    }
    let ret: Vec<f64> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Normalize to zero mean and unit std in place (f64 accumulation; a
/// degenerate batch keeps std floored at 1e-8 so the op is idempotent).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Negated clipped surrogate (a loss to minimize):
/// `-mean(min(r·Â, clip(r, 1-ε, 1+ε)·Â))` with `r = exp(logp_new - logp_old)`.
/// Gradient flows only through `logp_new`.
pub fn ppo_clip_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    logp_new: crate::autodiff::Var<'t, T>,
    logp_old: &Tensor<T>,
    advantages: &Tensor<T>,
    clip_eps: f64,
) -> Result<crate::autodiff::Var<'t, T>> {
    let old = tape.constant(logp_old.clone());
    let adv = tape.constant(advantages.clone());
    let ratio = logp_new.sub(old)?.exp()?;
    let unclipped = ratio.mul(adv)?;
    let clipped = ratio.clip(1.0 - clip_eps, 1.0 + clip_eps)?.mul(adv)?;
    unclipped.min_elem(clipped)?.mean_all()?.neg()
}

/// Value loss: mean squared error times the configured coefficient.
pub fn value_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    values_new: crate::autodiff::Var<'t, T>,
    returns: &Tensor<T>,
    coef: f64,
) -> Result<crate::autodiff::Var<'t, T>> {
    let target = tape.constant(returns.clone());
    values_new.sub(target)?.square()?.mean_all()?.mul_const(coef)
}

/// Mean approximate KL estimate `mean(logp_old - logp_new)` in f64.
pub fn approx_kl<T: Real>(logp_old: &[T], logp_new: &[T]) -> f64 {
    let n = logp_old.len().max(1) as f64;
    logp_old
        .iter()
        .zip(logp_new)
        .map(|(o, n)| o.to_f64() - n.to_f64())
        .sum::<f64>()
        / n
}

/// Learning-rate schedule driven by the desired KL: divergence beyond twice
/// the target shrinks the rate, staying under half of it grows the rate,
/// both clamped to `[1e-5, 1e-2]`.
pub fn adaptive_lr(lr: f64, kl: f64, desired: f64) -> f64 {
    if kl > 2.0 * desired {
        (lr / 1.5).max(1e-5)
    } else if kl < desired / 2.0 && kl > 0.0 {
        (lr * 1.5).min(1e-2)
    } else {
        lr
    }
}

/// Per-step records of a rollout window: `[N, T]` layout flattened as
/// `n * T + t`.
pub struct RolloutBuffer<T: Real> {
    pub num_envs: usize,
    pub steps: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub obs: Vec<T>,
    pub actions: Vec<T>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub truncations: Vec<bool>,
    pub logp_old: Vec<T>,
    pub values: Vec<f64>,
    /// V of the true successor state per step (bootstrap source).
    pub next_values: Vec<f64>,
    /// Filled by [`RolloutBuffer::compute_gae`].
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<T: Real> RolloutBuffer<T> {
    /// Zero-filled buffer; the collector writes slots by `(env, t)` index.
    pub fn new(num_envs: usize, steps: usize, obs_dim: usize, action_dim: usize) -> Self {
        let n = num_envs * steps;
        RolloutBuffer {
            num_envs,
            steps,
            obs_dim,
            action_dim,
            obs: vec![T::ZERO; n * obs_dim],
            actions: vec![T::ZERO; n * action_dim],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            truncations: vec![false; n],
            logp_old: vec![T::ZERO; n],
            values: vec![0.0; n],
            next_values: vec![0.0; n],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    /// Flat slot of `(env, t)`.
    pub fn slot(&self, env: usize, t: usize) -> usize {
        env * self.steps + t
    }

    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Run GAE per environment row and fill advantages/returns.
    pub fn compute_gae(&mut self, gamma: f64, lam: f64) -> Result<()> {
        let (n, t) = (self.num_envs, self.steps);
        let mut adv = vec![0.0f64; n * t];
        let mut ret = vec![0.0f64; n * t];
        for e in 0..n {
            let lo = e * t;
            let hi = lo + t;
            let (a, r) = gae(
                &self.rewards[lo..hi],
                &self.values[lo..hi],
                &self.next_values[lo..hi],
                &self.dones[lo..hi],
                &self.truncations[lo..hi],
                gamma,
                lam,
            )?;
            adv[lo..hi].copy_from_slice(&a);
            ret[lo..hi].copy_from_slice(&r);
        }
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }

    fn gather_rows(src: &[T], width: usize, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        Tensor::new(vec![idx.len(), width], data).expect("gather shape")
    }
}

/// Split shuffled indices into `k` nearly equal minibatches.
fn partition(indices: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = indices.len();
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(indices[at..at + len].to_vec());
        at += len;
    }
    out
}

/// Run the full epoch/minibatch update on a GAE-processed buffer.
///
/// Per minibatch: recompute log-probabilities (optionally on noise-perturbed
/// actions), take one optimizer step on
/// `surrogate + c_v·value_loss − c_e·entropy`, update the adaptive learning
/// rate from the minibatch KL. A non-finite loss aborts the update and
/// flags an instability event instead of crashing. Test seams: `update`
/// forwards to [`update_with_noise`] which accepts a forced noise tensor.
pub fn update<T: Real>(
    agent: &mut Agent<T>,
    buffer: &RolloutBuffer<T>,
    cfg: &TrainConfig,
    lr: f64,
    update_idx: u64,
) -> Result<UpdateMetrics> {
    update_with_noise(agent, buffer, cfg, lr, update_idx, None)
}

/// As [`update`], with the per-epoch action noise injectable for tests
/// (`Some` overrides the drawn noise; shape `[N·T, action_dim]`).
pub fn update_with_noise<T: Real>(
    agent: &mut Agent<T>,
    buffer: &RolloutBuffer<T>,
    cfg: &TrainConfig,
    mut lr: f64,
    update_idx: u64,
    forced_noise: Option<&[f64]>,
) -> Result<UpdateMetrics> {
    let n = buffer.len();
    if buffer.advantages.len() != n || buffer.returns.len() != n {
        return Err(Error::Graph("update on a buffer without GAE results".into()));
    }
    let seed = cfg.run.seed;
    let sigma = cfg.ppo.action_noise;
    let entropy_coef = cfg.entropy_coef();

    let mut advantages = buffer.advantages.clone();
    normalize_advantages(&mut advantages);

    let mut metrics = UpdateMetrics::default();
    let mut kl_sum = 0.0f64;
    let mut steps = 0usize;

    for epoch in 0..cfg.ppo.epochs {
        let mut indices: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = Stream::new(seed, "shuffle", &[update_idx, epoch as u64]);
        shuffle_rng.shuffle(&mut indices);

        // Fresh per-epoch noise applied to the update-time actions only;
        // stored log-probabilities stay untouched.
        let noise: Option<Vec<f64>> = if sigma > 0.0 {
            Some(match forced_noise {
                Some(f) => f.to_vec(),
                None => {
                    let mut rng = Stream::new(seed, "noise", &[update_idx, epoch as u64]);
                    rng.normals(n * buffer.action_dim)
                        .iter()
                        .map(|z| z * sigma)
                        .collect()
                }
            })
        } else {
            None
        };

        for (mb_idx, mb) in partition(&indices, cfg.ppo.minibatches).iter().enumerate() {
            if mb.is_empty() {
                continue;
            }
            let obs = RolloutBuffer::gather_rows(&buffer.obs, buffer.obs_dim, mb);
            let mut actions = RolloutBuffer::gather_rows(&buffer.actions, buffer.action_dim, mb);
            if let Some(noise) = &noise {
                let d = buffer.action_dim;
                for (row, &i) in mb.iter().enumerate() {
                    for j in 0..d {
                        let v = actions.data()[row * d + j].to_f64() + noise[i * d + j];
                        actions.data_mut()[row * d + j] = T::from_f64(v);
                    }
                }
            }
            let logp_old = RolloutBuffer::gather_rows(&buffer.logp_old, 1, mb)
                .reshape_vec(mb.len());
            let adv_mb = Tensor::from_f64_slice(
                vec![mb.len()],
                &mb.iter().map(|&i| advantages[i]).collect::<Vec<_>>(),
            )?;
            let ret_mb = Tensor::from_f64_slice(
                vec![mb.len()],
                &mb.iter().map(|&i| buffer.returns[i]).collect::<Vec<_>>(),
            )?;

            let tape = Tape::new();
            let obs_v = tape.constant(obs.clone());
            let act_v = tape.constant(actions);
            let logp_new = agent.policy.log_prob(&tape, &agent.store, obs_v, act_v)?;
            let logp_new_vals = logp_new.value();

            // On-policy purity: before the very first gradient step the
            // recomputed log-probs must reproduce the stored ones (ratio 1).
            if epoch == 0 && mb_idx == 0 && sigma == 0.0 {
                let max_err = logp_new_vals
                    .data()
                    .iter()
                    .zip(logp_old.data())
                    .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
                    .fold(0.0, f64::max);
                if max_err > 1e-5 {
                    return Err(Error::Graph(format!(
                        "on-policy ratio check failed: recomputed logp deviates by {max_err}"
                    )));
                }
            }

            let loss_pi = ppo_clip_loss(&tape, logp_new, &logp_old, &adv_mb, cfg.ppo.clip_eps)?;
            let values_new = agent.values(&tape, obs_v)?;
            let loss_v = value_loss(&tape, values_new, &ret_mb, cfg.ppo.value_coef)?;
            let mut total = loss_pi.add(loss_v)?;
            let mut entropy_val = f64::NAN;
            if entropy_coef > 0.0 {
                let mut ent_rng =
                    Stream::new(seed, "entropy", &[update_idx, epoch as u64, mb_idx as u64]);
                let entropy =
                    agent
                        .policy
                        .entropy(&tape, &agent.store, &obs, mb.len(), &mut ent_rng)?;
                entropy_val = entropy.value().item().to_f64();
                total = total.sub(entropy.mul_const(entropy_coef)?)?;
            }

            let total_val = total.value().item().to_f64();
            if !total_val.is_finite() {
                metrics.instability = true;
                metrics.lr = lr;
                return Ok(metrics);
            }

            let kl = approx_kl(logp_old.data(), logp_new_vals.data());

            agent.store.zero_grads();
            tape.backward(total, &mut agent.store)?;
            let adam = AdamConfig {
                lr,
                grad_clip: Some(cfg.ppo.grad_clip),
                ..AdamConfig::default()
            };
            let outcome = agent.store.adam_step(&adam);
            if !outcome.applied {
                metrics.skipped_steps += 1;
            }

            if cfg.ppo.lr_schedule == LrSchedule::Adaptive {
                lr = adaptive_lr(lr, kl, cfg.ppo.desired_kl);
            }

            metrics.loss_pi += loss_pi.value().item().to_f64();
            metrics.loss_v += loss_v.value().item().to_f64();
            if entropy_val.is_finite() {
                metrics.entropy += entropy_val;
                metrics.entropy_steps += 1;
            }
            kl_sum += kl;
            metrics.grad_norm = outcome.grad_norm;
            steps += 1;
        }
    }

    let denom = steps.max(1) as f64;
    metrics.loss_pi /= denom;
    metrics.loss_v /= denom;
    if metrics.entropy_steps > 0 {
        metrics.entropy /= metrics.entropy_steps as f64;
    }
    metrics.approx_kl = kl_sum / denom;
    metrics.lr = lr;
    metrics.grad_steps = steps as u64;
    Ok(metrics)
}

trait ReshapeVec<T: Real> {
    fn reshape_vec(self, n: usize) -> Tensor<T>;
}

impl<T: Real> ReshapeVec<T> for Tensor<T> {
    fn reshape_vec(self, n: usize) -> Tensor<T> {
        Tensor::new(vec![n], self.into_data()).expect("reshape_vec")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_single_terminal_step() {
        // T=1, done: r=1, V=0.3 → A = 0.7
        let (adv, ret) = gae(&[1.0], &[0.3], &[9.9], &[true], &[false], 0.99, 0.95).unwrap();
        assert!((adv[0] - 0.7).abs() < 1e-12);
        assert!((ret[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let rewards = [0.5, -0.2, 1.0, 0.0];
        let values = [0.1, 0.2, 0.3, 0.4];
        let next = [0.2, 0.3, 0.4, 0.6];
        let dones = [false; 4];
        let truncs = [false; 4];
        let (adv, _) = gae(&rewards, &values, &next, &dones, &truncs, 0.99, 0.0).unwrap();
        for t in 0..4 {
            let delta = rewards[t] + 0.99 * next[t] - values[t];
            assert!((adv[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_truncation_bootstraps_and_cuts() {
        // A truncated step keeps its bootstrap value but the next episode's
        // advantage must not leak backwards.
        let rewards = [0.0, 0.0];
        let values = [0.0, 0.0];
        let next = [2.0, 3.0];
        let dones = [false, false];
        let truncs = [true, false];
        let (adv, _) = gae(&rewards, &values, &next, &dones, &truncs, 0.5, 1.0).unwrap();
        // t=0: delta = 0.5·2 = 1, recursion cut at truncation.
        assert!((adv[0] - 1.0).abs() < 1e-12);
        // t=1: delta = 0.5·3 = 1.5.
        assert!((adv[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn gae_rejects_nonfinite() {
        let r = gae(
            &[f64::NAN],
            &[0.0],
            &[0.0],
            &[false],
            &[false],
            0.99,
            0.95,
        );
        assert!(r.is_err());
    }

    #[test]
    fn gae_matches_brute_force_reference() {
        let mut rng = Stream::new(5, "t", &[]);
        for _ in 0..20 {
            let t = 50;
            let rewards: Vec<f64> = (0..t).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let values: Vec<f64> = (0..t).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let next: Vec<f64> = (0..t).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let dones: Vec<bool> = (0..t).map(|_| rng.uniform() < 0.1).collect();
            let truncs: Vec<bool> = (0..t)
                .enumerate()
                .map(|(i, _)| !dones[i] && rng.uniform() < 0.1)
                .collect();
            let (adv, _) =
                gae(&rewards, &values, &next, &dones, &truncs, 0.99, 0.95).unwrap();
            let reference = crate::verify::gae_reference(
                &rewards, &values, &next, &dones, &truncs, 0.99, 0.95,
            );
            for (a, b) in adv.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn normalization_idempotent() {
        let mut rng = Stream::new(6, "t", &[]);
        let mut adv: Vec<f64> = (0..256).map(|_| rng.uniform_in(-3.0, 5.0)).collect();
        normalize_advantages(&mut adv);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
        let again: Vec<f64> = {
            let mut c = adv.clone();
            normalize_advantages(&mut c);
            c
        };
        for (a, b) in adv.iter().zip(&again) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn scalar_loss(logp_new: &[f64], logp_old: &[f64], adv: &[f64], eps: f64) -> f64 {
        let tape = Tape::<f64>::new();
        let store = {
            let mut s = crate::autodiff::ParamStore::new();
            s.insert("p", Tensor::vector(logp_new.to_vec())).unwrap();
            s
        };
        let lp = tape.param(&store, store.id("p").unwrap());
        let loss = ppo_clip_loss(
            &tape,
            lp,
            &Tensor::vector(logp_old.to_vec()),
            &Tensor::vector(adv.to_vec()),
            eps,
        )
        .unwrap();
        loss.value().item()
    }

    #[test]
    fn clip_loss_hand_values() {
        // r = 1 → loss = -mean(A)
        let loss = scalar_loss(&[-1.0, -2.0], &[-1.0, -2.0], &[0.3, 0.7], 0.2);
        assert!((loss - (-0.5)).abs() < 1e-12);
        // r = 2, A = 1 → min(2, 1.2) = 1.2 → contribution −1.2
        let loss = scalar_loss(&[2.0f64.ln()], &[0.0], &[1.0], 0.2);
        assert!((loss - (-1.2)).abs() < 1e-9);
        // r = 0.5, A = −1 → min(−0.5, −0.8) = −0.8 → contribution +0.8
        let loss = scalar_loss(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2);
        assert!((loss - 0.8).abs() < 1e-9);
    }

    #[test]
    fn value_loss_hand_values() {
        let tape = Tape::<f64>::new();
        let mut store = crate::autodiff::ParamStore::new();
        let id = store.insert("v", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let v = tape.param(&store, id);
        // values == returns → 0
        let l = value_loss(&tape, v, &Tensor::vector(vec![1.0, 2.0]), 1.0).unwrap();
        assert_eq!(l.value().item(), 0.0);
        // constant offset c → c²
        let l = value_loss(&tape, v, &Tensor::vector(vec![1.5, 2.5]), 1.0).unwrap();
        assert!((l.value().item() - 0.25).abs() < 1e-12);
        // gradient vs finite differences
        store.zero_grads();
        let tape = Tape::<f64>::new();
        let v = tape.param(&store, id);
        let l = value_loss(&tape, v, &Tensor::vector(vec![0.2, -0.4]), 1.0).unwrap();
        tape.backward(l, &mut store).unwrap();
        let worst = crate::verify::max_grad_rel_error(&mut store, 1e-6, |s| {
            let tape = Tape::new();
            let v = tape.param(s, id);
            Ok(
                value_loss(&tape, v, &Tensor::vector(vec![0.2, -0.4]), 1.0)
                    .unwrap()
                    .value()
                    .item(),
            )
        })
        .unwrap();
        assert!(worst < 1e-5, "value-loss grad rel error {worst}");
    }

    #[test]
    fn adaptive_lr_rule() {
        // stated rule cases
        assert!((adaptive_lr(1e-3, 0.03, 1e-2) - 1e-3 / 1.5).abs() < 1e-12);
        assert!((adaptive_lr(1e-3, 0.004, 1e-2) - 1.5e-3).abs() < 1e-12);
        assert_eq!(adaptive_lr(1e-2, 0.001, 1e-2), 1e-2); // upper cap
        assert_eq!(adaptive_lr(1e-3, 0.01, 1e-2), 1e-3); // inside band
        assert_eq!(adaptive_lr(1e-3, 0.0, 1e-2), 1e-3); // kl = 0 stays
        assert!((adaptive_lr(2e-5, 1.0, 1e-2) - 2e-5 / 1.5).abs() < 1e-12);
        assert_eq!(adaptive_lr(1.2e-5, 1.0, 1e-2), 1e-5); // lower cap
    }

    /// Sign-of-gradient oracle on a one-step bandit: rewarding proximity to
    /// a fixed target action must pull the Gaussian mean toward it.
    #[test]
    fn bandit_mean_moves_toward_rewarded_action() {
        use crate::nets::Activation;
        use crate::policy::{Agent, GaussianArch, PolicyArch};

        let arch = PolicyArch::Gaussian(GaussianArch {
            obs_dim: 2,
            action_dim: 2,
            hidden: vec![16],
            activation: Activation::Elu,
        });
        let mut agent = Agent::<f64>::init(arch, &[16], 3).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.ppo.lr_schedule = crate::config::LrSchedule::Fixed;
        cfg.ppo.epochs = 2;
        cfg.ppo.minibatches = 1;
        cfg.ppo.entropy_coef = Some(0.0);
        let target = [0.6f64, -0.4];
        let obs = Tensor::<f64>::zeros(vec![1, 2]);

        let mean_at = |agent: &Agent<f64>| -> Vec<f64> {
            let mut rng = Stream::new(0, "mean", &[]);
            let (a, _) = agent.policy.sample(&agent.store, &obs, 0.0, &mut rng).unwrap();
            a.data().to_vec()
        };
        let dist = |m: &[f64]| ((m[0] - target[0]).powi(2) + (m[1] - target[1]).powi(2)).sqrt();
        let before = dist(&mean_at(&agent));

        for update in 0..50u64 {
            // One-step episodes: reward is higher the closer the sampled
            // action lies to the target.
            let n = 64;
            let mut buf = RolloutBuffer::<f64>::new(n, 1, 2, 2);
            let mut rng = Stream::new(update, "bandit", &[]);
            let obs_b = Tensor::zeros(vec![n, 2]);
            let (actions, logp) = agent
                .policy
                .sample(&agent.store, &obs_b, 1.0, &mut rng)
                .unwrap();
            for e in 0..n {
                let a = [actions.at2(e, 0), actions.at2(e, 1)];
                buf.actions[e * 2] = a[0];
                buf.actions[e * 2 + 1] = a[1];
                buf.logp_old[e] = logp.data()[e];
                buf.rewards[e] =
                    -((a[0] - target[0]).powi(2) + (a[1] - target[1]).powi(2));
                buf.dones[e] = true;
            }
            buf.compute_gae(cfg.ppo.gamma, cfg.ppo.lam).unwrap();
            update_with_noise(&mut agent, &buf, &cfg, 1e-3, update, None).unwrap();
        }
        let after = dist(&mean_at(&agent));
        assert!(
            after < before * 0.5,
            "mean did not move toward the rewarded action: {before} -> {after}"
        );
    }

    /// With the per-epoch noise forced to zero, the noisy code path produces
    /// bit-identical results to the noise-free one.
    #[test]
    fn zero_noise_path_equivalence() {
        use crate::nets::Activation;
        use crate::policy::{Agent, GaussianArch, PolicyArch};

        let arch = |seed: u64| {
            let a = PolicyArch::Gaussian(GaussianArch {
                obs_dim: 2,
                action_dim: 2,
                hidden: vec![8],
                activation: Activation::Elu,
            });
            Agent::<f64>::init(a, &[8], seed).unwrap()
        };
        let make_buffer = |agent: &Agent<f64>| {
            let n = 16;
            let mut buf = RolloutBuffer::<f64>::new(n, 1, 2, 2);
            let mut rng = Stream::new(5, "nbuf", &[]);
            let obs = Tensor::from_f64_slice(vec![n, 2], &rng.normals(n * 2)).unwrap();
            let (actions, logp) = agent.policy.sample(&agent.store, &obs, 1.0, &mut rng).unwrap();
            buf.obs.copy_from_slice(obs.data());
            buf.actions.copy_from_slice(actions.data());
            buf.logp_old.copy_from_slice(logp.data());
            for e in 0..n {
                buf.rewards[e] = rng.uniform_in(-1.0, 1.0);
                buf.dones[e] = true;
            }
            buf.compute_gae(0.99, 0.95).unwrap();
            buf
        };

        let mut plain = TrainConfig::default();
        plain.ppo.lr_schedule = crate::config::LrSchedule::Fixed;
        plain.ppo.entropy_coef = Some(0.0);
        let mut noisy = plain.clone();
        noisy.ppo.action_noise = 0.5;

        let mut agent_a = arch(9);
        let buf_a = make_buffer(&agent_a);
        let m_plain = update(&mut agent_a, &buf_a, &plain, 1e-3, 0).unwrap();

        let mut agent_b = arch(9);
        let buf_b = make_buffer(&agent_b);
        let zeros = vec![0.0; buf_b.len() * 2];
        let m_forced =
            update_with_noise(&mut agent_b, &buf_b, &noisy, 1e-3, 0, Some(&zeros)).unwrap();

        assert_eq!(m_plain.loss_pi, m_forced.loss_pi);
        assert_eq!(m_plain.loss_v, m_forced.loss_v);
        assert_eq!(m_plain.approx_kl, m_forced.approx_kl);
        // Parameters end up bit-identical as well.
        for (name, id) in agent_a.store.iter() {
            let other = agent_b.store.id(name).unwrap();
            assert_eq!(agent_a.store.value(id), agent_b.store.value(other));
        }
    }

    #[test]
    fn surrogate_descent_direction() {
        // The negated surrogate's directional derivative along its own
        // gradient must be non-positive.
        let mut store = crate::autodiff::ParamStore::<f64>::new();
        let id = store
            .insert("p", Tensor::vector(vec![-0.9, -1.1, -0.4]))
            .unwrap();
        let old = Tensor::vector(vec![-1.0, -1.0, -0.5]);
        let adv = Tensor::vector(vec![0.8, -1.2, 0.4]);
        let eval = |s: &crate::autodiff::ParamStore<f64>| -> Result<f64> {
            let tape = Tape::new();
            let lp = tape.param(s, id);
            Ok(ppo_clip_loss(&tape, lp, &old, &adv, 0.2)?.value().item())
        };
        store.zero_grads();
        {
            let tape = Tape::new();
            let lp = tape.param(&store, id);
            let loss = ppo_clip_loss(&tape, lp, &old, &adv, 0.2).unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
        let g: Vec<f64> = store.grad(id).data().to_vec();
        let l0 = eval(&store).unwrap();
        let eta = 1e-6;
        for (i, gi) in g.iter().enumerate() {
            store.value_mut(id).data_mut()[i] -= eta * gi;
        }
        let l1 = eval(&store).unwrap();
        assert!(
            (l1 - l0) / eta <= 1e-9,
            "directional derivative {} not non-positive",
            (l1 - l0) / eta
        );
    }
}
