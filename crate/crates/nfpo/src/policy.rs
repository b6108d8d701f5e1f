//! Unified interface over the flow policy and the diagonal-Gaussian
//! baseline: both expose the same sample / log_prob / entropy / mode
//! contracts so the trainer never branches on the parameterization.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::flow::{FlowArch, FlowPolicy, LN_2PI};
use crate::nets::{Activation, MlpParams, MlpSpec, OutputInit};
use crate::rng::Stream;
use crate::{Error, Result};

/// Diagonal Gaussian with a learnable mean network and a state-independent
/// learnable log-std vector (initialized to zero, i.e. unit std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianArch {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

pub struct GaussianPolicy {
    pub arch: GaussianArch,
    mean: MlpParams,
    log_std: ParamId,
}

impl GaussianPolicy {
    fn mean_spec(arch: &GaussianArch) -> Result<MlpSpec> {
        MlpSpec::new(
            arch.obs_dim,
            &arch.hidden,
            arch.action_dim,
            arch.activation,
            OutputInit::Orthogonal { gain: 0.01 },
        )
    }

    pub fn init<T: Real>(arch: GaussianArch, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mean = MlpParams::init(&Self::mean_spec(&arch)?, store, "actor.mu", seed)?;
        let log_std = store.insert("actor.log_std", Tensor::zeros(vec![arch.action_dim]))?;
        Ok(GaussianPolicy {
            arch,
            mean,
            log_std,
        })
    }

    pub fn bind<T: Real>(arch: GaussianArch, store: &ParamStore<T>) -> Result<Self> {
        let mean = MlpParams::bind(&Self::mean_spec(&arch)?, store, "actor.mu")?;
        let log_std = store
            .id("actor.log_std")
            .ok_or_else(|| Error::ArchMismatch("missing actor.log_std".into()))?;
        Ok(GaussianPolicy {
            arch,
            mean,
            log_std,
        })
    }

    pub fn param_count(&self) -> usize {
        self.mean.spec.param_count() + self.arch.action_dim
    }

    /// Diagonal-normal log density per sample.
    pub fn log_prob<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        obs: Var<'t, T>,
        actions: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let d = self.arch.action_dim as f64;
        let mu = self.mean.forward(tape, store, obs)?;
        let log_std = tape.param(store, self.log_std);
        let inv_std = log_std.neg()?.exp()?;
        let scaled = actions.sub(mu)?.mul(inv_std)?;
        let quad = scaled.square()?.sum_last()?;
        quad.mul_const(-0.5)?
            .add_const(-0.5 * d * LN_2PI)?
            .sub(log_std.sum_all()?)
    }

    /// `a = μ + √τ·σ·z`; the returned log-prob is the τ=1 density.
    pub fn sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        obs: &Tensor<T>,
        tau: f64,
        rng: &mut Stream,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let batch = obs.rows();
        let d = self.arch.action_dim;
        let scale = tau.max(0.0).sqrt();
        let tape = Tape::new();
        let obs_v = tape.constant(obs.clone());
        let mu = self.mean.forward(&tape, store, obs_v)?.value();
        let std: Vec<f64> = store
            .value(self.log_std)
            .data()
            .iter()
            .map(|v| v.to_f64().exp())
            .collect();
        let z = rng.normals(batch * d);
        let mut a = mu.clone();
        for i in 0..batch {
            for j in 0..d {
                let v = mu.at2(i, j).to_f64() + scale * std[j] * z[i * d + j];
                a.data_mut()[i * d + j] = T::from_f64(v);
            }
        }
        let av = tape.constant(a.clone());
        let logp = self.log_prob(&tape, store, obs_v, av)?.value();
        Ok((a, logp))
    }

    /// Closed-form entropy: Σ_d log σ_d + D/2·log(2πe).
    pub fn entropy<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
    ) -> Result<Var<'t, T>> {
        let d = self.arch.action_dim as f64;
        let log_std = tape.param(store, self.log_std);
        log_std.sum_all()?.add_const(0.5 * d * (LN_2PI + 1.0))
    }
}

/// Serializable policy architecture, stored in checkpoints so evaluation can
/// rebuild the policy without the original config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arch", rename_all = "snake_case")]
pub enum PolicyArch {
    Gaussian(GaussianArch),
    Flow(FlowArch),
}

impl PolicyArch {
    pub fn obs_dim(&self) -> usize {
        match self {
            PolicyArch::Gaussian(a) => a.obs_dim,
            PolicyArch::Flow(a) => a.obs_dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            PolicyArch::Gaussian(a) => a.action_dim,
            PolicyArch::Flow(a) => a.action_dim,
        }
    }
}

/// Either policy parameterization behind one contract.
pub enum Policy {
    Gaussian(GaussianPolicy),
    Flow(FlowPolicy),
}

impl Policy {
    pub fn init<T: Real>(arch: PolicyArch, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        match arch {
            PolicyArch::Gaussian(a) => Ok(Policy::Gaussian(GaussianPolicy::init(a, store, seed)?)),
            PolicyArch::Flow(a) => Ok(Policy::Flow(FlowPolicy::init(a, store, seed)?)),
        }
    }

    pub fn bind<T: Real>(arch: PolicyArch, store: &ParamStore<T>) -> Result<Self> {
        match arch {
            PolicyArch::Gaussian(a) => Ok(Policy::Gaussian(GaussianPolicy::bind(a, store)?)),
            PolicyArch::Flow(a) => Ok(Policy::Flow(FlowPolicy::bind(a, store)?)),
        }
    }

    pub fn arch(&self) -> PolicyArch {
        match self {
            Policy::Gaussian(p) => PolicyArch::Gaussian(p.arch.clone()),
            Policy::Flow(p) => PolicyArch::Flow(p.arch.clone()),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Policy::Gaussian(p) => p.arch.action_dim,
            Policy::Flow(p) => p.arch.action_dim,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Policy::Gaussian(p) => p.arch.obs_dim,
            Policy::Flow(p) => p.arch.obs_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Policy::Gaussian(p) => p.param_count(),
            Policy::Flow(p) => p.param_count(),
        }
    }

    pub fn log_prob<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        obs: Var<'t, T>,
        actions: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self {
            Policy::Gaussian(p) => p.log_prob(tape, store, obs, actions),
            Policy::Flow(p) => p.log_prob(tape, store, actions, obs),
        }
    }

    /// Draw one action per observation row; τ scales the sampling noise,
    /// τ=0 is the deterministic deployment action. The returned log-prob is
    /// always the τ=1 density (the quantity stored as log π_old).
    pub fn sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        obs: &Tensor<T>,
        tau: f64,
        rng: &mut Stream,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        match self {
            Policy::Gaussian(p) => p.sample(store, obs, tau, rng),
            Policy::Flow(p) => p.sample(store, obs, tau, rng),
        }
    }

    /// Entropy (estimate) as a differentiable scalar. The Gaussian uses its
    /// closed form; the flow uses Monte-Carlo `−mean(log π(a))` over `n`
    /// fresh samples drawn at observations cycled from `obs`.
    pub fn entropy<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        obs: &Tensor<T>,
        n: usize,
        rng: &mut Stream,
    ) -> Result<Var<'t, T>> {
        match self {
            Policy::Gaussian(p) => p.entropy(tape, store),
            Policy::Flow(p) => {
                let obs_rep = cycle_rows(obs, n);
                let (actions, _) = p.sample(store, &obs_rep, 1.0, rng)?;
                let av = tape.constant(actions);
                let ov = tape.constant(obs_rep);
                p.log_prob(tape, store, av, ov)?.mean_all()?.neg()
            }
        }
    }
}

/// Repeat rows of `obs` cyclically until `n` rows.
fn cycle_rows<T: Real>(obs: &Tensor<T>, n: usize) -> Tensor<T> {
    let (rows, cols) = (obs.rows(), obs.cols());
    let mut data = Vec::with_capacity(n * cols);
    for i in 0..n {
        data.extend_from_slice(obs.row(i % rows));
    }
    Tensor::new(vec![n, cols], data).expect("cycle_rows shape")
}

/// Policy, value function and their parameters, bundled for training.
pub struct Agent<T: Real> {
    pub policy: Policy,
    pub critic: MlpParams,
    pub store: ParamStore<T>,
}

impl<T: Real> Agent<T> {
    pub fn init(arch: PolicyArch, critic_hidden: &[usize], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let critic_spec = MlpSpec::new(
            arch.obs_dim(),
            critic_hidden,
            1,
            Activation::Elu,
            OutputInit::Orthogonal { gain: 1.0 },
        )?;
        let policy = Policy::init(arch, &mut store, seed)?;
        let critic = MlpParams::init(&critic_spec, &mut store, "critic", seed)?;
        Ok(Agent {
            policy,
            critic,
            store,
        })
    }

    /// Rebuild from checkpointed parameters.
    pub fn bind(arch: PolicyArch, critic_hidden: &[usize], store: ParamStore<T>) -> Result<Self> {
        let critic_spec = MlpSpec::new(
            arch.obs_dim(),
            critic_hidden,
            1,
            Activation::Elu,
            OutputInit::Orthogonal { gain: 1.0 },
        )?;
        let policy = Policy::bind(arch, &store)?;
        let critic = MlpParams::bind(&critic_spec, &store, "critic")?;
        Ok(Agent {
            policy,
            critic,
            store,
        })
    }

    /// State values `[B]` for an observation batch.
    pub fn values<'t>(
        &self,
        tape: &'t Tape<T>,
        obs: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let batch = obs.shape()[0];
        self.critic
            .forward(tape, &self.store, obs)?
            .reshape(vec![batch])
    }

    /// Plain (non-recorded) state values for a batch.
    pub fn values_plain(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let o = tape.constant(obs.clone());
        Ok(self.values(&tape, o)?.value())
    }
}
