//! State-conditioned RealNVP policy: affine coupling layers with bounded
//! scale transforms, exact log-probability and temperature sampling.
//!
//! Each coupling layer passes the index set `keep` through unchanged and
//! transforms the complement:
//!
//! ```text
//! y[keep]      = a[keep]
//! y[transform] = a[transform] ⊙ exp(g(s(a[keep], obs))) + t(a[keep], obs)
//! ```
//!
//! where `g` is the scale normalization ([`NormMode`]): the raw network
//! output (`none`), a hard clip (`clip`), a tanh bound (`tanh`), or a scale
//! suppressed to one (`no_s`, translation-only coupling). The per-sample log
//! determinant of the Jacobian is the sum of `g(s)` over transformed
//! dimensions; under `tanh`/`clip` it is hard-bounded by `l` per dimension.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::nets::{Activation, MlpParams, MlpSpec, OutputInit};
use crate::rng::Stream;
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Scale normalization applied to the raw scale-network output before
/// exponentiation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Raw `s`; unbounded log-determinant.
    None,
    /// `clip(s, -l, l)`: bounded but gradient-dead outside the bound.
    Clip { l: f64 },
    /// `l·tanh(s)`: bounded with a smoothly decaying gradient.
    Tanh { l: f64 },
    /// Scale suppressed entirely (`g = 0`), translation-only coupling.
    NoS,
}

impl NormMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            NormMode::Clip { l } | NormMode::Tanh { l } if *l <= 0.0 => Err(Error::Config {
                field: "ppo.l".into(),
                message: format!("scale bound l must be > 0, got {l}"),
            }),
            _ => Ok(()),
        }
    }

    /// Applies `g` on the tape. For `NoS` the caller skips the scale branch
    /// entirely; this returns a zero tensor of matching shape for
    /// completeness.
    pub fn apply<'t, T: Real>(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            NormMode::None => Ok(s),
            NormMode::Clip { l } => s.clip(-l, *l),
            NormMode::Tanh { l } => s.tanh()?.mul_const(*l),
            NormMode::NoS => s.mul_const(0.0),
        }
    }

    /// Plain-value `g(s)`.
    pub fn g(&self, s: f64) -> f64 {
        match self {
            NormMode::None => s,
            NormMode::Clip { l } => s.clamp(-l, *l),
            NormMode::Tanh { l } => l * s.tanh(),
            NormMode::NoS => 0.0,
        }
    }

    /// Plain-value `g'(s)`; the clip boundary counts as inside.
    pub fn g_prime(&self, s: f64) -> f64 {
        match self {
            NormMode::None => 1.0,
            NormMode::Clip { l } => {
                if s.abs() <= *l {
                    1.0
                } else {
                    0.0
                }
            }
            NormMode::Tanh { l } => {
                let t = s.tanh();
                l * (1.0 - t * t)
            }
            NormMode::NoS => 0.0,
        }
    }

    /// Per-transformed-dimension bound on `|g(s)|`, when one exists.
    pub fn per_dim_bound(&self) -> Option<f64> {
        match self {
            NormMode::None => None,
            NormMode::Clip { l } | NormMode::Tanh { l } => Some(*l),
            NormMode::NoS => Some(0.0),
        }
    }
}

/// Index masks of one coupling layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingMask {
    pub keep: Vec<usize>,
    pub transform: Vec<usize>,
}

/// Alternating odd-even masks; layer 0 keeps the even indices.
pub fn alternating_masks(action_dim: usize, layers: usize) -> Vec<CouplingMask> {
    (0..layers)
        .map(|j| {
            let keep_even = j % 2 == 0;
            let keep: Vec<usize> = (0..action_dim)
                .filter(|i| (i % 2 == 0) == keep_even)
                .collect();
            let transform: Vec<usize> = (0..action_dim)
                .filter(|i| (i % 2 == 0) != keep_even)
                .collect();
            CouplingMask { keep, transform }
        })
        .collect()
}

/// Serializable description of a flow, sufficient to rebuild it at
/// evaluation time without the original config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mode: NormMode,
    pub masks: Vec<CouplingMask>,
}

impl FlowArch {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        layers: usize,
        hidden: &[usize],
        activation: Activation,
        mode: NormMode,
    ) -> Result<Self> {
        if action_dim < 2 {
            return Err(Error::Config {
                field: "env.action_dim".into(),
                message: "coupling layers need action_dim >= 2".into(),
            });
        }
        if layers == 0 {
            return Err(Error::Config {
                field: "policy.layers".into(),
                message: "at least one coupling layer required (3+ for full expressiveness)"
                    .into(),
            });
        }
        mode.validate()?;
        Ok(FlowArch {
            obs_dim,
            action_dim,
            hidden: hidden.to_vec(),
            activation,
            mode,
            masks: alternating_masks(action_dim, layers),
        })
    }
}

struct Coupling {
    mask: CouplingMask,
    s_net: Option<MlpParams>,
    t_net: MlpParams,
}

/// A stack of state-conditioned coupling layers over a standard-normal
/// prior on R^action_dim.
pub struct FlowPolicy {
    pub arch: FlowArch,
    layers: Vec<Coupling>,
}

/// Per-layer traces of one forward pass, for diagnostics.
pub struct FlowTrace<'t, T: Real> {
    pub z: Var<'t, T>,
    pub logdet: Var<'t, T>,
    /// Raw (pre-normalization) scale outputs, `None` under `no_s`.
    pub s_raw: Vec<Option<Var<'t, T>>>,
    /// Per-layer log-determinant contributions `[B]`.
    pub layer_logdet: Vec<Var<'t, T>>,
}

/// Aggregate saturation and log-determinant telemetry for a batch.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SatStats {
    /// Fraction of scale outputs in the saturation zone: `|tanh(s)| > 0.99`
    /// for `tanh`/`none`, `|s| > l` for `clip`, zero for `no_s`.
    pub saturation: f64,
    pub mean_abs_logdet: f64,
    pub max_abs_logdet: f64,
    pub per_layer: Vec<LayerSat>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LayerSat {
    pub saturation: f64,
    pub mean_abs_logdet: f64,
    pub max_abs_logdet: f64,
}

impl FlowPolicy {
    fn spec_for(arch: &FlowArch, mask: &CouplingMask) -> Result<MlpSpec> {
        MlpSpec::new(
            mask.keep.len() + arch.obs_dim,
            &arch.hidden,
            mask.transform.len(),
            arch.activation,
            OutputInit::Zero,
        )
    }

    /// Insert freshly initialized parameters (zero-final s/t nets, so the
    /// flow starts as the identity map) and build the policy.
    pub fn init<T: Real>(arch: FlowArch, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.masks.len());
        for (j, mask) in arch.masks.iter().enumerate() {
            let spec = Self::spec_for(&arch, mask)?;
            let s_net = if matches!(arch.mode, NormMode::NoS) {
                None
            } else {
                Some(MlpParams::init(
                    &spec,
                    store,
                    &format!("actor.layer{j}.s"),
                    seed,
                )?)
            };
            let t_net = MlpParams::init(&spec, store, &format!("actor.layer{j}.t"), seed)?;
            layers.push(Coupling {
                mask: mask.clone(),
                s_net,
                t_net,
            });
        }
        Ok(FlowPolicy { arch, layers })
    }

    /// Rebuild against parameters already present in the store.
    pub fn bind<T: Real>(arch: FlowArch, store: &ParamStore<T>) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.masks.len());
        for (j, mask) in arch.masks.iter().enumerate() {
            let spec = Self::spec_for(&arch, mask)?;
            let s_net = if matches!(arch.mode, NormMode::NoS) {
                None
            } else {
                Some(MlpParams::bind(&spec, store, &format!("actor.layer{j}.s"))?)
            };
            let t_net = MlpParams::bind(&spec, store, &format!("actor.layer{j}.t"))?;
            layers.push(Coupling {
                mask: mask.clone(),
                s_net,
                t_net,
            });
        }
        Ok(FlowPolicy { arch, layers })
    }

    pub fn action_dim(&self) -> usize {
        self.arch.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.arch.obs_dim
    }

    /// Number of actor parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|c| {
                let t = c.t_net.spec.param_count();
                match &c.s_net {
                    Some(s) => t + s.spec.param_count(),
                    None => t,
                }
            })
            .sum()
    }

    /// Upper bound on the total |logdet| per sample, when the mode is
    /// bounded: Σ_j l·|transform_j|.
    pub fn logdet_bound(&self) -> Option<f64> {
        let per_dim = self.arch.mode.per_dim_bound()?;
        Some(
            self.layers
                .iter()
                .map(|c| per_dim * c.mask.transform.len() as f64)
                .sum(),
        )
    }

    fn check_shapes(&self, a: &[usize], obs: &[usize], op: &'static str) -> Result<()> {
        if a.len() != 2 || a[1] != self.arch.action_dim || obs.len() != 2
            || obs[1] != self.arch.obs_dim || a[0] != obs[0]
        {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: obs.to_vec(),
            });
        }
        Ok(())
    }

    /// Data-to-latent transform with per-layer traces. Errors name the
    /// offending layer when a non-finite value appears in verification mode.
    pub fn forward_trace<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        a: Var<'t, T>,
        obs: Var<'t, T>,
    ) -> Result<FlowTrace<'t, T>> {
        self.check_shapes(&a.shape(), &obs.shape(), "flow_forward")?;
        let batch = a.shape()[0];
        let dim = self.arch.action_dim;
        let mut cur = a;
        let mut logdet = tape.constant(Tensor::zeros(vec![batch]));
        let mut s_raw = Vec::with_capacity(self.layers.len());
        let mut layer_logdet = Vec::with_capacity(self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            let step = (|| -> Result<_> {
                let x_keep = cur.select_cols(&layer.mask.keep)?;
                let x_tr = cur.select_cols(&layer.mask.transform)?;
                let inp = x_keep.concat_last(obs)?;
                let t = layer.t_net.forward(tape, store, inp)?;
                let (y_tr, ld, raw) = match &layer.s_net {
                    Some(s_net) => {
                        let raw = s_net.forward(tape, store, inp)?;
                        let g = self.arch.mode.apply(raw)?;
                        let y = x_tr.mul(g.exp()?)?.add(t)?;
                        (y, g.sum_last()?, Some(raw))
                    }
                    None => {
                        let ld = tape.constant(Tensor::zeros(vec![batch]));
                        (x_tr.add(t)?, ld, None)
                    }
                };
                let merged = x_keep
                    .scatter_cols(&layer.mask.keep, dim)?
                    .add(y_tr.scatter_cols(&layer.mask.transform, dim)?)?;
                Ok((merged, ld, raw))
            })();
            let (merged, ld, raw) = step.map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("coupling layer {j}: {context}"),
                },
                other => other,
            })?;
            cur = merged;
            logdet = logdet.add(ld)?;
            s_raw.push(raw);
            layer_logdet.push(ld);
        }
        self.assert_logdet_bound(&logdet.value())?;
        Ok(FlowTrace {
            z: cur,
            logdet,
            s_raw,
            layer_logdet,
        })
    }

    /// Data-to-latent transform: `(z, logdet)` per sample.
    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        a: Var<'t, T>,
        obs: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let trace = self.forward_trace(tape, store, a, obs)?;
        Ok((trace.z, trace.logdet))
    }

    /// Latent-to-data transform; the exact algebraic inverse of `forward`.
    pub fn inverse<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        z: Var<'t, T>,
        obs: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.check_shapes(&z.shape(), &obs.shape(), "flow_inverse")?;
        let dim = self.arch.action_dim;
        let mut cur = z;
        for (j, layer) in self.layers.iter().enumerate().rev() {
            let step = (|| -> Result<_> {
                let y_keep = cur.select_cols(&layer.mask.keep)?;
                let y_tr = cur.select_cols(&layer.mask.transform)?;
                let inp = y_keep.concat_last(obs)?;
                let t = layer.t_net.forward(tape, store, inp)?;
                let x_tr = match &layer.s_net {
                    Some(s_net) => {
                        let raw = s_net.forward(tape, store, inp)?;
                        let g = self.arch.mode.apply(raw)?;
                        y_tr.sub(t)?.mul(g.neg()?.exp()?)?
                    }
                    None => y_tr.sub(t)?,
                };
                y_keep
                    .scatter_cols(&layer.mask.keep, dim)?
                    .add(x_tr.scatter_cols(&layer.mask.transform, dim)?)
            })();
            cur = step.map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("coupling layer {j} (inverse): {context}"),
                },
                other => other,
            })?;
        }
        Ok(cur)
    }

    /// Standard-normal log density of `z` rows: `-½Σz² - D/2·ln 2π`.
    pub fn prior_log_density<'t, T: Real>(z: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = z.shape()[1] as f64;
        z.square()?
            .sum_last()?
            .mul_const(-0.5)?
            .add_const(-0.5 * d * LN_2PI)
    }

    /// Exact log π(a|obs) per sample: prior density of the forward image
    /// plus the summed log-determinant.
    pub fn log_prob<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        a: Var<'t, T>,
        obs: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (z, logdet) = self.forward(tape, store, a, obs)?;
        Self::prior_log_density(z)?.add(logdet)
    }

    /// Hard runtime assertion: under a bounded scale mode no sample's
    /// |logdet| may ever exceed Σ_j l·|transform_j|.
    fn assert_logdet_bound<T: Real>(&self, logdet: &Tensor<T>) -> Result<()> {
        if let Some(bound) = self.logdet_bound() {
            let tol = bound * 1e-6 + 1e-5;
            for (i, &v) in logdet.data().iter().enumerate() {
                let v = v.to_f64();
                if v.is_finite() && v.abs() > bound + tol {
                    return Err(Error::Graph(format!(
                        "logdet bound violated: sample {i} has |logdet| {} > {bound}",
                        v.abs()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draw actions for an observation batch. The latent is scaled by √τ
    /// (`z ~ N(0, τI)`); the returned log-probability is always the τ=1
    /// policy density of the action, computed through `log_prob`.
    pub fn sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        obs: &Tensor<T>,
        tau: f64,
        rng: &mut Stream,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let batch = obs.rows();
        let dim = self.arch.action_dim;
        let scale = tau.max(0.0).sqrt();
        let z_data: Vec<f64> = rng.normals(batch * dim).iter().map(|v| v * scale).collect();
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_f64_slice(vec![batch, dim], &z_data)?);
        let obs_v = tape.constant(obs.clone());
        let actions = self.inverse(&tape, store, z, obs_v)?;
        let logp = self.log_prob(&tape, store, actions, obs_v)?;
        Ok((actions.value(), logp.value()))
    }

    /// Deterministic prior-mode action (`τ = 0`).
    pub fn mode_action<T: Real>(&self, store: &ParamStore<T>, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = obs.rows();
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![batch, self.arch.action_dim]));
        let obs_v = tape.constant(obs.clone());
        Ok(self.inverse(&tape, store, z, obs_v)?.value())
    }

    /// Saturation fractions and |logdet| summaries over a batch.
    pub fn saturation_stats<T: Real>(
        &self,
        store: &ParamStore<T>,
        actions: &Tensor<T>,
        obs: &Tensor<T>,
    ) -> Result<SatStats> {
        let tape = Tape::new();
        let a = tape.constant(actions.clone());
        let o = tape.constant(obs.clone());
        let trace = self.forward_trace(&tape, store, a, o)?;

        let sat_of = |s: f64| -> bool {
            match self.arch.mode {
                NormMode::Tanh { .. } | NormMode::None => s.tanh().abs() > 0.99,
                NormMode::Clip { l } => s.abs() > l,
                NormMode::NoS => false,
            }
        };

        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut sat_num = 0usize;
        let mut sat_den = 0usize;
        for (raw, ld) in trace.s_raw.iter().zip(&trace.layer_logdet) {
            let mut layer = LayerSat::default();
            if let Some(raw) = raw {
                let vals = raw.value();
                let n = vals.len();
                let hits = vals.data().iter().filter(|v| sat_of(v.to_f64())).count();
                layer.saturation = hits as f64 / n.max(1) as f64;
                sat_num += hits;
                sat_den += n;
            }
            let ld = ld.value();
            let abs: Vec<f64> = ld.data().iter().map(|v| v.to_f64().abs()).collect();
            layer.mean_abs_logdet = abs.iter().sum::<f64>() / abs.len().max(1) as f64;
            layer.max_abs_logdet = abs.iter().cloned().fold(0.0, f64::max);
            per_layer.push(layer);
        }
        let total = trace.logdet.value();
        let abs: Vec<f64> = total.data().iter().map(|v| v.to_f64().abs()).collect();
        Ok(SatStats {
            saturation: if sat_den == 0 {
                0.0
            } else {
                sat_num as f64 / sat_den as f64
            },
            mean_abs_logdet: abs.iter().sum::<f64>() / abs.len().max(1) as f64,
            max_abs_logdet: abs.iter().cloned().fold(0.0, f64::max),
            per_layer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(d: usize, layers: usize, mode: NormMode) -> FlowArch {
        FlowArch::new(4, d, layers, &[16, 16], Activation::Elu, mode).unwrap()
    }

    fn random_inputs<T: Real>(batch: usize, d: usize, obs_dim: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
        let mut rng = Stream::new(seed, "inputs", &[]);
        let a = Tensor::from_f64_slice(vec![batch, d], &rng.normals(batch * d)).unwrap();
        let o = Tensor::from_f64_slice(vec![batch, obs_dim], &rng.normals(batch * obs_dim)).unwrap();
        (a, o)
    }

    #[test]
    fn masks_alternate_and_cover() {
        let masks = alternating_masks(5, 4);
        assert_eq!(masks[0].keep, vec![0, 2, 4]);
        assert_eq!(masks[0].transform, vec![1, 3]);
        assert_eq!(masks[1].keep, vec![1, 3]);
        assert_eq!(masks[1].transform, vec![0, 2, 4]);
        for m in &masks {
            let mut all: Vec<usize> = m.keep.iter().chain(&m.transform).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..5).collect::<Vec<_>>());
            assert!((m.keep.len() as i64 - m.transform.len() as i64).abs() <= 1);
        }
    }

    #[test]
    fn normalize_scale_values() {
        let tanh = NormMode::Tanh { l: 0.5 };
        assert!((tanh.g(1.0) - 0.5 * 1.0f64.tanh()).abs() < 1e-12);
        assert!((tanh.g(1.0) - 0.380797).abs() < 1e-6);
        let clip = NormMode::Clip { l: 0.5 };
        assert_eq!(clip.g(1.0), 0.5);
        assert_eq!(NormMode::NoS.g(123.0), 0.0);
        assert_eq!(NormMode::None.g(-3.25), -3.25);
        // g' at 0 under tanh is l.
        assert!((tanh.g_prime(0.0) - 0.5).abs() < 1e-12);
        // clip is gradient-dead outside the bound.
        assert_eq!(clip.g_prime(0.7), 0.0);
        assert_eq!(clip.g_prime(0.5), 1.0);
    }

    #[test]
    fn identity_at_init() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(2, 4, NormMode::Tanh { l: 0.5 }), &mut store, 7).unwrap();
        let (a, o) = random_inputs::<f64>(8, 2, 4, 1);
        let tape = Tape::new();
        let av = tape.constant(a.clone());
        let ov = tape.constant(o);
        let (z, logdet) = flow.forward(&tape, &store, av, ov).unwrap();
        assert_eq!(z.value(), a);
        assert!(logdet.value().data().iter().all(|&v| v == 0.0));
        // log_prob at the origin for D=2 is -ln(2π).
        let tape2 = Tape::new();
        let a0 = tape2.constant(Tensor::zeros(vec![1, 2]));
        let o0 = tape2.constant(Tensor::zeros(vec![1, 4]));
        let lp = flow.log_prob(&tape2, &store, a0, o0).unwrap().value();
        assert!((lp.data()[0] - (-LN_2PI)).abs() < 1e-12);
        assert!((lp.data()[0] - (-1.837877)).abs() < 1e-6);
    }

    #[test]
    fn identity_at_init_matches_standard_normal_everywhere() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(3, 3, NormMode::Tanh { l: 0.5 }), &mut store, 3).unwrap();
        let (a, o) = random_inputs::<f64>(64, 3, 4, 9);
        let tape = Tape::new();
        let av = tape.constant(a.clone());
        let ov = tape.constant(o);
        let lp = flow.log_prob(&tape, &store, av, ov).unwrap().value();
        for i in 0..64 {
            let row = a.row(i);
            let expected: f64 = row
                .iter()
                .map(|&x| -0.5 * x * x - 0.5 * LN_2PI)
                .sum();
            assert!((lp.data()[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn bijectivity_randomized_all_modes() {
        for mode in [
            NormMode::None,
            NormMode::Clip { l: 0.5 },
            NormMode::Tanh { l: 0.5 },
            NormMode::NoS,
        ] {
            let mut store = ParamStore::<f64>::new();
            let flow = FlowPolicy::init(arch(4, 4, mode), &mut store, 11).unwrap();
            // Unbounded scales explode under large random weights (the
            // instability the bounded modes exist to prevent), so keep the
            // raw-mode randomization moderate.
            let scale = if mode == (NormMode::None) { 0.15 } else { 0.5 };
            store.randomize(5, scale);
            let (a, o) = random_inputs::<f64>(50, 4, 4, 2);
            let tape = Tape::new();
            let av = tape.constant(a.clone());
            let ov = tape.constant(o);
            let (z, _) = flow.forward(&tape, &store, av, ov).unwrap();
            let back = flow.inverse(&tape, &store, z, ov).unwrap().value();
            let err = back
                .data()
                .iter()
                .zip(a.data())
                .map(|(&x, &y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "mode {mode:?}: roundtrip error {err}");
        }
    }

    #[test]
    fn no_s_is_pure_translation() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(2, 3, NormMode::NoS), &mut store, 1).unwrap();
        store.randomize(8, 0.8);
        let (a, o) = random_inputs::<f64>(16, 2, 4, 3);
        let tape = Tape::new();
        let av = tape.constant(a);
        let ov = tape.constant(o);
        let (_, logdet) = flow.forward(&tape, &store, av, ov).unwrap();
        assert!(logdet.value().data().iter().all(|&v| v == 0.0));
        // No scale nets were created at all.
        assert!(store.id("actor.layer0.s.0.w").is_none());
        assert!(store.id("actor.layer0.t.0.w").is_some());
    }

    #[test]
    fn tanh_logdet_respects_hard_bound() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(4, 4, NormMode::Tanh { l: 0.5 }), &mut store, 2).unwrap();
        store.randomize(77, 3.0); // aggressively large weights
        let (a, o) = random_inputs::<f64>(100, 4, 4, 4);
        let tape = Tape::new();
        let av = tape.constant(a);
        let ov = tape.constant(o);
        let (_, logdet) = flow.forward(&tape, &store, av, ov).unwrap();
        let bound = flow.logdet_bound().unwrap();
        assert_eq!(bound, 0.5 * (2.0 + 2.0 + 2.0 + 2.0));
        for &v in logdet.value().data() {
            assert!(v.abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn inverse_stays_finite_at_large_latents() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(2, 4, NormMode::Tanh { l: 0.5 }), &mut store, 6).unwrap();
        store.randomize(13, 1.0);
        let mut rng = Stream::new(99, "z", &[]);
        let mut data = rng.normals(2 * 200);
        for v in &mut data {
            *v *= 6.0 / 3.0; // push components out to ~|z|=6
        }
        data[0] = 6.0;
        data[1] = -6.0;
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_f64_slice(vec![200, 2], &data).unwrap());
        let o = tape.constant(Tensor::zeros(vec![200, 4]));
        let a = flow.inverse(&tape, &store, z, o).unwrap().value();
        assert!(a.all_finite());
    }

    #[test]
    fn sample_logp_matches_log_prob() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(2, 4, NormMode::Tanh { l: 0.5 }), &mut store, 21).unwrap();
        store.randomize(3, 0.5);
        let (_, o) = random_inputs::<f64>(32, 2, 4, 5);
        let mut rng = Stream::new(1, "sample", &[]);
        let (actions, logp) = flow.sample(&store, &o, 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let av = tape.constant(actions);
        let ov = tape.constant(o);
        let expected = flow.log_prob(&tape, &store, av, ov).unwrap().value();
        for (got, want) in logp.data().iter().zip(expected.data()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_flow_samples_are_standard_normal() {
        // At init the flow is the identity, so τ=1 samples must be draws
        // from the prior: sample mean within 0.02 of 0 per dimension.
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(2, 4, NormMode::Tanh { l: 0.5 }), &mut store, 30).unwrap();
        let obs = Tensor::zeros(vec![100_000, 4]);
        let mut rng = Stream::new(8, "mc", &[]);
        let (a, _) = flow.sample(&store, &obs, 1.0, &mut rng).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..a.rows()).map(|i| a.at2(i, j)).sum::<f64>() / a.rows() as f64;
            assert!(mean.abs() < 0.02, "dim {j} mean {mean}");
        }
    }

    #[test]
    fn tau_zero_is_prior_mode_action() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(2, 4, NormMode::Tanh { l: 0.5 }), &mut store, 22).unwrap();
        store.randomize(4, 0.5);
        let (_, o) = random_inputs::<f64>(8, 2, 4, 6);
        let mut rng = Stream::new(2, "sample", &[]);
        let (a_tau0, _) = flow.sample(&store, &o, 0.0, &mut rng).unwrap();
        let a_mode = flow.mode_action(&store, &o).unwrap();
        assert_eq!(a_tau0, a_mode);
    }

    #[test]
    fn saturation_stats_zero_at_init_and_one_when_forced() {
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(2, 4, NormMode::Clip { l: 0.5 }), &mut store, 23).unwrap();
        let (a, o) = random_inputs::<f64>(32, 2, 4, 7);
        let stats = flow.saturation_stats(&store, &a, &o).unwrap();
        assert_eq!(stats.saturation, 0.0);
        assert_eq!(stats.mean_abs_logdet, 0.0);

        // Force every scale output to 10 via the final-layer bias.
        for j in 0..4 {
            let last = store
                .id(&format!("actor.layer{j}.s.2.b"))
                .expect("final bias");
            for v in store.value_mut(last).data_mut() {
                *v = 10.0;
            }
        }
        let stats = flow.saturation_stats(&store, &a, &o).unwrap();
        assert_eq!(stats.saturation, 1.0);
        assert!(stats.max_abs_logdet > 0.0);
    }

    #[test]
    fn mask_completeness_with_three_layers() {
        // With ≥3 alternating layers, perturbing any input dim changes every
        // output dim (dense Jacobian pattern).
        let mut store = ParamStore::<f64>::new();
        let flow = FlowPolicy::init(arch(4, 3, NormMode::Tanh { l: 0.5 }), &mut store, 31).unwrap();
        store.randomize(17, 0.7);
        let (a, o) = random_inputs::<f64>(1, 4, 4, 8);
        let eval = |a_data: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let av = tape.constant(Tensor::from_f64_slice(vec![1, 4], a_data).unwrap());
            let ov = tape.constant(o.clone());
            let (z, _) = flow.forward(&tape, &store, av, ov).unwrap();
            z.value().data().to_vec()
        };
        let base: Vec<f64> = a.data().to_vec();
        for i in 0..4 {
            let mut pert = base.clone();
            pert[i] += 1e-3;
            let (z0, z1) = (eval(&base), eval(&pert));
            for j in 0..4 {
                assert!(
                    (z0[j] - z1[j]).abs() > 1e-12,
                    "input dim {i} does not reach output dim {j}"
                );
            }
        }
    }
}
