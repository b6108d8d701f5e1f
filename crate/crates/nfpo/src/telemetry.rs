//! Metrics rows, the gradient-factor probe behind the stability analysis,
//! and mode-coverage accounting for multi-goal evaluations.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor};
use crate::flow::FlowPolicy;
use crate::Result;

/// Aggregates of one epoch/minibatch update pass.
#[derive(Clone, Debug, Default)]
pub struct UpdateMetrics {
    pub loss_pi: f64,
    pub loss_v: f64,
    pub entropy: f64,
    pub entropy_steps: usize,
    pub approx_kl: f64,
    pub lr: f64,
    pub grad_steps: u64,
    pub skipped_steps: u64,
    pub grad_norm: f64,
    pub instability: bool,
}

/// One JSON-lines record per update. Every row carries every field; the
/// instability flag is sticky once set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub update: u64,
    pub env_steps: u64,
    pub lr: f64,
    pub loss_pi: f64,
    pub loss_v: f64,
    pub entropy: Option<f64>,
    pub approx_kl: f64,
    pub mean_logdet: f64,
    pub max_logdet: f64,
    pub saturation: f64,
    pub ep_return_mean: Option<f64>,
    pub ep_len_mean: Option<f64>,
    pub instability_flag: bool,
}

/// Append-only JSONL writer owned by a run.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| crate::Error::Checkpoint(format!(
            "metrics row serialization: {e}"
        )))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Distributional summary of one probed quantity.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    fn of(mut values: Vec<f64>) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        // total_cmp: blown-up parameter sets can push NaN through the
        // forward pass and the probe must still summarize them.
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let p95 = values[((n as f64 * 0.95) as usize).min(n - 1)];
        let max = values[n - 1];
        Summary { mean, p95, max }
    }
}

/// Per-layer magnitudes of the three per-sample gradient factors of the
/// scale path: `exp(g(s))`, `g'(s)`, and `‖∇_θ s‖` over that layer's scale
/// network parameters. Under hard clipping the dead fraction (`g' = 0`) is
/// reported as well.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerFactors {
    pub layer: usize,
    pub exp_g: Summary,
    pub g_prime: Summary,
    pub grad_norm: Summary,
    pub dead_fraction: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub update: u64,
    pub samples: usize,
    pub layers: Vec<LayerFactors>,
}

/// Probe the gradient-factor decomposition on up to `max_samples` points of
/// a batch. Each sample costs one backward pass per layer, so the budget is
/// kept small.
pub fn gradient_factor_probe<T: Real>(
    flow: &FlowPolicy,
    store: &mut ParamStore<T>,
    actions: &Tensor<T>,
    obs: &Tensor<T>,
    max_samples: usize,
    update: u64,
) -> Result<ProbeReport> {
    let mode = flow.arch.mode;
    let n_layers = flow.arch.masks.len();
    let samples = actions.rows().min(max_samples);
    let mut exp_g: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut g_prime: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut grad_norm: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut dead: Vec<usize> = vec![0; n_layers];
    let mut counts: Vec<usize> = vec![0; n_layers];

    // Parameter ids of each layer's scale net, for the norm restriction.
    let layer_param_ids: Vec<Vec<crate::autodiff::ParamId>> = (0..n_layers)
        .map(|j| {
            let prefix = format!("actor.layer{j}.s.");
            store
                .iter()
                .filter(|(name, _)| name.starts_with(&prefix))
                .map(|(_, id)| id)
                .collect()
        })
        .collect();

    for i in 0..samples {
        let a_row = Tensor::new(
            vec![1, actions.cols()],
            actions.row(i).to_vec(),
        )?;
        let o_row = Tensor::new(vec![1, obs.cols()], obs.row(i).to_vec())?;
        let tape = Tape::new();
        let av = tape.constant(a_row);
        let ov = tape.constant(o_row);
        let trace = flow.forward_trace(&tape, store, av, ov)?;
        for (j, raw) in trace.s_raw.iter().enumerate() {
            let Some(raw) = raw else { continue };
            let vals = raw.value();
            for &s in vals.data() {
                let s = s.to_f64();
                let eg = mode.g(s).exp();
                // Bounded modes cap exp(g) inside [e^-l, e^l]; any escape is
                // an implementation fault, not telemetry.
                if let Some(l) = mode.per_dim_bound() {
                    let (lo, hi) = ((-l).exp(), l.exp());
                    if eg < lo - 1e-9 || eg > hi + 1e-9 {
                        return Err(crate::Error::Graph(format!(
                            "exp(g(s)) = {eg} outside [{lo}, {hi}] in layer {j}"
                        )));
                    }
                }
                exp_g[j].push(eg);
                let gp = mode.g_prime(s);
                g_prime[j].push(gp);
                if gp == 0.0 {
                    dead[j] += 1;
                }
                counts[j] += 1;
            }
            // ‖∇_θ s‖ over this layer's scale-net parameters.
            store.zero_grads();
            let root = raw.sum_all()?;
            tape.backward(root, store)?;
            let mut acc = 0.0f64;
            for &id in &layer_param_ids[j] {
                for &g in store.grad(id).data() {
                    let g = g.to_f64();
                    acc += g * g;
                }
            }
            grad_norm[j].push(acc.sqrt());
        }
    }
    store.zero_grads();

    let layers = (0..n_layers)
        .map(|j| LayerFactors {
            layer: j,
            exp_g: Summary::of(exp_g[j].clone()),
            g_prime: Summary::of(g_prime[j].clone()),
            grad_norm: Summary::of(grad_norm[j].clone()),
            dead_fraction: match mode {
                crate::flow::NormMode::Clip { .. } => {
                    Some(dead[j] as f64 / counts[j].max(1) as f64)
                }
                _ => None,
            },
        })
        .collect();
    Ok(ProbeReport {
        update,
        samples,
        layers,
    })
}

/// Per-goal success counts, their entropy, and how many goals clear the
/// coverage threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub counts: Vec<usize>,
    pub episodes: usize,
    pub coverage: usize,
    pub count_entropy: f64,
}

/// Count terminal goals over completed episodes. `goal_ids[e]` is the goal
/// region an episode ended in, `None` for failures.
pub fn mode_coverage(goal_ids: &[Option<usize>], n_goals: usize, threshold: usize) -> ModeCoverage {
    let mut counts = vec![0usize; n_goals];
    for g in goal_ids.iter().flatten() {
        if *g < n_goals {
            counts[*g] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let count_entropy = if total == 0 {
        0.0
    } else {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    };
    ModeCoverage {
        counts: counts.clone(),
        episodes: goal_ids.len(),
        coverage: counts.iter().filter(|&&c| c >= threshold).count(),
        count_entropy,
    }
}
