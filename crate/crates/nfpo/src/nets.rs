//! Multi-layer perceptrons used as scale/translation networks, policy mean
//! and value function.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Real, Tensor, Var};
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Elu,
}

/// How the final linear layer is initialized. Hidden layers are always
/// orthogonal with gain sqrt(2), biases zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputInit {
    /// Zero weights and bias; with this, a coupling layer starts as the
    /// identity map.
    Zero,
    /// Orthogonal with the given gain.
    Orthogonal { gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub output_init: OutputInit,
}

impl MlpSpec {
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        output_init: OutputInit,
    ) -> Result<Self> {
        for (name, dim) in [("input", input), ("output", output)]
            .into_iter()
            .chain(hidden.iter().map(|&h| ("hidden", h)))
        {
            if dim == 0 {
                return Err(Error::Config {
                    field: format!("mlp.{name}"),
                    message: "dimensions must be >= 1".into(),
                });
            }
        }
        Ok(MlpSpec {
            input,
            hidden: hidden.to_vec(),
            output,
            activation,
            output_init,
        })
    }

    /// `(in, out)` per linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output));
        dims
    }

    /// Closed-form parameter count: Σ (inᵢ + 1)·outᵢ.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Parameter ids of one MLP, bound once against a store.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

/// Sample an orthogonal `[rows, cols]` matrix scaled by `gain`, via modified
/// Gram-Schmidt on the larger side.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Stream) -> Vec<f64> {
    let transposed = rows < cols;
    let (r, c) = if transposed { (cols, rows) } else { (rows, cols) };
    // Column-major scratch: q[j] is a column of length r.
    let mut q: Vec<Vec<f64>> = (0..c).map(|_| rng.normals(r)).collect();
    for j in 0..c {
        for k in 0..j {
            let dot: f64 = q[j].iter().zip(&q[k]).map(|(a, b)| a * b).sum();
            for i in 0..r {
                q[j][i] -= dot * q[k][i];
            }
        }
        let norm: f64 = q[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Degenerate draw; fall back to a unit basis vector.
            for (i, x) in q[j].iter_mut().enumerate() {
                *x = if i == j % r { 1.0 } else { 0.0 };
            }
        } else {
            for x in &mut q[j] {
                *x /= norm;
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if transposed { q[i][j] } else { q[j][i] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}

impl MlpParams {
    /// Insert freshly initialized parameters under `{prefix}.{k}.{w|b}` and
    /// bind them. Hidden layers get orthogonal(√2) weights; the final layer
    /// follows the spec's `output_init`.
    pub fn init<T: Real>(
        spec: &MlpSpec,
        store: &mut ParamStore<T>,
        prefix: &str,
        seed: u64,
    ) -> Result<Self> {
        let dims = spec.layer_dims();
        let last = dims.len() - 1;
        let mut layers = Vec::with_capacity(dims.len());
        for (k, &(din, dout)) in dims.iter().enumerate() {
            let w_name = format!("{prefix}.{k}.w");
            let b_name = format!("{prefix}.{k}.b");
            let w_data = if k == last {
                match spec.output_init {
                    OutputInit::Zero => vec![0.0; din * dout],
                    OutputInit::Orthogonal { gain } => {
                        let mut rng = Stream::new(seed, "init", &[hash_name(&w_name)]);
                        orthogonal(din, dout, gain, &mut rng)
                    }
                }
            } else {
                let mut rng = Stream::new(seed, "init", &[hash_name(&w_name)]);
                orthogonal(din, dout, std::f64::consts::SQRT_2, &mut rng)
            };
            let w = store.insert(&w_name, Tensor::from_f64_slice(vec![din, dout], &w_data)?)?;
            let b = store.insert(&b_name, Tensor::zeros(vec![dout]))?;
            layers.push((w, b));
        }
        Ok(MlpParams {
            spec: spec.clone(),
            layers,
        })
    }

    /// Bind to already-inserted parameters (checkpoint restore).
    pub fn bind<T: Real>(spec: &MlpSpec, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let dims = spec.layer_dims();
        let mut layers = Vec::with_capacity(dims.len());
        for (k, &(din, dout)) in dims.iter().enumerate() {
            let w_name = format!("{prefix}.{k}.w");
            let b_name = format!("{prefix}.{k}.b");
            let w = store
                .id(&w_name)
                .ok_or_else(|| Error::ArchMismatch(format!("missing parameter {w_name}")))?;
            let b = store
                .id(&b_name)
                .ok_or_else(|| Error::ArchMismatch(format!("missing parameter {b_name}")))?;
            if store.value(w).shape() != [din, dout] || store.value(b).shape() != [dout] {
                return Err(Error::ArchMismatch(format!(
                    "parameter {w_name} has shape {:?}, spec wants [{din}, {dout}]",
                    store.value(w).shape()
                )));
            }
            layers.push((w, b));
        }
        Ok(MlpParams {
            spec: spec.clone(),
            layers,
        })
    }

    /// Batch forward: `x` is `[B, input]`, result `[B, output]`.
    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.spec.input {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: shape,
                rhs: vec![self.spec.input],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = h.matmul(wv)?.add(bv)?;
            if k < last {
                h = match self.spec.activation {
                    Activation::Tanh => h.tanh()?,
                    Activation::Elu => h.elu()?,
                };
            }
        }
        Ok(h)
    }
}

use crate::autodiff::Tape;

fn hash_name(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in name.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(input: usize, hidden: &[usize], output: usize) -> MlpSpec {
        MlpSpec::new(input, hidden, output, Activation::Elu, OutputInit::Zero).unwrap()
    }

    #[test]
    fn param_count_closed_form() {
        let s = spec(3, &[64, 64], 2);
        assert_eq!(s.param_count(), 4 * 64 + 65 * 64 + 65 * 2);
        let mut store = ParamStore::<f64>::new();
        MlpParams::init(&s, &mut store, "net", 1).unwrap();
        assert_eq!(store.scalar_count(), s.param_count());
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let s = spec(3, &[16], 2);
        let mut store = ParamStore::<f64>::new();
        let net = MlpParams::init(&s, &mut store, "net", 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 3, vec![0.3; 12]).unwrap());
        let y = net.forward(&tape, &store, x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_identity_layer_applies_activation_only() {
        // 0 hidden layers: output = x @ W + b with W orthogonal; force W = I.
        let s = MlpSpec::new(
            2,
            &[],
            2,
            Activation::Tanh,
            OutputInit::Orthogonal { gain: 1.0 },
        )
        .unwrap();
        let mut store = ParamStore::<f64>::new();
        let net = MlpParams::init(&s, &mut store, "net", 1).unwrap();
        let w = store.id("net.0.w").unwrap();
        *store.value_mut(w) = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.25, -0.75]).unwrap());
        let y = net.forward(&tape, &store, x).unwrap().value();
        // No activation on the output layer: y = x exactly.
        assert_eq!(y.data(), &[0.25, -0.75]);
    }

    #[test]
    fn random_two_by_64_net_finite_and_grad_checks() {
        let s = MlpSpec::new(
            3,
            &[64, 64],
            2,
            Activation::Elu,
            OutputInit::Orthogonal { gain: 1.0 },
        )
        .unwrap();
        let mut store = ParamStore::<f64>::new();
        let net = MlpParams::init(&s, &mut store, "net", 17).unwrap();
        let mut rng = Stream::new(23, "x", &[]);
        let x = Tensor::from_f64_slice(vec![32, 3], &rng.normals(96)).unwrap();
        store.zero_grads();
        {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = net.forward(&tape, &store, xv).unwrap();
            assert!(y.value().all_finite());
            let loss = y.square().unwrap().mean_all().unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
        let worst = crate::verify::max_grad_rel_error(&mut store, 1e-5, |s| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = net.forward(&tape, s, xv)?;
            Ok(y.square()?.mean_all()?.value().item())
        })
        .unwrap();
        assert!(worst < 1e-4, "grad check {worst}");
    }

    #[test]
    fn same_seed_same_params_different_seed_differs() {
        let s = spec(4, &[8], 3);
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let mut c = ParamStore::<f64>::new();
        MlpParams::init(&s, &mut a, "net", 42).unwrap();
        MlpParams::init(&s, &mut b, "net", 42).unwrap();
        MlpParams::init(&s, &mut c, "net", 43).unwrap();
        let id = a.id("net.0.w").unwrap();
        assert_eq!(a.value(id), b.value(id));
        assert_ne!(a.value(id), c.value(id));
    }

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = Stream::new(9, "t", &[]);
        let w = orthogonal(16, 8, 1.0, &mut rng);
        for j in 0..8 {
            for k in 0..=j {
                let dot: f64 = (0..16).map(|i| w[i * 8 + j] * w[i * 8 + k]).sum();
                let expected = if j == k { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10, "col {j}·{k} = {dot}");
            }
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let s = spec(3, &[8], 2);
        let mut store = ParamStore::<f64>::new();
        let net = MlpParams::init(&s, &mut store, "net", 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 5, vec![0.0; 20]).unwrap());
        assert!(net.forward(&tape, &store, x).is_err());
    }
}
