//! Plain ReLU multilayer perceptrons over named parameters.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    /// `bound * tanh(raw)` per output coordinate.
    TanhScaled { bounds: Vec<f64> },
    Softplus,
}

/// Widths of an MLP: `input -> hidden[0] -> ... -> output` with ReLU between
/// layers and an optional output map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn plain(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        MlpSpec {
            input,
            hidden,
            output,
            output_activation: OutputActivation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::invalid("MLP needs at least one hidden layer"));
        }
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("MLP widths must be positive"));
        }
        if let OutputActivation::TanhScaled { bounds } = &self.output_activation {
            if bounds.len() != self.output {
                return Err(Error::invalid("tanh bounds must match the output dim"));
            }
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output));
        dims
    }

    /// He-style fan-in initialization: weights uniform on
    /// +-sqrt(6/fan_in) (variance 2/fan_in), biases zero.
    pub fn register(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha12Rng) -> Result<()> {
        self.validate()?;
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            store.insert(format!("{prefix}.w{i}"), Tensor::matrix(fan_in, fan_out, data)?)?;
            store.insert(format!("{prefix}.b{i}"), Tensor::vector(vec![0.0; fan_out]))?;
        }
        Ok(())
    }

    /// Forward pass over a (B, input) batch; returns (B, output).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        x: Value,
    ) -> Result<Value> {
        let n_layers = self.hidden.len() + 1;
        let mut h = x;
        for i in 0..n_layers {
            let w = tape.param(store, &format!("{prefix}.w{i}"))?;
            let b = tape.param(store, &format!("{prefix}.b{i}"))?;
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i + 1 < n_layers {
                h = tape.relu(h)?;
            }
        }
        match &self.output_activation {
            OutputActivation::None => Ok(h),
            OutputActivation::TanhScaled { bounds } => {
                let t = tape.tanh(h)?;
                let b = tape.constant(Tensor::vector(bounds.clone()))?;
                tape.mul(t, b)
            }
            OutputActivation::Softplus => tape.softplus(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::plain(3, vec![8], 2);
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "init");
        spec.register(&mut store, "net", &mut r).unwrap();
        for slot in 0..store.len() {
            store.tensor_at_mut(slot).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::matrix(2, 3, vec![0.4, -1.0, 2.0, 0.0, 0.3, 0.9]).unwrap(), false)
            .unwrap();
        let y = spec.forward(&mut tape, &store, "net", x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn biases_start_at_zero() {
        let spec = MlpSpec::plain(4, vec![16, 16], 2);
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, "init");
        spec.register(&mut store, "net", &mut r).unwrap();
        for name in ["net.b0", "net.b1", "net.b2"] {
            assert!(store.tensor(name).unwrap().data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn fan_in_variance_matches_he_scaling() {
        // sample variance of a wide layer close to 2 / fan_in across seeds
        let spec = MlpSpec::plain(200, vec![200], 1);
        let mut acc = 0.0;
        for seed in 0..10 {
            let mut store = ParamStore::new();
            let mut r = rng::stream(seed, "init");
            spec.register(&mut store, "net", &mut r).unwrap();
            let w = store.tensor("net.w0").unwrap().data();
            let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
            let var: f64 = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
            acc += var;
        }
        let avg = acc / 10.0;
        let target = 2.0 / 200.0;
        assert!(
            (avg - target).abs() < 0.2 * target,
            "variance {avg} vs {target}"
        );
    }

    #[test]
    fn same_seed_identical_params() {
        let spec = MlpSpec::plain(5, vec![7], 3);
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut r = rng::stream(seed, "init");
            spec.register(&mut store, "net", &mut r).unwrap();
            store.tensor("net.w0").unwrap().data().to_vec()
        };
        assert_eq!(build(42), build(42));
        assert_ne!(build(42), build(43));
    }

    #[test]
    fn tanh_bounds_hold() {
        let spec = MlpSpec {
            input: 2,
            hidden: vec![8],
            output: 2,
            output_activation: OutputActivation::TanhScaled {
                bounds: vec![5.0, 5.0],
            },
        };
        let mut store = ParamStore::new();
        let mut r = rng::stream(9, "init");
        spec.register(&mut store, "net", &mut r).unwrap();
        // inflate weights to force saturation pressure
        for slot in 0..store.len() {
            for v in store.tensor_at_mut(slot).data_mut() {
                *v *= 50.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::matrix(1, 2, vec![3.0, -7.0]).unwrap(), false)
            .unwrap();
        let y = spec.forward(&mut tape, &store, "net", x).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() <= 5.0);
        }
    }
}
