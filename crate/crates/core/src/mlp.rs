//! A small fully connected network with leaky-ReLU hidden layers and a scalar
//! output, evaluated on a flat parameter vector.
//!
//! Parameter layout is `W1, b1, W2, b2, ..., WL, bL` with each weight matrix
//! stored row-major as `[out][in]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Dot product with four independent accumulators so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Output of a forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpGrads {
    pub value: f64,
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl Mlp {
    /// `sizes` lists every layer width including input and the scalar output.
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(
            sizes.len() >= 2 && *sizes.last().unwrap() == 1,
            "network must end in one output"
        );
        assert!(
            sizes.iter().all(|&n| n > 0),
            "layer widths must be positive"
        );
        Self { sizes }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.num_params());
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    fn layer_activations(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(params.len(), self.num_params());
        debug_assert_eq!(x.len(), self.input_dim());
        let last = self.sizes.len() - 2;
        let mut acts = vec![x.to_vec()];
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_out * (n_in + 1);
            let input = &acts[l];
            let out: Vec<f64> = (0..n_out)
                .map(|j| {
                    let z = bias[j] + dot(&weights[j * n_in..(j + 1) * n_in], input);
                    if l < last && z < 0.0 {
                        LEAKY_SLOPE * z
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> f64 {
        self.layer_activations(params, x).last().unwrap()[0]
    }

    /// Value and input gradient, skipping the parameter gradient.
    pub fn input_backward(&self, params: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let acts = self.layer_activations(params, x);
        let num_layers = self.sizes.len() - 1;
        let mut offset = self.num_params();
        let mut delta = vec![1.0];
        for l in (0..num_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_out * (n_in + 1);
            if l < num_layers - 1 {
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    if *a < 0.0 {
                        *d *= LEAKY_SLOPE;
                    }
                }
            }
            let weights = &params[offset..offset + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(&weights[j * n_in..(j + 1) * n_in]) {
                    *p += dj * w;
                }
            }
            delta = prev;
        }
        (acts[num_layers][0], delta)
    }

    /// Value with gradients w.r.t. parameters and inputs.
    pub fn backward(&self, params: &[f64], x: &[f64]) -> MlpGrads {
        let acts = self.layer_activations(params, x);
        let num_layers = self.sizes.len() - 1;
        let mut grad = vec![0.0; self.num_params()];
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += w[1] * (w[0] + 1);
                Some(o)
            })
            .collect();
        // gradient w.r.t. the output of the current layer
        let mut delta = vec![1.0];
        for l in (0..num_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l < num_layers - 1 {
                // through the leaky ReLU; a post-activation is negative iff its pre-activation was
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    if *a < 0.0 {
                        *d *= LEAKY_SLOPE;
                    }
                }
            }
            let o = offsets[l];
            let input = &acts[l];
            for j in 0..n_out {
                let dj = delta[j];
                let row = &mut grad[o + j * n_in..o + (j + 1) * n_in];
                for (g, v) in row.iter_mut().zip(input) {
                    *g = dj * v;
                }
                grad[o + n_in * n_out + j] = dj;
            }
            let weights = &params[o..o + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(&weights[j * n_in..(j + 1) * n_in]) {
                    *p += dj * w;
                }
            }
            delta = prev;
        }
        MlpGrads {
            value: acts[num_layers][0],
            params: grad,
            input: delta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d <= 1e-8 {
            0.0
        } else {
            d / a.abs().max(b.abs())
        }
    }

    #[test]
    fn param_count_and_zero_network() {
        let net = Mlp::new(vec![9, 64, 64, 1]);
        assert_eq!(net.num_params(), 64 * 10 + 64 * 65 + 65);
        let zeros = vec![0.0; net.num_params()];
        assert_eq!(net.forward(&zeros, &[0.3; 9]), 0.0);
    }

    #[test]
    fn input_backward_agrees_with_full_backward() {
        let net = Mlp::new(vec![5, 7, 6, 1]);
        let params = net.init_params(3);
        let x = [0.3, -1.2, 0.0, 2.0, 0.7];
        let full = net.backward(&params, &x);
        assert_eq!(net.input_backward(&params, &x), (full.value, full.input));
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let net = Mlp::new(vec![4, 8, 1]);
        let a = net.init_params(5);
        assert_eq!(a, net.init_params(5));
        assert_ne!(a, net.init_params(6));
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a[..32].iter().all(|w| w.abs() <= limit));
        assert!(a[32..40].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = Mlp::new(vec![5, 7, 6, 1]);
        let mut params = net.init_params(1);
        // non-zero biases so both sides of the kink are exercised
        for (i, p) in params.iter_mut().enumerate() {
            *p += 0.05 * ((i % 5) as f64 - 2.0);
        }
        let x = [0.2, -0.7, 1.1, 0.0, 0.4];
        let g = net.backward(&params, &x);
        assert_eq!(g.value, net.forward(&params, &x));
        let h = 1e-6;
        for i in 0..params.len() {
            let mut up = params.clone();
            up[i] += h;
            let mut down = params.clone();
            down[i] -= h;
            let fd = (net.forward(&up, &x) - net.forward(&down, &x)) / (2.0 * h);
            assert!(
                rel_err(fd, g.params[i]) <= 1e-5,
                "param {i}: {fd} vs {}",
                g.params[i]
            );
        }
        for i in 0..x.len() {
            let mut up = x;
            up[i] += h;
            let mut down = x;
            down[i] -= h;
            let fd = (net.forward(&params, &up) - net.forward(&params, &down)) / (2.0 * h);
            assert!(rel_err(fd, g.input[i]) <= 1e-5, "input {i}");
        }
    }
}
