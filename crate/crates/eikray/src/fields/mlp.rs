//! Forward evaluation of an MLP-backed scalar field.
//!
//! Six linear layers with 64 hidden units, softplus(beta = 5) activations, a
//! skip connection concatenating the encoded input to the third layer's
//! activation, and sinusoidal positional encoding with five frequencies.
//! Evaluation only; the learnable IoR path uses the raw grid instead.

use crate::Vec3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const HIDDEN: usize = 64;
pub const FREQUENCIES: usize = 5;
pub const ACTIVATION_BETA: f64 = 5.0;

/// Encoded input: raw coordinates plus sin/cos pairs per frequency.
pub const ENCODED_DIM: usize = 3 + 3 * 2 * FREQUENCIES;

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weights: Vec<f64>, // out_dim x in_dim, row-major
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn xavier_uniform(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in &mut layer.weights {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_dim);
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<LinearLayer>,
}

impl MlpParams {
    /// Layer shapes: enc -> 64 -> 64 -> 64, concat(enc) -> 64 -> 64 -> 1.
    pub fn layer_dims() -> [(usize, usize); 6] {
        [
            (ENCODED_DIM, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN + ENCODED_DIM, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, 1),
        ]
    }

    pub fn zeros() -> Self {
        MlpParams {
            layers: Self::layer_dims()
                .iter()
                .map(|&(i, o)| LinearLayer::zeros(i, o))
                .collect(),
        }
    }

    pub fn xavier_seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpParams {
            layers: Self::layer_dims()
                .iter()
                .map(|&(i, o)| LinearLayer::xavier_uniform(i, o, &mut rng))
                .collect(),
        }
    }
}

#[inline]
fn softplus_beta(x: f64) -> f64 {
    let bx = ACTIVATION_BETA * x;
    if bx > 30.0 {
        x
    } else if bx < -30.0 {
        bx.exp() / ACTIVATION_BETA
    } else {
        bx.exp().ln_1p() / ACTIVATION_BETA
    }
}

fn encode(p: Vec3, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&[p.x, p.y, p.z]);
    for f in 0..FREQUENCIES {
        let scale = (1u64 << f) as f64 * std::f64::consts::PI;
        for a in 0..3 {
            out.push((scale * p[a]).sin());
            out.push((scale * p[a]).cos());
        }
    }
}

/// Deterministic forward evaluation of the field at p.
pub fn mlp_field_eval(params: &MlpParams, p: Vec3) -> f64 {
    let mut enc = Vec::with_capacity(ENCODED_DIM);
    encode(p, &mut enc);
    let mut cur = enc.clone();
    let mut next = Vec::with_capacity(HIDDEN + ENCODED_DIM);
    for (i, layer) in params.layers.iter().enumerate() {
        layer.apply(&cur, &mut next);
        let last = i + 1 == params.layers.len();
        if !last {
            for v in &mut next {
                *v = softplus_beta(*v);
            }
        }
        std::mem::swap(&mut cur, &mut next);
        // Skip connection: encoded input joins the third layer's activation.
        if i == 2 {
            cur.extend_from_slice(&enc);
        }
    }
    cur[0]
}

/// Central-difference spatial gradient with step 1e-4 in world units.
pub fn mlp_field_gradient(params: &MlpParams, p: Vec3) -> Vec3 {
    let h = 1e-4;
    let mut g = Vec3::zeros();
    for a in 0..3 {
        let mut hi = p;
        let mut lo = p;
        hi[a] += h;
        lo[a] -= h;
        g[a] = (mlp_field_eval(params, hi) - mlp_field_eval(params, lo)) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let params = MlpParams::zeros();
        assert_eq!(mlp_field_eval(&params, Vec3::new(0.3, -0.2, 0.9)), 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let params = MlpParams::xavier_seeded(7);
        let p = Vec3::new(0.11, 0.52, -0.37);
        let a = mlp_field_eval(&params, p);
        let b = mlp_field_eval(&params, p);
        assert_eq!(a.to_bits(), b.to_bits());
        let again = MlpParams::xavier_seeded(7);
        assert_eq!(mlp_field_eval(&again, p).to_bits(), a.to_bits());
    }

    #[test]
    fn finite_difference_gradient_is_step_consistent() {
        let params = MlpParams::xavier_seeded(3);
        let p = Vec3::new(0.2, 0.4, 0.1);
        for a in 0..3 {
            let fd = |h: f64| {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                (mlp_field_eval(&params, hi) - mlp_field_eval(&params, lo)) / (2.0 * h)
            };
            let g3 = fd(1e-3);
            let g4 = fd(1e-4);
            assert!(
                (g3 - g4).abs() <= 0.01 * g4.abs().max(1e-6),
                "axis {a}: {g3} vs {g4}"
            );
        }
    }

    #[test]
    fn skip_connection_shapes_hold() {
        let params = MlpParams::xavier_seeded(1);
        assert_eq!(params.layers[3].in_dim, HIDDEN + ENCODED_DIM);
        // Would panic on a dimension mismatch.
        mlp_field_eval(&params, Vec3::zeros());
    }
}
