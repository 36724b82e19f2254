//! Multi-label classification head: context gating, a per-label mixture of logistic
//! experts, and an optional second gating block over the label probabilities.
//!
//! ```text
//! y   = sigmoid(W_in x + b_in) ⊙ x                         (input gating)
//! p_c = Σ_e softmax_e(G_c y + g_c)_e · sigmoid(A_ce · y + a_ce)
//! q   = sigmoid(W_out p + b_out) ⊙ p                       (output gating)
//! ```

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, softmax_into, Matrix};
use crate::params::Params;
use crate::rng::{self, Rng};

/// Probability clamp used by [`bce_loss`].
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub experts: usize,
    pub input_gating: bool,
    pub output_gating: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { experts: 2, input_gating: true, output_gating: true }
    }
}

/// Per-label probabilities, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub config: HeadConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    /// F×F and F; empty when input gating is off.
    pub in_gate_w: Matrix,
    pub in_gate_b: Vec<f64>,
    /// (C·E)×F expert-gate weights, row `c·E + e`.
    pub mix_w: Matrix,
    pub mix_b: Vec<f64>,
    /// (C·E)×F expert weights, row `c·E + e`.
    pub expert_w: Matrix,
    pub expert_b: Vec<f64>,
    /// C×C and C; empty when output gating is off.
    pub out_gate_w: Matrix,
    pub out_gate_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    input: Vec<f64>,
    in_gate: Vec<f64>,
    gated: Vec<f64>,
    mix: Vec<f64>,
    experts: Vec<f64>,
    moe: Vec<f64>,
    out_gate: Vec<f64>,
}

impl ClassifierHead {
    /// All-zero head with the given layout.
    pub fn zeros(input_dim: usize, num_classes: usize, config: HeadConfig) -> Result<Self> {
        if config.experts == 0 {
            return Err(Error::config("need at least one expert"));
        }
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        let (f, c, e) = (input_dim, num_classes, config.experts);
        let gi = if config.input_gating { f } else { 0 };
        let go = if config.output_gating { c } else { 0 };
        Ok(Self {
            config,
            input_dim: f,
            num_classes: c,
            in_gate_w: Matrix::zeros(gi, gi),
            in_gate_b: vec![0.0; gi],
            mix_w: Matrix::zeros(c * e, f),
            mix_b: vec![0.0; c * e],
            expert_w: Matrix::zeros(c * e, f),
            expert_b: vec![0.0; c * e],
            out_gate_w: Matrix::zeros(go, go),
            out_gate_b: vec![0.0; go],
        })
    }

    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn random(input_dim: usize, num_classes: usize, config: HeadConfig, rng: &mut Rng) -> Result<Self> {
        let mut h = Self::zeros(input_dim, num_classes, config)?;
        let sf = 1.0 / (input_dim as f64).sqrt();
        let sc = 1.0 / (num_classes as f64).sqrt();
        for (m, s) in [(&mut h.in_gate_w, sf), (&mut h.mix_w, sf), (&mut h.expert_w, sf), (&mut h.out_gate_w, sc)] {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&rng::normal_vec(rng, n, s));
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Prediction, HeadCache)> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: x.len() });
        }
        let e = self.config.experts;
        let (in_gate, gated) = if self.config.input_gating {
            let g: Vec<f64> =
                (0..self.input_dim).map(|i| sigmoid(dot(self.in_gate_w.row(i), x) + self.in_gate_b[i])).collect();
            let y = g.iter().zip(x).map(|(g, x)| g * x).collect();
            (g, y)
        } else {
            (Vec::new(), x.to_vec())
        };
        let ce = self.num_classes * e;
        let mut mix = vec![0.0; ce];
        let mut experts = vec![0.0; ce];
        let mut moe = vec![0.0; self.num_classes];
        let mut logits = vec![0.0; e];
        for c in 0..self.num_classes {
            for j in 0..e {
                let r = c * e + j;
                logits[j] = dot(self.mix_w.row(r), &gated) + self.mix_b[r];
                experts[r] = sigmoid(dot(self.expert_w.row(r), &gated) + self.expert_b[r]);
            }
            softmax_into(&logits, &mut mix[c * e..(c + 1) * e]);
            moe[c] = (0..e).map(|j| mix[c * e + j] * experts[c * e + j]).sum();
        }
        let (out_gate, out) = if self.config.output_gating {
            let g: Vec<f64> = (0..self.num_classes)
                .map(|c| sigmoid(dot(self.out_gate_w.row(c), &moe) + self.out_gate_b[c]))
                .collect();
            let q = g.iter().zip(&moe).map(|(g, p)| g * p).collect();
            (g, q)
        } else {
            (Vec::new(), moe.clone())
        };
        let cache = HeadCache { input: x.to_vec(), in_gate, gated, mix, experts, moe, out_gate };
        Ok((Prediction(out), cache))
    }

    /// Gradients of a scalar loss given `d_out = ∂L/∂q`; returns parameter gradients
    /// (same layout as `self`) and `∂L/∂x`.
    pub fn backward(&self, cache: &HeadCache, d_out: &[f64]) -> Result<(ClassifierHead, Vec<f64>)> {
        if d_out.len() != self.num_classes {
            return Err(Error::DimensionMismatch { expected: self.num_classes, got: d_out.len() });
        }
        let mut g = Self::zeros(self.input_dim, self.num_classes, self.config)?;
        let e = self.config.experts;

        let d_moe: Vec<f64> = if self.config.output_gating {
            let mut d_p: Vec<f64> = (0..self.num_classes).map(|c| d_out[c] * cache.out_gate[c]).collect();
            for c in 0..self.num_classes {
                let s = cache.out_gate[c];
                let d_pre = d_out[c] * cache.moe[c] * s * (1.0 - s);
                if d_pre == 0.0 {
                    continue;
                }
                g.out_gate_b[c] = d_pre;
                axpy(d_pre, &cache.moe, g.out_gate_w.row_mut(c));
                axpy(d_pre, self.out_gate_w.row(c), &mut d_p);
            }
            d_p
        } else {
            d_out.to_vec()
        };

        let mut d_gated = vec![0.0; self.input_dim];
        for c in 0..self.num_classes {
            let dp = d_moe[c];
            if dp == 0.0 {
                continue;
            }
            for j in 0..e {
                let r = c * e + j;
                let pi = cache.mix[r];
                let s = cache.experts[r];
                let d_expert = dp * pi * s * (1.0 - s);
                let d_mix = dp * pi * (s - cache.moe[c]);
                g.expert_b[r] = d_expert;
                g.mix_b[r] = d_mix;
                axpy(d_expert, &cache.gated, g.expert_w.row_mut(r));
                axpy(d_mix, &cache.gated, g.mix_w.row_mut(r));
                axpy(d_expert, self.expert_w.row(r), &mut d_gated);
                axpy(d_mix, self.mix_w.row(r), &mut d_gated);
            }
        }

        let d_x = if self.config.input_gating {
            let mut d_x: Vec<f64> = d_gated.iter().zip(&cache.in_gate).map(|(d, s)| d * s).collect();
            for i in 0..self.input_dim {
                let s = cache.in_gate[i];
                let d_pre = d_gated[i] * cache.input[i] * s * (1.0 - s);
                if d_pre == 0.0 {
                    continue;
                }
                g.in_gate_b[i] = d_pre;
                axpy(d_pre, &cache.input, g.in_gate_w.row_mut(i));
                axpy(d_pre, self.in_gate_w.row(i), &mut d_x);
            }
            d_x
        } else {
            d_gated
        };
        Ok((g, d_x))
    }
}

impl Params for ClassifierHead {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("head.in_gate_w", self.in_gate_w.as_slice()),
            ("head.in_gate_b", &self.in_gate_b),
            ("head.mix_w", self.mix_w.as_slice()),
            ("head.mix_b", &self.mix_b),
            ("head.expert_w", self.expert_w.as_slice()),
            ("head.expert_b", &self.expert_b),
            ("head.out_gate_w", self.out_gate_w.as_slice()),
            ("head.out_gate_b", &self.out_gate_b),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("head.in_gate_w", self.in_gate_w.as_mut_slice()),
            ("head.in_gate_b", &mut self.in_gate_b),
            ("head.mix_w", self.mix_w.as_mut_slice()),
            ("head.mix_b", &mut self.mix_b),
            ("head.expert_w", self.expert_w.as_mut_slice()),
            ("head.expert_b", &mut self.expert_b),
            ("head.out_gate_w", self.out_gate_w.as_mut_slice()),
            ("head.out_gate_b", &mut self.out_gate_b),
        ]
    }
}

pub fn forward_head(head: &ClassifierHead, code: &[f64]) -> Result<Prediction> {
    head.forward(code).map(|(p, _)| p)
}

/// Multi-hot target vector.
pub fn targets(labels: &[u32], num_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; num_classes];
    for &l in labels {
        t[l as usize] = 1.0;
    }
    t
}

/// Mean per-label binary cross-entropy and its gradient w.r.t. the probabilities.
///
/// Probabilities are clamped to `[ε, 1-ε]`; the gradient is zero where the clamp is
/// active.
pub fn bce_loss(pred: &[f64], labels: &[u32]) -> (f64, Vec<f64>) {
    let c = pred.len();
    let y = targets(labels, c);
    let mut loss = 0.0;
    let mut grad = vec![0.0; c];
    for i in 0..c {
        let raw = pred[i];
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln();
        if raw > PROB_EPS && raw < 1.0 - PROB_EPS {
            grad[i] = (-y[i] / p + (1.0 - y[i]) / (1.0 - p)) / c as f64;
        }
    }
    (loss / c as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight loop over the definition, used as an oracle.
    fn reference(h: &ClassifierHead, x: &[f64]) -> Vec<f64> {
        let f = h.input_dim;
        let e = h.config.experts;
        let mut y = x.to_vec();
        if h.config.input_gating {
            for i in 0..f {
                let mut a = h.in_gate_b[i];
                for j in 0..f {
                    a += h.in_gate_w[(i, j)] * x[j];
                }
                y[i] = x[i] / (1.0 + (-a).exp());
            }
        }
        let mut p = vec![0.0; h.num_classes];
        for c in 0..h.num_classes {
            let mut z = vec![0.0; e];
            let mut s = vec![0.0; e];
            for k in 0..e {
                let r = c * e + k;
                z[k] = h.mix_b[r];
                let mut a = h.expert_b[r];
                for j in 0..f {
                    z[k] += h.mix_w[(r, j)] * y[j];
                    a += h.expert_w[(r, j)] * y[j];
                }
                s[k] = 1.0 / (1.0 + (-a).exp());
            }
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            p[c] = (0..e).map(|k| z[k].exp() / norm * s[k]).sum();
        }
        if h.config.output_gating {
            let q = p.clone();
            for c in 0..h.num_classes {
                let mut a = h.out_gate_b[c];
                for j in 0..h.num_classes {
                    a += h.out_gate_w[(c, j)] * q[j];
                }
                p[c] = q[c] / (1.0 + (-a).exp());
            }
        }
        p
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = rng::seeded(11);
        for cfg in [
            HeadConfig::default(),
            HeadConfig { experts: 3, input_gating: false, output_gating: true },
            HeadConfig { experts: 1, input_gating: true, output_gating: false },
        ] {
            let h = ClassifierHead::random(6, 4, cfg, &mut rng).unwrap();
            let x = rng::normal_vec(&mut rng, 6, 1.0);
            let p = forward_head(&h, &x).unwrap();
            for (a, b) in p.0.iter().zip(reference(&h, &x)) {
                assert!((a - b).abs() < 1e-14);
            }
            assert!(p.0.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn saturated_gate_is_identity() {
        let mut rng = rng::seeded(12);
        let cfg = HeadConfig { experts: 2, input_gating: true, output_gating: false };
        let mut h = ClassifierHead::random(5, 3, cfg, &mut rng).unwrap();
        h.in_gate_w.as_mut_slice().fill(0.0);
        h.in_gate_b.fill(50.0);
        let x = rng::normal_vec(&mut rng, 5, 1.0);
        let (_, cache) = h.forward(&x).unwrap();
        for (a, b) in cache.gated.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_expert_is_logistic() {
        let mut rng = rng::seeded(13);
        let cfg = HeadConfig { experts: 1, input_gating: false, output_gating: false };
        let h = ClassifierHead::random(4, 2, cfg, &mut rng).unwrap();
        let x = rng::normal_vec(&mut rng, 4, 1.0);
        let p = forward_head(&h, &x).unwrap();
        for c in 0..2 {
            assert_eq!(p.0[c], sigmoid(dot(h.expert_w.row(c), &x) + h.expert_b[c]));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let h = ClassifierHead::zeros(3, 2, HeadConfig::default()).unwrap();
        assert!(matches!(h.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { expected: 3, got: 2 })));
        assert!(ClassifierHead::zeros(3, 2, HeadConfig { experts: 0, ..HeadConfig::default() }).is_err());
    }

    #[test]
    fn bce_values() {
        let (l, _) = bce_loss(&[0.5, 0.5, 0.5], &[1]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, g) = bce_loss(&[1.0 - PROB_EPS, PROB_EPS], &[0]);
        assert!(l > 0.0 && l < 2e-7);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = rng::seeded(14);
        let h = ClassifierHead::random(5, 3, HeadConfig::default(), &mut rng).unwrap();
        let x = rng::normal_vec(&mut rng, 5, 1.0);
        let labels = [0u32, 2];
        let loss = |h: &ClassifierHead, x: &[f64]| bce_loss(&forward_head(h, x).unwrap().0, &labels).0;
        let (p, cache) = h.forward(&x).unwrap();
        let (_, d_out) = bce_loss(&p.0, &labels);
        let (g, d_x) = h.backward(&cache, &d_out).unwrap();
        let step = 1e-5;
        let check = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-6;
        let gflat = g.flatten();
        let mut offset = 0;
        for (bi, (_, block)) in h.blocks().iter().enumerate() {
            for i in 0..block.len() {
                let mut hp = h.clone();
                let mut hm = h.clone();
                hp.blocks_mut()[bi].1[i] += step;
                hm.blocks_mut()[bi].1[i] -= step;
                let num = (loss(&hp, &x) - loss(&hm, &x)) / (2.0 * step);
                assert!(check(gflat[offset + i], num), "block {bi} index {i}: {} vs {num}", gflat[offset + i]);
            }
            offset += block.len();
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let num = (loss(&h, &xp) - loss(&h, &xm)) / (2.0 * step);
            assert!(check(d_x[i], num));
        }
    }
}
