//! The control field `V_ξ : R^m → R^m` on parameter space,
//!
//! ```text
//! V_ξ(θ) = φˢ(θ) · (φʳ(θ) + φᵉ(θ) ⊙ θ)
//! ```
//!
//! with a scalar sigmoid gate `φˢ`, a ReLU residual network `φʳ` and a ReLU
//! feed-forward network `φᵉ`, all of constant width. Parameters are stored
//! flat in the order gate, residual, expansion; dense layers are row-major
//! weights followed by biases.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_f64, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlNetSpec {
    /// Input and output dimension `m`.
    pub dim: usize,
    pub width: usize,
    /// Hidden layers of the gate and expansion nets; residual blocks of `φʳ`.
    pub depth: usize,
}

impl ControlNetSpec {
    pub fn new(dim: usize, width: usize, depth: usize) -> Self {
        Self { dim, width, depth }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "control net needs dim, width, depth ≥ 1 (got {}, {}, {})",
                self.dim, self.width, self.depth
            )));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        ControlNet::new(*self).n_params
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    offset: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.n_in * self.n_out
    }
    fn bias(&self) -> Range<usize> {
        let b = self.offset + self.n_in * self.n_out;
        b..b + self.n_out
    }
    fn size(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn forward(&self, p: &[f64], x: &[f64], y: &mut Vec<f64>) {
        let w = &p[self.weights()];
        let b = &p[self.bias()];
        y.clear();
        y.extend((0..self.n_out).map(|o| {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        }));
    }

    /// Accumulates parameter gradients; writes the input cotangent when asked.
    fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], gx: Option<&mut [f64]>, gp: &mut [f64]) {
        let w = &p[self.weights()];
        let (gw_start, gb_start) = (self.weights().start, self.bias().start);
        for o in 0..self.n_out {
            let g = gy[o];
            if g == 0.0 {
                continue;
            }
            gp[gb_start + o] += g;
            let gw = &mut gp[gw_start + o * self.n_in..gw_start + (o + 1) * self.n_in];
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += g * xi;
            }
        }
        if let Some(gx) = gx {
            gx.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..self.n_out {
                let g = gy[o];
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (gxi, wi) in gx.iter_mut().zip(row) {
                    *gxi += g * wi;
                }
            }
        }
    }

    fn forward_generic<S: Scalar>(&self, p: &[S], x: &[S]) -> Vec<S> {
        let w = &p[self.weights()];
        let b = &p[self.bias()];
        (0..self.n_out)
            .map(|o| S::dot(&w[o * self.n_in..(o + 1) * self.n_in], x) + b[o])
            .collect()
    }
}

/// Resolved layer layout for a [`ControlNetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNet {
    pub spec: ControlNetSpec,
    gate: Vec<Dense>,
    embed: Dense,
    blocks: Vec<(Dense, Dense)>,
    proj: Dense,
    expansion: Vec<Dense>,
    n_params: usize,
    ranges: [Range<usize>; 3],
}

/// Intermediate values kept for one reverse pass.
#[derive(Debug, Clone, Default)]
pub struct NetCache {
    gate_acts: Vec<Vec<f64>>,
    gate: f64,
    res_states: Vec<Vec<f64>>,
    res_pre: Vec<Vec<f64>>,
    res_hidden: Vec<Vec<f64>>,
    resid: Vec<f64>,
    exp_acts: Vec<Vec<f64>>,
    exp_pre: Vec<Vec<f64>>,
    expansion: Vec<f64>,
}

impl ControlNet {
    pub fn new(spec: ControlNetSpec) -> Self {
        let (m, w, l) = (spec.dim, spec.width, spec.depth);
        let mut offset = 0;
        let mut layer = |n_in, n_out| {
            let d = Dense { offset, n_in, n_out };
            offset += d.size();
            d
        };
        let mut gate = vec![layer(m, w)];
        for _ in 1..l {
            gate.push(layer(w, w));
        }
        gate.push(layer(w, 1));
        let gate_end = offset_of(&gate);
        let embed = layer(m, w);
        let blocks: Vec<(Dense, Dense)> = (0..l).map(|_| (layer(w, w), layer(w, w))).collect();
        let proj = layer(w, m);
        let res_end = proj.offset + proj.size();
        let mut expansion = vec![layer(m, w)];
        for _ in 1..l {
            expansion.push(layer(w, w));
        }
        expansion.push(layer(w, m));
        let n_params = offset_of(&expansion);
        Self {
            spec,
            gate,
            embed,
            blocks,
            proj,
            expansion,
            n_params,
            ranges: [0..gate_end, gate_end..res_end, res_end..n_params],
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Flat ranges of the gate, residual and expansion parameters.
    pub fn subnet_ranges(&self) -> [Range<usize>; 3] {
        self.ranges.clone()
    }

    fn check(&self, xi: &[f64], theta: &[f64]) -> Result<()> {
        if xi.len() != self.n_params {
            return Err(Error::Dimension {
                what: "control parameters".into(),
                expected: self.n_params,
                got: xi.len(),
            });
        }
        if theta.len() != self.spec.dim {
            return Err(Error::Dimension {
                what: "control field input".into(),
                expected: self.spec.dim,
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// He-scaled normal weights for ReLU layers, Xavier-scaled for the gate,
    /// zero biases, and zero second layers in every residual block.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let mut fill = |d: &Dense, var: f64, p: &mut [f64]| {
            let normal = Normal::new(0.0, var.sqrt()).expect("finite variance");
            for v in &mut p[d.weights()] {
                *v = normal.sample(rng);
            }
        };
        for d in &self.gate {
            fill(d, 2.0 / (d.n_in + d.n_out) as f64, &mut p);
        }
        fill(&self.embed, 1.0 / self.embed.n_in as f64, &mut p);
        for (first, _) in &self.blocks {
            fill(first, 2.0 / first.n_in as f64, &mut p);
        }
        fill(&self.proj, 1.0 / self.proj.n_in as f64, &mut p);
        for d in &self.expansion {
            fill(d, 2.0 / d.n_in as f64, &mut p);
        }
        p
    }

    pub fn eval(&self, xi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check(xi, theta)?;
        let mut out = vec![0.0; self.spec.dim];
        let mut cache = NetCache::default();
        self.forward(xi, theta, &mut out, &mut cache);
        Ok(out)
    }

    /// `V_ξ(θ)` into `out`, keeping what the reverse pass needs in `cache`.
    pub fn forward(&self, xi: &[f64], theta: &[f64], out: &mut [f64], cache: &mut NetCache) {
        let mut buf = Vec::new();

        cache.gate_acts.clear();
        cache.gate_acts.push(theta.to_vec());
        let n_gate = self.gate.len();
        for (k, d) in self.gate.iter().enumerate() {
            d.forward(xi, cache.gate_acts.last().expect("input"), &mut buf);
            if k + 1 < n_gate {
                cache.gate_acts.push(buf.iter().map(|&v| sigmoid_f64(v)).collect());
            }
        }
        cache.gate = sigmoid_f64(buf[0]);

        cache.res_states.clear();
        cache.res_pre.clear();
        cache.res_hidden.clear();
        self.embed.forward(xi, theta, &mut buf);
        cache.res_states.push(buf.clone());
        for (first, second) in &self.blocks {
            let y = cache.res_states.last().expect("state").clone();
            first.forward(xi, &y, &mut buf);
            let hidden: Vec<f64> = buf.iter().map(|&v| v.max(0.0)).collect();
            cache.res_pre.push(std::mem::take(&mut buf));
            second.forward(xi, &hidden, &mut buf);
            cache.res_hidden.push(hidden);
            let next: Vec<f64> = y.iter().zip(&buf).map(|(a, b)| a + b).collect();
            cache.res_states.push(next);
        }
        self.proj
            .forward(xi, cache.res_states.last().expect("state"), &mut cache.resid);

        cache.exp_acts.clear();
        cache.exp_pre.clear();
        cache.exp_acts.push(theta.to_vec());
        let n_exp = self.expansion.len();
        for (k, d) in self.expansion.iter().enumerate() {
            d.forward(xi, cache.exp_acts.last().expect("input"), &mut buf);
            if k + 1 < n_exp {
                cache.exp_acts.push(buf.iter().map(|&v| v.max(0.0)).collect());
                cache.exp_pre.push(std::mem::take(&mut buf));
            }
        }
        cache.expansion = buf;

        let s = cache.gate;
        for i in 0..self.spec.dim {
            out[i] = s * (cache.resid[i] + cache.expansion[i] * theta[i]);
        }
    }

    /// Reverse pass for cotangent `a`: adds `aᵀ∂V/∂θ` into `g_theta` and
    /// `aᵀ∂V/∂ξ` into `g_xi`. `cache` must come from [`ControlNet::forward`]
    /// at the same `(ξ, θ)`.
    pub fn backward(
        &self,
        xi: &[f64],
        theta: &[f64],
        a: &[f64],
        cache: &NetCache,
        g_theta: &mut [f64],
        g_xi: &mut [f64],
    ) {
        let m = self.spec.dim;
        let s = cache.gate;
        let mut g_gate = 0.0;
        let mut g_inner = vec![0.0; m];
        for i in 0..m {
            let inner = cache.resid[i] + cache.expansion[i] * theta[i];
            g_gate += a[i] * inner;
            g_inner[i] = s * a[i];
            g_theta[i] += g_inner[i] * cache.expansion[i];
        }
        let mut gx = vec![0.0; m];

        // Gate.
        let mut gy = vec![g_gate * s * (1.0 - s)];
        for k in (0..self.gate.len()).rev() {
            let d = &self.gate[k];
            let input = &cache.gate_acts[k];
            let mut gin = vec![0.0; d.n_in];
            d.backward(xi, input, &gy, Some(&mut gin), g_xi);
            if k > 0 {
                gy = gin
                    .iter()
                    .zip(input)
                    .map(|(g, h)| g * h * (1.0 - h))
                    .collect();
            } else {
                gx.copy_from_slice(&gin);
            }
        }
        add_into(g_theta, &gx);

        // Residual network.
        let mut gstate = vec![0.0; self.spec.width];
        self.proj.backward(
            xi,
            cache.res_states.last().expect("state"),
            &g_inner,
            Some(&mut gstate),
            g_xi,
        );
        for (b, (first, second)) in self.blocks.iter().enumerate().rev() {
            let mut ghidden = vec![0.0; first.n_out];
            second.backward(xi, &cache.res_hidden[b], &gstate, Some(&mut ghidden), g_xi);
            for (g, pre) in ghidden.iter_mut().zip(&cache.res_pre[b]) {
                if *pre <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut gin = vec![0.0; first.n_in];
            first.backward(xi, &cache.res_states[b], &ghidden, Some(&mut gin), g_xi);
            add_into(&mut gstate, &gin);
        }
        self.embed.backward(xi, theta, &gstate, Some(&mut gx), g_xi);
        add_into(g_theta, &gx);

        // Expansion network, cotangent g_inner ⊙ θ.
        let mut gy: Vec<f64> = g_inner.iter().zip(theta).map(|(g, t)| g * t).collect();
        for k in (0..self.expansion.len()).rev() {
            let d = &self.expansion[k];
            let input = &cache.exp_acts[k];
            let mut gin = vec![0.0; d.n_in];
            d.backward(xi, input, &gy, Some(&mut gin), g_xi);
            if k > 0 {
                for (g, pre) in gin.iter_mut().zip(&cache.exp_pre[k - 1]) {
                    if *pre <= 0.0 {
                        *g = 0.0;
                    }
                }
                gy = gin;
            } else {
                gx.copy_from_slice(&gin);
            }
        }
        add_into(g_theta, &gx);
    }

    /// `(aᵀ∂V/∂θ, aᵀ∂V/∂ξ)` from one forward and one reverse pass.
    pub fn field_vjp(&self, xi: &[f64], theta: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(xi, theta)?;
        if a.len() != self.spec.dim {
            return Err(Error::Dimension {
                what: "field cotangent".into(),
                expected: self.spec.dim,
                got: a.len(),
            });
        }
        let mut out = vec![0.0; self.spec.dim];
        let mut cache = NetCache::default();
        self.forward(xi, theta, &mut out, &mut cache);
        let mut gt = vec![0.0; self.spec.dim];
        let mut gx = vec![0.0; self.n_params];
        self.backward(xi, theta, a, &cache, &mut gt, &mut gx);
        Ok((gt, gx))
    }

    /// The same composition written against [`Scalar`], for recording on a
    /// tape or evaluating with duals.
    pub fn eval_generic<S: Scalar>(&self, xi: &[S], theta: &[S]) -> Vec<S> {
        let n_gate = self.gate.len();
        let mut h = theta.to_vec();
        for (k, d) in self.gate.iter().enumerate() {
            h = d.forward_generic(xi, &h);
            if k + 1 < n_gate {
                h = h.into_iter().map(|v| v.sigmoid()).collect();
            }
        }
        let s = h[0].sigmoid();

        let mut y = self.embed.forward_generic(xi, theta);
        for (first, second) in &self.blocks {
            let hidden: Vec<S> = first
                .forward_generic(xi, &y)
                .into_iter()
                .map(|v| v.relu())
                .collect();
            let delta = second.forward_generic(xi, &hidden);
            y = y.iter().zip(&delta).map(|(a, b)| *a + *b).collect();
        }
        let r = self.proj.forward_generic(xi, &y);

        let n_exp = self.expansion.len();
        let mut e = theta.to_vec();
        for (k, d) in self.expansion.iter().enumerate() {
            e = d.forward_generic(xi, &e);
            if k + 1 < n_exp {
                e = e.into_iter().map(|v| v.relu()).collect();
            }
        }
        (0..self.spec.dim)
            .map(|i| s * (r[i] + e[i] * theta[i]))
            .collect()
    }

    /// Sets the gate's output bias, e.g. to saturate the gate.
    pub fn set_gate_bias(&self, xi: &mut [f64], bias: f64) {
        let last = self.gate.last().expect("gate layer");
        xi[last.bias().start] = bias;
    }

    /// Gate output `φˢ(θ)`.
    pub fn gate_value(&self, xi: &[f64], theta: &[f64]) -> f64 {
        let mut cache = NetCache::default();
        let mut out = vec![0.0; self.spec.dim];
        self.forward(xi, theta, &mut out, &mut cache);
        cache.gate
    }

    /// Residual-network output `φʳ(θ)`.
    pub fn residual_value(&self, xi: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut cache = NetCache::default();
        let mut out = vec![0.0; self.spec.dim];
        self.forward(xi, theta, &mut out, &mut cache);
        cache.resid
    }

    /// Weight ranges of the first residual-block layer and of the
    /// expansion net's input layer, for initialization statistics.
    pub fn relu_weight_ranges(&self) -> Vec<(Range<usize>, usize)> {
        let mut v: Vec<_> = self
            .blocks
            .iter()
            .map(|(f, _)| (f.weights(), f.n_in))
            .collect();
        v.extend(self.expansion.iter().map(|d| (d.weights(), d.n_in)));
        v
    }

    /// Parameter ranges of the second layer of every residual block.
    pub fn residual_output_ranges(&self) -> Vec<Range<usize>> {
        self.blocks
            .iter()
            .map(|(_, s)| s.offset..s.offset + s.size())
            .collect()
    }
}

fn offset_of(layers: &[Dense]) -> usize {
    layers.last().map(|d| d.offset + d.size()).unwrap_or(0)
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Control-field parameters with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParams {
    pub spec: ControlNetSpec,
    pub values: Vec<f64>,
}

impl ControlParams {
    pub fn init<R: Rng + ?Sized>(spec: ControlNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let net = ControlNet::new(spec);
        Ok(Self {
            values: net.init_params(rng),
            spec,
        })
    }

    pub fn net(&self) -> ControlNet {
        ControlNet::new(self.spec)
    }

    /// Flat vectors of the three sub-networks: gate, residual, expansion.
    pub fn subnets(&self) -> [&[f64]; 3] {
        let r = self.net().subnet_ranges();
        [
            &self.values[r[0].clone()],
            &self.values[r[1].clone()],
            &self.values[r[2].clone()],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Recorder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-s..s)).collect()
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ControlNetSpec::new(5, 8, 2);
        let a = ControlParams::init(spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ControlParams::init(spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_starts_on_skip_path() {
        let spec = ControlNetSpec::new(3, 6, 2);
        let net = ControlNet::new(spec);
        let xi = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        for r in net.residual_output_ranges() {
            assert!(xi[r].iter().all(|&v| v == 0.0));
        }
        let theta = [0.3, -1.0, 2.0];
        let mut buf = Vec::new();
        net.embed.forward(&xi, &theta, &mut buf);
        let mut skip = Vec::new();
        net.proj.forward(&xi, &buf, &mut skip);
        assert_eq!(net.residual_value(&xi, &theta), skip);
    }

    #[test]
    fn relu_init_variance() {
        let spec = ControlNetSpec::new(4, 128, 2);
        let net = ControlNet::new(spec);
        let xi = net.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        for (r, fan_in) in net.relu_weight_ranges() {
            if r.len() < 10_000 {
                continue;
            }
            let w = &xi[r];
            let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            let target = 2.0 / fan_in as f64;
            assert!((var - target).abs() < 0.1 * target, "{var} vs {target}");
        }
    }

    #[test]
    fn saturated_gate_zeroes_field() {
        let spec = ControlNetSpec::new(3, 5, 2);
        let net = ControlNet::new(spec);
        let mut xi = net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        net.set_gate_bias(&mut xi, -1e6);
        let v = net.eval(&xi, &[1.0, 2.0, -3.0]).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-100));
    }

    #[test]
    fn expansion_term_vanishes_at_origin() {
        let spec = ControlNetSpec::new(3, 5, 2);
        let net = ControlNet::new(spec);
        let xi = net.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let theta = [0.0; 3];
        let v = net.eval(&xi, &theta).unwrap();
        let s = net.gate_value(&xi, &theta);
        let r = net.residual_value(&xi, &theta);
        for i in 0..3 {
            assert_eq!(v[i], s * r[i]);
        }
    }

    #[test]
    fn hand_computed_two_dimensional_instance() {
        // m = 2, width 2, depth 1; weights chosen so every branch is active.
        let spec = ControlNetSpec::new(2, 2, 1);
        let net = ControlNet::new(spec);
        let mut xi = vec![0.0; net.n_params()];
        for (k, v) in xi.iter_mut().enumerate() {
            *v = 0.05 * ((k % 7) as f64) - 0.1;
        }
        let theta = [0.5, -0.25];
        let v = net.eval(&xi, &theta).unwrap();

        let dense = |off: usize, n_in: usize, n_out: usize, x: &[f64]| -> Vec<f64> {
            (0..n_out)
                .map(|o| {
                    let mut acc = xi[off + n_in * n_out + o];
                    for i in 0..n_in {
                        acc += xi[off + o * n_in + i] * x[i];
                    }
                    acc
                })
                .collect()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // Gate: 2->2 sigmoid, 2->1 sigmoid. Sizes 6 and 3.
        let h: Vec<f64> = dense(0, 2, 2, &theta).into_iter().map(sig).collect();
        let s = sig(dense(6, 2, 1, &h)[0]);
        // Residual: embed 2->2 (6), block 2->2 (6) + 2->2 (6), proj 2->2 (6).
        let y0 = dense(9, 2, 2, &theta);
        let hid: Vec<f64> = dense(15, 2, 2, &y0).into_iter().map(|v| v.max(0.0)).collect();
        let dy = dense(21, 2, 2, &hid);
        let y1: Vec<f64> = y0.iter().zip(&dy).map(|(a, b)| a + b).collect();
        let r = dense(27, 2, 2, &y1);
        // Expansion: 2->2 relu (6), 2->2 linear (6).
        let eh: Vec<f64> = dense(33, 2, 2, &theta).into_iter().map(|v| v.max(0.0)).collect();
        let e = dense(39, 2, 2, &eh);
        assert_eq!(net.n_params(), 45);
        for i in 0..2 {
            let expect = s * (r[i] + e[i] * theta[i]);
            assert!((v[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cotangent_zero_pullbacks() {
        let spec = ControlNetSpec::new(3, 4, 2);
        let net = ControlNet::new(spec);
        let xi = net.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let (gt, gx) = net.field_vjp(&xi, &[0.1, 0.2, 0.3], &[0.0; 3]).unwrap();
        assert!(gt.iter().chain(&gx).all(|&v| v == 0.0));
    }

    fn perturbed(rng: &mut ChaCha8Rng, net: &ControlNet) -> Vec<f64> {
        // Nonzero residual outputs so every path carries gradient.
        let mut xi = net.init_params(rng);
        for r in net.residual_output_ranges() {
            for v in &mut xi[r] {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        xi
    }

    #[test]
    fn pullbacks_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ControlNetSpec::new(3, 6, 2);
        let net = ControlNet::new(spec);
        let xi = perturbed(&mut rng, &net);
        let theta = rand_vec(&mut rng, 3, 1.0);
        let a = rand_vec(&mut rng, 3, 1.0);
        let (gt, gx) = net.field_vjp(&xi, &theta, &a).unwrap();
        let f = |xi: &[f64], th: &[f64]| -> f64 {
            net.eval(xi, th).unwrap().iter().zip(&a).map(|(v, c)| v * c).sum()
        };
        let h = 1e-6;
        for _ in 0..10 {
            let k = rng.random_range(0..net.n_params());
            let mut p = xi.clone();
            let mut q = xi.clone();
            p[k] += h;
            q[k] -= h;
            let fd = (f(&p, &theta) - f(&q, &theta)) / (2.0 * h);
            let scale = gx[k].abs().max(1e-4);
            assert!((fd - gx[k]).abs() / scale < 1e-5, "xi[{k}]: {fd} vs {}", gx[k]);
        }
        for k in 0..3 {
            let mut p = theta.clone();
            let mut q = theta.clone();
            p[k] += h;
            q[k] -= h;
            let fd = (f(&xi, &p) - f(&xi, &q)) / (2.0 * h);
            let scale = gt[k].abs().max(1e-4);
            assert!((fd - gt[k]).abs() / scale < 1e-5);
        }
    }

    #[test]
    fn pullbacks_match_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ControlNetSpec::new(4, 5, 2);
        let net = ControlNet::new(spec);
        let xi = perturbed(&mut rng, &net);
        let theta = rand_vec(&mut rng, 4, 1.0);
        let a = rand_vec(&mut rng, 4, 1.0);
        let (gt, gx) = net.field_vjp(&xi, &theta, &a).unwrap();

        let rec = Recorder::new();
        let xv = rec.input("xi", net.n_params());
        let tv = rec.input("theta", 4);
        let out = net.eval_generic(&xv, &tv);
        let tape = rec.finish(&out);
        let mut ws = tape.workspace();
        let fwd = tape
            .forward_eval(&mut ws, &[("xi", &xi), ("theta", &theta)])
            .unwrap();
        let direct = net.eval(&xi, &theta).unwrap();
        for (p, q) in fwd.iter().zip(&direct) {
            assert!((p - q).abs() < 1e-13);
        }
        let g = tape.vjp(&mut ws, &a).unwrap();
        for (p, q) in g.get("xi").unwrap().iter().zip(&gx) {
            assert!((p - q).abs() < 1e-12);
        }
        for (p, q) in g.get("theta").unwrap().iter().zip(&gt) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn lipschitz_on_bounded_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ControlNetSpec::new(6, 16, 2);
        let net = ControlNet::new(spec);
        let xi = perturbed(&mut rng, &net);
        let mut k_max = 0.0f64;
        let ball = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let v = rand_vec(rng, 6, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = 20.0 * rng.random::<f64>();
            v.iter().map(|x| x * r / n).collect()
        };
        for _ in 0..1000 {
            let t1 = ball(&mut rng);
            let t2 = ball(&mut rng);
            let v1 = net.eval(&xi, &t1).unwrap();
            let v2 = net.eval(&xi, &t2).unwrap();
            let dv = v1.iter().zip(&v2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dt = t1.iter().zip(&t2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dv.is_finite());
            k_max = k_max.max(dv / dt);
        }
        assert!(k_max.is_finite() && k_max < 1e6);
    }

    #[test]
    fn dimension_mismatch() {
        let net = ControlNet::new(ControlNetSpec::new(3, 4, 1));
        let xi = vec![0.0; net.n_params()];
        assert!(net.eval(&xi, &[0.0; 2]).is_err());
        assert!(net.eval(&xi[1..], &[0.0; 3]).is_err());
        assert!(net.field_vjp(&xi, &[0.0; 3], &[1.0]).is_err());
    }
}
