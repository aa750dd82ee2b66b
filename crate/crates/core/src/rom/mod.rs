//! Reduced-order models `u_θ(x)`: evaluation, closed-form spatial derivatives
//! and parameter gradients, initial-parameter sampling and fitting.

mod fit;
mod io;
mod sampler;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

pub use fit::{fit_initial, FitConfig, FitReport};
pub use io::{read_f64_le, read_params, write_f64_le, write_params, ParamManifest, LAYOUT_VERSION};
pub use sampler::{sample_initials, InitSampler, MixturePart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// `Σᵢ cᵢ tanh(aᵢᵀ sin(π(x − β)) − bᵢ)`, 2-periodic in every coordinate.
    PeriodicSineTanh,
    /// `Σᵢ wᵢ exp(−|aᵢ ⊙ (x − bᵢ)|² / 2)`, decaying at infinity.
    GaussianMixture,
    /// `Σₖ cₖ sin(kπ x₁)`; linear in its parameters. Used for eigenmode checks.
    SineSeries,
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic_sine_tanh" => Ok(Self::PeriodicSineTanh),
            "gaussian_mixture" => Ok(Self::GaussianMixture),
            "sine_series" => Ok(Self::SineSeries),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }
}

/// A named contiguous block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Spatial dimension `d`.
    pub dim: usize,
    /// Number of terms `n`.
    pub terms: usize,
}

/// Value, spatial gradient and Laplacian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet<S> {
    pub value: S,
    pub grad: Vec<S>,
    pub laplacian: S,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, dim: usize, terms: usize) -> Self {
        Self { family, dim, terms }
    }

    pub fn periodic_sine_tanh(dim: usize, terms: usize) -> Self {
        Self::new(ModelFamily::PeriodicSineTanh, dim, terms)
    }

    pub fn gaussian_mixture(dim: usize, terms: usize) -> Self {
        Self::new(ModelFamily::GaussianMixture, dim, terms)
    }

    pub fn sine_series(dim: usize, terms: usize) -> Self {
        Self::new(ModelFamily::SineSeries, dim, terms)
    }

    /// Parameter count `m`.
    pub fn n_params(&self) -> usize {
        let (n, d) = (self.terms, self.dim);
        match self.family {
            ModelFamily::PeriodicSineTanh => n * (d + 2) + d,
            ModelFamily::GaussianMixture => n * (2 * d + 1),
            ModelFamily::SineSeries => n,
        }
    }

    /// Solutions live on the periodic box `(−1, 1)^d` rather than on `R^d`.
    pub fn is_periodic(&self) -> bool {
        matches!(
            self.family,
            ModelFamily::PeriodicSineTanh | ModelFamily::SineSeries
        )
    }

    pub fn layout(&self) -> Vec<Block> {
        let (n, d) = (self.terms, self.dim);
        let blocks: Vec<(&'static str, usize)> = match self.family {
            ModelFamily::PeriodicSineTanh => vec![("beta", d), ("a", n * d), ("b", n), ("c", n)],
            ModelFamily::GaussianMixture => vec![("w", n), ("a", n * d), ("b", n * d)],
            ModelFamily::SineSeries => vec![("c", n)],
        };
        let mut offset = 0;
        blocks
            .into_iter()
            .map(|(name, len)| {
                let b = Block { name, offset, len };
                offset += len;
                b
            })
            .collect()
    }

    pub fn block(&self, name: &str) -> Option<Block> {
        self.layout().into_iter().find(|b| b.name == name)
    }

    /// Highest spatial derivative order with a closed form.
    pub fn max_derivative_order(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.terms == 0 {
            return Err(Error::Config(format!(
                "model needs dim ≥ 1 and terms ≥ 1 (got dim={}, terms={})",
                self.dim, self.terms
            )));
        }
        Ok(())
    }

    pub fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension {
                what: "parameter vector".into(),
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                what: "spatial point".into(),
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Value plus closed-form first and second spatial derivatives, generic
    /// over the scalar so the same expressions can be recorded on a tape.
    pub fn jet<S: Scalar>(&self, theta: &[S], x: &[S]) -> Jet<S> {
        debug_assert_eq!(theta.len(), self.n_params());
        debug_assert_eq!(x.len(), self.dim);
        match self.family {
            ModelFamily::PeriodicSineTanh => self.jet_sine_tanh(theta, x),
            ModelFamily::GaussianMixture => self.jet_gaussian(theta, x),
            ModelFamily::SineSeries => self.jet_sine_series(theta, x),
        }
    }

    /// `u_θ(x)` only.
    pub fn value<S: Scalar>(&self, theta: &[S], x: &[S]) -> S {
        let (n, d) = (self.terms, self.dim);
        match self.family {
            ModelFamily::PeriodicSineTanh => {
                let beta = &theta[..d];
                let a = &theta[d..d + n * d];
                let b = &theta[d + n * d..d + n * d + n];
                let c = &theta[d + n * d + n..];
                let s: Vec<S> = (0..d).map(|j| ((x[j] - beta[j]) * PI).sin()).collect();
                let mut u = x[0].zero_like();
                for i in 0..n {
                    let z = S::dot(&a[i * d..(i + 1) * d], &s) - b[i];
                    u = u + c[i] * z.tanh();
                }
                u
            }
            ModelFamily::GaussianMixture => {
                let w = &theta[..n];
                let a = &theta[n..n + n * d];
                let b = &theta[n + n * d..];
                let mut u = x[0].zero_like();
                for i in 0..n {
                    let q: Vec<S> = (0..d)
                        .map(|j| a[i * d + j] * (x[j] - b[i * d + j]))
                        .collect();
                    u = u + w[i] * (S::dot(&q, &q) * -0.5).exp();
                }
                u
            }
            ModelFamily::SineSeries => {
                let mut u = x[0].zero_like();
                for (k, &c) in theta.iter().enumerate() {
                    u = u + c * (x[0] * (PI * (k + 1) as f64)).sin();
                }
                u
            }
        }
    }

    fn jet_sine_tanh<S: Scalar>(&self, theta: &[S], x: &[S]) -> Jet<S> {
        let (n, d) = (self.terms, self.dim);
        let beta = &theta[..d];
        let a = &theta[d..d + n * d];
        let b = &theta[d + n * d..d + n * d + n];
        let c = &theta[d + n * d + n..];
        let phase: Vec<S> = (0..d).map(|j| (x[j] - beta[j]) * PI).collect();
        let s: Vec<S> = phase.iter().map(|p| p.sin()).collect();
        let co: Vec<S> = phase.iter().map(|p| p.cos()).collect();
        let co2: Vec<S> = co.iter().map(|v| *v * *v).collect();
        let zero = x[0].zero_like();
        let mut value = zero;
        let mut lap = zero;
        // Σᵢ cᵢ tanh′(zᵢ) aᵢⱼ, scaled by π cosⱼ at the end.
        let mut gsum = vec![zero; d];
        for i in 0..n {
            let ai = &a[i * d..(i + 1) * d];
            let proj = S::dot(ai, &s);
            let t = (proj - b[i]).tanh();
            let dt = -(t * t) + 1.0;
            let ddt = t * dt * -2.0;
            value = value + c[i] * t;
            let cdt = c[i] * dt;
            for j in 0..d {
                gsum[j] = gsum[j] + cdt * ai[j];
            }
            let a2: Vec<S> = ai.iter().map(|v| *v * *v).collect();
            let curv = S::dot(&a2, &co2) * (PI * PI);
            lap = lap + c[i] * (ddt * curv - dt * proj * (PI * PI));
        }
        let grad = (0..d).map(|j| gsum[j] * co[j] * PI).collect();
        Jet {
            value,
            grad,
            laplacian: lap,
        }
    }

    fn jet_gaussian<S: Scalar>(&self, theta: &[S], x: &[S]) -> Jet<S> {
        let (n, d) = (self.terms, self.dim);
        let w = &theta[..n];
        let a = &theta[n..n + n * d];
        let b = &theta[n + n * d..];
        let zero = x[0].zero_like();
        let mut value = zero;
        let mut lap = zero;
        let mut grad = vec![zero; d];
        for i in 0..n {
            let delta: Vec<S> = (0..d).map(|j| x[j] - b[i * d + j]).collect();
            let a2: Vec<S> = (0..d).map(|j| a[i * d + j] * a[i * d + j]).collect();
            // a²δ, the gradient of the quadratic form.
            let a2d: Vec<S> = (0..d).map(|j| a2[j] * delta[j]).collect();
            let q = S::dot(&a2d, &delta);
            let we = w[i] * (q * -0.5).exp();
            value = value + we;
            for j in 0..d {
                grad[j] = grad[j] - we * a2d[j];
            }
            let trace = a2.iter().skip(1).fold(a2[0], |acc, v| acc + *v);
            lap = lap + we * (S::dot(&a2d, &a2d) - trace);
        }
        Jet {
            value,
            grad,
            laplacian: lap,
        }
    }

    fn jet_sine_series<S: Scalar>(&self, theta: &[S], x: &[S]) -> Jet<S> {
        let zero = x[0].zero_like();
        let mut value = zero;
        let mut d1 = zero;
        let mut lap = zero;
        for (k, &c) in theta.iter().enumerate() {
            let freq = PI * (k + 1) as f64;
            let p = x[0] * freq;
            let sn = p.sin();
            value = value + c * sn;
            d1 = d1 + c * p.cos() * freq;
            lap = lap - c * sn * (freq * freq);
        }
        let mut grad = vec![zero; self.dim];
        grad[0] = d1;
        Jet {
            value,
            grad,
            laplacian: lap,
        }
    }

    pub fn eval(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_params(theta)?;
        self.check_point(x)?;
        Ok(self.value(theta, x))
    }

    pub fn grad_x(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(theta)?;
        self.check_point(x)?;
        Ok(self.jet(theta, x).grad)
    }

    pub fn laplacian(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_params(theta)?;
        self.check_point(x)?;
        Ok(self.jet(theta, x).laplacian)
    }

    /// Hand-derived `∇_θ u_θ(x)` written into `out`; returns `u_θ(x)`.
    pub fn grad_theta_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        let (n, d) = (self.terms, self.dim);
        debug_assert_eq!(out.len(), self.n_params());
        match self.family {
            ModelFamily::PeriodicSineTanh => {
                let (oa, ob, oc) = (d, d + n * d, d + n * d + n);
                let beta = &theta[..d];
                let mut s = vec![0.0; d];
                let mut co = vec![0.0; d];
                for j in 0..d {
                    let p = PI * (x[j] - beta[j]);
                    s[j] = p.sin();
                    co[j] = p.cos();
                }
                out[..d].iter_mut().for_each(|v| *v = 0.0);
                let mut u = 0.0;
                for i in 0..n {
                    let ai = &theta[oa + i * d..oa + (i + 1) * d];
                    let z: f64 = ai.iter().zip(s.iter()).map(|(p, q)| p * q).sum::<f64>() - theta[ob + i];
                    let t = z.tanh();
                    let dt = 1.0 - t * t;
                    let ci = theta[oc + i];
                    u += ci * t;
                    out[oc + i] = t;
                    out[ob + i] = -ci * dt;
                    for j in 0..d {
                        out[oa + i * d + j] = ci * dt * s[j];
                        out[j] -= ci * dt * ai[j] * PI * co[j];
                    }
                }
                u
            }
            ModelFamily::GaussianMixture => {
                let (oa, ob) = (n, n + n * d);
                let mut u = 0.0;
                for i in 0..n {
                    let mut q = 0.0;
                    for j in 0..d {
                        let r = theta[oa + i * d + j] * (x[j] - theta[ob + i * d + j]);
                        q += r * r;
                    }
                    let e = (-0.5 * q).exp();
                    let w = theta[i];
                    u += w * e;
                    out[i] = e;
                    for j in 0..d {
                        let aij = theta[oa + i * d + j];
                        let del = x[j] - theta[ob + i * d + j];
                        out[oa + i * d + j] = -w * e * aij * del * del;
                        out[ob + i * d + j] = w * e * aij * aij * del;
                    }
                }
                u
            }
            ModelFamily::SineSeries => {
                let mut u = 0.0;
                for k in 0..n {
                    let sn = (PI * (k + 1) as f64 * x[0]).sin();
                    out[k] = sn;
                    u += theta[k] * sn;
                }
                u
            }
        }
    }

    pub fn grad_theta(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(theta)?;
        self.check_point(x)?;
        let mut out = vec![0.0; self.n_params()];
        self.grad_theta_into(theta, x, &mut out);
        Ok(out)
    }

    /// `∇_θ u_θ(x)` by reverse mode over a recorded evaluation.
    pub fn grad_theta_tape(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        use crate::autodiff::Recorder;
        let rec = Recorder::new();
        let th = rec.input("theta", self.n_params());
        let xs = rec.input("x", self.dim);
        let u = self.value(&th, &xs);
        let tape = rec.finish(&[u]);
        let mut ws = tape.workspace();
        tape.forward_eval(&mut ws, &[("theta", theta), ("x", x)])
            .expect("slots bound");
        let g = tape.vjp(&mut ws, &[1.0]).expect("scalar output");
        g.get("theta").expect("theta slot").to_vec()
    }
}

/// A parameter vector tied to its model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub spec: ModelSpec,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.check_params(&values)?;
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.n_params()],
            spec,
        }
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.spec.block(name).map(|b| &self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let b = self.spec.block(name)?;
        Some(&mut self.values[b.range()])
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.spec.eval(&self.values, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::periodic_sine_tanh(3, 4),
            ModelSpec::gaussian_mixture(3, 4),
            ModelSpec::sine_series(2, 3),
        ]
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::periodic_sine_tanh(10, 80).n_params(), 970);
        assert_eq!(ModelSpec::gaussian_mixture(8, 50).n_params(), 850);
        assert_eq!(ModelSpec::periodic_sine_tanh(2, 10).n_params(), 42);
        for s in specs() {
            let total: usize = s.layout().iter().map(|b| b.len).sum();
            assert_eq!(total, s.n_params());
        }
    }

    #[test]
    fn zero_coefficients_vanish() {
        let spec = ModelSpec::periodic_sine_tanh(2, 3);
        let mut p = ParamVector::zeros(spec);
        p.block_mut("a").unwrap().copy_from_slice(&[0.3, -1.0, 2.0, 0.1, 0.5, 0.7]);
        p.block_mut("b").unwrap().copy_from_slice(&[0.2, -0.4, 1.0]);
        let x = [0.3, -0.8];
        assert_eq!(p.eval(&x).unwrap(), 0.0);
        assert_eq!(spec.grad_x(&p.values, &x).unwrap(), vec![0.0, 0.0]);
        assert_eq!(spec.laplacian(&p.values, &x).unwrap(), 0.0);
    }

    #[test]
    fn single_gaussian_at_center() {
        let spec = ModelSpec::gaussian_mixture(3, 1);
        let theta = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(spec.eval(&theta, &[0.0, 0.0, 0.0]).unwrap(), 1.0);

        let theta = [0.7, 0.5, -1.5, 2.0, 0.1, -0.2, 0.3];
        let x = [0.1, -0.2, 0.3];
        let g = spec.grad_x(&theta, &x).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let lap = spec.laplacian(&theta, &x).unwrap();
        let expect = -0.7 * (0.25 + 2.25 + 4.0);
        assert!((lap - expect).abs() < 1e-14);
    }

    #[test]
    fn hand_evaluated_sine_tanh() {
        let spec = ModelSpec::periodic_sine_tanh(1, 1);
        // beta, a, b, c
        let theta = [0.0, 1.0, 0.0, 1.0];
        let v = spec.eval(&theta, &[0.5]).unwrap();
        assert!((v - 0.7615941559558).abs() < 1e-12);
    }

    #[test]
    fn linear_in_output_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ModelSpec::periodic_sine_tanh(2, 3);
        let theta = random_vec(&mut rng, spec.n_params(), 1.0);
        let x = [0.4, -0.1];
        let g = spec.grad_theta(&theta, &x).unwrap();
        let c = spec.block("c").unwrap();
        let beta = &theta[..2];
        for i in 0..3 {
            let ai = &theta[2 + 2 * i..4 + 2 * i];
            let z: f64 = (0..2)
                .map(|j| ai[j] * (PI * (x[j] - beta[j])).sin())
                .sum::<f64>()
                - theta[8 + i];
            assert!((g[c.offset + i] - z.tanh()).abs() < 1e-15);
        }

        let spec = ModelSpec::gaussian_mixture(2, 2);
        let theta = random_vec(&mut rng, spec.n_params(), 1.0);
        let g = spec.grad_theta(&theta, &x).unwrap();
        let mut unit = theta.clone();
        unit[..2].copy_from_slice(&[1.0, 0.0]);
        assert!((g[0] - spec.eval(&unit, &x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn grad_x_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for spec in specs() {
            for _ in 0..20 {
                let theta = random_vec(&mut rng, spec.n_params(), 1.2);
                let x = random_vec(&mut rng, spec.dim, 1.0);
                let g = spec.grad_x(&theta, &x).unwrap();
                for j in 0..spec.dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (spec.eval(&theta, &xp).unwrap() - spec.eval(&theta, &xm).unwrap())
                        / (2.0 * h);
                    let scale = g[j].abs().max(1e-3);
                    assert!((fd - g[j]).abs() / scale < 1e-6, "{spec:?} j={j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn laplacian_matches_hessian_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-4;
        for spec in specs() {
            for _ in 0..10 {
                let theta = random_vec(&mut rng, spec.n_params(), 1.2);
                let x = random_vec(&mut rng, spec.dim, 1.0);
                let lap = spec.laplacian(&theta, &x).unwrap();
                let u0 = spec.eval(&theta, &x).unwrap();
                let mut tr = 0.0;
                for j in 0..spec.dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    tr += (spec.eval(&theta, &xp).unwrap() - 2.0 * u0
                        + spec.eval(&theta, &xm).unwrap())
                        / (h * h);
                }
                let scale = lap.abs().max(1e-2);
                assert!((tr - lap).abs() / scale < 1e-4, "{spec:?}: {tr} vs {lap}");
            }
        }
    }

    #[test]
    fn grad_theta_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        for spec in specs() {
            let theta = random_vec(&mut rng, spec.n_params(), 1.0);
            let x = random_vec(&mut rng, spec.dim, 1.0);
            let g = spec.grad_theta(&theta, &x).unwrap();
            for k in 0..spec.n_params() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let fd = (spec.eval(&tp, &x).unwrap() - spec.eval(&tm, &x).unwrap()) / (2.0 * h);
                let scale = g[k].abs().max(1e-3);
                assert!((fd - g[k]).abs() / scale < 1e-6, "{spec:?} k={k}");
            }
        }
    }

    #[test]
    fn grad_theta_analytic_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for spec in specs() {
            for _ in 0..5 {
                let theta = random_vec(&mut rng, spec.n_params(), 1.5);
                let x = random_vec(&mut rng, spec.dim, 1.0);
                let a = spec.grad_theta(&theta, &x).unwrap();
                let b = spec.grad_theta_tape(&theta, &x);
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() < 1e-10 * (1.0 + p.abs()));
                }
            }
        }
    }

    #[test]
    fn jvp_matches_explicit_gradient_dot() {
        use crate::autodiff::Dual;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for spec in specs() {
            let theta = random_vec(&mut rng, spec.n_params(), 1.0);
            let x = random_vec(&mut rng, spec.dim, 1.0);
            let g = spec.grad_theta(&theta, &x).unwrap();
            for _ in 0..10 {
                let v = random_vec(&mut rng, spec.n_params(), 1.0);
                let th: Vec<Dual<f64>> = theta.iter().zip(&v).map(|(&p, &t)| Dual::new(p, t)).collect();
                let xs: Vec<Dual<f64>> = x.iter().map(|&p| Dual::constant(p)).collect();
                let d = spec.value(&th, &xs).tangent;
                let explicit: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
                assert!((d - explicit).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn periodicity_of_sine_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let spec = ModelSpec::periodic_sine_tanh(3, 5);
        for _ in 0..50 {
            let theta = random_vec(&mut rng, spec.n_params(), 2.0);
            let x = random_vec(&mut rng, 3, 1.0);
            let u = spec.eval(&theta, &x).unwrap();
            for j in 0..3 {
                let mut xs = x.clone();
                xs[j] += 2.0;
                assert!((spec.eval(&theta, &xs).unwrap() - u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_mixture_decays() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = ModelSpec::gaussian_mixture(3, 6);
        for _ in 0..50 {
            let mut theta = random_vec(&mut rng, spec.n_params(), 2.0);
            for v in &mut theta[6..6 + 18] {
                *v = v.signum() * v.abs().max(0.5);
            }
            let dir = random_vec(&mut rng, 3, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x: Vec<f64> = dir.iter().map(|v| 50.0 * v / norm).collect();
            assert!(spec.eval(&theta, &x).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let spec = ModelSpec::gaussian_mixture(2, 2);
        assert!(matches!(
            spec.eval(&[0.0; 3], &[0.0, 0.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(ParamVector::new(spec, vec![0.0; 9]).is_err());
    }
}
