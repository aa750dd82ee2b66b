//! Monte-Carlo point sets over the spatial domain.
//!
//! Integrals are approximated as `∫ f dx ≈ (1/N) Σ wₙ f(xₙ)`. For the periodic
//! box the weights are 1, so norms are box averages; on `R^d` the weights are
//! inverse proposal densities.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rom::{ModelFamily, ModelSpec};

/// Flat `N × d` points plus quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct XBatch {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl XBatch {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, n: usize) -> &[f64] {
        &self.points[n * self.dim..(n + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    /// `(1/N) Σ wₙ f(xₙ)`.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let n = self.len() as f64;
        self.iter().map(|(x, w)| w * f(x)).sum::<f64>() / n
    }
}

/// How spatial Monte-Carlo points are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XSampler {
    /// Uniform on `(−h, h)^d`, unit weights.
    UniformBox { half_width: f64 },
    /// Isotropic Gaussian proposal `N(0, std² I)` with inverse-density weights.
    Gaussian { std: f64 },
    /// The model-matched mixture `ρ(x; θ)`, optionally blended with a broad
    /// Gaussian (`defensive` is the broad component's probability).
    ModelDensity { defensive: f64, broad_std: f64 },
}

impl XSampler {
    pub fn default_for(spec: &ModelSpec) -> Self {
        if spec.is_periodic() {
            XSampler::UniformBox { half_width: 1.0 }
        } else {
            XSampler::ModelDensity {
                defensive: 0.2,
                broad_std: 3.0,
            }
        }
    }

    /// Whether the proposal depends on the parameter vector.
    pub fn depends_on_params(&self) -> bool {
        matches!(self, XSampler::ModelDensity { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            XSampler::UniformBox { half_width } => half_width > 0.0,
            XSampler::Gaussian { std } => std > 0.0,
            XSampler::ModelDensity { defensive, broad_std } => {
                (0.0..=1.0).contains(&defensive) && (defensive == 0.0 || broad_std > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid x-sampler {self:?}")))
        }
    }

    /// Draws `n` points. `theta` is only consulted by [`XSampler::ModelDensity`].
    pub fn sample<R: Rng + ?Sized>(
        &self,
        spec: &ModelSpec,
        theta: Option<&[f64]>,
        n: usize,
        rng: &mut R,
    ) -> Result<XBatch> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let d = spec.dim;
        let mut points = Vec::with_capacity(n * d);
        let mut weights = Vec::with_capacity(n);
        match *self {
            XSampler::UniformBox { half_width } => {
                for _ in 0..n * d {
                    points.push(rng.random_range(-half_width..half_width));
                }
                weights.resize(n, 1.0);
            }
            XSampler::Gaussian { std } => {
                for _ in 0..n {
                    let start = points.len();
                    for _ in 0..d {
                        let z: f64 = StandardNormal.sample(rng);
                        points.push(std * z);
                    }
                    weights.push(1.0 / isotropic_density(&points[start..], std));
                }
            }
            XSampler::ModelDensity { defensive, broad_std } => {
                let theta = theta.ok_or_else(|| {
                    Error::Config("model-density sampling needs a parameter vector".into())
                })?;
                let mixture = MixtureDensity::from_params(spec, theta)?;
                for _ in 0..n {
                    let start = points.len();
                    if defensive > 0.0 && rng.random::<f64>() < defensive {
                        for _ in 0..d {
                            let z: f64 = StandardNormal.sample(rng);
                            points.push(broad_std * z);
                        }
                    } else {
                        let x = mixture.sample(rng);
                        points.extend_from_slice(&x);
                    }
                    let x = &points[start..];
                    let mut dens = (1.0 - defensive) * mixture.density(x);
                    if defensive > 0.0 {
                        dens += defensive * isotropic_density(x, broad_std);
                    }
                    weights.push(1.0 / dens);
                }
            }
        }
        Ok(XBatch { dim: d, points, weights })
    }
}

fn isotropic_density(x: &[f64], std: f64) -> f64 {
    let d = x.len() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (-(r2) / (2.0 * std * std)).exp() / (2.0 * PI * std * std).powf(d / 2.0)
}

/// `ρ(x; θ) = (1/n) Σᵢ N(x; bᵢ, diag(aᵢ)⁻²)` for a Gaussian-mixture model.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensity {
    dim: usize,
    /// Per component: means `bᵢ` and inverse standard deviations `|aᵢ|`.
    means: Vec<f64>,
    precisions: Vec<f64>,
}

impl MixtureDensity {
    pub fn from_params(spec: &ModelSpec, theta: &[f64]) -> Result<Self> {
        if spec.family != ModelFamily::GaussianMixture {
            return Err(Error::Unsupported(format!(
                "model density needs a Gaussian-mixture model, got {:?}",
                spec.family
            )));
        }
        spec.check_params(theta)?;
        let a = spec.block("a").expect("layout");
        let b = spec.block("b").expect("layout");
        let precisions: Vec<f64> = theta[a.range()].iter().map(|v| v.abs()).collect();
        if precisions.iter().any(|&p| p == 0.0 || !p.is_finite()) {
            return Err(Error::Config(
                "model density needs every aᵢ component to be nonzero".into(),
            ));
        }
        Ok(Self {
            dim: spec.dim,
            means: theta[b.range()].to_vec(),
            precisions,
        })
    }

    pub fn components(&self) -> usize {
        self.means.len() / self.dim
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let norm = (2.0 * PI).powf(-(d as f64) / 2.0);
        let n = self.components();
        let mut total = 0.0;
        for i in 0..n {
            let mut q = 0.0;
            let mut det = 1.0;
            for j in 0..d {
                let p = self.precisions[i * d + j];
                let r = p * (x[j] - self.means[i * d + j]);
                q += r * r;
                det *= p;
            }
            total += det * (-0.5 * q).exp();
        }
        norm * total / n as f64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim;
        let i = rng.random_range(0..self.components());
        (0..d)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                self.means[i * d + j] + z / self.precisions[i * d + j]
            })
            .collect()
    }
}

/// Draws one `x ~ ρ(x; θ)` and returns it with its importance weight `1/ρ(x; θ)`.
pub fn density_rho<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let mix = MixtureDensity::from_params(spec, theta)?;
    let x = mix.sample(rng);
    let w = 1.0 / mix.density(&x);
    Ok((x, w))
}
