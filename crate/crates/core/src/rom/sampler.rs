use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelFamily, ModelSpec, ParamVector};
use crate::error::{Error, Result};

/// One weighted component of [`InitSampler::Mixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePart {
    pub weight: f64,
    pub sampler: InitSampler,
}

/// Distributions over initial parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSampler {
    /// Uniform on the ball `|θ| ≤ radius`.
    UniformBall { radius: f64 },
    /// `N(mean·1, variance·I)`.
    Gaussian { mean: f64, variance: f64 },
    /// Block rule for the periodic sine-tanh model: `aᵢ, β ~ N(0, I)`,
    /// `bᵢ ~ N(0, 1)`, `c` uniform on the sphere of radius `c_radius`.
    /// With `one_dimensional`, each `aᵢ` keeps only its first coordinate.
    /// A fixed `beta` replaces the sampled shift.
    SineTanhBlocks {
        one_dimensional: bool,
        c_radius: f64,
        #[serde(default)]
        beta: Option<Vec<f64>>,
    },
    /// Box rule for the Gaussian mixture: `wᵢ ∈ (w_min, w_max)`, every
    /// component of `aᵢ` in `(a_min, a_max)`, every component of `bᵢ` in
    /// `[−b_max, b_max]`, all uniform.
    GaussianMixtureBox {
        w_min: f64,
        w_max: f64,
        a_min: f64,
        a_max: f64,
        b_max: f64,
    },
    /// Isotropic kernel sums `Σᵢ cᵢ exp(−|x − bᵢ|²/σᵢ²)` expressed in the
    /// Gaussian-mixture layout: `wᵢ = cᵢ`, every component of `aᵢ` equal to
    /// `√2/σᵢ`. `cᵢ`, `σᵢ²` and the components of `bᵢ` are uniform on their
    /// ranges.
    KernelSum {
        c_min: f64,
        c_max: f64,
        sigma2_min: f64,
        sigma2_max: f64,
        b_max: f64,
    },
    /// Every parameter uniform on `[min, max]`.
    UniformBox { min: f64, max: f64 },
    Mixture { parts: Vec<MixturePart> },
}

impl InitSampler {
    pub fn hjb_box() -> Self {
        InitSampler::GaussianMixtureBox {
            w_min: -1.0,
            w_max: 0.0,
            a_min: 0.1,
            a_max: 2.0,
            b_max: 2.0,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            InitSampler::UniformBall { radius } if *radius <= 0.0 => {
                bad(format!("ball radius must be positive, got {radius}"))
            }
            InitSampler::Gaussian { variance, .. } if *variance < 0.0 => {
                bad(format!("variance must be nonnegative, got {variance}"))
            }
            InitSampler::SineTanhBlocks { beta, .. } => {
                if spec.family != ModelFamily::PeriodicSineTanh {
                    return bad("sine_tanh_blocks needs the periodic_sine_tanh model".into());
                }
                if let Some(b) = beta {
                    if b.len() != spec.dim {
                        return bad(format!("fixed beta has length {}, expected {}", b.len(), spec.dim));
                    }
                }
                Ok(())
            }
            InitSampler::GaussianMixtureBox {
                w_min,
                w_max,
                a_min,
                a_max,
                b_max,
            } => {
                if spec.family != ModelFamily::GaussianMixture {
                    return bad("gaussian_mixture_box needs the gaussian_mixture model".into());
                }
                if !(w_min < w_max && 0.0 < *a_min && a_min < a_max && *b_max >= 0.0) {
                    return bad("gaussian_mixture_box bounds are inconsistent".into());
                }
                Ok(())
            }
            InitSampler::KernelSum {
                c_min,
                c_max,
                sigma2_min,
                sigma2_max,
                b_max,
            } => {
                if spec.family != ModelFamily::GaussianMixture {
                    return bad("kernel_sum needs the gaussian_mixture model".into());
                }
                if !(c_min < c_max && 0.0 < *sigma2_min && sigma2_min < sigma2_max && *b_max >= 0.0) {
                    return bad("kernel_sum bounds are inconsistent".into());
                }
                Ok(())
            }
            InitSampler::UniformBox { min, max } if min >= max => {
                bad(format!("uniform box needs min < max, got [{min}, {max}]"))
            }
            InitSampler::Mixture { parts } => {
                if parts.is_empty() || parts.iter().any(|p| p.weight < 0.0)
                    || parts.iter().map(|p| p.weight).sum::<f64>() <= 0.0
                {
                    return bad("mixture needs nonnegative weights with positive sum".into());
                }
                parts.iter().try_for_each(|p| p.sampler.validate(spec))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, spec: &ModelSpec, rng: &mut R) -> Vec<f64> {
        let m = spec.n_params();
        let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        match self {
            InitSampler::UniformBall { radius } => {
                let mut v: Vec<f64> = (0..m).map(|_| normal(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let r = radius * rng.random::<f64>().powf(1.0 / m as f64);
                v.iter_mut().for_each(|x| *x *= r / norm);
                v
            }
            InitSampler::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                (0..m).map(|_| mean + sd * normal(rng)).collect()
            }
            InitSampler::SineTanhBlocks {
                one_dimensional,
                c_radius,
                beta,
            } => {
                let (n, d) = (spec.terms, spec.dim);
                let mut theta = vec![0.0; m];
                for j in 0..d {
                    theta[j] = match beta {
                        Some(b) => b[j],
                        None => normal(rng),
                    };
                }
                for i in 0..n {
                    for j in 0..d {
                        let v = normal(rng);
                        theta[d + i * d + j] = if *one_dimensional && j > 0 { 0.0 } else { v };
                    }
                }
                for i in 0..n {
                    theta[d + n * d + i] = normal(rng);
                }
                let c: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
                let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                for i in 0..n {
                    theta[d + n * d + n + i] = c_radius * c[i] / norm;
                }
                theta
            }
            InitSampler::GaussianMixtureBox {
                w_min,
                w_max,
                a_min,
                a_max,
                b_max,
            } => {
                let (n, d) = (spec.terms, spec.dim);
                let mut theta = Vec::with_capacity(m);
                for _ in 0..n {
                    // Open interval: reject the endpoint.
                    let mut w = rng.random_range(*w_min..*w_max);
                    while w == *w_min {
                        w = rng.random_range(*w_min..*w_max);
                    }
                    theta.push(w);
                }
                for _ in 0..n * d {
                    let mut a = rng.random_range(*a_min..*a_max);
                    while a == *a_min {
                        a = rng.random_range(*a_min..*a_max);
                    }
                    theta.push(a);
                }
                for _ in 0..n * d {
                    theta.push(rng.random_range(-*b_max..=*b_max));
                }
                theta
            }
            InitSampler::KernelSum {
                c_min,
                c_max,
                sigma2_min,
                sigma2_max,
                b_max,
            } => {
                let (n, d) = (spec.terms, spec.dim);
                let mut theta = vec![0.0; m];
                for i in 0..n {
                    theta[i] = rng.random_range(*c_min..*c_max);
                    let a = (2.0 / rng.random_range(*sigma2_min..*sigma2_max)).sqrt();
                    for j in 0..d {
                        theta[n + i * d + j] = a;
                    }
                }
                for v in &mut theta[n + n * d..] {
                    *v = rng.random_range(-*b_max..=*b_max);
                }
                theta
            }
            InitSampler::UniformBox { min, max } => {
                (0..m).map(|_| rng.random_range(*min..=*max)).collect()
            }
            InitSampler::Mixture { parts } => {
                let total: f64 = parts.iter().map(|p| p.weight).sum();
                let mut u = rng.random::<f64>() * total;
                for p in parts {
                    if u < p.weight {
                        return p.sampler.sample(spec, rng);
                    }
                    u -= p.weight;
                }
                parts.last().expect("nonempty").sampler.sample(spec, rng)
            }
        }
    }
}

/// `count` i.i.d. draws from `sampler`.
pub fn sample_initials<R: Rng + ?Sized>(
    sampler: &InitSampler,
    spec: &ModelSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<ParamVector>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    sampler.validate(spec)?;
    Ok((0..count)
        .map(|_| ParamVector {
            spec: *spec,
            values: sampler.sample(spec, rng),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ball_samples_stay_inside() {
        let spec = ModelSpec::periodic_sine_tanh(10, 80);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_initials(&InitSampler::UniformBall { radius: 20.0 }, &spec, 200, &mut rng)
            .unwrap();
        for p in &s {
            let r = p.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(r <= 20.0);
        }
    }

    #[test]
    fn sphere_block_has_unit_norm() {
        let spec = ModelSpec::periodic_sine_tanh(4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sampler = InitSampler::SineTanhBlocks {
            one_dimensional: true,
            c_radius: 1.0,
            beta: None,
        };
        for p in sample_initials(&sampler, &spec, 50, &mut rng).unwrap() {
            let c = p.block("c").unwrap();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            let a = p.block("a").unwrap();
            for i in 0..12 {
                assert!(a[i * 4 + 1..i * 4 + 4].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn gaussian_sampler_moments() {
        let spec = ModelSpec::sine_series(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sampler = InitSampler::Gaussian {
            mean: 0.0,
            variance: 0.5,
        };
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample(&spec, &mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard errors: sqrt(0.5/n) for the mean, 0.5*sqrt(2/n) for the variance.
        assert!(mean.abs() < 3.0 * (0.5 / n as f64).sqrt());
        assert!((var - 0.5).abs() < 3.0 * 0.5 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn hjb_box_constraints_hold() {
        let spec = ModelSpec::gaussian_mixture(8, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in sample_initials(&InitSampler::hjb_box(), &spec, 20, &mut rng).unwrap() {
            let w = p.block("w").unwrap();
            assert!(w.iter().all(|&v| -1.0 < v && v < 0.0));
            let a = p.block("a").unwrap();
            for i in 0..50 {
                let inf = a[i * 8..(i + 1) * 8].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(0.1 < inf && inf < 2.0);
            }
            let b = p.block("b").unwrap();
            assert!(b.iter().all(|v| v.abs() <= 2.0));
        }
    }

    #[test]
    fn kernel_sum_matches_its_closed_form() {
        let spec = ModelSpec::gaussian_mixture(2, 3);
        let sampler = InitSampler::KernelSum {
            c_min: -1.0,
            c_max: 0.0,
            sigma2_min: 0.5,
            sigma2_max: 20.0,
            b_max: 2.0,
        };
        sampler.validate(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = sampler.sample(&spec, &mut rng);
        let (w, a, b) = (&theta[0..3], &theta[3..9], &theta[9..15]);
        let x = [0.3, -0.7];
        let mut direct = 0.0;
        for i in 0..3 {
            assert_eq!(a[2 * i], a[2 * i + 1]);
            let sigma2 = 2.0 / (a[2 * i] * a[2 * i]);
            assert!((0.5..20.0).contains(&sigma2));
            let r2 = (x[0] - b[2 * i]).powi(2) + (x[1] - b[2 * i + 1]).powi(2);
            direct += w[i] * (-r2 / sigma2).exp();
        }
        assert!((spec.eval(&theta, &x).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn mismatched_block_rule_is_rejected() {
        let spec = ModelSpec::gaussian_mixture(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = InitSampler::SineTanhBlocks {
            one_dimensional: false,
            c_radius: 1.0,
            beta: None,
        };
        assert!(sample_initials(&s, &spec, 1, &mut rng).is_err());
        assert!(sample_initials(&InitSampler::hjb_box(), &spec, 0, &mut rng).is_err());
    }
}
