//! Reference solutions and target generation: heat-kernel convolution and
//! periodic spectral solutions, a first-order upwind scheme, Cole-Hopf Monte
//! Carlo for the viscous HJB equation, Gram-system time marching, and
//! relative-error curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::pde::OperatorSpec;
use crate::rom::{ModelSpec, ParamVector};
use crate::sampling::{XBatch, XSampler};

pub use crate::sampling::density_rho;

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `E[g(y)]` for `y ~ N(x, 2tI)`, the free-space heat solution.
pub fn heat_exact<R: Rng + ?Sized>(
    g: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    t: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    if t < 0.0 {
        return Err(Error::Config(format!("time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(Estimate {
            value: g(x),
            std_error: 0.0,
        });
    }
    let sd = (2.0 * t).sqrt();
    let mut y = vec![0.0; x.len()];
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n_mc {
        let z = standard_normal_vec(rng, x.len());
        for i in 0..x.len() {
            y[i] = x[i] + sd * z[i];
        }
        let v = g(&y);
        sum += v;
        sum2 += v * v;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = if n_mc > 1 {
        ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(Estimate {
        value: mean,
        std_error: (var / n).sqrt(),
    })
}

/// Nodes and weights of the `q`-point Gauss-Hermite rule for `E[f(Z)]`,
/// `Z ~ N(0, 1)` (Golub-Welsch).
pub fn gauss_hermite(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(q, q);
    for k in 1..q {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Free-space heat solution by tensor Gauss-Hermite quadrature with `q`
/// nodes per dimension (`q^d` evaluations of `g`).
pub fn heat_exact_quadrature(g: &dyn Fn(&[f64]) -> f64, x: &[f64], t: f64, q: usize) -> Result<f64> {
    if t < 0.0 || q == 0 {
        return Err(Error::Config("need t ≥ 0 and q ≥ 1".into()));
    }
    if t == 0.0 {
        return Ok(g(x));
    }
    let d = x.len();
    let total = q
        .checked_pow(d as u32)
        .filter(|&n| n <= 1 << 24)
        .ok_or_else(|| Error::Unsupported(format!("{q}^{d} quadrature nodes")))?;
    let (z, w) = gauss_hermite(q);
    let sd = (2.0 * t).sqrt();
    let mut y = vec![0.0; d];
    let mut acc = 0.0;
    for flat in 0..total {
        let mut rest = flat;
        let mut weight = 1.0;
        for i in 0..d {
            let k = rest % q;
            rest /= q;
            y[i] = x[i] + sd * z[k];
            weight *= w[k];
        }
        acc += weight * g(&y);
    }
    Ok(acc)
}

/// `amplitude · e^{−π²|k|²t} · sin(π k·x)`.
pub fn heat_mode_exact(k: &[i64], amplitude: f64, x: &[f64], t: f64) -> f64 {
    let k2: f64 = k.iter().map(|&v| (v * v) as f64).sum();
    let phase: f64 = k.iter().zip(x).map(|(&v, &xi)| v as f64 * xi).sum();
    amplitude * (-std::f64::consts::PI.powi(2) * k2 * t).exp() * (std::f64::consts::PI * phase).sin()
}

/// Heat flow of a 2-periodic function on `(−1, 1)^d`, represented by its
/// discrete Fourier coefficients on an `n^d` grid. Each mode decays as
/// `e^{−π²|k|²t}`; for periodic data this equals the free-space convolution.
#[derive(Debug, Clone)]
pub struct PeriodicHeat {
    dim: usize,
    n: usize,
    coef: Vec<Complex<f64>>,
}

impl PeriodicHeat {
    pub fn new(g: &dyn Fn(&[f64]) -> f64, dim: usize, n: usize) -> Result<Self> {
        if dim == 0 || n < 2 {
            return Err(Error::Config("periodic heat needs d ≥ 1 and n ≥ 2".into()));
        }
        let total = n
            .checked_pow(dim as u32)
            .filter(|&t| t <= 1 << 22)
            .ok_or_else(|| Error::Unsupported(format!("{n}^{dim} grid")))?;
        let h = 2.0 / n as f64;
        let mut y = vec![0.0; dim];
        let mut data: Vec<Complex<f64>> = (0..total)
            .map(|flat| {
                let mut rest = flat;
                for yi in y.iter_mut() {
                    *yi = -1.0 + h * (rest % n) as f64;
                    rest /= n;
                }
                Complex::new(g(&y), 0.0)
            })
            .collect();
        // Separable DFT: coefficient for wavenumber index j along an axis is
        // (1/n) Σ_l f_l e^{−iπ k_j y_l}, with k_j the signed wavenumber.
        let twiddle: Vec<Vec<Complex<f64>>> = (0..n)
            .map(|j| {
                let k = signed(j, n) as f64;
                (0..n)
                    .map(|l| {
                        let yl = -1.0 + h * l as f64;
                        Complex::from_polar(1.0 / n as f64, -std::f64::consts::PI * k * yl)
                    })
                    .collect()
            })
            .collect();
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for axis in 0..dim {
            let stride = n.pow(axis as u32);
            for base in 0..total {
                if (base / stride) % n != 0 {
                    continue;
                }
                for l in 0..n {
                    line[l] = data[base + l * stride];
                }
                for j in 0..n {
                    data[base + j * stride] =
                        line.iter().zip(&twiddle[j]).map(|(a, b)| a * b).sum();
                }
            }
        }
        Ok(Self {
            dim,
            n,
            coef: data,
        })
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        let n = self.n;
        let pi = std::f64::consts::PI;
        let phases: Vec<Vec<Complex<f64>>> = x
            .iter()
            .map(|&xi| {
                (0..n)
                    .map(|j| {
                        let k = signed(j, n) as f64;
                        Complex::from_polar((-pi * pi * k * k * t).exp(), pi * k * xi)
                    })
                    .collect()
            })
            .collect();
        let mut acc = 0.0;
        for (flat, c) in self.coef.iter().enumerate() {
            let mut rest = flat;
            let mut f = Complex::new(1.0, 0.0);
            for ph in phases.iter().take(self.dim) {
                f *= ph[rest % n];
                rest /= n;
            }
            acc += (c * f).re;
        }
        acc
    }
}

fn signed(j: usize, n: usize) -> i64 {
    if j < n.div_ceil(2) {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Grid solution of `∂ₜu = ∂_y(speed · tanh u)` on the periodic interval
/// `(−1, 1)` with cell centres `y_i = −1 + (i + ½)Δy`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpwindSolution {
    pub dy: f64,
    pub dt: f64,
    pub t_end: f64,
    pub initial: Vec<f64>,
    pub last: Vec<f64>,
    /// Total variation after each step, starting with the initial data.
    pub total_variation: Vec<f64>,
    /// `Σ uᵢ Δy` after each step, starting with the initial data.
    pub mass: Vec<f64>,
}

fn periodic_linear(u: &[f64], dy: f64, y: f64) -> f64 {
    let n = u.len();
    let s = ((y + 1.0) / dy - 0.5).rem_euclid(n as f64);
    let i = s.floor() as usize % n;
    let frac = s - s.floor();
    (1.0 - frac) * u[i] + frac * u[(i + 1) % n]
}

impl UpwindSolution {
    /// Final-time value at `y`, linearly interpolated between cell centres.
    pub fn eval(&self, y: f64) -> f64 {
        periodic_linear(&self.last, self.dy, y)
    }

    pub fn eval_initial(&self, y: f64) -> f64 {
        periodic_linear(&self.initial, self.dy, y)
    }
}

fn total_variation(u: &[f64]) -> f64 {
    let n = u.len();
    (0..n).map(|i| (u[(i + 1) % n] - u[i]).abs()).sum()
}

/// First-order conservative upwind scheme with `n_t` steps to `t_end` on `n_x`
/// cells. Refuses step counts that violate the CFL condition.
pub fn upwind_1d(
    g1: &dyn Fn(f64) -> f64,
    speed: f64,
    t_end: f64,
    n_t: usize,
    n_x: usize,
) -> Result<UpwindSolution> {
    if n_t == 0 || n_x < 2 || !(t_end >= 0.0) || !speed.is_finite() {
        return Err(Error::Config("upwind needs n_t ≥ 1, n_x ≥ 2, t_end ≥ 0".into()));
    }
    let dy = 2.0 / n_x as f64;
    let dt = t_end / n_t as f64;
    let mut u: Vec<f64> = (0..n_x).map(|i| g1(-1.0 + (i as f64 + 0.5) * dy)).collect();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "upwind initial data".into(),
            t: 0.0,
        });
    }
    // The scheme satisfies a maximum principle, so the flux slope is bounded
    // by its supremum over the initial range.
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let sech2 = |v: f64| 1.0 - v.tanh().powi(2);
    let max_slope = speed.abs()
        * if lo <= 0.0 && hi >= 0.0 {
            1.0
        } else {
            sech2(lo).max(sech2(hi))
        };
    if dt * max_slope > dy {
        return Err(Error::Cfl {
            required_steps: (t_end * max_slope / dy).ceil() as usize,
        });
    }
    let lambda = dt / dy;
    let initial = u.clone();
    let mut tv = vec![total_variation(&u)];
    let mut mass = vec![u.iter().sum::<f64>() * dy];
    let mut flux = vec![0.0; n_x];
    for _ in 0..n_t {
        for (f, v) in flux.iter_mut().zip(&u) {
            *f = speed * v.tanh();
        }
        for i in 0..n_x {
            // Information travels against the sign of f'(u) = speed·sech²u.
            let delta = if speed >= 0.0 {
                flux[(i + 1) % n_x] - flux[i]
            } else {
                flux[i] - flux[(i + n_x - 1) % n_x]
            };
            u[i] += lambda * delta;
        }
        tv.push(total_variation(&u));
        mass.push(u.iter().sum::<f64>() * dy);
    }
    Ok(UpwindSolution {
        dy,
        dt,
        t_end,
        initial,
        last: u,
        total_variation: tv,
        mass,
    })
}

/// Value function of the viscous HJB problem with terminal cost `g` at time
/// `horizon`, via the Cole-Hopf transform:
/// `u(x, t) = −2ε ln E[exp(−g(y)/(2ε))]`, `y ~ N(x, 2ε(T−t)I)`,
/// evaluated as a shifted log-mean-exp.
pub fn cole_hopf<R: Rng + ?Sized>(
    g: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    t: f64,
    horizon: f64,
    epsilon: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    if t > horizon || t < 0.0 {
        return Err(Error::Config(format!("need 0 ≤ t ≤ T, got t = {t}, T = {horizon}")));
    }
    if t == horizon {
        return Ok(Estimate {
            value: g(x),
            std_error: 0.0,
        });
    }
    let sd = (2.0 * epsilon * (horizon - t)).sqrt();
    let mut y = vec![0.0; x.len()];
    let exps: Vec<f64> = (0..n_mc)
        .map(|_| {
            let z = standard_normal_vec(rng, x.len());
            for i in 0..x.len() {
                y[i] = x[i] + sd * z[i];
            }
            -g(&y) / (2.0 * epsilon)
        })
        .collect();
    let shift = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = exps.iter().map(|e| (e - shift).exp()).collect();
    let n = n_mc as f64;
    let mean = scaled.iter().sum::<f64>() / n;
    let var = if n_mc > 1 {
        scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(Estimate {
        value: -2.0 * epsilon * (shift + mean.ln()),
        std_error: 2.0 * epsilon * (var / n).sqrt() / mean,
    })
}

/// Normal equations `(G + λI) δ = p` of the pointwise least-squares problem
/// `min_δ ‖∇_θu_θ · δ − F[u_θ]‖²` on one point set.
#[derive(Debug, Clone)]
pub struct GramSystem {
    pub g: DMatrix<f64>,
    pub p: DVector<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramSolution {
    pub delta: Vec<f64>,
    /// Ridge actually used after any escalation.
    pub lambda: f64,
    pub escalated: bool,
    /// `‖(G + λI)δ − p‖ / max(‖p‖, tiny)`.
    pub relative_residual: f64,
}

impl GramSystem {
    pub fn assemble(
        model: &ModelSpec,
        op: &OperatorSpec,
        theta: &[f64],
        batch: &XBatch,
        lambda: f64,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("ridge must be nonnegative, got {lambda}")));
        }
        model.check_params(theta)?;
        let m = model.n_params();
        let n = batch.len() as f64;
        let mut g = DMatrix::<f64>::zeros(m, m);
        let mut p = DVector::<f64>::zeros(m);
        let mut row = vec![0.0; m];
        for (x, w) in batch.iter() {
            model.grad_theta_into(theta, x, &mut row);
            let f = op.rhs(model, theta, x);
            let j = DVector::from_column_slice(&row);
            g.ger(w / n, &j, &j, 1.0);
            p.axpy(w * f / n, &j, 1.0);
        }
        Ok(Self { g, p, lambda })
    }

    /// Solves by Cholesky; a singular system is retried with the ridge raised
    /// to `1e-8`, then tenfold, up to `1e-2`.
    pub fn solve(&self) -> Result<GramSolution> {
        let m = self.p.len();
        let mut lambda = self.lambda;
        let mut escalated = false;
        loop {
            let mut a = self.g.clone();
            for k in 0..m {
                a[(k, k)] += lambda;
            }
            if let Some(chol) = a.clone().cholesky() {
                let delta = chol.solve(&self.p);
                if delta.iter().all(|v| v.is_finite()) {
                    let r = &a * &delta - &self.p;
                    return Ok(GramSolution {
                        relative_residual: r.norm() / self.p.norm().max(1e-300),
                        delta: delta.iter().copied().collect(),
                        lambda,
                        escalated,
                    });
                }
            }
            lambda = if lambda < 1e-8 { 1e-8 } else { lambda * 10.0 };
            escalated = true;
            if lambda > 1e-2 {
                return Err(Error::Singular { lambda });
            }
        }
    }
}

/// Pairs `(θᵢ(0), θ̄ᵢ(T))` of initial and marched parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetSet {
    pub pairs: Vec<(ParamVector, ParamVector)>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarchScheme {
    /// `θ ← θ + Δt δ(θ)`.
    Euler,
    /// Classical RK4 on `θ̇ = δ(θ)`, one fresh point set per step.
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarchConfig {
    pub dt: f64,
    pub steps: usize,
    pub lambda: f64,
    pub n_points: usize,
    pub scheme: MarchScheme,
    pub x_sampler: Option<XSampler>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarchStep {
    pub step: usize,
    pub relative_residual: f64,
    pub lambda: f64,
}

/// Marches every initial through `steps` least-squares steps. Initial `i`
/// samples its points from ChaCha stream `i` of `seed`.
pub fn time_march_targets(
    initials: &[ParamVector],
    op: &OperatorSpec,
    config: &MarchConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<(TargetSet, Vec<Vec<MarchStep>>)> {
    if !(config.dt > 0.0) || config.steps == 0 || config.n_points == 0 {
        return Err(Error::Config("marching needs dt > 0, steps ≥ 1, n_points ≥ 1".into()));
    }
    let Some(first) = initials.first() else {
        return Ok((TargetSet::default(), Vec::new()));
    };
    let model = first.spec;
    op.check_pairing(&model)?;
    let sampler = config
        .x_sampler
        .clone()
        .unwrap_or_else(|| XSampler::default_for(&model));
    sampler.validate()?;

    let march = |i: usize| -> Result<(ParamVector, Vec<MarchStep>)> {
        let init = &initials[i];
        if init.spec != model {
            return Err(Error::Config("initials of different models".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut theta = init.values.clone();
        let mut log = Vec::with_capacity(config.steps);
        let velocity = |theta: &[f64], rng: &mut ChaCha8Rng, step: usize, log: &mut Vec<MarchStep>| {
            let batch = sampler.sample(&model, Some(theta), config.n_points, rng)?;
            let sol = GramSystem::assemble(&model, op, theta, &batch, config.lambda)?.solve()?;
            log.push(MarchStep {
                step,
                relative_residual: sol.relative_residual,
                lambda: sol.lambda,
            });
            Ok::<_, Error>(sol.delta)
        };
        let h = config.dt;
        for step in 0..config.steps {
            match config.scheme {
                MarchScheme::Euler => {
                    let d = velocity(&theta, &mut rng, step, &mut log)?;
                    for (t, v) in theta.iter_mut().zip(&d) {
                        *t += h * v;
                    }
                }
                MarchScheme::Rk4 => {
                    let k1 = velocity(&theta, &mut rng, step, &mut log)?;
                    let shift = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> {
                        base.iter().zip(k).map(|(a, b)| a + s * b).collect()
                    };
                    let k2 = velocity(&shift(&theta, &k1, 0.5 * h), &mut rng, step, &mut log)?;
                    let k3 = velocity(&shift(&theta, &k2, 0.5 * h), &mut rng, step, &mut log)?;
                    let k4 = velocity(&shift(&theta, &k3, h), &mut rng, step, &mut log)?;
                    for j in 0..theta.len() {
                        theta[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                    }
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("time marching of initial {i}"),
                    t: (step + 1) as f64 * h,
                });
            }
        }
        Ok((ParamVector::new(model, theta)?, log))
    };
    let results = par::map_range(mode, initials.len(), march);
    let mut pairs = Vec::with_capacity(initials.len());
    let mut logs = Vec::with_capacity(initials.len());
    for (init, r) in initials.iter().zip(results) {
        let (end, log) = r?;
        pairs.push((init.clone(), end));
        logs.push(log);
    }
    Ok((TargetSet { pairs }, logs))
}

/// Relative squared error at one time; `None` when the reference norm is
/// below the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub t: f64,
    pub error: Option<f64>,
}

pub const NORM_FLOOR: f64 = 1e-12;

/// `‖u_θ − u*‖² / ‖u*‖²` on the batch.
pub fn relative_error(
    model: &ModelSpec,
    theta: &[f64],
    reference: &dyn Fn(&[f64]) -> f64,
    batch: &XBatch,
) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, w) in batch.iter() {
        let r = reference(x);
        num += w * (model.value(theta, x) - r).powi(2);
        den += w * r * r;
    }
    let n = batch.len() as f64;
    (den / n >= NORM_FLOOR).then(|| num / den)
}

/// Relative errors of `u_{θ(t)}` against `oracle(x, t)` at each stored time.
pub fn relative_error_curve(
    model: &ModelSpec,
    states: &[(f64, Vec<f64>)],
    oracle: &(dyn Fn(&[f64], f64) -> f64 + Sync),
    batch: &XBatch,
) -> Vec<ErrorPoint> {
    states
        .iter()
        .map(|(t, theta)| ErrorPoint {
            t: *t,
            error: relative_error(model, theta, &|x| oracle(x, *t), batch),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStat {
    pub t: f64,
    pub mean: f64,
    pub std: f64,
    pub valid: usize,
}

/// Mean and sample standard deviation across curves sharing one time grid.
pub fn aggregate_curves(curves: &[Vec<ErrorPoint>]) -> Result<Vec<CurveStat>> {
    let Some(first) = curves.first() else {
        return Ok(Vec::new());
    };
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Config("error curves have different time grids".into()));
    }
    Ok((0..first.len())
        .map(|k| {
            let vals: Vec<f64> = curves.iter().filter_map(|c| c[k].error).collect();
            let n = vals.len();
            let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            CurveStat {
                t: first[k].t,
                mean,
                std,
                valid: n,
            }
        })
        .collect())
}

/// `t,mean,std` CSV, the schema the plot emitter reads.
pub fn write_curve_csv(path: &Path, curve: &[CurveStat]) -> Result<()> {
    let mut out = String::from("t,mean,std\n");
    for c in curve {
        writeln!(out, "{:.10e},{:.10e},{:.10e}", c.t, c.mean, c.std).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn heat_of_constant_and_at_zero_time() {
        let mut r = rng(1);
        let e = heat_exact(&|_| 1.0, &[0.3, 0.4], 0.5, 100, &mut r).unwrap();
        assert_eq!(e.value, 1.0);
        let g = |x: &[f64]| x[0].sin();
        assert_eq!(heat_exact(&g, &[0.7], 0.0, 10, &mut r).unwrap().value, 0.7f64.sin());
        assert!(heat_exact(&g, &[0.7], 0.1, 0, &mut r).is_err());
    }

    #[test]
    fn heat_mc_matches_eigenmode() {
        let mut r = rng(2);
        let k = [1i64, 2];
        let g = |x: &[f64]| (PI * (x[0] + 2.0 * x[1])).sin();
        for &(x, t) in &[([0.1, 0.2], 0.01), ([0.3, -0.4], 0.05)] {
            let e = heat_exact(&g, &x, t, 20_000, &mut r).unwrap();
            let exact = heat_mode_exact(&k, 1.0, &x, t);
            assert!((e.value - exact).abs() < 3.0 * e.std_error, "{} vs {exact}", e.value);
        }
    }

    #[test]
    fn mode_decay_factor() {
        let v = heat_mode_exact(&[1, 0], 1.0, &[0.5, 0.0], 0.1);
        assert!((v - (-PI * PI * 0.1).exp()).abs() < 1e-15);
        assert!((v - 0.3726).abs() < 5e-4);
        assert_eq!(heat_mode_exact(&[2, 1], 3.0, &[0.1, 0.2], 0.0), 3.0 * (PI * 0.4).sin());
        assert!(heat_mode_exact(&[1], 1.0, &[0.5], 100.0).abs() < 1e-300);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (z, w) = gauss_hermite(10);
        let m = |p: i32| z.iter().zip(&w).map(|(a, b)| b * a.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn quadrature_matches_eigenmode() {
        let g = |x: &[f64]| (PI * (x[0] - x[1])).sin();
        let v = heat_exact_quadrature(&g, &[0.2, 0.7], 0.1, 30).unwrap();
        let exact = heat_mode_exact(&[1, -1], 1.0, &[0.2, 0.7], 0.1);
        assert!((v - exact).abs() < 1e-10);
    }

    #[test]
    fn spectral_solution_matches_modes() {
        let g = |x: &[f64]| 2.0 * (PI * x[0]).sin() + 0.5 * (PI * (3.0 * x[0] + x[1])).sin() + 0.25;
        let sol = PeriodicHeat::new(&g, 2, 16).unwrap();
        for &(x, t) in &[([0.1, 0.2], 0.0), ([0.35, -0.8], 0.01), ([-0.9, 0.4], 0.1)] {
            let exact = heat_mode_exact(&[1, 0], 2.0, &x, t) + heat_mode_exact(&[3, 1], 0.5, &x, t) + 0.25;
            assert!((sol.eval(&x, t) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_and_convolution_agree_on_model_data() {
        let model = ModelSpec::periodic_sine_tanh(2, 3);
        let mut r = rng(3);
        let theta: Vec<f64> = (0..model.n_params()).map(|_| r.random_range(-1.0..1.0)).collect();
        let g = |x: &[f64]| model.value(&theta, x);
        let sol = PeriodicHeat::new(&g, 2, 64).unwrap();
        for x in [[0.1, -0.3], [0.8, 0.5]] {
            let q = heat_exact_quadrature(&g, &x, 0.05, 40).unwrap();
            let s = sol.eval(&x, 0.05);
            assert!((s - q).abs() < 1e-6, "{s} vs {q}");
        }
    }

    #[test]
    fn upwind_trivial_profiles() {
        let zero = upwind_1d(&|_| 0.0, 2.0, 0.15, 400, 200).unwrap();
        assert!(zero.last.iter().all(|&v| v == 0.0));
        let c = upwind_1d(&|_| 0.7, 2.0, 0.15, 400, 200).unwrap();
        assert!(c.last.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upwind_conserves_and_is_tvd() {
        let g = |y: f64| (PI * y).sin() + 0.5 * (3.0 * PI * y).cos();
        let s = upwind_1d(&g, 2.0, 0.15, 4000, 1000).unwrap();
        for w in s.mass.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-10);
        }
        for w in s.total_variation.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn upwind_transports_small_data() {
        // Near zero the equation is u_t = 2u_y: translation to the left.
        let amp = 1e-4;
        let s = upwind_1d(&|y| amp * (PI * y).sin(), 2.0, 0.1, 2000, 1000).unwrap();
        for y in [-0.5, 0.0, 0.3] {
            let exact = amp * (PI * (y + 0.2)).sin();
            assert!((s.eval(y) - exact).abs() < 0.01 * amp);
        }
    }

    #[test]
    fn upwind_refuses_cfl_violation() {
        let r = upwind_1d(&|y| y.sin(), 2.0, 1.0, 10, 1000);
        assert!(matches!(r, Err(Error::Cfl { required_steps: 1000 })));
    }

    #[test]
    fn cole_hopf_trivial_costs() {
        let mut r = rng(4);
        let e = cole_hopf(&|_| 0.0, &[0.1, 0.2], 0.3, 1.0, 0.2, 1000, &mut r).unwrap();
        assert_eq!(e.value, 0.0);
        let e = cole_hopf(&|_| 1.7, &[0.1, 0.2], 0.3, 1.0, 0.2, 1000, &mut r).unwrap();
        assert!((e.value - 1.7).abs() < 1e-12);
        let g = |x: &[f64]| x[0] * x[0];
        assert_eq!(cole_hopf(&g, &[0.5], 1.0, 1.0, 0.2, 10, &mut r).unwrap().value, 0.25);
    }

    fn gaussian_cost(x: &[f64]) -> f64 {
        -0.8 * (-0.5 * (1.3 * (x[0] - 0.4)).powi(2)).exp()
    }

    #[test]
    fn cole_hopf_matches_quadrature_in_one_dimension() {
        let mut r = rng(5);
        let (eps, t, horizon, x): (f64, f64, f64, f64) = (0.2, 0.25, 1.0, 0.1);
        let var = 2.0 * eps * (horizon - t);
        // Trapezoid rule of ∫ N(y; x, var) exp(−g(y)/(2ε)) dy on a wide grid.
        let n = 20_001;
        let (a, b) = (x - 12.0 * var.sqrt(), x + 12.0 * var.sqrt());
        let h = (b - a) / (n - 1) as f64;
        let integral: f64 = (0..n)
            .map(|i| {
                let y = a + i as f64 * h;
                let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let dens = (-(y - x).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
                wt * h * dens * (-gaussian_cost(&[y]) / (2.0 * eps)).exp()
            })
            .sum();
        let quad = -2.0 * eps * integral.ln();
        let mc = cole_hopf(&gaussian_cost, &[x], t, horizon, eps, 20_000, &mut r).unwrap();
        assert!(((mc.value - quad) / quad).abs() < 0.01, "{} vs {quad}", mc.value);
    }

    #[test]
    fn cole_hopf_approaches_terminal_cost() {
        let g = |x: &[f64]| gaussian_cost(x) + 0.3 * x[1];
        let x = [0.2, -0.1];
        let mut r = rng(6);
        let far = (cole_hopf(&g, &x, 1.0 - 1e-3, 1.0, 0.2, 20_000, &mut r).unwrap().value - g(&x)).abs();
        let near = (cole_hopf(&g, &x, 1.0 - 1e-4, 1.0, 0.2, 20_000, &mut r).unwrap().value - g(&x)).abs();
        assert!(near < far, "{near} !< {far}");
    }

    #[test]
    fn gram_march_of_single_mode() {
        let model = ModelSpec::sine_series(1, 1);
        let init = ParamVector::new(model, vec![1.5]).unwrap();
        let config = MarchConfig {
            dt: 0.001,
            steps: 100,
            lambda: 1e-8,
            n_points: 256,
            scheme: MarchScheme::Euler,
            x_sampler: None,
        };
        let (targets, logs) =
            time_march_targets(&[init], &OperatorSpec::Heat, &config, 7, ExecMode::Sequential).unwrap();
        let c_t = targets.pairs[0].1.values[0];
        let exact = 1.5 * (-PI * PI * 0.1).exp();
        assert!(((c_t - exact) / exact).abs() < 0.01);
        assert!(logs[0].iter().all(|s| s.relative_residual < 1e-6));
    }

    #[test]
    fn gram_march_with_zero_rhs_stays_put() {
        // A constant-in-x model: F = Δu = 0, so p = 0 and δ = 0.
        let model = ModelSpec::periodic_sine_tanh(2, 2);
        let mut theta = vec![0.0; model.n_params()];
        theta[model.block("b").unwrap().range()].copy_from_slice(&[0.3, -0.4]);
        theta[model.block("c").unwrap().range()].copy_from_slice(&[1.0, 2.0]);
        let init = ParamVector::new(model, theta.clone()).unwrap();
        let config = MarchConfig {
            dt: 0.01,
            steps: 5,
            lambda: 0.0,
            n_points: 64,
            scheme: MarchScheme::Rk4,
            x_sampler: None,
        };
        let (targets, logs) =
            time_march_targets(&[init], &OperatorSpec::Heat, &config, 1, ExecMode::Sequential).unwrap();
        assert_eq!(targets.pairs[0].1.values, theta);
        // G is singular here, so the ridge must have been raised.
        assert!(logs[0].iter().all(|s| s.lambda >= 1e-8));
    }

    #[test]
    fn error_curves_and_aggregation() {
        let model = ModelSpec::sine_series(1, 1);
        let batch = XSampler::UniformBox { half_width: 1.0 }
            .sample(&model, None, 2000, &mut rng(8))
            .unwrap();
        let oracle = |x: &[f64], t: f64| heat_mode_exact(&[1], 1.0, x, t);
        // Exact trajectory: zero error.
        let states: Vec<(f64, Vec<f64>)> = [0.0, 0.05, 0.1]
            .iter()
            .map(|&t| (t, vec![(-PI * PI * t).exp()]))
            .collect();
        let exact = relative_error_curve(&model, &states, &oracle, &batch);
        assert!(exact.iter().all(|p| p.error.unwrap() < 1e-24));
        // Frozen model: error (1 − e^{−π²t})² / e^{−2π²t}, growing in t.
        let frozen: Vec<(f64, Vec<f64>)> = states.iter().map(|(t, _)| (*t, vec![1.0])).collect();
        let curve = relative_error_curve(&model, &frozen, &oracle, &batch);
        for p in &curve {
            let decay = (-PI * PI * p.t).exp();
            let expect = ((1.0 - decay) / decay).powi(2);
            assert!((p.error.unwrap() - expect).abs() < 1e-10);
        }
        assert!(curve.windows(2).all(|w| w[1].error > w[0].error));
        let zero_oracle = |_: &[f64], _: f64| 0.0;
        assert!(relative_error_curve(&model, &frozen, &zero_oracle, &batch)[0].error.is_none());

        let agg = aggregate_curves(&[exact, curve.clone()]).unwrap();
        assert_eq!(agg[2].valid, 2);
        assert!((agg[2].mean - curve[2].error.unwrap() / 2.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        write_curve_csv(&dir.path().join("c.csv"), &agg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
        assert!(text.starts_with("t,mean,std\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
