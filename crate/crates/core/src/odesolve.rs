//! Explicit integrators for `ẏ = f(t, y)` and an Euler-Maruyama scheme for
//! controlled diffusions `dX = α(X, t) dt + √(2ε) dW`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::rom::{read_f64_le, write_f64_le};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub kind: SolverKind,
    /// Step count for the fixed-step methods.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    /// Accepted plus rejected steps allowed to DOPRI5.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_steps() -> usize {
    10
}
fn default_rtol() -> f64 {
    1e-6
}
fn default_atol() -> f64 {
    1e-8
}
fn default_max_steps() -> usize {
    100_000
}

impl SolverSpec {
    pub fn euler(steps: usize) -> Self {
        Self {
            kind: SolverKind::Euler,
            steps,
            ..Self::dopri5(default_rtol(), default_atol())
        }
    }

    pub fn rk4(steps: usize) -> Self {
        Self {
            kind: SolverKind::Rk4,
            steps,
            ..Self::dopri5(default_rtol(), default_atol())
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            kind: SolverKind::Dopri5,
            steps: default_steps(),
            rtol,
            atol,
            max_steps: default_max_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Euler | SolverKind::Rk4 if self.steps == 0 => {
                Err(Error::Config("fixed-step solver needs at least one step".into()))
            }
            SolverKind::Dopri5 if !(self.rtol > 0.0 && self.atol > 0.0) => Err(Error::Config(
                format!("tolerances must be positive (rtol {}, atol {})", self.rtol, self.atol),
            )),
            SolverKind::Dopri5 if self.max_steps == 0 => {
                Err(Error::Config("max_steps must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Interp {
    /// Cubic Hermite from node values and node derivatives.
    Hermite(Vec<Vec<f64>>),
    /// Per-step Dormand-Prince continuous extension coefficients.
    Dopri(Vec<[Vec<f64>; 5]>),
}

/// States at the accepted time points, with dense output between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Scaled embedded error estimate of each accepted adaptive step (≤ 1).
    pub step_errors: Vec<f64>,
    pub stats: SolveStats,
    interp: Interp,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// State at time `t` within the integrated span.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        let (lo, hi) = (
            self.times[0].min(*self.times.last().expect("nonempty")),
            self.times[0].max(*self.times.last().expect("nonempty")),
        );
        let tol = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
        if !(t >= lo - tol && t <= hi + tol) {
            return Err(Error::Config(format!("t = {t} outside [{lo}, {hi}]")));
        }
        if self.times.len() == 1 {
            return Ok(self.states[0].clone());
        }
        let forward = self.times[1] > self.times[0];
        let k = self
            .times
            .windows(2)
            .position(|w| if forward { t <= w[1] } else { t >= w[1] })
            .unwrap_or(self.times.len() - 2);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (y0, y1) = (&self.states[k], &self.states[k + 1]);
        Ok(match &self.interp {
            Interp::Hermite(f) => hermite(y0, y1, &f[k], &f[k + 1], h, s),
            Interp::Dopri(coef) => {
                let [r1, r2, r3, r4, r5] = &coef[k];
                let s1 = 1.0 - s;
                (0..y0.len())
                    .map(|i| r1[i] + s * (r2[i] + s1 * (r3[i] + s * (r4[i] + s1 * r5[i]))))
                    .collect()
            }
        })
    }

    /// `t,y0,y1,…` with one row per accepted time point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t");
        for i in 0..self.dim() {
            out.push_str(&format!(",y{i}"));
        }
        out.push('\n');
        for (t, y) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{t:.17e}"));
            for v in y {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    /// `stem.json` manifest plus `stem.bin` holding, per time point, `t`
    /// followed by the state, as little-endian `f64`.
    pub fn write_binary(&self, stem: &Path) -> Result<()> {
        write_rows_binary(stem, &self.times, &self.states)
    }
}

/// Reads `(times, states)` back from files written by
/// [`Trajectory::write_binary`] or [`write_rows_binary`].
pub fn read_rows_binary(stem: &Path) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let dim = manifest["dim"]
        .as_u64()
        .ok_or_else(|| Error::Config("trajectory manifest lacks `dim`".into()))? as usize;
    let points = manifest["points"]
        .as_u64()
        .ok_or_else(|| Error::Config("trajectory manifest lacks `points`".into()))? as usize;
    let flat = read_f64_le(&stem.with_extension("bin"))?;
    if flat.len() != points * (dim + 1) {
        return Err(Error::Dimension {
            what: "trajectory data".into(),
            expected: points * (dim + 1),
            got: flat.len(),
        });
    }
    let (times, states) = flat.chunks_exact(dim + 1).map(|r| (r[0], r[1..].to_vec())).unzip();
    Ok((times, states))
}

/// Writes `(t, state)` rows in the trajectory binary format.
pub fn write_rows_binary(stem: &Path, times: &[f64], states: &[Vec<f64>]) -> Result<()> {
    let dim = states.first().map(Vec::len).unwrap_or(0);
    let mut flat = Vec::with_capacity(times.len() * (dim + 1));
    for (t, y) in times.iter().zip(states) {
        flat.push(*t);
        flat.extend_from_slice(y);
    }
    let bin = stem.with_extension("bin");
    write_f64_le(&bin, &flat)?;
    let manifest = serde_json::json!({
        "points": times.len(),
        "dim": dim,
        "row": "t, state",
        "data_file": bin.file_name().map(|s| s.to_string_lossy().into_owned()),
    });
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn hermite(y0: &[f64], y1: &[f64], f0: &[f64], f1: &[f64], h: f64, s: f64) -> Vec<f64> {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
        .collect()
}

fn check_finite(y: &[f64], t: f64, context: &str) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.into(),
            t,
        })
    }
}

/// One classical RK4 step; `k1` must hold `f(t, y)`. Returns the new state.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], k1: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    f(t + 0.5 * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4);
    (0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrates `ẏ = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, solver: &SolverSpec) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    solver.validate()?;
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(Error::Config("integration span must be finite".into()));
    }
    check_finite(y0, t0, "initial state")?;
    match solver.kind {
        SolverKind::Euler | SolverKind::Rk4 => fixed_step(&mut f, y0, t0, t1, solver),
        SolverKind::Dopri5 => dopri5(&mut f, y0, t0, t1, solver),
    }
}

fn fixed_step<F>(f: &mut F, y0: &[f64], t0: f64, t1: f64, solver: &SolverSpec) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let steps = solver.steps;
    let h = (t1 - t0) / steps as f64;
    let mut times = vec![t0];
    let mut states = vec![y0.to_vec()];
    let mut derivs = Vec::with_capacity(steps + 1);
    let mut stats = SolveStats::default();
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    f(t0, &y, &mut k1);
    stats.evaluations += 1;
    if t0 == t1 {
        derivs.push(k1);
        return Ok(Trajectory {
            times,
            states,
            step_errors: Vec::new(),
            stats,
            interp: Interp::Hermite(derivs),
        });
    }
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let next = match solver.kind {
            SolverKind::Euler => (0..n).map(|i| y[i] + h * k1[i]).collect(),
            _ => {
                stats.evaluations += 3;
                rk4_step(f, t, &y, &k1, h)
            }
        };
        let t_next = if s + 1 == steps { t1 } else { t0 + (s + 1) as f64 * h };
        check_finite(&next, t_next, "ode state")?;
        derivs.push(std::mem::replace(&mut k1, vec![0.0; n]));
        f(t_next, &next, &mut k1);
        stats.evaluations += 1;
        stats.accepted += 1;
        y = next;
        times.push(t_next);
        states.push(y.clone());
    }
    derivs.push(k1);
    Ok(Trajectory {
        times,
        states,
        step_errors: Vec::new(),
        stats,
        interp: Interp::Hermite(derivs),
    })
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn rms_scaled(v: &[f64], y0: &[f64], y1: &[f64], atol: f64, rtol: f64) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sk = atol + rtol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (s / v.len().max(1) as f64).sqrt()
}

fn dopri5<F>(f: &mut F, y0: &[f64], t0: f64, t1: f64, solver: &SolverSpec) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    const SAFE: f64 = 0.9;
    const BETA: f64 = 0.04;
    const FAC_MIN: f64 = 0.2;
    const FAC_MAX: f64 = 10.0;
    let (rtol, atol) = (solver.rtol, solver.atol);
    let n = y0.len();
    let span = t1 - t0;
    let dir = if span >= 0.0 { 1.0 } else { -1.0 };
    let mut stats = SolveStats::default();
    let mut times = vec![t0];
    let mut states = vec![y0.to_vec()];
    let mut coefs = Vec::new();
    let mut step_errors = Vec::new();
    if span == 0.0 || n == 0 {
        return Ok(Trajectory {
            times,
            states,
            step_errors,
            stats,
            interp: Interp::Dopri(coefs),
        });
    }

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    f(t0, &y, &mut k1);
    stats.evaluations += 1;

    // Initial step from the norms of y₀, f(y₀) and a difference quotient.
    let zeros = vec![0.0; n];
    let d0 = rms_scaled(&y, &y, &zeros, atol, rtol);
    let d1 = rms_scaled(&k1, &y, &zeros, atol, rtol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span.abs());
    let y_probe: Vec<f64> = (0..n).map(|i| y[i] + dir * h0 * k1[i]).collect();
    let mut f_probe = vec![0.0; n];
    f(t0 + dir * h0, &y_probe, &mut f_probe);
    stats.evaluations += 1;
    let diff: Vec<f64> = (0..n).map(|i| f_probe[i] - k1[i]).collect();
    let d2 = rms_scaled(&diff, &y, &zeros, atol, rtol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(span.abs());

    let mut t = t0;
    let mut fac_old: f64;
    let mut last_rejected = false;
    let mut stage = vec![vec![0.0; n]; 6];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut err = vec![0.0; n];
    loop {
        if stats.accepted + stats.rejected >= solver.max_steps {
            return Err(Error::MaxSteps(solver.max_steps));
        }
        let remaining = (t1 - t) * dir;
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        let hs = dir * h;
        let [k2, k3, k4, k5, k6, _] = &mut stage[..] else {
            unreachable!()
        };
        for i in 0..n {
            tmp[i] = y[i] + hs * A21 * k1[i];
        }
        f(t + C2 * hs, &tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * hs, &tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * hs, &tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * hs, &tmp, k5);
        for i in 0..n {
            tmp[i] = y[i]
                + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + hs, &tmp, k6);
        for i in 0..n {
            y_new[i] = y[i]
                + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        let t_new = if last { t1 } else { t + hs };
        f(t_new, &y_new, &mut k7);
        stats.evaluations += 6;
        for i in 0..n {
            err[i] = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let en = rms_scaled(&err, &y, &y_new, atol, rtol);
        if !en.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            // Shrink hard and retry; give up once the step is negligible.
            stats.rejected += 1;
            h *= FAC_MIN;
            if h <= 1e-14 * (1.0 + t.abs()) {
                return Err(Error::NonFinite {
                    context: "ode state".into(),
                    t,
                });
            }
            last_rejected = true;
            continue;
        }
        let fac11 = en.powf(0.2 - BETA * 0.75);
        if en <= 1.0 {
            let r5: Vec<f64> = (0..n)
                .map(|i| {
                    hs * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i])
                })
                .collect();
            let ydiff: Vec<f64> = (0..n).map(|i| y_new[i] - y[i]).collect();
            let bspl: Vec<f64> = (0..n).map(|i| hs * k1[i] - ydiff[i]).collect();
            let r4: Vec<f64> = (0..n).map(|i| ydiff[i] - hs * k7[i] - bspl[i]).collect();
            coefs.push([y.clone(), ydiff, bspl, r4, r5]);
            step_errors.push(en);
            stats.accepted += 1;
            fac_old = en.max(1e-4);
            let mut fac = fac11 / fac_old.powf(BETA);
            fac = (fac / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            times.push(t);
            states.push(y.clone());
            if last {
                break;
            }
            h = h_new;
        } else {
            stats.rejected += 1;
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
    }
    Ok(Trajectory {
        times,
        states,
        step_errors,
        stats,
        interp: Interp::Dopri(coefs),
    })
}

/// Settings for [`euler_maruyama`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    /// Noise level; the diffusion coefficient is `√(2ε)`.
    pub epsilon: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    /// Keep every intermediate state, not only the endpoints.
    #[serde(default)]
    pub record_paths: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub finals: Vec<Vec<f64>>,
    /// `∫ ½|α(X, t)|² dt` along each path (left-point rule).
    pub control_energy: Vec<f64>,
    /// `paths[p][k]` is the state of path `p` at `times[k]`, when recorded.
    pub paths: Option<Vec<Vec<Vec<f64>>>>,
}

/// Simulates `dX = α(X, t) dt + √(2ε) dW` from `x0` with step `dt`, the last
/// step shortened to land on `t_end`. Path `p` draws its noise from its own
/// ChaCha stream (`seed`, stream `p`), so results do not depend on how paths
/// are scheduled.
pub fn euler_maruyama<A>(
    drift: A,
    x0: &[f64],
    spec: &SdeSpec,
    seed: u64,
    mode: ExecMode,
) -> Result<PathEnsemble>
where
    A: Fn(&[f64], f64, &mut [f64]) + Sync + Send,
{
    if !(spec.dt > 0.0 && spec.t_end >= 0.0 && spec.epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "need dt > 0, t_end ≥ 0, ε ≥ 0 (got {}, {}, {})",
            spec.dt, spec.t_end, spec.epsilon
        )));
    }
    if spec.n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let d = x0.len();
    let n_steps = (spec.t_end / spec.dt - 1e-9).ceil().max(0.0) as usize;
    let mut times: Vec<f64> = (0..=n_steps).map(|k| (k as f64 * spec.dt).min(spec.t_end)).collect();
    if let Some(last) = times.last_mut() {
        *last = spec.t_end;
    }
    let sigma = (2.0 * spec.epsilon).sqrt();

    let run = |p: usize| -> Result<(Vec<f64>, f64, Option<Vec<Vec<f64>>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut x = x0.to_vec();
        let mut a = vec![0.0; d];
        let mut energy = 0.0;
        let mut path = spec.record_paths.then(|| vec![x.clone()]);
        for k in 0..n_steps {
            let t = times[k];
            let h = times[k + 1] - t;
            drift(&x, t, &mut a);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "drift".into(),
                    t,
                });
            }
            energy += 0.5 * a.iter().map(|v| v * v).sum::<f64>() * h;
            let sq = h.sqrt();
            for i in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[i] += a[i] * h + sigma * sq * z;
            }
            if let Some(path) = path.as_mut() {
                path.push(x.clone());
            }
        }
        Ok((x, energy, path))
    };
    let results = par::map_range(mode, spec.n_paths, run);
    let mut finals = Vec::with_capacity(spec.n_paths);
    let mut control_energy = Vec::with_capacity(spec.n_paths);
    let mut paths = spec.record_paths.then(Vec::new);
    for r in results {
        let (x, e, path) = r?;
        finals.push(x);
        control_energy.push(e);
        if let (Some(all), Some(path)) = (paths.as_mut(), path) {
            all.push(path);
        }
    }
    Ok(PathEnsemble {
        times,
        finals,
        control_energy,
        paths,
    })
}
