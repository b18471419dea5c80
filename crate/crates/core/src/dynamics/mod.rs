//! Benchmark chaotic systems, a fixed-step Runge-Kutta integrator, trajectory
//! datasets and separation-growth measurement.
//!
//! Two systems are provided: the three-dimensional Rossler flow and the cyclic
//! Lorenz-96 model of arbitrary dimension `d >= 4`. Both implement
//! [`VectorField`], which is also the extension point for test systems.

mod dataset;
mod divergence;

pub use dataset::{generate_dataset, DatasetSpec, InitDistribution, TrajectorySet, TRAJ_MAGIC};
pub use divergence::{
    divergence_curve, divergence_from_bases, divergence_with_perturbations, DivergenceCurve,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-hand side of an autonomous ODE `dx/dt = f(x)`.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Writes `f(x)` into `out`. Both slices have length [`VectorField::dim`].
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Closed set of benchmark systems.
///
/// New systems would be added as variants here together with their
/// [`VectorField`] arm and a default [`InitDistribution`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SystemSpec {
    Rossler { a: f64, b: f64, c: f64 },
    Lorenz96 { forcing: f64, dim: usize },
}

impl SystemSpec {
    /// Rossler with a = 0.15, b = 0.2, c = 10.
    pub fn rossler_default() -> Self {
        SystemSpec::Rossler {
            a: 0.15,
            b: 0.2,
            c: 10.0,
        }
    }

    pub fn lorenz96(forcing: f64, dim: usize) -> Result<Self> {
        let s = SystemSpec::Lorenz96 { forcing, dim };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SystemSpec::Rossler { a, b, c } => {
                if !(a.is_finite() && b.is_finite() && c.is_finite()) {
                    return Err(Error::invalid("rossler parameters must be finite"));
                }
            }
            SystemSpec::Lorenz96 { forcing, dim } => {
                if dim < 4 {
                    return Err(Error::invalid(format!(
                        "lorenz96 needs dim >= 4, got {dim}"
                    )));
                }
                if !forcing.is_finite() {
                    return Err(Error::invalid("lorenz96 forcing must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemSpec::Rossler { .. } => "rossler",
            SystemSpec::Lorenz96 { .. } => "lorenz96",
        }
    }
}

impl VectorField for SystemSpec {
    fn dim(&self) -> usize {
        match *self {
            SystemSpec::Rossler { .. } => 3,
            SystemSpec::Lorenz96 { dim, .. } => dim,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            SystemSpec::Rossler { a, b, c } => rossler_into(x, a, b, c, out),
            SystemSpec::Lorenz96 { forcing, .. } => lorenz96_into(x, forcing, out),
        }
    }
}

fn rossler_into(s: &[f64], a: f64, b: f64, c: f64, out: &mut [f64]) {
    let (x, y, z) = (s[0], s[1], s[2]);
    out[0] = -y - z;
    out[1] = x + a * y;
    out[2] = b + z * (x - c);
}

fn lorenz96_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let next = x[(i + 1) % d];
        let prev = x[(i + d - 1) % d];
        let prev2 = x[(i + d - 2) % d];
        out[i] = (next - prev2) * prev - x[i] + forcing;
    }
}

/// Rossler right-hand side `(-y - z, x + a y, b + z (x - c))`.
pub fn rossler_rhs(state: [f64; 3], a: f64, b: f64, c: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    rossler_into(&state, a, b, c, &mut out);
    out
}

/// Lorenz-96 right-hand side with cyclic indexing.
pub fn lorenz96_rhs(state: &[f64], forcing: f64) -> Result<Vec<f64>> {
    if state.len() < 4 {
        return Err(Error::invalid(format!(
            "lorenz96 needs at least 4 components, got {}",
            state.len()
        )));
    }
    let mut out = vec![0.0; state.len()];
    lorenz96_into(state, forcing, &mut out);
    Ok(out)
}

/// Classical RK4 with internal step `tau / substeps`.
///
/// Returns `steps + 1` states, row-major, the first row being `x0`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    tau: f64,
    steps: usize,
    substeps: usize,
) -> Result<Vec<f64>> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::Shape(format!(
            "initial state has {} components, system has {d}",
            x0.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if steps == 0 || substeps == 0 {
        return Err(Error::invalid("steps and substeps must be >= 1"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { step: 0 });
    }

    let mut out = Vec::with_capacity((steps + 1) * d);
    out.extend_from_slice(x0);
    let mut stepper = Rk4::new(d);
    let mut x = x0.to_vec();
    let h = tau / substeps as f64;
    for step in 1..=steps {
        for _ in 0..substeps {
            stepper.step(field, &mut x, h);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step });
        }
        out.extend_from_slice(&x);
    }
    Ok(out)
}

/// Scratch buffers for one RK4 stage set.
struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(d: usize) -> Self {
        Rk4 {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    fn step<F: VectorField + ?Sized>(&mut self, field: &F, x: &mut [f64], h: f64) {
        field.eval(x, &mut self.k1);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        field.eval(&self.tmp, &mut self.k2);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        field.eval(&self.tmp, &mut self.k3);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        field.eval(&self.tmp, &mut self.k4);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

#[cfg(test)]
pub(crate) mod test_fields {
    use super::VectorField;

    /// dx/dt = -x componentwise.
    pub struct Decay(pub usize);

    impl VectorField for Decay {
        fn dim(&self) -> usize {
            self.0
        }
        fn eval(&self, x: &[f64], out: &mut [f64]) {
            for (o, v) in out.iter_mut().zip(x) {
                *o = -v;
            }
        }
    }
}
