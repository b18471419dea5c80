use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{integrate, SystemSpec, VectorField};
use crate::error::{Error, Result};

/// Magic bytes at the start of a binary trajectory file.
pub const TRAJ_MAGIC: &[u8; 8] = b"TTDYN001";
const HEADER_LEN: usize = 8 + 8 * 5;

/// Distribution of initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitDistribution {
    /// `center + Uniform(-half_width, half_width)` independently per component.
    Uniform { center: Vec<f64>, half_width: f64 },
    /// `center` with `Normal(0, std)` added to a single component.
    GaussianComponent {
        center: Vec<f64>,
        component: usize,
        std: f64,
    },
    Fixed { center: Vec<f64> },
}

impl InitDistribution {
    /// Rossler: `[5, 0, 0] + Uni(-1, 1)`. Lorenz-96: `F * 1` with a Gaussian
    /// perturbation (std 0.01) on the last component only.
    pub fn default_for(system: &SystemSpec) -> Self {
        match *system {
            SystemSpec::Rossler { .. } => InitDistribution::Uniform {
                center: vec![5.0, 0.0, 0.0],
                half_width: 1.0,
            },
            SystemSpec::Lorenz96 { forcing, dim } => InitDistribution::GaussianComponent {
                center: vec![forcing; dim],
                component: dim - 1,
                std: 0.01,
            },
        }
    }

    fn center(&self) -> &[f64] {
        match self {
            InitDistribution::Uniform { center, .. }
            | InitDistribution::GaussianComponent { center, .. }
            | InitDistribution::Fixed { center } => center,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.center().len() != d {
            return Err(Error::Shape(format!(
                "initial-distribution center has {} components, system has {d}",
                self.center().len()
            )));
        }
        match *self {
            InitDistribution::Uniform { half_width, .. } if !(half_width >= 0.0) => {
                Err(Error::invalid("half_width must be >= 0"))
            }
            InitDistribution::GaussianComponent { component, std, .. } => {
                if component >= d {
                    Err(Error::invalid(format!("component {component} out of range")))
                } else if !(std >= 0.0) {
                    Err(Error::invalid("std must be >= 0"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InitDistribution::Uniform { center, half_width } => center
                .iter()
                .map(|c| {
                    if *half_width > 0.0 {
                        c + rng.gen_range(-*half_width..*half_width)
                    } else {
                        *c
                    }
                })
                .collect(),
            InitDistribution::GaussianComponent {
                center,
                component,
                std,
            } => {
                let mut x = center.clone();
                x[*component] += std * Normal::new(0.0, 1.0).unwrap().sample(rng);
                x
            }
            InitDistribution::Fixed { center } => center.clone(),
        }
    }
}

/// Parameters for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of trajectories.
    pub count: usize,
    /// Stored states per trajectory (after burn-in).
    pub steps: usize,
    pub tau: f64,
    pub init: InitDistribution,
    pub seed: u64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Leading integration steps discarded before storage.
    #[serde(default)]
    pub burn_in: usize,
    /// Std of additive Gaussian observation noise.
    #[serde(default)]
    pub obs_noise: f64,
}

fn default_substeps() -> usize {
    10
}

impl DatasetSpec {
    pub fn new(count: usize, steps: usize, tau: f64, init: InitDistribution, seed: u64) -> Self {
        DatasetSpec {
            count,
            steps,
            tau,
            init,
            seed,
            substeps: default_substeps(),
            burn_in: 0,
            obs_noise: 0.0,
        }
    }
}

/// Batch of trajectories sharing one time step.
///
/// `states` is row-major `[count][steps][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub states: Vec<f64>,
    pub count: usize,
    pub steps: usize,
    pub dim: usize,
    pub tau: f64,
    pub system: SystemSpec,
    pub seed: u64,
}

/// Per-trajectory generator: stream `index` of the run seed, so results do not
/// depend on generation order.
pub(crate) fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Integrates `spec.count` trajectories from initial states drawn per `spec.init`.
pub fn generate_dataset(system: &SystemSpec, spec: &DatasetSpec) -> Result<TrajectorySet> {
    system.validate()?;
    let d = system.dim();
    if spec.count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    if spec.steps < 2 {
        return Err(Error::invalid("trajectories need at least 2 states"));
    }
    if !(spec.obs_noise >= 0.0) {
        return Err(Error::invalid("obs_noise must be >= 0"));
    }
    spec.init.validate(d)?;

    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut states = Vec::with_capacity(spec.count * spec.steps * d);
    for j in 0..spec.count {
        let mut rng = trajectory_rng(spec.seed, j);
        let x0 = spec.init.sample(&mut rng);
        let total = spec.burn_in + spec.steps - 1;
        let traj = integrate(system, &x0, spec.tau, total, spec.substeps)?;
        let kept = &traj[spec.burn_in * d..];
        if spec.obs_noise > 0.0 {
            states.extend(
                kept.iter()
                    .map(|v| v + spec.obs_noise * noise.sample(&mut rng)),
            );
        } else {
            states.extend_from_slice(kept);
        }
    }
    Ok(TrajectorySet {
        states,
        count: spec.count,
        steps: spec.steps,
        dim: d,
        tau: spec.tau,
        system: *system,
        seed: spec.seed,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryJson {
    system: SystemSpec,
    tau: f64,
    seed: u64,
    states: Vec<Vec<Vec<f64>>>,
}

impl TrajectorySet {
    pub fn trajectory(&self, i: usize) -> &[f64] {
        let n = self.steps * self.dim;
        &self.states[i * n..(i + 1) * n]
    }

    pub fn state(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.steps + t) * self.dim;
        &self.states[start..start + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.steps < 2 || self.dim == 0 {
            return Err(Error::invalid("trajectory set needs M >= 1, T >= 2, d >= 1"));
        }
        if self.states.len() != self.count * self.steps * self.dim {
            return Err(Error::Shape("state buffer does not match M x T x d".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.system.dim() != self.dim {
            return Err(Error::Shape("system dimension does not match data".into()));
        }
        if let Some(pos) = self.states.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite state entry at flat index {pos}")));
        }
        Ok(())
    }

    /// Subset of trajectories `[start, start + count)`.
    pub fn slice(&self, start: usize, count: usize) -> TrajectorySet {
        let n = self.steps * self.dim;
        TrajectorySet {
            states: self.states[start * n..(start + count) * n].to_vec(),
            count,
            ..self.clone()
        }
    }

    /// Binary container: fixed header followed by row-major little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.states.len() * 8);
        buf.extend_from_slice(TRAJ_MAGIC);
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.count as u64).to_le_bytes());
        buf.extend_from_slice(&(self.steps as u64).to_le_bytes());
        buf.extend_from_slice(&self.tau.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for v in &self.states {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Parses the binary container. The header does not carry system
    /// parameters, so the caller supplies them.
    pub fn from_bytes(bytes: &[u8], system: SystemSpec, origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != TRAJ_MAGIC {
            return Err(Error::format(origin, "missing TTDYN001 header"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let dim = word(0) as usize;
        let count = word(1) as usize;
        let steps = word(2) as usize;
        let tau = f64::from_bits(word(3));
        let seed = word(4);
        let n = dim
            .checked_mul(count)
            .and_then(|v| v.checked_mul(steps))
            .ok_or_else(|| Error::format(origin, "header sizes overflow"))?;
        if bytes.len() != HEADER_LEN + 8 * n {
            return Err(Error::format(
                origin,
                format!("expected {} data bytes, found {}", 8 * n, bytes.len() - HEADER_LEN),
            ));
        }
        let states = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let set = TrajectorySet {
            states,
            count,
            steps,
            dim,
            tau,
            system,
            seed,
        };
        set.validate()
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(set)
    }

    pub fn write_bin(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_bin(path: &Path, system: SystemSpec) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, system, path)
    }

    /// Lossless text export (shortest round-trip float formatting).
    pub fn to_json(&self) -> Result<String> {
        let states = (0..self.count)
            .map(|i| {
                self.trajectory(i)
                    .chunks(self.dim)
                    .map(|s| s.to_vec())
                    .collect()
            })
            .collect();
        let doc = TrajectoryJson {
            system: self.system,
            tau: self.tau,
            seed: self.seed,
            states,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TrajectoryJson = serde_json::from_str(text)?;
        let count = doc.states.len();
        let steps = doc.states.first().map_or(0, |t| t.len());
        let dim = doc.system.dim();
        let mut states = Vec::with_capacity(count * steps * dim);
        for traj in &doc.states {
            if traj.len() != steps {
                return Err(Error::Shape("ragged trajectories in JSON export".into()));
            }
            for s in traj {
                if s.len() != dim {
                    return Err(Error::Shape("state width does not match system".into()));
                }
                states.extend_from_slice(s);
            }
        }
        let set = TrajectorySet {
            states,
            count,
            steps,
            dim,
            tau: doc.tau,
            system: doc.system,
            seed: doc.seed,
        };
        set.validate()?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rossler(seed: u64) -> TrajectorySet {
        let sys = SystemSpec::rossler_default();
        let spec = DatasetSpec::new(4, 50, 0.1, InitDistribution::default_for(&sys), seed);
        generate_dataset(&sys, &spec).unwrap()
    }

    #[test]
    fn rossler_initial_states_in_box() {
        let set = small_rossler(3);
        for i in 0..set.count {
            let x0 = set.state(i, 0);
            assert!((x0[0] - 5.0).abs() <= 1.0);
            assert!(x0[1].abs() <= 1.0 && x0[2].abs() <= 1.0);
        }
    }

    #[test]
    fn lorenz_perturbs_last_component_only() {
        let sys = SystemSpec::lorenz96(10.0, 6).unwrap();
        let spec = DatasetSpec::new(5, 3, 0.05, InitDistribution::default_for(&sys), 11);
        let set = generate_dataset(&sys, &spec).unwrap();
        for i in 0..set.count {
            let x0 = set.state(i, 0);
            assert!(x0[..5].iter().all(|&v| v == 10.0));
            assert!(x0[5] != 10.0 && (x0[5] - 10.0).abs() < 0.1);
        }
    }

    #[test]
    fn same_seed_is_bit_identical_different_seed_differs() {
        let a = small_rossler(5);
        let b = small_rossler(5);
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = small_rossler(6);
        assert_ne!(a.state(0, 0), c.state(0, 0));
    }

    #[test]
    fn burn_in_drops_prefix() {
        let sys = SystemSpec::rossler_default();
        let init = InitDistribution::Fixed {
            center: vec![5.0, 0.0, 0.0],
        };
        let mut spec = DatasetSpec::new(1, 10, 0.1, init, 0);
        let full = generate_dataset(&sys, &spec).unwrap();
        spec.burn_in = 3;
        spec.steps = 7;
        let cut = generate_dataset(&sys, &spec).unwrap();
        assert_eq!(cut.state(0, 0), full.state(0, 3));
        assert_eq!(cut.state(0, 6), full.state(0, 9));
    }

    #[test]
    fn observation_noise_changes_states() {
        let sys = SystemSpec::rossler_default();
        let mut spec = DatasetSpec::new(1, 10, 0.1, InitDistribution::default_for(&sys), 1);
        let clean = generate_dataset(&sys, &spec).unwrap();
        spec.obs_noise = 0.1;
        let noisy = generate_dataset(&sys, &spec).unwrap();
        assert_ne!(clean.states, noisy.states);
        let max_dev = clean
            .states
            .iter()
            .zip(&noisy.states)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1.0);
    }

    #[test]
    fn binary_and_json_round_trip() {
        let set = small_rossler(9);
        let back = TrajectorySet::from_bytes(&set.to_bytes(), set.system, Path::new("mem")).unwrap();
        assert_eq!(back, set);
        let json = set.to_json().unwrap();
        assert_eq!(TrajectorySet::from_json(&json).unwrap(), set);
    }

    #[test]
    fn binary_header_layout() {
        let set = small_rossler(1);
        let bytes = set.to_bytes();
        assert_eq!(&bytes[..8], b"TTDYN001");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 50);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 0.1);
        assert_eq!(u64::from_le_bytes(bytes[40..48].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 48 + 8 * 4 * 50 * 3);
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 1);
        assert!(TrajectorySet::from_bytes(&bad, set.system, Path::new("mem")).is_err());
    }

    #[test]
    fn rejects_zero_count() {
        let sys = SystemSpec::rossler_default();
        let spec = DatasetSpec::new(0, 10, 0.1, InitDistribution::default_for(&sys), 0);
        assert!(generate_dataset(&sys, &spec).is_err());
    }
}
