use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::{integrate, linspace, ForceCoefficients, Method, SystemDef, SystemKind};
use crate::error::{Error, Result};
use crate::losses::Batch;
use crate::seeding::{indexed_rng, stream_rng, Stream};
use crate::tensor::Tensor;

/// One noisy observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub trajectory: usize,
    pub t: f64,
    pub state: Vec<f64>,
    pub target: Vec<f64>,
    pub force: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub system: SystemKind,
    pub sigma: f64,
    pub seed: u64,
    pub n_traj: usize,
    pub n_points: usize,
    pub t_end: f64,
    /// Trajectories that failed to integrate and were redrawn.
    pub failures: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_s(&self) -> usize {
        self.system.system().n_s()
    }

    pub fn n_f(&self) -> usize {
        self.system.system().n_f()
    }

    /// Gathers the given samples into one column-per-sample batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (n_s, n_f) = (self.n_s(), self.n_f());
        let mut states = Tensor::zeros(n_s, indices.len());
        let mut targets = Tensor::zeros(n_s, indices.len());
        let mut forces = Tensor::zeros(n_f, indices.len());
        for (b, &idx) in indices.iter().enumerate() {
            let sample = self
                .samples
                .get(idx)
                .ok_or_else(|| Error::Dataset(format!("sample index {idx} out of range ({})", self.len())))?;
            for i in 0..n_s {
                states.set(i, b, sample.state[i]);
                targets.set(i, b, sample.target[i]);
            }
            for i in 0..n_f {
                forces.set(i, b, sample.force[i]);
            }
        }
        Batch::new(states, targets, (n_f > 0).then_some(forces))
    }

    pub fn full_batch(&self) -> Result<Batch> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// Disjoint `(train, validation)` sample indices, stable under `seed`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    if n < 2 {
        return Err(Error::Dataset(format!("need at least 2 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split));
    let n_val = (libm::round(n as f64 * val_fraction) as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Simulates `n_traj` trajectories on `[0, t_end]`, keeps `n_points` evenly
/// spaced samples of each, and adds `N(0, sigma^2)` noise to states and
/// derivatives. Failed trajectories are redrawn; more than 20% failures is an
/// error.
pub fn generate_dataset(
    system: &SystemDef,
    n_traj: usize,
    t_end: f64,
    n_points: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be a finite value >= 0, got {sigma}")));
    }
    if n_traj == 0 || n_points == 0 {
        return Err(Error::Config("n_traj and n_points must be positive".into()));
    }
    if !(t_end > 0.0) {
        return Err(Error::Config(format!("t_end must be positive, got {t_end}")));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("sigma: {e}")))?;
    let times = linspace(0.0, t_end, n_points);
    let max_failures = n_traj / 5;
    let mut failures = 0usize;
    let mut attempt = 0u64;
    let mut samples = Vec::with_capacity(n_traj * n_points);
    let mut traj = 0usize;
    while traj < n_traj {
        let mut rng = indexed_rng(seed, Stream::Data, attempt);
        attempt += 1;
        let s0 = system.sample_initial(&mut rng);
        let coeffs = if system.forced() { ForceCoefficients::sample(&mut rng) } else { ForceCoefficients::NONE };
        let rhs = |t: f64, s: &[f64]| system.derivative(s, t, &coeffs.at(t));
        let clean = match integrate(rhs, &s0, &times, Method::DATA) {
            Ok(tr) => tr,
            Err(_) => {
                failures += 1;
                if failures > max_failures {
                    return Err(Error::Dataset(format!(
                        "{failures} of {attempt} trajectories failed to integrate (limit 20%)"
                    )));
                }
                continue;
            }
        };
        for (&t, s) in clean.times.iter().zip(&clean.states) {
            let force = if system.forced() { coeffs.at(t) } else { Vec::new() };
            let mut target = system.derivative(s, t, &force)?;
            let mut state = s.clone();
            if sigma > 0.0 {
                for v in state.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
                for v in target.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            samples.push(Sample { trajectory: traj, t, state, target, force });
        }
        traj += 1;
    }
    Ok(Dataset { system: system.kind, sigma, seed, n_traj, n_points, t_end, failures, samples })
}
