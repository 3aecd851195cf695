//! Forward flow-matching noising: `z_k = (1 − t_k)·z0 + t_k·ε`, `t_k = k/K`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorData};

pub const DEFAULT_TOTAL_STEPS: u32 = 1000;
pub const DEFAULT_TIMESTEP: u32 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepSchedule {
    total_steps: u32,
    step: u32,
}

impl Default for TimestepSchedule {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_TOTAL_STEPS,
            step: DEFAULT_TIMESTEP,
        }
    }
}

impl TimestepSchedule {
    pub fn new(step: u32, total_steps: u32) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("total steps must be at least 1"));
        }
        if step > total_steps {
            return Err(Error::invalid(format!(
                "timestep {step} outside 0..={total_steps}"
            )));
        }
        Ok(Self { total_steps, step })
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn total_steps(&self) -> u32 {
        self.total_steps
    }

    pub fn t(&self) -> f64 {
        f64::from(self.step) / f64::from(self.total_steps)
    }
}

pub fn timestep_to_t(k: u32, total_steps: u32) -> Result<f64> {
    Ok(TimestepSchedule::new(k, total_steps)?.t())
}

/// `len` standard-normal draws from a ChaCha stream keyed by `seed`.
pub fn gaussian_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Interpolates toward a fixed noise vector. `t = 0` returns `z0` and
/// `t = 1` returns `noise` without touching the other operand.
pub fn interpolate(z0: &[f64], noise: &[f64], t: f64) -> Vec<f64> {
    debug_assert_eq!(z0.len(), noise.len());
    if t == 0.0 {
        return z0.to_vec();
    }
    if t == 1.0 {
        return noise.to_vec();
    }
    z0.iter().zip(noise).map(|(z, e)| (1.0 - t) * z + t * e).collect()
}

/// Noised latent with the same dims and dtype as `z0`.
pub fn noisy_latent(z0: &Tensor, schedule: TimestepSchedule, seed: u64) -> Tensor {
    let t = schedule.t();
    if t == 0.0 {
        return z0.clone();
    }
    let noise = gaussian_noise(z0.numel(), seed);
    let mixed = interpolate(&z0.to_f64_vec(), &noise, t);
    let data = match z0.data() {
        TensorData::F32(_) => TensorData::F32(mixed.iter().map(|&x| x as f32).collect()),
        TensorData::F64(_) => TensorData::F64(mixed),
    };
    Tensor::new(z0.dims().to_vec(), data).expect("dims unchanged")
}

/// Clean latent, its noised copy, and the seed that produced it.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub z0: Tensor,
    pub seed: u64,
    pub schedule: TimestepSchedule,
    pub z_k: Tensor,
}

impl LatentBatch {
    pub fn new(z0: Tensor, schedule: TimestepSchedule, seed: u64) -> Self {
        let z_k = noisy_latent(&z0, schedule, seed);
        Self {
            z0,
            seed,
            schedule,
            z_k,
        }
    }
}
