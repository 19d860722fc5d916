//! Synthetic Gaussian designs: `x_ij ~ N(0, 1/n)`, `y = X beta* + w`.
//!
//! Every random quantity is drawn from its own ChaCha8 stream, selected by
//! `(seed, fnv1a(entity) + index)`. The outputs therefore depend only on
//! the spec and seed, never on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// 64-bit FNV-1a.
pub fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// RNG for the named entity and index under a master seed.
pub fn stream(seed: u64, entity: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(entity).wrapping_add(index));
    rng
}

/// Derive a child seed, e.g. one per repetition or sweep cell.
pub fn child_seed(seed: u64, entity: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, entity, index).next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaPrior {
    /// i.i.d. `N(0, variance)`.
    Gaussian { variance: f64 },
    Constant { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    Gaussian { sd: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub beta_prior: BetaPrior,
    pub noise: Noise,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The ridge experiment of the K-fold comparison: `beta* ~ N(0, 4 I)`, unit noise.
    pub fn figure1(n: usize, p: usize, seed: u64) -> Self {
        Self { n, p, beta_prior: BetaPrior::Gaussian { variance: 4.0 }, noise: Noise::Gaussian { sd: 1.0 }, seed }
    }

    pub fn noise_sd(&self) -> f64 {
        match self.noise {
            Noise::Gaussian { sd } => sd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(Error::InvalidParameter(format!("need n >= 2 and p >= 1, got n={}, p={}", self.n, self.p)));
        }
        let Noise::Gaussian { sd } = self.noise;
        if !(sd.is_finite() && sd >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise sd must be >= 0, got {sd}")));
        }
        match self.beta_prior {
            BetaPrior::Gaussian { variance } if !(variance.is_finite() && variance >= 0.0) => {
                Err(Error::InvalidParameter(format!("prior variance must be >= 0, got {variance}")))
            }
            BetaPrior::Constant { value } if !value.is_finite() => Err(Error::NonFinite("prior constant".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub data: Dataset,
    pub beta_star: DVector<f64>,
    pub noise: DVector<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> DMatrix<f64> {
    // filled row by row so that a row's entries are consecutive draws
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = sd * z;
        }
    }
    m
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, sd: f64) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| { let z: f64 = StandardNormal.sample(rng); sd * z }))
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let x = gaussian_matrix(&mut stream(spec.seed, "design", 0), spec.n, spec.p, 1.0 / (spec.n as f64).sqrt());
    let beta_star = match spec.beta_prior {
        BetaPrior::Gaussian { variance } => gaussian_vector(&mut stream(spec.seed, "beta", 0), spec.p, variance.sqrt()),
        BetaPrior::Constant { value } => DVector::from_element(spec.p, value),
    };
    let noise = gaussian_vector(&mut stream(spec.seed, "noise", 0), spec.n, spec.noise_sd());
    let y = &x * &beta_star + &noise;
    Ok(Synthetic { data: Dataset::new(x, y)?, beta_star, noise })
}

/// Fresh test draws `x_new ~ N(0, I/n)` with the training `n`, and
/// `y_new = x_new' beta* + w_new`.
pub fn generate_test(spec: &SyntheticSpec, beta_star: &DVector<f64>, m: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    spec.validate()?;
    if m < 1 {
        return Err(Error::InvalidParameter("need m >= 1 test draws".into()));
    }
    if beta_star.len() != spec.p {
        return Err(Error::DimensionMismatch(format!("beta* has {} entries, p = {}", beta_star.len(), spec.p)));
    }
    let x_new = gaussian_matrix(&mut stream(seed, "test_design", 0), m, spec.p, 1.0 / (spec.n as f64).sqrt());
    let noise = gaussian_vector(&mut stream(seed, "test_noise", 0), m, spec.noise_sd());
    let y_new = &x_new * beta_star + noise;
    Ok((x_new, y_new))
}
