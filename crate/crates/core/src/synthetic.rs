//! Seeded synthetic datasets for tests and benchmarks.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::RawDataset;
use crate::error::{Error, Result};
use crate::model::{rng_stream, FeaturePartition};

/// A generated dataset with the weights that produced it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: RawDataset,
    pub w_star: Vec<f64>,
}

fn gaussian_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

fn scaled_weights(d: usize, norm: f64, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let len = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    w.iter().map(|v| v * norm / len).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_shape(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput(format!("synthetic data needs n, d > 0 (got {n}x{d})")));
    }
    Ok(())
}

/// Binary labels `sign(w*^T x)` over standard normal features, with each
/// label flipped independently with probability `flip`.
pub fn classification(n: usize, d: usize, flip: f64, seed: u64) -> Result<Synthetic> {
    check_shape(n, d)?;
    if !(0.0..=0.5).contains(&flip) {
        return Err(Error::InvalidInput(format!("flip probability {flip} outside [0, 0.5]")));
    }
    let mut rng = rng_stream(seed, 0x4353_4c53);
    let w_star = scaled_weights(d, 3.0, &mut rng);
    let rows = gaussian_rows(n, d, &mut rng);
    let labels = rows
        .iter()
        .map(|x| {
            let y = if dot(&w_star, x) >= 0.0 { 1.0 } else { -1.0 };
            if rng.gen_bool(flip) {
                -y
            } else {
                y
            }
        })
        .collect();
    Ok(Synthetic { data: RawDataset::from_dense(&rows, labels)?, w_star })
}

/// Linear targets with Gaussian noise; a fraction `outliers` of samples get
/// a large additive corruption, which is what the robust loss is for.
pub fn regression(n: usize, d: usize, noise: f64, outliers: f64, seed: u64) -> Result<Synthetic> {
    check_shape(n, d)?;
    if !(0.0..=1.0).contains(&outliers) || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidInput("noise must be >= 0 and outlier fraction in [0, 1]".into()));
    }
    let mut rng = rng_stream(seed, 0x5245_4752);
    let w_star = scaled_weights(d, 1.0, &mut rng);
    let rows = gaussian_rows(n, d, &mut rng);
    let eps = Normal::new(0.0, noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let labels = rows
        .iter()
        .map(|x| {
            let mut y = dot(&w_star, x) + eps.sample(&mut rng);
            if rng.gen_bool(outliers) {
                y += if rng.gen_bool(0.5) { 10.0 } else { -10.0 };
            }
            y
        })
        .collect();
    Ok(Synthetic { data: RawDataset::from_dense(&rows, labels)?, w_star })
}

/// Classification data where party 0 (the label holder) owns `width`
/// features and `q - 1` passive parties own `width` each. A fraction
/// `passive_share` of the squared norm of `w*` sits on passive features.
/// Returns the dataset and the contiguous partition that realises it.
pub fn informative_passive(
    n: usize,
    q: usize,
    width: usize,
    passive_share: f64,
    seed: u64,
) -> Result<(Synthetic, FeaturePartition)> {
    if q < 2 {
        return Err(Error::InvalidInput("need at least one passive party".into()));
    }
    if !(0.0..=1.0).contains(&passive_share) {
        return Err(Error::InvalidInput(format!("passive share {passive_share} outside [0, 1]")));
    }
    let d = q * width;
    check_shape(n, d)?;
    let mut rng = rng_stream(seed, 0x5041_5353);
    let active = scaled_weights(width, 3.0 * (1.0 - passive_share).sqrt(), &mut rng);
    let passive = scaled_weights(d - width, 3.0 * passive_share.sqrt(), &mut rng);
    let w_star: Vec<f64> = active.into_iter().chain(passive).collect();
    let rows = gaussian_rows(n, d, &mut rng);
    let labels = rows
        .iter()
        .map(|x| if dot(&w_star, x) >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    let blocks = (0..q).map(|l| (l * width..(l + 1) * width).collect()).collect();
    let partition = FeaturePartition::new(blocks, d)?;
    Ok((Synthetic { data: RawDataset::from_dense(&rows, labels)?, w_star }, partition))
}
