//! Error metrics and seeded noise.

use alloc::vec::Vec;
use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

/// Root-mean-square difference of two equally long series.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err("rmse series differ in length"));
    }
    if a.is_empty() {
        return Err(Error::Coverage("rmse of empty series".into()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(libm::sqrt(s / a.len() as f64))
}

/// Index range of samples with `t0 ≤ t ≤ t1` (small slack for rounding).
pub fn window_indices(times: &[f64], t0: f64, t1: f64) -> core::ops::Range<usize> {
    let eps = 1e-9 * (1.0 + t1.abs());
    let start = times.iter().position(|&t| t >= t0 - eps).unwrap_or(times.len());
    let end = times.iter().rposition(|&t| t <= t1 + eps).map_or(start, |i| i + 1).max(start);
    start..end
}

/// RMSE restricted to samples with `t0 ≤ t ≤ t1`.
pub fn rmse_window(times: &[f64], a: &[f64], b: &[f64], t0: f64, t1: f64) -> Result<f64> {
    if times.len() != a.len() {
        return Err(dim_err("times and series differ in length"));
    }
    let r = window_indices(times, t0, t1);
    rmse(&a[r.clone()], &b[r])
}

/// Earliest `t ≥ t_event` from which `|est − truth| ≤ band·|truth|` holds for
/// every later sample up to `t_end`. `None` if the band is never held.
pub fn settling_time(times: &[f64], est: &[f64], truth: &[f64], t_event: f64, t_end: f64, band: f64) -> Option<f64> {
    let r = window_indices(times, t_event, t_end);
    let mut settled_from: Option<usize> = None;
    for i in r.clone() {
        let inside = (est[i] - truth[i]).abs() <= band * truth[i].abs();
        if inside {
            settled_from.get_or_insert(i);
        } else {
            settled_from = None;
        }
    }
    settled_from.map(|i| times[i] - t_event)
}

/// Component `j` of a list of vectors.
pub fn component(v: &[DVector<f64>], j: usize) -> Vec<f64> {
    v.iter().map(|x| x[j]).collect()
}

/// Seeded Gaussian generator; identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream `stream` of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseSource { rng }
    }

    pub fn standard(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Zero-mean vector with per-channel standard deviations `std`.
    pub fn vector(&mut self, std: &[f64]) -> DVector<f64> {
        DVector::from_iterator(std.len(), std.iter().map(|s| s * self.standard()))
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        use rand_chacha::rand_core::RngCore;
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, -3.0], &[0.0, 0.0]).unwrap(), 3.0);
        assert!(rmse(&[1.0], &[]).is_err());
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(rmse_window(&t, &[9.0, 1.0, 1.0, 9.0], &[0.0, 0.0, 0.0, 0.0], 1.0, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn settling_requires_staying_inside() {
        let t = [0.0, 1.0, 2.0, 3.0, 4.0];
        let truth = [10.0; 5];
        let est = [10.0, 12.0, 10.1, 11.0, 10.1];
        assert_eq!(settling_time(&t, &est, &truth, 0.0, 4.0, 0.02), Some(4.0));
        assert_eq!(settling_time(&t, &[12.0; 5], &truth, 0.0, 4.0, 0.02), None);
    }

    #[test]
    fn noise_is_reproducible() {
        let mut a = NoiseSource::new(7);
        let mut b = NoiseSource::new(7);
        let va: Vec<f64> = (0..5).map(|_| a.standard()).collect();
        let vb: Vec<f64> = (0..5).map(|_| b.standard()).collect();
        assert_eq!(va, vb);
        let mut c = NoiseSource::with_stream(7, 1);
        assert_ne!(va[0], c.standard());
        let v = NoiseSource::new(1).vector(&[0.0, 2.0]);
        assert_eq!(v[0], 0.0);
        let u = NoiseSource::new(3).uniform();
        assert!((0.0..1.0).contains(&u));
    }
}
