//! SplitMix64: the 64-bit splittable generator behind every seeded draw in
//! this crate. Pure integer state transitions plus IEEE arithmetic, so streams
//! are reproducible bit-for-bit across runs and platforms.

/// SplitMix64 generator (Steele, Lea & Flood 2014). One `u64` of state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    /// Cached second output of the polar Gaussian transform.
    spare_gauss: Option<f64>,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Scramble (seed, stream) into a fresh seed; used to give every iteration
/// or run its own reproducible substream.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    SplitMix64::new(seed ^ stream.wrapping_mul(GOLDEN_GAMMA)).next_u64()
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 {
            state: seed,
            spare_gauss: None,
        }
    }

    /// Deterministically derive an independent stream for substream `index`,
    /// e.g. one seed per Frank-Wolfe iteration or per benchmark run.
    pub fn derive(seed: u64, index: u64) -> Self {
        SplitMix64::new(mix_seed(seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via the Marsaglia polar method.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.spare_gauss.take() {
            return g;
        }
        loop {
            let u = self.next_range(-1.0, 1.0);
            let v = self.next_range(-1.0, 1.0);
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_gauss = Some(v * factor);
                return u * factor;
            }
        }
    }

    /// Uniform point on the unit sphere in `dim` dimensions.
    pub fn unit_sphere(&mut self, dim: usize) -> Vec<f64> {
        debug_assert!(dim > 0);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.next_gaussian()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = SplitMix64::derive(7, 0);
        let mut b = SplitMix64::derive(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut g = SplitMix64::new(3);
        for _ in 0..1000 {
            let x = g.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn sphere_points_are_unit() {
        let mut g = SplitMix64::new(11);
        for dim in [1, 2, 5, 40] {
            let v = g.unit_sphere(dim);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_moments_roughly_standard() {
        let mut g = SplitMix64::new(5);
        let n = 20000;
        let draws: Vec<f64> = (0..n).map(|_| g.next_gaussian()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
