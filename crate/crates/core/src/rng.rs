//! Counter-based random streams.
//!
//! A SplitMix64 stream feeds Box–Muller. Every value is a pure function of
//! the seed and its position in the stream, and the transcendental
//! functions come from `libm`, so draws are bit-identical on every
//! IEEE-754 platform.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 output function.
#[inline]
pub fn splitmix64_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        splitmix64_finalize(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform in (0, 1]; safe to take the logarithm of.
    #[inline]
    fn next_f64_open_zero(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }
}

/// Standard normal deviates by Box–Muller; both halves of each pair are used.
#[derive(Debug, Clone)]
pub struct NormalStream {
    uniform: SplitMix64,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            uniform: SplitMix64::new(seed),
            spare: None,
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform.next_f64_open_zero();
        let u2 = self.uniform.next_f64();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }
}

/// Seed of the normal stream that regenerates row `column` of the implicit
/// Gaussian projection matrix.
#[inline]
pub fn column_seed(global_seed: u64, column: u64) -> u64 {
    splitmix64_finalize(global_seed ^ column.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA))
}

/// Row `column` of the implicit n×k Gaussian projection matrix. Depends only
/// on `(global_seed, column, k)`, so the matrix is never stored.
pub fn gaussian_row(global_seed: u64, column: u64, k: usize) -> Vec<f64> {
    let mut stream = NormalStream::new(column_seed(global_seed, column));
    (0..k).map(|_| stream.next_normal()).collect()
}
