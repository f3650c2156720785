//! Seeded random streams, the noise laws used by the simulation scenarios, and
//! the normal CDF the Gaussian kernel relies on.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::Open01;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, splittable random stream.
///
/// A stream is identified by its 64-bit key. [`Rng::split`] derives a child key
/// from the parent key and a stream id only, so children do not depend on how
/// much of the parent has been consumed and can be created in any order.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut bytes = [0u8; 32];
        let mut state = seed;
        for chunk in bytes.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self {
            key: seed,
            inner: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Independent child stream `stream_id` of this stream.
    pub fn split(&self, stream_id: u64) -> Rng {
        Rng::new(splitmix64(self.key ^ splitmix64(stream_id.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    /// Child stream `stream_id` of the root stream seeded with `seed`.
    pub fn stream(seed: u64, stream_id: u64) -> Rng {
        Rng::new(seed).split(stream_id)
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw on the open interval `(0, 1)`.
    pub fn open01(&mut self) -> f64 {
        Open01.sample(&mut self.inner)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Seeded permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Standard normal density.
pub fn std_normal_pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Standard normal CDF, `Φ(t) = erfc(-t/√2)/2`.
///
/// `erfc` is the fdlibm rational approximation (about 1 ulp), which keeps the
/// absolute error far below 1e-10 over the whole line, tails included.
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * FRAC_1_SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// two Halley refinements against [`std_normal_cdf`].
fn std_normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let e = std_normal_cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Noise distributions used by the data-generating scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseLaw {
    Uniform01,
    StdNormal,
    /// Student-t with integer degrees of freedom. Only 2 and 3 are supported.
    StudentT { dof: u32 },
    /// Laplace with location 0 and scale `scale`.
    Laplace { scale: f64 },
}

impl NoiseLaw {
    pub fn student_t(dof: u32) -> Result<Self> {
        let law = NoiseLaw::StudentT { dof };
        law.validate()?;
        Ok(law)
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        let law = NoiseLaw::Laplace { scale };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseLaw::StudentT { dof } if dof != 2 && dof != 3 => Err(Error::UnsupportedLaw(
                format!("student_t with {dof} degrees of freedom (only 2 and 3 are supported)"),
            )),
            NoiseLaw::Laplace { scale } if !(scale > 0.0 && scale.is_finite()) => Err(
                Error::UnsupportedLaw(format!("laplace scale must be positive, got {scale}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            NoiseLaw::Uniform01 => x.clamp(0.0, 1.0),
            NoiseLaw::StdNormal => std_normal_cdf(x),
            NoiseLaw::StudentT { dof: 2 } => 0.5 + x / (2.0 * (2.0 + x * x).sqrt()),
            NoiseLaw::StudentT { .. } => student_t3_cdf(x),
            NoiseLaw::Laplace { scale } => {
                if x < 0.0 {
                    0.5 * (x / scale).exp()
                } else {
                    1.0 - 0.5 * (-x / scale).exp()
                }
            }
        })
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        self.validate()?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "quantile level must lie in (0, 1), got {p}"
            )));
        }
        Ok(match *self {
            NoiseLaw::Uniform01 => p,
            NoiseLaw::StdNormal => std_normal_quantile(p),
            NoiseLaw::StudentT { dof: 2 } => (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt(),
            NoiseLaw::StudentT { .. } => student_t3_quantile(p),
            NoiseLaw::Laplace { scale } => {
                let c = p - 0.5;
                -scale * c.signum() * (1.0 - 2.0 * c.abs()).ln()
            }
        })
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Vec<f64>> {
        self.validate()?;
        Ok((0..n).map(|_| self.draw(rng)).collect())
    }

    /// One draw; the law must already be valid.
    pub(crate) fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            NoiseLaw::Uniform01 => rng.uniform(),
            NoiseLaw::StdNormal => rng.normal(),
            NoiseLaw::StudentT { dof } => {
                let z = rng.normal();
                let chi2: f64 = (0..dof)
                    .map(|_| {
                        let g = rng.normal();
                        g * g
                    })
                    .sum();
                z / (chi2 / f64::from(dof)).sqrt()
            }
            NoiseLaw::Laplace { scale } => {
                let c = rng.open01() - 0.5;
                -scale * c.signum() * (1.0 - 2.0 * c.abs()).ln()
            }
        }
    }
}

fn student_t3_cdf(t: f64) -> f64 {
    let s = 3f64.sqrt();
    0.5 + (t / (s * (1.0 + t * t / 3.0)) + (t / s).atan()) / PI
}

fn student_t3_pdf(t: f64) -> f64 {
    let q = 1.0 + t * t / 3.0;
    2.0 / (PI * 3f64.sqrt() * q * q)
}

/// Safeguarded Newton on the closed-form t(3) CDF, bisection when a step
/// leaves the bracket.
fn student_t3_quantile(p: f64) -> f64 {
    const TOL: f64 = 1e-12;
    if p == 0.5 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while student_t3_cdf(lo) > p {
        lo *= 2.0;
    }
    while student_t3_cdf(hi) < p {
        hi *= 2.0;
    }
    // The normal quantile scaled by the t(3) standard deviation is a decent start.
    let mut x = (std_normal_quantile(p) * 3f64.sqrt()).clamp(lo, hi);
    for _ in 0..200 {
        let f = student_t3_cdf(x) - p;
        if f.abs() <= TOL * 1e-2 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / student_t3_pdf(x);
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= TOL * x.abs().max(1.0) {
            x = next;
            break;
        }
        x = next;
    }
    x
}
