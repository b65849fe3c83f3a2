//! The benchmark callbacks: parameterized work models with measured
//! execution times, plus real compute kernels used to validate behaviour.
//!
//! Modeled durations, not kernel wall time, drive all scheduling and
//! measurement; the kernels exist so callback bodies can do real work when
//! a scenario asks for validation.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::registry::CallbackKind;
use crate::time::Duration;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("image must be at least 3x3, got {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("image buffer is {got} bytes but {width}x{height}x3 needs {expected}")]
    ImageSizeMismatch { width: usize, height: usize, expected: usize, got: usize },
}

/// Timing and payload signature of one benchmark callback.
#[derive(Clone, Debug)]
pub struct WorkModel {
    pub name: String,
    pub sw_exec: Duration,
    pub hw_exec: Duration,
    pub payload_bytes_in: u64,
    pub payload_bytes_out: u64,
    pub kind: CallbackKind,
    /// Set for timer-driven callbacks.
    pub period: Option<Duration>,
}

impl WorkModel {
    /// Software-over-hardware execution time ratio.
    pub fn speedup(&self) -> f64 {
        self.sw_exec.as_secs_f64() / self.hw_exec.as_secs_f64()
    }
}

/// Bytes in a 1920x1080 image with 24-bit color, the buffer the hash
/// callback digests on every firing.
pub const HASH_IMAGE_BYTES: u64 = 1920 * 1080 * 3;

/// The five measured callbacks with their hardware and software execution
/// times and payload sizes.
pub fn builtin_workloads() -> Vec<WorkModel> {
    let ms = Duration::from_millis_f64;
    vec![
        WorkModel {
            name: "sobel".into(),
            sw_exec: ms(42.00),
            hw_exec: ms(16.50),
            payload_bytes_in: 640 * 480 * 3,
            payload_bytes_out: 640 * 480 * 3,
            kind: CallbackKind::Subscriber,
            period: None,
        },
        WorkModel {
            name: "sorting".into(),
            sw_exec: ms(41.00),
            hw_exec: ms(0.85),
            payload_bytes_in: 2048 * 4,
            payload_bytes_out: 2048 * 4,
            kind: CallbackKind::Subscriber,
            period: None,
        },
        WorkModel {
            name: "mnist".into(),
            sw_exec: ms(16.50),
            hw_exec: ms(11.90),
            payload_bytes_in: 28 * 28,
            payload_bytes_out: 4,
            kind: CallbackKind::Subscriber,
            period: None,
        },
        WorkModel {
            name: "inverse".into(),
            sw_exec: ms(1.50),
            hw_exec: ms(0.35),
            payload_bytes_in: 4,
            payload_bytes_out: 4,
            kind: CallbackKind::Subscriber,
            period: None,
        },
        WorkModel {
            name: "hash".into(),
            sw_exec: ms(94.00),
            hw_exec: ms(81.00),
            payload_bytes_in: 0,
            payload_bytes_out: 32,
            kind: CallbackKind::Timer,
            period: Some(Duration::from_millis(250)),
        },
    ]
}

/// Deterministic pseudo-random bytes derived from a scenario seed. Each
/// (seed, stream) pair yields an independent reproducible byte sequence.
pub fn seeded_bytes(seed: u64, stream: u64, len: usize) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ stream.rotate_left(17));
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

/// Odd-even transposition sort: exactly `n` stages of compare-exchange over
/// alternating even/odd adjacent pairs.
pub fn odd_even_sort(values: &[u32]) -> Vec<u32> {
    let mut v = values.to_vec();
    let n = v.len();
    for stage in 0..n {
        let mut i = stage % 2;
        while i + 1 < n {
            if v[i] > v[i + 1] {
                v.swap(i, i + 1);
            }
            i += 2;
        }
    }
    v
}

const SOBEL_GX: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
const SOBEL_GY: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

/// Sobel edge filter over an interleaved RGB image. Per channel the output
/// is `clamp(|gx| + |gy|, 0, 255)`; border pixels are zero.
pub fn sobel(image: &[u8], width: usize, height: usize) -> Result<Vec<u8>, KernelError> {
    if width < 3 || height < 3 {
        return Err(KernelError::ImageTooSmall { width, height });
    }
    let expected = width * height * 3;
    if image.len() != expected {
        return Err(KernelError::ImageSizeMismatch { width, height, expected, got: image.len() });
    }
    let mut out = vec![0u8; expected];
    let px = |x: usize, y: usize, c: usize| image[(y * width + x) * 3 + c] as i32;
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            for c in 0..3 {
                let mut gx = 0;
                let mut gy = 0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = px(x + kx - 1, y + ky - 1, c);
                        gx += SOBEL_GX[ky][kx] * v;
                        gy += SOBEL_GY[ky][kx] * v;
                    }
                }
                out[(y * width + x) * 3 + c] = (gx.abs() + gy.abs()).min(255) as u8;
            }
        }
    }
    Ok(out)
}

/// Signed fixed-point number with 6 fractional bits in a 14-bit word:
/// `value = raw / 64`, range [-128, 128).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Q8_6 {
    raw: i16,
}

impl Q8_6 {
    pub const FRAC_BITS: u32 = 6;
    pub const MIN_RAW: i16 = -(1 << 13);
    pub const MAX_RAW: i16 = (1 << 13) - 1;

    pub fn from_raw(raw: i16) -> Self {
        assert!((Self::MIN_RAW..=Self::MAX_RAW).contains(&raw), "raw {raw} outside 14-bit range");
        Q8_6 { raw }
    }

    /// Nearest representable value, saturating at the range ends.
    pub fn from_f64(value: f64) -> Self {
        let raw = (value * 64.0).round().clamp(Self::MIN_RAW as f64, Self::MAX_RAW as f64);
        Q8_6 { raw: raw as i16 }
    }

    pub fn raw(self) -> i16 {
        self.raw
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 / 64.0
    }

    pub fn saturating_add(self, rhs: Q8_6) -> Q8_6 {
        Q8_6 { raw: (self.raw + rhs.raw).clamp(Self::MIN_RAW, Self::MAX_RAW) }
    }
}

/// Pack two angles into one 32-bit word: x-axis rotation in the low
/// half-word, y-axis rotation in the high half-word, each as 14-bit
/// two's complement.
pub fn pack_angles(x: Q8_6, y: Q8_6) -> u32 {
    let lo = (x.raw as u16 & 0x3FFF) as u32;
    let hi = (y.raw as u16 & 0x3FFF) as u32;
    lo | (hi << 16)
}

pub fn unpack_angles(packed: u32) -> (Q8_6, Q8_6) {
    fn extend(bits: u32) -> i16 {
        let bits = (bits & 0x3FFF) as i16;
        if bits & 0x2000 != 0 {
            bits - (1 << 14)
        } else {
            bits
        }
    }
    (Q8_6 { raw: extend(packed) }, Q8_6 { raw: extend(packed >> 16) })
}

// atan(2^-i) in Q30 radians, i = 0..24.
const CORDIC_ATAN_Q30: [i64; 24] = [
    843314857,
    497837829,
    263043837,
    133525159,
    67021687,
    33543516,
    16775851,
    8388437,
    4194283,
    2097149,
    1048576,
    524288,
    262144,
    131072,
    65536,
    32768,
    16384,
    8192,
    4096,
    2048,
    1024,
    512,
    256,
    128,
];

/// Iterative shift-add arctangent: rotates the vector (1, x) toward the
/// positive axis, accumulating the table angles. The result is radians in
/// the same fixed-point format as the input.
pub fn arctan_q8_6(input: Q8_6) -> Q8_6 {
    // Q30 for the unit coordinate; the input's 6 fractional bits leave
    // 24 bits of headroom (|raw| <= 2^13, so |y| <= 2^37, and the rotation
    // gain of ~1.65 keeps everything far from i64 limits).
    let mut x: i64 = 1 << 30;
    let mut y: i64 = (input.raw as i64) << 24;
    let mut angle: i64 = 0;
    for (i, &step) in CORDIC_ATAN_Q30.iter().enumerate() {
        let dx = x >> i;
        let dy = y >> i;
        if y > 0 {
            x += dy;
            y -= dx;
            angle += step;
        } else {
            x -= dy;
            y += dx;
            angle -= step;
        }
    }
    // Q30 -> Q8.6, rounding to nearest.
    let half = 1i64 << 23;
    let raw = (angle + if angle >= 0 { half } else { -half }) >> 24;
    Q8_6 { raw: raw as i16 }
}

/// Servo command from a packed pair of platform rotation angles.
///
/// The two rotations are composed into a single deflection slope, run
/// through the iterative arctangent, and the resulting joint angle is
/// mapped linearly from [-90, +90] degrees onto the 10-bit pulse-width
/// range [0, 1023].
pub fn inverse_kinematics(packed: u32) -> u32 {
    let (x, y) = unpack_angles(packed);
    let slope = x.saturating_add(y);
    let theta = arctan_q8_6(slope).to_f64();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let code = ((theta + half_pi) / std::f64::consts::PI * 1023.0).round();
    (code.clamp(0.0, 1023.0) as u32) & 0x3FF
}

/// SHA-256 digest as eight big-endian 32-bit words.
pub fn hash_image(payload: &[u8]) -> [u32; 8] {
    let digest = Sha256::digest(payload);
    let mut words = [0u32; 8];
    for (i, chunk) in digest.chunks_exact(4).enumerate() {
        words[i] = u32::from_be_bytes(chunk.try_into().unwrap());
    }
    words
}
