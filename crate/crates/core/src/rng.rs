//! Counter-based noise streams.
//!
//! Every standard-normal variate is a pure function of
//! `(master_seed, stream_index, draw counter, slot)`, computed with the
//! Philox4x32-10 block cipher. A stream can therefore be replayed from any
//! counter value, forked by index, and consumed from any number of worker
//! threads without changing a single bit of output.

use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
        ctr = [
            ((p1 >> 32) as u32) ^ ctr[1] ^ k[0],
            p1 as u32,
            ((p0 >> 32) as u32) ^ ctr[3] ^ k[1],
            p0 as u32,
        ];
    }
    ctr
}

/// SplitMix64 finalizer, used to derive child seeds.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for a labelled sub-experiment.
pub fn derive_seed(master_seed: u64, label: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(label.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

/// Identifies one noise sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub index: u32,
}

impl StreamKey {
    pub fn new(seed: u64, index: u32) -> Self {
        Self { seed, index }
    }
}

/// A replayable sequence of noise draws `xi_1, xi_2, ...`.
///
/// The stream is a flat sequence of standard normals; a logical draw of
/// length `m` occupies positions `[counter·m, (counter+1)·m)`. Consumers must
/// use a fixed draw length per stream. `counter` is the number of logical
/// draws consumed so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseStream {
    key: StreamKey,
    counter: u64,
    #[serde(skip)]
    cache: Option<(u64, [f64; 2])>,
}

impl PartialEq for NoiseStream {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.counter == other.counter
    }
}

impl Eq for NoiseStream {}

impl NoiseStream {
    pub fn new(seed: u64, index: u32) -> Self {
        Self::from_key(StreamKey::new(seed, index))
    }

    pub fn from_key(key: StreamKey) -> Self {
        Self::at(key, 0)
    }

    /// Position the stream so that the next draw is draw number `counter`.
    pub fn at(key: StreamKey, counter: u64) -> Self {
        Self {
            key,
            counter,
            cache: None,
        }
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn master_seed(&self) -> u64 {
        self.key.seed
    }

    pub fn stream_index(&self) -> u32 {
        self.key.index
    }

    /// Rewind to the first draw.
    pub fn reset(&mut self) {
        self.counter = 0;
    }

    /// A fresh stream with the same seed and a different index.
    pub fn fork(&self, index: u32) -> Self {
        Self::new(self.key.seed, index)
    }

    /// Fill `out` with the standard normals of the next logical draw.
    #[inline]
    pub fn next_normals(&mut self, out: &mut [f64]) {
        self.peek_normals(out);
        self.counter += 1;
    }

    /// Same as [`next_normals`](Self::next_normals) but without advancing.
    #[inline]
    pub fn peek_normals(&mut self, out: &mut [f64]) {
        let start = self.counter.wrapping_mul(out.len() as u64);
        for (i, o) in out.iter_mut().enumerate() {
            let pos = start.wrapping_add(i as u64);
            let block = pos >> 1;
            let pair = match self.cache {
                Some((b, pair)) if b == block => pair,
                _ => {
                    let pair = normal_pair(self.key, block);
                    self.cache = Some((block, pair));
                    pair
                }
            };
            *o = pair[(pos & 1) as usize];
        }
    }
}

#[inline]
fn unit_open(hi: u32, lo: u32) -> f64 {
    let bits = ((u64::from(hi) << 32) | u64::from(lo)) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Two standard normals from one Philox block (Box-Muller on two 53-bit uniforms).
#[inline]
pub fn normal_pair(key: StreamKey, block: u64) -> [f64; 2] {
    let r = philox4x32_10(
        [block as u32, (block >> 32) as u32, 0, key.index],
        [key.seed as u32, (key.seed >> 32) as u32],
    );
    let u1 = unit_open(r[0], r[1]);
    let u2 = unit_open(r[2], r[3]);
    let radius = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    [radius * c, radius * s]
}

/// Standard normals of draw `counter` for draws of length `out.len()`.
pub fn fill_normals(key: StreamKey, counter: u64, out: &mut [f64]) {
    NoiseStream::at(key, counter).peek_normals(out);
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors for Philox4x32-10 from the Random123 distribution.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn equal_keys_replay_identically() {
        let mut a = NoiseStream::new(7, 3);
        let mut b = NoiseStream::new(7, 3);
        let mut xa = [0.0; 5];
        let mut xb = [0.0; 5];
        for _ in 0..100 {
            a.next_normals(&mut xa);
            b.next_normals(&mut xb);
            assert_eq!(xa, xb);
        }
        assert_eq!(a.counter(), 100);
        let first: Vec<f64> = {
            let mut s = NoiseStream::new(7, 3);
            let mut x = [0.0; 5];
            s.next_normals(&mut x);
            x.to_vec()
        };
        a.reset();
        a.next_normals(&mut xa);
        assert_eq!(xa.to_vec(), first);
    }

    #[test]
    fn random_access_matches_sequential() {
        let key = StreamKey::new(11, 0);
        let mut s = NoiseStream::from_key(key);
        let mut x = [0.0; 3];
        for _ in 0..17 {
            s.next_normals(&mut x);
        }
        let mut seq = [0.0; 3];
        s.next_normals(&mut seq);
        let mut direct = [0.0; 3];
        fill_normals(key, 17, &mut direct);
        assert_eq!(seq, direct);
    }

    #[test]
    fn distinct_indices_are_uncorrelated() {
        let mut a = NoiseStream::new(1, 0);
        let mut b = NoiseStream::new(1, 1);
        let n = 100_000;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        let mut xa = [0.0];
        let mut xb = [0.0];
        for _ in 0..n {
            a.next_normals(&mut xa);
            b.next_normals(&mut xb);
            sab += xa[0] * xb[0];
            saa += xa[0] * xa[0];
            sbb += xb[0] * xb[0];
        }
        let corr = sab / (saa * sbb).sqrt();
        // 4 standard errors of a zero correlation
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut s = NoiseStream::new(2024, 5);
        let n = 200_000;
        let mut x = [0.0; 2];
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for _ in 0..n / 2 {
            s.next_normals(&mut x);
            for v in x {
                m1 += v;
                m2 += v * v;
                m4 += v.powi(4);
            }
        }
        let nf = n as f64;
        assert!((m1 / nf).abs() < 4.0 / nf.sqrt());
        assert!((m2 / nf - 1.0).abs() < 4.0 * (2.0 / nf).sqrt());
        assert!((m4 / nf - 3.0).abs() < 4.0 * (96.0 / nf).sqrt());
    }
}
