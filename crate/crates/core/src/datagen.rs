//! Seeded synthetic data streams on a counter-based generator.
//!
//! Every example is a pure function of `(spec, lane, counter)`: there is no
//! shared generator state, so streams can be replayed, split and generated in
//! any order. Lanes separate independent uses of one spec (training stream,
//! evaluation batches, test set, diagnostic population).

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::types::{AugmentedExample, Example};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Independent sub-streams of one [`StreamSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Lane(pub u32);

impl Lane {
    pub const TRAIN: Lane = Lane(0);
    pub const EVAL: Lane = Lane(1);
    pub const TEST: Lane = Lane(2);
    pub const POPULATION: Lane = Lane(3);
    /// Members of a finite population, shared by all lanes that sample from it.
    const MEMBERS: Lane = Lane(0xFFFF_0000);
}

/// Uniforms on `(0, 1)` for one `(key, lane, counter)`; two per Philox block.
struct UniformDraws {
    key: [u32; 2],
    counter: u64,
    lane: u32,
}

impl UniformDraws {
    fn new(seed: u64, lane: Lane, counter: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            counter,
            lane: lane.0,
        }
    }

    fn block(&self, b: u32) -> [u32; 4] {
        philox4x32_10(
            [self.counter as u32, (self.counter >> 32) as u32, b, self.lane],
            self.key,
        )
    }

    /// The `i`-th uniform of this draw.
    fn get(&self, i: u32) -> f64 {
        let b = self.block(i / 2);
        if i.is_multiple_of(2) {
            to_unit(b[0], b[1])
        } else {
            to_unit(b[2], b[3])
        }
    }

    /// Uniforms `0 .. out.len()`, identical to repeated [`Self::get`].
    fn fill(&self, out: &mut [f64]) {
        for (b, pair) in out.chunks_mut(2).enumerate() {
            let words = self.block(b as u32);
            pair[0] = to_unit(words[0], words[1]);
            if let Some(second) = pair.get_mut(1) {
                *second = to_unit(words[2], words[3]);
            }
        }
    }
}

/// 53 random bits mapped to the open interval `(0, 1)`.
#[inline]
fn to_unit(hi: u32, lo: u32) -> f64 {
    let bits = ((hi as u64) << 32 | lo as u64) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Linear model, uniform inputs, no observation noise by default.
    RidgePaper,
    /// Linear model with Gaussian observation noise.
    LinearGaussianNoise,
    /// Uniform resampling from a fixed population of `size` linear-model examples.
    FinitePopulation { size: u64 },
}

/// Ground-truth parameters used when none are configured.
pub const DEFAULT_THETA_O: [f64; 7] = [1.0, 0.8, 0.6, 0.4, 0.2, -0.5, 1.5];

/// Distribution of a synthetic stream: `x ~ U[x_low, x_high]^d`,
/// `y = <theta_o, x> + noise_std N(0, 1)`, and `w ~ N(0, sigma_w^2)` when `sigma_w > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub dim_d: usize,
    pub theta_o: Vec<f64>,
    pub noise_std: f64,
    pub x_low: f64,
    pub x_high: f64,
    pub seed: u64,
    pub sigma_w: f64,
}

impl StreamSpec {
    /// Seven uniform `[0, 2]` features, noiseless targets, default `theta_o`.
    pub fn ridge_paper(seed: u64) -> Self {
        Self {
            kind: StreamKind::RidgePaper,
            dim_d: 7,
            theta_o: DEFAULT_THETA_O.to_vec(),
            noise_std: 0.0,
            x_low: 0.0,
            x_high: 2.0,
            seed,
            sigma_w: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Validation(msg));
        if self.dim_d == 0 {
            return bad("stream dim_d must be positive".into());
        }
        if self.theta_o.len() != self.dim_d {
            return bad(alloc::format!(
                "theta_o has {} entries but dim_d is {}",
                self.theta_o.len(),
                self.dim_d
            ));
        }
        if self.theta_o.iter().any(|v| !v.is_finite()) {
            return bad("theta_o entries must be finite".into());
        }
        if !(self.x_low.is_finite() && self.x_high.is_finite() && self.x_low < self.x_high) {
            return bad(alloc::format!(
                "need finite x_low < x_high, got [{}, {}]",
                self.x_low,
                self.x_high
            ));
        }
        for (name, v) in [("noise_std", self.noise_std), ("sigma_w", self.sigma_w)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(alloc::format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if let StreamKind::FinitePopulation { size: 0 } = self.kind {
            return bad("finite population size must be positive".into());
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// `E|x|^2` under the uniform input law.
    pub fn x_second_moment(&self) -> f64 {
        let (a, b) = (self.x_low, self.x_high);
        self.dim_d as f64 * (a * a + a * b + b * b) / 3.0
    }

    /// Largest `|x|` on the input box.
    pub fn x_norm_max(&self) -> f64 {
        let m = self.x_low.abs().max(self.x_high.abs());
        libm::sqrt(self.dim_d as f64) * m
    }

    fn linear_draw(&self, lane: Lane, counter: u64) -> Example {
        let u = UniformDraws::new(self.seed, lane, counter);
        let span = self.x_high - self.x_low;
        let d = self.dim_d;
        let mut x = alloc::vec![0.0; d + usize::from(self.noise_std > 0.0)];
        u.fill(&mut x);
        let noise = if self.noise_std > 0.0 { x.pop() } else { None };
        for v in x.iter_mut() {
            *v = self.x_low + span * *v;
        }
        let mut y = math::dot(&self.theta_o, &x);
        if let Some(p) = noise {
            y += self.noise_std * math::norm_inv_cdf(p);
        }
        Example { x, y }
    }
}

/// Raw uniforms on `(0, 1)` for `(seed, lane, counter)`, for callers that
/// need reproducible randomness outside the example streams.
pub fn uniforms(seed: u64, lane: Lane, counter: u64, out: &mut [f64]) {
    UniformDraws::new(seed, lane, counter).fill(out);
}

/// The `counter`-th draw of `lane`.
pub fn next_example_in(spec: &StreamSpec, lane: Lane, counter: u64) -> AugmentedExample {
    let base = match spec.kind {
        StreamKind::FinitePopulation { size } => {
            let u = UniformDraws::new(spec.seed, lane, counter).get(spec.dim_d as u32 + 2);
            let member = ((u * size as f64) as u64).min(size - 1);
            spec.linear_draw(Lane::MEMBERS, member)
        }
        _ => spec.linear_draw(lane, counter),
    };
    let w = if spec.sigma_w > 0.0 {
        let u = UniformDraws::new(spec.seed, lane, counter);
        spec.sigma_w * math::norm_inv_cdf(u.get(spec.dim_d as u32 + 1))
    } else {
        0.0
    };
    AugmentedExample { base, w }
}

/// The `counter`-th draw of the training lane.
pub fn next_example(spec: &StreamSpec, counter: u64) -> AugmentedExample {
    next_example_in(spec, Lane::TRAIN, counter)
}

/// Training-lane draws for counters `0..n`.
pub fn materialize_population(spec: &StreamSpec, n: usize) -> Vec<Example> {
    materialize_population_in(spec, Lane::TRAIN, n)
}

pub fn materialize_population_in(spec: &StreamSpec, lane: Lane, n: usize) -> Vec<Example> {
    (0..n as u64).map(|k| next_example_in(spec, lane, k).base).collect()
}

/// Sequential cursor over one lane, starting at a given counter.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    spec: StreamSpec,
    lane: Lane,
    next: u64,
    end: Option<u64>,
}

impl StreamCursor {
    pub fn new(spec: StreamSpec, lane: Lane) -> Self {
        Self {
            spec,
            lane,
            next: 0,
            end: None,
        }
    }

    pub fn starting_at(mut self, counter: u64) -> Self {
        self.next = counter;
        self
    }

    /// Stops after `n` further draws.
    pub fn limited(mut self, n: u64) -> Self {
        self.end = Some(self.next + n);
        self
    }

    /// The same cursor yielding plain examples.
    pub fn examples(self) -> impl Iterator<Item = Example> {
        self.map(|ae| ae.base)
    }
}

impl Iterator for StreamCursor {
    type Item = AugmentedExample;

    fn next(&mut self) -> Option<AugmentedExample> {
        if self.end.is_some_and(|e| self.next >= e) {
            return None;
        }
        let ae = next_example_in(&self.spec, self.lane, self.next);
        self.next += 1;
        Some(ae)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    }

    #[test]
    fn block_fill_matches_single_draws() {
        let u = UniformDraws::new(0xDEAD_BEEF_0123, Lane::EVAL, 77);
        let mut v = [0.0; 9];
        u.fill(&mut v);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, u.get(i as u32));
            assert!(*x > 0.0 && *x < 1.0);
        }
    }

    #[test]
    fn same_counter_same_example() {
        let spec = StreamSpec {
            sigma_w: 0.5,
            noise_std: 0.1,
            ..StreamSpec::ridge_paper(42)
        };
        assert_eq!(next_example(&spec, 17), next_example(&spec, 17));
        assert_ne!(next_example(&spec, 17), next_example(&spec, 18));
        assert_ne!(
            next_example_in(&spec, Lane::TRAIN, 3),
            next_example_in(&spec, Lane::EVAL, 3)
        );
    }

    #[test]
    fn ridge_paper_support_and_targets() {
        let spec = StreamSpec::ridge_paper(7);
        for k in 0..2000 {
            let ae = next_example(&spec, k);
            assert_eq!(ae.w, 0.0);
            assert!(ae.base.x.iter().all(|&v| (0.0..=2.0).contains(&v)));
            assert_eq!(ae.base.y, math::dot(&spec.theta_o, &ae.base.x));
        }
    }

    #[test]
    fn population_prefix_is_stream_prefix() {
        let spec = StreamSpec::ridge_paper(3);
        assert_eq!(materialize_population(&spec, 1), alloc::vec![next_example(&spec, 0).base]);
        let cursor: Vec<Example> = StreamCursor::new(spec.clone(), Lane::TRAIN).limited(50).examples().collect();
        assert_eq!(cursor, materialize_population(&spec, 50));
        let tail: Vec<Example> = StreamCursor::new(spec.clone(), Lane::TRAIN)
            .starting_at(10)
            .limited(5)
            .examples()
            .collect();
        assert_eq!(tail, materialize_population(&spec, 15)[10..]);
    }

    #[test]
    fn finite_population_draws_members() {
        let base = StreamSpec::ridge_paper(9);
        let spec = StreamSpec {
            kind: StreamKind::FinitePopulation { size: 4 },
            ..base
        };
        let members: Vec<Example> = (0..4).map(|j| spec.linear_draw(Lane::MEMBERS, j)).collect();
        let mut seen = [false; 4];
        for k in 0..200 {
            let e = next_example(&spec, k).base;
            let j = members.iter().position(|m| *m == e).expect("draw is a member");
            seen[j] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn validation() {
        let ok = StreamSpec::ridge_paper(1);
        assert!(ok.validate().is_ok());
        assert!(StreamSpec { x_low: 2.0, ..ok.clone() }.validate().is_err());
        assert!(StreamSpec { dim_d: 6, ..ok.clone() }.validate().is_err());
        assert!(StreamSpec { noise_std: -1.0, ..ok.clone() }.validate().is_err());
        assert!(StreamSpec {
            kind: StreamKind::FinitePopulation { size: 0 },
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!((ok.x_second_moment() - 28.0 / 3.0).abs() < 1e-12);
    }
}
