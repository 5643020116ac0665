//! Deterministic Gaussian noise sourcing with record/replay tapes and
//! attacker-knowledge views.
//!
//! Draws come from a counter-based generator keyed by (seed, role, element
//! index) rather than a sequential stream, so replay is order-independent:
//! per-sample evaluations can run on any number of threads and still consume
//! bitwise-identical noise. Gaussians are produced by Box-Muller on the
//! counter stream, one normal per deterministic pair of uniforms.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// splitmix64 finalizer; bijective with strong avalanche.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hierarchical key into the counter space. Children are derived by mixing a
/// word into the parent key; unused branches never perturb sibling draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngKey(u64);

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(mix(seed))
    }

    pub fn child(self, word: u64) -> Self {
        RngKey(mix(self.0 ^ mix(word.wrapping_add(0xA5A5_A5A5_5A5A_5A5A))))
    }

    /// The raw key, usable as a derived seed for `record_tape`.
    pub fn seed_value(self) -> u64 {
        self.0
    }

    #[inline]
    fn raw(self, counter: u64) -> u64 {
        mix(self.0 ^ counter.wrapping_mul(0xD6E8_FEB8_6659_FD93))
    }

    /// Uniform draw in (0, 1], safe for `ln`.
    #[inline]
    pub fn uniform_at(self, counter: u64) -> f64 {
        (((self.raw(counter) >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; element `i` consumes counters
    /// `2i` and `2i + 1`.
    #[inline]
    pub fn normal_at(self, i: u64) -> f64 {
        let u1 = self.uniform_at(2 * i);
        let u2 = self.uniform_at(2 * i + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `0..n`.
    pub fn index_below(self, n: usize) -> usize {
        (self.raw(0) % n as u64) as usize
    }

    pub fn normal_tensor<T: Scalar>(self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |i| T::from_f64(self.normal_at(i as u64)))
    }
}

/// Role words for tape draws.
const ROLE_FORWARD: u64 = 1;
const ROLE_REVERSE: u64 = 2;
const ROLE_SEMI: u64 = 3;

/// Recorded Gaussian draws for one purification run: the forward draw and one
/// draw per stochastic reverse step. Immutable after recording.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTape<T> {
    pub seed: u64,
    pub forward_noise: Tensor<T>,
    pub reverse_noises: Vec<Tensor<T>>,
}

/// Record a tape for `reverse_step_count` stochastic reverse steps.
/// Regenerating with the same arguments yields a bitwise-identical tape.
pub fn record_tape<T: Scalar>(
    seed: u64,
    image_shape: &[usize],
    reverse_step_count: usize,
) -> NoiseTape<T> {
    let key = RngKey::new(seed);
    let forward_noise = key.child(ROLE_FORWARD).normal_tensor(image_shape);
    let reverse_noises = (0..reverse_step_count)
        .map(|k| key.child(ROLE_REVERSE).child(k as u64).normal_tensor(image_shape))
        .collect();
    NoiseTape {
        seed,
        forward_noise,
        reverse_noises,
    }
}

/// How much of the victim's stochasticity the attacker sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnowledgeSetting {
    /// Model parameters only; no stochastic elements.
    WhiteBox,
    /// Forward-process noise known.
    DWFwd,
    /// Reverse-process noises known.
    DWRev,
    /// All stochastic elements known.
    DWBoth,
    /// Stochasticity restricted to a known set of `k` tapes.
    DWSemi(usize),
}

impl KnowledgeSetting {
    pub fn validate(&self) -> Result<()> {
        if let KnowledgeSetting::DWSemi(k) = self {
            if *k == 0 {
                return Err(Error::config("DWSemi requires k >= 1"));
            }
        }
        Ok(())
    }
}

/// Attacker-side view of a tape: known entries are pinned to the victim's
/// values, unknown entries are resampled fresh by the attacker.
#[derive(Clone, Debug)]
pub struct AttackerTape<T> {
    pub forward: Option<Tensor<T>>,
    pub reverse: Vec<Option<Tensor<T>>>,
    image_shape: Vec<usize>,
}

impl<T: Scalar> AttackerTape<T> {
    /// Fully unknown view with the given geometry (the white-box attacker).
    pub fn unknown(image_shape: &[usize], reverse_step_count: usize) -> Self {
        AttackerTape {
            forward: None,
            reverse: vec![None; reverse_step_count],
            image_shape: image_shape.to_vec(),
        }
    }

    pub fn known_entries(&self) -> usize {
        self.forward.is_some() as usize + self.reverse.iter().filter(|e| e.is_some()).count()
    }

    pub fn fully_known(&self) -> bool {
        self.forward.is_some() && self.reverse.iter().all(|e| e.is_some())
    }

    /// Concrete tape: known entries copied, unknown entries drawn from `key`.
    /// When everything is known the key is never consulted.
    pub fn materialize(&self, key: RngKey) -> NoiseTape<T> {
        let forward_noise = match &self.forward {
            Some(t) => t.clone(),
            None => key.child(ROLE_FORWARD).normal_tensor(&self.image_shape),
        };
        let reverse_noises = self
            .reverse
            .iter()
            .enumerate()
            .map(|(k, e)| match e {
                Some(t) => t.clone(),
                None => key
                    .child(ROLE_REVERSE)
                    .child(k as u64)
                    .normal_tensor(&self.image_shape),
            })
            .collect();
        NoiseTape {
            seed: 0,
            forward_noise,
            reverse_noises,
        }
    }
}

/// Project a victim tape onto what a given knowledge setting exposes.
pub fn knowledge_view<T: Scalar>(
    tape: &NoiseTape<T>,
    setting: KnowledgeSetting,
) -> Result<AttackerTape<T>> {
    let shape = tape.forward_noise.shape().to_vec();
    let n = tape.reverse_noises.len();
    let view = match setting {
        KnowledgeSetting::WhiteBox => AttackerTape {
            forward: None,
            reverse: vec![None; n],
            image_shape: shape,
        },
        KnowledgeSetting::DWFwd => AttackerTape {
            forward: Some(tape.forward_noise.clone()),
            reverse: vec![None; n],
            image_shape: shape,
        },
        KnowledgeSetting::DWRev => AttackerTape {
            forward: None,
            reverse: tape.reverse_noises.iter().cloned().map(Some).collect(),
            image_shape: shape,
        },
        KnowledgeSetting::DWBoth => AttackerTape {
            forward: Some(tape.forward_noise.clone()),
            reverse: tape.reverse_noises.iter().cloned().map(Some).collect(),
            image_shape: shape,
        },
        KnowledgeSetting::DWSemi(_) => {
            return Err(Error::config(
                "DWSemi views come from sample_semi_set, not knowledge_view",
            ))
        }
    };
    Ok(view)
}

/// Sample the `k` candidate tapes of a DW_semi-k configuration. The victim
/// draws one uniformly at evaluation time; the attacker receives all `k`.
pub fn sample_semi_set<T: Scalar>(
    k: usize,
    seed: u64,
    image_shape: &[usize],
    reverse_step_count: usize,
) -> Result<Vec<NoiseTape<T>>> {
    if k == 0 {
        return Err(Error::config("DW_semi needs k >= 1"));
    }
    Ok((0..k)
        .map(|i| {
            let derived = RngKey::new(seed).child(ROLE_SEMI).child(i as u64).0;
            record_tape(derived, image_shape, reverse_step_count)
        })
        .collect())
}

/// Uniform victim choice among `k` semi tapes for a given sample.
pub fn semi_victim_index(eval_seed: u64, sample: usize, k: usize) -> usize {
    RngKey::new(eval_seed)
        .child(ROLE_SEMI)
        .child(sample as u64)
        .index_below(k)
}

#[derive(Serialize, Deserialize)]
struct TapeHeader {
    seed: u64,
    reverse_count: usize,
    dtype: String,
}

impl<T: Scalar> NoiseTape<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&TapeHeader {
            seed: self.seed,
            reverse_count: self.reverse_noises.len(),
            dtype: if T::DTYPE == 0 { "f32" } else { "f64" }.to_string(),
        })
        .map_err(|e| Error::format(e.to_string()))?;
        let mut tensors: Vec<&Tensor<T>> = vec![&self.forward_noise];
        tensors.extend(self.reverse_noises.iter());
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_container(&mut w, &header, &tensors)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let header: TapeHeader = serde_json::from_str(&io::read_container_header(&mut r)?)
            .map_err(|e| Error::format(format!("bad tape header: {e}")))?;
        let forward_noise = io::read_tensor(&mut r)?;
        let reverse_noises = (0..header.reverse_count)
            .map(|_| io::read_tensor(&mut r))
            .collect::<Result<Vec<_>>>()?;
        Ok(NoiseTape {
            seed: header.seed,
            forward_noise,
            reverse_noises,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_is_deterministic() {
        let a: NoiseTape<f64> = record_tape(42, &[4, 4], 3);
        let b: NoiseTape<f64> = record_tape(42, &[4, 4], 3);
        assert_eq!(a, b);
        let c: NoiseTape<f64> = record_tape(43, &[4, 4], 3);
        assert_ne!(a.forward_noise, c.forward_noise);
    }

    #[test]
    fn zero_reverse_steps_empty_list() {
        let t: NoiseTape<f64> = record_tape(7, &[8], 0);
        assert!(t.reverse_noises.is_empty());
    }

    #[test]
    fn pooled_draws_are_standard_normal() {
        // 1e5 pooled draws: |mean| < 0.02, |variance - 1| < 0.03.
        let key = RngKey::new(123);
        let n = 100_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let v = key.normal_at(i);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {}", mean);
        assert!((var - 1.0).abs() < 0.03, "var {}", var);
    }

    #[test]
    fn knowledge_views_match_table() {
        let tape: NoiseTape<f64> = record_tape(5, &[4], 2);
        let white = knowledge_view(&tape, KnowledgeSetting::WhiteBox).unwrap();
        assert_eq!(white.known_entries(), 0);
        let fwd = knowledge_view(&tape, KnowledgeSetting::DWFwd).unwrap();
        assert_eq!(fwd.known_entries(), 1);
        assert_eq!(fwd.forward.as_ref().unwrap(), &tape.forward_noise);
        let rev = knowledge_view(&tape, KnowledgeSetting::DWRev).unwrap();
        assert_eq!(rev.known_entries(), 2);
        assert!(rev.forward.is_none());
        let both = knowledge_view(&tape, KnowledgeSetting::DWBoth).unwrap();
        assert!(both.fully_known());
        let m = both.materialize(RngKey::new(999));
        assert_eq!(m.forward_noise, tape.forward_noise);
        assert_eq!(m.reverse_noises, tape.reverse_noises);
    }

    /// Structural knowledge monotonicity: WhiteBox < DWFwd < DWBoth and
    /// WhiteBox < DWRev < DWBoth.
    #[test]
    fn knowledge_monotone() {
        let tape: NoiseTape<f64> = record_tape(5, &[4], 3);
        let known = |s| knowledge_view(&tape, s).unwrap().known_entries();
        assert!(known(KnowledgeSetting::WhiteBox) < known(KnowledgeSetting::DWFwd));
        assert!(known(KnowledgeSetting::DWFwd) < known(KnowledgeSetting::DWBoth));
        assert!(known(KnowledgeSetting::WhiteBox) < known(KnowledgeSetting::DWRev));
        assert!(known(KnowledgeSetting::DWRev) < known(KnowledgeSetting::DWBoth));
    }

    /// On a sampler with no reverse draws, DWFwd already pins everything, so
    /// it coincides with DWBoth.
    #[test]
    fn dwfwd_equals_dwboth_without_reverse_draws() {
        let tape: NoiseTape<f64> = record_tape(11, &[4], 0);
        let fwd = knowledge_view(&tape, KnowledgeSetting::DWFwd).unwrap();
        assert!(fwd.fully_known());
        let a = fwd.materialize(RngKey::new(1));
        let b = fwd.materialize(RngKey::new(2));
        assert_eq!(a, b);
        assert_eq!(a.forward_noise, tape.forward_noise);
    }

    #[test]
    fn semi_set_distinct_and_seeded() {
        let tapes: Vec<NoiseTape<f64>> = sample_semi_set(8, 77, &[6], 2).unwrap();
        assert_eq!(tapes.len(), 8);
        // pairwise distinct, checked through serialized bytes
        let mut blobs = Vec::new();
        for t in &tapes {
            let mut buf = Vec::new();
            io::write_tensor(&mut buf, &t.forward_noise).unwrap();
            blobs.push(buf);
        }
        for i in 0..blobs.len() {
            for j in (i + 1)..blobs.len() {
                assert_ne!(blobs[i], blobs[j]);
            }
        }
        assert!(matches!(
            sample_semi_set::<f64>(0, 1, &[4], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tape_save_load_round_trip() {
        let dir = std::env::temp_dir().join("dbplab_tape_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tape.dbpc");
        let tape: NoiseTape<f64> = record_tape(99, &[3, 3], 2);
        tape.save(&path).unwrap();
        let back = NoiseTape::<f64>::load(&path).unwrap();
        assert_eq!(tape, back);
    }
}
