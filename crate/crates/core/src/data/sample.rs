//! Multimodal samples and the token-dropping robustness transform.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    V,
    T,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::V => write!(f, "v"),
            Modality::T => write!(f, "t"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v" => Ok(Modality::V),
            "t" => Ok(Modality::T),
            other => Err(Error::Config(format!("unknown modality {:?}, expected v or t", other))),
        }
    }
}

/// One sample: an id, a token matrix per present modality, and a K-bit label
/// vector. An absent modality (robustness evaluation) is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub id: String,
    pub tokens_v: Option<Tensor<f64>>,
    pub tokens_t: Option<Tensor<f64>>,
    pub labels: Vec<u8>,
}

impl MultiModalSample {
    pub fn new(
        id: String,
        tokens_v: Option<Tensor<f64>>,
        tokens_t: Option<Tensor<f64>>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        for (m, tokens) in [("v", &tokens_v), ("t", &tokens_t)] {
            if let Some(t) = tokens {
                if t.rank() != 2 || t.nrows() == 0 {
                    return Err(Error::Data(format!(
                        "sample {:?}: modality {} needs a nonempty TxD token matrix, got shape {:?}",
                        id,
                        m,
                        t.shape()
                    )));
                }
            }
        }
        if tokens_v.is_none() && tokens_t.is_none() {
            return Err(Error::Data(format!("sample {:?} has no modalities", id)));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Data(format!("sample {:?} has a non-binary label", id)));
        }
        Ok(MultiModalSample { id, tokens_v, tokens_t, labels })
    }

    pub fn tokens(&self, m: Modality) -> Option<&Tensor<f64>> {
        match m {
            Modality::V => self.tokens_v.as_ref(),
            Modality::T => self.tokens_t.as_ref(),
        }
    }

    pub fn positives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Remove `ceil(fraction * T)` uniformly chosen tokens (order of the rest
/// preserved); `fraction = 1` marks the modality absent. Deterministic per
/// seed.
pub fn drop_modality_tokens(
    sample: &MultiModalSample,
    modality: Modality,
    fraction: f64,
    seed: u64,
) -> Result<MultiModalSample> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("drop fraction {} outside [0, 1]", fraction)));
    }
    let tokens = sample.tokens(modality).ok_or_else(|| {
        Error::Data(format!("sample {:?}: modality {} already absent", sample.id, modality))
    })?;
    let t = tokens.nrows();
    let n_drop = (fraction * t as f64).ceil() as usize;

    let mut out = sample.clone();
    if n_drop == 0 {
        return Ok(out);
    }
    let new_tokens = if n_drop >= t {
        None
    } else {
        let mut rng = rng::stream(seed, "drop_tokens", 0);
        let mut dropped = index_sample(&mut rng, t, n_drop).into_vec();
        dropped.sort_unstable();
        let d = tokens.ncols();
        let mut values = Vec::with_capacity((t - n_drop) * d);
        let mut next = 0;
        for r in 0..t {
            if next < dropped.len() && dropped[next] == r {
                next += 1;
                continue;
            }
            values.extend_from_slice(tokens.row(r));
        }
        Some(Tensor::new(vec![t - n_drop, d], values)?)
    };
    match modality {
        Modality::V => out.tokens_v = new_tokens,
        Modality::T => out.tokens_t = new_tokens,
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t_v: usize, t_t: usize) -> MultiModalSample {
        let tv = Tensor::new(vec![t_v, 2], (0..t_v * 2).map(|i| i as f64).collect()).unwrap();
        let tt = Tensor::new(vec![t_t, 3], (0..t_t * 3).map(|i| i as f64 + 0.5).collect()).unwrap();
        MultiModalSample::new("s0".into(), Some(tv), Some(tt), vec![1, 0]).unwrap()
    }

    #[test]
    fn fraction_zero_is_identity() {
        let s = sample(4, 5);
        let out = drop_modality_tokens(&s, Modality::V, 0.0, 9).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn fraction_one_marks_absent() {
        let s = sample(4, 5);
        let out = drop_modality_tokens(&s, Modality::T, 1.0, 9).unwrap();
        assert!(out.tokens_t.is_none());
        assert_eq!(out.tokens_v, s.tokens_v);
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn exact_count_and_order_preserved() {
        let s = sample(10, 5);
        let out = drop_modality_tokens(&s, Modality::V, 0.3, 42).unwrap();
        let kept = out.tokens_v.as_ref().unwrap();
        assert_eq!(kept.nrows(), 7);
        // kept rows must appear in the original order: first column encodes 2*row
        let firsts: Vec<f64> = (0..kept.nrows()).map(|r| kept.row(r)[0]).collect();
        let mut sorted = firsts.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(firsts, sorted);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = sample(10, 5);
        let a = drop_modality_tokens(&s, Modality::V, 0.5, 7).unwrap();
        let b = drop_modality_tokens(&s, Modality::V, 0.5, 7).unwrap();
        let c = drop_modality_tokens(&s, Modality::V, 0.5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn absent_modality_is_an_error() {
        let s = sample(4, 5);
        let gone = drop_modality_tokens(&s, Modality::V, 1.0, 1).unwrap();
        assert!(drop_modality_tokens(&gone, Modality::V, 0.5, 1).is_err());
    }
}
