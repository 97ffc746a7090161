//! Synthetic fine-grained multi-label dataset generator.
//!
//! Each class gets one hidden unit-norm signature per modality. The base
//! signatures are orthonormal; each configured fine-grained pair (a, b) then
//! rotates b toward a so that cos(sig_a, sig_b) = 0.8 exactly, which makes
//! the pair hard for nearest-centroid but separable with training. Label
//! sets come from a ring-biased Markov chain so labels co-occur
//! non-uniformly, and tokens are per-token convex mixtures of the positive
//! signatures plus Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::prototypes::orthonormal_rows;
use crate::rng;

use super::io::{save_dataset, write_atomic, Dataset};
use super::manifest::{DatasetManifest, SplitInfo, TaskMode, TokenFormat, MANIFEST_VERSION};
use super::sample::MultiModalSample;
use super::taxonomy::ClassTaxonomy;

pub const FINE_GRAINED_COSINE: f64 = 0.8;

fn default_k() -> usize {
    8
}
fn default_dim() -> usize {
    16
}
fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}
fn default_max_labels() -> usize {
    3
}
fn default_strength() -> f64 {
    0.35
}
fn default_noise() -> f64 {
    0.1
}
fn default_pairs() -> Vec<(usize, usize)> {
    vec![(0, 1), (4, 5)]
}
fn default_seed() -> u64 {
    7
}
fn default_min_tokens() -> usize {
    6
}
fn default_max_tokens() -> usize {
    12
}
fn default_superclasses() -> Option<usize> {
    Some(4)
}
fn default_task_mode() -> TaskMode {
    TaskMode::MultiLabel
}
fn default_token_format() -> TokenFormat {
    TokenFormat::Jsonl
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_dim")]
    pub d_v: usize,
    #[serde(default = "default_dim")]
    pub d_t: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_max_labels")]
    pub max_labels_per_sample: usize,
    /// Extra probability mass on the ring neighbor (i+1) mod K when the
    /// label chain extends; 0 = uniform over the other classes.
    #[serde(default = "default_strength")]
    pub co_occurrence_strength: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_pairs")]
    pub fine_grained_pairs: Vec<(usize, usize)>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// When set, classes are assigned to this many superclasses in
    /// contiguous blocks (class k -> floor(k * S / K)).
    #[serde(default = "default_superclasses")]
    pub num_superclasses: Option<usize>,
    #[serde(default = "default_task_mode")]
    pub task_mode: TaskMode,
    #[serde(default = "default_token_format")]
    pub token_format: TokenFormat,
}

impl Default for SynthConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("synth: K must be at least 2".into()));
        }
        if self.d_v < self.k || self.d_t < self.k {
            return Err(Error::Config(format!(
                "synth: modality dims must be >= K to orthonormalize ({}x{} vs K={})",
                self.d_v, self.d_t, self.k
            )));
        }
        if self.max_labels_per_sample == 0 {
            return Err(Error::Config("synth: max_labels_per_sample must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.co_occurrence_strength) {
            return Err(Error::Config("synth: co_occurrence_strength must lie in [0, 1)".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("synth: noise_sigma must be >= 0".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "synth: need 1 <= min_tokens <= max_tokens, got {}..{}",
                self.min_tokens, self.max_tokens
            )));
        }
        let mut used = vec![false; self.k];
        for &(a, b) in &self.fine_grained_pairs {
            if a >= self.k || b >= self.k || a == b {
                return Err(Error::Config(format!("synth: invalid fine-grained pair ({}, {})", a, b)));
            }
            if used[a] || used[b] {
                return Err(Error::Config(format!(
                    "synth: class {} appears in more than one fine-grained pair",
                    if used[a] { a } else { b }
                )));
            }
            used[a] = true;
            used[b] = true;
        }
        if let Some(s) = self.num_superclasses {
            if s == 0 || s > self.k {
                return Err(Error::Config(format!(
                    "synth: num_superclasses must lie in 1..=K, got {}",
                    s
                )));
            }
        }
        if self.task_mode == TaskMode::SingleLabel && self.max_labels_per_sample != 1 {
            return Err(Error::Config(
                "synth: single_label mode requires max_labels_per_sample = 1".into(),
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let width = (self.k.max(2) - 1).to_string().len();
        (0..self.k).map(|i| format!("class_{:0w$}", i, w = width)).collect()
    }

    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        match self.num_superclasses {
            Some(s) => ClassTaxonomy::with_hierarchy(
                self.class_names(),
                (0..self.k).map(|c| c * s / self.k).collect(),
                s,
            ),
            None => ClassTaxonomy::new(self.class_names()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub signatures_v: Tensor<f64>,
    pub signatures_t: Tensor<f64>,
}

/// One step of the label chain: extra mass `strength` on the ring neighbor,
/// the rest uniform over the other K-1 classes.
fn chain_next<R: Rng>(rng: &mut R, k: usize, last: usize, strength: f64) -> usize {
    if rng.gen::<f64>() < strength {
        (last + 1) % k
    } else {
        let idx = rng.gen_range(0..k - 1);
        if idx >= last {
            idx + 1
        } else {
            idx
        }
    }
}

/// Draw one label set: chain length Uniform{1..=max_labels}, first label
/// uniform, transitions via [`chain_next`]; revisited classes add nothing.
pub fn markov_label_set<R: Rng>(
    rng: &mut R,
    k: usize,
    max_labels: usize,
    strength: f64,
) -> Vec<u8> {
    let m = rng.gen_range(1..=max_labels);
    let mut set = vec![0u8; k];
    let mut last = rng.gen_range(0..k);
    set[last] = 1;
    for _ in 1..m {
        last = chain_next(rng, k, last, strength);
        set[last] = 1;
    }
    set
}

fn signatures(cfg: &SynthConfig, d: usize, purpose: &str) -> Result<Tensor<f64>> {
    let mut stream = rng::stream(cfg.seed, purpose, 0);
    let base: Tensor<f64> = orthonormal_rows(cfg.k, d, &mut stream)?;
    let mut rows: Vec<Vec<f64>> = (0..cfg.k).map(|r| base.row(r).to_vec()).collect();
    let c = FINE_GRAINED_COSINE;
    let s = (1.0 - c * c).sqrt();
    for &(a, b) in &cfg.fine_grained_pairs {
        let rotated: Vec<f64> = rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(&xa, &xb)| c * xa + s * xb)
            .collect();
        rows[b] = rotated;
    }
    Tensor::from_rows(&rows)
}

fn sample_tokens(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    signatures: &Tensor<f64>,
    positives: &[usize],
) -> Tensor<f64> {
    let d = signatures.ncols();
    let t = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
    let mut values = Vec::with_capacity(t * d);
    let mut weights = vec![0.0f64; positives.len()];
    for _ in 0..t {
        if positives.len() == 1 {
            weights[0] = 1.0;
        } else {
            let mut sum = 0.0;
            for w in weights.iter_mut() {
                *w = -(1.0 - rng.gen::<f64>()).ln();
                sum += *w;
            }
            if sum == 0.0 {
                weights.iter_mut().for_each(|w| *w = 1.0 / positives.len() as f64);
            } else {
                weights.iter_mut().for_each(|w| *w /= sum);
            }
        }
        for c in 0..d {
            let mut x = 0.0;
            for (wi, &p) in weights.iter().zip(positives) {
                x += wi * signatures.get2(p, c);
            }
            if cfg.noise_sigma > 0.0 {
                x += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            values.push(x);
        }
    }
    Tensor::new(vec![t, d], values).expect("token dims are positive")
}

fn id_for(split: &str, i: usize) -> String {
    format!("{}-{:06}", split, i)
}

/// Generate the dataset, write it (plus `signatures.json`) under `out_dir`,
/// and return everything in memory as well.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let taxonomy = cfg.taxonomy()?;
    let sig_v = signatures(cfg, cfg.d_v, "signatures_v")?;
    let sig_t = signatures(cfg, cfg.d_t, "signatures_t")?;

    let mut splits = BTreeMap::new();
    let mut split_meta = BTreeMap::new();
    for (split, n) in [("train", cfg.n_train), ("test", cfg.n_test)] {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut label_rng = rng::stream(cfg.seed, &format!("labels/{}", split), i as u64);
            let labels =
                markov_label_set(&mut label_rng, cfg.k, cfg.max_labels_per_sample, cfg.co_occurrence_strength);
            let positives: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == 1)
                .map(|(j, _)| j)
                .collect();
            let mut v_rng = rng::stream(cfg.seed, &format!("tokens_v/{}", split), i as u64);
            let mut t_rng = rng::stream(cfg.seed, &format!("tokens_t/{}", split), i as u64);
            let tokens_v = sample_tokens(&mut v_rng, cfg, &sig_v, &positives);
            let tokens_t = sample_tokens(&mut t_rng, cfg, &sig_t, &positives);
            samples.push(MultiModalSample::new(
                id_for(split, i),
                Some(tokens_v),
                Some(tokens_t),
                labels,
            )?);
        }
        split_meta.insert(
            split.to_string(),
            SplitInfo { count: n, token_format: cfg.token_format },
        );
        splits.insert(split.to_string(), samples);
    }

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        task_mode: cfg.task_mode,
        num_classes: cfg.k,
        class_names: taxonomy.class_names().to_vec(),
        superclass_of: taxonomy.superclass_of().map(|m| m.to_vec()),
        num_superclasses: taxonomy
            .has_hierarchy()
            .then(|| taxonomy.num_superclasses()),
        dim_v: cfg.d_v,
        dim_t: cfg.d_t,
        splits: split_meta,
    };
    let dataset = Dataset { manifest, taxonomy, splits };
    save_dataset(&dataset, out_dir)?;

    #[derive(Serialize)]
    struct Signatures<'a> {
        v: Vec<&'a [f64]>,
        t: Vec<&'a [f64]>,
    }
    let sigs = Signatures {
        v: (0..cfg.k).map(|r| sig_v.row(r)).collect(),
        t: (0..cfg.k).map(|r| sig_t.row(r)).collect(),
    };
    write_atomic(
        &out_dir.join("signatures.json"),
        serde_json::to_string_pretty(&sigs)?.as_bytes(),
    )?;

    Ok(SynthOutput { dataset, signatures_v: sig_v, signatures_t: sig_t })
}

/// Nearest-signature classification of a sample's mean tokens: the argmax
/// class of cos([mean_v; mean_t], [sig_v_k; sig_t_k]). Used as the
/// calibration oracle for `noise_sigma`.
pub fn nearest_signature_hit(
    sample: &MultiModalSample,
    sig_v: &Tensor<f64>,
    sig_t: &Tensor<f64>,
) -> bool {
    let mean = |t: &Tensor<f64>| -> Vec<f64> {
        let (rows, cols) = (t.nrows(), t.ncols());
        let mut m = vec![0.0; cols];
        for r in 0..rows {
            for (mi, &v) in m.iter_mut().zip(t.row(r)) {
                *mi += v / rows as f64;
            }
        }
        m
    };
    let mut z = Vec::new();
    if let Some(tv) = &sample.tokens_v {
        z.extend(mean(tv));
    }
    if let Some(tt) = &sample.tokens_t {
        z.extend(mean(tt));
    }
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if zn == 0.0 {
        return false;
    }
    let k = sig_v.nrows();
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for c in 0..k {
        let mut sig = Vec::new();
        if sample.tokens_v.is_some() {
            sig.extend_from_slice(sig_v.row(c));
        }
        if sample.tokens_t.is_some() {
            sig.extend_from_slice(sig_t.row(c));
        }
        let dot: f64 = z.iter().zip(&sig).map(|(&a, &b)| a * b).sum();
        let sn = sig.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = dot / (zn * sn);
        if cos > best_cos {
            best_cos = cos;
            best = c;
        }
    }
    sample.labels[best] == 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn noiseless_single_label_mean_token_is_the_signature() {
        let cfg = SynthConfig {
            k: 4,
            d_v: 4,
            d_t: 5,
            n_train: 12,
            n_test: 4,
            max_labels_per_sample: 1,
            noise_sigma: 0.0,
            fine_grained_pairs: vec![],
            num_superclasses: None,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&cfg, dir.path()).unwrap();
        for s in &out.dataset.splits["train"] {
            let pos = s.positives();
            assert_eq!(pos.len(), 1);
            let t = s.tokens_v.as_ref().unwrap();
            let mut mean = vec![0.0; t.ncols()];
            for r in 0..t.nrows() {
                for (m, &v) in mean.iter_mut().zip(t.row(r)) {
                    *m += v / t.nrows() as f64;
                }
            }
            for (m, &sig) in mean.iter().zip(out.signatures_v.row(pos[0])) {
                assert!((m - sig).abs() < 1e-12, "sample {}", s.id);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            k: 3,
            d_v: 3,
            d_t: 3,
            n_train: 5,
            n_test: 2,
            num_superclasses: None,
            fine_grained_pairs: vec![(0, 1)],
            ..SynthConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&cfg, d1.path()).unwrap();
        generate_synthetic(&cfg, d2.path()).unwrap();
        for name in
            ["manifest.json", "train_labels.csv", "train_tokens_v.jsonl", "signatures.json"]
        {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{} differs",
                name
            );
        }
    }

    #[test]
    fn fine_grained_pair_cosine_is_exact() {
        let cfg = SynthConfig {
            k: 4,
            d_v: 6,
            d_t: 6,
            n_train: 1,
            n_test: 1,
            fine_grained_pairs: vec![(0, 1), (2, 3)],
            num_superclasses: None,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&cfg, dir.path()).unwrap();
        for sig in [&out.signatures_v, &out.signatures_t] {
            for &(a, b) in &cfg.fine_grained_pairs {
                let dot: f64 =
                    sig.row(a).iter().zip(sig.row(b)).map(|(&x, &y)| x * y).sum();
                assert!((dot - FINE_GRAINED_COSINE).abs() < 1e-12);
                let norm: f64 = sig.row(b).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Exact distribution of the label chain by dynamic programming over
    /// (label set, last label) states, mirroring the sampler.
    fn chain_pair_probabilities(k: usize, max_labels: usize, strength: f64) -> Vec<Vec<f64>> {
        let mut pair = vec![vec![0.0f64; k]; k];
        for m in 1..=max_labels {
            let pm = 1.0 / max_labels as f64;
            // state: (bitmask, last) -> probability
            let mut states: HashMap<(u32, usize), f64> = HashMap::new();
            for first in 0..k {
                *states.entry((1 << first, first)).or_default() += 1.0 / k as f64;
            }
            for _ in 1..m {
                let mut next: HashMap<(u32, usize), f64> = HashMap::new();
                for (&(mask, last), &p) in &states {
                    for j in 0..k {
                        if j == last {
                            continue;
                        }
                        let mut pj = (1.0 - strength) / (k - 1) as f64;
                        if j == (last + 1) % k {
                            pj += strength;
                        }
                        *next.entry((mask | (1 << j), j)).or_default() += p * pj;
                    }
                }
                states = next;
            }
            for (&(mask, _), &p) in &states {
                for a in 0..k {
                    if mask & (1 << a) == 0 {
                        continue;
                    }
                    for b in 0..k {
                        if mask & (1 << b) != 0 {
                            pair[a][b] += pm * p;
                        }
                    }
                }
            }
        }
        pair
    }

    fn worst_cooccurrence_error(seed: u64, k: usize, max_labels: usize, strength: f64, n: usize) -> f64 {
        let expected = chain_pair_probabilities(k, max_labels, strength);
        let mut counts = vec![vec![0.0f64; k]; k];
        for i in 0..n {
            let mut rng = rng::stream(seed, "labels/train", i as u64);
            let set = markov_label_set(&mut rng, k, max_labels, strength);
            for a in 0..k {
                if set[a] == 0 {
                    continue;
                }
                for b in 0..k {
                    if set[b] == 1 {
                        counts[a][b] += 1.0 / n as f64;
                    }
                }
            }
        }
        let mut worst = 0.0f64;
        for a in 0..k {
            for b in 0..k {
                let want = expected[a][b] / expected[a][a];
                let got = counts[a][b] / counts[a][a];
                worst = worst.max((got - want).abs() / want.max(0.01));
            }
        }
        worst
    }

    #[test]
    fn empirical_cooccurrence_matches_chain_dp() {
        let worst = worst_cooccurrence_error(18, 6, 3, 0.4, 20000);
        assert!(worst < 0.05, "worst diagonal-normalized relative error {:.4}", worst);
    }

    #[test]
    fn default_acceptance_dataset_beats_nearest_signature_floor() {
        let cfg = SynthConfig { n_train: 400, n_test: 100, ..SynthConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&cfg, dir.path()).unwrap();
        let train = &out.dataset.splits["train"];
        let hits = train
            .iter()
            .filter(|s| nearest_signature_hit(s, &out.signatures_v, &out.signatures_t))
            .count();
        let acc = hits as f64 / train.len() as f64;
        assert!(acc >= 0.98, "nearest-signature accuracy {} below calibration floor", acc);
    }
}
