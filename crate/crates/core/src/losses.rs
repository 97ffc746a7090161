//! Loss functions for prototype-based multi-label training, plus the
//! baseline objectives used for comparison runs.
//!
//! All losses build their forward pass on a [`Tape`] so gradients flow to
//! the embeddings (and, where applicable, the prototype matrix) through
//! [`Tape::backward`]. Similarities are cosine throughout.

use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};

use crate::data::labels::LabelMatrix;
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Default temperature for the contrastive losses.
pub const DEFAULT_TAU: f64 = 0.1;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Which classes enter the denominator of the multi-label contrastive
/// loss. `NegativesOnly` follows the written definition (the positive term
/// is left out, so the loss can go negative); `AllClasses` is the standard
/// softmax form over every class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    #[default]
    NegativesOnly,
    AllClasses,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlcLossConfig {
    /// Temperature τ applied to every similarity.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Optional cap on the number of negative classes per anchor. When
    /// fewer negatives exist than the cap, all of them are used directly.
    #[serde(default)]
    pub neg_sample_cap: Option<usize>,
    /// Seed for the negative-sampling streams.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub denominator: DenominatorMode,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for MlcLossConfig {
    fn default() -> Self {
        MlcLossConfig {
            tau: DEFAULT_TAU,
            neg_sample_cap: None,
            seed: 0,
            denominator: DenominatorMode::default(),
        }
    }
}

impl MlcLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.neg_sample_cap == Some(0) {
            return Err(Error::config("neg_sample_cap must be at least 1 when set"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    /// Focusing parameter γ ≥ 0.
    #[serde(default = "default_focal_gamma")]
    pub gamma: f64,
    /// Positive-class weight α ∈ (0, 1]; negatives are weighted 1 − α.
    #[serde(default = "default_focal_alpha")]
    pub alpha: f64,
}

fn default_focal_gamma() -> f64 {
    2.0
}

fn default_focal_alpha() -> f64 {
    0.2
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: default_focal_gamma(), alpha: default_focal_alpha() }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymConfig {
    /// Positive focusing parameter γ₊ ≥ 0.
    #[serde(default = "default_gamma_pos")]
    pub gamma_pos: f64,
    /// Negative focusing parameter γ₋ ≥ 0.
    #[serde(default = "default_gamma_neg")]
    pub gamma_neg: f64,
    /// Probability margin m ∈ [0, 1); negatives with p ≤ m contribute 0.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_gamma_pos() -> f64 {
    0.0
}

fn default_gamma_neg() -> f64 {
    4.0
}

fn default_margin() -> f64 {
    0.05
}

impl Default for AsymConfig {
    fn default() -> Self {
        AsymConfig {
            gamma_pos: default_gamma_pos(),
            gamma_neg: default_gamma_neg(),
            margin: default_margin(),
        }
    }
}

impl AsymConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0) {
            return Err(Error::config(format!("gamma_pos must be >= 0, got {}", self.gamma_pos)));
        }
        if !(self.gamma_neg >= 0.0) {
            return Err(Error::config(format!("gamma_neg must be >= 0, got {}", self.gamma_neg)));
        }
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return Err(Error::config(format!("margin must be in [0, 1), got {}", self.margin)));
        }
        Ok(())
    }
}

fn check_binary(op: &'static str, labels: &[u8]) -> Result<()> {
    if labels.iter().any(|&b| b > 1) {
        return Err(Error::contract(op, "labels must be 0/1"));
    }
    Ok(())
}

fn partition(labels: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &b) in labels.iter().enumerate() {
        if b == 1 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    (pos, neg)
}

/// Reshape a numel-1 node to rank 0 so it can combine with scalar nodes.
fn as_scalar<F: Scalar>(tape: &mut Tape<F>, v: Var) -> Result<Var> {
    if tape.value(v).rank() == 0 {
        Ok(v)
    } else {
        tape.reshape(v, vec![])
    }
}

fn labels_tensor<F: Scalar>(tape: &mut Tape<F>, labels: &[u8]) -> Var {
    let values: Vec<F> = labels.iter().map(|&b| F::from_count(b as usize)).collect();
    tape.constant(crate::diff::Tensor::vector(values))
}

/// Cosine similarity of one embedding `z: [d]` against every row of the
/// prototype matrix `cp: [K, d]`, producing `[K]`.
pub fn class_similarities<F: Scalar>(tape: &mut Tape<F>, z: Var, cp: Var) -> Result<Var> {
    let zs = tape.value(z).shape().to_vec();
    let cs = tape.value(cp).shape().to_vec();
    if zs.len() != 1 || cs.len() != 2 || cs[1] != zs[0] {
        return Err(Error::shape(
            "class_similarities",
            format!("embedding {:?} against prototypes {:?}", zs, cs),
        ));
    }
    let z_hat = tape.row_normalize(z)?;
    let cp_hat = tape.row_normalize(cp)?;
    let z_col = tape.reshape(z_hat, vec![zs[0], 1])?;
    let sims = tape.matmul(cp_hat, z_col)?;
    tape.reshape(sims, vec![cs[0]])
}

/// Natural log of `Σ exp(x)` over the given scaled-similarity nodes, with
/// a detached max shift for stability. The negative part is rescaled by
/// `rescale` (the unbiasedness correction for subsampled negatives).
fn ln_denominator<F: Scalar>(
    tape: &mut Tape<F>,
    s_neg: Var,
    s_pos: Option<Var>,
    rescale: f64,
) -> Result<Var> {
    let mut m = tape
        .value(s_neg)
        .values()
        .iter()
        .fold(F::neg_infinity(), |a, &v| a.max(v));
    if let Some(p) = s_pos {
        m = tape.value(p).values().iter().fold(m, |a, &v| a.max(v));
    }
    let shifted = tape.add_scalar(s_neg, -m);
    let e_neg = tape.exp(shifted);
    let mut denom = tape.sum_all(e_neg);
    if rescale != 1.0 {
        denom = tape.mul_scalar(denom, F::cast(rescale));
    }
    if let Some(p) = s_pos {
        let shifted_p = tape.add_scalar(p, -m);
        let e_pos = tape.exp(shifted_p);
        let sum_pos = tape.sum_all(e_pos);
        denom = tape.add(sum_pos, denom)?;
    }
    let ln = tape.ln(denom)?;
    Ok(tape.add_scalar(ln, m))
}

/// Multi-label prototype contrastive loss for one sample.
///
/// For each positive class k the term is
/// `−log[exp(sim(z, cp_k)/τ) / D]` where `D` sums `exp(sim(z, cp_j)/τ)`
/// over the denominator classes: under the default mode only negatives
/// enter `D` (so the loss may be negative), under
/// [`DenominatorMode::AllClasses`] every class does. Terms are averaged
/// over the positive classes.
///
/// When `neg_sample_cap` is set below the negative count, `D` uses a
/// uniform without-replacement subset of that size, rescaled by
/// `num_negatives / cap` so its expectation is unchanged. `draw` selects
/// the sampling stream; the same `(seed, draw)` pair always yields the
/// same subset.
pub fn mlc_loss<F: Scalar>(
    tape: &mut Tape<F>,
    z: Var,
    labels: &[u8],
    cp: Var,
    cfg: &MlcLossConfig,
    draw: u64,
) -> Result<Var> {
    cfg.validate()?;
    check_binary("mlc_loss", labels)?;
    let cs = tape.value(cp).shape().to_vec();
    if cs.len() != 2 || cs[0] != labels.len() {
        return Err(Error::shape(
            "mlc_loss",
            format!("prototypes {:?} against {} labels", cs, labels.len()),
        ));
    }
    let (pos, neg) = partition(labels);
    if pos.is_empty() {
        return Err(Error::contract(
            "mlc_loss",
            "sample has no positive class; skip such samples or fix the labels",
        ));
    }
    if neg.is_empty() {
        return Err(Error::contract(
            "mlc_loss",
            "sample has no negative class; the loss needs at least one, reconfigure the task",
        ));
    }

    let sims = class_similarities(tape, z, cp)?;
    let scaled = tape.mul_scalar(sims, F::ONE / F::cast(cfg.tau));

    let (chosen, rescale) = match cfg.neg_sample_cap {
        Some(cap) if cap < neg.len() => {
            let mut rng = rng::stream(cfg.seed, "neg_sample", draw);
            let mut idx: Vec<usize> = index_sample(&mut rng, neg.len(), cap)
                .into_iter()
                .map(|i| neg[i])
                .collect();
            idx.sort_unstable();
            (idx, neg.len() as f64 / cap as f64)
        }
        _ => (neg, 1.0),
    };

    let s_pos = tape.gather(scaled, &pos)?;
    let s_neg = tape.gather(scaled, &chosen)?;
    let pos_in_denom = match cfg.denominator {
        DenominatorMode::NegativesOnly => None,
        DenominatorMode::AllClasses => Some(s_pos),
    };
    let ln_denom = ln_denominator(tape, s_neg, pos_in_denom, rescale)?;

    let mut terms = Vec::with_capacity(pos.len());
    for i in 0..pos.len() {
        let si = tape.slice(s_pos, 0, i, 1)?;
        let si = as_scalar(tape, si)?;
        terms.push(tape.sub(ln_denom, si)?);
    }
    tape.mean_scalars(&terms)
}

/// Mean of [`mlc_loss`] over the rows of a batch `z: [N, d]`. Row `i`
/// draws its negative subset from stream `base_draw + i`.
pub fn mlc_loss_batch<F: Scalar>(
    tape: &mut Tape<F>,
    z: Var,
    labels: &LabelMatrix,
    cp: Var,
    cfg: &MlcLossConfig,
    base_draw: u64,
) -> Result<Var> {
    let zs = tape.value(z).shape().to_vec();
    if zs.len() != 2 || zs[0] != labels.num_samples() {
        return Err(Error::shape(
            "mlc_loss_batch",
            format!("embeddings {:?} against {} label rows", zs, labels.num_samples()),
        ));
    }
    if labels.num_samples() == 0 {
        return Err(Error::contract("mlc_loss_batch", "empty batch"));
    }
    let mut terms = Vec::with_capacity(zs[0]);
    for i in 0..zs[0] {
        let row = tape.slice(z, 0, i, 1)?;
        let zi = tape.reshape(row, vec![zs[1]])?;
        terms.push(mlc_loss(tape, zi, labels.row(i), cp, cfg, base_draw + i as u64)?);
    }
    tape.mean_scalars(&terms)
}

/// Per-anchor supervised contrastive terms for a single-label batch.
///
/// Returns `(anchor index, term)` for every anchor that has at least one
/// same-class peer; anchors without peers are omitted. Each term averages
/// `−log[exp(sim(z_i, z_p)/τ) / Σ_{a≠i} exp(sim(z_i, z_a)/τ)]` over the
/// anchor's peers p. Unlike the prototype loss, the denominator here runs
/// over all other samples, positives included.
pub fn supcon_anchor_terms<F: Scalar>(
    tape: &mut Tape<F>,
    z: Var,
    classes: &[usize],
    tau: f64,
) -> Result<Vec<(usize, Var)>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {}", tau)));
    }
    let n = classes.len();
    if n < 2 {
        return Err(Error::contract("supcon_loss", "need at least two samples"));
    }
    let zs = tape.value(z).shape().to_vec();
    if zs.len() != 2 || zs[0] != n {
        return Err(Error::shape(
            "supcon_loss",
            format!("embeddings {:?} against {} class labels", zs, n),
        ));
    }
    let z_hat = tape.row_normalize(z)?;
    let zt = tape.transpose(z_hat)?;
    let sims = tape.matmul(z_hat, zt)?;
    let scaled = tape.mul_scalar(sims, F::ONE / F::cast(tau));

    let mut out = Vec::new();
    for i in 0..n {
        let peers: Vec<usize> = (0..n).filter(|&j| j != i && classes[j] == classes[i]).collect();
        if peers.is_empty() {
            continue;
        }
        let row = tape.slice(scaled, 0, i, 1)?;
        let row = tape.reshape(row, vec![n])?;
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let s_others = tape.gather(row, &others)?;
        let ln_denom = ln_denominator(tape, s_others, None, 1.0)?;
        let s_peers = tape.gather(row, &peers)?;
        let mut terms = Vec::with_capacity(peers.len());
        for p in 0..peers.len() {
            let sp = tape.slice(s_peers, 0, p, 1)?;
            let sp = as_scalar(tape, sp)?;
            terms.push(tape.sub(ln_denom, sp)?);
        }
        out.push((i, tape.mean_scalars(&terms)?));
    }
    Ok(out)
}

/// Supervised contrastive loss over a single-label batch: the mean of
/// [`supcon_anchor_terms`] over anchors that have peers.
pub fn supcon_loss<F: Scalar>(
    tape: &mut Tape<F>,
    z: Var,
    classes: &[usize],
    tau: f64,
) -> Result<Var> {
    let terms = supcon_anchor_terms(tape, z, classes, tau)?;
    if terms.is_empty() {
        return Err(Error::contract(
            "supcon_loss",
            "no anchor has a same-class peer; the loss is undefined for this batch",
        ));
    }
    let vars: Vec<Var> = terms.into_iter().map(|(_, t)| t).collect();
    tape.mean_scalars(&vars)
}

/// Mean binary cross-entropy over classes, taking raw logits. Computed as
/// `softplus(s) − y·s`, which equals `−[y log σ(s) + (1−y) log(1−σ(s))]`
/// without ever forming the sigmoid, so extreme logits are safe.
pub fn bce_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[u8]) -> Result<Var> {
    check_binary("bce_loss", labels)?;
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 1 || s[0] != labels.len() {
        return Err(Error::shape(
            "bce_loss",
            format!("logits {:?} against {} labels", s, labels.len()),
        ));
    }
    let y = labels_tensor(tape, labels);
    let sp = tape.softplus(logits);
    let ys = tape.mul(y, logits)?;
    let per_class = tape.sub(sp, ys)?;
    Ok(tape.mean_all(per_class))
}

/// Mean focal loss over classes, taking probabilities. Positives weigh
/// `α(1−p)^γ(−log p)`, negatives `(1−α)p^γ(−log(1−p))`.
pub fn focal_loss<F: Scalar>(
    tape: &mut Tape<F>,
    probs: Var,
    labels: &[u8],
    cfg: &FocalConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_binary("focal_loss", labels)?;
    let s = tape.value(probs).shape().to_vec();
    if s.len() != 1 || s[0] != labels.len() {
        return Err(Error::shape(
            "focal_loss",
            format!("probs {:?} against {} labels", s, labels.len()),
        ));
    }
    let lo = F::cast(PROB_EPS);
    let p = tape.clamp(probs, lo, F::ONE - lo)?;
    let np = tape.neg(p);
    let q = tape.add_scalar(np, F::ONE);
    let ln_p = tape.ln(p)?;
    let ln_q = tape.ln(q)?;
    let g = F::cast(cfg.gamma);
    let wq = tape.pow_scalar(q, g)?;
    let wp = tape.pow_scalar(p, g)?;
    let a = F::cast(cfg.alpha);
    let pos_raw = tape.mul(wq, ln_p)?;
    let pos_term = tape.mul_scalar(pos_raw, -a);
    let neg_raw = tape.mul(wp, ln_q)?;
    let neg_term = tape.mul_scalar(neg_raw, a - F::ONE);
    let y = labels_tensor(tape, labels);
    let ny = tape.neg(y);
    let y_comp = tape.add_scalar(ny, F::ONE);
    let pos_masked = tape.mul(y, pos_term)?;
    let neg_masked = tape.mul(y_comp, neg_term)?;
    let total = tape.add(pos_masked, neg_masked)?;
    Ok(tape.mean_all(total))
}

/// Mean asymmetric loss over classes, taking probabilities. Positives use
/// `−(1−p)^{γ₊} log p`; negatives shift the probability by the margin,
/// `p_m = max(p − m, 0)`, and use `−p_m^{γ₋} log(1 − p_m)`, so easy
/// negatives below the margin contribute nothing.
pub fn asym_loss<F: Scalar>(
    tape: &mut Tape<F>,
    probs: Var,
    labels: &[u8],
    cfg: &AsymConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_binary("asym_loss", labels)?;
    let s = tape.value(probs).shape().to_vec();
    if s.len() != 1 || s[0] != labels.len() {
        return Err(Error::shape(
            "asym_loss",
            format!("probs {:?} against {} labels", s, labels.len()),
        ));
    }
    let lo = F::cast(PROB_EPS);
    let p = tape.clamp(probs, lo, F::ONE - lo)?;
    let np = tape.neg(p);
    let q = tape.add_scalar(np, F::ONE);
    let ln_p = tape.ln(p)?;
    let wq = tape.pow_scalar(q, F::cast(cfg.gamma_pos))?;
    let l_pos = tape.mul(wq, ln_p)?;

    let shifted = tape.add_scalar(p, -F::cast(cfg.margin));
    let pm = tape.relu(shifted);
    let npm = tape.neg(pm);
    let one_minus_pm = tape.add_scalar(npm, F::ONE);
    let ln_qm = tape.ln(one_minus_pm)?;
    let wpm = tape.pow_scalar(pm, F::cast(cfg.gamma_neg))?;
    let l_neg = tape.mul(wpm, ln_qm)?;

    let y = labels_tensor(tape, labels);
    let ny = tape.neg(y);
    let y_comp = tape.add_scalar(ny, F::ONE);
    let pos_masked = tape.mul(y, l_pos)?;
    let neg_masked = tape.mul(y_comp, l_neg)?;
    let summed = tape.add(pos_masked, neg_masked)?;
    let negated = tape.neg(summed);
    Ok(tape.mean_all(negated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check_multi, Tensor};
    use rand::Rng;

    fn cfg_tau(tau: f64) -> MlcLossConfig {
        MlcLossConfig { tau, ..MlcLossConfig::default() }
    }

    fn eval_mlc(
        z: Vec<f64>,
        labels: &[u8],
        cp_rows: Vec<Vec<f64>>,
        cfg: &MlcLossConfig,
    ) -> f64 {
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(Tensor::vector(z));
        let cpv = tape.leaf(Tensor::from_rows(&cp_rows).unwrap());
        let loss = mlc_loss(&mut tape, zv, labels, cpv, cfg, 0).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn mlc_single_positive_hand_value() {
        let got = eval_mlc(
            vec![1.0, 0.0, 0.0],
            &[1, 0, 0],
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            &cfg_tau(1.0),
        );
        let want = 2.0f64.ln() - 1.0;
        assert!((got - want).abs() < 1e-9, "got {}", got);
        assert!(got < 0.0);
    }

    #[test]
    fn mlc_equal_sims_two_positives_is_zero() {
        let got = eval_mlc(
            vec![1.0, 1.0, 1.0],
            &[1, 1, 0],
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            &cfg_tau(1.0),
        );
        assert!(got.abs() < 1e-12, "got {}", got);
    }

    #[test]
    fn mlc_scale_invariant_in_embedding() {
        let cp = vec![
            vec![0.3, -0.7, 0.2],
            vec![0.9, 0.1, -0.3],
            vec![-0.2, 0.4, 0.8],
        ];
        let a = eval_mlc(vec![0.4, -0.2, 0.9], &[0, 1, 0], cp.clone(), &cfg_tau(0.2));
        let b = eval_mlc(vec![0.8, -0.4, 1.8], &[0, 1, 0], cp, &cfg_tau(0.2));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mlc_all_classes_denominator_hand_value() {
        let cfg = MlcLossConfig {
            tau: 1.0,
            denominator: DenominatorMode::AllClasses,
            ..MlcLossConfig::default()
        };
        let got = eval_mlc(
            vec![1.0, 0.0, 0.0],
            &[1, 0, 0],
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            &cfg,
        );
        let want = (std::f64::consts::E + 2.0).ln() - 1.0;
        assert!((got - want).abs() < 1e-12, "got {}", got);
        assert!(got > 0.0);
    }

    #[test]
    fn mlc_positive_similarity_monotonicity() {
        // d = 4, K = 3. Prototypes 1 and 2 are fixed basis vectors; the
        // positive prototype 0 is rotated in the plane spanned by the
        // embedding direction and e3, which changes sim(z, cp_0) alone.
        let z = vec![1.0, 0.0, 0.0, 0.0];
        let build = |s: f64| {
            vec![
                vec![s, 0.0, 0.0, (1.0 - s * s).sqrt()],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ]
        };
        let cfg = cfg_tau(0.5);
        let mut prev = f64::INFINITY;
        for step in 0..8 {
            let s = -0.8 + 0.2 * step as f64;
            let loss = eval_mlc(z.clone(), &[1, 0, 0], build(s), &cfg);
            assert!(loss < prev, "loss not decreasing at sim {}", s);
            prev = loss;
        }
    }

    #[test]
    fn mlc_negative_similarity_monotonicity() {
        let z = vec![1.0, 0.0, 0.0, 0.0];
        let build = |s: f64| {
            vec![
                vec![0.0, 1.0, 0.0, 0.0],
                vec![s, 0.0, 0.0, (1.0 - s * s).sqrt()],
                vec![0.0, 0.0, 1.0, 0.0],
            ]
        };
        let cfg = cfg_tau(0.5);
        let mut prev = f64::NEG_INFINITY;
        for step in 0..8 {
            let s = -0.8 + 0.2 * step as f64;
            let loss = eval_mlc(z.clone(), &[1, 0, 0], build(s), &cfg);
            assert!(loss > prev, "loss not increasing at sim {}", s);
            prev = loss;
        }
    }

    #[test]
    fn mlc_cap_covering_all_negatives_matches_uncapped() {
        let z = vec![0.3, -0.5, 0.8, 0.1];
        let cp = vec![
            vec![0.2, 0.1, -0.4, 0.9],
            vec![-0.6, 0.3, 0.5, 0.2],
            vec![0.9, -0.2, 0.1, 0.3],
            vec![0.1, 0.8, -0.3, -0.2],
            vec![-0.3, -0.4, 0.6, 0.5],
        ];
        let labels = [0, 1, 0, 0, 0];
        let uncapped = eval_mlc(z.clone(), &labels, cp.clone(), &cfg_tau(0.1));
        let capped_cfg = MlcLossConfig { neg_sample_cap: Some(4), ..cfg_tau(0.1) };
        let capped = eval_mlc(z, &labels, cp, &capped_cfg);
        assert_eq!(uncapped.to_bits(), capped.to_bits());
    }

    #[test]
    fn mlc_negative_sampling_is_deterministic_per_draw() {
        let z = vec![0.3, -0.5, 0.8, 0.1];
        let cp: Vec<Vec<f64>> = (0..9)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let labels = [0, 0, 1, 0, 0, 0, 0, 0, 0];
        let cfg = MlcLossConfig { neg_sample_cap: Some(3), seed: 11, ..cfg_tau(0.1) };
        let run = |draw: u64| {
            let mut tape = Tape::<f64>::new();
            let zv = tape.leaf(Tensor::vector(z.clone()));
            let cpv = tape.leaf(Tensor::from_rows(&cp).unwrap());
            let loss = mlc_loss(&mut tape, zv, &labels, cpv, &cfg, draw).unwrap();
            tape.value(loss).item()
        };
        assert_eq!(run(5).to_bits(), run(5).to_bits());
        assert_ne!(run(5).to_bits(), run(6).to_bits());
    }

    #[test]
    fn mlc_rejects_degenerate_label_rows() {
        let cp = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let cpv = tape.leaf(Tensor::from_rows(&cp).unwrap());
        let all_neg = mlc_loss(&mut tape, zv, &[0, 0], cpv, &cfg_tau(1.0), 0);
        assert!(all_neg.is_err());
        let all_pos = mlc_loss(&mut tape, zv, &[1, 1], cpv, &cfg_tau(1.0), 0);
        assert!(all_pos.is_err());
    }

    #[test]
    fn mlc_batch_averages_per_sample_terms() {
        let cp = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]];
        let labels = LabelMatrix::from_rows(&[vec![1, 0, 0], vec![0, 1, 0]], 3).unwrap();
        let cfg = cfg_tau(1.0);
        let singles: Vec<f64> = rows
            .iter()
            .zip([[1u8, 0, 0], [0u8, 1, 0]].iter())
            .map(|(z, l)| eval_mlc(z.clone(), l, cp.clone(), &cfg))
            .collect();
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let cpv = tape.leaf(Tensor::from_rows(&cp).unwrap());
        let batch = mlc_loss_batch(&mut tape, zv, &labels, cpv, &cfg, 0).unwrap();
        let want = (singles[0] + singles[1]) / 2.0;
        assert!((tape.value(batch).item() - want).abs() < 1e-12);
    }

    #[test]
    fn mlc_grad_check_wrt_embedding_and_prototypes() {
        let mut rng = rng::stream(42, "losses/gradcheck", 0);
        for trial in 0..20 {
            let d = 5;
            let k = 4;
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cp: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels = [1, 0, 1, 0];
            let zt = Tensor::vector(z).with_grad();
            let cpt = Tensor::new(vec![k, d], cp).unwrap().with_grad();
            let cfg = cfg_tau(0.3);
            let report = grad_check_multi(&[zt, cpt], 1e-5, |inputs| {
                let mut tape = Tape::<f64>::new();
                let zv = tape.leaf(inputs[0].clone());
                let cpv = tape.leaf(inputs[1].clone());
                let loss = mlc_loss(&mut tape, zv, &labels, cpv, &cfg, 0)?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                Ok((value, vec![grads.wrt(zv).cloned(), grads.wrt(cpv).cloned()]))
            })
            .unwrap();
            assert!(
                report.max_rel_err < 1e-5,
                "trial {}: rel err {}",
                trial,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn supcon_two_same_class_samples_is_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.3, 0.9], vec![-1.2, 0.4]]).unwrap());
        let loss = supcon_loss(&mut tape, z, &[7, 7], 1.0).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn supcon_anchor_term_hand_value() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ];
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let terms = supcon_anchor_terms(&mut tape, z, &[0, 0, 1], 1.0).unwrap();
        assert_eq!(terms.len(), 2);
        assert_eq!(terms[0].0, 0);
        let anchor0 = tape.value(terms[0].1).item();
        let want = (1.0 + std::f64::consts::E).ln();
        assert!((anchor0 - want).abs() < 1e-9, "got {}", anchor0);
        let anchor1 = tape.value(terms[1].1).item();
        assert!((anchor1 - 2.0f64.ln()).abs() < 1e-9);
        let loss = supcon_loss(&mut tape, z, &[0, 0, 1], 1.0).unwrap();
        assert!((tape.value(loss).item() - (want + 2.0f64.ln()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn supcon_invariant_under_per_vector_rescaling_and_permutation() {
        let rows = vec![
            vec![0.3, -0.8, 0.5],
            vec![1.1, 0.2, -0.4],
            vec![-0.6, 0.9, 0.3],
            vec![0.2, 0.7, 1.0],
        ];
        let classes = [0usize, 1, 0, 1];
        let eval = |rows: &[Vec<f64>], classes: &[usize]| {
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(Tensor::from_rows(rows).unwrap());
            let loss = supcon_loss(&mut tape, z, classes, 0.4).unwrap();
            tape.value(loss).item()
        };
        let base = eval(&rows, &classes);

        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| v * (1.0 + i as f64)).collect())
            .collect();
        assert!((eval(&scaled, &classes) - base).abs() < 1e-12);

        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let permuted_classes: Vec<usize> = perm.iter().map(|&i| classes[i]).collect();
        assert!((eval(&permuted, &permuted_classes) - base).abs() < 1e-12);
    }

    #[test]
    fn supcon_rejects_tiny_batches() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(supcon_loss(&mut tape, z, &[0], 1.0).is_err());
    }

    #[test]
    fn supcon_grad_check() {
        let mut rng = rng::stream(43, "losses/gradcheck", 1);
        for _ in 0..10 {
            let n = 5;
            let d = 3;
            let z: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let classes = [0usize, 1, 0, 2, 1];
            let zt = Tensor::new(vec![n, d], z).unwrap().with_grad();
            let report = grad_check_multi(&[zt], 1e-5, |inputs| {
                let mut tape = Tape::<f64>::new();
                let zv = tape.leaf(inputs[0].clone());
                let loss = supcon_loss(&mut tape, zv, &classes, 0.5)?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                Ok((value, vec![grads.wrt(zv).cloned()]))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
        }
    }

    fn eval_bce(logits: Vec<f64>, labels: &[u8]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::vector(logits));
        let loss = bce_loss(&mut tape, l, labels).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn bce_hand_values() {
        assert!((eval_bce(vec![0.0], &[1]) - 2.0f64.ln()).abs() < 1e-12);
        assert!(eval_bce(vec![50.0], &[1]) < 1e-20);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((eval_bce(vec![1.0, -1.0], &[1, 0]) - want).abs() < 1e-9);
        assert!((want - 0.313262).abs() < 1e-6);
    }

    fn eval_focal(probs: Vec<f64>, labels: &[u8], cfg: &FocalConfig) -> f64 {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::vector(probs));
        let loss = focal_loss(&mut tape, p, labels, cfg).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn focal_hand_values() {
        let cfg = FocalConfig { gamma: 2.0, alpha: 0.2 };
        let got = eval_focal(vec![0.5], &[1], &cfg);
        let want = 0.2 * 0.25 * 2.0f64.ln();
        assert!((got - want).abs() < 1e-9, "got {}", got);
        assert!((want - 0.0346574).abs() < 1e-7);
        assert!(eval_focal(vec![1.0], &[1], &cfg) < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_alpha_one_is_cross_entropy_on_positives() {
        let cfg = FocalConfig { gamma: 0.0, alpha: 1.0 };
        let probs = vec![0.2, 0.7, 0.95];
        let got = eval_focal(probs.clone(), &[1, 1, 1], &cfg);
        let want: f64 = probs.iter().map(|p| -p.ln()).sum::<f64>() / 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_alpha_half_is_half_bce_on_probs() {
        let probs = vec![0.1, 0.62, 0.9, 0.33];
        let labels = [1u8, 0, 1, 0];
        let cfg = FocalConfig { gamma: 0.0, alpha: 0.5 };
        let got = eval_focal(probs.clone(), &labels, &cfg);
        let bce: f64 = probs
            .iter()
            .zip(labels.iter())
            .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / probs.len() as f64;
        assert!((got - 0.5 * bce).abs() < 1e-10);
    }

    fn eval_asym(probs: Vec<f64>, labels: &[u8], cfg: &AsymConfig) -> f64 {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::vector(probs));
        let loss = asym_loss(&mut tape, p, labels, cfg).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn asym_hand_values() {
        let clipped = AsymConfig { gamma_pos: 0.0, gamma_neg: 2.0, margin: 0.1 };
        assert!(eval_asym(vec![0.05], &[0], &clipped).abs() < 1e-15);

        let pos = AsymConfig { gamma_pos: 1.0, gamma_neg: 4.0, margin: 0.05 };
        let got = eval_asym(vec![0.9], &[1], &pos);
        let want = -0.1 * 0.9f64.ln();
        assert!((got - want).abs() < 1e-9, "got {}", got);
        assert!((want - 0.0105361).abs() < 1e-7);

        let neg = AsymConfig { gamma_pos: 0.0, gamma_neg: 2.0, margin: 0.1 };
        let got = eval_asym(vec![0.6], &[0], &neg);
        let want = -0.25 * 0.5f64.ln();
        assert!((got - want).abs() < 1e-9, "got {}", got);
        assert!((want - 0.1732868).abs() < 1e-7);
    }

    #[test]
    fn asym_zero_margin_equal_gammas_is_symmetric_focal_times_two() {
        let probs = vec![0.15, 0.4, 0.83, 0.66];
        let labels = [1u8, 0, 0, 1];
        let asym_cfg = AsymConfig { gamma_pos: 1.5, gamma_neg: 1.5, margin: 0.0 };
        let focal_cfg = FocalConfig { gamma: 1.5, alpha: 0.5 };
        let a = eval_asym(probs.clone(), &labels, &asym_cfg);
        let f = eval_focal(probs, &labels, &focal_cfg);
        assert!((a - 2.0 * f).abs() < 1e-12);
    }

    #[test]
    fn classifier_losses_grad_check() {
        let mut rng = rng::stream(44, "losses/gradcheck", 2);
        let focal_cfg = FocalConfig::default();
        let asym_cfg = AsymConfig { gamma_pos: 1.0, gamma_neg: 2.0, margin: 0.1 };
        for _ in 0..10 {
            let k = 6;
            let labels: Vec<u8> = (0..k).map(|_| rng.gen_range(0..2u8)).collect();

            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lt = Tensor::vector(logits).with_grad();
            let report = grad_check_multi(&[lt], 1e-5, |inputs| {
                let mut tape = Tape::<f64>::new();
                let l = tape.leaf(inputs[0].clone());
                let loss = bce_loss(&mut tape, l, &labels)?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                Ok((value, vec![grads.wrt(l).cloned()]))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "bce rel err {}", report.max_rel_err);

            // Keep probabilities away from the clamp bounds and the
            // margin kink so the finite differences stay one-sided.
            let probs: Vec<f64> = (0..k)
                .map(|_| {
                    let p: f64 = rng.gen_range(0.15..0.85);
                    if (p - 0.1).abs() < 0.02 {
                        p + 0.05
                    } else {
                        p
                    }
                })
                .collect();
            let pt = Tensor::vector(probs).with_grad();
            let report = grad_check_multi(&[pt.clone()], 1e-5, |inputs| {
                let mut tape = Tape::<f64>::new();
                let p = tape.leaf(inputs[0].clone());
                let loss = focal_loss(&mut tape, p, &labels, &focal_cfg)?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                Ok((value, vec![grads.wrt(p).cloned()]))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "focal rel err {}", report.max_rel_err);

            let report = grad_check_multi(&[pt], 1e-5, |inputs| {
                let mut tape = Tape::<f64>::new();
                let p = tape.leaf(inputs[0].clone());
                let loss = asym_loss(&mut tape, p, &labels, &asym_cfg)?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                Ok((value, vec![grads.wrt(p).cloned()]))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "asym rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(cfg_tau(0.0).validate().is_err());
        assert!(cfg_tau(-1.0).validate().is_err());
        let cap0 = MlcLossConfig { neg_sample_cap: Some(0), ..MlcLossConfig::default() };
        assert!(cap0.validate().is_err());
        assert!(FocalConfig { gamma: -0.1, alpha: 0.2 }.validate().is_err());
        assert!(FocalConfig { gamma: 1.0, alpha: 0.0 }.validate().is_err());
        assert!(FocalConfig { gamma: 1.0, alpha: 1.2 }.validate().is_err());
        assert!(AsymConfig { gamma_pos: -1.0, ..AsymConfig::default() }.validate().is_err());
        assert!(AsymConfig { margin: 1.0, ..AsymConfig::default() }.validate().is_err());
    }

    #[test]
    fn configs_deserialize_with_defaults() {
        let cfg: MlcLossConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.tau, DEFAULT_TAU);
        assert_eq!(cfg.denominator, DenominatorMode::NegativesOnly);
        let cfg: MlcLossConfig =
            serde_json::from_str(r#"{"tau": 0.2, "denominator": "all_classes"}"#).unwrap();
        assert_eq!(cfg.denominator, DenominatorMode::AllClasses);
        let focal: FocalConfig = serde_json::from_str("{}").unwrap();
        assert_eq!((focal.gamma, focal.alpha), (2.0, 0.2));
        let asym: AsymConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(asym.margin, 0.05);
        assert!(serde_json::from_str::<MlcLossConfig>(r#"{"tua": 0.1}"#).is_err());
    }
}
