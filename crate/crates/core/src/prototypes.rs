//! Class prototype initialization, least-squares estimation, and EMA
//! refinement.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::labels::LabelMatrix;
use crate::data::taxonomy::ClassTaxonomy;
use crate::diff::{solve_spd, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_EMA_BETA: f64 = 0.999;
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    #[default]
    Orthogonal,
}

/// K x d prototype matrix (row k = cp_k) plus its refinement settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<F: Scalar> {
    pub matrix: Tensor<F>,
    pub init_mode: InitMode,
    pub beta: F,
    pub ridge: F,
}

impl<F: Scalar> PrototypeSet<F> {
    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Draw `k` orthonormal rows of length `d` (modified Gram-Schmidt with
/// re-orthogonalization on seeded Gaussian draws).
pub fn orthonormal_rows<F: Scalar, R: Rng>(k: usize, d: usize, rng: &mut R) -> Result<Tensor<F>> {
    if d < k {
        return Err(Error::shape(
            "orthonormal_rows",
            format!("cannot fit {} orthonormal rows in dimension {}", k, d),
        ));
    }
    let mut rows: Vec<Vec<F>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<F> = (0..d).map(|_| F::cast(rng.sample::<f64, _>(StandardNormal))).collect();
        for _ in 0..2 {
            for prev in &rows {
                let dot = v.iter().zip(prev).fold(F::ZERO, |a, (&x, &y)| a + x * y);
                for (vi, &pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
        }
        let norm = v.iter().fold(F::ZERO, |a, &x| a + x * x).sqrt();
        if norm.as_f64() < 1e-8 {
            continue; // degenerate draw, take a fresh vector
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    Tensor::from_rows(&rows)
}

pub fn init_prototypes<F: Scalar>(
    k: usize,
    d: usize,
    mode: InitMode,
    seed: u64,
) -> Result<PrototypeSet<F>> {
    if k == 0 || d == 0 {
        return Err(Error::shape("init_prototypes", format!("K={}, d={}", k, d)));
    }
    let mut stream = rng::stream(seed, "prototype_init", 0);
    let matrix = match mode {
        InitMode::Orthogonal => {
            if d < k {
                return Err(Error::shape(
                    "init_prototypes",
                    format!("orthogonal init needs d >= K, got d={} K={}", d, k),
                ));
            }
            orthonormal_rows(k, d, &mut stream)?
        }
        InitMode::Random => {
            let mut rows = Vec::with_capacity(k);
            for _ in 0..k {
                loop {
                    let v: Vec<F> = (0..d)
                        .map(|_| F::cast(stream.sample::<f64, _>(StandardNormal)))
                        .collect();
                    let norm = v.iter().fold(F::ZERO, |a, &x| a + x * x).sqrt();
                    if norm.as_f64() >= 1e-8 {
                        rows.push(v.iter().map(|&x| x / norm).collect::<Vec<F>>());
                        break;
                    }
                }
            }
            Tensor::from_rows(&rows)?
        }
    };
    Ok(PrototypeSet {
        matrix,
        init_mode: mode,
        beta: F::cast(DEFAULT_EMA_BETA),
        ridge: F::cast(DEFAULT_RIDGE),
    })
}

/// Least-squares prototype estimate: solve (L'L + ridge I) CP* = L'Z.
pub fn estimate_prototypes<F: Scalar>(
    z: &Tensor<F>,
    labels: &LabelMatrix,
    ridge: F,
) -> Result<Tensor<F>> {
    if z.rank() != 2 || z.nrows() != labels.num_samples() {
        return Err(Error::shape(
            "estimate_prototypes",
            format!(
                "Z {:?} vs {} label rows",
                z.shape(),
                labels.num_samples()
            ),
        ));
    }
    if ridge < F::ZERO {
        return Err(Error::contract("estimate_prototypes", "ridge must be >= 0"));
    }
    let n = labels.num_samples();
    let k = labels.num_classes();
    let d = z.ncols();
    let zv = z.values();

    // L'L and L'Z accumulated straight from the positive index sets; the
    // label matrix is 0/1 so this is exact integer-weighted summation.
    let mut ltl = vec![F::ZERO; k * k];
    let mut ltz = vec![F::ZERO; k * d];
    for i in 0..n {
        let pos = labels.positives(i);
        for &a in &pos {
            for &b in &pos {
                ltl[a * k + b] += F::ONE;
            }
            let row = &zv[i * d..(i + 1) * d];
            for (o, &x) in ltz[a * d..(a + 1) * d].iter_mut().zip(row) {
                *o += x;
            }
        }
    }
    for j in 0..k {
        ltl[j * k + j] += ridge;
    }

    let a = Tensor::new(vec![k, k], ltl)?;
    let b = Tensor::new(vec![k, d], ltz)?;
    solve_spd(&a, &b).map_err(|e| match e {
        Error::Degenerate { .. } => Error::numerical(
            "estimate_prototypes",
            "L'L is singular; some class has no positives in the fit window. Set ridge > 0.",
        ),
        other => other,
    })
}

/// Eq.-style EMA refinement: CP_{t+1} = beta * CP_t + (1 - beta) * CP*.
pub fn ema_update<F: Scalar>(
    cp: &PrototypeSet<F>,
    cp_star: &Tensor<F>,
    beta: F,
) -> Result<PrototypeSet<F>> {
    if cp.matrix.shape() != cp_star.shape() {
        return Err(Error::shape(
            "ema_update",
            format!("{:?} vs {:?}", cp.matrix.shape(), cp_star.shape()),
        ));
    }
    if beta < F::ZERO || beta >= F::ONE {
        return Err(Error::contract("ema_update", "beta must lie in [0, 1)"));
    }
    let values: Vec<F> = cp
        .matrix
        .values()
        .iter()
        .zip(cp_star.values())
        .map(|(&old, &new)| beta * old + (F::ONE - beta) * new)
        .collect();
    Ok(PrototypeSet {
        matrix: Tensor::new(cp.matrix.shape().to_vec(), values)?,
        ..cp.clone()
    })
}

/// Frobenius norm of Z - L CP*, the implicit least-squares residual.
pub fn residual_norm<F: Scalar>(
    z: &Tensor<F>,
    labels: &LabelMatrix,
    cp: &Tensor<F>,
) -> F {
    let d = z.ncols();
    let mut acc = F::ZERO;
    for i in 0..labels.num_samples() {
        let zrow = z.row(i);
        let pos = labels.positives(i);
        for c in 0..d {
            let mut pred = F::ZERO;
            for &p in &pos {
                pred += cp.get2(p, c);
            }
            let r = zrow[c] - pred;
            acc += r * r;
        }
    }
    acc.sqrt()
}

/// Superclass prototypes: unit-normalized means of child rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyPrototypes<F: Scalar> {
    pub matrix: Tensor<F>,
}

pub fn superclass_prototypes<F: Scalar>(
    cp: &PrototypeSet<F>,
    taxonomy: &ClassTaxonomy,
) -> Result<HierarchyPrototypes<F>> {
    if !taxonomy.has_hierarchy() {
        return Err(Error::Taxonomy("taxonomy has no superclass map".into()));
    }
    if taxonomy.num_classes() != cp.num_classes() {
        return Err(Error::shape(
            "superclass_prototypes",
            format!("{} prototypes for {} classes", cp.num_classes(), taxonomy.num_classes()),
        ));
    }
    let d = cp.dim();
    let mut rows = Vec::with_capacity(taxonomy.num_superclasses());
    for s in 0..taxonomy.num_superclasses() {
        let children = taxonomy.children(s);
        if children.is_empty() {
            return Err(Error::Taxonomy(format!("superclass {} has no children", s)));
        }
        let scale = F::from_count(children.len()).recip();
        let mut mean = vec![F::ZERO; d];
        for &c in &children {
            for (m, &v) in mean.iter_mut().zip(cp.matrix.row(c)) {
                *m += v * scale;
            }
        }
        let norm = mean.iter().fold(F::ZERO, |a, &x| a + x * x).sqrt();
        if norm == F::ZERO {
            return Err(Error::degenerate(
                "superclass_prototypes",
                format!("children of superclass {} average to the zero vector", s),
            ));
        }
        for m in &mut mean {
            *m /= norm;
        }
        rows.push(mean);
    }
    Ok(HierarchyPrototypes { matrix: Tensor::from_rows(&rows)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_any_mode_is_unit_row() {
        for mode in [InitMode::Random, InitMode::Orthogonal] {
            let cp = init_prototypes::<f64>(1, 5, mode, 3).unwrap();
            let norm = cp.matrix.frobenius_norm();
            assert!((norm - 1.0).abs() < 1e-12, "{:?}: norm {}", mode, norm);
        }
    }

    #[test]
    fn orthogonal_gram_is_identity() {
        let cp = init_prototypes::<f64>(3, 8, InitMode::Orthogonal, 11).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = cp
                    .matrix
                    .row(a)
                    .iter()
                    .zip(cp.matrix.row(b))
                    .map(|(&x, &y)| x * y)
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "gram[{}][{}] = {}", a, b, dot);
            }
        }
    }

    #[test]
    fn orthogonal_needs_enough_dimensions() {
        assert!(init_prototypes::<f64>(4, 3, InitMode::Orthogonal, 0).is_err());
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = init_prototypes::<f64>(4, 6, InitMode::Random, 42).unwrap();
        let b = init_prototypes::<f64>(4, 6, InitMode::Random, 42).unwrap();
        let c = init_prototypes::<f64>(4, 6, InitMode::Random, 43).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn identity_labels_return_embeddings() {
        let z = Tensor::<f64>::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let l = LabelMatrix::from_rows(&[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]], 3).unwrap();
        let cp = estimate_prototypes(&z, &l, 0.0).unwrap();
        for (a, b) in cp.values().iter().zip(z.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_single_labels_are_class_means() {
        let z = Tensor::<f64>::new(vec![3, 2], vec![2.0, 0.0, 0.0, 2.0, 4.0, 4.0]).unwrap();
        let l = LabelMatrix::from_rows(&[vec![1, 0], vec![1, 0], vec![0, 1]], 2).unwrap();
        let cp = estimate_prototypes(&z, &l, 0.0).unwrap();
        let want = [1.0, 1.0, 4.0, 4.0];
        for (a, b) in cp.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "got {:?}", cp.values());
        }
    }

    #[test]
    fn overlapping_labels_solve_normal_equations() {
        // L'L = [[2,1],[1,2]]; hand solve gives back the embedding basis
        let z = Tensor::<f64>::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let l = LabelMatrix::from_rows(&[vec![1, 0], vec![0, 1], vec![1, 1]], 2).unwrap();
        let cp = estimate_prototypes(&z, &l, 0.0).unwrap();
        let want = [1.0, 0.0, 0.0, 1.0];
        for (a, b) in cp.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "got {:?}", cp.values());
        }
    }

    #[test]
    fn empty_class_without_ridge_is_numerical_error() {
        let z = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = LabelMatrix::from_rows(&[vec![1, 0], vec![1, 0]], 2).unwrap();
        let err = estimate_prototypes(&z, &l, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
        assert!(err.to_string().contains("ridge"));
        assert!(estimate_prototypes(&z, &l, 1e-6).is_ok());
    }

    #[test]
    fn ema_hand_example() {
        let cp = PrototypeSet {
            matrix: Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            init_mode: InitMode::Random,
            beta: 0.9,
            ridge: 0.0,
        };
        let star = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let out = ema_update(&cp, &star, 0.9).unwrap();
        assert!((out.matrix.values()[0] - 0.9).abs() < 1e-15);
        assert!((out.matrix.values()[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ema_fixed_point_and_beta_zero() {
        let cp = PrototypeSet {
            matrix: Tensor::<f64>::new(vec![2, 2], vec![0.3, -0.4, 0.1, 0.9]).unwrap(),
            init_mode: InitMode::Random,
            beta: 0.5,
            ridge: 0.0,
        };
        let same = ema_update(&cp, &cp.matrix, 0.5).unwrap();
        assert_eq!(same.matrix, cp.matrix);
        let star = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let jumped = ema_update(&cp, &star, 0.0).unwrap();
        assert_eq!(jumped.matrix, star);
    }

    #[test]
    fn superclass_of_orthogonal_children() {
        let cp = PrototypeSet {
            matrix: Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            init_mode: InitMode::Orthogonal,
            beta: 0.999,
            ridge: 1e-6,
        };
        let tax = ClassTaxonomy::with_hierarchy(
            vec!["a".into(), "b".into()],
            vec![0, 0],
            1,
        )
        .unwrap();
        let h = superclass_prototypes(&cp, &tax).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((h.matrix.values()[0] - s).abs() < 1e-12);
        assert!((h.matrix.values()[1] - s).abs() < 1e-12);
    }

    #[test]
    fn identical_children_give_back_the_child() {
        let cp = PrototypeSet {
            matrix: Tensor::<f64>::new(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap(),
            init_mode: InitMode::Random,
            beta: 0.999,
            ridge: 1e-6,
        };
        let tax = ClassTaxonomy::with_hierarchy(
            vec!["a".into(), "b".into()],
            vec![0, 0],
            1,
        )
        .unwrap();
        let h = superclass_prototypes(&cp, &tax).unwrap();
        assert!((h.matrix.values()[0] - 0.6).abs() < 1e-12);
        assert!((h.matrix.values()[1] - 0.8).abs() < 1e-12);
    }
}
