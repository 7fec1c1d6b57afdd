//! Relationship and object losses.
//!
//! Scalar functions evaluate one score at a time and serve as the reference
//! definitions; the `*_graph` functions build the same quantities on a
//! [`Graph`] for training. All losses use the negative-log convention so they
//! are non-negative, and scores are clamped to `[PROB_EPS, 1 - PROB_EPS]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Focal,
    Mlm,
    Ar,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            LossKind::Bce => "bce",
            LossKind::Focal => "focal",
            LossKind::Mlm => "mlm",
            LossKind::Ar => "ar",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focusing parameter of the plain focal loss.
    pub gamma: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub beta: f64,
    /// Apply the effective-number weight to positives; `false` fixes it to 1.
    pub use_class_balance: bool,
    /// Rescale the class weights to average 1 over classes.
    pub normalize_class_weights: bool,
    pub margin: f64,
    /// Positive annotations per predicate class in the training split.
    /// Filled in by the trainer when empty.
    pub class_counts: Vec<u64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ar,
            gamma: 2.0,
            gamma_pos: 1.0,
            gamma_neg: 4.0,
            beta: 0.9999,
            use_class_balance: true,
            normalize_class_weights: true,
            margin: 1.0,
            class_counts: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::contract("focusing parameters must be non-negative"));
        }
        if self.kind == LossKind::Ar && self.gamma_neg < self.gamma_pos {
            return Err(Error::contract(format!(
                "asymmetric loss requires gamma_neg >= gamma_pos (got {} < {})",
                self.gamma_neg, self.gamma_pos
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::contract(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.margin <= 0.0 {
            return Err(Error::contract("margin must be positive"));
        }
        Ok(())
    }

    /// Per-class positive weights (all ones unless class balancing is on).
    pub fn class_weights<T: Scalar>(&self, num_classes: usize) -> Result<Vec<T>> {
        if !self.use_class_balance || self.kind != LossKind::Ar {
            return Ok(vec![T::one(); num_classes]);
        }
        if self.class_counts.len() != num_classes {
            return Err(Error::contract(format!(
                "class_counts has {} entries for {num_classes} predicate classes",
                self.class_counts.len()
            )));
        }
        let raw: Vec<T> = self
            .class_counts
            .iter()
            .map(|&n| effective_number_weight(n.max(1), T::lit(self.beta)))
            .collect::<Result<_>>()?;
        if !self.normalize_class_weights {
            return Ok(raw);
        }
        let mean = raw.iter().copied().sum::<T>() / T::from_usize(num_classes).unwrap();
        Ok(raw.into_iter().map(|w| w / mean).collect())
    }
}

pub fn clamp_prob<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROB_EPS)).min(T::one() - T::lit(PROB_EPS))
}

/// Focal loss of one score against a binary label.
pub fn focal_loss<T: Scalar>(p: T, positive: bool, gamma: T) -> Result<T> {
    if gamma < T::zero() {
        return Err(Error::contract("focal gamma must be non-negative"));
    }
    let p = clamp_prob(p);
    Ok(if positive {
        (T::one() - p).powf(gamma) * -p.ln()
    } else {
        p.powf(gamma) * -(T::one() - p).ln()
    })
}

/// `(1 - beta) / (1 - beta^n)`, the inverse effective number of samples.
pub fn effective_number_weight<T: Scalar>(n: u64, beta: T) -> Result<T> {
    if !(beta >= T::zero() && beta < T::one()) {
        return Err(Error::contract(format!("beta must lie in [0, 1), got {beta}")));
    }
    if n == 0 {
        return Err(Error::contract("effective number needs a positive count"));
    }
    if n == 1 || beta == T::zero() {
        return Ok(T::one());
    }
    // 1 - beta^n = -expm1(n ln beta), evaluated without cancellation near beta = 1.
    let log_beta = (beta - T::one()).ln_1p();
    let denom = -(T::from_u64(n).unwrap() * log_beta).exp_m1();
    Ok((T::one() - beta) / denom)
}

/// Binary cross-entropy term for one class.
pub fn bce_term<T: Scalar>(p: T, positive: bool) -> T {
    let p = clamp_prob(p);
    if positive {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Summed binary cross-entropy over classes.
pub fn bce_loss<T: Scalar>(p: &[T], y: &[bool]) -> Result<T> {
    if p.len() != y.len() {
        return Err(Error::shape("bce_loss", &[p.len()], &[y.len()]));
    }
    Ok(p.iter().zip(y).map(|(&p, &y)| bce_term(p, y)).sum())
}

/// Asymmetric reweighting loss summed over classes.
pub fn ar_loss<T: Scalar>(p: &[T], y: &[bool], config: &LossConfig) -> Result<T> {
    if p.len() != y.len() {
        return Err(Error::shape("ar_loss", &[p.len()], &[y.len()]));
    }
    if config.gamma_neg < config.gamma_pos {
        return Err(Error::contract(format!(
            "asymmetric loss requires gamma_neg >= gamma_pos (got {} < {})",
            config.gamma_neg, config.gamma_pos
        )));
    }
    let weights = LossConfig {
        kind: LossKind::Ar,
        ..config.clone()
    }
    .class_weights::<T>(p.len())?;
    let (gp, gn) = (T::lit(config.gamma_pos), T::lit(config.gamma_neg));
    Ok(p.iter()
        .zip(y)
        .zip(&weights)
        .map(|((&p, &y), &w)| {
            let p = clamp_prob(p);
            if y {
                w * pow_or_one(T::one() - p, gp) * -p.ln()
            } else {
                pow_or_one(p, gn) * -(T::one() - p).ln()
            }
        })
        .sum())
}

fn pow_or_one<T: Scalar>(x: T, e: T) -> T {
    if e == T::zero() {
        T::one()
    } else {
        x.powf(e)
    }
}

/// Multi-label margin loss: mean hinge `max(0, margin - s_pos + s_neg)` over
/// all (positive, negative) class pairs. Zero when either set is empty.
pub fn mlm_loss<T: Scalar>(scores: &[T], positives: &[usize], negatives: &[usize], margin: T) -> Result<T> {
    if positives.is_empty() || negatives.is_empty() {
        return Ok(T::zero());
    }
    if let Some(&bad) = positives.iter().chain(negatives).find(|&&i| i >= scores.len()) {
        return Err(Error::shape("mlm_loss", &[scores.len()], &[bad]));
    }
    let mut total = T::zero();
    for &a in positives {
        for &b in negatives {
            total += (margin - scores[a] + scores[b]).max(T::zero());
        }
    }
    Ok(total / T::from_usize(positives.len() * negatives.len()).unwrap())
}

/// Weighted asymmetric focal loss on a `pairs x classes` score matrix,
/// averaged over rows. `weights` is a `1 x classes` row of positive weights.
pub fn ar_graph<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    targets: &Tensor<T>,
    weights: &Tensor<T>,
    gamma_pos: T,
    gamma_neg: T,
) -> Result<Var> {
    if g.shape(scores) != targets.shape() {
        return Err(Error::shape("ar_graph", g.shape(scores), targets.shape()));
    }
    let rows = targets.rows();
    let y = g.constant(targets.clone());
    let not_y = g.constant(targets.map(|v| T::one() - v));
    let w = g.constant(weights.clone());

    let one_minus = g.rsub_scalar(T::one(), scores);
    let log_p = g.log(scores);
    let log_q = g.log(one_minus);

    let focus_pos = g.pow(one_minus, gamma_pos);
    let pos = g.mul(focus_pos, log_p)?;
    let pos = g.mul(pos, w)?;
    let pos = g.mul(pos, y)?;

    let focus_neg = g.pow(scores, gamma_neg);
    let neg = g.mul(focus_neg, log_q)?;
    let neg = g.mul(neg, not_y)?;

    let both = g.add(pos, neg)?;
    let total = g.sum(both);
    Ok(g.scalar_mul(total, -T::one() / T::from_usize(rows).unwrap()))
}

/// Binary cross-entropy on a score matrix, averaged over rows.
pub fn bce_graph<T: Scalar>(g: &mut Graph<T>, scores: Var, targets: &Tensor<T>) -> Result<Var> {
    let ones = Tensor::ones(1, targets.cols());
    ar_graph(g, scores, targets, &ones, T::zero(), T::zero())
}

/// Multi-label margin loss on a score matrix, averaged over rows.
pub fn mlm_graph<T: Scalar>(g: &mut Graph<T>, scores: Var, targets: &Tensor<T>, margin: T) -> Result<Var> {
    if g.shape(scores) != targets.shape() {
        return Err(Error::shape("mlm_graph", g.shape(scores), targets.shape()));
    }
    let (rows, cols) = (targets.rows(), targets.cols());
    let mut per_row = Vec::new();
    for r in 0..rows {
        let pos: Vec<usize> = (0..cols).filter(|&c| targets.get(r, c) > T::zero()).collect();
        let neg: Vec<usize> = (0..cols).filter(|&c| targets.get(r, c) <= T::zero()).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let row = g.gather_rows(scores, &[r])?;
        let col = g.transpose(row)?;
        let sp = g.gather_rows(col, &pos)?;
        let sn = g.gather_rows(col, &neg)?;
        let ones_b = g.constant(Tensor::ones(1, neg.len()));
        let ones_a = g.constant(Tensor::ones(pos.len(), 1));
        let sp_grid = g.matmul(sp, ones_b)?;
        let sn_t = g.transpose(sn)?;
        let sn_grid = g.matmul(ones_a, sn_t)?;
        let diff = g.sub(sn_grid, sp_grid)?;
        let shifted = g.add_scalar(diff, margin);
        let hinge = g.relu(shifted);
        let s = g.sum(hinge);
        per_row.push(g.scalar_mul(s, T::one() / T::from_usize(pos.len() * neg.len()).unwrap()));
    }
    let inv_rows = T::one() / T::from_usize(rows).unwrap();
    if per_row.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let stacked = g.concat(&per_row, 0)?;
    let total = g.sum(stacked);
    Ok(g.scalar_mul(total, inv_rows))
}

/// Relationship loss of the configured kind, averaged over pairs.
pub fn relation_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    targets: &Tensor<T>,
    config: &LossConfig,
) -> Result<Var> {
    let classes = targets.cols();
    match config.kind {
        LossKind::Bce => bce_graph(g, scores, targets),
        LossKind::Focal => {
            let gamma = T::lit(config.gamma);
            ar_graph(g, scores, targets, &Tensor::ones(1, classes), gamma, gamma)
        }
        LossKind::Ar => {
            let w = Tensor::row(config.class_weights::<T>(classes)?);
            ar_graph(g, scores, targets, &w, T::lit(config.gamma_pos), T::lit(config.gamma_neg))
        }
        LossKind::Mlm => mlm_graph(g, scores, targets, T::lit(config.margin)),
    }
}

/// Mean softmax cross-entropy of `logits` (`objects x classes`) against labels.
pub fn object_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = (g.shape(logits)[0], g.shape(logits)[1]);
    if labels.len() != rows {
        return Err(Error::shape("object_cross_entropy", &[rows, cols], &[labels.len()]));
    }
    let mut onehot = Tensor::zeros(rows, cols);
    for (r, &l) in labels.iter().enumerate() {
        if l >= cols {
            return Err(Error::contract(format!("object label {l} out of range for {cols} classes")));
        }
        onehot.set(r, l, T::one());
    }
    let probs = g.softmax(logits, 1)?;
    let logp = g.log(probs);
    let mask = g.constant(onehot);
    let picked = g.mul(logp, mask)?;
    let s = g.sum(picked);
    Ok(g.scalar_mul(s, -T::one() / T::from_usize(rows).unwrap()))
}

/// `L_obj + L_rel`. Either term may be absent; with neither the loss is 0.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    objects: Option<(Var, &[usize])>,
    relations: Option<(Var, &Tensor<T>)>,
    config: &LossConfig,
) -> Result<Var> {
    let obj = match objects {
        Some((logits, labels)) => Some(object_cross_entropy(g, logits, labels)?),
        None => None,
    };
    let rel = match relations {
        Some((scores, targets)) => Some(relation_loss_graph(g, scores, targets, config)?),
        None => None,
    };
    Ok(match (obj, rel) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => g.constant(Tensor::scalar(T::zero())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        let v: f64 = focal_loss(0.5, true, 2.0).unwrap();
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        for &p in &[0.1, 0.5, 0.9] {
            assert_eq!(focal_loss(p, true, 0.0).unwrap(), bce_term(p, true));
            assert_eq!(focal_loss(p, false, 0.0).unwrap(), bce_term(p, false));
        }
        assert!(focal_loss(1.0 - 1e-12, true, 3.0).unwrap() < 1e-20);
        assert!(focal_loss(0.5, true, -1.0).is_err());
    }

    #[test]
    fn effective_number_examples() {
        for n in [1, 2, 10, 1000] {
            assert_eq!(effective_number_weight(n, 0.0).unwrap(), 1.0);
        }
        for beta in [0.0, 0.5, 0.9, 0.9999] {
            assert_eq!(effective_number_weight(1, beta).unwrap(), 1.0);
        }
        let w: f64 = effective_number_weight(2, 0.9).unwrap();
        assert!((w - 0.1 / 0.19).abs() < 1e-14);
        assert!(effective_number_weight(3, 1.0).is_err());
        assert!(effective_number_weight(3, -0.1).is_err());
    }

    #[test]
    fn ar_single_class_is_ln2() {
        let cfg = LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            use_class_balance: false,
            ..LossConfig::default()
        };
        let v: f64 = ar_loss(&[0.5], &[true], &cfg).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ar_rejects_inverted_focus() {
        let cfg = LossConfig {
            gamma_pos: 3.0,
            gamma_neg: 1.0,
            use_class_balance: false,
            ..LossConfig::default()
        };
        assert!(ar_loss(&[0.5f64], &[true], &cfg).is_err());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn confident_negatives_cost_nothing() {
        let cfg = LossConfig {
            use_class_balance: false,
            ..LossConfig::default()
        };
        let v: f64 = ar_loss(&[1e-9; 5], &[false; 5], &cfg).unwrap();
        assert!(v < 1e-30);
    }

    #[test]
    fn bce_and_mlm_examples() {
        let v: f64 = bce_loss(&[1.0, 0.0], &[true, false]).unwrap();
        assert!(v < 1e-6);
        assert_eq!(mlm_loss(&[0.9, 0.1f64], &[0], &[1], 0.5).unwrap(), 0.0);
        let v: f64 = mlm_loss(&[0.2, 0.6], &[0], &[1], 1.0).unwrap();
        assert!((v - 1.4).abs() < 1e-15);
        assert_eq!(mlm_loss::<f64>(&[0.2], &[], &[], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn graph_losses_match_scalar_definitions() {
        let p = vec![0.2, 0.9, 0.4, 0.7, 0.05, 0.6];
        let y = vec![true, false, false, true, false, true];
        let cfg = LossConfig {
            class_counts: vec![10, 200, 3],
            beta: 0.99,
            ..LossConfig::default()
        };
        let scores = Tensor::matrix(2, 3, p.clone()).unwrap();
        let targets = Tensor::matrix(2, 3, y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let row_loss = |r: usize, f: &dyn Fn(&[f64], &[bool]) -> f64| f(&p[r * 3..r * 3 + 3], &y[r * 3..r * 3 + 3]);

        for kind in [LossKind::Bce, LossKind::Focal, LossKind::Ar, LossKind::Mlm] {
            let cfg = LossConfig { kind, ..cfg.clone() };
            let mut g = Graph::new();
            let s = g.constant(scores.clone());
            let l = relation_loss_graph(&mut g, s, &targets, &cfg).unwrap();
            let expected: f64 = (0..2)
                .map(|r| {
                    row_loss(r, &|p, y| match kind {
                        LossKind::Bce => bce_loss(p, y).unwrap(),
                        LossKind::Focal => p.iter().zip(y).map(|(&p, &y)| focal_loss(p, y, cfg.gamma).unwrap()).sum(),
                        LossKind::Ar => ar_loss(p, y, &cfg).unwrap(),
                        LossKind::Mlm => {
                            let pos: Vec<usize> = (0..3).filter(|&c| y[c]).collect();
                            let neg: Vec<usize> = (0..3).filter(|&c| !y[c]).collect();
                            mlm_loss(p, &pos, &neg, cfg.margin).unwrap()
                        }
                    })
                })
                .sum::<f64>()
                / 2.0;
            assert!((g.value(l).item() - expected).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn total_loss_without_pairs_is_object_term() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::matrix(2, 2, vec![5.0, -5.0, -5.0, 5.0]).unwrap());
        let l = total_loss(&mut g, Some((logits, &[0, 1])), None, &LossConfig::default()).unwrap();
        let expected = -(1.0 / (1.0 + (-10.0f64).exp())).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let l = total_loss(&mut g, None, None, &LossConfig::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
