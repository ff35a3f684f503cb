//! The four training losses of the composite objective, the proxy
//! A-distance diagnostic, and the MMD/KL distance alternates.

use crate::augment::{AugmentationKind, N_AUG_CLASSES};
use crate::error::{Error, Result};
use crate::model::N_DOMAIN_CLASSES;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Trade-off weights of the composite objective plus the contrastive
/// temperature.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Diversity generation (self-supervision) weight.
    pub lambda: f64,
    /// Diversity preservation (domain divergence) weight.
    pub beta: f64,
    /// Discrimination enhancement (contrastive) weight.
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Calibrated on the synthetic benchmark; gamma scales a
        // sum-over-anchors contrastive term, so it stays small.
        Self { lambda: 0.01, beta: 0.1, gamma: 0.002, tau: 0.5 }
    }
}

impl LossWeights {
    /// All auxiliary terms off; the objective degenerates to plain
    /// classification.
    pub fn erm() -> Self {
        Self { lambda: 0.0, beta: 0.0, gamma: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Which divergence realizes the diversity-preservation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Discriminator,
    Mmd,
    Kl,
}

/// Gaussian-kernel bandwidth selection for MMD.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sample, computed once per
    /// batch and treated as a constant.
    Median,
    Fixed(f64),
}

/// How per-anchor contrastive terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorAggregation {
    /// Sum over anchors (canonical form).
    Sum,
    /// Mean over valid anchors, for scale studies.
    Mean,
}

/// Mean over the batch of `−ln p[label]`; see [`Tape::cross_entropy`].
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(probs, labels)
}

/// Softmax then cross-entropy over logits.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let probs = tape.softmax(logits)?;
    tape.cross_entropy(probs, labels)
}

/// Self-supervision loss: 8-way softmax cross-entropy over
/// augmentation-type logits for the mixed original+augmented batch.
pub fn selfsup_loss(tape: &mut Tape, aug_logits: Var, aug_kinds: &[AugmentationKind]) -> Result<Var> {
    let shape = tape.value(aug_logits).shape();
    if shape.len() != 2 || shape[1] != N_AUG_CLASSES {
        return Err(Error::dim(
            "selfsup_loss",
            format!("expected [b, {N_AUG_CLASSES}] logits, got {shape:?}"),
        ));
    }
    let labels: Vec<usize> = aug_kinds.iter().map(|k| k.code()).collect();
    softmax_cross_entropy(tape, aug_logits, &labels)
}

/// Domain-discriminator loss: binary softmax cross-entropy over
/// original-vs-augmented labels. Minimizing it (jointly through the
/// feature extractor) pushes the two feature distributions apart.
pub fn domain_disc_loss(tape: &mut Tape, domain_logits: Var, domain_labels: &[usize]) -> Result<Var> {
    let shape = tape.value(domain_logits).shape();
    if shape.len() != 2 || shape[1] != N_DOMAIN_CLASSES {
        return Err(Error::dim(
            "domain_disc_loss",
            format!("expected [b, {N_DOMAIN_CLASSES}] logits, got {shape:?}"),
        ));
    }
    if let Some(&bad) = domain_labels.iter().find(|&&l| l >= N_DOMAIN_CLASSES) {
        return Err(Error::Input(format!("domain label {bad} out of range [0, 2)")));
    }
    softmax_cross_entropy(tape, domain_logits, domain_labels)
}

/// Supervised contrastive loss over L2-normalized representations with
/// label-defined positive sets; anchors with no positives are skipped.
pub fn supcon_loss(tape: &mut Tape, features: Var, labels: &[usize], tau: f64) -> Result<Var> {
    supcon_loss_agg(tape, features, labels, tau, AnchorAggregation::Sum)
}

pub fn supcon_loss_agg(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    tau: f64,
    agg: AnchorAggregation,
) -> Result<Var> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("supcon_loss", format!("expected [n, d] features, got {shape:?}")));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Input(format!("supcon_loss needs at least 2 samples, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::dim(
            "supcon_loss",
            format!("batch axis (0): {n} rows vs {} labels", labels.len()),
        ));
    }

    // Positive / contrast masks and per-anchor positive counts, all
    // constants of the batch.
    let mut contrast = Tensor::zeros(vec![n, n]);
    let mut pos_weight = Tensor::zeros(vec![n, n]);
    let mut valid = Tensor::zeros(vec![n]);
    let mut n_valid = 0usize;
    for i in 0..n {
        let pos_count = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        for j in 0..n {
            if j != i {
                contrast.data_mut()[i * n + j] = 1.0;
                if labels[j] == labels[i] {
                    pos_weight.data_mut()[i * n + j] = 1.0 / pos_count as f64;
                }
            }
        }
        if pos_count > 0 {
            valid.data_mut()[i] = 1.0;
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        // Every class appears once; all anchors are skipped.
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }

    let z = tape.l2_normalize_rows(features)?;
    let sims = tape.matmul_nt(z, z)?;
    let scaled = tape.scale(sims, 1.0 / tau);

    // Detached per-anchor max over the contrast set stabilizes the
    // log-sum-exp without changing its gradient.
    let s = tape.value(scaled).data();
    let mut row_max = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        for j in 0..n {
            if j != i {
                row_max[i] = row_max[i].max(s[i * n + j]);
            }
        }
    }
    let shift = Tensor::from_parts(
        vec![n, n],
        (0..n * n).map(|idx| -row_max[idx / n]).collect(),
    );
    let shifted = tape.offset(scaled, &shift)?;
    let expd = tape.exp(shifted);
    let masked = tape.mul_mask(expd, &contrast)?;
    let denom_sum = tape.row_sum(masked)?;
    let log_denom = tape.ln(denom_sum);
    let lse = tape.offset(log_denom, &Tensor::from_parts(vec![n], row_max))?;

    let weighted_pos = tape.mul_mask(scaled, &pos_weight)?;
    let pos_term = tape.row_sum(weighted_pos)?;

    let per_anchor = tape.sub(lse, pos_term)?;
    let kept = tape.mul_mask(per_anchor, &valid)?;
    let total = tape.sum_all(kept);
    Ok(match agg {
        AnchorAggregation::Sum => total,
        AnchorAggregation::Mean => tape.scale(total, 1.0 / n_valid as f64),
    })
}

/// Proxy A-distance `2·(1 − 2ε)` from a binary discriminator error rate.
/// Diagnostic only; not differentiated.
pub fn proxy_a_distance(error_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(Error::Input(format!("error rate must lie in [0, 1], got {error_rate}")));
    }
    Ok(2.0 * (1.0 - 2.0 * error_rate))
}

/// Median squared pairwise distance over the pooled rows of two sets;
/// the squared bandwidth of the median heuristic.
pub fn median_sq_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    let d = x.shape()[1];
    let rows: Vec<&[f64]> = x
        .data()
        .chunks(d)
        .chain(y.data().chunks(d))
        .collect();
    let n = rows.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for (p, q) in rows[i].iter().zip(rows[j]) {
                let diff = p - q;
                s += diff * diff;
            }
            dists.push(s);
        }
    }
    if dists.is_empty() {
        return Err(Error::Input("median bandwidth needs at least 2 pooled rows".into()));
    }
    let mid = dists.len() / 2;
    dists.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let med = dists[mid];
    if med <= 0.0 {
        return Err(Error::Config(
            "median bandwidth is zero (all pooled points identical)".into(),
        ));
    }
    Ok(med)
}

/// Biased V-statistic MMD with a Gaussian kernel
/// `k(x, y) = exp(−‖x−y‖² / (2σ²))`:
/// `mean(K_XX) + mean(K_YY) − 2·mean(K_XY)`.
pub fn mmd(tape: &mut Tape, x: Var, y: Var, bandwidth: Bandwidth) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ys = tape.value(y).shape().to_vec();
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(Error::dim("mmd", format!("expected [n, d] and [m, d], got {xs:?} and {ys:?}")));
    }
    if xs[0] < 2 || ys[0] < 2 {
        return Err(Error::Input(format!(
            "mmd requires at least 2 rows per set, got {} and {}",
            xs[0], ys[0]
        )));
    }
    let sigma_sq = match bandwidth {
        Bandwidth::Fixed(b) => {
            if !b.is_finite() || b <= 0.0 {
                return Err(Error::Config(format!("mmd bandwidth must be > 0, got {b}")));
            }
            b * b
        }
        Bandwidth::Median => median_sq_bandwidth(tape.value(x), tape.value(y))?,
    };
    let factor = -1.0 / (2.0 * sigma_sq);
    let kernel_mean = |a: Var, b: Var, tape: &mut Tape| -> Result<Var> {
        let dist = tape.pairwise_sqdist(a, b)?;
        let scaled = tape.scale(dist, factor);
        let k = tape.exp(scaled);
        Ok(tape.mean_all(k))
    };
    let kxx = kernel_mean(x, x, tape)?;
    let kyy = kernel_mean(y, y, tape)?;
    let kxy = kernel_mean(x, y, tape)?;
    let sum = tape.add(kxx, kyy)?;
    let cross = tape.scale(kxy, -2.0);
    tape.add(sum, cross)
}

/// KL divergence between diagonal-Gaussian fits of two feature sets,
/// differentiable through the moment estimates.
pub fn kl_gaussian(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    tape.kl_gaussian(x, y, 1e-6)
}

/// Combine the four components: `l_cls + λ·l_dg + β·l_dp + γ·l_de`.
///
/// `l_dp` is the realization of the diversity-preservation term: the
/// discriminator loss directly, or the negated distance for MMD/KL.
/// Absent components participate as zero only when their weight is zero.
pub fn total_loss(
    tape: &mut Tape,
    l_cls: Var,
    l_dg: Option<Var>,
    l_dp: Option<Var>,
    l_de: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut total = l_cls;
    for (component, weight, name) in [
        (l_dg, weights.lambda, "l_dg"),
        (l_dp, weights.beta, "l_dp"),
        (l_de, weights.gamma, "l_de"),
    ] {
        match component {
            Some(v) if weight != 0.0 => {
                let scaled = tape.scale(v, weight);
                total = tape.add(total, scaled)?;
            }
            Some(_) | None if weight == 0.0 => {}
            None => {
                return Err(Error::Config(format!(
                    "{name} has weight {weight} but no component was provided"
                )));
            }
            _ => unreachable!(),
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{finite_diff_grad, max_relative_error};
    use crate::rng;
    use rand::Rng;

    fn scalar_of(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        // Correct class with probability 1 → loss 0.
        let p = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let l = cross_entropy(&mut tape, p, &[1]).unwrap();
        assert!(scalar_of(&tape, l).abs() < 1e-12);

        // Uniform over 8 classes → ln 8.
        let u = tape.leaf(Tensor::new(vec![2, 8], vec![0.125; 16]).unwrap());
        let lu = cross_entropy(&mut tape, u, &[3, 7]).unwrap();
        assert!((scalar_of(&tape, lu) - 8.0f64.ln()).abs() < 1e-12);

        // [0.25, 0.75] with label 1 → −ln 0.75.
        let p2 = tape.leaf(Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap());
        let l2 = cross_entropy(&mut tape, p2, &[1]).unwrap();
        assert!((scalar_of(&tape, l2) + 0.75f64.ln()).abs() < 1e-12);

        // Out-of-range label.
        let p3 = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        assert!(matches!(cross_entropy(&mut tape, p3, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn selfsup_loss_closed_forms() {
        // Zero logits → ln 8.
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![4, 8]));
        let kinds = [
            AugmentationKind::Original,
            AugmentationKind::Jitter,
            AugmentationKind::Scale,
            AugmentationKind::TimeWarp,
        ];
        let l = selfsup_loss(&mut tape, z, &kinds).unwrap();
        assert!((scalar_of(&tape, l) - 8.0f64.ln()).abs() < 1e-12);

        // One-hot logits with margin 20: closed form ln(1 + 7·e⁻²⁰).
        let mut logits = Tensor::zeros(vec![2, 8]);
        logits.data_mut()[AugmentationKind::Rotation.code()] = 20.0;
        logits.data_mut()[8 + AugmentationKind::Original.code()] = 20.0;
        let lv = tape.leaf(logits);
        let l2 = selfsup_loss(
            &mut tape,
            lv,
            &[AugmentationKind::Rotation, AugmentationKind::Original],
        )
        .unwrap();
        let expect = (1.0 + 7.0 * (-20.0f64).exp()).ln();
        assert!((scalar_of(&tape, l2) - expect).abs() < 1e-15);
        assert!(scalar_of(&tape, l2) < 2e-8);

        // Width must be 8 for every dataset.
        let narrow = tape.leaf(Tensor::zeros(vec![2, 4]));
        assert!(selfsup_loss(&mut tape, narrow, &kinds[..2]).is_err());
    }

    #[test]
    fn domain_disc_loss_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![4, 2]));
        let l = domain_disc_loss(&mut tape, z, &[0, 1, 0, 1]).unwrap();
        assert!((scalar_of(&tape, l) - 2.0f64.ln()).abs() < 1e-12);

        // Separable with margin 20 → loss below 1e-8.
        let sep = tape.leaf(
            Tensor::new(vec![2, 2], vec![20.0, 0.0, 0.0, 20.0]).unwrap(),
        );
        let ls = domain_disc_loss(&mut tape, sep, &[0, 1]).unwrap();
        assert!(scalar_of(&tape, ls) < 1e-8);

        // Flipping all labels under column-symmetric logits (rows come in
        // swapped pairs) leaves the loss unchanged.
        let logits = Tensor::new(vec![2, 2], vec![1.3, -0.4, -0.4, 1.3]).unwrap();
        let a = tape.leaf(logits.clone());
        let b = tape.leaf(logits);
        let la = domain_disc_loss(&mut tape, a, &[0, 0]).unwrap();
        let lb = domain_disc_loss(&mut tape, b, &[1, 1]).unwrap();
        assert!((scalar_of(&tape, la) - scalar_of(&tape, lb)).abs() < 1e-12);
    }

    /// Direct double-loop evaluation of the contrastive objective,
    /// independent of the tape path.
    pub(crate) fn supcon_oracle(features: &Tensor, labels: &[usize], tau: f64) -> f64 {
        let (n, d) = (features.shape()[0], features.shape()[1]);
        let mut z = vec![0.0; n * d];
        for i in 0..n {
            let row = &features.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for j in 0..d {
                z[i * d + j] = row[j] / norm;
            }
        }
        let sim = |i: usize, j: usize| -> f64 {
            (0..d).map(|t| z[i * d + t] * z[j * d + t]).sum::<f64>() / tau
        };
        let mut total = 0.0;
        for i in 0..n {
            let positives: Vec<usize> =
                (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if positives.is_empty() {
                continue;
            }
            let mut inner = 0.0;
            for &p in &positives {
                let denom: f64 = (0..n).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
                inner += (sim(i, p).exp() / denom).ln();
            }
            total -= inner / positives.len() as f64;
        }
        total
    }

    #[test]
    fn supcon_identical_pair_is_exactly_zero() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = supcon_loss(&mut tape, f, &[5, 5], 0.5).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.0);
    }

    #[test]
    fn supcon_all_singletons_is_zero() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::uniform(vec![4, 6], -1.0, 1.0, &mut rng::stream(2, &[])));
        let l = supcon_loss(&mut tape, f, &[0, 1, 2, 3], 0.5).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.0);
    }

    #[test]
    fn supcon_matches_double_loop_oracle() {
        let f = Tensor::new(
            vec![4, 3],
            vec![0.8, -0.2, 0.1, -0.4, 0.9, 0.3, 0.2, 0.2, -0.7, 0.5, -0.5, 0.5],
        )
        .unwrap();
        let labels = [0, 1, 0, 1];
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let l = supcon_loss(&mut tape, fv, &labels, 0.5).unwrap();
        let expect = supcon_oracle(&f, &labels, 0.5);
        assert!((scalar_of(&tape, l) - expect).abs() < 1e-10);
    }

    #[test]
    fn supcon_invariant_to_positive_rescaling() {
        let mut r = rng::stream(12, &[3]);
        let f = Tensor::uniform(vec![6, 5], -1.0, 1.0, &mut r);
        let scaledf = f.map(|v| v * 37.5);
        let labels = [0, 1, 0, 1, 2, 2];
        let mut tape = Tape::new();
        let a = tape.leaf(f);
        let b = tape.leaf(scaledf);
        let la = supcon_loss(&mut tape, a, &labels, 0.1).unwrap();
        let lb = supcon_loss(&mut tape, b, &labels, 0.1).unwrap();
        assert!((scalar_of(&tape, la) - scalar_of(&tape, lb)).abs() < 1e-9);
    }

    #[test]
    fn supcon_rejects_bad_tau() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(supcon_loss(&mut tape, f, &[0, 0], 0.0), Err(Error::Config(_))));
        assert!(matches!(supcon_loss(&mut tape, f, &[0, 0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let mut master = rng::stream(40, &[7]);
        for _ in 0..5 {
            let n = master.random_range(3..=8usize);
            let d = master.random_range(2..=6usize);
            let f = Tensor::uniform(vec![n, d], -1.0, 1.0, &mut master);
            let labels: Vec<usize> = (0..n).map(|_| master.random_range(0..3usize)).collect();
            let tau = 0.5;

            let mut tape = Tape::new();
            let fv = tape.leaf(f.clone());
            let l = supcon_loss(&mut tape, fv, &labels, tau).unwrap();
            tape.backward(l).unwrap();
            let analytic = vec![tape.grad(fv).unwrap().clone()];
            let numeric = finite_diff_grad(
                |p| {
                    let mut t = Tape::new();
                    let v = t.leaf(p[0].clone());
                    let l = supcon_loss(&mut t, v, &labels, tau)?;
                    Ok(t.value(l).item())
                },
                std::slice::from_ref(&f),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "max rel err {err}");
        }
    }

    #[test]
    fn proxy_a_distance_is_exact() {
        assert_eq!(proxy_a_distance(0.5).unwrap(), 0.0);
        assert_eq!(proxy_a_distance(0.0).unwrap(), 2.0);
        assert_eq!(proxy_a_distance(0.25).unwrap(), 1.0);
        assert_eq!(proxy_a_distance(1.0).unwrap(), -2.0);
        assert!(proxy_a_distance(1.5).is_err());
        assert!(proxy_a_distance(-0.1).is_err());
    }

    #[test]
    fn mmd_identical_sets_is_zero_and_symmetric() {
        let mut r = rng::stream(3, &[1]);
        let x = Tensor::uniform(vec![5, 3], -1.0, 1.0, &mut r);
        let y = Tensor::uniform(vec![7, 3], -1.0, 1.0, &mut r);

        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(x.clone());
        let same = mmd(&mut tape, a, b, Bandwidth::Fixed(1.0)).unwrap();
        assert_eq!(scalar_of(&tape, same), 0.0);

        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let fwd = mmd(&mut tape, xv, yv, Bandwidth::Fixed(1.0)).unwrap();
        let bwd = mmd(&mut tape, yv, xv, Bandwidth::Fixed(1.0)).unwrap();
        assert!((scalar_of(&tape, fwd) - scalar_of(&tape, bwd)).abs() < 1e-12);
    }

    #[test]
    fn mmd_rejects_degenerate_bandwidth() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3, 2]));
        let y = tape.leaf(Tensor::zeros(vec![3, 2]));
        assert!(matches!(mmd(&mut tape, x, y, Bandwidth::Fixed(0.0)), Err(Error::Config(_))));
        // All pooled points identical → median bandwidth degenerates too.
        assert!(matches!(mmd(&mut tape, x, y, Bandwidth::Median), Err(Error::Config(_))));
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut master = rng::stream(41, &[2]);
        let x = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut master);
        let y = Tensor::uniform(vec![5, 3], -1.0, 1.0, &mut master);
        let eval = |p: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let a = t.leaf(p[0].clone());
            let b = t.leaf(p[1].clone());
            let m = mmd(&mut t, a, b, Bandwidth::Fixed(1.3))?;
            Ok(t.value(m).item())
        };
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(y.clone());
        let m = mmd(&mut tape, a, b, Bandwidth::Fixed(1.3)).unwrap();
        tape.backward(m).unwrap();
        let analytic = vec![tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone()];
        let numeric = finite_diff_grad(eval, &[x, y], 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn kl_gaussian_basics() {
        let mut r = rng::stream(8, &[8]);
        let x = Tensor::uniform(vec![20, 2], -1.0, 1.0, &mut r);

        // Identical sample sets → 0.
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(x.clone());
        let same = kl_gaussian(&mut tape, a, b).unwrap();
        assert!(scalar_of(&tape, same).abs() < 1e-9);

        // Asymmetric for unequal variances.
        let wide = x.map(|v| v * 3.0);
        let xv = tape.leaf(x);
        let wv = tape.leaf(wide);
        let fwd = kl_gaussian(&mut tape, xv, wv).unwrap();
        let bwd = kl_gaussian(&mut tape, wv, xv).unwrap();
        assert!((scalar_of(&tape, fwd) - scalar_of(&tape, bwd)).abs() > 1e-3);
    }

    #[test]
    fn kl_gaussian_mean_shift_closed_form() {
        // Large same-variance samples with a pure mean shift δ → KL ≈ δ²/2.
        let mut r = rng::stream(9, &[9]);
        let n = 4000;
        let base = Tensor::normal(vec![n, 1], 0.0, 1.0, &mut r);
        let delta = 0.8;
        let shifted_data: Vec<f64> = base.data().iter().map(|v| v + delta).collect();
        let shifted = Tensor::new(vec![n, 1], shifted_data).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(base);
        let b = tape.leaf(shifted);
        let kl = kl_gaussian(&mut tape, a, b).unwrap();
        let expect = delta * delta / 2.0;
        assert!(
            (scalar_of(&tape, kl) - expect).abs() < 0.05,
            "kl {} vs {expect}",
            scalar_of(&tape, kl)
        );
    }

    #[test]
    fn total_loss_combines_weights() {
        let mut tape = Tape::new();
        let one = tape.leaf(Tensor::scalar(1.0));

        // λ=β=γ=0 → equals l_cls.
        let erm = total_loss(&mut tape, one, None, None, None, &LossWeights::erm()).unwrap();
        assert_eq!(scalar_of(&tape, erm), 1.0);

        // Components (1,1,1,1) with unit weights → 4.
        let w = LossWeights { lambda: 1.0, beta: 1.0, gamma: 1.0, tau: 0.5 };
        let all = total_loss(&mut tape, one, Some(one), Some(one), Some(one), &w).unwrap();
        assert_eq!(scalar_of(&tape, all), 4.0);

        // Nonzero weight without a component is a config error.
        assert!(total_loss(&mut tape, one, None, Some(one), Some(one), &w).is_err());
    }
}
