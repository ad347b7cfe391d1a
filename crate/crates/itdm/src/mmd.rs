//! Biased empirical MMD between two feature batches, the joint and
//! class-conditional matching losses built on it, and their analytic
//! gradients with respect to both feature matrices.
//!
//! The estimator is the V-statistic (self-pair diagonal terms included), so
//! `mmd_sq_biased(S, S) == 0` holds exactly and gradients stay simple.
//! Bandwidths are treated as constants inside an iteration: no gradient
//! flows through the median heuristic.

use crate::error::{Error, Result};
use crate::kernels::{self, KernelBank};
use crate::tensor::{pairwise_sq_dist, Tensor};

/// Epsilon inside the square root of the match loss; removes the derivative
/// singularity at zero discrepancy.
pub const SQRT_EPS: f64 = 1e-12;

/// A feature matrix `[m, d]` paired with its integer labels.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBatch<'a> {
    features: &'a Tensor,
    labels: &'a [usize],
}

impl<'a> FeatureBatch<'a> {
    pub fn new(features: &'a Tensor, labels: &'a [usize]) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "feature batch must be 2-D, got {:?}",
                features.shape()
            )));
        }
        if features.dim(0) != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "feature rows {} vs labels {}",
                features.dim(0),
                labels.len()
            )));
        }
        Ok(FeatureBatch { features, labels })
    }

    pub fn features(&self) -> &Tensor {
        self.features
    }

    pub fn labels(&self) -> &[usize] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.features.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One evaluated matching loss: value, gradients for both feature matrices,
/// and bookkeeping about how it was computed.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// The match loss (MMD if `use_sqrt`, squared MMD otherwise). Never negative.
    pub loss: f64,
    pub grad_h1: Tensor,
    pub grad_h2: Tensor,
    /// Base bandwidth used. In class-conditional mode, the mean of the
    /// per-class base bandwidths; 0.0 when no class matched.
    pub sigma_med: f64,
    /// How many classes contributed (class-conditional mode; 0 otherwise
    /// means joint mode or no shared class).
    pub classes_matched: usize,
}

fn check_nonempty(h1: &Tensor, h2: &Tensor) -> Result<()> {
    if h1.rows() == 0 || h2.rows() == 0 {
        return Err(Error::EmptyInput("mmd feature batch"));
    }
    if h1.dim(1) != h2.dim(1) {
        return Err(Error::ShapeMismatch(format!(
            "feature dims disagree: {:?} vs {:?}",
            h1.shape(),
            h2.shape()
        )));
    }
    Ok(())
}

/// Squared biased MMD before the clamp at zero. Exposed for tests that
/// check how far below zero round-off can take it.
pub(crate) fn mmd_sq_biased_raw(h1: &Tensor, h2: &Tensor, bank: &KernelBank) -> Result<f64> {
    check_nonempty(h1, h2)?;
    let m1 = h1.rows() as f64;
    let m2 = h2.rows() as f64;
    let k11 = kernels::mixture_kernel_matrix(&pairwise_sq_dist(h1, h1)?, bank)?;
    let k22 = kernels::mixture_kernel_matrix(&pairwise_sq_dist(h2, h2)?, bank)?;
    let k12 = kernels::mixture_kernel_matrix(&pairwise_sq_dist(h1, h2)?, bank)?;
    let t11: f64 = k11.data().iter().sum::<f64>() / (m1 * m1);
    let t22: f64 = k22.data().iter().sum::<f64>() / (m2 * m2);
    let t12: f64 = k12.data().iter().sum::<f64>() / (m1 * m2);
    Ok(t11 + t22 - 2.0 * t12)
}

/// Squared biased MMD (V-statistic, diagonal terms included), clamped below
/// at zero.
pub fn mmd_sq_biased(h1: &Tensor, h2: &Tensor, bank: &KernelBank) -> Result<f64> {
    Ok(mmd_sq_biased_raw(h1, h2, bank)?.max(0.0))
}

/// Row sums of a 2-D tensor.
fn row_sums(w: &Tensor) -> Vec<f64> {
    let m = w.dim(1);
    w.data().chunks_exact(m).map(|row| row.iter().sum()).collect()
}

/// Column sums of a 2-D tensor.
fn col_sums(w: &Tensor) -> Vec<f64> {
    let m = w.dim(1);
    let mut out = vec![0.0; m];
    for row in w.data().chunks_exact(m) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}

/// `out += coef * (rowsum_weights[i] * h[i] - (w @ h)[i])` accumulated row-wise.
fn accumulate_weighted_diff(
    out: &mut Tensor,
    coef: f64,
    weights: &Tensor,
    weight_row_sums: &[f64],
    h_own: &Tensor,
    h_other: &Tensor,
) -> Result<()> {
    let agg = weights.matmul(h_other)?;
    let d = h_own.dim(1);
    let out_data = out.data_mut();
    for i in 0..h_own.dim(0) {
        let own = h_own.row(i);
        let row = agg.row(i);
        let s = weight_row_sums[i];
        for c in 0..d {
            out_data[i * d + c] += coef * (s * own[c] - row[c]);
        }
    }
    Ok(())
}

/// Gradients of the squared biased MMD with respect to both feature matrices,
/// bandwidths held fixed.
fn mmd_sq_grads(h1: &Tensor, h2: &Tensor, bank: &KernelBank) -> Result<(Tensor, Tensor)> {
    let m1 = h1.rows() as f64;
    let m2 = h2.rows() as f64;
    let w11 = kernels::mixture_grad_weights(&pairwise_sq_dist(h1, h1)?, bank)?;
    let w22 = kernels::mixture_grad_weights(&pairwise_sq_dist(h2, h2)?, bank)?;
    let w12 = kernels::mixture_grad_weights(&pairwise_sq_dist(h1, h2)?, bank)?;

    let mut g1 = Tensor::zeros(h1.shape().to_vec());
    accumulate_weighted_diff(&mut g1, -4.0 / (m1 * m1), &w11, &row_sums(&w11), h1, h1)?;
    accumulate_weighted_diff(&mut g1, 4.0 / (m1 * m2), &w12, &row_sums(&w12), h1, h2)?;

    let w21 = w12.transposed()?;
    let mut g2 = Tensor::zeros(h2.shape().to_vec());
    accumulate_weighted_diff(&mut g2, -4.0 / (m2 * m2), &w22, &row_sums(&w22), h2, h2)?;
    accumulate_weighted_diff(&mut g2, 4.0 / (m1 * m2), &w21, &col_sums(&w12), h2, h1)?;

    Ok((g1, g2))
}

/// Joint matching loss against an explicit kernel bank. The bank is treated
/// as constant; gradients flow only through the feature matrices.
pub fn match_joint_with_bank(
    h1: &FeatureBatch,
    h2: &FeatureBatch,
    bank: &KernelBank,
    use_sqrt: bool,
) -> Result<MatchResult> {
    let f1 = h1.features();
    let f2 = h2.features();
    check_nonempty(f1, f2)?;
    let v = mmd_sq_biased(f1, f2, bank)?;
    let (mut g1, mut g2) = mmd_sq_grads(f1, f2, bank)?;
    let loss = if use_sqrt {
        let root = (v + SQRT_EPS).sqrt();
        let chain = 0.5 / root;
        g1 = g1.scaled(chain)?;
        g2 = g2.scaled(chain)?;
        root
    } else {
        v
    };
    Ok(MatchResult {
        loss,
        grad_h1: g1,
        grad_h2: g2,
        sigma_med: bank.sigma_med(),
        classes_matched: 0,
    })
}

/// Joint matching loss: estimate the base bandwidth from the cross-pair
/// median, build the `g`-kernel bank, evaluate MMD and its feature gradients.
pub fn match_joint(
    h1: &FeatureBatch,
    h2: &FeatureBatch,
    g: usize,
    use_sqrt: bool,
) -> Result<MatchResult> {
    check_nonempty(h1.features(), h2.features())?;
    let sigma_med = kernels::median_sq_dist(h1.features(), h2.features())?;
    let bank = kernels::build_bank(sigma_med, g)?;
    match_joint_with_bank(h1, h2, &bank, use_sqrt)
}

/// Class-conditional matching loss: the average of joint matching losses over
/// the classes present in both batches, each with its own bandwidth estimate.
/// Classes missing from either batch are skipped and excluded from the
/// divisor. When no class is shared the result is a zero loss with zero
/// gradients, not an error.
pub fn match_class_conditional(
    h1: &FeatureBatch,
    h2: &FeatureBatch,
    num_classes: usize,
    g: usize,
    use_sqrt: bool,
) -> Result<MatchResult> {
    let f1 = h1.features();
    let f2 = h2.features();
    check_nonempty(f1, f2)?;
    for &l in h1.labels().iter().chain(h2.labels()) {
        if l >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
    }

    let mut idx1: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut idx2: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in h1.labels().iter().enumerate() {
        idx1[l].push(i);
    }
    for (i, &l) in h2.labels().iter().enumerate() {
        idx2[l].push(i);
    }

    let mut per_class: Vec<(usize, MatchResult)> = Vec::new();
    for k in 0..num_classes {
        if idx1[k].is_empty() || idx2[k].is_empty() {
            continue;
        }
        let f1k = f1.gather_rows(&idx1[k])?;
        let f2k = f2.gather_rows(&idx2[k])?;
        let l1k = vec![k; idx1[k].len()];
        let l2k = vec![k; idx2[k].len()];
        let sub = match_joint(
            &FeatureBatch::new(&f1k, &l1k)?,
            &FeatureBatch::new(&f2k, &l2k)?,
            g,
            use_sqrt,
        )?;
        per_class.push((k, sub));
    }

    let matched = per_class.len();
    let mut grad_h1 = Tensor::zeros(f1.shape().to_vec());
    let mut grad_h2 = Tensor::zeros(f2.shape().to_vec());
    if matched == 0 {
        return Ok(MatchResult {
            loss: 0.0,
            grad_h1,
            grad_h2,
            sigma_med: 0.0,
            classes_matched: 0,
        });
    }

    let inv = 1.0 / matched as f64;
    let mut loss = 0.0;
    let mut sigma_sum = 0.0;
    let d = f1.dim(1);
    for (k, sub) in &per_class {
        loss += sub.loss;
        sigma_sum += sub.sigma_med;
        for (r, &orig) in idx1[*k].iter().enumerate() {
            let src = sub.grad_h1.row(r);
            let dst = &mut grad_h1.data_mut()[orig * d..(orig + 1) * d];
            for c in 0..d {
                dst[c] += inv * src[c];
            }
        }
        for (r, &orig) in idx2[*k].iter().enumerate() {
            let src = sub.grad_h2.row(r);
            let dst = &mut grad_h2.data_mut()[orig * d..(orig + 1) * d];
            for c in 0..d {
                dst[c] += inv * src[c];
            }
        }
    }

    Ok(MatchResult {
        loss: loss * inv,
        grad_h1,
        grad_h2,
        sigma_med: sigma_sum * inv,
        classes_matched: matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_bank, KernelBank};
    use crate::rng::Rng;

    fn random_features(rng: &mut Rng, m: usize, d: usize) -> Tensor {
        Tensor::new(vec![m, d], rng.normal_vec(m * d)).unwrap()
    }

    /// Literal double-sum oracle for the squared biased MMD with a mixture
    /// kernel, scalar arithmetic only.
    fn mmd_oracle(h1: &Tensor, h2: &Tensor, bank: &KernelBank) -> f64 {
        let kmix = |x: &[f64], y: &[f64]| -> f64 {
            let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            bank.sigmas().iter().map(|s| (-sq / s).exp()).sum::<f64>() / bank.g() as f64
        };
        let (m1, m2) = (h1.rows(), h2.rows());
        let mut t11 = 0.0;
        for i in 0..m1 {
            for j in 0..m1 {
                t11 += kmix(h1.row(i), h1.row(j));
            }
        }
        let mut t22 = 0.0;
        for i in 0..m2 {
            for j in 0..m2 {
                t22 += kmix(h2.row(i), h2.row(j));
            }
        }
        let mut t12 = 0.0;
        for i in 0..m1 {
            for j in 0..m2 {
                t12 += kmix(h1.row(i), h2.row(j));
            }
        }
        t11 / (m1 * m1) as f64 + t22 / (m2 * m2) as f64 - 2.0 * t12 / (m1 * m2) as f64
    }

    #[test]
    fn identical_sets_give_exactly_zero() {
        let mut rng = Rng::new(20);
        let bank = build_bank(1.3, 5).unwrap();
        for _ in 0..5 {
            let h = random_features(&mut rng, 6, 3);
            assert_eq!(mmd_sq_biased(&h, &h, &bank).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_pair_closed_form() {
        // h1={[0]}, h2={[2]}, bank=[4]: 1 + 1 - 2 e^{-1}
        let h1 = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let h2 = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let bank = KernelBank::from_sigmas(vec![4.0]).unwrap();
        let v = mmd_sq_biased(&h1, &h2, &bank).unwrap();
        let oracle = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((v - oracle).abs() < 1e-15, "{v} vs {oracle}");
    }

    #[test]
    fn matches_double_sum_oracle() {
        let mut rng = Rng::new(21);
        let bank = build_bank(0.9, 3).unwrap();
        let h1 = random_features(&mut rng, 7, 4);
        let h2 = random_features(&mut rng, 9, 4);
        let v = mmd_sq_biased(&h1, &h2, &bank).unwrap();
        let oracle = mmd_oracle(&h1, &h2, &bank);
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let mut rng = Rng::new(22);
        let bank = build_bank(1.1, 4).unwrap();
        let h1 = random_features(&mut rng, 5, 2);
        let h2 = random_features(&mut rng, 8, 2);
        let a = mmd_sq_biased(&h1, &h2, &bank).unwrap();
        let b = mmd_sq_biased(&h2, &h1, &bank).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn raw_value_never_meaningfully_negative() {
        let mut rng = Rng::new(23);
        for _ in 0..20 {
            let bank = build_bank(0.5 + rng.next_f64() * 3.0, 1 + rng.index(5)).unwrap();
            let m1 = 1 + rng.index(10);
            let m2 = 1 + rng.index(10);
            let d = 1 + rng.index(6);
            let h1 = random_features(&mut rng, m1, d);
            let h2 = random_features(&mut rng, m2, d);
            let raw = mmd_sq_biased_raw(&h1, &h2, &bank).unwrap();
            assert!(raw >= -1e-12, "raw {raw}");
            assert!(mmd_sq_biased(&h1, &h2, &bank).unwrap() >= 0.0);
        }
    }

    #[test]
    fn rejects_empty_batches() {
        let empty = Tensor::zeros(vec![0, 3]);
        let h = Tensor::zeros(vec![2, 3]);
        let bank = build_bank(1.0, 2).unwrap();
        assert!(matches!(
            mmd_sq_biased(&empty, &h, &bank),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn joint_on_identical_batches_reduces_to_epsilon() {
        let mut rng = Rng::new(24);
        let f = random_features(&mut rng, 5, 3);
        let labels = vec![0usize; 5];
        let batch = FeatureBatch::new(&f, &labels).unwrap();
        let sqrt_mode = match_joint(&batch, &batch, 5, true).unwrap();
        assert!((sqrt_mode.loss - SQRT_EPS.sqrt()).abs() < 1e-18);
        assert!(sqrt_mode.grad_h1.data().iter().all(|&v| v == 0.0));
        assert!(sqrt_mode.grad_h2.data().iter().all(|&v| v == 0.0));

        let sq_mode = match_joint(&batch, &batch, 5, false).unwrap();
        assert_eq!(sq_mode.loss, 0.0);
        assert!(sq_mode.grad_h1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let mut rng = Rng::new(25);
        let h = 1e-6;
        for &(m1, m2, d) in &[(1usize, 3usize, 2usize), (3, 3, 1), (4, 6, 5)] {
            for &use_sqrt in &[true, false] {
                let f1 = random_features(&mut rng, m1, d);
                let f2 = random_features(&mut rng, m2, d);
                let l1 = vec![0usize; m1];
                let l2 = vec![0usize; m2];
                let b1 = FeatureBatch::new(&f1, &l1).unwrap();
                let b2 = FeatureBatch::new(&f2, &l2).unwrap();
                let base = match_joint(&b1, &b2, 3, use_sqrt).unwrap();
                // Freeze the bank the estimate used.
                let bank = build_bank(base.sigma_med, 3).unwrap();

                let loss_of = |f1d: &[f64], f2d: &[f64]| -> f64 {
                    let t1 = Tensor::new(vec![m1, d], f1d.to_vec()).unwrap();
                    let t2 = Tensor::new(vec![m2, d], f2d.to_vec()).unwrap();
                    match_joint_with_bank(
                        &FeatureBatch::new(&t1, &l1).unwrap(),
                        &FeatureBatch::new(&t2, &l2).unwrap(),
                        &bank,
                        use_sqrt,
                    )
                    .unwrap()
                    .loss
                };

                for i in 0..m1 * d {
                    let mut p = f1.data().to_vec();
                    let mut m = f1.data().to_vec();
                    p[i] += h;
                    m[i] -= h;
                    let fd = (loss_of(&p, f2.data()) - loss_of(&m, f2.data())) / (2.0 * h);
                    let a = base.grad_h1.data()[i];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-5,
                        "grad_h1[{i}] {a} vs fd {fd} (m1={m1} m2={m2} d={d} sqrt={use_sqrt})"
                    );
                }
                for i in 0..m2 * d {
                    let mut p = f2.data().to_vec();
                    let mut m = f2.data().to_vec();
                    p[i] += h;
                    m[i] -= h;
                    let fd = (loss_of(f1.data(), &p) - loss_of(f1.data(), &m)) / (2.0 * h);
                    let a = base.grad_h2.data()[i];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-5,
                        "grad_h2[{i}] {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn joint_separates_shifted_distributions() {
        // N(0, I4) vs N(3, I4) should have a larger match loss than two
        // N(0, I4) draws, across almost all seeds.
        let mut wins = 0;
        for seed in 0..10u64 {
            let mut rng = Rng::new(1000 + seed);
            let m = 32;
            let d = 4;
            let base = random_features(&mut rng, m, d);
            let near = random_features(&mut rng, m, d);
            let mut far = random_features(&mut rng, m, d);
            for v in far.data_mut() {
                *v += 3.0;
            }
            let labels = vec![0usize; m];
            let b = FeatureBatch::new(&base, &labels).unwrap();
            let n = FeatureBatch::new(&near, &labels).unwrap();
            let f = FeatureBatch::new(&far, &labels).unwrap();
            let same = match_joint(&b, &n, 5, true).unwrap().loss;
            let diff = match_joint(&b, &f, 5, true).unwrap().loss;
            if diff > same {
                wins += 1;
            }
        }
        assert!(wins >= 9, "only {wins}/10 seeds separated the shift");
    }

    #[test]
    fn permuting_rows_permutes_gradients_and_preserves_loss() {
        let mut rng = Rng::new(26);
        let f1 = random_features(&mut rng, 5, 3);
        let f2 = random_features(&mut rng, 4, 3);
        let l1 = vec![0usize; 5];
        let l2 = vec![0usize; 4];
        let bank = build_bank(1.0, 3).unwrap();
        let base = match_joint_with_bank(
            &FeatureBatch::new(&f1, &l1).unwrap(),
            &FeatureBatch::new(&f2, &l2).unwrap(),
            &bank,
            true,
        )
        .unwrap();

        let perm = [4usize, 2, 0, 3, 1];
        let f1p = f1.gather_rows(&perm).unwrap();
        let permuted = match_joint_with_bank(
            &FeatureBatch::new(&f1p, &l1).unwrap(),
            &FeatureBatch::new(&f2, &l2).unwrap(),
            &bank,
            true,
        )
        .unwrap();
        assert!((base.loss - permuted.loss).abs() < 1e-12);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..3 {
                let a = permuted.grad_h1.data()[new_row * 3 + c];
                let b = base.grad_h1.data()[old_row * 3 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_conditional_single_class_equals_joint() {
        let mut rng = Rng::new(27);
        let f1 = random_features(&mut rng, 6, 3);
        let f2 = random_features(&mut rng, 4, 3);
        let l1 = vec![2usize; 6];
        let l2 = vec![2usize; 4];
        let b1 = FeatureBatch::new(&f1, &l1).unwrap();
        let b2 = FeatureBatch::new(&f2, &l2).unwrap();
        let joint = match_joint(&b1, &b2, 4, true).unwrap();
        let class = match_class_conditional(&b1, &b2, 5, 4, true).unwrap();
        assert!((joint.loss - class.loss).abs() < 1e-15);
        assert_eq!(class.classes_matched, 1);
        for (a, b) in class.grad_h1.data().iter().zip(joint.grad_h1.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn class_conditional_cancels_per_class() {
        let mut rng = Rng::new(28);
        let f_a = random_features(&mut rng, 3, 2);
        let f_b = random_features(&mut rng, 2, 2);
        // Batch 1 and batch 2 hold the same per-class features.
        let mut data1 = f_a.data().to_vec();
        data1.extend_from_slice(f_b.data());
        let mut labels1 = vec![0usize; 3];
        labels1.extend(vec![1usize; 2]);
        let f1 = Tensor::new(vec![5, 2], data1).unwrap();
        let b1 = FeatureBatch::new(&f1, &labels1).unwrap();
        let res = match_class_conditional(&b1, &b1, 2, 3, true).unwrap();
        assert!(res.loss <= SQRT_EPS.sqrt() + 1e-18);
        assert!(res.grad_h1.data().iter().all(|&v| v == 0.0));
        assert_eq!(res.classes_matched, 2);
    }

    #[test]
    fn class_conditional_matches_hand_assembled_average() {
        let mut rng = Rng::new(29);
        for &num_classes in &[2usize, 3usize] {
            let m1 = 9;
            let m2 = 7;
            let d = 3;
            let f1 = random_features(&mut rng, m1, d);
            let f2 = random_features(&mut rng, m2, d);
            let l1: Vec<usize> = (0..m1).map(|i| i % num_classes).collect();
            let l2: Vec<usize> = (0..m2).map(|i| i % num_classes).collect();
            let b1 = FeatureBatch::new(&f1, &l1).unwrap();
            let b2 = FeatureBatch::new(&f2, &l2).unwrap();
            let combined = match_class_conditional(&b1, &b2, num_classes, 5, true).unwrap();

            // Hand-assembled: filter per class, run joint per class, average.
            let mut loss = 0.0;
            let mut grad1 = Tensor::zeros(vec![m1, d]);
            let mut grad2 = Tensor::zeros(vec![m2, d]);
            let mut matched = 0;
            for k in 0..num_classes {
                let idx1: Vec<usize> = (0..m1).filter(|&i| l1[i] == k).collect();
                let idx2: Vec<usize> = (0..m2).filter(|&i| l2[i] == k).collect();
                if idx1.is_empty() || idx2.is_empty() {
                    continue;
                }
                let f1k = f1.gather_rows(&idx1).unwrap();
                let f2k = f2.gather_rows(&idx2).unwrap();
                let lab1 = vec![k; idx1.len()];
                let lab2 = vec![k; idx2.len()];
                let sub = match_joint(
                    &FeatureBatch::new(&f1k, &lab1).unwrap(),
                    &FeatureBatch::new(&f2k, &lab2).unwrap(),
                    5,
                    true,
                )
                .unwrap();
                loss += sub.loss;
                matched += 1;
                for (r, &orig) in idx1.iter().enumerate() {
                    for c in 0..d {
                        grad1.data_mut()[orig * d + c] += sub.grad_h1.data()[r * d + c];
                    }
                }
                for (r, &orig) in idx2.iter().enumerate() {
                    for c in 0..d {
                        grad2.data_mut()[orig * d + c] += sub.grad_h2.data()[r * d + c];
                    }
                }
            }
            let inv = 1.0 / matched as f64;
            assert_eq!(combined.classes_matched, matched);
            assert!((combined.loss - loss * inv).abs() < 1e-12);
            for (a, b) in combined.grad_h1.data().iter().zip(grad1.data()) {
                assert!((a - b * inv).abs() < 1e-12);
            }
            for (a, b) in combined.grad_h2.data().iter().zip(grad2.data()) {
                assert!((a - b * inv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_conditional_skips_missing_classes() {
        let mut rng = Rng::new(30);
        let f1 = random_features(&mut rng, 4, 2);
        let f2 = random_features(&mut rng, 4, 2);
        // Class 1 never appears in batch 2; class 2 never in batch 1.
        let l1 = vec![0, 0, 1, 1];
        let l2 = vec![0, 0, 2, 2];
        let b1 = FeatureBatch::new(&f1, &l1).unwrap();
        let b2 = FeatureBatch::new(&f2, &l2).unwrap();
        let res = match_class_conditional(&b1, &b2, 3, 3, true).unwrap();
        assert_eq!(res.classes_matched, 1);

        // Divisor is the matched count, so the loss equals the class-0 joint.
        let f1k = f1.gather_rows(&[0, 1]).unwrap();
        let f2k = f2.gather_rows(&[0, 1]).unwrap();
        let lab = vec![0usize; 2];
        let joint = match_joint(
            &FeatureBatch::new(&f1k, &lab).unwrap(),
            &FeatureBatch::new(&f2k, &lab).unwrap(),
            3,
            true,
        )
        .unwrap();
        assert!((res.loss - joint.loss).abs() < 1e-15);
    }

    #[test]
    fn class_conditional_no_shared_class_reports_zero() {
        let f1 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let f2 = Tensor::new(vec![2, 2], vec![2.0, 2.0, 3.0, 3.0]).unwrap();
        let l1 = vec![0usize, 0];
        let l2 = vec![1usize, 1];
        let res = match_class_conditional(
            &FeatureBatch::new(&f1, &l1).unwrap(),
            &FeatureBatch::new(&f2, &l2).unwrap(),
            2,
            3,
            true,
        )
        .unwrap();
        assert_eq!(res.loss, 0.0);
        assert_eq!(res.classes_matched, 0);
        assert!(res.grad_h1.data().iter().all(|&v| v == 0.0));
        assert!(res.grad_h2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_conditional_rejects_out_of_range_labels() {
        let f = Tensor::zeros(vec![2, 2]);
        let l_bad = vec![0usize, 7];
        let l_ok = vec![0usize, 1];
        let res = match_class_conditional(
            &FeatureBatch::new(&f, &l_bad).unwrap(),
            &FeatureBatch::new(&f, &l_ok).unwrap(),
            2,
            3,
            true,
        );
        assert!(res.is_err());
    }

    #[test]
    fn class_conditional_kernel_work_is_cheaper_on_balanced_batches() {
        let mut rng = Rng::new(31);
        let num_classes = 5;
        let per_class = 20;
        let m = num_classes * per_class;
        let f1 = random_features(&mut rng, m, 4);
        let f2 = random_features(&mut rng, m, 4);
        let labels: Vec<usize> = (0..m).map(|i| i % num_classes).collect();
        let b1 = FeatureBatch::new(&f1, &labels).unwrap();
        let b2 = FeatureBatch::new(&f2, &labels).unwrap();

        kernels::reset_kernel_eval_count();
        match_joint(&b1, &b2, 5, true).unwrap();
        let joint_evals = kernels::kernel_eval_count();

        kernels::reset_kernel_eval_count();
        match_class_conditional(&b1, &b2, num_classes, 5, true).unwrap();
        let class_evals = kernels::kernel_eval_count();

        // Per-class work is ~(2 m_k)^2 per class vs (2 m)^2 joint: a factor
        // of num_classes. Allow slack for shared overheads.
        assert!(
            class_evals * (num_classes as u64 / 2) < joint_evals,
            "class {class_evals} vs joint {joint_evals}"
        );
    }
}
