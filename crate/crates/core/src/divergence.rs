//! Divergences and distillation losses with analytic gradients.
//!
//! Conventions:
//! - `kld` is the asymmetric Kullback-Leibler divergence, `skld` its
//!   symmetrized average; both use natural log.
//! - Losses operate on *posterior* batches (rows on the probability
//!   simplex) and return gradients with respect to the logits that
//!   produced them via `softmax(z / temperature)`. The softmax Jacobian
//!   only needs the posterior values, so callers never pass logits.
//! - Probabilities are floored at [`PROB_EPS`] and renormalized before any
//!   divergence value is computed; the analytic gradients are derived for
//!   the unclamped path, which softmax outputs stay on in practice.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::nle::NleMatrix;
use crate::real::Real;
use crate::tensor::{one_hot_to_indices, Tensor};

/// Probability floor applied before divergences.
pub const PROB_EPS: f64 = 1e-8;

/// Scalar loss plus the gradient named by the producing operation.
#[derive(Debug, Clone)]
pub struct LossValue<T: Real> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// Floor every entry at `PROB_EPS`, then renormalize to sum 1.
pub fn clamp_simplex<T: Real>(p: &[T]) -> Vec<T> {
    let eps = T::from_f64(PROB_EPS);
    let mut out: Vec<T> = p.iter().map(|&v| if v < eps { eps } else { v }).collect();
    let sum = out.iter().fold(T::zero(), |a, &b| a + b);
    for v in out.iter_mut() {
        *v = *v / sum;
    }
    out
}

fn check_same_len<T: Real>(p: &[T], q: &[T]) -> Result<()> {
    if p.len() != q.len() {
        return Err(CoreError::Input(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(CoreError::Input("empty distribution".into()));
    }
    Ok(())
}

/// KLD γ₁(P, Q) = Σᵢ pᵢ ln(pᵢ/qᵢ); terms with pᵢ = 0 contribute 0.
pub fn kld<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    check_same_len(p, q)?;
    let pc = clamp_simplex(p);
    let qc = clamp_simplex(q);
    let mut acc = T::zero();
    for (&pi, &qi) in pc.iter().zip(&qc) {
        if pi > T::zero() {
            acc = acc + pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// SKLD γ₂(P, Q) = ½(γ₁(P, Q) + γ₁(Q, P)).
pub fn skld<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    let half = T::from_f64(0.5);
    Ok(half * (kld(p, q)? + kld(q, p)?))
}

/// Smoothed L1 (Huber): ½(x−y)² for |x−y| ≤ 1, |x−y| − ½ beyond.
pub fn smoothed_l1<T: Real>(x: T, y: T) -> T {
    let d = x - y;
    if d.abs() <= T::one() {
        T::from_f64(0.5) * d * d
    } else {
        d.abs() - T::from_f64(0.5)
    }
}

/// d SL1(x, y) / dx. (The y-derivative is its negation.)
pub fn smoothed_l1_dx<T: Real>(x: T, y: T) -> T {
    let d = x - y;
    if d.abs() <= T::one() {
        d
    } else {
        d.signum()
    }
}

/// Row-wise tempered softmax: out[i] = softmax(logits[i] / temperature).
pub fn softmax_rows<T: Real>(logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if logits.shape().len() != 2 {
        return Err(CoreError::Input(format!(
            "softmax_rows expects 2-D logits, got {:?}",
            logits.shape()
        )));
    }
    if temperature <= T::zero() {
        return Err(CoreError::Input("temperature must be positive".into()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut data = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for j in 0..k {
            let e = ((row[j] - m) / temperature).exp();
            data[i * k + j] = e;
            sum = sum + e;
        }
        for j in 0..k {
            data[i * k + j] = data[i * k + j] / sum;
        }
    }
    Tensor::from_vec(&[n, k], data)
}

/// Chain a gradient w.r.t. a posterior row back to its logits:
/// dL/dzₖ = pₖ (gₖ − Σⱼ pⱼ gⱼ) / temperature.
fn softmax_chain_row<T: Real>(posterior: &[T], grad_p: &[T], temperature: T, out: &mut [T]) {
    let mut dot = T::zero();
    for (&pj, &gj) in posterior.iter().zip(grad_p) {
        dot = dot + pj * gj;
    }
    for j in 0..posterior.len() {
        out[j] = posterior[j] * (grad_p[j] - dot) / temperature;
    }
}

fn check_batch_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape() != b.shape() {
        return Err(CoreError::Input(format!(
            "{what}: batch shapes must match, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Cross entropy against one-hot labels, averaged over the batch.
/// Gradient is w.r.t. the logits behind `posteriors`.
pub fn cross_entropy<T: Real>(
    posteriors: &Tensor<T>,
    labels_one_hot: &Tensor<T>,
    temperature: T,
) -> Result<LossValue<T>> {
    let (n, k) = check_batch_pair(posteriors, labels_one_hot, "cross_entropy")?;
    let labels = one_hot_to_indices(labels_one_hot)?;
    let eps = T::from_f64(PROB_EPS);
    let inv_n = T::one() / T::from_usize(n);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for i in 0..n {
        let p = &posteriors.data()[i * k..(i + 1) * k];
        value = value - p[labels[i]].max(eps).ln();
        for j in 0..k {
            let y = if j == labels[i] { T::one() } else { T::zero() };
            grad[i * k + j] = (p[j] - y) * inv_n / temperature;
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grad: Tensor::from_vec(&[n, k], grad)?,
    })
}

/// Mean γ₁(target, posterior) over aligned rows, with gradient w.r.t. the
/// posterior logits. This is the shared core of the NLE adaptation loss
/// (targets = label-indexed NLE columns) and the paired teacher-student
/// loss (targets = teacher posteriors).
fn fixed_target_kld<T: Real>(
    targets: &Tensor<T>,
    posteriors: &Tensor<T>,
    temperature: T,
    what: &str,
) -> Result<LossValue<T>> {
    let (n, k) = check_batch_pair(targets, posteriors, what)?;
    let inv_n = T::one() / T::from_usize(n);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for i in 0..n {
        let t = &targets.data()[i * k..(i + 1) * k];
        let p = &posteriors.data()[i * k..(i + 1) * k];
        value = value + kld(t, p)?;
        // dγ₁(t, p)/dz through softmax collapses to (p − t) / temperature.
        for j in 0..k {
            grad[i * k + j] = (p[j] - t[j]) * inv_n / temperature;
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grad: Tensor::from_vec(&[n, k], grad)?,
    })
}

/// NLE adaptation loss: mean γ₁(NLE_M·yᵢ, F_T(xᵢ)) with the looked-up NLE
/// column as target distribution. Gradient w.r.t. student logits.
pub fn nle_adaptation_loss<T: Real>(
    nle: &NleMatrix<T>,
    labels_one_hot: &Tensor<T>,
    student_posteriors: &Tensor<T>,
    temperature: T,
) -> Result<LossValue<T>> {
    let targets = nle.lookup_batch(labels_one_hot)?;
    fixed_target_kld(&targets, student_posteriors, temperature, "nle_adaptation_loss")
}

/// Paired teacher-student loss: mean γ₁(F_S(x^S'ᵢ), F_T(x^Tᵢ)) over rows
/// aligned by pair. Gradient w.r.t. student logits only.
pub fn ts_loss<T: Real>(
    teacher_posteriors: &Tensor<T>,
    student_posteriors: &Tensor<T>,
    temperature: T,
) -> Result<LossValue<T>> {
    fixed_target_kld(teacher_posteriors, student_posteriors, temperature, "ts_loss")
}

/// NLE matrix learning loss: mean γ₂(teacher posterior, NLE column of the
/// sample's class). Gradient w.r.t. the NLE logits only; the teacher is
/// frozen by construction.
pub fn nle_learning_loss<T: Real>(
    teacher_posteriors: &Tensor<T>,
    labels_one_hot: &Tensor<T>,
    nle: &NleMatrix<T>,
) -> Result<LossValue<T>> {
    let (n, k) = check_batch_pair(teacher_posteriors, labels_one_hot, "nle_learning_loss")?;
    if k != nle.num_classes() {
        return Err(CoreError::Input(format!(
            "label dimension {k} does not match NLE dimension {}",
            nle.num_classes()
        )));
    }
    let labels = one_hot_to_indices(labels_one_hot)?;
    let columns = nle.columns();
    let inv_n = T::one() / T::from_usize(n);
    let half = T::from_f64(0.5);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); k * k];
    let mut grad_col = vec![T::zero(); k];
    let mut chained = vec![T::zero(); k];
    for i in 0..n {
        let s = clamp_simplex(&teacher_posteriors.data()[i * k..(i + 1) * k]);
        let c = labels[i];
        let col = &columns.data()[c * k..(c + 1) * k];
        value = value + skld(&s, col)?;
        // dγ₂(s, n)/dnⱼ = ½(ln(nⱼ/sⱼ) + 1 − sⱼ/nⱼ), then chain through the
        // column softmax onto the NLE logits.
        for j in 0..k {
            grad_col[j] = half * ((col[j] / s[j]).ln() + T::one() - s[j] / col[j]);
        }
        softmax_chain_row(col, &grad_col, T::one(), &mut chained);
        for j in 0..k {
            grad[c * k + j] = grad[c * k + j] + chained[j] * inv_n;
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grad: Tensor::from_vec(&[k, k], grad)?,
    })
}

/// Total mutual distance V: (1/N²) Σᵢ Σⱼ γ₂(dᵢ, dⱼ) over all ordered
/// pairs including i = j. Gradient w.r.t. the distribution entries.
pub fn mutual_distance<T: Real>(distributions: &Tensor<T>) -> Result<LossValue<T>> {
    if distributions.shape().len() != 2 || distributions.shape()[0] == 0 {
        return Err(CoreError::Input(format!(
            "mutual_distance expects a non-empty 2-D batch, got {:?}",
            distributions.shape()
        )));
    }
    let (n, k) = (distributions.shape()[0], distributions.shape()[1]);
    let rows: Vec<Vec<T>> = (0..n)
        .map(|i| clamp_simplex(&distributions.data()[i * k..(i + 1) * k]))
        .collect();
    let inv_n2 = T::one() / T::from_usize(n * n);
    let half = T::from_f64(0.5);
    let mut value = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            value = value + skld(&rows[i], &rows[j])?;
        }
    }
    // Ordered pairs double the upper triangle; diagonal terms are 0.
    value = (value + value) * inv_n2;

    // dV/d(pₘ)ₖ = (2/N²) Σⱼ ∂₁γ₂(pₘ, pⱼ)ₖ with
    // ∂₁γ₂(p, q)ₖ = ½(ln(pₖ/qₖ) + 1 − qₖ/pₖ).
    let two = T::from_f64(2.0);
    let mut grad = vec![T::zero(); n * k];
    for m in 0..n {
        for j in 0..n {
            if j == m {
                continue;
            }
            for t in 0..k {
                let p = rows[m][t];
                let q = rows[j][t];
                grad[m * k + t] =
                    grad[m * k + t] + two * inv_n2 * half * ((p / q).ln() + T::one() - q / p);
            }
        }
    }
    Ok(LossValue {
        value,
        grad: Tensor::from_vec(&[n, k], grad)?,
    })
}

/// RTSL loss: SL1 between the total mutual distance of the batch's
/// label-indexed NLE vectors and that of the student posteriors.
/// Gradient w.r.t. student logits.
pub fn rtsl_loss<T: Real>(
    nle_vectors: &Tensor<T>,
    student_posteriors: &Tensor<T>,
    temperature: T,
) -> Result<LossValue<T>> {
    let (n, k) = check_batch_pair(nle_vectors, student_posteriors, "rtsl_loss")?;
    let v_nle = mutual_distance(nle_vectors)?.value;
    let v_student = mutual_distance(student_posteriors)?;
    let value = smoothed_l1(v_nle, v_student.value);
    // dL/dV_s = −SL1'(V_n − V_s); chain through V and each row's softmax.
    let dv = -smoothed_l1_dx(v_nle, v_student.value);
    let mut grad = vec![T::zero(); n * k];
    let mut chained = vec![T::zero(); k];
    for i in 0..n {
        let p = &student_posteriors.data()[i * k..(i + 1) * k];
        let gp: Vec<T> = v_student.grad.data()[i * k..(i + 1) * k]
            .iter()
            .map(|&g| g * dv)
            .collect();
        softmax_chain_row(p, &gp, temperature, &mut chained);
        grad[i * k..(i + 1) * k].copy_from_slice(&chained);
    }
    Ok(LossValue {
        value,
        grad: Tensor::from_vec(&[n, k], grad)?,
    })
}

/// Combined loss with per-component values for logging.
#[derive(Debug, Clone)]
pub struct CombinedLoss<T: Real> {
    pub value: T,
    pub nle_component: T,
    pub rtsl_component: T,
    pub grad: Tensor<T>,
}

/// L_NLE + λ·L_RTSL with summed gradients w.r.t. student logits.
pub fn nle_rtsl_loss<T: Real>(
    nle: &NleMatrix<T>,
    labels_one_hot: &Tensor<T>,
    student_posteriors: &Tensor<T>,
    lambda: T,
    temperature: T,
) -> Result<CombinedLoss<T>> {
    if lambda < T::zero() {
        return Err(CoreError::Input("lambda must be non-negative".into()));
    }
    let nle_vectors = nle.lookup_batch(labels_one_hot)?;
    let l_nle = fixed_target_kld(&nle_vectors, student_posteriors, temperature, "nle_rtsl_loss")?;
    let l_rtsl = rtsl_loss(&nle_vectors, student_posteriors, temperature)?;
    let (n, k) = (l_nle.grad.shape()[0], l_nle.grad.shape()[1]);
    let mut grad = vec![T::zero(); n * k];
    for (g, (&gn, &gr)) in grad
        .iter_mut()
        .zip(l_nle.grad.data().iter().zip(l_rtsl.grad.data()))
    {
        *g = gn + lambda * gr;
    }
    Ok(CombinedLoss {
        value: l_nle.value + lambda * l_rtsl.value,
        nle_component: l_nle.value,
        rtsl_component: l_rtsl.value,
        grad: Tensor::from_vec(&[n, k], grad)?,
    })
}
