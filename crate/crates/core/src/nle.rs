//! Neural label embedding: a K×K matrix whose column c is a probability
//! distribution over all classes, distilled from a frozen source model.
//! Columns are parameterized as softmax over free logits, so the simplex
//! constraint holds structurally at every training step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::divergence::{self, PROB_EPS};
use crate::error::{CoreError, Result};
use crate::optim::cosine_lr;
use crate::real::Real;
use crate::rng::{shuffle, stream_rng};
use crate::tensor::{one_hot_to_indices, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NleMatrix<T: Real> {
    num_classes: usize,
    /// Free parameters, class-major: `logits[c*K + j]` is logit j of column c.
    logits: Vec<T>,
}

impl<T: Real> NleMatrix<T> {
    pub fn from_logits(num_classes: usize, logits: Vec<T>) -> Result<Self> {
        if logits.len() != num_classes * num_classes {
            return Err(CoreError::Input(format!(
                "NLE logits must be {0}x{0}, got {1} values",
                num_classes,
                logits.len()
            )));
        }
        Ok(NleMatrix { num_classes, logits })
    }

    /// Build from probability columns (row c of `columns` = column NLE_c).
    /// Logits are set to log of the clamped probabilities, so the derived
    /// columns reproduce the inputs up to the clamp.
    pub fn from_columns(columns: &Tensor<T>) -> Result<Self> {
        let shape = columns.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(CoreError::Input(format!(
                "NLE columns must form a square matrix, got {shape:?}"
            )));
        }
        let k = shape[0];
        let eps = T::from_f64(PROB_EPS);
        let logits = columns.data().iter().map(|&p| p.max(eps).ln()).collect();
        NleMatrix::from_logits(k, logits)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Derived columns: row c of the result is softmax(logits of column c).
    /// Every row is strictly positive and sums to 1.
    pub fn columns(&self) -> Tensor<T> {
        let k = self.num_classes;
        let logits = Tensor::from_vec(&[k, k], self.logits.clone()).expect("square by invariant");
        divergence::softmax_rows(&logits, T::one()).expect("softmax of finite logits")
    }

    /// Column for one class.
    pub fn column(&self, class: usize) -> Result<Vec<T>> {
        if class >= self.num_classes {
            return Err(CoreError::Input(format!(
                "class {class} out of range for K={}",
                self.num_classes
            )));
        }
        let cols = self.columns();
        let k = self.num_classes;
        Ok(cols.data()[class * k..(class + 1) * k].to_vec())
    }

    /// Indexing operation NLE_M · y for a one-hot label row.
    pub fn lookup(&self, label_one_hot: &[T]) -> Result<Vec<T>> {
        if label_one_hot.len() != self.num_classes {
            return Err(CoreError::Input(format!(
                "label length {} does not match K={}",
                label_one_hot.len(),
                self.num_classes
            )));
        }
        let labels = Tensor::from_vec(&[1, self.num_classes], label_one_hot.to_vec())?;
        let idx = one_hot_to_indices(&labels)?[0];
        self.column(idx)
    }

    /// Batched lookup: row i of the result is the column for label row i.
    pub fn lookup_batch(&self, labels_one_hot: &Tensor<T>) -> Result<Tensor<T>> {
        let idx = one_hot_to_indices(labels_one_hot)?;
        let k = self.num_classes;
        if labels_one_hot.shape()[1] != k {
            return Err(CoreError::Input(format!(
                "label dimension {} does not match K={k}",
                labels_one_hot.shape()[1]
            )));
        }
        let cols = self.columns();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &c in &idx {
            data.extend_from_slice(&cols.data()[c * k..(c + 1) * k]);
        }
        Tensor::from_vec(&[idx.len(), k], data)
    }

    /// Apply a gradient step on the logits.
    fn step(&mut self, grad: &[T], velocity: &mut [T], lr: T, momentum: T) {
        for ((l, g), v) in self.logits.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            *v = momentum * *v + *g;
            *l = *l - lr * *v;
        }
    }
}

/// Initialize columns from per-class centroids of (tempered) teacher
/// posteriors: column c logits = log(mean posterior over class-c samples,
/// clamped). Errors if some class has no samples.
pub fn init_from_centroids<T: Real>(
    teacher_posteriors: &Tensor<T>,
    labels_one_hot: &Tensor<T>,
) -> Result<NleMatrix<T>> {
    let idx = one_hot_to_indices(labels_one_hot)?;
    let k = labels_one_hot.shape()[1];
    if teacher_posteriors.shape() != [idx.len(), k] {
        return Err(CoreError::Input(format!(
            "posterior shape {:?} does not match {} labels of dimension {k}",
            teacher_posteriors.shape(),
            idx.len()
        )));
    }
    let mut sums = vec![T::zero(); k * k];
    let mut counts = vec![0usize; k];
    for (i, &c) in idx.iter().enumerate() {
        counts[c] += 1;
        for j in 0..k {
            sums[c * k + j] = sums[c * k + j] + teacher_posteriors.data()[i * k + j];
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(CoreError::Data(format!("class {c} has zero samples")));
    }
    let eps = T::from_f64(PROB_EPS);
    for c in 0..k {
        let inv = T::one() / T::from_usize(counts[c]);
        for j in 0..k {
            sums[c * k + j] = (sums[c * k + j] * inv).max(eps).ln();
        }
    }
    NleMatrix::from_logits(k, sums)
}

#[derive(Debug, Clone)]
pub struct NleTrainOpts {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate full-set L_LE every this many steps (and at start/end).
    pub eval_every: usize,
}

impl Default for NleTrainOpts {
    fn default() -> Self {
        NleTrainOpts {
            learning_rate: 0.01,
            steps: 2000,
            batch_size: 128,
            momentum: 0.9,
            seed: 0,
            eval_every: 200,
        }
    }
}

/// Result of NLE matrix training: the matrix plus full-set L_LE recorded at
/// evaluation checkpoints (first entry = before training, last = after).
#[derive(Debug, Clone)]
pub struct NleTrainOutcome<T: Real> {
    pub matrix: NleMatrix<T>,
    pub checkpoint_losses: Vec<f64>,
}

/// Refine an NLE matrix by minibatch gradient descent on the SKLD learning
/// loss against frozen teacher posteriors. The caller supplies posteriors
/// already computed at the distillation temperature; the teacher model is
/// never touched here.
pub fn train_nle<T: Real>(
    init: NleMatrix<T>,
    teacher_posteriors: &Tensor<T>,
    labels_one_hot: &Tensor<T>,
    opts: &NleTrainOpts,
) -> Result<NleTrainOutcome<T>> {
    let n = teacher_posteriors.shape()[0];
    let k = init.num_classes();
    let full_loss = |m: &NleMatrix<T>| -> Result<f64> {
        Ok(
            divergence::nle_learning_loss(teacher_posteriors, labels_one_hot, m)?
                .value
                .to_f64(),
        )
    };
    let mut matrix = init;
    let mut velocity = vec![T::zero(); k * k];
    let mut checkpoint_losses = vec![full_loss(&matrix)?];
    let mut rng = stream_rng(opts.seed, "nle-train", 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let batch = opts.batch_size.min(n).max(1);
    for step in 0..opts.steps {
        if cursor + batch > n {
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let chosen = &order[cursor..cursor + batch];
        cursor += batch;
        let mut post = Vec::with_capacity(batch * k);
        let mut labs = Vec::with_capacity(batch * k);
        for &i in chosen {
            post.extend_from_slice(&teacher_posteriors.data()[i * k..(i + 1) * k]);
            labs.extend_from_slice(&labels_one_hot.data()[i * k..(i + 1) * k]);
        }
        let post = Tensor::from_vec(&[batch, k], post)?;
        let labs = Tensor::from_vec(&[batch, k], labs)?;
        let loss = divergence::nle_learning_loss(&post, &labs, &matrix)?;
        if !loss.value.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite NLE learning loss at step {step}"
            )));
        }
        let lr = T::from_f64(cosine_lr(step, opts.steps, opts.learning_rate)?);
        matrix.step(loss.grad.data(), &mut velocity, lr, T::from_f64(opts.momentum));
        if (step + 1) % opts.eval_every.max(1) == 0 {
            checkpoint_losses.push(full_loss(&matrix)?);
        }
    }
    if opts.steps % opts.eval_every.max(1) != 0 {
        checkpoint_losses.push(full_loss(&matrix)?);
    }
    Ok(NleTrainOutcome {
        matrix,
        checkpoint_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::skld;
    use crate::tensor::one_hot;
    use approx::assert_abs_diff_eq;

    #[test]
    fn columns_live_on_the_simplex() {
        let m = NleMatrix::from_logits(3, vec![0.3f64, -1.0, 2.0, 0.0, 0.0, 0.0, 5.0, 1.0, -2.0])
            .unwrap();
        let cols = m.columns();
        for c in 0..3 {
            let row = &cols.data()[c * 3..(c + 1) * 3];
            let sum: f64 = row.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn lookup_fetches_the_labelled_column() {
        let m = NleMatrix::from_logits(3, vec![0.0f64; 9]).unwrap();
        let label = [0.0, 0.0, 1.0];
        let v = m.lookup(&label).unwrap();
        assert_eq!(v, m.column(2).unwrap());
        // Purity: repeated lookups agree.
        assert_eq!(v, m.lookup(&label).unwrap());
        let sum: f64 = v.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn lookup_rejects_malformed_labels() {
        let m = NleMatrix::from_logits(2, vec![0.0f64; 4]).unwrap();
        assert!(m.lookup(&[0.5, 0.5]).is_err());
        assert!(m.lookup(&[1.0]).is_err());
    }

    #[test]
    fn centroid_init_averages_per_class() {
        // Two samples of class 0 with posteriors [0.6,0.4] and [0.4,0.6]:
        // column 0 becomes softmax(log [0.5, 0.5]) = [0.5, 0.5].
        let post =
            Tensor::from_vec(&[3, 2], vec![0.6f64, 0.4, 0.4, 0.6, 0.1, 0.9]).unwrap();
        let labels = one_hot::<f64>(&[0, 0, 1], 2).unwrap();
        let m = init_from_centroids(&post, &labels).unwrap();
        let col0 = m.column(0).unwrap();
        assert_abs_diff_eq!(col0[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(col0[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn centroid_init_of_one_hot_teacher_is_near_one_hot() {
        let post = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let labels = one_hot::<f64>(&[0, 1], 2).unwrap();
        let m = init_from_centroids(&post, &labels).unwrap();
        let col0 = m.column(0).unwrap();
        assert!(col0[0] > 0.999_999);
        assert!(col0[1] > 0.0);
    }

    #[test]
    fn centroid_init_names_a_missing_class() {
        let post = Tensor::from_vec(&[1, 3], vec![0.4f64, 0.3, 0.3]).unwrap();
        let labels = one_hot::<f64>(&[0], 3).unwrap();
        let err = init_from_centroids(&post, &labels).unwrap_err();
        match err {
            CoreError::Data(msg) => assert!(msg.contains("class 1")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn training_converges_to_class_constant_teacher_posteriors() {
        // Teacher outputs a fixed distribution per class: the SKLD minimizer
        // is that distribution itself, so the loss should approach zero and
        // the learned columns should match within 1e-4 total variation.
        let t0 = [0.7f64, 0.2, 0.1];
        let t1 = [0.15f64, 0.7, 0.15];
        let t2 = [0.1f64, 0.25, 0.65];
        let reps = 40;
        let mut post = Vec::new();
        let mut labs = Vec::new();
        for _ in 0..reps {
            post.extend_from_slice(&t0);
            labs.push(0);
            post.extend_from_slice(&t1);
            labs.push(1);
            post.extend_from_slice(&t2);
            labs.push(2);
        }
        let post = Tensor::from_vec(&[3 * reps, 3], post).unwrap();
        let labels = one_hot::<f64>(&labs, 3).unwrap();
        // Deliberately biased init.
        let init = NleMatrix::from_logits(3, vec![0.0; 9]).unwrap();
        let opts = NleTrainOpts {
            steps: 1500,
            batch_size: 32,
            learning_rate: 0.5,
            ..NleTrainOpts::default()
        };
        let out = train_nle(init, &post, &labels, &opts).unwrap();
        let first = out.checkpoint_losses[0];
        let last = *out.checkpoint_losses.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(last < 1e-4, "loss did not converge: {last}");
        // Checkpoint losses non-increasing under the decayed schedule.
        for w in out.checkpoint_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "checkpoints increased: {w:?}");
        }
        for (c, target) in [(0usize, &t0), (1, &t1), (2, &t2)] {
            let col = out.matrix.column(c).unwrap();
            let tv: f64 = col
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 1e-4, "column {c} off by TV {tv}");
        }
    }

    #[test]
    fn trained_column_matches_skld_barycenter_grid_search() {
        // One class, two teacher posteriors: the converged column must agree
        // with a brute-force grid search over the 2-simplex within 1e-3.
        let p1 = [0.8f64, 0.2];
        let p2 = [0.4f64, 0.6];
        let mut post = Vec::new();
        let mut labs = Vec::new();
        for _ in 0..32 {
            post.extend_from_slice(&p1);
            post.extend_from_slice(&p2);
            labs.push(0);
            labs.push(0);
        }
        // A second class keeps init_from_centroids happy but is constant.
        for _ in 0..8 {
            post.extend_from_slice(&[0.5, 0.5]);
            labs.push(1);
        }
        let n = labs.len();
        let post = Tensor::from_vec(&[n, 2], post).unwrap();
        let labels = one_hot::<f64>(&labs, 2).unwrap();
        let init = init_from_centroids(&post, &labels).unwrap();
        let opts = NleTrainOpts {
            steps: 3000,
            batch_size: 16,
            learning_rate: 0.3,
            ..NleTrainOpts::default()
        };
        let trained = train_nle(init, &post, &labels, &opts).unwrap().matrix;
        let col = trained.column(0).unwrap();

        let mut best_t = 0.0;
        let mut best = f64::INFINITY;
        let mut t = 1e-4;
        while t < 1.0 {
            let cand = [t, 1.0 - t];
            let obj = 0.5 * (skld(&p1, &cand).unwrap() + skld(&p2, &cand).unwrap());
            if obj < best {
                best = obj;
                best_t = t;
            }
            t += 1e-4;
        }
        assert!(
            (col[0] - best_t).abs() < 1e-3,
            "barycenter mismatch: trained {} vs grid {}",
            col[0],
            best_t
        );
    }
}
