//! Training objectives: InfoNCE against a momentum queue, the image-level
//! negative-cosine loss, the dense masked local loss and their combination.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::engine::{Graph, Scalar, Tensor, Var};
use crate::error::{Result, SfcError};
use crate::geometry::PositiveMask;

/// FIFO ring buffer of unit-norm negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    dim: usize,
    capacity: usize,
    data: Vec<f32>,
    cursor: usize,
    /// Number of real (enqueued) entries, saturating at capacity.
    filled: usize,
}

impl NegativeQueue {
    /// A full queue of random unit vectors.
    pub fn seeded<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(SfcError::Config(format!(
                "negative queue needs capacity and dim >= 1, got {capacity} x {dim}"
            )));
        }
        let mut data = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            data.extend(v.iter().map(|x| (x / n) as f32));
        }
        Ok(NegativeQueue {
            dim,
            capacity,
            data,
            cursor: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.capacity == 0
    }

    /// Entries written by [`NegativeQueue::enqueue`] so far, at most the capacity.
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn get(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Push rows of `batch` (`[N, dim]`), normalizing each, overwriting the
    /// oldest entries.
    pub fn enqueue<T: Scalar>(&mut self, batch: &Tensor<T>) -> Result<()> {
        if batch.rank() != 2 || batch.shape()[1] != self.dim {
            return Err(SfcError::shape(
                "negative_queue",
                format!("batch {:?} for dim {}", batch.shape(), self.dim),
            ));
        }
        for row in batch.data().chunks(self.dim) {
            let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
            let dst = &mut self.data[self.cursor * self.dim..(self.cursor + 1) * self.dim];
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v.f64() / n) as f32;
            }
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    pub fn as_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.capacity, self.dim],
            self.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
        .expect("queue shape")
    }
}

/// Loss value with its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub local: Option<f64>,
    pub global: Option<f64>,
    pub info_nce: Option<f64>,
    pub alpha: f64,
    /// Total number of positive pairs across the batch.
    pub positives: usize,
}

/// `−Σ(S⊙M)/ΣM` with `S` the pairwise cosine between the rows of `p1` and
/// `z2` (both `[G·G, D]`).
pub fn dense_local_loss<T: Scalar>(g: &mut Graph<T>, p1: Var, z2: Var, mask: &PositiveMask) -> Result<Var> {
    let (m, k) = (g.value(p1).shape()[0], g.value(z2).shape()[0]);
    if mask.rows() != m || mask.cols() != k {
        return Err(SfcError::shape(
            "dense_local_loss",
            format!("mask {}x{} for similarity {m}x{k}", mask.rows(), mask.cols()),
        ));
    }
    if mask.is_empty() {
        return Err(SfcError::EmptyMask);
    }
    let s = g.pairwise_cosine(p1, z2)?;
    let mean = g.masked_mean(s, &mask.weights::<T>())?;
    g.scale(mean, -T::one())
}

/// Mean over the batch of `−cos(p1_i, z2_i)`.
pub fn global_byol_loss<T: Scalar>(g: &mut Graph<T>, p1: Var, z2: Var) -> Result<Var> {
    let a = g.l2_normalize(p1)?;
    let b = g.l2_normalize(z2)?;
    let d = g.row_dot_mean(a, b)?;
    g.scale(d, -T::one())
}

/// InfoNCE on already-normalized embeddings against the queue.
pub fn info_nce<T: Scalar>(g: &mut Graph<T>, z1: Var, z2: Var, queue: &NegativeQueue, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(SfcError::Config(format!("temperature must be > 0, got {tau}")));
    }
    g.info_nce(z1, z2, &queue.as_tensor(), T::c(tau))
}

/// `local + α·global`.
pub fn joint_loss<T: Scalar>(g: &mut Graph<T>, local: Var, global: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(SfcError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let weighted = g.scale(global, T::c(alpha))?;
    g.add(local, weighted)
}

/// Dense local loss on channels-last `[G·G, D]` tensors without building a
/// trainable graph.
pub fn dense_local_loss_value(p1: &Tensor<f64>, z2: &Tensor<f64>, mask: &PositiveMask) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(p1.clone(), false);
    let b = g.leaf(z2.clone(), false);
    let l = dense_local_loss(&mut g, a, b, mask)?;
    Ok(g.value(l).item())
}

pub fn global_byol_loss_value(p1: &Tensor<f64>, z2: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(p1.clone(), false);
    let b = g.leaf(z2.clone(), false);
    let l = global_byol_loss(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn info_nce_value(z1: &Tensor<f64>, z2: &Tensor<f64>, queue: &NegativeQueue, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(z1.clone(), false);
    let b = g.leaf(z2.clone(), false);
    let l = info_nce(&mut g, a, b, queue, tau)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn queue_of(rows: &[[f32; 3]]) -> NegativeQueue {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = NegativeQueue::seeded(rows.len(), 3, &mut rng).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().map(|&v| v as f64).collect();
        q.enqueue(&t(&[rows.len(), 3], flat)).unwrap();
        q
    }

    #[test]
    fn info_nce_closed_forms() {
        let q = queue_of(&[[0., 1., 0.], [0., 0., 1.]]);
        let z = t(&[1, 3], vec![1., 0., 0.]);
        let v = info_nce_value(&z, &z, &q, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((v - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
        assert!((v - 0.55144).abs() < 1e-5);
        let v = info_nce_value(&z, &z, &q, 0.07).unwrap();
        let expect = (1.0 + 2.0 * (-1.0f64 / 0.07).exp()).ln();
        assert!((v - expect).abs() < 1e-15 && (v - 1.25e-6).abs() < 1e-8, "{v}");

        let q = queue_of(&[[0., 1., 0.], [0., -1., 0.]]);
        let z2 = t(&[1, 3], vec![0., 0., 1.]);
        let v = info_nce_value(&z, &z2, &q, 1.0).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        assert!(info_nce_value(&z, &z, &q, 0.0).is_err());
    }

    #[test]
    fn byol_fixed_points() {
        let p = t(&[2, 2], vec![1., 2., -3., 0.5]);
        assert!((global_byol_loss_value(&p, &p).unwrap() + 1.0).abs() < 1e-12);
        let z = t(&[2, 2], vec![-2., 1., 0.5, 3.]);
        assert!(global_byol_loss_value(&p, &z).unwrap().abs() < 1e-12);
        let neg = p.map(|v| -v);
        assert!((global_byol_loss_value(&p, &neg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn local_loss_fixed_points() {
        let unit = t(&[4, 3], [0.6, 0.0, 0.8].repeat(4));
        let v = dense_local_loss_value(&unit, &unit, &PositiveMask::identity(4)).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        let a = t(&[4, 3], [1.0, 0.0, 0.0].repeat(4));
        let b = t(&[4, 3], [0.0, 2.0, -1.0].repeat(4));
        let all = PositiveMask::from_bits(4, 4, vec![true; 16]).unwrap();
        assert_eq!(dense_local_loss_value(&a, &b, &all).unwrap(), 0.0);
        let empty = PositiveMask::from_bits(4, 4, vec![false; 16]).unwrap();
        assert!(matches!(dense_local_loss_value(&a, &b, &empty), Err(SfcError::EmptyMask)));
    }

    #[test]
    fn joint_degenerate_weight() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::scalar(-0.37), true);
        let gl = g.leaf(Tensor::scalar(-0.9), true);
        let j = joint_loss(&mut g, l, gl, 0.0).unwrap();
        assert_eq!(g.value(j).item(), -0.37);
        let one = g.leaf(Tensor::scalar(-1.0), false);
        let j = joint_loss(&mut g, one, one, 1.0).unwrap();
        assert_eq!(g.value(j).item(), -2.0);
        assert!(joint_loss(&mut g, one, one, -1.0).is_err());
    }

    #[test]
    fn queue_is_fifo_and_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = NegativeQueue::seeded(3, 2, &mut rng).unwrap();
        for k in 0..3 {
            let n: f32 = q.get(k).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        q.enqueue(&t(&[2, 2], vec![3., 4., 0., 2.])).unwrap();
        q.enqueue(&t(&[2, 2], vec![-1., 0., 0., -5.])).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.filled(), 3);
        // slot 0 was (3,4)/5, then overwritten by the 4th row
        assert_eq!(q.get(0), &[0.0, -1.0]);
        assert_eq!(q.get(1), &[0.0, 1.0]);
        assert_eq!(q.get(2), &[-1.0, 0.0]);
    }
}
