//! FIFO memory banks of momentum keys and the optional queue of past
//! probability columns.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::probability::check_unit_columns;
use crate::sampling::random_unit_columns;

/// Circular `d × K` buffer of key features. The column at `cursor` is the
/// oldest; writes advance the cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Mat,
    cursor: usize,
}

impl MemoryBank {
    /// Bank filled with seeded random unit columns.
    pub fn random<R: Rng + ?Sized>(d: usize, capacity: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || capacity == 0 {
            return Err(Error::param(
                "bank",
                format!("need d > 0 and K > 0, got {d}x{capacity}"),
            ));
        }
        Ok(Self {
            features: random_unit_columns(rng, d, capacity),
            cursor: 0,
        })
    }

    pub fn from_parts(features: Mat, cursor: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if cursor >= features.cols() {
            return Err(Error::param(
                "bank cursor",
                format!("{cursor} out of range for capacity {}", features.cols()),
            ));
        }
        check_unit_columns(&features)?;
        Ok(Self { features, cursor })
    }

    pub fn capacity(&self) -> usize {
        self.features.cols()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    /// Storage-order snapshot; this is the order of the negative rows.
    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Columns from oldest to newest.
    pub fn ordered(&self) -> Mat {
        let k = self.capacity();
        let order: Vec<usize> = (0..k).map(|i| (self.cursor + i) % k).collect();
        self.features.select_cols(&order)
    }

    /// Replaces the `N` oldest columns with `keys` in arrival order.
    pub fn enqueue_dequeue(&mut self, keys: &Mat) -> Result<()> {
        let (d, n) = keys.shape();
        if d != self.dim() {
            return Err(Error::shape(
                format!("keys with {} rows", self.dim()),
                format!("{d}"),
            ));
        }
        if n > self.capacity() {
            return Err(Error::BatchExceedsBank {
                batch: n,
                capacity: self.capacity(),
            });
        }
        check_unit_columns(keys)?;
        let k = self.capacity();
        for j in 0..n {
            self.features.set_col((self.cursor + j) % k, &keys.col(j));
        }
        self.cursor = (self.cursor + n) % k;
        Ok(())
    }

    /// `[key | bank]`, `d × (K+1)`.
    pub fn assemble_peers(&self, current_key: &[f64]) -> Result<PeerAssembly> {
        let key = Mat::from_vec(current_key.len(), 1, current_key.to_vec())?;
        check_unit_columns(&key)?;
        Ok(PeerAssembly {
            m: key.hcat(&self.features)?,
        })
    }
}

/// Peers of one query: its own momentum key in column 0, then the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerAssembly {
    pub m: Mat,
}

/// Ring buffer of past probability columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbQueue {
    rows: usize,
    capacity: usize,
    columns: VecDeque<Vec<f64>>,
}

impl ProbQueue {
    pub fn new(rows: usize, capacity: usize) -> Self {
        Self {
            rows,
            capacity,
            columns: VecDeque::with_capacity(capacity),
        }
    }

    /// Rebuilds a queue from a `rows × len` matrix (oldest column first).
    pub fn from_mat(m: &Mat, capacity: usize) -> Result<Self> {
        if m.cols() > capacity {
            return Err(Error::param(
                "prob queue",
                format!("{} columns exceed capacity {capacity}", m.cols()),
            ));
        }
        Ok(Self {
            rows: m.rows(),
            capacity,
            columns: (0..m.cols()).map(|c| m.col(c)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Stored columns as a `rows × len` matrix, oldest first.
    pub fn to_mat(&self) -> Mat {
        let mut m = Mat::zeros(self.rows, self.columns.len());
        for (j, col) in self.columns.iter().enumerate() {
            m.set_col(j, col);
        }
        m
    }

    /// Pushes every column of `p`, evicting the oldest beyond capacity.
    pub fn absorb(&mut self, p: &Mat) -> Result<()> {
        if p.rows() != self.rows {
            return Err(Error::shape(
                format!("{} rows", self.rows),
                format!("{}", p.rows()),
            ));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for c in 0..p.cols() {
            if self.columns.len() == self.capacity {
                self.columns.pop_front();
            }
            self.columns.push_back(p.col(c));
        }
        Ok(())
    }
}

/// Appends the queued columns to `p` so the pseudo-label solve sees an
/// effective batch of `N + len` columns. Returns the extended matrix and the
/// width `N` of the current span (the first `N` columns).
pub fn extend_marginals(p: &Mat, queue: &ProbQueue) -> Result<(Mat, usize)> {
    if queue.rows() != p.rows() {
        return Err(Error::shape(
            format!("queue with {} rows", p.rows()),
            format!("{}", queue.rows()),
        ));
    }
    if queue.is_empty() {
        return Ok((p.clone(), p.cols()));
    }
    Ok((p.hcat(&queue.to_mat())?, p.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::sinkhorn_labels;
    use crate::sampling::random_prob;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(d: usize, i: usize) -> Vec<f64> {
        (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    fn bank_of(cols: &[usize], d: usize) -> MemoryBank {
        let m = Mat::from_columns(&cols.iter().map(|&i| basis(d, i)).collect::<Vec<_>>()).unwrap();
        MemoryBank::from_parts(m, 0).unwrap()
    }

    #[test]
    fn fifo_example() {
        let d = 6;
        let mut bank = bank_of(&[0, 1, 2, 3], d);
        let keys = Mat::from_columns(&[basis(d, 4), basis(d, 5)]).unwrap();
        bank.enqueue_dequeue(&keys).unwrap();
        assert_eq!(bank.ordered(), bank_of(&[2, 3, 4, 5], d).features().clone());
        assert_eq!(bank.capacity(), 4);
    }

    #[test]
    fn full_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = MemoryBank::random(3, 5, &mut rng).unwrap();
        let keys = random_unit_columns(&mut rng, 3, 5);
        bank.enqueue_dequeue(&keys).unwrap();
        assert_eq!(bank.ordered(), keys);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = MemoryBank::random(3, 2, &mut rng).unwrap();
        let keys = random_unit_columns(&mut rng, 3, 3);
        assert!(matches!(
            bank.enqueue_dequeue(&keys),
            Err(Error::BatchExceedsBank {
                batch: 3,
                capacity: 2
            })
        ));
        assert!(bank.enqueue_dequeue(&Mat::filled(3, 1, 1.0)).is_err());
    }

    #[test]
    fn init_columns_flushed_after_enough_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, n) = (10, 3);
        let mut bank = MemoryBank::random(4, k, &mut rng).unwrap();
        let init = bank.features().clone();
        for _ in 0..k.div_ceil(n) {
            bank.enqueue_dequeue(&random_unit_columns(&mut rng, 4, n))
                .unwrap();
        }
        for c in 0..k {
            let col = bank.features().col(c);
            assert!((0..k).all(|j| init.col(j) != col));
        }
    }

    #[test]
    fn peers_put_key_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = MemoryBank::random(3, 4, &mut rng).unwrap();
        let key = random_unit_columns(&mut rng, 3, 1).col(0);
        let a = bank.assemble_peers(&key).unwrap();
        let b = bank.assemble_peers(&key).unwrap();
        assert_eq!(a.m.shape(), (3, 5));
        assert_eq!(a.m.col(0), key);
        assert_eq!(a.m.col_range(1, 5), b.m.col_range(1, 5));
        assert_eq!(a.m.col_range(1, 5), *bank.features());
    }

    #[test]
    fn queue_is_bounded_fifo() {
        let mut q = ProbQueue::new(2, 3);
        let p = Mat::from_columns(&[vec![0.1, 0.9], vec![0.2, 0.8]]).unwrap();
        q.absorb(&p).unwrap();
        q.absorb(&Mat::from_columns(&[vec![0.3, 0.7], vec![0.4, 0.6]]).unwrap())
            .unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.to_mat().row(0), &[0.2, 0.3, 0.4]);
        assert!(q.absorb(&Mat::filled(3, 1, 1.0 / 3.0)).is_err());
    }

    #[test]
    fn empty_queue_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_prob(&mut rng, 4, 3, 1.0);
        let (ext, n) = extend_marginals(&p, &ProbQueue::new(4, 0)).unwrap();
        assert_eq!(ext, p);
        assert_eq!(n, 3);
    }

    #[test]
    fn queue_copy_of_uniform_p_keeps_labels() {
        let p = Mat::from_fn(4, 3, |r, _| if r == 0 { 0.4 } else { 0.2 });
        let mut q = ProbQueue::new(4, 3);
        q.absorb(&p).unwrap();
        let (ext, n) = extend_marginals(&p, &q).unwrap();
        let with_queue = sinkhorn_labels(&ext, 0.9, 2.0, 3)
            .unwrap()
            .truncate_columns(n);
        let plain = sinkhorn_labels(&p, 0.9, 2.0, 3).unwrap();
        assert!(with_queue.y().sub(plain.y()).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn extended_labels_keep_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_prob(&mut rng, 5, 4, 1.0);
        let mut q = ProbQueue::new(5, 2);
        q.absorb(&random_prob(&mut rng, 5, 2, 1.0)).unwrap();
        let (ext, n) = extend_marginals(&p, &q).unwrap();
        assert_eq!(ext.cols(), 6);
        let labels = sinkhorn_labels(&ext, 0.9, 2.0, 3)
            .unwrap()
            .truncate_columns(n);
        for s in labels.y().col_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(extend_marginals(&p, &ProbQueue::new(4, 2)).is_err());
    }
}
