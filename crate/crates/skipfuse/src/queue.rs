//! Fixed-capacity FIFO embedding queue (the MoCo-style memory bank).

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Ring buffer of `width`-dimensional embedding rows with strictly FIFO
/// eviction. Callers push unit-norm rows only.
pub struct MemoryQueue<E: Element> {
    capacity: usize,
    width: usize,
    storage: Vec<E>,
    cursor: usize,
    filled: usize,
}

impl<E: Element> MemoryQueue<E> {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::Config("queue capacity and width must be positive".into()));
        }
        Ok(Self {
            capacity,
            width,
            storage: vec![E::zero(); capacity * width],
            cursor: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Appends the rows of a `[n, width]` tensor, evicting the oldest rows
    /// once capacity is exceeded.
    pub fn push(&mut self, rows: &Tensor<E>) -> Result<()> {
        if rows.shape().len() != 2 || rows.cols() != self.width {
            return Err(Error::Contract(format!(
                "queue expects [n, {}] rows, got {:?}",
                self.width,
                rows.shape()
            )));
        }
        for r in 0..rows.shape()[0] {
            let dst = self.cursor * self.width;
            self.storage[dst..dst + self.width].copy_from_slice(rows.row(r));
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Current contents as a `[len, width]` tensor, oldest row first.
    /// `None` while empty.
    pub fn contents(&self) -> Option<Tensor<E>> {
        if self.filled == 0 {
            return None;
        }
        let start = if self.filled < self.capacity {
            0
        } else {
            self.cursor
        };
        let mut data = Vec::with_capacity(self.filled * self.width);
        for i in 0..self.filled {
            let idx = (start + i) % self.capacity;
            data.extend_from_slice(&self.storage[idx * self.width..(idx + 1) * self.width]);
        }
        Some(Tensor::new(vec![self.filled, self.width], data).expect("queue shape"))
    }
}
