//! Uniform access to trainable parameter blocks.
//!
//! Gradients are stored in values of the same type as the parameters they belong to,
//! so one trait serves the optimizer, the gradient checker and checkpointing.

/// A value made of named, flat `f64` blocks with a stable order.
pub trait Params {
    fn blocks(&self) -> Vec<(&'static str, &[f64])>;

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, b) in self.blocks_mut() {
            b.fill(0.0);
        }
    }

    /// `self += other`, block by block. Both sides must have identical layouts.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.blocks();
        for ((_, dst), (_, s)) in self.blocks_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, b) in self.blocks_mut() {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}
