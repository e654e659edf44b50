//! Flat views over structured parameter sets.
//!
//! Gradients use the same types as the parameters they belong to, so the
//! optimizer, clipping and checkpointing all work through [`Parameters`].

/// A named, shaped view into one parameter array.
#[derive(Debug, Clone)]
pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait Parameters {
    /// All arrays in a fixed declaration order.
    fn tensors(&self) -> Vec<Tensor<'_>>;

    /// Mutable arrays in the same order as [`Parameters::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    /// Overwrites every parameter from `flat`. Panics if the length differs.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other`; both must share one layout.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.flatten();
        let mut offset = 0;
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v += scale * src[offset];
                offset += 1;
            }
        }
        assert_eq!(offset, src.len(), "parameter layout mismatch");
    }

    fn zeroed(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
