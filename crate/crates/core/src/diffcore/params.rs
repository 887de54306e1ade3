use rand::Rng;

/// Flat storage for trainable parameters with a matching gradient buffer
/// and Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        ParamVector {
            values,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Reserves `n` zero-initialized slots and returns their offset.
    pub fn allocate(&mut self, n: usize) -> usize {
        let off = self.values.len();
        self.values.resize(off + n, 0.0);
        self.grad.resize(off + n, 0.0);
        self.m.resize(off + n, 0.0);
        self.v.resize(off + n, 0.0);
        off
    }

    /// Fills `values[off..off + n]` uniformly in `[-bound, bound]`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, off: usize, n: usize, bound: f64, rng: &mut R) {
        for v in &mut self.values[off..off + n] {
            *v = rng.random_range(-bound..=bound);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops optimizer state, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }
}
