//! Dense networks with hand-written reverse-mode gradients and Adam.
//!
//! Parameters of every network in a model live in one flat [`ParamVector`];
//! an [`Mlp`] only records its layer sizes and offset into that vector.
//! Networks operate on row batches: an input is `rows x in_dim`.

mod adam;
pub mod checkpoint;
mod mlp;
mod params;

pub use adam::{adam_step, AdamConfig, StepStatus};
pub use mlp::{Mlp, MlpTape};
pub use params::ParamVector;

/// `max(x, 0) + ln(1 + exp(-|x|))`, exact for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(-30.0) - (-30f64).exp()).abs() < 1e-25);
        for &x in &[-5.0, -0.3, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-9);
        }
    }
}
