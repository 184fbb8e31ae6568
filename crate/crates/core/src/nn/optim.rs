use super::params::ParameterSet;
use crate::error::{Error, Result};

/// SGD momentum buffers plus coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: ParameterSet,
    pub mu: f32,
    pub weight_decay: f32,
}

impl OptimizerState {
    /// Zero buffers shaped like `params`.
    pub fn new(params: &ParameterSet, mu: f32, weight_decay: f32) -> Self {
        Self {
            momentum: params.zeros_like(),
            mu,
            weight_decay,
        }
    }

    pub fn bit_eq(&self, other: &OptimizerState) -> bool {
        self.mu.to_bits() == other.mu.to_bits()
            && self.weight_decay.to_bits() == other.weight_decay.to_bits()
            && self.momentum.bit_eq(&other.momentum)
    }
}

/// `v <- mu*v + g + wd*w; w <- w - lr*v`, elementwise, in place.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    opt: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&opt.momentum) {
        return Err(Error::Shape(
            "parameters, gradients and momentum buffers differ in layout".into(),
        ));
    }
    let (mu, wd) = (opt.mu, opt.weight_decay);
    for (((_, w), (_, g)), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(opt.momentum.iter_mut())
    {
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(w: f32) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("g/0/weight", Tensor::from_vec(vec![w]));
        p
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = single(0.7);
        let g = single(3.0);
        let mut opt = OptimizerState::new(&p, 0.9, 5e-4);
        sgd_step(&mut p, &g, &mut opt, 0.0).unwrap();
        assert_eq!(p.get("g/0/weight").unwrap().data(), &[0.7]);
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut p = single(1.0);
        let g = single(0.5);
        let mut opt = OptimizerState::new(&p, 0.0, 0.0);
        sgd_step(&mut p, &g, &mut opt, 0.1).unwrap();
        assert!((p.get("g/0/weight").unwrap().data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = single(0.0);
        let g = single(1.0);
        let mut opt = OptimizerState::new(&p, 0.9, 0.0);
        sgd_step(&mut p, &g, &mut opt, 1.0).unwrap();
        assert_eq!(p.get("g/0/weight").unwrap().data()[0], -1.0);
        sgd_step(&mut p, &g, &mut opt, 1.0).unwrap();
        assert!((p.get("g/0/weight").unwrap().data()[0] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let mut p = single(0.0);
        let mut g = single(1.0);
        g.insert("g/0/bias", Tensor::from_vec(vec![0.0]));
        let mut opt = OptimizerState::new(&p, 0.9, 0.0);
        assert!(matches!(
            sgd_step(&mut p, &g, &mut opt, 1.0),
            Err(Error::Shape(_))
        ));
    }
}
