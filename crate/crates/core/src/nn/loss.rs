use serde::{Deserialize, Serialize};

use super::layers::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Training objectives. All are averaged over the batch.
///
/// * `CrossEntropy`: softmax over `K` logits; targets `[B]` hold class indices.
/// * `BinaryCrossEntropy`: independent sigmoid per output; targets `[B, K]`
///   in `{0, 1}`; also averaged over the `K` outputs.
/// * `SquaredError`: `sum_k (y_k - t_k)^2` per sample; targets `[B, K]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    BinaryCrossEntropy,
    SquaredError,
}

impl Loss {
    fn check(&self, outputs: &[usize], targets: &[usize]) -> Result<()> {
        let ok = match self {
            Loss::CrossEntropy => outputs.len() == 2 && targets == [outputs[0]],
            _ => outputs == targets,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{self:?} targets {targets:?} incompatible with outputs {outputs:?}"
            )))
        }
    }

    fn check_labels(&self, outputs: &Tensor, targets: &Tensor) -> Result<()> {
        if *self != Loss::CrossEntropy {
            return Ok(());
        }
        let k = outputs.shape()[1];
        match targets
            .data()
            .iter()
            .find(|&&t| t < 0.0 || t.fract() != 0.0 || t as usize >= k)
        {
            Some(t) => Err(Error::Range(format!("class label {t} with {k} logits"))),
            None => Ok(()),
        }
    }

    /// Batch-mean loss and its gradient with respect to `outputs`.
    pub fn value_and_grad(&self, outputs: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
        self.check(outputs.shape(), targets.shape())?;
        self.check_labels(outputs, targets)?;
        let (b, k) = (outputs.shape()[0], outputs.shape()[1]);
        let mut grad = vec![0.0f32; b * k];
        let value = self.eval_into(outputs.data(), targets.data(), b, k, Some(&mut grad));
        Ok((value, Tensor::new(vec![b, k], grad)?))
    }

    pub fn value(&self, outputs: &Tensor, targets: &Tensor) -> Result<f64> {
        self.check(outputs.shape(), targets.shape())?;
        self.check_labels(outputs, targets)?;
        let (b, k) = (outputs.shape()[0], outputs.shape()[1]);
        Ok(self.eval_into(outputs.data(), targets.data(), b, k, None::<&mut [f32]>))
    }

    pub(crate) fn eval_into<T: Scalar>(
        &self,
        y: &[T],
        t: &[f32],
        b: usize,
        k: usize,
        mut grad: Option<&mut [T]>,
    ) -> f64 {
        let inv_b = T::one() / T::from_f32(b as f32);
        let mut total = 0.0f64;
        for s in 0..b {
            let row = &y[s * k..(s + 1) * k];
            match self {
                Loss::CrossEntropy => {
                    let label = t[s] as usize;
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for &v in row {
                        z += (v - m).exp();
                    }
                    let lse = m + z.ln();
                    total += (lse - row[label]).to_f64();
                    if let Some(g) = grad.as_deref_mut() {
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - lse).exp();
                            let onehot = if j == label { T::one() } else { T::zero() };
                            g[s * k + j] = (p - onehot) * inv_b;
                        }
                    }
                }
                Loss::BinaryCrossEntropy => {
                    let inv_k = T::one() / T::from_f32(k as f32);
                    let mut row_loss = T::zero();
                    for (j, &z) in row.iter().enumerate() {
                        let tj = T::from_f32(t[s * k + j]);
                        row_loss += z.max(T::zero()) - z * tj + (-z.abs()).exp().ln_1p();
                        if let Some(g) = grad.as_deref_mut() {
                            let sig = T::one() / (T::one() + (-z).exp());
                            g[s * k + j] = (sig - tj) * inv_b * inv_k;
                        }
                    }
                    total += (row_loss * inv_k).to_f64();
                }
                Loss::SquaredError => {
                    for (j, &v) in row.iter().enumerate() {
                        let d = v - T::from_f32(t[s * k + j]);
                        total += (d * d).to_f64();
                        if let Some(g) = grad.as_deref_mut() {
                            g[s * k + j] = (d + d) * inv_b;
                        }
                    }
                }
            }
        }
        total / b as f64
    }
}
