use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn for_params(params: &[&Tensor<T>]) -> Self {
        Self {
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update.
///
/// Parameters without a gradient (`None`) are left untouched, including their
/// decay. Weight decay is decoupled: `p <- p * (1 - lr * decay) - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    names: &[String],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    config: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(TensorError::Shape {
            op: "adamw_step",
            shapes: vec![vec![params.len()], vec![grads.len()], vec![state.first.len()]],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() || state.first[i].shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "adamw_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(TensorError::NonFiniteGradient(name));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = T::lit(1.0 - b1.powi(t));
    let bc2 = T::lit(1.0 - b2.powi(t));
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let eps = T::lit(config.eps);
    let lr_t = T::lit(lr);
    let shrink = T::lit(1.0 - lr * config.weight_decay);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &gw), mw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mw = b1 * *mw + (T::one() - b1) * gw;
            *vw = b2 * *vw + (T::one() - b2) * gw * gw;
            let m_hat = *mw / bc1;
            let v_hat = *vw / bc2;
            *w = *w * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Convenience wrapper owning hyperparameters and state.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[&Tensor<T>]) -> Self {
        Self { config, state: OptimizerState::for_params(params) }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        names: &[String],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        adamw_step(params, names, grads, &mut self.state, &self.config, lr)
    }
}

/// Linear warmup followed by cosine annealing to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, warmup_epochs: 10, total_epochs: 60, min_lr: 1e-5 }
    }
}

pub fn lr_at(epoch: usize, schedule: &LrSchedule) -> Result<f64> {
    let LrSchedule { base_lr, warmup_epochs, total_epochs, min_lr } = *schedule;
    if warmup_epochs >= total_epochs {
        return Err(TensorError::Schedule(format!(
            "warmup ({warmup_epochs}) must be shorter than the run ({total_epochs})"
        )));
    }
    if epoch >= total_epochs {
        return Err(TensorError::EpochOutOfRange { epoch, total: total_epochs });
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * (epoch + 1) as f64 / warmup_epochs as f64);
    }
    let t = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
    Ok(min_lr + (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}
