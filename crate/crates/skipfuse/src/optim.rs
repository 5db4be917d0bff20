//! First-order optimizers over shared parameter handles.

use crate::error::Result;
use crate::tape::Param;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(crate::error::Error::Config(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }
}

enum State<E> {
    Sgd { velocity: Vec<Vec<E>> },
    Adam { m: Vec<Vec<E>>, v: Vec<Vec<E>>, t: u64 },
}

/// Gradient descent with momentum by default; Adam behind a flag.
pub struct Optimizer<E: Element> {
    pub lr: f64,
    pub momentum: f64,
    state: State<E>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => State::Sgd { velocity: Vec::new() },
            OptimizerKind::Adam => State::Adam {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
        };
        Self {
            lr,
            momentum: 0.9,
            state,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// Applies one update from each parameter's accumulated gradient;
    /// parameters with no gradient this step are skipped. The caller zeroes
    /// gradients afterwards. Slot i of the lazily-created state belongs to
    /// params[i], so the parameter list must be stable across steps.
    pub fn step(&mut self, params: &[Param<E>]) -> Result<()> {
        match &mut self.state {
            State::Sgd { velocity } => {
                velocity.resize_with(params.len(), Vec::new);
                for (p, vel) in params.iter().zip(velocity.iter_mut()) {
                    let Some(grad) = p.grad() else { continue };
                    if vel.len() != grad.len() {
                        *vel = vec![E::zero(); grad.len()];
                    }
                    let mu = E::from_real(self.momentum);
                    let lr = E::from_real(self.lr);
                    for i in 0..grad.len() {
                        vel[i] = mu * vel[i] + grad[i];
                    }
                    p.update(|data| {
                        for (x, &v) in data.iter_mut().zip(vel.iter()) {
                            *x = *x - lr * v;
                        }
                    });
                }
            }
            State::Adam { m, v, t } => {
                m.resize_with(params.len(), Vec::new);
                v.resize_with(params.len(), Vec::new);
                *t += 1;
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
                let bias1 = 1.0 - b1.powi(*t as i32);
                let bias2 = 1.0 - b2.powi(*t as i32);
                for (p, (ms, vs)) in params.iter().zip(m.iter_mut().zip(v.iter_mut())) {
                    let Some(grad) = p.grad() else { continue };
                    if ms.len() != grad.len() {
                        *ms = vec![E::zero(); grad.len()];
                        *vs = vec![E::zero(); grad.len()];
                    }
                    let mut delta = vec![E::zero(); grad.len()];
                    for i in 0..grad.len() {
                        let g = grad[i].to_real();
                        let m_new = b1 * ms[i].to_real() + (1.0 - b1) * g;
                        let v_new = b2 * vs[i].to_real() + (1.0 - b2) * g * g;
                        ms[i] = E::from_real(m_new);
                        vs[i] = E::from_real(v_new);
                        let m_hat = m_new / bias1;
                        let v_hat = v_new / bias2;
                        delta[i] = E::from_real(-self.lr * m_hat / (v_hat.sqrt() + eps));
                    }
                    p.update(|data| {
                        for (x, &d) in data.iter_mut().zip(delta.iter()) {
                            *x = *x + d;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
