//! Leaky integrate-and-fire dynamics and the per-layer statistics that the
//! rate-based gradient estimator consumes.
//!
//! Membrane update (soft reset by threshold subtraction, then leak):
//!     u_{t+1} = lambda * (u_t - v_th * s_t) + I_t,   s = [u_{t+1} >= v_th]
//! Statistics recurrences, per neuron:
//!     rho_t = 1 + rho_{t-1} * lambda * (1 - v_th * sg'(u_{t-1}))
//!     g_t   = ((t-1) * g_{t-1} + sg'(u_t) * rho_t) / t
//! with rho_0 = g_0 = 0, so rho_1 = 1 falls out of the recurrence. After T
//! steps the layer exposes its average rate r = spike_sum / T, mean input
//! c = input_sum / T, and g_T, the backward multiplier of the rate pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surrogate {
    /// 1/w inside |u - v_th| <= w/2, zero outside. Width 1 yields value 1
    /// across the window, which keeps hand-computed statistics exact.
    Rectangular { width: f64 },
    /// a * sigma(a(u - v_th)) * (1 - sigma(...)); value 1 at u = v_th when
    /// the steepness is 4.
    SigmoidDerivative { steepness: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct LifConfig<F: Scalar> {
    pub lambda: F,
    pub v_th: F,
    pub surrogate: Surrogate,
}

impl<F: Scalar> LifConfig<F> {
    pub fn new(lambda: F, v_th: F, surrogate: Surrogate) -> Result<Self> {
        let l = lambda.to_f64();
        if !(l > 0.0 && l <= 1.0) {
            return Err(Error::Config(format!("leak lambda {l} outside (0, 1]")));
        }
        if v_th.to_f64() <= 0.0 {
            return Err(Error::Config(format!(
                "threshold v_th {} must be positive",
                v_th.to_f64()
            )));
        }
        match surrogate {
            Surrogate::Rectangular { width } if width <= 0.0 => {
                return Err(Error::Config(format!("surrogate width {width} must be positive")));
            }
            Surrogate::SigmoidDerivative { steepness } if steepness <= 0.0 => {
                return Err(Error::Config(format!(
                    "surrogate steepness {steepness} must be positive"
                )));
            }
            _ => {}
        }
        Ok(LifConfig {
            lambda,
            v_th,
            surrogate,
        })
    }

    /// Library defaults: lambda 0.5, v_th 1.0, rectangular width 1.
    pub fn default_rectangular() -> Self {
        LifConfig {
            lambda: F::from_f64(0.5),
            v_th: F::ONE,
            surrogate: Surrogate::Rectangular { width: 1.0 },
        }
    }

    pub fn surrogate_scalar(&self, u: F) -> F {
        let d = u.to_f64() - self.v_th.to_f64();
        match self.surrogate {
            Surrogate::Rectangular { width } => {
                if d.abs() <= width / 2.0 {
                    F::from_f64(1.0 / width)
                } else {
                    F::ZERO
                }
            }
            Surrogate::SigmoidDerivative { steepness } => {
                let s = 1.0 / (1.0 + (-steepness * d).exp());
                F::from_f64(steepness * s * (1.0 - s))
            }
        }
    }

    /// Elementwise surrogate derivative over a membrane tensor.
    pub fn surrogate_derivative(&self, u: &Tensor<F>) -> Tensor<F> {
        u.map(|v| self.surrogate_scalar(v))
    }
}

/// Per-layer neuron state: membrane potential and last-step spikes.
#[derive(Debug, Clone)]
pub struct LifState<F: Scalar> {
    pub u: Tensor<F>,
    pub s: Tensor<F>,
}

impl<F: Scalar> LifState<F> {
    /// Fresh state: u_0 = 0, s_0 = 0.
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            u: Tensor::zeros(shape),
            s: Tensor::zeros(shape),
        }
    }
}

/// One membrane step. Consumes the previous state, returns the next state;
/// `state.s` of the result is exactly the emitted spike tensor.
pub fn lif_step<F: Scalar>(
    state: LifState<F>,
    input_current: &Tensor<F>,
    cfg: &LifConfig<F>,
) -> Result<LifState<F>> {
    if state.u.shape() != input_current.shape() {
        return Err(Error::Shape(format!(
            "lif state {:?} vs input {:?}",
            state.u.shape(),
            input_current.shape()
        )));
    }
    let lambda = cfg.lambda;
    let v_th = cfg.v_th;
    let mut u_next = state.u;
    {
        let ud = u_next.data_mut();
        let sd = state.s.data();
        let id = input_current.data();
        for ((u, &s), &i) in ud.iter_mut().zip(sd).zip(id) {
            *u = lambda * (*u - v_th * s) + i;
        }
    }
    let s_next = u_next.map(|v| if v >= v_th { F::ONE } else { F::ZERO });
    Ok(LifState {
        u: u_next,
        s: s_next,
    })
}

/// Streaming per-neuron statistics across the T-step spike phase.
#[derive(Debug)]
pub struct RateStats<F: Scalar> {
    rho: Tensor<F>,
    g: Tensor<F>,
    spike_sum: Tensor<F>,
    input_sum: Tensor<F>,
    t: usize,
    total_steps: usize,
}

impl<F: Scalar> RateStats<F> {
    pub fn new(shape: &[usize], total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Contract("statistics need at least one step".into()));
        }
        Ok(RateStats {
            rho: Tensor::zeros(shape),
            g: Tensor::zeros(shape),
            spike_sum: Tensor::zeros(shape),
            input_sum: Tensor::zeros(shape),
            t: 0,
            total_steps,
        })
    }

    pub fn step(&self) -> usize {
        self.t
    }

    /// Read-only view of the current per-element scale factors (rho after
    /// `step()` updates), for inspection and verification against hand
    /// recurrences.
    pub fn rho(&self) -> &Tensor<F> {
        &self.rho
    }

    /// Advance the recurrences by one step. `u_prev` is the membrane value
    /// that produced the previous step's spikes (u_{t-1}), `u_curr` / `spikes`
    /// / `input` belong to the step just simulated. Must be called exactly
    /// once per step, in order.
    pub fn update(
        &mut self,
        u_prev: &Tensor<F>,
        u_curr: &Tensor<F>,
        spikes: &Tensor<F>,
        input: &Tensor<F>,
        cfg: &LifConfig<F>,
    ) -> Result<()> {
        if self.t >= self.total_steps {
            return Err(Error::Contract(format!(
                "statistics update at step {} past total {}",
                self.t + 1,
                self.total_steps
            )));
        }
        let shape = self.rho.shape();
        for (name, t) in [
            ("u_prev", u_prev),
            ("u_curr", u_curr),
            ("spikes", spikes),
            ("input", input),
        ] {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "statistics update: {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        let t_new = self.t + 1;
        let lambda = cfg.lambda;
        let v_th = cfg.v_th;
        let inv_t = F::ONE / F::from_usize(t_new);
        let t_prev = F::from_usize(self.t);
        let rho = self.rho.data_mut();
        let g = self.g.data_mut();
        let ss = self.spike_sum.data_mut();
        let is = self.input_sum.data_mut();
        let up = u_prev.data();
        let uc = u_curr.data();
        let sp = spikes.data();
        let inp = input.data();
        for j in 0..rho.len() {
            // rho_1 = 1 emerges from rho_0 = 0 regardless of u_0.
            let sg_prev = cfg.surrogate_scalar(up[j]);
            let r = F::ONE + rho[j] * lambda * (F::ONE - v_th * sg_prev);
            rho[j] = r;
            let sg_curr = cfg.surrogate_scalar(uc[j]);
            g[j] = (t_prev * g[j] + sg_curr * r) * inv_t;
            ss[j] += sp[j];
            is[j] += inp[j];
        }
        self.t = t_new;
        Ok(())
    }

    /// Final (rate, g_T, mean input). Callable only after exactly T updates.
    pub fn finalize(&self) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        if self.t != self.total_steps {
            return Err(Error::Contract(format!(
                "finalize after {} of {} steps",
                self.t, self.total_steps
            )));
        }
        let inv = F::ONE / F::from_usize(self.total_steps);
        Ok((
            self.spike_sum.scale(inv),
            self.g.clone(),
            self.input_sum.scale(inv),
        ))
    }
}
