//! Rectified flow: straight-line interpolation `x_t = t x + (1 - t) z` with
//! `t = 1` at the data end, velocity target `x - z`, and an explicit Euler sampler.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{Conditioning, MimDit};
use crate::error::{MimError, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x_t: Tensor,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 40 }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MimError::Parameter(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn interpolate(x: &Tensor, z: &Tensor, t: f64) -> Result<FlowState> {
    check_time(t)?;
    if x.shape() != z.shape() {
        return Err(MimError::dim(
            "interpolate",
            format!("{:?} vs {:?}", x.shape(), z.shape()),
        ));
    }
    let data = x.data().iter().zip(z.data()).map(|(a, b)| t * a + (1.0 - t) * b).collect();
    Ok(FlowState {
        x_t: Tensor::new(x.shape().to_vec(), data)?,
        t,
    })
}

/// A network that predicts velocity inside a graph.
pub trait VelocityModel {
    fn velocity(&self, s: &mut Session, z_lq: Var, x_t: Var, t: f64) -> Result<Var>;
}

impl VelocityModel for MimDit {
    fn velocity(&self, s: &mut Session, z_lq: Var, x_t: Var, t: f64) -> Result<Var> {
        self.forward(s, z_lq, x_t, t, Conditioning::Enabled, None)
    }
}

/// Mean squared error between the predicted velocity at `x_t` and `x - z`.
pub fn flow_loss<M: VelocityModel + ?Sized>(
    s: &mut Session,
    model: &M,
    x: &Tensor,
    z_lq: &Tensor,
    z: &Tensor,
    t: f64,
) -> Result<Var> {
    let state = interpolate(x, z, t)?;
    let target: Vec<f64> = x.data().iter().zip(z.data()).map(|(a, b)| a - b).collect();
    let target = s.constant(Tensor::new(x.shape().to_vec(), target)?);
    let lq = s.constant(z_lq.clone());
    let xt = s.constant(state.x_t);
    let v = model.velocity(s, lq, xt, t)?;
    let diff = s.graph.sub(v, target)?;
    let sq = s.graph.mul(diff, diff)?;
    Ok(s.graph.mean(sq))
}

/// Velocity evaluated outside any graph.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor>;
}

/// A trained model with frozen parameters and a fixed degraded latent.
pub struct ConditionedField<'a, M: VelocityModel + ?Sized> {
    pub model: &'a M,
    pub store: &'a ParamStore,
    pub z_lq: &'a Tensor,
}

impl<M: VelocityModel + ?Sized> VelocityField for ConditionedField<'_, M> {
    fn velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        let mut s = Session::inference(self.store);
        let lq = s.constant(self.z_lq.clone());
        let xt = s.constant(x_t.clone());
        let v = self.model.velocity(&mut s, lq, xt, t)?;
        Ok(s.graph.value(v).clone())
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 0` (noise `z`) to `t = 1` in `steps` uniform Euler steps.
pub fn euler_sample<F: VelocityField + ?Sized>(field: &F, z: &Tensor, cfg: &SamplerConfig) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(MimError::Parameter("sampler needs at least one step".into()));
    }
    let dt = 1.0 / cfg.steps as f64;
    let mut x = z.clone();
    for i in 0..cfg.steps {
        let t = i as f64 * dt;
        let v = field.velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(MimError::dim(
                "euler_sample",
                format!("velocity {:?} for state {:?}", v.shape(), x.shape()),
            ));
        }
        x.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += dt * b);
        if !x.is_finite() {
            return Err(MimError::Numerical {
                step: i,
                detail: "non-finite sampler state".into(),
            });
        }
    }
    Ok(x)
}
