use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;

/// Adamax moments for every parameter tensor, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl AdamaxState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Zero moments shaped like the parameters of `params`.
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(vec![0.0; t.len()]));
        AdamaxState {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            t: 0,
            u: m.clone(),
            m,
        }
    }
}

/// One Adamax update of a single tensor at step `t` (already incremented).
#[allow(clippy::too_many_arguments)]
pub fn adamax_update(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    u: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let step = lr / (1.0 - beta1.powi(t as i32));
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        u[i] = (beta2 * u[i]).max(g[i].abs());
        theta[i] -= step * m[i] / (u[i] + eps);
    }
}

/// Applies one Adamax step to every parameter using its accumulated
/// gradient; tensors without a gradient are updated with a zero gradient.
pub fn adamax_step<P: Parameters + ?Sized>(
    params: &mut P,
    state: &mut AdamaxState,
    lr: f64,
) -> Result<()> {
    let mut count = 0;
    let mut mismatch = None;
    params.visit("", &mut |name, t| {
        let ok = state.m.get(count).is_some_and(|m| m.len() == t.len());
        if !ok && mismatch.is_none() {
            mismatch = Some((name.trim_start_matches('.').to_string(), t.shape().to_vec()));
        }
        count += 1;
    });
    if let Some((name, shape)) = mismatch {
        return Err(Error::Config(format!(
            "optimizer state does not match parameter {name} {shape:?}"
        )));
    }
    if count != state.m.len() {
        return Err(Error::Config(format!(
            "optimizer state holds {} tensors, model has {count}",
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut i = 0;
    params.visit_mut("", &mut |_, tensor| {
        let (m, u) = (&mut state.m[i], &mut state.u[i]);
        let (theta, grad) = tensor.data_and_grad_mut();
        match grad {
            Some(g) => adamax_update(theta, g, m, u, t, lr, b1, b2, eps),
            None => {
                let zeros = vec![0.0; theta.len()];
                adamax_update(theta, &zeros, m, u, t, lr, b1, b2, eps)
            }
        }
        i += 1;
    });
    Ok(())
}

/// How the rate behaves after the peak phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DecayMode {
    /// Multiply once by `decay_factor` and hold.
    #[default]
    Once,
    /// Multiply by `decay_factor` again every epoch.
    PerEpoch,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $name,)*
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        s
                    ))),
                }
            }
        }
    };
}

named_enum!(DecayMode { Once => "once", PerEpoch => "per_epoch" });
named_enum!(ClipMode { GlobalNorm => "global_norm", Value => "value" });

/// Warm-up, peak and decay phases of the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    /// Epochs `1..=warmup_epochs` use the base rate.
    pub warmup_epochs: usize,
    /// Epochs up to and including this one use `peak_factor * base`.
    pub peak_until: usize,
    pub peak_factor: f64,
    pub decay_factor: f64,
    pub decay: DecayMode,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_epochs: 2,
            peak_until: 10,
            peak_factor: 2.0,
            decay_factor: 0.25,
            decay: DecayMode::Once,
        }
    }
}

/// Learning rate of a 1-based `epoch`.
pub fn lr_schedule(epoch: usize, base_lr: f64, s: &LrSchedule) -> f64 {
    if epoch <= s.warmup_epochs {
        base_lr
    } else if epoch <= s.peak_until {
        base_lr * s.peak_factor
    } else {
        let peak = base_lr * s.peak_factor;
        match s.decay {
            DecayMode::Once => peak * s.decay_factor,
            DecayMode::PerEpoch => peak * s.decay_factor.powi((epoch - s.peak_until) as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ClipMode {
    /// Rescale all gradients together when their joint L2 norm exceeds the
    /// threshold.
    #[default]
    GlobalNorm,
    /// Clamp every entry to `[-threshold, threshold]`.
    Value,
}

/// Joint L2 norm of several gradient buffers.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Clips gradient buffers in place; returns the norm before clipping.
pub fn clip_slices(grads: &mut [&mut [f64]], threshold: f64, mode: ClipMode) -> f64 {
    let norm = global_norm(grads.iter().map(|g| &**g));
    match mode {
        ClipMode::GlobalNorm => {
            if norm > threshold {
                let scale = threshold / norm;
                grads
                    .iter_mut()
                    .for_each(|g| g.iter_mut().for_each(|x| *x *= scale));
            }
        }
        ClipMode::Value => grads.iter_mut().for_each(|g| {
            g.iter_mut()
                .for_each(|x| *x = x.clamp(-threshold, threshold))
        }),
    }
    norm
}

/// Clips the accumulated gradients of `params`; returns the pre-clip norm.
pub fn clip_gradients<P: Parameters + ?Sized>(
    params: &mut P,
    threshold: f64,
    mode: ClipMode,
) -> f64 {
    let mut sq = 0.0;
    params.visit("", &mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    params.visit_mut("", &mut |_, t| {
        if let Some(g) = t.grad_mut() {
            let mut slices = [g];
            match mode {
                ClipMode::GlobalNorm if norm > threshold => {
                    slices[0].iter_mut().for_each(|x| *x *= threshold / norm)
                }
                ClipMode::GlobalNorm => {}
                ClipMode::Value => {
                    clip_slices(&mut slices, threshold, ClipMode::Value);
                }
            }
        }
    });
    norm
}
