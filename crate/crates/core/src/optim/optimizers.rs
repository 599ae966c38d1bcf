//! First-order update rules and step grafting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseOptimizer {
    Sgd,
    Adam,
    Rmsprop,
}

/// Norm granularity used when grafting step magnitudes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraftNorm {
    #[default]
    Global,
    Layerwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
    /// Step length from `magnitude`, step direction from `direction`.
    Grafted {
        magnitude: BaseOptimizer,
        direction: BaseOptimizer,
        #[serde(default)]
        norm: GraftNorm,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_rms_decay() -> f64 {
    0.99
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchConfig {
    /// Number of epochs trained before switching.
    pub epoch: usize,
    pub to: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_rms_decay")]
    pub rms_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<Box<SwitchConfig>>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerConfig {
            kind,
            learning_rate,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            rms_decay: default_rms_decay(),
            switch: None,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self::new(OptimizerKind::Rmsprop, lr)
    }

    pub fn with_momentum(mut self, m: f64) -> Self {
        self.momentum = m;
        self
    }

    pub fn switching_to(mut self, epoch: usize, to: OptimizerConfig) -> Self {
        self.switch = Some(Box::new(SwitchConfig { epoch, to }));
        self
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it is the identity-training control.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        for b in [self.beta1, self.beta2, self.rms_decay] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config("betas and decay must lie in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if let Some(sw) = &self.switch {
            sw.to.validate()?;
            if sw.to.switch.is_some() {
                return Err(Error::config("nested optimizer switches are not supported"));
            }
        }
        Ok(())
    }

    /// Short label such as `adam(0.003)` for tables and file names.
    pub fn label(&self) -> String {
        let base = match self.kind {
            OptimizerKind::Sgd => "sgd".to_string(),
            OptimizerKind::Adam => "adam".to_string(),
            OptimizerKind::Rmsprop => "rmsprop".to_string(),
            OptimizerKind::Grafted { magnitude, direction, .. } => {
                format!("graft[{magnitude:?}>{direction:?}]").to_lowercase()
            }
        };
        let mut s = format!("{base}({})", self.learning_rate);
        if let Some(sw) = &self.switch {
            s.push_str(&format!("@{}->{}", sw.epoch, sw.to.label()));
        }
        s
    }
}

/// Heavy-ball momentum: `v ← μv + g`, `Δ = −lr·v`.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<f64>,
}

/// Adam with bias correction: `Δ = −lr·m̂/(√v̂ + ε)`.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// RMSProp: `s ← ρs + (1−ρ)g²`, `Δ = −lr·g/(√s + ε)`.
#[derive(Clone, Debug, Default)]
pub struct RmspropState {
    sq: Vec<f64>,
}

fn ensure(buf: &mut Vec<f64>, n: usize) {
    if buf.len() != n {
        *buf = vec![0.0; n];
    }
}

impl SgdState {
    pub fn delta(&mut self, cfg: &OptimizerConfig, g: &[f64]) -> Vec<f64> {
        ensure(&mut self.velocity, g.len());
        self.velocity
            .iter_mut()
            .zip(g)
            .map(|(v, &gi)| {
                *v = cfg.momentum * *v + gi;
                -cfg.learning_rate * *v
            })
            .collect()
    }
}

impl AdamState {
    pub fn delta(&mut self, cfg: &OptimizerConfig, g: &[f64]) -> Vec<f64> {
        ensure(&mut self.m, g.len());
        ensure(&mut self.v, g.len());
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        (0..g.len())
            .map(|i| {
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                -cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon)
            })
            .collect()
    }
}

impl RmspropState {
    pub fn delta(&mut self, cfg: &OptimizerConfig, g: &[f64]) -> Vec<f64> {
        ensure(&mut self.sq, g.len());
        self.sq
            .iter_mut()
            .zip(g)
            .map(|(s, &gi)| {
                *s = cfg.rms_decay * *s + (1.0 - cfg.rms_decay) * gi * gi;
                -cfg.learning_rate * gi / (s.sqrt() + cfg.epsilon)
            })
            .collect()
    }
}

fn apply(theta: &ParameterVector, g: &ParameterVector, delta: Vec<f64>) -> Result<ParameterVector> {
    if !theta.same_layout(g) {
        return Err(Error::LayoutMismatch);
    }
    let d = ParameterVector::new(delta, theta.layout().clone())?;
    theta.add(&d)
}

pub fn step_sgd(state: &mut SgdState, cfg: &OptimizerConfig, theta: &ParameterVector, g: &ParameterVector) -> Result<ParameterVector> {
    let d = state.delta(cfg, g.values());
    apply(theta, g, d)
}

pub fn step_adam(state: &mut AdamState, cfg: &OptimizerConfig, theta: &ParameterVector, g: &ParameterVector) -> Result<ParameterVector> {
    let d = state.delta(cfg, g.values());
    apply(theta, g, d)
}

pub fn step_rmsprop(state: &mut RmspropState, cfg: &OptimizerConfig, theta: &ParameterVector, g: &ParameterVector) -> Result<ParameterVector> {
    let d = state.delta(cfg, g.values());
    apply(theta, g, d)
}

/// Rescales `dir_step` to the global ℓ2 norm of `mag_step`.
pub fn grafted_step(mag_step: &ParameterVector, dir_step: &ParameterVector) -> Result<ParameterVector> {
    if !mag_step.same_layout(dir_step) {
        return Err(Error::LayoutMismatch);
    }
    let dn = dir_step.norm();
    if dn == 0.0 {
        return Err(Error::Degenerate("grafting direction has zero norm".into()));
    }
    Ok(dir_step.scale(mag_step.norm() / dn))
}

/// Per-layout-entry grafting: each named tensor of `dir_step` takes the
/// norm of the matching tensor of `mag_step`.
pub fn grafted_step_layerwise(mag_step: &ParameterVector, dir_step: &ParameterVector) -> Result<ParameterVector> {
    if !mag_step.same_layout(dir_step) {
        return Err(Error::LayoutMismatch);
    }
    let mut out = dir_step.clone();
    for e in dir_step.layout().entries() {
        let r = e.range();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (mn, dn) = (norm(&mag_step.values()[r.clone()]), norm(&dir_step.values()[r.clone()]));
        if dn == 0.0 {
            if mn == 0.0 {
                continue;
            }
            return Err(Error::Degenerate(format!("grafting direction for {} has zero norm", e.name)));
        }
        for v in &mut out.values_mut()[r] {
            *v *= mn / dn;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum BaseStateAny {
    Sgd(SgdState),
    Adam(AdamState),
    Rmsprop(RmspropState),
}

impl BaseStateAny {
    fn new(kind: BaseOptimizer) -> Self {
        match kind {
            BaseOptimizer::Sgd => BaseStateAny::Sgd(SgdState::default()),
            BaseOptimizer::Adam => BaseStateAny::Adam(AdamState::default()),
            BaseOptimizer::Rmsprop => BaseStateAny::Rmsprop(RmspropState::default()),
        }
    }

    fn delta(&mut self, cfg: &OptimizerConfig, g: &[f64]) -> Vec<f64> {
        match self {
            BaseStateAny::Sgd(s) => s.delta(cfg, g),
            BaseStateAny::Adam(s) => s.delta(cfg, g),
            BaseStateAny::Rmsprop(s) => s.delta(cfg, g),
        }
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Single(BaseStateAny),
    Grafted { magnitude: BaseStateAny, direction: BaseStateAny, norm: GraftNorm },
}

/// A stateful optimizer built from an [`OptimizerConfig`] (ignoring `switch`).
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    inner: Inner,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let inner = match cfg.kind {
            OptimizerKind::Sgd => Inner::Single(BaseStateAny::new(BaseOptimizer::Sgd)),
            OptimizerKind::Adam => Inner::Single(BaseStateAny::new(BaseOptimizer::Adam)),
            OptimizerKind::Rmsprop => Inner::Single(BaseStateAny::new(BaseOptimizer::Rmsprop)),
            OptimizerKind::Grafted { magnitude, direction, norm } => Inner::Grafted {
                magnitude: BaseStateAny::new(magnitude),
                direction: BaseStateAny::new(direction),
                norm,
            },
        };
        Ok(Optimizer { cfg: cfg.clone(), inner })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Parameter update for gradient `g`; a zero grafting direction yields a zero step.
    pub fn delta(&mut self, g: &ParameterVector) -> Result<ParameterVector> {
        let layout = g.layout().clone();
        match &mut self.inner {
            Inner::Single(s) => ParameterVector::new(s.delta(&self.cfg, g.values()), layout),
            Inner::Grafted { magnitude, direction, norm } => {
                let m = ParameterVector::new(magnitude.delta(&self.cfg, g.values()), layout.clone())?;
                let d = ParameterVector::new(direction.delta(&self.cfg, g.values()), layout.clone())?;
                let res = match norm {
                    GraftNorm::Global => grafted_step(&m, &d),
                    GraftNorm::Layerwise => grafted_step_layerwise(&m, &d),
                };
                match res {
                    Err(Error::Degenerate(_)) => Ok(ParameterVector::zeros(layout)),
                    other => other,
                }
            }
        }
    }

    pub fn step(&mut self, theta: &mut ParameterVector, g: &ParameterVector) -> Result<()> {
        let d = self.delta(g)?;
        theta.axpy(1.0, &d)
    }
}
