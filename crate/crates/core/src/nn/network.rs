//! Forward evaluation, losses and exact reverse-mode gradients for dense nets.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::batchnorm::{BatchNormState, MomentAccumulator};
use super::params::{LayerSlots, ParameterVector};
use super::spec::{LossKind, NetworkSpec};
use crate::error::{Error, Result};

/// Rows evaluated at once when sweeping a whole dataset.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Dense(Array2<f64>),
    Labels(Vec<usize>),
}

#[derive(Clone, Copy, Debug)]
pub enum TargetsRef<'a> {
    Dense(ArrayView2<'a, f64>),
    Labels(&'a [usize]),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Dense(t) => t.nrows(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view(&self) -> TargetsRef<'_> {
        match self {
            Targets::Dense(t) => TargetsRef::Dense(t.view()),
            Targets::Labels(l) => TargetsRef::Labels(l),
        }
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> TargetsRef<'_> {
        match self {
            Targets::Dense(t) => TargetsRef::Dense(t.slice(s![range, ..])),
            Targets::Labels(l) => TargetsRef::Labels(&l[range]),
        }
    }

    pub fn gather(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Dense(t) => Targets::Dense(t.select(Axis(0), idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Inputs and targets for one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: TargetsRef<'a>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, targets: TargetsRef<'a>) -> Self {
        Batch { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How batch-norm layers obtain their normalization statistics.
pub enum BnMode<'a> {
    /// Use stored running statistics.
    Eval(&'a BatchNormState),
    /// Use statistics of the current batch; running statistics untouched.
    Batch,
    /// Use batch statistics and fold them into the running statistics.
    Train(&'a mut BatchNormState),
}

struct LayerCache {
    input: Array2<f64>,
    /// Value fed into the activation (after batch norm, if any).
    act_in: Array2<f64>,
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    batch_stats: bool,
    out: Array2<f64>,
}

struct Engine<'a> {
    spec: &'a NetworkSpec,
    theta: &'a [f64],
    slots: Vec<LayerSlots>,
}

impl<'a> Engine<'a> {
    fn new(spec: &'a NetworkSpec, theta: &'a ParameterVector) -> Result<Self> {
        spec.validate()?;
        let slots = theta.layout().layer_slots(spec)?;
        if theta.len() != theta.layout().total_len() {
            return Err(Error::LayoutMismatch);
        }
        if !theta.is_finite() {
            return Err(Error::Numeric("non-finite entries in parameter vector".into()));
        }
        Ok(Engine { spec, theta: theta.values(), slots })
    }

    fn weight(&self, l: usize) -> ArrayView2<'a, f64> {
        let s = &self.slots[l];
        ArrayView2::from_shape((s.fan_out, s.fan_in), &self.theta[s.weight.clone()]).unwrap()
    }

    fn vec(&self, r: &Option<std::ops::Range<usize>>) -> Option<ArrayView1<'a, f64>> {
        r.as_ref().map(|r| ArrayView1::from(&self.theta[r.clone()]))
    }

    fn check_inputs(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::dim(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::dim("empty batch"));
        }
        Ok(())
    }

    /// Linear map of layer `l`, plus bias when the layer has one.
    fn linear(&self, l: usize, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.weight(l).t());
        if let Some(b) = self.vec(&self.slots[l].bias) {
            z += &b;
        }
        z
    }

    /// Runs the network; when `stop_before_bn` is `Some(l)`, returns the
    /// pre-normalization values of layer `l` instead of the output.
    fn run(
        &self,
        x: ArrayView2<f64>,
        mode: &mut BnMode,
        mut caches: Option<&mut Vec<LayerCache>>,
        stop_before_bn: Option<usize>,
    ) -> Result<Array2<f64>> {
        self.check_inputs(&x)?;
        let last = self.spec.num_layers() - 1;
        let mut a = x.to_owned();
        for l in 0..=last {
            let pre = self.linear(l, &a.view());
            if stop_before_bn == Some(l) {
                return Ok(pre);
            }
            let (normed, xhat, inv_std, batch_stats) = if self.spec.has_bn(l) {
                let (xhat, inv_std, batch_stats) = self.normalize(l, &pre, mode)?;
                let gamma = self.vec(&self.slots[l].gamma).unwrap();
                let beta = self.vec(&self.slots[l].beta).unwrap();
                let y = &xhat * &gamma + beta;
                (y, Some(xhat), Some(inv_std), batch_stats)
            } else {
                (pre.clone(), None, None, false)
            };
            let out = if l == last {
                normed.clone()
            } else {
                let act = self.spec.activation;
                normed.mapv(|v| act.apply(v))
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache {
                    input: std::mem::replace(&mut a, Array2::zeros((0, 0))),
                    act_in: normed,
                    xhat,
                    inv_std,
                    batch_stats,
                    out: out.clone(),
                });
            }
            a = out;
        }
        Ok(a)
    }

    fn normalize(
        &self,
        l: usize,
        z: &Array2<f64>,
        mode: &mut BnMode,
    ) -> Result<(Array2<f64>, Array1<f64>, bool)> {
        let (mean, var, batch_stats) = match mode {
            BnMode::Eval(state) => {
                let st = state
                    .layers
                    .get(l)
                    .and_then(|s| s.as_ref())
                    .ok_or_else(|| Error::config("batch-norm state does not match network"))?;
                (Array1::from(st.running_mean.clone()), Array1::from(st.running_var.clone()), false)
            }
            BnMode::Batch | BnMode::Train(_) => {
                let (m, v) = column_moments(z);
                if let BnMode::Train(state) = mode {
                    if state.layers.get(l).map(|s| s.is_none()).unwrap_or(true) {
                        return Err(Error::config("batch-norm state does not match network"));
                    }
                    state.update(l, m.as_slice().unwrap(), v.as_slice().unwrap());
                }
                (m, v, true)
            }
        };
        let eps = match mode {
            BnMode::Eval(s) => s.epsilon,
            BnMode::Train(s) => s.epsilon,
            BnMode::Batch => super::batchnorm::DEFAULT_BN_EPSILON,
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (z - &mean) * &inv_std;
        Ok((xhat, inv_std, batch_stats))
    }
}

fn column_moments(z: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = z.nrows() as f64;
    let mean = z.sum_axis(Axis(0)) / n;
    let centered = z - &mean;
    let var = (&centered * &centered).sum_axis(Axis(0)) / n;
    (mean, var)
}

/// Network outputs (logits or reconstructions) for every row of `inputs`.
pub fn forward(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    mut mode: BnMode,
    inputs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Engine::new(spec, theta)?.run(inputs, &mut mode, None, None)
}

fn check_targets(spec: &NetworkSpec, n: usize, targets: &TargetsRef) -> Result<()> {
    match (spec.loss, targets) {
        (LossKind::Mse, TargetsRef::Dense(t)) => {
            if t.nrows() != n || t.ncols() != spec.output_dim() {
                return Err(Error::dim(format!(
                    "targets are {}x{}, expected {}x{}",
                    t.nrows(),
                    t.ncols(),
                    n,
                    spec.output_dim()
                )));
            }
        }
        (LossKind::SoftmaxCrossEntropy, TargetsRef::Labels(l)) => {
            if l.len() != n {
                return Err(Error::dim(format!("{} labels for {} inputs", l.len(), n)));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= spec.output_dim()) {
                return Err(Error::dim(format!(
                    "label {bad} out of range for {} classes",
                    spec.output_dim()
                )));
            }
        }
        (LossKind::Mse, TargetsRef::Labels(_)) => {
            return Err(Error::config("mse loss needs dense targets"))
        }
        (LossKind::SoftmaxCrossEntropy, TargetsRef::Dense(_)) => {
            return Err(Error::config("cross-entropy loss needs integer labels"))
        }
    }
    Ok(())
}

/// Summed (not averaged) loss over rows, and optionally d(sum loss)/d(outputs).
fn loss_sum(
    kind: LossKind,
    out: &Array2<f64>,
    targets: &TargetsRef,
    want_grad: bool,
) -> (f64, Option<Array2<f64>>) {
    match (kind, targets) {
        (LossKind::Mse, TargetsRef::Dense(t)) => {
            let diff = out - t;
            let sum = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            (sum, want_grad.then_some(diff))
        }
        (LossKind::SoftmaxCrossEntropy, TargetsRef::Labels(labels)) => {
            let mut sum = 0.0;
            let mut grad = want_grad.then(|| Array2::zeros(out.raw_dim()));
            for (i, row) in out.outer_iter().enumerate() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let se: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + se.ln();
                sum += lse - row[labels[i]];
                if let Some(g) = grad.as_mut() {
                    for (j, &v) in row.iter().enumerate() {
                        g[[i, j]] = (v - lse).exp();
                    }
                    g[[i, labels[i]]] -= 1.0;
                }
            }
            (sum, grad)
        }
        _ => unreachable!("targets checked before use"),
    }
}

/// Mean loss: `(1/2n)·Σ‖out − target‖²` for mse, mean NLL for cross-entropy.
pub fn loss(spec: &NetworkSpec, theta: &ParameterVector, mode: BnMode, batch: &Batch) -> Result<f64> {
    check_targets(spec, batch.len(), &batch.targets)?;
    let out = forward(spec, theta, mode, batch.inputs)?;
    Ok(loss_sum(spec.loss, &out, &batch.targets, false).0 / batch.len() as f64)
}

/// Fraction of rows whose arg-max output equals the label.
pub fn accuracy_count(out: &Array2<f64>, labels: &[usize]) -> usize {
    out.outer_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

/// Loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradient(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    mode: BnMode,
    batch: &Batch,
) -> Result<(f64, ParameterVector)> {
    loss_gradient_outputs(spec, theta, mode, batch).map(|(l, g, _)| (l, g))
}

/// As [`loss_and_gradient`], also returning the network outputs.
pub(crate) fn loss_gradient_outputs(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    mut mode: BnMode,
    batch: &Batch,
) -> Result<(f64, ParameterVector, Array2<f64>)> {
    check_targets(spec, batch.len(), &batch.targets)?;
    let engine = Engine::new(spec, theta)?;
    let mut caches = Vec::with_capacity(spec.num_layers());
    let out = engine.run(batch.inputs, &mut mode, Some(&mut caches), None)?;
    let n = batch.len() as f64;
    let (sum, g_out) = loss_sum(spec.loss, &out, &batch.targets, true);
    let mut delta = g_out.unwrap() / n;

    let mut grad = ParameterVector::zeros(theta.layout().clone());
    let gvals = grad.values_mut();
    let last = spec.num_layers() - 1;
    for l in (0..=last).rev() {
        let c = &caches[l];
        let slots = &engine.slots[l];
        // delta: gradient w.r.t. this layer's output (post-activation)
        if l != last {
            let act = spec.activation;
            Zip::from(&mut delta)
                .and(&c.act_in)
                .and(&c.out)
                .for_each(|d, &x, &y| *d *= act.derivative(x, y));
        }
        // delta now: gradient w.r.t. value after (optional) batch norm
        if let (Some(xhat), Some(inv_std)) = (&c.xhat, &c.inv_std) {
            let gamma = engine.vec(&slots.gamma).unwrap();
            let g_gamma = (&delta * xhat).sum_axis(Axis(0));
            let g_beta = delta.sum_axis(Axis(0));
            write(gvals, slots.gamma.as_ref().unwrap(), g_gamma.view());
            write(gvals, slots.beta.as_ref().unwrap(), g_beta.view());
            let dxhat = &delta * &gamma;
            delta = if c.batch_stats {
                let m = dxhat.nrows() as f64;
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                (dxhat * m - &sum_d - xhat * &sum_dx) * &(inv_std / m)
            } else {
                dxhat * inv_std
            };
        }
        // delta: gradient w.r.t. linear output z = a Wᵀ + b
        let gw = delta.t().dot(&c.input);
        write(gvals, &slots.weight, ArrayView1::from(gw.as_slice().unwrap()));
        if let Some(b) = &slots.bias {
            write(gvals, b, delta.sum_axis(Axis(0)).view());
        }
        if l > 0 {
            delta = delta.dot(&engine.weight(l));
        }
    }
    Ok((sum / n, grad, out))
}

fn write(dst: &mut [f64], range: &std::ops::Range<usize>, src: ArrayView1<f64>) {
    for (d, s) in dst[range.clone()].iter_mut().zip(src.iter()) {
        *d = *s;
    }
}

pub fn gradient(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    mode: BnMode,
    batch: &Batch,
) -> Result<ParameterVector> {
    loss_and_gradient(spec, theta, mode, batch).map(|(_, g)| g)
}

/// Full-dataset metrics in eval mode, evaluated in row chunks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// `None` for regression losses.
    pub accuracy: Option<f64>,
}

pub fn evaluate(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    bn: &BatchNormState,
    inputs: ArrayView2<f64>,
    targets: TargetsRef,
) -> Result<Evaluation> {
    let n = inputs.nrows();
    check_targets(spec, n, &targets)?;
    let engine = Engine::new(spec, theta)?;
    let mut sum = 0.0;
    let mut correct = 0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let out = engine.run(inputs.slice(s![start..end, ..]), &mut BnMode::Eval(bn), None, None)?;
        let t = match targets {
            TargetsRef::Dense(t) => TargetsRef::Dense(t.slice_move(s![start..end, ..])),
            TargetsRef::Labels(l) => TargetsRef::Labels(&l[start..end]),
        };
        sum += loss_sum(spec.loss, &out, &t, false).0;
        if let TargetsRef::Labels(l) = t {
            correct += accuracy_count(&out, l);
        }
        start = end;
    }
    let accuracy = matches!(targets, TargetsRef::Labels(_)).then(|| correct as f64 / n as f64);
    Ok(Evaluation { loss: sum / n as f64, accuracy })
}

/// Recomputes batch-norm statistics from scratch over `inputs`.
///
/// Layers are processed in order; layer `l` is normalized with statistics
/// aggregated exactly over all rows, given the already-final statistics of
/// earlier layers. The result equals one training-mode pass with the whole
/// dataset as a single batch.
pub fn warm_up_bn(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    template: &BatchNormState,
    inputs: ArrayView2<f64>,
) -> Result<BatchNormState> {
    let engine = Engine::new(spec, theta)?;
    let mut state = template.clone();
    state.reset();
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::dim("cannot warm up on an empty dataset"));
    }
    for l in 0..spec.num_layers() {
        if !spec.has_bn(l) {
            continue;
        }
        let mut acc = MomentAccumulator::new(spec.layer_sizes[l + 1]);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let z = engine.run(
                inputs.slice(s![start..end, ..]),
                &mut BnMode::Eval(&state),
                None,
                Some(l),
            )?;
            let (m, v) = column_moments(&z);
            acc.merge(end - start, m.as_slice().unwrap(), v.as_slice().unwrap());
            start = end;
        }
        state.layers[l] = Some(acc.finish());
    }
    Ok(state)
}
