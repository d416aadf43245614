//! Dense feed-forward networks with explicit per-sample backward passes.
//!
//! The point of this engine is not general autodiff: training and sampling
//! both need per-sample quantities that batched frameworks hide. It exposes
//! exact per-sample gradients, their L2 norms in closed form (no gradient
//! materialization), and a surrogate norm computable from the forward pass
//! alone: the L2 norm of the loss derivative with respect to the last
//! layer's pre-activation input.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{dot, squared_norm};

/// Per-layer nonlinearity. Softmax operates on contiguous blocks so a
/// single output vector can hold independent per-action histograms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    /// Blockwise softmax: the output splits into `groups` equal blocks,
    /// each normalized independently.
    Softmax {
        groups: usize,
    },
}

impl Activation {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        match *self {
            Activation::Identity => z.to_vec(),
            Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Softmax { groups } => {
                debug_assert_eq!(z.len() % groups, 0);
                let block = z.len() / groups;
                let mut out = Vec::with_capacity(z.len());
                for g in 0..groups {
                    let zs = &z[g * block..(g + 1) * block];
                    let m = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = zs.iter().map(|&v| (v - m).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    out.extend(exps.iter().map(|&e| e / total));
                }
                out
            }
        }
    }

    /// Elementwise derivative for diagonal activations. Softmax is handled
    /// jointly with its loss and never goes through here.
    fn diag_derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softmax { .. } => unreachable!("softmax has no diagonal derivative"),
        }
    }

    fn tag(&self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::Softmax { groups } => format!("softmax:{groups}"),
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        if tag == "identity" {
            Ok(Activation::Identity)
        } else if tag == "relu" {
            Ok(Activation::Relu)
        } else if let Some(g) = tag.strip_prefix("softmax:") {
            let groups: usize = g
                .parse()
                .map_err(|_| Error::Serde(format!("bad softmax group count {g:?}")))?;
            Ok(Activation::Softmax { groups })
        } else {
            Err(Error::Serde(format!("unknown activation tag {tag:?}")))
        }
    }
}

/// One affine layer followed by its activation. Weights are row-major,
/// `out_dim` rows of `in_dim` columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::ShapeMismatch {
                context: "layer weights",
                expected: in_dim * out_dim,
                got: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::ShapeMismatch {
                context: "layer bias",
                expected: out_dim,
                got: bias.len(),
            });
        }
        if let Activation::Softmax { groups } = activation {
            if groups == 0 || !out_dim.is_multiple_of(groups) {
                return Err(Error::InvalidConfig(format!(
                    "softmax groups {groups} must divide output dim {out_dim}"
                )));
            }
        }
        Ok(Layer {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (k, zk) in z.iter_mut().enumerate() {
            *zk += dot(&self.weights[k * self.in_dim..(k + 1) * self.in_dim], x);
        }
        z
    }
}

/// A multilayer perceptron. Softmax is permitted only on the final layer,
/// which keeps the backward pass a chain of diagonal derivatives with one
/// special case at the output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::ShapeMismatch {
                    context: "consecutive layer dims",
                    expected: w[0].out_dim,
                    got: w[1].in_dim,
                });
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer.activation, Activation::Softmax { .. }) && i + 1 != layers.len() {
                return Err(Error::InvalidConfig(
                    "softmax is only permitted on the final layer".into(),
                ));
            }
        }
        Ok(Network { layers })
    }

    /// Fresh MLP with ReLU hidden layers and the given output activation.
    /// Weights are uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn mlp<R: Rng>(dims: &[usize], last_activation: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "mlp needs at least input and output dims".into(),
            ));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            let activation = if i + 2 == dims.len() {
                last_activation
            } else {
                Activation::Relu
            };
            layers.push(Layer::new(
                fan_in,
                fan_out,
                weights,
                vec![0.0; fan_out],
                activation,
            )?);
        }
        Network::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    /// Flattened parameter vector: per layer, weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                context: "parameter vector",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.in_dim * l.out_dim;
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            l.bias.copy_from_slice(&params[off..off + l.out_dim]);
            off += l.out_dim;
        }
        Ok(())
    }

    /// theta <- theta - step_size * direction
    pub fn apply_step(&mut self, direction: &[f64], step_size: f64) -> Result<()> {
        if direction.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                context: "descent direction",
                expected: self.num_params(),
                got: direction.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w -= step_size * direction[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Batched forward pass retaining every intermediate activation.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<ForwardCache> {
        let mut samples = Vec::with_capacity(inputs.len());
        for input in inputs {
            if input.len() != self.input_dim() {
                return Err(Error::ShapeMismatch {
                    context: "forward input",
                    expected: self.input_dim(),
                    got: input.len(),
                });
            }
            for &v in input {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: "forward input",
                        value: v,
                    });
                }
            }
            let mut xs = vec![input.clone()];
            let mut zs = Vec::with_capacity(self.layers.len());
            for layer in &self.layers {
                let z = layer.affine(xs.last().unwrap());
                for &v in &z {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: "pre-activation",
                            value: v,
                        });
                    }
                }
                xs.push(layer.activation.apply(&z));
                zs.push(z);
            }
            samples.push(SampleCache { xs, zs });
        }
        Ok(ForwardCache {
            samples,
            last_activation: self.layers.last().unwrap().activation,
        })
    }

    /// Text serialization: a dimension/activation header, then one line of
    /// shortest-roundtrip floats per weight row and bias vector.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "mlp 1 {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(
                out,
                "layer {} {} {}",
                l.in_dim,
                l.out_dim,
                l.activation.tag()
            )
            .unwrap();
            for k in 0..l.out_dim {
                let row: Vec<String> = l.weights[k * l.in_dim..(k + 1) * l.in_dim]
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
            let bias: Vec<String> = l.bias.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", bias.join(" ")).unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Serde("empty network file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "mlp" || parts[1] != "1" {
            return Err(Error::Serde(format!("bad network header {header:?}")));
        }
        let n_layers: usize = parts[2]
            .parse()
            .map_err(|_| Error::Serde("bad layer count".into()))?;
        fn parse_row(lines: &mut std::str::Lines<'_>, expected: usize) -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Serde("truncated network file".into()))?;
            let row: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|e| Error::Serde(format!("bad float: {e}")))?;
            if row.len() != expected {
                return Err(Error::Serde(format!(
                    "expected {expected} floats, got {}",
                    row.len()
                )));
            }
            Ok(row)
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let line = lines
                .next()
                .ok_or_else(|| Error::Serde("truncated network file".into()))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "layer" {
                return Err(Error::Serde(format!("bad layer header {line:?}")));
            }
            let in_dim: usize = parts[1]
                .parse()
                .map_err(|_| Error::Serde("bad in_dim".into()))?;
            let out_dim: usize = parts[2]
                .parse()
                .map_err(|_| Error::Serde("bad out_dim".into()))?;
            let activation = Activation::from_tag(parts[3])?;
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                weights.extend(parse_row(&mut lines, in_dim)?);
            }
            let bias = parse_row(&mut lines, out_dim)?;
            layers.push(Layer::new(in_dim, out_dim, weights, bias, activation)?);
        }
        Network::new(layers)
    }
}

/// Intermediate activations for one sample: `xs[0]` is the input, `xs[l+1]`
/// the post-activation output of layer l, `zs[l]` its pre-activation.
#[derive(Clone, Debug)]
pub struct SampleCache {
    pub xs: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
}

/// Everything the backward pass and the surrogate need from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    samples: Vec<SampleCache>,
    last_activation: Activation,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.samples.len()
    }

    /// Network output q for sample `i`.
    pub fn output(&self, i: usize) -> &[f64] {
        self.samples[i].xs.last().unwrap()
    }

    /// Last-layer pre-activation z for sample `i`.
    pub fn last_preactivation(&self, i: usize) -> &[f64] {
        self.samples[i].zs.last().unwrap()
    }

    pub fn sample(&self, i: usize) -> &SampleCache {
        &self.samples[i]
    }

    pub fn last_activation(&self) -> Activation {
        self.last_activation
    }

    /// Sub-batch view: the cached activations of the chosen samples, in
    /// order, duplicates allowed.
    pub fn select(&self, indices: &[usize]) -> ForwardCache {
        ForwardCache {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            last_activation: self.last_activation,
        }
    }
}

/// Loss family applied to a network output. Huber uses threshold 1, so its
/// derivative is the TD error clipped to [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L2,
    Huber,
    CategoricalCe,
}

/// Per-sample regression target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// Scalar target for one output component (a state-action value).
    Scalar { index: usize, value: f64 },
    /// Probability histogram over one softmax block (a value distribution).
    Histogram { group: usize, probs: Vec<f64> },
}

/// Loss of one output/target pair.
pub fn loss_value(output: &[f64], target: &Target, kind: LossKind) -> Result<f64> {
    match (kind, target) {
        (LossKind::L2, Target::Scalar { index, value }) => {
            let delta = scalar_residual(output, *index, *value)?;
            Ok(0.5 * delta * delta)
        }
        (LossKind::Huber, Target::Scalar { index, value }) => {
            let delta = scalar_residual(output, *index, *value)?;
            Ok(if delta.abs() <= 1.0 {
                0.5 * delta * delta
            } else {
                delta.abs() - 0.5
            })
        }
        (LossKind::CategoricalCe, Target::Histogram { group, probs }) => {
            let block = histogram_block(output, *group, probs)?;
            Ok(-probs
                .iter()
                .zip(block)
                .map(|(&y, &q)| {
                    if y == 0.0 {
                        0.0
                    } else {
                        y * q.max(f64::MIN_POSITIVE).ln()
                    }
                })
                .sum::<f64>())
        }
        _ => Err(Error::InvalidConfig(
            "loss kind does not match target shape".into(),
        )),
    }
}

fn scalar_residual(output: &[f64], index: usize, value: f64) -> Result<f64> {
    if index >= output.len() {
        return Err(Error::ShapeMismatch {
            context: "scalar target index",
            expected: output.len(),
            got: index,
        });
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "target value",
            value,
        });
    }
    Ok(output[index] - value)
}

fn histogram_block<'a>(output: &'a [f64], group: usize, probs: &[f64]) -> Result<&'a [f64]> {
    let atoms = probs.len();
    let offset = group * atoms;
    if atoms == 0 || offset + atoms > output.len() {
        return Err(Error::ShapeMismatch {
            context: "histogram target block",
            expected: output.len(),
            got: offset + atoms,
        });
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!(
            "histogram target sums to {total}"
        )));
    }
    Ok(&output[offset..offset + atoms])
}

/// dl/dz at the last layer: the quantity whose L2 norm is the surrogate.
/// For diagonal activations this is the loss derivative times the
/// activation derivative; for softmax with cross-entropy it collapses to
/// q - y on the target block.
fn last_layer_delta(
    z: &[f64],
    q: &[f64],
    activation: Activation,
    target: &Target,
    kind: LossKind,
) -> Result<Vec<f64>> {
    match (kind, target) {
        (LossKind::L2, Target::Scalar { index, value })
        | (LossKind::Huber, Target::Scalar { index, value }) => {
            if matches!(activation, Activation::Softmax { .. }) {
                return Err(Error::InvalidConfig(
                    "scalar losses require a diagonal last activation".into(),
                ));
            }
            let delta = scalar_residual(q, *index, *value)?;
            let dl_dq = if kind == LossKind::L2 {
                delta
            } else {
                delta.clamp(-1.0, 1.0)
            };
            let mut d = vec![0.0; z.len()];
            d[*index] = dl_dq * activation.diag_derivative(z[*index]);
            Ok(d)
        }
        (LossKind::CategoricalCe, Target::Histogram { group, probs }) => {
            let Activation::Softmax { .. } = activation else {
                return Err(Error::InvalidConfig(
                    "cross-entropy requires a softmax last activation".into(),
                ));
            };
            let block = histogram_block(q, *group, probs)?;
            let mut d = vec![0.0; z.len()];
            let offset = group * probs.len();
            for (k, (&qk, &yk)) in block.iter().zip(probs).enumerate() {
                d[offset + k] = qk - yk;
            }
            Ok(d)
        }
        _ => Err(Error::InvalidConfig(
            "loss kind does not match target shape".into(),
        )),
    }
}

/// Backpropagated dl/dz for every layer of one sample.
fn sample_deltas(
    net: &Network,
    sc: &SampleCache,
    target: &Target,
    kind: LossKind,
) -> Result<Vec<Vec<f64>>> {
    let n_layers = net.layers.len();
    let mut deltas = vec![Vec::new(); n_layers];
    deltas[n_layers - 1] = last_layer_delta(
        &sc.zs[n_layers - 1],
        sc.xs.last().unwrap(),
        net.layers[n_layers - 1].activation,
        target,
        kind,
    )?;
    propagate_down(net, sc, &mut deltas);
    Ok(deltas)
}

/// Fill deltas[0..last] from an already-seeded last entry.
fn propagate_down(net: &Network, sc: &SampleCache, deltas: &mut [Vec<f64>]) {
    for l in (1..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let upper = std::mem::take(&mut deltas[l]);
        let mut lower = vec![0.0; layer.in_dim];
        for (k, &dk) in upper.iter().enumerate() {
            if dk != 0.0 {
                let row = &layer.weights[k * layer.in_dim..(k + 1) * layer.in_dim];
                for (j, &w) in row.iter().enumerate() {
                    lower[j] += w * dk;
                }
            }
        }
        let act = net.layers[l - 1].activation;
        for (j, v) in lower.iter_mut().enumerate() {
            *v *= act.diag_derivative(sc.zs[l - 1][j]);
        }
        deltas[l] = upper;
        deltas[l - 1] = lower;
    }
}

fn check_cache(net: &Network, cache: &ForwardCache, targets: &[Target]) -> Result<()> {
    if cache.batch_len() != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "targets vs cache batch",
            expected: cache.batch_len(),
            got: targets.len(),
        });
    }
    if let Some(sc) = cache.samples.first() {
        if sc.xs[0].len() != net.input_dim() || sc.zs.len() != net.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "cache vs network",
                expected: net.input_dim(),
                got: sc.xs[0].len(),
            });
        }
    }
    Ok(())
}

/// Flatten per-layer deltas and cached activations into a gradient over the
/// full parameter vector (same order as [`Network::params`]).
fn flatten_gradient(net: &Network, sc: &SampleCache, deltas: &[Vec<f64>]) -> Vec<f64> {
    let mut grad = Vec::with_capacity(net.num_params());
    for (l, _layer) in net.layers.iter().enumerate() {
        let x = &sc.xs[l];
        let d = &deltas[l];
        for &dk in d.iter() {
            grad.extend(x.iter().map(|&xj| dk * xj));
        }
        grad.extend_from_slice(d);
    }
    grad
}

/// Full per-sample gradient matrix, one row per sample.
pub fn per_sample_gradients(
    net: &Network,
    cache: &ForwardCache,
    targets: &[Target],
    kind: LossKind,
) -> Result<Vec<Vec<f64>>> {
    check_cache(net, cache, targets)?;
    let mut rows = Vec::with_capacity(targets.len());
    for (sc, target) in cache.samples.iter().zip(targets) {
        let deltas = sample_deltas(net, sc, target, kind)?;
        rows.push(flatten_gradient(net, sc, &deltas));
    }
    Ok(rows)
}

/// Exact per-sample gradient L2 norms without materializing gradients.
///
/// For layer l with dl/dz = d and input x, the parameter gradient is the
/// outer product d x^T stacked with d, whose squared Frobenius norm is
/// |d|^2 (|x|^2 + 1); layers are disjoint in theta so the squares add.
pub fn per_sample_gradient_norms(
    net: &Network,
    cache: &ForwardCache,
    targets: &[Target],
    kind: LossKind,
) -> Result<Vec<f64>> {
    check_cache(net, cache, targets)?;
    let mut norms = Vec::with_capacity(targets.len());
    for (sc, target) in cache.samples.iter().zip(targets) {
        let deltas = sample_deltas(net, sc, target, kind)?;
        let mut sq = 0.0;
        for (l, d) in deltas.iter().enumerate() {
            sq += squared_norm(d) * (squared_norm(&sc.xs[l]) + 1.0);
        }
        norms.push(sq.sqrt());
    }
    Ok(norms)
}

/// Forward-pass-only upper-bound surrogate for the per-sample gradient
/// norm: ||dl/dz|| at the last layer. Specializations:
/// identity + L2 gives |delta|, identity + Huber gives min(|delta|, 1),
/// softmax + cross-entropy gives the L2 norm of q - y.
pub fn surrogate_norm(
    cache: &ForwardCache,
    targets: &[Target],
    kind: LossKind,
) -> Result<Vec<f64>> {
    if cache.batch_len() != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "targets vs cache batch",
            expected: cache.batch_len(),
            got: targets.len(),
        });
    }
    let mut out = Vec::with_capacity(targets.len());
    for (sc, target) in cache.samples.iter().zip(targets) {
        let d = last_layer_delta(
            sc.zs.last().unwrap(),
            sc.xs.last().unwrap(),
            cache.last_activation,
            target,
            kind,
        )?;
        out.push(squared_norm(&d).sqrt());
    }
    Ok(out)
}

/// Central-difference gradient of the loss at one sample; the verification
/// oracle for the analytic backward pass.
pub fn finite_difference_loss_gradient(
    net: &Network,
    x: &[f64],
    target: &Target,
    kind: LossKind,
    h: f64,
) -> Result<Vec<f64>> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let base = net.params();
    let mut probe = net.clone();
    let mut grad = Vec::with_capacity(base.len());
    let input = [x.to_vec()];
    let mut params = base.clone();
    for j in 0..base.len() {
        params[j] = base[j] + h;
        probe.set_params(&params)?;
        let plus = loss_value(probe.forward(&input)?.output(0), target, kind)?;
        params[j] = base[j] - h;
        probe.set_params(&params)?;
        let minus = loss_value(probe.forward(&input)?.output(0), target, kind)?;
        params[j] = base[j];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Explicit Jacobian of the last-layer pre-activation z with respect to all
/// parameters: one row per output coordinate. Used to verify the surrogate
/// bound with exact operator norms.
pub fn preactivation_jacobian(net: &Network, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let cache = net.forward(&[x.to_vec()])?;
    let sc = cache.sample(0);
    let n_layers = net.layers.len();
    let out_dim = net.output_dim();
    let mut rows = Vec::with_capacity(out_dim);
    for k in 0..out_dim {
        let mut deltas = vec![Vec::new(); n_layers];
        let mut seed = vec![0.0; out_dim];
        seed[k] = 1.0;
        deltas[n_layers - 1] = seed;
        propagate_down(net, sc, &mut deltas);
        rows.push(flatten_gradient(net, sc, &deltas));
    }
    Ok(rows)
}
