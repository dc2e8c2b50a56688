//! Fully connected encoder, projector and predictor with hand-written
//! forward and backward passes, batch normalization, SGD with momentum, the
//! warmup + cosine learning-rate schedule and the EMA target branch.
//!
//! The online network is `predictor(projector(encoder(x)))`; the target
//! branch is an encoder + projector pair that only ever changes through
//! [`ema_update`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, l2_normalize_rows, EmbeddingMatrix, RngState};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running BN statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnFlags {
    pub encoder: bool,
    pub projector: bool,
    pub predictor: bool,
}

impl Default for BnFlags {
    fn default() -> Self {
        Self {
            encoder: true,
            projector: true,
            predictor: true,
        }
    }
}

impl BnFlags {
    pub fn none() -> Self {
        Self {
            encoder: false,
            projector: false,
            predictor: false,
        }
    }
}

/// Layer output widths of each head. Encoder layers all end in a rectifier;
/// projector and predictor layers do except for the last. Batch norm sits
/// after every rectified layer of a head whose flag is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub encoder: Vec<usize>,
    pub projector: Vec<usize>,
    pub predictor: Vec<usize>,
    pub batch_norm: BnFlags,
}

impl ArchSpec {
    /// `[input -> 128 -> 64]` encoder, `[64 -> 128 -> 64]` projector and
    /// `[64 -> 128 -> 64]` predictor.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder: vec![128, 64],
            projector: vec![128, 64],
            predictor: vec![128, 64],
            batch_norm: BnFlags::default(),
        }
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder.last().copied().unwrap_or(self.input_dim)
    }

    pub fn projection_dim(&self) -> usize {
        self.projector
            .last()
            .copied()
            .unwrap_or(self.representation_dim())
    }

    pub fn prediction_dim(&self) -> usize {
        self.predictor
            .last()
            .copied()
            .unwrap_or(self.projection_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input dimension must be positive"));
        }
        let widths = self
            .encoder
            .iter()
            .chain(&self.projector)
            .chain(&self.predictor);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.prediction_dim() != self.projection_dim() {
            return Err(invalid(format!(
                "predictor output ({}) must match projector output ({})",
                self.prediction_dim(),
                self.projection_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Encoder,
    Projector,
    Predictor,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Encoder => "encoder",
            Head::Projector => "projector",
            Head::Predictor => "predictor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

impl Layer {
    fn init(in_dim: usize, out_dim: usize, bn: bool, relu: bool, rng: &mut RngState) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
            bn: bn.then(|| BatchNorm::new(out_dim)),
            relu,
        }
    }

    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.weight, &self.bias];
        if let Some(bn) = &self.bn {
            v.extend([
                &bn.gamma[..],
                &bn.beta[..],
                &bn.running_mean[..],
                &bn.running_var[..],
            ]);
        }
        v
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            v.extend([
                &mut bn.gamma[..],
                &mut bn.beta[..],
                &mut bn.running_mean[..],
                &mut bn.running_var[..],
            ]);
        }
        v
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            v.extend([&mut bn.gamma[..], &mut bn.beta[..]]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub head: Head,
    pub layers: Vec<Layer>,
}

impl Mlp {
    fn init(head: Head, in_dim: usize, widths: &[usize], bn: bool, rng: &mut RngState) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let hidden = head == Head::Encoder || i + 1 < widths.len();
            layers.push(Layer::init(prev, w, bn && hidden, hidden, rng));
            prev = w;
        }
        Self { head, layers }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, |l| l.out_dim)
    }

    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::tensors).collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(Layer::tensors_mut)
            .collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(Layer::trainable_mut)
            .collect()
    }
}

/// Encoder plus projector; the target network is one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub encoder: Mlp,
    pub projector: Mlp,
}

impl Branch {
    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors();
        v.extend(self.projector.tensors());
        v
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.projector.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineNetwork {
    pub branch: Branch,
    pub predictor: Mlp,
}

impl OnlineNetwork {
    pub fn init(arch: &ArchSpec, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        let encoder = Mlp::init(
            Head::Encoder,
            arch.input_dim,
            &arch.encoder,
            arch.batch_norm.encoder,
            rng,
        );
        let projector = Mlp::init(
            Head::Projector,
            arch.representation_dim(),
            &arch.projector,
            arch.batch_norm.projector,
            rng,
        );
        let predictor = Mlp::init(
            Head::Predictor,
            arch.projection_dim(),
            &arch.predictor,
            arch.batch_norm.predictor,
            rng,
        );
        Ok(Self {
            branch: Branch { encoder, projector },
            predictor,
        })
    }

    /// Every tensor (trainable and running statistics) in declaration order.
    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.branch.tensors();
        v.extend(self.predictor.tensors());
        v
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.branch.tensors_mut();
        v.extend(self.predictor.tensors_mut());
        v
    }

    /// Trainable tensors in the same order as [`NetworkGrads::tensors`].
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.branch.encoder.trainable_mut();
        v.extend(self.branch.projector.trainable_mut());
        v.extend(self.predictor.trainable_mut());
        v
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for mlp in [
            &self.branch.encoder,
            &self.branch.projector,
            &self.predictor,
        ] {
            for l in &mlp.layers {
                sizes.extend([l.weight.len(), l.bias.len()]);
                if let Some(bn) = &l.bn {
                    sizes.extend([bn.gamma.len(), bn.beta.len()]);
                }
            }
        }
        sizes
    }
}

/// How batch-norm layers normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics (training mode).
    Batch,
    /// Running statistics (inference mode).
    Running,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    output: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    batch: usize,
    layers: Vec<LayerCache>,
}

/// Everything the backward pass needs from one online forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    encoder: MlpCache,
    projector: MlpCache,
    predictor: MlpCache,
}

#[derive(Debug, Clone)]
pub struct OnlineForward {
    /// Unit projections.
    pub z1: EmbeddingMatrix,
    /// Unit predictions.
    pub q1: EmbeddingMatrix,
    /// Predictions before normalization; losses differentiate with respect to these.
    pub q1_raw: EmbeddingMatrix,
    /// Rows of `z1` or `q1` that were zero before normalization.
    pub zero_rows: Vec<usize>,
    pub cache: ForwardCache,
}

fn forward_layer(
    layer: &Layer,
    x: &[f64],
    batch: usize,
    mode: BnMode,
    head: Head,
    index: usize,
) -> Result<(Vec<f64>, LayerCache)> {
    let (din, dout) = (layer.in_dim, layer.out_dim);
    let mut y = vec![0.0; batch * dout];
    for b in 0..batch {
        let xb = &x[b * din..(b + 1) * din];
        for o in 0..dout {
            y[b * dout + o] = dot(xb, &layer.weight[o * din..(o + 1) * din]) + layer.bias[o];
        }
    }
    let mut cache = LayerCache {
        input: x.to_vec(),
        output: Vec::new(),
        xhat: Vec::new(),
        inv_std: Vec::new(),
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
        batch_stats: mode == BnMode::Batch,
    };
    if let Some(bn) = &layer.bn {
        let (mean, var) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; dout];
                let mut var = vec![0.0; dout];
                for b in 0..batch {
                    for o in 0..dout {
                        mean[o] += y[b * dout + o];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= batch as f64);
                for b in 0..batch {
                    for o in 0..dout {
                        let d = y[b * dout + o] - mean[o];
                        var[o] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= batch as f64);
                (mean, var)
            }
            BnMode::Running => (bn.running_mean.clone(), bn.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; batch * dout];
        for b in 0..batch {
            for o in 0..dout {
                let i = b * dout + o;
                xhat[i] = (y[i] - mean[o]) * inv_std[o];
                y[i] = bn.gamma[o] * xhat[i] + bn.beta[o];
            }
        }
        cache.xhat = xhat;
        cache.inv_std = inv_std;
        cache.batch_mean = mean;
        cache.batch_var = var;
    }
    if layer.relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            head: head.name(),
            layer: index,
        });
    }
    cache.output = y.clone();
    Ok((y, cache))
}

fn forward_mlp(mlp: &Mlp, x: Vec<f64>, batch: usize, mode: BnMode) -> Result<(Vec<f64>, MlpCache)> {
    let mut h = x;
    let mut caches = Vec::with_capacity(mlp.layers.len());
    for (i, layer) in mlp.layers.iter().enumerate() {
        let (out, cache) = forward_layer(layer, &h, batch, mode, mlp.head, i)?;
        caches.push(cache);
        h = out;
    }
    Ok((
        h,
        MlpCache {
            batch,
            layers: caches,
        },
    ))
}

fn check_input(x: &EmbeddingMatrix, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.cols(),
        });
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(invalid("network input must be finite"));
    }
    Ok(())
}

fn encoder_in_dim(branch: &Branch) -> usize {
    branch
        .encoder
        .layers
        .first()
        .or(branch.projector.layers.first())
        .map_or(0, |l| l.in_dim)
}

/// Encoder features (the representation probes are run on).
pub fn encode(branch: &Branch, x: &EmbeddingMatrix, mode: BnMode) -> Result<EmbeddingMatrix> {
    if let Some(first) = branch.encoder.layers.first() {
        check_input(x, first.in_dim)?;
    }
    let (h, _) = forward_mlp(&branch.encoder, x.as_slice().to_vec(), x.rows(), mode)?;
    let dim = branch.encoder.out_dim(x.cols());
    EmbeddingMatrix::new(x.rows(), dim, h)
}

/// Unit projections of the online network.
pub fn forward_online(
    net: &OnlineNetwork,
    x: &EmbeddingMatrix,
    mode: BnMode,
) -> Result<OnlineForward> {
    let in_dim = encoder_in_dim(&net.branch);
    if in_dim > 0 {
        check_input(x, in_dim)?;
    }
    let batch = x.rows();
    let (h, encoder) = forward_mlp(&net.branch.encoder, x.as_slice().to_vec(), batch, mode)?;
    let (z, projector) = forward_mlp(&net.branch.projector, h, batch, mode)?;
    let (q, predictor) = forward_mlp(&net.predictor, z.clone(), batch, mode)?;
    let zdim = net
        .branch
        .projector
        .out_dim(net.branch.encoder.out_dim(x.cols()));
    let z_raw = EmbeddingMatrix::new(batch, zdim, z)?;
    let q1_raw = EmbeddingMatrix::new(batch, net.predictor.out_dim(zdim), q)?;
    let z1 = l2_normalize_rows(&z_raw);
    let q1 = l2_normalize_rows(&q1_raw);
    let mut zero_rows = z1.zero_rows.clone();
    zero_rows.extend(&q1.zero_rows);
    zero_rows.sort_unstable();
    zero_rows.dedup();
    Ok(OnlineForward {
        z1: z1.matrix,
        q1: q1.matrix,
        q1_raw,
        zero_rows,
        cache: ForwardCache {
            batch,
            encoder,
            projector,
            predictor,
        },
    })
}

/// Unit projections of a branch (no predictor, no cache).
pub fn forward_target(
    branch: &Branch,
    x: &EmbeddingMatrix,
    mode: BnMode,
) -> Result<EmbeddingMatrix> {
    let in_dim = encoder_in_dim(branch);
    if in_dim > 0 {
        check_input(x, in_dim)?;
    }
    let batch = x.rows();
    let (h, _) = forward_mlp(&branch.encoder, x.as_slice().to_vec(), batch, mode)?;
    let (z, _) = forward_mlp(&branch.projector, h, batch, mode)?;
    let dim = branch.projector.out_dim(branch.encoder.out_dim(x.cols()));
    Ok(l2_normalize_rows(&EmbeddingMatrix::new(batch, dim, z)?).matrix)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub encoder: Vec<LayerGrad>,
    pub projector: Vec<LayerGrad>,
    pub predictor: Vec<LayerGrad>,
}

impl NetworkGrads {
    /// Gradient tensors in the order of [`OnlineNetwork::trainable_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for g in self
            .encoder
            .iter()
            .chain(&self.projector)
            .chain(&self.predictor)
        {
            v.extend([&g.weight[..], &g.bias[..]]);
            if let (Some(gamma), Some(beta)) = (&g.gamma, &g.beta) {
                v.extend([&gamma[..], &beta[..]]);
            }
        }
        v
    }

    pub fn add_assign(&mut self, other: &NetworkGrads) {
        let pairs = self
            .encoder
            .iter_mut()
            .chain(&mut self.projector)
            .chain(&mut self.predictor)
            .zip(
                other
                    .encoder
                    .iter()
                    .chain(&other.projector)
                    .chain(&other.predictor),
            );
        for (a, b) in pairs {
            add(&mut a.weight, &b.weight);
            add(&mut a.bias, &b.bias);
            if let (Some(x), Some(y)) = (&mut a.gamma, &b.gamma) {
                add(x, y);
            }
            if let (Some(x), Some(y)) = (&mut a.beta, &b.beta) {
                add(x, y);
            }
        }
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn backward_layer(
    layer: &Layer,
    cache: &LayerCache,
    batch: usize,
    mut grad: Vec<f64>,
) -> (Vec<f64>, LayerGrad) {
    let (din, dout) = (layer.in_dim, layer.out_dim);
    if layer.relu {
        for (g, out) in grad.iter_mut().zip(&cache.output) {
            if *out <= 0.0 {
                *g = 0.0;
            }
        }
    }
    let (mut gamma_grad, mut beta_grad) = (None, None);
    if let Some(bn) = &layer.bn {
        let mut dgamma = vec![0.0; dout];
        let mut dbeta = vec![0.0; dout];
        for b in 0..batch {
            for o in 0..dout {
                let i = b * dout + o;
                dgamma[o] += grad[i] * cache.xhat[i];
                dbeta[o] += grad[i];
            }
        }
        // dxhat = grad * gamma, then through the normalization.
        if cache.batch_stats {
            let n = batch as f64;
            let mut sum_dx = vec![0.0; dout];
            let mut sum_dx_xhat = vec![0.0; dout];
            for b in 0..batch {
                for o in 0..dout {
                    let i = b * dout + o;
                    let dxhat = grad[i] * bn.gamma[o];
                    sum_dx[o] += dxhat;
                    sum_dx_xhat[o] += dxhat * cache.xhat[i];
                }
            }
            for b in 0..batch {
                for o in 0..dout {
                    let i = b * dout + o;
                    let dxhat = grad[i] * bn.gamma[o];
                    grad[i] = cache.inv_std[o] / n
                        * (n * dxhat - sum_dx[o] - cache.xhat[i] * sum_dx_xhat[o]);
                }
            }
        } else {
            for b in 0..batch {
                for o in 0..dout {
                    let i = b * dout + o;
                    grad[i] *= bn.gamma[o] * cache.inv_std[o];
                }
            }
        }
        gamma_grad = Some(dgamma);
        beta_grad = Some(dbeta);
    }
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    let mut dx = vec![0.0; batch * din];
    for b in 0..batch {
        let xb = &cache.input[b * din..(b + 1) * din];
        let dxb = &mut dx[b * din..(b + 1) * din];
        for o in 0..dout {
            let g = grad[b * dout + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let w_row = &layer.weight[o * din..(o + 1) * din];
            let dw_row = &mut dw[o * din..(o + 1) * din];
            for j in 0..din {
                dw_row[j] += g * xb[j];
                dxb[j] += g * w_row[j];
            }
        }
    }
    (
        dx,
        LayerGrad {
            weight: dw,
            bias: db,
            gamma: gamma_grad,
            beta: beta_grad,
        },
    )
}

fn backward_mlp(mlp: &Mlp, cache: &MlpCache, grad: Vec<f64>) -> (Vec<f64>, Vec<LayerGrad>) {
    let mut g = grad;
    let mut grads = Vec::with_capacity(mlp.layers.len());
    for (layer, c) in mlp.layers.iter().zip(&cache.layers).rev() {
        let (dx, lg) = backward_layer(layer, c, cache.batch, g);
        grads.push(lg);
        g = dx;
    }
    grads.reverse();
    (g, grads)
}

/// Gradients of every online parameter given `d loss / d q1_raw`.
pub fn backward(
    net: &OnlineNetwork,
    cache: &ForwardCache,
    grad_q_raw: &EmbeddingMatrix,
) -> Result<NetworkGrads> {
    if grad_q_raw.rows() != cache.batch {
        return Err(Error::ArityMismatch {
            what: "gradient rows",
            expected: cache.batch,
            got: grad_q_raw.rows(),
        });
    }
    let shapes_match = [
        (&net.branch.encoder, &cache.encoder),
        (&net.branch.projector, &cache.projector),
        (&net.predictor, &cache.predictor),
    ]
    .iter()
    .all(|(m, c)| m.layers.len() == c.layers.len());
    if !shapes_match {
        return Err(invalid("forward cache does not match the network"));
    }
    let expected_cols = net
        .predictor
        .layers
        .last()
        .or(net.branch.projector.layers.last())
        .or(net.branch.encoder.layers.last())
        .map_or(grad_q_raw.cols(), |l| l.out_dim);
    if grad_q_raw.cols() != expected_cols {
        return Err(Error::DimensionMismatch {
            expected: expected_cols,
            got: grad_q_raw.cols(),
        });
    }
    let g = grad_q_raw.as_slice().to_vec();
    let (g, predictor) = backward_mlp(&net.predictor, &cache.predictor, g);
    let (g, projector) = backward_mlp(&net.branch.projector, &cache.projector, g);
    let (_, encoder) = backward_mlp(&net.branch.encoder, &cache.encoder, g);
    Ok(NetworkGrads {
        encoder,
        projector,
        predictor,
    })
}

/// Folds the batch statistics of a training-mode forward into the running
/// statistics (unbiased variance, momentum [`BN_MOMENTUM`]).
pub fn update_running_stats(net: &mut OnlineNetwork, cache: &ForwardCache) {
    let n = cache.batch as f64;
    let pairs = [
        (&mut net.branch.encoder, &cache.encoder),
        (&mut net.branch.projector, &cache.projector),
        (&mut net.predictor, &cache.predictor),
    ];
    for (mlp, mc) in pairs {
        for (layer, lc) in mlp.layers.iter_mut().zip(&mc.layers) {
            let Some(bn) = layer.bn.as_mut() else {
                continue;
            };
            if !lc.batch_stats {
                continue;
            }
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for o in 0..layer.out_dim {
                bn.running_mean[o] =
                    (1.0 - BN_MOMENTUM) * bn.running_mean[o] + BN_MOMENTUM * lc.batch_mean[o];
                bn.running_var[o] = (1.0 - BN_MOMENTUM) * bn.running_var[o]
                    + BN_MOMENTUM * lc.batch_var[o] * unbias;
            }
        }
    }
}

/// Warmup from `start_lr` to `peak_lr`, then cosine annealing to `floor_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start_lr: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl LrSchedule {
    pub fn new(warmup_epochs: f64, total_epochs: f64) -> Self {
        Self {
            start_lr: 1e-4,
            peak_lr: 0.1,
            floor_lr: 0.0,
            warmup_epochs,
            total_epochs,
        }
    }

    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(0.0..=self.total_epochs).contains(&epoch) {
            return Err(invalid(format!(
                "epoch {epoch} outside schedule [0, {}]",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            let frac = epoch / self.warmup_epochs;
            return Ok(self.start_lr + (self.peak_lr - self.start_lr) * frac);
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return Ok(self.peak_lr);
        }
        let progress = (epoch - self.warmup_epochs) / span;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.floor_lr + (self.peak_lr - self.floor_lr) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub step: u64,
    pub epoch: u64,
    /// One buffer per trainable tensor.
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(
        net: &OnlineNetwork,
        momentum: f64,
        weight_decay: f64,
        schedule: LrSchedule,
    ) -> Self {
        Self {
            momentum,
            weight_decay,
            schedule,
            step: 0,
            epoch: 0,
            buffers: net
                .trainable_sizes()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect(),
        }
    }
}

/// Free-function form of [`LrSchedule::lr_at`] on an optimizer's schedule.
pub fn lr_at(opt: &OptimizerState, epoch: f64) -> Result<f64> {
    opt.schedule.lr_at(epoch)
}

/// `buf = momentum * buf + (grad + wd * param); param -= lr * buf`.
pub fn sgd_step(
    net: &mut OnlineNetwork,
    grads: &NetworkGrads,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut params = net.trainable_mut();
    if grad_tensors.len() != params.len() || opt.buffers.len() != params.len() {
        return Err(invalid(
            "gradient, buffer and parameter tensor counts differ",
        ));
    }
    for ((p, g), buf) in params.iter_mut().zip(&grad_tensors).zip(&opt.buffers) {
        if p.len() != g.len() || p.len() != buf.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    for ((p, g), buf) in params
        .iter_mut()
        .zip(grad_tensors)
        .zip(opt.buffers.iter_mut())
    {
        for ((pi, gi), bi) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
            *bi = opt.momentum * *bi + (gi + opt.weight_decay * *pi);
            *pi -= lr * *bi;
        }
    }
    opt.step += 1;
    Ok(())
}

/// `target = m * target + (1 - m) * online` over every tensor, running
/// statistics included.
pub fn ema_update(target: &mut Branch, online: &Branch, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid(format!("EMA momentum {m} outside [0, 1]")));
    }
    let src = online.tensors();
    let mut dst = target.tensors_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
        return Err(invalid("target and online branches differ in shape"));
    }
    for (t, o) in dst.iter_mut().zip(src) {
        for (ti, oi) in t.iter_mut().zip(o) {
            *ti = m * *ti + (1.0 - m) * oi;
        }
    }
    Ok(())
}

/// Online network, EMA target branch and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: ArchSpec,
    pub online: OnlineNetwork,
    pub target: Branch,
    pub optimizer: OptimizerState,
}

impl NetworkParams {
    pub fn init(
        arch: ArchSpec,
        seed: u64,
        momentum: f64,
        weight_decay: f64,
        schedule: LrSchedule,
    ) -> Result<Self> {
        let mut rng = RngState::derive(seed, &[0x1417]);
        let online = OnlineNetwork::init(&arch, &mut rng)?;
        let optimizer = OptimizerState::new(&online, momentum, weight_decay, schedule);
        Ok(Self {
            arch,
            target: online.branch.clone(),
            online,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(bn: bool) -> ArchSpec {
        ArchSpec {
            input_dim: 3,
            encoder: vec![4],
            projector: vec![5, 3],
            predictor: vec![4, 3],
            batch_norm: if bn {
                BnFlags::default()
            } else {
                BnFlags::none()
            },
        }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = RngState::new(seed);
        EmbeddingMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_network_flags_zero_rows() {
        let mut rng = RngState::new(0);
        let mut net = OnlineNetwork::init(&tiny_arch(false), &mut rng).unwrap();
        for t in net.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = forward_online(&net, &batch(2, 3, 1), BnMode::Batch).unwrap();
        assert!(out.q1_raw.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(out.zero_rows, vec![0, 1]);
    }

    #[test]
    fn single_layer_is_normalized_affine_map() {
        let arch = ArchSpec {
            input_dim: 2,
            encoder: vec![],
            projector: vec![2],
            predictor: vec![2],
            batch_norm: BnFlags::none(),
        };
        let mut rng = RngState::new(0);
        let mut net = OnlineNetwork::init(&arch, &mut rng).unwrap();
        let p = &mut net.branch.projector.layers[0];
        p.weight = vec![2.0, 0.0, 0.0, 1.0];
        p.bias = vec![0.0, 1.0];
        let q = &mut net.predictor.layers[0];
        q.weight = vec![1.0, 0.0, 0.0, 1.0];
        q.bias = vec![0.0, 0.0];
        let x = EmbeddingMatrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let out = forward_online(&net, &x, BnMode::Batch).unwrap();
        // W x + b = (1.2, 1.8) -> normalized
        let n = (1.2f64 * 1.2 + 1.8 * 1.8).sqrt();
        assert!((out.z1.row(0)[0] - 1.2 / n).abs() < 1e-15);
        assert!((out.z1.row(0)[1] - 1.8 / n).abs() < 1e-15);
        assert_eq!(out.q1.row(0), out.z1.row(0));
    }

    #[test]
    fn shapes_follow_batch() {
        let mut rng = RngState::new(4);
        let net = OnlineNetwork::init(&tiny_arch(true), &mut rng).unwrap();
        let out = forward_online(&net, &batch(7, 3, 2), BnMode::Batch).unwrap();
        assert_eq!((out.z1.rows(), out.q1.rows()), (7, 7));
        let z2 = forward_target(&net.branch, &batch(7, 3, 2), BnMode::Batch).unwrap();
        assert_eq!(z2.rows(), 7);
        assert_eq!(z2, out.z1);
        assert!(forward_online(&net, &batch(2, 4, 2), BnMode::Batch).is_err());
    }

    #[test]
    fn running_mode_is_deterministic() {
        let mut rng = RngState::new(4);
        let net = OnlineNetwork::init(&tiny_arch(true), &mut rng).unwrap();
        let x = batch(5, 3, 3);
        let a = forward_target(&net.branch, &x, BnMode::Running).unwrap();
        let b = forward_target(&net.branch, &x.select_rows(&[0]), BnMode::Running).unwrap();
        assert_eq!(a.row(0), b.row(0));
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = RngState::new(4);
        let net = OnlineNetwork::init(&tiny_arch(true), &mut rng).unwrap();
        let out = forward_online(&net, &batch(4, 3, 5), BnMode::Batch).unwrap();
        let g = backward(&net, &out.cache, &EmbeddingMatrix::zeros(4, 3).unwrap()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
        assert!(backward(&net, &out.cache, &EmbeddingMatrix::zeros(3, 3).unwrap()).is_err());
        assert!(backward(&net, &out.cache, &EmbeddingMatrix::zeros(4, 2).unwrap()).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut rng = RngState::new(4);
        let mut net = OnlineNetwork::init(&tiny_arch(false), &mut rng).unwrap();
        let out = forward_online(&net, &batch(4, 3, 5), BnMode::Batch).unwrap();
        let grads = backward(&net, &out.cache, &batch(4, 3, 6)).unwrap();
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, 0.9, 0.001, LrSchedule::new(1.0, 2.0));
        sgd_step(&mut net, &grads, &mut opt, 0.0).unwrap();
        assert_eq!(net, before);

        let mut plain = OptimizerState::new(&net, 0.0, 0.0, LrSchedule::new(1.0, 2.0));
        sgd_step(&mut net, &grads, &mut plain, 0.5).unwrap();
        let w0 = before.branch.encoder.layers[0].weight[0];
        let g0 = grads.encoder[0].weight[0];
        assert_eq!(net.branch.encoder.layers[0].weight[0], w0 - 0.5 * g0);
    }

    #[test]
    fn sgd_momentum_scalar() {
        // p = 2, g = 0.5, momentum 0.9, wd 0.001, lr 0.1, two steps.
        // buf1 = 0.5 + 0.002 = 0.502; p1 = 2 - 0.0502 = 1.9498
        // buf2 = 0.9 * 0.502 + 0.5 + 0.001 * 1.9498 = 0.9537498; p2 = 1.9498 - 0.09537498
        let arch = ArchSpec {
            input_dim: 1,
            encoder: vec![],
            projector: vec![1],
            predictor: vec![],
            batch_norm: BnFlags::none(),
        };
        let mut rng = RngState::new(0);
        let mut net = OnlineNetwork::init(&arch, &mut rng).unwrap();
        net.branch.projector.layers[0].weight = vec![2.0];
        net.branch.projector.layers[0].bias = vec![0.0];
        let grads = NetworkGrads {
            encoder: vec![],
            projector: vec![LayerGrad {
                weight: vec![0.5],
                bias: vec![0.0],
                gamma: None,
                beta: None,
            }],
            predictor: vec![],
        };
        let mut opt = OptimizerState::new(&net, 0.9, 0.001, LrSchedule::new(1.0, 2.0));
        sgd_step(&mut net, &grads, &mut opt, 0.1).unwrap();
        assert!((net.branch.projector.layers[0].weight[0] - 1.9498).abs() < 1e-15);
        sgd_step(&mut net, &grads, &mut opt, 0.1).unwrap();
        assert!((net.branch.projector.layers[0].weight[0] - (1.9498 - 0.09537498)).abs() < 1e-14);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(20.0, 200.0);
        assert_eq!(s.lr_at(0.0).unwrap(), 0.0001);
        assert!((s.lr_at(20.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(s.lr_at(200.0).unwrap().abs() < 1e-15);
        assert!((s.lr_at(20.0 - 1e-9).unwrap() - 0.1).abs() < 1e-9);
        assert!(s.lr_at(-1.0).is_err());
        assert!(s.lr_at(200.5).is_err());
        assert!((s.lr_at(110.0).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn ema_examples() {
        let mut rng = RngState::new(0);
        let online = OnlineNetwork::init(&tiny_arch(true), &mut rng).unwrap();
        let mut target = online.branch.clone();
        let mut zero = online.branch.clone();
        zero.tensors_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        target
            .tensors_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|v| *v = 1.0));
        ema_update(&mut target, &zero, 0.99).unwrap();
        assert!(target
            .tensors()
            .iter()
            .all(|t| t.iter().all(|v| *v == 0.99)));

        let mut same = online.branch.clone();
        ema_update(&mut same, &online.branch, 0.37).unwrap();
        for (a, b) in same.tensors().iter().zip(online.branch.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }

        ema_update(&mut target, &online.branch, 0.0).unwrap();
        assert_eq!(target, online.branch);
        assert!(ema_update(&mut target, &online.branch, 1.5).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut rng = RngState::new(0);
        let mut net = OnlineNetwork::init(&tiny_arch(true), &mut rng).unwrap();
        let out = forward_online(&net, &batch(8, 3, 1), BnMode::Batch).unwrap();
        update_running_stats(&mut net, &out.cache);
        let bn = net.branch.encoder.layers[0].bn.as_ref().unwrap();
        assert!(bn.running_mean.iter().any(|m| *m != 0.0));
        assert!(bn.running_var.iter().all(|v| v.is_finite() && *v > 0.0));
    }
}
