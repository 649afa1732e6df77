//! Dense feed-forward classifier with exact hand-written gradients.
//!
//! Parameters live in one flat `f64` vector. For each layer `l` with
//! `fan_in = dims[l]` and `fan_out = dims[l + 1]` the layout is the row-major
//! weight matrix (`fan_out x fan_in`) followed by the `fan_out` biases. Hidden
//! layers apply the configured activation; the output layer is linear and
//! produces one logit per class.
//!
//! Losses are mean-reduced over the batch so thresholds on them do not depend
//! on batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    pub activation: Activation,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("net.input_dim must be >= 1"));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("net.hidden_dims[{pos}] must be >= 1")));
        }
        if self.n_classes < 2 {
            return Err(Error::config("net.n_classes must be >= 2"));
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.n_classes);
        dims
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.dims())
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::argument(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Stacks the rows of `self` on top of the rows of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::argument("vstack column mismatch"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Flat parameter vector plus the layer widths it was laid out for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    values: Vec<f64>,
    dims: Vec<usize>,
}

impl ParamSet {
    pub fn from_values(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::argument("a parameter set needs at least two layer widths"));
        }
        let expected = param_count(&dims);
        if values.len() != expected {
            return Err(Error::argument(format!(
                "parameter vector has {} entries, expected {expected}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter entry {i}")));
        }
        Ok(Self { values, dims })
    }

    pub fn zeros(cfg: &NetConfig) -> Self {
        let dims = cfg.dims();
        Self {
            values: vec![0.0; param_count(&dims)],
            dims,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(cfg: &NetConfig, rng: &mut Rng64) -> Self {
        let dims = cfg.dims();
        let mut values = Vec::with_capacity(param_count(&dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { values, dims }
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A set with the same layout and the given values; used for gradients.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.dims.clone(), values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn check_net(&self, cfg: &NetConfig) -> Result<()> {
        if self.dims != cfg.dims() {
            return Err(Error::config(format!(
                "parameter layout {:?} does not match network {:?}",
                self.dims,
                cfg.dims()
            )));
        }
        Ok(())
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.dims.windows(2).take(l).map(|w| (w[0] + 1) * w[1]).sum();
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let weights = &self.values[offset..offset + fan_in * fan_out];
        let biases = &self.values[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        (weights, biases)
    }
}

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::argument("empty batch"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::argument(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, cfg: &NetConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::argument("empty batch"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= cfg.n_classes) {
            return Err(Error::argument(format!(
                "label {bad} out of range for {} classes",
                cfg.n_classes
            )));
        }
        Ok(())
    }
}

struct Trace {
    /// Pre-activations per layer (`z`), one matrix per non-input layer.
    pre: Vec<Matrix>,
    /// Layer outputs; `post[0]` is the input and the last entry holds the logits.
    post: Vec<Matrix>,
}

fn affine(input: &Matrix, weights: &[f64], biases: &[f64], fan_out: usize) -> Matrix {
    let fan_in = input.cols();
    let mut out = Matrix::zeros(input.rows(), fan_out);
    for (i, x) in input.iter_rows().enumerate() {
        let row = out.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            let w = &weights[j * fan_in..(j + 1) * fan_in];
            *o = biases[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn run_forward(params: &ParamSet, cfg: &NetConfig, inputs: &Matrix) -> Result<Trace> {
    params.check_net(cfg)?;
    if inputs.cols() != cfg.input_dim {
        return Err(Error::config(format!(
            "input has {} columns, network expects {}",
            inputs.cols(),
            cfg.input_dim
        )));
    }
    let n_layers = params.dims.len() - 1;
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers + 1);
    post.push(inputs.clone());
    for l in 0..n_layers {
        let (w, b) = params.layer(l);
        let z = affine(&post[l], w, b, params.dims[l + 1]);
        if z.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("forward pass, layer {l}")));
        }
        let a = if l + 1 < n_layers {
            let data = z.as_slice().iter().map(|&v| cfg.activation.apply(v)).collect();
            Matrix::new(z.rows(), z.cols(), data)?
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    Ok(Trace { pre, post })
}

/// Logits for every input row.
pub fn forward(params: &ParamSet, cfg: &NetConfig, inputs: &Matrix) -> Result<Matrix> {
    let mut trace = run_forward(params, cfg, inputs)?;
    Ok(trace.post.pop().expect("trace holds at least the input"))
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&g| (g - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::argument("empty batch"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::argument("logit rows and labels differ in length"));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        if y >= row.len() {
            return Err(Error::argument(format!("label {y} out of range")));
        }
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn loss(params: &ParamSet, cfg: &NetConfig, batch: &LabeledBatch) -> Result<f64> {
    batch.check(cfg)?;
    ce_loss(&forward(params, cfg, &batch.inputs)?, &batch.labels)
}

/// Cross-entropy of every row separately.
pub fn per_sample_losses(params: &ParamSet, cfg: &NetConfig, batch: &LabeledBatch) -> Result<Vec<f64>> {
    batch.check(cfg)?;
    let logits = forward(params, cfg, &batch.inputs)?;
    Ok(logits
        .iter_rows()
        .zip(&batch.labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .collect())
}

/// Loss and accuracy in one forward pass.
pub fn evaluate(params: &ParamSet, cfg: &NetConfig, batch: &LabeledBatch) -> Result<(f64, f64)> {
    batch.check(cfg)?;
    let logits = forward(params, cfg, &batch.inputs)?;
    Ok((ce_loss(&logits, &batch.labels)?, accuracy(&logits, &batch.labels)))
}

/// Mean cross-entropy and its exact gradient by backpropagation.
pub fn loss_and_grad(
    params: &ParamSet,
    cfg: &NetConfig,
    batch: &LabeledBatch,
) -> Result<(f64, ParamSet)> {
    batch.check(cfg)?;
    let trace = run_forward(params, cfg, &batch.inputs)?;
    let logits = trace.post.last().expect("logits");
    let n = batch.len();
    let inv_n = 1.0 / n as f64;

    // dL/dlogits = (softmax - onehot) / n
    let mut loss = 0.0;
    let mut delta = Matrix::zeros(n, cfg.n_classes);
    for (i, (row, &y)) in logits.iter_rows().zip(&batch.labels).enumerate() {
        let lse = log_sum_exp(row);
        loss += lse - row[y];
        let d = delta.row_mut(i);
        for (k, (dk, &g)) in d.iter_mut().zip(row).enumerate() {
            *dk = ((g - lse).exp() - if k == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    loss *= inv_n;

    let dims = &params.dims;
    let n_layers = dims.len() - 1;
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let input = &trace.post[l];
        let mut g = vec![0.0; (fan_in + 1) * fan_out];
        {
            let (gw, gb) = g.split_at_mut(fan_in * fan_out);
            for (x, d) in input.iter_rows().zip(delta.iter_rows()) {
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (gjk, &xk) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(x) {
                        *gjk += dj * xk;
                    }
                }
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("backward pass, layer {l}")));
        }
        grads[l] = g;

        if l > 0 {
            let (w, _) = params.layer(l);
            let z = &trace.pre[l - 1];
            let a = &trace.post[l];
            let mut next = Matrix::zeros(n, fan_in);
            for i in 0..n {
                let d = delta.row(i);
                let out = next.row_mut(i);
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    for (o, &wjk) in out.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                        *o += dj * wjk;
                    }
                }
                for ((o, &zk), &ak) in out.iter_mut().zip(z.row(i)).zip(a.row(i)) {
                    *o *= cfg.activation.derivative(zk, ak);
                }
            }
            delta = next;
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric("loss"));
    }
    let grad = params.with_values(grads.concat())?;
    Ok((loss, grad))
}

/// Returns `params - lr * grad`; the inputs are left untouched.
pub fn sgd_step(params: &ParamSet, grad: &ParamSet, lr: f64) -> Result<ParamSet> {
    if params.dims != grad.dims {
        return Err(Error::argument("gradient layout does not match parameters"));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::argument(format!("step size {lr} must be finite and >= 0")));
    }
    if grad.values.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("sgd step gradient"));
    }
    let values = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    params.with_values(values)
}

/// Central-difference gradient of an arbitrary scalar function of a flat vector.
pub fn finite_diff<F>(point: &[f64], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::argument(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Central-difference estimate of the loss gradient, the oracle for [`loss_and_grad`].
pub fn finite_diff_grad(
    params: &ParamSet,
    cfg: &NetConfig,
    batch: &LabeledBatch,
    eps: f64,
) -> Result<ParamSet> {
    batch.check(cfg)?;
    let dims = params.dims.clone();
    let grad = finite_diff(&params.values, eps, |v| {
        let p = ParamSet {
            values: v.to_vec(),
            dims: dims.clone(),
        };
        loss(&p, cfg, batch)
    })?;
    params.with_values(grad)
}

/// Relative L2 distance `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
