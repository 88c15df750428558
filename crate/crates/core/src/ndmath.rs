//! Dense row-major matrices and a small tanh MLP with hand-written backprop.
//!
//! Everything here is 64-bit and allocation-light. Parameters are plain values:
//! an SGD step returns a new [`MlpParams`] instead of mutating in place, which
//! is what the meta-learning loops need (the meta parameters must survive the
//! inner adaptation untouched).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{rows}x{cols} = {} entries", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} of length {cols}"),
                    r.len(),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim(
                "Matrix::matvec",
                format!("vector of length {} for {}x{} matrix", self.cols, self.rows, self.cols),
                x.len(),
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }
}

/// Sequential left-to-right sum of products starting from `0.0`.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `dot(w, x_i)` for four rows at once; each sum keeps the order of [`dot`].
#[inline]
fn dot4(w: &[f64], x0: &[f64], x1: &[f64], x2: &[f64], x3: &[f64]) -> [f64; 4] {
    let n = w.len();
    let (x0, x1, x2, x3) = (&x0[..n], &x1[..n], &x2[..n], &x3[..n]);
    let mut acc = [0.0; 4];
    for k in 0..n {
        let wk = w[k];
        acc[0] += wk * x0[k];
        acc[1] += wk * x1[k];
        acc[2] += wk * x2[k];
        acc[3] += wk * x3[k];
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by its activation. `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Weights and biases of a feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Per-layer activations of a batched forward pass, kept for backprop.
/// `acts[0]` is the input batch and `acts[l + 1]` the output of layer `l`.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    acts: Vec<Matrix>,
}

impl BatchTrace {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("trace always holds the input")
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::dim(
                    "MlpParams::new bias",
                    format!("layer {l} bias of length {}", layer.output_dim()),
                    layer.bias.len(),
                ));
            }
            if l > 0 && layer.input_dim() != layers[l - 1].output_dim() {
                return Err(Error::dim(
                    "MlpParams::new",
                    format!("layer {l} input {}", layers[l - 1].output_dim()),
                    layer.input_dim(),
                ));
            }
        }
        Ok(MlpParams { layers })
    }

    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes[1..].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes after the input must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    fn activation_for(l: usize, n_layers: usize) -> Activation {
        if l + 1 == n_layers {
            Activation::Identity
        } else {
            Activation::Tanh
        }
    }

    /// Tanh hidden layers, linear output, weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut draw = || rng.random_range(-bound..=bound);
                let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| draw()).collect();
                let bias: Vec<f64> = (0..fan_out).map(|_| draw()).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, weight).expect("sized above"),
                    bias,
                    activation: Self::activation_for(l, n),
                }
            })
            .collect();
        MlpParams::new(layers)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|l| Layer {
                weight: Matrix::zeros(layer_sizes[l + 1], layer_sizes[l]),
                bias: vec![0.0; layer_sizes[l + 1]],
                activation: Self::activation_for(l, n),
            })
            .collect();
        MlpParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim(
                "forward input",
                format!("length {} (layer sizes {:?})", self.input_dim(), self.layer_sizes()),
                input.len(),
            ));
        }
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut y = layer.weight.matvec(&x)?;
            for (v, b) in y.iter_mut().zip(&layer.bias) {
                *v = layer.activation.apply(*v + b);
            }
            x = y;
        }
        Ok(x)
    }

    fn check_batch(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::dim(
                "batch input columns",
                format!("{} (layer sizes {:?})", self.input_dim(), self.layer_sizes()),
                inputs.cols(),
            ));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer, x: &Matrix) -> Matrix {
        let n_out = layer.output_dim();
        let mut y = Matrix::zeros(x.rows(), n_out);
        let act = layer.activation;
        let blocked = x.rows() / 4 * 4;
        for b in (0..blocked).step_by(4) {
            let (x0, x1, x2, x3) = (x.row(b), x.row(b + 1), x.row(b + 2), x.row(b + 3));
            for o in 0..n_out {
                let s = dot4(layer.weight.row(o), x0, x1, x2, x3);
                let bias = layer.bias[o];
                for (i, v) in s.iter().enumerate() {
                    y.data[(b + i) * n_out + o] = act.apply(v + bias);
                }
            }
        }
        for b in blocked..x.rows() {
            let xr = x.row(b);
            let yr = y.row_mut(b);
            for (o, out) in yr.iter_mut().enumerate() {
                *out = act.apply(dot(layer.weight.row(o), xr) + layer.bias[o]);
            }
        }
        y
    }

    /// Forward pass over a batch (one sample per row).
    ///
    /// Runs feature-major internally so the inner loop spans the batch; every
    /// output is still `act(sum_k w_k x_k + b)` summed in `k` order.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_batch(inputs)?;
        let batch = inputs.rows();
        let mut xt = vec![0.0; inputs.cols() * batch];
        for b in 0..batch {
            for (k, v) in inputs.row(b).iter().enumerate() {
                xt[k * batch + b] = *v;
            }
        }
        const LANES: usize = 8;
        for layer in &self.layers {
            let n_out = layer.output_dim();
            let (bias, act) = (&layer.bias, layer.activation);
            let mut yt = vec![0.0; n_out * batch];
            for o in 0..n_out {
                let w = layer.weight.row(o);
                let y = &mut yt[o * batch..(o + 1) * batch];
                let mut b0 = 0;
                while b0 + LANES <= batch {
                    let mut acc = [0.0; LANES];
                    for (k, &wk) in w.iter().enumerate() {
                        let x: &[f64; LANES] = xt[k * batch + b0..k * batch + b0 + LANES]
                            .try_into()
                            .expect("lane slice");
                        for i in 0..LANES {
                            acc[i] += wk * x[i];
                        }
                    }
                    for i in 0..LANES {
                        y[b0 + i] = act.apply(acc[i] + bias[o]);
                    }
                    b0 += LANES;
                }
                for b in b0..batch {
                    let mut acc = 0.0;
                    for (k, &wk) in w.iter().enumerate() {
                        acc += wk * xt[k * batch + b];
                    }
                    y[b] = act.apply(acc + bias[o]);
                }
            }
            xt = yt;
        }
        let n_out = self.output_dim();
        let mut out = Matrix::zeros(batch, n_out);
        for o in 0..n_out {
            for b in 0..batch {
                out.data[b * n_out + o] = xt[o * batch + b];
            }
        }
        Ok(out)
    }

    pub fn forward_batch_trace(&self, inputs: &Matrix) -> Result<BatchTrace> {
        self.check_batch(inputs)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.clone());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, acts.last().expect("nonempty"));
            acts.push(next);
        }
        Ok(BatchTrace { acts })
    }

    /// Backprop of `sum_b output_grads[b] . f(inputs[b])`.
    ///
    /// Parameter gradients and the input gradient are summed over the batch rows.
    pub fn backward_batch(&self, trace: &BatchTrace, output_grads: &Matrix) -> Result<Gradients> {
        let out = trace.output();
        if output_grads.shape() != out.shape() {
            return Err(Error::dim(
                "backward output gradient",
                format!("{:?}", out.shape()),
                format!("{:?}", output_grads.shape()),
            ));
        }
        if trace.acts.len() != self.layers.len() + 1 || trace.acts[0].cols() != self.input_dim() {
            return Err(Error::dim(
                "backward trace",
                format!("trace of {:?}", self.layer_sizes()),
                format!("{} activations", trace.acts.len()),
            ));
        }
        let batch = out.rows();
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = output_grads.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let y = &trace.acts[l + 1];
            let x = &trace.acts[l];
            let mut delta = upstream;
            for (d, yv) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *d *= layer.activation.derivative_from_output(*yv);
            }
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            let mut down = Matrix::zeros(batch, layer.input_dim());
            for b in 0..batch {
                let xr = x.row(b);
                let dr = delta.row(b);
                let down_r = down.row_mut(b);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xv) in gw.row_mut(o).iter_mut().zip(xr) {
                        *g += d * xv;
                    }
                    for (g, w) in down_r.iter_mut().zip(layer.weight.row(o)) {
                        *g += d * w;
                    }
                }
            }
            upstream = down;
        }
        for b in 0..batch {
            for (g, v) in grads.input.iter_mut().zip(upstream.row(b)) {
                *g += v;
            }
        }
        Ok(grads)
    }

    /// Gradient of `output_grad . f(input)` with respect to every parameter
    /// and to the input vector.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<Gradients> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("backward input", self.input_dim(), input.len()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::dim(
                "backward output gradient",
                self.output_dim(),
                output_grad.len(),
            ));
        }
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let g = Matrix::from_vec(1, output_grad.len(), output_grad.to_vec())?;
        let trace = self.forward_batch_trace(&x)?;
        self.backward_batch(&trace, &g)
    }

    fn check_isomorphic(&self, grads: &Gradients, context: &'static str) -> Result<()> {
        let same = grads.weights.len() == self.layers.len()
            && self
                .layers
                .iter()
                .zip(&grads.weights)
                .zip(&grads.biases)
                .all(|((l, w), b)| l.weight.shape() == w.shape() && l.bias.len() == b.len());
        if same {
            Ok(())
        } else {
            Err(Error::dim(
                context,
                format!("gradients shaped like {:?}", self.layer_sizes()),
                "differently shaped gradients",
            ))
        }
    }

    /// Returns `p - lr * g` for every parameter.
    pub fn sgd_step(&self, grads: &Gradients, lr: f64) -> Result<MlpParams> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        self.check_isomorphic(grads, "sgd_step")?;
        let mut next = self.clone();
        for (l, (layer, (gw, gb))) in next
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
            .enumerate()
        {
            if !gw.is_finite() || gb.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {l}")));
            }
            for (p, g) in layer.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *p -= lr * g;
            }
            for (p, g) in layer.bias.iter_mut().zip(gb) {
                *p -= lr * g;
            }
        }
        Ok(next)
    }

    /// Elementwise `self + alpha * (other - self)`.
    pub fn interpolate(&self, other: &MlpParams, alpha: f64) -> Result<MlpParams> {
        if self.layer_sizes() != other.layer_sizes() {
            return Err(Error::dim(
                "interpolate",
                format!("{:?}", self.layer_sizes()),
                format!("{:?}", other.layer_sizes()),
            ));
        }
        let mut out = self.clone();
        for (lo, lb) in out.layers.iter_mut().zip(&other.layers) {
            lerp_into(lo.weight.as_mut_slice(), lb.weight.as_slice(), alpha);
            lerp_into(&mut lo.bias, &lb.bias, alpha);
        }
        Ok(out)
    }

    /// Visits every parameter in a fixed order (layer, weights row-major, then biases).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the parameter with flat index `idx` (same order as [`params_flat`](Self::params_flat)).
    pub fn param_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            if idx < nw {
                return l.weight.as_mut_slice().get_mut(idx);
            }
            idx -= nw;
            if idx < l.bias.len() {
                return l.bias.get_mut(idx);
            }
            idx -= l.bias.len();
        }
        None
    }
}

/// `a += alpha * (b - a)`, landing exactly on `b` when `alpha == 1`.
pub(crate) fn lerp_into(a: &mut [f64], b: &[f64], alpha: f64) {
    if alpha == 1.0 {
        a.copy_from_slice(b);
        return;
    }
    for (x, y) in a.iter_mut().zip(b) {
        *x += alpha * (y - *x);
    }
}

/// Gradients shaped like an [`MlpParams`], plus the gradient with respect to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            weights: params
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.output_dim()]).collect(),
            input: vec![0.0; params.input_dim()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
        self.input.iter_mut().for_each(|v| *v *= factor);
    }

    /// Same layout as [`MlpParams::params_flat`].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.params_flat()
            .iter()
            .chain(&self.input)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_output_equals_bias() {
        let mut p = MlpParams::zeros(&[3, 4, 2]).unwrap();
        p.layers_mut()[1].bias = vec![0.25, -1.5];
        // hidden bias stays zero so tanh(0) = 0 feeds the output layer
        let y = p.forward(&[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(y, vec![0.25, -1.5]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut w = Matrix::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let p = MlpParams::new(vec![Layer {
            weight: w,
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = [1.5, -0.25, 3.0];
        assert_eq!(p.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_dimension_mismatch_reports_both_shapes() {
        let p = MlpParams::zeros(&[2, 3, 1]).unwrap();
        let err = p.forward(&[1.0, 2.0, 3.0]).unwrap_err().to_string();
        assert!(err.contains("length 2"), "{err}");
        assert!(err.contains("got 3"), "{err}");
    }

    #[test]
    fn forward_batch_matches_rowwise_forward() {
        let p = MlpParams::init(&[4, 7, 5, 2], &mut rng(3)).unwrap();
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|j| (i * 4 + j) as f64 * 0.1 - 1.0).collect())
            .collect();
        let batch = p.forward_batch(&Matrix::from_rows(&rows).unwrap()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(batch.row(i), p.forward(r).unwrap().as_slice());
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let p = MlpParams::init(&[3, 5, 2], &mut rng(1)).unwrap();
        let g = p.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_linear_layer_weight_gradient_is_input() {
        let p = MlpParams::init(&[3, 1], &mut rng(2)).unwrap();
        let x = [0.7, -1.1, 2.5];
        let g = p.backward(&x, &[1.0]).unwrap();
        assert_eq!(g.weights[0].row(0), &x);
        assert_eq!(g.biases[0], vec![1.0]);
        assert_eq!(g.input, p.layers()[0].weight.row(0).to_vec());
    }

    #[test]
    fn backward_rejects_bad_shapes() {
        let p = MlpParams::zeros(&[2, 3, 1]).unwrap();
        assert!(p.backward(&[1.0], &[1.0]).is_err());
        assert!(p.backward(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = MlpParams::zeros(&[1, 1]).unwrap();
        *p.param_mut(0).unwrap() = 1.0;
        let mut g = Gradients::zeros_like(&p);
        g.weights[0].set(0, 0, 2.0);
        let q = p.sgd_step(&g, 0.1).unwrap();
        assert_eq!(q.layers()[0].weight.get(0, 0), 0.8);
    }

    #[test]
    fn sgd_zero_grad_or_zero_lr_is_identity() {
        let p = MlpParams::init(&[3, 4, 2], &mut rng(9)).unwrap();
        let zero = Gradients::zeros_like(&p);
        assert_eq!(p.sgd_step(&zero, 0.5).unwrap(), p);
        let g = p.backward(&[1.0, 2.0, 3.0], &[1.0, -1.0]).unwrap();
        assert_eq!(p.sgd_step(&g, 0.0).unwrap(), p);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_naming_layer() {
        let p = MlpParams::init(&[2, 3, 1], &mut rng(4)).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.biases[1][0] = f64::NAN;
        let err = p.sgd_step(&g, 0.1).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
        assert!(p.sgd_step(&Gradients::zeros_like(&p), -1.0).is_err());
    }

    #[test]
    fn interpolate_endpoints() {
        let a = MlpParams::init(&[2, 3, 1], &mut rng(5)).unwrap();
        let b = MlpParams::init(&[2, 3, 1], &mut rng(6)).unwrap();
        assert_eq!(a.interpolate(&b, 0.0).unwrap(), a);
        assert_eq!(a.interpolate(&b, 1.0).unwrap(), b);
        assert!(a.interpolate(&MlpParams::zeros(&[2, 2, 1]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = MlpParams::init(&[16, 8, 1], &mut rng(7)).unwrap();
        let bound = 0.25;
        assert!(p.layers()[0]
            .weight
            .as_slice()
            .iter()
            .all(|w| w.abs() <= bound));
        assert_eq!(p.layers()[0].activation, Activation::Tanh);
        assert_eq!(p.layers()[1].activation, Activation::Identity);
    }
}
