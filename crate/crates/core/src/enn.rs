//! Embedding neural network: a dynamics MLP whose input is extended with a
//! learned per-task embedding vector.
//!
//! The network sees `[norm(s), norm(a), h]` and predicts the normalized state
//! delta. With a fixed identity covariance in normalized-delta space the
//! negative log-likelihood of a transition reduces to half the squared error,
//! which is the loss used throughout.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{Activation, Gradients, Layer, Matrix, MlpParams};

/// One observed transition `(s, a, s')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

impl Transition {
    pub fn new(state: Vec<f64>, action: Vec<f64>, next_state: Vec<f64>) -> Self {
        Transition {
            state,
            action,
            next_state,
        }
    }

    pub fn delta(&self) -> Vec<f64> {
        self.next_state
            .iter()
            .zip(&self.state)
            .map(|(n, s)| n - s)
            .collect()
    }
}

/// Ordered transitions sharing state and action dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    task_id: Option<usize>,
    transitions: Vec<Transition>,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, action_dim: usize, task_id: Option<usize>) -> Self {
        TransitionDataset {
            state_dim,
            action_dim,
            task_id,
            transitions: Vec::new(),
        }
    }

    pub fn from_transitions(
        state_dim: usize,
        action_dim: usize,
        task_id: Option<usize>,
        transitions: Vec<Transition>,
    ) -> Result<Self> {
        let mut ds = Self::new(state_dim, action_dim, task_id);
        for t in transitions {
            ds.push(t)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim {
            return Err(Error::dim(
                "transition state",
                self.state_dim,
                format!("{} / {}", t.state.len(), t.next_state.len()),
            ));
        }
        if t.action.len() != self.action_dim {
            return Err(Error::dim("transition action", self.action_dim, t.action.len()));
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn task_id(&self) -> Option<usize> {
        self.task_id
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Per-dimension affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest standard deviation kept as-is; flatter dimensions get std 1.
const MIN_STD: f64 = 1e-8;

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            n += 1;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > MIN_STD {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.std.len() != self.mean.len() {
            return Err(Error::dim("normalizer", self.mean.len(), self.std.len()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "{what} normalizer needs finite means and positive stds"
            )));
        }
        Ok(())
    }
}

/// Normalization statistics frozen after meta-training data collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state: Normalizer,
    pub action: Normalizer,
    pub delta: Normalizer,
}

impl NormStats {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        NormStats {
            state: Normalizer::identity(state_dim),
            action: Normalizer::identity(action_dim),
            delta: Normalizer::identity(state_dim),
        }
    }

    pub fn fit(datasets: &[TransitionDataset]) -> Result<Self> {
        let first = datasets.first().ok_or(Error::Empty("dataset list"))?;
        let (sd, ad) = (first.state_dim(), first.action_dim());
        if let Some(bad) = datasets
            .iter()
            .find(|d| d.state_dim() != sd || d.action_dim() != ad)
        {
            return Err(Error::dim(
                "NormStats::fit",
                format!("state {sd} / action {ad}"),
                format!("state {} / action {}", bad.state_dim(), bad.action_dim()),
            ));
        }
        let all = || datasets.iter().flat_map(|d| d.transitions());
        let deltas: Vec<Vec<f64>> = all().map(Transition::delta).collect();
        Ok(NormStats {
            state: Normalizer::fit(sd, all().map(|t| t.state.as_slice())),
            action: Normalizer::fit(ad, all().map(|t| t.action.as_slice())),
            delta: Normalizer::fit(sd, deltas.iter().map(Vec::as_slice)),
        })
    }
}

/// Learnable task descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub id: usize,
    pub values: Vec<f64>,
}

impl TaskEmbedding {
    pub fn new(id: usize, values: Vec<f64>) -> Self {
        TaskEmbedding { id, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// One embedding per meta-training task, ids `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: Vec<TaskEmbedding>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        let entries = values
            .into_iter()
            .enumerate()
            .map(|(id, v)| {
                if v.len() != dim {
                    Err(Error::dim("embedding table entry", dim, v.len()))
                } else if v.iter().any(|x| !x.is_finite()) {
                    Err(Error::NonFinite(format!("embedding {id}")))
                } else {
                    Ok(TaskEmbedding::new(id, v))
                }
            })
            .collect::<Result<_>>()?;
        Ok(EmbeddingTable { dim, entries })
    }

    pub fn init<R: Rng + ?Sized>(n: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let values = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-scale..=scale)).collect())
            .collect();
        Self::new(dim, values).expect("generated with matching dims")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&TaskEmbedding> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[TaskEmbedding] {
        &self.entries
    }

    pub fn set(&mut self, id: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::dim("embedding update", self.dim, values.len()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {id}")));
        }
        let entry = self
            .entries
            .get_mut(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no embedding with id {id}")))?;
        entry.values = values;
        Ok(())
    }
}

/// Transitions pre-normalized for a given model: network inputs without the
/// embedding columns, and normalized delta targets.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    state_action: Matrix,
    targets: Matrix,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.rows() == 0
    }

    /// Rows selected by `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> PreparedBatch {
        let pick = |m: &Matrix| {
            let mut out = Matrix::zeros(idx.len(), m.cols());
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).copy_from_slice(m.row(i));
            }
            out
        };
        PreparedBatch {
            state_action: pick(&self.state_action),
            targets: pick(&self.targets),
        }
    }
}

/// Task-conditioned dynamics model.
#[derive(Clone, Debug, PartialEq)]
pub struct EnnModel {
    params: MlpParams,
    state_dim: usize,
    action_dim: usize,
    embedding_dim: usize,
    norm: NormStats,
}

impl EnnModel {
    pub fn new(
        params: MlpParams,
        state_dim: usize,
        action_dim: usize,
        embedding_dim: usize,
        norm: NormStats,
    ) -> Result<Self> {
        let expected_in = state_dim + action_dim + embedding_dim;
        if params.input_dim() != expected_in {
            return Err(Error::dim(
                "EnnModel input layer",
                format!("{state_dim}+{action_dim}+{embedding_dim}"),
                params.input_dim(),
            ));
        }
        if params.output_dim() != state_dim {
            return Err(Error::dim("EnnModel output layer", state_dim, params.output_dim()));
        }
        if norm.state.dim() != state_dim
            || norm.delta.dim() != state_dim
            || norm.action.dim() != action_dim
        {
            return Err(Error::dim(
                "EnnModel normalization stats",
                format!("state {state_dim} / action {action_dim}"),
                format!(
                    "state {} / action {} / delta {}",
                    norm.state.dim(),
                    norm.action.dim(),
                    norm.delta.dim()
                ),
            ));
        }
        norm.state.validate("state")?;
        norm.action.validate("action")?;
        norm.delta.validate("delta")?;
        Ok(EnnModel {
            params,
            state_dim,
            action_dim,
            embedding_dim,
            norm,
        })
    }

    /// Fresh network with `hidden` tanh layers.
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        embedding_dim: usize,
        hidden: &[usize],
        norm: NormStats,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim + embedding_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(state_dim);
        let params = MlpParams::init(&sizes, rng)?;
        Self::new(params, state_dim, action_dim, embedding_dim, norm)
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    /// Same normalization and dimensions, different network parameters.
    pub fn with_params(&self, params: MlpParams) -> Result<Self> {
        Self::new(
            params,
            self.state_dim,
            self.action_dim,
            self.embedding_dim,
            self.norm.clone(),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    fn check_embedding(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.embedding_dim {
            return Err(Error::dim("task embedding", self.embedding_dim, h.len()));
        }
        Ok(())
    }

    fn check_sa(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::dim("state", self.state_dim, s.len()));
        }
        if a.len() != self.action_dim {
            return Err(Error::dim("action", self.action_dim, a.len()));
        }
        Ok(())
    }

    fn write_input(&self, s: &[f64], a: &[f64], h: &[f64], out: &mut [f64]) {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let ns = &self.norm.state;
        let na = &self.norm.action;
        for i in 0..sd {
            out[i] = (s[i] - ns.mean[i]) / ns.std[i];
        }
        for i in 0..ad {
            out[sd + i] = (a[i] - na.mean[i]) / na.std[i];
        }
        out[sd + ad..].copy_from_slice(h);
    }

    fn finish_prediction(&self, s: &[f64], normalized_delta: &[f64]) -> Vec<f64> {
        let nd = &self.norm.delta;
        s.iter()
            .zip(normalized_delta)
            .enumerate()
            .map(|(i, (sv, d))| sv + (d * nd.std[i] + nd.mean[i]))
            .collect()
    }

    /// `s + denorm(f([norm(s), norm(a), h]))`.
    pub fn predict_next_state(&self, s: &[f64], a: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.check_sa(s, a)?;
        self.check_embedding(h)?;
        let mut input = vec![0.0; self.params.input_dim()];
        self.write_input(s, a, h, &mut input);
        let out = self.params.forward(&input)?;
        Ok(self.finish_prediction(s, &out))
    }

    /// Predictions for many `(s, a)` pairs under one embedding.
    pub fn predict_batch<S, A>(&self, states: &[S], actions: &[A], h: &[f64]) -> Result<Vec<Vec<f64>>>
    where
        S: AsRef<[f64]>,
        A: AsRef<[f64]>,
    {
        if states.len() != actions.len() {
            return Err(Error::dim("predict_batch pairs", states.len(), actions.len()));
        }
        self.check_embedding(h)?;
        let mut inputs = Matrix::zeros(states.len(), self.params.input_dim());
        for (r, (s, a)) in states.iter().zip(actions).enumerate() {
            let (s, a) = (s.as_ref(), a.as_ref());
            self.check_sa(s, a)?;
            self.write_input(s, a, h, inputs.row_mut(r));
        }
        let out = self.params.forward_batch(&inputs)?;
        Ok(states
            .iter()
            .enumerate()
            .map(|(r, s)| self.finish_prediction(s.as_ref(), out.row(r)))
            .collect())
    }

    /// Normalizes transitions once so repeated loss evaluations skip it.
    pub fn prepare(&self, batch: &[Transition]) -> Result<PreparedBatch> {
        let sad = self.state_dim + self.action_dim;
        let mut state_action = Matrix::zeros(batch.len(), sad);
        let mut targets = Matrix::zeros(batch.len(), self.state_dim);
        let nd = &self.norm.delta;
        for (r, t) in batch.iter().enumerate() {
            self.check_sa(&t.state, &t.action)?;
            if t.next_state.len() != self.state_dim {
                return Err(Error::dim("next state", self.state_dim, t.next_state.len()));
            }
            let row = state_action.row_mut(r);
            let ns = &self.norm.state;
            let na = &self.norm.action;
            for i in 0..self.state_dim {
                row[i] = (t.state[i] - ns.mean[i]) / ns.std[i];
            }
            for i in 0..self.action_dim {
                row[self.state_dim + i] = (t.action[i] - na.mean[i]) / na.std[i];
            }
            for (i, tv) in targets.row_mut(r).iter_mut().enumerate() {
                *tv = ((t.next_state[i] - t.state[i]) - nd.mean[i]) / nd.std[i];
            }
        }
        Ok(PreparedBatch {
            state_action,
            targets,
        })
    }

    fn inputs_with_embedding(&self, prepared: &PreparedBatch, h: &[f64]) -> Matrix {
        let sad = self.state_dim + self.action_dim;
        let mut inputs = Matrix::zeros(prepared.len(), self.params.input_dim());
        for r in 0..prepared.len() {
            let row = inputs.row_mut(r);
            row[..sad].copy_from_slice(prepared.state_action.row(r));
            row[sad..].copy_from_slice(h);
        }
        inputs
    }

    fn loss_with(&self, params: &MlpParams, h: &[f64], prepared: &PreparedBatch) -> Result<f64> {
        if prepared.is_empty() {
            return Err(Error::Empty("transition batch"));
        }
        self.check_embedding(h)?;
        let out = params.forward_batch(&self.inputs_with_embedding(prepared, h))?;
        let sum: f64 = out
            .as_slice()
            .iter()
            .zip(prepared.targets.as_slice())
            .map(|(o, t)| (o - t) * (o - t))
            .sum();
        Ok(0.5 * sum / prepared.len() as f64)
    }

    fn loss_grads_with(
        &self,
        params: &MlpParams,
        h: &[f64],
        prepared: &PreparedBatch,
    ) -> Result<(f64, Gradients, Vec<f64>)> {
        if prepared.is_empty() {
            return Err(Error::Empty("transition batch"));
        }
        self.check_embedding(h)?;
        let n = prepared.len() as f64;
        let trace = params.forward_batch_trace(&self.inputs_with_embedding(prepared, h))?;
        let mut residual = trace.output().clone();
        let mut sum = 0.0;
        for (o, t) in residual
            .as_mut_slice()
            .iter_mut()
            .zip(prepared.targets.as_slice())
        {
            *o -= t;
            sum += *o * *o;
            *o /= n;
        }
        let grads = params.backward_batch(&trace, &residual)?;
        let h_grad = grads.input[self.state_dim + self.action_dim..].to_vec();
        Ok((0.5 * sum / n, grads, h_grad))
    }

    /// Mean over the batch of `0.5 * ||norm_delta - f(...)||^2`.
    pub fn task_loss(&self, h: &[f64], batch: &[Transition]) -> Result<f64> {
        self.loss_with(&self.params, h, &self.prepare(batch)?)
    }

    pub fn task_loss_prepared(&self, h: &[f64], prepared: &PreparedBatch) -> Result<f64> {
        self.loss_with(&self.params, h, prepared)
    }

    /// Gradients of [`task_loss`](Self::task_loss) with respect to the network
    /// parameters and to the embedding.
    pub fn task_loss_grads(&self, h: &[f64], batch: &[Transition]) -> Result<(Gradients, Vec<f64>)> {
        let (_, g, gh) = self.loss_grads_with(&self.params, h, &self.prepare(batch)?)?;
        Ok((g, gh))
    }

    fn check_adapt_args(steps: usize, lr: f64) -> Result<()> {
        if steps == 0 {
            return Err(Error::InvalidArgument("adaptation needs at least one step".into()));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adaptation learning rate must be positive, got {lr}"
            )));
        }
        Ok(())
    }

    fn sgd_pair(
        &self,
        params: &MlpParams,
        h: &[f64],
        prepared: &PreparedBatch,
        lr: f64,
    ) -> Result<(MlpParams, Vec<f64>)> {
        let (loss, g, gh) = self.loss_grads_with(params, h, prepared)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("task loss during adaptation".into()));
        }
        let next = params.sgd_step(&g, lr)?;
        let next_h = h.iter().zip(&gh).map(|(v, d)| v - lr * d).collect();
        Ok((next, next_h))
    }

    /// `steps` full-batch SGD steps on `(theta, h)` simultaneously. The model
    /// itself is left untouched.
    pub fn inner_adapt(
        &self,
        h: &TaskEmbedding,
        data: &[Transition],
        steps: usize,
        lr: f64,
    ) -> Result<(MlpParams, TaskEmbedding)> {
        Self::check_adapt_args(steps, lr)?;
        let prepared = self.prepare(data)?;
        self.inner_adapt_prepared(h, &prepared, steps, lr)
    }

    pub fn inner_adapt_prepared(
        &self,
        h: &TaskEmbedding,
        prepared: &PreparedBatch,
        steps: usize,
        lr: f64,
    ) -> Result<(MlpParams, TaskEmbedding)> {
        Self::check_adapt_args(steps, lr)?;
        let mut params = self.params.clone();
        let mut hv = h.values.clone();
        for _ in 0..steps {
            (params, hv) = self.sgd_pair(&params, &hv, prepared, lr)?;
        }
        Ok((params, TaskEmbedding::new(h.id, hv)))
    }

    /// Like [`inner_adapt`](Self::inner_adapt) but each step uses a fresh
    /// minibatch of `batch_size` rows drawn without replacement.
    pub fn inner_adapt_minibatch<R: Rng + ?Sized>(
        &self,
        h: &TaskEmbedding,
        prepared: &PreparedBatch,
        steps: usize,
        lr: f64,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<(MlpParams, TaskEmbedding)> {
        Self::check_adapt_args(steps, lr)?;
        if prepared.is_empty() {
            return Err(Error::Empty("transition batch"));
        }
        let take = batch_size.clamp(1, prepared.len());
        let mut params = self.params.clone();
        let mut hv = h.values.clone();
        for _ in 0..steps {
            let idx = index::sample(rng, prepared.len(), take).into_vec();
            let mb = prepared.gather(&idx);
            (params, hv) = self.sgd_pair(&params, &hv, &mb, lr)?;
        }
        Ok((params, TaskEmbedding::new(h.id, hv)))
    }
}

/// On-disk model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub state_dim: usize,
    pub action_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Per layer, `out` rows of `in` weights.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub embedding_dim: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub norm_stats: NormStats,
}

impl ModelFile {
    pub fn from_parts(model: &EnnModel, table: &EmbeddingTable) -> Self {
        let layers = model.params.layers();
        ModelFile {
            state_dim: model.state_dim,
            action_dim: model.action_dim,
            layer_sizes: model.params.layer_sizes(),
            activations: layers.iter().map(|l| l.activation).collect(),
            weights: layers
                .iter()
                .map(|l| (0..l.weight.rows()).map(|r| l.weight.row(r).to_vec()).collect())
                .collect(),
            biases: layers.iter().map(|l| l.bias.clone()).collect(),
            embedding_dim: table.dim(),
            embeddings: table.entries().iter().map(|e| e.values.clone()).collect(),
            norm_stats: model.norm.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(EnnModel, EmbeddingTable)> {
        let n_layers = self.layer_sizes.len().saturating_sub(1);
        if self.weights.len() != n_layers
            || self.biases.len() != n_layers
            || self.activations.len() != n_layers
        {
            return Err(Error::Parse {
                what: "model file".into(),
                reason: format!(
                    "{} layer sizes need {n_layers} weight/bias/activation entries",
                    self.layer_sizes.len()
                ),
            });
        }
        let layers = self
            .weights
            .into_iter()
            .zip(self.biases)
            .zip(self.activations)
            .enumerate()
            .map(|(l, ((rows, bias), activation))| {
                let weight = Matrix::from_rows(&rows)?;
                if weight.shape() != (self.layer_sizes[l + 1], self.layer_sizes[l]) {
                    return Err(Error::dim(
                        "model file weight",
                        format!("{}x{}", self.layer_sizes[l + 1], self.layer_sizes[l]),
                        format!("{}x{}", weight.rows(), weight.cols()),
                    ));
                }
                Ok(Layer {
                    weight,
                    bias,
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = MlpParams::new(layers)?;
        let model = EnnModel::new(
            params,
            self.state_dim,
            self.action_dim,
            self.embedding_dim,
            self.norm_stats,
        )?;
        let table = EmbeddingTable::new(self.embedding_dim, self.embeddings)?;
        Ok((model, table))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "model JSON".into(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = vec![rng.random_range(-2.0..2.0)];
                let n = s.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
                Transition::new(s, a, n)
            })
            .collect()
    }

    fn model(seed: u64, emb: usize) -> (EnnModel, Vec<Transition>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_dataset(&mut rng, 40);
        let ds = TransitionDataset::from_transitions(3, 1, Some(0), data.clone()).unwrap();
        let norm = NormStats::fit(&[ds]).unwrap();
        let m = EnnModel::init(3, 1, emb, &[8, 8], norm, &mut rng).unwrap();
        (m, data)
    }

    #[test]
    fn zero_network_predicts_mean_delta() {
        let (m, data) = model(1, 2);
        let zero = m.with_params(MlpParams::zeros(&m.params().layer_sizes()).unwrap()).unwrap();
        let s = &data[0].state;
        let p = zero.predict_next_state(s, &data[0].action, &[0.3, 0.1]).unwrap();
        for i in 0..3 {
            assert_eq!(p[i], s[i] + m.norm().delta.mean[i]);
        }
    }

    #[test]
    fn prediction_is_deterministic_and_batch_consistent() {
        let (m, data) = model(2, 2);
        let h = [0.5, -0.5];
        let a = m.predict_next_state(&data[3].state, &data[3].action, &h).unwrap();
        let b = m.predict_next_state(&data[3].state, &data[3].action, &h).unwrap();
        assert_eq!(a, b);
        let states: Vec<_> = data.iter().map(|t| t.state.clone()).collect();
        let actions: Vec<_> = data.iter().map(|t| t.action.clone()).collect();
        let batch = m.predict_batch(&states, &actions, &h).unwrap();
        assert_eq!(batch[3], a);
    }

    #[test]
    fn prediction_checks_dimensions() {
        let (m, data) = model(3, 2);
        assert!(m.predict_next_state(&data[0].state, &data[0].action, &[1.0]).is_err());
        assert!(m.predict_next_state(&[1.0], &data[0].action, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let (m, data) = model(4, 1);
        for t in &data {
            let n = &m.norm().state;
            let back = n.denormalize(&n.normalize(&t.state));
            for (x, y) in back.iter().zip(&t.state) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn zero_net_loss_is_half_squared_normalized_delta() {
        let (m, data) = model(5, 1);
        let zero = m.with_params(MlpParams::zeros(&m.params().layer_sizes()).unwrap()).unwrap();
        let t = &data[7];
        let u = m.norm().delta.normalize(&t.delta());
        let expected = 0.5 * u.iter().map(|v| v * v).sum::<f64>();
        let loss = zero.task_loss(&[0.2], std::slice::from_ref(t)).unwrap();
        assert!((loss - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (m, _) = model(6, 1);
        assert!(matches!(m.task_loss(&[0.0], &[]), Err(Error::Empty(_))));
        assert!(m.task_loss_grads(&[0.0], &[]).is_err());
    }

    #[test]
    fn duplicated_transition_has_same_gradients() {
        let (m, data) = model(7, 2);
        let one = vec![data[0].clone()];
        let many = vec![data[0].clone(); 5];
        let h = [0.1, 0.2];
        let (g1, h1) = m.task_loss_grads(&h, &one).unwrap();
        let (g5, h5) = m.task_loss_grads(&h, &many).unwrap();
        for (a, b) in g1.params_flat().iter().zip(g5.params_flat()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        for (a, b) in h1.iter().zip(&h5) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn inner_adapt_leaves_model_untouched_and_one_step_matches_manual() {
        let (m, data) = model(8, 2);
        let before = m.clone();
        let h = TaskEmbedding::new(1, vec![0.3, -0.3]);
        let (phi, h1) = m.inner_adapt(&h, &data, 1, 0.01).unwrap();
        assert_eq!(m, before);
        let (g, gh) = m.task_loss_grads(&h.values, &data).unwrap();
        assert_eq!(phi, m.params().sgd_step(&g, 0.01).unwrap());
        let manual: Vec<f64> = h.values.iter().zip(&gh).map(|(v, d)| v - 0.01 * d).collect();
        assert_eq!(h1.values, manual);
        assert_eq!(h1.id, 1);
    }

    #[test]
    fn inner_adapt_rejects_bad_arguments() {
        let (m, data) = model(9, 1);
        let h = TaskEmbedding::new(0, vec![0.0]);
        assert!(m.inner_adapt(&h, &data, 0, 0.1).is_err());
        assert!(m.inner_adapt(&h, &data, 1, 0.0).is_err());
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let (m, _) = model(10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table = EmbeddingTable::init(4, 3, 0.1, &mut rng);
        let json = ModelFile::from_parts(&m, &table).to_json();
        let (m2, t2) = ModelFile::from_json(&json).unwrap().into_parts().unwrap();
        assert_eq!(m, m2);
        assert_eq!(table, t2);
    }

    #[test]
    fn model_rejects_mismatched_layers() {
        let norm = NormStats::identity(3, 1);
        let p = MlpParams::zeros(&[5, 4, 3]).unwrap();
        assert!(EnnModel::new(p.clone(), 3, 1, 2, norm.clone()).is_err());
        assert!(EnnModel::new(p, 3, 1, 1, norm).is_ok());
    }

    #[test]
    fn embedding_table_set_validates() {
        let mut t = EmbeddingTable::new(2, vec![vec![0.0, 0.0]; 3]).unwrap();
        assert!(t.set(1, vec![1.0]).is_err());
        assert!(t.set(5, vec![1.0, 1.0]).is_err());
        assert!(t.set(2, vec![f64::NAN, 1.0]).is_err());
        t.set(2, vec![1.0, 2.0]).unwrap();
        assert_eq!(t.get(2).unwrap().values, vec![1.0, 2.0]);
        assert!(EmbeddingTable::new(2, vec![vec![0.0]]).is_err());
    }
}
