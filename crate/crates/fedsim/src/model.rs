//! Small fully-connected classifier with explicit access to the
//! penultimate-layer representation and a flat parameter vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{GradTape, NodeId, Tensor, LOG_FLOOR};
use crate::data::Dataset;
use crate::error::{Result, SimError};

/// Feed-forward classifier: relu on hidden layers, softmax applied to the
/// logits only inside the loss. Weights are `[out, in]`, biases `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Flat view of all parameters in canonical order: for each layer, weights
/// row-major then biases. The order is stable across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn check_len(&self, other: &ParamVector, op: &'static str) -> Result<()> {
        if self.0.len() == other.0.len() {
            Ok(())
        } else {
            Err(SimError::ShapeMismatch {
                op,
                detail: format!("{} vs {}", self.0.len(), other.0.len()),
            })
        }
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other, "ParamVector::add")?;
        Ok(ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other, "ParamVector::sub")?;
        Ok(ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * factor).collect())
    }

    pub fn squared_distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other, "ParamVector::squared_distance")?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Node ids of the model parameters registered on a tape.
pub struct TapedParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpModel {
    /// He-style initialization: weights ~ N(0, sqrt(2 / fan_in)), zero biases.
    pub fn new<R: Rng>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::validate_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is finite and positive");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            weights.push(Tensor::new(vec![fan_out, fan_in], data)?);
            biases.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(MlpModel { layer_dims: layer_dims.to_vec(), weights, biases })
    }

    /// All-zero parameters (predicts the uniform distribution).
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        Self::validate_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| Tensor::zeros(vec![p[1], p[0]]))
            .collect();
        let biases = layer_dims.windows(2).map(|p| Tensor::zeros(vec![p[1]])).collect();
        Ok(MlpModel { layer_dims: layer_dims.to_vec(), weights, biases })
    }

    fn validate_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(SimError::InvalidArgument {
                op: "MlpModel::new",
                detail: format!("layer dims must list >= 2 positive sizes, got {:?}", layer_dims),
            });
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// Width of the penultimate layer.
    pub fn plr_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    /// Weight matrix connecting the penultimate layer to the output layer.
    pub fn output_weights(&self) -> &Tensor {
        self.weights.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    /// Plain forward pass: `(logits, penultimate-layer representation)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape() != [self.input_dim()] {
            return Err(SimError::ShapeMismatch {
                op: "MlpModel::forward",
                detail: format!("input shape {:?}, model expects [{}]", x.shape(), self.input_dim()),
            });
        }
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for l in 0..last {
            h = self.weights[l].matmul(&h)?.add(&self.biases[l])?.relu();
        }
        let plr = h;
        let logits = self.weights[last].matmul(&plr)?.add(&self.biases[last])?;
        Ok((logits, plr))
    }

    /// Class probabilities for an input.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)?.0.softmax()
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.forward(x)?.0.argmax())
    }

    /// Register all parameters as differentiable leaves on a tape.
    pub fn register_on_tape(&self, tape: &mut GradTape) -> TapedParams {
        let weights = self.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let biases = self.biases.iter().map(|b| tape.leaf(b.clone())).collect();
        TapedParams { weights, biases }
    }

    /// Forward pass recorded on a tape; `x` is a node holding the flattened
    /// input. Mirrors [`MlpModel::forward`] kernel for kernel.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        params: &TapedParams,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let last = params.weights.len() - 1;
        for l in 0..last {
            let wh = tape.matmul(params.weights[l], h)?;
            let pre = tape.add(wh, params.biases[l])?;
            h = tape.relu(pre);
        }
        let plr = h;
        let wh = tape.matmul(params.weights[last], plr)?;
        let logits = tape.add(wh, params.biases[last])?;
        Ok((logits, plr))
    }

    /// Gradient-descent step over all parameters.
    pub fn apply_gradients(
        &mut self,
        tape: &GradTape,
        params: &TapedParams,
        grads: &crate::autodiff::Gradients,
        lr: f64,
    ) -> Result<()> {
        for (w, &id) in self.weights.iter_mut().zip(&params.weights) {
            *w = w.sub(&grads.wrt(id, tape).scale(lr)?)?;
        }
        for (b, &id) in self.biases.iter_mut().zip(&params.biases) {
            *b = b.sub(&grads.wrt(id, tape).scale(lr)?)?;
        }
        Ok(())
    }

    /// Flatten all parameters in canonical order.
    pub fn flatten(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            values.extend_from_slice(w.data());
            values.extend_from_slice(b.data());
        }
        ParamVector(values)
    }

    /// Rebuild a model from a flat parameter vector.
    pub fn from_params(layer_dims: &[usize], params: &ParamVector) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        let expect = model.param_count();
        if params.len() != expect {
            return Err(SimError::ShapeMismatch {
                op: "MlpModel::from_params",
                detail: format!("expected {} parameters, got {}", expect, params.len()),
            });
        }
        let mut offset = 0;
        for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            let wn = w.len();
            *w = Tensor::new(w.shape().to_vec(), params.0[offset..offset + wn].to_vec())?;
            offset += wn;
            let bn = b.len();
            *b = Tensor::new(b.shape().to_vec(), params.0[offset..offset + bn].to_vec())?;
            offset += bn;
        }
        Ok(model)
    }

    /// Add a delta coordinatewise in canonical order.
    pub fn apply_delta(&self, delta: &ParamVector) -> Result<MlpModel> {
        let flat = self.flatten().add(delta)?;
        Self::from_params(&self.layer_dims, &flat)
    }
}

/// Cross-entropy of logits against a class index: `-log(softmax(logits)[label])`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let probs = logits.softmax()?;
    if label >= probs.len() {
        return Err(SimError::InvalidArgument {
            op: "cross_entropy",
            detail: format!("label {} out of range for {} classes", label, probs.len()),
        });
    }
    Ok(-probs.data()[label].max(LOG_FLOOR).ln())
}

/// Cross-entropy recorded on a tape, composed from softmax, dot with a
/// one-hot constant, log, and negation.
pub fn cross_entropy_on_tape(
    tape: &mut GradTape,
    logits: NodeId,
    label: usize,
    num_classes: usize,
) -> Result<NodeId> {
    if label >= num_classes {
        return Err(SimError::InvalidArgument {
            op: "cross_entropy_on_tape",
            detail: format!("label {} out of range for {} classes", label, num_classes),
        });
    }
    let mut onehot = vec![0.0; num_classes];
    onehot[label] = 1.0;
    let onehot = tape.leaf(Tensor::from_vec(onehot));
    let probs = tape.softmax(logits)?;
    let p = tape.dot(probs, onehot)?;
    let logp = tape.log(p)?;
    tape.scale(logp, -1.0)
}

/// Minibatch SGD on cross-entropy over `data` for `epochs` full passes.
/// Deterministic given the RNG. Returns the trained model.
pub fn sgd_train<R: Rng>(
    mut model: MlpModel,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<MlpModel> {
    if data.len() == 0 {
        return Err(SimError::EmptyInput("sgd_train"));
    }
    if epochs < 1 || lr < 0.0 || batch_size == 0 {
        return Err(SimError::InvalidArgument {
            op: "sgd_train",
            detail: format!("epochs={} lr={} batch_size={}", epochs, lr, batch_size),
        });
    }
    let inputs: Vec<Tensor> = (0..data.len()).map(|i| data.flattened_image(i)).collect();
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    train_batches(&mut model, &inputs, &labels, epochs, lr, batch_size, 1.0, rng)?;
    Ok(model)
}

/// Shared minibatch loop: SGD on `scale * mean-cross-entropy` per batch.
/// Returns the mean scaled batch loss over all batches of all epochs.
pub(crate) fn train_batches<R: Rng>(
    model: &mut MlpModel,
    inputs: &[Tensor],
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    loss_scale: f64,
    rng: &mut R,
) -> Result<f64> {
    use rand::seq::SliceRandom;

    let n = inputs.len();
    let num_classes = model.num_classes();
    let mut order: Vec<usize> = (0..n).collect();
    let mut total_loss = 0.0;
    let mut batches = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let mut tape = GradTape::new();
            let params = model.register_on_tape(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tape.leaf(inputs[i].clone());
                let (logits, _) = model.forward_on_tape(&mut tape, &params, x)?;
                losses.push(cross_entropy_on_tape(&mut tape, logits, labels[i], num_classes)?);
            }
            let batch_loss = tape.mean_of(&losses)?;
            let scaled = tape.scale(batch_loss, loss_scale)?;
            let grads = tape.backward(scaled)?;
            model.apply_gradients(&tape, &params, &grads, lr)?;
            total_loss += tape.value(scaled).scalar_value()?;
            batches += 1;
        }
    }
    Ok(total_loss / batches as f64)
}

/// Largest singular value of a 2-D tensor by power iteration.
pub fn spectral_norm(matrix: &Tensor, iterations: usize) -> Result<f64> {
    let [m, n] = match matrix.shape() {
        [m, n] => [*m, *n],
        other => {
            return Err(SimError::ShapeMismatch {
                op: "spectral_norm",
                detail: format!("expected 2-D, got {:?}", other),
            })
        }
    };
    let a = matrix.data();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut u = vec![0.0; m];
    for _ in 0..iterations {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * n..(i + 1) * n].iter().zip(&v).map(|(&a, &v)| a * v).sum();
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
        for ui in u.iter_mut() {
            *ui /= un;
        }
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..m).map(|i| a[i * n + j] * u[i]).sum();
        }
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
        for vj in v.iter_mut() {
            *vj /= vn;
        }
    }
    // sigma = ||A v||
    let mut av = vec![0.0; m];
    for (i, avi) in av.iter_mut().enumerate() {
        *avi = a[i * n..(i + 1) * n].iter().zip(&v).map(|(&a, &v)| a * v).sum();
    }
    Ok(av.iter().map(|x| x * x).sum::<f64>().sqrt())
}
