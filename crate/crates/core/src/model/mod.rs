//! Fully connected ReLU classifier with inverted dropout on hidden layers.
//!
//! Weights are stored `[fan_in, fan_out]` so a layer is `x.dot(W) + b`. The
//! activation feeding the last layer is exposed as the penultimate feature
//! matrix, which the gradient embedding needs.

mod adam;
mod checkpoint;
mod train;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use train::{objective, train, TrainConfig, TrainReport};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::calibration::CalibError;
use crate::prob::softmax_rows;
use crate::rng::{seeded, StdRng};

/// Rows per chunk for large inference batches.
pub const INFERENCE_CHUNK: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bad layer dims {0:?}: need at least input and output, all positive")]
    BadDims(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("stochastic inference needs a positive dropout rate")]
    NoStochasticity,
    #[error("need at least 2 stochastic passes, got {0}")]
    TooFewPasses(usize),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("training loss diverged at epoch {epoch}: {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    dropout_rate: f64,
    rng: StdRng,
}

/// Everything a backward pass needs, plus the outputs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    /// Input of every layer: `inputs[0]` is the batch, `inputs[l]` the
    /// activation of hidden layer `l` after ReLU and dropout.
    inputs: Vec<Array2<f64>>,
    /// `d activation / d pre-activation` per hidden layer: 0 where the unit is
    /// off or dropped, the dropout scale otherwise.
    masks: Vec<Array2<f64>>,
    /// Replicas stacked by `forward_stacked`. When above 1, `inputs[0]` holds
    /// a single copy of the batch.
    copies: usize,
}

impl ForwardTrace {
    /// Features `z` feeding the last layer, `[n, d_z]`.
    pub fn penultimate(&self) -> ArrayView2<'_, f64> {
        self.inputs.last().expect("at least one layer").view()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

impl Mlp {
    /// He-uniform weights, zero biases. The dropout stream is seeded from
    /// `rng` too, so one seed fixes the whole model.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ModelError::BadDims(dims.to_vec()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(ModelError::BadDropout(dropout_rate));
        }
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)));
            biases.push(Array1::zeros(fan_out));
        }
        let dropout_seed: u64 = rng.random();
        Ok(Self { dims: dims.to_vec(), weights, biases, dropout_rate, rng: seeded(dropout_seed) })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    /// Width of the penultimate features `z`.
    pub fn feature_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn param_sizes(&self) -> Vec<usize> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.len(), b.len()]).collect()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<(), ModelError> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "batch has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>, copies: usize, mut dropout: Option<&mut StdRng>) -> ForwardTrace {
        let layers = self.weights.len();
        // dropout only follows hidden layers, so the first product is the
        // same for every replica and is computed once
        let copies = if layers > 1 { copies } else { 1 };
        let keep_scale = 1.0 / (1.0 - self.dropout_rate);
        let mut inputs = Vec::with_capacity(layers);
        let mut masks = Vec::with_capacity(layers - 1);
        inputs.push(x.to_owned());
        let mut logits = None;
        for l in 0..layers {
            let mut pre = inputs[l].dot(&self.weights[l]);
            if l == 0 && copies > 1 {
                let views = vec![pre.view(); copies];
                pre = concatenate(Axis(0), &views).expect("identical shapes");
            }
            pre += &self.biases[l];
            if l + 1 == layers {
                logits = Some(pre);
                break;
            }
            let mut mask = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            if let Some(rng) = dropout.as_deref_mut() {
                if self.dropout_rate > 0.0 {
                    for m in mask.iter_mut() {
                        let keep = rng.random::<f64>() >= self.dropout_rate;
                        *m = if keep { *m * keep_scale } else { 0.0 };
                    }
                }
            }
            pre *= &mask;
            masks.push(mask);
            inputs.push(pre);
        }
        let logits = logits.expect("at least one layer");
        let probs = softmax_rows(logits.view());
        ForwardTrace { logits, probs, inputs, masks, copies }
    }

    /// Forward pass. Train mode samples fresh dropout masks from the model's
    /// stream; eval mode is deterministic.
    pub fn forward(&mut self, x: ArrayView2<f64>, mode: Mode) -> Result<ForwardTrace, ModelError> {
        self.check_input(x)?;
        Ok(match mode {
            Mode::Eval => self.run(x, 1, None),
            Mode::Train => self.run_train(x, 1),
        })
    }

    fn run_train(&mut self, x: ArrayView2<f64>, copies: usize) -> ForwardTrace {
        let mut rng = self.rng.clone();
        let trace = self.run(x, copies, Some(&mut rng));
        self.rng = rng;
        trace
    }

    /// Eval-mode forward pass that only needs shared access.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<ForwardTrace, ModelError> {
        self.check_input(x)?;
        Ok(self.run(x, 1, None))
    }

    /// Eval-mode class probabilities and penultimate features, computed in
    /// chunks to bound memory on large pools.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
        self.check_input(x)?;
        let n = x.nrows();
        let mut probs = Array2::zeros((n, self.num_classes()));
        let mut feats = Array2::zeros((n, self.feature_dim()));
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK).min(n);
            let trace = self.run(x.slice(s![start..end, ..]), 1, None);
            probs.slice_mut(s![start..end, ..]).assign(&trace.probs);
            feats.slice_mut(s![start..end, ..]).assign(&trace.penultimate());
            start = end;
        }
        Ok((probs, feats))
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.predict(x)?.0)
    }

    /// `passes` independent train-mode forward passes, each a `[n, K]`
    /// probability matrix.
    pub fn forward_stochastic(
        &mut self,
        x: ArrayView2<f64>,
        passes: usize,
    ) -> Result<Vec<Array2<f64>>, ModelError> {
        if self.dropout_rate == 0.0 {
            return Err(ModelError::NoStochasticity);
        }
        if passes < 2 {
            return Err(ModelError::TooFewPasses(passes));
        }
        let n = x.nrows();
        let stacked = self.forward_stacked(x, passes)?;
        Ok((0..passes)
            .map(|t| stacked.probs.slice(s![t * n..(t + 1) * n, ..]).to_owned())
            .collect())
    }

    /// One train-mode pass over `copies` stacked replicas of `x`
    /// (replica-major rows), so every replica gets its own dropout masks.
    pub(crate) fn forward_stacked(
        &mut self,
        x: ArrayView2<f64>,
        copies: usize,
    ) -> Result<ForwardTrace, ModelError> {
        self.check_input(x)?;
        Ok(self.run_train(x, copies.max(1)))
    }

    /// Backpropagate `d loss / d logits` through the recorded pass.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: ArrayView2<f64>) -> Gradients {
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut delta = dlogits.to_owned();
        for l in (0..layers).rev() {
            gw[l] = if l == 0 && trace.copies > 1 {
                let (rows, width) = (trace.inputs[0].nrows(), delta.ncols());
                let summed = delta
                    .view()
                    .into_shape_with_order((trace.copies, rows, width))
                    .expect("replica-major rows")
                    .sum_axis(Axis(0));
                trace.inputs[0].t().dot(&summed)
            } else {
                trace.inputs[l].t().dot(&delta)
            };
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l].t());
                prev *= &trace.masks[l - 1];
                delta = prev;
            }
        }
        Gradients { weights: gw, biases: gb }
    }

    /// Apply one optimiser step with `grads`.
    pub fn apply(&mut self, optimizer: &mut Adam, grads: &Gradients) {
        let g = grads.slices();
        let mut params = self.param_slices_mut();
        optimizer.step(&mut params, &g);
    }

    /// Fresh Adam state sized for this model.
    pub fn adam(&self, learning_rate: f64) -> Adam {
        Adam::new(learning_rate, &self.param_sizes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{cross_entropy, cross_entropy_logit_grad};
    use ndarray::array;

    fn rng() -> StdRng {
        seeded(11)
    }

    #[test]
    fn default_architecture_shapes() {
        let m = Mlp::new(&[784, 256, 256, 256, 10], 0.2, &mut rng()).unwrap();
        let shapes: Vec<_> = m.weights().iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(784, 256), (256, 256), (256, 256), (256, 10)]);
        assert!(m.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert_eq!(m.feature_dim(), 256);
        assert_eq!(m.num_classes(), 10);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(matches!(Mlp::new(&[5], 0.0, &mut rng()), Err(ModelError::BadDims(_))));
        assert!(matches!(Mlp::new(&[5, 0, 2], 0.0, &mut rng()), Err(ModelError::BadDims(_))));
        assert!(matches!(Mlp::new(&[5, 2], 1.0, &mut rng()), Err(ModelError::BadDropout(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::new(&[6, 5, 3], 0.1, &mut seeded(3)).unwrap();
        let b = Mlp::new(&[6, 5, 3], 0.1, &mut seeded(3)).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let mut m = Mlp::new(&[3, 4, 5], 0.0, &mut rng()).unwrap();
        m.weights_mut().iter_mut().for_each(|w| w.fill(0.0));
        let trace = m.forward_eval(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(trace.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn wrong_width_is_rejected() {
        let m = Mlp::new(&[3, 2], 0.0, &mut rng()).unwrap();
        assert!(matches!(
            m.forward_eval(Array2::zeros((2, 4)).view()),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn eval_mode_ignores_dropout_state() {
        let mut m = Mlp::new(&[4, 8, 3], 0.5, &mut rng()).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4]];
        let a = m.forward(x.view(), Mode::Eval).unwrap().probs;
        m.forward(x.view(), Mode::Train).unwrap();
        let b = m.forward(x.view(), Mode::Eval).unwrap().probs;
        assert_eq!(a, b);
    }

    #[test]
    fn stochastic_passes() {
        let mut m = Mlp::new(&[4, 16, 3], 0.5, &mut rng()).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4], [1.0, 0.0, 0.5, 0.2]];
        let passes = m.forward_stochastic(x.view(), 10).unwrap();
        assert_eq!(passes.len(), 10);
        for p in &passes {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        let distinct = passes.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(distinct > 0);

        let mut again = Mlp::new(&[4, 16, 3], 0.5, &mut rng()).unwrap();
        assert_eq!(again.forward_stochastic(x.view(), 10).unwrap(), passes);

        let mut det = Mlp::new(&[4, 16, 3], 0.0, &mut rng()).unwrap();
        assert!(matches!(det.forward_stochastic(x.view(), 10), Err(ModelError::NoStochasticity)));
        assert!(matches!(m.forward_stochastic(x.view(), 1), Err(ModelError::TooFewPasses(1))));
    }

    #[test]
    fn predict_matches_unchunked_forward() {
        let m = Mlp::new(&[3, 5, 4, 2], 0.3, &mut rng()).unwrap();
        let x = Array2::from_shape_fn((INFERENCE_CHUNK + 7, 3), |(i, j)| ((i * 3 + j) % 17) as f64 / 17.0);
        let (probs, feats) = m.predict(x.view()).unwrap();
        let trace = m.forward_eval(x.view()).unwrap();
        assert_eq!(probs, trace.probs);
        assert_eq!(feats, trace.penultimate());
    }

    fn max_gap<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn stacked_pass_matches_explicit_replicas() {
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let mut shared = Mlp::new(&[4, 6, 5, 3], 0.3, &mut seeded(8)).unwrap();
        let mut explicit = shared.clone();
        let a = shared.forward_stacked(x.view(), 4).unwrap();
        let tiled = concatenate(Axis(0), &[x.view(); 4]).unwrap();
        let b = explicit.forward(tiled.view(), Mode::Train).unwrap();
        assert!(max_gap(&a.probs, &b.probs) < 1e-12);
        let dlogits = Array2::from_shape_fn(a.logits.dim(), |(i, k)| ((i + 2 * k) % 5) as f64 / 5.0 - 0.4);
        let ga = shared.backward(&a, dlogits.view());
        let gb = explicit.backward(&b, dlogits.view());
        for (wa, wb) in ga.weights.iter().zip(&gb.weights) {
            assert!(max_gap(wa, wb) < 1e-12);
        }
        for (ba, bb) in ga.biases.iter().zip(&gb.biases) {
            assert!(max_gap(ba, bb) < 1e-12);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut m = Mlp::new(&[4, 3, 2], 0.0, &mut seeded(5)).unwrap();
        m.biases_mut()[0].assign(&array![0.05, -0.02, 0.1]);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let y = [0, 1, 1, 0, 1];
        let trace = m.forward_eval(x.view()).unwrap();
        let dl = cross_entropy_logit_grad(trace.probs.view(), &y);
        let grads = m.backward(&trace, dl.view());

        let loss = |m: &Mlp| cross_entropy(m.forward_eval(x.view()).unwrap().probs.view(), &y).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..2 {
            for idx in 0..m.weights()[l].len() {
                let mut plus = m.clone();
                plus.weights_mut()[l].as_slice_mut().unwrap()[idx] += h;
                let mut minus = m.clone();
                minus.weights_mut()[l].as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.weights[l].as_slice().unwrap()[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
            for idx in 0..m.biases()[l].len() {
                let mut plus = m.clone();
                plus.biases_mut()[l][idx] += h;
                let mut minus = m.clone();
                minus.biases_mut()[l][idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.biases[l][idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
