use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{Aux, Conv2d, Dense, Layer, Shape};
use super::tensor::{Real, Tensor};
use crate::error::NnError;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Samples per gradient-accumulation chunk. Chunk partials are summed in
/// chunk order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize },
    MaxPool { size: usize },
    Tanh,
    Flatten,
    Dense { units: usize },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The head/non-head classifier for `side x side` single-channel patches.
    ///
    /// Conv 32@5x5, 32@4x4, 32@3x3 (each followed by 2x2 max-pooling),
    /// conv 32@3x3, conv 128@3x3, then dense 128, 84 and a 2-way softmax,
    /// with tanh after every hidden layer. On 64x64 inputs the spatial size
    /// runs 64 -> 60 -> 30 -> 27 -> 13 -> 11 -> 5 -> 3 -> 1, so the flatten
    /// size is 128.
    pub fn head_classifier(side: usize) -> Self {
        use LayerSpec::*;
        Self {
            input: [1, side, side],
            layers: vec![
                Conv { filters: 32, kernel: 5 },
                Tanh,
                MaxPool { size: 2 },
                Conv { filters: 32, kernel: 4 },
                Tanh,
                MaxPool { size: 2 },
                Conv { filters: 32, kernel: 3 },
                Tanh,
                MaxPool { size: 2 },
                Conv { filters: 32, kernel: 3 },
                Tanh,
                Conv { filters: 128, kernel: 3 },
                Tanh,
                Flatten,
                Dense { units: 128 },
                Tanh,
                Dense { units: 84 },
                Tanh,
                Dense { units: 2 },
                Softmax,
            ],
        }
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
struct Trace<T> {
    outputs: Vec<Vec<T>>,
    aux: Vec<Aux>,
}

#[derive(Debug, Clone)]
struct BatchCache<T> {
    inputs: Vec<Vec<T>>,
    traces: Vec<Trace<T>>,
}

/// Gradients aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    fn zeros_like(net: &Network<T>) -> Self {
        Self {
            tensors: net.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    input: Shape,
    layers: Vec<Layer<T>>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
    cache: Option<BatchCache<T>>,
}

impl<T: Real> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.layers == other.layers
    }
}

impl<T: Real> Network<T> {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let layer = match *ls {
                LayerSpec::Conv { filters, kernel } => {
                    Layer::Conv(Conv2d::init(&mut rng, shape[0], filters, kernel, kernel))
                }
                LayerSpec::MaxPool { size } => Layer::MaxPool { size },
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { units } => {
                    Layer::Dense(Dense::init(&mut rng, shape.iter().product(), units))
                }
                LayerSpec::Softmax => Layer::Softmax,
            };
            shape = layer.output_shape(shape)?;
            layers.push(layer);
        }
        Self::from_layers(spec.input, layers)
    }

    /// Assembles a network from explicit layers, checking that shapes chain
    /// and that the network ends in a softmax.
    pub fn from_layers(input: Shape, layers: Vec<Layer<T>>) -> Result<Self, NnError> {
        if !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(NnError::InvalidNetwork(
                "the last layer must be a softmax".into(),
            ));
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| matches!(l, Layer::Softmax))
        {
            return Err(NnError::InvalidNetwork(
                "softmax is only supported as the output layer".into(),
            ));
        }
        let mut shapes = vec![input];
        for layer in &layers {
            let next = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out[1] != 1 || out[2] != 1 {
            return Err(NnError::InvalidNetwork(format!(
                "output must be a vector, got {out:?}"
            )));
        }
        Ok(Self {
            input,
            layers,
            shapes,
            cache: None,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn spec(&self) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerSpec::Conv {
                    filters: c.out_channels,
                    kernel: c.kernel_h,
                },
                Layer::MaxPool { size } => LayerSpec::MaxPool { size: *size },
                Layer::Tanh => LayerSpec::Tanh,
                Layer::Flatten => LayerSpec::Flatten,
                Layer::Dense(d) => LayerSpec::Dense { units: d.outputs },
                Layer::Softmax => LayerSpec::Softmax,
            })
            .collect();
        NetworkSpec {
            input: self.input,
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Parameter tensors in layer order, weight before bias.
    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Same architecture and parameters in another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel_h: c.kernel_h,
                    kernel_w: c.kernel_w,
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                }),
                Layer::Dense(d) => Layer::Dense(Dense {
                    inputs: d.inputs,
                    outputs: d.outputs,
                    weight: conv(&d.weight),
                    bias: conv(&d.bias),
                }),
                Layer::MaxPool { size } => Layer::MaxPool { size: *size },
                Layer::Tanh => Layer::Tanh,
                Layer::Flatten => Layer::Flatten,
                Layer::Softmax => Layer::Softmax,
            })
            .collect();
        Network {
            input: self.input,
            layers,
            shapes: self.shapes.clone(),
            cache: None,
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize, NnError> {
        let s = batch.shape();
        let [c, h, w] = self.input;
        let ok = s.len() == 4 && (s[1..] == [c, h, w] || (c == 1 && s[1..] == [h, w, 1]));
        if !ok {
            let n = s.first().copied().unwrap_or(0);
            return Err(NnError::Shape {
                expected: vec![n, c, h, w],
                actual: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn forward_sample(&self, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        for (layer, &shape) in self.layers.iter().zip(&self.shapes) {
            cur = layer.forward(&cur, shape).0;
        }
        cur
    }

    fn forward_sample_traced(&self, x: &[T]) -> Trace<T> {
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        for (i, (layer, &shape)) in self.layers.iter().zip(&self.shapes).enumerate() {
            let input = if i == 0 { x } else { &outputs[i - 1][..] };
            let (out, a) = layer.forward(input, shape);
            outputs.push(out);
            aux.push(a);
        }
        Trace { outputs, aux }
    }

    /// Class probabilities for a `[N, C, H, W]` batch (`[N, H, W, 1]` is
    /// accepted for single-channel inputs). Samples are independent, so
    /// each row equals a single-sample call exactly.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let n = self.check_batch(batch)?;
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| self.forward_sample(batch.row(i)))
            .collect();
        Tensor::new(vec![n, self.num_classes()], rows.concat())
    }

    /// Like [`forward`](Self::forward) but keeps activations for
    /// [`backward`](Self::backward).
    pub fn forward_train(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let n = self.check_batch(batch)?;
        let inputs: Vec<Vec<T>> = (0..n).map(|i| batch.row(i).to_vec()).collect();
        let traces: Vec<Trace<T>> = inputs
            .par_iter()
            .map(|x| self.forward_sample_traced(x))
            .collect();
        let probs = traces
            .iter()
            .flat_map(|t| t.outputs.last().unwrap().iter().copied())
            .collect();
        self.cache = Some(BatchCache { inputs, traces });
        Tensor::new(vec![n, self.num_classes()], probs)
    }

    /// Gradients of the mean cross-entropy of the cached batch. Consumes the
    /// cache, so a second call without a new forward pass is an error.
    pub fn backward(&mut self, labels: &[usize]) -> Result<Gradients<T>, NnError> {
        let cache = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let n = cache.traces.len();
        check_labels(labels, n, self.num_classes())?;
        let scale = T::one() / T::from_f64(n as f64);

        let sample_ids: Vec<usize> = (0..n).collect();
        let partials: Vec<Gradients<T>> = sample_ids
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = Gradients::zeros_like(self);
                for &i in chunk {
                    self.backward_sample(&cache.inputs[i], &cache.traces[i], labels[i], scale, &mut g);
                }
                g
            })
            .collect();
        let mut total = Gradients::zeros_like(self);
        for p in &partials {
            total.add(p);
        }
        Ok(total)
    }

    fn backward_sample(&self, x: &[T], trace: &Trace<T>, label: usize, scale: T, grads: &mut Gradients<T>) {
        // Softmax and cross-entropy together: d(loss)/d(logits) = p - onehot.
        let probs = trace.outputs.last().unwrap();
        let mut dcur: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| (p - if c == label { T::one() } else { T::zero() }) * scale)
            .collect();

        let mut slot_ends: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            acc += l.params().len();
            slot_ends.push(acc);
        }

        let last = self.layers.len() - 1;
        for i in (0..last).rev() {
            let layer = &self.layers[i];
            let input = if i == 0 { x } else { &trace.outputs[i - 1][..] };
            let start = slot_ends[i] - layer.params().len();
            let slots = &mut grads.tensors[start..slot_ends[i]];
            match layer.backward(
                input,
                &trace.outputs[i],
                &trace.aux[i],
                self.shapes[i],
                &dcur,
                slots,
                i > 0,
            ) {
                Some(dx) => dcur = dx,
                None => break,
            }
        }
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<(), NnError> {
    if labels.len() != n {
        return Err(NnError::Labels(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Labels(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Mean categorical cross-entropy with probabilities floored at [`PROB_FLOOR`].
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64, NnError> {
    let n = probs.shape().first().copied().unwrap_or(0);
    let classes = probs.shape().get(1).copied().unwrap_or(0);
    check_labels(labels, n, classes)?;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.row(i)[l].as_f64().max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec() -> NetworkSpec {
        use LayerSpec::*;
        NetworkSpec {
            input: [1, 9, 9],
            layers: vec![
                Conv { filters: 3, kernel: 3 },
                Tanh,
                MaxPool { size: 2 },
                Conv { filters: 4, kernel: 2 },
                Tanh,
                Flatten,
                Dense { units: 5 },
                Tanh,
                Dense { units: 2 },
                Softmax,
            ],
        }
    }

    fn random_batch(n: usize, shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        let mut dims = vec![n];
        dims.extend_from_slice(&shape);
        Tensor::new(dims, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn classifier_shapes() {
        let net: Network<f32> = Network::new(&NetworkSpec::head_classifier(64), 1).unwrap();
        let shapes: Vec<Shape> = net.shapes.clone();
        assert_eq!(shapes[1], [32, 60, 60]);
        assert_eq!(shapes[3], [32, 30, 30]);
        assert_eq!(shapes[4], [32, 27, 27]);
        assert_eq!(shapes[6], [32, 13, 13]);
        assert_eq!(shapes[7], [32, 11, 11]);
        assert_eq!(shapes[9], [32, 5, 5]);
        assert_eq!(shapes[10], [32, 3, 3]);
        assert_eq!(shapes[12], [128, 1, 1]);
        assert_eq!(shapes[14], [128, 1, 1]);
        assert_eq!(*shapes.last().unwrap(), [2, 1, 1]);
        let pools = net
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool { .. }))
            .count();
        assert_eq!(pools, 3);
    }

    #[test]
    fn zero_network_is_uniform() {
        let mut net: Network<f32> = Network::new(&NetworkSpec::head_classifier(64), 3).unwrap();
        for p in net.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = Tensor::new(vec![3, 64, 64, 1], vec![0.3f32; 3 * 4096]).unwrap();
        let probs = net.forward(&batch).unwrap();
        assert!(probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn rejects_wrong_batch_shape() {
        let net: Network<f32> = Network::new(&NetworkSpec::head_classifier(64), 3).unwrap();
        let batch = Tensor::new(vec![1, 1, 32, 32], vec![0.0f32; 1024]).unwrap();
        assert!(matches!(net.forward(&batch), Err(NnError::Shape { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let net: Network<f64> = Network::new(&tiny_spec(), 5).unwrap();
        let probs = net.forward(&random_batch(6, [1, 9, 9], 8)).unwrap();
        for i in 0..6 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(probs.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_values() {
        let t = |v: Vec<f64>| Tensor::new(vec![v.len() / 2, 2], v).unwrap();
        assert_eq!(cross_entropy(&t(vec![1.0, 0.0]), &[0]).unwrap(), 0.0);
        let half = cross_entropy(&t(vec![0.5, 0.5, 0.5, 0.5]), &[0, 1]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let zero = cross_entropy(&t(vec![0.0, 1.0]), &[0]).unwrap();
        assert!(zero.is_finite());
        assert!((zero + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn backward_requires_forward() {
        let mut net: Network<f64> = Network::new(&tiny_spec(), 5).unwrap();
        assert!(matches!(net.backward(&[0]), Err(NnError::NoForwardCache)));
        net.forward_train(&random_batch(2, [1, 9, 9], 1)).unwrap();
        net.backward(&[0, 1]).unwrap();
        assert!(matches!(net.backward(&[0, 1]), Err(NnError::NoForwardCache)));
    }

    #[test]
    fn output_bias_gradient_is_mean_residual() {
        let mut net: Network<f64> = Network::new(&tiny_spec(), 11).unwrap();
        let labels = [1, 0, 1];
        let probs = net.forward_train(&random_batch(3, [1, 9, 9], 2)).unwrap();
        let grads = net.backward(&labels).unwrap();
        let out_bias = grads.tensors.last().unwrap();
        for c in 0..2 {
            let expected: f64 = (0..3)
                .map(|i| probs.row(i)[c] - if labels[i] == c { 1.0 } else { 0.0 })
                .sum::<f64>()
                / 3.0;
            assert!((out_bias[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_network_matches_finite_differences() {
        // Max-pool selections of every sample, to recognise kinks.
        fn selections(net: &Network<f64>, batch: &Tensor<f64>) -> Vec<Vec<Aux>> {
            (0..batch.shape()[0])
                .map(|i| net.forward_sample_traced(batch.row(i)).aux)
                .collect()
        }
        fn same(a: &[Vec<Aux>], b: &[Vec<Aux>]) -> bool {
            a.iter().flatten().map(|x| &x.argmax).eq(b.iter().flatten().map(|x| &x.argmax))
        }

        let mut kinks = 0;
        let mut checked = 0;
        for seed in 0..5 {
            let mut net: Network<f64> = Network::new(&tiny_spec(), 40 + seed).unwrap();
            let batch = random_batch(2, [1, 9, 9], 90 + seed);
            let labels = [0, 1];
            net.forward_train(&batch).unwrap();
            let grads = net.backward(&labels).unwrap();
            let loss_at = |net: &Network<f64>| cross_entropy(&net.forward(&batch).unwrap(), &labels).unwrap();
            let n_tensors = net.params().len();
            for t in 0..n_tensors {
                for i in 0..net.params()[t].len() {
                    let ana = grads.tensors[t][i];
                    let orig = net.params()[t][i];
                    let central = |net: &mut Network<f64>, h: f64| {
                        net.params_mut()[t][i] = orig + h;
                        let (lp, sp) = (loss_at(net), selections(net, &batch));
                        net.params_mut()[t][i] = orig - h;
                        let (lm, sm) = (loss_at(net), selections(net, &batch));
                        net.params_mut()[t][i] = orig;
                        let num = (lp - lm) / (2.0 * h);
                        (ana - num).abs() / ana.abs().max(num.abs()).max(1e-7) < 1e-4 || {
                            // Not differentiable across a max-pool switch:
                            // accept only if a smaller step agrees.
                            assert!(!same(&sp, &sm), "seed {seed} tensor {t}[{i}]: {ana} vs {num}");
                            false
                        }
                    };
                    checked += 1;
                    if !central(&mut net, 1e-3) {
                        kinks += 1;
                        assert!(central(&mut net, 1e-7), "seed {seed} tensor {t}[{i}] at a kink");
                    }
                }
            }
        }
        assert!(kinks * 50 < checked, "{kinks} of {checked} coordinates hit a kink");
    }

    #[test]
    fn confident_correct_prediction_has_zero_gradient() {
        // Output layer saturated towards class 0 for any input.
        let mut net: Network<f64> = Network::new(&tiny_spec(), 2).unwrap();
        {
            let mut params = net.params_mut();
            let n = params.len();
            params[n - 2].iter_mut().for_each(|w| *w = 0.0);
            params[n - 1][0] = 800.0;
            params[n - 1][1] = -800.0;
        }
        net.forward_train(&random_batch(2, [1, 9, 9], 3)).unwrap();
        let grads = net.backward(&[0, 0]).unwrap();
        assert!(grads.tensors.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_independent_of_thread_count() {
        let mut net: Network<f32> = Network::new(&tiny_spec(), 9).unwrap();
        let batch = random_batch(19, [1, 9, 9], 4);
        let batch32 = Tensor::new(
            batch.shape().to_vec(),
            batch.data().iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..19).map(|i| i % 2).collect();
        let run = |threads: usize, net: &mut Network<f32>| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                net.forward_train(&batch32).unwrap();
                net.backward(&labels).unwrap()
            })
        };
        let a = run(1, &mut net);
        let b = run(3, &mut net);
        assert_eq!(a, b);
    }
}
