//! Layer kernels: valid 2-D convolution, non-overlapping max-pooling,
//! tanh, flatten, fully connected and softmax.
//!
//! Activations are per-sample `[channels, height, width]` buffers in
//! row-major order; a vector of length `n` has shape `[n, 1, 1]`.

use rand::Rng;

use super::tensor::{matmul, Real};
use crate::error::NnError;

pub type Shape = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// `[out_channels, in_channels * kernel_h * kernel_w]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    MaxPool { size: usize },
    Tanh,
    Flatten,
    Dense(Dense<T>),
    Softmax,
}

/// Glorot-uniform sample in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
fn glorot<T: Real, R: Rng>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.gen_range(-s..=s))).collect()
}

impl<T: Real> Conv2d<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Self {
        let area = kernel_h * kernel_w;
        Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            weight: glorot(
                rng,
                out_channels * in_channels * area,
                in_channels * area,
                out_channels * area,
            ),
            bias: vec![T::zero(); out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Unfolds `x` into a `[C*kh*kw, ho*wo]` matrix.
    fn im2col(&self, x: &[T], [c, h, w]: Shape) -> Vec<T> {
        let (kh, kw) = (self.kernel_h, self.kernel_w);
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let mut cols = vec![T::zero(); c * kh * kw * ho * wo];
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ch * kh + ki) * kw + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let src = &x[(ch * h + oy + ki) * w + kj..][..wo];
                        dst[oy * wo..(oy + 1) * wo].copy_from_slice(src);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], [c, h, w]: Shape) -> Vec<T> {
        let (kh, kw) = (self.kernel_h, self.kernel_w);
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let mut x = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ch * kh + ki) * kw + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let dst = &mut x[(ch * h + oy + ki) * w + kj..][..wo];
                        for (d, &s) in dst.iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }

    fn forward(&self, x: &[T], shape: Shape) -> Vec<T> {
        let [_, h, w] = shape;
        let positions = (h - self.kernel_h + 1) * (w - self.kernel_w + 1);
        let cols = self.im2col(x, shape);
        let mut out: Vec<T> = self
            .bias
            .iter()
            .flat_map(|&b| std::iter::repeat(b).take(positions))
            .collect();
        matmul(
            self.out_channels,
            self.patch_len(),
            positions,
            &self.weight,
            false,
            &cols,
            false,
            &mut out,
            true,
        );
        out
    }

    fn backward(
        &self,
        x: &[T],
        shape: Shape,
        dout: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let [_, h, w] = shape;
        let positions = (h - self.kernel_h + 1) * (w - self.kernel_w + 1);
        let cols = self.im2col(x, shape);
        let k = self.patch_len();
        matmul(
            self.out_channels,
            positions,
            k,
            dout,
            false,
            &cols,
            true,
            dweight,
            true,
        );
        for (db, row) in dbias.iter_mut().zip(dout.chunks_exact(positions)) {
            *db += row.iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); k * positions];
        matmul(
            k,
            self.out_channels,
            positions,
            &self.weight,
            true,
            dout,
            false,
            &mut dcols,
            false,
        );
        Some(self.col2im(&dcols, shape))
    }
}

impl<T: Real> Dense<T> {
    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: glorot(rng, inputs * outputs, inputs, outputs),
            bias: vec![T::zero(); outputs],
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        let mut out = self.bias.clone();
        matmul(
            self.outputs,
            self.inputs,
            1,
            &self.weight,
            false,
            x,
            false,
            &mut out,
            true,
        );
        out
    }

    fn backward(
        &self,
        x: &[T],
        dout: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        for (o, &g) in dout.iter().enumerate() {
            dbias[o] += g;
            if g == T::zero() {
                continue;
            }
            let row = &mut dweight[o * self.inputs..(o + 1) * self.inputs];
            for (dw, &xi) in row.iter_mut().zip(x) {
                *dw += g * xi;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); self.inputs];
        matmul(
            self.inputs,
            self.outputs,
            1,
            &self.weight,
            true,
            dout,
            false,
            &mut dx,
            false,
        );
        Some(dx)
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Auxiliary data a layer keeps from its forward pass.
#[derive(Debug, Clone, Default)]
pub struct Aux {
    /// Flat input index chosen by each max-pool output.
    pub argmax: Vec<u32>,
}

impl<T: Real> Layer<T> {
    pub fn output_shape(&self, [c, h, w]: Shape) -> Result<Shape, NnError> {
        let bad = |msg: String| Err(NnError::InvalidNetwork(msg));
        match self {
            Layer::Conv(conv) => {
                if conv.in_channels != c {
                    return bad(format!(
                        "convolution expects {} input channels, got {c}",
                        conv.in_channels
                    ));
                }
                if conv.kernel_h > h || conv.kernel_w > w {
                    return bad(format!(
                        "{}x{} kernel does not fit a {h}x{w} input",
                        conv.kernel_h, conv.kernel_w
                    ));
                }
                Ok([conv.out_channels, h - conv.kernel_h + 1, w - conv.kernel_w + 1])
            }
            Layer::MaxPool { size } => {
                if *size == 0 || h / size == 0 || w / size == 0 {
                    return bad(format!("{size}x{size} pooling on a {h}x{w} input"));
                }
                Ok([c, h / size, w / size])
            }
            Layer::Tanh | Layer::Softmax => Ok([c, h, w]),
            Layer::Flatten => Ok([c * h * w, 1, 1]),
            Layer::Dense(d) => {
                if d.inputs != c * h * w || h != 1 || w != 1 {
                    return bad(format!(
                        "dense layer expects a flat vector of {}, got {c}x{h}x{w}",
                        d.inputs
                    ));
                }
                Ok([d.outputs, 1, 1])
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weight.len() + c.bias.len(),
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &[T], shape: Shape) -> (Vec<T>, Aux) {
        match self {
            Layer::Conv(conv) => (conv.forward(x, shape), Aux::default()),
            Layer::MaxPool { size } => max_pool_forward(x, shape, *size),
            Layer::Tanh => (T::tanh_slice(x), Aux::default()),
            Layer::Flatten => (x.to_vec(), Aux::default()),
            Layer::Dense(d) => (d.forward(x), Aux::default()),
            Layer::Softmax => (softmax(x), Aux::default()),
        }
    }

    /// Propagates `dout` through the layer, accumulating parameter gradients
    /// into `grads` (weight then bias). Returns the input gradient when
    /// `need_dx` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[T],
        out: &[T],
        aux: &Aux,
        shape: Shape,
        dout: &[T],
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        match self {
            Layer::Conv(conv) => {
                let (dw, db) = split_pair(grads);
                conv.backward(x, shape, dout, dw, db, need_dx)
            }
            Layer::Dense(d) => {
                let (dw, db) = split_pair(grads);
                d.backward(x, dout, dw, db, need_dx)
            }
            Layer::MaxPool { .. } => need_dx.then(|| {
                let mut dx = vec![T::zero(); x.len()];
                for (&i, &g) in aux.argmax.iter().zip(dout) {
                    dx[i as usize] += g;
                }
                dx
            }),
            Layer::Tanh => need_dx.then(|| {
                out.iter()
                    .zip(dout)
                    .map(|(&y, &g)| g * (T::one() - y * y))
                    .collect()
            }),
            Layer::Flatten => need_dx.then(|| dout.to_vec()),
            Layer::Softmax => need_dx.then(|| {
                let dot: T = out.iter().zip(dout).map(|(&y, &g)| y * g).sum();
                out.iter().zip(dout).map(|(&y, &g)| y * (g - dot)).collect()
            }),
        }
    }
}

fn split_pair<T>(grads: &mut [Vec<T>]) -> (&mut [T], &mut [T]) {
    let (w, rest) = grads.split_first_mut().expect("weight gradient slot");
    (w.as_mut_slice(), rest[0].as_mut_slice())
}

fn max_pool_forward<T: Real>(x: &[T], [c, h, w]: Shape, size: usize) -> (Vec<T>, Aux) {
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + oy * size) * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = (ch * h + oy * size + dy) * w + ox * size + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    (out, Aux { argmax })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of one layer under the scalar objective
    /// `L = sum(c * forward(x))` for fixed random weights `c`.
    /// With `distinct_inputs`, `x` is a shuffled lattice of distinct values
    /// spaced far wider than the step, so max-pooling has no near-ties.
    fn check_layer(layer: &mut Layer<f64>, shape: Shape, seed: u64, distinct_inputs: bool) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = shape.iter().product::<usize>();
        let x: Vec<f64> = if distinct_inputs {
            let mut v: Vec<f64> = (0..n_in).map(|i| -1.0 + 2.0 * i as f64 / n_in as f64).collect();
            v.shuffle(&mut rng);
            v
        } else {
            (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let out_shape = layer.output_shape(shape).unwrap();
        let coeffs: Vec<f64> = (0..out_shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let objective = |layer: &Layer<f64>, x: &[f64]| -> f64 {
            layer.forward(x, shape).0.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
        };

        let (out, aux) = layer.forward(&x, shape);
        let mut grads: Vec<Vec<f64>> = layer.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let dx = layer
            .backward(&x, &out, &aux, shape, &coeffs, &mut grads, true)
            .unwrap();

        let h = 1e-3;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let num = (objective(layer, &xp) - objective(layer, &xm)) / (2.0 * h);
            assert!(rel(dx[i], num) < 1e-4, "dx[{i}] {} vs {num}", dx[i]);
        }
        for t in 0..grads.len() {
            for i in 0..grads[t].len() {
                let orig = layer.params()[t][i];
                layer.params_mut()[t][i] = orig + h;
                let fp = objective(layer, &x);
                layer.params_mut()[t][i] = orig - h;
                let fm = objective(layer, &x);
                layer.params_mut()[t][i] = orig;
                let num = (fp - fm) / (2.0 * h);
                assert!(rel(grads[t][i], num) < 1e-4, "param {t}[{i}] {} vs {num}", grads[t][i]);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut layer = Layer::Conv(Conv2d::init(&mut rng, 2, 3, 3, 2));
            if let Layer::Conv(c) = &mut layer {
                c.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            }
            check_layer(&mut layer, [2, 6, 5], seed, false);
        }
    }

    #[test]
    fn dense_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut layer = Layer::Dense(Dense::init(&mut rng, 7, 4));
            check_layer(&mut layer, [7, 1, 1], seed, false);
        }
    }

    #[test]
    fn tanh_softmax_flatten_gradients() {
        for seed in 0..5 {
            check_layer(&mut Layer::Tanh, [2, 3, 3], seed, false);
            check_layer(&mut Layer::Softmax, [5, 1, 1], seed, false);
            check_layer(&mut Layer::Flatten, [2, 2, 3], seed, false);
        }
    }

    #[test]
    fn max_pool_gradients() {
        for seed in 0..5 {
            check_layer(&mut Layer::MaxPool { size: 2 }, [2, 5, 6], seed, true);
        }
    }

    #[test]
    fn max_pool_floors_odd_sizes() {
        let layer: Layer<f32> = Layer::MaxPool { size: 2 };
        assert_eq!(layer.output_shape([32, 27, 27]).unwrap(), [32, 13, 13]);
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let (out, aux) = layer.forward(&x, [1, 3, 3]);
        assert_eq!(out, vec![4.0]);
        assert_eq!(aux.argmax, vec![4]);
    }

    #[test]
    fn tanh_is_odd_and_saturates() {
        let layer: Layer<f32> = Layer::Tanh;
        let x: Vec<f32> = (-50..50).map(|i| i as f32 * 0.37).collect();
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        let (a, _) = layer.forward(&x, [x.len(), 1, 1]);
        let (b, _) = layer.forward(&neg, [x.len(), 1, 1]);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(*p, -*q);
        }
        assert_eq!(layer.forward(&[0.0], [1, 1, 1]).0, vec![0.0]);
        let sat = layer.forward(&[40.0], [1, 1, 1]).0[0];
        assert!(sat <= 1.0 && 1.0 - sat < 1e-6, "{sat}");
    }

    #[test]
    fn conv_commutes_with_horizontal_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv: Conv2d<f64> = Conv2d::init(&mut rng, 1, 4, 5, 5);
        let (h, w) = (12, 10);
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let flip = |v: &[f64], rw: usize| -> Vec<f64> {
            v.chunks_exact(rw).flat_map(|r| r.iter().rev().copied()).collect()
        };
        let mut flipped = conv.clone();
        flipped.weight = flip(&conv.weight, 5);
        let a = flip(&conv.forward(&x, [1, h, w]), w - 4);
        let b = flipped.forward(&flip(&x, w), [1, h, w]);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_hand_set_dense() {
        let dense = Dense::<f64> {
            inputs: 2,
            outputs: 2,
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        };
        let p = softmax(&dense.forward(&[2.0, 0.0]));
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        let expected = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((p[0] - expected).abs() < 1e-15);
    }
}
