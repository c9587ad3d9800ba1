//! Dense feed-forward networks with exact reverse-mode gradients and an
//! Adam optimizer.
//!
//! Batches are row-major `(batch, features)` matrices. Weights are stored as
//! `(fan_in, fan_out)` so a layer is `x.dot(w) + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    /// Row-wise softmax; only meaningful on the output layer.
    Softmax,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
            Activation::Sigmoid => 3,
            Activation::Softmax => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Relu,
            3 => Activation::Sigmoid,
            4 => Activation::Softmax,
            _ => return None,
        })
    }

    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Tanh => pre.mapv(f64::tanh),
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::Sigmoid => pre.mapv(sigmoid),
            Activation::Softmax => {
                let mut out = pre.clone();
                for mut row in out.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
                out
            }
        }
    }

    /// Gradient w.r.t. the pre-activation given the gradient w.r.t. the
    /// activation output.
    fn backprop(self, pre: &Array2<f64>, post: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Tanh => Zip::from(grad).and(post).map_collect(|g, y| g * (1.0 - y * y)),
            Activation::Relu => Zip::from(grad).and(pre).map_collect(|g, z| if *z > 0.0 { *g } else { 0.0 }),
            Activation::Sigmoid => Zip::from(grad).and(post).map_collect(|g, y| g * y * (1.0 - y)),
            Activation::Softmax => {
                let mut out = Array2::zeros(grad.raw_dim());
                for ((mut o, g), y) in out.rows_mut().into_iter().zip(grad.rows()).zip(post.rows()) {
                    let dot = g.dot(&y);
                    Zip::from(&mut o).and(&g).and(&y).for_each(|o, g, y| *o = y * (g - dot));
                }
                out
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

/// Intermediate values of a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardCache {
    /// Pre-activation values of every layer, first to last.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
        return Err(Error::config(format!("network needs at least two positive layer sizes, got {sizes:?}")));
    }
    Ok(())
}

impl DenseNet {
    /// Fan-in scaled uniform init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
    pub fn init(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
            hidden,
            output,
        })
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
            hidden,
            output,
        })
    }

    /// Rebuilds a network from a flat parameter vector (layer by layer,
    /// weights row-major then bias).
    pub fn from_params(sizes: &[usize], hidden: Activation, output: Activation, params: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape {
                context: "network parameters",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    /// Multiplies the last layer's weights, e.g. for a near-uniform initial policy.
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(l) = self.layers.last_mut() {
            l.weights.mapv_inplace(|w| w * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = input.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let pre = x.dot(&l.weights) + &l.bias;
            x = self.activation(i).apply(&pre);
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, input: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = x.dot(&l.weights) + &l.bias;
            let next = self.activation(i).apply(&z);
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        Ok(ForwardCache { inputs, pre, output: x })
    }

    /// Reverse pass from the gradient of a loss w.r.t. the network output.
    /// Returns parameter gradients (summed over the batch) and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<'_, f64>) -> Result<(Gradients, Array2<f64>)> {
        if grad_output.dim() != cache.output.dim() {
            return Err(Error::Shape {
                context: "output gradient",
                expected: cache.output.len(),
                got: grad_output.len(),
            });
        }
        let last = self.layers.len() - 1;
        let grad_pre = self.output.backprop(&cache.pre[last], &cache.output, &grad_output.to_owned());
        self.backward_from_pre_output(cache, grad_pre.view())
    }

    /// Reverse pass starting from the gradient w.r.t. the final layer's
    /// pre-activation (logits). Used where the loss is fused with the output
    /// nonlinearity (BCE with sigmoid, log-softmax).
    pub fn backward_from_pre_output(
        &self,
        cache: &ForwardCache,
        grad_pre_output: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let last = self.layers.len() - 1;
        if grad_pre_output.dim() != cache.pre[last].dim() {
            return Err(Error::Shape {
                context: "logit gradient",
                expected: cache.pre[last].len(),
                got: grad_pre_output.len(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_pre_output.to_owned();
        for i in (0..self.layers.len()).rev() {
            let gw = cache.inputs[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { weights: gw, bias: gb });
            let grad_in = delta.dot(&self.layers[i].weights.t());
            if i == 0 {
                grads.reverse();
                return Ok((Gradients { layers: grads }, grad_in));
            }
            let post = &cache.inputs[i];
            delta = self.activation(i - 1).backprop(&cache.pre[i - 1], post, &grad_in);
        }
        unreachable!("network has at least one layer")
    }

    /// Pre-activation outputs of the final layer for the cached pass.
    pub fn logits<'a>(&self, cache: &'a ForwardCache) -> &'a Array2<f64> {
        cache.pre.last().expect("non-empty cache")
    }
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| *v == 0.0))
    }
}

/// Rescales a group of gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [&mut Gradients], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(f));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected first/second moment state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, m), v), g) in net.layers.iter_mut().zip(&mut self.m.layers).zip(&mut self.v.layers).zip(&grads.layers) {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(update);
            Zip::from(&mut layer.bias).and(&mut m.bias).and(&mut v.bias).and(&g.bias).for_each(update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Straight-line forward pass used as an oracle.
    fn naive_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for (i, l) in net.layers.iter().enumerate() {
            let (fan_in, fan_out) = l.weights.dim();
            let mut z = vec![0.0; fan_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = l.bias[j];
                for k in 0..fan_in {
                    acc += v[k] * l.weights[[k, j]];
                }
                *zj = acc;
            }
            let act = if i + 1 == net.layers.len() { net.output } else { net.hidden };
            v = match act {
                Activation::Identity => z,
                Activation::Tanh => z.iter().map(|a| a.tanh()).collect(),
                Activation::Relu => z.iter().map(|a| a.max(0.0)).collect(),
                Activation::Sigmoid => z.iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect(),
                Activation::Softmax => {
                    let e: Vec<f64> = z.iter().map(|a| a.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|a| a / s).collect()
                }
            };
        }
        v
    }

    #[test]
    fn zero_net_outputs_bias() {
        let mut net = DenseNet::zeros(&[3, 2], Activation::Tanh, Activation::Identity).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        net.layers[0].bias = array![0.5, -1.0];
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = DenseNet::zeros(&[3, 3], Activation::Tanh, Activation::Identity).unwrap();
        net.layers[0].weights = Array2::eye(3);
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn matches_naive_forward() {
        for (hidden, output) in [
            (Activation::Tanh, Activation::Identity),
            (Activation::Relu, Activation::Softmax),
            (Activation::Tanh, Activation::Sigmoid),
        ] {
            let net = DenseNet::init(&[5, 7, 3], hidden, output, 11).unwrap();
            let x = [0.3, -1.2, 0.8, 2.0, -0.1];
            let got = net.forward(&x).unwrap();
            let want = naive_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = DenseNet::init(&[4, 2], Activation::Tanh, Activation::Identity, 0).unwrap();
        assert!(matches!(net.forward(&[1.0; 3]), Err(Error::Shape { .. })));
        assert!(DenseNet::init(&[4], Activation::Tanh, Activation::Identity, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = DenseNet::init(&[8, 8, 2], Activation::Relu, Activation::Identity, 1).unwrap();
        let b = DenseNet::init(&[8, 8, 2], Activation::Relu, Activation::Identity, 1).unwrap();
        let c = DenseNet::init(&[8, 8, 2], Activation::Relu, Activation::Identity, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_std_matches_fan_in_formula() {
        let fan_in = 400;
        let net = DenseNet::init(&[fan_in, 300], Activation::Relu, Activation::Identity, 5).unwrap();
        let w = &net.layers[0].weights;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = 1.0 / (3.0 * fan_in as f64).sqrt();
        assert!((std - expected).abs() / expected < 0.02, "{std} vs {expected}");
        assert!(mean.abs() < 1e-3);
    }

    fn loss(net: &DenseNet, x: &Array2<f64>, up: &Array2<f64>) -> f64 {
        (net.forward_batch(x.view()).unwrap() * up).sum()
    }

    fn check_gradients(sizes: &[usize], hidden: Activation, output: Activation) {
        let net = DenseNet::init(sizes, hidden, output, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_simple_fn((3, sizes[0]), || rng.random_range(-1.0..1.0));
        let up = Array2::from_shape_simple_fn((3, net.output_dim()), || rng.random_range(-1.0..1.0));
        let cache = net.forward_cached(x.view()).unwrap();
        let (grads, gin) = net.backward(&cache, up.view()).unwrap();
        let analytic = grads.to_vec();
        let params = net.params();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let plus = loss(&DenseNet::from_params(sizes, hidden, output, &p).unwrap(), &x, &up);
            p[i] -= 2.0 * h;
            let minus = loss(&DenseNet::from_params(sizes, hidden, output, &p).unwrap(), &x, &up);
            let fd = (plus - minus) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!((fd - analytic[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs {}", analytic[i]);
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let plus = loss(&net, &xp, &up);
                xp[[r, c]] -= 2.0 * h;
                let minus = loss(&net, &xp, &up);
                let fd = (plus - minus) / (2.0 * h);
                let denom = fd.abs().max(gin[[r, c]].abs()).max(1e-6);
                assert!((fd - gin[[r, c]]).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(&[4, 6, 3], Activation::Tanh, Activation::Identity);
        check_gradients(&[4, 6, 5, 3], Activation::Relu, Activation::Softmax);
        check_gradients(&[4, 3], Activation::Tanh, Activation::Sigmoid);
        check_gradients(&[3, 5, 2], Activation::Sigmoid, Activation::Tanh);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenseNet::init(&[3, 4, 2], Activation::Tanh, Activation::Identity, 1).unwrap();
        let x = array![[0.1, 0.2, 0.3]];
        let cache = net.forward_cached(x.view()).unwrap();
        let (g, gin) = net.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.is_zero());
        assert!(gin.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_are_linear_in_upstream() {
        let net = DenseNet::init(&[3, 4, 2], Activation::Relu, Activation::Identity, 1).unwrap();
        let x = array![[0.1, -0.2, 0.3], [1.0, 0.5, -0.5]];
        let u = array![[1.0, -2.0], [0.5, 0.25]];
        let cache = net.forward_cached(x.view()).unwrap();
        let (g1, _) = net.backward(&cache, u.view()).unwrap();
        let (g3, _) = net.backward(&cache, (&u * 3.0).view()).unwrap();
        for (a, b) in g1.to_vec().iter().zip(g3.to_vec()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut net = DenseNet::init(&[3, 2], Activation::Tanh, Activation::Identity, 4).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, AdamConfig::default());
        opt.step(&mut net, &Gradients::zeros_like(&before));
        assert_eq!(net, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut net = DenseNet::zeros(&[2, 2], Activation::Tanh, Activation::Identity).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights.fill(0.37);
        g.layers[0].bias.fill(-5.0);
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.01));
        opt.step(&mut net, &g);
        for w in net.layers[0].weights.iter() {
            assert!((w + 0.01).abs() < 1e-9);
        }
        for b in net.layers[0].bias.iter() {
            assert!((b - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        // minimize ||W x - y||^2 for a fixed x, y
        let mut net = DenseNet::init(&[3, 2], Activation::Tanh, Activation::Identity, 8).unwrap();
        let x = array![[1.0, -0.5, 2.0]];
        let y = array![[0.3, -0.7]];
        let loss = |n: &DenseNet| (n.forward_batch(x.view()).unwrap() - &y).mapv(|v| v * v).sum();
        let initial = loss(&net);
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.01));
        for _ in 0..100 {
            let cache = net.forward_cached(x.view()).unwrap();
            let up = (&cache.output - &y) * 2.0;
            let (g, _) = net.backward(&cache, up.view()).unwrap();
            opt.step(&mut net, &g);
        }
        assert!(loss(&net) < initial);
        assert!(loss(&net) < 0.1 * initial);
    }

    #[test]
    fn params_round_trip() {
        let net = DenseNet::init(&[3, 4, 2], Activation::Relu, Activation::Softmax, 6).unwrap();
        let rebuilt = DenseNet::from_params(net.sizes(), Activation::Relu, Activation::Softmax, &net.params()).unwrap();
        assert_eq!(rebuilt, net);
    }

    #[test]
    fn clip_bounds_joint_norm() {
        let net = DenseNet::zeros(&[2, 2], Activation::Tanh, Activation::Identity).unwrap();
        let mut a = Gradients::zeros_like(&net);
        let mut b = Gradients::zeros_like(&net);
        a.layers[0].weights.fill(3.0);
        b.layers[0].bias.fill(4.0);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((before - (4.0 * 9.0 + 2.0 * 16.0f64).sqrt()).abs() < 1e-12);
        let after = (a.norm_sq() + b.norm_sq()).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
