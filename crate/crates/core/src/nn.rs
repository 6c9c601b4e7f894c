//! Small feed-forward networks over `(M+3) x k` input matrices.
//!
//! Every input row is cross-correlated (valid mode, stride 1) with its own
//! filter, the row outputs are concatenated, passed through ReLU dense layers
//! and finally through a bias-free output layer (softmax logits or a scalar).
//!
//! Flat parameter layout: the filters row by row, then each dense matrix in
//! row-major order (one row per output neuron).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AbrError, Result};

/// Floor applied to log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Softmax { actions: usize },
    Scalar,
}

impl Head {
    pub fn outputs(&self) -> usize {
        match self {
            Head::Softmax { actions } => *actions,
            Head::Scalar => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_rows: usize,
    pub window: usize,
    pub conv_filter_len: usize,
    pub hidden_sizes: Vec<usize>,
    pub head: Head,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_rows == 0 || self.window == 0 {
            return Err(AbrError::Spec("input must have at least one row and column".into()));
        }
        if self.conv_filter_len == 0 || self.conv_filter_len > self.window {
            return Err(AbrError::Spec(format!(
                "filter length {} must lie in 1..={}",
                self.conv_filter_len, self.window
            )));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(AbrError::Spec("hidden sizes must be non-empty and positive".into()));
        }
        if self.head.outputs() == 0 {
            return Err(AbrError::Spec("softmax head needs at least one action".into()));
        }
        Ok(())
    }

    pub fn conv_out_len(&self) -> usize {
        self.window - self.conv_filter_len + 1
    }

    /// Length of the concatenated convolution output.
    pub fn conv_dim(&self) -> usize {
        self.input_rows * self.conv_out_len()
    }

    pub fn input_len(&self) -> usize {
        self.input_rows * self.window
    }

    /// Output width of every dense layer, the head last.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = self.hidden_sizes.clone();
        sizes.push(self.head.outputs());
        sizes
    }

    /// `(out, in)` shape of every dense matrix.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.conv_dim();
        self.layer_sizes()
            .into_iter()
            .map(|out| {
                let shape = (out, fan_in);
                fan_in = out;
                shape
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.input_rows * self.conv_filter_len + self.layer_shapes().iter().map(|(o, i)| o * i).sum::<usize>()
    }
}

/// Row convolution: output row `j` at position `t` is
/// `sum_i filter_j[i] * x_j[t + i]`.
pub fn conv_rows(x: &[f64], rows: usize, window: usize, filters: &[f64], filter_len: usize) -> Vec<f64> {
    let out_len = window - filter_len + 1;
    let mut out = Vec::with_capacity(rows * out_len);
    for j in 0..rows {
        let xr = &x[j * window..(j + 1) * window];
        let f = &filters[j * filter_len..(j + 1) * filter_len];
        for t in 0..out_len {
            out.push(f.iter().zip(&xr[t..t + filter_len]).map(|(a, b)| a * b).sum());
        }
    }
    out
}

/// Accumulates the filter gradient of [`conv_rows`] into `d_filters`.
pub fn conv_rows_backward(
    x: &[f64],
    rows: usize,
    window: usize,
    filter_len: usize,
    d_out: &[f64],
    d_filters: &mut [f64],
) {
    let out_len = window - filter_len + 1;
    for j in 0..rows {
        let xr = &x[j * window..(j + 1) * window];
        let dout = &d_out[j * out_len..(j + 1) * out_len];
        for i in 0..filter_len {
            d_filters[j * filter_len + i] += dout.iter().zip(&xr[i..i + out_len]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// `w x` for a row-major `out x x.len()` matrix.
pub fn dense(w: &[f64], out: usize, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..out)
        .map(|o| w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Accumulates `d_w += d_out x^T` and, when requested, `d_x += w^T d_out`.
pub fn dense_backward(w: &[f64], x: &[f64], d_out: &[f64], d_w: &mut [f64], d_x: Option<&mut [f64]>) {
    let n = x.len();
    for (o, g) in d_out.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        for (dw, xi) in d_w[o * n..(o + 1) * n].iter_mut().zip(x) {
            *dw += g * xi;
        }
    }
    if let Some(d_x) = d_x {
        for (o, g) in d_out.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            for (dx, wi) in d_x.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *dx += g * wi;
            }
        }
    }
}

pub fn relu(mut v: Vec<f64>) -> Vec<f64> {
    for x in &mut v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
    v
}

/// Zeroes cotangent entries whose ReLU output was not positive.
pub fn relu_backward(activation: &[f64], d: &mut [f64]) {
    for (g, a) in d.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Log-softmax floored at [`LOG_PROB_FLOOR`]; the mask marks floored entries.
pub fn log_softmax(z: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter()
        .map(|v| {
            let lp = v - lse;
            if lp < LOG_PROB_FLOOR {
                (LOG_PROB_FLOOR, true)
            } else {
                (lp, false)
            }
        })
        .unzip()
}

/// Uniform samples in `+-scale * sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_fill(out: &mut [f64], fan_in: usize, fan_out: usize, scale: f64, rng: &mut impl Rng) {
    let limit = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out {
        *v = rng.random_range(-limit..=limit);
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    /// Concatenated convolution output `h_0`.
    pub conv: Vec<f64>,
    /// ReLU outputs `h_1 .. h_{L-1}`.
    pub hidden: Vec<Vec<f64>>,
}

impl Trunk {
    /// Input of the output layer.
    pub fn last(&self) -> &[f64] {
        self.hidden.last().map(Vec::as_slice).unwrap_or(&self.conv)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub trunk: Trunk,
    /// Raw head output: logits, or the single value.
    pub out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    spec: NetSpec,
    params: Vec<f64>,
    /// Offset of each dense matrix in `params`.
    offsets: Vec<usize>,
    shapes: Vec<(usize, usize)>,
}

impl Net {
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_params();
        Self::from_flat(spec, vec![0.0; n])
    }

    pub fn from_flat(spec: NetSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(AbrError::Spec(format!(
                "parameter vector has {} entries, spec needs {}",
                params.len(),
                spec.num_params()
            )));
        }
        let shapes = spec.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut at = spec.input_rows * spec.conv_filter_len;
        for (o, i) in &shapes {
            offsets.push(at);
            at += o * i;
        }
        Ok(Self {
            spec,
            params,
            offsets,
            shapes,
        })
    }

    /// Seeded Glorot-uniform initialization; filters use fan-in `n_0` and
    /// fan-out 1.
    pub fn glorot(spec: NetSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let n0 = net.spec.conv_filter_len;
        let nf = net.spec.input_rows * n0;
        glorot_fill(&mut net.params[..nf], n0, 1, 1.0, rng);
        for l in 0..net.shapes.len() {
            let (o, i) = net.shapes[l];
            let at = net.offsets[l];
            glorot_fill(&mut net.params[at..at + o * i], i, o, 1.0, rng);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn filters(&self) -> &[f64] {
        &self.params[..self.spec.input_rows * self.spec.conv_filter_len]
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// Row-major matrix of dense layer `l` (0-based; the head is last).
    pub fn layer(&self, l: usize) -> &[f64] {
        let (o, i) = self.shapes[l];
        &self.params[self.offsets[l]..self.offsets[l] + o * i]
    }

    pub fn layer_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        self.shapes[l]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_len() {
            return Err(AbrError::Spec(format!(
                "input has {} entries, network expects {}x{}",
                x.len(),
                self.spec.input_rows,
                self.spec.window
            )));
        }
        Ok(())
    }

    /// Convolution and hidden layers, excluding the output layer.
    pub fn trunk(&self, x: &[f64]) -> Result<Trunk> {
        self.check_input(x)?;
        let s = &self.spec;
        let conv = conv_rows(x, s.input_rows, s.window, self.filters(), s.conv_filter_len);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(s.hidden_sizes.len());
        for l in 0..s.hidden_sizes.len() {
            let input = hidden.last().unwrap_or(&conv);
            let h = relu(dense(self.layer(l), self.shapes[l].0, input));
            hidden.push(h);
        }
        Ok(Trunk { conv, hidden })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let trunk = self.trunk(x)?;
        let head = self.shapes.len() - 1;
        let out = dense(self.layer(head), self.shapes[head].0, trunk.last());
        Ok(Forward { trunk, out })
    }

    /// Action probabilities (softmax head) or a one-element value vector.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.forward(x)?;
        Ok(match self.spec.head {
            Head::Softmax { .. } => softmax(&f.out),
            Head::Scalar => f.out,
        })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.out[0])
    }

    /// Gradient of a scalar objective in flat layout, given its cotangent
    /// `d_out` with respect to the raw head output of `cache`.
    pub fn backward(&self, x: &[f64], cache: &Forward, d_out: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(x, cache, d_out, &mut grad);
        grad
    }

    /// Like [`Net::backward`], accumulating into `grad`.
    pub fn backward_into(&self, x: &[f64], cache: &Forward, d_out: &[f64], grad: &mut [f64]) {
        let s = &self.spec;
        let n_hidden = s.hidden_sizes.len();
        let mut d = d_out.to_vec();
        for l in (0..=n_hidden).rev() {
            let input = if l == 0 { &cache.trunk.conv } else { &cache.trunk.hidden[l - 1] };
            let at = self.offsets[l];
            let (o, i) = self.shapes[l];
            let mut d_in = vec![0.0; i];
            dense_backward(self.layer(l), input, &d, &mut grad[at..at + o * i], Some(&mut d_in));
            if l > 0 {
                relu_backward(input, &mut d_in);
            }
            d = d_in;
        }
        let nf = s.input_rows * s.conv_filter_len;
        conv_rows_backward(x, s.input_rows, s.window, s.conv_filter_len, &d, &mut grad[..nf]);
    }
}

/// RMSProp hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmspConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmspConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            rho: 0.99,
            epsilon: 1e-6,
        }
    }
}

/// RMSProp state for one parameter vector. `step` descends along `grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rmsprop {
    pub config: RmspConfig,
    accumulator: Vec<f64>,
}

impl Rmsprop {
    pub fn new(config: RmspConfig, num_params: usize) -> Self {
        Self {
            config,
            accumulator: vec![0.0; num_params],
        }
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let RmspConfig {
            learning_rate,
            rho,
            epsilon,
        } = self.config;
        for ((p, g), a) in params.iter_mut().zip(grad).zip(&mut self.accumulator) {
            *a = rho * *a + (1.0 - rho) * g * g;
            if *g != 0.0 {
                *p -= learning_rate * g / (a.sqrt() + epsilon);
            }
        }
    }

    /// Gradient ascent on an objective whose gradient is `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.step(params, &neg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(rows: usize, k: usize, n0: usize, hidden: Vec<usize>, head: Head) -> NetSpec {
        NetSpec {
            input_rows: rows,
            window: k,
            conv_filter_len: n0,
            hidden_sizes: hidden,
            head,
        }
    }

    #[test]
    fn zero_weights_give_uniform_and_zero() {
        let x = vec![0.7; 6 * 8];
        let actor = Net::zeros(spec(6, 8, 4, vec![16], Head::Softmax { actions: 6 })).unwrap();
        for p in actor.output(&x).unwrap() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        let critic = Net::zeros(spec(6, 8, 4, vec![16], Head::Scalar)).unwrap();
        assert_eq!(critic.value(&x).unwrap(), 0.0);
    }

    #[test]
    fn hand_forward_two_actions() {
        // One row, k = 2, filter [1], hidden 2 neurons, 2 actions.
        let s = spec(1, 2, 1, vec![2], Head::Softmax { actions: 2 });
        // filter | W1 (2x2) | W2 (2x2)
        let params = vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, -1.0];
        let net = Net::from_flat(s, params).unwrap();
        let x = [0.5, -2.0];
        // conv = [0.5, -2]; h1 = relu([0.5, -2]) = [0.5, 0]; z = [0.5, 0]
        let f = net.forward(&x).unwrap();
        assert_eq!(f.trunk.hidden[0], vec![0.5, 0.0]);
        assert_eq!(f.out, vec![0.5, 0.0]);
        let p = net.output(&x).unwrap();
        let e = 0.5f64.exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn hand_forward_single_neuron_critic() {
        // Two rows, k = 3, filter length 2, one hidden neuron.
        let s = spec(2, 3, 2, vec![1], Head::Scalar);
        let params = vec![1.0, -1.0, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 3.0];
        let net = Net::from_flat(s, params).unwrap();
        let x = [3.0, 1.0, 2.0, 4.0, 0.0, 2.0];
        // row0: [3-1, 1-2] = [2, -1]; row1: [2, 1]; sum = 4; relu 4; value 12
        assert_eq!(net.value(&x).unwrap(), 12.0);
        let mut scaled = net.clone();
        let at = scaled.layer_offset(1);
        scaled.params_mut()[at] *= -2.5;
        assert_eq!(scaled.value(&x).unwrap(), -30.0);
    }

    #[test]
    fn parameter_count_closed_form() {
        for (m, k, n0, hidden, d) in [(3usize, 8usize, 4usize, vec![128usize], 6usize), (0, 8, 4, vec![64, 32], 6), (2, 5, 1, vec![3, 4, 5], 2)] {
            let rows = m + 3;
            let mut sizes = hidden.clone();
            sizes.push(d);
            let closed = rows * n0
                + sizes[0] * rows * (k - n0 + 1)
                + sizes.windows(2).map(|w| w[0] * w[1]).sum::<usize>();
            let net = Net::zeros(spec(rows, k, n0, hidden, Head::Softmax { actions: d })).unwrap();
            assert_eq!(net.params().len(), closed);
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Net::zeros(spec(3, 4, 5, vec![2], Head::Scalar)).is_err());
        assert!(Net::zeros(spec(3, 4, 2, vec![], Head::Scalar)).is_err());
        let net = Net::zeros(spec(3, 4, 2, vec![2], Head::Scalar)).unwrap();
        assert!(matches!(net.forward(&[0.0; 11]), Err(AbrError::Spec(_))));
    }

    fn fd_check(net: &Net, x: &[f64], cot: &[f64]) {
        let f = net.forward(x).unwrap();
        let grad = net.backward(x, &f, cot);
        let loss = |n: &Net| -> f64 { n.forward(x).unwrap().out.iter().zip(cot).map(|(a, b)| a * b).sum() };
        let h = 1e-5;
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = if grad[i].abs() < 1e-8 && fd.abs() < 1e-8 {
                0.0
            } else {
                (grad[i] - fd).abs() / grad[i].abs().max(fd.abs())
            };
            assert!(err < 1e-4, "coordinate {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for head in [Head::Softmax { actions: 3 }, Head::Scalar] {
            for hidden in [vec![5], vec![4, 3]] {
                let net = Net::glorot(spec(4, 6, 3, hidden, head), &mut rng).unwrap();
                let x: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
                let cot: Vec<f64> = (0..head.outputs()).map(|_| rng.random_range(-1.0..1.0)).collect();
                fd_check(&net, &x, &cot);
            }
        }
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Net::glorot(spec(3, 4, 2, vec![3], Head::Softmax { actions: 2 }), &mut rng).unwrap();
        let x = vec![0.3; 12];
        let f = net.forward(&x).unwrap();
        assert!(net.backward(&x, &f, &[0.0, 0.0]).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn rmsprop_hand_step() {
        let cfg = RmspConfig { learning_rate: 0.01, rho: 0.9, epsilon: 0.0 };
        let mut opt = Rmsprop::new(cfg, 2);
        let mut p = vec![0.0, 5.0];
        opt.step(&mut p, &[1.0, 0.0]);
        assert!((p[0] + 0.01 / 0.1f64.sqrt()).abs() < 1e-15);
        assert!((p[0].abs() / 0.01 - 3.162_277_660_168_379_5).abs() < 1e-12);
        assert_eq!(p[1], 5.0);
        assert!(opt.accumulator().iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn log_softmax_floor() {
        let (lp, floored) = log_softmax(&[0.0, -100.0]);
        assert!(lp[0].abs() < 1e-15);
        assert_eq!(lp[1], LOG_PROB_FLOOR);
        assert_eq!(floored, vec![false, true]);
    }

    proptest! {
        #[test]
        fn softmax_invariants(z in proptest::collection::vec(-50.0f64..50.0, 2..8), c in -100.0f64..100.0) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn flat_round_trip(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = spec(5, 6, 2, vec![4, 3], Head::Softmax { actions: 6 });
            let net = Net::glorot(s.clone(), &mut rng).unwrap();
            let back = Net::from_flat(s, net.params().to_vec()).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}
