//! Dense and convolutional layers with hand-written reverse-mode gradients,
//! Huber loss, Adam, and a central-difference gradient checker.
//!
//! Everything is row-major `f64`. Images are `H×W×C`, convolution kernels
//! `K×K×C×F`, dense weights `N_in×N_out`. The batched kernels stack samples
//! along a leading axis and lower convolutions to matrix products (im2col).

use crate::error::{Error, Result};

/// Step used by [`gradient_check`] for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Shape bookkeeping for a valid-padding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        filters: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_c == 0 || filters == 0 {
            return Err(Error::Config(format!(
                "convolution needs positive kernel/stride/channels/filters, got k={kernel} s={stride} c={in_c} f={filters}"
            )));
        }
        if kernel > in_h || kernel > in_w {
            return Err(Error::Config(format!(
                "kernel {kernel}x{kernel} does not fit a {in_h}x{in_w} input"
            )));
        }
        Ok(Self {
            in_h,
            in_w,
            in_c,
            kernel,
            stride,
            filters,
            out_h: Self::out_dim(in_h, kernel, stride),
            out_w: Self::out_dim(in_w, kernel, stride),
        })
    }

    /// Valid padding: `floor((in - kernel) / stride) + 1`.
    pub fn out_dim(in_dim: usize, kernel: usize, stride: usize) -> usize {
        (in_dim - kernel) / stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.positions() * self.filters
    }

    pub fn weight_len(&self) -> usize {
        self.patch_len() * self.filters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Convolution(ConvGeometry),
    Dense { inputs: usize, outputs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(
        input: (usize, usize, usize),
        kernel: usize,
        stride: usize,
        filters: usize,
        activation: Activation,
    ) -> Result<Self> {
        let geometry = ConvGeometry::new(input.0, input.1, input.2, kernel, stride, filters)?;
        Ok(Self {
            kind: LayerKind::Convolution(geometry),
            activation,
        })
    }

    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config(format!(
                "dense layer needs positive sizes, got {inputs}->{outputs}"
            )));
        }
        Ok(Self {
            kind: LayerKind::Dense { inputs, outputs },
            activation,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Convolution(g) => vec![g.in_h, g.in_w, g.in_c],
            LayerKind::Dense { inputs, .. } => vec![inputs],
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Convolution(g) => vec![g.out_h, g.out_w, g.filters],
            LayerKind::Dense { outputs, .. } => vec![outputs],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Convolution(g) => g.weight_len(),
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Convolution(g) => g.filters,
            LayerKind::Dense { outputs, .. } => outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    /// Fan-in of one output unit, used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Convolution(g) => g.patch_len(),
            LayerKind::Dense { inputs, .. } => inputs,
        }
    }

    /// Stable one-line description, e.g. `conv 32x32x1 k10 s2 -> 12x12x8 relu`.
    pub fn fingerprint(&self) -> String {
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::None => "linear",
        };
        match self.kind {
            LayerKind::Convolution(g) => format!(
                "conv {}x{}x{} k{} s{} -> {}x{}x{} {act}",
                g.in_h, g.in_w, g.in_c, g.kernel, g.stride, g.out_h, g.out_w, g.filters
            ),
            LayerKind::Dense { inputs, outputs } => format!("dense {inputs} -> {outputs} {act}"),
        }
    }
}

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
///
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias_rows(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn accumulate_bias_grad(out_grad: &[f64], bias_grad: &mut [f64]) {
    for row in out_grad.chunks_exact(bias_grad.len()) {
        for (g, o) in bias_grad.iter_mut().zip(row) {
            *g += o;
        }
    }
}

/// Unfolds every receptive field of a batch into one row of `cols`.
pub fn im2col(g: &ConvGeometry, batch: usize, input: &[f64], cols: &mut Vec<f64>) {
    let patch = g.patch_len();
    let span = g.kernel * g.in_c;
    cols.resize(batch * g.positions() * patch, 0.0);
    let mut row = 0;
    for n in 0..batch {
        let image = &input[n * g.input_len()..(n + 1) * g.input_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let src = ((oy * g.stride + ky) * g.in_w + ox * g.stride) * g.in_c;
                    dst[ky * span..(ky + 1) * span].copy_from_slice(&image[src..src + span]);
                }
                row += 1;
            }
        }
    }
}

fn col2im(g: &ConvGeometry, batch: usize, cols: &[f64], input_grad: &mut [f64]) {
    let patch = g.patch_len();
    let span = g.kernel * g.in_c;
    input_grad[..batch * g.input_len()].fill(0.0);
    let mut row = 0;
    for n in 0..batch {
        let image = &mut input_grad[n * g.input_len()..(n + 1) * g.input_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let dst = ((oy * g.stride + ky) * g.in_w + ox * g.stride) * g.in_c;
                    for (d, s) in image[dst..dst + span]
                        .iter_mut()
                        .zip(&src[ky * span..(ky + 1) * span])
                    {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched convolution forward pass. `cols` receives the im2col matrix that
/// [`conv2d_backward`] needs.
pub fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    cols: &mut Vec<f64>,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), batch * g.input_len());
    debug_assert_eq!(kernels.len(), g.weight_len());
    debug_assert_eq!(bias.len(), g.filters);
    im2col(g, batch, input, cols);
    let rows = batch * g.positions();
    gemm(
        rows,
        g.patch_len(),
        g.filters,
        cols,
        false,
        kernels,
        false,
        out,
        false,
    );
    add_bias_rows(&mut out[..rows * g.filters], bias);
}

/// Batched convolution backward pass. Kernel and bias gradients are
/// accumulated; the input gradient (when requested) is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    cols: &[f64],
    kernels: &[f64],
    out_grad: &[f64],
    kernel_grad: &mut [f64],
    bias_grad: &mut [f64],
    input_grad: Option<(&mut [f64], &mut Vec<f64>)>,
) {
    let rows = batch * g.positions();
    let patch = g.patch_len();
    gemm(
        patch, rows, g.filters, cols, true, out_grad, false, kernel_grad, true,
    );
    accumulate_bias_grad(&out_grad[..rows * g.filters], bias_grad);
    if let Some((input_grad, dcols)) = input_grad {
        dcols.resize(rows * patch, 0.0);
        gemm(rows, g.filters, patch, out_grad, false, kernels, true, dcols, false);
        col2im(g, batch, dcols, input_grad);
    }
}

/// Batched dense forward pass: `out = input · weights + bias`.
pub fn dense_forward(
    inputs: usize,
    outputs: usize,
    batch: usize,
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    gemm(batch, inputs, outputs, input, false, weights, false, out, false);
    add_bias_rows(&mut out[..batch * outputs], bias);
}

/// Batched dense backward pass. Weight and bias gradients are accumulated;
/// the input gradient (when requested) is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    inputs: usize,
    outputs: usize,
    batch: usize,
    input: &[f64],
    weights: &[f64],
    out_grad: &[f64],
    weight_grad: &mut [f64],
    bias_grad: &mut [f64],
    input_grad: Option<&mut [f64]>,
) {
    gemm(
        inputs, batch, outputs, input, true, out_grad, false, weight_grad, true,
    );
    accumulate_bias_grad(&out_grad[..batch * outputs], bias_grad);
    if let Some(input_grad) = input_grad {
        gemm(
            batch, outputs, inputs, out_grad, false, weights, true, input_grad, false,
        );
    }
}

pub fn relu_inplace(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the derivative of ReLU evaluated through its output.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Single-sample convolution: `H×W×C` input, `K×K×C×F` kernels.
pub fn conv2d_apply(input: &Tensor, kernels: &Tensor, bias: &[f64], stride: usize) -> Result<Tensor> {
    let g = conv_geometry_for(input, kernels, bias, stride)?;
    let mut out = vec![0.0; g.output_len()];
    let mut cols = Vec::new();
    conv2d_forward(&g, 1, input.data(), kernels.data(), bias, &mut cols, &mut out);
    Tensor::new(vec![g.out_h, g.out_w, g.filters], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

/// Gradients of a single-sample convolution given the upstream gradient.
pub fn conv2d_gradients(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
    out_grad: &Tensor,
) -> Result<ConvGradients> {
    let g = conv_geometry_for(input, kernels, bias, stride)?;
    if out_grad.shape() != [g.out_h, g.out_w, g.filters] {
        return Err(Error::Config(format!(
            "upstream gradient shape {:?} does not match output {}x{}x{}",
            out_grad.shape(),
            g.out_h,
            g.out_w,
            g.filters
        )));
    }
    let mut cols = Vec::new();
    im2col(&g, 1, input.data(), &mut cols);
    let mut kernel_grad = Tensor::zeros(kernels.shape().to_vec());
    let mut bias_grad = vec![0.0; g.filters];
    let mut input_grad = Tensor::zeros(input.shape().to_vec());
    let mut dcols = Vec::new();
    conv2d_backward(
        &g,
        1,
        &cols,
        kernels.data(),
        out_grad.data(),
        kernel_grad.data_mut(),
        &mut bias_grad,
        Some((input_grad.data_mut(), &mut dcols)),
    );
    Ok(ConvGradients {
        input: input_grad,
        kernels: kernel_grad,
        bias: bias_grad,
    })
}

fn conv_geometry_for(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
) -> Result<ConvGeometry> {
    let (&[h, w, c], &[kh, kw, kc, f]) = (input.shape(), kernels.shape()) else {
        return Err(Error::Config(format!(
            "convolution expects H×W×C input and K×K×C×F kernels, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    };
    if kh != kw || kc != c || bias.len() != f {
        return Err(Error::Config(format!(
            "inconsistent convolution shapes: input {:?}, kernels {:?}, bias {}",
            input.shape(),
            kernels.shape(),
            bias.len()
        )));
    }
    ConvGeometry::new(h, w, c, kh, stride, f)
}

/// Single-sample dense layer: `output[j] = Σ_i input[i]·weights[i][j] + bias[j]`.
pub fn dense_apply(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (n_in, n_out) = dense_dims(input, weights, bias)?;
    let mut out = vec![0.0; n_out];
    dense_forward(n_in, n_out, 1, input.data(), weights.data(), bias, &mut out);
    Tensor::new(vec![n_out], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

pub fn dense_gradients(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    out_grad: &Tensor,
) -> Result<DenseGradients> {
    let (n_in, n_out) = dense_dims(input, weights, bias)?;
    if out_grad.len() != n_out {
        return Err(Error::Config(format!(
            "upstream gradient has {} entries, layer has {n_out} outputs",
            out_grad.len()
        )));
    }
    let mut weight_grad = Tensor::zeros(weights.shape().to_vec());
    let mut bias_grad = vec![0.0; n_out];
    let mut input_grad = Tensor::zeros(vec![n_in]);
    dense_backward(
        n_in,
        n_out,
        1,
        input.data(),
        weights.data(),
        out_grad.data(),
        weight_grad.data_mut(),
        &mut bias_grad,
        Some(input_grad.data_mut()),
    );
    Ok(DenseGradients {
        input: input_grad,
        weights: weight_grad,
        bias: bias_grad,
    })
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<(usize, usize)> {
    let &[n_in, n_out] = weights.shape() else {
        return Err(Error::Config(format!(
            "dense weights must be N×M, got {:?}",
            weights.shape()
        )));
    };
    if input.len() != n_in || bias.len() != n_out {
        return Err(Error::Config(format!(
            "dense layer {n_in}->{n_out} got input of {} and bias of {}",
            input.len(),
            bias.len()
        )));
    }
    Ok((n_in, n_out))
}

/// Huber loss with threshold 1. Returns `(loss, d loss / d prediction)`.
pub fn huber_loss(prediction: f64, target: f64) -> Result<(f64, f64)> {
    if !prediction.is_finite() || !target.is_finite() {
        return Err(Error::InvalidInput(format!(
            "huber loss on non-finite values ({prediction}, {target})"
        )));
    }
    let e = prediction - target;
    if e.abs() <= 1.0 {
        Ok((0.5 * e * e, e))
    } else {
        Ok((e.abs() - 0.5, e.signum()))
    }
}

/// Moment estimates and hyperparameters of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

    pub fn new(param_count: usize) -> Self {
        Self::with_learning_rate(param_count, Self::DEFAULT_LEARNING_RATE)
    }

    pub fn with_learning_rate(param_count: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched when the
/// gradient contains a non-finite value.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::Config(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient {} at parameter {i}",
            grads[i]
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon_hat;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// Each parameter is perturbed in place by ±[`FD_STEP`] and restored
/// bit-exactly. The per-parameter error is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check<F>(
    mut loss: F,
    params: &mut [f64],
    analytic: &[f64],
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient_check: length mismatch");
    let mut relative_errors = Vec::with_capacity(params.len());
    let mut max_relative_error = 0.0;
    let mut worst_index = 0;
    for i in 0..params.len() {
        let original = params[i];
        params[i] = original + FD_STEP;
        let plus = loss(params);
        params[i] = original - FD_STEP;
        let minus = loss(params);
        params[i] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > max_relative_error || err.is_nan() {
            max_relative_error = err;
            worst_index = i;
        }
        relative_errors.push(err);
    }
    GradCheckReport {
        relative_errors,
        max_relative_error,
        worst_index,
        tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn valid_padding_shapes_of_the_q_network() {
        assert_eq!(ConvGeometry::out_dim(32, 10, 2), 12);
        assert_eq!(ConvGeometry::out_dim(12, 6, 1), 7);
        assert_eq!(ConvGeometry::out_dim(7, 3, 1), 5);
        let input = Tensor::zeros(vec![32, 32, 1]);
        let kernels = Tensor::zeros(vec![10, 10, 1, 8]);
        let out = conv2d_apply(&input, &kernels, &[0.0; 8], 2).unwrap();
        assert_eq!(out.shape(), &[12, 12, 8]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, vec![5, 4, 1]);
        let kernels = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d_apply(&input, &kernels, &[0.0], 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_hand_evaluated() {
        let input = Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let kernels = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d_apply(&input, &kernels, &[0.0], 1).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = Tensor::zeros(vec![4, 4, 1]);
        let too_big = Tensor::zeros(vec![5, 5, 1, 1]);
        assert!(matches!(
            conv2d_apply(&input, &too_big, &[0.0], 1),
            Err(Error::Config(_))
        ));
        let wrong_channels = Tensor::zeros(vec![2, 2, 3, 1]);
        assert!(conv2d_apply(&input, &wrong_channels, &[0.0], 1).is_err());
        let ok = Tensor::zeros(vec![2, 2, 1, 1]);
        assert!(conv2d_apply(&input, &ok, &[0.0], 0).is_err());
        assert!(conv2d_apply(&input, &ok, &[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn dense_examples() {
        let identity = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(dense_apply(&x, &identity, &[0.0, 0.0]).unwrap().data(), &[1.0, 2.0]);

        let w = Tensor::new(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let zeros = Tensor::zeros(vec![2]);
        assert_eq!(dense_apply(&zeros, &w, &[0.7, -2.0]).unwrap().data(), &[0.7, -2.0]);

        let ones = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(dense_apply(&ones, &w, &[1.0, 1.0]).unwrap().data(), &[7.0, 9.0]);

        assert!(dense_apply(&Tensor::zeros(vec![3]), &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_loss(0.0, 0.0).unwrap(), (0.0, 0.0));
        assert_eq!(huber_loss(1.5, 1.0).unwrap(), (0.125, 0.5));
        assert_eq!(huber_loss(2.0, 0.0).unwrap(), (1.5, 1.0));
        assert_eq!(huber_loss(-2.0, 0.0).unwrap(), (1.5, -1.0));
        assert!(huber_loss(f64::NAN, 0.0).is_err());
        assert!(huber_loss(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn huber_continuous_at_threshold() {
        for sign in [1.0, -1.0] {
            let (l_in, g_in) = huber_loss(sign * (1.0 - 1e-9), 0.0).unwrap();
            let (l_out, g_out) = huber_loss(sign * (1.0 + 1e-9), 0.0).unwrap();
            assert!((l_in - l_out).abs() < 1e-6);
            assert!((g_in - g_out).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_grads_fresh_state() {
        let mut params = vec![0.3, -1.2, 4.0];
        let before = params.clone();
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0; 3], &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut p = [0.5];
        let mut state = AdamState::new(1);
        adam_step(&mut p, &[0.1], &mut state).unwrap();
        assert!((0.5 - p[0] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn adam_two_step_trace() {
        // Constant gradient 1: t=1 gives m=0.1, v=0.001; t=2 gives m=0.19,
        // v=0.001999. Both bias-corrected moments equal 1 at each step, so each
        // update is lr / (1 + eps).
        let mut p = [1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut state).unwrap();
        assert!((state.first_moment[0] - 0.1).abs() < 1e-15);
        assert!((state.second_moment[0] - 0.001).abs() < 1e-15);
        let after_one = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p[0] - after_one).abs() < 1e-15);
        adam_step(&mut p, &[1.0], &mut state).unwrap();
        assert!((state.first_moment[0] - 0.19).abs() < 1e-15);
        assert!((state.second_moment[0] - 0.001999).abs() < 1e-15);
        assert!((p[0] - (after_one - 0.001 / (1.0 + 1e-8))).abs() < 1e-14);
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn adam_rejects_non_finite_and_mismatch() {
        let mut p = vec![1.0, 2.0];
        let mut state = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut p, &[0.0, f64::NAN], &mut state),
            Err(Error::Training(_))
        ));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(state.step_count, 0);
        assert!(adam_step(&mut p, &[0.0], &mut state).is_err());
    }

    proptest! {
        #[test]
        fn adam_zero_grads_identity_for_any_step_count(
            steps in 1usize..40,
            params in prop::collection::vec(-10.0f64..10.0, 1..8),
        ) {
            let mut p = params.clone();
            let mut state = AdamState::new(p.len());
            let zeros = vec![0.0; p.len()];
            for _ in 0..steps {
                adam_step(&mut p, &zeros, &mut state).unwrap();
            }
            prop_assert_eq!(p, params);
            prop_assert_eq!(state.step_count, steps as u64);
        }
    }

    #[test]
    fn dense_gradient_check() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, vec![7]);
            let weights = random_tensor(&mut rng, vec![7, 5]);
            let bias: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probe = random_tensor(&mut rng, vec![5]);

            let grads = dense_gradients(&input, &weights, &bias, &probe).unwrap();
            // Parameters packed as [input | weights | bias].
            let mut params: Vec<f64> = input
                .data()
                .iter()
                .chain(weights.data())
                .chain(&bias)
                .copied()
                .collect();
            let analytic: Vec<f64> = grads
                .input
                .data()
                .iter()
                .chain(grads.weights.data())
                .chain(&grads.bias)
                .copied()
                .collect();
            let report = gradient_check(
                |p| {
                    let x = Tensor::new(vec![7], p[..7].to_vec()).unwrap();
                    let w = Tensor::new(vec![7, 5], p[7..42].to_vec()).unwrap();
                    let out = dense_apply(&x, &w, &p[42..]).unwrap();
                    out.data().iter().zip(probe.data()).map(|(o, c)| o * c).sum()
                },
                &mut params,
                &analytic,
                1e-4,
            );
            assert!(report.passed(), "seed {seed}: {}", report.max_relative_error);
        }
    }

    #[test]
    fn conv_gradient_check() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let stride = 1 + seed as usize % 2;
            let input = random_tensor(&mut rng, vec![6, 6, 2]);
            let kernels = random_tensor(&mut rng, vec![3, 3, 2, 3]);
            let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out_dim = ConvGeometry::out_dim(6, 3, stride);
            let probe = random_tensor(&mut rng, vec![out_dim, out_dim, 3]);

            let grads = conv2d_gradients(&input, &kernels, &bias, stride, &probe).unwrap();
            let (ni, nk) = (input.len(), kernels.len());
            let mut params: Vec<f64> = input
                .data()
                .iter()
                .chain(kernels.data())
                .chain(&bias)
                .copied()
                .collect();
            let analytic: Vec<f64> = grads
                .input
                .data()
                .iter()
                .chain(grads.kernels.data())
                .chain(&grads.bias)
                .copied()
                .collect();
            let report = gradient_check(
                |p| {
                    let x = Tensor::new(vec![6, 6, 2], p[..ni].to_vec()).unwrap();
                    let k = Tensor::new(vec![3, 3, 2, 3], p[ni..ni + nk].to_vec()).unwrap();
                    let out = conv2d_apply(&x, &k, &p[ni + nk..], stride).unwrap();
                    out.data().iter().zip(probe.data()).map(|(o, c)| o * c).sum()
                },
                &mut params,
                &analytic,
                1e-4,
            );
            assert!(report.passed(), "seed {seed}: {}", report.max_relative_error);
        }
    }

    #[test]
    fn batched_conv_matches_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeometry::new(8, 8, 2, 3, 2, 4).unwrap();
        let batch = 3;
        let input: Vec<f64> = (0..batch * g.input_len()).map(|_| rng.gen()).collect();
        let kernels = random_tensor(&mut rng, vec![3, 3, 2, 4]);
        let bias = [0.1, 0.2, 0.3, 0.4];
        let mut cols = Vec::new();
        let mut out = vec![0.0; batch * g.output_len()];
        conv2d_forward(&g, batch, &input, kernels.data(), &bias, &mut cols, &mut out);
        for n in 0..batch {
            let x = Tensor::new(vec![8, 8, 2], input[n * 128..(n + 1) * 128].to_vec()).unwrap();
            let single = conv2d_apply(&x, &kernels, &bias, 2).unwrap();
            let got = &out[n * g.output_len()..(n + 1) * g.output_len()];
            for (a, b) in got.iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_tensor(&mut rng, vec![12, 12, 8]);
        let kernels = random_tensor(&mut rng, vec![6, 6, 8, 16]);
        let bias = vec![0.01; 16];
        let a = conv2d_apply(&input, &kernels, &bias, 1).unwrap();
        let b = conv2d_apply(&input, &kernels, &bias, 1).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn relu_backward_masks_inactive_units() {
        let mut x = vec![-1.0, 0.0, 2.0];
        relu_inplace(&mut x);
        assert_eq!(x, vec![0.0, 0.0, 2.0]);
        let mut g = vec![5.0, 5.0, 5.0];
        relu_backward(&x, &mut g);
        assert_eq!(g, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn layer_spec_counts() {
        let conv = LayerSpec::conv((32, 32, 1), 10, 2, 8, Activation::Relu).unwrap();
        assert_eq!(conv.param_count(), 808);
        assert_eq!(conv.output_shape(), vec![12, 12, 8]);
        assert_eq!(conv.fingerprint(), "conv 32x32x1 k10 s2 -> 12x12x8 relu");
        let dense = LayerSpec::dense(800, 64, Activation::Relu).unwrap();
        assert_eq!(dense.param_count(), 51_264);
        assert!(LayerSpec::dense(0, 4, Activation::None).is_err());
        assert!(LayerSpec::conv((4, 4, 1), 5, 1, 1, Activation::None).is_err());
    }
}
