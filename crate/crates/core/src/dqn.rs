//! Two-lane Q-network over (depth image, body-frame relative position).
//!
//! Lane 1 is a conv stack on the 32×32 depth image:
//! `conv 8@10×10/2 → conv 16@6×6/1 → conv 32@3×3/1 → flatten 800 → dense 64`.
//! Lane 2 feeds each relative-position component to its own dense sub-lane
//! (`x → 16`, `y → 8`, `z → 8`), concatenates to 32 and maps to 16.
//! The 64 + 16 features are concatenated and passed through `64 → 32 → 18`.
//! Every layer applies ReLU except the last.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depthcam::{DepthImage, PIXELS};
use crate::error::{Error, Result};
use crate::tensor_nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, relu_backward, relu_inplace,
    gradient_check, Activation, AdamState, ConvGeometry, GradCheckReport, LayerKind, LayerSpec,
};
use crate::Vec3;

pub const NUM_ACTIONS: usize = 18;
pub const PARAM_COUNT: usize = 69_786;

const CONV1: usize = 0;
const CONV2: usize = 1;
const CONV3: usize = 2;
const IMAGE_FC: usize = 3;
const POS_X: usize = 4;
const POS_Y: usize = 5;
const POS_Z: usize = 6;
const POS_MERGE: usize = 7;
const HEAD1: usize = 8;
const HEAD2: usize = 9;
const HEAD_OUT: usize = 10;
const LAYERS: usize = 11;

const FLAT: usize = 800;
const IMAGE_FEATURES: usize = 64;
const POS_WIDTHS: [usize; 3] = [16, 8, 8];
const POS_CONCAT: usize = 32;
const POS_FEATURES: usize = 16;
const FUSED: usize = IMAGE_FEATURES + POS_FEATURES;
const HEAD1_WIDTH: usize = 64;
const HEAD2_WIDTH: usize = 32;

/// Layer shapes and their offsets in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub layers: [LayerSpec; LAYERS],
    offsets: [usize; LAYERS],
    total: usize,
}

impl Architecture {
    fn build() -> Result<Self> {
        use Activation::{None as Linear, Relu};
        let layers = [
            LayerSpec::conv((32, 32, 1), 10, 2, 8, Relu)?,
            LayerSpec::conv((12, 12, 8), 6, 1, 16, Relu)?,
            LayerSpec::conv((7, 7, 16), 3, 1, 32, Relu)?,
            LayerSpec::dense(FLAT, IMAGE_FEATURES, Relu)?,
            LayerSpec::dense(1, POS_WIDTHS[0], Relu)?,
            LayerSpec::dense(1, POS_WIDTHS[1], Relu)?,
            LayerSpec::dense(1, POS_WIDTHS[2], Relu)?,
            LayerSpec::dense(POS_CONCAT, POS_FEATURES, Relu)?,
            LayerSpec::dense(FUSED, HEAD1_WIDTH, Relu)?,
            LayerSpec::dense(HEAD1_WIDTH, HEAD2_WIDTH, Relu)?,
            LayerSpec::dense(HEAD2_WIDTH, NUM_ACTIONS, Linear)?,
        ];
        // Wiring checks: each consumer sees exactly what its producers emit.
        let wiring = [
            (layers[CONV1].output_len(), layers[CONV2].input_len()),
            (layers[CONV2].output_len(), layers[CONV3].input_len()),
            (layers[CONV3].output_len(), layers[IMAGE_FC].input_len()),
            (
                layers[POS_X].output_len() + layers[POS_Y].output_len() + layers[POS_Z].output_len(),
                layers[POS_MERGE].input_len(),
            ),
            (
                layers[IMAGE_FC].output_len() + layers[POS_MERGE].output_len(),
                layers[HEAD1].input_len(),
            ),
            (layers[HEAD1].output_len(), layers[HEAD2].input_len()),
            (layers[HEAD2].output_len(), layers[HEAD_OUT].input_len()),
        ];
        if let Some((out, inp)) = wiring.iter().find(|(o, i)| o != i) {
            return Err(Error::Config(format!(
                "layer produces {out} values but the next expects {inp}"
            )));
        }
        let mut offsets = [0; LAYERS];
        let mut total = 0;
        for (offset, layer) in offsets.iter_mut().zip(&layers) {
            *offset = total;
            total += layer.param_count();
        }
        Ok(Self {
            layers,
            offsets,
            total,
        })
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    /// Layer shape list stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        self.layers
            .iter()
            .map(LayerSpec::fingerprint)
            .collect::<Vec<_>>()
            .join("; ")
    }

    fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.offsets[layer];
        start..start + self.layers[layer].weight_len()
    }

    fn bias_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.offsets[layer] + self.layers[layer].weight_len();
        start..start + self.layers[layer].bias_len()
    }

    fn conv(&self, layer: usize) -> ConvGeometry {
        match self.layers[layer].kind {
            LayerKind::Convolution(g) => g,
            LayerKind::Dense { .. } => unreachable!("layer {layer} is dense"),
        }
    }

    fn dense(&self, layer: usize) -> (usize, usize) {
        match self.layers[layer].kind {
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
            LayerKind::Convolution(_) => unreachable!("layer {layer} is a convolution"),
        }
    }

    /// Mutable weight and bias slices of one layer.
    fn split_mut<'a>(&self, values: &'a mut [f64], layer: usize) -> (&'a mut [f64], &'a mut [f64]) {
        let start = self.offsets[layer];
        let len = self.layers[layer].param_count();
        values[start..start + len].split_at_mut(self.layers[layer].weight_len())
    }
}

pub fn architecture() -> &'static Architecture {
    static ARCH: OnceLock<Architecture> = OnceLock::new();
    ARCH.get_or_init(|| Architecture::build().expect("static architecture is consistent"))
}

/// Every weight and bias of the Q-network in one flat vector, layer by layer
/// (weights then biases).
#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkParams {
    values: Vec<f64>,
}

/// Q-value estimate for each primitive.
pub type QValues = [f64; NUM_ACTIONS];

/// Inputs for a batch of states.
#[derive(Debug, Clone, Default)]
pub struct InputBatch {
    pub depth: Vec<f64>,
    pub relpos: Vec<f64>,
}

impl InputBatch {
    pub fn with_capacity(batch: usize) -> Self {
        Self {
            depth: Vec::with_capacity(batch * PIXELS),
            relpos: Vec::with_capacity(batch * 3),
        }
    }

    pub fn clear(&mut self) {
        self.depth.clear();
        self.relpos.clear();
    }

    pub fn push(&mut self, depth: &DepthImage, relpos: &Vec3) {
        self.depth.extend_from_slice(depth.pixels());
        self.relpos.extend_from_slice(relpos.as_slice());
    }

    pub fn len(&self) -> usize {
        self.relpos.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.relpos.is_empty()
    }
}

/// Activations kept from a forward pass for the backward pass, plus scratch.
#[derive(Debug, Default, Clone)]
pub struct ForwardCache {
    batch: usize,
    kink_margin: f64,
    cols: [Vec<f64>; 3],
    conv_out: [Vec<f64>; 3],
    image_features: Vec<f64>,
    pos_in: [Vec<f64>; 3],
    pos_lanes: [Vec<f64>; 3],
    pos_concat: Vec<f64>,
    pos_features: Vec<f64>,
    fused: Vec<f64>,
    head1: Vec<f64>,
    head2: Vec<f64>,
    q: Vec<f64>,
    // backward scratch
    dcols: Vec<f64>,
    g_head2: Vec<f64>,
    g_head1: Vec<f64>,
    g_fused: Vec<f64>,
    g_image: Vec<f64>,
    g_conv: [Vec<f64>; 3],
    g_pos_features: Vec<f64>,
    g_pos_concat: Vec<f64>,
    g_pos_lanes: [Vec<f64>; 3],
}

fn sized(buf: &mut Vec<f64>, len: usize) -> &mut Vec<f64> {
    buf.resize(len, 0.0);
    buf
}

fn relu_tracked(values: &mut [f64], margin: &mut f64) {
    for v in values.iter() {
        *margin = margin.min(v.abs());
    }
    relu_inplace(values);
}

impl ForwardCache {
    /// Smallest `|pre-activation|` fed to any ReLU in the last forward pass.
    /// Central differences straddle a kink when a perturbation moves some
    /// unit by more than this.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn q_values(&self) -> &[f64] {
        &self.q[..self.batch * NUM_ACTIONS]
    }
}

impl QNetworkParams {
    /// Uniform `±sqrt(6 / fan_in)` weights and zero biases, deterministic in `seed`.
    pub fn build(seed: u64) -> Self {
        let arch = architecture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; arch.total];
        for (i, layer) in arch.layers.iter().enumerate() {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            for w in &mut values[arch.weight_range(i)] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Self { values }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != architecture().total {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                architecture().total,
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Q-values for a single state.
    pub fn forward(&self, depth: &DepthImage, relpos: &Vec3) -> Result<QValues> {
        let mut cache = ForwardCache::default();
        self.forward_single(depth, relpos, &mut cache)
    }

    /// As [`forward`](Self::forward), reusing `cache` buffers.
    pub fn forward_single(
        &self,
        depth: &DepthImage,
        relpos: &Vec3,
        cache: &mut ForwardCache,
    ) -> Result<QValues> {
        if !relpos.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "relative position {:?} is not finite",
                relpos.as_slice()
            )));
        }
        let q = forward_raw(&self.values, depth.pixels(), relpos.as_slice(), 1, cache)?;
        let mut out = [0.0; NUM_ACTIONS];
        out.copy_from_slice(q);
        Ok(out)
    }

    /// Batched forward pass; returns `batch × 18` Q-values.
    pub fn forward_batch<'c>(&self, input: &InputBatch, cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        forward_raw(&self.values, &input.depth, &input.relpos, input.len(), cache)
    }

    /// Accumulates into `grads` the gradient of `Σ q_grad · Q` for the batch
    /// last passed through [`forward_batch`](Self::forward_batch) with `cache`.
    pub fn backward_batch(&self, cache: &mut ForwardCache, q_grad: &[f64], grads: &mut [f64]) {
        backward_raw(&self.values, cache, q_grad, grads);
    }
}

/// Forward pass on raw parameter and input slices.
pub fn forward_raw<'c>(
    params: &[f64],
    depth: &[f64],
    relpos: &[f64],
    batch: usize,
    cache: &'c mut ForwardCache,
) -> Result<&'c [f64]> {
    let arch = architecture();
    if params.len() != arch.total {
        return Err(Error::Config(format!(
            "expected {} parameters, got {}",
            arch.total,
            params.len()
        )));
    }
    if depth.len() != batch * PIXELS || relpos.len() != batch * 3 {
        return Err(Error::InvalidInput(format!(
            "batch of {batch} needs {} depth and {} position values, got {} and {}",
            batch * PIXELS,
            batch * 3,
            depth.len(),
            relpos.len()
        )));
    }
    if let Some(v) = depth.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("depth value {v} outside [0, 1]")));
    }
    let w = |layer: usize| &params[arch.weight_range(layer)];
    let b = |layer: usize| &params[arch.bias_range(layer)];
    cache.batch = batch;
    let mut margin = f64::INFINITY;

    // Lane 1: depth image.
    for (i, layer) in [CONV1, CONV2, CONV3].into_iter().enumerate() {
        let g = arch.conv(layer);
        let (done, rest) = cache.conv_out.split_at_mut(i);
        let input = if i == 0 { depth } else { &done[i - 1] };
        let out = sized(&mut rest[0], batch * g.output_len());
        conv2d_forward(&g, batch, input, w(layer), b(layer), &mut cache.cols[i], out);
        relu_tracked(out, &mut margin);
    }
    let (n_in, n_out) = arch.dense(IMAGE_FC);
    let image = sized(&mut cache.image_features, batch * n_out);
    dense_forward(n_in, n_out, batch, &cache.conv_out[2], w(IMAGE_FC), b(IMAGE_FC), image);
    relu_tracked(image, &mut margin);

    // Lane 2: one sub-lane per position component.
    for (axis, layer) in [POS_X, POS_Y, POS_Z].into_iter().enumerate() {
        let pin = sized(&mut cache.pos_in[axis], batch);
        for (n, v) in pin.iter_mut().enumerate() {
            *v = relpos[n * 3 + axis];
        }
        let (n_in, n_out) = arch.dense(layer);
        let out = sized(&mut cache.pos_lanes[axis], batch * n_out);
        dense_forward(n_in, n_out, batch, &cache.pos_in[axis], w(layer), b(layer), out);
        relu_tracked(out, &mut margin);
    }
    let concat = sized(&mut cache.pos_concat, batch * POS_CONCAT);
    for n in 0..batch {
        let mut col = 0;
        for (lane, &width) in cache.pos_lanes.iter().zip(&POS_WIDTHS) {
            concat[n * POS_CONCAT + col..n * POS_CONCAT + col + width]
                .copy_from_slice(&lane[n * width..(n + 1) * width]);
            col += width;
        }
    }
    let (n_in, n_out) = arch.dense(POS_MERGE);
    let pos = sized(&mut cache.pos_features, batch * n_out);
    dense_forward(n_in, n_out, batch, &cache.pos_concat, w(POS_MERGE), b(POS_MERGE), pos);
    relu_tracked(pos, &mut margin);

    // Fusion head.
    let fused = sized(&mut cache.fused, batch * FUSED);
    for n in 0..batch {
        fused[n * FUSED..n * FUSED + IMAGE_FEATURES]
            .copy_from_slice(&cache.image_features[n * IMAGE_FEATURES..(n + 1) * IMAGE_FEATURES]);
        fused[n * FUSED + IMAGE_FEATURES..(n + 1) * FUSED]
            .copy_from_slice(&cache.pos_features[n * POS_FEATURES..(n + 1) * POS_FEATURES]);
    }
    let (n_in, n_out) = arch.dense(HEAD1);
    let h1 = sized(&mut cache.head1, batch * n_out);
    dense_forward(n_in, n_out, batch, &cache.fused, w(HEAD1), b(HEAD1), h1);
    relu_tracked(h1, &mut margin);
    let (n_in, n_out) = arch.dense(HEAD2);
    let h2 = sized(&mut cache.head2, batch * n_out);
    dense_forward(n_in, n_out, batch, &cache.head1, w(HEAD2), b(HEAD2), h2);
    relu_tracked(h2, &mut margin);
    let (n_in, n_out) = arch.dense(HEAD_OUT);
    let q = sized(&mut cache.q, batch * n_out);
    dense_forward(n_in, n_out, batch, &cache.head2, w(HEAD_OUT), b(HEAD_OUT), q);
    cache.kink_margin = margin;
    Ok(&cache.q[..batch * NUM_ACTIONS])
}

/// Backward pass matching the last [`forward_raw`] call on `cache`.
pub fn backward_raw(params: &[f64], cache: &mut ForwardCache, q_grad: &[f64], grads: &mut [f64]) {
    let arch = architecture();
    let batch = cache.batch;
    assert_eq!(q_grad.len(), batch * NUM_ACTIONS, "upstream gradient size");
    assert_eq!(grads.len(), arch.total, "gradient buffer size");
    let w = |layer: usize| &params[arch.weight_range(layer)];
    let c = cache;

    // Head.
    let (n_in, n_out) = arch.dense(HEAD_OUT);
    let (wg, bg) = arch.split_mut(grads, HEAD_OUT);
    let g_h2 = sized(&mut c.g_head2, batch * n_in);
    dense_backward(n_in, n_out, batch, &c.head2, w(HEAD_OUT), q_grad, wg, bg, Some(g_h2));
    relu_backward(&c.head2, g_h2);

    let (n_in, n_out) = arch.dense(HEAD2);
    let (wg, bg) = arch.split_mut(grads, HEAD2);
    let g_h1 = sized(&mut c.g_head1, batch * n_in);
    dense_backward(n_in, n_out, batch, &c.head1, w(HEAD2), &c.g_head2, wg, bg, Some(g_h1));
    relu_backward(&c.head1, g_h1);

    let (n_in, n_out) = arch.dense(HEAD1);
    let (wg, bg) = arch.split_mut(grads, HEAD1);
    let g_fused = sized(&mut c.g_fused, batch * n_in);
    dense_backward(n_in, n_out, batch, &c.fused, w(HEAD1), &c.g_head1, wg, bg, Some(g_fused));

    // Split the fused gradient back into the two lanes.
    let g_image = sized(&mut c.g_image, batch * IMAGE_FEATURES);
    let g_pos = sized(&mut c.g_pos_features, batch * POS_FEATURES);
    for n in 0..batch {
        let row = &c.g_fused[n * FUSED..(n + 1) * FUSED];
        g_image[n * IMAGE_FEATURES..(n + 1) * IMAGE_FEATURES]
            .copy_from_slice(&row[..IMAGE_FEATURES]);
        g_pos[n * POS_FEATURES..(n + 1) * POS_FEATURES].copy_from_slice(&row[IMAGE_FEATURES..]);
    }
    relu_backward(&c.image_features, g_image);
    relu_backward(&c.pos_features, g_pos);

    // Lane 2.
    let (n_in, n_out) = arch.dense(POS_MERGE);
    let (wg, bg) = arch.split_mut(grads, POS_MERGE);
    let g_concat = sized(&mut c.g_pos_concat, batch * n_in);
    dense_backward(
        n_in,
        n_out,
        batch,
        &c.pos_concat,
        w(POS_MERGE),
        &c.g_pos_features,
        wg,
        bg,
        Some(g_concat),
    );
    let mut col = 0;
    for (axis, layer) in [POS_X, POS_Y, POS_Z].into_iter().enumerate() {
        let width = POS_WIDTHS[axis];
        let g_lane = sized(&mut c.g_pos_lanes[axis], batch * width);
        for n in 0..batch {
            g_lane[n * width..(n + 1) * width].copy_from_slice(
                &c.g_pos_concat[n * POS_CONCAT + col..n * POS_CONCAT + col + width],
            );
        }
        relu_backward(&c.pos_lanes[axis], g_lane);
        let (n_in, n_out) = arch.dense(layer);
        let (wg, bg) = arch.split_mut(grads, layer);
        dense_backward(n_in, n_out, batch, &c.pos_in[axis], w(layer), g_lane, wg, bg, None);
        col += width;
    }

    // Lane 1.
    let (n_in, n_out) = arch.dense(IMAGE_FC);
    let (wg, bg) = arch.split_mut(grads, IMAGE_FC);
    let g3 = sized(&mut c.g_conv[2], batch * n_in);
    dense_backward(n_in, n_out, batch, &c.conv_out[2], w(IMAGE_FC), &c.g_image, wg, bg, Some(g3));
    relu_backward(&c.conv_out[2], g3);

    for (i, layer) in [CONV3, CONV2].into_iter().enumerate() {
        let idx = 2 - i;
        let g = arch.conv(layer);
        let (wg, bg) = arch.split_mut(grads, layer);
        let (lower, upper) = c.g_conv.split_at_mut(idx);
        let g_in = sized(&mut lower[idx - 1], batch * g.input_len());
        conv2d_backward(
            &g,
            batch,
            &c.cols[idx],
            w(layer),
            &upper[0],
            wg,
            bg,
            Some((g_in.as_mut_slice(), &mut c.dcols)),
        );
        relu_backward(&c.conv_out[idx - 1], g_in);
    }
    let g = arch.conv(CONV1);
    let (wg, bg) = arch.split_mut(grads, CONV1);
    conv2d_backward(&g, batch, &c.cols[0], w(CONV1), &c.g_conv[0], wg, bg, None);
}

/// Finite-difference check of every parameter's gradient for the scalar
/// `probe · Q(depth, relpos)`. Also returns the kink margin of the
/// unperturbed forward pass.
pub fn network_gradient_check(
    params: &[f64],
    depth: &[f64],
    relpos: &[f64],
    probe: &[f64],
    tolerance: f64,
) -> Result<(GradCheckReport, f64)> {
    if probe.len() != NUM_ACTIONS {
        return Err(Error::InvalidInput(format!(
            "probe needs {NUM_ACTIONS} weights, got {}",
            probe.len()
        )));
    }
    let mut cache = ForwardCache::default();
    forward_raw(params, depth, relpos, 1, &mut cache)?;
    let margin = cache.kink_margin();
    let mut analytic = vec![0.0; params.len()];
    backward_raw(params, &mut cache, probe, &mut analytic);
    let mut work = params.to_vec();
    let report = gradient_check(
        |p| {
            forward_raw(p, depth, relpos, 1, &mut cache)
                .map(|q| q.iter().zip(probe).map(|(a, b)| a * b).sum())
                .unwrap_or(f64::NAN)
        },
        &mut work,
        &analytic,
        tolerance,
    );
    Ok((report, margin))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy: a uniform action with probability `epsilon`, else the argmax.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// `reward` when terminal, else `reward + gamma · max(next_q)`.
pub fn td_target(reward: f64, next_q: &[f64], gamma: f64, terminal: bool) -> f64 {
    if terminal {
        reward
    } else {
        let best = next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        reward + gamma * best
    }
}

const MAGIC: &[u8; 11] = b"PRIMNAV-DQN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network parameters with optional optimizer state and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: QNetworkParams,
    pub adam: Option<AdamState>,
    pub metadata: Vec<(String, String)>,
}

/// Binary layout, little-endian throughout:
///
/// ```text
/// magic "PRIMNAV-DQN" | version u32 | fingerprint (u32 len, utf-8)
/// | metadata (u32 count, then u32-len key and value strings)
/// | param count u64 | params f64…
/// | adam flag u8 [| step u64 | lr, beta1, beta2, eps f64 | m f64… | v f64…]
/// ```
pub fn save_checkpoint(checkpoint: &Checkpoint) -> Vec<u8> {
    encode_checkpoint(&architecture().fingerprint(), checkpoint)
}

fn encode_checkpoint(fingerprint: &str, ck: &Checkpoint) -> Vec<u8> {
    fn put_str(out: &mut Vec<u8>, s: &str) {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + 8 * ck.params.len() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, fingerprint);
    out.extend_from_slice(&(ck.metadata.len() as u32).to_le_bytes());
    for (k, v) in &ck.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.extend_from_slice(&(ck.params.len() as u64).to_le_bytes());
    put_f64s(&mut out, ck.params.values());
    match &ck.adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step_count.to_le_bytes());
            put_f64s(&mut out, &[a.learning_rate, a.beta1, a.beta2, a.epsilon_hat]);
            put_f64s(&mut out, &a.first_moment);
            put_f64s(&mut out, &a.second_moment);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: wanted {n} bytes at offset {} of {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint("length overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not utf-8".into()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a PRIMNAV-DQN checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let fingerprint = r.string()?;
    let expected = architecture().fingerprint();
    if fingerprint != expected {
        return Err(Error::Checkpoint(format!(
            "architecture fingerprint mismatch: file has `{fingerprint}`, this build expects `{expected}`"
        )));
    }
    let n_meta = r.u32()? as usize;
    let mut metadata = Vec::new();
    for _ in 0..n_meta {
        let k = r.string()?;
        let v = r.string()?;
        metadata.push((k, v));
    }
    let n = r.u64()? as usize;
    if n != architecture().total {
        return Err(Error::Checkpoint(format!(
            "parameter count {n} does not match the architecture ({})",
            architecture().total
        )));
    }
    let params = QNetworkParams::from_values(r.f64s(n)?)?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step_count = r.u64()?;
            let h = r.f64s(4)?;
            let first_moment = r.f64s(n)?;
            let second_moment = r.f64s(n)?;
            Some(AdamState {
                first_moment,
                second_moment,
                step_count,
                learning_rate: h[0],
                beta1: h[1],
                beta2: h[2],
                epsilon_hat: h[3],
            })
        }
        other => {
            return Err(Error::Checkpoint(format!("bad optimizer flag {other}")));
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        adam,
        metadata,
    })
}

pub fn write_checkpoint(path: &std::path::Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, save_checkpoint(checkpoint))?;
    Ok(())
}

pub fn read_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    load_checkpoint(&std::fs::read(path)?)
}
