//! Small dense networks with hand-written backpropagation, a categorical
//! policy head, AdamW and a binary checkpoint format.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix
//! (row-major, `out x in`) followed by the bias vector.

use std::io::Write;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Same layout as [`Mlp`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients(vec![0.0; net.params.len()])
    }
    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

impl Mlp {
    /// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for
    /// weights and biases from a dedicated seeded stream.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, NeuralError> {
        if sizes.len() < 2 {
            return Err(NeuralError::TooFewLayers);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(dist.sample(&mut rng));
            }
        }
        Ok(Mlp { sizes: sizes.to_vec(), params })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, NeuralError> {
        if sizes.len() < 2 {
            return Err(NeuralError::TooFewLayers);
        }
        let expected = Self::param_count(sizes);
        if params.len() != expected {
            return Err(NeuralError::Shape { expected, got: params.len() });
        }
        Ok(Mlp { sizes: sizes.to_vec(), params })
    }

    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NeuralError> {
        if x.len() != self.input_dim() {
            return Err(NeuralError::Shape { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(x)?;
        let mut act = x.to_vec();
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut next = bias.to_vec();
            for (o, z) in next.iter_mut().enumerate() {
                let row = &weights[o * n_in..(o + 1) * n_in];
                *z += row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            }
            if l != last {
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            act = next;
            off += n_in * n_out + n_out;
        }
        Ok(act)
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NeuralError> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache, NeuralError> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.sizes.len() - 1);
        let mut pre = Vec::with_capacity(self.sizes.len() - 1);
        let mut act = x.to_vec();
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut z = bias.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &weights[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            }
            let next: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            inputs.push(act);
            pre.push(z);
            act = next;
            off += n_in * n_out + n_out;
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Accumulates dL/dparams into `grads` given dL/doutput.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: &[f64], grads: &mut Gradients) -> Result<(), NeuralError> {
        if upstream.len() != self.output_dim() {
            return Err(NeuralError::Shape { expected: self.output_dim(), got: upstream.len() });
        }
        if grads.0.len() != self.params.len() {
            return Err(NeuralError::Shape { expected: self.params.len(), got: grads.0.len() });
        }
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        // delta = dL/d(pre-activation) of the current layer.
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &cache.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grads.0[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grads.0[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[off..off + n_in * n_out];
            let prev_pre = &cache.pre[l - 1];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (i, w) in weights[o * n_in..(o + 1) * n_in].iter().enumerate() {
                    next[i] += d * w;
                }
            }
            for (i, v) in next.iter_mut().enumerate() {
                if prev_pre[i] <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = next;
        }
        Ok(())
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients, NeuralError> {
        let cache = self.forward_cached(x)?;
        let mut g = Gradients::zeros_like(self);
        self.backward_into(&cache, upstream, &mut g)?;
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Categorical policy head
// ---------------------------------------------------------------------------

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn log_prob(logits: &[f64], action: usize) -> f64 {
    log_softmax(logits)[action]
}

/// Inverse-CDF draw from a probability vector.
pub fn sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final partial sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, net: &Mlp) -> Self {
        let n = net.params.len();
        AdamW { config, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Decoupled decay `p *= 1 - lr*wd`, then the bias-corrected Adam step.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NeuralError> {
        if grads.0.len() != net.params.len() || self.m.len() != net.params.len() {
            return Err(NeuralError::Shape { expected: net.params.len(), got: grads.0.len() });
        }
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for i in 0..net.params.len() {
            let g = grads.0[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            net.params[i] = net.params[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    ReceivingActor,
    JunctionActor,
    JointCritic,
    ReceivingCritic,
    JunctionCritic,
}

impl NetRole {
    fn code(self) -> u8 {
        match self {
            NetRole::ReceivingActor => 0,
            NetRole::JunctionActor => 1,
            NetRole::JointCritic => 2,
            NetRole::ReceivingCritic => 3,
            NetRole::JunctionCritic => 4,
        }
    }
    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => NetRole::ReceivingActor,
            1 => NetRole::JunctionActor,
            2 => NetRole::JointCritic,
            3 => NetRole::ReceivingCritic,
            4 => NetRole::JunctionCritic,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("unknown role code {0}")]
    Role(u8),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// One network with the metadata needed to check it fits an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: NetRole,
    pub caps_fingerprint: u64,
    pub net: Mlp,
}

impl Checkpoint {
    /// Layout: magic, version u32, role u8, layer count u32, sizes u32[],
    /// caps fingerprint u64, parameter count u64, f64 parameters, SHA-256 of
    /// everything before it. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.net.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.role.code());
        out.extend_from_slice(&(self.net.sizes.len() as u32).to_le_bytes());
        for s in &self.net.sizes {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.caps_fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.net.params.len() as u64).to_le_bytes());
        for p in &self.net.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 + 32 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let role_code = r.take(1)?[0];
        let role = NetRole::from_code(role_code).ok_or(CheckpointError::Role(role_code))?;
        let n_sizes = r.u32()? as usize;
        let sizes = (0..n_sizes).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let caps_fingerprint = r.u64()?;
        let n_params = r.u64()? as usize;
        let params = (0..n_params)
            .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>, _>>()?;
        if r.pos != body.len() {
            return Err(CheckpointError::Truncated);
        }
        Ok(Checkpoint { role, caps_fingerprint, net: Mlp::from_params(&sizes, params)? })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_outputs_zero() {
        let sizes = [3, 4, 4, 2];
        let net = Mlp::from_params(&sizes, vec![0.0; Mlp::param_count(&sizes)]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_chain_passes_positive_input() {
        // 1-1-1-1 with unit weights and zero biases.
        let net = Mlp::from_params(&[1, 1, 1, 1], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(net.forward(&[-2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::new(&[3, 4, 2], 1).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(NeuralError::Shape { .. })));
        assert!(matches!(net.backward(&[1.0, 2.0, 3.0], &[1.0]), Err(NeuralError::Shape { .. })));
        assert!(matches!(Mlp::new(&[3], 1), Err(NeuralError::TooFewLayers)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new(&[5, 8, 8, 3], 9).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3, 0.4, 0.5], &[0.0; 3]).unwrap();
        assert!(g.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        // 1-1-1: hidden pre-activation is w*x + b = -1 for x = 1.
        let net = Mlp::from_params(&[1, 1, 1], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = net.backward(&[1.0], &[1.0]).unwrap();
        assert_eq!(g.0[0], 0.0);
        assert_eq!(g.0[1], 0.0);
        assert_eq!(g.0[2], 0.0); // output weight sees a zero hidden activation
        assert_eq!(g.0[3], 1.0);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
        assert!((log_prob(&[0.0, 0.0], 1) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut net = Mlp::new(&[2, 3, 1], 4).unwrap();
        let before = net.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &net);
        opt.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut net = Mlp::from_params(&[1, 1], vec![0.5, 0.0]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &net);
        opt.step(&mut net, &Gradients(vec![1.0, 0.0])).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((net.params()[0] - expected).abs() < 1e-15);
        assert_eq!(net.params()[1], 0.0);
    }

    #[test]
    fn adamw_decay_shrinks_multiplicatively() {
        let mut net = Mlp::from_params(&[1, 1], vec![2.0, -4.0]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.5, lr: 0.1, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &net);
        opt.step(&mut net, &Gradients(vec![0.0, 0.0])).unwrap();
        assert!((net.params()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!((net.params()[1] + 4.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Mlp::new(&[45, 64, 64, 20], 123).unwrap();
        let ck = Checkpoint { role: NetRole::ReceivingActor, caps_fingerprint: 77, net };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let net = Mlp::new(&[3, 2], 1).unwrap();
        let mut bytes = Checkpoint { role: NetRole::JointCritic, caps_fingerprint: 0, net }.to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(b"nope and some more bytes to pass the length check...."), Err(CheckpointError::BadMagic)));
    }
}
