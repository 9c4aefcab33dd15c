//! Policy and value networks: one strided convolution with ReLU, one dense
//! layer with tanh, one linear head. Gradients are hand-derived.
//!
//! Parameters are stored in a single flat vector per network, laid out as
//! `conv_w [oc][ic][ky][kx]`, `conv_b [oc]`, `hidden_w [h][flat]`,
//! `hidden_b [h]`, `out_w [o][h]`, `out_b [o]`, where `flat` indexes the
//! convolution output as `[oc][oy][ox]`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::env::Action;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const INIT_STD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint architecture {found:?} does not match expected {expected:?}")]
    Fingerprint { expected: Arch, found: Arch },
}

/// Layer sizes. Everything the checkpoint fingerprint records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Arch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl Arch {
    /// 3 -> 8 channels, 8x8 kernel at stride 4, 64 hidden units.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self {
            in_channels: 3,
            height,
            width,
            conv_channels: 8,
            kernel: 8,
            stride: 4,
            hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.kernel == 0 || self.stride == 0 || self.kernel > self.height || self.kernel > self.width {
            return Err(NetError::Shape(format!(
                "kernel {} does not fit a {}x{} input",
                self.kernel, self.width, self.height
            )));
        }
        if self.in_channels == 0 || self.conv_channels == 0 || self.hidden == 0 {
            return Err(NetError::Shape("zero-sized layer".into()));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn flat_len(&self) -> usize {
        self.conv_channels * self.positions()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    conv_w: usize,
    conv_b: usize,
    hid_w: usize,
    hid_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &Arch, outputs: usize) -> Self {
        let conv_w = 0;
        let conv_b = conv_w + arch.conv_channels * arch.patch_len();
        let hid_w = conv_b + arch.conv_channels;
        let hid_b = hid_w + arch.hidden * arch.flat_len();
        let out_w = hid_b + arch.hidden;
        let out_b = out_w + outputs * arch.hidden;
        let total = out_b + outputs;
        Self { conv_w, conv_b, hid_w, hid_b, out_w, out_b, total }
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    arch: Arch,
    outputs: usize,
    /// im2col patches, `[position][patch]`.
    patches: Vec<f64>,
    /// Post-ReLU convolution output, `[oc][position]`.
    conv: Vec<f64>,
    /// Post-tanh hidden activations.
    hidden: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Arch,
    outputs: usize,
    layout: Layout,
    pub params: Vec<f64>,
}

impl Network {
    pub fn zeros(arch: Arch, outputs: usize) -> Result<Self, NetError> {
        arch.validate()?;
        let layout = Layout::new(&arch, outputs);
        Ok(Self {
            arch,
            outputs,
            layout,
            params: vec![0.0; layout.total],
        })
    }

    /// Orthogonal weights (gain sqrt 2 on ReLU/tanh layers, `out_gain` on the
    /// head), zero biases, every value representable in f32.
    pub fn init<R: Rng + ?Sized>(arch: Arch, outputs: usize, out_gain: f64, rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(arch, outputs)?;
        let l = net.layout;
        let g = 2f64.sqrt();
        let conv = orthogonal(arch.conv_channels, arch.patch_len(), g, rng);
        net.params[l.conv_w..l.conv_b].copy_from_slice(&conv);
        let hid = orthogonal(arch.hidden, arch.flat_len(), g, rng);
        net.params[l.hid_w..l.hid_b].copy_from_slice(&hid);
        let out = orthogonal(outputs, arch.hidden, out_gain, rng);
        net.params[l.out_w..l.out_b].copy_from_slice(&out);
        net.round_to_f32();
        Ok(net)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NetError> {
        if input.len() != self.arch.input_len() {
            return Err(NetError::Shape(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.arch.input_len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.forward_cached(input).map(|c| c.output)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache, NetError> {
        self.check_input(input)?;
        let a = &self.arch;
        let l = &self.layout;
        let p = &self.params;
        let (oh, ow, k, s) = (a.out_h(), a.out_w(), a.kernel, a.stride);
        let plen = a.patch_len();
        let npos = a.positions();

        let mut patches = vec![0.0; npos * plen];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut patches[(oy * ow + ox) * plen..][..plen];
                let mut q = 0;
                for ic in 0..a.in_channels {
                    for ky in 0..k {
                        let row = ic * a.height * a.width + (oy * s + ky) * a.width + ox * s;
                        dst[q..q + k].copy_from_slice(&input[row..row + k]);
                        q += k;
                    }
                }
            }
        }

        let mut conv = vec![0.0; a.conv_channels * npos];
        for oc in 0..a.conv_channels {
            let w = &p[l.conv_w + oc * plen..][..plen];
            let b = p[l.conv_b + oc];
            for pos in 0..npos {
                let z = b + dot(w, &patches[pos * plen..][..plen]);
                conv[oc * npos + pos] = z.max(0.0);
            }
        }

        let flat = a.flat_len();
        let mut hidden = vec![0.0; a.hidden];
        for (h, out) in hidden.iter_mut().enumerate() {
            let w = &p[l.hid_w + h * flat..][..flat];
            *out = (p[l.hid_b + h] + dot(w, &conv)).tanh();
        }

        let mut output = vec![0.0; self.outputs];
        for (o, out) in output.iter_mut().enumerate() {
            let w = &p[l.out_w + o * a.hidden..][..a.hidden];
            *out = p[l.out_b + o] + dot(w, &hidden);
        }

        Ok(ForwardCache {
            arch: *a,
            outputs: self.outputs,
            patches,
            conv,
            hidden,
            output,
        })
    }

    /// Accumulate `d(upstream . output)/d(params)` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grads: &mut [f64]) -> Result<(), NetError> {
        if cache.arch != self.arch || cache.outputs != self.outputs {
            return Err(NetError::Shape("forward cache belongs to a different network".into()));
        }
        if upstream.len() != self.outputs {
            return Err(NetError::Shape(format!(
                "upstream gradient has {} values, network has {} outputs",
                upstream.len(),
                self.outputs
            )));
        }
        if grads.len() != self.params.len() {
            return Err(NetError::Shape("gradient buffer has the wrong length".into()));
        }
        let a = &self.arch;
        let l = &self.layout;
        let p = &self.params;
        let flat = a.flat_len();
        let plen = a.patch_len();
        let npos = a.positions();

        // Output layer.
        let mut d_hidden = vec![0.0; a.hidden];
        for (o, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[l.out_b + o] += g;
            axpy(g, &cache.hidden, &mut grads[l.out_w + o * a.hidden..][..a.hidden]);
            axpy(g, &p[l.out_w + o * a.hidden..][..a.hidden], &mut d_hidden);
        }

        // tanh, then the dense layer.
        let mut d_conv = vec![0.0; flat];
        for h in 0..a.hidden {
            let t = cache.hidden[h];
            let g = d_hidden[h] * (1.0 - t * t);
            if g == 0.0 {
                continue;
            }
            grads[l.hid_b + h] += g;
            axpy(g, &cache.conv, &mut grads[l.hid_w + h * flat..][..flat]);
            axpy(g, &p[l.hid_w + h * flat..][..flat], &mut d_conv);
        }

        // ReLU, then convolution weights. The input gradient is not needed.
        for oc in 0..a.conv_channels {
            let mut db = 0.0;
            let gw = &mut grads[l.conv_w + oc * plen..][..plen];
            for pos in 0..npos {
                let idx = oc * npos + pos;
                if cache.conv[idx] <= 0.0 {
                    continue;
                }
                let g = d_conv[idx];
                db += g;
                axpy(g, &cache.patches[pos * plen..][..plen], gw);
            }
            grads[l.conv_b + oc] += db;
        }
        Ok(())
    }

    /// Convolution output before ReLU, `[oc][oy][ox]`.
    pub fn conv_preactivation(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(input)?;
        let a = &self.arch;
        let l = &self.layout;
        let (oh, ow, k, s) = (a.out_h(), a.out_w(), a.kernel, a.stride);
        let mut out = vec![0.0; a.conv_channels * oh * ow];
        for oc in 0..a.conv_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut z = self.params[l.conv_b + oc];
                    for ic in 0..a.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let w = self.params[l.conv_w + ((oc * a.in_channels + ic) * k + ky) * k + kx];
                                z += w * input[ic * a.height * a.width + (oy * s + ky) * a.width + ox * s + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = z;
                }
            }
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let (x, y) = (&a[c * 4..c * 4 + 4], &b[c * 4..c * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `rows x cols` matrix with orthonormal rows (or columns, when taller than
/// wide), scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let d = dot(&v, u);
            axpy(-d, u, &mut v);
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        vecs.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}

/// Diagonal Gaussian over the two acceleration components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianActionDist {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl GaussianActionDist {
    pub fn log_std(&self) -> [f64; 2] {
        [self.std[0].ln(), self.std[1].ln()]
    }

    pub fn log_prob(&self, a: [f64; 2]) -> f64 {
        (0..2)
            .map(|i| {
                let z = (a[i] - self.mean[i]) / self.std[i];
                -0.5 * z * z - self.std[i].ln() - 0.5 * (2.0 * PI).ln()
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        (0..2)
            .map(|i| self.std[i].ln() + 0.5 * (2.0 * PI * std::f64::consts::E).ln())
            .sum()
    }

    /// Draw an unclamped action and its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Action, f64) {
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        let a = [self.mean[0] + self.std[0] * z0, self.mean[1] + self.std[1] * z1];
        (Action::new(a[0], a[1]), self.log_prob(a))
    }

    pub fn mode(&self) -> Action {
        Action::new(self.mean[0], self.mean[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub net: Network,
    pub log_std: [f64; 2],
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self, NetError> {
        Ok(Self {
            net: Network::init(arch, 2, 0.01, rng)?,
            log_std: [(INIT_STD.ln()) as f32 as f64; 2],
        })
    }

    pub fn zeros(arch: Arch) -> Result<Self, NetError> {
        Ok(Self {
            net: Network::zeros(arch, 2)?,
            log_std: [INIT_STD.ln(); 2],
        })
    }

    pub fn dist_from_output(&self, mean: &[f64]) -> GaussianActionDist {
        GaussianActionDist {
            mean: [mean[0], mean[1]],
            std: [self.log_std[0].exp(), self.log_std[1].exp()],
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<GaussianActionDist, NetError> {
        let out = self.net.forward(input)?;
        Ok(self.dist_from_output(&out))
    }

    pub fn clamp_log_std(&mut self) {
        for s in &mut self.log_std {
            *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    pub net: Network,
}

impl ValueParams {
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self, NetError> {
        Ok(Self {
            net: Network::init(arch, 1, 1.0, rng)?,
        })
    }

    pub fn zeros(arch: Arch) -> Result<Self, NetError> {
        Ok(Self {
            net: Network::zeros(arch, 1)?,
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64, NetError> {
        Ok(self.net.forward(input)?[0])
    }
}

/// Everything needed to act and to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCheckpoint {
    pub policy: PolicyParams,
    pub value: ValueParams,
    /// Optic-flow magnitude mapped to 1.0 in the network input.
    pub obs_scale: f64,
}

const MAGIC: &[u8; 4] = b"OFAG";
const VERSION: u32 = 1;

impl AgentCheckpoint {
    pub fn arch(&self) -> &Arch {
        self.policy.net.arch()
    }

    fn param_count(&self) -> usize {
        self.policy.net.len() + 2 + self.value.net.len()
    }

    /// Little-endian layout: magic `OFAG`, version u32, fingerprint as eight
    /// u32 (in_channels, height, width, conv_channels, kernel, stride,
    /// hidden, parameter count), obs_scale f32, then every parameter as f32:
    /// policy network, policy log_std (2), value network.
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.arch();
        let n = self.param_count();
        let mut out = Vec::with_capacity(4 + 4 * (10 + n));
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION as usize,
            a.in_channels,
            a.height,
            a.width,
            a.conv_channels,
            a.kernel,
            a.stride,
            a.hidden,
            n,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.obs_scale as f32).to_le_bytes());
        let params = self
            .policy
            .net
            .params
            .iter()
            .chain(self.policy.log_std.iter())
            .chain(self.value.net.params.iter());
        for p in params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let corrupt = |m: &str| NetError::Corrupt(m.to_string());
        if bytes.len() < 4 + 4 * 10 {
            return Err(corrupt("file too short for header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(NetError::Corrupt(format!("unsupported version {}", word(0))));
        }
        let arch = Arch {
            in_channels: word(1) as usize,
            height: word(2) as usize,
            width: word(3) as usize,
            conv_channels: word(4) as usize,
            kernel: word(5) as usize,
            stride: word(6) as usize,
            hidden: word(7) as usize,
        };
        arch.validate().map_err(|e| NetError::Corrupt(e.to_string()))?;
        let n = word(8) as usize;
        let obs_scale = f32::from_le_bytes(bytes[40..44].try_into().unwrap()) as f64;
        let body = &bytes[44..];
        if body.len() != 4 * n {
            return Err(NetError::Corrupt(format!(
                "expected {} parameter bytes, found {}",
                4 * n,
                body.len()
            )));
        }
        let mut policy = PolicyParams::zeros(arch)?;
        let mut value = ValueParams::zeros(arch)?;
        if policy.net.len() + 2 + value.net.len() != n {
            return Err(corrupt("parameter count disagrees with the architecture"));
        }
        let mut vals = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for p in policy.net.params.iter_mut() {
            *p = vals.next().unwrap();
        }
        policy.log_std = [vals.next().unwrap(), vals.next().unwrap()];
        for p in value.net.params.iter_mut() {
            *p = vals.next().unwrap();
        }
        let ck = Self { policy, value, obs_scale };
        let finite = ck.policy.net.params.iter().chain(&ck.policy.log_std).chain(&ck.value.net.params).all(|p| p.is_finite());
        if !finite || !obs_scale.is_finite() {
            return Err(corrupt("non-finite parameter"));
        }
        Ok(ck)
    }

    /// Deserialize and require a specific architecture.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &Arch) -> Result<Self, NetError> {
        let ck = Self::from_bytes(bytes)?;
        if ck.arch() != expected {
            return Err(NetError::Fingerprint {
                expected: *expected,
                found: *ck.arch(),
            });
        }
        Ok(ck)
    }
}
