//! The `1/sqrt(m)`-scaled feedforward critic and its projected semi-gradient
//! TD inner loop.
//!
//! The network is
//!
//! ```text
//! x^(0) = phi,   x^(l) = sigma(W_l x^(l-1)) / sqrt(m),   Q = b . x^(L) / sqrt(m)
//! ```
//!
//! with `W_1: m x n`, `W_2..W_L: m x m` and a fixed `+-1` head `b`. The
//! trainable vector `zeta` stacks `Vec(W_1), ..., Vec(W_L)` column by column,
//! so entry `(i, j)` of layer `l` lives at `offset(l) + j * m + i`.

use std::cell::OnceCell;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmdp::{CmdpModel, PolicyParams, Signal, Transition};
use crate::oracle::CriticLinearization;
use crate::rng::Rng;
use crate::sampler::{MlmcBatch, TrajectoryCursor};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PDNACNET";
const CHECKPOINT_VERSION: u8 = 1;

/// Anchor gradients are cached per state-action pair unless that would take
/// more than this many floats.
const ANCHOR_CACHE_LIMIT: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Elu,
    /// Tanh approximation `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Identity,
        Activation::Sigmoid,
        Activation::Elu,
        Activation::Gelu,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Sigmoid => 1,
            Activation::Elu => 2,
            Activation::Gelu => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {tag}")))
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Elu => "elu",
            Activation::Gelu => "gelu",
        };
        f.write_str(name)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown activation `{s}`")))
    }
}

/// Network shape, fixed head and the initial weights `zeta_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    depth: usize,
    width: usize,
    input_dim: usize,
    activation: Activation,
    head: Vec<f64>,
    init: Arc<Vec<f64>>,
}

/// Cached activations of one forward pass.
struct Pass {
    /// `x^(0) .. x^(L)`
    xs: Vec<Vec<f64>>,
    /// pre-activations `W_l x^(l-1)`, `l = 1..L`
    hs: Vec<Vec<f64>>,
    q: f64,
}

/// Draws `W_l` entries from `N(0, 1)` and head entries uniformly from `{-1, +1}`.
pub fn init_network(
    depth: usize,
    width: usize,
    input_dim: usize,
    activation: Activation,
    rng: &mut Rng,
) -> Result<CriticNet> {
    if depth == 0 || width == 0 || input_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "network needs L, m, n >= 1 (got L={depth}, m={width}, n={input_dim})"
        )));
    }
    let p = param_count(depth, width, input_dim);
    let weights: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let head = (0..width)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Ok(CriticNet {
        depth,
        width,
        input_dim,
        activation,
        head,
        init: Arc::new(weights),
    })
}

/// `m (n + (L - 1) m)`
pub fn param_count(depth: usize, width: usize, input_dim: usize) -> usize {
    width * (input_dim + (depth - 1) * width)
}

impl CriticNet {
    /// Builds a network from explicit parts, mainly for hand-checked examples.
    pub fn from_parts(
        depth: usize,
        width: usize,
        input_dim: usize,
        activation: Activation,
        head: Vec<f64>,
        init: Vec<f64>,
    ) -> Result<Self> {
        if depth == 0 || width == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument("network needs L, m, n >= 1".into()));
        }
        if head.len() != width {
            return Err(Error::Dimension {
                what: "head vector",
                expected: width,
                got: head.len(),
            });
        }
        if let Some(b) = head.iter().find(|b| **b != 1.0 && **b != -1.0) {
            return Err(Error::Invariant(format!("head entries must be +-1, found {b}")));
        }
        let p = param_count(depth, width, input_dim);
        if init.len() != p {
            return Err(Error::Dimension {
                what: "flattened weights",
                expected: p,
                got: init.len(),
            });
        }
        Ok(Self {
            depth,
            width,
            input_dim,
            activation,
            head,
            init: Arc::new(init),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    pub fn n_params(&self) -> usize {
        self.init.len()
    }

    /// `zeta_0`
    pub fn init_snapshot(&self) -> &[f64] {
        &self.init
    }

    pub(crate) fn init_arc(&self) -> &Arc<Vec<f64>> {
        &self.init
    }

    fn layer_offset(&self, l: usize) -> usize {
        if l == 0 {
            0
        } else {
            self.width * self.input_dim + (l - 1) * self.width * self.width
        }
    }

    fn layer_cols(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.width
        }
    }

    fn check_dims(&self, zeta: &[f64], phi: &[f64]) -> Result<()> {
        if zeta.len() != self.n_params() {
            return Err(Error::Dimension {
                what: "critic parameters",
                expected: self.n_params(),
                got: zeta.len(),
            });
        }
        if phi.len() != self.input_dim {
            return Err(Error::Dimension {
                what: "critic input",
                expected: self.input_dim,
                got: phi.len(),
            });
        }
        Ok(())
    }

    fn pass(&self, zeta: &[f64], phi: &[f64], keep: bool) -> Pass {
        let m = self.width;
        let scale = 1.0 / (m as f64).sqrt();
        let mut xs = Vec::with_capacity(if keep { self.depth + 1 } else { 0 });
        let mut hs = Vec::with_capacity(if keep { self.depth } else { 0 });
        let mut x = phi.to_vec();
        for l in 0..self.depth {
            let off = self.layer_offset(l);
            let mut h = vec![0.0; m];
            for (j, &xj) in x.iter().enumerate() {
                if xj == 0.0 {
                    continue;
                }
                let col = &zeta[off + j * m..off + (j + 1) * m];
                for (hi, w) in h.iter_mut().zip(col) {
                    *hi += w * xj;
                }
            }
            let next: Vec<f64> = h.iter().map(|&v| self.activation.apply(v) * scale).collect();
            if keep {
                xs.push(x);
                hs.push(h);
            }
            x = next;
        }
        let q = scale * self.head.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>();
        if keep {
            xs.push(x);
        }
        Pass { xs, hs, q }
    }

    /// `Q(phi; zeta)`
    pub fn forward(&self, zeta: &[f64], phi: &[f64]) -> Result<f64> {
        self.check_dims(zeta, phi)?;
        Ok(self.pass(zeta, phi, false).q)
    }

    /// `grad_zeta Q(phi; zeta)` by reverse mode, in the flattened layout.
    pub fn grad_params(&self, zeta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(zeta, phi)?;
        Ok(self.value_and_grad(zeta, phi).1)
    }

    pub(crate) fn value_and_grad(&self, zeta: &[f64], phi: &[f64]) -> (f64, Vec<f64>) {
        let m = self.width;
        let scale = 1.0 / (m as f64).sqrt();
        let pass = self.pass(zeta, phi, true);
        let mut grad = vec![0.0; self.n_params()];
        // dQ/dx^(L)
        let mut gx: Vec<f64> = self.head.iter().map(|b| b * scale).collect();
        for l in (0..self.depth).rev() {
            let h = &pass.hs[l];
            let x_prev = &pass.xs[l];
            let gh: Vec<f64> = gx
                .iter()
                .zip(h)
                .map(|(g, &hv)| g * self.activation.derivative(hv) * scale)
                .collect();
            let off = self.layer_offset(l);
            let cols = self.layer_cols(l);
            for (j, &xj) in x_prev.iter().enumerate() {
                if xj == 0.0 {
                    continue;
                }
                let block = &mut grad[off + j * m..off + (j + 1) * m];
                for (gw, g) in block.iter_mut().zip(&gh) {
                    *gw = g * xj;
                }
            }
            if l > 0 {
                gx = (0..cols)
                    .map(|j| {
                        zeta[off + j * m..off + (j + 1) * m]
                            .iter()
                            .zip(&gh)
                            .map(|(w, g)| w * g)
                            .sum()
                    })
                    .collect();
            }
        }
        (pass.q, grad)
    }

    /// Writes the header `(L, m, n, activation)`, the head and `zeta_0` as
    /// little-endian binary. Round trips are bit-exact.
    pub fn save_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION, self.activation.tag()])?;
        for v in [self.depth, self.width, self.input_dim] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.head.iter().chain(self.init.iter()) {
            out.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut tags = [0u8; 2];
        input
            .read_exact(&mut tags)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        if tags[0] != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", tags[0])));
        }
        let activation = Activation::from_tag(tags[1])?;
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut buf = [0u8; 8];
            input
                .read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
            *d = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
        }
        let [depth, width, input_dim] = dims;
        if depth == 0 || width == 0 || input_dim == 0 || depth > 64 || width > 1 << 20 {
            return Err(Error::Checkpoint(format!(
                "implausible shape L={depth}, m={width}, n={input_dim}"
            )));
        }
        let mut read_floats = |count: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; count * 8];
            input
                .read_exact(&mut bytes)
                .map_err(|e| Error::Checkpoint(format!("truncated body: {e}")))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect())
        };
        let head = read_floats(width)?;
        let init = read_floats(param_count(depth, width, input_dim))?;
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after weights".into()));
        }
        Self::from_parts(depth, width, input_dim, activation, head, init)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    OneHot,
    RandomProjection,
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-hot" => Ok(FeatureMode::OneHot),
            "random-projection" => Ok(FeatureMode::RandomProjection),
            other => Err(Error::Parse(format!("unknown feature mode `{other}`"))),
        }
    }
}

/// Fixed critic inputs `phi(s, a)` with `||phi|| <= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    mode: FeatureMode,
    dim: usize,
    n_actions: usize,
    table: Vec<Vec<f64>>,
}

/// One-hot: `phi(s, a) = e_{s A + a}` (zero-padded when `n > S A`).
/// Random projection: Gaussian vectors scaled so the longest has unit norm.
pub fn build_feature_map(
    n_states: usize,
    n_actions: usize,
    mode: FeatureMode,
    n: usize,
    rng: &mut Rng,
) -> Result<FeatureMap> {
    let pairs = n_states * n_actions;
    if pairs == 0 || n == 0 {
        return Err(Error::InvalidArgument("feature map needs S, A, n >= 1".into()));
    }
    let table = match mode {
        FeatureMode::OneHot => {
            if n < pairs {
                return Err(Error::InvalidArgument(format!(
                    "one-hot features need n >= S*A = {pairs}, got {n}"
                )));
            }
            (0..pairs)
                .map(|k| {
                    let mut v = vec![0.0; n];
                    v[k] = 1.0;
                    v
                })
                .collect()
        }
        FeatureMode::RandomProjection => {
            let mut raw: Vec<Vec<f64>> = (0..pairs)
                .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let max_norm = raw
                .iter()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            if max_norm > 0.0 {
                for v in raw.iter_mut() {
                    for x in v.iter_mut() {
                        *x /= max_norm;
                    }
                }
            }
            raw
        }
    };
    Ok(FeatureMap {
        mode,
        dim: n,
        n_actions,
        table,
    })
}

impl FeatureMap {
    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pairs(&self) -> usize {
        self.table.len()
    }

    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        &self.table[self.pair_index(s, a)]
    }

    fn phi_pair(&self, k: usize) -> &[f64] {
        &self.table[k]
    }
}

/// `xi = [eta, zeta]` together with the ball it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub eta: f64,
    pub zeta: Vec<f64>,
    radius: f64,
    anchor: Arc<Vec<f64>>,
}

impl CriticParams {
    /// `[0, zeta_0]`
    pub fn initial(net: &CriticNet, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
        }
        Ok(Self {
            eta: 0.0,
            zeta: net.init_snapshot().to_vec(),
            radius,
            anchor: net.init_arc().clone(),
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    /// `||zeta - zeta_0||`
    pub fn distance_from_anchor(&self) -> f64 {
        self.zeta
            .iter()
            .zip(self.anchor.iter())
            .map(|(z, a)| (z - a) * (z - a))
            .sum::<f64>()
            .sqrt()
    }

    /// Radial projection of `zeta` onto the ball of radius `R` around
    /// `zeta_0`. `eta` is never touched.
    pub fn project_ball(mut self) -> Self {
        self.project_in_place();
        self
    }

    pub(crate) fn project_in_place(&mut self) {
        let dist = self.distance_from_anchor();
        if dist <= self.radius {
            return;
        }
        let shrink = self.radius / dist;
        for (z, a) in self.zeta.iter_mut().zip(self.anchor.iter()) {
            *z = a + shrink * (*z - a);
        }
    }
}

/// `c_gamma (eta - g)`, the eta coordinate of the semi-gradient.
pub fn eta_gradient(eta: f64, g_val: f64, c_gamma: f64) -> f64 {
    c_gamma * (eta - g_val)
}

/// `delta = Q(s,a) + eta - g - Q(s',a')`
pub fn td_residual(q_sa: f64, q_next: f64, eta: f64, g_val: f64) -> f64 {
    q_sa + eta - g_val - q_next
}

/// Single-transition semi-gradient `[c_gamma (eta - g), delta grad Q(phi(s,a); zeta_0)]`.
/// Values use the current `zeta`, the gradient is anchored at `zeta_0`.
pub fn critic_semi_gradient(
    net: &CriticNet,
    features: &FeatureMap,
    params: &CriticParams,
    z: &Transition,
    g: Signal,
    c_gamma: f64,
) -> Result<Vec<f64>> {
    let a_next = z.next_action()?;
    let phi = features.phi(z.s, z.a);
    let q_sa = net.forward(&params.zeta, phi)?;
    let q_next = net.forward(&params.zeta, features.phi(z.s_next, a_next))?;
    let g_val = z.signal(g);
    let delta = td_residual(q_sa, q_next, params.eta, g_val);
    let psi = net.grad_params(net.init_snapshot(), phi)?;
    let mut out = Vec::with_capacity(1 + psi.len());
    out.push(eta_gradient(params.eta, g_val, c_gamma));
    out.extend(psi.into_iter().map(|v| delta * v));
    Ok(out)
}

/// A critic network together with its feature map and lazily cached
/// init-anchored gradients per state-action pair.
#[derive(Debug)]
pub struct NeuralCritic {
    net: CriticNet,
    features: FeatureMap,
    anchor: Vec<OnceCell<(f64, Vec<f64>)>>,
    cache: bool,
}

impl NeuralCritic {
    pub fn new(net: CriticNet, features: FeatureMap) -> Result<Self> {
        if net.input_dim() != features.dim() {
            return Err(Error::Dimension {
                what: "feature dimension",
                expected: net.input_dim(),
                got: features.dim(),
            });
        }
        let pairs = features.n_pairs();
        let cache = pairs.saturating_mul(net.n_params()) <= ANCHOR_CACHE_LIMIT;
        Ok(Self {
            anchor: (0..pairs).map(|_| OnceCell::new()).collect(),
            net,
            features,
            cache,
        })
    }

    pub fn net(&self) -> &CriticNet {
        &self.net
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn value(&self, params: &CriticParams, s: usize, a: usize) -> f64 {
        self.net.pass(&params.zeta, self.features.phi(s, a), false).q
    }

    /// `Q(phi(s,a); zeta)` for every pair, indexed `s * A + a`.
    pub fn value_table(&self, zeta: &[f64]) -> Vec<f64> {
        (0..self.features.n_pairs())
            .map(|k| self.net.pass(zeta, self.features.phi_pair(k), false).q)
            .collect()
    }

    fn with_anchor<T>(&self, k: usize, f: impl FnOnce(f64, &[f64]) -> T) -> T {
        if self.cache {
            let (q, g) = self.anchor[k]
                .get_or_init(|| self.net.value_and_grad(self.net.init_snapshot(), self.features.phi_pair(k)));
            f(*q, g)
        } else {
            let (q, g) = self.net.value_and_grad(self.net.init_snapshot(), self.features.phi_pair(k));
            f(q, &g)
        }
    }

    /// Gradients and values at `zeta_0` for every pair, in the layout the
    /// oracle's linearized system expects.
    pub fn linearization(&self) -> CriticLinearization {
        let n = self.features.n_pairs();
        let mut grads = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for k in 0..n {
            self.with_anchor(k, |q, g| {
                values.push(q);
                grads.push(g.to_vec());
            });
        }
        CriticLinearization { grads, values }
    }

    /// `E_nu[(Q(phi; zeta) - Q_g^pi)^2]` against a reference Q table.
    pub fn weighted_mse(&self, zeta: &[f64], nu: &[Vec<f64>], q_ref: &[Vec<f64>]) -> f64 {
        let values = self.value_table(zeta);
        let na = q_ref.first().map_or(0, Vec::len);
        let mut total = 0.0;
        for (s, row) in nu.iter().enumerate() {
            for (a, w) in row.iter().enumerate() {
                let e = values[s * na + a] - q_ref[s][a];
                total += w * e * e;
            }
        }
        total
    }
}

/// Inner-loop knobs shared by every signal in one call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticSchedule {
    pub iterations: usize,
    pub gamma_xi: f64,
    pub c_gamma: f64,
    pub t_max: u64,
}

/// One signal's critic inside a shared-rollout inner loop.
pub struct CriticTask<'a> {
    pub critic: &'a NeuralCritic,
    pub signal: Signal,
    pub params: CriticParams,
}

/// Runs `H` projected MLMC semi-gradient steps for each task, all tasks
/// consuming the same rollouts from `cursor`.
///
/// Per step the MLMC combination is linear, so the update is assembled as
/// `sum_t w_t delta_t psi(s_t, a_t)` with the per-transition weights of
/// [`MlmcBatch::weights`] and one cached gradient per distinct pair.
pub fn critic_inner_loop_shared(
    tasks: &mut [CriticTask<'_>],
    model: &CmdpModel,
    policy: &PolicyParams,
    schedule: &CriticSchedule,
    cursor: &mut TrajectoryCursor,
) -> Result<()> {
    let table = policy.table();
    for task in tasks.iter() {
        if task.critic.features().n_pairs() != model.n_pairs() {
            return Err(Error::Dimension {
                what: "feature map pairs",
                expected: model.n_pairs(),
                got: task.critic.features().n_pairs(),
            });
        }
        if task.params.zeta.len() != task.critic.net().n_params() {
            return Err(Error::Dimension {
                what: "critic parameters",
                expected: task.critic.net().n_params(),
                got: task.params.zeta.len(),
            });
        }
    }
    for _ in 0..schedule.iterations {
        let batch = MlmcBatch::draw_with_table(cursor, model, &table, schedule.t_max);
        for task in tasks.iter_mut() {
            critic_step(task, &batch, schedule)?;
        }
    }
    Ok(())
}

fn critic_step(task: &mut CriticTask<'_>, batch: &MlmcBatch, schedule: &CriticSchedule) -> Result<()> {
    let critic = task.critic;
    let n_pairs = critic.features().n_pairs();
    let params = &mut task.params;
    let weights = batch.weights();
    let mut values = vec![f64::NAN; n_pairs];
    let mut value_of = |k: usize, zeta: &[f64]| -> f64 {
        if values[k].is_nan() {
            values[k] = critic.net.pass(zeta, critic.features.phi_pair(k), false).q;
        }
        values[k]
    };
    let mut coef = vec![0.0; n_pairs];
    let mut seen = vec![false; n_pairs];
    let mut touched = Vec::new();
    let mut g_bar = 0.0;
    for (w, z) in weights.iter().zip(&batch.transitions) {
        let a_next = z.next_action()?;
        let k = critic.features.pair_index(z.s, z.a);
        let k_next = critic.features.pair_index(z.s_next, a_next);
        let g_val = z.signal(task.signal);
        g_bar += w * g_val;
        if *w == 0.0 {
            continue;
        }
        let delta = td_residual(value_of(k, &params.zeta), value_of(k_next, &params.zeta), params.eta, g_val);
        if !seen[k] {
            seen[k] = true;
            touched.push(k);
        }
        coef[k] += w * delta;
    }
    let step = schedule.gamma_xi;
    params.eta -= step * eta_gradient(params.eta, g_bar, schedule.c_gamma);
    for k in touched {
        let c = step * coef[k];
        if c == 0.0 {
            continue;
        }
        critic.with_anchor(k, |_, psi| {
            for (z, g) in params.zeta.iter_mut().zip(psi) {
                *z -= c * g;
            }
        });
    }
    params.project_in_place();
    Ok(())
}

/// Single-signal inner loop starting from `[0, zeta_0]`.
pub fn critic_inner_loop(
    critic: &NeuralCritic,
    model: &CmdpModel,
    policy: &PolicyParams,
    g: Signal,
    radius: f64,
    schedule: &CriticSchedule,
    cursor: &mut TrajectoryCursor,
) -> Result<CriticParams> {
    let params = CriticParams::initial(critic.net(), radius)?;
    let mut tasks = [CriticTask {
        critic,
        signal: g,
        params,
    }];
    critic_inner_loop_shared(&mut tasks, model, policy, schedule, cursor)?;
    let [task] = tasks;
    Ok(task.params)
}
