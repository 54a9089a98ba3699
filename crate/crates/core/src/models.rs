//! The players: feature extractor φ, main head f, descriptor classifier g with
//! its code encoder, and the per-environment heads f_e, f_{-e}, f̃_e.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::environments::CODE_BITS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GKind {
    Mlp { hidden: usize },
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Layer widths of φ after the input; the last entry is the representation width.
    pub phi_widths: Vec<usize>,
    pub phi_activation: Activation,
    pub head: HeadKind,
    /// Number of classes, or 1 for regression.
    pub outputs: usize,
    pub g: GKind,
    pub embed_dim: usize,
    pub n_envs: usize,
}

impl ArchConfig {
    pub fn new(input_dim: usize, outputs: usize, n_envs: usize) -> Self {
        ArchConfig {
            input_dim,
            phi_widths: vec![64, 16],
            phi_activation: Activation::Tanh,
            head: HeadKind::Linear,
            outputs,
            g: GKind::Mlp { hidden: 64 },
            embed_dim: 16,
            n_envs,
        }
    }

    pub fn repr_dim(&self) -> usize {
        self.phi_widths.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        let mut widths = vec![self.input_dim, self.outputs, self.embed_dim];
        widths.extend(&self.phi_widths);
        if let HeadKind::Mlp { hidden } = self.head {
            widths.push(hidden);
        }
        if let GKind::Mlp { hidden } = self.g {
            widths.push(hidden);
        }
        if self.phi_widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in architecture {self:?}")));
        }
        if self.n_envs == 0 {
            return Err(Error::Config("at least one environment is required".into()));
        }
        Ok(())
    }
}

/// How a forward pass binds parameters onto the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Gradients flow back into the parameters.
    Train,
    /// Parameter values enter as constants.
    Frozen,
}

fn leaf(tape: &mut Tape, store: &ParamStore, p: ParamId, bind: Bind) -> NodeId {
    match bind {
        Bind::Train => tape.param(store, p),
        Bind::Frozen => tape.frozen(store, p),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
        let w = store.add(format!("{name}.w"), Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out)));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::from_vec(1, fan_out, draw(fan_out))));
        Dense { w, b }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, bind: Bind) -> Result<NodeId> {
        let w = leaf(tape, store, self.w, bind);
        let b = match self.b {
            Some(b) => leaf(tape, store, b, bind),
            None => tape.constant(Tensor::zeros(1, store.value(self.w).cols())),
        };
        tape.affine(x, w, b)
    }

    fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.w).chain(self.b)
    }
}

/// Stack of dense layers with an activation between layers and, optionally, after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

fn activate(tape: &mut Tape, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

impl Mlp {
    fn init(store: &mut ParamStore, name: &str, widths: &[usize], bias: bool, hidden: Activation, output: Activation, rng: &mut ChaCha8Rng) -> Mlp {
        let layers = widths.windows(2).enumerate().map(|(i, w)| Dense::init(store, &format!("{name}.{i}"), w[0], w[1], bias, rng)).collect();
        Mlp { layers, hidden, output }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, bind: Bind) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h, bind)?;
            h = activate(tape, h, if i == last { self.output } else { self.hidden });
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Dense::params).collect()
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.layers[0].w).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.layers[self.layers.len() - 1].w).cols()
    }

    /// Shapes of every parameter, in order. Two networks share a family iff these agree.
    pub fn signature(&self, store: &ParamStore) -> Vec<(usize, usize)> {
        self.params().iter().map(|&p| store.value(p).shape()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub net: Mlp,
}

impl FeatureExtractor {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.net.forward(tape, store, x, Bind::Train)
    }

    /// φ(x) for a plain matrix, off any training tape.
    pub fn features(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        extract_features(self, store, x)
    }
}

/// `z = φ(x)` as a fresh matrix.
pub fn extract_features(phi: &FeatureExtractor, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let expected = phi.net.in_dim(store);
    if x.cols() != expected {
        return Err(Error::Shape { op: "extract_features", shapes: format!("{}x{} vs input width {expected}", x.rows(), x.cols()) });
    }
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let z = phi.net.forward(&mut tape, store, xn, Bind::Frozen)?;
    Ok(tape.value(z).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Main,
    Oracle,
    HeldOut,
    PerturbedOracle,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Main => "main",
            Role::Oracle => "oracle",
            Role::HeldOut => "held_out",
            Role::PerturbedOracle => "perturbed_oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub role: Role,
    pub env: Option<usize>,
    pub net: Mlp,
}

impl Predictor {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: NodeId, bind: Bind) -> Result<NodeId> {
        self.net.forward(tape, store, z, bind)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }

    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::RoleMismatch { expected: role.name(), got: self.role.name() })
        }
    }
}

/// Logits (or regression outputs) of `predictor` on a plain representation matrix.
pub fn predict(predictor: &Predictor, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
    let expected = predictor.net.in_dim(store);
    if z.cols() != expected {
        return Err(Error::Shape { op: "predict", shapes: format!("{}x{} vs input width {expected}", z.rows(), z.cols()) });
    }
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let out = predictor.forward(&mut tape, store, zn, Bind::Frozen)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorClassifier {
    pub g: Mlp,
    pub encoder: Dense,
}

impl DescriptorClassifier {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.g.params();
        p.extend(self.encoder.params());
        p
    }

    /// Descriptor embeddings for a `k x 16` matrix of `±1` codes.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, codes: NodeId, bind: Bind) -> Result<NodeId> {
        self.encoder.forward(tape, store, codes, bind)
    }

    pub fn score(&self, tape: &mut Tape, store: &ParamStore, z: NodeId, bind: Bind) -> Result<NodeId> {
        self.g.forward(tape, store, z, bind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlayerSet {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub phi: FeatureExtractor,
    pub f: Predictor,
    pub g: DescriptorClassifier,
    pub oracles: Vec<Predictor>,
    pub heldout: Vec<Predictor>,
    pub perturbed: Vec<Predictor>,
}

fn head_widths(arch: &ArchConfig) -> Vec<usize> {
    match arch.head {
        HeadKind::Linear => vec![arch.repr_dim(), arch.outputs],
        HeadKind::Mlp { hidden } => vec![arch.repr_dim(), hidden, arch.outputs],
    }
}

fn make_head(store: &mut ParamStore, name: &str, arch: &ArchConfig, role: Role, env: Option<usize>, rng: &mut ChaCha8Rng) -> Predictor {
    let net = Mlp::init(store, name, &head_widths(arch), true, Activation::Tanh, Activation::Identity, rng);
    Predictor { role, env, net }
}

/// Build every player. φ and f are drawn first so they coincide across methods
/// sharing a seed; f̃_e starts as a copy of f_e.
pub fn init_players(arch: &ArchConfig, seed: u64) -> Result<PlayerSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut widths = vec![arch.input_dim];
    widths.extend(&arch.phi_widths);
    let phi = FeatureExtractor { net: Mlp::init(&mut store, "phi", &widths, true, arch.phi_activation, arch.phi_activation, &mut rng) };
    let f = make_head(&mut store, "f", arch, Role::Main, None, &mut rng);
    let g_widths = match arch.g {
        GKind::Mlp { hidden } => vec![arch.repr_dim(), hidden, arch.embed_dim],
        GKind::Linear => vec![arch.repr_dim(), arch.embed_dim],
    };
    let g = Mlp::init(&mut store, "g", &g_widths, true, Activation::Relu, Activation::Identity, &mut rng);
    let encoder = Dense::init(&mut store, "enc", CODE_BITS, arch.embed_dim, false, &mut rng);
    let mut oracles = Vec::with_capacity(arch.n_envs);
    let mut heldout = Vec::with_capacity(arch.n_envs);
    let mut perturbed = Vec::with_capacity(arch.n_envs);
    for e in 0..arch.n_envs {
        let oracle = make_head(&mut store, &format!("oracle.{e}"), arch, Role::Oracle, Some(e), &mut rng);
        heldout.push(make_head(&mut store, &format!("heldout.{e}"), arch, Role::HeldOut, Some(e), &mut rng));
        let pert = make_head(&mut store, &format!("perturbed.{e}"), arch, Role::PerturbedOracle, Some(e), &mut rng);
        for (dst, src) in pert.params().into_iter().zip(oracle.params()) {
            *store.value_mut(dst) = store.value(src).clone();
        }
        perturbed.push(pert);
        oracles.push(oracle);
    }
    let players = PlayerSet { arch: arch.clone(), store, phi, f, g: DescriptorClassifier { g, encoder }, oracles, heldout, perturbed };
    players.check_families()?;
    Ok(players)
}

impl PlayerSet {
    pub fn n_envs(&self) -> usize {
        self.oracles.len()
    }

    /// Every predictor must share the main head's parameter shapes.
    pub fn check_families(&self) -> Result<()> {
        let sig = self.f.net.signature(&self.store);
        for p in self.oracles.iter().chain(&self.heldout).chain(&self.perturbed) {
            if p.net.signature(&self.store) != sig {
                return Err(Error::Config(format!("{} head for environment {:?} is outside the predictor family", p.role.name(), p.env)));
            }
        }
        Ok(())
    }

    /// Named parameter groups, one per player.
    pub fn groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut out = vec![("phi".to_string(), self.phi.net.params()), ("f".to_string(), self.f.params()), ("g".to_string(), self.g.params())];
        for e in 0..self.n_envs() {
            out.push((format!("oracle.{e}"), self.oracles[e].params()));
            out.push((format!("heldout.{e}"), self.heldout[e].params()));
            out.push((format!("perturbed.{e}"), self.perturbed[e].params()));
        }
        out
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.groups().into_iter().flat_map(|(_, p)| p).collect()
    }

    /// Order-sensitive hash of a group's parameter bits.
    pub fn hash_params(&self, ids: &[ParamId]) -> u64 {
        let mut h = DefaultHasher::new();
        for &p in ids {
            for v in self.store.value(p).data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Features of a plain input matrix.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        extract_features(&self.phi, &self.store, x)
    }

    /// `f(φ(x))`.
    pub fn main_logits(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.features(x)?;
        predict(&self.f, &self.store, &z)
    }

    /// Set φ to the identity map. φ must be one square layer with identity activation.
    pub fn set_identity_phi(&mut self) -> Result<()> {
        let layers = &self.phi.net.layers;
        let d = self.arch.input_dim;
        if layers.len() != 1 || self.arch.repr_dim() != d || self.arch.phi_activation != Activation::Identity {
            return Err(Error::Config("identity φ needs a single square layer with identity activation".into()));
        }
        let layer = layers[0].clone();
        *self.store.value_mut(layer.w) = Tensor::identity(d);
        if let Some(b) = layer.b {
            *self.store.value_mut(b) = Tensor::zeros(1, d);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<PlayerSet> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        PlayerSet::from_checkpoint(&bytes)
    }

    /// Binary checkpoint: magic, architecture as TOML, then named parameters
    /// with `u64` shapes and little-endian `f64` payloads.
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let cfg = toml::to_string(&self.arch).map_err(|e| Error::Parse(e.to_string()))?;
        let mut out = Vec::new();
        out.write_all(CHECKPOINT_MAGIC).unwrap();
        write_u64(&mut out, cfg.len() as u64);
        out.write_all(cfg.as_bytes()).unwrap();
        write_u64(&mut out, self.store.len() as u64);
        for (_, p) in self.store.iter() {
            write_u64(&mut out, p.id.len() as u64);
            out.write_all(p.id.as_bytes()).unwrap();
            write_u64(&mut out, p.tensor.rows() as u64);
            write_u64(&mut out, p.tensor.cols() as u64);
            for v in p.tensor.data() {
                out.write_all(&v.to_le_bytes()).unwrap();
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<PlayerSet> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Parse("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a checkpoint".into()));
        }
        let cfg_len = read_u64(&mut r)? as usize;
        let cfg = read_bytes(&mut r, cfg_len)?;
        let cfg = std::str::from_utf8(&cfg).map_err(|e| Error::Parse(e.to_string()))?;
        let arch: ArchConfig = toml::from_str(cfg).map_err(|e| Error::Parse(e.to_string()))?;
        let mut players = init_players(&arch, 0)?;
        let count = read_u64(&mut r)? as usize;
        if count != players.store.len() {
            return Err(Error::Parse(format!("checkpoint has {count} parameters, architecture needs {}", players.store.len())));
        }
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?).map_err(|e| Error::Parse(e.to_string()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| Error::Parse("truncated checkpoint".into()))?;
                data.push(f64::from_le_bytes(b));
            }
            let pid = players.store.find(&name).ok_or_else(|| Error::Parse(format!("unknown parameter `{name}`")))?;
            if players.store.value(pid).shape() != (rows, cols) {
                return Err(Error::Parse(format!("parameter `{name}` has shape {rows}x{cols}, expected {:?}", players.store.value(pid).shape())));
            }
            *players.store.value_mut(pid) = Tensor::from_vec(rows, cols, data);
        }
        Ok(players)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RGMCKPT1";

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Parse("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| Error::Parse("truncated checkpoint".into()))?;
    Ok(b)
}
