//! Online and target branches: encoder → projector (→ predictor).
//!
//! The architecture is defined once; each branch is just a [`WeightSet`]
//! fed through the same layer stacks. Target branches run forward-only, so
//! no tape is recorded for them and no gradient can reach their entries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    BatchNorm, Bottleneck, Cache, Conv2d, FeatureMap, ForwardCtx, Gradients, Layer, Linear, MaxPool, NormMode,
    ParamInit, ParamSlot, ParamStore, Sequential, StatUpdate, BN_MOMENTUM,
};
use crate::updates::SgdState;
use crate::weights::{Branch, Entry, Kind, Role, WeightError, WeightSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Four stride-2 conv blocks followed by global average pooling.
    Toy,
    Resnet50,
}

/// Layer dimensions of the online/target networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureSpec {
    pub encoder: EncoderKind,
    /// Output width of the encoder; must match the backbone.
    pub feature_dim: usize,
    /// Channel widths of the toy encoder blocks; ignored for ResNet-50.
    pub toy_widths: Vec<usize>,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Side length of the square input views.
    pub input_resolution: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self::resnet50()
    }
}

impl ArchitectureSpec {
    pub fn resnet50() -> Self {
        Self {
            encoder: EncoderKind::Resnet50,
            feature_dim: 2048,
            toy_widths: vec![32, 64, 128, 256],
            hidden_dim: 512,
            embedding_dim: 128,
            input_resolution: 96,
        }
    }

    pub fn toy() -> Self {
        Self { encoder: EncoderKind::Toy, feature_dim: 256, ..Self::resnet50() }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.input_resolution = resolution;
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let expected = match self.encoder {
            EncoderKind::Resnet50 => 2048,
            EncoderKind::Toy => {
                if self.toy_widths.is_empty() || self.toy_widths.contains(&0) {
                    return Err(NetworkError::Spec("toy_widths must be non-empty and positive".into()));
                }
                *self.toy_widths.last().unwrap()
            }
        };
        if self.feature_dim != expected {
            return Err(NetworkError::Spec(format!(
                "feature_dim {} does not match the {:?} encoder output {expected}",
                self.feature_dim, self.encoder
            )));
        }
        if self.hidden_dim == 0 || self.embedding_dim == 0 {
            return Err(NetworkError::Spec("hidden_dim and embedding_dim must be positive".into()));
        }
        if self.input_resolution < 8 {
            return Err(NetworkError::Spec(format!("input_resolution {} is below 8", self.input_resolution)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("input shape {got:?} does not match expected (B, {res}, {res}, 3)")]
    Shape { got: (usize, usize, usize, usize), res: usize },
    #[error("invalid target branch {0}; expected 2 or 3")]
    InvalidTarget(u8),
    #[error("target branch {0} is not allocated in this training mode")]
    MissingTarget(u8),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

fn conv(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::Conv(Conv2d { name, in_channels: cin, out_channels: cout, kernel, stride, padding })
}

fn norm(name: String, channels: usize) -> Layer {
    Layer::Norm(BatchNorm { name, channels })
}

fn toy_encoder(widths: &[usize]) -> Sequential {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(conv(format!("encoder.block{i}.conv"), cin, w, 3, 2, 1));
        layers.push(norm(format!("encoder.block{i}.bn"), w));
        layers.push(Layer::Relu);
        cin = w;
    }
    layers.push(Layer::GlobalAvgPool);
    Sequential::new(layers)
}

fn resnet50_encoder() -> Sequential {
    let mut layers = vec![
        conv("encoder.stem.conv".into(), 3, 64, 7, 2, 3),
        norm("encoder.stem.bn".into(), 64),
        Layer::Relu,
        Layer::MaxPool(MaxPool { kernel: 3, stride: 2, padding: 1 }),
    ];
    let stages = [(3usize, 64usize), (4, 128), (6, 256), (3, 512)];
    let mut cin = 64;
    for (s, &(blocks, width)) in stages.iter().enumerate() {
        let cout = width * 4;
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("encoder.stage{}.block{b}", s + 1);
            let main = Sequential::new(vec![
                conv(format!("{p}.conv1"), cin, width, 1, 1, 0),
                norm(format!("{p}.bn1"), width),
                Layer::Relu,
                conv(format!("{p}.conv2"), width, width, 3, stride, 1),
                norm(format!("{p}.bn2"), width),
                Layer::Relu,
                conv(format!("{p}.conv3"), width, cout, 1, 1, 0),
                norm(format!("{p}.bn3"), cout),
            ]);
            let shortcut = (b == 0).then(|| {
                Sequential::new(vec![
                    conv(format!("{p}.downsample.conv"), cin, cout, 1, stride, 0),
                    norm(format!("{p}.downsample.bn"), cout),
                ])
            });
            layers.push(Layer::Bottleneck(Box::new(Bottleneck { main, shortcut })));
            cin = cout;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    Sequential::new(layers)
}

/// linear → batch-norm → ReLU → linear, with no normalization after the last layer.
pub fn mlp(prefix: &str, input: usize, hidden: usize, output: usize) -> Sequential {
    Sequential::new(vec![
        Layer::Linear(Linear { name: format!("{prefix}.fc1"), in_features: input, out_features: hidden }),
        norm(format!("{prefix}.bn"), hidden),
        Layer::Relu,
        Layer::Linear(Linear { name: format!("{prefix}.fc2"), in_features: hidden, out_features: output }),
    ])
}

/// Builds an encoder stack for a spec.
pub fn build_encoder(spec: &ArchitectureSpec) -> Sequential {
    match spec.encoder {
        EncoderKind::Toy => toy_encoder(&spec.toy_widths),
        EncoderKind::Resnet50 => resnet50_encoder(),
    }
}

/// Draws initial values for parameter slots in order from one seeded stream.
pub fn init_entries(slots: &[ParamSlot], rng: &mut ChaCha8Rng, branch: Branch) -> WeightSet {
    let mut ws = WeightSet::new(branch);
    for slot in slots {
        let n: usize = slot.shape.iter().product();
        let data: Vec<f64> = match slot.init {
            ParamInit::KaimingNormal { fan } => {
                let dist = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            ParamInit::Uniform { fan } => {
                let bound = 1.0 / (fan as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            ParamInit::Constant(c) => vec![c; n],
        };
        let role = Role::from_name(&slot.name).expect("slot names carry a role prefix");
        let kind = if slot.learnable { Kind::Learnable } else { Kind::RunningStatistic };
        ws.insert(slot.name.clone(), Entry { role, kind, shape: slot.shape.clone(), data });
    }
    ws
}

/// Folds observed batch statistics into running estimates:
/// `running ← (1 − m)·running + m·batch`.
pub fn apply_stat_updates(ws: &mut WeightSet, stats: &[StatUpdate]) {
    for s in stats {
        for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{}.{suffix}", s.layer);
            if let Some(entry) = ws.get_mut(&name) {
                for (r, b) in entry.data.iter_mut().zip(values.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

/// Shared layer definitions of the online and target branches.
#[derive(Clone, Debug)]
pub struct TripletNetwork {
    pub spec: ArchitectureSpec,
    pub encoder: Sequential,
    pub projector: Sequential,
    pub predictor: Sequential,
}

/// Outputs of one online forward pass plus what backward needs.
#[derive(Debug)]
pub struct OnlineOutput {
    pub features: FeatureMap,
    pub projection: FeatureMap,
    pub prediction: FeatureMap,
    pub stats: Vec<StatUpdate>,
    tape: Option<OnlineTape>,
}

#[derive(Debug)]
struct OnlineTape {
    encoder: Vec<Cache>,
    projector: Vec<Cache>,
    predictor: Vec<Cache>,
}

impl TripletNetwork {
    pub fn new(spec: ArchitectureSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        let encoder = build_encoder(&spec);
        let projector = mlp("projector", spec.feature_dim, spec.hidden_dim, spec.embedding_dim);
        let predictor = mlp("predictor", spec.embedding_dim, spec.hidden_dim, spec.embedding_dim);
        Ok(Self { spec, encoder, projector, predictor })
    }

    /// Online weights: encoder, projector and predictor drawn from `seed`.
    pub fn init_online(&self, seed: u64) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = self.encoder.param_slots();
        slots.extend(self.projector.param_slots());
        slots.extend(self.predictor.param_slots());
        init_entries(&slots, &mut rng, Branch::Online)
    }

    pub fn check_view(&self, view: &FeatureMap) -> Result<(), NetworkError> {
        let res = self.spec.input_resolution;
        if view.height != res || view.width != res || view.channels != 3 || view.batch == 0 {
            return Err(NetworkError::Shape {
                got: (view.batch, view.height, view.width, view.channels),
                res,
            });
        }
        Ok(())
    }

    /// `Y = encoder(view)`, `Z = projector(Y)`, `Q = predictor(Z)`.
    pub fn forward_online(
        &self,
        params: &ParamStore,
        view: &FeatureMap,
        mode: NormMode,
        record: bool,
    ) -> Result<OnlineOutput, NetworkError> {
        self.check_view(view)?;
        let mut ctx = ForwardCtx::new(mode, record);
        let (features, enc_tape) = self.encoder.forward(params, view.clone(), &mut ctx);
        let (projection, proj_tape) = self.projector.forward(params, features.clone(), &mut ctx);
        let (prediction, pred_tape) = self.predictor.forward(params, projection.clone(), &mut ctx);
        let tape = record.then_some(OnlineTape { encoder: enc_tape, projector: proj_tape, predictor: pred_tape });
        Ok(OnlineOutput { features, projection, prediction, stats: ctx.stats, tape })
    }

    /// Backpropagates a gradient on the prediction into every online learnable.
    pub fn backward_online(&self, params: &ParamStore, output: OnlineOutput, d_prediction: FeatureMap) -> Gradients {
        let tape = output.tape.expect("forward_online was called with record = true");
        let mut grads = Gradients::default();
        let dz = self
            .predictor
            .backward(params, tape.predictor, d_prediction, &mut grads, true)
            .expect("input gradient requested");
        let dy = self.projector.backward(params, tape.projector, dz, &mut grads, true).expect("input gradient requested");
        self.encoder.backward(params, tape.encoder, dy, &mut grads, false);
        grads
    }

    /// `Z = projector(encoder(view))` under target weights. No tape is kept,
    /// so nothing upstream of `Z` can be differentiated.
    pub fn forward_target(&self, params: &ParamStore, view: &FeatureMap, mode: NormMode) -> Result<FeatureMap, NetworkError> {
        self.check_view(view)?;
        let mut ctx = ForwardCtx::new(mode, false);
        let (features, _) = self.encoder.forward(params, view.clone(), &mut ctx);
        let (projection, _) = self.projector.forward(params, features, &mut ctx);
        Ok(projection)
    }

    /// Encoder features only.
    pub fn encode(&self, params: &ParamStore, view: &FeatureMap, mode: NormMode) -> Result<FeatureMap, NetworkError> {
        self.check_view(view)?;
        let mut ctx = ForwardCtx::new(mode, false);
        Ok(self.encoder.forward(params, view.clone(), &mut ctx).0)
    }
}

/// Online branch, up to two EMA targets, step counter and optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletState {
    pub online: WeightSet,
    pub target2: Option<WeightSet>,
    pub target3: Option<WeightSet>,
    pub iteration: u64,
    pub optimizer: SgdState,
}

pub const TARGET_ROLES: [Role; 2] = [Role::Encoder, Role::Projector];

impl TripletState {
    /// Online weights from `seed`; `targets` exact copies restricted to encoder + projector.
    pub fn init(network: &TripletNetwork, seed: u64, targets: usize) -> Self {
        let online = network.init_online(seed);
        let copy = |b| online.filter_roles(&TARGET_ROLES).with_branch(b);
        Self {
            target2: (targets >= 1).then(|| copy(Branch::Target2)),
            target3: (targets >= 2).then(|| copy(Branch::Target3)),
            online,
            iteration: 0,
            optimizer: SgdState::default(),
        }
    }

    pub fn target(&self, which: u8) -> Result<&WeightSet, NetworkError> {
        let slot = match which {
            2 => &self.target2,
            3 => &self.target3,
            other => return Err(NetworkError::InvalidTarget(other)),
        };
        slot.as_ref().ok_or(NetworkError::MissingTarget(which))
    }

    pub fn target_mut(&mut self, which: u8) -> Result<&mut WeightSet, NetworkError> {
        let slot = match which {
            2 => &mut self.target2,
            3 => &mut self.target3,
            other => return Err(NetworkError::InvalidTarget(other)),
        };
        slot.as_mut().ok_or(NetworkError::MissingTarget(which))
    }

    /// Verifies role and shape agreement between the online branch and every target.
    pub fn check_structure(&self) -> Result<(), NetworkError> {
        for t in [&self.target2, &self.target3].into_iter().flatten() {
            if t.count_role(Role::Predictor) > 0 {
                return Err(NetworkError::Weights(WeightError::Unexpected("predictor entry in target".into())));
            }
            self.online.check_congruent(t, &TARGET_ROLES)?;
        }
        Ok(())
    }
}

/// Online encoder weights for downstream use.
pub fn extract_backbone(state: &TripletState) -> WeightSet {
    state.online.filter_roles(&[Role::Encoder])
}

/// Convenience wrapper: initial state with two targets.
pub fn init_triplet(spec: ArchitectureSpec, seed: u64) -> Result<(TripletNetwork, TripletState), NetworkError> {
    let network = TripletNetwork::new(spec)?;
    let state = TripletState::init(&network, seed, 2);
    Ok((network, state))
}
