//! The decoding network.
//!
//! An MLP backbone (voxel projector plus residual blocks) whose linear layers
//! each carry one low-rank adapter branch per subject. A single global router
//! classifies the raw aligned sequence into a routing simplex that every
//! adapter layer reuses, so all layers make the same routing choice for a
//! sample. Three heads sit on the shared representation: a multi-label
//! classifier, a retrieval projector whose output is L2-normalized for
//! contrastive use, and a prior head mapping into the image-embedding space.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Param};
use crate::rng;
use crate::tensor::{read_mbt1, write_mbt1, Tensor};

pub const ROUTING_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Input dimension (the dataset's aligned sequence length).
    pub d_in: usize,
    /// Shared hidden width.
    pub hidden: usize,
    /// Residual blocks after the voxel projector.
    pub n_blocks: usize,
    pub n_subjects: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    /// Low-rank adapter rank.
    pub rank: usize,
    /// Multiplier on the adapter delta; 1 matches the mixing equation as
    /// written, exposed for parity experiments.
    pub adapter_scale: f64,
    /// Attach adapters to head layers too, not just the backbone.
    pub adapters_in_heads: bool,
    pub dropout: f64,
    pub router_hidden: usize,
    /// Middle width of the retrieval projector; 0 selects `hidden * 8 / 3`.
    pub retrieval_mid: usize,
}

impl ModelConfig {
    pub fn desk_default(d_in: usize, n_subjects: usize, n_classes: usize, embed_dim: usize) -> Self {
        ModelConfig {
            d_in,
            hidden: 256,
            n_blocks: 4,
            n_subjects,
            n_classes,
            embed_dim,
            rank: 16,
            adapter_scale: 1.0,
            adapters_in_heads: true,
            dropout: 0.0,
            router_hidden: 256,
            retrieval_mid: 0,
        }
    }

    pub fn retrieval_mid_resolved(&self) -> usize {
        if self.retrieval_mid == 0 {
            self.hidden * 8 / 3
        } else {
            self.retrieval_mid
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::config("model needs at least one subject"));
        }
        if self.d_in == 0 || self.hidden == 0 || self.embed_dim == 0 || self.n_classes == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Which parameter groups a forward pass treats as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    Frozen,
    All,
    /// Only the named subject's adapters receive gradients.
    Only(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct ParamMode {
    pub backbone: bool,
    pub adapters: AdapterMode,
}

impl ParamMode {
    pub fn inference() -> Self {
        ParamMode {
            backbone: false,
            adapters: AdapterMode::Frozen,
        }
    }

    pub fn backbone_only() -> Self {
        ParamMode {
            backbone: true,
            adapters: AdapterMode::Frozen,
        }
    }

    pub fn adapters_only(subject: usize) -> Self {
        ParamMode {
            backbone: false,
            adapters: AdapterMode::Only(subject),
        }
    }

    fn adapter_trainable(&self, subject: usize) -> bool {
        match self.adapters {
            AdapterMode::Frozen => false,
            AdapterMode::All => true,
            AdapterMode::Only(s) => s == subject,
        }
    }
}

fn normal_tensor(r: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(r);
            v * std
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// One subject's low-rank branch on a linear layer.
#[derive(Debug, Clone)]
pub struct Adapter {
    /// Down-projection, `[rank, in]`, seeded Gaussian.
    pub down: Param,
    /// Up-projection, `[out, rank]`, zero so the delta starts at exactly zero.
    pub up: Param,
}

/// A linear layer holding the shared weight plus one adapter per subject.
#[derive(Debug, Clone)]
pub struct MoBELinear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub theta: Param,
    pub bias: Param,
    pub adapters: Vec<Adapter>,
    /// Mixture active; when false the layer computes the plain path exactly.
    pub enabled: bool,
    pub scale: f64,
}

impl MoBELinear {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        n_subjects: usize,
        rank: usize,
        scale: f64,
        r: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_subjects > 0 && rank > in_dim.min(out_dim) {
            return Err(Error::config(format!(
                "{name}: rank {rank} exceeds min(in={in_dim}, out={out_dim})"
            )));
        }
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let theta = Param::new(format!("{name}.theta"), normal_tensor(r, &[out_dim, in_dim], std));
        let bias = Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        let down_std = 1.0 / (in_dim as f64).sqrt();
        let adapters = (0..n_subjects)
            .map(|s| Adapter {
                down: Param::new(
                    format!("{name}.adapter{s}.down"),
                    normal_tensor(r, &[rank, in_dim], down_std),
                ),
                up: Param::new(format!("{name}.adapter{s}.up"), Tensor::zeros(&[out_dim, rank])),
            })
            .collect();
        Ok(MoBELinear {
            name: name.to_string(),
            in_dim,
            out_dim,
            rank,
            theta,
            bias,
            adapters,
            enabled: false,
            scale,
        })
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// `o = theta x + bias + sum_s omega_s * up_s (down_s x)`, the adapter sum
    /// weighted per sample by the routing simplex. With the mixture disabled
    /// the plain path is computed and nothing else.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        omega: Option<NodeId>,
        mode: ParamMode,
    ) -> Result<NodeId> {
        let w = g.param_mode(&self.theta, mode.backbone);
        let b = g.param_mode(&self.bias, mode.backbone);
        let base = g.matmul_nt(x, w)?;
        let mut out = g.add_row(base, b)?;

        if self.enabled && self.has_adapters() {
            let omega = omega.ok_or_else(|| {
                Error::invalid(format!("{}: routing weights required when adapters are enabled", self.name))
            })?;
            self.check_routing(g, omega)?;
            for (s, adapter) in self.adapters.iter().enumerate() {
                counters::count_adapter_application();
                let trainable = mode.adapter_trainable(s);
                let down = g.param_mode(&adapter.down, trainable);
                let up = g.param_mode(&adapter.up, trainable);
                let mid = g.matmul_nt(x, down)?;
                let delta = g.matmul_nt(mid, up)?;
                let w_s = g.index_select(omega, 1, &[s])?;
                let mut weighted = g.scale_rows(delta, w_s)?;
                if self.scale != 1.0 {
                    weighted = g.mul_scalar(weighted, self.scale);
                }
                out = g.add(out, weighted)?;
            }
        }
        Ok(out)
    }

    fn check_routing(&self, g: &Graph, omega: NodeId) -> Result<()> {
        let t = g.value(omega);
        let shape = t.shape();
        if shape.len() != 2 || shape[1] != self.adapters.len() {
            return Err(Error::ShapeMismatch {
                op: "routing weights",
                lhs: shape.to_vec(),
                rhs: vec![0, self.adapters.len()],
            });
        }
        for i in 0..shape[0] {
            let row = t.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROUTING_SUM_TOLERANCE || row.iter().any(|v| *v < 0.0) {
                return Err(Error::invalid(format!(
                    "{}: routing weights row {i} is not on the simplex (sum {sum})",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn collect_params(&self, shared: &mut Vec<Param>, per_subject: &mut [Vec<Param>]) {
        shared.push(self.theta.clone());
        shared.push(self.bias.clone());
        for (s, a) in self.adapters.iter().enumerate() {
            per_subject[s].push(a.down.clone());
            per_subject[s].push(a.up.clone());
        }
    }
}

/// A plain linear layer (used by the router, which cannot route itself).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn xavier(name: &str, in_dim: usize, out_dim: usize, r: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}.weight"), normal_tensor(r, &[out_dim, in_dim], std)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn zeroed(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId> {
        let w = g.param_mode(&self.weight, trainable);
        let b = g.param_mode(&self.bias, trainable);
        let y = g.matmul_nt(x, w)?;
        g.add_row(y, b)
    }
}

/// Held-out router quality after training.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RouterStats {
    pub test_accuracy: f64,
    pub mean_top1_confidence: f64,
    pub epochs_run: usize,
}

/// Subject-guided global router: a small MLP over the raw aligned sequence.
/// The final layer starts at zero so the untrained router outputs the uniform
/// simplex.
#[derive(Debug, Clone)]
pub struct Router {
    pub hidden: Linear,
    pub out: Linear,
}

impl Router {
    fn new(cfg: &ModelConfig, r: &mut ChaCha8Rng) -> Self {
        Router {
            hidden: Linear::xavier("router.hidden", cfg.d_in, cfg.router_hidden, r),
            out: Linear::zeroed("router.out", cfg.router_hidden, cfg.n_subjects),
        }
    }

    pub fn logits(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId> {
        let h = self.hidden.forward(g, x, trainable)?;
        let h = g.gelu(h);
        self.out.forward(g, h, trainable)
    }

    fn params(&self) -> Vec<Param> {
        vec![
            self.hidden.weight.clone(),
            self.hidden.bias.clone(),
            self.out.weight.clone(),
            self.out.bias.clone(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNormParams {
    fn new(name: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId> {
        let gamma = g.param_mode(&self.gamma, trainable);
        let beta = g.param_mode(&self.beta, trainable);
        g.layer_norm(x, gamma, beta)
    }

    fn collect(&self, shared: &mut Vec<Param>) {
        shared.push(self.gamma.clone());
        shared.push(self.beta.clone());
    }
}

/// Voxel projector plus residual blocks; every linear layer is a
/// [`MoBELinear`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub projector: MoBELinear,
    pub projector_norm: LayerNormParams,
    pub blocks: Vec<(MoBELinear, LayerNormParams)>,
    pub dropout: f64,
}

impl Backbone {
    fn new(cfg: &ModelConfig, r: &mut ChaCha8Rng) -> Result<Self> {
        let projector = MoBELinear::new(
            "backbone.projector",
            cfg.d_in,
            cfg.hidden,
            cfg.n_subjects,
            cfg.rank,
            cfg.adapter_scale,
            r,
        )?;
        let projector_norm = LayerNormParams::new("backbone.projector_norm", cfg.hidden);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let lin = MoBELinear::new(
                &format!("backbone.block{b}"),
                cfg.hidden,
                cfg.hidden,
                cfg.n_subjects,
                cfg.rank,
                cfg.adapter_scale,
                r,
            )?;
            let norm = LayerNormParams::new(&format!("backbone.block{b}_norm"), cfg.hidden);
            blocks.push((lin, norm));
        }
        Ok(Backbone {
            projector,
            projector_norm,
            blocks,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        omega: Option<NodeId>,
        mode: ParamMode,
    ) -> Result<NodeId> {
        let h = self.projector.forward(g, x, omega, mode)?;
        let h = self.projector_norm.forward(g, h, mode.backbone)?;
        let h = g.gelu(h);
        let mut h = g.dropout(h, self.dropout)?;
        for (lin, norm) in &self.blocks {
            let t = lin.forward(g, h, omega, mode)?;
            let t = norm.forward(g, t, mode.backbone)?;
            let t = g.gelu(t);
            let t = g.dropout(t, self.dropout)?;
            h = g.add(h, t)?;
        }
        Ok(h)
    }
}

/// Classifier, retrieval projector (expand / keep / contract), prior head.
#[derive(Debug, Clone)]
pub struct Heads {
    pub classifier: MoBELinear,
    pub retrieval: Vec<MoBELinear>,
    pub prior: Vec<MoBELinear>,
}

impl Heads {
    fn new(cfg: &ModelConfig, r: &mut ChaCha8Rng) -> Result<Self> {
        let subjects_in_heads = if cfg.adapters_in_heads { cfg.n_subjects } else { 0 };
        // head layers can be narrower than the backbone rank allows
        let head_rank = |in_dim: usize, out_dim: usize| cfg.rank.min(in_dim).min(out_dim);
        let mid = cfg.retrieval_mid_resolved();
        let mk = |name: &str, i: usize, o: usize, r: &mut ChaCha8Rng| {
            MoBELinear::new(name, i, o, subjects_in_heads, head_rank(i, o), cfg.adapter_scale, r)
        };
        Ok(Heads {
            classifier: mk("heads.classifier", cfg.hidden, cfg.n_classes, r)?,
            retrieval: vec![
                mk("heads.retrieval0", cfg.hidden, mid, r)?,
                mk("heads.retrieval1", mid, mid, r)?,
                mk("heads.retrieval2", mid, cfg.embed_dim, r)?,
            ],
            prior: vec![
                mk("heads.prior0", cfg.hidden, cfg.hidden, r)?,
                mk("heads.prior1", cfg.hidden, cfg.embed_dim, r)?,
            ],
        })
    }
}

/// All four per-batch outputs of the network.
pub struct ForwardOutput {
    /// Shared representation, `[n, hidden]`.
    pub repr: NodeId,
    /// Classifier logits, `[n, n_classes]`.
    pub class_logits: NodeId,
    /// Retrieval embedding, L2-normalized rows, `[n, embed_dim]`.
    pub retrieval: NodeId,
    /// Prior head output, `[n, embed_dim]`.
    pub prior: NodeId,
}

/// Parameter partition: every trainable tensor appears in exactly one group.
pub struct ParameterGroups {
    pub backbone_and_heads: Vec<Param>,
    pub adapters_by_subject: Vec<Vec<Param>>,
    pub router: Vec<Param>,
}

impl ParameterGroups {
    pub fn all(&self) -> Vec<Param> {
        let mut out = self.backbone_and_heads.clone();
        for group in &self.adapters_by_subject {
            out.extend(group.iter().cloned());
        }
        out.extend(self.router.iter().cloned());
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub heads: Heads,
    pub router: Router,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "model-init");
        let backbone = Backbone::new(&cfg, &mut r)?;
        let heads = Heads::new(&cfg, &mut r)?;
        let router = Router::new(&cfg, &mut r);
        Ok(Model {
            cfg,
            backbone,
            heads,
            router,
        })
    }

    fn mobe_layers(&self) -> Vec<&MoBELinear> {
        let mut layers = vec![&self.backbone.projector];
        for (lin, _) in &self.backbone.blocks {
            layers.push(lin);
        }
        layers.push(&self.heads.classifier);
        layers.extend(self.heads.retrieval.iter());
        layers.extend(self.heads.prior.iter());
        layers
    }

    fn mobe_layers_mut(&mut self) -> Vec<&mut MoBELinear> {
        let mut layers = vec![&mut self.backbone.projector];
        for (lin, _) in &mut self.backbone.blocks {
            layers.push(lin);
        }
        layers.push(&mut self.heads.classifier);
        layers.extend(self.heads.retrieval.iter_mut());
        layers.extend(self.heads.prior.iter_mut());
        layers
    }

    /// Number of linear layers carrying adapters.
    pub fn adapter_layer_count(&self) -> usize {
        self.mobe_layers().iter().filter(|l| l.has_adapters()).count()
    }

    /// Switch the adapter mixture on or off for every layer.
    pub fn set_adapters_enabled(&mut self, enabled: bool) {
        for layer in self.mobe_layers_mut() {
            layer.enabled = enabled;
        }
    }

    pub fn adapters_enabled(&self) -> bool {
        self.backbone.projector.enabled
    }

    pub fn router_logits(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId> {
        self.router.logits(g, x, trainable)
    }

    /// Routing weights for a batch: softmax over the frozen router's logits.
    /// Computed once per batch and reused by every adapter layer.
    pub fn route(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let logits = self.router.logits(g, x, false)?;
        g.softmax(logits, 1)
    }

    /// Full forward pass producing all four outputs.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        omega: Option<NodeId>,
        mode: ParamMode,
    ) -> Result<ForwardOutput> {
        let repr = self.backbone.forward(g, x, omega, mode)?;
        let class_logits = self.heads.classifier.forward(g, repr, omega, mode)?;
        let retrieval = self.forward_retrieval_head(g, repr, omega, mode)?;
        let prior = self.forward_prior_head(g, repr, omega, mode)?;
        Ok(ForwardOutput {
            repr,
            class_logits,
            retrieval,
            prior,
        })
    }

    pub fn forward_repr(
        &self,
        g: &mut Graph,
        x: NodeId,
        omega: Option<NodeId>,
        mode: ParamMode,
    ) -> Result<NodeId> {
        self.backbone.forward(g, x, omega, mode)
    }

    pub fn forward_retrieval_head(
        &self,
        g: &mut Graph,
        repr: NodeId,
        omega: Option<NodeId>,
        mode: ParamMode,
    ) -> Result<NodeId> {
        let mut h = repr;
        for layer in &self.heads.retrieval {
            h = layer.forward(g, h, omega, mode)?;
        }
        g.l2_normalize(h, 1)
    }

    pub fn forward_prior_head(
        &self,
        g: &mut Graph,
        repr: NodeId,
        omega: Option<NodeId>,
        mode: ParamMode,
    ) -> Result<NodeId> {
        let h = self.heads.prior[0].forward(g, repr, omega, mode)?;
        let h = g.gelu(h);
        self.heads.prior[1].forward(g, h, omega, mode)
    }

    /// The three-way parameter partition.
    pub fn parameter_groups(&self) -> ParameterGroups {
        let mut shared = Vec::new();
        let mut per_subject: Vec<Vec<Param>> = vec![Vec::new(); self.cfg.n_subjects];
        self.backbone.projector.collect_params(&mut shared, &mut per_subject);
        self.backbone.projector_norm.collect(&mut shared);
        for (lin, norm) in &self.backbone.blocks {
            lin.collect_params(&mut shared, &mut per_subject);
            norm.collect(&mut shared);
        }
        self.heads.classifier.collect_params(&mut shared, &mut per_subject);
        for lin in &self.heads.retrieval {
            lin.collect_params(&mut shared, &mut per_subject);
        }
        for lin in &self.heads.prior {
            lin.collect_params(&mut shared, &mut per_subject);
        }
        ParameterGroups {
            backbone_and_heads: shared,
            adapters_by_subject: per_subject,
            router: self.router.params(),
        }
    }

    /// Parameter counts and the adapters' share of the shared linear weights.
    pub fn param_report(&self) -> ParamReport {
        let groups = self.parameter_groups();
        let shared: usize = groups.backbone_and_heads.iter().map(Param::numel).sum();
        let per_subject: usize = groups.adapters_by_subject[0].iter().map(Param::numel).sum();
        let adapters: usize = groups
            .adapters_by_subject
            .iter()
            .map(|g| g.iter().map(Param::numel).sum::<usize>())
            .sum();
        let router: usize = groups.router.iter().map(Param::numel).sum();
        let theta_weights: usize = self
            .mobe_layers()
            .iter()
            .map(|l| l.in_dim * l.out_dim)
            .sum();
        ParamReport {
            backbone_and_heads: shared,
            adapters_total: adapters,
            adapters_per_subject: per_subject,
            router,
            adapter_share_of_theta: adapters as f64 / theta_weights as f64,
        }
    }

    /// Write every parameter as an MBT1 tensor plus a JSON index naming each
    /// tensor's group, layer, and subject.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let groups = self.parameter_groups();
        let mut entries = Vec::new();
        let mut dump = |params: &[Param], group: &str, subject: Option<usize>| -> Result<()> {
            for p in params {
                let file = format!("{}.mbt", p.name().replace('.', "_"));
                write_mbt1(dir.join(&file), &p.value())?;
                entries.push(serde_json::json!({
                    "name": p.name(),
                    "group": group,
                    "subject": subject,
                    "file": file,
                }));
            }
            Ok(())
        };
        dump(&groups.backbone_and_heads, "backbone_and_heads", None)?;
        for (s, group) in groups.adapters_by_subject.iter().enumerate() {
            dump(group, "adapters", Some(s))?;
        }
        dump(&groups.router, "router", None)?;

        let index = serde_json::json!({
            "config": self.cfg,
            "adapters_enabled": self.adapters_enabled(),
            "tensors": entries,
        });
        let path = dir.join("index.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&index).map_err(|e| Error::Serialization(e.to_string()))?,
        )
        .map_err(|e| Error::io(&path, e))
    }

    /// Rebuild a model from a checkpoint directory.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
        let dir = dir.as_ref();
        let index_path = dir.join("index.json");
        if !index_path.exists() {
            return Err(Error::MissingInput(format!(
                "no checkpoint index at {}",
                index_path.display()
            )));
        }
        let index: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?,
        )
        .map_err(|e| Error::Serialization(e.to_string()))?;
        let cfg: ModelConfig = serde_json::from_value(index["config"].clone())
            .map_err(|e| Error::Serialization(e.to_string()))?;
        let adapters_enabled = index["adapters_enabled"].as_bool().unwrap_or(false);
        let mut model = Model::new(cfg, 0)?;
        model.set_adapters_enabled(adapters_enabled);

        let groups = model.parameter_groups();
        let mut by_name: std::collections::BTreeMap<String, Param> = std::collections::BTreeMap::new();
        for p in groups.all() {
            by_name.insert(p.name().to_string(), p);
        }
        let tensors = index["tensors"]
            .as_array()
            .ok_or_else(|| Error::Serialization("checkpoint index has no tensor list".into()))?;
        for entry in tensors {
            let name = entry["name"]
                .as_str()
                .ok_or_else(|| Error::Serialization("tensor entry without name".into()))?;
            let file = entry["file"]
                .as_str()
                .ok_or_else(|| Error::Serialization("tensor entry without file".into()))?;
            let value = read_mbt1(dir.join(file))?;
            let param = by_name.get(name).ok_or_else(|| {
                Error::Serialization(format!("checkpoint names unknown parameter {name}"))
            })?;
            if param.value().shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    lhs: param.value().shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            param.set_value(value);
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub backbone_and_heads: usize,
    pub adapters_total: usize,
    pub adapters_per_subject: usize,
    pub router: usize,
    /// Adapter parameters relative to the shared linear weights they modify.
    pub adapter_share_of_theta: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_in: 12,
            hidden: 16,
            n_blocks: 2,
            n_subjects: 3,
            n_classes: 4,
            embed_dim: 8,
            rank: 4,
            adapter_scale: 1.0,
            adapters_in_heads: true,
            dropout: 0.1,
            router_hidden: 16,
            retrieval_mid: 0,
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test-batch");
        use rand::Rng;
        Tensor::from_vec(
            &[n, d],
            (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn uniform_routing(n: usize, s: usize) -> Tensor {
        Tensor::filled(&[n, s], 1.0 / s as f64)
    }

    #[test]
    fn untrained_router_is_uniform() {
        let model = Model::new(tiny_cfg(), 1).unwrap();
        let mut g = Graph::new(0);
        let x = g.constant(batch(5, 12, 2));
        let omega = model.route(&mut g, x).unwrap();
        for v in g.value(omega).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_rows_sum_to_one_for_arbitrary_inputs() {
        let model = Model::new(tiny_cfg(), 1).unwrap();
        for seed in 0..20 {
            let mut g = Graph::new(0);
            let x = g.constant(batch(4, 12, seed));
            let omega = model.route(&mut g, x).unwrap();
            let t = g.value(omega);
            for i in 0..4 {
                let sum: f64 = t.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(t.row(i).iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_init_adapters_match_plain_path_bit_exactly() {
        let mut model = Model::new(tiny_cfg(), 3).unwrap();
        let x_t = batch(6, 12, 4);

        let run = |model: &Model, omega: Option<Tensor>| -> Vec<f64> {
            let mut g = Graph::new(7);
            let x = g.constant(x_t.clone());
            let omega = omega.map(|t| g.constant(t));
            let out = model
                .forward(&mut g, x, omega, ParamMode::inference())
                .unwrap();
            let mut all = g.value(out.repr).data().to_vec();
            all.extend_from_slice(g.value(out.class_logits).data());
            all.extend_from_slice(g.value(out.retrieval).data());
            all.extend_from_slice(g.value(out.prior).data());
            all
        };

        model.set_adapters_enabled(false);
        let plain = run(&model, None);
        model.set_adapters_enabled(true);
        let mixed = run(&model, Some(uniform_routing(6, 3)));
        assert_eq!(plain, mixed);

        // with zero-initialized up-projections the output is independent of
        // the routing weights
        let mut skewed = Tensor::zeros(&[6, 3]);
        for i in 0..6 {
            skewed.data_mut()[i * 3] = 0.9;
            skewed.data_mut()[i * 3 + 1] = 0.1;
        }
        let routed = run(&model, Some(skewed));
        assert_eq!(plain, routed);
    }

    #[test]
    fn one_hot_routing_equals_single_expert() {
        let mut r = rng::stream(5, "layer");
        let mut layer = MoBELinear::new("t", 5, 3, 4, 2, 1.0, &mut r).unwrap();
        layer.enabled = true;
        // give the adapters real content
        for a in &layer.adapters {
            a.up.set_value(normal_tensor(&mut r, &[3, 2], 0.5));
        }
        let x_t = batch(4, 5, 6);
        let subject = 2usize;

        let mut g = Graph::new(0);
        let x = g.constant(x_t.clone());
        let mut onehot = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            onehot.data_mut()[i * 4 + subject] = 1.0;
        }
        let omega = g.constant(onehot);
        let mixed = layer.forward(&mut g, x, Some(omega), ParamMode::inference()).unwrap();

        // single-expert path: theta x + bias + up_s (down_s x)
        let w = g.constant(layer.theta.value().clone());
        let b = g.constant(layer.bias.value().clone());
        let base = g.matmul_nt(x, w).unwrap();
        let base = g.add_row(base, b).unwrap();
        let down = g.constant(layer.adapters[subject].down.value().clone());
        let up = g.constant(layer.adapters[subject].up.value().clone());
        let mid = g.matmul_nt(x, down).unwrap();
        let delta = g.matmul_nt(mid, up).unwrap();
        let single = g.add(base, delta).unwrap();

        for (a, b) in g.value(mixed).data().iter().zip(g.value(single).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_is_linear_in_routing_weights() {
        let mut r = rng::stream(8, "layer");
        let mut layer = MoBELinear::new("t", 6, 4, 3, 2, 1.0, &mut r).unwrap();
        layer.enabled = true;
        for a in &layer.adapters {
            a.up.set_value(normal_tensor(&mut r, &[4, 2], 0.5));
        }
        let x_t = batch(5, 6, 9);

        let softmax_rows = |t: &mut Tensor| {
            let s = t.shape()[1];
            let n = t.shape()[0];
            for i in 0..n {
                let row = &mut t.data_mut()[i * s..(i + 1) * s];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        };
        let mut w1 = batch(5, 3, 10);
        let mut w2 = batch(5, 3, 11);
        softmax_rows(&mut w1);
        softmax_rows(&mut w2);
        let lambda = 0.3;
        let mut wmix = Tensor::zeros(&[5, 3]);
        for i in 0..15 {
            wmix.data_mut()[i] = lambda * w1.data()[i] + (1.0 - lambda) * w2.data()[i];
        }

        let eval = |omega_t: &Tensor| -> Vec<f64> {
            let mut g = Graph::new(0);
            let x = g.constant(x_t.clone());
            let omega = g.constant(omega_t.clone());
            let y = layer.forward(&mut g, x, Some(omega), ParamMode::inference()).unwrap();
            g.value(y).data().to_vec()
        };
        let o1 = eval(&w1);
        let o2 = eval(&w2);
        let omix = eval(&wmix);
        for i in 0..omix.len() {
            let expected = lambda * o1[i] + (1.0 - lambda) * o2[i];
            assert!((omix[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_matches_dense_materialization_oracle() {
        let mut r = rng::stream(13, "layer");
        let (in_dim, out_dim, rank, s_count, n) = (5, 3, 2, 4, 6);
        let mut layer = MoBELinear::new("t", in_dim, out_dim, s_count, rank, 1.0, &mut r).unwrap();
        layer.enabled = true;
        for a in &layer.adapters {
            a.up.set_value(normal_tensor(&mut r, &[out_dim, rank], 0.7));
        }
        let x_t = batch(n, in_dim, 14);
        let mut omega_t = batch(n, s_count, 15);
        for i in 0..n {
            let row = &mut omega_t.data_mut()[i * s_count..(i + 1) * s_count];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }

        let mut g = Graph::new(0);
        let x = g.constant(x_t.clone());
        let omega = g.constant(omega_t.clone());
        let y = layer.forward(&mut g, x, Some(omega), ParamMode::inference()).unwrap();
        let layered = g.value(y).data().to_vec();

        // independent loop: densely materialize theta + sum_s w_s up_s down_s
        // per sample, then multiply
        let theta = layer.theta.value().clone();
        let bias = layer.bias.value().clone();
        for i in 0..n {
            let mut dense = vec![0.0; out_dim * in_dim];
            dense.copy_from_slice(theta.data());
            for (s, a) in layer.adapters.iter().enumerate() {
                let w = omega_t.data()[i * s_count + s];
                let down = a.down.value().clone();
                let up = a.up.value().clone();
                for o in 0..out_dim {
                    for c in 0..in_dim {
                        let mut acc = 0.0;
                        for k in 0..rank {
                            acc += up.data()[o * rank + k] * down.data()[k * in_dim + c];
                        }
                        dense[o * in_dim + c] += w * acc;
                    }
                }
            }
            for o in 0..out_dim {
                let mut acc = bias.data()[o];
                for c in 0..in_dim {
                    acc += dense[o * in_dim + c] * x_t.data()[i * in_dim + c];
                }
                let got = layered[i * out_dim + o];
                assert!(
                    (got - acc).abs() < 1e-10,
                    "sample {i} out {o}: {got} vs {acc}"
                );
            }
        }
    }

    #[test]
    fn rejects_routing_off_simplex() {
        let mut r = rng::stream(5, "layer");
        let mut layer = MoBELinear::new("t", 5, 3, 2, 2, 1.0, &mut r).unwrap();
        layer.enabled = true;
        let mut g = Graph::new(0);
        let x = g.constant(batch(2, 5, 1));
        let bad = g.constant(Tensor::from_vec(&[2, 2], vec![0.7, 0.7, 0.5, 0.5]).unwrap());
        assert!(layer.forward(&mut g, x, Some(bad), ParamMode::inference()).is_err());
    }

    #[test]
    fn parameter_groups_form_a_partition() {
        let model = Model::new(tiny_cfg(), 2).unwrap();
        let groups = model.parameter_groups();
        let mut seen = HashSet::new();
        let mut total = 0usize;
        for p in groups.all() {
            assert!(seen.insert(p.key()), "parameter {} in two groups", p.name());
            total += 1;
        }
        // every constructed parameter is in some group: spot-check counts
        let m = model.adapter_layer_count();
        for group in &groups.adapters_by_subject {
            assert_eq!(group.len(), 2 * m);
        }
        assert_eq!(groups.router.len(), 4);
        // shared group: theta+bias per mobe layer + 2 per layer norm
        let mobe_layers = 1 + 2 + 1 + 3 + 2;
        let norms = 1 + 2;
        assert_eq!(groups.backbone_and_heads.len(), 2 * mobe_layers + 2 * norms);
        assert_eq!(total, groups.backbone_and_heads.len() + 3 * 2 * m + 4);
    }

    #[test]
    fn param_report_share_matches_formula() {
        let model = Model::new(tiny_cfg(), 2).unwrap();
        let report = model.param_report();
        let cfg = tiny_cfg();
        // independent computation of rank*(in+out)*S / sum(in*out)
        let mid = cfg.hidden * 8 / 3;
        let dims: Vec<(usize, usize)> = vec![
            (cfg.d_in, cfg.hidden),
            (cfg.hidden, cfg.hidden),
            (cfg.hidden, cfg.hidden),
            (cfg.hidden, cfg.n_classes),
            (cfg.hidden, mid),
            (mid, mid),
            (mid, cfg.embed_dim),
            (cfg.hidden, cfg.hidden),
            (cfg.hidden, cfg.embed_dim),
        ];
        let numer: usize = dims
            .iter()
            .map(|(i, o)| cfg.rank.min(*i).min(*o) * (i + o) * cfg.n_subjects)
            .sum();
        let denom: usize = dims.iter().map(|(i, o)| i * o).sum();
        assert_eq!(report.adapters_total, numer);
        let expected = numer as f64 / denom as f64;
        assert!((report.adapter_share_of_theta - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let mut model = Model::new(tiny_cfg(), 4).unwrap();
        model.set_adapters_enabled(true);
        let x_t = batch(3, 12, 20);
        let run = || {
            let mut g = Graph::new(99);
            let x = g.constant(x_t.clone());
            let omega = model.route(&mut g, x).unwrap();
            let out = model
                .forward(&mut g, x, Some(omega), ParamMode::inference())
                .unwrap();
            g.value(out.retrieval).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn retrieval_output_rows_are_unit_norm() {
        let model = Model::new(tiny_cfg(), 4).unwrap();
        let mut g = Graph::new(0);
        let x = g.constant(batch(4, 12, 21));
        let out = model.forward(&mut g, x, None, ParamMode::inference()).unwrap();
        let t = g.value(out.retrieval);
        for i in 0..4 {
            let norm: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(tiny_cfg(), 6).unwrap();
        model.set_adapters_enabled(true);
        // mutate an adapter so the checkpoint is not all zeros
        let mut r = rng::stream(44, "mutate");
        model.backbone.projector.adapters[1]
            .up
            .set_value(normal_tensor(&mut r, &[16, 4], 0.3));
        model.save_checkpoint(dir.path()).unwrap();
        let loaded = Model::load_checkpoint(dir.path()).unwrap();
        assert!(loaded.adapters_enabled());

        let a = model.parameter_groups().all();
        let b = loaded.parameter_groups().all();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.name(), pb.name());
            assert_eq!(pa.fingerprint(), pb.fingerprint(), "{}", pa.name());
        }
    }

    #[test]
    fn adapters_in_heads_toggle_strips_head_adapters() {
        let cfg = ModelConfig {
            adapters_in_heads: false,
            ..tiny_cfg()
        };
        let model = Model::new(cfg, 2).unwrap();
        assert_eq!(model.adapter_layer_count(), 3); // projector + 2 blocks
        assert!(!model.heads.classifier.has_adapters());
    }
}
