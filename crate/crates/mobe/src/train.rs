//! The two-phase learning schedule.
//!
//! Phase 1 (commonality): the shared backbone and heads train on stratified
//! mixed-subject batches with the task loss plus the weighted relation
//! alignment term; adapters are disabled and the router untrained.
//!
//! Router phase: the global router trains against subject identity, then
//! stays frozen for good.
//!
//! Phase 2 (pattern learning): alternating bi-level meta steps. Each inner
//! loop trains one subject's adapters on that subject's support split with
//! the task loss only, backbone, heads and router frozen. Each outer loop
//! trains backbone and heads on the pooled query set with adapters frozen.
//! Freezing is structural: a frozen group's parameters are inserted into the
//! graph without gradients, and every optimizer owns exactly one group.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::config::{EvalSection, ExperimentConfig, Task, TrainSection};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Param};
use crate::loss;
use crate::metrics::{self, MetricsReport, SubjectMetrics};
use crate::model::{Model, ParamMode, RouterStats};
use crate::optim::AdamW;
use crate::rng;
use crate::synth::{few_shot_subsample, Dataset, Sample};
use crate::tensor::Tensor;

/// One progress-log line; serialized as JSONL.
#[derive(Debug, Clone, Serialize)]
pub struct LogEntry {
    pub phase: &'static str,
    pub step: usize,
    pub epoch: usize,
    pub loss_task: f64,
    pub loss_sra: f64,
    pub loss_total: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub extra: std::collections::BTreeMap<&'static str, f64>,
}

#[derive(Debug, Default, Clone)]
pub struct ProgressLog {
    pub entries: Vec<LogEntry>,
}

impl ProgressLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, entry: LogEntry) {
        self.entries.push(entry);
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|e| Error::Serialization(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Entries of one phase, in order.
    pub fn phase(&self, phase: &str) -> Vec<&LogEntry> {
        self.entries.iter().filter(|e| e.phase == phase).collect()
    }
}

/// Combined fingerprint of a parameter group, for freezing-contract checks.
pub fn group_fingerprint(params: &[Param]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in params {
        for b in p.fingerprint().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// An assembled mini-batch.
pub struct Batch {
    pub voxels: Tensor,
    pub identity: Tensor,
    pub labels: Tensor,
    pub embeddings: Tensor,
}

fn make_batch(data: &Dataset, items: &[(usize, usize)], split_test: bool) -> Batch {
    let n = items.len();
    let d = data.d_roi;
    let c = data.config.n_classes;
    let e = data.config.embed_dim;
    let mut voxels = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n * c);
    let mut embeddings = Vec::with_capacity(n * e);
    let mut subject_ids = Vec::with_capacity(n);
    for &(s, i) in items {
        let sample: &Sample = if split_test {
            &data.test[s][i]
        } else {
            &data.train[s][i]
        };
        voxels.extend_from_slice(&sample.voxels);
        let stim = data.stimulus(sample.stimulus_id);
        labels.extend_from_slice(&stim.labels);
        embeddings.extend_from_slice(&stim.image_embedding);
        subject_ids.push(s);
    }
    Batch {
        voxels: Tensor::from_vec(&[n, d], voxels).expect("shape"),
        identity: Dataset::identity_rows(&subject_ids, data.n_subjects()),
        labels: Tensor::from_vec(&[n, c], labels).expect("shape"),
        embeddings: Tensor::from_vec(&[n, e], embeddings).expect("shape"),
    }
}

fn subjects_in_scope(data: &Dataset, cfg: &TrainSection) -> Vec<usize> {
    match cfg.restrict_to_subject {
        Some(s) => vec![s],
        None => (0..data.n_subjects()).collect(),
    }
}

/// Proportional stratified order: each subject's shuffled split is merged by
/// fractional position, so every batch holds all subjects in proportion.
fn stratified_order(
    data: &Dataset,
    cfg: &TrainSection,
    label: &str,
    epoch: u64,
) -> Vec<(usize, usize)> {
    let subjects = subjects_in_scope(data, cfg);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::new();
    for &s in &subjects {
        let n = data.train[s].len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut r = rng::stream_indexed(cfg.seed, label, epoch * 1009 + s as u64);
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            idx.swap(i, j);
        }
        for (pos, sample) in idx.into_iter().enumerate() {
            keyed.push(((pos as f64 + 0.5) / n as f64, s, sample));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, s, i)| (s, i)).collect()
}

/// Shuffled order over a single subject's training split.
fn subject_order(data: &Dataset, subject: usize, seed: u64, label: &str, epoch: u64) -> Vec<(usize, usize)> {
    let n = data.train[subject].len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream_indexed(seed, label, epoch * 1013 + subject as u64);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    idx.into_iter().map(|i| (subject, i)).collect()
}

/// Full batches only; a split smaller than one batch yields a single partial
/// batch so tiny datasets still train.
fn batch_ranges(total: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    if total == 0 {
        return vec![];
    }
    if total < batch {
        return vec![0..total];
    }
    (0..total / batch).map(|k| k * batch..(k + 1) * batch).collect()
}

struct StepLosses {
    total: NodeId,
    task_value: f64,
    sra_value: f64,
}

/// Assemble the per-batch objective: the task loss, plus the weighted
/// relation-alignment term when enabled.
fn build_objective(
    model: &Model,
    g: &mut Graph,
    batch: &Batch,
    cfg: &TrainSection,
    mode: ParamMode,
    with_sra: bool,
) -> Result<StepLosses> {
    let x = g.constant(batch.voxels.clone());
    let omega = if model.adapters_enabled() {
        Some(model.route(g, x)?)
    } else {
        None
    };
    let repr = model.forward_repr(g, x, omega, mode)?;

    // contrastive losses sum over the batch; the trainer optimizes the
    // per-sample mean so the relation-alignment weight keeps one meaning
    // across batch sizes and tasks
    let n_samples = batch.voxels.shape()[0] as f64;
    let task = match cfg.task {
        Task::Classification => {
            let logits = model.heads.classifier.forward(g, repr, omega, mode)?;
            loss::classification_loss(g, logits, &batch.labels)?
        }
        Task::Retrieval => {
            let hf = model.forward_retrieval_head(g, repr, omega, mode)?;
            let y = g.constant(batch.embeddings.clone());
            let sum = loss::retrieval_loss(g, hf, y, cfg.tau)?;
            g.mul_scalar(sum, 1.0 / n_samples)
        }
        Task::Reconstruction => {
            let hf = model.forward_retrieval_head(g, repr, omega, mode)?;
            let prior = model.forward_prior_head(g, repr, omega, mode)?;
            let y = g.constant(batch.embeddings.clone());
            let mse = loss::mse_loss(g, prior, y)?;
            let retri = loss::retrieval_loss(g, hf, y, cfg.tau)?;
            let retri_mean = g.mul_scalar(retri, 1.0 / n_samples);
            g.add(mse, retri_mean)?
        }
    };
    let task_value = g.value(task).data()[0];

    let alpha = cfg.alpha_resolved();
    if with_sra && alpha > 0.0 {
        let y = g.constant(batch.embeddings.clone());
        let sra = loss::sra_loss(g, repr, y, &batch.identity, loss::SRA_EPSILON)?;
        let sra_value = g.value(sra).data()[0];
        let weighted = g.mul_scalar(sra, alpha);
        let total = g.add(task, weighted)?;
        Ok(StepLosses {
            total,
            task_value,
            sra_value,
        })
    } else {
        Ok(StepLosses {
            total: task,
            task_value,
            sra_value: 0.0,
        })
    }
}

/// Mean task loss over the pooled training data in evaluation mode.
pub fn measure_task_loss(model: &Model, data: &Dataset, cfg: &TrainSection) -> Result<f64> {
    let order = stratified_order(data, cfg, "measure", 0);
    let mut total = 0.0;
    let mut batches = 0usize;
    for range in batch_ranges(order.len(), cfg.batch_size) {
        let batch = make_batch(data, &order[range], false);
        let mut g = Graph::new(0);
        let losses = build_objective(model, &mut g, &batch, cfg, ParamMode::inference(), false)?;
        total += losses.task_value;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::invalid("no training data to measure"));
    }
    Ok(total / batches as f64)
}

fn check_multi_subject_for_sra(data: &Dataset, cfg: &TrainSection) -> Result<()> {
    if cfg.sra && subjects_in_scope(data, cfg).len() < 2 {
        return Err(Error::config(
            "relation alignment needs batches mixing at least two subjects; \
             disable sra for single-subject training",
        ));
    }
    Ok(())
}

/// Phase 1: commonality training of backbone and heads. Adapters stay
/// disabled, the router untrained.
pub fn train_phase1(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainSection,
    log: &mut ProgressLog,
) -> Result<()> {
    check_multi_subject_for_sra(data, cfg)?;
    model.set_adapters_enabled(false);
    let mut opt = AdamW::new(model.parameter_groups().backbone_and_heads, cfg.weight_decay)?;

    let init_loss = measure_task_loss(model, data, cfg)?;
    log.push(LogEntry {
        phase: "phase1-init",
        step: 0,
        epoch: 0,
        loss_task: init_loss,
        loss_sra: 0.0,
        loss_total: init_loss,
        lr: 0.0,
        extra: Default::default(),
    });

    let order_len = stratified_order(data, cfg, "phase1-sampler", 0).len();
    let steps_per_epoch = batch_ranges(order_len, cfg.batch_size).len();
    let total_steps = (cfg.phase1_epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    for epoch in 0..cfg.phase1_epochs {
        let order = stratified_order(data, cfg, "phase1-sampler", epoch as u64);
        let mut task_sum = 0.0;
        let mut sra_sum = 0.0;
        let mut total_sum = 0.0;
        let mut count = 0usize;
        let mut lr = cfg.lr_resolved();
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let batch = make_batch(data, &order[range], false);
            let mut g = Graph::new(rng::derive_indexed(cfg.seed, "phase1-graph", step as u64));
            g.set_training(true);
            let losses =
                build_objective(model, &mut g, &batch, cfg, ParamMode::backbone_only(), cfg.sra)?;
            g.backward(losses.total)?;
            lr = cfg.lr_at(step, total_steps);
            opt.step(&g, lr)?;
            task_sum += losses.task_value;
            sra_sum += losses.sra_value;
            total_sum += g.value(losses.total).data()[0];
            count += 1;
            step += 1;
        }
        let n = count.max(1) as f64;
        log.push(LogEntry {
            phase: "phase1",
            step,
            epoch,
            loss_task: task_sum / n,
            loss_sra: sra_sum / n,
            loss_total: total_sum / n,
            lr,
            extra: Default::default(),
        });
    }
    Ok(())
}

/// Router accuracy and mean top-1 confidence on the held-out test split.
pub fn eval_router(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut conf_sum = 0.0;
    let mut total = 0usize;
    for s in 0..data.n_subjects() {
        let items: Vec<(usize, usize)> = (0..data.test[s].len()).map(|i| (s, i)).collect();
        for range in batch_ranges(items.len(), 256) {
            let batch = make_batch(data, &items[range], true);
            let mut g = Graph::new(0);
            let x = g.constant(batch.voxels);
            let omega = model.route(&mut g, x)?;
            let t = g.value(omega);
            for row_idx in 0..t.shape()[0] {
                let row = t.row(row_idx);
                let (argmax, top) = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .expect("non-empty");
                if argmax == s {
                    correct += 1;
                }
                conf_sum += top;
                total += 1;
            }
        }
    }
    Ok((correct as f64 / total as f64, conf_sum / total as f64))
}

/// Train the global router against subject identity; it stays frozen
/// afterwards. Returns the held-out accuracy/confidence trace.
pub fn train_router(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainSection,
    log: &mut ProgressLog,
) -> Result<RouterStats> {
    if subjects_in_scope(data, cfg).len() < 2 {
        return Err(Error::config(
            "router training is meaningless with a single subject",
        ));
    }
    let mut opt = AdamW::new(model.parameter_groups().router, cfg.weight_decay)?;
    let mut step = 0usize;
    let mut stats = RouterStats {
        test_accuracy: 0.0,
        mean_top1_confidence: 0.0,
        epochs_run: 0,
    };
    for epoch in 0..cfg.router_epochs {
        let order = stratified_order(data, cfg, "router-sampler", epoch as u64);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let batch = make_batch(data, &order[range], false);
            let mut g = Graph::new(rng::derive_indexed(cfg.seed, "router-graph", step as u64));
            g.set_training(true);
            let x = g.constant(batch.voxels);
            let logits = model.router_logits(&mut g, x, true)?;
            let l = loss::router_loss(&mut g, logits, &batch.identity)?;
            g.backward(l)?;
            opt.step(&g, cfg.router_lr)?;
            loss_sum += g.value(l).data()[0];
            count += 1;
            step += 1;
        }
        let (acc, conf) = eval_router(model, data)?;
        stats = RouterStats {
            test_accuracy: acc,
            mean_top1_confidence: conf,
            epochs_run: epoch + 1,
        };
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("router_test_acc", acc);
        extra.insert("router_mean_conf", conf);
        log.push(LogEntry {
            phase: "router",
            step,
            epoch,
            loss_task: loss_sum / count.max(1) as f64,
            loss_sra: 0.0,
            loss_total: loss_sum / count.max(1) as f64,
            lr: cfg.router_lr,
            extra,
        });
    }
    Ok(stats)
}

/// Optimizer state for the meta phase: one per subject over its adapters,
/// one over backbone and heads. Moments persist across meta steps.
pub struct MetaOptimizers {
    pub subject: Vec<AdamW>,
    pub backbone: AdamW,
}

pub fn meta_optimizers(model: &Model, cfg: &TrainSection) -> Result<MetaOptimizers> {
    let groups = model.parameter_groups();
    let subject = groups
        .adapters_by_subject
        .into_iter()
        .map(|g| AdamW::new(g, cfg.weight_decay))
        .collect::<Result<Vec<_>>>()?;
    let backbone = AdamW::new(groups.backbone_and_heads, cfg.weight_decay)?;
    Ok(MetaOptimizers { subject, backbone })
}

/// Inner loops: subject by subject, each training its own adapters on its
/// support split with the task loss only; backbone, heads and router frozen.
pub fn meta_inner_loop(
    model: &Model,
    data: &Dataset,
    cfg: &TrainSection,
    opts: &mut MetaOptimizers,
    meta_step: usize,
) -> Result<()> {
    for s in 0..data.n_subjects() {
        let mut step = 0usize;
        for epoch in 0..cfg.support_epochs {
            let order = subject_order(
                data,
                s,
                cfg.seed,
                "meta-support",
                (meta_step * cfg.support_epochs + epoch) as u64,
            );
            for range in batch_ranges(order.len(), cfg.batch_size) {
                let batch = make_batch(data, &order[range], false);
                let mut g = Graph::new(rng::derive_indexed(
                    cfg.seed,
                    "meta-support-graph",
                    (meta_step * data.n_subjects() + s) as u64 * 100_000 + step as u64,
                ));
                g.set_training(true);
                let losses = build_objective(
                    model,
                    &mut g,
                    &batch,
                    cfg,
                    ParamMode::adapters_only(s),
                    false,
                )?;
                g.backward(losses.total)?;
                opts.subject[s].step(&g, cfg.meta_adapter_lr())?;
                step += 1;
            }
        }
    }
    Ok(())
}

/// Outer loop: backbone and heads train on the pooled query set with the task
/// loss plus relation alignment; all adapters frozen.
pub fn meta_outer_loop(
    model: &Model,
    data: &Dataset,
    cfg: &TrainSection,
    opts: &mut MetaOptimizers,
    meta_step: usize,
    log: &mut ProgressLog,
) -> Result<()> {
    let mut step = 0usize;
    for epoch in 0..cfg.query_epochs {
        let order = stratified_order(
            data,
            cfg,
            "meta-query",
            (meta_step * cfg.query_epochs + epoch) as u64,
        );
        let mut task_sum = 0.0;
        let mut sra_sum = 0.0;
        let mut count = 0usize;
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let batch = make_batch(data, &order[range], false);
            let mut g = Graph::new(rng::derive_indexed(
                cfg.seed,
                "meta-query-graph",
                meta_step as u64 * 100_000 + step as u64,
            ));
            g.set_training(true);
            let losses =
                build_objective(model, &mut g, &batch, cfg, ParamMode::backbone_only(), cfg.sra)?;
            g.backward(losses.total)?;
            opts.backbone.step(&g, cfg.meta_backbone_lr())?;
            task_sum += losses.task_value;
            sra_sum += losses.sra_value;
            count += 1;
            step += 1;
        }
        let n = count.max(1) as f64;
        log.push(LogEntry {
            phase: "meta-outer",
            step: meta_step,
            epoch,
            loss_task: task_sum / n,
            loss_sra: sra_sum / n,
            loss_total: (task_sum + cfg.alpha_resolved() * sra_sum) / n,
            lr: cfg.meta_backbone_lr(),
            extra: Default::default(),
        });
    }
    Ok(())
}

/// One alternating meta step: adapters on support sets, then backbone on the
/// query set, then the query-set task loss is measured and logged.
pub fn run_meta_step(
    model: &Model,
    data: &Dataset,
    cfg: &TrainSection,
    opts: &mut MetaOptimizers,
    meta_step: usize,
    log: &mut ProgressLog,
) -> Result<()> {
    if !cfg.mobe {
        return Err(Error::config(
            "meta steps need the adapter mixture; nothing to alternate with mobe=false",
        ));
    }
    if !model.adapters_enabled() {
        return Err(Error::config(
            "meta steps need adapters enabled on the model",
        ));
    }
    meta_inner_loop(model, data, cfg, opts, meta_step)?;
    meta_outer_loop(model, data, cfg, opts, meta_step, log)?;
    let query_loss = measure_task_loss(model, data, cfg)?;
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("query_task_loss", query_loss);
    log.push(LogEntry {
        phase: "meta",
        step: meta_step,
        epoch: 0,
        loss_task: query_loss,
        loss_sra: 0.0,
        loss_total: query_loss,
        lr: cfg.meta_backbone_lr(),
        extra,
    });
    Ok(())
}

/// Evaluate a trained model on every subject's test split.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    eval_cfg: &EvalSection,
    seed: u64,
) -> Result<Vec<SubjectMetrics>> {
    let mut out = Vec::with_capacity(data.n_subjects());
    for s in 0..data.n_subjects() {
        let n = data.test[s].len();
        let c = data.config.n_classes;
        let e = data.config.embed_dim;
        let mut logits = Vec::with_capacity(n * c);
        let mut hf = Vec::with_capacity(n * e);
        let mut labels = Vec::with_capacity(n * c);
        let mut y = Vec::with_capacity(n * e);
        let items: Vec<(usize, usize)> = (0..n).map(|i| (s, i)).collect();
        for range in batch_ranges(n, eval_cfg.batch_size) {
            let batch = make_batch(data, &items[range], true);
            let mut g = Graph::new(0);
            let x = g.constant(batch.voxels);
            let omega = if model.adapters_enabled() {
                Some(model.route(&mut g, x)?)
            } else {
                None
            };
            let repr = model.forward_repr(&mut g, x, omega, ParamMode::inference())?;
            let cls = model
                .heads
                .classifier
                .forward(&mut g, repr, omega, ParamMode::inference())?;
            let emb = model.forward_retrieval_head(&mut g, repr, omega, ParamMode::inference())?;
            logits.extend_from_slice(g.value(cls).data());
            hf.extend_from_slice(g.value(emb).data());
            labels.extend_from_slice(batch.labels.data());
            y.extend_from_slice(batch.embeddings.data());
        }
        let logits = Tensor::from_vec(&[n, c], logits)?;
        let labels = Tensor::from_vec(&[n, c], labels)?;
        let hf = Tensor::from_vec(&[n, e], hf)?;
        let y = Tensor::from_vec(&[n, e], y)?;

        let map = metrics::mean_average_precision(&logits, &labels)?.value;
        let auc = metrics::roc_auc(&logits, &labels)?.value;
        let hamming = metrics::hamming_distance(&logits, &labels)?;
        let pool = eval_cfg.pool_resolved(n);
        let image_retrieval = metrics::retrieval_accuracy(
            &hf,
            &y,
            pool,
            eval_cfg.repeats,
            rng::derive_indexed(seed, "eval-image", s as u64),
        )?;
        let fmri_retrieval = metrics::retrieval_accuracy(
            &y,
            &hf,
            pool,
            eval_cfg.repeats,
            rng::derive_indexed(seed, "eval-fmri", s as u64),
        )?;
        out.push(SubjectMetrics {
            map,
            auc,
            hamming,
            image_retrieval,
            fmri_retrieval,
        });
    }
    Ok(out)
}

/// Everything a finished run produces.
pub struct RunOutput {
    pub model: Model,
    pub report: MetricsReport,
    pub router_stats: Option<RouterStats>,
    pub log: ProgressLog,
}

/// Execute the full pipeline (phase 1, router, meta steps as configured),
/// evaluate on the shared test split, and persist artifacts when an output
/// directory is given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let train_cfg = &cfg.train;

    let working = match (train_cfg.few_shot_subject, train_cfg.few_shot_ratio) {
        (Some(s), Some(r)) => few_shot_subsample(data, s, r, train_cfg.seed)?,
        _ => data.clone(),
    };

    let model_cfg = cfg.model.resolve(&working);
    let mut model = Model::new(model_cfg, rng::derive(train_cfg.seed, "model-seed"))?;
    let mut log = ProgressLog::new();

    train_phase1(&mut model, &working, train_cfg, &mut log)?;
    if let Some(dir) = out_dir {
        model.save_checkpoint(dir.join("checkpoint-phase1"))?;
    }

    let mut router_stats = None;
    if train_cfg.mobe {
        router_stats = Some(train_router(&mut model, &working, train_cfg, &mut log)?);
        model.set_adapters_enabled(true);
        let mut opts = meta_optimizers(&model, train_cfg)?;
        for step in 0..train_cfg.meta_steps {
            run_meta_step(&model, &working, train_cfg, &mut opts, step, &mut log)?;
        }
    }

    let per_subject = evaluate(&model, &working, &cfg.eval, train_cfg.seed)?;
    let report = MetricsReport::new(
        train_cfg.combo_label(),
        train_cfg.seed,
        cfg.config_hash(),
        working.content_hash(),
        per_subject,
        t0.elapsed().as_secs_f64(),
    );

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save_checkpoint(dir.join("checkpoint-final"))?;
        log.write_jsonl(dir.join("progress.jsonl"))?;
        let report_path = dir.join("report.json");
        fs::write(&report_path, report.to_json_pretty()?).map_err(|e| Error::io(&report_path, e))?;
        let csv_path = dir.join("report.csv");
        let mut csv = String::from(MetricsReport::CSV_HEADER);
        csv.push('\n');
        for row in report.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    }

    Ok(RunOutput {
        model,
        report,
        router_stats,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_data(seed: u64) -> Dataset {
        let cfg = SynthConfig {
            n_subjects: 2,
            latent_dim: 8,
            embed_dim: 12,
            n_classes: 4,
            template_size: 24,
            train_per_subject: 40,
            test_shared: 12,
            noise_sigma: 0.05,
            response_gain: 3.0,
            map_jitter: 0.3,
            misalign_keep_frac: None,
        };
        generate_dataset(&cfg, seed).unwrap()
    }

    fn tiny_experiment() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data = SynthConfig {
            n_subjects: 2,
            latent_dim: 8,
            embed_dim: 12,
            n_classes: 4,
            template_size: 24,
            train_per_subject: 40,
            test_shared: 12,
            noise_sigma: 0.05,
            response_gain: 3.0,
            map_jitter: 0.3,
            misalign_keep_frac: None,
        };
        cfg.model.hidden = 16;
        cfg.model.n_blocks = 1;
        cfg.model.rank = 2;
        cfg.model.router_hidden = 16;
        cfg.train.phase1_epochs = 2;
        cfg.train.router_epochs = 2;
        cfg.train.meta_steps = 1;
        cfg.train.support_epochs = 1;
        cfg.train.query_epochs = 1;
        cfg.train.batch_size = 16;
        cfg.eval.repeats = 3;
        cfg
    }

    #[test]
    fn stratified_batches_hold_subjects_in_proportion() {
        let data = tiny_data(1);
        let cfg = TrainSection {
            batch_size: 16,
            ..Default::default()
        };
        let order = stratified_order(&data, &cfg, "t", 0);
        assert_eq!(order.len(), 80);
        for range in batch_ranges(order.len(), 16) {
            let counts = order[range].iter().filter(|(s, _)| *s == 0).count();
            assert_eq!(counts, 8, "equal subjects must split batches evenly");
        }
    }

    #[test]
    fn phase1_rejects_sra_on_single_subject() {
        let data = tiny_data(2);
        let cfg = TrainSection {
            restrict_to_subject: Some(0),
            sra: true,
            ..Default::default()
        };
        let model_cfg = crate::model::ModelConfig::desk_default(data.d_roi, 2, 4, 12);
        let mut model = Model::new(model_cfg, 0).unwrap();
        let mut log = ProgressLog::new();
        assert!(train_phase1(&mut model, &data, &cfg, &mut log).is_err());
    }

    #[test]
    fn router_rejects_single_subject() {
        let data = tiny_data(2);
        let cfg = TrainSection {
            restrict_to_subject: Some(0),
            sra: false,
            mobe: false,
            ..Default::default()
        };
        let model_cfg = crate::model::ModelConfig::desk_default(data.d_roi, 2, 4, 12);
        let mut model = Model::new(model_cfg, 0).unwrap();
        let mut log = ProgressLog::new();
        assert!(train_router(&mut model, &data, &cfg, &mut log).is_err());
    }

    #[test]
    fn meta_step_rejected_without_mobe() {
        let data = tiny_data(3);
        let exp = tiny_experiment();
        let model_cfg = exp.model.resolve(&data);
        let model = Model::new(model_cfg, 0).unwrap();
        let cfg = TrainSection {
            mobe: false,
            ..exp.train.clone()
        };
        let mut opts = meta_optimizers(&model, &cfg).unwrap();
        let mut log = ProgressLog::new();
        assert!(run_meta_step(&model, &data, &cfg, &mut opts, 0, &mut log).is_err());
    }

    #[test]
    fn zero_epoch_meta_step_changes_nothing() {
        let data = tiny_data(4);
        let exp = tiny_experiment();
        let model_cfg = exp.model.resolve(&data);
        let mut model = Model::new(model_cfg, 0).unwrap();
        model.set_adapters_enabled(true);
        let cfg = TrainSection {
            support_epochs: 0,
            query_epochs: 0,
            ..exp.train.clone()
        };
        let mut opts = meta_optimizers(&model, &cfg).unwrap();
        let groups = model.parameter_groups();
        let before = group_fingerprint(&groups.all());
        let mut log = ProgressLog::new();
        run_meta_step(&model, &data, &cfg, &mut opts, 0, &mut log).unwrap();
        assert_eq!(before, group_fingerprint(&groups.all()));
    }

    #[test]
    fn inner_loop_freezes_backbone_outer_freezes_adapters() {
        let data = tiny_data(5);
        let exp = tiny_experiment();
        let model_cfg = exp.model.resolve(&data);
        let mut model = Model::new(model_cfg, 0).unwrap();
        model.set_adapters_enabled(true);
        let cfg = exp.train.clone();
        let mut opts = meta_optimizers(&model, &cfg).unwrap();
        let groups = model.parameter_groups();

        let backbone_before = group_fingerprint(&groups.backbone_and_heads);
        let router_before = group_fingerprint(&groups.router);
        let adapters_before: Vec<u64> = groups
            .adapters_by_subject
            .iter()
            .map(|g| group_fingerprint(g))
            .collect();

        meta_inner_loop(&model, &data, &cfg, &mut opts, 0).unwrap();
        assert_eq!(backbone_before, group_fingerprint(&groups.backbone_and_heads));
        assert_eq!(router_before, group_fingerprint(&groups.router));
        for (s, before) in adapters_before.iter().enumerate() {
            assert_ne!(
                *before,
                group_fingerprint(&groups.adapters_by_subject[s]),
                "subject {s} adapters must train in the inner loop"
            );
        }

        let adapters_mid: Vec<u64> = groups
            .adapters_by_subject
            .iter()
            .map(|g| group_fingerprint(g))
            .collect();
        let mut log = ProgressLog::new();
        meta_outer_loop(&model, &data, &cfg, &mut opts, 0, &mut log).unwrap();
        assert_ne!(backbone_before, group_fingerprint(&groups.backbone_and_heads));
        assert_eq!(router_before, group_fingerprint(&groups.router));
        for (s, mid) in adapters_mid.iter().enumerate() {
            assert_eq!(*mid, group_fingerprint(&groups.adapters_by_subject[s]));
        }
    }

    #[test]
    fn vanilla_run_never_touches_adapters_or_grams() {
        let data = tiny_data(6);
        let mut exp = tiny_experiment();
        exp.train.mobe = false;
        exp.train.sra = false;
        counters::reset();
        let out = run_experiment(&exp, &data, None).unwrap();
        assert_eq!(counters::adapter_applications(), 0);
        assert_eq!(counters::gram_computations(), 0);
        assert_eq!(out.report.label, "vanilla-multi");
        assert!(out.router_stats.is_none());
    }

    #[test]
    fn full_run_is_deterministic() {
        let data = tiny_data(7);
        let exp = tiny_experiment();
        let a = run_experiment(&exp, &data, None).unwrap();
        let b = run_experiment(&exp, &data, None).unwrap();
        assert_eq!(
            a.report.determinism_digest(),
            b.report.determinism_digest()
        );
        let fa = group_fingerprint(&a.model.parameter_groups().all());
        let fb = group_fingerprint(&b.model.parameter_groups().all());
        assert_eq!(fa, fb);
        // and the logs agree entry by entry
        assert_eq!(a.log.entries.len(), b.log.entries.len());
        for (x, y) in a.log.entries.iter().zip(&b.log.entries) {
            assert_eq!(x.loss_total, y.loss_total);
            assert_eq!(x.lr, y.lr);
        }
    }

    #[test]
    fn alpha_zero_reduces_to_pure_task_training() {
        let data = tiny_data(8);
        let mut exp = tiny_experiment();
        exp.train.alpha = Some(0.0);
        exp.train.mobe = false;
        let model_cfg = exp.model.resolve(&data);
        let mut model = Model::new(model_cfg, 0).unwrap();
        let mut log = ProgressLog::new();
        train_phase1(&mut model, &data, &exp.train, &mut log).unwrap();
        for e in log.phase("phase1") {
            assert_eq!(e.loss_sra, 0.0);
            assert_eq!(e.loss_task, e.loss_total);
        }
    }

    #[test]
    fn run_experiment_persists_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(9);
        let exp = tiny_experiment();
        let out = run_experiment(&exp, &data, Some(dir.path())).unwrap();
        assert!(dir.path().join("checkpoint-phase1/index.json").exists());
        assert!(dir.path().join("checkpoint-final/index.json").exists());
        assert!(dir.path().join("progress.jsonl").exists());
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("report.csv").exists());

        // the persisted report parses and matches the returned one
        let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.determinism_digest(), out.report.determinism_digest());

        // the final checkpoint reloads into an identical model
        let loaded = Model::load_checkpoint(dir.path().join("checkpoint-final")).unwrap();
        assert_eq!(
            group_fingerprint(&loaded.parameter_groups().all()),
            group_fingerprint(&out.model.parameter_groups().all())
        );
    }

    #[test]
    fn lr_schedule_is_reproducible_from_config() {
        let data = tiny_data(10);
        let mut exp = tiny_experiment();
        exp.train.task = Task::Classification;
        exp.train.phase1_epochs = 3;
        exp.train.mobe = false;
        exp.train.sra = false;
        let out = run_experiment(&exp, &data, None).unwrap();
        let phase1 = out.log.phase("phase1");
        let steps_per_epoch = 80 / exp.train.batch_size;
        let total = 3 * steps_per_epoch;
        for (epoch, entry) in phase1.iter().enumerate() {
            let last_step_of_epoch = (epoch + 1) * steps_per_epoch - 1;
            let expected = exp.train.lr_at(last_step_of_epoch, total);
            assert!(
                (entry.lr - expected).abs() < 1e-12,
                "epoch {epoch}: {} vs {expected}",
                entry.lr
            );
        }
    }
}
