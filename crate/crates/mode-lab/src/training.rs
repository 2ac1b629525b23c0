//! Training regimes over the synthetic multi-task corpus.
//!
//! Four regimes share one engine: per-task adapters trained in isolation
//! (`Separate`), a single shared adapter over pooled tasks (`Joint`), a
//! routed mixture of adapters (`JointMode`), and a two-stage pipeline that
//! first trains experts under a fixed task-to-expert assignment and then
//! unfreezes a freshly initialized router (`TwoStage`).
//!
//! Every step: recompute the per-expert low-rank products, record one graph
//! per example (learned routing consumes an adapter-free first pass),
//! accumulate gradients into one buffer, fold product-slot gradients onto
//! the expert factors, and apply AdamW under a cosine schedule. The frozen
//! parameter set is checksummed every step.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::MagnitudeKind;
use crate::backbone::{BackboneConfig, SequenceBatch};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{AdapterSpec, ExampleOutput, Model, ModelConfig, RoutePlan};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::params::ParamStore;
use crate::synthdata::{MultiTaskDataset, Split};
use crate::tape::{GradBuf, Tape, Val};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Separate,
    Joint,
    JointMode,
    TwoStage,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Separate => "separate",
            Regime::Joint => "joint",
            Regime::JointMode => "joint-mode",
            Regime::TwoStage => "two-stage",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub peak_lr: f64,
    /// Linear warmup steps before cosine decay.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Load-balancing coefficient (learned routing only).
    pub lambda_lb: f64,
    /// Router softmax temperature.
    pub temperature: f64,
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub magnitude: MagnitudeKind,
    /// Detach routing weights in the adapted pass (router then receives no
    /// gradient at all).
    pub stop_router_grad: bool,
    /// Apply the load-balancing penalty to the batch-mean routing weights
    /// instead of per example.
    pub kl_batch_mean: bool,
    pub seeds: Vec<u64>,
    /// Stage-I epochs of the two-stage pipeline.
    pub stage1_epochs: usize,
    /// Epochs of the brief pretext phase that fabricates the "pretrained"
    /// frozen base weights by teaching the encoder to recognize which task
    /// produced a record (labels never enter; 0 disables the phase and
    /// leaves the random initialization as the base).
    pub pretext_epochs: usize,
    /// Seed of the frozen backbone; shared across runs so regimes compare
    /// against the same base model.
    pub backbone_seed: u64,
    /// Restrict training and evaluation to one task (used by `Separate`).
    pub task_filter: Option<usize>,
    /// Where the training dataset lives on disk; echoed into each run's
    /// config snapshot so evaluation can find the same data.
    pub dataset_dir: Option<PathBuf>,
    /// Record the per-step training loss into each seed run (tests only;
    /// not serialized).
    pub log_step_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::JointMode,
            epochs: 4,
            batch_size: 64,
            peak_lr: 1e-3,
            warmup_steps: 0,
            weight_decay: 0.01,
            lambda_lb: 0.01,
            temperature: 0.7,
            n_experts: 10,
            rank: 32,
            alpha: 64.0,
            magnitude: MagnitudeKind::PerColumn,
            stop_router_grad: false,
            kl_batch_mean: false,
            seeds: vec![1, 2, 3],
            stage1_epochs: 2,
            pretext_epochs: 1,
            backbone_seed: 0,
            task_filter: None,
            dataset_dir: None,
            log_step_losses: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.n_experts < 1 {
            return Err(Error::config("n_experts must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be > 0"));
        }
        if self.lambda_lb < 0.0 {
            return Err(Error::config("lambda_lb must be >= 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        if self.regime == Regime::TwoStage && self.stage1_epochs < 1 {
            return Err(Error::config("stage1_epochs must be >= 1"));
        }
        Ok(())
    }
}

/// One epoch's entry in the append-only metrics log. Contains no
/// timestamps so that identical runs produce byte-identical logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_routing_entropy: Option<f64>,
    pub lr_last: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub dev_trajectory: Vec<f64>,
    /// Index into the selectable epochs (argmax dev accuracy, earliest on
    /// ties).
    pub selected_epoch: usize,
    pub selected_dev_accuracy: f64,
    pub test_accuracy: f64,
    pub per_task_test_accuracy: Vec<Option<f64>>,
    /// Live handle for in-process consumers; not serialized, so result
    /// files stay free of absolute paths (and bit-identical across
    /// identically configured runs in different locations).
    #[serde(skip)]
    pub run_dir: Option<PathBuf>,
    #[serde(skip)]
    pub test_outputs: Vec<ExampleOutput>,
    #[serde(skip)]
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub seed_runs: Vec<SeedRun>,
    /// Mean over seeds of the task-averaged test accuracy.
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds divided by sqrt(#seeds).
    pub stderr_accuracy: f64,
}

/// Mean and standard error (sample stddev / sqrt(n)); stderr is 0 for a
/// single value.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 0, "mean of empty slice");
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt() / (n as f64).sqrt())
}

/// How each stage routes examples to experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageRouting {
    /// Router-produced weights from the adapter-free pass.
    Learned,
    /// Fixed one-hot assignment of task t to expert t.
    OneHot,
    /// Single unrouted adapter (weight vector [1]).
    Single,
}

#[derive(Debug, Clone, Copy)]
struct StageSpec {
    epochs: usize,
    routing: StageRouting,
    stage: u8,
    fresh_router: bool,
    freeze_router: bool,
}

fn model_config(tc: &TrainConfig, backbone: &BackboneConfig, n_tasks: usize) -> ModelConfig {
    let routed = matches!(tc.regime, Regime::JointMode | Regime::TwoStage);
    ModelConfig {
        backbone: backbone.clone(),
        adapters: Some(AdapterSpec {
            n_experts: if routed { tc.n_experts } else { 1 },
            rank: tc.rank,
            alpha: tc.alpha,
            magnitude: tc.magnitude,
            routed,
            temperature: tc.temperature,
            stop_router_grad: tc.stop_router_grad,
        }),
        n_tasks,
    }
}

fn make_batch(ds: &MultiTaskDataset, idxs: &[usize]) -> SequenceBatch {
    let mut batch = SequenceBatch {
        features: Vec::with_capacity(idxs.len()),
        task_id: Vec::with_capacity(idxs.len()),
        label: Vec::with_capacity(idxs.len()),
        participant_id: Vec::with_capacity(idxs.len()),
    };
    for &i in idxs {
        let r = &ds.records[i];
        batch.features.push(r.features.clone());
        batch.task_id.push(r.task_id);
        batch.label.push(r.label);
        batch.participant_id.push(r.participant_id);
    }
    batch
}

fn one_hot(e: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; e];
    v[i] = 1.0;
    v
}

/// Tape-free evaluation; `one_hot_routing` overrides the router with the
/// Stage-I task-to-expert assignment.
/// Forward the given records in eval mode; `one_hot_routing` pins each
/// example's mixture weight to its task's expert.
pub fn eval_examples(
    model: &Model,
    store: &ParamStore,
    ds: &MultiTaskDataset,
    indices: &[usize],
    batch_size: usize,
    one_hot_routing: bool,
) -> Result<Vec<ExampleOutput>> {
    let mut outs = Vec::with_capacity(indices.len());
    if !one_hot_routing {
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch = make_batch(ds, chunk);
            outs.extend(model.forward_batch_eval(store, &batch)?);
        }
        return Ok(outs);
    }
    let e = model.n_experts();
    let products = model.compute_products(store);
    let c = model.cfg.backbone.n_classes;
    for &i in indices {
        let r = &ds.records[i];
        let w = one_hot(e, r.task_id);
        let eff = model.effective_site_weights(store, &products, &w)?;
        let refs: Vec<&Tensor> = eff.iter().collect();
        let pooled = model.backbone.forward_plain(store, &r.features, r.task_id, &refs)?;
        let logits = model.head_logits(store, &pooled);
        let mut probs = vec![0.0; c];
        crate::tensor::softmax_rows(&logits, c, 1.0, &mut probs);
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        outs.push(ExampleOutput {
            participant_id: r.participant_id,
            task_id: r.task_id,
            label: r.label,
            confidence: probs[pred],
            correct: pred == r.label,
            pred,
            probs,
            logits,
            routing: Some(w),
        });
    }
    Ok(outs)
}

/// Task-averaged accuracy: mean over tasks (with records) of per-task
/// accuracy. Matches the "Avg." column semantics of a per-task table.
pub fn task_averaged_accuracy(outs: &[ExampleOutput], n_tasks: usize) -> (Vec<Option<f64>>, f64) {
    let mut correct = vec![0usize; n_tasks];
    let mut total = vec![0usize; n_tasks];
    for o in outs {
        total[o.task_id] += 1;
        if o.correct {
            correct[o.task_id] += 1;
        }
    }
    let per_task: Vec<Option<f64>> = (0..n_tasks)
        .map(|t| if total[t] == 0 { None } else { Some(correct[t] as f64 / total[t] as f64) })
        .collect();
    let present: Vec<f64> = per_task.iter().flatten().copied().collect();
    let avg = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per_task, avg)
}

fn mean_entropy_of(outs: &[ExampleOutput]) -> Option<f64> {
    let rows: Vec<&Vec<f64>> = outs.iter().filter_map(|o| o.routing.as_ref()).collect();
    if rows.is_empty() {
        return None;
    }
    let e = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * e);
    for r in &rows {
        data.extend_from_slice(r);
    }
    Some(crate::routing::mean_routing_entropy(&Tensor { shape: vec![rows.len(), e], data }))
}

fn write_routing_csv(path: &Path, outs: &[ExampleOutput]) -> Result<()> {
    let rows: Vec<&ExampleOutput> = outs.iter().filter(|o| o.routing.is_some()).collect();
    if rows.is_empty() {
        return Ok(());
    }
    let e = rows[0].routing.as_ref().unwrap().len();
    let mut out = String::new();
    out.push_str("participant_id,task_id");
    for i in 0..e {
        out.push_str(&format!(",w{}", i));
    }
    out.push('\n');
    for o in rows {
        out.push_str(&format!("{},{}", o.participant_id, o.task_id));
        for w in o.routing.as_ref().unwrap() {
            out.push_str(&format!(",{}", w));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn snapshot(store: &ParamStore) -> Vec<Arc<Tensor>> {
    (0..store.len()).map(|s| store.get(s).clone()).collect()
}

fn restore(store: &mut ParamStore, snap: &[Arc<Tensor>]) -> Result<()> {
    for (slot, v) in snap.iter().enumerate() {
        store.set_value(slot, (**v).clone())?;
    }
    Ok(())
}

struct StageOutcome {
    records: Vec<EpochRecord>,
    best_snapshot: Vec<Arc<Tensor>>,
    best_epoch: usize,
    best_dev: f64,
    step_losses: Vec<f64>,
}

/// Train one stage: its own optimizer, schedule, and dev-selection window.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &Model,
    store: &mut ParamStore,
    tc: &TrainConfig,
    ds: &MultiTaskDataset,
    train_idx: &[usize],
    dev_idx: &[usize],
    stage: StageSpec,
    epoch_rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<StageOutcome> {
    if stage.fresh_router {
        reinit_router(model, store, seed)?;
    }
    if let Some(router) = &model.router {
        store.set_trainable(router.weight, !stage.freeze_router);
        store.set_trainable(router.bias, !stage.freeze_router);
    }
    let frozen0 = store.frozen_checksum();
    let steps_per_epoch = train_idx.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * stage.epochs;
    let sched = CosineSchedule::new(tc.peak_lr, total_steps.max(1), tc.warmup_steps)?;
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: tc.weight_decay, ..AdamWConfig::default() },
        store.len(),
    );
    let aux_base = model.aux_base(store);
    let mut grads = GradBuf::new(model.grad_slots(store));
    let e = model.n_experts();
    let n_tasks = model.cfg.n_tasks;

    let mut records = Vec::with_capacity(stage.epochs);
    let mut best: Option<(f64, usize, Vec<Arc<Tensor>>)> = None;
    let mut step_losses = Vec::new();
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut step = 0usize;

    for epoch in 0..stage.epochs {
        order.shuffle(epoch_rng);
        let mut loss_sum = 0.0;
        let mut n_seen = 0usize;
        let mut lr_last = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let b = chunk.len();
            let inv_b = 1.0 / b as f64;
            let products = model.compute_products(store);
            grads.clear();

            // Adapter-free pass for learned routing, plus the batch-mean
            // KL seed when that variant is active.
            let mut pooled_off: Vec<Tensor> = Vec::new();
            let mut kl_seed_row: Option<Vec<f64>> = None;
            if stage.routing == StageRouting::Learned {
                for &i in chunk {
                    let r = &ds.records[i];
                    pooled_off.push(model.pooled_off(store, &r.features, r.task_id)?);
                }
                if tc.kl_batch_mean && tc.lambda_lb > 0.0 && !tc.stop_router_grad {
                    let router = model.router.as_ref().expect("learned routing has a router");
                    let mut stacked = Tensor::zeros(vec![b, pooled_off[0].cols()]);
                    for (i, p) in pooled_off.iter().enumerate() {
                        let d = p.cols();
                        stacked.data[i * d..(i + 1) * d].copy_from_slice(&p.data);
                    }
                    let routing = router.route(store, &stacked)?;
                    let mut mean_w = vec![0.0; e];
                    for row in routing.weights.data.chunks_exact(e) {
                        for (m, &v) in mean_w.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    for m in mean_w.iter_mut() {
                        *m /= b as f64;
                    }
                    // d/dw[b,i] of KL(mean_w || uniform) = (ln(mean_w_i E)+1)/B
                    let row: Vec<f64> = mean_w
                        .iter()
                        .map(|&m| tc.lambda_lb * ((m * e as f64).ln() + 1.0) * inv_b)
                        .collect();
                    loss_sum += b as f64
                        * tc.lambda_lb
                        * crate::routing::kl_uniform_batch_mean(&routing.weights);
                    kl_seed_row = Some(row);
                }
            }

            let mut batch_loss = 0.0;
            for (k, &i) in chunk.iter().enumerate() {
                let r = &ds.records[i];
                let plan_w;
                let plan = match stage.routing {
                    StageRouting::Learned => RoutePlan::Learned,
                    StageRouting::OneHot => {
                        plan_w = one_hot(e, r.task_id);
                        RoutePlan::Fixed(&plan_w)
                    }
                    StageRouting::Single => {
                        plan_w = vec![1.0];
                        RoutePlan::Fixed(&plan_w)
                    }
                };
                let graph = model.build_example_graph(
                    store,
                    &products,
                    aux_base,
                    &r.features,
                    r.task_id,
                    r.label,
                    pooled_off.get(k),
                    plan,
                    tc.lambda_lb,
                    tc.kl_batch_mean,
                )?;
                batch_loss += graph.tape.value(graph.total).data[0];
                match (&kl_seed_row, graph.w_node) {
                    (Some(row), Some(w)) => graph
                        .tape
                        .backward_seeded(&[(graph.total, vec![inv_b]), (w, row.clone())], &mut grads)?,
                    _ => graph.tape.backward(graph.total, inv_b, &mut grads)?,
                }
            }
            loss_sum += batch_loss;
            n_seen += b;
            if tc.log_step_losses {
                // step loss: batch-mean objective (without batch-mean KL,
                // which is logged into loss_sum separately above)
                step_losses.push(batch_loss * inv_b);
            }

            model.map_product_grads(store, &mut grads, aux_base);
            lr_last = sched.lr(step);
            opt.step(store, &grads, lr_last)?;
            if store.frozen_checksum() != frozen0 {
                return Err(Error::domain("train_step", "frozen parameters changed during update"));
            }
            step += 1;
        }

        let dev_outs =
            eval_examples(model, store, ds, dev_idx, tc.batch_size, stage.routing == StageRouting::OneHot)?;
        let (_, dev_acc) = task_averaged_accuracy(&dev_outs, n_tasks);
        let entropy = mean_entropy_of(&dev_outs);
        records.push(EpochRecord {
            stage: stage.stage,
            epoch,
            train_loss: loss_sum / n_seen.max(1) as f64,
            dev_accuracy: dev_acc,
            dev_routing_entropy: entropy,
            lr_last,
        });
        let improved = match &best {
            None => true,
            Some((acc, _, _)) => dev_acc > *acc,
        };
        if improved {
            best = Some((dev_acc, epoch, snapshot(store)));
        }
    }

    let (best_dev, best_epoch, best_snapshot) = best.expect("at least one epoch");
    Ok(StageOutcome { records, best_snapshot, best_epoch, best_dev, step_losses })
}

/// Overwrite the router parameters with a fresh draw (used at Stage II).
fn reinit_router(model: &Model, store: &mut ParamStore, seed: u64) -> Result<()> {
    let router = model
        .router
        .as_ref()
        .ok_or_else(|| Error::config("router reinitialization requires a routed model"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    use rand_distr::{Distribution, Normal};
    let d = router.d_model;
    let e = router.n_experts;
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    let weight = Tensor { shape: vec![d, e], data: (0..d * e).map(|_| dist.sample(&mut rng)).collect() };
    store.set_value(router.weight, weight)?;
    store.set_value(router.bias, Tensor::zeros(vec![1, e]))?;
    Ok(())
}

/// Train one seed through its stages; returns the seed record plus the
/// model and its best-checkpoint parameter store.
#[allow(clippy::too_many_arguments)]
/// Learning rate of the pretext phase. Deliberately not configurable: the
/// phase fabricates the "pretrained" base model, it is not an experiment
/// variable.
const PRETEXT_LR: f64 = 1e-3;

type PretextValues = Arc<Vec<(usize, Tensor)>>;

fn pretext_cache() -> &'static Mutex<HashMap<String, PretextValues>> {
    static CACHE: OnceLock<Mutex<HashMap<String, PretextValues>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Fabricate "pretrained" weights for the frozen encoder.
///
/// A throwaway linear probe learns to recognize *which task* produced a
/// record from the pooled final hidden state, briefly training the
/// adaptation-site matrices along the way; the probe is then discarded and
/// the trained sites become the frozen base weights. Classification labels
/// never enter this phase. The result is a pure function of the dataset,
/// the backbone seed and the phase length — independent of regime and
/// per-run seed — so every run adapts the same base model (results are
/// cached within the process). Always trained on the full train split,
/// even when the downstream regime restricts itself to one task.
fn pretext_site_values(
    model: &Model,
    store: &ParamStore,
    ds: &MultiTaskDataset,
    tc: &TrainConfig,
) -> Result<PretextValues> {
    let backbone_json = serde_json::to_string(&model.backbone.cfg)
        .map_err(|e| Error::Format(format!("backbone encode: {}", e)))?;
    let key = format!(
        "{}|{}|{}|{}|{}",
        ds.cfg.config_hash(),
        backbone_json,
        tc.backbone_seed,
        tc.pretext_epochs,
        tc.batch_size
    );
    if let Some(hit) = pretext_cache().lock().unwrap().get(&key) {
        return Ok(hit.clone());
    }

    let sites = model.backbone.site_slots().to_vec();
    let mut ps = store.clone();
    for slot in ps.trainable_slots() {
        ps.set_trainable(slot, false);
    }
    for &s in &sites {
        ps.set_trainable(s, true);
    }

    let d_model = model.backbone.cfg.d_model;
    let n_tasks = ds.cfg.n_tasks;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.backbone_seed);
    rng.set_stream(6);
    let dist = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).expect("finite std");
    let pw = Tensor {
        shape: vec![n_tasks, d_model],
        data: (0..n_tasks * d_model).map(|_| dist.sample(&mut rng)).collect(),
    };
    let probe_w = ps.register("pretext.probe.weight", pw, true)?;
    let probe_b = ps.register(
        "pretext.probe.bias",
        Tensor { shape: vec![1, n_tasks], data: vec![0.0; n_tasks] },
        true,
    )?;

    let mut opt = AdamW::new(AdamWConfig::default(), ps.len());
    let mut order = filtered_indices(ds, Split::Train, None);
    if order.is_empty() {
        return Err(Error::config("pretext phase needs a non-empty train split"));
    }
    for _ in 0..tc.pretext_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let mut grads = GradBuf::new(ps.len());
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let r = &ds.records[idx];
                let mut tape = Tape::new();
                let site_vals: Vec<Val> =
                    sites.iter().map(|&s| tape.leaf_shared(ps.get(s).clone(), s)).collect();
                // With a task-embedding backbone, feed a fixed dummy row so
                // the probe cannot read the answer off the input.
                let fed_task = if model.backbone.has_task_embedding() { 0 } else { r.task_id };
                let pooled =
                    model.backbone.forward_tape(&ps, &mut tape, &r.features, fed_task, &site_vals)?;
                let w = tape.leaf_shared(ps.get(probe_w).clone(), probe_w);
                let b = tape.leaf_shared(ps.get(probe_b).clone(), probe_b);
                let logits = tape.matmul_nt(pooled, w)?;
                let logits = tape.add(logits, b)?;
                let loss = tape.cross_entropy(logits, &[r.task_id])?;
                tape.backward(loss, inv, &mut grads)?;
            }
            opt.step(&mut ps, &grads, PRETEXT_LR)?;
        }
    }

    let values: PretextValues =
        Arc::new(sites.iter().map(|&s| (s, (**ps.get(s)).clone())).collect());
    pretext_cache().lock().unwrap().insert(key, values.clone());
    Ok(values)
}

fn train_seed(
    tc: &TrainConfig,
    backbone: &BackboneConfig,
    ds: &MultiTaskDataset,
    train_idx: &[usize],
    dev_idx: &[usize],
    test_idx: &[usize],
    stages: &[StageSpec],
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<(SeedRun, Model, ParamStore)> {
    let mcfg = model_config(tc, backbone, ds.cfg.n_tasks);
    let (model, mut store) = Model::build(&mcfg, tc.backbone_seed, seed)?;
    if tc.pretext_epochs > 0 {
        let base = pretext_site_values(&model, &store, ds, tc)?;
        for (slot, value) in base.iter() {
            store.set_value(*slot, value.clone())?;
        }
        // The magnitudes were initialized from the random weights; rebase
        // them on the fabricated pretrained weights.
        model.refresh_magnitudes(&mut store)?;
    }
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed);
    epoch_rng.set_stream(5);

    let mut all_records: Vec<EpochRecord> = Vec::new();
    let mut final_outcome: Option<StageOutcome> = None;
    let mut stage1_routing_logged = false;
    let mut step_losses = Vec::new();

    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        let snapshot_json = serde_json::json!({
            "train": tc,
            "model": &mcfg,
            "seed": seed,
            "dataset_config_hash": ds.cfg.config_hash(),
        });
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&snapshot_json)
                .map_err(|e| Error::Format(format!("config encode: {}", e)))?,
        )?;
    }

    for stage in stages {
        // Carry the best checkpoint of the previous stage forward.
        if let Some(prev) = &final_outcome {
            restore(&mut store, &prev.best_snapshot)?;
        }
        let outcome =
            run_stage(&model, &mut store, tc, ds, train_idx, dev_idx, *stage, &mut epoch_rng, seed)?;
        all_records.extend(outcome.records.iter().cloned());
        step_losses.extend(outcome.step_losses.iter().cloned());

        // Stage-I routing log of the two-stage pipeline: the exact weights
        // used (one-hot per task) on the dev split.
        if stage.routing == StageRouting::OneHot && !stage1_routing_logged {
            if let Some(dir) = run_dir {
                restore(&mut store, &outcome.best_snapshot)?;
                let outs = eval_examples(&model, &store, ds, dev_idx, tc.batch_size, true)?;
                write_routing_csv(&dir.join("routing_stage1_dev.csv"), &outs)?;
                stage1_routing_logged = true;
            }
        }
        final_outcome = Some(outcome);
    }

    let outcome = final_outcome.expect("at least one stage");
    restore(&mut store, &outcome.best_snapshot)?;

    let one_hot_eval = stages.last().map(|s| s.routing == StageRouting::OneHot).unwrap_or(false);
    let test_outs = eval_examples(&model, &store, ds, test_idx, tc.batch_size, one_hot_eval)?;
    let (per_task, test_acc) = task_averaged_accuracy(&test_outs, ds.cfg.n_tasks);

    if let Some(dir) = run_dir {
        let mut log = String::new();
        for r in &all_records {
            log.push_str(
                &serde_json::to_string(r).map_err(|e| Error::Format(format!("metrics encode: {}", e)))?,
            );
            log.push('\n');
        }
        fs::write(dir.join("metrics.jsonl"), log)?;
        checkpoint::save(&dir.join("best.ckpt"), &model, &store, tc.backbone_seed, seed)?;
        let dev_outs = eval_examples(&model, &store, ds, dev_idx, tc.batch_size, one_hot_eval)?;
        write_routing_csv(&dir.join("routing_dev.csv"), &dev_outs)?;
        write_routing_csv(&dir.join("routing_test.csv"), &test_outs)?;
        println!("run_dir {}", dir.display());
        println!("metrics {}", dir.join("metrics.jsonl").display());
        println!("checkpoint {}", dir.join("best.ckpt").display());
    }

    let seed_run = SeedRun {
        seed,
        dev_trajectory: all_records.iter().map(|r| r.dev_accuracy).collect(),
        selected_epoch: outcome.best_epoch,
        selected_dev_accuracy: outcome.best_dev,
        test_accuracy: test_acc,
        per_task_test_accuracy: per_task,
        run_dir: run_dir.map(|p| p.to_path_buf()),
        test_outputs: test_outs,
        step_losses,
    };

    if let Some(dir) = run_dir {
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&seed_run)
                .map_err(|e| Error::Format(format!("summary encode: {}", e)))?,
        )?;
    }
    Ok((seed_run, model, store))
}

fn stages_for(tc: &TrainConfig) -> Vec<StageSpec> {
    match tc.regime {
        Regime::Separate | Regime::Joint => vec![StageSpec {
            epochs: tc.epochs,
            routing: StageRouting::Single,
            stage: 1,
            fresh_router: false,
            freeze_router: false,
        }],
        Regime::JointMode => vec![StageSpec {
            epochs: tc.epochs,
            routing: StageRouting::Learned,
            stage: 1,
            fresh_router: false,
            freeze_router: false,
        }],
        Regime::TwoStage => vec![
            StageSpec {
                epochs: tc.stage1_epochs,
                routing: StageRouting::OneHot,
                stage: 1,
                fresh_router: false,
                freeze_router: true,
            },
            StageSpec {
                epochs: tc.epochs,
                routing: StageRouting::Learned,
                stage: 2,
                fresh_router: true,
                freeze_router: false,
            },
        ],
    }
}

fn aggregate(label: &str, seed_runs: Vec<SeedRun>) -> RunResult {
    let accs: Vec<f64> = seed_runs.iter().map(|s| s.test_accuracy).collect();
    let (mean, stderr) = mean_and_stderr(&accs);
    RunResult { label: label.to_string(), seed_runs, mean_accuracy: mean, stderr_accuracy: stderr }
}

fn write_result(out_dir: Option<&Path>, result: &RunResult) -> Result<()> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("result.json"),
            serde_json::to_string_pretty(result)
                .map_err(|e| Error::Format(format!("result encode: {}", e)))?,
        )?;
        println!("result {}", dir.join("result.json").display());
    }
    Ok(())
}

fn filtered_indices(ds: &MultiTaskDataset, split: Split, task: Option<usize>) -> Vec<usize> {
    ds.records_in(split)
        .into_iter()
        .filter(|&i| task.map(|t| ds.records[i].task_id == t).unwrap_or(true))
        .collect()
}

/// Train one model per task, each on its own records only.
pub fn train_separate(
    tc: &TrainConfig,
    backbone: &BackboneConfig,
    ds: &MultiTaskDataset,
    out_dir: Option<&Path>,
) -> Result<Vec<RunResult>> {
    let mut tc = tc.clone();
    tc.regime = Regime::Separate;
    tc.validate()?;
    let mut results = Vec::with_capacity(ds.cfg.n_tasks);
    for t in 0..ds.cfg.n_tasks {
        let mut task_tc = tc.clone();
        task_tc.task_filter = Some(t);
        let train_idx = filtered_indices(ds, Split::Train, Some(t));
        let dev_idx = filtered_indices(ds, Split::Dev, Some(t));
        let test_idx = filtered_indices(ds, Split::Test, Some(t));
        if train_idx.is_empty() {
            return Err(Error::config(format!("task {} has an empty train split", t)));
        }
        let label = format!("separate-task{}", t);
        let stages = stages_for(&task_tc);
        let mut seed_runs = Vec::new();
        for &seed in &task_tc.seeds {
            let run_dir = out_dir.map(|d| d.join(&label).join(format!("seed{}", seed)));
            let (run, _, _) = train_seed(
                &task_tc,
                backbone,
                ds,
                &train_idx,
                &dev_idx,
                &test_idx,
                &stages,
                seed,
                run_dir.as_deref(),
            )?;
            seed_runs.push(run);
        }
        let result = aggregate(&label, seed_runs);
        write_result(out_dir.map(|d| d.join(&label)).as_deref(), &result)?;
        results.push(result);
    }
    Ok(results)
}

/// Combine per-task Separate results into one per-seed system accuracy
/// (mean over tasks), aggregated over seeds.
pub fn separate_system_accuracy(results: &[RunResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::config("no separate-task results to aggregate"));
    }
    let n_seeds = results[0].seed_runs.len();
    let mut per_seed = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let accs: Vec<f64> = results
            .iter()
            .map(|r| {
                if r.seed_runs.len() != n_seeds {
                    return Err(Error::config("seed counts differ across tasks"));
                }
                Ok(r.seed_runs[s].test_accuracy)
            })
            .collect::<Result<_>>()?;
        per_seed.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    Ok(mean_and_stderr(&per_seed))
}

/// Train one model on pooled tasks: a single shared adapter, or the routed
/// mixture when `use_mode` is set.
pub fn train_joint(
    tc: &TrainConfig,
    backbone: &BackboneConfig,
    ds: &MultiTaskDataset,
    use_mode: bool,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let mut tc = tc.clone();
    tc.regime = if use_mode { Regime::JointMode } else { Regime::Joint };
    tc.validate()?;
    let train_idx = filtered_indices(ds, Split::Train, None);
    let dev_idx = filtered_indices(ds, Split::Dev, None);
    let test_idx = filtered_indices(ds, Split::Test, None);
    if train_idx.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    let label = tc.regime.label().to_string();
    let stages = stages_for(&tc);
    let mut seed_runs = Vec::new();
    for &seed in &tc.seeds {
        let run_dir = out_dir.map(|d| d.join(format!("seed{}", seed)));
        let (run, _, _) = train_seed(
            &tc,
            backbone,
            ds,
            &train_idx,
            &dev_idx,
            &test_idx,
            &stages,
            seed,
            run_dir.as_deref(),
        )?;
        seed_runs.push(run);
    }
    let result = aggregate(&label, seed_runs);
    write_result(out_dir, &result)?;
    Ok(result)
}

/// Two-stage pipeline: Stage I trains experts under the fixed task-to-
/// expert assignment (router frozen and unused), Stage II reinitializes the
/// router and trains everything under learned routing.
pub fn train_two_stage(
    tc: &TrainConfig,
    backbone: &BackboneConfig,
    ds: &MultiTaskDataset,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let mut tc = tc.clone();
    tc.regime = Regime::TwoStage;
    tc.validate()?;
    if tc.n_experts != ds.cfg.n_tasks {
        return Err(Error::config(format!(
            "two-stage assignment needs n_experts == n_tasks (got E={}, T={})",
            tc.n_experts, ds.cfg.n_tasks
        )));
    }
    let train_idx = filtered_indices(ds, Split::Train, None);
    let dev_idx = filtered_indices(ds, Split::Dev, None);
    let test_idx = filtered_indices(ds, Split::Test, None);
    if train_idx.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    let stages = stages_for(&tc);
    let mut seed_runs = Vec::new();
    for &seed in &tc.seeds {
        let run_dir = out_dir.map(|d| d.join(format!("seed{}", seed)));
        let (run, _, _) = train_seed(
            &tc,
            backbone,
            ds,
            &train_idx,
            &dev_idx,
            &test_idx,
            &stages,
            seed,
            run_dir.as_deref(),
        )?;
        seed_runs.push(run);
    }
    let result = aggregate(tc.regime.label(), seed_runs);
    write_result(out_dir, &result)?;
    Ok(result)
}

/// One row of the expert-count sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_experts: usize,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
}

/// Routed-mixture runs across expert counts; rows sorted by E. `jobs > 1`
/// trains sweep points on that many threads (runs are independent and
/// individually deterministic, so the written artifacts do not depend on
/// the thread count).
pub fn sweep_experts(
    tc: &TrainConfig,
    backbone: &BackboneConfig,
    ds: &MultiTaskDataset,
    e_values: &[usize],
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if e_values.is_empty() {
        return Err(Error::config("expert sweep needs at least one E value"));
    }
    let mut values: Vec<usize> = e_values.to_vec();
    values.sort_unstable();
    values.dedup();
    let run_one = |e: usize| -> Result<SweepRow> {
        let mut etc = tc.clone();
        etc.n_experts = e;
        let sub = out_dir.map(|d| d.join(format!("experts{}", e)));
        let result = train_joint(&etc, backbone, ds, true, sub.as_deref())?;
        Ok(SweepRow {
            n_experts: e,
            mean_accuracy: result.mean_accuracy,
            stderr_accuracy: result.stderr_accuracy,
        })
    };
    let mut rows = Vec::with_capacity(values.len());
    if jobs <= 1 {
        for &e in &values {
            rows.push(run_one(e)?);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<SweepRow>>>> =
            values.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(values.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= values.len() {
                        break;
                    }
                    let row = run_one(values[i]);
                    *slots[i].lock().unwrap() = Some(row);
                });
            }
        });
        for slot in slots {
            rows.push(slot.into_inner().unwrap().expect("worker filled slot")?);
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("n_experts,mean_accuracy,stderr_accuracy\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{}\n", r.n_experts, r.mean_accuracy, r.stderr_accuracy));
        }
        let path = dir.join("sweep_experts.csv");
        fs::write(&path, csv)?;
        println!("sweep_table {}", path.display());
    }
    Ok(rows)
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    /// Mean over seeds of the final-epoch dev routing entropy.
    pub mean_final_entropy: f64,
}

/// Train the routed mixture three ways: as configured, with temperature
/// pinned to 1, and without load balancing.
pub fn ablate(
    tc: &TrainConfig,
    backbone: &BackboneConfig,
    ds: &MultiTaskDataset,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut variants: Vec<(String, TrainConfig)> = Vec::new();
    variants.push(("full".to_string(), tc.clone()));
    let mut no_temp = tc.clone();
    no_temp.temperature = 1.0;
    variants.push(("no-temperature".to_string(), no_temp));
    let mut no_lb = tc.clone();
    no_lb.lambda_lb = 0.0;
    variants.push(("no-load-balancing".to_string(), no_lb));

    let mut rows = Vec::with_capacity(variants.len());
    for (label, vtc) in &variants {
        let sub = out_dir.map(|d| d.join(format!("ablate-{}", label)));
        let result = train_joint(vtc, backbone, ds, true, sub.as_deref())?;
        let mut entropies = Vec::new();
        for run in &result.seed_runs {
            if let Some(dir) = &run.run_dir {
                let log = fs::read_to_string(dir.join("metrics.jsonl"))?;
                if let Some(last) = log.lines().last() {
                    let rec: EpochRecord = serde_json::from_str(last)
                        .map_err(|e| Error::Format(format!("metrics decode: {}", e)))?;
                    if let Some(h) = rec.dev_routing_entropy {
                        entropies.push(h);
                    }
                }
            } else if let Some(h) = mean_entropy_of(&run.test_outputs) {
                entropies.push(h);
            }
        }
        let mean_entropy = if entropies.is_empty() {
            f64::NAN
        } else {
            entropies.iter().sum::<f64>() / entropies.len() as f64
        };
        rows.push(AblationRow {
            label: label.clone(),
            mean_accuracy: result.mean_accuracy,
            stderr_accuracy: result.stderr_accuracy,
            mean_final_entropy: mean_entropy,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("variant,mean_accuracy,stderr_accuracy,mean_final_entropy\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.label, r.mean_accuracy, r.stderr_accuracy, r.mean_final_entropy
            ));
        }
        let path = dir.join("ablation.csv");
        fs::write(&path, csv)?;
        println!("ablation_table {}", path.display());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{self, SynthConfig};

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_classes: 2,
            max_seq_len: 4,
            d_in: 4,
            task_embedding: false,
        }
    }

    fn tiny_dataset() -> MultiTaskDataset {
        let cfg = SynthConfig {
            n_participants: 30,
            n_tasks: 2,
            seq_len: 4,
            d_in: 4,
            snr_schedule: vec![1.0, 2.0],
            ..SynthConfig::default()
        };
        synthdata::generate(&cfg).unwrap()
    }

    fn tiny_tc() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            n_experts: 2,
            rank: 2,
            alpha: 4.0,
            seeds: vec![1],
            stage1_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mean_and_stderr_hand_values() {
        let (m, s) = mean_and_stderr(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        // sample stddev = 1, stderr = 1/sqrt(3)
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        let (m1, s1) = mean_and_stderr(&[5.0]);
        assert_eq!(m1, 5.0);
        assert_eq!(s1, 0.0);
    }

    #[test]
    fn config_validation_errors() {
        let mut tc = tiny_tc();
        tc.epochs = 0;
        assert!(tc.validate().is_err());
        let mut tc = tiny_tc();
        tc.n_experts = 0;
        assert!(tc.validate().is_err());
        let mut tc = tiny_tc();
        tc.seeds.clear();
        assert!(tc.validate().is_err());
        let mut tc = tiny_tc();
        tc.temperature = 0.0;
        assert!(tc.validate().is_err());
    }

    #[test]
    fn joint_mode_smoke_run_is_deterministic() {
        let ds = tiny_dataset();
        let tc = tiny_tc();
        let bb = tiny_backbone();
        let dir = tempfile::tempdir().unwrap();
        let r1 = train_joint(&tc, &bb, &ds, true, Some(&dir.path().join("a"))).unwrap();
        let _r2 = train_joint(&tc, &bb, &ds, true, Some(&dir.path().join("b"))).unwrap();
        assert_eq!(r1.seed_runs.len(), 1);
        assert!(r1.mean_accuracy.is_finite());
        let m1 = fs::read(dir.path().join("a/seed1/metrics.jsonl")).unwrap();
        let m2 = fs::read(dir.path().join("b/seed1/metrics.jsonl")).unwrap();
        assert_eq!(m1, m2, "same config and seed must produce identical metrics logs");
        assert!(dir.path().join("a/seed1/best.ckpt").exists());
        assert!(dir.path().join("a/seed1/routing_dev.csv").exists());
        assert!(dir.path().join("a/seed1/config.json").exists());
    }

    #[test]
    fn two_stage_requires_expert_task_bijection() {
        let ds = tiny_dataset();
        let mut tc = tiny_tc();
        tc.n_experts = 3; // dataset has 2 tasks
        let err = train_two_stage(&tc, &tiny_backbone(), &ds, None);
        assert!(err.is_err());
    }

    #[test]
    fn two_stage_runs_and_logs_one_hot() {
        let ds = tiny_dataset();
        let mut tc = tiny_tc();
        tc.n_experts = 2;
        let dir = tempfile::tempdir().unwrap();
        let r = train_two_stage(&tc, &tiny_backbone(), &ds, Some(dir.path())).unwrap();
        assert!(r.mean_accuracy.is_finite());
        let csv = fs::read_to_string(dir.path().join("seed1/routing_stage1_dev.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let task: usize = fields[1].parse().unwrap();
            let w: Vec<f64> = fields[2..].iter().map(|s| s.parse().unwrap()).collect();
            for (i, &wi) in w.iter().enumerate() {
                assert_eq!(wi, if i == task { 1.0 } else { 0.0 }, "routing must be exactly one-hot");
            }
        }
    }

    #[test]
    fn separate_refuses_empty_task_split() {
        let mut cfg = SynthConfig {
            n_participants: 30,
            n_tasks: 2,
            seq_len: 4,
            d_in: 4,
            snr_schedule: vec![1.0, 2.0],
            ..SynthConfig::default()
        };
        cfg.completion_rate = 1.0;
        let mut ds = synthdata::generate(&cfg).unwrap();
        // remove every train record of task 1
        ds.records.retain(|r| {
            !(r.task_id == 1
                && ds.split_of[r.participant_id] == Split::Train)
        });
        let err = train_separate(&tiny_tc(), &tiny_backbone(), &ds, None);
        assert!(err.is_err());
    }

    #[test]
    fn separate_trains_one_model_per_task() {
        let ds = tiny_dataset();
        let results = train_separate(&tiny_tc(), &tiny_backbone(), &ds, None).unwrap();
        assert_eq!(results.len(), 2);
        for (t, r) in results.iter().enumerate() {
            assert_eq!(r.label, format!("separate-task{}", t));
            // evaluated only on its own task
            for run in &r.seed_runs {
                for (u, acc) in run.per_task_test_accuracy.iter().enumerate() {
                    assert_eq!(acc.is_some(), u == t);
                }
                assert!(run.test_outputs.iter().all(|o| o.task_id == t));
            }
        }
        let (mean, stderr) = separate_system_accuracy(&results).unwrap();
        assert!(mean.is_finite() && stderr.is_finite());
    }

    #[test]
    fn sweep_rows_sorted_and_deduped() {
        let ds = tiny_dataset();
        let mut tc = tiny_tc();
        tc.epochs = 1;
        let rows = sweep_experts(&tc, &tiny_backbone(), &ds, &[2, 1, 2], None, 1).unwrap();
        let es: Vec<usize> = rows.iter().map(|r| r.n_experts).collect();
        assert_eq!(es, vec![1, 2]);
    }
}
