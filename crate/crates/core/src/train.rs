//! Mini-batch training with the same frame-parallel front part as inference.
//!
//! Each sequence's forward pass is split at the frame-mixing boundary. The
//! per-frame front graphs are built (in parallel) and kept; the serial back
//! graph computes the loss, and its backward pass yields both the head
//! gradients and the upstream gradient of every frame's boundary vector.
//! Seeding each retained front graph with its boundary gradient finishes the
//! chain rule. Gradients are then accumulated in fixed ascending
//! (sequence, frame) order, so training is deterministic for any worker
//! count.

use crate::data::augment::{augment_sequence, AugmentConfig};
use crate::data::SequenceRecord;
use crate::geom::PointCloudSequence;
use crate::model::{self, ModelConfig, ModelError};
use crate::runtime::{self, ExecutionPlan, RuntimeError};
use crate::tensor::{
    accumulate_grads, adam_step, AdamState, GradMap, Graph, NodeId, ParameterStore, Tensor,
    TensorError,
};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in batch {batch} (epoch {epoch})")]
    NanLoss { epoch: u32, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training set is empty")]
    EmptyDataset,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_period: u32,
    pub workers: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 16,
            base_lr: 0.001,
            lr_decay: 0.5,
            lr_decay_period: 10,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 7,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

/// One retained front part: the graph, its boundary node, and the boundary
/// value handed to the back graph.
struct FrontPart {
    graph: Graph,
    boundary: NodeId,
    value: Tensor,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward and backward for one mini-batch; returns (mean loss, correct
/// predictions) and sums scaled gradients into the optimizer step.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    batch: &[(usize, &SequenceRecord)],
    params: &ParameterStore,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    epoch: u32,
    batch_index: usize,
    adam: &mut AdamState,
    store: &mut ParameterStore,
) -> Result<(f64, usize), TrainError> {
    let frames = cfg.frames;
    let dv = cfg.displacement_table()?;

    // Augment per sequence, seeded by (seed, epoch, dataset index) so runs
    // replay exactly.
    let sequences: Vec<PointCloudSequence> = batch
        .iter()
        .map(|(dataset_index, record)| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add(((epoch as u64) << 32) ^ (*dataset_index as u64 * 97)),
            );
            augment_sequence(&record.sequence, &opts.augment, &mut rng)
        })
        .collect();

    // Phase 1: every (sequence, frame) front part in parallel. The graphs
    // are kept for phase 3; each lives in its own Mutex so the second
    // parallel phase can mutate exactly its own slot.
    let fronts: Vec<Mutex<FrontPart>> =
        runtime::run_slotted(batch.len() * frames, opts.workers, |i| {
            let (s, t) = (i / frames, i % frames);
            let mut graph = Graph::new();
            let boundary = model::build_frame_front(
                &mut graph,
                params,
                cfg,
                &sequences[s].frames[t].points,
                dv.as_ref(),
                t,
            )?;
            let value = graph.value(boundary).clone();
            Ok::<_, ModelError>(Mutex::new(FrontPart {
                graph,
                boundary,
                value,
            }))
        })?;

    // Phase 2: serial back parts; collect loss, prediction, head gradients,
    // and the boundary seeds for phase 3.
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut back_grads: Vec<GradMap> = Vec::with_capacity(batch.len());
    let mut seeds: Vec<Vec<Tensor>> = Vec::with_capacity(batch.len());
    for (s, (_, record)) in batch.iter().enumerate() {
        let mut graph = Graph::new();
        let boundary_nodes: Vec<NodeId> = (0..frames)
            .map(|t| {
                let value = fronts[s * frames + t]
                    .lock()
                    .expect("front slot")
                    .value
                    .clone();
                graph.constant(value)
            })
            .collect();
        let logits = model::build_back(&mut graph, params, cfg, &boundary_nodes)?;
        let loss = graph
            .softmax_cross_entropy(logits, record.label)
            .map_err(TrainError::Tensor)?;
        let loss_value = graph.value(loss).item();
        if !loss_value.is_finite() {
            return Err(TrainError::NanLoss {
                epoch,
                batch: batch_index,
            });
        }
        loss_sum += loss_value;
        if argmax(graph.value(logits).data()) == record.label {
            correct += 1;
        }
        graph.backward(loss).map_err(TrainError::Tensor)?;
        back_grads.push(graph.param_grads());
        seeds.push(
            boundary_nodes
                .iter()
                .map(|&b| {
                    graph
                        .grad(b)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(1, cfg.hyperpoint_dim()))
                })
                .collect(),
        );
    }

    // Phase 3: seeded backward through every kept front graph, in parallel.
    let front_grads: Vec<GradMap> = runtime::run_slotted(batch.len() * frames, opts.workers, |i| {
        let (s, t) = (i / frames, i % frames);
        let mut front = fronts[i].lock().expect("front slot");
        let boundary = front.boundary;
        let seed = seeds[s][t].clone();
        front
            .graph
            .backward_seeded(boundary, seed)
            .map(|()| front.graph.param_grads())
    })
    .map_err(TrainError::Tensor)?;

    // Fixed accumulation order: per sequence, head gradients first, then the
    // frame gradients in ascending t.
    let mut total = GradMap::new();
    for s in 0..batch.len() {
        accumulate_grads(&mut total, &back_grads[s])?;
        for t in 0..frames {
            accumulate_grads(&mut total, &front_grads[s * frames + t])?;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in total.values_mut() {
        g.scale_by(scale);
    }
    // Parameters untouched by any graph in this batch get zero gradients.
    for (name, value) in store.iter() {
        total
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
    }

    adam_step(store, &total, adam, epoch)?;
    Ok((loss_sum, correct))
}

/// One pass over the training set: shuffled mini-batches, one Adam step per
/// batch. Returns (mean loss, accuracy) over the pass.
pub fn train_epoch(
    records: &[SequenceRecord],
    store: &mut ParameterStore,
    adam: &mut AdamState,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    epoch: u32,
) -> Result<(f64, f64), TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((epoch as u64) << 20));
    order.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (batch_index, chunk) in order.chunks(opts.batch_size.max(1)).enumerate() {
        let batch: Vec<(usize, &SequenceRecord)> =
            chunk.iter().map(|&i| (i, &records[i])).collect();
        let snapshot = store.clone();
        let (l, c) = batch_step(
            &batch,
            &snapshot,
            cfg,
            opts,
            epoch,
            batch_index,
            adam,
            store,
        )?;
        loss_sum += l;
        correct += c;
    }
    Ok((
        loss_sum / records.len() as f64,
        correct as f64 / records.len() as f64,
    ))
}

/// Classification accuracy of the current parameters over a record list.
pub fn evaluate(
    records: &[SequenceRecord],
    store: &ParameterStore,
    cfg: &ModelConfig,
    workers: usize,
) -> Result<f64, TrainError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let snapshot = store.snapshot();
    let plan = ExecutionPlan::new(workers);
    let mut correct = 0usize;
    for record in records {
        let logits = runtime::infer_sequence(&record.sequence, &snapshot, cfg, &plan)?;
        if argmax(&logits) == record.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Full training run; `on_epoch` sees every epoch's metrics (for logging).
pub fn train(
    train_records: &[SequenceRecord],
    test_records: &[SequenceRecord],
    cfg: &ModelConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ParameterStore, Vec<EpochMetrics>), TrainError> {
    let mut store = model::init_parameters(cfg, opts.seed);
    let mut adam = AdamState::new(opts.base_lr).with_schedule(opts.lr_decay, opts.lr_decay_period);
    let mut history = Vec::with_capacity(opts.epochs as usize);
    for epoch in 0..opts.epochs {
        let (train_loss, train_acc) =
            train_epoch(train_records, &mut store, &mut adam, cfg, opts, epoch)?;
        let eval_acc = evaluate(test_records, &store, cfg, opts.workers)?;
        let metrics = EpochMetrics {
            epoch,
            lr: adam.effective_lr(epoch),
            train_loss,
            train_acc,
            eval_acc,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((store, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, SynthConfig};
    use crate::model::init_parameters;

    fn tiny_records(per_class: usize) -> (Vec<SequenceRecord>, Vec<SequenceRecord>, ModelConfig) {
        let mut cfg = ModelConfig::tiny();
        cfg.frames = 4;
        cfg.classes = 4;
        cfg.embed.points_per_frame = 32;
        let synth = SynthConfig {
            frames: 4,
            points_per_frame: 32,
            train_per_class: per_class,
            test_per_class: 1,
            ..SynthConfig::default()
        };
        let (train, test) = generate_dataset(&synth);
        (train, test, cfg)
    }

    #[test]
    fn batch_count_drives_optimizer_steps() {
        let (train, _, cfg) = tiny_records(1); // 4 sequences, one per class
        let mut store = init_parameters(&cfg, 0);
        let mut adam = AdamState::new(1e-3);
        let opts = TrainOptions {
            batch_size: 2,
            workers: 2,
            augment: AugmentConfig::disabled(),
            ..TrainOptions::default()
        };
        train_epoch(&train, &mut store, &mut adam, &cfg, &opts, 0).unwrap();
        assert_eq!(adam.steps_taken(), 2, "4 sequences / batch 2 = 2 steps");
    }

    #[test]
    fn loss_decreases_on_fixed_seed() {
        let (train, _, cfg) = tiny_records(2);
        let mut store = init_parameters(&cfg, 1);
        let mut adam = AdamState::new(1e-3);
        let opts = TrainOptions {
            batch_size: 4,
            workers: 2,
            seed: 11,
            augment: AugmentConfig::disabled(),
            ..TrainOptions::default()
        };
        let mut losses = Vec::new();
        for epoch in 0..5 {
            let (loss, _) = train_epoch(&train, &mut store, &mut adam, &cfg, &opts, epoch).unwrap();
            losses.push(loss);
        }
        assert!(
            losses[4] < losses[0],
            "loss should drop over five epochs: {losses:?}"
        );
    }

    #[test]
    fn split_backward_matches_single_graph_backward() {
        // The split training path must produce exactly the gradients of a
        // serial whole-sequence graph.
        let (train, _, cfg) = tiny_records(1);
        let record = &train[0];
        let store = init_parameters(&cfg, 3);

        // Reference: one big graph.
        let mut g = Graph::new();
        let frames: Vec<Vec<_>> = record
            .sequence
            .frames
            .iter()
            .map(|f| f.points.clone())
            .collect();
        let logits = model::forward_sequence(&mut g, &store, &cfg, &frames).unwrap();
        let loss = g.softmax_cross_entropy(logits, record.label).unwrap();
        g.backward(loss).unwrap();
        let want = g.param_grads();

        // Split path via batch_step with batch size 1 and no augmentation;
        // recover the accumulated gradient through a zero-lr Adam step probe.
        let mut probe_store = store.clone();
        let mut adam = AdamState::new(0.0);
        let opts = TrainOptions {
            batch_size: 1,
            workers: 3,
            augment: AugmentConfig::disabled(),
            ..TrainOptions::default()
        };
        batch_step(
            &[(0, record)],
            &store,
            &cfg,
            &opts,
            0,
            0,
            &mut adam,
            &mut probe_store,
        )
        .unwrap();
        // Zero learning rate leaves parameters untouched; compare the split
        // gradients directly instead by re-running the pieces.
        assert_eq!(probe_store, store, "zero-lr probe must not move parameters");

        // Re-run the split manually to compare gradient values.
        let dv = cfg.displacement_table().unwrap();
        let mut fronts = Vec::new();
        for (t, frame) in record.sequence.frames.iter().enumerate() {
            let mut fg = Graph::new();
            let b = model::build_frame_front(&mut fg, &store, &cfg, &frame.points, dv.as_ref(), t)
                .unwrap();
            fronts.push((fg, b));
        }
        let mut back = Graph::new();
        let nodes: Vec<NodeId> = fronts
            .iter()
            .map(|(fg, b)| back.constant(fg.value(*b).clone()))
            .collect();
        let logits = model::build_back(&mut back, &store, &cfg, &nodes).unwrap();
        let loss = back.softmax_cross_entropy(logits, record.label).unwrap();
        back.backward(loss).unwrap();
        let mut got = back.param_grads();
        for (t, (mut fg, b)) in fronts.into_iter().enumerate() {
            let seed = back.grad(nodes[t]).unwrap().clone();
            fg.backward_seeded(b, seed).unwrap();
            accumulate_grads(&mut got, &fg.param_grads()).unwrap();
        }

        assert_eq!(want.len(), got.len());
        for (name, w) in &want {
            let g = &got[name];
            for (a, b) in w.data().iter().zip(g.data()) {
                assert!(
                    (a - b).abs() <= 1e-12 * a.abs().max(1.0),
                    "{name}: split gradient {b} vs serial {a}"
                );
            }
        }
    }

    #[test]
    fn evaluate_scores_perfect_on_memorized_labels() {
        // Sanity: an untrained model rarely scores 0 or 1 on 8 sequences;
        // here we only check the accuracy bookkeeping.
        let (train, _, cfg) = tiny_records(2);
        let store = init_parameters(&cfg, 5);
        let acc = evaluate(&train, &store, &cfg, 2).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
