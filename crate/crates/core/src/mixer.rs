//! Hyperpoint mixing: sinusoidal space dislocation, per-frame channel-mixing
//! MLPs, multi-level fusion, hierarchical pyramid max pooling, and the
//! classifier head.
//!
//! Everything up to and including the multi-level fusion touches one frame at
//! a time, so those pieces belong to the parallel front part. The pyramid
//! pooling and the head are the serial back part.

use crate::tensor::{Graph, NodeId, ParameterStore, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MixerError {
    #[error("displacement table needs an even channel count, got {0}")]
    OddWidth(usize),
    #[error("pyramid pooling needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("level {index} has shape {got:?}, expected {expected:?}")]
    LevelShape {
        index: usize,
        expected: [usize; 2],
        got: [usize; 2],
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Sinusoidal displacement vectors, one row per temporal position:
/// `DV[t, 2h] = sin(t / 10000^(2h/d))`, `DV[t, 2h+1] = cos(t / 10000^(2h/d))`.
/// `origin` shifts the temporal index (0 keeps row 0 at the analytic anchor
/// sin 0 / cos 0).
pub fn displacement_table(frames: usize, d_h: usize, origin: usize) -> Result<Tensor, MixerError> {
    if d_h % 2 != 0 {
        return Err(MixerError::OddWidth(d_h));
    }
    let mut data = Vec::with_capacity(frames * d_h);
    for t in 0..frames {
        let pos = (t + origin) as f64;
        for h in 0..d_h / 2 {
            let freq = 10000f64.powf((2 * h) as f64 / d_h as f64);
            data.push((pos / freq).sin());
            data.push((pos / freq).cos());
        }
    }
    Ok(Tensor::from_vec(frames, d_h, data).expect("sized"))
}

/// One space-dislocation step for a single frame: add the frame's
/// displacement row, then the shared channel-mixing affine layer. `activation`
/// is normally on; tests exercise the bare additive form with it off.
pub fn dislocation_layer_frame(
    graph: &mut Graph,
    params: &ParameterStore,
    prefix: &str,
    hyperpoint: NodeId,
    dv_row: Option<&[f64]>,
    activation: bool,
) -> Result<NodeId, MixerError> {
    let dislocated = match dv_row {
        Some(row) => {
            let dv = graph.constant(Tensor::row(row));
            graph.add(hyperpoint, dv)?
        }
        None => hyperpoint,
    };
    let w = params.expect(&format!("{prefix}.w")).clone();
    let b = params.expect(&format!("{prefix}.b")).clone();
    let w = graph.param(&format!("{prefix}.w"), w);
    let b = graph.param(&format!("{prefix}.b"), b);
    let mut h = graph.matmul(dislocated, w)?;
    h = graph.add(h, b)?;
    Ok(if activation { graph.relu(h) } else { h })
}

/// Apply one space-dislocation layer to a whole hyperpoint sequence (one node
/// per frame). The MLP is shared across frames; row `t` of `dv` goes to
/// frame `t`.
pub fn space_dislocation_layer(
    graph: &mut Graph,
    params: &ParameterStore,
    prefix: &str,
    rows: &[NodeId],
    dv: Option<&Tensor>,
    activation: bool,
) -> Result<Vec<NodeId>, MixerError> {
    rows.iter()
        .enumerate()
        .map(|(t, &row)| {
            let dv_row = dv.map(|table| table.row_slice(t));
            dislocation_layer_frame(graph, params, prefix, row, dv_row, activation)
        })
        .collect()
}

/// Elementwise sum of dislocation levels (skip connections), value form.
pub fn fuse_multilevel(levels: &[Tensor]) -> Result<Tensor, MixerError> {
    let first = levels.first().ok_or(MixerError::TooFewFrames(0))?.clone();
    let mut fused = first;
    for (index, level) in levels.iter().enumerate().skip(1) {
        if level.shape() != fused.shape() {
            return Err(MixerError::LevelShape {
                index,
                expected: fused.shape(),
                got: level.shape(),
            });
        }
        fused.add_assign(level)?;
    }
    Ok(fused)
}

/// Elementwise sum of per-frame level nodes on the graph.
pub fn fuse_multilevel_graph(
    graph: &mut Graph,
    levels: &[Vec<NodeId>],
) -> Result<Vec<NodeId>, MixerError> {
    let first = levels.first().ok_or(MixerError::TooFewFrames(0))?;
    let frames = first.len();
    for (index, level) in levels.iter().enumerate() {
        if level.len() != frames {
            return Err(MixerError::LevelShape {
                index,
                expected: [frames, 0],
                got: [level.len(), 0],
            });
        }
    }
    (0..frames)
        .map(|t| {
            let mut acc = levels[0][t];
            for level in &levels[1..] {
                acc = graph.add(acc, level[t])?;
            }
            Ok(acc)
        })
        .collect()
}

/// Temporal partitions of the 2-layer pyramid: the whole sequence, then the
/// two halves, with an odd leftover frame going to the first half.
pub fn pyramid_partitions(frames: usize) -> [(usize, usize); 3] {
    let mid = frames.div_ceil(2);
    [(0, frames), (0, mid), (mid, frames)]
}

/// Frame-mixing by hierarchical pyramid max pooling: channel-wise max within
/// each partition, concatenated in partition order into a `1 x 3*d_H` node.
pub fn pyramid_max_pool(graph: &mut Graph, rows: &[NodeId]) -> Result<NodeId, MixerError> {
    if rows.len() < 2 {
        return Err(MixerError::TooFewFrames(rows.len()));
    }
    let mut descriptors = Vec::with_capacity(3);
    for (start, end) in pyramid_partitions(rows.len()) {
        let stacked = graph.concat_rows(&rows[start..end])?;
        descriptors.push(graph.max_reduce(stacked)?);
    }
    Ok(graph.concat_cols(&descriptors)?)
}

/// Single-partition frame mixing: one channel-wise max over all frames.
pub fn single_max_pool(graph: &mut Graph, rows: &[NodeId]) -> Result<NodeId, MixerError> {
    let stacked = graph.concat_rows(rows)?;
    Ok(graph.max_reduce(stacked)?)
}

/// Fully-connected head: hidden layer with ReLU, then raw class logits
/// (softmax lives in the loss).
pub fn classifier_head(
    graph: &mut Graph,
    params: &ParameterStore,
    global_feature: NodeId,
) -> Result<NodeId, MixerError> {
    let mut h = global_feature;
    for (i, relu) in [(0usize, true), (1, false)] {
        let w = params.expect(&format!("head.fc{i}.w")).clone();
        let b = params.expect(&format!("head.fc{i}.b")).clone();
        let w = graph.param(&format!("head.fc{i}.w"), w);
        let b = graph.param(&format!("head.fc{i}.b"), b);
        h = graph.matmul(h, w)?;
        h = graph.add(h, b)?;
        if relu {
            h = graph.relu(h);
        }
    }
    Ok(h)
}
