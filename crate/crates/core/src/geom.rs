//! Deterministic point-set kernels: farthest point sampling, ball query,
//! local-region grouping, pre-sampling, and sequence normalization.
//!
//! All functions are pure; callers may run them concurrently on distinct
//! frames. Determinism matters more than speed here — sampling decisions must
//! not depend on input point order, so FPS seeds from a geometric rule (the
//! lexicographically largest coordinate triple) rather than from index 0.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Point3 = [f64; 3];

/// Random-sampling pool size used by [`presample`] before FPS reduction.
pub const PRESAMPLE_POOL: usize = 2048;
/// Points kept per frame after [`presample`].
pub const PRESAMPLE_TARGET: usize = 512;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("cannot sample {requested} centroids from {available} points")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("ball query over an empty point set")]
    EmptyPointSet,
    #[error("ball query radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("centroid index {index} out of range for {points} points")]
    BadCentroidIndex { index: usize, points: usize },
    #[error("operation requires a nonempty sequence")]
    EmptySequence,
}

/// One frame: `n` 3-D points plus optional per-point feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    pub points: Vec<Point3>,
    pub features: Option<Vec<Vec<f64>>>,
}

impl PointCloudFrame {
    pub fn from_points(points: Vec<Point3>) -> Self {
        PointCloudFrame {
            points,
            features: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// T ordered frames. Frame order carries the temporal signal; points within
/// a frame are an unordered set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloudSequence {
    pub frames: Vec<PointCloudFrame>,
}

impl PointCloudSequence {
    pub fn from_frames(frames: Vec<Vec<Point3>>) -> Self {
        PointCloudSequence {
            frames: frames
                .into_iter()
                .map(PointCloudFrame::from_points)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.frames.iter().map(PointCloudFrame::len).sum()
    }

    /// Frames in reverse temporal order (points untouched).
    pub fn reversed(&self) -> PointCloudSequence {
        PointCloudSequence {
            frames: self.frames.iter().rev().cloned().collect(),
        }
    }
}

/// A centroid with its radius neighborhood, translated into the local frame.
#[derive(Clone, Debug)]
pub struct LocalRegionGroup {
    pub centroid_index: usize,
    pub centroid: Point3,
    /// Indices into the queried point set, nearest first; may repeat when the
    /// neighborhood had fewer than `k_max` qualifying points.
    pub member_indices: Vec<usize>,
    /// Member coordinates relative to the centroid.
    pub relative: Vec<Point3>,
    /// Euclidean member-to-centroid distances, `distances[i] == |relative[i]|`.
    pub distances: Vec<f64>,
    /// Member feature rows carried through unchanged, when the frame has any.
    pub features: Option<Vec<Vec<f64>>>,
}

#[inline]
fn dist2(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Deterministic FPS start: the lexicographically largest coordinate triple,
/// lowest index on exact duplicates. Independent of input order up to exact
/// duplicate points, which are geometrically indistinguishable anyway.
fn fps_seed(points: &[Point3]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p > &points[best] {
            best = i;
        }
    }
    best
}

/// Greedy farthest point sampling. Each selection maximizes the minimum
/// distance to the already-chosen set, ties broken by lowest index.
pub fn farthest_point_sample(points: &[Point3], m: usize) -> Result<Vec<usize>, GeomError> {
    if m > points.len() || points.is_empty() {
        return Err(GeomError::SampleTooLarge {
            requested: m,
            available: points.len(),
        });
    }
    let seed = fps_seed(points);
    let mut chosen = Vec::with_capacity(m);
    chosen.push(seed);
    let mut min_d2: Vec<f64> = points.iter().map(|&p| dist2(p, points[seed])).collect();
    while chosen.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for (d, &p) in min_d2.iter_mut().zip(points.iter()) {
            let nd = dist2(p, points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// Indices of points within `radius` of `centroid`, nearest first (ties by
/// index), truncated to `k_max`. When fewer than `k_max` qualify the nearest
/// qualifying index is repeated; when none qualify the globally nearest point
/// fills all slots. Output length is always exactly `k_max`.
pub fn ball_query(
    centroid: Point3,
    points: &[Point3],
    radius: f64,
    k_max: usize,
) -> Result<Vec<usize>, GeomError> {
    if points.is_empty() {
        return Err(GeomError::EmptyPointSet);
    }
    if radius <= 0.0 {
        return Err(GeomError::BadRadius(radius));
    }
    let r2 = radius * radius;
    let mut hits: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let d = dist2(p, centroid);
            (d <= r2).then_some((d, i))
        })
        .collect();
    hits.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));

    let mut indices: Vec<usize> = hits.iter().take(k_max).map(|&(_, i)| i).collect();
    if indices.is_empty() {
        let nearest = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (dist2(p, centroid), i))
            .min_by(|a, b| a.partial_cmp(b).expect("finite distances"))
            .expect("nonempty")
            .1;
        indices.push(nearest);
    }
    let pad = indices[0];
    while indices.len() < k_max {
        indices.push(pad);
    }
    Ok(indices)
}

/// Ball-query each centroid and translate members into its local frame.
/// `distances` are computed from the original coordinates; `l = l' + o`
/// reconstructs them exactly.
pub fn group_and_normalize(
    frame: &PointCloudFrame,
    centroid_indices: &[usize],
    radius: f64,
    k_max: usize,
) -> Result<Vec<LocalRegionGroup>, GeomError> {
    let n = frame.len();
    let mut groups = Vec::with_capacity(centroid_indices.len());
    for &ci in centroid_indices {
        if ci >= n {
            return Err(GeomError::BadCentroidIndex {
                index: ci,
                points: n,
            });
        }
        let o = frame.points[ci];
        let members = ball_query(o, &frame.points, radius, k_max)?;
        let mut relative = Vec::with_capacity(members.len());
        let mut distances = Vec::with_capacity(members.len());
        for &mi in &members {
            let p = frame.points[mi];
            let rel = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
            relative.push(rel);
            distances.push(dist2(p, o).sqrt());
        }
        let features = frame
            .features
            .as_ref()
            .map(|rows| members.iter().map(|&mi| rows[mi].clone()).collect());
        groups.push(LocalRegionGroup {
            centroid_index: ci,
            centroid: o,
            member_indices: members,
            relative,
            distances,
            features,
        });
    }
    Ok(groups)
}

/// Reduce an arbitrary point set to exactly [`PRESAMPLE_TARGET`] points:
/// build a pool of [`PRESAMPLE_POOL`] points, then FPS down. A small input is
/// kept whole and padded with uniform redraws (so no point is ever lost to
/// the pooling); a large input contributes a uniform subset without
/// replacement. Bit-identical for a fixed seed.
pub fn presample(points: &[Point3], seed: u64) -> Vec<Point3> {
    presample_to(points, PRESAMPLE_POOL, PRESAMPLE_TARGET, seed)
}

pub fn presample_to(points: &[Point3], pool: usize, target: usize, seed: u64) -> Vec<Point3> {
    assert!(!points.is_empty(), "presample requires at least one point");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pooled: Vec<Point3> = if points.len() < pool {
        let mut pooled = points.to_vec();
        while pooled.len() < pool {
            pooled.push(points[rng.gen_range(0..points.len())]);
        }
        pooled
    } else {
        // Partial Fisher-Yates: the first `pool` slots become a uniform
        // sample without replacement.
        let mut idx: Vec<usize> = (0..points.len()).collect();
        for i in 0..pool {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx[..pool].iter().map(|&i| points[i]).collect()
    };
    let keep = farthest_point_sample(&pooled, target.min(pooled.len()))
        .expect("target never exceeds pool");
    keep.into_iter().map(|i| pooled[i]).collect()
}

/// Center the whole sequence on its global centroid and scale by the global
/// max absolute coordinate, so the sequence bounding box fits in [-1, 1]^3.
/// The same transform applies to every frame, preserving cross-frame motion.
/// A degenerate sequence (all points identical) only gets centered.
pub fn normalize_sequence(seq: &PointCloudSequence) -> Result<PointCloudSequence, GeomError> {
    let count = seq.total_points();
    if count == 0 {
        return Err(GeomError::EmptySequence);
    }
    let mut centroid = [0.0f64; 3];
    for frame in &seq.frames {
        for p in &frame.points {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v;
            }
        }
    }
    for c in &mut centroid {
        *c /= count as f64;
    }
    let mut max_abs = 0.0f64;
    for frame in &seq.frames {
        for p in &frame.points {
            for (c, v) in centroid.iter().zip(p) {
                max_abs = max_abs.max((v - c).abs());
            }
        }
    }
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs };
    let frames = seq
        .frames
        .iter()
        .map(|frame| PointCloudFrame {
            points: frame
                .points
                .iter()
                .map(|p| {
                    [
                        (p[0] - centroid[0]) / scale,
                        (p[1] - centroid[1]) / scale,
                        (p[2] - centroid[2]) / scale,
                    ]
                })
                .collect(),
            features: frame.features.clone(),
        })
        .collect();
    Ok(PointCloudSequence { frames })
}
