//! Hyperpoint embedding: flatten one point cloud frame into one descriptor
//! vector through two set-abstraction stages and a global PointNet layer.
//!
//! A set-abstraction stage samples centroids by FPS, gathers each centroid's
//! radius neighborhood, and encodes every group with a shared MLP followed by
//! a max over the group members. The group input rows are
//! `[relative coords | centroid distance | carried features]`; an optional
//! per-channel attention vector (shared by all groups of the frame) rescales
//! them before the MLP. Because every reduction is a max over set members and
//! the sampling rules are order-invariant, the final hyperpoint does not
//! depend on the order of the input points.

use crate::geom::{
    self, farthest_point_sample, group_and_normalize, GeomError, Point3, PointCloudFrame,
};
use crate::tensor::{Graph, NodeId, ParameterStore, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("frame has {got} points, embedding expects {expected}")]
    WrongPointCount { expected: usize, got: usize },
    #[error("group features are {got} wide, stage expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
}

/// One set-abstraction stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SetAbstractionConfig {
    /// Number of FPS centroids (`n_m`).
    pub centroids: usize,
    /// Ball-query radius.
    pub radius: f64,
    /// Points per group (`k_m`); ball query pads up to this.
    pub group_size: usize,
    /// Output widths of the three shared MLP layers.
    pub mlp_widths: [usize; 3],
    /// Per-channel attention over the group input rows.
    pub attention: bool,
}

impl SetAbstractionConfig {
    pub fn output_width(&self) -> usize {
        self.mlp_widths[2]
    }

    /// Width of a group input row given the carried feature width:
    /// 3 relative coordinates, 1 centroid distance, then the features.
    pub fn input_width(&self, feature_width: usize) -> usize {
        3 + 1 + feature_width
    }
}

/// Embedding pipeline configuration: two stages plus the global PointNet MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub points_per_frame: usize,
    pub sa1: SetAbstractionConfig,
    pub sa2: SetAbstractionConfig,
    pub global_widths: [usize; 3],
}

impl EmbedConfig {
    /// Dimension of the per-frame hyperpoint.
    pub fn hyperpoint_dim(&self) -> usize {
        self.global_widths[2]
    }
}

/// CBAM-style channel attention hidden width: reduction ratio 16, floored,
/// never below 4.
pub fn attention_hidden_width(channels: usize) -> usize {
    (channels / 16).max(4)
}

/// A centroid after set abstraction: its coordinates stay plain values (the
/// sampling is not differentiated), its pooled feature is a `1 x c_m` node.
#[derive(Clone, Debug)]
pub struct CentroidDescriptor {
    pub coords: Point3,
    pub feature: NodeId,
}

/// A group ready for the PointNet layer: centroid coordinates plus the
/// `k x (3+1+c)` member matrix node.
pub struct GroupNodes {
    pub centroid: Point3,
    pub members: NodeId,
}

/// Build the member matrices for a stage. The geometric columns are graph
/// constants; carried feature rows are gathered from the previous stage's
/// feature nodes so gradients flow through them.
pub fn assemble_groups(
    graph: &mut Graph,
    groups: &[geom::LocalRegionGroup],
    features: Option<&[NodeId]>,
) -> Result<Vec<GroupNodes>, EmbedError> {
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let k = group.member_indices.len();
        let mut geo = Vec::with_capacity(k * 4);
        for (rel, &dist) in group.relative.iter().zip(&group.distances) {
            geo.extend_from_slice(rel);
            geo.push(dist);
        }
        let geo_node = graph.constant(Tensor::from_vec(k, 4, geo)?);
        let members = match features {
            None => geo_node,
            Some(feature_nodes) => {
                let rows: Vec<NodeId> = group
                    .member_indices
                    .iter()
                    .map(|&mi| feature_nodes[mi])
                    .collect();
                let gathered = graph.concat_rows(&rows)?;
                graph.concat_cols(&[geo_node, gathered])?
            }
        };
        out.push(GroupNodes {
            centroid: group.centroid,
            members,
        });
    }
    Ok(out)
}

/// Shared per-channel attention over a batch of groups: for every group,
/// sigmoid(MLP(average over members) + MLP(max over members)) with a shared
/// bias-free bottleneck MLP, then averaged across the groups. The result is
/// one `1 x c` score row in (0, 1), applied to every group of the frame.
pub fn channel_attention(
    graph: &mut Graph,
    params: &ParameterStore,
    prefix: &str,
    members: &[NodeId],
) -> Result<NodeId, TensorError> {
    let w0 = {
        let t = params.expect(&format!("{prefix}.w0")).clone();
        graph.param(&format!("{prefix}.w0"), t)
    };
    let w1 = {
        let t = params.expect(&format!("{prefix}.w1")).clone();
        graph.param(&format!("{prefix}.w1"), t)
    };

    let mut per_group = Vec::with_capacity(members.len());
    for &m in members {
        let k = graph.value(m).rows();
        let mean_weights = graph.constant(Tensor::from_vec(1, k, vec![1.0 / k as f64; k])?);
        let avg = graph.matmul(mean_weights, m)?;
        let mx = graph.max_reduce(m)?;

        let mut pooled_scores = Vec::with_capacity(2);
        for pooled in [avg, mx] {
            let h = graph.matmul(pooled, w0)?;
            let h = graph.relu(h);
            pooled_scores.push(graph.matmul(h, w1)?);
        }
        let summed = graph.add(pooled_scores[0], pooled_scores[1])?;
        per_group.push(graph.sigmoid(summed));
    }

    let stacked = graph.concat_rows(&per_group)?;
    let n = per_group.len();
    let mean_weights = graph.constant(Tensor::from_vec(1, n, vec![1.0 / n as f64; n])?);
    graph.matmul(mean_weights, stacked)
}

/// The PointNet layer of a set-abstraction stage: optionally rescale the
/// member rows by the shared attention vector, push every row through three
/// shared MLP+ReLU layers, then take the member-wise max per group.
pub fn augmentation_pointnet(
    graph: &mut Graph,
    params: &ParameterStore,
    prefix: &str,
    cfg: &SetAbstractionConfig,
    groups: &[GroupNodes],
) -> Result<Vec<CentroidDescriptor>, EmbedError> {
    let attention = if cfg.attention {
        let members: Vec<NodeId> = groups.iter().map(|g| g.members).collect();
        Some(channel_attention(
            graph,
            params,
            &format!("{prefix}.attn"),
            &members,
        )?)
    } else {
        None
    };

    let weights: Vec<(NodeId, NodeId)> = (0..3)
        .map(|i| {
            let w = params.expect(&format!("{prefix}.mlp{i}.w")).clone();
            let b = params.expect(&format!("{prefix}.mlp{i}.b")).clone();
            (
                graph.param(&format!("{prefix}.mlp{i}.w"), w),
                graph.param(&format!("{prefix}.mlp{i}.b"), b),
            )
        })
        .collect();

    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let mut h = group.members;
        if let Some(a) = attention {
            h = graph.scale(h, a)?;
        }
        for &(w, b) in &weights {
            h = graph.matmul(h, w)?;
            h = graph.add(h, b)?;
            h = graph.relu(h);
        }
        let pooled = graph.max_reduce(h)?;
        out.push(CentroidDescriptor {
            coords: group.centroid,
            feature: pooled,
        });
    }
    Ok(out)
}

/// Full set-abstraction stage: FPS sampling, ball-query grouping, then the
/// augmentation PointNet layer.
pub fn set_abstraction(
    graph: &mut Graph,
    params: &ParameterStore,
    prefix: &str,
    cfg: &SetAbstractionConfig,
    coords: &[Point3],
    features: Option<&[NodeId]>,
) -> Result<Vec<CentroidDescriptor>, EmbedError> {
    if let Some(feature_nodes) = features {
        debug_assert_eq!(feature_nodes.len(), coords.len());
    }
    let centroid_indices = farthest_point_sample(coords, cfg.centroids)?;
    let frame = PointCloudFrame::from_points(coords.to_vec());
    let groups = group_and_normalize(&frame, &centroid_indices, cfg.radius, cfg.group_size)?;
    let group_nodes = assemble_groups(graph, &groups, features)?;
    augmentation_pointnet(graph, params, prefix, cfg, &group_nodes)
}

/// Flatten one frame into its hyperpoint. Parameter prefixes are
/// `embed.sa1`, `embed.sa2`, and `embed.global`.
pub fn embed_frame(
    graph: &mut Graph,
    params: &ParameterStore,
    cfg: &EmbedConfig,
    points: &[Point3],
) -> Result<NodeId, EmbedError> {
    if points.len() != cfg.points_per_frame {
        return Err(EmbedError::WrongPointCount {
            expected: cfg.points_per_frame,
            got: points.len(),
        });
    }

    let sa1 = set_abstraction(graph, params, "embed.sa1", &cfg.sa1, points, None)?;

    let sa1_coords: Vec<Point3> = sa1.iter().map(|c| c.coords).collect();
    let sa1_features: Vec<NodeId> = sa1.iter().map(|c| c.feature).collect();
    let sa2 = set_abstraction(
        graph,
        params,
        "embed.sa2",
        &cfg.sa2,
        &sa1_coords,
        Some(&sa1_features),
    )?;

    // Global PointNet layer over the abstracted centroids: each row is
    // [pooled features | centroid coords], shared MLP, max over centroids.
    let rows: Vec<NodeId> = sa2
        .iter()
        .map(|c| {
            let coords = graph.constant(Tensor::row(&c.coords));
            graph.concat_cols(&[c.feature, coords])
        })
        .collect::<Result<_, _>>()?;
    let mut h = graph.concat_rows(&rows)?;
    for i in 0..3 {
        let w = params.expect(&format!("embed.global.mlp{i}.w")).clone();
        let b = params.expect(&format!("embed.global.mlp{i}.b")).clone();
        let w = graph.param(&format!("embed.global.mlp{i}.w"), w);
        let b = graph.param(&format!("embed.global.mlp{i}.b"), b);
        h = graph.matmul(h, w)?;
        h = graph.add(h, b)?;
        h = graph.relu(h);
    }
    Ok(graph.max_reduce(h)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_parameters, ModelConfig};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stage() -> SetAbstractionConfig {
        SetAbstractionConfig {
            centroids: 2,
            radius: 1.5,
            group_size: 2,
            mlp_widths: [2, 2, 2],
            attention: false,
        }
    }

    /// Hand evaluation of the augmentation PointNet layer on a 2-member
    /// group with hand-set weights.
    #[test]
    fn tiny_group_matches_hand_computation() {
        let cfg = SetAbstractionConfig {
            centroids: 1,
            radius: 2.0,
            group_size: 2,
            mlp_widths: [2, 2, 2],
            attention: false,
        };
        let mut params = ParameterStore::new();
        // Layer 0: in 4 -> out 2. Row-major in x out.
        params.insert(
            "t.mlp0.w",
            Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0, 0.5, 0.5]).unwrap(),
        );
        params.insert("t.mlp0.b", Tensor::row(&[0.1, -0.1]));
        // Layers 1 and 2: identity, zero bias.
        for i in [1, 2] {
            params.insert(
                format!("t.mlp{i}.w"),
                Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            );
            params.insert(format!("t.mlp{i}.b"), Tensor::row(&[0.0, 0.0]));
        }

        let mut g = Graph::new();
        // Members relative to centroid (1,0,0): (0,0,0) d=0 and (-1,0,1) d=sqrt(2).
        let frame = PointCloudFrame::from_points(vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let groups = group_and_normalize(&frame, &[0], cfg.radius, cfg.group_size).unwrap();
        let nodes = assemble_groups(&mut g, &groups, None).unwrap();
        let desc = augmentation_pointnet(&mut g, &params, "t", &cfg, &nodes).unwrap();
        assert_eq!(desc.len(), 1);

        // Row 1: [0,0,0,0] -> w: [0.1, -0.1] + relu -> [0.1, 0].
        // Row 2: [-1,0,1,sqrt2] -> [-1*1 + 1*1 + sqrt2*0.5 + 0.1, 0*1 ... ]
        let s = 2.0f64.sqrt();
        let r2 = [
            (-1.0 + 0.0 + 1.0 + s * 0.5 + 0.1).max(0.0),
            (0.0 + 0.0 - 1.0 + s * 0.5 - 0.1).max(0.0),
        ];
        let expect = [r2[0].max(0.1), r2[1].max(0.0)];
        let got = g.value(desc[0].feature);
        assert_eq!(got.shape(), [1, 2]);
        for (a, b) in got.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "got {a}, want {b}");
        }
    }

    #[test]
    fn identical_members_pool_to_single_member_output() {
        let cfg = tiny_stage();
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_tensor = |r: usize, c: usize| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        for i in 0..3 {
            let w_in = if i == 0 { 4 } else { 2 };
            params.insert(format!("t.mlp{i}.w"), rand_tensor(w_in, 2));
            params.insert(format!("t.mlp{i}.b"), rand_tensor(1, 2));
        }

        // Group of two identical members versus the degenerate single member.
        let frame = PointCloudFrame::from_points(vec![[0.2, 0.0, 0.1], [0.2, 0.0, 0.1]]);
        let mut g = Graph::new();
        let groups = group_and_normalize(&frame, &[0], 1.0, 2).unwrap();
        let nodes = assemble_groups(&mut g, &groups, None).unwrap();
        let pooled = augmentation_pointnet(&mut g, &params, "t", &cfg, &nodes).unwrap();

        let single = PointCloudFrame::from_points(vec![[0.2, 0.0, 0.1]]);
        let mut g2 = Graph::new();
        let sgroups = group_and_normalize(&single, &[0], 1.0, 2).unwrap();
        let snodes = assemble_groups(&mut g2, &sgroups, None).unwrap();
        let spooled = augmentation_pointnet(&mut g2, &params, "t", &cfg, &snodes).unwrap();

        assert_eq!(
            g.value(pooled[0].feature).data(),
            g2.value(spooled[0].feature).data()
        );
    }

    #[test]
    fn member_permutation_leaves_descriptor_unchanged() {
        let cfg = SetAbstractionConfig {
            centroids: 1,
            radius: 4.0,
            group_size: 3,
            mlp_widths: [3, 3, 3],
            attention: false,
        };
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..3 {
            let w_in = if i == 0 { 4 } else { 3 };
            let data: Vec<f64> = (0..w_in * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            params.insert(
                format!("t.mlp{i}.w"),
                Tensor::from_vec(w_in, 3, data).unwrap(),
            );
            params.insert(format!("t.mlp{i}.b"), Tensor::row(&[0.1, 0.2, -0.3]));
        }

        // Hand-build two member matrices that are row permutations.
        let build = |rows: &[[f64; 4]]| {
            let mut g = Graph::new();
            let data: Vec<f64> = rows.iter().flatten().copied().collect();
            let members = g.constant(Tensor::from_vec(rows.len(), 4, data).unwrap());
            let nodes = vec![GroupNodes {
                centroid: [0.0; 3],
                members,
            }];
            let out = augmentation_pointnet(&mut g, &params, "t", &cfg, &nodes).unwrap();
            g.value(out[0].feature).data().to_vec()
        };
        let a = [
            [0.1, 0.2, 0.3, 0.374],
            [-0.5, 0.1, 0.0, 0.51],
            [0.3, -0.2, 0.2, 0.412],
        ];
        let b = [a[2], a[0], a[1]];
        assert_eq!(build(&a), build(&b));
    }

    #[test]
    fn attention_scores_stay_in_unit_interval() {
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 6;
        let h = attention_hidden_width(c);
        let w0: Vec<f64> = (0..c * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w1: Vec<f64> = (0..h * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        params.insert("a.w0", Tensor::from_vec(c, h, w0).unwrap());
        params.insert("a.w1", Tensor::from_vec(h, c, w1).unwrap());

        let mut g = Graph::new();
        let members: Vec<NodeId> = (0..4)
            .map(|_| {
                let data: Vec<f64> = (0..3 * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
                g.constant(Tensor::from_vec(3, c, data).unwrap())
            })
            .collect();
        let a = channel_attention(&mut g, &params, "a", &members).unwrap();
        let v = g.value(a);
        assert_eq!(v.shape(), [1, c]);
        for &s in v.data() {
            assert!(s > 0.0 && s < 1.0, "score {s} outside (0,1)");
        }
    }

    #[test]
    fn attention_of_zero_mlp_is_one_half() {
        let c = 5;
        let h = attention_hidden_width(c);
        let mut params = ParameterStore::new();
        params.insert("a.w0", Tensor::zeros(c, h));
        params.insert("a.w1", Tensor::zeros(h, c));
        let mut g = Graph::new();
        let members = vec![g.constant(Tensor::zeros(4, c))];
        let a = channel_attention(&mut g, &params, "a", &members).unwrap();
        for &s in g.value(a).data() {
            assert_eq!(s, 0.5);
        }
    }

    /// Channel statistics feeding the attention follow a direct pooling
    /// oracle: doubling all member values doubles the average and the max.
    #[test]
    fn attention_pooling_matches_direct_oracle() {
        let c = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = 3;
        let data: Vec<f64> = (0..rows * c).map(|_| rng.gen_range(0.1..2.0)).collect();

        let pool = |values: &[f64]| {
            let mut avg = vec![0.0; c];
            let mut mx = vec![f64::NEG_INFINITY; c];
            for r in 0..rows {
                for j in 0..c {
                    let v = values[r * c + j];
                    avg[j] += v / rows as f64;
                    mx[j] = mx[j].max(v);
                }
            }
            (avg, mx)
        };

        let mut g = Graph::new();
        let m = g.constant(Tensor::from_vec(rows, c, data.clone()).unwrap());
        let k = g.value(m).rows();
        let mean_w = g.constant(Tensor::from_vec(1, k, vec![1.0 / k as f64; k]).unwrap());
        let avg_node = g.matmul(mean_w, m).unwrap();
        let max_node = g.max_reduce(m).unwrap();

        let (avg, mx) = pool(&data);
        for (got, want) in g.value(avg_node).data().iter().zip(&avg) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(g.value(max_node).data(), &mx[..]);

        let doubled: Vec<f64> = data.iter().map(|v| v * 2.0).collect();
        let (avg2, mx2) = pool(&doubled);
        for ((a, b), (m1, m2)) in avg.iter().zip(&avg2).zip(mx.iter().zip(&mx2)) {
            assert!((b - 2.0 * a).abs() < 1e-12);
            assert!((m2 - 2.0 * m1).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_off_equals_attention_of_ones() {
        // Scaling by an all-ones vector is the identity, so a stage with
        // attention disabled must match one whose scores are forced to 1.
        let cfg_off = tiny_stage();
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..3 {
            let w_in = if i == 0 { 4 } else { 2 };
            let data: Vec<f64> = (0..w_in * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            params.insert(
                format!("t.mlp{i}.w"),
                Tensor::from_vec(w_in, 2, data).unwrap(),
            );
            params.insert(format!("t.mlp{i}.b"), Tensor::row(&[0.05, -0.05]));
        }

        let frame =
            PointCloudFrame::from_points(vec![[0.0, 0.0, 0.0], [0.4, 0.1, -0.2], [-0.3, 0.2, 0.5]]);
        let centroids = farthest_point_sample(&frame.points, 2).unwrap();
        let groups = group_and_normalize(&frame, &centroids, 1.5, 2).unwrap();

        let mut g_off = Graph::new();
        let nodes = assemble_groups(&mut g_off, &groups, None).unwrap();
        let off = augmentation_pointnet(&mut g_off, &params, "t", &cfg_off, &nodes).unwrap();

        let mut g_ones = Graph::new();
        let nodes = assemble_groups(&mut g_ones, &groups, None).unwrap();
        let ones = g_ones.constant(Tensor::row(&[1.0; 4]));
        let mut scaled = Vec::new();
        for n in nodes {
            let members = g_ones.scale(n.members, ones).unwrap();
            scaled.push(GroupNodes {
                centroid: n.centroid,
                members,
            });
        }
        let on = augmentation_pointnet(&mut g_ones, &params, "t", &cfg_off, &scaled).unwrap();

        for (a, b) in off.iter().zip(&on) {
            assert_eq!(
                g_off.value(a.feature).data(),
                g_ones.value(b.feature).data()
            );
        }
    }

    #[test]
    fn embed_rejects_wrong_point_count() {
        let cfg = ModelConfig::tiny();
        let params = init_parameters(&cfg, 0);
        let mut g = Graph::new();
        let err = embed_frame(&mut g, &params, &cfg.embed, &[[0.0; 3]; 3]).unwrap_err();
        assert!(matches!(err, EmbedError::WrongPointCount { .. }));
    }

    #[test]
    fn hyperpoint_values_come_from_contributing_activations() {
        let cfg = ModelConfig::tiny();
        let params = init_parameters(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let points: Vec<Point3> = (0..cfg.embed.points_per_frame)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let mut g = Graph::new();
        let hp = embed_frame(&mut g, &params, &cfg.embed, &points).unwrap();
        assert_eq!(g.value(hp).shape(), [1, cfg.embed.hyperpoint_dim()]);
        // Max pooling: every output channel equals some row of its input.
        let indices = g.max_indices(hp).unwrap();
        assert_eq!(indices.len(), cfg.embed.hyperpoint_dim());
        assert!(indices.iter().all(|&r| r < cfg.sa2().centroids));
    }
}
