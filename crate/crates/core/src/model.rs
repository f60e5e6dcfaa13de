//! Whole-network configuration, parameter initialization, the structural
//! parameter counter, and the front/back graph builders.
//!
//! The computation graph splits at the frame-mixing pooling: everything
//! before it ([`build_frame_front`]) consumes exactly one frame plus the
//! shared parameters, everything after it ([`build_back`]) consumes the T
//! per-frame boundary vectors. The runtime exploits that split for frame
//! parallelism, and training resumes the backward pass across it.

use crate::embed::{self, EmbedConfig, EmbedError, SetAbstractionConfig};
use crate::geom::Point3;
use crate::mixer::{self, MixerError};
use crate::tensor::{Graph, NodeId, ParameterStore, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence has {got} frames, model expects {expected}")]
    WrongFrameCount { expected: usize, got: usize },
}

/// Frame-mixing choice: the 3-partition pyramid, or one plain max over all
/// frames (kept as an option for order-sensitivity experiments).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PoolingMode {
    Pyramid,
    SingleMax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per sequence (T).
    pub frames: usize,
    pub classes: usize,
    pub embed: EmbedConfig,
    /// Number of space-dislocation layers.
    pub mixer_layers: usize,
    pub head_hidden: usize,
    pub pooling: PoolingMode,
    /// Add the sinusoidal displacement vectors before each channel-mixing
    /// MLP. Off means the mixer sees raw hyperpoints (order-blind).
    pub displacement: bool,
    /// Temporal index of the first frame in the displacement table.
    pub time_index_base: usize,
}

impl ModelConfig {
    /// Full-size configuration: 512-point frames, T=20, 60 classes,
    /// stage widths (64,64,128)/(128,128,256), global (256,512,1024),
    /// two 1024-channel dislocation layers, head 3072 -> 256 -> classes.
    pub fn full() -> Self {
        ModelConfig {
            frames: 20,
            classes: 60,
            embed: EmbedConfig {
                points_per_frame: 512,
                sa1: SetAbstractionConfig {
                    centroids: 128,
                    radius: 0.06,
                    group_size: 48,
                    mlp_widths: [64, 64, 128],
                    attention: false,
                },
                sa2: SetAbstractionConfig {
                    centroids: 32,
                    radius: 0.1,
                    group_size: 16,
                    mlp_widths: [128, 128, 256],
                    attention: true,
                },
                global_widths: [256, 512, 1024],
            },
            mixer_layers: 2,
            head_hidden: 256,
            pooling: PoolingMode::Pyramid,
            displacement: true,
            time_index_base: 0,
        }
    }

    /// Reduced configuration for desk-scale training on the synthetic set:
    /// same shape as [`ModelConfig::full`], smaller widths, 4 classes.
    pub fn desk() -> Self {
        ModelConfig {
            frames: 20,
            classes: 4,
            embed: EmbedConfig {
                points_per_frame: 512,
                sa1: SetAbstractionConfig {
                    centroids: 32,
                    radius: 0.35,
                    group_size: 16,
                    mlp_widths: [16, 16, 32],
                    attention: false,
                },
                sa2: SetAbstractionConfig {
                    centroids: 8,
                    radius: 0.7,
                    group_size: 8,
                    mlp_widths: [32, 32, 64],
                    attention: true,
                },
                global_widths: [64, 128, 256],
            },
            mixer_layers: 2,
            head_hidden: 64,
            pooling: PoolingMode::Pyramid,
            displacement: true,
            time_index_base: 0,
        }
    }

    /// Smallest exercisable configuration, used for exhaustive gradient
    /// checking: T=3, 8 points per frame, widths (4,4,8)/(8,8,16)/(16,16,32).
    pub fn tiny() -> Self {
        ModelConfig {
            frames: 3,
            classes: 3,
            embed: EmbedConfig {
                points_per_frame: 8,
                sa1: SetAbstractionConfig {
                    centroids: 4,
                    radius: 0.8,
                    group_size: 4,
                    mlp_widths: [4, 4, 8],
                    attention: false,
                },
                sa2: SetAbstractionConfig {
                    centroids: 2,
                    radius: 1.2,
                    group_size: 2,
                    mlp_widths: [8, 8, 16],
                    attention: true,
                },
                global_widths: [16, 16, 32],
            },
            mixer_layers: 2,
            head_hidden: 16,
            pooling: PoolingMode::Pyramid,
            displacement: true,
            time_index_base: 0,
        }
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn sa1(&self) -> &SetAbstractionConfig {
        &self.embed.sa1
    }

    pub fn sa2(&self) -> &SetAbstractionConfig {
        &self.embed.sa2
    }

    pub fn hyperpoint_dim(&self) -> usize {
        self.embed.hyperpoint_dim()
    }

    /// Width of the global feature entering the head.
    pub fn head_input_dim(&self) -> usize {
        match self.pooling {
            PoolingMode::Pyramid => 3 * self.hyperpoint_dim(),
            PoolingMode::SingleMax => self.hyperpoint_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.frames < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::Config("need at least 2 classes".into()));
        }
        if self.displacement && self.hyperpoint_dim() % 2 != 0 {
            return Err(ModelError::Config(format!(
                "displacement requires an even hyperpoint dim, got {}",
                self.hyperpoint_dim()
            )));
        }
        let e = &self.embed;
        if e.sa1.centroids > e.points_per_frame {
            return Err(ModelError::Config(
                "stage 1 centroids exceed points per frame".into(),
            ));
        }
        if e.sa2.centroids > e.sa1.centroids {
            return Err(ModelError::Config(
                "stage 2 centroids exceed stage 1 centroids".into(),
            ));
        }
        for (name, sa) in [("sa1", &e.sa1), ("sa2", &e.sa2)] {
            if sa.radius <= 0.0 || sa.group_size == 0 || sa.mlp_widths.contains(&0) {
                return Err(ModelError::Config(format!("{name} has a degenerate field")));
            }
        }
        Ok(())
    }

    /// Displacement table for this configuration, or `None` when disabled.
    pub fn displacement_table(&self) -> Result<Option<Tensor>, ModelError> {
        if !self.displacement {
            return Ok(None);
        }
        Ok(Some(mixer::displacement_table(
            self.frames,
            self.hyperpoint_dim(),
            self.time_index_base,
        )?))
    }
}

/// Exact trainable-scalar count from shapes alone; must match the live
/// [`init_parameters`] store.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    fn mlp(mut input: usize, widths: &[usize]) -> usize {
        let mut total = 0;
        for &w in widths {
            total += input * w + w;
            input = w;
        }
        total
    }
    fn stage(sa: &SetAbstractionConfig, feature_width: usize) -> usize {
        let c_in = sa.input_width(feature_width);
        let mut total = mlp(c_in, &sa.mlp_widths);
        if sa.attention {
            let h = embed::attention_hidden_width(c_in);
            total += c_in * h + h * c_in;
        }
        total
    }

    let e = &cfg.embed;
    let mut total = stage(&e.sa1, 0);
    total += stage(&e.sa2, e.sa1.output_width());
    total += mlp(e.sa2.output_width() + 3, &e.global_widths);
    let d = cfg.hyperpoint_dim();
    total += cfg.mixer_layers * (d * d + d);
    total += mlp(cfg.head_input_dim(), &[cfg.head_hidden, cfg.classes]);
    total
}

/// He-style uniform fan-in initialization with a fixed creation order, so one
/// seed fixes every weight. Biases start at zero.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterStore::new();

    let affine = |params: &mut ParameterStore,
                  rng: &mut ChaCha8Rng,
                  name: &str,
                  fan_in: usize,
                  out: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        params.insert(
            format!("{name}.w"),
            Tensor::from_vec(fan_in, out, data).expect("sized"),
        );
        params.insert(format!("{name}.b"), Tensor::zeros(1, out));
    };

    let e = &cfg.embed;
    for (prefix, sa, feature_width) in [
        ("embed.sa1", &e.sa1, 0),
        ("embed.sa2", &e.sa2, e.sa1.output_width()),
    ] {
        let mut fan_in = sa.input_width(feature_width);
        for (i, &w) in sa.mlp_widths.iter().enumerate() {
            affine(
                &mut params,
                &mut rng,
                &format!("{prefix}.mlp{i}"),
                fan_in,
                w,
            );
            fan_in = w;
        }
        if sa.attention {
            let c_in = sa.input_width(feature_width);
            let h = embed::attention_hidden_width(c_in);
            let bound0 = (6.0 / c_in as f64).sqrt();
            let w0: Vec<f64> = (0..c_in * h)
                .map(|_| rng.gen_range(-bound0..bound0))
                .collect();
            params.insert(
                format!("{prefix}.attn.w0"),
                Tensor::from_vec(c_in, h, w0).expect("sized"),
            );
            let bound1 = (6.0 / h as f64).sqrt();
            let w1: Vec<f64> = (0..h * c_in)
                .map(|_| rng.gen_range(-bound1..bound1))
                .collect();
            params.insert(
                format!("{prefix}.attn.w1"),
                Tensor::from_vec(h, c_in, w1).expect("sized"),
            );
        }
    }

    let mut fan_in = e.sa2.output_width() + 3;
    for (i, &w) in e.global_widths.iter().enumerate() {
        affine(
            &mut params,
            &mut rng,
            &format!("embed.global.mlp{i}"),
            fan_in,
            w,
        );
        fan_in = w;
    }

    let d = cfg.hyperpoint_dim();
    for l in 0..cfg.mixer_layers {
        affine(&mut params, &mut rng, &format!("mixer.l{l}"), d, d);
    }

    affine(
        &mut params,
        &mut rng,
        "head.fc0",
        cfg.head_input_dim(),
        cfg.head_hidden,
    );
    affine(
        &mut params,
        &mut rng,
        "head.fc1",
        cfg.head_hidden,
        cfg.classes,
    );
    params
}

/// Parameters in general position for finite-difference checking: the
/// standard initialization plus a small uniform offset on every scalar.
/// Zero-initialized biases would otherwise leave first-layer pre-activations
/// of a group's own-centroid row exactly on the ReLU kink, where central
/// differences and the subgradient legitimately disagree.
pub fn init_parameters_dithered(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    let mut params = init_parameters(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d17e_0000_0001);
    for (_, tensor) in params.iter_mut() {
        for v in tensor.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    params
}

/// The frame-level unit of the parallel front part: hyperpoint embedding,
/// every space-dislocation layer, and the multi-level skip fusion. Returns
/// the frame's fused `1 x d_H` boundary vector.
pub fn build_frame_front(
    graph: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    points: &[Point3],
    dv: Option<&Tensor>,
    frame_index: usize,
) -> Result<NodeId, ModelError> {
    let hyperpoint = embed::embed_frame(graph, params, &cfg.embed, points)?;
    let mut levels = vec![hyperpoint];
    let mut current = hyperpoint;
    for l in 0..cfg.mixer_layers {
        let dv_row = dv.map(|t| t.row_slice(frame_index));
        current = mixer::dislocation_layer_frame(
            graph,
            params,
            &format!("mixer.l{l}"),
            current,
            dv_row,
            true,
        )?;
        levels.push(current);
    }
    let mut fused = levels[0];
    for &level in &levels[1..] {
        fused = graph.add(fused, level).map_err(MixerError::from)?;
    }
    Ok(fused)
}

/// The serial back part: frame-mixing pooling over the boundary vectors and
/// the classifier head. Returns raw logits.
pub fn build_back(
    graph: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    boundary: &[NodeId],
) -> Result<NodeId, ModelError> {
    if boundary.len() != cfg.frames {
        return Err(ModelError::WrongFrameCount {
            expected: cfg.frames,
            got: boundary.len(),
        });
    }
    let global = match cfg.pooling {
        PoolingMode::Pyramid => mixer::pyramid_max_pool(graph, boundary)?,
        PoolingMode::SingleMax => mixer::single_max_pool(graph, boundary)?,
    };
    Ok(mixer::classifier_head(graph, params, global)?)
}

/// Serial whole-sequence forward on one graph; the runtime's split execution
/// must agree with this bit for bit.
pub fn forward_sequence(
    graph: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    frames: &[Vec<Point3>],
) -> Result<NodeId, ModelError> {
    if frames.len() != cfg.frames {
        return Err(ModelError::WrongFrameCount {
            expected: cfg.frames,
            got: frames.len(),
        });
    }
    let dv = cfg.displacement_table()?;
    let boundary: Vec<NodeId> = frames
        .iter()
        .enumerate()
        .map(|(t, pts)| build_frame_front(graph, params, cfg, pts, dv.as_ref(), t))
        .collect::<Result<_, _>>()?;
    build_back(graph, params, cfg, &boundary)
}
