//! Training-time augmentation: per-sequence rotation about Y then X,
//! per-point jitter, and random point dropout with survivor padding.

use crate::geom::{Point3, PointCloudFrame, PointCloudSequence};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation bounds in degrees, drawn uniformly once per sequence.
    pub rot_y_max_deg: f64,
    pub rot_x_max_deg: f64,
    /// Per-point Gaussian jitter, clipped.
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Upper bound on the fraction of points dropped per frame.
    pub dropout_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rot_y_max_deg: 15.0,
            rot_x_max_deg: 10.0,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            dropout_max: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn rotate(p: Point3, sin_y: f64, cos_y: f64, sin_x: f64, cos_x: f64) -> Point3 {
    // Y rotation, then X rotation, both about the origin of the normalized
    // coordinate frame.
    let (x, y, z) = (p[0], p[1], p[2]);
    let (x1, y1, z1) = (cos_y * x + sin_y * z, y, -sin_y * x + cos_y * z);
    [x1, cos_x * y1 - sin_x * z1, sin_x * y1 + cos_x * z1]
}

/// Augment one sequence. One rotation angle pair applies identically to all
/// frames (the label-defining motion must survive), jitter and dropout are
/// per point and per frame. Disabled mode is the identity.
pub fn augment_sequence(
    seq: &PointCloudSequence,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PointCloudSequence {
    if !cfg.enabled {
        return seq.clone();
    }
    let deg = PI / 180.0;
    let theta_y = rng.gen_range(-cfg.rot_y_max_deg..=cfg.rot_y_max_deg) * deg;
    let theta_x = rng.gen_range(-cfg.rot_x_max_deg..=cfg.rot_x_max_deg) * deg;
    let (sin_y, cos_y) = theta_y.sin_cos();
    let (sin_x, cos_x) = theta_x.sin_cos();

    let frames = seq
        .frames
        .iter()
        .map(|frame| {
            let n = frame.len();
            let mut points: Vec<Point3> = frame
                .points
                .iter()
                .map(|&p| {
                    let mut q = rotate(p, sin_y, cos_y, sin_x, cos_x);
                    for c in &mut q {
                        let j = (cfg.jitter_sigma * gaussian(rng))
                            .clamp(-cfg.jitter_clip, cfg.jitter_clip);
                        *c += j;
                    }
                    q
                })
                .collect();

            // Dropout: remove up to `dropout_max` of the points, then pad
            // back to the original count by resampling survivors.
            let rate = rng.gen_range(0.0..=cfg.dropout_max);
            let drop = ((n as f64 * rate) as usize).min(n.saturating_sub(1));
            if drop > 0 {
                for i in 0..drop {
                    let j = rng.gen_range(i..n);
                    points.swap(i, j);
                }
                let survivors = points.split_off(drop);
                let mut padded = survivors;
                while padded.len() < n {
                    let pick = rng.gen_range(0..padded.len());
                    padded.push(padded[pick]);
                }
                points = padded;
            }
            PointCloudFrame::from_points(points)
        })
        .collect();
    PointCloudSequence { frames }
}
