//! Flat `key = value` run configuration covering the model, the training
//! schedule, augmentation, and paths. Unknown keys are rejected; writing and
//! re-parsing a config is lossless.

use super::augment::AugmentConfig;
use super::DataError;
use crate::embed::SetAbstractionConfig;
use crate::model::{ModelConfig, PoolingMode};
use crate::runtime::Precision;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub precision: Precision,
    pub model: ModelConfig,
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_period: u32,
    pub augment: AugmentConfig,
    pub data_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub metrics_log: Option<String>,
}

impl Default for RunConfig {
    /// Desk-scale defaults: the reduced 4-class model with the small-dataset
    /// batch size of 16 and the standard schedule (Adam at 1e-3, halving
    /// every 10 epochs, 90-epoch cap).
    fn default() -> Self {
        RunConfig {
            seed: 7,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            precision: Precision::F64,
            model: ModelConfig::desk(),
            epochs: 90,
            batch_size: 16,
            base_lr: 0.001,
            lr_decay: 0.5,
            lr_decay_period: 10,
            augment: AugmentConfig::default(),
            data_dir: None,
            checkpoint: None,
            metrics_log: None,
        }
    }
}

impl RunConfig {
    /// Full-size model (batch 32, 60 classes), the large-dataset setting.
    pub fn full() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            batch_size: 32,
            ..RunConfig::default()
        }
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| writeln!(s, "{k} = {v}").expect("string io");
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "workers", self.workers.to_string());
        kv(&mut s, "precision", self.precision.to_string());
        kv(&mut s, "frames", m.frames.to_string());
        kv(
            &mut s,
            "points_per_frame",
            m.embed.points_per_frame.to_string(),
        );
        kv(&mut s, "classes", m.classes.to_string());
        for (name, sa) in [("sa1", &m.embed.sa1), ("sa2", &m.embed.sa2)] {
            kv(
                &mut s,
                &format!("{name}_centroids"),
                sa.centroids.to_string(),
            );
            kv(&mut s, &format!("{name}_radius"), sa.radius.to_string());
            kv(
                &mut s,
                &format!("{name}_group_size"),
                sa.group_size.to_string(),
            );
            kv(
                &mut s,
                &format!("{name}_widths"),
                widths_to_string(&sa.mlp_widths),
            );
            kv(
                &mut s,
                &format!("{name}_attention"),
                sa.attention.to_string(),
            );
        }
        kv(
            &mut s,
            "global_widths",
            widths_to_string(&m.embed.global_widths),
        );
        kv(&mut s, "mixer_layers", m.mixer_layers.to_string());
        kv(&mut s, "head_hidden", m.head_hidden.to_string());
        kv(
            &mut s,
            "pooling",
            match m.pooling {
                PoolingMode::Pyramid => "pyramid".into(),
                PoolingMode::SingleMax => "max".into(),
            },
        );
        kv(&mut s, "displacement", m.displacement.to_string());
        kv(&mut s, "time_index_base", m.time_index_base.to_string());
        kv(&mut s, "epochs", self.epochs.to_string());
        kv(&mut s, "batch_size", self.batch_size.to_string());
        kv(&mut s, "base_lr", self.base_lr.to_string());
        kv(&mut s, "lr_decay", self.lr_decay.to_string());
        kv(&mut s, "lr_decay_period", self.lr_decay_period.to_string());
        let a = &self.augment;
        kv(&mut s, "augment", a.enabled.to_string());
        kv(&mut s, "rot_y_max_deg", a.rot_y_max_deg.to_string());
        kv(&mut s, "rot_x_max_deg", a.rot_x_max_deg.to_string());
        kv(&mut s, "jitter_sigma", a.jitter_sigma.to_string());
        kv(&mut s, "jitter_clip", a.jitter_clip.to_string());
        kv(&mut s, "dropout_max", a.dropout_max.to_string());
        for (k, v) in [
            ("data_dir", &self.data_dir),
            ("checkpoint", &self.checkpoint),
            ("metrics_log", &self.metrics_log),
        ] {
            if let Some(v) = v {
                kv(&mut s, k, v.clone());
            }
        }
        s
    }

    /// Parse the flat format against the default base. Blank lines and `#`
    /// comments are allowed; unknown keys are not.
    pub fn parse(text: &str) -> Result<RunConfig, DataError> {
        Self::parse_with_base(text, RunConfig::default())
    }

    /// Parse the flat format; keys absent from the file keep their `base`
    /// values.
    pub fn parse_with_base(text: &str, base: RunConfig) -> Result<RunConfig, DataError> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(DataError::BadConfig {
                    line: i + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            map.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }

        let mut cfg = base;
        macro_rules! set {
            ($key:literal, $target:expr, $kind:literal) => {
                if let Some((line, v)) = map.remove($key) {
                    $target = v.parse().map_err(|_| DataError::BadConfig {
                        line,
                        msg: format!(concat!($key, " must be ", $kind, ", got {:?}"), v),
                    })?;
                }
            };
        }

        set!("seed", cfg.seed, "an integer");
        set!("workers", cfg.workers, "an integer");
        set!("precision", cfg.precision, "f64 or f32");
        set!("frames", cfg.model.frames, "an integer");
        set!(
            "points_per_frame",
            cfg.model.embed.points_per_frame,
            "an integer"
        );
        set!("classes", cfg.model.classes, "an integer");
        {
            let stages: [(&str, &mut SetAbstractionConfig); 2] = [
                ("sa1", &mut cfg.model.embed.sa1),
                ("sa2", &mut cfg.model.embed.sa2),
            ];
            for (name, sa) in stages {
                if let Some((line, v)) = map.remove(&format!("{name}_centroids")) {
                    sa.centroids = parse_num(&v, line, "an integer")?;
                }
                if let Some((line, v)) = map.remove(&format!("{name}_radius")) {
                    sa.radius = parse_num(&v, line, "a number")?;
                }
                if let Some((line, v)) = map.remove(&format!("{name}_group_size")) {
                    sa.group_size = parse_num(&v, line, "an integer")?;
                }
                if let Some((line, v)) = map.remove(&format!("{name}_widths")) {
                    sa.mlp_widths = parse_widths(&v, line)?;
                }
                if let Some((line, v)) = map.remove(&format!("{name}_attention")) {
                    sa.attention = parse_num(&v, line, "true or false")?;
                }
            }
        }
        if let Some((line, v)) = map.remove("global_widths") {
            cfg.model.embed.global_widths = parse_widths(&v, line)?;
        }
        set!("mixer_layers", cfg.model.mixer_layers, "an integer");
        set!("head_hidden", cfg.model.head_hidden, "an integer");
        if let Some((line, v)) = map.remove("pooling") {
            cfg.model.pooling = match v.as_str() {
                "pyramid" => PoolingMode::Pyramid,
                "max" => PoolingMode::SingleMax,
                other => {
                    return Err(DataError::BadConfig {
                        line,
                        msg: format!("pooling must be pyramid or max, got {other:?}"),
                    })
                }
            };
        }
        set!("displacement", cfg.model.displacement, "true or false");
        set!("time_index_base", cfg.model.time_index_base, "an integer");
        set!("epochs", cfg.epochs, "an integer");
        set!("batch_size", cfg.batch_size, "an integer");
        set!("base_lr", cfg.base_lr, "a number");
        set!("lr_decay", cfg.lr_decay, "a number");
        set!("lr_decay_period", cfg.lr_decay_period, "an integer");
        set!("augment", cfg.augment.enabled, "true or false");
        set!("rot_y_max_deg", cfg.augment.rot_y_max_deg, "a number");
        set!("rot_x_max_deg", cfg.augment.rot_x_max_deg, "a number");
        set!("jitter_sigma", cfg.augment.jitter_sigma, "a number");
        set!("jitter_clip", cfg.augment.jitter_clip, "a number");
        set!("dropout_max", cfg.augment.dropout_max, "a number");
        if let Some((_, v)) = map.remove("data_dir") {
            cfg.data_dir = Some(v);
        }
        if let Some((_, v)) = map.remove("checkpoint") {
            cfg.checkpoint = Some(v);
        }
        if let Some((_, v)) = map.remove("metrics_log") {
            cfg.metrics_log = Some(v);
        }

        if let Some((key, (line, _))) = map.into_iter().next() {
            return Err(DataError::BadConfig {
                line,
                msg: format!("unknown key {key:?}"),
            });
        }
        Ok(cfg)
    }
}

fn widths_to_string(w: &[usize; 3]) -> String {
    format!("{},{},{}", w[0], w[1], w[2])
}

fn parse_widths(v: &str, line: usize) -> Result<[usize; 3], DataError> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| DataError::BadConfig {
            line,
            msg: format!("widths must be three comma-separated integers, got {v:?}"),
        })?;
    let [a, b, c] = parts.as_slice() else {
        return Err(DataError::BadConfig {
            line,
            msg: format!("expected exactly three widths, got {v:?}"),
        });
    };
    Ok([*a, *b, *c])
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize, kind: &str) -> Result<T, DataError> {
    v.parse().map_err(|_| DataError::BadConfig {
        line,
        msg: format!("expected {kind}, got {v:?}"),
    })
}

/// One metrics-log line per epoch: epoch, learning rate, train loss,
/// train accuracy, eval accuracy, tab-separated.
pub fn metrics_line(epoch: u32, lr: f64, train_loss: f64, train_acc: f64, eval_acc: f64) -> String {
    format!("{epoch}\t{lr}\t{train_loss:.6}\t{train_acc:.4}\t{eval_acc:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = RunConfig::full();
        cfg.seed = 1234;
        cfg.base_lr = 0.0007;
        cfg.model.embed.sa1.radius = 0.062_500_1;
        cfg.data_dir = Some("data/synth".into());
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\nnot_a_key = 2\n";
        let err = RunConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_fine() {
        let text = "# schedule\n\nseed = 3\nepochs = 12\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.epochs, 12);
    }

    #[test]
    fn bad_values_name_the_line() {
        let err = RunConfig::parse("seed = banana\n").unwrap_err();
        assert!(matches!(err, DataError::BadConfig { line: 1, .. }), "{err}");
    }
}
