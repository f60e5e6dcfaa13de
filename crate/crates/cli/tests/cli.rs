//! End-to-end tests of the command-line surface, driving the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pcseq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pcseq"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pcseq-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small model + small dataset so the whole workflow stays in seconds.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "frames = 6\n\
         points_per_frame = 64\n\
         classes = 4\n\
         sa1_centroids = 8\n\
         sa1_radius = 0.5\n\
         sa1_group_size = 8\n\
         sa1_widths = 8,8,16\n\
         sa1_attention = false\n\
         sa2_centroids = 4\n\
         sa2_radius = 0.9\n\
         sa2_group_size = 4\n\
         sa2_widths = 16,16,32\n\
         sa2_attention = true\n\
         global_widths = 32,32,64\n\
         mixer_layers = 2\n\
         head_hidden = 16\n\
         batch_size = 4\n\
         epochs = 2\n\
         augment = false\n",
    )
    .unwrap();
    path
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tmp("flow");
    let data = dir.join("data");
    let cfg = small_config(&dir);

    let out = pcseq()
        .args(["synth", "--out"])
        .arg(&data)
        .args(["--train-per-class", "2", "--test-per-class", "1"])
        .args(["--frames", "6", "--points", "64", "--seed", "9"])
        .output()
        .unwrap();
    let text = ok(&out);
    assert!(text.contains("8 train and 4 test"), "{text}");
    assert!(data.join("manifest.tsv").exists());

    let ckpt = dir.join("model.spnc");
    let metrics = dir.join("metrics.tsv");
    let out = pcseq()
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "9", "--workers", "2"])
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .arg("--metrics")
        .arg(&metrics)
        .output()
        .unwrap();
    let text = ok(&out);
    assert!(text.contains("checkpoint written"), "{text}");
    let log = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(log.lines().count(), 2, "one metrics line per epoch: {log}");
    for line in log.lines() {
        assert_eq!(line.split('\t').count(), 5, "epoch, lr, loss, train, eval");
    }

    let out = pcseq()
        .arg("--config")
        .arg(&cfg)
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--split", "test"])
        .output()
        .unwrap();
    let text = ok(&out);
    assert!(text.contains("accuracy"), "{text}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_reports_one_row_per_worker_count_with_equal_checksums() {
    let dir = tmp("bench");
    let cfg = small_config(&dir);
    let out = pcseq()
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "4"])
        .args(["bench", "--workers-list", "1,2,4", "--batch", "2"])
        .args(["--reps", "3", "--warmup", "3"])
        .output()
        .unwrap();
    let text = ok(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{text}");
    let checksums: Vec<&str> = rows
        .iter()
        .map(|r| r.split('\t').next_back().unwrap())
        .collect();
    assert!(
        checksums.windows(2).all(|w| w[0] == w[1]),
        "checksums differ: {text}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_exits_zero() {
    let out = pcseq()
        .args(["--seed", "5", "gradcheck", "--tolerance", "1e-4"])
        .output()
        .unwrap();
    let text = ok(&out);
    assert!(text.contains("pass"), "{text}");
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = pcseq().args(["train", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn unknown_subcommand_fails() {
    let out = pcseq().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn convert_builds_a_sequence_from_depth_frames() {
    let dir = tmp("convert");
    let depth_dir = dir.join("depth");
    std::fs::create_dir_all(&depth_dir).unwrap();

    // Eight 16x12 frames of a synthetic square moving across the image.
    let (w, h) = (16usize, 12usize);
    for f in 0..8usize {
        let mut depth = vec![0u16; w * h];
        for v in 3..9 {
            for u in (2 + f)..(6 + f) {
                depth[v * w + u] = 1200 + (f as u16) * 40;
            }
        }
        let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
        for d in depth {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        std::fs::write(depth_dir.join(format!("frame-{f:02}.pgm")), bytes).unwrap();
    }

    let out_path = dir.join("seq.pcsq");
    let out = pcseq()
        .args(["--seed", "3"])
        .args(["convert", "--input"])
        .arg(&depth_dir)
        .arg("--output")
        .arg(&out_path)
        .args(["--label", "2"])
        .args(["--intrinsics", "20,20,8,6"])
        .args(["--frames", "4"])
        .output()
        .unwrap();
    ok(&out);

    let record = pcseq_core::data::read_sequence(&out_path).unwrap();
    assert_eq!(record.label, 2);
    assert_eq!(record.sequence.len(), 4, "uniform subsampling to 4 frames");
    for frame in &record.sequence.frames {
        assert_eq!(frame.len(), 512, "presampled to the fixed budget");
        for p in &frame.points {
            assert!(p.iter().all(|c| c.abs() <= 1.0), "normalized to unit box");
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}
