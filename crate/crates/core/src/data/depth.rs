//! Depth-map ingestion: 16-bit PGM reading and pinhole back-projection.

use super::DataError;
use crate::geom::{Point3, PointCloudFrame};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One depth image in millimeters; zero depth marks a missing pixel.
#[derive(Clone, Debug)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth_mm: Vec<u16>,
    pub intrinsics: CameraIntrinsics,
}

/// Back-project every nonzero pixel through the pinhole model:
/// `X = (u - cx) * z / fx`, `Y = (v - cy) * z / fy`, `Z = z`, in meters.
pub fn depth_to_points(frame: &DepthFrame) -> Result<PointCloudFrame, DataError> {
    let k = frame.intrinsics;
    assert!(k.fx > 0.0 && k.fy > 0.0, "intrinsics must be positive");
    let mut points: Vec<Point3> = Vec::new();
    for v in 0..frame.height {
        for u in 0..frame.width {
            let raw = frame.depth_mm[v * frame.width + u];
            if raw == 0 {
                continue;
            }
            let z = raw as f64 / 1000.0;
            points.push([
                (u as f64 - k.cx) * z / k.fx,
                (v as f64 - k.cy) * z / k.fy,
                z,
            ]);
        }
    }
    if points.is_empty() {
        return Err(DataError::EmptyDepthFrame);
    }
    Ok(PointCloudFrame::from_points(points))
}

/// Read a binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>), DataError> {
    let bad = |msg: &str| DataError::BadPgm {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(super::io_err(path))?);

    // Header tokens may be separated by whitespace and '#' comments.
    let token = |r: &mut BufReader<File>| -> Result<String, DataError> {
        let mut tok = String::new();
        let mut in_comment = false;
        loop {
            let mut byte = [0u8; 1];
            if r.read(&mut byte).map_err(super::io_err(path))? == 0 {
                if tok.is_empty() {
                    return Err(bad("truncated header"));
                }
                return Ok(tok);
            }
            let c = byte[0] as char;
            if in_comment {
                if c == '\n' {
                    in_comment = false;
                }
            } else if c == '#' {
                in_comment = true;
            } else if c.is_ascii_whitespace() {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            } else {
                tok.push(c);
            }
        }
    };

    if token(&mut r)? != "P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let width: usize = token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = token(&mut r)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 65535 {
        return Err(bad(&format!("expected 16-bit maxval 65535, got {maxval}")));
    }

    let mut raw = vec![0u8; width * height * 2];
    r.read_exact(&mut raw).map_err(super::io_err(path))?;
    // PGM samples above 255 are big-endian.
    let depth = raw
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((width, height, depth))
}

/// Write a 16-bit PGM; the inverse of [`read_pgm16`].
pub fn write_pgm16(
    path: &Path,
    width: usize,
    height: usize,
    depth: &[u16],
) -> Result<(), DataError> {
    debug_assert_eq!(depth.len(), width * height);
    let mut w = BufWriter::new(File::create(path).map_err(super::io_err(path))?);
    write!(w, "P5\n{width} {height}\n65535\n").map_err(super::io_err(path))?;
    for &d in depth {
        w.write_all(&d.to_be_bytes()).map_err(super::io_err(path))?;
    }
    w.flush().map_err(super::io_err(path))
}

/// Uniform temporal subsampling of `count` frames down to `target` indices
/// (all frames, possibly repeated, when fewer are available).
pub fn uniform_frame_indices(count: usize, target: usize) -> Vec<usize> {
    assert!(count > 0 && target > 0);
    (0..target).map(|i| (i * count) / target).collect()
}
