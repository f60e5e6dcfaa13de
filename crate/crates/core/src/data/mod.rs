//! Dataset handling: on-disk formats, the synthetic action generator,
//! training-time augmentation, and depth-map conversion.
//!
//! A dataset directory holds one `.pcsq` file per sequence plus
//! `manifest.tsv` mapping `filename <tab> label <tab> split`.

pub mod augment;
pub mod config;
pub mod depth;
pub mod synth;

use crate::geom::{PointCloudFrame, PointCloudSequence};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const PCSQ_MAGIC: &[u8; 4] = b"PCSQ";
const PCSQ_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a sequence file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported sequence file version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("manifest line {line}: expected `file<TAB>label<TAB>split`, got {text:?}")]
    BadManifestLine { line: usize, text: String },
    #[error("manifest line {line}: unknown split {split:?}")]
    BadSplit { line: usize, split: String },
    #[error("{path}: manifest label {manifest} disagrees with stored label {stored}")]
    LabelMismatch {
        path: PathBuf,
        manifest: usize,
        stored: usize,
    },
    #[error("label {label} out of range for {classes} classes in {source_id}")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        source_id: String,
    },
    #[error("depth frame has no nonzero pixels")]
    EmptyDepthFrame,
    #[error("{path}: bad PGM: {msg}")]
    BadPgm { path: PathBuf, msg: String },
    #[error("config line {line}: {msg}")]
    BadConfig { line: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The unit of supervision: one preprocessed sequence plus its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub sequence: PointCloudSequence,
    pub label: usize,
    pub source_id: String,
}

impl SequenceRecord {
    pub fn check_label(&self, classes: usize) -> Result<(), DataError> {
        if self.label >= classes {
            return Err(DataError::LabelOutOfRange {
                label: self.label,
                classes,
                source_id: self.source_id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Write one sequence file: magic `PCSQ`, version, T, n, label, then
/// `T * n * 3` little-endian `f32` coordinates, frame-major, point-major,
/// XYZ innermost.
pub fn write_sequence(record: &SequenceRecord, path: &Path) -> Result<(), DataError> {
    let seq = &record.sequence;
    let n = seq.frames.first().map_or(0, PointCloudFrame::len);
    debug_assert!(
        seq.frames.iter().all(|f| f.len() == n),
        "sequence files require a uniform point count per frame"
    );
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    write(PCSQ_MAGIC)?;
    write(&PCSQ_VERSION.to_le_bytes())?;
    write(&(seq.len() as u32).to_le_bytes())?;
    write(&(n as u32).to_le_bytes())?;
    write(&(record.label as u32).to_le_bytes())?;
    for frame in &seq.frames {
        for p in &frame.points {
            for &c in p {
                write(&(c as f32).to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_sequence(path: &Path) -> Result<SequenceRecord, DataError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != PCSQ_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, DataError> {
        r.read_exact(&mut u32buf).map_err(io_err(path))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != PCSQ_VERSION {
        return Err(DataError::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let frames = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let label = read_u32(&mut r)? as usize;

    let mut all = vec![0u8; frames * n * 3 * 4];
    r.read_exact(&mut all).map_err(io_err(path))?;
    let mut values = all
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64);
    let seq = PointCloudSequence {
        frames: (0..frames)
            .map(|_| {
                PointCloudFrame::from_points(
                    (0..n)
                        .map(|_| {
                            [
                                values.next().expect("sized"),
                                values.next().expect("sized"),
                                values.next().expect("sized"),
                            ]
                        })
                        .collect(),
                )
            })
            .collect(),
    };
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SequenceRecord {
        sequence: seq,
        label,
        source_id,
    })
}

/// Write a whole dataset directory (sequence files plus manifest).
pub fn write_dataset(
    dir: &Path,
    train: &[SequenceRecord],
    test: &[SequenceRecord],
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest =
        BufWriter::new(File::create(&manifest_path).map_err(io_err(&manifest_path))?);
    for (records, split) in [(train, Split::Train), (test, Split::Test)] {
        for record in records {
            let file = format!("{}.pcsq", record.source_id);
            write_sequence(record, &dir.join(&file))?;
            writeln!(manifest, "{file}\t{}\t{split}", record.label)
                .map_err(io_err(&manifest_path))?;
        }
    }
    manifest.flush().map_err(io_err(&manifest_path))
}

/// Load a dataset directory into train and test record lists, in manifest
/// order. Manifest labels must agree with the labels stored in the files.
pub fn load_dataset(dir: &Path) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>), DataError> {
    let manifest_path = dir.join("manifest.tsv");
    let reader = BufReader::new(File::open(&manifest_path).map_err(io_err(&manifest_path))?);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [file, label, split] = fields.as_slice() else {
            return Err(DataError::BadManifestLine {
                line: i + 1,
                text: line.clone(),
            });
        };
        let label: usize = label.parse().map_err(|_| DataError::BadManifestLine {
            line: i + 1,
            text: line.clone(),
        })?;
        let path = dir.join(file);
        let record = read_sequence(&path)?;
        if record.label != label {
            return Err(DataError::LabelMismatch {
                path,
                manifest: label,
                stored: record.label,
            });
        }
        match *split {
            "train" => train.push(record),
            "test" => test.push(record),
            other => {
                return Err(DataError::BadSplit {
                    line: i + 1,
                    split: other.to_string(),
                })
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("pcsq-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn f32_sequence(frames: usize, n: usize, seed: u64) -> PointCloudSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloudSequence::from_frames(
            (0..frames)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            let p: Point3 = [
                                rng.gen_range(-1.0f32..1.0) as f64,
                                rng.gen_range(-1.0f32..1.0) as f64,
                                rng.gen_range(-1.0f32..1.0) as f64,
                            ];
                            p
                        })
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn sequence_file_round_trips_bit_exactly() {
        let dir = tmp_dir("seqrt");
        let record = SequenceRecord {
            sequence: f32_sequence(4, 16, 5),
            label: 2,
            source_id: "unit".into(),
        };
        let path = dir.join("unit.pcsq");
        write_sequence(&record, &path).unwrap();
        let loaded = read_sequence(&path).unwrap();
        assert_eq!(loaded.sequence, record.sequence, "coordinates bit-exact");
        assert_eq!(loaded.label, 2);

        // A second write of the loaded record is byte-identical.
        let path2 = dir.join("unit2.pcsq");
        write_sequence(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pcsq_header_layout_is_pinned() {
        let dir = tmp_dir("seqhdr");
        let record = SequenceRecord {
            sequence: PointCloudSequence::from_frames(vec![vec![[1.0, 2.0, 3.0]]]),
            label: 7,
            source_id: "hdr".into(),
        };
        let path = dir.join("hdr.pcsq");
        write_sequence(&record, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PCSQ");
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        assert_eq!(u32_at(4), 1, "version");
        assert_eq!(u32_at(8), 1, "T");
        assert_eq!(u32_at(12), 1, "n");
        assert_eq!(u32_at(16), 7, "label");
        assert_eq!(
            f32::from_le_bytes(bytes[20..24].try_into().unwrap()),
            1.0f32
        );
        assert_eq!(bytes.len(), 20 + 3 * 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_directory_round_trips() {
        let dir = tmp_dir("ds");
        let train: Vec<SequenceRecord> = (0..3)
            .map(|i| SequenceRecord {
                sequence: f32_sequence(3, 8, i),
                label: (i % 2) as usize,
                source_id: format!("train-{i}"),
            })
            .collect();
        let test: Vec<SequenceRecord> = (0..2)
            .map(|i| SequenceRecord {
                sequence: f32_sequence(3, 8, 10 + i),
                label: (i % 2) as usize,
                source_id: format!("test-{i}"),
            })
            .collect();
        write_dataset(&dir, &train, &test).unwrap();
        let (ltrain, ltest) = load_dataset(&dir).unwrap();
        assert_eq!(ltrain, train);
        assert_eq!(ltest, test);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_label_disagreement_is_rejected() {
        let dir = tmp_dir("dsbad");
        let record = SequenceRecord {
            sequence: f32_sequence(2, 4, 0),
            label: 1,
            source_id: "x".into(),
        };
        write_sequence(&record, &dir.join("x.pcsq")).unwrap();
        std::fs::write(dir.join("manifest.tsv"), "x.pcsq\t0\ttrain\n").unwrap();
        assert!(matches!(
            load_dataset(&dir),
            Err(DataError::LabelMismatch { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
