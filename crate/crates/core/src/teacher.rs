//! The frozen phonetic branch.
//!
//! Teacher vectors are consumed as data: either JTSF files written offline by
//! an external speech model, or a deterministic synthetic stand-in. Nothing in
//! this module owns trainable parameters.
//!
//! JTSF layout (little-endian): `b"JTSF"`, `u32` version (1), `u32` frames,
//! `u32` dim, then `frames * dim` `f32` values in row-major order. One file
//! per utterance at `<root>/<utt_id>.jtsf`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use sha2::{Digest, Sha256};

use crate::audio::{mel_filterbank, Waveform, FFT_SIZE};
use crate::error::{Error, Result};

pub const TEACHER_HOP: usize = 320;
pub const TEACHER_WINDOW: usize = 400;
pub const JTSF_MAGIC: &[u8; 4] = b"JTSF";
pub const JTSF_VERSION: u32 = 1;
/// Default teacher dimension for vocabulary-sized projection outputs.
pub const DEFAULT_TEACHER_DIM: usize = 32;
/// Bands in the synthetic teacher's spectral profile.
pub const SYNTH_BANDS: usize = 24;

/// Teacher frames for an `n_samples` waveform: `1 + (n - 400) / 320`.
pub fn teacher_frames(n_samples: usize) -> Result<usize> {
    n_samples
        .checked_sub(TEACHER_WINDOW)
        .map(|r| 1 + r / TEACHER_HOP)
        .ok_or(Error::TooShort {
            got: n_samples,
            need: TEACHER_WINDOW,
        })
}

/// Phonetic vectors `V`, one row per 20 ms teacher frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSequence {
    pub utt_id: String,
    pub vectors: Array2<f64>,
}

impl TeacherSequence {
    pub fn num_frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn hop_samples(&self) -> usize {
        TEACHER_HOP
    }

    pub fn window_samples(&self) -> usize {
        TEACHER_WINDOW
    }

    /// Rows covering a crop of `crop_len` samples starting at `offset`.
    ///
    /// The first row is `offset / 320`; rows past the end wrap around, which
    /// mirrors how short utterances are wrap-padded into crops.
    pub fn slice_for_crop(&self, offset: usize, crop_len: usize) -> Result<TeacherSequence> {
        let want = teacher_frames(crop_len)?;
        let total = self.num_frames();
        if total == 0 {
            return Err(Error::Degenerate(format!("teacher sequence {} is empty", self.utt_id)));
        }
        let start = offset / TEACHER_HOP;
        let vectors = Array2::from_shape_fn((want, self.dim()), |(t, d)| {
            self.vectors[[(start + t) % total, d]]
        });
        Ok(TeacherSequence {
            utt_id: self.utt_id.clone(),
            vectors,
        })
    }
}

/// Where teacher vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherSource {
    FileBacked { root: PathBuf, dim: usize },
    Synthetic { seed: u64, dim: usize },
}

impl TeacherSource {
    pub fn dim(&self) -> usize {
        match self {
            TeacherSource::FileBacked { dim, .. } | TeacherSource::Synthetic { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::invalid("teacher dim must be at least 1"));
        }
        if let TeacherSource::FileBacked { root, .. } = self {
            if !root.is_dir() {
                return Err(Error::Missing {
                    kind: "teacher feature directory",
                    name: root.display().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Path of the feature file for `utt_id` (file-backed sources only).
    pub fn file_for(&self, utt_id: &str) -> Option<PathBuf> {
        match self {
            TeacherSource::FileBacked { root, .. } => Some(root.join(format!("{utt_id}.jtsf"))),
            TeacherSource::Synthetic { .. } => None,
        }
    }
}

/// Loads (file-backed) or computes (synthetic, from `waveform`) the teacher
/// sequence for `utt_id`.
pub fn load_teacher(src: &TeacherSource, utt_id: &str, waveform: Option<&Waveform>) -> Result<TeacherSequence> {
    match src {
        TeacherSource::FileBacked { root, dim } => {
            let path = root.join(format!("{utt_id}.jtsf"));
            if !path.exists() {
                return Err(Error::Missing {
                    kind: "teacher feature file",
                    name: path.display().to_string(),
                });
            }
            let vectors = read_jtsf(&path)?;
            if vectors.ncols() != *dim {
                return Err(Error::ShapeMismatch(format!(
                    "{}: teacher dim {} but source declares {dim}",
                    path.display(),
                    vectors.ncols()
                )));
            }
            Ok(TeacherSequence {
                utt_id: utt_id.to_string(),
                vectors,
            })
        }
        TeacherSource::Synthetic { seed, dim } => {
            let w = waveform.ok_or_else(|| Error::Missing {
                kind: "waveform for synthetic teacher",
                name: utt_id.to_string(),
            })?;
            let mut seq = synthetic_teacher(w, *dim, *seed)?;
            seq.utt_id = utt_id.to_string();
            Ok(seq)
        }
    }
}

/// Deterministic stand-in for a frozen speech model.
///
/// Each 400-sample window (hop 320) is reduced to its energy-normalized band
/// profile over [`SYNTH_BANDS`] mel bands; the mean-removed log profile plus a
/// constant term is mapped through a seeded Gaussian projection and
/// unit-normalized. Normalizing the profile before the log makes the output
/// invariant to the waveform's gain.
pub fn synthetic_teacher(w: &Waveform, dim: usize, seed: u64) -> Result<TeacherSequence> {
    if dim == 0 {
        return Err(Error::invalid("teacher dim must be at least 1"));
    }
    let frames = teacher_frames(w.len())?;
    let bank = mel_filterbank(SYNTH_BANDS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..dim * (SYNTH_BANDS + 1))
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let window: Vec<f64> = (0..TEACHER_WINDOW)
        .map(|n| 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / (TEACHER_WINDOW - 1) as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Array2::zeros((frames, dim));
    let mut feat = vec![0.0; SYNTH_BANDS + 1];
    for t in 0..frames {
        let chunk = &w.samples()[t * TEACHER_HOP..t * TEACHER_HOP + TEACHER_WINDOW];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (n, v) in chunk.iter().enumerate() {
            buf[n].re = v * window[n];
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let energies: Vec<f64> = (0..SYNTH_BANDS)
            .map(|b| bank.row(b).iter().zip(&power).map(|(a, p)| a * p).sum())
            .collect();
        let total: f64 = energies.iter().sum();
        for (b, e) in energies.iter().enumerate() {
            let share = if total > 0.0 { e / total } else { 1.0 / SYNTH_BANDS as f64 };
            feat[b] = (share + 1e-10).ln();
        }
        let mean = feat[..SYNTH_BANDS].iter().sum::<f64>() / SYNTH_BANDS as f64;
        feat[..SYNTH_BANDS].iter_mut().for_each(|v| *v -= mean);
        feat[SYNTH_BANDS] = 1.0;
        let mut norm = 0.0;
        for d in 0..dim {
            let row = &proj[d * (SYNTH_BANDS + 1)..(d + 1) * (SYNTH_BANDS + 1)];
            let v: f64 = row.iter().zip(&feat).map(|(a, b)| a * b).sum();
            out[[t, d]] = v;
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm > 0.0 {
            out.row_mut(t).iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(TeacherSequence {
        utt_id: String::new(),
        vectors: out,
    })
}

/// Writes a JTSF file (values stored as `f32`).
pub fn write_jtsf(path: impl AsRef<Path>, vectors: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (t, d) = vectors.dim();
    let io = |e| Error::io(path, e);
    w.write_all(JTSF_MAGIC).map_err(io)?;
    w.write_all(&JTSF_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(t as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    for v in vectors.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jtsf(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::format("JTSF", format!("{}: truncated header", path.display())))?;
    if &header[0..4] != JTSF_MAGIC {
        return Err(Error::format("JTSF", format!("{}: bad magic", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != JTSF_VERSION {
        return Err(Error::format("JTSF", format!("{}: unsupported version {version}", path.display())));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != t * d * 4 {
        return Err(Error::format(
            "JTSF",
            format!("{}: expected {} payload bytes, found {}", path.display(), t * d * 4, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((t, d), data).map_err(|e| Error::format("JTSF", e.to_string()))
}

/// SHA-256 over every `.jtsf` file under `root`, in file-name order.
pub fn teacher_dir_checksum(root: impl AsRef<Path>) -> Result<String> {
    let root = root.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jtsf"))
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap().as_encoded_bytes());
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex(&h.finalize()))
}

/// SHA-256 over the exact bits of a set of teacher sequences.
pub fn sequence_checksum<'a>(seqs: impl IntoIterator<Item = &'a TeacherSequence>) -> String {
    let mut h = Sha256::new();
    for s in seqs {
        h.update(s.utt_id.as_bytes());
        h.update((s.num_frames() as u64).to_le_bytes());
        h.update((s.dim() as u64).to_le_bytes());
        for v in s.vectors.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn frame_formula() {
        assert_eq!(teacher_frames(16000).unwrap(), 49);
        assert_eq!(teacher_frames(400).unwrap(), 1);
        assert_eq!(teacher_frames(32000).unwrap(), 99);
        assert!(teacher_frames(399).is_err());
    }

    #[test]
    fn synthetic_teacher_properties() {
        let w = noise(1, 16000);
        let a = synthetic_teacher(&w, 16, 3).unwrap();
        assert_eq!(a.vectors.dim(), (49, 16));
        for row in a.vectors.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, synthetic_teacher(&w, 16, 3).unwrap());
        assert_ne!(a, synthetic_teacher(&w, 16, 4).unwrap());

        let doubled = synthetic_teacher(&w.scaled(2.0), 16, 3).unwrap();
        assert_eq!(a, doubled);
        let tripled = synthetic_teacher(&w.scaled(3.0), 16, 3).unwrap();
        for (x, y) in a.vectors.iter().zip(tripled.vectors.iter()) {
            assert!((x - y).abs() < 1e-9);
        }

        let z = synthetic_teacher(&Waveform::new(vec![0.0; 2000]).unwrap(), 8, 1).unwrap();
        let first = z.vectors.row(0).to_owned();
        assert!(z.vectors.rows().into_iter().all(|r| r == first));
        assert!((first.dot(&first) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_backed_loading() {
        let dir = tempfile::tempdir().unwrap();
        let v = Array2::from_shape_fn((49, 32), |(t, d)| (t * 32 + d) as f64 * 0.25);
        write_jtsf(dir.path().join("u1.jtsf"), &v).unwrap();
        let src = TeacherSource::FileBacked {
            root: dir.path().to_path_buf(),
            dim: 32,
        };
        src.validate().unwrap();
        let seq = load_teacher(&src, "u1", None).unwrap();
        assert_eq!(seq.vectors, v);

        let wrong = TeacherSource::FileBacked {
            root: dir.path().to_path_buf(),
            dim: 16,
        };
        assert!(matches!(load_teacher(&wrong, "u1", None), Err(Error::ShapeMismatch(_))));
        assert!(matches!(load_teacher(&src, "u2", None), Err(Error::Missing { .. })));

        fs::write(dir.path().join("bad.jtsf"), b"JTSX\x01\0\0\0").unwrap();
        assert!(matches!(load_teacher(&src, "bad", None), Err(Error::Format { .. })));

        let before = teacher_dir_checksum(dir.path()).unwrap();
        let _ = load_teacher(&src, "u1", None).unwrap();
        assert_eq!(before, teacher_dir_checksum(dir.path()).unwrap());
    }

    #[test]
    fn jtsf_header_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jtsf");
        write_jtsf(&path, &Array2::from_shape_vec((1, 2), vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut want = b"JTSF".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn synthetic_source_needs_waveform() {
        let src = TeacherSource::Synthetic { seed: 1, dim: 8 };
        assert!(load_teacher(&src, "u", None).is_err());
        let w = noise(2, 4000);
        let a = load_teacher(&src, "u", Some(&w)).unwrap();
        let b = load_teacher(&src, "u", Some(&w)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.utt_id, "u");
    }

    #[test]
    fn crop_slicing_follows_teacher_hop() {
        let seq = TeacherSequence {
            utt_id: "u".into(),
            vectors: Array2::from_shape_fn((10, 2), |(t, d)| (t * 2 + d) as f64),
        };
        let s = seq.slice_for_crop(640, 400 + 320 * 3).unwrap();
        assert_eq!(s.num_frames(), 4);
        assert_eq!(s.vectors[[0, 0]], 4.0);
        let wrapped = seq.slice_for_crop(320 * 8, 400 + 320 * 3).unwrap();
        assert_eq!(wrapped.vectors[[2, 0]], 0.0);
    }
}
