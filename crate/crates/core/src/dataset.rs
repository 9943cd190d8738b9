//! On-disk corpus format.
//!
//! A dataset file is a single ASCII header line
//!
//! ```text
//! UNIGEN-DS v1 <height> <width> <n_types> <n_samples>\n
//! ```
//!
//! followed by `n_samples` binary records. Each record is, in order:
//! `type_id` (u32 LE), prompt length (u32 LE), the prompt token ids
//! (u32 LE each), the target pixels, then the condition pixels — both as
//! row-major, channel-interleaved RGB f32 little-endian. Records are written
//! in type-major order (all of type 0, then type 1, ...). The format has no
//! padding, so equal corpora produce byte-identical files.

use std::path::Path;

use crate::datagen::{generate_corpus, Sample, IMPLEMENTED_TYPES};
use crate::error::TensorError;
use crate::img::Image;

type Result<T> = std::result::Result<T, TensorError>;

const MAGIC: &str = "UNIGEN-DS";
const VERSION: &str = "v1";

/// An in-memory corpus: image geometry, the number of condition-type slots
/// the records may reference, and the samples themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub n_types: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Wraps samples after checking they agree with the declared geometry.
    pub fn from_samples(
        h: usize,
        w: usize,
        n_types: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        const OP: &str = "dataset";
        for (i, s) in samples.iter().enumerate() {
            if s.type_id >= n_types {
                return Err(TensorError::invalid(
                    OP,
                    format!("sample {i}: type_id {} not below n_types {n_types}", s.type_id),
                ));
            }
            if s.prompt.is_empty() {
                return Err(TensorError::invalid(OP, format!("sample {i}: empty prompt")));
            }
            for img in [&s.target, &s.condition] {
                if img.h != h || img.w != w {
                    return Err(TensorError::invalid(
                        OP,
                        format!("sample {i}: image is {}x{}, expected {h}x{w}", img.h, img.w),
                    ));
                }
            }
        }
        Ok(Dataset {
            h,
            w,
            n_types,
            samples,
        })
    }

    /// Number of samples per type id, length `n_types`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.n_types];
        for s in &self.samples {
            hist[s.type_id] += 1;
        }
        hist
    }

    /// Indices of all samples with the given type id, in file order.
    pub fn indices_of_type(&self, type_id: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].type_id == type_id)
            .collect()
    }

    /// Serializes the corpus to the documented byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let per_image = self.h * self.w * Image::CHANNELS;
        let mut buf = Vec::with_capacity(
            64 + self
                .samples
                .iter()
                .map(|s| 8 + 4 * s.prompt.len() + 8 * per_image)
                .sum::<usize>(),
        );
        buf.extend_from_slice(
            format!(
                "{MAGIC} {VERSION} {} {} {} {}\n",
                self.h,
                self.w,
                self.n_types,
                self.samples.len()
            )
            .as_bytes(),
        );
        for s in &self.samples {
            buf.extend_from_slice(&(s.type_id as u32).to_le_bytes());
            buf.extend_from_slice(&(s.prompt.len() as u32).to_le_bytes());
            for &t in &s.prompt {
                buf.extend_from_slice(&t.to_le_bytes());
            }
            for img in [&s.target, &s.condition] {
                for v in img.to_f32() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| TensorError::io("dataset write", path.display().to_string(), e))
    }

    /// Parses the documented byte layout, rejecting malformed headers,
    /// truncated records, and trailing bytes.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        const OP: &str = "dataset read";
        let fail = |msg: String| TensorError::invalid(OP, format!("{origin}: {msg}"));

        let header_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| fail("header is not ASCII".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != MAGIC || fields[1] != VERSION {
            return Err(fail(format!(
                "bad header {header:?}, expected \"{MAGIC} {VERSION} h w n_types n_samples\""
            )));
        }
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| fail(format!("header field {what} = {s:?} is not a number")))
        };
        let h = parse(fields[2], "height")?;
        let w = parse(fields[3], "width")?;
        let n_types = parse(fields[4], "n_types")?;
        let n_samples = parse(fields[5], "n_samples")?;
        if h == 0 || w == 0 || n_types == 0 {
            return Err(fail("header dimensions must be positive".into()));
        }

        let body = &bytes[header_end + 1..];
        let mut pos = 0usize;
        let take_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
            let end = *pos + 4;
            if end > body.len() {
                return Err(fail(format!("file truncated reading {what}")));
            }
            let v = u32::from_le_bytes(body[*pos..end].try_into().unwrap());
            *pos = end;
            Ok(v)
        };

        let per_image = h * w * Image::CHANNELS;
        let mut samples = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let type_id = take_u32(&mut pos, "type_id")? as usize;
            if type_id >= n_types {
                return Err(fail(format!(
                    "record {i}: type_id {type_id} not below n_types {n_types}"
                )));
            }
            let prompt_len = take_u32(&mut pos, "prompt length")? as usize;
            if prompt_len == 0 {
                return Err(fail(format!("record {i}: empty prompt")));
            }
            let mut prompt = Vec::with_capacity(prompt_len);
            for _ in 0..prompt_len {
                prompt.push(take_u32(&mut pos, "prompt token")?);
            }
            let read_image = |pos: &mut usize, what: &str| -> Result<Image> {
                let end = *pos + 4 * per_image;
                if end > body.len() {
                    return Err(fail(format!("file truncated reading {what} of record {i}")));
                }
                let floats: Vec<f32> = body[*pos..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                *pos = end;
                Ok(Image::from_f32(h, w, &floats))
            };
            let target = read_image(&mut pos, "target")?;
            let condition = read_image(&mut pos, "condition")?;
            samples.push(Sample {
                type_id,
                prompt,
                target,
                condition,
            });
        }
        if pos != body.len() {
            return Err(fail(format!(
                "{} trailing bytes after the last record",
                body.len() - pos
            )));
        }
        Ok(Dataset {
            h,
            w,
            n_types,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| TensorError::io("dataset read", path.display().to_string(), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Generates a corpus with `n_per_type` samples of each implemented
/// condition type and writes it to `path`. Deterministic under the seed.
pub fn build_corpus(path: &Path, h: usize, w: usize, n_per_type: usize, seed: u64) -> Result<Dataset> {
    let samples = generate_corpus(h, w, n_per_type, seed)?;
    let ds = Dataset::from_samples(h, w, IMPLEMENTED_TYPES, samples)?;
    ds.write(path)?;
    Ok(ds)
}

// ==== tests ====

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_write_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ds");
        let b = dir.path().join("b.ds");
        let ds = build_corpus(&a, 16, 16, 2, 42).unwrap();
        let back = Dataset::read(&a).unwrap();
        assert_eq!(back.h, 16);
        assert_eq!(back.w, 16);
        assert_eq!(back.n_types, IMPLEMENTED_TYPES);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (x, y) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(x.type_id, y.type_id);
            assert_eq!(x.prompt, y.prompt);
        }
        back.write(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn same_seed_builds_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ds");
        let b = dir.path().join("b.ds");
        let c = dir.path().join("c.ds");
        build_corpus(&a, 16, 16, 3, 7).unwrap();
        build_corpus(&b, 16, 16, 3, 7).unwrap();
        build_corpus(&c, 16, 16, 3, 8).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());
        assert_ne!(bytes_a, std::fs::read(&c).unwrap());
    }

    #[test]
    fn histogram_of_a_built_file_is_flat() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.ds");
        build_corpus(&path, 16, 16, 2, 1).unwrap();
        let ds = Dataset::read(&path).unwrap();
        assert_eq!(ds.samples.len(), 16);
        assert_eq!(ds.histogram(), vec![2; IMPLEMENTED_TYPES]);
        for t in 0..IMPLEMENTED_TYPES {
            assert_eq!(ds.indices_of_type(t), vec![2 * t, 2 * t + 1]);
        }
    }

    #[test]
    fn zero_samples_per_type_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_corpus(&dir.path().join("x.ds"), 16, 16, 0, 1).unwrap_err();
        assert!(err.to_string().contains("at least 1"));
    }

    #[test]
    fn malformed_files_are_rejected_with_the_origin_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.ds");
        build_corpus(&path, 16, 16, 1, 3).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = b"UNIGEN-XX v1 16 16 8 8\n".to_vec();
        let err = Dataset::from_bytes(&bad_magic, "t").unwrap_err();
        assert!(err.to_string().contains("bad header"));

        let truncated = &good[..good.len() - 10];
        let err = Dataset::from_bytes(truncated, "t").unwrap_err();
        assert!(err.to_string().contains("truncated"));

        let mut trailing = good.clone();
        trailing.push(0);
        let err = Dataset::from_bytes(&trailing, "t").unwrap_err();
        assert!(err.to_string().contains("trailing"));

        let err = Dataset::read(&dir.path().join("no-such-file.ds")).unwrap_err();
        assert!(err.to_string().contains("no-such-file.ds"));
    }

    #[test]
    fn type_ids_out_of_range_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.ds");
        let ds = build_corpus(&path, 16, 16, 1, 3).unwrap();
        // Declare fewer type slots than the records use.
        let err = Dataset::from_samples(16, 16, 2, ds.samples).unwrap_err();
        assert!(err.to_string().contains("not below n_types"));
    }
}
