//! The classifier: a small conv net whose penultimate activation is the
//! embedding used by every metric-loss term and the PCA analysis.
//!
//! conv(1->16, 5x5) -> relu -> pool -> conv(16->32, 5x5) -> relu -> pool
//! -> linear(512->64) -> relu = embedding -> linear(64->10) = logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const EMBEDDING_DIM: usize = 64;
const FLAT_FEATURES: usize = 32 * 4 * 4;

const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Fixed parameter layout: (name, shape) in storage order.
pub const PARAM_SPEC: [(&str, &[usize]); 8] = [
    ("conv1.weight", &[16, 1, 5, 5]),
    ("conv1.bias", &[16]),
    ("conv2.weight", &[32, 16, 5, 5]),
    ("conv2.bias", &[32]),
    ("fc1.weight", &[FLAT_FEATURES, EMBEDDING_DIM]),
    ("fc1.bias", &[EMBEDDING_DIM]),
    ("fc2.weight", &[EMBEDDING_DIM, NUM_CLASSES]),
    ("fc2.bias", &[NUM_CLASSES]),
];

/// Ordered collection of the model's weight tensors.
#[derive(Debug, Clone)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<ModelParams> {
        if tensors.len() != PARAM_SPEC.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                PARAM_SPEC.len(),
                tensors.len()
            )));
        }
        for (t, (name, shape)) in tensors.iter().zip(PARAM_SPEC) {
            if t.shape() != shape {
                return Err(Error::Shape {
                    op: "model params",
                    detail: format!("{name}: {:?} vs {:?}", t.shape(), shape),
                });
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_SPEC
            .iter()
            .map(|(n, _)| *n)
            .zip(self.tensors.iter())
    }

    /// Attach every parameter to a tape as a gradient-tracked leaf.
    pub fn attach(&self, tape: &Tape) -> ModelParams {
        ModelParams {
            tensors: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Hash of all parameter values; cheap identity check for the
    /// no-update-during-attack invariant.
    pub fn value_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub params: ModelParams,
}

/// Embeddings (B x 64) and logits (B x 10) of one forward evaluation.
pub struct ForwardPass {
    pub embeddings: Tensor,
    pub logits: Tensor,
}

impl ClassifierModel {
    /// Seeded uniform fan-in initialization.
    pub fn init(seed: u64) -> ClassifierModel {
        let mut r = rng::stream(seed, "init");
        let tensors = PARAM_SPEC
            .iter()
            .map(|(name, shape)| {
                let fan_in = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else if shape.len() == 2 {
                    shape[0]
                } else {
                    // bias: fan-in of the layer it belongs to
                    match *name {
                        "conv1.bias" => 25,
                        "conv2.bias" => 16 * 25,
                        "fc1.bias" => FLAT_FEATURES,
                        _ => EMBEDDING_DIM,
                    }
                };
                let bound = (1.0 / fan_in as f32).sqrt();
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| r.gen_range(-bound..bound)).collect();
                Tensor::from_vec(data, shape).unwrap()
            })
            .collect();
        ClassifierModel {
            params: ModelParams::from_tensors(tensors).unwrap(),
        }
    }

    /// Forward pass with explicitly supplied (possibly tape-attached)
    /// parameters; `x` must be B x 1 x 28 x 28.
    pub fn forward_with(&self, tape: &Tape, x: &Tensor, params: &ModelParams) -> Result<ForwardPass> {
        let batch = match x.shape() {
            [b, 1, h, w] if *h == IMAGE_SIDE && *w == IMAGE_SIDE => *b,
            other => {
                return Err(Error::Shape {
                    op: "forward",
                    detail: format!("expected Bx1x28x28 input, got {:?}", other),
                })
            }
        };
        let p = &params.tensors;
        let c1 = tape.relu(&tape.conv2d(x, &p[0], &p[1])?);
        let p1 = tape.maxpool2d(&c1)?;
        let c2 = tape.relu(&tape.conv2d(&p1, &p[2], &p[3])?);
        let p2 = tape.maxpool2d(&c2)?;
        let flat = p2.reshape(&[batch, FLAT_FEATURES])?;
        let pre = tape.add_row(&tape.matmul(&flat, &p[4])?, &p[5])?;
        let embeddings = tape.relu(&pre);
        let logits = tape.add_row(&tape.matmul(&embeddings, &p[6])?, &p[7])?;
        Ok(ForwardPass { embeddings, logits })
    }

    /// Forward pass against the stored (detached) parameters.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<ForwardPass> {
        self.forward_with(tape, x, &self.params)
    }

    /// Argmax predictions per batch row; ties break to the lowest class.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let pass = self.forward(&tape, x)?;
        Ok(argmax_rows(pass.logits.data(), NUM_CLASSES))
    }

    // ---------------------------------------------------------------
    // Checkpoints: versioned header, architecture manifest, little-endian
    // f32 blobs, trailing SHA-256 checksum.
    // ---------------------------------------------------------------

    pub fn save_checkpoint(
        &self,
        path: impl AsRef<Path>,
        config_hash: &str,
        seed: u64,
    ) -> Result<()> {
        let path = path.as_ref();
        let mut body = Vec::new();
        body.extend_from_slice(CHECKPOINT_MAGIC);
        body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        body.extend_from_slice(&seed.to_le_bytes());
        let hash_bytes = config_hash.as_bytes();
        body.extend_from_slice(&(hash_bytes.len() as u32).to_le_bytes());
        body.extend_from_slice(hash_bytes);
        body.extend_from_slice(&(PARAM_SPEC.len() as u32).to_le_bytes());
        for (name, t) in self.params.named() {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&body);
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&body).map_err(|e| Error::io(path, e))?;
        w.write_all(&digest).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ClassifierModel, CheckpointMeta)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 32 + 4 {
            return Err(Error::Format(format!("{}: truncated checkpoint", path.display())));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(Error::Format(format!(
                "{}: checksum mismatch (corrupt or truncated checkpoint)",
                path.display()
            )));
        }
        let mut cur = Cursor::new(body, path);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        let seed = cur.u64()?;
        let hash_len = cur.u32()? as usize;
        let config_hash = String::from_utf8(cur.take(hash_len)?.to_vec())
            .map_err(|_| Error::Format("config hash is not utf-8".into()))?;
        let count = cur.u32()? as usize;
        if count != PARAM_SPEC.len() {
            return Err(Error::Format(format!(
                "architecture mismatch: {count} tensors vs {}",
                PARAM_SPEC.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in PARAM_SPEC {
            let name_len = cur.u32()? as usize;
            let got_name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
            let ndims = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                dims.push(cur.u32()? as usize);
            }
            if got_name != name || dims != shape {
                return Err(Error::Format(format!(
                    "architecture mismatch at {got_name} {dims:?} (expected {name} {shape:?})"
                )));
            }
            let len: usize = dims.iter().product();
            let raw = cur.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::from_vec(data, &dims)?);
        }
        Ok((
            ClassifierModel {
                params: ModelParams::from_tensors(tensors)?,
            },
            CheckpointMeta {
                seed,
                config_hash,
                file_hash: hex(&Sha256::digest(&bytes)),
            },
        ))
    }
}

/// Metadata carried alongside the weights in a checkpoint file.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of the checkpoint file itself; attack sets record this.
    pub file_hash: String,
}

/// SHA-256 of a file on disk, hex-encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn argmax_rows(data: &[f32], cols: usize) -> Vec<usize> {
    data.chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8], path: &'a Path) -> Cursor<'a> {
        Cursor { data, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint body",
                self.path.display()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_final_layer_predicts_class_zero() {
        let mut m = ClassifierModel::init(0);
        let mut tensors = m.params.tensors().to_vec();
        tensors[6] = Tensor::zeros(&[EMBEDDING_DIM, NUM_CLASSES]);
        tensors[7] = Tensor::zeros(&[NUM_CLASSES]);
        m.params = ModelParams::from_tensors(tensors).unwrap();
        let x = Tensor::zeros(&[3, 1, 28, 28]);
        let tape = Tape::new();
        let pass = m.forward(&tape, &x).unwrap();
        assert!(pass.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.predict(&x).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn single_row_matches_batch_row() {
        let m = ClassifierModel::init(1);
        let mut r = crate::rng::stream(2, "x");
        use rand::Rng;
        let data: Vec<f32> = (0..8 * 784).map(|_| r.gen_range(0.0..1.0)).collect();
        let batch = Tensor::from_vec(data.clone(), &[8, 1, 28, 28]).unwrap();
        let single = Tensor::from_vec(data[3 * 784..4 * 784].to_vec(), &[1, 1, 28, 28]).unwrap();
        let tape = Tape::new();
        let pb = m.forward(&tape, &batch).unwrap();
        let ps = m.forward(&tape, &single).unwrap();
        assert_eq!(&pb.logits.data()[3 * 10..4 * 10], ps.logits.data());
        assert_eq!(&pb.embeddings.data()[3 * 64..4 * 64], ps.embeddings.data());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = ClassifierModel::init(7);
        m.save_checkpoint(&path, "cfg123", 7).unwrap();
        let (loaded, meta) = ClassifierModel::load_checkpoint(&path).unwrap();
        assert_eq!(meta.seed, 7);
        assert_eq!(meta.config_hash, "cfg123");
        for (a, b) in m.params.tensors().iter().zip(loaded.params.tensors()) {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn truncated_checkpoint_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ClassifierModel::init(3).save_checkpoint(&path, "h", 3).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = ClassifierModel::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_rows(&[1.0, 1.0, 0.0], 3), vec![0]);
        assert_eq!(argmax_rows(&[0.0, 2.0, 2.0], 3), vec![1]);
    }
}
