//! Labeled image datasets: IDX ingestion, normalization, batching, and
//! class-indexed negative sampling.

pub mod synth;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// Images in [0,1] with labels in {0..9} and a per-class index.
/// Read-only after construction.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<f32>,
    labels: Vec<u8>,
    class_index: Vec<Vec<usize>>,
    split: SplitTag,
}

impl LabeledDataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, split: SplitTag) -> Result<LabeledDataset> {
        if images.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::Data(format!(
                "{} pixel values do not match {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} out of range")));
        }
        if images.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Data("pixel outside [0,1]".into()));
        }
        let mut class_index = vec![Vec::new(); NUM_CLASSES];
        for (i, &y) in labels.iter().enumerate() {
            class_index[y as usize].push(i);
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_index,
            split,
        })
    }

    /// Parse a pair of IDX files (big-endian header, row-major unsigned
    /// bytes); pixels are scaled by 1/255.
    pub fn load_idx(
        images_path: impl AsRef<Path>,
        labels_path: impl AsRef<Path>,
        split: SplitTag,
    ) -> Result<LabeledDataset> {
        let raw_images = read_idx(images_path.as_ref(), IMAGES_MAGIC, 3)?;
        let raw_labels = read_idx(labels_path.as_ref(), LABELS_MAGIC, 1)?;
        let (idims, ibytes) = raw_images;
        let (ldims, lbytes) = raw_labels;
        if idims[1] != IMAGE_SIDE as u32 || idims[2] != IMAGE_SIDE as u32 {
            return Err(Error::Format(format!(
                "expected {IMAGE_SIDE}x{IMAGE_SIDE} images, got {}x{}",
                idims[1], idims[2]
            )));
        }
        if idims[0] != ldims[0] {
            return Err(Error::Format(format!(
                "image count {} != label count {}",
                idims[0], ldims[0]
            )));
        }
        let images = ibytes.iter().map(|&b| b as f32 / 255.0).collect();
        LabeledDataset::new(images, lbytes, split)
    }

    /// Write the dataset back out as an IDX pair. Exact inverse of
    /// `load_idx` for byte-valued pixels.
    pub fn save_idx(
        &self,
        images_path: impl AsRef<Path>,
        labels_path: impl AsRef<Path>,
    ) -> Result<()> {
        let bytes: Vec<u8> = self
            .images
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect();
        let n = self.len() as u32;
        write_idx(
            images_path.as_ref(),
            IMAGES_MAGIC,
            &[n, IMAGE_SIDE as u32, IMAGE_SIDE as u32],
            &bytes,
        )?;
        write_idx(labels_path.as_ref(), LABELS_MAGIC, &[n], &self.labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn images_flat(&self) -> &[f32] {
        &self.images
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    /// Batch tensor (B x 1 x 28 x 28) plus labels for a list of indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::from_vec(data, &[indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE]).unwrap();
        (t, labels)
    }

    /// Index batches under a deterministic per-(seed, epoch) shuffle.
    /// The final short batch is kept.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut r = rng::stream_at(seed, "shuffle", epoch);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }
        Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
    }

    /// Uniform draw over every sample whose class differs from `y`.
    pub fn sample_negative(&self, y: u8, rng: &mut ChaCha8Rng) -> Result<usize> {
        let y = y as usize;
        let other = self.len() - self.class_index[y].len();
        if other == 0 {
            return Err(Error::Data(
                "sample_negative requires at least two classes".into(),
            ));
        }
        let mut pick = rng.gen_range(0..other);
        for (c, idx) in self.class_index.iter().enumerate() {
            if c == y {
                continue;
            }
            if pick < idx.len() {
                return Ok(idx[pick]);
            }
            pick -= idx.len();
        }
        unreachable!("class index does not partition the dataset");
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(b))
}

fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<u32>, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let got = read_u32_be(&mut r, path)?;
    if got != magic {
        return Err(Error::Format(format!(
            "{}: bad magic number {got:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(read_u32_be(&mut r, path)?);
    }
    let total: usize = dims.iter().map(|&d| d as usize).product();
    let mut data = vec![0u8; total];
    r.read_exact(&mut data).map_err(|e| {
        Error::Format(format!(
            "{}: truncated file ({total} bytes expected): {e}",
            path.display()
        ))
    })?;
    Ok((dims, data))
}

fn write_idx(path: &Path, magic: u32, dims: &[u32], data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    emit(&magic.to_be_bytes())?;
    for &d in dims {
        emit(&d.to_be_bytes())?;
    }
    emit(data)
}
