//! Dataset ingestion and image export. Images live in [0,1] inside the
//! engine; the 0–255 scale appears only at the metric and file boundaries.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set: `images` is `[n, c, h, w]` scaled to [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// One sample as a batch of one: `[1, c, h, w]`.
    pub fn sample(&self, index: usize) -> Result<(Tensor, usize)> {
        if index >= self.len() {
            return Err(Error::InvalidArgument {
                op: "Dataset::sample",
                msg: format!("index {index} out of range for {} samples", self.len()),
            });
        }
        let per: usize = self.sample_shape().iter().product();
        let data = self.images.data()[index * per..(index + 1) * per].to_vec();
        let mut shape = vec![1];
        shape.extend(self.sample_shape());
        Ok((Tensor::new(shape, data)?, self.labels[index]))
    }

    /// Gather samples by index into a `[k, c, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument {
                    op: "Dataset::batch",
                    msg: format!("index {i} out of range"),
                });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Split into `n` shards, shuffled by `seed` then dealt round-robin
    /// (IID by construction).
    pub fn shard(&self, n: usize, seed: u64) -> Result<Vec<Dataset>> {
        if n == 0 {
            return Err(Error::InvalidArgument {
                op: "Dataset::shard",
                msg: "need at least one shard".to_string(),
            });
        }
        let order = rng::shuffled_indices(&mut rng::substream(seed, 0x5A4D), self.len());
        let mut shards = Vec::with_capacity(n);
        for s in 0..n {
            let idx: Vec<usize> = order.iter().skip(s).step_by(n).copied().collect();
            if idx.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "Dataset::shard",
                    msg: format!("{} samples cannot fill {n} shards", self.len()),
                });
            }
            let (images, labels) = self.batch(&idx)?;
            shards.push(Dataset {
                images,
                labels,
                classes: self.classes,
            });
        }
        Ok(shards)
    }
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parse an IDX image/label file pair (the MNIST container format):
/// big-endian magic and dimension sizes, unsigned-byte payload. Pixels are
/// divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let img_bytes = read_all(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let h = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let w = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let payload = &img_bytes[16.min(img_bytes.len())..];
    if payload.len() != n * h * w {
        return Err(Error::format(
            images_path,
            format!("expected {} pixels, payload holds {}", n * h * w, payload.len()),
        ));
    }

    let lbl_bytes = read_all(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let ln = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    let lbl_payload = &lbl_bytes[8.min(lbl_bytes.len())..];
    if lbl_payload.len() != ln {
        return Err(Error::format(
            labels_path,
            format!("expected {ln} labels, payload holds {}", lbl_payload.len()),
        ));
    }
    if ln != n {
        return Err(Error::format(
            labels_path,
            format!("label count {ln} does not match image count {n}"),
        ));
    }
    if n == 0 {
        return Err(Error::format(images_path, "empty dataset"));
    }

    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        classes,
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Synthetic stand-in for the image benchmarks: each class gets a fixed
/// seeded template (a few soft blobs on the canvas) and samples are the
/// template plus clamped Gaussian noise. Deterministic per seed.
pub fn synth_blobs(
    seed: u64,
    classes: usize,
    shape: (usize, usize, usize),
    n_per_class: usize,
    sigma: f64,
) -> Result<Dataset> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument {
            op: "synth_blobs",
            msg: format!("sigma must be non-negative, got {sigma}"),
        });
    }
    if classes == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument {
            op: "synth_blobs",
            msg: "need at least one class and one sample per class".to_string(),
        });
    }
    let (c, h, w) = shape;
    let per = c * h * w;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|class| class_template(seed, class, c, h, w))
        .collect();

    let mut noise_rng = rng::substream(seed, 0xB10B);
    let mut data = Vec::with_capacity(classes * n_per_class * per);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..n_per_class {
            if sigma == 0.0 {
                data.extend_from_slice(template);
            } else {
                let noise = rng::normal_vec(&mut noise_rng, per, sigma);
                data.extend(
                    template
                        .iter()
                        .zip(noise)
                        .map(|(&t, n)| (t + n).clamp(0.0, 1.0)),
                );
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![classes * n_per_class, c, h, w], data)?,
        labels,
        classes,
    })
}

fn class_template(seed: u64, class: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut rng = rng::substream(seed, 0x7E40 + class as u64);
    let mut plane = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            use rand::Rng;
            let cy: f64 = rng.random_range(0.0..h as f64);
            let cx: f64 = rng.random_range(0.0..w as f64);
            let amp: f64 = rng.random_range(0.5..1.0);
            let r: f64 = rng.random_range(h as f64 / 6.0..h as f64 / 3.0).max(1.0);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    plane[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
    }
    let max = plane.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut plane {
            *v /= max;
        }
    }
    plane
}

/// Write a `[c,h,w]` (or `[h,w]`) image in [0,1] as binary PPM (P6).
/// Single-channel images are replicated across RGB; values are clamped to
/// [0,1] then rounded onto 0–255.
pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = match image.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        [1, c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        other => {
            return Err(Error::InvalidArgument {
                op: "write_ppm",
                msg: format!("expected 1- or 3-channel image, got shape {other:?}"),
            })
        }
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            let v = image.get(src * plane + p).clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
