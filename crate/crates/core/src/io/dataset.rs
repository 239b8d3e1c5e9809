use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::idx::{read_idx, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "SEMIFREDDO_DATA_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Single-channel images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if images.n != labels.len() {
            return Err(Error::CountMismatch {
                images: images.n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes,
            });
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather the given items into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.images.c * self.images.plane_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * per..(i + 1) * per]);
        }
        let t = Tensor {
            n: indices.len(),
            c: self.images.c,
            h: self.images.h,
            w: self.images.w,
            data,
        };
        (t, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            images: self.images.batch_slice(0, count),
            labels: self.labels[..count].to_vec(),
            classes: self.classes,
        }
    }

    /// Zero-pad each image symmetrically to `h x w` (no-op if already that size).
    pub fn padded_to(&self, h: usize, w: usize) -> Result<Self> {
        let (ih, iw) = (self.images.h, self.images.w);
        if ih == h && iw == w {
            return Ok(self.clone());
        }
        if ih > h || iw > w {
            return Err(Error::ShapeMismatch(format!("cannot pad {ih}x{iw} images to {h}x{w}")));
        }
        let (top, left) = ((h - ih) / 2, (w - iw) / 2);
        let mut out = Tensor::zeros(self.images.n, self.images.c, h, w);
        for n in 0..self.images.n {
            for c in 0..self.images.c {
                let src = self.images.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..ih {
                    dst[(top + y) * w + left..(top + y) * w + left + iw]
                        .copy_from_slice(&src[y * iw..(y + 1) * iw]);
                }
            }
        }
        Ok(Self {
            images: out,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }

    fn pixels_u8(&self) -> Vec<u8> {
        self.images
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn write_idx(&self, images: &Path, labels: &Path) -> Result<()> {
        write_idx(images, &[self.len(), self.images.h, self.images.w], &self.pixels_u8())?;
        write_idx(labels, &[self.len()], &self.labels)
    }
}

/// Read an image file and a label file. Pixels are scaled to `[0, 1]`;
/// `classes` is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images, IMAGES_MAGIC)?;
    let lab = read_idx(labels, LABELS_MAGIC)?;
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if n != lab.dims[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: lab.dims[0],
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = img.data.iter().map(|&b| b as f32 / 255.0).collect();
    let classes = lab.data.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::new(Tensor::from_vec(n, 1, h, w, data)?, lab.data, classes.max(2))
}

/// Train and test splits from a directory holding the four standard files.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    let classes = train.classes.max(test.classes);
    Ok((
        Dataset { classes, ..train },
        Dataset { classes, ..test },
    ))
}

type Stroke = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f32 / steps as f32;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Hand-drawn digit skeletons in the unit square, y pointing down.
fn digit_strokes(d: u8) -> Vec<Stroke> {
    use std::f32::consts::PI;
    match d {
        0 => vec![ellipse(0.5, 0.5, 0.24, 0.38, 0.0, 2.0 * PI, 16)],
        1 => vec![vec![(0.36, 0.25), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.25, 0.3),
            (0.35, 0.13),
            (0.58, 0.1),
            (0.74, 0.24),
            (0.7, 0.45),
            (0.25, 0.9),
            (0.78, 0.9),
        ]],
        3 => vec![vec![
            (0.25, 0.14),
            (0.72, 0.14),
            (0.45, 0.44),
            (0.7, 0.58),
            (0.72, 0.8),
            (0.52, 0.92),
            (0.25, 0.84),
        ]],
        4 => vec![vec![(0.66, 0.9), (0.66, 0.1), (0.2, 0.64), (0.82, 0.64)]],
        5 => vec![vec![
            (0.75, 0.1),
            (0.32, 0.1),
            (0.29, 0.45),
            (0.6, 0.42),
            (0.76, 0.6),
            (0.71, 0.84),
            (0.5, 0.92),
            (0.25, 0.84),
        ]],
        6 => vec![vec![
            (0.7, 0.12),
            (0.46, 0.2),
            (0.31, 0.44),
            (0.28, 0.74),
            (0.45, 0.92),
            (0.68, 0.85),
            (0.73, 0.65),
            (0.55, 0.52),
            (0.3, 0.62),
        ]],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.45, 0.9)]],
        8 => vec![
            ellipse(0.5, 0.29, 0.19, 0.18, 0.0, 2.0 * PI, 12),
            ellipse(0.5, 0.7, 0.24, 0.21, 0.0, 2.0 * PI, 12),
        ],
        _ => vec![
            ellipse(0.48, 0.32, 0.2, 0.2, 0.0, 2.0 * PI, 12),
            vec![(0.68, 0.32), (0.64, 0.9)],
        ],
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// One distorted glyph rendered at `size x size`.
fn render_glyph(digit: u8, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let angle: f32 = rng.gen_range(-0.3..0.3);
    let shear: f32 = rng.gen_range(-0.3..0.3);
    let scale: f32 = rng.gen_range(0.75..1.05);
    let aspect: f32 = rng.gen_range(0.8..1.2);
    let thick: f32 = rng.gen_range(1.0..2.6);
    let (tx, ty): (f32, f32) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
    let (sin, cos) = angle.sin_cos();
    let s = size as f32 * 0.8 * scale;
    let centre = size as f32 / 2.0;
    let jitter = 0.06;

    let mut strokes: Vec<Stroke> = digit_strokes(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let x = x + rng.gen_range(-jitter..jitter) - 0.5;
                    let y = y + rng.gen_range(-jitter..jitter) - 0.5;
                    let (x, y) = (x * aspect + shear * y, y);
                    let (x, y) = (cos * x - sin * y, sin * x + cos * y);
                    (centre + tx + s * x, centre + ty + s * y)
                })
                .collect()
        })
        .collect();
    // a stray distractor stroke on some images
    if rng.gen_bool(0.5) {
        let a = (rng.gen_range(0.0..size as f32), rng.gen_range(0.0..size as f32));
        let b = (a.0 + rng.gen_range(-6.0..6.0), a.1 + rng.gen_range(-6.0..6.0));
        strokes.push(vec![a, b]);
    }

    let noise = rng.gen_range(0.0..0.25f32);
    let mut img = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f32::INFINITY, f32::min);
            let ink = (thick / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let v = ink + noise * (rng.gen::<f32>() - 0.5);
            img[y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    img
}

/// Procedural 10-class digit set: distorted stroke glyphs with noise and
/// distractor strokes, 28x28, balanced classes in shuffled order.
pub fn synthetic_digits(count: usize, seed: u64) -> Dataset {
    const SIZE: usize = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * SIZE * SIZE);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let d: u8 = rng.gen_range(0..10);
        data.extend(render_glyph(d, SIZE, &mut rng));
        labels.push(d);
    }
    Dataset {
        images: Tensor::from_vec(count, 1, SIZE, SIZE, data).expect("sized above"),
        labels,
        classes: 10,
    }
}
