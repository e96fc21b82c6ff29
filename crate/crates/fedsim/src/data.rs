//! Dataset loading (IDX), synthetic blob generation, and non-IID
//! Dirichlet partitioning across clients.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Result, SimError};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image collection. Images are `[N, H, W, C]` with values in [0, 1],
/// channels last; the trigger mask is 2-D and broadcast over channels.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(SimError::Data(format!(
                "images must be [N, H, W, C], got {:?}",
                shape
            )));
        }
        if shape[0] != labels.len() {
            return Err(SimError::Data(format!(
                "image count {} != label count {}",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SimError::Data(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(SimError::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Image dimensions `(H, W, C)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (h, w, c) = self.image_dims();
        h * w * c
    }

    /// Copy of sample `i` as `[H, W, C]`.
    pub fn image(&self, i: usize) -> Tensor {
        let n = self.image_len();
        let (h, w, c) = self.image_dims();
        let data = self.images.data()[i * n..(i + 1) * n].to_vec();
        Tensor::new(vec![h, w, c], data).expect("slice matches dims")
    }

    /// Copy of sample `i` flattened to `[H*W*C]`.
    pub fn flattened_image(&self, i: usize) -> Tensor {
        let n = self.image_len();
        Tensor::from_vec(self.images.data()[i * n..(i + 1) * n].to_vec())
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset containing the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.image_len();
        let (h, w, c) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(SimError::Data(format!("subset index {} out of range", i)));
            }
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            images: Tensor::new(vec![indices.len(), h, w, c], data)?,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Truncate to the first `limit` samples (no-op when larger than N).
    pub fn truncated(&self, limit: usize) -> Result<Dataset> {
        if limit >= self.len() {
            return Ok(self.clone());
        }
        let indices: Vec<usize> = (0..limit).collect();
        self.subset(&indices)
    }

    /// Replace sample `i` (used by poisoning).
    pub(crate) fn replace(&mut self, i: usize, image: &Tensor, label: usize) -> Result<()> {
        let n = self.image_len();
        if image.len() != n {
            return Err(SimError::Data(format!(
                "replacement image has {} values, expected {}",
                image.len(),
                n
            )));
        }
        self.images.data_mut()[i * n..(i + 1) * n].copy_from_slice(image.data());
        self.labels[i] = label;
        Ok(())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(SimError::Data(format!("file truncated reading {}", what)));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load an IDX image/label file pair (the MNIST family container format).
///
/// Big-endian 4-byte magic (0x00000803 images / 0x00000801 labels), big-endian
/// 4-byte dimension sizes, unsigned-byte payload. Pixels are scaled to [0, 1].
pub fn load_idx<P: AsRef<Path>>(images_path: P, labels_path: P) -> Result<Dataset> {
    let img_bytes = fs::read(&images_path)?;
    let lbl_bytes = fs::read(&labels_path)?;

    let magic = read_be_u32(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(SimError::Data(format!(
            "bad image magic 0x{:08x}, expected 0x{:08x}",
            magic, IDX_IMAGES_MAGIC
        )));
    }
    let n = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let h = read_be_u32(&img_bytes, 8, "row count")? as usize;
    let w = read_be_u32(&img_bytes, 12, "column count")? as usize;
    let payload = &img_bytes[16..];
    if payload.len() != n * h * w {
        return Err(SimError::Data(format!(
            "image payload holds {} bytes, header implies {}",
            payload.len(),
            n * h * w
        )));
    }

    let magic = read_be_u32(&lbl_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(SimError::Data(format!(
            "bad label magic 0x{:08x}, expected 0x{:08x}",
            magic, IDX_LABELS_MAGIC
        )));
    }
    let ln = read_be_u32(&lbl_bytes, 4, "label count")? as usize;
    if ln != n {
        return Err(SimError::Data(format!("label count {} != image count {}", ln, n)));
    }
    let lbl_payload = &lbl_bytes[8..];
    if lbl_payload.len() != ln {
        return Err(SimError::Data(format!(
            "label payload holds {} bytes, header implies {}",
            lbl_payload.len(),
            ln
        )));
    }

    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(Tensor::new(vec![n, h, w, 1], data)?, labels, num_classes)
}

/// Gaussian class clusters rendered as `side x side` single-channel images,
/// clipped to [0, 1]. Class centers are uniform in [0.2, 0.8] per pixel, so
/// classes are well separated for small `spread`.
pub fn synth_blobs<R: Rng>(
    n_per_class: usize,
    num_classes: usize,
    side: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if spread <= 0.0 {
        return Err(SimError::InvalidArgument {
            op: "synth_blobs",
            detail: format!("spread must be positive, got {}", spread),
        });
    }
    if n_per_class == 0 || num_classes == 0 || side == 0 {
        return Err(SimError::InvalidArgument {
            op: "synth_blobs",
            detail: "n_per_class, num_classes, side must be positive".into(),
        });
    }
    let dim = side * side;
    // Centers lean toward the upper intensity range so bright pixels occur
    // naturally, as in photographic data.
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| 0.35 + 0.5 * rng.gen::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, spread).expect("validated spread");
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for _ in 0..n_per_class {
            for &c in &centers[class] {
                data.push((c + noise.sample(rng)).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, side, side, 1], data)?, labels, num_classes)
}

/// Train/test blob pair drawn around shared class centers.
pub fn synth_blobs_split<R: Rng>(
    train_per_class: usize,
    test_per_class: usize,
    num_classes: usize,
    side: usize,
    spread: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    let per_class = train_per_class + test_per_class;
    let all = synth_blobs(per_class, num_classes, side, spread, rng)?;
    let mut train_idx = Vec::with_capacity(train_per_class * num_classes);
    let mut test_idx = Vec::with_capacity(test_per_class * num_classes);
    for class in 0..num_classes {
        let base = class * per_class;
        train_idx.extend(base..base + train_per_class);
        test_idx.extend(base + train_per_class..base + per_class);
    }
    Ok((all.subset(&train_idx)?, all.subset(&test_idx)?))
}

/// Assignment of sample indices to clients.
#[derive(Clone, Debug)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_indices(&self, client: usize) -> &[usize] {
        &self.assignments[client]
    }

    /// Per-client label histogram.
    pub fn label_histogram(&self, dataset: &Dataset, client: usize) -> Vec<usize> {
        let mut hist = vec![0; dataset.num_classes()];
        for &i in &self.assignments[client] {
            hist[dataset.label(i)] += 1;
        }
        hist
    }
}

const PARTITION_MAX_RETRIES: usize = 100;

/// Class-wise Dirichlet allocation: for every class, proportions across
/// clients are drawn from Dirichlet(h * 1) and that class's samples are split
/// accordingly. Redraws (bounded) until every client holds at least one
/// sample.
pub fn dirichlet_partition<R: Rng>(
    dataset: &Dataset,
    n_clients: usize,
    h: f64,
    rng: &mut R,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(SimError::InvalidArgument {
            op: "dirichlet_partition",
            detail: "n_clients must be >= 1".into(),
        });
    }
    if h <= 0.0 {
        return Err(SimError::InvalidArgument {
            op: "dirichlet_partition",
            detail: format!("concentration must be positive, got {}", h),
        });
    }
    if dataset.is_empty() {
        return Err(SimError::EmptyInput("dirichlet_partition"));
    }
    if n_clients == 1 {
        return Ok(Partition { assignments: vec![(0..dataset.len()).collect()] });
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for i in 0..dataset.len() {
        by_class[dataset.label(i)].push(i);
    }

    let dirichlet = Dirichlet::new(&vec![h; n_clients])
        .map_err(|e| SimError::InvalidArgument {
            op: "dirichlet_partition",
            detail: format!("invalid Dirichlet parameters: {}", e),
        })?;

    for _ in 0..PARTITION_MAX_RETRIES {
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for class_indices in by_class.iter().filter(|c| !c.is_empty()) {
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(rng);
            let proportions = dirichlet.sample(rng);
            // Cumulative rounding keeps the split exact.
            let n = shuffled.len();
            let mut cumulative = 0.0;
            let mut start = 0usize;
            for (client, &p) in proportions.iter().enumerate() {
                cumulative += p;
                let end = if client + 1 == n_clients {
                    n
                } else {
                    (cumulative * n as f64).round() as usize
                };
                let end = end.clamp(start, n);
                assignments[client].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            return Ok(Partition { assignments });
        }
    }
    Err(SimError::Data(format!(
        "dirichlet_partition: could not give every client a sample after {} redraws (h={}, n_clients={}, samples={})",
        PARTITION_MAX_RETRIES,
        h,
        n_clients,
        dataset.len()
    )))
}

/// Shannon entropy (nats) of a client's label distribution.
pub fn label_entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
