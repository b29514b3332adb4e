//! Dataset ingestion (IDX format) and the labeled/unlabeled pool partition.
//!
//! The engine never holds a [`Dataset`] for the training split: it is split by
//! [`Dataset::into_parts`] into [`Images`] (what the learner may see) and a
//! [`GroundTruth`] that is handed to the oracle.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, have {available}")]
    TruncatedFile { needed: usize, available: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange { index: usize, label: usize, num_classes: usize },
    #[error("pixel value {value} outside [0, 1]")]
    PixelOutOfRange { value: f64 },
    #[error("seed size {seed_size} exceeds {available} training samples")]
    SeedTooLarge { seed_size: usize, available: usize },
    #[error("seed {seed_size} plus budget {budget} exceeds {available} training samples")]
    BudgetExceedsPool { seed_size: usize, budget: usize, available: usize },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Normalised grayscale images, shape `[N, H, W]`, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Images {
    pixels: Array3<f64>,
}

impl Images {
    pub fn new(pixels: Array3<f64>) -> Result<Self, DataError> {
        if let Some(&value) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelOutOfRange { value });
        }
        Ok(Self { pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.pixels.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.pixels.len_of(Axis(2))
    }

    /// Flattened input dimension `H * W`.
    pub fn dim(&self) -> usize {
        self.height() * self.width()
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn image(&self, id: usize) -> ArrayView2<'_, f64> {
        self.pixels.index_axis(Axis(0), id)
    }

    /// All images as a `[N, H*W]` matrix view.
    pub fn flat(&self) -> ArrayView2<'_, f64> {
        let (n, h, w) = self.pixels.dim();
        self.pixels
            .view()
            .into_shape_with_order((n, h * w))
            .expect("image storage is contiguous")
    }

    /// Flattened copies of the requested images, in the order given.
    pub fn rows(&self, ids: &[usize]) -> Array2<f64> {
        self.flat().select(Axis(0), ids)
    }

    /// Gather a subset as a `[n, H, W]` array.
    pub fn gather(&self, ids: &[usize]) -> Array3<f64> {
        self.pixels.select(Axis(0), ids)
    }

    /// 8-bit grayscale bytes of one image, row-major.
    pub fn to_u8(&self, id: usize) -> Vec<u8> {
        self.image(id).iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

/// Labels of a split; owned by oracles, never by the engine's selection path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    labels: Vec<usize>,
    num_classes: usize,
}

impl GroundTruth {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange { index, label, num_classes });
        }
        Ok(Self { labels, num_classes })
    }

    pub fn label(&self, id: usize) -> Option<usize> {
        self.labels.get(id).copied()
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

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Images,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Images,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch { images: images.len(), labels: labels.len() });
        }
        // validates the label range
        GroundTruth::new(labels.clone(), num_classes)?;
        Ok(Self { images, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncate(self, n: usize) -> Self {
        if n >= self.len() {
            return self;
        }
        let ids: Vec<usize> = (0..n).collect();
        Self {
            images: Images { pixels: self.images.gather(&ids) },
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn into_parts(self) -> (Images, GroundTruth) {
        let truth = GroundTruth { labels: self.labels, num_classes: self.num_classes };
        (self.images, truth)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let chunk = bytes
        .get(offset..offset + 4)
        .ok_or(DataError::TruncatedFile { needed: offset + 4, available: bytes.len() })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

/// Parse an IDX3 image file; returns pixels normalised by 255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Images, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic { expected: IMAGE_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let needed = 16 + n * h * w;
    if bytes.len() < needed {
        return Err(DataError::TruncatedFile { needed, available: bytes.len() });
    }
    let pixels: Vec<f64> = bytes[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    let pixels = Array3::from_shape_vec((n, h, w), pixels).expect("length checked above");
    Ok(Images { pixels })
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic { expected: LABEL_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(DataError::TruncatedFile { needed, available: bytes.len() });
    }
    Ok(bytes[8..needed].iter().map(|&b| usize::from(b)).collect())
}

/// Encode 8-bit images as an IDX3 file.
pub fn encode_idx_images(pixels: &[u8], n: usize, height: usize, width: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), n * height * width, "pixel buffer does not match the shape");
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGE_MAGIC, n as u32, height as u32, width as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an image/label IDX pair. The class count is `max(label) + 1`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(DataError::CountMismatch { images: images.len(), labels: labels.len() });
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset { images, labels, num_classes, split })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("sample {0} is not in the unlabeled pool")]
    NotInPool(usize),
    #[error("sample {0} appears more than once in the query")]
    DuplicateId(usize),
    #[error("query of {requested} exceeds remaining budget {remaining}")]
    BudgetExhausted { requested: usize, remaining: usize },
    #[error("query has {got} ids, batch size is {expected}")]
    BatchSizeMismatch { expected: usize, got: usize },
    #[error("pool invariant violated: {0}")]
    Invariant(String),
}

/// The labeled set `L`, unlabeled set `U` and the budget ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    labeled_ids: BTreeSet<usize>,
    unlabeled_ids: BTreeSet<usize>,
    total: usize,
    seed_size: usize,
    batch_size: usize,
    budget_initial: usize,
    budget_remaining: usize,
    rounds_completed: usize,
}

/// Draw a uniform random seed set of `seed_size` ids out of `n_train`.
pub fn init_pools<R: Rng + ?Sized>(
    n_train: usize,
    seed_size: usize,
    budget: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<PoolState, DataError> {
    if seed_size > n_train {
        return Err(DataError::SeedTooLarge { seed_size, available: n_train });
    }
    if seed_size + budget > n_train {
        return Err(DataError::BudgetExceedsPool { seed_size, budget, available: n_train });
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    let labeled_ids: BTreeSet<usize> =
        rand::seq::index::sample(rng, n_train, seed_size).into_iter().collect();
    let unlabeled_ids = (0..n_train).filter(|i| !labeled_ids.contains(i)).collect();
    Ok(PoolState {
        labeled_ids,
        unlabeled_ids,
        total: n_train,
        seed_size,
        batch_size,
        budget_initial: budget,
        budget_remaining: budget,
        rounds_completed: 0,
    })
}

impl PoolState {
    pub fn labeled_ids(&self) -> &BTreeSet<usize> {
        &self.labeled_ids
    }

    pub fn unlabeled_ids(&self) -> &BTreeSet<usize> {
        &self.unlabeled_ids
    }

    pub fn unlabeled_vec(&self) -> Vec<usize> {
        self.unlabeled_ids.iter().copied().collect()
    }

    pub fn labeled_vec(&self) -> Vec<usize> {
        self.labeled_ids.iter().copied().collect()
    }

    pub fn seed_size(&self) -> usize {
        self.seed_size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn budget_remaining(&self) -> usize {
        self.budget_remaining
    }

    pub fn rounds_completed(&self) -> usize {
        self.rounds_completed
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Validate a query without mutating anything.
    pub fn check_query(&self, query_ids: &[usize]) -> Result<(), PoolError> {
        if self.batch_size > self.budget_remaining {
            return Err(PoolError::BudgetExhausted {
                requested: self.batch_size,
                remaining: self.budget_remaining,
            });
        }
        if query_ids.len() != self.batch_size {
            return Err(PoolError::BatchSizeMismatch {
                expected: self.batch_size,
                got: query_ids.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for &id in query_ids {
            if !self.unlabeled_ids.contains(&id) {
                return Err(PoolError::NotInPool(id));
            }
            if !seen.insert(id) {
                return Err(PoolError::DuplicateId(id));
            }
        }
        Ok(())
    }

    /// Move `query_ids` from `U` to `L` and charge one batch to the budget.
    /// On error the state is untouched.
    pub fn commit_query(&mut self, query_ids: &[usize]) -> Result<(), PoolError> {
        self.check_query(query_ids)?;
        for id in query_ids {
            self.unlabeled_ids.remove(id);
            self.labeled_ids.insert(*id);
        }
        self.budget_remaining -= self.batch_size;
        self.rounds_completed += 1;
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), PoolError> {
        let fail = |msg: String| Err(PoolError::Invariant(msg));
        if let Some(id) = self.labeled_ids.intersection(&self.unlabeled_ids).next() {
            return fail(format!("id {id} is both labeled and unlabeled"));
        }
        let union: BTreeSet<usize> = self.labeled_ids.union(&self.unlabeled_ids).copied().collect();
        if union.len() != self.total || union.iter().next_back().is_some_and(|&m| m >= self.total) {
            return fail(format!("L ∪ U covers {} of {} ids", union.len(), self.total));
        }
        let expected = self.seed_size + self.rounds_completed * self.batch_size;
        if self.labeled_ids.len() != expected {
            return fail(format!("|L| = {}, expected {expected}", self.labeled_ids.len()));
        }
        let spent = self.rounds_completed * self.batch_size;
        if spent > self.budget_initial || self.budget_remaining != self.budget_initial - spent {
            return fail(format!(
                "budget {} after {} rounds of {} from {}",
                self.budget_remaining, self.rounds_completed, self.batch_size, self.budget_initial
            ));
        }
        Ok(())
    }
}
