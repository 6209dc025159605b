//! Clips, masks, datasets and the ways of producing them.

mod archive;
mod augment;
mod load;
mod split;
mod synth;

use std::sync::Arc;

pub use archive::{read_archive, write_archive, ARCHIVE_MAGIC};
pub use augment::augment;
pub use load::{
    load_clip, load_video_dataset, parse_annotations, rasterize_mask, scale_box, BoxPx, LoadConfig,
};
pub use split::{label_histogram, split_dataset, split_indices};
pub use synth::{synth_clip, Background, MotionClass, ShapeKind, SynthDataset, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A normalized video volume laid out `[T, H, W, C]`, every value in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor {
    dims: [usize; 4],
    values: Vec<f32>,
}

impl ClipTensor {
    pub fn new(dims: [usize; 4], values: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "clip dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("clip value {bad} outside [-1, 1]")));
        }
        Ok(ClipTensor { dims, values })
    }

    /// `[T, H, W, C]`.
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        let [_, h, w, ch] = self.dims;
        self.values[((t * h + y) * w + x) * ch + c]
    }

    /// The same clip played backwards.
    pub fn reversed_time(&self) -> ClipTensor {
        let frame = self.values.len() / self.dims[0];
        let values = self.values.chunks(frame).rev().flatten().copied().collect();
        ClipTensor {
            dims: self.dims,
            values,
        }
    }

    /// Mirror along the width axis.
    pub fn flipped_horizontal(&self) -> ClipTensor {
        let [_, _, w, c] = self.dims;
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(w * c) {
            for px in row.chunks(c).rev() {
                values.extend_from_slice(px);
            }
        }
        ClipTensor {
            dims: self.dims,
            values,
        }
    }

    /// Channel-first `[C, T, H, W]` copy in the network's scalar type.
    pub fn to_channels_first<F: Real>(&self) -> Tensor<F> {
        let [t, h, w, c] = self.dims;
        let plane = t * h * w;
        let mut out = vec![F::zero(); self.values.len()];
        for (p, px) in self.values.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + p] = F::from_f32(v).unwrap();
            }
        }
        Tensor::from_vec(&[c, t, h, w], out).expect("clip layout")
    }

    /// Frame `t` as channel-first `[C, 1, H, W]`.
    pub fn frame_channels_first<F: Real>(&self, t: usize) -> Tensor<F> {
        let [_, h, w, c] = self.dims;
        let frame = &self.values[t * h * w * c..(t + 1) * h * w * c];
        let mut out = vec![F::zero(); h * w * c];
        for (p, px) in frame.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + p] = F::from_f32(v).unwrap();
            }
        }
        Tensor::from_vec(&[c, 1, h, w], out).expect("frame layout")
    }
}

/// Binary foreground indicator `[T, H, W]`: 1 = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    dims: [usize; 3],
    values: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], values: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "mask dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {bad} is not binary")));
        }
        Ok(MaskVolume { dims, values })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        MaskVolume {
            dims,
            values: vec![0; dims.iter().product()],
        }
    }

    /// `[T, H, W]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let plane = self.dims[1] * self.dims[2];
        &self.values[t * plane..(t + 1) * plane]
    }

    pub fn foreground_area(&self, t: usize) -> usize {
        self.frame(t).iter().map(|&v| v as usize).sum()
    }

    pub fn reversed_time(&self) -> MaskVolume {
        let plane = self.dims[1] * self.dims[2];
        MaskVolume {
            dims: self.dims,
            values: self.values.chunks(plane).rev().flatten().copied().collect(),
        }
    }

    pub fn flipped_horizontal(&self) -> MaskVolume {
        let w = self.dims[2];
        MaskVolume {
            dims: self.dims,
            values: self
                .values
                .chunks(w)
                .flat_map(|row| row.iter().rev().copied())
                .collect(),
        }
    }
}

/// A clip with its (optional) foreground mask and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedClip {
    pub clip: ClipTensor,
    pub mask: Option<MaskVolume>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl AnnotatedClip {
    pub fn new(
        clip: ClipTensor,
        mask: Option<MaskVolume>,
        label: Option<usize>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if let Some(m) = &mask {
            let [t, h, w, _] = clip.dims();
            if m.dims() != [t, h, w] {
                return Err(Error::Shape(format!(
                    "mask {:?} does not match clip {:?}",
                    m.dims(),
                    clip.dims()
                )));
            }
        }
        Ok(AnnotatedClip {
            clip,
            mask,
            label,
            source_id: source_id.into(),
        })
    }

    /// The mask, or a validation error naming the clip when absent.
    pub fn require_mask(&self) -> Result<&MaskVolume> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("clip {} has no foreground mask", self.source_id)))
    }
}

/// Read-only indexed collection of clips. Implementations must be
/// deterministic: `get(i)` always returns the same item.
pub trait Dataset: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<AnnotatedClip>;

    /// Video the clip was cut from; clips of one video never straddle a split.
    fn source_id(&self, index: usize) -> String;

    fn label(&self, index: usize) -> Option<usize>;

    /// Number of classes labels are drawn from, if the dataset is labeled.
    fn num_classes(&self) -> Option<usize>;

    /// `[T, H, W, C]` shared by every clip.
    fn clip_dims(&self) -> [usize; 4];
}

/// Dataset held entirely in memory.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    items: Vec<AnnotatedClip>,
    num_classes: Option<usize>,
}

impl InMemoryDataset {
    pub fn new(items: Vec<AnnotatedClip>, num_classes: Option<usize>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Validation("dataset has no clips".into()))?
            .clip
            .dims();
        for it in &items {
            if it.clip.dims() != first {
                return Err(Error::Shape(format!(
                    "clip {} has dims {:?}, expected {first:?}",
                    it.source_id,
                    it.clip.dims()
                )));
            }
            if let (Some(label), Some(n)) = (it.label, num_classes) {
                if label >= n {
                    return Err(Error::Validation(format!(
                        "clip {} has label {label} outside [0, {n})",
                        it.source_id
                    )));
                }
            }
        }
        Ok(InMemoryDataset { items, num_classes })
    }

    pub fn items(&self) -> &[AnnotatedClip] {
        &self.items
    }

    /// Materializes any dataset.
    pub fn collect(ds: &dyn Dataset) -> Result<Self> {
        let items = (0..ds.len()).map(|i| ds.get(i)).collect::<Result<Vec<_>>>()?;
        InMemoryDataset::new(items, ds.num_classes())
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> Result<AnnotatedClip> {
        Ok(self.items[index].clone())
    }

    fn source_id(&self, index: usize) -> String {
        self.items[index].source_id.clone()
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.items[index].label
    }

    fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    fn clip_dims(&self) -> [usize; 4] {
        self.items[0].clip.dims()
    }
}

/// A view on selected indices of another dataset.
#[derive(Clone)]
pub struct Subset {
    inner: Arc<dyn Dataset>,
    indices: Vec<usize>,
}

impl Subset {
    pub fn new(inner: Arc<dyn Dataset>, indices: Vec<usize>) -> Self {
        Subset { inner, indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl Dataset for Subset {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> Result<AnnotatedClip> {
        self.inner.get(self.indices[index])
    }

    fn source_id(&self, index: usize) -> String {
        self.inner.source_id(self.indices[index])
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.inner.label(self.indices[index])
    }

    fn num_classes(&self) -> Option<usize> {
        self.inner.num_classes()
    }

    fn clip_dims(&self) -> [usize; 4] {
        self.inner.clip_dims()
    }
}
