//! Image pairs, binary change masks, dataset I/O, tiling, resizing and the
//! synthetic pair generator.

mod io;
mod patch;
mod resize;
pub mod synth;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use io::{
    encode_mask_png, load_dataset, load_image, load_label, load_split, read_manifest, save_image_png, save_mask_png,
    save_pair, write_manifest, ImageFormat, TEST_MANIFEST, TRAIN_MANIFEST,
};
pub use patch::{crop, extract_patches, grid_positions, stitch};
pub use resize::{resize, resize_mask, ResizeMode};
pub use synth::{synth_generate, synth_sample, Shape, ShapeRecord, SynthConfig, SynthSample};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Binary `H x W` change mask; 1 marks a changed pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask with {} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("mask", format!("non-binary value {v}")));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn positives(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn density(&self) -> f64 {
        self.positives() as f64 / self.len() as f64
    }

    /// The mask as a `[1 x H x W]` tensor of 0/1 values.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("mask dimensions are positive")
    }

    /// Pixelwise NOT.
    pub fn invert(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// A coregistered image pair with its ground-truth change mask.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub t1: Tensor<f32>,
    pub t2: Tensor<f32>,
    pub label: Mask,
}

impl SamplePair {
    /// Builds a pair after checking that both images and the label are aligned.
    pub fn new(id: impl Into<String>, t1: Tensor<f32>, t2: Tensor<f32>, label: Mask) -> Result<Self> {
        let id = id.into();
        if t1.rank() != 3 {
            return Err(Error::sample(
                &id,
                format!("t1 must be [C x H x W], got {:?}", t1.shape()),
            ));
        }
        if t1.shape() != t2.shape() {
            return Err(Error::sample(
                &id,
                format!("t1 is {:?} but t2 is {:?}", t1.shape(), t2.shape()),
            ));
        }
        if t1.shape()[1] != label.height() || t1.shape()[2] != label.width() {
            return Err(Error::sample(
                &id,
                format!(
                    "images are {}x{} but label is {}x{}",
                    t1.shape()[1],
                    t1.shape()[2],
                    label.height(),
                    label.width()
                ),
            ));
        }
        Ok(SamplePair { id, t1, t2, label })
    }

    pub fn channels(&self) -> usize {
        self.t1.shape()[0]
    }

    /// `(H, W)`.
    pub fn spatial(&self) -> (usize, usize) {
        (self.t1.shape()[1], self.t1.shape()[2])
    }
}

/// Train/test partition with disjoint sample ids.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn new(train: Vec<SamplePair>, test: Vec<SamplePair>, seed: u64) -> Result<Self> {
        let ids: HashSet<&str> = train.iter().map(|p| p.id.as_str()).collect();
        if let Some(dup) = test.iter().find(|p| ids.contains(p.id.as_str())) {
            return Err(Error::sample(&dup.id, "appears in both train and test splits"));
        }
        Ok(DatasetSplit { train, test, seed })
    }

    /// Shuffles with `seed` and holds out `test_count` pairs.
    pub fn random(mut pairs: Vec<SamplePair>, test_count: usize, seed: u64) -> Result<Self> {
        if test_count > pairs.len() {
            return Err(Error::invalid(
                "split",
                format!("test_count {test_count} exceeds {} pairs", pairs.len()),
            ));
        }
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = pairs.split_off(pairs.len() - test_count);
        Self::new(pairs, test, seed)
    }
}
