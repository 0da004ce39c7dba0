//! Gaussian glimpse preprocessing.
//!
//! A glimpse applies two row-stochastic filter banks to every image channel,
//! `g = A_y · I · A_xᵀ`, where each row of a bank is a discretised Gaussian.
//! The banks are fixed (not learned), so this runs once over a dataset
//! before training.

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Rows whose unnormalised mass falls below this are replaced by a uniform row.
pub const UNDERFLOW_GUARD: f64 = 1e-12;

/// Parameters of one Gaussian filter bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlimpseParams {
    /// First Gaussian centre as a fraction of the source extent, in `[0, 1)`.
    pub u: f64,
    /// Standard deviation in pixels.
    pub s: f64,
    /// Spacing between successive centres in pixels.
    pub d: f64,
    /// Number of Gaussians (output size along this axis).
    pub rows: usize,
    /// Source size along this axis.
    pub cols: usize,
}

impl GlimpseParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s > 0.0
            && self.d > 0.0
            && self.rows >= 1
            && self.cols >= 1
            && (0.0..1.0).contains(&self.u)
            && self.s.is_finite()
            && self.d.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("glimpse parameters", format!("{self:?}")))
        }
    }

    /// Centre of row `i`: `u` places the first centre on the `[0, C-1]` pixel
    /// axis and successive rows step by `d` pixels.
    pub fn center(&self, row: usize) -> f64 {
        self.u * (self.cols as f64 - 1.0) + row as f64 * self.d
    }
}

/// Row-stochastic `rows x cols` Gaussian filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    values: Vec<f64>,
    params: GlimpseParams,
}

impl AttentionMask {
    pub fn params(&self) -> &GlimpseParams {
        &self.params
    }

    pub fn rows(&self) -> usize {
        self.params.rows
    }

    pub fn cols(&self) -> usize {
        self.params.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.rows(), self.cols()], &self.values).expect("mask dimensions are positive")
    }
}

pub fn gaussian_mask(params: GlimpseParams) -> Result<AttentionMask> {
    params.validate()?;
    let (rows, cols) = (params.rows, params.cols);
    let two_var = 2.0 * params.s * params.s;
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let mu = params.center(i);
        let row: Vec<f64> = (0..cols)
            .map(|x| {
                let dx = x as f64 - mu;
                (-dx * dx / two_var).exp()
            })
            .collect();
        let total: f64 = row.iter().sum();
        if total < UNDERFLOW_GUARD {
            values.extend(std::iter::repeat_n(1.0 / cols as f64, cols));
        } else {
            values.extend(row.iter().map(|v| v / total));
        }
    }
    Ok(AttentionMask { values, params })
}

/// Applies `A_y · I · A_xᵀ` to every channel of a `[Ch x H x W]` image.
pub fn apply_glimpse<T: Float>(image: &Tensor<T>, a_y: &AttentionMask, a_x: &AttentionMask) -> Result<Tensor<T>> {
    let (ch, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "apply_glimpse",
                format!("image must be [C x H x W], got {:?}", image.shape()),
            ))
        }
    };
    if a_y.cols() != h || a_x.cols() != w {
        return Err(Error::shape(
            "apply_glimpse",
            format!("masks cover {}x{} but image is {h}x{w}", a_y.cols(), a_x.cols()),
        ));
    }
    let ay = a_y.to_tensor::<T>();
    let ax_t = a_x.to_tensor::<T>().transpose()?;
    let channels = (0..ch)
        .map(|c| {
            let plane = image.slice_channels(c, 1)?.reshape(&[h, w])?;
            ay.matmul(&plane)?.matmul(&ax_t)?.reshape(&[1, a_y.rows(), a_x.rows()])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&channels)
}

/// Dataset-level Gaussian attention settings; mask sizes follow each image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlimpseSettings {
    pub u: f64,
    pub s: f64,
    pub d: f64,
}

impl Default for GlimpseSettings {
    fn default() -> Self {
        GlimpseSettings { u: 0.1, s: 0.5, d: 2.0 }
    }
}

impl GlimpseSettings {
    /// Full-size banks `(A_y, A_x)` for an `h x w` image.
    pub fn masks(&self, h: usize, w: usize) -> Result<(AttentionMask, AttentionMask)> {
        let bank = |n| GlimpseParams {
            u: self.u,
            s: self.s,
            d: self.d,
            rows: n,
            cols: n,
        };
        Ok((gaussian_mask(bank(h))?, gaussian_mask(bank(w))?))
    }
}

/// Glimpses both images of a pair with identical masks; the label is untouched.
pub fn preprocess_pair(pair: &SamplePair, settings: &GlimpseSettings) -> Result<SamplePair> {
    let (h, w) = pair.spatial();
    let (a_y, a_x) = settings.masks(h, w)?;
    Ok(SamplePair {
        id: pair.id.clone(),
        t1: apply_glimpse(&pair.t1, &a_y, &a_x)?,
        t2: apply_glimpse(&pair.t2, &a_y, &a_x)?,
        label: pair.label.clone(),
    })
}
