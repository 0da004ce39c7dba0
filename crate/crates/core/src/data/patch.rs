use super::{Mask, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Top-left offsets of `size`-long windows stepping by `stride` along an axis
/// of length `total`. If the last regular window stops short of the border, a
/// final window flush with the border is appended.
pub fn grid_positions(total: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 || size > total {
        return Err(Error::invalid(
            "patch grid",
            format!("window {size} with stride {stride} over extent {total}"),
        ));
    }
    let mut out: Vec<usize> = (0..=total - size).step_by(stride).collect();
    if out.last() != Some(&(total - size)) {
        out.push(total - size);
    }
    Ok(out)
}

/// `[C x h x w]` window of a `[C x H x W]` tensor at `(y, x)`.
pub fn crop<T: Float>(t: &Tensor<T>, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, th, tw) = match *t.shape() {
        [c, th, tw] => (c, th, tw),
        _ => return Err(Error::shape("crop", format!("{:?}", t.shape()))),
    };
    if y + h > th || x + w > tw {
        return Err(Error::shape(
            "crop",
            format!("{h}x{w} window at ({y}, {x}) exceeds {th}x{tw}"),
        ));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in y..y + h {
            let start = (ch * th + r) * tw + x;
            out.extend_from_slice(&src[start..start + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn crop_mask(m: &Mask, y: usize, x: usize, h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |r, c| m.get(y + r, x + c))
}

/// Aligned crops of a pair on a regular grid; ids are suffixed `@y,x`.
pub fn extract_patches(pair: &SamplePair, size: (usize, usize), stride: (usize, usize)) -> Result<Vec<SamplePair>> {
    let (h, w) = pair.spatial();
    let ys = grid_positions(h, size.0, stride.0).map_err(|e| Error::sample(&pair.id, e.to_string()))?;
    let xs = grid_positions(w, size.1, stride.1).map_err(|e| Error::sample(&pair.id, e.to_string()))?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(SamplePair {
                id: format!("{}@{y},{x}", pair.id),
                t1: crop(&pair.t1, y, x, size.0, size.1)?,
                t2: crop(&pair.t2, y, x, size.0, size.1)?,
                label: crop_mask(&pair.label, y, x, size.0, size.1),
            });
        }
    }
    Ok(out)
}

/// Pastes `[C x h x w]` tiles at their `(y, x)` offsets into a `[C x H x W]`
/// canvas. Later tiles overwrite earlier ones where they overlap.
pub fn stitch<T: Float>(tiles: &[(usize, usize, Tensor<T>)], height: usize, width: usize) -> Result<Tensor<T>> {
    let c = tiles
        .first()
        .ok_or_else(|| Error::shape("stitch", "no tiles"))?
        .2
        .shape()[0];
    let mut canvas = vec![T::zero(); c * height * width];
    for (y, x, tile) in tiles {
        let (tc, th, tw) = match *tile.shape() {
            [tc, th, tw] => (tc, th, tw),
            _ => return Err(Error::shape("stitch", format!("{:?}", tile.shape()))),
        };
        if tc != c || y + th > height || x + tw > width {
            return Err(Error::shape(
                "stitch",
                format!("tile {:?} at ({y}, {x}) on {c}x{height}x{width}", tile.shape()),
            ));
        }
        for ch in 0..c {
            for r in 0..th {
                let dst = (ch * height + y + r) * width + x;
                let src = (ch * th + r) * tw;
                canvas[dst..dst + tw].copy_from_slice(&tile.data()[src..src + tw]);
            }
        }
    }
    Tensor::new(&[c, height, width], canvas)
}
