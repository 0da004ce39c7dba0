use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Corner-aligned bilinear interpolation, for image channels.
    Bilinear,
    /// Corner-aligned nearest neighbour, for labels.
    Nearest,
}

/// Source coordinate of output index `i` with corners aligned.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (source_coord(i, src, dst).round() as usize).min(src - 1)
}

pub fn resize(image: &Tensor<f32>, target: (usize, usize), mode: ResizeMode) -> Result<Tensor<f32>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("resize", format!("{:?}", image.shape()))),
    };
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resize target", format!("{th}x{tw}")));
    }
    if (th, tw) == (h, w) {
        return Ok(image.detach());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..th {
            for x in 0..tw {
                let v = match mode {
                    ResizeMode::Nearest => plane[nearest_index(y, h, th) * w + nearest_index(x, w, tw)],
                    ResizeMode::Bilinear => {
                        let sy = source_coord(y, h, th);
                        let sx = source_coord(x, w, tw);
                        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bottom * fy
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::new(&[c, th, tw], out)
}

/// Nearest-neighbour resize, so the result stays binary.
pub fn resize_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resize target", format!("{th}x{tw}")));
    }
    let (h, w) = (mask.height(), mask.width());
    Ok(Mask::from_fn(th, tw, |y, x| {
        mask.get(nearest_index(y, h, th), nearest_index(x, w, tw))
    }))
}
