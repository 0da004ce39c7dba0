use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use super::{DatasetSplit, Mask, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::{scdt, Tensor};

pub const TRAIN_MANIFEST: &str = "train.txt";
pub const TEST_MANIFEST: &str = "test.txt";

/// On-disk encoding for pair images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// 8-bit RGB PNG (3-channel images only).
    Png,
    /// Lossless `SCDT1` float tensors.
    Scdt,
}

fn is_scdt(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "scdt")
}

/// Reads an image as a `[C x H x W]` tensor scaled to `[0, 1]`. PNGs are
/// converted to RGB; `SCDT1` files are taken as-is (rank 2 gains a channel axis).
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    if is_scdt(path) {
        let t = scdt::read(path)?;
        return match *t.shape() {
            [_, _, _] => Ok(t),
            [h, w] => t.reshape(&[1, h, w]),
            _ => Err(Error::Format(format!(
                "{}: expected rank 2 or 3, got {:?}",
                path.display(),
                t.shape()
            ))),
        };
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a label; any nonzero value marks a changed pixel.
pub fn load_label(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    if is_scdt(path) {
        let t = scdt::read(path)?;
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(Error::Format(format!(
                    "{}: label must be [H x W] or [1 x H x W], got {:?}",
                    path.display(),
                    t.shape()
                )))
            }
        };
        return Mask::new(h, w, t.data().iter().map(|&v| (v != 0.0) as u8).collect());
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.into_raw().into_iter().map(|v| (v != 0) as u8).collect())
}

fn locate(dir: &Path, id: &str, role: &str) -> Result<PathBuf> {
    let scdt = dir.join(format!("{role}.scdt"));
    if scdt.is_file() {
        return Ok(scdt);
    }
    let png = dir.join(format!("{role}.png"));
    if png.is_file() {
        return Ok(png);
    }
    Err(Error::sample(id, format!("missing {role}.png (or {role}.scdt)")))
}

fn load_pair(dir: &Path, id: &str) -> Result<SamplePair> {
    let with_id = |e: Error| match e {
        Error::Sample { .. } => e,
        other => Error::sample(id, other.to_string()),
    };
    let t1 = load_image(locate(dir, id, "t1")?).map_err(with_id)?;
    let t2 = load_image(locate(dir, id, "t2")?).map_err(with_id)?;
    let label = load_label(locate(dir, id, "label")?).map_err(with_id)?;
    SamplePair::new(id, t1, t2, label)
}

/// Loads every `root/<id>/{t1,t2,label}` sample, sorted by id.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let root = root.as_ref();
    let mut ids = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(
            "dataset",
            format!("{} contains no sample directories", root.display()),
        ));
    }
    ids.iter().map(|id| load_pair(&root.join(id), id)).collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Loads a dataset and partitions it by `train.txt` / `test.txt` when present.
/// Without manifests every pair is a training pair. When only `train.txt`
/// exists, the remaining pairs form the test split.
pub fn load_split(root: impl AsRef<Path>, seed: u64) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let all = load_dataset(root)?;
    let train_path = root.join(TRAIN_MANIFEST);
    let test_path = root.join(TEST_MANIFEST);
    if !train_path.is_file() && !test_path.is_file() {
        return DatasetSplit::new(all, Vec::new(), seed);
    }
    let pick = |ids: &[String], all: &[SamplePair]| -> Result<Vec<SamplePair>> {
        ids.iter()
            .map(|id| {
                all.iter()
                    .find(|p| &p.id == id)
                    .cloned()
                    .ok_or_else(|| Error::sample(id, "listed in a manifest but not found"))
            })
            .collect()
    };
    let train_ids = if train_path.is_file() {
        read_manifest(&train_path)?
    } else {
        let test_ids = read_manifest(&test_path)?;
        all.iter()
            .map(|p| p.id.clone())
            .filter(|id| !test_ids.contains(id))
            .collect()
    };
    let test_ids = if test_path.is_file() {
        read_manifest(&test_path)?
    } else {
        all.iter()
            .map(|p| p.id.clone())
            .filter(|id| !train_ids.contains(id))
            .collect()
    };
    DatasetSplit::new(pick(&train_ids, &all)?, pick(&test_ids, &all)?, seed)
}

/// Writes a `[3 x H x W]` or `[1 x H x W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image_png(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match *t.shape() {
        [3, h, w] => {
            let d = t.data();
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                image::Rgb([quant(d[i]), quant(d[h * w + i]), quant(d[2 * h * w + i])])
            });
            img.save(path)?;
        }
        [1, h, w] => {
            let img = GrayImage::from_raw(w as u32, h as u32, t.data().iter().map(|&v| quant(v)).collect())
                .expect("buffer matches dimensions");
            img.save(path)?;
        }
        _ => {
            return Err(Error::shape(
                "save_image_png",
                format!("need 1 or 3 channels, got {:?}", t.shape()),
            ))
        }
    }
    Ok(())
}

fn mask_image(mask: &Mask) -> GrayImage {
    GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| v * 255).collect(),
    )
    .expect("buffer matches dimensions")
}

/// Writes a mask as an 8-bit PNG with 255 = changed.
pub fn save_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    mask_image(mask).save(path)?;
    Ok(())
}

/// The bytes [`save_mask_png`] would write.
pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    mask_image(mask).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes `root/<id>/{t1,t2,label}`.
pub fn save_pair(root: impl AsRef<Path>, pair: &SamplePair, format: ImageFormat) -> Result<()> {
    let dir = root.as_ref().join(&pair.id);
    fs::create_dir_all(&dir)?;
    match format {
        ImageFormat::Png => {
            save_image_png(dir.join("t1.png"), &pair.t1)?;
            save_image_png(dir.join("t2.png"), &pair.t2)?;
        }
        ImageFormat::Scdt => {
            scdt::write(dir.join("t1.scdt"), &pair.t1)?;
            scdt::write(dir.join("t2.scdt"), &pair.t2)?;
        }
    }
    save_mask_png(dir.join("label.png"), &pair.label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, h: usize, w: usize) -> SamplePair {
        let img = |off: f32| {
            Tensor::new(
                &[3, h, w],
                (0..3 * h * w)
                    .map(|i| ((i as f32 * 7.0 + off) % 256.0) / 255.0)
                    .collect(),
            )
            .unwrap()
        };
        let label = Mask::from_fn(h, w, |y, x| (y + x) % 3 == 0);
        SamplePair::new(id, img(0.0), img(11.0), label).unwrap()
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b", "c"] {
            save_pair(dir.path(), &pair(id, 6, 5), ImageFormat::Png).unwrap();
        }
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (p, id) in loaded.iter().zip(["a", "b", "c"]) {
            let want = pair(id, 6, 5);
            assert_eq!(p.id, id);
            assert_eq!(p.t1.shape(), &[3, 6, 5]);
            assert!(p.t1.max_abs_diff(&want.t1).unwrap() < 1e-6);
            assert_eq!(p.label, want.label);
        }
    }

    #[test]
    fn label_255_becomes_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        GrayImage::from_raw(2, 2, vec![0, 255, 255, 0])
            .unwrap()
            .save(&path)
            .unwrap();
        assert_eq!(load_label(&path).unwrap().data(), &[0, 1, 1, 0]);
    }

    #[test]
    fn size_mismatch_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair("bad", 8, 8);
        save_pair(dir.path(), &p, ImageFormat::Png).unwrap();
        save_mask_png(dir.path().join("bad/label.png"), &Mask::zeros(4, 4)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Sample { id, .. } if id == "bad"), "{err}");
    }

    #[test]
    fn missing_label_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        save_pair(dir.path(), &pair("x1", 4, 4), ImageFormat::Png).unwrap();
        fs::remove_file(dir.path().join("x1/label.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("x1") && err.contains("label.png"), "{err}");
    }

    #[test]
    fn scdt_images_are_drop_in() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair("m", 4, 6);
        save_pair(dir.path(), &p, ImageFormat::Scdt).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded[0].t1.data(), p.t1.data());
    }

    #[test]
    fn manifests_define_the_split() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b", "c", "d"] {
            save_pair(dir.path(), &pair(id, 4, 4), ImageFormat::Png).unwrap();
        }
        let split = load_split(dir.path(), 0).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (4, 0));
        write_manifest(dir.path().join(TRAIN_MANIFEST), &["a".into(), "c".into()]).unwrap();
        let split = load_split(dir.path(), 0).unwrap();
        let ids = |v: &[SamplePair]| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&split.train), ["a", "c"]);
        assert_eq!(ids(&split.test), ["b", "d"]);
        write_manifest(dir.path().join(TEST_MANIFEST), &["zz".into()]).unwrap();
        assert!(load_split(dir.path(), 0).is_err());
    }
}
