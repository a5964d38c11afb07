use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use super::{GroundTruth, PairedSample};
use crate::tdn::RetinexDecomposition;
use crate::{Error, ImageTensor, Result};

const LOW: &str = "low";
const HIGH: &str = "high";
const GT_R: &str = "gt_r";
const GT_L_LOW: &str = "gt_l_low";
const GT_L_HIGH: &str = "gt_l_high";

/// Reads an 8-bit PNG as `channels` (1 or 3) values in `[0, 1]`.
pub fn read_png(path: &Path, channels: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        c => return Err(Error::Input(format!("cannot read a {c}-channel image"))),
    };
    let data = raw.into_iter().map(|v| v as f64 / 255.0).collect();
    ImageTensor::new(h, w, channels, data).map_err(|e| Error::file(path, e))
}

/// Writes an image as 8-bit PNG, clamping to `[0, 1]` and rounding.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let res = if img.channels() == 1 {
        GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path)
    } else {
        RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path)
    };
    res.map_err(|e| Error::file(path, e))
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::file(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if Path::new(&name).extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Loads `<root>/low/*.png` against `<root>/high/*.png`, paired by file name
/// and ordered lexicographically. When `gt_r/`, `gt_l_low/` and `gt_l_high/`
/// all exist the ground-truth decompositions are attached.
pub fn load_paired_dir(root: &Path) -> Result<Vec<PairedSample>> {
    let (low_dir, high_dir) = (root.join(LOW), root.join(HIGH));
    let low = png_names(&low_dir)?;
    let high = png_names(&high_dir)?;
    let unmatched: Vec<String> = low.symmetric_difference(&high).cloned().collect();
    if !unmatched.is_empty() {
        return Err(Error::Unmatched(unmatched));
    }
    let gt_dirs = [GT_R, GT_L_LOW, GT_L_HIGH].map(|d| root.join(d));
    let with_gt = gt_dirs.iter().all(|d| d.is_dir());
    low.iter()
        .map(|name| {
            let id = Path::new(name).file_stem().map_or(name.clone(), |s| s.to_string_lossy().into_owned());
            let sample = PairedSample::new(id, read_png(&low_dir.join(name), 3)?, read_png(&high_dir.join(name), 3)?)?;
            if !with_gt {
                return Ok(sample);
            }
            let r = read_png(&gt_dirs[0].join(name), 3)?;
            let l_low = read_png(&gt_dirs[1].join(name), 1)?;
            let l_high = read_png(&gt_dirs[2].join(name), 1)?;
            sample.with_ground_truth(GroundTruth {
                low: RetinexDecomposition::new(r.clone(), l_low)?,
                normal: RetinexDecomposition::new(r, l_high)?,
            })
        })
        .collect()
}

/// Writes samples in the layout [`load_paired_dir`] reads. Returns the
/// written low-light paths.
pub fn write_paired_dir(root: &Path, samples: &[PairedSample]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{}.png", s.id);
        let low = root.join(LOW).join(&name);
        write_png(&low, &s.low)?;
        write_png(&root.join(HIGH).join(&name), &s.normal)?;
        if let Some(gt) = &s.ground_truth {
            write_png(&root.join(GT_R).join(&name), &gt.normal.reflectance)?;
            write_png(&root.join(GT_L_LOW).join(&name), &gt.low.illumination)?;
            write_png(&root.join(GT_L_HIGH).join(&name), &gt.normal.illumination)?;
        }
        written.push(low);
    }
    Ok(written)
}
