use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{io_err, pixel_to_unit, DataError, Dataset, ImageExample, Usage};
use crate::tensor::Tensor;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_err(dir, err)))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` trees; classes are the sorted subdirectory names.
///
/// Images are converted to `channels` (1 = luma, 3 = RGB) and resized to
/// `image_size × image_size`. Files that fail to decode are errors.
pub fn load_image_dir(root: &Path, channels: usize, image_size: usize) -> Result<Dataset, DataError> {
    if channels != 1 && channels != 3 {
        return Err(DataError::Invalid(format!("channels must be 1 or 3, got {channels}")));
    }
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.len() < 2 {
        return Err(DataError::Invalid(format!("{} needs at least two class directories", root.display())));
    }
    let size = image_size as u32;
    let mut examples = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let img = image::open(&file).map_err(|e| DataError::Image { path: file.display().to_string(), message: e.to_string() })?;
            let img = img.resize_exact(size, size, FilterType::Triangle);
            let data: Vec<f32> = if channels == 1 {
                img.to_luma8().into_raw().into_iter().map(pixel_to_unit).collect()
            } else {
                // HWC → CHW
                let raw = img.to_rgb8().into_raw();
                (0..3).flat_map(|c| raw.iter().skip(c).step_by(3).map(|&p| pixel_to_unit(p)).collect::<Vec<_>>()).collect()
            };
            examples.push(ImageExample {
                image: Tensor::new(vec![channels, image_size, image_size], data)?,
                label: Some(label),
                id: examples.len() as u64,
                usage: Usage::Unassigned,
            });
        }
    }
    let class_names = classes
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    Ok(Dataset {
        name: root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into()),
        examples,
        num_classes: classes.len(),
        channels,
        image_size,
        class_names,
    })
}
