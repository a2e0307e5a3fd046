//! FER13-format CSV: header `emotion,pixels,Usage`, one 48×48 grayscale image
//! per row as 2304 space-separated integers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{io_err, pixel_to_unit, DataError, Dataset, ImageExample, Usage};
use crate::tensor::Tensor;

pub const FER_SIZE: usize = 48;
pub const FER_PIXELS: usize = FER_SIZE * FER_SIZE;
pub const FER_CLASSES: [&str; 7] = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"];

/// Maps the usage column to a partition; unmapped tags are row errors.
#[derive(Clone, Debug)]
pub struct UsageMapping {
    pub map: HashMap<String, Usage>,
}

impl Default for UsageMapping {
    fn default() -> Self {
        let map = [("Training", Usage::Train), ("PublicTest", Usage::Validation), ("PrivateTest", Usage::Validation)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self { map }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowError {
    /// 1-based line number in the file (the header is line 1).
    pub row: usize,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

/// Parsed examples plus the rows that failed; `rows == dataset.len() + errors.len()`.
#[derive(Debug)]
pub struct FerLoad {
    pub dataset: Dataset,
    pub errors: Vec<RowError>,
    pub rows: usize,
}

pub fn load_fer_csv(path: &Path, usage: &UsageMapping) -> Result<FerLoad, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "fer".into());
    parse_fer_csv(&text, usage, &name)
}

pub fn parse_fer_csv(text: &str, usage: &UsageMapping, name: &str) -> Result<FerLoad, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Row { row: 1, message: "missing header".into() })?;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    let has_usage = match cols.as_slice() {
        [e, p] if e == "emotion" && p == "pixels" => false,
        [e, p, u] if e == "emotion" && p == "pixels" && u == "usage" => true,
        _ => return Err(DataError::Row { row: 1, message: format!("expected header emotion,pixels,usage, got {header:?}") }),
    };

    let (mut examples, mut errors, mut rows) = (Vec::new(), Vec::new(), 0);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let row = i + 1;
        match parse_row(line, has_usage, usage) {
            Ok((label, image, u)) => examples.push(ImageExample { image, label: Some(label), id: (rows - 1) as u64, usage: u }),
            Err(message) => errors.push(RowError { row, message }),
        }
    }
    let dataset = Dataset {
        name: name.to_string(),
        examples,
        num_classes: FER_CLASSES.len(),
        channels: 1,
        image_size: FER_SIZE,
        class_names: FER_CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    Ok(FerLoad { dataset, errors, rows })
}

fn parse_row(line: &str, has_usage: bool, mapping: &UsageMapping) -> Result<(usize, Tensor<f32>, Usage), String> {
    let fields: Vec<&str> = line.split(',').collect();
    let expected = if has_usage { 3 } else { 2 };
    if fields.len() != expected {
        return Err(format!("expected {expected} fields, found {}", fields.len()));
    }
    let label: usize = fields[0].trim().parse().map_err(|_| format!("emotion {:?} is not an integer", fields[0]))?;
    if label >= FER_CLASSES.len() {
        return Err(format!("emotion {label} out of range 0..{}", FER_CLASSES.len() - 1));
    }
    let mut pixels = Vec::with_capacity(FER_PIXELS);
    for tok in fields[1].split_whitespace() {
        let p: u8 = tok.parse().map_err(|_| format!("pixel {tok:?} is not an integer in 0..=255"))?;
        pixels.push(pixel_to_unit(p));
    }
    if pixels.len() != FER_PIXELS {
        return Err(format!("expected {FER_PIXELS} pixels, found {}", pixels.len()));
    }
    let usage = if has_usage {
        let tag = fields[2].trim();
        *mapping.map.get(tag).ok_or_else(|| format!("unknown usage tag {tag:?}"))?
    } else {
        Usage::Unassigned
    };
    let image = Tensor::new(vec![1, FER_SIZE, FER_SIZE], pixels).map_err(|e| e.to_string())?;
    Ok((label, image, usage))
}
