use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{write_voc_xml, TableAnnotation};
use crate::error::{Error, Result};
use crate::image_io::{save_png, write_atomic};
use crate::numerics::Tensor;

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub image: String,
    pub annotation: String,
    pub width: u32,
    pub height: u32,
    pub rows: usize,
    pub columns: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportSummary {
    pub entries: Vec<IndexEntry>,
}

/// Writes `images/NNNNNN.png`, `annotations/NNNNNN.xml` and `index.jsonl`
/// under `dir`. Paths in the index are relative to `dir`.
pub fn export_detection_dataset(samples: &[(Tensor<f32>, TableAnnotation)], dir: &Path) -> Result<ExportSummary> {
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    let mut index = String::new();
    for (i, (img, ann)) in samples.iter().enumerate() {
        let s = img.shape();
        if s.len() != 3 || s[1] != ann.height as usize || s[2] != ann.width as usize {
            return Err(Error::invalid(format!(
                "sample {i}: image shape {s:?} does not match a {}x{} annotation",
                ann.width, ann.height
            )));
        }
        let id = format!("{i:06}");
        let image = format!("images/{id}.png");
        let annotation = format!("annotations/{id}.xml");
        save_png(img, &dir.join(&image))?;
        write_atomic(&dir.join(&annotation), write_voc_xml(ann, &format!("{id}.png")).as_bytes())?;
        let entry = IndexEntry {
            id,
            image,
            annotation,
            width: ann.width,
            height: ann.height,
            rows: ann.rows.len(),
            columns: ann.columns.len(),
        };
        index.push_str(&serde_json::to_string(&entry)?);
        index.push('\n');
        entries.push(entry);
    }
    write_atomic(&dir.join("index.jsonl"), index.as_bytes())?;
    Ok(ExportSummary { entries })
}
