use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{read_json, FormatError};
use crate::mask2d::CropRecord;
use crate::npy::{read_npy, Matrix};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("embedding provider failed: {0}")]
    Failed(String),
    #[error("no embedding available for {0}")]
    Missing(String),
    #[error("provider returned {got} rows for {want} items")]
    RowCount { want: usize, got: usize },
    #[error("provider returned a {got}-dimensional vector, expected {want}")]
    Dimension { want: usize, got: usize },
}

/// Shared image/text embedding space.
///
/// Implementations return one row per input, in input order, each of length
/// [`dim`](Self::dim).
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, ProviderError>;

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;

    /// Identifies the provider in cache keys and parameter snapshots.
    fn describe(&self) -> String;
}

/// Checks row count, dimensionality and finiteness of a provider response.
pub fn check_rows(rows: &[Vec<f32>], want: usize, dim: usize) -> Result<(), ProviderError> {
    if rows.len() != want {
        return Err(ProviderError::RowCount { want, got: rows.len() });
    }
    for r in rows {
        if r.len() != dim {
            return Err(ProviderError::Dimension { want: dim, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::Failed("non-finite embedding value".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedCrop {
    #[serde(flatten)]
    pub crop: CropRecord,
    pub row: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedText {
    pub text: String,
    pub row: usize,
}

/// Manifest of a precomputed embedding matrix (`<stem>.json` next to `<stem>.npy`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedManifest {
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(default)]
    pub crops: Vec<PrecomputedCrop>,
    #[serde(default)]
    pub texts: Vec<PrecomputedText>,
}

type CropKey = (PathBuf, usize, [u32; 4]);

fn crop_key(c: &CropRecord) -> CropKey {
    (c.image_path.clone(), c.frame_index, [c.x1, c.y1, c.x2, c.y2])
}

/// Serves embeddings computed offline. Crops are matched on image, frame and
/// box (not on mask id or level, which do not change the pixels).
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    source: PathBuf,
    matrix: Matrix<f32>,
    crops: HashMap<CropKey, usize>,
    texts: HashMap<String, usize>,
}

impl PrecomputedProvider {
    pub fn load(npy: &Path) -> Result<Self, FormatError> {
        let manifest: PrecomputedManifest = read_json(&npy.with_extension("json"))?;
        let matrix: Matrix<f32> = read_npy(npy)?;
        Self::from_parts(npy, matrix, manifest)
    }

    pub fn from_parts(source: &Path, matrix: Matrix<f32>, manifest: PrecomputedManifest) -> Result<Self, FormatError> {
        if matrix.cols() != manifest.dim {
            return Err(FormatError::Shape(format!("matrix has {} columns, manifest D = {}", matrix.cols(), manifest.dim)));
        }
        let rows = matrix.rows();
        let check = |row: usize| {
            if row < rows {
                Ok(row)
            } else {
                Err(FormatError::Shape(format!("manifest row {row} beyond {rows} rows")))
            }
        };
        let crops = manifest.crops.iter().map(|c| Ok((crop_key(&c.crop), check(c.row)?))).collect::<Result<_, FormatError>>()?;
        let texts = manifest.texts.iter().map(|t| Ok((t.text.clone(), check(t.row)?))).collect::<Result<_, FormatError>>()?;
        Ok(Self { source: source.to_path_buf(), matrix, crops, texts })
    }

    /// A provider holding only text rows: the `--text-embedding` path.
    pub fn text_only(source: &Path, texts: &[String], matrix: Matrix<f32>) -> Result<Self, FormatError> {
        if texts.len() != matrix.rows() {
            return Err(FormatError::Shape(format!("{} texts for {} rows", texts.len(), matrix.rows())));
        }
        let manifest = PrecomputedManifest {
            dim: matrix.cols(),
            crops: Vec::new(),
            texts: texts.iter().enumerate().map(|(row, t)| PrecomputedText { text: t.clone(), row }).collect(),
        };
        Self::from_parts(source, matrix, manifest)
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn dim(&self) -> usize {
        self.matrix.cols()
    }

    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, ProviderError> {
        crops
            .iter()
            .map(|c| {
                self.crops
                    .get(&crop_key(c))
                    .map(|&r| self.matrix.row(r).to_vec())
                    .ok_or_else(|| ProviderError::Missing(format!("crop {c:?}")))
            })
            .collect()
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                self.texts
                    .get(t)
                    .map(|&r| self.matrix.row(r).to_vec())
                    .ok_or_else(|| ProviderError::Missing(format!("text {t:?}")))
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("precomputed:{}", self.source.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask2d::CropBox;

    #[test]
    fn lookup_ignores_mask_and_level() {
        let b = CropBox { x1: 1, y1: 2, x2: 3, y2: 4, level: 1 };
        let rec = CropRecord::new(0, 5, &b, Path::new("c/5.jpg"));
        let manifest = PrecomputedManifest {
            dim: 2,
            crops: vec![PrecomputedCrop { crop: rec.clone(), row: 1 }],
            texts: vec![PrecomputedText { text: "a chair in a scene".into(), row: 0 }],
        };
        let m = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = PrecomputedProvider::from_parts(Path::new("x.npy"), m, manifest).unwrap();
        let other = CropRecord { mask_id: 9, level: 3, ..rec };
        assert_eq!(p.embed_crops(&[other]).unwrap(), vec![vec![0.0, 1.0]]);
        assert_eq!(p.embed_text(&["a chair in a scene".into()]).unwrap(), vec![vec![1.0, 0.0]]);
        assert!(matches!(p.embed_text(&["sofa".into()]), Err(ProviderError::Missing(_))));
    }

    #[test]
    fn manifest_rows_are_checked() {
        let manifest = PrecomputedManifest { dim: 2, crops: vec![], texts: vec![PrecomputedText { text: "x".into(), row: 3 }] };
        let m = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(PrecomputedProvider::from_parts(Path::new("x.npy"), m, manifest).is_err());
    }

    #[test]
    fn row_checks() {
        assert!(check_rows(&[vec![1.0, 2.0]], 1, 2).is_ok());
        assert_eq!(check_rows(&[vec![1.0]], 1, 2), Err(ProviderError::Dimension { want: 2, got: 1 }));
        assert_eq!(check_rows(&[], 1, 2), Err(ProviderError::RowCount { want: 1, got: 0 }));
        assert!(check_rows(&[vec![f32::NAN, 0.0]], 1, 2).is_err());
    }
}
