use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::ProjectionError;

/// Width of the backbone feature vectors the tool was built around.
pub const EMBEDDING_DIM: usize = 256;

/// Row-major embedding matrix with one named row per image.
///
/// Row order is insertion order and is what every seeded kernel iterates
/// over, so it is part of the determinism contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl Embeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, row: &[f64]) -> Result<(), ProjectionError> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(ProjectionError::DimensionMismatch {
                id,
                expected: self.dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ProjectionError::NonFinite(id));
        }
        if self.index.contains_key(&id) {
            return Err(ProjectionError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self, ProjectionError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut out = Self::new(dim);
        for (id, row) in rows {
            out.push(id, &row)?;
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.row(i))
    }

    /// The rows for `ids`, in the order given.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, ProjectionError> {
        let mut out = Self::new(self.dim);
        for id in ids {
            let id = id.as_ref();
            let row = self.get(id).ok_or_else(|| ProjectionError::UnknownId(id.to_owned()))?;
            out.push(id, row)?;
        }
        Ok(out)
    }

    /// Reads a text matrix (one row per line, whitespace or comma separated)
    /// paired with an id list (one id per line).
    pub fn read_text(matrix: &Path, ids: &Path) -> Result<Self, ProjectionError> {
        let ids = read_ids(ids)?;
        let text = fs::read_to_string(matrix).map_err(|source| ProjectionError::Io {
            path: matrix.to_path_buf(),
            source,
        })?;
        let rows: Vec<Vec<f64>> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                l.split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.parse::<f64>().map_err(|e| ProjectionError::Parse {
                            path: matrix.to_path_buf(),
                            detail: format!("line {}: {e}", n + 1),
                        })
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        Self::pair(matrix, ids, rows)
    }

    /// Reads a little-endian `f32` matrix paired with an id list; the row
    /// width is inferred from the file size.
    pub fn read_binary(matrix: &Path, ids: &Path) -> Result<Self, ProjectionError> {
        let ids = read_ids(ids)?;
        let bytes = fs::read(matrix).map_err(|source| ProjectionError::Io {
            path: matrix.to_path_buf(),
            source,
        })?;
        let floats = bytes.len() / 4;
        if bytes.len() % 4 != 0 || ids.is_empty() || floats % ids.len() != 0 {
            return Err(ProjectionError::Parse {
                path: matrix.to_path_buf(),
                detail: format!("{} bytes do not split into {} rows", bytes.len(), ids.len()),
            });
        }
        let dim = floats / ids.len();
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let rows = values.chunks(dim).map(<[f64]>::to_vec).collect();
        Self::pair(matrix, ids, rows)
    }

    /// Picks the reader by extension: `.bin`/`.f32` are binary, anything else text.
    pub fn read(matrix: &Path, ids: &Path) -> Result<Self, ProjectionError> {
        match matrix.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("f32") => Self::read_binary(matrix, ids),
            _ => Self::read_text(matrix, ids),
        }
    }

    fn pair(path: &Path, ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, ProjectionError> {
        if ids.len() != rows.len() {
            return Err(ProjectionError::Parse {
                path: path.to_path_buf(),
                detail: format!("{} ids but {} rows", ids.len(), rows.len()),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        Self::from_rows(dim, ids.into_iter().zip(rows))
    }

    pub fn write_text(&self, matrix: &Path, ids: &Path) -> Result<(), ProjectionError> {
        let mut m = String::new();
        for i in 0..self.len() {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            m.push_str(&row.join(" "));
            m.push('\n');
        }
        let mut idtext = self.ids.join("\n");
        idtext.push('\n');
        for (path, body) in [(matrix, m), (ids, idtext)] {
            fs::write(path, body).map_err(|source| ProjectionError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }
}

fn read_ids(path: &Path) -> Result<Vec<String>, ProjectionError> {
    let text = fs::read_to_string(path).map_err(|source| ProjectionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_rows() {
        let mut e = Embeddings::new(2);
        e.push("a", &[1.0, 2.0]).unwrap();
        assert!(matches!(
            e.push("b", &[1.0]),
            Err(ProjectionError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            e.push("c", &[f64::NAN, 0.0]),
            Err(ProjectionError::NonFinite(_))
        ));
        assert!(matches!(e.push("a", &[0.0, 0.0]), Err(ProjectionError::DuplicateId(_))));
        assert_eq!(e.len(), 1);
    }

    #[test]
    fn text_and_binary_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let e = Embeddings::from_rows(3, [("x", vec![0.5, -1.0, 2.0]), ("y", vec![1.0, 0.25, 0.0])]).unwrap();
        let (m, ids) = (dir.path().join("emb.txt"), dir.path().join("ids.txt"));
        e.write_text(&m, &ids).unwrap();
        assert_eq!(Embeddings::read(&m, &ids).unwrap(), e);

        let bin = dir.path().join("emb.bin");
        let bytes: Vec<u8> = e.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        fs::write(&bin, bytes).unwrap();
        assert_eq!(Embeddings::read(&bin, &ids).unwrap(), e);
    }

    #[test]
    fn subset_keeps_requested_order() {
        let e = Embeddings::from_rows(1, [("a", vec![1.0]), ("b", vec![2.0]), ("c", vec![3.0])]).unwrap();
        let s = e.subset(&["c", "a"]).unwrap();
        assert_eq!(s.ids(), ["c", "a"]);
        assert_eq!(s.row(0), [3.0]);
        assert!(e.subset(&["zz"]).is_err());
    }
}
