//! CSV ingestion and emission. Columns named `x_<i>` are inputs and `y_<j>`
//! outputs; any other column is carried through untouched by the loader's
//! callers (for example a `task` or `mode` label).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

fn parse_cell(path: &Path, row: usize, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::CsvCell {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::CsvCell {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

/// A parsed CSV file: the dataset plus any extra (non x/y) columns as raw text.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub data: Dataset,
    pub extra: Vec<(String, Vec<String>)>,
}

pub fn load_csv_table(path: impl AsRef<Path>) -> Result<CsvTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::CsvFormat {
            path: path.to_path_buf(),
            message: "missing header row".into(),
        });
    }
    let x_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| headers[i].starts_with("x_"))
        .collect();
    let y_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| headers[i].starts_with("y_"))
        .collect();
    if y_cols.is_empty() {
        return Err(Error::CsvFormat {
            path: path.to_path_buf(),
            message: "no `y_` column in header".into(),
        });
    }
    if x_cols.is_empty() {
        return Err(Error::CsvFormat {
            path: path.to_path_buf(),
            message: "no `x_` column in header".into(),
        });
    }
    let extra_cols: Vec<usize> = (0..headers.len())
        .filter(|i| !x_cols.contains(i) && !y_cols.contains(i))
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut extra: Vec<(String, Vec<String>)> = extra_cols
        .iter()
        .map(|&i| (headers[i].to_string(), Vec::new()))
        .collect();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row, header is row 0.
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(Error::CsvFormat {
                path: path.to_path_buf(),
                message: format!(
                    "row {row} has {} fields, header has {}",
                    record.len(),
                    headers.len()
                ),
            });
        }
        for &c in &x_cols {
            xs.push(parse_cell(path, row, &headers[c], &record[c])?);
        }
        for &c in &y_cols {
            ys.push(parse_cell(path, row, &headers[c], &record[c])?);
        }
        for (slot, &c) in extra.iter_mut().zip(&extra_cols) {
            slot.1.push(record[c].to_string());
        }
        rows += 1;
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let data = Dataset::new(
        name,
        Matrix::new(rows, x_cols.len(), xs)?,
        Matrix::new(rows, y_cols.len(), ys)?,
    )
    .map_err(|e| Error::CsvFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(CsvTable { data, extra })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    Ok(load_csv_table(path)?.data)
}

/// Writes `x_*`, `y_*` columns followed by `extra` label columns.
pub fn write_csv_with(
    d: &Dataset,
    extra: &[(&str, Vec<String>)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let mut header: Vec<String> = (0..d.input_dim()).map(|i| format!("x_{i}")).collect();
    header.extend((0..d.output_dim()).map(|j| format!("y_{j}")));
    header.extend(extra.iter().map(|(n, _)| n.to_string()));
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..d.len() {
        let mut fields: Vec<String> = d.x.row(i).iter().map(|v| format!("{v}")).collect();
        fields.extend(d.y.row(i).iter().map(|v| format!("{v}")));
        fields.extend(extra.iter().map(|(_, col)| col[i].clone()));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv_with(d, &[], path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x_0,y_0\n1.5,2\n-3,4e-1\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.input_dim(), 1);
        assert_eq!(d.output_dim(), 1);
        assert_eq!(d.y.data, vec![2.0, 0.4]);
    }

    #[test]
    fn roundtrip_is_textually_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let text = "x_0,x_1,y_0\n0.1,-2.5,3.0000000000000004\n1e-300,7,8\n";
        std::fs::write(&p, text).unwrap();
        let d = load_csv(&p).unwrap();
        let q = dir.path().join("e.csv");
        write_csv(&d, &q).unwrap();
        let again = load_csv(&q).unwrap();
        assert_eq!(again.x, d.x);
        assert_eq!(again.y, d.y);
    }

    #[test]
    fn nan_cell_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x_0,y_0\n1,2\n3,NaN\n").unwrap();
        match load_csv(&p) {
            Err(Error::CsvCell { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y_0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_headers_and_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x_0,x_1\n1,2\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::CsvFormat { .. })));
        std::fs::write(&p, "x_0,y_0\n1,abc\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::CsvCell { row: 1, .. })));
        std::fs::write(&p, "").unwrap();
        assert!(load_csv(&p).is_err());
        assert!(load_csv(dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn extra_columns_are_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "task,x_0,y_0\n0,1,2\n1,3,4\n").unwrap();
        let t = load_csv_table(&p).unwrap();
        assert_eq!(t.extra, vec![("task".to_string(), vec!["0".to_string(), "1".to_string()])]);
    }
}
