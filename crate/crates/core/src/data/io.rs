//! Dataset files.
//!
//! Two CSV schemas, UTF-8 with `\n` line endings:
//! - features: header `split,task,y,x_0,...,x_{D-1}`
//! - attributes: header `y,a_0,...,a_{Q-1}`, one row per class, ids dense
//!
//! Reals are printed with 17 significant digits so a save/load round
//! trip is bit-lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{AttributeTable, DataError, Sample, Split};

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn schema_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Schema {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the features and attributes files for a dataset.
pub fn save_dataset(
    samples: &[Sample],
    table: &AttributeTable,
    features_path: &Path,
    attributes_path: &Path,
) -> Result<(), DataError> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut out = String::from("split,task,y");
    for i in 0..d {
        let _ = write!(out, ",x_{i}");
    }
    out.push('\n');
    for s in samples {
        let _ = write!(out, "{},{},{}", s.split.as_str(), s.task, s.y);
        for v in &s.x {
            out.push(',');
            out.push_str(&fmt_real(*v));
        }
        out.push('\n');
    }
    fs::write(features_path, out).map_err(|e| io_err(features_path, e))?;

    let q = table.n_attributes();
    let mut out = String::from("y");
    for i in 0..q {
        let _ = write!(out, ",a_{i}");
    }
    out.push('\n');
    for y in 0..table.n_classes() {
        let _ = write!(out, "{y}");
        for v in table.describe(y).expect("class in range") {
            out.push(',');
            out.push_str(&fmt_real(*v));
        }
        out.push('\n');
    }
    fs::write(attributes_path, out).map_err(|e| io_err(attributes_path, e))?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64, DataError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad {what} value `{field}`")))
}

fn parse_usize(path: &Path, line: usize, field: &str, what: &str) -> Result<usize, DataError> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("bad {what} value `{field}`")))
}

fn load_attributes(path: &Path) -> Result<AttributeTable, DataError> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(schema_err(path, "empty file"));
    }
    let header: Vec<&str> = lines[0].split(',').collect();
    if header.first() != Some(&"y") || header.len() < 2 {
        return Err(schema_err(path, "expected header `y,a_0,...`"));
    }
    let q = header.len() - 1;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != q + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, got {}", q + 1, fields.len()),
            ));
        }
        let y = parse_usize(path, lineno, fields[0], "class id")?;
        if y != rows.len() {
            let msg = if y < rows.len() {
                format!("duplicate or out-of-order class id {y}")
            } else {
                format!("class ids must be dense; expected {}, got {y}", rows.len())
            };
            return Err(schema_err(path, msg));
        }
        let mut row = Vec::with_capacity(q);
        for f in &fields[1..] {
            row.push(parse_f64(path, lineno, f, "attribute")?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(schema_err(path, "no attribute rows"));
    }
    AttributeTable::from_rows(rows).map_err(|e| schema_err(path, e.to_string()))
}

fn load_features(path: &Path) -> Result<Vec<Sample>, DataError> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(schema_err(path, "empty file"));
    }
    let header: Vec<&str> = lines[0].split(',').collect();
    if header.len() < 4 || header[0] != "split" || header[1] != "task" || header[2] != "y" {
        return Err(schema_err(path, "expected header `split,task,y,x_0,...`"));
    }
    let d = header.len() - 3;

    let mut samples = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, got {}", d + 3, fields.len()),
            ));
        }
        let split = match fields[0].trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("split must be `train` or `test`, got `{other}`"),
                ))
            }
        };
        let task = parse_usize(path, lineno, fields[1], "task")?;
        let y = parse_usize(path, lineno, fields[2], "class id")?;
        let mut x = Vec::with_capacity(d);
        for f in &fields[3..] {
            x.push(parse_f64(path, lineno, f, "feature")?);
        }
        samples.push(Sample { x, y, task, split });
    }
    if samples.is_empty() {
        return Err(schema_err(path, "no samples"));
    }
    Ok(samples)
}

/// Load a dataset and cross-validate the two files: dense class ids,
/// every class described by the attribute table, and at least one train
/// and one test sample per class.
pub fn load_dataset(
    features_path: &Path,
    attributes_path: &Path,
) -> Result<(Vec<Sample>, AttributeTable), DataError> {
    let table = load_attributes(attributes_path)?;
    let samples = load_features(features_path)?;
    let c = table.n_classes();

    let mut has_train = vec![false; c];
    let mut has_test = vec![false; c];
    for s in &samples {
        if s.y >= c {
            return Err(schema_err(
                features_path,
                format!(
                    "sample class id {} has no attribute row (table has {c} classes)",
                    s.y
                ),
            ));
        }
        match s.split {
            Split::Train => has_train[s.y] = true,
            Split::Test => has_test[s.y] = true,
        }
    }
    for y in 0..c {
        if !has_train[y] || !has_test[y] {
            return Err(schema_err(
                features_path,
                format!("class {y} is missing train or test samples; class ids must be dense with data on both splits"),
            ));
        }
    }
    Ok((samples, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_benchmark, BenchmarkSpec};

    fn spec() -> BenchmarkSpec {
        BenchmarkSpec {
            classes: 5,
            attributes: 6,
            input_dim: 4,
            train_per_class: 3,
            test_per_class: 2,
            alpha: 0.7,
            sigma: 0.2,
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("features.csv");
        let apath = dir.path().join("attributes.csv");
        let (samples, table) = generate_benchmark(&spec()).unwrap();
        save_dataset(&samples, &table, &fpath, &apath).unwrap();
        let (loaded, ltable) = load_dataset(&fpath, &apath).unwrap();
        assert_eq!(samples, loaded);
        assert_eq!(table, ltable);

        // saving the loaded data reproduces the files byte for byte
        let fpath2 = dir.path().join("features2.csv");
        let apath2 = dir.path().join("attributes2.csv");
        save_dataset(&loaded, &ltable, &fpath2, &apath2).unwrap();
        assert_eq!(
            std::fs::read(&fpath).unwrap(),
            std::fs::read(&fpath2).unwrap()
        );
        assert_eq!(
            std::fs::read(&apath).unwrap(),
            std::fs::read(&apath2).unwrap()
        );
    }

    #[test]
    fn header_only_features_file_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("features.csv");
        let apath = dir.path().join("attributes.csv");
        std::fs::write(&fpath, "split,task,y,x_0\n").unwrap();
        std::fs::write(&apath, "y,a_0\n0,1.0\n1,0.0\n").unwrap();
        let err = load_dataset(&fpath, &apath).unwrap_err();
        assert!(err.to_string().contains("no samples"), "{err}");
    }

    #[test]
    fn duplicate_class_id_in_attributes_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let apath = dir.path().join("attributes.csv");
        std::fs::write(&apath, "y,a_0,a_1\n0,1.0,0.0\n0,0.0,1.0\n").unwrap();
        let err = load_attributes(&apath).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("features.csv");
        std::fs::write(
            &fpath,
            "split,task,y,x_0\ntrain,0,0,1.0\ntrain,0,zero,1.0\n",
        )
        .unwrap();
        let err = load_features(&fpath).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:"), "{msg}");
    }

    #[test]
    fn non_dense_class_ids_are_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let apath = dir.path().join("attributes.csv");
        std::fs::write(&apath, "y,a_0\n0,1.0\n2,0.0\n").unwrap();
        let err = load_attributes(&apath).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn class_without_test_samples_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("features.csv");
        let apath = dir.path().join("attributes.csv");
        std::fs::write(&apath, "y,a_0\n0,1.0\n1,0.0\n").unwrap();
        std::fs::write(
            &fpath,
            "split,task,y,x_0\ntrain,0,0,1.0\ntest,0,0,1.1\ntrain,0,1,2.0\n",
        )
        .unwrap();
        let err = load_dataset(&fpath, &apath).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }
}
