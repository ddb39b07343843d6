use std::fs;
use std::path::Path;

use super::{DatasetSplit, Labels, SplitTag};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Label column selected by position or, when the file has a header, by
/// name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub label_column: ColumnRef,
    pub has_header: bool,
    pub delimiter: char,
    /// Classification maps label text to indices by first appearance;
    /// regression parses the label column as real targets.
    pub regression: bool,
    /// Classification labels are mapped against this vocabulary first, with
    /// unseen labels appended; lets a separate test file share the training
    /// file's class indices.
    pub class_vocabulary: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            label_column: ColumnRef::Index(0),
            has_header: false,
            delimiter: ',',
            regression: false,
            class_vocabulary: Vec::new(),
        }
    }
}

/// Loads a delimited text file into a feature matrix and labels. Row order
/// is preserved; all rows must be rectangular and all non-label cells
/// numeric. Errors carry 1-based line (and column) positions.
pub fn load_csv<R: Real>(path: &Path, options: &CsvOptions) -> Result<DatasetSplit<R>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read '{}': {e}", path.display())))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let mut header: Option<Vec<String>> = None;
    if options.has_header {
        match lines.next() {
            Some((_, line)) => {
                header = Some(
                    line.split(options.delimiter)
                        .map(|c| c.trim().to_string())
                        .collect(),
                );
            }
            None => return Err(Error::Data(format!("'{}' is empty", path.display()))),
        }
    }

    let label_index = match &options.label_column {
        ColumnRef::Index(i) => *i,
        ColumnRef::Name(name) => {
            let header = header.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "label column '{name}' referenced by name but '{}' has no header",
                    path.display()
                ))
            })?;
            header.iter().position(|c| c == name).ok_or_else(|| {
                Error::Config(format!(
                    "label column '{name}' not found in header of '{}'",
                    path.display()
                ))
            })?
        }
    };

    let mut width: Option<usize> = None;
    let mut features: Vec<R> = Vec::new();
    let mut class_names: Vec<String> = options.class_vocabulary.clone();
    let mut class_labels: Vec<usize> = Vec::new();
    let mut real_labels: Vec<R> = Vec::new();
    let mut rows = 0usize;

    for (line_no, line) in lines {
        let line_no = line_no + 1; // 1-based, counting the header
        let cells: Vec<&str> = line.split(options.delimiter).map(|c| c.trim()).collect();
        match width {
            None => {
                if label_index >= cells.len() {
                    return Err(Error::Config(format!(
                        "label column {label_index} out of range: line {line_no} has {} columns",
                        cells.len()
                    )));
                }
                width = Some(cells.len());
            }
            Some(w) if w != cells.len() => {
                return Err(Error::Data(format!(
                    "ragged row at line {line_no}: expected {w} columns, got {}",
                    cells.len()
                )));
            }
            _ => {}
        }

        for (col, cell) in cells.iter().enumerate() {
            if col == label_index {
                if options.regression {
                    let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                        Error::Data(format!(
                            "non-numeric regression target '{cell}' at line {line_no}, column {}",
                            col + 1
                        ))
                    })?;
                    real_labels.push(R::from_f64(v));
                } else {
                    let id = match class_names.iter().position(|c| c == cell) {
                        Some(id) => id,
                        None => {
                            class_names.push(cell.to_string());
                            class_names.len() - 1
                        }
                    };
                    class_labels.push(id);
                }
            } else {
                let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!(
                        "non-numeric feature cell '{cell}' at line {line_no}, column {}",
                        col + 1
                    ))
                })?;
                features.push(R::from_f64(v));
            }
        }
        rows += 1;
    }

    if rows == 0 {
        return Err(Error::Data(format!(
            "'{}' contains no data rows",
            path.display()
        )));
    }
    let f = width.unwrap() - 1;
    let labels = if options.regression {
        Labels::Reals(real_labels)
    } else {
        Labels::Classes(class_labels)
    };
    Ok(DatasetSplit {
        features: Tensor::from_vec(&[rows, f], features)?,
        labels,
        tag: SplitTag::Train,
        class_names: if options.regression { Vec::new() } else { class_names },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_rows_four_features() {
        let f = write_temp("1,2,3,4,a\n5,6,7,8,b\n9,10,11,12,a\n");
        let opts = CsvOptions {
            label_column: ColumnRef::Index(4),
            ..CsvOptions::default()
        };
        let split = load_csv::<f64>(f.path(), &opts).unwrap();
        assert_eq!(split.features.shape(), &[3, 4]);
        assert_eq!(split.labels.len(), 3);
    }

    #[test]
    fn labels_map_by_first_appearance() {
        let f = write_temp("1,a\n2,b\n3,a\n");
        let opts = CsvOptions {
            label_column: ColumnRef::Index(1),
            ..CsvOptions::default()
        };
        let split = load_csv::<f64>(f.path(), &opts).unwrap();
        match &split.labels {
            super::super::Labels::Classes(v) => assert_eq!(v, &[0, 1, 0]),
            _ => panic!("expected class labels"),
        }
        assert_eq!(split.class_names, vec!["a", "b"]);
    }

    #[test]
    fn ragged_row_reports_the_line() {
        let f = write_temp("1,2,a\n1,2,3,a\n");
        let opts = CsvOptions {
            label_column: ColumnRef::Index(2),
            ..CsvOptions::default()
        };
        let err = load_csv::<f64>(f.path(), &opts).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_line_and_column() {
        let f = write_temp("1,2,a\n1,oops,b\n");
        let opts = CsvOptions {
            label_column: ColumnRef::Index(2),
            ..CsvOptions::default()
        };
        let err = load_csv::<f64>(f.path(), &opts).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn label_column_by_header_name() {
        let f = write_temp("x,y,species\n1,2,a\n3,4,b\n");
        let opts = CsvOptions {
            label_column: ColumnRef::Name("species".into()),
            has_header: true,
            ..CsvOptions::default()
        };
        let split = load_csv::<f64>(f.path(), &opts).unwrap();
        assert_eq!(split.features.shape(), &[2, 2]);
        assert_eq!(split.class_names, vec!["a", "b"]);
    }

    #[test]
    fn regression_targets_parse_as_reals() {
        let f = write_temp("1,2,7.5\n3,4,-1.25\n");
        let opts = CsvOptions {
            label_column: ColumnRef::Index(2),
            regression: true,
            ..CsvOptions::default()
        };
        let split = load_csv::<f64>(f.path(), &opts).unwrap();
        match &split.labels {
            super::super::Labels::Reals(v) => assert_eq!(v, &[7.5, -1.25]),
            _ => panic!("expected real targets"),
        }
    }

    #[test]
    fn iris_has_150_rows_4_features_3_classes() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data/iris.csv");
        let opts = CsvOptions {
            label_column: ColumnRef::Name("species".into()),
            has_header: true,
            ..CsvOptions::default()
        };
        let split = load_csv::<f32>(&path, &opts).unwrap();
        assert_eq!(split.features.shape(), &[150, 4]);
        assert_eq!(split.class_names.len(), 3);
    }

    #[test]
    fn class_vocabulary_seeds_the_mapping() {
        let f = write_temp("1,b\n2,c\n3,a\n");
        let opts = CsvOptions {
            label_column: ColumnRef::Index(1),
            class_vocabulary: vec!["a".into(), "b".into()],
            ..CsvOptions::default()
        };
        let split = load_csv::<f64>(f.path(), &opts).unwrap();
        match &split.labels {
            super::super::Labels::Classes(v) => assert_eq!(v, &[1, 2, 0]),
            _ => panic!("expected class labels"),
        }
        assert_eq!(split.class_names, vec!["a", "b", "c"]);
    }
}

#[cfg(test)]
mod finiteness_tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn non_finite_cells_are_data_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"1.0,inf,a\n").unwrap();
        let opts = CsvOptions {
            label_column: ColumnRef::Index(2),
            ..CsvOptions::default()
        };
        let err = load_csv::<f64>(f.path(), &opts).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("column 2"), "{err}");

        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"1.0,nan\n").unwrap();
        let opts = CsvOptions {
            label_column: ColumnRef::Index(1),
            regression: true,
            ..CsvOptions::default()
        };
        assert!(load_csv::<f64>(f.path(), &opts).is_err());
    }
}
