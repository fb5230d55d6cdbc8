//! CSV exchange: header `label,generator_id,f0,...,f{dim-1}`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::EmbeddingSet;

pub fn import_csv(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, dim)
}

pub(crate) fn parse_csv(text: &str, dim: usize) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();
    let header = match rows.next() {
        Some(h) => h.map_err(|e| Error::Line {
            line: 1,
            msg: e.to_string(),
        })?,
        None => return Err(Error::Line { line: 1, msg: "missing header".into() }),
    };
    let expected: Vec<String> = ["label".to_string(), "generator_id".to_string()]
        .into_iter()
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(Error::Line {
            line: 1,
            msg: format!("header must be label,generator_id,f0..f{}", dim.saturating_sub(1)),
        });
    }
    let mut set = EmbeddingSet::new(dim);
    for (i, row) in rows.enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Line { line, msg: e.to_string() })?;
        if row.len() != dim + 2 {
            return Err(Error::Line {
                line,
                msg: format!("expected {} cells, found {}", dim + 2, row.len()),
            });
        }
        let cell_err = |col: usize, v: &str| Error::Line {
            line,
            msg: format!("column {col}: {v:?} is not a number"),
        };
        let label: u8 = row[0].trim().parse().map_err(|_| cell_err(0, &row[0]))?;
        if label > 1 {
            return Err(Error::Line {
                line,
                msg: format!("label {label} is not 0 or 1"),
            });
        }
        let generator_id: u32 = row[1].trim().parse().map_err(|_| cell_err(1, &row[1]))?;
        let vector = (0..dim)
            .map(|j| {
                let s = row[j + 2].trim();
                s.parse::<f32>().map_err(|_| cell_err(j + 2, s))
            })
            .collect::<Result<Vec<f32>>>()?;
        set.push(vector, label, generator_id, String::new())?;
    }
    Ok(set)
}

pub(crate) fn render_csv(set: &EmbeddingSet) -> String {
    let mut out = String::from("label,generator_id");
    for i in 0..set.dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for r in &set.records {
        out.push_str(&format!("{},{}", r.label, r.generator_id));
        for v in &r.vector {
            // 17 significant digits
            out.push_str(&format!(",{:.16e}", *v as f64));
        }
        out.push('\n');
    }
    out
}

/// Writes the set as CSV; tags are not carried.
pub fn export_csv(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    set.validate()?;
    let path = path.as_ref();
    std::fs::write(path, render_csv(set)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_row_fixture() {
        let text = "label,generator_id,f0,f1\n0,0,1.5,-2\n1,3,0.25,4e-3\n";
        let set = parse_csv(text, 2).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.records[1].generator_id, 3);
        assert_eq!(set.records[1].vector, vec![0.25, 4e-3]);
    }

    #[test]
    fn ragged_row_cites_line() {
        let text = "label,generator_id,f0,f1\n0,0,1,2\n1,1,3\n";
        let err = parse_csv(text, 2).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn non_numeric_cell_cites_line() {
        let text = "label,generator_id,f0\n0,0,abc\n";
        let err = parse_csv(text, 1).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_csv("label,gen,f0\n", 1).is_err());
    }

    #[test]
    fn export_then_import_is_exact() {
        let mut set = EmbeddingSet::new(3);
        set.push(vec![0.1, -1.0e-7, 3.402_823_5e38], 1, 2, "").unwrap();
        set.push(vec![f32::MIN_POSITIVE, 1.0 / 3.0, -0.0], 0, 0, "").unwrap();
        let back = parse_csv(&render_csv(&set), 3).unwrap();
        for (a, b) in set.records.iter().zip(&back.records) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.vector), bits(&b.vector));
        }
    }
}
