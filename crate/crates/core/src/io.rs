//! Plain-text formats: dense matrices as CSV, sampling sets as index pairs,
//! error traces as `k,error_norm`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sampling::SamplingSet;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// CSV text, one row per line, 17 significant digits.
pub fn matrix_to_csv(a: &DenseMatrix) -> String {
    let mut out = String::new();
    for row in a.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<DenseMatrix> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, content) in content_lines(text) {
        let row: Vec<f64> = content
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("'{}' is not a number", tok.trim())))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(parse_err(line, format!("expected {c} fields, found {}", row.len())));
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(1, "no matrix rows"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: &Path, a: &DenseMatrix) -> Result<()> {
    fs::write(path, matrix_to_csv(a))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    matrix_from_csv(&fs::read_to_string(path)?)
}

/// `# n1=<n1>,n2=<n2>` header followed by one `i,j` pair per line.
pub fn sampling_set_to_text(omega: &SamplingSet) -> String {
    let mut out = format!("# n1={},n2={}\n", omega.n1(), omega.n2());
    for &(i, j) in omega.indices() {
        writeln!(out, "{i},{j}").unwrap();
    }
    out
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let body = line.strip_prefix('#')?.trim();
    let mut n1 = None;
    let mut n2 = None;
    for part in body.split(',') {
        let (key, value) = part.split_once('=')?;
        let value = value.trim().parse().ok()?;
        match key.trim() {
            "n1" => n1 = Some(value),
            "n2" => n2 = Some(value),
            _ => return None,
        }
    }
    Some((n1?, n2?))
}

/// Parses index pairs; dimensions come from the header when present,
/// otherwise from `dims`.
pub fn sampling_set_from_text(text: &str, dims: Option<(usize, usize)>) -> Result<SamplingSet> {
    let header = text.lines().next().and_then(parse_header);
    let (n1, n2) = match (header, dims) {
        (Some(h), Some(d)) if h != d => {
            return Err(parse_err(
                1,
                format!("header says {}x{}, expected {}x{}", h.0, h.1, d.0, d.1),
            ))
        }
        (Some(h), _) => h,
        (None, Some(d)) => d,
        (None, None) => return Err(parse_err(1, "missing '# n1=..,n2=..' header")),
    };
    let mut indices = Vec::new();
    for (line, content) in content_lines(text) {
        let pair: Vec<&str> = content.split(',').map(str::trim).collect();
        if pair.len() != 2 {
            return Err(parse_err(line, format!("expected 'i,j', found '{content}'")));
        }
        let parse = |tok: &str| {
            tok.parse::<usize>()
                .map_err(|_| parse_err(line, format!("'{tok}' is not a nonnegative integer")))
        };
        let (i, j) = (parse(pair[0])?, parse(pair[1])?);
        if i >= n1 || j >= n2 {
            return Err(parse_err(line, format!("index ({i}, {j}) outside {n1}x{n2}")));
        }
        indices.push((i, j));
    }
    SamplingSet::new(n1, n2, indices)
}

pub fn write_sampling_set(path: &Path, omega: &SamplingSet) -> Result<()> {
    fs::write(path, sampling_set_to_text(omega))?;
    Ok(())
}

pub fn read_sampling_set(path: &Path, dims: Option<(usize, usize)>) -> Result<SamplingSet> {
    sampling_set_from_text(&fs::read_to_string(path)?, dims)
}

pub fn trace_to_csv(errors: &[f64]) -> String {
    let mut out = String::from("k,error_norm\n");
    for (k, e) in errors.iter().enumerate() {
        writeln!(out, "{k},{e:.16e}").unwrap();
    }
    out
}

pub fn write_trace(path: &Path, errors: &[f64]) -> Result<()> {
    fs::write(path, trace_to_csv(errors))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    content_lines(&text)
        .filter(|(_, l)| *l != "k,error_norm")
        .map(|(line, l)| {
            let value = l.split_once(',').map(|(_, v)| v.trim()).unwrap_or("");
            value
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("bad trace row '{l}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip() {
        let id = DMatrix::identity(4, 4);
        assert_eq!(matrix_from_csv(&matrix_to_csv(&id)).unwrap(), id);
        let one = DMatrix::from_element(1, 1, -2.5);
        assert_eq!(matrix_from_csv(&matrix_to_csv(&one)).unwrap(), one);
    }

    #[test]
    fn awkward_values_round_trip() {
        let a = DMatrix::from_row_slice(2, 3, &[0.1, 1.0 / 3.0, -1e-300, 6.02e23, f64::MIN_POSITIVE, -0.0]);
        let back = matrix_from_csv(&matrix_to_csv(&a)).unwrap();
        for (x, y) in a.iter().zip(back.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn ragged_and_bad_tokens_cite_the_line() {
        match matrix_from_csv("1,2\n3,4\n5\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match matrix_from_csv("1,2\nx,4\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matrix_from_csv("").is_err());
    }

    #[test]
    fn sampling_set_round_trip() {
        let omega = SamplingSet::new(3, 2, vec![(0, 0), (1, 1), (2, 0)]).unwrap();
        let text = sampling_set_to_text(&omega);
        assert!(text.starts_with("# n1=3,n2=2\n"));
        assert_eq!(sampling_set_from_text(&text, None).unwrap(), omega);
        assert_eq!(sampling_set_from_text(&text, Some((3, 2))).unwrap(), omega);
        assert!(sampling_set_from_text(&text, Some((4, 2))).is_err());
        assert!(sampling_set_from_text("0,0\n", None).is_err());
        assert_eq!(sampling_set_from_text("0,0\n", Some((2, 2))).unwrap().len(), 1);
        match sampling_set_from_text("# n1=2,n2=2\n0,0\n5,0\n", None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let errors = vec![1.0, 0.5, 0.25 / 3.0];
        write_trace(&path, &errors).unwrap();
        assert_eq!(read_trace(&path).unwrap(), errors);
    }
}
