//! Plain-text formats for signals and estimated matrices.
//!
//! Signals are CSV with a header `u1,..,y1,..` and one sample per row.
//! Matrices are CSV rows preceded by `# key: value` metadata lines, one of
//! which is `# shape: rows x cols`.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Input/output record, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Signals {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Signals {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} input samples vs {} output samples",
                u.ncols(),
                y.ncols()
            )));
        }
        Ok(Signals { u, y })
    }

    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_signals<W: Write>(mut out: W, signals: &Signals) -> Result<()> {
    let header: Vec<String> = (1..=signals.u.nrows())
        .map(|k| format!("u{k}"))
        .chain((1..=signals.y.nrows()).map(|k| format!("y{k}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for t in 0..signals.len() {
        let row: Vec<String> = signals
            .u
            .column(t)
            .iter()
            .chain(signals.y.column(t).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
    }
    Ok(())
}

fn parse_row(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|field| {
            let field = field.trim();
            field.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a number: '{field}'"),
            })
        })
        .collect()
}

/// Lines that carry content, with their 1-based line numbers.
fn content_lines<R: BufRead>(input: R) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            out.push((k + 1, trimmed.to_string()));
        }
    }
    Ok(out)
}

pub fn read_signals<R: BufRead>(input: R) -> Result<Signals> {
    let lines = content_lines(input)?;
    let mut rows = lines.into_iter().filter(|(_, l)| !l.starts_with('#'));
    let (header_line, header) = rows.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let mut n_i = 0;
    let mut n_o = 0;
    for name in header.split(',').map(str::trim) {
        let (kind, index) = name.split_at(name.len().min(1));
        let expected = match kind {
            "u" if n_o == 0 => {
                n_i += 1;
                n_i
            }
            "y" => {
                n_o += 1;
                n_o
            }
            _ => 0,
        };
        if expected == 0 || index.parse::<usize>().ok() != Some(expected) {
            return Err(Error::Parse {
                line: header_line,
                message: format!("unexpected column '{name}'; expected u1..,y1.."),
            });
        }
    }
    if n_o == 0 {
        return Err(Error::Parse {
            line: header_line,
            message: "no output columns".into(),
        });
    }
    let width = n_i + n_o;
    let mut values = Vec::new();
    for (line_no, line) in rows {
        let row = parse_row(&line, line_no)?;
        if row.len() != width {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {width} fields, found {}", row.len()),
            });
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("non-finite value {bad}"),
            });
        }
        values.push(row);
    }
    let t = values.len();
    let u = DMatrix::from_fn(n_i, t, |r, c| values[c][r]);
    let y = DMatrix::from_fn(n_o, t, |r, c| values[c][n_i + r]);
    Signals::new(u, y)
}

/// Matrix with free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedMatrix {
    pub metadata: Vec<(String, String)>,
    pub matrix: DMatrix<f64>,
}

impl AnnotatedMatrix {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn write_matrix<W: Write>(
    mut out: W,
    matrix: &DMatrix<f64>,
    metadata: &[(String, String)],
) -> Result<()> {
    for (k, v) in metadata {
        writeln!(out, "# {k}: {v}").map_err(io_err)?;
    }
    writeln!(out, "# shape: {} x {}", matrix.nrows(), matrix.ncols()).map_err(io_err)?;
    for r in 0..matrix.nrows() {
        let row: Vec<String> = matrix.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_matrix<R: BufRead>(input: R) -> Result<AnnotatedMatrix> {
    let mut metadata = Vec::new();
    let mut shape = None;
    let mut rows = Vec::new();
    for (line_no, line) in content_lines(input)? {
        if let Some(meta) = line.strip_prefix('#') {
            let Some((k, v)) = meta.split_once(':') else {
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if k == "shape" {
                let dims = v.split_once('x').and_then(|(a, b)| {
                    Some((
                        a.trim().parse::<usize>().ok()?,
                        b.trim().parse::<usize>().ok()?,
                    ))
                });
                shape = Some(dims.ok_or(Error::Parse {
                    line: line_no,
                    message: format!("bad shape '{v}'"),
                })?);
            } else {
                metadata.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        rows.push((line_no, parse_row(&line, line_no)?));
    }
    let (nr, nc) = shape.unwrap_or((rows.len(), rows.first().map_or(0, |(_, r)| r.len())));
    if rows.len() != nr {
        return Err(Error::Parse {
            line: rows.last().map_or(1, |(l, _)| *l),
            message: format!("expected {nr} rows, found {}", rows.len()),
        });
    }
    if let Some((line, row)) = rows.iter().find(|(_, r)| r.len() != nc) {
        return Err(Error::Parse {
            line: *line,
            message: format!("expected {nc} fields, found {}", row.len()),
        });
    }
    let matrix = DMatrix::from_fn(nr, nc, |r, c| rows[r].1[c]);
    Ok(AnnotatedMatrix { metadata, matrix })
}
