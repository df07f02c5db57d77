//! On-disk formats. Sequences are CSV (header row of channel names, one
//! frame per row, '.'-decimal); audio feature matrices are either a small
//! binary format (8-byte magic, u64 row/col header, little-endian f64,
//! row-major) or a plain CSV fallback. All writers and readers round-trip
//! `f64` losslessly: values are printed with the shortest representation
//! that parses back to the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::blendshape::{ChannelLayout, ExpressionFrame, ExpressionSequence};
use crate::error::{EngineError, Result};

pub const FEATURE_MATRIX_MAGIC: &[u8; 8] = b"BDAFMX01";

fn io_err(path: &Path, e: std::io::Error) -> EngineError {
    EngineError::io(path.display().to_string(), e)
}

// ------------------------------------------------------------- matrices

pub fn write_matrix_binary(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    w.write_all(FEATURE_MATRIX_MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u64::<LittleEndian>(m.nrows() as u64).map_err(|e| io_err(path, e))?;
    w.write_u64::<LittleEndian>(m.ncols() as u64).map_err(|e| io_err(path, e))?;
    for v in m.iter() {
        w.write_f64::<LittleEndian>(*v).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_matrix_binary(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != FEATURE_MATRIX_MAGIC {
        return Err(EngineError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("bad magic {magic:?}; not a feature matrix file"),
        });
    }
    let rows = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let cols = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>().map_err(|e| io_err(path, e))?);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| EngineError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for row in m.rows() {
        let line = row
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| EngineError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("bad number {s:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(EngineError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected {c} columns, got {}", values.len()),
                })
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data).map_err(|e| EngineError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// Dispatch on extension: `.fmat` binary, anything else CSV.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    if path.extension().is_some_and(|e| e == "fmat") {
        write_matrix_binary(path, m)
    } else {
        write_matrix_csv(path, m)
    }
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    if path.extension().is_some_and(|e| e == "fmat") {
        read_matrix_binary(path)
    } else {
        read_matrix_csv(path)
    }
}

// ------------------------------------------------------------ sequences

/// Write a sequence as CSV with the layout's channel names as header.
pub fn save_sequence(path: &Path, seq: &ExpressionSequence, layout: &ChannelLayout) -> Result<()> {
    if seq.dim() != 0 && seq.dim() != layout.total_dim() {
        return Err(EngineError::dimension("save_sequence", layout.total_dim(), seq.dim()));
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(w, "{}", layout.channel_names().join(",")).map_err(|e| io_err(path, e))?;
    for frame in seq.frames() {
        let line = frame
            .values()
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a sequence CSV, validating the header against the layout and every
/// value for finiteness. Blendshape values outside `[0,1]` are reported as
/// a warning count and clamped only when `clamp` is set.
pub fn load_sequence(
    path: &Path,
    layout: &ChannelLayout,
    fps: f64,
    clamp: bool,
) -> Result<ExpressionSequence> {
    let r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| io_err(path, e))?,
        None => {
            return Err(EngineError::Parse {
                path: path.display().to_string(),
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let names: Vec<&str> = header.split(',').collect();
    let expected: Vec<&str> = layout.channel_names().iter().map(String::as_str).collect();
    if names != expected {
        return Err(EngineError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!(
                "header does not match layout ({} columns vs {} channels)",
                names.len(),
                expected.len()
            ),
        });
    }

    let mut frames = Vec::new();
    let mut range_violations = 0usize;
    for (i, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != layout.total_dim() {
            return Err(EngineError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!(
                    "expected {} values, got {}",
                    layout.total_dim(),
                    fields.len()
                ),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for (col, s) in fields.iter().enumerate() {
            let v: f64 = s.trim().parse().map_err(|e| EngineError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("channel {} ({}): bad number {s:?}: {e}", col, layout.channel_name(col)),
            })?;
            if !v.is_finite() {
                return Err(EngineError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("channel {} ({}) is not finite: {v}", col, layout.channel_name(col)),
                });
            }
            if col < layout.expression_dim() && !(0.0..=1.0).contains(&v) {
                range_violations += 1;
            }
            values.push(v);
        }
        frames.push(ExpressionFrame::new(values));
    }
    if range_violations > 0 {
        tracing::warn!(
            path = %path.display(),
            count = range_violations,
            "blendshape values outside [0,1]{}",
            if clamp { "; clamping" } else { "" }
        );
    }
    let seq = ExpressionSequence::new(frames, fps)?;
    if clamp {
        seq.clamped(layout)
    } else {
        Ok(seq)
    }
}
