//! Raster exports shared by both map types.
//!
//! PGM rasters are 8-bit binary (`P5`), value `round(255 · occupancy)`, so free
//! space is 0 and occupied space 255. The first image row is the top (highest y)
//! grid row. CSV rasters use the same row order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::GridSpec;

pub fn to_gray(value: f64) -> u8 {
    (255.0 * value.clamp(0.0, 1.0)).round() as u8
}

pub fn pgm_bytes(grid: &GridSpec, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    for row in (0..grid.height).rev() {
        for col in 0..grid.width {
            out.push(to_gray(values[grid.index(col, row)]));
        }
    }
    out
}

pub fn write_pgm(path: &Path, grid: &GridSpec, values: &[f64]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&pgm_bytes(grid, values))?;
    f.flush()?;
    Ok(())
}

/// Reads a binary PGM into `(width, height, values in [0, 1])`, indexed like a grid.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        header.clear();
        if r.read_until(b'\n', &mut header)? == 0 {
            return Err(Error::Parse { line: 0, message: "truncated PGM header".into() });
        }
        let line = String::from_utf8_lossy(&header);
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "P5" {
        return Err(Error::Parse { line: 1, message: format!("unsupported PGM magic {}", tokens[0]) });
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Parse { line: 2, message: e.to_string() })
    };
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse { line: 3, message: format!("unsupported maxval {maxval}") });
    }
    let mut data = vec![0u8; w * h];
    r.read_exact(&mut data)?;
    let mut values = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            values[(h - 1 - row) * w + col] = data[row * w + col] as f64 / maxval as f64;
        }
    }
    Ok((w, h, values))
}

pub fn write_csv<W: Write>(out: W, grid: &GridSpec, values: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for row in (0..grid.height).rev() {
        let line: Vec<String> = (0..grid.width)
            .map(|col| values[grid.index(col, row)].to_string())
            .collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose2D;

    #[test]
    fn pgm_round_trip() {
        let grid = GridSpec::new(3, 2, 0.2, Pose2D::identity()).unwrap();
        let values = vec![0.0, 0.5, 1.0, 0.2, 0.8, 0.4];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &grid, &values).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let bytes = pgm_bytes(&grid, &values);
        // top row first: cells (0,1),(1,1),(2,1)
        assert_eq!(&bytes[bytes.len() - 6..bytes.len() - 3], &[51, 204, 102]);
    }

    #[test]
    fn csv_parses_back() {
        let grid = GridSpec::new(2, 2, 1.0, Pose2D::identity()).unwrap();
        let values = vec![0.1, 0.2, 0.3, 1.0 / 3.0];
        let mut buf = Vec::new();
        write_csv(&mut buf, &grid, &values).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows, vec![vec![0.3, 1.0 / 3.0], vec![0.1, 0.2]]);
    }
}
