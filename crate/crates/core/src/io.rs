//! Ensemble serialization.
//!
//! CSV: one row per `(path, step)`, columns `path_id, step, t, x_1..x_d`
//! and, for coupled ensembles, `y_1..y_d`. Floats use the shortest
//! round-trip representation.
//!
//! Binary: magic `PCPL1`, then `d: u32`, `n_steps: u32`, `N: u64`,
//! `seed: u64`, then one block of `N·(n_steps+1)·d` little-endian `f64`
//! per marginal (one for a path ensemble, two for a coupled ensemble).

use std::io::{Read, Write};

use crate::coupling::{CoupledEnsemble, Provenance};
use crate::error::{Error, Result};
use crate::sde::{PathEnsemble, TimeGrid};

pub const MAGIC: &[u8; 5] = b"PCPL1";

struct Header {
    d: usize,
    n_steps: usize,
    n: usize,
    seed: u64,
}

fn write_header<W: Write>(w: &mut W, h: &Header) -> Result<()> {
    let too_big = |what: &str| Error::Format(format!("{what} does not fit the binary header"));
    w.write_all(MAGIC)?;
    w.write_all(&u32::try_from(h.d).map_err(|_| too_big("d"))?.to_le_bytes())?;
    w.write_all(&u32::try_from(h.n_steps).map_err(|_| too_big("n_steps"))?.to_le_bytes())?;
    w.write_all(&(h.n as u64).to_le_bytes())?;
    w.write_all(&h.seed.to_le_bytes())?;
    Ok(())
}

fn write_block<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not a PCPL1 file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let n_steps = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    Ok(Header { d, n_steps, n, seed })
}

fn read_blocks<R: Read>(r: &mut R, h: &Header, blocks: usize) -> Result<Vec<Vec<f64>>> {
    let len = h
        .n
        .checked_mul(h.n_steps + 1)
        .and_then(|v| v.checked_mul(h.d))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() != blocks * len * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {} for {blocks} block(s)",
            rest.len(),
            blocks * len * 8
        )));
    }
    Ok(rest
        .chunks_exact(len * 8)
        .map(|blk| {
            blk.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        })
        .collect())
}

pub fn write_ensemble_bin<W: Write>(e: &PathEnsemble, mut w: W) -> Result<()> {
    write_header(
        &mut w,
        &Header {
            d: e.dim(),
            n_steps: e.grid().n_steps(),
            n: e.n_paths(),
            seed: e.seed(),
        },
    )?;
    write_block(&mut w, e.values())
}

pub fn read_ensemble_bin<R: Read>(mut r: R) -> Result<PathEnsemble> {
    let h = read_header(&mut r)?;
    let mut blocks = read_blocks(&mut r, &h, 1)?;
    PathEnsemble::from_values(TimeGrid::new(h.n_steps)?, h.d, h.n, h.seed, blocks.remove(0))
}

pub fn write_coupled_bin<W: Write>(e: &CoupledEnsemble, mut w: W) -> Result<()> {
    write_header(
        &mut w,
        &Header {
            d: e.dim(),
            n_steps: e.grid().n_steps(),
            n: e.n_pairs(),
            seed: e.seed(),
        },
    )?;
    write_block(&mut w, e.x_values())?;
    write_block(&mut w, e.y_values())
}

/// Reads a coupled ensemble; provenance is not stored in the file.
pub fn read_coupled_bin<R: Read>(mut r: R) -> Result<CoupledEnsemble> {
    let h = read_header(&mut r)?;
    let mut blocks = read_blocks(&mut r, &h, 2)?;
    let y = blocks.pop().expect("two blocks");
    let x = blocks.pop().expect("two blocks");
    CoupledEnsemble::from_values(
        TimeGrid::new(h.n_steps)?,
        h.d,
        h.n,
        h.seed,
        x,
        y,
        Provenance::new("file", serde_json::Value::Null),
    )
}

fn header_row(d: usize, coupled: bool) -> Vec<String> {
    let mut h = vec!["path_id".to_string(), "step".into(), "t".into()];
    h.extend((1..=d).map(|i| format!("x_{i}")));
    if coupled {
        h.extend((1..=d).map(|i| format!("y_{i}")));
    }
    h
}

fn write_rows<W: Write>(
    w: W,
    grid: TimeGrid,
    d: usize,
    n: usize,
    blocks: &[&[f64]],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header_row(d, blocks.len() == 2))?;
    let stride = grid.n_points() * d;
    let mut row: Vec<String> = Vec::with_capacity(3 + 2 * d);
    for i in 0..n {
        for k in 0..grid.n_points() {
            row.clear();
            row.push(i.to_string());
            row.push(k.to_string());
            row.push(grid.time(k).to_string());
            for b in blocks {
                let base = i * stride + k * d;
                row.extend(b[base..base + d].iter().map(f64::to_string));
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_ensemble_csv<W: Write>(e: &PathEnsemble, w: W) -> Result<()> {
    write_rows(w, e.grid(), e.dim(), e.n_paths(), &[e.values()])
}

pub fn write_coupled_csv<W: Write>(e: &CoupledEnsemble, w: W) -> Result<()> {
    write_rows(w, e.grid(), e.dim(), e.n_pairs(), &[e.x_values(), e.y_values()])
}

/// Parses rows written by the CSV writers; returns grid, d and one buffer
/// per marginal.
fn read_rows<R: Read>(r: R, coupled: bool) -> Result<(TimeGrid, usize, usize, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let cols = headers.len();
    let blocks = if coupled { 2 } else { 1 };
    if cols < 3 + blocks || (cols - 3) % blocks != 0 {
        return Err(Error::Format(format!("unexpected CSV header with {cols} columns")));
    }
    let d = (cols - 3) / blocks;
    let want = header_row(d, coupled);
    if headers.iter().ne(want.iter().map(String::as_str)) {
        return Err(Error::Format(format!("CSV header must be {}", want.join(","))));
    }
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); blocks];
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().map_err(|e| {
                Error::Format(format!("row {}: column {} ('{}'): {e}", line + 2, headers[j].to_string(), &rec[j]))
            })
        };
        let idx = |j: usize| -> Result<usize> {
            rec[j].parse::<usize>().map_err(|e| Error::Format(format!("row {}: {e}", line + 2)))
        };
        rows.push((idx(0)?, idx(1)?));
        for (b, block) in data.iter_mut().enumerate() {
            for j in 0..d {
                block.push(parse(3 + b * d + j)?);
            }
        }
    }
    let n_points = rows.iter().map(|r| r.1).max().map(|m| m + 1).unwrap_or(0);
    if n_points < 2 || rows.len() % n_points != 0 {
        return Err(Error::Format("CSV rows do not form complete paths".into()));
    }
    let n = rows.len() / n_points;
    if rows.iter().enumerate().any(|(r, &(i, k))| i != r / n_points || k != r % n_points) {
        return Err(Error::Format("CSV rows must be ordered by path_id then step".into()));
    }
    Ok((TimeGrid::new(n_points - 1)?, d, n, data))
}

pub fn read_ensemble_csv<R: Read>(r: R, seed: u64) -> Result<PathEnsemble> {
    let (grid, d, n, mut data) = read_rows(r, false)?;
    PathEnsemble::from_values(grid, d, n, seed, data.remove(0))
}

pub fn read_coupled_csv<R: Read>(r: R, seed: u64) -> Result<CoupledEnsemble> {
    let (grid, d, n, mut data) = read_rows(r, true)?;
    let y = data.pop().expect("two blocks");
    let x = data.pop().expect("two blocks");
    CoupledEnsemble::from_values(grid, d, n, seed, x, y, Provenance::new("file", serde_json::Value::Null))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{self, StateAngleRotation};
    use crate::sde;

    fn sample() -> PathEnsemble {
        sde::sample_brownian(TimeGrid::new(8).unwrap(), 2, 3, 42).unwrap()
    }

    #[test]
    fn binary_round_trip_and_layout() {
        let e = sample();
        let mut buf = Vec::new();
        write_ensemble_bin(&e, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"PCPL1");
        assert_eq!(buf.len(), 5 + 4 + 4 + 8 + 8 + 3 * 9 * 2 * 8);
        assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 42);
        assert_eq!(read_ensemble_bin(&buf[..]).unwrap(), e);
        assert!(read_coupled_bin(&buf[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_ensemble_bin(&bad[..]), Err(Error::Format(_))));
        assert!(read_ensemble_bin(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn coupled_round_trips() {
        let c = coupling::rotation_monge(&StateAngleRotation { dim: 2, rate: 1.0 }, &sample()).unwrap();
        let mut bin = Vec::new();
        write_coupled_bin(&c, &mut bin).unwrap();
        let back = read_coupled_bin(&bin[..]).unwrap();
        assert_eq!((back.x_values(), back.y_values()), (c.x_values(), c.y_values()));
        let mut text = Vec::new();
        write_coupled_csv(&c, &mut text).unwrap();
        let s = String::from_utf8(text.clone()).unwrap();
        assert_eq!(s.lines().next().unwrap(), "path_id,step,t,x_1,x_2,y_1,y_2");
        assert_eq!(s.lines().count(), 1 + 3 * 9);
        let back = read_coupled_csv(&text[..], 42).unwrap();
        assert_eq!((back.x_values(), back.y_values()), (c.x_values(), c.y_values()));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let e = sample();
        let mut text = Vec::new();
        write_ensemble_csv(&e, &mut text).unwrap();
        let s = String::from_utf8(text.clone()).unwrap();
        assert_eq!(s.lines().next().unwrap(), "path_id,step,t,x_1,x_2");
        assert!(s.lines().nth(2).unwrap().starts_with("0,1,0.125,"));
        assert_eq!(read_ensemble_csv(&text[..], 42).unwrap(), e);
        assert!(read_ensemble_csv("path_id,step,t\n".as_bytes(), 0).is_err());
        assert!(read_ensemble_csv("path_id,step,t,x_1\n0,0,0,0\n0,1,1,abc\n".as_bytes(), 0).is_err());
        assert!(read_ensemble_csv("path_id,step,t,x_1\n0,1,0,0\n0,0,1,1\n".as_bytes(), 0).is_err());
    }
}
