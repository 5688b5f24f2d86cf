//! Binary matrix snapshots and CSV traces.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::variational::PalmRecord;

/// Little-endian `u32` row and column counts followed by row-major `f64` entries.
pub fn encode_matrix(m: &Array2<f64>) -> Result<Vec<u8>> {
    let (n, c) = m.dim();
    let n32 = u32::try_from(n).map_err(|_| Error::InvalidDimension(format!("{n} rows exceed u32")))?;
    let c32 = u32::try_from(c).map_err(|_| Error::InvalidDimension(format!("{c} columns exceed u32")))?;
    let mut out = Vec::with_capacity(8 + 8 * n * c);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |reason: String| Error::Format {
        format: "matrix snapshot",
        reason,
    };
    if bytes.len() < 8 {
        return Err(bad(format!("header needs 8 bytes, found {}", bytes.len())));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 8 * n * c {
        return Err(bad(format!(
            "{n}×{c} needs {} data bytes, found {}",
            8 * n * c,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((n, c), data).expect("length checked"))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_matrix(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    decode_matrix(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub potential: f64,
    pub mean_entropy: f64,
    pub min_entry: f64,
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut out = String::from("t,J,mean_entropy,min_entry\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?}\n",
            r.t, r.potential, r.mean_entropy, r.min_entry
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_palm_csv(path: &Path, trace: &[PalmRecord]) -> Result<()> {
    let mut out = String::from("k,surrogate_objective,E_alpha,max_row_change,feasibility_violation\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.k, r.surrogate_objective, r.e_alpha, r.max_row_change, r.feasibility_violation
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_round_trip() {
        let m = array![[0.25, -1.5, 3.0], [1e-300, f64::MAX, 0.1]];
        let bytes = encode_matrix(&m).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &0.25f64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 48);
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
        assert!(decode_matrix(&bytes[..20]).is_err());
        assert!(decode_matrix(&bytes[..5]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let row = TrajectoryRow {
            t: 0.5,
            potential: -1.0,
            mean_entropy: 0.25,
            min_entry: 1e-3,
        };
        write_trajectory_csv(&path, &[row]).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "t,J,mean_entropy,min_entry\n0.5,-1.0,0.25,0.001\n"
        );
        let rec = PalmRecord {
            k: 1,
            surrogate_objective: -2.0,
            e_alpha: -3.0,
            max_row_change: 0.5,
            feasibility_violation: 0.0,
            inner_iterations: 4,
            inner_residual: 1e-9,
        };
        write_palm_csv(&path, &[rec]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text
            .starts_with("k,surrogate_objective,E_alpha,max_row_change,feasibility_violation\n1,-2.0,-3.0,0.5,0.0\n"));
    }
}
