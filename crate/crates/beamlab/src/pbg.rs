//! PBG1 binary beam-grid format.
//!
//! Layout (all little-endian):
//!   magic      4 bytes  "PBG1"
//!   u32 x 4    d, N_X' (per transversal axis), N_V (per angular axis), N_slices
//!   f64 x 2    transversal half-extent, angular half-extent
//!   f64 x N_slices   slice depths
//!   f64 x N_slices * N_X'^(d-1) * N_V^(d-1)
//!              slice fields, row-major over (X'_1, .., V_1, ..) with the
//!              angular axes fastest
//!
//! Plus CSV slice summaries (slice, depth, mass, first absolute moments).

use crate::beam::{BeamField, BeamGrid, BeamSlice};
use crate::fftnd::CenteredGrid;
use std::io::{self, Read, Write};

const MAGIC: &[u8; 4] = b"PBG1";

pub fn write_field<W: Write>(mut w: W, field: &BeamField) -> io::Result<()> {
    let d = field.d;
    let n = d - 1;
    let dims = field.grid.grid.dims();
    let nx = dims[0];
    let nv = dims[n];
    assert!(dims[..n].iter().all(|m| *m == nx));
    assert!(dims[n..].iter().all(|m| *m == nv));
    w.write_all(MAGIC)?;
    for v in [d as u32, nx as u32, nv as u32, field.slices.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [field.grid.x_half_extent(), field.grid.v_half_extent()] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &field.slices {
        w.write_all(&s.t.to_le_bytes())?;
    }
    for s in &field.slices {
        for v in &s.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> io::Result<BeamField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
    }
    let mut u = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> io::Result<u32> {
        r.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u))
    };
    let d = read_u32(&mut r)? as usize;
    let nx = read_u32(&mut r)? as usize;
    let nv = read_u32(&mut r)? as usize;
    let n_slices = read_u32(&mut r)? as usize;
    let mut f = [0u8; 8];
    let mut read_f64 = |r: &mut R| -> io::Result<f64> {
        r.read_exact(&mut f)?;
        Ok(f64::from_le_bytes(f))
    };
    let half_x = read_f64(&mut r)?;
    let half_v = read_f64(&mut r)?;
    let mut depths = Vec::with_capacity(n_slices);
    for _ in 0..n_slices {
        depths.push(read_f64(&mut r)?);
    }
    let n = d - 1;
    let mut dims = vec![nx; n];
    dims.extend(vec![nv; n]);
    let mut step = vec![2.0 * half_x / nx as f64; n];
    step.extend(vec![2.0 * half_v / nv as f64; n]);
    let grid = BeamGrid::new(d, CenteredGrid::new(dims, step));
    let cells = grid.grid.len();
    let mut slices = Vec::with_capacity(n_slices);
    for &t in &depths {
        let mut values = Vec::with_capacity(cells);
        for _ in 0..cells {
            values.push(read_f64(&mut r)?);
        }
        slices.push(BeamSlice {
            t,
            values,
            lambda_factor: f64::NAN, // not carried by the format
        });
    }
    Ok(BeamField { d, grid, slices })
}

/// CSV slice summaries: slice, depth, mass, mean |X'|, mean |V|.
pub fn write_summary_csv<W: Write>(mut w: W, field: &BeamField) -> io::Result<()> {
    writeln!(w, "slice,depth,mass,mean_abs_xp,mean_abs_v")?;
    let n = field.d - 1;
    let vol = field.grid.grid.cell_volume();
    for (k, slice) in field.slices.iter().enumerate() {
        let mut mass = 0.0;
        let mut mx = 0.0;
        let mut mv = 0.0;
        let mut coords = vec![0.0; 2 * n];
        for (flat, u) in slice.values.iter().enumerate() {
            field.grid.grid.coords_of(flat, &mut coords);
            let rx: f64 = coords[..n].iter().map(|c| c * c).sum::<f64>().sqrt();
            let rv: f64 = coords[n..].iter().map(|c| c * c).sum::<f64>().sqrt();
            mass += u * vol;
            mx += rx * u * vol;
            mv += rv * u * vol;
        }
        writeln!(
            w,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            k,
            slice.t,
            mass,
            mx / mass.max(1e-300),
            mv / mass.max(1e-300)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::{AxisProfiles, BeamSolver};

    #[test]
    fn round_trip_preserves_grid_and_values() {
        let s = 0.7;
        let solver = BeamSolver::new(3, s, AxisProfiles::constant(1.0, 0.5));
        let grid = BeamGrid::auto(3, s, 1.0, 1.0, 16, 16);
        let field = solver.fundamental_field(&grid, &[1.0, 2.0], 0.0).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &field).unwrap();
        let back = read_field(buf.as_slice()).unwrap();
        assert_eq!(back.d, 3);
        assert_eq!(back.slices.len(), 2);
        assert_eq!(back.grid.grid.dims(), field.grid.grid.dims());
        for a in 0..4 {
            assert!((back.grid.grid.step()[a] - field.grid.grid.step()[a]).abs() < 1e-15);
        }
        for (sa, sb) in field.slices.iter().zip(&back.slices) {
            assert_eq!(sa.t, sb.t);
            for (x, y) in sa.values.iter().zip(&sb.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let mut csv = Vec::new();
        write_summary_csv(&mut csv, &field).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.lines().count() == 3);
        assert!(text.starts_with("slice,depth,mass"));
    }
}
