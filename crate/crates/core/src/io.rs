//! CSV writers. Every float is printed with 17 significant digits so output
//! round-trips bit for bit.

use std::io::{self, Write};

use crate::continuous::{DiffusivePath, JumpPath, PathRecord};
use crate::discrete::DiscreteTrajectory;
use crate::optimal::ValueGrid;
use crate::qcore::BlochVector;

pub const TRAJECTORY_HEADER: &str = "sample,step,t,x,y,z,u,outcome";

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn bloch_cols(v: &BlochVector) -> String {
    format!("{},{},{}", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z))
}

/// Discrete chains; `outcome` is the measured index, empty at step 0.
pub fn write_discrete<W: Write>(w: &mut W, trajs: &[DiscreteTrajectory]) -> io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for tr in trajs {
        for r in &tr.records {
            let outcome = r.outcome.map(|o| o.index.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{},{}", tr.sample, r.step, fmt_f64(r.t), bloch_cols(&r.state.to_bloch()), fmt_f64(r.u), outcome)?;
        }
    }
    Ok(())
}

fn write_records<W: Write>(w: &mut W, sample: u64, records: &[PathRecord], signal_as_int: bool) -> io::Result<()> {
    for r in records {
        let signal = if signal_as_int { format!("{}", r.signal as u64) } else { fmt_f64(r.signal) };
        writeln!(w, "{},{},{},{},{},{}", sample, r.step, fmt_f64(r.t), bloch_cols(&r.state.to_bloch()), fmt_f64(r.u), signal)?;
    }
    Ok(())
}

/// Diffusive paths; `outcome` is the driving Brownian motion `W_t`.
pub fn write_diffusive<W: Write>(w: &mut W, paths: &[DiffusivePath]) -> io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for p in paths {
        write_records(w, p.sample, &p.records, false)?;
    }
    Ok(())
}

/// Jump paths; `outcome` is the cumulative jump count.
pub fn write_jump<W: Write>(w: &mut W, paths: &[JumpPath]) -> io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for p in paths {
        write_records(w, p.sample, &p.records, true)?;
    }
    Ok(())
}

pub fn write_jump_times<W: Write>(w: &mut W, paths: &[JumpPath]) -> io::Result<()> {
    writeln!(w, "sample,jump_time")?;
    for p in paths {
        for t in &p.jump_times {
            writeln!(w, "{},{}", p.sample, fmt_f64(*t))?;
        }
    }
    Ok(())
}

/// Event times of discrete chains: times `t_{k+1}` of steps with outcome 1.
pub fn write_click_times<W: Write>(w: &mut W, trajs: &[DiscreteTrajectory]) -> io::Result<()> {
    writeln!(w, "sample,jump_time")?;
    for tr in trajs {
        for r in &tr.records {
            if r.outcome.is_some_and(|o| o.index == 1) {
                writeln!(w, "{},{}", tr.sample, fmt_f64(r.t))?;
            }
        }
    }
    Ok(())
}

/// `k,x,y,z,V,u` over interior grid points; `u` is empty at the last stage.
pub fn write_value_grid<W: Write>(w: &mut W, grid: &ValueGrid) -> io::Result<()> {
    writeln!(w, "k,x,y,z,V,u")?;
    for (k, v, value, u) in grid.rows() {
        writeln!(w, "{},{},{},{}", k, bloch_cols(&v), fmt_f64(value), u.map(fmt_f64).unwrap_or_default())?;
    }
    Ok(())
}

pub fn write_samples<W: Write>(w: &mut W, samples: &[BlochVector]) -> io::Result<()> {
    writeln!(w, "sample,x,y,z")?;
    for (i, v) in samples.iter().enumerate() {
        writeln!(w, "{},{}", i, bloch_cols(v))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }
}
