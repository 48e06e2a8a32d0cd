//! `LATTETRJ` trajectory cache.
//!
//! ```text
//! magic    8 bytes "LATTETRJ"
//! version  u32     1
//! dim      u32
//! users    u64
//! per user:
//!   u32 length + UTF-8 user id
//!   u64 state count
//!   per state: u64 session, i64 timestamp, f64 residual norm,
//!              u32 peer count, f64 weight entropy, dim x f32 vector
//! ```

use std::io::{Read, Write};

use crate::format::{self, FormatError};

use super::{RelativeState, Trajectory};

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"LATTETRJ";
pub const TRAJECTORY_VERSION: u32 = 1;

pub fn write_trajectories<W: Write>(w: &mut W, dim: usize, trajectories: &[Trajectory]) -> Result<(), FormatError> {
    w.write_all(TRAJECTORY_MAGIC)?;
    format::write_u32(w, TRAJECTORY_VERSION)?;
    format::write_u32(w, dim as u32)?;
    format::write_u64(w, trajectories.len() as u64)?;
    for t in trajectories {
        format::write_str(w, &t.user_id)?;
        format::write_u64(w, t.states.len() as u64)?;
        for s in &t.states {
            if s.vector.len() != dim {
                return Err(FormatError::Malformed(format!("state of dim {} in a dim-{dim} cache", s.vector.len())));
            }
            format::write_u64(w, s.session as u64)?;
            format::write_i64(w, s.timestamp)?;
            format::write_f64(w, s.residual_norm)?;
            format::write_u32(w, s.peer_count as u32)?;
            format::write_f64(w, s.weight_entropy)?;
            for &x in &s.vector {
                format::write_f32(w, x as f32)?;
            }
        }
    }
    Ok(())
}

/// Returns `(dim, trajectories)`.
pub fn read_trajectories<R: Read>(r: &mut R) -> Result<(usize, Vec<Trajectory>), FormatError> {
    format::expect_magic(r, TRAJECTORY_MAGIC)?;
    let version = format::read_u32(r, "version")?;
    if version != TRAJECTORY_VERSION {
        return Err(FormatError::Version(version));
    }
    let dim = format::read_u32(r, "dim")? as usize;
    let users = format::read_u64(r, "user count")?;
    let mut out = Vec::new();
    for _ in 0..users {
        let user_id = format::read_str(r, "user id")?;
        let count = format::read_u64(r, "state count")?;
        let mut states = Vec::new();
        for _ in 0..count {
            let session = format::read_u64(r, "session")? as usize;
            let timestamp = format::read_i64(r, "timestamp")?;
            let residual_norm = format::read_f64(r, "residual norm")?;
            let peer_count = format::read_u32(r, "peer count")? as usize;
            let weight_entropy = format::read_f64(r, "weight entropy")?;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(f64::from(format::read_f32(r, "state vector")?));
            }
            states.push(RelativeState { vector, residual_norm, peer_count, weight_entropy, session, timestamp });
        }
        out.push(Trajectory { user_id, states });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(FormatError::Malformed("trailing bytes after trajectories".into()));
    }
    Ok((dim, out))
}
