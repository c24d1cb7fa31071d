//! Wavefront OBJ export, one file per frame.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::types::{MeshSpec, MotionSequence};

/// Text of one frame: absolute positions (template + offset) then a placeholder
/// triangle fan so viewers accept the file.
pub fn frame_to_obj(seq: &MotionSequence, mesh: &MeshSpec, t: usize) -> String {
    let v = mesh.vertex_count();
    let mut s = String::with_capacity(v * 40);
    let _ = writeln!(s, "# {} frame {t}", mesh.name);
    for i in 0..v {
        let o = seq.offset(t, i);
        let p = mesh.template.row(i);
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", p[0] + o[0], p[1] + o[1], p[2] + o[2]);
    }
    for i in 2..v {
        let _ = writeln!(s, "f 1 {} {}", i, i + 1);
    }
    s
}

pub fn export_obj_sequence(seq: &MotionSequence, mesh: &MeshSpec, dir: &Path) -> Result<usize> {
    seq.check_mesh(mesh)?;
    fs::create_dir_all(dir)?;
    for t in 0..seq.n_frames() {
        fs::write(dir.join(format!("frame_{t:05}.obj")), frame_to_obj(seq, mesh, t))?;
    }
    Ok(seq.n_frames())
}
