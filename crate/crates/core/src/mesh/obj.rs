//! Wavefront OBJ/MTL export.

use super::Mesh;
use nalgebra::Point3;
use std::collections::BTreeMap;
use std::fmt::Write;

/// Nine significant digits.
fn num(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes `v`/`vt`/`f` records with 1-based indices. Texture coordinates are
/// emitted for every face whose corners all carry fresh coordinates; atlas
/// rows run downward, so `v` is flipped to OBJ's upward convention.
pub fn write_obj(mesh: &Mesh, mtl_file: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(m) = mtl_file {
        let _ = writeln!(out, "mtllib {m}\nusemtl atlas");
    }
    let mut index = BTreeMap::new();
    for (i, v) in mesh.vertex_ids().enumerate() {
        let p = mesh.position(v).expect("live");
        let _ = writeln!(out, "v {} {} {}", num(p.x), num(p.y), num(p.z));
        index.insert(v, i + 1);
    }
    let mut vt = 0usize;
    let mut face_lines = Vec::new();
    for f in mesh.face_ids() {
        let corners = mesh.face_vertices(f);
        let mut line = String::from("f");
        match mesh.face_uvs(f) {
            Some(uvs) => {
                for (v, uv) in corners.iter().zip(uvs) {
                    let _ = writeln!(out, "vt {} {}", num(uv[0]), num(1.0 - uv[1]));
                    vt += 1;
                    let _ = write!(line, " {}/{}", index[v], vt);
                }
            }
            None => {
                for v in &corners {
                    let _ = write!(line, " {}", index[v]);
                }
            }
        }
        face_lines.push(line);
    }
    for l in face_lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn write_mtl(atlas_file: &str) -> String {
    format!("newmtl atlas\nKa 1 1 1\nKd 1 1 1\nmap_Kd {atlas_file}\n")
}

/// Reads back the `v` records of an OBJ document.
pub fn parse_obj_vertices(text: &str) -> Vec<Point3<f64>> {
    text.lines()
        .filter_map(|l| l.strip_prefix("v "))
        .filter_map(|rest| {
            let c: Vec<f64> = rest.split_whitespace().filter_map(|x| x.parse().ok()).collect();
            (c.len() >= 3).then(|| Point3::new(c[0], c[1], c[2]))
        })
        .collect()
}
