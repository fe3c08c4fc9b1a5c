//! Minimal Wavefront OBJ reader/writer for triangulated meshes.
//!
//! Only `v x y z` and `f a b c` records are interpreted. Face entries may
//! carry `/`-suffixed texture or normal indices, which are dropped. Other
//! record types (`vn`, `vt`, `o`, `g`, `s`, `usemtl`, ...) are skipped.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::mesh::{MeshError, TriangleMesh, MIN_VERTICES};

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("cannot read {path}: {source}")]
    Missing {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: face has {count} vertices, only triangles are supported")]
    NonTriangleFace { line: usize, count: usize },
    #[error("line {line}: face index {index} out of range (file has {vertex_count} vertices)")]
    IndexOutOfRange {
        line: usize,
        index: i64,
        vertex_count: usize,
    },
    #[error("file has {0} vertices, at least {MIN_VERTICES} are required")]
    TooFewVertices(usize),
    #[error("line {line}: cannot parse `{text}`")]
    Parse { line: usize, text: String },
    #[error("invalid mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh, ObjError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ObjError::Missing {
        path: path.to_path_buf(),
        source,
    })?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh, ObjError> {
    let mut vertices = Vec::new();
    // (line number, raw 1-based indices) resolved once all vertices are known
    let mut raw_faces: Vec<(usize, [i64; 3])> = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err(line_no, line))?;
                if coords.len() != 3 {
                    return Err(parse_err(line_no, line));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = tokens
                    .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err(line_no, line))?;
                if idx.len() != 3 {
                    return Err(ObjError::NonTriangleFace {
                        line: line_no,
                        count: idx.len(),
                    });
                }
                raw_faces.push((line_no, [idx[0], idx[1], idx[2]]));
            }
            _ => {}
        }
    }

    let n = vertices.len();
    let mut faces = Vec::with_capacity(raw_faces.len());
    for (line, f) in raw_faces {
        let mut out = [0usize; 3];
        for (slot, &raw) in out.iter_mut().zip(&f) {
            // negative indices are relative to the end of the vertex list
            let resolved = if raw < 0 { n as i64 + raw } else { raw - 1 };
            if raw == 0 || resolved < 0 || resolved >= n as i64 {
                return Err(ObjError::IndexOutOfRange {
                    line,
                    index: raw,
                    vertex_count: n,
                });
            }
            *slot = resolved as usize;
        }
        faces.push(out);
    }
    if n < MIN_VERTICES {
        return Err(ObjError::TooFewVertices(n));
    }
    Ok(TriangleMesh::new(vertices, faces)?)
}

fn parse_err(line: usize, text: &str) -> ObjError {
    ObjError::Parse {
        line,
        text: text.to_string(),
    }
}

/// Serializes a mesh. Coordinates use shortest round-trip formatting, so
/// `parse_obj(to_obj_string(m))` reproduces the vertices bit-exactly.
pub fn to_obj_string(mesh: &TriangleMesh) -> String {
    let mut out = String::with_capacity(mesh.vertex_count() * 48 + mesh.face_count() * 16);
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn write_obj(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<(), ObjError> {
    let path = path.as_ref();
    fs::write(path, to_obj_string(mesh)).map_err(|source| ObjError::Write {
        path: path.to_path_buf(),
        source,
    })
}
