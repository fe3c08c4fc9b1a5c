//! Fixed-topology triangle meshes.
//!
//! A [`TriangleMesh`] is a vertex array plus a face index array. Every mesh
//! flowing through the pipeline shares the face array of a dataset template,
//! so the faces are stored behind an [`Arc`] and compared cheaply.

use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Minimum vertex count of a mesh accepted by the pipeline.
pub const MIN_VERTICES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("mesh has {0} vertices, at least {MIN_VERTICES} are required")]
    TooFewVertices(usize),
    #[error("mesh has no faces")]
    NoFaces,
    #[error("face {face} references vertex {index}, but the mesh has {vertex_count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("face {face} repeats vertex {index}")]
    RepeatedIndex { face: usize, index: usize },
    #[error("vertex {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("topology mismatch: expected template {expected}, found {found}")]
    TopologyMismatch { expected: String, found: String },
    #[error("vertex count mismatch: expected {expected}, found {found}")]
    VertexCount { expected: usize, found: usize },
}

pub type Face = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 3]>,
    faces: Arc<Vec<Face>>,
}

impl TriangleMesh {
    /// Builds a mesh after checking the face indices and vertex count.
    pub fn new(vertices: Vec<[f64; 3]>, faces: impl Into<Arc<Vec<Face>>>) -> Result<Self, MeshError> {
        let faces = faces.into();
        validate(&vertices, &faces)?;
        Ok(Self { vertices, faces })
    }

    /// Replaces the vertex positions, keeping the topology.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self, MeshError> {
        if vertices.len() != self.vertices.len() {
            return Err(MeshError::VertexCount {
                expected: self.vertices.len(),
                found: vertices.len(),
            });
        }
        if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(MeshError::NonFinite(i));
        }
        Ok(Self {
            vertices,
            faces: Arc::clone(&self.faces),
        })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn shared_faces(&self) -> Arc<Vec<Face>> {
        Arc::clone(&self.faces)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Row-major `3N` copy of the vertex positions.
    pub fn flat_vertices(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        face_edges(&self.faces)
    }

    /// Hex SHA-256 of the face array; identical for every mesh on one template.
    pub fn topology_hash(&self) -> String {
        topology_hash(&self.faces)
    }

    /// Errors unless `other` shares this mesh's face array.
    pub fn check_same_topology(&self, other: &TriangleMesh) -> Result<(), MeshError> {
        if Arc::ptr_eq(&self.faces, &other.faces) || self.faces == other.faces {
            Ok(())
        } else {
            Err(MeshError::TopologyMismatch {
                expected: self.topology_hash(),
                found: other.topology_hash(),
            })
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        c.map(|x| x / n)
    }

    /// Mean length over unique edges.
    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        let total: f64 = edges
            .iter()
            .map(|&(a, b)| distance(&self.vertices[a], &self.vertices[b]))
            .sum();
        total / edges.len() as f64
    }
}

fn validate(vertices: &[[f64; 3]], faces: &[Face]) -> Result<(), MeshError> {
    if vertices.len() < MIN_VERTICES {
        return Err(MeshError::TooFewVertices(vertices.len()));
    }
    if faces.is_empty() {
        return Err(MeshError::NoFaces);
    }
    if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(MeshError::NonFinite(i));
    }
    for (fi, f) in faces.iter().enumerate() {
        for &idx in f {
            if idx >= vertices.len() {
                return Err(MeshError::IndexOutOfRange {
                    face: fi,
                    index: idx,
                    vertex_count: vertices.len(),
                });
            }
        }
        if f[0] == f[1] || f[0] == f[2] {
            return Err(MeshError::RepeatedIndex { face: fi, index: f[0] });
        }
        if f[1] == f[2] {
            return Err(MeshError::RepeatedIndex { face: fi, index: f[1] });
        }
    }
    Ok(())
}

pub(crate) fn face_edges(faces: &[Face]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn topology_hash(faces: &[Face]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((faces.len() as u64).to_le_bytes());
    for f in faces {
        for &i in f {
            hasher.update((i as u64).to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-vertex RMSE: `sqrt(mean_v |a_v - b_v|²)`.
pub fn vertex_rmse(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert_eq!(a.len(), b.len(), "vertex_rmse on meshes of different size");
    (squared_error_sum(a, b) / a.len() as f64).sqrt()
}

/// Sum over vertices of squared Euclidean distances.
pub fn squared_error_sum(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> TriangleMesh {
        TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn tetrahedron_has_six_edges() {
        let m = tetra();
        assert_eq!(m.edges().len(), 6);
        assert_eq!(m.vertex_count(), 4);
    }

    #[test]
    fn rejects_bad_faces() {
        let v = vec![[0.0; 3]; 4];
        assert_eq!(
            TriangleMesh::new(v.clone(), vec![[0, 1, 4]]).unwrap_err(),
            MeshError::IndexOutOfRange { face: 0, index: 4, vertex_count: 4 }
        );
        assert!(matches!(
            TriangleMesh::new(v.clone(), vec![[0, 1, 1]]),
            Err(MeshError::RepeatedIndex { .. })
        ));
        assert_eq!(TriangleMesh::new(v[..3].to_vec(), vec![[0, 1, 2]]).unwrap_err(), MeshError::TooFewVertices(3));
        assert_eq!(TriangleMesh::new(v, vec![]).unwrap_err(), MeshError::NoFaces);
    }

    #[test]
    fn topology_check() {
        let a = tetra();
        let b = a.with_vertices(vec![[1.0; 3]; 4]).unwrap();
        a.check_same_topology(&b).unwrap();
        let c = TriangleMesh::new(a.vertices().to_vec(), vec![[0, 1, 2]]).unwrap();
        assert!(matches!(a.check_same_topology(&c), Err(MeshError::TopologyMismatch { .. })));
        assert_eq!(a.topology_hash(), b.topology_hash());
    }

    #[test]
    fn rmse_of_unit_shift() {
        let a = [[0.0; 3]; 5];
        let b = [[1.0, 0.0, 0.0]; 5];
        assert_eq!(vertex_rmse(&a, &b), 1.0);
    }
}
