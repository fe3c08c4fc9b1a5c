//! Graph operators derived from mesh connectivity.

use crate::mesh::TriangleMesh;
use crate::sparse::SparseMatrix;

/// Binary symmetric adjacency over `n` vertices from undirected edges.
pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let triplets = edges
        .iter()
        .filter(|(a, b)| a != b)
        .flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)])
        .collect::<Vec<_>>();
    let mut m = SparseMatrix::from_triplets(n, n, triplets).expect("edge indices in range");
    // repeated edges must not raise the weight above 1
    if m.entries().iter().any(|e| e.2 != 1.0) {
        let binary = m.entries().iter().map(|&(r, c, _)| (r, c, 1.0)).collect();
        m = SparseMatrix::from_triplets(n, n, binary).unwrap();
    }
    m
}

/// Rescaled normalized Laplacian `L̃ = 2L/λ_max − I` with `λ_max = 2`,
/// i.e. `L̃ = −D^{-1/2} A D^{-1/2}`. Degree-0 vertices get an all-zero row.
pub fn scaled_laplacian_from_adjacency(adj: &SparseMatrix) -> SparseMatrix {
    let n = adj.rows();
    let degree: Vec<f64> = (0..n).map(|i| adj.row(i).iter().map(|e| e.2).sum()).collect();
    let entries = adj
        .entries()
        .iter()
        .map(|&(r, c, a)| {
            // the product is commutative, so (r, c) and (c, r) get identical bits
            let v = -a / (degree[r] * degree[c]).sqrt();
            (r, c, v)
        })
        .collect();
    SparseMatrix::from_triplets(n, n, entries).unwrap()
}

pub fn normalized_scaled_laplacian(mesh: &TriangleMesh) -> SparseMatrix {
    scaled_laplacian_from_adjacency(&adjacency(mesh.vertex_count(), &mesh.edges()))
}
