//! Multi-resolution sampling hierarchy for the mesh encoder and decoder.
//!
//! Each coarser level is produced by quadric-error edge collapse on the
//! finer one. Collapsed edges contract to their midpoint, and the cheapest
//! edge is taken first with ties broken by the `(min, max)` endpoint pair.
//! The coarse vertex set is the set of surviving fine vertices at their
//! original positions:
//!
//! * `down[ℓ]` (`N_{ℓ+1} × N_ℓ`) picks the surviving vertices;
//! * `up[ℓ]` (`N_ℓ × N_{ℓ+1}`) writes each fine vertex as barycentric
//!   weights of its closest point on the nearest coarse face.
//!
//! This sampling scheme is a stand-in chosen for reproducibility; any
//! hierarchy with the same operator contracts can be swapped in.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{adjacency, scaled_laplacian_from_adjacency};
use crate::mesh::{face_edges, hex, Face, TriangleMesh};
use crate::sparse::{SparseError, SparseMatrix};

/// Coarse levels must keep at least this many vertices.
pub const MIN_LEVEL_VERTICES: usize = 8;

/// Version tag for the collapse order; bump when the tie rule changes.
pub const TIE_BREAK_TAG: &str = "qem-midpoint/min-error-then-endpoint-pair/v1";

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("at least one decimation ratio is required")]
    NoRatios,
    #[error("ratio {0} is outside (0, 1)")]
    BadRatio(f64),
    #[error("level {level} would have {count} vertices, below the minimum of {MIN_LEVEL_VERTICES}")]
    TooSmall { level: usize, count: usize },
    #[error("no collapsible edge left at {alive} vertices (target {target}); mesh is too degenerate to decimate")]
    Stuck { alive: usize, target: usize },
    #[error("hierarchy io: {0}")]
    Io(#[from] std::io::Error),
    #[error("hierarchy matrix: {0}")]
    Sparse(#[from] SparseError),
    #[error("hierarchy metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub vertex_count: usize,
    pub adjacency: SparseMatrix,
    pub laplacian: SparseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshHierarchy {
    ratios: Vec<f64>,
    levels: Vec<Level>,
    down: Vec<SparseMatrix>,
    up: Vec<SparseMatrix>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HierarchyMeta {
    tie_break: String,
    ratios: Vec<f64>,
    level_sizes: Vec<usize>,
}

impl MeshHierarchy {
    pub fn build(mesh: &TriangleMesh, ratios: &[f64]) -> Result<Self, HierarchyError> {
        if ratios.is_empty() {
            return Err(HierarchyError::NoRatios);
        }
        if let Some(&r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(HierarchyError::BadRatio(r));
        }
        let mut positions = mesh.vertices().to_vec();
        let mut faces = mesh.faces().to_vec();
        let mut levels = vec![make_level(positions.len(), &faces)];
        let mut down = Vec::new();
        let mut up = Vec::new();

        for (i, &ratio) in ratios.iter().enumerate() {
            let n = positions.len();
            let target = (n as f64 * ratio).ceil() as usize;
            if target < MIN_LEVEL_VERTICES {
                return Err(HierarchyError::TooSmall { level: i + 1, count: target });
            }
            let collapsed = decimate(&positions, &faces, target)?;
            let coarse_pos: Vec<[f64; 3]> = collapsed.survivors.iter().map(|&v| positions[v]).collect();
            let d = SparseMatrix::from_triplets(
                collapsed.survivors.len(),
                n,
                collapsed.survivors.iter().enumerate().map(|(i, &v)| (i, v, 1.0)).collect(),
            )?;
            let u = barycentric_upsample(&positions, &coarse_pos, &collapsed.faces)?;
            levels.push(make_level(coarse_pos.len(), &collapsed.faces));
            down.push(d);
            up.push(u);
            positions = coarse_pos;
            faces = collapsed.faces;
        }
        Ok(Self {
            ratios: ratios.to_vec(),
            levels,
            down,
            up,
        })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.vertex_count).collect()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn laplacian(&self, level: usize) -> &SparseMatrix {
        &self.levels[level].laplacian
    }

    /// Maps level `level` to `level + 1`.
    pub fn downsample(&self, level: usize) -> &SparseMatrix {
        &self.down[level]
    }

    /// Maps level `level + 1` to `level`.
    pub fn upsample(&self, level: usize) -> &SparseMatrix {
        &self.up[level]
    }

    fn matrix_files(&self) -> Vec<(String, &SparseMatrix)> {
        let mut files = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            files.push((format!("adjacency_{i}.bin"), &l.adjacency));
            files.push((format!("laplacian_{i}.bin"), &l.laplacian));
        }
        for (i, (d, u)) in self.down.iter().zip(&self.up).enumerate() {
            files.push((format!("down_{i}.bin"), d));
            files.push((format!("up_{i}.bin"), u));
        }
        files
    }

    fn meta(&self) -> HierarchyMeta {
        HierarchyMeta {
            tie_break: TIE_BREAK_TAG.to_string(),
            ratios: self.ratios.clone(),
            level_sizes: self.level_sizes(),
        }
    }

    /// Hex SHA-256 over the metadata and every operator's binary form.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta()).unwrap());
        for (name, m) in self.matrix_files() {
            h.update(name.as_bytes());
            h.update(m.to_bytes());
        }
        hex(&h.finalize())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), HierarchyError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_string_pretty(&self.meta()).map_err(|e| HierarchyError::Meta(e.to_string()))?;
        fs::write(dir.join("meta.json"), meta + "\n")?;
        for (name, m) in self.matrix_files() {
            m.save(dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, HierarchyError> {
        let dir = dir.as_ref();
        let meta: HierarchyMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)
            .map_err(|e| HierarchyError::Meta(e.to_string()))?;
        if meta.tie_break != TIE_BREAK_TAG {
            return Err(HierarchyError::Meta(format!("unsupported tie-break tag {}", meta.tie_break)));
        }
        if meta.level_sizes.len() != meta.ratios.len() + 1 {
            return Err(HierarchyError::Meta("level count does not match ratios".into()));
        }
        let mut levels = Vec::new();
        for (i, &n) in meta.level_sizes.iter().enumerate() {
            let adjacency = SparseMatrix::load(dir.join(format!("adjacency_{i}.bin")))?;
            let laplacian = SparseMatrix::load(dir.join(format!("laplacian_{i}.bin")))?;
            if adjacency.shape() != (n, n) || laplacian.shape() != (n, n) {
                return Err(HierarchyError::Meta(format!("level {i} operator size mismatch")));
            }
            levels.push(Level {
                vertex_count: n,
                adjacency,
                laplacian,
            });
        }
        let mut down = Vec::new();
        let mut up = Vec::new();
        for i in 0..meta.ratios.len() {
            down.push(SparseMatrix::load(dir.join(format!("down_{i}.bin")))?);
            up.push(SparseMatrix::load(dir.join(format!("up_{i}.bin")))?);
        }
        Ok(Self {
            ratios: meta.ratios,
            levels,
            down,
            up,
        })
    }
}

fn make_level(n: usize, faces: &[Face]) -> Level {
    let adjacency = adjacency(n, &face_edges(faces));
    let laplacian = scaled_laplacian_from_adjacency(&adjacency);
    Level {
        vertex_count: n,
        adjacency,
        laplacian,
    }
}

/// Symmetric 4×4 quadric stored as its upper triangle.
#[derive(Debug, Clone, Copy, Default)]
struct Quadric([f64; 10]);

impl Quadric {
    fn from_plane(n: [f64; 3], d: f64) -> Self {
        let [a, b, c] = n;
        Self([a * a, a * b, a * c, a * d, b * b, b * c, b * d, c * c, c * d, d * d])
    }

    fn add(&self, o: &Quadric) -> Quadric {
        let mut out = *self;
        for (x, y) in out.0.iter_mut().zip(&o.0) {
            *x += y;
        }
        out
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let q = &self.0;
        let [x, y, z] = p;
        q[0] * x * x
            + 2.0 * q[1] * x * y
            + 2.0 * q[2] * x * z
            + 2.0 * q[3] * x
            + q[4] * y * y
            + 2.0 * q[5] * y * z
            + 2.0 * q[6] * y
            + q[7] * z * z
            + 2.0 * q[8] * z
            + q[9]
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn face_normal(pos: &[[f64; 3]], f: &Face) -> [f64; 3] {
    cross(sub(pos[f[1]], pos[f[0]]), sub(pos[f[2]], pos[f[0]]))
}

struct Collapsed {
    /// Surviving fine-vertex indices, ascending; coarse vertex `i` is `survivors[i]`.
    survivors: Vec<usize>,
    /// Coarse faces in coarse indexing, in fine-face order.
    faces: Vec<Face>,
}

fn decimate(positions: &[[f64; 3]], faces: &[Face], target: usize) -> Result<Collapsed, HierarchyError> {
    let n = positions.len();
    let mut pos = positions.to_vec();
    let mut quadrics = vec![Quadric::default(); n];
    for f in faces {
        let nrm = face_normal(&pos, f);
        let len = dot(nrm, nrm).sqrt();
        if len > 0.0 {
            let unit = nrm.map(|c| c / len);
            let q = Quadric::from_plane(unit, -dot(unit, pos[f[0]]));
            for &v in f {
                quadrics[v] = quadrics[v].add(&q);
            }
        }
    }

    let mut faces: Vec<Option<Face>> = faces.iter().copied().map(Some).collect();
    let mut incident: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (fi, f) in faces.iter().enumerate() {
        for &v in f.as_ref().unwrap() {
            incident[v].insert(fi);
        }
    }
    let mut alive = vec![true; n];
    let mut alive_count = n;

    while alive_count > target {
        let live: Vec<Face> = faces.iter().flatten().copied().collect();
        let mut candidates: Vec<(f64, usize, usize)> = face_edges(&live)
            .into_iter()
            .map(|(a, b)| {
                let mid = [0, 1, 2].map(|k| 0.5 * (pos[a][k] + pos[b][k]));
                (quadrics[a].add(&quadrics[b]).eval(mid), a, b)
            })
            .collect();
        candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let pick = candidates
            .iter()
            .find(|&&(_, a, b)| collapse_is_valid(a, b, &pos, &faces, &incident))
            .copied();
        let Some((_, keep, drop)) = pick else {
            return Err(HierarchyError::Stuck { alive: alive_count, target });
        };

        pos[keep] = [0, 1, 2].map(|k| 0.5 * (pos[keep][k] + pos[drop][k]));
        quadrics[keep] = quadrics[keep].add(&quadrics[drop]);
        let dropped_faces: Vec<usize> = incident[drop].iter().copied().collect();
        for fi in dropped_faces {
            let f = faces[fi].unwrap();
            if f.contains(&keep) {
                for &v in &f {
                    incident[v].remove(&fi);
                }
                faces[fi] = None;
            } else {
                faces[fi] = Some(f.map(|v| if v == drop { keep } else { v }));
                incident[keep].insert(fi);
            }
        }
        incident[drop].clear();
        alive[drop] = false;
        alive_count -= 1;
    }

    let survivors: Vec<usize> = (0..n).filter(|&v| alive[v]).collect();
    let mut remap = vec![usize::MAX; n];
    for (i, &v) in survivors.iter().enumerate() {
        remap[v] = i;
    }
    let faces = faces.iter().flatten().map(|f| f.map(|v| remap[v])).collect();
    Ok(Collapsed { survivors, faces })
}

fn neighbors(v: usize, faces: &[Option<Face>], incident: &[BTreeSet<usize>]) -> BTreeSet<usize> {
    incident[v]
        .iter()
        .flat_map(|&fi| faces[fi].unwrap())
        .filter(|&u| u != v)
        .collect()
}

fn is_boundary(v: usize, faces: &[Option<Face>], incident: &[BTreeSet<usize>]) -> bool {
    neighbors(v, faces, incident)
        .into_iter()
        .any(|u| incident[v].iter().filter(|fi| faces[**fi].unwrap().contains(&u)).count() == 1)
}

/// Link condition, boundary rule, and no face normal flips.
fn collapse_is_valid(
    a: usize,
    b: usize,
    pos: &[[f64; 3]],
    faces: &[Option<Face>],
    incident: &[BTreeSet<usize>],
) -> bool {
    let na = neighbors(a, faces, incident);
    let nb = neighbors(b, faces, incident);
    let common = na.intersection(&nb).count();
    let shared_faces = incident[a].intersection(&incident[b]).count();
    if common != shared_faces {
        return false;
    }
    if shared_faces == 2 && is_boundary(a, faces, incident) && is_boundary(b, faces, incident) {
        return false;
    }
    let mid = [0, 1, 2].map(|k| 0.5 * (pos[a][k] + pos[b][k]));
    for &fi in incident[a].union(&incident[b]) {
        let f = faces[fi].unwrap();
        if f.contains(&a) && f.contains(&b) {
            continue;
        }
        let before = face_normal(pos, &f);
        let moved: Vec<[f64; 3]> = f.iter().map(|&v| if v == a || v == b { mid } else { pos[v] }).collect();
        let after = cross(sub(moved[1], moved[0]), sub(moved[2], moved[0]));
        if dot(before, after) < 0.0 {
            return false;
        }
    }
    true
}

/// Closest point on triangle `(a, b, c)` to `p` as barycentric weights.
pub(crate) fn closest_point_barycentric(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

fn barycentric_upsample(
    fine: &[[f64; 3]],
    coarse: &[[f64; 3]],
    coarse_faces: &[Face],
) -> Result<SparseMatrix, HierarchyError> {
    let mut triplets = Vec::with_capacity(fine.len() * 3);
    for (i, &p) in fine.iter().enumerate() {
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for (fi, f) in coarse_faces.iter().enumerate() {
            let w = closest_point_barycentric(p, coarse[f[0]], coarse[f[1]], coarse[f[2]]);
            let q = [0, 1, 2].map(|k| w[0] * coarse[f[0]][k] + w[1] * coarse[f[1]][k] + w[2] * coarse[f[2]][k]);
            let d = dot(sub(p, q), sub(p, q));
            if best.map_or(true, |(bd, _, _)| d < bd) {
                best = Some((d, fi, w));
            }
        }
        let (_, fi, w) = best.expect("coarse level has faces");
        for (k, &wk) in w.iter().enumerate() {
            if wk > 0.0 {
                triplets.push((i, coarse_faces[fi][k], wk));
            }
        }
    }
    Ok(SparseMatrix::from_triplets(fine.len(), coarse.len(), triplets)?)
}
