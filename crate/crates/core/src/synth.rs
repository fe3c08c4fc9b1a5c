//! Procedural articulated tubes with known shape and pose factors.
//!
//! A shape is a stack of [`SEGMENTS`] cylindrical segments along +z, each with
//! its own radius and length, closed by a pole vertex at each end. A pose is
//! one rotation angle per joint, where joint `j` sits on the boundary between
//! segment `j` and `j + 1` and rotates everything above it. The mesh
//! topology never depends on the parameters.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Face, TriangleMesh};

pub const SEGMENTS: usize = 4;
pub const JOINTS: usize = SEGMENTS - 1;
/// Length of [`ShapeParams::normalized`].
pub const SHAPE_PARAM_COUNT: usize = 2 * SEGMENTS;
/// Vertices per ring.
pub const RING_RESOLUTION: usize = 16;
pub const RINGS_PER_SEGMENT: usize = 6;
pub const RINGS: usize = SEGMENTS * RINGS_PER_SEGMENT;
pub const VERTEX_COUNT: usize = RINGS * RING_RESOLUTION + 2;

pub const RADIUS_RANGE: (f64, f64) = (0.05, 0.5);
pub const LENGTH_RANGE: (f64, f64) = (0.3, 1.5);
pub const ANGLE_LIMIT: f64 = FRAC_PI_2;

/// Peak joint angle of the canonical sequence trajectory.
pub const TRAJECTORY_AMPLITUDE: f64 = 1.2;
/// Angular frequency of the canonical trajectory over normalized time.
pub const TRAJECTORY_FREQUENCY: f64 = 1.5 * PI;

/// Domain tags separating the PRNG streams.
pub(crate) mod tags {
    pub const SHAPE: u64 = 1;
    pub const POSE: u64 = 2;
    pub const SEQUENCE: u64 = 3;
    pub const PRIOR_SHAPE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const ORDER: u64 = 6;
    pub const PARTNER: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const SAMPLE: u64 = 10;
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("{name}[{index}] = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{name} has {found} entries, expected {expected}")]
    Length {
        name: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("sequence needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("warp must satisfy warp(0) = 0, warp(1) = 1 and increase strictly; violated at frame {frame} (value {value})")]
    BadWarp { frame: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub segment_radii: Vec<f64>,
    pub segment_lengths: Vec<f64>,
    pub subject_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub joint_angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorLabels {
    pub subject_id: u64,
    pub shape: ShapeParams,
    pub pose: PoseParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_index: Option<usize>,
    /// Warped time in `[0, 1]` at which the canonical trajectory was sampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_time: Option<f64>,
}

fn check_range(name: &'static str, values: &[f64], expected: usize, (lo, hi): (f64, f64)) -> Result<(), SynthError> {
    if values.len() != expected {
        return Err(SynthError::Length {
            name,
            found: values.len(),
            expected,
        });
    }
    match values.iter().position(|v| !(lo..=hi).contains(v)) {
        Some(index) => Err(SynthError::OutOfRange {
            name,
            index,
            value: values[index],
            lo,
            hi,
        }),
        None => Ok(()),
    }
}

fn to_unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

impl ShapeParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        check_range("segment_radii", &self.segment_radii, SEGMENTS, RADIUS_RANGE)?;
        check_range("segment_lengths", &self.segment_lengths, SEGMENTS, LENGTH_RANGE)
    }

    /// Uniform draw over the parameter box.
    pub fn sample(rng: &mut impl Rng, subject_id: u64) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
        let segment_radii = (0..SEGMENTS).map(|_| draw(RADIUS_RANGE)).collect();
        let segment_lengths = (0..SEGMENTS).map(|_| draw(LENGTH_RANGE)).collect();
        Self {
            segment_radii,
            segment_lengths,
            subject_id,
        }
    }

    /// Radii then lengths, each mapped affinely from its range onto `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        let radii = self.segment_radii.iter().map(|&r| to_unit(r, RADIUS_RANGE));
        let lengths = self.segment_lengths.iter().map(|&l| to_unit(l, LENGTH_RANGE));
        radii.chain(lengths).collect()
    }
}

impl PoseParams {
    pub fn rest() -> Self {
        Self {
            joint_angles: vec![0.0; JOINTS],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        check_range("joint_angles", &self.joint_angles, JOINTS, (-ANGLE_LIMIT, ANGLE_LIMIT))
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let joint_angles = (0..JOINTS)
            .map(|_| -ANGLE_LIMIT + 2.0 * ANGLE_LIMIT * rng.gen::<f64>())
            .collect();
        Self { joint_angles }
    }

    /// Angles divided by the joint limit, in `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.joint_angles.iter().map(|a| a / ANGLE_LIMIT).collect()
    }
}

/// Independent ChaCha8 stream keyed by `(seed, tag, a, b)`.
///
/// Any sample is reproducible from its indices alone, whatever order the
/// samples are generated in.
pub fn counter_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Shared face array of every generated tube.
pub fn template_faces() -> Arc<Vec<Face>> {
    static FACES: OnceLock<Arc<Vec<Face>>> = OnceLock::new();
    Arc::clone(FACES.get_or_init(|| Arc::new(build_faces())))
}

fn ring_vertex(ring: usize, k: usize) -> usize {
    1 + ring * RING_RESOLUTION + k % RING_RESOLUTION
}

fn build_faces() -> Vec<Face> {
    let top = VERTEX_COUNT - 1;
    let mut faces = Vec::with_capacity(2 * RING_RESOLUTION * RINGS);
    // outward-facing winding for a tube along +z
    for k in 0..RING_RESOLUTION {
        faces.push([0, ring_vertex(0, k + 1), ring_vertex(0, k)]);
    }
    for r in 0..RINGS - 1 {
        for k in 0..RING_RESOLUTION {
            let (a, b) = (ring_vertex(r, k), ring_vertex(r, k + 1));
            let (c, d) = (ring_vertex(r + 1, k), ring_vertex(r + 1, k + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for k in 0..RING_RESOLUTION {
        faces.push([top, ring_vertex(RINGS - 1, k), ring_vertex(RINGS - 1, k + 1)]);
    }
    faces
}

/// Segment owning each vertex; the poles belong to the end segments.
pub fn vertex_segments() -> Vec<usize> {
    let mut seg = Vec::with_capacity(VERTEX_COUNT);
    seg.push(0);
    for r in 0..RINGS {
        seg.extend(std::iter::repeat(r / RINGS_PER_SEGMENT).take(RING_RESOLUTION));
    }
    seg.push(SEGMENTS - 1);
    seg
}

/// Heights of the segment boundaries: `[0, L0, L0+L1, ...]`.
pub fn segment_offsets(shape: &ShapeParams) -> Vec<f64> {
    let mut h = vec![0.0];
    for &l in &shape.segment_lengths {
        h.push(h.last().unwrap() + l);
    }
    h
}

/// Rotation of joint `j`: even joints turn about +x, odd joints about +y.
pub fn joint_rotation(j: usize, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    if j % 2 == 0 {
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    } else {
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    }
}

pub(crate) fn rotate_about(p: [f64; 3], center: [f64; 3], r: &[[f64; 3]; 3]) -> [f64; 3] {
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    [0, 1, 2].map(|i| center[i] + r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
}

/// Unposed tube for `shape`.
pub fn rest_vertices(shape: &ShapeParams) -> Vec<[f64; 3]> {
    let offsets = segment_offsets(shape);
    let mut v = Vec::with_capacity(VERTEX_COUNT);
    v.push([0.0, 0.0, 0.0]);
    for r in 0..RINGS {
        let s = r / RINGS_PER_SEGMENT;
        let i = r % RINGS_PER_SEGMENT;
        let z = offsets[s] + shape.segment_lengths[s] * (i as f64 + 0.5) / RINGS_PER_SEGMENT as f64;
        let radius = shape.segment_radii[s];
        for k in 0..RING_RESOLUTION {
            let phi = 2.0 * PI * k as f64 / RING_RESOLUTION as f64;
            v.push([radius * phi.cos(), radius * phi.sin(), z]);
        }
    }
    v.push([0.0, 0.0, offsets[SEGMENTS]]);
    v
}

pub fn generate_mesh(shape: &ShapeParams, pose: &PoseParams) -> Result<TriangleMesh, SynthError> {
    shape.validate()?;
    pose.validate()?;
    let offsets = segment_offsets(shape);
    let segments = vertex_segments();
    let mut v = rest_vertices(shape);
    // Tip joints first in rest coordinates composes to root-to-tip in the
    // moving frame.
    for j in (0..JOINTS).rev() {
        let rot = joint_rotation(j, pose.joint_angles[j]);
        let center = [0.0, 0.0, offsets[j + 1]];
        for (p, &s) in v.iter_mut().zip(&segments) {
            if s > j {
                *p = rotate_about(*p, center, &rot);
            }
        }
    }
    Ok(TriangleMesh::new(v, template_faces()).expect("generated tube is a valid mesh"))
}

/// Canonical pose trajectory of a sequence seeded by `seed`, at time `t ∈ [0, 1]`.
pub fn trajectory_pose(seed: u64, t: f64) -> PoseParams {
    let mut rng = counter_rng(seed, tags::SEQUENCE, 0, 0);
    let joint_angles = (0..JOINTS)
        .map(|_| {
            let phase = 2.0 * PI * rng.gen::<f64>();
            TRAJECTORY_AMPLITUDE * (TRAJECTORY_FREQUENCY * t + phase).sin()
        })
        .collect();
    PoseParams { joint_angles }
}

/// Frames of the canonical trajectory sampled at `warp(k / (n_frames − 1))`.
pub fn make_sequence(
    shape: &ShapeParams,
    n_frames: usize,
    warp: impl Fn(f64) -> f64,
    seed: u64,
) -> Result<Vec<(TriangleMesh, FactorLabels)>, SynthError> {
    if n_frames < 2 {
        return Err(SynthError::TooFewFrames(n_frames));
    }
    let times: Vec<f64> = (0..n_frames)
        .map(|k| warp(k as f64 / (n_frames - 1) as f64))
        .collect();
    if times[0] != 0.0 {
        return Err(SynthError::BadWarp { frame: 0, value: times[0] });
    }
    if times[n_frames - 1] != 1.0 {
        return Err(SynthError::BadWarp {
            frame: n_frames - 1,
            value: times[n_frames - 1],
        });
    }
    if let Some(k) = (1..n_frames).find(|&k| !(times[k] > times[k - 1])) {
        return Err(SynthError::BadWarp { frame: k, value: times[k] });
    }
    times
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let pose = trajectory_pose(seed, t);
            let mesh = generate_mesh(shape, &pose)?;
            let labels = FactorLabels {
                subject_id: shape.subject_id,
                shape: shape.clone(),
                pose,
                sequence_id: Some(seed),
                time_index: Some(k),
                canonical_time: Some(t),
            };
            Ok((mesh, labels))
        })
        .collect()
}
