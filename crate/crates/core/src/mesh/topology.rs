//! Fixed mesh connectivity plus the multi-resolution hierarchy used by the
//! mesh autoencoder.
//!
//! A topology has `levels.len()` resolutions. Level 0 is the mesh itself; each
//! [`PoolMap`] `l` maps level `l` onto the coarser level `l + 1` by clustering
//! vertices: every fine vertex belongs to exactly one coarse cell and every
//! coarse cell is a weighted mean of its members (weights sum to 1).
//!
//! On disk this is the JSON serialization of [`MeshTopology`]:
//!
//! ```json
//! {
//!   "vertex_count": 1024,
//!   "faces": [[0, 1, 8], ...],
//!   "levels": [{"neighbors": [[0, 1, 7, 8], ...]}, ...],
//!   "pool_maps": [{"fine_count": 1024, "members": [[0, 1, 8, 9], ...], "weights": [[0.25, ...], ...]}],
//!   "parts": {"names": ["torso", ...], "vertex_part": [0, 0, ...]}
//! }
//! ```
//!
//! All indices are 0-based. Neighbor lists include the vertex itself.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geometry::Vec3;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub neighbors: Vec<Vec<u32>>,
}

impl Level {
    pub fn vertex_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMap {
    pub fine_count: usize,
    pub members: Vec<Vec<u32>>,
    pub weights: Vec<Vec<f64>>,
}

impl PoolMap {
    pub fn coarse_count(&self) -> usize {
        self.members.len()
    }

    /// Coarse cell owning each fine vertex.
    pub fn owner(&self) -> Vec<u32> {
        let mut owner = vec![u32::MAX; self.fine_count];
        for (c, members) in self.members.iter().enumerate() {
            for &m in members {
                owner[m as usize] = c as u32;
            }
        }
        owner
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.members.len() {
            return Err(invalid!("pool map has {} member lists but {} weight lists", self.members.len(), self.weights.len()));
        }
        let mut seen = vec![false; self.fine_count];
        for (c, (m, w)) in self.members.iter().zip(&self.weights).enumerate() {
            if m.is_empty() || m.len() != w.len() {
                return Err(invalid!("pool cell {c} is empty or has mismatched weights"));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || w.iter().any(|x| !x.is_finite()) {
                return Err(invalid!("pool cell {c} weights sum to {sum}, expected 1"));
            }
            for &i in m {
                let i = i as usize;
                if i >= self.fine_count {
                    return Err(invalid!("pool cell {c} references fine vertex {i} >= {}", self.fine_count));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(invalid!("fine vertex {i} belongs to more than one pool cell"));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(invalid!("fine vertex {i} belongs to no pool cell"));
        }
        Ok(())
    }
}

/// Named vertex groups (e.g. body parts), one label per level-0 vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartLabels {
    pub names: Vec<String>,
    pub vertex_part: Vec<u32>,
}

impl PartLabels {
    pub fn members(&self, part: usize) -> Vec<usize> {
        self.vertex_part
            .iter()
            .enumerate()
            .filter(|(_, &p)| p as usize == part)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshTopology {
    vertex_count: usize,
    faces: Vec<[u32; 3]>,
    levels: Vec<Level>,
    pool_maps: Vec<PoolMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parts: Option<PartLabels>,
}

impl MeshTopology {
    pub fn new(
        vertex_count: usize,
        faces: Vec<[u32; 3]>,
        levels: Vec<Level>,
        pool_maps: Vec<PoolMap>,
        parts: Option<PartLabels>,
    ) -> Result<Self> {
        let t = MeshTopology {
            vertex_count,
            faces,
            levels,
            pool_maps,
            parts,
        };
        t.validate()?;
        Ok(t)
    }

    /// Single-level topology whose neighborhoods come from the faces.
    pub fn from_faces(vertex_count: usize, faces: Vec<[u32; 3]>) -> Result<Self> {
        let neighbors = face_neighborhoods(vertex_count, &faces)?;
        Self::new(vertex_count, faces, vec![Level { neighbors }], vec![], None)
    }

    /// Faceless, single-level topology where each vertex only sees itself.
    pub fn point_cloud(vertex_count: usize) -> Self {
        MeshTopology {
            vertex_count,
            faces: vec![],
            levels: vec![Level {
                neighbors: (0..vertex_count as u32).map(|i| vec![i]).collect(),
            }],
            pool_maps: vec![],
            parts: None,
        }
    }

    /// Builds the hierarchy from explicit cluster assignments.
    ///
    /// `assignments[l][i]` is the level-`l+1` cell of level-`l` vertex `i`.
    /// Pooling weights are uniform within a cell. Coarse neighborhoods are the
    /// clusters touched by the members' neighborhoods, united with the
    /// `extra_knn` nearest cells by rest position, then symmetrized.
    pub fn with_hierarchy(
        positions: &[Vec3],
        faces: Vec<[u32; 3]>,
        assignments: &[Vec<u32>],
        extra_knn: usize,
        parts: Option<PartLabels>,
    ) -> Result<Self> {
        let vertex_count = positions.len();
        let mut levels = vec![Level {
            neighbors: face_neighborhoods(vertex_count, &faces)?,
        }];
        let mut pool_maps = Vec::new();
        let mut level_pos = positions.to_vec();
        for assign in assignments {
            let fine = levels.last().expect("level 0 exists");
            if assign.len() != fine.vertex_count() {
                return Err(invalid!(
                    "cluster assignment has {} entries for a level of {} vertices",
                    assign.len(),
                    fine.vertex_count()
                ));
            }
            let coarse_count = assign.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
            let mut members = vec![Vec::new(); coarse_count];
            for (i, &c) in assign.iter().enumerate() {
                members[c as usize].push(i as u32);
            }
            if members.iter().any(Vec::is_empty) {
                return Err(invalid!("cluster assignment leaves an empty coarse cell"));
            }
            let weights = members
                .iter()
                .map(|m| vec![1.0 / m.len() as f64; m.len()])
                .collect::<Vec<_>>();
            let coarse_pos: Vec<Vec3> = members
                .iter()
                .map(|m| m.iter().fold(Vec3::zeros(), |a, &i| a + level_pos[i as usize]) / m.len() as f64)
                .collect();
            let mut sets = vec![BTreeSet::new(); coarse_count];
            for (i, nbrs) in fine.neighbors.iter().enumerate() {
                let ci = assign[i];
                for &j in nbrs {
                    let cj = assign[j as usize];
                    sets[ci as usize].insert(cj);
                    sets[cj as usize].insert(ci);
                }
            }
            for c in 0..coarse_count {
                sets[c].insert(c as u32);
                let mut by_dist: Vec<(f64, u32)> = (0..coarse_count)
                    .filter(|&o| o != c)
                    .map(|o| ((coarse_pos[o] - coarse_pos[c]).norm(), o as u32))
                    .collect();
                by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, o) in by_dist.iter().take(extra_knn) {
                    sets[c].insert(o);
                    sets[o as usize].insert(c as u32);
                }
            }
            let neighbors = sets
                .into_iter()
                .enumerate()
                .map(|(c, s)| {
                    let mut v = vec![c as u32];
                    v.extend(s.into_iter().filter(|&o| o as usize != c));
                    v
                })
                .collect();
            pool_maps.push(PoolMap {
                fine_count: fine.vertex_count(),
                members,
                weights,
            });
            levels.push(Level { neighbors });
            level_pos = coarse_pos;
        }
        Self::new(vertex_count, faces, levels, pool_maps, parts)
    }

    /// Builds a hierarchy by repeated vertex clustering: farthest-point seeds
    /// on each level's cell positions, then nearest-seed assignment.
    pub fn cluster_hierarchy(
        positions: &[Vec3],
        faces: Vec<[u32; 3]>,
        level_sizes: &[usize],
        extra_knn: usize,
    ) -> Result<Self> {
        let mut assignments = Vec::new();
        let mut pos = positions.to_vec();
        for &size in level_sizes {
            if size == 0 || size > pos.len() {
                return Err(invalid!("cannot cluster {} points into {size} cells", pos.len()));
            }
            let seeds = farthest_point_seeds(&pos, size);
            let assign: Vec<u32> = pos
                .iter()
                .map(|p| {
                    let mut best = (f64::INFINITY, 0u32);
                    for (s, &seed) in seeds.iter().enumerate() {
                        let d = (pos[seed] - p).norm_squared();
                        if d < best.0 {
                            best = (d, s as u32);
                        }
                    }
                    best.1
                })
                .collect();
            let mut sums = vec![(Vec3::zeros(), 0usize); size];
            for (p, &a) in pos.iter().zip(&assign) {
                sums[a as usize].0 += p;
                sums[a as usize].1 += 1;
            }
            pos = sums.iter().map(|(s, n)| s / *n as f64).collect();
            assignments.push(assign);
        }
        Self::with_hierarchy(positions, faces, &assignments, extra_knn, None)
    }

    pub fn validate(&self) -> Result<()> {
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i as usize >= self.vertex_count) {
                return Err(invalid!("face {f} has an index >= vertex count {}", self.vertex_count));
            }
        }
        let first = self.levels.first().ok_or_else(|| invalid!("topology has no levels"))?;
        if first.vertex_count() != self.vertex_count {
            return Err(invalid!("level 0 has {} vertices, topology has {}", first.vertex_count(), self.vertex_count));
        }
        if self.pool_maps.len() + 1 != self.levels.len() {
            return Err(invalid!("{} levels need {} pool maps, got {}", self.levels.len(), self.levels.len() - 1, self.pool_maps.len()));
        }
        for (l, level) in self.levels.iter().enumerate() {
            let n = level.vertex_count();
            for (i, nbrs) in level.neighbors.iter().enumerate() {
                if nbrs.is_empty() {
                    return Err(invalid!("level {l} vertex {i} has an empty neighborhood"));
                }
                if let Some(&j) = nbrs.iter().find(|&&j| j as usize >= n) {
                    return Err(invalid!("level {l} vertex {i} has neighbor {j} >= {n}"));
                }
            }
        }
        let level0 = &first.neighbors;
        for (i, nbrs) in level0.iter().enumerate() {
            for &j in nbrs {
                if !level0[j as usize].contains(&(i as u32)) {
                    return Err(invalid!("level 0 neighborhoods are not symmetric ({i} -> {j})"));
                }
            }
        }
        for (l, map) in self.pool_maps.iter().enumerate() {
            if map.fine_count != self.levels[l].vertex_count() || map.coarse_count() != self.levels[l + 1].vertex_count() {
                return Err(invalid!("pool map {l} does not connect levels {l} and {}", l + 1));
            }
            map.validate()?;
        }
        if let Some(parts) = &self.parts {
            if parts.vertex_part.len() != self.vertex_count
                || parts.vertex_part.iter().any(|&p| p as usize >= parts.names.len())
            {
                return Err(invalid!("part labels do not cover the vertices"));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn pool_maps(&self) -> &[PoolMap] {
        &self.pool_maps
    }

    /// Number of cells at the coarsest level.
    pub fn coarsest_size(&self) -> usize {
        self.levels.last().map(Level::vertex_count).unwrap_or(0)
    }

    pub fn parts(&self) -> Option<&PartLabels> {
        self.parts.as_ref()
    }

    pub fn with_parts(mut self, parts: PartLabels) -> Result<Self> {
        self.parts = Some(parts);
        self.validate()?;
        Ok(self)
    }

    /// Content hash (hex SHA-256 of the JSON form).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("topology serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let t: MeshTopology = serde_json::from_slice(&bytes)?;
        t.validate()?;
        Ok(t)
    }
}

/// Self plus every vertex sharing a face, in ascending order after self.
pub fn face_neighborhoods(vertex_count: usize, faces: &[[u32; 3]]) -> Result<Vec<Vec<u32>>> {
    let mut sets = vec![BTreeSet::new(); vertex_count];
    for face in faces {
        for &a in face {
            if a as usize >= vertex_count {
                return Err(invalid!("face index {a} >= vertex count {vertex_count}"));
            }
            for &b in face {
                if a != b {
                    sets[a as usize].insert(b);
                }
            }
        }
    }
    Ok(sets
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut v = vec![i as u32];
            v.extend(s);
            v
        })
        .collect())
}

fn farthest_point_seeds(pos: &[Vec3], count: usize) -> Vec<usize> {
    let mut seeds = vec![0usize];
    let mut dist: Vec<f64> = pos.iter().map(|p| (p - pos[0]).norm_squared()).collect();
    while seeds.len() < count {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        seeds.push(next);
        for (d, p) in dist.iter_mut().zip(pos) {
            *d = d.min((p - pos[next]).norm_squared());
        }
    }
    seeds
}

/// A `rows × cols` wrap-around grid (a torus), handy for tests and for
/// building stand-in topologies of a given vertex count.
pub fn torus_grid(rows: usize, cols: usize, major: f64, minor: f64) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut pos = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let u = 2.0 * std::f64::consts::PI * r as f64 / rows as f64;
        for c in 0..cols {
            let v = 2.0 * std::f64::consts::PI * c as f64 / cols as f64;
            let w = major + minor * v.cos();
            pos.push(Vec3::new(w * u.cos(), minor * v.sin(), w * u.sin()));
        }
    }
    let idx = |r: usize, c: usize| ((r % rows) * cols + (c % cols)) as u32;
    let mut faces = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            faces.push([idx(r, c), idx(r + 1, c), idx(r + 1, c + 1)]);
            faces.push([idx(r, c), idx(r + 1, c + 1), idx(r, c + 1)]);
        }
    }
    (pos, faces)
}
