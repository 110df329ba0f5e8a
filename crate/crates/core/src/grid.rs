//! Sparse hashed-block voxel domain over the narrow band.
//!
//! Active SDF unknowns live at voxel centers. Blocks are cubes of
//! `block_size`^3 voxels keyed by their integer block coordinate; each active
//! node has a dense linear index assigned in lexicographic order of its
//! global voxel coordinate, so solver behavior and fixtures are reproducible.

use std::collections::HashMap;

use thiserror::Error;

use crate::camera::Vec3;
use crate::tsdf::TsdfVolume;

#[derive(Error, Debug)]
pub enum GridError {
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
    #[error("no voxel qualifies for the narrow band")]
    EmptyBand,
    #[error("interpolation cell has only {active} of 8 corners active (minimum {min})")]
    OutsideBand { active: usize, min: usize },
}

/// Minimum number of active cell corners a trilinear stencil needs before an
/// interpolation row is considered well conditioned.
pub const DEFAULT_MIN_STENCIL_CORNERS: usize = 4;

/// Grid placement: world origin, voxel edge length, and voxels per block edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub block_size: u32,
}

impl GridConfig {
    pub fn new(origin: Vec3, voxel_size: f64, block_size: u32) -> Result<Self, GridError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(GridError::InvalidConfig(format!(
                "voxel_size must be positive, got {voxel_size}"
            )));
        }
        if block_size < 2 || !block_size.is_power_of_two() {
            return Err(GridError::InvalidConfig(format!(
                "block_size must be a power of two >= 2, got {block_size}"
            )));
        }
        Ok(Self { origin, voxel_size, block_size })
    }

    /// Continuous voxel coordinate of a world point.
    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        (p - self.origin) / self.voxel_size
    }

    pub fn voxel_to_world(&self, v: &Vec3) -> Vec3 {
        self.origin + v * self.voxel_size
    }

    /// World position of the center of voxel `g`.
    pub fn node_center(&self, g: [i32; 3]) -> Vec3 {
        self.origin
            + Vec3::new(g[0] as f64 + 0.5, g[1] as f64 + 0.5, g[2] as f64 + 0.5) * self.voxel_size
    }

    pub fn block_of(&self, g: [i32; 3]) -> [i32; 3] {
        let b = self.block_size as i32;
        [g[0].div_euclid(b), g[1].div_euclid(b), g[2].div_euclid(b)]
    }

    /// Linear slot of voxel `g` inside its block.
    pub fn slot_of(&self, g: [i32; 3]) -> usize {
        let b = self.block_size as i32;
        let ox = g[0].rem_euclid(b) as usize;
        let oy = g[1].rem_euclid(b) as usize;
        let oz = g[2].rem_euclid(b) as usize;
        (oz * b as usize + oy) * b as usize + ox
    }

    pub fn voxels_per_block(&self) -> usize {
        (self.block_size as usize).pow(3)
    }
}

/// Neighbor stencil for the node graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    Six,
    Eighteen,
    TwentySix,
}

impl Stencil {
    /// Lexicographically positive half of the stencil offsets; together with
    /// their negations they enumerate the full neighborhood once.
    fn positive_offsets(self) -> &'static [[i32; 3]] {
        const SIX: &[[i32; 3]] = &[[0, 0, 1], [0, 1, 0], [1, 0, 0]];
        const EIGHTEEN: &[[i32; 3]] = &[
            [0, 0, 1],
            [0, 1, -1],
            [0, 1, 0],
            [0, 1, 1],
            [1, -1, 0],
            [1, 0, -1],
            [1, 0, 0],
            [1, 0, 1],
            [1, 1, 0],
        ];
        const TWENTY_SIX: &[[i32; 3]] = &[
            [0, 0, 1],
            [0, 1, -1],
            [0, 1, 0],
            [0, 1, 1],
            [1, -1, -1],
            [1, -1, 0],
            [1, -1, 1],
            [1, 0, -1],
            [1, 0, 0],
            [1, 0, 1],
            [1, 1, -1],
            [1, 1, 0],
            [1, 1, 1],
        ];
        match self {
            Stencil::Six => SIX,
            Stencil::Eighteen => EIGHTEEN,
            Stencil::TwentySix => TWENTY_SIX,
        }
    }

    pub fn size(self) -> usize {
        self.positive_offsets().len() * 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    Uniform,
    InverseDistance,
}

/// One undirected edge of the node graph, stored once with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct EdgeList {
    pub edges: Vec<Edge>,
    pub stencil: Stencil,
}

/// Sparse narrow-band voxel domain with a bijective active-node index.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    config: GridConfig,
    /// Per-block slot table mapping to the active node index, -1 = inactive.
    blocks: HashMap<[i32; 3], Vec<i32>>,
    /// Active node global coordinates in lexicographic order; the position in
    /// this vector is the node's linear index.
    coords: Vec<[i32; 3]>,
}

impl VoxelGrid {
    /// Builds a grid from an explicit set of active voxel coordinates.
    pub fn from_active_coords(
        config: GridConfig,
        mut coords: Vec<[i32; 3]>,
    ) -> Result<Self, GridError> {
        coords.sort_unstable();
        coords.dedup();
        if coords.is_empty() {
            return Err(GridError::EmptyBand);
        }
        let mut blocks: HashMap<[i32; 3], Vec<i32>> = HashMap::new();
        for (i, &g) in coords.iter().enumerate() {
            let key = config.block_of(g);
            let slot = config.slot_of(g);
            let block = blocks
                .entry(key)
                .or_insert_with(|| vec![-1; config.voxels_per_block()]);
            block[slot] = i as i32;
        }
        Ok(Self { config, blocks, coords })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn n_active(&self) -> usize {
        self.coords.len()
    }

    pub fn node_coord(&self, index: usize) -> [i32; 3] {
        self.coords[index]
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn node_index(&self, g: [i32; 3]) -> Option<usize> {
        let block = self.blocks.get(&self.config.block_of(g))?;
        let i = block[self.config.slot_of(g)];
        (i >= 0).then_some(i as usize)
    }

    pub fn node_center_world(&self, index: usize) -> Vec3 {
        self.config.node_center(self.coords[index])
    }

    /// Mean world position of all active nodes.
    pub fn centroid(&self) -> Vec3 {
        let mut acc = Vec3::zeros();
        for &g in &self.coords {
            acc += self.config.node_center(g);
        }
        acc / self.coords.len() as f64
    }

    /// Undirected neighbor edges over active nodes, each stored once with
    /// `i < j`. Isolated nodes contribute no edges.
    pub fn neighbor_edges(&self, stencil: Stencil, scheme: WeightScheme) -> EdgeList {
        let mut edges = Vec::new();
        for (i, &g) in self.coords.iter().enumerate() {
            for &d in stencil.positive_offsets() {
                let n = [g[0] + d[0], g[1] + d[1], g[2] + d[2]];
                if let Some(j) = self.node_index(n) {
                    let weight = match scheme {
                        WeightScheme::Uniform => 1.0,
                        WeightScheme::InverseDistance => {
                            let len2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
                            1.0 / len2.sqrt()
                        }
                    };
                    edges.push(Edge { i: i as u32, j: j as u32, weight });
                }
            }
        }
        EdgeList { edges, stencil }
    }

    /// Trilinear interpolation stencil at world point `p` over the cell of
    /// node centers containing it. Returns the active corners with nonzero
    /// standard trilinear weights (no renormalization; the weights sum to 1
    /// exactly when all 8 corners are active).
    pub fn trilinear_stencil(
        &self,
        p: &Vec3,
        min_active: usize,
    ) -> Result<arrayvec::ArrayVec<(u32, f64), 8>, GridError> {
        let v = self.config.world_to_voxel(p) - Vec3::new(0.5, 0.5, 0.5);
        let base = [v.x.floor() as i32, v.y.floor() as i32, v.z.floor() as i32];
        let f = [v.x - base[0] as f64, v.y - base[1] as f64, v.z - base[2] as f64];
        let mut out = arrayvec::ArrayVec::new();
        let mut active = 0usize;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let g = [base[0] + dx, base[1] + dy, base[2] + dz];
                    let Some(idx) = self.node_index(g) else { continue };
                    active += 1;
                    let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                        * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                        * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                    if w > 0.0 {
                        out.push((idx as u32, w));
                    }
                }
            }
        }
        if active < min_active {
            return Err(GridError::OutsideBand { active, min: min_active });
        }
        Ok(out)
    }

    /// Interpolates a per-node field at `p`, renormalizing over the active
    /// corners. `None` when the stencil fails the corner minimum.
    pub fn sample_field(&self, field: &[f64], p: &Vec3, min_active: usize) -> Option<f64> {
        let stencil = self.trilinear_stencil(p, min_active).ok()?;
        let mut num = 0.0;
        let mut den = 0.0;
        for &(i, w) in &stencil {
            num += w * field[i as usize];
            den += w;
        }
        (den > 1e-12).then(|| num / den)
    }
}

/// Activates all observed voxels whose TSDF magnitude is within
/// `alpha * tau`, with `alpha` in [1, 3].
pub fn activate_narrow_band(
    tsdf: &TsdfVolume,
    alpha: f64,
    tau: f64,
) -> Result<VoxelGrid, GridError> {
    if !(1.0..=3.0).contains(&alpha) {
        return Err(GridError::InvalidConfig(format!("alpha must be in [1, 3], got {alpha}")));
    }
    if !(tau > 0.0) {
        return Err(GridError::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let threshold = alpha * tau;
    let mut coords = Vec::new();
    tsdf.for_each_observed(|g, value, _weight| {
        if value.abs() <= threshold {
            coords.push(g);
        }
    });
    VoxelGrid::from_active_coords(*tsdf.config(), coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(voxel: f64, block: u32) -> GridConfig {
        GridConfig::new(Vec3::zeros(), voxel, block).unwrap()
    }

    fn cube_grid(n: i32, block: u32) -> VoxelGrid {
        let mut coords = Vec::new();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    coords.push([x, y, z]);
                }
            }
        }
        VoxelGrid::from_active_coords(cfg(0.5, block), coords).unwrap()
    }

    #[test]
    fn world_to_voxel_identity_at_origin() {
        let c = cfg(0.25, 8);
        assert_relative_eq!(c.world_to_voxel(&Vec3::zeros()), Vec3::zeros());
    }

    #[test]
    fn world_to_voxel_direct_arithmetic() {
        let c = cfg(0.5, 8);
        let v = c.world_to_voxel(&Vec3::new(1.0, 1.0, 0.25));
        assert_relative_eq!(v, Vec3::new(2.0, 2.0, 0.5), epsilon = 1e-15);
    }

    #[test]
    fn voxel_world_round_trip_random_points() {
        let c = GridConfig::new(Vec3::new(-0.3, 0.1, 2.0), 0.013, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let q = c.voxel_to_world(&c.world_to_voxel(&p));
            assert_relative_eq!(p, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn active_index_is_a_bijection() {
        let g = cube_grid(4, 8);
        for i in 0..g.n_active() {
            assert_eq!(g.node_index(g.node_coord(i)), Some(i));
        }
        assert_eq!(g.n_active(), 64);
    }

    #[test]
    fn negative_coordinates_round_trip() {
        let coords = vec![[-9, -1, -8], [-8, 0, 7], [3, -4, 5]];
        let g = VoxelGrid::from_active_coords(cfg(0.1, 4), coords.clone()).unwrap();
        for c in coords {
            let i = g.node_index(c).unwrap();
            assert_eq!(g.node_coord(i), c);
        }
        assert_eq!(g.node_index([0, 0, 0]), None);
    }

    #[test]
    fn empty_coords_is_empty_band() {
        assert!(matches!(
            VoxelGrid::from_active_coords(cfg(0.1, 8), vec![]),
            Err(GridError::EmptyBand)
        ));
    }

    #[test]
    fn single_node_has_no_edges() {
        let g = VoxelGrid::from_active_coords(cfg(0.5, 8), vec![[0, 0, 0]]).unwrap();
        let e = g.neighbor_edges(Stencil::Six, WeightScheme::Uniform);
        assert!(e.edges.is_empty());
    }

    #[test]
    fn axis_pair_has_one_unit_edge() {
        let g = VoxelGrid::from_active_coords(cfg(0.5, 8), vec![[0, 0, 0], [1, 0, 0]]).unwrap();
        let e = g.neighbor_edges(Stencil::Six, WeightScheme::Uniform);
        assert_eq!(e.edges.len(), 1);
        assert_eq!((e.edges[0].i, e.edges[0].j), (0, 1));
        assert_eq!(e.edges[0].weight, 1.0);
    }

    #[test]
    fn cube_edge_count_matches_combinatorial_oracle() {
        // 3x3x3 cube, 6-stencil: 3 axes * 2 edges per line * 9 lines = 54.
        let g = cube_grid(3, 8);
        let e = g.neighbor_edges(Stencil::Six, WeightScheme::Uniform);
        assert_eq!(e.edges.len(), 54);

        // Brute-force count over all unordered active pairs.
        let mut brute = 0;
        for i in 0..27 {
            for j in (i + 1)..27 {
                let a = g.node_coord(i);
                let b = g.node_coord(j);
                let d: i32 = (0..3).map(|k| (a[k] - b[k]).abs()).sum();
                if d == 1 {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 54);
    }

    #[test]
    fn edges_are_unique_and_ordered() {
        for stencil in [Stencil::Six, Stencil::Eighteen, Stencil::TwentySix] {
            let g = cube_grid(4, 4);
            let e = g.neighbor_edges(stencil, WeightScheme::InverseDistance);
            let mut seen = std::collections::HashSet::new();
            for edge in &e.edges {
                assert!(edge.i < edge.j);
                assert!(edge.weight > 0.0);
                assert!(seen.insert((edge.i, edge.j)), "duplicate edge");
                assert!(!seen.contains(&(edge.j, edge.i)));
            }
        }
    }

    #[test]
    fn stencil_sizes() {
        assert_eq!(Stencil::Six.size(), 6);
        assert_eq!(Stencil::Eighteen.size(), 18);
        assert_eq!(Stencil::TwentySix.size(), 26);
    }

    #[test]
    fn inverse_distance_weight_on_diagonal() {
        let g = VoxelGrid::from_active_coords(cfg(0.5, 8), vec![[0, 0, 0], [1, 1, 0]]).unwrap();
        let e = g.neighbor_edges(Stencil::Eighteen, WeightScheme::InverseDistance);
        assert_eq!(e.edges.len(), 1);
        assert_relative_eq!(e.edges[0].weight, 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn stencil_at_node_center_is_single_unit_weight() {
        let g = cube_grid(3, 8);
        let p = g.node_center_world(g.node_index([1, 1, 1]).unwrap());
        let s = g.trilinear_stencil(&p, DEFAULT_MIN_STENCIL_CORNERS).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].0 as usize, g.node_index([1, 1, 1]).unwrap());
        assert_relative_eq!(s[0].1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stencil_at_cell_centroid_is_uniform_eighth() {
        let g = cube_grid(3, 8);
        // Centroid of the cell spanned by node centers (0,0,0)..(1,1,1).
        let p = (g.node_center_world(0) + g.node_center_world(g.node_index([1, 1, 1]).unwrap()))
            / 2.0;
        let s = g.trilinear_stencil(&p, 8).unwrap();
        assert_eq!(s.len(), 8);
        for &(_, w) in &s {
            assert_relative_eq!(w, 0.125, epsilon = 1e-12);
        }
    }

    #[test]
    fn stencil_reproduces_linear_fields() {
        let g = cube_grid(5, 4);
        let a = Vec3::new(0.3, -1.7, 0.9);
        let b = 0.42;
        let field: Vec<f64> =
            (0..g.n_active()).map(|i| a.dot(&g.node_center_world(i)) + b).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            // Random point strictly inside the interior cells.
            let p = Vec3::new(
                rng.random_range(0.3..2.2),
                rng.random_range(0.3..2.2),
                rng.random_range(0.3..2.2),
            );
            let s = g.trilinear_stencil(&p, 8).unwrap();
            let interp: f64 = s.iter().map(|&(i, w)| w * field[i as usize]).sum();
            assert!((interp - (a.dot(&p) + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_rejects_sparse_corners() {
        let g = VoxelGrid::from_active_coords(cfg(0.5, 8), vec![[0, 0, 0], [1, 0, 0]]).unwrap();
        let p = (g.node_center_world(0) + g.node_center_world(1)) / 2.0;
        match g.trilinear_stencil(&p, 4) {
            Err(GridError::OutsideBand { active: 2, min: 4 }) => {}
            other => panic!("expected OutsideBand, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn trilinear_weights_are_a_partition_of_unity(
            px in 0.3f64..2.2, py in 0.3f64..2.2, pz in 0.3f64..2.2
        ) {
            let g = cube_grid(5, 4);
            let s = g.trilinear_stencil(&Vec3::new(px, py, pz), 8).unwrap();
            let sum: f64 = s.iter().map(|&(_, w)| w).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for &(_, w) in &s {
                prop_assert!((0.0..=1.0).contains(&w));
            }
        }
    }
}
