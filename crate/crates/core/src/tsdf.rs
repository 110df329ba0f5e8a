//! Coarse projective TSDF integration.
//!
//! Classical weighted-average fusion with constant per-frame weights: each
//! voxel keeps the running mean of its clamped ray-wise signed distances and
//! the accumulated weight. The result seeds narrow-band activation and the
//! anchoring term of the smoothness prior.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{DepthFrame, Vec3};
use crate::grid::{GridConfig, VoxelGrid};

#[derive(Error, Debug)]
pub enum TsdfError {
    #[error("no voxel received any observation")]
    NoObservations,
    #[error("invalid volume parameters: {0}")]
    InvalidConfig(String),
}

struct TsdfBlock {
    /// Sum of clamped signed distances; the stored value is `sum / weight`.
    sum: Vec<f64>,
    weight: Vec<f64>,
}

impl TsdfBlock {
    fn new(len: usize) -> Self {
        Self { sum: vec![0.0; len], weight: vec![0.0; len] }
    }
}

/// Dense-per-block truncated signed-distance volume over a bounded domain.
pub struct TsdfVolume {
    config: GridConfig,
    tau: f64,
    /// Inclusive voxel-coordinate bounds of the integration domain.
    vmin: [i32; 3],
    vmax: [i32; 3],
    blocks: Vec<([i32; 3], TsdfBlock)>,
    index: HashMap<[i32; 3], usize>,
}

impl TsdfVolume {
    /// Creates an empty volume whose integration domain is the axis-aligned
    /// world box `[domain_min, domain_max]`.
    pub fn new(
        config: GridConfig,
        tau: f64,
        domain_min: Vec3,
        domain_max: Vec3,
    ) -> Result<Self, TsdfError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(TsdfError::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        let lo = config.world_to_voxel(&domain_min);
        let hi = config.world_to_voxel(&domain_max);
        let vmin = [lo.x.floor() as i32, lo.y.floor() as i32, lo.z.floor() as i32];
        let vmax = [hi.x.floor() as i32, hi.y.floor() as i32, hi.z.floor() as i32];
        if (0..3).any(|k| vmax[k] < vmin[k]) {
            return Err(TsdfError::InvalidConfig("empty integration domain".into()));
        }
        Ok(Self { config, tau, vmin, vmax, blocks: Vec::new(), index: HashMap::new() })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Clamped mean distance and accumulated weight, `None` until observed.
    pub fn value_weight(&self, g: [i32; 3]) -> Option<(f64, f64)> {
        let &bi = self.index.get(&self.config.block_of(g))?;
        let slot = self.config.slot_of(g);
        let block = &self.blocks[bi].1;
        let w = block.weight[slot];
        (w > 0.0).then(|| (block.sum[slot] / w, w))
    }

    /// Visits every observed voxel in deterministic (block-sorted) order.
    pub fn for_each_observed(&self, mut f: impl FnMut([i32; 3], f64, f64)) {
        let mut keys: Vec<usize> = (0..self.blocks.len()).collect();
        keys.sort_unstable_by_key(|&bi| self.blocks[bi].0);
        let b = self.config.block_size as i32;
        for bi in keys {
            let (key, block) = &self.blocks[bi];
            let base = [key[0] * b, key[1] * b, key[2] * b];
            for (slot, &w) in block.weight.iter().enumerate() {
                if w > 0.0 {
                    let s = slot as i32;
                    let g = [
                        base[0] + s % b,
                        base[1] + (s / b) % b,
                        base[2] + s / (b * b),
                    ];
                    f(g, block.sum[slot] / w, w);
                }
            }
        }
    }

    /// TSDF values at the active nodes of `grid` (all of which were observed
    /// by construction of the narrow band).
    pub fn values_at_nodes(&self, grid: &VoxelGrid) -> Vec<f64> {
        grid.coords()
            .iter()
            .map(|&g| self.value_weight(g).map(|(v, _)| v).unwrap_or(0.0))
            .collect()
    }

    pub fn observed_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|(_, b)| b.weight.iter().filter(|&&w| w > 0.0).count())
            .sum()
    }

    fn block_range(&self) -> ([i32; 3], [i32; 3]) {
        let bmin = self.config.block_of(self.vmin);
        let bmax = self.config.block_of(self.vmax);
        (bmin, bmax)
    }

    /// Conservative test whether a block's world AABB can project into the
    /// frame. Blocks with any corner behind the camera are accepted.
    fn block_touches_frame(&self, key: [i32; 3], frame: &DepthFrame) -> bool {
        let b = self.config.block_size as i32;
        let inv = frame.pose.inverse();
        let mut umin = f64::INFINITY;
        let mut umax = f64::NEG_INFINITY;
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        for corner in 0..8 {
            let g = [
                key[0] * b + if corner & 1 != 0 { b } else { 0 },
                key[1] * b + if corner & 2 != 0 { b } else { 0 },
                key[2] * b + if corner & 4 != 0 { b } else { 0 },
            ];
            let w = self.config.voxel_to_world(&Vec3::new(g[0] as f64, g[1] as f64, g[2] as f64));
            let c = inv.transform_point(&w);
            if c.z <= 0.0 {
                return true;
            }
            umin = umin.min(frame.intrinsics.fx * c.x / c.z + frame.intrinsics.cx);
            umax = umax.max(frame.intrinsics.fx * c.x / c.z + frame.intrinsics.cx);
            vmin = vmin.min(frame.intrinsics.fy * c.y / c.z + frame.intrinsics.cy);
            vmax = vmax.max(frame.intrinsics.fy * c.y / c.z + frame.intrinsics.cy);
        }
        umax >= -1.0 && umin <= frame.width as f64 && vmax >= -1.0 && vmin <= frame.height as f64
    }

    /// Integrates one depth frame with the standard weighted-average rule and
    /// constant per-update weight 1. Voxels behind the surface beyond `-tau`
    /// or outside the frustum are untouched.
    pub fn integrate_frame(&mut self, frame: &DepthFrame) {
        // Allocate blocks that may receive updates, in deterministic order.
        let (bmin, bmax) = self.block_range();
        for bz in bmin[2]..=bmax[2] {
            for by in bmin[1]..=bmax[1] {
                for bx in bmin[0]..=bmax[0] {
                    let key = [bx, by, bz];
                    if !self.index.contains_key(&key) && self.block_touches_frame(key, frame) {
                        self.index.insert(key, self.blocks.len());
                        self.blocks.push((key, TsdfBlock::new(self.config.voxels_per_block())));
                    }
                }
            }
        }

        let inv = frame.pose.inverse();
        let tau = self.tau;
        let cfg = self.config;
        let vmin = self.vmin;
        let vmax = self.vmax;
        let b = cfg.block_size as i32;
        self.blocks.par_iter_mut().for_each(|(key, block)| {
            let base = [key[0] * b, key[1] * b, key[2] * b];
            for slot in 0..block.sum.len() {
                let s = slot as i32;
                let g = [base[0] + s % b, base[1] + (s / b) % b, base[2] + s / (b * b)];
                if (0..3).any(|k| g[k] < vmin[k] || g[k] > vmax[k]) {
                    continue;
                }
                let center = cfg.node_center(g);
                let c = inv.transform_point(&center);
                if c.z <= 0.0 {
                    continue;
                }
                let u = (frame.intrinsics.fx * c.x / c.z + frame.intrinsics.cx).round() as i64;
                let v = (frame.intrinsics.fy * c.y / c.z + frame.intrinsics.cy).round() as i64;
                let Some(d) = frame.depth_at(u, v) else { continue };
                let sdf_raw = d - c.z;
                if sdf_raw > -tau {
                    block.sum[slot] += sdf_raw.clamp(-tau, tau);
                    block.weight[slot] += 1.0;
                }
            }
        });
    }
}

/// Folds `integrate_frame` over the frames in order.
pub fn bootstrap(
    frames: &[DepthFrame],
    config: GridConfig,
    tau: f64,
    domain_min: Vec3,
    domain_max: Vec3,
) -> Result<TsdfVolume, TsdfError> {
    let mut volume = TsdfVolume::new(config, tau, domain_min, domain_max)?;
    for frame in frames {
        volume.integrate_frame(frame);
    }
    if volume.observed_count() == 0 {
        return Err(TsdfError::NoObservations);
    }
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, RigidTransform};
    use approx::assert_relative_eq;

    fn wall_frame(depth: f32, frame_id: u32) -> DepthFrame {
        let k = Intrinsics::new(60.0, 60.0, 31.5, 23.5).unwrap();
        DepthFrame::new(64, 48, vec![depth; 64 * 48], k, RigidTransform::identity(), frame_id)
            .unwrap()
    }

    fn small_volume(tau: f64) -> TsdfVolume {
        let cfg = GridConfig::new(Vec3::new(-0.5, -0.5, 1.5), 0.05, 8).unwrap();
        TsdfVolume::new(cfg, tau, Vec3::new(-0.45, -0.45, 1.55), Vec3::new(0.45, 0.45, 2.45))
            .unwrap()
    }

    #[test]
    fn on_surface_voxel_moves_toward_zero() {
        let mut vol = small_volume(0.2);
        vol.integrate_frame(&wall_frame(2.0, 0));
        // Voxel whose center sits at z = 2.025 (closest to the wall).
        let g = vol.config().world_to_voxel(&Vec3::new(0.0, 0.0, 2.0));
        let g = [g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32];
        let (v, w) = vol.value_weight(g).unwrap();
        assert!(w > 0.0);
        assert!(v.abs() <= 0.5 * 0.05, "value {v} not near surface");
    }

    #[test]
    fn far_front_voxel_clamps_to_tau() {
        let tau = 0.2;
        let mut vol = small_volume(tau);
        vol.integrate_frame(&wall_frame(2.4, 0));
        // 2 tau in front of the observed surface.
        let (v, _) = vol.value_weight([9, 9, 0]).unwrap();
        assert_relative_eq!(v, tau, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_raw_values_average_to_zero() {
        let tau = 0.2;
        let a = 0.07;
        let mut vol = small_volume(tau);
        // Voxel at center ~(0, 0, z0); two walls placed symmetrically.
        let g = [9, 9, 5];
        let z0 = vol.config().node_center(g).z;
        vol.integrate_frame(&wall_frame((z0 + a) as f32, 0));
        vol.integrate_frame(&wall_frame((z0 - a) as f32, 1));
        let (v, w) = vol.value_weight(g).unwrap();
        assert_relative_eq!(w, 2.0);
        assert!(v.abs() < 1e-9, "expected symmetric average 0, got {v}");
    }

    #[test]
    fn clamp_invariant_holds_everywhere() {
        let tau = 0.2;
        let mut vol = small_volume(tau);
        for (i, d) in [1.8f32, 2.0, 2.3, 2.6].iter().enumerate() {
            vol.integrate_frame(&wall_frame(*d, i as u32));
        }
        vol.for_each_observed(|_, v, _| assert!(v.abs() <= tau + 1e-12));
    }

    #[test]
    fn weighted_average_identity() {
        let tau = 0.2;
        let mut vol = small_volume(tau);
        let raws = [2.31f32, 2.02, 1.94, 2.2];
        for (i, d) in raws.iter().enumerate() {
            vol.integrate_frame(&wall_frame(*d, i as u32));
        }
        let g = [9, 9, 5];
        let z = vol.config().node_center(g).z;
        let expect: f64 = raws
            .iter()
            .map(|&d| ((d as f64) - z).clamp(-tau, tau))
            .sum::<f64>()
            / raws.len() as f64;
        let (v, w) = vol.value_weight(g).unwrap();
        assert_relative_eq!(w, 4.0);
        assert_relative_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn frame_order_does_not_matter() {
        let cfg = GridConfig::new(Vec3::new(-0.5, -0.5, 1.5), 0.05, 8).unwrap();
        let dmin = Vec3::new(-0.45, -0.45, 1.55);
        let dmax = Vec3::new(0.45, 0.45, 2.45);
        let frames: Vec<DepthFrame> =
            [2.31f32, 2.02, 1.94, 2.2].iter().enumerate().map(|(i, &d)| wall_frame(d, i as u32)).collect();
        let fwd = bootstrap(&frames, cfg, 0.2, dmin, dmax).unwrap();
        let rev: Vec<DepthFrame> = frames.into_iter().rev().collect();
        let bwd = bootstrap(&rev, cfg, 0.2, dmin, dmax).unwrap();

        let mut checked = 0;
        fwd.for_each_observed(|g, v, w| {
            let (v2, w2) = bwd.value_weight(g).unwrap();
            assert_relative_eq!(v, v2, epsilon = 1e-12);
            assert_relative_eq!(w, w2);
            checked += 1;
        });
        assert!(checked > 0);
    }

    #[test]
    fn wall_zero_crossing_matches_plane() {
        let mut vol = small_volume(0.2);
        vol.integrate_frame(&wall_frame(2.0, 0));
        // Walk the central z-column and locate the sign change.
        let mut found = false;
        for z in 0..17 {
            let a = vol.value_weight([9, 9, z]);
            let b = vol.value_weight([9, 9, z + 1]);
            if let (Some((va, _)), Some((vb, _))) = (a, b) {
                if va > 0.0 && vb <= 0.0 {
                    let za = vol.config().node_center([9, 9, z]).z;
                    let zb = vol.config().node_center([9, 9, z + 1]).z;
                    let cross = za + (zb - za) * va / (va - vb);
                    assert!(
                        (cross - 2.0).abs() < 0.5 * 0.05,
                        "crossing {cross} vs plane 2.0"
                    );
                    found = true;
                }
            }
        }
        assert!(found, "no zero crossing found along the central column");
    }

    #[test]
    fn empty_frustum_overlap_is_no_observations() {
        // Domain entirely behind the camera.
        let cfg = GridConfig::new(Vec3::new(0.0, 0.0, -3.0), 0.05, 8).unwrap();
        let frames = vec![wall_frame(2.0, 0)];
        let err = bootstrap(&frames, cfg, 0.2, Vec3::new(0.0, 0.0, -3.0), Vec3::new(0.4, 0.4, -2.6));
        assert!(matches!(err, Err(TsdfError::NoObservations)));
    }
}
