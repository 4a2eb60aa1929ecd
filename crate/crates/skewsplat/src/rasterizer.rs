//! Tile-scheduled software rasterizer with signed-opacity alpha blending.
//!
//! Pixels blend front-to-back over depth-sorted footprints:
//!
//! ```text
//! C(u) = sum_i c_i a_i(u) prod_{j<i} (1 - a_j(u)),   a_i = o_i * SN2D_i(u)
//! ```
//!
//! with `o_i = tanh(opacity_raw) in (-1, 1)` and `a_i` clamped to
//! (-ALPHA_CLAMP, ALPHA_CLAMP), so `1 - a_i` stays positive and transmittance
//! never changes sign (it can exceed 1 through negative splats).
//!
//! Tiles are pure scheduling: whether a footprint contributes to a pixel is
//! decided by the footprint's own truncation disc around `bbox_center`, so
//! images are bit-identical for any tile size and any thread count (per-tile
//! results are merged in fixed tile order).

use rayon::prelude::*;

use nalgebra::Vector2;

use crate::camera::{
    bbox_tiles, project, CameraModel, ProjectOptions, SplatFootprint2D, RADIUS_MULT,
};
use crate::error::SplatError;
use crate::snkernel::{std_normal_cdf, Primitive3D};

/// Alpha magnitude clamp; keeps `1 - a` in [0.01, 1.99].
pub const ALPHA_CLAMP: f64 = 0.99;
/// Transmittance threshold for early termination.
pub const T_MIN: f64 = 1e-4;
/// Default tile edge in pixels.
pub const TILE_SIZE: usize = 16;
/// Default cap on blended contributions per pixel.
pub const MAX_HITS_PER_PIXEL: usize = 512;

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub tile_size: usize,
    pub t_min: f64,
    pub radius_mult: f64,
    pub background: [f64; 3],
    pub retain_for_backward: bool,
    pub max_hits_per_pixel: usize,
    /// Kept for API clarity; the renderer is bit-deterministic regardless.
    pub deterministic: bool,
    pub project: ProjectOptions,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: TILE_SIZE,
            t_min: T_MIN,
            radius_mult: RADIUS_MULT,
            background: [0.0; 3],
            retain_for_backward: false,
            max_hits_per_pixel: MAX_HITS_PER_PIXEL,
            deterministic: true,
            project: ProjectOptions::default(),
        }
    }
}

/// One blended contribution, enough to replay the pixel in the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct HitRecord {
    /// Index into `RenderBuffers::footprints`.
    pub slot: u32,
    /// Clamped signed alpha.
    pub alpha: f64,
    /// Kernel value SN2D(u).
    pub sn: f64,
    /// Alpha hit the clamp; gradient through it is zero.
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, f64 in scene units.
    pub color: Vec<f64>,
    pub final_t: Vec<f64>,
    pub contrib_count: Vec<u32>,
    /// Visible primitives as (original index, footprint), depth order not implied.
    pub footprints: Vec<(usize, SplatFootprint2D)>,
    /// Footprint slots per tile, depth-sorted (ties by primitive index).
    pub tile_lists: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    /// Per-pixel blend records, present when retain_for_backward was set.
    pub hits: Option<Vec<Vec<HitRecord>>>,
    pub culled: usize,
    pub d_clamp_count: usize,
    pub overflow_count: usize,
}

impl RenderBuffers {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Indices 0..n sorted by ascending depth, ties by index.
pub fn depth_sort(depths: &[f64]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..depths.len() as u32).collect();
    idx.sort_unstable_by(|&i, &j| {
        depths[i as usize]
            .partial_cmp(&depths[j as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx
}

/// 2D kernel value `G2(u - mu2d; Omega2d) * Phi(m2d^T (u - mu2d))`.
pub fn eval_sn2d(u: &Vector2<f64>, fp: &SplatFootprint2D) -> f64 {
    let d = u - fp.mu2d;
    let q = (fp.omega2d_inv * d).dot(&d);
    (-0.5 * q).exp() * std_normal_cdf(fp.m2d.dot(&d))
}

struct TilePatch {
    color: Vec<f64>,
    final_t: Vec<f64>,
    contrib: Vec<u32>,
    hits: Option<Vec<Vec<HitRecord>>>,
    overflow: usize,
}

/// Renders the scene. Pure function of its inputs; bit-reproducible across
/// runs, tile sizes and thread counts.
pub fn render(
    prims: &[Primitive3D],
    cam: &CameraModel,
    opts: &RenderOptions,
) -> Result<RenderBuffers, SplatError> {
    let (w, h) = (cam.width, cam.height);
    let ts = opts.tile_size.max(1);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);

    // Project every primitive; culled ones are skipped, degenerate ones error.
    let mut footprints: Vec<(usize, SplatFootprint2D)> = Vec::with_capacity(prims.len());
    let mut culled = 0usize;
    let mut d_clamp_count = 0usize;
    for (i, prim) in prims.iter().enumerate() {
        match project(prim, cam, &opts.project) {
            Ok(Some(fp)) => {
                if fp.d_clamped {
                    d_clamp_count += 1;
                }
                footprints.push((i, fp));
            }
            Ok(None) => culled += 1,
            Err(SplatError::DegeneratePrimitive { reason, .. }) => {
                return Err(SplatError::DegeneratePrimitive { index: i, reason })
            }
            Err(e) => return Err(e),
        }
    }

    let depths: Vec<f64> = footprints.iter().map(|(_, fp)| fp.depth).collect();
    let order = depth_sort(&depths);

    // Tile lists inherit depth order by construction.
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut radius2: Vec<f64> = vec![0.0; footprints.len()];
    for &slot in &order {
        let fp = &footprints[slot as usize].1;
        let r = fp.radius(opts.radius_mult);
        radius2[slot as usize] = r * r;
        if let Some(rect) = bbox_tiles(fp, opts.radius_mult, ts, w, h) {
            for ty in rect.y0..=rect.y1 {
                for tx in rect.x0..=rect.x1 {
                    tile_lists[ty * tiles_x + tx].push(slot);
                }
            }
        }
    }

    let opacity: Vec<f64> = footprints
        .iter()
        .map(|(i, _)| prims[*i].opacity())
        .collect();
    let colors: Vec<[f64; 3]> = footprints
        .iter()
        .map(|(i, _)| {
            let c = prims[*i].color;
            [c[0], c[1], c[2]]
        })
        .collect();

    let patches: Vec<TilePatch> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let pw = (w - x0).min(ts);
            let ph = (h - y0).min(ts);
            let list = &tile_lists[tile];

            let mut patch = TilePatch {
                color: vec![0.0; pw * ph * 3],
                final_t: vec![1.0; pw * ph],
                contrib: vec![0; pw * ph],
                hits: opts.retain_for_backward.then(|| vec![Vec::new(); pw * ph]),
                overflow: 0,
            };

            for py in 0..ph {
                for px in 0..pw {
                    let u = Vector2::new((x0 + px) as f64 + 0.5, (y0 + py) as f64 + 0.5);
                    let pi = py * pw + px;
                    let mut t = 1.0f64;
                    let mut c = [0.0f64; 3];
                    let mut n_hits = 0u32;
                    // Last two post-blend transmittances, for the
                    // monotone-termination guard.
                    let (mut t_prev1, mut t_prev2) = (f64::INFINITY, f64::INFINITY);
                    for &slot in list {
                        let s = slot as usize;
                        let fp = &footprints[s].1;
                        let dd = u - fp.bbox_center;
                        if dd.dot(&dd) > radius2[s] {
                            continue;
                        }
                        let sn = eval_sn2d(&u, fp);
                        let raw = opacity[s] * sn;
                        let alpha = raw.clamp(-ALPHA_CLAMP, ALPHA_CLAMP);
                        let clamped = alpha != raw;
                        for ch in 0..3 {
                            c[ch] += colors[s][ch] * alpha * t;
                        }
                        t *= 1.0 - alpha;
                        n_hits += 1;
                        if let Some(hits) = &mut patch.hits {
                            hits[pi].push(HitRecord {
                                slot,
                                alpha,
                                sn,
                                clamped,
                            });
                        }
                        if n_hits as usize >= opts.max_hits_per_pixel {
                            patch.overflow += 1;
                            break;
                        }
                        if t < opts.t_min && t <= t_prev1 && t_prev1 <= t_prev2 {
                            break;
                        }
                        t_prev2 = t_prev1;
                        t_prev1 = t;
                    }
                    for ch in 0..3 {
                        patch.color[pi * 3 + ch] = c[ch] + opts.background[ch] * t;
                    }
                    patch.final_t[pi] = t;
                    patch.contrib[pi] = n_hits;
                }
            }
            patch
        })
        .collect();

    // Disjoint patches merged in tile order.
    let mut buffers = RenderBuffers {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        final_t: vec![1.0; w * h],
        contrib_count: vec![0; w * h],
        footprints,
        tile_lists,
        tiles_x,
        tiles_y,
        tile_size: ts,
        hits: opts.retain_for_backward.then(|| vec![Vec::new(); w * h]),
        culled,
        d_clamp_count,
        overflow_count: 0,
    };
    for (tile, patch) in patches.into_iter().enumerate() {
        let tx = tile % tiles_x;
        let ty = tile / tiles_x;
        let x0 = tx * ts;
        let y0 = ty * ts;
        let pw = (w - x0).min(ts);
        let ph = (h - y0).min(ts);
        buffers.overflow_count += patch.overflow;
        for py in 0..ph {
            let row = (y0 + py) * w + x0;
            for px in 0..pw {
                let pi = py * pw + px;
                for ch in 0..3 {
                    buffers.color[(row + px) * 3 + ch] = patch.color[pi * 3 + ch];
                }
                buffers.final_t[row + px] = patch.final_t[pi];
                buffers.contrib_count[row + px] = patch.contrib[pi];
            }
        }
        if let Some(hits) = patch.hits {
            let dst = buffers.hits.as_mut().unwrap();
            for (pi, recs) in hits.into_iter().enumerate() {
                let (py, px) = (pi / pw, pi % pw);
                dst[(y0 + py) * w + (x0 + px)] = recs;
            }
        }
    }
    Ok(buffers)
}
