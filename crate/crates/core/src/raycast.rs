//! CPU volume raycaster with front-to-back compositing, early ray
//! termination, empty-space skipping, central-difference shading and
//! optional single scattering.
//!
//! Every render reports both wall time and deterministic sample counts. The
//! counts depend only on the inputs, never on timing or thread count, which
//! makes them usable as a reproducible cost target.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, CameraPose, DEFAULT_FOV_DEG};
use crate::transfer::{OpacityLut, TransferFunction};
use crate::util;
use crate::volume::Volume;

pub const DELTA_MIN: f32 = 0.25;
pub const DELTA_MAX: f32 = 4.0;
pub const DELTA_REF: f32 = 1.0;
/// Samples whose tabulated opacity is at or below this are transparent;
/// blocks whose maximum is at or below it are skipped.
pub const OPACITY_EPS: f32 = 1e-4;
const AMBIENT: f32 = 0.3;
const DIFFUSE: f32 = 0.7;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("step size {0} outside [{DELTA_MIN}, {DELTA_MAX}]")]
    StepSizeOutOfRange(f32),
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, RenderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Ray step in voxel spacings.
    pub step_size: f32,
    pub ert_threshold: f32,
    pub ess_enabled: bool,
    pub ess_block: usize,
    pub scattering: bool,
    pub scatter_threshold: f32,
    /// Direction towards the light.
    pub light_dir: [f32; 3],
    pub width: usize,
    pub height: usize,
    pub background: [f32; 3],
    pub fov_deg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let l = 1.0 / 3f32.sqrt();
        Self {
            step_size: DELTA_REF,
            ert_threshold: 0.99,
            ess_enabled: true,
            ess_block: 8,
            scattering: false,
            scatter_threshold: 0.25,
            light_dir: [l, l, l],
            width: 256,
            height: 256,
            background: [0.0; 3],
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

impl RenderConfig {
    pub fn with_image(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_step(mut self, step: f32) -> Self {
        self.step_size = step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(DELTA_MIN..=DELTA_MAX).contains(&self.step_size) {
            return Err(RenderError::StepSizeOutOfRange(self.step_size));
        }
        let bad = |m: &str| Err(RenderError::InvalidConfig(m.to_string()));
        if !(self.ert_threshold > 0.0 && self.ert_threshold <= 1.0) {
            return bad("ert_threshold must lie in (0, 1]");
        }
        if !(self.scatter_threshold > 0.0 && self.scatter_threshold <= 1.0) {
            return bad("scatter_threshold must lie in (0, 1]");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dims must be positive");
        }
        if self.ess_block == 0 {
            return bad("ess_block must be positive");
        }
        let n = self.light_dir.iter().map(|c| c * c).sum::<f32>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return bad("light_dir must be a unit vector");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    pub wall_ms: f64,
    pub samples_primary: u64,
    pub samples_shadow: u64,
    pub rays_ert_terminated: u64,
    pub rays_total: u64,
}

impl RenderStats {
    pub fn samples_total(&self) -> u64 {
        self.samples_primary + self.samples_shadow
    }

    /// True when all deterministic counters agree.
    pub fn same_counts(&self, other: &Self) -> bool {
        self.samples_primary == other.samples_primary
            && self.samples_shadow == other.samples_shadow
            && self.rays_ert_terminated == other.rays_ert_terminated
            && self.rays_total == other.rays_total
    }

    fn add(&mut self, o: &RowStats) {
        self.samples_primary += o.primary;
        self.samples_shadow += o.shadow;
        self.rays_ert_terminated += o.terminated;
        self.rays_total += o.rays;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl Frame {
    pub fn write_png<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.rgba)?;
        writer.finish()?;
        Ok(())
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_png(&mut buf)?;
        Ok(buf)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_png(f)
    }

    /// Largest per-channel difference, in 8-bit levels.
    pub fn max_channel_diff(&self, other: &Frame) -> u8 {
        self.rgba
            .iter()
            .zip(&other.rgba)
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0)
    }
}

/// Per-block opacity maxima for empty-space skipping.
#[derive(Debug, Clone, PartialEq)]
pub struct EssGrid {
    pub block: usize,
    pub blocks: [usize; 3],
    pub max_opacity: Vec<f32>,
}

impl EssGrid {
    #[inline]
    fn is_empty(&self, b: [usize; 3]) -> bool {
        self.max_opacity[b[0] + self.blocks[0] * (b[1] + self.blocks[1] * b[2])] <= OPACITY_EPS
    }

    pub fn empty_count(&self) -> usize {
        self.max_opacity.iter().filter(|&&m| m <= OPACITY_EPS).count()
    }
}

/// Min/max of unit values over every block footprint, padded by one voxel
/// so it covers all voxels trilinear interpolation can reach from inside the
/// block.
#[derive(Debug, Clone)]
struct BlockRanges {
    block: usize,
    blocks: [usize; 3],
    ranges: Vec<(f32, f32)>,
}

impl BlockRanges {
    fn new(dims: [usize; 3], unit: &[f32], block: usize) -> Self {
        let blocks = dims.map(|d| d.div_ceil(block));
        let mut ranges = Vec::with_capacity(blocks.iter().product());
        for bz in 0..blocks[2] {
            for by in 0..blocks[1] {
                for bx in 0..blocks[0] {
                    let lo = [bx * block, by * block, bz * block];
                    let hi: [usize; 3] = std::array::from_fn(|k| (lo[k] + block).min(dims[k] - 1));
                    let mut mn = f32::INFINITY;
                    let mut mx = f32::NEG_INFINITY;
                    for z in lo[2]..=hi[2] {
                        for y in lo[1]..=hi[1] {
                            let row = dims[0] * (y + dims[1] * z);
                            for &v in &unit[row + lo[0]..=row + hi[0]] {
                                mn = mn.min(v);
                                mx = mx.max(v);
                            }
                        }
                    }
                    ranges.push((mn, mx));
                }
            }
        }
        Self { block, blocks, ranges }
    }

    fn grid(&self, lut: &OpacityLut) -> EssGrid {
        EssGrid {
            block: self.block,
            blocks: self.blocks,
            max_opacity: self.ranges.iter().map(|&(lo, hi)| lut.max_opacity_in(lo, hi)).collect(),
        }
    }
}

/// Builds the skipping grid for one transfer function. Must be rebuilt
/// whenever the LUT changes.
pub fn precompute_ess_grid(v: &Volume, lut: &OpacityLut, block: usize) -> EssGrid {
    BlockRanges::new(v.dims(), &v.to_unit(), block.max(1)).grid(lut)
}

/// A volume prepared for repeated rendering: unit-range values plus cached
/// block value ranges.
#[derive(Debug, Clone)]
pub struct Renderer {
    dims: [usize; 3],
    unit: Vec<f32>,
    ranges: Vec<BlockRanges>,
}

#[derive(Default, Clone, Copy)]
struct RowStats {
    primary: u64,
    shadow: u64,
    terminated: u64,
    rays: u64,
}

struct Ctx<'a> {
    dims: [usize; 3],
    maxc: [f32; 3],
    unit: &'a [f32],
    lut: &'a OpacityLut,
    grid: Option<&'a EssGrid>,
    cfg: &'a RenderConfig,
    cam: Camera,
    opacity_exp: f32,
    shadow_exp: f32,
}

impl Renderer {
    pub fn new(v: &Volume) -> Self {
        Self { dims: v.dims(), unit: v.to_unit(), ranges: Vec::new() }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn ranges(&self, block: usize) -> std::borrow::Cow<'_, BlockRanges> {
        match self.ranges.iter().find(|r| r.block == block) {
            Some(r) => std::borrow::Cow::Borrowed(r),
            None => std::borrow::Cow::Owned(BlockRanges::new(self.dims, &self.unit, block)),
        }
    }

    /// Caches block ranges for `block` so later renders skip recomputation.
    pub fn with_block(mut self, block: usize) -> Self {
        if !self.ranges.iter().any(|r| r.block == block) {
            self.ranges.push(BlockRanges::new(self.dims, &self.unit, block.max(1)));
        }
        self
    }

    /// Full render: frame plus statistics.
    pub fn render(&self, tf: &TransferFunction, pose: &CameraPose, cfg: &RenderConfig) -> Result<(Frame, RenderStats)> {
        cfg.validate()?;
        let start = Instant::now();
        let lut = tf.bake_lut();
        let grid = cfg.ess_enabled.then(|| self.ranges(cfg.ess_block).grid(&lut));
        let ctx = self.ctx(&lut, grid.as_ref(), pose, cfg);
        let rows: Vec<(Vec<u8>, RowStats)> = (0..cfg.height)
            .into_par_iter()
            .map(|j| {
                let mut px = Vec::with_capacity(cfg.width * 4);
                let mut st = RowStats::default();
                for i in 0..cfg.width {
                    let rgb = ctx.trace::<true>(i, j, &mut st);
                    px.extend(rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
                    px.push(255);
                }
                (px, st)
            })
            .collect();
        let mut stats = RenderStats::default();
        let mut rgba = Vec::with_capacity(cfg.width * cfg.height * 4);
        for (px, st) in &rows {
            rgba.extend_from_slice(px);
            stats.add(st);
        }
        stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok((Frame { width: cfg.width, height: cfg.height, rgba }, stats))
    }

    /// Marches the same rays as [`Renderer::render`] without shading or
    /// frame output; the sample counts are identical.
    pub fn cost(&self, tf: &TransferFunction, pose: &CameraPose, cfg: &RenderConfig) -> Result<RenderStats> {
        cfg.validate()?;
        let start = Instant::now();
        let lut = tf.bake_lut();
        let grid = cfg.ess_enabled.then(|| self.ranges(cfg.ess_block).grid(&lut));
        let ctx = self.ctx(&lut, grid.as_ref(), pose, cfg);
        let rows: Vec<RowStats> = (0..cfg.height)
            .into_par_iter()
            .map(|j| {
                let mut st = RowStats::default();
                for i in 0..cfg.width {
                    ctx.trace::<false>(i, j, &mut st);
                }
                st
            })
            .collect();
        let mut stats = RenderStats::default();
        rows.iter().for_each(|r| stats.add(r));
        stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(stats)
    }

    fn ctx<'a>(&'a self, lut: &'a OpacityLut, grid: Option<&'a EssGrid>, pose: &CameraPose, cfg: &'a RenderConfig) -> Ctx<'a> {
        Ctx {
            dims: self.dims,
            maxc: self.dims.map(|d| (d - 1) as f32),
            unit: &self.unit,
            lut,
            grid,
            cfg,
            cam: Camera::new(pose, self.dims, (cfg.width, cfg.height), cfg.fov_deg),
            // Opacity correction relative to a one-voxel reference step.
            opacity_exp: cfg.step_size,
            shadow_exp: 2.0 * cfg.step_size,
        }
    }
}

/// Convenience wrapper preparing the volume for a single render.
pub fn render(v: &Volume, tf: &TransferFunction, pose: &CameraPose, cfg: &RenderConfig) -> Result<(Frame, RenderStats)> {
    Renderer::new(v).render(tf, pose, cfg)
}

/// Slab test against the box `[0, maxc]`; returns the parametric interval.
#[inline]
fn intersect_box(o: [f32; 3], d: [f32; 3], maxc: [f32; 3]) -> Option<(f32, f32)> {
    let mut t0 = 0.0f32;
    let mut t1 = f32::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k] < 0.0 || o[k] > maxc[k] {
                return None;
            }
        } else {
            let inv = 1.0 / d[k];
            let (a, b) = ((0.0 - o[k]) * inv, (maxc[k] - o[k]) * inv);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

impl Ctx<'_> {
    #[inline]
    fn fetch(&self, p: [f32; 3]) -> f32 {
        let [w, h, d] = self.dims;
        let cx = p[0].clamp(0.0, self.maxc[0]);
        let cy = p[1].clamp(0.0, self.maxc[1]);
        let cz = p[2].clamp(0.0, self.maxc[2]);
        let (x0, y0, z0) = (cx as usize, cy as usize, cz as usize);
        let dx = usize::from(x0 + 1 < w);
        let dy = if y0 + 1 < h { w } else { 0 };
        let dz = if z0 + 1 < d { w * h } else { 0 };
        let (fx, fy, fz) = (cx - x0 as f32, cy - y0 as f32, cz - z0 as f32);
        let i = x0 + w * (y0 + h * z0);
        let u = self.unit;
        let c00 = u[i] + (u[i + dx] - u[i]) * fx;
        let c10 = u[i + dy] + (u[i + dy + dx] - u[i + dy]) * fx;
        let c01 = u[i + dz] + (u[i + dz + dx] - u[i + dz]) * fx;
        let c11 = u[i + dz + dy] + (u[i + dz + dy + dx] - u[i + dz + dy]) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        c0 + (c1 - c0) * fz
    }

    #[inline]
    fn gradient(&self, p: [f32; 3]) -> [f32; 3] {
        std::array::from_fn(|k| {
            let mut a = p;
            let mut b = p;
            a[k] += 1.0;
            b[k] -= 1.0;
            0.5 * (self.fetch(a) - self.fetch(b))
        })
    }

    /// Opacity accumulated towards the light, stopping at the scattering
    /// threshold. Shadow rays step at twice the primary step.
    fn shadow(&self, p: [f32; 3], st: &mut RowStats) -> f32 {
        let l = self.cfg.light_dir;
        let Some((_, t1)) = intersect_box(p, l, self.maxc) else { return 0.0 };
        let step = 2.0 * self.cfg.step_size;
        let mut a = 0.0f32;
        let mut t = step;
        while t <= t1 {
            let q = [p[0] + t * l[0], p[1] + t * l[1], p[2] + t * l[2]];
            st.shadow += 1;
            let alpha = self.lut.opacity_linear(self.fetch(q));
            if alpha > OPACITY_EPS {
                let corrected = 1.0 - (1.0 - alpha).powf(self.shadow_exp);
                a += (1.0 - a) * corrected;
                if a >= self.cfg.scatter_threshold {
                    break;
                }
            }
            t += step;
        }
        a
    }

    fn trace<const SHADE: bool>(&self, i: usize, j: usize, st: &mut RowStats) -> [f32; 3] {
        st.rays += 1;
        let bg = self.cfg.background;
        let eye = self.cam.eye.map(|c| c as f32);
        let dir = self.cam.direction(i, j).map(|c| c as f32);
        let Some((t0, t1)) = intersect_box(eye, dir, self.maxc) else { return bg };
        let delta = self.cfg.step_size;
        let n_steps = ((t1 - t0) / delta).floor() as u64 + 1;
        let mut color = [0.0f32; 3];
        let mut a = 0.0f32;
        let mut k = 0u64;
        while k < n_steps {
            let t = t0 + k as f32 * delta;
            let p = [eye[0] + t * dir[0], eye[1] + t * dir[1], eye[2] + t * dir[2]];
            if let Some(grid) = self.grid {
                let b = grid.block as f32;
                let cell: [usize; 3] = std::array::from_fn(|c| {
                    ((p[c].clamp(0.0, self.maxc[c]) / b) as usize).min(grid.blocks[c] - 1)
                });
                if grid.is_empty(cell) {
                    let mut t_exit = f32::INFINITY;
                    for c in 0..3 {
                        if dir[c] > 1e-12 {
                            t_exit = t_exit.min(((cell[c] + 1) as f32 * b - eye[c]) / dir[c]);
                        } else if dir[c] < -1e-12 {
                            t_exit = t_exit.min((cell[c] as f32 * b - eye[c]) / dir[c]);
                        }
                    }
                    let next = ((t_exit - t0) / delta).ceil();
                    k = if next.is_finite() && next > k as f32 { next as u64 } else { k + 1 };
                    continue;
                }
            }
            st.primary += 1;
            let s = self.fetch(p);
            let alpha = self.lut.opacity_linear(s);
            if alpha > OPACITY_EPS {
                let corrected = 1.0 - (1.0 - alpha).powf(self.opacity_exp);
                if SHADE {
                    let rgba = self.lut.linear(s);
                    let g = self.gradient(p);
                    let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                    let l = self.cfg.light_dir;
                    let lambert = if gn > 1e-6 {
                        ((g[0] * l[0] + g[1] * l[1] + g[2] * l[2]) / gn).abs()
                    } else {
                        1.0
                    };
                    let mut shade = AMBIENT + DIFFUSE * lambert;
                    if self.cfg.scattering {
                        shade *= 1.0 - self.shadow(p, st);
                    }
                    let w = (1.0 - a) * corrected * shade;
                    color[0] += w * rgba[0];
                    color[1] += w * rgba[1];
                    color[2] += w * rgba[2];
                } else if self.cfg.scattering {
                    self.shadow(p, st);
                }
                a += (1.0 - a) * corrected;
                if a >= self.cfg.ert_threshold {
                    st.terminated += 1;
                    break;
                }
            }
            k += 1;
        }
        [color[0] + (1.0 - a) * bg[0], color[1] + (1.0 - a) * bg[1], color[2] + (1.0 - a) * bg[2]]
    }
}

/// Median-timed result of repeated renders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub wall_ms: f64,
    pub stats: RenderStats,
    pub repeats: usize,
}

/// Runs `run` `repeats` times; wall time is the median, counts come from the
/// first run (they are identical across runs).
pub fn measure_runs<E>(
    repeats: usize,
    mut run: impl FnMut() -> std::result::Result<RenderStats, E>,
) -> std::result::Result<Measurement, E> {
    let repeats = repeats.max(1);
    let mut times = Vec::with_capacity(repeats);
    let mut first: Option<RenderStats> = None;
    for _ in 0..repeats {
        let st = run()?;
        times.push(st.wall_ms);
        if let Some(f) = &first {
            debug_assert!(f.same_counts(&st), "sample counts changed between repeats");
        } else {
            first = Some(st);
        }
    }
    let mut stats = first.expect("at least one run");
    stats.wall_ms = util::median(&times).expect("non-empty");
    Ok(Measurement { wall_ms: stats.wall_ms, stats, repeats })
}

/// Full renders repeated `repeats` times (default 5 in the collectors).
pub fn measure(
    renderer: &Renderer,
    tf: &TransferFunction,
    pose: &CameraPose,
    cfg: &RenderConfig,
    repeats: usize,
) -> Result<Measurement> {
    measure_runs(repeats, || renderer.render(tf, pose, cfg).map(|(_, s)| s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::Lobe;
    use crate::volume::{gen_synthetic, Recipe, ValueRange};

    fn tf(lobes: &[(f32, f32, f32)]) -> TransferFunction {
        TransferFunction::new(lobes.iter().map(|&(c, w, h)| Lobe { center: c, width: w, height: h }).collect()).unwrap()
    }

    fn small_cfg() -> RenderConfig {
        RenderConfig::default().with_image(24, 20)
    }

    fn pose() -> CameraPose {
        CameraPose::new(30.0, 20.0, 1.5).unwrap()
    }

    #[test]
    fn transparent_tf_renders_background() {
        let (v, _) = gen_synthetic(1, [16, 16, 16], Recipe::Blobs).unwrap();
        let mut cfg = small_cfg();
        cfg.ess_enabled = false;
        cfg.background = [0.2, 0.4, 0.6];
        let (frame, stats) = render(&v, &tf(&[(0.5, 0.1, 0.0)]), &pose(), &cfg).unwrap();
        let bg = [51u8, 102, 153, 255];
        assert!(frame.rgba.chunks(4).all(|p| p == bg));
        assert!(stats.samples_primary > 0);
        assert_eq!(stats.rays_ert_terminated, 0);
        assert_eq!(stats.rays_total, 24 * 20);

        cfg.ess_enabled = true;
        let (_, skipped) = render(&v, &tf(&[(0.5, 0.1, 0.0)]), &pose(), &cfg).unwrap();
        assert_eq!(skipped.samples_primary, 0);
    }

    #[test]
    fn opaque_first_sample_terminates_immediately() {
        let v = Volume::constant([16, 16, 16], 1.0, ValueRange::UnitFloat).unwrap();
        let mut cfg = RenderConfig::default().with_image(1, 1);
        cfg.ess_enabled = false;
        let (_, stats) = render(&v, &tf(&[(1.0, 0.1, 1.0)]), &CameraPose::new(0.0, 0.0, 2.0).unwrap(), &cfg).unwrap();
        assert_eq!(stats.rays_total, 1);
        assert_eq!(stats.rays_ert_terminated, 1);
        assert!(stats.samples_primary <= 2);
    }

    #[test]
    fn renders_are_deterministic() {
        let (v, _) = gen_synthetic(2, [20, 20, 20], Recipe::FaultNoise).unwrap();
        let r = Renderer::new(&v);
        let t = tf(&[(0.4, 0.05, 0.6), (0.8, 0.02, 0.9)]);
        let mut cfg = small_cfg();
        cfg.scattering = true;
        let (fa, sa) = r.render(&t, &pose(), &cfg).unwrap();
        let (fb, sb) = r.render(&t, &pose(), &cfg).unwrap();
        assert_eq!(fa, fb);
        assert!(sa.same_counts(&sb));
        assert!(sa.samples_shadow > 0);
        assert!(sa.same_counts(&r.cost(&t, &pose(), &cfg).unwrap()));
    }

    #[test]
    fn ess_preserves_image_and_saves_samples() {
        let (v, _) = gen_synthetic(3, [32, 32, 32], Recipe::Shell).unwrap();
        let r = Renderer::new(&v);
        let t = tf(&[(0.8, 0.01, 0.8)]);
        let mut cfg = small_cfg();
        cfg.ess_enabled = false;
        let (f_off, s_off) = r.render(&t, &pose(), &cfg).unwrap();
        cfg.ess_enabled = true;
        let (f_on, s_on) = r.render(&t, &pose(), &cfg).unwrap();
        assert!(f_on.max_channel_diff(&f_off) <= 1);
        assert!(s_on.samples_primary < s_off.samples_primary);
    }

    #[test]
    fn step_size_is_range_checked() {
        let v = Volume::constant([16, 16, 16], 0.0, ValueRange::UnitFloat).unwrap();
        let cfg = small_cfg().with_step(0.1);
        assert!(matches!(
            render(&v, &tf(&[(0.5, 0.1, 0.5)]), &pose(), &cfg),
            Err(RenderError::StepSizeOutOfRange(_))
        ));
    }

    #[test]
    fn larger_steps_take_fewer_samples() {
        let (v, _) = gen_synthetic(4, [24, 24, 24], Recipe::Blobs).unwrap();
        let r = Renderer::new(&v);
        let t = tf(&[(0.3, 0.1, 0.05)]);
        let mut prev = u64::MAX;
        for step in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let s = r.cost(&t, &pose(), &small_cfg().with_step(step)).unwrap();
            assert!(s.samples_primary <= prev);
            prev = s.samples_primary;
        }
    }

    #[test]
    fn ess_grid_examples() {
        let zero = tf(&[(0.5, 0.1, 0.0)]).bake_lut();
        let (v, _) = gen_synthetic(1, [20, 20, 20], Recipe::Blobs).unwrap();
        let g = precompute_ess_grid(&v, &zero, 8);
        assert_eq!(g.blocks, [3, 3, 3]);
        assert_eq!(g.empty_count(), 27);

        let visible = tf(&[(1.0, 0.05, 1.0)]).bake_lut();
        let whole = precompute_ess_grid(&v, &visible, 20);
        assert_eq!(whole.blocks, [1, 1, 1]);
        assert_eq!(whole.empty_count(), 0);
    }

    #[test]
    fn ess_single_voxel_marks_padded_footprint() {
        // Bright voxel on a block boundary (x = 8) is reachable from blocks
        // 0 and 1 along x; interior along y and z.
        let dims = [24, 24, 24];
        let v = Volume::from_fn(dims, ValueRange::UnitFloat, |x, y, z| {
            if (x, y, z) == (8, 12, 3) { 1.0 } else { 0.0 }
        })
        .unwrap();
        let lut = tf(&[(1.0, 0.01, 1.0)]).bake_lut();
        let g = precompute_ess_grid(&v, &lut, 8);
        // Oracle: a block is non-empty iff the voxel lies in its footprint
        // [b*B, (b+1)*B] on every axis.
        let mut expected = Vec::new();
        for bz in 0..3 {
            for by in 0..3 {
                for bx in 0..3 {
                    let inside = |b: usize, c: usize| c >= b * 8 && c <= (b + 1) * 8;
                    expected.push(!(inside(bx, 8) && inside(by, 12) && inside(bz, 3)));
                }
            }
        }
        let got: Vec<bool> = g.max_opacity.iter().map(|&m| m <= OPACITY_EPS).collect();
        assert_eq!(got, expected);
        assert_eq!(g.max_opacity.len() - g.empty_count(), 2);
    }

    #[test]
    fn measure_uses_median_of_injected_times() {
        let times = [3.0, 9.0, 4.0, 5.0, 100.0];
        let mut i = 0;
        let m = measure_runs::<()>(5, || {
            let st = RenderStats { wall_ms: times[i], samples_primary: 42, ..Default::default() };
            i += 1;
            Ok(st)
        })
        .unwrap();
        assert_eq!(m.wall_ms, 5.0);
        assert_eq!(m.stats.samples_primary, 42);

        let one = measure_runs::<()>(1, || Ok(RenderStats { wall_ms: 7.5, ..Default::default() })).unwrap();
        assert_eq!(one.wall_ms, 7.5);
    }

    #[test]
    fn measure_keeps_counts_across_repeats() {
        let (v, _) = gen_synthetic(6, [16, 16, 16], Recipe::Shell).unwrap();
        let r = Renderer::new(&v);
        let t = tf(&[(0.9, 0.05, 0.7)]);
        let m = measure(&r, &t, &pose(), &small_cfg(), 3).unwrap();
        let single = r.cost(&t, &pose(), &small_cfg()).unwrap();
        assert!(m.stats.same_counts(&single));
        assert_eq!(m.repeats, 3);
    }

    #[test]
    fn png_export_has_signature() {
        let f = Frame { width: 2, height: 1, rgba: vec![0, 0, 0, 255, 255, 255, 255, 255] };
        let bytes = f.png_bytes().unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    }
}
