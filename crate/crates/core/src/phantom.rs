//! Synthetic angiography phantoms.
//!
//! A vessel is a 3D quadratic Bezier centerline carrying a piecewise-linear
//! (trapezoid) diameter profile. Rendering projects the centerline under a
//! two-angle pose and stamps a depth-integrated tube dip onto a bright,
//! noisy background with a linear illumination gradient. The tube falloff
//! is calibrated so that the full width at half of the tube depth equals
//! the geometric diameter in pixels, which is what the width-recovery
//! oracle measures.

use crate::config::PhantomConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

const VOLUME_MAGIC: &[u8; 4] = b"DMQF";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Vessel contrast depth at full opacification (background intensity units).
const TUBE_CONTRAST: f64 = 0.6;
const BACKGROUND: f64 = 0.85;

/// Six-index trapezoid geometry plus rendering pose.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StenosisSpec {
    pub rvd1: f64,
    pub rvd2: f64,
    pub mld: f64,
    pub ll1: f64,
    pub ll2: f64,
    /// Arclength of the lesion minimum along the centerline, mm.
    pub lesion_center_arclen: f64,
    /// Quadratic Bezier control points, mm, centered on the image origin.
    pub control_points: [[f64; 3]; 3],
    /// (rotation about y, rotation about x) in radians.
    pub pose_main: [f64; 2],
    pub pose_support: [f64; 2],
    pub mm_per_pixel: f64,
    pub noise: f64,
    pub contrast_arrival_frame: usize,
}

impl StenosisSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mld > 0.0 && self.mld < self.rvd1.min(self.rvd2)) {
            return Err(Error::Argument(format!(
                "need 0 < MLD < min(RVD1, RVD2); got MLD={}, RVD1={}, RVD2={}",
                self.mld, self.rvd1, self.rvd2
            )));
        }
        if self.ll1 <= 0.0 || self.ll2 <= 0.0 {
            return Err(Error::Argument("lesion lengths must be positive".into()));
        }
        if self.mm_per_pixel <= 0.0 {
            return Err(Error::Argument("mm_per_pixel must be positive".into()));
        }
        Ok(())
    }

    /// Label vector (RVD1, RVD2, RVD, MLD, LL1, LL2) in mm.
    pub fn label(&self) -> Result<Tensor> {
        let rvd = compute_rvd(self.rvd1, self.rvd2, self.ll1, self.ll2)?;
        Ok(Tensor::from_vec(vec![
            self.rvd1, self.rvd2, rvd, self.mld, self.ll1, self.ll2,
        ]))
    }
}

/// One dataset record.
#[derive(Clone, Debug)]
pub struct Sample {
    /// [T, H, W]
    pub main: Tensor,
    /// [T, H, W]
    pub support: Tensor,
    /// [H, W]
    pub keyframe: Tensor,
    /// [6]
    pub label: Tensor,
}

/// Length-weighted mean reference diameter:
/// RVD = (RVD2*LL1 + RVD1*LL2) / (LL1 + LL2).
pub fn compute_rvd(rvd1: f64, rvd2: f64, ll1: f64, ll2: f64) -> Result<f64> {
    if ll1 <= 0.0 || ll2 <= 0.0 {
        return Err(Error::Argument("lesion lengths must be positive".into()));
    }
    if rvd1 <= 0.0 || rvd2 <= 0.0 {
        return Err(Error::Argument("reference diameters must be positive".into()));
    }
    Ok((rvd2 * ll1 + rvd1 * ll2) / (ll1 + ll2))
}

// ── centerline geometry ──────────────────────────────────────────────

/// Quadratic Bezier centerline, resampled to an arclength table.
pub(crate) struct Centerline {
    points: Vec<[f64; 3]>,
    cumlen: Vec<f64>,
}

const CENTERLINE_SAMPLES: usize = 1024;

impl Centerline {
    pub(crate) fn new(control: &[[f64; 3]; 3]) -> Self {
        let bez = |u: f64| -> [f64; 3] {
            let w0 = (1.0 - u) * (1.0 - u);
            let w1 = 2.0 * (1.0 - u) * u;
            let w2 = u * u;
            [
                w0 * control[0][0] + w1 * control[1][0] + w2 * control[2][0],
                w0 * control[0][1] + w1 * control[1][1] + w2 * control[2][1],
                w0 * control[0][2] + w1 * control[1][2] + w2 * control[2][2],
            ]
        };
        let mut points = Vec::with_capacity(CENTERLINE_SAMPLES + 1);
        let mut cumlen = Vec::with_capacity(CENTERLINE_SAMPLES + 1);
        let mut acc = 0.0;
        for i in 0..=CENTERLINE_SAMPLES {
            let p = bez(i as f64 / CENTERLINE_SAMPLES as f64);
            if let Some(prev) = points.last() {
                let prev: &[f64; 3] = prev;
                acc += dist3(prev, &p);
            }
            points.push(p);
            cumlen.push(acc);
        }
        Self { points, cumlen }
    }

    pub(crate) fn total_len(&self) -> f64 {
        *self.cumlen.last().unwrap()
    }

    pub(crate) fn point_at(&self, s: f64) -> [f64; 3] {
        let s = s.clamp(0.0, self.total_len());
        let idx = match self
            .cumlen
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.points.len() - 2);
        let seg = self.cumlen[idx + 1] - self.cumlen[idx];
        let t = if seg > 0.0 { (s - self.cumlen[idx]) / seg } else { 0.0 };
        let (a, b) = (&self.points[idx], &self.points[idx + 1]);
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Total centerline arclength of a spec, mm.
pub fn total_arclen(spec: &StenosisSpec) -> f64 {
    Centerline::new(&spec.control_points).total_len()
}

/// Vessel diameter at arclength `s` (mm): RVD1 upstream, linear taper to
/// MLD over LL1, linear widening to RVD2 over LL2, RVD2 downstream.
pub fn diameter_profile(spec: &StenosisSpec, s: f64) -> Result<f64> {
    spec.validate()?;
    let total = total_arclen(spec);
    if !(0.0..=total).contains(&s) {
        return Err(Error::Argument(format!(
            "arclength {s} outside vessel extent [0, {total}]"
        )));
    }
    let start = spec.lesion_center_arclen - spec.ll1;
    let end = spec.lesion_center_arclen + spec.ll2;
    Ok(if s <= start {
        spec.rvd1
    } else if s <= spec.lesion_center_arclen {
        let t = (s - start) / spec.ll1;
        spec.rvd1 + t * (spec.mld - spec.rvd1)
    } else if s <= end {
        let t = (s - spec.lesion_center_arclen) / spec.ll2;
        spec.mld + t * (spec.rvd2 - spec.mld)
    } else {
        spec.rvd2
    })
}

// ── projection and rendering ─────────────────────────────────────────

/// Rotate by `pose` = (about y, about x) then drop z (orthographic).
fn rotate(pose: [f64; 2], p: &[f64; 3]) -> [f64; 3] {
    let (ca, sa) = (pose[0].cos(), pose[0].sin());
    let (cb, sb) = (pose[1].cos(), pose[1].sin());
    // Ry(alpha)
    let x1 = ca * p[0] + sa * p[2];
    let y1 = p[1];
    let z1 = -sa * p[0] + ca * p[2];
    // Rx(beta)
    let x2 = x1;
    let y2 = cb * y1 - sb * z1;
    [x2, y2, cb * z1 + sb * y1]
}

/// Project a 3D mm point to pixel coordinates for an HxW image.
pub fn project_point(
    pose: [f64; 2],
    mm_per_pixel: f64,
    h: usize,
    w: usize,
    p: &[f64; 3],
) -> (f64, f64) {
    let r = rotate(pose, p);
    (
        r[0] / mm_per_pixel + w as f64 / 2.0,
        r[1] / mm_per_pixel + h as f64 / 2.0,
    )
}

/// Projected lesion-minimum location and in-plane unit tangent, in pixels.
/// Used by width-measurement oracles.
pub fn lesion_center_projection(
    spec: &StenosisSpec,
    pose: [f64; 2],
    h: usize,
    w: usize,
) -> ((f64, f64), (f64, f64)) {
    let cl = Centerline::new(&spec.control_points);
    let s = spec.lesion_center_arclen;
    let p = project_point(pose, spec.mm_per_pixel, h, w, &cl.point_at(s));
    let a = project_point(pose, spec.mm_per_pixel, h, w, &cl.point_at(s - 0.5));
    let b = project_point(pose, spec.mm_per_pixel, h, w, &cl.point_at(s + 0.5));
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let n = (dx * dx + dy * dy).sqrt().max(1e-12);
    (p, (dx / n, dy / n))
}

/// Tube stamping radius (pixels) for a diameter in mm; calibrated so the
/// sqrt falloff has full width at half depth exactly diameter/mm_per_pixel.
fn draw_radius_px(diameter_mm: f64, mm_per_pixel: f64) -> f64 {
    diameter_mm / mm_per_pixel / 3.0f64.sqrt()
}

struct Illumination {
    gx: f64,
    gy: f64,
}

impl Illumination {
    fn at(&self, x: f64, y: f64, h: usize, w: usize) -> f64 {
        BACKGROUND + self.gx * (x - w as f64 / 2.0) / w as f64
            + self.gy * (y - h as f64 / 2.0) / h as f64
    }
}

fn stamp_dips(
    spec: &StenosisSpec,
    cl: &Centerline,
    pose: [f64; 2],
    h: usize,
    w: usize,
    visible_len: f64,
    dips: &mut [f64],
) -> Result<()> {
    dips.iter_mut().for_each(|d| *d = 0.0);
    if visible_len <= 0.0 {
        return Ok(());
    }
    let ds = (spec.mm_per_pixel * 0.25).min(0.2);
    let mut s = 0.0;
    while s <= visible_len {
        let d_mm = diameter_profile(spec, s.min(cl.total_len()))?;
        let r_px = draw_radius_px(d_mm, spec.mm_per_pixel);
        let (cx, cy) = project_point(pose, spec.mm_per_pixel, h, w, &cl.point_at(s));
        let margin = r_px + 2.0;
        if cx < margin || cx > w as f64 - 1.0 - margin || cy < margin || cy > h as f64 - 1.0 - margin
        {
            return Err(Error::Generation(format!(
                "vessel projects outside the image at s={s:.2} mm"
            )));
        }
        let (x0, x1) = ((cx - r_px).floor() as usize, (cx + r_px).ceil() as usize);
        let (y0, y1) = ((cy - r_px).floor() as usize, (cy + r_px).ceil() as usize);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - cx;
                let dy = py as f64 - cy;
                let rr = (dx * dx + dy * dy).sqrt();
                if rr < r_px {
                    let dip = TUBE_CONTRAST * (1.0 - (rr / r_px).powi(2)).sqrt();
                    let idx = py * w + px;
                    if dip > dips[idx] {
                        dips[idx] = dip;
                    }
                }
            }
        }
        s += ds;
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Render a [T, H, W] sequence from `viewpoint`. The contrast front covers
/// fraction t/contrast_arrival_frame of the centerline at frame t (fully
/// opacified at and after arrival). Deterministic given `seed`.
pub fn render_sequence(
    spec: &StenosisSpec,
    viewpoint: [f64; 2],
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Tensor> {
    spec.validate()?;
    if t < 1 {
        return Err(Error::Argument("need at least one frame".into()));
    }
    let cl = Centerline::new(&spec.control_points);
    let total = cl.total_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let illum = Illumination {
        gx: rng.gen_range(-0.08..0.08),
        gy: rng.gen_range(-0.08..0.08),
    };
    let mut out = vec![0.0; t * h * w];
    let mut dips = vec![0.0; h * w];
    for ti in 0..t {
        let frac = if spec.contrast_arrival_frame == 0 {
            1.0
        } else {
            (ti as f64 / spec.contrast_arrival_frame as f64).min(1.0)
        };
        stamp_dips(spec, &cl, viewpoint, h, w, frac * total, &mut dips)?;
        for py in 0..h {
            for px in 0..w {
                let base = illum.at(px as f64, py as f64, h, w) - dips[py * w + px];
                let noisy = base + spec.noise * gaussian(&mut rng);
                out[(ti * h + py) * w + px] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![t, h, w], out)
}

/// Render the keyframe: a fully opacified main-view frame.
pub fn render_keyframe(spec: &StenosisSpec, h: usize, w: usize, seed: u64) -> Result<Tensor> {
    let mut full = spec.clone();
    full.contrast_arrival_frame = 0;
    let seq = render_sequence(&full, spec.pose_main, 1, h, w, seed)?;
    seq.reshaped(vec![h, w])
}

// ── dataset generation ───────────────────────────────────────────────

fn sample_spec(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> StenosisSpec {
    let r = &cfg.ranges;
    let rvd1 = rng.gen_range(r.rvd_min..=r.rvd_max);
    let rvd2 = rng.gen_range(r.rvd_min..=r.rvd_max);
    let mld = rng.gen_range(r.mld_frac_min..=r.mld_frac_max) * rvd1.min(rvd2);
    let ll1 = rng.gen_range(r.ll_min..=r.ll_max);
    let ll2 = rng.gen_range(r.ll_min..=r.ll_max);
    let fov = cfg.height.min(cfg.width) as f64 * cfg.mm_per_pixel;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let half = 0.38 * fov;
    let bulge = rng.gen_range(-0.12..0.12) * fov;
    let p0 = [-half * c, -half * s, rng.gen_range(-2.0..2.0)];
    let p2 = [half * c, half * s, rng.gen_range(-2.0..2.0)];
    let p1 = [-bulge * s, bulge * c, rng.gen_range(-3.0..3.0)];
    let pose_main = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.2..0.2)];
    let offset = rng.gen_range(0.5..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let pose_support = [pose_main[0] + offset, rng.gen_range(-0.2..0.2)];
    let mut spec = StenosisSpec {
        rvd1,
        rvd2,
        mld,
        ll1,
        ll2,
        lesion_center_arclen: 0.0,
        control_points: [p0, p1, p2],
        pose_main,
        pose_support,
        mm_per_pixel: cfg.mm_per_pixel,
        noise: cfg.noise,
        contrast_arrival_frame: cfg.contrast_arrival_frame,
    };
    let total = total_arclen(&spec);
    let margin = 1.0;
    let lo = (spec.ll1 + margin).min(total / 2.0);
    let hi = (total - spec.ll2 - margin).max(total / 2.0);
    spec.lesion_center_arclen = if lo < hi { rng.gen_range(lo..hi) } else { total / 2.0 };
    spec
}

/// Generate one sample; retries the pose/geometry draw when the vessel
/// falls outside the image.
pub fn generate_sample(cfg: &PhantomConfig, seed: u64) -> Result<(StenosisSpec, Sample)> {
    for attempt in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt << 32));
        let spec = sample_spec(cfg, &mut rng);
        let render = || -> Result<Sample> {
            let main = render_sequence(
                &spec,
                spec.pose_main,
                cfg.frames,
                cfg.height,
                cfg.width,
                seed.wrapping_mul(4).wrapping_add(1),
            )?;
            let support = render_sequence(
                &spec,
                spec.pose_support,
                cfg.frames,
                cfg.height,
                cfg.width,
                seed.wrapping_mul(4).wrapping_add(2),
            )?;
            let keyframe = render_keyframe(
                &spec,
                cfg.height,
                cfg.width,
                seed.wrapping_mul(4).wrapping_add(3),
            )?;
            Ok(Sample {
                main,
                support,
                keyframe,
                label: spec.label()?,
            })
        };
        match render() {
            Ok(sample) => return Ok((spec, sample)),
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(
        "could not place vessel inside the image after 50 attempts".into(),
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub spec: StenosisSpec,
    pub label: Vec<f64>,
    pub main: String,
    pub support: String,
    pub keyframe: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub samples: Vec<ManifestEntry>,
}

fn write_volume(path: &Path, t: &Tensor) -> Result<()> {
    let (d0, d1, d2) = match t.shape() {
        [a, b, c] => (*a, *b, *c),
        [a, b] => (1usize, *a, *b),
        other => {
            return Err(Error::Dimension(format!(
                "volume files hold 2-d/3-d tensors, got {other:?}"
            )))
        }
    };
    let mut buf = Vec::with_capacity(16 + t.numel() * 4);
    buf.extend_from_slice(VOLUME_MAGIC);
    for d in [d0, d1, d2] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::Generation(format!("truncated volume file {}", path.display())))?;
    if &head[..4] != VOLUME_MAGIC {
        return Err(Error::Generation(format!(
            "bad magic in volume file {}",
            path.display()
        )));
    }
    let dims: Vec<usize> = head[4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = dims.iter().product::<usize>();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Generation(format!("truncated volume file {}", path.display())))?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if dims[0] == 1 {
        Tensor::new(vec![dims[1], dims[2]], data)
    } else {
        Tensor::new(dims, data)
    }
}

/// Generate `n` samples under `out_dir` and write `manifest.json`.
/// Per-sample seeds are seed+index, so the result is byte-identical across
/// runs and independent of scheduling.
pub fn generate_dataset(n: usize, seed: u64, cfg: &PhantomConfig, out_dir: &Path) -> Result<Manifest> {
    if n < 1 {
        return Err(Error::Argument("need n >= 1 samples".into()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let generated: Vec<(StenosisSpec, Sample)> = (0..n)
        .into_par_iter()
        .map(|i| generate_sample(cfg, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(n);
    for (i, (spec, sample)) in generated.iter().enumerate() {
        let main = format!("sample_{i:04}_main.dmqf");
        let support = format!("sample_{i:04}_support.dmqf");
        let keyframe = format!("sample_{i:04}_keyframe.dmqf");
        write_volume(&out_dir.join(&main), &sample.main)?;
        write_volume(&out_dir.join(&support), &sample.support)?;
        write_volume(&out_dir.join(&keyframe), &sample.keyframe)?;
        entries.push(ManifestEntry {
            id: i,
            spec: spec.clone(),
            label: sample.label.data().to_vec(),
            main,
            support,
            keyframe,
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        phantom: cfg.clone(),
        samples: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a dataset directory written by `generate_dataset`.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Generation(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            Ok(Sample {
                main: read_volume(&dir.join(&e.main))?,
                support: read_volume(&dir.join(&e.support))?,
                keyframe: read_volume(&dir.join(&e.keyframe))?,
                label: Tensor::from_vec(e.label.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

pub fn dataset_paths(dir: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    let mut paths = vec![dir.join("manifest.json")];
    for e in &manifest.samples {
        paths.push(dir.join(&e.main));
        paths.push(dir.join(&e.support));
        paths.push(dir.join(&e.keyframe));
    }
    paths
}
