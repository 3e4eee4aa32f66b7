//! Orthographic multi-view rasteriser.
//!
//! View `a` rotates the cloud by `a` about Z, then by the elevation about
//! Y, and looks down the −X axis: image right is +Y, image up is +Z and
//! depth is −X. The image covers `[−1, 1]²`. Each point is a disc of
//! radius `point_radius`; a pixel keeps the `points_per_pixel` nearest
//! discs that overlap it and shows the sum of their exact area coverage,
//! clamped to 1.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{contract, Result};
use crate::par;
use crate::pointcloud::PointCloud;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    pub point_radius: f64,
    pub points_per_pixel: usize,
    pub image_size: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            point_radius: 0.008,
            points_per_pixel: 2,
            image_size: 32,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.point_radius > 0.0 && self.point_radius.is_finite()) {
            return contract(format!("point radius must be positive, got {}", self.point_radius));
        }
        if self.points_per_pixel == 0 || self.image_size == 0 {
            return contract("points per pixel and image size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub views: usize,
    pub elevation: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            views: 12,
            elevation: 0.0,
        }
    }
}

impl CameraRig {
    pub fn new(views: usize, elevation: f64) -> Result<Self> {
        if views == 0 {
            return contract("camera rig needs at least one view");
        }
        Ok(Self { views, elevation })
    }

    /// `2π i / m` for `i = 0..m`.
    pub fn azimuths(&self) -> Vec<f64> {
        (0..self.views)
            .map(|i| std::f64::consts::TAU * i as f64 / self.views as f64)
            .collect()
    }
}

/// Single-channel image, row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// 8-bit gray levels, `round(v · 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8)
            .collect()
    }

    pub fn lit_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub images: Vec<Image>,
    pub params: RenderParams,
}

impl ImageStack {
    pub fn views(&self) -> usize {
        self.images.len()
    }

    /// `[m, 1, H, W]` tensor for the image encoder.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.params.image_size, self.params.image_size);
        let data = self.images.iter().flat_map(|im| im.data.iter().copied()).collect();
        Tensor::new(&[self.images.len(), 1, h, w], data).expect("stack shape")
    }
}

/// `(sin θ, cos θ)` with exact values at multiples of a quarter turn.
fn sin_cos_exact(theta: f64) -> (f64, f64) {
    let q = theta / std::f64::consts::FRAC_PI_2;
    let k = q.round();
    if (q - k).abs() < 1e-12 {
        match (k as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        theta.sin_cos()
    }
}

/// `∫ sqrt(r² − t²) dt`.
fn half_chord_integral(t: f64, r: f64) -> f64 {
    let t = t.clamp(-r, r);
    0.5 * (t * (r * r - t * t).max(0.0).sqrt() + r * r * (t / r).asin())
}

/// Area of the disc of radius `r` at the origin inside `[x0, x1] × [y0, y1]`.
pub fn disc_rect_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let (lo, hi) = (x0.max(-r), x1.min(r));
    if lo >= hi || y0 >= r || y1 <= -r {
        return 0.0;
    }
    let mut cuts = vec![lo, hi];
    for y in [y0, y1] {
        if y.abs() < r {
            let x = (r * r - y * y).sqrt();
            for c in [-x, x] {
                if c > lo && c < hi {
                    cuts.push(c);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let m = 0.5 * (a + b);
        let h = (r * r - m * m).max(0.0).sqrt();
        if h.min(y1) <= (-h).max(y0) {
            continue;
        }
        // upper edge: chord or y1; lower edge: chord or y0
        let upper = if h < y1 {
            half_chord_integral(b, r) - half_chord_integral(a, r)
        } else {
            y1 * (b - a)
        };
        let lower = if -h > y0 {
            -(half_chord_integral(b, r) - half_chord_integral(a, r))
        } else {
            y0 * (b - a)
        };
        area += upper - lower;
    }
    area.max(0.0)
}

struct Hit {
    depth: f64,
    u: f64,
    v: f64,
    index: usize,
    coverage: f64,
}

/// Renders one view; a pure function of its inputs.
pub fn render_view(cloud: &PointCloud, azimuth: f64, elevation: f64, params: &RenderParams) -> Result<Image> {
    params.validate()?;
    let size = params.image_size;
    let (sa, ca) = sin_cos_exact(azimuth);
    let (se, ce) = sin_cos_exact(elevation);
    let r = params.point_radius;
    let px = 2.0 / size as f64;
    let pixel_area = px * px;
    let mut hits: Vec<Vec<Hit>> = (0..size * size).map(|_| Vec::new()).collect();
    for (index, p) in cloud.points().iter().enumerate() {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let (x1, y1) = (ca * x - sa * y, sa * x + ca * y);
        let (x2, z2) = (ce * x1 + se * z, -se * x1 + ce * z);
        let (u, v, depth) = (y1, z2, -x2);
        let col_lo = (((u - r) + 1.0) / px).floor().max(0.0) as usize;
        let col_hi = ((((u + r) + 1.0) / px).floor()).min(size as f64 - 1.0);
        let row_lo = (((1.0 - (v + r)) / px).floor()).max(0.0) as usize;
        let row_hi = (((1.0 - (v - r)) / px).floor()).min(size as f64 - 1.0);
        if col_hi < 0.0 || row_hi < 0.0 {
            continue;
        }
        for row in row_lo..=row_hi as usize {
            let top = 1.0 - row as f64 * px;
            for col in col_lo..=col_hi as usize {
                let left = -1.0 + col as f64 * px;
                let a = disc_rect_area(r, left - u, left + px - u, top - px - v, top - v);
                if a > 0.0 {
                    hits[row * size + col].push(Hit {
                        depth,
                        u,
                        v,
                        index,
                        coverage: a / pixel_area,
                    });
                }
            }
        }
    }
    let k = params.points_per_pixel;
    let data = hits
        .into_iter()
        .map(|mut hs| {
            hs.sort_by(|a, b| {
                a.depth
                    .total_cmp(&b.depth)
                    .then(a.u.total_cmp(&b.u))
                    .then(a.v.total_cmp(&b.v))
                    .then(a.index.cmp(&b.index))
            });
            hs.iter().take(k).map(|h| h.coverage).sum::<f64>().min(1.0) as f32
        })
        .collect();
    Ok(Image {
        width: size,
        height: size,
        data,
    })
}

/// All views of the rig in azimuth order; views render in parallel.
pub fn render_multiview(cloud: &PointCloud, rig: &CameraRig, params: &RenderParams) -> Result<ImageStack> {
    params.validate()?;
    if rig.views == 0 {
        return contract("camera rig needs at least one view");
    }
    let az = rig.azimuths();
    let images = par::map_indices(az.len(), |i| render_view(cloud, az[i], rig.elevation, params))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack {
        images,
        params: *params,
    })
}

/// Binary PGM: `P5\n<W> <H>\n255\n` followed by the gray levels.
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&pgm_bytes(image))?;
    Ok(())
}

pub fn pgm_bytes(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}
