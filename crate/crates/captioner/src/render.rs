//! Orthographic point-splat views from the six axis directions.

use partforge::geometry::{aabb, PointCloud, Vec3};

pub const VIEW_COUNT: usize = 6;

const BACKGROUND: u8 = 0;

/// A square grayscale image; row 0 is the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewImage {
    /// 1..=6 for cameras on +X, -X, +Y, -Y, +Z, -Z.
    pub camera: u8,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ViewImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn lit(&self, x: usize, y: usize) -> bool {
        self.get(x, y) != BACKGROUND
    }

    /// Bounding box of lit pixels as `(x_min, y_min, x_max, y_max)`.
    pub fn lit_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.lit(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&self.pixels).expect("in-memory png data");
        drop(writer);
        out
    }
}

/// Screen right, screen up and the direction towards the camera.
fn camera_basis(camera: u8) -> (Vec3, Vec3, Vec3) {
    match camera {
        1 => ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        2 => ([0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]),
        3 => ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
        4 => ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]),
        5 => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        6 => ([-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]),
        _ => unreachable!("six cameras"),
    }
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Renders `cloud` from the six axis directions. The cloud is centred on its
/// bounding box and scaled uniformly so the largest extent spans 90% of the
/// frame; nearer points overwrite farther ones and are drawn brighter.
pub fn render_views(cloud: &PointCloud, resolution: usize) -> partforge::Result<Vec<ViewImage>> {
    let bb = aabb(cloud)?;
    if resolution == 0 {
        return Err(partforge::Error::Invalid("render resolution must be positive".into()));
    }
    let center = [
        0.5 * (bb.min[0] + bb.max[0]),
        0.5 * (bb.min[1] + bb.max[1]),
        0.5 * (bb.min[2] + bb.max[2]),
    ];
    let extent = (0..3).map(|a| bb.max[a] - bb.min[a]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { 0.9 * resolution as f64 / extent } else { 1.0 };
    let half = resolution as f64 / 2.0;

    let mut views = Vec::with_capacity(VIEW_COUNT);
    for camera in 1..=VIEW_COUNT as u8 {
        let (right, up, toward) = camera_basis(camera);
        let mut depth = vec![f64::NEG_INFINITY; resolution * resolution];
        for p in cloud.points() {
            let q = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let x = (half + dot(&q, &right) * scale).floor();
            let y = (half - dot(&q, &up) * scale).floor();
            let x = (x.max(0.0) as usize).min(resolution - 1);
            let y = (y.max(0.0) as usize).min(resolution - 1);
            let d = dot(&q, &toward);
            let ix = y * resolution + x;
            depth[ix] = depth[ix].max(d);
        }
        let reach = 0.5 * extent.max(f64::MIN_POSITIVE);
        // 255 on the near face down to 64 on the far one
        let pixels = depth
            .iter()
            .map(|&d| {
                if d == f64::NEG_INFINITY {
                    BACKGROUND
                } else {
                    (64.0 + 191.0 * ((d / reach).clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
                }
            })
            .collect();
        views.push(ViewImage {
            camera,
            width: resolution,
            height: resolution,
            pixels,
        });
    }
    Ok(views)
}
