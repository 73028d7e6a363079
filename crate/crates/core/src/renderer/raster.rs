use std::path::Path;

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Black image.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Wraps raw pixels; values are clamped into `[0, 1]`.
    pub fn from_pixels(width: usize, height: usize, mut pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count must be width * height");
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self { width, height, pixels }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::from_pixels(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.pixels[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    /// Little-endian `f32` bytes of every pixel, for bit-exact comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), image::ImageError> {
        image::save_buffer(
            path,
            &self.to_gray8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of pixels that differ from
    /// `background`, or `None` when the image is uniform.
    pub fn support(&self, background: f32) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (y, row) in self.pixels.chunks_exact(self.width).enumerate() {
            let first = row.iter().position(|&p| p != background);
            if let Some(x0) = first {
                let x1 = row.iter().rposition(|&p| p != background).unwrap_or(x0);
                bounds = Some(match bounds {
                    None => (x0, y, x1, y),
                    Some((a, b, c, _)) => (a.min(x0), b, c.max(x1), y),
                });
            }
        }
        bounds
    }
}

/// Per-pixel inverse depth; `0` marks an empty pixel.
#[derive(Debug, Clone)]
pub struct DepthBuffer {
    width: usize,
    inv_depth: Vec<f32>,
}

impl DepthBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            inv_depth: vec![0.0; width * height],
        }
    }

    pub fn inv_depth(&self, x: usize, y: usize) -> f32 {
        self.inv_depth[y * self.width + x]
    }
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// With the triangle oriented so the interior has positive edge values, an
/// edge is top-left when its inward normal points right, or straight down.
#[inline]
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let nx = -(b[1] - a[1]);
    let ny = b[0] - a[0];
    nx > 0.0 || (nx == 0.0 && ny > 0.0)
}

/// Fills one screen-space triangle.
///
/// `screen` holds pixel coordinates (pixel `(x, y)` has its centre at
/// `(x + 0.5, y + 0.5)`), `inv_depth` the reciprocal camera depth of each
/// vertex. Coverage follows the top-left rule; the fragment is kept where it
/// is nearer than what the depth buffer already holds.
pub fn rasterize_triangle(
    image: &mut Image,
    depth: &mut DepthBuffer,
    screen: &[[f64; 2]; 3],
    inv_depth: &[f64; 3],
    shade: f32,
) {
    let (mut v, mut iz) = (*screen, *inv_depth);
    if !v.iter().flatten().all(|c| c.is_finite()) {
        return;
    }
    let mut area = edge(v[0], v[1], v[2]);
    if area == 0.0 {
        return;
    }
    if area < 0.0 {
        v.swap(1, 2);
        iz.swap(1, 2);
        area = -area;
    }
    let (w, h) = (image.width as f64, image.height as f64);
    let min_x = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (min_x - 0.5).ceil().max(0.0);
    let x1 = (max_x - 0.5).floor().min(w - 1.0);
    let y0 = (min_y - 0.5).ceil().max(0.0);
    let y1 = (max_y - 0.5).floor().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let edges = [(1, 2), (2, 0), (0, 1)];
    let top_left = edges.map(|(a, b)| is_top_left(v[a], v[b]));
    let inv_area = 1.0 / area;
    let shade = shade.clamp(0.0, 1.0);

    for y in y0 as usize..=y1 as usize {
        let py = y as f64 + 0.5;
        let row = y * image.width;
        for x in x0 as usize..=x1 as usize {
            let p = [x as f64 + 0.5, py];
            let mut bary = [0.0; 3];
            let mut inside = true;
            for (k, (a, b)) in edges.iter().enumerate() {
                let e = edge(v[*a], v[*b], p);
                if e < 0.0 || (e == 0.0 && !top_left[k]) {
                    inside = false;
                    break;
                }
                bary[k] = e * inv_area;
            }
            if !inside {
                continue;
            }
            let z = (bary[0] * iz[0] + bary[1] * iz[1] + bary[2] * iz[2]) as f32;
            let slot = &mut depth.inv_depth[row + x];
            if z > *slot {
                *slot = z;
                image.pixels[row + x] = shade;
            }
        }
    }
}
