use super::AttributionMap;
use crate::dataset::WsiBag;
use crate::error::{Error, Result};

pub const HEATMAP_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        RgbImage {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(3 * n).collect(),
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Jet-style colormap: blue, cyan, yellow and red at 0, ⅓, ⅔ and 1, linear in between.
pub fn jet(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * 3.0;
    let i = (pos.floor() as usize).min(2);
    let f = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + (STOPS[i + 1][c] - STOPS[i][c]) * f).round() as u8;
    }
    out
}

/// Blends jet-colored tiles over `base` (or a white canvas sized to the patches).
///
/// Patch coordinates and tile sizes are divided by `downsample`. A pixel covered by several
/// tiles takes the highest score. Tiles starting outside the canvas are an error; tiles
/// running past its edge are clipped.
pub fn render_heatmap(map: &AttributionMap, base: Option<&RgbImage>, downsample: f64) -> Result<RgbImage> {
    if !(downsample > 0.0 && downsample.is_finite()) {
        return Err(Error::InvalidArgument(format!("downsample must be positive, got {downsample}")));
    }
    let tile = (map.tile_size as f64 / downsample).ceil().max(1.0) as u32;
    let origin = |v: u32| (v as f64 / downsample).floor() as u32;
    let mut img = match base {
        Some(b) => b.clone(),
        None => {
            let w = map.patches.iter().map(|p| origin(p.x) + tile).max().unwrap_or(1);
            let h = map.patches.iter().map(|p| origin(p.y) + tile).max().unwrap_or(1);
            RgbImage::filled(w, h, [255, 255, 255])
        }
    };
    let (w, h) = (img.width, img.height);
    let mut best = vec![f64::NEG_INFINITY; w as usize * h as usize];
    for p in &map.patches {
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::InvalidArgument(format!("patch {} score {} outside [0, 1]", p.index, p.score)));
        }
        let (x0, y0) = (origin(p.x), origin(p.y));
        if x0 >= w || y0 >= h {
            return Err(Error::InvalidArgument(format!(
                "patch {} at ({}, {}) lies outside the {w}×{h} canvas",
                p.index, p.x, p.y
            )));
        }
        for y in y0..(y0 + tile).min(h) {
            for x in x0..(x0 + tile).min(w) {
                let k = y as usize * w as usize + x as usize;
                best[k] = best[k].max(p.score);
            }
        }
    }
    for (k, s) in best.iter().enumerate() {
        if s.is_finite() {
            let c = jet(*s);
            for ch in 0..3 {
                let b = img.pixels[3 * k + ch] as f64;
                img.pixels[3 * k + ch] =
                    ((1.0 - HEATMAP_ALPHA) * b + HEATMAP_ALPHA * c[ch] as f64).round() as u8;
            }
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&img.pixels).map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes 8-bit gray, gray-alpha, RGB or RGBA PNG data to RGB (alpha dropped).
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let channels = info.color_type.samples();
    let n = info.width as usize * info.height as usize;
    let mut pixels = Vec::with_capacity(3 * n);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        match channels {
            1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
            _ => pixels.extend_from_slice(&px[..3]),
        }
    }
    Ok(RgbImage {
        width: info.width,
        height: info.height,
        pixels,
    })
}

/// Stand-in slide thumbnail: cell density per `downsample`-pixel block, dark on white.
pub fn render_density_thumbnail(bag: &WsiBag, downsample: f64) -> Result<RgbImage> {
    if !(downsample > 0.0 && downsample.is_finite()) {
        return Err(Error::InvalidArgument(format!("downsample must be positive, got {downsample}")));
    }
    let extent = |pick: fn(&[u32; 2]) -> u32| {
        let tiles = [&bag.patches_small, &bag.patches_large];
        tiles
            .iter()
            .flat_map(|t| t.coords.iter().map(move |c| pick(c) as f64 + t.tile_size as f64))
            .fold(0.0, f64::max)
    };
    let max_x = bag.cells.iter().map(|c| c.x).fold(extent(|c| c[0]), f64::max);
    let max_y = bag.cells.iter().map(|c| c.y).fold(extent(|c| c[1]), f64::max);
    let w = ((max_x / downsample).ceil() as u32).max(1);
    let h = ((max_y / downsample).ceil() as u32).max(1);
    let mut counts = vec![0u32; w as usize * h as usize];
    for c in &bag.cells {
        let x = ((c.x / downsample) as u32).min(w - 1);
        let y = ((c.y / downsample) as u32).min(h - 1);
        counts[y as usize * w as usize + x as usize] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::filled(w, h, [255, 255, 255]);
    for (k, &c) in counts.iter().enumerate() {
        let v = (255.0 * (1.0 - 0.8 * c as f64 / peak)).round() as u8;
        img.pixels[3 * k..3 * k + 3].copy_from_slice(&[v, v, v]);
    }
    Ok(img)
}
