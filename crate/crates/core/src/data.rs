//! ShapeWorld: procedurally generated scenes with exact dense labels.
//!
//! A scene is a stack of circles, rectangles and triangles over a flat
//! background. Each primitive sits on a discrete depth layer and carries a
//! smooth height field, so depth, normals and depth edges are all known in
//! closed form. Image coordinates are normalized to `[0, 1]`, `x` along
//! columns and `y` along rows; pixel centres sit at `(j + 0.5) / W`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEG_CLASSES: usize = 6;
pub const BACKGROUND_DEPTH: f64 = 1.0;
pub const LAYER_SPACING: f64 = 0.1;
pub const NEAREST_LAYER: f64 = 0.3;
pub const LAYERS: usize = 6;
pub const EDGE_THRESHOLD: f64 = 0.15;
pub const DEPTH_MAGIC: &[u8; 8] = b"SWDEPTH1";
pub const NORMAL_MAGIC: &[u8; 8] = b"SWNORM01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }

    pub fn params(self) -> DomainParams {
        match self {
            Domain::A => DomainParams { hue_shift_deg: 0.0, texture: Texture::Stripes, size_scale: 1.0, min_primitives: 1, max_primitives: 4 },
            Domain::B => DomainParams { hue_shift_deg: 18.0, texture: Texture::Checker, size_scale: 0.8, min_primitives: 2, max_primitives: 6 },
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            Domain::A => 0,
            Domain::B => 10_000_000,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            _ => Err(Error::Config(format!("unknown domain {s:?} (expected A or B)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Stripes,
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub hue_shift_deg: f64,
    pub texture: Texture,
    pub size_scale: f64,
    /// Primitive counts are uniform on `min..=max`.
    pub min_primitives: usize,
    pub max_primitives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub class_id: u8,
    pub center: [f64; 2],
    /// Radius (circle), half extents (rectangle) or circumradius (triangle, both equal).
    pub size: [f64; 2],
    pub rotation: f64,
    /// Depth layer in `(0, 1]`.
    pub z: f64,
    /// Height-field amplitude; `0` is flat.
    pub amplitude: f64,
    pub texture_freq: f64,
    pub texture_angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub gray: f64,
    pub texture_freq: f64,
    pub texture_angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub domain: Domain,
    /// Far to near.
    pub primitives: Vec<Primitive>,
    pub background: BackgroundParams,
}

/// Rendered sample. Labels are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Array3<f32>,
    pub seg: Array2<u8>,
    pub depth: Array2<f32>,
    /// `[H, W, 3]` unit vectors.
    pub normal: Array3<f32>,
    pub edge: Array2<u8>,
}

pub fn generate_scene(seed: u64, domain: Domain) -> SceneSpec {
    let params = domain.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_4150_4557_4C44);
    let count = rng.random_range(params.min_primitives..=params.max_primitives);
    let mut primitives: Vec<Primitive> = (0..count)
        .map(|_| {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            let scale = params.size_scale;
            let (size, amp_max) = match kind {
                ShapeKind::Circle => {
                    let r = rng.random_range(0.08..0.2) * scale;
                    ([r, r], 0.6)
                }
                ShapeKind::Rectangle => (
                    [rng.random_range(0.07..0.2) * scale, rng.random_range(0.07..0.2) * scale],
                    0.3,
                ),
                ShapeKind::Triangle => {
                    let r = rng.random_range(0.1..0.22) * scale;
                    ([r, r], 0.25)
                }
            };
            let flat = rng.random_bool(0.25);
            let amplitude = if flat { 0.0 } else { rng.random_range(0.3..1.0) * amp_max };
            Primitive {
                kind,
                class_id: rng.random_range(1..SEG_CLASSES as u8),
                center: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                size,
                rotation: rng.random_range(0.0..2.0 * PI),
                z: NEAREST_LAYER + LAYER_SPACING * rng.random_range(0..LAYERS) as f64,
                amplitude,
                texture_freq: rng.random_range(6.0..12.0),
                texture_angle: rng.random_range(0.0..PI),
            }
        })
        .collect();
    primitives.sort_by(|a, b| b.z.total_cmp(&a.z));
    let background = BackgroundParams {
        gray: rng.random_range(0.4..0.6),
        texture_freq: rng.random_range(3.0..8.0),
        texture_angle: rng.random_range(0.0..PI),
    };
    SceneSpec { seed, domain, primitives, background }
}

/// Height above the depth layer and its gradient, or `None` outside.
fn height_field(p: &Primitive, x: f64, y: f64) -> Option<(f64, [f64; 2])> {
    let (dx, dy) = (x - p.center[0], y - p.center[1]);
    match p.kind {
        ShapeKind::Circle => {
            let r = p.size[0];
            let r2 = dx * dx + dy * dy;
            if r2 >= r * r {
                return None;
            }
            let rs2 = (1.5 * r).powi(2);
            let root = (rs2 - r2).sqrt();
            let h = p.amplitude * (root - (rs2 - r * r).sqrt());
            Some((h, [-p.amplitude * dx / root, -p.amplitude * dy / root]))
        }
        ShapeKind::Rectangle => {
            let (c, s) = (p.rotation.cos(), p.rotation.sin());
            let u = (c * dx + s * dy) / p.size[0];
            let v = (-s * dx + c * dy) / p.size[1];
            if u.abs() >= 1.0 || v.abs() >= 1.0 {
                return None;
            }
            let m = p.size[0].min(p.size[1]) * p.amplitude;
            let (fu, fv) = (1.0 - u * u, 1.0 - v * v);
            let dh_du = m * -2.0 * u * fv;
            let dh_dv = m * fu * -2.0 * v;
            let gx = dh_du * c / p.size[0] - dh_dv * s / p.size[1];
            let gy = dh_du * s / p.size[0] + dh_dv * c / p.size[1];
            Some((m * fu * fv, [gx, gy]))
        }
        ShapeKind::Triangle => {
            let r = p.size[0];
            let v: Vec<[f64; 2]> = (0..3)
                .map(|k| {
                    let a = p.rotation + 2.0 * PI * k as f64 / 3.0;
                    [p.center[0] + r * a.cos(), p.center[1] + r * a.sin()]
                })
                .collect();
            let det = (v[1][1] - v[2][1]) * (v[0][0] - v[2][0]) + (v[2][0] - v[1][0]) * (v[0][1] - v[2][1]);
            let g0 = [(v[1][1] - v[2][1]) / det, (v[2][0] - v[1][0]) / det];
            let g1 = [(v[2][1] - v[0][1]) / det, (v[0][0] - v[2][0]) / det];
            let b0 = g0[0] * (x - v[2][0]) + g0[1] * (y - v[2][1]);
            let b1 = g1[0] * (x - v[2][0]) + g1[1] * (y - v[2][1]);
            let b2 = 1.0 - b0 - b1;
            if b0 <= 0.0 || b1 <= 0.0 || b2 <= 0.0 {
                return None;
            }
            let g2 = [-g0[0] - g1[0], -g0[1] - g1[1]];
            let k = p.amplitude * r * 27.0;
            let grad = std::array::from_fn(|i| k * (g0[i] * b1 * b2 + b0 * g1[i] * b2 + b0 * b1 * g2[i]));
            Some((k * b0 * b1 * b2, grad))
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn texture(kind: Texture, freq: f64, angle: f64, x: f64, y: f64) -> f64 {
    match kind {
        Texture::Stripes => 1.0 + 0.12 * (2.0 * PI * freq * (x * angle.cos() + y * angle.sin())).sin(),
        Texture::Checker => {
            let parity = ((x * freq).floor() + (y * freq).floor()) as i64 & 1;
            if parity == 0 { 1.12 } else { 0.88 }
        }
    }
}

/// Hue of each foreground class before any domain shift.
pub fn class_hue(class_id: u8) -> f64 {
    72.0 * (class_id as f64 - 1.0)
}

/// Sobel gradient magnitude of `depth` above [`EDGE_THRESHOLD`], with
/// replicated borders.
pub fn depth_edges(depth: &Array2<f64>) -> Array2<u8> {
    let (h, w) = depth.dim();
    let at = |i: isize, j: isize| depth[[i.clamp(0, h as isize - 1) as usize, j.clamp(0, w as isize - 1) as usize]];
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        let gx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
            - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
        let gy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
            - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
        u8::from((gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD)
    })
}

/// Index of the visible primitive at every pixel (`None` for background),
/// with depth and depth gradient.
pub fn visible_surface(spec: &SceneSpec, h: usize, w: usize) -> (Array2<Option<usize>>, Array2<f64>, Array3<f64>) {
    let mut owner = Array2::from_elem((h, w), None);
    let mut depth = Array2::from_elem((h, w), BACKGROUND_DEPTH);
    let mut grad = Array3::zeros((h, w, 2));
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            for (k, p) in spec.primitives.iter().enumerate() {
                if let Some((hf, g)) = height_field(p, x, y) {
                    let d = p.z - hf;
                    if d < depth[[i, j]] {
                        depth[[i, j]] = d;
                        owner[[i, j]] = Some(k);
                        grad[[i, j, 0]] = -g[0];
                        grad[[i, j, 1]] = -g[1];
                    }
                }
            }
        }
    }
    (owner, depth, grad)
}

pub fn render_sample(spec: &SceneSpec, h: usize, w: usize) -> Sample {
    let params = spec.domain.params();
    let (owner, depth, grad) = visible_surface(spec, h, w);
    let light = {
        let l = [-0.4f64, -0.5, 1.0];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let mut image = Array3::zeros((h, w, 3));
    let mut normal = Array3::zeros((h, w, 3));
    let mut seg = Array2::zeros((h, w));
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let (gx, gy) = (grad[[i, j, 0]], grad[[i, j, 1]]);
            let len = (gx * gx + gy * gy + 1.0).sqrt();
            let n = [gx / len, gy / len, 1.0 / len];
            let d = depth[[i, j]];
            let base = match owner[[i, j]] {
                Some(k) => {
                    let p = &spec.primitives[k];
                    seg[[i, j]] = p.class_id;
                    let t = texture(params.texture, p.texture_freq, p.texture_angle, x, y);
                    let shade = 0.35 + 0.65 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                    let rgb = hsv_to_rgb(class_hue(p.class_id) + params.hue_shift_deg, 0.75, 0.95);
                    rgb.map(|c| c * t * shade)
                }
                None => {
                    let b = &spec.background;
                    let t = texture(params.texture, b.texture_freq, b.texture_angle, x, y);
                    [b.gray * t; 3]
                }
            };
            let fog = (0.25 * (d - NEAREST_LAYER) / (BACKGROUND_DEPTH - NEAREST_LAYER)).clamp(0.0, 0.25);
            for c in 0..3 {
                image[[i, j, c]] = (base[c] * (1.0 - fog) + 0.7 * fog).clamp(0.0, 1.0) as f32;
                normal[[i, j, c]] = n[c] as f32;
            }
        }
    }
    Sample { seed: spec.seed, image, edge: depth_edges(&depth), seg, depth: depth.mapv(|v| v as f32), normal }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn seed_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

/// Scene seed of sample `index` of a split. Ranges of different splits and
/// domains never overlap for fewer than a million samples.
pub fn split_seed(split: Split, domain: Domain, index: usize) -> u64 {
    split.seed_base() + domain.seed_offset() + index as u64
}

pub fn split_seeds(split: Split, domain: Domain, count: usize) -> Vec<u64> {
    (0..count).map(|i| split_seed(split, domain, i)).collect()
}

pub fn render_seed(seed: u64, domain: Domain, size: usize) -> Sample {
    render_sample(&generate_scene(seed, domain), size, size)
}

pub fn render_split(split: Split, domain: Domain, count: usize, size: usize) -> Vec<Sample> {
    split_seeds(split, domain, count).into_iter().map(|s| render_seed(s, domain, size)).collect()
}

/// Colours used for the palette-indexed label images.
pub fn seg_palette() -> [[u8; 3]; SEG_CLASSES] {
    let mut pal = [[0u8; 3]; SEG_CLASSES];
    pal[0] = [40, 40, 40];
    for (c, slot) in pal.iter_mut().enumerate().skip(1) {
        *slot = hsv_to_rgb(class_hue(c as u8), 0.75, 0.95).map(|v| (v * 255.0).round() as u8);
    }
    pal
}

pub fn write_indexed_png(path: &Path, labels: &Array2<u8>, palette: &[[u8; 3]]) -> Result<()> {
    let (h, w) = labels.dim();
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<_>>());
    let mut writer = enc.write_header()?;
    writer.write_image_data(&labels.iter().copied().collect::<Vec<_>>())?;
    writer.finish()?;
    Ok(())
}

pub fn write_rgb_png(path: &Path, rgb: &Array3<f32>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let bytes: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

pub fn write_gray_png(path: &Path, gray: &Array2<u8>) -> Result<()> {
    let (h, w) = gray.dim();
    let bytes: Vec<u8> = gray.iter().copied().collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::L8)?;
    Ok(())
}

/// Writes an 8-byte magic followed by little-endian `f32` values.
pub fn write_f32_file(path: &Path, magic: &[u8; 8], values: impl Iterator<Item = f32>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(magic)?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_f32_file(path: &Path, magic: &[u8; 8]) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != magic || (bytes.len() - 8) % 4 != 0 {
        return Err(Error::Config(format!("{} is not a {} file", path.display(), String::from_utf8_lossy(magic))));
    }
    Ok(bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: Domain,
    pub domain_params: DomainParams,
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub samples: Vec<String>,
}

/// Renders `count` scenes with seeds `seed..seed + count` into `dir`.
pub fn write_dataset(dir: &Path, domain: Domain, count: usize, seed: u64, size: usize) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let palette = seg_palette();
    let mut manifest = Manifest {
        domain,
        domain_params: domain.params(),
        image_size: size,
        count,
        seed,
        seeds: Vec::with_capacity(count),
        samples: Vec::with_capacity(count),
    };
    for i in 0..count {
        let s = seed + i as u64;
        let sample = render_seed(s, domain, size);
        let name = format!("{i:05}");
        let sd = dir.join(&name);
        fs::create_dir_all(&sd)?;
        write_rgb_png(&sd.join("image.png"), &sample.image)?;
        write_indexed_png(&sd.join("seg.png"), &sample.seg, &palette)?;
        write_gray_png(&sd.join("edge.png"), &sample.edge.mapv(|e| e * 255))?;
        write_f32_file(&sd.join("depth.f32"), DEPTH_MAGIC, sample.depth.iter().copied())?;
        write_f32_file(&sd.join("normal.f32"), NORMAL_MAGIC, sample.normal.iter().copied())?;
        manifest.seeds.push(s);
        manifest.samples.push(name);
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
