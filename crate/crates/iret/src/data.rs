//! Image I/O (binary PPM), stochastic augmentations, synthetic instance
//! dataset generation, Oxford-style ground-truth parsing and query-region
//! cropping.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::rng;

/// RGB image, channel-major (c, y, x), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image expects {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

// ---------------------------------------------------------------------------
// PPM P6
// ---------------------------------------------------------------------------

/// Read a binary PPM ("P6", maxval 255). Byte values map linearly to
/// byte/255.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(Error::malformed(path, format!("wrong magic '{magic}'")));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::malformed(path, "bad width"))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::malformed(path, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::malformed(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::malformed(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::malformed(path, "truncated payload"));
    }
    let payload = &bytes[pos..pos + need];
    let mut img = Image::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * 3;
            for c in 0..3 {
                img.set(c, y, x, payload[base + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Write a binary PPM; values are rounded to bytes so write->read of a
/// byte-quantized image is lossless.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + 3 * img.width * img.height);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)
        .map_err(|e| Error::io(path, e))?;
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let b = (img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(b);
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Stochastic augmentation parameters. The pipeline order is fixed:
/// random square crop, bilinear resize to `target`, horizontal flip,
/// per-channel affine scale with clamping, Gaussian blur (3x3, sigma 1).
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub crop_min: usize,
    pub crop_max: usize,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub blur_prob: f64,
    pub target: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min: 24,
            crop_max: 32,
            flip_prob: 0.5,
            scale_min: 0.6,
            scale_max: 1.4,
            blur_prob: 0.5,
            target: 32,
        }
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::zeros(out_h, out_w);
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let top = img.at(c, y0, x0) * (1.0 - wx) + img.at(c, y0, x1) * wx;
                let bot = img.at(c, y1, x0) * (1.0 - wx) + img.at(c, y1, x1) * wx;
                out.set(c, y, x, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    out
}

/// Mirror the image horizontally.
pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = Image::zeros(img.height, img.width);
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.at(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

/// 3x3 Gaussian blur, sigma 1.0, reflect padding.
pub fn gaussian_blur3(img: &Image) -> Image {
    let w0 = 1.0f64; // exp(0)
    let w1 = (-0.5f64).exp();
    let w2 = (-1.0f64).exp();
    let kernel = [
        [w2, w1, w2],
        [w1, w0, w1],
        [w2, w1, w2],
    ];
    let ksum: f64 = kernel.iter().flatten().sum();
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= n {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Image::zeros(img.height, img.width);
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = reflect(y as isize + dy, img.height);
                        let xx = reflect(x as isize + dx, img.width);
                        acc += kernel[(dy + 1) as usize][(dx + 1) as usize] * img.at(c, yy, xx);
                    }
                }
                out.set(c, y, x, acc / ksum);
            }
        }
    }
    out
}

/// One stochastic augmentation pass. Deterministic given the rng state;
/// the draw order is: crop side, crop x, crop y, flip coin, three channel
/// scales, blur coin.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Image> {
    let max_side = img.height.min(img.width);
    let lo = cfg.crop_min.min(max_side);
    let hi = cfg.crop_max.min(max_side);
    if lo == 0 {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    let side = rng.gen_range(lo..=hi);
    let x0 = rng.gen_range(0..=img.width - side);
    let y0 = rng.gen_range(0..=img.height - side);

    let mut crop = Image::zeros(side, side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                crop.set(c, y, x, img.at(c, y0 + y, x0 + x));
            }
        }
    }
    let mut out = resize_bilinear(&crop, cfg.target, cfg.target);

    if rng.gen::<f64>() < cfg.flip_prob {
        out = flip_horizontal(&out);
    }

    for c in 0..3 {
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        if scale != 1.0 {
            for y in 0..out.height {
                for x in 0..out.width {
                    out.set(c, y, x, (out.at(c, y, x) * scale).clamp(0.0, 1.0));
                }
            }
        }
    }

    if rng.gen::<f64>() < cfg.blur_prob {
        out = gaussian_blur3(&out);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic instance dataset
// ---------------------------------------------------------------------------

/// Parameters for the synthetic instance dataset: K instances, V augmented
/// views each, rendered on a 32x32 canvas.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub instances: usize,
    pub views: usize,
    pub canvas: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            instances: 16,
            views: 8,
            canvas: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rectangle,
    Disc,
    Cross,
}

fn draw_shape(img: &mut Image, shape: Shape, cx: f64, cy: f64, size: f64, color: [f64; 3]) {
    let (h, w) = (img.height, img.width);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match shape {
                Shape::Rectangle => dx.abs() <= size && dy.abs() <= size * 0.6,
                Shape::Disc => dx * dx + dy * dy <= size * size,
                Shape::Cross => {
                    (dx.abs() <= size * 0.3 && dy.abs() <= size)
                        || (dy.abs() <= size * 0.3 && dx.abs() <= size)
                }
            };
            if inside {
                for c in 0..3 {
                    img.set(c, y, x, color[c]);
                }
            }
        }
    }
}

/// Render the canonical (un-augmented) composition for one instance.
pub fn synth_canonical(spec: &SynthSpec, instance: usize) -> Image {
    let mut rng = rng::stream(spec.seed, &format!("synth/instance/{instance}"));
    let n = spec.canvas;
    let mut img = Image::zeros(n, n);
    // dim noise background
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                img.set(c, y, x, rng.gen_range(0.0..0.25));
            }
        }
    }
    let shapes = rng.gen_range(3..=5);
    for _ in 0..shapes {
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Rectangle,
            1 => Shape::Disc,
            _ => Shape::Cross,
        };
        let color = [
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
        ];
        let cx = rng.gen_range(4.0..(n as f64 - 4.0));
        let cy = rng.gen_range(4.0..(n as f64 - 4.0));
        let size = rng.gen_range(3.0..8.0);
        draw_shape(&mut img, shape, cx, cy, size, color);
    }
    img
}

/// Generate the synthetic dataset: K*V PPM files plus a TSV manifest
/// `filename<TAB>instance_label`. Byte-identical for identical specs.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<(String, u32)>> {
    if spec.instances < 2 || spec.views < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 instances and 2 views".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = AugmentConfig::default();
    let mut manifest = Vec::with_capacity(spec.instances * spec.views);
    for k in 0..spec.instances {
        let canonical = synth_canonical(spec, k);
        for v in 0..spec.views {
            let mut view_rng = rng::stream(spec.seed, &format!("synth/view/{k}/{v}"));
            let view = augment(&canonical, &cfg, &mut view_rng)?;
            let name = format!("inst{k:03}_view{v:03}.ppm");
            write_ppm(&view, &out_dir.join(&name))?;
            manifest.push((name, k as u32));
        }
    }
    let mut text = String::new();
    for (name, label) in &manifest {
        text.push_str(&format!("{name}\t{label}\n"));
    }
    fs::write(out_dir.join("manifest.tsv"), text)
        .map_err(|e| Error::io(out_dir.join("manifest.tsv"), e))?;
    Ok(manifest)
}

/// Read a `manifest.tsv` produced by [`synth_generate`].
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, u32)>> {
    let path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(&path, format!("line {}: no tab", lineno + 1)))?;
        let label: u32 = label
            .parse()
            .map_err(|_| Error::malformed(&path, format!("line {}: bad label", lineno + 1)))?;
        out.push((name.to_string(), label));
    }
    if out.is_empty() {
        return Err(Error::malformed(&path, "empty manifest"));
    }
    Ok(out)
}

/// Load every image named by the manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, u32, Image)>> {
    read_manifest(dir)?
        .into_iter()
        .map(|(name, label)| {
            let img = read_ppm(&dir.join(&name))?;
            Ok((name, label, img))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Oxford-style ground truth
// ---------------------------------------------------------------------------

fn read_stems(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Parse `<query>_query.txt`, `_good.txt`, `_ok.txt`, `_junk.txt` from
/// `dir`. Positives are good union ok; the query line carries the image
/// stem and the fractional bounding box.
pub fn parse_ground_truth(dir: &Path, query_name: &str) -> Result<(GroundTruth, String)> {
    let qpath = dir.join(format!("{query_name}_query.txt"));
    let qtext = fs::read_to_string(&qpath).map_err(|e| Error::io(&qpath, e))?;
    let line = qtext
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::malformed(&qpath, "empty query file"))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::malformed(
            &qpath,
            format!("expected 'stem x1 y1 x2 y2', got {} fields", fields.len()),
        ));
    }
    let stem = fields[0].to_string();
    let mut coords = [0.0f64; 4];
    for (i, f) in fields[1..].iter().enumerate() {
        coords[i] = f
            .parse()
            .map_err(|_| Error::malformed(&qpath, format!("bad coordinate '{f}'")))?;
    }

    let good = read_stems(&dir.join(format!("{query_name}_good.txt")))?;
    let ok = read_stems(&dir.join(format!("{query_name}_ok.txt")))?;
    let junk = read_stems(&dir.join(format!("{query_name}_junk.txt")))?;
    let positives: BTreeSet<String> = good.union(&ok).cloned().collect();

    let gt = GroundTruth::new(
        query_name.to_string(),
        positives,
        junk,
        (coords[0], coords[1], coords[2], coords[3]),
    )?;
    Ok((gt, stem))
}

/// Crop the query region: x1 floored, x2 ceiled, both clamped to the
/// image bounds. An empty intersection is an error.
pub fn crop_bbox(img: &Image, bbox: (f64, f64, f64, f64)) -> Result<Image> {
    let (x1, y1, x2, y2) = bbox;
    let xi1 = (x1.floor().max(0.0)) as usize;
    let yi1 = (y1.floor().max(0.0)) as usize;
    let xi2 = (x2.ceil().min(img.width as f64)).max(0.0) as usize;
    let yi2 = (y2.ceil().min(img.height as f64)).max(0.0) as usize;
    if xi2 <= xi1 || yi2 <= yi1 {
        return Err(Error::Degenerate("bbox does not intersect image".into()));
    }
    let (h, w) = (yi2 - yi1, xi2 - xi1);
    let mut out = Image::zeros(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, img.at(c, yi1 + y, xi1 + x));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn quantized(img: &Image) -> Image {
        let mut out = img.clone();
        for v in out.data.iter_mut() {
            *v = (*v * 255.0).round() / 255.0;
        }
        out
    }

    #[test]
    fn ppm_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..3 * 8 * 10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = quantized(&Image::new(8, 10, data).unwrap());
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
        // second roundtrip is byte-identical
        let path2 = dir.path().join("y.ppm");
        write_ppm(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn ppm_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        fs::write(&path, b"P5\n2 2\n255\n\0\0\0\0").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(err.to_string().contains("wrong magic"));
    }

    #[test]
    fn ppm_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        fs::write(&path, b"P6\n2 2\n255\n\0\0\0").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn ppm_byte_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ppm");
        fs::write(&path, b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff").unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.at(0, 0, 0), 1.0);
        assert_eq!(img.at(1, 0, 0), 0.0);
        assert_eq!(img.at(2, 0, 1), 1.0);
        assert_eq!(img.at(0, 0, 1), 0.0);
    }

    fn identity_cfg() -> AugmentConfig {
        AugmentConfig {
            crop_min: 32,
            crop_max: 32,
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            blur_prob: 0.0,
            target: 32,
        }
    }

    #[test]
    fn augment_disabled_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(32, 32, data).unwrap();
        let mut arng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&img, &identity_cfg(), &mut arng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn augment_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(32, 32, data).unwrap();
        let a = augment(&img, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&img, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(16, 16, data).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn synth_generates_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            instances: 4,
            views: 3,
            seed: 42,
            ..Default::default()
        };
        let manifest = synth_generate(&spec, dir.path()).unwrap();
        assert_eq!(manifest.len(), 12);
        let loaded = read_manifest(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        // canonical instances pairwise distinct
        for a in 0..4 {
            for b in (a + 1)..4 {
                let ia = synth_canonical(&spec, a);
                let ib = synth_canonical(&spec, b);
                let dist: f64 = ia
                    .data
                    .iter()
                    .zip(&ib.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(dist > 0.0);
            }
        }
    }

    #[test]
    fn synth_is_byte_identical_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            instances: 3,
            views: 2,
            seed: 7,
            ..Default::default()
        };
        synth_generate(&spec, d1.path()).unwrap();
        synth_generate(&spec, d2.path()).unwrap();
        for entry in fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(d1.path().join(&name)).unwrap();
            let b = fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?}");
        }
    }

    fn write_gt(dir: &Path, q: &str, query_line: &str, good: &str, ok: &str, junk: &str) {
        fs::write(dir.join(format!("{q}_query.txt")), query_line).unwrap();
        fs::write(dir.join(format!("{q}_good.txt")), good).unwrap();
        fs::write(dir.join(format!("{q}_ok.txt")), ok).unwrap();
        fs::write(dir.join(format!("{q}_junk.txt")), junk).unwrap();
    }

    #[test]
    fn parse_oxford_style_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        write_gt(
            dir.path(),
            "all_souls_1",
            "all_souls_000013 136.5 34.1 648.5 955.7\n",
            "a\nb\n",
            "c\n",
            "j\n",
        );
        let (gt, stem) = parse_ground_truth(dir.path(), "all_souls_1").unwrap();
        assert_eq!(stem, "all_souls_000013");
        assert_eq!(gt.bbox, (136.5, 34.1, 648.5, 955.7));
        assert_eq!(gt.positives.len(), 3);
        assert!(gt.junk.contains("j"));
    }

    #[test]
    fn parse_ground_truth_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_gt(dir.path(), "empty", "img 0 0 5 5\n", "", "", "");
        assert!(parse_ground_truth(dir.path(), "empty").is_err());

        write_gt(dir.path(), "overlap", "img 0 0 5 5\n", "a\n", "", "a\n");
        assert!(parse_ground_truth(dir.path(), "overlap").is_err());

        write_gt(dir.path(), "badbox", "img 5 0 5 5\n", "a\n", "", "");
        assert!(parse_ground_truth(dir.path(), "badbox").is_err());

        assert!(parse_ground_truth(dir.path(), "missing").is_err());
    }

    #[test]
    fn crop_bbox_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(8, 8, data).unwrap();

        let full = crop_bbox(&img, (0.0, 0.0, 8.0, 8.0)).unwrap();
        assert_eq!(full, img);

        let px = crop_bbox(&img, (0.0, 0.0, 1.0, 1.0)).unwrap();
        assert_eq!(px.height, 1);
        assert_eq!(px.width, 1);
        assert_eq!(px.at(0, 0, 0), img.at(0, 0, 0));

        let frac = crop_bbox(&img, (0.4, 0.4, 1.6, 1.6)).unwrap();
        assert_eq!((frac.height, frac.width), (2, 2));
        assert_eq!(frac.at(1, 1, 1), img.at(1, 1, 1));

        assert!(crop_bbox(&img, (9.0, 9.0, 10.0, 10.0)).is_err());
    }
}
