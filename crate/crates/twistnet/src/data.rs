//! Deterministic synthetic oriented-texture datasets and minimal image I/O.
//!
//! Every sample is a pure function of `(dataset seed, sample id)`: generation
//! draws from a stream named after the sample, so generation order (or
//! parallelism) cannot change content. Images are grayscale in `[0, 1]`,
//! replicated to three channels where tensors are needed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::Rng;

/// Texture family of one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureClass {
    #[serde(rename = "grating-0")]
    Grating0,
    #[serde(rename = "grating-45")]
    Grating45,
    #[serde(rename = "grating-90")]
    Grating90,
    #[serde(rename = "grating-135")]
    Grating135,
    #[serde(rename = "checker")]
    Checker,
    #[serde(rename = "rings")]
    Rings,
    #[serde(rename = "blobs")]
    Blobs,
    #[serde(rename = "noise")]
    Noise,
}

impl TextureClass {
    pub const ALL: [TextureClass; 8] = [
        TextureClass::Grating0,
        TextureClass::Grating45,
        TextureClass::Grating90,
        TextureClass::Grating135,
        TextureClass::Checker,
        TextureClass::Rings,
        TextureClass::Blobs,
        TextureClass::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureClass::Grating0 => "grating-0",
            TextureClass::Grating45 => "grating-45",
            TextureClass::Grating90 => "grating-90",
            TextureClass::Grating135 => "grating-135",
            TextureClass::Checker => "checker",
            TextureClass::Rings => "rings",
            TextureClass::Blobs => "blobs",
            TextureClass::Noise => "noise",
        }
    }

    /// Grating orientation in degrees, when the class is a grating.
    pub fn orientation(self) -> Option<f64> {
        match self {
            TextureClass::Grating0 => Some(0.0),
            TextureClass::Grating45 => Some(45.0),
            TextureClass::Grating90 => Some(90.0),
            TextureClass::Grating135 => Some(135.0),
            _ => None,
        }
    }
}

/// Synthetic dataset description; content is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: Vec<TextureClass>,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Grating frequency range in cycles/pixel; sampled uniformly.
    pub freq_range: (f64, f64),
    /// Standard deviation of the additive pixel noise.
    pub noise_amp: f64,
    /// Test fraction of the train/test split (per class).
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: TextureClass::ALL.to_vec(),
            samples_per_class: 250,
            image_size: 64,
            freq_range: (0.05, 0.20),
            noise_amp: 0.05,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Dataset("no classes configured".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Dataset("samples_per_class must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Dataset("image size too small".into()));
        }
        for f in [self.freq_range.0, self.freq_range.1] {
            if !(f > 0.0 && f <= 0.5) {
                return Err(Error::Frequency(f));
            }
        }
        if self.freq_range.0 > self.freq_range.1 {
            return Err(Error::Frequency(self.freq_range.0));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Dataset(format!(
                "test fraction {} outside [0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Generator parameters recorded with each sample; regeneration from these is
/// bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub kind: TextureClass,
    pub orientation_deg: f64,
    pub frequency: f64,
    pub phase: f64,
    pub seed: u64,
    pub sample_id: usize,
}

/// One grayscale texture with its label.
#[derive(Clone, Debug)]
pub struct TextureSample {
    /// Row-major pixels in `[0, 1]`, `size x size`.
    pub pixels: Vec<f32>,
    pub size: usize,
    pub label: usize,
    pub meta: SampleMeta,
}

impl TextureSample {
    /// `[3, size, size]` tensor data: grayscale replicated to three channels.
    pub fn to_rgb(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(3 * self.pixels.len());
        for _ in 0..3 {
            out.extend_from_slice(&self.pixels);
        }
        out
    }
}

/// In-memory dataset with a per-class deterministic train/test split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<TextureSample>,
    pub test: Vec<TextureSample>,
}

impl Dataset {
    pub fn class_names(&self) -> Vec<&'static str> {
        self.spec.classes.iter().map(|c| c.name()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.classes.len()
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Oriented sinusoidal grating:
/// `g(x, y) = clamp(0.5 + 0.5 sin(2 pi f (x cos t + y sin t) + phase) + noise, 0, 1)`.
pub fn gen_grating(
    theta_deg: f64,
    freq: f64,
    phase: f64,
    size: usize,
    noise_amp: f64,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    if !(freq > 0.0 && freq <= 0.5) {
        return Err(Error::Frequency(freq));
    }
    let theta = theta_deg.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let proj = x as f64 * cos_t + y as f64 * sin_t;
            let wave = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * proj + phase).sin();
            let noise = if noise_amp > 0.0 { noise_amp * rng.normal() } else { 0.0 };
            pixels.push(clamp01(wave + noise));
        }
    }
    Ok(pixels)
}

fn gen_checker(freq: f64, phase: f64, size: usize, noise_amp: f64, rng: &mut Rng) -> Vec<f32> {
    let w = 2.0 * std::f64::consts::PI * freq;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v = 0.5 + 0.5 * (w * x as f64 + phase).sin() * (w * y as f64 + phase).sin();
            let noise = if noise_amp > 0.0 { noise_amp * rng.normal() } else { 0.0 };
            pixels.push(clamp01(v + noise));
        }
    }
    pixels
}

fn gen_rings(freq: f64, phase: f64, size: usize, noise_amp: f64, rng: &mut Rng) -> Vec<f32> {
    let c = (size as f64 - 1.0) / 2.0;
    let w = 2.0 * std::f64::consts::PI * freq;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            let v = 0.5 + 0.5 * (w * r + phase).sin();
            let noise = if noise_amp > 0.0 { noise_amp * rng.normal() } else { 0.0 };
            pixels.push(clamp01(v + noise));
        }
    }
    pixels
}

fn gen_blobs(size: usize, noise_amp: f64, rng: &mut Rng) -> Vec<f32> {
    // Low-frequency cloud: a coarse random grid upsampled bilinearly.
    let coarse = 8usize;
    let grid: Vec<f32> = (0..coarse * coarse).map(|_| rng.uniform() as f32).collect();
    let up = bilinear_resize(&grid, coarse, coarse, size, size);
    up.into_iter()
        .map(|v| {
            let noise = if noise_amp > 0.0 { noise_amp * rng.normal() } else { 0.0 };
            clamp01(v as f64 + noise)
        })
        .collect()
}

fn gen_noise(size: usize, rng: &mut Rng) -> Vec<f32> {
    (0..size * size).map(|_| rng.uniform() as f32).collect()
}

/// Generates one sample; pure in `(spec, class, sample_id)`.
pub fn gen_sample(spec: &DatasetSpec, label: usize, sample_id: usize) -> Result<TextureSample> {
    let class = spec.classes[label];
    let stream = format!("data/{}/{}", class.name(), sample_id);
    let mut rng = Rng::stream(spec.seed, &stream);
    let freq = rng.uniform_in(spec.freq_range.0, spec.freq_range.1);
    let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let orientation = class.orientation().unwrap_or(0.0);
    let pixels = match class {
        TextureClass::Grating0
        | TextureClass::Grating45
        | TextureClass::Grating90
        | TextureClass::Grating135 => {
            gen_grating(orientation, freq, phase, spec.image_size, spec.noise_amp, &mut rng)?
        }
        TextureClass::Checker => gen_checker(freq, phase, spec.image_size, spec.noise_amp, &mut rng),
        TextureClass::Rings => gen_rings(freq, phase, spec.image_size, spec.noise_amp, &mut rng),
        TextureClass::Blobs => gen_blobs(spec.image_size, spec.noise_amp, &mut rng),
        TextureClass::Noise => gen_noise(spec.image_size, &mut rng),
    };
    Ok(TextureSample {
        pixels,
        size: spec.image_size,
        label,
        meta: SampleMeta {
            kind: class,
            orientation_deg: orientation,
            frequency: freq,
            phase,
            seed: spec.seed,
            sample_id,
        },
    })
}

/// Generates the full dataset with its deterministic 80/20-style split.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let test_count =
        ((spec.samples_per_class as f64) * spec.test_fraction).round() as usize;
    for (label, class) in spec.classes.iter().enumerate() {
        // Seed-derived sample ids go to the test split; the assignment is a
        // shuffle of ids in a per-class stream.
        let mut ids: Vec<usize> = (0..spec.samples_per_class).collect();
        let mut split_rng = Rng::stream(spec.seed, &format!("split/{}", class.name()));
        split_rng.shuffle(&mut ids);
        let test_ids: std::collections::HashSet<usize> =
            ids[..test_count].iter().copied().collect();
        for sample_id in 0..spec.samples_per_class {
            let sample = gen_sample(spec, label, sample_id)?;
            if test_ids.contains(&sample_id) {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

// ── bilinear resize ──────────────────────────────────────────────────

/// Bilinear interpolation with corner alignment (`src = dst (S-1)/(D-1)`).
pub fn bilinear_resize(
    src: &[f32],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f32> {
    debug_assert_eq!(src.len(), src_h * src_w);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    let scale_y = if dst_h > 1 {
        (src_h - 1) as f64 / (dst_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if dst_w > 1 {
        (src_w - 1) as f64 / (dst_w - 1) as f64
    } else {
        0.0
    };
    for y in 0..dst_h {
        let fy = y as f64 * scale_y;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for x in 0..dst_w {
            let fx = x as f64 * scale_x;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * src_w + x0] as f64 * (1.0 - wx) + src[y0 * src_w + x1] as f64 * wx;
            let bottom =
                src[y1 * src_w + x0] as f64 * (1.0 - wx) + src[y1 * src_w + x1] as f64 * wx;
            out.push((top * (1.0 - wy) + bottom * wy) as f32);
        }
    }
    out
}

// ── PGM (P5) / PPM (P6) ──────────────────────────────────────────────

/// Binary PGM, maxval 255.
pub fn write_pgm(path: &Path, pixels: &[u8], w: usize, h: usize) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(pixels)?;
    Ok(())
}

/// Binary PPM, maxval 255, interleaved RGB.
pub fn write_ppm(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{w} {h}\n255\n")?;
    file.write_all(rgb)?;
    Ok(())
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // Skip whitespace and '#' comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decoded netpbm image: 1 (PGM) or 3 (PPM) interleaved channels.
pub struct NetpbmImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

/// Reads a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn read_netpbm(path: &Path) -> Result<NetpbmImage> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = read_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported magic '{other}'"))),
    };
    let width: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad width".into()))?;
    let height: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad height".into()))?;
    let maxval: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if pos >= bytes.len() {
        return Err(Error::Format("missing raster".into()));
    }
    pos += 1; // single whitespace after maxval
    let expected = width * height * channels;
    if bytes.len() < pos + expected {
        return Err(Error::Format(format!(
            "raster holds {} bytes, expected {}",
            bytes.len() - pos,
            expected
        )));
    }
    Ok(NetpbmImage {
        channels,
        width,
        height,
        bytes: bytes[pos..pos + expected].to_vec(),
    })
}

/// Loads any netpbm image as a 3-channel `[0, 1]` planar image, bilinearly
/// resized to `size x size`. Grayscale inputs are replicated.
pub fn load_image_as_rgb(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = read_netpbm(path)?;
    let mut planes = Vec::with_capacity(3);
    for ch in 0..3 {
        let src_ch = if img.channels == 3 { ch } else { 0 };
        let plane: Vec<f32> = (0..img.width * img.height)
            .map(|i| img.bytes[i * img.channels + src_ch] as f32 / 255.0)
            .collect();
        planes.push(bilinear_resize(&plane, img.height, img.width, size, size));
    }
    Ok(planes.concat())
}

// ── image-folder ingestion ───────────────────────────────────────────

/// A labeled image collection loaded from a directory-per-class layout.
pub struct ImageFolder {
    pub class_names: Vec<String>,
    /// `(rgb planar pixels, label)` in deterministic (class, filename) order.
    pub images: Vec<(Vec<f32>, usize)>,
    pub image_size: usize,
}

/// Loads `root/<class>/<image>.{pgm,ppm}`, resizing everything to `size`.
pub fn load_image_folder(root: &Path, size: usize) -> Result<ImageFolder> {
    let mut classes: BTreeMap<String, Vec<std::path::PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let mut files: Vec<_> = fs::read_dir(entry.path())?
                .filter_map(|f| f.ok().map(|f| f.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("pgm") | Some("ppm")
                    )
                })
                .collect();
            files.sort();
            classes.insert(name, files);
        }
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    for (label, (name, files)) in classes.into_iter().enumerate() {
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory '{name}' is empty")));
        }
        class_names.push(name);
        for file in files {
            images.push((load_image_as_rgb(&file, size)?, label));
        }
    }
    Ok(ImageFolder {
        class_names,
        images,
        image_size: size,
    })
}

// ── dataset manifest ─────────────────────────────────────────────────

/// One manifest row: where a sample was written and how it was generated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub split: String,
    pub meta: SampleMeta,
}

/// JSON manifest of a generated dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// Writes the dataset as PGM files (`<class>/<id>.pgm`) plus `manifest.json`.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for sample in samples.iter() {
            let class_name = dataset.spec.classes[sample.label].name();
            let dir = out_dir.join(class_name);
            fs::create_dir_all(&dir)?;
            let rel = format!("{}/{:05}.pgm", class_name, sample.meta.sample_id);
            let bytes: Vec<u8> = sample
                .pixels
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            write_pgm(&out_dir.join(&rel), &bytes, sample.size, sample.size)?;
            entries.push(ManifestEntry {
                path: rel,
                label: sample.label,
                split: split.to_string(),
                meta: sample.meta.clone(),
            });
        }
    }
    let manifest = Manifest {
        spec: dataset.spec.clone(),
        class_names: dataset.class_names().iter().map(|s| s.to_string()).collect(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}
