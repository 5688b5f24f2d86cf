//! Images, prototypes, labelings, synthetic benchmarks and PPM files.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flows::DistanceMatrix;

/// Row-major pixel features, `channels` values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidDimension(format!(
                "image dimensions must be positive, got {height}×{width}×{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::mismatch(height * width * channels, pixels.len()));
        }
        if pixels.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.channels..(i + 1) * self.channels]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    features: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::InvalidDimension(format!(
                "need at least 2 prototypes, got {}",
                features.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::InvalidDimension("prototype features are empty".into()));
        }
        for f in &features {
            if f.len() != dim {
                return Err(Error::mismatch(dim, f.len()));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("prototype features".into()));
            }
        }
        for a in 0..features.len() {
            for b in a + 1..features.len() {
                if features[a] == features[b] {
                    return Err(Error::Domain(format!("prototypes {a} and {b} coincide")));
                }
            }
        }
        Ok(PrototypeSet { features })
    }

    pub fn c(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn get(&self, j: usize) -> &[f64] {
        &self.features[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.features.iter().map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeling {
    labels: Vec<usize>,
    c: usize,
}

impl Labeling {
    pub fn new(labels: Vec<usize>, c: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| **l >= c) {
            return Err(Error::Domain(format!("label {bad} out of range for c = {c}")));
        }
        Ok(Labeling { labels, c })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.labels.len(), self.c));
        for (i, &l) in self.labels.iter().enumerate() {
            m[[i, l]] = 1.0;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
}

pub fn distance_matrix(img: &ImageBuffer, protos: &PrototypeSet, metric: Metric) -> Result<DistanceMatrix> {
    if img.channels() != protos.dim() {
        return Err(Error::mismatch(protos.dim(), img.channels()));
    }
    let d = match metric {
        Metric::Euclidean => Array2::from_shape_fn((img.n(), protos.c()), |(i, j)| {
            img.pixel(i)
                .iter()
                .zip(protos.get(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        }),
    };
    DistanceMatrix::new(d)
}

/// `c` fully saturated colors at evenly spaced hues, quantized to `k/255`.
pub fn hue_prototypes(c: usize) -> Result<PrototypeSet> {
    if c < 2 {
        return Err(Error::InvalidDimension(format!("need c ≥ 2 labels, got {c}")));
    }
    let colors = (0..c)
        .map(|j| {
            let h = 6.0 * j as f64 / c as f64;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r, g, b].iter().map(|v: &f64| (v * 255.0).round() / 255.0).collect()
        })
        .collect();
    PrototypeSet::new(colors)
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub image: ImageBuffer,
    pub truth: Labeling,
    pub prototypes: PrototypeSet,
}

/// Voronoi partition of the grid around `c` random sites, colored by
/// [`hue_prototypes`]; each pixel is recolored with a uniformly drawn
/// prototype with probability `noise_rate`. ChaCha8 seeded from `seed`.
pub fn synth_partition(height: usize, width: usize, c: usize, seed: u64, noise_rate: f64) -> Result<Synthetic> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!(
            "image must be non-empty, got {height}×{width}"
        )));
    }
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::Domain(format!(
            "noise rate must lie in [0, 1], got {noise_rate}"
        )));
    }
    let n = height * width;
    if c > n {
        return Err(Error::InvalidDimension(format!("{c} labels exceed {n} pixels")));
    }
    let prototypes = hue_prototypes(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites: Vec<(usize, usize)> = Vec::with_capacity(c);
    while sites.len() < c {
        let s = (rng.random_range(0..height), rng.random_range(0..width));
        if !sites.contains(&s) {
            sites.push(s);
        }
    }
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            let (r, col) = ((i / width) as i64, (i % width) as i64);
            let dist = |&(sr, sc): &(usize, usize)| (r - sr as i64).pow(2) + (col - sc as i64).pow(2);
            let mut best = 0;
            for j in 1..c {
                if dist(&sites[j]) < dist(&sites[best]) {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut pixels = Vec::with_capacity(3 * n);
    for &l in &labels {
        let shown = if noise_rate > 0.0 && rng.random_bool(noise_rate) {
            rng.random_range(0..c)
        } else {
            l
        };
        pixels.extend_from_slice(prototypes.get(shown));
    }
    Ok(Synthetic {
        image: ImageBuffer::new(height, width, 3, pixels)?,
        truth: Labeling::new(labels, c)?,
        prototypes,
    })
}

/// Row-wise argmax, ties to the lowest index.
pub fn round_to_labeling(s: &Array2<f64>) -> Result<Labeling> {
    let c = s.ncols();
    let labels = s
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Labeling::new(labels, c)
}

/// Fraction of nodes where `a` and `b` disagree.
pub fn labeling_error(a: &Labeling, b: &Labeling) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let wrong = a.labels.iter().zip(&b.labels).filter(|(x, y)| x != y).count();
    Ok(wrong as f64 / a.len() as f64)
}

/// Paints each node with its prototype color.
pub fn render_labeling(labeling: &Labeling, protos: &PrototypeSet, height: usize, width: usize) -> Result<ImageBuffer> {
    if labeling.len() != height * width {
        return Err(Error::mismatch(height * width, labeling.len()));
    }
    if labeling.c() > protos.c() {
        return Err(Error::mismatch(protos.c(), labeling.c()));
    }
    let pixels = labeling
        .labels
        .iter()
        .flat_map(|&l| protos.get(l).iter().copied())
        .collect();
    ImageBuffer::new(height, width, protos.dim(), pixels)
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 bytes; a 1-channel image is written as gray RGB.
pub fn encode_ppm(img: &ImageBuffer) -> Result<Vec<u8>> {
    if img.channels() != 3 && img.channels() != 1 {
        return Err(Error::Format {
            format: "PPM",
            reason: format!("cannot encode {} channels", img.channels()),
        });
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for i in 0..img.n() {
        let p = img.pixel(i);
        if p.len() == 3 {
            out.extend(p.iter().map(|x| quantize(*x)));
        } else {
            out.extend([quantize(p[0]); 3]);
        }
    }
    Ok(out)
}

fn ppm_error(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PPM",
        reason: reason.into(),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_error("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| ppm_error("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(ppm_error(format!("unsupported magic {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| ppm_error(format!("bad {what} {s:?}")));
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ppm_error(format!("unsupported maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ppm_error("missing separator after header"));
    }
    pos += 1;
    let need = width * height * 3;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(Error::Format {
            format: "PPM",
            reason: format!("expected {need} pixel bytes for {width}×{height}, found {}", data.len()),
        });
    }
    let scale = maxval as f64;
    let pixels = data[..need].iter().map(|b| *b as f64 / scale).collect();
    ImageBuffer::new(height, width, 3, pixels)
}

pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

/// One grid row per line, comma-separated label indices.
pub fn write_labeling_csv(path: &Path, labeling: &Labeling, width: usize) -> Result<()> {
    if width == 0 || labeling.len() % width != 0 {
        return Err(Error::mismatch(format!("multiple of {width}"), labeling.len()));
    }
    let mut out = String::with_capacity(3 * labeling.len());
    for row in labeling.labels.chunks(width) {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_prototypes_csv(path: &Path, protos: &PrototypeSet) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for f in protos.iter() {
        let line: Vec<String> = f.iter().map(|x| format!("{x:.17}")).collect();
        writeln!(file, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_prototypes_csv(path: &Path) -> Result<PrototypeSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut features = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Format {
                    format: "prototype CSV",
                    reason: format!("line {}: bad number {s:?}", lineno + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        features.push(row);
    }
    PrototypeSet::new(features)
}
