//! Synthetic face-mask compositing over 68-point landmarks.
//!
//! A mask polygon hangs from a horizontal top line whose height depends on
//! the coverage level and follows the jawline (points 1 to 15) below it. The
//! wide shape keeps the straight top edge and sharp corners; the round shape
//! smooths the same outline with a closed quadratic B-spline through edge
//! midpoints. Filling uses the even-odd rule sampled at pixel centres.
//!
//! Landmark indices are 0-based in the usual 68-point order: 0..=16 jaw,
//! 27..=30 nose bridge down to the nose tip, 51 top of the upper lip.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Prng;

pub type Point = [f64; 2];

pub const LANDMARK_COUNT: usize = 68;
pub const NOSE_BRIDGE: usize = 28;
pub const NOSE_TIP: usize = 30;
pub const UPPER_LIP_TOP: usize = 51;
pub const JAW_FIRST: usize = 1;
pub const JAW_LAST: usize = 15;

/// Jaw points closer than this (pixels) to the chord between the end points
/// count as collinear.
pub const COLLINEAR_TOLERANCE: f64 = 0.5;
const ROUND_SAMPLES_PER_CORNER: usize = 8;

/// Fill colours a mask is drawn in: light blue, white, black, dark blue.
pub const PALETTE: [[u8; 3]; 4] = [[114, 188, 212], [255, 255, 255], [30, 30, 30], [0, 0, 128]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl TryFrom<Vec<Point>> for LandmarkSet {
    type Error = Error;

    fn try_from(points: Vec<Point>) -> Result<Self> {
        LandmarkSet::new(points)
    }
}

impl From<LandmarkSet> for Vec<Point> {
    fn from(l: LandmarkSet) -> Self {
        l.points
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::shape(LANDMARK_COUNT, points.len()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark"));
        }
        Ok(LandmarkSet { points })
    }

    /// A symmetric frontal face centred at `(cx, cy)` with face half-width
    /// of roughly `0.95 * s`. Jaw points sit on the lower half of an ellipse
    /// from `y = cy - 0.15s` at the ears to the chin at `cy + s`; the nose
    /// bridge runs down the centre line to the tip at `cy + 0.1s`; the upper
    /// lip top is at `cy + 0.4s`.
    pub fn template(cx: f64, cy: f64, s: f64) -> Self {
        let mut p = Vec::with_capacity(LANDMARK_COUNT);
        for i in 0..17 {
            let t = std::f64::consts::PI * i as f64 / 16.0;
            p.push([cx - 0.95 * s * t.cos(), cy - 0.15 * s + 1.15 * s * t.sin()]);
        }
        for side in [-1.0, 1.0] {
            for i in 0..5 {
                let u = if side < 0.0 { i as f64 } else { 4.0 - i as f64 };
                let arch = 0.04 * s * (1.0 - ((u - 2.0) / 2.0).powi(2));
                p.push([cx + side * (0.75 - 0.1 * u) * s, cy - 0.55 * s - arch]);
            }
        }
        for y in [-0.35, -0.2, -0.05, 0.1] {
            p.push([cx, cy + y * s]);
        }
        for i in 0..5 {
            let dip = if i == 2 { 0.02 * s } else { 0.0 };
            p.push([cx + (i as f64 - 2.0) * 0.1 * s, cy + 0.2 * s - dip]);
        }
        for side in [-1.0, 1.0] {
            let (ex, ey) = (cx + side * 0.4 * s, cy - 0.3 * s);
            for (a, b) in [
                (-1.0, 0.0),
                (-0.4, -0.5),
                (0.4, -0.5),
                (1.0, 0.0),
                (0.4, 0.5),
                (-0.4, 0.5),
            ] {
                p.push([ex + a * 0.15 * s, ey + b * 0.12 * s]);
            }
        }
        for k in 0..12 {
            let t = std::f64::consts::PI * (1.0 + k as f64 / 6.0);
            p.push([cx + 0.25 * s * t.cos(), cy + 0.5 * s + 0.1 * s * t.sin()]);
        }
        for k in 0..8 {
            let t = std::f64::consts::PI * (1.0 + k as f64 / 4.0);
            p.push([cx + 0.18 * s * t.cos(), cy + 0.5 * s + 0.04 * s * t.sin()]);
        }
        LandmarkSet::new(p).expect("template has 68 finite points")
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.points).expect("finite points serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn check_bounds(&self, width: u32, height: u32) -> Result<()> {
        for (index, &[x, y]) in self.points.iter().enumerate() {
            if !(0.0..width as f64).contains(&x) || !(0.0..height as f64).contains(&y) {
                return Err(Error::OutOfBounds {
                    index,
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    Wide,
    Round,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coverage {
    High,
    Medium,
    Low,
}

impl MaskShape {
    pub const ALL: [MaskShape; 2] = [MaskShape::Wide, MaskShape::Round];
}

impl Coverage {
    pub const ALL: [Coverage; 3] = [Coverage::High, Coverage::Medium, Coverage::Low];
}

impl fmt::Display for MaskShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            MaskShape::Wide => "wide",
            MaskShape::Round => "round",
        })
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Coverage::High => "high",
            Coverage::Medium => "medium",
            Coverage::Low => "low",
        })
    }
}

impl FromStr for MaskShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskShape::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mask shape {s:?}")))
    }
}

impl FromStr for Coverage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Coverage::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown coverage {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSpec {
    pub shape: MaskShape,
    pub coverage: Coverage,
    pub color: [u8; 3],
}

impl MaskSpec {
    /// The six shape/coverage combinations, in a fixed order.
    pub fn combinations() -> [(MaskShape, Coverage); 6] {
        let mut out = [(MaskShape::Wide, Coverage::High); 6];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = (MaskShape::ALL[k / 3], Coverage::ALL[k % 3]);
        }
        out
    }

    /// Draws the combination and then the colour, each uniformly.
    pub fn random(prng: &mut Prng) -> Self {
        let (shape, coverage) = Self::combinations()[prng.below(6)];
        let color = PALETTE[prng.below(PALETTE.len())];
        MaskSpec {
            shape,
            coverage,
            color,
        }
    }
}

/// y of the straight top edge for a coverage level (image y grows downward).
pub fn top_line(lm: &LandmarkSet, coverage: Coverage) -> f64 {
    match coverage {
        Coverage::High => lm.get(NOSE_BRIDGE)[1],
        Coverage::Medium => lm.get(NOSE_TIP)[1],
        Coverage::Low => 0.5 * (lm.get(NOSE_TIP)[1] + lm.get(UPPER_LIP_TOP)[1]),
    }
}

/// Signed shoelace area; positive for clockwise order in image coordinates.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        / 2.0
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

/// Sutherland-Hodgman clip of a closed polygon to the half-plane `y >= y0`.
fn clip_below(poly: &[Point], y0: f64) -> Vec<Point> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 2);
    for i in 0..n {
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        let (cin, nin) = (cur[1] >= y0, next[1] >= y0);
        if cin {
            out.push(cur);
        }
        if cin != nin {
            let t = (y0 - cur[1]) / (next[1] - cur[1]);
            out.push([cur[0] + t * (next[0] - cur[0]), y0]);
        }
    }
    out.dedup();
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    out
}

fn jaw_is_collinear(jaw: &[Point]) -> bool {
    let [ax, ay] = jaw[0];
    let [bx, by] = jaw[jaw.len() - 1];
    let len = (bx - ax).hypot(by - ay);
    if len < COLLINEAR_TOLERANCE {
        return true;
    }
    jaw.iter().all(|&[x, y]| {
        ((bx - ax) * (y - ay) - (by - ay) * (x - ax)).abs() / len < COLLINEAR_TOLERANCE
    })
}

fn quadratic_smooth(poly: &[Point]) -> Vec<Point> {
    let n = poly.len();
    let mid = |a: Point, b: Point| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    let mut out = Vec::with_capacity(n * ROUND_SAMPLES_PER_CORNER);
    for i in 0..n {
        let c = poly[i];
        let m0 = mid(poly[(i + n - 1) % n], c);
        let m1 = mid(c, poly[(i + 1) % n]);
        for k in 0..ROUND_SAMPLES_PER_CORNER {
            let t = k as f64 / ROUND_SAMPLES_PER_CORNER as f64;
            let (a, b, d) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
            out.push([
                a * m0[0] + b * c[0] + d * m1[0],
                a * m0[1] + b * c[1] + d * m1[1],
            ]);
        }
    }
    out.dedup();
    out
}

/// The closed outline (last vertex joins the first) of a mask.
pub fn mask_polygon(lm: &LandmarkSet, shape: MaskShape, coverage: Coverage) -> Result<Vec<Point>> {
    let jaw = &lm.points()[JAW_FIRST..=JAW_LAST];
    if jaw_is_collinear(jaw) {
        return Err(Error::DegenerateLandmarks(
            "jawline points are collinear".into(),
        ));
    }
    let top = top_line(lm, coverage);
    let first = jaw[0];
    let last = jaw[jaw.len() - 1];
    let mut outline = Vec::with_capacity(jaw.len() + 2);
    outline.push([first[0], top.min(first[1])]);
    outline.extend_from_slice(jaw);
    outline.push([last[0], top.min(last[1])]);
    let wide = clip_below(&outline, top);
    if wide.len() < 3 || area(&wide) < 1.0 {
        return Err(Error::DegenerateLandmarks(format!(
            "{coverage} mask below y = {top} has area < 1 px^2"
        )));
    }
    let poly = match shape {
        MaskShape::Wide => wide,
        MaskShape::Round => quadratic_smooth(&wide),
    };
    if area(&poly) < 1.0 {
        return Err(Error::DegenerateLandmarks("mask area < 1 px^2".into()));
    }
    Ok(poly)
}

/// Whether no two non-adjacent edges of the closed polygon touch.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let edge = |i: usize| (poly[i], poly[(i + 1) % n]);
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a, b) = edge(i);
            let (c, d) = edge(j);
            if segments_touch(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2, o3, o4) = (
        orient(a, b, c),
        orient(a, b, d),
        orient(c, d, a),
        orient(c, d, b),
    );
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Row-major RGB image with 8-bit channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(
                "image dimensions must be positive".into(),
            ));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::shape(expected, pixels.len()));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        RasterImage::new(width, height, rgb.repeat(n))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(
                &self.pixels,
                self.width,
                self.height,
                ExtendedColorType::Rgb8,
            )?;
        Ok(out)
    }

    /// Decodes any format the `image` crate recognizes (PPM and PNG are enabled).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        RasterImage::new(w, h, img.into_raw())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Saves as PNG when the extension is `png`, binary PPM otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            image::save_buffer_with_format(
                path,
                &self.pixels,
                self.width,
                self.height,
                ExtendedColorType::Rgb8,
                ImageFormat::Png,
            )?;
        } else {
            fs::write(path, self.to_ppm()?)?;
        }
        Ok(())
    }
}

/// Even-odd coverage of pixel centres, row-major, `true` inside.
///
/// For the row through `yc` every edge with `(yi > yc) != (yj > yc)` crosses
/// at `x = (xj - xi) * (yc - yi) / (yj - yi) + xi`; with the crossings sorted,
/// pixels whose centre satisfies `x[2k] <= xc < x[2k+1]` are inside.
pub fn rasterize(poly: &[Point], width: u32, height: u32) -> Vec<bool> {
    let mut inside = vec![false; width as usize * height as usize];
    let n = poly.len();
    if n < 3 {
        return inside;
    }
    let (ymin, ymax) = poly
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[1]), hi.max(p[1]))
        });
    let row_lo = (ymin - 0.5).floor().max(0.0) as u32;
    let row_hi = ((ymax - 0.5).ceil().max(-1.0) + 1.0).min(height as f64) as u32;
    let mut xs = Vec::new();
    for py in row_lo..row_hi {
        let yc = py as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let [xi, yi] = poly[i];
            let [xj, yj] = poly[(i + n - 1) % n];
            if (yi > yc) != (yj > yc) {
                xs.push((xj - xi) * (yc - yi) / (yj - yi) + xi);
            }
        }
        xs.sort_by(f64::total_cmp);
        let row = &mut inside[py as usize * width as usize..][..width as usize];
        for span in xs.chunks_exact(2) {
            let start = ((span[0] - 0.5).floor().max(0.0)) as u32;
            let end = ((span[1] + 0.5).ceil().max(0.0) as u32).min(width);
            for px in start..end {
                let xc = px as f64 + 0.5;
                if span[0] <= xc && xc < span[1] {
                    row[px as usize] = true;
                }
            }
        }
    }
    inside
}

pub fn fill_polygon(img: &mut RasterImage, poly: &[Point], rgb: [u8; 3]) {
    let cover = rasterize(poly, img.width, img.height);
    for (px, _) in img
        .pixels
        .chunks_exact_mut(3)
        .zip(&cover)
        .filter(|(_, c)| **c)
    {
        px.copy_from_slice(&rgb);
    }
}

/// Draws a random mask spec and paints it opaquely onto a copy of `img`.
pub fn apply_mask(
    img: &RasterImage,
    lm: &LandmarkSet,
    prng: &mut Prng,
) -> Result<(RasterImage, MaskSpec)> {
    lm.check_bounds(img.width, img.height)?;
    let spec = MaskSpec::random(prng);
    Ok((apply_spec(img, lm, &spec)?, spec))
}

pub fn apply_spec(img: &RasterImage, lm: &LandmarkSet, spec: &MaskSpec) -> Result<RasterImage> {
    lm.check_bounds(img.width, img.height)?;
    let poly = mask_polygon(lm, spec.shape, spec.coverage)?;
    let mut out = img.clone();
    fill_polygon(&mut out, &poly, spec.color);
    Ok(out)
}

/// One input row of a synthesis manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub identity: u32,
    pub image_path: PathBuf,
    pub landmark_path: PathBuf,
}

/// One output row: the source plus what was drawn on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedEntry {
    pub identity: u32,
    pub image_path: PathBuf,
    pub landmark_path: PathBuf,
    /// Relative to the output directory.
    pub masked_path: PathBuf,
    pub shape: MaskShape,
    pub coverage: Coverage,
    pub color: [u8; 3],
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct EntryFailure {
    pub index: usize,
    pub image_path: PathBuf,
    pub error: String,
    /// The entry failed on a missing or unreadable file.
    pub io: bool,
}

#[derive(Clone, Debug)]
pub struct SynthReport {
    pub written: Vec<MaskedEntry>,
    pub failures: Vec<EntryFailure>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SourceEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Masks every image listed in `manifest`, writing `NNNNN_<stem>.ppm` files
/// and `manifest.jsonl` into `out_dir`. Relative source paths resolve against
/// the manifest's directory. Image `i` is drawn with seed `seed ^ i`, so the
/// output does not depend on scheduling. Failed entries are reported and
/// skipped.
pub fn synth_dataset(
    manifest: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<SynthReport> {
    let manifest = manifest.as_ref();
    let out_dir = out_dir.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    fs::create_dir_all(out_dir)?;

    let results: Vec<std::result::Result<MaskedEntry, EntryFailure>> = entries
        .par_iter()
        .enumerate()
        .map(|(index, e)| {
            let img_seed = seed ^ index as u64;
            let run = || -> Result<MaskedEntry> {
                let img = RasterImage::load(base.join(&e.image_path))?;
                let lm = LandmarkSet::load(base.join(&e.landmark_path))?;
                let (masked, spec) = apply_mask(&img, &lm, &mut Prng::new(img_seed))?;
                let stem = e
                    .image_path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image");
                let masked_path = PathBuf::from(format!("{index:05}_{stem}.ppm"));
                masked.save(out_dir.join(&masked_path))?;
                Ok(MaskedEntry {
                    identity: e.identity,
                    image_path: e.image_path.clone(),
                    landmark_path: e.landmark_path.clone(),
                    masked_path,
                    shape: spec.shape,
                    coverage: spec.coverage,
                    color: spec.color,
                    seed: img_seed,
                })
            };
            run().map_err(|err| EntryFailure {
                index,
                image_path: e.image_path.clone(),
                error: err.to_string(),
                io: err.is_io(),
            })
        })
        .collect();

    let (mut written, mut failures) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(e) => written.push(e),
            Err(f) => failures.push(f),
        }
    }
    write_jsonl(out_dir.join("manifest.jsonl"), &written)?;
    Ok(SynthReport { written, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face() -> LandmarkSet {
        LandmarkSet::template(112.0, 100.0, 80.0)
    }

    fn pnpoly(poly: &[Point], x: f64, y: f64) -> bool {
        let n = poly.len();
        let mut c = false;
        let mut j = n - 1;
        for i in 0..n {
            let ([xi, yi], [xj, yj]) = (poly[i], poly[j]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                c = !c;
            }
            j = i;
        }
        c
    }

    fn oracle(poly: &[Point], w: u32, h: u32) -> Vec<bool> {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| pnpoly(poly, x as f64 + 0.5, y as f64 + 0.5))
            .collect()
    }

    #[test]
    fn template_is_symmetric_and_in_bounds() {
        let lm = face();
        lm.check_bounds(224, 224).unwrap();
        for i in 0..=16 {
            let (l, r) = (lm.get(i), lm.get(16 - i));
            assert!((l[0] + r[0] - 224.0).abs() < 1e-9 && (l[1] - r[1]).abs() < 1e-9);
        }
        assert!(lm.get(NOSE_BRIDGE)[1] < lm.get(NOSE_TIP)[1]);
        assert!(lm.get(NOSE_TIP)[1] < lm.get(UPPER_LIP_TOP)[1]);
    }

    #[test]
    fn wide_high_top_is_landmark_28() {
        let lm = face();
        let poly = mask_polygon(&lm, MaskShape::Wide, Coverage::High).unwrap();
        let top = poly.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        assert_eq!(top, lm.get(NOSE_BRIDGE)[1]);
    }

    #[test]
    fn all_six_polygons_simple_and_distinct() {
        let lm = face();
        let rasters: Vec<Vec<bool>> = MaskSpec::combinations()
            .iter()
            .map(|&(s, c)| {
                let p = mask_polygon(&lm, s, c).unwrap();
                assert!(is_simple(&p), "{s}/{c}");
                rasterize(&p, 224, 224)
            })
            .collect();
        for i in 0..6 {
            for j in i + 1..6 {
                let xor = rasters[i]
                    .iter()
                    .zip(&rasters[j])
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(xor > 0, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn coverage_monotone() {
        let lm = face();
        for shape in MaskShape::ALL {
            let a: Vec<f64> = Coverage::ALL
                .iter()
                .map(|&c| area(&mask_polygon(&lm, shape, c).unwrap()))
                .collect();
            assert!(a[2] < a[1] && a[1] < a[0], "{shape}: {a:?}");
        }
    }

    #[test]
    fn collinear_jaw_is_degenerate() {
        let mut pts = face().points().to_vec();
        for (k, p) in pts[1..=15].iter_mut().enumerate() {
            *p = [40.0 + 10.0 * k as f64, 190.0];
        }
        let lm = LandmarkSet::new(pts).unwrap();
        assert!(matches!(
            mask_polygon(&lm, MaskShape::Wide, Coverage::High),
            Err(Error::DegenerateLandmarks(_))
        ));
    }

    #[test]
    fn top_line_below_jaw_is_degenerate() {
        let mut pts = face().points().to_vec();
        pts[NOSE_BRIDGE][1] = 223.0;
        let lm = LandmarkSet::new(pts).unwrap();
        assert!(matches!(
            mask_polygon(&lm, MaskShape::Wide, Coverage::High),
            Err(Error::DegenerateLandmarks(_))
        ));
    }

    #[test]
    fn landmark_json_round_trip_and_count() {
        let lm = face();
        assert_eq!(LandmarkSet::from_json(&lm.to_json()).unwrap(), lm);
        assert!(LandmarkSet::from_json("[[1,2],[3,4]]").is_err());
    }

    #[test]
    fn out_of_bounds_landmark() {
        let img = RasterImage::filled(100, 100, [0, 0, 0]).unwrap();
        let err = apply_mask(&img, &face(), &mut Prng::new(0)).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }));
    }

    #[test]
    fn only_polygon_pixels_change() {
        let img = RasterImage::filled(224, 224, [255, 255, 255]).unwrap();
        let lm = face();
        for seed in 0..12 {
            let (out, spec) = apply_mask(&img, &lm, &mut Prng::new(seed)).unwrap();
            let poly = mask_polygon(&lm, spec.shape, spec.coverage).unwrap();
            let cover = oracle(&poly, 224, 224);
            for y in 0..224 {
                for x in 0..224 {
                    let inside = cover[(y * 224 + x) as usize];
                    let want = if inside { spec.color } else { [255, 255, 255] };
                    assert_eq!(out.pixel(x, y), want);
                }
            }
        }
    }

    #[test]
    fn high_coverage_never_above_bridge() {
        let lm = LandmarkSet::template(112.0, 40.0, 30.0);
        let img = RasterImage::filled(224, 224, [9, 9, 9]).unwrap();
        let spec = MaskSpec {
            shape: MaskShape::Wide,
            coverage: Coverage::High,
            color: [0, 0, 128],
        };
        let out = apply_spec(&img, &lm, &spec).unwrap();
        let top = lm.get(NOSE_BRIDGE)[1];
        for y in 0..224u32 {
            for x in 0..224u32 {
                if (y as f64 + 0.5) < top {
                    assert_eq!(out.pixel(x, y), [9, 9, 9]);
                }
            }
        }
    }

    #[test]
    fn scanline_matches_pnpoly_on_random_polygons() {
        let mut p = Prng::new(42);
        for _ in 0..30 {
            let n = 3 + p.below(12);
            let poly: Vec<Point> = (0..n)
                .map(|_| [p.uniform_range(-5.0, 69.0), p.uniform_range(-5.0, 53.0)])
                .collect();
            assert_eq!(rasterize(&poly, 64, 48), oracle(&poly, 64, 48));
        }
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = RasterImage::filled(5, 3, [1, 2, 3]).unwrap();
        img.set_pixel(4, 2, [200, 100, 50]);
        let bytes = img.to_ppm().unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(RasterImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = RasterImage::filled(4, 4, [7, 8, 9]).unwrap();
        img.set_pixel(0, 3, [255, 0, 0]);
        img.save(&path).unwrap();
        assert_eq!(RasterImage::load(&path).unwrap(), img);
    }

    #[test]
    fn spec_draw_is_seeded() {
        let a: Vec<MaskSpec> = (0..20)
            .map(|s| MaskSpec::random(&mut Prng::new(s)))
            .collect();
        let b: Vec<MaskSpec> = (0..20)
            .map(|s| MaskSpec::random(&mut Prng::new(s)))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn enum_names_parse() {
        for s in MaskShape::ALL {
            assert_eq!(s.to_string().parse::<MaskShape>().unwrap(), s);
        }
        for c in Coverage::ALL {
            assert_eq!(c.to_string().parse::<Coverage>().unwrap(), c);
        }
    }
}
