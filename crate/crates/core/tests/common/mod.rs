#![allow(dead_code)]

use std::path::{Path, PathBuf};

use maskverify::masksynth::{LandmarkSet, Point, RasterImage, SourceEntry};

/// Even-odd point-in-polygon by ray casting, one query per pixel centre.
pub fn pnpoly(poly: &[Point], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn pnpoly_raster(poly: &[Point], w: u32, h: u32) -> Vec<bool> {
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            out.push(pnpoly(poly, x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    out
}

/// A face-sized image with a distinct value at every pixel.
pub fn textured_image(w: u32, h: u32, salt: u32) -> RasterImage {
    let mut px = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            px.push((x * 7 + salt * 13) as u8);
            px.push((y * 5 + salt * 29) as u8);
            px.push(((x ^ y) * 3 + salt) as u8);
        }
    }
    RasterImage::new(w, h, px).unwrap()
}

/// Writes `n` images with landmark files and a manifest the way the
/// extraction side lays them out. Returns the manifest path.
pub fn write_face_fixture(dir: &Path, n: u32) -> PathBuf {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("landmarks")).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        let img = textured_image(96, 112, i);
        let ext = if i % 2 == 0 { "png" } else { "ppm" };
        let image_path = PathBuf::from(format!("images/face_{i}.{ext}"));
        img.save(dir.join(&image_path)).unwrap();
        let lm = LandmarkSet::template(48.0 + i as f64, 54.0, 28.0 + i as f64);
        let landmark_path = PathBuf::from(format!("landmarks/face_{i}.json"));
        lm.save(dir.join(&landmark_path)).unwrap();
        let entry = SourceEntry {
            identity: i / 2,
            image_path,
            landmark_path,
        };
        lines.push_str(&serde_json::to_string(&entry).unwrap());
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, lines).unwrap();
    manifest
}

/// Every regular file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}
