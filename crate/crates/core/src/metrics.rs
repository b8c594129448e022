//! Verification scoring and error-rate metrics.
//!
//! Scores are similarities: higher means "more likely the same identity".
//! A comparison is accepted at threshold `t` when `score >= t`, so
//!
//! * `FMR(t)  = |{impostor >= t}| / |impostor|`
//! * `FNMR(t) = |{genuine  <  t}| / |genuine|`
//!
//! Every threshold metric is evaluated over the same discrete sweep: each
//! distinct observed score, plus a final `+inf` threshold that rejects
//! everything.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{l2_normalize, Vec64};

/// Ceiling for FMR100 (FMR < 1%).
pub const FMR100_CEILING: f64 = 0.01;
/// Ceiling for FMR10 (FMR < 10%).
pub const FMR10_CEILING: f64 = 0.10;

/// Cosine similarity in `[-1, 1]`.
pub fn score(e1: &Vec64, e2: &Vec64) -> Result<f64> {
    let u = l2_normalize(e1)?;
    let v = l2_normalize(e2)?;
    Ok(u.dot(&v)?.clamp(-1.0, 1.0))
}

/// Genuine and impostor comparison scores, stored sorted ascending so that
/// every derived quantity is independent of the order pairs were scored in.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(mut genuine: Vec<f64>, mut impostor: Vec<f64>) -> Result<Self> {
        if genuine.is_empty() {
            return Err(Error::EmptyScores("genuine"));
        }
        if impostor.is_empty() {
            return Err(Error::EmptyScores("impostor"));
        }
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores"));
        }
        genuine.sort_by(f64::total_cmp);
        impostor.sort_by(f64::total_cmp);
        Ok(ScoreSet { genuine, impostor })
    }

    pub fn genuine(&self) -> &[f64] {
        &self.genuine
    }

    pub fn impostor(&self) -> &[f64] {
        &self.impostor
    }

    fn fmr(&self, t: f64) -> f64 {
        let accepted = self.impostor.len() - self.impostor.partition_point(|&s| s < t);
        accepted as f64 / self.impostor.len() as f64
    }

    fn fnmr(&self, t: f64) -> f64 {
        let rejected = self.genuine.partition_point(|&s| s < t);
        rejected as f64 / self.genuine.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// Operating points ordered by increasing threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc(s: &ScoreSet) -> RocCurve {
    let mut thresholds: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    RocCurve {
        points: thresholds
            .into_iter()
            .map(|t| RocPoint {
                threshold: t,
                fmr: s.fmr(t),
                fnmr: s.fnmr(t),
            })
            .collect(),
    }
}

/// `(FMR + FNMR) / 2` at the swept threshold minimizing `|FMR − FNMR|`,
/// ties broken toward the smaller sum.
pub fn eer(s: &ScoreSet) -> f64 {
    let best = roc(s)
        .points
        .into_iter()
        .min_by(|x, y| {
            let kx = ((x.fmr - x.fnmr).abs(), x.fmr + x.fnmr);
            let ky = ((y.fmr - y.fnmr).abs(), y.fmr + y.fnmr);
            kx.0.total_cmp(&ky.0).then(kx.1.total_cmp(&ky.1))
        })
        .expect("sweep always has the +inf point");
    (best.fmr + best.fnmr) / 2.0
}

/// EER by linear interpolation where `FMR − FNMR` changes sign between two
/// consecutive operating points. Falls back to [`eer`] if the curves touch.
pub fn eer_interpolated(s: &ScoreSet) -> f64 {
    let pts = roc(s).points;
    for w in pts.windows(2) {
        let d0 = w[0].fmr - w[0].fnmr;
        let d1 = w[1].fmr - w[1].fnmr;
        if d0 == 0.0 {
            return w[0].fmr;
        }
        if d0 > 0.0 && d1 < 0.0 {
            let t = d0 / (d0 - d1);
            let fmr = w[0].fmr + t * (w[1].fmr - w[0].fmr);
            let fnmr = w[0].fnmr + t * (w[1].fnmr - w[0].fnmr);
            return (fmr + fnmr) / 2.0;
        }
    }
    eer(s)
}

/// Lowest FNMR over swept thresholds whose FMR is strictly below `ceiling`.
pub fn fmr_at(s: &ScoreSet, ceiling: f64) -> Result<f64> {
    if !(ceiling > 0.0 && ceiling < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "FMR ceiling {ceiling} not in (0, 1)"
        )));
    }
    Ok(roc(s)
        .points
        .iter()
        .filter(|p| p.fmr < ceiling)
        .map(|p| p.fnmr)
        .fold(1.0, f64::min))
}

/// P(genuine > impostor) + ½·P(genuine == impostor), counted exactly.
pub fn auc(s: &ScoreSet) -> f64 {
    let mut twice_wins: u128 = 0;
    for &g in &s.genuine {
        let below = s.impostor.partition_point(|&x| x < g) as u128;
        let at_or_below = s.impostor.partition_point(|&x| x <= g) as u128;
        twice_wins += 2 * below + (at_or_below - below);
    }
    let pairs = 2 * s.genuine.len() as u128 * s.impostor.len() as u128;
    twice_wins as f64 / pairs as f64
}

pub fn gmean_imean(s: &ScoreSet) -> (f64, f64) {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    (mean(&s.genuine), mean(&s.impostor))
}

/// The six numbers reported per system and comparison mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gmean: f64,
    pub imean: f64,
    pub auc: f64,
    pub eer: f64,
    pub fmr100: f64,
    pub fmr10: f64,
}

impl MetricReport {
    pub fn compute(s: &ScoreSet) -> Self {
        let (gmean, imean) = gmean_imean(s);
        MetricReport {
            gmean,
            imean,
            auc: auc(s),
            eer: eer(s),
            fmr100: fmr_at(s, FMR100_CEILING).expect("constant ceiling"),
            fmr10: fmr_at(s, FMR10_CEILING).expect("constant ceiling"),
        }
    }
}

pub fn write_roc_csv(path: impl AsRef<Path>, curve: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fmr", "fnmr"])?;
    for p in &curve.points {
        w.write_record([
            p.threshold.to_string(),
            p.fmr.to_string(),
            p.fnmr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_roc_csv(path: impl AsRef<Path>) -> Result<RocCurve> {
    let mut r = csv::Reader::from_path(path)?;
    let points = r
        .deserialize::<RocPoint>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(RocCurve { points })
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Renders TPR (1 − FNMR) against FMR for one or more named curves.
pub fn roc_svg(title: &str, curves: &[(&str, &RocCurve)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 480.0;
    const M: f64 = 56.0;
    let px = |fmr: f64| M + fmr * (W - 2.0 * M);
    let py = |tpr: f64| H - M - tpr * (H - 2.0 * M);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    for i in 0..=10 {
        let f = i as f64 / 10.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="#eee"/><line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#eee"/>"##,
            x = px(f),
            y = py(f),
            x0 = px(0.0),
            x1 = px(1.0),
            y0 = py(0.0),
            y1 = py(1.0),
        );
        if i % 2 == 0 {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{f:.1}</text><text x="{}" y="{}" text-anchor="end">{f:.1}</text>"#,
                px(f),
                py(0.0) + 16.0,
                px(0.0) - 6.0,
                py(f) + 4.0,
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">FMR</text><text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">1 - FNMR</text>"#,
        W / 2.0,
        H - 14.0,
        H / 2.0,
        H / 2.0
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.fmr), py(1.0 - p.fnmr)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = py(0.0) - 16.0 - 16.0 * (curves.len() - 1 - i) as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            px(0.55),
            px(0.62),
            px(0.64),
            ly + 4.0,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_roc_svg(
    path: impl AsRef<Path>,
    title: &str,
    curves: &[(&str, &RocCurve)],
) -> Result<()> {
    fs::write(path, roc_svg(title, curves))?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
