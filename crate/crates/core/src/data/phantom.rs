//! Synthetic vessel phantoms: thin curved tubes with a Gaussian intensity
//! profile on a noisy background, plus fainter blob distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::Mask;

/// Mean intensity of the vessel-free background.
const BACKGROUND: f64 = 0.1;
/// Distractor peak intensity as a fraction of the vessel contrast, drawn
/// from this range. The upper end stays below the vessel intensity at the
/// mask edge, `exp(-1/2) ≈ 0.61` of the contrast.
const DISTRACTOR_CONTRAST: (f64, f64) = (0.2, 0.5);
/// Polyline sampling density along each curve, in points per pixel.
const CURVE_SAMPLES_PER_PIXEL: f64 = 2.0;
/// Minimum distance between a curve's end points, as a fraction of the
/// image side, so that every vessel crosses a good part of the frame.
const MIN_SPAN: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub min_vessels: usize,
    pub max_vessels: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 224,
            min_vessels: 1,
            max_vessels: 4,
            min_width: 2.0,
            max_width: 6.0,
            contrast: 0.8,
            noise_sigma: 0.03,
            distractors: 3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return bad(format!("phantom size {} is not a positive multiple of 16", self.image_size));
        }
        if self.min_vessels == 0 || self.min_vessels > self.max_vessels {
            return bad(format!("vessel count range {}..={} invalid", self.min_vessels, self.max_vessels));
        }
        if !(self.min_width > 0.0 && self.min_width <= self.max_width) {
            return bad(format!("width range {}..={} invalid", self.min_width, self.max_width));
        }
        if self.max_width >= self.image_size as f64 / 8.0 {
            return bad(format!(
                "max width {} must be below image_size / 8 = {}",
                self.max_width,
                self.image_size as f64 / 8.0
            ));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast {} outside (0, 1]", self.contrast));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} invalid", self.noise_sigma));
        }
        Ok(())
    }
}

/// Grayscale image in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

type Point = (f64, f64);

fn bezier(p: [Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Distance from every pixel centre to the polyline, exact within `reach`
/// and `INFINITY` beyond it.
fn polyline_distance(n: usize, line: &[Point], reach: f64) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; n * n];
    let clampi = |v: f64| v.max(0.0).min((n - 1) as f64) as usize;
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (r0, r1) = (clampi(a.0.min(b.0) - reach), clampi(a.0.max(b.0) + reach + 1.0));
        let (c0, c1) = (clampi(a.1.min(b.1) - reach), clampi(a.1.max(b.1) + reach + 1.0));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d = segment_distance((r as f64, c as f64), a, b);
                let slot = &mut dist[r * n + c];
                if d < *slot {
                    *slot = d;
                }
            }
        }
    }
    dist
}

/// Image and mask for sample `index`; a pure function of `(cfg, index)`.
pub fn generate_phantom(cfg: &PhantomConfig, index: u64) -> Result<(Image, Mask)> {
    cfg.validate()?;
    let n = cfg.image_size;
    let size = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let mut signal = vec![0.0f64; n * n];
    let mut mask = Mask::empty(n, n);
    let vessels = rng.gen_range(cfg.min_vessels..=cfg.max_vessels);
    for _ in 0..vessels {
        let width = rng.gen_range(cfg.min_width..=cfg.max_width);
        let sigma = width / 2.0;
        let margin = width;
        let mut point = || (rng.gen_range(margin..size - margin), rng.gen_range(margin..size - margin));
        let start = point();
        let end = loop {
            let p = point();
            if (p.0 - start.0).hypot(p.1 - start.1) >= MIN_SPAN * size {
                break p;
            }
        };
        let ctrl = [start, point(), point(), end];
        let rough: f64 = ctrl.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).sum();
        let steps = ((rough * CURVE_SAMPLES_PER_PIXEL).ceil() as usize).max(2);
        let line: Vec<Point> = (0..=steps).map(|i| bezier(ctrl, i as f64 / steps as f64)).collect();
        let reach = (3.0 * sigma).max(width / 2.0) + 1.0;
        let dist = polyline_distance(n, &line, reach);
        for (i, &d) in dist.iter().enumerate() {
            if d.is_finite() {
                let v = cfg.contrast * (-d * d / (2.0 * sigma * sigma)).exp();
                signal[i] = signal[i].max(v);
                if d <= width / 2.0 {
                    mask.set(i / n, i % n, true);
                }
            }
        }
    }

    for _ in 0..cfg.distractors {
        let peak = cfg.contrast * rng.gen_range(DISTRACTOR_CONTRAST.0..DISTRACTOR_CONTRAST.1);
        let (cy, cx) = (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
        let (a, b) = (rng.gen_range(0.02..0.06) * size, rng.gen_range(0.02..0.06) * size);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        for r in 0..n {
            for c in 0..n {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let q = (u / a).powi(2) + (v / b).powi(2);
                if q < 9.0 {
                    let i = r * n + c;
                    signal[i] = signal[i].max(peak * (-q / 2.0).exp());
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let data = signal
        .iter()
        .map(|&s| {
            let e = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (BACKGROUND + s + e).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok((
        Image {
            height: n,
            width: n,
            data,
        },
        mask,
    ))
}
