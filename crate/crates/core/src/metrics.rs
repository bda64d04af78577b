//! Overlap and boundary-distance metrics on binary masks.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, data }
    }

    /// Foreground wherever `value > threshold`.
    pub fn threshold<V: Copy + Into<f64>>(height: usize, width: usize, values: &[V], threshold: f64) -> Result<Self> {
        Mask::new(height, width, values.iter().map(|&v| v.into() > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// `0.0` / `1.0` values, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// Foreground pixels with a 4-neighbour that is background or lies
    /// outside the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
                if edge || !self.get(r - 1, c) || !self.get(r + 1, c) || !self.get(r, c - 1) || !self.get(r, c + 1) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

fn check_pair(op: &'static str, p: &Mask, g: &Mask) -> Result<()> {
    if (p.height, p.width) != (g.height, g.width) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", p.height, p.width, g.height, g.width),
        ));
    }
    Ok(())
}

fn overlap(p: &Mask, g: &Mask) -> (usize, usize, usize) {
    let inter = p.data.iter().zip(&g.data).filter(|(&a, &b)| a && b).count();
    (inter, p.count(), g.count())
}

/// `2|P ∩ G| / (|P| + |G|)`; `1` when both masks are empty.
pub fn dice(p: &Mask, g: &Mask) -> Result<f64> {
    check_pair("dice", p, g)?;
    let (inter, np, ng) = overlap(p, g);
    Ok(if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    })
}

/// `|P ∩ G| / |P ∪ G|`; `1` when both masks are empty.
pub fn iou(p: &Mask, g: &Mask) -> Result<f64> {
    check_pair("iou", p, g)?;
    let (inter, np, ng) = overlap(p, g);
    let union = np + ng - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// F1 micro-averaged over the foreground and background classes, which for
/// a two-class pixel labelling equals the fraction of agreeing pixels.
pub fn f1_micro(p: &Mask, g: &Mask) -> Result<f64> {
    check_pair("f1", p, g)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.data.iter().zip(&g.data) {
        for class in [true, false] {
            match (a == class, b == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Squared Euclidean distance transform of a point set on an `h x w` grid
/// (exact, separable lower-envelope algorithm).
fn squared_edt(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; h * w];
    for &(r, c) in sites {
        f[r * w + c] = 0.0;
    }
    let n = h.max(w);
    let mut buf = Envelope::new(n);
    let mut line = vec![0.0; n];
    for c in 0..w {
        for r in 0..h {
            line[r] = f[r * w + c];
        }
        buf.transform(&mut line[..h]);
        for r in 0..h {
            f[r * w + c] = line[r];
        }
    }
    for r in 0..h {
        buf.transform(&mut f[r * w..(r + 1) * w]);
    }
    f
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
    out: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Envelope {
            v: vec![0; n],
            z: vec![0.0; n + 1],
            out: vec![0.0; n],
        }
    }

    /// In-place 1-D transform `d(q) = min_p (q - p)^2 + f(p)`.
    fn transform(&mut self, f: &mut [f64]) {
        let n = f.len();
        let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
        if finite.is_empty() {
            return;
        }
        let (v, z) = (&mut self.v, &mut self.z);
        let mut k = 0usize;
        v[0] = finite[0];
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for &q in &finite[1..] {
            let meet = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            let mut s = meet(v[k]);
            while s <= z[k] {
                k -= 1;
                s = meet(v[k]);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            self.out[q] = d * d + f[v[k]];
        }
        f.copy_from_slice(&self.out[..n]);
    }
}

/// For each pixel of `from`, the distance to the nearest pixel of `to`.
fn directed_distances(h: usize, w: usize, from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    let dt = squared_edt(h, w, to);
    from.iter().map(|&(r, c)| dt[r * w + c].sqrt()).collect()
}

type Pixels = Vec<(usize, usize)>;

fn boundaries(p: &Mask, g: &Mask) -> Result<(Pixels, Pixels)> {
    let n = p.height * p.width;
    for m in [p, g] {
        let c = m.count();
        if c == 0 || c == n {
            return Err(Error::EmptyBoundary);
        }
    }
    Ok((p.boundary(), g.boundary()))
}

/// Symmetric Hausdorff distance between the two masks' boundaries, in pixels.
pub fn hausdorff(p: &Mask, g: &Mask) -> Result<f64> {
    check_pair("hausdorff", p, g)?;
    let (bp, bg) = boundaries(p, g)?;
    let fwd = directed_distances(p.height, p.width, &bp, &bg);
    let bwd = directed_distances(p.height, p.width, &bg, &bp);
    Ok(fwd.into_iter().chain(bwd).fold(0.0, f64::max))
}

/// Mean of the pooled nearest-boundary distances in both directions.
pub fn asd(p: &Mask, g: &Mask) -> Result<f64> {
    check_pair("asd", p, g)?;
    let (bp, bg) = boundaries(p, g)?;
    let fwd = directed_distances(p.height, p.width, &bp, &bg);
    let bwd = directed_distances(p.height, p.width, &bg, &bp);
    let n = fwd.len() + bwd.len();
    Ok(fwd.into_iter().chain(bwd).sum::<f64>() / n as f64)
}

/// All five metrics for one prediction. Distance metrics are `None` when a
/// mask has no boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub f1: f64,
    pub hd: Option<f64>,
    pub asd: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, pred: &Mask, truth: &Mask) -> Result<Self> {
        let distance = |f: fn(&Mask, &Mask) -> Result<f64>| match f(pred, truth) {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyBoundary) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(SampleMetrics {
            id: id.into(),
            dice: dice(pred, truth)?,
            iou: iou(pred, truth)?,
            f1: f1_micro(pred, truth)?,
            hd: distance(hausdorff)?,
            asd: distance(asd)?,
        })
    }
}

/// Per-sample metrics and their averages. Samples without a boundary are
/// left out of the distance averages and counted in `excluded`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub dice: f64,
    pub iou: f64,
    pub f1: f64,
    pub hd: Option<f64>,
    pub asd: Option<f64>,
    pub excluded: usize,
}

impl MetricsReport {
    pub fn new(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySplit("selected".into()));
        }
        let mean = |vals: Vec<f64>| {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let all = |f: fn(&SampleMetrics) -> f64| mean(samples.iter().map(f).collect()).unwrap_or(0.0);
        let hd = mean(samples.iter().filter_map(|s| s.hd).collect());
        let asd = mean(samples.iter().filter_map(|s| s.asd).collect());
        Ok(MetricsReport {
            dice: all(|s| s.dice),
            iou: all(|s| s.iou),
            f1: all(|s| s.f1),
            hd,
            asd,
            excluded: samples.iter().filter(|s| s.hd.is_none()).count(),
            samples,
        })
    }

    /// `id,dice,iou,f1,hd,asd`, one row per sample; missing distances are
    /// written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,iou,f1,hd,asd\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.id,
                s.dice,
                s.iou,
                s.f1,
                opt(s.hd),
                opt(s.asd)
            ));
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        let id_w = self.samples.iter().map(|s| s.id.len()).max().unwrap_or(0).max(7);
        writeln!(f, "{:<id_w$} {:>8} {:>8} {:>8} {:>8} {:>8}", "id", "dice", "iou", "f1", "hd", "asd")?;
        for s in &self.samples {
            writeln!(
                f,
                "{:<id_w$} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8}",
                s.id,
                s.dice,
                s.iou,
                s.f1,
                cell(s.hd),
                cell(s.asd)
            )?;
        }
        write!(
            f,
            "{:<id_w$} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8}",
            "average",
            self.dice,
            self.iou,
            self.f1,
            cell(self.hd),
            cell(self.asd)
        )?;
        if self.excluded > 0 {
            write!(f, "\n({} sample(s) without a boundary excluded from hd/asd)", self.excluded)?;
        }
        Ok(())
    }
}
