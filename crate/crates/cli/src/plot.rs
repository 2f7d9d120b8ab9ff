//! Minimal raster plots: stacked line panels and band-occupancy histograms.
//! Axis values are not drawn; the data behind each plot is written as CSV
//! next to it.

use themeforge::pipeline::StepRecord;
use themeforge::Image;

const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
const FRAME: [f64; 3] = [0.2, 0.2, 0.2];
const BAND: [f64; 3] = [0.88, 0.88, 0.88];
pub const CONCEPT_COLOR: [f64; 3] = [0.85, 0.25, 0.15];
pub const REFERENCE_COLOR: [f64; 3] = [0.15, 0.35, 0.85];
const SERIES_COLORS: [[f64; 3]; 4] = [[0.1, 0.1, 0.1], CONCEPT_COLOR, REFERENCE_COLOR, [0.1, 0.6, 0.2]];

struct Canvas {
    img: Image,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        let mut img = Image::zeros(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                for (c, v) in WHITE.iter().enumerate() {
                    img.set(x, y, c, *v);
                }
            }
        }
        Self { img }
    }

    fn put(&mut self, x: i64, y: i64, color: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.img.width() && (y as usize) < self.img.height() {
            for (c, v) in color.iter().enumerate() {
                self.img.set(x as usize, y as usize, c, *v);
            }
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [f64; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    fn frame(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) {
        self.fill(x0, y0, x1, y0, FRAME);
        self.fill(x0, y1, x1, y1, FRAME);
        self.fill(x0, y0, x0, y1, FRAME);
        self.fill(x1, y0, x1, y1, FRAME);
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [f64; 3]) {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let s = i as f64 / n as f64;
            self.put((x0 + s * (x1 - x0)).round() as i64, (y0 + s * (y1 - y0)).round() as i64, color);
        }
    }
}

/// One panel per series, stacked vertically, each scaled to its own range.
/// Non-finite points are skipped.
pub fn line_panels(series: &[(&str, Vec<(f64, f64)>)], width: usize, panel_height: usize) -> Image {
    let n = series.len().max(1);
    let mut cv = Canvas::new(width, panel_height * n);
    let m = 6.0;
    for (k, (_, pts)) in series.iter().enumerate() {
        let top = (k * panel_height) as f64;
        let (x0, x1, y0, y1) = (m, width as f64 - 1.0 - m, top + m, top + panel_height as f64 - 1.0 - m);
        cv.frame(x0 as i64, y0 as i64, x1 as i64, y1 as i64);
        let finite: Vec<(f64, f64)> = pts.iter().copied().filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let (xmin, xmax) = range(finite.iter().map(|p| p.0));
        let (ymin, ymax) = range(finite.iter().map(|p| p.1));
        let to_px = |(a, b): (f64, f64)| {
            let u = if xmax > xmin { (a - xmin) / (xmax - xmin) } else { 0.5 };
            let v = if ymax > ymin { (b - ymin) / (ymax - ymin) } else { 0.5 };
            (x0 + 1.0 + u * (x1 - x0 - 2.0), y1 - 1.0 - v * (y1 - y0 - 2.0))
        };
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        for w in finite.windows(2) {
            cv.line(to_px(w[0]), to_px(w[1]), color);
        }
        if finite.len() == 1 {
            let (px, py) = to_px(finite[0]);
            cv.put(px as i64, py as i64, color);
        }
    }
    cv.img
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Per-bin counts of drawn timesteps for each prior.
#[derive(Debug, Clone, PartialEq)]
pub struct BandHistogram {
    pub steps: usize,
    pub bins: usize,
    pub concept: Vec<usize>,
    pub reference: Vec<usize>,
    /// Configured bands as fractions of the schedule length.
    pub concept_band: Option<(f64, f64)>,
    pub reference_band: Option<(f64, f64)>,
}

impl BandHistogram {
    pub fn from_records(records: &[StepRecord], steps: usize, bins: usize) -> Self {
        let mut h = Self {
            steps,
            bins,
            concept: vec![0; bins],
            reference: vec![0; bins],
            concept_band: None,
            reference_band: None,
        };
        for r in records {
            let bin = (r.t * bins / steps).min(bins - 1);
            match r.prior {
                themeforge::diffusion::PriorRole::Concept => {
                    h.concept[bin] += 1;
                    h.concept_band = Some((r.band_lo, r.band_hi));
                }
                themeforge::diffusion::PriorRole::Reference => {
                    h.reference[bin] += 1;
                    h.reference_band = Some((r.band_lo, r.band_hi));
                }
                themeforge::diffusion::PriorRole::Theme => {}
            }
        }
        h
    }

    pub fn bin_range(&self, i: usize) -> (usize, usize) {
        (i * self.steps / self.bins, (i + 1) * self.steps / self.bins)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_lo,t_hi,concept,reference\n");
        for i in 0..self.bins {
            let (lo, hi) = self.bin_range(i);
            s.push_str(&format!("{lo},{hi},{},{}\n", self.concept[i], self.reference[i]));
        }
        s
    }

    /// Two panels over the timestep axis (concept on top, reference
    /// below) with the configured bands shaded.
    pub fn render(&self, width: usize, panel_height: usize) -> Image {
        let mut cv = Canvas::new(width, 2 * panel_height);
        let m = 6.0;
        let panels = [
            (&self.concept, self.concept_band, CONCEPT_COLOR),
            (&self.reference, self.reference_band, REFERENCE_COLOR),
        ];
        for (k, (counts, band, color)) in panels.into_iter().enumerate() {
            let top = (k * panel_height) as f64;
            let (x0, x1, y0, y1) = (m, width as f64 - 1.0 - m, top + m, top + panel_height as f64 - 1.0 - m);
            let xw = x1 - x0 - 1.0;
            if let Some((lo, hi)) = band {
                cv.fill((x0 + 1.0 + lo * xw) as i64, (y0 + 1.0) as i64, (x0 + hi * xw) as i64, (y1 - 1.0) as i64, BAND);
            }
            let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
            for (i, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let bx0 = x0 + 1.0 + xw * i as f64 / self.bins as f64;
                let bx1 = x0 + xw * (i + 1) as f64 / self.bins as f64;
                let by = y1 - 1.0 - (c as f64 / peak) * (y1 - y0 - 2.0);
                cv.fill(bx0 as i64, by as i64, bx1 as i64, (y1 - 1.0) as i64, color);
            }
            cv.frame(x0 as i64, y0 as i64, x1 as i64, y1 as i64);
        }
        cv.img
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use themeforge::diffusion::{Modality, PriorRole};

    fn rec(prior: PriorRole, t: usize) -> StepRecord {
        StepRecord {
            step: 0,
            prior,
            modality: Modality::Color,
            t,
            band_lo: 0.0,
            band_hi: 1.0,
            term_norm: 0.0,
            residual_norm: 0.0,
            total_norm: 0.0,
        }
    }

    #[test]
    fn histogram_bins_cover_the_schedule() {
        let h = BandHistogram::from_records(&[rec(PriorRole::Concept, 0), rec(PriorRole::Concept, 999), rec(PriorRole::Reference, 150)], 1000, 20);
        assert_eq!(h.concept[0], 1);
        assert_eq!(h.concept[19], 1);
        assert_eq!(h.reference[3], 1);
        assert_eq!(h.bin_range(3), (150, 200));
        let img = h.render(200, 60);
        assert_eq!((img.width(), img.height()), (200, 120));
    }

    #[test]
    fn panels_skip_non_finite_points() {
        let img = line_panels(&[("a", vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)]), ("b", vec![])], 100, 40);
        assert_eq!(img.height(), 80);
        assert!(img.all_finite());
    }
}
