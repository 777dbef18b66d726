//! Latent-space visualization: exact t-SNE, the halogen-salt overlay and a
//! few raster plots.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ElementPropertyTable;
use crate::error::{Error, Result};

/// `min(100, 0.05·n)`.
pub fn default_perplexity(n: usize) -> f64 {
    (0.05 * n as f64).min(100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsneInit {
    Pca,
    Random,
}

/// Exact t-SNE settings. Defaults follow common library behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: Option<f64>,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// `None` picks `max(n / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub min_gain: f64,
    pub init: TsneInit,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: None,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: None,
            min_gain: 0.01,
            init: TsneInit::Pca,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub perplexity: f64,
}

/// Conditional affinities for one row with the precision found by bisection
/// so that the entropy matches `ln(perplexity)`.
fn row_affinities(d2: &[f64], i: usize, target_entropy: f64) -> Vec<f64> {
    let n = d2.len();
    let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
    let mut p = vec![0.0; n];
    for _ in 0..100 {
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-d2[j] * beta).exp() };
            sum += p[j];
        }
        if sum == 0.0 {
            sum = 1e-300;
        }
        let mut weighted = 0.0;
        for j in 0..n {
            p[j] /= sum;
            weighted += d2[j] * p[j];
        }
        let entropy = sum.ln() + beta * weighted;
        let diff = entropy - target_entropy;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() {
                (beta + hi) / 2.0
            } else {
                beta * 2.0
            };
        } else {
            hi = beta;
            beta = if lo.is_finite() {
                (beta + lo) / 2.0
            } else {
                beta / 2.0
            };
        }
    }
    p
}

fn pca_init(x: &Array2<f64>) -> Vec<[f64; 2]> {
    let (n, d) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let c = DMatrix::from_fn(d, d, |a, b| {
        centered.column(a).dot(&centered.column(b)) / n as f64
    });
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Vec::new();
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(vec![0.0; d]);
    }
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let row = centered.row(i);
            [
                row.iter().zip(&comps[0]).map(|(a, b)| a * b).sum(),
                row.iter().zip(&comps[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    let m0 = y.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let sd = (y.iter().map(|p| (p[0] - m0).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = if sd > 0.0 { 1e-4 / sd } else { 1.0 };
    for p in &mut y {
        p[0] *= scale;
        p[1] *= scale;
    }
    y
}

/// Exact t-SNE of the rows of `x` into two dimensions.
pub fn tsne_embed(ids: &[String], x: &Array2<f64>, config: &TsneConfig) -> Result<Embedding2D> {
    let n = x.nrows();
    assert_eq!(ids.len(), n);
    if n < 10 {
        return Err(Error::Parameter(format!(
            "t-SNE needs at least 10 points, got {n}"
        )));
    }
    let perplexity = config.perplexity.unwrap_or_else(|| default_perplexity(n));
    if perplexity.is_nan() || perplexity <= 0.0 || perplexity >= n as f64 {
        return Err(Error::Parameter(format!(
            "perplexity {perplexity} must be positive and below the number of points {n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter(
            "t-SNE input contains non-finite values".into(),
        ));
    }

    let mut d2 = vec![vec![0.0; n]; n];
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d2[i][j] = d;
            d2[j][i] = d;
        }
    }
    let target = perplexity.ln();
    let cond: Vec<Vec<f64>> = (0..n).map(|i| row_affinities(&d2[i], i, target)).collect();
    let mut p = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = cond[i][j] + cond[j][i];
            p[i * n + j] = v;
            total += v;
        }
    }
    for v in &mut p {
        *v = (*v / total).max(1e-12);
    }
    for i in 0..n {
        p[i * n + i] = 0.0;
    }

    let mut y = match config.init {
        TsneInit::Pca => pca_init(x),
        TsneInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let normal = Normal::new(0.0, 1e-4).expect("valid");
            (0..n)
                .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
                .collect()
        }
    };
    let lr = config
        .learning_rate
        .unwrap_or_else(|| (n as f64 / config.early_exaggeration / 4.0).max(50.0));
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for iter in 0..config.iterations {
        let exaggerating = iter < config.exaggeration_iterations;
        let exaggeration = if exaggerating {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if exaggerating { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                qsum += 2.0 * v;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / qsum) * w;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let same_sign = (update[i][k] > 0.0) == (g[k] > 0.0);
                gains[i][k] = if same_sign {
                    (gains[i][k] * 0.8).max(config.min_gain)
                } else {
                    gains[i][k] + 0.2
                };
                update[i][k] = momentum * update[i][k] - lr * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            id: "t-SNE".into(),
            message: "embedding diverged".into(),
        });
    }
    Ok(Embedding2D {
        ids: ids.to_vec(),
        coords: y,
        perplexity,
    })
}

/// True when the species contain at least one halogen and at least one
/// metal.
pub fn contains_halogen_and_metal(species: &[String], table: &ElementPropertyTable) -> bool {
    let flags =
        |f: fn(&crate::data::Element) -> bool| species.iter().any(|s| table.get(s).is_some_and(f));
    flags(|e| e.is_halogen) && flags(|e| e.is_metal)
}

pub fn overlay_halogen_metal(
    species_lists: &[Vec<String>],
    table: &ElementPropertyTable,
) -> Vec<bool> {
    species_lists
        .iter()
        .map(|s| contains_halogen_and_metal(s, table))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Overlay {
    HalogenMetal(Vec<bool>),
    Property(Vec<f64>),
}

const WIDTH: u32 = 800;
const HEIGHT: u32 = 600;
const MARGIN: f64 = 50.0;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
pub const YELLOW: Rgb<u8> = Rgb([253, 231, 37]);
pub const PURPLE: Rgb<u8> = Rgb([68, 1, 84]);
const SERIES: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// Linear map from data bounds to pixel space with a margin.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        Frame {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = WIDTH as f64 - 2.0 * MARGIN;
        let h = HEIGHT as f64 - 2.0 * MARGIN;
        (
            MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * w,
            HEIGHT as f64 - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * h,
        )
    }
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (l, r) = (MARGIN, WIDTH as f64 - MARGIN);
    let (t, b) = (MARGIN, HEIGHT as f64 - MARGIN);
    line(&mut img, (l, b), (r, b), AXIS, None);
    line(&mut img, (l, t), (l, b), AXIS, None);
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Straight line; `dash` gives the on/off length in pixels.
fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>, dash: Option<usize>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        if dash.is_some_and(|d| (s / d) % 2 == 1) {
            continue;
        }
        let t = s as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        put(img, x.round() as i64, y.round() as i64, c);
        put(img, x.round() as i64, y.round() as i64 + 1, c);
    }
}

fn disc(img: &mut RgbImage, centre: (f64, f64), radius: f64, c: Rgb<u8>) {
    let r = radius.ceil() as i64;
    let (cx, cy) = (centre.0.round() as i64, centre.1.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// One line per series against its index, plus an optional dashed
/// horizontal reference.
pub fn plot_lines(series: &[Vec<f64>], reference: Option<f64>, path: &Path) -> Result<()> {
    let longest = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let ys = series.iter().flatten().copied().chain(reference);
    let frame = Frame::new((0..longest.max(2)).map(|i| i as f64), ys.clone());
    let mut img = canvas();
    if let Some(r) = reference {
        let a = frame.px(0.0, r);
        let b = frame.px((longest.max(2) - 1) as f64, r);
        line(&mut img, a, b, AXIS, Some(6));
    }
    for (k, s) in series.iter().enumerate() {
        let colour = SERIES[k % SERIES.len()];
        for i in 1..s.len() {
            line(
                &mut img,
                frame.px((i - 1) as f64, s[i - 1]),
                frame.px(i as f64, s[i]),
                colour,
                None,
            );
        }
        if s.len() == 1 {
            disc(&mut img, frame.px(0.0, s[0]), 2.0, colour);
        }
    }
    save(&img, path)
}

/// Viridis-like colour for `t` in [0, 1].
pub fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let pos = t * (STOPS.len() - 1) as f64;
    let k = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - k as f64;
    let c = |i: usize| (STOPS[k][i] + f * (STOPS[k + 1][i] - STOPS[k][i])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Scatter plot of an embedding coloured by `overlay`.
pub fn plot_embedding(emb: &Embedding2D, overlay: &Overlay, path: &Path) -> Result<()> {
    let n = emb.coords.len();
    let colours: Vec<Rgb<u8>> = match overlay {
        Overlay::HalogenMetal(flags) => {
            if flags.len() != n {
                return Err(Error::Parameter(
                    "overlay length does not match the embedding".into(),
                ));
            }
            flags
                .iter()
                .map(|&f| if f { YELLOW } else { PURPLE })
                .collect()
        }
        Overlay::Property(values) => {
            if values.len() != n {
                return Err(Error::Parameter(
                    "overlay length does not match the embedding".into(),
                ));
            }
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            values.iter().map(|v| colormap((v - lo) / span)).collect()
        }
    };
    let frame = Frame::new(
        emb.coords.iter().map(|p| p[0]),
        emb.coords.iter().map(|p| p[1]),
    );
    let mut img = canvas();
    // highlighted points last so they stay visible
    let mut order: Vec<usize> = (0..n).collect();
    if let Overlay::HalogenMetal(flags) = overlay {
        order.sort_by_key(|&i| flags[i]);
    }
    for i in order {
        disc(
            &mut img,
            frame.px(emb.coords[i][0], emb.coords[i][1]),
            3.0,
            colours[i],
        );
    }
    save(&img, path)
}

/// Box-and-whisker plot: median line, quartile box, whiskers at the extreme
/// values within 1.5 IQR and outliers as dots.
pub fn plot_boxes(groups: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let values = groups.iter().flat_map(|(_, v)| v.iter().copied());
    let frame = Frame::new(
        [-0.5, groups.len() as f64 - 0.5].into_iter(),
        values.clone(),
    );
    let mut img = canvas();
    for (k, (_, v)) in groups.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let (q1, med, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
        let iqr = q3 - q1;
        let lo = s
            .iter()
            .copied()
            .find(|x| *x >= q1 - 1.5 * iqr)
            .unwrap_or(q1);
        let hi = s
            .iter()
            .rev()
            .copied()
            .find(|x| *x <= q3 + 1.5 * iqr)
            .unwrap_or(q3);
        let colour = SERIES[k % SERIES.len()];
        let x = k as f64;
        let half = 0.3;
        let corners = [
            (frame.px(x - half, q1), frame.px(x + half, q1)),
            (frame.px(x - half, q3), frame.px(x + half, q3)),
            (frame.px(x - half, q1), frame.px(x - half, q3)),
            (frame.px(x + half, q1), frame.px(x + half, q3)),
            (frame.px(x, q3), frame.px(x, hi)),
            (frame.px(x, q1), frame.px(x, lo)),
            (frame.px(x - half / 2.0, hi), frame.px(x + half / 2.0, hi)),
            (frame.px(x - half / 2.0, lo), frame.px(x + half / 2.0, lo)),
        ];
        for (a, b) in corners {
            line(&mut img, a, b, colour, None);
        }
        line(
            &mut img,
            frame.px(x - half, med),
            frame.px(x + half, med),
            AXIS,
            None,
        );
        for &o in s.iter().filter(|o| **o < lo || **o > hi) {
            disc(&mut img, frame.px(x, o), 2.0, colour);
        }
    }
    save(&img, path)
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}
