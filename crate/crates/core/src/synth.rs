//! Deterministic synthetic segmentation scenes with biased class co-occurrence.
//!
//! Every sample is one foreground shape (ellipse or rectangle) of class `fg`
//! over a full-frame background of class `bg`. Each class paints with its own
//! mean color and oriented stripe texture, plus Gaussian noise. The pair
//! `(fg, bg)` is drawn from a co-occurrence table so that some combinations
//! dominate training while others almost never appear; the `test_rare` split
//! samples exactly those near-absent combinations.
//!
//! A sample's randomness is derived from `(seed, split, index)` only, so the
//! output is identical however the samples are scheduled.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::centers::{LabelMask, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::netpbm::Image8;
use crate::par;

/// Pairs with a training probability below this are "rare".
pub const RARE_THRESHOLD: f64 = 0.05;

/// Appearance of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStyle {
    /// Mean RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Stripe amplitude added to every channel.
    pub texture: f64,
    /// Stripe period in pixels.
    pub period: f64,
    /// Stripe orientation in radians.
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Image side length in pixels (images are square).
    pub size: usize,
    pub n_class: usize,
    pub palette: Vec<ClassStyle>,
    /// Row `f` is the distribution of the background class given foreground `f`.
    pub cooccurrence: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Range of the foreground's target share of the frame.
    pub fg_area: (f64, f64),
    pub seed: u64,
}

impl SceneSpec {
    pub const DEFAULT_SIZE: usize = 32;

    /// Four classes: two look-alike "objects" (0, 1) that differ only in
    /// stripe orientation, and two "surfaces" (2, 3). Object 0 nearly always
    /// sits on surface 2 and object 1 on surface 3.
    pub fn default_with(size: usize, seed: u64) -> Self {
        let style = |color: [f64; 3], texture, period, angle| ClassStyle {
            color,
            texture,
            period,
            angle,
        };
        SceneSpec {
            size,
            n_class: 4,
            palette: vec![
                style([0.55, 0.45, 0.40], 0.30, 4.0, 0.0),
                style([0.55, 0.45, 0.40], 0.30, 4.0, std::f64::consts::FRAC_PI_2),
                style([0.30, 0.60, 0.30], 0.06, 6.0, std::f64::consts::FRAC_PI_4),
                style([0.70, 0.65, 0.45], 0.06, 6.0, -std::f64::consts::FRAC_PI_4),
            ],
            cooccurrence: vec![
                vec![0.00, 0.02, 0.96, 0.02],
                vec![0.02, 0.00, 0.02, 0.96],
                vec![0.02, 0.02, 0.00, 0.96],
                vec![0.02, 0.02, 0.96, 0.00],
            ],
            noise_std: 0.08,
            fg_area: (0.08, 0.45),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_class < 2 || self.n_class >= IGNORE_LABEL as usize {
            return Err(Error::invalid(format!("n_class {} outside 2..255", self.n_class)));
        }
        if self.size < 8 {
            return Err(Error::invalid("image size must be at least 8"));
        }
        if self.palette.len() != self.n_class || self.cooccurrence.len() != self.n_class {
            return Err(Error::invalid("palette and co-occurrence need one row per class"));
        }
        for (f, row) in self.cooccurrence.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.len() != self.n_class
                || row.iter().any(|p| !(*p >= 0.0))
                || (s - 1.0).abs() > 1e-9
                || row[f] != 0.0
            {
                return Err(Error::invalid(format!(
                    "co-occurrence row {f} must be a distribution over the other classes"
                )));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        let (lo, hi) = self.fg_area;
        if !(lo > 0.0 && lo <= hi && hi <= 0.6) {
            return Err(Error::invalid(format!("fg_area ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.6")));
        }
        Ok(())
    }

    /// Foreground/background pairs whose training probability is below
    /// [`RARE_THRESHOLD`].
    pub fn rare_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for f in 0..self.n_class {
            for b in 0..self.n_class {
                if f != b && self.cooccurrence[f][b] < RARE_THRESHOLD {
                    out.push((f, b));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    TestCommon,
    TestRare,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestCommon, Split::TestRare];

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::TestCommon => 2,
            Split::TestRare => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::TestCommon => "test_common",
            Split::TestRare => "test_rare",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test_common" => Ok(Split::TestCommon),
            "test_rare" => Ok(Split::TestRare),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    /// RGB, 8 bits per channel; `value / 255` is the intensity in `[0, 1]`.
    pub image: Image8,
    pub mask: LabelMask,
    /// `(foreground, background)` class ids.
    pub combo: (usize, usize),
}

impl Sample {
    /// Image as `[H, W, 3]` intensities in `[0, 1]`.
    pub fn pixels_f32(&self) -> Vec<f32> {
        self.image.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

// SplitMix64 finalizer; decorrelates nearby (seed, split, index) triples.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ split.stream()) ^ index as u64))
}

/// Generate `count` samples of `split`.
pub fn generate(spec: &SceneSpec, count: usize, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let rare = spec.rare_pairs();
    if split == Split::TestRare && rare.is_empty() {
        return Err(Error::invalid("no rare foreground/background pair exists"));
    }
    let samples = par::map_range(count, |i| {
        let mut rng = sample_rng(spec.seed, split, i);
        let combo = match split {
            Split::TestRare => rare[rng.random_range(0..rare.len())],
            _ => {
                let fg = rng.random_range(0..spec.n_class);
                (fg, draw(&spec.cooccurrence[fg], &mut rng))
            }
        };
        render(spec, combo, &mut rng)
    });
    Ok(samples)
}

fn draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last class with mass
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn render(spec: &SceneSpec, (fg, bg): (usize, usize), rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.size;
    let area = (n * n) as f64;
    // rejection loop keeps the drawn foreground near the requested share
    let (lo, hi) = spec.fg_area;
    let inside = loop {
        let frac: f64 = rng.random_range(lo..=hi);
        let aspect: f64 = rng.random_range(0.6..1.6);
        let ellipse = rng.random_bool(0.5);
        let shape_area = frac * area;
        let k = if ellipse { std::f64::consts::PI } else { 4.0 };
        let ry = (shape_area / (k * aspect)).sqrt();
        let rx = ry * aspect;
        let max_r = n as f64 / 2.0 - 1.0;
        let (rx, ry) = (rx.min(max_r), ry.min(max_r));
        let cx = rng.random_range(rx..=(n as f64 - rx));
        let cy = rng.random_range(ry..=(n as f64 - ry));
        let inside: Vec<bool> = (0..n * n)
            .map(|p| {
                let dx = ((p % n) as f64 + 0.5 - cx) / rx;
                let dy = ((p / n) as f64 + 0.5 - cy) / ry;
                if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                }
            })
            .collect();
        let count = inside.iter().filter(|&&v| v).count() as f64;
        if count >= 1.0 && (0.5 * lo..=1.5 * hi).contains(&(count / area)) {
            break inside;
        }
    };

    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let mut boundary = false;
            for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                    boundary |= inside[yy as usize * n + xx as usize] != inside[p];
                }
            }
            labels[p] = if boundary {
                IGNORE_LABEL
            } else if inside[p] {
                fg as u8
            } else {
                bg as u8
            };
        }
    }

    let phases: Vec<f64> = (0..spec.n_class)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut data = Vec::with_capacity(n * n * 3);
    for p in 0..n * n {
        let class = if inside[p] { fg } else { bg };
        let style = &spec.palette[class];
        let (x, y) = ((p % n) as f64, (p / n) as f64);
        let t = (x * style.angle.cos() + y * style.angle.sin()) / style.period;
        let stripe = style.texture * (std::f64::consts::TAU * t + phases[class]).sin();
        for ch in 0..3 {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_std;
            let v = (style.color[ch] + stripe + noise).clamp(0.0, 1.0);
            data.push((v * 255.0).round() as u8);
        }
    }
    Sample {
        image: Image8::new(n, n, 3, data).expect("image size"),
        mask: LabelMask::new(n, n, labels).expect("mask size"),
        combo: (fg, bg),
    }
}

/// Write the image as PPM and the mask as PGM (255 = ignore).
pub fn write_sample(sample: &Sample, image_path: &Path, mask_path: &Path) -> Result<()> {
    sample.image.save(image_path)?;
    mask_to_pgm(&sample.mask)?.save(mask_path)
}

/// Read a sample written by [`write_sample`]. The combo is not stored in the
/// images and must be supplied (see [`read_index`]).
pub fn read_sample(image_path: &Path, mask_path: &Path, combo: (usize, usize)) -> Result<Sample> {
    let image = Image8::load(image_path)?;
    if image.channels != 3 {
        return Err(Error::Format {
            format: "ppm",
            reason: format!("{} is not an RGB image", image_path.display()),
        });
    }
    let mask = pgm_to_mask(&Image8::load(mask_path)?)?;
    if (mask.width(), mask.height()) != (image.width, image.height) {
        return Err(Error::invalid("mask and image sizes differ"));
    }
    Ok(Sample { image, mask, combo })
}

pub fn mask_to_pgm(mask: &LabelMask) -> Result<Image8> {
    let data = mask
        .labels()
        .iter()
        .map(|&l| if l == mask.ignore_value() { 255 } else { l })
        .collect();
    Image8::new(mask.width(), mask.height(), 1, data)
}

pub fn pgm_to_mask(img: &Image8) -> Result<LabelMask> {
    if img.channels != 1 {
        return Err(Error::Format {
            format: "pgm",
            reason: "mask must be single-channel".into(),
        });
    }
    LabelMask::new(img.height, img.width, img.data.clone())
}

/// One line of a dataset index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub fg: usize,
    pub bg: usize,
}

/// Index file name inside a dataset directory.
pub const INDEX_FILE: &str = "index.csv";

/// Write every split to `dir` as `{split}_{i:05}.ppm/.pgm` plus `index.csv`
/// (`split,image_path,mask_path,fg,bg`, paths relative to `dir`).
pub fn write_dataset(dir: &Path, splits: &[(Split, Vec<Sample>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for (split, samples) in splits {
        for (i, s) in samples.iter().enumerate() {
            let image = format!("{split}_{i:05}.ppm");
            let mask = format!("{split}_{i:05}.pgm");
            write_sample(s, &dir.join(&image), &dir.join(&mask))?;
            writeln!(index, "{split},{image},{mask},{},{}", s.combo.0, s.combo.1)
                .expect("write to Vec");
        }
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::Format {
                format: "index",
                reason: format!("line {}: {what}", n + 1),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 comma-separated fields"));
            }
            Ok(IndexEntry {
                split: f[0].parse()?,
                image: PathBuf::from(f[1]),
                mask: PathBuf::from(f[2]),
                fg: f[3].parse().map_err(|_| bad("bad fg id"))?,
                bg: f[4].parse().map_err(|_| bad("bad bg id"))?,
            })
        })
        .collect()
}

/// Load every sample of `split` listed in `dir`'s index, in index order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    read_index(dir)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| read_sample(&dir.join(&e.image), &dir.join(&e.mask), (e.fg, e.bg)))
        .collect()
}
