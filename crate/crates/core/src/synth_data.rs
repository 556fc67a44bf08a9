//! Deterministic synthetic scenes with ground-truth geometry and prompts.
//!
//! A scene is one shape on a smooth seeded background. Every attribute maps
//! to one vocabulary word; the prompt is `[shape, x, y, size, intensity]`
//! padded with the pad token.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::tensor::ImageTensor;
use crate::vocab::{self, Prompt};

pub const IMAGE_SIZE: usize = 32;
/// Background seeds are drawn from `0..SEED_SPACE`.
pub const SEED_SPACE: u32 = 1 << 16;
const SUPERSAMPLE: usize = 8;

macro_rules! attribute {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

attribute!(Shape { Disc => "disc", Square => "square", Triangle => "triangle" });
attribute!(XPos { Left => "left", Center => "center", Right => "right" });
attribute!(YPos { Top => "top", Middle => "middle", Bottom => "bottom" });
attribute!(Size { Small => "small", Large => "large" });
attribute!(Intensity { Dark => "dark", Bright => "bright" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub x_pos: XPos,
    pub y_pos: YPos,
    pub size: Size,
    pub intensity: Intensity,
    pub background_seed: u32,
}

impl SceneSpec {
    /// Shape centre in pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub fn center(&self) -> (f64, f64) {
        let cell = IMAGE_SIZE as f64 / 4.0;
        let x = match self.x_pos {
            XPos::Left => cell,
            XPos::Center => 2.0 * cell,
            XPos::Right => 3.0 * cell,
        };
        let y = match self.y_pos {
            YPos::Top => cell,
            YPos::Middle => 2.0 * cell,
            YPos::Bottom => 3.0 * cell,
        };
        (x, y)
    }

    /// Disc radius, or half the bounding box of the other shapes.
    pub fn radius(&self) -> f64 {
        match self.size {
            Size::Small => 4.5,
            Size::Large => 7.0,
        }
    }

    pub fn foreground_level(&self) -> f64 {
        match self.intensity {
            Intensity::Dark => 0.08,
            Intensity::Bright => 0.92,
        }
    }

    /// Whether the continuous point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center();
        let r = self.radius();
        match self.shape {
            Shape::Disc => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square => {
                let half = 0.85 * r;
                (x - cx).abs() <= half && (y - cy).abs() <= half
            }
            Shape::Triangle => {
                let top = cy - r;
                y >= top && y <= cy + r && (x - cx).abs() <= (y - top) / 2.0
            }
        }
    }

    /// Fractional coverage of pixel `(px, py)` from an `n x n` sample grid.
    pub fn coverage(&self, px: usize, py: usize, n: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..n {
            for sx in 0..n {
                let x = px as f64 + (sx as f64 + 0.5) / n as f64;
                let y = py as f64 + (sy as f64 + 0.5) / n as f64;
                hits += self.contains(x, y) as usize;
            }
        }
        hits as f64 / (n * n) as f64
    }

    pub fn without_seed(&self) -> (Shape, XPos, YPos, Size, Intensity) {
        (self.shape, self.x_pos, self.y_pos, self.size, self.intensity)
    }
}

/// Smooth background: a base level plus three low-frequency cosines.
pub fn background(seed: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB4C6_0000 ^ seed as u64);
    let base = rng.random_range(0.38..0.62);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let (fx, fy) = loop {
                let f = (rng.random_range(0..3) as f64, rng.random_range(0..3) as f64);
                if f != (0.0, 0.0) {
                    break f;
                }
            };
            (fx, fy, rng.random_range(0.03..0.08), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let n = IMAGE_SIZE as f64;
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let mut val = base;
            for &(fx, fy, a, ph) in &waves {
                val += a * (2.0 * PI * (fx * u + fy * v) + ph).cos();
            }
            out.push(val.clamp(0.2, 0.8));
        }
    }
    out
}

/// A rendered scene and its footprint (`true` where coverage ≥ 50%).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub image: ImageTensor,
    pub footprint: Vec<bool>,
}

pub fn render_scene(spec: &SceneSpec) -> RenderedScene {
    let bg = background(spec.background_seed);
    let fg = spec.foreground_level();
    let mut footprint = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    let mut pixels = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let cov = spec.coverage(x, y, SUPERSAMPLE);
            let b = bg[y * IMAGE_SIZE + x];
            pixels.push((b * (1.0 - cov) + fg * cov) as f32);
            footprint.push(cov >= 0.5);
        }
    }
    RenderedScene {
        image: ImageTensor::from_vec((1, IMAGE_SIZE, IMAGE_SIZE), pixels).expect("scene shape"),
        footprint,
    }
}

pub fn scene_prompt(spec: &SceneSpec) -> Prompt {
    let words = [
        spec.shape.word(),
        spec.x_pos.word(),
        spec.y_pos.word(),
        spec.size.word(),
        spec.intensity.word(),
    ];
    let ids: Vec<usize> = words
        .iter()
        .map(|w| vocab::token(w).expect("scene words are in the vocabulary"))
        .collect();
    Prompt::from_tokens(&ids).expect("five tokens fit")
}

/// Token position of each attribute inside a scene prompt.
pub mod slot {
    pub const SHAPE: usize = 0;
    pub const X_POS: usize = 1;
    pub const Y_POS: usize = 2;
    pub const SIZE: usize = 3;
    pub const INTENSITY: usize = 4;
}

/// Inverse of [`scene_prompt`]; the seed is not part of a prompt.
pub fn parse_prompt(prompt: &Prompt, background_seed: u32) -> Result<SceneSpec> {
    let words: Vec<&str> = prompt.tokens()[..5]
        .iter()
        .map(|&t| vocab::word(t).unwrap_or("?"))
        .collect();
    let bad = || Error::Usage(format!("{:?} is not a scene prompt", prompt.text()));
    if prompt.tokens()[5..].iter().any(|&t| t != vocab::PAD) {
        return Err(bad());
    }
    Ok(SceneSpec {
        shape: Shape::from_word(words[0]).ok_or_else(bad)?,
        x_pos: XPos::from_word(words[1]).ok_or_else(bad)?,
        y_pos: YPos::from_word(words[2]).ok_or_else(bad)?,
        size: Size::from_word(words[3]).ok_or_else(bad)?,
        intensity: Intensity::from_word(words[4]).ok_or_else(bad)?,
        background_seed,
    })
}

fn attribute_combinations() -> usize {
    Shape::ALL.len() * XPos::ALL.len() * YPos::ALL.len() * Size::ALL.len() * Intensity::ALL.len()
}

/// Number of distinct scene specs available to a split.
pub fn spec_budget() -> usize {
    attribute_combinations() * SEED_SPACE as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<SceneSpec>,
    pub test: Vec<SceneSpec>,
}

fn balanced<T: Copy>(values: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v: Vec<T> = (0..n).map(|i| values[i % values.len()]).collect();
    v.shuffle(rng);
    v
}

/// Disjoint train/test specs; every test attribute value appears
/// `⌊n_test / k⌋` times or more for an attribute with `k` values.
pub fn make_split(seed: u64, n_train: usize, n_test: usize) -> Result<Dataset> {
    if n_train + n_test > spec_budget() {
        return Err(Error::Usage(format!(
            "{} scenes requested, only {} distinct specs exist",
            n_train + n_test,
            spec_budget()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let shapes = balanced(Shape::ALL, n_test, &mut rng);
    let xs = balanced(XPos::ALL, n_test, &mut rng);
    let ys = balanced(YPos::ALL, n_test, &mut rng);
    let sizes = balanced(Size::ALL, n_test, &mut rng);
    let levels = balanced(Intensity::ALL, n_test, &mut rng);
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        loop {
            let spec = SceneSpec {
                shape: shapes[i],
                x_pos: xs[i],
                y_pos: ys[i],
                size: sizes[i],
                intensity: levels[i],
                background_seed: rng.random_range(0..SEED_SPACE),
            };
            if seen.insert(spec) {
                test.push(spec);
                break;
            }
        }
    }
    let mut train = Vec::with_capacity(n_train);
    while train.len() < n_train {
        let spec = SceneSpec {
            shape: *Shape::ALL.choose(&mut rng).unwrap(),
            x_pos: *XPos::ALL.choose(&mut rng).unwrap(),
            y_pos: *YPos::ALL.choose(&mut rng).unwrap(),
            size: *Size::ALL.choose(&mut rng).unwrap(),
            intensity: *Intensity::ALL.choose(&mut rng).unwrap(),
            background_seed: rng.random_range(0..SEED_SPACE),
        };
        if seen.insert(spec) {
            train.push(spec);
        }
    }
    Ok(Dataset { seed, train, test })
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    prompt: String,
    spec: SceneSpec,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    seed: u64,
    train: Vec<IndexEntry>,
    test: Vec<IndexEntry>,
}

impl Dataset {
    /// Writes `train/NNNNN.png`, `test/NNNNN.png` and `index.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut index = DatasetIndex {
            seed: self.seed,
            train: Vec::new(),
            test: Vec::new(),
        };
        for (name, specs) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(name);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (i, spec) in specs.iter().enumerate() {
                let file = format!("{name}/{i:05}.png");
                image_io::write_png(dir.join(&file), &render_scene(spec).image)?;
                let entry = IndexEntry {
                    file,
                    prompt: scene_prompt(spec).text(),
                    spec: *spec,
                };
                if name == "train" {
                    index.train.push(entry);
                } else {
                    index.test.push(entry);
                }
            }
        }
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("index.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_slice(&bytes)?;
        Ok(Dataset {
            seed: index.seed,
            train: index.train.into_iter().map(|e| e.spec).collect(),
            test: index.test.into_iter().map(|e| e.spec).collect(),
        })
    }
}

/// Dilates a square binary grid by one pixel (8-neighbourhood).
pub fn dilate(mask: &[bool], size: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..size {
        for x in 0..size {
            if !mask[y * size + x] {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < size && (nx as usize) < size {
                        out[ny as usize * size + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}
