use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{CaptionedImage, ProbeMeta};
use crate::error::{Error, Result};

/// Closed vocabulary of every probe caption, question and answer.
pub const PROBE_WORDS: [&str; 32] = [
    "a", "an", "and", "the", "in", "of", "is", "it", "red", "green", "blue", "yellow", "purple", "orange", "circle", "square", "triangle",
    "upper", "lower", "middle", "left", "right", "center", "above", "below", "beside", "what", "color", "shape", "describe", "image",
    "briefly",
];

pub const GRID: u8 = 3;
pub const NUM_CLASSES: usize = Color::ALL.len() * ShapeKind::ALL.len();
const BACKGROUND: [f32; 3] = [0.92, 0.92, 0.92];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn name(self) -> &'static str {
        ["red", "green", "blue", "yellow", "purple", "orange"][self as usize]
    }

    pub fn rgb(self) -> [f32; 3] {
        let c: [u8; 3] = match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 160, 50],
            Color::Blue => [30, 70, 220],
            Color::Yellow => [235, 215, 30],
            Color::Purple => [140, 40, 170],
            Color::Orange => [245, 135, 20],
        };
        c.map(|v| f32::from(v) / 255.0)
    }

    pub fn from_index(i: u8) -> Option<Color> {
        Color::ALL.get(usize::from(i)).copied()
    }

    fn article(self) -> &'static str {
        if self == Color::Orange {
            "an"
        } else {
            "a"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        ["circle", "square", "triangle"][self as usize]
    }

    pub fn from_index(i: u8) -> Option<ShapeKind> {
        ShapeKind::ALL.get(usize::from(i)).copied()
    }
}

/// One shape on the 3×3 grid. Row 0 is the top, column 0 the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlacedShape {
    pub row: u8,
    pub col: u8,
    pub color: Color,
    pub shape: ShapeKind,
}

impl PlacedShape {
    fn noun_phrase(&self) -> String {
        format!("{} {} {}", self.color.article(), self.color.name(), self.shape.name())
    }

    fn position(&self) -> &'static str {
        const NAMES: [[&str; 3]; 3] = [
            ["upper left", "upper center", "upper right"],
            ["middle left", "center", "middle right"],
            ["lower left", "lower center", "lower right"],
        ];
        NAMES[usize::from(self.row)][usize::from(self.col)]
    }
}

/// Class id of a single-shape record: `color * 3 + shape`.
pub fn class_id(color: Color, shape: ShapeKind) -> u8 {
    color as u8 * ShapeKind::ALL.len() as u8 + shape as u8
}

pub fn class_of(id: u8) -> Option<(Color, ShapeKind)> {
    Some((Color::from_index(id / 3)?, ShapeKind::from_index(id % 3)?))
}

/// Text used for a class in zero-shot prompts, e.g. "red circle".
pub fn class_name(id: u8) -> Option<String> {
    class_of(id).map(|(c, s)| format!("{} {}", c.name(), s.name()))
}

fn reading_order(layout: &[PlacedShape]) -> Vec<PlacedShape> {
    let mut v = layout.to_vec();
    v.sort_by_key(|s| (s.row, s.col));
    v
}

/// Short caption: the shapes in reading order without positions.
pub fn original_caption(layout: &[PlacedShape]) -> String {
    reading_order(layout).iter().map(PlacedShape::noun_phrase).collect::<Vec<_>>().join(" and ")
}

/// Long caption: every shape with its position and its relation to the previous one.
pub fn synthetic_caption(layout: &[PlacedShape]) -> String {
    let shapes = reading_order(layout);
    let mut out = String::new();
    for (i, s) in shapes.iter().enumerate() {
        if i > 0 {
            out.push_str(if shapes[i - 1].row < s.row { " above " } else { " beside " });
        }
        out.push_str(&format!("{} in the {}", s.noun_phrase(), s.position()));
    }
    out
}

/// Which layouts the generator draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    /// 1–3 shapes, distinct layouts while the layout space allows.
    #[default]
    Mixed,
    /// One shape per image; record `i` has class `i mod 18` at a random cell.
    Stratified,
}

/// Rasterises a layout at `resolution × resolution`.
pub fn render(layout: &[PlacedShape], resolution: usize) -> Image {
    let mut img = Image::filled(resolution, resolution, BACKGROUND);
    let cell = resolution as f64 / f64::from(GRID);
    let r = 0.38 * cell;
    for s in layout {
        let cx = (f64::from(s.col) + 0.5) * cell;
        let cy = (f64::from(s.row) + 0.5) * cell;
        let rgb = s.color.rgb();
        for y in 0..resolution {
            for x in 0..resolution {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match s.shape {
                    ShapeKind::Circle => dx * dx + dy * dy <= r * r,
                    ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
                    ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
                };
                if inside {
                    let i = (y * resolution + x) * 3;
                    img.data[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    img
}

fn random_shape(rng: &mut ChaCha8Rng, row: u8, col: u8) -> PlacedShape {
    PlacedShape {
        row,
        col,
        color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
        shape: ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
    }
}

fn random_layout(rng: &mut ChaCha8Rng) -> Vec<PlacedShape> {
    let count = rng.gen_range(1..=3);
    let mut cells: Vec<u8> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let mut layout: Vec<_> = cells[..count].iter().map(|&c| random_shape(rng, c / GRID, c % GRID)).collect();
    layout.sort();
    layout
}

/// Builds one record from a layout; captions are a pure function of it.
pub fn probe_record(id: u64, layout: Vec<PlacedShape>, resolution: usize) -> Result<CaptionedImage> {
    let label = match layout.as_slice() {
        [only] => Some(class_id(only.color, only.shape)),
        _ => None,
    };
    Ok(CaptionedImage {
        id,
        png: render(&layout, resolution).to_png()?,
        caption_original: original_caption(&layout),
        caption_synthetic: synthetic_caption(&layout),
        meta: Some(ProbeMeta { label, layout }),
    })
}

/// Deterministic synthetic dataset of `n` mixed-layout records.
pub fn gen_probe_dataset(seed: u64, n: usize, resolution: usize) -> Result<Vec<CaptionedImage>> {
    gen_probe_dataset_with(seed, n, resolution, ProbeMode::Mixed)
}

pub fn gen_probe_dataset_with(seed: u64, n: usize, resolution: usize, mode: ProbeMode) -> Result<Vec<CaptionedImage>> {
    if n == 0 {
        return Err(Error::Contract("probe dataset needs n >= 1".into()));
    }
    if resolution < 8 {
        return Err(Error::Contract(format!("probe resolution {resolution} is below 8 px")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    (0..n)
        .map(|i| {
            let layout = match mode {
                ProbeMode::Stratified => {
                    let (color, shape) = class_of((i % NUM_CLASSES) as u8).expect("class index in range");
                    let cell = rng.gen_range(0..GRID * GRID);
                    vec![PlacedShape { row: cell / GRID, col: cell % GRID, color, shape }]
                }
                ProbeMode::Mixed => {
                    let mut layout = random_layout(&mut rng);
                    for _ in 0..64 {
                        if !seen.contains(&layout) {
                            break;
                        }
                        layout = random_layout(&mut rng);
                    }
                    seen.insert(layout.clone());
                    layout
                }
            };
            probe_record(i as u64, layout, resolution)
        })
        .collect()
}

/// A question about a single-shape probe image with its exact answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeQuestion {
    pub question: String,
    pub answer: String,
}

/// Color and shape questions for single-shape layouts; none otherwise.
pub fn probe_questions(meta: &ProbeMeta) -> Vec<ProbeQuestion> {
    match meta.layout.as_slice() {
        [s] => vec![
            ProbeQuestion { question: "what color is the shape".into(), answer: s.color.name().into() },
            ProbeQuestion { question: "what shape is it".into(), answer: s.shape.name().into() },
        ],
        _ => Vec::new(),
    }
}
