//! Procedural captioning data: colored shapes on a noisy dark background.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::image::Image;

pub const IMAGE_SIZE: usize = 32;
pub const MAX_SHAPES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    /// Token ids, ending with EOS.
    pub caption: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    color: usize,
    shape: usize,
    cx: f32,
    cy: f32,
    radius: f32,
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
    }
}

fn sample_one(rng: &mut ChaCha8Rng, vocab: &Vocab) -> SynthSample {
    let n = IMAGE_SIZE;
    let mut data = vec![0.0f32; 3 * n * n];
    for c in 0..3 {
        let base: f32 = rng.gen_range(0.0..0.2);
        for v in &mut data[c * n * n..(c + 1) * n * n] {
            *v = base + rng.gen_range(0.0..0.08);
        }
    }

    let count = rng.gen_range(1..=MAX_SHAPES);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    while placed.len() < count {
        let color = rng.gen_range(0..COLORS.len());
        let shape = rng.gen_range(0..SHAPES.len());
        if placed.iter().any(|p| p.color == color && p.shape == shape) {
            continue;
        }
        let radius = rng.gen_range(5.0f32..8.0);
        let mut pos = None;
        for _ in 0..100 {
            let cx = rng.gen_range(radius..n as f32 - radius);
            let cy = rng.gen_range(radius..n as f32 - radius);
            let clear = placed.iter().all(|p| {
                let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                d >= p.radius + radius + 1.0
            });
            if clear {
                pos = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = pos else { continue };
        placed.push(Placed {
            color,
            shape,
            cx,
            cy,
            radius,
        });
    }

    for p in &placed {
        let rgb = COLORS[p.color].1;
        let jitter: [f32; 3] = [
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        ];
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f32 + 0.5 - p.cx, y as f32 + 0.5 - p.cy);
                if inside(p.shape, dx, dy, p.radius) {
                    for c in 0..3 {
                        data[c * n * n + y * n + x] = (rgb[c] + jitter[c]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    let mut mentions: Vec<(usize, usize)> = placed.iter().map(|p| (p.color, p.shape)).collect();
    mentions.sort_unstable();
    let a = vocab.id("a").expect("'a' in vocabulary");
    let and = vocab.id("and").expect("'and' in vocabulary");
    let mut caption = Vec::with_capacity(4 * mentions.len());
    for (i, &(color, shape)) in mentions.iter().enumerate() {
        if i > 0 {
            caption.push(and);
        }
        caption.extend([a, vocab.color_id(color), vocab.shape_id(shape)]);
    }
    caption.push(vocab.eos_id);

    SynthSample {
        image: Image::new(3, n, n, data).expect("synthetic image shape"),
        caption,
    }
}

/// `n` samples drawn from one ChaCha8 stream seeded with `seed`.
pub fn synth_dataset(n: usize, seed: u64, vocab: &Vocab) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_one(&mut rng, vocab)).collect()
}

pub const CAPTIONS_FILE: &str = "captions.txt";

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.vft")
}

/// Writes `img_NNNNN.vft` images plus `captions.txt` (one line of
/// space-separated token ids per image).
pub fn write_dataset(dir: &Path, samples: &[SynthSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut captions = String::new();
    for (i, s) in samples.iter().enumerate() {
        s.image.save(&dir.join(image_file_name(i)))?;
        let line: Vec<String> = s.caption.iter().map(|t| t.to_string()).collect();
        captions.push_str(&line.join(" "));
        captions.push('\n');
    }
    let path = dir.join(CAPTIONS_FILE);
    fs::write(&path, captions).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    let path = dir.join(CAPTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let caption = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|_| {
                        Error::Format(format!("{}:{}: bad token id {t:?}", path.display(), i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let image = Image::load(&dir.join(image_file_name(i)))?;
            Ok(SynthSample { image, caption })
        })
        .collect()
}
