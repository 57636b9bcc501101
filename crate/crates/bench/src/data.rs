//! Synthetic scenes of coloured shapes with referring queries, and the
//! `ASG1` dataset file.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use anchorseg_core::config::{DataConfig, Dims};

use crate::error::{format_err, BenchError, Result};

pub const MAGIC: &[u8; 4] = b"ASG1";
pub const VERSION: u32 = 1;

/// Query symbols.
pub mod vocab {
    pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
    pub const SHAPES: [&str; 3] = ["rectangle", "disc", "triangle"];
    pub const RELATIONS: [&str; 8] = [
        "leftmost",
        "rightmost",
        "topmost",
        "bottommost",
        "largest",
        "smallest",
        "above",
        "below",
    ];

    pub fn color(i: usize) -> u16 {
        i as u16
    }

    pub fn shape(i: usize) -> u16 {
        (COLORS.len() + i) as u16
    }

    pub fn relation(i: usize) -> u16 {
        (COLORS.len() + SHAPES.len() + i) as u16
    }

    pub const SIZE: usize = COLORS.len() + SHAPES.len() + RELATIONS.len();

    pub fn name(symbol: u16) -> &'static str {
        let s = symbol as usize;
        let (c, sh) = (COLORS.len(), SHAPES.len());
        if s < c {
            COLORS[s]
        } else if s < c + sh {
            SHAPES[s - c]
        } else {
            RELATIONS.get(s - c - sh).copied().unwrap_or("?")
        }
    }
}

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `h × w × c`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `h × w`, 0 or 1.
    pub mask: Vec<u8>,
    pub symbols: Vec<u16>,
    pub is_null: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub grid: usize,
    pub max_symbols: usize,
    pub samples: Vec<SceneSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Disc,
    Triangle,
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    color: usize,
    /// Bounding box `[y0, x0, y1, x1)`.
    bbox: [usize; 4],
    pixels: Vec<bool>,
    area: usize,
    cy: f64,
    cx: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sub_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ (index as u64).wrapping_mul(0x1000_0001) ^ attempt << 48))
}

fn rasterize(shape: Shape, bbox: [usize; 4], h: usize, w: usize) -> Vec<bool> {
    let [y0, x0, y1, x1] = bbox;
    let (bh, bw) = ((y1 - y0) as f64, (x1 - x0) as f64);
    let mut px = vec![false; h * w];
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = ((x - x0) as f64 + 0.5, (y - y0) as f64 + 0.5);
            let inside = match shape {
                Shape::Rect => true,
                Shape::Disc => {
                    let (dx, dy) = (u / bw - 0.5, v / bh - 0.5);
                    dx * dx + dy * dy <= 0.25
                }
                // apex at the top centre, base along the bottom edge
                Shape::Triangle => (u / bw - 0.5).abs() <= 0.5 * v / bh,
            };
            px[y * w + x] = inside;
        }
    }
    px
}

fn place_objects(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Object> {
    let count = rng.gen_range(1..=4);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(rng);
    let (min_side, max_side) = ((h.min(w) / 4).max(3), (h.min(w) * 2 / 5).max(4));
    let margin = 2;
    let mut objects: Vec<Object> = Vec::new();
    for _ in 0..count {
        for _ in 0..60 {
            let bh = rng.gen_range(min_side..=max_side).min(h);
            let bw = rng.gen_range(min_side..=max_side).min(w);
            let y0 = rng.gen_range(0..=h - bh);
            let x0 = rng.gen_range(0..=w - bw);
            let bbox = [y0, x0, y0 + bh, x0 + bw];
            let clear = objects.iter().all(|o| {
                bbox[2] + margin <= o.bbox[0]
                    || o.bbox[2] + margin <= bbox[0]
                    || bbox[3] + margin <= o.bbox[1]
                    || o.bbox[3] + margin <= bbox[1]
            });
            if !clear {
                continue;
            }
            let shape = [Shape::Rect, Shape::Disc, Shape::Triangle][rng.gen_range(0..3)];
            let pixels = rasterize(shape, bbox, h, w);
            let (mut area, mut sy, mut sx) = (0usize, 0.0, 0.0);
            for (i, _) in pixels.iter().enumerate().filter(|(_, &p)| p) {
                area += 1;
                sy += (i / w) as f64;
                sx += (i % w) as f64;
            }
            if area == 0 {
                continue;
            }
            objects.push(Object {
                shape,
                color: colors[objects.len()],
                bbox,
                pixels,
                area,
                cy: sy / area as f64,
                cx: sx / area as f64,
            });
            break;
        }
    }
    objects
}

fn paint(rng: &mut ChaCha8Rng, objects: &[Object], h: usize, w: usize, c: usize) -> Vec<f32> {
    let base: f32 = rng.gen_range(0.3..0.6);
    let tint: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let (fy, fx, phase) = (
        rng.gen_range(0.5..3.0) / h as f32,
        rng.gen_range(0.5..3.0) / w as f32,
        rng.gen_range(0.0..std::f32::consts::TAU),
    );
    let mut img = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let wave = 0.06 * (std::f32::consts::TAU * (y as f32 * fy + x as f32 * fx) + phase).sin();
            for ch in 0..c {
                let noise = rng.gen_range(-0.04..0.04);
                img[(y * w + x) * c + ch] = (base + tint[ch] + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    for o in objects {
        let jitter: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.05..0.05)).collect();
        for (i, _) in o.pixels.iter().enumerate().filter(|(_, &p)| p) {
            for ch in 0..c {
                let v = PALETTE[o.color][ch % 3] + jitter[ch] + rng.gen_range(-0.03..0.03);
                img[i * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Smallest-gap margin for spatial superlatives, in pixels.
const RELATION_GAP: f64 = 6.0;

fn superlative(objects: &[Object], which: usize) -> Option<usize> {
    let key = |o: &Object| -> f64 {
        match which {
            0 => -o.cx,
            1 => o.cx,
            2 => -o.cy,
            3 => o.cy,
            4 => o.area as f64,
            _ => -(o.area as f64),
        }
    };
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| key(&objects[b]).total_cmp(&key(&objects[a])));
    let (best, second) = (key(&objects[order[0]]), key(&objects[order[1]]));
    let gap = if which >= 4 {
        best.abs().max(second.abs()) / best.abs().min(second.abs()).max(1.0) - 1.0
    } else {
        best - second
    };
    let needed = if which >= 4 { 0.3 } else { RELATION_GAP };
    (gap >= needed).then_some(order[0])
}

fn relation_query(rng: &mut ChaCha8Rng, objects: &[Object]) -> Option<(usize, Vec<u16>)> {
    for _ in 0..8 {
        let rel = rng.gen_range(0..vocab::RELATIONS.len());
        if rel < 6 {
            if let Some(t) = superlative(objects, rel) {
                return Some((t, vec![vocab::relation(rel)]));
            }
            continue;
        }
        let anchor = rng.gen_range(0..objects.len());
        let a = &objects[anchor];
        let hits: Vec<usize> = (0..objects.len())
            .filter(|&i| i != anchor)
            .filter(|&i| {
                let dy = objects[i].cy - a.cy;
                if rel == 6 {
                    dy <= -RELATION_GAP
                } else {
                    dy >= RELATION_GAP
                }
            })
            .collect();
        if let [t] = hits[..] {
            return Some((t, vec![vocab::relation(rel), vocab::color(a.color)]));
        }
    }
    None
}

fn attribute_query(rng: &mut ChaCha8Rng, objects: &[Object]) -> (usize, Vec<u16>) {
    let t = rng.gen_range(0..objects.len());
    let o = &objects[t];
    let shape_unique = objects.iter().filter(|x| x.shape == o.shape).count() == 1;
    let roll: f64 = rng.gen();
    let symbols = if roll < 0.45 {
        vec![vocab::color(o.color)]
    } else if roll < 0.85 || !shape_unique {
        vec![vocab::color(o.color), vocab::shape(o.shape as usize)]
    } else {
        vec![vocab::shape(o.shape as usize)]
    };
    (t, symbols)
}

fn null_query(rng: &mut ChaCha8Rng, objects: &[Object]) -> Vec<u16> {
    let absent: Vec<usize> = (0..PALETTE.len())
        .filter(|&c| objects.iter().all(|o| o.color != c))
        .collect();
    if rng.gen_bool(0.5) || objects.is_empty() {
        let c = absent[rng.gen_range(0..absent.len())];
        if rng.gen_bool(0.5) {
            vec![vocab::color(c)]
        } else {
            vec![vocab::color(c), vocab::shape(rng.gen_range(0..3))]
        }
    } else {
        let o = &objects[rng.gen_range(0..objects.len())];
        let other = (o.shape as usize + rng.gen_range(1..3)) % 3;
        vec![vocab::color(o.color), vocab::shape(other)]
    }
}

/// One sample; `attempt` selects a fresh sub-seed when a scene cannot host
/// the requested query.
fn generate_sample(dims: &Dims, cfg: &DataConfig, seed: u64, index: usize) -> SceneSample {
    let (h, w, c) = (dims.h, dims.w, dims.c);
    let is_null = sub_rng(seed, index, u64::MAX).gen_bool(cfg.null_fraction);
    let wants_relation = sub_rng(seed, index, u64::MAX - 1).gen_bool(cfg.relation_fraction);
    for attempt in 0.. {
        let mut rng = sub_rng(seed, index, attempt);
        let objects = place_objects(&mut rng, h, w);
        if objects.is_empty() {
            continue;
        }
        let (target, symbols) = if is_null {
            (None, null_query(&mut rng, &objects))
        } else if wants_relation {
            if objects.len() < 2 {
                continue;
            }
            match relation_query(&mut rng, &objects) {
                Some((t, s)) => (Some(t), s),
                None => continue,
            }
        } else {
            let (t, s) = attribute_query(&mut rng, &objects);
            (Some(t), s)
        };
        if symbols.len() > cfg.max_symbols {
            continue;
        }
        let image = paint(&mut rng, &objects, h, w, c);
        let mask = match target {
            Some(t) => objects[t].pixels.iter().map(|&p| p as u8).collect(),
            None => vec![0; h * w],
        };
        return SceneSample {
            image,
            mask,
            symbols,
            is_null,
        };
    }
    unreachable!("attempt counter is unbounded")
}

/// Deterministic synthetic dataset.
pub fn generate_dataset(dims: &Dims, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    dims.validate()?;
    cfg.validate()?;
    if dims.vocab < vocab::SIZE {
        return Err(anchorseg_core::Error::Config(format!(
            "dims.vocab = {} is smaller than the {} query symbols",
            dims.vocab,
            vocab::SIZE
        ))
        .into());
    }
    if cfg.max_symbols < 2 {
        return Err(anchorseg_core::Error::Config("data.max_symbols must be at least 2".into()).into());
    }
    Ok(Dataset {
        h: dims.h,
        w: dims.w,
        c: dims.c,
        grid: dims.grid,
        max_symbols: cfg.max_symbols,
        samples: (0..cfg.n_samples).map(|i| generate_sample(dims, cfg, seed, i)).collect(),
    })
}

impl Dataset {
    /// Symbol slots are fixed at `max_symbols` per sample; unused slots are zero.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let narrow = |v: usize, what: &str| -> Result<u16> {
            u16::try_from(v).map_err(|_| format_err("dataset", format!("{what} = {v} does not fit in u16")))
        };
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(self.samples.len() as u32)?;
        for (v, what) in [(self.h, "h"), (self.w, "w"), (self.c, "c"), (self.grid, "grid"), (self.max_symbols, "max_symbols")] {
            out.write_u16::<LittleEndian>(narrow(v, what)?)?;
        }
        for s in &self.samples {
            for &x in &s.image {
                out.write_f32::<LittleEndian>(x)?;
            }
            out.write_all(&s.mask)?;
            out.write_u8(s.symbols.len() as u8)?;
            for slot in 0..self.max_symbols {
                out.write_u16::<LittleEndian>(s.symbols.get(slot).copied().unwrap_or(0))?;
            }
            out.write_u8(s.is_null as u8)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(mut input: impl Read, name: &str) -> Result<Self> {
        let bad = |msg: String| format_err(name, msg);
        let eof = |e: std::io::Error| -> BenchError {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                format_err(name, "truncated dataset")
            } else {
                e.into()
            }
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = input.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = input.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut head = [0usize; 5];
        for v in head.iter_mut() {
            *v = input.read_u16::<LittleEndian>().map_err(eof)? as usize;
        }
        let [h, w, c, grid, max_symbols] = head;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut image = vec![0f32; h * w * c];
            input.read_f32_into::<LittleEndian>(&mut image).map_err(eof)?;
            let mut mask = vec![0u8; h * w];
            input.read_exact(&mut mask).map_err(eof)?;
            let count = input.read_u8().map_err(eof)? as usize;
            if count > max_symbols {
                return Err(bad(format!("sample {i}: {count} symbols exceed the maximum {max_symbols}")));
            }
            let mut slots = vec![0u16; max_symbols];
            input.read_u16_into::<LittleEndian>(&mut slots).map_err(eof)?;
            slots.truncate(count);
            let is_null = match input.read_u8().map_err(eof)? {
                0 => false,
                1 => true,
                other => return Err(bad(format!("sample {i}: null flag {other}"))),
            };
            if mask.iter().any(|&m| m > 1) {
                return Err(bad(format!("sample {i}: mask is not binary")));
            }
            samples.push(SceneSample {
                image,
                mask,
                symbols: slots,
                is_null,
            });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after the last sample".into()));
        }
        Ok(Self {
            h,
            w,
            c,
            grid,
            max_symbols,
            samples,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Checks that the file was generated for these dimensions.
    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        if (self.h, self.w, self.c, self.grid) != (dims.h, dims.w, dims.c, dims.grid) {
            return Err(format_err(
                "dataset",
                format!(
                    "file has h={} w={} c={} grid={}, config expects h={} w={} c={} grid={}",
                    self.h, self.w, self.c, self.grid, dims.h, dims.w, dims.c, dims.grid
                ),
            ));
        }
        Ok(())
    }
}
