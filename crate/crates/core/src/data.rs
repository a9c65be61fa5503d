//! GlyphSum: pairs of colored digit glyphs with oracle part masks, one digit
//! concept per part and the digit sum as the task label.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{Container, FormatError};

pub const NUM_DIGITS: usize = 10;
pub const NUM_PARTS: usize = 2;
pub const NUM_SUMS: usize = 2 * (NUM_DIGITS - 1) + 1;
pub const CHANNELS: usize = 3;

const MAGIC: &str = "GLYPHSUM-DATASET";
const VERSION: u32 = 1;

/// 5x7 bitmap digits, one row per byte, bit 4 = leftmost column.
const FONT: [[u8; 7]; NUM_DIGITS] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

pub(crate) fn font_bit(digit: usize, row: usize, col: usize) -> bool {
    FONT[digit][row] >> (4 - col) & 1 == 1
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("digit {0} out of range 0..=9")]
    Digit(u8),
    #[error("jitter ({0}, {1}) exceeds radius {2}")]
    Jitter(i32, i32, i32),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn channel(self) -> usize {
        self as usize
    }

    fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }
}

/// One masked image region.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePart {
    /// `[3, H, W]`, channel-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// `[H, W]`, 0 or 1.
    pub mask: Vec<u8>,
    /// Digit actually drawn.
    pub digit: u8,
    /// Digit named by the concept label; differs from `digit` only after corruption.
    pub label: u8,
    pub color: Color,
    pub part_index: u8,
}

impl ImagePart {
    /// One-hot concept vector of the (possibly corrupted) label.
    pub fn concepts(&self) -> [bool; NUM_DIGITS] {
        let mut c = [false; NUM_DIGITS];
        c[self.label as usize] = true;
        c
    }

    /// One-hot vector of the digit actually drawn.
    pub fn true_concepts(&self) -> [bool; NUM_DIGITS] {
        let mut c = [false; NUM_DIGITS];
        c[self.digit as usize] = true;
        c
    }

    /// Re-applies the mask, zeroing everything outside it.
    pub fn apply_mask(&mut self) {
        let hw = self.mask.len();
        for (i, p) in self.pixels.iter_mut().enumerate() {
            if self.mask[i % hw] == 0 {
                *p = 0.0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSumInstance {
    pub id: u64,
    pub parts: [ImagePart; NUM_PARTS],
    pub task_label: u8,
}

impl GlyphSumInstance {
    /// Global part id used for deterministic tie-breaking: `2 * id + part`.
    pub fn part_id(&self, part: usize) -> u64 {
        self.id * NUM_PARTS as u64 + part as u64
    }

    /// The whole image: both parts side by side, `[3, H, 2W]`.
    pub fn full_image(&self, size: usize) -> Vec<f32> {
        let mut out = vec![0.0; CHANNELS * size * 2 * size];
        for (p, part) in self.parts.iter().enumerate() {
            for c in 0..CHANNELS {
                for y in 0..size {
                    let src = &part.pixels[(c * size + y) * size..(c * size + y + 1) * size];
                    let dst = (c * size + y) * 2 * size + p * size;
                    out[dst..dst + size].copy_from_slice(src);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    pub jitter: i32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train: 10_000, val: 2_000, test: 2_000, size: 16, jitter: 2, noise: 0.05, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(DataError::Config("split counts must be positive".into()));
        }
        if self.size < 8 {
            return Err(DataError::Config(format!("image size {} below 8", self.size)));
        }
        if self.jitter < 0 || 4 * self.jitter as usize >= self.size {
            return Err(DataError::Config(format!("jitter {} must be below size/4", self.jitter)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(DataError::Config(format!("noise amplitude {}", self.noise)));
        }
        Ok(())
    }

    /// Pixels per part, `3 * H * W`.
    pub fn part_dim(&self) -> usize {
        CHANNELS * self.size * self.size
    }
}

/// Draws one part. The glyph is scaled (nearest neighbour) into a box of height
/// `H - 2 * jitter_radius`, centered, shifted by `jitter`, perturbed by uniform
/// intensity noise of amplitude `config.noise`, clipped, masked, then placed
/// in the color's channel.
pub fn render_part(
    digit: u8,
    color: Color,
    jitter: (i32, i32),
    noise_seed: u64,
    config: &DatasetConfig,
) -> Result<ImagePart, DataError> {
    if digit as usize >= NUM_DIGITS {
        return Err(DataError::Digit(digit));
    }
    let r = config.jitter;
    if jitter.0.abs() > r || jitter.1.abs() > r {
        return Err(DataError::Jitter(jitter.0, jitter.1, r));
    }
    let size = config.size as i32;
    let box_h = size - 2 * r;
    let box_w = ((box_h * 5) as f64 / 7.0).round() as i32;
    let top = (size - box_h) / 2 + jitter.1;
    let left = (size - box_w) / 2 + jitter.0;

    let hw = (size * size) as usize;
    let mut glyph = vec![0.0f32; hw];
    let (mut y0, mut y1, mut x0, mut x1) = (i32::MAX, i32::MIN, i32::MAX, i32::MIN);
    for by in 0..box_h {
        for bx in 0..box_w {
            let row = (by * 7 / box_h) as usize;
            let col = (bx * 5 / box_w) as usize;
            if font_bit(digit as usize, row, col) {
                let (y, x) = (top + by, left + bx);
                glyph[(y * size + x) as usize] = 1.0;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }

    let mut mask = vec![0u8; hw];
    for y in (y0 - 1).max(0)..=(y1 + 1).min(size - 1) {
        for x in (x0 - 1).max(0)..=(x1 + 1).min(size - 1) {
            mask[(y * size + x) as usize] = 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let amp = config.noise;
    let mut pixels = vec![0.0f32; CHANNELS * hw];
    let ch = color.channel();
    for i in 0..hw {
        let noise = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
        if mask[i] == 1 {
            pixels[ch * hw + i] = (glyph[i] + noise).clamp(0.0, 1.0);
        }
    }
    Ok(ImagePart { pixels, mask, digit, label: digit, color, part_index: 0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub instances: Vec<GlyphSumInstance>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn parts(&self) -> impl Iterator<Item = &ImagePart> {
        self.instances.iter().flat_map(|i| i.parts.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corruption {
    pub prob: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSum {
    pub config: DatasetConfig,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub corruption: Option<Corruption>,
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<GlyphSum, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut next_id = 0u64;
    let mut split = |count: usize, rng: &mut ChaCha8Rng| -> Result<Split, DataError> {
        let mut instances = Vec::with_capacity(count);
        for _ in 0..count {
            let mut draw = |p: u8| -> Result<ImagePart, DataError> {
                let digit = rng.gen_range(0..NUM_DIGITS as u8);
                let color = Color::ALL[rng.gen_range(0..3)];
                let r = config.jitter;
                let jitter = (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
                let mut part = render_part(digit, color, jitter, rng.gen(), config)?;
                part.part_index = p;
                Ok(part)
            };
            let parts = [draw(0)?, draw(1)?];
            let task_label = parts[0].digit + parts[1].digit;
            instances.push(GlyphSumInstance { id: next_id, parts, task_label });
            next_id += 1;
        }
        Ok(Split { instances })
    };
    let train = split(config.train, &mut rng)?;
    let val = split(config.val, &mut rng)?;
    let test = split(config.test, &mut rng)?;
    Ok(GlyphSum { config: config.clone(), train, val, test, corruption: None })
}

/// Relabels true 3s as 1 and true 4s as 8, each with probability `prob`, in the
/// train and validation splits. Pixels, task labels and the test split are
/// left alone.
pub fn corrupt_labels(dataset: &GlyphSum, prob: f64, seed: u64) -> Result<GlyphSum, DataError> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(DataError::Probability(prob));
    }
    let mut out = dataset.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for split in [&mut out.train, &mut out.val] {
        for inst in &mut split.instances {
            for part in &mut inst.parts {
                let target = match part.digit {
                    3 => 1,
                    4 => 8,
                    _ => continue,
                };
                if rng.gen_bool(prob) {
                    part.label = target;
                }
            }
        }
    }
    out.corruption = Some(Corruption { prob, seed });
    Ok(out)
}

impl GlyphSum {
    pub fn to_container(&self) -> Container {
        let cfg = &self.config;
        let mut c = Container::new(MAGIC, VERSION);
        c.set("counts", format!("{},{},{}", cfg.train, cfg.val, cfg.test));
        c.set("size", cfg.size);
        c.set("parts", NUM_PARTS);
        c.set("jitter", cfg.jitter);
        c.set("noise", cfg.noise);
        c.set("seed", cfg.seed);
        if let Some(corr) = self.corruption {
            c.set("corruption_prob", corr.prob);
            c.set("corruption_seed", corr.seed);
        }
        let hw = cfg.size * cfg.size;
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let n = split.len();
            c.set(&format!("{name}.first_id"), split.instances.first().map_or(0, |i| i.id));
            let mut pixels = Vec::with_capacity(n * NUM_PARTS * CHANNELS * hw);
            let mut masks = Vec::with_capacity(n * NUM_PARTS * hw);
            let (mut digits, mut labels, mut colors, mut tasks) = (vec![], vec![], vec![], vec![]);
            for inst in &split.instances {
                for part in &inst.parts {
                    pixels.extend_from_slice(&part.pixels);
                    masks.extend_from_slice(&part.mask);
                    digits.push(part.digit);
                    labels.push(part.label);
                    colors.push(part.color as u8);
                }
                tasks.push(inst.task_label);
            }
            c.add_f32(&format!("{name}.pixels"), &[n, NUM_PARTS, CHANNELS, cfg.size, cfg.size], &pixels);
            c.add_u8(&format!("{name}.masks"), &[n, NUM_PARTS, cfg.size, cfg.size], &masks);
            c.add_u8(&format!("{name}.digits"), &[n, NUM_PARTS], &digits);
            c.add_u8(&format!("{name}.labels"), &[n, NUM_PARTS], &labels);
            c.add_u8(&format!("{name}.colors"), &[n, NUM_PARTS], &colors);
            c.add_u8(&format!("{name}.task"), &[n], &tasks);
        }
        c
    }

    /// Stable identity of the serialized dataset.
    pub fn fingerprint(&self) -> String {
        self.to_container().fingerprint()
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        let malformed = |m: String| DataError::Format(FormatError::Malformed(m));
        let counts: Vec<usize> = c
            .require("counts")?
            .split(',')
            .map(|s| s.parse().map_err(|_| malformed(format!("counts={s}"))))
            .collect::<Result<_, _>>()?;
        let [train, val, test] = counts[..] else { return Err(malformed("counts".into())) };
        let config = DatasetConfig {
            train,
            val,
            test,
            size: c.parse_key("size")?,
            jitter: c.parse_key("jitter")?,
            noise: c.parse_key("noise")?,
            seed: c.parse_key("seed")?,
        };
        let corruption = match c.get("corruption_prob") {
            Some(_) => Some(Corruption { prob: c.parse_key("corruption_prob")?, seed: c.parse_key("corruption_seed")? }),
            None => None,
        };
        let size = config.size;
        let hw = size * size;
        let read_split = |name: &str, n: usize| -> Result<Split, DataError> {
            let first: u64 = c.parse_key(&format!("{name}.first_id"))?;
            let (pshape, pixels) = c.f32_array(&format!("{name}.pixels"))?;
            let (_, masks) = c.u8_array(&format!("{name}.masks"))?;
            let (_, digits) = c.u8_array(&format!("{name}.digits"))?;
            let (_, labels) = c.u8_array(&format!("{name}.labels"))?;
            let (_, colors) = c.u8_array(&format!("{name}.colors"))?;
            let (_, tasks) = c.u8_array(&format!("{name}.task"))?;
            if pshape != [n, NUM_PARTS, CHANNELS, size, size]
                || masks.len() != n * NUM_PARTS * hw
                || digits.len() != n * NUM_PARTS
                || labels.len() != n * NUM_PARTS
                || colors.len() != n * NUM_PARTS
                || tasks.len() != n
            {
                return Err(malformed(format!("{name} array shapes")));
            }
            let mut instances = Vec::with_capacity(n);
            for i in 0..n {
                let part = |p: usize| -> Result<ImagePart, DataError> {
                    let k = i * NUM_PARTS + p;
                    Ok(ImagePart {
                        pixels: pixels[k * CHANNELS * hw..(k + 1) * CHANNELS * hw].to_vec(),
                        mask: masks[k * hw..(k + 1) * hw].to_vec(),
                        digit: digits[k],
                        label: labels[k],
                        color: Color::from_index(colors[k]).ok_or_else(|| malformed(format!("color {}", colors[k])))?,
                        part_index: p as u8,
                    })
                };
                instances.push(GlyphSumInstance { id: first + i as u64, parts: [part(0)?, part(1)?], task_label: tasks[i] });
            }
            Ok(Split { instances })
        };
        Ok(GlyphSum {
            train: read_split("train", train)?,
            val: read_split("val", val)?,
            test: read_split("test", test)?,
            config,
            corruption,
        })
    }
}

pub fn write_dataset(dataset: &GlyphSum, path: &Path) -> Result<(), DataError> {
    dataset.to_container().write(path)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<GlyphSum, DataError> {
    GlyphSum::from_container(&Container::read(path, MAGIC, VERSION)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig { train: 40, val: 10, test: 10, seed, ..Default::default() }
    }

    fn lit_count(digit: usize) -> usize {
        (0..7).flat_map(|r| (0..5).map(move |c| (r, c))).filter(|&(r, c)| font_bit(digit, r, c)).count()
    }

    #[test]
    fn red_glyph_has_empty_green_and_blue() {
        let cfg = DatasetConfig { noise: 0.0, ..Default::default() };
        let part = render_part(1, Color::Red, (0, 0), 9, &cfg).unwrap();
        let hw = 256;
        assert!(part.pixels[hw..].iter().all(|&v| v == 0.0));
        assert!(part.pixels[..hw].contains(&1.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = DatasetConfig::default();
        let a = render_part(7, Color::Blue, (1, -2), 42, &cfg).unwrap();
        let b = render_part(7, Color::Blue, (1, -2), 42, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eight_covers_more_than_one() {
        // font bitmaps: "8" lights 17 cells, "1" lights 10
        assert_eq!(lit_count(8), 17);
        assert_eq!(lit_count(1), 10);
        let cfg = DatasetConfig { noise: 0.0, ..Default::default() };
        let eight = render_part(8, Color::Green, (0, 0), 0, &cfg).unwrap();
        let one = render_part(1, Color::Green, (0, 0), 0, &cfg).unwrap();
        let on = |p: &ImagePart| p.mask.iter().filter(|&&m| m == 1).count();
        assert!(on(&eight) > on(&one));
        let lit = |p: &ImagePart| p.pixels.iter().filter(|&&v| v > 0.0).count();
        assert!(lit(&eight) > lit(&one));
    }

    #[test]
    fn render_rejects_bad_inputs() {
        let cfg = DatasetConfig::default();
        assert!(matches!(render_part(10, Color::Red, (0, 0), 0, &cfg), Err(DataError::Digit(10))));
        assert!(matches!(render_part(3, Color::Red, (3, 0), 0, &cfg), Err(DataError::Jitter(3, 0, 2))));
    }

    #[test]
    fn extreme_jitter_stays_on_canvas() {
        let cfg = DatasetConfig { noise: 0.0, ..Default::default() };
        for d in 0..10 {
            for j in [(-2, -2), (2, 2), (-2, 2), (2, -2)] {
                let p = render_part(d, Color::Red, j, 0, &cfg).unwrap();
                let lit = p.pixels.iter().filter(|&&v| v == 1.0).count();
                let full = render_part(d, Color::Red, (0, 0), 0, &cfg).unwrap();
                assert_eq!(lit, full.pixels.iter().filter(|&&v| v == 1.0).count());
            }
        }
    }

    #[test]
    fn masked_pixels_are_zero_and_sums_match() {
        let ds = generate_dataset(&small(3)).unwrap();
        for split in [&ds.train, &ds.val, &ds.test] {
            for inst in &split.instances {
                assert_eq!(inst.task_label, inst.parts[0].digit + inst.parts[1].digit);
                for part in &inst.parts {
                    for (i, &v) in part.pixels.iter().enumerate() {
                        if part.mask[i % 256] == 0 {
                            assert_eq!(v, 0.0);
                        }
                    }
                    assert_eq!(part.concepts().iter().filter(|&&b| b).count(), 1);
                }
            }
        }
    }

    #[test]
    fn splits_have_disjoint_ids() {
        let ds = generate_dataset(&small(1)).unwrap();
        let mut ids: Vec<u64> = [&ds.train, &ds.val, &ds.test].iter().flat_map(|s| s.instances.iter().map(|i| i.id)).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn corruption_extremes() {
        let ds = generate_dataset(&small(5)).unwrap();
        let same = corrupt_labels(&ds, 0.0, 1).unwrap();
        assert_eq!(same.train, ds.train);
        assert_eq!(same.val, ds.val);
        let all = corrupt_labels(&ds, 1.0, 1).unwrap();
        for part in all.train.parts().chain(all.val.parts()) {
            match part.digit {
                3 => assert_eq!(part.label, 1),
                4 => assert_eq!(part.label, 8),
                d => assert_eq!(part.label, d),
            }
        }
        assert_eq!(all.test, ds.test);
    }

    #[test]
    fn full_image_places_parts_side_by_side() {
        let ds = generate_dataset(&small(2)).unwrap();
        let inst = &ds.train.instances[0];
        let img = inst.full_image(16);
        assert_eq!(img.len(), 3 * 16 * 32);
        assert_eq!(img[5 * 32 + 16 + 3], inst.parts[1].pixels[5 * 16 + 3]);
        assert_eq!(img[(2 * 16 + 9) * 32 + 4], inst.parts[0].pixels[(2 * 16 + 9) * 16 + 4]);
    }

    #[test]
    fn config_validation() {
        assert!(DatasetConfig { jitter: 4, ..Default::default() }.validate().is_err());
        assert!(DatasetConfig { train: 0, ..Default::default() }.validate().is_err());
        assert!(DatasetConfig::default().validate().is_ok());
    }
}
