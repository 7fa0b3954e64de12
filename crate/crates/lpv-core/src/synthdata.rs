//! Deterministic synthetic word-image generator.
//!
//! Words from a fixed 50-word vocabulary are rendered with a built-in 5×7
//! bitmap font at randomized scale, spacing, placement and ink level, plus
//! additive uniform noise. Everything derives from a seed, so a dataset is
//! a pure function of (config, seed) on every platform. Per-character
//! occlusion erases one glyph's box to probe linguistic reconstruction.

use crate::charset::{Charset, LabelSeq};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// Source-embedded glyphs for the desk charset, 5 columns × 7 rows.
const GLYPHS: &[(char, [&str; GLYPH_H])] = &[
    ('a', ["     ", "     ", " ### ", "    #", " ####", "#   #", " ####"]),
    ('c', ["     ", "     ", " ### ", "#    ", "#    ", "#    ", " ### "]),
    ('d', ["    #", "    #", " ####", "#   #", "#   #", "#   #", " ####"]),
    ('e', ["     ", "     ", " ### ", "#   #", "#####", "#    ", " ### "]),
    ('g', ["     ", " ####", "#   #", "#   #", " ####", "    #", " ### "]),
    ('i', ["  #  ", "     ", " ##  ", "  #  ", "  #  ", "  #  ", " ### "]),
    ('m', ["     ", "     ", "## # ", "# # #", "# # #", "# # #", "# # #"]),
    ('n', ["     ", "     ", "# ## ", "##  #", "#   #", "#   #", "#   #"]),
    ('o', ["     ", "     ", " ### ", "#   #", "#   #", "#   #", " ### "]),
    ('r', ["     ", "     ", "# ## ", "##   ", "#    ", "#    ", "#    "]),
    ('s', ["     ", "     ", " ####", "#    ", " ### ", "    #", "#### "]),
    ('t', ["  #  ", "  #  ", "#####", "  #  ", "  #  ", "  #  ", "   ##"]),
];

/// Map from symbol to 5×7 bitmap.
pub struct GlyphFont {
    glyphs: HashMap<char, [[bool; GLYPH_W]; GLYPH_H]>,
}

impl GlyphFont {
    pub fn builtin() -> Self {
        let mut glyphs = HashMap::new();
        for &(c, rows) in GLYPHS {
            let mut bitmap = [[false; GLYPH_W]; GLYPH_H];
            for (r, row) in rows.iter().enumerate() {
                for (col, ch) in row.chars().enumerate() {
                    bitmap[r][col] = ch == '#';
                }
            }
            glyphs.insert(c, bitmap);
        }
        GlyphFont { glyphs }
    }

    pub fn glyph(&self, c: char) -> Option<&[[bool; GLYPH_W]; GLYPH_H]> {
        self.glyphs.get(&c)
    }

    pub fn covers(&self, charset: &Charset) -> bool {
        charset.symbols().iter().all(|c| self.glyphs.contains_key(c))
    }
}

/// The 50-word training vocabulary over the 12-letter desk charset. Built
/// with heavy shared subwords (-ing, -tion, -er, -ast, …) so contextual
/// completion of a missing character is actually learnable.
pub fn desk_vocab() -> Vec<&'static str> {
    vec![
        "acting", "dating", "dining", "doting", "eating", "gating", "mating", "noting", "rating",
        "rising", "action", "nation", "ration", "motion", "notion", "diner", "miner", "rider",
        "racer", "timer", "trader", "reader", "coast", "roast", "toast", "resist", "artist",
        "grain", "stone", "storm", "train", "cat", "rat", "eat", "tea", "sea", "net", "not",
        "ten", "sit", "dome", "dose", "nose", "rose", "rise", "case", "care", "core", "corn",
        "dart",
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub img_h: usize,
    pub img_w: usize,
    /// Label slot count T; text length is capped at T−1.
    pub t_slots: usize,
    /// Glyph scale range, multiples of the 5×7 base size.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Extra pixels of random inter-glyph spacing (0 disables jitter).
    pub jitter: usize,
    /// Amplitude of additive uniform noise.
    pub noise: f64,
}

impl RenderConfig {
    pub fn desk() -> Self {
        RenderConfig {
            img_h: 16,
            img_w: 48,
            t_slots: 8,
            min_scale: 1.0,
            max_scale: 1.2,
            jitter: 1,
            noise: 0.1,
        }
    }
}

/// Pixel box of one rendered character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One rendered word image with its label.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Gray values in [0,1], row-major `img_h × img_w`.
    pub image: Vec<f64>,
    pub img_h: usize,
    pub img_w: usize,
    pub text: String,
    pub label: LabelSeq,
    pub occluded_index: Option<usize>,
    pub char_boxes: Vec<CharBox>,
}

impl Sample {
    /// The image as an `[H×W×1]` tensor in the model's scalar type.
    pub fn image_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.image.iter().map(|&v| S::from_f64(v)).collect();
        Tensor::constant(&[self.img_h, self.img_w, 1], data).expect("image shape")
    }
}

/// Render one word. Deterministic given (text, rng state).
pub fn render_word(
    text: &str,
    cfg: &RenderConfig,
    charset: &Charset,
    font: &GlyphFont,
    rng: &mut Rng,
) -> Result<Sample> {
    if text.is_empty() {
        return Err(Error::Data("cannot render an empty word".into()));
    }
    let label = charset.encode(text, cfg.t_slots)?;
    let scale = rng.range(cfg.min_scale, cfg.max_scale);
    let gh = (GLYPH_H as f64 * scale).round() as usize;
    let gw = (GLYPH_W as f64 * scale).round() as usize;
    if gh > cfg.img_h {
        return Err(Error::Data(format!(
            "glyph height {gh} exceeds canvas height {}",
            cfg.img_h
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let spacings: Vec<usize> = (0..chars.len())
        .map(|_| 1 + if cfg.jitter > 0 { rng.below(cfg.jitter + 1) } else { 0 })
        .collect();
    let total_w: usize =
        chars.len() * gw + spacings[..chars.len() - 1].iter().sum::<usize>();
    if total_w > cfg.img_w {
        return Err(Error::Data(format!(
            "text {text:?} needs {total_w} columns, canvas has {}",
            cfg.img_w
        )));
    }
    let x_slack = cfg.img_w - total_w;
    let y_slack = cfg.img_h - gh;
    let mut x = rng.below(x_slack + 1);
    let y_base = rng.below(y_slack + 1);
    let ink = 0.75 + 0.25 * rng.uniform();

    let mut image = vec![0.0; cfg.img_h * cfg.img_w];
    let mut char_boxes = Vec::with_capacity(chars.len());
    for (ci, &c) in chars.iter().enumerate() {
        let glyph = font
            .glyph(c)
            .ok_or_else(|| Error::Data(format!("no glyph for {c:?}")))?;
        let y_jit = if cfg.jitter > 0 && y_base + gh + cfg.jitter <= cfg.img_h {
            rng.below(cfg.jitter + 1)
        } else {
            0
        };
        let y0 = y_base + y_jit;
        for yy in 0..gh {
            let src_r = yy * GLYPH_H / gh;
            for xx in 0..gw {
                let src_c = xx * GLYPH_W / gw;
                if glyph[src_r][src_c] {
                    image[(y0 + yy) * cfg.img_w + x + xx] = ink;
                }
            }
        }
        char_boxes.push(CharBox {
            x,
            y: y0,
            w: gw,
            h: gh,
        });
        x += gw + spacings[ci];
    }
    if cfg.noise > 0.0 {
        for px in image.iter_mut() {
            *px = (*px + rng.uniform() * cfg.noise).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image,
        img_h: cfg.img_h,
        img_w: cfg.img_w,
        text: text.to_string(),
        label,
        occluded_index: None,
        char_boxes,
    })
}

/// Erase one character: its bounding box is filled with the background
/// value. The label is unchanged; the choice is recorded.
pub fn corrupt_occlude(sample: &Sample, rng: &mut Rng, index: Option<usize>) -> Sample {
    let n = sample.char_boxes.len();
    let idx = index.unwrap_or_else(|| rng.below(n)).min(n - 1);
    let mut out = sample.clone();
    let b = out.char_boxes[idx];
    for yy in b.y..b.y + b.h {
        for xx in b.x..b.x + b.w {
            out.image[yy * out.img_w + xx] = 0.0;
        }
    }
    out.occluded_index = Some(idx);
    out
}

/// Which dataset a sample belongs to; splits use disjoint seed streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        }
    }
}

const OCCLUDE_SALT: u64 = 0x6f63_636c;

fn build_sample(
    vocab: &[&str],
    cfg: &RenderConfig,
    charset: &Charset,
    font: &GlyphFont,
    seed: u64,
    split: Split,
    index: usize,
) -> Result<Sample> {
    let mut rng = Rng::derive(seed, split.salt(), index as u64);
    let word = vocab[rng.below(vocab.len())];
    render_word(word, cfg, charset, font, &mut rng)
}

/// Draw `n_samples` words uniformly with replacement and render each with
/// its own derived RNG, so generation order (and parallelism) cannot
/// change the result.
pub fn make_dataset(
    vocab: &[&str],
    n_samples: usize,
    split: Split,
    seed: u64,
    cfg: &RenderConfig,
    charset: &Charset,
) -> Result<Vec<Sample>> {
    if vocab.is_empty() {
        return Err(Error::Data("empty vocabulary".into()));
    }
    let font = GlyphFont::builtin();
    for word in vocab {
        for c in word.chars() {
            if charset.class_of(c).is_none() {
                return Err(Error::Data(format!(
                    "vocabulary word {word:?} uses {c:?}, not in charset"
                )));
            }
        }
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_samples)
            .into_par_iter()
            .map(|i| build_sample(vocab, cfg, charset, &font, seed, split, i))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_samples)
            .map(|i| build_sample(vocab, cfg, charset, &font, seed, split, i))
            .collect()
    }
}

/// Sequential twin of `make_dataset`, kept callable with the `parallel`
/// feature on so benches and determinism tests can compare both paths.
pub fn make_dataset_serial(
    vocab: &[&str],
    n_samples: usize,
    split: Split,
    seed: u64,
    cfg: &RenderConfig,
    charset: &Charset,
) -> Result<Vec<Sample>> {
    if vocab.is_empty() {
        return Err(Error::Data("empty vocabulary".into()));
    }
    let font = GlyphFont::builtin();
    (0..n_samples)
        .map(|i| build_sample(vocab, cfg, charset, &font, seed, split, i))
        .collect()
}

/// Occluded twin of a dataset: every sample gets one random character
/// erased, deterministically per (seed, position).
pub fn occlude_all(samples: &[Sample], seed: u64) -> Vec<Sample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = Rng::derive(seed, OCCLUDE_SALT, i as u64);
            corrupt_occlude(s, &mut rng, None)
        })
        .collect()
}

/// Dump a dataset as one PGM per image plus an index file with
/// `id<TAB>text<TAB>occluded_index` lines (`-` when not occluded).
pub fn dump_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.pgm");
        crate::pgm::write_pgm(&dir.join(&name), s.img_w, s.img_h, &s.image)?;
        let occ = s
            .occluded_index
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into());
        index.push_str(&format!("{i:05}\t{}\t{occ}\n", s.text));
    }
    let index_path = dir.join("index.tsv");
    std::fs::write(&index_path, index).map_err(|e| Error::io(index_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{proptest, prop_assert, prop_assert_eq, ProptestConfig};

    fn desk() -> (RenderConfig, Charset, GlyphFont) {
        (RenderConfig::desk(), Charset::desk(), GlyphFont::builtin())
    }

    #[test]
    fn font_covers_charset_with_distinct_glyphs() {
        let font = GlyphFont::builtin();
        let cs = Charset::desk();
        assert!(font.covers(&cs));
        let all: Vec<_> = cs.symbols().iter().map(|&c| *font.glyph(c).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "glyphs {i} and {j} identical");
            }
        }
    }

    #[test]
    fn vocab_is_50_unique_renderable_words() {
        let vocab = desk_vocab();
        assert_eq!(vocab.len(), 50);
        let unique: std::collections::HashSet<_> = vocab.iter().collect();
        assert_eq!(unique.len(), 50);
        let cs = Charset::desk();
        for w in &vocab {
            assert!(w.len() >= 2 && w.len() <= 6, "{w}");
            assert!(w.chars().all(|c| cs.class_of(c).is_some()), "{w}");
        }
        // Shared subwords are the point: "tin" alone spans many words.
        let tin = vocab.iter().filter(|w| w.contains("tin")).count();
        assert!(tin >= 5, "only {tin} words share 'tin'");
        let tion = vocab.iter().filter(|w| w.contains("tion")).count();
        assert!(tion >= 4, "only {tion} words share 'tion'");
    }

    #[test]
    fn same_text_same_seed_identical_images() {
        let (cfg, cs, font) = desk();
        let a = render_word("cat", &cfg, &cs, &font, &mut Rng::new(5)).unwrap();
        let b = render_word("cat", &cfg, &cs, &font, &mut Rng::new(5)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.char_boxes, b.char_boxes);
    }

    #[test]
    fn no_noise_no_jitter_background_is_exactly_zero() {
        let (mut cfg, cs, font) = desk();
        cfg.noise = 0.0;
        cfg.jitter = 0;
        let s = render_word("cat", &cfg, &cs, &font, &mut Rng::new(1)).unwrap();
        for y in 0..s.img_h {
            for x in 0..s.img_w {
                let inside = s
                    .char_boxes
                    .iter()
                    .any(|b| x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h);
                if !inside {
                    assert_eq!(s.image[y * s.img_w + x], 0.0, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn every_vocab_word_renders_at_default_config() {
        let (cfg, cs, font) = desk();
        for (i, word) in desk_vocab().iter().enumerate() {
            for seed in 0..20 {
                let mut rng = Rng::new(seed * 1000 + i as u64);
                render_word(word, &cfg, &cs, &font, &mut rng)
                    .unwrap_or_else(|e| panic!("{word}: {e}"));
            }
        }
    }

    #[test]
    fn render_rejects_oversized_text() {
        let (mut cfg, cs, font) = desk();
        cfg.img_w = 16; // "cat" needs at least 17 columns
        let err = render_word("cat", &cfg, &cs, &font, &mut Rng::new(0));
        assert!(err.is_err());
    }

    #[test]
    fn occlusion_confined_to_box_and_idempotent() {
        let (cfg, cs, font) = desk();
        let s = render_word("cat", &cfg, &cs, &font, &mut Rng::new(9)).unwrap();
        let occ = corrupt_occlude(&s, &mut Rng::new(0), Some(0));
        assert_eq!(occ.occluded_index, Some(0));
        assert_eq!(occ.label, s.label);
        let b = s.char_boxes[0];
        for y in 0..s.img_h {
            for x in 0..s.img_w {
                let inside = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
                let (orig, now) = (s.image[y * s.img_w + x], occ.image[y * s.img_w + x]);
                if inside {
                    assert_eq!(now, 0.0);
                } else {
                    assert_eq!(now, orig, "pixel outside box changed at ({x},{y})");
                }
            }
        }
        let again = corrupt_occlude(&occ, &mut Rng::new(1), Some(0));
        assert_eq!(again.image, occ.image);
    }

    #[test]
    fn dataset_is_deterministic_and_split_disjoint() {
        let (cfg, cs, _) = desk();
        let vocab = desk_vocab();
        let a = make_dataset(&vocab, 64, Split::Train, 7, &cfg, &cs).unwrap();
        let b = make_dataset(&vocab, 64, Split::Train, 7, &cfg, &cs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.text, y.text);
        }
        let t = make_dataset(&vocab, 64, Split::Test, 7, &cfg, &cs).unwrap();
        let same = a.iter().zip(&t).filter(|(x, y)| x.image == y.image).count();
        assert_eq!(same, 0, "train and test share images");
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_serial_generation_agree() {
        let (cfg, cs, _) = desk();
        let vocab = desk_vocab();
        let par = make_dataset(&vocab, 50, Split::Train, 3, &cfg, &cs).unwrap();
        let ser = make_dataset_serial(&vocab, 50, Split::Train, 3, &cfg, &cs).unwrap();
        for (x, y) in par.iter().zip(&ser) {
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn empty_vocab_is_an_error() {
        let (cfg, cs, _) = desk();
        assert!(make_dataset(&[], 4, Split::Train, 1, &cfg, &cs).is_err());
    }

    #[test]
    fn cat_label_encoding() {
        let cs = Charset::desk();
        let label = cs.encode("cat", 8).unwrap();
        let c = cs.class_of('c').unwrap();
        let a = cs.class_of('a').unwrap();
        let t = cs.class_of('t').unwrap();
        assert_eq!(
            label,
            vec![c, a, t, cs.eos_id(), cs.pad_id(), cs.pad_id(), cs.pad_id(), cs.pad_id()]
        );
    }

    #[test]
    fn occluded_dataset_is_deterministic() {
        let (cfg, cs, _) = desk();
        let vocab = desk_vocab();
        let base = make_dataset(&vocab, 32, Split::Test, 11, &cfg, &cs).unwrap();
        let a = occlude_all(&base, 11);
        let b = occlude_all(&base, 11);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.occluded_index, y.occluded_index);
        }
        assert!(a.iter().all(|s| s.occluded_index.is_some()));
    }

    #[test]
    fn dump_writes_pgms_and_index() {
        let (cfg, cs, _) = desk();
        let vocab = desk_vocab();
        let samples = make_dataset(&vocab, 5, Split::Train, 2, &cfg, &cs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_dataset(dir.path(), &samples).unwrap();
        let index = std::fs::read_to_string(dir.path().join("index.tsv")).unwrap();
        assert_eq!(index.lines().count(), 5);
        for (i, line) in index.lines().enumerate() {
            let mut fields = line.split('\t');
            assert_eq!(fields.next().unwrap(), format!("{i:05}"));
            assert_eq!(fields.next().unwrap(), samples[i].text);
            assert_eq!(fields.next().unwrap(), "-");
        }
        let (w, h, vals) = crate::pgm::read_pgm(&dir.path().join("00000.pgm")).unwrap();
        assert_eq!((w, h), (48, 16));
        assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn labels_round_trip_and_pixels_in_range(seed in 0u64..100_000, word_ix in 0usize..50) {
            let (cfg, cs, font) = desk();
            let word = desk_vocab()[word_ix];
            let mut rng = Rng::new(seed);
            let s = render_word(word, &cfg, &cs, &font, &mut rng).unwrap();
            prop_assert_eq!(cs.decode_label(&s.label), word);
            prop_assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
