//! Deterministic synthetic data: procedural 8x8 glyphs, a toy language pair
//! (bijective token cipher + full reversal), corpus synthesis with pairwise
//! disjoint sentence pools, pixel noise, and on-disk persistence.
//!
//! On disk a corpus is `<dir>/manifest.tsv` (header `id, source, target,
//! image_path`), `<dir>/img/<id>.pgm` (binary 8-bit PGM, maxval 255), and
//! `<dir>/meta.json` carrying the split name, record count, generation seed,
//! and noise level. Loading re-verifies that every target is the oracle
//! translation of its source.

use std::collections::HashSet;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{TextImage, TokenSeq, Vocab, VocabSide, GLYPH_WIDTH, IMG_HEIGHT, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const ALPHABET_LEN: usize = 16;
pub const MIN_SENT_LEN: usize = 3;
pub const MAX_SENT_LEN: usize = 12;

pub fn source_char(content_idx: usize) -> char {
    (b'a' + content_idx as u8) as char
}

pub fn target_char(content_idx: usize) -> char {
    (b'A' + content_idx as u8) as char
}

pub fn source_vocab() -> Vocab {
    Vocab::new(
        VocabSide::Source,
        (0..ALPHABET_LEN).map(|i| source_char(i).to_string()),
    )
}

pub fn target_vocab() -> Vocab {
    Vocab::new(
        VocabSide::Target,
        (0..ALPHABET_LEN).map(|i| target_char(i).to_string()),
    )
}

// ---- glyphs -------------------------------------------------------------------

/// 8x8 binary bitmap for one source character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub ch: char,
    pub bitmap: [u8; 64],
}

impl Glyph {
    fn generate(ch: char, font_seed: u64) -> Glyph {
        let mut rng = RngStream::new(font_seed, &format!("glyph.{ch}"));
        let mut bitmap = [0u8; 64];
        for cell in bitmap.iter_mut() {
            *cell = u8::from(rng.bernoulli(0.5));
        }
        Glyph { ch, bitmap }
    }

    pub fn hamming(&self, other: &Glyph) -> usize {
        self.bitmap
            .iter()
            .zip(&other.bitmap)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// The glyphs of the whole source alphabet for one font seed, regenerated
/// with a bumped seed until every pair differs in at least 8 cells.
#[derive(Debug, Clone)]
pub struct GlyphSet {
    glyphs: Vec<Glyph>,
    pub font_seed: u64,
    pub effective_seed: u64,
}

impl GlyphSet {
    pub fn new(font_seed: u64) -> GlyphSet {
        for attempt in 0.. {
            let effective = font_seed.wrapping_add(attempt);
            let glyphs: Vec<Glyph> = (0..ALPHABET_LEN)
                .map(|i| Glyph::generate(source_char(i), effective))
                .collect();
            let distinct = glyphs
                .iter()
                .enumerate()
                .all(|(i, a)| glyphs[i + 1..].iter().all(|b| a.hamming(b) >= 8));
            if distinct {
                return GlyphSet {
                    glyphs,
                    font_seed,
                    effective_seed: effective,
                };
            }
        }
        unreachable!("random 64-cell bitmaps collide with vanishing probability")
    }

    pub fn glyph(&self, ch: char) -> Result<&Glyph> {
        self.glyphs
            .iter()
            .find(|g| g.ch == ch)
            .ok_or_else(|| Error::Input(format!("character {ch:?} outside the source alphabet")))
    }
}

/// Glyph lookup through a fresh set for the seed; the set constructor is the
/// distinctness-enforcing path.
pub fn glyph_for(ch: char, font_seed: u64) -> Result<Glyph> {
    Ok(GlyphSet::new(font_seed).glyph(ch)?.clone())
}

// ---- toy language ---------------------------------------------------------------

/// Bijective source-to-target token map plus full reversal, derived
/// deterministically from the generation seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyLanguageSpec {
    pub cipher: [usize; ALPHABET_LEN],
    pub seed: u64,
    pub font_seed: u64,
}

impl ToyLanguageSpec {
    pub fn from_seed(seed: u64) -> ToyLanguageSpec {
        let mut cipher = [0usize; ALPHABET_LEN];
        for (i, c) in cipher.iter_mut().enumerate() {
            *c = i;
        }
        let mut rng = RngStream::new(seed, "cipher");
        rng.shuffle(&mut cipher);
        ToyLanguageSpec {
            cipher,
            seed,
            font_seed: RngStream::new(seed, "font").next_u64(),
        }
    }

    pub fn inverse_cipher(&self) -> [usize; ALPHABET_LEN] {
        let mut inv = [0usize; ALPHABET_LEN];
        for (src, &tgt) in self.cipher.iter().enumerate() {
            inv[tgt] = src;
        }
        inv
    }
}

/// Apply the cipher token-wise, then reverse the order.
pub fn translate_oracle(source: &TokenSeq, spec: &ToyLanguageSpec) -> Result<TokenSeq> {
    let mut out = Vec::with_capacity(source.len());
    for &id in source.ids.iter().rev() {
        let content = id
            .checked_sub(NUM_SPECIALS)
            .filter(|&c| c < ALPHABET_LEN)
            .ok_or_else(|| Error::Input(format!("token id {id} outside the source alphabet")))?;
        out.push(NUM_SPECIALS + spec.cipher[content]);
    }
    Ok(TokenSeq::new(VocabSide::Target, out))
}

// ---- rasterization -----------------------------------------------------------------

/// Glyph bitmaps concatenated horizontally: `8 x (8 * len) x 1`, binary
/// intensities.
pub fn rasterize(text: &TokenSeq, font_seed: u64) -> Result<TextImage> {
    rasterize_with(&GlyphSet::new(font_seed), text)
}

pub fn rasterize_with(glyphs: &GlyphSet, text: &TokenSeq) -> Result<TextImage> {
    if text.is_empty() {
        return Err(Error::Input("cannot rasterize an empty sentence".into()));
    }
    if text.len() > MAX_SENT_LEN {
        return Err(Error::Input(format!(
            "sentence of {} glyphs exceeds the maximum width of {MAX_SENT_LEN}",
            text.len()
        )));
    }
    let width = GLYPH_WIDTH * text.len();
    let mut pixels = vec![0.0f32; IMG_HEIGHT * width];
    let mut rendered = String::with_capacity(text.len());
    for (pos, &id) in text.ids.iter().enumerate() {
        let content = id
            .checked_sub(NUM_SPECIALS)
            .filter(|&c| c < ALPHABET_LEN)
            .ok_or_else(|| Error::Input(format!("token id {id} outside the source alphabet")))?;
        let ch = source_char(content);
        let glyph = glyphs.glyph(ch)?;
        rendered.push(ch);
        for r in 0..IMG_HEIGHT {
            for c in 0..GLYPH_WIDTH {
                pixels[r * width + pos * GLYPH_WIDTH + c] =
                    f32::from(glyph.bitmap[r * GLYPH_WIDTH + c]);
            }
        }
    }
    TextImage::new(IMG_HEIGHT, width, pixels, rendered)
}

/// Flip each pixel independently with probability `p`.
pub fn add_noise(img: &TextImage, p: f64, seed: u64) -> Result<TextImage> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("flip probability {p} outside [0, 1]")));
    }
    let mut rng = RngStream::new(seed, "noise");
    let pixels = img
        .pixels
        .iter()
        .map(|&v| if rng.bernoulli(p) { 1.0 - v } else { v })
        .collect();
    TextImage::new(img.height, img.width, pixels, img.source_text.clone())
}

// ---- corpora --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TimtExample {
    pub id: u32,
    pub image: TextImage,
    pub source: TokenSeq,
    pub target: TokenSeq,
}

/// Recognition view: image and its transcription.
#[derive(Debug, Clone, Copy)]
pub struct OcrExample<'a> {
    pub image: &'a TextImage,
    pub text: &'a TokenSeq,
}

/// Translation view: parallel sentence pair.
#[derive(Debug, Clone, Copy)]
pub struct MtExample<'a> {
    pub source: &'a TokenSeq,
    pub target: &'a TokenSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: String,
    pub seed: u64,
    pub noise: f64,
    pub examples: Vec<TimtExample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ocr_examples(&self) -> impl Iterator<Item = OcrExample<'_>> {
        self.examples.iter().map(|e| OcrExample {
            image: &e.image,
            text: &e.source,
        })
    }

    pub fn mt_examples(&self) -> impl Iterator<Item = MtExample<'_>> {
        self.examples.iter().map(|e| MtExample {
            source: &e.source,
            target: &e.target,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSizes {
    pub ocr_n: usize,
    pub mt_n: usize,
    pub timt_n: usize,
    pub eval_n: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            ocr_n: 2000,
            mt_n: 2000,
            timt_n: 5000,
            eval_n: 500,
        }
    }
}

/// Count of distinct sentences over lengths 3..=12 of a 16-symbol alphabet.
fn sentence_space() -> u128 {
    (MIN_SENT_LEN..=MAX_SENT_LEN)
        .map(|l| (ALPHABET_LEN as u128).pow(l as u32))
        .sum()
}

fn random_sentence(rng: &mut RngStream) -> Vec<usize> {
    let len = MIN_SENT_LEN + rng.below(MAX_SENT_LEN - MIN_SENT_LEN + 1);
    (0..len).map(|_| NUM_SPECIALS + rng.below(ALPHABET_LEN)).collect()
}

/// Synthesize the four corpora (OCR-train, MT-train, TIMT-train, eval) with
/// pairwise disjoint sentence pools and persist them under
/// `<out>/{ocr,mt,timt,eval}`. Pure function of `(sizes, seed)`.
pub fn synthesize_corpora(
    sizes: SynthSizes,
    seed: u64,
    noise: f64,
    out_dir: &Path,
) -> Result<Vec<Corpus>> {
    let wanted = [
        ("ocr", sizes.ocr_n),
        ("mt", sizes.mt_n),
        ("timt", sizes.timt_n),
        ("eval", sizes.eval_n),
    ];
    if wanted.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Config("corpus sizes must all be at least 1".into()));
    }
    let total: usize = wanted.iter().map(|&(_, n)| n).sum();
    if (total as u128) > sentence_space() {
        return Err(Error::Config(format!(
            "requested {total} distinct sentences but only {} exist for lengths \
             {MIN_SENT_LEN}..={MAX_SENT_LEN} over {ALPHABET_LEN} symbols",
            sentence_space()
        )));
    }

    let spec = ToyLanguageSpec::from_seed(seed);
    let glyphs = GlyphSet::new(spec.font_seed);
    let mut rng = RngStream::new(seed, "sentences");
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut pool: Vec<Vec<usize>> = Vec::with_capacity(total);
    while pool.len() < total {
        let s = random_sentence(&mut rng);
        if seen.insert(s.clone()) {
            pool.push(s);
        }
    }

    let mut corpora = Vec::with_capacity(wanted.len());
    let mut cursor = 0;
    for (split, n) in wanted {
        let mut examples = Vec::with_capacity(n);
        for (id, ids) in pool[cursor..cursor + n].iter().enumerate() {
            let id = id as u32;
            let source = TokenSeq::new(VocabSide::Source, ids.clone());
            let target = translate_oracle(&source, &spec)?;
            let clean = rasterize_with(&glyphs, &source)?;
            let image = if noise > 0.0 {
                add_noise(&clean, noise, seed ^ u64::from(id) ^ fnv_split(split))?
            } else {
                clean
            };
            examples.push(TimtExample {
                id,
                image,
                source,
                target,
            });
        }
        cursor += n;
        let corpus = Corpus {
            split: split.to_string(),
            seed,
            noise,
            examples,
        };
        save_corpus(&corpus, &out_dir.join(split))?;
        corpora.push(corpus);
    }
    Ok(corpora)
}

fn fnv_split(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

// ---- persistence -------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    schema: String,
    split: String,
    count: usize,
    seed: u64,
    noise: f64,
}

const CORPUS_SCHEMA: &str = "e2timt-corpus/1";

fn token_text(seq: &TokenSeq, vocab: &Vocab) -> String {
    seq.ids
        .iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_tokens(text: &str, vocab: &Vocab, side: VocabSide, ctx: &str) -> Result<TokenSeq> {
    let mut ids = Vec::new();
    for tok in text.split_whitespace() {
        let id = vocab
            .id_of(tok)
            .ok_or_else(|| Error::Data(format!("{ctx}: unknown token {tok:?}")))?;
        ids.push(id);
    }
    Ok(TokenSeq::new(side, ids))
}

fn write_pgm(path: &Path, img: &TextImage) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_pgm(path: &Path, source_text: String) -> Result<TextImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if !bytes.starts_with(b"P5") {
        return Err(fail("not a binary PGM (bad magic)"));
    }
    // Header: magic then three whitespace-separated integers, with
    // #-comments allowed, then one whitespace byte before the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("malformed header integer"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fail("unsupported maxval (expected 255)"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing raster separator"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != width * height {
        return Err(fail(&format!(
            "raster holds {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    let pixels: Vec<f32> = raster.iter().map(|&b| f32::from(b) / 255.0).collect();
    TextImage::new(height, width, pixels, source_text)
}

/// Persist a corpus: TSV manifest, one PGM per record, and a meta file.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let src_vocab = source_vocab();
    let tgt_vocab = target_vocab();

    let manifest_path = dir.join("manifest.tsv");
    let file = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "id\tsource\ttarget\timage_path").map_err(|e| Error::io(&manifest_path, e))?;
    for ex in &corpus.examples {
        let rel = format!("img/{:05}.pgm", ex.id);
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            ex.id,
            token_text(&ex.source, &src_vocab),
            token_text(&ex.target, &tgt_vocab),
            rel
        )
        .map_err(|e| Error::io(&manifest_path, e))?;
        write_pgm(&dir.join(&rel), &ex.image)?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;

    let meta = CorpusMeta {
        schema: CORPUS_SCHEMA.to_string(),
        split: corpus.split.clone(),
        count: corpus.examples.len(),
        seed: corpus.seed,
        noise: corpus.noise,
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Data(format!("meta serialization: {e}")))?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

/// Load a corpus and re-verify: unique ids, readable pixel-exact images,
/// and `target == translate_oracle(source)` for every record.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    if meta.schema != CORPUS_SCHEMA {
        return Err(Error::Data(format!(
            "{}: unknown corpus schema {:?}",
            meta_path.display(),
            meta.schema
        )));
    }
    let spec = ToyLanguageSpec::from_seed(meta.seed);
    let src_vocab = source_vocab();
    let tgt_vocab = target_vocab();

    let manifest_path = dir.join("manifest.tsv");
    let manifest =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or_default();
    if header != "id\tsource\ttarget\timage_path" {
        return Err(Error::Data(format!(
            "{}: unexpected manifest header {header:?}",
            manifest_path.display()
        )));
    }
    let mut examples = Vec::with_capacity(meta.count);
    let mut seen_ids = HashSet::new();
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        let [id_text, source_text, target_text, image_rel] = cols[..] else {
            return Err(Error::Data(format!(
                "{}: malformed manifest row {line:?}",
                manifest_path.display()
            )));
        };
        let id: u32 = id_text
            .parse()
            .map_err(|_| Error::Data(format!("record {id_text:?}: unparseable id")))?;
        if !seen_ids.insert(id) {
            return Err(Error::Data(format!("record {id}: duplicate id")));
        }
        let source = parse_tokens(source_text, &src_vocab, VocabSide::Source, &format!("record {id}"))?;
        let target = parse_tokens(target_text, &tgt_vocab, VocabSide::Target, &format!("record {id}"))?;
        let expected = translate_oracle(&source, &spec)?;
        if expected != target {
            return Err(Error::Data(format!(
                "record {id}: target is not the oracle translation of its source"
            )));
        }
        let image = read_pgm(
            &dir.join(image_rel),
            source.ids.iter().map(|&i| source_char(i - NUM_SPECIALS)).collect(),
        )?;
        examples.push(TimtExample {
            id,
            image,
            source,
            target,
        });
    }
    if examples.len() != meta.count {
        return Err(Error::Data(format!(
            "{}: manifest holds {} records, meta says {}",
            manifest_path.display(),
            examples.len(),
            meta.count
        )));
    }
    Ok(Corpus {
        split: meta.split,
        seed: meta.seed,
        noise: meta.noise,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_deterministic_and_distinct() {
        let a = glyph_for('a', 7).unwrap();
        let b = glyph_for('a', 7).unwrap();
        assert_eq!(a, b);

        let set = GlyphSet::new(7);
        let glyphs: Vec<&Glyph> = (0..ALPHABET_LEN)
            .map(|i| set.glyph(source_char(i)).unwrap())
            .collect();
        assert_eq!(glyphs.len(), 16);
        for (i, g) in glyphs.iter().enumerate() {
            for h in &glyphs[i + 1..] {
                assert!(g.hamming(h) >= 8, "{} vs {}", g.ch, h.ch);
            }
        }
        assert!(set.glyph('z').is_err());
    }

    #[test]
    fn rasterize_shapes_and_concatenation() {
        let seed = 3;
        let text = TokenSeq::new(VocabSide::Source, vec![4, 5, 6]);
        let img = rasterize(&text, seed).unwrap();
        assert_eq!((img.height, img.width), (8, 24));
        assert!(img.pixels.iter().all(|&p| p == 0.0 || p == 1.0));

        let again = rasterize(&text, seed).unwrap();
        assert_eq!(img, again);

        // Column-wise concatenation property.
        let a = rasterize(&TokenSeq::new(VocabSide::Source, vec![4]), seed).unwrap();
        let b = rasterize(&TokenSeq::new(VocabSide::Source, vec![5]), seed).unwrap();
        let ab = rasterize(&TokenSeq::new(VocabSide::Source, vec![4, 5]), seed).unwrap();
        for r in 0..8 {
            assert_eq!(&ab.pixels[r * 16..r * 16 + 8], &a.pixels[r * 8..(r + 1) * 8]);
            assert_eq!(&ab.pixels[r * 16 + 8..r * 16 + 16], &b.pixels[r * 8..(r + 1) * 8]);
        }
    }

    #[test]
    fn rasterize_rejects_empty_and_oversized() {
        assert!(rasterize(&TokenSeq::new(VocabSide::Source, vec![]), 0).is_err());
        assert!(rasterize(&TokenSeq::new(VocabSide::Source, vec![4; 13]), 0).is_err());
        assert!(rasterize(&TokenSeq::new(VocabSide::Source, vec![99]), 0).is_err());
    }

    #[test]
    fn oracle_reverses_and_ciphers() {
        let spec = ToyLanguageSpec::from_seed(11);
        let src = TokenSeq::new(VocabSide::Source, vec![4, 5, 6]);
        let out = translate_oracle(&src, &spec).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.ids[0], NUM_SPECIALS + spec.cipher[2]);
        assert_eq!(out.ids[2], NUM_SPECIALS + spec.cipher[0]);

        // Bijectivity round trip: inverse cipher then reverse recovers input.
        let inv = spec.inverse_cipher();
        let back: Vec<usize> = out
            .ids
            .iter()
            .rev()
            .map(|&id| NUM_SPECIALS + inv[id - NUM_SPECIALS])
            .collect();
        assert_eq!(back, src.ids);

        assert!(translate_oracle(&TokenSeq::new(VocabSide::Source, vec![2]), &spec).is_err());
    }

    #[test]
    fn oracle_preserves_length() {
        let spec = ToyLanguageSpec::from_seed(2);
        let mut rng = RngStream::new(5, "len");
        for _ in 0..20 {
            let s = random_sentence(&mut rng);
            let src = TokenSeq::new(VocabSide::Source, s);
            let out = translate_oracle(&src, &spec).unwrap();
            assert_eq!(out.len(), src.len());
        }
    }

    #[test]
    fn noise_edge_cases_and_rate() {
        let text = TokenSeq::new(VocabSide::Source, vec![4, 5, 6]);
        let img = rasterize(&text, 1).unwrap();

        let same = add_noise(&img, 0.0, 42).unwrap();
        assert_eq!(img.pixels, same.pixels);

        let flipped = add_noise(&img, 1.0, 42).unwrap();
        for (a, b) in img.pixels.iter().zip(&flipped.pixels) {
            assert_eq!(*a, 1.0 - *b);
        }
        assert!(add_noise(&img, 1.5, 0).is_err());

        // 8x24 image at p=0.02: expected 3.84 flips; mean over 10k draws
        // within +-5%.
        let mut total = 0usize;
        for trial in 0..10_000u64 {
            let noisy = add_noise(&img, 0.02, trial).unwrap();
            total += img
                .pixels
                .iter()
                .zip(&noisy.pixels)
                .filter(|(a, b)| a != b)
                .count();
        }
        let mean = total as f64 / 10_000.0;
        assert!((mean - 3.84).abs() < 0.192, "mean {mean}");
    }

    #[test]
    fn synthesis_is_deterministic_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SynthSizes {
            ocr_n: 30,
            mt_n: 25,
            timt_n: 40,
            eval_n: 10,
        };
        let corpora = synthesize_corpora(sizes, 99, 0.0, dir.path()).unwrap();
        assert_eq!(corpora.len(), 4);
        assert_eq!(corpora[2].len(), 40);

        // Pairwise disjoint sentence pools.
        let pools: Vec<HashSet<Vec<usize>>> = corpora
            .iter()
            .map(|c| c.examples.iter().map(|e| e.source.ids.clone()).collect())
            .collect();
        for i in 0..pools.len() {
            for j in i + 1..pools.len() {
                assert!(pools[i].is_disjoint(&pools[j]), "pools {i} and {j} overlap");
            }
        }

        // Bitwise-identical files across runs with the same seed.
        let dir2 = tempfile::tempdir().unwrap();
        synthesize_corpora(sizes, 99, 0.0, dir2.path()).unwrap();
        for split in ["ocr", "mt", "timt", "eval"] {
            let a = std::fs::read(dir.path().join(split).join("manifest.tsv")).unwrap();
            let b = std::fs::read(dir2.path().join(split).join("manifest.tsv")).unwrap();
            assert_eq!(a, b, "{split} manifest differs");
            let img_a = std::fs::read(dir.path().join(split).join("img/00000.pgm")).unwrap();
            let img_b = std::fs::read(dir2.path().join(split).join("img/00000.pgm")).unwrap();
            assert_eq!(img_a, img_b, "{split} image differs");
        }
    }

    #[test]
    fn synthesis_rejects_impossible_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SynthSizes {
            ocr_n: usize::MAX / 8,
            mt_n: 1,
            timt_n: 1,
            eval_n: 1,
        };
        let err = synthesize_corpora(sizes, 1, 0.0, dir.path()).unwrap_err();
        assert!(err.to_string().contains("exist"), "{err}");
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SynthSizes {
            ocr_n: 5,
            mt_n: 5,
            timt_n: 8,
            eval_n: 4,
        };
        let corpora = synthesize_corpora(sizes, 7, 0.0, dir.path()).unwrap();
        for corpus in &corpora {
            let loaded = load_corpus(&dir.path().join(&corpus.split)).unwrap();
            assert_eq!(*corpus, loaded);
        }

        let manifest =
            std::fs::read_to_string(dir.path().join("timt").join("manifest.tsv")).unwrap();
        assert_eq!(manifest.lines().count(), 8 + 1);
    }

    #[test]
    fn corrupted_image_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SynthSizes {
            ocr_n: 2,
            mt_n: 2,
            timt_n: 2,
            eval_n: 2,
        };
        synthesize_corpora(sizes, 3, 0.0, dir.path()).unwrap();
        let victim = dir.path().join("eval").join("img/00001.pgm");
        std::fs::write(&victim, b"P6\n1 1\n255\nx").unwrap();
        let err = load_corpus(&dir.path().join("eval")).unwrap_err();
        assert!(err.to_string().contains("00001.pgm"), "{err}");
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn tampered_target_fails_oracle_reverification() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SynthSizes {
            ocr_n: 2,
            mt_n: 2,
            timt_n: 2,
            eval_n: 2,
        };
        synthesize_corpora(sizes, 3, 0.0, dir.path()).unwrap();
        let manifest_path = dir.path().join("mt").join("manifest.tsv");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        // Reverse the target column of the first record.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cols: Vec<&str> = lines[1].split('\t').collect();
        let reversed: Vec<&str> = cols[2].split_whitespace().rev().collect();
        lines[1] = format!("{}\t{}\t{}\t{}", cols[0], cols[1], reversed.join(" "), cols[3]);
        std::fs::write(&manifest_path, lines.join("\n") + "\n").unwrap();
        let err = load_corpus(&dir.path().join("mt")).unwrap_err();
        assert!(err.to_string().contains("oracle"), "{err}");
    }
}
