#![allow(dead_code)]

use std::path::Path;

use dataforge::rvq::SpeechCodes;
use dataforge::speech::{serialize_speech, SpeechMode};
use dataforge::text::ByteTokenizer;
use dataforge::visual::{serialize_image, ImageTokens};
use dataforge::{TokenId, VocabLayout};
use rand::{Rng, RngCore, SeedableRng};

pub const TEXT_SIZE: u32 = ByteTokenizer::VOCAB_SIZE;

pub fn layout() -> VocabLayout {
    VocabLayout::build(TEXT_SIZE).unwrap()
}

/// Raw id arithmetic for the default layout, independent of `VocabLayout`.
pub mod ids {
    use super::TEXT_SIZE;
    use dataforge::TokenId;

    pub const SPEECH: u32 = TEXT_SIZE;
    pub const IMAGE: u32 = TEXT_SIZE + 4 * 1024;
    pub const SPECIAL: u32 = IMAGE + 8192;
    pub const IMG_OPEN: u32 = SPECIAL;
    pub const IMG_CLOSE: u32 = SPECIAL + 1;
    pub const SPCH_OPEN: u32 = SPECIAL + 2;
    pub const SPCH_CLOSE: u32 = SPECIAL + 3;
    pub const TOTAL: u32 = SPECIAL + 4;

    pub fn speech(layer: u32, code: u32) -> TokenId {
        SPEECH + layer * 1024 + code
    }

    pub fn image(code: u32) -> TokenId {
        IMAGE + code
    }

    pub fn speech_layer(id: TokenId) -> Option<u32> {
        (SPEECH..IMAGE).contains(&id).then(|| (id - SPEECH) / 1024)
    }

    pub fn is_image(id: TokenId) -> bool {
        (IMAGE..SPECIAL).contains(&id)
    }

    pub fn is_text(id: TokenId) -> bool {
        id < TEXT_SIZE
    }
}

/// Reference acceptor for well-formed streams written directly from the
/// block definitions: free text, `<image>` + 32 codes + `</image>`, and
/// `<spch>` a^T (b^T c^T d^T)? `</spch>` (or frame-major groups when
/// `alternating`).
pub fn oracle_accepts(tokens: &[TokenId], alternating: bool) -> bool {
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i];
        if ids::is_text(t) {
            i += 1;
        } else if t == ids::IMG_OPEN {
            if i + 33 >= tokens.len() {
                return false;
            }
            if !(1..=32).all(|k| ids::is_image(tokens[i + k])) || tokens[i + 33] != ids::IMG_CLOSE {
                return false;
            }
            i += 34;
        } else if t == ids::SPCH_OPEN {
            let Some(close) = tokens[i + 1..].iter().position(|&x| x == ids::SPCH_CLOSE) else {
                return false;
            };
            let body = &tokens[i + 1..i + 1 + close];
            let Some(layers): Option<Vec<u32>> = body.iter().map(|&x| ids::speech_layer(x)).collect() else {
                return false;
            };
            if !speech_body_ok(&layers, alternating) {
                return false;
            }
            i += close + 2;
        } else {
            return false;
        }
    }
    true
}

fn speech_body_ok(layers: &[u32], alternating: bool) -> bool {
    if layers.iter().all(|&l| l == 0) {
        return true;
    }
    let n = layers.len();
    if !n.is_multiple_of(4) {
        return false;
    }
    let t = n / 4;
    if alternating {
        layers.iter().enumerate().all(|(k, &l)| l == (k % 4) as u32)
    } else {
        layers.iter().enumerate().all(|(k, &l)| l == (k / t) as u32)
    }
}

pub fn random_codes(rng: &mut impl Rng, layers: usize, frames: usize) -> SpeechCodes {
    let codes = (0..layers).map(|_| (0..frames).map(|_| rng.random_range(0..1024u16)).collect()).collect();
    SpeechCodes::new(codes, 50).unwrap()
}

pub fn random_image(rng: &mut impl Rng) -> ImageTokens {
    let codes: Vec<u16> = (0..32).map(|_| rng.random_range(0..8192u16)).collect();
    ImageTokens::new(&codes).unwrap()
}

/// Block positions `(open, close)` inside an emitted stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Image,
    SpeechContent,
    SpeechFull,
}

pub struct Emitted {
    pub tokens: Vec<TokenId>,
    pub blocks: Vec<(BlockKind, usize, usize)>,
}

/// A stream of the shape the pipeline emits: text runs, image blocks and
/// speech blocks (content-only or sequential full).
pub fn pipeline_stream(rng: &mut impl Rng, layout: &VocabLayout, max_parts: usize) -> Emitted {
    let mut tokens = Vec::new();
    let mut blocks = Vec::new();
    let parts = rng.random_range(1..=max_parts);
    for _ in 0..parts {
        match rng.random_range(0..4) {
            0 => {
                let n = rng.random_range(0..20);
                tokens.extend((0..n).map(|_| rng.random_range(0..TEXT_SIZE)));
            }
            1 => {
                let start = tokens.len();
                tokens.extend(serialize_image(&random_image(rng), layout));
                blocks.push((BlockKind::Image, start, tokens.len() - 1));
            }
            k => {
                let frames = rng.random_range(1..12);
                let mode = if k == 2 { SpeechMode::ContentOnly } else { SpeechMode::FullSequential };
                let codes = random_codes(rng, mode.layers(), frames);
                let start = tokens.len();
                tokens.extend(serialize_speech(&codes, mode, layout).unwrap());
                let kind = if k == 2 { BlockKind::SpeechContent } else { BlockKind::SpeechFull };
                blocks.push((kind, start, tokens.len() - 1));
            }
        }
    }
    Emitted { tokens, blocks }
}

/// Coarse class used to pick class-changing substitutes.
pub fn coarse_class(id: TokenId) -> u32 {
    if ids::is_text(id) {
        0
    } else if let Some(l) = ids::speech_layer(id) {
        1 + l
    } else if ids::is_image(id) {
        5
    } else {
        6 + (id - ids::SPECIAL)
    }
}

/// A random id whose class differs from `id`'s.
pub fn different_class(rng: &mut impl Rng, id: TokenId) -> TokenId {
    loop {
        let c = rng.random_range(0..10u32);
        if c == coarse_class(id) {
            continue;
        }
        return match c {
            0 => rng.random_range(0..TEXT_SIZE),
            1..=4 => ids::speech(c - 1, rng.random_range(0..1024)),
            5 => ids::image(rng.random_range(0..8192)),
            _ => ids::SPECIAL + (c - 6),
        };
    }
}

pub fn write_png(path: &Path, w: u32, h: u32, seed: u64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = [rng.next_u32() as u8, rng.next_u32() as u8, rng.next_u32() as u8];
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([base[0].wrapping_add((x / 7) as u8), base[1].wrapping_add((y / 5) as u8), base[2]])
    });
    img.save(path).unwrap();
}

pub fn write_wav(path: &Path, seconds: f64, freq: f64, sample_rate: u32) {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    let n = (seconds * sample_rate as f64).round() as usize;
    for k in 0..n {
        let t = k as f64 / sample_rate as f64;
        let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
        let v = env * (2.0 * std::f64::consts::PI * freq * t).sin() + 0.3 * (2.0 * std::f64::consts::PI * freq * 2.7 * t).sin();
        w.write_sample((v * 12_000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

pub mod corpus {
    use std::path::{Path, PathBuf};

    use dataforge::manifest::{EntryKind, Item, ManifestEntry};
    use dataforge::mix::{MixSpec, Stage};
    use dataforge::pipeline::{pack_shards, read_wav, tokenize_corpus, PackReport, ShardConfig, TokenizeContext};
    use dataforge::rvq::{Codebooks, EnergyBands, FeatureExtractor, Frames, RvqConfig};
    use dataforge::sample::SourcedSample;
    use dataforge::templates::{Direction, TemplateSet};
    use dataforge::text::ByteTokenizer;
    use dataforge::visual::{FramePolicy, GridQuantizer};
    use dataforge::VocabLayout;

    const WORDS: [&str; 12] =
        ["river", "stone", "a", "the", "quiet", "market", "opens", "early", "under", "grey", "light", "and"];

    pub struct Corpus {
        pub dir: tempfile::TempDir,
        pub entries: Vec<ManifestEntry>,
        pub manifest: PathBuf,
    }

    fn sentence(k: usize, words: usize) -> String {
        (0..words).map(|i| WORDS[(k * 7 + i * 5) % WORDS.len()]).collect::<Vec<_>>().join(" ")
    }

    /// Writes PNG and WAV payloads plus `manifest.jsonl` into a temp dir.
    pub fn build(lang: usize, images: usize, speech: usize) -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for k in 0..lang {
            let mut e = ManifestEntry::new(format!("doc-{k}"), EntryKind::LanguageOnly);
            e.text = Some(sentence(k, 20));
            entries.push(e);
        }
        for k in 0..images {
            let name = format!("img-{k}.png");
            super::write_png(&dir.path().join(&name), 256 + 8 * k as u32, 240, k as u64);
            let mut e = ManifestEntry::new(format!("img-{k}"), EntryKind::ImageTextPair);
            e.payload = vec![name];
            e.width = Some(256 + 8 * k as u32);
            e.height = Some(240);
            e.clip_score = Some(0.31);
            e.language = Some("en".into());
            e.text = Some(sentence(k, 5));
            entries.push(e);
        }
        for k in 0..images.div_ceil(2) {
            let mut e = ManifestEntry::new(format!("web-{k}"), EntryKind::ImageTextInterleaved);
            e.clip_score = Some(0.26);
            e.segments = Some(vec![
                Item { text: Some(sentence(k, 6)), ..Default::default() },
                Item { image: Some(format!("img-{k}.png")), ..Default::default() },
                Item { text: Some(sentence(k + 1, 4)), ..Default::default() },
            ]);
            entries.push(e);
        }
        for k in 0..speech {
            let name = format!("utt-{k}.wav");
            super::write_wav(&dir.path().join(&name), 1.0, 180.0 + 40.0 * k as f64, 16_000);
            let mut e = ManifestEntry::new(format!("utt-{k}"), EntryKind::SpeechTextPair);
            e.payload = vec![name];
            e.duration_s = Some(1.0);
            e.language = Some("en".into());
            e.text = Some(sentence(k, 3));
            e.direction = Some(if k % 2 == 0 { Direction::ToText } else { Direction::ToModality });
            entries.push(e);
        }
        let manifest = dir.path().join("manifest.jsonl");
        let lines: Vec<String> = entries.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        std::fs::write(&manifest, lines.join("\n")).unwrap();
        Corpus { dir, entries, manifest }
    }

    /// Owned pieces a `TokenizeContext` borrows from.
    pub struct Env {
        pub layout: VocabLayout,
        pub templates: TemplateSet,
        pub quantizer: GridQuantizer,
        pub codebooks: Codebooks,
        pub extractor: EnergyBands,
    }

    impl Env {
        pub fn new(corpus: &Corpus) -> Env {
            let extractor = EnergyBands::default();
            let mut data = Vec::new();
            for e in corpus.entries.iter().filter(|e| e.kind == EntryKind::SpeechTextPair) {
                let (samples, rate) = read_wav(&corpus.dir.path().join(&e.payload[0])).unwrap();
                data.extend_from_slice(extractor.extract(&samples, rate).unwrap().as_slice());
            }
            let frames = Frames::new(extractor.dim(), data).unwrap();
            let cfg = RvqConfig { layers: 4, codebook_size: 16, iters: 10, seed: 3, ..Default::default() };
            Env {
                layout: super::layout(),
                templates: TemplateSet::default(),
                quantizer: GridQuantizer::palette(),
                codebooks: Codebooks::train(&frames, &cfg).unwrap(),
                extractor,
            }
        }

        pub fn ctx(&self, stage: Stage, window: usize, base: &Path, seed: u64) -> TokenizeContext<'_> {
            TokenizeContext {
                layout: &self.layout,
                tokenizer: &ByteTokenizer,
                templates: &self.templates,
                stage,
                quantizer: &self.quantizer,
                codebooks: Some(&self.codebooks),
                extractor: &self.extractor,
                frame_policy: FramePolicy::default(),
                window,
                base_dir: base.to_path_buf(),
                seed,
            }
        }

        pub fn tokenize(&self, corpus: &Corpus, stage: Stage, window: usize, seed: u64) -> Vec<SourcedSample> {
            tokenize_corpus(&corpus.entries, &self.ctx(stage, window, corpus.dir.path(), seed)).unwrap()
        }

        pub fn run(&self, corpus: &Corpus, stage: Stage, window: usize, batches: u64, seed: u64, out: &Path) -> PackReport {
            let samples = self.tokenize(corpus, stage, window, seed);
            let cfg = ShardConfig { window, packs_per_shard: 4, batches: Some(batches), seed };
            pack_shards(&samples, &MixSpec::preset(stage), &cfg, &self.layout, out).unwrap()
        }
    }
}

pub mod grammar_oracle {
    use std::collections::{HashSet, VecDeque};

    use super::{ids, BlockKind};
    use dataforge::grammar::{step_class, GrammarOptions, GrammarState};
    use dataforge::vocab::{TokenClass, TokenId};
    use rand::Rng;

    /// One representative id per class, via raw arithmetic.
    pub fn representative(c: TokenClass) -> TokenId {
        match c {
            TokenClass::Text => 65,
            TokenClass::SpeechCode(l) => ids::speech(l as u32, 7),
            TokenClass::ImageCode => ids::image(11),
            TokenClass::Special(s) => ids::SPECIAL + s.index(),
        }
    }

    /// States reachable from TopLevel whose speech frame counter stays <= max_t.
    pub fn reachable(opts: GrammarOptions, max_t: u32) -> Vec<GrammarState> {
        let bounded = |s: &GrammarState| match *s {
            GrammarState::InSpeechContent { frames } => frames <= max_t,
            GrammarState::InSpeechTimbre { frames, .. } => frames <= max_t,
            GrammarState::InSpeechAlternating { frames, .. } => frames <= max_t,
            _ => true,
        };
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([GrammarState::TopLevel]);
        seen.insert(GrammarState::TopLevel);
        while let Some(s) = queue.pop_front() {
            for c in TokenClass::ALL {
                if let Some(n) = step_class(s, c, opts) {
                    if bounded(&n) && seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        let mut v: Vec<_> = seen.into_iter().collect();
        v.sort_by_key(|s| format!("{s:?}"));
        v
    }

    pub fn mutate(rng: &mut impl Rng, tokens: &[TokenId], kind: BlockKind, open: usize, close: usize) -> (Vec<TokenId>, usize) {
        loop {
            let mut m = tokens.to_vec();
            let interior = close - open - 1;
            let op = rng.random_range(0..3);
            if op == 0 && interior > 0 && kind != BlockKind::SpeechContent {
                m.remove(rng.random_range(open + 1..close));
                return (m, close - 1);
            }
            if op == 1 {
                let at = rng.random_range(open + 1..=close);
                let id = rng.random_range(0..ids::TOTAL);
                if kind == BlockKind::SpeechContent && ids::speech_layer(id) == Some(0) {
                    continue;
                }
                m.insert(at, id);
                return (m, close + 1);
            }
            if op == 2 && interior > 0 {
                let at = rng.random_range(open + 1..close);
                m[at] = super::different_class(rng, m[at]);
                return (m, close);
            }
        }
    }
}

pub mod speech_oracle {
    use super::ids;
    use dataforge::rvq::SpeechCodes;
    use dataforge::speech::SpeechMode;
    use dataforge::TokenId;

    /// Hand-rolled serializer over raw ids.
    pub fn reference(codes: &SpeechCodes, mode: SpeechMode) -> Vec<TokenId> {
        let t = codes.frames();
        let mut out = vec![ids::SPCH_OPEN];
        let at = |l: usize, f: usize| ids::speech(l as u32, codes.layer(l)[f] as u32);
        match mode {
            SpeechMode::ContentOnly => out.extend((0..t).map(|f| at(0, f))),
            SpeechMode::FullSequential => out.extend((0..4).flat_map(|l| (0..t).map(move |f| (l, f))).map(|(l, f)| at(l, f))),
            SpeechMode::FullAlternating => out.extend((0..t).flat_map(|f| (0..4).map(move |l| (l, f))).map(|(l, f)| at(l, f))),
        }
        out.push(ids::SPCH_CLOSE);
        out
    }
}

pub mod rvq_oracle {
    use dataforge::rvq::{Codebooks, Frames};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn gaussian(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Seeded 2-D mixture of five isotropic Gaussians.
    pub fn mixture(n: usize, seed: u64) -> Frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [(-4.0, -4.0), (4.0, -3.0), (0.0, 0.0), (-3.0, 5.0), (5.0, 4.0)];
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            data.push((cx + 0.8 * gaussian(&mut rng)) as f32);
            data.push((cy + 0.8 * gaussian(&mut rng)) as f32);
        }
        Frames::new(2, data).unwrap()
    }

    /// Lowest-index argmin of squared distance, in f64.
    pub fn brute_nearest(cb: &Codebooks, layer: usize, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..cb.codebook_size() {
            let d: f64 = cb.centroid(layer, k).iter().zip(v).map(|(c, x)| (*c as f64 - x).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    pub fn brute_encode(cb: &Codebooks, frame: &[f32]) -> Vec<u16> {
        let mut r: Vec<f32> = frame.to_vec();
        let mut out = Vec::new();
        for layer in 0..cb.layer_count() {
            let rv: Vec<f64> = r.iter().map(|x| *x as f64).collect();
            let k = brute_nearest(cb, layer, &rv);
            for (x, c) in r.iter_mut().zip(cb.centroid(layer, k)) {
                *x -= *c;
            }
            out.push(k as u16);
        }
        out
    }

    pub fn mse(a: &Frames, b: &Frames) -> f64 {
        let n = a.as_slice().len() as f64;
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n
    }
}

pub mod pack_oracle {
    /// Greedy simulation: per pack, the sample lengths it holds.
    pub fn simulate(lens: &[usize], w: usize) -> Vec<Vec<usize>> {
        let mut packs: Vec<Vec<usize>> = Vec::new();
        let mut used = w + 1;
        for &n in lens {
            if used + n > w {
                packs.push(Vec::new());
                used = 0;
            }
            packs.last_mut().unwrap().push(n);
            used += n;
        }
        packs
    }

    /// Dense W x W mask from per-position owners.
    pub fn dense(batch_lens: &[usize], w: usize) -> Vec<Vec<bool>> {
        let mut owner = vec![None; w];
        let mut at = 0;
        for (k, &n) in batch_lens.iter().enumerate() {
            for o in &mut owner[at..at + n] {
                *o = Some(k);
            }
            at += n;
        }
        (0..w)
            .map(|i| (0..w).map(|j| j <= i && owner[i].is_some() && owner[i] == owner[j]).collect())
            .collect()
    }
}

pub mod render {
    use super::ids;
    use dataforge::sample::{Sample, SegmentKind};
    use dataforge::text::{ByteTokenizer, TextTokenizer};
    use dataforge::TokenId;

    pub fn image_block() -> Vec<TokenId> {
        let mut v = vec![ids::IMG_OPEN];
        v.extend((0..32).map(|c| ids::image(c * 7)));
        v.push(ids::IMG_CLOSE);
        v
    }

    pub fn speech_block(codes: usize) -> Vec<TokenId> {
        let mut v = vec![ids::SPCH_OPEN];
        v.extend((0..codes).map(|i| ids::speech((i % 4) as u32, i as u32)));
        v.push(ids::SPCH_CLOSE);
        v
    }

    /// Text segments decoded; modality blocks summarised as `<open>[n]<close>`.
    pub fn show(s: &Sample) -> String {
        let tok = ByteTokenizer;
        let mut out = String::new();
        for seg in &s.segments {
            let t = &s.tokens[seg.range.clone()];
            match seg.kind {
                SegmentKind::Text | SegmentKind::Markup => out.push_str(&tok.decode(t)),
                SegmentKind::Image | SegmentKind::Speech => {
                    let mut n = 0;
                    for &id in t {
                        match id {
                            ids::IMG_OPEN => out.push_str("<image>"),
                            ids::SPCH_OPEN => out.push_str("<spch>"),
                            ids::IMG_CLOSE | ids::SPCH_CLOSE => {
                                out.push_str(&format!("[{n}]{}", if id == ids::IMG_CLOSE { "</image>" } else { "</spch>" }));
                                n = 0;
                            }
                            _ => n += 1,
                        }
                    }
                }
            }
        }
        out
    }
}
