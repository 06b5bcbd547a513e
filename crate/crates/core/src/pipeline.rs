//! Corpus-level stages: tokenize manifest entries, pack them into shards
//! under a mixing schedule, and check or summarize written shards.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{validate_stream, GrammarOptions};
use crate::grammar::Violation;
use crate::manifest::{EntryKind, Item, ManifestEntry};
use crate::mix::{MixSpec, SchedulerState, SourceType, Stage};
use crate::packer::{PackBuilder, PackedBatch};
use crate::rvq::{Codebooks, FeatureExtractor, SpeechCodes};
use crate::sample::{Sample, SegmentKind, SourcedSample};
use crate::shard::{decode_shard, encode_shard, ShardRecord};
use crate::speech::{parse_speech, serialize_speech, SpeechMode};
use crate::templates::{
    render_pretrain, render_sft, Content, Conversation, Direction, PairKind, PairedRecord, TemplateSet, Turn,
};
use crate::text::TextTokenizer;
use crate::visual::{
    cut_times, detect_scenes, grid_features, load_image, parse_image, select_frames, serialize_image, FramePolicy,
    ImageQuantizer, IMAGE_BLOCK_LEN,
};
use crate::vocab::{Special, TokenClass, TokenId, VocabLayout};

/// Everything `tokenize_corpus` needs besides the entries.
pub struct TokenizeContext<'a> {
    pub layout: &'a VocabLayout,
    pub tokenizer: &'a dyn TextTokenizer,
    pub templates: &'a TemplateSet,
    pub stage: Stage,
    pub quantizer: &'a dyn ImageQuantizer,
    /// Required only when the manifest contains speech.
    pub codebooks: Option<&'a Codebooks>,
    pub extractor: &'a dyn FeatureExtractor,
    pub frame_policy: FramePolicy,
    /// Language-only documents are cut into chunks of at most this many tokens.
    pub window: usize,
    /// Payload paths are resolved against this directory.
    pub base_dir: PathBuf,
    pub seed: u64,
}

impl TokenizeContext<'_> {
    fn path(&self, p: &str) -> PathBuf {
        self.base_dir.join(p)
    }
}

pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample.max(1) - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect()
        }
    }
    .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

struct EntryWork<'c, 'a> {
    ctx: &'c TokenizeContext<'a>,
    entry: &'c ManifestEntry,
    rng: ChaCha8Rng,
}

impl EntryWork<'_, '_> {
    fn payload_err(&self, path: &Path, e: Error) -> Error {
        Error::Payload { id: self.entry.id.clone(), path: path.to_path_buf(), reason: e.to_string() }
    }

    fn image_block(&self, rel: &str) -> Result<Vec<TokenId>> {
        let path = self.ctx.path(rel);
        let img = load_image(&path).map_err(|e| self.payload_err(&path, e))?;
        let codes = self.ctx.quantizer.quantize(&img).map_err(|e| self.payload_err(&path, e))?;
        Ok(serialize_image(&codes, self.ctx.layout))
    }

    fn speech_codes(&self, rel: &str, layers: usize) -> Result<SpeechCodes> {
        let path = self.ctx.path(rel);
        let cb = self
            .ctx
            .codebooks
            .ok_or_else(|| Error::InvalidConfiguration("speech entries need trained codebooks".into()))?;
        let (samples, rate) = read_wav(&path).map_err(|e| self.payload_err(&path, e))?;
        let frames = self.ctx.extractor.extract(&samples, rate).map_err(|e| self.payload_err(&path, e))?;
        cb.encode(&frames, layers).map_err(|e| self.payload_err(&path, e))
    }

    fn speech_block(&self, rel: &str, mode: SpeechMode) -> Result<Vec<TokenId>> {
        let codes = self.speech_codes(rel, mode.layers())?;
        serialize_speech(&codes, mode, self.ctx.layout)
    }

    fn text(&self) -> Result<&str> {
        self.entry.text.as_deref().ok_or_else(|| self.entry.invalid("missing text"))
    }

    fn single_payload(&self) -> Result<&str> {
        match self.entry.payload.as_slice() {
            [p] => Ok(p),
            other => Err(self.entry.invalid(format!("expected one payload, got {}", other.len()))),
        }
    }

    fn direction(&mut self, to_modality_share: f64) -> Direction {
        let draw = self.rng.random_bool(to_modality_share);
        self.entry.direction.unwrap_or(if draw { Direction::ToModality } else { Direction::ToText })
    }

    fn pair(&self, kind: PairKind, payload: Vec<TokenId>, direction: Direction) -> Result<Sample> {
        let record = PairedRecord { kind, payload, text: self.text()?.to_string(), direction };
        render_pretrain(&record, self.ctx.stage, self.ctx.templates, self.ctx.layout, self.ctx.tokenizer)
    }

    fn items(&self, items: &[Item], sample: &mut Sample, user_speech: SpeechMode) -> Result<()> {
        for item in items {
            match (&item.text, &item.image, &item.speech) {
                (Some(t), None, None) => {
                    sample.push(SegmentKind::Text, &self.ctx.tokenizer.encode(t));
                }
                (None, Some(p), None) => {
                    sample.push(SegmentKind::Image, &self.image_block(p)?);
                }
                (None, None, Some(p)) => {
                    sample.push(SegmentKind::Speech, &self.speech_block(p, user_speech)?);
                }
                _ => return Err(self.entry.invalid("each item needs exactly one of text, image, speech")),
            }
        }
        Ok(())
    }

    fn video_pair(&mut self) -> Result<Sample> {
        let e = self.entry;
        let frames = &e.payload;
        if frames.is_empty() {
            return Err(e.invalid("video has no frames"));
        }
        let duration = e.require(e.duration_s, "duration_s")?;
        let direction = self.direction(0.6);
        let template = self.ctx.templates.select(PairKind::VideoDescription, direction, self.ctx.stage);
        let text_len = self.ctx.tokenizer.encode(&template.constant_text()).len()
            + self.ctx.tokenizer.encode(self.text()?).len();

        let mut images = Vec::with_capacity(frames.len());
        for rel in frames {
            let path = self.ctx.path(rel);
            images.push(load_image(&path).map_err(|err| self.payload_err(&path, err))?);
        }
        let feats: Vec<Vec<f32>> = images
            .iter()
            .map(|img| grid_features(img).map(|cells| cells.iter().flatten().copied().collect()))
            .collect::<Result<_>>()?;
        let cuts = cut_times(&detect_scenes(&feats, self.ctx.frame_policy.scene_threshold), frames.len(), duration);
        let times = select_frames(duration, text_len, &cuts, &self.ctx.frame_policy)?;
        let mut payload = Vec::with_capacity(times.len() * IMAGE_BLOCK_LEN);
        for t in times {
            let idx = ((t / duration * frames.len() as f64) as usize).min(frames.len() - 1);
            let codes = self.ctx.quantizer.quantize(&images[idx])?;
            payload.extend(serialize_image(&codes, self.ctx.layout));
        }
        self.pair(PairKind::VideoDescription, payload, direction)
    }

    fn conversation(&self) -> Result<Sample> {
        let e = self.entry;
        let turns = e.turns.as_deref().ok_or_else(|| e.invalid("missing turns"))?;
        let mut conv = Conversation { system: e.system.clone(), speech_output: e.speech_output, turns: Vec::new() };
        for t in turns {
            let mut content = Vec::with_capacity(t.content.len());
            for item in &t.content {
                content.push(match (&item.text, &item.image, &item.speech) {
                    (Some(s), None, None) => Content::Text(s.clone()),
                    (None, Some(p), None) => Content::Image(self.image_block(p)?),
                    (None, None, Some(p)) => {
                        let mode = match t.role {
                            crate::templates::Role::User => SpeechMode::ContentOnly,
                            crate::templates::Role::Assistant => SpeechMode::FullSequential,
                        };
                        Content::Speech(self.speech_block(p, mode)?)
                    }
                    _ => return Err(e.invalid("each item needs exactly one of text, image, speech")),
                });
            }
            conv.turns.push(Turn { role: t.role, content });
        }
        let (sample, _) = render_sft(&conv, self.ctx.templates, self.ctx.tokenizer)?;
        Ok(sample)
    }

    fn run(mut self) -> Result<Vec<Sample>> {
        let e = self.entry;
        let sample = match e.kind {
            EntryKind::LanguageOnly => {
                let ids = self.ctx.tokenizer.encode(self.text()?);
                let window = self.ctx.window.max(1);
                return Ok(ids
                    .chunks(window)
                    .map(|c| {
                        let mut s = Sample::default();
                        s.push(SegmentKind::Text, c);
                        s
                    })
                    .collect());
            }
            EntryKind::ImageTextPair => {
                let block = self.image_block(self.single_payload()?)?;
                let direction = self.direction(0.5);
                self.pair(PairKind::ImageCaption, block, direction)?
            }
            EntryKind::SpeechTextPair => {
                let direction = self.direction(0.5);
                let mode = match direction {
                    Direction::ToText => SpeechMode::ContentOnly,
                    Direction::ToModality => SpeechMode::FullSequential,
                };
                let block = self.speech_block(self.single_payload()?, mode)?;
                self.pair(PairKind::SpeechTranscript, block, direction)?
            }
            EntryKind::VideoTextPair => self.video_pair()?,
            EntryKind::ImageTextInterleaved | EntryKind::VideoTextInterleaved => {
                let items = e.segments.as_deref().ok_or_else(|| e.invalid("missing segments"))?;
                let mut s = Sample::default();
                self.items(items, &mut s, SpeechMode::ContentOnly)?;
                s
            }
            EntryKind::Conversation => self.conversation()?,
        };
        if sample.is_empty() {
            return Err(e.invalid("entry produced no tokens"));
        }
        Ok(vec![sample])
    }
}

fn entry_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Tokenizes one entry (already filtered). `index` seeds its direction draw.
pub fn tokenize_entry(entry: &ManifestEntry, index: usize, ctx: &TokenizeContext) -> Result<Vec<SourcedSample>> {
    let work = EntryWork { ctx, entry, rng: ChaCha8Rng::seed_from_u64(entry_seed(ctx.seed, index)) };
    let source = entry.source_type();
    Ok(work.run()?.into_iter().map(|sample| SourcedSample { source, sample }).collect())
}

/// Tokenizes entries in parallel; output order follows the manifest.
pub fn tokenize_corpus(entries: &[ManifestEntry], ctx: &TokenizeContext) -> Result<Vec<SourcedSample>> {
    let per_entry: Vec<Vec<SourcedSample>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| tokenize_entry(e, i, ctx))
        .collect::<Result<_>>()?;
    Ok(per_entry.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShardConfig {
    pub window: usize,
    pub packs_per_shard: usize,
    /// Number of batches to emit; `None` runs until a scheduled source
    /// runs dry.
    pub batches: Option<u64>,
    pub seed: u64,
}

impl Default for ShardConfig {
    fn default() -> Self {
        ShardConfig { window: crate::packer::DEFAULT_WINDOW, packs_per_shard: 1024, batches: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub batches: u64,
    pub samples: u64,
    pub tokens: u64,
    pub supervised_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub window: usize,
    pub batches: u64,
    pub per_source: BTreeMap<SourceType, SourceStats>,
    pub pad_tokens: u64,
    pub pad_fraction: f64,
}

impl CorpusStats {
    fn new(window: usize) -> Self {
        CorpusStats { window, ..Default::default() }
    }

    fn add(&mut self, source: SourceType, batch: &PackedBatch) {
        let s = self.per_source.entry(source).or_default();
        s.batches += 1;
        s.samples += batch.sample_count() as u64;
        s.tokens += batch.pad_start() as u64;
        s.supervised_tokens += batch.loss_mask().iter().filter(|m| **m).count() as u64;
        self.batches += 1;
        self.pad_tokens += batch.pad_len() as u64;
        let total = self.batches * self.window as u64;
        self.pad_fraction = self.pad_tokens as f64 / total as f64;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackReport {
    pub stats: CorpusStats,
    pub shards: Vec<PathBuf>,
    /// Samples left in their queues when packing stopped.
    pub unused_samples: BTreeMap<SourceType, u64>,
    /// Scheduler checkpoint after the last emitted batch.
    pub scheduler: SchedulerState,
}

pub fn shard_name(index: usize) -> String {
    format!("shard-{index:05}.miof")
}

/// Packs samples into batches, choosing each batch's source type from the
/// schedule and filling it greedily from that type's queue in input order.
pub fn pack_batches(
    samples: &[SourcedSample],
    spec: &MixSpec,
    config: &ShardConfig,
    pad_id: TokenId,
) -> Result<(Vec<ShardRecord>, SchedulerState, BTreeMap<SourceType, u64>)> {
    if config.window == 0 || config.window > u32::MAX as usize {
        return Err(Error::InvalidConfiguration(format!("window {} unsupported", config.window)));
    }
    let mut queues: [VecDeque<usize>; 4] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        if s.sample.is_empty() {
            return Err(Error::EmptySample { index: i });
        }
        if s.sample.len() > config.window {
            return Err(Error::SampleTooLong { index: i, len: s.sample.len(), window: config.window });
        }
        queues[s.source.index()].push_back(i);
    }
    for t in SourceType::ALL {
        if spec.ratio(t) > 0 && queues[t.index()].is_empty() {
            return Err(Error::ExhaustedSource(t));
        }
    }

    let mut sched = SchedulerState::new(spec.clone(), config.seed)?;
    let mut records = Vec::new();
    loop {
        if config.batches.is_some_and(|n| records.len() as u64 >= n) {
            break;
        }
        let mut probe = sched.clone();
        let t = probe.next_source();
        let queue = &mut queues[t.index()];
        if queue.is_empty() {
            if config.batches.is_some() {
                return Err(Error::ExhaustedSource(t));
            }
            break;
        }
        sched = probe;
        let mut builder = PackBuilder::new(config.window);
        while let Some(&i) = queue.front() {
            let s = &samples[i].sample;
            if !builder.fits(s.len()) {
                break;
            }
            builder
                .add(&s.tokens, s.supervision.as_deref())
                .map_err(|e| Error::InvalidSpec(format!("sample {i}: {e}")))?;
            queue.pop_front();
        }
        records.push(ShardRecord { source: t, batch: builder.finish(pad_id) });
    }
    let unused = SourceType::ALL
        .iter()
        .filter(|t| !queues[t.index()].is_empty())
        .map(|t| (*t, queues[t.index()].len() as u64))
        .collect();
    Ok((records, sched, unused))
}

/// Packs and writes `shard-NNNNN.miof` files plus `stats.json` into `out_dir`.
pub fn pack_shards(
    samples: &[SourcedSample],
    spec: &MixSpec,
    config: &ShardConfig,
    layout: &VocabLayout,
    out_dir: &Path,
) -> Result<PackReport> {
    if config.packs_per_shard == 0 {
        return Err(Error::InvalidConfiguration("packs_per_shard must be positive".into()));
    }
    let (records, scheduler, unused_samples) = pack_batches(samples, spec, config, layout.pad_id())?;
    std::fs::create_dir_all(out_dir)?;
    let mut stats = CorpusStats::new(config.window);
    let mut shards = Vec::new();
    for (k, chunk) in records.chunks(config.packs_per_shard).enumerate() {
        for r in chunk {
            stats.add(r.source, &r.batch);
        }
        let path = out_dir.join(shard_name(k));
        std::fs::write(&path, encode_shard(chunk, config.window, layout)?)?;
        shards.push(path);
    }
    let report = PackReport { stats, shards, unused_samples, scheduler };
    std::fs::write(out_dir.join("stats.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleViolation {
    pub shard: PathBuf,
    pub batch: usize,
    pub sample: usize,
    /// Position inside the sample.
    pub violation: Violation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptShard {
    pub shard: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub shards: usize,
    pub batches: u64,
    pub samples: u64,
    pub violations: Vec<SampleViolation>,
    pub corrupt: Vec<CorruptShard>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.corrupt.is_empty()
    }
}

/// Re-reads shards, checking checksums, pack invariants and the token
/// grammar of every sample.
pub fn validate_shards(paths: &[PathBuf], layout: &VocabLayout, opts: GrammarOptions) -> Result<ValidationReport> {
    let per_shard: Vec<ValidationReport> = paths
        .par_iter()
        .map(|path| validate_one(path, layout, opts))
        .collect::<Result<_>>()?;
    let mut report = ValidationReport { shards: paths.len(), ..Default::default() };
    for r in per_shard {
        report.batches += r.batches;
        report.samples += r.samples;
        report.violations.extend(r.violations);
        report.corrupt.extend(r.corrupt);
    }
    Ok(report)
}

fn validate_one(path: &Path, layout: &VocabLayout, opts: GrammarOptions) -> Result<ValidationReport> {
    let mut report = ValidationReport { shards: 1, ..Default::default() };
    let bytes = std::fs::read(path)?;
    let shard = match decode_shard(&bytes, layout) {
        Ok(s) => s,
        Err(e @ Error::ChecksumFailure { .. }) => {
            report.corrupt.push(CorruptShard { shard: path.to_path_buf(), error: e.to_string() });
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    for (b, rec) in shard.records.iter().enumerate() {
        report.batches += 1;
        for (s, tokens) in rec.batch.samples().enumerate() {
            report.samples += 1;
            for violation in validate_stream(tokens, layout, opts) {
                report.violations.push(SampleViolation { shard: path.to_path_buf(), batch: b, sample: s, violation });
            }
        }
    }
    Ok(report)
}

pub fn shard_stats(paths: &[PathBuf], layout: &VocabLayout) -> Result<CorpusStats> {
    let mut stats: Option<CorpusStats> = None;
    for path in paths {
        let shard = decode_shard(&std::fs::read(path)?, layout)?;
        let st = stats.get_or_insert_with(|| CorpusStats::new(shard.window));
        if st.window != shard.window {
            return Err(Error::InvalidInput(format!(
                "{} has window {}, expected {}",
                path.display(),
                shard.window,
                st.window
            )));
        }
        for r in &shard.records {
            st.add(r.source, &r.batch);
        }
    }
    Ok(stats.unwrap_or_default())
}

/// A decoded run of a token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoded {
    Text(String),
    Image(Vec<u16>),
    Speech { mode: SpeechMode, codes: Vec<Vec<u16>> },
}

/// Splits a stream into text runs and parsed modality blocks. Trailing
/// padding is dropped.
pub fn detokenize(tokens: &[TokenId], layout: &VocabLayout, tok: &dyn TextTokenizer) -> Result<Vec<Decoded>> {
    let end = tokens.iter().rposition(|&t| t != layout.pad_id()).map_or(0, |p| p + 1);
    let tokens = &tokens[..end];
    let mut out = Vec::new();
    let mut text: Vec<TokenId> = Vec::new();
    let mut i = 0;
    let offset = |e: Error, at: usize| match e {
        Error::MalformedStream { position, reason } => Error::MalformedStream { position: at + position, reason },
        other => other,
    };
    while i < tokens.len() {
        let id = tokens[i];
        let class = layout.class_of(id).map_err(|_| Error::MalformedStream {
            position: i,
            reason: format!("id {id} is outside the vocabulary"),
        })?;
        match class {
            TokenClass::Text => {
                text.push(id);
                i += 1;
                continue;
            }
            TokenClass::Special(Special::ImageStart) => {
                let block = tokens.get(i..i + IMAGE_BLOCK_LEN).unwrap_or(&tokens[i..]);
                let img = parse_image(block, layout).map_err(|e| offset(e, i))?;
                flush(&mut text, &mut out, tok);
                out.push(Decoded::Image(img.codes().to_vec()));
                i += IMAGE_BLOCK_LEN;
            }
            TokenClass::Special(Special::SpeechStart) => {
                let close = layout.special_id(Special::SpeechEnd);
                let j = tokens[i..].iter().position(|&t| t == close).map(|p| i + p).ok_or_else(|| {
                    Error::MalformedStream { position: tokens.len(), reason: "unterminated speech block".into() }
                })?;
                let (codes, mode) = parse_speech(&tokens[i..=j], layout).map_err(|e| offset(e, i))?;
                flush(&mut text, &mut out, tok);
                out.push(Decoded::Speech { mode, codes: codes.rows().to_vec() });
                i = j + 1;
            }
            other => {
                return Err(Error::MalformedStream { position: i, reason: format!("unexpected {other} outside a block") })
            }
        }
    }
    flush(&mut text, &mut out, tok);
    Ok(out)
}

fn flush(text: &mut Vec<TokenId>, out: &mut Vec<Decoded>, tok: &dyn TextTokenizer) {
    if !text.is_empty() {
        out.push(Decoded::Text(tok.decode(text)));
        text.clear();
    }
}
