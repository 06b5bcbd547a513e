use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dataforge::grammar::GrammarOptions;
use dataforge::manifest::{filter_manifest, read_manifest, FilterConfig};
use dataforge::mix::{MixSpec, Stage};
use dataforge::pipeline::{
    detokenize, pack_shards, read_wav, shard_stats, tokenize_corpus, validate_shards, ShardConfig, TokenizeContext,
};
use dataforge::rvq::{Codebooks, EnergyBands, FeatureExtractor, Frames, RvqConfig};
use dataforge::sample::SourcedSample;
use dataforge::shard::decode_shard;
use dataforge::templates::{TemplateOverrides, TemplateSet};
use dataforge::text::{ByteTokenizer, TextTokenizer};
use dataforge::visual::{FramePolicy, GridQuantizer};
use dataforge::{Error, VocabLayout};

/// Pipeline settings. Every field has a default; flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    text_size: u32,
    /// Vocabulary layout file; built from `text_size` when absent.
    layout: Option<PathBuf>,
    stage: Stage,
    /// Explicit ratios; the stage preset applies when absent.
    mix: Option<MixSpec>,
    seed: u64,
    window: usize,
    packs_per_shard: usize,
    batches: Option<u64>,
    codebooks: Option<PathBuf>,
    image_codebook: Option<PathBuf>,
    filter: FilterConfig,
    frame_policy: FramePolicy,
    templates: TemplateOverrides,
    rvq: RvqConfig,
    alternating_speech: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            text_size: ByteTokenizer::VOCAB_SIZE,
            layout: None,
            stage: Stage::I,
            mix: None,
            seed: 0,
            window: 2800,
            packs_per_shard: 1024,
            batches: None,
            codebooks: None,
            image_codebook: None,
            filter: FilterConfig::default(),
            frame_policy: FramePolicy::default(),
            templates: TemplateOverrides::default(),
            rvq: RvqConfig::default(),
            alternating_speech: false,
        }
    }
}

#[derive(Parser)]
#[command(name = "dataforge", version, about = "Build, check and inspect multimodal training shards")]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    layout: Option<PathBuf>,
    #[arg(long, global = true)]
    stage: Option<Stage>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary layout JSON.
    BuildVocab {
        #[arg(long)]
        text_size: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train speech codebooks on WAV files.
    TrainRvq {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        codebook_size: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Filter and tokenize a manifest into samples (JSON Lines).
    Tokenize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        codebooks: Option<PathBuf>,
    },
    /// Pack samples into shards under the mixing schedule.
    Pack {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        batches: Option<u64>,
    },
    /// Check shard checksums, pack invariants and stream grammar.
    Validate { shards: Vec<PathBuf> },
    /// Per-source batch, token and padding counts.
    Stats { shards: Vec<PathBuf> },
    /// Decode the samples of one shard into text and modality codes.
    Detokenize {
        shard: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
    },
}

enum Failure {
    Violations,
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfiguration(_) | Error::InvalidSpec(_) | Error::InvalidState(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    if let Some(l) = &cli.layout {
        cfg.layout = Some(l.clone());
    }
    if let Some(s) = cli.stage {
        cfg.stage = s;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.window {
        cfg.window = w;
    }
    Ok(cfg)
}

fn layout(cfg: &Config) -> Result<VocabLayout, Failure> {
    let layout = match &cfg.layout {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            VocabLayout::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => VocabLayout::build(cfg.text_size)?,
    };
    if layout.text_size() < ByteTokenizer.vocab_size() {
        return Err(Failure::Config(format!(
            "layout text size {} is smaller than the tokenizer's {}",
            layout.text_size(),
            ByteTokenizer.vocab_size()
        )));
    }
    Ok(layout)
}

fn mix_spec(cfg: &Config) -> Result<MixSpec, Failure> {
    let spec = cfg.mix.clone().unwrap_or_else(|| MixSpec::preset(cfg.stage));
    spec.validate()?;
    Ok(spec)
}

fn read_codebooks(p: &Path) -> Result<Codebooks, Failure> {
    let bytes = std::fs::read(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
    Codebooks::from_bytes(&bytes).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn runtime<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::BuildVocab { text_size, out } => {
            let mut cfg = cfg;
            if let Some(t) = text_size {
                cfg.text_size = t;
                cfg.layout = None;
            }
            let layout = layout(&cfg)?;
            std::fs::write(&out, layout.to_json()).map_err(runtime(&out))?;
            let digest: String = layout.digest().iter().map(|b| format!("{b:02x}")).collect();
            print_json(&serde_json::json!({
                "total_size": layout.total_size(),
                "pad_id": layout.pad_id(),
                "digest": digest,
            }));
            Ok(())
        }
        Command::TrainRvq { out, layers, codebook_size, iters, wavs } => {
            let mut rc = cfg.rvq.clone();
            rc.layers = layers.unwrap_or(rc.layers);
            rc.codebook_size = codebook_size.unwrap_or(rc.codebook_size);
            rc.iters = iters.unwrap_or(rc.iters);
            rc.seed = cli.seed.unwrap_or(cfg.seed);
            let extractor = EnergyBands::default();
            rc.frame_rate = extractor.frame_rate;
            let mut data = Vec::new();
            for w in &wavs {
                let (samples, rate) = read_wav(w).map_err(runtime(w))?;
                data.extend_from_slice(extractor.extract(&samples, rate)?.as_slice());
            }
            let frames = Frames::new(extractor.dim(), data)?;
            let cb = Codebooks::train(&frames, &rc)?;
            std::fs::write(&out, cb.to_bytes()).map_err(runtime(&out))?;
            print_json(&serde_json::json!({
                "frames": frames.len(),
                "layers": cb.layer_count(),
                "codebook_size": cb.codebook_size(),
                "dim": cb.dim(),
            }));
            Ok(())
        }
        Command::Tokenize { manifest, out, codebooks } => {
            let layout = layout(&cfg)?;
            let templates = TemplateSet::with_overrides(&cfg.templates)?;
            cfg.frame_policy.validate()?;
            let cb_path = codebooks.or(cfg.codebooks.clone());
            let cb = cb_path.as_deref().map(read_codebooks).transpose()?;
            let quantizer = match &cfg.image_codebook {
                Some(p) => GridQuantizer::from_codebooks(&read_codebooks(p)?)?,
                None => GridQuantizer::palette(),
            };
            let entries = read_manifest(&manifest).map_err(|e| match e {
                Error::Io(io) => Failure::Runtime(format!("{}: {io}", manifest.display())),
                other => other.into(),
            })?;
            let (kept, report) = filter_manifest(entries, &cfg.filter)?;
            let extractor = EnergyBands::default();
            let ctx = TokenizeContext {
                layout: &layout,
                tokenizer: &ByteTokenizer,
                templates: &templates,
                stage: cfg.stage,
                quantizer: &quantizer,
                codebooks: cb.as_ref(),
                extractor: &extractor,
                frame_policy: cfg.frame_policy.clone(),
                window: cfg.window,
                base_dir: manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
                seed: cfg.seed,
            };
            let samples = tokenize_corpus(&kept, &ctx)?;
            let file = File::create(&out).map_err(runtime(&out))?;
            let mut w = BufWriter::new(file);
            for s in &samples {
                serde_json::to_writer(&mut w, s).map_err(runtime(&out))?;
                w.write_all(b"\n").map_err(runtime(&out))?;
            }
            w.flush().map_err(runtime(&out))?;
            print_json(&serde_json::json!({ "samples": samples.len(), "filter": report }));
            Ok(())
        }
        Command::Pack { samples, out_dir, batches } => {
            let layout = layout(&cfg)?;
            let spec = mix_spec(&cfg)?;
            let file = File::open(&samples).map_err(runtime(&samples))?;
            let mut all: Vec<SourcedSample> = Vec::new();
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(runtime(&samples))?;
                if line.trim().is_empty() {
                    continue;
                }
                let s = serde_json::from_str(&line)
                    .map_err(|e| Failure::Runtime(format!("{}:{}: {e}", samples.display(), n + 1)))?;
                all.push(s);
            }
            let sc = ShardConfig {
                window: cfg.window,
                packs_per_shard: cfg.packs_per_shard,
                batches: batches.or(cfg.batches),
                seed: cfg.seed,
            };
            let report = pack_shards(&all, &spec, &sc, &layout, &out_dir)?;
            print_json(&report);
            Ok(())
        }
        Command::Validate { shards } => {
            let layout = layout(&cfg)?;
            let opts = GrammarOptions { alternating_speech: cfg.alternating_speech };
            let report = validate_shards(&shards, &layout, opts)?;
            print_json(&report);
            if report.is_clean() {
                Ok(())
            } else {
                Err(Failure::Violations)
            }
        }
        Command::Stats { shards } => {
            let layout = layout(&cfg)?;
            print_json(&shard_stats(&shards, &layout)?);
            Ok(())
        }
        Command::Detokenize { shard, batch } => {
            let layout = layout(&cfg)?;
            let bytes = std::fs::read(&shard).map_err(runtime(&shard))?;
            let decoded = decode_shard(&bytes, &layout)?;
            let mut out = Vec::new();
            for (b, rec) in decoded.records.iter().enumerate() {
                if batch.is_some_and(|want| want != b) {
                    continue;
                }
                for (s, tokens) in rec.batch.samples().enumerate() {
                    out.push(serde_json::json!({
                        "batch": b,
                        "sample": s,
                        "source": rec.source,
                        "segments": detokenize(tokens, &layout, &ByteTokenizer)?,
                    }));
                }
            }
            print_json(&out);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violations) => ExitCode::from(1),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
    }
}
