mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::corpus::{self, Env};
use common::grammar_oracle::{mutate, reachable, representative};
use common::pack_oracle::{dense, simulate};
use common::render::{image_block, show, speech_block};
use common::rvq_oracle::{brute_encode, mixture, mse};
use common::speech_oracle::reference;
use common::{ids, layout, oracle_accepts, pipeline_stream, random_codes};
use dataforge::grammar::{allowed_next, step, validate_stream, GrammarOptions};
use dataforge::mix::{plan, MixSpec, SourceType, Stage};
use dataforge::packer::{pack, PackConfig, SupervisionSpec};
use dataforge::rvq::{Codebooks, RvqConfig, SpeechCodes};
use dataforge::speech::{parse_speech, serialize_speech, speech_token_count, SpeechMode};
use dataforge::templates::{
    render_pretrain, render_sft, Content, Conversation, Direction, PairKind, PairedRecord, Role, TemplateSet, Turn,
};
use dataforge::text::ByteTokenizer;
use dataforge::vocab::{TokenClass, EXTENSION_SIZE};
use dataforge::{Special, Token, TokenId, VocabLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn within(limit: Duration, start: Instant) {
    let took = start.elapsed();
    assert!(took < limit, "took {took:?}, limit {limit:?}");
}

fn vocabulary() {
    let start = Instant::now();
    assert_eq!(EXTENSION_SIZE, 12_292);
    let l = VocabLayout::build(64_000).unwrap();
    let mut id = 64_000;
    let mut expect = |tok: Token| {
        assert_eq!(l.encode(tok).unwrap(), id);
        assert_eq!(l.classify(id).unwrap(), tok);
        id += 1;
    };
    for layer in 0..4u8 {
        for code in 0..1024u16 {
            expect(Token::Speech { layer, code });
        }
    }
    for code in 0..8192u16 {
        expect(Token::Image(code));
    }
    for s in Special::ALL {
        expect(Token::Special(s));
    }
    assert_eq!(id, l.total_size());
    assert!(l.classify(id).is_err());
    within(Duration::from_secs(1), start);
}

fn speech_counts() {
    let l = layout();
    let f = |d: f64, m| speech_token_count(d, m, 50).unwrap();
    assert_eq!(f(15.0, SpeechMode::FullSequential), 3002);
    assert_eq!(f(15.0, SpeechMode::FullAlternating), 3002);
    assert_eq!(f(1.0, SpeechMode::FullSequential), 202);
    assert_eq!(f(15.0, SpeechMode::ContentOnly), 752);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (mode, frames, want) in [(SpeechMode::FullSequential, 750, 3002), (SpeechMode::FullAlternating, 50, 202), (SpeechMode::ContentOnly, 750, 752)] {
        let codes = random_codes(&mut rng, mode.layers(), frames);
        assert_eq!(serialize_speech(&codes, mode, &l).unwrap().len(), want);
    }
}

fn interleaving() {
    let l = layout();
    let codes = SpeechCodes::new(vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]], 50).unwrap();
    let s = |layer: u32, code: u32| ids::speech(layer, code);
    let (o, c) = (ids::SPCH_OPEN, ids::SPCH_CLOSE);
    let seq = vec![o, s(0, 1), s(0, 2), s(1, 3), s(1, 4), s(2, 5), s(2, 6), s(3, 7), s(3, 8), c];
    let alt = vec![o, s(0, 1), s(1, 3), s(2, 5), s(3, 7), s(0, 2), s(1, 4), s(2, 6), s(3, 8), c];
    assert_eq!(serialize_speech(&codes, SpeechMode::FullSequential, &l).unwrap(), seq);
    assert_eq!(serialize_speech(&codes, SpeechMode::FullAlternating, &l).unwrap(), alt);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..10_000 {
        let mode = [SpeechMode::ContentOnly, SpeechMode::FullSequential, SpeechMode::FullAlternating][n % 3];
        let min_t = if mode == SpeechMode::FullAlternating { 2 } else { 1 };
        let t = rng.random_range(min_t..60);
        let codes = random_codes(&mut rng, mode.layers(), t);
        let tokens = serialize_speech(&codes, mode, &l).unwrap();
        assert_eq!(tokens, reference(&codes, mode));
        assert_eq!(parse_speech(&tokens, &l).unwrap(), (codes, mode));
    }
}

fn rvq_monotone() {
    let start = Instant::now();
    let frames = mixture(10_000, 7);
    let cfg = RvqConfig { layers: 8, codebook_size: 16, iters: 20, seed: 7, ..Default::default() };
    let cb = Codebooks::train(&frames, &cfg).unwrap();
    let codes = cb.encode(&frames, 8).unwrap();
    let mut prev = f64::INFINITY;
    for k in 1..=8 {
        let e = mse(&frames, &cb.decode(&codes.truncated(k).unwrap()).unwrap());
        assert!(e <= prev, "layer {k}: {e} > {prev}");
        prev = e;
    }
    for t in 0..100 {
        let got: Vec<u16> = (0..8).map(|l| codes.layer(l)[t]).collect();
        assert_eq!(got, brute_encode(&cb, frames.row(t)), "frame {t}");
    }
    within(Duration::from_secs(30), start);
}

fn random_samples(rng: &mut impl Rng, n: usize, max_len: usize, pad: TokenId) -> Vec<Vec<TokenId>> {
    (0..n).map(|_| (0..rng.random_range(1..=max_len)).map(|_| rng.random_range(0..pad)).collect()).collect()
}

fn packing() {
    let start = Instant::now();
    let pad = layout().pad_id();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (w, max_len) in [(2800, 2800), (128, 128)] {
        let input = random_samples(&mut rng, 10_000, max_len, pad);
        let packs = pack(&input, &PackConfig::new(w, pad), &SupervisionSpec::PretrainAll).unwrap();
        let lens: Vec<usize> = input.iter().map(Vec::len).collect();
        let sim = simulate(&lens, w);
        assert_eq!(packs.len(), sim.len());
        let mut stream = Vec::new();
        for (p, want) in packs.iter().zip(&sim) {
            assert_eq!(p.tokens().len(), w);
            let used: usize = want.iter().sum();
            assert!(used <= w);
            let mut b = vec![0u32];
            for n in want {
                b.push(b.last().unwrap() + *n as u32);
            }
            assert_eq!(p.boundaries(), b.as_slice());
            assert_eq!(p.pad_start(), used);
            assert!(p.tokens().iter().enumerate().all(|(i, &t)| (t == pad) == (i >= used)));
            if w == 128 {
                let oracle = dense(want, w);
                for (i, row) in oracle.iter().enumerate() {
                    for (j, &want) in row.iter().enumerate() {
                        assert_eq!(p.attention_allowed(i, j), want);
                    }
                }
            } else {
                for (k, r) in b.windows(2).enumerate() {
                    assert_eq!(p.sample_at(r[0] as usize), Some(k));
                    assert_eq!(p.sample_at(r[1] as usize - 1), Some(k));
                }
                assert!((used..w).all(|i| p.sample_at(i).is_none()));
            }
            stream.extend(p.samples().map(<[_]>::to_vec));
        }
        assert_eq!(stream, input);
    }
    within(Duration::from_secs(60), start);
}

fn mixing() {
    // speech-text share per stage, as published
    let published = [(Stage::I, [12, 2, 0, 2], 0.125), (Stage::II, [2, 2, 6, 6], 0.375), (Stage::III, [2, 1, 1, 12], 0.75)];
    for (stage, ratios, share) in published {
        let p = plan(&MixSpec::preset(stage), 160, 0).unwrap();
        let mut counts = [0u32; 4];
        for t in &p {
            counts[t.index()] += 1;
        }
        assert_eq!(counts, ratios.map(|r| 10 * r), "{stage:?}");
        assert_eq!(counts[SourceType::SpeechText.index()] as f64 / 160.0, share);
    }
}

fn templates() {
    let set = TemplateSet::default();
    let l = layout();
    let render = |kind, direction, payload: Vec<TokenId>, text: &str, stage| {
        let rec = PairedRecord { kind, payload, text: text.into(), direction };
        show(&render_pretrain(&rec, stage, &set, &l, &ByteTokenizer).unwrap())
    };
    let video = [image_block(), image_block()].concat();
    let cases = [
        (render(PairKind::ImageCaption, Direction::ToText, image_block(), "a red bus", Stage::I), include_str!("golden/image_to_text.txt")),
        (render(PairKind::ImageCaption, Direction::ToModality, image_block(), "a red bus", Stage::I), include_str!("golden/text_to_image.txt")),
        (render(PairKind::VideoDescription, Direction::ToText, video.clone(), "two dogs play", Stage::I), include_str!("golden/video_to_text.txt")),
        (render(PairKind::VideoDescription, Direction::ToModality, video, "two dogs play", Stage::I), include_str!("golden/text_to_video.txt")),
        (render(PairKind::SpeechTranscript, Direction::ToText, speech_block(50), "good morning", Stage::II), include_str!("golden/asr.txt")),
        (render(PairKind::SpeechTranscript, Direction::ToText, speech_block(50), "good morning", Stage::III), include_str!("golden/asr_stage_iii.txt")),
        (render(PairKind::SpeechTranscript, Direction::ToModality, speech_block(200), "good morning", Stage::III), include_str!("golden/tts.txt")),
    ];
    for (got, want) in cases {
        assert_eq!(got, want);
    }
    let conv = |speech_output, user, assistant| Conversation {
        system: None,
        speech_output,
        turns: vec![Turn { role: Role::User, content: user }, Turn { role: Role::Assistant, content: assistant }],
    };
    let text = conv(false, vec![Content::Text("What is this? ".into()), Content::Image(image_block())], vec![Content::Text("A red bus.".into())]);
    assert_eq!(show(&render_sft(&text, &set, &ByteTokenizer).unwrap().0), include_str!("golden/sft.txt"));
    let speech = conv(true, vec![Content::Speech(speech_block(50))], vec![Content::Speech(speech_block(200))]);
    assert_eq!(show(&render_sft(&speech, &set, &ByteTokenizer).unwrap().0), include_str!("golden/sft_speech.txt"));
}

fn grammar() {
    let l = layout();
    let seq = GrammarOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let e = pipeline_stream(&mut rng, &l, 6);
        assert!(validate_stream(&e.tokens, &l, seq).is_empty());
    }
    let mut done = 0;
    while done < 1000 {
        let e = pipeline_stream(&mut rng, &l, 5);
        if e.blocks.is_empty() {
            continue;
        }
        let (kind, open, close) = e.blocks[rng.random_range(0..e.blocks.len())];
        let (m, new_close) = mutate(&mut rng, &e.tokens, kind, open, close);
        let v = validate_stream(&m, &l, seq);
        assert!(!v.is_empty() && v[0].position <= new_close, "{kind:?} mutation missed");
        assert!(!oracle_accepts(&m, false));
        done += 1;
    }
    for opts in [seq, GrammarOptions { alternating_speech: true }] {
        for s in reachable(opts, 4) {
            let allowed = allowed_next(s, opts);
            for c in TokenClass::ALL {
                assert_eq!(allowed.contains(c), step(s, representative(c), &l, opts).is_ok(), "{s:?} {c:?}");
            }
        }
    }
}

fn determinism() {
    let c = corpus::build(12, 40, 24);
    let digests = |seed| {
        let env = Env::new(&c);
        let out = tempfile::tempdir().unwrap();
        let report = env.run(&c, Stage::II, 320, 16, seed, out.path());
        report.shards.iter().map(|p| Sha256::digest(std::fs::read(p).unwrap()).to_vec()).collect::<Vec<_>>()
    };
    let (a, b) = (digests(42), digests(42));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

fn main() -> ExitCode {
    let criteria: [(&str, fn()); 9] = [
        ("1 vocabulary arithmetic", vocabulary),
        ("2 speech token counts", speech_counts),
        ("3 interleaving round trip", interleaving),
        ("4 rvq monotonicity", rvq_monotone),
        ("5 packing", packing),
        ("6 mixing exactness", mixing),
        ("7 templates", templates),
        ("8 grammar", grammar),
        ("9 end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(f)).is_ok();
        println!("{} criterion {name} ({:.2?})", if ok { "PASS" } else { "FAIL" }, start.elapsed());
        failed += usize::from(!ok);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
