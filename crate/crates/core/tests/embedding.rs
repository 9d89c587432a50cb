use std::collections::HashSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use tiedrank::embedding::{
    batch_iter, generate_synthetic, load_dataset, logmel_spectrogram, write_dataset, EmbeddingSequence, LogMelConfig,
    Modality, PairedDataset, SynthConfig,
};
use tiedrank::{Error, Tensor};

// ---- log-mel -----------------------------------------------------------------

/// Power spectrum of one Hann-windowed frame by the O(n²) DFT definition.
fn naive_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let windowed: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(i, &s)| s * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect();
    // exact twiddles indexed by (k·i mod n)
    let cos: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).cos()).collect();
    let sin: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).sin()).collect();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in windowed.iter().enumerate() {
                let j = (k * i) % n;
                re += x * cos[j];
                im -= x * sin[j];
            }
            re * re + im * im
        })
        .collect()
}

/// Triangles on the HTK mel scale, written as the minimum of the two slopes.
fn oracle_filters(n_mels: usize, n_fft: usize, sr: f64) -> Vec<Vec<f64>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let top = mel(sr / 2.0);
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let points: Vec<f64> = (0..n_mels + 2).map(|i| hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    (0..n_mels)
        .map(|m| {
            (0..=n_fft / 2)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    let up = (f - points[m]) / (points[m + 1] - points[m]);
                    let down = (points[m + 2] - f) / (points[m + 2] - points[m + 1]);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

#[test]
fn fifteen_seconds_of_silence() {
    let pcm = vec![0.0; 15 * 44_100];
    assert_eq!(pcm.len(), 661_500);
    let m = logmel_spectrogram(&pcm, &LogMelConfig::default()).unwrap();
    // (661500 - 1764) / 441 = 1496 exactly, so one more frame fits
    assert_eq!(m.shape(), [1 + (661_500 - 1764) / 441, 64]);
    assert_eq!(m.rows(), 1497);
    assert!(m.data().iter().all(|&v| v == -100.0));
}

#[test]
fn sine_matches_naive_dft_oracle() {
    let cfg = LogMelConfig::default();
    let sr = 44_100.0;
    let n = cfg.win + 3 * cfg.hop;
    let pcm: Vec<f64> = (0..n).map(|i| (2.0 * PI * 1000.0 * i as f64 / sr).sin()).collect();
    let got = logmel_spectrogram(&pcm, &cfg).unwrap();
    assert_eq!(got.rows(), 4);
    let filters = oracle_filters(64, cfg.win, sr);
    let mut worst = 0.0f64;
    for t in 0..got.rows() {
        let power = naive_power(&pcm[t * cfg.hop..t * cfg.hop + cfg.win]);
        let expected: Vec<f64> = filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                (10.0 * e.log10()).max(-100.0)
            })
            .collect();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap()).unwrap();
        assert_eq!(argmax(got.row(t)), argmax(&expected));
        for (a, b) in got.row(t).iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "{worst:e} dB");
}

#[test]
fn one_hop_shift_shifts_frames() {
    let cfg = LogMelConfig::default();
    let n = cfg.win + 6 * cfg.hop;
    let sig: Vec<f64> = (0..n + cfg.hop)
        .map(|i| (i as f64 * 0.013).sin() + 0.3 * (i as f64 * 0.21).cos())
        .collect();
    let a = logmel_spectrogram(&sig[cfg.hop..], &cfg).unwrap();
    let b = logmel_spectrogram(&sig[..n], &cfg).unwrap();
    for t in 0..a.rows() - 1 {
        for (x, y) in a.row(t).iter().zip(b.row(t + 1)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn short_signal_is_rejected() {
    let err = logmel_spectrogram(&[0.0; 1000], &LogMelConfig::default()).unwrap_err();
    assert!(matches!(err, Error::TooShort { len: 1000, win: 1764 }));
}

// ---- dataset files ---------------------------------------------------------

fn seq(id: &str, m: Modality, rows: &[&[f32]]) -> EmbeddingSequence {
    EmbeddingSequence::new(id, m, Tensor::from_rows(rows).unwrap()).unwrap()
}

fn assert_same(a: &PairedDataset, b: &PairedDataset) {
    assert_eq!(a.pairing(), b.pairing());
    for (x, y) in a.audio().iter().zip(b.audio()).chain(a.captions().iter().zip(b.captions())) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.modality, y.modality);
        assert_eq!(x.frames, y.frames);
    }
}

#[test]
fn two_audio_ten_captions() {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    write_dataset(&ds, &p).unwrap();
    let back = load_dataset(&p).unwrap();
    assert_eq!(back.captions().len(), 10);
    assert_eq!(back.pairing_degrees(), vec![5, 5]);
    assert_same(&ds, &back);
}

#[test]
fn minimal_file_has_header_and_two_records() {
    let ds = PairedDataset::new(
        vec![seq("a", Modality::Audio, &[&[1.0, 2.0]])],
        vec![seq("a#0", Modality::Text, &[&[0.5], &[0.25]])],
        vec![0],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    write_dataset(&ds, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], r#"{"format":"tiedrank-emb","version":1}"#);
    assert!(lines[1].contains(r#""pair":null"#));
    assert!(lines[2].contains(r#""pair":"a""#));
    assert!(text.ends_with('\n') && !text.contains('\r'));
}

fn write_raw(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    std::fs::write(&p, lines.join("\n") + "\n").unwrap();
    (dir, p)
}

const HEADER: &str = r#"{"format":"tiedrank-emb","version":1}"#;

#[test]
fn load_errors_are_classified() {
    let audio = r#"{"id":"a","modality":"audio","dim":2,"frames":[[1,2]],"pair":null}"#;
    let (_d, p) = write_raw(&[HEADER, audio, r#"{"id":"t","modality":"text","dim":1,"frames":[[1]],"pair":"zzz"}"#]);
    assert!(matches!(load_dataset(&p), Err(Error::Integrity(_))));

    let (_d, p) = write_raw(&[HEADER, audio, r#"{"id":"t","modality":"text","dim":1,"frames":[[1]],"pair":"a"#]);
    assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 3, .. })));

    let (_d, p) = write_raw(&[HEADER, audio, r#"{"id":"t","modality":"text","dim":2,"frames":[[1]],"pair":"a"}"#]);
    assert!(matches!(load_dataset(&p), Err(Error::Schema(_))));

    // audio widths must agree across records
    let (_d, p) = write_raw(&[
        HEADER,
        audio,
        r#"{"id":"b","modality":"audio","dim":3,"frames":[[1,2,3]],"pair":null}"#,
        r#"{"id":"t","modality":"text","dim":1,"frames":[[1]],"pair":"a"}"#,
    ]);
    assert!(matches!(load_dataset(&p), Err(Error::Schema(_))));

    let (_d, p) = write_raw(&[audio]);
    assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 1, .. })));

    let (_d, p) = write_raw(&[HEADER, audio]);
    assert!(matches!(load_dataset(&p), Err(Error::Schema(_))), "no captions");

    assert!(matches!(load_dataset("/nonexistent/x.jsonl"), Err(Error::Io { .. })));
}

#[test]
fn masked_frames_are_dropped_on_write() {
    let a = EmbeddingSequence::with_mask(
        "a",
        Modality::Audio,
        Tensor::from_rows(&[[1.0f32, 2.0], [9.0, 9.0]]).unwrap(),
        vec![true, false],
    )
    .unwrap();
    let ds = PairedDataset::new(vec![a], vec![seq("t", Modality::Text, &[&[3.0]])], vec![0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    write_dataset(&ds, &p).unwrap();
    let back = load_dataset(&p).unwrap();
    assert_eq!(back.audio()[0].frames.data(), &[1.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn fuzzed_datasets_round_trip(
        n_audio in 1usize..100,
        per in 1usize..4,
        d_audio in 1usize..6,
        d_text in 1usize..6,
        seed in any::<u64>(),
        sigma in 0.0f64..3.0,
    ) {
        let ds = generate_synthetic(&SynthConfig {
            n_audio, captions_per_audio: per, d_audio, d_text, noise_sigma: sigma, seed,
            min_len: 1, max_len: 4, ..SynthConfig::default()
        }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        prop_assert_eq!(back.audio().len(), n_audio);
        assert_same(&ds, &back);
    }
}

#[test]
fn hundred_item_round_trip() {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: 100,
        seed: 99,
        noise_sigma: 1.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    write_dataset(&ds, &p).unwrap();
    assert_same(&ds, &load_dataset(&p).unwrap());
}

// ---- synthetic data and batching ---------------------------------------------

#[test]
fn generator_is_pure_and_sized() {
    let c = SynthConfig {
        n_audio: 64,
        captions_per_audio: 5,
        seed: 7,
        ..SynthConfig::default()
    };
    let a = generate_synthetic(&c).unwrap();
    let b = generate_synthetic(&c).unwrap();
    assert_eq!(a.captions().len(), 320);
    assert_same(&a, &b);
    let other = generate_synthetic(&SynthConfig { seed: 8, ..c }).unwrap();
    assert_ne!(a.audio()[0].frames, other.audio()[0].frames);
}

#[test]
fn epoch_batches_cover_captions_with_distinct_audio() {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: 64,
        ..SynthConfig::default()
    })
    .unwrap();
    let batches: Vec<_> = batch_iter(&ds, 32, 3, 0).unwrap().collect();
    assert_eq!(batches.len(), 10);
    let mut seen = HashSet::new();
    for b in &batches {
        assert_eq!(b.len(), 32);
        let distinct: HashSet<_> = b.audio.iter().collect();
        assert_eq!(distinct.len(), 32, "audio repeated within a batch");
        for (&c, &a) in b.captions.iter().zip(&b.audio) {
            assert_eq!(ds.pairing()[c], a);
            assert!(seen.insert(c), "caption used twice in an epoch");
        }
    }
    assert_eq!(seen.len(), 320);
    let again: Vec<_> = batch_iter(&ds, 32, 3, 0).unwrap().collect();
    assert_eq!(batches, again);
    let next: Vec<_> = batch_iter(&ds, 32, 3, 1).unwrap().collect();
    assert_ne!(batches, next);
}

#[test]
fn remainder_is_dropped_and_tiny_batches_rejected() {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: 13,
        captions_per_audio: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let batches: Vec<_> = batch_iter(&ds, 8, 0, 0).unwrap().collect();
    assert_eq!(batches.len(), 39 / 8);
    let covered: HashSet<usize> = batches.iter().flat_map(|b| b.captions.clone()).collect();
    assert_eq!(covered.len(), 4 * 8);
    for b in &batches {
        assert_eq!(b.audio.iter().collect::<HashSet<_>>().len(), 8);
    }
    assert!(matches!(batch_iter(&ds, 1, 0, 0), Err(Error::Config(_))));
}
