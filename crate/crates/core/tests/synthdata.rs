use std::f64::consts::PI;

use asdkit::synthdata::{
    default_machines, generate_corpus, mask_attributes, purity, synthesize, AnomalyKind, ClipParams, CorpusConfig, Domain,
    Severity, Split, Truth,
};

/// Fraction of energy inside `band`, from a framed direct DFT.
fn band_fraction(x: &[f64], sr: f64, band: (f64, f64)) -> f64 {
    const N: usize = 512;
    let (mut inside, mut total) = (0.0, 0.0);
    for frame in x.chunks_exact(N) {
        for k in 1..N / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &s) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * t) as f64 / N as f64;
                re += s * a.cos();
                im += s * a.sin();
            }
            let p = re * re + im * im;
            let f = k as f64 * sr / N as f64;
            total += p;
            if f >= band.0 && f <= band.1 {
                inside += p;
            }
        }
    }
    inside / total
}

#[test]
fn burst_raises_band_energy_at_least_twofold() {
    let sev = Severity::default();
    for spec in default_machines() {
        for seed in 0..3 {
            let p = ClipParams {
                id_index: 0,
                attribute: 0,
                domain: Domain::Source,
                anomaly: None,
                seed,
            };
            let normal = synthesize(&spec, &p, 16_000, 2.0, &sev);
            let burst = synthesize(&spec, &ClipParams { anomaly: Some(AnomalyKind::Burst), ..p }, 16_000, 2.0, &sev);
            let a = band_fraction(&normal.samples, 16_000.0, spec.burst_band);
            let b = band_fraction(&burst.samples, 16_000.0, spec.burst_band);
            assert!(b >= 2.0 * a, "{} seed {seed}: {b} vs {a}", spec.name);
        }
    }
}

fn small() -> CorpusConfig {
    CorpusConfig {
        clip_seconds: 0.5,
        train_per_machine: 20,
        test_per_machine: 10,
        ..CorpusConfig::default()
    }
}

#[test]
fn test_split_is_balanced_and_train_is_normal() {
    let c = generate_corpus(&small(), 3).unwrap();
    for m in default_machines() {
        let rows: Vec<_> = c.manifest.iter().filter(|e| e.machine_type == m.name).collect();
        let train = rows.iter().filter(|e| e.split == Split::Train).count();
        let test: Vec<_> = rows.iter().filter(|e| e.split == Split::Test).collect();
        assert_eq!((train, test.len()), (20, 10));
        assert!(rows.iter().filter(|e| e.split == Split::Train).all(|e| e.truth == Truth::Normal));
        let anomalous = test.iter().filter(|e| e.truth == Truth::Anomalous).count();
        assert_eq!(anomalous, 5);
    }
}

#[test]
fn seed_changes_audio_not_shape() {
    let cfg = small();
    let a = generate_corpus(&cfg, 1).unwrap();
    let b = generate_corpus(&cfg, 2).unwrap();
    assert_eq!(a.manifest.len(), b.manifest.len());
    assert_ne!(a.clips[0].samples, b.clips[0].samples);
}

#[test]
fn masking_keeps_shadow_truth() {
    let c = generate_corpus(&small(), 4).unwrap();
    assert_eq!(mask_attributes(&c.manifest, &[]), c.manifest);
    let masked = mask_attributes(&c.manifest, &["pump".to_string()]);
    for (before, after) in c.manifest.iter().zip(&masked) {
        let hidden = after.machine_type == "pump" && after.split == Split::Train;
        assert_eq!(after.attribute.is_none(), hidden);
        assert_eq!(after.true_attribute(), before.true_attribute());
    }
    let truth: Vec<_> = masked.iter().filter_map(|e| e.true_attribute()).collect();
    assert_eq!(purity(&truth, &truth), 1.0);
}
