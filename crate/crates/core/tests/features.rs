use std::f64::consts::PI;

use asdkit::features::{
    band_center, chunk, mask_time, patchify, spec_augment, FeatureMap, MelConfig, MelExtractor, SpecAugPolicy, Waveform,
    LOG_FLOOR,
};
use diffcore::rng::indexed_stream;
use proptest::prelude::*;

fn tone(freq: f64, amp: f64, secs: f64) -> Waveform {
    let n = (secs * 16_000.0) as usize;
    Waveform::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect(), 16_000).unwrap()
}

/// Straight DFT and a freshly built HTK filterbank for one frame.
fn oracle_frame(cfg: &MelConfig, seg: &[f64]) -> Vec<f64> {
    let win = seg.len();
    let n = cfg.n_fft;
    let sr = cfg.sample_rate as f64;
    let power: Vec<f64> = (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &s) in seg.iter().enumerate() {
                let w = 0.54 - 0.46 * (2.0 * PI * t as f64 / (win - 1) as f64).cos();
                let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                re += s * w * ang.cos();
                im += s * w * ang.sin();
            }
            re * re + im * im
        })
        .collect();
    let mel = |hz: f64| 1127.0 * (hz / 700.0).ln_1p();
    let inv = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    let top = mel(sr / 2.0);
    (0..cfg.n_mels)
        .map(|b| {
            let edge = |i: usize| inv(top * i as f64 / (cfg.n_mels + 1) as f64);
            let (l, c, r) = (edge(b), edge(b + 1), edge(b + 2));
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * sr / n as f64;
                    let w = if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    };
                    w * p
                })
                .sum();
            e.max(LOG_FLOOR).ln()
        })
        .collect()
}

#[test]
fn logmel_matches_direct_evaluation() {
    let cfg = MelConfig {
        n_mels: 24,
        ..MelConfig::default()
    };
    let ex = MelExtractor::new(cfg).unwrap();
    let mut rng = indexed_stream(5, "oracle", 0);
    let w = Waveform::new((0..1200).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000).unwrap();
    let m = ex.logmel(&w).unwrap();
    let (win, hop) = (cfg.win_samples(), cfg.hop_samples());
    for t in [0, 3, m.frames - 1] {
        let want = oracle_frame(&cfg, &w.samples[t * hop..t * hop + win]);
        for (b, (got, want)) in m.frame(t).iter().zip(&want).enumerate() {
            assert!((got - want).abs() < 1e-8, "frame {t} band {b}: {got} vs {want}");
        }
    }
}

#[test]
fn tone_at_band_center_peaks_in_that_band() {
    let cfg = MelConfig::default();
    let ex = MelExtractor::new(cfg).unwrap();
    for b in [10, 40, 77, 110] {
        let m = ex.logmel(&tone(band_center(&cfg, b), 1.0, 0.3)).unwrap();
        for t in 1..m.frames - 1 {
            let row = m.frame(t);
            let arg = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            assert_eq!(arg, b, "frame {t}");
        }
    }
}

#[test]
fn scaling_by_ten_adds_log_hundred() {
    let ex = MelExtractor::new(MelConfig::default()).unwrap();
    let mut rng = indexed_stream(6, "scale", 0);
    let x: Vec<f64> = (0..4000).map(|_| rng.random_range(-0.1..0.1)).collect();
    let a = ex.logmel(&Waveform::new(x.clone(), 16_000).unwrap()).unwrap();
    let b = ex.logmel(&Waveform::new(x.iter().map(|v| v * 10.0).collect(), 16_000).unwrap()).unwrap();
    for (u, v) in a.data.iter().zip(&b.data) {
        if *u > LOG_FLOOR.ln() + 1.0 {
            assert!((v - u - 100f64.ln()).abs() < 1e-9);
        }
    }
}

#[test]
fn two_second_chunk_is_identity() {
    let w = tone(440.0, 0.5, 2.0);
    let c = chunk(&w, 2.0).unwrap();
    assert_eq!(c, vec![w]);
}

fn arb_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..40, 1usize..24).prop_flat_map(|(t, f)| {
        proptest::collection::vec(-5.0f64..5.0, t * f).prop_map(move |data| FeatureMap {
            frames: t,
            bands: f,
            data,
            frame_length_ms: 25.0,
            hop_ms: 10.0,
        })
    })
}

proptest! {
    #[test]
    fn specaug_preserves_shape(m in arb_map(), tm in 0usize..50, fm in 0usize..30, warp in 0usize..6, nt in 0usize..4, nf in 0usize..4, seed: u64) {
        let policy = SpecAugPolicy { enabled: true, time_mask_max: tm, freq_mask_max: fm, warp_max: warp, num_time_masks: nt, num_freq_masks: nf };
        let out = spec_augment(&m, &policy, &mut indexed_stream(seed, "specaug", 0));
        prop_assert_eq!((out.frames, out.bands, out.data.len()), (m.frames, m.bands, m.data.len()));
    }

    #[test]
    fn masks_and_warp_keep_row_multisets(m in arb_map(), seed: u64) {
        // With masks disabled, the warp only permutes bands within a frame.
        let policy = SpecAugPolicy { enabled: true, time_mask_max: 0, freq_mask_max: 0, warp_max: 3, num_time_masks: 0, num_freq_masks: 0 };
        let out = spec_augment(&m, &policy, &mut indexed_stream(seed, "warp", 0));
        for t in 0..m.frames {
            let mut a = m.frame(t).to_vec();
            let mut b = out.frame(t).to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn time_mask_fills_exact_rows(m in arb_map(), start in 0usize..40, width in 0usize..5) {
        prop_assume!(start + width <= m.frames);
        let mut out = m.clone();
        mask_time(&mut out, start, width, 7.5);
        for t in 0..m.frames {
            let masked = (start..start + width).contains(&t);
            for f in 0..m.bands {
                prop_assert_eq!(out.get(t, f), if masked { 7.5 } else { m.get(t, f) });
            }
        }
    }

    #[test]
    fn patches_tile_the_grid(m in arb_map(), pt in 1usize..6, pf in 1usize..6) {
        prop_assume!(pt <= m.frames && pf <= m.bands);
        let p = patchify(&m, pt, pf).unwrap();
        let per_row = m.bands / pf;
        prop_assert_eq!(p.len(), (m.frames / pt) * per_row);
        for (idx, patch) in p.iter().enumerate() {
            let (i, j) = (idx / per_row, idx % per_row);
            for (k, v) in patch.iter().enumerate() {
                prop_assert_eq!(*v, m.get(i * pt + k / pf, j * pf + k % pf));
            }
        }
    }
}
