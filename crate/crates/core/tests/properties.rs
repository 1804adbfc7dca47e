//! Cross-module property tests: codec identity under fuzzing, container
//! round-trips, and encoder density monotonicity.

use neurosleep::encoder::{
    self, decode, encode_nevt, decode_nevt, encode_ramsdm, event_density, reconstruct,
    EncoderConfig,
};
use neurosleep::network::{self, ModelConfig};
use neurosleep::signal_io::{self, SynthComponent, SynthSpec};
use proptest::prelude::*;

fn synth(seed: u64, n_epochs: usize, fs: f64) -> Vec<f64> {
    let spec = SynthSpec {
        duration_s: 30.0 * n_epochs as f64,
        fs,
        components: vec![
            SynthComponent {
                center_hz: 0.6 + (seed % 7) as f64 * 0.3,
                bandwidth_hz: 0.3,
                amplitude: 1.0,
            },
            SynthComponent {
                center_hz: 8.0,
                bandwidth_hz: 1.0,
                amplitude: 0.2,
            },
        ],
        noise_amplitude: 0.02,
        seed,
    };
    signal_io::synth_signal(&spec).unwrap().samples
}

/// 1,000 fuzzed signals: replaying the event stream reproduces the retained
/// reference series bit-exactly, and reconstruction equals their sum.
#[test]
fn codec_identity_fuzz() {
    let start = std::time::Instant::now();
    for i in 0..1000u64 {
        let x = synth(i, 1, 20.0 + (i % 5) as f64 * 20.0);
        let cfg = EncoderConfig {
            k_slow: 1.0 + 0.2 * (i % 8) as f64,
            k_fast: 0.6 + 0.1 * (i % 4) as f64,
            ..EncoderConfig::default()
        };
        let stream = encode_ramsdm(&x, 100.0, &cfg).unwrap();
        let (r_slow, r_fast) = decode(&stream, stream.r0_slow).unwrap();
        assert_eq!(r_slow, stream.r_slow, "slow replay diverged at seed {i}");
        assert_eq!(r_fast, stream.r_fast, "fast replay diverged at seed {i}");
        let xh = reconstruct(&stream).unwrap();
        for (t, &v) in xh.iter().enumerate() {
            assert_eq!(v, stream.r_slow[t] + stream.r_fast[t], "seed {i} t {t}");
        }
        // The container stores step sizes in binary32, so one quantization
        // happens on the first write; after that the bytes are a fixed point.
        let bytes = encode_nevt(&stream);
        let back = decode_nevt(&bytes).unwrap();
        assert_eq!(encode_nevt(&back), bytes, "container not idempotent, seed {i}");
        assert_eq!(back.length, stream.length);
        assert_eq!(back.slow_events.len(), stream.slow_events.len());
        assert_eq!(back.fast_events.len(), stream.fast_events.len());
    }
    assert!(
        start.elapsed().as_secs() < 30,
        "codec fuzz exceeded its 30 s budget: {:?}",
        start.elapsed()
    );
}

/// Per-scale event density decreases monotonically in the threshold factor
/// (Spearman rank correlation <= -0.95).
#[test]
fn density_threshold_spearman() {
    let x = synth(7, 2, 100.0);
    let ks: Vec<f64> = (0..10).map(|i| 0.6 + 0.2 * i as f64).collect();
    let mut rho_slow = Vec::new();
    let mut rho_fast = Vec::new();
    for &k in &ks {
        let cfg = EncoderConfig {
            k_slow: k,
            k_fast: k * 0.5,
            ..EncoderConfig::default()
        };
        let d = event_density(&encode_ramsdm(&x, 100.0, &cfg).unwrap()).unwrap();
        rho_slow.push(d.slow);
        rho_fast.push(d.fast);
    }
    let s_slow = spearman(&ks, &rho_slow);
    let s_fast = spearman(&ks, &rho_fast);
    assert!(s_slow <= -0.95, "slow-scale Spearman {s_slow}");
    assert!(s_fast <= -0.95, "fast-scale Spearman {s_fast}");
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sxy += (x - ma) * (y - mb);
        sxx += (x - ma) * (x - ma);
        syy += (y - mb) * (y - mb);
    }
    sxy / (sxx * syy).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Polarity expansion splits a ternary raster losslessly: the positive
    /// and negative parts recombine to the original values.
    #[test]
    fn polarity_expansion_identity(vals in prop::collection::vec(-1i8..=1, 16)) {
        let t_b = vals.len() / 2;
        let s: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
        let e = network::polarity_expand(&s, t_b, false).unwrap();
        for t in 0..t_b {
            for row in 0..2 {
                let orig = s[row * t_b + t];
                let pos = e[2 * row * t_b + t];
                let neg = e[(2 * row + 1) * t_b + t];
                prop_assert!(pos >= 0.0 && neg >= 0.0);
                prop_assert_eq!(pos - neg, orig);
            }
        }
    }

    /// Checkpoint round-trip is bitwise for arbitrary seeds.
    #[test]
    fn checkpoint_roundtrip_fuzz(seed in 0u64..1000) {
        let mut cfg = ModelConfig::desk();
        cfg.t_b = 40;
        let params = network::init_params(&cfg, seed).unwrap();
        let bytes = network::encode_nckp(&params, &cfg).unwrap();
        let (back, cfg2) = network::decode_nckp(&bytes).unwrap();
        prop_assert_eq!(cfg2.t_b, cfg.t_b);
        for ((n1, t1), (_, t2)) in params.named().iter().zip(back.named().iter()) {
            prop_assert_eq!(&t1.data, &t2.data, "tensor {} differs", n1);
        }
    }

    /// NSIG survives a save/load cycle bit-exactly.
    #[test]
    fn nsig_roundtrip_fuzz(seed in 0u64..200) {
        let x = synth(seed, 1, 50.0);
        let rec = signal_io::Recording {
            samples: x,
            fs: 50.0,
            channel: "c".into(),
            subject_id: format!("s{seed}"),
            session_id: String::new(),
            start_offset: None,
        };
        let bytes = signal_io::encode_nsig(&rec).unwrap();
        let back = signal_io::decode_nsig(&bytes).unwrap();
        // samples are stored in binary32
        let expect: Vec<f64> = rec.samples.iter().map(|&v| (v as f32) as f64).collect();
        prop_assert_eq!(back.samples, expect);
        prop_assert_eq!(back.subject_id, rec.subject_id);
    }
}

/// Events carry the threshold in force when they fired; replay therefore
/// works even though thresholds vary over time.
#[test]
fn event_steps_match_thresholds() {
    let x = synth(3, 1, 100.0);
    let stream = encode_ramsdm(&x, 100.0, &EncoderConfig::default()).unwrap();
    for ev in stream.slow_events.iter().chain(&stream.fast_events) {
        assert!(ev.step_size > 0.0);
        assert!(ev.polarity == 1 || ev.polarity == -1);
        assert!(ev.sample_index < stream.length);
    }
    // densities are sane on a live signal
    let d = encoder::event_density(&stream).unwrap();
    assert!(d.combined > 0.0 && d.combined < 1.0);
}
