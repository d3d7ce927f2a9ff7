mod common;

use std::io::Write;
use std::path::PathBuf;

use common::rng;
use rand::Rng;
use spectral_forecaster::data::{
    exclude_channels, load_csv, make_windows, synth_three_sine, window_count, ChannelRef,
    NormStats, RawSeries, SineComponent, SplitSpec, SyntheticSpec,
};
use spectral_forecaster::numeric::dft;
use spectral_forecaster::{Error, ErrorKind};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn ramp(steps: usize, channels: usize) -> RawSeries {
    let names = (0..channels).map(|d| format!("c{d}")).collect();
    let values = (0..steps * channels)
        .map(|i| {
            ((i / channels) as f64 * 0.1 + (i % channels) as f64).sin() * (1 + i % channels) as f64
        })
        .collect();
    RawSeries::new(names, values).unwrap()
}

#[test]
fn loads_small_fixture() {
    let rs = load_csv(&fixture("two_channels.csv")).unwrap();
    assert_eq!(rs.shape(), (3, 2));
    assert_eq!(rs.channels, ["a", "b"]);
    assert_eq!(rs.channel(1), [2.0, -4.0, 6.25]);
}

#[test]
fn ett_style_header_has_seven_channels() {
    let rs = load_csv(&fixture("ett_head.csv")).unwrap();
    assert_eq!(rs.channel_count(), 7);
    assert_eq!(rs.channels.last().unwrap(), "OT");
}

#[test]
fn ragged_row_reports_its_row() {
    match load_csv(&fixture("ragged.csv")) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn bad_cell_reports_row_and_column() {
    match load_csv(&fixture("bad_cell.csv")) {
        Err(Error::Parse {
            row,
            column,
            message,
        }) => {
            assert_eq!((row, column), (3, 3));
            assert!(message.contains("x7"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    match load_csv(&fixture("missing_cell.csv")) {
        Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_csv(&fixture("does_not_exist.csv")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.kind(), ErrorKind::Data);
}

#[test]
fn exclusion_by_index_and_name() {
    let rs = load_csv(&fixture("ett_head.csv")).unwrap();
    let out = exclude_channels(&rs, &[ChannelRef::Index(0)]).unwrap();
    assert_eq!(out.channel_count(), 6);
    assert_eq!(out.channels[0], "HULL");
    assert_eq!(out.channel(0), rs.channel(1));
    let same = exclude_channels(&rs, &[]).unwrap();
    assert_eq!(same, rs);
    let named = exclude_channels(&rs, &[ChannelRef::Name("OT".into())]).unwrap();
    assert!(!named.channels.contains(&"OT".to_string()));
    assert!(exclude_channels(&rs, &[ChannelRef::Name("nope".into())]).is_err());
    assert!(exclude_channels(&rs, &[ChannelRef::Index(7)]).is_err());
}

#[test]
fn remove_channel_840_of_862() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traffic.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    let header: Vec<String> = std::iter::once("date".to_string())
        .chain((0..861).map(|d| d.to_string()))
        .chain(std::iter::once("OT".to_string()))
        .collect();
    writeln!(f, "{}", header.join(",")).unwrap();
    for t in 0..3 {
        let row: Vec<String> = std::iter::once(format!("t{t}"))
            .chain((0..862).map(|d| format!("{}", d * 10 + t)))
            .collect();
        writeln!(f, "{}", row.join(",")).unwrap();
    }
    drop(f);
    let rs = load_csv(&path).unwrap();
    assert_eq!(rs.channel_count(), 862);
    let out = exclude_channels(&rs, &[ChannelRef::Index(840)]).unwrap();
    assert_eq!(out.channel_count(), 861);
    assert_eq!(out.channel(840), rs.channel(841));
    assert_eq!(out.channel(839), rs.channel(839));
}

#[test]
fn window_counts_follow_formula() {
    assert_eq!(window_count(300, 96, 96), 109);
    assert_eq!(window_count(191, 96, 96), 0);
    let rs = ramp(1000, 2);
    let split = SplitSpec::Indices {
        train_end: 300,
        val_end: 600,
    };
    let s = make_windows(&rs, &split, 96, 96).unwrap();
    assert_eq!(s.train.len(), 109);
    assert_eq!(s.val.len(), 109);
    assert_eq!(s.test.len(), 400 - 192 + 1);
}

#[test]
fn short_segment_error_names_it() {
    let rs = ramp(700, 1);
    let split = SplitSpec::Indices {
        train_end: 400,
        val_end: 591,
    };
    let msg = make_windows(&rs, &split, 96, 96).unwrap_err().to_string();
    assert!(msg.contains("validation"), "{msg}");
    assert!(msg.contains("191"), "{msg}");
}

#[test]
fn train_segment_is_standardized() {
    let rs = ramp(1000, 3);
    let s = make_windows(&rs, &SplitSpec::ett(), 24, 12).unwrap();
    let seg = s.train.segment();
    for d in 0..3 {
        let col: Vec<f64> = seg.iter().skip(d).step_by(3).copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-9, "mean {m}");
        assert!((v - 1.0).abs() < 1e-9, "var {v}");
    }
}

#[test]
fn statistics_ignore_test_values() {
    let rs = ramp(1000, 2);
    let a = make_windows(&rs, &SplitSpec::standard(), 24, 12).unwrap();
    let mut perturbed = rs.clone();
    let mut r = rng(3);
    for v in perturbed.values[1600..].iter_mut() {
        *v += r.random_range(-100.0..100.0);
    }
    let b = make_windows(&perturbed, &SplitSpec::standard(), 24, 12).unwrap();
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.train.segment(), b.train.segment());
}

#[test]
fn windows_are_contiguous_and_adjacent() {
    let names = vec!["x".to_string(), "y".to_string()];
    let values: Vec<f64> = (0..200).flat_map(|t| [t as f64, -(t as f64)]).collect();
    let rs = RawSeries::new(names, values).unwrap();
    let split = SplitSpec::Indices {
        train_end: 100,
        val_end: 150,
    };
    let s = make_windows(&rs, &split, 10, 5).unwrap();
    let stats = &s.stats;
    let w = s.test.get(3).unwrap();
    assert_eq!(w.origin, 153);
    assert_eq!(w.input.shape(), &[2, 10]);
    assert_eq!(w.target.shape(), &[2, 5]);
    let raw = |v: f64, d: usize| v * stats.std[d] + stats.mean[d];
    for (k, v) in w.input.data()[..10].iter().enumerate() {
        assert!((raw(*v, 0) - (153 + k) as f64).abs() < 1e-9);
    }
    for (k, v) in w.target.data()[..5].iter().enumerate() {
        assert!((raw(*v, 0) - (163 + k) as f64).abs() < 1e-9);
    }
    assert!((raw(w.target.data()[5], 1) + 163.0).abs() < 1e-9);
    assert!(s.test.get(s.test.len()).is_none());
}

#[test]
fn batches_stack_windows() {
    let rs = ramp(500, 3);
    let s = make_windows(&rs, &SplitSpec::standard(), 16, 4).unwrap();
    let (x, y) = s.train.batch(&[0, 5, 2]).unwrap();
    assert_eq!(x.shape(), &[3, 3, 16]);
    assert_eq!(y.shape(), &[3, 3, 4]);
    let w = s.train.get(5).unwrap();
    assert_eq!(&x.data()[48..96], w.input.data());
    assert!(s.train.batch(&[s.train.len()]).is_err());
}

#[test]
fn split_ratios() {
    assert_eq!(
        SplitSpec::standard().segments(1000).unwrap(),
        [(0, 700), (700, 800), (800, 1000)]
    );
    assert_eq!(
        SplitSpec::ett().segments(17420).unwrap(),
        [(0, 10452), (10452, 13936), (13936, 17420)]
    );
    assert!(SplitSpec::Ratios {
        train: 0.9,
        val: 0.2
    }
    .segments(100)
    .is_err());
    assert!(SplitSpec::Indices {
        train_end: 50,
        val_end: 40
    }
    .segments(100)
    .is_err());
}

#[test]
fn constant_channel_does_not_produce_nans() {
    let rs = RawSeries::new(vec!["c".into()], vec![2.0; 300]).unwrap();
    let stats = NormStats::from_rows(&rs.values, 1);
    assert_eq!(stats.std, [1.0]);
    assert!(stats.apply(&rs.values).iter().all(|v| *v == 0.0));
}

#[test]
fn zero_amplitudes_give_zero_signal() {
    let mut spec = SyntheticSpec::default();
    spec.components.iter_mut().for_each(|c| c.amplitude = 0.0);
    let rs = synth_three_sine(&spec).unwrap();
    assert!(rs.values.iter().all(|v| *v == 0.0));
}

#[test]
fn single_integer_frequency_fills_one_bin() {
    let spec = SyntheticSpec {
        components: vec![SineComponent {
            amplitude: 1.0,
            frequency: 5.0 / 96.0,
            phase: 0.3,
        }],
        length: 96,
        ..SyntheticSpec::default()
    };
    let rs = synth_three_sine(&spec).unwrap();
    let amps = dft(&rs.values).unwrap().amplitudes();
    let total: f64 = amps.iter().map(|a| a * a).sum();
    assert!(amps[5] * amps[5] / total > 1.0 - 1e-12);
}

#[test]
fn default_spec_has_three_dominant_peaks() {
    let rs = synth_three_sine(&SyntheticSpec::default()).unwrap();
    assert_eq!(rs.steps(), 2000);
    let amps = dft(&rs.values[..96]).unwrap().amplitudes();
    let peak = amps.iter().cloned().fold(0.0, f64::max);
    let peaks: Vec<usize> = (0..amps.len()).filter(|&k| amps[k] > 0.1 * peak).collect();
    assert_eq!(peaks, [2, 10, 30]);
}

#[test]
fn synthetic_validation() {
    let mut spec = SyntheticSpec::default();
    spec.components[2].frequency = 0.5;
    assert!(synth_three_sine(&spec).is_err());
    let mut spec = SyntheticSpec::default();
    spec.components.swap(0, 1);
    assert!(synth_three_sine(&spec).is_err());
}

#[test]
fn synthetic_is_deterministic_and_seeded() {
    let spec = SyntheticSpec {
        noise: 0.1,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let a = synth_three_sine(&spec).unwrap();
    let b = synth_three_sine(&spec).unwrap();
    assert_eq!(a, b);
    let c = synth_three_sine(&SyntheticSpec { seed: 5, ..spec }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn synthetic_spec_json() {
    let json = r#"{"components":[{"amplitude":1.0,"frequency":0.02},{"amplitude":0.5,"frequency":0.2}],"length":500}"#;
    let spec = SyntheticSpec::from_json(json).unwrap();
    assert_eq!(spec.components.len(), 2);
    assert_eq!(spec.noise, 0.0);
    assert_eq!(spec.length, 500);
    assert!(SyntheticSpec::from_json(r#"{"length": "x"}"#).is_err());
}
