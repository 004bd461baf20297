use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;
use spmkd::error::Error;
use spmkd::generator::{generate_sample, generate_with_posture, render, GeneratorConfig, Kernel, SkeletonPose, JOINT_NAMES};
use spmkd::io::{
    decode_meta, decode_png16, encode_meta, encode_png16, export_png, generate_dataset, load_png16, load_sample,
    meta_path, save_sample, Dataset, Palette, Panel, Split, FULL_SCALE, MANIFEST,
};
use spmkd_core::model::fnv1a;
use spmkd_core::{Posture, PressureMap};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn pil_authored_fixture_decodes_to_known_values() {
    let map = load_png16(&fixture("fixture_2x2.png")).unwrap();
    assert_eq!((map.height, map.width), (2, 2));
    let want = [0.0, 2.0, 32768.0 / 65535.0 * 2.0, 1000.0 / 65535.0 * 2.0];
    for (got, want) in map.values.iter().zip(want) {
        assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn single_kernel_peaks_at_its_centre() {
    let k = Kernel::isotropic([20.5, 11.5], 3.0, 50.0);
    let v = render(32, &[k]);
    let argmax = v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!((argmax / 32, argmax % 32), (11, 20));
    assert!((v.iter().sum::<f64>() - 50.0).abs() < 0.25);
    // truncated: zero far away
    assert_eq!(v[0], 0.0);
}

#[test]
fn degenerate_skeleton_is_one_blob() {
    // all joints coincide: every kernel is centred on the same point
    let cfg = GeneratorConfig { size: 64, ..GeneratorConfig::default() };
    let pose = SkeletonPose { joints: [[0.5, 0.5]; 14], posture: Posture::Supine };
    let v = render(64, &spmkd::generator::body_kernels(&pose, &cfg, 1.0));
    let argmax = v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    // centre (32, 32) in cell units sits on the corner of four cells
    assert!([(31, 31), (31, 32), (32, 31), (32, 32)].contains(&(argmax / 64, argmax % 64)));
    let peak = v[argmax];
    for (i, &x) in v.iter().enumerate() {
        let (y, xx) = ((i / 64) as f64 + 0.5 - 32.0, (i % 64) as f64 + 0.5 - 32.0);
        // radially non-increasing away from the joint
        if y * y + xx * xx > 4.0 {
            assert!(x < peak);
        }
    }
}

#[test]
fn mass_is_conserved_across_poses() {
    let cfg = GeneratorConfig::default();
    for seed in 0..60 {
        let s = generate_sample(seed, &cfg).unwrap();
        let total = s.map.total();
        let rel = (total - cfg.body_weight).abs() / cfg.body_weight;
        assert!(rel < 0.05, "seed {seed}: total {total}");
    }
}

#[test]
fn generated_maps_are_valid_and_fit_the_png_scale() {
    let cfg = GeneratorConfig::default();
    let mut counts = [0; 3];
    for seed in 0..150 {
        let s = generate_sample(seed, &cfg).unwrap();
        let pose = s.pose.unwrap();
        pose.validate().unwrap();
        counts[pose.posture.index()] += 1;
        assert!(s.map.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((s.map.max() as f64) < FULL_SCALE * 0.9, "seed {seed}: peak {}", s.map.max());
        assert!(s.map.values.contains(&0.0), "truncated kernels leave background at zero");
    }
    assert!(counts.iter().all(|&c| c > 30), "{counts:?}");
}

#[test]
fn generator_is_deterministic_and_seeds_differ() {
    let cfg = GeneratorConfig::default();
    let a = generate_sample(7, &cfg).unwrap();
    assert_eq!(a, generate_sample(7, &cfg).unwrap());
    let hashes: HashSet<u64> = (0..100)
        .map(|s| {
            let m = generate_sample(s, &cfg).unwrap().map;
            fnv1a(&m.values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        })
        .collect();
    assert_eq!(hashes.len(), 100);
}

#[test]
fn noise_is_clipped_at_zero() {
    let cfg = GeneratorConfig { noise_sigma: 0.05, ..GeneratorConfig::default() };
    let s = generate_with_posture(3, Posture::LeftLateral, &cfg).unwrap();
    assert!(s.map.values.iter().all(|&v| v >= 0.0));
    assert!(s.map.values.iter().filter(|&&v| v > 0.0).count() > s.map.values.len() / 3);
}

#[test]
fn sample_roundtrip_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_sample(11, &GeneratorConfig::default()).unwrap();
    let p = dir.path().join("a.png");
    save_sample(&s, &p).unwrap();
    let back = load_sample(&p).unwrap();
    assert_eq!(back.pose, s.pose);
    assert_eq!(back.seed, s.seed);
    let q = FULL_SCALE / 65535.0;
    for (a, b) in s.map.values.iter().zip(&back.map.values) {
        assert!(((a - b).abs() as f64) <= q / 2.0 + 1e-7);
    }
    // re-encoding the decoded map is a fixed point
    assert_eq!(encode_png16(&back.map).unwrap(), std::fs::read(&p).unwrap());
}

#[test]
fn missing_sidecar_gives_empty_pose() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_sample(1, &GeneratorConfig::default()).unwrap();
    let p = dir.path().join("b.png");
    save_sample(&s, &p).unwrap();
    std::fs::remove_file(meta_path(&p)).unwrap();
    let back = load_sample(&p).unwrap();
    assert!(back.pose.is_none() && back.seed.is_none());
    assert_eq!(back.map.height, 256);
}

fn parse_offset<T: std::fmt::Debug>(r: spmkd::Result<T>) -> u64 {
    match r {
        Err(Error::Parse { offset, .. }) => offset,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn corrupt_png_reports_offsets() {
    let map = PressureMap::new(4, 4, vec![0.5; 16]).unwrap();
    let good = encode_png16(&map).unwrap();
    let p = Path::new("x.png");
    assert_eq!(parse_offset(decode_png16(p, b"not a png at all")), 0);
    // truncation inside the IDAT chunk
    let idat = good.windows(4).position(|w| w == b"IDAT").unwrap() - 4;
    assert_eq!(parse_offset(decode_png16(p, &good[..idat + 10])), idat as u64);
    // flipped payload byte: CRC of IDAT fails, located at its CRC field
    let mut bad = good.clone();
    bad[idat + 9] ^= 0xff;
    let len = u32::from_be_bytes(good[idat..idat + 4].try_into().unwrap()) as u64;
    assert_eq!(parse_offset(decode_png16(p, &bad)), idat as u64 + 8 + len);
    let mut trailing = good.clone();
    trailing.extend_from_slice(b"junk");
    assert_eq!(parse_offset(decode_png16(p, &trailing)), good.len() as u64);
}

#[test]
fn eight_bit_png_is_rejected_at_the_depth_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g8.png");
    export_png(&Panel { height: 2, width: 2, values: &[0.0, 1.0, 0.5, 0.2] }, &p, Palette::Intensity).unwrap();
    assert_eq!(parse_offset(load_png16(&p)), 24);
}

#[test]
fn corrupt_sidecar_reports_line_offset() {
    let pose = SkeletonPose::template(Posture::Supine);
    let text = encode_meta(&pose, 5);
    let p = Path::new("s.meta");
    assert_eq!(decode_meta(p, &text).unwrap(), (pose, 5));
    let bad = text.replace("posture=supine", "posture=prone");
    let at = bad.find("posture=").unwrap() as u64;
    assert_eq!(parse_offset(decode_meta(p, &bad)), at);
    let missing = text.replace(&format!("{}=", JOINT_NAMES[13]), "#=");
    let at = missing.find("#=").unwrap() as u64;
    assert_eq!(parse_offset(decode_meta(p, &missing)), at);
    assert_eq!(parse_offset(decode_meta(p, "garbage\n")), 0);
}

#[test]
fn dataset_directory_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), 6, 3, &GeneratorConfig::default()).unwrap();
    assert_eq!(m.splits.iter().filter(|s| **s == Split::Val).count(), 1);
    let d = Dataset::open(dir.path()).unwrap();
    assert_eq!(d.samples.len(), 6);
    assert_eq!(d.split(Split::Train).count(), 5);
    assert!(d.samples.iter().all(|s| s.pose.is_some()));
    std::fs::remove_file(dir.path().join("samples/000002.png")).unwrap();
    assert!(Dataset::open(dir.path()).is_err());
    std::fs::write(dir.path().join(MANIFEST), "format=spmkd-dataset/1\ncount=1\n").unwrap();
    assert!(matches!(Dataset::open(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn palette_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, Vec<f32>); 3] = [
        ("constant", vec![0.7; 16]),
        ("checker", (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect()),
        ("ramp", (0..16).map(|i| i as f32 / 15.0).collect()),
    ];
    for (name, values) in cases {
        for palette in [Palette::Binary, Palette::Intensity] {
            let p = dir.path().join(format!("{name}-{palette:?}.png"));
            export_png(&Panel { height: 4, width: 4, values: &values }, &p, palette).unwrap();
            let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&p).unwrap()));
            let mut r = dec.read_info().unwrap();
            let mut buf = vec![0; 16];
            r.next_frame(&mut buf).unwrap();
            assert_eq!(buf, palette.apply(&values).unwrap());
            match (name, palette) {
                ("constant", _) => assert!(buf.iter().all(|&b| b == 255)),
                ("checker", _) => assert!(buf.iter().zip(&values).all(|(&b, &v)| b == if v > 0.0 { 255 } else { 0 })),
                ("ramp", Palette::Intensity) => assert!(buf.windows(2).all(|w| w[0] < w[1]) && buf[15] == 255),
                ("ramp", Palette::Binary) => assert!(buf[0] == 0 && buf[1..].iter().all(|&b| b == 255)),
                _ => unreachable!(),
            }
        }
    }
    assert!(export_png(&Panel { height: 1, width: 1, values: &[1.0] }, Path::new("/nonexistent/dir/x.png"), Palette::Binary).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn png_roundtrip_is_within_one_quantum(vals in prop::collection::vec(0.0f32..2.0, 12)) {
        let map = PressureMap::new(3, 4, vals.clone()).unwrap();
        let back = decode_png16(Path::new("p"), &encode_png16(&map).unwrap()).unwrap();
        for (a, b) in vals.iter().zip(&back.values) {
            prop_assert!(((a - b).abs() as f64) <= FULL_SCALE / 65535.0);
        }
    }

    #[test]
    fn generated_poses_stay_in_band(seed in any::<u64>()) {
        let s = generate_sample(seed, &GeneratorConfig::shifted()).unwrap();
        prop_assert!(s.pose.unwrap().validate().is_ok());
    }
}
