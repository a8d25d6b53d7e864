use std::path::PathBuf;

use proptest::prelude::*;
use tumorseg::data::manifest::split_counts;
use tumorseg::data::nifti::{encode_nifti1, parse_nifti1, read_nifti1, write_nifti1, OFF_DATATYPE, OFF_MAGIC, OFF_SCL_SLOPE};
use tumorseg::data::phantom::cohort_spec;
use tumorseg::data::storage::{read_nifti_subject, read_volume, write_volume};
use tumorseg::data::{
    extract_slices, generate_phantom, split_dataset, DatasetManifest, ManifestEntry, PhantomSpec, SlicePolicy, Split, Volume,
};
use tumorseg::Modality;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn headers() -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(fixture("headers.json")).unwrap()).unwrap()
}

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec { grid: [6, 24, 24], edema_radius: [5.0, 8.0], edema_depth: [2.0, 3.0], seed, ..PhantomSpec::default() }
}

fn manifest(n: usize) -> DatasetManifest {
    let entries = (0..n)
        .map(|i| ManifestEntry { subject: format!("s{i}"), path: format!("s{i}"), split: Split::Train })
        .collect();
    DatasetManifest { split_seed: 0, entries }
}

#[test]
fn golden_float_header() {
    let img = read_nifti1(&fixture("golden_f32.nii")).unwrap();
    let dump = &headers()["golden_f32.nii"];
    let dim: Vec<i64> = img.header.dim.iter().map(|&d| d as i64).collect();
    assert_eq!(serde_json::json!(dim), dump["dim"]);
    assert_eq!(img.header.datatype as i64, dump["datatype"].as_i64().unwrap());
    assert_eq!(img.header.bitpix as i64, dump["bitpix"].as_i64().unwrap());
    assert_eq!(img.header.vox_offset as f64, dump["vox_offset"].as_f64().unwrap());
    assert!(img.header.little_endian);
    assert_eq!(img.shape(), [8, 16, 16]);
    assert_eq!(img.data.len(), 8 * 16 * 16);
    let first: Vec<f64> = img.data[..4].iter().map(|&v| v as f64).collect();
    assert_eq!(serde_json::json!(first), dump["first"]);
    assert_eq!(*img.data.last().unwrap() as f64, dump["last"].as_f64().unwrap());
    // [z, y, x] = [3, 5, 7]
    assert_eq!(img.data[(3 * 16 + 5) * 16 + 7], (3000.0 + 5.0 * 16.0 + 7.0) / 4.0);
}

#[test]
fn golden_big_endian_scaled_int16() {
    let img = read_nifti1(&fixture("golden_i16_be.nii")).unwrap();
    let dump = &headers()["golden_i16_be.nii"];
    assert!(!img.header.little_endian);
    assert_eq!(img.shape(), [2, 3, 4]);
    assert_eq!(img.header.scl_slope, 2.0);
    let want: Vec<f32> = dump["scaled"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() as f32).collect();
    assert_eq!(img.data, want);
}

#[test]
fn zero_slope_passes_raw_values() {
    let mut bytes = std::fs::read(fixture("golden_i16_be.nii")).unwrap();
    bytes[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&0f32.to_be_bytes());
    let img = parse_nifti1(&bytes).unwrap();
    assert_eq!(&img.data[..5], &[0.0, 1.0, 2.0, 3.0, -10.0]);
}

#[test]
fn parse_errors_name_the_offset() {
    let good = std::fs::read(fixture("golden_f32.nii")).unwrap();
    let offset = |bytes: &[u8]| match parse_nifti1(bytes) {
        Err(tumorseg::Error::Parse { offset, .. }) => offset,
        other => panic!("expected a parse error, got {other:?}"),
    };

    let mut bad = good.clone();
    bad[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"abcd");
    assert_eq!(offset(&bad), 344);

    let mut paired = good.clone();
    paired[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"ni1\0");
    assert_eq!(offset(&paired), 344);

    let mut dtype = good.clone();
    dtype[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&64i16.to_le_bytes());
    assert_eq!(offset(&dtype), OFF_DATATYPE);

    assert_eq!(offset(&good[..good.len() - 3]), good.len() - 3);
    assert_eq!(offset(&good[..100]), 100);

    let mut size = good;
    size[0] = 0;
    assert_eq!(offset(&size), 0);
}

#[test]
fn nifti_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.37 - 4.0).collect();
    let path = dir.path().join("x.nii");
    write_nifti1(&path, [3, 4, 5], &data).unwrap();
    let img = read_nifti1(&path).unwrap();
    assert_eq!(img.shape(), [3, 4, 5]);
    assert_eq!(img.data, data);
    assert!(encode_nifti1([2, 2, 2], &data).is_err());
}

#[test]
fn nifti_subject_is_normalised() {
    let dir = tempfile::tempdir().unwrap();
    let vol = generate_phantom(&small_spec(3), "case").unwrap();
    let names = [(Modality::T1, "t1"), (Modality::T1Gd, "t1ce"), (Modality::T2, "t2"), (Modality::Flair, "flair")];
    for (m, s) in names {
        let scaled: Vec<f32> = vol.channel(m).iter().map(|v| 100.0 * v + 7.0).collect();
        write_nifti1(&dir.path().join(format!("case_{s}.nii")), vol.shape, &scaled).unwrap();
    }
    let labels: Vec<f32> = vol.labels.iter().map(|&l| l as f32).collect();
    write_nifti1(&dir.path().join("case_seg.nii"), vol.shape, &labels).unwrap();
    let back = read_nifti_subject(dir.path(), "case").unwrap();
    assert_eq!(back.labels, vol.labels);
    let mut want = vol.clone();
    want.normalize();
    for m in Modality::ALL {
        let err = back.channel(m).iter().zip(want.channel(m)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{m}: {err}");
    }
}

#[test]
fn native_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut vol = generate_phantom(&small_spec(4), "subject_a").unwrap();
    vol.channels[0][0] = f32::from_bits(0x3f80_0001);
    vol.channels[3][5] = -0.0;
    let sub = write_volume(dir.path(), &vol).unwrap();
    let back = read_volume(&sub).unwrap();
    assert_eq!(back.subject, vol.subject);
    assert_eq!(back.labels, vol.labels);
    for m in 0..4 {
        let a: Vec<u32> = vol.channels[m].iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.channels[m].iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(sub.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["shape"], serde_json::json!([6, 24, 24]));
    assert_eq!(meta["endianness"], "little");
}

#[test]
fn truncated_native_channel_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let vol = generate_phantom(&small_spec(5), "s").unwrap();
    let sub = write_volume(dir.path(), &vol).unwrap();
    let path = sub.join("t2.raw");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_volume(&sub), Err(tumorseg::Error::Input(_))));
}

#[test]
fn split_counts_follow_the_rounding_rule() {
    assert_eq!(split_counts(10), (8, 1, 1));
    assert_eq!(split_counts(335), (268, 33, 34));
    assert_eq!(split_counts(7), (5, 0, 2));
    let m = split_dataset(&manifest(335), 42);
    assert_eq!((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)), (268, 33, 34));
    assert_eq!(split_dataset(&manifest(335), 42), m);
    assert_ne!(split_dataset(&manifest(335), 43), m);
    let names: Vec<_> = m.entries.iter().map(|e| e.subject.clone()).collect();
    assert_eq!(names, manifest(335).entries.iter().map(|e| e.subject.clone()).collect::<Vec<_>>());
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = split_dataset(&manifest(12), 1);
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    assert_eq!(Split::parse("val").unwrap(), Split::Val);
    assert!(matches!(Split::parse("dev"), Err(tumorseg::Error::Config(_))));
}

#[test]
fn phantom_is_deterministic() {
    let spec = small_spec(6);
    assert_eq!(generate_phantom(&spec, "a").unwrap(), generate_phantom(&spec, "a").unwrap());
    assert_ne!(generate_phantom(&spec, "a").unwrap(), generate_phantom(&small_spec(7), "a").unwrap());
    assert_ne!(cohort_spec(&spec, 0).seed, cohort_spec(&spec, 1).seed);
}

#[test]
fn oversized_radius_is_a_config_error() {
    let spec = PhantomSpec { edema_radius: [5.0, 40.0], ..small_spec(0) };
    assert!(matches!(generate_phantom(&spec, "x"), Err(tumorseg::Error::Config(_))));
}

#[test]
fn noise_free_phantom_is_piecewise_constant() {
    let spec = PhantomSpec { noise: 0.0, ..small_spec(8) };
    let vol = generate_phantom(&spec, "x").unwrap();
    for m in Modality::ALL {
        let c = spec.contrast[m.index()];
        let allowed = [c.outside, c.brain, c.edema, c.necrosis, c.enhancing];
        assert!(vol.channel(m).iter().all(|v| allowed.contains(v)));
    }
}

fn t1gd_separates(vol: &Volume) -> bool {
    let g = vol.channel(Modality::T1Gd);
    let (et, ncr): (Vec<f32>, Vec<f32>) = (
        vol.labels.iter().zip(g).filter(|(&l, _)| l == 4).map(|(_, &v)| v).collect(),
        vol.labels.iter().zip(g).filter(|(&l, _)| l == 1).map(|(_, &v)| v).collect(),
    );
    let lo = et.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = ncr.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    lo > hi
}

#[test]
fn only_t1gd_tells_enhancing_from_necrosis() {
    let spec = PhantomSpec { noise: 0.0, ..small_spec(9) };
    for i in 0..10 {
        let vol = generate_phantom(&cohort_spec(&spec, i), "x").unwrap();
        assert!(vol.labels.contains(&4) && vol.labels.contains(&1));
        assert!(t1gd_separates(&vol));
        for m in [Modality::T1, Modality::T2, Modality::Flair] {
            let c = spec.contrast[m.index()];
            assert_eq!(c.necrosis, c.enhancing);
        }
    }
}

#[test]
fn slice_policies() {
    let vol = generate_phantom(&small_spec(10), "x").unwrap();
    let all = extract_slices(&vol, SlicePolicy::All).unwrap();
    assert_eq!(all.len(), 6);
    assert_eq!(all[2].image.shape(), [4, 24, 24]);
    assert_eq!(all[2].image.data()[24 * 24 + 3], vol.channel(Modality::T1Gd)[2 * 576 + 3]);
    let tumor = extract_slices(&vol, SlicePolicy::TumorOnly).unwrap();
    assert_eq!(tumor.len(), all.iter().filter(|s| s.has_tumor()).count());

    let mut clean = vol.clone();
    clean.labels.iter_mut().for_each(|l| *l = 0);
    assert!(extract_slices(&clean, SlicePolicy::TumorOnly).unwrap().is_empty());
    clean.labels[0] = 3;
    assert!(matches!(extract_slices(&clean, SlicePolicy::All), Err(tumorseg::Error::Input(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn phantom_slices_nest(seed in 0u64..100_000) {
        let vol = generate_phantom(&small_spec(seed), "p").unwrap();
        for s in extract_slices(&vol, SlicePolicy::All).unwrap() {
            prop_assert!(s.masks[2].is_subset_of(&s.masks[1]) && s.masks[1].is_subset_of(&s.masks[0]));
        }
        let clean = generate_phantom(&PhantomSpec { noise: 0.0, ..small_spec(seed) }, "p").unwrap();
        prop_assert!(!clean.labels.contains(&4) || !clean.labels.contains(&1) || t1gd_separates(&clean));
    }

    #[test]
    fn splits_partition_subjects(n in 10usize..400, seed in 0u64..1000) {
        let m = split_dataset(&manifest(n), seed);
        let (tr, va, te) = split_counts(n);
        prop_assert_eq!(m.count(Split::Train), tr);
        prop_assert_eq!(m.count(Split::Val), va);
        prop_assert_eq!(m.count(Split::Test), te);
        prop_assert!((tr as f64 - 0.8 * n as f64).abs() < 1.0 && (va as f64 - 0.1 * n as f64).abs() < 1.0);
    }
}
