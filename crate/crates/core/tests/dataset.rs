use std::fs;

use mdqf::coco::{annotation_file, export_coco, import_coco, import_single, CocoFile, PairEntry, PAIRS_FILE};
use mdqf::datagen::{degrade_contrast, generate_dataset, SceneSpec, Visibility};
use mdqf::{Error, Modality};

fn spec() -> SceneSpec {
    SceneSpec { seed: 31, ..SceneSpec::default() }
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&spec(), 6, 100).unwrap();
    export_coco(&samples, dir.path()).unwrap();
    let back = import_coco(dir.path()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in back.iter().zip(&samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.tir, b.tir);
        assert_eq!(a.annotations.len(), b.annotations.len());
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!((x.class_id, x.visibility), (y.class_id, y.visibility));
            let (p, q) = (x.bbox.to_array(), y.bbox.to_array());
            assert!(p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }
}

#[test]
fn annotation_files_follow_the_coco_layout() {
    let dir = tempfile::tempdir().unwrap();
    export_coco(&generate_dataset(&spec(), 3, 0).unwrap(), dir.path()).unwrap();
    for m in [Modality::Rgb, Modality::Tir] {
        let raw: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(annotation_file(m))).unwrap()).unwrap();
        for key in ["images", "annotations", "categories"] {
            assert!(raw[key].is_array(), "{key}");
        }
        for a in raw["annotations"].as_array().unwrap() {
            for key in ["id", "image_id", "category_id", "bbox", "area", "iscrowd"] {
                assert!(!a[key].is_null(), "{key}");
            }
            assert!(a["category_id"].as_u64().unwrap() >= 1);
        }
        let file: CocoFile = serde_json::from_value(raw).unwrap();
        assert_eq!(file.categories.len(), 3);
        assert!(file.images.iter().all(|i| i.file_name.starts_with(m.as_str())));
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    export_coco(&generate_dataset(&spec(), 3, 0).unwrap(), a.path()).unwrap();
    export_coco(&generate_dataset(&spec(), 3, 0).unwrap(), b.path()).unwrap();
    for f in [PAIRS_FILE.to_string(), annotation_file(Modality::Rgb), "tir/000001.png".into()] {
        assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn single_modality_import_filters_invisible_labels() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&spec(), 8, 0).unwrap();
    export_coco(&samples, dir.path()).unwrap();
    let all = import_single(dir.path(), Modality::Tir, false).unwrap();
    let visible = import_single(dir.path(), Modality::Tir, true).unwrap();
    for ((a, v), s) in all.iter().zip(&visible).zip(&samples) {
        assert_eq!(a.annotations.len(), s.annotations.len());
        assert!(v.annotations.iter().all(|x| x.visibility != Visibility::RgbOnly));
        assert_eq!(a.image.channels(), 1);
    }
}

#[test]
fn dangling_pair_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    export_coco(&generate_dataset(&spec(), 2, 0).unwrap(), dir.path()).unwrap();
    let path = dir.path().join(PAIRS_FILE);
    let mut pairs: Vec<PairEntry> = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    pairs.push(PairEntry { image_id: 77, rgb_file: "rgb/000077.png".into(), tir_file: "tir/000077.png".into() });
    fs::write(&path, serde_json::to_string(&pairs).unwrap()).unwrap();
    assert!(matches!(import_coco(dir.path()), Err(Error::DanglingPair(77))));

    // a listed pair whose image file is gone
    pairs.pop();
    fs::write(&path, serde_json::to_string(&pairs).unwrap()).unwrap();
    fs::remove_file(dir.path().join("tir/000001.png")).unwrap();
    assert!(matches!(import_coco(dir.path()), Err(Error::DanglingPair(1))));
    assert!(matches!(import_single(dir.path(), Modality::Tir, true), Err(Error::MissingImage(_))));
}

#[test]
fn malformed_json_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    export_coco(&generate_dataset(&spec(), 1, 0).unwrap(), dir.path()).unwrap();
    fs::write(dir.path().join(annotation_file(Modality::Rgb)), "{ not json").unwrap();
    let err = import_single(dir.path(), Modality::Rgb, false).unwrap_err();
    assert!(matches!(err, Error::MalformedJson { .. }));
    assert!(err.to_string().contains("annotations_rgb.json"));
}

#[test]
fn zero_contrast_flattens_to_the_mean() {
    let s = &generate_dataset(&spec(), 1, 0).unwrap()[0];
    let flat = degrade_contrast(&s.rgb, 0.0).unwrap();
    let m = s.rgb.mean();
    assert!(flat.data.iter().all(|v| (v - m).abs() < 1e-12));
    assert!(matches!(degrade_contrast(&s.rgb, 1.5), Err(Error::ContrastFactor(_))));
}
