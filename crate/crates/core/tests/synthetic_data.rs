use std::fs;

use ddtr_core::data::{
    generate, generate_one, read_dataset, read_predictions, resize, write_dataset, write_predictions, DataError,
    DetectionRecord, PredictionRecord, ANNOTATIONS_FILE,
};
use ddtr_core::metrics::mean_sd;
use ddtr_core::{BoundingBox, DatasetSpec};

fn spec() -> DatasetSpec {
    DatasetSpec::default()
}

#[test]
fn same_seed_same_bytes() {
    let a = generate(&spec(), 50).unwrap();
    let b = generate(&spec(), 50).unwrap();
    assert_eq!(a, b);
    let other = DatasetSpec { seed: 1, ..spec() };
    assert_ne!(a, generate(&other, 50).unwrap());
    // images are independent of how many others are generated with them
    assert_eq!(generate_one(&spec(), 17).unwrap(), a[17]);
}

#[test]
fn empty_fraction_within_three_sigma() {
    let s = DatasetSpec { empty_fraction: 0.5, ..spec() };
    let empty = generate(&s, 1000).unwrap().iter().filter(|i| i.objects.is_empty()).count();
    assert!((450..=550).contains(&empty), "{empty}");
}

#[test]
fn size_sd_and_object_count_track_the_spec() {
    let s = DatasetSpec { size_sd: 0.001, ..spec() };
    let images = generate(&s, 1000).unwrap();
    let sizes: Vec<f64> = images.iter().flat_map(|i| i.annotations()).map(|a| a.bbox.w * a.bbox.h).collect();
    let (mean, sd) = mean_sd(&sizes);
    assert!((sd - 0.001).abs() < 0.3 * 0.001, "size sd {sd}");
    assert!((mean - 0.01).abs() < 3.0 * 0.001 / (sizes.len() as f64).sqrt() + 1e-4, "size mean {mean}");

    let non_empty: Vec<usize> = images.iter().map(|i| i.objects.len()).filter(|&n| n > 0).collect();
    let per_image = non_empty.iter().sum::<usize>() as f64 / non_empty.len() as f64;
    // 1 + Poisson(0.15): SD ≈ 0.39 per image, so the mean is good to ±0.05
    assert!((per_image - 1.15).abs() < 0.05, "{per_image}");
}

#[test]
fn boxes_lie_inside_and_contain_their_peak() {
    let s = DatasetSpec { noise: 0.0, ..spec() };
    let mut checked = 0;
    for img in generate(&s, 300).unwrap() {
        for a in img.annotations() {
            let [x0, y0, x1, y1] = a.bbox.corners();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0);
            assert!(a.bbox.w > 0.0 && a.bbox.h > 0.0);
            assert!((1..=2).contains(&a.class));
        }
        if let [only] = img.annotations()[..] {
            let (i, j) = (0..img.height * img.width)
                .map(|k| (k / img.width, k % img.width))
                .max_by_key(|&(i, j)| img.pixels[i * img.width + j])
                .unwrap();
            let (px, py) = ((j as f64 + 0.5) / img.width as f64, (i as f64 + 0.5) / img.height as f64);
            let half_pixel = 0.5 / img.width as f64;
            let grown = BoundingBox::new(
                only.bbox.cx,
                only.bbox.cy,
                only.bbox.w + 2.0 * half_pixel,
                only.bbox.h + 2.0 * half_pixel,
            );
            assert!(grown.contains_point(px, py), "{}: peak ({px}, {py}) outside {:?}", img.name, only.bbox);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn pixels_are_in_range_and_objects_are_visible() {
    let images = generate(&spec(), 200).unwrap();
    for img in &images {
        assert_eq!(img.pixels.len(), img.height * img.width);
        let t = img.to_tensor::<f64>();
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    // An object's centre is brighter than the image median.
    let mut brighter = 0;
    let mut total = 0;
    for img in &images {
        let mut sorted = img.pixels.clone();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2];
        for a in img.annotations() {
            let i = (a.bbox.cy * img.height as f64) as usize;
            let j = (a.bbox.cx * img.width as f64) as usize;
            total += 1;
            if img.pixels[i * img.width + j] > median {
                brighter += 1;
            }
        }
    }
    assert!(brighter as f64 > 0.95 * total as f64, "{brighter}/{total}");
}

#[test]
fn single_class_spec_only_emits_class_one() {
    let s = DatasetSpec { num_classes: 1, ..spec() };
    assert!(generate(&s, 100).unwrap().iter().flat_map(|i| i.annotations()).all(|a| a.class == 1));
}

#[test]
fn oversized_objects_and_bad_specs_are_rejected() {
    let s = DatasetSpec { size_mean: 1.5, size_sd: 0.0, empty_fraction: 0.0, ..spec() };
    assert!(matches!(generate(&s, 1), Err(DataError::ObjectTooLarge { .. })));
    for bad in [
        DatasetSpec { empty_fraction: 1.5, ..spec() },
        DatasetSpec { num_classes: 3, ..spec() },
        DatasetSpec { objects_mean: 0.5, ..spec() },
        DatasetSpec { noise: -1.0, ..spec() },
    ] {
        assert!(matches!(generate(&bad, 1), Err(DataError::Spec(_))));
    }
}

#[test]
fn spec_json_rejects_unknown_fields() {
    let s: DatasetSpec = serde_json::from_str(r#"{"contrast": 0.3}"#).unwrap();
    assert_eq!(s.contrast, 0.3);
    assert_eq!(s.height, 64);
    assert!(serde_json::from_str::<DatasetSpec>(r#"{"contrats": 0.3}"#).is_err());
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let images = generate(&spec(), 40).unwrap();
    write_dataset(&images, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), images);
}

#[test]
fn empty_directory_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_dataset(dir.path()).unwrap().is_empty());
    assert!(read_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn read_errors_name_the_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let images = generate(&spec(), 3).unwrap();
    write_dataset(&images, dir.path()).unwrap();

    fs::remove_file(dir.path().join(&images[1].name)).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&format!("{ANNOTATIONS_FILE}:2")) && err.contains("does not exist"), "{err}");

    write_dataset(&images, dir.path()).unwrap();
    let ann = dir.path().join(ANNOTATIONS_FILE);
    let mut text = fs::read_to_string(&ann).unwrap();
    text.push_str("{\"image\": \"img_000000.pgm\", \"objects\": [{\"class\": 1}]}\n");
    fs::write(&ann, text).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&format!("{ANNOTATIONS_FILE}:4")), "{err}");

    write_dataset(&images, dir.path()).unwrap();
    let pgm = dir.path().join(&images[0].name);
    let mut bytes = fs::read(&pgm).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(&pgm, bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, DataError::Image { offset: 13, .. }), "{err}");
    assert!(err.to_string().contains("img_000000.pgm"));
}

#[test]
fn resize_examples() {
    let img = generate_one(&spec(), 3).unwrap();
    assert_eq!(resize(&img, 1.0).unwrap(), img);
    assert!(matches!(resize(&img, 0.5), Err(DataError::TooSmall { oh: 32, .. })));

    let big = DatasetSpec { height: 256, width: 256, ..spec() };
    let img = (0..20).map(|i| generate_one(&big, i).unwrap()).find(|i| !i.objects.is_empty()).unwrap();
    for scale in [0.25, 0.5, 0.75] {
        let r = resize(&img, scale).unwrap();
        let side = (256.0 * scale) as usize;
        assert_eq!((r.height, r.width), (side, side));
        assert_eq!(r.pixels.len(), side * side);
        assert_eq!(r.objects, img.objects);
    }
}

#[test]
fn predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let recs = vec![
        PredictionRecord {
            image: "img_000000.pgm".into(),
            detections: vec![DetectionRecord {
                class: 1,
                bbox: BoundingBox::new(0.1, 0.2, 0.3, 0.4),
                score: 0.123456789,
            }],
        },
        PredictionRecord { image: "img_000001.pgm".into(), detections: vec![] },
    ];
    write_predictions(&recs, &path).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), recs);
    let line = fs::read_to_string(&path).unwrap();
    assert!(line.starts_with(
        r#"{"image":"img_000000.pgm","detections":[{"class":1,"box":[0.1,0.2,0.3,0.4],"score":0.123456789}]}"#
    ));
}
