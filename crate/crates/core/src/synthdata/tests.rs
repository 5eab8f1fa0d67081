use super::*;

fn small(kind: DatasetKind) -> DatasetSpec {
    DatasetSpec {
        kind,
        train_per_class: 6,
        test_normal_per_class: 4,
        test_anomalous_per_class: 4,
        image_size: 16,
        defect: DefectParams {
            min_size: 3,
            max_size: 6,
            min_delta: 0.3,
            max_delta: 0.5,
            ..Default::default()
        },
        ..match kind {
            DatasetKind::Semantic => DatasetSpec::semantic(),
            DatasetKind::Mixed => DatasetSpec::mixed(),
            _ => DatasetSpec::structural(),
        }
    }
}

#[test]
fn structural_is_deterministic_and_labelled() {
    let spec = small(DatasetKind::Structural);
    let a = generate(&spec).unwrap();
    assert_eq!(a, generate(&spec).unwrap());
    assert_eq!(a.samples.len(), 4 * (6 + 4 + 4));
    for s in &a.samples {
        assert_eq!(s.image.shape(), &[3, 16, 16]);
        assert!(s
            .image
            .data()
            .iter()
            .all(|v| (0.0..=1.0).contains(v) && (v * 255.0).fract() == 0.0));
        if s.split == Split::Train {
            assert_eq!(s.label, Label::Normal);
        }
        assert_eq!(s.mask.is_some(), s.label == Label::Anomalous);
        if let Some(m) = &s.mask {
            assert!(m.sum() > 0.0);
            assert_eq!(m.shape(), &[16, 16]);
        }
    }
    let other = generate(&DatasetSpec { seed: 9, ..spec }).unwrap();
    assert_ne!(a.samples[0].image, other.samples[0].image);
}

#[test]
fn rectangle_mask_area_matches_extent() {
    let mut rng = Rng::new(3, 0);
    for _ in 0..50 {
        let mut d = draw_defect(&DefectParams::default(), 32, &mut rng);
        d.shape = DefectShape::Rectangle;
        let m = d.mask(32);
        assert_eq!(m.sum(), (d.w * d.h) as f64);
        assert!(d.x + d.w <= 32 && d.y + d.h <= 32);
        let mut e = d;
        e.shape = DefectShape::Ellipse;
        let area = e.mask(32).sum();
        assert!(area > 0.0 && area <= (d.w * d.h) as f64);
    }
}

#[test]
fn defect_changes_only_masked_pixels() {
    let spec = small(DatasetKind::Structural);
    let pat = texture_pattern(&spec, 0);
    let mut rng = Rng::new(1, 5);
    let clean = render_sample(&spec, &pat, &mut rng, false);
    let d = Defect {
        shape: DefectShape::Ellipse,
        x: 2,
        y: 3,
        w: 5,
        h: 4,
        delta: 0.4,
        style: DefectStyle::Intensity,
    };
    let mut bad = clean.clone();
    d.apply(&mut bad);
    for ch in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                let k = ch * 256 + y * 16 + x;
                if !d.contains(x, y) {
                    assert_eq!(bad.data()[k], clean.data()[k]);
                }
            }
        }
    }
    assert_ne!(bad, clean);
}

#[test]
fn degenerate_geometry_is_rejected() {
    let mut spec = small(DatasetKind::Structural);
    spec.defect.min_size = 0;
    assert!(matches!(generate(&spec), Err(Error::Data(_))));
    let mut spec = small(DatasetKind::Structural);
    spec.defect.max_size = 17;
    assert!(matches!(generate(&spec), Err(Error::Data(_))));
    let mut spec = small(DatasetKind::Semantic);
    spec.num_classes = 1;
    spec.normal_class_ids = vec![0];
    assert!(generate(&spec).is_err());
    let spec = DatasetSpec {
        normal_class_ids: vec![7],
        ..small(DatasetKind::Structural)
    };
    assert!(generate(&spec).is_err());
}

#[test]
fn semantic_with_all_normal_warns() {
    let spec = DatasetSpec {
        normal_class_ids: vec![],
        ..small(DatasetKind::Semantic)
    };
    let d = generate(&spec).unwrap();
    assert_eq!(d.warnings.len(), 1);
    assert!(d.samples.iter().all(|s| s.label == Label::Normal));
}

#[test]
fn semantic_zero_noise_classes() {
    let spec = DatasetSpec {
        num_classes: 2,
        normal_class_ids: vec![0],
        noise: 0.0,
        phase_jitter: 0.0,
        ..small(DatasetKind::Semantic)
    };
    let d = generate(&spec).unwrap();
    let of = |c: usize| {
        d.samples
            .iter()
            .filter(|s| s.class_id == c)
            .map(|s| &s.image)
            .collect::<Vec<_>>()
    };
    let (a, b) = (of(0), of(1));
    assert!(a.windows(2).all(|w| w[0] == w[1]));
    assert!(b.windows(2).all(|w| w[0] == w[1]));
    assert_ne!(a[0], b[0]);
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn semantic_classes_are_separable() {
    let spec = DatasetSpec {
        normal_class_ids: vec![],
        train_per_class: 100,
        test_normal_per_class: 0,
        ..DatasetSpec::semantic()
    };
    let d = generate(&spec).unwrap();
    let k = spec.num_classes;
    let n = d.samples[0].image.numel();
    let mut means = vec![vec![0.0; n]; k];
    for s in &d.samples {
        for (m, v) in means[s.class_id].iter_mut().zip(s.image.data()) {
            *m += v / 100.0;
        }
    }
    let intra = d
        .samples
        .iter()
        .map(|s| l2(s.image.data(), &means[s.class_id]))
        .sum::<f64>()
        / d.samples.len() as f64;
    let mut inter = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            inter += l2(&means[i], &means[j]);
        }
    }
    inter /= (k * (k - 1) / 2) as f64;
    assert!(inter >= 5.0 * intra, "inter {inter} intra {intra}");
}

#[test]
fn mixed_has_both_anomaly_kinds() {
    let d = generate(&small(DatasetKind::Mixed)).unwrap();
    let defects = d.samples.iter().filter(|s| s.mask.is_some()).count();
    let outsiders = d
        .samples
        .iter()
        .filter(|s| s.label == Label::Anomalous && s.mask.is_none())
        .count();
    assert_eq!(defects, 2 * 4);
    assert_eq!(outsiders, 2 * 4);
    assert!(d
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .all(|s| s.class_id % 2 == 0));
}

#[test]
fn splits_follow_class_membership() {
    let spec = DatasetSpec {
        num_classes: 10,
        normal_class_ids: vec![0, 2, 4, 6, 8],
        train_per_class: 2,
        test_normal_per_class: 2,
        test_anomalous_per_class: 2,
        image_size: 8,
        ..DatasetSpec::semantic()
    };
    let d = generate(&spec).unwrap();
    let r = make_splits(&d, SplitMode::MultiClass, &[0, 2, 4, 6, 8]).unwrap();
    assert_eq!(r.len(), 1);
    for &(i, l) in &r[0].test {
        assert_eq!(l == Label::Anomalous, d.samples[i].class_id % 2 == 1);
    }
    let anomalous: BTreeSet<usize> = r[0]
        .test
        .iter()
        .filter(|t| t.1.is_anomalous())
        .map(|t| d.samples[t.0].class_id)
        .collect();
    assert_eq!(anomalous, BTreeSet::from([1, 3, 5, 7, 9]));
    assert!(r[0]
        .train
        .iter()
        .all(|&i| d.samples[i].split == Split::Train));

    let single = make_splits(&d, SplitMode::SingleClass, &[0, 2, 4, 6, 8]).unwrap();
    assert_eq!(single.len(), 5);
    assert!(make_splits(&d, SplitMode::MultiClass, &[1]).is_err());
    assert!(make_splits(&d, SplitMode::MultiClass, &[11]).is_err());
    assert!(make_splits(&d, SplitMode::MultiClass, &[]).is_err());

    let s = generate(&DatasetSpec {
        num_classes: 10,
        ..small(DatasetKind::Structural)
    })
    .unwrap();
    assert_eq!(
        make_splits(&s, SplitMode::SingleClass, &(0..10).collect::<Vec<_>>())
            .unwrap()
            .len(),
        10
    );

    let all = DatasetSpec {
        normal_class_ids: vec![],
        ..small(DatasetKind::Semantic)
    };
    let d = generate(&all).unwrap();
    assert!(make_splits(&d, SplitMode::MultiClass, &[0, 1, 2, 3]).is_err());
}

#[test]
fn few_shot_counts_and_determinism() {
    let spec = DatasetSpec {
        num_classes: 3,
        ..small(DatasetKind::Structural)
    };
    let d = generate(&spec).unwrap();
    let train = d.indices(Split::Train);
    assert_eq!(few_shot_subsample(&d, &train, 6, 0).unwrap(), train);
    let four = few_shot_subsample(&d, &train, 4, 0).unwrap();
    assert_eq!(four.len(), 12);
    assert!(four.iter().all(|i| train.contains(i)));
    let one_a = few_shot_subsample(&d, &train, 1, 1).unwrap();
    assert_eq!(one_a, few_shot_subsample(&d, &train, 1, 1).unwrap());
    assert_eq!(one_a.len(), 3);
    assert!(few_shot_subsample(&d, &train, 7, 0).is_err());
    let test = d.indices(Split::Test);
    assert!(few_shot_subsample(&d, &test, 1, 0).is_err());
}

#[test]
fn dump_round_trips() {
    let d = generate(&small(DatasetKind::Mixed)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = write_dataset(&d, dir.path()).unwrap();
    assert_eq!(rows.len(), d.samples.len());
    let back = read_dataset(dir.path(), DatasetKind::Mixed).unwrap();
    assert_eq!(back.samples, d.samples);
}

#[test]
fn folder_loader_pairs_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cat = dir.path().join("widget");
    for sub in [
        "train/good",
        "test/good",
        "test/scratch",
        "ground_truth/scratch",
    ] {
        fs::create_dir_all(cat.join(sub)).unwrap();
    }
    let img = Tensor::<f64>::from_fn([3, 8, 8], |k| ((k * 7) % 256) as f64 / 255.0);
    let mut mask = Tensor::<f64>::zeros([8, 8]);
    mask.data_mut()[9] = 1.0;
    write_png(&cat.join("train/good/000.png"), &img).unwrap();
    write_png(&cat.join("test/good/000.png"), &img).unwrap();
    write_png(&cat.join("test/scratch/000.png"), &img).unwrap();
    write_png(&cat.join("test/scratch/001.png"), &img).unwrap();
    write_png(&cat.join("ground_truth/scratch/000_mask.png"), &mask).unwrap();

    let d = load_folder(dir.path(), None).unwrap();
    // manifest: (split, label, has mask)
    let want = [
        (Split::Train, Label::Normal, false),
        (Split::Test, Label::Normal, false),
        (Split::Test, Label::Anomalous, true),
        (Split::Test, Label::Anomalous, false),
    ];
    let got: Vec<_> = d
        .samples
        .iter()
        .map(|s| (s.split, s.label, s.mask.is_some()))
        .collect();
    assert_eq!(got, want);
    assert_eq!(d.samples[0].image, img);
    assert_eq!(d.samples[2].mask.as_ref().unwrap(), &mask);
    assert_eq!(d.warnings.len(), 1);
    assert_eq!(d.class_names, vec!["widget".to_string()]);

    let only_train = tempfile::tempdir().unwrap();
    fs::create_dir_all(only_train.path().join("train/good")).unwrap();
    write_png(&only_train.path().join("train/good/a.png"), &img).unwrap();
    let d = load_folder(only_train.path(), None).unwrap();
    assert!(d.indices(Split::Test).is_empty());
    assert!(load_folder(Path::new("/nonexistent/dualkd"), None).is_err());
}

#[test]
fn mosaic_cells_hold_one_grating() {
    let mut spec = small(DatasetKind::Structural);
    spec.mosaic = 4;
    spec.channels = 1;
    let pat = texture_pattern(&spec, 0);
    let only = |keep: usize| ClassPattern {
        gratings: vec![pat.gratings[keep].clone()],
        ..pat.clone()
    };
    let tiles: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
    let shift = [0.0, 0.0];
    let full = pat.render(16, &shift, &tiles, &mut || 0.0);
    let first = only(0).render(16, &shift, &tiles, &mut || 0.0);
    let second = only(1).render(16, &shift, &tiles, &mut || 0.0);
    for y in 0..16 {
        for x in 0..16 {
            let k = y * 16 + x;
            let expect = if tiles[(y / 4) * 4 + x / 4] {
                &second
            } else {
                &first
            };
            assert_eq!(full.data()[k], expect.data()[k], "pixel ({x}, {y})");
        }
    }
}

#[test]
fn mosaic_is_drawn_per_sample() {
    let spec = small(DatasetKind::Structural);
    let pat = texture_pattern(&spec, 0);
    let mut rng = Rng::new(2, 9);
    let a = render_sample(&spec, &pat, &mut rng, false);
    let b = render_sample(&spec, &pat, &mut rng, false);
    assert_ne!(a, b);
    let mut rng = Rng::new(2, 9);
    assert_eq!(render_sample(&spec, &pat, &mut rng, false), a);
}

#[test]
fn oversized_mosaic_is_rejected() {
    let mut spec = small(DatasetKind::Structural);
    spec.mosaic = 17;
    assert!(spec.validate().is_err());
}

#[test]
fn texture_defect_keeps_the_local_mean() {
    let mut image = Tensor::from_fn([1, 8, 8], |_| 0.5);
    let d = Defect {
        shape: DefectShape::Rectangle,
        x: 2,
        y: 2,
        w: 4,
        h: 4,
        delta: 0.3,
        style: DefectStyle::Texture,
    };
    d.apply(&mut image);
    let inside: Vec<f64> = (0..64)
        .filter(|k| d.contains(k % 8, k / 8))
        .map(|k| image.data()[k])
        .collect();
    assert_eq!(inside.len(), 16);
    let mean = inside.iter().sum::<f64>() / 16.0;
    assert!((mean - 0.5).abs() < 1e-2, "mean {mean}");
    assert!(inside.iter().all(|v| (v - 0.5).abs() > 0.25));
}
