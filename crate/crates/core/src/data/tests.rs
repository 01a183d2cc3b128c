use super::*;
use proptest::prelude::*;

fn tiny() -> SynthConfig {
    SynthConfig { p: 3, seq_len: 6, d_x: 5, k: 4, noise_sigma: 0.1, seed: 3, n_train: 8, n_test: 4 }
}

fn path() -> &'static Path {
    Path::new("mem.trk")
}

#[test]
fn text_round_trip_is_lossless() {
    let (mut train, _) = generate_synthetic(&tiny()).unwrap();
    train.samples[1].present[2] = false;
    train.samples[1].features[2].iter_mut().for_each(|v| *v = Vector::zeros(5));
    // Awkward values must survive.
    train.samples[0].features[0][0] = Vector::from_vec(vec![0.1, -1e-300, 1.0 / 3.0, 5e300, -0.0]);
    let back = Dataset::from_text(&train.to_text(), path()).unwrap();
    assert_eq!(back, train);
    let bits = |d: &Dataset| -> Vec<u64> {
        d.samples.iter().flat_map(|s| s.features.iter().flatten().flat_map(|v| v.iter().map(|x| x.to_bits()))).collect()
    };
    assert_eq!(bits(&back), bits(&train));
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("train.trk");
    let (train, _) = generate_synthetic(&tiny()).unwrap();
    train.save(&file).unwrap();
    assert_eq!(Dataset::load(&file).unwrap(), train);
}

#[test]
fn short_record_cites_the_sample() {
    let (train, _) = generate_synthetic(&tiny()).unwrap();
    let text = train.to_text();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    // Drop the last step (5 values) of the last person on the first sample line.
    let mut toks: Vec<&str> = lines[1].split(' ').collect();
    toks.truncate(toks.len() - 5);
    lines[1] = toks.join(" ");
    let err = Dataset::from_text(&lines.join("\n"), path()).unwrap_err().to_string();
    assert!(err.contains("train-00000") && err.contains("mem.trk:2:") && err.contains("found 85"), "{err}");
}

#[test]
fn unknown_label_is_named() {
    let text = "HLSTCM-TRACKLETS v1 k=2 p=2 T=1 d_x=1 classes=a,b\nx1 c 11 0.5 0.5\n";
    let err = Dataset::from_text(text, path()).unwrap_err().to_string();
    assert!(err.contains("unknown label 'c'") && err.contains("x1"), "{err}");
}

#[test]
fn malformed_input_is_rejected_with_a_line_number() {
    let cases = [
        ("", "no header"),
        ("SOMETHING v1 k=2\n", "must start"),
        ("HLSTCM-TRACKLETS v9 k=2 p=1 T=1 d_x=1 classes=a,b\n", "version"),
        ("HLSTCM-TRACKLETS v1 k=3 p=1 T=1 d_x=1 classes=a,b\n", "declares k=3"),
        ("HLSTCM-TRACKLETS v1 k=2 p=1 T=1 classes=a,b\n", "lacks d_x"),
        ("HLSTCM-TRACKLETS v1 k=2 p=1 T=1 d_x=1 classes=a,b\ns a 2 0.1\n", "presence mask"),
        ("HLSTCM-TRACKLETS v1 k=2 p=1 T=1 d_x=1 classes=a,b\ns a 1 zz\n", "bad value 'zz'"),
        ("HLSTCM-TRACKLETS v1 k=2 p=1 T=1 d_x=1 classes=a,b\ns a 1 NaN\n", "bad value"),
        ("HLSTCM-TRACKLETS v1 k=2 p=1 T=1 d_x=1 classes=a,b\ns a 0 0\n", "no person slot"),
        ("# c\n\nHLSTCM-TRACKLETS v1 k=2 p=1 T=1 d_x=1 classes=a,b\ns\n", "mem.trk:4:"),
    ];
    for (text, needle) in cases {
        let err = Dataset::from_text(text, path()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains(needle), "{needle}: {err}");
    }
}

#[test]
fn generation_is_deterministic_and_balanced() {
    let cfg = SynthConfig { n_train: 40, n_test: 20, ..tiny() };
    let (a, b) = generate_synthetic(&cfg).unwrap();
    let (a2, b2) = generate_synthetic(&cfg).unwrap();
    assert_eq!(a.to_text(), a2.to_text());
    assert_eq!(b.to_text(), b2.to_text());
    assert_eq!(a.class_counts(), vec![10; 4]);
    assert_eq!(b.class_counts(), vec![5; 4]);
    let (c, _) = generate_synthetic(&SynthConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn train_and_test_streams_are_disjoint() {
    let cfg = SynthConfig { n_train: 8, n_test: 8, ..tiny() };
    let (a, b) = generate_synthetic(&cfg).unwrap();
    for s in &a.samples {
        for t in &b.samples {
            assert_ne!(s.features, t.features);
        }
    }
}

#[test]
fn invalid_synth_configs() {
    for bad in [
        SynthConfig { p: 1, ..tiny() },
        SynthConfig { d_x: 3, ..tiny() },
        SynthConfig { k: 5, ..tiny() },
        SynthConfig { noise_sigma: -0.1, ..tiny() },
        SynthConfig { n_train: 10, ..tiny() },
    ] {
        assert!(generate_synthetic(&bad).is_err(), "{bad:?}");
    }
}

#[test]
fn approach_contracts_in_every_clip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in [2, 3, 4] {
        for _ in 0..2000 {
            let clip = simulate_latent(0, p, 10, &mut rng);
            let first = mean_pairwise_distance(&clip.positions[0]);
            let last = mean_pairwise_distance(&clip.positions[9]);
            assert!(last < first, "p={p}: {first} -> {last}");
        }
    }
}

#[test]
fn retreat_expands_in_every_clip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..2000 {
        let clip = simulate_latent(1, 3, 10, &mut rng);
        assert!(mean_pairwise_distance(&clip.positions[9]) > mean_pairwise_distance(&clip.positions[0]));
    }
}

#[test]
fn agents_start_at_rest() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for class in 0..4 {
        let clip = simulate_latent(class, 4, 3, &mut rng);
        assert!(clip.velocities[0].iter().all(|u| *u == [0.0, 0.0]));
    }
}

#[test]
fn approaching_agents_do_not_cross_the_centroid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        let clip = simulate_latent(0, 3, 10, &mut rng);
        let offsets = |xs: &[[f64; 2]]| {
            let c = [xs.iter().map(|x| x[0]).sum::<f64>() / 3.0, xs.iter().map(|x| x[1]).sum::<f64>() / 3.0];
            xs.iter().map(|x| [x[0] - c[0], x[1] - c[1]]).collect::<Vec<_>>()
        };
        let (first, last) = (offsets(&clip.positions[0]), offsets(&clip.positions[9]));
        for (a, b) in first.iter().zip(&last) {
            assert!(a[0] * b[0] + a[1] * b[1] > 0.0);
        }
    }
}

/// Least-squares inverse of the feature map: recovers `(x/scale + shift, v)`
/// up to the clip's rotation.
fn unmap(map: &Matrix, f: &Vector) -> [f64; 4] {
    // Normal equations M^T M z = M^T f, solved by Gaussian elimination.
    let mut a = [[0.0; 5]; 4];
    for i in 0..4 {
        for j in 0..4 {
            a[i][j] = (0..map.rows()).map(|r| map.get(r, i) * map.get(r, j)).sum();
        }
        a[i][4] = (0..map.rows()).map(|r| map.get(r, i) * f[r]).sum();
    }
    for c in 0..4 {
        let piv = (c..4).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..4 {
            if r != c {
                let m = a[r][c] / a[c][c];
                for k in c..5 {
                    a[r][k] -= m * a[c][k];
                }
            }
        }
    }
    [a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]]
}

#[test]
fn independent_agents_follow_fixed_magnitude_random_walks() {
    let cfg = SynthConfig { k: 4, noise_sigma: 0.0, n_train: 40, n_test: 4, d_x: 6, ..tiny() };
    let (train, _) = generate_synthetic(&cfg).unwrap();
    let map = feature_map(&cfg);
    let mut headings = Vec::new();
    for s in train.samples.iter().filter(|s| s.label == 3) {
        for track in &s.features {
            let z: Vec<[f64; 4]> = track.iter().map(|f| unmap(&map, f)).collect();
            for t in 0..z.len() - 1 {
                // Position advances by the updated velocity.
                let dx = [(z[t + 1][0] - z[t][0]) * POSITION_SCALE, (z[t + 1][1] - z[t][1]) * POSITION_SCALE];
                assert!((dx[0] - z[t + 1][2]).abs() < 1e-9 && (dx[1] - z[t + 1][3]).abs() < 1e-9);
                // Each step adds an acceleration of exactly the coupling gain.
                let dv = [z[t + 1][2] - z[t][2], z[t + 1][3] - z[t][3]];
                assert!((dv[0].hypot(dv[1]) - COUPLING_GAIN).abs() < 1e-9);
                headings.push(dv[1].atan2(dv[0]));
            }
        }
    }
    // Headings spread over the circle rather than pointing anywhere fixed.
    let mean = (headings.iter().map(|h| h.cos()).sum::<f64>(), headings.iter().map(|h| h.sin()).sum::<f64>());
    assert!(mean.0.hypot(mean.1) / (headings.len() as f64) < 0.3);
}

#[test]
fn feature_map_is_shared_by_every_clip() {
    // With zero noise, every feature vector lies in the 4-D column space of
    // the map, so the reconstruction reproduces it exactly.
    let cfg = SynthConfig { noise_sigma: 0.0, ..tiny() };
    let (train, test) = generate_synthetic(&cfg).unwrap();
    let map = feature_map(&cfg);
    for s in train.samples.iter().chain(&test.samples) {
        for f in s.features.iter().flatten() {
            let z = unmap(&map, f);
            let back = map.matvec(&Vector::from_vec(z.to_vec()));
            assert!(back.iter().zip(f.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}

fn labelled(counts: &[usize]) -> Dataset {
    let mut samples = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let v = Vector::from_vec(vec![(c * 1000 + i) as f64]);
            samples.push(Sample::new(format!("c{c}-{i}"), c, vec![vec![v]]));
        }
    }
    Dataset { class_names: (0..counts.len()).map(|c| format!("c{c}")).collect(), p: 1, seq_len: 1, d_x: 1, samples }
}

#[test]
fn half_split_of_a_balanced_set() {
    let d = labelled(&[25, 25, 25, 25]);
    let (a, b) = split(&d, 0.5, 1).unwrap();
    assert_eq!((a.len(), b.len()), (50, 50));
    for side in [&a, &b] {
        assert!(side.class_counts().iter().all(|&n| n == 12 || n == 13), "{:?}", side.class_counts());
    }
    assert_eq!(split(&d, 0.5, 1).unwrap(), (a, b));
}

#[test]
fn split_rejects_bad_input() {
    assert!(split(&labelled(&[5, 1]), 0.5, 0).is_err());
    assert!(split(&labelled(&[5, 5]), 0.0, 0).is_err());
    assert!(split(&labelled(&[5, 5]), 1.0, 0).is_err());
}

proptest! {
    #[test]
    fn split_partitions_the_input(counts in prop::collection::vec(2usize..15, 2..5), frac in 0.05f64..0.95, seed in 0u64..1000) {
        let d = labelled(&counts);
        let (a, b) = split(&d, frac, seed).unwrap();
        let mut ids: Vec<&str> = a.samples.iter().chain(&b.samples).map(|s| s.id.as_str()).collect();
        ids.sort();
        let mut all: Vec<&str> = d.samples.iter().map(|s| s.id.as_str()).collect();
        all.sort();
        prop_assert_eq!(ids, all);
        for c in 0..counts.len() {
            prop_assert!(a.class_counts()[c] >= 1 && b.class_counts()[c] >= 1);
        }
    }
}
