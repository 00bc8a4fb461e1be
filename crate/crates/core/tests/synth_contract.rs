use spoofmeter::ingest::{group_videos, load_manifest, parse_features, parse_scores};
use spoofmeter::metrics::{auc, roc_curve, variance, video_probability};
use spoofmeter::synth::{generate, generate_scores, write_features_dir, write_scores_dir, SynthConfig};
use spoofmeter::Label;

fn small() -> SynthConfig {
    SynthConfig {
        n_domains: 3,
        videos_per_domain: 6,
        frames_per_video: 5,
        feature_dim: 4,
        seed: 17,
        ..SynthConfig::default()
    }
}

fn read_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_features_dir(&generate(&small()).unwrap(), a.path()).unwrap();
    write_features_dir(&generate(&small()).unwrap(), b.path()).unwrap();
    write_scores_dir(&generate_scores(&small()).unwrap(), a.path()).unwrap();
    write_scores_dir(&generate_scores(&small()).unwrap(), b.path()).unwrap();
    assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    write_scores_dir(&generate_scores(&SynthConfig { seed: 18, ..small() }).unwrap(), c.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("scores.jsonl")).unwrap(),
        std::fs::read(c.path().join("scores.jsonl")).unwrap()
    );
}

#[test]
fn written_files_pass_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let feats = generate(&small()).unwrap();
    let files = write_features_dir(&feats, dir.path()).unwrap();
    let parsed = parse_features(files.meta.unwrap(), files.features.unwrap()).unwrap();
    assert_eq!(parsed, feats.records);
    assert_eq!(parsed.len(), 3 * 6 * 5);
    assert_eq!(group_videos(&parsed).unwrap().len(), 18);

    let scores = generate_scores(&small()).unwrap();
    let files = write_scores_dir(&scores, dir.path()).unwrap();
    assert_eq!(parse_scores(files.scores.unwrap()).unwrap(), scores.records);

    assert_eq!(files.manifests.len(), 3);
    let m = load_manifest(dir.path().join("protocol_A.json")).unwrap();
    assert_eq!(m.name, "BC->A");
    assert_eq!(m.train_datasets, vec!["B", "C"]);
    assert_eq!(m.seed, 17);
}

#[test]
fn sidecar_matches_emitted_scores() {
    let scores = generate_scores(&small()).unwrap();
    let groups = group_videos(&scores.records).unwrap();
    assert_eq!(groups.len(), scores.sidecar.videos.len());
    for truth in &scores.sidecar.videos {
        let g = groups
            .iter()
            .find(|g| g.dataset_id == truth.dataset && g.video_id == truth.video_id)
            .unwrap();
        assert_eq!(g.label, truth.label);
        let frames = g.scores().unwrap();
        assert!((video_probability(&frames).unwrap() - truth.mean).abs() < 1e-12);
        assert!((variance(&[frames]).unwrap() - truth.std).abs() < 1e-12);
    }
}

#[test]
fn far_apart_classes_rank_perfectly() {
    let cfg = SynthConfig {
        separation: 12.0,
        domain_shift: 0.5,
        frame_noise: 0.2,
        ..small()
    };
    let scores = generate_scores(&cfg).unwrap();
    let groups = group_videos(&scores.records).unwrap();
    let live_min = scores
        .records
        .iter()
        .filter(|r| r.label == Label::Live)
        .map(|r| r.score().unwrap())
        .fold(f64::INFINITY, f64::min);
    let spoof_max = scores
        .records
        .iter()
        .filter(|r| r.label == Label::Spoof)
        .map(|r| r.score().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(live_min > spoof_max);
    let probs: Vec<f64> = groups.iter().map(|g| video_probability(&g.scores().unwrap()).unwrap()).collect();
    let labels: Vec<Label> = groups.iter().map(|g| g.label).collect();
    assert_eq!(auc(&roc_curve(&probs, &labels).unwrap()), 1.0);
}

#[test]
fn variance_grows_with_frame_noise() {
    let mut last = -1.0;
    for noise in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0] {
        let cfg = SynthConfig {
            frame_noise: noise,
            separation: 2.0,
            ..small()
        };
        let groups = group_videos(&generate_scores(&cfg).unwrap().records).unwrap();
        let videos: Vec<Vec<f64>> = groups.iter().map(|g| g.scores().unwrap()).collect();
        let v = variance(&videos).unwrap();
        if noise == 0.0 {
            assert_eq!(v, 0.0);
        }
        assert!(v > last, "noise {noise}: {v} <= {last}");
        last = v;
    }
}

#[test]
fn bad_configs_are_rejected() {
    for cfg in [
        SynthConfig { n_domains: 27, ..small() },
        SynthConfig { frames_per_video: 0, ..small() },
        SynthConfig { frame_noise: -1.0, ..small() },
        SynthConfig { separation: f64::NAN, ..small() },
    ] {
        assert!(generate(&cfg).is_err());
        assert!(generate_scores(&cfg).is_err());
    }
}
