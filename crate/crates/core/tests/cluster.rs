mod common;

use av2vec::cluster::{self, kmeans_fit, ClusterModel};
use av2vec::model;
use av2vec::rng::{self, Stream};
use av2vec::synthdata::SyntheticWorld;
use av2vec::{Error, Matrix};
use common::{fixture, tiny_config};

#[test]
fn two_means_matches_exhaustive_optimum() {
    for (seed, n, d) in [(1, 6, 2), (2, 7, 2), (3, 8, 3), (4, 5, 1), (5, 8, 2), (6, 4, 4), (7, 8, 5)] {
        let x = common::two_blob_fixture(seed, n, d);
        let oracle = common::exhaustive_two_partition_optimum(&x);
        for km_seed in 0..4 {
            let fit = kmeans_fit(&x, 2, 50, km_seed, 1).unwrap();
            assert_eq!(fit.objective(), oracle, "fixture {seed}, k-means seed {km_seed}");
        }
    }
}

#[test]
fn objective_history_never_increases() {
    let fx = fixture(tiny_config());
    let pc = fx.cfg.pretrain_config();
    let params = model::init_student(&pc.model, &mut rng::derive(3, Stream::Init, &[]));
    let feats = cluster::dump_features(&pc.model, &params, &fx.train, 1).unwrap();
    for k in [2, 3, 5, 8] {
        for seed in 0..3 {
            let fit = kmeans_fit(&feats.features, k, 100, seed, 1).unwrap();
            for w in fit.history.windows(2) {
                assert!(w[1] <= w[0], "K = {k}: {:?}", fit.history);
            }
            // Every label is the nearest centroid, checked against all K distances.
            for (i, &l) in fit.labels.iter().enumerate() {
                let d = |c: usize| -> f64 {
                    feats.features.row(i).iter().zip(fit.model.centroids.row(c)).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                assert!((0..k).all(|c| d(l) <= d(c)));
            }
        }
    }
}

#[test]
fn fit_is_deterministic() {
    let x = common::two_blob_fixture(9, 8, 3);
    let a = kmeans_fit(&x, 3, 20, 42, 2).unwrap();
    let b = kmeans_fit(&x, 3, 20, 42, 2).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.labels, b.labels);
}

#[test]
fn dump_counts_rows_and_checks_layer() {
    let mut cfg = tiny_config();
    cfg.synth.frames_min = 5;
    cfg.synth.frames_max = 7;
    let world = SyntheticWorld::new(cfg.synth.clone()).unwrap();
    // Pick two utterances with T = 5 and T = 7.
    let mut corpus = Vec::new();
    for want in [5, 7] {
        corpus.push((0..200).map(|i| world.sample(i)).find(|s| s.num_frames() == want).unwrap());
    }
    let pc = cfg.pretrain_config();
    let params = model::init_student(&pc.model, &mut rng::derive(1, Stream::Init, &[]));
    let f = cluster::dump_features(&pc.model, &params, &corpus, 2).unwrap();
    assert_eq!(f.features.shape(), (12, cfg.encoder.d_model));
    assert_eq!(f.rows_of(1), 5..12);
    let again = cluster::dump_features(&pc.model, &params, &corpus, 2).unwrap();
    assert_eq!(f.features, again.features);

    assert!(matches!(cluster::dump_features(&pc.model, &params, &corpus, 0), Err(Error::Config(_))));
    assert!(matches!(cluster::dump_features(&pc.model, &params, &corpus, 3), Err(Error::Config(_))));
    let mut wrong = cfg.clone();
    wrong.encoder.d_model = 8;
    wrong.encoder.ffn_dim = 12;
    assert!(cluster::dump_features(&wrong.model_config(), &params, &corpus, 1).is_err());
}

#[test]
fn assignment_rules() {
    let c = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0], vec![2.0, 2.0], vec![3.0, 0.0]]);
    let m = ClusterModel { centroids: c, feature_layer: 1 };
    let x = Matrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 0.0], vec![5.0, 5.0]]);
    // Row 1 is equidistant from centroids 1 and 4.
    assert_eq!(m.assign(&x).unwrap(), vec![3, 1, 2]);
    assert_eq!(m.assign(&x).unwrap(), m.assign(&x).unwrap());
}

#[test]
fn targets_roundtrip_through_disk() {
    let fx = fixture(tiny_config());
    let pc = fx.cfg.pretrain_config();
    let params = model::init_student(&pc.model, &mut rng::derive(1, Stream::Init, &[]));
    let feats = cluster::dump_features(&pc.model, &params, &fx.train, 1).unwrap();
    let fit = kmeans_fit(&feats.features, 4, 50, 0, 1).unwrap();
    let targets = cluster::assign_targets(&fit.model, &pc.model, &params, &fx.train).unwrap();
    assert_eq!(targets.len(), fx.train.len());
    for (t, s) in targets.iter().zip(&fx.train) {
        assert_eq!(t.labels.len(), s.num_frames());
        assert!(t.labels.iter().all(|&l| l < 4));
    }
    // Full-precision assignment of the fitted model reproduces the fit labels.
    let flat: Vec<usize> = targets.iter().flat_map(|t| t.labels.clone()).collect();
    assert_eq!(flat, fit.labels);

    let dir = tempfile::tempdir().unwrap();
    cluster::write_targets(dir.path(), &targets).unwrap();
    assert_eq!(cluster::read_targets(dir.path(), &fx.train).unwrap(), targets);
    assert!(cluster::read_targets(dir.path(), &fx.eval).is_err());

    let path = dir.path().join("c.av2k");
    cluster::save_cluster_model(&fit.model, &path).unwrap();
    let loaded = cluster::load_cluster_model(&path).unwrap();
    assert_eq!(loaded.k(), 4);
    assert_eq!(loaded.feature_layer, 1);
    assert!(loaded.centroids.max_abs_diff(&fit.model.centroids) < 1e-6);
}
