use std::collections::HashSet;

use swipecf_core::abtest::{compare, Experiment};
use swipecf_core::dedup::cluster_products;
use swipecf_core::evaluation::{evaluate, EvaluateOptions};
use swipecf_core::eventstore::{EventEnvelope, EventStore, ReplayFilter, ReplayMode, Snapshot};
use swipecf_core::model::{EventKind, InteractionMatrix, TimeWindow};
use swipecf_core::recommender::Recommender;
use swipecf_core::simulator::{generate, LatentStyleModel, SimulationConfig};

#[test]
fn simulate_store_snapshot_recommend() {
    let cfg = SimulationConfig {
        n_users: 50,
        n_products: 150,
        sessions_per_user: 3,
        swipes_per_session: 12,
        seed: 5,
        ..SimulationConfig::default()
    };
    let log = generate(&cfg, &LatentStyleModel::clustered(&cfg)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut store = EventStore::create(dir.path()).unwrap();
    let envs: Vec<EventEnvelope> = log.events.iter().cloned().map(EventEnvelope::new).collect();
    let half = envs.len() / 2;
    assert_eq!(store.append_batch(&envs[..half]).unwrap().accepted, half);
    let snap = store.snapshot(None).unwrap();
    snap.write(dir.path().join("snapshot.json")).unwrap();
    store.append_batch(&envs[half..]).unwrap();

    let snap = Snapshot::read(dir.path().join("snapshot.json")).unwrap();
    let restored = store.restore(&snap).unwrap();
    let direct = InteractionMatrix::build(log.swipes(), None).unwrap();
    assert_eq!(restored, direct);

    let engine = Recommender::new(&restored);
    let mut produced = 0;
    for user in &log.users {
        let out = engine.recommend(user, 5).unwrap();
        if let Some(rec) = out.record() {
            produced += 1;
            let t = restored.user_index(user).unwrap();
            for p in &rec.queued {
                let pi = restored.product_index(p).unwrap();
                assert!(!restored.has_swiped(t, pi), "{user} already swiped {p}");
            }
            assert!(rec.queued.len() <= 5);
        }
    }
    assert!(produced > 0);

    let swipes_only = store
        .replay(&ReplayFilter::kind(EventKind::Swipe), ReplayMode::Strict)
        .unwrap();
    assert_eq!(swipes_only.events.len(), log.swipes().count());
}

#[test]
fn clustered_variant_experiment() {
    let cfg = SimulationConfig {
        n_users: 60,
        n_products: 150,
        sessions_per_user: 3,
        swipes_per_session: 12,
        variant_product_share: 0.3,
        seed: 8,
        experiment: Some(Experiment::even("clusters", &["v1", "v2"], "salt").unwrap()),
        clustered_variant: Some("v2".into()),
        ..SimulationConfig::default()
    };
    let log = generate(&cfg, &LatentStyleModel::clustered(&cfg)).unwrap();
    let exp = cfg.experiment.as_ref().unwrap();
    let cmp = compare(&log.events, exp, &TimeWindow::ALL);
    assert_eq!(cmp.unattributed.events, 0);
    let shown: usize = cmp.variants.values().map(|v| v.funnel.total_shown).sum();
    let total = evaluate(&log.events, &EvaluateOptions::default()).unwrap();
    assert_eq!(shown, total.funnel.total_shown);
    assert!(log.recommendations.iter().any(|r| r.clustered));

    // Clustered recommendations only ever name canonical products.
    let map = log.cluster_map.as_ref().unwrap();
    let canonical: HashSet<_> = log
        .catalogue
        .iter()
        .map(|p| map.canonical(&p.product_id).clone())
        .collect();
    for rec in log.recommendations.iter().filter(|r| r.clustered) {
        assert!(rec.record.queued.iter().all(|p| canonical.contains(p)));
    }

    // Reclustering the same catalogue gives the same map.
    assert_eq!(
        &cluster_products(&log.catalogue, map.threshold()).unwrap(),
        map
    );
}
