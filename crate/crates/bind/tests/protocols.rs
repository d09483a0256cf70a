//! Evaluation protocols on the bundled desk world, averaged over seeds.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use bind::ablation::{self, AblationSuiteSpec, Axis, AxisValue};
use bind::ExperimentConfig;
use bind_core::evaluation::{self, binomial_band, build_prototypes, few_shot_probe, zero_shot_classify};
use bind_core::rng::Stream;
use bind_core::trainer::{self, PairConfig, TrainState, Trainer};
use bind_core::world::{self, WorldSpec};
use bind_core::{encoder, MetricsReport};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Run {
    cfg: ExperimentConfig,
    world: WorldSpec,
    state: TrainState,
    report: MetricsReport,
}

fn desk_runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| {
                let cfg = ExperimentConfig::desk().with_seed(s);
                let world = cfg.build_world().unwrap();
                let (state, _) = trainer::train_run(&world, &cfg.archs, &cfg.train_config()).unwrap();
                let report = evaluation::run_eval_plan(&world, &state, &cfg.eval, s).unwrap();
                Run { cfg, world, state, report }
            })
            .collect()
    })
}

fn seed_mean(metric: &str) -> f64 {
    let runs = desk_runs();
    runs.iter().map(|r| r.report.get(metric).unwrap()).sum::<f64>() / runs.len() as f64
}

#[test]
fn desk_training_lowers_every_pair_loss() {
    for run in desk_runs() {
        let means = run.state.epoch_means(run.cfg.train.steps_per_epoch);
        for (pair, m) in means {
            assert!(m.last().unwrap() < m.first().unwrap(), "{pair}: {m:?}");
        }
        let first_t = run.state.history.iter().find(|r| r.pair == "T").unwrap().loss;
        let last_t = run.state.history.iter().rev().find(|r| r.pair == "T").unwrap().loss;
        assert!(last_t < first_t);
    }
}

#[test]
fn same_modality_reference_is_recorded_and_not_emergent() {
    let r = &desk_runs()[0].report;
    assert!(r.get("zero_shot/M1->M1/accuracy").is_some());
    assert!(!r.flags["zero_shot/M1->M1/emergent"]);
    assert!(r.flags["zero_shot/M1->T/emergent"]);
}

#[test]
fn more_prompts_do_not_hurt_prototype_accuracy() {
    let mut acc = BTreeMap::new();
    for p in [1usize, 16] {
        let mut total = 0.0;
        for run in desk_runs() {
            let enc = run.state.encoder("T").unwrap();
            let mut s = Stream::new(run.cfg.seed, &format!("eval/prompts/{p}"));
            let bank = build_prototypes(&run.world, "T", enc, p, &mut s).unwrap();
            let mut s = Stream::new(run.cfg.seed, "eval/prompts/heldout");
            let eval = world::make_eval_set(&run.world, "T", 50, &mut s).unwrap();
            let pred = zero_shot_classify(&encoder::embed(enc, &eval.obs).unwrap(), &bank).unwrap();
            total += evaluation::accuracy(&pred, &eval.labels);
        }
        acc.insert(p, total / SEEDS.len() as f64);
    }
    assert!(acc[&16] >= acc[&1], "{acc:?}");
}

#[test]
fn single_prompt_prototype_is_its_embedding() {
    let run = &desk_runs()[0];
    let enc = run.state.encoder("T").unwrap();
    let mut a = Stream::new(9, "eval/p1");
    let mut b = a.clone();
    let bank = build_prototypes(&run.world, "T", enc, 1, &mut a).unwrap();
    let prompts = world::class_prototypes(&run.world, "T", 1, &mut b).unwrap();
    let emb = encoder::embed(enc, &prompts.obs).unwrap();
    for (row, &c) in emb.iter_rows().zip(&prompts.classes) {
        let p = bank.prototypes.row(c);
        assert!(row.iter().zip(p).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((bind_core::numerics::norm(p) - 1.0).abs() < 1e-10);
    }
}

#[test]
fn shuffled_label_probe_sits_at_chance() {
    // One permutation moves whole classes together, so pool many
    // independent permutations rather than many queries of one.
    let (mut hits, mut n) = (0.0, 0);
    for run in desk_runs() {
        let enc = run.state.encoder("M1").unwrap();
        for draw in 0..10 {
            let mut s = Stream::new(run.cfg.seed, &format!("eval/probe/shuffled/{draw}"));
            let shots = world::make_eval_set(&run.world, "M1", 8, &mut s).unwrap();
            let test = world::make_eval_set(&run.world, "M1", 2, &mut s).unwrap();
            let mut labels = shots.labels.clone();
            s.shuffle(&mut labels);
            let acc = few_shot_probe(
                &encoder::embed(enc, &shots.obs).unwrap(),
                &labels,
                &encoder::embed(enc, &test.obs).unwrap(),
                &test.labels,
                10,
                &Default::default(),
            )
            .unwrap();
            hits += acc * test.labels.len() as f64;
            n += test.labels.len();
        }
    }
    let acc = hits / n as f64;
    assert_eq!(n, 1000);
    assert!((acc - 0.1).abs() <= binomial_band(0.1, n, 3.0), "{acc}");
}

#[test]
fn ensemble_keeps_the_better_view() {
    for k in [1, 5, 10] {
        let single = seed_mean(&format!("ensemble/hub/T/recall@{k}"))
            .max(seed_mean(&format!("ensemble/hub/M1/recall@{k}")));
        let ens = seed_mean(&format!("ensemble/hub/w=0.95/recall@{k}"));
        assert!(ens >= single - 0.02, "k={k}: ensemble {ens} vs best single {single}");
    }
    let r = &desk_runs()[0].report;
    for w in ["0", "0.5", "0.95", "1"] {
        assert!(r.get(&format!("ensemble/hub/w={w}/recall@1")).is_some());
    }
}

fn frozen_hub_accuracy(hub: &bind_core::encoder::EncoderParams, run: &Run) -> MetricsReport {
    let mut train = run.cfg.train_config();
    train.pairs.retain(|p| p.spoke == "T" || p.spoke == "M1");
    let mut plan = run.cfg.eval.clone();
    plan.few_shot = None;
    plan.arithmetic = None;
    plan.ensemble = None;
    plan.retrieval.clear();
    evaluation::frozen_hub_eval(hub, &run.world, &run.cfg.archs, &train, &plan).unwrap()
}

#[test]
fn trained_hub_beats_random_hub_when_frozen() {
    let (mut trained, mut random) = (0.0, 0.0);
    for run in desk_runs() {
        let good = run.state.encoder("hub").unwrap();
        let bad = evaluation::untrained_like(good, 1234 + run.cfg.seed).unwrap();
        let a = frozen_hub_accuracy(good, run);
        assert!(a.flags["frozen_hub/train/hub_frozen"]);
        trained += a.get("zero_shot/M1->T/accuracy").unwrap();
        random += frozen_hub_accuracy(&bad, run).get("zero_shot/M1->T/accuracy").unwrap();
    }
    assert!(trained > random, "trained {trained} vs random {random}");
}

#[test]
fn frozen_hub_eval_is_deterministic_and_checks_dims() {
    let run = &desk_runs()[0];
    let hub = run.state.encoder("hub").unwrap();
    let mut plan = run.cfg.eval.clone();
    plan.few_shot = None;
    let mut train = run.cfg.train_config();
    train.epochs = 2;
    let a = evaluation::frozen_hub_eval(hub, &run.world, &run.cfg.archs, &train, &plan).unwrap();
    let b = evaluation::frozen_hub_eval(hub, &run.world, &run.cfg.archs, &train, &plan).unwrap();
    assert_eq!(a, b);
    let wrong = run.state.encoder("T").unwrap();
    assert!(evaluation::frozen_hub_eval(wrong, &run.world, &run.cfg.archs, &train, &plan).is_err());
}

#[test]
fn hub_aligned_to_text_first_then_frozen_still_transfers() {
    let cfg = ExperimentConfig::desk().with_seed(7);
    let world = cfg.build_world().unwrap();
    let mut phase1 = cfg.train_config();
    phase1.pairs.retain(|p| p.spoke == "T");
    let (mut state, _) = trainer::train_run(&world, &cfg.archs, &phase1).unwrap();
    let mut hub = state.encoder("hub").unwrap().clone();
    hub.frozen = true;
    state.set_encoder("hub", hub.clone()).unwrap();
    state.step = 0;
    state.history.clear();

    let mut phase2 = cfg.train_config();
    phase2.hub_frozen = true;
    phase2.pairs = vec![PairConfig {
        spoke: "M1".into(),
        ..phase1.pairs[0].clone()
    }];
    let mut t = Trainer::resume(&world, &phase2, state).unwrap();
    t.run().unwrap();
    let state = t.into_state();
    assert_eq!(state.encoder("hub").unwrap(), &hub);
    assert!(state.trained_together("hub", "T") && state.trained_together("hub", "M1"));
    let mut s = Stream::new(7, "eval/two-phase");
    let r = evaluation::emergent_zero_shot_accuracy(&world, &state, "M1", "T", 100, 10, &mut s).unwrap();
    assert!(r.emergent);
    assert!(r.accuracy > 0.1 + binomial_band(0.1, r.num_queries, 3.0), "{}", r.accuracy);
}

#[test]
fn longer_training_does_not_reduce_emergent_accuracy() {
    let mut base = ExperimentConfig::desk();
    base.eval.few_shot = None;
    base.eval.arithmetic = None;
    base.eval.ensemble = None;
    base.eval.retrieval.clear();
    let spec = AblationSuiteSpec {
        axis: Axis::Epochs,
        grid: vec![AxisValue::Count(5), AxisValue::Count(15), AxisValue::Count(30)],
        base,
        seeds: SEEDS.to_vec(),
    };
    let cells = ablation::run_suite(&spec).unwrap();
    assert_eq!(cells.len(), 15);
    let rows = ablation::summarize(&cells);
    let acc: Vec<f64> = rows
        .iter()
        .filter(|r| r.metric == "zero_shot/M1->T/accuracy")
        .map(|r| r.mean)
        .collect();
    assert_eq!(acc.len(), 3);
    for w in acc.windows(2) {
        assert!(w[1] >= w[0] - 0.01, "{acc:?}");
    }
}

#[test]
fn untrained_pool_is_at_chance() {
    let run = &desk_runs()[0];
    let (acc, n) =
        evaluation::untrained_zero_shot_accuracy(&run.world, &run.cfg.archs, "M1", "T", 50, 2, 10, 99).unwrap();
    assert_eq!(n, 1000);
    assert!((acc - 0.1).abs() <= binomial_band(0.1, n, 3.0), "{acc}");
}
