use cofuse::harness::*;
use cofuse::numerics::{Scope, Tape, Tensor};
use cofuse::sim::{AgentSpec, ChannelConfig, GridSpec, Pose2D, Scenario, ScenarioSpec, SceneObject};
use cofuse::temporal::Integrator;
use cofuse::Error;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        grid: GridSpec {
            h: 16,
            w: 16,
            cell_m: 2.0,
            channels: 4,
        },
        state_dim: 4,
        ..PipelineConfig::default()
    };
    cfg.buffer = 2;
    cfg.training.steps = 2;
    cfg.evaluation.scenarios = 2;
    cfg.evaluation.ticks = 3;
    cfg
}

fn spec(cfg: &PipelineConfig, ticks: usize) -> ScenarioSpec {
    ScenarioSpec { ticks, ..cfg.scenario }
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = small_config();
    let model = Model::new(&cfg, 7).unwrap();
    let a = evaluate(&model, &cfg, &cfg.channel, 7).unwrap();
    let b = evaluate(&model, &cfg, &cfg.channel, 7).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.iou));
    assert_eq!(a.ticks, cfg.evaluation.scenarios * cfg.evaluation.ticks);
}

#[test]
fn silent_channel_matches_ego_only() {
    let cfg = small_config();
    let model = Model::new(&cfg, 3).unwrap();
    let channel = ChannelConfig {
        drop_p: 1.0,
        ..cfg.channel
    };
    for seed in 0..3 {
        let scenario = Scenario::generate(&spec(&cfg, 12), seed, channel);
        let mut alone = scenario.clone();
        alone.agents.truncate(1);
        let with = run_pipeline(&model, &cfg, &scenario, seed).unwrap();
        let without = run_pipeline(&model, &cfg, &alone, seed).unwrap();
        assert_eq!(with.iou, without.iou);
        assert_eq!(with.ticks, without.ticks);
    }
}

#[test]
fn pinned_passthrough_recovers_occupancy() {
    let mut cfg = small_config().with_modules(Toggles::BASELINE);
    cfg.channel = ChannelConfig::default();
    let mut model = Model::new(&cfg, 0).unwrap();
    let c = cfg.grid.channels;
    model
        .store
        .set(model.integrator.kernel, Integrator::stream_average_kernel(c))
        .unwrap();
    model.store.set(model.integrator.bias, Tensor::zeros(&[c])).unwrap();
    let mut w = Tensor::zeros(&[1, c, 1, 1]);
    w.set(&[0, 0, 0, 0], 1.0);
    model.store.set(model.decoder.weight, w).unwrap();
    model
        .store
        .set(model.decoder.bias.unwrap(), Tensor::new(&[1], vec![-0.5]).unwrap())
        .unwrap();
    let scenario = Scenario {
        seed: 0,
        ticks: 10,
        agents: vec![AgentSpec {
            id: 0,
            pose: Pose2D::new(0.0, 0.0, 0.0),
            fov_m: 100.0,
        }],
        objects: vec![
            SceneObject {
                x: 4.0,
                y: -3.0,
                w: 4.0,
                h: 2.0,
                vx: 0.5,
                vy: 0.0,
            },
            SceneObject {
                x: -6.0,
                y: 5.0,
                w: 3.0,
                h: 3.0,
                vx: 0.0,
                vy: -0.4,
            },
        ],
        channel: cfg.channel,
        bound: 14.0,
    };
    let rec = run_pipeline(&model, &cfg, &scenario, 0).unwrap();
    assert_eq!(rec.iou, 1.0);
}

#[test]
fn disabled_modules_are_identity() {
    let cfg = small_config().with_modules(Toggles::BASELINE);
    let model = Model::new(&cfg, 1).unwrap();
    let sample = training_sample(&cfg, 1, 0, 0).unwrap();
    let tape = Tape::inference();
    let s = Scope::new(&tape, &model.store);
    let fused = model
        .fuse(
            s,
            TickInput {
                stacks: &sample.stacks,
                ego: &sample.ego,
            },
        )
        .unwrap()
        .value();
    let direct = model.integrate(s, sample.stacks.last().unwrap()).unwrap().value();
    assert_eq!(fused.data(), direct.data());
}

#[test]
fn disabled_module_parameters_do_not_matter() {
    let cfg = small_config().with_modules(Toggles::new(true, false, true));
    let model = Model::new(&cfg, 5).unwrap();
    let mut other = model.clone();
    let ids: Vec<_> = other
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("wtden."))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        let t = other.store.tensor(id).map(|v| v * 3.0 + 1.0);
        other.store.set(id, t).unwrap();
    }
    let a = evaluate(&model, &cfg, &cfg.channel, 5).unwrap();
    let b = evaluate(&other, &cfg, &cfg.channel, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = small_config();
    cfg.training.learning_rate = 0.0;
    let init = Model::new(&cfg, cfg.training.seed).unwrap();
    let report = train(&cfg).unwrap();
    assert_eq!(report.losses.len(), cfg.training.steps);
    for ((_, a), (_, b)) in init.store.iter().zip(report.model.store.iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
}

#[test]
fn single_step_updates_parameters() {
    let mut cfg = small_config();
    cfg.training.steps = 1;
    let init = Model::new(&cfg, cfg.training.seed).unwrap();
    let report = train(&cfg).unwrap();
    assert_eq!(report.losses.len(), 1);
    let changed = init
        .store
        .iter()
        .zip(report.model.store.iter())
        .filter(|((_, a), (_, b))| a.tensor.data() != b.tensor.data())
        .count();
    assert!(changed > 0);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let cfg = small_config();
    let mut model = Model::new(&cfg, 0).unwrap();
    let bias = model.decoder.bias.unwrap();
    model
        .store
        .set(bias, Tensor::new(&[1], vec![f64::NAN]).unwrap())
        .unwrap();
    match train_model(model, &cfg) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_config_is_rejected_before_simulation() {
    let mut cfg = small_config();
    cfg.scales = vec![4, 32];
    assert!(matches!(Model::new(&cfg, 0), Err(Error::Config(_))));
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
    cfg.scales = vec![4];
    cfg.retention = 1.5;
    assert!(matches!(ablation_suite(&cfg, &[0]), Err(Error::Config(_))));
}

#[test]
fn ablation_has_seven_rows_and_matches_direct_runs() {
    let mut cfg = small_config();
    cfg.training.steps = 1;
    let rows = ablation_suite(&cfg, &[11]).unwrap();
    assert_eq!(rows.len(), 7);
    let labels: Vec<_> = rows.iter().map(|r| r.toggles).collect();
    assert_eq!(labels, Toggles::ablation().to_vec());
    let mut base = cfg.with_modules(Toggles::BASELINE);
    base.training.seed = 11;
    let report = train(&base).unwrap();
    let direct = evaluate(&report.model, &base, &base.channel, 11).unwrap();
    assert_eq!(rows[0].record, direct);
}

#[test]
fn sweeps_are_consistent_with_plain_evaluation() {
    let cfg = small_config();
    let model = Model::new(&cfg, 2).unwrap();
    let lat = latency_sweep(&model, &cfg, &DEFAULT_LATENCIES, 2).unwrap();
    assert_eq!(lat.len(), DEFAULT_LATENCIES.len());
    let no_latency = ChannelConfig {
        max_latency: 0,
        ..cfg.channel
    };
    assert_eq!(lat[0], evaluate(&model, &cfg, &no_latency, 2).unwrap());
    for (r, l) in lat.iter().zip(DEFAULT_LATENCIES) {
        assert_eq!(r.max_latency, l);
    }

    let drops = history_loss_sweep(&model, &cfg, &DEFAULT_DROP_RATES, 2).unwrap();
    assert_eq!(drops.len(), DEFAULT_DROP_RATES.len());
    let plain = ChannelConfig {
        drop_p: 0.0,
        ..cfg.channel
    };
    assert_eq!(drops[0], evaluate(&model, &cfg, &plain, 2).unwrap());

    let noise = noise_sweep(&model, &cfg, &[0.0, 0.4], 2).unwrap();
    assert_eq!(noise[1].loc_sigma, 0.4);
    assert!((noise[1].head_sigma - 0.4).abs() < 1e-12);
    assert_eq!(noise[0].max_latency, 0);
}

#[test]
fn retention_sweep_has_one_row_per_ratio() {
    let mut cfg = small_config();
    cfg.training.steps = 1;
    cfg.evaluation.scenarios = 1;
    let rows = retention_sweep(&cfg, &DEFAULT_RETENTIONS).unwrap();
    assert_eq!(rows.len(), 6);
    for (r, k) in rows.iter().zip(DEFAULT_RETENTIONS) {
        assert_eq!(r.retention, k);
        assert_eq!(r.seed, cfg.training.seed);
    }
}

#[test]
fn metrics_csv_matches_golden_file() {
    let cfg = small_config();
    let model = Model::new(&cfg, 42).unwrap();
    let records = vec![
        evaluate(&model, &cfg, &cfg.channel, 42).unwrap(),
        evaluate(
            &model,
            &cfg,
            &ChannelConfig {
                drop_p: 1.0,
                ..cfg.channel
            },
            42,
        )
        .unwrap(),
    ];
    let mut out = Vec::new();
    write_metrics_csv(&records, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, METRIC_COLUMNS.join(","));
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/metrics.csv");
    if std::env::var_os("COFUSE_BLESS").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&path).unwrap());
}

#[test]
fn loss_curve_csv_has_one_row_per_step() {
    let cfg = small_config();
    let report = train(&cfg).unwrap();
    let mut out = Vec::new();
    report.write_loss_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), cfg.training.steps + 1);
    assert!(text.starts_with("step,loss\n"));
}
