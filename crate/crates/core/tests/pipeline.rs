use std::collections::BTreeMap;
use std::path::Path;

use s2lab::experiments::{cmd_repro, ReproTarget};
use s2lab::gmm::{GaussianMixture, OracleDenoiser};
use s2lab::guidance::GuidanceSpec;
use s2lab::metrics::wasserstein1_to_gmm;
use s2lab::num::Rng;
use s2lab::sampler::{run_sampling, Predictors, SampleBatch, SamplingMode, SamplingRequest};
use s2lab::schedule::{NoiseSchedule, ScheduleConfig};

fn tiny(target: ReproTarget) -> s2lab::config::ExperimentConfig {
    let mut cfg = target.config();
    cfg.model.hidden = 8;
    cfg.model.blocks = 3;
    cfg.train.steps = 30;
    cfg.train.batch_size = 32;
    cfg.train.log_every = 10;
    cfg.schedule.steps = 40;
    cfg.sampling.n_per_class = 24;
    cfg
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "csv" || e == "svg"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn oracle_sampling_recovers_the_mixture() {
    let gmm = GaussianMixture::toy_1d();
    let sched = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
    let oracle = OracleDenoiser::new(gmm.clone(), sched.clone());
    let mut parts = Vec::new();
    for class in 0..2 {
        let req = SamplingRequest {
            n: 2000,
            class,
            mode: SamplingMode::Ancestral,
            record: false,
        };
        let out = run_sampling(Predictors::main(&oracle), &sched, &GuidanceSpec::unguided(), req, &Rng::new(class as u64)).unwrap();
        parts.push(out.batch);
    }
    let all = SampleBatch::concat(&parts, String::new()).unwrap();
    let w1 = wasserstein1_to_gmm(&all, &gmm).unwrap();
    assert!(w1 < 0.08, "W1 {w1}");
}

#[test]
fn deterministic_oracle_flow_hits_the_analytic_endpoint() {
    let sched = NoiseSchedule::new(ScheduleConfig {
        steps: 10_000,
        ..ScheduleConfig::default()
    })
    .unwrap();
    let (mu, var) = (-2.0, 1.0);
    let oracle = OracleDenoiser::new(GaussianMixture::isotropic(&[vec![mu]], var).unwrap(), sched.clone());
    let req = SamplingRequest {
        n: 16,
        class: 0,
        mode: SamplingMode::Deterministic,
        record: true,
    };
    let out = run_sampling(Predictors::main(&oracle), &sched, &GuidanceSpec::unguided(), req, &Rng::new(4)).unwrap();
    let start = &out.trajectory.unwrap().states[0];
    let ab = sched.alpha_bar(sched.steps());
    for (xt, x0) in start.iter().zip(out.batch.points()) {
        let want = mu + var.sqrt() * (xt - ab.sqrt() * mu) / (ab * var + 1.0 - ab).sqrt();
        assert!((want - x0).abs() < 1e-3, "{want} vs {x0}");
    }
}

#[test]
fn repro_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for target in [ReproTarget::Fig8Traj, ReproTarget::Fig9NaiveVsS2] {
        let cfg = tiny(target);
        let a = dir.path().join(format!("{}_a", target.name()));
        let b = dir.path().join(format!("{}_b", target.name()));
        cmd_repro(target, &cfg, &a, &dir.path().join("cache_a")).unwrap();
        cmd_repro(target, &cfg, &b, &dir.path().join("cache_b")).unwrap();
        let (fa, fb) = (artifacts(&a), artifacts(&b));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{}", target.name());
    }
}

#[test]
fn fig9_writes_six_scatter_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ReproTarget::Fig9NaiveVsS2);
    let out = dir.path().join("fig9");
    let m = cmd_repro(ReproTarget::Fig9NaiveVsS2, &cfg, &out, &dir.path().join("cache")).unwrap();
    let svgs: Vec<&String> = m.outputs.keys().filter(|k| k.ends_with(".svg")).collect();
    assert_eq!(svgs.len(), 6, "{svgs:?}");
    assert_eq!(m.metrics.len(), 6);
    assert!(m.metrics.values().all(|r| r.sliced_w.is_some()));
}

#[test]
fn fig8_trajectories_cover_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ReproTarget::Fig8Traj);
    let out = dir.path().join("fig8");
    cmd_repro(ReproTarget::Fig8Traj, &cfg, &out, &dir.path().join("cache")).unwrap();
    let (dim, rows) = s2lab::sampler::read_trajectory_csv(&out.join("trajectories_s2.csv")).unwrap();
    assert_eq!(dim, 1);
    let chains = cfg.sampling.trajectory_chains.min(cfg.sampling.n_per_class);
    assert_eq!(rows.len(), chains * (cfg.schedule.steps + 1));
    let svg = std::fs::read_to_string(out.join("fig8_traj.svg")).unwrap();
    assert_eq!(svg.matches("class=\"traj\"").count(), 3 * chains);
}
