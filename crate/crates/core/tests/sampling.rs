use sharpscore::gmm::{GaussianMixture, MixtureSpec, OracleModel};
use sharpscore::sampler::{sample_batch, BatchOptions, RecordOptions, Vanilla};
use sharpscore::schedule::{NoiseSchedule, ScheduleKind};
use sharpscore::sharpening::{EstimatorMode, Gate, Sharpened, SharpeningConfig};

fn sharpened(gm: &GaussianMixture, sched: &NoiseSchedule, estimator: EstimatorMode) -> Sharpened<OracleModel> {
    let cfg = SharpeningConfig {
        alpha: 0.01,
        delta: 0.1,
        gate: Gate::Threshold { t_threshold: 50 },
        hutchinson_samples: 2,
        estimator,
        seed: 0,
    };
    Sharpened::new(OracleModel::new(gm, sched), cfg).unwrap()
}

#[test]
fn samples_do_not_depend_on_block_size_or_threads() {
    let gm = MixtureSpec::toy2d().build().unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 100).unwrap();
    let model = sharpened(&gm, &sched, EstimatorMode::Hutchinson);
    let run = |threads: usize, block_size: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let opts = BatchOptions {
                block_size,
                first_chain: 0,
            };
            sample_batch(&model, &sched, 50, 11, &RecordOptions::default(), opts)
                .unwrap()
                .samples()
        })
    };
    let reference = run(1, 256);
    assert_eq!(reference, run(4, 7));
    assert_eq!(reference, run(3, 1));
}

#[test]
fn chain_offset_reproduces_a_single_chain() {
    let gm = MixtureSpec::toy1d().build().unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 100).unwrap();
    let model = sharpened(&gm, &sched, EstimatorMode::Fd1d);
    let all = sample_batch(&model, &sched, 20, 5, &RecordOptions::default(), BatchOptions::default()).unwrap();
    let one = sample_batch(
        &model,
        &sched,
        1,
        5,
        &RecordOptions::default(),
        BatchOptions {
            block_size: 256,
            first_chain: 13,
        },
    )
    .unwrap();
    assert_eq!(all.trajectories[13].sample, one.trajectories[0].sample);
}

#[test]
fn oracle_sampler_recovers_a_gaussian() {
    let (mu, sigma) = (1.0, 0.5);
    let gm = GaussianMixture::new(vec![1.0], vec![vec![mu]], vec![sigma * sigma]).unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
    let n = 10_000;
    let xs = sample_batch(
        &Vanilla(OracleModel::new(&gm, &sched)),
        &sched,
        n,
        3,
        &RecordOptions::default(),
        BatchOptions::default(),
    )
    .unwrap()
    .samples();
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    let se_mean = sigma / nf.sqrt();
    let se_var = sigma * sigma * (2.0 / (nf - 1.0)).sqrt();
    assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var - sigma * sigma).abs() < 3.0 * se_var, "variance {var}");
}
