use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sharpscore::denoiser::{ArchSpec, DenoiserNet};

/// Central differences on 20 random coordinates against the analytic gradient.
fn gradient_check(spec: ArchSpec, rows: usize, seed: u64) {
    let mut net = DenoiserNet::new(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // Move away from the zero output layer so every path carries gradient.
    for p in net.params_mut() {
        *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    let dim = net.spec().dim();
    let xs: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    let eps: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(0..1000)).collect();
    let (_, grad) = net.loss_and_grad(&xs, &ts, &eps);

    let h = 1e-5;
    for _ in 0..20 {
        let i = rng.random_range(0..net.param_count());
        let p0 = net.params()[i];
        net.params_mut()[i] = p0 + h;
        let up = net.loss(&xs, &ts, &eps);
        net.params_mut()[i] = p0 - h;
        let down = net.loss(&xs, &ts, &eps);
        net.params_mut()[i] = p0;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        assert!(
            (grad[i] - fd).abs() <= 1e-4 * scale + 1e-9,
            "param {i}: analytic {} vs numeric {fd}",
            grad[i]
        );
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    gradient_check(ArchSpec::mlp(2), 5, 3);
    gradient_check(
        ArchSpec::Mlp {
            dim: 1,
            hidden: vec![16, 8],
            time_embed_dim: 8,
        },
        4,
        4,
    );
}

#[test]
fn conv_gradient_matches_finite_differences() {
    gradient_check(
        ArchSpec::Conv {
            height: 8,
            width: 8,
            channels: [4, 6],
            time_embed_dim: 8,
        },
        3,
        5,
    );
}
