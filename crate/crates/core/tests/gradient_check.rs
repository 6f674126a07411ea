use memto::data::{generate_synthetic, window, SyntheticSpec, WindowMode};
use memto::graph::Mat;
use memto::model::{Memto, ModelConfig};
use memto::train::{batch_gradients, LossMode, TrainConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tiny() -> ModelConfig {
    ModelConfig {
        window_len: 8,
        channels: 3,
        latent_dim: 4,
        enc_layers: 1,
        enc_heads: 2,
        dec_layers: 2,
        memory_items: 2,
        tau: 0.1,
        dropout: 0.0,
    }
}

fn windows() -> Vec<Mat> {
    let spec = SyntheticSpec {
        train_len: 64,
        test_len: 16,
        channels: 3,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    window(&data.train, 8, WindowMode::Train).unwrap().windows[..2].to_vec()
}

// The floor keeps gradients that are exactly zero analytically (key biases
// under softmax shift invariance) from dividing finite-difference noise by ~0.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-5)
}

fn run(mode: LossMode) {
    let xs = windows();
    let batch: Vec<&Mat> = xs.iter().collect();
    let cfg = TrainConfig {
        lambda: 0.5,
        loss_mode: mode,
        ..TrainConfig::default()
    };
    let model = Memto::new(tiny(), 11).unwrap();
    let analytic = batch_gradients(&model, &batch, &cfg, None).unwrap();

    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for p in 0..model.params().len() {
        let name = model.params().names()[p].clone();
        let shape = model.params().values()[p].dim();
        let grad = analytic.grads[p]
            .clone()
            .unwrap_or_else(|| Mat::zeros(shape));
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().values_mut()[p][[r, c]] += delta;
                batch_gradients(&m, &batch, &cfg, None).unwrap().total
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let e = rel_err(grad[[r, c]], numeric);
            if e > worst.0 {
                worst = (
                    e,
                    format!(
                        "{name}[{r},{c}] analytic {} numeric {numeric}",
                        grad[[r, c]]
                    ),
                );
            }
            checked += 1;
        }
    }
    assert!(checked > 100);
    assert!(
        worst.0 < TOL,
        "max relative error {:.3e} at {}",
        worst.0,
        worst.1
    );
}

#[test]
fn objective_gradients_match_finite_differences() {
    run(LossMode::Both);
}

#[test]
fn entropy_only_gradients_match_finite_differences() {
    run(LossMode::Entr);
}
