//! Finite-difference checks of the loss gradient through the magnitude solve.

use magvec::learn::{loss, loss_value, Architecture, EmbeddingModel, LossInput};
use magvec::{BaseMetric, DigitalImage, MetricSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Largest relative error over `directions` random unit directions.
fn worst_relative_error(arch: Architecture, base: BaseMetric, seed: u64, directions: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = DigitalImage::new(6, 6, 3, (0..108).map(|_| rng.random()).collect()).unwrap();
    let labels: Vec<f64> = (0..36).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let mut model = EmbeddingModel::new(arch, 3, seed).unwrap();
    let params: Vec<f64> = model.params().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    model.set_params(&params).unwrap();
    let spec = MetricSpec::default().with_base(base);
    let input = LossInput {
        patch: &img,
        labels: &labels,
        spec: &spec,
        lambda: 1.0,
        margin: 0,
    };
    let (_, grad) = loss(&model, &input).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut dir: Vec<f64> = params.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let at = |t: f64| {
            let mut m = model.clone();
            let p: Vec<f64> = params.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            m.set_params(&p).unwrap();
            loss_value(&m, &input).unwrap().total
        };
        let fd = (at(H) - at(-H)) / (2.0 * H);
        let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-12));
    }
    worst
}

#[test]
fn model_i_gradient() {
    let e = worst_relative_error(Architecture::ModelI, BaseMetric::L1, 1, 20);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn model_ii_gradient() {
    let e = worst_relative_error(Architecture::ModelII, BaseMetric::L1, 2, 20);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn model_iii_gradient() {
    let e = worst_relative_error(Architecture::ModelIII, BaseMetric::L1, 3, 20);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn l2_latent_gradient() {
    let e = worst_relative_error(Architecture::ModelII, BaseMetric::L2, 4, 20);
    assert!(e < 1e-4, "{e}");
}
