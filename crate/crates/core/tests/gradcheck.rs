#[path = "support/compose.rs"]
mod compose;

use cglab_core::autodiff::{Graph, RngState, Tensor};
use cglab_core::inference::objective;
use cglab_core::model::{ModelBundle, ModelConfig};
use cglab_core::tasks::{make_split, TaskConfig, TaskInstance};
use cglab_core::training::{build_store, total_loss};
use compose::{finite_differences, max_relative_error, Composition};

#[test]
fn random_compositions_match_finite_differences() {
    for seed in 0..20 {
        let c = Composition::generate(seed);
        assert!(c.num_params() <= 200);
        let numeric = finite_differences(|l| c.loss_at(l), &c.leaves);
        let err = max_relative_error(&c.reverse_mode(), &numeric);
        assert!(err < 1e-5, "seed {seed}: relative error {err}");
    }
}

fn small_task() -> (TaskInstance, ModelBundle) {
    let cfg = TaskConfig {
        cardinalities: vec![3, 2],
        samples_per_combo: 2,
        ..TaskConfig::default()
    };
    let task = TaskInstance::generate(&cfg).unwrap();
    let mut mc = ModelConfig::for_task(&task);
    mc.d_h = 2;
    mc.width = 3;
    mc.head_width = 3;
    (task, ModelBundle::init(mc, 4).unwrap())
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    let (task, bundle) = small_task();
    let split = make_split(&task.spec, 0.34, 0).unwrap();
    let samples = task.train_samples(&split).unwrap();
    let refs: Vec<_> = samples.iter().take(4).collect();
    let loss_of = |tensors: &[Tensor]| {
        let mut b = bundle.clone();
        for (p, t) in b.tensors_mut().zip(tensors) {
            p.values_mut().copy_from_slice(t.values());
        }
        let mut g = Graph::new();
        let vars = b.bind(&mut g);
        let (loss, _) =
            total_loss(&b, &mut g, &vars, &refs, 0.7, true, &mut RngState::new(9)).unwrap();
        g.value(loss).item().unwrap()
    };
    let leaves: Vec<Tensor> = bundle.params().iter().map(|p| p.tensor.clone()).collect();
    let numeric = finite_differences(loss_of, &leaves);

    let mut g = Graph::new();
    let vars = bundle.bind(&mut g);
    let (loss, _) = total_loss(
        &bundle,
        &mut g,
        &vars,
        &refs,
        0.7,
        true,
        &mut RngState::new(9),
    )
    .unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn inference_objective_gradient_matches_finite_differences() {
    let (task, bundle) = small_task();
    let split = make_split(&task.spec, 0.34, 0).unwrap();
    let store = build_store(&bundle, &task, &split, 64, 0).unwrap();
    let x = task.test_samples(&split).unwrap()[0].x.clone();
    let mut rng = RngState::new(2);
    let hidden: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..2).map(|_| rng.normal()).collect())
        .collect();
    let (_, grads) = objective(&bundle, &hidden, &x, &store, 0.3).unwrap();
    let leaves: Vec<Tensor> = hidden
        .iter()
        .map(|h| Tensor::vector(h.clone()).unwrap())
        .collect();
    let numeric = finite_differences(
        |l| {
            let h: Vec<Vec<f64>> = l.iter().map(|t| t.values().to_vec()).collect();
            objective(&bundle, &h, &x, &store, 0.3).unwrap().0.value
        },
        &leaves,
    );
    let err = max_relative_error(&grads, &numeric);
    assert!(err < 1e-5, "relative error {err}");
}
