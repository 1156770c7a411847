use diffcore::graph::{Graph, Var};
use diffcore::rng::{indexed_stream, uniform_tensor, Rng};
use diffcore::{check_gradients, AdamW, Checkpoint, DiffError, GradCheckConfig, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

type Build = fn(&mut Graph<f64>, Var, Var, usize, usize) -> Result<Var, DiffError>;

/// Each primitive under test, applied to parameters `x` ([m, n]) and `y` (shape per op).
fn primitives() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul", |g, x, y, _, _| {
            let yt = g.transpose(y);
            g.matmul(x, yt)
        }),
        ("matmul_t", |g, x, y, _, _| g.matmul_t(x, y)),
        ("transpose", |g, x, _, _, _| Ok(g.transpose(x))),
        ("add", |g, x, y, _, _| g.add(x, y)),
        ("sub", |g, x, y, _, _| g.sub(x, y)),
        ("mul", |g, x, y, _, _| g.mul(x, y)),
        ("add_row", |g, x, y, _, _| {
            let r = g.slice_rows(y, 0, 1)?;
            g.add_row(x, r)
        }),
        ("mul_row", |g, x, y, _, _| {
            let r = g.slice_rows(y, 0, 1)?;
            g.mul_row(x, r)
        }),
        ("scale", |g, x, _, _, _| Ok(g.scale(x, -1.7))),
        ("softmax", |g, x, _, _, _| Ok(g.softmax(x))),
        ("log_sum_exp", |g, x, _, _, _| Ok(g.log_sum_exp(x))),
        ("layer_norm", |g, x, _, _, n| {
            if n < 2 {
                return Ok(g.scale(x, 1.0));
            }
            Ok(g.layer_norm(x, 1e-5))
        }),
        ("gelu", |g, x, _, _, _| Ok(g.gelu(x))),
        ("relu", |g, x, _, _, _| Ok(g.relu(x))),
        ("tanh", |g, x, _, _, _| Ok(g.tanh(x))),
        ("exp", |g, x, _, _, _| Ok(g.exp(x))),
        ("log", |g, x, _, _, _| {
            let p = g.exp(x);
            Ok(g.log(p))
        }),
        ("sqrt_eps", |g, x, _, _, _| {
            let p = g.exp(x);
            Ok(g.sqrt_eps(p, 1e-9))
        }),
        ("square", |g, x, _, _, _| Ok(g.square(x))),
        ("mean_rows", |g, x, _, _, _| Ok(g.mean_rows(x))),
        ("sum", |g, x, _, _, _| Ok(g.sum(x))),
        ("mean", |g, x, _, _, _| Ok(g.mean(x))),
        ("concat_cols", |g, x, y, _, _| g.concat_cols(&[x, y, x])),
        ("concat_rows", |g, x, y, _, _| g.concat_rows(&[y, x])),
        ("slice_cols", |g, x, _, _, n| g.slice_cols(x, n / 2, n - n / 2)),
        ("slice_rows", |g, x, _, m, _| g.slice_rows(x, m / 2, m - m / 2)),
        ("l2_normalize", |g, x, _, _, _| g.l2_normalize(x)),
        ("angular_margin", |g, x, _, _, n| {
            let row = g.slice_rows(x, 0, 1)?;
            let t = g.tanh(row);
            let c = g.scale(t, 0.9);
            g.angular_margin(c, n - 1, 0.3)
        }),
        ("pick", |g, x, _, m, n| g.pick(x, m * n - 1)),
        ("cosine_similarity", |g, x, y, _, _| g.cosine_similarity(x, y)),
        ("std_rows", |g, x, _, _, _| g.std_rows(x, 1e-9)),
    ]
}

fn random_instance(rng: &mut Rng) -> (usize, usize, ParamStore<f64>) {
    let m = rng.random_range(1..=4);
    let n = rng.random_range(1..=5);
    let mut store = ParamStore::new();
    store.insert("x", uniform_tensor(&[m, n], 1.0, rng)).unwrap();
    store.insert("y", uniform_tensor(&[m, n], 1.0, rng)).unwrap();
    (m, n, store)
}

#[test]
fn every_primitive_matches_central_differences() {
    let cfg = GradCheckConfig::default();
    for (name, op) in primitives() {
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let mut rng = indexed_stream(11, name, trial);
            let (m, n, store) = random_instance(&mut rng);
            let wrng = indexed_stream(12, name, trial);
            let report = check_gradients::<DiffError, _>(&store, cfg, |g, s| {
                let x = g.param(s, "x")?;
                let y = g.param(s, "y")?;
                let out = op(g, x, y, m, n)?;
                // Weighting by a fixed random tensor keeps gradients non-trivial.
                let (r, c) = g.value(out).dims2();
                let w = g.constant(uniform_tensor(&[r, c], 1.0, &mut wrng.clone()));
                let prod = g.mul(out, w)?;
                Ok(g.sum(prod))
            })
            .unwrap();
            worst = worst.max(report.max_rel_error);
            assert!(
                report.passes(1e-4),
                "{name} trial {trial}: rel err {} at {}[{}] analytic {} numeric {}",
                report.max_rel_error,
                report.worst_param,
                report.worst_index,
                report.analytic,
                report.numeric
            );
        }
        eprintln!("{name}: worst rel err {worst:.2e}");
    }
}

#[test]
fn frozen_parameters_never_get_gradients() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::<f64>::full(&[2, 2], 0.5)).unwrap();
    store.insert("b", Tensor::<f64>::full(&[2], 0.1)).unwrap();
    store.freeze("w").unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let b = g.param(&store, "b").unwrap();
    let x = g.constant(Tensor::full(&[3, 2], 1.0));
    let h = g.matmul_t(x, w).unwrap();
    let h = g.add_row(h, b).unwrap();
    let loss = g.sum(h);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get("w").is_none());
    assert_eq!(grads.get("b").unwrap().data(), &[3.0, 3.0]);
}

fn trajectory(seed: u64) -> ParamStore<f32> {
    let mut rng = indexed_stream(seed, "init", 0);
    let mut store = ParamStore::new();
    store.insert("w", uniform_tensor::<f32>(&[4, 3], 0.5, &mut rng)).unwrap();
    let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.01);
    for step in 0..20 {
        let mut drng = indexed_stream(seed, "data", step);
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.constant(uniform_tensor(&[5, 3], 1.0, &mut drng));
        let h = g.matmul_t(x, w).unwrap();
        let h = g.gelu(h);
        let sm = g.softmax(h);
        let loss = g.mean(sm);
        let sq = g.square(loss);
        let grads = g.backward(sq).unwrap();
        opt.step(&mut store, &grads, 1e-2).unwrap();
    }
    store
}

#[test]
fn identical_seeds_give_bit_identical_trajectories() {
    let a = trajectory(5);
    let b = trajectory(5);
    let c = trajectory(6);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #[test]
    fn checkpoint_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 1..40), frozen: bool, step: u64) {
        let n = values.len();
        let mut ck = Checkpoint::new(diffcore::DType::F64);
        ck.step = step;
        ck.push("layer.0.query.weight", Tensor::new(&[n], values.clone()).unwrap(), frozen);
        ck.attrs.insert("note".into(), serde_json::json!("x"));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn f32_checkpoints_are_exact_for_f32_data(values in proptest::collection::vec(-1e3f32..1e3, 1..40)) {
        let store = {
            let mut s = ParamStore::<f32>::new();
            s.insert("p", Tensor::new(&[values.len()], values.clone()).unwrap()).unwrap();
            s
        };
        let ck = Checkpoint::from_store(&store, 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let restored: ParamStore<f32> = back.to_store(|_| true).unwrap();
        prop_assert_eq!(restored, store);
    }
}
