//! Analytic gradients of every layer kind against central differences.

use comix_nn::gradcheck::{check_sampled, check_sampled_smooth};
use comix_nn::{
    Activation, BiGru, Graph, Gru, LayerNorm, LayerSpec, Linear, Matrix, NnError, ParamStore, Var, Weights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 100;
const TOLERANCE: f64 = 1e-4;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Weighted sum `Σ c ⊙ y`, so that no output's gradient cancels by symmetry.
fn project(g: &mut Graph, y: Var, c: &Matrix) -> Var {
    let cv = g.constant(c.clone());
    let p = g.mul(y, cv).unwrap();
    g.sum(p)
}

fn run_check(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Graph, &Weights<'_>) -> Result<Var, NnError>,
) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, &Weights::train(store)).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = |id| {
        grads
            .get(store, id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(store.get(id).raw_dim()))
    };
    let analytic: Vec<Matrix> = store.ids().map(analytic).collect();
    let check = check_sampled(store, &|id| analytic[id.index()].clone(), 6, rng, |s| {
        let mut g = Graph::new();
        let loss = build(&mut g, &Weights::fixed(s)).unwrap();
        g.scalar(loss)
    });
    check.relative_error()
}

fn assert_all_pass(name: &str, errors: &[f64]) {
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    assert!(
        errors.iter().all(|&e| e < TOLERANCE),
        "{name}: worst relative error {worst:e}"
    );
}

#[test]
fn linear_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut errors = Vec::new();
    for _ in 0..INSTANCES {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", LayerSpec::linear(6, 5, Activation::Relu), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 3, 6);
        let c = random_matrix(&mut rng, 3, 5);
        errors.push(run_check(&mut store, &mut rng, |g, w| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, w, xv)?;
            Ok(project(g, y, &c))
        }));
    }
    assert_all_pass("linear", &errors);
}

#[test]
fn sigmoid_linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut errors = Vec::new();
    for _ in 0..INSTANCES {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", LayerSpec::linear(4, 3, Activation::Sigmoid), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 2, 4);
        let c = random_matrix(&mut rng, 2, 3);
        errors.push(run_check(&mut store, &mut rng, |g, w| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, w, xv)?;
            Ok(project(g, y, &c))
        }));
    }
    assert_all_pass("sigmoid linear", &errors);
}

#[test]
fn gru_single_step_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut errors = Vec::new();
    for _ in 0..INSTANCES {
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 5, 4, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 2, 5);
        let h = random_matrix(&mut rng, 2, 4);
        let c = random_matrix(&mut rng, 2, 4);
        errors.push(run_check(&mut store, &mut rng, |g, w| {
            let xv = g.constant(x.clone());
            let hv = g.constant(h.clone());
            let y = gru.step(g, w, xv, hv)?;
            Ok(project(g, y, &c))
        }));
    }
    assert_all_pass("gru", &errors);
}

#[test]
fn bigru_sequence_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut errors = Vec::new();
    for _ in 0..INSTANCES {
        let mut store = ParamStore::new();
        let bi = BiGru::new(&mut store, "b", 3, 4, &mut rng).unwrap();
        let xs: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 2, 3)).collect();
        let cs: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 2, 8)).collect();
        errors.push(run_check(&mut store, &mut rng, |g, w| {
            let seq: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let out = bi.forward(g, w, &seq)?;
            let parts: Vec<Var> = out.iter().zip(&cs).map(|(&y, c)| project(g, y, c)).collect();
            let all = g.concat_cols(&parts)?;
            Ok(g.sum(all))
        }));
    }
    assert_all_pass("bigru", &errors);
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut errors = Vec::new();
    for _ in 0..INSTANCES {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", LayerSpec::linear(3, 6, Activation::None), &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 6).unwrap();
        store.map_values(|name, v| {
            if name.starts_with("ln") {
                v.mapv_inplace(|x| x + 0.3);
            }
        });
        let x = random_matrix(&mut rng, 3, 3);
        let c = random_matrix(&mut rng, 3, 6);
        errors.push(run_check(&mut store, &mut rng, |g, w| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, w, xv)?;
            let y = ln.forward(g, w, y)?;
            Ok(project(g, y, &c))
        }));
    }
    assert_all_pass("layer norm", &errors);
}

#[test]
fn structural_op_gradients() {
    // softmax, row max, pick, abs, batched vec-mat, block matmul and reshape in one graph
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut errors = Vec::new();
    for _ in 0..INSTANCES {
        let mut store = ParamStore::new();
        let a = store.add("a", random_matrix(&mut rng, 4, 3));
        let b = store.add("b", random_matrix(&mut rng, 4, 6));
        let e = store.add("e", random_matrix(&mut rng, 6, 2));
        let picks: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let c = random_matrix(&mut rng, 2, 4);
        errors.push(run_check(&mut store, &mut rng, |g, w| {
            let av = g.weight(w, a);
            let bv = g.weight(w, b);
            let ev = g.weight(w, e);
            let sm = g.softmax_rows(av);
            let mx = g.row_max(av);
            let pk = g.pick(sm, picks.clone())?;
            let babs = g.abs(bv);
            let q = g.slice_cols(av, 0, 2)?;
            let bvm = g.batched_vecmat(q, babs)?; // 4 x 3
            let blk = g.block_matmul(bvm, ev, 2)?; // 4 x 2
            let flat = g.reshape(blk, 2, 4)?;
            let y = project(g, flat, &c);
            let s1 = g.sum(mx);
            let s2 = g.sum(pk);
            let t = g.add(y, s1)?;
            Ok(g.add(t, s2)?)
        }));
    }
    assert_all_pass("structural ops", &errors);
}

#[test]
fn smooth_sampling_redraws_coordinates_at_a_kink() {
    // max(0, w) with the first entry just inside one step of the kink.
    let mut store = ParamStore::new();
    store.add("w", Matrix::from_shape_vec((1, 2), vec![3e-5, 0.7]).unwrap());
    let loss = |s: &ParamStore| s.ids().map(|id| s.get(id).iter().map(|x| x.max(0.0)).sum::<f64>()).sum();
    let analytic = |_| Matrix::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plain = check_sampled(&mut store.clone(), &analytic, 8, &mut rng, loss);
    assert!(plain.probes.iter().any(|p| p.col == 0));
    assert!(plain.relative_error() > 1e-2);
    let smooth = check_sampled_smooth(&mut store, &analytic, 2, &mut rng, loss);
    assert!(smooth.skipped > 0);
    assert_eq!(smooth.probes.len(), 2);
    assert!(smooth.probes.iter().all(|p| p.col == 1));
    assert!(smooth.relative_error() < 1e-9);
}
