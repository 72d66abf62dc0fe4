use mscdt::evaluation::{gen_phantom, PhantomSpec};
use mscdt::latent_prior::{
    extract_condition, extract_msp, modulate, Lpeb, LpebConfig, Modulation, DEFAULT_LATENT_DIM,
    NORM_EPS,
};
use mscdt::numerics::{grad_check, rng, GradCheckOptions, Graph, Linear, ParamStore, Tensor};
use mscdt::texture::texture_condition;
use rand::Rng;

fn lpeb(store: &mut ParamStore<f64>, name: &str, d: usize, heads: usize, seed: u64) -> Lpeb {
    let cfg = LpebConfig {
        width: 8,
        res_blocks: 2,
        latent_dim: d,
    };
    Lpeb::new(store, name, &cfg, heads, &mut rng::stream(seed, 0)).unwrap()
}

fn zero_heads(store: &mut ParamStore<f64>, l: &Lpeb) {
    for h in l.heads() {
        for id in [h.w, h.b.unwrap()] {
            store
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn prior_has_default_shape() {
    let p = gen_phantom(1, &PhantomSpec::default()).unwrap();
    let mut store = ParamStore::new();
    let l = lpeb(&mut store, "msp", DEFAULT_LATENT_DIM, 2, 0);
    let prior = extract_msp(&l, &store, &p.dual, &p.singles).unwrap();
    assert_eq!((prior.d(), prior.n()), (256, 2));
    assert_eq!(LpebConfig::default().latent_dim, 256);
}

#[test]
fn zero_heads_give_zero_prior_and_condition() {
    let p = gen_phantom(2, &PhantomSpec::default()).unwrap();
    let mut store = ParamStore::new();
    let msp = lpeb(&mut store, "msp", 16, 2, 0);
    let cond = lpeb(&mut store, "cond", 16, 1, 1);
    zero_heads(&mut store, &msp);
    zero_heads(&mut store, &cond);
    let prior = extract_msp(&msp, &store, &p.dual, &p.singles).unwrap();
    assert!(prior.flat().iter().all(|&v| v == 0.0));
    let (_, u) = texture_condition(&p.dual, 180).unwrap();
    let c = extract_condition(&cond, &store, &p.dual, &u).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn extraction_is_deterministic() {
    let p = gen_phantom(3, &PhantomSpec::default()).unwrap();
    let build = || {
        let mut store = ParamStore::new();
        let l = lpeb(&mut store, "msp", 16, 2, 7);
        extract_msp(&l, &store, &p.dual, &p.singles).unwrap()
    };
    assert_eq!(build(), build());
}

#[test]
fn condition_depends_on_texture_threshold() {
    let p = gen_phantom(4, &PhantomSpec::default()).unwrap();
    let mut store = ParamStore::new();
    let cond = lpeb(&mut store, "cond", 16, 1, 2);
    let (_, u0) = texture_condition(&p.dual, 0).unwrap();
    let (_, u180) = texture_condition(&p.dual, 180).unwrap();
    let a = extract_condition(&cond, &store, &p.dual, &u0).unwrap();
    let b = extract_condition(&cond, &store, &p.dual, &u180).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn rejects_mismatched_inputs() {
    let p = gen_phantom(5, &PhantomSpec::default()).unwrap();
    let mut store = ParamStore::new();
    let l = lpeb(&mut store, "msp", 8, 2, 0);
    assert!(extract_msp(&l, &store, &p.dual, &p.singles[..1]).is_err());
    let odd = mscdt::Image::zeros(31, 31);
    assert!(extract_msp(&l, &store, &odd, &[odd.clone(), odd.clone()]).is_err());
}

#[test]
fn columns_follow_tracer_order() {
    let p = gen_phantom(6, &PhantomSpec::default()).unwrap();
    let mut store = ParamStore::new();
    let l = lpeb(&mut store, "msp", 8, 2, 3);
    // Tie the heads so that any column difference comes from its own input only.
    let (h0, h1) = (l.heads()[0], l.heads()[1]);
    for (a, b) in [(h0.w, h1.w), (h0.b.unwrap(), h1.b.unwrap())] {
        let v = store.get(a).value.clone();
        store.get_mut(b).value = v;
    }
    let fwd = extract_msp(&l, &store, &p.dual, &p.singles).unwrap();
    let swapped = [p.singles[1].clone(), p.singles[0].clone()];
    let rev = extract_msp(&l, &store, &p.dual, &swapped).unwrap();
    assert_eq!(fwd.column(0), rev.column(1));
    assert_eq!(fwd.column(1), rev.column(0));

    // Untied heads: changing tracer 1's image leaves column 0 untouched.
    let mut store2 = ParamStore::new();
    let l2 = lpeb(&mut store2, "msp", 8, 2, 4);
    let a = extract_msp(&l2, &store2, &p.dual, &p.singles).unwrap();
    let b = extract_msp(
        &l2,
        &store2,
        &p.dual,
        &[p.singles[0].clone(), p.dual.clone()],
    )
    .unwrap();
    assert_eq!(a.column(0), b.column(0));
    assert_ne!(a.column(1), b.column(1));
}

struct ModCase {
    store: ParamStore<f64>,
    m: mscdt::numerics::ParamId,
    l: mscdt::numerics::ParamId,
    modulation: Modulation,
}

fn mod_case(seed: u64, h: usize, w: usize, c: usize, ll: usize) -> ModCase {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, 0);
    let modulation = Modulation::new(&mut store, "mod", ll, c, &mut r).unwrap();
    // Perturb biases away from the identity start.
    for id in [
        modulation.scale.w,
        modulation.shift.w,
        modulation.scale.b.unwrap(),
        modulation.shift.b.unwrap(),
    ] {
        for v in store.get_mut(id).value.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    let m = store
        .add("m", rng::normal_tensor(&mut r, &[h, w, c]))
        .unwrap();
    let l = store.add("l", rng::normal_tensor(&mut r, &[ll])).unwrap();
    ModCase {
        store,
        m,
        l,
        modulation,
    }
}

fn run_modulate(case: &ModCase) -> Tensor<f64> {
    let mut g = Graph::new();
    let m = g.param(&case.store, case.m).unwrap();
    let l = g.param(&case.store, case.l).unwrap();
    let y = case.modulation.forward(&mut g, &case.store, m, l).unwrap();
    g.value(y).clone()
}

fn set(store: &mut ParamStore<f64>, lin: &Linear, w: f64, b: f64) {
    store
        .get_mut(lin.w)
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = w);
    store
        .get_mut(lin.b.unwrap())
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = b);
}

fn norm_oracle(m: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in m.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + NORM_EPS).sqrt()));
    }
    out
}

#[test]
fn modulation_reduces_to_normalization() {
    let mut case = mod_case(1, 3, 4, 5, 6);
    let (s, h) = (case.modulation.scale, case.modulation.shift);
    set(&mut case.store, &s, 0.0, 1.0);
    set(&mut case.store, &h, 0.0, 0.0);
    let y = run_modulate(&case);
    let oracle = norm_oracle(case.store.get(case.m).value.data(), 5);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    set(&mut case.store, &s, 0.0, 0.0);
    set(&mut case.store, &h, 0.0, 0.75);
    assert!(run_modulate(&case).data().iter().all(|&v| v == 0.75));
}

#[test]
fn modulation_matches_direct_formula() {
    let case = mod_case(2, 4, 3, 6, 10);
    let y = run_modulate(&case);
    let st = &case.store;
    let lv = st.get(case.l).value.data();
    let linear = |lin: &Linear| -> Vec<f64> {
        let w = st.get(lin.w).value.data();
        let b = st.get(lin.b.unwrap()).value.data();
        (0..6)
            .map(|j| b[j] + (0..10).map(|i| lv[i] * w[i * 6 + j]).sum::<f64>())
            .collect()
    };
    let (scale, shift) = (
        linear(&case.modulation.scale),
        linear(&case.modulation.shift),
    );
    let normed = norm_oracle(st.get(case.m).value.data(), 6);
    for (i, (&got, &n)) in y.data().iter().zip(&normed).enumerate() {
        let c = i % 6;
        assert!((got - (scale[c] * n + shift[c])).abs() < 1e-12);
    }
}

#[test]
fn modulation_gradient_check() {
    let mut case = mod_case(3, 3, 3, 4, 5);
    let weights = rng::normal_tensor::<f64>(&mut rng::stream(0, 5), &[3, 3, 4]);
    let (m, l, modulation) = (case.m, case.l, case.modulation);
    let report = grad_check(
        &mut case.store,
        |g: &mut Graph<f64>, st: &ParamStore<f64>| {
            let mv = g.param(st, m)?;
            let lv = g.param(st, l)?;
            let y = modulation.forward(g, st, mv, lv)?;
            let w = g.constant(weights.clone())?;
            let p = g.mul(y, w)?;
            Ok::<_, mscdt::Error>(g.sum(p)?)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn modulate_rejects_channel_mismatch() {
    let mut store = ParamStore::<f64>::new();
    let modulation = Modulation::new(&mut store, "mod", 4, 3, &mut rng::stream(0, 0)).unwrap();
    let mut g = Graph::new();
    let m = g.constant(Tensor::zeros(&[2, 2, 5])).unwrap();
    let l = g.constant(Tensor::zeros(&[4])).unwrap();
    assert!(modulate(&mut g, &store, m, l, &modulation.scale, &modulation.shift).is_err());
}
