use mscdt::evaluation::{gen_phantom, PhantomSpec};
use mscdt::numerics::{
    grad_check, rng, GradCheckOptions, Graph, ParamId, ParamStore, Real, Tensor, Var,
};
use mscdt::texture::texture_condition;
use mscdt::transformer::{
    transformer_block, unet_forward, BlockParams, Gdfn, Mdta, UNet, UNetConfig,
};

fn zero(store: &mut ParamStore<f64>, id: ParamId) {
    store
        .get_mut(id)
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
}

fn input(store: &mut ParamStore<f64>, name: &str, shape: &[usize], seed: u64) -> ParamId {
    store
        .add(name, rng::normal_tensor(&mut rng::stream(seed, 77), shape))
        .unwrap()
}

/// Random linear functional, keeps gradients away from degenerate symmetric sums.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, mscdt::Error> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(rng::normal_tensor(&mut rng::stream(seed, 99), &shape))?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p)?)
}

fn dw_oracle(x: &[f64], w: &[f64], h: usize, wd: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * wd * c];
    for y in 0..h {
        for xx in 0..wd {
            for ch in 0..c {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) =
                            (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                            continue;
                        }
                        acc += x[(sy as usize * wd + sx as usize) * c + ch]
                            * w[(ky * 3 + kx) * c + ch];
                    }
                }
                out[(y * wd + xx) * c + ch] = acc;
            }
        }
    }
    out
}

fn pw_oracle(x: &[f64], w: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    x.chunks(cin)
        .flat_map(|row| {
            (0..cout).map(move |j| (0..cin).map(|i| row[i] * w[i * cout + j]).sum::<f64>())
        })
        .collect()
}

fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn mdta_zero_output_projection_is_residual() {
    let mut store = ParamStore::new();
    let mdta = Mdta::new(&mut store, "a", 8, 2, &mut rng::stream(0, 0)).unwrap();
    zero(&mut store, mdta.out.w);
    let m = input(&mut store, "m", &[4, 4, 8], 1);
    let mp = input(&mut store, "mp", &[4, 4, 8], 2);
    let mut g = Graph::new();
    let (mv, mpv) = (g.param(&store, m).unwrap(), g.param(&store, mp).unwrap());
    let y = mdta.forward(&mut g, &store, mpv, mv).unwrap();
    assert_eq!(g.value(y), &store.get(m).value);
}

#[test]
fn mdta_single_channel_is_projected_value() {
    let mut store = ParamStore::new();
    let mdta = Mdta::new(&mut store, "a", 1, 1, &mut rng::stream(1, 0)).unwrap();
    let m = input(&mut store, "m", &[3, 5, 1], 3);
    let mp = input(&mut store, "mp", &[3, 5, 1], 4);
    let mut g = Graph::new();
    let (mv, mpv) = (g.param(&store, m).unwrap(), g.param(&store, mp).unwrap());
    let (y, maps) = mdta.forward_with_maps(&mut g, &store, mpv, mv).unwrap();
    assert_eq!(g.value(maps[0]).data(), &[1.0]);
    let v = pw_oracle(
        store.get(mp).value.data(),
        store.get(mdta.v.w).value.data(),
        1,
        1,
    );
    let v = dw_oracle(&v, store.get(mdta.v_dw.w).value.data(), 3, 5, 1);
    let out = pw_oracle(&v, store.get(mdta.out.w).value.data(), 1, 1);
    for (i, &got) in g.value(y).data().iter().enumerate() {
        let expect = out[i] + store.get(m).value.data()[i];
        assert!((got - expect).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut store = ParamStore::<f32>::new();
    let mdta = Mdta::new(&mut store, "a", 8, 2, &mut rng::stream(2, 0)).unwrap();
    let x = rng::normal_tensor::<f32>(&mut rng::stream(3, 0), &[4, 4, 8]);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let (y, maps) = mdta.forward_with_maps(&mut g, &store, xv, xv).unwrap();
    assert_eq!(g.shape(y), &[4, 4, 8]);
    assert_eq!(maps.len(), 2);
    for map in maps {
        assert_eq!(g.shape(map), &[4, 4]);
        for row in g.value(map).data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn mdta_rejects_bad_heads() {
    let mut store = ParamStore::<f64>::new();
    assert!(Mdta::new(&mut store, "a", 6, 4, &mut rng::stream(0, 0)).is_err());
}

#[test]
fn gdfn_zero_branches_pass_residual() {
    for branch in 0..2 {
        let mut store = ParamStore::new();
        let f = Gdfn::new(&mut store, "f", 6, 2.0, &mut rng::stream(4, 0)).unwrap();
        assert_eq!(f.hidden, 12);
        zero(&mut store, if branch == 0 { f.pw1.w } else { f.pw2.w });
        let m = input(&mut store, "m", &[3, 3, 6], 5);
        let mp = input(&mut store, "mp", &[3, 3, 6], 6);
        let mut g = Graph::new();
        let (mv, mpv) = (g.param(&store, m).unwrap(), g.param(&store, mp).unwrap());
        let y = f.forward(&mut g, &store, mpv, mv).unwrap();
        assert_eq!(g.value(y), &store.get(m).value);
    }
}

#[test]
fn gdfn_matches_direct_formula() {
    let mut store = ParamStore::new();
    let f = Gdfn::new(&mut store, "f", 4, 1.5, &mut rng::stream(5, 0)).unwrap();
    let (h, w, c, hid) = (5, 4, 4, 6);
    assert_eq!(f.hidden, hid);
    let m = input(&mut store, "m", &[h, w, c], 7);
    let mp = input(&mut store, "mp", &[h, w, c], 8);
    let mut g = Graph::new();
    let (mv, mpv) = (g.param(&store, m).unwrap(), g.param(&store, mp).unwrap());
    let y = f.forward(&mut g, &store, mpv, mv).unwrap();
    let v = |id: ParamId| store.get(id).value.data().to_vec();
    let x = v(mp);
    let a = dw_oracle(&pw_oracle(&x, &v(f.pw1.w), c, hid), &v(f.dw1.w), h, w, hid);
    let b = dw_oracle(&pw_oracle(&x, &v(f.pw2.w), c, hid), &v(f.dw2.w), h, w, hid);
    let gated: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&p, &q)| gelu_oracle(p) * q)
        .collect();
    let out = pw_oracle(&gated, &v(f.out.w), hid, c);
    for (i, &got) in g.value(y).data().iter().enumerate() {
        assert!((got - (out[i] + v(m)[i])).abs() < 1e-10);
    }
}

fn block(store: &mut ParamStore<f64>, c: usize, heads: usize, ll: usize, seed: u64) -> BlockParams {
    BlockParams::new(store, "blk", c, heads, 2.0, ll, &mut rng::stream(seed, 0)).unwrap()
}

#[test]
fn block_with_zero_projections_is_identity() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 8, 2, 6, 6);
    for id in b.output_projections() {
        zero(&mut store, id);
    }
    let m = input(&mut store, "m", &[8, 8, 8], 9);
    let l = input(&mut store, "l", &[6], 10);
    let mut g = Graph::new();
    let (mv, lv) = (g.param(&store, m).unwrap(), g.param(&store, l).unwrap());
    let y = transformer_block(&mut g, &store, &b, mv, lv).unwrap();
    assert_eq!(g.value(y), &store.get(m).value);
}

#[test]
fn block_preserves_shape() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 8, 4, 6, 7);
    let mut g = Graph::new();
    let m = g
        .constant(rng::normal_tensor(&mut rng::stream(1, 1), &[8, 8, 8]))
        .unwrap();
    let l = g
        .constant(rng::normal_tensor(&mut rng::stream(1, 2), &[6]))
        .unwrap();
    let y = transformer_block(&mut g, &store, &b, m, l).unwrap();
    assert_eq!(g.shape(y), &[8, 8, 8]);
}

fn check(
    store: &mut ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, mscdt::Error>,
) -> f64 {
    grad_check(
        store,
        f,
        &GradCheckOptions {
            max_per_param: Some(12),
            ..Default::default()
        },
    )
    .unwrap()
    .max_rel_err
}

#[test]
fn mdta_gdfn_block_gradient_checks() {
    let mut store = ParamStore::new();
    let a = Mdta::new(&mut store, "a", 4, 2, &mut rng::stream(8, 0)).unwrap();
    let m = input(&mut store, "m", &[3, 3, 4], 11);
    let err = check(&mut store, |g, st| {
        let mv = g.param(st, m)?;
        let y = a.forward(g, st, mv, mv)?;
        project(g, y, 1)
    });
    assert!(err < 1e-4, "mdta {err}");

    let mut store = ParamStore::new();
    let f = Gdfn::new(&mut store, "f", 4, 2.0, &mut rng::stream(9, 0)).unwrap();
    let m = input(&mut store, "m", &[3, 3, 4], 12);
    let err = check(&mut store, |g, st| {
        let mv = g.param(st, m)?;
        let y = f.forward(g, st, mv, mv)?;
        project(g, y, 2)
    });
    assert!(err < 1e-4, "gdfn {err}");

    let mut store = ParamStore::new();
    let b = block(&mut store, 4, 2, 5, 10);
    let m = input(&mut store, "m", &[4, 4, 4], 13);
    let l = input(&mut store, "l", &[5], 14);
    let err = check(&mut store, |g, st| {
        let mv = g.param(st, m)?;
        let lv = g.param(st, l)?;
        let y = transformer_block(g, st, &b, mv, lv)?;
        project(g, y, 3)
    });
    assert!(err < 1e-4, "block {err}");
}

#[test]
fn config_validation() {
    assert!(UNetConfig::full().validate().is_ok());
    assert!(UNetConfig::toy().validate().is_ok());
    let full = UNetConfig::full();
    assert_eq!(full.heads_per_level, vec![1, 2, 4, 8]);
    assert_eq!(full.channels_per_level, vec![48, 96, 192, 384]);
    assert_eq!(full.blocks_per_level, vec![3, 5, 6, 6]);
    let mut bad = UNetConfig::toy();
    bad.blocks_per_level.push(1);
    assert!(bad.validate().is_err());
    let mut bad = UNetConfig::toy();
    bad.heads_per_level = vec![3, 2];
    assert!(bad.validate().is_err());
}

fn toy_unet<T: Real>(store: &mut ParamStore<T>, cfg: &UNetConfig, seed: u64) -> UNet {
    UNet::new(store, "unet", cfg, &mut rng::stream(seed, 0)).unwrap()
}

#[test]
fn unet_outputs_one_image_per_tracer() {
    let cfg = UNetConfig::toy();
    let mut store = ParamStore::<f32>::new();
    let unet = toy_unet(&mut store, &cfg, 0);
    let p = gen_phantom(1, &PhantomSpec::default()).unwrap();
    let (_, u) = texture_condition(&p.dual, 180).unwrap();
    let l = vec![0.1f32; cfg.latent_len()];
    let out = unet_forward(&unet, &store, &p.dual, &u, &l).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|o| o.dims() == (32, 32)));
    assert_eq!(out, unet_forward(&unet, &store, &p.dual, &u, &l).unwrap());
    let odd = mscdt::Image::zeros(31, 31);
    assert!(unet_forward(&unet, &store, &odd, &odd, &l).is_err());
}

#[test]
fn zero_block_projections_make_output_independent_of_prior() {
    let cfg = UNetConfig::toy();
    let mut store = ParamStore::<f64>::new();
    let unet = toy_unet(&mut store, &cfg, 1);
    let ids: Vec<ParamId> = unet.blocks().flat_map(|b| b.output_projections()).collect();
    for id in ids {
        zero(&mut store, id);
    }
    let p = gen_phantom(2, &PhantomSpec::default()).unwrap();
    let (_, u) = texture_condition(&p.dual, 180).unwrap();
    let la = rng::normal_tensor::<f64>(&mut rng::stream(1, 0), &[cfg.latent_len()]);
    let lb = rng::normal_tensor::<f64>(&mut rng::stream(2, 0), &[cfg.latent_len()]);
    let a = unet_forward(&unet, &store, &p.dual, &u, la.data()).unwrap();
    let b = unet_forward(&unet, &store, &p.dual, &u, lb.data()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unet_full_graph_gradient_check() {
    let cfg = UNetConfig {
        channels_per_level: vec![4, 8],
        latent_dim: 3,
        ..UNetConfig::toy()
    };
    let mut store = ParamStore::<f64>::new();
    let unet = toy_unet(&mut store, &cfg, 2);
    let x = rng::normal_tensor::<f64>(&mut rng::stream(3, 0), &[8, 8, 1]);
    let u = x.map(|v| v.max(0.0));
    let l = rng::normal_tensor::<f64>(&mut rng::stream(4, 0), &[cfg.latent_len()]);
    let report = grad_check(
        &mut store,
        |g: &mut Graph<f64>, st: &ParamStore<f64>| {
            let xv = g.constant(x.clone())?;
            let uv = g.constant(u.clone())?;
            let lv = g.constant(l.clone())?;
            let y = unet.forward(g, st, xv, uv, lv)?;
            project(g, y, 4)
        },
        &GradCheckOptions {
            max_per_param: Some(4),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn full_configuration_runs_on_64() {
    let cfg = UNetConfig::full();
    let mut store = ParamStore::<f32>::new();
    let unet = toy_unet(&mut store, &cfg, 3);
    let mut g = Graph::new();
    let x = g
        .constant(rng::normal_tensor::<f32>(
            &mut rng::stream(5, 0),
            &[64, 64, 1],
        ))
        .unwrap();
    let l = g.constant(Tensor::zeros(&[cfg.latent_len()])).unwrap();
    let y = unet.forward(&mut g, &store, x, x, l).unwrap();
    assert_eq!(g.shape(y), &[64, 64, 2]);
    assert_eq!(unet.blocks().count(), 2 * (3 + 5 + 6) + 6);
}
