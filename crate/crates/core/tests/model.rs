use ada_sv::features::FeatureMatrix;
use ada_sv::model::{
    pair_feature, stats_pool, Asp, BlockKind, EncoderConfig, Model, ModelConfig, TensorArchive, ASP_EPS,
};
use ada_sv::nn::{Grads, ParamStore};
use ada_sv::seed;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal))
}

fn rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    let diff = (a - n).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(n.mapv(|v| v * v).sum().sqrt());
    diff / scale.max(1e-6)
}

/// Central differences of `f` over every parameter element.
fn numeric_grads(ps: &mut ParamStore, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<Array2<f64>> {
    let mut out = Vec::new();
    for i in 0..ps.len() {
        let dim = ps.params()[i].value.dim();
        let mut g = Array2::zeros(dim);
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = ps.params()[i].value[[r, c]];
                ps.params_mut()[i].value[[r, c]] = orig + H;
                let up = f(ps);
                ps.params_mut()[i].value[[r, c]] = orig - H;
                let down = f(ps);
                ps.params_mut()[i].value[[r, c]] = orig;
                g[[r, c]] = (up - down) / (2.0 * H);
            }
        }
        out.push(g);
    }
    out
}

fn small_config() -> ModelConfig {
    ModelConfig {
        n_mels: 8,
        encoder: EncoderConfig {
            widths: vec![2, 3],
            time_strides: vec![1, 2],
            freq_strides: vec![2, 2],
            kernel: 3,
            block: BlockKind::Residual,
            embedding_dim: 4,
            attention_hidden: 3,
        },
        num_speakers: 3,
        ..ModelConfig::default()
    }
}

fn feats(rng: &mut impl Rng, t: usize, d: usize) -> FeatureMatrix {
    FeatureMatrix::new(randn(rng, t, d)).unwrap()
}

#[test]
fn default_embedding_is_256_and_frames_are_strided() {
    let (model, ps) = Model::new(&ModelConfig::default(), 1).unwrap();
    let mut rng = seed::rng(&[1]);
    let x = feats(&mut rng, 98, 80);
    let frames = model.encode_frames(&ps, &x).unwrap();
    assert_eq!(frames.nrows(), 25);
    let e = model.embed(&ps, &x).unwrap();
    assert_eq!(e.dim(), 256);
    assert_eq!(model.embed(&ps, &x).unwrap(), e);
    assert!(model.encode_frames(&ps, &feats(&mut rng, 3, 80)).is_err());
    assert!(model.encode_frames(&ps, &feats(&mut rng, 98, 40)).is_err());
}

#[test]
fn identity_ablated_encoder_is_linear_map() {
    let cfg = ModelConfig {
        n_mels: 6,
        encoder: EncoderConfig::identity_ablated(2, 4),
        ..ModelConfig::default()
    };
    let (model, ps) = Model::new(&cfg, 3).unwrap();
    let mut rng = seed::rng(&[3]);
    let x = randn(&mut rng, 7, 6);
    let frames = model.encode_frames(&ps, &FeatureMatrix::new(x.clone()).unwrap()).unwrap();
    assert_eq!(frames.dim(), (7, 12));
    let w = ps.get(ps.find("encoder.stage0.proj.weight").unwrap());
    let b = ps.get(ps.find("encoder.stage0.proj.bias").unwrap());
    for t in 0..7 {
        for c in 0..2 {
            for f in 0..6 {
                let expect = w[[c, 0]] * x[[t, f]] + b[[0, c]];
                assert!((frames[[t, c * 6 + f]] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_attention_reproduces_stats_pooling() {
    let mut rng = seed::rng(&[5]);
    let mut ps = ParamStore::new();
    let asp = Asp::new(6, 4, &mut ps, &mut rng);
    asp.zero_attention(&mut ps);
    let h = randn(&mut rng, 9, 6);
    let (out, _) = asp.forward(&ps, &h);
    assert_eq!(out, stats_pool(&h));
    let one = randn(&mut rng, 1, 6);
    let (out1, _) = asp.forward(&ps, &one);
    for k in 0..6 {
        assert_eq!(out1[k], one[[0, k]]);
        assert_eq!(out1[6 + k], ASP_EPS.sqrt());
    }
}

#[test]
fn asp_gradients_match_finite_differences() {
    for case in 0..20u64 {
        let mut rng = seed::rng(&[case, 11]);
        let mut ps = ParamStore::new();
        let c = 2 + (case as usize % 4);
        let t = 1 + (case as usize % 6);
        let asp = Asp::new(c, 3, &mut ps, &mut rng);
        for p in ps.params_mut() {
            p.value = randn(&mut rng, p.value.nrows(), p.value.ncols());
        }
        let h = randn(&mut rng, t, c);
        let w: Array1<f64> = randn(&mut rng, 1, 2 * c).row(0).to_owned();
        let loss = |ps: &ParamStore, h: &Array2<f64>| asp.forward(ps, h).0.dot(&w);
        let (_, tr) = asp.forward(&ps, &h);
        let mut grads = ps.zero_grads();
        let dh = asp.backward(&ps, &tr, w.view(), &mut grads);
        let num = numeric_grads(&mut ps, |ps| loss(ps, &h));
        for (a, n) in grads.values().iter().zip(&num) {
            assert!(rel_err(a, n) < TOL, "case {case}: {}", rel_err(a, n));
        }
        let mut ndh = Array2::zeros(h.dim());
        for i in 0..t {
            for k in 0..c {
                let mut hp = h.clone();
                hp[[i, k]] += H;
                let mut hm = h.clone();
                hm[[i, k]] -= H;
                ndh[[i, k]] = (loss(&ps, &hp) - loss(&ps, &hm)) / (2.0 * H);
            }
        }
        assert!(rel_err(&dh, &ndh) < TOL, "case {case} dh: {}", rel_err(&dh, &ndh));
    }
}

#[test]
fn embed_gradients_match_finite_differences() {
    let cfg = small_config();
    for case in 0..20u64 {
        let (model, mut ps) = Model::new(&cfg, case).unwrap();
        let mut rng = seed::rng(&[case, 12]);
        // Zero biases put dead units exactly on the ReLU kink.
        for p in ps.params_mut() {
            if p.name.ends_with(".bias") {
                p.value = randn(&mut rng, 1, p.value.ncols()) * 0.1;
            }
        }
        let x = feats(&mut rng, 5 + case as usize % 4, 8);
        let w: Array1<f64> = randn(&mut rng, 1, 4).row(0).to_owned();
        let (_, tr) = model.embed_traced(&ps, &x).unwrap();
        let mut grads = ps.zero_grads();
        model.backward_embed(&ps, &tr, w.view(), &mut grads);
        let num = numeric_grads(&mut ps, |ps| model.embed_traced(ps, &x).unwrap().0.dot(&w));
        for (i, (a, n)) in grads.values().iter().zip(&num).enumerate() {
            let name = &ps.params()[i].name;
            if name.starts_with("encoder") || name.starts_with("asp") || name.starts_with("embed") {
                assert!(rel_err(a, n) < TOL, "case {case} {name}: {}", rel_err(a, n));
            } else {
                assert!(a.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let cfg = small_config();
    for case in 0..20u64 {
        let (model, mut ps) = Model::new(&cfg, 100 + case).unwrap();
        let disc = model.discriminator();
        let mut rng = seed::rng(&[case, 13]);
        let a = randn(&mut rng, 1, 4).row(0).to_owned();
        let b = randn(&mut rng, 1, 4).row(0).to_owned();
        let (z, tr) = disc.forward(&ps, a.view(), b.view()).unwrap();
        assert!(z.is_finite());
        let mut grads: Grads = ps.zero_grads();
        let (da, db) = disc.backward(&ps, &tr, 1.0, &mut grads);
        let num = numeric_grads(&mut ps, |ps| disc.logit(ps, a.view(), b.view()).unwrap());
        for (i, (g, n)) in grads.values().iter().zip(&num).enumerate() {
            assert!(rel_err(g, n) < TOL, "case {case} {}", ps.params()[i].name);
        }
        for (v, dv, first) in [(&a, &da, true), (&b, &db, false)] {
            let mut nd = Array1::zeros(4);
            for k in 0..4 {
                let mut p = v.clone();
                p[k] += H;
                let mut m = v.clone();
                m[k] -= H;
                let f = |x: &Array1<f64>| {
                    if first {
                        disc.logit(&ps, x.view(), b.view()).unwrap()
                    } else {
                        disc.logit(&ps, a.view(), x.view()).unwrap()
                    }
                };
                nd[k] = (f(&p) - f(&m)) / (2.0 * H);
            }
            let e = rel_err(&dv.clone().insert_axis(Axis(0)), &nd.insert_axis(Axis(0)));
            assert!(e < TOL, "case {case}: {e}");
        }
    }
}

#[test]
fn discriminator_is_symmetric() {
    let (model, ps) = Model::new(&ModelConfig::default(), 9).unwrap();
    let mut rng = seed::rng(&[9]);
    let a = randn(&mut rng, 1, 256).row(0).to_owned();
    let b = randn(&mut rng, 1, 256).row(0).to_owned();
    let d = model.discriminator();
    assert_eq!(d.logit(&ps, a.view(), b.view()).unwrap(), d.logit(&ps, b.view(), a.view()).unwrap());
    assert_eq!(d.input_width(), 512);
    let f = pair_feature(a.view(), a.view()).unwrap();
    assert!(f.iter().take(256).all(|&v| v == 0.0));
    assert!(d.logit(&ps, a.view(), b.slice(ndarray::s![..10])).is_err());
}

#[test]
fn checkpoint_archive_round_trips_model() {
    let (model, ps) = Model::new(&small_config(), 4).unwrap();
    let ar = model.to_archive(&ps, serde_json::Map::new());
    let back = TensorArchive::from_bytes(&ar.to_bytes()).unwrap();
    let (model2, ps2) = Model::from_archive(&back).unwrap();
    assert_eq!(model2.config(), model.config());
    for (p, q) in ps.params().iter().zip(ps2.params()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value, q.value);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn asp_is_permutation_invariant(seed_v in any::<u64>(), t in 1usize..12) {
        let mut rng = seed::rng(&[seed_v]);
        let mut ps = ParamStore::new();
        let asp = Asp::new(5, 4, &mut ps, &mut rng);
        let h = randn(&mut rng, t, 5);
        let mut order: Vec<usize> = (0..t).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let hp = h.select(Axis(0), &order);
        let (a, _) = asp.forward(&ps, &h);
        let (b, _) = asp.forward(&ps, &hp);
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_finite(seed_v in any::<u64>(), scale in 1e-3f64..1e3) {
        let (model, ps) = Model::new(&small_config(), seed_v).unwrap();
        let mut rng = seed::rng(&[seed_v, 1]);
        let x = FeatureMatrix::new(randn(&mut rng, 6, 8) * scale).unwrap();
        let e = model.embed(&ps, &x).unwrap();
        prop_assert!(e.vector().iter().all(|v| v.is_finite()));
    }
}
