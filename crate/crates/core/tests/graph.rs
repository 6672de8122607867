mod support;

use std::collections::BTreeSet;

use hyquant_core::calib::{minmax_qconfig, pass1_cache_fp, GranularityChoice};
use hyquant_core::graph::{
    forward_fp, forward_quant, observe_sites, quant_attention, AttentionQuant, Graph, LayerId,
    LayerOp, LayerSpec, Mhsa, QuantMode, SiteId, SiteKind,
};
use hyquant_core::quant::{fit_minmax, Granularity, Scheme};
use hyquant_core::rng::Rng;
use hyquant_core::tensor::{self, Tensor};
use hyquant_core::zoo::{build_fixture, FixtureSpec};
use hyquant_core::Error;

use support::normal;

fn identity(d: usize) -> Tensor {
    Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
}

#[test]
fn identity_linear_is_identity() {
    let layer = LayerSpec::new(
        0,
        "fc",
        LayerOp::Linear {
            weight: identity(5),
            bias: None,
            act: None,
        },
        &[],
    );
    let g = Graph::new(vec![layer], vec![5], LayerId(0), QuantMode::Partial).unwrap();
    let x = normal(&mut Rng::new(1), &[3, 5], 1.0);
    let out = forward_fp(&g, &x, &BTreeSet::new()).unwrap();
    assert_eq!(out.logits, x);
    assert!(out.outputs.is_empty());
}

#[test]
fn empty_qconfig_is_bitwise_full_precision() {
    let f = build_fixture(&FixtureSpec::named("tiny-mvit-gn", 0).unwrap()).unwrap();
    let watch: BTreeSet<LayerId> = f.graph.layer_ids().collect();
    let fp = forward_fp(&f.graph, &f.calib, &watch).unwrap();
    let q = forward_quant(&f.graph, &f.calib, &Default::default(), &watch).unwrap();
    assert_eq!(fp, q);
}

#[test]
fn partial_config_is_rejected() {
    let f = build_fixture(&FixtureSpec::named("tiny-mvit-ln", 0).unwrap()).unwrap();
    let cache = pass1_cache_fp(&f.graph, &f.calib, &[]).unwrap();
    let mut q = minmax_qconfig(
        &f.graph,
        &cache,
        8,
        GranularityChoice::PerLayer,
        Scheme::Asymmetric,
    )
    .unwrap();
    let site = *q.sites().next().unwrap();
    q.remove(&site);
    let err = forward_quant(&f.graph, &f.calib, &q, &BTreeSet::new()).unwrap_err();
    assert_eq!(err, Error::MissingParams(site));
}

#[test]
fn full_mode_adds_softmax_and_norm_sites() {
    let mut spec = FixtureSpec::named("tiny-mvit-ln", 0).unwrap();
    let partial = build_fixture(&spec).unwrap();
    spec.mode = QuantMode::Full;
    let full = build_fixture(&spec).unwrap();
    let p: BTreeSet<SiteId> = partial.graph.quant_sites().copied().collect();
    let f: BTreeSet<SiteId> = full.graph.quant_sites().copied().collect();
    assert!(p.is_subset(&f));
    let extra: BTreeSet<SiteKind> = f.difference(&p).map(|s| s.kind).collect();
    assert!(extra.contains(&SiteKind::SoftmaxInput) && extra.contains(&SiteKind::Input));
    let observed = observe_sites(&full.graph, &full.calib, &Default::default()).unwrap();
    assert_eq!(observed.keys().copied().collect::<BTreeSet<_>>(), f);
}

/// Direct per-sample, per-head loops in f64.
fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let [n, t, d] = q.shape().try_into().unwrap();
    let dk = d / heads;
    let at = |x: &Tensor, b: usize, i: usize, j: usize| x.data()[(b * t + i) * d + j] as f64;
    let mut out = vec![0.0; n * t * d];
    for b in 0..n {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dk)
                            .map(|c| at(q, b, i, h * dk + c) * at(k, b, j, h * dk + c))
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dk {
                    out[(b * t + i) * d + h * dk + c] =
                        (0..t).map(|j| e[j] / z * at(v, b, j, h * dk + c)).sum();
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_dense_oracle() {
    let mut rng = Rng::new(2);
    for heads in [1, 2, 4] {
        let q = normal(&mut rng, &[2, 5, 8], 1.0);
        let k = normal(&mut rng, &[2, 5, 8], 1.0);
        let v = normal(&mut rng, &[2, 5, 8], 1.0);
        let got = quant_attention(&q, &k, &v, heads, &AttentionQuant::default()).unwrap();
        assert!(support::max_abs_diff(got.data(), &dense_attention(&q, &k, &v, heads)) < 1e-5);
    }
}

#[test]
fn single_head_with_identity_values_returns_weights() {
    let mut rng = Rng::new(3);
    let q = normal(&mut rng, &[1, 4, 4], 1.0);
    let k = normal(&mut rng, &[1, 4, 4], 1.0);
    let v = identity(4).into_reshape(&[1, 4, 4]).unwrap();
    let got = quant_attention(&q, &k, &v, 1, &AttentionQuant::default()).unwrap();
    let scores = tensor::scale(
        &tensor::bmm(&q, &tensor::transpose_last2(&k).unwrap()).unwrap(),
        0.5,
    );
    let probs = tensor::softmax(&scores, 2).unwrap();
    assert!(
        support::max_abs_diff(
            got.data(),
            &probs.data().iter().map(|&p| p as f64).collect::<Vec<_>>()
        ) < 1e-6
    );
    for row in got.data().chunks(4) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn two_heads_are_two_independent_single_heads() {
    let mut rng = Rng::new(4);
    let (q, k, v) = (
        normal(&mut rng, &[2, 3, 6], 1.0),
        normal(&mut rng, &[2, 3, 6], 1.0),
        normal(&mut rng, &[2, 3, 6], 1.0),
    );
    let both = quant_attention(&q, &k, &v, 2, &AttentionQuant::default()).unwrap();
    for h in 0..2 {
        let part = |x: &Tensor| tensor::narrow(x, 2, 3 * h, 3).unwrap();
        let one = quant_attention(
            &part(&q),
            &part(&k),
            &part(&v),
            1,
            &AttentionQuant::default(),
        )
        .unwrap();
        assert_eq!(tensor::narrow(&both, 2, 3 * h, 3).unwrap(), one);
    }
    assert!(matches!(
        quant_attention(&q, &k, &v, 4, &AttentionQuant::default()),
        Err(Error::Divisibility { .. })
    ));
}

#[test]
fn quantized_attention_operands_change_output() {
    let mut rng = Rng::new(5);
    let (q, k, v) = (
        normal(&mut rng, &[1, 4, 4], 1.0),
        normal(&mut rng, &[1, 4, 4], 1.0),
        normal(&mut rng, &[1, 4, 4], 1.0),
    );
    let p = |t: &Tensor| Some(fit_minmax(t, 3, Scheme::Symmetric, Granularity::PerLayer).unwrap());
    let quant = AttentionQuant {
        query: p(&q),
        key: p(&k),
        value: p(&v),
        ..Default::default()
    };
    let a = quant_attention(&q, &k, &v, 2, &AttentionQuant::default()).unwrap();
    let b = quant_attention(&q, &k, &v, 2, &quant).unwrap();
    assert_ne!(a, b);
}

#[test]
fn mhsa_layer_matches_projection_then_attention() {
    let mut rng = Rng::new(6);
    let d = 4;
    let m = Mhsa {
        heads: 2,
        qkv_weight: normal(&mut rng, &[3 * d, d], 0.5),
        qkv_bias: None,
        out_weight: normal(&mut rng, &[d, d], 0.5),
        out_bias: None,
    };
    let g = Graph::new(
        vec![LayerSpec::new(0, "attn", LayerOp::Mhsa(m.clone()), &[])],
        vec![3, d],
        LayerId(0),
        QuantMode::Partial,
    )
    .unwrap();
    let x = normal(&mut rng, &[2, 3, d], 1.0);
    let y = forward_fp(&g, &x, &BTreeSet::new()).unwrap().logits;
    let qkv = tensor::linear(&x, &m.qkv_weight, None).unwrap();
    let part = |i: usize| tensor::narrow(&qkv, 2, i * d, d).unwrap();
    let att = quant_attention(&part(0), &part(1), &part(2), 2, &AttentionQuant::default()).unwrap();
    let want = tensor::linear(&att, &m.out_weight, None).unwrap();
    assert!(
        support::max_abs_diff(
            y.data(),
            &want.data().iter().map(|&v| v as f64).collect::<Vec<_>>()
        ) < 1e-6
    );
}
