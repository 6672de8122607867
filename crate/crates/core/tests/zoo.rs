mod support;

use std::collections::BTreeSet;
use std::path::PathBuf;

use hyquant_core::bridge::{
    reconstruction_unit_of, reconstruction_units, resolve_bridge_blocks, suggest_bridge_annotations,
};
use hyquant_core::calib::{
    calibrate, minmax_qconfig, pass1_cache_fp, GranularityChoice, SearchOptions, SearchSpace,
};
use hyquant_core::graph::{forward_fp, LayerId, LayerKind, LayerOp};
use hyquant_core::metrics::evaluate;
use hyquant_core::quant::Scheme;
use hyquant_core::tensor::{self, Tensor};
use hyquant_core::zoo::{build_fixture, build_norm_variants, top1, FixtureSpec, FIXTURE_NAMES};

fn fixture(name: &str) -> hyquant_core::zoo::Fixture {
    build_fixture(&FixtureSpec::named(name, 0).unwrap()).unwrap()
}

#[test]
fn tiny_fixture_solves_its_task() {
    let f = fixture("tiny-mvit-ln");
    let out = forward_fp(&f.graph, &f.eval, &BTreeSet::new()).unwrap();
    let acc = top1(&out.logits, &f.labels).unwrap();
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn every_fixture_annotation_resolves_to_one_chain() {
    for name in FIXTURE_NAMES {
        let f = fixture(name);
        let groups = resolve_bridge_blocks(&f.graph, &f.bridges).unwrap();
        assert_eq!(groups.len(), 1);
        let g = &groups[0];
        assert_eq!(g.members.len(), 2);
        let kinds: Vec<LayerKind> = g
            .members
            .iter()
            .map(|&m| f.graph.layer(m).unwrap().kind())
            .collect();
        assert_eq!(kinds, [LayerKind::Conv2d, LayerKind::Conv2d]);
        // The advisory helper finds the same chain.
        let suggested = suggest_bridge_annotations(&f.graph);
        assert!(suggested.iter().any(|a| a.layer_ids == g.members), "{name}");
        for &m in &g.members {
            let u = reconstruction_unit_of(&f.graph, m, &groups).unwrap();
            assert!(u.bridge && u.members == g.members && u.output == g.output);
        }
    }
}

#[test]
fn units_cover_each_quantizable_layer_once() {
    for name in FIXTURE_NAMES {
        let f = fixture(name);
        let groups = resolve_bridge_blocks(&f.graph, &f.bridges).unwrap();
        let units = reconstruction_units(&f.graph, &groups);
        let mut seen = BTreeSet::new();
        for u in &units {
            for &m in &u.members {
                assert!(seen.insert(m), "{m} in two units");
            }
        }
        for id in f.graph.layer_ids() {
            if !f.graph.sites_of(id).is_empty() {
                assert!(seen.contains(&id), "{name}: {id} not covered");
            }
        }
    }
}

#[test]
fn overflow_fixture_has_positive_channel_minima() {
    let f = fixture("overflow-bridge");
    let pw = f.bridges[0].layer_ids[1];
    let producer = f.graph.layer(pw).unwrap().inputs[0];
    let cache = pass1_cache_fp(&f.graph, &f.calib, &[]).unwrap();
    let t = cache.output(producer).unwrap();
    let ranges = t.channel_min_max(1).unwrap();
    let positive = ranges.iter().filter(|(lo, _)| *lo > 0.0).count();
    assert!(
        positive * 4 >= ranges.len(),
        "{positive} of {}",
        ranges.len()
    );
}

#[test]
fn norm_variants_share_structure() {
    let v = build_norm_variants(0).unwrap();
    assert_eq!(v.len(), 3);
    let shapes = |f: &hyquant_core::zoo::Fixture| -> Vec<Vec<usize>> {
        f.graph
            .layers()
            .iter()
            .filter_map(|l| l.weight(hyquant_core::graph::SiteKind::Weight))
            .map(|w| w.shape().to_vec())
            .collect()
    };
    for f in &v[1..] {
        assert_eq!(f.graph.layers().len(), v[0].graph.layers().len());
        assert_eq!(shapes(f), shapes(&v[0]));
    }
    let kinds = |f: &hyquant_core::zoo::Fixture, k| {
        f.graph.layers().iter().filter(|l| l.kind() == k).count()
    };
    let ln = kinds(&v[0], LayerKind::LayerNorm);
    assert!(ln > 0);
    assert_eq!(kinds(&v[1], LayerKind::GroupNorm), ln);
    assert_eq!(
        kinds(&v[2], LayerKind::LayerNorm) + kinds(&v[2], LayerKind::GroupNorm),
        0
    );
}

/// The group-norm sibling normalizes each sample over all tokens and
/// channels. That is a layer norm over the last two dims with the layer-norm
/// sibling's affine parameters.
#[test]
fn single_group_sibling_is_layer_norm_over_tokens_and_channels() {
    let v = build_norm_variants(1).unwrap();
    let (ln, gn) = (&v[0], &v[1]);
    let norms = |f: &hyquant_core::zoo::Fixture| -> Vec<LayerId> {
        f.graph
            .layers()
            .iter()
            .filter(|l| matches!(l.kind(), LayerKind::LayerNorm | LayerKind::GroupNorm))
            .map(|l| l.id)
            .collect()
    };
    let watch: BTreeSet<LayerId> = gn.graph.layer_ids().collect();
    let out = forward_fp(&gn.graph, &gn.calib, &watch).unwrap();
    for (l_id, g_id) in norms(ln).into_iter().zip(norms(gn)) {
        let LayerOp::LayerNorm {
            gamma, beta, eps, ..
        } = &ln.graph.layer(l_id).unwrap().op
        else {
            panic!()
        };
        let input = gn.graph.layer(g_id).unwrap().inputs[0];
        let want = tensor::layer_norm(&out.outputs[&input], gamma.as_ref(), beta.as_ref(), *eps, 2)
            .unwrap();
        let got = &out.outputs[&g_id];
        assert!(got
            .data()
            .iter()
            .zip(want.data())
            .all(|(a, b)| (a - b).abs() <= 1e-5));
    }
}

#[test]
fn norm_variants_calibrate() {
    for f in build_norm_variants(2).unwrap() {
        let groups = resolve_bridge_blocks(&f.graph, &f.bridges).unwrap();
        let space = SearchSpace {
            candidates: 6,
            ..SearchSpace::default()
        };
        let c = calibrate(&f.graph, &f.calib, &groups, &space, &SearchOptions::full(8)).unwrap();
        c.qconfig.check_coverage(&f.graph).unwrap();
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny-mvit-ln.golden")
}

/// Logits of the first eight evaluation samples. Regenerate with
/// `HYQUANT_BLESS=1` after an intended numeric change.
#[test]
fn tiny_fixture_matches_golden_logits() {
    let f = fixture("tiny-mvit-ln");
    let x = f.eval.slice_batch(0, 8).unwrap();
    let logits = forward_fp(&f.graph, &x, &BTreeSet::new()).unwrap().logits;
    let path = golden_path();
    if std::env::var_os("HYQUANT_BLESS").is_some() {
        let text: Vec<String> = logits.data().iter().map(|v| format!("{v:e}")).collect();
        std::fs::write(&path, text.join("\n") + "\n").unwrap();
    }
    let golden: Vec<f32> = std::fs::read_to_string(&path)
        .unwrap()
        .split_whitespace()
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(golden.len(), logits.len());
    for (a, b) in logits.data().iter().zip(&golden) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn minmax_agreement_on_tiny_fixture() {
    let f = fixture("tiny-mvit-ln");
    let cache = pass1_cache_fp(&f.graph, &f.calib, &[]).unwrap();
    let x = f.eval.slice_batch(0, 64).unwrap();
    let labels = &f.labels[..64];
    let agreement = |bits, g, s| {
        let q = minmax_qconfig(&f.graph, &cache, bits, g, s).unwrap();
        evaluate(&f.graph, &q, &x, labels).unwrap().agreement
    };
    let w8 = agreement(8, GranularityChoice::PerChannel, Scheme::Symmetric);
    // Measured 61/64; pinned at the 90% floor.
    assert!(w8 >= 0.9, "{w8}");
    let w2 = agreement(2, GranularityChoice::PerChannel, Scheme::Symmetric);
    assert!(w2 < w8, "{w2} vs {w8}");
}

#[test]
fn empty_qconfig_matches_full_precision() {
    let f = fixture("wide-mvit-ln");
    let x = f.eval.slice_batch(0, 32).unwrap();
    let m = evaluate(&f.graph, &Default::default(), &x, &f.labels[..32]).unwrap();
    assert_eq!(m.agreement, 1.0);
    assert_eq!(m.fp_top1, m.quant_top1);
    assert_eq!(m.logit_mse, 0.0);
}

#[test]
fn seeds_change_fixtures() {
    let a = build_fixture(&FixtureSpec::named("tiny-mvit-ln", 0).unwrap()).unwrap();
    let b = build_fixture(&FixtureSpec::named("tiny-mvit-ln", 1).unwrap()).unwrap();
    assert_ne!(a.calib, b.calib);
    assert_ne!(a.graph, b.graph);
    let _: &Tensor = &a.eval;
}
