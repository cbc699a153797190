use std::collections::BTreeSet;

use proptest::prelude::*;

use mlad_core::dataset::{split, Label, Window};
use mlad_core::detect::{quantile, threshold, ScoreMode, ScoredWindow, ThresholdPolicy, Verdict};
use mlad_core::entmax::{entmax, entmax_jacobian_vp, EntmaxConfig};
use mlad_core::eval::{metrics, Metrics};
use mlad_core::logparse::{parse_corpus, ParserConfig};

fn alphas() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), Just(1.2), Just(1.3), Just(1.5), Just(1.7), Just(2.0)]
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, 1..24)
}

proptest! {
    #[test]
    fn entmax_lands_on_simplex(x in vector(), alpha in alphas()) {
        let p = entmax(&x, &EntmaxConfig::with_alpha(alpha).unwrap()).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn entmax_ignores_shifts(x in vector(), alpha in alphas(), c in -50.0..50.0f64) {
        let cfg = EntmaxConfig::with_alpha(alpha).unwrap();
        let p = entmax(&x, &cfg).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = entmax(&shifted, &cfg).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn entmax_commutes_with_permutation(x in vector(), alpha in alphas(), rot in 0usize..24) {
        let cfg = EntmaxConfig::with_alpha(alpha).unwrap();
        let p = entmax(&x, &cfg).unwrap();
        let r = rot % x.len();
        let mut y = x.clone();
        y.rotate_left(r);
        let mut expect = p.clone();
        expect.rotate_left(r);
        let q = entmax(&y, &cfg).unwrap();
        for (a, b) in expect.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn entmax_preserves_order(x in vector(), alpha in alphas()) {
        let p = entmax(&x, &EntmaxConfig::with_alpha(alpha).unwrap()).unwrap();
        for i in 0..x.len() {
            for j in 0..x.len() {
                if x[i] > x[j] {
                    prop_assert!(p[i] >= p[j] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn entmax_jvp_is_tangent_to_simplex(x in vector(), alpha in alphas(), seed in any::<u64>()) {
        let p = entmax(&x, &EntmaxConfig::with_alpha(alpha).unwrap()).unwrap();
        let u: Vec<f64> = (0..x.len()).map(|i| ((seed >> (i % 60)) & 7) as f64 - 3.5).collect();
        let g = entmax_jacobian_vp(&p, alpha, &u);
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        for (gi, pi) in g.iter().zip(&p) {
            if *pi == 0.0 {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn split_partitions_and_balances(labels in prop::collection::vec(prop::bool::weighted(0.2), 2..120), seed in any::<u64>()) {
        let windows: Vec<Window> = labels
            .iter()
            .enumerate()
            .map(|(i, &a)| Window {
                keys: vec![i as u32, 0],
                label: if a { Label::Anomalous } else { Label::Normal },
                origin: "S".into(),
                session_id: None,
            })
            .collect();
        let anomalous = labels.iter().filter(|&&a| a).count();
        match split(&windows, seed) {
            Err(_) => prop_assert!(labels.len() - anomalous < anomalous),
            Ok(parts) => {
                let ids = |ws: &[Window]| -> BTreeSet<u32> { ws.iter().map(|w| w.keys[0]).collect() };
                let (tr, te) = (ids(&parts.train), ids(&parts.test));
                prop_assert!(tr.is_disjoint(&te));
                prop_assert_eq!(tr.len() + te.len(), windows.len());
                prop_assert!(parts.train.iter().all(|w| w.label == Label::Normal));
                let test_anom = parts.test.iter().filter(|w| w.label.is_anomalous()).count();
                prop_assert_eq!(test_anom, anomalous);
                prop_assert_eq!(parts.test.len(), 2 * anomalous);
                // input order is kept on both sides
                prop_assert!(parts.train.windows(2).all(|w| w[0].keys[0] < w[1].keys[0]));
                prop_assert!(parts.test.windows(2).all(|w| w[0].keys[0] < w[1].keys[0]));
            }
        }
    }

    #[test]
    fn metrics_match_counting(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let verdicts: Vec<Verdict> = pairs.iter().map(|p| if p.0 { Verdict::Anomalous } else { Verdict::Normal }).collect();
        let labels: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Anomalous } else { Label::Normal }).collect();
        let m = metrics(&verdicts, &labels).unwrap();
        let count = |v: bool, l: bool| pairs.iter().filter(|p| p.0 == v && p.1 == l).count();
        prop_assert_eq!(m, Metrics::from_counts(count(true, true), count(true, false), count(false, true), count(false, false)));
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }

    #[test]
    fn quantile_is_monotone_and_bounded(values in prop::collection::vec(-1e3..1e3f64, 1..60), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (qa, qb) = (quantile(&values, lo).unwrap(), quantile(&values, hi).unwrap());
        prop_assert!(qa <= qb);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= qa && qb <= max);
        prop_assert_eq!(quantile(&values, 1.0).unwrap(), max);
    }

    #[test]
    fn contamination_flags_exactly_the_budget(scores in prop::collection::vec(-5.0..5.0f64, 1..80), rho in 0.01..0.99f64) {
        let mut scored: Vec<ScoredWindow> = scores
            .iter()
            .map(|&e| ScoredWindow {
                origin: "S".into(),
                session_id: None,
                label: Label::Normal,
                energy: Some(e),
                recon_error: 0.0,
                h: Vec::new(),
                verdict: None,
            })
            .collect();
        let t = threshold(ThresholdPolicy::Contamination { rho }, None, &mut scored, ScoreMode::Energy).unwrap();
        let flagged = scored.iter().filter(|s| s.verdict == Some(Verdict::Anomalous)).count();
        prop_assert_eq!(flagged, ((rho * scores.len() as f64).ceil() as usize).min(scores.len()));
        for s in &scored {
            let e = s.energy.unwrap();
            if e > t {
                prop_assert_eq!(s.verdict, Some(Verdict::Anomalous));
            }
            if e < t {
                prop_assert_eq!(s.verdict, Some(Verdict::Normal));
            }
        }
    }

    #[test]
    fn reparsing_is_byte_stable(picks in prop::collection::vec((0usize..5, 0u32..5000), 1..60)) {
        const FORMS: [&str; 5] = [
            "Receiving block blk_{} src /10.0.0.1:50010",
            "exception syndrome register: 0x{}",
            "user {} logged in",
            "PacketResponder {} terminating",
            "instruction cache parity error corrected",
        ];
        let lines: Vec<String> = picks.iter().map(|&(f, n)| FORMS[f].replace("{}", &n.to_string())).collect();
        let cfg = ParserConfig::default();
        let a = parse_corpus(lines.iter().map(String::as_str), &cfg, None).unwrap();
        let b = parse_corpus(lines.iter().map(String::as_str), &cfg, None).unwrap();
        prop_assert_eq!(a.store.to_text(), b.store.to_text());
        prop_assert_eq!(a.keys, b.keys);
    }
}
