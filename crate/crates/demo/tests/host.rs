use mlad_demo::{energy_field, entmax_curve, entmax_probs, fit_mixture, mine, mine_js};

#[test]
fn curve_runs_from_zero_to_one_for_sparse_alphas() {
    let c = entmax_curve(2.0, -2.0, 2.0, 9).unwrap();
    assert_eq!(c[0], 0.0);
    assert_eq!(c[8], 1.0);
    assert!((c[4] - 0.5).abs() < 1e-12);
    // softmax never saturates
    let s = entmax_curve(1.0, -2.0, 2.0, 9).unwrap();
    assert!(s[0] > 0.0 && s[8] < 1.0);
    assert!(c.windows(2).all(|w| w[0] <= w[1]));
    assert!(entmax_curve(1.5, 1.0, 1.0, 9).is_err());
    assert!(entmax_probs(&[1.0], 3.0).is_err());
}

fn two_blobs() -> Vec<f64> {
    let mut pts = Vec::new();
    for i in 0..20 {
        let t = i as f64 * 0.7;
        pts.extend([t.sin() * 0.3, t.cos() * 0.3]);
        pts.extend([4.0 + t.cos() * 0.3, 4.0 + t.sin() * 0.2]);
    }
    pts
}

#[test]
fn field_is_low_on_clusters_and_high_between() {
    let pts = two_blobs();
    let stats = fit_mixture(&pts, 2, 1.5).unwrap();
    let mut means = stats.mu.clone();
    means.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert!(means[0][0].abs() < 0.2 && (means[1][0] - 4.0).abs() < 0.2, "{means:?}");
    let n = 5;
    let field = energy_field(&pts, 2, 1.5, [0.0, 4.0, 0.0, 4.0], n).unwrap();
    let at = |r: usize, c: usize| field[r * n + c];
    assert!(at(0, 0) < at(2, 2));
    assert!(at(4, 4) < at(2, 2));
    assert!(energy_field(&pts[..3], 2, 1.5, [0.0, 1.0, 0.0, 1.0], 4).is_err());
    assert!(fit_mixture(&pts[..4], 2, 1.5).is_err());
}

#[test]
fn mining_groups_variants() {
    let text = "exception syndrome register: 0x008000\nexception syndrome register: 0x00a000\nuser alice logged in\n\n";
    let m = mine(text).unwrap();
    assert_eq!(m.keys[0], m.keys[1]);
    assert_ne!(m.keys[0], m.keys[2]);
    assert_eq!(m.store.get(m.keys[0].unwrap()).unwrap().text(), "exception syndrome register: <*>");
    let out = mine_js(text).unwrap();
    assert!(out.starts_with("2\texception syndrome register: <*>\n"), "{out}");
}
