//! WebAssembly bindings behind `www/index.html`.
//!
//! The plain functions return `Result<_, String>` so they can be tested on
//! the host; the `#[wasm_bindgen]` wrappers only convert errors.

use wasm_bindgen::prelude::*;

use mlad_core::entmax::{entmax, EntmaxConfig};
use mlad_core::gmm::{GmmStats, DEFAULT_EPSILON};
use mlad_core::logparse::{parse_corpus, ParserConfig, TemplateStore};
use mlad_core::tensorcore::Tensor;

const LLOYD_ITERS: usize = 20;

pub fn entmax_probs(scores: &[f64], alpha: f64) -> Result<Vec<f64>, String> {
    let cfg = EntmaxConfig::with_alpha(alpha).map_err(|e| e.to_string())?;
    entmax(scores, &cfg).map_err(|e| e.to_string())
}

/// `p_1` of `entmax([t, 0])` for `t` on an even grid over `[lo, hi]`.
pub fn entmax_curve(alpha: f64, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, String> {
    if steps < 2 || !(hi > lo) {
        return Err("curve needs at least two steps over a non-empty range".into());
    }
    (0..steps)
        .map(|i| {
            let t = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
            Ok(entmax_probs(&[t, 0.0], alpha)?[0])
        })
        .collect()
}

/// Fits a `k`-component mixture to 2-D points.
///
/// Centers come from farthest-point seeding plus Lloyd iterations; soft
/// memberships are α-entmax over negative squared distances, so larger α
/// gives harder assignments.
pub fn fit_mixture(points: &[f64], k: usize, alpha: f64) -> Result<GmmStats, String> {
    if points.len() % 2 != 0 {
        return Err("points must be flat (x, y) pairs".into());
    }
    let pts: Vec<[f64; 2]> = points.chunks(2).map(|c| [c[0], c[1]]).collect();
    if k == 0 || pts.len() < 2 * k {
        return Err(format!("{} points are too few for {k} components", pts.len()));
    }
    let dist2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centers = vec![pts[0]];
    while centers.len() < k {
        let far = pts
            .iter()
            .max_by(|a, b| {
                let da = centers.iter().map(|c| dist2(a, c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| dist2(b, c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("non-empty");
        centers.push(*far);
    }
    for _ in 0..LLOYD_ITERS {
        let mut sums = vec![[0.0; 3]; k];
        for p in &pts {
            let j = (0..k)
                .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                .expect("k > 0");
            sums[j][0] += p[0];
            sums[j][1] += p[1];
            sums[j][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    let cfg = EntmaxConfig::with_alpha(alpha).map_err(|e| e.to_string())?;
    let mut y = Vec::with_capacity(pts.len() * k);
    for p in &pts {
        let logits: Vec<f64> = centers.iter().map(|c| -dist2(p, c)).collect();
        y.extend(entmax(&logits, &cfg).map_err(|e| e.to_string())?);
    }
    let h = Tensor::matrix(pts.len(), 2, points.to_vec()).map_err(|e| e.to_string())?;
    let y = Tensor::matrix(pts.len(), k, y).map_err(|e| e.to_string())?;
    GmmStats::estimate(&h, &y, DEFAULT_EPSILON).map_err(|e| e.to_string())
}

/// Energies on an `n×n` grid over `[x0, x1] × [y0, y1]`, row-major from
/// `y0` upward.
pub fn energy_field(
    points: &[f64],
    k: usize,
    alpha: f64,
    bounds: [f64; 4],
    n: usize,
) -> Result<Vec<f64>, String> {
    let stats = fit_mixture(points, k, alpha)?;
    let [x0, x1, y0, y1] = bounds;
    if n < 2 {
        return Err("grid needs at least two cells per side".into());
    }
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let e = stats
                .energy(&[step(x0, x1, c), step(y0, y1, r)])
                .map_err(|e| e.to_string())?;
            out.push(e);
        }
    }
    Ok(out)
}

pub struct Mined {
    pub store: TemplateStore,
    /// Template key per input line; `None` for lines the parser skipped.
    pub keys: Vec<Option<u32>>,
}

pub fn mine(text: &str) -> Result<Mined, String> {
    let lines: Vec<&str> = text.lines().collect();
    let parsed = parse_corpus(lines.iter().copied(), &ParserConfig::default(), None).map_err(|e| e.to_string())?;
    let mut keys = vec![None; lines.len()];
    for (line, key) in parsed.keys {
        keys[line] = Some(key);
    }
    Ok(Mined {
        store: parsed.store,
        keys,
    })
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = entmax)]
pub fn entmax_js(scores: Vec<f64>, alpha: f64) -> Result<Vec<f64>, JsError> {
    entmax_probs(&scores, alpha).map_err(js)
}

#[wasm_bindgen(js_name = entmaxCurve)]
pub fn entmax_curve_js(alpha: f64, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    entmax_curve(alpha, lo, hi, steps).map_err(js)
}

#[wasm_bindgen(js_name = energyField)]
#[allow(clippy::too_many_arguments)]
pub fn energy_field_js(
    points: Vec<f64>,
    k: usize,
    alpha: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    energy_field(&points, k, alpha, [x0, x1, y0, y1], n).map_err(js)
}

/// `support<TAB>template` per mined template, in key order, followed by a
/// blank line and one key per input line (`-` when skipped).
#[wasm_bindgen(js_name = mineTemplates)]
pub fn mine_js(text: &str) -> Result<String, JsError> {
    let m = mine(text).map_err(js)?;
    let mut out = String::new();
    for t in m.store.iter() {
        out.push_str(&format!("{}\t{}\n", t.support_count, t.text()));
    }
    out.push('\n');
    for k in &m.keys {
        match k {
            Some(k) => out.push_str(&format!("{k}\n")),
            None => out.push_str("-\n"),
        }
    }
    Ok(out)
}
