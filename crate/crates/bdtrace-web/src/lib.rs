//! Browser bindings. Every function returns a JSON string; errors come back
//! as `{"error": "..."}`.

use bdtrace::bd_core::{
    chain_from_feller, compute_scale_speed, state_embedding, AtomicMeasure, BirthDeathMatrix, FellerParams,
};
use bdtrace::pathsim::{simulate_feller_bm, SimConfig};
use bdtrace::resolvent::{phi_minimal, psi_from_image};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn reply(r: bdtrace::Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn params(p1: f64, p2: f64, p3: f64, jump_at: f64, jump_mass: f64) -> bdtrace::Result<FellerParams> {
    let p4 = if jump_mass > 0.0 {
        AtomicMeasure::point(jump_at, jump_mass)?
    } else {
        AtomicMeasure::empty()
    };
    FellerParams::new(p1, p2, p3, p4)
}

/// Scale, speed and class of the geometric matrix
/// `a_k = a_scale a_ratio^(k-1)`, `b_k = b_scale b_ratio^k`.
#[wasm_bindgen]
pub fn classify(a_scale: f64, a_ratio: f64, b_scale: f64, b_ratio: f64, cap: usize) -> String {
    reply((|| {
        let q = BirthDeathMatrix::geometric(a_scale, a_ratio, b_scale, b_ratio, cap)?;
        let ss = compute_scale_speed(&q);
        Ok(json!({
            "class": format!("{:?}", ss.class),
            "c": ss.c,
            "mu": ss.mu,
            "c_inf": ss.c_inf,
        }))
    })())
}

/// `Psi_ij(alpha)`, `i, j <= rows`, for the trace of the given Feller
/// Brownian motion on the `b_0 = 1, a_k = 2 4^(k-1), b_k = 4^k` chain.
#[wasm_bindgen]
pub fn trace_resolvent(p1: f64, p2: f64, p3: f64, jump_at: f64, jump_mass: f64, alpha: f64, rows: usize) -> String {
    reply((|| {
        let fp = params(p1, p2, p3, jump_at, jump_mass)?;
        let q = BirthDeathMatrix::q_geo(200);
        let ss = compute_scale_speed(&q);
        let emb = state_embedding(&ss)?;
        let image = chain_from_feller(&fp, &emb)?;
        let psi = psi_from_image(&phi_minimal(&q, &ss, alpha, 200)?, &ss, &image)?;
        let table: Vec<Vec<f64>> = (0..=rows).map(|i| (0..=rows).map(|j| psi.psi(i, j)).collect()).collect();
        Ok(json!({ "alpha": alpha, "psi": table }))
    })())
}

/// One sample path from 0, thinned to at most `points` knots.
#[wasm_bindgen]
pub fn sample_path(
    p1: f64,
    p2: f64,
    p3: f64,
    jump_at: f64,
    jump_mass: f64,
    horizon: f64,
    seed: u64,
    points: usize,
) -> String {
    reply((|| {
        let fp = params(p1, p2, p3, jump_at, jump_mass)?;
        let cfg = SimConfig::new(1e-4, horizon, seed);
        let fpath = simulate_feller_bm(&fp, &cfg, 0.0, &[], 0)?;
        let path = fpath.path;
        let stride = (path.len() / points.max(1)).max(1);
        let idx: Vec<usize> = (0..path.len()).step_by(stride).collect();
        Ok(json!({
            "t": idx.iter().map(|&k| path.times[k]).collect::<Vec<_>>(),
            "y": idx.iter().map(|&k| path.values[k]).collect::<Vec<_>>(),
            "killed": path.killed,
            "lifetime": if path.killed { Some(path.lifetime) } else { None },
        }))
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_four_is_regular() {
        let v: Value = serde_json::from_str(&classify(2.0, 4.0, 1.0, 4.0, 60)).unwrap();
        assert_eq!(v["class"], "Regular");
    }

    #[test]
    fn reflecting_rows_are_honest() {
        let v: Value = serde_json::from_str(&trace_resolvent(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 3)).unwrap();
        assert!(v["psi"][0][0].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn errors_are_reported() {
        let v: Value = serde_json::from_str(&sample_path(-1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1, 10)).unwrap();
        assert!(v["error"].is_string());
    }
}
