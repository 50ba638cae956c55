//! WebAssembly bindings for the line-fitting demo page.
//!
//! Every export returns a JSON string so the page needs no glue beyond
//! `JSON.parse`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use rlsac::agent::Model;
use rlsac::bench::{maa, median, ransac_run, rlsac_run, task_error, EvalConfig, SearchOutcome};
use rlsac::scenes::{gen_line_scene, GroundTruth, Hypothesis, SceneData};

/// Policy trained on 100-point line scenes at outlier rate 0.5.
const MODEL: &str = include_str!("../assets/line_policy.txt");

/// Accuracy threshold of the line benchmark, in degrees.
const LINE_TOLERANCE: f64 = 0.5;

fn fail(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn line_json(l: &rlsac::geometry::Line2D) -> Value {
    json!([l.a, l.b, l.c])
}

fn scene_json(s: &SceneData) -> Value {
    let points: Vec<Value> = (0..s.n).map(|i| json!(s.point(i))).collect();
    let truth = match &s.ground_truth {
        GroundTruth::Line(l) => line_json(l),
        GroundTruth::Epipolar { .. } => Value::Null,
    };
    json!({ "points": points, "inlier": s.true_inlier_mask, "truth": truth })
}

fn outcome_json(s: &SceneData, o: &SearchOutcome) -> Value {
    let line = match o.hypothesis {
        Some(Hypothesis::Line(l)) => line_json(&l),
        _ => Value::Null,
    };
    let sets: Vec<&Vec<usize>> = o.step_log.iter().map(|r| &r.action).collect();
    json!({
        "line": line,
        "error_deg": task_error(s, o.hypothesis.as_ref()).combined,
        "best_inlier_ratio": o.best_inlier_ratio,
        "hypotheses": o.hypotheses_used,
        "sets": sets,
    })
}

fn eval_config(episodes: usize, steps: usize, seed: u64) -> Result<EvalConfig, JsError> {
    let c = EvalConfig {
        episodes_per_scene: episodes,
        steps_per_episode: steps,
        seed,
        ..EvalConfig::default()
    };
    c.validate().map_err(fail)?;
    Ok(c)
}

/// Holds the bundled policy between calls.
#[wasm_bindgen]
pub struct Demo {
    model: Model,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Ok(Self {
            model: Model::from_text(MODEL).map_err(fail)?,
        })
    }

    /// A seeded line scene: points, ground-truth inlier flags and the true
    /// line `[a, b, c]`.
    pub fn scene(&self, rate: f64, n: usize, seed: u64) -> Result<String, JsError> {
        let s = gen_line_scene(rate, n, seed).map_err(fail)?;
        Ok(scene_json(&s).to_string())
    }

    /// Fits one scene with RANSAC and with the learned sampler under the
    /// same hypothesis budget.
    pub fn compare(&self, rate: f64, n: usize, seed: u64, episodes: usize, steps: usize) -> Result<String, JsError> {
        let s = gen_line_scene(rate, n, seed).map_err(fail)?;
        let cfg = eval_config(episodes, steps, seed)?;
        let ransac = ransac_run(&s, cfg.budget(), &mut ChaCha8Rng::seed_from_u64(seed)).map_err(fail)?;
        let learned = rlsac_run(&self.model.policy, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(fail)?;
        Ok(json!({
            "scene": scene_json(&s),
            "budget": cfg.budget(),
            "ransac": outcome_json(&s, &ransac),
            "rlsac": outcome_json(&s, &learned),
        })
        .to_string())
    }

    /// mAA and median error of both methods at each rate over `scenes`
    /// seeded scenes.
    pub fn sweep(&self, rates: Vec<f64>, scenes: usize, n: usize, episodes: usize, steps: usize) -> Result<String, JsError> {
        let cfg = eval_config(episodes, steps, 0)?;
        let mut rows = Vec::with_capacity(rates.len());
        for &rate in &rates {
            let (mut ra, mut rl) = (Vec::with_capacity(scenes), Vec::with_capacity(scenes));
            for i in 0..scenes as u64 {
                let s = gen_line_scene(rate, n, 7_000_000 + i).map_err(fail)?;
                let o = ransac_run(&s, cfg.budget(), &mut ChaCha8Rng::seed_from_u64(i)).map_err(fail)?;
                ra.push(task_error(&s, o.hypothesis.as_ref()).combined);
                let o = rlsac_run(&self.model.policy, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(i)).map_err(fail)?;
                rl.push(task_error(&s, o.hypothesis.as_ref()).combined);
            }
            rows.push(json!({
                "rate": rate,
                "ransac": { "maa": maa(&ra, LINE_TOLERANCE).map_err(fail)?, "median": median(&ra).map_err(fail)? },
                "rlsac": { "maa": maa(&rl, LINE_TOLERANCE).map_err(fail)?, "median": median(&rl).map_err(fail)? },
            }));
        }
        Ok(Value::Array(rows).to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exports_produce_json() {
        let d = Demo::new().unwrap();
        let s: Value = serde_json::from_str(&d.scene(0.5, 40, 3).unwrap()).unwrap();
        assert_eq!(s["points"].as_array().unwrap().len(), 40);
        let c: Value = serde_json::from_str(&d.compare(0.5, 40, 3, 2, 4).unwrap()).unwrap();
        assert_eq!(c["budget"], 10);
        assert_eq!(c["ransac"]["hypotheses"], 10);
        assert_eq!(c["rlsac"]["sets"].as_array().unwrap().len(), 10);
        let w: Value = serde_json::from_str(&d.sweep(vec![0.2, 0.6], 3, 40, 2, 4).unwrap()).unwrap();
        assert_eq!(w.as_array().unwrap().len(), 2);
        assert!(w[1]["rlsac"]["maa"].as_f64().unwrap() <= 1.0);
    }
}
