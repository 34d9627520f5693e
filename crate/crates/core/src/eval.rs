//! Metrics, the Easy/Hard difficulty split, report assembly, and the
//! latent-distribution KL diagnostic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{filter_by_plants, SampleWindow};
use crate::error::{Error, Result};
use crate::model::{train, FusionNet, TrainOptions};
use crate::tensor::Tensor;

/// Anything that can turn a sample window into a [T_out, C_ts] forecast.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;
    fn predict(&self, w: &SampleWindow) -> Result<Tensor>;
}

/// Mean absolute error and root mean squared error over matching tensors.
pub fn mae_rmse(y_hat: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    if y_hat.shape != y.shape {
        return Err(Error::shape("mae_rmse", &y_hat.shape, &y.shape));
    }
    if y.data.is_empty() {
        return Err(Error::Invalid("mae_rmse: empty input".into()));
    }
    let n = y.data.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (a, b) in y_hat.data.iter().zip(&y.data) {
        let d = a - b;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
}

/// `|ln(2/3)|`, the boundary on the day-over-day area log-ratio.
pub fn difficulty_threshold() -> f64 {
    (2.0_f64 / 3.0).ln().abs()
}

/// Day-over-day difficulty: r = |ln(area(y) / area(y_prev))|, Easy iff
/// r < |ln(2/3)|. Both areas zero counts as Easy (a dead plant is perfectly
/// persistent); exactly one zero area is Hard (r = infinity).
pub fn difficulty(w: &SampleWindow) -> (Difficulty, f64) {
    let area_y: f64 = w.y.data.iter().sum();
    let area_prev: f64 = w.x_ts.data.iter().sum();
    if area_y == 0.0 && area_prev == 0.0 {
        return (Difficulty::Easy, 0.0);
    }
    if area_y == 0.0 || area_prev == 0.0 {
        return (Difficulty::Hard, f64::INFINITY);
    }
    let r = (area_y / area_prev).ln().abs();
    if r < difficulty_threshold() {
        (Difficulty::Easy, r)
    } else {
        (Difficulty::Hard, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

impl MetricRow {
    fn from_sums(abs: f64, sq: f64, points: usize, count: usize) -> MetricRow {
        if points == 0 {
            MetricRow { mae: 0.0, rmse: 0.0, count }
        } else {
            MetricRow {
                mae: abs / points as f64,
                rmse: (sq / points as f64).sqrt(),
                count,
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub model: String,
    pub all: MetricRow,
    pub easy: MetricRow,
    pub hard: MetricRow,
    pub per_plant: BTreeMap<String, MetricRow>,
    /// Prediction failures, counted and reported, never silently dropped.
    pub failures: Vec<String>,
}

impl EvalReport {
    /// Aligned-column table mirroring the All / Easy / Hard layout.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("scenario: {}\n", self.scenario));
        s.push_str(&format!(
            "{:<24} {:>12} {:>12} {:>8}\n",
            "subset", "MAE", "RMSE", "count"
        ));
        for (name, row) in [("All", &self.all), ("Easy", &self.easy), ("Hard", &self.hard)] {
            s.push_str(&format!(
                "{:<24} {:>12.5} {:>12.5} {:>8}\n",
                format!("{} ({})", name, row.count),
                row.mae,
                row.rmse,
                row.count
            ));
        }
        for (plant, row) in &self.per_plant {
            s.push_str(&format!(
                "{:<24} {:>12.5} {:>12.5} {:>8}\n",
                plant, row.mae, row.rmse, row.count
            ));
        }
        if !self.failures.is_empty() {
            s.push_str(&format!("failures: {}\n", self.failures.len()));
        }
        s
    }
}

#[derive(Debug, Clone)]
struct PerWindow {
    plant: String,
    difficulty: Difficulty,
    abs: f64,
    sq: f64,
    points: usize,
}

/// Evaluate a forecaster over windows, splitting metrics by difficulty.
/// Work fans out over `threads` chunks; the reduction runs over the
/// window-ordered results, so the report is identical for any thread count.
pub fn evaluate(
    model: &dyn Forecaster,
    windows: &[SampleWindow],
    threads: usize,
    scenario: &str,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Invalid("evaluate: no windows".into()));
    }
    let threads = threads.max(1).min(windows.len());
    let chunk_size = windows.len().div_ceil(threads);
    let results: Vec<std::result::Result<PerWindow, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = windows
            .chunks(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|w| {
                            let (diff, _) = difficulty(w);
                            match model.predict(w) {
                                Err(e) => Err(format!("{} t0={}: {e}", w.plant.plant_id, w.t0)),
                                Ok(pred) => {
                                    if pred.shape != w.y.shape {
                                        return Err(format!(
                                            "{} t0={}: prediction shape {:?} != target {:?}",
                                            w.plant.plant_id, w.t0, pred.shape, w.y.shape
                                        ));
                                    }
                                    let n = w.y.data.len();
                                    let mut abs = 0.0;
                                    let mut sq = 0.0;
                                    for (a, b) in pred.data.iter().zip(&w.y.data) {
                                        let d = a - b;
                                        abs += d.abs();
                                        sq += d * d;
                                    }
                                    Ok(PerWindow {
                                        plant: w.plant.plant_id.clone(),
                                        difficulty: diff,
                                        abs,
                                        sq,
                                        points: n,
                                    })
                                }
                            }
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("eval worker")).collect()
    });

    let mut failures = Vec::new();
    let mut all = (0.0, 0.0, 0usize, 0usize);
    let mut easy = (0.0, 0.0, 0usize, 0usize);
    let mut hard = (0.0, 0.0, 0usize, 0usize);
    let mut per_plant: BTreeMap<String, (f64, f64, usize, usize)> = BTreeMap::new();
    for r in results {
        match r {
            Err(msg) => failures.push(msg),
            Ok(pw) => {
                let bump = |acc: &mut (f64, f64, usize, usize)| {
                    acc.0 += pw.abs;
                    acc.1 += pw.sq;
                    acc.2 += pw.points;
                    acc.3 += 1;
                };
                bump(&mut all);
                match pw.difficulty {
                    Difficulty::Easy => bump(&mut easy),
                    Difficulty::Hard => bump(&mut hard),
                }
                bump(per_plant.entry(pw.plant.clone()).or_insert((0.0, 0.0, 0, 0)));
            }
        }
    }
    Ok(EvalReport {
        scenario: scenario.to_string(),
        model: model.name().to_string(),
        all: MetricRow::from_sums(all.0, all.1, all.2, all.3),
        easy: MetricRow::from_sums(easy.0, easy.1, easy.2, easy.3),
        hard: MetricRow::from_sums(hard.0, hard.1, hard.2, hard.3),
        per_plant: per_plant
            .into_iter()
            .map(|(k, (a, s, p, c))| (k, MetricRow::from_sums(a, s, p, c)))
            .collect(),
        failures,
    })
}

/// One CSV line per window: plant, forecast start, difficulty, MAE, RMSE.
pub fn per_window_csv(model: &dyn Forecaster, windows: &[SampleWindow]) -> Result<String> {
    let mut csv = String::from("plant_id,t0,difficulty,mae,rmse\n");
    for w in windows {
        let (diff, _) = difficulty(w);
        let pred = model.predict(w)?;
        let (mae, rmse) = mae_rmse(&pred, &w.y)?;
        csv.push_str(&format!(
            "{},{},{:?},{},{}\n",
            w.plant.plant_id, w.t0, diff, mae, rmse
        ));
    }
    Ok(csv)
}

/// What the zero-shot run actually touched, for leakage auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroShotAudit {
    pub train_plants: BTreeSet<String>,
    pub test_plants: BTreeSet<String>,
    /// Plants whose windows entered a training batch.
    pub trained_on: BTreeSet<String>,
}

/// Zero-shot protocol: train only on `train_plants`' windows, evaluate on
/// `test_plants`' windows. The plant sets must be disjoint; the returned
/// audit proves training touched no test plant.
pub fn zero_shot_eval(
    windows: &[SampleWindow],
    train_plants: &BTreeSet<String>,
    test_plants: &BTreeSet<String>,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    threads: usize,
) -> Result<(EvalReport, ZeroShotAudit, FusionNet)> {
    if train_plants.is_empty() || test_plants.is_empty() {
        return Err(Error::Data("zero-shot: both plant sets must be non-empty".into()));
    }
    if let Some(shared) = train_plants.intersection(test_plants).next() {
        return Err(Error::Data(format!(
            "zero-shot: plant sets overlap (e.g. {shared}); refusing to train"
        )));
    }
    let mut access_log = BTreeSet::new();
    let train_ws = filter_by_plants(windows, train_plants, Some(&mut access_log));
    if train_ws.is_empty() {
        return Err(Error::Data("zero-shot: no windows for the training plants".into()));
    }
    let (net, log) = train(cfg, &train_ws, opts)?;
    if !log.plants_touched.is_subset(train_plants) {
        return Err(Error::Data(format!(
            "zero-shot: training touched plants outside the train set: {:?}",
            log.plants_touched.difference(train_plants).collect::<Vec<_>>()
        )));
    }
    let test_ws = filter_by_plants(windows, test_plants, None);
    if test_ws.is_empty() {
        return Err(Error::Data("zero-shot: no windows for the test plants".into()));
    }
    let scenario = format!(
        "zero-shot train={:?} test={:?}",
        train_plants.iter().collect::<Vec<_>>(),
        test_plants.iter().collect::<Vec<_>>()
    );
    let report = evaluate(&net, &test_ws, threads, &scenario)?;
    let audit = ZeroShotAudit {
        train_plants: train_plants.clone(),
        test_plants: test_plants.clone(),
        trained_on: log.plants_touched,
    };
    Ok((report, audit, net))
}

/// Histogram-based latent diagnostics: 64 equal-width bins over the pooled
/// range, additive smoothing 1e-9, KL(ctx || ts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    pub hist_ctx: Vec<f64>,
    pub hist_ts: Vec<f64>,
    pub kl: f64,
    pub vq_on: bool,
    pub bins: usize,
    pub range: (f64, f64),
}

pub const KL_BINS: usize = 64;
pub const KL_SMOOTHING: f64 = 1e-9;

pub fn latent_kl(ctx_values: &[f64], ts_values: &[f64], vq_on: bool) -> Result<LatentDiagnostics> {
    if ctx_values.is_empty() || ts_values.is_empty() {
        return Err(Error::Invalid("latent_kl: empty latent set".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in ctx_values.iter().chain(ts_values) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(Error::Invalid(format!(
            "latent_kl: degenerate single-bin range [{lo}, {hi}]"
        )));
    }
    let hist = |values: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; KL_BINS];
        for &v in values {
            let mut b = ((v - lo) / (hi - lo) * KL_BINS as f64) as usize;
            if b >= KL_BINS {
                b = KL_BINS - 1;
            }
            h[b] += 1.0;
        }
        let total: f64 = h.iter().sum();
        // normalize, smooth additively, renormalize
        let smoothed: Vec<f64> = h.iter().map(|c| c / total + KL_SMOOTHING).collect();
        let z: f64 = smoothed.iter().sum();
        smoothed.into_iter().map(|p| p / z).collect()
    };
    let p = hist(ctx_values);
    let q = hist(ts_values);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(pi, qi)| if *pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum();
    Ok(LatentDiagnostics {
        hist_ctx: p,
        hist_ts: q,
        kl: kl.max(0.0),
        vq_on,
        bins: KL_BINS,
        range: (lo, hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PlantMeta;
    use crate::rng::SeedTree;
    use std::sync::Arc;

    fn window(plant: &str, x_ts: Vec<f64>, y: Vec<f64>, t0: i64) -> SampleWindow {
        SampleWindow {
            x_ts: Tensor::from_vec(vec![24, 1], x_ts).unwrap(),
            x_ctx: Arc::new(Tensor::zeros(&[24, 1, 4, 4])),
            x_aux: Tensor::zeros(&[24, 2]),
            y: Tensor::from_vec(vec![24, 1], y).unwrap(),
            plant: PlantMeta {
                plant_id: plant.into(),
                lat: 0.0,
                lon: 0.0,
                capacity: 1.0,
            },
            t0,
        }
    }

    struct Persist;
    impl Forecaster for Persist {
        fn name(&self) -> &str {
            "persistence"
        }
        fn predict(&self, w: &SampleWindow) -> Result<Tensor> {
            Ok(w.x_ts.clone())
        }
    }

    struct FailEven;
    impl Forecaster for FailEven {
        fn name(&self) -> &str {
            "fail-even"
        }
        fn predict(&self, w: &SampleWindow) -> Result<Tensor> {
            if w.t0 % 48 == 0 {
                Err(Error::Invalid("synthetic failure".into()))
            } else {
                Ok(w.x_ts.clone())
            }
        }
    }

    #[test]
    fn mae_rmse_worked_examples() {
        let a = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let (mae, rmse) = mae_rmse(&a, &b).unwrap();
        assert!((mae - 0.5).abs() < 1e-12);
        assert!((rmse - 0.5_f64.sqrt()).abs() < 1e-12);
        let (m0, r0) = mae_rmse(&b, &b).unwrap();
        assert_eq!((m0, r0), (0.0, 0.0));
    }

    #[test]
    fn rmse_dominates_mae() {
        let mut rng = SeedTree::new(70).rng();
        for _ in 0..50 {
            let a = Tensor::randn(&[17], 1.0, &mut rng);
            let b = Tensor::randn(&[17], 1.0, &mut rng);
            let (mae, rmse) = mae_rmse(&a, &b).unwrap();
            assert!(rmse >= mae - 1e-12);
        }
    }

    #[test]
    fn mae_rmse_error_paths() {
        let a = Tensor::zeros(&[3]);
        let b = Tensor::zeros(&[4]);
        assert!(mae_rmse(&a, &b).is_err());
        let e = Tensor::zeros(&[0]);
        assert!(mae_rmse(&e, &e).is_err());
    }

    #[test]
    fn difficulty_threshold_value() {
        assert!((difficulty_threshold() - 0.405_465_108_108_164_4).abs() < 1e-12);
    }

    #[test]
    fn difficulty_classification_examples() {
        // equal areas -> r = 0 -> Easy
        let w = window("p", vec![0.1; 24], vec![0.1; 24], 0);
        let (d, r) = difficulty(&w);
        assert_eq!(d, Difficulty::Easy);
        assert_eq!(r, 0.0);
        // tripled -> r = ln 3 -> Hard
        let w = window("p", vec![0.1; 24], vec![0.3; 24], 0);
        let (d, r) = difficulty(&w);
        assert_eq!(d, Difficulty::Hard);
        assert!((r - 3.0_f64.ln()).abs() < 1e-12);
        // 1.4x -> r ~ 0.3365 -> Easy
        let w = window("p", vec![0.1; 24], vec![0.14; 24], 0);
        let (d, r) = difficulty(&w);
        assert_eq!(d, Difficulty::Easy);
        assert!((r - 1.4_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn difficulty_zero_area_rules() {
        let both = window("p", vec![0.0; 24], vec![0.0; 24], 0);
        assert_eq!(difficulty(&both), (Difficulty::Easy, 0.0));
        let one = window("p", vec![0.0; 24], vec![0.2; 24], 0);
        let (d, r) = difficulty(&one);
        assert_eq!(d, Difficulty::Hard);
        assert!(r.is_infinite());
    }

    fn demo_windows() -> Vec<SampleWindow> {
        let mut ws = Vec::new();
        for (i, plant) in ["a", "b"].iter().enumerate() {
            // easy: repeat weather; hard: big jump
            ws.push(window(plant, vec![0.2; 24], vec![0.2; 24], 48 * i as i64));
            ws.push(window(plant, vec![0.1; 24], vec![0.5; 24], 48 * i as i64 + 24));
        }
        ws
    }

    #[test]
    fn subset_counts_sum_to_all() {
        let ws = demo_windows();
        let report = evaluate(&Persist, &ws, 1, "unit").unwrap();
        assert_eq!(report.all.count, report.easy.count + report.hard.count);
        assert_eq!(report.all.count, 4);
        assert_eq!(report.easy.count, 2);
        let plant_total: usize = report.per_plant.values().map(|r| r.count).sum();
        assert_eq!(plant_total, report.all.count);
    }

    #[test]
    fn persistence_on_repeat_weather_scores_zero_on_easy() {
        let ws = vec![window("a", vec![0.3; 24], vec![0.3; 24], 0)];
        let report = evaluate(&Persist, &ws, 1, "unit").unwrap();
        assert_eq!(report.easy.mae, 0.0);
        assert_eq!(report.all.rmse, 0.0);
    }

    #[test]
    fn report_matches_naive_recomputation() {
        let ws = demo_windows();
        let report = evaluate(&Persist, &ws, 2, "unit").unwrap();
        // naive recomputation: per-window error sums accumulated in window
        // order (the report's documented reduction), recomputed from scratch
        let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
        for w in &ws {
            let (mut wa, mut wsq) = (0.0, 0.0);
            for (a, b) in w.x_ts.data.iter().zip(&w.y.data) {
                let d = a - b;
                wa += d.abs();
                wsq += d * d;
            }
            abs += wa;
            sq += wsq;
            n += w.y.data.len();
        }
        let mae = abs / n as f64;
        let rmse = (sq / n as f64).sqrt();
        assert_eq!(report.all.mae.to_bits(), mae.to_bits());
        assert_eq!(report.all.rmse.to_bits(), rmse.to_bits());
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let ws = demo_windows();
        let r1 = evaluate(&Persist, &ws, 1, "unit").unwrap();
        let r3 = evaluate(&Persist, &ws, 3, "unit").unwrap();
        assert_eq!(r1.all.mae.to_bits(), r3.all.mae.to_bits());
        assert_eq!(r1.hard.rmse.to_bits(), r3.hard.rmse.to_bits());
    }

    #[test]
    fn failures_are_counted_not_dropped() {
        let ws = demo_windows();
        let report = evaluate(&FailEven, &ws, 1, "unit").unwrap();
        assert_eq!(report.failures.len(), 2); // t0 = 0 and t0 = 48 fail
        assert_eq!(report.all.count, 2);
        assert_eq!(report.all.count, report.easy.count + report.hard.count);
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let vals: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = latent_kl(&vals, &vals, true).unwrap();
        assert!(d.kl.abs() < 1e-12);
        assert!((d.hist_ctx.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = SeedTree::new(71).rng();
        for _ in 0..20 {
            let a: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..500).map(|_| rng.normal() * 2.0 + 0.5).collect();
            let d = latent_kl(&a, &b, false).unwrap();
            assert!(d.kl >= 0.0);
        }
    }

    #[test]
    fn kl_degenerate_range_is_an_error() {
        let flat = vec![1.0; 100];
        assert!(latent_kl(&flat, &flat, true).is_err());
    }

    #[test]
    fn zero_shot_refuses_overlapping_sets() {
        let ws = demo_windows();
        let cfg = ModelConfig::default();
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 1,
        };
        let set_a: BTreeSet<String> = ["a".to_string()].into();
        let overlapping: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        let err = zero_shot_eval(&ws, &set_a, &overlapping, &cfg, &opts, 1).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        let err = zero_shot_eval(&ws, &set_a, &set_a, &cfg, &opts, 1).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }
}
