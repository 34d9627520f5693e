//! Dataset layout, windowing, chronological/by-plant splits, and
//! normalization.
//!
//! On-disk layout (all little-endian, format versioned by magic string):
//!   manifest.json          dataset metadata, region, split fractions
//!   plants.csv             plant_id, normalized lat/lon, capacity (kW)
//!   ts/{plant_id}.csv      ISO-8601 UTC timestamp, raw power in kW
//!   ctx/{date}.fstn        per-day context stack [24, C_ctx, H, W]
//!   nwp/{plant_id}.fstn    per-plant covariates [n_hours, C_aux]

pub mod synth;
pub mod time;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantMeta {
    pub plant_id: String,
    /// Normalized latitude in [-1, 1] (anonymized coordinates).
    pub lat: f64,
    /// Normalized longitude in [-1, 1].
    pub lon: f64,
    /// Installed capacity in kW; power is normalized by this.
    pub capacity: f64,
}

/// True geographic extent of the synthetic region, mapping normalized
/// coordinates back to degrees for solar geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Region {
    /// Map normalized [-1, 1] coordinates to degrees.
    pub fn to_degrees(&self, lat_n: f64, lon_n: f64) -> (f64, f64) {
        let lat = self.lat_min + (lat_n + 1.0) / 2.0 * (self.lat_max - self.lat_min);
        let lon = self.lon_min + (lon_n + 1.0) / 2.0 * (self.lon_max - self.lon_min);
        (lat, lon)
    }
}

/// Per-channel standardization for the covariates; `std` is floored to 1 for
/// degenerate channels so application is always well-defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NwpStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub degenerate: Vec<usize>,
}

/// Relative path templates for each modality's files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPaths {
    pub plants: String,
    pub ts: String,
    pub ctx: String,
    pub nwp: String,
}

impl Default for LayoutPaths {
    fn default() -> Self {
        LayoutPaths {
            plants: "plants.csv".into(),
            ts: "ts/{plant_id}.csv".into(),
            ctx: "ctx/{date}.fstn".into(),
            nwp: "nwp/{plant_id}.fstn".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub plants: Vec<PlantMeta>,
    pub start_epoch_hour: i64,
    pub n_days: usize,
    pub resolution_minutes: u32,
    pub grid: [usize; 2],
    pub ctx_channels: usize,
    pub aux_channels: usize,
    pub region: Region,
    /// Hours to add to UTC so that hour 0 of the series is local midnight.
    pub tz_offset_hours: i64,
    pub split_fractions: [f64; 3],
    pub seed: u64,
    #[serde(default)]
    pub layout: LayoutPaths,
}

impl DatasetManifest {
    pub fn n_hours(&self) -> usize {
        self.n_days * 24
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Per plant, per hour; `None` marks a gap in the source series.
    pub power: BTreeMap<String, Vec<Option<f64>>>,
    /// Per plant [n_hours, C_aux].
    pub nwp: BTreeMap<String, Tensor>,
    /// Per day [24, C_ctx, H, W], shared across plants.
    pub ctx: Vec<Arc<Tensor>>,
    /// Whether power has been divided by capacity yet.
    pub power_normalized: bool,
}

/// One training/evaluation example: one past day and one target day.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    /// [T_in, C_ts] past-day normalized power.
    pub x_ts: Tensor,
    /// [T_in, C_ctx, H, W] past-day context stack (shared across plants).
    pub x_ctx: Arc<Tensor>,
    /// [T_out, C_aux] covariates covering exactly the target horizon.
    pub x_aux: Tensor,
    /// [T_out, C_ts] target-day normalized power.
    pub y: Tensor,
    pub plant: PlantMeta,
    /// Epoch hour of forecast start (first target hour).
    pub t0: i64,
}

pub struct WindowSet {
    pub windows: Vec<SampleWindow>,
    /// Log entries for windows skipped due to gaps.
    pub skipped: Vec<String>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("ts")).map_err(|e| Error::io(dir.display().to_string(), e))?;
        fs::create_dir_all(dir.join("ctx")).map_err(|e| Error::io(dir.display().to_string(), e))?;
        fs::create_dir_all(dir.join("nwp")).map_err(|e| Error::io(dir.display().to_string(), e))?;

        let manifest_json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        write_file(&dir.join("manifest.json"), manifest_json.as_bytes())?;

        let mut plants_csv = String::from("plant_id,lat,lon,capacity\n");
        for p in &self.manifest.plants {
            plants_csv.push_str(&format!("{},{},{},{}\n", p.plant_id, p.lat, p.lon, p.capacity));
        }
        write_file(&dir.join("plants.csv"), plants_csv.as_bytes())?;

        for p in &self.manifest.plants {
            let series = &self.power[&p.plant_id];
            let mut csv = String::from("timestamp,power\n");
            for (i, v) in series.iter().enumerate() {
                if let Some(v) = v {
                    let stamp = time::to_iso(self.manifest.start_epoch_hour + i as i64);
                    csv.push_str(&format!("{stamp},{v}\n"));
                }
            }
            write_file(&dir.join("ts").join(format!("{}.csv", p.plant_id)), csv.as_bytes())?;
        }

        for (day, stack) in self.ctx.iter().enumerate() {
            let tag = time::date_tag(self.manifest.start_epoch_hour + day as i64 * 24);
            container::write_tensor(&dir.join("ctx").join(format!("{tag}.fstn")), &format!("ctx.{tag}"), stack)?;
        }

        for p in &self.manifest.plants {
            container::write_tensor(
                &dir.join("nwp").join(format!("{}.fstn", p.plant_id)),
                &format!("nwp.{}", p.plant_id),
                &self.nwp[&p.plant_id],
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest_text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        let n_hours = manifest.n_hours();

        let mut power = BTreeMap::new();
        for p in &manifest.plants {
            let path = dir.join("ts").join(format!("{}.csv", p.plant_id));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut series: Vec<Option<f64>> = vec![None; n_hours];
            for (lineno, line) in text.lines().enumerate().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let (stamp, value) = line.split_once(',').ok_or_else(|| {
                    Error::Data(format!("{}:{}: expected 'timestamp,power'", path.display(), lineno + 1))
                })?;
                let h = time::from_iso(stamp.trim())?;
                let idx = h - manifest.start_epoch_hour;
                if idx < 0 || idx as usize >= n_hours {
                    return Err(Error::Data(format!(
                        "{}:{}: timestamp {stamp} outside dataset range",
                        path.display(),
                        lineno + 1
                    )));
                }
                let v: f64 = value.trim().parse().map_err(|_| {
                    Error::Data(format!("{}:{}: bad power '{value}'", path.display(), lineno + 1))
                })?;
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!(
                        "{}:{}: power {v} must be finite and non-negative",
                        path.display(),
                        lineno + 1
                    )));
                }
                series[idx as usize] = Some(v);
            }
            power.insert(p.plant_id.clone(), series);
        }

        let mut ctx = Vec::with_capacity(manifest.n_days);
        for day in 0..manifest.n_days {
            let tag = time::date_tag(manifest.start_epoch_hour + day as i64 * 24);
            let path = dir.join("ctx").join(format!("{tag}.fstn"));
            let (_, stack) = container::read_tensor(&path)?;
            let expect = vec![24, manifest.ctx_channels, manifest.grid[0], manifest.grid[1]];
            if stack.shape != expect {
                return Err(Error::shape("ctx stack", &stack.shape, &expect));
            }
            ctx.push(Arc::new(stack));
        }

        let mut nwp = BTreeMap::new();
        for p in &manifest.plants {
            let path = dir.join("nwp").join(format!("{}.fstn", p.plant_id));
            let (_, t) = container::read_tensor(&path)?;
            let expect = vec![n_hours, manifest.aux_channels];
            if t.shape != expect {
                return Err(Error::shape("nwp series", &t.shape, &expect));
            }
            nwp.insert(p.plant_id.clone(), t);
        }

        Ok(Dataset {
            manifest,
            power,
            nwp,
            ctx,
            power_normalized: false,
        })
    }

    pub fn plant(&self, id: &str) -> Option<&PlantMeta> {
        self.manifest.plants.iter().find(|p| p.plant_id == id)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Divide every power series by its plant capacity; values must land in [0, 1].
pub fn normalize_power(ds: &mut Dataset) -> Result<()> {
    if ds.power_normalized {
        return Ok(());
    }
    for p in &ds.manifest.plants {
        if p.capacity <= 0.0 {
            return Err(Error::Data(format!("{}: capacity {} must be positive", p.plant_id, p.capacity)));
        }
        let series = ds.power.get_mut(&p.plant_id).expect("plant series");
        for v in series.iter_mut().flatten() {
            let norm = *v / p.capacity;
            if norm > 1.0 + 1e-6 {
                return Err(Error::Data(format!(
                    "{}: power {v} exceeds capacity {}",
                    p.plant_id, p.capacity
                )));
            }
            *v = norm.clamp(0.0, 1.0);
        }
    }
    ds.power_normalized = true;
    Ok(())
}

/// Per-channel mean/std of the covariates over `hours_end` leading hours
/// (chronological mode) restricted to `plants` when given (by-plant mode).
pub fn nwp_stats(
    ds: &Dataset,
    plants: Option<&BTreeSet<String>>,
    hours_end: usize,
) -> Result<NwpStats> {
    let c = ds.manifest.aux_channels;
    let mut count = 0usize;
    let mut mean = vec![0.0; c];
    for (id, t) in &ds.nwp {
        if plants.map_or(false, |set| !set.contains(id)) {
            continue;
        }
        for row in 0..hours_end.min(ds.manifest.n_hours()) {
            for ch in 0..c {
                mean[ch] += t.data[row * c + ch];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("nwp_stats: no rows selected".into()));
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for (id, t) in &ds.nwp {
        if plants.map_or(false, |set| !set.contains(id)) {
            continue;
        }
        for row in 0..hours_end.min(ds.manifest.n_hours()) {
            for ch in 0..c {
                let d = t.data[row * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let mut std = vec![0.0; c];
    let mut degenerate = Vec::new();
    for ch in 0..c {
        let s = (var[ch] / count as f64).sqrt();
        if s <= 1e-12 {
            degenerate.push(ch);
            std[ch] = 1.0;
        } else {
            std[ch] = s;
        }
    }
    Ok(NwpStats { mean, std, degenerate })
}

/// Standardize every covariate channel in place. Degenerate channels are
/// centered only; the returned warnings name them.
pub fn apply_nwp_stats(ds: &mut Dataset, stats: &NwpStats) -> Vec<String> {
    let c = ds.manifest.aux_channels;
    for t in ds.nwp.values_mut() {
        for row in 0..t.shape[0] {
            for ch in 0..c {
                let v = &mut t.data[row * c + ch];
                *v = (*v - stats.mean[ch]) / stats.std[ch];
            }
        }
    }
    stats
        .degenerate
        .iter()
        .map(|ch| format!("nwp channel {ch} has zero variance in the fit window; centered only"))
        .collect()
}

/// Day-pair windows: inputs are day d, targets day d+1, advancing one day at
/// a time at local midnight. Windows touching a gap are skipped and logged.
pub fn build_windows(ds: &Dataset, t_in: usize, t_out: usize) -> Result<WindowSet> {
    if t_in != 24 || t_out != 24 {
        return Err(Error::Data(format!(
            "day-pair windowing requires t_in = t_out = 24, got {t_in}/{t_out}"
        )));
    }
    if !ds.power_normalized {
        return Err(Error::Data("build_windows: normalize power first".into()));
    }
    let c = ds.manifest.aux_channels;
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for p in &ds.manifest.plants {
        let series = &ds.power[&p.plant_id];
        let nwp = &ds.nwp[&p.plant_id];
        for day in 0..ds.manifest.n_days.saturating_sub(1) {
            let in_range = day * 24..(day + 1) * 24;
            let out_range = (day + 1) * 24..(day + 2) * 24;
            let gap = in_range.clone().chain(out_range.clone()).any(|i| series[i].is_none());
            if gap {
                skipped.push(format!(
                    "{} {}: gap in power series, window skipped",
                    p.plant_id,
                    time::date_tag(ds.manifest.start_epoch_hour + day as i64 * 24)
                ));
                continue;
            }
            let x_ts = Tensor::from_vec(
                vec![24, 1],
                in_range.clone().map(|i| series[i].unwrap()).collect(),
            )?;
            let y = Tensor::from_vec(
                vec![24, 1],
                out_range.clone().map(|i| series[i].unwrap()).collect(),
            )?;
            let x_aux = Tensor::from_vec(
                vec![24, c],
                nwp.data[out_range.start * c..out_range.end * c].to_vec(),
            )?;
            windows.push(SampleWindow {
                x_ts,
                x_ctx: Arc::clone(&ds.ctx[day]),
                x_aux,
                y,
                plant: p.clone(),
                t0: ds.manifest.start_epoch_hour + out_range.start as i64,
            });
        }
    }
    Ok(WindowSet { windows, skipped })
}

/// Chronological split per plant: the first `fractions[0]` of each plant's
/// windows go to train, then validation, then test. No shuffling across the
/// time boundary; every plant is present in every split.
pub fn split_chronological(
    windows: Vec<SampleWindow>,
    fractions: [f64; 3],
) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>, Vec<SampleWindow>)> {
    if fractions.iter().any(|&f| f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut by_plant: BTreeMap<String, Vec<SampleWindow>> = BTreeMap::new();
    for w in windows {
        by_plant.entry(w.plant.plant_id.clone()).or_default().push(w);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (plant, mut ws) in by_plant {
        ws.sort_by_key(|w| w.t0);
        let n = ws.len();
        let n_train = (fractions[0] * n as f64).floor() as usize;
        let n_val = (fractions[1] * n as f64).floor() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::Data(format!(
                "{plant}: {n} windows are too few for three non-empty splits"
            )));
        }
        let mut ws = ws.into_iter();
        train.extend(ws.by_ref().take(n_train));
        val.extend(ws.by_ref().take(n_val));
        test.extend(ws);
    }
    Ok((train, val, test))
}

/// Keep only windows of the given plants, recording every plant id handed
/// out into `access_log` when provided (zero-shot training audit).
pub fn filter_by_plants(
    windows: &[SampleWindow],
    plants: &BTreeSet<String>,
    mut access_log: Option<&mut BTreeSet<String>>,
) -> Vec<SampleWindow> {
    windows
        .iter()
        .filter(|w| plants.contains(&w.plant.plant_id))
        .map(|w| {
            if let Some(log) = access_log.as_deref_mut() {
                log.insert(w.plant.plant_id.clone());
            }
            w.clone()
        })
        .collect()
}

/// FNV-1a over every file (sorted relative paths and contents); used to
/// assert byte-identical dataset regeneration.
pub fn dir_checksum(dir: &Path) -> Result<u64> {
    fn visit(dir: &Path, base: &Path, files: &mut Vec<std::path::PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = entry.path();
            if path.is_dir() {
                visit(&path, base, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    visit(dir, dir, &mut files)?;
    files.sort();
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        eat(rel.to_string_lossy().as_bytes());
        let contents = fs::read(f).map_err(|e| Error::io(f.display().to_string(), e))?;
        eat(&contents);
    }
    Ok(h)
}
