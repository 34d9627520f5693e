//! Deterministic synthetic trimodal dataset generator.
//!
//! Physics: each plant gets a clear-sky power curve from solar geometry; a
//! field of Gaussian cloud blobs advects across the grid with per-blob
//! velocity and a smooth lifetime envelope; plant power is the clear-sky
//! curve attenuated by the cloud value over the plant pixel plus small
//! multiplicative noise. Covariate channels are smoothed, biased transforms
//! of future irradiance and cloud cover; the context channel is the cloud
//! optical field, zeroed at night (no sunlight to reflect).
//!
//! Covariate channels, in order:
//!   0 clear-sky direct radiation     8 total cloud cover
//!   1 direct radiation               9 2 m temperature
//!   2 downward UV radiation         10 2 m dewpoint temperature
//!   3 surface solar radiation down  11 skin temperature
//!   4 surface net solar radiation   12 total precipitation
//!   5 surface pressure              13 100 m U wind component
//!   6 sunshine duration             14 100 m V wind component
//!   7 low cloud cover

use std::collections::BTreeMap;
use std::sync::Arc;

use super::time;
use super::{Dataset, DatasetManifest, PlantMeta, Region, FORMAT_VERSION};
use crate::baseline::{clearsky_ghi, solar_zenith};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree};
use crate::tensor::Tensor;

pub const STANDARD_AUX_CHANNELS: usize = 15;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_plants: usize,
    pub n_days: usize,
    /// [H, W] context grid.
    pub grid: [usize; 2],
    pub aux_channels: usize,
    pub seed: u64,
    /// Multiplicative measurement noise on power (0 disables).
    pub noise_std: f64,
    /// Scales the whole cloud field (0 gives cloud-free days).
    pub cloud_amplitude: f64,
    /// (year, month, day) of the first local day.
    pub start: (i64, u32, u32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_plants: 10,
            n_days: 120,
            grid: [32, 32],
            aux_channels: STANDARD_AUX_CHANNELS,
            seed: 42,
            noise_std: 0.02,
            cloud_amplitude: 1.0,
            start: (2021, 3, 1),
        }
    }
}

#[derive(Debug, Clone)]
struct CloudBlob {
    birth: f64,
    life: f64,
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    amp: f64,
}

impl CloudBlob {
    /// Smooth in/out envelope over the blob lifetime.
    fn envelope(&self, t: f64) -> f64 {
        if t < self.birth || t > self.birth + self.life {
            return 0.0;
        }
        self.amp * (std::f64::consts::PI * (t - self.birth) / self.life).sin()
    }

    fn center(&self, t: f64) -> (f64, f64) {
        let dt = t - self.birth;
        (self.x0 + self.vx * dt, self.y0 + self.vy * dt)
    }
}

fn field_at(blobs: &[&CloudBlob], x: f64, y: f64, t: f64) -> f64 {
    let mut v = 0.0;
    for b in blobs {
        let env = b.envelope(t);
        if env == 0.0 {
            continue;
        }
        let (cx, cy) = b.center(t);
        let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        v += env * (-d2 / (2.0 * b.radius * b.radius)).exp();
    }
    v
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_plants == 0 {
        return Err(Error::Data("synth: n_plants must be at least 1".into()));
    }
    if cfg.n_days < 4 {
        return Err(Error::Data(format!("synth: n_days {} must be at least 4", cfg.n_days)));
    }
    if cfg.grid[0] < 4 || cfg.grid[1] < 4 {
        return Err(Error::Data(format!("synth: grid {:?} must be at least 4x4", cfg.grid)));
    }
    if cfg.aux_channels == 0 {
        return Err(Error::Data("synth: aux_channels must be at least 1".into()));
    }
    let root = SeedTree::new(cfg.seed);
    let (h, w) = (cfg.grid[0], cfg.grid[1]);
    let n_hours = cfg.n_days * 24;

    // region: ~25 km per pixel, mid-latitude
    let mut region_rng = root.child("region").rng();
    let lat_c = region_rng.uniform_in(26.0, 36.0);
    let lon_c = region_rng.uniform_in(98.0, 116.0);
    let lat_extent = h as f64 * 25.0 / 111.0;
    let lon_extent = w as f64 * 25.0 / (111.0 * lat_c.to_radians().cos());
    let region = Region {
        lat_min: lat_c - lat_extent / 2.0,
        lat_max: lat_c + lat_extent / 2.0,
        lon_min: lon_c - lon_extent / 2.0,
        lon_max: lon_c + lon_extent / 2.0,
    };
    // align hour 0 with local midnight so day windows cover whole solar days
    let tz_offset_hours = (lon_c / 15.0).round() as i64;
    let (sy, sm, sd) = cfg.start;
    let start_epoch_hour = time::days_from_civil(sy, sm, sd) * 24 - tz_offset_hours;

    let mut plants_rng = root.child("plants").rng();
    let mut plants = Vec::with_capacity(cfg.n_plants);
    let mut efficiencies = Vec::with_capacity(cfg.n_plants);
    for i in 0..cfg.n_plants {
        let lat = plants_rng.uniform_in(-0.6, 0.6);
        let lon = plants_rng.uniform_in(-0.6, 0.6);
        let capacity = plants_rng.uniform_in(20_000.0, 150_000.0);
        efficiencies.push(plants_rng.uniform_in(0.70, 0.95));
        plants.push(PlantMeta {
            plant_id: format!("plant{i:02}"),
            lat,
            lon,
            capacity,
        });
    }

    // cloud blob processes spanning day boundaries
    let mut clouds_rng = root.child("clouds").rng();
    let mut blobs = Vec::new();
    for day in 0..cfg.n_days {
        let count = 1 + clouds_rng.range(3);
        for _ in 0..count {
            blobs.push(CloudBlob {
                birth: day as f64 * 24.0 + clouds_rng.uniform_in(0.0, 24.0),
                life: clouds_rng.uniform_in(30.0, 96.0),
                x0: clouds_rng.uniform_in(-0.3 * w as f64, 1.3 * w as f64),
                y0: clouds_rng.uniform_in(-0.3 * h as f64, 1.3 * h as f64),
                vx: clouds_rng.uniform_in(-1.5, 1.5),
                vy: clouds_rng.uniform_in(-1.5, 1.5),
                radius: clouds_rng.uniform_in(w as f64 / 8.0, w as f64 / 3.0).max(2.0),
                amp: clouds_rng.uniform_in(0.4, 1.4),
            });
        }
    }
    let active_at = |t: f64| -> Vec<&CloudBlob> {
        blobs
            .iter()
            .filter(|b| t >= b.birth && t <= b.birth + b.life)
            .collect()
    };
    let attenuation = |x: f64, y: f64, t: f64| -> f64 {
        (cfg.cloud_amplitude * field_at(&active_at(t), x, y, t)).min(1.0)
    };
    // what a coarse-grid weather model resolves: the neighborhood mean, not
    // the exact field over the plant
    let attenuation_coarse = |x: f64, y: f64, t: f64| -> f64 {
        let active = active_at(t);
        let mut acc = 0.0;
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let v = cfg.cloud_amplitude * field_at(&active, x + dx as f64, y + dy as f64, t);
                acc += v.min(1.0);
            }
        }
        acc / 25.0
    };

    // context stacks: the cloud optical field, zeroed at night
    let mut ctx = Vec::with_capacity(cfg.n_days);
    for day in 0..cfg.n_days {
        let mut stack = vec![0.0; 24 * h * w];
        for hour in 0..24 {
            let t = (day * 24 + hour) as f64;
            let zen_center = solar_zenith(lat_c, lon_c, (start_epoch_hour + day as i64 * 24 + hour as i64) as f64);
            if zen_center >= 90.0 {
                continue; // clouds are undetectable without sunlight
            }
            let active = active_at(t);
            for py in 0..h {
                for px in 0..w {
                    let v = cfg.cloud_amplitude * field_at(&active, px as f64, py as f64, t);
                    stack[hour * h * w + py * w + px] = v.min(2.0);
                }
            }
        }
        ctx.push(Arc::new(Tensor::from_vec(vec![24, 1, h, w], stack)?));
    }

    let ghi_ref = clearsky_ghi(0.0);
    let mut power = BTreeMap::new();
    let mut nwp = BTreeMap::new();
    for (pi, plant) in plants.iter().enumerate() {
        let (lat_deg, lon_deg) = region.to_degrees(plant.lat, plant.lon);
        let px = (plant.lon + 1.0) / 2.0 * (w as f64 - 1.0);
        let py = (plant.lat + 1.0) / 2.0 * (h as f64 - 1.0);
        let scale = efficiencies[pi] / ghi_ref;

        let mut ghi_series = Vec::with_capacity(n_hours);
        let mut att_series = Vec::with_capacity(n_hours);
        let mut att_coarse_series = Vec::with_capacity(n_hours);
        for i in 0..n_hours {
            let t_utc = (start_epoch_hour + i as i64) as f64;
            ghi_series.push(clearsky_ghi(solar_zenith(lat_deg, lon_deg, t_utc)));
            att_series.push(attenuation(px, py, i as f64));
            att_coarse_series.push(attenuation_coarse(px, py, i as f64));
        }

        let mut noise_rng = root.child("noise").child(&plant.plant_id).rng();
        let mut series = Vec::with_capacity(n_hours);
        for i in 0..n_hours {
            let noise = noise_rng.normal();
            let mut p_norm = scale * ghi_series[i] * (1.0 - att_series[i]);
            if cfg.noise_std > 0.0 {
                p_norm *= 1.0 + cfg.noise_std * noise;
            }
            series.push(Some((p_norm.clamp(0.0, 1.0) * plant.capacity).max(0.0)));
        }
        power.insert(plant.plant_id.clone(), series);

        let mut nwp_rng = root.child("nwp").child(&plant.plant_id).rng();
        let t = build_nwp(
            cfg,
            &mut nwp_rng,
            &ghi_series,
            &att_coarse_series,
            lat_deg,
            start_epoch_hour,
            &active_at,
        )?;
        nwp.insert(plant.plant_id.clone(), t);
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            plants,
            start_epoch_hour,
            n_days: cfg.n_days,
            resolution_minutes: 60,
            grid: cfg.grid,
            ctx_channels: 1,
            aux_channels: cfg.aux_channels,
            region,
            tz_offset_hours,
            split_fractions: [0.6, 0.2, 0.2],
            seed: cfg.seed,
            layout: Default::default(),
        },
        power,
        nwp,
        ctx,
        power_normalized: false,
    })
}

/// AR(1) error stream with stationary standard deviation `sigma`.
struct ArNoise {
    state: f64,
    phi: f64,
    sigma: f64,
}

impl ArNoise {
    fn new(sigma: f64) -> Self {
        ArNoise {
            state: 0.0,
            phi: 0.85,
            sigma,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> f64 {
        self.state = self.phi * self.state + self.sigma * (1.0 - self.phi * self.phi).sqrt() * rng.normal();
        self.state
    }
}

fn build_nwp<'a, F>(
    cfg: &SynthConfig,
    rng: &mut Rng,
    ghi: &[f64],
    att: &[f64],
    lat_deg: f64,
    start_epoch_hour: i64,
    active_at: &F,
) -> Result<Tensor>
where
    F: Fn(f64) -> Vec<&'a CloudBlob>,
{
    let n = ghi.len();
    let bias_att = rng.uniform_in(-0.12, 0.12);
    let temp_phase = rng.uniform_in(-10.0, 10.0);
    // each day's forecast run carries its own systematic error
    let day_bias: Vec<f64> = (0..n.div_ceil(24)).map(|_| 0.10 * rng.normal()).collect();
    let mut e_att = ArNoise::new(0.18);
    let mut e_pressure = ArNoise::new(3.0);
    let mut e_low_cloud = ArNoise::new(0.05);
    let mut e_temp = ArNoise::new(0.8);
    let mut e_dew = ArNoise::new(0.5);
    let mut e_skin = ArNoise::new(0.5);
    let mut e_precip = ArNoise::new(0.5);
    let mut e_u = ArNoise::new(0.3);
    let mut e_v = ArNoise::new(0.3);
    let mut extra = ArNoise::new(0.2);

    let mut features = vec![0.0; n * STANDARD_AUX_CHANNELS.max(cfg.aux_channels)];
    let cols = STANDARD_AUX_CHANNELS.max(cfg.aux_channels);
    for i in 0..n {
        // box-smoothed coarse attenuation, then a biased AR-noised forecast
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let satt = att[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        let fatt = (satt + bias_att + day_bias[i / 24] + e_att.next(rng)).clamp(0.0, 1.0);
        let firr = ghi[i] * (1.0 - fatt);
        let doy = time::day_of_year(start_epoch_hour + i as i64) as f64;
        let local_h = (i % 24) as f64;
        let daylight = if ghi[i] > 0.0 { 1.0 } else { 0.0 };
        let t2m = 12.0 + 10.0 * (std::f64::consts::TAU * (doy - 100.0 + temp_phase) / 365.0).sin()
            + 5.0 * (std::f64::consts::TAU * (local_h - 14.0) / 24.0).cos()
            - 0.25 * (lat_deg - 31.0).abs()
            + e_temp.next(rng);
        let active = active_at(i as f64);
        let (mut u_adv, mut v_adv, mut wsum) = (0.0, 0.0, 0.0);
        for b in &active {
            let env = b.envelope(i as f64);
            u_adv += env * b.vx;
            v_adv += env * b.vy;
            wsum += env;
        }
        if wsum > 0.0 {
            u_adv /= wsum;
            v_adv /= wsum;
        }
        let row = [
            0.85 * ghi[i],
            0.75 * firr,
            0.04 * ghi[i] * (1.0 - 0.8 * fatt),
            firr,
            0.9 * firr,
            960.0 + 10.0 * (std::f64::consts::TAU * doy / 365.0).sin() + e_pressure.next(rng),
            3600.0 * (1.0 - 1.3 * fatt).max(0.0) * daylight,
            (0.8 * fatt + e_low_cloud.next(rng)).clamp(0.0, 1.0),
            fatt,
            t2m,
            t2m - (5.0 + 4.0 * (1.0 - fatt)) + e_dew.next(rng),
            t2m + 5.0 * (1.0 - fatt) * (ghi[i] / 1000.0) + e_skin.next(rng),
            if fatt > 0.75 { 0.4 * (fatt - 0.75) * e_precip.next(rng).abs() } else { 0.0 },
            u_adv + e_u.next(rng),
            v_adv + e_v.next(rng),
        ];
        for ch in 0..cols {
            let v = if ch < STANDARD_AUX_CHANNELS {
                row[ch]
            } else {
                row[ch % STANDARD_AUX_CHANNELS] + extra.next(rng)
            };
            features[i * cols + ch] = v;
        }
    }
    // truncate to the requested channel count
    let mut out = vec![0.0; n * cfg.aux_channels];
    for i in 0..n {
        out[i * cfg.aux_channels..(i + 1) * cfg.aux_channels]
            .copy_from_slice(&features[i * cols..i * cols + cfg.aux_channels]);
    }
    Tensor::from_vec(vec![n, cfg.aux_channels], out)
}
