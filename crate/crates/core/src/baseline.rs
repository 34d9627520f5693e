//! Naive forecasting baselines: Persistence, hourly Mean, and Clear Sky
//! (solar-geometry GHI mapped to normalized power by a least-squares scale).
//!
//! The mean baseline is an hour-of-day profile rather than a flat scalar: a
//! flat average would predict nonzero power at night.

use std::collections::BTreeMap;

use crate::data::{time, PlantMeta, Region, SampleWindow};
use crate::error::{Error, Result};
use crate::eval::Forecaster;
use crate::tensor::Tensor;

/// Solar zenith angle in degrees for a location and UTC time (fractional
/// epoch hours). Declination from the standard day-angle formula, hour angle
/// from longitude-corrected solar time with the equation of time.
pub fn solar_zenith(lat_deg: f64, lon_deg: f64, epoch_hour: f64) -> f64 {
    let day = epoch_hour.div_euclid(24.0);
    let hour_utc = epoch_hour - day * 24.0;
    let doy = time::day_of_year(day as i64 * 24) as f64;
    let decl = 23.45_f64.to_radians() * (std::f64::consts::TAU * (284.0 + doy) / 365.0).sin();
    let b = std::f64::consts::TAU * (doy - 81.0) / 364.0;
    let eot_min = 9.87 * (2.0 * b).sin() - 7.53 * b.cos() - 1.5 * b.sin();
    let t_solar = hour_utc + lon_deg / 15.0 + eot_min / 60.0;
    let hour_angle = (15.0 * (t_solar - 12.0)).to_radians();
    let lat = lat_deg.to_radians();
    let cos_z = lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos();
    cos_z.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Haurwitz clear-sky global horizontal irradiance in W/m^2:
/// `1098 cos(z) exp(-0.057 / cos(z))`, zero at or below the horizon.
pub fn clearsky_ghi(zenith_deg: f64) -> f64 {
    if zenith_deg >= 90.0 {
        return 0.0;
    }
    let cos_z = zenith_deg.to_radians().cos();
    1098.0 * cos_z * (-0.057 / cos_z).exp()
}

/// Yesterday's curve is today's forecast.
pub fn persistence(w: &SampleWindow) -> Result<Tensor> {
    if w.x_ts.shape[0] != w.x_aux.shape[0] {
        return Err(Error::Data(format!(
            "persistence: input horizon {} != target horizon {}",
            w.x_ts.shape[0], w.x_aux.shape[0]
        )));
    }
    Ok(w.x_ts.clone())
}

/// Hour-of-day mean power profile over the training windows.
#[derive(Debug, Clone)]
pub struct MeanBaseline {
    /// [24, C_ts]
    pub profile: Tensor,
}

impl MeanBaseline {
    pub fn fit(train: &[SampleWindow]) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::Data("mean baseline: empty train set".into()))?;
        let shape = first.y.shape.clone();
        let mut profile = vec![0.0; first.y.data.len()];
        for w in train {
            if w.y.shape != shape {
                return Err(Error::shape("mean baseline", &w.y.shape, &shape));
            }
            for (p, v) in profile.iter_mut().zip(&w.y.data) {
                *p += v;
            }
        }
        let n = train.len() as f64;
        for p in profile.iter_mut() {
            *p /= n;
        }
        Ok(MeanBaseline {
            profile: Tensor::from_vec(shape, profile)?,
        })
    }

    pub fn predict(&self) -> Tensor {
        self.profile.clone()
    }
}

/// Clear-sky baseline: theoretical GHI at the plant, scaled to normalized
/// power by a least-squares fit over daytime training hours.
#[derive(Debug, Clone)]
pub struct ClearSkyModel {
    pub lat_deg: f64,
    pub lon_deg: f64,
    /// Scale mapping GHI (W/m^2) to normalized power; non-negative.
    pub scale: f64,
}

impl ClearSkyModel {
    pub fn fit(train: &[SampleWindow], plant: &PlantMeta, region: &Region) -> Result<Self> {
        let (lat_deg, lon_deg) = region.to_degrees(plant.lat, plant.lon);
        let mut num = 0.0;
        let mut den = 0.0;
        for w in train.iter().filter(|w| w.plant.plant_id == plant.plant_id) {
            let horizon = w.y.shape[0];
            for h in 0..horizon {
                let ghi = clearsky_ghi(solar_zenith(lat_deg, lon_deg, (w.t0 + h as i64) as f64));
                if ghi > 1.0 {
                    num += ghi * w.y.data[h];
                    den += ghi * ghi;
                }
            }
        }
        if den == 0.0 {
            return Err(Error::Data(format!(
                "clear-sky fit for {}: no daytime samples in the training data",
                plant.plant_id
            )));
        }
        Ok(ClearSkyModel {
            lat_deg,
            lon_deg,
            scale: (num / den).max(0.0),
        })
    }

    pub fn predict(&self, w: &SampleWindow) -> Tensor {
        let horizon = w.x_aux.shape[0];
        let c = w.y.shape.get(1).copied().unwrap_or(1);
        let mut out = vec![0.0; horizon * c];
        for h in 0..horizon {
            let ghi = clearsky_ghi(solar_zenith(self.lat_deg, self.lon_deg, (w.t0 + h as i64) as f64));
            let v = (self.scale * ghi).clamp(0.0, 1.0);
            for ch in 0..c {
                out[h * c + ch] = v;
            }
        }
        Tensor::from_vec(vec![horizon, c], out).expect("finite prediction")
    }
}

/// The three baselines behind one forecasting interface.
#[derive(Debug, Clone)]
pub enum Baseline {
    Persistence,
    Mean(MeanBaseline),
    /// One fitted model per plant.
    ClearSky(BTreeMap<String, ClearSkyModel>),
}

impl Baseline {
    /// Fit the named baseline on training windows. `which` is one of
    /// `persistence`, `mean`, `clearsky`.
    pub fn fit(which: &str, train: &[SampleWindow], region: &Region) -> Result<Baseline> {
        match which {
            "persistence" => Ok(Baseline::Persistence),
            "mean" => Ok(Baseline::Mean(MeanBaseline::fit(train)?)),
            "clearsky" => {
                let mut plants: Vec<PlantMeta> = Vec::new();
                for w in train {
                    if !plants.iter().any(|p| p.plant_id == w.plant.plant_id) {
                        plants.push(w.plant.clone());
                    }
                }
                if plants.is_empty() {
                    return Err(Error::Data("clear-sky fit: empty train set".into()));
                }
                let mut models = BTreeMap::new();
                for p in &plants {
                    models.insert(p.plant_id.clone(), ClearSkyModel::fit(train, p, region)?);
                }
                Ok(Baseline::ClearSky(models))
            }
            other => Err(Error::Config(format!(
                "unknown baseline '{other}', expected persistence|mean|clearsky"
            ))),
        }
    }
}

impl Forecaster for Baseline {
    fn name(&self) -> &str {
        match self {
            Baseline::Persistence => "persistence",
            Baseline::Mean(_) => "mean",
            Baseline::ClearSky(_) => "clearsky",
        }
    }

    fn predict(&self, w: &SampleWindow) -> Result<Tensor> {
        match self {
            Baseline::Persistence => persistence(w),
            Baseline::Mean(m) => Ok(m.predict()),
            Baseline::ClearSky(models) => {
                let model = models.get(&w.plant.plant_id).ok_or_else(|| {
                    Error::Data(format!("clear-sky: plant {} not fitted", w.plant.plant_id))
                })?;
                Ok(model.predict(w))
            }
        }
    }
}
