//! Seeded synthetic weather/solar domains.
//!
//! Each domain is one plant under one climate. Irradiance follows a half-sine
//! daytime profile modulated by season and attenuated by a per-day cloud
//! process; the plant converts irradiance to power with a temperature
//! derating. Night rows carry exactly zero irradiance and power.
//!
//! Alongside the four channels that drive power (GHI, DNI, DHI, temperature)
//! the generator emits six nuisance channels (pressure, relative humidity,
//! dew point, wind direction, wind speed, albedo) as independent AR(1)
//! processes.

use std::f64::consts::PI;

use chrono::{Duration, TimeZone, Utc};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesFrame;
use crate::error::{Error, Result};

/// Peak day of the seasonal irradiance cycle (late June).
const SOLSTICE_DOY: f64 = 172.0;
/// Warmest day of the seasonal temperature cycle.
const WARMEST_DOY: f64 = 200.0;
/// Cell temperature rise per W/m² of irradiance.
const CELL_HEATING: f64 = 0.03;
/// Relative power loss per °C of cell temperature above 25 °C.
const DERATING: f64 = 0.004;
/// Fraction of capacity produced at 1000 W/m² and 25 °C, before saturation.
const PLANT_EFFICIENCY: f64 = 0.6;
/// Irradiance scale of the soft saturation of the power curve (W/m²).
const SATURATION_GHI: f64 = 4000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClimateParams {
    /// Relative amplitude of the seasonal irradiance cycle, in `[0, 1)`.
    pub seasonality: f64,
    /// Clear-sky noon GHI at the mean of the seasonal cycle (W/m²).
    pub ghi_peak: f64,
    /// Mean cloud cover in `[0, 1]`.
    pub cloudiness: f64,
    pub temp_mean: f64,
    pub temp_seasonal_amp: f64,
    pub temp_diurnal_amp: f64,
    pub wind_mean: f64,
    /// Prevailing wind direction in degrees.
    pub wind_dir: f64,
    /// Stddev of additive GHI noise at solar noon (W/m²).
    pub ghi_noise: f64,
    /// Stddev of additive temperature noise (°C).
    pub temp_noise: f64,
    /// Stddev of additive power noise at solar noon, as a fraction of capacity.
    pub power_noise: f64,
    pub capacity_kw: f64,
    pub seed: u64,
}

impl Default for ClimateParams {
    fn default() -> Self {
        Self {
            seasonality: 0.45,
            ghi_peak: 950.0,
            cloudiness: 0.25,
            temp_mean: 16.0,
            temp_seasonal_amp: 8.0,
            temp_diurnal_amp: 5.0,
            wind_mean: 3.5,
            wind_dir: 240.0,
            ghi_noise: 15.0,
            temp_noise: 1.0,
            power_noise: 0.02,
            capacity_kw: 100.0,
            seed: 0,
        }
    }
}

impl ClimateParams {
    /// Three contrasting climates used by the experiment matrix.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        let p = match name {
            "arid" => Self {
                seasonality: 0.12,
                ghi_peak: 1000.0,
                cloudiness: 0.1,
                temp_mean: 22.0,
                ..base
            },
            "humid" => Self {
                seasonality: 0.05,
                ghi_peak: 900.0,
                cloudiness: 0.45,
                temp_mean: 25.0,
                temp_seasonal_amp: 4.0,
                wind_dir: 120.0,
                ..base
            },
            "continental" => Self {
                seasonality: 0.4,
                ghi_peak: 850.0,
                cloudiness: 0.35,
                temp_mean: 9.0,
                temp_seasonal_amp: 13.0,
                wind_dir: 280.0,
                ..base
            },
            _ => return None,
        };
        Some(p)
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("seasonality", self.seasonality),
            ("ghi_peak", self.ghi_peak),
            ("temp_seasonal_amp", self.temp_seasonal_amp),
            ("temp_diurnal_amp", self.temp_diurnal_amp),
            ("wind_mean", self.wind_mean),
            ("ghi_noise", self.ghi_noise),
            ("temp_noise", self.temp_noise),
            ("power_noise", self.power_noise),
            ("capacity_kw", self.capacity_kw),
        ];
        if let Some((name, v)) = non_negative.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
        }
        if !(0.0..1.0).contains(&self.seasonality) {
            return Err(Error::invalid("seasonality must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.cloudiness) {
            return Err(Error::invalid("cloudiness must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Perturbs the climate-dependent knobs in proportion to `shift`.
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            seasonality: (self.seasonality - 0.35 * shift).max(0.0),
            cloudiness: (self.cloudiness + 0.15 * shift).clamp(0.0, 1.0),
            temp_mean: self.temp_mean + 8.0 * shift,
            ..self.clone()
        }
    }
}

/// Sine of the sun's elevation proxy: a half-sine between 06:00 and 18:00.
pub fn daylight_profile(hour: f64) -> f64 {
    if hour > 6.0 && hour < 18.0 {
        (PI * (hour - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

fn seasonal_factor(doy: f64, amplitude: f64) -> f64 {
    1.0 + amplitude * (2.0 * PI * (doy - SOLSTICE_DOY) / 365.0).cos()
}

struct Ar1 {
    state: f64,
    phi: f64,
}

impl Ar1 {
    fn new(phi: f64) -> Self {
        Self { state: 0.0, phi }
    }

    /// Unit-variance AR(1) step.
    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.state = self.phi * self.state + (1.0 - self.phi * self.phi).sqrt() * z;
        self.state
    }
}

/// Generates `n_days` of data at `step` resolution, starting 2006-01-01 UTC.
pub fn generate_domain(params: &ClimateParams, n_days: usize, step: Duration) -> Result<TimeSeriesFrame> {
    params.validate()?;
    if n_days == 0 {
        return Err(Error::invalid("n_days must be at least 1"));
    }
    let step_min = step.num_minutes();
    if step_min <= 0 || (24 * 60) % step_min != 0 {
        return Err(Error::invalid("step must evenly divide one day"));
    }
    let per_day = (24 * 60 / step_min) as usize;
    let n = n_days * per_day;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let start = Utc.with_ymd_and_hms(2006, 1, 1, 0, 0, 0).unwrap();

    let names = [
        "ghi",
        "dni",
        "dhi",
        "temp",
        "pressure",
        "rh",
        "dew_point",
        "wind_dir",
        "wind_speed",
        "albedo",
        "power_kw",
    ];
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); names.len()];
    let mut timestamps = Vec::with_capacity(n);

    let phi = 0.98f64.powf(step_min as f64 / 30.0);
    let mut cloud_ar = Ar1::new(phi);
    let mut nuisance: Vec<Ar1> = (0..6).map(|_| Ar1::new(phi)).collect();
    let mut day_cover = 0.0;

    for i in 0..n {
        let day = i / per_day;
        let minutes = (i % per_day) as i64 * step_min;
        let hour = minutes as f64 / 60.0;
        if i % per_day == 0 {
            day_cover = params.cloudiness * 2.0 * rng.random::<f64>();
        }
        let doy = day as f64 + hour / 24.0;
        timestamps.push(start + Duration::minutes(i as i64 * step_min));

        let sun = daylight_profile(hour);
        let cover = (day_cover * (1.0 + 0.3 * cloud_ar.next(&mut rng))).clamp(0.0, 1.0);
        let clear_index = 1.0 - 0.8 * cover;
        let z_ghi: f64 = rng.sample(StandardNormal);
        let z_temp: f64 = rng.sample(StandardNormal);
        let z_power: f64 = rng.sample(StandardNormal);

        let clear_sky = params.ghi_peak * sun * seasonal_factor(doy, params.seasonality);
        let ghi = (clear_sky * clear_index + params.ghi_noise * sun * z_ghi).max(0.0);
        let direct_frac = 0.85 * clear_index * clear_index;
        let (dni, dhi) = if sun > 0.0 {
            ((ghi * direct_frac / sun.max(0.1)).min(1100.0), ghi * (1.0 - direct_frac))
        } else {
            (0.0, 0.0)
        };
        let temp = params.temp_mean
            + params.temp_seasonal_amp * (2.0 * PI * (doy - WARMEST_DOY) / 365.0).cos()
            + params.temp_diurnal_amp * (PI * (hour - 9.0) / 12.0).sin() * (1.0 - 0.5 * cover)
            + params.temp_noise * z_temp;
        let power = if sun > 0.0 {
            let cell = temp + CELL_HEATING * ghi;
            let derate = 1.0 - DERATING * (cell - 25.0);
            let response = ghi / 1000.0 / (1.0 + ghi / SATURATION_GHI);
            let p = params.capacity_kw * PLANT_EFFICIENCY * response * derate
                + params.power_noise * params.capacity_kw * sun * z_power;
            p.clamp(0.0, params.capacity_kw)
        } else {
            0.0
        };

        let mut nz = nuisance.iter_mut().map(|a| a.next(&mut rng));
        let pressure = 1013.0 + 8.0 * nz.next().unwrap();
        let rh = (60.0 + 15.0 * nz.next().unwrap()).clamp(5.0, 100.0);
        let dew_point = 8.0 + 5.0 * nz.next().unwrap();
        let wind_dir = (params.wind_dir + 60.0 * nz.next().unwrap()).rem_euclid(360.0);
        let wind_speed = (params.wind_mean + 1.5 * nz.next().unwrap()).max(0.0);
        let albedo = (0.2 + 0.03 * nz.next().unwrap()).clamp(0.0, 1.0);

        let row = [
            ghi, dni, dhi, temp, pressure, rh, dew_point, wind_dir, wind_speed, albedo, power,
        ];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }

    let units = [
        "W/m2", "W/m2", "W/m2", "degC", "hPa", "%", "degC", "deg", "m/s", "1", "kW",
    ];
    let channels: IndexMap<String, Vec<f64>> = names.iter().map(|n| n.to_string()).zip(cols).collect();
    let units = names
        .iter()
        .zip(units)
        .map(|(n, u)| (n.to_string(), u.to_string()))
        .collect();
    TimeSeriesFrame::new(timestamps, channels, units)
}

/// Seed offset separating a pair's target draw from its source draw.
const TARGET_SEED_OFFSET: u64 = 1_000_003;

/// Source and target frames; the target's climate is `base.shifted(shift)`
/// and it is always drawn from a different seed.
pub fn make_domain_pair(
    base: &ClimateParams,
    shift: f64,
    n_days: usize,
    step: Duration,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame)> {
    if !(shift >= 0.0) {
        return Err(Error::invalid("shift must be >= 0"));
    }
    let mut target = base.shifted(shift);
    target.seed = base.seed.wrapping_add(TARGET_SEED_OFFSET);
    Ok((
        generate_domain(base, n_days, step)?,
        generate_domain(&target, n_days, step)?,
    ))
}
