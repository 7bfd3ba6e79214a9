//! Synthetic multi-sphere daily fields with known structure.
//!
//! Each channel is a seasonal cycle (period exactly 365 days) plus a zonally
//! travelling wave plus spatially white AR(1) noise. Configured couplings add
//! `gain * noise_driver(t - lag)` to a target channel, so the lagged response
//! and its ground-truth importance are known.

use chrono::{Days, NaiveDate};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::attribution::EnsembleRunner;
use crate::error::{Result, S2skError};
use crate::grid::{Channel, Climatology, FieldSet, GridSpec, Sphere};
use crate::harness::inventory::Inventory;

/// One value per sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerSphere {
    pub atmosphere: f64,
    pub ocean: f64,
    pub land: f64,
    pub flux: f64,
}

impl PerSphere {
    pub fn uniform(v: f64) -> Self {
        PerSphere {
            atmosphere: v,
            ocean: v,
            land: v,
            flux: v,
        }
    }

    pub fn get(&self, s: Sphere) -> f64 {
        match s {
            Sphere::Atmosphere => self.atmosphere,
            Sphere::Ocean => self.ocean,
            Sphere::Land => self.land,
            Sphere::Flux => self.flux,
        }
    }

    fn all(&self) -> [f64; 4] {
        [self.atmosphere, self.ocean, self.land, self.flux]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub driver: String,
    pub target: String,
    pub lag_days: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub inventory: Inventory,
    pub start_date: NaiveDate,
    pub seasonal_amplitude: PerSphere,
    pub wave_number: usize,
    pub wave_amplitude: PerSphere,
    /// Eastward phase speed, degrees of longitude per day.
    pub wave_speed_deg_per_day: PerSphere,
    pub ar1: PerSphere,
    /// Stationary standard deviation of the AR(1) component.
    pub noise_std: PerSphere,
    pub couplings: Vec<Coupling>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            grid: GridSpec::desk(),
            inventory: Inventory::Desk,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            seasonal_amplitude: PerSphere {
                atmosphere: 1.0,
                ocean: 0.6,
                land: 0.8,
                flux: 0.5,
            },
            wave_number: 3,
            wave_amplitude: PerSphere {
                atmosphere: 0.5,
                ocean: 0.1,
                land: 0.05,
                flux: 0.3,
            },
            wave_speed_deg_per_day: PerSphere {
                atmosphere: 6.0,
                ocean: 0.5,
                land: 0.2,
                flux: 3.0,
            },
            ar1: PerSphere {
                atmosphere: 0.7,
                ocean: 0.95,
                land: 0.97,
                flux: 0.8,
            },
            noise_std: PerSphere {
                atmosphere: 0.5,
                ocean: 0.3,
                land: 0.3,
                flux: 0.4,
            },
            couplings: vec![
                Coupling {
                    driver: "SST".into(),
                    target: "T2M".into(),
                    lag_days: 5,
                    gain: 0.8,
                },
                Coupling {
                    driver: "SM1".into(),
                    target: "TP".into(),
                    lag_days: 10,
                    gain: 0.6,
                },
            ],
            seed,
        }
    }

    pub fn full(seed: u64) -> Self {
        SynthConfig {
            grid: GridSpec::full(),
            inventory: Inventory::Full,
            ..SynthConfig::desk(seed)
        }
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.inventory.channels(&self.grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.ar1.all().iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(S2skError::invalid("AR(1) coefficients must lie in [0, 1)"));
        }
        if self.noise_std.all().iter().any(|s| !(*s >= 0.0)) {
            return Err(S2skError::invalid("noise standard deviations must be non-negative"));
        }
        let channels = self.channels();
        for c in &self.couplings {
            for name in [&c.driver, &c.target] {
                if !channels.iter().any(|ch| &ch.name == name) {
                    return Err(S2skError::invalid(format!("coupling references unknown channel {name}")));
                }
            }
            if c.driver == c.target {
                return Err(S2skError::invalid("a channel cannot drive itself"));
            }
        }
        Ok(())
    }
}

struct ChannelPlan {
    base: Array2<f64>,
    seasonal: Array2<f64>,
    wave_amp: Array2<f64>,
    wave_phase: f64,
    omega: f64,
    rho: f64,
    innovation: f64,
    valid: Option<Array2<bool>>,
}

/// Deterministic daily series of `n_days` states starting at `config.start_date`.
pub fn generate_synthetic(config: &SynthConfig, n_days: usize) -> Result<Vec<FieldSet>> {
    config.validate()?;
    if n_days == 0 {
        return Err(S2skError::invalid("n_days must be at least 1"));
    }
    let g = config.grid;
    let channels = config.channels();
    let (nc, h, w) = (channels.len(), g.n_lat, g.n_lon);
    let lats: Vec<f64> = g.latitudes().iter().map(|l| l.to_radians()).collect();
    let lons: Vec<f64> = g.longitudes().iter().map(|l| l.to_radians()).collect();
    let k = config.wave_number as f64;

    let plans: Vec<ChannelPlan> = channels
        .iter()
        .enumerate()
        .map(|(i, ch)| {
            let s = ch.sphere;
            let offset = 0.25 * (i % 7) as f64;
            let rho = config.ar1.get(s);
            ChannelPlan {
                base: Array2::from_shape_fn((h, w), |(r, _)| offset + lats[r].cos()),
                seasonal: Array2::from_shape_fn((h, w), |(r, _)| config.seasonal_amplitude.get(s) * lats[r].sin()),
                wave_amp: Array2::from_shape_fn((h, w), |(r, _)| config.wave_amplitude.get(s) * lats[r].cos()),
                wave_phase: 0.7 * i as f64,
                omega: k * config.wave_speed_deg_per_day.get(s).to_radians(),
                rho,
                innovation: config.noise_std.get(s) * (1.0 - rho * rho).sqrt(),
                valid: ch.mask.as_ref().map(|m| (**m).clone()),
            }
        })
        .collect();
    let index = |name: &str| channels.iter().position(|c| c.name == name).expect("validated");
    let couplings: Vec<(usize, usize, usize, f64)> = config
        .couplings
        .iter()
        .map(|c| (index(&c.driver), index(&c.target), c.lag_days, c.gain))
        .collect();
    let max_lag = couplings.iter().map(|c| c.2).max().unwrap_or(0);

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    // Stationary start for each AR(1) component.
    let mut noise = Array3::<f64>::zeros((nc, h, w));
    for (c, ch) in channels.iter().enumerate() {
        let sd = config.noise_std.get(ch.sphere);
        noise
            .index_axis_mut(Axis(0), c)
            .mapv_inplace(|_| sd * rng.sample::<f64, _>(StandardNormal));
    }
    let mut history: VecDeque<Array3<f64>> = VecDeque::with_capacity(max_lag + 1);
    let mut out = Vec::with_capacity(n_days);
    // Spin-up days fill the lag history and are not emitted.
    for day in 0..(max_lag + n_days) {
        if day > 0 {
            for (c, p) in plans.iter().enumerate() {
                let mut slab = noise.index_axis_mut(Axis(0), c);
                slab.mapv_inplace(|v| p.rho * v + p.innovation * rng.sample::<f64, _>(StandardNormal));
            }
        }
        history.push_back(noise.clone());
        if history.len() > max_lag + 1 {
            history.pop_front();
        }
        if day < max_lag {
            continue;
        }
        let t = (day - max_lag) as f64;
        let season = (2.0 * std::f64::consts::PI * t / 365.0).cos();
        let mut values = Array3::<f64>::zeros((nc, h, w));
        for (c, p) in plans.iter().enumerate() {
            let mut slab = values.index_axis_mut(Axis(0), c);
            for r in 0..h {
                for col in 0..w {
                    let wave = (k * lons[col] - p.omega * t + p.wave_phase).cos();
                    slab[[r, col]] = p.base[[r, col]]
                        + p.seasonal[[r, col]] * season
                        + p.wave_amp[[r, col]] * wave
                        + noise[[c, r, col]];
                }
            }
        }
        for &(d, tgt, lag, gain) in &couplings {
            let past = &history[history.len() - 1 - lag];
            let mut slab = values.index_axis_mut(Axis(0), tgt);
            slab.scaled_add(gain, &past.index_axis(Axis(0), d));
        }
        for (c, p) in plans.iter().enumerate() {
            if let Some(valid) = &p.valid {
                values
                    .index_axis_mut(Axis(0), c)
                    .zip_mut_with(valid, |v, &ok| {
                        if !ok {
                            *v = f64::NAN
                        }
                    });
            }
        }
        let date = config.start_date + Days::new(t as u64);
        out.push(FieldSet::new(g, channels.clone(), values, date)?);
    }
    Ok(out)
}

/// Forecasts one target channel from one driver channel through a known
/// lagged linear response; every other channel is the climatology.
///
/// The driver anomaly at initialization is persisted with decay
/// `driver_persistence^|k - lag|` at lead `k`; members add seeded white noise.
/// Only the latest state's driver channel is ever read.
#[derive(Debug, Clone)]
pub struct LaggedResponseRunner {
    pub climatology: Climatology,
    pub driver: usize,
    pub target: usize,
    pub lag_days: usize,
    pub gain: f64,
    pub driver_persistence: f64,
    pub member_noise: f64,
    pub horizon_days: usize,
}

impl LaggedResponseRunner {
    pub fn from_config(config: &SynthConfig, climatology: Climatology, coupling: usize, horizon_days: usize) -> Result<Self> {
        let c = config
            .couplings
            .get(coupling)
            .ok_or_else(|| S2skError::invalid(format!("no coupling #{coupling}")))?;
        let channels = config.channels();
        let idx = |n: &str| channels.iter().position(|ch| ch.name == n).expect("validated");
        let driver = idx(&c.driver);
        Ok(LaggedResponseRunner {
            climatology,
            driver,
            target: idx(&c.target),
            lag_days: c.lag_days,
            gain: c.gain,
            driver_persistence: config.ar1.get(channels[driver].sphere),
            member_noise: 0.1,
            horizon_days,
        })
    }
}

impl EnsembleRunner for LaggedResponseRunner {
    fn run_member(&self, _previous: &FieldSet, latest: &FieldSet, _member_id: usize, seed: u64) -> Result<Vec<FieldSet>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let init_clim = self.climatology.for_date(latest.valid_time)?;
        let driver_anom = &latest.values.index_axis(Axis(0), self.driver) - &init_clim.index_axis(Axis(0), self.driver);
        let driver_valid = &latest.channels[self.driver];
        (1..=self.horizon_days)
            .map(|k| {
                let date = latest.valid_time + Days::new(k as u64);
                let mut values = self.climatology.for_date(date)?.to_owned();
                let decay = self.driver_persistence.powi((k as i64 - self.lag_days as i64).unsigned_abs() as i32);
                let mut slab = values.index_axis_mut(Axis(0), self.target);
                for ((r, c), v) in slab.indexed_iter_mut() {
                    let a = if driver_valid.is_valid(r, c) { driver_anom[[r, c]] } else { 0.0 };
                    *v += self.gain * decay * a + self.member_noise * rng.sample::<f64, _>(StandardNormal);
                }
                FieldSet::new(latest.grid, latest.channels.clone(), values, date)
            })
            .collect()
    }
}
