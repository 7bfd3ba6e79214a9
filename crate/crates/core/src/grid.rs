//! Lat-lon grid geometry, latitude weighting, calendar-day climatology,
//! anomalies, region boxes and great-circle distances.
//!
//! Grids are ordered north to south in latitude and eastward from
//! `lon_start_deg` in longitude. Latitude weights are `cos(lat)` normalized to
//! mean one over the latitude rows, so a latitude-constant error has the same
//! weighted and unweighted mean square.

use std::collections::HashSet;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, S2skError};

/// Mean Earth radius used by every distance computation.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Slots on the circular calendar axis. Slot 59 is Feb 29 and is skipped by
/// non-leap years.
pub const CALENDAR_SLOTS: usize = 366;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat_start_deg: f64,
    pub lat_step_deg: f64,
    pub lon_start_deg: f64,
    pub lon_step_deg: f64,
}

impl GridSpec {
    /// Global 1.5 degree grid, 121 x 240.
    pub fn full() -> Self {
        GridSpec {
            n_lat: 121,
            n_lon: 240,
            lat_start_deg: 90.0,
            lat_step_deg: -1.5,
            lon_start_deg: 0.0,
            lon_step_deg: 1.5,
        }
    }

    /// Scaled-down global 6 degree grid, 31 x 60.
    pub fn desk() -> Self {
        GridSpec {
            n_lat: 31,
            n_lon: 60,
            lat_start_deg: 90.0,
            lat_step_deg: -6.0,
            lon_start_deg: 0.0,
            lon_step_deg: 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat < 2 || self.n_lon < 2 {
            return Err(S2skError::invalid(format!(
                "grid must have at least 2 x 2 points, got {} x {}",
                self.n_lat, self.n_lon
            )));
        }
        if self.lat_step_deg == 0.0 || self.lon_step_deg == 0.0 {
            return Err(S2skError::invalid("grid steps must be non-zero"));
        }
        for lat in self.latitudes() {
            if !(-90.0 - 1e-9..=90.0 + 1e-9).contains(&lat) {
                return Err(S2skError::invalid(format!("latitude {lat} outside [-90, 90]")));
            }
        }
        Ok(())
    }

    pub fn lat(&self, row: usize) -> f64 {
        self.lat_start_deg + row as f64 * self.lat_step_deg
    }

    /// Longitude of a column, wrapped into [0, 360).
    pub fn lon(&self, col: usize) -> f64 {
        (self.lon_start_deg + col as f64 * self.lon_step_deg).rem_euclid(360.0)
    }

    pub fn latitudes(&self) -> Vec<f64> {
        (0..self.n_lat).map(|h| self.lat(h)).collect()
    }

    pub fn longitudes(&self) -> Vec<f64> {
        (0..self.n_lon).map(|w| self.lon(w)).collect()
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn latitude_weights(&self) -> Result<Vec<f64>> {
        latitude_weights(&self.latitudes())
    }
}

/// `cos(lat) / mean(cos(lat))` for each latitude row.
///
/// Polar rows legitimately receive (numerically) zero weight; an error is
/// returned only when every weight vanishes.
pub fn latitude_weights(latitudes_deg: &[f64]) -> Result<Vec<f64>> {
    if latitudes_deg.is_empty() {
        return Err(S2skError::invalid("no latitudes"));
    }
    let raw: Vec<f64> = latitudes_deg
        .iter()
        .map(|lat| {
            let c = lat.to_radians().cos();
            if c < 1e-12 { 0.0 } else { c }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean <= 0.0 {
        return Err(S2skError::invalid("all latitude weights are zero"));
    }
    Ok(raw.into_iter().map(|c| c / mean).collect())
}

/// Per-cell weights for spatial reductions, normalized to sum to one over
/// the valid (unmasked) cells.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    cells: Array2<f64>,
}

impl SpatialWeights {
    pub fn new(grid: &GridSpec, mask: Option<&Array2<bool>>) -> Result<Self> {
        let lat_w = grid.latitude_weights()?;
        let mut cells = Array2::from_shape_fn((grid.n_lat, grid.n_lon), |(h, _)| lat_w[h]);
        if let Some(mask) = mask {
            if mask.dim() != cells.dim() {
                return Err(S2skError::shape("mask does not match grid"));
            }
            cells.zip_mut_with(mask, |c, &valid| {
                if !valid {
                    *c = 0.0
                }
            });
        }
        let total: f64 = cells.sum();
        if total <= 0.0 {
            return Err(S2skError::invalid("no valid cells carry weight"));
        }
        cells.mapv_inplace(|c| c / total);
        Ok(SpatialWeights { cells })
    }

    pub fn uniform(n_lat: usize, n_lon: usize) -> Self {
        let n = (n_lat * n_lon) as f64;
        SpatialWeights {
            cells: Array2::from_elem((n_lat, n_lon), 1.0 / n),
        }
    }

    pub fn cells(&self) -> &Array2<f64> {
        &self.cells
    }

    /// Weighted mean of `f(h, w)` over cells with non-zero weight, in fixed row-major order.
    pub fn reduce(&self, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut acc = 0.0;
        for ((h, w), &c) in self.cells.indexed_iter() {
            if c > 0.0 {
                acc += c * f(h, w);
            }
        }
        acc
    }

    pub fn mean(&self, field: ArrayView2<f64>) -> f64 {
        self.reduce(|h, w| field[[h, w]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sphere {
    Atmosphere,
    Ocean,
    Land,
    Flux,
}

impl Sphere {
    pub fn block(self) -> Block {
        match self {
            Sphere::Atmosphere => Block::Atmosphere,
            _ => Block::Boundary,
        }
    }
}

/// The two channel blocks of a state: atmospheric and boundary conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Atmosphere,
    Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub sphere: Sphere,
    /// `true` marks a valid cell. Only ocean-only channels carry a mask.
    pub mask: Option<Arc<Array2<bool>>>,
}

impl Channel {
    pub fn new(name: impl Into<String>, sphere: Sphere) -> Self {
        Channel {
            name: name.into(),
            sphere,
            mask: None,
        }
    }

    pub fn masked(name: impl Into<String>, sphere: Sphere, mask: Arc<Array2<bool>>) -> Self {
        Channel {
            name: name.into(),
            sphere,
            mask: Some(mask),
        }
    }

    pub fn is_valid(&self, h: usize, w: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[[h, w]])
    }
}

/// A channel-stacked state on one grid at one valid date.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub grid: GridSpec,
    pub channels: Vec<Channel>,
    /// `[channel, lat, lon]`
    pub values: Array3<f64>,
    pub valid_time: NaiveDate,
}

impl FieldSet {
    pub fn new(
        grid: GridSpec,
        channels: Vec<Channel>,
        values: Array3<f64>,
        valid_time: NaiveDate,
    ) -> Result<Self> {
        let fs = FieldSet {
            grid,
            channels,
            values,
            valid_time,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let expect = (self.channels.len(), self.grid.n_lat, self.grid.n_lon);
        if self.values.dim() != expect {
            return Err(S2skError::shape(format!(
                "values {:?} do not match channels x grid {:?}",
                self.values.dim(),
                expect
            )));
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.name.as_str()) {
                return Err(S2skError::invalid(format!("duplicate channel {}", ch.name)));
            }
            if let Some(m) = &ch.mask {
                if m.dim() != (self.grid.n_lat, self.grid.n_lon) {
                    return Err(S2skError::shape(format!("mask of {} does not match grid", ch.name)));
                }
            }
        }
        for (c, ch) in self.channels.iter().enumerate() {
            for ((h, w), v) in self.values.index_axis(Axis(0), c).indexed_iter() {
                if !v.is_finite() && ch.is_valid(h, w) {
                    return Err(S2skError::invalid(format!(
                        "non-finite value in unmasked cell ({h}, {w}) of channel {}",
                        ch.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// Indices of the channels in `block`, in channel order.
    pub fn block_indices(&self, block: Block) -> Vec<usize> {
        block_indices(&self.channels, block)
    }

    /// Sub-state restricted to one block's channels.
    pub fn block(&self, block: Block) -> FieldSet {
        let idx = self.block_indices(block);
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> FieldSet {
        let values = self.values.select(Axis(0), idx);
        FieldSet {
            grid: self.grid,
            channels: idx.iter().map(|&i| self.channels[i].clone()).collect(),
            values,
            valid_time: self.valid_time,
        }
    }

    pub fn same_layout(&self, other: &FieldSet) -> bool {
        self.grid == other.grid
            && self.channels.len() == other.channels.len()
            && self
                .channels
                .iter()
                .zip(&other.channels)
                .all(|(a, b)| a.name == b.name && a.sphere == b.sphere)
    }
}

pub fn block_indices(channels: &[Channel], block: Block) -> Vec<usize> {
    channels
        .iter()
        .enumerate()
        .filter(|(_, c)| c.sphere.block() == block)
        .map(|(i, _)| i)
        .collect()
}

/// Calendar slot in `[0, 366)`. Non-leap years skip slot 59 (Feb 29).
pub fn calendar_slot(date: NaiveDate) -> usize {
    let ordinal0 = date.ordinal0() as usize;
    let leap = NaiveDate::from_ymd_opt(date.year(), 2, 29).is_some();
    if leap || ordinal0 < 59 {
        ordinal0
    } else {
        ordinal0 + 1
    }
}

fn circular_distance(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(CALENDAR_SLOTS - d)
}

/// Per-calendar-day mean state built with a centered moving window.
#[derive(Debug, Clone)]
pub struct Climatology {
    pub grid: GridSpec,
    pub channels: Vec<Channel>,
    /// `[slot, channel, lat, lon]`
    pub means: Array4<f64>,
    pub reference_period: (i32, i32),
    pub window_halfwidth_days: usize,
}

impl Climatology {
    pub fn slot(&self, slot: usize) -> Result<ndarray::ArrayView3<'_, f64>> {
        if slot >= self.means.dim().0 {
            return Err(S2skError::MissingCalendarDay(slot));
        }
        Ok(self.means.index_axis(Axis(0), slot))
    }

    pub fn for_date(&self, date: NaiveDate) -> Result<ndarray::ArrayView3<'_, f64>> {
        self.slot(calendar_slot(date))
    }
}

/// Mean over all samples whose calendar slot lies within `halfwidth` days of
/// each slot, circularly over the year.
pub fn build_climatology(samples: &[FieldSet], halfwidth: usize) -> Result<Climatology> {
    let first = samples
        .first()
        .ok_or_else(|| S2skError::invalid("no samples for climatology"))?;
    for s in samples {
        if !s.same_layout(first) {
            return Err(S2skError::shape(format!(
                "sample at {} does not share grid/channels with the first sample",
                s.valid_time
            )));
        }
    }
    if 2 * halfwidth + 1 > CALENDAR_SLOTS {
        return Err(S2skError::invalid("window wider than the calendar"));
    }
    let (c, h, w) = first.values.dim();
    let mut sums = Array4::<f64>::zeros((CALENDAR_SLOTS, c, h, w));
    let mut counts = vec![0usize; CALENDAR_SLOTS];
    for s in samples {
        let slot = calendar_slot(s.valid_time);
        let mut acc = sums.index_axis_mut(Axis(0), slot);
        acc += &s.values;
        counts[slot] += 1;
    }

    let mut means = Array4::<f64>::zeros((CALENDAR_SLOTS, c, h, w));
    for day in 0..CALENDAR_SLOTS {
        let mut total = 0usize;
        let mut out = means.index_axis_mut(Axis(0), day);
        for (other, &n) in counts.iter().enumerate() {
            if n > 0 && circular_distance(day, other) <= halfwidth {
                out += &sums.index_axis(Axis(0), other);
                total += n;
            }
        }
        if total == 0 {
            return Err(S2skError::EmptyWindow { slot: day });
        }
        out.mapv_inplace(|v| v / total as f64);
    }

    let years = samples.iter().map(|s| s.valid_time.year());
    let period = (years.clone().min().unwrap(), years.max().unwrap());
    Ok(Climatology {
        grid: first.grid,
        channels: first.channels.clone(),
        means,
        reference_period: period,
        window_halfwidth_days: halfwidth,
    })
}

/// `x - clim[calendar_slot(x.valid_time)]`. Masked cells stay masked.
pub fn anomaly(x: &FieldSet, clim: &Climatology) -> Result<FieldSet> {
    if x.grid != clim.grid
        || x.channels.len() != clim.channels.len()
        || x.channels.iter().zip(&clim.channels).any(|(a, b)| a.name != b.name)
    {
        return Err(S2skError::shape("field and climatology layouts differ"));
    }
    let reference = clim.for_date(x.valid_time)?;
    Ok(FieldSet {
        grid: x.grid,
        channels: x.channels.clone(),
        values: &x.values - &reference,
        valid_time: x.valid_time,
    })
}

/// Haversine distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_km(p1: (f64, f64), p2: (f64, f64)) -> f64 {
    let (lat1, lon1) = (p1.0.to_radians(), p1.1.to_radians());
    let (lat2, lon2) = (p2.0.to_radians(), p2.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Latitude/longitude box. `lon_min > lon_max` wraps across the meridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

const BOX_EPS: f64 = 1e-9;

impl RegionBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = RegionBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn global() -> Self {
        RegionBox {
            lat_min: -90.0,
            lat_max: 90.0,
            lon_min: 0.0,
            lon_max: 360.0,
        }
    }

    /// East Asia box used for the influence-distance diagnostics.
    pub fn east_asia() -> Self {
        RegionBox {
            lat_min: 15.0,
            lat_max: 55.0,
            lon_min: 100.0,
            lon_max: 145.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat_min < self.lat_max) {
            return Err(S2skError::invalid(format!(
                "region lat_min {} must be below lat_max {}",
                self.lat_min, self.lat_max
            )));
        }
        if !self.lon_min.is_finite() || !self.lon_max.is_finite() {
            return Err(S2skError::invalid("region longitudes must be finite"));
        }
        Ok(())
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        if lat < self.lat_min - BOX_EPS || lat > self.lat_max + BOX_EPS {
            return false;
        }
        if self.lon_max - self.lon_min >= 360.0 - BOX_EPS {
            return true;
        }
        let span = (self.lon_max - self.lon_min).rem_euclid(360.0);
        let offset = (lon - self.lon_min).rem_euclid(360.0);
        offset <= span + BOX_EPS || offset >= 360.0 - BOX_EPS
    }
}

/// Cells of `grid` inside `region`. An empty mask is an error.
pub fn region_mask(grid: &GridSpec, region: &RegionBox) -> Result<Array2<bool>> {
    region.validate()?;
    let lats = grid.latitudes();
    let lons = grid.longitudes();
    let mask = Array2::from_shape_fn((grid.n_lat, grid.n_lon), |(h, w)| {
        region.contains(lats[h], lons[w])
    });
    if !mask.iter().any(|&m| m) {
        return Err(S2skError::invalid(format!(
            "region {region:?} contains no grid cell"
        )));
    }
    Ok(mask)
}

/// Mean of latitude row pairs `0` and `1` followed by the remaining rows.
/// Used to turn an odd pole-inclusive latitude count into an even one.
pub fn merge_polar_rows(values: ndarray::ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = values.dim();
    let mut out = Array3::zeros((c, h - 1, w));
    let merged = (&values.slice(s![.., 0, ..]) + &values.slice(s![.., 1, ..])) * 0.5;
    out.slice_mut(s![.., 0, ..]).assign(&merged);
    out.slice_mut(s![.., 1.., ..]).assign(&values.slice(s![.., 2.., ..]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn field(grid: GridSpec, value: f64, t: NaiveDate) -> FieldSet {
        FieldSet::new(
            grid,
            vec![Channel::new("T2M", Sphere::Atmosphere)],
            Array3::from_elem((1, grid.n_lat, grid.n_lon), value),
            t,
        )
        .unwrap()
    }

    fn small_grid() -> GridSpec {
        GridSpec {
            n_lat: 3,
            n_lon: 4,
            lat_start_deg: 30.0,
            lat_step_deg: -30.0,
            lon_start_deg: 0.0,
            lon_step_deg: 90.0,
        }
    }

    #[test]
    fn equator_weight_is_one() {
        assert_eq!(latitude_weights(&[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_latitude_weights() {
        let w = latitude_weights(&[0.0, 60.0]).unwrap();
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn full_grid_weights_symmetric_with_equator_peak() {
        let w = GridSpec::full().latitude_weights().unwrap();
        assert_eq!(w.len(), 121);
        let argmax = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        assert_eq!(argmax, 60);
        for h in 0..121 {
            assert!((w[h] - w[120 - h]).abs() < 1e-12);
        }
        let mean = w.iter().sum::<f64>() / 121.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w[0] < 1e-15);
    }

    #[test]
    fn all_polar_weights_rejected() {
        assert!(latitude_weights(&[90.0, -90.0]).is_err());
    }

    #[test]
    fn weights_independent_of_longitude_resolution() {
        let mut g = GridSpec::full();
        let a = g.latitude_weights().unwrap();
        g.n_lon = 60;
        g.lon_step_deg = 6.0;
        assert_eq!(a, g.latitude_weights().unwrap());
    }

    #[test]
    fn calendar_slots_skip_feb29_in_common_years() {
        assert_eq!(calendar_slot(date(2001, 1, 1)), 0);
        assert_eq!(calendar_slot(date(2001, 2, 28)), 58);
        assert_eq!(calendar_slot(date(2001, 3, 1)), 60);
        assert_eq!(calendar_slot(date(2000, 2, 29)), 59);
        assert_eq!(calendar_slot(date(2000, 3, 1)), 60);
        assert_eq!(calendar_slot(date(2001, 12, 31)), 365);
        assert_eq!(calendar_slot(date(2000, 12, 31)), 365);
    }

    #[test]
    fn constant_climatology() {
        let g = small_grid();
        let samples: Vec<_> = (0..366)
            .map(|d| field(g, 4.5, date(2000, 1, 1) + chrono::Days::new(d)))
            .collect();
        let clim = build_climatology(&samples, 15).unwrap();
        assert!(clim.means.iter().all(|&v| (v - 4.5).abs() < 1e-12));
        assert_eq!(clim.reference_period, (2000, 2000));
    }

    #[test]
    fn day_of_year_field_has_centered_window_mean() {
        let g = small_grid();
        let samples: Vec<_> = (0..366u64)
            .map(|d| {
                let t = date(2000, 1, 1) + chrono::Days::new(d);
                field(g, calendar_slot(t) as f64, t)
            })
            .collect();
        let clim = build_climatology(&samples, 15).unwrap();
        for slot in 15..=350 {
            let v = clim.slot(slot).unwrap()[[0, 1, 1]];
            assert!((v - slot as f64).abs() < 1e-9, "slot {slot}: {v}");
        }
        // Feb 29 entry is the window mean centered on day-of-year 60.
        assert!((clim.slot(59).unwrap()[[0, 0, 0]] - 59.0).abs() < 1e-9);
    }

    #[test]
    fn two_year_mean() {
        let g = small_grid();
        let mut samples = Vec::new();
        for (year, v) in [(2001, 3.0), (2002, 5.0)] {
            for d in 0..365u64 {
                samples.push(field(g, v, date(year, 1, 1) + chrono::Days::new(d)));
            }
        }
        let clim = build_climatology(&samples, 15).unwrap();
        assert!(clim.means.iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn empty_window_names_the_day() {
        let g = small_grid();
        let samples = vec![field(g, 1.0, date(2001, 1, 10))];
        match build_climatology(&samples, 15) {
            Err(S2skError::EmptyWindow { slot }) => assert_eq!(slot, 25),
            other => panic!("expected empty window error, got {other:?}"),
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let mut other = small_grid();
        other.n_lon = 5;
        let samples = vec![
            field(small_grid(), 1.0, date(2001, 1, 1)),
            field(other, 1.0, date(2001, 1, 2)),
        ];
        assert!(matches!(build_climatology(&samples, 200), Err(S2skError::Shape(_))));
    }

    #[test]
    fn anomaly_identities() {
        let g = small_grid();
        let samples: Vec<_> = (0..366u64)
            .map(|d| field(g, 2.0, date(2000, 1, 1) + chrono::Days::new(d)))
            .collect();
        let clim = build_climatology(&samples, 15).unwrap();
        let x = field(g, 2.0, date(2003, 5, 5));
        assert!(anomaly(&x, &clim).unwrap().values.iter().all(|&v| v == 0.0));
        let y = field(g, 2.75, date(2003, 5, 5));
        assert!(anomaly(&y, &clim).unwrap().values.iter().all(|&v| (v - 0.75).abs() < 1e-12));

        let mut zero = clim.clone();
        zero.means.fill(0.0);
        assert_eq!(anomaly(&y, &zero).unwrap().values, y.values);
    }

    #[test]
    fn anomaly_of_reference_set_has_zero_daily_mean() {
        // One sample per slot per year and a zero-width window: each day's
        // window is exactly that day's reference samples.
        let g = small_grid();
        let mut samples = Vec::new();
        for (k, year) in [2000, 2004].into_iter().enumerate() {
            for d in 0..366u64 {
                let t = date(year, 1, 1) + chrono::Days::new(d);
                let v = (d as f64 * 0.1).sin() + k as f64 * 1.7;
                samples.push(field(g, v, t));
            }
        }
        let clim = build_climatology(&samples, 0).unwrap();
        for d in 0..366usize {
            let a0 = anomaly(&samples[d], &clim).unwrap();
            let a1 = anomaly(&samples[366 + d], &clim).unwrap();
            let m = (a0.values[[0, 0, 0]] + a1.values[[0, 0, 0]]) / 2.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn masked_fields_allow_nan() {
        let g = small_grid();
        let mask = Arc::new(Array2::from_shape_fn((3, 4), |(h, _)| h != 0));
        let mut values = Array3::zeros((1, 3, 4));
        values[[0, 0, 2]] = f64::NAN;
        let ok = FieldSet::new(
            g,
            vec![Channel::masked("SST", Sphere::Ocean, mask)],
            values.clone(),
            date(2001, 1, 1),
        );
        assert!(ok.is_ok());
        let bad = FieldSet::new(
            g,
            vec![Channel::new("SST", Sphere::Ocean)],
            values,
            date(2001, 1, 1),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn great_circle_anchors() {
        assert_eq!(great_circle_km((10.0, 20.0), (10.0, 20.0)), 0.0);
        let half = std::f64::consts::PI * EARTH_RADIUS_KM;
        assert!((great_circle_km((0.0, 0.0), (0.0, 180.0)) - half).abs() < 1e-6);
        assert!((half - 20015.086796).abs() < 1e-3);
        assert!((great_circle_km((90.0, 0.0), (-90.0, 0.0)) - half).abs() < 1e-6);
    }

    #[test]
    fn global_and_single_cell_masks() {
        let g = GridSpec::full();
        let all = region_mask(&g, &RegionBox::global()).unwrap();
        assert!(all.iter().all(|&m| m));
        let one = region_mask(&g, &RegionBox::new(44.9, 45.1, 30.0, 30.5).unwrap()).unwrap();
        assert_eq!(one.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn wrapping_box_column_count() {
        let g = GridSpec::full();
        let m = region_mask(&g, &RegionBox::new(-10.0, 10.0, 350.0, 10.0).unwrap()).unwrap();
        let lats = g.latitudes();
        for h in 0..g.n_lat {
            let n = m.row(h).iter().filter(|&&b| b).count();
            let expect = if (-10.0..=10.0).contains(&lats[h]) { 13 } else { 0 };
            assert_eq!(n, expect, "row {h}");
        }
        // Enumeration oracle over the 240 columns.
        let oracle = (0..240)
            .map(|w| w as f64 * 1.5)
            .filter(|&lon| lon >= 350.0 || lon <= 10.0)
            .count();
        assert_eq!(oracle, 13);
    }

    #[test]
    fn empty_region_is_error() {
        let g = GridSpec::desk();
        assert!(region_mask(&g, &RegionBox::new(1.0, 2.0, 1.0, 2.0).unwrap()).is_err());
        assert!(RegionBox::new(5.0, 5.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn spatial_weights_respect_mask() {
        let g = small_grid();
        let mask = Array2::from_shape_fn((3, 4), |(_, w)| w < 2);
        let sw = SpatialWeights::new(&g, Some(&mask)).unwrap();
        let mut f = Array2::from_elem((3, 4), 1.0);
        f[[1, 3]] = 1e9;
        assert!((sw.mean(f.view()) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn triangle_inequality(
            a in (-90.0f64..90.0, 0.0f64..360.0),
            b in (-90.0f64..90.0, 0.0f64..360.0),
            c in (-90.0f64..90.0, 0.0f64..360.0),
        ) {
            let ab = great_circle_km(a, b);
            let bc = great_circle_km(b, c);
            let ac = great_circle_km(a, c);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!((ab - great_circle_km(b, a)).abs() < 1e-9);
        }

        #[test]
        fn mask_intersection(
            la in -80.0f64..0.0, ha in 5.0f64..80.0, lo_a in 0.0f64..150.0, wa in 20.0f64..150.0,
            lb in -80.0f64..0.0, hb in 5.0f64..80.0, lo_b in 0.0f64..150.0, wb in 20.0f64..150.0,
        ) {
            let g = GridSpec::desk();
            let a = RegionBox::new(la, ha, lo_a, lo_a + wa).unwrap();
            let b = RegionBox::new(lb, hb, lo_b, lo_b + wb).unwrap();
            let ma = region_mask(&g, &a).unwrap();
            let mb = region_mask(&g, &b).unwrap();
            let lat = (la.max(lb), ha.min(hb));
            let lon = (lo_a.max(lo_b), (lo_a + wa).min(lo_b + wb));
            let both: Vec<bool> = ma.iter().zip(mb.iter()).map(|(x, y)| *x && *y).collect();
            if lat.0 < lat.1 && lon.0 <= lon.1 {
                let inter = RegionBox { lat_min: lat.0, lat_max: lat.1, lon_min: lon.0, lon_max: lon.1 };
                match region_mask(&g, &inter) {
                    Ok(mi) => prop_assert_eq!(mi.iter().copied().collect::<Vec<_>>(), both),
                    Err(_) => prop_assert!(both.iter().all(|&x| !x)),
                }
            } else {
                prop_assert!(both.iter().all(|&x| !x));
            }
        }
    }
}
