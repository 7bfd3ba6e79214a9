//! Channel inventories and the synthetic land-sea mask.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S2skError};
use crate::grid::{Channel, GridSpec, Sphere};

pub const PRESSURE_LEVELS_HPA: [u32; 13] = [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000];
pub const UPPER_AIR: [&str; 5] = ["Q", "T", "U", "V", "Z"];
pub const SURFACE: [&str; 6] = ["T2M", "OLR", "TP", "MSLP", "U10", "V10"];
/// Channels that exist only over the ocean.
pub const OCEAN_ONLY: [&str; 2] = ["SST", "SIC"];

/// Deterministic continents: land where a smooth lat/lon pattern is high.
/// `true` marks ocean.
pub fn ocean_mask(grid: &GridSpec) -> Array2<bool> {
    Array2::from_shape_fn((grid.n_lat, grid.n_lon), |(h, w)| {
        let lat = grid.lat(h).to_radians();
        let lon = grid.lon(w).to_radians();
        let land = (2.0 * lon).cos() * lat.cos() + 0.4 * (3.0 * lat).sin() + 0.3 * (lon + 1.0).sin();
        land < 0.55
    })
}

fn layout(names: &[(String, Sphere)], grid: &GridSpec) -> Vec<Channel> {
    let mask = Arc::new(ocean_mask(grid));
    names
        .iter()
        .map(|(n, s)| {
            if OCEAN_ONLY.contains(&n.as_str()) {
                Channel::masked(n.clone(), *s, mask.clone())
            } else {
                Channel::new(n.clone(), *s)
            }
        })
        .collect()
}

fn boundary_names() -> Vec<(String, Sphere)> {
    let mut v: Vec<(String, Sphere)> = vec![("SST".into(), Sphere::Ocean), ("SIC".into(), Sphere::Ocean)];
    for l in 1..=3 {
        v.push((format!("ST{l}"), Sphere::Land));
    }
    for l in 1..=3 {
        v.push((format!("SM{l}"), Sphere::Land));
    }
    v.push(("LHF".into(), Sphere::Flux));
    v.push(("SHF".into(), Sphere::Flux));
    v
}

/// Full inventory: 5 upper-air variables at 13 levels, 6 surface variables,
/// SST/SIC, soil temperature and moisture at 3 depths, and two surface fluxes (81).
pub fn full_channels(grid: &GridSpec) -> Vec<Channel> {
    let mut names: Vec<(String, Sphere)> = Vec::new();
    for v in UPPER_AIR {
        for l in PRESSURE_LEVELS_HPA {
            names.push((format!("{v}{l}"), Sphere::Atmosphere));
        }
    }
    names.extend(SURFACE.iter().map(|s| (s.to_string(), Sphere::Atmosphere)));
    names.extend(boundary_names());
    layout(&names, grid)
}

/// Reduced 14-channel inventory used at desk scale.
pub fn desk_channels(grid: &GridSpec) -> Vec<Channel> {
    let names: Vec<(String, Sphere)> = [
        ("Q500", Sphere::Atmosphere),
        ("T850", Sphere::Atmosphere),
        ("U200", Sphere::Atmosphere),
        ("V200", Sphere::Atmosphere),
        ("Z500", Sphere::Atmosphere),
        ("T2M", Sphere::Atmosphere),
        ("TP", Sphere::Atmosphere),
        ("MSLP", Sphere::Atmosphere),
        ("SST", Sphere::Ocean),
        ("SIC", Sphere::Ocean),
        ("ST1", Sphere::Land),
        ("SM1", Sphere::Land),
        ("LHF", Sphere::Flux),
        ("SHF", Sphere::Flux),
    ]
    .iter()
    .map(|(n, s)| (n.to_string(), *s))
    .collect();
    layout(&names, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Inventory {
    #[default]
    Desk,
    Full,
}

impl Inventory {
    pub fn channels(self, grid: &GridSpec) -> Vec<Channel> {
        match self {
            Inventory::Desk => desk_channels(grid),
            Inventory::Full => full_channels(grid),
        }
    }
}

/// Serializable description of a channel; masks are rebuilt from the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub sphere: Sphere,
    pub ocean_only: bool,
}

impl From<&Channel> for ChannelMeta {
    fn from(c: &Channel) -> Self {
        ChannelMeta {
            name: c.name.clone(),
            sphere: c.sphere,
            ocean_only: c.mask.is_some(),
        }
    }
}

pub fn channels_from_meta(meta: &[ChannelMeta], grid: &GridSpec) -> Result<Vec<Channel>> {
    let mask = Arc::new(ocean_mask(grid));
    let out: Vec<Channel> = meta
        .iter()
        .map(|m| {
            if m.ocean_only {
                Channel::masked(m.name.clone(), m.sphere, mask.clone())
            } else {
                Channel::new(m.name.clone(), m.sphere)
            }
        })
        .collect();
    if out.is_empty() {
        return Err(S2skError::invalid("channel list is empty"));
    }
    Ok(out)
}
