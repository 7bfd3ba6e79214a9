//! Perturbation importance: shuffle one predictor group in the initial
//! conditions, rerun the ensemble with unchanged member seeds, and measure
//! how much the forecast error grows.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S2skError};
use crate::grid::{Channel, FieldSet, SpatialWeights, Sphere};
use crate::stats::{derive_seed, mean, sample_std};
use crate::verify::wrmse;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorGroup {
    pub name: String,
    pub channels: Vec<usize>,
}

impl PredictorGroup {
    pub fn new(name: impl Into<String>, channels: Vec<usize>) -> Self {
        PredictorGroup {
            name: name.into(),
            channels,
        }
    }
}

/// Checks that `groups` are disjoint, in range and together cover every channel.
pub fn validate_partition(groups: &[PredictorGroup], n_channels: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut names = BTreeSet::new();
    for g in groups {
        if !names.insert(g.name.as_str()) {
            return Err(S2skError::invalid(format!("duplicate group name {}", g.name)));
        }
        for &c in &g.channels {
            if c >= n_channels {
                return Err(S2skError::invalid(format!("group {} references channel {c} of {n_channels}", g.name)));
            }
            if !seen.insert(c) {
                return Err(S2skError::invalid(format!("channel {c} appears in more than one group (second: {})", g.name)));
            }
        }
    }
    if seen.len() != n_channels {
        let missing: Vec<usize> = (0..n_channels).filter(|c| !seen.contains(c)).collect();
        return Err(S2skError::invalid(format!("channels {missing:?} belong to no group")));
    }
    Ok(())
}

const SURFACE_ATMOSPHERE: &[&str] = &["T2M", "OLR", "TP", "MSLP", "U10", "V10"];

/// Six atmospheric groups (Q, T, U, V, Z, Sfc) and one group per boundary sphere.
/// Empty groups are dropped.
pub fn default_groups(channels: &[Channel]) -> Vec<PredictorGroup> {
    let names = ["Q", "T", "U", "V", "Z", "Sfc", "Ocean", "Land", "Flux"];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for (i, c) in channels.iter().enumerate() {
        let slot = match c.sphere {
            Sphere::Ocean => 6,
            Sphere::Land => 7,
            Sphere::Flux => 8,
            Sphere::Atmosphere if SURFACE_ATMOSPHERE.contains(&c.name.as_str()) => 5,
            Sphere::Atmosphere => match c.name.chars().next() {
                Some('Q') => 0,
                Some('T') => 1,
                Some('U') => 2,
                Some('V') => 3,
                Some('Z') => 4,
                _ => 5,
            },
        };
        members[slot].push(i);
    }
    names
        .iter()
        .zip(members)
        .filter(|(_, m)| !m.is_empty())
        .map(|(n, m)| PredictorGroup::new(*n, m))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleScheme {
    /// One random permutation of the valid cells per channel.
    #[default]
    Spatial,
    /// One permutation over all (channel, valid cell) values of the group.
    Joint,
}

impl fmt::Display for ShuffleScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShuffleScheme::Spatial => "spatial",
            ShuffleScheme::Joint => "joint",
        })
    }
}

fn valid_cells(x: &FieldSet, ch: usize) -> Vec<(usize, usize)> {
    let (_, h, w) = x.values.dim();
    (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| x.channels[ch].is_valid(r, c))
        .collect()
}

/// Shuffles `group` in both conditioning states with shared permutations.
/// Channels outside the group are returned bitwise unchanged.
pub fn shuffle_group_pair(
    previous: &FieldSet,
    latest: &FieldSet,
    group: &PredictorGroup,
    rng: &mut dyn RngCore,
    scheme: ShuffleScheme,
) -> Result<(FieldSet, FieldSet)> {
    if !previous.same_layout(latest) {
        return Err(S2skError::shape("conditioning states differ in layout"));
    }
    let n = latest.channels.len();
    if let Some(&c) = group.channels.iter().find(|&&c| c >= n) {
        return Err(S2skError::invalid(format!("group {} references unknown channel {c}", group.name)));
    }
    let (mut p, mut l) = (previous.clone(), latest.clone());
    match scheme {
        ShuffleScheme::Spatial => {
            for &ch in &group.channels {
                let cells = valid_cells(latest, ch);
                let mut perm: Vec<usize> = (0..cells.len()).collect();
                perm.shuffle(rng);
                for (dst, &src) in cells.iter().zip(&perm) {
                    let s = cells[src];
                    p.values[[ch, dst.0, dst.1]] = previous.values[[ch, s.0, s.1]];
                    l.values[[ch, dst.0, dst.1]] = latest.values[[ch, s.0, s.1]];
                }
            }
        }
        ShuffleScheme::Joint => {
            let sites: Vec<(usize, usize, usize)> = group
                .channels
                .iter()
                .flat_map(|&ch| valid_cells(latest, ch).into_iter().map(move |(r, c)| (ch, r, c)))
                .collect();
            let mut perm: Vec<usize> = (0..sites.len()).collect();
            perm.shuffle(rng);
            for (dst, &src) in sites.iter().zip(&perm) {
                let s = sites[src];
                p.values[[dst.0, dst.1, dst.2]] = previous.values[[s.0, s.1, s.2]];
                l.values[[dst.0, dst.1, dst.2]] = latest.values[[s.0, s.1, s.2]];
            }
        }
    }
    Ok((p, l))
}

/// Single-state form of [`shuffle_group_pair`].
pub fn shuffle_group(x: &FieldSet, group: &PredictorGroup, rng: &mut dyn RngCore, scheme: ShuffleScheme) -> Result<FieldSet> {
    Ok(shuffle_group_pair(x, x, group, rng, scheme)?.1)
}

/// Produces one ensemble member's forecast series (lead days 1..) from two
/// initial states. Must be deterministic in `seed`.
pub trait EnsembleRunner: Sync {
    fn run_member(&self, previous: &FieldSet, latest: &FieldSet, member_id: usize, seed: u64) -> Result<Vec<FieldSet>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub group: String,
    pub mean_rmse_increase: f64,
    pub std: f64,
    pub baseline_rmse: f64,
    pub per_member_increase: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PimReport {
    pub groups: Vec<GroupImportance>,
    pub n_members: usize,
    pub seed: u64,
    pub scheme: ShuffleScheme,
    pub target_channels: Vec<String>,
    pub member_seeds: Vec<u64>,
}

impl PimReport {
    pub fn get(&self, group: &str) -> Option<&GroupImportance> {
        self.groups.iter().find(|g| g.group == group)
    }

    /// Columns: group, mean_rmse_increase, std, baseline_rmse.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            group: &'a str,
            mean_rmse_increase: f64,
            std: f64,
            baseline_rmse: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for g in &self.groups {
            w.serialize(Row {
                group: &g.group,
                mean_rmse_increase: g.mean_rmse_increase,
                std: g.std,
                baseline_rmse: g.baseline_rmse,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stream index used for shuffle seeds, distinct from member streams.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Weighted RMSE over all lead days and target channels of one member.
fn member_rmse(forecast: &[FieldSet], truth: &[FieldSet], targets: &[usize], weights: &[SpatialWeights]) -> Result<f64> {
    if forecast.len() != truth.len() {
        return Err(S2skError::shape(format!(
            "runner produced {} lead days, truth has {}",
            forecast.len(),
            truth.len()
        )));
    }
    let mut f: Vec<ArrayView2<f64>> = Vec::new();
    let mut t: Vec<ArrayView2<f64>> = Vec::new();
    let mut ms = 0.0;
    for (k, &ch) in targets.iter().enumerate() {
        f.clear();
        t.clear();
        for (x, y) in forecast.iter().zip(truth) {
            if !x.same_layout(y) {
                return Err(S2skError::shape("forecast and truth layouts differ"));
            }
            f.push(x.values.index_axis(ndarray::Axis(0), ch));
            t.push(y.values.index_axis(ndarray::Axis(0), ch));
        }
        ms += wrmse(&f, &t, &weights[k])?.powi(2);
    }
    Ok((ms / targets.len() as f64).sqrt())
}

/// Perturbation importance of each group for the target channels.
///
/// The baseline and every shuffled run use identical member seeds
/// `derive_seed(seed, member)`; each group gets one shuffle shared by all
/// members, seeded independently of the member streams.
#[allow(clippy::too_many_arguments)]
pub fn pim(
    runner: &dyn EnsembleRunner,
    init: (&FieldSet, &FieldSet),
    truth: &[FieldSet],
    groups: &[PredictorGroup],
    target_channels: &[usize],
    n_members: usize,
    seed: u64,
    scheme: ShuffleScheme,
) -> Result<PimReport> {
    let (previous, latest) = init;
    validate_partition(groups, latest.channels.len())?;
    if n_members == 0 {
        return Err(S2skError::invalid("PIM needs at least one member"));
    }
    if target_channels.is_empty() || target_channels.iter().any(|&c| c >= latest.channels.len()) {
        return Err(S2skError::invalid("target channels must be non-empty and in range"));
    }
    if truth.is_empty() {
        return Err(S2skError::invalid("truth series is empty"));
    }
    let weights: Vec<SpatialWeights> = target_channels
        .iter()
        .map(|&c| SpatialWeights::new(&latest.grid, latest.channels[c].mask.as_deref()))
        .collect::<Result<_>>()?;
    let member_seeds: Vec<u64> = (0..n_members).map(|m| derive_seed(seed, m as u64)).collect();

    let run = |p: &FieldSet, l: &FieldSet| -> Result<Vec<f64>> {
        (0..n_members)
            .into_par_iter()
            .map(|m| {
                let fc = runner.run_member(p, l, m, member_seeds[m])?;
                member_rmse(&fc, truth, target_channels, &weights)
            })
            .collect()
    };
    let baseline = run(previous, latest)?;
    let baseline_rmse = mean(&baseline);

    let shuffle_master = derive_seed(seed, SHUFFLE_STREAM);
    let mut out = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(shuffle_master, gi as u64));
        let (p, l) = shuffle_group_pair(previous, latest, g, &mut rng, scheme)?;
        let shuffled = run(&p, &l)?;
        let inc: Vec<f64> = shuffled.iter().zip(&baseline).map(|(s, b)| s - b).collect();
        out.push(GroupImportance {
            group: g.name.clone(),
            mean_rmse_increase: mean(&inc),
            std: sample_std(&inc),
            baseline_rmse,
            per_member_increase: inc,
        });
    }
    Ok(PimReport {
        groups: out,
        n_members,
        seed,
        scheme,
        target_channels: target_channels.iter().map(|&c| latest.channels[c].name.clone()).collect(),
        member_seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use ndarray::{Array2, Array3, Axis};
    use rand::Rng;
    use std::sync::Arc;

    fn date(d: u32) -> chrono::NaiveDate {
        chrono::NaiveDate::from_ymd_opt(2010, 3, d).unwrap()
    }

    fn layout() -> Vec<Channel> {
        let mut mask = Array2::from_elem((4, 6), true);
        mask[[0, 0]] = false;
        mask[[3, 5]] = false;
        vec![
            Channel::new("Z500", Sphere::Atmosphere),
            Channel::new("T2M", Sphere::Atmosphere),
            Channel::masked("SST", Sphere::Ocean, Arc::new(mask)),
            Channel::new("SM1", Sphere::Land),
        ]
    }

    fn grid() -> GridSpec {
        GridSpec {
            n_lat: 4,
            n_lon: 6,
            lat_start_deg: 67.5,
            lat_step_deg: -45.0,
            lon_start_deg: 0.0,
            lon_step_deg: 60.0,
        }
    }

    fn random_state(seed: u64, d: u32) -> FieldSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut v = Array3::from_shape_simple_fn((4, 4, 6), || rng.gen_range(-1.0..1.0));
        v[[2, 0, 0]] = f64::NAN;
        v[[2, 3, 5]] = f64::NAN;
        FieldSet::new(grid(), layout(), v, date(d)).unwrap()
    }

    fn groups() -> Vec<PredictorGroup> {
        vec![
            PredictorGroup::new("Z", vec![0]),
            PredictorGroup::new("Sfc", vec![1]),
            PredictorGroup::new("Ocean", vec![2]),
            PredictorGroup::new("Land", vec![3]),
        ]
    }

    #[test]
    fn partition_validation() {
        assert!(validate_partition(&groups(), 4).is_ok());
        let mut g = groups();
        g[1].channels.push(0);
        assert!(validate_partition(&g, 4).is_err());
        assert!(validate_partition(&groups()[..3], 4).is_err());
        assert!(validate_partition(&groups(), 3).is_err());
    }

    #[test]
    fn default_groups_cover_layout() {
        let g = default_groups(&layout());
        assert!(validate_partition(&g, 4).is_ok());
        let names: Vec<&str> = g.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["Z", "Sfc", "Ocean", "Land"]);
    }

    #[test]
    fn shuffle_is_a_masked_permutation() {
        let x = random_state(1, 1);
        let y = random_state(2, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let g = PredictorGroup::new("mix", vec![0, 2]);
        let (p, l) = shuffle_group_pair(&x, &y, &g, &mut rng, ShuffleScheme::Spatial).unwrap();
        for ch in [1, 3] {
            assert_eq!(l.values.index_axis(Axis(0), ch), y.values.index_axis(Axis(0), ch));
            assert_eq!(p.values.index_axis(Axis(0), ch), x.values.index_axis(Axis(0), ch));
        }
        for ch in [0, 2] {
            let sorted = |a: &FieldSet| {
                let mut v: Vec<f64> = a.values.index_axis(Axis(0), ch).iter().copied().filter(|v| !v.is_nan()).collect();
                v.sort_by(f64::total_cmp);
                v
            };
            assert_eq!(sorted(&l), sorted(&y));
            assert_ne!(l.values.index_axis(Axis(0), ch), y.values.index_axis(Axis(0), ch));
        }
        assert!(l.values[[2, 0, 0]].is_nan() && l.values[[2, 3, 5]].is_nan());
        // Same permutation on both steps: the pairing (prev, latest) of each value survives.
        let pairs = |a: &FieldSet, b: &FieldSet| {
            let mut v: Vec<(u64, u64)> = a.values.index_axis(Axis(0), 0).iter().zip(b.values.index_axis(Axis(0), 0).iter()).map(|(u, w)| (u.to_bits(), w.to_bits())).collect();
            v.sort();
            v
        };
        assert_eq!(pairs(&p, &l), pairs(&x, &y));
    }

    #[test]
    fn shuffle_edge_cases() {
        let x = random_state(1, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bits = |a: &FieldSet| crate::stats::fingerprint(a.values.iter());
        let empty = PredictorGroup::new("none", vec![]);
        assert_eq!(bits(&shuffle_group(&x, &empty, &mut rng, ShuffleScheme::Spatial).unwrap()), bits(&x));
        let mut c = x.clone();
        c.values.index_axis_mut(Axis(0), 3).fill(2.5);
        let g = PredictorGroup::new("Land", vec![3]);
        assert_eq!(bits(&shuffle_group(&c, &g, &mut rng, ShuffleScheme::Spatial).unwrap()), bits(&c));
        assert!(shuffle_group(&x, &PredictorGroup::new("bad", vec![9]), &mut rng, ShuffleScheme::Spatial).is_err());
        let joint = shuffle_group(&x, &PredictorGroup::new("j", vec![0, 1]), &mut rng, ShuffleScheme::Joint).unwrap();
        let mut a: Vec<u64> = x.values.slice(ndarray::s![0..2, .., ..]).iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = joint.values.slice(ndarray::s![0..2, .., ..]).iter().map(|v| v.to_bits()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    /// Forecast = latest state's channel `src` copied into every channel, plus seeded noise.
    struct Copy {
        src: usize,
        horizon: usize,
    }

    impl EnsembleRunner for Copy {
        fn run_member(&self, _p: &FieldSet, l: &FieldSet, _m: usize, seed: u64) -> Result<Vec<FieldSet>> {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            (0..self.horizon)
                .map(|k| {
                    let mut f = l.clone();
                    f.valid_time = l.valid_time + chrono::Days::new(k as u64 + 1);
                    for ch in 0..f.channels.len() {
                        let src = l.values.index_axis(Axis(0), self.src).to_owned();
                        f.values.index_axis_mut(Axis(0), ch).assign(&src);
                    }
                    f.values.mapv_inplace(|v| v + 0.01 * rng.gen_range(-1.0..1.0));
                    Ok(f)
                })
                .collect()
        }
    }

    #[test]
    fn pim_on_copy_runner() {
        let (p, l) = (random_state(1, 1), random_state(2, 2));
        let truth: Vec<FieldSet> = (0..3).map(|k| {
            let mut t = l.clone();
            t.valid_time = l.valid_time + chrono::Days::new(k + 1);
            t
        }).collect();
        let runner = Copy { src: 1, horizon: 3 };
        let r = pim(&runner, (&p, &l), &truth, &groups(), &[0], 4, 9, ShuffleScheme::Spatial).unwrap();
        for ignored in ["Z", "Ocean", "Land"] {
            assert_eq!(r.get(ignored).unwrap().mean_rmse_increase, 0.0);
            assert!(r.get(ignored).unwrap().per_member_increase.iter().all(|&v| v == 0.0));
        }
        assert!(r.get("Sfc").unwrap().mean_rmse_increase > 0.0);
        let again = pim(&runner, (&p, &l), &truth, &groups(), &[0], 4, 9, ShuffleScheme::Spatial).unwrap();
        assert_eq!(r, again);
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("group,mean_rmse_increase,std,baseline_rmse"));
    }

    #[test]
    fn pim_rejects_overlapping_groups() {
        let (p, l) = (random_state(1, 1), random_state(2, 2));
        let mut g = groups();
        g[0].channels.push(1);
        let runner = Copy { src: 1, horizon: 1 };
        assert!(pim(&runner, (&p, &l), std::slice::from_ref(&l), &g, &[0], 2, 0, ShuffleScheme::Spatial).is_err());
    }
}
