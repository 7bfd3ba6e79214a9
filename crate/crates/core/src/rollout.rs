//! Autoregressive ensemble inference in latent space.
//!
//! Each member starts from the two embedded initial states, samples the next
//! latent with the reverse diffusion process conditioned on the two most
//! recent latents, slides the window, and repeats. Decoding to physical space
//! happens once, after the whole latent trajectory exists.

use chrono::{Days, NaiveDate};
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{otb_block, OtbOutput, OtbParams};
use crate::diffusion::{gaussian_bridge, sample, Conditioning, Denoiser, NoiseSchedule, DEFAULT_INFERENCE_STEPS};
use crate::error::{Result, S2skError};
use crate::grid::{Channel, FieldSet, GridSpec};
use crate::stats::{derive_seed, fingerprint};
use crate::vq::Embedding;

pub const DEFAULT_HORIZON_DAYS: usize = 45;
pub const MAX_HORIZON_DAYS: usize = 180;
pub const DEFAULT_MEMBERS: usize = 51;
/// Recorded in manifests next to member seeds.
pub const SEED_SCHEME: &str = "splitmix64(master ^ splitmix64(member_id)) -> ChaCha20";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon_days: usize,
    pub n_members: usize,
    pub n_infer: usize,
    pub master_seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            horizon_days: DEFAULT_HORIZON_DAYS,
            n_members: DEFAULT_MEMBERS,
            n_infer: DEFAULT_INFERENCE_STEPS,
            master_seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_days == 0 || self.horizon_days > MAX_HORIZON_DAYS {
            return Err(S2skError::invalid(format!(
                "horizon must be in [1, {MAX_HORIZON_DAYS}] days, got {}",
                self.horizon_days
            )));
        }
        if self.n_members == 0 {
            return Err(S2skError::invalid("ensemble needs at least one member"));
        }
        if self.n_infer == 0 {
            return Err(S2skError::invalid("n_infer must be at least 1"));
        }
        Ok(())
    }

    pub fn member_seed(&self, member_id: usize) -> u64 {
        derive_seed(self.master_seed, member_id as u64)
    }

    pub fn member_seeds(&self) -> Vec<u64> {
        (0..self.n_members).map(|m| self.member_seed(m)).collect()
    }
}

/// Which latent occupied a conditioning slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum WindowSlot {
    /// 0 = `X^{t-1}`, 1 = `X^t`.
    Initial(usize),
    /// Output of rollout step `k` (1-based).
    Prediction(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRecord {
    /// 1-based rollout step.
    pub step: usize,
    pub latest: WindowSlot,
    pub previous: WindowSlot,
    pub latest_checksum: u64,
    pub previous_checksum: u64,
    pub output_checksum: u64,
}

#[derive(Debug, Clone)]
pub struct MemberTrajectory {
    pub member_id: usize,
    pub seed: u64,
    /// `[horizon, C_latent, h, w]`
    pub latents: Array4<f64>,
    pub trace: Vec<WindowRecord>,
}

/// Rolls one member forward `config.horizon_days` steps from `(previous, latest)`.
/// All randomness comes from `seed`.
pub fn rollout_member(
    init: (&Array3<f64>, &Array3<f64>),
    config: &RolloutConfig,
    member_id: usize,
    seed: u64,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<MemberTrajectory> {
    config.validate()?;
    let (prev0, latest0) = init;
    if prev0.dim() != latest0.dim() {
        return Err(S2skError::shape("initial latents differ in shape"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let shape = latest0.dim();
    let mut latents = Array4::zeros((config.horizon_days, shape.0, shape.1, shape.2));
    let mut trace = Vec::with_capacity(config.horizon_days);

    let mut previous = (prev0.clone(), WindowSlot::Initial(0));
    let mut latest = (latest0.clone(), WindowSlot::Initial(1));
    for step in 1..=config.horizon_days {
        let cond = Conditioning {
            latest: &latest.0,
            previous: &previous.0,
        };
        let out = sample(denoiser, schedule, shape, &cond, &mut rng, config.n_infer, member_id, false)?.latent;
        if out.dim() != shape {
            return Err(S2skError::shape(format!("step {step} produced shape {:?}", out.dim())));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(S2skError::NonFiniteLatent { step });
        }
        trace.push(WindowRecord {
            step,
            latest: latest.1,
            previous: previous.1,
            latest_checksum: fingerprint(latest.0.iter()),
            previous_checksum: fingerprint(previous.0.iter()),
            output_checksum: fingerprint(out.iter()),
        });
        latents.index_axis_mut(Axis(0), step - 1).assign(&out);
        previous = std::mem::replace(&mut latest, (out, WindowSlot::Prediction(step)));
    }
    Ok(MemberTrajectory {
        member_id,
        seed,
        latents,
        trace,
    })
}

/// Checks that step `k` was conditioned on the outputs of steps `k-1` and
/// `k-2` (initial states for the first two steps), by slot and by checksum.
pub fn verify_sliding_window(traj: &MemberTrajectory, init: (&Array3<f64>, &Array3<f64>)) -> Result<()> {
    let latent_at = |slot: WindowSlot| -> Option<ArrayView3<f64>> {
        match slot {
            WindowSlot::Initial(0) => Some(init.0.view()),
            WindowSlot::Initial(1) => Some(init.1.view()),
            WindowSlot::Initial(_) => None,
            WindowSlot::Prediction(k) if k >= 1 && k <= traj.latents.dim().0 => {
                Some(traj.latents.index_axis(Axis(0), k - 1))
            }
            WindowSlot::Prediction(_) => None,
        }
    };
    if traj.trace.len() != traj.latents.dim().0 {
        return Err(S2skError::invalid("trace length differs from trajectory length"));
    }
    for (i, rec) in traj.trace.iter().enumerate() {
        let k = i + 1;
        let expect_latest = if k >= 2 { WindowSlot::Prediction(k - 1) } else { WindowSlot::Initial(1) };
        let expect_previous = match k {
            1 => WindowSlot::Initial(0),
            2 => WindowSlot::Initial(1),
            _ => WindowSlot::Prediction(k - 2),
        };
        let fail = |what: &str| S2skError::invalid(format!("sliding window broken at step {k}: {what}"));
        if rec.step != k || rec.latest != expect_latest || rec.previous != expect_previous {
            return Err(fail("slot assignment"));
        }
        let sum = |slot| latent_at(slot).map(|v| fingerprint(v.iter()));
        if sum(rec.latest) != Some(rec.latest_checksum) || sum(rec.previous) != Some(rec.previous_checksum) {
            return Err(fail("conditioning checksum"));
        }
        if sum(WindowSlot::Prediction(k)) != Some(rec.output_checksum) {
            return Err(fail("output checksum"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub member_id: usize,
    pub seed: u64,
    pub message: String,
}

/// Everything a rollout needs besides its initial states.
pub struct RolloutComponents<'a> {
    pub embedding: &'a Embedding,
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone)]
pub struct EnsembleForecast {
    /// Per member `[horizon, C, H, W]` in physical units; `None` for failed
    /// members. Masked cells hold NaN.
    pub members: Vec<Option<Array4<f32>>>,
    pub seeds: Vec<u64>,
    pub failures: Vec<MemberFailure>,
    pub channels: Vec<Channel>,
    pub grid: GridSpec,
    pub init_date: NaiveDate,
    pub config: RolloutConfig,
    /// Latent trajectories, kept for trace verification and plan analysis.
    pub trajectories: Vec<Option<MemberTrajectory>>,
}

impl EnsembleForecast {
    pub fn valid_date(&self, lead_day: usize) -> NaiveDate {
        self.init_date + Days::new(lead_day as u64)
    }

    /// Successful members at `lead_day` (1-based) as `[M, C, H, W]` in f64.
    pub fn lead(&self, lead_day: usize) -> Result<Array4<f64>> {
        if lead_day == 0 || lead_day > self.config.horizon_days {
            return Err(S2skError::invalid(format!("lead day {lead_day} outside the horizon")));
        }
        let ok: Vec<_> = self.members.iter().flatten().collect();
        if ok.is_empty() {
            return Err(S2skError::invalid("no successful members"));
        }
        let (_, c, h, w) = ok[0].dim();
        let mut out = Array4::zeros((ok.len(), c, h, w));
        for (m, mem) in ok.iter().enumerate() {
            out.index_axis_mut(Axis(0), m)
                .assign(&mem.index_axis(Axis(0), lead_day - 1).mapv(f64::from));
        }
        Ok(out)
    }

    pub fn n_successful(&self) -> usize {
        self.members.iter().filter(|m| m.is_some()).count()
    }
}

/// Runs `config.n_members` independent members from two consecutive physical
/// states and decodes each trajectory once at the end.
///
/// A failing member is recorded in `failures` and leaves a `None` slot; the
/// remaining members are still returned.
pub fn rollout_ensemble(
    previous: &FieldSet,
    latest: &FieldSet,
    config: &RolloutConfig,
    components: &RolloutComponents<'_>,
) -> Result<EnsembleForecast> {
    config.validate()?;
    if !previous.same_layout(latest) {
        return Err(S2skError::shape("initial states differ in layout"));
    }
    if latest.valid_time != previous.valid_time + Days::new(1) {
        return Err(S2skError::invalid(format!(
            "initial states must be consecutive days, got {} and {}",
            previous.valid_time, latest.valid_time
        )));
    }
    let emb = components.embedding;
    let z_prev = emb.embed(previous)?.joint();
    let z_latest = emb.embed(latest)?.joint();
    let init_date = latest.valid_time;

    let run = |m: usize| -> Result<(MemberTrajectory, Array4<f32>)> {
        let traj = rollout_member((&z_prev, &z_latest), config, m, config.member_seed(m), components.denoiser, components.schedule)?;
        let (h, w) = (latest.grid.n_lat, latest.grid.n_lon);
        let mut out = Array4::<f32>::zeros((config.horizon_days, latest.channels.len(), h, w));
        for k in 0..config.horizon_days {
            let date = init_date + Days::new(k as u64 + 1);
            let fs = emb.decode_joint(traj.latents.index_axis(Axis(0), k), &latest.channels, date)?;
            out.index_axis_mut(Axis(0), k).assign(&fs.values.mapv(|v| v as f32));
        }
        Ok((traj, out))
    };
    let results: Vec<Result<(MemberTrajectory, Array4<f32>)>> =
        (0..config.n_members).into_par_iter().map(run).collect();

    let seeds = config.member_seeds();
    let mut members = Vec::with_capacity(config.n_members);
    let mut trajectories = Vec::with_capacity(config.n_members);
    let mut failures = Vec::new();
    for (m, r) in results.into_iter().enumerate() {
        match r {
            Ok((t, x)) => {
                members.push(Some(x));
                trajectories.push(Some(t));
            }
            Err(e) => {
                failures.push(MemberFailure {
                    member_id: m,
                    seed: seeds[m],
                    message: e.to_string(),
                });
                members.push(None);
                trajectories.push(None);
            }
        }
    }
    Ok(EnsembleForecast {
        members,
        seeds,
        failures,
        channels: latest.channels.clone(),
        grid: latest.grid,
        init_date,
        config: config.clone(),
        trajectories,
    })
}

/// Reference reverse-step operator for rollouts without trained weights.
///
/// The clean next latent is modeled per element as `N(mu, spread^2)` where
/// `mu` is a damped-persistence forecast
/// `anchor + persistence * (latest - anchor) + trend * (latest - previous)`
/// passed through the sphere-coupling block (context: both conditioning
/// latents). Each reverse step is the exact Gaussian bridge for that law.
#[derive(Debug, Clone)]
pub struct CoupledReferenceDenoiser {
    pub anchor: Array3<f64>,
    pub persistence: f64,
    pub trend: f64,
    pub spread: f64,
    /// Leading latent channels belonging to the atmosphere block.
    pub atmosphere_dim: usize,
    pub latent_grid: GridSpec,
    pub otb: OtbParams,
    pub schedule: NoiseSchedule,
}

impl CoupledReferenceDenoiser {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.anchor.dim();
        if (h, w) != (self.latent_grid.n_lat, self.latent_grid.n_lon) || self.atmosphere_dim == 0 || self.atmosphere_dim >= c {
            return Err(S2skError::shape("anchor does not match the latent layout"));
        }
        if !(self.spread > 0.0) {
            return Err(S2skError::invalid(format!("spread must be positive, got {}", self.spread)));
        }
        Ok(())
    }

    /// The coupling block applied to the persistence forecast for a window.
    pub fn couple(&self, cond: &Conditioning<'_>) -> Result<OtbOutput> {
        if cond.latest.dim() != self.anchor.dim() || cond.previous.dim() != self.anchor.dim() {
            return Err(S2skError::shape("conditioning latents do not match the anchor"));
        }
        let p = &self.anchor
            + &((cond.latest - &self.anchor) * self.persistence)
            + (cond.latest - cond.previous) * self.trend;
        let ca = self.atmosphere_dim;
        let a = |x: &Array3<f64>| x.slice(s![..ca, .., ..]).to_owned();
        let b = |x: &Array3<f64>| x.slice(s![ca.., .., ..]).to_owned();
        let (la, lb, pa, pb) = (a(cond.latest), b(cond.latest), a(cond.previous), b(cond.previous));
        otb_block(
            p.slice(s![..ca, .., ..]),
            p.slice(s![ca.., .., ..]),
            &[la.view(), pa.view()],
            &[lb.view(), pb.view()],
            &self.latent_grid,
            &self.otb,
        )
    }

    /// Per-element mean of the clean next latent.
    pub fn conditional_mean(&self, cond: &Conditioning<'_>) -> Result<Array3<f64>> {
        let out = self.couple(cond)?;
        Ok(ndarray::concatenate(Axis(0), &[out.a_out.view(), out.b_out.view()]).expect("shared grid"))
    }
}

fn bridge_step(
    schedule: &NoiseSchedule,
    mean: &Array3<f64>,
    spread: f64,
    noisy: &Array3<f64>,
    from: usize,
    to: usize,
    rng: &mut dyn RngCore,
) -> Result<Array3<f64>> {
    schedule.check_step(from)?;
    if noisy.dim() != mean.dim() {
        return Err(S2skError::shape("noisy latent does not match the conditioning"));
    }
    // The bridge offset is linear in mu, so one unit-mean evaluation serves every element.
    let (unit_offset, gain, var) = gaussian_bridge(schedule, from, to, 1.0, spread);
    let sd = var.sqrt();
    let mut out = ndarray::Zip::from(mean).and(noisy).map_collect(|&m, &z| unit_offset * m + gain * z);
    if sd > 0.0 {
        use rand::Rng;
        out.mapv_inplace(|v| v + sd * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(out)
}

struct BoundReference<'a> {
    parent: &'a CoupledReferenceDenoiser,
    mean: Array3<f64>,
}

impl Denoiser for BoundReference<'_> {
    fn step(&self, noisy: &Array3<f64>, from: usize, to: usize, _cond: &Conditioning<'_>, rng: &mut dyn RngCore) -> Result<Array3<f64>> {
        bridge_step(&self.parent.schedule, &self.mean, self.parent.spread, noisy, from, to, rng)
    }
}

impl Denoiser for CoupledReferenceDenoiser {
    fn step(&self, noisy: &Array3<f64>, from: usize, to: usize, cond: &Conditioning<'_>, rng: &mut dyn RngCore) -> Result<Array3<f64>> {
        let mean = self.conditional_mean(cond)?;
        bridge_step(&self.schedule, &mean, self.spread, noisy, from, to, rng)
    }

    fn bind<'s>(&'s self, cond: &Conditioning<'_>) -> Result<Option<Box<dyn Denoiser + 's>>> {
        Ok(Some(Box::new(BoundReference {
            parent: self,
            mean: self.conditional_mean(cond)?,
        })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingVariant;
    use crate::diffusion::analytic_gaussian_denoiser;
    use rand::Rng;

    struct Constant(Array3<f64>);
    impl Denoiser for Constant {
        fn step(&self, _: &Array3<f64>, _: usize, _: usize, _: &Conditioning<'_>, _: &mut dyn RngCore) -> Result<Array3<f64>> {
            Ok(self.0.clone())
        }
    }

    struct Counting(std::sync::atomic::AtomicUsize);
    impl Denoiser for Counting {
        fn step(&self, z: &Array3<f64>, _: usize, to: usize, _: &Conditioning<'_>, _: &mut dyn RngCore) -> Result<Array3<f64>> {
            if to == 0 {
                self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            }
            Ok(z.clone())
        }
    }

    struct Exploding;
    impl Denoiser for Exploding {
        fn step(&self, z: &Array3<f64>, _: usize, _: usize, cond: &Conditioning<'_>, _: &mut dyn RngCore) -> Result<Array3<f64>> {
            // Finite for the first two steps, then overflows.
            if cond.latest[[0, 0, 0]] > 1.0 {
                Ok(z.mapv(|_| f64::INFINITY))
            } else {
                Ok(z.mapv(|_| cond.latest[[0, 0, 0]] + 1.0))
            }
        }
    }

    fn init() -> (Array3<f64>, Array3<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let a = Array3::from_shape_simple_fn((3, 2, 4), || rng.sample(StandardNormal));
        let b = Array3::from_shape_simple_fn((3, 2, 4), || rng.sample(StandardNormal));
        (a, b)
    }

    fn cfg(h: usize, m: usize) -> RolloutConfig {
        RolloutConfig {
            horizon_days: h,
            n_members: m,
            n_infer: 15,
            master_seed: 42,
        }
    }

    #[test]
    fn horizon_one_is_one_sample() {
        let (a, b) = init();
        let sched = NoiseSchedule::linear_default();
        let counter = Counting(Default::default());
        let t = rollout_member((&a, &b), &cfg(1, 1), 0, cfg(1, 1).member_seed(0), &counter, &sched).unwrap();
        assert_eq!(counter.0.load(std::sync::atomic::Ordering::SeqCst), 1);
        assert_eq!(t.latents.dim().0, 1);

        let g = analytic_gaussian_denoiser(0.5, 1.5, &sched).unwrap();
        let t = rollout_member((&a, &b), &cfg(1, 1), 3, cfg(1, 1).member_seed(3), &g, &sched).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg(1, 1).member_seed(3));
        let cond = Conditioning { latest: &b, previous: &a };
        let direct = sample(&g, &sched, a.dim(), &cond, &mut rng, 15, 3, false).unwrap();
        assert_eq!(t.latents.index_axis(Axis(0), 0), direct.latent);
    }

    #[test]
    fn constant_denoiser_is_a_fixed_point() {
        let (a, b) = init();
        let clim = Array3::from_elem(a.dim(), 0.25);
        let t = rollout_member((&a, &b), &cfg(6, 1), 0, cfg(6, 1).member_seed(0), &Constant(clim.clone()), &NoiseSchedule::linear_default()).unwrap();
        for k in 0..6 {
            assert_eq!(t.latents.index_axis(Axis(0), k), clim);
        }
    }

    #[test]
    fn trajectories_are_seeded() {
        let (a, b) = init();
        let sched = NoiseSchedule::linear_default();
        let g = analytic_gaussian_denoiser(0.0, 1.0, &sched).unwrap();
        let x = rollout_member((&a, &b), &cfg(5, 1), 2, cfg(5, 1).member_seed(2), &g, &sched).unwrap();
        let y = rollout_member((&a, &b), &cfg(5, 1), 2, cfg(5, 1).member_seed(2), &g, &sched).unwrap();
        let z = rollout_member((&a, &b), &cfg(5, 1), 3, cfg(5, 1).member_seed(3), &g, &sched).unwrap();
        assert_eq!(x.latents, y.latents);
        assert_ne!(x.latents, z.latents);
        verify_sliding_window(&x, (&a, &b)).unwrap();
    }

    #[test]
    fn window_check_detects_tampering() {
        let (a, b) = init();
        let sched = NoiseSchedule::linear_default();
        let g = analytic_gaussian_denoiser(0.0, 1.0, &sched).unwrap();
        let mut t = rollout_member((&a, &b), &cfg(4, 1), 0, cfg(4, 1).member_seed(0), &g, &sched).unwrap();
        verify_sliding_window(&t, (&a, &b)).unwrap();
        t.trace[2].previous = WindowSlot::Prediction(2);
        assert!(verify_sliding_window(&t, (&a, &b)).is_err());
        let mut t = rollout_member((&a, &b), &cfg(4, 1), 0, cfg(4, 1).member_seed(0), &g, &sched).unwrap();
        t.latents[[1, 0, 0, 0]] += 1.0;
        assert!(verify_sliding_window(&t, (&a, &b)).is_err());
    }

    #[test]
    fn non_finite_latent_names_the_step() {
        let (mut a, mut b) = init();
        a.fill(0.0);
        b.fill(0.0);
        match rollout_member((&a, &b), &cfg(10, 1), 0, cfg(10, 1).member_seed(0), &Exploding, &NoiseSchedule::linear_default()) {
            Err(S2skError::NonFiniteLatent { step }) => assert_eq!(step, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 1).validate().is_err());
        assert!(cfg(181, 1).validate().is_err());
        assert!(cfg(180, 1).validate().is_ok());
        assert!(cfg(5, 0).validate().is_err());
    }

    fn reference(variant: CouplingVariant) -> CoupledReferenceDenoiser {
        let grid = GridSpec {
            n_lat: 2,
            n_lon: 4,
            lat_start_deg: 45.0,
            lat_step_deg: -90.0,
            lon_start_deg: 45.0,
            lon_step_deg: 90.0,
        };
        let mut otb = OtbParams::seeded(5, 2, 1, 2, 4, 0.3);
        otb.variant = variant;
        CoupledReferenceDenoiser {
            anchor: Array3::from_elem((3, 2, 4), 0.1),
            persistence: 0.8,
            trend: 0.1,
            spread: 0.5,
            atmosphere_dim: 2,
            latent_grid: grid,
            otb,
            schedule: NoiseSchedule::linear_default(),
        }
    }

    #[test]
    fn bound_reference_matches_unbound() {
        let (a, b) = init();
        let d = reference(CouplingVariant::OptimalTransport);
        d.validate().unwrap();
        let cond = Conditioning { latest: &b, previous: &a };
        let bound = d.bind(&cond).unwrap().unwrap();
        let z = Array3::from_elem(a.dim(), 0.3);
        let mut r1 = ChaCha20Rng::seed_from_u64(1);
        let mut r2 = ChaCha20Rng::seed_from_u64(1);
        let x = d.step(&z, 500, 400, &cond, &mut r1).unwrap();
        let y = bound.step(&z, 500, 400, &cond, &mut r2).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn reference_final_step_returns_coupled_mean() {
        let (a, b) = init();
        let cond = Conditioning { latest: &b, previous: &a };
        let d = reference(CouplingVariant::None);
        let mean = d.conditional_mean(&cond).unwrap();
        let expect = &d.anchor + &((&b - &d.anchor) * 0.8) + (&b - &a) * 0.1;
        assert!((&mean - &expect).iter().all(|v| v.abs() < 1e-12));
        // Reverse step to 0 under the bridge has zero variance only if spread -> 0;
        // with spread > 0 the sample mean over many draws approaches `mean`.
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let z = Array3::zeros(a.dim());
        let n = 4000;
        let mut acc = Array3::<f64>::zeros(a.dim());
        let (off, gain, _) = gaussian_bridge(&d.schedule, 1, 0, 1.0, d.spread);
        for _ in 0..n {
            acc += &d.step(&z, 1, 0, &cond, &mut rng).unwrap();
        }
        acc /= n as f64;
        let target = mean.mapv(|m| off * m) + z.mapv(|v| gain * v);
        assert!((&acc - &target).iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn coupling_variants_change_the_mean() {
        let (a, b) = init();
        let cond = Conditioning { latest: &b, previous: &a };
        let ot = reference(CouplingVariant::OptimalTransport).conditional_mean(&cond).unwrap();
        let xa = reference(CouplingVariant::CrossAttention).conditional_mean(&cond).unwrap();
        let none = reference(CouplingVariant::None).conditional_mean(&cond).unwrap();
        assert_ne!(ot, none);
        assert_ne!(xa, none);
        assert_ne!(ot, xa);
    }
}
