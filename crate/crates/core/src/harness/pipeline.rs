//! Reference model assembly: coders and codebooks fitted on a training
//! series, plus the damped-persistence coupled denoiser.

use chrono::Days;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attribution::EnsembleRunner;
use crate::coupling::{CouplingVariant, Marginals, OtbParams, SinkhornConfig};
use crate::diffusion::{NoiseSchedule, ScheduleKind, DEFAULT_INFERENCE_STEPS, DEFAULT_STEPS};
use crate::error::{Result, S2skError};
use crate::grid::{Block, Channel, FieldSet, GridSpec};
use crate::rollout::{rollout_ensemble, rollout_member, CoupledReferenceDenoiser, EnsembleForecast, RolloutComponents, RolloutConfig};
use crate::stats::derive_seed;
use crate::vq::{Codebook, Embedding, ReferenceCoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub atmosphere_dim: usize,
    pub boundary_dim: usize,
    pub codebook_size: usize,
    pub feature_dim: usize,
    pub coupling_gain: f64,
    pub variant: CouplingVariant,
    pub marginals: Marginals,
    pub sinkhorn: SinkhornConfig,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub n_infer: usize,
    /// Lower bound on the fitted per-element spread.
    pub min_spread: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 31 x 60 grid, 6 x 6 patches -> 5 x 10 latent.
    pub fn desk(seed: u64) -> Self {
        ModelConfig {
            patch: 6,
            atmosphere_dim: crate::vq::DEFAULT_ATMOSPHERE_DIM,
            boundary_dim: crate::vq::DEFAULT_BOUNDARY_DIM,
            codebook_size: crate::vq::DEFAULT_CODEBOOK_SIZE,
            feature_dim: 8,
            coupling_gain: 0.2,
            variant: CouplingVariant::OptimalTransport,
            marginals: Marginals::Uniform,
            sinkhorn: SinkhornConfig::default(),
            diffusion_steps: DEFAULT_STEPS,
            schedule: ScheduleKind::default(),
            n_infer: DEFAULT_INFERENCE_STEPS,
            min_spread: 1e-3,
            seed,
        }
    }

    /// 121 x 240 grid, 4 x 4 patches -> 30 x 60 latent.
    pub fn full(seed: u64) -> Self {
        ModelConfig {
            patch: 4,
            ..ModelConfig::desk(seed)
        }
    }

    /// Desk defaults with the largest patch in 6..=1 that tiles `grid`
    /// (4 on the full grid).
    pub fn for_grid(grid: &GridSpec, seed: u64) -> Result<Self> {
        if *grid == GridSpec::full() {
            return Ok(ModelConfig::full(seed));
        }
        let rows = |p: usize| if grid.n_lat % p == 1 && grid.n_lat > 1 { grid.n_lat - 1 } else { grid.n_lat };
        let patch = (1..=6)
            .rev()
            .find(|&p| rows(p) % p == 0 && grid.n_lon.is_multiple_of(p))
            .ok_or_else(|| S2skError::invalid("no patch size tiles the grid"))?;
        Ok(ModelConfig {
            patch,
            ..ModelConfig::desk(seed)
        })
    }
}

/// Fitted damped-persistence statistics of the latent series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistenceFit {
    pub persistence: f64,
    pub trend: f64,
    pub spread: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct ReferenceModel {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub denoiser: CoupledReferenceDenoiser,
    pub layout: Vec<Channel>,
    pub grid: GridSpec,
    pub fit: PersistenceFit,
}

/// Least squares for `y = rho * x1 + kappa * x2` over all latent elements of
/// consecutive-day triples.
fn fit_persistence(latents: &[(chrono::NaiveDate, Array3<f64>)], anchor: &Array3<f64>, min_spread: f64) -> Result<PersistenceFit> {
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut triples = Vec::new();
    for t in 2..latents.len() {
        let (d0, d1, d2) = (latents[t - 2].0, latents[t - 1].0, latents[t].0);
        if d1 != d0 + Days::new(1) || d2 != d1 + Days::new(1) {
            continue;
        }
        triples.push(t);
        let (prev, latest, next) = (&latents[t - 2].1, &latents[t - 1].1, &latents[t].1);
        ndarray::Zip::from(prev).and(latest).and(next).and(anchor).for_each(|&p, &l, &n, &a| {
            let (x1, x2, y) = (l - a, l - p, n - a);
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            s1y += x1 * y;
            s2y += x2 * y;
            syy += y * y;
        });
    }
    if triples.is_empty() {
        return Err(S2skError::invalid("training series has no three consecutive days"));
    }
    let det = s11 * s22 - s12 * s12;
    let (rho, kappa) = if det.abs() > 1e-12 * (s11 * s22).max(1e-300) {
        ((s1y * s22 - s2y * s12) / det, (s2y * s11 - s1y * s12) / det)
    } else if s11 > 0.0 {
        (s1y / s11, 0.0)
    } else {
        (1.0, 0.0)
    };
    let n = (triples.len() * anchor.len()) as f64;
    // Residual sum of squares of the normal-equation solution.
    let rss = syy - 2.0 * (rho * s1y + kappa * s2y) + rho * rho * s11 + 2.0 * rho * kappa * s12 + kappa * kappa * s22;
    let spread = (rss.max(0.0) / n).sqrt().max(min_spread);
    Ok(PersistenceFit {
        persistence: rho,
        trend: kappa,
        spread,
        n_pairs: triples.len(),
    })
}

/// Fits coder normalization, codebooks, latent anchor and persistence
/// statistics on `train`. Everything else is seeded from `config.seed`.
pub fn fit_reference_model(train: &[FieldSet], config: &ModelConfig) -> Result<ReferenceModel> {
    let first = train
        .first()
        .ok_or_else(|| S2skError::invalid("empty training series"))?;
    if train.iter().any(|x| !x.same_layout(first)) {
        return Err(S2skError::shape("training states differ in layout"));
    }
    let grid = first.grid;
    let layout = first.channels.clone();
    let seed = config.seed;
    let a_channels = first.block(Block::Atmosphere).channels;
    let b_channels = first.block(Block::Boundary).channels;
    if a_channels.is_empty() || b_channels.is_empty() {
        return Err(S2skError::invalid("layout needs both atmospheric and boundary channels"));
    }
    let mut coder_a = ReferenceCoder::new(derive_seed(seed, 1), a_channels, grid, config.atmosphere_dim, config.patch)?;
    let mut coder_b = ReferenceCoder::new(derive_seed(seed, 2), b_channels, grid, config.boundary_dim, config.patch)?;
    coder_a.fit_normalization(train)?;
    coder_b.fit_normalization(train)?;

    let mut feat_a = Vec::with_capacity(train.len());
    let mut feat_b = Vec::with_capacity(train.len());
    for x in train {
        feat_a.push(coder_a.encode(&x.block(Block::Atmosphere))?);
        feat_b.push(coder_b.encode(&x.block(Block::Boundary))?);
    }
    let book_a = Codebook::from_features(&feat_a, config.codebook_size, derive_seed(seed, 3), Block::Atmosphere)?;
    let book_b = Codebook::from_features(&feat_b, config.codebook_size, derive_seed(seed, 4), Block::Boundary)?;
    drop((feat_a, feat_b));
    let embedding = Embedding {
        coder_a,
        coder_b,
        book_a: book_a.into(),
        book_b: book_b.into(),
    };

    let latents: Vec<(chrono::NaiveDate, Array3<f64>)> = train
        .iter()
        .map(|x| Ok((x.valid_time, embedding.embed(x)?.joint())))
        .collect::<Result<_>>()?;
    let stacked: Vec<_> = latents.iter().map(|(_, z)| z.view()).collect();
    let anchor = ndarray::stack(Axis(0), &stacked)
        .expect("latents share a shape")
        .mean_axis(Axis(0))
        .expect("non-empty");
    let fit = fit_persistence(&latents, &anchor, config.min_spread)?;

    let mut otb = OtbParams::seeded(
        derive_seed(seed, 5),
        config.atmosphere_dim,
        config.boundary_dim,
        2,
        config.feature_dim,
        config.coupling_gain,
    );
    otb.variant = config.variant;
    otb.marginals = config.marginals.clone();
    otb.sinkhorn = config.sinkhorn;
    let denoiser = CoupledReferenceDenoiser {
        anchor,
        persistence: fit.persistence,
        trend: fit.trend,
        spread: fit.spread,
        atmosphere_dim: config.atmosphere_dim,
        latent_grid: embedding.coder_a.latent_grid(),
        otb,
        schedule: NoiseSchedule::new(config.diffusion_steps, config.schedule)?,
    };
    denoiser.validate()?;
    Ok(ReferenceModel {
        config: config.clone(),
        embedding,
        denoiser,
        layout,
        grid,
        fit,
    })
}

impl ReferenceModel {
    pub fn with_variant(&self, variant: CouplingVariant) -> ReferenceModel {
        let mut m = self.clone();
        m.config.variant = variant;
        m.denoiser.otb.variant = variant;
        m
    }

    pub fn rollout(&self, previous: &FieldSet, latest: &FieldSet, config: &RolloutConfig) -> Result<EnsembleForecast> {
        let components = RolloutComponents {
            embedding: &self.embedding,
            denoiser: &self.denoiser,
            schedule: &self.denoiser.schedule,
        };
        rollout_ensemble(previous, latest, config, &components)
    }

    /// Member runner over `horizon_days` for attribution.
    pub fn runner(&self, horizon_days: usize) -> ModelRunner<'_> {
        ModelRunner {
            model: self,
            horizon_days,
        }
    }
}

/// Members decoded only at chosen leads and channels.
#[derive(Debug, Clone)]
pub struct SelectedForecast {
    /// `[member, lead, channel, lat, lon]`; failed members are absent.
    pub values: ndarray::Array5<f32>,
    pub member_ids: Vec<usize>,
    pub seeds: Vec<u64>,
    pub failures: Vec<crate::rollout::MemberFailure>,
    pub leads: Vec<usize>,
    pub channels: Vec<Channel>,
    pub init_date: chrono::NaiveDate,
}

impl SelectedForecast {
    pub fn valid_dates(&self) -> Vec<chrono::NaiveDate> {
        self.leads.iter().map(|&l| self.init_date + Days::new(l as u64)).collect()
    }
}

impl ReferenceModel {
    /// Rolls every member forward in latent space and decodes only `leads`
    /// (1-based) and the channels at `channel_idx`. Memory stays at one
    /// member's latent trajectory plus the selected output.
    pub fn rollout_selected(
        &self,
        previous: &FieldSet,
        latest: &FieldSet,
        config: &RolloutConfig,
        leads: &[usize],
        channel_idx: &[usize],
    ) -> Result<SelectedForecast> {
        use rayon::prelude::*;
        config.validate()?;
        if latest.valid_time != previous.valid_time + Days::new(1) {
            return Err(S2skError::invalid("initial states must be consecutive days"));
        }
        if leads.is_empty() || leads.iter().any(|&l| l == 0 || l > config.horizon_days) {
            return Err(S2skError::invalid(format!("leads must lie in 1..={}", config.horizon_days)));
        }
        if channel_idx.is_empty() || channel_idx.iter().any(|&c| c >= latest.channels.len()) {
            return Err(S2skError::invalid("channel selection is empty or out of range"));
        }
        let zp = self.embedding.embed(previous)?.joint();
        let zl = self.embedding.embed(latest)?.joint();
        let (h, w) = (latest.grid.n_lat, latest.grid.n_lon);
        let run = |m: usize| -> Result<ndarray::Array4<f32>> {
            let traj = rollout_member((&zp, &zl), config, m, config.member_seed(m), &self.denoiser, &self.denoiser.schedule)?;
            let mut out = ndarray::Array4::<f32>::zeros((leads.len(), channel_idx.len(), h, w));
            for (k, &lead) in leads.iter().enumerate() {
                let date = latest.valid_time + Days::new(lead as u64);
                let fs = self.embedding.decode_joint(traj.latents.index_axis(Axis(0), lead - 1), &latest.channels, date)?;
                for (q, &c) in channel_idx.iter().enumerate() {
                    out.slice_mut(ndarray::s![k, q, .., ..])
                        .assign(&fs.values.index_axis(Axis(0), c).mapv(|v| v as f32));
                }
            }
            Ok(out)
        };
        let results: Vec<Result<ndarray::Array4<f32>>> = (0..config.n_members).into_par_iter().map(run).collect();
        let seeds = config.member_seeds();
        let mut ok = Vec::new();
        let mut member_ids = Vec::new();
        let mut failures = Vec::new();
        for (m, r) in results.into_iter().enumerate() {
            match r {
                Ok(x) => {
                    ok.push(x);
                    member_ids.push(m);
                }
                Err(e) => failures.push(crate::rollout::MemberFailure {
                    member_id: m,
                    seed: seeds[m],
                    message: e.to_string(),
                }),
            }
        }
        let views: Vec<_> = ok.iter().map(|x| x.view()).collect();
        let values = if views.is_empty() {
            ndarray::Array5::zeros((0, leads.len(), channel_idx.len(), h, w))
        } else {
            ndarray::stack(Axis(0), &views).expect("members share a shape")
        };
        Ok(SelectedForecast {
            values,
            seeds: member_ids.iter().map(|&m| seeds[m]).collect(),
            member_ids,
            failures,
            leads: leads.to_vec(),
            channels: channel_idx.iter().map(|&c| latest.channels[c].clone()).collect(),
            init_date: latest.valid_time,
        })
    }
}

pub struct ModelRunner<'a> {
    pub model: &'a ReferenceModel,
    pub horizon_days: usize,
}

impl EnsembleRunner for ModelRunner<'_> {
    fn run_member(&self, previous: &FieldSet, latest: &FieldSet, member_id: usize, seed: u64) -> Result<Vec<FieldSet>> {
        let m = self.model;
        let cfg = RolloutConfig {
            horizon_days: self.horizon_days,
            n_members: member_id + 1,
            n_infer: m.config.n_infer,
            master_seed: 0,
        };
        let zp = m.embedding.embed(previous)?.joint();
        let zl = m.embedding.embed(latest)?.joint();
        let traj = rollout_member((&zp, &zl), &cfg, member_id, seed, &m.denoiser, &m.denoiser.schedule)?;
        (0..self.horizon_days)
            .map(|k| {
                let date = latest.valid_time + Days::new(k as u64 + 1);
                m.embedding.decode_joint(traj.latents.index_axis(Axis(0), k), &latest.channels, date)
            })
            .collect()
    }
}
