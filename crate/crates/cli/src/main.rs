use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array2, ArrayView2, Axis, Ix4, Ix5};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use s2sk_core::attribution::{default_groups, pim, EnsembleRunner, PimReport, ShuffleScheme};
use s2sk_core::coupling::{sinkhorn, wmid, CouplingVariant, SinkhornConfig};
use s2sk_core::diffusion::Conditioning;
use s2sk_core::grid::{build_climatology, calendar_slot, Climatology, FieldSet, GridSpec, RegionBox};
use s2sk_core::harness::conventions::Conventions;
use s2sk_core::harness::inventory::{channels_from_meta, ChannelMeta};
use s2sk_core::harness::pipeline::{fit_reference_model, ModelConfig, ReferenceModel};
use s2sk_core::harness::synth::{generate_synthetic, LaggedResponseRunner, SynthConfig};
use s2sk_core::harness::tensor::{read_series, read_tensor, write_series, write_tensor, TensorData, TensorMeta};
use s2sk_core::rollout::{RolloutConfig, DEFAULT_HORIZON_DAYS, DEFAULT_MEMBERS, SEED_SCHEME};
use s2sk_core::verify::{
    acc, bss, channel_weights, crps_field, percentile_thresholds, read_metric_report, ssr, write_metric_report, wrmse,
    CrpsEstimator, MetricRecord, ScoreTable, Scorecard, VerifyConventions, QUANTILE_RULE,
};
use s2sk_core::S2skError;

/// Synthetic multi-sphere ensemble forecasting pipelines.
#[derive(Parser, Debug)]
#[command(name = "s2sk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with optional `synth`, `model` and `verify` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scale {
    Desk,
    Full,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum RunnerKind {
    /// Reference model fitted on the training days.
    Model,
    /// Known lagged response of the generator's first coupling.
    Lagged,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Source {
    /// Daily series written by `synth`.
    #[arg(long)]
    input: PathBuf,
    /// Leading days used for fitting (default: everything up to the initialization).
    #[arg(long)]
    train_days: Option<usize>,
    /// Index of the latest initial state; the day before is the previous state.
    #[arg(long)]
    init_index: usize,
    /// Coupling operator: optimal_transport (ot), cross_attention (xattn) or none.
    #[arg(long)]
    coupling: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic daily series.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 365)]
        days: usize,
        #[arg(long, value_enum, default_value_t = Scale::Desk)]
        scale: Scale,
    },
    /// Per-calendar-day climatology of a series.
    Climatology {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 15)]
        halfwidth: usize,
    },
    /// Ensemble rollout with the reference model.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = DEFAULT_HORIZON_DAYS)]
        horizon: usize,
        #[arg(long, default_value_t = DEFAULT_MEMBERS)]
        members: usize,
        #[arg(long)]
        n_infer: Option<usize>,
        /// Comma-separated lead days to store (default: all).
        #[arg(long, value_delimiter = ',')]
        leads: Vec<usize>,
        /// Comma-separated channel names to store (default: all).
        #[arg(long, value_delimiter = ',')]
        variables: Vec<String>,
    },
    /// CRPS, RMSE, ACC and SSR of a forecast against a truth series.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Rollout output directory, or a single tensor file.
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Climatology for ACC (default: built from the truth series).
        #[arg(long)]
        climatology: Option<PathBuf>,
        #[arg(long)]
        fair_crps: bool,
    },
    /// Brier skill score of percentile exceedance.
    Extremes {
        #[command(flatten)]
        common: Common,
        /// Rollout output directory, or a single tensor file.
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Series providing the threshold sample pool.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 95.0)]
        percentile: f64,
        #[arg(long, default_value_t = 15)]
        halfwidth: usize,
    },
    /// Permutation importance of predictor groups.
    Pim {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 28)]
        horizon: usize,
        #[arg(long, default_value_t = 8)]
        members: usize,
        #[arg(long, value_delimiter = ',', default_value = "T2M")]
        target: Vec<String>,
        #[arg(long, value_enum, default_value_t = RunnerKind::Model)]
        runner: RunnerKind,
        /// One permutation over the whole group instead of one per channel.
        #[arg(long)]
        joint_shuffle: bool,
    },
    /// Entropic transport plan for a cost matrix with uniform marginals.
    Sinkhorn {
        #[command(flatten)]
        common: Common,
        /// Headerless CSV cost matrix; seeded uniform costs in [0, 2] when absent.
        #[arg(long)]
        cost: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        rows: usize,
        #[arg(long, default_value_t = 5)]
        cols: usize,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Influence distance of the boundary-to-atmosphere plan over a region.
    Wmid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// lat_min,lat_max,lon_min,lon_max in degrees.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [20.0, 50.0, 100.0, 145.0])]
        region: Vec<f64>,
        #[arg(long, default_value_t = 90.0)]
        percentile: f64,
    },
    /// Relative-improvement scorecard of two metric reports.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value = "crps")]
        metric: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Climatology { common, .. }
            | Command::Rollout { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Extremes { common, .. }
            | Command::Pim { common, .. }
            | Command::Sinkhorn { common, .. }
            | Command::Wmid { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Climatology { .. } => "climatology",
            Command::Rollout { .. } => "rollout",
            Command::Evaluate { .. } => "evaluate",
            Command::Extremes { .. } => "extremes",
            Command::Pim { .. } => "pim",
            Command::Sinkhorn { .. } => "sinkhorn",
            Command::Wmid { .. } => "wmid",
            Command::Report { .. } => "report",
        }
    }
}

/// Sections of `--config`; a section that is present replaces the default wholesale.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    synth: Option<SynthConfig>,
    model: Option<ModelConfig>,
    verify: Option<VerifyConventions>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(p) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))
}

struct Run {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    config: serde_json::Map<String, Value>,
    outputs: Vec<String>,
    results: serde_json::Map<String, Value>,
    conventions: Conventions,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn set(&mut self, key: &str, v: impl Serialize) -> Result<()> {
        self.config.insert(key.into(), serde_json::to_value(v)?);
        Ok(())
    }

    fn note(&mut self, key: &str, v: impl Serialize) -> Result<()> {
        self.results.insert(key.into(), serde_json::to_value(v)?);
        Ok(())
    }

    fn write_manifest(&self, threads: usize) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "argv": std::env::args().collect::<Vec<_>>(),
            "seed": self.seed,
            "threads": threads,
            "config": self.config,
            "conventions": self.conventions,
            "outputs": self.outputs,
            "results": self.results,
        });
        std::fs::write(self.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(S2skError::InvalidArgument(msg.into()))
}

/// Fits the reference model on the training prefix of `src.input`.
fn fit_from_source(run: &mut Run, file: &FileConfig, src: &Source) -> Result<(ReferenceModel, Vec<FieldSet>)> {
    let series = read_series(&src.input)?;
    let i = src.init_index;
    if i == 0 || i >= series.len() {
        bail!(invalid(format!("init index {i} must lie in 1..{}", series.len())));
    }
    let train = src.train_days.unwrap_or(i + 1);
    if train < 3 || train > series.len() {
        bail!(invalid(format!("train days {train} must lie in 3..={}", series.len())));
    }
    let mut cfg = match &file.model {
        Some(m) => m.clone(),
        None => ModelConfig::for_grid(&series[0].grid, run.seed)?,
    };
    if let Some(c) = &src.coupling {
        cfg.variant = c.parse::<CouplingVariant>()?;
    }
    run.set("model", &cfg)?;
    run.set("source", src)?;
    run.conventions = Conventions::new(
        &cfg,
        &run.conventions.verify,
        run.conventions.attribution.shuffle_scheme,
        run.conventions.grid.climatology_window_halfwidth_days,
    );
    let model = fit_reference_model(&series[..train], &cfg)?;
    run.note("persistence_fit", model.fit)?;
    Ok((model, series))
}

fn channel_indices(channels: &[ChannelMeta], names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..channels.len()).collect());
    }
    names
        .iter()
        .map(|n| {
            channels
                .iter()
                .position(|c| &c.name == n)
                .ok_or_else(|| invalid(format!("unknown variable {n}")))
        })
        .collect()
}

/// `[member, lead, channel, lat, lon]` with lead days and valid dates.
struct Forecast {
    values: ndarray::Array5<f64>,
    leads: Vec<usize>,
    dates: Vec<NaiveDate>,
    channels: Vec<ChannelMeta>,
    grid: GridSpec,
}

fn read_forecast_file(path: &Path) -> Result<Forecast> {
    let (data, meta) = read_tensor(path)?;
    let format = |message: String| {
        anyhow!(S2skError::Format {
            path: path.into(),
            message
        })
    };
    let grid = meta.grid.ok_or_else(|| format("sidecar has no grid".into()))?;
    let arr = data.to_f64();
    let values = match arr.ndim() {
        // A member file or a plain series: one member valid on its own dates.
        4 => arr.into_dimensionality::<Ix4>()?.insert_axis(Axis(0)),
        5 => arr.into_dimensionality::<Ix5>()?,
        r => bail!(format(format!("forecast must have rank 4 or 5, got {r}"))),
    };
    let n_leads = values.dim().1;
    let leads: Vec<usize> = match meta.conventions.get("leads") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => (1..=n_leads).collect(),
    };
    if leads.len() != n_leads || meta.dates.len() != n_leads {
        bail!(format("lead and date lists do not match the lead axis".into()));
    }
    Ok(Forecast {
        values,
        leads,
        dates: meta.dates,
        channels: meta.channels,
        grid,
    })
}

/// A tensor file, or a rollout directory whose `member_*.s2sk` files are stacked.
fn read_forecast(path: &Path) -> Result<Forecast> {
    if !path.is_dir() {
        return read_forecast_file(path);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|f| {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        name.starts_with("member_") && name.ends_with(".s2sk")
    });
    files.sort();
    let Some((first, rest)) = files.split_first() else {
        bail!(invalid(format!("{} holds no member_*.s2sk files", path.display())));
    };
    let mut fc = read_forecast_file(first)?;
    let mut members = vec![fc.values.clone()];
    for f in rest {
        let m = read_forecast_file(f)?;
        if m.leads != fc.leads || m.dates != fc.dates || m.channels != fc.channels || m.grid != fc.grid {
            bail!(S2skError::Format {
                path: f.clone(),
                message: "member layout differs from the first member".into(),
            });
        }
        members.push(m.values);
    }
    let views: Vec<_> = members.iter().map(|m| m.view()).collect();
    fc.values = ndarray::concatenate(Axis(0), &views)?;
    Ok(fc)
}

fn read_climatology(path: &Path) -> Result<Climatology> {
    let (data, meta) = read_tensor(path)?;
    let grid = meta.grid.ok_or_else(|| anyhow!("{}: sidecar has no grid", path.display()))?;
    let channels = channels_from_meta(&meta.channels, &grid)?;
    Ok(Climatology {
        grid,
        channels,
        means: data.to_f64().into_dimensionality::<Ix4>()?,
        reference_period: serde_json::from_value(meta.conventions["reference_period"].clone())?,
        window_halfwidth_days: serde_json::from_value(meta.conventions["window_halfwidth_days"].clone())?,
    })
}

fn truth_by_date(series: &[FieldSet], date: NaiveDate) -> Result<&FieldSet> {
    series
        .iter()
        .find(|s| s.valid_time == date)
        .ok_or_else(|| invalid(format!("truth series has no state for {date}")))
}

fn truth_channel(x: &FieldSet, name: &str) -> Result<usize> {
    x.channel_index(name).ok_or_else(|| invalid(format!("series lacks channel {name}")))
}

fn execute(cmd: Command, run: &mut Run, file: &FileConfig) -> Result<()> {
    std::fs::create_dir_all(&run.out)?;
    match cmd {
        Command::Synth { days, scale, .. } => {
            let cfg = match (&file.synth, scale) {
                (Some(c), _) => c.clone(),
                (None, Scale::Desk) => SynthConfig::desk(run.seed),
                (None, Scale::Full) => SynthConfig::full(run.seed),
            };
            run.set("synth", &cfg)?;
            run.set("days", days)?;
            let series = generate_synthetic(&cfg, days)?;
            let path = run.path("fields.s2sk");
            write_series(&path, &series, json!({ "synth": cfg }))?;
        }
        Command::Climatology { input, halfwidth, .. } => {
            let series = read_series(&input)?;
            run.set("input", &input)?;
            run.set("halfwidth", halfwidth)?;
            run.conventions.grid.climatology_window_halfwidth_days = halfwidth;
            let clim = build_climatology(&series, halfwidth)?;
            let meta = TensorMeta {
                grid: Some(clim.grid),
                channels: clim.channels.iter().map(ChannelMeta::from).collect(),
                channel_axis: Some(1),
                dates: Vec::new(),
                conventions: json!({
                    "reference_period": clim.reference_period,
                    "window_halfwidth_days": clim.window_halfwidth_days,
                    "calendar": run.conventions.grid.calendar,
                    "axes": ["calendar_slot", "channel", "lat", "lon"],
                }),
            };
            let path = run.path("climatology.s2sk");
            write_tensor(&path, &TensorData::F64(clim.means.into_dyn()), &meta)?;
        }
        Command::Rollout {
            source,
            horizon,
            members,
            n_infer,
            leads,
            variables,
            ..
        } => {
            let mut rc = RolloutConfig {
                horizon_days: horizon,
                n_members: members,
                n_infer: n_infer.unwrap_or(s2sk_core::diffusion::DEFAULT_INFERENCE_STEPS),
                master_seed: run.seed,
            };
            rc.validate()?;
            let (model, series) = fit_from_source(run, file, &source)?;
            rc.n_infer = n_infer.unwrap_or(model.config.n_infer);
            let leads = if leads.is_empty() { (1..=horizon).collect() } else { leads };
            let metas: Vec<ChannelMeta> = model.layout.iter().map(ChannelMeta::from).collect();
            let idx = channel_indices(&metas, &variables)?;
            let i = source.init_index;
            let fc = model.rollout_selected(&series[i - 1], &series[i], &rc, &leads, &idx)?;
            run.set("rollout", &rc)?;
            run.note("horizon_days", horizon)?;
            run.note("n_members", members)?;
            run.note("member_seeds", rc.member_seeds())?;
            run.note("seed_scheme", SEED_SCHEME)?;
            run.note("init_date", fc.init_date)?;
            let failures: Vec<Value> = fc
                .failures
                .iter()
                .map(|f| json!({ "member_id": f.member_id, "seed": f.seed, "message": f.message }))
                .collect();
            run.note("failures", failures)?;
            let channels: Vec<ChannelMeta> = fc.channels.iter().map(ChannelMeta::from).collect();
            let dates = fc.valid_dates();
            for (k, (&id, &seed)) in fc.member_ids.iter().zip(&fc.seeds).enumerate() {
                let meta = TensorMeta {
                    grid: Some(model.grid),
                    channels: channels.clone(),
                    channel_axis: Some(1),
                    dates: dates.clone(),
                    conventions: json!({
                        "leads": fc.leads,
                        "member_id": id,
                        "member_seed": seed,
                        "init_date": fc.init_date,
                        "axes": ["lead", "channel", "lat", "lon"],
                    }),
                };
                let path = run.path(&format!("member_{id:03}.s2sk"));
                write_tensor(&path, &TensorData::F32(fc.values.index_axis(Axis(0), k).to_owned().into_dyn()), &meta)?;
            }
        }
        Command::Evaluate {
            forecast,
            truth,
            climatology,
            fair_crps,
            ..
        } => {
            let fc = read_forecast(&forecast)?;
            let truth = read_series(&truth)?;
            let clim = match &climatology {
                Some(p) => Some(read_climatology(p)?),
                None => build_climatology(&truth, run.conventions.grid.climatology_window_halfwidth_days).ok(),
            };
            let mut conv = file.verify.clone().unwrap_or_default();
            if fair_crps {
                conv.crps_estimator = CrpsEstimator::Fair;
            }
            run.conventions.verify = conv.clone();
            run.set("verify", &conv)?;
            run.note("acc_available", clim.is_some())?;
            let records = evaluate(&fc, &truth, clim.as_ref(), &conv)?;
            let path = run.path("metrics.csv");
            write_metric_report(&path, &records, &json!({ "conventions": conv, "leads": fc.leads, "dates": fc.dates }))?;
        }
        Command::Extremes {
            forecast,
            truth,
            samples,
            percentile,
            halfwidth,
            ..
        } => {
            let fc = read_forecast(&forecast)?;
            let truth = read_series(&truth)?;
            let pool = read_series(&samples)?;
            run.set("percentile", percentile)?;
            run.set("halfwidth", halfwidth)?;
            let mut slots: Vec<usize> = fc.dates.iter().map(|&d| calendar_slot(d)).collect();
            slots.sort_unstable();
            slots.dedup();
            let thr = percentile_thresholds(&pool, percentile, halfwidth, Some(&slots))?;
            run.note("low_confidence_slots", &thr.low_confidence)?;
            let layout = channels_from_meta(&fc.channels, &fc.grid)?;
            let weights = channel_weights(&fc.grid, &layout)?;
            let mut records = Vec::new();
            for (c, ch) in fc.channels.iter().enumerate() {
                let tc = truth_channel(&truth[0], &ch.name)?;
                let pc = truth_channel(&pool[0], &ch.name)?;
                let (mut ens, mut obs, mut qs) = (Vec::new(), Vec::new(), Vec::new());
                for (k, (&lead, &date)) in fc.leads.iter().zip(&fc.dates).enumerate() {
                    let t = truth_by_date(&truth, date)?;
                    ens.push(fc.values.slice(s![.., k, c, .., ..]));
                    obs.push(t.values.index_axis(Axis(0), tc));
                    qs.push(thr.for_date(date)?.index_axis(Axis(0), pc).to_owned());
                    let r = bss(&ens[k..], &obs[k..], &[qs[k].view()], percentile, &weights[c])?;
                    records.push(MetricRecord {
                        variable: ch.name.clone(),
                        lead_day: lead,
                        metric: "bss".into(),
                        value: r.bss,
                    });
                }
                // Single-time Brier scores are dominated by rare points; pool all leads as times.
                let qv: Vec<_> = qs.iter().map(|q| q.view()).collect();
                records.push(MetricRecord {
                    variable: ch.name.clone(),
                    lead_day: 0,
                    metric: "bss_all_leads".into(),
                    value: bss(&ens, &obs, &qv, percentile, &weights[c])?.bss,
                });
            }
            let path = run.path("extremes.csv");
            write_metric_report(&path, &records, &json!({ "percentile": percentile, "quantile_rule": QUANTILE_RULE }))?;
        }
        Command::Pim {
            source,
            horizon,
            members,
            target,
            runner,
            joint_shuffle,
            ..
        } => {
            let scheme = if joint_shuffle { ShuffleScheme::Joint } else { ShuffleScheme::Spatial };
            run.conventions.attribution.shuffle_scheme = scheme;
            run.set("runner", runner)?;
            run.set("members", members)?;
            run.set("horizon", horizon)?;
            run.set("target", &target)?;
            let report = match runner {
                RunnerKind::Model => {
                    let (model, series) = fit_from_source(run, file, &source)?;
                    run_pim(&model.runner(horizon), &series, source.init_index, horizon, members, &target, run.seed, scheme)?
                }
                RunnerKind::Lagged => {
                    let (_, meta) = read_tensor(&source.input)?;
                    let cfg: SynthConfig = serde_json::from_value(meta.conventions["synth"].clone())
                        .map_err(|_| invalid("the lagged runner needs a series written by `synth`"))?;
                    let series = read_series(&source.input)?;
                    let i = source.init_index;
                    // The lagged runner is an oracle of the generator, so it sees the whole series' climatology.
                    let clim = build_climatology(&series, run.conventions.grid.climatology_window_halfwidth_days)?;
                    let lagged = LaggedResponseRunner::from_config(&cfg, clim, 0, horizon)?;
                    run.set("source", &source)?;
                    run.set("lagged_coupling", &cfg.couplings[0])?;
                    run_pim(&lagged, &series, i, horizon, members, &target, run.seed, scheme)?
                }
            };
            run.note("member_seeds", &report.member_seeds)?;
            let path = run.path("pim.csv");
            report.write_csv(std::fs::File::create(&path)?)?;
        }
        Command::Sinkhorn {
            cost,
            rows,
            cols,
            epsilon,
            max_iter,
            tol,
            ..
        } => {
            let cost = match &cost {
                Some(p) => read_matrix(p)?,
                None => {
                    use rand::{Rng, SeedableRng};
                    if rows == 0 || cols == 0 {
                        bail!(invalid("rows and cols must be positive"));
                    }
                    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(run.seed);
                    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(0.0..2.0))
                }
            };
            let d = SinkhornConfig::default();
            let cfg = SinkhornConfig {
                epsilon: epsilon.unwrap_or(d.epsilon),
                max_iter: max_iter.unwrap_or(d.max_iter),
                tol: tol.unwrap_or(d.tol),
            };
            run.set("sinkhorn", cfg)?;
            run.set("marginals", "uniform")?;
            let (n, m) = cost.dim();
            let plan = sinkhorn(cost.view(), &vec![1.0 / n as f64; n], &vec![1.0 / m as f64; m], &cfg)?;
            run.note("iterations", plan.iterations)?;
            run.note("converged", plan.converged)?;
            run.note("marginal_error", plan.marginal_error)?;
            run.note("transport_cost", (&plan.plan * &cost).sum())?;
            let path = run.path("plan.csv");
            write_matrix(&path, plan.plan.view())?;
        }
        Command::Wmid {
            source, region, percentile, ..
        } => {
            let [lat_min, lat_max, lon_min, lon_max] = region[..] else {
                bail!(invalid(format!("--region takes 4 values, got {}", region.len())));
            };
            let region = RegionBox::new(lat_min, lat_max, lon_min, lon_max)?;
            run.set("region", region)?;
            run.set("percentile", percentile)?;
            let (model, series) = fit_from_source(run, file, &source)?;
            let i = source.init_index;
            let zp = model.embedding.embed(&series[i - 1])?.joint();
            let zl = model.embedding.embed(&series[i])?.joint();
            let out = model.denoiser.couple(&Conditioning {
                latest: &zl,
                previous: &zp,
            })?;
            let plan = out
                .plan_b_to_a
                .ok_or_else(|| invalid("the uncoupled variant has no transport plan"))?;
            let lg = model.denoiser.latent_grid;
            let km = wmid(plan.plan.view(), &lg, &lg, &region, percentile)?;
            run.note("wmid_km", km)?;
            run.note("sinkhorn_converged", plan.converged)?;
            run.note("sinkhorn_marginal_error", plan.marginal_error)?;
            let p = run.path("plan_b_to_a.s2sk");
            let meta = TensorMeta {
                grid: Some(lg),
                conventions: json!({ "axes": ["atmosphere_site", "boundary_site"], "epsilon": plan.epsilon }),
                ..Default::default()
            };
            write_tensor(&p, &TensorData::F64(plan.plan.into_dyn()), &meta)?;
            let path = run.path("wmid.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["lat_min", "lat_max", "lon_min", "lon_max", "percentile", "wmid_km"])?;
            w.write_record(
                [region.lat_min, region.lat_max, region.lon_min, region.lon_max, percentile, km].map(|v| v.to_string()),
            )?;
            w.flush()?;
        }
        Command::Report {
            model, baseline, metric, ..
        } => {
            let table = |p: &Path| -> Result<ScoreTable> {
                Ok(read_metric_report(p)?
                    .into_iter()
                    .filter(|r| r.metric == metric)
                    .map(|r| ((r.variable, r.lead_day), r.value))
                    .collect())
            };
            let (mt, bt) = (table(&model)?, table(&baseline)?);
            let mut vars: Vec<String> = mt.keys().chain(bt.keys()).map(|k| k.0.clone()).collect();
            vars.sort();
            vars.dedup();
            let mut leads: Vec<usize> = mt.keys().chain(bt.keys()).map(|k| k.1).collect();
            leads.sort_unstable();
            leads.dedup();
            if vars.is_empty() {
                bail!(invalid(format!("no `{metric}` records in either report")));
            }
            run.set("metric", &metric)?;
            run.set("model", &model)?;
            run.set("baseline", &baseline)?;
            let card = Scorecard::build(&metric, &vars, &leads, &mt, &bt);
            let path = run.path("scorecard.csv");
            card.write_csv(std::fs::File::create(&path)?)?;
        }
    }
    Ok(())
}

fn evaluate(fc: &Forecast, truth: &[FieldSet], clim: Option<&Climatology>, conv: &VerifyConventions) -> Result<Vec<MetricRecord>> {
    let layout = channels_from_meta(&fc.channels, &fc.grid)?;
    let weights = channel_weights(&fc.grid, &layout)?;
    let m = fc.values.dim().0;
    let mut records = Vec::new();
    for (c, ch) in fc.channels.iter().enumerate() {
        let tc = truth_channel(&truth[0], &ch.name)?;
        let cc = match clim {
            Some(cl) => Some(
                cl.channels
                    .iter()
                    .position(|x| x.name == ch.name)
                    .ok_or_else(|| invalid(format!("climatology lacks {}", ch.name)))?,
            ),
            None => None,
        };
        for (k, (&lead, &date)) in fc.leads.iter().zip(&fc.dates).enumerate() {
            let tv = truth_by_date(truth, date)?.values.index_axis(Axis(0), tc);
            let ens = fc.values.slice(s![.., k, c, .., ..]);
            let mean = ens.mean_axis(Axis(0)).expect("at least one member");
            let mut push = |metric: &str, value: f64| {
                records.push(MetricRecord {
                    variable: ch.name.clone(),
                    lead_day: lead,
                    metric: metric.into(),
                    value,
                })
            };
            push("crps", crps_field(ens, tv, &weights[c], conv.crps_estimator)?);
            push("rmse", wrmse(&[mean.view()], &[tv], &weights[c])?);
            if let (Some(cl), Some(ci)) = (clim, cc) {
                let cm = cl.for_date(date)?.index_axis(Axis(0), ci).to_owned();
                let (fa, ta) = (&mean - &cm, &tv - &cm);
                push("acc", acc(&[fa.view()], &[ta.view()], &weights[c])?);
            }
            if m >= 2 {
                push("ssr", ssr(&[ens], &[tv], &weights[c], conv.ssr_spread_inflation)?);
            }
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn run_pim(
    runner: &dyn EnsembleRunner,
    series: &[FieldSet],
    init: usize,
    horizon: usize,
    members: usize,
    target: &[String],
    seed: u64,
    scheme: ShuffleScheme,
) -> Result<PimReport> {
    if init == 0 || init + horizon >= series.len() {
        bail!(invalid(format!(
            "init index {init} needs one earlier day and {horizon} verifying days in a {}-day series",
            series.len()
        )));
    }
    let latest = &series[init];
    let targets = target.iter().map(|n| truth_channel(latest, n)).collect::<Result<Vec<_>>>()?;
    let groups = default_groups(&latest.channels);
    Ok(pim(
        runner,
        (&series[init - 1], latest),
        &series[init + 1..=init + horizon],
        &groups,
        &targets,
        members,
        seed,
        scheme,
    )?)
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let row = rec?
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    let m = rows.first().map_or(0, Vec::len);
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        bail!(S2skError::Shape(format!("{}: cost matrix must be rectangular and non-empty", path.display())));
    }
    Ok(Array2::from_shape_vec((rows.len(), m), rows.concat())?)
}

fn write_matrix(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.outer_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<S2skError>() {
        Some(S2skError::Shape(_)) => "shape",
        Some(S2skError::InvalidArgument(_)) => "invalid_argument",
        Some(S2skError::EmptyWindow { .. }) => "empty_window",
        Some(S2skError::MissingCalendarDay(_)) => "missing_calendar_day",
        Some(S2skError::SinkhornNonFinite { .. }) => "sinkhorn_non_finite",
        Some(S2skError::NonFiniteLatent { .. }) => "non_finite_latent",
        Some(S2skError::Undefined(_)) => "undefined",
        Some(S2skError::Format { .. }) => "format",
        Some(S2skError::Truncated { .. }) => "truncated",
        Some(S2skError::Io(_)) => "io",
        Some(S2skError::Json(_)) => "json",
        Some(S2skError::Csv(_)) => "csv",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "error",
    }
}

/// Sizes the global rayon pool from `S2SK_THREADS` (default: all cores).
fn init_threads() -> Result<usize> {
    let n = match std::env::var("S2SK_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid(format!("S2SK_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(n)
}

fn real_main(cli: Cli) -> Result<()> {
    let threads = init_threads()?;
    let common = cli.command.common().clone();
    let file = load_config(common.config.as_deref())?;
    let mut run = Run {
        command: cli.command.name(),
        out: common.out.clone(),
        seed: common.seed,
        config: serde_json::Map::new(),
        outputs: Vec::new(),
        results: serde_json::Map::new(),
        conventions: Conventions::default(),
    };
    if let Some(v) = &file.verify {
        run.conventions.verify = v.clone();
    }
    run.set("common", &common)?;
    execute(cli.command, &mut run, &file)?;
    run.write_manifest(threads)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
