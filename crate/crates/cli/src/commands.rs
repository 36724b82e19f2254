use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sgmm::classifier::HeadConfig;
use sgmm::data::{self, CowatchConfig, Dataset, Interaction, SynthConfig};
use sgmm::deep_pool::{init_from_ubm, CodeKind, PoolLayer, PoolSpec, Variant};
use sgmm::gmm::{self, CovarianceKind, EmConfig, GmmModel};
use sgmm::reco::{self, EmbedConfig, EmbedTrainConfig, GlmixConfig, RecoEvalConfig, RecoModel};
use sgmm::rng;
use sgmm::stats_pool::{self, SecondOrderKind, VideoCode};
use sgmm::trainer::{self, FrozenCode, FrozenPool, GradcheckSpec, Model, Pooling, TrainConfig};

use crate::{init_threads, print_config, CmdResult, Common, Failure};

const VARIANTS: [&str; 6] =
    ["decoupled", "uniform-priors", "shared-spherical", "spherical", "shared-diagonal", "diagonal"];
const COVARIANCES: [&str; 5] = ["shared-full", "shared-spherical", "spherical", "shared-diagonal", "diagonal"];

fn variant(name: &str) -> Result<Variant, Failure> {
    name.parse().map_err(|e: sgmm::Error| Failure::Usage(e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_data(path: &Path) -> Result<Dataset, Failure> {
    data::read_vseq(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_ubm(path: &Path) -> Result<GmmModel, Failure> {
    gmm::read_gmm(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn print_json(value: &serde_json::Value) -> CmdResult {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-synth

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenSynthArgs {
    /// Output directory for train.vseq, val.vseq and test.vseq.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Number of latent frame clusters.
    #[arg(long, default_value_t = 16)]
    pub clusters: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub videos_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub frames_min: usize,
    #[arg(long, default_value_t = 40)]
    pub frames_max: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cluster_spread: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn gen_synth(a: GenSynthArgs) -> CmdResult {
    print_config("gen-synth", &a);
    init_threads(&a.common)?;
    let fractions_ok = (0.0..1.0).contains(&a.val_fraction)
        && (0.0..1.0).contains(&a.test_fraction)
        && a.val_fraction + a.test_fraction < 1.0;
    if !fractions_ok {
        return Err(Failure::Usage("val and test fractions must be in [0, 1) and sum below 1".into()));
    }
    let cfg = SynthConfig {
        num_classes: a.classes,
        num_clusters_true: a.clusters,
        dim: a.dim,
        videos_per_class: a.videos_per_class,
        frames_min: a.frames_min,
        frames_max: a.frames_max,
        cluster_spread: a.cluster_spread,
        seed: a.common.seed,
        ..SynthConfig::default()
    };
    let all = data::gen_classification(&cfg)?;
    let (rest, test) = all.split_tail(a.test_fraction);
    let (train, val) = rest.split_tail(a.val_fraction / (1.0 - a.test_fraction));
    std::fs::create_dir_all(&a.out)?;
    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        data::write_vseq(ds, a.out.join(format!("{name}.vseq")))?;
    }
    print_json(
        &json!({ "train": train.len(), "val": val.len(), "test": test.len(), "classes": a.classes, "dim": a.dim }),
    )
}

// ---------------------------------------------------------------------------
// gen-cowatch

#[derive(Serialize, Deserialize)]
struct InteractionRow {
    user: String,
    video: String,
    session: u32,
    watched: u8,
}

fn write_interactions(path: &Path, rows: &[Interaction]) -> CmdResult {
    let mut w = csv::Writer::from_path(path)?;
    for i in rows {
        w.serialize(InteractionRow {
            user: i.user.clone(),
            video: i.video.clone(),
            session: i.session,
            watched: u8::from(i.watched),
        })?;
    }
    w.flush()?;
    Ok(())
}

fn read_interactions(path: &Path) -> Result<Vec<Interaction>, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: InteractionRow = row.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        if row.watched > 1 {
            return Err(Failure::Data(format!("{}: watched must be 0 or 1", path.display())));
        }
        out.push(Interaction { user: row.user, video: row.video, session: row.session, watched: row.watched == 1 });
    }
    Ok(out)
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenCowatchArgs {
    /// VSEQ corpus the users watch.
    #[arg(long)]
    pub videos: PathBuf,
    /// Output CSV of interactions (user, video, session, watched).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 10)]
    pub sessions_per_user: usize,
    #[arg(long, default_value_t = 8)]
    pub videos_per_session: usize,
    #[arg(long, default_value_t = 2)]
    pub preferred_classes: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn gen_cowatch(a: GenCowatchArgs) -> CmdResult {
    print_config("gen-cowatch", &a);
    init_threads(&a.common)?;
    if a.users == 0 || a.sessions_per_user == 0 || a.videos_per_session == 0 {
        return Err(Failure::Usage("users, sessions and videos per session must be positive".into()));
    }
    let videos = read_data(&a.videos)?;
    let cfg = CowatchConfig {
        sessions_per_user: a.sessions_per_user,
        videos_per_session: a.videos_per_session,
        preferred_classes: a.preferred_classes,
        seed: a.common.seed,
        ..CowatchConfig::default()
    };
    let cw = data::gen_cowatch_with(a.users, &videos, &cfg);
    write_interactions(&a.out, &cw.interactions)?;
    let watched = cw.interactions.iter().filter(|i| i.watched).count();
    print_json(&json!({ "interactions": cw.interactions.len(), "watched": watched, "pairs": cw.pairs.len() }))
}

// ---------------------------------------------------------------------------
// train-ubm

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainUbmArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output GMM1 file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub k: usize,
    #[arg(long, default_value = "diagonal", value_parser = COVARIANCES)]
    pub covariance: String,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub variance_floor: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn train_ubm(a: TrainUbmArgs) -> CmdResult {
    print_config("train-ubm", &a);
    init_threads(&a.common)?;
    let kind: CovarianceKind = a.covariance.parse()?;
    let data = read_data(&a.data)?;
    let cfg = EmConfig {
        max_iters: a.max_iters,
        rel_tol: a.rel_tol,
        variance_floor: a.variance_floor,
        seed: a.common.seed,
        ..EmConfig::default()
    };
    let fit = gmm::train_ubm(&data.stacked_frames(), a.k, kind, &cfg)?;
    gmm::write_gmm(&fit.model, &a.out)?;
    print_json(&json!({
        "k": a.k,
        "covariance": a.covariance,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "reseeds": fit.reseeds,
        "loglik": fit.loglik_history.last(),
    }))
}

// ---------------------------------------------------------------------------
// extract

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractPool {
    Avg,
    Bow,
    Vlad,
    Sgmm,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExtractArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Background model; not needed for average pooling.
    #[arg(long)]
    pub ubm: Option<PathBuf>,
    /// Output VCOD file.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path; defaults to the output path with `.manifest` appended.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sgmm")]
    pub pool: ExtractPool,
    #[arg(long, default_value_t = stats_pool::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub intra_norm: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub final_norm: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn extract(a: ExtractArgs) -> CmdResult {
    print_config("extract", &a);
    init_threads(&a.common)?;
    if a.gamma.is_nan() || a.gamma < 0.0 || a.gamma.is_infinite() {
        return Err(Failure::Usage("--gamma must be a finite non-negative number".into()));
    }
    let data = read_data(&a.data)?;
    let ubm = match (&a.ubm, a.pool) {
        (_, ExtractPool::Avg) => None,
        (Some(p), _) => Some(read_ubm(p)?),
        (None, _) => return Err(Failure::Usage("--ubm is required for bow, vlad and sgmm codes".into())),
    };
    let mut codes = Vec::with_capacity(data.len());
    for r in &data.records {
        let code = match &ubm {
            None => stats_pool::avg_pool(r),
            Some(g) => {
                let stats = stats_pool::accumulate_frames(g, &r.frames, SecondOrderKind::None)?;
                match a.pool {
                    ExtractPool::Bow => stats_pool::bow_code(&stats),
                    ExtractPool::Vlad => stats_pool::vlad_code(&stats, g)?,
                    _ => stats_pool::sgmm_code(&stats, g, a.gamma)?,
                }
            }
        };
        let code: VideoCode = stats_pool::normalize(&code, a.intra_norm, a.final_norm);
        codes.push((r.id.clone(), code.values));
    }
    let manifest = a.manifest.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".manifest");
        PathBuf::from(s)
    });
    stats_pool::write_vcod(&codes, &a.out, &manifest)?;
    let (rows, cols) = codes.first().map_or((0, 0), |(_, m)| (m.rows(), m.cols()));
    print_json(&json!({ "videos": codes.len(), "rows": rows, "cols": cols, "manifest": manifest }))
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPool {
    Netvlad,
    Dsgmm,
    /// Frame mean, no clustering.
    Avg,
    /// Unsupervised SGMM code from a frozen background model.
    Sgmm,
}

/// Pooling flags shared by `train` and `reco-train`.
#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PoolArgs {
    /// Background model used to initialize (or, for sgmm, to fix) the pooling layer.
    #[arg(long)]
    pub ubm: Option<PathBuf>,
    #[arg(long, default_value = "diagonal", value_parser = VARIANTS)]
    pub variant: String,
    /// Number of clusters when no UBM is given.
    #[arg(long, default_value_t = 256)]
    pub k: usize,
    #[arg(long, default_value_t = stats_pool::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub intra_norm: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub final_norm: bool,
    /// Tie the aggregation anchors to the assignment means in coupled variants.
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub share_anchors: bool,
}

impl PoolArgs {
    fn layer(&self, kind: CodeKind, dim: usize, seed: u64) -> Result<PoolLayer, Failure> {
        let spec = PoolSpec {
            gamma: self.gamma,
            intra_norm: self.intra_norm,
            final_norm: self.final_norm,
            share_anchors: self.share_anchors,
            ..PoolSpec::new(kind)
        };
        spec.validate()?;
        let v = variant(&self.variant)?;
        match &self.ubm {
            Some(p) => {
                let ubm = read_ubm(p)?;
                if ubm.dim() != dim {
                    return Err(Failure::Data(format!(
                        "UBM dimension {} does not match data dimension {dim}",
                        ubm.dim()
                    )));
                }
                Ok(init_from_ubm(&ubm, v, spec)?)
            }
            None => {
                if self.k == 0 {
                    return Err(Failure::Usage("--k must be positive".into()));
                }
                Ok(PoolLayer::random(spec, v, self.k, dim, &mut rng::stream(seed, u64::MAX)))
            }
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Best checkpoint by validation loss.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint after the final step.
    #[arg(long)]
    pub last_out: Option<PathBuf>,
    /// CSV metric log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dsgmm")]
    pub pool: TrainPool,
    #[command(flatten)]
    #[serde(flatten)]
    pub pooling: PoolArgs,
    #[arg(long, default_value_t = 2)]
    pub experts: usize,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub input_gating: bool,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub output_gating: bool,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.8)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 2000)]
    pub decay_every: u64,
    /// Frames sampled per video at every step.
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 100)]
    pub eval_every: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn train(a: TrainArgs) -> CmdResult {
    print_config("train", &a);
    init_threads(&a.common)?;
    let cfg = TrainConfig {
        lr: a.lr,
        decay_factor: a.decay_factor,
        decay_every: a.decay_every,
        frames_per_video: a.frames,
        batch_size: a.batch_size,
        max_steps: a.steps,
        eval_every: a.eval_every,
        seed: a.common.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let head = HeadConfig { experts: a.experts, input_gating: a.input_gating, output_gating: a.output_gating };
    let train_set = read_data(&a.train)?;
    let val_set = read_data(&a.val)?;
    if train_set.dim != val_set.dim {
        return Err(Failure::Data("train and validation dimensions differ".into()));
    }
    let classes = train_set.num_classes.max(val_set.num_classes);
    let train_set = train_set.with_num_classes(classes)?;
    let val_set = val_set.with_num_classes(classes)?;
    let pooling = match a.pool {
        TrainPool::Avg => Pooling::Average { dim: train_set.dim },
        TrainPool::Sgmm => {
            let path = a.pooling.ubm.as_ref().ok_or_else(|| Failure::Usage("--pool sgmm needs --ubm".into()))?;
            Pooling::Frozen(FrozenPool {
                ubm: read_ubm(path)?,
                code: FrozenCode::Sgmm { gamma: a.pooling.gamma },
                intra_norm: a.pooling.intra_norm,
                final_norm: a.pooling.final_norm,
            })
        }
        TrainPool::Netvlad => Pooling::Trainable(a.pooling.layer(CodeKind::Vlad, train_set.dim, a.common.seed)?),
        TrainPool::Dsgmm => Pooling::Trainable(a.pooling.layer(CodeKind::Dsgmm, train_set.dim, a.common.seed)?),
    };
    let model = Model::new(pooling, classes, head, &mut rng::stream(a.common.seed, u64::MAX - 1))?;
    let out = trainer::train(&train_set, &val_set, model, &cfg)?;
    trainer::write_checkpoint(&out.best, &a.out)?;
    if let Some(p) = &a.last_out {
        trainer::write_checkpoint(&out.last, p)?;
    }
    if let Some(p) = &a.log {
        trainer::write_log_csv(&out.log, p)?;
    }
    let best_row = out.log.iter().find(|r| r.step == out.best.step);
    print_json(&json!({
        "pool": out.best.model.pooling.name(),
        "steps": out.last.step,
        "best_step": out.best.step,
        "best_val_loss": out.best.val_loss,
        "best_val_gap": best_row.map(|r| r.gap),
        "best_val_hit1": best_row.map(|r| r.hit1),
    }))
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    print_config("eval", &a);
    init_threads(&a.common)?;
    let ck = trainer::read_checkpoint(&a.checkpoint)
        .map_err(|e| Failure::Data(format!("{}: {e}", a.checkpoint.display())))?;
    let data = read_data(&a.data)?;
    let classes = ck.model.num_classes();
    if data.num_classes > classes {
        return Err(Failure::Data(format!("data has labels beyond the model's {classes} classes")));
    }
    let data = data.with_num_classes(classes)?;
    let r = trainer::evaluate(&ck.model, &data)?;
    print_json(&json!({ "gap": r.gap, "hit1": r.hit1, "n_videos": r.n_videos }))
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    #[arg(long, default_value = "diagonal", value_parser = VARIANTS)]
    pub variant: String,
    #[arg(long, default_value = "dsgmm", value_parser = ["netvlad", "dsgmm"])]
    pub pool: String,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub intra_norm: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub final_norm: bool,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub share_anchors: bool,
    #[arg(long, default_value_t = stats_pool::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    print_config("gradcheck", &a);
    init_threads(&a.common)?;
    let spec = GradcheckSpec {
        variant: variant(&a.variant)?,
        code_kind: a.pool.parse()?,
        intra_norm: a.intra_norm,
        final_norm: a.final_norm,
        share_anchors: a.share_anchors,
        gamma: a.gamma,
        k: a.k,
        dim: a.dim,
        coords_per_block: a.coords,
        step: a.step,
        threshold: a.threshold,
        seed: a.common.seed,
        ..GradcheckSpec::default()
    };
    let report = trainer::gradcheck(&spec)?;
    let blocks: Vec<_> = report
        .blocks
        .iter()
        .map(|b| json!({ "block": b.name, "checked": b.checked, "max_rel_err": b.max_rel_err }))
        .collect();
    print_json(&json!({
        "max_rel_err": report.max_rel_err,
        "threshold": report.threshold,
        "passed": report.passed(),
        "blocks": blocks,
    }))?;
    eprintln!("max rel err {:.3e} (threshold {:.1e})", report.max_rel_err, report.threshold);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Data(format!("gradient check failed: {:.3e} >= {:.1e}", report.max_rel_err, report.threshold)))
    }
}

// ---------------------------------------------------------------------------
// reco-train

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RecoTrainArgs {
    #[arg(long)]
    pub videos: PathBuf,
    /// Interactions CSV from gen-cowatch.
    #[arg(long)]
    pub interactions: PathBuf,
    /// Output embedding model (EMBD).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "dsgmm", value_parser = ["netvlad", "dsgmm"])]
    pub pool: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub pooling: PoolArgs,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = reco::DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 300)]
    pub steps: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Leading fraction of each user's sessions used for training.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 16)]
    pub triplets_per_session: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn reco_train(a: RecoTrainArgs) -> CmdResult {
    print_config("reco-train", &a);
    init_threads(&a.common)?;
    if !(0.0..=1.0).contains(&a.train_fraction) {
        return Err(Failure::Usage("--train-fraction must be in [0, 1]".into()));
    }
    if a.batch_size == 0 || a.embed_dim == 0 || a.hidden == 0 {
        return Err(Failure::Usage("batch size, embedding and hidden sizes must be positive".into()));
    }
    let videos = read_data(&a.videos)?;
    let interactions = read_interactions(&a.interactions)?;
    let layer = a.pooling.layer(a.pool.parse()?, videos.dim, a.common.seed)?;
    let net_cfg = EmbedConfig { embed_dim: a.embed_dim, hidden: a.hidden };
    let model = RecoModel::new(layer, net_cfg, &mut rng::stream(a.common.seed, u64::MAX - 1))?;
    let (train_part, _) = reco::split_sessions(&interactions, a.train_fraction);
    let triplets = reco::triplets_from_interactions(&train_part, a.triplets_per_session, a.common.seed);
    let cfg = EmbedTrainConfig {
        alpha: a.margin,
        lr: a.lr,
        steps: a.steps,
        batch_size: a.batch_size,
        seed: a.common.seed,
        ..EmbedTrainConfig::default()
    };
    let (model, history) = reco::train_embedding(model, &videos, &triplets, &cfg)?;
    write_bytes(&a.out, &reco::encode_reco_model(&model)?)?;
    let tail = &history[history.len().saturating_sub(20)..];
    let recent = if tail.is_empty() { None } else { Some(tail.iter().sum::<f64>() / tail.len() as f64) };
    print_json(&json!({
        "triplets": triplets.len(),
        "steps": history.len(),
        "first_loss": history.first(),
        "recent_loss": recent,
    }))
}

// ---------------------------------------------------------------------------
// reco-eval

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RecoEvalArgs {
    /// Embedding model from reco-train.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub videos: PathBuf,
    #[arg(long)]
    pub interactions: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// L2 prior strength on per-user GLMix effects.
    #[arg(long, default_value_t = 1.0)]
    pub prior: f64,
    #[arg(long, default_value_t = 50)]
    pub max_rounds: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

pub fn reco_eval(a: RecoEvalArgs) -> CmdResult {
    print_config("reco-eval", &a);
    init_threads(&a.common)?;
    let bytes = std::fs::read(&a.model).map_err(|e| Failure::Data(format!("{}: {e}", a.model.display())))?;
    let model = reco::decode_reco_model(&bytes).map_err(|e| Failure::Data(format!("{}: {e}", a.model.display())))?;
    let videos = read_data(&a.videos)?;
    let interactions = read_interactions(&a.interactions)?;
    let embeddings = reco::embed_all(&model, &videos)?;
    let cfg = RecoEvalConfig {
        train_fraction: a.train_fraction,
        glmix: GlmixConfig { prior: a.prior, max_rounds: a.max_rounds, ..GlmixConfig::default() },
    };
    let r = reco::evaluate_cowatch(&embeddings, &interactions, &cfg)?;
    eprintln!(
        "no-video GLMix AUC {:.4}; {} test interactions, {} cold-start",
        r.auc_glmix_no_video, r.n_test, r.n_coldstart
    );
    print_json(&json!({
        "auc_avg_sim": r.auc_avg_sim,
        "auc_max_sim": r.auc_max_sim,
        "auc_glmix": r.auc_glmix,
        "auc_glmix_coldstart": r.auc_glmix_coldstart,
    }))
}
