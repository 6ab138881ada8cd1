//! Joint optimization of positions, embeddings, the environment descriptor
//! and the decoders, with decoder-in-the-loop densification.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::decoders::{decode_covariance, decode_opacities, DecoderBank, DecoderInit, NetId, SemanticLevel};
use crate::error::{Error, Result};
use crate::io::{Dataset, VoxelFilter};
use crate::losses::{LossReport, LossWeights};
use crate::math::quat_to_matrix;
use crate::nn::{adam_step, AdamConfig, Moments, DEFAULT_PE_RANK};
use crate::pipeline::{evaluate, ModelGrads};
use crate::raster::BlendSettings;
use crate::scene::{init_scene_from_points, GaussianScene, DEFAULT_EMBED_STD, EMBED_DIM, ENV_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Position rate at iteration 0; decays exponentially to `positions_final`.
    pub positions: f64,
    pub positions_final: f64,
    pub embeddings: f64,
    pub env: f64,
    pub decoders: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            positions: 1e-3,
            positions_final: 1e-5,
            embeddings: 1e-2,
            env: 1e-3,
            decoders: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub densify_interval: usize,
    pub densify_start: usize,
    pub densify_stop: usize,
    /// Largest decoded scale (meters) above which a densified Gaussian splits
    /// instead of cloning.
    pub split_scale_threshold: f64,
    /// Mean position-gradient norm above which a Gaussian is densified.
    pub clone_grad_threshold: f64,
    pub prune_alpha_threshold: f64,
    /// Densification never grows the scene past this many Gaussians.
    pub max_gaussians: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub pe_rank: usize,
    pub semantic_level: SemanticLevel,
    pub optimize_positions: bool,
    /// Voxel edge (meters) for downsampling the initialization points.
    pub voxel_size: f64,
    pub embed_std: f64,
    pub initial_scale: f64,
    pub initial_opacity: f64,
    /// Whether checkpoints written after training carry the Adam moments.
    pub checkpoint_optimizer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 7000,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            densify_interval: 100,
            densify_start: 500,
            densify_stop: 5000,
            split_scale_threshold: 0.5,
            clone_grad_threshold: 4e-3,
            prune_alpha_threshold: 0.005,
            max_gaussians: 1_000_000,
            seed: 0,
            weights: LossWeights::default(),
            pe_rank: DEFAULT_PE_RANK,
            semantic_level: SemanticLevel::default(),
            optimize_positions: true,
            voxel_size: 3.0,
            embed_std: DEFAULT_EMBED_STD,
            initial_scale: 0.1,
            initial_opacity: 0.1,
            checkpoint_optimizer: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("split_scale_threshold", self.split_scale_threshold),
            ("clone_grad_threshold", self.clone_grad_threshold),
            ("prune_alpha_threshold", self.prune_alpha_threshold),
            ("voxel_size", self.voxel_size),
            ("initial_scale", self.initial_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let lr = &self.lr;
        for (name, v) in [
            ("lr.positions", lr.positions),
            ("lr.positions_final", lr.positions_final),
            ("lr.embeddings", lr.embeddings),
            ("lr.env", lr.env),
            ("lr.decoders", lr.decoders),
            ("embed_std", self.embed_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be at least 1".into()));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::Config("initial_opacity must lie in (0, 1)".into()));
        }
        if self.pe_rank == 0 {
            return Err(Error::Config("pe_rank must be at least 1".into()));
        }
        self.weights.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn position_lr(&self, iteration: usize) -> f64 {
        let (a, b) = (self.lr.positions, self.lr.positions_final);
        if a <= 0.0 || b <= 0.0 || self.iterations == 0 {
            return a;
        }
        let t = (iteration as f64 / self.iterations as f64).min(1.0);
        a * (b / a).powf(t)
    }
}

/// Adam moments for every parameter group. Position and embedding moments
/// have one row per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub positions: Moments,
    pub embeddings: Moments,
    pub env: Moments,
    /// Indexed by [`NetId::index`].
    pub nets: [Moments; 7],
}

impl OptimizerState {
    pub const GROUP_NAMES: [&'static str; 10] = [
        "positions",
        "embeddings",
        "env",
        "net:covariance",
        "net:alpha",
        "net:beta",
        "net:color",
        "net:intensity",
        "net:raydrop",
        "net:semantic",
    ];

    pub fn new(scene: &GaussianScene, bank: &DecoderBank) -> Self {
        Self {
            positions: Moments::zeros(3 * scene.len()),
            embeddings: Moments::zeros(EMBED_DIM * scene.len()),
            env: Moments::zeros(ENV_DIM),
            nets: NetId::ALL.map(|id| Moments::zeros(bank.net(id).param_count())),
        }
    }

    /// Groups in [`Self::GROUP_NAMES`] order.
    pub fn groups(&self) -> impl Iterator<Item = &Moments> {
        [&self.positions, &self.embeddings, &self.env].into_iter().chain(self.nets.iter())
    }

    /// Inverse of [`Self::groups`]; expects exactly ten groups.
    pub fn from_groups(groups: Vec<Moments>) -> Self {
        let mut it = groups.into_iter();
        let mut next = || it.next().expect("ten optimizer groups");
        let positions = next();
        let embeddings = next();
        let env = next();
        Self {
            positions,
            embeddings,
            env,
            nets: std::array::from_fn(|_| next()),
        }
    }

    /// Every group must match the shape of the parameters it tracks.
    pub fn check(&self, scene: &GaussianScene, bank: &DecoderBank) -> Result<()> {
        let expect = Self::new(scene, bank);
        for ((name, have), want) in Self::GROUP_NAMES.iter().zip(self.groups()).zip(expect.groups()) {
            if have.len() != want.len() || have.v.len() != want.len() {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer group `{name}` has {} entries, parameters have {}",
                    have.len(),
                    want.len()
                )));
            }
        }
        Ok(())
    }

    fn retain(&mut self, keep: &[bool]) {
        self.positions.retain_rows(3, keep);
        self.embeddings.retain_rows(EMBED_DIM, keep);
    }

    fn push(&mut self, count: usize) {
        self.positions.push_zero_rows(3, count);
        self.embeddings.push_zero_rows(EMBED_DIM, count);
    }
}

/// Position-gradient statistics gathered between densification passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub norm_sum: Vec<f64>,
    pub grad_sum: Vec<[f64; 3]>,
    /// Iterations in which the Gaussian received a nonzero gradient.
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            norm_sum: vec![0.0; n],
            grad_sum: vec![[0.0; 3]; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, position_grads: &[[f64; 3]]) {
        for (i, g) in position_grads.iter().enumerate() {
            let norm = Vector3::from(*g).norm();
            if norm > 0.0 {
                self.norm_sum[i] += norm;
                for k in 0..3 {
                    self.grad_sum[i][k] += g[k];
                }
                self.count[i] += 1;
            }
        }
    }

    pub fn mean_norm(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.norm_sum[i] / self.count[i] as f64
        }
    }

    fn mean_grad(&self, i: usize) -> [f64; 3] {
        let c = self.count[i].max(1) as f64;
        self.grad_sum[i].map(|g| g / c)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DensifyReport {
    pub iteration: usize,
    pub before: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub after: usize,
    /// Median and 90th percentile of the mean position-gradient norms, for
    /// tuning `clone_grad_threshold`.
    pub grad_median: f64,
    pub grad_p90: f64,
}

/// Uniform sample in the unit ball.
fn unit_ball(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

/// Decodes scale and opacity with the decoders frozen, then clones, splits and
/// prunes.
///
/// Decisions are made on the incoming Gaussians: those with decoded α below
/// `prune_alpha_threshold` are removed; of the rest, those whose mean
/// position-gradient norm exceeds `clone_grad_threshold` are split (two
/// children placed within half the decoded scale, parent removed) when their
/// largest decoded scale exceeds `split_scale_threshold`, and cloned (child at
/// the parent moved one gradient step) otherwise. Children copy the parent's
/// embedding and get zeroed optimizer rows; survivors keep their order and
/// children are appended.
pub fn densify_and_prune(
    scene: &mut GaussianScene,
    bank: &DecoderBank,
    stats: &DensifyStats,
    config: &TrainConfig,
    step_lr: f64,
    optimizer: Option<&mut OptimizerState>,
    rng: &mut impl Rng,
) -> Result<DensifyReport> {
    let n = scene.len();
    if stats.count.len() != n {
        return Err(Error::ShapeMismatch(format!("densify stats cover {} Gaussians, scene has {n}", stats.count.len())));
    }
    let mut report = DensifyReport {
        before: n,
        ..DensifyReport::default()
    };
    if n > 0 {
        let mut norms: Vec<f64> = (0..n).map(|i| stats.mean_norm(i)).collect();
        norms.sort_by(f64::total_cmp);
        report.grad_median = norms[n / 2];
        report.grad_p90 = norms[(n * 9 / 10).min(n - 1)];
    }
    let mut keep = vec![true; n];
    let mut candidates = Vec::new();
    for i in 0..n {
        let e = &scene.embeddings()[i];
        let (alpha, _) = decode_opacities(bank, e, &scene.positions()[i]);
        if alpha < config.prune_alpha_threshold {
            keep[i] = false;
            report.pruned += 1;
        } else if stats.mean_norm(i) > config.clone_grad_threshold {
            candidates.push(i);
        }
    }
    // strongest gradients first when the size cap binds
    candidates.sort_by(|&a, &b| stats.mean_norm(b).total_cmp(&stats.mean_norm(a)).then(a.cmp(&b)));
    let mut size = n - report.pruned;
    let mut children: Vec<([f64; 3], [f64; EMBED_DIM])> = Vec::new();
    for i in candidates {
        if size >= config.max_gaussians {
            break;
        }
        let p = scene.positions()[i];
        let e = scene.embeddings()[i];
        let cov = decode_covariance(bank, &e);
        let max_scale = cov.scale.iter().copied().fold(0.0, f64::max);
        if max_scale > config.split_scale_threshold {
            let r = quat_to_matrix(&cov.rotation);
            let half = Vector3::from(cov.scale) * 0.5;
            for _ in 0..2 {
                let off = r * unit_ball(rng).component_mul(&half);
                children.push(([p[0] + off.x, p[1] + off.y, p[2] + off.z], e));
            }
            keep[i] = false;
            report.split += 1;
            size += 1;
        } else {
            let g = stats.mean_grad(i);
            children.push(([p[0] - step_lr * g[0], p[1] - step_lr * g[1], p[2] - step_lr * g[2]], e));
            report.cloned += 1;
            size += 1;
        }
    }
    scene.retain(&keep);
    for (p, e) in &children {
        scene.push(*p, *e);
    }
    if let Some(o) = optimizer {
        o.retain(&keep);
        o.push(children.len());
        o.check(scene, bank)?;
    }
    report.after = scene.len();
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// In [`LossReport::LOG_FIELDS`] order.
    pub terms: [f64; 8],
    pub gaussians: usize,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<LogRecord>,
    pub densify: Vec<DensifyReport>,
}

impl TrainingLog {
    /// Tab-separated log with a `#` header carrying seed and config hash.
    /// Timing is the last column and is omitted when `timing` is false, which
    /// makes logs of identical runs byte-identical.
    pub fn to_tsv(&self, timing: bool) -> String {
        let mut s = format!("# seed={} config={}\niteration", self.seed, self.config_hash);
        for f in LossReport::LOG_FIELDS {
            s.push('\t');
            s.push_str(f);
        }
        s.push_str("\tgaussians");
        if timing {
            s.push_str("\tms");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{}", r.iteration);
            for t in r.terms {
                let _ = write!(s, "\t{t:.9e}");
            }
            let _ = write!(s, "\t{}", r.gaussians);
            if timing {
                let _ = write!(s, "\t{:.3}", r.millis);
            }
            s.push('\n');
        }
        s
    }
}

/// Parameters and optimizer state of a run in progress.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub scene: GaussianScene,
    pub bank: DecoderBank,
    pub optimizer: OptimizerState,
    pub iteration: usize,
}

impl TrainState {
    /// Gaussians at the downsampled dataset points, random embeddings, and a
    /// freshly seeded decoder bank, all rounded to f32.
    pub fn initialize(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let points = dataset.init_points(&VoxelFilter::new(config.voxel_size)?)?;
        let mut scene = init_scene_from_points(&points, config.seed, config.embed_std)?;
        let init = DecoderInit {
            pe_rank: config.pe_rank,
            initial_scale: config.initial_scale,
            initial_opacity: config.initial_opacity,
        };
        let mut bank = DecoderBank::seeded(&init, config.seed.wrapping_add(0x5eed));
        scene.quantize_f32();
        bank.quantize_f32();
        let optimizer = OptimizerState::new(&scene, &bank);
        Ok(Self {
            scene,
            bank,
            optimizer,
            iteration: 0,
        })
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            scene: self.scene.clone(),
            bank: self.bank.clone(),
            optimizer: config.checkpoint_optimizer.then(|| self.optimizer.clone()),
            iteration: self.iteration as u64,
            config: config.to_json(),
        }
    }

    fn apply(&mut self, grads: &ModelGrads, config: &TrainConfig) -> Result<()> {
        let adam = &config.adam;
        let o = &mut self.optimizer;
        if config.optimize_positions {
            let lr = config.position_lr(self.iteration);
            let g: Vec<f64> = grads.positions.iter().flatten().copied().collect();
            adam_step(&mut o.positions, self.scene.positions_mut().as_flattened_mut(), &g, lr, adam, "positions")?;
        }
        let g: Vec<f64> = grads.embeddings.iter().flatten().copied().collect();
        adam_step(
            &mut o.embeddings,
            self.scene.embeddings_mut().as_flattened_mut(),
            &g,
            config.lr.embeddings,
            adam,
            "embeddings",
        )?;
        adam_step(&mut o.env, &mut self.scene.env, &grads.env, config.lr.env, adam, "env")?;
        for id in NetId::ALL {
            let name = OptimizerState::GROUP_NAMES[3 + id.index()];
            adam_step(
                &mut o.nets[id.index()],
                self.bank.net_mut(id).params_mut(),
                &grads.nets[id.index()],
                config.lr.decoders,
                adam,
                name,
            )?;
        }
        self.scene.quantize_f32();
        self.bank.quantize_f32();
        // overflowing parameters can leave the loss finite (ReLU maps NaN to 0),
        // so check the tensors themselves
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let mut bad = Vec::new();
        if !finite(self.scene.positions().as_flattened()) {
            bad.push("positions");
        }
        if !finite(self.scene.embeddings().as_flattened()) {
            bad.push("embeddings");
        }
        if !finite(&self.scene.env) {
            bad.push("env");
        }
        for id in NetId::ALL {
            if !finite(self.bank.net(id).params()) {
                bad.push(OptimizerState::GROUP_NAMES[3 + id.index()]);
            }
        }
        if !bad.is_empty() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                term: "total".into(),
                detail: format!("update made tensor `{}` non-finite", bad.join("`, `")),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: TrainingLog,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        self.state.checkpoint(config)
    }
}

/// Trains from a fresh initialization. Frames and scans named in `holdout` are
/// never used for supervision.
pub fn train(dataset: &Dataset, config: &TrainConfig, holdout: &[String]) -> Result<TrainOutcome> {
    train_with(dataset, config, holdout, |_| {})
}

/// [`train`] with a callback invoked after every iteration.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    holdout: &[String],
    on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let state = TrainState::initialize(dataset, config)?;
    resume(dataset, config, holdout, state, on_step)
}

/// Runs iterations `state.iteration .. config.iterations`.
pub fn resume(
    dataset: &Dataset,
    config: &TrainConfig,
    holdout: &[String],
    mut state: TrainState,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    state.optimizer.check(&state.scene, &state.bank)?;
    let held: HashSet<&str> = holdout.iter().map(String::as_str).collect();
    let frames: Vec<usize> = (0..dataset.frames.len())
        .filter(|&i| !held.contains(dataset.frames[i].name.as_str()))
        .collect();
    if frames.is_empty() {
        return Err(Error::Config("no training frames left after the holdout".into()));
    }
    let use_lidar = dataset.manifest.lidar_losses_enabled() && config.weights.lambda_lidar > 0.0;
    let settings = BlendSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // the sampling stream depends only on the seed and the iteration reached
    for _ in 0..state.iteration {
        rng.random_range(0..frames.len());
    }
    let mut densify_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd3e5_1f7a);
    let mut stats = DensifyStats::new(state.scene.len());
    let mut log = TrainingLog {
        seed: config.seed,
        config_hash: config.hash(),
        records: Vec::with_capacity(config.iterations.saturating_sub(state.iteration)),
        densify: Vec::new(),
    };

    while state.iteration < config.iterations {
        let it = state.iteration;
        let start = Instant::now();
        let frame = frames[rng.random_range(0..frames.len())];
        let mut sample = dataset.sample(frame, use_lidar);
        if let Some(j) = dataset.frames[frame].lidar {
            if held.contains(dataset.scans[j].name.as_str()) {
                sample.lidar = None;
            }
        }
        let eval = evaluate(&state.scene, &state.bank, &sample, &config.weights, &settings, true).map_err(|e| match e {
            Error::NonFiniteLoss(term) => Error::Diverged {
                iteration: it,
                term: term.to_string(),
                detail: format!("loss on frame `{}` is not finite", dataset.frames[frame].name),
            },
            other => other,
        })?;
        let grads = eval.grads.expect("gradients requested");
        state.apply(&grads, config).map_err(|e| match e {
            Error::NonFiniteGradient(tensor) => Error::Diverged {
                iteration: it,
                term: "total".into(),
                detail: format!("non-finite gradient in tensor `{tensor}`"),
            },
            other => other,
        })?;
        stats.accumulate(&grads.positions);
        state.iteration += 1;

        let done = state.iteration;
        if done >= config.densify_start && done < config.densify_stop && done.is_multiple_of(config.densify_interval) {
            let lr = config.position_lr(done);
            let report = densify_and_prune(
                &mut state.scene,
                &state.bank,
                &stats,
                config,
                lr,
                Some(&mut state.optimizer),
                &mut densify_rng,
            )?;
            state.scene.quantize_f32();
            log.densify.push(DensifyReport { iteration: done, ..report });
            stats = DensifyStats::new(state.scene.len());
        }

        let record = LogRecord {
            iteration: it,
            terms: eval.report.log_fields(),
            gaussians: state.scene.len(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&record);
        log.records.push(record);
    }
    Ok(TrainOutcome { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::init_scene_from_points;

    fn setup(n: usize) -> (GaussianScene, DecoderBank, OptimizerState) {
        let points: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.5 * i as f64, 3.0]).collect();
        let scene = init_scene_from_points(&points, 1, 0.01).unwrap();
        let bank = DecoderBank::seeded(&DecoderInit::default(), 2);
        let mut opt = OptimizerState::new(&scene, &bank);
        for (i, m) in opt.positions.m.iter_mut().enumerate() {
            *m = 1.0 + i as f64;
        }
        (scene, bank, opt)
    }

    fn stats(n: usize, hot: &[usize]) -> DensifyStats {
        let mut s = DensifyStats::new(n);
        let grads: Vec<[f64; 3]> = (0..n).map(|i| if hot.contains(&i) { [1e-2, -2e-2, 0.0] } else { [0.0; 3] }).collect();
        s.accumulate(&grads);
        s.accumulate(&grads);
        s
    }

    #[test]
    fn clone_appends_children_one_step_away() {
        let (mut scene, bank, mut opt) = setup(6);
        let before = scene.clone();
        let config = TrainConfig {
            prune_alpha_threshold: 1e-3,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(&mut scene, &bank, &stats(6, &[1, 4]), &config, 0.5, Some(&mut opt), &mut rng).unwrap();
        assert_eq!((r.cloned, r.split, r.pruned, r.after), (2, 0, 0, 8));
        assert_eq!(&scene.positions()[..6], before.positions());
        let p = before.positions()[1];
        assert_eq!(scene.positions()[6], [p[0] - 0.5e-2, p[1] + 1e-2, p[2]]);
        assert_eq!(scene.embeddings()[6], before.embeddings()[1]);
        assert_eq!(&opt.positions.m[..18], &(1..=18).map(f64::from).collect::<Vec<_>>()[..]);
        assert!(opt.positions.m[18..].iter().all(|&m| m == 0.0));
        opt.check(&scene, &bank).unwrap();
    }

    #[test]
    fn split_replaces_parent_with_two_nearby_children() {
        let (mut scene, bank, mut opt) = setup(5);
        let before = scene.clone();
        let config = TrainConfig {
            prune_alpha_threshold: 1e-3,
            split_scale_threshold: 1e-3,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(&mut scene, &bank, &stats(5, &[2]), &config, 0.5, Some(&mut opt), &mut rng).unwrap();
        assert_eq!((r.cloned, r.split, r.pruned, r.after), (0, 1, 0, 6));
        let parent = before.positions()[2];
        let scale = decode_covariance(&bank, &before.embeddings()[2]).scale;
        let reach = 0.5 * scale.iter().copied().fold(0.0, f64::max) + 1e-12;
        for child in &scene.positions()[4..] {
            let d = Vector3::from(*child) - Vector3::from(parent);
            assert!(d.norm() <= reach, "{} > {reach}", d.norm());
        }
        // survivors keep order and their optimizer rows
        assert_eq!(scene.positions()[2], before.positions()[3]);
        assert_eq!(opt.positions.m[6], 10.0);
        opt.check(&scene, &bank).unwrap();
    }

    #[test]
    fn prune_removes_transparent_gaussians() {
        let (mut scene, bank, mut opt) = setup(4);
        let config = TrainConfig {
            prune_alpha_threshold: 0.5,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(&mut scene, &bank, &stats(4, &[0, 1, 2, 3]), &config, 0.5, Some(&mut opt), &mut rng).unwrap();
        assert_eq!((r.cloned, r.split, r.pruned, r.after), (0, 0, 4, 0));
        assert_eq!(opt.positions.len(), 0);
    }

    #[test]
    fn size_cap_prefers_strongest_gradients() {
        let (mut scene, bank, _) = setup(4);
        let before = scene.clone();
        let config = TrainConfig {
            prune_alpha_threshold: 1e-3,
            max_gaussians: 5,
            ..TrainConfig::default()
        };
        let mut s = DensifyStats::new(4);
        s.accumulate(&[[1e-3, 0.0, 0.0], [0.0; 3], [5e-3, 0.0, 0.0], [2e-3, 0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(&mut scene, &bank, &s, &config, 0.0, None, &mut rng).unwrap();
        assert_eq!(r.after, 5);
        assert_eq!(scene.positions()[4], before.positions()[2]);
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let (mut scene, bank, _) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = densify_and_prune(&mut scene, &bank, &DensifyStats::new(2), &TrainConfig::default(), 0.1, None, &mut rng);
        assert!(res.is_err());
    }

    #[test]
    fn position_rate_decays_to_final_value() {
        let c = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.position_lr(0), c.lr.positions);
        assert!((c.position_lr(100) - c.lr.positions_final).abs() < 1e-15);
        assert!(c.position_lr(50) < c.position_lr(10));
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), c);
        assert!(TrainConfig::from_json("{\"voxel_size\": -1}").is_err());
        assert!(TrainConfig::from_json("{\"bogus\": 1}").is_err());
        assert_eq!(c.hash().len(), 16);
        let other = TrainConfig { seed: 1, ..c.clone() };
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn optimizer_groups_round_trip() {
        let (scene, bank, opt) = setup(3);
        let groups: Vec<Moments> = opt.groups().cloned().collect();
        assert_eq!(groups.len(), OptimizerState::GROUP_NAMES.len());
        assert_eq!(OptimizerState::from_groups(groups), opt);
        let (scene2, _, _) = setup(4);
        assert!(opt.check(&scene2, &bank).is_err());
        opt.check(&scene, &bank).unwrap();
    }
}
