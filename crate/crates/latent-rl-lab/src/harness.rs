//! Operational surface: experiment configs, seeded substreams, metrics files,
//! and the entry points behind the CLI subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algs::ucbvi::ucbvi_base;
use crate::algs::BaseAlgorithm;
use crate::envs::{
    make_cb_env, make_combination_lock, make_random_pushforward_env, make_tree_env, EnvBundle,
};
use crate::error::LabError;
use crate::oracle::run_verification_suite;
use crate::reduction::{
    hardness_probe, median_of_sorted, o2l_run, ClassifierFeed, O2lInputs, O2lOutcome,
    ProtocolConfig, RepMode,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Derive a named substream from a base seed; all experiment randomness goes
/// through these so that runs are reproducible end to end.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the stream name, folded into the seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub v: u32,
    pub name: String,
    pub kind: ExperimentKind,
    pub env: EnvSpec,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub hardness: Option<HardnessSpec>,
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    O2l,
    Hardness,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Tree {
        n: usize,
    },
    Cb {
        n: usize,
    },
    Lock {
        horizon: usize,
        #[serde(default = "default_decoys")]
        decoys: usize,
    },
    RandomPushforward {
        states: usize,
        observations: usize,
        actions: usize,
        horizon: usize,
        mix: f64,
        models: usize,
        decoders: usize,
    },
    Path {
        path: String,
    },
}

fn default_decoys() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    #[serde(default = "default_base")]
    pub base: String,
    #[serde(default = "default_bonus")]
    pub bonus_scale: f64,
    #[serde(default = "default_rep")]
    pub rep: String,
}

fn default_base() -> String {
    "ucbvi".into()
}
fn default_bonus() -> f64 {
    1.0
}
fn default_rep() -> String {
    "hindsight".into()
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        Self { base: default_base(), bonus_scale: default_bonus(), rep: default_rep() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    pub seeds: Vec<u64>,
    /// Family member the adversary picked; drawn per seed when absent.
    #[serde(default)]
    pub member: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardnessSpec {
    pub family_sizes: Vec<usize>,
    pub draws: usize,
    pub risk_target: f64,
    pub episode_cap: usize,
    #[serde(default)]
    pub oracle: bool,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, LabError> {
        let text = fs::read_to_string(path).map_err(|e| LabError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| LabError::Config {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.v != SCHEMA_VERSION {
            return Err(LabError::Config {
                path: "v".into(),
                msg: format!("unsupported schema version {}", self.v),
            });
        }
        if self.protocol.seeds.is_empty() {
            return Err(LabError::Config {
                path: "protocol.seeds".into(),
                msg: "at least one seed required".into(),
            });
        }
        if self.protocol.epochs == 0 || self.protocol.episodes_per_epoch == 0 {
            return Err(LabError::Config {
                path: "protocol.epochs".into(),
                msg: "epochs and episodes_per_epoch must be positive".into(),
            });
        }
        match self.algorithm.rep.as_str() {
            "hindsight" => {}
            "selfpredict" => {
                if self.protocol.gamma.map(|g| g > 0.0) != Some(true) {
                    return Err(LabError::Config {
                        path: "protocol.gamma".into(),
                        msg: "selfpredict mode requires gamma > 0".into(),
                    });
                }
            }
            other => {
                return Err(LabError::Config {
                    path: "algorithm.rep".into(),
                    msg: format!("unknown representation learner '{other}'"),
                })
            }
        }
        if self.algorithm.base != "ucbvi" {
            return Err(LabError::Config {
                path: "algorithm.base".into(),
                msg: format!("unknown base algorithm '{}'", self.algorithm.base),
            });
        }
        if self.kind == ExperimentKind::Hardness && self.hardness.is_none() {
            return Err(LabError::Config {
                path: "hardness".into(),
                msg: "hardness experiments need a hardness section".into(),
            });
        }
        if let EnvSpec::Path { path } = &self.env {
            if !Path::new(path).exists() {
                return Err(LabError::Config {
                    path: "env.path".into(),
                    msg: format!("file '{path}' does not exist"),
                });
            }
        }
        Ok(())
    }
}

/// Build the environment bundle named by a config.
pub fn build_env(spec: &EnvSpec, seed: u64) -> Result<EnvBundle, LabError> {
    match spec {
        EnvSpec::Tree { n } => make_tree_env(*n),
        EnvSpec::Cb { n } => make_cb_env(*n),
        EnvSpec::Lock { horizon, decoys } => {
            let mut rng = substream(seed, "env-gen");
            make_combination_lock(*horizon, *decoys, &mut rng)
        }
        EnvSpec::RandomPushforward {
            states,
            observations,
            actions,
            horizon,
            mix,
            models,
            decoders,
        } => {
            let mut rng = substream(seed, "env-gen");
            make_random_pushforward_env(
                *states,
                *observations,
                *actions,
                *horizon,
                *mix,
                *models,
                *decoders,
                &mut rng,
            )
        }
        EnvSpec::Path { path } => {
            let text = fs::read_to_string(path)?;
            let bundle: EnvBundle = serde_json::from_str(&text)?;
            bundle.validate()?;
            Ok(bundle)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub v: u32,
    pub run_id: String,
    pub name: String,
    pub mode: String,
    pub env: String,
    pub n: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub member: usize,
    pub mixture_risk: f64,
    pub mixture_risk_mc: f64,
    pub est_class: f64,
    pub episodes_deployed: usize,
    pub wall_ms: u128,
    pub csv_path: String,
}

/// Execute one seeded run of an o2l experiment.
pub fn run_o2l_once(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(O2lOutcome, EnvBundle, usize), LabError> {
    let bundle = build_env(&cfg.env, seed)?;
    let member_idx = match cfg.protocol.member {
        Some(m) => m,
        None => substream(seed, "member").random_range(0..bundle.num_members()),
    };
    let member = bundle.member(member_idx)?;
    let mode = match cfg.algorithm.rep.as_str() {
        "hindsight" => RepMode::Hindsight,
        _ => RepMode::SelfPredictive,
    };
    let empty: Vec<crate::mdp::TabularMDP> = Vec::new();
    let inputs = O2lInputs {
        latent: &member,
        decoders: &bundle.decoders,
        model_class: &bundle.model_class,
        mismatch_complete: bundle.mismatch_complete.as_deref().unwrap_or(&empty),
    };
    let protocol = ProtocolConfig {
        epochs: cfg.protocol.epochs,
        episodes_per_epoch: cfg.protocol.episodes_per_epoch,
        mode,
        gamma: cfg.protocol.gamma,
        classifier_feed: ClassifierFeed::SampledEpisode,
    };
    let base = &bundle.base;
    let (s_n, a_n, h_n) = (base.num_states, base.num_actions, base.horizon);
    let bonus = cfg.algorithm.bonus_scale;
    let mut factory =
        move || Box::new(ucbvi_base(s_n, a_n, h_n, bonus)) as Box<dyn BaseAlgorithm>;
    let mut rng = substream(seed, "protocol");
    let outcome = o2l_run(&inputs, &mut factory, &protocol, &mut rng)?;
    Ok((outcome, bundle, member_idx))
}

fn fmt_gamma(g: Option<f64>) -> String {
    g.map(|v| v.to_string()).unwrap_or_default()
}

/// Write the per-episode CSV for one run. `timing` controls whether the
/// wall-clock column carries real measurements; leaving it off keeps repeat
/// runs byte-identical.
pub fn write_run_csv(
    path: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    outcome: &O2lOutcome,
    wall_ms: u128,
    timing: bool,
) -> Result<(), LabError> {
    let mut out = String::new();
    out.push_str(
        "run_id,mode,env,N,T,K,gamma,seed,t,k,episode_return,exact_risk,class_mistakes_cum,selfpred_objective,wall_ms\n",
    );
    let run_id = format!("{}-{}", cfg.name, seed);
    let env_name = env_label(&cfg.env);
    let n = env_n(&cfg.env);
    for r in &outcome.records {
        let wall = if timing { wall_ms } else { 0 };
        out.push_str(&format!(
            "{run_id},{mode},{env_name},{n},{t_n},{k_n},{gamma},{seed},{t},{k},{ret},{risk},{cls},{obj},{wall}\n",
            mode = cfg.algorithm.rep,
            t_n = cfg.protocol.epochs,
            k_n = cfg.protocol.episodes_per_epoch,
            gamma = fmt_gamma(cfg.protocol.gamma),
            t = r.t,
            k = r.k,
            ret = r.episode_return,
            risk = r.exact_risk,
            cls = r.class_mistakes_cum,
            obj = r.selfpred_objective,
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn env_label(spec: &EnvSpec) -> String {
    match spec {
        EnvSpec::Tree { .. } => "tree".into(),
        EnvSpec::Cb { .. } => "cb".into(),
        EnvSpec::Lock { .. } => "lock".into(),
        EnvSpec::RandomPushforward { .. } => "random_pushforward".into(),
        EnvSpec::Path { path } => path.clone(),
    }
}

pub fn env_n(spec: &EnvSpec) -> usize {
    match spec {
        EnvSpec::Tree { n } | EnvSpec::Cb { n } => *n,
        EnvSpec::Lock { horizon, .. } => *horizon,
        EnvSpec::RandomPushforward { states, .. } => *states,
        EnvSpec::Path { .. } => 0,
    }
}

/// Run every seed of a config, writing one CSV and one summary JSON per
/// seed, and return the summaries ordered by seed.
pub fn cli_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    timing: bool,
) -> Result<Vec<RunSummary>, LabError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    match cfg.kind {
        ExperimentKind::O2l => {
            let summaries: Vec<Result<RunSummary, LabError>> = cfg
                .protocol
                .seeds
                .par_iter()
                .map(|&seed| {
                    let started = Instant::now();
                    let (outcome, _bundle, member) = run_o2l_once(cfg, seed)?;
                    let wall_ms = started.elapsed().as_millis();
                    let csv_path = out_dir.join(format!("{}_seed{}.csv", cfg.name, seed));
                    write_run_csv(&csv_path, cfg, seed, &outcome, wall_ms, timing)?;
                    if !outcome.selfpred_rows.is_empty() {
                        let jpath =
                            out_dir.join(format!("{}_seed{}_selfpred.jsonl", cfg.name, seed));
                        let mut file = fs::File::create(&jpath)?;
                        for row in &outcome.selfpred_rows {
                            writeln!(file, "{}", serde_json::to_string(row)?)?;
                        }
                    }
                    let summary = RunSummary {
                        v: SCHEMA_VERSION,
                        run_id: format!("{}-{}", cfg.name, seed),
                        name: cfg.name.clone(),
                        mode: cfg.algorithm.rep.clone(),
                        env: env_label(&cfg.env),
                        n: env_n(&cfg.env),
                        epochs: cfg.protocol.epochs,
                        episodes_per_epoch: cfg.protocol.episodes_per_epoch,
                        gamma: cfg.protocol.gamma,
                        seed,
                        member,
                        mixture_risk: outcome.mixture_risk,
                        mixture_risk_mc: outcome.mixture_risk_mc,
                        est_class: outcome.est_class,
                        episodes_deployed: outcome.episodes_deployed,
                        wall_ms: if timing { wall_ms } else { 0 },
                        csv_path: csv_path.display().to_string(),
                    };
                    let spath = out_dir.join(format!("{}_seed{}_summary.json", cfg.name, seed));
                    fs::write(&spath, serde_json::to_string_pretty(&summary)?)?;
                    Ok(summary)
                })
                .collect();
            summaries.into_iter().collect()
        }
        ExperimentKind::Hardness => {
            let spec = cfg.hardness.as_ref().expect("validated");
            let summaries: Vec<Result<RunSummary, LabError>> = cfg
                .protocol
                .seeds
                .par_iter()
                .map(|&seed| {
                    let started = Instant::now();
                    let mut rng = substream(seed, "hardness");
                    let arms = hardness_probe(
                        &spec.family_sizes,
                        spec.draws,
                        spec.risk_target,
                        spec.episode_cap,
                        spec.oracle,
                        &mut rng,
                    )?;
                    let wall_ms = started.elapsed().as_millis();
                    let csv_path = out_dir.join(format!("{}_seed{}.csv", cfg.name, seed));
                    let mut out = String::from("run_id,seed,N,draw,episodes_to_target,capped\n");
                    for arm in &arms {
                        for (d, ep) in arm.episodes.iter().enumerate() {
                            out.push_str(&format!(
                                "{}-{},{},{},{},{},{}\n",
                                cfg.name,
                                seed,
                                seed,
                                arm.n,
                                d,
                                ep.unwrap_or(spec.episode_cap),
                                ep.is_none()
                            ));
                        }
                    }
                    fs::write(&csv_path, out)?;
                    let medians: Vec<f64> = arms.iter().map(|a| a.median_episodes).collect();
                    let summary = RunSummary {
                        v: SCHEMA_VERSION,
                        run_id: format!("{}-{}", cfg.name, seed),
                        name: cfg.name.clone(),
                        mode: "hardness".into(),
                        env: env_label(&cfg.env),
                        n: env_n(&cfg.env),
                        epochs: spec.episode_cap,
                        episodes_per_epoch: spec.draws,
                        gamma: None,
                        seed,
                        member: 0,
                        mixture_risk: medians.last().copied().unwrap_or(f64::NAN),
                        mixture_risk_mc: f64::NAN,
                        est_class: 0.0,
                        episodes_deployed: 0,
                        wall_ms: if timing { wall_ms } else { 0 },
                        csv_path: csv_path.display().to_string(),
                    };
                    let spath = out_dir.join(format!("{}_seed{}_summary.json", cfg.name, seed));
                    fs::write(&spath, serde_json::to_string_pretty(&summary)?)?;
                    Ok(summary)
                })
                .collect();
            summaries.into_iter().collect()
        }
    }
}

/// Set a dotted-path field of a config's JSON representation.
pub fn override_config_value(
    cfg: &ExperimentConfig,
    param: &str,
    value: &serde_json::Value,
) -> Result<ExperimentConfig, LabError> {
    let mut tree = serde_json::to_value(cfg)?;
    let parts: Vec<&str> = param.split('.').collect();
    let (leaf, prefix) = parts.split_last().expect("split produces at least one part");
    let mut cursor = &mut tree;
    for part in prefix {
        cursor = cursor
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .ok_or_else(|| LabError::Config {
                path: param.into(),
                msg: format!("unknown field '{part}'"),
            })?;
    }
    let map = cursor.as_object_mut().ok_or_else(|| LabError::Config {
        path: param.into(),
        msg: "parent is not an object".into(),
    })?;
    if !map.contains_key(*leaf) {
        return Err(LabError::Config {
            path: param.into(),
            msg: format!("unknown field '{leaf}'"),
        });
    }
    map.insert((*leaf).to_string(), value.clone());
    let out: ExperimentConfig = serde_json::from_value(tree)?;
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: serde_json::Value,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub runs: usize,
}

/// Run the config once per (value, seed) pair and aggregate the headline
/// metric (mixture risk, or median episodes-to-target for hardness runs).
pub fn cli_sweep(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[serde_json::Value],
    out_dir: &Path,
    timing: bool,
) -> Result<Vec<SweepRow>, LabError> {
    if values.is_empty() {
        return Err(LabError::Config { path: param.into(), msg: "empty sweep values".into() });
    }
    let mut rows = Vec::with_capacity(values.len());
    for (vi, value) in values.iter().enumerate() {
        let mut sub = override_config_value(cfg, param, value)?;
        sub.name = format!("{}_{}{}", cfg.name, param.replace('.', "-"), vi);
        let summaries = cli_run(&sub, out_dir, timing)?;
        let mut metrics: Vec<f64> = summaries.iter().map(|s| s.mixture_risk).collect();
        metrics.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(SweepRow {
            value: value.clone(),
            median: median_of_sorted(&metrics),
            q25: quantile_sorted(&metrics, 0.25),
            q75: quantile_sorted(&metrics, 0.75),
            runs: metrics.len(),
        });
    }
    let table_path = out_dir.join(format!("{}_sweep.json", cfg.name));
    fs::write(&table_path, serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyLine {
    pub v: u32,
    pub instance_seed: u64,
    pub identity_name: String,
    pub max_residual: f64,
    pub pass: bool,
}

/// Run the structural-identity suite and emit one JSONL record per identity
/// per instance. Returns the lines and whether everything passed.
pub fn cli_verify(
    tol: f64,
    num_instances: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(Vec<VerifyLine>, bool), LabError> {
    let results = run_verification_suite(num_instances, seed, tol);
    let mut lines = Vec::new();
    let mut all_pass = true;
    for (instance_seed, report) in &results {
        for id in &report.identities {
            all_pass &= id.pass;
            lines.push(VerifyLine {
                v: SCHEMA_VERSION,
                instance_seed: *instance_seed,
                identity_name: id.name.clone(),
                max_residual: id.max_residual,
                pass: id.pass,
            });
        }
    }
    if let Some(path) = out {
        let mut file = fs::File::create(path)?;
        for line in &lines {
            writeln!(file, "{}", serde_json::to_string(line)?)?;
        }
    }
    Ok((lines, all_pass))
}

/// Write an environment bundle to JSON.
pub fn export_env(spec: &EnvSpec, seed: u64, out: &Path) -> Result<PathBuf, LabError> {
    let mut bundle = build_env(spec, seed)?;
    bundle.seed = seed;
    fs::write(out, serde_json::to_string(&bundle)?)?;
    Ok(out.to_path_buf())
}
