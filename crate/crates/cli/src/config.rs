//! Layered run configuration: TOML file sections, command-line overrides,
//! and per-sampler defaults, resolved into validated experiment settings.
//! Precedence is command line over file over defaults. The manifest written
//! next to every run is itself a complete config file that reproduces the
//! run exactly.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use laber_core::agents::{AgentConfig, GradEstimator, Head, PriorityKind, Sampler, Scaling};
use laber_core::envs::{chain_mdp, gridworld, TabularEnv};
use laber_core::grad::LossKind;

use crate::{CliError, CliResult};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Raw config file contents; every field optional so later layers can tell
/// "unset" from "set to the default value".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run: RunSection,
    pub env: EnvSection,
    pub agent: AgentSection,
    pub diagnostics: DiagSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goal: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traps: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atoms: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_period: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learn_start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_decay_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_weight_normalization: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compute_tv: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<bool>,
}

/// Command-line overrides; each beats the corresponding file key.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub sampler: Option<String>,
    pub m: Option<usize>,
    pub batch_size: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Validated environment choice, buildable on demand.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec {
    Chain {
        n_states: usize,
        slip: f64,
    },
    Grid {
        width: usize,
        height: usize,
        goal: (usize, usize),
        traps: Vec<(usize, usize)>,
    },
}

impl EnvSpec {
    pub fn build(&self) -> CliResult<TabularEnv> {
        match self {
            EnvSpec::Chain { n_states, slip } => Ok(chain_mdp(*n_states, *slip)),
            EnvSpec::Grid {
                width,
                height,
                goal,
                traps,
            } => gridworld(*width, *height, *goal, traps)
                .map_err(|e| usage(format!("env.goal / env.traps: {e}"))),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvSpec::Chain { n_states, .. } => *n_states,
            EnvSpec::Grid { width, height, .. } => width * height,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            EnvSpec::Chain { .. } => 2,
            EnvSpec::Grid { .. } => 4,
        }
    }
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub steps: u64,
    pub seed: u64,
    pub out: PathBuf,
    pub env: EnvSpec,
    pub agent: AgentConfig,
    pub tv_bins: usize,
    pub write_checkpoint: bool,
}

pub fn load_file(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn resolve_env(env: &EnvSection) -> CliResult<EnvSpec> {
    let kind = env.kind.as_deref().unwrap_or("chain");
    let reject = |key: &str, set: bool| -> CliResult<()> {
        if set {
            Err(usage(format!(
                "env.{key} does not apply to env.kind = \"{kind}\""
            )))
        } else {
            Ok(())
        }
    };
    match kind {
        "chain" => {
            reject("width", env.width.is_some())?;
            reject("height", env.height.is_some())?;
            reject("goal", env.goal.is_some())?;
            reject("traps", env.traps.is_some())?;
            let n_states = env.n_states.unwrap_or(10);
            if n_states < 3 {
                return Err(usage(format!(
                    "env.n_states must be at least 3, got {n_states}"
                )));
            }
            let slip = env.slip.unwrap_or(0.0);
            if !(0.0..=0.5).contains(&slip) {
                return Err(usage(format!("env.slip must lie in [0, 0.5], got {slip}")));
            }
            Ok(EnvSpec::Chain { n_states, slip })
        }
        "grid" => {
            reject("n_states", env.n_states.is_some())?;
            reject("slip", env.slip.is_some())?;
            let width = env.width.unwrap_or(5);
            let height = env.height.unwrap_or(5);
            if width * height < 2 {
                return Err(usage("env.width x env.height must cover at least 2 cells"));
            }
            let goal = env.goal.unwrap_or((width - 1, height - 1));
            if goal.0 >= width || goal.1 >= height {
                return Err(usage(format!(
                    "env.goal ({}, {}) outside the {width}x{height} grid",
                    goal.0, goal.1
                )));
            }
            if goal == (0, 0) {
                return Err(usage("env.goal coincides with the start cell (0, 0)"));
            }
            let traps = env.traps.clone().unwrap_or_default();
            for &(x, y) in &traps {
                if x >= width || y >= height {
                    return Err(usage(format!(
                        "env.traps entry ({x}, {y}) outside the {width}x{height} grid"
                    )));
                }
                if (x, y) == (0, 0) {
                    return Err(usage("env.traps must not cover the start cell (0, 0)"));
                }
            }
            Ok(EnvSpec::Grid {
                width,
                height,
                goal,
                traps,
            })
        }
        other => Err(usage(format!(
            "env.kind must be \"chain\" or \"grid\", got \"{other}\""
        ))),
    }
}

fn resolve_sampler(agent: &AgentSection) -> CliResult<Sampler> {
    let scaling_tag = agent.scaling.as_deref().unwrap_or("mean");
    if !matches!(scaling_tag, "mean" | "lazy" | "max") {
        return Err(usage(format!(
            "agent.scaling must be mean, lazy, or max, got \"{scaling_tag}\""
        )));
    }
    let raw = agent.sampler.as_deref().unwrap_or("uniform");
    // Bare combined tags pick up the scaling key.
    let full = match raw {
        "per-laber" | "ger-laber" => format!("{raw}-{scaling_tag}"),
        other => other.to_string(),
    };
    let sampler = Sampler::parse(&full).map_err(|e| usage(format!("agent.sampler: {e}")))?;
    let estimator = match agent.estimator.as_deref().unwrap_or("surrogate") {
        "surrogate" => GradEstimator::Surrogate,
        "exact" => GradEstimator::Exact,
        other => {
            return Err(usage(format!(
                "agent.estimator must be surrogate or exact, got \"{other}\""
            )))
        }
    };
    Ok(sampler.with_estimator(estimator))
}

fn resolve_head(agent: &AgentSection) -> CliResult<(Head, LossKind)> {
    let head_tag = agent.head.as_deref().unwrap_or("dqn");
    match head_tag {
        "dqn" => {
            for (key, set) in [
                ("atoms", agent.atoms.is_some()),
                ("v_min", agent.v_min.is_some()),
                ("v_max", agent.v_max.is_some()),
            ] {
                if set {
                    return Err(usage(format!(
                        "agent.{key} only applies to agent.head = \"c51\""
                    )));
                }
            }
            let loss = match agent.loss.as_deref().unwrap_or("l2") {
                "l2" => LossKind::L2,
                "huber" => LossKind::Huber,
                other => {
                    return Err(usage(format!(
                        "agent.loss must be l2 or huber for the dqn head, got \"{other}\""
                    )))
                }
            };
            Ok((Head::Dqn, loss))
        }
        "c51" => {
            let atoms = agent.atoms.unwrap_or(11);
            let v_min = agent.v_min.unwrap_or(-10.0);
            let v_max = agent.v_max.unwrap_or(10.0);
            let head = Head::c51(v_min, v_max, atoms)
                .map_err(|e| usage(format!("agent.atoms / agent.v_min / agent.v_max: {e}")))?;
            match agent.loss.as_deref().unwrap_or("ce") {
                "ce" => {}
                other => {
                    return Err(usage(format!(
                        "agent.loss must be ce for the c51 head, got \"{other}\""
                    )))
                }
            }
            Ok((head, LossKind::CategoricalCe))
        }
        other => Err(usage(format!(
            "agent.head must be \"dqn\" or \"c51\", got \"{other}\""
        ))),
    }
}

/// Merge overrides, fill defaults, and validate everything. `default_out`
/// names the output directory used when neither layer sets one.
pub fn resolve(mut file: FileConfig, over: &Overrides, default_out: &str) -> CliResult<Resolved> {
    if let Some(seed) = over.seed {
        file.run.seed = Some(seed);
    }
    if let Some(steps) = over.steps {
        file.run.steps = Some(steps);
    }
    if let Some(sampler) = &over.sampler {
        file.agent.sampler = Some(sampler.clone());
    }
    if let Some(m) = over.m {
        file.agent.m = Some(m);
    }
    if let Some(b) = over.batch_size {
        file.agent.batch_size = Some(b);
    }
    if let Some(out) = &over.out {
        file.run.out = Some(out.display().to_string());
    }

    let env = resolve_env(&file.env)?;
    let sampler = resolve_sampler(&file.agent)?;
    let (head, loss) = resolve_head(&file.agent)?;

    let a = &file.agent;
    let batch_size = a.batch_size.unwrap_or(32);
    let large_batch_factor = a.m.unwrap_or(4);
    // Priority-transform defaults follow the sampler: TD-error stores use
    // exponent 0.6 with a tiny floor, gradient-norm stores use the raw
    // norms directly.
    let (default_alpha, default_floor) = match sampler {
        Sampler::Prioritized { kind } | Sampler::PrioritizedLaber { kind, .. } => match kind {
            PriorityKind::TdError => (0.6, 1e-10),
            PriorityKind::GradNorm => (1.0, 0.0),
        },
        _ => (0.6, 1e-10),
    };
    let defaults = AgentConfig::defaults(env.obs_dim(), env.num_actions());
    let agent = AgentConfig {
        obs_dim: env.obs_dim(),
        num_actions: env.num_actions(),
        hidden: a.hidden.clone().unwrap_or(defaults.hidden),
        head,
        loss,
        gamma: a.gamma.unwrap_or(defaults.gamma),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size,
        large_batch_factor,
        buffer_capacity: a.buffer_capacity.unwrap_or(defaults.buffer_capacity),
        target_period: a.target_period.unwrap_or(defaults.target_period),
        learn_start: a
            .learn_start
            .unwrap_or_else(|| batch_size.max(batch_size * large_batch_factor)),
        train_every: a.train_every.unwrap_or(defaults.train_every),
        epsilon_start: a.epsilon_start.unwrap_or(defaults.epsilon_start),
        epsilon_end: a.epsilon_end.unwrap_or(defaults.epsilon_end),
        epsilon_decay_steps: a
            .epsilon_decay_steps
            .unwrap_or(defaults.epsilon_decay_steps),
        priority_alpha: a.alpha.unwrap_or(default_alpha),
        priority_floor: a.floor.unwrap_or(default_floor),
        max_weight_normalization: a
            .max_weight_normalization
            .unwrap_or(defaults.max_weight_normalization),
        optimizer: defaults.optimizer,
        sampler,
        compute_tv: file.diagnostics.compute_tv.unwrap_or(false),
        seed: file.run.seed.unwrap_or(0),
    };
    agent
        .validate()
        .map_err(|e| usage(format!("agent config: {e}")))?;
    // Environment construction re-checks spatial constraints (goal/trap
    // overlap) that the section-level checks cannot see.
    env.build()?;

    let tv_bins = file.diagnostics.tv_bins.unwrap_or(20);
    if tv_bins == 0 {
        return Err(usage("diagnostics.tv_bins must be positive"));
    }
    Ok(Resolved {
        steps: file.run.steps.unwrap_or(10_000),
        seed: agent.seed,
        out: PathBuf::from(
            file.run
                .out
                .clone()
                .unwrap_or_else(|| default_out.to_string()),
        ),
        env,
        agent,
        tv_bins,
        write_checkpoint: file.diagnostics.checkpoint.unwrap_or(true),
    })
}

/// Complete config file reproducing `resolved`, every key explicit.
pub fn manifest(resolved: &Resolved) -> FileConfig {
    let (scaling, estimator) = match resolved.agent.sampler {
        Sampler::Laber { scaling, estimator }
        | Sampler::PrioritizedLaber {
            scaling, estimator, ..
        } => (scaling, estimator),
        _ => (Scaling::Mean, GradEstimator::Surrogate),
    };
    let (head_tag, atoms, v_min, v_max, loss_tag) = match &resolved.agent.head {
        Head::Dqn => (
            "dqn",
            None,
            None,
            None,
            match resolved.agent.loss {
                LossKind::Huber => "huber",
                _ => "l2",
            },
        ),
        Head::C51 { support } => (
            "c51",
            Some(support.len()),
            Some(support[0]),
            Some(*support.last().unwrap()),
            "ce",
        ),
    };
    let env = match &resolved.env {
        EnvSpec::Chain { n_states, slip } => EnvSection {
            kind: Some("chain".into()),
            n_states: Some(*n_states),
            slip: Some(*slip),
            ..EnvSection::default()
        },
        EnvSpec::Grid {
            width,
            height,
            goal,
            traps,
        } => EnvSection {
            kind: Some("grid".into()),
            width: Some(*width),
            height: Some(*height),
            goal: Some(*goal),
            traps: Some(traps.clone()),
            ..EnvSection::default()
        },
    };
    let a = &resolved.agent;
    FileConfig {
        run: RunSection {
            steps: Some(resolved.steps),
            seed: Some(resolved.seed),
            out: Some(resolved.out.display().to_string()),
        },
        env,
        agent: AgentSection {
            sampler: Some(a.sampler.label()),
            scaling: Some(scaling.tag().into()),
            estimator: Some(
                match estimator {
                    GradEstimator::Surrogate => "surrogate",
                    GradEstimator::Exact => "exact",
                }
                .into(),
            ),
            hidden: Some(a.hidden.clone()),
            head: Some(head_tag.into()),
            atoms,
            v_min,
            v_max,
            loss: Some(loss_tag.into()),
            gamma: Some(a.gamma),
            learning_rate: Some(a.learning_rate),
            batch_size: Some(a.batch_size),
            m: Some(a.large_batch_factor),
            buffer_capacity: Some(a.buffer_capacity),
            target_period: Some(a.target_period),
            learn_start: Some(a.learn_start),
            train_every: Some(a.train_every),
            epsilon_start: Some(a.epsilon_start),
            epsilon_end: Some(a.epsilon_end),
            epsilon_decay_steps: Some(a.epsilon_decay_steps),
            alpha: Some(a.priority_alpha),
            floor: Some(a.priority_floor),
            max_weight_normalization: Some(a.max_weight_normalization),
        },
        diagnostics: DiagSection {
            compute_tv: Some(a.compute_tv),
            tv_bins: Some(resolved.tv_bins),
            checkpoint: Some(resolved.write_checkpoint),
        },
    }
}

pub fn write_manifest(resolved: &Resolved, path: &Path) -> CliResult<()> {
    let text = toml::to_string_pretty(&manifest(resolved))
        .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a half-open seed range "a..b".
pub fn parse_seed_range(s: &str) -> CliResult<std::ops::Range<u64>> {
    let parts: Vec<&str> = s.split("..").collect();
    let bad = || {
        usage(format!(
            "--seeds expects a half-open range like 0..10, got \"{s}\""
        ))
    };
    if parts.len() != 2 {
        return Err(bad());
    }
    let a: u64 = parts[0].parse().map_err(|_| bad())?;
    let b: u64 = parts[1].parse().map_err(|_| bad())?;
    if a >= b {
        return Err(usage(format!("--seeds range {s} is empty")));
    }
    Ok(a..b)
}
