//! Flat `key = value` experiment files.
//!
//! ```text
//! # comment
//! [environment]
//! env = lava_path
//! [lambda]
//! lambda_mode = fixed
//! lambda = 0.4
//! ```
//!
//! Section headers are optional and purely organisational, but must be one of
//! the known names. Every key may appear at most once. Omitted keys take the
//! [`ExperimentConfig::default`] values. `lambda` is required when
//! `lambda_mode` is `fixed` or `retrace`; `is_clip` (default 1) only applies
//! to `importance_sampling`.
//!
//! Any key can be overridden through an environment variable named `ATD_`
//! followed by the upper-cased key, e.g. `ATD_TOTAL_ENV_STEPS=5000`.

use std::collections::HashMap;
use std::fmt::Write as _;

use atd_core::buffers::{CacheMode, InsertionMode};
use atd_core::config::{EnvKind, ExperimentConfig, LambdaMode, LearnerKind, MixerKind};

use crate::error::{LabError, LabResult};

pub const ENV_PREFIX: &str = "ATD_";

pub const SECTIONS: [&str; 6] = ["environment", "learner", "actor_critic", "lambda", "replay", "run"];

/// Every accepted key with its section, in rendering order.
pub const KEYS: [(&str, &str); 44] = [
    ("environment", "env"),
    ("environment", "partial_obs"),
    ("environment", "spread_agents"),
    ("environment", "spread_targets"),
    ("environment", "spread_grid"),
    ("environment", "spread_episode_limit"),
    ("environment", "gamma"),
    ("learner", "learner"),
    ("learner", "mixer"),
    ("learner", "recurrent"),
    ("learner", "hidden_dim"),
    ("learner", "mixing_embed_dim"),
    ("learner", "hypernet_embed"),
    ("learner", "lr"),
    ("learner", "optim_alpha"),
    ("learner", "optim_eps"),
    ("learner", "grad_norm_clip"),
    ("learner", "batch_size"),
    ("learner", "target_update_interval"),
    ("learner", "epsilon_start"),
    ("learner", "epsilon_finish"),
    ("learner", "epsilon_anneal_time"),
    ("actor_critic", "critic_lr"),
    ("actor_critic", "ppo_clip"),
    ("actor_critic", "gae_lambda"),
    ("actor_critic", "ppo_epochs"),
    ("actor_critic", "rollout_episodes"),
    ("actor_critic", "entropy_coef"),
    ("lambda", "lambda_mode"),
    ("lambda", "lambda"),
    ("lambda", "is_clip"),
    ("lambda", "ratio_lr"),
    ("lambda", "ratio_batch"),
    ("lambda", "ratio_hidden"),
    ("lambda", "ratio_update_sync"),
    ("replay", "buffer_size"),
    ("replay", "buffer_ratio"),
    ("replay", "insertion_mode"),
    ("replay", "cache_mode"),
    ("replay", "cache_frequency"),
    ("run", "total_env_steps"),
    ("run", "eval_interval"),
    ("run", "eval_episodes"),
    ("run", "seeds"),
];

fn is_key(k: &str) -> bool {
    KEYS.iter().any(|(_, key)| *key == k)
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_f64(v: &str) -> Result<f64, String> {
    v.replace('_', "")
        .parse::<f64>()
        .map_err(|_| format!("expected a number, got `{v}`"))
}

/// Integers also accept exact scientific notation such as `2e5`.
fn parse_u64(v: &str) -> Result<u64, String> {
    let clean = v.replace('_', "");
    if let Ok(n) = clean.parse::<u64>() {
        return Ok(n);
    }
    match clean.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < u64::MAX as f64 => Ok(x as u64),
        _ => Err(format!("expected a non-negative integer, got `{v}`")),
    }
}

fn parse_usize(v: &str) -> Result<usize, String> {
    parse_u64(v).and_then(|n| usize::try_from(n).map_err(|_| format!("`{v}` is too large")))
}

pub fn parse_seed_list(v: &str) -> Result<Vec<u64>, String> {
    let seeds = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_u64)
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err("seed list must not be empty".into());
    }
    Ok(seeds)
}

fn choice<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T, String> {
    options
        .iter()
        .find(|(name, _)| *name == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("expected one of {}, got `{v}`", names.join(", "))
        })
}

/// The λ settings arrive as up to three separate keys.
#[derive(Default)]
struct LambdaKeys {
    mode: Option<(String, usize)>,
    lambda: Option<(f64, usize)>,
    is_clip: Option<(f64, usize)>,
}

fn apply(cfg: &mut ExperimentConfig, lam: &mut LambdaKeys, key: &str, v: &str, line: usize) -> Result<(), String> {
    match key {
        "env" => cfg.env = choice(v, &[("lava_path", EnvKind::LavaPath), ("spread", EnvKind::Spread)])?,
        "partial_obs" => cfg.partial_obs = parse_bool(v)?,
        "spread_agents" => cfg.spread_agents = parse_usize(v)?,
        "spread_targets" => cfg.spread_targets = parse_usize(v)?,
        "spread_grid" => cfg.spread_grid = parse_usize(v)?,
        "spread_episode_limit" => cfg.spread_episode_limit = parse_usize(v)?,
        "gamma" => cfg.gamma = parse_f64(v)?,
        "learner" => {
            cfg.learner = choice(
                v,
                &[("value_mix", LearnerKind::ValueMix), ("actor_critic", LearnerKind::ActorCritic)],
            )?
        }
        "mixer" => cfg.mixer = choice(v, &[("vdn", MixerKind::Vdn), ("qmix", MixerKind::Qmix)])?,
        "recurrent" => cfg.recurrent = parse_bool(v)?,
        "hidden_dim" => cfg.hidden_dim = parse_usize(v)?,
        "mixing_embed_dim" => cfg.mixing_embed_dim = parse_usize(v)?,
        "hypernet_embed" => cfg.hypernet_embed = parse_usize(v)?,
        "lr" => cfg.lr = parse_f64(v)?,
        "optim_alpha" => cfg.optim_alpha = parse_f64(v)?,
        "optim_eps" => cfg.optim_eps = parse_f64(v)?,
        "grad_norm_clip" => cfg.grad_norm_clip = parse_f64(v)?,
        "batch_size" => cfg.batch_size = parse_usize(v)?,
        "target_update_interval" => cfg.target_update_interval = parse_usize(v)?,
        "epsilon_start" => cfg.epsilon_start = parse_f64(v)?,
        "epsilon_finish" => cfg.epsilon_finish = parse_f64(v)?,
        "epsilon_anneal_time" => cfg.epsilon_anneal_time = parse_u64(v)?,
        "critic_lr" => cfg.critic_lr = parse_f64(v)?,
        "ppo_clip" => cfg.ppo_clip = parse_f64(v)?,
        "gae_lambda" => cfg.gae_lambda = parse_f64(v)?,
        "ppo_epochs" => cfg.ppo_epochs = parse_usize(v)?,
        "rollout_episodes" => cfg.rollout_episodes = parse_usize(v)?,
        "entropy_coef" => cfg.entropy_coef = parse_f64(v)?,
        "lambda_mode" => {
            choice(v, &[("adaptive", ()), ("fixed", ()), ("retrace", ()), ("importance_sampling", ())])?;
            lam.mode = Some((v.to_string(), line));
        }
        "lambda" => lam.lambda = Some((parse_f64(v)?, line)),
        "is_clip" => lam.is_clip = Some((parse_f64(v)?, line)),
        "ratio_lr" => cfg.ratio_lr = parse_f64(v)?,
        "ratio_batch" => cfg.ratio_batch = parse_usize(v)?,
        "ratio_hidden" => cfg.ratio_hidden = parse_usize(v)?,
        "ratio_update_sync" => cfg.ratio_update_sync = parse_usize(v)?,
        "buffer_size" => cfg.buffer_size = parse_usize(v)?,
        "buffer_ratio" => cfg.buffer_ratio = parse_usize(v)?,
        "insertion_mode" => {
            cfg.insertion_mode = choice(
                v,
                &[("dual_insert", InsertionMode::DualInsert), ("cascade", InsertionMode::Cascade)],
            )?
        }
        "cache_mode" => {
            cfg.cache_mode = choice(v, &[("clear", CacheMode::Clear), ("reset_to_zero", CacheMode::ResetToZero)])?
        }
        "cache_frequency" => cfg.cache_frequency = parse_f64(v)?,
        "total_env_steps" => cfg.total_env_steps = parse_u64(v)?,
        "eval_interval" => cfg.eval_interval = parse_u64(v)?,
        "eval_episodes" => cfg.eval_episodes = parse_usize(v)?,
        "seeds" => cfg.seeds = parse_seed_list(v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

fn resolve_lambda(lam: &LambdaKeys) -> LabResult<Option<LambdaMode>> {
    let Some((mode, mode_line)) = &lam.mode else {
        if let Some((_, line)) = lam.lambda.or(lam.is_clip) {
            return Err(LabError::config(line, "lambda and is_clip require lambda_mode"));
        }
        return Ok(None);
    };
    let stray = |key: &str, at: Option<(f64, usize)>| match at {
        Some((_, line)) => Err(LabError::config(line, format!("{key} does not apply to lambda_mode {mode}"))),
        None => Ok(()),
    };
    let mode = match mode.as_str() {
        "adaptive" => {
            stray("lambda", lam.lambda)?;
            stray("is_clip", lam.is_clip)?;
            LambdaMode::Adaptive
        }
        "fixed" | "retrace" => {
            stray("is_clip", lam.is_clip)?;
            let (l, _) = lam
                .lambda
                .ok_or_else(|| LabError::config(*mode_line, format!("lambda_mode {mode} requires `lambda`")))?;
            if mode == "fixed" {
                LambdaMode::Fixed(l)
            } else {
                LambdaMode::Retrace(l)
            }
        }
        _ => {
            stray("lambda", lam.lambda)?;
            LambdaMode::ImportanceSampling(lam.is_clip.map_or(1.0, |(c, _)| c))
        }
    };
    Ok(Some(mode))
}

/// Line of the key that a validation message names, 0 if none.
fn line_for(message: &str, lines: &HashMap<String, usize>) -> usize {
    let body = message.split("config: ").nth(1).unwrap_or(message);
    let first = body.split_whitespace().next().unwrap_or("");
    let key = match first {
        "epsilon" => "epsilon_start",
        "seed" => "seeds",
        "actor_critic" => "lambda_mode",
        "lambda" if !lines.contains_key("lambda") => "lambda_mode",
        k => k,
    };
    lines.get(key).copied().unwrap_or(0)
}

/// Parse and validate a config body, then apply `overrides` (already
/// stripped of the environment prefix and lower-cased).
pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> LabResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut lam = LambdaKeys::default();
    let mut lines: HashMap<String, usize> = HashMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| LabError::config(line, format!("malformed section header `{content}`")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(LabError::config(line, format!("unknown section [{name}]")));
            }
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| LabError::config(line, format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !is_key(key) {
            return Err(LabError::config(line, format!("unknown key `{key}`")));
        }
        if let Some(prev) = lines.insert(key.to_string(), line) {
            return Err(LabError::config(line, format!("duplicate key `{key}` (first set on line {prev})")));
        }
        apply(&mut cfg, &mut lam, key, value, line).map_err(|m| LabError::config(line, format!("{key}: {m}")))?;
    }

    for (key, value) in overrides {
        if !is_key(key) {
            return Err(LabError::config(
                0,
                format!("unknown key `{key}` in {ENV_PREFIX}{}", key.to_uppercase()),
            ));
        }
        lines.insert(key.clone(), 0);
        apply(&mut cfg, &mut lam, key, value, 0)
            .map_err(|m| LabError::config(0, format!("{ENV_PREFIX}{}: {m}", key.to_uppercase())))?;
    }

    if let Some(mode) = resolve_lambda(&lam)? {
        cfg.lambda_mode = mode;
    }
    cfg.validate().map_err(|e| {
        let message = e.to_string();
        LabError::config(line_for(&message, &lines), message)
    })?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> LabResult<ExperimentConfig> {
    parse_with_overrides(text, &[])
}

/// `ATD_*` variables from `vars`, keyed by lower-cased config key.
pub fn overrides_from(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_lowercase(), v)))
        .collect();
    out.sort();
    out
}

/// Parse with overrides from the process environment.
pub fn parse_config_with_env(text: &str) -> LabResult<ExperimentConfig> {
    parse_with_overrides(text, &overrides_from(std::env::vars()))
}

fn enum_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Canonical text form; `parse_config(&render_config(c)) == c` for any valid `c`.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let value = |key: &str| -> Option<String> {
        Some(match key {
            "env" => enum_name(&cfg.env),
            "partial_obs" => cfg.partial_obs.to_string(),
            "spread_agents" => cfg.spread_agents.to_string(),
            "spread_targets" => cfg.spread_targets.to_string(),
            "spread_grid" => cfg.spread_grid.to_string(),
            "spread_episode_limit" => cfg.spread_episode_limit.to_string(),
            "gamma" => cfg.gamma.to_string(),
            "learner" => enum_name(&cfg.learner),
            "mixer" => enum_name(&cfg.mixer),
            "recurrent" => cfg.recurrent.to_string(),
            "hidden_dim" => cfg.hidden_dim.to_string(),
            "mixing_embed_dim" => cfg.mixing_embed_dim.to_string(),
            "hypernet_embed" => cfg.hypernet_embed.to_string(),
            "lr" => cfg.lr.to_string(),
            "optim_alpha" => cfg.optim_alpha.to_string(),
            "optim_eps" => cfg.optim_eps.to_string(),
            "grad_norm_clip" => cfg.grad_norm_clip.to_string(),
            "batch_size" => cfg.batch_size.to_string(),
            "target_update_interval" => cfg.target_update_interval.to_string(),
            "epsilon_start" => cfg.epsilon_start.to_string(),
            "epsilon_finish" => cfg.epsilon_finish.to_string(),
            "epsilon_anneal_time" => cfg.epsilon_anneal_time.to_string(),
            "critic_lr" => cfg.critic_lr.to_string(),
            "ppo_clip" => cfg.ppo_clip.to_string(),
            "gae_lambda" => cfg.gae_lambda.to_string(),
            "ppo_epochs" => cfg.ppo_epochs.to_string(),
            "rollout_episodes" => cfg.rollout_episodes.to_string(),
            "entropy_coef" => cfg.entropy_coef.to_string(),
            "lambda_mode" => match cfg.lambda_mode {
                LambdaMode::Adaptive => "adaptive".into(),
                LambdaMode::Fixed(_) => "fixed".into(),
                LambdaMode::Retrace(_) => "retrace".into(),
                LambdaMode::ImportanceSampling(_) => "importance_sampling".into(),
            },
            "lambda" => match cfg.lambda_mode {
                LambdaMode::Fixed(l) | LambdaMode::Retrace(l) => l.to_string(),
                _ => return None,
            },
            "is_clip" => match cfg.lambda_mode {
                LambdaMode::ImportanceSampling(c) => c.to_string(),
                _ => return None,
            },
            "ratio_lr" => cfg.ratio_lr.to_string(),
            "ratio_batch" => cfg.ratio_batch.to_string(),
            "ratio_hidden" => cfg.ratio_hidden.to_string(),
            "ratio_update_sync" => cfg.ratio_update_sync.to_string(),
            "buffer_size" => cfg.buffer_size.to_string(),
            "buffer_ratio" => cfg.buffer_ratio.to_string(),
            "insertion_mode" => match cfg.insertion_mode {
                InsertionMode::DualInsert => "dual_insert".into(),
                InsertionMode::Cascade => "cascade".into(),
            },
            "cache_mode" => match cfg.cache_mode {
                CacheMode::Clear => "clear".into(),
                CacheMode::ResetToZero => "reset_to_zero".into(),
            },
            "cache_frequency" => cfg.cache_frequency.to_string(),
            "total_env_steps" => cfg.total_env_steps.to_string(),
            "eval_interval" => cfg.eval_interval.to_string(),
            "eval_episodes" => cfg.eval_episodes.to_string(),
            "seeds" => cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "),
            _ => return None,
        })
    };
    let mut out = String::new();
    for section in SECTIONS {
        let _ = writeln!(out, "[{section}]");
        for (_, key) in KEYS.iter().filter(|(s, _)| *s == section) {
            if let Some(v) = value(key) {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(err: LabError) -> (usize, String) {
        match err {
            LabError::Config { line, message } => (line, message),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_body_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
        assert_eq!(parse_config("# only a comment\n\n[run]\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn fixed_lambda_out_of_range_is_rejected() {
        let (line, msg) = line_of(parse_config("lambda_mode = fixed\nlambda = 1.5\n").unwrap_err());
        assert_eq!(line, 2);
        assert!(msg.contains("lambda must lie in [0, 1]"), "{msg}");
    }

    #[test]
    fn fixed_requires_lambda() {
        let (line, msg) = line_of(parse_config("[lambda]\nlambda_mode = retrace\n").unwrap_err());
        assert_eq!(line, 2);
        assert!(msg.contains("requires"));
    }

    #[test]
    fn unknown_and_duplicate_keys_carry_lines() {
        let (line, msg) = line_of(parse_config("gamma = 0.9\nfoo = 1\n").unwrap_err());
        assert_eq!((line, msg.contains("unknown key `foo`")), (2, true));
        let (line, msg) = line_of(parse_config("lr = 0.1\n\nlr = 0.2\n").unwrap_err());
        assert_eq!((line, msg.contains("duplicate")), (3, true));
        let (line, _) = line_of(parse_config("[bogus]\n").unwrap_err());
        assert_eq!(line, 1);
        let (line, _) = line_of(parse_config("\nbatch_size = many\n").unwrap_err());
        assert_eq!(line, 2);
    }

    #[test]
    fn validation_errors_point_at_the_key() {
        let (line, _) = line_of(parse_config("lr = 0.1\ngamma = 1.0\n").unwrap_err());
        assert_eq!(line, 2);
    }

    #[test]
    fn buffer_ratio_sets_on_capacity() {
        let cfg = parse_config("buffer_size = 500\nbuffer_ratio = 50\n").unwrap();
        let buf = atd_core::buffers::DualBuffer::new(
            cfg.buffer_size,
            cfg.buffer_ratio,
            cfg.insertion_mode,
            cfg.cache_mode,
        );
        use atd_core::buffers::StoreKind;
        assert_eq!(buf.store(StoreKind::On).capacity(), 10);
        assert_eq!(buf.store(StoreKind::Off).capacity(), 500);
    }

    #[test]
    fn lambda_mode_variants() {
        assert_eq!(
            parse_config("lambda_mode = importance_sampling\n").unwrap().lambda_mode,
            LambdaMode::ImportanceSampling(1.0)
        );
        assert_eq!(
            parse_config("lambda_mode = importance_sampling\nis_clip = 2\n").unwrap().lambda_mode,
            LambdaMode::ImportanceSampling(2.0)
        );
        assert!(parse_config("lambda_mode = adaptive\nlambda = 0.3\n").is_err());
        assert!(parse_config("lambda = 0.3\n").is_err());
        assert!(parse_config("lambda_mode = sometimes\n").is_err());
    }

    #[test]
    fn integers_accept_scientific_notation() {
        let cfg = parse_config("total_env_steps = 2e5\nseeds = 0, 1,2\n").unwrap();
        assert_eq!(cfg.total_env_steps, 200_000);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert!(parse_config("total_env_steps = 2.5\n").is_err());
    }

    #[test]
    fn environment_overrides_apply_last() {
        let ov = overrides_from(vec![
            ("ATD_GAMMA".to_string(), "0.5".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ]);
        assert_eq!(ov, vec![("gamma".to_string(), "0.5".to_string())]);
        let cfg = parse_with_overrides("gamma = 0.9\n", &ov).unwrap();
        assert_eq!(cfg.gamma, 0.5);
        let bad = vec![("nope".to_string(), "1".to_string())];
        assert!(parse_with_overrides("", &bad).is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
        cfg.lambda_mode = LambdaMode::Retrace(0.3);
        cfg.env = EnvKind::Spread;
        cfg.learner = LearnerKind::ValueMix;
        cfg.insertion_mode = InsertionMode::Cascade;
        cfg.cache_mode = CacheMode::ResetToZero;
        cfg.lr = 1.0 / 3.0;
        cfg.seeds = vec![4, 9];
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
        cfg.lambda_mode = LambdaMode::ImportanceSampling(0.7);
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }
}
