//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `ATDCKPT1`, a little-endian `u32` format
//! version, a little-endian `u32` manifest length, the UTF-8 JSON manifest,
//! then every tensor listed in the manifest as row-major little-endian
//! `f64` values in manifest order.
//!
//! The manifest holds the experiment config (which fixes every network
//! shape), the step counters, and a `(group, index, rows, cols)` entry per
//! tensor. Loading rebuilds the learner from the config and then overwrites
//! each tensor after checking its shape.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::run::Learner;
use crate::config::ExperimentConfig;
use crate::envs::DecPomdpSpec;
use crate::error::{Error, Result};
use crate::nn::{Matrix, OptimizerState};

pub const MAGIC: &[u8; 8] = b"ATDCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub spec: DecPomdpSpec,
    pub counters: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

fn opt_slots<'a>(name: &str, opt: &'a OptimizerState, out: &mut Vec<(String, &'a [Matrix])>) {
    out.push((format!("{name}.second"), &opt.second));
    out.push((format!("{name}.first"), &opt.first));
}

fn opt_slots_mut<'a>(name: &str, opt: &'a mut OptimizerState, out: &mut Vec<(String, &'a mut [Matrix])>) {
    out.push((format!("{name}.second"), &mut opt.second));
    out.push((format!("{name}.first"), &mut opt.first));
}

fn slots(learner: &Learner) -> Vec<(String, &[Matrix])> {
    let mut out = Vec::new();
    match learner {
        Learner::ValueMix(l) => {
            out.push(("params".to_string(), l.params.tensors()));
            out.push(("target".to_string(), l.target.tensors()));
            opt_slots("opt", &l.opt, &mut out);
            if let (Some(r), Some(o)) = (&l.ratio, &l.ratio_opt) {
                out.push(("ratio".to_string(), r.params.tensors()));
                opt_slots("ratio_opt", o, &mut out);
            }
        }
        Learner::ActorCritic(l) => {
            out.push(("actor".to_string(), l.actor_params.tensors()));
            out.push(("critic".to_string(), l.critic_params.tensors()));
            opt_slots("actor_opt", &l.actor_opt, &mut out);
            opt_slots("critic_opt", &l.critic_opt, &mut out);
            if let (Some(r), Some(o)) = (&l.ratio, &l.ratio_opt) {
                out.push(("ratio".to_string(), r.params.tensors()));
                opt_slots("ratio_opt", o, &mut out);
            }
        }
    }
    out
}

fn slots_mut(learner: &mut Learner) -> Vec<(String, &mut [Matrix])> {
    let mut out = Vec::new();
    match learner {
        Learner::ValueMix(l) => {
            let l = l.as_mut();
            out.push(("params".to_string(), l.params.tensors_mut()));
            out.push(("target".to_string(), l.target.tensors_mut()));
            opt_slots_mut("opt", &mut l.opt, &mut out);
            if let (Some(r), Some(o)) = (&mut l.ratio, &mut l.ratio_opt) {
                out.push(("ratio".to_string(), r.params.tensors_mut()));
                opt_slots_mut("ratio_opt", o, &mut out);
            }
        }
        Learner::ActorCritic(l) => {
            let l = l.as_mut();
            out.push(("actor".to_string(), l.actor_params.tensors_mut()));
            out.push(("critic".to_string(), l.critic_params.tensors_mut()));
            opt_slots_mut("actor_opt", &mut l.actor_opt, &mut out);
            opt_slots_mut("critic_opt", &mut l.critic_opt, &mut out);
            if let (Some(r), Some(o)) = (&mut l.ratio, &mut l.ratio_opt) {
                out.push(("ratio".to_string(), r.params.tensors_mut()));
                opt_slots_mut("ratio_opt", o, &mut out);
            }
        }
    }
    out
}

fn counters(learner: &Learner) -> BTreeMap<String, u64> {
    let mut c = BTreeMap::new();
    match learner {
        Learner::ValueMix(l) => {
            c.insert("env_steps".into(), l.env_steps);
            c.insert("train_steps".into(), l.train_steps);
            c.insert("target_updates".into(), l.target_updates);
            c.insert("opt.steps".into(), l.opt.steps);
            if let Some(o) = &l.ratio_opt {
                c.insert("ratio_opt.steps".into(), o.steps);
            }
        }
        Learner::ActorCritic(l) => {
            c.insert("env_steps".into(), l.env_steps);
            c.insert("iterations".into(), l.iterations);
            c.insert("actor_opt.steps".into(), l.actor_opt.steps);
            c.insert("critic_opt.steps".into(), l.critic_opt.steps);
            if let Some(o) = &l.ratio_opt {
                c.insert("ratio_opt.steps".into(), o.steps);
            }
        }
    }
    c
}

fn restore_counters(learner: &mut Learner, c: &BTreeMap<String, u64>) -> Result<()> {
    let get = |k: &str| {
        c.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing counter {k}")))
    };
    match learner {
        Learner::ValueMix(l) => {
            l.env_steps = get("env_steps")?;
            l.train_steps = get("train_steps")?;
            l.target_updates = get("target_updates")?;
            l.opt.steps = get("opt.steps")?;
            if let Some(o) = &mut l.ratio_opt {
                o.steps = get("ratio_opt.steps")?;
            }
        }
        Learner::ActorCritic(l) => {
            l.env_steps = get("env_steps")?;
            l.iterations = get("iterations")?;
            l.actor_opt.steps = get("actor_opt.steps")?;
            l.critic_opt.steps = get("critic_opt.steps")?;
            if let Some(o) = &mut l.ratio_opt {
                o.steps = get("ratio_opt.steps")?;
            }
        }
    }
    Ok(())
}

fn spec_of(learner: &Learner) -> &DecPomdpSpec {
    match learner {
        Learner::ValueMix(l) => &l.spec,
        Learner::ActorCritic(l) => &l.spec,
    }
}

pub fn write_checkpoint(w: &mut impl Write, cfg: &ExperimentConfig, learner: &Learner) -> Result<()> {
    let slots = slots(learner);
    let tensors = slots
        .iter()
        .flat_map(|(g, ts)| {
            ts.iter().enumerate().map(move |(i, t)| TensorEntry {
                group: g.clone(),
                index: i,
                rows: t.rows(),
                cols: t.cols(),
            })
        })
        .collect();
    let manifest = Manifest {
        config: cfg.clone(),
        spec: spec_of(learner).clone(),
        counters: counters(learner),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, ts) in &slots {
        for t in ts.iter() {
            for v in t.as_slice() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(ExperimentConfig, Learner)> {
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut word).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    manifest.config.validate()?;

    let mut learner = Learner::new(&manifest.config, &manifest.spec, &mut ChaCha8Rng::seed_from_u64(0));
    restore_counters(&mut learner, &manifest.counters)?;
    let mut slots = slots_mut(&mut learner);
    let expected: usize = slots.iter().map(|(_, ts)| ts.len()).sum();
    if expected != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {expected}",
            manifest.tensors.len()
        )));
    }
    let mut buf = [0u8; 8];
    for e in &manifest.tensors {
        let (_, ts) = slots
            .iter_mut()
            .find(|(g, _)| *g == e.group)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group {}", e.group)))?;
        let t = ts
            .get_mut(e.index)
            .ok_or_else(|| Error::Checkpoint(format!("{}[{}] out of range", e.group, e.index)))?;
        if t.shape() != (e.rows, e.cols) {
            return Err(Error::Checkpoint(format!(
                "{}[{}]: expected {:?}, file has {}x{}",
                e.group,
                e.index,
                t.shape(),
                e.rows,
                e.cols
            )));
        }
        for v in t.as_mut_slice() {
            r.read_exact(&mut buf).map_err(io)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    drop(slots);
    Ok((manifest.config, learner))
}

pub fn save_checkpoint(path: &Path, cfg: &ExperimentConfig, learner: &Learner) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, cfg, learner)?;
    w.flush().map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, Learner)> {
    let f = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut std::io::BufReader::new(f))
}
