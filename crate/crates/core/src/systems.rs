//! The zoo of simulated inference systems.
//!
//! A system is an (engine, backend, hardware) triple. The mapping from each
//! component to numerics is data (`data/zoo.json`):
//!
//! * the engine fixes the prefill chunk size and the KV-cache policy,
//! * the backend fixes the attention softmax formulation and its reduction,
//! * the hardware fixes the accumulator and the base tile of the linear
//!   kernels, which grows with the batch bucket.

use crate::fpnum::{AccumulatorSpec, ReductionStrategy, SoftmaxVariant};
use crate::prompts::{Prompt, Response};
use crate::rng;
use crate::toylm::{
    self, CachePolicy, ExecPolicy, KernelProfile, LmError, ModelWeights, SamplerState,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

const BUILTIN_ZOO: &str = include_str!("../data/zoo.json");

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("unsupported engine/backend combination: {engine}/{backend}")]
    Unsupported { engine: String, backend: String },
    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
    #[error("invalid zoo table: {0}")]
    InvalidTable(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SystemConfig {
    pub engine: String,
    pub backend: String,
    pub hardware: String,
}

impl SystemConfig {
    pub fn new(engine: &str, backend: &str, hardware: &str) -> Self {
        Self {
            engine: engine.into(),
            backend: backend.into(),
            hardware: hardware.into(),
        }
    }

    /// `ENGINE/BACKEND/HARDWARE`.
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.engine, self.backend, self.hardware)
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut it = s.split('/');
        let cfg = Self::new(it.next()?, it.next()?, it.next()?);
        it.next().is_none().then_some(cfg)
    }

    pub fn label(&self, axis: Axis) -> &str {
        match axis {
            Axis::Engine => &self.engine,
            Axis::Backend => &self.backend,
            Axis::Hardware => &self.hardware,
        }
    }
}

impl fmt::Display for SystemConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Component axis of a system label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Engine,
    Backend,
    Hardware,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Engine, Axis::Backend, Axis::Hardware];

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Engine => "engine",
            Axis::Backend => "backend",
            Axis::Hardware => "hardware",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineSpec {
    pub chunk_size: Option<usize>,
    pub cache_policy: CachePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub attention_softmax: SoftmaxVariant,
    pub attention_reduction: ReductionStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub acc: AccumulatorSpec,
    pub tile_base: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    pub engines: BTreeMap<String, EngineSpec>,
    pub backends: BTreeMap<String, BackendSpec>,
    pub hardware: BTreeMap<String, HardwareSpec>,
}

/// Component lists, validity matrix and numerics mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zoo {
    pub engines: Vec<String>,
    pub backends: Vec<String>,
    pub hardware: Vec<String>,
    /// `validity[engine][backend]` is 1 when the pair is supported.
    pub validity: Vec<Vec<u8>>,
    pub mapping: Mapping,
}

impl Zoo {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_ZOO).expect("bundled zoo table is valid")
    }

    pub fn builtin_json() -> &'static str {
        BUILTIN_ZOO
    }

    pub fn from_json(s: &str) -> Result<Self, SystemError> {
        let zoo: Zoo = serde_json::from_str(s)?;
        zoo.validate()?;
        Ok(zoo)
    }

    fn validate(&self) -> Result<(), SystemError> {
        let bad = |m: String| Err(SystemError::InvalidTable(m));
        if self.validity.len() != self.engines.len()
            || self.validity.iter().any(|r| r.len() != self.backends.len())
        {
            return bad("validity matrix shape does not match component lists".into());
        }
        for e in &self.engines {
            if !self.mapping.engines.contains_key(e) {
                return bad(format!("no mapping for engine {e}"));
            }
        }
        for b in &self.backends {
            match self.mapping.backends.get(b) {
                None => return bad(format!("no mapping for backend {b}")),
                Some(spec) if spec.attention_reduction.validate().is_err() => {
                    return bad(format!("invalid reduction for backend {b}"))
                }
                _ => {}
            }
        }
        for h in &self.hardware {
            match self.mapping.hardware.get(h) {
                None => return bad(format!("no mapping for hardware {h}")),
                Some(spec) if spec.tile_base < 2 => {
                    return bad(format!("tile base of {h} must be >= 2"))
                }
                _ => {}
            }
        }
        for (i, e) in self.engines.iter().enumerate() {
            if !self.validity[i].contains(&1) {
                return bad(format!("engine {e} supports no backend"));
            }
            if let Some(c) = self.mapping.engines[e].chunk_size {
                if c < 8 {
                    return bad(format!("chunk size of {e} must be >= 8"));
                }
            }
        }
        Ok(())
    }

    fn index(list: &[String], kind: &'static str, name: &str) -> Result<usize, SystemError> {
        list.iter()
            .position(|x| x == name)
            .ok_or_else(|| SystemError::Unknown {
                kind,
                name: name.into(),
            })
    }

    pub fn is_valid(&self, cfg: &SystemConfig) -> bool {
        self.check(cfg).is_ok()
    }

    fn check(&self, cfg: &SystemConfig) -> Result<(), SystemError> {
        let e = Self::index(&self.engines, "engine", &cfg.engine)?;
        let b = Self::index(&self.backends, "backend", &cfg.backend)?;
        Self::index(&self.hardware, "hardware", &cfg.hardware)?;
        if self.validity[e][b] != 1 {
            return Err(SystemError::Unsupported {
                engine: cfg.engine.clone(),
                backend: cfg.backend.clone(),
            });
        }
        Ok(())
    }

    /// All valid configurations in lexicographic order.
    pub fn valid_configs(&self) -> Vec<SystemConfig> {
        let mut out = Vec::new();
        for (i, e) in self.engines.iter().enumerate() {
            for (j, b) in self.backends.iter().enumerate() {
                if self.validity[i][j] == 1 {
                    for h in &self.hardware {
                        out.push(SystemConfig::new(e, b, h));
                    }
                }
            }
        }
        out.sort();
        out
    }

    pub fn labels(&self, axis: Axis) -> &[String] {
        match axis {
            Axis::Engine => &self.engines,
            Axis::Backend => &self.backends,
            Axis::Hardware => &self.hardware,
        }
    }

    /// Kernel profile and batch-1 execution policy of `cfg`.
    pub fn numerics(&self, cfg: &SystemConfig) -> Result<(KernelProfile, ExecPolicy), SystemError> {
        self.check(cfg)?;
        let e = self.mapping.engines[&cfg.engine];
        let b = self.mapping.backends[&cfg.backend];
        let h = self.mapping.hardware[&cfg.hardware];
        let profile = KernelProfile {
            attention_softmax: b.attention_softmax,
            attention_reduction: b.attention_reduction,
            linear_reduction: ReductionStrategy::Blocked { tile: h.tile_base },
            acc: h.acc,
        };
        let policy = ExecPolicy {
            chunk_size: e.chunk_size,
            cache_policy: e.cache_policy,
            batch_bucket: 1,
        };
        Ok((profile, policy))
    }

    pub fn instantiate(
        &self,
        cfg: &SystemConfig,
        model: Arc<ModelWeights>,
    ) -> Result<SimulatedSystem, SystemError> {
        let (profile, policy) = self.numerics(cfg)?;
        Ok(SimulatedSystem {
            config: cfg.clone(),
            profile,
            policy,
            model,
            mitigation_sigma: 0.0,
        })
    }

    /// Every valid system sharing one model.
    pub fn instantiate_all(&self, model: &Arc<ModelWeights>) -> Vec<SimulatedSystem> {
        self.valid_configs()
            .iter()
            .map(|c| {
                self.instantiate(c, Arc::clone(model))
                    .expect("valid by construction")
            })
            .collect()
    }
}

/// The 30 configurations of the bundled zoo, in lexicographic order.
pub fn valid_configs() -> Vec<SystemConfig> {
    Zoo::builtin().valid_configs()
}

/// Model with the default dimensions.
pub fn default_model(model_seed: u64) -> Arc<ModelWeights> {
    Arc::new(toylm::init_model(
        model_seed,
        toylm::DEFAULT_VOCAB,
        toylm::DEFAULT_D_MODEL,
    ))
}

/// One system from the bundled zoo with a freshly initialised model.
pub fn instantiate(config: &SystemConfig, model_seed: u64) -> Result<SimulatedSystem, SystemError> {
    Zoo::builtin().instantiate(config, default_model(model_seed))
}

#[derive(Debug, Clone)]
pub struct SimulatedSystem {
    pub config: SystemConfig,
    pub profile: KernelProfile,
    pub policy: ExecPolicy,
    pub model: Arc<ModelWeights>,
    pub mitigation_sigma: f32,
}

impl SimulatedSystem {
    pub fn with_mitigation(mut self, sigma: f32) -> Self {
        self.mitigation_sigma = sigma.max(0.0);
        self
    }

    pub fn policy_for_batch(&self, batch_size: usize) -> ExecPolicy {
        ExecPolicy {
            batch_bucket: toylm::batch_bucket(batch_size),
            ..self.policy
        }
    }
}

/// Sampler stream of replicate `replicate` of the prompt with id `prompt_id`.
pub fn request_stream(prompt_id: &str, replicate: u64) -> u64 {
    rng::mix64(rng::hash_str(prompt_id) ^ rng::mix64(replicate.wrapping_add(0x5EED)))
}

pub fn render(model: &ModelWeights, tokens: &[toylm::Token]) -> String {
    let names: Vec<String> = match model.layout() {
        Some(l) => tokens.iter().map(|&t| l.token_name(t)).collect(),
        None => tokens.iter().map(|t| format!("t{t}")).collect(),
    };
    names.join(" ")
}

/// Replicate 0 of [`query_replicate`].
pub fn query(
    system: &SimulatedSystem,
    prompt: &Prompt,
    temperature: f32,
    seed: u64,
    batch_size: usize,
) -> Result<Response, SystemError> {
    query_replicate(system, prompt, temperature, seed, batch_size, 0)
}

/// Runs the prompt through the system.
pub fn query_replicate(
    system: &SimulatedSystem,
    prompt: &Prompt,
    temperature: f32,
    seed: u64,
    batch_size: usize,
    replicate: u64,
) -> Result<Response, SystemError> {
    let policy = system.policy_for_batch(batch_size);
    let sampler = SamplerState {
        temperature: temperature.max(0.0),
        seed,
        request_id: request_stream(&prompt.id, replicate),
        step: 0,
        logit_noise: system.mitigation_sigma,
    };
    let tokens = toylm::generate(
        &system.model,
        &prompt.tokens,
        &system.profile,
        &policy,
        &sampler,
        prompt.max_len,
    )?;
    Ok(Response {
        text: render(&system.model, &tokens),
        tokens,
    })
}

/// Repeated queries of one prompt on one system, sharing decode work.
/// Each call returns what [`query_replicate`] would.
pub struct QuerySession<'a> {
    system: &'a SimulatedSystem,
    prompt: &'a Prompt,
    inner: toylm::Session<'a>,
}

impl<'a> QuerySession<'a> {
    pub fn new(
        system: &'a SimulatedSystem,
        prompt: &'a Prompt,
        batch_size: usize,
    ) -> Result<Self, SystemError> {
        let policy = system.policy_for_batch(batch_size);
        let inner = toylm::Session::new(
            &system.model,
            &prompt.tokens,
            &system.profile,
            &policy,
            prompt.max_len,
        )?;
        Ok(Self {
            system,
            prompt,
            inner,
        })
    }

    pub fn query(
        &mut self,
        temperature: f32,
        seed: u64,
        replicate: u64,
    ) -> Result<Response, SystemError> {
        let tokens = self.tokens(temperature, seed, replicate)?;
        Ok(Response {
            text: render(&self.system.model, &tokens),
            tokens,
        })
    }

    /// [`QuerySession::query`] without the rendered text.
    pub fn tokens(
        &mut self,
        temperature: f32,
        seed: u64,
        replicate: u64,
    ) -> Result<Vec<toylm::Token>, SystemError> {
        let sampler = SamplerState {
            temperature: temperature.max(0.0),
            seed,
            request_id: request_stream(&self.prompt.id, replicate),
            step: 0,
            logit_noise: self.system.mitigation_sigma,
        };
        Ok(self.inner.generate(&sampler)?)
    }

    pub fn evaluated(&self) -> usize {
        self.inner.evaluated()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn thirty_sorted_valid_configs() {
        let zoo = Zoo::builtin();
        let configs = zoo.valid_configs();
        assert_eq!(configs.len(), 30);
        let mut sorted = configs.clone();
        sorted.sort();
        assert_eq!(configs, sorted);
        assert!(configs.iter().all(|c| zoo.is_valid(c)));
        let pairs: HashSet<_> = configs
            .iter()
            .map(|c| (c.engine.clone(), c.backend.clone()))
            .collect();
        assert_eq!(pairs.len(), 10);
    }

    #[test]
    fn chance_levels() {
        let zoo = Zoo::builtin();
        assert_eq!(zoo.engines.len(), 4);
        assert_eq!(zoo.backends.len(), 6);
        assert_eq!(zoo.hardware.len(), 3);
    }

    #[test]
    fn every_engine_has_a_backend() {
        let zoo = Zoo::builtin();
        for row in &zoo.validity {
            assert!(row.contains(&1));
        }
    }

    #[test]
    fn mapping_is_injective() {
        let zoo = Zoo::builtin();
        let seen: HashSet<_> = zoo
            .valid_configs()
            .iter()
            .map(|c| zoo.numerics(c).unwrap())
            .collect();
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn invalid_pair_rejected() {
        let err = instantiate(&SystemConfig::new("ENG-D", "BK-A", "HW-A"), 1).unwrap_err();
        assert!(err
            .to_string()
            .contains("unsupported engine/backend combination"));
        assert!(matches!(
            instantiate(&SystemConfig::new("ENG-Z", "BK-A", "HW-A"), 1),
            Err(SystemError::Unknown { .. })
        ));
    }

    #[test]
    fn config_id_round_trip() {
        let c = SystemConfig::new("ENG-A", "BK-B", "HW-C");
        assert_eq!(SystemConfig::parse(&c.id()), Some(c));
        assert_eq!(SystemConfig::parse("a/b"), None);
    }

    #[test]
    fn broken_tables_rejected() {
        let mut zoo = Zoo::builtin();
        zoo.validity[0] = vec![0; 6];
        let json = serde_json::to_string(&zoo).unwrap();
        assert!(Zoo::from_json(&json).is_err());
    }

    #[test]
    fn batch_changes_linear_tile() {
        let sys = instantiate(&SystemConfig::new("ENG-A", "BK-A", "HW-A"), 3).unwrap();
        assert_eq!(sys.policy_for_batch(1).batch_bucket, 1);
        assert_eq!(sys.policy_for_batch(32).batch_bucket, 6);
        assert_eq!(sys.policy_for_batch(256).batch_bucket, 9);
        assert_eq!(
            sys.profile
                .linear_for(sys.policy_for_batch(32).batch_bucket),
            ReductionStrategy::Blocked { tile: 48 }
        );
    }
}
