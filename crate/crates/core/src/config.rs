//! The engine configuration file and the providers it describes.
//!
//! One TOML document with a section per module. Every tunable has a default,
//! so an empty file is a valid configuration (with no providers).
//!
//! ```toml
//! master_seed = 7
//!
//! [retrieval]
//! t_max = 30
//!
//! [providers.generation]
//! kind = "scripted"
//! script = "chat.json"       # relative to the config file
//!
//! [providers.embedding]
//! kind = "hash"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::construction::ConstructionConfig;
use crate::evolution::EvolutionConfig;
use crate::prompts;
use crate::providers::{
    ChatProvider, ChatRequest, ChatResponse, EmbeddingProvider, EmbeddingSynergyJudge, HashEmbedder,
    HttpChatProvider, HttpEmbeddingProvider, ProviderConfig, ProviderError, ScriptedChat,
};
use crate::retrieval::RetrievalConfig;
use crate::similarity::{EdgeBuilder, SimilarityWeights};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatSpec {
    Http(ProviderConfig),
    /// A JSON rule list for [`ScriptedChat`].
    Scripted { script: PathBuf },
    /// Scores the pairwise similarity prompt by embedding cosine. Only
    /// meaningful as the synergy judge.
    EmbeddingJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSpec {
    Http(ProviderConfig),
    /// Deterministic trigram hashing, 64 dimensions.
    Hash,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSpecs {
    pub generation: Option<ChatSpec>,
    /// Model that drives traversal under the `llm` policy.
    pub retrieval_policy: Option<ChatSpec>,
    pub embedding: Option<EmbeddingSpec>,
    /// Judge for the pairwise similarity prompt; the generation model when absent.
    pub synergy: Option<ChatSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub master_seed: u64,
    pub construction: ConstructionConfig,
    pub retrieval: RetrievalConfig,
    pub evolution: EvolutionConfig,
    /// Authoritative edge-scoring weights; copied into construction.
    pub similarity_weights: SimilarityWeights,
    pub providers: ProviderSpecs,
    /// Directory that relative provider paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            construction: ConstructionConfig::default(),
            retrieval: RetrievalConfig::default(),
            evolution: EvolutionConfig::default(),
            similarity_weights: SimilarityWeights::default(),
            providers: ProviderSpecs::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: EngineConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), source: Box::new(e) })?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        let section = cfg.construction.similarity_weights;
        if section != SimilarityWeights::default() && section != cfg.similarity_weights {
            return Err(ConfigError::Invalid(
                "construction.similarity_weights disagrees with [similarity_weights]; set only the latter".into(),
            ));
        }
        cfg.construction.similarity_weights = cfg.similarity_weights;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: String| ConfigError::Invalid(e);
        self.construction.validate().map_err(|e| bad(e.to_string()))?;
        self.retrieval.validate().map_err(|e| bad(e.to_string()))?;
        self.evolution.validate().map_err(|e| bad(e.to_string()))?;
        self.similarity_weights.validate().map_err(|e| bad(e.to_string()))?;
        let http_ok = |c: &ProviderConfig, name: &str| {
            if c.endpoint_url.trim().is_empty() || c.model_name.trim().is_empty() {
                Err(bad(format!("providers.{name}: endpoint_url and model_name are required")))
            } else {
                Ok(())
            }
        };
        for (name, spec) in [
            ("generation", &self.providers.generation),
            ("retrieval_policy", &self.providers.retrieval_policy),
            ("synergy", &self.providers.synergy),
        ] {
            match spec {
                Some(ChatSpec::Http(c)) => http_ok(c, name)?,
                Some(ChatSpec::EmbeddingJudge) if name != "synergy" => {
                    return Err(bad(format!("providers.{name}: embedding_judge only answers the similarity prompt")))
                }
                _ => {}
            }
        }
        if let Some(EmbeddingSpec::Http(c)) = &self.providers.embedding {
            http_ok(c, "embedding")?;
        }
        Ok(())
    }

    pub fn edge_builder(&self) -> EdgeBuilder {
        EdgeBuilder::new(self.similarity_weights, self.construction.theta_edge)
    }

    fn chat_from(&self, spec: &ChatSpec) -> Result<Box<dyn ChatProvider>, ConfigError> {
        Ok(match spec {
            ChatSpec::Http(c) => Box::new(HttpChatProvider::new(c)?),
            ChatSpec::Scripted { script } => {
                let path = self.base_dir.join(script);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })?;
                Box::new(ScriptedChat::from_json(&text)?)
            }
            ChatSpec::EmbeddingJudge => Box::new(EmbeddingSynergyJudge::new(self.embedding()?)),
        })
    }

    /// The generation model, with similarity prompts routed to the synergy
    /// judge when one is configured.
    pub fn generation(&self) -> Result<Box<dyn ChatProvider>, ConfigError> {
        let spec = self
            .providers
            .generation
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("no [providers.generation] configured".into()))?;
        let main = self.chat_from(spec)?;
        Ok(match &self.providers.synergy {
            Some(s) => Box::new(RoutedChat { main, synergy: self.chat_from(s)? }),
            None => main,
        })
    }

    pub fn retrieval_policy(&self) -> Result<Box<dyn ChatProvider>, ConfigError> {
        let spec = self
            .providers
            .retrieval_policy
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("no [providers.retrieval_policy] configured".into()))?;
        self.chat_from(spec)
    }

    pub fn embedding(&self) -> Result<Box<dyn EmbeddingProvider>, ConfigError> {
        match &self.providers.embedding {
            Some(EmbeddingSpec::Http(c)) => Ok(Box::new(HttpEmbeddingProvider::new(c)?)),
            Some(EmbeddingSpec::Hash) => Ok(Box::new(HashEmbedder)),
            None => Err(ConfigError::Invalid("no [providers.embedding] configured".into())),
        }
    }
}

/// Sends similarity-prompt requests to one provider and everything else to another.
struct RoutedChat {
    main: Box<dyn ChatProvider>,
    synergy: Box<dyn ChatProvider>,
}

impl ChatProvider for RoutedChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        if req.system == prompts::SIMILARITY.system.trim_end() {
            self.synergy.chat(req)
        } else {
            self.main.chat(req)
        }
    }
}
