//! TOML run configuration with `[model]`, `[train]` and `[task]` sections.
//! Unknown keys are rejected; absent keys take defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::former::FormerConfig;
use crate::instructions::TemplateSet;
use crate::model::AdapterConfig;
use crate::moe::ExpertForm;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub vision: usize,
    pub heads: usize,
    pub queries: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub word_buckets: usize,
    pub questions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_gain: Option<f64>,
    pub backbone_seed: u64,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_p: Option<usize>,
    pub experts: usize,
    pub middle: usize,
    pub expert_form: ExpertForm,
    pub lora_rank: usize,
    /// Instruction template file; the built-in templates otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = FormerConfig::default();
        let a = AdapterConfig::default();
        Self {
            layers: f.layers,
            hidden: f.hidden,
            vision: f.vision,
            heads: f.heads,
            queries: f.queries,
            vocab: f.vocab,
            ffn_mult: f.ffn_mult,
            word_buckets: f.word_buckets,
            questions: f.questions,
            init_gain: f.init_gain,
            backbone_seed: 0,
            rank: a.rank,
            d_p: a.d_p,
            experts: a.experts,
            middle: a.middle,
            expert_form: a.expert_form,
            lora_rank: a.lora_rank,
            templates: None,
        }
    }
}

impl ModelSection {
    pub fn former(&self) -> FormerConfig {
        FormerConfig {
            layers: self.layers,
            hidden: self.hidden,
            vision: self.vision,
            heads: self.heads,
            queries: self.queries,
            vocab: self.vocab,
            ffn_mult: self.ffn_mult,
            word_buckets: self.word_buckets,
            questions: self.questions,
            init_gain: self.init_gain,
        }
    }

    pub fn adapters(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            d_p: self.d_p,
            experts: self.experts,
            middle: self.middle,
            expert_form: self.expert_form,
            lora_rank: self.lora_rank,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub task: SyntheticTaskSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        if let (Some(t), Some(dir)) = (&cfg.model.templates, path.parent()) {
            if t.is_relative() {
                cfg.model.templates = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.former().validate()?;
        let a = self.model.adapters();
        if a.rank == 0 || a.experts == 0 || a.middle == 0 || a.lora_rank == 0 {
            return Err(Error::config("rank, experts, middle and lora_rank must be positive"));
        }
        if a.d_p() < 4 {
            return Err(Error::config(format!("d_p = {} cannot hold 4 slot selectors", a.d_p())));
        }
        self.train.validate()?;
        self.task.validate()
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        match &self.model.templates {
            Some(p) => TemplateSet::load(p, self.task.kind),
            None => Ok(TemplateSet::defaults(self.task.kind)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, Method};

    #[test]
    fn empty_document_is_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("[model]\nwidth = 3\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[extra]\n").is_err());
    }

    #[test]
    fn sections_parse_and_echo() {
        let text = "[model]\nrank = 2\nexperts = 5\n[train]\nmethod = \"lora\"\nseed = 3\n[task]\nkind = \"caption-like\"\nfew_shot = 150\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.rank, 2);
        assert_eq!(cfg.train.method, Method::Lora);
        assert_eq!(cfg.train.ablation, Ablation::None);
        assert_eq!(cfg.task.few_shot, Some(150));
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn ablation_names() {
        let cfg = RunConfig::parse("[train]\nablation = \"V3\"\n").unwrap();
        assert_eq!(cfg.train.ablation, Ablation::V3);
        assert!(RunConfig::parse("[train]\nablation = \"v9\"\n").is_err());
        assert!(RunConfig::parse("[train]\nmethod = \"head\"\nablation = \"v1\"\n").is_err());
    }
}
