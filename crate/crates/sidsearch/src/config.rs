//! Run configuration: one flat key-value file with dotted section names.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 42
//! corpus.n_items = 2000
//! model.dim = 32
//! pretrain.tau = 0.1
//! paths.checkpoint = model.ckpt
//! ```
//!
//! Every key has a default; `print_config` emits the full resolved set in
//! canonical order. Unknown keys and bad values report file:line diagnostics.

use std::path::{Path, PathBuf};

use crate::model::{CodebookMode, ModelDims};
use crate::pretrain::PretrainConfig;
use crate::sim::{CorpusConfig, RewardWeights};
use crate::spo::SpoConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub top_n: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 32,
            top_n: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    /// Positives per probe record (system-preferred / exposure size).
    pub top_m: usize,
    /// Cap on probe records per split (0 = all).
    pub probe_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 50,
            top_m: 4,
            probe_limit: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub spo_checkpoint: PathBuf,
    pub trie_snapshot: PathBuf,
    pub pretrain_metrics: PathBuf,
    pub spo_rounds: PathBuf,
    pub eval_metrics: PathBuf,
    pub plot_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus.txt".into(),
            checkpoint: "model.ckpt".into(),
            spo_checkpoint: "model_spo.ckpt".into(),
            trie_snapshot: "trie.snapshot".into(),
            pretrain_metrics: "pretrain_metrics.csv".into(),
            spo_rounds: "spo_rounds.csv".into(),
            eval_metrics: "eval_metrics.csv".into(),
            plot_dir: "plots".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub dim: usize,
    pub k: usize,
    pub w: usize,
    pub codebook: CodebookMode,
    pub pretrain: PretrainConfig,
    pub spo: SpoConfig,
    pub reward: RewardWeights,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub listen: String,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusConfig::default(),
            dim: 32,
            k: 3,
            w: 64,
            codebook: CodebookMode::SimVq,
            pretrain: PretrainConfig::default(),
            spo: SpoConfig::default(),
            reward: RewardWeights::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            listen: "127.0.0.1:7878".to_string(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("config: model.k must be >= 1".into()));
        }
        if self.w < 2 {
            return Err(Error::InvalidArgument("config: model.w must be >= 2".into()));
        }
        if self.dim < 1 {
            return Err(Error::InvalidArgument("config: model.dim must be >= 1".into()));
        }
        self.pretrain.validate()?;
        self.spo.validate()?;
        Ok(())
    }

    /// Corpus configuration with the run seed threaded through.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    /// Model dimensions bound to the corpus vocabulary sizes.
    pub fn model_dims(&self) -> ModelDims {
        let cc = self.corpus_config();
        ModelDims {
            dim: self.dim,
            k: self.k,
            w: self.w,
            query_vocab: cc.query_vocab_size(),
            feature_vocab: cc.feature_vocab_size(),
            n_users: cc.n_users,
        }
    }

    /// Per-level reward/codebook coupling: pretrain reads alpha from its own
    /// section; spo carries the shared reward weights.
    pub fn spo_config(&self) -> SpoConfig {
        SpoConfig {
            reward_weights: self.reward,
            ..self.spo.clone()
        }
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let location = format!("{}:{}", path.display(), idx + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                location: location.clone(),
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            config.apply(key.trim(), value.trim(), &location)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, key: &str, value: &str, location: &str) -> Result<()> {
        let bad = |what: &str| Error::Config {
            location: location.to_string(),
            message: format!("bad value {value:?} for {key} (want {what})"),
        };
        macro_rules! parse {
            ($what:expr) => {
                value.parse().map_err(|_| bad($what))?
            };
        }
        match key {
            "seed" => self.seed = parse!("u64"),

            "corpus.n_items" => self.corpus.n_items = parse!("usize"),
            "corpus.n_queries" => self.corpus.n_queries = parse!("usize"),
            "corpus.n_users" => self.corpus.n_users = parse!("usize"),
            "corpus.n_topics" => self.corpus.n_topics = parse!("usize"),
            "corpus.subtopics_per_topic" => self.corpus.subtopics_per_topic = parse!("usize"),
            "corpus.topic_dim" => self.corpus.topic_dim = parse!("usize"),
            "corpus.zipf_exponent" => self.corpus.zipf_exponent = parse!("f64"),
            "corpus.n_records" => self.corpus.n_records = parse!("usize"),
            "corpus.candidates_per_record" => self.corpus.candidates_per_record = parse!("usize"),
            "corpus.features_per_item" => self.corpus.features_per_item = parse!("usize"),
            "corpus.tokens_per_query" => self.corpus.tokens_per_query = parse!("usize"),
            "corpus.label_noise" => self.corpus.label_noise = parse!("f64"),
            "corpus.new_user_fraction" => self.corpus.new_user_fraction = parse!("f64"),
            "corpus.holdout_fraction" => self.corpus.holdout_fraction = parse!("f64"),

            "model.dim" => self.dim = parse!("usize"),
            "model.k" => self.k = parse!("usize"),
            "model.w" => self.w = parse!("usize"),
            "model.codebook" => {
                self.codebook = match value {
                    "simvq" => CodebookMode::SimVq,
                    "direct" => CodebookMode::Direct,
                    _ => return Err(bad("simvq|direct")),
                }
            }

            "pretrain.tau" => self.pretrain.tau = parse!("f64"),
            "pretrain.lambda_contrast" => self.pretrain.lambda_contrast = parse!("f64"),
            "pretrain.lambda_codebook" => self.pretrain.lambda_codebook = parse!("f64"),
            "pretrain.lambda_ntp" => self.pretrain.lambda_ntp = parse!("f64"),
            "pretrain.label_weights" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 4 {
                    return Err(bad("four comma-separated reals"));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.pretrain.label_weights[i] =
                        p.trim().parse().map_err(|_| bad("four comma-separated reals"))?;
                }
            }
            "pretrain.alpha1" => self.pretrain.alpha1 = parse!("f64"),
            "pretrain.alpha2" => self.pretrain.alpha2 = parse!("f64"),
            "pretrain.batch_size" => self.pretrain.batch_size = parse!("usize"),
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse!("f64"),
            "pretrain.momentum" => self.pretrain.momentum = parse!("f64"),
            "pretrain.steps" => self.pretrain.steps = parse!("usize"),
            "pretrain.in_batch_negatives" => self.pretrain.in_batch_negatives = parse!("usize"),
            "pretrain.hard_negative_pool" => self.pretrain.hard_negative_pool = parse!("usize"),
            "pretrain.anchors_per_record" => self.pretrain.anchors_per_record = parse!("usize"),
            "pretrain.residual_accumulation" => {
                self.pretrain.residual_accumulation = parse!("true|false")
            }
            "pretrain.coarse_to_fine" => self.pretrain.coarse_to_fine = parse!("true|false"),
            "pretrain.prefix_refresh_steps" => self.pretrain.prefix_refresh_steps = parse!("usize"),
            "pretrain.use_adam" => self.pretrain.use_adam = parse!("true|false"),
            "pretrain.cosine_decay" => self.pretrain.cosine_decay = parse!("true|false"),

            "spo.gamma1" => self.spo.gamma1 = parse!("f64"),
            "spo.gamma2" => self.spo.gamma2 = parse!("f64"),
            "spo.beta" => self.spo.beta = parse!("f64"),
            "spo.group_size" => self.spo.group_size = parse!("usize"),
            "spo.top_m" => self.spo.top_m = parse!("usize"),
            "spo.beam_size" => self.spo.beam_size = parse!("usize"),
            "spo.learning_rate" => self.spo.learning_rate = parse!("f64"),
            "spo.rounds" => self.spo.rounds = parse!("usize"),
            "spo.queries_per_round" => self.spo.queries_per_round = parse!("usize"),
            "spo.max_grad_norm" => self.spo.max_grad_norm = parse!("f64"),

            "reward.relevance" => self.reward.relevance = parse!("f64"),
            "reward.quality" => self.reward.quality = parse!("f64"),
            "reward.noise" => self.reward.noise = parse!("f64"),

            "decode.beam_size" => self.decode.beam_size = parse!("usize"),
            "decode.top_n" => self.decode.top_n = parse!("usize"),

            "eval.k" => self.eval.k = parse!("usize"),
            "eval.top_m" => self.eval.top_m = parse!("usize"),
            "eval.probe_limit" => self.eval.probe_limit = parse!("usize"),

            "serve.listen" => self.listen = value.to_string(),

            "paths.corpus" => self.paths.corpus = value.into(),
            "paths.checkpoint" => self.paths.checkpoint = value.into(),
            "paths.spo_checkpoint" => self.paths.spo_checkpoint = value.into(),
            "paths.trie_snapshot" => self.paths.trie_snapshot = value.into(),
            "paths.pretrain_metrics" => self.paths.pretrain_metrics = value.into(),
            "paths.spo_rounds" => self.paths.spo_rounds = value.into(),
            "paths.eval_metrics" => self.paths.eval_metrics = value.into(),
            "paths.plot_dir" => self.paths.plot_dir = value.into(),

            _ => {
                return Err(Error::Config {
                    location: location.to_string(),
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Full resolved configuration in canonical key order.
    pub fn to_lines(&self) -> Vec<String> {
        let c = &self.corpus;
        let p = &self.pretrain;
        let s = &self.spo;
        let lw = p.label_weights;
        vec![
            format!("seed = {}", self.seed),
            format!("corpus.n_items = {}", c.n_items),
            format!("corpus.n_queries = {}", c.n_queries),
            format!("corpus.n_users = {}", c.n_users),
            format!("corpus.n_topics = {}", c.n_topics),
            format!("corpus.subtopics_per_topic = {}", c.subtopics_per_topic),
            format!("corpus.topic_dim = {}", c.topic_dim),
            format!("corpus.zipf_exponent = {}", c.zipf_exponent),
            format!("corpus.n_records = {}", c.n_records),
            format!("corpus.candidates_per_record = {}", c.candidates_per_record),
            format!("corpus.features_per_item = {}", c.features_per_item),
            format!("corpus.tokens_per_query = {}", c.tokens_per_query),
            format!("corpus.label_noise = {}", c.label_noise),
            format!("corpus.new_user_fraction = {}", c.new_user_fraction),
            format!("corpus.holdout_fraction = {}", c.holdout_fraction),
            format!("model.dim = {}", self.dim),
            format!("model.k = {}", self.k),
            format!("model.w = {}", self.w),
            format!(
                "model.codebook = {}",
                match self.codebook {
                    CodebookMode::SimVq => "simvq",
                    CodebookMode::Direct => "direct",
                }
            ),
            format!("pretrain.tau = {}", p.tau),
            format!("pretrain.lambda_contrast = {}", p.lambda_contrast),
            format!("pretrain.lambda_codebook = {}", p.lambda_codebook),
            format!("pretrain.lambda_ntp = {}", p.lambda_ntp),
            format!(
                "pretrain.label_weights = {},{},{},{}",
                lw[0], lw[1], lw[2], lw[3]
            ),
            format!("pretrain.alpha1 = {}", p.alpha1),
            format!("pretrain.alpha2 = {}", p.alpha2),
            format!("pretrain.batch_size = {}", p.batch_size),
            format!("pretrain.learning_rate = {}", p.learning_rate),
            format!("pretrain.momentum = {}", p.momentum),
            format!("pretrain.steps = {}", p.steps),
            format!("pretrain.in_batch_negatives = {}", p.in_batch_negatives),
            format!("pretrain.hard_negative_pool = {}", p.hard_negative_pool),
            format!("pretrain.anchors_per_record = {}", p.anchors_per_record),
            format!("pretrain.residual_accumulation = {}", p.residual_accumulation),
            format!("pretrain.coarse_to_fine = {}", p.coarse_to_fine),
            format!("pretrain.prefix_refresh_steps = {}", p.prefix_refresh_steps),
            format!("pretrain.use_adam = {}", p.use_adam),
            format!("pretrain.cosine_decay = {}", p.cosine_decay),
            format!("spo.gamma1 = {}", s.gamma1),
            format!("spo.gamma2 = {}", s.gamma2),
            format!("spo.beta = {}", s.beta),
            format!("spo.group_size = {}", s.group_size),
            format!("spo.top_m = {}", s.top_m),
            format!("spo.beam_size = {}", s.beam_size),
            format!("spo.learning_rate = {}", s.learning_rate),
            format!("spo.rounds = {}", s.rounds),
            format!("spo.queries_per_round = {}", s.queries_per_round),
            format!("spo.max_grad_norm = {}", s.max_grad_norm),
            format!("reward.relevance = {}", self.reward.relevance),
            format!("reward.quality = {}", self.reward.quality),
            format!("reward.noise = {}", self.reward.noise),
            format!("decode.beam_size = {}", self.decode.beam_size),
            format!("decode.top_n = {}", self.decode.top_n),
            format!("eval.k = {}", self.eval.k),
            format!("eval.top_m = {}", self.eval.top_m),
            format!("eval.probe_limit = {}", self.eval.probe_limit),
            format!("serve.listen = {}", self.listen),
            format!("paths.corpus = {}", self.paths.corpus.display()),
            format!("paths.checkpoint = {}", self.paths.checkpoint.display()),
            format!("paths.spo_checkpoint = {}", self.paths.spo_checkpoint.display()),
            format!("paths.trie_snapshot = {}", self.paths.trie_snapshot.display()),
            format!("paths.pretrain_metrics = {}", self.paths.pretrain_metrics.display()),
            format!("paths.spo_rounds = {}", self.paths.spo_rounds.display()),
            format!("paths.eval_metrics = {}", self.paths.eval_metrics.display()),
            format!("paths.plot_dir = {}", self.paths.plot_dir.display()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_print_and_parse() {
        let config = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("default.cfg");
        std::fs::write(&path, config.to_lines().join("\n")).unwrap();
        let parsed = RunConfig::parse_file(&path).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn diagnostics_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "seed = 1\nmodel.dim = not_a_number\n").unwrap();
        let err = RunConfig::parse_file(&path).unwrap_err().to_string();
        assert!(err.contains("bad.cfg:2"), "{err}");
        assert!(err.contains("model.dim"), "{err}");

        std::fs::write(&path, "nonsense.key = 3\n").unwrap();
        let err = RunConfig::parse_file(&path).unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");

        std::fs::write(&path, "just a line\n").unwrap();
        let err = RunConfig::parse_file(&path).unwrap_err().to_string();
        assert!(err.contains("key = value"), "{err}");
    }

    #[test]
    fn comments_and_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(
            &path,
            "# comment\n\nseed = 7\nmodel.w = 512\nmodel.codebook = direct\npretrain.label_weights = 0, 0.3, 1, 3\n",
        )
        .unwrap();
        let parsed = RunConfig::parse_file(&path).unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.w, 512);
        assert_eq!(parsed.codebook, CodebookMode::Direct);
        assert_eq!(parsed.pretrain.label_weights, [0.0, 0.3, 1.0, 3.0]);
    }

    #[test]
    fn invalid_semantics_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "model.w = 1\n").unwrap();
        assert!(RunConfig::parse_file(&path).is_err());
        std::fs::write(&path, "pretrain.label_weights = 1,1,1,1\n").unwrap();
        assert!(RunConfig::parse_file(&path).is_err());
    }
}
