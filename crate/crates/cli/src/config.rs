//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use narem::model::PRESETS;
use narem::{AdamConfig, EmConfig, ModelConfig, NarDecoder, ParallelCorpus, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub corpus: CorpusBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub em: EmConfig,
    pub decode: DecodeBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out: None,
            corpus: CorpusBlock::default(),
            model: ModelBlock::default(),
            train: TrainConfig::default(),
            em: EmConfig::default(),
            decode: DecodeBlock::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusBlock {
    pub exp: u8,
    pub n: usize,
    pub valid_n: usize,
    pub test_n: usize,
    pub len: usize,
}

impl Default for CorpusBlock {
    fn default() -> Self {
        CorpusBlock {
            exp: 1,
            n: 100_000,
            valid_n: 1000,
            test_n: 1000,
            len: 30,
        }
    }
}

/// A named preset plus optional overrides. Unset lengths come from the
/// training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub preset: String,
    pub layers: Option<usize>,
    pub d_model: Option<usize>,
    pub d_filter: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub max_src_len: Option<usize>,
    pub max_tgt_len: Option<usize>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            preset: "toy".into(),
            layers: None,
            d_model: None,
            d_filter: None,
            heads: None,
            dropout: None,
            max_src_len: None,
            max_tgt_len: None,
        }
    }
}

impl ModelBlock {
    /// Concrete model config for `corpus`. Without explicit lengths the
    /// source limit is the longest training source and the target limit
    /// twice the longest training target.
    pub fn resolve(
        &self,
        autoregressive: bool,
        corpus: &ParallelCorpus,
    ) -> narem::Result<ModelConfig> {
        let max_src = self.max_src_len.unwrap_or(corpus.max_source_len());
        let max_tgt = self.max_tgt_len.unwrap_or(2 * corpus.max_target_len());
        let mut cfg = ModelConfig::preset(
            &self.preset,
            corpus.vocab().len(),
            max_src,
            max_tgt,
            autoregressive,
        )?;
        if let Some(l) = self.layers {
            cfg.enc_layers = l;
            cfg.dec_layers = l;
        }
        if let Some(d) = self.d_model {
            cfg.d_model = d;
        }
        if let Some(f) = self.d_filter {
            cfg.d_filter = f;
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        if let Some(p) = self.dropout {
            cfg.dropout = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeBlock {
    pub decoder: NarDecoder,
    /// AR beam width; 1 is greedy.
    pub beam: usize,
    /// Half-width of the NAR length window; 0 decodes the predicted length only.
    pub length_beam: usize,
    pub use_gt_length: bool,
    /// Targets are `<concat>`-encoded.
    pub concat: bool,
    /// Leave `log p(T'|x)` out of NCM.
    pub no_length_term: bool,
}

impl Default for DecodeBlock {
    fn default() -> Self {
        DecodeBlock {
            decoder: NarDecoder::Argmax,
            beam: 1,
            length_beam: 0,
            use_gt_length: false,
            concat: false,
            no_length_term: false,
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed. Falls back to the config file, then NAREM_SEED, then 1.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory or file.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Append structured JSON log lines to this file.
    #[arg(long, value_name = "FILE")]
    pub log_file: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct CorpusArgs {
    /// Synthetic task: 1 (expansion) or 2 (expansion with random zero padding).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub exp: Option<u8>,
    /// Training pairs.
    #[arg(long)]
    pub n: Option<usize>,
    /// Validation pairs.
    #[arg(long)]
    pub valid_n: Option<usize>,
    /// Test pairs.
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Source length.
    #[arg(long)]
    pub len: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// Architecture preset: toy, small, base or large.
    #[arg(long)]
    pub preset: Option<String>,
    /// Encoder and decoder layers.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_filter: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_src_len: Option<usize>,
    #[arg(long)]
    pub max_tgt_len: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Steps between progress reports.
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Learning-rate multiplier of the warmup schedule.
    #[arg(long)]
    pub lr_factor: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Weight of the NAR length loss.
    #[arg(long)]
    pub length_loss_weight: Option<f64>,
    /// Seed of this training run (default: the global seed).
    #[arg(long)]
    pub train_seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct EmArgs {
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// M-step beam width.
    #[arg(long)]
    pub m_beam: Option<usize>,
    /// E-step beam width and candidate count.
    #[arg(long)]
    pub e_beam: Option<usize>,
    /// Convergence threshold on the validation metric.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Train the NAR model on the pseudo dataset directly.
    #[arg(long)]
    pub non_amortized: bool,
    /// Never activate quality bounds.
    #[arg(long)]
    pub no_early_stopping: bool,
    /// Validate at reference lengths.
    #[arg(long)]
    pub validation_gt_length: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DecodeArgs {
    /// NAR decoder: argmax, odd or dedup.
    #[arg(long)]
    pub decoder: Option<NarDecoder>,
    /// AR beam width.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Half-width of the NAR length window (needs --teacher).
    #[arg(long)]
    pub length_beam: Option<usize>,
    /// Decode at the reference length (needs TSV input).
    #[arg(long)]
    pub use_gt_length: bool,
    /// Targets are <concat>-encoded.
    #[arg(long)]
    pub concat: bool,
    /// Leave the length term out of NCM.
    #[arg(long)]
    pub no_length_term: bool,
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("NAREM_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| {
            format!("NAREM_SEED={v:?} is not an unsigned integer")
        })?)),
        Err(_) => Ok(None),
    }
}

/// Layers, in increasing precedence: defaults, the config file (seed from
/// NAREM_SEED when the file has none), then flags.
pub struct Overrides<'a> {
    pub common: &'a CommonArgs,
    pub corpus: Option<&'a CorpusArgs>,
    pub model: Option<&'a ModelArgs>,
    pub train: Option<&'a TrainArgs>,
    pub em: Option<&'a EmArgs>,
    pub decode: Option<&'a DecodeArgs>,
}

pub fn load_file(path: &Path) -> Result<(RunConfig, serde_json::Value)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_value(raw.clone())
        .with_context(|| format!("invalid run config {}", path.display()))?;
    Ok((cfg, raw))
}

fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *dst = v.clone();
    }
}

pub fn resolve(o: &Overrides<'_>) -> Result<RunConfig> {
    let (mut cfg, raw) = match &o.common.config {
        Some(p) => load_file(p)?,
        None => (RunConfig::default(), serde_json::Value::Null),
    };
    let file_seed = raw.get("seed").is_some();
    let file_train_seed = raw.get("train").and_then(|t| t.get("seed")).is_some();
    let file_em_seed = raw.get("em").and_then(|t| t.get("seed")).is_some();

    if let Some(s) = o.common.seed {
        cfg.seed = s;
    } else if !file_seed {
        if let Some(s) = seed_from_env()? {
            cfg.seed = s;
        }
    }
    if o.common.seed.is_some() || !file_train_seed {
        cfg.train.seed = cfg.seed;
    }
    if o.common.seed.is_some() || !file_em_seed {
        cfg.em.seed = cfg.seed;
    }
    if o.common.out.is_some() {
        cfg.out = o.common.out.clone();
    }

    if let Some(c) = o.corpus {
        set(&mut cfg.corpus.exp, &c.exp);
        set(&mut cfg.corpus.n, &c.n);
        set(&mut cfg.corpus.valid_n, &c.valid_n);
        set(&mut cfg.corpus.test_n, &c.test_n);
        set(&mut cfg.corpus.len, &c.len);
    }
    if let Some(m) = o.model {
        set(&mut cfg.model.preset, &m.preset);
        let b = &mut cfg.model;
        for (dst, v) in [
            (&mut b.layers, m.layers),
            (&mut b.d_model, m.d_model),
            (&mut b.d_filter, m.d_filter),
            (&mut b.heads, m.heads),
            (&mut b.max_src_len, m.max_src_len),
            (&mut b.max_tgt_len, m.max_tgt_len),
        ] {
            if v.is_some() {
                *dst = v;
            }
        }
        if m.dropout.is_some() {
            b.dropout = m.dropout;
        }
    }
    if let Some(t) = o.train {
        let c = &mut cfg.train;
        set(&mut c.steps, &t.steps);
        set(&mut c.batch_size, &t.batch_size);
        set(&mut c.eval_interval, &t.eval_interval);
        set(&mut c.label_smoothing, &t.label_smoothing);
        set(&mut c.length_loss_weight, &t.length_loss_weight);
        set(&mut c.seed, &t.train_seed);
        let opt: &mut AdamConfig = &mut c.optimizer;
        set(&mut opt.lr_factor, &t.lr_factor);
        set(&mut opt.warmup_steps, &t.warmup);
    }
    if let Some(e) = o.em {
        let c = &mut cfg.em;
        set(&mut c.max_iters, &e.max_iters);
        set(&mut c.m_beam, &e.m_beam);
        set(&mut c.e_beam, &e.e_beam);
        set(&mut c.tolerance, &e.tolerance);
        if e.non_amortized {
            c.amortized = false;
        }
        if e.no_early_stopping {
            c.early_stopping = false;
        }
        if e.validation_gt_length {
            c.validation_gt_length = true;
        }
    }
    if let Some(d) = o.decode {
        let c = &mut cfg.decode;
        set(&mut c.decoder, &d.decoder);
        set(&mut c.beam, &d.beam);
        set(&mut c.length_beam, &d.length_beam);
        c.use_gt_length |= d.use_gt_length;
        c.concat |= d.concat;
        c.no_length_term |= d.no_length_term;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if !(1..=2).contains(&cfg.corpus.exp) {
        bail!("corpus.exp must be 1 or 2, got {}", cfg.corpus.exp);
    }
    if !PRESETS.iter().any(|(n, _)| *n == cfg.model.preset) {
        bail!("unknown preset `{}`", cfg.model.preset);
    }
    if cfg.decode.beam == 0 {
        bail!("decode.beam must be at least 1");
    }
    cfg.train.validate()?;
    Ok(())
}
