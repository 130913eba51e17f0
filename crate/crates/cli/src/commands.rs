use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use narem::corpus::{gen_exp1, gen_exp2, load_sources};
use narem::decode::{
    beam_search, best_translation, concat_decode, concat_encode, parallel_length_decode, rescore,
    CandidateSet, LengthMode,
};
use narem::em::{distill_corpus, em_run, EmState, IterationSummary};
use narem::train::{evaluate, train_model};
use narem::{
    EmSetup, EvalOptions, EvalReport, ParallelCorpus, Sentence, TokenId, Transformer, Vocabulary,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::check::Assertion;
use crate::config::{
    resolve, CommonArgs, CorpusArgs, DecodeArgs, EmArgs, ModelArgs, Overrides, RunConfig, TrainArgs,
};
use crate::logging::PROGRESS;

/// Raised when an `--assert` condition does not hold.
#[derive(Debug)]
pub struct AssertionFailed(pub Vec<String>);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "assertion failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for AssertionFailed {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Ar,
    Nar,
}

impl Arch {
    fn is_ar(self) -> bool {
        self == Arch::Ar
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg
        .out
        .clone()
        .ok_or_else(|| anyhow!("an output directory is required (--out)"))?;
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

/// `--vocab`, else `vocab.txt` next to `data`.
fn vocab_for(explicit: &Option<PathBuf>, data: &Path) -> Result<Arc<Vocabulary>> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => data
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt"),
    };
    if !path.exists() {
        bail!("vocabulary {} not found; pass --vocab", path.display());
    }
    Ok(Arc::new(Vocabulary::load(&path)?))
}

fn load_corpus(path: &Path, vocab: Arc<Vocabulary>) -> Result<ParallelCorpus> {
    ParallelCorpus::load(path, vocab).with_context(|| format!("loading {}", path.display()))
}

fn encode_targets(c: &ParallelCorpus) -> Result<ParallelCorpus> {
    let targets = c
        .targets()
        .map(|y| concat_encode(y))
        .collect::<narem::Result<Vec<_>>>()?;
    Ok(c.with_targets(targets, c.name())?)
}

fn load_model(path: &Path, arch: Option<Arch>, vocab: &Vocabulary) -> Result<Transformer> {
    let m = Transformer::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(a) = arch {
        if m.is_autoregressive() != a.is_ar() {
            return Err(narem::Error::Config(format!(
                "{} holds {} model but --arch {:?} was given",
                path.display(),
                if m.is_autoregressive() {
                    "an AR"
                } else {
                    "a NAR"
                },
                a
            ))
            .into());
        }
    }
    if m.config().vocab_size != vocab.len() {
        return Err(narem::Error::Config(format!(
            "{} has vocabulary size {} but the vocabulary file has {}",
            path.display(),
            m.config().vocab_size,
            vocab.len()
        ))
        .into());
    }
    Ok(m)
}

fn stats_line(name: &str, c: &ParallelCorpus) -> String {
    format!(
        "{name:<6} {:>8} pairs  mean |x| {:>7.3}  mean |y| {:>7.3}",
        c.len(),
        c.mean_source_len(),
        c.mean_target_len()
    )
}

#[derive(Args, Debug)]
pub struct GenData {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
}

impl GenData {
    pub fn common(&self) -> &CommonArgs {
        &self.common
    }

    pub fn run(&self) -> Result<()> {
        let cfg = resolve(&Overrides {
            common: &self.common,
            corpus: Some(&self.corpus),
            model: None,
            train: None,
            em: None,
            decode: None,
        })?;
        if self.common.print_config {
            return print_config(&cfg);
        }
        let c = &cfg.corpus;
        if c.n == 0 || c.valid_n == 0 || c.test_n == 0 {
            bail!("--n, --valid-n and --test-n must all be at least 1");
        }
        let dir = out_dir(&cfg)?;
        let total = c.n + c.valid_n + c.test_n;
        // Drawing all splits at once keeps the second task's sources
        // distinct across splits.
        let all = if c.exp == 1 {
            gen_exp1(total, c.len, cfg.seed)?
        } else {
            gen_exp2(total, c.len, cfg.seed)?
        };
        let (train, rest) = all.split_at(c.n)?;
        let (valid, test) = rest.split_at(c.valid_n)?;
        train.save(&dir.join("train.tsv"))?;
        valid.save(&dir.join("valid.tsv"))?;
        test.save(&dir.join("test.tsv"))?;
        all.vocab().save(&dir.join("vocab.txt"))?;
        save_config(&dir, &cfg)?;
        println!("{}", stats_line("train", &train));
        println!("{}", stats_line("valid", &valid));
        println!("{}", stats_line("test", &test));
        Ok(())
    }
}

/// The saved copy leaves out `out`: it is the directory holding the file.
fn save_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let mut c = cfg.clone();
    c.out = None;
    write_json(&dir.join("config.json"), &c)
}

fn print_config(cfg: &RunConfig) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Model family.
    #[arg(long, value_enum)]
    arch: Arch,
    /// Training TSV.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Vocabulary file (default: vocab.txt next to --data).
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Validation TSV, scored at every report step.
    #[arg(long, value_name = "FILE")]
    valid: Option<PathBuf>,
    /// Train on <concat>-encoded targets.
    #[arg(long)]
    concat: bool,
}

impl Train {
    pub fn common(&self) -> &CommonArgs {
        &self.common
    }

    pub fn run(&self) -> Result<()> {
        let mut cfg = resolve(&Overrides {
            common: &self.common,
            corpus: None,
            model: Some(&self.model),
            train: Some(&self.train),
            em: None,
            decode: None,
        })?;
        cfg.decode.concat |= self.concat;
        if self.common.print_config {
            return print_config(&cfg);
        }
        let vocab = vocab_for(&self.vocab, &self.data)?;
        let mut corpus = load_corpus(&self.data, vocab.clone())?;
        let mut valid = match &self.valid {
            Some(p) => Some(load_corpus(p, vocab)?),
            None => None,
        };
        if cfg.decode.concat {
            corpus = encode_targets(&corpus)?;
            valid = valid.map(|v| encode_targets(&v)).transpose()?;
        }
        let model_cfg = cfg.model.resolve(self.arch.is_ar(), &corpus)?;
        let dir = out_dir(&cfg)?;
        log::info!(
            "training {} model on {} pairs for {} steps",
            if self.arch.is_ar() { "AR" } else { "NAR" },
            corpus.len(),
            cfg.train.steps
        );
        let opts = EvalOptions {
            use_ground_truth_length: true,
            concat_aware: cfg.decode.concat,
            ..EvalOptions::default()
        };
        let mut observer = |step: u64, m: &Transformer| -> narem::Result<()> {
            if let Some(v) = &valid {
                let (r, _) = evaluate(m, v, &opts)?;
                log::info!(
                    target: PROGRESS,
                    "step {step}: valid exact match {:.4}, token nll {:.4}",
                    r.exact_match,
                    r.token_nll
                );
            }
            Ok(())
        };
        let out = train_model(&corpus, &cfg.train, &model_cfg, Some(&mut observer))?;
        out.model.save(&dir.join("model.ckpt"))?;
        save_config(&dir, &cfg)?;
        write_json(&dir.join("model.json"), &model_cfg)?;
        let mut losses = String::new();
        for (i, l) in out.losses.iter().enumerate() {
            let _ = writeln!(losses, "{}\t{l:?}", i + 1);
        }
        fs::write(dir.join("losses.tsv"), losses)?;
        let n = out.losses.len();
        let tail = n.min(100);
        log::info!(
            "done: mean loss of the last {tail} steps {:.4}; wrote {}",
            out.mean_loss(n - tail, n),
            dir.join("model.ckpt").display()
        );
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Distill {
    #[command(flatten)]
    common: CommonArgs,
    /// AR teacher checkpoint.
    #[arg(long, value_name = "FILE")]
    teacher: PathBuf,
    /// Corpus whose sources are translated.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Beam width (default: the config's em.m_beam).
    #[arg(long)]
    beam: Option<usize>,
}

impl Distill {
    pub fn common(&self) -> &CommonArgs {
        &self.common
    }

    pub fn run(&self) -> Result<()> {
        let cfg = resolve(&Overrides {
            common: &self.common,
            corpus: None,
            model: None,
            train: None,
            em: None,
            decode: None,
        })?;
        if self.common.print_config {
            return print_config(&cfg);
        }
        let out = cfg
            .out
            .clone()
            .ok_or_else(|| anyhow!("an output file is required (--out)"))?;
        let vocab = vocab_for(&self.vocab, &self.data)?;
        let teacher = load_model(&self.teacher, Some(Arch::Ar), &vocab)?;
        let corpus = load_corpus(&self.data, vocab)?;
        let beam = self.beam.unwrap_or(cfg.em.m_beam);
        let d = distill_corpus(&teacher, &corpus, beam, "distilled")?;
        if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(p)?;
        }
        d.save(&out)?;
        println!("{}", stats_line("distilled", &d));
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Em {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    em: EmArgs,
    /// Ground-truth training TSV.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Validation TSV.
    #[arg(long, value_name = "FILE")]
    valid: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
}

#[derive(Serialize)]
struct EmSummary<'a> {
    state: &'a EmState,
    iterations: &'a [IterationSummary],
}

pub fn em_table(state: &EmState, iterations: &[IterationSummary]) -> String {
    let mut s = format!(
        "{:>4} {:>10} {:>10} {:>9} {:>9}\n",
        "iter", "ncm", "valid", "changed", "fallback"
    );
    for it in iterations {
        let changed = it
            .changed_targets
            .map_or_else(|| "-".to_string(), |c| format!("{c:.4}"));
        let _ = writeln!(
            s,
            "{:>4} {:>10.4} {:>10.4} {:>9} {:>9}",
            it.t, it.ncm, it.validation, changed, it.pseudo_fallbacks
        );
    }
    let _ = writeln!(
        s,
        "best iteration {}, converged {}",
        state.best_iteration, state.converged
    );
    s
}

impl Em {
    pub fn common(&self) -> &CommonArgs {
        &self.common
    }

    pub fn run(&self) -> Result<()> {
        let cfg = resolve(&Overrides {
            common: &self.common,
            corpus: None,
            model: Some(&self.model),
            train: Some(&self.train),
            em: Some(&self.em),
            decode: None,
        })?;
        if self.common.print_config {
            return print_config(&cfg);
        }
        let vocab = vocab_for(&self.vocab, &self.data)?;
        let train = load_corpus(&self.data, vocab.clone())?;
        let valid = load_corpus(&self.valid, vocab)?;
        let setup = EmSetup {
            em: cfg.em.clone(),
            ar_model: cfg.model.resolve(true, &train)?,
            nar_model: cfg.model.resolve(false, &train)?,
            ar_train: cfg.train.clone(),
            nar_train: cfg.train.clone(),
        };
        let dir = out_dir(&cfg)?;
        save_config(&dir, &cfg)?;
        write_json(&dir.join("setup.json"), &setup)?;
        let out = em_run(&train, &valid, &setup, Some(&dir))?;
        out.nar.save(&dir.join("nar.ckpt"))?;
        out.teacher.save(&dir.join("teacher.ckpt"))?;
        write_json(
            &dir.join("summary.json"),
            &EmSummary {
                state: &out.state,
                iterations: &out.iterations,
            },
        )?;
        print!("{}", em_table(&out.state, &out.iterations));
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Decode {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Sources, one per line; TSV files are accepted (first column).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Expected model family; a mismatch is a config error.
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    /// AR checkpoint that rescores NAR length candidates.
    #[arg(long, value_name = "FILE")]
    teacher: Option<PathBuf>,
    /// Write every sentence's candidates as JSON.
    #[arg(long, value_name = "FILE")]
    dump_candidates: Option<PathBuf>,
}

#[derive(Serialize)]
struct DumpedCandidate {
    length: usize,
    tokens: String,
    model_score: f64,
    teacher_score: Option<f64>,
}

fn teacher_scores(
    teacher: Option<&Transformer>,
    x: &[TokenId],
    c: &CandidateSet,
) -> Result<Vec<Option<f64>>> {
    Ok(match teacher {
        Some(t) => {
            let pairs: Vec<(&[TokenId], &[TokenId])> =
                c.iter().map(|k| (x, k.tokens.tokens())).collect();
            t.ar_log_likelihoods(&pairs)?
                .into_iter()
                .map(Some)
                .collect()
        }
        None => vec![None; c.len()],
    })
}

impl Decode {
    pub fn common(&self) -> &CommonArgs {
        &self.common
    }

    fn one(
        &self,
        cfg: &RunConfig,
        model: &Transformer,
        teacher: Option<&Transformer>,
        x: &[TokenId],
        gt_len: Option<usize>,
    ) -> Result<(Sentence, CandidateSet, Vec<Option<f64>>)> {
        let d = &cfg.decode;
        if model.is_autoregressive() {
            let (best, hyps) = match gt_len {
                Some(l) => {
                    let h = beam_search(model, x, d.beam, LengthMode::Forced(l))?;
                    (h[0].tokens.clone(), h)
                }
                None => {
                    let h = beam_search(model, x, d.beam, LengthMode::eos_for(model))?;
                    let best = if h[0].finished {
                        h[0].tokens.clone()
                    } else {
                        best_translation(model, x, d.beam)?.tokens
                    };
                    (best, h)
                }
            };
            let cands = CandidateSet::from(hyps);
            let ts = teacher_scores(teacher, x, &cands)?;
            return Ok((best, cands, ts));
        }
        if d.length_beam > 0 {
            let t = teacher.ok_or_else(|| anyhow!("--length-beam needs --teacher"))?;
            let cands = parallel_length_decode(model, x, d.length_beam, d.decoder)?;
            let r = rescore(&cands, t, x)?;
            let ts = r.teacher_scores.iter().copied().map(Some).collect();
            return Ok((r.best, cands, ts));
        }
        let dist = model.predict_lengths(&[x])?.remove(0);
        let len = gt_len.unwrap_or_else(|| dist.argmax());
        let unary = model.nar_log_probs(&[(x, len)])?.remove(0);
        let (tokens, s) = d.decoder.run(&unary)?;
        let cands = CandidateSet(vec![narem::decode::Candidate {
            tokens: tokens.clone(),
            score: dist.log_prob(len) + s,
        }]);
        let ts = teacher_scores(teacher, x, &cands)?;
        Ok((tokens, cands, ts))
    }

    pub fn run(&self) -> Result<()> {
        let cfg = resolve(&Overrides {
            common: &self.common,
            corpus: None,
            model: None,
            train: None,
            em: None,
            decode: Some(&self.decode),
        })?;
        if self.common.print_config {
            return print_config(&cfg);
        }
        let vocab = vocab_for(&self.vocab, &self.input)?;
        let model = load_model(&self.model, self.arch, &vocab)?;
        let teacher = match &self.teacher {
            Some(p) => Some(load_model(p, Some(Arch::Ar), &vocab)?),
            None => None,
        };
        let (sources, lengths): (Vec<Sentence>, Option<Vec<usize>>) = if cfg.decode.use_gt_length {
            let mut c = load_corpus(&self.input, vocab.clone())?;
            if cfg.decode.concat {
                c = encode_targets(&c)?;
            }
            let l = c.targets().map(|y| y.len()).collect();
            (c.sources().cloned().collect(), Some(l))
        } else {
            (load_sources(&self.input, &vocab)?, None)
        };
        let results: Vec<(Sentence, CandidateSet, Vec<Option<f64>>)> = (0..sources.len())
            .into_par_iter()
            .map(|i| {
                self.one(
                    &cfg,
                    &model,
                    teacher.as_ref(),
                    &sources[i],
                    lengths.as_ref().map(|l| l[i]),
                )
            })
            .collect::<Result<_>>()?;
        let mut text = String::new();
        let mut dump = Vec::with_capacity(sources.len());
        for (best, cands, ts) in results {
            let shown = if cfg.decode.concat {
                concat_decode(&best)
            } else {
                best
            };
            let _ = writeln!(text, "{}", vocab.decode(&shown));
            dump.push(
                cands
                    .iter()
                    .zip(ts)
                    .map(|(c, t)| DumpedCandidate {
                        length: c.tokens.len(),
                        tokens: vocab.decode(&c.tokens),
                        model_score: c.score,
                        teacher_score: t,
                    })
                    .collect::<Vec<_>>(),
            );
        }
        match &cfg.out {
            Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
            None => print!("{text}"),
        }
        if let Some(p) = &self.dump_candidates {
            write_json(p, &dump)?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Eval {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Reference TSV.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Expected model family; a mismatch is a config error.
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    /// Condition such as `exact_match>=0.95`; exit code 2 when one fails.
    #[arg(long = "assert", value_name = "EXPR")]
    asserts: Vec<Assertion>,
}

impl Eval {
    pub fn common(&self) -> &CommonArgs {
        &self.common
    }

    pub fn run(&self) -> Result<()> {
        let cfg = resolve(&Overrides {
            common: &self.common,
            corpus: None,
            model: None,
            train: None,
            em: None,
            decode: Some(&self.decode),
        })?;
        if self.common.print_config {
            return print_config(&cfg);
        }
        let vocab = vocab_for(&self.vocab, &self.data)?;
        let model = load_model(&self.model, self.arch, &vocab)?;
        let mut corpus = load_corpus(&self.data, vocab)?;
        if cfg.decode.concat {
            corpus = encode_targets(&corpus)?;
        }
        let opts = EvalOptions {
            use_ground_truth_length: cfg.decode.use_gt_length,
            decoder: cfg.decode.decoder,
            concat_aware: cfg.decode.concat,
            include_length_term: !cfg.decode.no_length_term,
        };
        let (report, _) = evaluate(&model, &corpus, &opts)?;
        println!("{}", serde_json::to_string(&report)?);
        print!("{}", report.table());
        if let Some(p) = &cfg.out {
            write_json(p, &report)?;
        }
        let failed: Vec<String> = self
            .asserts
            .iter()
            .map(|a| a.holds(&report).map(|ok| (!ok).then(|| a.to_string())))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        if !failed.is_empty() {
            return Err(AssertionFailed(failed).into());
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Report {
    /// An eval report JSON file or an EM run directory.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
}

#[derive(serde::Deserialize)]
struct EmSummaryOwned {
    state: EmState,
    iterations: Vec<IterationSummary>,
}

impl Report {
    pub fn run(&self) -> Result<()> {
        let p = &self.input;
        if p.is_dir() {
            let f = p.join("summary.json");
            let text =
                fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
            let s: EmSummaryOwned = serde_json::from_str(&text)?;
            print!("{}", em_table(&s.state, &s.iterations));
        } else {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let r: EvalReport = serde_json::from_str(&text)
                .with_context(|| format!("{} is not an eval report", p.display()))?;
            print!("{}", r.table());
        }
        Ok(())
    }
}
