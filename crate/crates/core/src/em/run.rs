//! The outer EM loop, its persisted state, and resumption.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    distill_corpus, e_step, iteration_seed, qualities, BoundVector, EmSetup, PseudoDataset, Role,
    ValidationMetric,
};
use crate::corpus::{ParallelCorpus, Sentence};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::train::{bleu, evaluate, ncm, train_model, EvalOptions, TrainConfig};

/// Persisted progress of a run; also the run's final report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmState {
    /// Completed iterations.
    pub t: usize,
    /// Highest iteration whose AR model and pseudo dataset exist.
    pub prepared: usize,
    pub ncm_history: Vec<f64>,
    pub validation_history: Vec<f64>,
    pub bounds: BoundVector,
    /// Iteration whose distilled targets set the bounds.
    pub bounds_from: Option<usize>,
    /// Iteration that was redone after the validation drop, with the
    /// validation and NCM values of the discarded attempt.
    pub restart: Option<Restart>,
    pub best_iteration: usize,
    pub converged: bool,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Restart {
    pub iteration: usize,
    pub discarded_validation: f64,
    pub discarded_ncm: f64,
}

impl EmState {
    fn new(n: usize) -> Self {
        EmState {
            t: 0,
            prepared: 0,
            ncm_history: Vec::new(),
            validation_history: Vec::new(),
            bounds: BoundVector::inactive(n),
            bounds_from: None,
            restart: None,
            best_iteration: 0,
            converged: false,
            finished: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub t: usize,
    pub ncm: f64,
    pub validation: f64,
    /// Fraction of distilled targets that differ from the previous iteration.
    pub changed_targets: Option<f64>,
    pub pseudo_fallbacks: usize,
}

pub struct EmOutcome {
    pub state: EmState,
    /// NAR model of the best validation iteration.
    pub nar: Transformer,
    pub teacher: Transformer,
    pub iterations: Vec<IterationSummary>,
    /// Distilled corpus of every completed iteration.
    pub distilled: Vec<ParallelCorpus>,
}

/// Artifacts of one iteration held in memory.
struct Iteration {
    ar: Transformer,
    /// What `ar` was trained on (ground truth for `t = 1`).
    pseudo: ParallelCorpus,
    pseudo_quality: Vec<f64>,
    pseudo_fallbacks: usize,
    distilled: Option<ParallelCorpus>,
    nar: Option<Transformer>,
}

struct RunDir(Option<PathBuf>);

impl RunDir {
    fn iter_dir(&self, t: usize) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(format!("iter_{t}")))
    }

    fn write_state(&self, state: &EmState) -> Result<()> {
        if let Some(d) = &self.0 {
            let p = d.join("state.json");
            fs::write(&p, serde_json::to_string_pretty(state)? + "\n")
                .map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn save_prepared(&self, t: usize, it: &Iteration) -> Result<()> {
        if let Some(d) = self.iter_dir(t) {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            it.ar.save(&d.join("ar.ckpt"))?;
            let pd = PseudoDataset {
                corpus: it.pseudo.clone(),
                quality: it.pseudo_quality.clone(),
                selection: vec![f64::NAN; it.pseudo.len()],
                fallbacks: it.pseudo_fallbacks,
            };
            pd.save(&d.join("pseudo.tsv"))?;
        }
        Ok(())
    }

    fn save_pseudo(&self, t: usize, pd: &PseudoDataset) -> Result<()> {
        if let Some(d) = self.iter_dir(t) {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            pd.save(&d.join("pseudo.tsv"))?;
        }
        Ok(())
    }

    fn save_ar(&self, t: usize, ar: &Transformer) -> Result<()> {
        if let Some(d) = self.iter_dir(t) {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            ar.save(&d.join("ar.ckpt"))?;
        }
        Ok(())
    }

    fn save_m_step(&self, t: usize, distilled: &ParallelCorpus, nar: &Transformer) -> Result<()> {
        if let Some(d) = self.iter_dir(t) {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            distilled.save(&d.join("distilled.tsv"))?;
            nar.save(&d.join("nar.ckpt"))?;
        }
        Ok(())
    }
}

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

fn validate_model(nar: &Transformer, valid: &ParallelCorpus, setup: &EmSetup) -> Result<f64> {
    let opts = EvalOptions {
        use_ground_truth_length: setup.em.validation_gt_length,
        ..EvalOptions::default()
    };
    let (report, preds) = evaluate(nar, valid, &opts)?;
    Ok(match setup.em.validation {
        ValidationMetric::ExactMatch => report.exact_match,
        ValidationMetric::Bleu => {
            let refs: Vec<Sentence> = valid.targets().cloned().collect();
            bleu(&preds, &refs)? / 100.0
        }
    })
}

fn changed_fraction(a: &ParallelCorpus, b: &ParallelCorpus) -> f64 {
    let diff = a.targets().zip(b.targets()).filter(|(x, y)| x != y).count();
    diff as f64 / a.len() as f64
}

/// Runs EM from ground-truth data. With `run_dir`, every artifact is written
/// under it and an interrupted run resumes from its last completed step.
pub fn em_run(
    train: &ParallelCorpus,
    valid: &ParallelCorpus,
    setup: &EmSetup,
    run_dir: Option<&Path>,
) -> Result<EmOutcome> {
    setup.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyInput("EM needs training and validation pairs"));
    }
    let em = &setup.em;
    let dir = RunDir(run_dir.map(Path::to_path_buf));
    if let Some(d) = run_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let vocab = train.vocab().clone();

    let mut state = match run_dir.map(|d| d.join("state.json")).filter(|p| p.exists()) {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let s: EmState = serde_json::from_str(&text)?;
            let mut s: EmState = s;
            if !s.converged && s.t < em.max_iters {
                s.finished = false;
            }
            log::info!("resuming EM run after iteration {}", s.t);
            s
        }
        None => EmState::new(train.len()),
    };

    let mut its: Vec<Iteration> = Vec::new();
    if let Some(d) = run_dir {
        for t in 1..=state.prepared {
            let id = d.join(format!("iter_{t}"));
            let pd = PseudoDataset::load(&id.join("pseudo.tsv"), vocab.clone())?;
            let (distilled, nar) = if t <= state.t {
                (
                    Some(ParallelCorpus::load(
                        &id.join("distilled.tsv"),
                        vocab.clone(),
                    )?),
                    Some(Transformer::load(&id.join("nar.ckpt"))?),
                )
            } else {
                (None, None)
            };
            its.push(Iteration {
                ar: Transformer::load(&id.join("ar.ckpt"))?,
                pseudo: pd.corpus,
                pseudo_quality: pd.quality,
                pseudo_fallbacks: pd.fallbacks,
                distilled,
                nar,
            });
        }
    }

    if its.is_empty() {
        let phi1 = train_model(
            train,
            &seeded(&setup.ar_train, iteration_seed(em.seed, 1, Role::Ar)),
            &setup.ar_model,
            None,
        )?
        .model;
        let q = qualities(&phi1, train)?;
        its.push(Iteration {
            ar: phi1,
            pseudo: train.clone(),
            pseudo_quality: q.0,
            pseudo_fallbacks: 0,
            distilled: None,
            nar: None,
        });
        state.prepared = 1;
        dir.save_prepared(1, &its[0])?;
        dir.write_state(&state)?;
    }
    let teacher = its[0].ar.clone();

    while !state.finished {
        if state.prepared == state.t {
            let t = state.t;
            // E-step: candidates from φ^t, fallback to the pseudo target of φ^t
            // when it clears the bound, else to the bound's own target.
            let cur = &its[t - 1];
            let mut fallback: Vec<Sentence> = cur.pseudo.targets().cloned().collect();
            let mut fallback_q = cur.pseudo_quality.clone();
            if let Some(from) = state.bounds_from {
                let src = its[from - 1]
                    .distilled
                    .as_ref()
                    .expect("completed iteration");
                let src_q = qualities(&teacher, src)?;
                for i in 0..fallback.len() {
                    if !state.bounds.admits(i, fallback_q[i]) {
                        fallback[i] = src.pairs()[i].1.clone();
                        fallback_q[i] = src_q.0[i];
                    }
                }
            }
            let (pd, ar) = e_step(
                cur.nar.as_ref().expect("just trained"),
                &cur.ar,
                &teacher,
                train,
                &state.bounds,
                &fallback,
                &fallback_q,
                em.e_beam,
                &setup.ar_model,
                &seeded(&setup.ar_train, iteration_seed(em.seed, t + 1, Role::Ar)),
            )?;
            dir.save_ar(t + 1, &ar)?;
            dir.save_pseudo(t + 1, &pd)?;
            its.push(Iteration {
                ar,
                pseudo: pd.corpus,
                pseudo_quality: pd.quality,
                pseudo_fallbacks: pd.fallbacks,
                distilled: None,
                nar: None,
            });
            state.prepared = t + 1;
            dir.write_state(&state)?;
        }

        let t = state.t + 1;
        let nar_cfg = seeded(&setup.nar_train, iteration_seed(em.seed, t, Role::Nar));
        let distilled = if em.amortized || t == 1 {
            distill_corpus(&its[t - 1].ar, train, em.m_beam, &format!("distilled-{t}"))?
        } else {
            its[t - 1].pseudo.clone()
        };
        let nar = train_model(&distilled, &nar_cfg, &setup.nar_model, None)?.model;
        let ncm_t = ncm(&nar, &distilled)?;
        let val_t = validate_model(&nar, valid, setup)?;
        log::info!("EM iteration {t}: validation {val_t:.4}, NCM {ncm_t:.4}");

        let dropped = t > 1 && val_t < state.validation_history[t - 2];
        if dropped && em.early_stopping && state.bounds_from.is_none() {
            // Capture bounds from the last good iteration and redo its E-step.
            let prev = &its[t - 2];
            let prev_distilled = prev.distilled.as_ref().expect("completed iteration");
            let q = qualities(&teacher, prev_distilled)?;
            state.bounds = BoundVector::from_quality(&q);
            state.bounds_from = Some(t - 1);
            state.restart = Some(Restart {
                iteration: t,
                discarded_validation: val_t,
                discarded_ncm: ncm_t,
            });
            log::info!(
                "validation dropped at iteration {t}; activating bounds from iteration {}",
                t - 1
            );
            let fallback: Vec<Sentence> = prev_distilled.targets().cloned().collect();
            let (pd, ar) = e_step(
                prev.nar.as_ref().expect("completed iteration"),
                &prev.ar,
                &teacher,
                train,
                &state.bounds,
                &fallback,
                &q.0,
                em.e_beam,
                &setup.ar_model,
                &seeded(&setup.ar_train, iteration_seed(em.seed, t, Role::Ar)),
            )?;
            its.truncate(t - 1);
            let it = Iteration {
                ar,
                pseudo: pd.corpus.clone(),
                pseudo_quality: pd.quality.clone(),
                pseudo_fallbacks: pd.fallbacks,
                distilled: None,
                nar: None,
            };
            dir.save_ar(t, &it.ar)?;
            dir.save_pseudo(t, &pd)?;
            its.push(it);
            state.prepared = t;
            dir.write_state(&state)?;
            continue;
        }

        dir.save_m_step(t, &distilled, &nar)?;
        state.t = t;
        state.ncm_history.push(ncm_t);
        state.validation_history.push(val_t);
        if state.best_iteration == 0 || val_t > state.validation_history[state.best_iteration - 1] {
            state.best_iteration = t;
        }
        its[t - 1].distilled = Some(distilled);
        its[t - 1].nar = Some(nar);

        if t > 1 && (val_t - state.validation_history[t - 2]).abs() < em.tolerance {
            state.converged = true;
            state.finished = true;
        } else if t == em.max_iters {
            state.finished = true;
        }
        dir.write_state(&state)?;
    }

    let mut iterations = Vec::with_capacity(state.t);
    for t in 1..=state.t {
        let d = its[t - 1].distilled.as_ref().expect("completed iteration");
        iterations.push(IterationSummary {
            t,
            ncm: state.ncm_history[t - 1],
            validation: state.validation_history[t - 1],
            changed_targets: (t > 1)
                .then(|| changed_fraction(its[t - 2].distilled.as_ref().expect("completed"), d)),
            pseudo_fallbacks: its[t - 1].pseudo_fallbacks,
        });
    }
    let best = state.best_iteration;
    let nar = its[best - 1].nar.clone().expect("completed iteration");
    let distilled = its[..state.t]
        .iter()
        .map(|i| i.distilled.clone().expect("completed"))
        .collect();
    Ok(EmOutcome {
        state,
        nar,
        teacher,
        iterations,
        distilled,
    })
}
