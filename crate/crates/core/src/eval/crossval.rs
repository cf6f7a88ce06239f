//! k-fold cross-validation driver, optionally repeated over seeds and
//! fanned out to worker threads. Results join deterministically by
//! (repeat, fold) index, so the report is identical however many workers
//! run.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::corpus::{split_folds, Document};
use crate::encoder::load_precomputed;
use crate::eval::{evaluate_docs, ClauseEvalMode, Metrics};
use crate::trainer::{train, EncoderSpec, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CrossvalOptions {
    pub folds: usize,
    /// Independent repetitions with shifted training seeds; the fold split
    /// itself stays fixed by the base seed.
    pub repeats: usize,
    /// Worker thread cap; 1 runs everything inline.
    pub jobs: usize,
    pub clause_eval_mode: ClauseEvalMode,
}

impl Default for CrossvalOptions {
    fn default() -> Self {
        CrossvalOptions {
            folds: 10,
            repeats: 1,
            jobs: 1,
            clause_eval_mode: ClauseEvalMode::Heads,
        }
    }
}

/// Scores of a single held-out fold.
#[derive(Debug, Clone)]
pub struct FoldScores {
    pub fold: usize,
    pub seed: u64,
    pub ecpe: Metrics,
    pub ee: Metrics,
    pub ce: Metrics,
}

/// Precision/recall/F1 triple averaged over folds (unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct RepeatScores {
    pub repeat: usize,
    pub folds: Vec<FoldScores>,
}

impl RepeatScores {
    pub fn mean(&self, task: &str) -> Prf {
        mean_prf(self.folds.iter().map(|f| task_metrics(f, task)))
    }
}

fn task_metrics(f: &FoldScores, task: &str) -> Metrics {
    match task {
        "ecpe" => f.ecpe,
        "ee" => f.ee,
        "ce" => f.ce,
        other => panic!("unknown task {other}"),
    }
}

fn mean_prf(metrics: impl Iterator<Item = Metrics>) -> Prf {
    let mut acc = Prf::default();
    let mut n = 0usize;
    for m in metrics {
        acc.precision += m.precision();
        acc.recall += m.recall();
        acc.f1 += m.f1();
        n += 1;
    }
    if n > 0 {
        acc.precision /= n as f64;
        acc.recall /= n as f64;
        acc.f1 /= n as f64;
    }
    acc
}

#[derive(Debug, Clone)]
pub struct CrossvalReport {
    pub folds: usize,
    pub repeats: Vec<RepeatScores>,
}

impl CrossvalReport {
    /// Unweighted mean over every repeat and fold.
    pub fn overall_mean(&self, task: &str) -> Prf {
        mean_prf(
            self.repeats
                .iter()
                .flat_map(|r| r.folds.iter())
                .map(|f| task_metrics(f, task)),
        )
    }

    /// Aligned text: one line per fold per repeat, means per repeat, and an
    /// overall mean when repeated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>4} {:>26} {:>26} {:>26}",
            "repeat", "fold", "ECPE (P/R/F1)", "EE (P/R/F1)", "CE (P/R/F1)"
        );
        let cell = |m: Metrics| format!("{:.4}/{:.4}/{:.4}", m.precision(), m.recall(), m.f1());
        let prf_cell =
            |p: Prf| format!("{:.4}/{:.4}/{:.4}", p.precision, p.recall, p.f1);
        for rep in &self.repeats {
            for f in &rep.folds {
                let _ = writeln!(
                    out,
                    "{:>6} {:>4} {:>26} {:>26} {:>26}",
                    rep.repeat,
                    f.fold,
                    cell(f.ecpe),
                    cell(f.ee),
                    cell(f.ce)
                );
            }
            let _ = writeln!(
                out,
                "{:>6} {:>4} {:>26} {:>26} {:>26}",
                rep.repeat,
                "mean",
                prf_cell(rep.mean("ecpe")),
                prf_cell(rep.mean("ee")),
                prf_cell(rep.mean("ce"))
            );
        }
        if self.repeats.len() > 1 {
            let _ = writeln!(
                out,
                "{:>6} {:>4} {:>26} {:>26} {:>26}",
                "all",
                "mean",
                prf_cell(self.overall_mean("ecpe")),
                prf_cell(self.overall_mean("ee")),
                prf_cell(self.overall_mean("ce"))
            );
        }
        out
    }

    /// One row per task per fold per repeat:
    /// `task,repeat,fold,precision,recall,f1,tp,fp,fn`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,repeat,fold,precision,recall,f1,tp,fp,fn\n");
        for rep in &self.repeats {
            for f in &rep.folds {
                for task in ["ecpe", "ee", "ce"] {
                    let m = task_metrics(f, task);
                    let _ = writeln!(
                        out,
                        "{task},{},{},{:.6},{:.6},{:.6},{},{},{}",
                        rep.repeat,
                        f.fold,
                        m.precision(),
                        m.recall(),
                        m.f1(),
                        m.tp,
                        m.fp,
                        m.fn_
                    );
                }
            }
            for task in ["ecpe", "ee", "ce"] {
                let p = rep.mean(task);
                let _ = writeln!(
                    out,
                    "{task},{},mean,{:.6},{:.6},{:.6},,,",
                    rep.repeat, p.precision, p.recall, p.f1
                );
            }
        }
        out
    }
}

/// For each fold, train on the other k-1 folds (seed = base seed plus the
/// task index, so repeat 0 trains fold f with `seed + f`) and evaluate on
/// the held-out fold.
pub fn crossval(
    corpus: &[Document],
    encoder: &EncoderSpec,
    cfg: &TrainConfig,
    opts: &CrossvalOptions,
) -> Result<CrossvalReport> {
    if opts.folds < 2 {
        return Err(Error::Config("cross-validation needs >= 2 folds".into()));
    }
    if opts.repeats < 1 || opts.jobs < 1 {
        return Err(Error::Config("repeats and jobs must be >= 1".into()));
    }
    let folds = split_folds(corpus.len(), opts.folds, cfg.seed)?;
    let precomputed = match encoder {
        EncoderSpec::Toy => None,
        EncoderSpec::Precomputed(path) => Some(load_precomputed(path, cfg.dim)?.1),
    };

    let tasks: Vec<(usize, usize)> = (0..opts.repeats)
        .flat_map(|r| (0..opts.folds).map(move |f| (r, f)))
        .collect();
    let results: Mutex<Vec<Option<std::result::Result<FoldScores, Error>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);

    let run_task = |repeat: usize, fold: usize| -> Result<FoldScores> {
        let seed = cfg.seed + (repeat * opts.folds + fold) as u64;
        let held_out: Vec<Document> = folds[fold].iter().map(|&i| corpus[i].clone()).collect();
        let train_docs: Vec<Document> = folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, idxs)| idxs.iter().map(|&i| corpus[i].clone()))
            .collect();
        let fold_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let wrap = |e: Error| Error::Fold {
            fold,
            repeat,
            source: Box::new(e),
        };
        let out = train(&train_docs, encoder.clone(), &fold_cfg).map_err(wrap)?;
        let scores = evaluate_docs(
            &held_out,
            &out.checkpoint,
            precomputed.as_ref(),
            opts.clause_eval_mode,
        )
        .map_err(wrap)?;
        Ok(FoldScores {
            fold,
            seed,
            ecpe: scores.ecpe,
            ee: scores.ee,
            ce: scores.ce,
        })
    };

    let workers = opts.jobs.min(tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= tasks.len() {
                    break;
                }
                let (repeat, fold) = tasks[idx];
                let result = run_task(repeat, fold);
                results.lock().expect("no poisoned worker").as_mut_slice()[idx] = Some(result);
            });
        }
    });

    let collected = results.into_inner().expect("workers joined");
    let mut repeats: Vec<RepeatScores> = (0..opts.repeats)
        .map(|r| RepeatScores {
            repeat: r,
            folds: Vec::new(),
        })
        .collect();
    for (slot, (repeat, _)) in collected.into_iter().zip(&tasks) {
        let scores = slot.expect("every task ran")?;
        repeats[*repeat].folds.push(scores);
    }
    Ok(CrossvalReport {
        folds: opts.folds,
        repeats,
    })
}
