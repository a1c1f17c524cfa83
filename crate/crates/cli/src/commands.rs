//! The four commands: teacher training, distillation, checkpoint
//! evaluation, and the comparison grid.
//!
//! Every command resolves its configuration, generates the data
//! deterministically from the configured seeds, runs, and writes artifacts
//! under `<out>/<run-id>/`. Outputs contain no timestamps or wall-clock
//! values, so rerunning a command with the same config produces
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use minidistill::data::{generate_corpus, generate_minimal_pairs, Corpus, Grammar, MinimalPair};
use minidistill::distill::Objective;
use minidistill::error::Error as CoreError;
use minidistill::eval::{
    contexts_from_corpus, exact_sequence_kl, metrics_to_csv, minimal_pair_accuracy, mode_mass,
    perplexity, write_json_summary, write_metrics_csv, MetricsRow, RunSummary,
};
use minidistill::model::{ModelConfig, Weights};
use minidistill::trainer::{
    load_checkpoint, run_distillation, save_checkpoint, train_teacher, StepRecord,
};
use minidistill::util::derive_seed;

use crate::config::{ExperimentConfig, GrammarSource, ModelSection};
use crate::error::{CliError, Result};

pub const COMPARISON_CSV_HEADER: &str = "run_id,objective,teachers,seed,final_loss_total,final_perplexity,final_mp_accuracy,final_mode_mass_m1,final_mode_mass_m5";

fn objective_name(objective: Objective) -> &'static str {
    match objective {
        Objective::Forward => "forward",
        Objective::Reverse => "reverse",
    }
}

/// Bucket a library error by its nature: bad inputs are configuration
/// problems, file-system failures are I/O, everything else happened at run
/// time.
fn classify(context: &str, e: CoreError) -> CliError {
    match e {
        CoreError::Io(_) => CliError::Io(format!("{context}: {e}")),
        CoreError::InvalidArgument(_) => CliError::Config(format!("{context}: {e}")),
        _ => CliError::Runtime(format!("{context}: {e}")),
    }
}

fn load_grammar(cfg: &ExperimentConfig) -> Result<Grammar> {
    match &cfg.grammar {
        GrammarSource::Builtin => Ok(Grammar::builtin()),
        GrammarSource::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Io(format!("cannot read grammar file '{}': {e}", path.display()))
            })?;
            Grammar::parse(&text).map_err(|e| {
                CliError::Config(format!("grammar file '{}': {e}", path.display()))
            })
        }
    }
}

/// Held-out evaluation inputs, all derived deterministically from the data
/// seed so every run of a config sees the same corpus, pairs, and contexts.
struct EvalData {
    corpus: Corpus,
    pairs: Vec<MinimalPair>,
    contexts: Vec<Vec<u32>>,
}

fn prepare_data(cfg: &ExperimentConfig) -> Result<(Corpus, EvalData)> {
    let grammar = load_grammar(cfg)?;
    let train_corpus = generate_corpus(&grammar, cfg.data_seed, cfg.data_tokens)
        .map_err(|e| classify("generating the training corpus", e))?;
    let eval_corpus = generate_corpus(
        &grammar,
        derive_seed(cfg.data_seed, "eval-corpus", 0),
        cfg.eval_tokens,
    )
    .map_err(|e| classify("generating the evaluation corpus", e))?;
    // Grammars without agreement rules have no minimal pairs to score; the
    // accuracy column simply stays empty for them.
    let pairs = if grammar.has_agreements() {
        generate_minimal_pairs(
            &grammar,
            derive_seed(cfg.data_seed, "minimal-pairs", 0),
            cfg.minimal_pairs,
        )
        .map_err(|e| classify("generating minimal pairs", e))?
    } else {
        Vec::new()
    };
    let contexts = contexts_from_corpus(&eval_corpus, 64, cfg.train.seq_len.min(16))
        .map_err(|e| classify("selecting evaluation contexts", e))?;
    Ok((
        train_corpus,
        EvalData {
            corpus: eval_corpus,
            pairs,
            contexts,
        },
    ))
}

fn model_config(
    section: &ModelSection,
    vocab: usize,
    train: &minidistill::trainer::TrainConfig,
    role: &str,
) -> Result<ModelConfig> {
    let max_seq_len = section.max_seq_len.unwrap_or(train.seq_len);
    if max_seq_len < train.seq_len {
        return Err(CliError::Config(format!(
            "{role}.max_seq_len = {max_seq_len} is shorter than train.seq_len = {}",
            train.seq_len
        )));
    }
    let cfg = ModelConfig {
        vocab_size: vocab,
        max_seq_len,
        d_model: section.d_model,
        n_heads: section.n_heads,
        n_layers: section.n_layers,
        ffn_multiplier: section.ffn_multiplier,
        norm_epsilon: section.norm_epsilon,
        seed: section.seed,
    };
    // Surface architecture problems (head divisibility and the like) as
    // configuration errors before any training starts.
    Weights::init(cfg.clone()).map_err(|e| CliError::Config(format!("{role} model: {e}")))?;
    Ok(cfg)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("cannot create '{}': {e}", path.display())))
}

fn eval_row(
    run_id: &str,
    epoch: usize,
    weights: &Weights,
    data: &EvalData,
    window: usize,
) -> minidistill::error::Result<MetricsRow> {
    let mp_accuracy = if data.pairs.is_empty() {
        None
    } else {
        Some(minimal_pair_accuracy(weights, &data.pairs)?)
    };
    Ok(MetricsRow {
        run_id: run_id.to_string(),
        epoch,
        perplexity: Some(perplexity(weights, &data.corpus, window)?),
        mp_accuracy,
        ..MetricsRow::default()
    })
}

fn step_rows(run_id: &str, records: &[StepRecord], distilled: bool) -> Vec<MetricsRow> {
    records
        .iter()
        .map(|r| MetricsRow {
            run_id: run_id.to_string(),
            epoch: r.epoch + 1,
            step: Some(r.step),
            loss_total: Some(r.loss.total),
            loss_ce: Some(r.loss.student_ce),
            loss_distill: distilled.then_some(r.loss.distillation),
            beta: distilled.then_some(r.loss.beta),
            lr: Some(r.lr),
            ..MetricsRow::default()
        })
        .collect()
}

/// Interleave per-step rows with the per-epoch evaluation rows: the
/// evaluation at `epoch` counts completed epochs, step rows carry the epoch
/// in progress (1-based), so the log reads in execution order.
fn assemble_metrics(
    eval_rows: Vec<MetricsRow>,
    steps: Vec<MetricsRow>,
    epochs: usize,
) -> Vec<MetricsRow> {
    let mut out = Vec::with_capacity(eval_rows.len() + steps.len());
    let mut eval_iter = eval_rows.into_iter();
    out.extend(eval_iter.next());
    for epoch in 1..=epochs {
        out.extend(steps.iter().filter(|r| r.epoch == epoch).cloned());
        out.extend(eval_iter.next());
    }
    out
}

/// Train the configured teacher and write `teacher.ckpt`, `metrics.csv`,
/// and `summary.json` under `<out>/<run-id>/`. Returns the checkpoint path.
pub fn cmd_train_teacher(cfg: &ExperimentConfig, quiet: bool) -> Result<PathBuf> {
    let out = cfg.require_out()?.to_path_buf();
    let (corpus, data) = prepare_data(cfg)?;
    let vocab = corpus.vocab().size();
    let model_cfg = model_config(&cfg.teacher, vocab, &cfg.train, "teacher")?;
    let dir = out.join(&cfg.run_id);
    ensure_dir(&dir)?;

    let run_id = cfg.run_id.clone();
    let window = cfg.train.seq_len;
    let mut eval_rows: Vec<MetricsRow> = Vec::new();
    let (weights, report) = train_teacher(
        &model_cfg,
        &cfg.train,
        &cfg.optimizer,
        &corpus,
        None,
        |epoch, w| {
            let row = eval_row(&run_id, epoch, w, &data, window)?;
            if !quiet {
                println!(
                    "[{run_id}] epoch {epoch}: perplexity {:.3}, minimal-pair accuracy {:.3}",
                    row.perplexity.unwrap_or(f64::NAN),
                    row.mp_accuracy.unwrap_or(f64::NAN)
                );
            }
            eval_rows.push(row);
            Ok(())
        },
    )
    .map_err(|e| classify("teacher training", e))?;

    let checkpoint = dir.join("teacher.ckpt");
    save_checkpoint(&weights, &checkpoint)
        .map_err(|e| CliError::Io(format!("writing '{}': {e}", checkpoint.display())))?;

    let (final_perplexity, final_mp) = eval_rows
        .last()
        .map(|r| (r.perplexity, r.mp_accuracy))
        .unwrap_or((None, None));
    let summary = RunSummary {
        run_id: run_id.clone(),
        objective: "none".into(),
        teachers: 0,
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        steps: report.steps.len(),
        final_loss_total: report.final_total_loss(),
        final_perplexity,
        final_mp_accuracy: final_mp,
        final_mode_mass_m1: None,
        final_mode_mass_m5: None,
        beta_by_epoch: report.beta_by_epoch.clone(),
        exact_kl_to_teacher: None,
    };
    let rows = assemble_metrics(eval_rows, step_rows(&run_id, &report.steps, false), cfg.train.epochs);
    write_metrics_csv(&dir.join("metrics.csv"), &rows)
        .map_err(|e| CliError::Io(format!("writing metrics: {e}")))?;
    write_json_summary(&dir.join("summary.json"), &summary)
        .map_err(|e| CliError::Io(format!("writing summary: {e}")))?;
    if !quiet {
        println!("[{run_id}] wrote {}", checkpoint.display());
    }
    Ok(checkpoint)
}

fn load_teacher(path: &Path) -> Result<Weights> {
    load_checkpoint(path)
        .map_err(|e| CliError::Io(format!("teacher checkpoint '{}': {e}", path.display())))
}

/// One distillation run: everything `cmd_distill` does, parameterized so the
/// comparison grid can drive it per variant.
fn run_distill_variant(
    cfg: &ExperimentConfig,
    objective: Objective,
    teachers: &[&Weights],
    dir: &Path,
    run_id: &str,
    corpus: &Corpus,
    data: &EvalData,
    quiet: bool,
) -> Result<RunSummary> {
    let vocab = corpus.vocab().size();
    let student_cfg = model_config(&cfg.student, vocab, &cfg.train, "student")?;
    let dcfg = cfg.distill.resolve(objective);
    dcfg.validate()
        .map_err(|e| CliError::Config(format!("distill settings: {e}")))?;
    ensure_dir(dir)?;

    let window = cfg.train.seq_len;
    let mut eval_rows: Vec<MetricsRow> = Vec::new();
    let (student, report) = run_distillation(
        &student_cfg,
        teachers,
        &dcfg,
        &cfg.train,
        &cfg.optimizer,
        corpus,
        None,
        |epoch, w| {
            let row = eval_row(run_id, epoch, w, data, window)?;
            if !quiet {
                println!(
                    "[{run_id}] epoch {epoch}: perplexity {:.3}, minimal-pair accuracy {:.3}",
                    row.perplexity.unwrap_or(f64::NAN),
                    row.mp_accuracy.unwrap_or(f64::NAN)
                );
            }
            eval_rows.push(row);
            Ok(())
        },
    )
    .map_err(|e| classify(&format!("distillation '{run_id}'"), e))?;

    let checkpoint = dir.join("student.ckpt");
    save_checkpoint(&student, &checkpoint)
        .map_err(|e| CliError::Io(format!("writing '{}': {e}", checkpoint.display())))?;

    let mm1 = mode_mass(&student, teachers[0], &data.contexts, 1)
        .map_err(|e| classify("mode-mass evaluation", e))?;
    let mm5 = if vocab >= 5 {
        Some(
            mode_mass(&student, teachers[0], &data.contexts, 5)
                .map_err(|e| classify("mode-mass evaluation", e))?,
        )
    } else {
        None
    };
    // The sequence-level divergence oracle only fits tiny vocabularies.
    let exact_kl = if (vocab as u128).pow(3) <= 4096 {
        Some(
            exact_sequence_kl(&student, teachers[0], vocab, 3)
                .map_err(|e| classify("exact divergence evaluation", e))?,
        )
    } else {
        None
    };

    let (final_perplexity, final_mp) = eval_rows
        .last()
        .map(|r| (r.perplexity, r.mp_accuracy))
        .unwrap_or((None, None));
    let summary = RunSummary {
        run_id: run_id.to_string(),
        objective: objective_name(objective).into(),
        teachers: teachers.len(),
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        steps: report.steps.len(),
        final_loss_total: report.final_total_loss(),
        final_perplexity,
        final_mp_accuracy: final_mp,
        final_mode_mass_m1: Some(mm1),
        final_mode_mass_m5: mm5,
        beta_by_epoch: report.beta_by_epoch.clone(),
        exact_kl_to_teacher: exact_kl,
    };
    let rows = assemble_metrics(eval_rows, step_rows(run_id, &report.steps, true), cfg.train.epochs);
    write_metrics_csv(&dir.join("metrics.csv"), &rows)
        .map_err(|e| CliError::Io(format!("writing metrics: {e}")))?;
    write_json_summary(&dir.join("summary.json"), &summary)
        .map_err(|e| CliError::Io(format!("writing summary: {e}")))?;
    if !quiet {
        println!("[{run_id}] wrote {}", checkpoint.display());
    }
    Ok(summary)
}

/// Distill a student from the configured teacher checkpoint(s) and write
/// `student.ckpt`, `metrics.csv`, and `summary.json` under `<out>/<run-id>/`.
pub fn cmd_distill(cfg: &ExperimentConfig, quiet: bool) -> Result<RunSummary> {
    let out = cfg.require_out()?.to_path_buf();
    let (corpus, data) = prepare_data(cfg)?;
    let t1_path = cfg.teacher.checkpoint.as_ref().ok_or_else(|| {
        CliError::Config("teacher.checkpoint is required for distillation".into())
    })?;
    let teacher1 = load_teacher(t1_path)?;
    let teacher2 = cfg
        .teacher2_checkpoint
        .as_ref()
        .map(|p| load_teacher(p))
        .transpose()?;
    let mut teachers: Vec<&Weights> = vec![&teacher1];
    if let Some(t2) = &teacher2 {
        teachers.push(t2);
    }
    run_distill_variant(
        cfg,
        cfg.distill.objective(),
        &teachers,
        &out.join(&cfg.run_id),
        &cfg.run_id,
        &corpus,
        &data,
        quiet,
    )
}

/// Evaluate an existing checkpoint on the configured data, writing
/// `eval.csv` and `eval.json` under `<out>/<run-id>/`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, quiet: bool) -> Result<MetricsRow> {
    let out = cfg.require_out()?.to_path_buf();
    let weights = load_checkpoint(checkpoint)
        .map_err(|e| CliError::Io(format!("checkpoint '{}': {e}", checkpoint.display())))?;
    let (corpus, data) = prepare_data(cfg)?;
    let vocab = corpus.vocab().size();
    if weights.config().vocab_size != vocab {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary ({}) does not match the configured data ({vocab})",
            weights.config().vocab_size
        )));
    }
    let dir = out.join(&cfg.run_id);
    ensure_dir(&dir)?;

    let mut row = eval_row(&cfg.run_id, 0, &weights, &data, cfg.train.seq_len)
        .map_err(|e| classify("evaluation", e))?;
    if let Some(teacher_path) = &cfg.teacher.checkpoint {
        let teacher = load_teacher(teacher_path)?;
        row.mode_mass_m1 = Some(
            mode_mass(&weights, &teacher, &data.contexts, 1)
                .map_err(|e| classify("mode-mass evaluation", e))?,
        );
        if vocab >= 5 {
            row.mode_mass_m5 = Some(
                mode_mass(&weights, &teacher, &data.contexts, 5)
                    .map_err(|e| classify("mode-mass evaluation", e))?,
            );
        }
    }

    fs::write(dir.join("eval.csv"), metrics_to_csv(std::slice::from_ref(&row)))
        .map_err(|e| CliError::Io(format!("writing eval.csv: {e}")))?;
    let mut json = serde_json::to_string_pretty(&row)
        .map_err(|e| CliError::Runtime(format!("encoding eval row: {e}")))?;
    json.push('\n');
    fs::write(dir.join("eval.json"), json)
        .map_err(|e| CliError::Io(format!("writing eval.json: {e}")))?;
    if !quiet {
        println!(
            "[{}] perplexity {:.3}, minimal-pair accuracy {:.3}",
            cfg.run_id,
            row.perplexity.unwrap_or(f64::NAN),
            row.mp_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(row)
}

fn parse_variant(name: &str) -> Result<(Objective, usize)> {
    let bad = || {
        CliError::Config(format!(
            "compare.variants entry '{name}' must be fw-1, fw-2, rv-1, or rv-2"
        ))
    };
    let (obj, count) = name.split_once('-').ok_or_else(bad)?;
    let objective = match obj {
        "fw" => Objective::Forward,
        "rv" => Objective::Reverse,
        _ => return Err(bad()),
    };
    let teachers = match count {
        "1" => 1,
        "2" => 2,
        _ => return Err(bad()),
    };
    Ok((objective, teachers))
}

fn opt_display<T: std::fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

fn write_comparison_csv(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    let mut text = String::from(COMPARISON_CSV_HEADER);
    text.push('\n');
    for s in summaries {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.run_id,
            s.objective,
            s.teachers,
            s.seed,
            opt_display(&s.final_loss_total),
            opt_display(&s.final_perplexity),
            opt_display(&s.final_mp_accuracy),
            opt_display(&s.final_mode_mass_m1),
            opt_display(&s.final_mode_mass_m5),
        ));
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("writing '{}': {e}", path.display())))
}

/// Run every variant in `compare.variants` over the shared data and seed,
/// writing each run under `<out>/<variant>/` plus a combined
/// `comparison.csv`. A failing variant does not stop the others; after all
/// have run, any failures are reported together with a nonzero exit.
pub fn cmd_compare(cfg: &ExperimentConfig, quiet: bool) -> Result<Vec<RunSummary>> {
    let out = cfg.require_out()?.to_path_buf();
    if cfg.variants.is_empty() {
        return Err(CliError::Config(
            "compare.variants must list at least one variant (e.g. rv-1)".into(),
        ));
    }
    let mut parsed = Vec::with_capacity(cfg.variants.len());
    for name in &cfg.variants {
        if parsed.iter().any(|(n, _, _)| n == name) {
            return Err(CliError::Config(format!(
                "compare.variants lists '{name}' twice"
            )));
        }
        let (objective, teachers) = parse_variant(name)?;
        parsed.push((name.clone(), objective, teachers));
    }

    let t1_path = cfg.teacher.checkpoint.as_ref().ok_or_else(|| {
        CliError::Config("teacher.checkpoint is required for the comparison grid".into())
    })?;
    let teacher1 = load_teacher(t1_path)?;
    let teacher2 = if parsed.iter().any(|(_, _, n)| *n == 2) {
        let path = cfg.teacher2_checkpoint.as_ref().ok_or_else(|| {
            CliError::Config("teacher2.checkpoint is required for two-teacher variants".into())
        })?;
        Some(load_teacher(path)?)
    } else {
        None
    };

    let (corpus, data) = prepare_data(cfg)?;
    ensure_dir(&out)?;

    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for (name, objective, n_teachers) in &parsed {
        let mut teachers: Vec<&Weights> = vec![&teacher1];
        if *n_teachers == 2 {
            teachers.push(teacher2.as_ref().expect("checked above"));
        }
        if !quiet {
            println!("[compare] running {name}");
        }
        match run_distill_variant(
            cfg,
            *objective,
            &teachers,
            &out.join(name),
            name,
            &corpus,
            &data,
            quiet,
        ) {
            Ok(summary) => summaries.push(summary),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }

    write_comparison_csv(&out.join("comparison.csv"), &summaries)?;
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} of {} grid runs failed: {}",
            failures.len(),
            parsed.len(),
            failures.join("; ")
        )));
    }
    Ok(summaries)
}
