use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bridging::corpus::{
    classify_information_status, load_contextual_vectors, load_corpus, load_static_vectors,
    split_folds, ContextualVectors, Corpus, Document, DocumentRecord, LinkRecord, MentionRecord,
    StaticVectors, StatusCounts,
};
use bridging::evaluation::{
    emitted_links, evaluate_anaphor_recognition, evaluate_antecedent_selection, evaluate_bridging,
    evaluate_full_bridging, predict_corpus, prediction_records, score_antecedent_selection,
    select_antecedents, write_predictions, EvalReport, EvalSetting, Selections,
};
use bridging::scorer::PredictedLink;
use bridging::training::{
    check_gradients_at_generic_point, load_checkpoint, save_checkpoint, train, Checkpoint, Trainer,
};
use bridging::{CharVocab, ContextualMode, Features, Model, ModelConfig, SharingMode, Task};
use bridging_autodiff::GradCheckConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::failure::{io_failure, Failure};

type Outcome = Result<(), Failure>;

struct Inputs {
    corpus: Corpus,
    statics: Option<StaticVectors>,
    contextual: Option<ContextualVectors>,
}

impl Inputs {
    fn load(config: &RunConfig) -> Result<Self, Failure> {
        let path = config
            .run
            .corpus
            .as_ref()
            .ok_or_else(|| Failure::usage("no corpus given (--corpus)"))?;
        let corpus = load_corpus(path)?;
        let enc = &config.model.encoder;
        let statics = match (&config.run.static_vectors, enc.static_dim) {
            (None, 0) => None,
            (Some(p), dim) if dim > 0 => Some(load_static_vectors(p, dim)?),
            (None, dim) => {
                return Err(Failure::usage(format!(
                    "static_dim = {dim} needs --static-vectors (or set static_dim = 0)"
                )))
            }
            (Some(_), _) => {
                return Err(Failure::usage("--static-vectors given but static_dim = 0"))
            }
        };
        let contextual = match (&config.run.contextual_vectors, enc.contextual_dim) {
            (None, 0) => None,
            (Some(p), dim) if dim > 0 => {
                let ctx = load_contextual_vectors(p)?;
                if ctx.dim != dim {
                    return Err(Failure::data(format!(
                        "{}: vectors have width {}, contextual_dim is {dim}",
                        p.display(),
                        ctx.dim
                    )));
                }
                ctx.validate(&corpus)?;
                Some(ctx)
            }
            (None, dim) => {
                return Err(Failure::usage(format!(
                    "contextual_dim = {dim} needs --contextual-vectors (or set contextual_dim = 0)"
                )))
            }
            (Some(_), _) => {
                return Err(Failure::usage(
                    "--contextual-vectors given but contextual_dim = 0",
                ))
            }
        };
        Ok(Self {
            corpus,
            statics,
            contextual,
        })
    }

    fn features(&self) -> Features<'_> {
        Features {
            static_vectors: self.statics.as_ref(),
            contextual: self.contextual.as_ref(),
        }
    }
}

fn with_header(config: &RunConfig, fields: Value) -> Value {
    let mut m = config.header();
    if let Value::Object(extra) = fields {
        m.extend(extra);
    }
    Value::Object(m)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_failure(path, e))
}

/// Writes `value` as pretty JSON to the configured output file, or as one
/// line to `stdout`.
fn emit(config: &RunConfig, value: &Value, stdout: &mut dyn Write) -> Outcome {
    match &config.run.output {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, value)
                .map_err(|e| Failure::data(e.to_string()))?;
            writeln!(w)
                .and_then(|_| w.flush())
                .map_err(|e| io_failure(path, e))
        }
        None => writeln!(stdout, "{value}").map_err(|e| Failure::data(e.to_string())),
    }
}

fn checkpoint_meta(config: &RunConfig, epoch: usize) -> Value {
    with_header(config, json!({ "epoch": epoch }))
}

/// Loads the checkpoint and adopts its model configuration and the training
/// section (hence seed) it was saved with.
fn load_model(config: &RunConfig) -> Result<(Checkpoint<f32>, RunConfig), Failure> {
    let path = config
        .run
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::usage("no checkpoint given (--checkpoint)"))?;
    let ckpt = load_checkpoint::<f32>(path)?;
    let mut effective = config.clone();
    effective.model = ckpt.model.config.clone();
    if let Some(train) = ckpt.meta.pointer("/config/train") {
        effective.train = serde_json::from_value(train.clone())
            .map_err(|e| Failure::data(format!("{}: checkpoint metadata: {e}", path.display())))?;
    }
    Ok((ckpt, effective))
}

pub fn train_command(config: &RunConfig, stdout: &mut dyn Write) -> Outcome {
    let dir = config
        .run
        .output
        .clone()
        .ok_or_else(|| Failure::usage("train needs an output directory (--output)"))?;
    config.model.validate()?;
    config.train.validate()?;
    let inputs = Inputs::load(config)?;
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;

    let model = Model::<f32>::new(
        config.model.clone(),
        CharVocab::new(inputs.corpus.characters()),
        config.seed(),
    )?;
    let mut trainer = Trainer::new(
        model,
        &inputs.corpus,
        inputs.features(),
        config.train.clone(),
    )?;
    let mut checkpoints = Vec::new();
    for epoch in 1..=config.train.epochs {
        trainer.run_epoch()?;
        let every = config.run.checkpoint_every;
        if every > 0 && epoch % every == 0 && epoch != config.train.epochs {
            let path = dir.join(format!("epoch-{epoch:04}.ckpt"));
            save_checkpoint(&path, trainer.model(), &checkpoint_meta(config, epoch))?;
            checkpoints.push(path);
        }
    }
    let final_path = dir.join("model.ckpt");
    save_checkpoint(
        &final_path,
        trainer.model(),
        &checkpoint_meta(config, config.train.epochs),
    )?;
    checkpoints.push(final_path.clone());

    let log_path = dir.join("loss_log.json");
    let log = with_header(config, json!({ "epochs": trainer.log().epochs }));
    let mut w = create(&log_path)?;
    serde_json::to_writer_pretty(&mut w, &log).map_err(|e| Failure::data(e.to_string()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| io_failure(&log_path, e))?;

    let summary = json!({
        "checkpoint": final_path,
        "checkpoints": checkpoints,
        "loss_log": log_path,
        "final_loss": trainer.log().epochs.last().map(|e| e.total),
    });
    writeln!(stdout, "{summary}").map_err(|e| Failure::data(e.to_string()))
}

pub fn predict_command(config: &RunConfig, stdout: &mut dyn Write) -> Outcome {
    let (ckpt, effective) = load_model(config)?;
    let inputs = Inputs::load(&effective)?;
    let task = effective.run.task;
    let predictions = predict_corpus(
        &ckpt.model,
        &inputs.corpus,
        &inputs.features(),
        task,
        effective.run.setting,
    )?;
    let records = prediction_records(&inputs.corpus, &predictions, task);
    let header = Value::Object(effective.header());
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "{header}")?;
        write_predictions(&mut *w, &records)?;
        w.flush()
    };
    match &effective.run.output {
        Some(path) => {
            let mut f = create(path)?;
            write(&mut f).map_err(|e| io_failure(path, e))?;
            let summary = json!({ "predictions": path, "records": records.len() });
            writeln!(stdout, "{summary}").map_err(|e| Failure::data(e.to_string()))
        }
        None => write(stdout).map_err(|e| Failure::data(e.to_string())),
    }
}

pub fn evaluate_command(config: &RunConfig, stdout: &mut dyn Write) -> Outcome {
    let (ckpt, effective) = load_model(config)?;
    let inputs = Inputs::load(&effective)?;
    let features = inputs.features();
    let [full, recognition] = evaluate_bridging(
        &ckpt.model,
        &inputs.corpus,
        &features,
        effective.run.setting,
    )?;
    let selection = evaluate_antecedent_selection(
        &ckpt.model,
        &inputs.corpus,
        &features,
        effective.run.include_epsilon,
    )?;
    let report = with_header(
        &effective,
        json!({ "reports": [full, recognition, selection] }),
    );
    emit(&effective, &report, stdout)
}

struct FoldResult {
    test: Vec<usize>,
    predictions: Vec<Vec<PredictedLink>>,
    selections: Selections,
    final_loss: Option<f64>,
}

fn reports(
    corpus: &Corpus,
    predictions: &[Vec<PredictedLink>],
    selections: &Selections,
    setting: EvalSetting,
) -> [EvalReport; 3] {
    let links = emitted_links(predictions);
    [
        evaluate_full_bridging(corpus, &links, setting),
        evaluate_anaphor_recognition(corpus, &links, setting),
        score_antecedent_selection(corpus, selections, EvalSetting::Keep),
    ]
}

pub fn crossval_command(config: &RunConfig, stdout: &mut dyn Write) -> Outcome {
    config.model.validate()?;
    config.train.validate()?;
    let inputs = Inputs::load(config)?;
    let corpus = &inputs.corpus;
    let features = inputs.features();
    let setting = config.run.setting;
    let folds = split_folds(corpus.len(), config.run.folds, config.seed())?;

    let run_fold = |fold: &bridging::corpus::Fold| -> Result<FoldResult, Failure> {
        let train_set = corpus.subset(&fold.train);
        let test_set = corpus.subset(&fold.test);
        let (model, log) = train::<f32>(
            &train_set,
            features,
            config.model.clone(),
            config.train.clone(),
        )?;
        Ok(FoldResult {
            test: fold.test.clone(),
            predictions: predict_corpus(&model, &test_set, &features, Task::Bridging, setting)?,
            selections: select_antecedents(
                &model,
                &test_set,
                &features,
                config.run.include_epsilon,
            )?,
            final_loss: log.epochs.last().map(|e| e.total),
        })
    };
    let results: Vec<FoldResult> = if config.run.parallel_folds {
        folds.par_iter().map(run_fold).collect::<Result<_, _>>()?
    } else {
        folds.iter().map(run_fold).collect::<Result<_, _>>()?
    };

    let mut pooled_predictions = vec![Vec::new(); corpus.len()];
    let mut pooled_selections: Selections = vec![BTreeMap::new(); corpus.len()];
    let mut per_fold = Vec::with_capacity(results.len());
    for (k, r) in results.into_iter().enumerate() {
        let test_set = corpus.subset(&r.test);
        per_fold.push(json!({
            "fold": k,
            "test_documents": test_set.documents.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(),
            "final_loss": r.final_loss,
            "reports": reports(&test_set, &r.predictions, &r.selections, setting),
        }));
        for ((&d, p), s) in r.test.iter().zip(r.predictions).zip(r.selections) {
            pooled_predictions[d] = p;
            pooled_selections[d] = s;
        }
    }
    let report = with_header(
        config,
        json!({
            "folds": per_fold,
            "pooled": reports(corpus, &pooled_predictions, &pooled_selections, setting),
        }),
    );
    emit(config, &report, stdout)
}

/// Every channel present, every width tiny.
fn compact_model(sharing: SharingMode) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.static_dim = 3;
    c.encoder.contextual_dim = 4;
    c.encoder.contextual_mode = ContextualMode::Concat;
    c.encoder.char_dim = 3;
    c.encoder.char_filter_widths = vec![2, 3];
    c.encoder.char_filters = 2;
    c.encoder.lstm_hidden = 3;
    c.scorer.ffnn_size = 4;
    c.scorer.feature_dim = 2;
    c.scorer.sharing = sharing;
    c.init_std = 0.5;
    c
}

/// "a house / its door / it": the door bridges to the house, "it" corefers
/// with it.
fn gradcheck_document() -> Document {
    let mention = |id: &str, start, end| MentionRecord {
        id: id.into(),
        start,
        end,
    };
    Document::from_record(DocumentRecord {
        doc_id: "gradcheck".into(),
        sentences: vec![
            vec!["a".into(), "house".into()],
            vec!["its".into(), "door".into()],
            vec!["it".into()],
        ],
        mentions: vec![
            mention("house", 0, 1),
            mention("door", 2, 3),
            mention("it", 4, 4),
        ],
        clusters: vec![vec!["house".into(), "it".into()]],
        bridging: vec![LinkRecord {
            anaphor: "door".into(),
            antecedent: "house".into(),
            relation: None,
        }],
    })
    .expect("built-in document is well formed")
}

pub fn gradcheck_command(config: &RunConfig, stdout: &mut dyn Write) -> Outcome {
    config.train.validate()?;
    let doc = gradcheck_document();
    let corpus = Corpus::new(vec![doc.clone()])?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
    let mut random = |n: usize| {
        (0..n)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect::<Vec<f32>>()
    };
    let map: HashMap<String, Vec<f32>> = doc.tokens().map(|t| (t.to_string(), random(3))).collect();
    let statics = StaticVectors::from_map(3, map)?;
    let mut contextual = ContextualVectors::new(4);
    contextual.insert(
        doc.id.clone(),
        (0..doc.num_tokens()).map(|_| random(4)).collect(),
    );
    let features = Features {
        static_vectors: Some(&statics),
        contextual: Some(&contextual),
    };

    let check = GradCheckConfig::default();
    let mut results = Vec::new();
    let mut worst = 0.0f64;
    for sharing in [
        SharingMode::EncoderOnly,
        SharingMode::ShareFfnn1,
        SharingMode::ShareFfnn2,
    ] {
        let model_config = compact_model(sharing);
        let mut model = Model::<f64>::new(
            model_config.clone(),
            CharVocab::new(corpus.characters()),
            config.seed(),
        )?;
        let (point, outcome) = check_gradients_at_generic_point(
            &mut model,
            &doc,
            &features,
            &config.train,
            &check,
            64,
        )?
        .ok_or_else(|| {
            Failure::numeric(format!(
                "{sharing}: no point clear of activation kinks found"
            ))
        })?;
        let report = outcome.report;
        worst = worst.max(report.max_relative_error);
        let mut entry = Map::new();
        entry.insert("sharing".into(), json!(sharing));
        entry.insert("model".into(), json!(model_config));
        entry.insert("point_seed".into(), json!(point));
        entry.insert("kink_margin".into(), json!(outcome.kink_margin));
        entry.insert("entries_checked".into(), json!(report.entries_checked));
        entry.insert(
            "max_relative_error".into(),
            json!(report.max_relative_error),
        );
        entry.insert(
            "worst_parameter".into(),
            json!(report.worst().map(|p| p.name.clone())),
        );
        entry.insert("passed".into(), json!(report.passed));
        results.push(Value::Object(entry));
    }
    let passed = worst <= check.tolerance;
    let report = with_header(
        config,
        json!({
            "tolerance": check.tolerance,
            "step": check.step,
            "max_relative_error": worst,
            "passed": passed,
            "modes": results,
        }),
    );
    emit(config, &report, stdout)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradient check failed: max relative error {worst:e} exceeds {:e}",
            check.tolerance
        )))
    }
}

pub fn validate_corpus_command(config: &RunConfig, stdout: &mut dyn Write) -> Outcome {
    let path: PathBuf = config
        .run
        .corpus
        .clone()
        .ok_or_else(|| Failure::usage("no corpus given (--corpus)"))?;
    let corpus = load_corpus(&path)?;
    let mut vectors = Map::new();
    if let Some(p) = &config.run.static_vectors {
        let dim = config.model.encoder.static_dim;
        if dim == 0 {
            return Err(Failure::usage("--static-vectors given but static_dim = 0"));
        }
        let v = load_static_vectors(p, dim)?;
        vectors.insert(
            "static".into(),
            json!({ "dim": v.dim, "duplicates": v.duplicates }),
        );
    }
    if let Some(p) = &config.run.contextual_vectors {
        let v = load_contextual_vectors(p)?;
        v.validate(&corpus)?;
        vectors.insert("contextual".into(), json!({ "dim": v.dim }));
    }
    let status = StatusCounts::of(&classify_information_status(&corpus));
    let labelled = corpus
        .documents
        .iter()
        .flat_map(|d| &d.links)
        .all(|l| l.relation.is_some());
    let report = with_header(
        config,
        json!({
            "valid": true,
            "documents": corpus.len(),
            "mentions": corpus.num_mentions(),
            "clusters": corpus.num_clusters(),
            "bridging_links": corpus.num_links(),
            "information_status": { "dn": status.dn, "do": status.r#do, "bridging": status.bridging },
            "relations_labelled": labelled,
            "vectors": vectors,
        }),
    );
    emit(config, &report, stdout)
}
