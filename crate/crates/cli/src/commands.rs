use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use emofuse::data::synthetic::generate;
use emofuse::data::{write_wav, Dataset, LabelMode, Speech, EMOTIONS};
use emofuse::data::metrics::MetricReport;
use emofuse::encoder::EncoderState;
use emofuse::model::{FusedModel, Prediction, Preprocessor, SPEECH_PREFIX, TEXT_PREFIX};
use emofuse::persist::{write_atomic, Checkpoint};
use emofuse::pipeline::{
    build_model, check_combination, fit_preprocessor, init_encoders, prepare_encoders, run_cell, AblationRow,
    PipelineConfig, PreparedSplits,
};
use emofuse::quantizer::{Codebook, Featurizer, FrameFeaturizerConfig};
use emofuse::rng::derive_seed;
use emofuse::tokenizer::Vocabulary;
use emofuse::Modality;
use emofuse::training::{run_finetune, run_pretraining, OptimizerState, StepRecord};
use emofuse::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::settings::Resolved;

pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PREP_FILE: &str = "prep.json";
pub const MODEL_FILE: &str = "model.ckpt";

/// Featurizer and length settings fixed at prepare time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PrepSettings {
    featurizer: FrameFeaturizerConfig,
    speech_max_len: usize,
    text_max_len: usize,
}

fn text_file(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn data_path(r: &Resolved) -> Result<PathBuf> {
    if r.data.is_empty() {
        return Err(Error::Usage("--data is required".into()));
    }
    let p = PathBuf::from(&r.data);
    if !p.is_file() {
        return Err(Error::Input(format!("dataset {} not found", p.display())));
    }
    Ok(p)
}

fn load_data(r: &Resolved, m: &mut RunManifest) -> Result<Dataset> {
    let path = data_path(r)?;
    let ds = Dataset::load_jsonl(&path)?;
    m.input(&path)?;
    for ex in &ds.examples {
        if let Speech::AudioPath(a) = &ex.speech {
            m.input(&ds.base_dir.join(a))?;
        }
    }
    Ok(ds)
}

fn prep_dir(r: &Resolved, out: &Path) -> PathBuf {
    if r.prep_dir.is_empty() {
        out.to_path_buf()
    } else {
        PathBuf::from(&r.prep_dir)
    }
}

fn load_prep(dir: &Path, m: &mut RunManifest) -> Result<Preprocessor> {
    let settings_path = dir.join(PREP_FILE);
    let text = std::fs::read_to_string(&settings_path).map_err(|e| {
        Error::Input(format!("cannot read {} (run `prepare` first): {e}", settings_path.display()))
    })?;
    let s: PrepSettings =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", settings_path.display())))?;
    let codebook = Codebook::load(&dir.join(CODEBOOK_FILE))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    for f in [PREP_FILE, CODEBOOK_FILE, VOCAB_FILE] {
        m.input(&dir.join(f))?;
    }
    Ok(Preprocessor {
        featurizer: Featurizer::new(s.featurizer)?,
        codebook,
        vocab,
        speech_max_len: s.speech_max_len,
        text_max_len: s.text_max_len,
    })
}

/// Left-aligned first column, right-aligned numbers.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn metric_table(report: &MetricReport, loss: f64) -> String {
    let mut rows = vec![vec!["loss".to_string(), format!("{loss:.4}")]];
    for (k, v) in report.entries(&EMOTIONS) {
        rows.push(vec![k, format!("{v:.4}")]);
    }
    render_table(&["metric".into(), "value".into()], &rows)
}

pub fn gen_data(r: &Resolved, out: &Path, m: &mut RunManifest) -> Result<()> {
    let mut ds = generate(&r.synthetic)?;
    if r.gen_wav {
        for ex in &mut ds.examples {
            if let Speech::Samples(samples) = &ex.speech {
                let rel = PathBuf::from("audio").join(format!("{}.wav", ex.id));
                let path = out.join(&rel);
                write_wav(&path, samples, r.synthetic.sample_rate)?;
                m.output(&path)?;
                ex.speech = Speech::AudioPath(rel);
            }
        }
    }
    let path = out.join(&r.gen_output);
    ds.save_jsonl(&path)?;
    m.output(&path)?;
    let mode = ds.mode().map_or("empty", |md| md.name());
    println!("wrote {} {} examples to {}", ds.len(), mode, path.display());
    Ok(())
}

pub fn prepare(r: &Resolved, out: &Path, m: &mut RunManifest) -> Result<()> {
    let ds = load_data(r, m)?;
    let (pre, report) = fit_preprocessor(&ds, &r.pipeline)?;
    let settings = PrepSettings {
        featurizer: r.pipeline.featurizer.clone(),
        speech_max_len: r.pipeline.speech_encoder.max_len,
        text_max_len: r.pipeline.text_encoder.max_len,
    };
    let json = serde_json::to_string_pretty(&settings).map_err(|e| Error::Input(e.to_string()))?;
    write_atomic(&out.join(CODEBOOK_FILE), &pre.codebook.to_bytes())?;
    text_file(&out.join(VOCAB_FILE), &pre.vocab.to_text())?;
    text_file(&out.join(PREP_FILE), &(json + "\n"))?;
    for f in [CODEBOOK_FILE, VOCAB_FILE, PREP_FILE] {
        m.output(&out.join(f))?;
    }
    println!(
        "codebook: {} entries, {} k-means iterations, converged {}, objective {:.4}",
        pre.codebook.k(),
        report.iterations,
        report.converged,
        report.objective.last().copied().unwrap_or(f64::NAN)
    );
    println!("vocabulary: {} types including specials", pre.vocab.len());
    Ok(())
}

fn modality_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Speech => SPEECH_PREFIX,
        Modality::Text => TEXT_PREFIX,
    }
}

pub fn pretrain(r: &Resolved, out: &Path, m: &mut RunManifest) -> Result<()> {
    let pre = load_prep(&prep_dir(r, out), m)?;
    let ds = load_data(r, m)?;
    let splits = PreparedSplits::new(&ds, &pre)?;
    let modality = r.modality;
    let prefix = modality_prefix(modality);
    let corpus = match modality {
        Modality::Speech => splits.speech_corpus(),
        Modality::Text => splits.text_corpus(),
    };
    let mut pc = r.pipeline.pretrain.clone();
    pc.prefix = prefix.into();
    pc.train.seed = derive_seed(r.pipeline.seed, &[if modality == Modality::Speech { 6 } else { 7 }]);

    let ckpt_path = out.join(format!("pretrain-{}.ckpt", modality.name()));
    let log_path = out.join(format!("pretrain-{}.log", modality.name()));
    let (mut encoder, mut opt, mut log) = if r.resume {
        if !ckpt_path.is_file() {
            return Err(Error::Input(format!("--resume: no checkpoint at {}", ckpt_path.display())));
        }
        m.input(&ckpt_path)?;
        let ck = Checkpoint::load(&ckpt_path)?;
        let opt = OptimizerState::from_checkpoint(&ck)?;
        let previous = std::fs::read_to_string(&log_path).unwrap_or_default();
        let log: Vec<String> = previous.lines().take(opt.step() as usize).map(String::from).collect();
        println!("resuming {} pretraining at step {}", modality.name(), opt.step());
        (EncoderState::from_checkpoint(prefix, &ck)?, opt, log)
    } else {
        let (s, t) = init_encoders(&pre, &r.pipeline)?;
        let enc = if modality == Modality::Speech { s } else { t };
        (enc, OptimizerState::new(pc.train.adam), Vec::new())
    };

    let total = pc.total_steps;
    let every = r.save_every.max(1);
    let save = |enc: &EncoderState, opt: &OptimizerState, log: &[String]| -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.set_meta("pretrain.modality", modality.name());
        enc.write_checkpoint(prefix, &mut ck);
        opt.write_checkpoint(&mut ck);
        ck.save(&ckpt_path)?;
        let mut text = log.join("\n");
        text.push('\n');
        text_file(&log_path, &text)
    };
    let curve = run_pretraining(&corpus, &mut encoder, &pc, &mut opt, &mut |rec: &StepRecord, enc, o| {
        let line = rec.log_line();
        println!("{line}");
        log.push(line);
        if rec.step.is_multiple_of(every) || rec.step == total {
            save(enc, o, &log)?;
        }
        Ok(())
    })?;
    if curve.is_empty() {
        save(&encoder, &opt, &log)?;
    }
    m.output(&ckpt_path)?;
    m.output(&log_path)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!(
            "{} pretraining: loss {:.4} -> {:.4} (ln V = {:.4})",
            modality.name(),
            first.loss,
            last.loss,
            (encoder.config().vocab_size as f64).ln()
        );
    }
    Ok(())
}

fn load_encoder(path: &str, prefix: &str, expected_vocab: usize, m: &mut RunManifest) -> Result<EncoderState> {
    let p = Path::new(path);
    if !p.is_file() {
        return Err(Error::Input(format!("pretrained checkpoint {path} not found")));
    }
    let enc = EncoderState::from_checkpoint(prefix, &Checkpoint::load(p)?)?;
    m.input(p)?;
    if enc.config().vocab_size != expected_vocab {
        return Err(Error::Input(format!(
            "{path}: encoder vocabulary {} does not match the prepared vocabulary {expected_vocab}",
            enc.config().vocab_size
        )));
    }
    Ok(enc)
}

pub fn finetune(r: &Resolved, out: &Path, m: &mut RunManifest) -> Result<()> {
    check_combination(r.fusion, r.freeze)?;
    let (use_s, use_t) = (r.fusion.uses_speech(), r.fusion.uses_text());
    if r.require_pretrained {
        if use_s && r.speech_ckpt.is_empty() {
            return Err(Error::Usage("--require-pretrained: --speech-ckpt is missing".into()));
        }
        if use_t && r.text_ckpt.is_empty() {
            return Err(Error::Usage("--require-pretrained: --text-ckpt is missing".into()));
        }
    }
    let pre = load_prep(&prep_dir(r, out), m)?;
    let ds = load_data(r, m)?;
    let splits = PreparedSplits::new(&ds, &pre)?;
    let cfg: &PipelineConfig = &r.pipeline;
    let (mut speech, mut text) = init_encoders(&pre, cfg)?;
    if use_s && !r.speech_ckpt.is_empty() {
        speech = load_encoder(&r.speech_ckpt, SPEECH_PREFIX, pre.codebook.vocab_size(), m)?;
    }
    if use_t && !r.text_ckpt.is_empty() {
        text = load_encoder(&r.text_ckpt, TEXT_PREFIX, pre.vocab.len(), m)?;
    }
    let mut model = build_model(speech, text, r.fusion, splits.mode, cfg)?;
    let mut ft = cfg.finetune.clone();
    ft.train.freeze = r.freeze;
    ft.train.seed = derive_seed(cfg.seed, &[5]);
    let mut log = String::new();
    let report = run_finetune(&mut model, &splits.train, &splits.valid, &ft, &mut |rec| {
        log.push_str(&rec.log_line());
        log.push('\n');
    })?;
    let (test_name, test_split) = if splits.test.is_empty() { ("valid", &splits.valid) } else { ("test", &splits.test) };
    let test = model.evaluate(test_split)?;

    let mut csv = report.history_csv();
    let _ = writeln!(csv, "{},{test_name},loss,{}", report.best_epoch, test.loss);
    for (k, v) in test.report.entries(&EMOTIONS) {
        let _ = writeln!(csv, "{},{test_name},{k},{v}", report.best_epoch);
    }
    let table = format!(
        "fusion {} / freeze {} / best epoch {} ({} = {:.4})\n{} split:\n{}",
        r.fusion.name(),
        r.freeze.name(),
        report.best_epoch,
        report.selection_metric,
        report.best_value,
        test_name,
        metric_table(&test.report, test.loss)
    );
    let files = [
        (MODEL_FILE, model.to_checkpoint().to_bytes()),
        ("metrics.csv", csv.into_bytes()),
        ("metrics.txt", table.clone().into_bytes()),
        ("finetune.log", log.into_bytes()),
    ];
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
        m.output(&out.join(name))?;
    }
    print!("{table}");
    Ok(())
}

pub fn evaluate(r: &Resolved, out: &Path, m: &mut RunManifest) -> Result<()> {
    let model_path = if r.model.is_empty() { out.join(MODEL_FILE) } else { PathBuf::from(&r.model) };
    if !model_path.is_file() {
        return Err(Error::Input(format!("model checkpoint {} not found", model_path.display())));
    }
    let model = FusedModel::from_checkpoint(&Checkpoint::load(&model_path)?)?;
    m.input(&model_path)?;
    let pre = load_prep(&prep_dir(r, out), m)?;
    let ds = load_data(r, m)?;
    let examples = pre.prepare_split(&ds, r.split)?;
    if examples.is_empty() {
        return Err(Error::Input(format!("split {} is empty", r.split.name())));
    }
    let eval = model.evaluate(&examples)?;
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "loss,{}", eval.loss);
    for (k, v) in eval.report.entries(&EMOTIONS) {
        let _ = writeln!(csv, "{k},{v}");
    }
    let mut preds = String::from("id,prediction,gold\n");
    for ex in &examples {
        let p = match model.predict(ex)? {
            Prediction::Class(c) => EMOTIONS[c].to_string(),
            Prediction::Score(s) => format!("{s}"),
        };
        let g = match ex.label {
            emofuse::data::Label::Class(c) => EMOTIONS[c].to_string(),
            emofuse::data::Label::Score(s) => format!("{s}"),
        };
        let _ = writeln!(preds, "{},{p},{g}", ex.id);
    }
    let split = r.split.name();
    let table = metric_table(&eval.report, eval.loss);
    for (name, text) in [
        (format!("eval-{split}.csv"), &csv),
        (format!("predictions-{split}.csv"), &preds),
        (format!("eval-{split}.txt"), &table),
    ] {
        text_file(&out.join(&name), text)?;
        m.output(&out.join(&name))?;
    }
    println!("{} examples from the {split} split", examples.len());
    print!("{table}");
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Usage(format!("bad seed '{x}' in --seeds"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Usage("--seeds is empty".into()));
    }
    Ok(seeds)
}

fn ablation_columns(mode: LabelMode) -> Vec<String> {
    match mode {
        LabelMode::Categorical4 => {
            let mut c = vec!["accuracy".to_string(), "unweighted_accuracy".to_string()];
            for e in EMOTIONS {
                c.push(format!("{e}_ba"));
                c.push(format!("{e}_f1"));
            }
            c
        }
        LabelMode::Score => ["accuracy", "binary_f1", "acc7", "mae"].map(String::from).to_vec(),
    }
}

pub fn ablate(r: &Resolved, out: &Path, m: &mut RunManifest) -> Result<()> {
    let seeds = parse_seeds(&r.seeds)?;
    let ds = load_data(r, m)?;
    let mode = ds.mode().ok_or_else(|| Error::Input("dataset is empty".into()))?;
    let columns = ablation_columns(mode);
    let mut csv = String::from("seed,row,metric,value\n");
    // sums[row][column]
    let mut sums = vec![vec![0.0; columns.len()]; AblationRow::GRID.len()];
    for &seed in &seeds {
        let mut cfg = r.pipeline.clone();
        cfg.seed = seed;
        let (pre, _) = fit_preprocessor(&ds, &cfg)?;
        let splits = PreparedSplits::new(&ds, &pre)?;
        let (speech, text, _, _) = prepare_encoders(&splits, &pre, &cfg)?;
        for (ri, row) in AblationRow::GRID.iter().enumerate() {
            let (_, cell) = run_cell(&splits, &speech, &text, *row, &cfg)?;
            let entries = cell.test.report.entries(&EMOTIONS);
            let _ = writeln!(csv, "{seed},{},loss,{}", row.name(), cell.test.loss);
            for (k, v) in &entries {
                let _ = writeln!(csv, "{seed},{},{k},{v}", row.name());
            }
            for (ci, col) in columns.iter().enumerate() {
                if let Some((_, v)) = entries.iter().find(|(k, _)| k == col) {
                    sums[ri][ci] += v;
                }
            }
            println!(
                "seed {seed} {:15} test accuracy {:.4} (best epoch {})",
                row.name(),
                cell.test.report.accuracy,
                cell.report.best_epoch
            );
        }
    }
    let n = seeds.len() as f64;
    let mean = |ri: usize, ci: usize| sums[ri][ci] / n;
    let mut header = vec!["row".to_string()];
    header.extend(columns.iter().cloned());
    let rows: Vec<Vec<String>> = AblationRow::GRID
        .iter()
        .enumerate()
        .map(|(ri, row)| {
            let mut cells = vec![row.name()];
            cells.extend((0..columns.len()).map(|ci| format!("{:.4}", mean(ri, ci))));
            cells
        })
        .collect();
    // rows: 0 shallow-ft, 1 coattn-ft, 4 shallow-frozen, 5 coattn-frozen
    let better = |a: f64, b: f64| if mode == LabelMode::Score { a <= b } else { a >= b };
    let key = if mode == LabelMode::Score { columns.iter().position(|c| c == "mae").unwrap_or(0) } else { 0 };
    let mut table = format!("test-split means over seeds {seeds:?}\n");
    table.push_str(&render_table(&header, &rows));
    let _ = writeln!(
        table,
        "shallow: fine-tuned {} frozen on {}",
        if better(mean(0, key), mean(4, key)) { ">=" } else { "<" },
        columns[key]
    );
    let _ = writeln!(
        table,
        "frozen encoders: co-attention {} shallow on {}",
        if better(mean(5, key), mean(4, key)) { ">=" } else { "<" },
        columns[key]
    );
    for (name, text) in [("ablation.csv", &csv), ("ablation.txt", &table)] {
        text_file(&out.join(name), text)?;
        m.output(&out.join(name))?;
    }
    print!("{table}");
    Ok(())
}
