//! Evaluation harness: retrieval recall, answer EM/F1 and core retrieval
//! timing over a question set.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::write_atomic;
use crate::metrics::{exact_match, hit_at_k, recall_at_k, token_f1};
use crate::qa::{answer, Answerer};
use crate::retrieval::{top_k, RetrievalConfig, Retriever};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    #[serde(alias = "gold_answers")]
    pub answers: Vec<String>,
    #[serde(default)]
    pub gold_passage_ids: Vec<String>,
}

/// JSONL, one `{question, answers, gold_passage_ids}` object per line.
pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: QAExample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if ex.answers.is_empty() {
            return Err(parse_err("example has no gold answers".into()));
        }
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub id: Option<String>,
    pub question: String,
    pub selected_ids: Vec<String>,
    /// Top 10 by enhanced score.
    pub ranked_ids: Vec<String>,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub hit_at_5: f64,
    pub hit_at_10: f64,
    pub num_selected: usize,
    pub prediction: Option<String>,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
    /// Wall-clock seconds of the diffusion + enhancement core. Kept out of
    /// `report.json` so reports stay byte-reproducible.
    #[serde(skip)]
    pub retrieval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub examples: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub hit_at_5: f64,
    pub hit_at_10: f64,
    pub mean_em: Option<f64>,
    pub mean_f1: Option<f64>,
    pub mean_selected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub per_example_seconds: Vec<f64>,
    pub total_retrieval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: RetrievalConfig,
    pub aggregates: Aggregates,
    pub records: Vec<ExampleRecord>,
    #[serde(skip)]
    pub timing: TimingReport,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates over the records that completed without error.
pub fn aggregate(records: &[ExampleRecord]) -> Aggregates {
    let ok: Vec<&ExampleRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let avg = |f: fn(&ExampleRecord) -> f64| mean(ok.iter().map(|r| f(r))).unwrap_or(0.0);
    Aggregates {
        examples: records.len(),
        evaluated: ok.len(),
        failed: records.len() - ok.len(),
        recall_at_5: avg(|r| r.recall_at_5),
        recall_at_10: avg(|r| r.recall_at_10),
        hit_at_5: avg(|r| r.hit_at_5),
        hit_at_10: avg(|r| r.hit_at_10),
        mean_em: mean(ok.iter().filter_map(|r| r.em)),
        mean_f1: mean(ok.iter().filter_map(|r| r.f1)),
        mean_selected: avg(|r| r.num_selected as f64),
    }
}

fn failed_record(index: usize, ex: &QAExample, error: String) -> ExampleRecord {
    ExampleRecord {
        index,
        id: ex.id.clone(),
        question: ex.question.clone(),
        selected_ids: Vec::new(),
        ranked_ids: Vec::new(),
        recall_at_5: 0.0,
        recall_at_10: 0.0,
        hit_at_5: 0.0,
        hit_at_10: 0.0,
        num_selected: 0,
        prediction: None,
        em: None,
        f1: None,
        error: Some(error),
        retrieval_seconds: 0.0,
    }
}

fn evaluate_one(
    index: usize,
    ex: &QAExample,
    retriever: &Retriever<'_>,
    config: &RetrievalConfig,
    answerer: Option<&Answerer>,
) -> ExampleRecord {
    let idx = retriever.index();
    if let Some(missing) = ex
        .gold_passage_ids
        .iter()
        .find(|g| idx.column_of(g).is_none())
    {
        return failed_record(index, ex, format!("gold passage {missing:?} not in corpus"));
    }
    let retrieval = match retriever.retrieve(&ex.question, config) {
        Ok(r) => r,
        Err(e) => return failed_record(index, ex, e.to_string()),
    };
    let id_of = |c: usize| idx.passage(c).id.clone();
    let ranked_ids: Vec<String> = top_k(&retrieval.artifacts.p_tilde, 10)
        .into_iter()
        .map(id_of)
        .collect();
    let selected_ids: Vec<String> = retrieval
        .result
        .selected
        .iter()
        .map(|s| id_of(s.column))
        .collect();

    let (prediction, em, f1, error) = match answerer {
        None => (None, None, None, None),
        Some(llm) => {
            let passages = retrieval.result.selected_passages(idx);
            match answer(&ex.question, &passages, llm) {
                Ok(pred) => {
                    let em = exact_match(&pred, &ex.answers);
                    let f1 = token_f1(&pred, &ex.answers);
                    (Some(pred), Some(em), Some(f1), None)
                }
                Err(e) => (None, None, None, Some(e.to_string())),
            }
        }
    };

    ExampleRecord {
        index,
        id: ex.id.clone(),
        question: ex.question.clone(),
        recall_at_5: recall_at_k(&ranked_ids, &ex.gold_passage_ids, 5),
        recall_at_10: recall_at_k(&ranked_ids, &ex.gold_passage_ids, 10),
        hit_at_5: hit_at_k(&ranked_ids, &ex.gold_passage_ids, 5),
        hit_at_10: hit_at_k(&ranked_ids, &ex.gold_passage_ids, 10),
        num_selected: selected_ids.len(),
        selected_ids,
        ranked_ids,
        prediction,
        em,
        f1,
        error,
        retrieval_seconds: retrieval.core_time.as_secs_f64(),
    }
}

/// Evaluates every example; per-example failures are recorded, not raised.
/// `answerer = None` skips answer generation and EM/F1.
pub fn run_eval(
    dataset: &[QAExample],
    retriever: &Retriever<'_>,
    config: &RetrievalConfig,
    answerer: Option<&Answerer>,
    parallelism: usize,
) -> Result<EvalReport> {
    config.validate()?;
    let n = retriever.index().n_passages();
    if config.k1 > n {
        return Err(Error::Config(format!(
            "k1={} exceeds the {n} passages in the index",
            config.k1
        )));
    }
    let wall = Instant::now();
    let records: Vec<ExampleRecord> = crate::with_pool(parallelism, || {
        dataset
            .par_iter()
            .enumerate()
            .map(|(i, ex)| evaluate_one(i, ex, retriever, config, answerer))
            .collect()
    });
    log::info!(
        "evaluated {} examples in {:.3}s",
        records.len(),
        wall.elapsed().as_secs_f64()
    );
    let per_example_seconds: Vec<f64> = records.iter().map(|r| r.retrieval_seconds).collect();
    let timing = TimingReport {
        total_retrieval_seconds: per_example_seconds.iter().sum(),
        per_example_seconds,
    };
    Ok(EvalReport {
        config: *config,
        aggregates: aggregate(&records),
        records,
        timing,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    /// Aligned-column summary; metrics are percentages as in the usual MHQA
    /// tables.
    pub fn to_table(&self) -> String {
        let a = &self.aggregates;
        let c = &self.config;
        let headers = [
            "Recall@5",
            "Recall@10",
            "Hit@5",
            "Hit@10",
            "EM",
            "F1",
            "Avg|C_q|",
            "Examples",
            "Failed",
        ];
        let values = [
            format!("{:.2}", 100.0 * a.recall_at_5),
            format!("{:.2}", 100.0 * a.recall_at_10),
            format!("{:.2}", 100.0 * a.hit_at_5),
            format!("{:.2}", 100.0 * a.hit_at_10),
            fmt_opt(a.mean_em),
            fmt_opt(a.mean_f1),
            format!("{:.2}", a.mean_selected),
            a.examples.to_string(),
            a.failed.to_string(),
        ];
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode={:?} eta={} beta={} t={} k1={} k2={} weights={} se={} struct={}",
            c.mode,
            c.eta,
            c.beta,
            c.steps,
            c.k1,
            c.k2,
            c.use_weight_matrix,
            c.use_semantic_enhancement,
            c.use_structural_enhancement
        );
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let row = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(out, "{}", row(headers.to_vec()));
        let _ = writeln!(out, "{}", row(values.iter().map(String::as_str).collect()));
        out
    }

    /// Writes `report.json`, `report.txt` and `timing.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join("report.json"), &json)?;
        write_atomic(&dir.join("report.txt"), self.to_table().as_bytes())?;
        let mut timing = serde_json::to_vec_pretty(&self.timing)?;
        timing.push(b'\n');
        write_atomic(&dir.join("timing.json"), &timing)
    }
}
