use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LanguageMetrics;
use crate::error::{Error, Result};

pub const RESULTS_FILE: &str = "results.csv";
/// Cells averaging fewer distinct seeds than this are incomplete.
pub const MIN_SEEDS: usize = 3;
/// Differences at least this large are flagged.
pub const FLAG_THRESHOLD: f64 = 0.03;

/// Scores from one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub original_language: String,
    pub baseline: bool,
    pub otc: bool,
    pub metrics: Vec<LanguageMetrics>,
    /// Held-out pair retrieval; not a classification metric.
    pub retrieval_acc: Option<f64>,
}

impl RunResult {
    pub fn f1(&self, language: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.language == language)
            .map(|m| m.f1_micro)
    }
}

/// Mean over runs, with the seeds it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: Option<f64>,
    pub seeds: Vec<u64>,
    pub runs: usize,
}

impl Cell {
    fn from_values(values: impl IntoIterator<Item = (u64, f64)>) -> Self {
        let mut seeds = BTreeSet::new();
        let mut sum = 0.0;
        let mut runs = 0;
        for (seed, v) in values {
            seeds.insert(seed);
            sum += v;
            runs += 1;
        }
        let seeds: Vec<u64> = seeds.into_iter().collect();
        let mean = (seeds.len() >= MIN_SEEDS).then(|| sum / runs as f64);
        Self { mean, seeds, runs }
    }

    pub fn is_complete(&self) -> bool {
        self.mean.is_some()
    }

    fn render(&self) -> String {
        self.mean
            .map_or_else(|| "incomplete".into(), |m| format!("{m:.3}"))
    }

    fn seed_list(&self) -> String {
        self.seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Flag rule for differences between two cell means.
pub fn flag_delta(delta: f64) -> bool {
    delta.abs() >= FLAG_THRESHOLD - 1e-9
}

fn delta(a: &Cell, b: &Cell) -> Option<f64> {
    Some(b.mean? - a.mean?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<Cell>>,
}

impl Grid {
    pub fn cell(&self, row: &str, col: &str) -> Option<&Cell> {
        let r = self.row_labels.iter().position(|l| l == row)?;
        let c = self.col_labels.iter().position(|l| l == col)?;
        Some(&self.cells[r][c])
    }
}

pub const NO_DATA: &str = "No data";
pub const TRANSLATED: &str = "Translated";
pub const ORIGINAL: &str = "Original";
pub const NO_OTC: &str = "No OTC";
pub const WITH_OTC: &str = "OTC";

/// The three comparison layouts plus the retrieval summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub languages: Vec<String>,
    /// Condition x tested language, no OTC.
    pub table1: Grid,
    /// OTC setting x tested language, translated-only condition.
    pub table2: Grid,
    /// Original language x tested language, per OTC setting.
    pub table3_no_otc: Grid,
    pub table3_otc: Grid,
    /// OTC setting x original language.
    pub retrieval: Grid,
}

impl ReportTables {
    pub fn build(results: &[RunResult]) -> Self {
        let mut languages: Vec<String> = Vec::new();
        for r in results {
            for l in
                std::iter::once(&r.original_language).chain(r.metrics.iter().map(|m| &m.language))
            {
                if !languages.contains(l) {
                    languages.push(l.clone());
                }
            }
        }
        let f1_cell = |pred: &dyn Fn(&RunResult) -> bool, lang: &str| {
            Cell::from_values(
                results
                    .iter()
                    .filter(|r| pred(r))
                    .filter_map(|r| Some((r.seed, r.f1(lang)?))),
            )
        };
        let grid = |rows: &[&str], cols: &[String], f: &dyn Fn(&str, &str) -> Cell| Grid {
            row_labels: rows.iter().map(|s| s.to_string()).collect(),
            col_labels: cols.to_vec(),
            cells: rows
                .iter()
                .map(|r| cols.iter().map(|c| f(r, c)).collect())
                .collect(),
        };

        let table1 = grid(
            &[NO_DATA, TRANSLATED, ORIGINAL],
            &languages,
            &|row, lang| {
                let pred: Box<dyn Fn(&RunResult) -> bool> = match row {
                    NO_DATA => Box::new(|r| r.baseline && r.original_language != lang),
                    TRANSLATED => {
                        Box::new(|r| !r.baseline && !r.otc && r.original_language != lang)
                    }
                    _ => Box::new(|r| !r.baseline && !r.otc && r.original_language == lang),
                };
                f1_cell(&*pred, lang)
            },
        );
        let table2 = grid(&[NO_OTC, WITH_OTC], &languages, &|row, lang| {
            let otc = row == WITH_OTC;
            f1_cell(
                &|r| !r.baseline && r.otc == otc && r.original_language != lang,
                lang,
            )
        });
        let table3 = |otc: bool| {
            let rows: Vec<&str> = languages.iter().map(String::as_str).collect();
            grid(&rows, &languages, &|orig, lang| {
                f1_cell(
                    &|r| !r.baseline && r.otc == otc && r.original_language == orig,
                    lang,
                )
            })
        };
        let retrieval = grid(&[NO_OTC, WITH_OTC], &languages, &|row, orig| {
            let otc = row == WITH_OTC;
            Cell::from_values(
                results
                    .iter()
                    .filter(|r| !r.baseline && r.otc == otc && r.original_language == orig)
                    .filter_map(|r| Some((r.seed, r.retrieval_acc?))),
            )
        });
        Self {
            table1,
            table2,
            table3_no_otc: table3(false),
            table3_otc: table3(true),
            retrieval,
            languages,
        }
    }
}

/// Per-(original language, seed, tested language) F1 differences
/// OTC minus no OTC, over tested languages the run never saw originals
/// of. Runs without a partner are skipped.
pub fn otc_deltas(results: &[RunResult]) -> Vec<f64> {
    let mut sorted: Vec<&RunResult> = results.iter().filter(|r| !r.baseline && r.otc).collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut out = Vec::new();
    for r in sorted {
        let Some(partner) = results.iter().find(|p| {
            !p.baseline && !p.otc && p.seed == r.seed && p.original_language == r.original_language
        }) else {
            continue;
        };
        for m in r
            .metrics
            .iter()
            .filter(|m| m.language != r.original_language)
        {
            if let Some(f) = partner.f1(&m.language) {
                out.push(m.f1_micro - f);
            }
        }
    }
    out
}

fn align(rows: &[Vec<String>]) -> String {
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(String::len)
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn header(first: &str, cols: &[String]) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain(cols.iter().cloned())
        .collect()
}

fn render_table1(t: &ReportTables) -> (String, String) {
    let g = &t.table1;
    let mut rows = vec![header("condition", &g.col_labels)];
    let mut csv = String::from("condition,language,mean_f1,n_runs,seeds,complete\n");
    for (label, cells) in g.row_labels.iter().zip(&g.cells) {
        let mut row = vec![label.clone()];
        for (lang, c) in g.col_labels.iter().zip(cells) {
            row.push(c.render());
            writeln!(
                csv,
                "{label},{lang},{},{},{},{}",
                csv_mean(c),
                c.runs,
                c.seed_list(),
                c.is_complete()
            )
            .unwrap();
        }
        rows.push(row);
    }
    let txt = format!(
        "F1-micro by training condition (no OTC); mean over seeds\n\n{}",
        align(&rows)
    );
    (txt, csv)
}

fn csv_mean(c: &Cell) -> String {
    c.mean.map_or_else(String::new, |m| format!("{m:.3}"))
}

fn csv_delta(d: Option<f64>) -> (String, String) {
    match d {
        Some(d) => (format!("{d:.3}"), flag_delta(d).to_string()),
        None => (String::new(), String::new()),
    }
}

fn delta_rows(g: &Grid, label: &str) -> (Vec<String>, Vec<String>) {
    let mut d = vec![format!("delta {label}")];
    let mut f = vec![format!("|delta| >= {FLAG_THRESHOLD:.2}")];
    for c in 0..g.col_labels.len() {
        match delta(&g.cells[0][c], &g.cells[1][c]) {
            Some(x) => {
                d.push(format!("{x:+.3}"));
                f.push(if flag_delta(x) {
                    "*".into()
                } else {
                    String::new()
                });
            }
            None => {
                d.push("incomplete".into());
                f.push(String::new());
            }
        }
    }
    (d, f)
}

fn render_table2(t: &ReportTables) -> (String, String) {
    let mut csv =
        String::from("metric,language,f1_no_otc,f1_otc,delta,flag,seeds_no_otc,seeds_otc\n");
    let mut txt = String::new();
    for (g, metric, title) in [
        (
            &t.table2,
            "f1_micro_translated",
            "F1-micro on translated-only languages, without and with OTC",
        ),
        (
            &t.retrieval,
            "retrieval_acc",
            "Held-out pair retrieval accuracy by original language",
        ),
    ] {
        let mut rows = vec![header("", &g.col_labels)];
        for (label, cells) in g.row_labels.iter().zip(&g.cells) {
            rows.push(
                std::iter::once(label.clone())
                    .chain(cells.iter().map(Cell::render))
                    .collect(),
            );
        }
        let (d, f) = delta_rows(g, "(OTC - no OTC)");
        rows.push(d);
        rows.push(f);
        writeln!(txt, "{title}\n\n{}", align(&rows)).unwrap();
        for (c, lang) in g.col_labels.iter().enumerate() {
            let (off, on) = (&g.cells[0][c], &g.cells[1][c]);
            let (ds, fs) = csv_delta(delta(off, on));
            writeln!(
                csv,
                "{metric},{lang},{},{},{ds},{fs},{},{}",
                csv_mean(off),
                csv_mean(on),
                off.seed_list(),
                on.seed_list()
            )
            .unwrap();
        }
    }
    (txt, csv)
}

fn render_table3(t: &ReportTables) -> (String, String) {
    let (off, on) = (&t.table3_no_otc, &t.table3_otc);
    let mut rows = vec![header("original \\ tested", &off.col_labels)];
    let mut csv = String::from(
        "original_lang,test_lang,f1_no_otc,f1_otc,delta,flag,seeds_no_otc,seeds_otc\n",
    );
    for (r, orig) in off.row_labels.iter().enumerate() {
        let mut row = vec![orig.clone()];
        for (c, lang) in off.col_labels.iter().enumerate() {
            let (a, b) = (&off.cells[r][c], &on.cells[r][c]);
            let d = delta(a, b);
            let mark = if d.is_some_and(flag_delta) { " *" } else { "" };
            row.push(format!("{} / {}{mark}", a.render(), b.render()));
            let (ds, fs) = csv_delta(d);
            writeln!(
                csv,
                "{orig},{lang},{},{},{ds},{fs},{},{}",
                csv_mean(a),
                csv_mean(b),
                a.seed_list(),
                b.seed_list()
            )
            .unwrap();
        }
        rows.push(row);
    }
    let txt = format!(
        "F1-micro, no OTC / OTC; * marks |difference| >= {FLAG_THRESHOLD:.2}\n\n{}",
        align(&rows)
    );
    (txt, csv)
}

/// Long-format results: one line per (run, tested language).
pub fn results_csv(results: &[RunResult]) -> String {
    let mut out = String::from("run_id,seed,original_lang,test_lang,otc,f1_micro,retrieval_acc\n");
    for r in results {
        let retrieval = r.retrieval_acc.map_or_else(String::new, |x| x.to_string());
        for m in &r.metrics {
            writeln!(
                out,
                "{},{},{},{},{},{},{retrieval}",
                r.run_id, r.seed, r.original_language, m.language, r.otc, m.f1_micro
            )
            .unwrap();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub tables: ReportTables,
    pub written: Vec<PathBuf>,
}

/// Writes `results.csv` and `table{1,2,3}.{txt,csv}` into `out_dir`.
/// Output depends only on the set of results, not their order.
pub fn emit_reports(results: &[RunResult], out_dir: &Path) -> Result<ReportFiles> {
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].run_id == w[1].run_id) {
        return Err(Error::Integrity(format!(
            "duplicate run id {}",
            w[0].run_id
        )));
    }
    let tables = ReportTables::build(&sorted);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (t1, c1) = render_table1(&tables);
    let (t2, c2) = render_table2(&tables);
    let (t3, c3) = render_table3(&tables);
    let files = [
        (RESULTS_FILE, results_csv(&sorted)),
        ("table1.txt", t1),
        ("table1.csv", c1),
        ("table2.txt", t2),
        ("table2.csv", c2),
        ("table3.txt", t3),
        ("table3.csv", c3),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(ReportFiles { tables, written })
}
