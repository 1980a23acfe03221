//! Expansion and execution of a grid of training runs.
//!
//! Every cell trains in its own directory. A manifest of completed run
//! ids makes an interrupted sweep resumable.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSplit;
use crate::error::{Error, Result};
use crate::eval_stats::{evaluate, probe_retrieval, RunResult};
use crate::par::{map_slice, ExecMode};
use crate::trainer::{train_on, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULT_FILE: &str = "result.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtcSetting {
    On,
    Off,
    #[default]
    Both,
}

impl OtcSetting {
    pub fn values(self) -> &'static [bool] {
        match self {
            OtcSetting::On => &[true],
            OtcSetting::Off => &[false],
            OtcSetting::Both => &[false, true],
        }
    }
}

impl std::str::FromStr for OtcSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!(
                "otc must be on, off or both, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    /// One original language per run.
    pub languages: Vec<String>,
    pub otc: OtcSetting,
    pub seeds: Vec<u64>,
    /// Also train original-only baseline runs.
    pub baseline: bool,
    /// Shared settings; language, OTC flag, seed and output dir are
    /// overwritten per cell.
    pub base: RunConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            languages: vec!["en".into()],
            otc: OtcSetting::Both,
            seeds: vec![0, 1, 2],
            baseline: false,
            base: RunConfig::desk_scale(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub run_id: String,
    pub config: RunConfig,
}

pub fn run_id(language: &str, baseline: bool, otc: bool, seed: u64) -> String {
    let mode = match (baseline, otc) {
        (true, _) => "baseline",
        (false, true) => "otc",
        (false, false) => "plain",
    };
    format!("{language}-{mode}-s{seed}")
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "a sweep needs at least one language and one seed".into(),
            ));
        }
        if let Some(l) = self
            .languages
            .iter()
            .find(|l| l.contains(['+', ',', ' ', '/']))
        {
            return Err(Error::Usage(format!(
                "{l:?}: each run trains on a single original language; list languages separately"
            )));
        }
        let distinct: BTreeSet<_> = self.languages.iter().collect();
        if distinct.len() != self.languages.len() {
            return Err(Error::Config("duplicate language in sweep".into()));
        }
        Ok(())
    }

    /// Cells in a fixed order: language, then mode, then seed.
    pub fn expand(&self, out_dir: &Path) -> Result<Vec<SweepCell>> {
        self.validate()?;
        let mut modes: Vec<(bool, bool)> = Vec::new();
        if self.baseline {
            modes.push((true, false));
        }
        modes.extend(self.otc.values().iter().map(|&o| (false, o)));
        let mut cells = Vec::new();
        for lang in &self.languages {
            for &(baseline, otc) in &modes {
                for &seed in &self.seeds {
                    let id = run_id(lang, baseline, otc, seed);
                    let mut config = self.base.clone();
                    config.original_language = lang.clone();
                    config.baseline = baseline;
                    config.use_otc = otc;
                    config.seed = seed;
                    config.output_dir = out_dir.join(&id);
                    cells.push(SweepCell { run_id: id, config });
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub completed: BTreeSet<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

pub fn read_result(run_dir: &Path) -> Result<RunResult> {
    let path = run_dir.join(RESULT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Results of every completed run listed in the manifest of `dir`.
pub fn load_results(dir: &Path) -> Result<Vec<RunResult>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .completed
        .iter()
        .map(|id| read_result(&dir.join(id)))
        .collect()
}

/// Trains one cell, scores it and writes `result.json` next to the run.
pub fn run_cell(corpus: &CorpusSplit, cell: &SweepCell, eval_mode: ExecMode) -> Result<RunResult> {
    let dir = &cell.config.output_dir;
    let outcome = train_on(corpus, &cell.config, Some(dir))?;
    let metrics = evaluate(&outcome.model, &corpus.test, eval_mode)?;
    let retrieval_acc = if cell.config.baseline || corpus.probe.is_empty() {
        None
    } else {
        Some(probe_retrieval(
            &outcome.model,
            corpus,
            &cell.config.original_language,
            eval_mode,
        )?)
    };
    let result = RunResult {
        run_id: cell.run_id.clone(),
        seed: cell.config.seed,
        original_language: cell.config.original_language.clone(),
        baseline: cell.config.baseline,
        otc: cell.config.use_otc,
        metrics,
        retrieval_acc,
    };
    let path = dir.join(RESULT_FILE);
    let json = serde_json::to_string_pretty(&result).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    /// In cell order.
    pub results: Vec<RunResult>,
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
    pub out_dir: PathBuf,
}

/// Runs every cell not yet in the manifest of `out_dir`. Cells run with
/// `mode`; each one evaluates sequentially.
pub fn run_sweep(
    corpus: &CorpusSplit,
    spec: &SweepSpec,
    out_dir: &Path,
    mode: ExecMode,
) -> Result<SweepOutcome> {
    let cells = spec.expand(out_dir)?;
    for lang in &spec.languages {
        if !corpus.has_language(lang) {
            return Err(Error::Lookup(format!("language {lang:?} not in corpus")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = Mutex::new(Manifest::load(out_dir)?);
    let done: BTreeSet<String> = manifest.lock().expect("manifest lock").completed.clone();
    let outcomes = map_slice(mode, &cells, |cell| -> Result<(RunResult, bool)> {
        if done.contains(&cell.run_id) {
            if let Ok(r) = read_result(&cell.config.output_dir) {
                return Ok((r, false));
            }
        }
        let r = run_cell(corpus, cell, ExecMode::Sequential)?;
        let mut m = manifest.lock().expect("manifest lock");
        m.completed.insert(cell.run_id.clone());
        m.save(out_dir)?;
        Ok((r, true))
    });
    let mut out = SweepOutcome {
        results: Vec::new(),
        trained: Vec::new(),
        skipped: Vec::new(),
        out_dir: out_dir.to_path_buf(),
    };
    for (cell, o) in cells.iter().zip(outcomes) {
        let (r, trained) = o?;
        if trained {
            out.trained.push(cell.run_id.clone());
        } else {
            out.skipped.push(cell.run_id.clone());
        }
        out.results.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_count_and_ids() {
        let spec = SweepSpec {
            languages: vec!["en".into(), "fr".into()],
            otc: OtcSetting::Both,
            ..SweepSpec::default()
        };
        let cells = spec.expand(Path::new("out")).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].run_id, "en-plain-s0");
        assert_eq!(cells[5].run_id, "en-otc-s2");
        assert_eq!(cells[5].config.output_dir, Path::new("out/en-otc-s2"));
        let with_base = SweepSpec {
            baseline: true,
            ..spec
        };
        assert_eq!(with_base.expand(Path::new("o")).unwrap().len(), 18);
    }

    #[test]
    fn mixtures_rejected() {
        let spec = SweepSpec {
            languages: vec!["en+fr".into()],
            ..SweepSpec::default()
        };
        assert!(matches!(spec.expand(Path::new("o")), Err(Error::Usage(_))));
    }
}
