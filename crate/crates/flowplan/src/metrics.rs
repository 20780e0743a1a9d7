//! Row-level scoring of executed episodes and report serialization.
//!
//! Every executed tool is one action row, judged against the gold chain at
//! the progress the episode had actually reached; every episode carries
//! exactly one stop row, judged on whether the run halted through the stop
//! mechanism precisely when the chain was complete. Tool EM is the row
//! average, Overall Success the episode-level conjunction.

use crate::environment::Task;
use crate::error::{FlowError, Result};
use crate::executor::EpisodeRecord;
use crate::theory::BoundReport;
use crate::training::TrainHistory;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Row outcomes of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeScore {
    pub action_correct: usize,
    pub action_total: usize,
    pub stop_correct: bool,
}

impl EpisodeScore {
    pub fn correct_rows(&self) -> usize {
        self.action_correct + self.stop_correct as usize
    }

    pub fn total_rows(&self) -> usize {
        self.action_total + 1
    }

    /// Every row correct: the gold chain executed exactly, then a stop.
    pub fn success(&self) -> bool {
        self.stop_correct && self.action_correct == self.action_total
    }
}

/// Scores one episode against its task.
///
/// Progress advances exactly when the executed tool matches the gold chain
/// at the current position, mirroring the environment; an action after
/// completion is always a failed row. The stop row succeeds when the
/// episode halted through its stop mechanism with the chain complete and
/// nothing extra executed.
pub fn score_episode(episode: &EpisodeRecord, task: &Task) -> EpisodeScore {
    let gold = &task.gold;
    let mut progress = 0usize;
    let mut correct = 0usize;
    for &tool in &episode.executed {
        if progress < gold.len() && tool == gold[progress] {
            correct += 1;
            progress += 1;
        }
    }
    let stop_correct = episode.halted_by_stop
        && progress == gold.len()
        && episode.executed.len() == gold.len();
    EpisodeScore {
        action_correct: correct,
        action_total: episode.executed.len(),
        stop_correct,
    }
}

/// Aggregates over one group of episodes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GroupMetrics {
    pub episodes: usize,
    /// Correct rows over all rows, actions and stops together.
    pub tool_em: f64,
    pub stop_accuracy: f64,
    pub overall_success: f64,
}

/// Metrics per group, keyed `all`, `split:<name>`, `domain:<name>`, and
/// `unseen` for episodes whose task touches a held-out tool.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub groups: BTreeMap<String, GroupMetrics>,
}

#[derive(Default)]
struct Accumulator {
    episodes: usize,
    rows_correct: usize,
    rows_total: usize,
    stops_correct: usize,
    successes: usize,
}

impl Accumulator {
    fn add(&mut self, score: &EpisodeScore) {
        self.episodes += 1;
        self.rows_correct += score.correct_rows();
        self.rows_total += score.total_rows();
        self.stops_correct += score.stop_correct as usize;
        self.successes += score.success() as usize;
    }

    fn finish(&self) -> GroupMetrics {
        let n = self.episodes.max(1) as f64;
        GroupMetrics {
            episodes: self.episodes,
            tool_em: self.rows_correct as f64 / self.rows_total.max(1) as f64,
            stop_accuracy: self.stops_correct as f64 / n,
            overall_success: self.successes as f64 / n,
        }
    }
}

/// Scores every episode and groups the results. Episodes referencing a
/// task id absent from `tasks` are an error.
pub fn compute_metrics(episodes: &[EpisodeRecord], tasks: &[Task]) -> Result<MetricsReport> {
    let by_id: BTreeMap<&str, &Task> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut groups: BTreeMap<String, Accumulator> = BTreeMap::new();
    for episode in episodes {
        let task = by_id.get(episode.task_id.as_str()).ok_or_else(|| {
            FlowError::Reference(format!("episode references unknown task '{}'", episode.task_id))
        })?;
        let score = score_episode(episode, task);
        groups.entry("all".into()).or_default().add(&score);
        groups
            .entry(format!("split:{}", task.split.as_str()))
            .or_default()
            .add(&score);
        groups
            .entry(format!("domain:{}", task.domain))
            .or_default()
            .add(&score);
        if task.touches_unseen() {
            groups.entry("unseen".into()).or_default().add(&score);
        }
    }
    Ok(MetricsReport {
        groups: groups
            .into_iter()
            .map(|(k, acc)| (k, acc.finish()))
            .collect(),
    })
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,episodes,tool_em,stop_accuracy,overall_success\n");
        for (name, g) in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                name, g.episodes, g.tool_em, g.stop_accuracy, g.overall_success
            ));
        }
        out
    }
}

/// Writes `metrics.json`, `metrics.csv`, `history.csv` when a history is
/// given, and one `bound_<id>.csv` per bound report, all atomically, into
/// `dir`.
pub fn write_report(
    dir: &Path,
    metrics: &MetricsReport,
    history: Option<&TrainHistory>,
    bounds: &[BoundReport],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let value = serde_json::to_value(metrics)
        .map_err(|e| FlowError::input(format!("metrics serialization: {e}")))?;
    let json = serde_json::to_string_pretty(&value)
        .map_err(|e| FlowError::input(format!("metrics serialization: {e}")))?;
    write_atomic(&dir.join("metrics.json"), json.as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), metrics.to_csv().as_bytes())?;
    if let Some(h) = history {
        h.write_csv(&dir.join("history.csv"))?;
    }
    for bound in bounds {
        write_atomic(
            &dir.join(format!("bound_{}.csv", bound.id)),
            bound.to_csv().as_bytes(),
        )?;
    }
    Ok(())
}
