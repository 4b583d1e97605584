//! Run logs: one JSON record per line.
//!
//! A log starts with a header, then for each generation its evaluation
//! records followed by one generation record.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::evaluator::EvalStatus;
use crate::search::{Chromosome, Individual};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: ExperimentConfig,
    pub mode: Mode,
    pub world_size: usize,
    /// Seconds since the Unix epoch.
    pub start_timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub generation: usize,
    pub index: usize,
    pub chromosome: Chromosome,
    pub accuracy: f64,
    pub parameters: usize,
    pub train_seconds: f64,
    pub status: EvalStatus,
}

impl EvaluationRecord {
    pub fn from_individual(generation: usize, index: usize, ind: &Individual) -> Self {
        let r = ind.eval_result.as_ref();
        Self {
            generation,
            index,
            chromosome: ind.chromosome,
            accuracy: ind.fitness.unwrap_or(0.0),
            parameters: r.map_or(0, |r| r.trainable_parameters),
            train_seconds: r.map_or(0.0, |r| r.train_seconds),
            status: r.map_or_else(
                || EvalStatus::Failed("unevaluated".into()),
                |r| r.status.clone(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Header(RunHeader),
    Evaluation(EvaluationRecord),
    Generation(GenerationRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub evaluations: Vec<EvaluationRecord>,
    pub generations: Vec<GenerationRecord>,
}

impl RunLog {
    pub fn new(header: RunHeader) -> Self {
        Self {
            header,
            evaluations: Vec::new(),
            generations: Vec::new(),
        }
    }

    /// Appends a finished generation.
    pub fn push_generation(
        &mut self,
        generation: usize,
        population: &[Individual],
        wall_seconds: f64,
    ) {
        self.evaluations.extend(
            population
                .iter()
                .enumerate()
                .map(|(i, ind)| EvaluationRecord::from_individual(generation, i, ind)),
        );
        self.generations.push(GenerationRecord {
            generation,
            wall_seconds,
        });
    }

    /// Evaluation records of one generation.
    pub fn generation(&self, generation: usize) -> impl Iterator<Item = &EvaluationRecord> {
        self.evaluations
            .iter()
            .filter(move |e| e.generation == generation)
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = vec![Record::Header(self.header.clone())];
        for g in &self.generations {
            out.extend(
                self.generation(g.generation)
                    .cloned()
                    .map(Record::Evaluation),
            );
            out.push(Record::Generation(g.clone()));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            writeln!(
                out,
                "{}",
                serde_json::to_string(&r).expect("records serialize")
            )
            .expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = None;
        let mut evaluations = Vec::new();
        let mut generations = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let record: Record = serde_json::from_str(line)
                .map_err(|e| Error::Analysis(format!("line {}: {e}", n + 1)))?;
            match record {
                Record::Header(h) if header.is_none() && n == 0 => header = Some(h),
                Record::Header(_) => {
                    return Err(Error::Analysis(format!(
                        "line {}: header must be the first and only header record",
                        n + 1
                    )))
                }
                Record::Evaluation(e) => evaluations.push(e),
                Record::Generation(g) => generations.push(g),
            }
        }
        let header = header.ok_or_else(|| Error::Analysis("log has no header record".into()))?;
        Ok(Self {
            header,
            evaluations,
            generations,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Analysis(m) => Error::Analysis(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that generations are numbered `0..G` and each holds exactly
    /// `population_size` evaluations indexed `0..population_size`.
    pub fn check_complete(&self) -> Result<()> {
        let size = self.header.config.ga.population_size;
        if self.generations.is_empty() {
            return Err(Error::Analysis("log contains no generations".into()));
        }
        for (i, g) in self.generations.iter().enumerate() {
            if g.generation != i {
                return Err(Error::Analysis(format!(
                    "generation {i} missing (found generation {} in its place)",
                    g.generation
                )));
            }
            let mut indices: Vec<usize> = self.generation(i).map(|e| e.index).collect();
            indices.sort_unstable();
            if indices != (0..size).collect::<Vec<_>>() {
                return Err(Error::Analysis(format!(
                    "generation {i} is incomplete: {} of {size} evaluation records",
                    indices.len()
                )));
            }
        }
        if let Some(stray) = self
            .evaluations
            .iter()
            .find(|e| e.generation >= self.generations.len())
        {
            return Err(Error::Analysis(format!(
                "generation {} is incomplete: evaluations without a generation record",
                stray.generation
            )));
        }
        Ok(())
    }

    /// The same log with every timing field zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut log = self.clone();
        log.header.start_timestamp = 0;
        log.evaluations
            .iter_mut()
            .for_each(|e| e.train_seconds = 0.0);
        log.generations
            .iter_mut()
            .for_each(|g| g.wall_seconds = 0.0);
        log
    }

    /// Chromosomes of each generation, in population order.
    pub fn chromosomes_by_generation(&self) -> Vec<Vec<Chromosome>> {
        self.generations
            .iter()
            .map(|g| {
                self.generation(g.generation)
                    .map(|e| e.chromosome)
                    .collect()
            })
            .collect()
    }

    pub fn total_wall_seconds(&self) -> f64 {
        self.generations.iter().map(|g| g.wall_seconds).sum()
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::fake_result;

    fn sample() -> RunLog {
        let mut cfg = ExperimentConfig::default();
        cfg.ga.population_size = 2;
        let mut log = RunLog::new(RunHeader {
            config: cfg,
            mode: Mode::Local,
            world_size: 1,
            start_timestamp: 17,
        });
        for g in 0..2 {
            let pop: Vec<Individual> = [[1, 2, 3, 4], [5, 6, 7, 8]]
                .iter()
                .map(|&genes| {
                    let c = Chromosome::new(genes).unwrap();
                    Individual::evaluated(c, fake_result(&c))
                })
                .collect();
            log.push_generation(g, &pop, 0.5);
        }
        log
    }

    #[test]
    fn jsonl_round_trip() {
        let log = sample();
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("{\"type\":\"header\""));
        assert_eq!(RunLog::parse(&text).unwrap(), log);
        log.check_complete().unwrap();
    }

    #[test]
    fn missing_record_names_generation() {
        let mut log = sample();
        log.evaluations.remove(3);
        let err = log.check_complete().unwrap_err().to_string();
        assert!(err.contains("generation 1"), "{err}");
    }

    #[test]
    fn rejects_garbage() {
        assert!(RunLog::parse("not json\n").is_err());
        assert!(RunLog::parse("").is_err());
    }
}
