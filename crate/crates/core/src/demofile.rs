//! On-disk demonstration sets.
//!
//! A demo file is a JSON document whose header pins the format version, the
//! suite digest and the seeds that produced it, so a file can be checked
//! against the suite it claims to belong to.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasksuite::{make_suite, Demonstration, SuiteSpec};

pub const DEMO_FORMAT: &str = "tokenskill-demos";
pub const DEMO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DemoFileError {
    #[error("demo file is malformed: {0}")]
    Malformed(String),
    #[error("demo file format `{0}` is not {DEMO_FORMAT}")]
    Format(String),
    #[error("demo file version {found}, this build reads {DEMO_VERSION}")]
    Version { found: u32 },
    #[error("demo file was made for suite {found}, expected {expected}")]
    SuiteMismatch { found: String, expected: String },
    #[error("task {task}, demonstration {index}: {message}")]
    Demo { task: usize, index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub format: String,
    pub version: u32,
    pub suite_digest: String,
    pub suite_seed: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDemos {
    pub task: usize,
    pub instruction: String,
    pub demos: Vec<Demonstration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoFile {
    pub header: DemoHeader,
    pub tasks: Vec<TaskDemos>,
}

impl DemoFile {
    pub fn new(spec: &SuiteSpec, suite_seed: u64, seed: u64, tasks: Vec<TaskDemos>) -> Self {
        Self {
            header: DemoHeader {
                format: DEMO_FORMAT.into(),
                version: DEMO_VERSION,
                suite_digest: spec.digest(),
                suite_seed,
                seed,
            },
            tasks,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("demo file serializes")
    }

    /// Replays every demonstration against the suite it names; all must
    /// reproduce their observations bit-exactly and end at the goal.
    pub fn verify(&self, spec: &SuiteSpec) -> Result<(), DemoFileError> {
        let expected = spec.digest();
        if self.header.suite_digest != expected {
            return Err(DemoFileError::SuiteMismatch {
                found: self.header.suite_digest.clone(),
                expected,
            });
        }
        let suite = make_suite(spec, self.header.suite_seed).map_err(|e| DemoFileError::Malformed(e.to_string()))?;
        for entry in &self.tasks {
            let task = suite.iter().find(|t| t.id == entry.task).ok_or(DemoFileError::Demo {
                task: entry.task,
                index: 0,
                message: "task is not in the suite".into(),
            })?;
            for (index, demo) in entry.demos.iter().enumerate() {
                let err = |message: &str| DemoFileError::Demo {
                    task: entry.task,
                    index,
                    message: message.into(),
                };
                let end = demo
                    .replay(task, &spec.sim)
                    .ok_or_else(|| err("replay diverges from the recording"))?;
                if !crate::tasksuite::goal_predicate(&end, task) {
                    return Err(err("does not reach the goal"));
                }
            }
        }
        Ok(())
    }
}

/// Parses and structurally validates a demo file.
pub fn decode_demo_file(bytes: &[u8]) -> Result<DemoFile, DemoFileError> {
    #[derive(Deserialize)]
    struct Peek {
        header: PeekHeader,
    }
    #[derive(Deserialize)]
    struct PeekHeader {
        format: String,
        version: u32,
    }
    let peek: Peek = serde_json::from_slice(bytes).map_err(|e| DemoFileError::Malformed(e.to_string()))?;
    if peek.header.format != DEMO_FORMAT {
        return Err(DemoFileError::Format(peek.header.format));
    }
    if peek.header.version != DEMO_VERSION {
        return Err(DemoFileError::Version {
            found: peek.header.version,
        });
    }
    let file: DemoFile = serde_json::from_slice(bytes).map_err(|e| DemoFileError::Malformed(e.to_string()))?;
    for entry in &file.tasks {
        for (index, d) in entry.demos.iter().enumerate() {
            let err = |message: String| DemoFileError::Demo {
                task: entry.task,
                index,
                message,
            };
            if d.task != entry.task {
                return Err(err(format!("belongs to task {}", d.task)));
            }
            if d.observations.len() != d.actions.len() {
                return Err(err(format!(
                    "{} observations for {} actions",
                    d.observations.len(),
                    d.actions.len()
                )));
            }
            let finite = d.observations.iter().flatten().all(|v| v.is_finite())
                && d.actions.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(err("non-finite values".into()));
            }
        }
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasksuite::{scripted_expert, SimParams};

    fn sample() -> (SuiteSpec, DemoFile) {
        let spec = SuiteSpec::with_tasks(2);
        let suite = make_suite(&spec, 4).unwrap();
        let tasks = suite
            .iter()
            .map(|t| TaskDemos {
                task: t.id,
                instruction: t.instruction.clone(),
                demos: scripted_expert(t, &SimParams::default(), 9, 2).unwrap(),
            })
            .collect();
        (spec.clone(), DemoFile::new(&spec, 4, 9, tasks))
    }

    #[test]
    fn round_trip_and_verify() {
        let (spec, file) = sample();
        let back = decode_demo_file(&file.encode()).unwrap();
        assert_eq!(back, file);
        back.verify(&spec).unwrap();
        assert!(matches!(
            back.verify(&SuiteSpec::with_tasks(3)),
            Err(DemoFileError::SuiteMismatch { .. })
        ));
    }

    #[test]
    fn tampered_files_are_rejected() {
        let (spec, mut file) = sample();
        file.tasks[0].demos[0].actions[0][0] += 0.01;
        let decoded = decode_demo_file(&file.encode()).unwrap();
        assert!(matches!(
            decoded.verify(&spec),
            Err(DemoFileError::Demo { index: 0, .. })
        ));

        let (_, mut file) = sample();
        file.tasks[0].demos[0].actions.pop();
        assert!(matches!(
            decode_demo_file(&file.encode()),
            Err(DemoFileError::Demo { .. })
        ));

        let (_, mut file) = sample();
        file.header.version = 7;
        assert_eq!(
            decode_demo_file(&file.encode()),
            Err(DemoFileError::Version { found: 7 })
        );
        assert!(matches!(decode_demo_file(b"[]"), Err(DemoFileError::Malformed(_))));
    }
}
