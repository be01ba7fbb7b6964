//! In-process training jobs with pollable snapshots.

use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use blendfield::fields::MlpField;
use blendfield::guidance::{ExternalScorer, MockScorer, Scorer};
use blendfield::math::Vec3;
use blendfield::raster::{Image, Resolution};
use blendfield::trainer::{init_state, train_from, StepRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::scene::{EditDescriptor, Scene};

/// A red disc on white; the default mock target.
pub fn default_target(res: Resolution) -> Image {
    let (cx, cy) = (res.width as f64 / 2.0, res.height as f64 / 2.0);
    let r = res.width.min(res.height) as f64 * 0.3;
    Image::from_fn(res, |c, row| {
        let (dx, dy) = (c as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
        if dx * dx + dy * dy <= r * r {
            [0.9, 0.1, 0.1]
        } else {
            [1.0, 1.0, 1.0]
        }
    })
}

/// How a job obtains its scorer.
#[derive(Debug, Clone)]
pub enum ScorerSpec {
    /// Mock scorer whose caption matches `target` (default: a red disc at
    /// the training resolution).
    Mock { target: Option<Image>, seed: u64 },
    /// External process speaking the JSON-lines protocol.
    External { program: String, args: Vec<String> },
}

impl ScorerSpec {
    pub fn build(&self, caption: &str, resolution: Resolution) -> Result<Box<dyn Scorer>, ServiceError> {
        Ok(match self {
            ScorerSpec::Mock { target, seed } => {
                let t = target.clone().unwrap_or_else(|| default_target(resolution));
                Box::new(MockScorer::with_target(&t, caption, *seed))
            }
            ScorerSpec::External { program, args } => Box::new(ExternalScorer::spawn(program, args)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
    Cancelled,
}

/// Consistent view of a job at one step boundary.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: JobState,
    pub step: u64,
    pub last: Option<StepRecord>,
    pub generator: Arc<MlpField>,
    pub center: Vec3,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    pub step: u64,
    pub total_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last: Option<StepRecord>,
    pub ema_center: Vec3,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct Job {
    pub id: String,
    pub scene: Arc<Scene>,
    pub edit: EditDescriptor,
    pub config: TrainConfig,
    snapshot: Mutex<Snapshot>,
    cancel: AtomicBool,
}

impl Job {
    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.lock().expect("job lock").clone()
    }

    pub fn status(&self) -> JobStatus {
        let s = self.snapshot();
        JobStatus {
            id: self.id.clone(),
            state: s.state,
            step: s.step,
            total_steps: self.config.steps,
            last: s.last,
            ema_center: s.center,
            error: s.error,
        }
    }

    pub fn is_running(&self) -> bool {
        self.snapshot().state == JobState::Running
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    /// The edit with the tracked center of the current snapshot.
    pub fn edit_at(&self, snap: &Snapshot) -> EditDescriptor {
        EditDescriptor {
            ema_center: Some(snap.center),
            ..self.edit.clone()
        }
    }

    /// Starts training on a background thread.
    pub fn start(
        id: String,
        scene: Arc<Scene>,
        edit: EditDescriptor,
        config: TrainConfig,
        scorer: ScorerSpec,
        out_dir: Option<PathBuf>,
    ) -> Result<Arc<Job>, ServiceError> {
        scene.validate_edit(&edit)?;
        config.validate()?;
        let state = init_state(&scene.field, &config)?;
        let job = Arc::new(Job {
            id,
            snapshot: Mutex::new(Snapshot {
                state: JobState::Running,
                step: 0,
                last: None,
                generator: Arc::new(state.generator.clone()),
                center: edit.roi.center(),
                error: None,
            }),
            scene,
            edit,
            config,
            cancel: AtomicBool::new(false),
        });
        let worker = job.clone();
        std::thread::spawn(move || {
            let result = scorer
                .build(&worker.edit.caption, worker.config.resolution)
                .and_then(|s| {
                    train_from(
                        state,
                        &worker.scene.field,
                        &worker.edit.roi,
                        &worker.edit.caption,
                        &worker.config,
                        s.as_ref(),
                        out_dir.as_deref(),
                        |st| {
                            let mut snap = worker.snapshot.lock().expect("job lock");
                            snap.step = st.step;
                            snap.last = st.history.last().copied();
                            snap.generator = Arc::new(st.generator.clone());
                            snap.center = st.tracker.center_or(worker.edit.roi.center());
                            drop(snap);
                            if worker.cancel.load(Ordering::SeqCst) {
                                ControlFlow::Break(())
                            } else {
                                ControlFlow::Continue(())
                            }
                        },
                    )
                    .map_err(ServiceError::from)
                });
            let mut snap = worker.snapshot.lock().expect("job lock");
            match result {
                Ok(_) if snap.step < worker.config.steps => snap.state = JobState::Cancelled,
                Ok(_) => snap.state = JobState::Done,
                Err(e) => {
                    snap.state = JobState::Failed;
                    snap.error = Some(e.to_string());
                }
            }
        });
        Ok(job)
    }
}
