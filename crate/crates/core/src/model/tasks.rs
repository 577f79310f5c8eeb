//! Declarative task descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which annotation supervises a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Action,
    Verb,
    Noun,
    Gaze,
    Hands,
}

impl Target {
    pub fn letter(self) -> char {
        match self {
            Target::Action => 'A',
            Target::Verb => 'V',
            Target::Noun => 'N',
            Target::Gaze => 'G',
            Target::Hands => 'H',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Action => "action",
            Target::Verb => "verb",
            Target::Noun => "noun",
            Target::Gaze => "gaze",
            Target::Hands => "hands",
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        let t = token.trim();
        [Target::Action, Target::Verb, Target::Noun, Target::Gaze, Target::Hands]
            .into_iter()
            .find(|c| t.eq_ignore_ascii_case(c.name()) || (t.len() == 1 && t.eq_ignore_ascii_case(&c.letter().to_string())))
            .ok_or_else(|| Error::Config(format!("unknown task name {t:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classification { num_classes: usize },
    Coordinate { num_points: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub target: Target,
    pub kind: TaskKind,
}

/// Label-space sizes used to instantiate the standard tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub actions: usize,
    pub verbs: usize,
    pub nouns: usize,
}

/// Ordered task heads plus the task used for early stopping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
    main_task: String,
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskSpec>, main_task: &str) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("task set is empty".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task name {:?}", t.name)));
            }
            match t.kind {
                TaskKind::Classification { num_classes } if num_classes < 2 => {
                    return Err(Error::Config(format!("task {:?} needs at least 2 classes", t.name)))
                }
                TaskKind::Coordinate { num_points: 0 } => {
                    return Err(Error::Config(format!("task {:?} needs at least 1 point", t.name)))
                }
                _ => {}
            }
        }
        if !tasks.iter().any(|t| t.name == main_task) {
            return Err(Error::Config(format!("main task {main_task:?} is not declared")));
        }
        Ok(TaskSet { tasks, main_task: main_task.to_string() })
    }

    /// Parses `"A+V+N+G+H"` style declarations (letters or full names, `+` or `,`).
    pub fn parse(spec: &str, labels: LabelSpace, main_task: Option<&str>) -> Result<Self> {
        let mut tasks = Vec::new();
        for token in spec.split(['+', ',']).map(str::trim).filter(|s| !s.is_empty()) {
            let target = Target::parse(token)?;
            let kind = match target {
                Target::Action => TaskKind::Classification { num_classes: labels.actions },
                Target::Verb => TaskKind::Classification { num_classes: labels.verbs },
                Target::Noun => TaskKind::Classification { num_classes: labels.nouns },
                Target::Gaze => TaskKind::Coordinate { num_points: 1 },
                Target::Hands => TaskKind::Coordinate { num_points: 2 },
            };
            tasks.push(TaskSpec { name: target.name().to_string(), target, kind });
        }
        let main = match main_task {
            Some(m) => Target::parse(m)?.name().to_string(),
            None => tasks
                .iter()
                .find(|t| matches!(t.kind, TaskKind::Classification { .. }))
                .or(tasks.first())
                .map(|t| t.name.clone())
                .unwrap_or_default(),
        };
        Self::new(tasks, &main)
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn main_task(&self) -> &str {
        &self.main_task
    }

    pub fn get(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Compact letter form, e.g. `"A+H+G"`.
    pub fn label(&self) -> String {
        self.tasks.iter().map(|t| t.target.letter().to_string()).collect::<Vec<_>>().join("+")
    }

    pub fn without(&self, name: &str) -> Result<Self> {
        let tasks: Vec<TaskSpec> = self.tasks.iter().filter(|t| t.name != name).cloned().collect();
        let main = if self.main_task == name {
            tasks.first().map(|t| t.name.clone()).unwrap_or_default()
        } else {
            self.main_task.clone()
        };
        Self::new(tasks, &main)
    }
}
