//! Dense prediction tasks and sets of them.

use std::fmt;

use crate::{Error, Result};

/// The three dense prediction tasks, in their fixed index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Segmentation,
    Depth,
    Normal,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Segmentation, Task::Depth, Task::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Task> {
        Task::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "seg",
            Task::Depth => "depth",
            Task::Normal => "normal",
        }
    }

    pub fn from_name(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown task '{s}' (expected seg, depth or normal)"
                ))
            })
    }

    /// Channels of the task's prediction for `num_classes` segmentation classes.
    pub fn channels(self, num_classes: usize) -> usize {
        match self {
            Task::Segmentation => num_classes,
            Task::Depth => 1,
            Task::Normal => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bitset over task indices `0..8`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TaskSet(u8);

impl TaskSet {
    pub const fn empty() -> Self {
        TaskSet(0)
    }

    /// Tasks `0..k`.
    pub fn first(k: usize) -> Self {
        assert!(k <= 8, "at most 8 tasks");
        TaskSet(((1u16 << k) - 1) as u8)
    }

    pub fn from_bits(bits: u8) -> Self {
        TaskSet(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, i: usize) -> Self {
        TaskSet(self.0 | (1 << i))
    }

    pub fn contains(self, i: usize) -> bool {
        i < 8 && self.0 & (1 << i) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: TaskSet) -> Self {
        TaskSet(self.0 | other.0)
    }

    pub fn intersection(self, other: TaskSet) -> Self {
        TaskSet(self.0 & other.0)
    }

    /// Tasks in `0..k` not in `self`.
    pub fn complement(self, k: usize) -> Self {
        TaskSet(TaskSet::first(k).0 & !self.0)
    }

    /// Member indices in ascending order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..8).filter(move |&i| self.contains(i))
    }

    pub fn tasks(self) -> impl Iterator<Item = Task> {
        self.iter().filter_map(|i| Task::from_index(i).ok())
    }
}

impl FromIterator<usize> for TaskSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        iter.into_iter().fold(TaskSet::empty(), TaskSet::with)
    }
}

impl FromIterator<Task> for TaskSet {
    fn from_iter<I: IntoIterator<Item = Task>>(iter: I) -> Self {
        iter.into_iter().map(Task::index).collect()
    }
}
