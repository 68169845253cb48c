use std::ops::Range;

use super::{label_repeat_flags, Interaction, InteractionLog};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        }
    }
}

/// Train/validation/test partitions of one log on the global timeline.
///
/// Because the log is globally time-sorted, each partition is a contiguous
/// index range of the full log. Repeat flags are computed on the full log, so
/// a test order is a repeat whenever its store appears anywhere earlier in the
/// user's history, including in train.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    log: InteractionLog,
    repeat_flags: Vec<bool>,
    valid_boundary: i64,
    test_boundary: i64,
    valid_start: usize,
    test_start: usize,
}

impl DatasetSplit {
    pub fn log(&self) -> &InteractionLog {
        &self.log
    }

    pub fn repeat_flags(&self) -> &[bool] {
        &self.repeat_flags
    }

    pub fn is_repeat(&self, pos: usize) -> bool {
        self.repeat_flags[pos]
    }

    /// `(valid_boundary, test_boundary)` in unix seconds.
    pub fn boundaries(&self) -> (i64, i64) {
        (self.valid_boundary, self.test_boundary)
    }

    pub fn range(&self, p: Partition) -> Range<usize> {
        match p {
            Partition::Train => 0..self.valid_start,
            Partition::Valid => self.valid_start..self.test_start,
            Partition::Test => self.test_start..self.log.len(),
        }
    }

    pub fn view(&self, p: Partition) -> &[Interaction] {
        &self.log.interactions()[self.range(p)]
    }

    pub fn partition_of(&self, pos: usize) -> Partition {
        if pos < self.valid_start {
            Partition::Train
        } else if pos < self.test_start {
            Partition::Valid
        } else {
            Partition::Test
        }
    }
}

/// Split on the global timeline: the last `test_window_s` seconds form the
/// test set, the preceding `valid_window_s` the validation set, the rest train.
pub fn split_global_timeline(log: InteractionLog, test_window_s: i64, valid_window_s: i64) -> Result<DatasetSplit> {
    if test_window_s <= 0 || valid_window_s <= 0 {
        return Err(Error::invalid("split windows must be positive"));
    }
    let end = log.last_time().ok_or(Error::EmptyPartition("train"))?;
    if test_window_s >= log.span() {
        return Err(Error::invalid(format!(
            "test window {test_window_s}s is not shorter than the timeline span {}s",
            log.span()
        )));
    }
    let test_boundary = end - test_window_s;
    let valid_boundary = test_boundary - valid_window_s;
    let xs = log.interactions();
    let valid_start = xs.partition_point(|x| x.time < valid_boundary);
    let test_start = xs.partition_point(|x| x.time < test_boundary);
    if valid_start == 0 {
        return Err(Error::EmptyPartition("train"));
    }
    if test_start == valid_start {
        return Err(Error::EmptyPartition("valid"));
    }
    if test_start == xs.len() {
        return Err(Error::EmptyPartition("test"));
    }
    let repeat_flags = label_repeat_flags(&log);
    Ok(DatasetSplit {
        log,
        repeat_flags,
        valid_boundary,
        test_boundary,
        valid_start,
        test_start,
    })
}
