//! Assignment of ensemble members to workers for the forecast phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleCase {
    /// At least as many members as workers: members run in rounds of
    /// `workers`, one worker each.
    One,
    /// Fewer members than workers: every member gets its own group of workers
    /// and all members run in a single round.
    Two,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerGroup {
    pub member: usize,
    pub workers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub case: ScheduleCase,
    /// Member ids per round. In case two there is exactly one round.
    pub rounds: Vec<Vec<usize>>,
    /// Worker groups, one per member; empty in case one.
    pub groups: Vec<WorkerGroup>,
    pub workers: usize,
}

/// Splits `members` over `workers`.
///
/// Case one: `ceil(Ne / workers)` rounds of consecutive member ids. Case two:
/// groups of `floor(workers / Ne)` workers, the first `workers mod Ne` groups
/// getting one extra.
pub fn schedule_rounds(members: usize, workers: usize) -> Result<RoundSchedule> {
    if members == 0 {
        return Err(Error::invalid("members", "need at least one member"));
    }
    if workers == 0 {
        return Err(Error::invalid("workers", "need at least one worker"));
    }
    if members >= workers {
        let rounds = (0..members)
            .collect::<Vec<_>>()
            .chunks(workers)
            .map(<[usize]>::to_vec)
            .collect();
        return Ok(RoundSchedule {
            case: ScheduleCase::One,
            rounds,
            groups: Vec::new(),
            workers,
        });
    }
    let base = workers / members;
    let extra = workers % members;
    let mut next = 0;
    let groups = (0..members)
        .map(|member| {
            let size = base + usize::from(member < extra);
            let ids = (next..next + size).collect();
            next += size;
            WorkerGroup {
                member,
                workers: ids,
            }
        })
        .collect();
    Ok(RoundSchedule {
        case: ScheduleCase::Two,
        rounds: vec![(0..members).collect()],
        groups,
        workers,
    })
}

impl RoundSchedule {
    pub fn members(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum()
    }

    /// Workers available to `member` inside its round.
    pub fn threads_for(&self, member: usize) -> usize {
        match self.case {
            ScheduleCase::One => 1,
            ScheduleCase::Two => self
                .groups
                .get(member)
                .map(|g| g.workers.len())
                .unwrap_or(1),
        }
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.workers.len()).collect()
    }
}
