//! Runs independent scenarios across threads. Each simulation stays
//! single-threaded; only whole runs are spread out, so results do not
//! depend on scheduling. Without the `parallel` feature everything runs
//! on the calling thread.

use crate::cluster;
use crate::report::RunReport;
use crate::scenario::{Scenario, ScenarioError};

pub type Outcome = Result<RunReport, ScenarioError>;

fn run_one(s: &Scenario) -> Outcome {
    cluster::run(s, false).map(|(r, _)| r)
}

pub fn run_sequential(scenarios: &[Scenario]) -> Vec<Outcome> {
    scenarios.iter().map(run_one).collect()
}

#[cfg(feature = "parallel")]
pub fn run_parallel(scenarios: &[Scenario]) -> Vec<Outcome> {
    use rayon::prelude::*;
    scenarios.par_iter().map(run_one).collect()
}

/// Parallel when built with `parallel`, sequential otherwise.
pub fn run_all(scenarios: &[Scenario]) -> Vec<Outcome> {
    map(scenarios, run_one)
}

/// Order-preserving map over independent work items.
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_results_match_sequential() {
        let scenarios: Vec<Scenario> = (0..6)
            .map(|seed| {
                let mut s = Scenario::default();
                s.cluster.seed = seed;
                s.cluster.duration = 1500;
                s.channel.loss_prob = 0.1;
                s.channel.latency_max = 25;
                s
            })
            .collect();
        let a = run_sequential(&scenarios);
        let b = run_all(&scenarios);
        assert_eq!(a, b);
        assert_eq!(map(&[1, 2, 3], |x| x * 2), vec![2, 4, 6]);
    }
}
