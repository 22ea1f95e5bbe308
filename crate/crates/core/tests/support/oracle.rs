//! Brute-force reference for identical-job allocation.
//!
//! Every map from job to resource is enumerated. A resource with `k` nodes
//! and job length `t` finishes `c` jobs at `ceil(c / k) * t` and charges
//! `c * price * t`.

#[derive(Clone, Debug)]
pub struct Site {
    pub nodes: u32,
    pub job_seconds: u64,
    pub price: u64,
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub sites: Vec<Site>,
    pub jobs: usize,
    pub deadline: u64,
    pub budget: u64,
}

/// (makespan, cost) of every assignment.
pub fn outcomes(inst: &Instance) -> Vec<(u64, u64)> {
    let r = inst.sites.len();
    let total = r.pow(inst.jobs as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut counts = vec![0u64; r];
        let mut c = code;
        for _ in 0..inst.jobs {
            counts[c % r] += 1;
            c /= r;
        }
        let mut makespan = 0;
        let mut cost = 0;
        for (s, n) in inst.sites.iter().zip(&counts) {
            if *n == 0 {
                continue;
            }
            makespan = makespan.max(n.div_ceil(s.nodes as u64) * s.job_seconds);
            cost += n * s.price * s.job_seconds;
        }
        out.push((makespan, cost));
    }
    out
}

/// Cheapest assignment meeting the deadline.
pub fn min_cost(inst: &Instance) -> Option<u64> {
    outcomes(inst)
        .into_iter()
        .filter(|(m, _)| *m <= inst.deadline)
        .map(|(_, c)| c)
        .min()
}

/// Shortest makespan within the budget.
pub fn min_makespan(inst: &Instance) -> Option<u64> {
    outcomes(inst)
        .into_iter()
        .filter(|(_, c)| *c <= inst.budget)
        .map(|(m, _)| m)
        .min()
}
