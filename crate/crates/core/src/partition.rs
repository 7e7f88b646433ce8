//! Assignment of training samples to clients.
//!
//! Regimes:
//! - `iid`: every class is spread evenly over all clients.
//! - `extreme_non_iid`: classes are dealt round-robin, so client class sets are disjoint.
//! - `overlap(ρ)`: `round(ρ·k)` classes are each split 50/50 between two random
//!   clients; every other class lives on exactly one client.
//! - `random_classes(q)`: each client holds a window of `q` classes from a
//!   shuffled class order (the client-count sweep).
//!
//! A shot budget is a global per-class total, divided as evenly as integer
//! division allows between the clients that hold the class.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    Iid,
    ExtremeNonIid,
    Overlap {
        ratio: f64,
    },
    RandomClasses {
        /// Classes per client; defaults to `max(1, k / n)`.
        #[serde(default)]
        classes_per_client: Option<usize>,
    },
}

impl Regime {
    pub fn label(&self) -> String {
        match self {
            Regime::Iid => "iid".into(),
            Regime::ExtremeNonIid => "extreme_noniid".into(),
            Regime::Overlap { ratio } => format!("overlap{ratio}"),
            Regime::RandomClasses { classes_per_client: Some(q) } => format!("random{q}"),
            Regime::RandomClasses { classes_per_client: None } => "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub regime: Regime,
    pub n_clients: usize,
    pub classes: usize,
    pub shots_per_class: Option<usize>,
    pub seed: u64,
    /// Classes designated as shared (overlap regime only), ascending.
    pub shared_classes: Vec<usize>,
    /// Sample indices per client, each list ascending.
    pub assignment: Vec<Vec<usize>>,
}

impl PartitionSpec {
    /// Which clients hold at least one sample of each class.
    pub fn class_clients(&self, labels: &[u32]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (client, idx) in self.assignment.iter().enumerate() {
            for &i in idx {
                let c = labels[i] as usize;
                if out[c].last() != Some(&client) {
                    out[c].push(client);
                }
            }
        }
        out
    }

    pub fn total_assigned(&self) -> usize {
        self.assignment.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Splits samples into client shards according to `regime`.
pub fn partition(
    labels: &[u32],
    k: usize,
    regime: Regime,
    n_clients: usize,
    shots: Option<usize>,
    seed: u64,
) -> Result<PartitionSpec> {
    if n_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if k == 0 {
        return Err(Error::config("need at least one class"));
    }
    if shots == Some(0) {
        return Err(Error::config("shots must be positive"));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Data(format!("label {l} out of {k} classes")));
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        pools[l as usize].push(i);
    }
    for (class, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut stream(seed, &[tag("pool"), class as u64]));
        if let Some(s) = shots {
            if pool.len() < s {
                return Err(Error::Data(format!(
                    "class {class} has {} samples, fewer than the {s} shots requested",
                    pool.len()
                )));
            }
            pool.truncate(s);
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut stream(seed, &[tag("class-order")]));

    let mut assignment = vec![Vec::new(); n_clients];
    let mut shared_classes = Vec::new();
    match regime {
        Regime::Iid => {
            let mut next = 0usize;
            for pool in &pools {
                for &i in pool {
                    assignment[next % n_clients].push(i);
                    next += 1;
                }
            }
        }
        Regime::ExtremeNonIid => {
            if k < n_clients {
                return Err(Error::config(format!(
                    "extreme non-IID needs at least as many classes ({k}) as clients ({n_clients})"
                )));
            }
            for (j, &class) in order.iter().enumerate() {
                assignment[j % n_clients].extend_from_slice(&pools[class]);
            }
        }
        Regime::Overlap { ratio } => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::config(format!("overlap ratio must lie in [0, 1], got {ratio}")));
            }
            let shared = (ratio * k as f64).round() as usize;
            if shared > 0 && n_clients < 2 {
                return Err(Error::config("shared classes need at least two clients"));
            }
            let mut rng = stream(seed, &[tag("shared-holders")]);
            for &class in &order[..shared] {
                let pool = &pools[class];
                if pool.len() < 2 {
                    return Err(Error::Data(format!(
                        "shared class {class} needs at least 2 samples to span two clients, has {}",
                        pool.len()
                    )));
                }
                let a = rng.random_range(0..n_clients);
                let mut b = rng.random_range(0..n_clients - 1);
                if b >= a {
                    b += 1;
                }
                let (first, second) = (a.min(b), a.max(b));
                let half = pool.len().div_ceil(2);
                assignment[first].extend_from_slice(&pool[..half]);
                assignment[second].extend_from_slice(&pool[half..]);
                shared_classes.push(class);
            }
            for (j, &class) in order[shared..].iter().enumerate() {
                assignment[j % n_clients].extend_from_slice(&pools[class]);
            }
            shared_classes.sort_unstable();
        }
        Regime::RandomClasses { classes_per_client } => {
            let q = classes_per_client.unwrap_or((k / n_clients).max(1));
            if q == 0 || q > k {
                return Err(Error::config(format!("classes per client must lie in 1..={k}, got {q}")));
            }
            let mut holders = vec![Vec::new(); k];
            for client in 0..n_clients {
                for j in 0..q {
                    holders[order[(client * q + j) % k]].push(client);
                }
            }
            for (class, hs) in holders.iter_mut().enumerate() {
                hs.sort_unstable();
                hs.dedup();
                split_evenly(&pools[class], hs, &mut assignment);
            }
        }
    }
    for a in &mut assignment {
        a.sort_unstable();
    }
    Ok(PartitionSpec { regime, n_clients, classes: k, shots_per_class: shots, seed, shared_classes, assignment })
}

/// Deals `pool` over `holders` in contiguous chunks; earlier holders take the remainder.
fn split_evenly(pool: &[usize], holders: &[usize], assignment: &mut [Vec<usize>]) {
    if holders.is_empty() {
        return;
    }
    let base = pool.len() / holders.len();
    let extra = pool.len() % holders.len();
    let mut start = 0;
    for (h, &client) in holders.iter().enumerate() {
        let n = base + usize::from(h < extra);
        assignment[client].extend_from_slice(&pool[start..start + n]);
        start += n;
    }
}

/// Balanced labels, `samples_per_class` of each class, in a seeded shuffled order.
pub fn synthesize_labels(k: usize, samples_per_class: usize, seed: u64) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..k as u32).flat_map(|c| std::iter::repeat_n(c, samples_per_class)).collect();
    labels.shuffle(&mut stream(seed, &[tag("labels")]));
    labels
}

/// Per-class split into `(train, test)` index lists, both ascending.
/// Each class sends `round(test_fraction · count)` samples to the test side.
pub fn stratified_split(labels: &[u32], k: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config(format!("test fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        let class = l as usize;
        if class >= k {
            return Err(Error::Data(format!("label {l} out of {k} classes")));
        }
        pools[class].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut stream(seed, &[tag("split"), class as u64]));
        let n_test = (test_fraction * pool.len() as f64).round() as usize;
        test.extend_from_slice(&pool[..n_test]);
        train.extend_from_slice(&pool[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(k: usize, per: usize) -> Vec<u32> {
        synthesize_labels(k, per, 3)
    }

    #[test]
    fn synthesize_labels_is_balanced_and_seeded() {
        let mut l = synthesize_labels(2, 3, 9);
        assert_eq!(l, synthesize_labels(2, 3, 9));
        l.sort_unstable();
        assert_eq!(l, vec![0, 0, 0, 1, 1, 1]);
        let l = synthesize_labels(5, 7, 1);
        for c in 0..5 {
            assert_eq!(l.iter().filter(|&&x| x == c).count(), 7);
        }
    }

    #[test]
    fn extreme_non_iid_two_clients() {
        let labels = balanced(10, 4);
        let spec = partition(&labels, 10, Regime::ExtremeNonIid, 2, None, 1).unwrap();
        let holders = spec.class_clients(&labels);
        assert!(holders.iter().all(|h| h.len() == 1));
        let on_first = holders.iter().filter(|h| h[0] == 0).count();
        assert_eq!(on_first, 5);
    }

    #[test]
    fn overlap_half_two_clients() {
        let labels = balanced(10, 4);
        let spec = partition(&labels, 10, Regime::Overlap { ratio: 0.5 }, 2, None, 5).unwrap();
        let holders = spec.class_clients(&labels);
        assert_eq!(holders.iter().filter(|h| h.len() == 2).count(), 5);
        assert_eq!(holders.iter().filter(|h| h.len() == 1).count(), 5);
        assert_eq!(spec.shared_classes.len(), 5);
    }

    #[test]
    fn iid_shots_counting() {
        let labels = balanced(10, 30);
        let spec = partition(&labels, 10, Regime::Iid, 8, Some(16), 2).unwrap();
        assert_eq!(spec.total_assigned(), 160);
        for c in 0..10u32 {
            let counts: Vec<usize> =
                spec.assignment.iter().map(|a| a.iter().filter(|&&i| labels[i] == c).count()).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "class {c}: {counts:?}");
        }
    }

    #[test]
    fn errors() {
        let labels = balanced(3, 2);
        let err = partition(&labels, 3, Regime::Iid, 2, Some(5), 0).unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
        assert!(matches!(partition(&labels, 3, Regime::ExtremeNonIid, 4, None, 0), Err(Error::Config(_))));
        assert!(partition(&labels, 3, Regime::Overlap { ratio: 1.5 }, 2, None, 0).is_err());
        assert!(partition(&labels, 3, Regime::Overlap { ratio: 0.5 }, 1, None, 0).is_err());
    }

    #[test]
    fn random_classes_default_window() {
        let labels = balanced(12, 4);
        let spec = partition(&labels, 12, Regime::RandomClasses { classes_per_client: None }, 4, None, 8).unwrap();
        for a in &spec.assignment {
            let mut classes: Vec<u32> = a.iter().map(|&i| labels[i]).collect();
            classes.dedup();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 3);
        }
        assert_eq!(spec.total_assigned(), 48);
    }

    #[test]
    fn stratified_split_is_disjoint() {
        let labels = balanced(4, 10);
        let (train, test) = stratified_split(&labels, 4, 0.3, 1).unwrap();
        assert_eq!(train.len() + test.len(), 40);
        assert_eq!(test.len(), 12);
        assert!(train.iter().all(|i| !test.contains(i)));
    }
}
