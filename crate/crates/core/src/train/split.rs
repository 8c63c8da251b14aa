use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Targets;

/// Disjoint train/validation/test node sets covering every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Split {
    pub fn num_nodes(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Largest-remainder apportionment of `len` nodes, so every subset is
/// within one node of its proportional target. Equal remainders go first to
/// the subset furthest `behind` its running target over earlier groups.
fn apportion(len: usize, ratios: [f64; 3], behind: [f64; 3]) -> [usize; 3] {
    let targets = ratios.map(|r| r * len as f64);
    let mut sizes = targets.map(|t| t.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (targets[a] - targets[a].floor(), targets[b] - targets[b].floor());
        fb.total_cmp(&fa).then(behind[b].total_cmp(&behind[a])).then(a.cmp(&b))
    });
    let mut left = len - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Random split. When `stratified` and the targets are classes, each class
/// is shuffled and sliced proportionally on its own; regression targets are
/// always split without stratification.
pub fn make_split(targets: &Targets, ratios: [f64; 3], seed: u64, stratified: bool) -> Result<Split> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::Empty("no nodes to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stratified = stratified && targets.class_labels().is_some();
    let groups: Vec<Vec<usize>> = match targets {
        Targets::Classes { labels, num_classes } if stratified => {
            let mut g = vec![Vec::new(); *num_classes];
            for (i, &l) in labels.iter().enumerate() {
                g[l].push(i);
            }
            g.retain(|c| !c.is_empty());
            g
        }
        _ => vec![(0..n).collect()],
    };
    let subsets = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        ratios,
        seed,
        stratified,
    };
    let mut behind = [0.0; 3];
    for mut members in groups {
        if members.len() < subsets {
            return Err(Error::InvalidParameter(format!(
                "a class with {} nodes cannot be spread over {subsets} subsets",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let sizes = apportion(members.len(), ratios, behind);
        for i in 0..3 {
            behind[i] += ratios[i] * members.len() as f64 - sizes[i] as f64;
        }
        let [a, b, _] = sizes;
        split.train.extend_from_slice(&members[..a]);
        split.val.extend_from_slice(&members[a..a + b]);
        split.test.extend_from_slice(&members[a + b..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(labels: Vec<usize>, k: usize) -> Targets {
        Targets::Classes { labels, num_classes: k }
    }

    #[test]
    fn balanced_two_class_split() {
        let t = classes((0..100).map(|i| i % 2).collect(), 2);
        let s = make_split(&t, [0.5, 0.25, 0.25], 1, true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (50, 25, 25));
        assert_eq!(s.train.iter().filter(|&&i| i % 2 == 0).count(), 25);
        assert_eq!(s, make_split(&t, [0.5, 0.25, 0.25], 1, true).unwrap());
        assert_ne!(s, make_split(&t, [0.5, 0.25, 0.25], 2, true).unwrap());
    }

    #[test]
    fn paper_ratios_on_seven_thousand_six_hundred_nodes() {
        let t = classes((0..7600).map(|i| i % 18).collect(), 18);
        let s = make_split(&t, [0.1, 0.1, 0.8], 0, true).unwrap();
        assert!((s.train.len() as i64 - 760).abs() <= 18);
        assert!((s.val.len() as i64 - 760).abs() <= 18);
        assert_eq!(s.num_nodes(), 7600);
    }

    #[test]
    fn disjoint_cover_and_stratified_proportions() {
        let labels: Vec<usize> = (0..537).map(|i| (i * 7 % 11) % 4).collect();
        let t = classes(labels.clone(), 4);
        let s = make_split(&t, [0.1, 0.1, 0.8], 9, true).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..537).collect::<Vec<_>>());
        for c in 0..4 {
            let total = labels.iter().filter(|&&l| l == c).count() as f64;
            for (set, r) in [(&s.train, 0.1), (&s.val, 0.1), (&s.test, 0.8)] {
                let got = set.iter().filter(|&&i| labels[i] == c).count() as f64;
                assert!((got - r * total).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn errors() {
        let t = classes(vec![0, 0, 0, 1, 1], 2);
        assert!(make_split(&t, [0.5, 0.25, 0.25], 0, true).is_err());
        assert!(make_split(&t, [0.5, 0.2, 0.2], 0, false).is_err());
        let r = Targets::Regression(vec![0.0; 10]);
        let s = make_split(&r, [0.2, 0.2, 0.6], 0, true).unwrap();
        assert!(!s.stratified);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 2, 6));
    }
}
