//! MI-ranked partition of the features into groups, and the two-stage
//! (group, member) action codec with observed-feature masking.

use crate::data_env::ObservationMask;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupingError {
    #[error("group count {k} must be in 1..={d}")]
    GroupCount { k: usize, d: usize },
    #[error("action ({group}, {member}) outside grouping of shape {groups}x{size}")]
    OutOfShape { group: usize, member: usize, groups: usize, size: usize },
    #[error("every feature is already observed")]
    NothingLeft,
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("shape: {0}")]
    Shape(String),
    #[error("malformed grouping artifact at line {line}: {reason}")]
    Artifact { line: usize, reason: String },
}

/// Disjoint groups covering `0..d`; group 0 holds the top-N features by MI.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrouping {
    groups: Vec<Vec<usize>>,
    size: usize,
    scores: Vec<f64>,
    /// feature -> (group, member)
    position: Vec<(usize, usize)>,
}

/// `ceil(sqrt(d))`.
pub fn default_group_count(d: usize) -> usize {
    let mut k = (d as f64).sqrt().floor() as usize;
    while k * k < d {
        k += 1;
    }
    k.max(1)
}

impl ActionGrouping {
    /// Sort by MI descending (ties by ascending index) and chunk into groups of
    /// `ceil(d / k)`. When `k` does not divide evenly the number of non-empty
    /// chunks, `ceil(d / N)`, can be smaller than `k`.
    pub fn build(scores: &[f64], k: usize) -> Result<Self, GroupingError> {
        let d = scores.len();
        if k == 0 || k > d {
            return Err(GroupingError::GroupCount { k, d });
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let size = d.div_ceil(k);
        let groups: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
        Self::from_groups(groups, scores.to_vec())
    }

    /// Explicit groups; must partition `0..d`.
    pub fn from_groups(groups: Vec<Vec<usize>>, scores: Vec<f64>) -> Result<Self, GroupingError> {
        let d: usize = groups.iter().map(|g| g.len()).sum();
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(GroupingError::Shape("groups must be non-empty".into()));
        }
        if scores.len() != d {
            return Err(GroupingError::Shape(format!("{} scores for {d} features", scores.len())));
        }
        let size = groups.iter().map(|g| g.len()).max().unwrap_or(0);
        let mut position = vec![(usize::MAX, 0); d];
        for (k, g) in groups.iter().enumerate() {
            for (n, &f) in g.iter().enumerate() {
                if f >= d || position[f].0 != usize::MAX {
                    return Err(GroupingError::Shape(format!("feature {f} repeated or out of range")));
                }
                position[f] = (k, n);
            }
        }
        Ok(ActionGrouping { groups, size, scores, position })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Largest group size `N`.
    pub fn group_size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn decode(&self, group: usize, member: usize) -> Result<usize, GroupingError> {
        self.groups.get(group).and_then(|g| g.get(member)).copied().ok_or(GroupingError::OutOfShape {
            group,
            member,
            groups: self.num_groups(),
            size: self.size,
        })
    }

    pub fn encode(&self, feature: usize) -> Result<(usize, usize), GroupingError> {
        self.position
            .get(feature)
            .copied()
            .ok_or_else(|| GroupingError::Shape(format!("feature {feature} outside 0..{}", self.dim())))
    }

    /// Group-level probabilities masked and renormalized: groups with no
    /// unobserved member get 0.
    pub fn mask_group_probs(&self, probs: &[f64], mask: &ObservationMask) -> Result<Vec<f64>, GroupingError> {
        if probs.len() != self.num_groups() || mask.dim() != self.dim() {
            return Err(GroupingError::Shape("group probabilities or mask do not match the grouping".into()));
        }
        check_sum(probs)?;
        let open: Vec<bool> = self.groups.iter().map(|g| g.iter().any(|&f| !mask.is_observed(f))).collect();
        renormalize(probs, &open)
    }

    /// Member probabilities of `group` (length = that group's size) masked and renormalized.
    pub fn mask_member_probs(
        &self,
        group: usize,
        probs: &[f64],
        mask: &ObservationMask,
    ) -> Result<Vec<f64>, GroupingError> {
        let g = self
            .groups
            .get(group)
            .ok_or(GroupingError::OutOfShape { group, member: 0, groups: self.num_groups(), size: self.size })?;
        if probs.len() != g.len() || mask.dim() != self.dim() {
            return Err(GroupingError::Shape("member probabilities or mask do not match the group".into()));
        }
        check_sum(probs)?;
        let open: Vec<bool> = g.iter().map(|&f| !mask.is_observed(f)).collect();
        renormalize(probs, &open)
    }

    /// Per-group availability flags `(groups, members)` for building logit masks.
    pub fn availability(&self, mask: &ObservationMask) -> (Vec<bool>, Vec<Vec<bool>>) {
        let members: Vec<Vec<bool>> =
            self.groups.iter().map(|g| g.iter().map(|&f| !mask.is_observed(f)).collect()).collect();
        let groups = members.iter().map(|m| m.iter().any(|&b| b)).collect();
        (groups, members)
    }

    /// One line per feature: `feature mi group`.
    pub fn to_artifact(&self) -> String {
        let mut s = String::from("# feature mi group\n");
        for (k, g) in self.groups.iter().enumerate() {
            for &f in g {
                let _ = writeln!(s, "{f} {} {k}", self.scores[f]);
            }
        }
        s
    }

    pub fn from_artifact(text: &str) -> Result<Self, GroupingError> {
        let mut entries: Vec<(usize, f64, usize)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| GroupingError::Artifact { line: i + 1, reason: reason.to_string() };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad("expected `feature mi group`"));
            }
            let f = parts[0].parse().map_err(|_| bad("feature index"))?;
            let mi = parts[1].parse().map_err(|_| bad("mi score"))?;
            let k = parts[2].parse().map_err(|_| bad("group id"))?;
            entries.push((f, mi, k));
        }
        let d = entries.len();
        let groups_n = entries.iter().map(|e| e.2 + 1).max().unwrap_or(0);
        let mut groups = vec![Vec::new(); groups_n];
        let mut scores = vec![f64::NAN; d];
        for &(f, mi, k) in &entries {
            if f >= d {
                return Err(GroupingError::Shape(format!("feature {f} outside 0..{d}")));
            }
            groups[k].push(f);
            scores[f] = mi;
        }
        Self::from_groups(groups, scores)
    }
}

fn check_sum(p: &[f64]) -> Result<(), GroupingError> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|&q| q < 0.0 || !q.is_finite()) {
        return Err(GroupingError::NotNormalized(s));
    }
    Ok(())
}

fn renormalize(p: &[f64], open: &[bool]) -> Result<Vec<f64>, GroupingError> {
    if !open.iter().any(|&b| b) {
        return Err(GroupingError::NothingLeft);
    }
    let z: f64 = p.iter().zip(open).filter(|(_, &o)| o).map(|(q, _)| q).sum();
    if z <= 0.0 {
        // all remaining mass was on closed entries: spread uniformly over open ones
        let n = open.iter().filter(|&&b| b).count() as f64;
        return Ok(open.iter().map(|&o| if o { 1.0 / n } else { 0.0 }).collect());
    }
    Ok(p.iter().zip(open).map(|(&q, &o)| if o { q / z } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_features_three_groups() {
        let g = ActionGrouping::build(&[0.1, 0.6, 0.3, 0.5, 0.0, 0.2], 3).unwrap();
        assert_eq!(g.groups(), &[vec![1, 3], vec![2, 5], vec![0, 4]]);
        assert_eq!(g.group_size(), 2);
        assert_eq!(g.decode(0, 0).unwrap(), 1);
    }

    #[test]
    fn ragged_tail() {
        let g = ActionGrouping::build(&[0.0; 5], 2).unwrap();
        assert_eq!(g.groups(), &[vec![0, 1, 2], vec![3, 4]]);
        let g = ActionGrouping::build(&[0.0; 6], 3).unwrap();
        assert_eq!(g.groups(), &[vec![0, 1], vec![2, 3], vec![4, 5]]);
        // d = 9, K = 4 gives N = 3 and only three groups
        let g = ActionGrouping::build(&[0.0; 9], 4).unwrap();
        assert_eq!(g.num_groups(), 3);
        assert!(matches!(ActionGrouping::build(&[0.0; 3], 4), Err(GroupingError::GroupCount { .. })));
        assert!(matches!(ActionGrouping::build(&[0.0; 3], 0), Err(GroupingError::GroupCount { .. })));
    }

    #[test]
    fn decode_table_lookup() {
        let g = ActionGrouping::from_groups(vec![vec![3, 5], vec![0, 2], vec![1, 4]], vec![0.0; 6]).unwrap();
        assert_eq!(g.decode(1, 0).unwrap(), 0);
        assert!(matches!(g.decode(3, 0), Err(GroupingError::OutOfShape { .. })));
        assert!(matches!(g.decode(0, 2), Err(GroupingError::OutOfShape { .. })));
        for f in 0..6 {
            let (k, n) = g.encode(f).unwrap();
            assert_eq!(g.decode(k, n).unwrap(), f);
        }
    }

    #[test]
    fn masking_examples() {
        let g = ActionGrouping::from_groups(vec![vec![0, 1, 2], vec![3, 4, 5]], vec![0.0; 6]).unwrap();
        let m = ObservationMask::from_indices(6, &[0]).unwrap();
        let p = g.mask_member_probs(0, &[0.5, 0.3, 0.2], &m).unwrap();
        assert!((p[0]).abs() < 1e-15 && (p[1] - 0.6).abs() < 1e-12 && (p[2] - 0.4).abs() < 1e-12);
        let m = ObservationMask::from_indices(6, &[3, 4, 5]).unwrap();
        let p = g.mask_group_probs(&[0.3, 0.7], &m).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        let none = ObservationMask::empty(6);
        assert_eq!(g.mask_group_probs(&[0.3, 0.7], &none).unwrap(), vec![0.3, 0.7]);
        assert_eq!(g.mask_member_probs(1, &[0.5, 0.3, 0.2], &none).unwrap(), vec![0.5, 0.3, 0.2]);
        assert_eq!(g.mask_group_probs(&[0.3, 0.7], &ObservationMask::full(6)), Err(GroupingError::NothingLeft));
        assert!(matches!(g.mask_group_probs(&[0.3, 0.3], &none), Err(GroupingError::NotNormalized(_))));
    }

    #[test]
    fn artifact_round_trip() {
        let g = ActionGrouping::build(&[0.1, 0.6, 0.3, 0.5, 0.0, 0.2, 0.25], 3).unwrap();
        let back = ActionGrouping::from_artifact(&g.to_artifact()).unwrap();
        assert_eq!(back, g);
        assert!(matches!(ActionGrouping::from_artifact("0 x 1\n"), Err(GroupingError::Artifact { line: 1, .. })));
    }

    #[test]
    fn default_count() {
        assert_eq!(default_group_count(16), 4);
        assert_eq!(default_group_count(17), 5);
        assert_eq!(default_group_count(1), 1);
        assert_eq!(default_group_count(6), 3);
    }
}
