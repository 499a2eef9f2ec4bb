//! Temporal clustering of a frame sequence from adjacent-frame Hamming
//! distances: cumulative, slope, and content-blind uniform grouping.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::signature::{hamming, Signature};
use crate::{Error, Result};

/// Cumulative Hamming profile along a video. `cumulative[0] = 0` and
/// `cumulative[i]` is the sum of the first `i` adjacent distances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CumulativeProfile {
    cumulative: Vec<u64>,
    adjacent: Vec<u64>,
}

impl CumulativeProfile {
    /// Builds a profile directly from an adjacent-distance sequence.
    pub fn from_adjacent(adjacent: Vec<u64>) -> Self {
        let mut cumulative = Vec::with_capacity(adjacent.len() + 1);
        let mut acc = 0u64;
        cumulative.push(0);
        for d in &adjacent {
            acc += d;
            cumulative.push(acc);
        }
        CumulativeProfile {
            cumulative,
            adjacent,
        }
    }

    pub fn frames(&self) -> usize {
        self.cumulative.len()
    }

    pub fn cumulative(&self) -> &[u64] {
        &self.cumulative
    }

    pub fn adjacent(&self) -> &[u64] {
        &self.adjacent
    }

    pub fn total(&self) -> u64 {
        *self.cumulative.last().unwrap()
    }
}

/// Compares only the N-1 neighboring pairs, never all pairs.
pub fn cumulative_profile(signatures: &[Signature]) -> Result<CumulativeProfile> {
    if signatures.is_empty() {
        return Err(Error::EmptyInput("cumulative profile needs >= 1 signature"));
    }
    let mut adjacent = Vec::with_capacity(signatures.len() - 1);
    for pair in signatures.windows(2) {
        adjacent.push(hamming(&pair[0], &pair[1])?);
    }
    Ok(CumulativeProfile::from_adjacent(adjacent))
}

/// Per-frame cluster ids, temporally contiguous, 1-based, at most `g` ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    ids: Vec<usize>,
    requested: usize,
    boundaries: Vec<usize>,
}

impl ClusterAssignment {
    fn from_ids(ids: Vec<usize>, requested: usize) -> Self {
        let boundaries = ids
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] != w[0])
            .map(|(i, _)| i + 1)
            .collect();
        ClusterAssignment {
            ids,
            requested,
            boundaries,
        }
    }

    /// 1-based cluster id per frame, non-decreasing along time.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// The requested cluster count g.
    pub fn requested(&self) -> usize {
        self.requested
    }

    /// Frame indices at which the cluster id increments.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn frames(&self) -> usize {
        self.ids.len()
    }

    /// Number of distinct clusters actually produced.
    pub fn cluster_count(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Frame ranges of each produced cluster, in temporal order.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.cluster_count());
        let mut start = 0;
        for &b in &self.boundaries {
            out.push(start..b);
            start = b;
        }
        out.push(start..self.ids.len());
        out
    }
}

/// Cluster id i = ceil(g * C_i / C_N), clamped to 1 at C_i = 0 so frame 1
/// always lands in cluster 1. All frames share cluster 1 when C_N = 0.
pub fn cumulative_cluster(profile: &CumulativeProfile, g: usize) -> Result<ClusterAssignment> {
    if g < 1 {
        return Err(Error::InvalidConfig("cluster count g must be >= 1".into()));
    }
    let total = profile.total();
    let ids = if total == 0 {
        vec![1; profile.frames()]
    } else {
        profile
            .cumulative()
            .iter()
            .map(|&c| {
                let id = ((g as u128 * c as u128).div_ceil(total as u128)) as usize;
                id.max(1)
            })
            .collect()
    };
    Ok(ClusterAssignment::from_ids(ids, g))
}

/// Places boundaries after the frames with the g-1 largest adjacent
/// distances; ties resolve toward the earlier frame index. Zero distances
/// never become boundaries, so fewer than g clusters may come out.
pub fn slope_cluster(profile: &CumulativeProfile, g: usize) -> Result<ClusterAssignment> {
    if g < 1 {
        return Err(Error::InvalidConfig("cluster count g must be >= 1".into()));
    }
    let adjacent = profile.adjacent();
    let mut order: Vec<usize> = (0..adjacent.len()).collect();
    order.sort_by(|&a, &b| adjacent[b].cmp(&adjacent[a]).then(a.cmp(&b)));

    let mut cuts: Vec<usize> = order
        .into_iter()
        .filter(|&i| adjacent[i] > 0)
        .take(g - 1)
        .map(|i| i + 1)
        .collect();
    cuts.sort_unstable();

    let mut ids = vec![0usize; profile.frames()];
    let mut id = 1;
    let mut next_cut = 0;
    for (frame, slot) in ids.iter_mut().enumerate() {
        if next_cut < cuts.len() && frame == cuts[next_cut] {
            id += 1;
            next_cut += 1;
        }
        *slot = id;
    }
    Ok(ClusterAssignment::from_ids(ids, g))
}

/// Contiguous segments whose sizes differ by at most one; earlier segments
/// take the extra frame. Ignores content entirely.
pub fn uniform_cluster(n_frames: usize, g: usize) -> Result<ClusterAssignment> {
    if g < 1 {
        return Err(Error::InvalidConfig("cluster count g must be >= 1".into()));
    }
    if n_frames < 1 {
        return Err(Error::EmptyInput("uniform clustering needs >= 1 frame"));
    }
    let segments = g.min(n_frames);
    let base = n_frames / segments;
    let extra = n_frames % segments;
    let mut ids = Vec::with_capacity(n_frames);
    for seg in 0..segments {
        let size = base + usize::from(seg < extra);
        ids.extend(std::iter::repeat_n(seg + 1, size));
    }
    Ok(ClusterAssignment::from_ids(ids, g))
}

/// One CSV row per frame: epoch, video_id, frame_index, cluster_id.
pub fn write_assignment_csv<W: Write>(
    out: &mut W,
    rows: &[(usize, usize, &ClusterAssignment)],
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(out, "epoch,video_id,frame_index,cluster_id")?;
    }
    for (epoch, video_id, assignment) in rows {
        for (frame, id) in assignment.ids().iter().enumerate() {
            writeln!(out, "{epoch},{video_id},{frame},{id}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn profile_hand_summation() {
        let p = CumulativeProfile::from_adjacent(vec![1, 1, 1, 6, 1, 1, 6, 1, 1]);
        assert_eq!(p.cumulative(), &[0, 1, 2, 3, 9, 10, 11, 17, 18, 19]);
        assert_eq!(p.total(), 19);
    }

    #[test]
    fn profile_identical_frames_all_zero() {
        let s = Signature::from_bits([true, false]).unwrap();
        let p = cumulative_profile(&[s.clone(), s.clone(), s]).unwrap();
        assert_eq!(p.cumulative(), &[0, 0, 0]);
    }

    #[test]
    fn profile_single_frame() {
        let s = Signature::from_bits([true]).unwrap();
        let p = cumulative_profile(&[s]).unwrap();
        assert_eq!(p.cumulative(), &[0]);
        assert!(p.adjacent().is_empty());
    }

    #[test]
    fn profile_rejects_empty() {
        assert!(matches!(cumulative_profile(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn cumulative_reproduces_reference_grouping() {
        let p = CumulativeProfile::from_adjacent(vec![1, 1, 1, 6, 1, 1, 6, 1, 1]);
        let a = cumulative_cluster(&p, 3).unwrap();
        assert_eq!(a.ids(), &[1, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert_eq!(a.ranges(), vec![0..4, 4..7, 7..10]);
    }

    #[test]
    fn cumulative_g1_collapses_everything() {
        let p = CumulativeProfile::from_adjacent(vec![4, 9, 2]);
        let a = cumulative_cluster(&p, 1).unwrap();
        assert_eq!(a.ids(), &[1, 1, 1, 1]);
    }

    #[test]
    fn cumulative_rejects_zero_g() {
        let p = CumulativeProfile::from_adjacent(vec![1]);
        assert!(cumulative_cluster(&p, 0).is_err());
    }

    #[test]
    fn slope_reproduces_reference_grouping() {
        let p = CumulativeProfile::from_adjacent(vec![1, 1, 1, 1, 1, 7, 2, 1, 1]);
        let a = slope_cluster(&p, 3).unwrap();
        assert_eq!(a.ids(), &[1, 1, 1, 1, 1, 1, 2, 3, 3, 3]);
        assert_eq!(a.ranges(), vec![0..6, 6..7, 7..10]);
    }

    #[test]
    fn slope_tie_break_prefers_earlier_frames() {
        let p = CumulativeProfile::from_adjacent(vec![5, 5, 5, 5]);
        let a = slope_cluster(&p, 3).unwrap();
        assert_eq!(a.boundaries(), &[1, 2]);
    }

    #[test]
    fn slope_all_zero_distances_single_cluster() {
        let p = CumulativeProfile::from_adjacent(vec![0, 0, 0]);
        let a = slope_cluster(&p, 3).unwrap();
        assert_eq!(a.cluster_count(), 1);
        assert!(a.ids().iter().all(|&i| i == 1));
    }

    #[test]
    fn uniform_split_sizes() {
        let a = uniform_cluster(10, 3).unwrap();
        let sizes: Vec<usize> = a.ranges().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);

        let b = uniform_cluster(8, 8).unwrap();
        assert_eq!(b.cluster_count(), 8);
        assert!(b.ranges().iter().all(|r| r.len() == 1));

        let c = uniform_cluster(32, 16).unwrap();
        assert!(c.ranges().iter().all(|r| r.len() == 2));
    }

    fn random_profile<R: Rng>(rng: &mut R) -> CumulativeProfile {
        let n = rng.random_range(1..64);
        let adjacent: Vec<u64> = (0..n.max(1) - 1).map(|_| rng.random_range(0..40)).collect();
        CumulativeProfile::from_adjacent(adjacent)
    }

    #[test]
    fn assignments_satisfy_contiguity_invariants() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..1000 {
            let p = random_profile(&mut rng);
            let g = rng.random_range(1..=p.frames() + 2);
            for a in [
                cumulative_cluster(&p, g).unwrap(),
                slope_cluster(&p, g).unwrap(),
                uniform_cluster(p.frames(), g).unwrap(),
            ] {
                assert_eq!(a.ids()[0], 1, "first frame must be in cluster 1");
                assert!(a.ids().windows(2).all(|w| w[1] >= w[0]));
                assert!(*a.ids().iter().max().unwrap() <= g);
                assert_eq!(a.frames(), p.frames());
            }
        }
    }

    #[test]
    fn cumulative_ids_sit_in_their_band() {
        // For frame i in cluster k >= 2: (k-1)*C_N < g*C_i <= k*C_N, exactly
        // in integers.
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..1000 {
            let p = random_profile(&mut rng);
            if p.total() == 0 {
                continue;
            }
            let g = rng.random_range(1..=p.frames() + 2);
            let a = cumulative_cluster(&p, g).unwrap();
            for (i, (&id, &c)) in a.ids().iter().zip(p.cumulative().iter()).enumerate() {
                if i == 0 {
                    assert_eq!(id, 1);
                    continue;
                }
                if id >= 2 {
                    let lhs = g as u128 * c as u128;
                    assert!(
                        lhs > (id as u128 - 1) * p.total() as u128,
                        "frame {i}: C_i too small for cluster {id}"
                    );
                    assert!(
                        lhs <= id as u128 * p.total() as u128,
                        "frame {i}: C_i too large for cluster {id}"
                    );
                }
            }
        }
    }

    #[test]
    fn slope_boundaries_dominate_non_boundaries() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..1000 {
            let p = random_profile(&mut rng);
            let g = rng.random_range(1..=p.frames() + 2);
            let a = slope_cluster(&p, g).unwrap();
            let cut_positions: Vec<usize> = a.boundaries().iter().map(|&b| b - 1).collect();
            let min_cut = cut_positions
                .iter()
                .map(|&i| p.adjacent()[i])
                .min()
                .unwrap_or(u64::MAX);
            let max_rest = p
                .adjacent()
                .iter()
                .enumerate()
                .filter(|(i, _)| !cut_positions.contains(i))
                .map(|(_, &d)| d)
                .max()
                .unwrap_or(0);
            // only binding when the requested number of cuts was available
            if cut_positions.len() == g - 1 {
                assert!(
                    min_cut >= max_rest,
                    "chosen boundary {min_cut} < skipped distance {max_rest}"
                );
            }
        }
    }

    #[test]
    fn assignments_depend_only_on_distance_sequence() {
        // Two different signature sets with identical adjacent distances
        // produce identical assignments.
        let set_a = [
            Signature::from_bits([false, false, false, false]).unwrap(),
            Signature::from_bits([true, false, false, false]).unwrap(),
            Signature::from_bits([true, true, true, false]).unwrap(),
        ];
        let set_b = [
            Signature::from_bits([true, true, true, true]).unwrap(),
            Signature::from_bits([true, true, true, false]).unwrap(),
            Signature::from_bits([true, false, true, true]).unwrap(),
        ];
        let pa = cumulative_profile(&set_a).unwrap();
        let pb = cumulative_profile(&set_b).unwrap();
        assert_eq!(pa.adjacent(), pb.adjacent());
        for g in 1..=3 {
            assert_eq!(
                cumulative_cluster(&pa, g).unwrap(),
                cumulative_cluster(&pb, g).unwrap()
            );
            assert_eq!(
                slope_cluster(&pa, g).unwrap(),
                slope_cluster(&pb, g).unwrap()
            );
        }
    }

    #[test]
    fn csv_export_shape() {
        let a = uniform_cluster(4, 2).unwrap();
        let mut buf = Vec::new();
        write_assignment_csv(&mut buf, &[(0, 7, &a)], true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,video_id,frame_index,cluster_id");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "0,7,0,1");
        assert_eq!(lines[4], "0,7,3,2");
    }
}
