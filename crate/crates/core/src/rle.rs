//! Run-length encoding of binary per-point masks, used by traces and the
//! session service to keep logged masks compact.

use serde::{Deserialize, Serialize};

/// Foreground runs as `[start, length]` pairs, ascending and non-overlapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskRuns(pub Vec<[u32; 2]>);

impl MaskRuns {
    pub fn encode(mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                runs.push([start as u32, (i - start) as u32]);
            } else {
                i += 1;
            }
        }
        MaskRuns(runs)
    }

    /// Expands to a mask of length `n`; `None` if a run exceeds `n`.
    pub fn decode(&self, n: usize) -> Option<Vec<bool>> {
        let mut mask = vec![false; n];
        for &[start, len] in &self.0 {
            let (start, len) = (start as usize, len as usize);
            let end = start.checked_add(len)?;
            if end > n {
                return None;
            }
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
        Some(mask)
    }

    pub fn count(&self) -> usize {
        self.0.iter().map(|r| r[1] as usize).sum()
    }

    /// Number of points set in both masks.
    pub fn intersection_count(&self, other: &MaskRuns) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut total) = (0, 0, 0usize);
        while i < a.len() && j < b.len() {
            let (a0, a1) = (a[i][0] as u64, a[i][0] as u64 + a[i][1] as u64);
            let (b0, b1) = (b[j][0] as u64, b[j][0] as u64 + b[j][1] as u64);
            total += a1.min(b1).saturating_sub(a0.max(b0)) as usize;
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    /// Intersection over union; 1 when both masks are empty.
    pub fn iou(&self, other: &MaskRuns) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}
