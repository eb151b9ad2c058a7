use crate::postprocess::Interval;

/// Default temporal span for cell `cell` of hierarchy level `level`
/// (both zero-based). Level `i` has `L_i = K_1 / 2^i` cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub cell: usize,
    pub center: f64,
    pub length: f64,
}

impl Anchor {
    pub fn interval(&self) -> Interval {
        Interval::new(
            self.center - self.length / 2.0,
            self.center + self.length / 2.0,
        )
    }
}

/// All anchors ordered by (level, cell): `2·K_1 − 1` of them.
pub fn layout_anchors(base_segments: usize) -> Vec<Anchor> {
    assert!(base_segments.is_power_of_two());
    let depth = base_segments.trailing_zeros() as usize + 1;
    let mut anchors = Vec::with_capacity(2 * base_segments - 1);
    for level in 0..depth {
        let cells = base_segments >> level;
        let length = 1.0 / cells as f64;
        for cell in 0..cells {
            anchors.push(Anchor {
                level,
                cell,
                center: (cell as f64 + 0.5) * length,
                length,
            });
        }
    }
    anchors
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let a = layout_anchors(16);
        assert_eq!(a.len(), 31);
        assert_eq!(a[0].center, 1.0 / 32.0);
        assert_eq!(a[0].length, 1.0 / 16.0);
        let last = a.last().unwrap();
        assert_eq!(last.level, 4);
        assert_eq!((last.interval().start, last.interval().end), (0.0, 1.0));
    }

    #[test]
    fn levels_tile_unit_interval_exactly() {
        for k in [1usize, 2, 4, 8, 16, 32, 64] {
            let anchors = layout_anchors(k);
            let depth = k.trailing_zeros() as usize + 1;
            for level in 0..depth {
                let iv: Vec<Interval> = anchors
                    .iter()
                    .filter(|a| a.level == level)
                    .map(Anchor::interval)
                    .collect();
                assert_eq!(iv.first().unwrap().start, 0.0);
                assert_eq!(iv.last().unwrap().end, 1.0);
                for w in iv.windows(2) {
                    assert_eq!(w[0].end, w[1].start);
                }
            }
        }
    }
}
