//! Border following on binary masks (topological structural analysis).
//!
//! Extracts every outer border and hole border of the 8-connected true
//! regions in a mask, together with the nesting hierarchy. Border pixels
//! belong to their region, so the contour of a filled rectangle is its
//! perimeter pixels.

use crate::frame::BinaryMask;

/// One region or hole boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    /// Boundary pixels in traversal order. The first and last points are
    /// 8-adjacent, so the sequence is a closed walk.
    pub points: Vec<(usize, usize)>,
    /// Nesting depth: 0 for a top-level region boundary, 1 for a hole in
    /// it, 2 for a region inside that hole, and so on.
    pub level: u32,
    /// True when this boundary encloses a hole rather than a region.
    pub is_hole: bool,
}

impl Contour {
    /// Axis-aligned bounding box as (x, y, w, h).
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0usize;
        let mut y1 = 0usize;
        for &(x, y) in &self.points {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }
}

/// Neighbor offsets in counterclockwise order starting east.
const DIRS: [(isize, isize); 8] = [
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Finds all outer and hole borders of the 8-connected regions in `mask`.
///
/// Single-pixel regions yield single-point contours; callers that need a
/// minimum boundary length filter afterwards.
pub fn find_contours(mask: &BinaryMask) -> Vec<Contour> {
    let (w, h) = (mask.width(), mask.height());
    if w == 0 || h == 0 {
        return Vec::new();
    }
    // Working grid: 0 background, 1 unvisited region pixel, ±id visited.
    let mut f: Vec<i32> = mask.bits().iter().map(|&b| if b { 1 } else { 0 }).collect();
    let at = |f: &Vec<i32>, x: isize, y: isize| -> i32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            f[y as usize * w + x as usize]
        }
    };

    // Border bookkeeping indexed by id; id 1 is the implicit frame border.
    let mut is_hole = vec![true];
    let mut parent: Vec<usize> = vec![0];
    let mut contours: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    let mut next_id = 1i32;

    for y in 0..h as isize {
        let mut lnbd = 1usize;
        for x in 0..w as isize {
            let fij = f[y as usize * w + x as usize];
            if fij == 0 {
                continue;
            }
            let start_info = if fij == 1 && at(&f, x - 1, y) == 0 {
                Some((false, 4usize)) // outer border; came from the west
            } else if fij >= 1 && at(&f, x + 1, y) == 0 {
                Some((true, 0usize)) // hole border; came from the east
            } else {
                None
            };
            if let Some((hole, from)) = start_info {
                next_id += 1;
                let id = next_id;
                let lab = &is_hole[lnbd - 1];
                let par = if hole == *lab {
                    parent[lnbd - 1]
                } else {
                    lnbd
                };
                is_hole.push(hole);
                parent.push(par);

                let mut points = vec![(x as usize, y as usize)];
                // Clockwise scan from the zero pixel we came from.
                let mut dir1 = None;
                for k in 0..8 {
                    let d = (from + 8 - k) % 8;
                    if at(&f, x + DIRS[d].0, y + DIRS[d].1) != 0 {
                        dir1 = Some(d);
                        break;
                    }
                }
                match dir1 {
                    None => {
                        // Isolated pixel.
                        f[y as usize * w + x as usize] = -id;
                    }
                    Some(d1) => {
                        let p1 = (x + DIRS[d1].0, y + DIRS[d1].1);
                        let mut p2 = p1;
                        let mut p3 = (x, y);
                        loop {
                            // Counterclockwise scan starting just past p2.
                            let dir23 = DIRS
                                .iter()
                                .position(|&(dx, dy)| (p3.0 + dx, p3.1 + dy) == p2)
                                .expect("p2 neighbors p3");
                            let mut p4 = p3;
                            let mut saw_east_zero = false;
                            for k in 1..=8 {
                                let d = (dir23 + k) % 8;
                                let cand = (p3.0 + DIRS[d].0, p3.1 + DIRS[d].1);
                                if at(&f, cand.0, cand.1) != 0 {
                                    p4 = cand;
                                    break;
                                }
                                if d == 0 {
                                    saw_east_zero = true;
                                }
                            }
                            let idx = p3.1 as usize * w + p3.0 as usize;
                            if saw_east_zero {
                                f[idx] = -id;
                            } else if f[idx] == 1 {
                                f[idx] = id;
                            }
                            if p4 == (x, y) && p3 == p1 {
                                break;
                            }
                            p2 = p3;
                            p3 = p4;
                            points.push((p3.0 as usize, p3.1 as usize));
                        }
                    }
                }
                contours.push((id as usize, points));
            }
            let fij = f[y as usize * w + x as usize];
            if fij != 1 && fij != 0 {
                lnbd = fij.unsigned_abs() as usize;
            }
        }
    }

    // Nesting depth via parent chains. Ids are 2-based; the frame border
    // (id 1) sits at conceptual depth -1 so top-level regions are 0.
    let mut levels = vec![0u32; is_hole.len()];
    for i in 1..is_hole.len() {
        let mut depth = 0u32;
        let mut cur = i;
        while parent[cur] > 1 {
            depth += 1;
            cur = parent[cur] - 1;
        }
        levels[i] = depth;
    }

    contours
        .into_iter()
        .map(|(id, points)| Contour {
            points,
            level: levels[id - 1],
            is_hole: is_hole[id - 1],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let mut m = BinaryMask::new(w, h);
        for (y, row) in rows.iter().enumerate() {
            for (x, c) in row.chars().enumerate() {
                if c == '#' {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// 8-connected component count by flood fill.
    fn component_count(mask: &BinaryMask) -> usize {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !mask.bits()[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (px, py) = (p % w, p / w);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let nx = px as isize + dx;
                        let ny = py as isize + dy;
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if mask.bits()[q] && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        count
    }

    /// Hole count: 4-connected background components not touching the edge.
    fn hole_count(mask: &BinaryMask) -> usize {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut holes = 0;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if mask.bits()[start] || seen[start] {
                continue;
            }
            let mut touches_edge = false;
            seen[start] = true;
            stack.push(start);
            let mut cells = Vec::new();
            while let Some(p) = stack.pop() {
                cells.push(p);
                let (px, py) = (p % w, p / w);
                if px == 0 || py == 0 || px == w - 1 || py == h - 1 {
                    touches_edge = true;
                }
                for (dx, dy) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                    let nx = px as isize + dx;
                    let ny = py as isize + dy;
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !mask.bits()[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            if !touches_edge {
                holes += 1;
            }
        }
        holes
    }

    #[test]
    fn empty_mask_yields_nothing() {
        assert!(find_contours(&BinaryMask::new(16, 16)).is_empty());
    }

    #[test]
    fn filled_square_has_36_border_pixels() {
        let mut m = BinaryMask::new(16, 16);
        for y in 3..13 {
            for x in 3..13 {
                m.set(x, y, true);
            }
        }
        let cs = find_contours(&m);
        assert_eq!(cs.len(), 1);
        assert!(!cs[0].is_hole);
        assert_eq!(cs[0].level, 0);
        let mut unique: Vec<_> = cs[0].points.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 36);
        assert_eq!(cs[0].bounding_box(), (3, 3, 10, 10));
    }

    #[test]
    fn square_with_hole_yields_outer_and_hole() {
        let mut m = BinaryMask::new(16, 16);
        for y in 2..14 {
            for x in 2..14 {
                m.set(x, y, true);
            }
        }
        for y in 6..10 {
            for x in 6..10 {
                m.set(x, y, false);
            }
        }
        let cs = find_contours(&m);
        assert_eq!(cs.len(), 2);
        let outer: Vec<_> = cs.iter().filter(|c| !c.is_hole).collect();
        let holes: Vec<_> = cs.iter().filter(|c| c.is_hole).collect();
        assert_eq!(outer.len(), 1);
        assert_eq!(holes.len(), 1);
        assert_eq!(outer[0].level, 0);
        assert_eq!(holes[0].level, 1);
        assert_eq!(component_count(&m), 1);
        assert_eq!(hole_count(&m), 1);
    }

    #[test]
    fn contours_are_closed_walks() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let bits = (0..32 * 32).map(|_| rng.gen_bool(0.4)).collect();
            let m = BinaryMask::from_bits(32, 32, bits).unwrap();
            for c in find_contours(&m) {
                let (fx, fy) = c.points[0];
                let (lx, ly) = *c.points.last().unwrap();
                let dx = fx.abs_diff(lx);
                let dy = fy.abs_diff(ly);
                assert!(dx <= 1 && dy <= 1, "contour not closed: {:?}", c.points);
                for win in c.points.windows(2) {
                    let dx = win[0].0.abs_diff(win[1].0);
                    let dy = win[0].1.abs_diff(win[1].1);
                    assert!(dx <= 1 && dy <= 1, "gap in walk");
                }
            }
        }
    }

    #[test]
    fn outer_count_matches_flood_fill_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let density = rng.gen_range(0.1..0.9);
            let bits = (0..32 * 32).map(|_| rng.gen_bool(density)).collect();
            let m = BinaryMask::from_bits(32, 32, bits).unwrap();
            let outer = find_contours(&m).iter().filter(|c| !c.is_hole).count();
            assert_eq!(outer, component_count(&m), "trial {trial}");
        }
    }

    #[test]
    fn hole_count_matches_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for trial in 0..50 {
            let density = rng.gen_range(0.2..0.8);
            let bits = (0..24 * 24).map(|_| rng.gen_bool(density)).collect();
            let m = BinaryMask::from_bits(24, 24, bits).unwrap();
            let holes = find_contours(&m).iter().filter(|c| c.is_hole).count();
            assert_eq!(holes, hole_count(&m), "trial {trial}");
        }
    }

    #[test]
    fn border_pixels_belong_to_region() {
        let m = mask_from(&[
            "........",
            ".###....",
            ".###.##.",
            ".###.##.",
            "........",
        ]);
        for c in find_contours(&m) {
            for &(x, y) in &c.points {
                assert!(m.get(x, y), "contour point off the region: ({x},{y})");
            }
        }
    }
}
