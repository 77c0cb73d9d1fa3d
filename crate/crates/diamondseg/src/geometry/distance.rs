//! Diamond-to-pocket gap measurement via an exact distance transform.

use super::{GeometryError, Pixel};
use crate::imaging::MaskU8;

/// Minimum and mean Euclidean distance from the diamond boundary to the
/// pocket-holder region, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapStats {
    pub gap_min: f64,
    pub gap_mean: f64,
}

/// Pixels of the given classes that touch the outside: at least one
/// 8-neighbor is a different class or beyond the mask edge. Row-major order.
pub fn region_boundary(mask: &MaskU8, classes: &[u8]) -> Vec<Pixel> {
    let (h, w) = (mask.height(), mask.width());
    let member = |r: usize, c: usize| classes.contains(&mask.get(r, c));
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !member(r, c) {
                continue;
            }
            let mut exposed = false;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        exposed = true;
                        break 'scan;
                    }
                    if !member(nr as usize, nc as usize) {
                        exposed = true;
                        break 'scan;
                    }
                }
            }
            if exposed {
                out.push((r, c));
            }
        }
    }
    out
}

// Lower-envelope intersection of the parabolas rooted at `q` and `v`.
fn intersect(f: &[f64], q: usize, v: usize) -> f64 {
    if f[q].is_infinite() {
        return f64::INFINITY;
    }
    if f[v].is_infinite() {
        return f64::NEG_INFINITY;
    }
    let (qf, vf) = (q as f64, v as f64);
    ((f[q] + qf * qf) - (f[v] + vf * vf)) / (2.0 * qf - 2.0 * vf)
}

// One-dimensional squared distance transform (lower envelope of parabolas).
// Exact for integer-valued inputs: every output is (q-v)^2 + f[v], computed
// in f64 without rounding for grid-scale magnitudes.
fn dt1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(n, d.len());
    if n == 0 {
        return;
    }
    let mut hull = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(f, q, hull[k]);
        while k > 0 && s <= z[k] {
            k -= 1;
            s = intersect(f, q, hull[k]);
        }
        if s.is_infinite() && s > 0.0 {
            continue; // parabola at q never undercuts the envelope
        }
        k += 1;
        hull[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - hull[k] as f64;
        d[q] = diff * diff + f[hull[k]];
    }
}

/// Exact squared Euclidean distance from every cell to the nearest seed.
///
/// Two separable 1-D envelope passes (columns then rows); cells with no seed
/// anywhere stay at infinity. Distances are exact integers in f64 for any
/// grid that fits in memory.
pub fn squared_distance_transform(seed: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(seed.len(), h * w, "seed grid size mismatch");
    let mut grid: Vec<f64> = seed
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = grid[r * w + c];
        }
        dt1d(&col_in, &mut col_out);
        for r in 0..h {
            grid[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0f64; w];
    for r in 0..h {
        dt1d(&grid[r * w..(r + 1) * w], &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Gap between the diamond (classes 2 and 3) and the pocket holder (class 1):
/// for every diamond boundary pixel, the Euclidean distance to the nearest
/// pocket pixel, reduced to its minimum and mean.
pub fn gap(mask: &MaskU8) -> Result<GapStats, GeometryError> {
    let (h, w) = (mask.height(), mask.width());
    let mut pocket = vec![false; h * w];
    let mut any_pocket = false;
    let mut any_diamond = false;
    for r in 0..h {
        for c in 0..w {
            match mask.get(r, c) {
                1 => {
                    pocket[r * w + c] = true;
                    any_pocket = true;
                }
                2 | 3 => any_diamond = true,
                _ => {}
            }
        }
    }
    if !any_diamond {
        return Err(GeometryError::MissingRegion("diamond"));
    }
    if !any_pocket {
        return Err(GeometryError::MissingRegion("pocket-holder"));
    }

    let boundary = region_boundary(mask, &[2, 3]);
    debug_assert!(!boundary.is_empty());
    let sq = squared_distance_transform(&pocket, h, w);
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for &(r, c) in &boundary {
        let d = sq[r * w + c].sqrt();
        if d < min {
            min = d;
        }
        sum += d;
    }
    Ok(GapStats {
        gap_min: min,
        gap_mean: sum / boundary.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_sq(seed: &[bool], h: usize, w: usize) -> Vec<f64> {
        let seeds: Vec<(i64, i64)> = (0..h * w)
            .filter(|&i| seed[i])
            .map(|i| ((i / w) as i64, (i % w) as i64))
            .collect();
        let mut out = vec![f64::INFINITY; h * w];
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let mut best = i64::MAX;
                for &(sr, sc) in &seeds {
                    let d = (r - sr) * (r - sr) + (c - sc) * (c - sc);
                    if d < best {
                        best = d;
                    }
                }
                if best != i64::MAX {
                    out[(r * w as i64 + c) as usize] = best as f64;
                }
            }
        }
        out
    }

    #[test]
    fn transform_matches_brute_force_exactly() {
        // Deterministic pseudo-random seeds via a small LCG.
        let (h, w) = (33, 29);
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        for density in [1u64, 5, 40] {
            let seed: Vec<bool> = (0..h * w).map(|_| next() % 100 < density).collect();
            if !seed.iter().any(|&s| s) {
                continue;
            }
            let fast = squared_distance_transform(&seed, h, w);
            let slow = brute_force_sq(&seed, h, w);
            assert_eq!(fast, slow, "density {density}%");
        }
    }

    #[test]
    fn no_seed_stays_infinite() {
        let sq = squared_distance_transform(&[false; 12], 3, 4);
        assert!(sq.iter().all(|d| d.is_infinite()));
    }

    fn mask_from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> MaskU8 {
        let data: Vec<u8> = (0..h * w).map(|i| f(i / w, i % w)).collect();
        MaskU8::new(h, w, data).unwrap()
    }

    #[test]
    fn centered_diamond_in_ring_has_gap_ten() {
        // 20x20 diamond (rows/cols 40..=59) centered in a pocket ring whose
        // innermost pixels span rows/cols 30..=69 (inner square side 40).
        // Nearest approach: row 40 to row 30, 10 px.
        let mask = mask_from_fn(100, 100, |r, c| {
            let in_span = |v: usize, lo: usize, hi: usize| (lo..=hi).contains(&v);
            if in_span(r, 40, 59) && in_span(c, 40, 59) {
                2
            } else if in_span(r, 26, 73)
                && in_span(c, 26, 73)
                && !(in_span(r, 31, 68) && in_span(c, 31, 68))
            {
                1
            } else {
                0
            }
        });
        let stats = gap(&mask).unwrap();
        assert_eq!(stats.gap_min, 10.0);
        assert!(stats.gap_mean >= stats.gap_min);
    }

    #[test]
    fn touching_regions_have_gap_one() {
        let mask = mask_from_fn(16, 16, |r, c| {
            if r == 8 && (3..8).contains(&c) {
                2
            } else if r == 8 && (8..13).contains(&c) {
                1
            } else {
                0
            }
        });
        let stats = gap(&mask).unwrap();
        assert_eq!(stats.gap_min, 1.0);
    }

    #[test]
    fn gap_matches_brute_force_over_boundary_pairs() {
        let mask = mask_from_fn(48, 48, |r, c| {
            let (dr, dc) = (r as i64 - 20, c as i64 - 26);
            if dr.abs().max(dc.abs()) <= 5 {
                if dr.abs() <= 3 && dc.abs() <= 3 {
                    2
                } else {
                    3
                }
            } else if r >= 40 {
                1
            } else {
                0
            }
        });
        let stats = gap(&mask).unwrap();

        let boundary = region_boundary(&mask, &[2, 3]);
        let mut pocket = Vec::new();
        for r in 0..48 {
            for c in 0..48 {
                if mask.get(r, c) == 1 {
                    pocket.push((r as i64, c as i64));
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut sum = 0.0;
        for &(r, c) in &boundary {
            let mut d2 = i64::MAX;
            for &(pr, pc) in &pocket {
                let v = (r as i64 - pr).pow(2) + (c as i64 - pc).pow(2);
                d2 = d2.min(v);
            }
            let d = (d2 as f64).sqrt();
            if d < best {
                best = d;
            }
            sum += d;
        }
        assert_eq!(stats.gap_min, best);
        assert_eq!(stats.gap_mean, sum / boundary.len() as f64);
    }

    #[test]
    fn missing_regions_are_reported() {
        let all_bg = mask_from_fn(8, 8, |_, _| 0);
        assert!(matches!(
            gap(&all_bg),
            Err(GeometryError::MissingRegion("diamond"))
        ));
        let no_pocket = mask_from_fn(8, 8, |r, _| if r < 2 { 2 } else { 0 });
        assert!(matches!(
            gap(&no_pocket),
            Err(GeometryError::MissingRegion("pocket-holder"))
        ));
    }

    #[test]
    fn boundary_of_solid_block_is_its_ring() {
        let mask = mask_from_fn(10, 10, |r, c| {
            if (2..7).contains(&r) && (3..8).contains(&c) {
                2
            } else {
                0
            }
        });
        let b = region_boundary(&mask, &[2]);
        assert_eq!(b.len(), 5 * 5 - 3 * 3);
        assert!(b.windows(2).all(|w| w[0] < w[1]), "row-major order");
    }
}
