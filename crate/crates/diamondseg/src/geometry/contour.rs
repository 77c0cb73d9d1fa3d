//! Boundary tracing and polygon simplification.

use super::{GeometryError, Pixel};
use std::collections::{HashMap, HashSet};

/// Clockwise neighbor offsets starting west, in image coordinates
/// (row grows downward): W, NW, N, NE, E, SE, S, SW.
const CLOCKWISE: [(i64, i64); 8] = [
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
];

/// Traces the outer boundary of an 8-connected component clockwise using
/// Moore neighbor tracing, starting at the lexicographically smallest pixel.
///
/// The result is a closed pixel chain: consecutive entries are 8-adjacent and
/// the last entry connects back to the first. Thin substructures may appear
/// twice (out and back). A single-pixel component degenerates to the
/// four-point convention `[p, p, p, p]` so downstream polygon code always
/// sees at least three points.
pub fn trace_contour(component: &[Pixel]) -> Result<Vec<Pixel>, GeometryError> {
    if component.is_empty() {
        return Err(GeometryError::EmptyComponent);
    }
    let inside: HashSet<Pixel> = component.iter().copied().collect();
    let start = *component
        .iter()
        .min()
        .expect("nonempty component has a minimum");

    let step = |p: Pixel, dir: usize| -> Option<Pixel> {
        let (dr, dc) = CLOCKWISE[dir];
        let r = p.0 as i64 + dr;
        let c = p.1 as i64 + dc;
        if r < 0 || c < 0 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    };

    // Tracing state: (pixel, direction we moved along to enter it). The
    // transition is deterministic, so the orbit is eventually periodic and
    // the period is exactly one clockwise lap of the boundary. The start
    // pixel is entered synthetically "from the west" (its west and north
    // neighbors are outside by minimality).
    let mut contour = Vec::with_capacity(component.len());
    let mut seen: HashMap<(Pixel, usize), usize> = HashMap::new();
    let mut state = (start, 4usize); // CLOCKWISE[4] = east, i.e. came from the west

    let limit = component.len() * 8 + 16;
    for _ in 0..limit {
        if let Some(&first) = seen.get(&state) {
            // One full period recorded; anything before `first` is a lead-in.
            contour.drain(..first);
            return Ok(finish(contour));
        }
        seen.insert(state, contour.len());
        let (pixel, entry_dir) = state;
        contour.push(pixel);
        let backtrack = (entry_dir + 4) % 8;
        let mut next = None;
        for k in 1..=8 {
            let dir = (backtrack + k) % 8;
            if let Some(n) = step(pixel, dir) {
                if inside.contains(&n) {
                    next = Some((n, dir));
                    break;
                }
            }
        }
        match next {
            Some(s) => state = s,
            None => return Ok(vec![start; 4]), // isolated pixel
        }
    }
    Err(GeometryError::DegenerateContour("tracing did not terminate"))
}

fn finish(contour: Vec<Pixel>) -> Vec<Pixel> {
    // Rotate the cycle so the lexicographically smallest pixel leads.
    let lead = contour
        .iter()
        .enumerate()
        .min_by_key(|(_, p)| **p)
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut out = Vec::with_capacity(contour.len().max(3));
    out.extend_from_slice(&contour[lead..]);
    out.extend_from_slice(&contour[..lead]);
    while out.len() < 3 {
        let p = out[0];
        out.push(p);
    }
    out
}

fn dist(a: Pixel, b: Pixel) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

/// Euclidean length of the closed pixel chain (diagonal steps weigh sqrt(2)).
pub fn chain_perimeter(contour: &[Pixel]) -> f64 {
    if contour.len() < 2 {
        return 0.0;
    }
    let mut p = 0.0;
    for i in 0..contour.len() {
        p += dist(contour[i], contour[(i + 1) % contour.len()]);
    }
    p
}

/// Euclidean perimeter of a closed polygon given by its vertices.
pub fn polygon_perimeter(vertices: &[Pixel]) -> f64 {
    chain_perimeter(vertices)
}

/// Unsigned shoelace area of a closed polygon given by its vertices.
pub fn polygon_area(vertices: &[Pixel]) -> f64 {
    if vertices.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..vertices.len() {
        let (r1, c1) = vertices[i];
        let (r2, c2) = vertices[(i + 1) % vertices.len()];
        twice += (c1 as f64) * (r2 as f64) - (c2 as f64) * (r1 as f64);
    }
    twice.abs() / 2.0
}

/// Perpendicular distance from `p` to the segment `a`-`b`.
fn point_segment_distance(p: Pixel, a: Pixel, b: Pixel) -> f64 {
    let (px, py) = (p.1 as f64, p.0 as f64);
    let (ax, ay) = (a.1 as f64, a.0 as f64);
    let (bx, by) = (b.1 as f64, b.0 as f64);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((px - ax).powi(2) + (py - ay).powi(2)).sqrt();
    }
    let t = ((px - ax) * dx + (py - ay) * dy) / len2;
    let t = t.clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

// Simplifies an open chain, emitting kept points without the final endpoint
// so closed cycles can be rebuilt by concatenating their halves.
fn dp_open(chain: &[Pixel], epsilon: f64, out: &mut Vec<Pixel>) {
    if chain.len() <= 2 {
        out.push(chain[0]);
        return;
    }
    let (a, b) = (chain[0], chain[chain.len() - 1]);
    let mut max_d = -1.0;
    let mut max_i = 0;
    for (i, &p) in chain.iter().enumerate().skip(1).take(chain.len() - 2) {
        let d = point_segment_distance(p, a, b);
        if d > max_d {
            max_d = d;
            max_i = i;
        }
    }
    if max_d > epsilon {
        dp_open(&chain[..=max_i], epsilon, out);
        dp_open(&chain[max_i..], epsilon, out);
    } else {
        out.push(a);
    }
}

/// Simplifies a closed contour with the recursive max-deviation rule.
///
/// The closed chain is split at its two mutually most distant points, each
/// open half is simplified independently, and the halves are rejoined. The
/// returned vertices are a subset of the input in traversal order, without a
/// duplicated closing point. `epsilon == 0` returns the input unchanged.
pub fn douglas_peucker(contour: &[Pixel], epsilon: f64) -> Result<Vec<Pixel>, GeometryError> {
    if contour.is_empty() {
        return Err(GeometryError::EmptyComponent);
    }
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    if contour.len() <= 3 {
        return Ok(contour.to_vec());
    }
    if epsilon == 0.0 {
        return Ok(contour.to_vec());
    }

    // Most distant pair; first found in scan order on ties.
    let (mut bi, mut bj, mut best) = (0usize, 0usize, -1.0f64);
    for i in 0..contour.len() {
        for j in (i + 1)..contour.len() {
            let d = dist(contour[i], contour[j]);
            if d > best {
                best = d;
                bi = i;
                bj = j;
            }
        }
    }
    if best == 0.0 {
        // All points coincide (degenerate single-pixel convention).
        return Ok(vec![contour[0]]);
    }

    let half1: Vec<Pixel> = contour[bi..=bj].to_vec();
    let mut half2: Vec<Pixel> = contour[bj..].to_vec();
    half2.extend_from_slice(&contour[..=bi]);

    // Each half is emitted without its final endpoint, so concatenation
    // yields the closed vertex cycle starting at contour[bi].
    let mut out = Vec::new();
    dp_open(&half1, epsilon, &mut out);
    dp_open(&half2, epsilon, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_component(r0: usize, c0: usize, h: usize, w: usize) -> Vec<Pixel> {
        let mut v = Vec::new();
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                v.push((r, c));
            }
        }
        v
    }

    #[test]
    fn block_contour_is_its_boundary_ring() {
        let comp = rect_component(5, 5, 3, 3);
        let contour = trace_contour(&comp).unwrap();
        assert_eq!(contour.len(), 8);
        assert_eq!(contour[0], (5, 5));
        let as_set: HashSet<Pixel> = contour.iter().copied().collect();
        assert_eq!(as_set.len(), 8);
        assert!(!as_set.contains(&(6, 6)), "center is not boundary");
        for i in 0..contour.len() {
            let a = contour[i];
            let b = contour[(i + 1) % contour.len()];
            let adj = a.0.abs_diff(b.0).max(a.1.abs_diff(b.1));
            assert_eq!(adj, 1, "consecutive contour pixels must be adjacent");
        }
    }

    #[test]
    fn contour_of_single_pixel_uses_four_point_convention() {
        let contour = trace_contour(&[(4, 7)]).unwrap();
        assert_eq!(contour, vec![(4, 7); 4]);
        assert_eq!(chain_perimeter(&contour), 0.0);
    }

    #[test]
    fn contour_is_clockwise_for_a_square() {
        let comp = rect_component(0, 0, 4, 4);
        let contour = trace_contour(&comp).unwrap();
        // Clockwise in image coords: signed shoelace area (x=col, y=row) > 0.
        let mut twice_area = 0.0;
        for i in 0..contour.len() {
            let (r1, c1) = contour[i];
            let (r2, c2) = contour[(i + 1) % contour.len()];
            twice_area += (c1 as f64) * (r2 as f64) - (c2 as f64) * (r1 as f64);
        }
        assert!(
            twice_area > 0.0,
            "expected clockwise orientation, got signed area {twice_area}"
        );
    }

    #[test]
    fn square_simplifies_to_four_corners() {
        let comp = rect_component(2, 3, 21, 21);
        let contour = trace_contour(&comp).unwrap();
        assert_eq!(contour.len(), 80);
        let poly = douglas_peucker(&contour, 0.02 * chain_perimeter(&contour)).unwrap();
        assert_eq!(poly.len(), 4);
        let corners: HashSet<Pixel> = poly.into_iter().collect();
        assert_eq!(
            corners,
            HashSet::from([(2, 3), (2, 23), (22, 3), (22, 23)])
        );
    }

    #[test]
    fn epsilon_zero_returns_input() {
        let comp = rect_component(0, 0, 5, 9);
        let contour = trace_contour(&comp).unwrap();
        let poly = douglas_peucker(&contour, 0.0).unwrap();
        assert_eq!(poly, contour);
    }

    #[test]
    fn collinear_points_collapse_to_endpoints() {
        let chain: Vec<Pixel> = (0..10).map(|c| (3, c)).collect();
        // An open straight line traced as a contour goes out and back.
        let contour = trace_contour(&chain).unwrap();
        let poly = douglas_peucker(&contour, 1.0).unwrap();
        assert_eq!(poly.len(), 2);
        assert!(poly.contains(&(3, 0)) && poly.contains(&(3, 9)));
    }

    #[test]
    fn perimeter_weights_diagonals() {
        let contour = vec![(0, 0), (1, 1), (2, 2), (2, 1), (2, 0), (1, 0)];
        let p = chain_perimeter(&contour);
        assert!((p - (2.0 * std::f64::consts::SQRT_2 + 4.0)).abs() < 1e-12);
    }
}
