//! 8-connected component labeling over class masks and binary grids.

use super::{GeometryError, Pixel};
use crate::imaging::MaskU8;

/// All 8-connected components of `class` pixels, each as a row-major sorted
/// pixel list. Components are ordered by their first pixel in row-major scan
/// order (minimum row, then minimum column within that row), which makes the
/// output independent of traversal details.
pub fn connected_components(mask: &MaskU8, class: u8) -> Vec<Vec<Pixel>> {
    let (h, w) = (mask.height(), mask.width());
    let grid: Vec<bool> = mask.data().iter().map(|&v| v == class).collect();
    components_of_grid(&grid, h, w)
}

/// Component labeling over an arbitrary binary grid (row-major, `h*w`).
pub fn connected_components_binary(grid: &[bool], h: usize, w: usize) -> Vec<Vec<Pixel>> {
    assert_eq!(grid.len(), h * w);
    components_of_grid(grid, h, w)
}

fn components_of_grid(grid: &[bool], h: usize, w: usize) -> Vec<Vec<Pixel>> {
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    for start in 0..h * w {
        if !grid[start] || visited[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(idx) = stack.pop() {
            comp.push((idx / w, idx % w));
            let (r, c) = (idx / w, idx % w);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if grid[nidx] && !visited[nidx] {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// Largest component of `class` pixels; ties go to the earlier component in
/// scan order. Errors when the class is absent.
pub fn largest_component(mask: &MaskU8, class: u8) -> Result<Vec<Pixel>, GeometryError> {
    let mut best: Option<Vec<Pixel>> = None;
    for comp in connected_components(mask, class) {
        let replace = match &best {
            None => true,
            Some(b) => comp.len() > b.len(),
        };
        if replace {
            best = Some(comp);
        }
    }
    best.ok_or(GeometryError::MissingRegion("class has no pixels"))
}
