//! Endpoint aggregation into a counted grid and hotspot extraction.
//!
//! Cells are laid out in meters using the equirectangular scale at the
//! bounding-box centre. Row 0 is the southernmost row, column 0 the
//! westernmost column. A point lying exactly on a cell's upper edge belongs
//! to the next cell, except on the box maximum, which closes the last cell.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{bbox_of, BoundingBox, GeoError, GeoPoint, METERS_PER_DEGREE};

pub const DEFAULT_CELL_SIZE_M: f64 = 250.0;

#[derive(Debug, Error, PartialEq)]
pub enum HeatError {
    #[error("cell size must be positive, got {0}")]
    InvalidCellSize(f64),
    #[error("no points and no bounding box to build a grid from")]
    NoExtent,
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatGrid {
    pub bbox: BoundingBox,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` entries.
    pub counts: Vec<u64>,
    pub total_in_bbox: u64,
    pub out_of_bbox: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub cell_row: usize,
    pub cell_col: usize,
    pub center: GeoPoint,
    pub count: u64,
    pub rank: usize,
}

/// Maps positions to cell indices for one bbox / cell size.
#[derive(Debug, Clone, Copy)]
struct CellLayout {
    bbox: BoundingBox,
    m_per_deg_lon: f64,
    cell: f64,
    rows: usize,
    cols: usize,
}

impl CellLayout {
    fn new(bbox: BoundingBox, cell: f64) -> Self {
        let m_per_deg_lon = METERS_PER_DEGREE * bbox.center().lat.to_radians().cos();
        let width_m = bbox.width_deg() * m_per_deg_lon;
        let height_m = bbox.height_deg() * METERS_PER_DEGREE;
        let cols = cells_for(width_m, cell);
        let rows = cells_for(height_m, cell);
        CellLayout {
            bbox,
            m_per_deg_lon,
            cell,
            rows,
            cols,
        }
    }

    fn index(&self, p: GeoPoint) -> Option<usize> {
        if !self.bbox.contains(p) {
            return None;
        }
        let x = (p.lon - self.bbox.min_lon) * self.m_per_deg_lon / self.cell;
        let y = (p.lat - self.bbox.min_lat) * METERS_PER_DEGREE / self.cell;
        let col = (x.floor() as usize).min(self.cols - 1);
        let row = (y.floor() as usize).min(self.rows - 1);
        Some(row * self.cols + col)
    }

    fn center(&self, row: usize, col: usize) -> GeoPoint {
        GeoPoint {
            lon: self.bbox.min_lon + (col as f64 + 0.5) * self.cell / self.m_per_deg_lon,
            lat: self.bbox.min_lat + (row as f64 + 0.5) * self.cell / METERS_PER_DEGREE,
        }
    }
}

/// Cells needed to cover `extent_m`. Extents that are an exact multiple of
/// the cell size up to rounding error do not get an extra sliver cell.
fn cells_for(extent_m: f64, cell: f64) -> usize {
    let n = extent_m / cell;
    ((n - 1e-9 * n.max(1.0)).ceil() as usize).max(1)
}

impl HeatGrid {
    fn layout(&self) -> CellLayout {
        CellLayout::new(self.bbox, self.cell_size_m)
    }

    pub fn count_at(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.cols + col]
    }

    /// Centre of a cell in degrees.
    pub fn cell_center(&self, row: usize, col: usize) -> GeoPoint {
        self.layout().center(row, col)
    }

    /// Cell holding `p`, if it lies inside the bbox.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        self.layout().index(p).map(|i| (i / self.cols, i % self.cols))
    }

    /// Writes the count matrix as CSV, one grid row per line, south first.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.counts.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Sidecar metadata for the CSV matrix.
    pub fn sidecar(&self) -> GridSidecar {
        GridSidecar {
            bbox: self.bbox,
            cell_size_m: self.cell_size_m,
            rows: self.rows,
            cols: self.cols,
            row_order: "south_to_north".into(),
            col_order: "west_to_east".into(),
            total_in_bbox: self.total_in_bbox,
            out_of_bbox: self.out_of_bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub bbox: BoundingBox,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
    pub row_order: String,
    pub col_order: String,
    pub total_in_bbox: u64,
    pub out_of_bbox: u64,
}

fn prepare(points: &[GeoPoint], cell_size_m: f64, bbox: Option<BoundingBox>) -> Result<CellLayout, HeatError> {
    if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
        return Err(HeatError::InvalidCellSize(cell_size_m));
    }
    let bbox = match bbox {
        Some(b) => b,
        None if points.is_empty() => return Err(HeatError::NoExtent),
        None => bbox_of(points)?,
    };
    Ok(CellLayout::new(bbox, cell_size_m))
}

fn accumulate(layout: &CellLayout, points: &[GeoPoint]) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; layout.rows * layout.cols];
    let mut outside = 0;
    for p in points {
        match layout.index(*p) {
            Some(i) => counts[i] += 1,
            None => outside += 1,
        }
    }
    (counts, outside)
}

fn finish(layout: CellLayout, counts: Vec<u64>, outside: u64) -> HeatGrid {
    let total = counts.iter().sum();
    HeatGrid {
        bbox: layout.bbox,
        cell_size_m: layout.cell,
        rows: layout.rows,
        cols: layout.cols,
        counts,
        total_in_bbox: total,
        out_of_bbox: outside,
    }
}

pub fn build_grid(points: &[GeoPoint], cell_size_m: f64, bbox: Option<BoundingBox>) -> Result<HeatGrid, HeatError> {
    let layout = prepare(points, cell_size_m, bbox)?;
    let (counts, outside) = accumulate(&layout, points);
    Ok(finish(layout, counts, outside))
}

/// Same result as [`build_grid`], counting `workers` slices of the input on
/// scoped threads and summing the partial grids.
pub fn build_grid_parallel(
    points: &[GeoPoint],
    cell_size_m: f64,
    bbox: Option<BoundingBox>,
    workers: usize,
) -> Result<HeatGrid, HeatError> {
    let layout = prepare(points, cell_size_m, bbox)?;
    let chunk = points.len().div_ceil(workers.max(1)).max(1);
    let partials: Vec<(Vec<u64>, u64)> = std::thread::scope(|s| {
        let handles: Vec<_> = points
            .chunks(chunk)
            .map(|part| s.spawn(move || accumulate(&layout, part)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("grid worker panicked")).collect()
    });
    let mut counts = vec![0u64; layout.rows * layout.cols];
    let mut outside = 0;
    for (part, out) in partials {
        for (c, p) in counts.iter_mut().zip(part) {
            *c += p;
        }
        outside += out;
    }
    Ok(finish(layout, counts, outside))
}

/// The `k` busiest non-empty cells, count-descending, ties by (row, col).
pub fn top_hotspots(grid: &HeatGrid, k: usize) -> Vec<Hotspot> {
    let mut cells: Vec<(usize, u64)> = grid
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i, c))
        .collect();
    // Row-major index order equals (row, col) lexicographic order.
    cells.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let layout = grid.layout();
    cells
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, (i, count))| {
            let (row, col) = (i / grid.cols, i % grid.cols);
            Hotspot {
                cell_row: row,
                cell_col: col,
                center: layout.center(row, col),
                count,
                rank: rank + 1,
            }
        })
        .collect()
}

/// Plain-text digest of the grid and its hotspots for prompt context.
pub fn summarize_for_story(grid: &HeatGrid, hotspots: &[Hotspot]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Dataset: taxi trip endpoints aggregated on a {} m grid", fmt_m(grid.cell_size_m));
    let _ = writeln!(s, "Bounding box: {}", grid.bbox);
    let _ = writeln!(s, "Grid: {} rows x {} cols", grid.rows, grid.cols);
    let _ = writeln!(s, "Endpoints in box: {}", grid.total_in_bbox);
    let _ = writeln!(s, "Endpoints outside box: {}", grid.out_of_bbox);
    let _ = writeln!(s, "Hotspots: {}", hotspots.len());
    for h in hotspots {
        let share = if grid.total_in_bbox == 0 {
            0.0
        } else {
            100.0 * h.count as f64 / grid.total_in_bbox as f64
        };
        let _ = writeln!(
            s,
            "{}. center ({:.4}, {:.4}): {} endpoints, {:.1}% of total",
            h.rank, h.center.lon, h.center.lat, h.count, share
        );
    }
    s
}

fn fmt_m(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn porto_box() -> BoundingBox {
        BoundingBox::new(-8.70, 41.10, -8.55, 41.20).unwrap()
    }

    #[test]
    fn singleton_point() {
        let g = build_grid(&[GeoPoint { lon: -8.61, lat: 41.14 }], 250.0, None).unwrap();
        assert_eq!(g.total_in_bbox, 1);
        assert_eq!(g.counts.iter().filter(|&&c| c == 1).count(), 1);
        assert_eq!((g.rows, g.cols), (1, 1));
    }

    #[test]
    fn coincident_points_share_a_cell() {
        let p = GeoPoint { lon: -8.61, lat: 41.14 };
        let g = build_grid(&vec![p; 37], 100.0, Some(porto_box())).unwrap();
        assert_eq!(g.counts.iter().copied().max(), Some(37));
        assert_eq!(g.counts.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn errors() {
        assert_eq!(build_grid(&[], 250.0, None), Err(HeatError::NoExtent));
        assert_eq!(
            build_grid(&[GeoPoint { lon: 0.0, lat: 0.0 }], 0.0, None),
            Err(HeatError::InvalidCellSize(0.0))
        );
        let empty = build_grid(&[], 250.0, Some(porto_box())).unwrap();
        assert_eq!(empty.total_in_bbox, 0);
    }

    #[test]
    fn max_edge_closes_last_cell() {
        // 1 km square-ish box in latitude with 250 m cells: the top edge lands exactly on a boundary.
        let h = 1000.0 / METERS_PER_DEGREE;
        let b = BoundingBox::new(0.0, 0.0, 0.0, h).unwrap();
        let g = build_grid(&[GeoPoint { lon: 0.0, lat: h }, GeoPoint { lon: 0.0, lat: 0.0 }], 250.0, Some(b)).unwrap();
        assert_eq!(g.rows, 4);
        assert_eq!(g.count_at(3, 0), 1);
        assert_eq!(g.count_at(0, 0), 1);
        // Interior boundary goes to the next cell.
        let mid = GeoPoint { lon: 0.0, lat: 500.0 / METERS_PER_DEGREE };
        assert_eq!(g.cell_of(mid).map(|c| c.0), Some(2));
    }

    #[test]
    fn brute_force_in_bbox_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let wide = BoundingBox::new(-8.75, 41.05, -8.50, 41.25).unwrap();
        let pts: Vec<GeoPoint> = (0..10_000)
            .map(|_| GeoPoint {
                lon: rng.random_range(wide.min_lon..wide.max_lon),
                lat: rng.random_range(wide.min_lat..wide.max_lat),
            })
            .collect();
        let b = porto_box();
        let g = build_grid(&pts, 250.0, Some(b)).unwrap();
        let inside = pts
            .iter()
            .filter(|p| p.lon >= b.min_lon && p.lon <= b.max_lon && p.lat >= b.min_lat && p.lat <= b.max_lat)
            .count() as u64;
        assert_eq!(g.counts.iter().sum::<u64>(), inside);
        assert_eq!(g.total_in_bbox + g.out_of_bbox, 10_000);
    }

    fn grid_with(counts: Vec<u64>, rows: usize, cols: usize) -> HeatGrid {
        let total = counts.iter().sum();
        HeatGrid {
            bbox: porto_box(),
            cell_size_m: 250.0,
            rows,
            cols,
            counts,
            total_in_bbox: total,
            out_of_bbox: 0,
        }
    }

    #[test]
    fn top_hotspots_ordering() {
        let g = grid_with(vec![1, 0, 5, 3], 2, 2);
        assert!(top_hotspots(&g, 0).is_empty());
        let top = top_hotspots(&g, 2);
        assert_eq!(top.iter().map(|h| h.count).collect::<Vec<_>>(), vec![5, 3]);
        assert_eq!((top[0].cell_row, top[0].cell_col, top[0].rank), (1, 0, 1));
        assert_eq!(top_hotspots(&g, 10).len(), 3);
    }

    #[test]
    fn top_hotspots_tie_break() {
        let g = grid_with(vec![2, 2, 0, 2], 2, 2);
        let top = top_hotspots(&g, 3);
        let cells: Vec<_> = top.iter().map(|h| (h.cell_row, h.cell_col)).collect();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn full_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let counts: Vec<u64> = (0..400).map(|_| rng.random_range(0..6)).collect();
        let g = grid_with(counts.clone(), 20, 20);
        let mut all: Vec<(u64, usize, usize)> = Vec::new();
        for r in 0..20 {
            for c in 0..20 {
                if counts[r * 20 + c] > 0 {
                    all.push((counts[r * 20 + c], r, c));
                }
            }
        }
        all.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let top: Vec<_> = top_hotspots(&g, 10).iter().map(|h| (h.count, h.cell_row, h.cell_col)).collect();
        assert_eq!(top, all[..10].to_vec());
    }

    #[test]
    fn summary_totals_only_and_full_share() {
        let g = grid_with(vec![0, 0, 7, 0], 2, 2);
        let text = summarize_for_story(&g, &[]);
        assert!(text.contains("Endpoints in box: 7"));
        assert!(text.contains("Hotspots: 0"));
        let text = summarize_for_story(&g, &top_hotspots(&g, 1));
        assert!(text.contains("7 endpoints, 100.0% of total"), "{text}");
    }

    #[test]
    fn summary_golden() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let pts: Vec<GeoPoint> = (0..500)
            .map(|_| GeoPoint {
                lon: rng.random_range(-8.62..-8.60),
                lat: rng.random_range(41.14..41.15),
            })
            .collect();
        let g = build_grid(&pts, 500.0, None).unwrap();
        let text = summarize_for_story(&g, &top_hotspots(&g, 3));
        assert_eq!(text, summarize_for_story(&g, &top_hotspots(&g, 3)));
        let golden = include_str!("../tests/golden/summary_seed2024.txt");
        assert_eq!(text, golden);
    }

    #[test]
    fn csv_export_shape() {
        let g = grid_with(vec![1, 2, 3, 4, 5, 6], 2, 3);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,2,3\n4,5,6\n");
    }

    fn cloud() -> impl Strategy<Value = Vec<GeoPoint>> {
        prop::collection::vec((-8.70f64..-8.55, 41.10f64..41.20), 1..300)
            .prop_map(|v| v.into_iter().map(|(lon, lat)| GeoPoint { lon, lat }).collect())
    }

    proptest! {
        #[test]
        fn conservation(pts in cloud(), cell in 50.0f64..2000.0) {
            let b = BoundingBox::new(-8.66, 41.12, -8.58, 41.18).unwrap();
            let g = build_grid(&pts, cell, Some(b)).unwrap();
            prop_assert_eq!(g.counts.iter().sum::<u64>(), g.total_in_bbox);
            prop_assert_eq!(g.total_in_bbox + g.out_of_bbox, pts.len() as u64);
            prop_assert_eq!(g.counts.len(), g.rows * g.cols);
        }

        #[test]
        fn parallel_matches_sequential(pts in cloud(), workers in 1usize..8) {
            let a = build_grid(&pts, 300.0, None).unwrap();
            let b = build_grid_parallel(&pts, 300.0, None, workers).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn hotspot_prefix(pts in cloud(), k1 in 0usize..15, extra in 0usize..15) {
            let g = build_grid(&pts, 400.0, None).unwrap();
            let short = top_hotspots(&g, k1);
            let long = top_hotspots(&g, k1 + extra);
            prop_assert_eq!(&long[..short.len()], &short[..]);
            for w in long.windows(2) {
                prop_assert!(w[0].count >= w[1].count && w[0].rank < w[1].rank);
            }
        }

        // Longitude shifts by a power-of-two fraction of a degree keep the
        // layout scale and the relative offsets exact.
        #[test]
        fn longitude_translation(
            cells in prop::collection::vec((0usize..20, 0usize..16, 0.2f64..0.8, 0.2f64..0.8), 1..100),
            shift_steps in -64i32..64,
        ) {
            let b = BoundingBox::new(-8.6875, 41.125, -8.5625, 41.1875).unwrap();
            let base = build_grid(&[], 250.0, Some(b)).unwrap();
            let layout = base.layout();
            let pts: Vec<GeoPoint> = cells.iter().map(|&(c, r, fx, fy)| {
                let c = c.min(layout.cols - 1);
                let r = r.min(layout.rows - 1);
                GeoPoint {
                    lon: b.min_lon + (c as f64 + fx) * 250.0 / layout.m_per_deg_lon,
                    lat: b.min_lat + (r as f64 + fy) * 250.0 / METERS_PER_DEGREE,
                }
            }).collect();
            let dx = shift_steps as f64 / 1024.0;
            let shifted_box = BoundingBox { min_lon: b.min_lon + dx, max_lon: b.max_lon + dx, ..b };
            let shifted: Vec<GeoPoint> = pts.iter().map(|p| GeoPoint { lon: p.lon + dx, lat: p.lat }).collect();
            let g1 = build_grid(&pts, 250.0, Some(b)).unwrap();
            let g2 = build_grid(&shifted, 250.0, Some(shifted_box)).unwrap();
            prop_assert_eq!(g1.counts, g2.counts);
        }
    }
}
