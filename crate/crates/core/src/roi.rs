//! Attention-guided region of interest.
//!
//! The server divides the task-prompt attention over visual tokens by the attention a
//! generic description prompt produces, giving a relative map in which query-independent
//! salience cancels out. A square sliding window is then scored by the contrast between
//! the mean relative attention inside it and the mean outside it. The winning window is
//! sent to the edge as a [`BoundingBox`] in token units, and the edge maps it back to
//! pixels of its original image with [`bbox_to_pixels`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to generic attention before dividing.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Two window scores closer than this fraction of the map's peak value count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoiError {
    #[error("attention shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer} out of range for {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("{0} visual tokens do not form a square grid")]
    NotSquare(usize),
    #[error("invalid attention value {value} at layer {layer}, token {token}")]
    InvalidValue { layer: usize, token: usize, value: f64 },
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("window scale list is empty")]
    EmptyScales,
    #[error("window scale {0} is not a positive finite number")]
    InvalidScale(f64),
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("bounding box (b1={b1}, b2={b2}) does not fit a {grid_side}x{grid_side} grid")]
    InvalidBox { b1: u32, b2: u32, grid_side: u32 },
    #[error("pixel rectangle is empty after clamping")]
    DegenerateRect,
}

fn square_side(n: usize) -> Option<usize> {
    let g = (n as f64).sqrt().round() as usize;
    (g * g == n && g > 0).then_some(g)
}

/// Head-averaged attention from the first output token to every visual token, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    layers: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self, RoiError> {
        let n_v = layers
            .first()
            .map(Vec::len)
            .ok_or_else(|| RoiError::ShapeMismatch("no layers".into()))?;
        square_side(n_v).ok_or(RoiError::NotSquare(n_v))?;
        for (l, row) in layers.iter().enumerate() {
            if row.len() != n_v {
                return Err(RoiError::ShapeMismatch(format!(
                    "layer {l} has {} tokens, expected {n_v}",
                    row.len()
                )));
            }
            if let Some((token, &value)) =
                row.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                return Err(RoiError::InvalidValue {
                    layer: l,
                    token,
                    value,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.layers[0].len()
    }

    pub fn grid_side(&self) -> usize {
        square_side(self.num_visual_tokens()).expect("validated on construction")
    }

    pub fn layer(&self, l: usize) -> Option<&[f64]> {
        self.layers.get(l).map(Vec::as_slice)
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    /// Multiplies every value of one layer by `factor`.
    pub fn scale_layer(&mut self, l: usize, factor: f64) {
        assert!(factor.is_finite() && factor >= 0.0);
        for v in &mut self.layers[l] {
            *v *= factor;
        }
    }
}

/// Row-major `g x g` grid of task/generic attention ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeAttentionMap {
    grid: Vec<f64>,
    side: usize,
}

impl RelativeAttentionMap {
    pub fn from_grid(grid: Vec<f64>) -> Result<Self, RoiError> {
        let side = square_side(grid.len()).ok_or(RoiError::NotSquare(grid.len()))?;
        if let Some((token, &value)) =
            grid.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(RoiError::InvalidValue {
                layer: 0,
                token,
                value,
            });
        }
        Ok(Self { grid, side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.grid
    }

    /// Largest value in the grid.
    pub fn peak(&self) -> f64 {
        self.grid.iter().copied().fold(0.0, f64::max)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.side + col]
    }
}

/// Token grid of the vision encoder: `grid_side` tokens per side over a square input of
/// `encoder_resolution` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    grid_side: u32,
    encoder_resolution: u32,
}

impl GridGeometry {
    pub fn new(grid_side: u32, encoder_resolution: u32) -> Result<Self, RoiError> {
        if grid_side == 0 || encoder_resolution == 0 {
            return Err(RoiError::InvalidGeometry("dimensions must be positive".into()));
        }
        if !encoder_resolution.is_multiple_of(grid_side) {
            return Err(RoiError::InvalidGeometry(format!(
                "encoder resolution {encoder_resolution} is not divisible by grid side {grid_side}"
            )));
        }
        Ok(Self {
            grid_side,
            encoder_resolution,
        })
    }

    /// LLaVA-1.5 style 24x24 tokens from 336x336 pixels.
    pub fn llava() -> Self {
        Self::new(24, 336).unwrap()
    }

    pub fn grid_side(&self) -> u32 {
        self.grid_side
    }

    pub fn encoder_resolution(&self) -> u32 {
        self.encoder_resolution
    }

    pub fn patch_pixels(&self) -> u32 {
        self.encoder_resolution / self.grid_side
    }

    pub fn num_visual_tokens(&self) -> u32 {
        self.grid_side * self.grid_side
    }
}

/// Square window on the token grid: `b1` is the row-major index of the top-left token and
/// `b2` the side length in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub b1: u32,
    pub b2: u32,
}

impl BoundingBox {
    pub fn from_corner(row: u32, col: u32, side: u32, grid_side: u32) -> Self {
        Self {
            b1: row * grid_side + col,
            b2: side,
        }
    }

    pub fn full(grid_side: u32) -> Self {
        Self { b1: 0, b2: grid_side }
    }

    pub fn row(&self, grid_side: u32) -> u32 {
        self.b1 / grid_side
    }

    pub fn col(&self, grid_side: u32) -> u32 {
        self.b1 % grid_side
    }

    pub fn validate(&self, grid_side: u32) -> Result<(), RoiError> {
        let fits = grid_side > 0
            && self.b2 >= 1
            && u64::from(self.b1) < u64::from(grid_side) * u64::from(grid_side)
            && u64::from(self.row(grid_side)) + u64::from(self.b2) <= u64::from(grid_side)
            && u64::from(self.col(grid_side)) + u64::from(self.b2) <= u64::from(grid_side);
        if fits {
            Ok(())
        } else {
            Err(RoiError::InvalidBox {
                b1: self.b1,
                b2: self.b2,
                grid_side,
            })
        }
    }

    /// Whether the token at `(row, col)` lies inside the box.
    pub fn contains(&self, row: u32, col: u32, grid_side: u32) -> bool {
        let (r, c) = (self.row(grid_side), self.col(grid_side));
        (r..r + self.b2).contains(&row) && (c..c + self.b2).contains(&col)
    }
}

/// Rectangle in original-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Elementwise `task / max(generic, epsilon)` at one layer, reshaped to the token grid.
pub fn relative_attention(
    task: &AttentionTrace,
    generic: &AttentionTrace,
    layer: usize,
    epsilon: f64,
) -> Result<RelativeAttentionMap, RoiError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(RoiError::InvalidEpsilon(epsilon));
    }
    if task.num_layers() != generic.num_layers()
        || task.num_visual_tokens() != generic.num_visual_tokens()
    {
        return Err(RoiError::ShapeMismatch(format!(
            "task is {}x{}, generic is {}x{}",
            task.num_layers(),
            task.num_visual_tokens(),
            generic.num_layers(),
            generic.num_visual_tokens()
        )));
    }
    let out_of_range = RoiError::LayerOutOfRange {
        layer,
        num_layers: task.num_layers(),
    };
    let t = task.layer(layer).ok_or_else(|| out_of_range.clone())?;
    let g = generic.layer(layer).ok_or(out_of_range)?;
    let grid = t.iter().zip(g).map(|(a, b)| a / b.max(epsilon)).collect();
    RelativeAttentionMap::from_grid(grid)
}

/// Window side in tokens for a scale factor on a grid of side `grid_side`.
pub fn window_side(scale: f64, grid_side: u32) -> Result<u32, RoiError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(RoiError::InvalidScale(scale));
    }
    let side = (scale * f64::from(grid_side)).round();
    Ok(side.clamp(1.0, f64::from(grid_side)) as u32)
}

/// Distinct candidate window sides, ascending.
pub fn candidate_sides(scales: &[f64], grid_side: u32) -> Result<Vec<u32>, RoiError> {
    if scales.is_empty() {
        return Err(RoiError::EmptyScales);
    }
    let mut sides = scales
        .iter()
        .map(|&s| window_side(s, grid_side))
        .collect::<Result<Vec<_>, _>>()?;
    sides.sort_unstable();
    sides.dedup();
    Ok(sides)
}

/// Whether `candidate` beats `best` by more than the tie tolerance, measured against
/// `peak`, the largest value in the map.
pub fn beats(candidate: f64, best: f64, peak: f64) -> bool {
    candidate - best > TIE_TOLERANCE * peak
}

/// Contrast score of a window: mean inside minus mean outside (outside mean is 0 when
/// the window covers the whole grid).
pub fn contrast(inside_sum: f64, total_sum: f64, area: usize, cells: usize) -> f64 {
    let inside = inside_sum / area as f64;
    let outside = if area == cells {
        0.0
    } else {
        (total_sum - inside_sum) / (cells - area) as f64
    };
    inside - outside
}

/// Summed-area table with a zero border: `table[(r + 1) * (g + 1) + (c + 1)]` holds the
/// sum of rows `0..=r`, cols `0..=c`.
struct SummedArea {
    table: Vec<f64>,
    stride: usize,
}

impl SummedArea {
    fn new(map: &RelativeAttentionMap) -> Self {
        let g = map.side();
        let stride = g + 1;
        let mut table = vec![0.0; stride * stride];
        for r in 0..g {
            let mut row_sum = 0.0;
            for c in 0..g {
                row_sum += map.get(r, c);
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_sum;
            }
        }
        Self { table, stride }
    }

    fn window(&self, row: usize, col: usize, side: usize) -> f64 {
        let s = self.stride;
        let (r0, c0, r1, c1) = (row, col, row + side, col + side);
        self.table[r1 * s + c1] - self.table[r0 * s + c1] - self.table[r1 * s + c0]
            + self.table[r0 * s + c0]
    }
}

/// Sliding-window search for the square window with the highest inside/outside contrast.
///
/// Candidates are visited smallest side first, then by row-major top-left index, and a
/// later candidate only wins if it is strictly better beyond the tie tolerance. Ties
/// therefore resolve to the smaller window, then the earlier position.
pub fn find_bbox(
    map: &RelativeAttentionMap,
    geometry: &GridGeometry,
    scales: &[f64],
) -> Result<BoundingBox, RoiError> {
    let g = geometry.grid_side();
    if map.side() != g as usize {
        return Err(RoiError::ShapeMismatch(format!(
            "map is {0}x{0} but geometry expects {g}x{g}",
            map.side()
        )));
    }
    let sides = candidate_sides(scales, g)?;
    let sat = SummedArea::new(map);
    let cells = map.values().len();
    let total = sat.window(0, 0, g as usize);
    let peak = map.peak();

    let mut best: Option<(f64, BoundingBox)> = None;
    for side in sides {
        let s = side as usize;
        let area = s * s;
        for row in 0..=(g - side) {
            for col in 0..=(g - side) {
                let inside = sat.window(row as usize, col as usize, s);
                let score = contrast(inside, total, area, cells);
                if best.is_none_or(|(b, _)| beats(score, b, peak)) {
                    best = Some((score, BoundingBox::from_corner(row, col, side, g)));
                }
            }
        }
    }
    Ok(best.expect("at least one candidate window").1)
}

/// Relative attention followed by the window search.
pub fn locate(
    task: &AttentionTrace,
    generic: &AttentionTrace,
    layer: usize,
    epsilon: f64,
    geometry: &GridGeometry,
    scales: &[f64],
) -> Result<BoundingBox, RoiError> {
    let map = relative_attention(task, generic, layer, epsilon)?;
    find_bbox(&map, geometry, scales)
}

/// Maps a token-grid box onto the original image. The box's pixel extent in the
/// encoder-resolution frame is scaled per axis, rounded outward and clamped.
pub fn bbox_to_pixels(
    bbox: &BoundingBox,
    geometry: &GridGeometry,
    original_w: u32,
    original_h: u32,
) -> Result<PixelRect, RoiError> {
    let g = geometry.grid_side();
    bbox.validate(g)?;
    let patch = u64::from(geometry.patch_pixels());
    let enc = u64::from(geometry.encoder_resolution());
    let axis = |start_token: u32, extent: u64| -> (u32, u32) {
        let p0 = u64::from(start_token) * patch;
        let p1 = (u64::from(start_token) + u64::from(bbox.b2)) * patch;
        let lo = (p0 * extent / enc).min(extent);
        let hi = (p1 * extent).div_ceil(enc).min(extent);
        (lo as u32, hi as u32)
    };
    let (x0, x1) = axis(bbox.col(g), u64::from(original_w));
    let (y0, y1) = axis(bbox.row(g), u64::from(original_h));
    if x1 <= x0 || y1 <= y0 {
        return Err(RoiError::DegenerateRect);
    }
    Ok(PixelRect {
        x: x0,
        y: y0,
        width: x1 - x0,
        height: y1 - y0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rows: Vec<Vec<f64>>) -> AttentionTrace {
        AttentionTrace::new(rows).unwrap()
    }

    #[test]
    fn relative_attention_examples() {
        let ones = trace(vec![vec![1.0; 4]]);
        let map = relative_attention(&ones, &ones, 0, DEFAULT_EPSILON).unwrap();
        assert_eq!(map.values(), &[1.0; 4]);

        let t = trace(vec![vec![0.3, 2.0, 0.7, 5.0]]);
        let map = relative_attention(&t, &t, 0, DEFAULT_EPSILON).unwrap();
        assert_eq!(map.values(), &[1.0; 4]);

        let task = trace(vec![vec![4.0, 1.0, 1.0, 1.0]]);
        let generic = trace(vec![vec![2.0, 1.0, 1.0, 1.0]]);
        let map = relative_attention(&task, &generic, 0, DEFAULT_EPSILON).unwrap();
        assert_eq!(map.side(), 2);
        assert_eq!(map.values(), &[2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn relative_attention_errors() {
        let a = trace(vec![vec![1.0; 4]]);
        let b = trace(vec![vec![1.0; 9]]);
        assert!(matches!(
            relative_attention(&a, &b, 0, DEFAULT_EPSILON),
            Err(RoiError::ShapeMismatch(_))
        ));
        assert!(matches!(
            relative_attention(&a, &a, 1, DEFAULT_EPSILON),
            Err(RoiError::LayerOutOfRange { layer: 1, num_layers: 1 })
        ));
        assert!(matches!(
            relative_attention(&a, &a, 0, 0.0),
            Err(RoiError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            AttentionTrace::new(vec![vec![1.0; 3]]),
            Err(RoiError::NotSquare(3))
        ));
        assert!(AttentionTrace::new(vec![vec![-1.0; 4]]).is_err());
    }

    #[test]
    fn epsilon_floors_generic_attention() {
        let task = trace(vec![vec![1.0, 0.0, 0.0, 0.0]]);
        let generic = trace(vec![vec![0.0; 4]]);
        let map = relative_attention(&task, &generic, 0, 1e-8).unwrap();
        assert_eq!(map.values()[0], 1e8);
        assert!(map.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_hot_cell() {
        let map = RelativeAttentionMap::from_grid(vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let geo = GridGeometry::new(2, 28).unwrap();
        let b = find_bbox(&map, &geo, &[0.5]).unwrap();
        assert_eq!(b, BoundingBox { b1: 0, b2: 1 });
    }

    #[test]
    fn uniform_grid_prefers_smallest_first_window() {
        let map = RelativeAttentionMap::from_grid(vec![0.7; 16]).unwrap();
        let geo = GridGeometry::new(4, 16).unwrap();
        let b = find_bbox(&map, &geo, &[0.5, 0.25, 0.75]).unwrap();
        assert_eq!(b, BoundingBox { b1: 0, b2: 1 });
    }

    #[test]
    fn full_grid_candidate_wins_on_uniform_positive_grid() {
        // the whole-grid window has outside mean 0 and so beats every tied partial window
        let map = RelativeAttentionMap::from_grid(vec![0.7; 16]).unwrap();
        let geo = GridGeometry::new(4, 16).unwrap();
        assert_eq!(find_bbox(&map, &geo, &[0.25, 1.0]).unwrap(), BoundingBox::full(4));
    }

    #[test]
    fn planted_block() {
        let mut grid = vec![0.0; 16];
        for r in 1..=2 {
            for c in 1..=2 {
                grid[r * 4 + c] = 5.0;
            }
        }
        let map = RelativeAttentionMap::from_grid(grid).unwrap();
        let geo = GridGeometry::new(4, 16).unwrap();
        let b = find_bbox(&map, &geo, &[0.25, 0.5]).unwrap();
        assert_eq!(b, BoundingBox { b1: 5, b2: 2 });
    }

    #[test]
    fn scale_conversion_saturates() {
        assert_eq!(window_side(1.0, 24).unwrap(), 24);
        assert_eq!(window_side(2.0, 24).unwrap(), 24);
        assert_eq!(window_side(0.01, 24).unwrap(), 1);
        assert_eq!(window_side(0.5, 24).unwrap(), 12);
        assert!(window_side(0.0, 24).is_err());
        assert!(window_side(f64::NAN, 24).is_err());
        assert_eq!(candidate_sides(&[1.0, 1.2, 1.4, 1.6, 1.8, 2.0], 24).unwrap(), vec![24]);
        assert_eq!(candidate_sides(&[], 24), Err(RoiError::EmptyScales));
    }

    #[test]
    fn pixel_mapping_examples() {
        let geo = GridGeometry::llava();
        let full = bbox_to_pixels(&BoundingBox { b1: 0, b2: 24 }, &geo, 672, 672).unwrap();
        assert_eq!(full, PixelRect { x: 0, y: 0, width: 672, height: 672 });
        let half = bbox_to_pixels(&BoundingBox { b1: 0, b2: 12 }, &geo, 336, 336).unwrap();
        assert_eq!(half, PixelRect { x: 0, y: 0, width: 168, height: 168 });
        let r = bbox_to_pixels(&BoundingBox { b1: 25, b2: 2 }, &geo, 1344, 672).unwrap();
        assert_eq!(r, PixelRect { x: 56, y: 28, width: 112, height: 56 });
    }

    #[test]
    fn pixel_mapping_rounds_outward() {
        // 3 px per token on a 9 px encoder frame, mapped onto a 10 px original
        let geo = GridGeometry::new(3, 9).unwrap();
        let r = bbox_to_pixels(&BoundingBox { b1: 4, b2: 1 }, &geo, 10, 10).unwrap();
        // encoder extent 3..6 scales to 3.33..6.67
        assert_eq!(r, PixelRect { x: 3, y: 3, width: 4, height: 4 });
    }

    #[test]
    fn invalid_boxes_rejected() {
        let geo = GridGeometry::new(4, 16).unwrap();
        for b in [
            BoundingBox { b1: 0, b2: 0 },
            BoundingBox { b1: 3, b2: 2 },
            BoundingBox { b1: 12, b2: 2 },
            BoundingBox { b1: 16, b2: 1 },
        ] {
            assert!(bbox_to_pixels(&b, &geo, 64, 64).is_err(), "{b:?}");
        }
        assert!(GridGeometry::new(5, 16).is_err());
    }
}
