//! Grayscale image to 8-connected grid graph conversion.
//!
//! Vertices are numbered row-major from the top-left pixel. Edges are
//! undirected and unweighted, one per horizontally, vertically or
//! diagonally adjacent pixel pair. Pooled layers live on coarser grids
//! built by [`coarsen_grid`]; the chain of [`PixelMap`]s recorded along the
//! way is what [`vertex_to_pixels`] walks back down to input pixels.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Image {
            height,
            width,
            values,
        })
    }

    /// Builds an image from 8-bit samples, dividing by 255.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Quantizes back to 8 bits (round to nearest).
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Compressed neighbor lists, one sorted run per vertex, self excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    fn grid(height: usize, width: usize) -> Self {
        let mut offsets = Vec::with_capacity(height * width + 1);
        let mut targets = Vec::with_capacity(height * width * 8);
        offsets.push(0);
        for r in 0..height {
            for c in 0..width {
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let nr = r as isize + dr;
                        let nc = c as isize + dc;
                        if nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width {
                            targets.push(nr as usize * width + nc as usize);
                        }
                    }
                }
                offsets.push(targets.len());
            }
        }
        Adjacency { offsets, targets }
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, vertex: usize) -> &[usize] {
        &self.targets[self.offsets[vertex]..self.offsets[vertex + 1]]
    }
}

/// Vertex to pixel bookkeeping for one grid in a pooling chain.
///
/// For the input grid `stride == 1` and the parent dims equal the grid's own
/// dims. For a coarsened grid, vertex `(r, c)` covers the parent window whose
/// top-left corner is `(r * stride, c * stride)`, clipped at the border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub parent_height: usize,
    pub parent_width: usize,
}

impl PixelMap {
    pub fn identity(height: usize, width: usize) -> Self {
        PixelMap {
            height,
            width,
            stride: 1,
            parent_height: height,
            parent_width: width,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel_of(&self, vertex: usize) -> (usize, usize) {
        (vertex / self.width, vertex % self.width)
    }

    pub fn vertex_of(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn window_origin(&self, vertex: usize) -> (usize, usize) {
        let (r, c) = self.pixel_of(vertex);
        (r * self.stride, c * self.stride)
    }

    /// Half-open row and column ranges this vertex covers in the parent grid.
    pub fn parent_window(&self, vertex: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (r0, c0) = self.window_origin(vertex);
        (
            r0..(r0 + self.stride).min(self.parent_height),
            c0..(c0 + self.stride).min(self.parent_width),
        )
    }
}

/// Image-derived 8-connected grid graph with per-vertex features.
#[derive(Debug, Clone)]
pub struct GridGraph {
    height: usize,
    width: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    pixel_map: PixelMap,
    adjacency: Arc<Adjacency>,
}

impl GridGraph {
    fn with_topology(pixel_map: PixelMap, features: Tensor) -> Self {
        let (height, width) = (pixel_map.height, pixel_map.width);
        let adjacency = Adjacency::grid(height, width);
        let mut edges = Vec::with_capacity(4 * height * width);
        for v in 0..height * width {
            edges.extend(adjacency.neighbors(v).iter().filter(|&&u| u > v).map(|&u| (v, u)));
        }
        GridGraph {
            height,
            width,
            edges,
            features,
            pixel_map,
            adjacency: Arc::new(adjacency),
        }
    }

    /// Wraps an arbitrary multi-channel feature matrix (rows = `height * width`).
    pub fn from_features(height: usize, width: usize, features: Tensor) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("grid must be at least 1x1".into()));
        }
        if features.rank() != 2 || features.rows() != height * width || features.cols() == 0 {
            return Err(Error::Shape(format!(
                "features {:?} do not fit a {height}x{width} grid",
                features.shape()
            )));
        }
        Ok(Self::with_topology(PixelMap::identity(height, width), features))
    }

    pub fn num_vertices(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn pixel_map(&self) -> &PixelMap {
        &self.pixel_map
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        &self.adjacency
    }

    pub fn degree(&self, vertex: usize) -> usize {
        self.adjacency.neighbors(vertex).len()
    }

    /// In-bounds 8-neighborhood of `vertex`, row-major, self excluded.
    pub fn neighbors(&self, vertex: usize) -> Result<&[usize]> {
        if vertex >= self.num_vertices() {
            return Err(Error::InvalidInput(format!(
                "vertex {vertex} out of range for {} vertices",
                self.num_vertices()
            )));
        }
        Ok(self.adjacency.neighbors(vertex))
    }
}

/// One vertex per pixel, channel 0 = grayscale intensity.
pub fn build_grid_graph(image: &Image) -> Result<GridGraph> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let features = Tensor::new(vec![image.height * image.width, 1], image.values.clone())?;
    Ok(GridGraph::with_topology(
        PixelMap::identity(image.height, image.width),
        features,
    ))
}

/// Free function form of [`GridGraph::neighbors`].
pub fn neighbors(graph: &GridGraph, vertex: usize) -> Result<Vec<usize>> {
    graph.neighbors(vertex).map(<[usize]>::to_vec)
}

/// Number of coarse cells along one axis for window size `s` (partial border windows count).
pub fn coarse_len(len: usize, s: usize) -> usize {
    len.div_ceil(s)
}

/// Grid of `ceil(H/s) x ceil(W/s)` vertices with fresh 8-neighborhood edges.
///
/// Features are max-pooled per window so the result is still a complete
/// graph; the model pools its own activations separately.
pub fn coarsen_grid(graph: &GridGraph, s: usize) -> Result<GridGraph> {
    if s == 0 {
        return Err(Error::InvalidInput("pool window size must be >= 1".into()));
    }
    let pixel_map = PixelMap {
        height: coarse_len(graph.height, s),
        width: coarse_len(graph.width, s),
        stride: s,
        parent_height: graph.height,
        parent_width: graph.width,
    };
    let channels = graph.channels();
    let fine = graph.features.data();
    let mut pooled = Vec::with_capacity(pixel_map.num_vertices() * channels);
    for v in 0..pixel_map.num_vertices() {
        let (rows, cols) = pixel_map.parent_window(v);
        for ch in 0..channels {
            let mut best = f64::NEG_INFINITY;
            for r in rows.clone() {
                for c in cols.clone() {
                    best = best.max(fine[(r * graph.width + c) * channels + ch]);
                }
            }
            pooled.push(best);
        }
    }
    let features = Tensor::new(vec![pixel_map.num_vertices(), channels], pooled)?;
    Ok(GridGraph::with_topology(pixel_map, features))
}

/// Checks that `chain` is a consistent input-first sequence of pooled grids.
pub fn check_chain(chain: &[PixelMap]) -> Result<()> {
    let first = chain
        .first()
        .ok_or_else(|| Error::Integrity("empty pixel map chain".into()))?;
    if first.stride != 1 || first.parent_height != first.height || first.parent_width != first.width {
        return Err(Error::Integrity(
            "chain must start at an input-resolution grid".into(),
        ));
    }
    for (level, pair) in chain.windows(2).enumerate() {
        let (fine, coarse) = (&pair[0], &pair[1]);
        if coarse.stride == 0
            || coarse.parent_height != fine.height
            || coarse.parent_width != fine.width
            || coarse_len(fine.height, coarse.stride) != coarse.height
            || coarse_len(fine.width, coarse.stride) != coarse.width
        {
            return Err(Error::Integrity(format!(
                "grid {} ({}x{}, s={}) does not coarsen grid {} ({}x{})",
                level + 1,
                coarse.height,
                coarse.width,
                coarse.stride,
                level,
                fine.height,
                fine.width
            )));
        }
    }
    Ok(())
}

/// Input-resolution receptive window of a vertex on the last grid of `chain`.
///
/// Returned coordinates are sorted row-major and never empty.
pub fn vertex_to_pixels(chain: &[PixelMap], coarse_vertex: usize) -> Result<Vec<(usize, usize)>> {
    check_chain(chain)?;
    let last = chain.last().expect("checked non-empty");
    if coarse_vertex >= last.num_vertices() {
        return Err(Error::InvalidInput(format!(
            "vertex {coarse_vertex} out of range for {} vertices",
            last.num_vertices()
        )));
    }
    let (r, c) = last.pixel_of(coarse_vertex);
    let (mut rows, mut cols) = (r..r + 1, c..c + 1);
    for map in chain.iter().rev() {
        rows = rows.start * map.stride..(rows.end * map.stride).min(map.parent_height);
        cols = cols.start * map.stride..(cols.end * map.stride).min(map.parent_width);
    }
    Ok(rows
        .flat_map(|r| cols.clone().map(move |c| (r, c)))
        .collect())
}
