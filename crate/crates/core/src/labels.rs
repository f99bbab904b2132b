//! Label maps derived from binary ground-truth masks: exact Euclidean
//! distance transforms, signed distance fields and morphological boundaries.

use crate::error::LabelError;

/// Binary `H×W` mask, row-major, values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, LabelError> {
        if height == 0 || width == 0 {
            return Err(LabelError::EmptyGrid);
        }
        if data.len() != height * width {
            return Err(LabelError::SizeMismatch {
                expected: height * width,
                got: data.len(),
            });
        }
        let mut bad: Vec<u8> = data.iter().copied().filter(|&v| v > 1).collect();
        if !bad.is_empty() {
            bad.sort_unstable();
            bad.dedup();
            return Err(LabelError::NonBinary { values: bad });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self, LabelError> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, LabelError> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_uniform(&self) -> bool {
        let n = self.count();
        n == 0 || n == self.data.len()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// Signed distance map normalized to `[-1, 1]`: positive inside, zero on the boundary,
/// negative outside.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SdfMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }
}

/// Boundary pixels of a mask: always a subset of its foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMask(BinaryMask);

impl BoundaryMask {
    pub fn mask(&self) -> &BinaryMask {
        &self.0
    }

    pub fn into_mask(self) -> BinaryMask {
        self.0
    }
}

/// Which pixels a distance transform measures distance *to*.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceTarget {
    Foreground,
    Background,
}

/// Exact Euclidean distance from every pixel to the nearest target pixel.
///
/// Separable lower-envelope algorithm on squared distances (one pass down the
/// columns, one along the rows), linear in the pixel count. Target pixels
/// hold 0. When the target set is empty every cell holds `f64::INFINITY`.
pub fn distance_transform(mask: &BinaryMask, to: DistanceTarget) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let want = match to {
        DistanceTarget::Foreground => 1,
        DistanceTarget::Background => 0,
    };
    let mut sq: Vec<Option<f64>> = mask
        .data
        .iter()
        .map(|&v| (v == want).then_some(0.0))
        .collect();

    let n = h.max(w);
    let mut scratch = Envelope::with_capacity(n);
    let mut line: Vec<Option<f64>> = vec![None; n];
    let mut out: Vec<Option<f64>> = vec![None; n];

    for x in 0..w {
        for y in 0..h {
            line[y] = sq[y * w + x];
        }
        scratch.transform(&line[..h], &mut out[..h]);
        for y in 0..h {
            sq[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        scratch.transform(&line[..w], &mut out[..w]);
        sq[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    sq.into_iter()
        .map(|d| d.map_or(f64::INFINITY, f64::sqrt))
        .collect()
}

/// Scratch buffers for the 1-D squared distance transform
/// `d(q) = min_p (q - p)² + f(p)` over sample points with finite `f`.
struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            vertices: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }

    fn transform(&mut self, f: &[Option<f64>], d: &mut [Option<f64>]) {
        let parabola = |q: usize| -> f64 { f[q].expect("only finite samples enter the envelope") };
        let mut k: usize = 0;
        let mut any = false;
        for q in 0..f.len() {
            let Some(fq) = f[q] else { continue };
            if !any {
                any = true;
                self.vertices[0] = q;
                self.bounds[0] = f64::NEG_INFINITY;
                self.bounds[1] = f64::INFINITY;
                continue;
            }
            let qf = q as f64;
            loop {
                let v = self.vertices[k];
                let vf = v as f64;
                let s = ((fq + qf * qf) - (parabola(v) + vf * vf)) / (2.0 * qf - 2.0 * vf);
                // bounds[0] is -inf, so k never underflows
                if s <= self.bounds[k] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.vertices[k] = q;
                self.bounds[k] = s;
                self.bounds[k + 1] = f64::INFINITY;
                break;
            }
        }
        if !any {
            d.fill(None);
            return;
        }
        let mut k = 0;
        for (q, slot) in d.iter_mut().enumerate() {
            let qf = q as f64;
            while self.bounds[k + 1] < qf {
                k += 1;
            }
            let v = self.vertices[k];
            let dv = qf - v as f64;
            *slot = Some(dv * dv + parabola(v));
        }
    }
}

/// Foreground pixels with at least one background 4-neighbour; pixels beyond the
/// image edge count as background. Equivalent to the mask minus its erosion by a
/// 3×3 cross.
pub fn extract_boundary(mask: &BinaryMask) -> BoundaryMask {
    let (h, w) = (mask.height, mask.width);
    let fg = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
    };
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let eroded = fg(yi - 1, xi) && fg(yi + 1, xi) && fg(yi, xi - 1) && fg(yi, xi + 1);
            data[y * w + x] = u8::from(!eroded);
        }
    }
    BoundaryMask(BinaryMask {
        height: h,
        width: w,
        data,
    })
}

/// Normalized signed distance to the erosion boundary of `mask`.
///
/// Interior distances are divided by the largest interior distance and exterior
/// distances by the largest exterior distance, each side independently, then
/// clamped to `[-1, 1]`. An all-background mask maps to a constant -1 and an
/// all-foreground mask to a constant +1.
pub fn compute_sdf(mask: &BinaryMask) -> SdfMap {
    let (h, w) = (mask.height, mask.width);
    if mask.is_uniform() {
        let fill = if mask.count() == 0 { -1.0 } else { 1.0 };
        return SdfMap {
            height: h,
            width: w,
            data: vec![fill; h * w],
        };
    }
    let boundary = extract_boundary(mask);
    let dist = distance_transform(boundary.mask(), DistanceTarget::Foreground);
    let mut signed: Vec<f64> = (0..h * w)
        .map(|i| {
            if boundary.0.data[i] == 1 {
                0.0
            } else if mask.data[i] == 1 {
                dist[i]
            } else {
                -dist[i]
            }
        })
        .collect();
    let max_pos = signed.iter().copied().fold(0.0, f64::max);
    let max_neg = signed.iter().copied().fold(0.0, |m: f64, v| m.max(-v));
    for v in &mut signed {
        if *v > 0.0 {
            *v = (*v / max_pos).min(1.0);
        } else if *v < 0.0 {
            *v = (*v / max_neg).max(-1.0);
        }
    }
    SdfMap {
        height: h,
        width: w,
        data: signed,
    }
}

/// Ground truth for one labeled image: the mask and the two maps derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTriple {
    pub mask: BinaryMask,
    pub sdf: SdfMap,
    pub boundary: BoundaryMask,
}

impl LabelTriple {
    pub fn from_mask(mask: BinaryMask) -> Self {
        let sdf = compute_sdf(&mask);
        let boundary = extract_boundary(&mask);
        Self {
            mask,
            sdf,
            boundary,
        }
    }
}

/// Exhaustive reference implementations, quadratic in the pixel count.
///
/// These share no code with the fast paths above and back the `--check` mode
/// of label derivation.
pub mod oracle {
    use super::BinaryMask;

    /// Nearest target pixel by scanning every target pixel.
    pub fn distance_to(mask: &BinaryMask, target: u8) -> Vec<f64> {
        let (h, w) = (mask.height(), mask.width());
        let targets: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| mask.data()[y * w + x] == target)
            .collect();
        let mut out = vec![f64::INFINITY; h * w];
        for y in 0..h {
            for x in 0..w {
                let best = targets
                    .iter()
                    .map(|&(ty, tx)| {
                        let (dy, dx) = (ty as f64 - y as f64, tx as f64 - x as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                out[y * w + x] = best.sqrt();
            }
        }
        out
    }

    /// Boundary by direct neighbour inspection.
    pub fn boundary(mask: &BinaryMask) -> Vec<u8> {
        let (h, w) = (mask.height(), mask.width());
        let at = |y: i64, x: i64| -> u8 {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                0
            } else {
                mask.data()[y as usize * w + x as usize]
            }
        };
        let mut out = vec![0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if at(y, x) == 1 {
                    let touches_bg = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                        .iter()
                        .any(|&(ny, nx)| at(ny, nx) == 0);
                    out[y as usize * w + x as usize] = u8::from(touches_bg);
                }
            }
        }
        out
    }

    /// Signed distance with the same per-side normalization as [`super::compute_sdf`].
    pub fn sdf(mask: &BinaryMask) -> Vec<f64> {
        let n = mask.data().len();
        let count = mask.count();
        if count == 0 {
            return vec![-1.0; n];
        }
        if count == n {
            return vec![1.0; n];
        }
        let bnd = boundary(mask);
        let bmask = BinaryMask::new(mask.height(), mask.width(), bnd.clone()).expect("binary");
        let d = distance_to(&bmask, 1);
        let raw: Vec<f64> = (0..n)
            .map(|i| match (bnd[i], mask.data()[i]) {
                (1, _) => 0.0,
                (_, 1) => d[i],
                _ => -d[i],
            })
            .collect();
        let pos = raw.iter().filter(|v| **v > 0.0).fold(0.0, |m: f64, v| m.max(*v));
        let neg = raw.iter().filter(|v| **v < 0.0).fold(0.0, |m: f64, v| m.max(-*v));
        raw.into_iter()
            .map(|v| {
                if v > 0.0 {
                    (v / pos).min(1.0)
                } else if v < 0.0 {
                    (v / neg).max(-1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, rows: &[&str]) -> BinaryMask {
        let data = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| u8::from(c == '#')))
            .collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(matches!(BinaryMask::new(0, 3, vec![]), Err(LabelError::EmptyGrid)));
    }

    #[test]
    fn non_binary_values_are_listed() {
        let err = BinaryMask::new(1, 4, vec![0, 255, 1, 7]).unwrap_err();
        assert!(matches!(err, LabelError::NonBinary { ref values } if values == &[7, 255]));
    }

    #[test]
    fn one_dimensional_distances() {
        let m = BinaryMask::new(1, 3, vec![1, 0, 0]).unwrap();
        assert_eq!(distance_transform(&m, DistanceTarget::Foreground), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn full_target_gives_zeros() {
        let m = BinaryMask::new(4, 4, vec![1; 16]).unwrap();
        assert!(distance_transform(&m, DistanceTarget::Foreground)
            .iter()
            .all(|&d| d == 0.0));
    }

    #[test]
    fn empty_target_gives_infinity() {
        let m = BinaryMask::zeros(3, 5).unwrap();
        assert!(distance_transform(&m, DistanceTarget::Foreground)
            .iter()
            .all(|d| d.is_infinite()));
    }

    #[test]
    fn background_target_is_complement() {
        let m = mask(3, 4, &["..#.", ".##.", "...."]);
        let a = distance_transform(&m, DistanceTarget::Background);
        let b = distance_transform(&m.complement(), DistanceTarget::Foreground);
        assert_eq!(a, b);
    }

    #[test]
    fn block_boundary_is_perimeter_ring() {
        let m = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x)).unwrap();
        let b = extract_boundary(&m);
        assert_eq!(b.mask().count(), 12);
        for y in 3..5 {
            for x in 3..5 {
                assert!(!b.mask().get(y, x));
            }
        }
    }

    #[test]
    fn all_zero_mask_has_no_boundary() {
        let m = BinaryMask::zeros(5, 5).unwrap();
        assert_eq!(extract_boundary(&m).mask().count(), 0);
    }

    #[test]
    fn ring_boundary_is_its_own_boundary() {
        let m = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x)).unwrap();
        let ring = extract_boundary(&m).into_mask();
        assert_eq!(extract_boundary(&ring).into_mask(), ring);
    }

    #[test]
    fn image_edge_counts_as_background() {
        let m = BinaryMask::new(3, 3, vec![1; 9]).unwrap();
        let b = extract_boundary(&m);
        assert_eq!(b.mask().count(), 8);
        assert!(!b.mask().get(1, 1));
    }

    #[test]
    fn degenerate_sdf_is_constant() {
        let zero = BinaryMask::zeros(4, 4).unwrap();
        assert!(compute_sdf(&zero).data().iter().all(|&v| v == -1.0));
        let one = BinaryMask::new(4, 4, vec![1; 16]).unwrap();
        assert!(compute_sdf(&one).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_pixel_sdf() {
        // The lone pixel is its own boundary, so it maps to 0 and everything else is negative.
        let m = BinaryMask::from_fn(5, 5, |y, x| y == 2 && x == 2).unwrap();
        let sdf = compute_sdf(&m);
        assert_eq!(sdf.get(2, 2), 0.0);
        for (i, &v) in sdf.data().iter().enumerate() {
            if i != 12 {
                assert!(v < 0.0);
            }
        }
        assert_eq!(sdf.get(0, 0), -1.0);
        assert_eq!(sdf.get(4, 4), -1.0);
        let peak = sdf.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(peak, 1.0);
        // edge midpoint at distance 2 of max sqrt(8)
        assert!((sdf.get(0, 2) + 2.0 / 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sdf_signs_follow_regions() {
        let m = BinaryMask::from_fn(10, 10, |y, x| (2..8).contains(&y) && (3..8).contains(&x)).unwrap();
        let sdf = compute_sdf(&m);
        let bnd = extract_boundary(&m);
        for y in 0..10 {
            for x in 0..10 {
                let v = sdf.get(y, x);
                if bnd.mask().get(y, x) {
                    assert_eq!(v, 0.0);
                } else if m.get(y, x) {
                    assert!(v > 0.0 && v <= 1.0);
                } else {
                    assert!((-1.0..0.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn transforms_are_pure() {
        let m = mask(4, 5, &[".##..", "####.", ".###.", "....."]);
        assert_eq!(compute_sdf(&m).data(), compute_sdf(&m.clone()).data());
        assert_eq!(extract_boundary(&m), extract_boundary(&m));
    }
}
