//! Box prompts from predicted masks: connected-component labelling by
//! breadth-first search, largest-component filtering, box extraction, and the
//! quality / degradation helpers used by prompt sensitivity studies.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl Default for Connectivity {
    fn default() -> Self {
        Connectivity::Four
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Config(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Inclusive, axis-aligned pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBoxPrompt {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBoxPrompt {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        Self { row_min, col_min, row_max, col_max }
    }

    /// The box covering a whole `height x width` image.
    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height - 1, width - 1)
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.row_min > self.row_max || self.col_min > self.col_max || self.row_max >= height || self.col_max >= width
        {
            return Err(Error::InvalidInput(format!("box {self:?} is not valid inside a {height}x{width} image")));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> usize {
        let rows = self.row_max.min(other.row_max) as isize - self.row_min.max(other.row_min) as isize + 1;
        let cols = self.col_max.min(other.col_max) as isize - self.col_min.max(other.col_min) as isize + 1;
        (rows.max(0) * cols.max(0)) as usize
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    /// Map the box between image resolutions, keeping its covered extent.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let map = |v: usize, edge: bool, src: usize, dst: usize| -> usize {
            let pos = (v + edge as usize) as f64 * dst as f64 / src as f64;
            if edge {
                (pos.ceil() as usize).clamp(1, dst) - 1
            } else {
                (pos.floor() as usize).min(dst - 1)
            }
        };
        let r0 = map(self.row_min, false, from.0, to.0);
        let c0 = map(self.col_min, false, from.1, to.1);
        Self::new(r0, c0, map(self.row_max, true, from.0, to.0).max(r0), map(self.col_max, true, from.1, to.1).max(c0))
    }
}

/// Foreground labels (`0` = background, components numbered from 1 in
/// row-major seed order) and the size of each component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    /// `sizes[k]` is the pixel count of label `k + 1`.
    pub sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn component_mask(&self, label: u32) -> SegmentationMask {
        SegmentationMask::from_vec(self.height, self.width, self.labels.iter().map(|&l| l == label).collect())
            .expect("labeling dimensions")
    }
}

pub fn connected_components(mask: &SegmentationMask, connectivity: Connectivity) -> ComponentLabeling {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..h * w {
        if !mask.data()[seed] || labels[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[seed] = label;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if mask.data()[q] && labels[q] == 0 {
                    labels[q] = label;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    ComponentLabeling { height: h, width: w, labels, sizes }
}

/// Keep only the largest component; ties go to the component seeded first in
/// row-major order.
pub fn largest_component(mask: &SegmentationMask, connectivity: Connectivity) -> SegmentationMask {
    let lab = connected_components(mask, connectivity);
    let mut best: Option<(usize, usize)> = None;
    for (k, &s) in lab.sizes.iter().enumerate() {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((k, s));
        }
    }
    match best {
        None => SegmentationMask::empty(mask.height(), mask.width()),
        Some((k, _)) => lab.component_mask(k as u32 + 1),
    }
}

/// Tight inclusive extents of the foreground grown by `padding` and clipped
/// to the image; `None` for an empty mask.
pub fn bbox_from_mask(mask: &SegmentationMask, padding: usize) -> Option<BoundingBoxPrompt> {
    let mut it = mask.foreground();
    let (r, c) = it.next()?;
    let mut b = BoundingBoxPrompt::new(r, c, r, c);
    for (r, c) in it {
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    b.row_min = b.row_min.saturating_sub(padding);
    b.col_min = b.col_min.saturating_sub(padding);
    b.row_max = (b.row_max + padding).min(mask.height() - 1);
    b.col_max = (b.col_max + padding).min(mask.width() - 1);
    Some(b)
}

pub fn generate_prompt(raw: &SegmentationMask, connectivity: Connectivity, padding: usize) -> Option<BoundingBoxPrompt> {
    bbox_from_mask(&largest_component(raw, connectivity), padding)
}

/// Rescale a box about its centre, shift it by uniform integer offsets in
/// `[-shift_px, shift_px]` (rows first, then columns), and clip it to
/// `bounds = (height, width)`. The result always covers at least one pixel.
pub fn jitter_prompt<R: Rng + ?Sized>(
    b: &BoundingBoxPrompt,
    scale_factor: f64,
    shift_px: usize,
    rng: &mut R,
    bounds: (usize, usize),
) -> BoundingBoxPrompt {
    let s = shift_px as i64;
    let dr = rng.random_range(-s..=s) as f64;
    let dc = rng.random_range(-s..=s) as f64;
    let axis = |lo: usize, hi: usize, shift: f64, limit: usize| -> (usize, usize) {
        // pixel-edge coordinates: the box spans [lo, hi + 1)
        let centre = (lo + hi + 1) as f64 / 2.0 + shift;
        let half = (hi + 1 - lo) as f64 / 2.0 * scale_factor;
        let start = (centre - half).round();
        let end = (centre + half).round().max(start + 1.0);
        let clip = |v: f64| v.clamp(0.0, (limit - 1) as f64) as usize;
        (clip(start), clip(end - 1.0))
    };
    let (row_min, row_max) = axis(b.row_min, b.row_max, dr, bounds.0);
    let (col_min, col_max) = axis(b.col_min, b.col_max, dc, bounds.1);
    BoundingBoxPrompt { row_min, col_min, row_max, col_max }
}

/// IoU between `b` and the tight box of the ground truth.
pub fn prompt_quality(b: &BoundingBoxPrompt, gt: &SegmentationMask) -> Result<f64> {
    let gt_box = bbox_from_mask(gt, 0).ok_or(Error::UndefinedQuality)?;
    Ok(b.iou(&gt_box))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub image_id: String,
    pub bbox: BoundingBoxPrompt,
    pub quality: Option<f64>,
}

/// Table of one box per image, stored as CSV with columns
/// `image_id,row_min,col_min,row_max,col_max[,quality]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptTable {
    pub records: Vec<PromptRecord>,
    /// How many records fell back to the full-image box.
    pub fallbacks: usize,
}

impl PromptTable {
    pub fn has_quality(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.quality.is_some())
    }

    pub fn get(&self, image_id: &str) -> Option<&PromptRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
        let with_q = self.has_quality();
        let mut header = vec!["image_id", "row_min", "col_min", "row_max", "col_max"];
        if with_q {
            header.push("quality");
        }
        w.write_record(&header).map_err(csv_error(path))?;
        for r in &self.records {
            let b = r.bbox;
            let mut row = vec![
                r.image_id.clone(),
                b.row_min.to_string(),
                b.col_min.to_string(),
                b.row_max.to_string(),
                b.col_max.to_string(),
            ];
            if with_q {
                row.push(format!("{:.6}", r.quality.unwrap_or(f64::NAN)));
            }
            w.write_record(&row).map_err(csv_error(path))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(csv_error(path))?;
        let header = rd.headers().map_err(csv_error(path))?.clone();
        let expected = ["image_id", "row_min", "col_min", "row_max", "col_max"];
        if header.len() < 5 || header.iter().take(5).ne(expected) {
            return Err(Error::Parse { path: path.into(), message: format!("unexpected prompt header {header:?}") });
        }
        let with_q = header.get(5) == Some("quality");
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row.map_err(csv_error(path))?;
            let num = |i: usize| -> Result<usize> {
                row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                    path: path.into(),
                    message: format!("bad integer in column {i} of {row:?}"),
                })
            };
            let quality = if with_q { row.get(5).and_then(|v| v.parse().ok()) } else { None };
            records.push(PromptRecord {
                image_id: row.get(0).unwrap_or_default().to_string(),
                bbox: BoundingBoxPrompt::new(num(1)?, num(2)?, num(3)?, num(4)?),
                quality,
            });
        }
        Ok(Self { records, fallbacks: 0 })
    }
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse { path: path.into(), message: e.to_string() }
}

/// Batch mode: one prompt per mask image in `mask_dir` (sorted by file
/// name). When `gt_dir` holds masks with the same file names, the quality
/// column is filled. Empty predictions fall back to the full-image box.
pub fn prompts_from_mask_dir(
    mask_dir: &Path,
    gt_dir: Option<&Path>,
    connectivity: Connectivity,
    padding: usize,
) -> Result<PromptTable> {
    let mut table = PromptTable::default();
    for path in crate::data::list_pngs(mask_dir)? {
        let mask = crate::data::read_mask_png(&path)?;
        let id = crate::data::stem(&path);
        let bbox = generate_prompt(&mask, connectivity, padding).unwrap_or_else(|| {
            table.fallbacks += 1;
            BoundingBoxPrompt::full(mask.height(), mask.width())
        });
        let quality = match gt_dir {
            Some(dir) => {
                let gt = crate::data::read_mask_png(&dir.join(path.file_name().expect("png file name")))?;
                Some(prompt_quality(&bbox, &gt)?)
            }
            None => None,
        };
        table.records.push(PromptRecord { image_id: id, bbox, quality });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&str]) -> SegmentationMask {
        let h = rows.len();
        let w = rows[0].len();
        SegmentationMask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    /// Recursive flood fill, independent of the queue-based labelling.
    fn flood_oracle(mask: &SegmentationMask, conn: Connectivity) -> Vec<u32> {
        fn fill(m: &SegmentationMask, conn: Connectivity, lab: &mut [u32], r: isize, c: isize, l: u32) {
            let (h, w) = (m.height() as isize, m.width() as isize);
            if r < 0 || c < 0 || r >= h || c >= w {
                return;
            }
            let i = (r * w + c) as usize;
            if !m.data()[i] || lab[i] != 0 {
                return;
            }
            lab[i] = l;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let diag = dr != 0 && dc != 0;
                    if (dr == 0 && dc == 0) || (diag && conn == Connectivity::Four) {
                        continue;
                    }
                    fill(m, conn, lab, r + dr, c + dc, l);
                }
            }
        }
        let mut lab = vec![0; mask.data().len()];
        let mut next = 0;
        for i in 0..lab.len() {
            if mask.data()[i] && lab[i] == 0 {
                next += 1;
                fill(mask, conn, &mut lab, (i / mask.width()) as isize, (i % mask.width()) as isize, next);
            }
        }
        lab
    }

    fn equivalent(a: &[u32], b: &[u32]) -> bool {
        use std::collections::HashMap;
        let mut fwd = HashMap::new();
        let mut bwd = HashMap::new();
        a.iter().zip(b).all(|(&x, &y)| {
            (x == 0) == (y == 0) && *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x
        })
    }

    #[test]
    fn empty_and_full_masks() {
        let e = SegmentationMask::empty(5, 4);
        assert_eq!(connected_components(&e, Connectivity::Four).count(), 0);
        let f = SegmentationMask::full(5, 4);
        let l = connected_components(&f, Connectivity::Four);
        assert_eq!(l.sizes, vec![20]);
    }

    #[test]
    fn all_3x3_masks_match_flood_fill() {
        for bits in 0u32..512 {
            let m = SegmentationMask::from_fn(3, 3, |r, c| bits >> (r * 3 + c) & 1 == 1);
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let l = connected_components(&m, conn);
                assert!(equivalent(&l.labels, &flood_oracle(&m, conn)), "bits {bits:09b} {conn:?}");
                assert_eq!(l.sizes.iter().sum::<usize>(), m.count());
            }
        }
    }

    #[test]
    fn random_16x16_masks_match_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let m = SegmentationMask::from_fn(16, 16, |_, _| rng.random_bool(0.45));
            for conn in [Connectivity::Four, Connectivity::Eight] {
                assert!(equivalent(&connected_components(&m, conn).labels, &flood_oracle(&m, conn)));
            }
        }
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = mask_from(&["#.", ".#"]);
        assert_eq!(connected_components(&m, Connectivity::Four).count(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).count(), 1);
    }

    #[test]
    fn largest_keeps_strict_maximum() {
        let m = mask_from(&["###..", "##...", ".....", "...##", "....#"]);
        let out = largest_component(&m, Connectivity::Four);
        assert_eq!(out.count(), 5);
        assert!(out.get(0, 0) && !out.get(3, 3));
    }

    #[test]
    fn largest_tie_keeps_first_seed() {
        let m = mask_from(&["..##", "....", "##.."]);
        let out = largest_component(&m, Connectivity::Four);
        assert!(out.get(0, 2) && out.get(0, 3) && !out.get(2, 0));
    }

    #[test]
    fn largest_of_single_component_is_identity_and_idempotent() {
        let m = mask_from(&[".##.", "####", ".#.."]);
        let once = largest_component(&m, Connectivity::Four);
        assert_eq!(once, m);
        let noisy = mask_from(&["#...#", ".....", ".###.", ".###.", "#...."]);
        let a = largest_component(&noisy, Connectivity::Eight);
        assert_eq!(largest_component(&a, Connectivity::Eight), a);
    }

    #[test]
    fn box_extents() {
        let mut single = SegmentationMask::empty(10, 10);
        single.set(3, 7, true);
        assert_eq!(bbox_from_mask(&single, 0), Some(BoundingBoxPrompt::new(3, 7, 3, 7)));
        let l = SegmentationMask::from_fn(6, 6, |r, c| [(1, 1), (1, 2), (4, 1)].contains(&(r, c)));
        assert_eq!(bbox_from_mask(&l, 0), Some(BoundingBoxPrompt::new(1, 1, 4, 2)));
        assert_eq!(bbox_from_mask(&SegmentationMask::full(32, 32), 5), Some(BoundingBoxPrompt::full(32, 32)));
        assert_eq!(bbox_from_mask(&SegmentationMask::empty(4, 4), 0), None);
    }

    #[test]
    fn prompt_ignores_speckle() {
        let mut m = SegmentationMask::from_fn(20, 20, |r, c| (5..12).contains(&r) && (6..14).contains(&c));
        m.set(0, 0, true);
        m.set(19, 18, true);
        m.set(2, 17, true);
        assert_eq!(generate_prompt(&m, Connectivity::Four, 0), Some(BoundingBoxPrompt::new(5, 6, 11, 13)));
        assert_eq!(generate_prompt(&SegmentationMask::empty(4, 4), Connectivity::Four, 0), None);
        let clean = SegmentationMask::from_fn(9, 9, |r, c| (r as i32 - 4).pow(2) + (c as i32 - 4).pow(2) <= 6);
        assert_eq!(generate_prompt(&clean, Connectivity::Four, 0), bbox_from_mask(&clean, 0));
    }

    #[test]
    fn jitter_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = BoundingBoxPrompt::new(10, 12, 19, 17);
        assert_eq!(jitter_prompt(&b, 1.0, 0, &mut rng, (64, 64)), b);
        let centred = BoundingBoxPrompt::new(24, 24, 39, 39);
        let big = jitter_prompt(&centred, 2.0, 0, &mut rng, (64, 64));
        assert_eq!(big, BoundingBoxPrompt::new(16, 16, 47, 47));
        assert_eq!(big.height(), 2 * centred.height());
        let mut small = BoundingBoxPrompt::new(4, 4, 5, 5);
        for _ in 0..6 {
            small = jitter_prompt(&small, 0.5, 0, &mut rng, (16, 16));
            assert!(small.height() >= 1 && small.width() >= 1);
            assert!(small.validate(16, 16).is_ok());
        }
    }

    #[test]
    fn jitter_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let b = BoundingBoxPrompt::new(rng.random_range(0..30), rng.random_range(0..30), 30, 31);
            let j = jitter_prompt(&b, rng.random_range(0.2..3.0), 12, &mut rng, (32, 32));
            assert!(j.validate(32, 32).is_ok(), "{j:?}");
        }
    }

    #[test]
    fn quality_cases() {
        let gt = SegmentationMask::from_fn(32, 32, |r, c| (5..15).contains(&r) && (5..15).contains(&c));
        let tight = BoundingBoxPrompt::new(5, 5, 14, 14);
        assert_eq!(prompt_quality(&tight, &gt).unwrap(), 1.0);
        assert_eq!(prompt_quality(&BoundingBoxPrompt::new(20, 20, 25, 25), &gt).unwrap(), 0.0);
        let shifted = BoundingBoxPrompt::new(5, 10, 14, 19);
        assert!((prompt_quality(&shifted, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(prompt_quality(&tight, &SegmentationMask::empty(32, 32)), Err(Error::UndefinedQuality)));
    }

    #[test]
    fn rescale_preserves_full_and_covers_extent() {
        assert_eq!(BoundingBoxPrompt::full(64, 64).rescale((64, 64), (128, 128)), BoundingBoxPrompt::full(128, 128));
        let b = BoundingBoxPrompt::new(10, 20, 30, 40);
        assert_eq!(b.rescale((64, 64), (128, 128)), BoundingBoxPrompt::new(20, 40, 61, 81));
        assert_eq!(b.rescale((64, 64), (64, 64)), b);
    }

    #[test]
    fn prompt_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let t = PromptTable {
            records: vec![
                PromptRecord { image_id: "a".into(), bbox: BoundingBoxPrompt::new(1, 2, 3, 4), quality: Some(0.5) },
                PromptRecord { image_id: "b".into(), bbox: BoundingBoxPrompt::new(0, 0, 9, 9), quality: Some(1.0) },
            ],
            fallbacks: 0,
        };
        t.write_csv(&path).unwrap();
        assert_eq!(PromptTable::read_csv(&path).unwrap(), t);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("image_id,row_min,col_min,row_max,col_max,quality"));

        let no_q = PromptTable {
            records: vec![PromptRecord { image_id: "c".into(), bbox: BoundingBoxPrompt::new(1, 1, 1, 1), quality: None }],
            fallbacks: 1,
        };
        no_q.write_csv(&path).unwrap();
        assert!(!std::fs::read_to_string(&path).unwrap().contains("quality"));
    }
}
