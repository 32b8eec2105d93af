//! Ensemble mask refinement and 2D segmentation metrics.
//!
//! Fine masks come from a class-agnostic segmenter, rough masks from a
//! class-aware detector. A rough instance is eroded and sampled, and each fine
//! mask hit by a sample (and mostly contained in the dilated rough region) is
//! merged into the refined instance.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use image::{RgbImage, RgbaImage};
use rand::seq::index;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MIN_AREA: usize = 10_000;
pub const DEFAULT_MIN_STABILITY: f64 = 0.8;
pub const DEFAULT_EROSION_RADIUS: usize = 5;
pub const DEFAULT_SAMPLES: usize = 200;
pub const DEFAULT_CONTAINMENT_MIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    mask: BinaryMask,
    stability: f64,
    area: usize,
}

impl CandidateMask {
    pub fn new(mask: BinaryMask, stability: f64) -> Result<Self> {
        if !stability.is_finite() {
            return Err(Error::InvalidInput(format!("stability {stability} is not finite")));
        }
        let area = mask.count();
        Ok(Self { mask, stability, area })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn stability(&self) -> f64 {
        self.stability
    }

    pub fn area(&self) -> usize {
        self.area
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Panicle,
    Label,
}

impl ClassLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Panicle => "panicle",
            ClassLabel::Label => "label",
        }
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "panicle" => Ok(ClassLabel::Panicle),
            "label" => Ok(ClassLabel::Label),
            other => Err(Error::InvalidInput(format!("unknown class label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoughInstance {
    mask: BinaryMask,
    class_label: ClassLabel,
}

impl RoughInstance {
    pub fn new(mask: BinaryMask, class_label: ClassLabel) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Empty("rough instance mask".into()));
        }
        Ok(Self { mask, class_label })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn class_label(&self) -> ClassLabel {
        self.class_label
    }
}

/// Drops candidates with area below `min_area` or stability below
/// `min_stability`. Boundary values are kept.
pub fn filter_candidates(cands: &[CandidateMask], min_area: usize, min_stability: f64) -> Vec<CandidateMask> {
    cands
        .iter()
        .filter(|c| c.area >= min_area && c.stability >= min_stability)
        .cloned()
        .collect()
}

/// Row offsets `(dy, half_width)` of the discrete disc `dx² + dy² ≤ r²`.
fn disc_rows(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r)
        .map(|dy| {
            let rem = r * r - dy * dy;
            let mut hw = (rem as f64).sqrt() as isize;
            while hw * hw > rem {
                hw -= 1;
            }
            while (hw + 1) * (hw + 1) <= rem {
                hw += 1;
            }
            (dy, hw)
        })
        .collect()
}

/// Per-row prefix sums of foreground, with out-of-range columns as background.
fn row_prefix(mask: &BinaryMask) -> Vec<u32> {
    let w = mask.width();
    let mut pre = vec![0u32; (w + 1) * mask.height()];
    for y in 0..mask.height() {
        let base = y * (w + 1);
        for x in 0..w {
            pre[base + x + 1] = pre[base + x] + mask.get(x, y) as u32;
        }
    }
    pre
}

fn row_count(pre: &[u32], w: usize, y: usize, x0: isize, x1: isize) -> u32 {
    let lo = x0.clamp(0, w as isize) as usize;
    let hi = (x1 + 1).clamp(0, w as isize) as usize;
    if hi <= lo {
        return 0;
    }
    let base = y * (w + 1);
    pre[base + hi] - pre[base + lo]
}

/// Erosion by a disc of the given radius. Pixels outside the image count as
/// background, so the border erodes too.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let rows = disc_rows(radius);
    let pre = row_prefix(mask);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let keep = rows.iter().all(|&(dy, hw)| {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    return false;
                }
                let (x0, x1) = (x as isize - hw, x as isize + hw);
                if x0 < 0 || x1 >= w as isize {
                    return false;
                }
                row_count(&pre, w, yy as usize, x0, x1) == (2 * hw + 1) as u32
            });
            out.set(x, y, keep);
        }
    }
    out
}

/// Dilation by a disc of the given radius, clipped to the image.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let rows = disc_rows(radius);
    let pre = row_prefix(mask);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                continue;
            }
            let hit = rows.iter().any(|&(dy, hw)| {
                let yy = y as isize + dy;
                yy >= 0 && yy < h as isize && row_count(&pre, w, yy as usize, x as isize - hw, x as isize + hw) > 0
            });
            out.set(x, y, hit);
        }
    }
    out
}

/// Draws `n` foreground pixels uniformly without replacement, returned in
/// row-major order. Returns every foreground pixel when `n` covers them all.
pub fn sample_mask(mask: &BinaryMask, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(Error::Empty("cannot sample an empty mask".into()));
    }
    if n >= fg.len() {
        return Ok(fg);
    }
    let mut rng = crate::seeded_rng(seed);
    let mut picked = index::sample(&mut rng, fg.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| fg[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub erosion_radius: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub containment_min: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            erosion_radius: DEFAULT_EROSION_RADIUS,
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
            containment_min: DEFAULT_CONTAINMENT_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    pub mask: BinaryMask,
    /// Indices into the fines list that were merged.
    pub matched: Vec<usize>,
    /// Set when the result fell back to the rough mask.
    pub used_rough: bool,
    pub warnings: Vec<String>,
}

/// Refines a rough instance with the fine masks it selects.
pub fn match_and_merge(rough: &RoughInstance, fines: &[CandidateMask], params: &MatchParams) -> Result<MergeResult> {
    let rmask = rough.mask();
    for f in fines {
        rmask.check_shape(f.mask())?;
    }
    if fines.is_empty() {
        return Ok(MergeResult {
            mask: rmask.clone(),
            matched: Vec::new(),
            used_rough: true,
            warnings: vec![format!(
                "no fine masks for {} instance; kept rough mask",
                rough.class_label().as_str()
            )],
        });
    }
    let mut warnings = Vec::new();
    let mut eroded = erode(rmask, params.erosion_radius);
    if eroded.is_empty() {
        warnings.push("erosion emptied the rough mask; sampled the un-eroded mask".to_string());
        eroded = rmask.clone();
    }
    let samples = sample_mask(&eroded, params.n_samples, params.seed)?;
    let grown = dilate(rmask, params.erosion_radius);

    let mut matched = Vec::new();
    let mut merged = BinaryMask::empty(rmask.width(), rmask.height())?;
    for (i, f) in fines.iter().enumerate() {
        if f.area == 0 {
            continue;
        }
        let hit = samples.iter().any(|&(x, y)| f.mask().get(x, y));
        if !hit {
            continue;
        }
        let inside = f.mask().intersection_count(&grown)?;
        if (inside as f64) / (f.area as f64) >= params.containment_min {
            merged = merged.union(f.mask())?;
            matched.push(i);
        }
    }
    if matched.is_empty() {
        warnings.push("no fine mask matched; kept rough mask".to_string());
        return Ok(MergeResult {
            mask: rmask.clone(),
            matched,
            used_rough: true,
            warnings,
        });
    }
    Ok(MergeResult {
        mask: merged,
        matched,
        used_rough: false,
        warnings,
    })
}

/// Copies RGB and sets alpha to 255 on foreground, 0 elsewhere.
pub fn apply_mask(image: &RgbImage, mask: &BinaryMask) -> Result<RgbaImage> {
    let (w, h) = image.dimensions();
    if w as usize != mask.width() || h as usize != mask.height() {
        return Err(Error::DimensionMismatch(format!(
            "image {w}x{h} vs mask {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    Ok(RgbaImage::from_fn(w, h, |x, y| {
        let [r, g, b] = image.get_pixel(x, y).0;
        let a = if mask.get(x as usize, y as usize) { 255 } else { 0 };
        image::Rgba([r, g, b, a])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    pred.check_shape(gt)?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0 };
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn seg_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegMetrics> {
    let Confusion { tp, fp, fn_ } = confusion(pred, gt)?;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // From counts directly; equal to 2PR/(P+R) whenever that is defined.
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    let iou = if tp + fp + fn_ == 0 {
        1.0
    } else {
        ratio(tp, tp + fp + fn_)
    };
    Ok(SegMetrics {
        precision,
        recall,
        f1,
        iou,
    })
}

/// Foreground pixels with at least one background 4-neighbor.
pub fn inner_boundary(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::empty(w, h).expect("nonzero mask shape");
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let edge = !mask.get_signed(xi - 1, yi)
                || !mask.get_signed(xi + 1, yi)
                || !mask.get_signed(xi, yi - 1)
                || !mask.get_signed(xi, yi + 1);
            out.set(x, y, edge);
        }
    }
    out
}

/// Jaccard index of the two inner-boundary sets; 1 when both are empty.
pub fn boundary_overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_shape(gt)?;
    let ep = inner_boundary(pred);
    let eg = inner_boundary(gt);
    let inter = ep.intersection_count(&eg)?;
    let union = ep.count() + eg.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1).unwrap()
    }

    fn brute_erode(m: &BinaryMask, r: usize) -> BinaryMask {
        let r = r as isize;
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| dx * dx + dy * dy > r * r || m.get_signed(x as isize + dx, y as isize + dy))
            })
        })
        .unwrap()
    }

    fn brute_dilate(m: &BinaryMask, r: usize) -> BinaryMask {
        let r = r as isize;
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| dx * dx + dy * dy <= r * r && m.get_signed(x as isize + dx, y as isize + dy))
            })
        })
        .unwrap()
    }

    fn random_mask(rng: &mut crate::Rng, w: usize, h: usize, p: f64) -> BinaryMask {
        BinaryMask::new(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect()).unwrap()
    }

    #[test]
    fn filter_thresholds() {
        let m = |n: usize| BinaryMask::from_fn(200, 100, |x, y| y * 200 + x < n).unwrap();
        let cands = vec![
            CandidateMask::new(m(9_999), 0.95).unwrap(),
            CandidateMask::new(m(10_000), 0.8).unwrap(),
            CandidateMask::new(m(15_000), 0.79).unwrap(),
        ];
        let kept = filter_candidates(&cands, DEFAULT_MIN_AREA, DEFAULT_MIN_STABILITY);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].area(), 10_000);
    }

    #[test]
    fn erode_square() {
        let m = rect(14, 14, 2, 2, 12, 12);
        assert_eq!(erode(&m, 0), m);
        let e = erode(&m, 2);
        assert_eq!(e, brute_erode(&m, 2));
        assert_eq!(e, rect(14, 14, 4, 4, 10, 10));
        assert!(erode(&rect(20, 20, 5, 5, 15, 8), 2).is_empty());
    }

    #[test]
    fn morphology_matches_brute_force() {
        let mut rng = crate::seeded_rng(3);
        for r in 0..5 {
            let m = random_mask(&mut rng, 23, 17, 0.8);
            assert_eq!(erode(&m, r), brute_erode(&m, r), "erode r={r}");
            let s = random_mask(&mut rng, 23, 17, 0.05);
            assert_eq!(dilate(&s, r), brute_dilate(&s, r), "dilate r={r}");
        }
    }

    #[test]
    fn sampling() {
        let m = rect(10, 10, 2, 2, 5, 5);
        assert_eq!(sample_mask(&m, 100, 1).unwrap(), m.foreground());
        let big = rect(50, 50, 0, 0, 50, 40);
        let a = sample_mask(&big, 30, 9).unwrap();
        assert_eq!(a, sample_mask(&big, 30, 9).unwrap());
        assert_eq!(a.len(), 30);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 30);
        assert!(a.iter().all(|&(x, y)| big.get(x, y)));
        assert!(sample_mask(&BinaryMask::empty(3, 3).unwrap(), 1, 0).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        // 20 pixels, draw 5: each pixel has inclusion probability 1/4.
        let m = BinaryMask::from_fn(5, 4, |_, _| true).unwrap();
        let trials = 10_000;
        let mut hits = vec![0usize; 20];
        for seed in 0..trials {
            for (x, y) in sample_mask(&m, 5, seed).unwrap() {
                hits[y * 5 + x] += 1;
            }
        }
        let p = 0.25;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() <= 3.0 * sd + 1.0, "count {h} vs {mean}");
        }
    }

    #[test]
    fn partition_merges_back_to_rough() {
        let (w, h) = (60, 40);
        let rough = rect(w, h, 10, 10, 50, 30);
        let fines: Vec<_> = (0..4)
            .map(|i| CandidateMask::new(rect(w, h, 10 + i * 10, 10, 20 + i * 10, 30), 0.9).unwrap())
            .collect();
        let inst = RoughInstance::new(rough.clone(), ClassLabel::Panicle).unwrap();
        let params = MatchParams {
            erosion_radius: 2,
            n_samples: 400,
            ..Default::default()
        };
        let out = match_and_merge(&inst, &fines, &params).unwrap();
        assert_eq!(out.mask, rough);
        assert_eq!(out.matched, vec![0, 1, 2, 3]);
    }

    #[test]
    fn containment_guard_rejects_background() {
        let (w, h) = (100, 100);
        let rough = rect(w, h, 40, 40, 50, 50);
        let background = CandidateMask::new(BinaryMask::from_fn(w, h, |_, _| true).unwrap(), 0.95).unwrap();
        let inst = RoughInstance::new(rough.clone(), ClassLabel::Label).unwrap();
        let out = match_and_merge(&inst, &[background], &MatchParams::default()).unwrap();
        assert!(out.used_rough);
        assert_eq!(out.mask, rough);
    }

    #[test]
    fn empty_fines_warns() {
        let rough = rect(10, 10, 1, 1, 9, 9);
        let inst = RoughInstance::new(rough.clone(), ClassLabel::Panicle).unwrap();
        let out = match_and_merge(&inst, &[], &MatchParams::default()).unwrap();
        assert_eq!(out.mask, rough);
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn tiny_rough_falls_back_to_uneroded() {
        let rough = rect(30, 30, 10, 10, 13, 13);
        let fine = CandidateMask::new(rect(30, 30, 9, 9, 14, 14), 0.9).unwrap();
        let inst = RoughInstance::new(rough, ClassLabel::Panicle).unwrap();
        let out = match_and_merge(&inst, std::slice::from_ref(&fine), &MatchParams::default()).unwrap();
        assert_eq!(out.mask, *fine.mask());
        assert!(out.warnings.iter().any(|w| w.contains("erosion")));
    }

    #[test]
    fn five_blobs_three_covered() {
        let (w, h) = (120, 40);
        let blob = |i: usize| rect(w, h, 5 + i * 23, 10, 20 + i * 23, 30);
        let fines: Vec<_> = (0..5).map(|i| CandidateMask::new(blob(i), 0.9).unwrap()).collect();
        let rough = rect(w, h, 3, 8, 3 * 23 + 1, 32);
        let inst = RoughInstance::new(rough, ClassLabel::Panicle).unwrap();
        let out = match_and_merge(&inst, &fines, &MatchParams::default()).unwrap();
        let expected = blob(0).union(&blob(1)).unwrap().union(&blob(2)).unwrap();
        assert_eq!(out.mask, expected);
    }

    #[test]
    fn apply_mask_alpha() {
        let img = RgbImage::from_fn(4, 3, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let checker = BinaryMask::from_fn(4, 3, |x, y| (x + y) % 2 == 0).unwrap();
        let out = apply_mask(&img, &checker).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            assert_eq!(p.0[..3], img.get_pixel(x, y).0);
            assert_eq!(p.0[3] == 255, checker.get(x as usize, y as usize));
        }
        let full = BinaryMask::from_fn(4, 3, |_, _| true).unwrap();
        assert!(apply_mask(&img, &full).unwrap().pixels().all(|p| p.0[3] == 255));
        assert!(apply_mask(&img, &BinaryMask::empty(3, 3).unwrap()).is_err());
    }

    #[test]
    fn metric_cases() {
        let a = rect(8, 8, 1, 1, 5, 5);
        let m = seg_metrics(&a, &a).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
        let b = rect(8, 8, 5, 5, 8, 8);
        let m = seg_metrics(&a, &b).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));

        let pred = BinaryMask::new(2, 2, vec![true, true, true, false]).unwrap();
        let gt = BinaryMask::new(2, 2, vec![true, true, false, true]).unwrap();
        let m = seg_metrics(&pred, &gt).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.iou, 0.5);

        let e = BinaryMask::empty(3, 3).unwrap();
        let m = seg_metrics(&e, &e).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 1.0));
        assert!(seg_metrics(&e, &a).is_err());
    }

    #[test]
    fn boundary_cases() {
        let a = rect(12, 12, 2, 2, 7, 7);
        assert_eq!(boundary_overlap(&a, &a).unwrap(), 1.0);
        let e = BinaryMask::empty(12, 12).unwrap();
        assert_eq!(boundary_overlap(&e, &a).unwrap(), 0.0);
        assert_eq!(boundary_overlap(&e, &e).unwrap(), 1.0);
        // Each 5x5 ring has 16 edge pixels; after a shift of 2 they share
        // columns 4..=6 of the top and bottom rows.
        let shifted = rect(12, 12, 4, 2, 9, 7);
        let ep = inner_boundary(&a);
        let eg = inner_boundary(&shifted);
        let inter = ep.intersection_count(&eg).unwrap();
        let expected = inter as f64 / (ep.count() + eg.count() - inter) as f64;
        assert_eq!(ep.count(), 16);
        assert_eq!(boundary_overlap(&a, &shifted).unwrap(), expected);
        assert_eq!(inter, 6);
        assert!((expected - 6.0 / 26.0).abs() < 1e-15);
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            (
                prop::collection::vec(any::<bool>(), w * h),
                prop::collection::vec(any::<bool>(), w * h),
            )
                .prop_map(move |(a, b)| (BinaryMask::new(w, h, a).unwrap(), BinaryMask::new(w, h, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn metric_symmetries((p, g) in arb_pair()) {
            let pg = seg_metrics(&p, &g).unwrap();
            let gp = seg_metrics(&g, &p).unwrap();
            prop_assert_eq!(pg.iou, gp.iou);
            prop_assert_eq!(pg.precision, gp.recall);
            prop_assert_eq!(boundary_overlap(&p, &g).unwrap(), boundary_overlap(&g, &p).unwrap());
            for v in [pg.precision, pg.recall, pg.f1, pg.iou, boundary_overlap(&p, &g).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !(p.is_empty() && g.is_empty()) {
                prop_assert!((pg.f1 - 2.0 * pg.iou / (1.0 + pg.iou)).abs() < 1e-12);
            }
        }

        #[test]
        fn erosion_is_anti_extensive((m, _) in arb_pair(), a in 0usize..3, b in 0usize..3) {
            let ea = erode(&m, a);
            prop_assert!(ea.is_subset_of(&m));
            prop_assert!(erode(&ea, b).is_subset_of(&ea));
        }

        #[test]
        fn merge_stays_inside_inputs(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = crate::seeded_rng(seed);
            let (w, h) = (30, 30);
            let blob = |rng: &mut crate::Rng| {
                let x0 = rng.random_range(0..25);
                let y0 = rng.random_range(0..25);
                let x1 = rng.random_range(x0 + 1..=30);
                let y1 = rng.random_range(y0 + 1..=30);
                rect(w, h, x0, y0, x1, y1)
            };
            let rough = blob(&mut rng);
            let fines: Vec<_> = (0..n).map(|_| CandidateMask::new(blob(&mut rng), 0.9).unwrap()).collect();
            let inst = RoughInstance::new(rough.clone(), ClassLabel::Panicle).unwrap();
            let params = MatchParams { erosion_radius: 2, seed, ..Default::default() };
            let out = match_and_merge(&inst, &fines, &params).unwrap();
            let mut all = rough;
            for f in &fines {
                all = all.union(f.mask()).unwrap();
            }
            prop_assert!(out.mask.is_subset_of(&all));
        }
    }
}
