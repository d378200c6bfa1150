//! Patch-text similarity, label assignment, sliding-window scoring and mIoU.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Label value excluded from scoring.
pub const IGNORE_LABEL: u32 = 255;

/// Category names with one unit-norm embedding row each.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingBank {
    names: Vec<String>,
    embeddings: Tensor,
}

impl TextEmbeddingBank {
    /// Validates names and row norms (within 1e-6 of 1).
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let (m, d) = embeddings.matrix("TextEmbeddingBank")?;
        if names.len() != m {
            return Err(Error::Dimension {
                op: "TextEmbeddingBank",
                axis: "categories",
                expected: names.len(),
                got: m,
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Validation(format!("duplicate category name `{n}`")));
            }
        }
        for j in 0..m {
            let norm = row_norm(&embeddings, j, d);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "embedding row {j} (`{}`) has norm {norm}, expected 1",
                    names[j]
                )));
            }
        }
        Ok(TextEmbeddingBank { names, embeddings })
    }

    /// Normalizes each row before validating.
    pub fn from_raw(names: Vec<String>, raw: &Tensor) -> Result<Self> {
        let (m, d) = raw.matrix("TextEmbeddingBank")?;
        let mut e = raw.clone();
        for j in 0..m {
            let n = row_norm(raw, j, d);
            if !(n > 0.0) {
                return Err(Error::Degenerate {
                    op: "TextEmbeddingBank",
                    location: Some(vec![j]),
                    reason: "zero embedding vector".into(),
                });
            }
            for k in 0..d {
                e[j * d + k] /= n;
            }
        }
        TextEmbeddingBank::new(names, e)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

fn row_norm(t: &Tensor, j: usize, d: usize) -> f64 {
    t.data()[j * d..(j + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `[M, H, W]` cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    values: Tensor,
}

impl ScoreVolume {
    pub fn new(values: Tensor) -> Result<Self> {
        values.chw("ScoreVolume")?;
        if let Some(i) = values.data().iter().position(|v| !(v.abs() <= 1.0 + 1e-9)) {
            return Err(Error::Validation(format!(
                "score {} at {:?} outside [-1, 1]",
                values[i],
                values.unravel(i)
            )));
        }
        Ok(ScoreVolume { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Scores and their gradient map, shared by the plain and taped paths.
fn similarity(features: &Tensor, bank: &TextEmbeddingBank) -> Result<Tensor> {
    let (d, h, w) = features.chw("patch_text_similarity")?;
    if d != bank.dim() {
        return Err(Error::Dimension {
            op: "patch_text_similarity",
            axis: "embedding dim",
            expected: bank.dim(),
            got: d,
        });
    }
    let hw = h * w;
    let m = bank.len();
    let e = bank.embeddings();
    let mut out = Tensor::zeros(&[m, h, w]);
    for p in 0..hw {
        let norm = (0..d).map(|k| features[k * hw + p].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate {
                op: "patch_text_similarity",
                location: Some(vec![p / w, p % w]),
                reason: "zero-norm patch vector".into(),
            });
        }
        for j in 0..m {
            let dot: f64 = (0..d).map(|k| features[k * hw + p] * e[j * d + k]).sum();
            out[j * hw + p] = dot / norm;
        }
    }
    Ok(out)
}

/// Cosine between every patch vector and every category embedding.
pub fn patch_text_similarity(features: &Tensor, bank: &TextEmbeddingBank) -> Result<ScoreVolume> {
    ScoreVolume::new(similarity(features, bank)?)
}

/// Records the similarity volume on a tape; the bank is constant.
pub fn similarity_on(tape: &mut Tape, features: Var, bank: &TextEmbeddingBank) -> Result<Var> {
    let f = tape.value(features).clone();
    let scores = similarity(&f, bank)?;
    let (d, h, w) = f.chw("patch_text_similarity")?;
    let hw = h * w;
    let m = bank.len();
    let e = bank.embeddings().clone();
    let s = scores.clone();
    let vjp = move |g: &Tensor| -> Result<Tensor> {
        // dS_j/dv = t_j/|v| - S_j v/|v|^2
        let mut out = Tensor::zeros(&[d, h, w]);
        for p in 0..hw {
            let norm = (0..d).map(|k| f[k * hw + p].powi(2)).sum::<f64>().sqrt();
            let mut radial = 0.0;
            for j in 0..m {
                radial += g[j * hw + p] * s[j * hw + p];
            }
            for k in 0..d {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += g[j * hw + p] * e[j * d + k];
                }
                out[k * hw + p] = (acc - radial * f[k * hw + p] / norm) / norm;
            }
        }
        Ok(out)
    };
    Ok(tape.custom(features, scores, Box::new(vjp)))
}

/// `[H, W]` integer label map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Validation(format!(
                "segmentation map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(SegmentationMap { height, width, labels })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Errors if any label other than [`IGNORE_LABEL`] is `>= num_classes`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(i) = self
            .labels
            .iter()
            .position(|&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(Error::Validation(format!(
                "label {} at ({}, {}) is not below {num_classes}",
                self.labels[i],
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }

    /// Plain-text form: `SEGMAP1`, then `height width`, then one line of
    /// space-separated labels per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("SEGMAP1\n{} {}\n", self.height, self.width);
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u32::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Tokens { text, pos: 0 };
        let (off, magic) = tokens.next_token().ok_or_else(|| fmt_err(0, "empty file"))?;
        if magic != "SEGMAP1" {
            return Err(fmt_err(off, "bad magic, expected SEGMAP1"));
        }
        let height = tokens.number("height")?;
        let width = tokens.number("width")?;
        if height == 0 || width == 0 {
            return Err(fmt_err(tokens.pos, "zero map dimension"));
        }
        let mut labels = Vec::with_capacity(height * width);
        for _ in 0..height * width {
            let v = tokens.number("label")?;
            labels.push(u32::try_from(v).map_err(|_| fmt_err(tokens.pos, "label out of range"))?);
        }
        if let Some((off, _)) = tokens.next_token() {
            return Err(fmt_err(off, "trailing data after labels"));
        }
        SegmentationMap::new(height, width, labels)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn fmt_err(offset: usize, reason: &str) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

struct Tokens<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next_token(&mut self) -> Option<(usize, &'a str)> {
        let rest = &self.text[self.pos..];
        let start = self.pos + (rest.len() - rest.trim_start().len());
        let tail = &self.text[start..];
        if tail.is_empty() {
            self.pos = self.text.len();
            return None;
        }
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        self.pos = start + len;
        Some((start, &tail[..len]))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let end = self.text.len();
        let (off, tok) = self
            .next_token()
            .ok_or_else(|| fmt_err(end, &format!("truncated: missing {what}")))?;
        tok.parse()
            .map_err(|_| fmt_err(off, &format!("invalid {what} `{tok}`")))
    }
}

/// Per-location argmax over a `[M, H, W]` volume; ties go to the lowest index.
pub fn argmax_labels(scores: &Tensor) -> Result<SegmentationMap> {
    let (m, h, w) = scores.chw("assign_labels")?;
    let hw = h * w;
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for j in 1..m {
                if scores[j * hw + p] > scores[best * hw + p] {
                    best = j;
                }
            }
            best as u32
        })
        .collect();
    SegmentationMap::new(h, w, labels)
}

pub fn assign_labels(scores: &ScoreVolume) -> SegmentationMap {
    argmax_labels(scores.values()).expect("score volume is rank 3")
}

/// Window origins along one axis; the last window is clamped to the edge.
pub fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + window >= extent {
            starts.push(extent - window);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

/// Scores every window and averages overlapping contributions per location.
pub fn sliding_window_infer(
    features: &Tensor,
    bank: &TextEmbeddingBank,
    window: usize,
    stride: usize,
) -> Result<ScoreVolume> {
    let (d, h, w) = features.chw("sliding_window_infer")?;
    if window == 0 || window > h.min(w) {
        return Err(Error::Config(format!(
            "window {window} does not fit a {h}x{w} feature grid"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::Config(format!(
            "stride {stride} must be in 1..={window}"
        )));
    }
    let m = bank.len();
    let mut acc = Tensor::zeros(&[m, h, w]);
    let mut count = vec![0u32; h * w];
    for &y0 in &window_starts(h, window, stride) {
        for &x0 in &window_starts(w, window, stride) {
            let crop = Tensor::from_fn(&[d, window, window], |i| {
                let (k, r) = (i / (window * window), i % (window * window));
                features[(k * h + y0 + r / window) * w + x0 + r % window]
            });
            let s = similarity(&crop, bank)?;
            for j in 0..m {
                for yy in 0..window {
                    for xx in 0..window {
                        acc[(j * h + y0 + yy) * w + x0 + xx] += s[(j * window + yy) * window + xx];
                    }
                }
            }
            for yy in 0..window {
                for xx in 0..window {
                    count[(y0 + yy) * w + x0 + xx] += 1;
                }
            }
        }
    }
    let hw = h * w;
    for i in 0..acc.len() {
        acc[i] /= count[i % hw] as f64;
    }
    ScoreVolume::new(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassIou {
    pub class: usize,
    pub intersection: u64,
    pub union: u64,
    /// `None` when the class is absent from both maps.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
}

impl MiouReport {
    /// `class,name,intersection,union,iou`; absent classes have an empty iou.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,name,intersection,union,iou\n");
        for c in &self.per_class {
            let name = names.get(c.class).map(String::as_str).unwrap_or("");
            let iou = c.iou.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", c.class, name, c.intersection, c.union, iou));
        }
        s.push_str(&format!("mean,,,,{}\n", self.miou));
        s
    }
}

/// `counts[gt][pred]` accumulated over any number of map pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_label: u32,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_label: u32) -> Self {
        ConfusionMatrix {
            num_classes,
            ignore_label,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &SegmentationMap, gt: &SegmentationMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Validation(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        gt.check_labels(self.num_classes)?;
        pred.check_labels(self.num_classes)?;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == self.ignore_label || p == self.ignore_label {
                continue;
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn report(&self) -> MiouReport {
        let n = self.num_classes;
        let mut per_class = Vec::with_capacity(n);
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..n {
            let inter = self.count(c, c);
            let row: u64 = (0..n).map(|k| self.count(c, k)).sum();
            let col: u64 = (0..n).map(|k| self.count(k, c)).sum();
            let union = row + col - inter;
            let iou = (union > 0).then(|| inter as f64 / union as f64);
            if let Some(v) = iou {
                sum += v;
                present += 1;
            }
            per_class.push(ClassIou {
                class: c,
                intersection: inter,
                union,
                iou,
            });
        }
        MiouReport {
            miou: if present > 0 { sum / present as f64 } else { 0.0 },
            per_class,
        }
    }
}

/// Mean IoU over classes present in either map.
pub fn miou(pred: &SegmentationMap, gt: &SegmentationMap, num_classes: usize, ignore_label: u32) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore_label);
    cm.add(pred, gt)?;
    Ok(cm.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_with, FdScheme};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    fn bank(m: usize, d: usize, r: &mut Xoshiro256PlusPlus) -> TextEmbeddingBank {
        let names = (0..m).map(|j| format!("c{j}")).collect();
        TextEmbeddingBank::from_raw(names, &Tensor::randn(&[m, d], r)).unwrap()
    }

    #[test]
    fn bank_validation() {
        let e = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(TextEmbeddingBank::new(vec!["a".into(), "a".into()], e.clone()).is_err());
        assert!(TextEmbeddingBank::new(vec!["a".into(), "b".into()], e.scale(2.0)).is_err());
        assert!(TextEmbeddingBank::new(vec!["a".into(), "b".into()], e).is_ok());
    }

    #[test]
    fn similarity_anchors_and_oracle() {
        let mut r = rng(0);
        let b = bank(5, 6, &mut r);
        let mut f = Tensor::randn(&[6, 3, 3], &mut r);
        for k in 0..6 {
            f[k * 9 + 4] = 2.5 * b.embeddings()[3 * 6 + k];
        }
        let s = patch_text_similarity(&f, &b).unwrap();
        assert!((s.values()[3 * 9 + 4] - 1.0).abs() < 1e-12);
        for j in 0..5 {
            assert!(s.values()[j * 9 + 4] <= 1.0 + 1e-12);
        }

        // Orthogonal to every row: bank spans the first two axes of a 4-dim space.
        let e = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let ob = TextEmbeddingBank::new(vec!["x".into(), "y".into()], e).unwrap();
        let g = Tensor::from_fn(&[4, 2, 2], |i| if i >= 8 { 1.0 + i as f64 } else { 0.0 });
        let s = patch_text_similarity(&g, &ob).unwrap();
        assert!(s.values().max_abs() < 1e-12);

        for _ in 0..10 {
            let b = bank(4, 5, &mut r);
            let f = Tensor::randn(&[5, 4, 4], &mut r);
            let s = patch_text_similarity(&f, &b).unwrap();
            for j in 0..4 {
                for p in 0..16 {
                    let (mut dot, mut nv) = (0.0, 0.0);
                    for k in 0..5 {
                        dot += f[k * 16 + p] * b.embeddings()[j * 5 + k];
                        nv += f[k * 16 + p] * f[k * 16 + p];
                    }
                    assert!((s.values()[j * 16 + p] - dot / nv.sqrt()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_patch_is_located() {
        let mut r = rng(1);
        let b = bank(2, 3, &mut r);
        let mut f = Tensor::randn(&[3, 2, 2], &mut r);
        for k in 0..3 {
            f[k * 4 + 2] = 0.0;
        }
        match patch_text_similarity(&f, &b) {
            Err(Error::Degenerate { location, .. }) => assert_eq!(location, Some(vec![1, 0])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn similarity_gradient_passes_check() {
        for seed in 0..3 {
            let mut r = rng(20 + seed);
            let b = bank(3, 4, &mut r);
            let f = Tensor::randn(&[4, 3, 3], &mut r);
            let w = Tensor::randn(&[3, 3, 3], &mut r);
            let rep = grad_check_with(
                "similarity",
                |t, v| {
                    let s = similarity_on(t, v[0], &b)?;
                    let wv = t.constant(w.clone());
                    let p = t.mul(s, wv)?;
                    Ok(t.sum(p))
                },
                &[("features".into(), f)],
                1e-4,
                FdScheme::Central,
            )
            .unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn labels_tie_break_and_oracle() {
        let one = ScoreVolume::new(Tensor::from_fn(&[1, 2, 2], |i| i as f64 * 0.1)).unwrap();
        assert!(assign_labels(&one).labels.iter().all(|&l| l == 0));

        let mut t = Tensor::zeros(&[4, 1, 1]);
        t[1] = 0.7;
        t[3] = 0.7;
        assert_eq!(assign_labels(&ScoreVolume::new(t).unwrap()).labels, vec![1]);

        let mut r = rng(2);
        for _ in 0..10 {
            let t = Tensor::uniform(&[5, 4, 3], 1.0, &mut r);
            let map = assign_labels(&ScoreVolume::new(t.clone()).unwrap());
            for p in 0..12 {
                let mut best = 0;
                let mut bv = f64::NEG_INFINITY;
                for j in 0..5 {
                    if t[j * 12 + p] > bv {
                        bv = t[j * 12 + p];
                        best = j;
                    }
                }
                assert_eq!(map.labels[p], best as u32);
            }
            // Positive affine transform keeps the argmax.
            let moved = argmax_labels(&t.map(|v| 3.0 * v - 7.0)).unwrap();
            assert_eq!(moved, map);
        }
    }

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(8, 4, 2), vec![0, 2, 4]);
        assert_eq!(window_starts(8, 8, 4), vec![0]);
        assert_eq!(window_starts(9, 4, 4), vec![0, 4, 5]);
        assert_eq!(window_starts(8, 4, 4), vec![0, 4]);
    }

    #[test]
    fn sliding_window_matches_enumeration_oracle() {
        let mut r = rng(3);
        let b = bank(3, 4, &mut r);
        let f = Tensor::randn(&[4, 8, 8], &mut r);
        let full = patch_text_similarity(&f, &b).unwrap();

        for (win, stride) in [(8, 8), (4, 4), (4, 2), (3, 1), (5, 3)] {
            let sw = sliding_window_infer(&f, &b, win, stride).unwrap();
            // Brute-force coverage: enumerate every window origin explicitly.
            let mut cover = vec![0u32; 64];
            let mut acc = vec![0.0; 3 * 64];
            let mut origins = Vec::new();
            let mut o = 0;
            while o + win < 8 {
                origins.push(o);
                o += stride;
            }
            origins.push(8 - win);
            origins.dedup();
            for &y0 in &origins {
                for &x0 in &origins {
                    for y in y0..y0 + win {
                        for x in x0..x0 + win {
                            cover[y * 8 + x] += 1;
                            for j in 0..3 {
                                acc[j * 64 + y * 8 + x] += full.values()[j * 64 + y * 8 + x];
                            }
                        }
                    }
                }
            }
            assert!(cover.iter().all(|&c| c >= 1));
            for i in 0..3 * 64 {
                let expect = acc[i] / cover[i % 64] as f64;
                assert!((sw.values()[i] - expect).abs() < 1e-12);
                assert!((sw.values()[i] - full.values()[i]).abs() < 1e-12);
            }
        }
        assert!(matches!(sliding_window_infer(&f, &b, 9, 1), Err(Error::Config(_))));
    }

    #[test]
    fn miou_anchors_and_oracle() {
        let gt = SegmentationMap::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        assert_eq!(miou(&gt, &gt, 3, IGNORE_LABEL).unwrap().miou, 1.0);

        let p0 = SegmentationMap::new(2, 2, vec![0; 4]).unwrap();
        let g1 = SegmentationMap::new(2, 2, vec![1; 4]).unwrap();
        let rep = miou(&p0, &g1, 2, IGNORE_LABEL).unwrap();
        assert_eq!(rep.miou, 0.0);
        assert_eq!(rep.per_class[0].iou, Some(0.0));
        assert_eq!(rep.per_class[1].iou, Some(0.0));

        let mut r = rng(4);
        for _ in 0..10 {
            let a: Vec<u32> = (0..64).map(|_| r.gen_range(0..3)).collect();
            let b: Vec<u32> = (0..64).map(|_| r.gen_range(0..3)).collect();
            let pred = SegmentationMap::new(8, 8, a.clone()).unwrap();
            let gt = SegmentationMap::new(8, 8, b.clone()).unwrap();
            let rep = miou(&pred, &gt, 3, IGNORE_LABEL).unwrap();
            let mut total = 0.0;
            let mut k = 0;
            for c in 0..3u32 {
                let inter = a.iter().zip(&b).filter(|(p, g)| **p == c && **g == c).count();
                let uni = a.iter().zip(&b).filter(|(p, g)| **p == c || **g == c).count();
                if uni > 0 {
                    total += inter as f64 / uni as f64;
                    k += 1;
                }
                assert_eq!(rep.per_class[c as usize].intersection, inter as u64);
                assert_eq!(rep.per_class[c as usize].union, uni as u64);
            }
            assert_eq!(rep.miou, total / k as f64);

            // Swapping roles transposes the confusion matrix.
            let mut cm = ConfusionMatrix::new(3, IGNORE_LABEL);
            cm.add(&pred, &gt).unwrap();
            let mut ct = ConfusionMatrix::new(3, IGNORE_LABEL);
            ct.add(&gt, &pred).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(cm.count(i, j), ct.count(j, i));
                }
            }
            // Consistent relabeling of both maps permutes the table.
            let perm = [2u32, 0, 1];
            let pp = SegmentationMap::new(8, 8, a.iter().map(|&l| perm[l as usize]).collect()).unwrap();
            let gp = SegmentationMap::new(8, 8, b.iter().map(|&l| perm[l as usize]).collect()).unwrap();
            let rp = miou(&pp, &gp, 3, IGNORE_LABEL).unwrap();
            assert!((rp.miou - rep.miou).abs() < 1e-15);
            for c in 0..3 {
                assert_eq!(rp.per_class[perm[c] as usize].iou, rep.per_class[c].iou);
            }
        }
    }

    #[test]
    fn ignore_label_and_absent_classes() {
        let gt = SegmentationMap::new(1, 4, vec![0, 0, IGNORE_LABEL, 1]).unwrap();
        let pred = SegmentationMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let rep = miou(&pred, &gt, 4, IGNORE_LABEL).unwrap();
        assert_eq!(rep.miou, 1.0);
        assert_eq!(rep.per_class[3].iou, None);
        let short = SegmentationMap::new(2, 2, vec![0; 4]).unwrap();
        assert!(matches!(miou(&short, &gt, 4, IGNORE_LABEL), Err(Error::Validation(_))));
    }

    #[test]
    fn segmap_text_round_trip_and_errors() {
        let m = SegmentationMap::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let text = m.to_text();
        assert_eq!(text, "SEGMAP1\n2 3\n0 1 2\n3 4 5\n");
        assert_eq!(SegmentationMap::from_text(&text).unwrap(), m);
        match SegmentationMap::from_text("XXXX\n1 1\n0\n") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match SegmentationMap::from_text("SEGMAP1\n2 2\n0 1\n0 x\n") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            SegmentationMap::from_text("SEGMAP1\n2 2\n0 1\n"),
            Err(Error::Format { .. })
        ));
        let json = m.to_json().unwrap();
        assert_eq!(serde_json::from_str::<SegmentationMap>(&json).unwrap(), m);
    }

    #[test]
    fn iou_csv_layout() {
        let gt = SegmentationMap::new(1, 2, vec![0, 1]).unwrap();
        let rep = miou(&gt, &gt, 3, IGNORE_LABEL).unwrap();
        let csv = rep.to_csv(&["bg".into(), "a".into(), "b".into()]);
        assert_eq!(csv, "class,name,intersection,union,iou\n0,bg,1,1,1\n1,a,1,1,1\n2,b,0,0,\nmean,,,,1\n");
    }
}
