//! Box overlap, the object-class salience taxonomy and per-category
//! grounding accuracy under the one-prediction-per-query protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, LabeledBox};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

const SALIENT_CREATURES: &[&str] = &[
    "person", "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
];

const SALIENT_OBJECTS: &[&str] = &[
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "bench",
    "chair",
    "couch",
    "bed",
    "dining table",
    "toilet",
    "sink",
    "refrigerator",
    "clock",
];

const INCONSPICUOUS: &[&str] = &[
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "potted plant",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "book",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

/// Reporting categories. `S = SC ∪ SO` and `A = S ∪ I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    A,
    S,
    SC,
    SO,
    I,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::A, Category::S, Category::SC, Category::SO, Category::I];

    /// The aggregate categories a leaf class contributes to, itself included.
    fn rollup(self) -> &'static [Category] {
        match self {
            Category::SC => &[Category::SC, Category::S, Category::A],
            Category::SO => &[Category::SO, Category::S, Category::A],
            Category::I => &[Category::I, Category::A],
            Category::S => &[Category::S, Category::A],
            Category::A => &[Category::A],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Argument(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SalienceTaxonomy {
    classes: BTreeMap<String, Category>,
}

impl Default for SalienceTaxonomy {
    fn default() -> Self {
        let mut classes = BTreeMap::new();
        for (list, cat) in [
            (SALIENT_CREATURES, Category::SC),
            (SALIENT_OBJECTS, Category::SO),
            (INCONSPICUOUS, Category::I),
        ] {
            for &label in list {
                classes.insert(label.to_string(), cat);
            }
        }
        Self { classes }
    }
}

impl SalienceTaxonomy {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn count(&self, category: Category) -> usize {
        self.classes
            .values()
            .filter(|&&c| c.rollup().contains(&category))
            .count()
    }

    pub fn classes(&self) -> impl Iterator<Item = (&str, Category)> {
        self.classes.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn category(&self, label: &str) -> Result<Category> {
        self.classes
            .get(label)
            .copied()
            .ok_or_else(|| Error::Argument(format!("label `{label}` is not in the taxonomy")))
    }
}

pub fn salience_category(label: &str, taxonomy: &SalienceTaxonomy) -> Result<Category> {
    taxonomy.category(label)
}

fn check_box(b: &BoundingBox) -> Result<()> {
    let finite = [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite());
    if !finite || b.is_degenerate() {
        return Err(Error::Argument(format!("degenerate box {b:?}")));
    }
    Ok(())
}

/// Intersection over union of two non-degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub count: usize,
    /// One accuracy per report threshold, in threshold order.
    pub accuracy: Vec<f64>,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub thresholds: Vec<f64>,
    pub categories: BTreeMap<Category, CategoryScore>,
}

impl GroundingReport {
    pub fn get(&self, category: Category) -> &CategoryScore {
        &self.categories[&category]
    }

    /// Accuracy at an exact report threshold.
    pub fn acc(&self, category: Category, threshold: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|&m| m == threshold)?;
        Some(self.categories[&category].accuracy[i])
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (cat, score) in &self.categories {
            out.push_str(&format!("{cat}.count\t{}\n", score.count));
            for (m, acc) in self.thresholds.iter().zip(&score.accuracy) {
                out.push_str(&format!("{cat}.acc@{m}\t{acc}\n"));
            }
            out.push_str(&format!("{cat}.mean_iou\t{}\n", score.mean_iou));
        }
        out
    }
}

/// Scores prediction `i` against query `i`. A hit needs the same label and an
/// IoU strictly above the threshold. A degenerate predicted box scores IoU 0;
/// a degenerate or unknown ground truth is an error.
pub fn grounding_accuracy(
    preds: &[LabeledBox],
    gts: &[LabeledBox],
    taxonomy: &SalienceTaxonomy,
    thresholds: &[f64],
) -> Result<GroundingReport> {
    if preds.len() != gts.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ground-truth queries",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(m) = thresholds.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Argument(format!("threshold {m} outside [0, 1]")));
    }
    let mut hits: BTreeMap<Category, Vec<usize>> =
        Category::ALL.iter().map(|&c| (c, vec![0; thresholds.len()])).collect();
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    let mut iou_sums: BTreeMap<Category, f64> = Category::ALL.iter().map(|&c| (c, 0.0)).collect();
    for (p, g) in preds.iter().zip(gts) {
        let category = taxonomy.category(&g.label)?;
        check_box(&g.bbox)?;
        let overlap = if check_box(&p.bbox).is_ok() {
            iou(&p.bbox, &g.bbox)?
        } else {
            0.0
        };
        let same = p.label == g.label;
        for &c in category.rollup() {
            *counts.get_mut(&c).unwrap() += 1;
            *iou_sums.get_mut(&c).unwrap() += overlap;
            for (h, &m) in hits.get_mut(&c).unwrap().iter_mut().zip(thresholds) {
                if same && overlap > m {
                    *h += 1;
                }
            }
        }
    }
    let categories = Category::ALL
        .iter()
        .map(|&c| {
            let n = counts[&c];
            let frac = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
            let score = CategoryScore {
                count: n,
                accuracy: hits[&c].iter().map(|&h| frac(h as f64)).collect(),
                mean_iou: frac(iou_sums[&c]),
            };
            (c, score)
        })
        .collect();
    Ok(GroundingReport {
        thresholds: thresholds.to_vec(),
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lb(label: &str, x1: f64, y1: f64, x2: f64, y2: f64) -> LabeledBox {
        LabeledBox {
            label: label.into(),
            bbox: BoundingBox::new(x1, y1, x2, y2),
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(iou(&a, &BoundingBox::new(1.0, 1.0, 1.0, 2.0)).is_err());
    }

    #[test]
    fn taxonomy_counts_and_rows() {
        let t = SalienceTaxonomy::default();
        assert_eq!(t.len(), 80);
        assert_eq!(t.count(Category::SC), 11);
        assert_eq!(t.count(Category::SO), 17);
        assert_eq!(t.count(Category::I), 52);
        assert_eq!(t.count(Category::S), 28);
        assert_eq!(t.count(Category::A), 80);
        assert_eq!(salience_category("person", &t).unwrap(), Category::SC);
        assert_eq!(salience_category("clock", &t).unwrap(), Category::SO);
        assert_eq!(salience_category("toothbrush", &t).unwrap(), Category::I);
        assert!(salience_category("unicorn", &t).is_err());
    }

    #[test]
    fn accuracy_counts_strictly_above_threshold() {
        let t = SalienceTaxonomy::default();
        let gt = lb("cat", 0.0, 0.0, 1.0, 1.0);
        // IoUs 0.6, 0.4 and 0.55 against the unit square
        let preds = vec![
            lb("cat", 0.0, 0.0, 1.0, 0.6),
            lb("cat", 0.0, 0.0, 1.0, 0.4),
            lb("cat", 0.0, 0.0, 0.55, 1.0),
        ];
        let r = grounding_accuracy(&preds, &vec![gt; 3], &t, &[0.5]).unwrap();
        assert!((r.acc(Category::SC, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.get(Category::I).count, 0);
        assert_eq!(r.get(Category::A).count, 3);
    }

    #[test]
    fn perfect_predictions() {
        let t = SalienceTaxonomy::default();
        let gts = vec![lb("person", 0.1, 0.1, 0.5, 0.5), lb("cup", 0.2, 0.3, 0.4, 0.9)];
        let r = grounding_accuracy(&gts, &gts, &t, &DEFAULT_THRESHOLDS).unwrap();
        let a = r.get(Category::A);
        assert_eq!(a.accuracy, vec![1.0; 3]);
        assert_eq!(a.mean_iou, 1.0);
    }

    #[test]
    fn count_mismatch_and_wrong_label() {
        let t = SalienceTaxonomy::default();
        let gts = vec![lb("person", 0.1, 0.1, 0.5, 0.5)];
        assert!(grounding_accuracy(&[], &gts, &t, &DEFAULT_THRESHOLDS).is_err());
        let preds = vec![lb("dog", 0.1, 0.1, 0.5, 0.5)];
        let r = grounding_accuracy(&preds, &gts, &t, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.get(Category::A).accuracy, vec![0.0; 3]);
        assert_eq!(r.get(Category::A).mean_iou, 1.0);
    }
}
