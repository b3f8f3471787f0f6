//! Instruction prompt builders for classification and detection, and the
//! 336x336 letterbox coordinate normalization used for box annotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{Taxonomy, NO_ARTIFACTS_PHRASE};

/// Side length of the square the image is letterboxed into.
pub const LETTERBOX_SIZE: f64 = 336.0;

/// Bump when the prompt wording changes; golden files are keyed on it.
pub const PROMPT_VERSION: &str = "v1";

/// An axis-aligned box, either in pixel units or normalized to [0,1]
/// depending on context. Corners satisfy x1 < x2 and y1 < y2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite())
        {
            return Err(Error::Domain("bounding box has non-finite corners".into()));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Domain(format!(
                "degenerate bounding box [{},{},{},{}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// True when all corners lie in [0,1].
    pub fn is_normalized(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

struct Letterbox {
    scale: f64,
    pad_x: f64,
    pad_y: f64,
}

fn letterbox(width: u32, height: u32) -> Result<Letterbox> {
    if width == 0 || height == 0 {
        return Err(Error::Domain(format!(
            "image dimensions must be positive, got {}x{}",
            width, height
        )));
    }
    let (w, h) = (width as f64, height as f64);
    let scale = LETTERBOX_SIZE / w.max(h);
    Ok(Letterbox {
        scale,
        pad_x: (LETTERBOX_SIZE - w * scale) / 2.0,
        pad_y: (LETTERBOX_SIZE - h * scale) / 2.0,
    })
}

/// Map a pixel-space box into letterbox-normalized [0,1] coordinates.
///
/// The image is scaled uniformly into a 336x336 square with centered padding
/// on the short axis; corners are mapped and divided by 336.
pub fn normalize_box(bbox: &BoundingBox, width: u32, height: u32) -> Result<BoundingBox> {
    bbox.validate()?;
    let lb = letterbox(width, height)?;
    if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > width as f64 || bbox.y2 > height as f64 {
        return Err(Error::Domain(format!(
            "box [{},{},{},{}] exceeds image bounds {}x{}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2, width, height
        )));
    }
    let map_x = |x: f64| (lb.pad_x + x * lb.scale) / LETTERBOX_SIZE;
    let map_y = |y: f64| (lb.pad_y + y * lb.scale) / LETTERBOX_SIZE;
    BoundingBox::new(map_x(bbox.x1), map_y(bbox.y1), map_x(bbox.x2), map_y(bbox.y2))
}

/// Inverse of [`normalize_box`]: map a normalized box back to pixel space,
/// clipping to the image bounds. A box that lies entirely inside the
/// letterbox padding has no pixel preimage and is rejected.
pub fn denormalize_box(bbox: &BoundingBox, width: u32, height: u32) -> Result<BoundingBox> {
    bbox.validate()?;
    if !bbox.is_normalized() {
        return Err(Error::Domain(format!(
            "normalized box expected in [0,1]^4, got [{},{},{},{}]",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )));
    }
    let lb = letterbox(width, height)?;
    let unmap_x = |x: f64| (x * LETTERBOX_SIZE - lb.pad_x) / lb.scale;
    let unmap_y = |y: f64| (y * LETTERBOX_SIZE - lb.pad_y) / lb.scale;
    let x1 = unmap_x(bbox.x1).clamp(0.0, width as f64);
    let x2 = unmap_x(bbox.x2).clamp(0.0, width as f64);
    let y1 = unmap_y(bbox.y1).clamp(0.0, height as f64);
    let y2 = unmap_y(bbox.y2).clamp(0.0, height as f64);
    if x1 >= x2 || y1 >= y2 {
        return Err(Error::Domain(
            "normalized box lies entirely in the letterbox padding".into(),
        ));
    }
    BoundingBox::new(x1, y1, x2, y2)
}

fn push_options(out: &mut String, taxonomy: &Taxonomy, with_no_artifacts: bool) {
    for cat in taxonomy.categories() {
        out.push_str(&format!("{}. {}: {}\n", cat.id, cat.name, cat.explanation));
    }
    if with_no_artifacts {
        out.push_str(&format!(
            "{}. {}: The image contains none of the artifacts listed above.\n",
            taxonomy.len(),
            NO_ARTIFACTS_PHRASE
        ));
    }
}

fn artifact_answer_example(taxonomy: &Taxonomy) -> String {
    let ids: Vec<usize> = (0..taxonomy.len().min(2)).collect();
    let labels = crate::taxonomy::LabelSet::from_ids(ids).expect("taxonomy is non-empty");
    taxonomy
        .canonical_answer(&labels)
        .expect("ids come from the taxonomy")
}

/// Build the single-question classification prompt.
///
/// Layout: task description, all options with explanations, two reference
/// answers (one artifact-free, one with artifacts), then the answer commands.
/// Output is byte-identical across runs for the same taxonomy.
pub fn build_classification_prompt(taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    out.push_str("Task description:\n");
    out.push_str(
        "You are shown a single synthetic image produced by a generative model. \
         Examine it carefully and identify every kind of artifact that appears in it.\n\n",
    );
    out.push_str("Options:\n");
    push_options(&mut out, taxonomy, true);
    out.push('\n');
    out.push_str("Answer examples:\n");
    out.push_str(&format!("Answer: {}.\n", NO_ARTIFACTS_PHRASE));
    out.push_str(&format!("Answer: {}\n\n", artifact_answer_example(taxonomy)));
    out.push_str("Answer commands:\n");
    out.push_str(
        "Reply with the names of every option that applies, separated by \", \", \
         and end the reply with a period.\n",
    );
    out.push_str(&format!(
        "If the image contains no artifacts, reply exactly \"{}.\" and nothing else.\n",
        NO_ARTIFACTS_PHRASE
    ));
    out.push_str(&format!(
        "Never combine \"{}\" with any artifact option in one reply.\n",
        NO_ARTIFACTS_PHRASE
    ));
    out
}

/// Build the four-part detection prompt: artifact judgement, artifact
/// classification, artifact location, other artifacts — in that order.
pub fn build_detection_prompt(taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    out.push_str("Task description:\n");
    out.push_str(
        "You are shown a single synthetic image produced by a generative model. \
         Complete the four sub-tasks below in order, one answer line per sub-task.\n\n",
    );
    out.push_str("Sub-task 1, artifact judgement:\n");
    out.push_str("Does the image contain any artifacts? Reply \"Yes\" or \"No\".\n\n");
    out.push_str("Sub-task 2, artifact classification:\n");
    out.push_str("Identify every kind of artifact in the image, choosing from the options below.\n");
    push_options(&mut out, taxonomy, false);
    out.push_str(&format!(
        "Reply with the names of every option that applies, separated by \", \", \
         and end the reply with a period. If there are none, reply exactly \"{}.\".\n\n",
        NO_ARTIFACTS_PHRASE
    ));
    out.push_str("Sub-task 3, artifact location:\n");
    out.push_str(
        "For every artifact chosen in sub-task 2, give one bounding box in the form \
         [x1,y1,x2,y2]. Coordinates are normalized to a 336x336 letterboxed version of \
         the image, so every value lies between 0 and 1.\n\n",
    );
    out.push_str("Sub-task 4, other artifacts:\n");
    out.push_str(
        "Describe in one short caption any remaining artifact that none of the options \
         covers, or reply \"None\".\n",
    );
    out
}
