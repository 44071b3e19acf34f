//! COCO-17 keypoint sets, the limb topology built on them, and JSON ingestion.
//!
//! Joint order (index: name):
//!
//! | idx | joint          | idx | joint          |
//! |-----|----------------|-----|----------------|
//! | 0   | nose           | 9   | left_wrist     |
//! | 1   | left_eye       | 10  | right_wrist    |
//! | 2   | right_eye      | 11  | left_hip       |
//! | 3   | left_ear       | 12  | right_hip      |
//! | 4   | right_ear      | 13  | left_knee      |
//! | 5   | left_shoulder  | 14  | right_knee     |
//! | 6   | right_shoulder | 15  | left_ankle     |
//! | 7   | left_elbow     | 16  | right_ankle    |
//! | 8   | right_elbow    |     |                |

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Joints with confidence below this are treated as missing.
pub const CONFIDENCE_THRESHOLD: f64 = 0.05;

/// Index of the mirrored joint (left <-> right); the nose maps to itself.
pub const MIRROR_JOINT: [usize; NUM_JOINTS] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Joint {
    pub const MISSING: Joint = Joint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        self.confidence >= CONFIDENCE_THRESHOLD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// One person's 17 joints in image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    joints: [Joint; NUM_JOINTS],
    width: usize,
    height: usize,
    crop_box: Option<CropBox>,
    image: String,
}

impl KeypointSet {
    pub fn new(joints: [Joint; NUM_JOINTS], width: usize, height: usize) -> Result<Self> {
        let kp = KeypointSet {
            joints,
            width,
            height,
            crop_box: None,
            image: String::new(),
        };
        kp.validate()?;
        Ok(kp)
    }

    pub fn with_crop_box(mut self, crop: Option<CropBox>) -> Result<Self> {
        if let Some(c) = crop {
            if !(c.w > 0.0 && c.h > 0.0) || c.x < 0.0 || c.y < 0.0 {
                return Err(Error::Schema(format!("crop_box {c:?} must have positive size inside the image")));
            }
        }
        self.crop_box = crop;
        Ok(self)
    }

    pub fn with_image_name(mut self, name: impl Into<String>) -> Self {
        self.image = name.into();
        self
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Schema("image width and height must be positive".into()));
        }
        for (name, j) in JOINT_NAMES.iter().zip(&self.joints) {
            if !(0.0..=1.0).contains(&j.confidence) {
                return Err(Error::Schema(format!("{name}: confidence {} outside [0, 1]", j.confidence)));
            }
            if !j.x.is_finite() || !j.y.is_finite() {
                return Err(Error::Schema(format!("{name}: non-finite coordinate")));
            }
            if j.is_valid() {
                let inside = j.x >= 0.0 && j.x < self.width as f64 && j.y >= 0.0 && j.y < self.height as f64;
                if !inside {
                    return Err(Error::Schema(format!(
                        "{name}: ({}, {}) lies outside the {}x{} image",
                        j.x, j.y, self.width, self.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn joints(&self) -> &[Joint; NUM_JOINTS] {
        &self.joints
    }

    pub fn joint(&self, idx: usize) -> Joint {
        self.joints[idx]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn crop_box(&self) -> Option<CropBox> {
        self.crop_box
    }

    pub fn image_name(&self) -> &str {
        &self.image
    }

    pub fn any_valid(&self) -> bool {
        self.joints.iter().any(Joint::is_valid)
    }

    /// Maps the joints into a `width × height` frame (independent x/y scale).
    pub fn rescaled(&self, width: usize, height: usize) -> KeypointSet {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut joints = self.joints;
        for j in &mut joints {
            j.x = (j.x * sx).min(width as f64 - 1e-6);
            j.y = (j.y * sy).min(height as f64 - 1e-6);
        }
        KeypointSet {
            joints,
            width,
            height,
            crop_box: None,
            image: self.image.clone(),
        }
    }

    /// Re-expresses the joints relative to a crop window; joints falling outside are dropped.
    pub fn cropped(&self, x: f64, y: f64, width: usize, height: usize) -> KeypointSet {
        let mut joints = self.joints;
        for j in &mut joints {
            j.x -= x;
            j.y -= y;
            let inside = j.x >= 0.0 && j.x < width as f64 && j.y >= 0.0 && j.y < height as f64;
            if !inside {
                *j = Joint::MISSING;
            }
        }
        KeypointSet {
            joints,
            width,
            height,
            crop_box: None,
            image: self.image.clone(),
        }
    }

    /// Horizontal mirror: `x -> W - 1 - x` with left/right labels swapped.
    pub fn mirrored(&self) -> KeypointSet {
        let w = self.width as f64 - 1.0;
        let joints = std::array::from_fn(|i| {
            let j = self.joints[MIRROR_JOINT[i]];
            if j.is_valid() {
                Joint { x: w - j.x, ..j }
            } else {
                j
            }
        });
        KeypointSet {
            joints,
            width: self.width,
            height: self.height,
            crop_box: self.crop_box,
            image: self.image.clone(),
        }
    }

    pub fn to_json(&self) -> Value {
        let kps: Vec<[f64; 3]> = self.joints.iter().map(|j| [j.x, j.y, j.confidence]).collect();
        serde_json::json!({
            "image": self.image,
            "width": self.width,
            "height": self.height,
            "crop_box": self.crop_box.map(|c| [c.x, c.y, c.w, c.h]),
            "keypoints": kps,
        })
    }
}

/// Parses a keypoint document.
///
/// `keypoints` is either a 17-element array of `[x, y, c]` triples (`null` marks a missing
/// joint) or an object keyed by joint name, where absent names are missing joints.
pub fn ingest_keypoints(document: &[u8]) -> Result<KeypointSet> {
    let root: Value = serde_json::from_slice(document).map_err(|e| Error::Parse {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    let obj = root.as_object().ok_or_else(|| Error::Parse {
        field: "<document>".into(),
        message: "expected an object".into(),
    })?;

    let image = match obj.get("image") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(parse_err("image", "expected a string")),
    };
    let width = dim_field(obj.get("width"), "width")?;
    let height = dim_field(obj.get("height"), "height")?;

    let crop = match obj.get("crop_box") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let nums = number_array(v, "crop_box")?;
            if nums.len() != 4 {
                return Err(parse_err("crop_box", "expected [x, y, w, h]"));
            }
            Some(CropBox {
                x: nums[0],
                y: nums[1],
                w: nums[2],
                h: nums[3],
            })
        }
    };

    let mut joints = [Joint::MISSING; NUM_JOINTS];
    match obj.get("keypoints") {
        Some(Value::Array(items)) => {
            if items.len() != NUM_JOINTS {
                return Err(Error::Schema(format!(
                    "expected {NUM_JOINTS} keypoints, found {}",
                    items.len()
                )));
            }
            for (i, item) in items.iter().enumerate() {
                joints[i] = joint_entry(item, &format!("keypoints[{i}]"))?;
            }
        }
        Some(Value::Object(map)) => {
            for (name, item) in map {
                let idx = JOINT_NAMES
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Schema(format!("unknown joint name `{name}`")))?;
                joints[idx] = joint_entry(item, &format!("keypoints.{name}"))?;
            }
        }
        Some(_) => return Err(parse_err("keypoints", "expected an array or an object")),
        None => return Err(parse_err("keypoints", "missing")),
    }

    KeypointSet::new(joints, width, height)?
        .with_crop_box(crop)
        .map(|kp| kp.with_image_name(image))
}

fn parse_err(field: &str, message: &str) -> Error {
    Error::Parse {
        field: field.into(),
        message: message.into(),
    }
}

fn dim_field(v: Option<&Value>, field: &str) -> Result<usize> {
    v.and_then(Value::as_u64)
        .filter(|&n| n > 0)
        .map(|n| n as usize)
        .ok_or_else(|| parse_err(field, "expected a positive integer"))
}

fn number_array(v: &Value, field: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| parse_err(field, "expected an array of numbers"))?
        .iter()
        .map(|n| n.as_f64().ok_or_else(|| parse_err(field, "expected a number")))
        .collect()
}

fn joint_entry(v: &Value, field: &str) -> Result<Joint> {
    if v.is_null() {
        return Ok(Joint::MISSING);
    }
    let nums = number_array(v, field)?;
    if nums.len() != 3 {
        return Err(parse_err(field, "expected [x, y, confidence]"));
    }
    Ok(Joint {
        x: nums[0],
        y: nums[1],
        confidence: nums[2],
    })
}

/// Bone / limb connectivity over the COCO-17 joints; head joints never appear.
///
/// Left/right counterparts sit at adjacent even/odd indices so that mirroring is a pairwise swap.
pub struct LimbTopology;

impl LimbTopology {
    pub const SKELETON_EDGES: [(usize, usize); 12] = [
        (5, 7),   // left upper arm
        (6, 8),   // right upper arm
        (7, 9),   // left forearm
        (8, 10),  // right forearm
        (11, 13), // left thigh
        (12, 14), // right thigh
        (13, 15), // left calf
        (14, 16), // right calf
        (5, 11),  // left torso side
        (6, 12),  // right torso side
        (5, 6),   // shoulders
        (11, 12), // hips
    ];

    /// The skeleton edges minus shoulder-shoulder and hip-hip.
    pub const PAF_LIMBS: [(usize, usize); 10] = [
        (5, 7),
        (6, 8),
        (7, 9),
        (8, 10),
        (11, 13),
        (12, 14),
        (13, 15),
        (14, 16),
        (5, 11),
        (6, 12),
    ];

    pub const ARM_LIMBS: [usize; 4] = [0, 1, 2, 3];
    pub const LEG_LIMBS: [usize; 4] = [4, 5, 6, 7];
    pub const TORSO_LIMBS: [usize; 2] = [8, 9];

    pub const NUM_SKELETONS: usize = Self::SKELETON_EDGES.len();
    pub const NUM_PAFS: usize = Self::PAF_LIMBS.len();

    /// Channel index after a horizontal flip.
    pub fn mirror_channel(idx: usize) -> usize {
        if idx < 10 {
            idx ^ 1
        } else {
            idx
        }
    }
}
