//! Axis-aligned box arithmetic: IoU, enclosing box, GIoU and anchor matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum width/height a predicted box is clamped to before GIoU.
pub const MIN_EXTENT: f64 = 1e-3;

/// Corner-form box `(x1, y1, x2, y2)` with strictly positive area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        // written so that NaN coordinates are rejected too
        if !(x2 > x1 && y2 > y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
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

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }

    /// Multiply every coordinate by `s > 0`.
    pub fn scale(&self, s: f64) -> Result<BBox> {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox> {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter / union
}

pub fn enclosing_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = enclosing_box(a, b).area();
    inter / union - (hull - union).max(0.0) / hull
}

/// GIoU of a raw predicted box against `gt` together with its gradient
/// with respect to the four predicted coordinates.
#[derive(Clone, Copy, Debug)]
pub struct GiouGrad {
    pub giou: f64,
    pub grad: [f64; 4],
    /// The prediction had to be widened to [`MIN_EXTENT`] in x or y.
    pub clamped: bool,
}

/// Evaluate GIoU for an arbitrary (possibly degenerate) prediction.
///
/// A prediction narrower than [`MIN_EXTENT`] is widened by moving its far
/// edge; the gradient of that edge is then routed to the near edge.
pub fn giou_with_grad(pred: [f64; 4], gt: &BBox) -> GiouGrad {
    let [px1, py1, mut px2, mut py2] = pred;
    let mut clamped = false;
    let clamp_x = px2 - px1 < MIN_EXTENT;
    if clamp_x {
        px2 = px1 + MIN_EXTENT;
        clamped = true;
    }
    let clamp_y = py2 - py1 < MIN_EXTENT;
    if clamp_y {
        py2 = py1 + MIN_EXTENT;
        clamped = true;
    }
    let (gx1, gy1, gx2, gy2) = (gt.x1, gt.y1, gt.x2, gt.y2);

    let pw = px2 - px1;
    let ph = py2 - py1;
    let area_p = pw * ph;
    let area_g = gt.area();

    let ix1 = px1.max(gx1);
    let ix2 = px2.min(gx2);
    let iy1 = py1.max(gy1);
    let iy2 = py2.min(gy2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let union = area_p + area_g - inter;

    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let hull = cw * ch;

    let giou = inter / union - 1.0 + union / hull;

    // d giou = dI/U - I dU/U^2 + dU/C - U dC/C^2, with dU = dAp - dI
    let g_inter_direct = 1.0 / union;
    let g_union = -inter / (union * union) + 1.0 / hull;
    let g_hull = -union / (hull * hull);
    let g_inter = g_inter_direct - g_union;
    let g_area = g_union;

    // partials of width-type quantities w.r.t. x1, x2 (same form for y)
    let d_iw = [
        if iw > 0.0 && px1 > gx1 { -1.0 } else { 0.0 },
        if iw > 0.0 && px2 < gx2 { 1.0 } else { 0.0 },
    ];
    let d_ih = [
        if ih > 0.0 && py1 > gy1 { -1.0 } else { 0.0 },
        if ih > 0.0 && py2 < gy2 { 1.0 } else { 0.0 },
    ];
    let d_cw = [
        if px1 < gx1 { -1.0 } else { 0.0 },
        if px2 > gx2 { 1.0 } else { 0.0 },
    ];
    let d_ch = [
        if py1 < gy1 { -1.0 } else { 0.0 },
        if py2 > gy2 { 1.0 } else { 0.0 },
    ];

    let gx = |k: usize, sign: f64| {
        g_inter * ih * d_iw[k] + g_area * sign * ph + g_hull * ch * d_cw[k]
    };
    let gy = |k: usize, sign: f64| {
        g_inter * iw * d_ih[k] + g_area * sign * pw + g_hull * cw * d_ch[k]
    };
    let mut grad = [gx(0, -1.0), gy(0, -1.0), gx(1, 1.0), gy(1, 1.0)];
    if clamp_x {
        grad[0] += grad[2];
        grad[2] = 0.0;
    }
    if clamp_y {
        grad[1] += grad[3];
        grad[3] = 0.0;
    }
    GiouGrad {
        giou,
        grad,
        clamped,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub is_positive: bool,
    pub iou: f64,
    pub matched_gt: Option<usize>,
}

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// Positive iff the best-overlapping ground truth has IoU strictly above
/// `threshold`. Ties go to the lowest ground-truth index.
pub fn match_box(default_box: &BBox, gts: &[BBox], threshold: f64) -> MatchResult {
    let mut best: Option<(usize, f64)> = None;
    for (i, gt) in gts.iter().enumerate() {
        let v = iou(default_box, gt);
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    match best {
        Some((i, v)) if v > threshold => MatchResult {
            is_positive: true,
            iou: v,
            matched_gt: Some(i),
        },
        Some((i, v)) => MatchResult {
            is_positive: false,
            iou: v,
            matched_gt: Some(i),
        },
        None => MatchResult {
            is_positive: false,
            iou: 0.0,
            matched_gt: None,
        },
    }
}

/// Affine offset parameterisation relative to an anchor box.
///
/// `t = (dx, dy, dw, dh)` decodes to centre `(acx + dx*cv*aw, acy + dy*cv*ah)`
/// and size `(aw*exp(dw*sv), ah*exp(dh*sv))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub center_variance: f64,
    pub size_variance: f64,
}

/// Bound on `dw*sv` and `dh*sv` so `exp` stays finite.
pub const MAX_LOG_SCALE: f64 = 4.0;

impl Default for BoxCoder {
    fn default() -> Self {
        Self {
            center_variance: 0.1,
            size_variance: 0.2,
        }
    }
}

impl BoxCoder {
    pub fn decode(&self, anchor: &BBox, t: [f64; 4]) -> [f64; 4] {
        self.decode_with_jacobian(anchor, t).0
    }

    /// Decoded corners plus `d corner / d t` as (centre part, size part):
    /// x1 and x2 both move by `cgx` per unit `t[0]`; x1 moves `-sgx` and x2
    /// `+sgx` per unit `t[2]` (same for y).
    pub fn decode_with_jacobian(&self, anchor: &BBox, t: [f64; 4]) -> ([f64; 4], [f64; 4]) {
        let (acx, acy) = anchor.center();
        let aw = anchor.width();
        let ah = anchor.height();
        let cx = acx + t[0] * self.center_variance * aw;
        let cy = acy + t[1] * self.center_variance * ah;
        let lw = t[2] * self.size_variance;
        let lh = t[3] * self.size_variance;
        let (w, dw) = if lw.abs() > MAX_LOG_SCALE {
            (aw * lw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(), 0.0)
        } else {
            let w = aw * lw.exp();
            (w, 0.5 * w * self.size_variance)
        };
        let (h, dh) = if lh.abs() > MAX_LOG_SCALE {
            (ah * lh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(), 0.0)
        } else {
            let h = ah * lh.exp();
            (h, 0.5 * h * self.size_variance)
        };
        (
            [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h],
            [
                self.center_variance * aw,
                self.center_variance * ah,
                dw,
                dh,
            ],
        )
    }

    pub fn encode(&self, anchor: &BBox, target: &BBox) -> [f64; 4] {
        let (acx, acy) = anchor.center();
        let (gcx, gcy) = target.center();
        [
            (gcx - acx) / (self.center_variance * anchor.width()),
            (gcy - acy) / (self.center_variance * anchor.height()),
            (target.width() / anchor.width()).ln() / self.size_variance,
            (target.height() / anchor.height()).ln() / self.size_variance,
        ]
    }
}
