//! Box geometry shared by the losses, the pipeline and the metrics.
//!
//! Boxes are plain `[f64; 4]` arrays, either `(cx, cy, w, h)` or
//! `(x1, y1, x2, y2)`; function names say which.

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    [
        0.5 * (b[0] + b[2]),
        0.5 * (b[1] + b[3]),
        b[2] - b[0],
        b[3] - b[1],
    ]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

/// Intersection over union of two `xyxy` boxes; `0` when the union is empty.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection(&a, &b);
    let union = area(&a) + area(&b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two `xyxy` boxes, in `(-1, 1]`.
///
/// Two zero-area boxes give `0`.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection(&a, &b);
    let union = area(&a) + area(&b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// Generalized IoU of two `cxcywh` boxes.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

/// GIoU of `(target, pred)` in `cxcywh` and its gradient with respect to `pred`.
pub fn giou_with_grad(target: [f64; 4], pred: [f64; 4]) -> (f64, [f64; 4]) {
    let a = cxcywh_to_xyxy(target);
    let b = cxcywh_to_xyxy(pred);
    let area_a = area(&a);
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    let area_b = bw.max(0.0) * bh.max(0.0);
    let (ix1, ix2) = (a[0].max(b[0]), a[2].min(b[2]));
    let (iy1, iy2) = (a[1].max(b[1]), a[3].min(b[3]));
    let (iw, ih) = ((ix2 - ix1).max(0.0), (iy2 - iy1).max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let (cx1, cx2) = (a[0].min(b[0]), a[2].max(b[2]));
    let (cy1, cy2) = (a[1].min(b[1]), a[3].max(b[3]));
    let (cw, ch) = (cx2 - cx1, cy2 - cy1);
    let hull = cw * ch;
    if union <= 0.0 || hull <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (hull - union) / hull;

    // partials of inter, area_b and hull with respect to (bx1, by1, bx2, by2)
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if b[0] > a[0] {
            d_inter[0] = -ih;
        }
        if b[2] < a[2] {
            d_inter[2] = ih;
        }
        if b[1] > a[1] {
            d_inter[1] = -iw;
        }
        if b[3] < a[3] {
            d_inter[3] = iw;
        }
    }
    let d_area = if bw > 0.0 && bh > 0.0 {
        [-bh, -bw, bh, bw]
    } else {
        [0.0; 4]
    };
    let mut d_hull = [0.0; 4];
    if b[0] < a[0] {
        d_hull[0] = -ch;
    }
    if b[2] > a[2] {
        d_hull[2] = ch;
    }
    if b[1] < a[1] {
        d_hull[1] = -cw;
    }
    if b[3] > a[3] {
        d_hull[3] = cw;
    }
    let mut d_xyxy = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        d_xyxy[i] = d_inter[i] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[i] / (hull * hull);
    }
    let grad = [
        d_xyxy[0] + d_xyxy[2],
        d_xyxy[1] + d_xyxy[3],
        0.5 * (d_xyxy[2] - d_xyxy[0]),
        0.5 * (d_xyxy[3] - d_xyxy[1]),
    ];
    (value, grad)
}
